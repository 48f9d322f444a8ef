//! Taboo-trap adversarial input detection with interval-bound certification.
//!
//! The crate trains small CNNs from scratch, plants thresholded "taboo"
//! detector neurons selected by a secret key, propagates box-domain interval
//! bounds through every layer to certify detection margins, fine-tunes with
//! the detection/certification losses, and ships an attack suite plus an
//! evaluation harness that emits machine-readable reports.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod interval;
pub mod model;
pub mod optim;
pub mod taboo;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use interval::{BoundSet, BoundTag, IntervalTensor};
pub use model::{LayerSpec, ModelSpec, Parameters};
pub use taboo::{CertificationResult, Detection, TabooKey, Verdict};
pub use tensor::Tensor;
