//! RGB-thermal early-fusion toolkit.
//!
//! * [`tensor`]: the dense tensor type, `ZTEN` files and PNG pair loading.
//! * [`gradient`] and [`shape`]: shape-priority self-gating masks.
//! * [`weak`]: image-level and box-level weak-supervision targets and losses.
//! * [`kd`]: core-knowledge feature distillation kernels.
//! * [`bench`]: throughput harness for the fusion pass.
//! * [`cli`]: the `shapefuse` command line.

pub mod bench;
pub mod cli;
pub mod error;
pub mod gradient;
pub mod kd;
mod numeric;
pub mod shape;
pub mod synthetic;
pub mod tensor;
pub mod weak;

pub use error::{Error, Result};
pub use gradient::GradientField;
pub use shape::{fuse, FusionOutput, GatingMasks, ShapeConfig, SsimParams, WindowStats};
pub use tensor::{MultispectralPair, NormalizationSpec, Tensor};
