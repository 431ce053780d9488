//! Outlier-robust adversarial training for small multilayer perceptrons.
//!
//! Per-sample adversarial losses are aggregated with an average of ranked
//! range: the `m` largest (likely mislabelled) and the `n-k` smallest losses
//! are ignored. Training works on an equivalent min-max form with two scalar
//! dual variables, so no sorting is needed inside the training loop.
//!
//! Modules, bottom-up: [`autograd`] (tensors and a reverse-mode tape),
//! [`models`] (MLP, SGD, checkpoints), [`losses`] (ranked-range
//! aggregation), [`attacks`] (FGSM / PGD), [`data`], [`trainer`], [`eval`]
//! and [`oracle`] (brute-force verifiers).

pub mod attacks;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod trainer;

pub use attacks::{AttackConfig, AttackKind, Bounds};
pub use autograd::{Gradients, Tape, Tensor, Var};
pub use data::{Dataset, FlipMap, GaussianComponent, GaussianSpec, NoiseSpec};
pub use error::{Error, IdxError, Result};
pub use eval::{EvalReport, EvalRow, GridResult, GridRow};
pub use losses::{DualVars, LossVector, MarginLoss, PhiParams, RankRange};
pub use models::{Layer, Mlp, Sgd};
pub use oracle::{CheckReport, SuiteConfig, SuiteReport};
pub use trainer::{EpochRecord, Mode, OratConfig, TrainHistory, TrainOutput};
