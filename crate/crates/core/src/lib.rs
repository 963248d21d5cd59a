//! Ergodic inference.
//!
//! Approximate distributions are built as a reparameterized Gaussian pushed
//! through a stack of ergodic, measure-preserving leapfrog transformations
//! (a deep ergodic inference network, [`dein::DeinModel`]). The stack is
//! trained by maximizing the expected target log-density of its output
//! ([`loss::ergodic_loss`]) with reparameterized Monte Carlo gradients
//! computed by exact reverse accumulation through every leapfrog step
//! ([`transforms::leapfrog_vjp`]).
//!
//! Targets and inference methods are trait objects registered by name
//! ([`targets::TargetRegistry`], [`methods::MethodRegistry`]) so experiments
//! can select them from configuration.
//!
//! ```
//! use ergodic_core::dein::{sample_noise, DeinModel, InitDist};
//! use ergodic_core::loss::ergodic_loss;
//! use ergodic_core::targets::TargetRegistry;
//! use ergodic_core::transforms::LeapfrogLayer;
//!
//! let target = TargetRegistry::builtin()
//!     .build("std_normal", &Default::default())
//!     .unwrap();
//! let model = DeinModel::new(
//!     InitDist::new(vec![0.0; 2], vec![2f64.ln(); 2], false),
//!     vec![LeapfrogLayer::new(2, 0.3, 5); 2],
//! )
//! .unwrap();
//! let noise = sample_noise(&model, 256, 1);
//! let loss = ergodic_loss(&model, target.as_ref(), &noise).unwrap();
//! assert!(loss.total.value > 0.0);
//! ```

pub mod baselines;
pub mod checks;
pub mod dein;
pub mod diagnostics;
mod error;
pub mod loss;
pub mod methods;
pub mod optimize;
pub mod params;
pub mod rng;
pub mod targets;
pub mod transforms;

pub use error::{Error, Result};
pub use params::NamedParams;
