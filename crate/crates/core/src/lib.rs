//! Data-enabled predictive control toolkit.
//!
//! Builds receding-horizon controllers directly from measured input/output
//! data (Hankel or Page matrix predictors), plus a certainty-equivalence
//! ARX baseline, robust min-max variants with disturbance feedback, a
//! reduced swing-equation grid surrogate for oscillation-damping studies,
//! and a closed-loop experiment harness.

pub(crate) mod linalg;
pub mod datamat;
pub mod error;
pub mod harness;
pub mod plant;
pub mod predictive;
pub mod qp;
pub mod robust;

pub use error::{Error, Result};
