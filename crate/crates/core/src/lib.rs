//! Production function estimation with latent group structures.
//!
//! Firm-level GMM moment conditions from three identification strategies
//! are embedded in a classifier-Lasso criterion that estimates group
//! memberships and group-specific technologies jointly. Around the
//! estimator sit group-count selection by information criteria, an
//! analytical simulation design, and a Monte Carlo harness.

pub mod classo;
pub mod empirical;
pub mod error;
pub mod moments;
pub mod montecarlo;
pub mod panel;
pub mod selection;
pub mod simulate;
pub mod solver;

pub use classo::{fit, CLassoConfig, Classification, FitResult, GroupEstimates};
pub use error::{Error, Result};
pub use moments::{MomentSpec, Strategy};
pub use panel::{CsvSchema, PanelData};
