//! Empirical likelihood estimation with a Le Cam type one-step local
//! refinement, plus the estimators and Monte Carlo machinery used to study
//! it on contaminated linear IV and CKLS short-rate models.

pub mod el_core;
pub mod el_local;
pub mod estimators;
pub mod experiments;
pub mod numerics;
