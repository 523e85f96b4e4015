//! A monolithic i-vector language recognizer with a linear Gaussian backend.
//!
//! The model treats each speech segment as a bag of feature frames generated
//! by a frozen mixture front end whose component means are shifted along
//! per-component loading directions by a hidden segment vector `x`. Each
//! language `l` contributes a Gaussian prior `x ~ N(m_l, W^{-1})`; the
//! backend parameters `(m_l, W)` are trained by EM on a variational lower
//! bound that is exact for this model.
//!
//! Pipeline: features -> [`stats`] -> ([`train`] | [`posterior`]) ->
//! [`score`] -> [`eval`], with [`synth`] providing seeded data with known
//! truth and [`io`]/[`model`] handling persistence.

pub mod error;
pub mod eval;
pub mod io;
mod linalg;
pub mod model;
pub mod posterior;
pub mod score;
pub mod stats;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
