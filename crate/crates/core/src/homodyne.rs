//! Homodyne quadrature selection.
//!
//! Detector `i` at angle `θi` turns the doubled field increment
//! `[dY; dY#]` into the real signal `cos θi dYi + sin θi dYi*`. Stacked over
//! all detectors this is `L = [diag(cos θ) | diag(sin θ)]`.
//!
//! Angles follow the convention `θ = 135°` ↔ `(-Y + Y*)/√2`, which is
//! `i/√2` times the momentum-type quadrature `(Y - Y*)/i`. The mapping from
//! angles to named quadratures is documented here and not enforced.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::doubled::{complexify, CMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HomodyneError {
    #[error("at least one detector angle is required")]
    NoAngles,
    #[error("detector angle {0} is not finite")]
    NonFinite(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomodyneScheme {
    angles: Vec<f64>,
    l: DMatrix<f64>,
}

impl HomodyneScheme {
    /// Detector angles in radians.
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn angles_deg(&self) -> Vec<f64> {
        self.angles.iter().map(|a| a.to_degrees()).collect()
    }

    /// Number of detectors.
    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// The real `m x 2m` selector.
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn l_complex(&self) -> CMatrix {
        complexify(&self.l)
    }
}

/// Build `L` from detector angles given in degrees.
pub fn quadrature_selector(angles_deg: &[f64]) -> Result<HomodyneScheme, HomodyneError> {
    if angles_deg.is_empty() {
        return Err(HomodyneError::NoAngles);
    }
    if let Some(&bad) = angles_deg.iter().find(|a| !a.is_finite()) {
        return Err(HomodyneError::NonFinite(bad));
    }
    let m = angles_deg.len();
    let angles: Vec<f64> = angles_deg.iter().map(|a| a.to_radians()).collect();
    let mut l = DMatrix::zeros(m, 2 * m);
    for (i, a) in angles.iter().enumerate() {
        let (s, c) = a.sin_cos();
        l[(i, i)] = c;
        l[(i, m + i)] = s;
    }
    Ok(HomodyneScheme { angles, l })
}
