//! Optimal classical filter for the homodyne record of an augmented system.
//!
//! The filter Riccati equation is
//!
//! ```text
//! F P + P F† + G G† − (G K† + P H†) L† (L K K† L†)⁻¹ L (G K† + P H†)† = 0
//! ```
//!
//! with gain `G_e = (G K† + P H†) L† (L K K† L†)⁻¹`, filter dynamics
//! `F_e = F − G_e L H` and cost `J = [C 0] P [C 0]†`.
//!
//! The stabilizing solution comes from the matrix sign function of the
//! Hamiltonian, refined by a few Newton-Kleinman steps, and is certified
//! before it is returned. [`cost_via_joint_lyapunov`] recomputes `J` from the
//! steady covariance of plant, controller and filter driven together; it does
//! not touch `P`.

use log::debug;
use thiserror::Error;

use crate::doubled::{hermitian_eigenvalues, hermitian_part, identity, max_abs, vstack, AlgebraError, CMatrix};
use crate::homodyne::HomodyneScheme;
use crate::interconnect::AugmentedSystem;
use crate::linalg::{self, fro_norm, LinalgError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error("innovation covariance L K K† L† is singular (a detector sees no shot noise)")]
    SingularInnovation,
    #[error("innovation covariance condition number {condition:.3e} exceeds {limit:.1e}")]
    IllConditioned { condition: f64, limit: f64 },
    #[error("innovation covariance is not real (imaginary part {imag:.3e})")]
    ComplexInnovation { imag: f64 },
    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),
    #[error("cost has imaginary part {imag:.3e}")]
    ComplexCost { imag: f64 },
    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:.3e})")]
    NotHurwitz { abscissa: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// Itô covariance of the doubled noise vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// `dW dW† = I dt`.
    #[default]
    Identity,
    /// `dW dW† = ½ I dt`.
    Symmetrized,
}

impl NoiseConvention {
    pub fn scale(self) -> f64 {
        match self {
            NoiseConvention::Identity => 1.0,
            NoiseConvention::Symmetrized => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative tolerance on the Riccati residual.
    pub tol: f64,
    /// Largest accepted condition number of the innovation covariance.
    pub condition_limit: f64,
    pub noise: NoiseConvention,
    pub max_sign_iterations: usize,
    pub refinement_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            condition_limit: 1e12,
            noise: NoiseConvention::Identity,
            max_sign_iterations: 100,
            refinement_steps: 4,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_noise(mut self, noise: NoiseConvention) -> Self {
        self.noise = noise;
        self
    }
}

/// Raw filtering data: state `dx = F x dt + G dw`, record
/// `dy = L (H x dt + K dw)`, cost row `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterProblem {
    pub f: CMatrix,
    pub g: CMatrix,
    pub h: CMatrix,
    pub k: CMatrix,
    pub l: CMatrix,
    pub c: CMatrix,
}

impl FilterProblem {
    pub fn new(f: CMatrix, g: CMatrix, h: CMatrix, k: CMatrix, l: CMatrix, c: CMatrix) -> Result<Self, SynthesisError> {
        let n = f.nrows();
        let dim = |what: &str, m: &CMatrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(SynthesisError::Dimension(format!(
                    "{what} is {:?}, expected {shape:?}",
                    m.shape()
                )))
            }
        };
        dim("F", &f, (n, n))?;
        dim("G", &g, (n, g.ncols()))?;
        dim("H", &h, (h.nrows(), n))?;
        dim("K", &k, (h.nrows(), g.ncols()))?;
        dim("L", &l, (l.nrows(), h.nrows()))?;
        dim("C", &c, (c.nrows(), n))?;
        Ok(Self { f, g, h, k, l, c })
    }

    pub fn from_augmented(aug: &AugmentedSystem, hd: &HomodyneScheme) -> Result<Self, SynthesisError> {
        if aug.h.nrows() != hd.l().ncols() {
            return Err(SynthesisError::Dimension(format!(
                "{} detectors for a measured field of doubled width {}",
                hd.len(),
                aug.h.nrows()
            )));
        }
        Self::new(
            aug.f.clone(),
            aug.g.clone(),
            aug.h.clone(),
            aug.k.clone(),
            hd.l_complex(),
            aug.c.clone(),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }
}

/// Noise-scaled blocks shared by the solver and the residual.
struct Reduced {
    gg: CMatrix,
    s: CMatrix,
    hc: CMatrix,
    r_inv: CMatrix,
}

fn reduce(p: &FilterProblem, opts: &SolverOptions) -> Result<Reduced, SynthesisError> {
    let w = opts.noise.scale();
    let lk = &p.l * &p.k;
    let r = (&lk * lk.adjoint()).scale(w);
    let imag = r.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if imag > 1e-10 * (1.0 + max_abs(&r)) {
        return Err(SynthesisError::ComplexInnovation { imag });
    }
    let sv = linalg::svd(&r, false, false)?.singular_values;
    let (hi, lo) = (sv.max(), sv.min());
    if hi == 0.0 || lo <= f64::EPSILON * hi * sv.len() as f64 {
        return Err(SynthesisError::SingularInnovation);
    }
    let condition = hi / lo;
    if condition > opts.condition_limit {
        return Err(SynthesisError::IllConditioned {
            condition,
            limit: opts.condition_limit,
        });
    }
    let r_inv = linalg::inverse(&hermitian_part(&r)).map_err(|_| SynthesisError::SingularInnovation)?;
    Ok(Reduced {
        gg: (&p.g * p.g.adjoint()).scale(w),
        s: (&p.g * lk.adjoint()).scale(w),
        hc: &p.l * &p.h,
        r_inv,
    })
}

impl Reduced {
    fn gain(&self, p: &CMatrix) -> CMatrix {
        (&self.s + p * self.hc.adjoint()) * &self.r_inv
    }

    fn residual(&self, f: &CMatrix, p: &CMatrix) -> f64 {
        let cross = &self.s + p * self.hc.adjoint();
        let res = f * p + p * f.adjoint() + &self.gg - &cross * &self.r_inv * cross.adjoint();
        max_abs(&res)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: CMatrix,
    /// Max-abs defect of the Riccati equation at `p`.
    pub residual: f64,
    /// `F − G_e L H` is Hurwitz.
    pub stabilizing: bool,
    /// `(F, L H)` passes the PBH detectability test.
    pub detectable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSynthesis {
    pub f_e: CMatrix,
    pub g_e: CMatrix,
    pub h_e: CMatrix,
    pub riccati: RiccatiSolution,
    pub cost: f64,
}

pub fn is_hurwitz(a: &CMatrix, margin: f64) -> bool {
    match linalg::spectral_abscissa(a) {
        Ok(x) => x < -margin,
        Err(_) => false,
    }
}

/// PBH test over the eigenvalues with non-negative real part.
fn is_detectable(f: &CMatrix, hc: &CMatrix) -> bool {
    let n = f.nrows();
    let Ok(ev) = linalg::eigenvalues(f) else {
        return false;
    };
    ev.iter().filter(|z| z.re >= 0.0).all(|&lambda| {
        let shifted = identity(n) * lambda - f;
        let stacked = vstack(n, &[&shifted, hc]).expect("widths agree");
        linalg::rank(&stacked, 1e-10).is_ok_and(|r| r == n)
    })
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(z: &CMatrix, max_iter: usize) -> Result<CMatrix, SynthesisError> {
    let n = z.nrows() as f64;
    let mut x = z.clone();
    for it in 0..max_iter {
        let inv = linalg::inverse(&x).map_err(|_| {
            SynthesisError::NoStabilizingSolution("Hamiltonian has eigenvalues on the imaginary axis".into())
        })?;
        let det = x.clone().determinant().norm();
        let mu = if det.is_finite() && det > 0.0 {
            det.powf(-1.0 / n)
        } else {
            1.0
        };
        let next = (x.scale(mu) + inv.scale(1.0 / mu)).scale(0.5);
        let change = fro_norm(&(&next - &x));
        let size = fro_norm(&next);
        x = next;
        if change <= 1e-13 * size {
            debug!("sign iteration converged after {} steps", it + 1);
            return Ok(x);
        }
    }
    Err(SynthesisError::NoStabilizingSolution(format!(
        "sign iteration did not converge in {max_iter} steps"
    )))
}

/// Stabilizing solution of the filter Riccati equation for `problem`.
pub fn solve_riccati(problem: &FilterProblem, opts: &SolverOptions) -> Result<RiccatiSolution, SynthesisError> {
    let red = reduce(problem, opts)?;
    let f = &problem.f;
    let n = f.nrows();
    if n == 0 {
        return Ok(RiccatiSolution {
            p: CMatrix::zeros(0, 0),
            residual: 0.0,
            stabilizing: true,
            detectable: true,
        });
    }

    // Decorrelated form A P + P A† − P B P + Q = 0.
    let a = f - &red.s * &red.r_inv * &red.hc;
    let q = hermitian_part(&(&red.gg - &red.s * &red.r_inv * red.s.adjoint()));
    let b = hermitian_part(&(red.hc.adjoint() * &red.r_inv * &red.hc));

    let mut z = CMatrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(&a.adjoint());
    z.view_mut((0, n), (n, n)).copy_from(&(-&b));
    z.view_mut((n, 0), (n, n)).copy_from(&(-&q));
    z.view_mut((n, n), (n, n)).copy_from(&(-&a));
    let w = matrix_sign(&z, opts.max_sign_iterations)?;

    // The stable subspace is ker(W + I) = span [I; P].
    let w11 = w.view((0, 0), (n, n)).into_owned();
    let w12 = w.view((0, n), (n, n)).into_owned();
    let w21 = w.view((n, 0), (n, n)).into_owned();
    let w22 = w.view((n, n), (n, n)).into_owned();
    let lhs = vstack(n, &[&w12, &(w22 + identity(n))])?;
    let rhs = -vstack(n, &[&(w11 + identity(n)), &w21])?;
    let mut p = hermitian_part(&linalg::lstsq(&lhs, &rhs)?);
    let mut residual = red.residual(f, &p);

    for _ in 0..opts.refinement_steps {
        let gain = red.gain(&p);
        let closed = f - &gain * &red.hc;
        if !is_hurwitz(&closed, 0.0) {
            break;
        }
        let forcing = &red.gg - &red.s * gain.adjoint() - &gain * red.s.adjoint()
            + &gain * linalg::inverse(&red.r_inv)? * gain.adjoint();
        let Ok(next) = linalg::solve_lyapunov_general(&closed, &hermitian_part(&forcing)) else {
            break;
        };
        let next = hermitian_part(&next);
        let next_residual = red.residual(f, &next);
        if next_residual >= residual {
            break;
        }
        p = next;
        residual = next_residual;
    }

    certify(problem, &red, p, residual, opts)
}

fn certify(
    problem: &FilterProblem,
    red: &Reduced,
    p: CMatrix,
    residual: f64,
    opts: &SolverOptions,
) -> Result<RiccatiSolution, SynthesisError> {
    let norm = fro_norm(&p);
    if !residual.is_finite() || residual >= opts.tol * (1.0 + norm) {
        return Err(SynthesisError::NoStabilizingSolution(format!(
            "residual {residual:.3e} exceeds {:.3e}",
            opts.tol * (1.0 + norm)
        )));
    }
    let min_eig = hermitian_eigenvalues(&p, f64::INFINITY)?
        .first()
        .copied()
        .unwrap_or(0.0);
    if min_eig < -1e-10 * norm.max(1.0) {
        return Err(SynthesisError::NoStabilizingSolution(format!(
            "solution is not positive semidefinite (eigenvalue {min_eig:.3e})"
        )));
    }
    let closed = &problem.f - red.gain(&p) * &red.hc;
    if !is_hurwitz(&closed, 0.0) {
        return Err(SynthesisError::NoStabilizingSolution(
            "filter dynamics F − G_e L H are not Hurwitz".into(),
        ));
    }
    Ok(RiccatiSolution {
        p,
        residual,
        stabilizing: true,
        detectable: is_detectable(&problem.f, &red.hc),
    })
}

pub fn solve_filter_riccati(
    aug: &AugmentedSystem,
    hd: &HomodyneScheme,
    opts: &SolverOptions,
) -> Result<RiccatiSolution, SynthesisError> {
    solve_riccati(&FilterProblem::from_augmented(aug, hd)?, opts)
}

/// Gain, filter matrices and cost for `problem`.
pub fn synthesize(problem: &FilterProblem, opts: &SolverOptions) -> Result<EstimatorSynthesis, SynthesisError> {
    let red = reduce(problem, opts)?;
    let riccati = solve_riccati(problem, opts)?;
    let g_e = red.gain(&riccati.p);
    let f_e = &problem.f - &g_e * &red.hc;
    let j = (&problem.c * &riccati.p * problem.c.adjoint()).trace();
    if j.im.abs() > 1e-10 * (1.0 + j.re.abs()) {
        return Err(SynthesisError::ComplexCost { imag: j.im });
    }
    Ok(EstimatorSynthesis {
        f_e,
        g_e,
        h_e: problem.c.clone(),
        riccati,
        cost: j.re,
    })
}

pub fn synthesize_estimator(
    aug: &AugmentedSystem,
    hd: &HomodyneScheme,
    opts: &SolverOptions,
) -> Result<EstimatorSynthesis, SynthesisError> {
    synthesize(&FilterProblem::from_augmented(aug, hd)?, opts)
}

/// Solve `A X + X A† + Q = 0` for Hurwitz `A`.
pub fn solve_lyapunov(a: &CMatrix, q: &CMatrix) -> Result<CMatrix, SynthesisError> {
    let abscissa = linalg::spectral_abscissa(a)?;
    if abscissa >= 0.0 {
        return Err(SynthesisError::NotHurwitz { abscissa });
    }
    Ok(linalg::solve_lyapunov_general(a, q)?)
}

/// Steady error variance of a filter with arbitrary gain `g_e`, from the
/// joint covariance of state and filter.
pub fn joint_error_cost(problem: &FilterProblem, g_e: &CMatrix, noise: NoiseConvention) -> Result<f64, SynthesisError> {
    let n = problem.state_dim();
    if g_e.shape() != (n, problem.l.nrows()) {
        return Err(SynthesisError::Dimension(format!(
            "gain is {:?}, expected {:?}",
            g_e.shape(),
            (n, problem.l.nrows())
        )));
    }
    let hc = &problem.l * &problem.h;
    let f_e = &problem.f - g_e * &hc;
    let mut a = CMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&problem.f);
    a.view_mut((n, 0), (n, n)).copy_from(&(g_e * &hc));
    a.view_mut((n, n), (n, n)).copy_from(&f_e);
    let b = vstack(problem.g.ncols(), &[&problem.g, &(g_e * &problem.l * &problem.k)])?;
    let sigma = solve_lyapunov(&a, &(&b * b.adjoint()).scale(noise.scale()))?;

    let m = problem.c.nrows();
    let mut e = CMatrix::zeros(m, 2 * n);
    e.view_mut((0, 0), (m, n)).copy_from(&problem.c);
    e.view_mut((0, n), (m, n)).copy_from(&(-&problem.c));
    let j = (&e * sigma * e.adjoint()).trace();
    if j.im.abs() > 1e-10 * (1.0 + j.re.abs()) {
        return Err(SynthesisError::ComplexCost { imag: j.im });
    }
    Ok(j.re)
}

pub fn cost_via_joint_lyapunov(
    aug: &AugmentedSystem,
    est: &EstimatorSynthesis,
    hd: &HomodyneScheme,
    opts: &SolverOptions,
) -> Result<f64, SynthesisError> {
    joint_error_cost(&FilterProblem::from_augmented(aug, hd)?, &est.g_e, opts.noise)
}

/// Variance of `z` with no measurement at all.
pub fn unfiltered_variance(problem: &FilterProblem, noise: NoiseConvention) -> Result<f64, SynthesisError> {
    let sigma = solve_lyapunov(&problem.f, &(&problem.g * problem.g.adjoint()).scale(noise.scale()))?;
    Ok((&problem.c * sigma * problem.c.adjoint()).trace().re)
}
