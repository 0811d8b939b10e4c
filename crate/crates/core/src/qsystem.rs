//! Linear quantum stochastic systems in doubled-up form.
//!
//! A system is `d[a; a#] = F [a; a#] dt + Σ_i G_i d[A_i; A_i#]` with outputs
//! `d[Y_j; Y_j#] = H_j [a; a#] dt + Σ_i K_ji d[A_i; A_i#]`, plus an optional
//! scalar cost row `z = C [a; a#]`. Channels are named; every block formula
//! downstream looks channels up by name.
//!
//! Matrices of a single channel are kept in per-channel doubled order. The
//! realizability checker works on the global doubled order obtained with
//! [`crate::doubled::cols_to_global`] and friends.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::doubled::{
    self, c, cols_to_global, delta_embed, hermitian_defect, hermitian_part, identity, inertia, is_delta_structured,
    max_abs, re, rows_from_global, rows_to_global, AlgebraError, CMatrix, Inertia, SignatureMatrix, DEFAULT_TOL,
};
use crate::linalg::{self, LinalgError};

/// Channel names used by the plant/controller loop.
pub mod channel {
    /// Plant vacuum noise.
    pub const PLANT_NOISE: &str = "A";
    /// Control field fed back into the plant.
    pub const CONTROL: &str = "U";
    /// Plant output field.
    pub const PLANT_OUTPUT: &str = "Y";
    /// Controller vacuum noise.
    pub const CONTROLLER_NOISE: &str = "A_tilde";
    /// Controller output field sent to the homodyne detectors.
    pub const MEASURED: &str = "Y_tilde";
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{0} is not doubled-up (Δ) structured")]
    NotDelta(String),
    #[error("duplicate channel name `{0}`")]
    DuplicateChannel(String),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("missing required channel `{0}`")]
    MissingChannel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("commutation matrix must have inertia ({expected}, 0, {expected}), found {found:?}")]
    CommutationInertia { expected: usize, found: Inertia },
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputChannel {
    pub name: String,
    pub half_width: usize,
    /// `2n x 2m` input matrix.
    pub g: CMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputChannel {
    pub name: String,
    pub half_width: usize,
    /// `2m x 2n` output matrix.
    pub h: CMatrix,
    /// Feedthrough blocks, one per input channel in declaration order.
    pub k: Vec<CMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumLinearSystem {
    n: usize,
    f: CMatrix,
    inputs: Vec<InputChannel>,
    outputs: Vec<OutputChannel>,
    cost: Option<CMatrix>,
}

/// Name, half-width, `H` and named feedthrough blocks.
type PendingOutput = (String, usize, CMatrix, Vec<(String, CMatrix)>);

/// Incremental construction of a [`QuantumLinearSystem`]; shapes and
/// structure are validated by [`SystemBuilder::build`].
#[derive(Debug, Clone)]
pub struct SystemBuilder {
    n: usize,
    f: CMatrix,
    inputs: Vec<(String, usize, CMatrix)>,
    outputs: Vec<PendingOutput>,
    cost: Option<CMatrix>,
    tol: f64,
}

impl SystemBuilder {
    pub fn new(n: usize, f: CMatrix) -> Self {
        Self {
            n,
            f,
            inputs: Vec::new(),
            outputs: Vec::new(),
            cost: None,
            tol: DEFAULT_TOL,
        }
    }

    pub fn input(mut self, name: &str, half_width: usize, g: CMatrix) -> Self {
        self.inputs.push((name.to_owned(), half_width, g));
        self
    }

    /// Output channel; feedthrough blocks not listed are zero.
    pub fn output<'a>(
        mut self,
        name: &str,
        half_width: usize,
        h: CMatrix,
        k: impl IntoIterator<Item = (&'a str, CMatrix)>,
    ) -> Self {
        let k = k.into_iter().map(|(s, m)| (s.to_owned(), m)).collect();
        self.outputs.push((name.to_owned(), half_width, h, k));
        self
    }

    pub fn cost(mut self, c: CMatrix) -> Self {
        self.cost = Some(c);
        self
    }

    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn build(self) -> Result<QuantumLinearSystem, SystemError> {
        let n = self.n;
        let tol = self.tol;
        check_block("F", &self.f, (2 * n, 2 * n), tol)?;

        let mut inputs = Vec::with_capacity(self.inputs.len());
        for (name, w, g) in self.inputs {
            if inputs.iter().any(|i: &InputChannel| i.name == name) {
                return Err(SystemError::DuplicateChannel(name));
            }
            check_block(&format!("G[{name}]"), &g, (2 * n, 2 * w), tol)?;
            inputs.push(InputChannel { name, half_width: w, g });
        }

        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (name, w, h, k_list) in self.outputs {
            if outputs.iter().any(|o: &OutputChannel| o.name == name) {
                return Err(SystemError::DuplicateChannel(name));
            }
            check_block(&format!("H[{name}]"), &h, (2 * w, 2 * n), tol)?;
            let mut k: Vec<CMatrix> = inputs.iter().map(|i| CMatrix::zeros(2 * w, 2 * i.half_width)).collect();
            for (in_name, block) in k_list {
                let idx = inputs
                    .iter()
                    .position(|i| i.name == in_name)
                    .ok_or_else(|| SystemError::UnknownChannel(in_name.clone()))?;
                check_block(
                    &format!("K[{name},{in_name}]"),
                    &block,
                    (2 * w, 2 * inputs[idx].half_width),
                    tol,
                )?;
                k[idx] = block;
            }
            outputs.push(OutputChannel {
                name,
                half_width: w,
                h,
                k,
            });
        }

        if let Some(cost) = &self.cost {
            if cost.shape() != (1, 2 * n) {
                return Err(SystemError::Shape {
                    what: "C".into(),
                    expected: (1, 2 * n),
                    found: cost.shape(),
                });
            }
            doubled::ensure_finite(cost)?;
        }

        Ok(QuantumLinearSystem {
            n,
            f: self.f,
            inputs,
            outputs,
            cost: self.cost,
        })
    }
}

fn check_block(what: &str, m: &CMatrix, expected: (usize, usize), tol: f64) -> Result<(), SystemError> {
    if m.shape() != expected {
        return Err(SystemError::Shape {
            what: what.to_owned(),
            expected,
            found: m.shape(),
        });
    }
    doubled::ensure_finite(m)?;
    if !is_delta_structured(m, tol)? {
        return Err(SystemError::NotDelta(what.to_owned()));
    }
    Ok(())
}

impl QuantumLinearSystem {
    pub fn builder(n: usize, f: CMatrix) -> SystemBuilder {
        SystemBuilder::new(n, f)
    }

    /// Split globally doubled `(G, H, K)` into named channels.
    pub fn from_global_blocks(
        n: usize,
        f: CMatrix,
        g: &CMatrix,
        h: &CMatrix,
        k: &CMatrix,
        inputs: &[(&str, usize)],
        outputs: &[(&str, usize)],
    ) -> Result<Self, SystemError> {
        let in_widths: Vec<usize> = inputs.iter().map(|&(_, w)| w).collect();
        let out_widths: Vec<usize> = outputs.iter().map(|&(_, w)| w).collect();
        let g_blocked = doubled::cols_from_global(g, &in_widths)?;
        let h_blocked = rows_from_global(h, &out_widths)?;
        let k_blocked = doubled::cols_from_global(&rows_from_global(k, &out_widths)?, &in_widths)?;

        let mut builder = SystemBuilder::new(n, f);
        let mut col = 0;
        for &(name, w) in inputs {
            builder = builder.input(name, w, g_blocked.columns(col, 2 * w).into_owned());
            col += 2 * w;
        }
        let mut row = 0;
        for &(name, w) in outputs {
            let h_j = h_blocked.rows(row, 2 * w).into_owned();
            let mut col = 0;
            let mut ks = Vec::new();
            for &(in_name, wi) in inputs {
                ks.push((in_name, k_blocked.view((row, col), (2 * w, 2 * wi)).into_owned()));
                col += 2 * wi;
            }
            builder = builder.output(name, w, h_j, ks);
            row += 2 * w;
        }
        builder.build()
    }

    /// State half-dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn f(&self) -> &CMatrix {
        &self.f
    }

    pub fn inputs(&self) -> &[InputChannel] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[OutputChannel] {
        &self.outputs
    }

    pub fn cost(&self) -> Option<&CMatrix> {
        self.cost.as_ref()
    }

    pub fn with_cost(mut self, cost: CMatrix) -> Result<Self, SystemError> {
        if cost.shape() != (1, 2 * self.n) {
            return Err(SystemError::Shape {
                what: "C".into(),
                expected: (1, 2 * self.n),
                found: cost.shape(),
            });
        }
        doubled::ensure_finite(&cost)?;
        self.cost = Some(cost);
        Ok(self)
    }

    /// Remove an output channel (for instance an unused output field).
    pub fn without_output(mut self, name: &str) -> Result<Self, SystemError> {
        let idx = self.output_index(name)?;
        self.outputs.remove(idx);
        Ok(self)
    }

    pub fn input(&self, name: &str) -> Option<&InputChannel> {
        self.inputs.iter().find(|i| i.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&OutputChannel> {
        self.outputs.iter().find(|o| o.name == name)
    }

    fn output_index(&self, name: &str) -> Result<usize, SystemError> {
        self.outputs
            .iter()
            .position(|o| o.name == name)
            .ok_or_else(|| SystemError::UnknownChannel(name.to_owned()))
    }

    /// Half-width of a channel, zero when absent.
    pub fn input_width(&self, name: &str) -> usize {
        self.input(name).map_or(0, |i| i.half_width)
    }

    pub fn output_width(&self, name: &str) -> usize {
        self.output(name).map_or(0, |o| o.half_width)
    }

    /// `G` block of an input channel; a `2n x 0` matrix when absent.
    pub fn g(&self, input: &str) -> CMatrix {
        self.input(input)
            .map_or_else(|| CMatrix::zeros(2 * self.n, 0), |i| i.g.clone())
    }

    /// `H` block of an output channel; a `0 x 2n` matrix when absent.
    pub fn h(&self, output: &str) -> CMatrix {
        self.output(output)
            .map_or_else(|| CMatrix::zeros(0, 2 * self.n), |o| o.h.clone())
    }

    /// `K` block from `input` to `output`; zero-sized when either is absent.
    pub fn k(&self, output: &str, input: &str) -> CMatrix {
        let rows = 2 * self.output_width(output);
        let cols = 2 * self.input_width(input);
        match (
            self.outputs.iter().find(|o| o.name == output),
            self.inputs.iter().position(|i| i.name == input),
        ) {
            (Some(o), Some(idx)) => o.k[idx].clone(),
            _ => CMatrix::zeros(rows, cols),
        }
    }

    pub fn input_widths(&self) -> Vec<usize> {
        self.inputs.iter().map(|i| i.half_width).collect()
    }

    pub fn output_widths(&self) -> Vec<usize> {
        self.outputs.iter().map(|o| o.half_width).collect()
    }

    /// All `G` blocks side by side, per-channel doubled order.
    pub fn g_concat(&self) -> CMatrix {
        let parts: Vec<&CMatrix> = self.inputs.iter().map(|i| &i.g).collect();
        doubled::hstack(2 * self.n, &parts).expect("validated shapes")
    }

    pub fn h_concat(&self) -> CMatrix {
        let parts: Vec<&CMatrix> = self.outputs.iter().map(|o| &o.h).collect();
        doubled::vstack(2 * self.n, &parts).expect("validated shapes")
    }

    pub fn k_concat(&self) -> CMatrix {
        let cols = 2 * self.input_widths().iter().sum::<usize>();
        let rows: Vec<CMatrix> = self
            .outputs
            .iter()
            .map(|o| {
                let parts: Vec<&CMatrix> = o.k.iter().collect();
                doubled::hstack(2 * o.half_width, &parts).expect("validated shapes")
            })
            .collect();
        let refs: Vec<&CMatrix> = rows.iter().collect();
        doubled::vstack(cols, &refs).expect("validated shapes")
    }

    /// `(G, H, K)` in global doubled order over all channels.
    pub fn global_blocks(&self) -> (CMatrix, CMatrix, CMatrix) {
        let iw = self.input_widths();
        let ow = self.output_widths();
        let g = cols_to_global(&self.g_concat(), &iw).expect("validated shapes");
        let h = rows_to_global(&self.h_concat(), &ow).expect("validated shapes");
        let k = cols_to_global(&rows_to_global(&self.k_concat(), &ow).expect("validated shapes"), &iw)
            .expect("validated shapes");
        (g, h, k)
    }
}

/// A system playing the coherent controller in the feedback loop.
///
/// Inputs may only be [`channel::CONTROLLER_NOISE`] and
/// [`channel::PLANT_OUTPUT`]; outputs must include [`channel::MEASURED`] and
/// may include [`channel::CONTROL`]. Any further outputs are unused fields.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherentController {
    system: QuantumLinearSystem,
}

/// Evidence that a controller is a legal quantum device.
#[derive(Debug, Clone, PartialEq)]
pub enum ControllerCertificate {
    Dynamic(PhysicalRealization),
    /// Static device: the scattering matrix is unitary.
    Static {
        unitarity_defect: f64,
    },
}

impl CoherentController {
    pub fn new(system: QuantumLinearSystem) -> Result<Self, SystemError> {
        for i in system.inputs() {
            if i.name != channel::CONTROLLER_NOISE && i.name != channel::PLANT_OUTPUT {
                return Err(SystemError::UnknownChannel(i.name.clone()));
            }
        }
        if system.input(channel::PLANT_OUTPUT).is_none() {
            return Err(SystemError::MissingChannel(channel::PLANT_OUTPUT.into()));
        }
        if system.output(channel::MEASURED).is_none() {
            return Err(SystemError::MissingChannel(channel::MEASURED.into()));
        }
        Ok(Self { system })
    }

    pub fn system(&self) -> &QuantumLinearSystem {
        &self.system
    }

    pub fn into_system(self) -> QuantumLinearSystem {
        self.system
    }

    /// True when the controller feeds a field back into the plant.
    pub fn has_feedback(&self) -> bool {
        self.system.output_width(channel::CONTROL) > 0
    }

    /// The annihilation block of the global feedthrough matrix.
    pub fn scattering_matrix(&self) -> CMatrix {
        let (_, _, k) = self.system.global_blocks();
        let (p, q) = (k.nrows() / 2, k.ncols() / 2);
        k.view((0, 0), (p, q)).into_owned()
    }

    /// Realizability of the controller, with unused outputs padded in as
    /// needed. Static (`n_c = 0`) devices are certified by unitarity of the
    /// doubled scattering matrix instead of `K = I`.
    pub fn certify(&self, tol: f64) -> Result<ControllerCertificate, NotRealizable> {
        if self.system.n() > 0 {
            return check_physical_realizability(&self.system, tol).map(ControllerCertificate::Dynamic);
        }
        check_static_unitarity(&self.system, tol).map(|defect| ControllerCertificate::Static {
            unitarity_defect: defect,
        })
    }
}

/// Unitarity defect of the doubled feedthrough of a system without
/// internal modes.
pub fn check_static_unitarity(sys: &QuantumLinearSystem, tol: f64) -> Result<f64, NotRealizable> {
    let (_, _, k) = sys.global_blocks();
    if !is_delta_structured(&k, tol).unwrap_or(false) {
        return Err(NotRealizable::ScatteringNotUnitary { defect: f64::INFINITY });
    }
    let defect = max_abs(&(&k * k.adjoint() - identity(k.nrows())));
    if defect > tol {
        return Err(NotRealizable::ScatteringNotUnitary { defect });
    }
    Ok(defect)
}

/// The physical realization `(Θ, M, N)` of a system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhysicalRealization {
    /// Commutation matrix, Hermitian with inertia `(n, 0, n)`.
    #[serde(with = "doubled::literal")]
    pub theta: CMatrix,
    /// Hamiltonian matrix, Hermitian and Δ-structured.
    #[serde(with = "doubled::literal")]
    pub m: CMatrix,
    /// Coupling matrix in global doubled order over the *input* channels:
    /// row `j` is the output field paired with input field `j`, including
    /// any padded unused outputs.
    #[serde(with = "doubled::literal")]
    pub n: CMatrix,
    pub residuals: Residuals,
    /// Global input indices whose output was synthesized as an unused field.
    pub padded: Vec<usize>,
}

/// Max-abs defects of the realization equations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Residuals {
    /// `F Θ + Θ F† + G J G†`.
    pub commutation: f64,
    /// `F + iΘM + ½ΘN†JN`.
    pub dynamics: f64,
    /// `G + ΘN†J`.
    pub coupling: f64,
    /// `H - N` on the declared outputs.
    pub output: f64,
    /// Deviation of the (permuted, padded) feedthrough from the identity.
    pub feedthrough: f64,
    /// `M - M†` before symmetrization.
    pub hamiltonian: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        [
            self.commutation,
            self.dynamics,
            self.coupling,
            self.output,
            self.feedthrough,
            self.hamiltonian,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// The realization condition that failed.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NotRealizable {
    #[error("feedthrough K is not the identity (nor completable to it with unused outputs): {0}")]
    KNotIdentity(String),
    #[error("no commutation matrix Θ solves F Θ + Θ F† + G J G† = 0: {0}")]
    NoCommutationMatrix(String),
    #[error(
        "commutation matrix Θ = T J T† needs T non-singular: inertia {found:?}, expected ({expected}, 0, {expected})"
    )]
    WrongInertia { expected: usize, found: Inertia },
    #[error("coupling mismatch: G ≠ -Θ H† J (max defect {residual:.3e})")]
    CouplingMismatch { residual: f64 },
    #[error("Hamiltonian matrix M is not Hermitian (max defect {defect:.3e})")]
    MNotHermitian { defect: f64 },
    #[error("Hamiltonian matrix M is not Δ-structured")]
    MNotDeltaStructured,
    #[error("static device scattering matrix is not unitary (max defect {defect:.3e})")]
    ScatteringNotUnitary { defect: f64 },
}

/// Match each output row of the annihilation feedthrough block to the input
/// it copies. Returns `sigma[i] = input index of output i`.
fn feedthrough_pattern(k: &CMatrix, tol: f64) -> Result<(Vec<usize>, f64), NotRealizable> {
    let (rows, cols) = (k.nrows() / 2, k.ncols() / 2);
    if rows > cols {
        return Err(NotRealizable::KNotIdentity(format!(
            "{rows} output fields exceed {cols} input fields"
        )));
    }
    match is_delta_structured(k, tol) {
        Ok(true) => {}
        _ => return Err(NotRealizable::KNotIdentity("K is not Δ-structured".into())),
    }
    let k2_defect = max_abs(&k.view((0, cols), (rows, cols)).into_owned());
    if k2_defect > tol {
        return Err(NotRealizable::KNotIdentity(format!(
            "K mixes annihilation and creation fields (defect {k2_defect:.3e})"
        )));
    }
    let mut sigma = Vec::with_capacity(rows);
    let mut defect = k2_defect;
    for i in 0..rows {
        let (j, _) = (0..cols)
            .map(|j| (j, (k[(i, j)] - re(1.0)).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| NotRealizable::KNotIdentity("empty input".into()))?;
        let row_defect = (0..cols)
            .map(|jj| {
                let target = if jj == j { re(1.0) } else { re(0.0) };
                (k[(i, jj)] - target).norm()
            })
            .fold(0.0, f64::max);
        if row_defect > tol {
            return Err(NotRealizable::KNotIdentity(format!(
                "output row {i} is not a unit selector (defect {row_defect:.3e})"
            )));
        }
        if sigma.contains(&j) {
            return Err(NotRealizable::KNotIdentity(format!(
                "input field {j} appears in two outputs"
            )));
        }
        defect = defect.max(row_defect);
        sigma.push(j);
    }
    Ok((sigma, defect))
}

/// Check whether a system is a physically realizable open oscillator and
/// recover `(Θ, M, N)`.
///
/// `Θ` comes from the linear equation `F Θ + Θ F† + G J G† = 0` (augmented
/// with the coupling equations `G = -Θ H† J` when that operator is
/// singular). Outputs missing from `K = I` are padded with unused fields
/// whose coupling rows follow from `N = -J G† Θ⁻¹`.
pub fn check_physical_realizability(sys: &QuantumLinearSystem, tol: f64) -> Result<PhysicalRealization, NotRealizable> {
    let n = sys.n();
    let (g, h, k) = sys.global_blocks();
    let m_in = g.ncols() / 2;
    let f = sys.f();

    let (sigma, feedthrough) = feedthrough_pattern(&k, tol)?;
    let j_in = SignatureMatrix::new(m_in).full();
    let gjg = &g * &j_in * g.adjoint();

    // global input column indices covered by declared outputs
    let real_cols: Vec<usize> = sigma.iter().flat_map(|&s| [s, s + m_in]).collect();
    let real_rows: Vec<usize> = (0..sigma.len()).flat_map(|i| [i, i + sigma.len()]).collect();

    let theta = match linalg::solve_lyapunov_general(f, &gjg) {
        Ok(theta) => theta,
        Err(LinalgError::SingularLyapunov { .. }) => {
            solve_commutation_stacked(f, &gjg, &g, &h, &real_cols, &real_rows, &j_in)?
        }
        Err(e) => return Err(NotRealizable::NoCommutationMatrix(e.to_string())),
    };
    let theta = hermitian_part(&theta);
    let commutation = linalg::lyapunov_residual(f, &theta, &gjg);
    if commutation > tol {
        return Err(NotRealizable::NoCommutationMatrix(format!(
            "residual {commutation:.3e}"
        )));
    }

    let found = inertia(&theta, tol).map_err(|e| NotRealizable::NoCommutationMatrix(e.to_string()))?;
    if found != Inertia::new(n, 0, n) {
        return Err(NotRealizable::WrongInertia { expected: n, found });
    }
    let theta_inv = linalg::inverse(&theta).map_err(|e| NotRealizable::NoCommutationMatrix(e.to_string()))?;

    // N in global order over inputs: declared outputs where present,
    // otherwise -J G† Θ⁻¹ for the unused field.
    let padded_rows = -(&j_in * g.adjoint() * &theta_inv);
    let mut n_mat = padded_rows.clone();
    let m_out = sigma.len();
    for (i, &s) in sigma.iter().enumerate() {
        n_mat.set_row(s, &h.row(i));
        n_mat.set_row(s + m_in, &h.row(i + m_out));
    }
    let padded: Vec<usize> = (0..m_in).filter(|j| !sigma.contains(j)).collect();

    let coupling = max_abs(&(&g + &theta * n_mat.adjoint() * &j_in));
    if coupling > tol {
        return Err(NotRealizable::CouplingMismatch { residual: coupling });
    }
    let output = sigma
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            (0..h.ncols())
                .map(|j| {
                    let a = (h[(i, j)] - n_mat[(s, j)]).norm();
                    let b = (h[(i + m_out, j)] - n_mat[(s + m_in, j)]).norm();
                    a.max(b)
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);

    let i_unit = c(0.0, 1.0);
    let njn = n_mat.adjoint() * &j_in * &n_mat;
    let m_raw = (&theta_inv * f).scale(1.0) * i_unit + njn.clone() * (i_unit * 0.5);
    let hamiltonian = hermitian_defect(&m_raw);
    if hamiltonian > tol {
        return Err(NotRealizable::MNotHermitian { defect: hamiltonian });
    }
    let m = hermitian_part(&m_raw);
    if !is_delta_structured(&m, tol).unwrap_or(false) {
        return Err(NotRealizable::MNotDeltaStructured);
    }
    let f_rebuilt = -(&theta * &m) * i_unit - (&theta * &njn).scale(0.5);
    let dynamics = max_abs(&(f - f_rebuilt));

    Ok(PhysicalRealization {
        theta,
        m,
        n: n_mat,
        residuals: Residuals {
            commutation,
            dynamics,
            coupling,
            output,
            feedthrough,
            hamiltonian,
        },
        padded,
    })
}

/// Least-squares Θ from the commutation and coupling equations together.
fn solve_commutation_stacked(
    f: &CMatrix,
    gjg: &CMatrix,
    g: &CMatrix,
    h: &CMatrix,
    real_cols: &[usize],
    real_rows: &[usize],
    j_in: &CMatrix,
) -> Result<CMatrix, NotRealizable> {
    let dim = f.nrows();
    let unknowns = dim * dim;
    // vec(F Θ + Θ F†) = (I ⊗ F + conj(F) ⊗ I) vec(Θ)
    let mut lyap = CMatrix::zeros(unknowns, unknowns);
    for col in 0..dim {
        for row in 0..dim {
            let r = col * dim + row;
            for k in 0..dim {
                lyap[(r, col * dim + k)] += f[(row, k)];
                lyap[(r, k * dim + row)] += f[(col, k)].conj();
            }
        }
    }
    // Θ B = -G_r with B = H_r† J_r, vec(Θ B) = (Bᵀ ⊗ I) vec(Θ)
    let h_r = CMatrix::from_fn(real_rows.len(), dim, |i, j| h[(real_rows[i], j)]);
    let j_r = CMatrix::from_fn(real_cols.len(), real_cols.len(), |i, j| {
        j_in[(real_cols[i], real_cols[j])]
    });
    let b = h_r.adjoint() * j_r;
    let g_r = CMatrix::from_fn(dim, real_cols.len(), |i, j| g[(i, real_cols[j])]);
    let extra = b.ncols() * dim;
    let mut coup = CMatrix::zeros(extra, unknowns);
    for bc in 0..b.ncols() {
        for row in 0..dim {
            for k in 0..dim {
                coup[(bc * dim + row, k * dim + row)] = b[(k, bc)];
            }
        }
    }
    let a =
        doubled::vstack(unknowns, &[&lyap, &coup]).map_err(|e| NotRealizable::NoCommutationMatrix(e.to_string()))?;
    let mut rhs = CMatrix::zeros(unknowns + extra, 1);
    for (idx, z) in gjg.iter().enumerate() {
        rhs[(idx, 0)] = -z;
    }
    for (idx, z) in g_r.iter().enumerate() {
        rhs[(unknowns + idx, 0)] = -z;
    }
    let rank = linalg::rank(&a, 1e-12).map_err(|e| NotRealizable::NoCommutationMatrix(e.to_string()))?;
    if rank < unknowns {
        return Err(NotRealizable::NoCommutationMatrix(
            "commutation equations do not determine Θ uniquely".into(),
        ));
    }
    let v = linalg::lstsq(&a, &rhs).map_err(|e| NotRealizable::NoCommutationMatrix(e.to_string()))?;
    Ok(CMatrix::from_iterator(dim, dim, v.iter().copied()))
}

/// Build `(F, G, H, K)` from a realization: `F = -iΘM - ½ΘN†JN`,
/// `G = -ΘN†J`, `H = N`, `K = I`. The result has one input channel `in` and
/// one output channel `out`.
pub fn realize(theta: &CMatrix, m: &CMatrix, n_mat: &CMatrix, tol: f64) -> Result<QuantumLinearSystem, SystemError> {
    let dim = theta.nrows();
    if !theta.is_square() || !dim.is_multiple_of(2) {
        return Err(SystemError::Shape {
            what: "Θ".into(),
            expected: (dim, dim),
            found: theta.shape(),
        });
    }
    let n = dim / 2;
    let found = inertia(theta, tol)?;
    if found != Inertia::new(n, 0, n) {
        return Err(SystemError::CommutationInertia { expected: n, found });
    }
    if m.shape() != (dim, dim) {
        return Err(SystemError::Shape {
            what: "M".into(),
            expected: (dim, dim),
            found: m.shape(),
        });
    }
    let defect = hermitian_defect(m);
    if defect > tol {
        return Err(AlgebraError::NotHermitian { defect }.into());
    }
    if !is_delta_structured(m, tol)? {
        return Err(SystemError::NotDelta("M".into()));
    }
    if n_mat.ncols() != dim || !n_mat.nrows().is_multiple_of(2) {
        return Err(SystemError::Shape {
            what: "N".into(),
            expected: (n_mat.nrows() + n_mat.nrows() % 2, dim),
            found: n_mat.shape(),
        });
    }
    if !is_delta_structured(n_mat, tol)? {
        return Err(SystemError::NotDelta("N".into()));
    }
    let mf = n_mat.nrows() / 2;
    let j = SignatureMatrix::new(mf).full();
    let i_unit = c(0.0, 1.0);
    let f = -(theta * m) * i_unit - (theta * n_mat.adjoint() * &j * n_mat).scale(0.5);
    let g = -(theta * n_mat.adjoint() * &j);
    QuantumLinearSystem::from_global_blocks(n, f, &g, n_mat, &identity(2 * mf), &[("in", mf)], &[("out", mf)])
}

fn scalar(z: Complex64) -> CMatrix {
    CMatrix::from_element(1, 1, z)
}

fn doubled_scalar(a1: Complex64, a2: Complex64) -> CMatrix {
    delta_embed(scalar(a1), scalar(a2)).expect("scalar blocks").full()
}

fn check_rates(kappa1: f64, kappa2: f64) -> Result<(), SystemError> {
    if !(kappa1 > 0.0 && kappa1.is_finite()) || !(kappa2 > 0.0 && kappa2.is_finite()) {
        return Err(SystemError::InvalidParameter(format!(
            "coupling rates must be positive and finite, got κ1 = {kappa1}, κ2 = {kappa2}"
        )));
    }
    Ok(())
}

/// Single-mode cavity with a two-photon pump `χ` and two mirrors:
/// `F = Δ(-γ/2, -χ)`, `G_i = Δ(-√κi, 0)`, `H_i = Δ(√κi, 0)`, `K = I`,
/// with `γ = κ1 + κ2`.
pub fn build_squeezer_system(
    kappa1: f64,
    kappa2: f64,
    chi: Complex64,
    names: [&str; 4],
) -> Result<QuantumLinearSystem, SystemError> {
    check_rates(kappa1, kappa2)?;
    let gamma = kappa1 + kappa2;
    let f = doubled_scalar(re(-gamma / 2.0), -chi);
    let g1 = doubled_scalar(re(-kappa1.sqrt()), re(0.0));
    let g2 = doubled_scalar(re(-kappa2.sqrt()), re(0.0));
    let h1 = doubled_scalar(re(kappa1.sqrt()), re(0.0));
    let h2 = doubled_scalar(re(kappa2.sqrt()), re(0.0));
    let [in1, in2, out1, out2] = names;
    SystemBuilder::new(1, f)
        .input(in1, 1, g1)
        .input(in2, 1, g2)
        .output(out1, 1, h1, [(in1, identity(2))])
        .output(out2, 1, h2, [(in2, identity(2))])
        .build()
}

/// The plant: a cavity driven by vacuum `A` and control field `U`, measured
/// through `Y` (the `κ1` mirror), with cost row `C = [1/√2, -1/√2]`.
pub fn build_cavity_plant(kappa1: f64, kappa2: f64, chi: Complex64) -> Result<QuantumLinearSystem, SystemError> {
    use channel::*;
    let full = build_squeezer_system(kappa1, kappa2, chi, [PLANT_NOISE, CONTROL, PLANT_OUTPUT, "unused"])?;
    full.without_output("unused")?
        .with_cost(CMatrix::from_row_slice(1, 2, &[re(FRAC_1_SQRT_2), re(-FRAC_1_SQRT_2)]))
}

/// A dynamic squeezer wired as coherent controller: vacuum `A_tilde` and the
/// plant output `Y` enter through the `κ1` and `κ2` mirrors; `Y_tilde`
/// leaves through `κ1` and `U` through `κ2`.
pub fn build_squeezer_controller(kappa1: f64, kappa2: f64, chi: Complex64) -> Result<CoherentController, SystemError> {
    use channel::*;
    let sys = build_squeezer_system(kappa1, kappa2, chi, [CONTROLLER_NOISE, PLANT_OUTPUT, MEASURED, CONTROL])?;
    CoherentController::new(sys)
}

/// Static two-port mixer: `Y_tilde1 = cos θ Y + sin θ A_tilde`,
/// `Y_tilde2 = -sin θ Y + cos θ A_tilde`. No feedback path.
pub fn build_beam_splitter_controller(theta_mix: f64) -> CoherentController {
    use channel::*;
    let (s, co) = theta_mix.sin_cos();
    let from_noise = CMatrix::from_column_slice(2, 1, &[re(s), re(co)]);
    let from_signal = CMatrix::from_column_slice(2, 1, &[re(co), re(-s)]);
    let k_noise = delta_embed(from_noise, CMatrix::zeros(2, 1)).expect("blocks").full();
    let k_signal = delta_embed(from_signal, CMatrix::zeros(2, 1)).expect("blocks").full();
    let sys = SystemBuilder::new(0, CMatrix::zeros(0, 0))
        .input(CONTROLLER_NOISE, 1, CMatrix::zeros(0, 2))
        .input(PLANT_OUTPUT, 1, CMatrix::zeros(0, 2))
        .output(
            MEASURED,
            2,
            CMatrix::zeros(4, 0),
            [(CONTROLLER_NOISE, k_noise), (PLANT_OUTPUT, k_signal)],
        )
        .build()
        .expect("beam splitter blocks are consistent");
    CoherentController::new(sys).expect("required channels present")
}

/// `Y_tilde := Y` with no dynamics, noise or feedback.
pub fn build_passthrough_controller(half_width: usize) -> CoherentController {
    use channel::*;
    let sys = SystemBuilder::new(0, CMatrix::zeros(0, 0))
        .input(PLANT_OUTPUT, half_width, CMatrix::zeros(0, 2 * half_width))
        .output(
            MEASURED,
            half_width,
            CMatrix::zeros(2 * half_width, 0),
            [(PLANT_OUTPUT, identity(2 * half_width))],
        )
        .build()
        .expect("pass-through blocks are consistent");
    CoherentController::new(sys).expect("required channels present")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    const S05: f64 = FRAC_1_SQRT_2;

    fn close(a: &CMatrix, b: &CMatrix, tol: f64) -> bool {
        a.shape() == b.shape() && max_abs(&(a - b)) < tol
    }

    fn eye_scaled(s: f64) -> CMatrix {
        identity(2).scale(s)
    }

    #[test]
    fn cavity_plant_matrices() {
        let p = build_cavity_plant(0.5, 0.5, re(0.0)).unwrap();
        assert_eq!(p.n(), 1);
        assert!(close(p.f(), &eye_scaled(-0.5), 1e-15));
        assert!(close(&p.g(channel::PLANT_NOISE), &eye_scaled(-S05), 1e-15));
        assert!(close(&p.g(channel::CONTROL), &eye_scaled(-S05), 1e-15));
        assert!(close(&p.h(channel::PLANT_OUTPUT), &eye_scaled(S05), 1e-15));
        assert!(close(
            &p.k(channel::PLANT_OUTPUT, channel::PLANT_NOISE),
            &identity(2),
            0.0 + 1e-15
        ));
        assert!(close(
            &p.k(channel::PLANT_OUTPUT, channel::CONTROL),
            &CMatrix::zeros(2, 2),
            1e-15
        ));
        let expected_c = CMatrix::from_row_slice(1, 2, &[re(S05), re(-S05)]);
        assert!(close(p.cost().unwrap(), &expected_c, 1e-15));
        // γ = κ1 + κ2 = 1 sits on the diagonal as -γ/2
        assert!((p.f()[(0, 0)].re + 0.5).abs() < 1e-15);
    }

    #[test]
    fn squeezer_off_diagonal_follows_minus_chi() {
        let p = build_cavity_plant(5.0, 5.0, re(-0.5)).unwrap();
        let expected = CMatrix::from_row_slice(2, 2, &[re(-5.0), re(0.5), re(0.5), re(-5.0)]);
        assert!(close(p.f(), &expected, 1e-15));
    }

    #[test]
    fn squeezer_controller_matrices() {
        use channel::*;
        let ctrl = build_squeezer_controller(5.0, 5.0, re(-0.5)).unwrap();
        let s = ctrl.system();
        let r5 = 5f64.sqrt();
        assert!((r5 - 2.2361).abs() < 1e-4);
        assert!(close(&s.g(CONTROLLER_NOISE), &eye_scaled(-r5), 1e-14));
        assert!(close(&s.g(PLANT_OUTPUT), &eye_scaled(-r5), 1e-14));
        assert!(close(&s.h(MEASURED), &eye_scaled(r5), 1e-14));
        assert!(close(&s.h(CONTROL), &eye_scaled(r5), 1e-14));
        assert!(close(&s.k(MEASURED, CONTROLLER_NOISE), &identity(2), 1e-15));
        assert!(close(&s.k(MEASURED, PLANT_OUTPUT), &CMatrix::zeros(2, 2), 1e-15));
        assert!(close(&s.k(CONTROL, CONTROLLER_NOISE), &CMatrix::zeros(2, 2), 1e-15));
        assert!(close(&s.k(CONTROL, PLANT_OUTPUT), &identity(2), 1e-15));
        assert!((s.f()[(0, 0)].re + 5.0).abs() < 1e-15, "γ = 10");
        assert!(ctrl.has_feedback());
    }

    #[test]
    fn builders_reject_bad_rates() {
        assert!(matches!(
            build_cavity_plant(0.0, 1.0, re(0.0)),
            Err(SystemError::InvalidParameter(_))
        ));
        assert!(matches!(
            build_squeezer_controller(1.0, -1.0, re(0.0)),
            Err(SystemError::InvalidParameter(_))
        ));
    }

    #[test]
    fn cavity_as_controller_is_relabelled_plant() {
        let ctrl = build_squeezer_controller(0.5, 0.5, re(0.0)).unwrap();
        let plant = build_cavity_plant(0.5, 0.5, re(0.0)).unwrap();
        assert_eq!(ctrl.system().f(), plant.f());
        assert_eq!(ctrl.system().g(channel::PLANT_OUTPUT), plant.g(channel::CONTROL));
    }

    #[test]
    fn beam_splitter_conventions() {
        use channel::*;
        let bs = build_beam_splitter_controller(FRAC_PI_4);
        let s = bs.scattering_matrix();
        assert!(close(&(&s * s.adjoint()), &identity(2), 1e-12));
        // columns in declaration order (A_tilde, Y)
        let expected = CMatrix::from_row_slice(2, 2, &[re(S05), re(S05), re(S05), re(-S05)]);
        assert!(close(&s, &expected, 1e-15));
        assert!(!bs.has_feedback());

        let pass = build_beam_splitter_controller(0.0);
        let k_sig = pass.system().k(MEASURED, PLANT_OUTPUT);
        let k_noise = pass.system().k(MEASURED, CONTROLLER_NOISE);
        // Y_tilde1 = Y, Y_tilde2 = A_tilde
        assert_eq!(k_sig[(0, 0)], re(1.0));
        assert_eq!(k_sig[(1, 0)], re(0.0));
        assert_eq!(k_noise[(1, 0)], re(1.0));
        assert_eq!(k_noise[(0, 0)], re(0.0));

        for t in [0.1, 1.0, 2.5, PI] {
            let s = build_beam_splitter_controller(t).scattering_matrix();
            assert!(close(&(&s * s.adjoint()), &identity(2), 1e-12));
        }
        assert!(matches!(bs.certify(1e-9), Ok(ControllerCertificate::Static { .. })));
    }

    #[test]
    fn cavity_realization() {
        let p = build_cavity_plant(0.5, 0.5, re(0.0)).unwrap();
        let r = check_physical_realizability(&p, 1e-9).unwrap();
        assert!(close(&r.theta, &SignatureMatrix::new(1).full(), 1e-12));
        assert!(max_abs(&r.m) < 1e-12);
        // rows: Y, padded U-output, then conjugates
        let expected_n = CMatrix::from_row_slice(
            4,
            2,
            &[re(S05), re(0.0), re(S05), re(0.0), re(0.0), re(S05), re(0.0), re(S05)],
        );
        assert!(close(&r.n, &expected_n, 1e-12));
        assert_eq!(r.padded, vec![1]);
        assert!(r.residuals.max() < 1e-10, "{:?}", r.residuals);
    }

    #[test]
    fn squeezer_realization() {
        let chi = re(-0.5);
        let sys = build_squeezer_system(5.0, 5.0, chi, ["A1", "A2", "B1", "B2"]).unwrap();
        let r = check_physical_realizability(&sys, 1e-9).unwrap();
        assert!(close(&r.theta, &SignatureMatrix::new(1).full(), 1e-12));
        let expected_m = doubled_scalar(re(0.0), -chi * c(0.0, 1.0));
        assert!(close(&r.m, &expected_m, 1e-9));
        assert!(close(&r.m, &doubled_scalar(re(0.0), c(0.0, 0.5)), 1e-12));
        assert!(r.padded.is_empty());
        assert!(r.residuals.max() < 1e-10);
    }

    #[test]
    fn k_must_be_identity() {
        let sys = build_squeezer_system(1.0, 1.0, re(0.0), ["a", "b", "c", "d"]).unwrap();
        let mut outputs = sys.outputs().to_vec();
        for o in &mut outputs {
            for k in &mut o.k {
                *k = k.scale(2.0);
            }
        }
        let mut b = SystemBuilder::new(1, sys.f().clone());
        for i in sys.inputs() {
            b = b.input(&i.name, i.half_width, i.g.clone());
        }
        for o in &outputs {
            let ks: Vec<(&str, CMatrix)> = sys
                .inputs()
                .iter()
                .zip(&o.k)
                .map(|(i, k)| (i.name.as_str(), k.clone()))
                .collect();
            b = b.output(&o.name, o.half_width, o.h.clone(), ks);
        }
        let mutated = b.build().unwrap();
        assert!(matches!(
            check_physical_realizability(&mutated, 1e-9),
            Err(NotRealizable::KNotIdentity(_))
        ));
    }

    #[test]
    fn coupling_mismatch_detected() {
        // flip the sign of H: G no longer equals -Θ H† J
        let sys = build_squeezer_system(1.0, 1.0, re(0.0), ["a", "b", "c", "d"]).unwrap();
        let mut b = SystemBuilder::new(1, sys.f().clone());
        for i in sys.inputs() {
            b = b.input(&i.name, i.half_width, i.g.clone());
        }
        b = b
            .output("c", 1, -sys.h("c"), [("a", identity(2))])
            .output("d", 1, sys.h("d"), [("b", identity(2))]);
        let bad = b.build().unwrap();
        assert!(matches!(
            check_physical_realizability(&bad, 1e-9),
            Err(NotRealizable::CouplingMismatch { .. })
        ));
    }

    #[test]
    fn cancelling_couplings_have_wrong_inertia() {
        // a passive and a purely active channel of equal strength: G J G† = 0,
        // so Θ = 0 and cannot be T J T†
        let swap = doubled_scalar(re(0.0), re(1.0));
        let sys = SystemBuilder::new(1, eye_scaled(-0.5))
            .input("a", 1, eye_scaled(-1.0))
            .input("b", 1, swap)
            .build()
            .unwrap();
        assert!(matches!(
            check_physical_realizability(&sys, 1e-9),
            Err(NotRealizable::WrongInertia { found, .. }) if found == Inertia::new(0, 2, 0)
        ));
    }

    #[test]
    fn closed_oscillator_uses_stacked_solve() {
        // F = -iJM with no coupling: the Lyapunov operator is singular
        let m = doubled_scalar(re(1.0), re(0.0));
        let j = SignatureMatrix::new(1).full();
        let sys = realize(&j, &m, &CMatrix::zeros(0, 2), 1e-9).unwrap();
        assert!(matches!(
            check_physical_realizability(&sys, 1e-9),
            Err(NotRealizable::NoCommutationMatrix(_))
        ));
    }

    #[test]
    fn realize_examples() {
        let j = SignatureMatrix::new(1).full();
        let cav = realize(&j, &CMatrix::zeros(2, 2), &eye_scaled(S05), 1e-9).unwrap();
        assert!(close(cav.f(), &eye_scaled(-0.25), 1e-15));
        assert!(close(&cav.g("in"), &eye_scaled(-S05), 1e-15));
        assert!(close(&cav.h("out"), &eye_scaled(S05), 1e-15));

        // the squeezer from its realization
        let m = doubled_scalar(re(0.0), c(0.0, 0.5));
        let r5 = 5f64.sqrt();
        let n = CMatrix::from_row_slice(
            4,
            2,
            &[re(r5), re(0.0), re(r5), re(0.0), re(0.0), re(r5), re(0.0), re(r5)],
        );
        let sq = realize(&j, &m, &n, 1e-9).unwrap();
        let expected_f = CMatrix::from_row_slice(2, 2, &[re(-5.0), re(0.5), re(0.5), re(-5.0)]);
        assert!(close(sq.f(), &expected_f, 1e-12));

        let closed = realize(&j, &CMatrix::zeros(2, 2), &CMatrix::zeros(2, 2), 1e-9).unwrap();
        assert!(max_abs(closed.f()) == 0.0);
        assert!(max_abs(&closed.g("in")) == 0.0);
        assert_eq!(closed.k("out", "in"), identity(2));

        assert!(matches!(
            realize(&identity(2), &CMatrix::zeros(2, 2), &eye_scaled(1.0), 1e-9),
            Err(SystemError::CommutationInertia { .. })
        ));
    }

    #[test]
    fn builder_rejects_unstructured_blocks() {
        let bad = CMatrix::from_row_slice(2, 2, &[re(0.0), re(1.0), re(-1.0), re(0.0)]);
        assert!(matches!(
            SystemBuilder::new(1, bad).build(),
            Err(SystemError::NotDelta(_))
        ));
        let err = SystemBuilder::new(1, identity(2)).input("a", 1, identity(4)).build();
        assert!(matches!(err, Err(SystemError::Shape { .. })));
        let err = SystemBuilder::new(1, identity(2))
            .input("a", 1, identity(2))
            .output("b", 1, identity(2), [("zz", identity(2))])
            .build();
        assert!(matches!(err, Err(SystemError::UnknownChannel(_))));
    }

    #[test]
    fn controller_channel_rules() {
        let sys = build_squeezer_system(1.0, 1.0, re(0.0), ["x", "Y", "Y_tilde", "U"]).unwrap();
        assert!(matches!(
            CoherentController::new(sys),
            Err(SystemError::UnknownChannel(_))
        ));
        let sys = build_squeezer_system(1.0, 1.0, re(0.0), ["A_tilde", "Y", "other", "U"]).unwrap();
        assert!(matches!(
            CoherentController::new(sys),
            Err(SystemError::MissingChannel(_))
        ));
    }
}
