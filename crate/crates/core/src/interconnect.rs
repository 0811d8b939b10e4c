//! Plant/controller feedback interconnection.
//!
//! With plant `(F, G1, G2, H, K)` and controller blocks `F_c`, `G_c1`,
//! `G_c2`, `H̃_c`, `K̃_c1`, `K̃_c2`, `H_c`, `K_c1`, `K_c2` the closed loop is
//!
//! ```text
//! F_a = [ F + G2 K_c2 H   G2 H_c ]    G_a = [ G1 + G2 K_c2 K   G2 K_c1 ]
//!       [ G_c2 H          F_c    ]          [ G_c2 K           G_c1    ]
//!
//! H_a = [ K̃_c2 H   H̃_c ]              K_a = [ K̃_c2 K   K̃_c1 ]
//! ```
//!
//! State order is `[plant doubled; controller doubled]`, noise order is
//! `[plant vacuum; controller vacuum]`, each part in its own doubled order.
//! When the controller has no feedback output, the plant control input is
//! left as an extra vacuum channel placed after the plant vacuum.

use serde::Serialize;
use thiserror::Error;

use crate::doubled::{self, block2x2, hstack, is_delta_structured, max_abs, vstack, AlgebraError, CMatrix};
use crate::qsystem::{channel, CoherentController, NotRealizable, QuantumLinearSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterconnectError {
    #[error("plant is missing channel `{0}`")]
    MissingChannel(String),
    #[error("plant has no cost row C")]
    MissingCost,
    #[error("width mismatch on `{channel}`: plant {plant}, controller {controller}")]
    WidthMismatch {
        channel: String,
        plant: usize,
        controller: usize,
    },
    #[error("plant output Y depends directly on the control input U; the loop is not well posed")]
    DirectFeedthrough,
    #[error("controller is not physically realizable: {0}")]
    NotRealizable(#[from] NotRealizable),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// A named noise channel of the closed loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NoiseChannel {
    pub name: String,
    pub half_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentedSystem {
    #[serde(with = "doubled::literal")]
    pub f: CMatrix,
    #[serde(with = "doubled::literal")]
    pub g: CMatrix,
    #[serde(with = "doubled::literal")]
    pub h: CMatrix,
    #[serde(with = "doubled::literal")]
    pub k: CMatrix,
    /// The cost row `[C 0]`.
    #[serde(with = "doubled::literal")]
    pub c: CMatrix,
    /// State half-dimensions `(n, n_c)`.
    pub state_half_widths: (usize, usize),
    pub noise: Vec<NoiseChannel>,
    /// Half-width of the measured field `Ỹ`.
    pub measured_half_width: usize,
}

impl AugmentedSystem {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn noise_widths(&self) -> Vec<usize> {
        self.noise.iter().map(|c| c.half_width).collect()
    }

    /// `(F_a, G_a, H_a, K_a, C_a)` re-sorted into global doubled order.
    pub fn to_global(&self) -> Result<[CMatrix; 5], AlgebraError> {
        let sw = [self.state_half_widths.0, self.state_half_widths.1];
        let nw = self.noise_widths();
        let f = doubled::cols_to_global(&doubled::rows_to_global(&self.f, &sw)?, &sw)?;
        let g = doubled::cols_to_global(&doubled::rows_to_global(&self.g, &sw)?, &nw)?;
        let h = doubled::cols_to_global(&self.h, &sw)?;
        let k = doubled::cols_to_global(&self.k, &nw)?;
        let c = doubled::cols_to_global(&self.c, &sw)?;
        Ok([f, g, h, k, c])
    }

    /// Whether every augmented matrix is Δ-structured in global order.
    pub fn is_delta_structured(&self, tol: f64) -> Result<bool, AlgebraError> {
        let [f, g, h, k, _] = self.to_global()?;
        for m in [&f, &g, &h, &k] {
            if !is_delta_structured(m, tol)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

struct PlantBlocks {
    f: CMatrix,
    g1: CMatrix,
    g2: CMatrix,
    h: CMatrix,
    k: CMatrix,
    c: CMatrix,
    m_noise: usize,
    m_control: usize,
    m_out: usize,
}

fn plant_blocks(plant: &QuantumLinearSystem) -> Result<PlantBlocks, InterconnectError> {
    use channel::*;
    if plant.input(PLANT_NOISE).is_none() {
        return Err(InterconnectError::MissingChannel(PLANT_NOISE.into()));
    }
    if plant.output(PLANT_OUTPUT).is_none() {
        return Err(InterconnectError::MissingChannel(PLANT_OUTPUT.into()));
    }
    let c = plant.cost().ok_or(InterconnectError::MissingCost)?.clone();
    if max_abs(&plant.k(PLANT_OUTPUT, CONTROL)) > 0.0 {
        return Err(InterconnectError::DirectFeedthrough);
    }
    Ok(PlantBlocks {
        f: plant.f().clone(),
        g1: plant.g(PLANT_NOISE),
        g2: plant.g(CONTROL),
        h: plant.h(PLANT_OUTPUT),
        k: plant.k(PLANT_OUTPUT, PLANT_NOISE),
        c,
        m_noise: plant.input_width(PLANT_NOISE),
        m_control: plant.input_width(CONTROL),
        m_out: plant.output_width(PLANT_OUTPUT),
    })
}

/// Close the loop between a plant and a coherent controller.
pub fn close_loop(
    plant: &QuantumLinearSystem,
    controller: &CoherentController,
    tol: f64,
) -> Result<AugmentedSystem, InterconnectError> {
    use channel::*;
    let p = plant_blocks(plant)?;
    let ctrl = controller.system();

    let m_y = ctrl.input_width(PLANT_OUTPUT);
    if m_y != p.m_out {
        return Err(InterconnectError::WidthMismatch {
            channel: PLANT_OUTPUT.into(),
            plant: p.m_out,
            controller: m_y,
        });
    }
    let feedback = controller.has_feedback();
    if feedback && ctrl.output_width(CONTROL) != p.m_control {
        return Err(InterconnectError::WidthMismatch {
            channel: CONTROL.into(),
            plant: p.m_control,
            controller: ctrl.output_width(CONTROL),
        });
    }
    controller.certify(tol)?;

    let n2 = 2 * plant.n();
    let nc2 = 2 * ctrl.n();
    let m_tilde = ctrl.input_width(CONTROLLER_NOISE);

    let fc = ctrl.f();
    let gc1 = ctrl.g(CONTROLLER_NOISE);
    let gc2 = ctrl.g(PLANT_OUTPUT);
    let ht = ctrl.h(MEASURED);
    let kt1 = ctrl.k(MEASURED, CONTROLLER_NOISE);
    let kt2 = ctrl.k(MEASURED, PLANT_OUTPUT);

    let (f_a, g_a, noise) = if feedback {
        let hc = ctrl.h(CONTROL);
        let kc1 = ctrl.k(CONTROL, CONTROLLER_NOISE);
        let kc2 = ctrl.k(CONTROL, PLANT_OUTPUT);
        let f_a = block2x2(&(&p.f + &p.g2 * &kc2 * &p.h), &(&p.g2 * &hc), &(&gc2 * &p.h), fc)?;
        let g_a = block2x2(&(&p.g1 + &p.g2 * &kc2 * &p.k), &(&p.g2 * &kc1), &(&gc2 * &p.k), &gc1)?;
        let noise = vec![
            NoiseChannel {
                name: PLANT_NOISE.into(),
                half_width: p.m_noise,
            },
            NoiseChannel {
                name: CONTROLLER_NOISE.into(),
                half_width: m_tilde,
            },
        ];
        (f_a, g_a, noise)
    } else {
        let f_a = block2x2(&p.f, &CMatrix::zeros(n2, nc2), &(&gc2 * &p.h), fc)?;
        let top = hstack(n2, &[&p.g1, &p.g2, &CMatrix::zeros(n2, 2 * m_tilde)])?;
        let bottom = hstack(nc2, &[&(&gc2 * &p.k), &CMatrix::zeros(nc2, 2 * p.m_control), &gc1])?;
        let g_a = vstack(top.ncols(), &[&top, &bottom])?;
        let mut noise = vec![NoiseChannel {
            name: PLANT_NOISE.into(),
            half_width: p.m_noise,
        }];
        if p.m_control > 0 {
            noise.push(NoiseChannel {
                name: CONTROL.into(),
                half_width: p.m_control,
            });
        }
        noise.push(NoiseChannel {
            name: CONTROLLER_NOISE.into(),
            half_width: m_tilde,
        });
        (f_a, g_a, noise)
    };

    let m_meas = ctrl.output_width(MEASURED);
    let h_a = hstack(2 * m_meas, &[&(&kt2 * &p.h), &ht])?;
    let k_a = if feedback {
        hstack(2 * m_meas, &[&(&kt2 * &p.k), &kt1])?
    } else {
        hstack(
            2 * m_meas,
            &[&(&kt2 * &p.k), &CMatrix::zeros(2 * m_meas, 2 * p.m_control), &kt1],
        )?
    };
    let c_a = hstack(1, &[&p.c, &CMatrix::zeros(1, nc2)])?;

    Ok(AugmentedSystem {
        f: f_a,
        g: g_a,
        h: h_a,
        k: k_a,
        c: c_a,
        state_half_widths: (plant.n(), ctrl.n()),
        noise,
        measured_half_width: m_meas,
    })
}

/// The purely classical baseline: the control input is just more vacuum and
/// the plant output is measured directly.
pub fn classical_only(plant: &QuantumLinearSystem) -> Result<AugmentedSystem, InterconnectError> {
    use channel::*;
    let p = plant_blocks(plant)?;
    let n2 = 2 * plant.n();
    let g_a = hstack(n2, &[&p.g1, &p.g2])?;
    let k_a = hstack(2 * p.m_out, &[&p.k, &CMatrix::zeros(2 * p.m_out, 2 * p.m_control)])?;
    let mut noise = vec![NoiseChannel {
        name: PLANT_NOISE.into(),
        half_width: p.m_noise,
    }];
    if p.m_control > 0 {
        noise.push(NoiseChannel {
            name: CONTROL.into(),
            half_width: p.m_control,
        });
    }
    Ok(AugmentedSystem {
        f: p.f,
        g: g_a,
        h: p.h,
        k: k_a,
        c: p.c,
        state_half_widths: (plant.n(), 0),
        noise,
        measured_half_width: p.m_out,
    })
}
