//! LoRA-style baseline: independent Adam on each factor, no re-orthonormalization.

use super::full::adam_update;
use super::{check_gradient, AdamHyper, GradientOracle};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::{factor_gradients, LowRankFactors};

/// Adam moments for one factor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMoments {
    pub v: Matrix,
    pub k: Matrix,
    pub n: u64,
}

impl FactorMoments {
    pub fn zeros_like(m: &Matrix) -> Self {
        FactorMoments {
            v: Matrix::zeros(m.rows(), m.cols()),
            k: Matrix::zeros(m.rows(), m.cols()),
            n: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdamState {
    pub u: FactorMoments,
    pub s: FactorMoments,
    pub v: FactorMoments,
    pub hyper: AdamHyper,
}

impl LoraAdamState {
    pub fn zeros(f: &LowRankFactors, hyper: AdamHyper) -> Self {
        LoraAdamState {
            u: FactorMoments::zeros_like(&f.u),
            s: FactorMoments::zeros_like(&f.s),
            v: FactorMoments::zeros_like(&f.v),
            hyper,
        }
    }
}

fn step_factor(
    p: &Matrix,
    m: &FactorMoments,
    g: &Matrix,
    hyper: &AdamHyper,
) -> Result<(Matrix, FactorMoments)> {
    if m.v.shape() != p.shape() || m.k.shape() != p.shape() {
        return Err(Error::shape(
            "lora_adam_step",
            "moment shape differs from factor",
        ));
    }
    let n = m.n + 1;
    let (p, v, k) = adam_update(p, &m.v, &m.k, g, n, hyper)?;
    Ok((p, FactorMoments { v, k, n }))
}

/// Simultaneous Adam descent on `U`, `S`, `V` with the factor gradients
/// `(∇_W L) V Sᵀ`, `Uᵀ (∇_W L) V`, `(∇_W L)ᵀ U S`. Rank never changes.
pub fn lora_adam_step(
    f: &LowRankFactors,
    state: &LoraAdamState,
    oracle: &mut dyn GradientOracle,
) -> Result<(LowRankFactors, LoraAdamState, f64)> {
    let w = f.u.matmul(&f.s)?.matmul_t(&f.v)?;
    let (loss, g) = oracle.grad_w(&w)?;
    check_gradient(&g, "gradient")?;
    let (gu, gv, gs) = factor_gradients(f, &g)?;
    let hyper = &state.hyper;
    let (u, mu) = step_factor(&f.u, &state.u, &gu, hyper)?;
    let (s, ms) = step_factor(&f.s, &state.s, &gs, hyper)?;
    let (v, mv) = step_factor(&f.v, &state.v, &gv, hyper)?;
    Ok((
        LowRankFactors::new(u, s, v)?,
        LoraAdamState {
            u: mu,
            s: ms,
            v: mv,
            hyper: *hyper,
        },
        loss,
    ))
}
