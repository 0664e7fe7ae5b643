//! Geometry-aware low-rank momentum methods.
//!
//! Weight and moments live in one pair of bases. Each step augments the bases with
//! the factor gradients, re-expresses the old coefficients in the augmented frame,
//! updates them there, and truncates back with an SVD of the new coefficient.

use super::{check_gradient, AdamHyper, GradientOracle};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::{
    basis_augmentation, check_second_moment, truncate_adam, truncate_hb, truncate_naive,
    LowRankFactors, TruncationPolicy,
};

/// Heavy-ball momentum coefficient `S_V` (the momentum is `U S_V Vᵀ`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeavyBallState {
    pub s_v: Matrix,
    pub gamma: f64,
    pub lambda: f64,
}

impl HeavyBallState {
    pub fn zeros(rank: usize, gamma: f64, lambda: f64) -> Self {
        HeavyBallState {
            s_v: Matrix::zeros(rank, rank),
            gamma,
            lambda,
        }
    }
}

/// Low-rank Adam moments in the layer's bases. `S_K` is elementwise nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub s_v: Matrix,
    pub s_k: Matrix,
    /// Completed steps; the next step uses `n + 1` for bias correction.
    pub n: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn zeros(rank: usize, hyper: AdamHyper) -> Self {
        AdamState {
            s_v: Matrix::zeros(rank, rank),
            s_k: Matrix::zeros(rank, rank),
            n: 0,
            hyper,
        }
    }
}

/// Quantities of a heavy-ball step before truncation.
#[derive(Debug, Clone)]
pub struct HbAugmented {
    pub loss: f64,
    pub u_hat: Matrix,
    pub v_hat: Matrix,
    pub s_bar: Matrix,
    pub sv_bar: Matrix,
    pub g_s: Matrix,
    pub s_hat: Matrix,
    pub sv_hat: Matrix,
}

/// Quantities of an Adam step before truncation.
#[derive(Debug, Clone)]
pub struct AdamAugmented {
    pub loss: f64,
    pub u_hat: Matrix,
    pub v_hat: Matrix,
    pub s_bar: Matrix,
    pub g_s: Matrix,
    pub s_hat: Matrix,
    pub sv_hat: Matrix,
    pub sk_hat: Matrix,
    /// Post-increment step counter used for bias correction.
    pub n: u64,
}

struct Frame {
    loss: f64,
    u_hat: Matrix,
    v_hat: Matrix,
    /// Ûᵀ U
    left: Matrix,
    /// Vᵀ V̂
    right: Matrix,
}

impl Frame {
    /// Ûᵀ U C Vᵀ V̂
    fn lift(&self, c: &Matrix) -> Result<Matrix> {
        self.left.matmul(c)?.matmul(&self.right)
    }
}

fn augment(f: &LowRankFactors, oracle: &mut dyn GradientOracle) -> Result<Frame> {
    let (loss, g_u, g_v) = oracle.grad_at_factors(f)?;
    if g_u.shape() != f.u.shape() || g_v.shape() != f.v.shape() {
        return Err(Error::shape(
            "low-rank step",
            "factor gradient shapes do not match U, V",
        ));
    }
    check_gradient(&g_u, "∇_U L")?;
    check_gradient(&g_v, "∇_V L")?;
    let (u_hat, v_hat) = rayon::join(
        || basis_augmentation(&f.u, &g_u),
        || basis_augmentation(&f.v, &g_v),
    );
    let (u_hat, v_hat) = (u_hat?, v_hat?);
    let left = u_hat.t_matmul(&f.u)?;
    let right = f.v.t_matmul(&v_hat)?;
    Ok(Frame {
        loss,
        u_hat,
        v_hat,
        left,
        right,
    })
}

fn coefficient_gradient(
    frame: &Frame,
    s_bar: &Matrix,
    oracle: &mut dyn GradientOracle,
) -> Result<Matrix> {
    let (_, g_s) = oracle.grad_at_coeff(&frame.u_hat, s_bar, &frame.v_hat)?;
    if g_s.shape() != s_bar.shape() {
        return Err(Error::shape(
            "low-rank step",
            "coefficient gradient shape mismatch",
        ));
    }
    check_gradient(&g_s, "∇_S̄ L")?;
    Ok(g_s)
}

fn check_coefficient(f: &LowRankFactors, m: &Matrix, what: &'static str) -> Result<()> {
    if m.shape() != (f.rank(), f.rank()) {
        return Err(Error::shape(
            what,
            format!("{}x{} moment for rank {}", m.rows(), m.cols(), f.rank()),
        ));
    }
    Ok(())
}

/// Heavy-ball step up to (not including) truncation.
pub fn lr_hb_augment(
    f: &LowRankFactors,
    state: &HeavyBallState,
    oracle: &mut dyn GradientOracle,
) -> Result<HbAugmented> {
    check_coefficient(f, &state.s_v, "lr_hb_step")?;
    let frame = augment(f, oracle)?;
    let s_bar = frame.lift(&f.s)?;
    let sv_bar = frame.lift(&state.s_v)?;
    let g_s = coefficient_gradient(&frame, &s_bar, oracle)?;

    let sv_hat = sv_bar.lin_comb(1.0 - state.gamma, &g_s, -state.lambda)?;
    let s_hat = s_bar.lin_comb(1.0, &sv_hat, state.lambda)?;
    Ok(HbAugmented {
        loss: frame.loss,
        u_hat: frame.u_hat,
        v_hat: frame.v_hat,
        s_bar,
        sv_bar,
        g_s,
        s_hat,
        sv_hat,
    })
}

/// One iteration of the low-rank heavy-ball method.
pub fn lr_hb_step(
    f: &LowRankFactors,
    state: &HeavyBallState,
    oracle: &mut dyn GradientOracle,
    policy: &TruncationPolicy,
) -> Result<(LowRankFactors, HeavyBallState, f64)> {
    let aug = lr_hb_augment(f, state, oracle)?;
    let (factors, s_v) = truncate_hb(&aug.s_hat, &aug.sv_hat, &aug.u_hat, &aug.v_hat, policy)?;
    Ok((
        factors,
        HeavyBallState {
            s_v,
            gamma: state.gamma,
            lambda: state.lambda,
        },
        aug.loss,
    ))
}

/// Adam step up to truncation. With `project_moments = false` the previous moments
/// are zero-padded into the augmented frame instead of being re-expressed in it.
pub fn lr_adam_augment(
    f: &LowRankFactors,
    state: &AdamState,
    oracle: &mut dyn GradientOracle,
    project_moments: bool,
) -> Result<AdamAugmented> {
    check_coefficient(f, &state.s_v, "lr_adam_step")?;
    check_coefficient(f, &state.s_k, "lr_adam_step")?;
    check_second_moment(&state.s_k)?;
    let hyper = &state.hyper;

    let frame = augment(f, oracle)?;
    let k = (frame.u_hat.cols(), frame.v_hat.cols());
    let s_bar = frame.lift(&f.s)?;
    let (sv_bar, sk_bar) = if project_moments {
        (
            frame.lift(&state.s_v)?,
            frame.lift(&state.s_k.map(f64::sqrt))?.map(|x| x * x),
        )
    } else {
        (state.s_v.resized(k.0, k.1), state.s_k.resized(k.0, k.1))
    };
    let g_s = coefficient_gradient(&frame, &s_bar, oracle)?;

    let n = state.n + 1;
    let sv_hat = sv_bar.lin_comb(hyper.beta1, &g_s, 1.0 - hyper.beta1)?;
    let sk_hat = sk_bar.lin_comb(hyper.beta2, &g_s.map(|x| x * x), 1.0 - hyper.beta2)?;
    let (c1, c2) = hyper.bias_corrections(n);
    let step = sv_hat.zip_map(&sk_hat, "lr_adam", |m, s| {
        (m / c1) / (s / c2 + hyper.eps).sqrt()
    })?;
    let mut s_hat = s_bar.clone();
    s_hat.axpy(-hyper.lambda, &step)?;
    if hyper.weight_decay > 0.0 {
        s_hat.axpy(-hyper.lambda * hyper.weight_decay, &s_bar)?;
    }
    Ok(AdamAugmented {
        loss: frame.loss,
        u_hat: frame.u_hat,
        v_hat: frame.v_hat,
        s_bar,
        g_s,
        s_hat,
        sv_hat,
        sk_hat,
        n,
    })
}

/// One iteration of the low-rank Adam method.
pub fn lr_adam_step(
    f: &LowRankFactors,
    state: &AdamState,
    oracle: &mut dyn GradientOracle,
    policy: &TruncationPolicy,
) -> Result<(LowRankFactors, AdamState, f64)> {
    let aug = lr_adam_augment(f, state, oracle, true)?;
    let (factors, s_v, s_k) = truncate_adam(
        &aug.s_hat,
        &aug.sv_hat,
        &aug.sk_hat,
        &aug.u_hat,
        &aug.v_hat,
        policy,
    )?;
    Ok((
        factors,
        AdamState {
            s_v,
            s_k,
            n: aug.n,
            hyper: state.hyper,
        },
        aug.loss,
    ))
}

/// Low-rank Adam without moment projection: moments are carried across basis
/// changes by zero-padding and cropping only.
pub fn lr_adam_naive_step(
    f: &LowRankFactors,
    state: &AdamState,
    oracle: &mut dyn GradientOracle,
    policy: &TruncationPolicy,
) -> Result<(LowRankFactors, AdamState, f64)> {
    let aug = lr_adam_augment(f, state, oracle, false)?;
    let factors = truncate_naive(&aug.s_hat, &aug.u_hat, &aug.v_hat, policy)?;
    let r = factors.rank();
    Ok((
        factors,
        AdamState {
            s_v: aug.sv_hat.resized(r, r),
            s_k: aug.sk_hat.resized(r, r),
            n: aug.n,
            hyper: state.hyper,
        },
        aug.loss,
    ))
}
