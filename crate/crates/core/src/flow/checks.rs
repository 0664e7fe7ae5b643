use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    factored_rhs, step_projected_flow, vanilla_rhs, AnalyticLoss, FactorPair, FlowKind, FlowState,
};
use crate::error::{Error, Result};
use crate::linalg::{householder_q, Matrix};
use crate::lowrank::{
    naive_project, project_onto_bases, reconstruct, tangent_project, LowRankFactors,
    TruncationPolicy,
};
use crate::optim::{lr_hb_step, HeavyBallState, QuadraticOracle};

/// `(Ẇ, 𝒱̇)` of the vanilla flow, assembled with the product rule from the factor rates.
pub fn vanilla_rates(f: &FactorPair, loss: &AnalyticLoss, gamma: f64) -> Result<(Matrix, Matrix)> {
    f.check()?;
    let d = vanilla_rhs(&f.to_vec(), loss, gamma)?;
    let w_dot = product_rule(&f.u, &f.s, &f.v, &d[0], &d[1], &d[2])?;
    let mom_dot = product_rule(&f.u_v, &f.s_v, &f.v_v, &d[3], &d[4], &d[5])?;
    Ok((w_dot, mom_dot))
}

/// `d/dt (A B Cᵀ) = Ȧ B Cᵀ + A Ḃ Cᵀ + A B Ċᵀ`
fn product_rule(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    da: &Matrix,
    db: &Matrix,
    dc: &Matrix,
) -> Result<Matrix> {
    let mut out = da.matmul(b)?.matmul_t(c)?;
    out.axpy(1.0, &a.matmul(db)?.matmul_t(c)?)?;
    out.axpy(1.0, &a.matmul(b)?.matmul_t(dc)?)?;
    Ok(out)
}

/// For the factored flow: the momentum rate assembled from the factor rates, and
/// `−γ𝒱 − P(𝒱)∇L` with the projector built from `U_V`, `V_V`.
pub fn momentum_rate_identity(
    f: &FactorPair,
    loss: &AnalyticLoss,
    gamma: f64,
) -> Result<(Matrix, Matrix)> {
    f.check()?;
    let d = factored_rhs(&f.to_vec(), loss, gamma)?;
    let assembled = product_rule(&f.u_v, &f.s_v, &f.v_v, &d[3], &d[4], &d[5])?;
    let g = loss.gradient(&f.weight()?)?;
    let expected =
        f.momentum()?
            .lin_comb(-gamma, &project_onto_bases(&f.u_v, &f.v_v, &g)?, -1.0)?;
    Ok((assembled, expected))
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleReport {
    /// Largest entry of the naive map applied to the gradient.
    pub naive_max_abs: f64,
    /// `‖P(W)∇L‖_F`
    pub projected_norm: f64,
    /// `‖Ẇ‖_F` and `‖𝒱̇‖_F` of the vanilla flow at the constructed point.
    pub vanilla_w_rate: f64,
    pub vanilla_mom_rate: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub passed: bool,
}

impl CounterexampleReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            Ok(self)
        } else {
            Err(Error::Verification(format!(
                "counterexample check failed: {self:?}"
            )))
        }
    }
}

/// The stationary point of the factor-wise momentum flow that is not optimal:
/// `U = V = e₁`, `S = [[1]]`, `∇L = c·[[0,0],[1,0]]`, momentum factors
/// `U_V = −U`, `S_V = 0`, `V_V = V`.
pub fn counterexample_check() -> Result<CounterexampleReport> {
    counterexample_with_scale(1.0)
}

/// [`counterexample_check`] with the gradient scaled by `c`.
pub fn counterexample_with_scale(c: f64) -> Result<CounterexampleReport> {
    let e1 = Matrix::column_vector(&[1.0, 0.0]);
    let f = LowRankFactors::new(e1.clone(), Matrix::from_rows(&[&[1.0]]), e1.clone())?;
    let mom = LowRankFactors::new(e1.scale(-1.0), Matrix::zeros(1, 1), e1)?;
    let grad = Matrix::from_rows(&[&[0.0, 0.0], &[c, 0.0]]);
    let w = reconstruct(&f)?;
    // quadratic loss whose gradient at W is `grad`
    let target = w.sub(&grad)?;
    let loss = AnalyticLoss::Quadratic(target.clone());

    let naive_max_abs = naive_project(&f, &mom, &grad)?.max_abs();
    let projected_norm = tangent_project(&f, &grad)?.frobenius_norm();
    let pair = FactorPair {
        u: f.u.clone(),
        s: f.s.clone(),
        v: f.v.clone(),
        u_v: mom.u.clone(),
        s_v: mom.s.clone(),
        v_v: mom.v.clone(),
    };
    let (w_dot, mom_dot) = vanilla_rates(&pair, &loss, 0.1)?;

    let mut oracle = QuadraticOracle::new(target);
    let loss_before = oracle.loss(&w)?;
    let policy = TruncationPolicy::new(0.0, 1, None)?;
    let (next, _, _) = lr_hb_step(
        &f,
        &HeavyBallState::zeros(1, 0.1, 0.1),
        &mut oracle,
        &policy,
    )?;
    let loss_after = oracle.loss(&reconstruct(&next)?)?;

    let passed = naive_max_abs <= 1e-14
        && (projected_norm - c.abs()).abs() <= 1e-12 * c.abs().max(1.0)
        && w_dot.max_abs() <= 1e-14
        && mom_dot.max_abs() <= 1e-14
        && loss_after < loss_before;
    Ok(CounterexampleReport {
        naive_max_abs,
        projected_norm,
        vanilla_w_rate: w_dot.frobenius_norm(),
        vanilla_mom_rate: mom_dot.frobenius_norm(),
        loss_before,
        loss_after,
        passed,
    })
}

/// Quadratic problem whose optimum and starting point share one rank-`r` subspace,
/// so the gradient stays tangent and the only discrepancy between the discrete
/// heavy-ball method and the projected flow is the time discretization.
#[derive(Debug, Clone)]
pub struct ScalingProblem {
    pub target: Matrix,
    pub init: LowRankFactors,
    /// Flow damping `γ`; the discrete method uses the retention `1 − λγ`.
    pub gamma: f64,
}

impl ScalingProblem {
    /// `A = X diag(sigma) Yᵀ`, `W₀ = X S₀ Yᵀ` with random orthonormal `X`, `Y` (`n × r`).
    pub fn new(n: usize, sigma: &[f64], s0: &Matrix, gamma: f64, seed: u64) -> Result<Self> {
        let r = sigma.len();
        if r == 0 || r > n || s0.shape() != (r, r) {
            return Err(Error::Argument(format!(
                "need 1 <= r <= n and an r x r start coefficient (r = {r}, n = {n})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = householder_q(&Matrix::random_normal(n, r, 1.0, &mut rng));
        let y = householder_q(&Matrix::random_normal(n, r, 1.0, &mut rng));
        let target = x.matmul(&Matrix::from_diag(sigma))?.matmul_t(&y)?;
        Ok(ScalingProblem {
            target,
            init: LowRankFactors::new(x, s0.clone(), y)?,
            gamma,
        })
    }

    pub fn rank(&self) -> usize {
        self.init.rank()
    }

    fn steps(step: f64, horizon: f64) -> Result<usize> {
        let k = (horizon / step).round();
        if !(step > 0.0 && horizon >= 0.0) || (k * step - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Argument(format!(
                "horizon {horizon} is not a multiple of step {step}"
            )));
        }
        Ok(k as usize)
    }

    /// Weight of the projected flow at `horizon`, integrated with step `h` from `𝒱(0) = 0`.
    pub fn reference(&self, h: f64, horizon: f64) -> Result<Matrix> {
        let k = Self::steps(h, horizon)?;
        let w0 = reconstruct(&self.init)?;
        let mom0 = Matrix::zeros(w0.rows(), w0.cols());
        let mut state = FlowState::projected(w0, mom0, self.rank(), self.gamma)?;
        let loss = AnalyticLoss::Quadratic(self.target.clone());
        for _ in 0..k {
            state = step_projected_flow(&state, &loss, h)?;
        }
        match state.kind {
            FlowKind::Projected(p) => Ok(p.w),
            _ => unreachable!("projected flow stays projected"),
        }
    }

    /// Weight after `horizon / λ` fixed-rank low-rank heavy-ball steps with `τ = 0`.
    pub fn discrete(&self, lambda: f64, horizon: f64) -> Result<Matrix> {
        let k = Self::steps(lambda, horizon)?;
        let r = self.rank();
        let policy = TruncationPolicy::new(0.0, r, Some(r))?;
        let mut oracle = QuadraticOracle::new(self.target.clone());
        let mut f = self.init.clone();
        let mut hb = HeavyBallState::zeros(r, lambda * self.gamma, lambda);
        for _ in 0..k {
            let (g, s, _) = lr_hb_step(&f, &hb, &mut oracle, &policy)?;
            f = g;
            hb = s;
        }
        reconstruct(&f)
    }
}

/// `‖W_ref(T) − W_λ(T)‖_F`, the reference integrated at step `λ/100`.
pub fn flow_vs_discrete(problem: &ScalingProblem, lambda: f64, horizon: f64) -> Result<f64> {
    let reference = problem.reference(lambda / 100.0, horizon)?;
    let discrete = problem.discrete(lambda, horizon)?;
    Ok(reference.sub(&discrete)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counterexample_passes() {
        let r = counterexample_check().unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.naive_max_abs, 0.0);
        assert_eq!(r.projected_norm, 1.0);
    }

    #[test]
    fn scaled_counterexample() {
        for c in [0.5, 3.0, 1e3] {
            let r = counterexample_with_scale(c).unwrap();
            assert_eq!(r.naive_max_abs, 0.0);
            assert!((r.projected_norm - c).abs() <= 1e-12 * c);
        }
    }

    #[test]
    fn horizon_must_be_a_multiple() {
        let p = ScalingProblem::new(4, &[0.5], &Matrix::from_rows(&[&[1.0]]), 1.0, 0).unwrap();
        assert!(matches!(p.discrete(0.3, 1.0), Err(Error::Argument(_))));
    }
}
