//! Continuous-time momentum flows integrated with classical RK4.
//!
//! Three flows are available, all driven by the gradient of an [`AnalyticLoss`]:
//!
//! * vanilla: independent heavy-ball dynamics on `U`, `S`, `V` and their momenta;
//! * projected: `Ẇ = P(W)𝒱`, `𝒱̇ + γ𝒱 = −P(W)∇L` on a dense `W` (reference trajectory);
//! * factored: momentum factors evolve so that `𝒱̇ + γ𝒱 = −P(𝒱)∇L`, with explicit
//!   inverses of `S_V`; the weight factors follow `Ẇ = P(W)𝒱`.

mod checks;
mod energy;

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::lowrank::project_onto_bases;

pub use checks::{
    counterexample_check, counterexample_with_scale, flow_vs_discrete, momentum_rate_identity,
    vanilla_rates, CounterexampleReport, ScalingProblem,
};
pub use energy::{energy_record, verify_energy_dissipation, EnergyRecord, EnergyReport};

/// Condition number of `S_V` (or `S`) beyond which the factored flow refuses to step.
pub const STIFFNESS_LIMIT: f64 = 1e12;

/// Loss with a closed-form gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticLoss {
    /// `½‖W − A‖_F²`
    Quadratic(Matrix),
}

impl AnalyticLoss {
    pub fn value(&self, w: &Matrix) -> Result<f64> {
        match self {
            AnalyticLoss::Quadratic(a) => {
                let d = w.sub(a)?.frobenius_norm();
                Ok(0.5 * d * d)
            }
        }
    }

    pub fn gradient(&self, w: &Matrix) -> Result<Matrix> {
        match self {
            AnalyticLoss::Quadratic(a) => w.sub(a),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            AnalyticLoss::Quadratic(a) => a.shape(),
        }
    }
}

/// Weight factors `(U, S, V)` together with momentum factors `(U_V, S_V, V_V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub u: Matrix,
    pub s: Matrix,
    pub v: Matrix,
    pub u_v: Matrix,
    pub s_v: Matrix,
    pub v_v: Matrix,
}

impl FactorPair {
    fn to_vec(&self) -> Vec<Matrix> {
        vec![
            self.u.clone(),
            self.s.clone(),
            self.v.clone(),
            self.u_v.clone(),
            self.s_v.clone(),
            self.v_v.clone(),
        ]
    }

    fn from_vec(mut y: Vec<Matrix>) -> Self {
        let v_v = y.pop().expect("six blocks");
        let s_v = y.pop().expect("six blocks");
        let u_v = y.pop().expect("six blocks");
        let v = y.pop().expect("six blocks");
        let s = y.pop().expect("six blocks");
        let u = y.pop().expect("six blocks");
        FactorPair {
            u,
            s,
            v,
            u_v,
            s_v,
            v_v,
        }
    }

    pub fn weight(&self) -> Result<Matrix> {
        self.u.matmul(&self.s)?.matmul_t(&self.v)
    }

    pub fn momentum(&self) -> Result<Matrix> {
        self.u_v.matmul(&self.s_v)?.matmul_t(&self.v_v)
    }

    fn check(&self) -> Result<()> {
        let r = self.s.rows();
        let (n, m) = (self.u.rows(), self.v.rows());
        let ok = self.u.cols() == r
            && self.v.cols() == r
            && self.s.shape() == (r, r)
            && self.u_v.shape() == (n, r)
            && self.v_v.shape() == (m, r)
            && self.s_v.shape() == (r, r);
        if !ok {
            return Err(Error::shape("flow state", "factor blocks are inconsistent"));
        }
        Ok(())
    }
}

/// Dense weight and momentum for the projected flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedState {
    pub w: Matrix,
    pub mom: Matrix,
    /// Rank used to build `P(W)` from the leading singular vectors of `W`.
    pub rank: usize,
    /// Use `P = I` (the unconstrained momentum flow).
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowKind {
    Vanilla(FactorPair),
    Projected(ProjectedState),
    Factored(FactorPair),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub kind: FlowKind,
    pub t: f64,
    pub gamma: f64,
}

impl FlowState {
    pub fn projected(w: Matrix, mom: Matrix, rank: usize, gamma: f64) -> Result<Self> {
        if w.shape() != mom.shape() {
            return Err(Error::shape(
                "projected flow",
                "momentum shape differs from weight",
            ));
        }
        if rank == 0 || rank > w.rows().min(w.cols()) {
            return Err(Error::Argument(format!(
                "rank {rank} invalid for {:?}",
                w.shape()
            )));
        }
        Ok(FlowState {
            kind: FlowKind::Projected(ProjectedState {
                w,
                mom,
                rank,
                full: false,
            }),
            t: 0.0,
            gamma,
        })
    }

    pub fn full(w: Matrix, mom: Matrix, gamma: f64) -> Result<Self> {
        let rank = w.rows().min(w.cols());
        let mut s = FlowState::projected(w, mom, rank, gamma)?;
        if let FlowKind::Projected(p) = &mut s.kind {
            p.full = true;
        }
        Ok(s)
    }

    pub fn vanilla(factors: FactorPair, gamma: f64) -> Result<Self> {
        factors.check()?;
        Ok(FlowState {
            kind: FlowKind::Vanilla(factors),
            t: 0.0,
            gamma,
        })
    }

    pub fn factored(factors: FactorPair, gamma: f64) -> Result<Self> {
        factors.check()?;
        Ok(FlowState {
            kind: FlowKind::Factored(factors),
            t: 0.0,
            gamma,
        })
    }

    /// Current weight `W`.
    pub fn weight(&self) -> Result<Matrix> {
        match &self.kind {
            FlowKind::Projected(p) => Ok(p.w.clone()),
            FlowKind::Vanilla(f) | FlowKind::Factored(f) => f.weight(),
        }
    }

    /// Current momentum `𝒱`.
    pub fn momentum(&self) -> Result<Matrix> {
        match &self.kind {
            FlowKind::Projected(p) => Ok(p.mom.clone()),
            FlowKind::Vanilla(f) | FlowKind::Factored(f) => f.momentum(),
        }
    }

    /// Rank of the manifold the flow lives on.
    pub fn rank(&self) -> usize {
        match &self.kind {
            FlowKind::Projected(p) => p.rank,
            FlowKind::Vanilla(f) | FlowKind::Factored(f) => f.s.rows(),
        }
    }

    fn ensure_finite(&self) -> Result<()> {
        let ok = match &self.kind {
            FlowKind::Projected(p) => p.w.is_finite() && p.mom.is_finite(),
            FlowKind::Vanilla(f) | FlowKind::Factored(f) => {
                f.to_vec().iter().all(Matrix::is_finite)
            }
        };
        if ok && self.t.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "non-finite flow state at t = {}",
                self.t
            )))
        }
    }
}

/// One classical Runge–Kutta step for a system of matrix blocks.
pub fn rk4<F>(y: &[Matrix], h: f64, mut f: F) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<Vec<Matrix>>,
{
    let shift = |base: &[Matrix], k: &[Matrix], c: f64| -> Result<Vec<Matrix>> {
        base.iter()
            .zip(k)
            .map(|(b, d)| b.lin_comb(1.0, d, c))
            .collect()
    };
    let k1 = f(y)?;
    let k2 = f(&shift(y, &k1, 0.5 * h)?)?;
    let k3 = f(&shift(y, &k2, 0.5 * h)?)?;
    let k4 = f(&shift(y, &k3, h)?)?;
    y.iter()
        .enumerate()
        .map(|(i, yi)| {
            let mut out = yi.clone();
            out.axpy(h / 6.0, &k1[i])?;
            out.axpy(h / 3.0, &k2[i])?;
            out.axpy(h / 3.0, &k3[i])?;
            out.axpy(h / 6.0, &k4[i])?;
            Ok(out)
        })
        .collect()
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("step size {h} must be positive")))
    }
}

/// `(I − B Bᵀ) X`
fn complement(b: &Matrix, x: &Matrix) -> Result<Matrix> {
    x.sub(&b.matmul(&b.t_matmul(x)?)?)
}

/// Leading `r` singular vectors of `w`.
pub(crate) fn leading_bases(w: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let d = svd(w)?;
    Ok((d.p.columns(0, r), d.q.columns(0, r)))
}

/// `P(W) z` with `P` built from the leading `r` singular vectors of `W`.
pub(crate) fn project_dense(w: &Matrix, r: usize, z: &Matrix) -> Result<Matrix> {
    let (u, v) = leading_bases(w, r)?;
    project_onto_bases(&u, &v, z)
}

/// Inverse of a square coefficient, refusing when it is too ill-conditioned.
fn guarded_inverse(m: &Matrix, which: &'static str) -> Result<Matrix> {
    let d = svd(m)?;
    let cond = d.condition_number();
    if cond.is_nan() || cond > STIFFNESS_LIMIT {
        return Err(Error::Stiffness {
            which,
            cond,
            limit: STIFFNESS_LIMIT,
        });
    }
    let inv_sigma: Vec<f64> = d.sigma.iter().map(|s| 1.0 / s).collect();
    d.q.matmul(&Matrix::from_diag(&inv_sigma))?.matmul_t(&d.p)
}

/// Condition numbers `(cond(S), cond(S_V))` of a factored state.
pub fn factored_conditions(f: &FactorPair) -> Result<(f64, f64)> {
    Ok((
        svd(&f.s)?.condition_number(),
        svd(&f.s_v)?.condition_number(),
    ))
}

fn vanilla_rhs(y: &[Matrix], loss: &AnalyticLoss, gamma: f64) -> Result<Vec<Matrix>> {
    let [u, s, v, u_v, s_v, v_v] = y else {
        unreachable!("six blocks")
    };
    let g = loss.gradient(&u.matmul(s)?.matmul_t(v)?)?;
    let gv = g.matmul(v)?;
    let grad_u = gv.matmul_t(s)?;
    let grad_v = g.t_matmul(u)?.matmul(s)?;
    let grad_s = u.t_matmul(&gv)?;
    Ok(vec![
        u_v.clone(),
        s_v.clone(),
        v_v.clone(),
        u_v.lin_comb(-gamma, &grad_u, -1.0)?,
        s_v.lin_comb(-gamma, &grad_s, -1.0)?,
        v_v.lin_comb(-gamma, &grad_v, -1.0)?,
    ])
}

fn projected_rhs(p: &ProjectedState, loss: &AnalyticLoss, gamma: f64) -> Result<(Matrix, Matrix)> {
    let g = loss.gradient(&p.w)?;
    let (w_dot, pg) = if p.full {
        (p.mom.clone(), g)
    } else {
        let (u, v) = leading_bases(&p.w, p.rank)?;
        (
            project_onto_bases(&u, &v, &p.mom)?,
            project_onto_bases(&u, &v, &g)?,
        )
    };
    Ok((w_dot, p.mom.lin_comb(-gamma, &pg, -1.0)?))
}

fn factored_rhs(y: &[Matrix], loss: &AnalyticLoss, gamma: f64) -> Result<Vec<Matrix>> {
    let [u, s, v, u_v, s_v, v_v] = y else {
        unreachable!("six blocks")
    };
    let s_inv = guarded_inverse(s, "S")?;
    let sv_inv = guarded_inverse(s_v, "S_V")?;
    let g = loss.gradient(&u.matmul(s)?.matmul_t(v)?)?;
    let mom = u_v.matmul(s_v)?.matmul_t(v_v)?;

    let gvv = g.matmul(v_v)?;
    let u_v_dot = complement(u_v, &gvv.matmul(&sv_inv)?)?.scale(-1.0);
    let v_v_dot = complement(v_v, &g.t_matmul(u_v)?.matmul_t(&sv_inv)?)?.scale(-1.0);
    let s_v_dot = s_v.lin_comb(-gamma, &u_v.t_matmul(&gvv)?, -1.0)?;

    let mv = mom.matmul(v)?;
    let u_dot = complement(u, &mv.matmul(&s_inv)?)?;
    let s_dot = u.t_matmul(&mv)?;
    let v_dot = complement(v, &mom.t_matmul(u)?.matmul_t(&s_inv)?)?;
    Ok(vec![u_dot, s_dot, v_dot, u_v_dot, s_v_dot, v_v_dot])
}

/// One RK4 step of the vanilla factor-wise heavy-ball flow.
pub fn step_vanilla_flow(state: &FlowState, loss: &AnalyticLoss, h: f64) -> Result<FlowState> {
    check_step(h)?;
    let FlowKind::Vanilla(f) = &state.kind else {
        return Err(Error::Argument(
            "step_vanilla_flow needs a vanilla state".into(),
        ));
    };
    let y = rk4(&f.to_vec(), h, |y| vanilla_rhs(y, loss, state.gamma))?;
    let next = FlowState {
        kind: FlowKind::Vanilla(FactorPair::from_vec(y)),
        t: state.t + h,
        gamma: state.gamma,
    };
    next.ensure_finite()?;
    Ok(next)
}

/// One RK4 step of the projected momentum flow on dense `(W, 𝒱)`.
pub fn step_projected_flow(state: &FlowState, loss: &AnalyticLoss, h: f64) -> Result<FlowState> {
    check_step(h)?;
    let FlowKind::Projected(p) = &state.kind else {
        return Err(Error::Argument(
            "step_projected_flow needs a projected state".into(),
        ));
    };
    if loss.shape() != p.w.shape() {
        return Err(Error::shape(
            "step_projected_flow",
            "loss and weight shapes differ",
        ));
    }
    let y = rk4(&[p.w.clone(), p.mom.clone()], h, |y| {
        let stage = ProjectedState {
            w: y[0].clone(),
            mom: y[1].clone(),
            rank: p.rank,
            full: p.full,
        };
        let (a, b) = projected_rhs(&stage, loss, state.gamma)?;
        Ok(vec![a, b])
    })?;
    let mut y = y.into_iter();
    let next = FlowState {
        kind: FlowKind::Projected(ProjectedState {
            w: y.next().expect("two blocks"),
            mom: y.next().expect("two blocks"),
            rank: p.rank,
            full: p.full,
        }),
        t: state.t + h,
        gamma: state.gamma,
    };
    next.ensure_finite()?;
    Ok(next)
}

/// One RK4 step of the factored momentum flow. Every stage inverts `S_V` and `S`
/// and fails with a stiffness error when either is too ill-conditioned.
pub fn step_factored_momentum_flow(
    state: &FlowState,
    loss: &AnalyticLoss,
    h: f64,
) -> Result<FlowState> {
    check_step(h)?;
    let FlowKind::Factored(f) = &state.kind else {
        return Err(Error::Argument(
            "step_factored_momentum_flow needs a factored state".into(),
        ));
    };
    let y = rk4(&f.to_vec(), h, |y| factored_rhs(y, loss, state.gamma))?;
    let next = FlowState {
        kind: FlowKind::Factored(FactorPair::from_vec(y)),
        t: state.t + h,
        gamma: state.gamma,
    };
    next.ensure_finite()?;
    Ok(next)
}

/// Advance any flow by `steps` RK4 steps, recording energy before the first and
/// after every step.
pub fn integrate(
    state: &FlowState,
    loss: &AnalyticLoss,
    h: f64,
    steps: usize,
) -> Result<(FlowState, Vec<EnergyRecord>)> {
    let mut cur = state.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(energy_record(&cur, loss)?);
    for _ in 0..steps {
        cur = match cur.kind {
            FlowKind::Vanilla(_) => step_vanilla_flow(&cur, loss, h)?,
            FlowKind::Projected(_) => step_projected_flow(&cur, loss, h)?,
            FlowKind::Factored(_) => step_factored_momentum_flow(&cur, loss, h)?,
        };
        trace.push(energy_record(&cur, loss)?);
    }
    Ok((cur, trace))
}
