//! Low-rank factors `W = U S Vᵀ`, the tangent-space and naive projectors, factor
//! gradients, basis augmentation and the rank-adaptive truncations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{householder_q, svd, Matrix};

/// `W = U S Vᵀ` with `U: n_out × r`, `S: r × r`, `V: n_in × r`.
///
/// Orthonormality of `U` and `V` is an invariant of the geometric optimizers but
/// not of the LoRA-style baseline, so it is checked on demand rather than on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub u: Matrix,
    pub s: Matrix,
    pub v: Matrix,
}

impl LowRankFactors {
    pub fn new(u: Matrix, s: Matrix, v: Matrix) -> Result<Self> {
        let r = s.rows();
        if !s.is_square() || r == 0 {
            return Err(Error::shape(
                "LowRankFactors",
                format!("S is {}x{}", s.rows(), s.cols()),
            ));
        }
        if u.cols() != r || v.cols() != r {
            return Err(Error::shape(
                "LowRankFactors",
                format!("U has {} cols, V has {} cols, rank {r}", u.cols(), v.cols()),
            ));
        }
        if r > u.rows().min(v.rows()) {
            return Err(Error::shape(
                "LowRankFactors",
                format!("rank {r} exceeds min({}, {})", u.rows(), v.rows()),
            ));
        }
        Ok(LowRankFactors { u, s, v })
    }

    /// Rank-`rank` truncated SVD of a dense matrix.
    pub fn from_dense(w: &Matrix, rank: usize) -> Result<Self> {
        let k = w.rows().min(w.cols());
        if rank == 0 || rank > k {
            return Err(Error::Argument(format!("rank {rank} not in 1..={k}")));
        }
        let d = svd(w)?;
        LowRankFactors::new(
            d.p.columns(0, rank),
            Matrix::from_diag(&d.sigma[..rank]),
            d.q.columns(0, rank),
        )
    }

    pub fn rank(&self) -> usize {
        self.s.rows()
    }

    pub fn n_out(&self) -> usize {
        self.u.rows()
    }

    pub fn n_in(&self) -> usize {
        self.v.rows()
    }

    /// Stored floats: `(n_out + n_in)·r + r²`.
    pub fn param_count(&self) -> usize {
        let r = self.rank();
        (self.n_out() + self.n_in()) * r + r * r
    }

    /// max(‖UᵀU − I‖_F, ‖VᵀV − I‖_F).
    pub fn orthonormality_defect(&self) -> f64 {
        self.u
            .orthonormality_defect()
            .max(self.v.orthonormality_defect())
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        self.orthonormality_defect() <= tol * (self.rank() as f64).sqrt()
    }

    /// Same bases, different coefficient (`U C Vᵀ`).
    pub fn with_coefficient(&self, c: Matrix) -> Result<Self> {
        LowRankFactors::new(self.u.clone(), c, self.v.clone())
    }
}

/// Returns `U S Vᵀ`.
pub fn reconstruct(f: &LowRankFactors) -> Result<Matrix> {
    f.u.matmul(&f.s)?.matmul_t(&f.v)
}

/// Rank selection for the truncation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    /// Relative tolerance; the discarded tail satisfies ‖tail‖_F ≤ tau·‖Ŝ‖_F.
    pub tau: f64,
    pub r_min: usize,
    /// `None` means the augmented size.
    pub r_max: Option<usize>,
    /// Raise the rank until the discarded part of the momentum also fits under the threshold.
    #[serde(default)]
    pub momentum_guard: bool,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy {
            tau: 0.1,
            r_min: 2,
            r_max: None,
            momentum_guard: false,
        }
    }
}

impl TruncationPolicy {
    pub fn new(tau: f64, r_min: usize, r_max: Option<usize>) -> Result<Self> {
        let p = TruncationPolicy {
            tau,
            r_min,
            r_max,
            momentum_guard: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Fixed rank `r`, no tolerance-driven truncation beyond it.
    pub fn fixed(r: usize) -> Self {
        TruncationPolicy {
            tau: 0.0,
            r_min: r,
            r_max: Some(r),
            momentum_guard: false,
        }
    }

    pub fn with_guard(mut self, on: bool) -> Self {
        self.momentum_guard = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::config(
                "tau",
                format!("must be finite and >= 0, got {}", self.tau),
            ));
        }
        if self.r_min == 0 {
            return Err(Error::config("r_min", "must be positive"));
        }
        if let Some(r_max) = self.r_max {
            if r_max < self.r_min {
                return Err(Error::config(
                    "r_max",
                    format!("r_max {r_max} < r_min {}", self.r_min),
                ));
            }
        }
        Ok(())
    }

    /// Smallest rank whose discarded tail energy is within `tau·‖σ‖₂`, clamped to the policy bounds.
    ///
    /// Singular values at roundoff level relative to σ₁ count as zero, so `tau = 0`
    /// keeps exactly the numerically nonzero part of the spectrum.
    pub fn select_rank(&self, sigma: &[f64]) -> usize {
        let k = sigma.len();
        if k == 0 {
            return 0;
        }
        let total: f64 = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        let theta = self.tau * total;
        let floor = sigma[0] * (k as f64) * f64::EPSILON;

        // tails[i] = ‖σ[i..]‖₂, accumulated from the small end
        let mut tails = vec![0.0; k + 1];
        for i in (0..k).rev() {
            tails[i] = (tails[i + 1] * tails[i + 1] + sigma[i] * sigma[i]).sqrt();
        }
        let mut r1 = k;
        for r in 1..=k {
            let noise_only = sigma[r..].iter().all(|&s| s <= floor);
            if tails[r] <= theta || noise_only {
                r1 = r;
                break;
            }
        }
        let upper = self.r_max.unwrap_or(k).min(k);
        r1.max(self.r_min).min(upper).max(1)
    }
}

/// `P(W)z = U Uᵀ z (I − V Vᵀ) + z V Vᵀ`, the orthogonal projection onto the tangent
/// space of the fixed-rank manifold at `W = U S Vᵀ`.
pub fn tangent_project(f: &LowRankFactors, z: &Matrix) -> Result<Matrix> {
    project_onto_bases(&f.u, &f.v, z)
}

/// Tangent projection expressed directly through orthonormal bases.
pub(crate) fn project_onto_bases(u: &Matrix, v: &Matrix, z: &Matrix) -> Result<Matrix> {
    if z.rows() != u.rows() || z.cols() != v.rows() {
        return Err(Error::shape(
            "tangent_project",
            format!(
                "z is {}x{}, bases give {}x{}",
                z.rows(),
                z.cols(),
                u.rows(),
                v.rows()
            ),
        ));
    }
    // zV, Uᵀz, UᵀzV
    let zv = z.matmul(v)?;
    let utz = u.t_matmul(z)?;
    let utzv = utz.matmul(v)?;
    // U Uᵀz − U UᵀzV Vᵀ + zV Vᵀ
    let mut out = u.matmul(&utz)?;
    out.axpy(-1.0, &u.matmul(&utzv)?.matmul_t(v)?)?;
    out.axpy(1.0, &zv.matmul_t(v)?)?;
    Ok(out)
}

/// The map induced by running independent momentum methods on `U`, `S`, `V`:
/// `z V Sᵀ S_V V_Vᵀ + U_V Uᵀ z V V_Vᵀ + U_V S_V Sᵀ Uᵀ z`.
///
/// `mom` carries `(U_V, S_V, V_V)`; it is not required to be orthonormal.
pub fn naive_project(f: &LowRankFactors, mom: &LowRankFactors, z: &Matrix) -> Result<Matrix> {
    if z.rows() != f.n_out() || z.cols() != f.n_in() {
        return Err(Error::shape(
            "naive_project",
            format!(
                "z is {}x{}, factors give {}x{}",
                z.rows(),
                z.cols(),
                f.n_out(),
                f.n_in()
            ),
        ));
    }
    if mom.n_out() != f.n_out() || mom.n_in() != f.n_in() || mom.rank() != f.rank() {
        return Err(Error::shape(
            "naive_project",
            "momentum factors do not match weight factors",
        ));
    }
    let (u, s, v) = (&f.u, &f.s, &f.v);
    let (uv, sv, vv) = (&mom.u, &mom.s, &mom.v);
    let t1 = Matrix::chain(&[&z.matmul(v)?, &s.transpose(), sv])?.matmul_t(vv)?;
    let utzv = u.t_matmul(z)?.matmul(v)?;
    let t2 = uv.matmul(&utzv)?.matmul_t(vv)?;
    let t3 = Matrix::chain(&[uv, sv, &s.transpose(), &u.t_matmul(z)?])?;
    let mut out = t1;
    out.axpy(1.0, &t2)?;
    out.axpy(1.0, &t3)?;
    Ok(out)
}

/// Gradients with respect to the factors given `∇_W L`:
/// `(∇_U, ∇_V, ∇_S) = (G V Sᵀ, Gᵀ U S, Uᵀ G V)`.
pub fn factor_gradients(f: &LowRankFactors, grad_w: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if grad_w.rows() != f.n_out() || grad_w.cols() != f.n_in() {
        return Err(Error::shape(
            "factor_gradients",
            format!(
                "gradient is {}x{}, factors give {}x{}",
                grad_w.rows(),
                grad_w.cols(),
                f.n_out(),
                f.n_in()
            ),
        ));
    }
    let gv = grad_w.matmul(&f.v)?;
    let grad_u = gv.matmul_t(&f.s)?;
    let gtu = grad_w.t_matmul(&f.u)?;
    let grad_v = gtu.matmul(&f.s)?;
    let grad_s = f.u.t_matmul(&gv)?;
    Ok((grad_u, grad_v, grad_s))
}

/// `ortho([g | b])`: orthonormal basis containing the old basis `b` and the basis
/// dynamics `g`. Gradient block first. Capped at `n` columns when `2r > n`.
pub fn basis_augmentation(b: &Matrix, g: &Matrix) -> Result<Matrix> {
    if b.shape() != g.shape() {
        return Err(Error::shape(
            "basis_augmentation",
            format!(
                "basis {}x{} vs dynamics {}x{}",
                b.rows(),
                b.cols(),
                g.rows(),
                g.cols()
            ),
        ));
    }
    g.ensure_finite("basis dynamics")?;
    Ok(householder_q(&g.hstack(b)?))
}

/// Output of the shared truncated-SVD stage.
#[derive(Debug, Clone)]
pub struct Truncated {
    pub factors: LowRankFactors,
    /// `P_{r₁}`, the kept left singular vectors of Ŝ.
    pub p: Matrix,
    /// `Q_{r₁}`, the kept right singular vectors of Ŝ.
    pub q: Matrix,
    /// Full singular spectrum of Ŝ.
    pub sigma: Vec<f64>,
}

impl Truncated {
    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    /// `P_{r₁}ᵀ M Q_{r₁}`, i.e. `Uᵀ Û M V̂ᵀ V`.
    pub fn project_coefficient(&self, m: &Matrix) -> Result<Matrix> {
        self.p.t_matmul(m)?.matmul(&self.q)
    }
}

fn check_augmented(s_hat: &Matrix, u_hat: &Matrix, v_hat: &Matrix) -> Result<()> {
    if s_hat.rows() != u_hat.cols() || s_hat.cols() != v_hat.cols() {
        return Err(Error::shape(
            "truncation",
            format!(
                "Ŝ is {}x{}, Û has {} cols, V̂ has {} cols",
                s_hat.rows(),
                s_hat.cols(),
                u_hat.cols(),
                v_hat.cols()
            ),
        ));
    }
    Ok(())
}

fn truncate_svd(
    s_hat: &Matrix,
    u_hat: &Matrix,
    v_hat: &Matrix,
    policy: &TruncationPolicy,
    guard_momentum: Option<&Matrix>,
) -> Result<Truncated> {
    check_augmented(s_hat, u_hat, v_hat)?;
    let d = svd(s_hat)?;
    let k = d.sigma.len();
    let mut r1 = policy.select_rank(&d.sigma);

    if let (true, Some(sv)) = (policy.momentum_guard, guard_momentum) {
        let theta = policy.tau * s_hat.frobenius_norm();
        let upper = policy.r_max.unwrap_or(k).min(k);
        while r1 < upper {
            let p = d.p.columns(0, r1);
            let q = d.q.columns(0, r1);
            let kept = p.matmul(&p.t_matmul(sv)?.matmul(&q)?)?.matmul_t(&q)?;
            if sv.sub(&kept)?.frobenius_norm() <= theta {
                break;
            }
            r1 += 1;
        }
    }

    let p = d.p.columns(0, r1);
    let q = d.q.columns(0, r1);
    let factors = LowRankFactors::new(
        u_hat.matmul(&p)?,
        Matrix::from_diag(&d.sigma[..r1]),
        v_hat.matmul(&q)?,
    )?;
    Ok(Truncated {
        factors,
        p,
        q,
        sigma: d.sigma,
    })
}

/// Truncation for the heavy-ball method: new factors plus the momentum coefficient
/// re-expressed in the kept bases, `S_V = P_{r₁}ᵀ Ŝ_V Q_{r₁}`.
pub fn truncate_hb(
    s_hat: &Matrix,
    sv_hat: &Matrix,
    u_hat: &Matrix,
    v_hat: &Matrix,
    policy: &TruncationPolicy,
) -> Result<(LowRankFactors, Matrix)> {
    let t = truncate_hb_detailed(s_hat, sv_hat, u_hat, v_hat, policy)?;
    let sv = t.project_coefficient(sv_hat)?;
    Ok((t.factors, sv))
}

pub(crate) fn truncate_hb_detailed(
    s_hat: &Matrix,
    sv_hat: &Matrix,
    u_hat: &Matrix,
    v_hat: &Matrix,
    policy: &TruncationPolicy,
) -> Result<Truncated> {
    if sv_hat.shape() != s_hat.shape() {
        return Err(Error::shape(
            "truncate_hb",
            "momentum coefficient shape differs from Ŝ",
        ));
    }
    truncate_svd(s_hat, u_hat, v_hat, policy, Some(sv_hat))
}

/// Truncation for the Adam method. The second moment is carried through its
/// elementwise square root: `S_K = (P_{r₁}ᵀ √Ŝ_K Q_{r₁})²`.
pub fn truncate_adam(
    s_hat: &Matrix,
    sv_hat: &Matrix,
    sk_hat: &Matrix,
    u_hat: &Matrix,
    v_hat: &Matrix,
    policy: &TruncationPolicy,
) -> Result<(LowRankFactors, Matrix, Matrix)> {
    if sv_hat.shape() != s_hat.shape() || sk_hat.shape() != s_hat.shape() {
        return Err(Error::shape("truncate_adam", "moment shapes differ from Ŝ"));
    }
    check_second_moment(sk_hat)?;
    let t = truncate_svd(s_hat, u_hat, v_hat, policy, Some(sv_hat))?;
    let sv = t.project_coefficient(sv_hat)?;
    let sk = t
        .project_coefficient(&sk_hat.map(f64::sqrt))?
        .map(|x| x * x);
    Ok((t.factors, sv, sk))
}

/// Truncation that only updates `(U, S, V)`; momentum coefficients are left to the caller.
pub fn truncate_naive(
    s_hat: &Matrix,
    u_hat: &Matrix,
    v_hat: &Matrix,
    policy: &TruncationPolicy,
) -> Result<LowRankFactors> {
    Ok(truncate_svd(s_hat, u_hat, v_hat, policy, None)?.factors)
}

pub(crate) fn check_second_moment(sk: &Matrix) -> Result<()> {
    sk.ensure_finite("second moment")?;
    let min = sk.min_entry();
    if min < 0.0 {
        return Err(Error::Numeric(format!(
            "second moment has negative entry {min:e}"
        )));
    }
    Ok(())
}
