use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::{factor_gradients, reconstruct, LowRankFactors};

/// Loss and gradient access for one layer's weight.
///
/// Implementations must answer every call within one optimizer step from the same
/// data batch. The factored calls default to evaluating [`GradientOracle::grad_w`]
/// at the reconstructed weight.
pub trait GradientOracle {
    /// `(L(W), ∇_W L(W))`.
    fn grad_w(&mut self, w: &Matrix) -> Result<(f64, Matrix)>;

    /// `(L, ∇_U L, ∇_V L)` at `W = U S Vᵀ`.
    fn grad_at_factors(&mut self, f: &LowRankFactors) -> Result<(f64, Matrix, Matrix)> {
        let (loss, g) = self.grad_w(&reconstruct(f)?)?;
        let (gu, gv, _) = factor_gradients(f, &g)?;
        Ok((loss, gu, gv))
    }

    /// `(L, ∇_{S̄} L)` at `W = Û S̄ V̂ᵀ`, i.e. `Ûᵀ ∇_W L V̂`.
    fn grad_at_coeff(
        &mut self,
        u_hat: &Matrix,
        s_bar: &Matrix,
        v_hat: &Matrix,
    ) -> Result<(f64, Matrix)> {
        let w = u_hat.matmul(s_bar)?.matmul_t(v_hat)?;
        let (loss, g) = self.grad_w(&w)?;
        Ok((loss, u_hat.t_matmul(&g)?.matmul(v_hat)?))
    }
}

impl<O: GradientOracle + ?Sized> GradientOracle for &mut O {
    fn grad_w(&mut self, w: &Matrix) -> Result<(f64, Matrix)> {
        (**self).grad_w(w)
    }

    fn grad_at_factors(&mut self, f: &LowRankFactors) -> Result<(f64, Matrix, Matrix)> {
        (**self).grad_at_factors(f)
    }

    fn grad_at_coeff(
        &mut self,
        u_hat: &Matrix,
        s_bar: &Matrix,
        v_hat: &Matrix,
    ) -> Result<(f64, Matrix)> {
        (**self).grad_at_coeff(u_hat, s_bar, v_hat)
    }
}

/// `L(W) = ½‖W − A‖_F²`.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    pub target: Matrix,
    /// Number of gradient evaluations served.
    pub evaluations: usize,
}

impl QuadraticOracle {
    pub fn new(target: Matrix) -> Self {
        QuadraticOracle {
            target,
            evaluations: 0,
        }
    }

    pub fn loss(&self, w: &Matrix) -> Result<f64> {
        let d = w.sub(&self.target)?.frobenius_norm();
        Ok(0.5 * d * d)
    }
}

impl GradientOracle for QuadraticOracle {
    fn grad_w(&mut self, w: &Matrix) -> Result<(f64, Matrix)> {
        self.evaluations += 1;
        let g = w.sub(&self.target)?;
        let d = g.frobenius_norm();
        Ok((0.5 * d * d, g))
    }
}

/// A gradient computed once at the layer's current weight (e.g. by a network backward pass).
///
/// Valid for the low-rank steps because the coefficient evaluation point
/// `Û S̄ V̂ᵀ = Û Ûᵀ U S Vᵀ V̂ V̂ᵀ` equals `U S Vᵀ` whenever the augmented bases contain
/// the old ones, so both gradient calls of a step see the same weight.
#[derive(Debug, Clone)]
pub struct FrozenGradient {
    pub loss: f64,
    pub grad: Matrix,
}

impl FrozenGradient {
    pub fn new(loss: f64, grad: Matrix) -> Self {
        FrozenGradient { loss, grad }
    }
}

impl GradientOracle for FrozenGradient {
    fn grad_w(&mut self, w: &Matrix) -> Result<(f64, Matrix)> {
        if w.shape() != self.grad.shape() {
            return Err(Error::shape(
                "FrozenGradient",
                format!("weight {:?} vs gradient {:?}", w.shape(), self.grad.shape()),
            ));
        }
        Ok((self.loss, self.grad.clone()))
    }

    fn grad_at_factors(&mut self, f: &LowRankFactors) -> Result<(f64, Matrix, Matrix)> {
        let (gu, gv, _) = factor_gradients(f, &self.grad)?;
        Ok((self.loss, gu, gv))
    }

    fn grad_at_coeff(
        &mut self,
        u_hat: &Matrix,
        _s_bar: &Matrix,
        v_hat: &Matrix,
    ) -> Result<(f64, Matrix)> {
        Ok((self.loss, u_hat.t_matmul(&self.grad)?.matmul(v_hat)?))
    }
}

/// Adapter for a closure `W ↦ (L, ∇_W L)`.
pub struct FnOracle<F>(pub F);

impl<F> GradientOracle for FnOracle<F>
where
    F: FnMut(&Matrix) -> Result<(f64, Matrix)>,
{
    fn grad_w(&mut self, w: &Matrix) -> Result<(f64, Matrix)> {
        (self.0)(w)
    }
}
