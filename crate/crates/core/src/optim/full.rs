//! Full-rank baselines.

use super::{check_gradient, AdamHyper, GradientOracle};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Dense heavy-ball state: weight, velocity, decay and learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FullHbState {
    pub w: Matrix,
    pub v: Matrix,
    pub gamma: f64,
    pub lambda: f64,
}

impl FullHbState {
    pub fn new(w: Matrix, gamma: f64, lambda: f64) -> Self {
        let v = Matrix::zeros(w.rows(), w.cols());
        FullHbState {
            w,
            v,
            gamma,
            lambda,
        }
    }
}

/// Heavy ball: `V ← (1−γ)V − λg`, then `W ← W + λV`.
pub fn hb_full_step(
    state: &FullHbState,
    oracle: &mut dyn GradientOracle,
) -> Result<(FullHbState, f64)> {
    if state.v.shape() != state.w.shape() {
        return Err(Error::shape(
            "hb_full_step",
            "velocity shape differs from weight",
        ));
    }
    let (loss, g) = oracle.grad_w(&state.w)?;
    if g.shape() != state.w.shape() {
        return Err(Error::shape(
            "hb_full_step",
            "gradient shape differs from weight",
        ));
    }
    check_gradient(&g, "gradient")?;
    let v = state.v.lin_comb(1.0 - state.gamma, &g, -state.lambda)?;
    let mut w = state.w.clone();
    w.axpy(state.lambda, &v)?;
    Ok((
        FullHbState {
            w,
            v,
            gamma: state.gamma,
            lambda: state.lambda,
        },
        loss,
    ))
}

/// Dense Adam state with step counter `n` (number of completed steps).
#[derive(Debug, Clone, PartialEq)]
pub struct FullAdamState {
    pub w: Matrix,
    pub v: Matrix,
    pub k: Matrix,
    pub n: u64,
    pub hyper: AdamHyper,
}

impl FullAdamState {
    pub fn new(w: Matrix, hyper: AdamHyper) -> Self {
        let (r, c) = w.shape();
        FullAdamState {
            w,
            v: Matrix::zeros(r, c),
            k: Matrix::zeros(r, c),
            n: 0,
            hyper,
        }
    }
}

/// One elementwise Adam update of `param` with `ε` outside the square root.
/// Returns `(param, V, K)`; `n` is the post-increment counter.
pub(crate) fn adam_update(
    param: &Matrix,
    v: &Matrix,
    k: &Matrix,
    g: &Matrix,
    n: u64,
    hyper: &AdamHyper,
) -> Result<(Matrix, Matrix, Matrix)> {
    let v = v.lin_comb(hyper.beta1, g, 1.0 - hyper.beta1)?;
    let k = k.lin_comb(hyper.beta2, &g.map(|x| x * x), 1.0 - hyper.beta2)?;
    let (c1, c2) = hyper.bias_corrections(n);
    let step = v.zip_map(&k, "adam", |m, s| (m / c1) / ((s / c2).sqrt() + hyper.eps))?;
    let mut p = param.clone();
    if hyper.weight_decay > 0.0 {
        p.axpy(-hyper.lambda * hyper.weight_decay, param)?;
    }
    p.axpy(-hyper.lambda, &step)?;
    Ok((p, v, k))
}

/// Adam: moment updates, bias correction with the post-increment counter, then
/// `W ← W − λ V̂/(√K̂ + ε)`. Weight decay, when set, is decoupled (AdamW).
pub fn adam_full_step(
    state: &FullAdamState,
    oracle: &mut dyn GradientOracle,
) -> Result<(FullAdamState, f64)> {
    if state.v.shape() != state.w.shape() || state.k.shape() != state.w.shape() {
        return Err(Error::shape(
            "adam_full_step",
            "moment shapes differ from weight",
        ));
    }
    let (loss, g) = oracle.grad_w(&state.w)?;
    if g.shape() != state.w.shape() {
        return Err(Error::shape(
            "adam_full_step",
            "gradient shape differs from weight",
        ));
    }
    check_gradient(&g, "gradient")?;
    let n = state.n + 1;
    let (w, v, k) = adam_update(&state.w, &state.v, &state.k, &g, n, &state.hyper)?;
    Ok((
        FullAdamState {
            w,
            v,
            k,
            n,
            hyper: state.hyper,
        },
        loss,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{FnOracle, QuadraticOracle};

    fn constant_grad(g: Matrix) -> impl FnMut(&Matrix) -> Result<(f64, Matrix)> {
        move |_w: &Matrix| Ok((0.0, g.clone()))
    }

    #[test]
    fn hb_hand_computed_step() {
        let s = FullHbState {
            w: Matrix::from_rows(&[&[1.0]]),
            v: Matrix::from_rows(&[&[0.0]]),
            gamma: 0.1,
            lambda: 0.5,
        };
        let mut o = FnOracle(constant_grad(Matrix::from_rows(&[&[2.0]])));
        let (next, _) = hb_full_step(&s, &mut o).unwrap();
        assert_eq!(next.v, Matrix::from_rows(&[&[-1.0]]));
        assert_eq!(next.w, Matrix::from_rows(&[&[0.5]]));
    }

    #[test]
    fn hb_full_decay_resets_velocity() {
        let s = FullHbState {
            w: Matrix::from_rows(&[&[0.0, 1.0]]),
            v: Matrix::from_rows(&[&[7.0, -3.0]]),
            gamma: 1.0,
            lambda: 0.25,
        };
        let g = Matrix::from_rows(&[&[1.0, 2.0]]);
        let mut o = FnOracle(constant_grad(g.clone()));
        let (next, _) = hb_full_step(&s, &mut o).unwrap();
        assert_eq!(next.v, g.scale(-0.25));
    }

    #[test]
    fn hb_coasts_without_gradient() {
        let s = FullHbState {
            w: Matrix::from_rows(&[&[1.0, 2.0]]),
            v: Matrix::from_rows(&[&[0.5, -1.0]]),
            gamma: 0.0,
            lambda: 0.1,
        };
        let mut o = FnOracle(constant_grad(Matrix::zeros(1, 2)));
        let (next, _) = hb_full_step(&s, &mut o).unwrap();
        assert_eq!(next.v, s.v);
        assert_eq!(next.w, Matrix::from_rows(&[&[1.05, 1.9]]));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let s = FullHbState::new(Matrix::zeros(1, 1), 0.1, 0.1);
        let mut o = FnOracle(constant_grad(Matrix::from_rows(&[&[f64::NAN]])));
        assert!(matches!(hb_full_step(&s, &mut o), Err(Error::Numeric(_))));
        let a = FullAdamState::new(Matrix::zeros(1, 1), AdamHyper::default());
        assert!(matches!(adam_full_step(&a, &mut o), Err(Error::Numeric(_))));
    }

    #[test]
    fn adam_first_step_is_signed() {
        let hyper = AdamHyper {
            lambda: 0.01,
            eps: 1e-14,
            ..AdamHyper::default()
        };
        let g = Matrix::from_rows(&[&[3.0, -0.002], &[1e-3, -40.0]]);
        let s = FullAdamState::new(Matrix::zeros(2, 2), hyper);
        let mut o = FnOracle(constant_grad(g.clone()));
        let (next, _) = adam_full_step(&s, &mut o).unwrap();
        assert_eq!(next.n, 1);
        let expected = g.map(|x| -0.01 * x.signum());
        assert!(next.w.sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn adam_without_gradient_keeps_weight() {
        let s = FullAdamState::new(Matrix::from_rows(&[&[1.0, -2.0]]), AdamHyper::default());
        let mut o = FnOracle(constant_grad(Matrix::zeros(1, 2)));
        let mut cur = s.clone();
        for _ in 0..5 {
            cur = adam_full_step(&cur, &mut o).unwrap().0;
        }
        assert_eq!(cur.w, s.w);
        assert_eq!(cur.n, 5);
    }

    #[test]
    fn adam_memoryless_betas() {
        let hyper = AdamHyper {
            lambda: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut oracle = QuadraticOracle::new(Matrix::from_rows(&[&[2.0, -1.0]]));
        let mut s = FullAdamState::new(Matrix::zeros(1, 2), hyper);
        for _ in 0..3 {
            let g = s.w.sub(&oracle.target).unwrap();
            let (next, _) = adam_full_step(&s, &mut oracle).unwrap();
            assert_eq!(next.v, g);
            assert_eq!(next.k, g.map(|x| x * x));
            s = next;
        }
    }
}
