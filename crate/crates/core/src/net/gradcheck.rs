use super::{backward, loss_value, Batch, Layer, LossKind, Network};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::factor_gradients;

/// Max relative discrepancy between central differences and the analytic gradient.
///
/// Every stored parameter is perturbed: the entries of `W` for dense layers and of
/// `U`, `S`, `V` for low-rank layers, where the analytic reference is the factor
/// gradient derived from `∇_W L`. Relative errors use
/// `max(|analytic|, 1e-3 · max|analytic over the parameter block|)` as denominator
/// so entries with vanishing gradient do not dominate.
pub fn finite_difference_check(
    net: &Network,
    batch: &Batch,
    loss: &LossKind,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("step h = {h} must be positive")));
    }
    let (_, grads) = backward(net, batch, loss)?;
    let mut worst: f64 = 0.0;
    for (l, layer) in net.layers().iter().enumerate() {
        let analytic: Vec<Matrix> = match layer {
            Layer::Dense { .. } => vec![grads[l].clone()],
            Layer::LowRank { f, .. } => {
                let (gu, gv, gs) = factor_gradients(f, &grads[l])?;
                vec![gu, gs, gv]
            }
        };
        for (block, reference) in analytic.iter().enumerate() {
            let floor = (1e-3 * reference.max_abs()).max(f64::MIN_POSITIVE);
            for idx in 0..reference.as_slice().len() {
                let mut probe = net.clone();
                let mut eval = |delta: f64| -> Result<f64> {
                    let param = block_mut(&mut probe.layers_mut()[l], block);
                    let orig = param.as_slice()[idx];
                    param.as_mut_slice()[idx] = orig + delta;
                    let v = loss_value(&probe, batch, loss);
                    block_mut(&mut probe.layers_mut()[l], block).as_mut_slice()[idx] = orig;
                    v
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                let an = reference.as_slice()[idx];
                worst = worst.max((fd - an).abs() / an.abs().max(floor));
            }
        }
    }
    Ok(worst)
}

/// Block 0 of a dense layer is `W`; blocks 0, 1, 2 of a low-rank layer are `U`, `S`, `V`.
fn block_mut(layer: &mut Layer, block: usize) -> &mut Matrix {
    match (layer, block) {
        (Layer::Dense { w, .. }, _) => w,
        (Layer::LowRank { f, .. }, 0) => &mut f.u,
        (Layer::LowRank { f, .. }, 1) => &mut f.s,
        (Layer::LowRank { f, .. }, _) => &mut f.v,
    }
}
