use super::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::TruncationPolicy;
use crate::net::Layer;
use crate::optim::{
    adam_full_step, hb_full_step, lora_adam_step, lr_adam_naive_step, lr_adam_step, lr_hb_step,
    AdamHyper, AdamState, FactorMoments, FrozenGradient, FullAdamState, FullHbState,
    HeavyBallState, LoraAdamState,
};

/// Optimizer memory of one layer, stored next to (not inside) the layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerState {
    Hb {
        v: Matrix,
    },
    Adam {
        v: Matrix,
        k: Matrix,
        n: u64,
    },
    LrHb {
        s_v: Matrix,
    },
    /// Shared by `lr-adam` and `lr-adam-naive`.
    LrAdam {
        s_v: Matrix,
        s_k: Matrix,
        n: u64,
    },
    Lora {
        u: FactorMoments,
        s: FactorMoments,
        v: FactorMoments,
    },
}

impl LayerState {
    /// Zero moments matching `layer`.
    pub fn fresh(kind: OptimizerKind, layer: &Layer) -> Result<Self> {
        match (kind, layer) {
            (OptimizerKind::Hb, Layer::Dense { w, .. }) => Ok(LayerState::Hb {
                v: Matrix::zeros(w.rows(), w.cols()),
            }),
            (OptimizerKind::Adam, Layer::Dense { w, .. }) => Ok(LayerState::Adam {
                v: Matrix::zeros(w.rows(), w.cols()),
                k: Matrix::zeros(w.rows(), w.cols()),
                n: 0,
            }),
            (OptimizerKind::LrHb, Layer::LowRank { f, .. }) => Ok(LayerState::LrHb {
                s_v: Matrix::zeros(f.rank(), f.rank()),
            }),
            (OptimizerKind::LrAdam | OptimizerKind::LrAdamNaive, Layer::LowRank { f, .. }) => {
                Ok(LayerState::LrAdam {
                    s_v: Matrix::zeros(f.rank(), f.rank()),
                    s_k: Matrix::zeros(f.rank(), f.rank()),
                    n: 0,
                })
            }
            (OptimizerKind::LoraAdam, Layer::LowRank { f, .. }) => Ok(LayerState::Lora {
                u: FactorMoments::zeros_like(&f.u),
                s: FactorMoments::zeros_like(&f.s),
                v: FactorMoments::zeros_like(&f.v),
            }),
            (kind, _) => Err(Error::Argument(format!(
                "optimizer {kind} does not apply to this layer type"
            ))),
        }
    }

    /// Number of reals held by the state.
    pub fn len(&self) -> usize {
        let size = |m: &Matrix| m.rows() * m.cols();
        match self {
            LayerState::Hb { v } => size(v),
            LayerState::Adam { v, k, .. } => size(v) + size(k),
            LayerState::LrHb { s_v } => size(s_v),
            LayerState::LrAdam { s_v, s_k, .. } => size(s_v) + size(s_k),
            LayerState::Lora { u, s, v } => 2 * (size(&u.v) + size(&s.v) + size(&v.v)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Step settings shared by all layers for one global step.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings {
    pub kind: OptimizerKind,
    pub lambda: f64,
    pub gamma: f64,
    pub adam: AdamHyper,
    pub policy: TruncationPolicy,
}

/// One optimizer step on one layer from a precomputed weight gradient.
pub fn step_layer(
    layer: &Layer,
    state: &LayerState,
    oracle: &mut FrozenGradient,
    cfg: &StepSettings,
) -> Result<(Layer, LayerState)> {
    let adam = AdamHyper {
        lambda: cfg.lambda,
        ..cfg.adam
    };
    let act = layer.activation();
    match (cfg.kind, layer, state) {
        (OptimizerKind::Hb, Layer::Dense { w, .. }, LayerState::Hb { v }) => {
            let st = FullHbState {
                w: w.clone(),
                v: v.clone(),
                gamma: cfg.gamma,
                lambda: cfg.lambda,
            };
            let (next, _) = hb_full_step(&st, oracle)?;
            Ok((
                Layer::Dense { w: next.w, act },
                LayerState::Hb { v: next.v },
            ))
        }
        (OptimizerKind::Adam, Layer::Dense { w, .. }, LayerState::Adam { v, k, n }) => {
            let st = FullAdamState {
                w: w.clone(),
                v: v.clone(),
                k: k.clone(),
                n: *n,
                hyper: adam,
            };
            let (next, _) = adam_full_step(&st, oracle)?;
            Ok((
                Layer::Dense { w: next.w, act },
                LayerState::Adam {
                    v: next.v,
                    k: next.k,
                    n: next.n,
                },
            ))
        }
        (OptimizerKind::LrHb, Layer::LowRank { f, .. }, LayerState::LrHb { s_v }) => {
            let st = HeavyBallState {
                s_v: s_v.clone(),
                gamma: cfg.gamma,
                lambda: cfg.lambda,
            };
            let (f, next, _) = lr_hb_step(f, &st, oracle, &cfg.policy)?;
            Ok((
                Layer::LowRank { f, act },
                LayerState::LrHb { s_v: next.s_v },
            ))
        }
        (
            OptimizerKind::LrAdam | OptimizerKind::LrAdamNaive,
            Layer::LowRank { f, .. },
            LayerState::LrAdam { s_v, s_k, n },
        ) => {
            let st = AdamState {
                s_v: s_v.clone(),
                s_k: s_k.clone(),
                n: *n,
                hyper: adam,
            };
            let (f, next, _) = if cfg.kind == OptimizerKind::LrAdam {
                lr_adam_step(f, &st, oracle, &cfg.policy)?
            } else {
                lr_adam_naive_step(f, &st, oracle, &cfg.policy)?
            };
            Ok((
                Layer::LowRank { f, act },
                LayerState::LrAdam {
                    s_v: next.s_v,
                    s_k: next.s_k,
                    n: next.n,
                },
            ))
        }
        (OptimizerKind::LoraAdam, Layer::LowRank { f, .. }, LayerState::Lora { u, s, v }) => {
            let st = LoraAdamState {
                u: u.clone(),
                s: s.clone(),
                v: v.clone(),
                hyper: adam,
            };
            let (f, next, _) = lora_adam_step(f, &st, oracle)?;
            Ok((
                Layer::LowRank { f, act },
                LayerState::Lora {
                    u: next.u,
                    s: next.s,
                    v: next.v,
                },
            ))
        }
        (kind, _, _) => Err(Error::Argument(format!(
            "optimizer {kind} got a mismatched layer or state"
        ))),
    }
}
