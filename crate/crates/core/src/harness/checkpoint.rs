//! Checkpoint directories: `manifest.json` describing every array, and `blob.bin`
//! holding the arrays back to back as little-endian `f64` in column-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::OptimizerKind;
use super::state::LayerState;
use crate::error::{Error, Result};
use crate::linalg::{householder_q, Matrix};
use crate::lowrank::LowRankFactors;
use crate::net::{Activation, Layer, Network};
use crate::optim::FactorMoments;

const FORMAT: &str = "dlrt-checkpoint";
const VERSION: u32 = 1;
/// Orthonormality defect accepted silently.
pub const CLEAN_TOL: f64 = 1e-8;
/// Largest defect repaired by re-orthonormalization; beyond it loading fails.
pub const REPAIR_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    LowRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub kind: LayerKind,
    pub activation: Activation,
    pub n_out: usize,
    pub n_in: usize,
    pub rank: Option<usize>,
}

/// Scalar part of a layer's optimizer state; matrices live in the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateEntry {
    pub kind: String,
    /// Step counters, in the order the state stores them.
    pub counters: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub optimizer: OptimizerKind,
    pub step: u64,
    pub layers: Vec<LayerEntry>,
    pub states: Vec<StateEntry>,
    pub arrays: Vec<ArrayEntry>,
}

/// A loaded checkpoint, with any repairs made on the way in.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub states: Vec<LayerState>,
    pub optimizer: OptimizerKind,
    pub step: u64,
    pub warnings: Vec<String>,
}

struct BlobWriter {
    entries: Vec<ArrayEntry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, m: &Matrix) {
        self.entries.push(ArrayEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            byte_offset: self.bytes.len() as u64,
        });
        for x in m.to_col_major() {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn state_arrays(state: &LayerState) -> (String, Vec<u64>, Vec<(&'static str, &Matrix)>) {
    match state {
        LayerState::Hb { v } => ("hb".into(), vec![], vec![("v", v)]),
        LayerState::Adam { v, k, n } => ("adam".into(), vec![*n], vec![("v", v), ("k", k)]),
        LayerState::LrHb { s_v } => ("lr-hb".into(), vec![], vec![("s_v", s_v)]),
        LayerState::LrAdam { s_v, s_k, n } => {
            ("lr-adam".into(), vec![*n], vec![("s_v", s_v), ("s_k", s_k)])
        }
        LayerState::Lora { u, s, v } => (
            "lora".into(),
            vec![u.n, s.n, v.n],
            vec![
                ("u.v", &u.v),
                ("u.k", &u.k),
                ("s.v", &s.v),
                ("s.k", &s.k),
                ("v.v", &v.v),
                ("v.k", &v.k),
            ],
        ),
    }
}

/// Write `net` and its optimizer states to the directory `path`.
pub fn save_checkpoint(
    net: &Network,
    states: &[LayerState],
    optimizer: OptimizerKind,
    step: u64,
    path: &Path,
) -> Result<()> {
    if !states.is_empty() && states.len() != net.len() {
        return Err(Error::Argument(format!(
            "{} states for {} layers",
            states.len(),
            net.len()
        )));
    }
    let mut blob = BlobWriter {
        entries: Vec::new(),
        bytes: Vec::new(),
    };
    let mut layers = Vec::with_capacity(net.len());
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense { w, act } => {
                blob.push(format!("layer{i}.w"), w);
                layers.push(LayerEntry {
                    kind: LayerKind::Dense,
                    activation: *act,
                    n_out: w.rows(),
                    n_in: w.cols(),
                    rank: None,
                });
            }
            Layer::LowRank { f, act } => {
                blob.push(format!("layer{i}.u"), &f.u);
                blob.push(format!("layer{i}.s"), &f.s);
                blob.push(format!("layer{i}.v"), &f.v);
                layers.push(LayerEntry {
                    kind: LayerKind::LowRank,
                    activation: *act,
                    n_out: f.n_out(),
                    n_in: f.n_in(),
                    rank: Some(f.rank()),
                });
            }
        }
    }
    let mut state_entries = Vec::with_capacity(states.len());
    for (i, st) in states.iter().enumerate() {
        let (kind, counters, arrays) = state_arrays(st);
        for (name, m) in arrays {
            blob.push(format!("state{i}.{name}"), m);
        }
        state_entries.push(StateEntry { kind, counters });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        optimizer,
        step,
        layers,
        states: state_entries,
        arrays: blob.entries,
    };
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mpath = path.join("manifest.json");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = path.join("blob.bin");
    fs::write(&bpath, &blob.bytes).map_err(|e| Error::io(&bpath, e))
}

struct BlobReader<'a> {
    manifest: &'a Manifest,
    bytes: &'a [u8],
}

impl BlobReader<'_> {
    fn get(&self, name: &str) -> Result<Matrix> {
        let entry = self
            .manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("array `{name}` missing from manifest")))?;
        let len = entry.rows * entry.cols;
        let start = entry.byte_offset as usize;
        let end = start + 8 * len;
        let raw = self.bytes.get(start..end).ok_or_else(|| {
            Error::Integrity(format!(
                "array `{name}` needs bytes {start}..{end} but blob has {}",
                self.bytes.len()
            ))
        })?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::from_col_major(entry.rows, entry.cols, &data)
    }

    fn get_shaped(&self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let m = self.get(name)?;
        if m.shape() != shape {
            return Err(Error::Format(format!(
                "array `{name}` is {:?}, expected {:?}",
                m.shape(),
                shape
            )));
        }
        Ok(m)
    }
}

/// `B = Q R`: returns `(Q, R)` with `R = Qᵀ B`.
fn qr(b: &Matrix) -> Result<(Matrix, Matrix)> {
    let q = householder_q(b);
    let r = q.t_matmul(b)?;
    Ok((q, r))
}

/// Check and, if slightly off, restore orthonormal bases. Momentum coefficients
/// expressed in the same bases are transformed alongside `S`.
fn validate_factors(
    layer: usize,
    f: LowRankFactors,
    state: Option<&mut LayerState>,
    warnings: &mut Vec<String>,
) -> Result<LowRankFactors> {
    let defect = f.orthonormality_defect();
    if defect <= CLEAN_TOL {
        return Ok(f);
    }
    if defect.is_nan() || defect > REPAIR_TOL {
        return Err(Error::Integrity(format!(
            "layer {layer}: orthonormality defect {defect:.3e} exceeds {REPAIR_TOL:.0e}"
        )));
    }
    let (qu, ru) = qr(&f.u)?;
    let (qv, rv) = qr(&f.v)?;
    let lift = |c: &Matrix| ru.matmul(c)?.matmul_t(&rv);
    let s = lift(&f.s)?;
    match state {
        Some(LayerState::LrHb { s_v }) => *s_v = lift(s_v)?,
        Some(LayerState::LrAdam { s_v, .. }) => *s_v = lift(s_v)?,
        _ => {}
    }
    let msg = format!("layer {layer}: re-orthonormalized bases (defect {defect:.3e})");
    log::warn!("{msg}");
    warnings.push(msg);
    LowRankFactors::new(qu, s, qv)
}

/// Read a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mpath = path.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let bpath = path.join("blob.bin");
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let expected: usize = manifest.arrays.iter().map(|a| 8 * a.rows * a.cols).sum();
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "blob has {} bytes, manifest describes {expected}",
            bytes.len()
        )));
    }
    let reader = BlobReader {
        manifest: &manifest,
        bytes: &bytes,
    };

    let mut states = Vec::with_capacity(manifest.states.len());
    for (i, entry) in manifest.states.iter().enumerate() {
        let layer = manifest
            .layers
            .get(i)
            .ok_or_else(|| Error::Format(format!("state {i} has no layer")))?;
        let full = (layer.n_out, layer.n_in);
        let r = layer.rank.unwrap_or(0);
        let counter = |k: usize| {
            entry
                .counters
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("state {i} lacks counter {k}")))
        };
        let g = |name: &str, shape| reader.get_shaped(&format!("state{i}.{name}"), shape);
        let st = match entry.kind.as_str() {
            "hb" => LayerState::Hb { v: g("v", full)? },
            "adam" => LayerState::Adam {
                v: g("v", full)?,
                k: g("k", full)?,
                n: counter(0)?,
            },
            "lr-hb" => LayerState::LrHb {
                s_v: g("s_v", (r, r))?,
            },
            "lr-adam" => LayerState::LrAdam {
                s_v: g("s_v", (r, r))?,
                s_k: g("s_k", (r, r))?,
                n: counter(0)?,
            },
            "lora" => {
                let moments = |p: &str, shape, k| -> Result<FactorMoments> {
                    Ok(FactorMoments {
                        v: g(&format!("{p}.v"), shape)?,
                        k: g(&format!("{p}.k"), shape)?,
                        n: counter(k)?,
                    })
                };
                LayerState::Lora {
                    u: moments("u", (layer.n_out, r), 0)?,
                    s: moments("s", (r, r), 1)?,
                    v: moments("v", (layer.n_in, r), 2)?,
                }
            }
            other => return Err(Error::Format(format!("unknown state kind `{other}`"))),
        };
        states.push(st);
    }

    let mut warnings = Vec::new();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let act = entry.activation;
        let layer = match (entry.kind, entry.rank) {
            (LayerKind::Dense, None) => Layer::Dense {
                w: reader.get_shaped(&format!("layer{i}.w"), (entry.n_out, entry.n_in))?,
                act,
            },
            (LayerKind::LowRank, Some(r)) => {
                let f = LowRankFactors::new(
                    reader.get_shaped(&format!("layer{i}.u"), (entry.n_out, r))?,
                    reader.get_shaped(&format!("layer{i}.s"), (r, r))?,
                    reader.get_shaped(&format!("layer{i}.v"), (entry.n_in, r))?,
                )?;
                let f = if manifest.optimizer == OptimizerKind::LoraAdam {
                    f
                } else {
                    validate_factors(i, f, states.get_mut(i), &mut warnings)?
                };
                Layer::LowRank { f, act }
            }
            _ => return Err(Error::Format(format!("layer {i}: kind and rank disagree"))),
        };
        layers.push(layer);
    }
    let network = Network::new(layers).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint {
        network,
        states,
        optimizer: manifest.optimizer,
        step: manifest.step,
        warnings,
    })
}
