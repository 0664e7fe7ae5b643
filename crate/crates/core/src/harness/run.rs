use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{ExperimentConfig, OptimizerKind, Task};
use super::metrics::{
    compression_ratio, join_ranks, read_metrics, write_joined, MetricsRow, MetricsWriter,
};
use super::state::{step_layer, LayerState, StepSettings};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{
    accuracy, append_bias_column, backward, gen_matrix_recovery, gen_two_class, loss_value, split,
    Activation, Batch, Layer, LossKind, Network, Targets,
};
use crate::optim::FrozenGradient;

/// Environment variable capping the number of layers stepped concurrently.
pub const THREADS_ENV: &str = "DLRT_THREADS";

// independent streams derived from the user seed
const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Data, loss and initial network of a task.
#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub train: Batch,
    pub val: Option<Batch>,
    pub loss: LossKind,
    pub network: Network,
    /// States carried over from an initial checkpoint.
    pub states: Option<Vec<LayerState>>,
}

fn dense_of(net: &Network) -> Result<Network> {
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            Ok(Layer::Dense {
                w: l.weight()?,
                act: l.activation(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers)
}

/// Bring `net` into the layer form `kind` trains.
pub fn adapt_network(net: &Network, kind: OptimizerKind, init_rank: usize) -> Result<Network> {
    if kind.is_low_rank() {
        net.factorized(init_rank)
    } else {
        dense_of(net)
    }
}

fn two_class_data(cfg: &ExperimentConfig, dim: usize) -> Result<(Batch, Batch)> {
    let data = gen_two_class(cfg.n_samples, dim, stream(cfg.seed, DATA_STREAM).next_u64())?;
    let data = Batch::new(append_bias_column(&data.inputs), data.targets)?;
    split(&data, 0.8)
}

pub fn build_task(cfg: &ExperimentConfig) -> Result<TaskSetup> {
    let mut init_rng = stream(cfg.seed, INIT_STREAM);
    match cfg.task {
        Task::MatrixRecovery => {
            let n = cfg.dim;
            let loss = gen_matrix_recovery(
                n,
                cfg.true_rank,
                cfg.noise,
                stream(cfg.seed, DATA_STREAM).next_u64(),
            )?;
            let dense = Network::dense_random(
                &[n, n],
                &[Activation::Identity],
                cfg.init_scale,
                &mut init_rng,
            )?;
            let empty = Batch::new(Matrix::zeros(0, n), Targets::Values(Matrix::zeros(0, n)))?;
            Ok(TaskSetup {
                train: empty,
                val: None,
                loss,
                network: adapt_network(&dense, cfg.optimizer, cfg.init_rank)?,
                states: None,
            })
        }
        Task::TwoClass => {
            let (train, val) = two_class_data(cfg, cfg.dim)?;
            let dense = Network::dense_random(
                &[cfg.dim + 1, cfg.hidden, 2],
                &[Activation::Tanh, Activation::Identity],
                cfg.init_scale,
                &mut init_rng,
            )?;
            Ok(TaskSetup {
                train,
                val: Some(val),
                loss: LossKind::SoftmaxCrossEntropy,
                network: adapt_network(&dense, cfg.optimizer, cfg.init_rank)?,
                states: None,
            })
        }
        Task::CustomCheckpoint => {
            let path = cfg.init_checkpoint.as_ref().ok_or_else(|| {
                Error::config("init_checkpoint", "required for the custom-checkpoint task")
            })?;
            let ck = load_checkpoint(path)?;
            if ck.network.input_dim() < 2 || ck.network.output_dim() < 2 {
                return Err(Error::config(
                    "init_checkpoint",
                    "network needs a bias input and at least two outputs",
                ));
            }
            let (train, val) = two_class_data(cfg, ck.network.input_dim() - 1)?;
            let same_kind = ck.optimizer == cfg.optimizer && ck.states.len() == ck.network.len();
            let (network, states) = if same_kind {
                (ck.network, Some(ck.states))
            } else {
                (
                    adapt_network(&ck.network, cfg.optimizer, cfg.init_rank)?,
                    None,
                )
            };
            Ok(TaskSetup {
                train,
                val: Some(val),
                loss: LossKind::SoftmaxCrossEntropy,
                network,
                states,
            })
        }
    }
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Row of the last step, or the initial state when no step ran.
    pub last: MetricsRow,
    pub network: Network,
    pub states: Vec<LayerState>,
    /// Accuracy on the training split for classification tasks.
    pub train_accuracy: Option<f64>,
    pub out_dir: PathBuf,
}

fn val_metric(task: &TaskSetup, net: &Network) -> Result<f64> {
    match (&task.loss, &task.val) {
        (LossKind::QuadraticMatrixRecovery(a), _) => {
            let w = net.layers()[0].weight()?;
            Ok(w.sub(a)?.frobenius_norm() / a.frobenius_norm().max(f64::MIN_POSITIVE))
        }
        (_, Some(val)) => accuracy(net, val),
        (_, None) => Ok(f64::NAN),
    }
}

fn row_for(
    step: usize,
    loss: f64,
    task: &TaskSetup,
    net: &Network,
    started: Instant,
) -> Result<MetricsRow> {
    let total = net.param_count();
    Ok(MetricsRow {
        step,
        loss,
        val_metric: val_metric(task, net)?,
        ranks: join_ranks(&net.ranks()),
        total_params: total,
        compression_ratio: compression_ratio(total, net.dense_param_count())?,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Thread count from `DLRT_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads_from_env() {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))
}

/// Train as configured, writing `metrics.csv`, `timing.csv`, `config.toml` and
/// `checkpoint/` under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let task = build_task(cfg)?;
    let mut net = task.network.clone();
    let mut states = match &task.states {
        Some(s) => s.clone(),
        None => net
            .layers()
            .iter()
            .map(|l| LayerState::fresh(cfg.optimizer, l))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut writer = MetricsWriter::create(&out)?;
    let started = Instant::now();
    let pool = pool()?;
    let mut batch_rng = stream(cfg.seed, BATCH_STREAM);
    let minibatch = cfg.batch_size > 0 && cfg.batch_size < task.train.len();

    let initial_loss = loss_value(&net, &task.train, &task.loss)?;
    let mut last = row_for(0, initial_loss, &task, &net, started)?;
    let result: Result<()> = (|| {
        for k in 0..cfg.max_steps {
            let batch = if minibatch {
                let mut idx = sample(&mut batch_rng, task.train.len(), cfg.batch_size).into_vec();
                idx.sort_unstable();
                task.train.select(&idx)
            } else {
                task.train.clone()
            };
            let (_, grads) = backward(&net, &batch, &task.loss)?;
            let settings = StepSettings {
                kind: cfg.optimizer,
                lambda: cfg.lambda_at(k),
                gamma: cfg.gamma,
                adam: cfg.adam_hyper(),
                policy: cfg.truncation(),
            };
            let stepped: Vec<(Layer, LayerState)> = pool.install(|| {
                net.layers()
                    .par_iter()
                    .zip(states.par_iter())
                    .zip(grads.into_par_iter())
                    .map(|((layer, state), g)| {
                        // the loss value is not needed by the layer update
                        let mut oracle = FrozenGradient::new(0.0, g);
                        step_layer(layer, state, &mut oracle, &settings)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let (layers, next): (Vec<Layer>, Vec<LayerState>) = stepped.into_iter().unzip();
            net = Network::new(layers)?;
            states = next;
            let loss = loss_value(&net, &task.train, &task.loss)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", k + 1)));
            }
            last = row_for(k + 1, loss, &task, &net, started)?;
            writer.write(&last)?;
        }
        Ok(())
    })();
    writer.flush()?;
    if let Err(e) = result {
        log::error!("run aborted: {e}");
        return Err(e);
    }
    save_checkpoint(
        &net,
        &states,
        cfg.optimizer,
        cfg.max_steps as u64,
        &out.join("checkpoint"),
    )?;
    let train_accuracy = match task.train.targets {
        Targets::Labels(_) => Some(accuracy(&net, &task.train)?),
        Targets::Values(_) => None,
    };
    log::info!(
        "{}: {} steps, loss {:.3e}, ranks [{}]",
        cfg.optimizer,
        cfg.max_steps,
        last.loss,
        last.ranks
    );
    Ok(RunOutcome {
        last,
        network: net,
        states,
        train_accuracy,
        out_dir: out,
    })
}

/// Run `cfg` once per optimizer in `out_dir/<optimizer>/` and join all metrics into
/// `out_dir/compare.csv`.
pub fn compare(
    cfg: &ExperimentConfig,
    optimizers: &[OptimizerKind],
    out_dir: &Path,
) -> Result<Vec<RunOutcome>> {
    if optimizers.is_empty() {
        return Err(Error::config(
            "optimizer",
            "compare needs at least one optimizer",
        ));
    }
    let mut outcomes = Vec::with_capacity(optimizers.len());
    let mut joined = Vec::with_capacity(optimizers.len());
    for &kind in optimizers {
        let run_cfg = ExperimentConfig {
            optimizer: kind,
            out_dir: out_dir.join(kind.name()),
            ..cfg.clone()
        };
        let outcome = run_experiment(&run_cfg)?;
        joined.push((
            kind.name().to_string(),
            read_metrics(&run_cfg.out_dir.join("metrics.csv"))?,
        ));
        outcomes.push(outcome);
    }
    write_joined(&out_dir.join("compare.csv"), "optimizer", &joined)?;
    Ok(outcomes)
}
