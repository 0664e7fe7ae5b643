use std::fs;
use std::path::Path;

use dlrt::harness::{
    build_task, compare, compression_ratio, load_checkpoint, read_metrics, run_experiment,
    save_checkpoint, ExperimentConfig, LayerKind, LayerState, Manifest, OptimizerKind, Task,
    METRICS_HEADER,
};
use dlrt::net::{Layer, Network};
use dlrt::Error;
use tempfile::TempDir;

fn recovery(dir: &Path, optimizer: OptimizerKind) -> ExperimentConfig {
    ExperimentConfig {
        task: Task::MatrixRecovery,
        optimizer,
        dim: 8,
        true_rank: 2,
        init_rank: 4,
        lambda: 1e-2,
        max_steps: 15,
        seed: 5,
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn two_class(dir: &Path, optimizer: OptimizerKind) -> ExperimentConfig {
    ExperimentConfig {
        task: Task::TwoClass,
        optimizer,
        dim: 6,
        hidden: 10,
        n_samples: 60,
        batch_size: 16,
        init_rank: 3,
        r_min: 2,
        r_max: Some(5),
        tau: 0.05,
        lambda: 1e-2,
        max_steps: 12,
        seed: 9,
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn recount(net: &Network) -> (usize, usize) {
    let mut total = 0;
    let mut dense = 0;
    for l in net.layers() {
        let (m, n) = (l.n_out(), l.n_in());
        dense += m * n;
        total += match l {
            Layer::Dense { .. } => m * n,
            Layer::LowRank { f, .. } => (m + n) * f.rank() + f.rank() * f.rank(),
        };
    }
    (total, dense)
}

fn config_field(err: Error) -> String {
    match err {
        Error::Config { field, .. } => field,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_errors_name_the_field() {
    let bad = |s: &str| {
        config_field(
            ExperimentConfig::from_toml_str(s)
                .and_then(|c| c.validate())
                .unwrap_err(),
        )
    };
    assert_eq!(bad("lambda = -1.0"), "lambda");
    assert_eq!(bad("gamma = 2.0"), "gamma");
    assert_eq!(bad("beta2 = 1.0"), "beta2");
    assert_eq!(bad("eps = 0.0"), "eps");
    assert_eq!(bad("tau = 1.5"), "tau");
    assert_eq!(bad("r_min = 3\nr_max = 2"), "r_max");
    assert_eq!(bad("true_rank = 40"), "true_rank");
    assert_eq!(bad("task = \"custom-checkpoint\""), "init_checkpoint");
    assert_eq!(bad("lamda = 0.1"), "lamda");
    assert_eq!(bad("optimizer = \"sgd\""), "optimizer");
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig {
        optimizer: OptimizerKind::LrAdamNaive,
        r_max: Some(7),
        init_checkpoint: Some("a/b".into()),
        ..ExperimentConfig::default()
    };
    assert_eq!(
        ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(),
        cfg
    );
    let partial = ExperimentConfig::from_toml_str("optimizer = \"lr-hb\"\nseed = 4").unwrap();
    assert_eq!(partial.optimizer, OptimizerKind::LrHb);
    assert_eq!(partial.lambda, ExperimentConfig::default().lambda);
    assert_eq!(
        "lora-adam".parse::<OptimizerKind>().unwrap(),
        OptimizerKind::LoraAdam
    );
}

#[test]
fn compression_ratio_examples() {
    assert_eq!(compression_ratio(10000, 10000).unwrap(), 0.0);
    assert_eq!(compression_ratio(1025, 10000).unwrap(), 89.75);
    assert_eq!(compression_ratio(150, 100).unwrap(), -50.0);
    assert!(matches!(compression_ratio(1, 0), Err(Error::Argument(_))));
}

#[test]
fn same_seed_gives_identical_metrics() {
    for kind in OptimizerKind::ALL {
        let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        run_experiment(&two_class(a.path(), kind)).unwrap();
        run_experiment(&two_class(b.path(), kind)).unwrap();
        let ma = fs::read(a.path().join("metrics.csv")).unwrap();
        let mb = fs::read(b.path().join("metrics.csv")).unwrap();
        assert_eq!(ma, mb, "{kind}");
        let timing = fs::read_to_string(a.path().join("timing.csv")).unwrap();
        assert_eq!(timing.lines().count(), 13);
    }
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run_experiment(&two_class(a.path(), OptimizerKind::LrAdam)).unwrap();
    let other = ExperimentConfig {
        seed: 10,
        ..two_class(b.path(), OptimizerKind::LrAdam)
    };
    run_experiment(&other).unwrap();
    assert_ne!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(b.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn zero_steps_writes_header_and_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        max_steps: 0,
        ..recovery(dir.path(), OptimizerKind::LrAdam)
    };
    let out = run_experiment(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.trim_end(), METRICS_HEADER.join(","));
    let ck = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(ck.network, build_task(&cfg).unwrap().network);
    assert_eq!(ck.network, out.network);
    assert_eq!(ck.step, 0);
    assert!(ck.warnings.is_empty());
    let saved = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for kind in OptimizerKind::ALL {
        let dir = TempDir::new().unwrap();
        let out = run_experiment(&two_class(dir.path(), kind)).unwrap();
        let ck = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert!(ck.warnings.is_empty(), "{kind}: {:?}", ck.warnings);
        assert_eq!(ck.network, out.network, "{kind}");
        assert_eq!(ck.states, out.states, "{kind}");
        assert_eq!(ck.optimizer, kind);
        assert_eq!(ck.step, 12);
    }
}

#[test]
fn manifest_lists_layers_and_optimizer() {
    let dir = TempDir::new().unwrap();
    let out = run_experiment(&two_class(dir.path(), OptimizerKind::LrHb)).unwrap();
    let text = fs::read_to_string(dir.path().join("checkpoint/manifest.json")).unwrap();
    let m: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.format, "dlrt-checkpoint");
    assert_eq!(m.optimizer, OptimizerKind::LrHb);
    assert_eq!(m.layers.len(), 2);
    for (entry, layer) in m.layers.iter().zip(out.network.layers()) {
        assert_eq!(entry.kind, LayerKind::LowRank);
        assert_eq!((entry.n_out, entry.n_in), (layer.n_out(), layer.n_in()));
        assert_eq!(entry.rank, layer.rank());
    }
    // arrays tile the blob without gaps
    let mut offset = 0;
    for a in &m.arrays {
        assert_eq!(a.byte_offset, offset);
        offset += 8 * (a.rows * a.cols) as u64;
    }
    assert_eq!(
        fs::metadata(dir.path().join("checkpoint/blob.bin"))
            .unwrap()
            .len(),
        offset
    );
    assert!(m.arrays.iter().any(|a| a.name == "layer0.u"));
    assert!(m.arrays.iter().any(|a| a.name == "state1.s_v"));
}

fn perturb_u(ck: &Path, delta: f64) {
    let m: Manifest =
        serde_json::from_str(&fs::read_to_string(ck.join("manifest.json")).unwrap()).unwrap();
    let entry = m.arrays.iter().find(|a| a.name == "layer0.u").unwrap();
    let mut blob = fs::read(ck.join("blob.bin")).unwrap();
    let at = entry.byte_offset as usize;
    let x = f64::from_le_bytes(blob[at..at + 8].try_into().unwrap());
    blob[at..at + 8].copy_from_slice(&(x + delta).to_le_bytes());
    fs::write(ck.join("blob.bin"), blob).unwrap();
}

#[test]
fn load_repairs_small_defects_and_rejects_large_ones() {
    let dir = TempDir::new().unwrap();
    run_experiment(&recovery(dir.path(), OptimizerKind::LrAdam)).unwrap();
    let ck = dir.path().join("checkpoint");
    let clean = load_checkpoint(&ck).unwrap();
    let w0 = clean.network.layers()[0].weight().unwrap();

    perturb_u(&ck, 1e-6);
    let repaired = load_checkpoint(&ck).unwrap();
    assert_eq!(repaired.warnings.len(), 1);
    let Layer::LowRank { f, .. } = &repaired.network.layers()[0] else {
        panic!("expected a low-rank layer")
    };
    assert!(f.orthonormality_defect() <= 1e-12);
    let drift = repaired.network.layers()[0]
        .weight()
        .unwrap()
        .sub(&w0)
        .unwrap()
        .frobenius_norm();
    assert!(drift <= 1e-5, "{drift}");

    perturb_u(&ck, 0.1);
    assert!(matches!(load_checkpoint(&ck), Err(Error::Integrity(_))));
}

#[test]
fn damaged_checkpoints_fail_cleanly() {
    let dir = TempDir::new().unwrap();
    run_experiment(&recovery(dir.path(), OptimizerKind::Adam)).unwrap();
    let ck = dir.path().join("checkpoint");
    let blob = fs::read(ck.join("blob.bin")).unwrap();
    fs::write(ck.join("blob.bin"), &blob[..blob.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(Error::Integrity(_))));
    fs::write(ck.join("blob.bin"), &blob).unwrap();
    assert!(load_checkpoint(&ck).is_ok());

    let manifest = fs::read_to_string(ck.join("manifest.json")).unwrap();
    let extra = manifest.replacen("\"step\"", "\"epoch\": 1, \"step\"", 1);
    fs::write(ck.join("manifest.json"), extra).unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(Error::Format(_))));
    let renamed = manifest.replace("layer0.w", "layer0.x");
    fs::write(ck.join("manifest.json"), renamed).unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(Error::Format(_))));
    fs::write(ck.join("manifest.json"), "{").unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(Error::Format(_))));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn save_rejects_state_count_mismatch() {
    let dir = TempDir::new().unwrap();
    let out = run_experiment(&two_class(dir.path(), OptimizerKind::Hb)).unwrap();
    let r = save_checkpoint(
        &out.network,
        &out.states[..1],
        OptimizerKind::Hb,
        0,
        &dir.path().join("x"),
    );
    assert!(matches!(r, Err(Error::Argument(_))));
}

#[test]
fn reported_totals_match_recount_and_ranks_stay_in_bounds() {
    for kind in OptimizerKind::ALL {
        let dir = TempDir::new().unwrap();
        let cfg = two_class(dir.path(), kind);
        let out = run_experiment(&cfg).unwrap();
        let (total, dense) = recount(&out.network);
        assert_eq!(out.last.total_params, total, "{kind}");
        let expect = 100.0 * (dense as f64 - total as f64) / dense as f64;
        assert!(
            (out.last.compression_ratio - expect).abs() <= 1e-12,
            "{kind}"
        );

        let dims: Vec<usize> = out
            .network
            .layers()
            .iter()
            .map(|l| l.n_out().min(l.n_in()))
            .collect();
        let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), cfg.max_steps);
        for row in &rows {
            let ranks = row.rank_list();
            if !kind.is_low_rank() {
                assert!(ranks.is_empty());
                continue;
            }
            assert_eq!(ranks.len(), dims.len());
            for (&r, &d) in ranks.iter().zip(&dims) {
                assert!(
                    r >= cfg.r_min.min(d) && r <= cfg.r_max.unwrap().min(d),
                    "{kind}: {ranks:?}"
                );
            }
            assert!(row.compression_ratio < 100.0);
        }
    }
}

#[test]
fn compare_joins_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = recovery(&dir.path().join("ignored"), OptimizerKind::Hb);
    let kinds = [
        OptimizerKind::Hb,
        OptimizerKind::LrHb,
        OptimizerKind::LrAdam,
    ];
    let outs = compare(&cfg, &kinds, dir.path()).unwrap();
    assert_eq!(outs.len(), 3);
    let text = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        format!("optimizer,{}", METRICS_HEADER.join(","))
    );
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 3 * cfg.max_steps);
    for kind in kinds {
        let n = body
            .iter()
            .filter(|l| l.starts_with(&format!("{},", kind.name())))
            .count();
        assert_eq!(n, cfg.max_steps);
        assert!(dir.path().join(kind.name()).join("metrics.csv").exists());
    }
    assert!(matches!(
        compare(&cfg, &[], dir.path()),
        Err(Error::Config { .. })
    ));
}

#[test]
fn divergence_aborts_and_keeps_partial_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        lambda: 100.0,
        max_steps: 500,
        ..recovery(dir.path(), OptimizerKind::Hb)
    };
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err:?}");
    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert!(!rows.is_empty() && rows.len() < 500);
    assert!(!dir.path().join("checkpoint").exists());
}

#[test]
fn custom_checkpoint_task_resumes_from_saved_state() {
    let dir = TempDir::new().unwrap();
    let first = run_experiment(&two_class(&dir.path().join("a"), OptimizerKind::LrAdam)).unwrap();
    let resume = ExperimentConfig {
        task: Task::CustomCheckpoint,
        init_checkpoint: Some(dir.path().join("a/checkpoint")),
        max_steps: 0,
        ..two_class(&dir.path().join("b"), OptimizerKind::LrAdam)
    };
    let task = build_task(&resume).unwrap();
    assert_eq!(task.network, first.network);
    assert_eq!(task.states.as_deref(), Some(&first.states[..]));
    let again = run_experiment(&resume).unwrap();
    assert_eq!(again.last.loss, first.last.loss);

    // a different optimizer starts from the weights with fresh moments
    let dense = ExperimentConfig {
        optimizer: OptimizerKind::Adam,
        ..resume.clone()
    };
    let task = build_task(&dense).unwrap();
    assert!(task.states.is_none());
    assert!(task.network.layers().iter().all(|l| l.rank().is_none()));
    let out = run_experiment(&ExperimentConfig {
        max_steps: 3,
        out_dir: dir.path().join("c"),
        ..dense
    })
    .unwrap();
    assert!(matches!(out.states[0], LayerState::Adam { n: 3, .. }));
}
