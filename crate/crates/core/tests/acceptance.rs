//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use dlrt::flow::{counterexample_check, momentum_rate_identity, AnalyticLoss, FactorPair};
use dlrt::harness::{
    compression_ratio, halving_ratios, load_checkpoint, read_metrics, run_energy_study,
    run_experiment, run_scaling_study, save_checkpoint, EnergyStudy, ExperimentConfig, LrSchedule,
    OptimizerKind, RunOutcome, ScalingStudy, Task,
};
use dlrt::linalg::{householder_q, Matrix};
use dlrt::lowrank::{factor_gradients, reconstruct, LowRankFactors, TruncationPolicy};
use dlrt::net::{finite_difference_check, Activation, Batch, Layer, LossKind, Network, Targets};
use dlrt::optim::{
    hb_full_step, lr_adam_augment, lr_adam_step, lr_hb_step, AdamHyper, AdamState, FullHbState,
    HeavyBallState, QuadraticOracle,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Check = Result<String, String>;
type Criterion = (&'static str, u64, Box<dyn Fn() -> Check>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// Total and dense-baseline parameter counts, counted from the layers.
fn recount(net: &Network) -> (usize, usize) {
    net.layers().iter().fold((0, 0), |(total, dense), l| {
        let (m, n) = (l.n_out(), l.n_in());
        let own = match l {
            Layer::Dense { .. } => m * n,
            Layer::LowRank { f, .. } => (m + n) * f.rank() + f.rank() * f.rank(),
        };
        (total + own, dense + m * n)
    })
}

fn check_totals(out: &RunOutcome) -> Result<(), String> {
    let (total, dense) = recount(&out.network);
    let expect = 100.0 * (dense as f64 - total as f64) / dense as f64;
    ensure(
        out.last.total_params == total && (out.last.compression_ratio - expect).abs() <= 1e-12,
        || {
            format!(
                "reported {} params / {:.4}%, recount {total} / {expect:.4}%",
                out.last.total_params, out.last.compression_ratio
            )
        },
    )
}

fn counterexample() -> Check {
    let r = counterexample_check().map_err(|e| e.to_string())?;
    ensure(r.naive_max_abs <= 1e-14, || {
        format!("naive direction {:e}", r.naive_max_abs)
    })?;
    ensure((r.projected_norm - 1.0).abs() <= 1e-12, || {
        format!("‖P∇L‖ = {}", r.projected_norm)
    })?;
    ensure(r.loss_after < r.loss_before, || {
        format!("loss {} -> {}", r.loss_before, r.loss_after)
    })?;
    Ok(format!(
        "naive {:.1e}, ‖P∇L‖ {:.12}, loss {:.4} -> {:.4}",
        r.naive_max_abs, r.projected_norm, r.loss_before, r.loss_after
    ))
}

fn energy() -> Check {
    let study = EnergyStudy::default();
    ensure(
        study.n == 16
            && study.target_rank == 2
            && study.gamma == 0.5
            && study.h == 1e-2
            && study.horizon == 50.0,
        || "study defaults drifted".into(),
    )?;
    let res = run_energy_study(&study).map_err(|e| e.to_string())?;
    let tr = &res.trace;
    ensure(tr.len() == 5001, || format!("{} records", tr.len()))?;
    // recomputed from the raw trace
    if let Some(i) = tr
        .windows(2)
        .position(|w| w[1].energy > w[0].energy + 1e-10)
    {
        return Err(format!("energy rises at record {}", i + 1));
    }
    let de = tr.last().unwrap().energy - tr[0].energy;
    let diss: f64 = tr
        .windows(2)
        .map(|w| 0.5 * (w[1].t - w[0].t) * (w[0].mom_norm_sq + w[1].mom_norm_sq))
        .sum();
    let identity = (de + study.gamma * diss).abs() / de.abs();
    ensure(identity <= 1e-4, || format!("identity error {identity:e}"))?;
    let residual = tr.last().unwrap().residual;
    ensure(residual <= 1e-6, || {
        format!("terminal residual {residual:e}")
    })?;
    ensure(res.report.passed, || format!("{:?}", res.report))?;
    Ok(format!(
        "ΔE {de:.4e}, identity error {identity:.2e}, terminal residual {residual:.2e}"
    ))
}

fn projector(u: &Matrix, v: &Matrix, z: &Matrix) -> Matrix {
    let uu = u.matmul_t(u).unwrap();
    let vv = v.matmul_t(v).unwrap();
    let a = uu.matmul(z).unwrap();
    let b = z.matmul(&vv).unwrap();
    let c = uu.matmul(z).unwrap().matmul(&vv).unwrap();
    a.add(&b).unwrap().sub(&c).unwrap()
}

fn momentum_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let gamma = 0.3;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let coeff = |rng: &mut ChaCha8Rng| {
            Matrix::identity(3)
                .scale(2.0)
                .add(&Matrix::random_normal(3, 3, 0.3, rng))
                .unwrap()
        };
        let pair = FactorPair {
            u: householder_q(&Matrix::random_normal(7, 3, 1.0, &mut rng)),
            s: coeff(&mut rng),
            v: householder_q(&Matrix::random_normal(6, 3, 1.0, &mut rng)),
            u_v: householder_q(&Matrix::random_normal(7, 3, 1.0, &mut rng)),
            s_v: coeff(&mut rng),
            v_v: householder_q(&Matrix::random_normal(6, 3, 1.0, &mut rng)),
        };
        let a = Matrix::random_normal(7, 6, 1.0, &mut rng);
        let (assembled, _) =
            momentum_rate_identity(&pair, &AnalyticLoss::Quadratic(a.clone()), gamma)
                .map_err(|e| e.to_string())?;
        let grad = pair.weight().unwrap().sub(&a).unwrap();
        let expect = pair
            .momentum()
            .unwrap()
            .scale(-gamma)
            .sub(&projector(&pair.u_v, &pair.v_v, &grad))
            .unwrap();
        worst = worst.max(rel(&assembled, &expect));
    }
    ensure(worst <= 1e-8, || format!("max relative error {worst:e}"))?;
    Ok(format!("100 states, max relative error {worst:.2e}"))
}

fn scaling() -> Check {
    let study = ScalingStudy::default();
    let rows = run_scaling_study(&study).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for &c in &study.conds {
        let ratios = halving_ratios(&rows, c);
        ensure(
            ratios.len() == 2 && ratios.iter().all(|r| (1.33..=3.0).contains(r)),
            || format!("cond {c:e}: ratios {ratios:?}"),
        )?;
        parts.push(format!(
            "cond {c:.0e} ratios {:.3}/{:.3}",
            ratios[0], ratios[1]
        ));
    }
    let err = |cond: f64, lambda: f64| {
        rows.iter()
            .find(|r| r.cond == cond && r.lambda == lambda)
            .map(|r| r.error)
            .unwrap()
    };
    let (lo, hi) = (study.conds[0], *study.conds.last().unwrap());
    ensure(hi >= 1e6, || "conditioning sweep too narrow".into())?;
    let mut spread: f64 = 1.0;
    for &l in &study.lambdas {
        let (a, b) = (err(lo, l), err(hi, l));
        spread = spread.max(a.max(b) / a.min(b));
    }
    ensure(spread < 10.0, || {
        format!("constants change by {spread:.2}x")
    })?;
    parts.push(format!("constant spread {spread:.2}x"));
    Ok(parts.join(", "))
}

fn full_rank_equivalence() -> Check {
    let mut worst: f64 = 0.0;
    for (seed, n) in [(1u64, 5usize), (2, 10), (3, 16)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Matrix::random_normal(n, n, 1.0, &mut rng);
        let w0 = Matrix::random_normal(n, n, 1.0, &mut rng);
        let (gamma, lambda) = (0.1, 0.05);
        let mut full = FullHbState::new(w0.clone(), gamma, lambda);
        let mut f = LowRankFactors::from_dense(&w0, n).map_err(|e| e.to_string())?;
        let mut st = HeavyBallState::zeros(n, gamma, lambda);
        let policy = TruncationPolicy::new(0.0, 1, Some(n)).unwrap();
        let mut oracle = QuadraticOracle::new(target);
        for _ in 0..50 {
            full = hb_full_step(&full, &mut oracle)
                .map_err(|e| e.to_string())?
                .0;
            let next = lr_hb_step(&f, &st, &mut oracle, &policy).map_err(|e| e.to_string())?;
            f = next.0;
            st = next.1;
            let mom = f.u.matmul(&st.s_v).unwrap().matmul_t(&f.v).unwrap();
            worst = worst
                .max(rel(&reconstruct(&f).unwrap(), &full.w))
                .max(rel(&mom, &full.v));
        }
    }
    ensure(worst <= 1e-10, || {
        format!("max relative deviation {worst:e}")
    })?;
    Ok(format!(
        "n = 5, 10, 16 over 50 steps, max relative deviation {worst:.2e}"
    ))
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dense =
        Network::dense_random(&[6, 8, 7, 4], &[Activation::Tanh; 3], 1.5, &mut rng).unwrap();
    let low = dense.factorized(3).unwrap();
    let batch = Batch::new(
        Matrix::random_normal(10, 6, 1.0, &mut rng),
        Targets::Values(Matrix::random_normal(10, 4, 1.0, &mut rng)),
    )
    .unwrap();
    let e_dense =
        finite_difference_check(&dense, &batch, &LossKind::Mse, 1e-5).map_err(|e| e.to_string())?;
    let e_low =
        finite_difference_check(&low, &batch, &LossKind::Mse, 1e-5).map_err(|e| e.to_string())?;
    ensure(e_dense <= 1e-5 && e_low <= 1e-5, || {
        format!("dense {e_dense:e}, low-rank {e_low:e}")
    })?;

    // factor gradients against central differences of ½‖USVᵀ − A‖²
    let f = LowRankFactors::new(
        householder_q(&Matrix::random_normal(7, 3, 1.0, &mut rng)),
        Matrix::random_normal(3, 3, 1.0, &mut rng),
        householder_q(&Matrix::random_normal(5, 3, 1.0, &mut rng)),
    )
    .unwrap();
    let a = Matrix::random_normal(7, 5, 1.0, &mut rng);
    let loss = |g: &LowRankFactors| {
        let d =
            g.u.matmul(&g.s)
                .unwrap()
                .matmul_t(&g.v)
                .unwrap()
                .sub(&a)
                .unwrap()
                .frobenius_norm();
        0.5 * d * d
    };
    let (gu, gv, gs) = factor_gradients(&f, &reconstruct(&f).unwrap().sub(&a).unwrap()).unwrap();
    let h = 1e-5;
    let mut e_factor: f64 = 0.0;
    for (block, analytic) in [(0, &gu), (1, &gs), (2, &gv)] {
        let floor = 1e-3 * analytic.max_abs();
        for idx in 0..analytic.as_slice().len() {
            let bump = |d: f64| {
                let mut g = f.clone();
                let m = match block {
                    0 => &mut g.u,
                    1 => &mut g.s,
                    _ => &mut g.v,
                };
                m.as_mut_slice()[idx] += d;
                loss(&g)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = analytic.as_slice()[idx];
            e_factor = e_factor.max((fd - an).abs() / an.abs().max(floor));
        }
    }
    ensure(e_factor <= 1e-5, || {
        format!("factor gradients {e_factor:e}")
    })?;
    Ok(format!(
        "dense {e_dense:.1e}, low-rank {e_low:.1e}, factor gradients {e_factor:.1e}"
    ))
}

fn rank_adaptation(dir: &Path) -> Check {
    let cfg = ExperimentConfig {
        task: Task::MatrixRecovery,
        optimizer: OptimizerKind::LrAdam,
        dim: 32,
        true_rank: 5,
        noise: 0.0,
        init_rank: 20,
        tau: 0.05,
        r_min: 1,
        r_max: None,
        lambda: 3e-3,
        eps: 1e-3,
        init_scale: 1e-3,
        lr_schedule: LrSchedule::Constant,
        max_steps: 2000,
        seed: 0,
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    check_totals(&out)?;
    let rank = out.network.layers()[0].rank();
    ensure(rank == Some(5), || format!("terminal rank {rank:?}"))?;
    ensure(out.last.loss <= 1e-6, || {
        format!("terminal loss {:e}", out.last.loss)
    })?;
    let rows = read_metrics(&dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let first = rows
        .iter()
        .position(|r| r.ranks == "5")
        .unwrap_or(rows.len());
    Ok(format!(
        "rank 20 -> 5 (first at step {}), loss {:.2e}, compression {:.2}%",
        first + 1,
        out.last.loss,
        out.last.compression_ratio
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn projection_ordering(dir: &Path) -> Check {
    let mut proj = Vec::new();
    let mut naive = Vec::new();
    let mut min_acc: f64 = 1.0;
    for seed in 0..5u64 {
        for kind in [OptimizerKind::LrAdam, OptimizerKind::LrAdamNaive] {
            let cfg = ExperimentConfig {
                task: Task::TwoClass,
                optimizer: kind,
                dim: 32,
                hidden: 32,
                n_samples: 400,
                batch_size: 0,
                init_rank: 4,
                tau: 0.0,
                r_min: 4,
                r_max: Some(4),
                lambda: 1e-2,
                eps: 1e-6,
                max_steps: 600,
                seed,
                out_dir: dir.join(format!("{kind}-{seed}")),
                ..ExperimentConfig::default()
            };
            let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
            check_totals(&out)?;
            if kind == OptimizerKind::LrAdam {
                proj.push(out.last.loss);
                min_acc = min_acc.min(out.train_accuracy.unwrap());
            } else {
                naive.push(out.last.loss);
            }
        }
    }
    let (mp, mn) = (median(proj), median(naive));
    ensure(mp <= mn, || {
        format!("median loss lr-adam {mp:e} > lr-adam-naive {mn:e}")
    })?;
    ensure(min_acc >= 0.95, || {
        format!("lr-adam train accuracy {min_acc}")
    })?;
    Ok(format!(
        "median train loss lr-adam {mp:.2e} <= lr-adam-naive {mn:.2e}, lr-adam min accuracy {min_acc:.3}"
    ))
}

fn second_moment() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (m, n, r) = (12, 10, 3);
    let f = LowRankFactors::new(
        householder_q(&Matrix::random_normal(m, r, 1.0, &mut rng)),
        Matrix::random_normal(r, r, 1.0, &mut rng),
        householder_q(&Matrix::random_normal(n, r, 1.0, &mut rng)),
    )
    .unwrap();
    let target = Matrix::random_normal(m, n, 1.0, &mut rng);
    let hyper = AdamHyper {
        lambda: 1e-2,
        ..AdamHyper::default()
    };
    let fresh = AdamState::zeros(r, hyper);
    let mut oracle = QuadraticOracle::new(target.clone());
    let aug = lr_adam_augment(&f, &fresh, &mut oracle, true).map_err(|e| e.to_string())?;
    // G_S recomputed from the augmented frame
    let w_bar = aug
        .u_hat
        .matmul(&aug.s_bar)
        .unwrap()
        .matmul_t(&aug.v_hat)
        .unwrap();
    let g_s = aug
        .u_hat
        .t_matmul(&w_bar.sub(&target).unwrap())
        .unwrap()
        .matmul(&aug.v_hat)
        .unwrap();
    ensure(g_s.sub(&aug.g_s).unwrap().max_abs() <= 1e-12, || {
        "G_S mismatch".into()
    })?;
    let closed = g_s.map(|g| -hyper.lambda * g / (g * g + hyper.eps).sqrt());
    let step = aug.s_hat.sub(&aug.s_bar).unwrap();
    let first = step.sub(&closed).unwrap().max_abs();
    ensure(first <= 1e-12, || {
        format!("first step deviates by {first:e}")
    })?;

    let policy = TruncationPolicy::new(0.05, 1, None).unwrap();
    let (mut g, mut st) = (f, fresh);
    let mut min_sk = f64::INFINITY;
    for k in 1..=100u64 {
        let next = lr_adam_step(&g, &st, &mut oracle, &policy).map_err(|e| e.to_string())?;
        g = next.0;
        st = next.1;
        ensure(st.n == k, || format!("counter {} at step {k}", st.n))?;
        min_sk = min_sk.min(
            st.s_k
                .as_slice()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min),
        );
    }
    ensure(min_sk >= 0.0, || format!("min S_K entry {min_sk:e}"))?;
    Ok(format!(
        "first-step deviation {first:.1e}, min S_K over 100 steps {min_sk:.2e}"
    ))
}

fn compression() -> Check {
    let c = compression_ratio(1025, 10000).map_err(|e| e.to_string())?;
    ensure(c == 89.75, || {
        format!("compression_ratio(1025, 10000) = {c}")
    })?;
    // square 100 x 100 layer at rank 5
    let (lr, dense) = (2 * 100 * 5 + 5 * 5, 100 * 100);
    ensure((lr, dense) == (1025, 10000), || {
        "parameter arithmetic".into()
    })?;
    Ok("compression_ratio(1025, 10000) = 89.75; run totals recounted".into())
}

fn determinism(dir: &Path) -> Check {
    let cfg = |out: &str| ExperimentConfig {
        task: Task::TwoClass,
        optimizer: OptimizerKind::LrAdam,
        dim: 8,
        hidden: 12,
        n_samples: 80,
        batch_size: 20,
        init_rank: 4,
        tau: 0.05,
        max_steps: 50,
        seed: 21,
        out_dir: dir.join(out),
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&cfg("a")).map_err(|e| e.to_string())?;
    run_experiment(&cfg("b")).map_err(|e| e.to_string())?;
    check_totals(&a)?;
    let ma = std::fs::read(dir.join("a/metrics.csv")).unwrap();
    let mb = std::fs::read(dir.join("b/metrics.csv")).unwrap();
    ensure(ma == mb, || "metrics differ between identical runs".into())?;

    let ck = load_checkpoint(&dir.join("a/checkpoint")).map_err(|e| e.to_string())?;
    ensure(
        ck.network == a.network && ck.states == a.states && ck.warnings.is_empty(),
        || "checkpoint does not reload bit-exactly".into(),
    )?;
    save_checkpoint(
        &ck.network,
        &ck.states,
        ck.optimizer,
        ck.step,
        &dir.join("resaved"),
    )
    .map_err(|e| e.to_string())?;
    for f in ["blob.bin", "manifest.json"] {
        let x = std::fs::read(dir.join("a/checkpoint").join(f)).unwrap();
        let y = std::fs::read(dir.join("resaved").join(f)).unwrap();
        ensure(x == y, || format!("re-saved {f} differs"))?;
    }
    Ok(format!(
        "{} metric bytes identical, checkpoint round-trip bit-exact",
        ma.len()
    ))
}

fn main() {
    let tmp = TempDir::new().expect("temp dir");
    let root = tmp.path().to_path_buf();
    let criteria: Vec<Criterion> = vec![
        ("1 counterexample", 1, Box::new(counterexample)),
        ("2 energy dissipation", 10, Box::new(energy)),
        ("3 momentum identity", 5, Box::new(momentum_identity)),
        ("4 step-size scaling", 60, Box::new(scaling)),
        (
            "5 full-rank equivalence",
            10,
            Box::new(full_rank_equivalence),
        ),
        ("6 gradient correctness", 30, Box::new(gradients)),
        (
            "7 rank adaptation",
            60,
            Box::new({
                let d = root.join("ac7");
                move || rank_adaptation(&d)
            }),
        ),
        (
            "8 projection ordering",
            300,
            Box::new({
                let d = root.join("ac8");
                move || projection_ordering(&d)
            }),
        ),
        ("9 second moment", 5, Box::new(second_moment)),
        ("10 compression accounting", 1, Box::new(compression)),
        (
            "11 determinism and persistence",
            30,
            Box::new({
                let d = root.join("ac11");
                move || determinism(&d)
            }),
        ),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (name, budget, run) in &criteria {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let result = result.and_then(|msg| {
            if took <= Duration::from_secs(*budget) {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {took:.1?}, budget {budget} s"))
            }
        });
        let line = match &result {
            Ok(msg) => format!("PASS  {name}: {msg} [{took:.2?}]"),
            Err(msg) => {
                failed += 1;
                format!("FAIL  {name}: {msg} [{took:.2?}]")
            }
        };
        writeln!(out, "{line}").unwrap();
    }
    writeln!(
        out,
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    )
    .unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
