//! Flow studies behind `dlrt flow` and the self-check suite behind `dlrt verify`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{
    counterexample_check, flow_vs_discrete, integrate, momentum_rate_identity,
    verify_energy_dissipation, AnalyticLoss, EnergyRecord, EnergyReport, FactorPair, FlowState,
    ScalingProblem,
};
use crate::linalg::{householder_q, Matrix};
use crate::lowrank::{reconstruct, LowRankFactors, TruncationPolicy};
use crate::net::{
    finite_difference_check, gen_matrix_recovery, Activation, Batch, LossKind, Network, Targets,
};
use crate::optim::{
    hb_full_step, lr_adam_augment, lr_adam_step, lr_hb_step, AdamHyper, AdamState, FullHbState,
    HeavyBallState, QuadraticOracle,
};

/// Projected heavy-ball flow on rank-limited matrix recovery, started near the target.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyStudy {
    pub n: usize,
    pub target_rank: usize,
    pub gamma: f64,
    pub h: f64,
    pub horizon: f64,
    /// Size of the random start offset relative to `‖A‖_F`.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for EnergyStudy {
    fn default() -> Self {
        EnergyStudy {
            n: 16,
            target_rank: 2,
            gamma: 0.5,
            h: 1e-2,
            horizon: 50.0,
            perturbation: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnergyStudyResult {
    pub trace: Vec<EnergyRecord>,
    pub report: EnergyReport,
    /// `‖P(W)∇L‖_F` at the end of the run.
    pub terminal_residual: f64,
}

pub fn run_energy_study(study: &EnergyStudy) -> Result<EnergyStudyResult> {
    let a = match gen_matrix_recovery(study.n, study.target_rank, 0.0, study.seed)? {
        LossKind::QuadraticMatrixRecovery(a) => a,
        _ => unreachable!("matrix recovery generator"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(study.seed.wrapping_add(4));
    let p = Matrix::random_normal(study.n, study.n, 1.0, &mut rng);
    let p = p.scale(study.perturbation * a.frobenius_norm() / p.frobenius_norm());
    let w0 = reconstruct(&LowRankFactors::from_dense(&a.add(&p)?, study.target_rank)?)?;
    let state = FlowState::projected(
        w0,
        Matrix::zeros(study.n, study.n),
        study.target_rank,
        study.gamma,
    )?;
    let steps = (study.horizon / study.h).round() as usize;
    let (_, trace) = integrate(&state, &AnalyticLoss::Quadratic(a), study.h, steps)?;
    let report = verify_energy_dissipation(&trace, study.gamma);
    let terminal_residual = trace.last().map_or(f64::NAN, |r| r.residual);
    Ok(EnergyStudyResult {
        trace,
        report,
        terminal_residual,
    })
}

/// Discrete low-rank heavy ball against its limiting flow as the step shrinks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingStudy {
    pub n: usize,
    pub sigma: Vec<f64>,
    pub gamma: f64,
    pub horizon: f64,
    pub lambdas: Vec<f64>,
    /// Condition numbers of the starting coefficient `diag(1, …, 1/cond)`.
    pub conds: Vec<f64>,
    pub seed: u64,
}

impl Default for ScalingStudy {
    fn default() -> Self {
        ScalingStudy {
            n: 8,
            sigma: vec![0.5, 0.25],
            gamma: 1.0,
            horizon: 2.0,
            lambdas: vec![0.1, 0.05, 0.025],
            conds: vec![2.0, 1e6],
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingRow {
    pub cond: f64,
    pub lambda: f64,
    pub error: f64,
}

fn start_coefficient(r: usize, cond: f64) -> Matrix {
    let d: Vec<f64> = (0..r)
        .map(|i| {
            if r == 1 {
                1.0
            } else {
                cond.powf(-(i as f64) / (r - 1) as f64)
            }
        })
        .collect();
    Matrix::from_diag(&d)
}

pub fn run_scaling_study(study: &ScalingStudy) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &cond in &study.conds {
        let s0 = start_coefficient(study.sigma.len(), cond);
        let problem = ScalingProblem::new(study.n, &study.sigma, &s0, study.gamma, study.seed)?;
        for &lambda in &study.lambdas {
            rows.push(ScalingRow {
                cond,
                lambda,
                error: flow_vs_discrete(&problem, lambda, study.horizon)?,
            });
        }
    }
    Ok(rows)
}

/// Ratios of consecutive errors for one condition number.
pub fn halving_ratios(rows: &[ScalingRow], cond: f64) -> Vec<f64> {
    let errs: Vec<f64> = rows
        .iter()
        .filter(|r| r.cond == cond)
        .map(|r| r.error)
        .collect();
    errs.windows(2).map(|w| w[0] / w[1]).collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One named pass/fail line of the self-check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome {
            name,
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_factor_pair(n: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<FactorPair> {
    let coeff = |rng: &mut ChaCha8Rng| -> Result<Matrix> {
        let base = Matrix::from_diag(&(0..r).map(|i| 1.0 + 0.5 * i as f64).collect::<Vec<_>>());
        base.add(&Matrix::random_normal(r, r, 0.1, rng))
    };
    Ok(FactorPair {
        u: householder_q(&Matrix::random_normal(n, r, 1.0, rng)),
        s: coeff(rng)?,
        v: householder_q(&Matrix::random_normal(n, r, 1.0, rng)),
        u_v: householder_q(&Matrix::random_normal(n, r, 1.0, rng)),
        s_v: coeff(rng)?,
        v_v: householder_q(&Matrix::random_normal(n, r, 1.0, rng)),
    })
}

fn check_counterexample() -> Result<(bool, String)> {
    let rep = counterexample_check()?;
    Ok((
        rep.passed,
        format!(
            "naive {:.1e}, projected {:.12}, loss {:.4} -> {:.4}",
            rep.naive_max_abs, rep.projected_norm, rep.loss_before, rep.loss_after
        ),
    ))
}

fn check_energy() -> Result<(bool, String)> {
    let res = run_energy_study(&EnergyStudy::default())?;
    let ok = res.report.passed && res.terminal_residual <= 1e-6;
    Ok((
        ok,
        format!(
            "violation {:?}, identity error {:.1e}, terminal residual {:.1e}",
            res.report.first_violation,
            res.report
                .identity_rel_error
                .unwrap_or(res.report.identity_defect),
            res.terminal_residual
        ),
    ))
}

fn check_momentum_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let pair = random_factor_pair(6, 2, &mut rng)?;
        let a = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let (got, want) = momentum_rate_identity(&pair, &AnalyticLoss::Quadratic(a), 0.3)?;
        worst = worst.max(got.sub(&want)?.frobenius_norm() / want.frobenius_norm().max(1e-300));
    }
    Ok((worst <= 1e-8, format!("max relative mismatch {worst:.1e}")))
}

fn check_full_rank_equivalence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6;
    let target = Matrix::random_normal(n, n, 1.0, &mut rng);
    let w0 = Matrix::random_normal(n, n, 1.0, &mut rng);
    let (gamma, lambda) = (0.1, 0.05);
    let mut full = FullHbState::new(w0.clone(), gamma, lambda);
    let mut f = LowRankFactors::from_dense(&w0, n)?;
    let mut hb = HeavyBallState::zeros(n, gamma, lambda);
    let mut oracle = QuadraticOracle::new(target);
    let policy = TruncationPolicy::fixed(n);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        full = hb_full_step(&full, &mut oracle)?.0;
        let (g, s, _) = lr_hb_step(&f, &hb, &mut oracle, &policy)?;
        f = g;
        hb = s;
        let w = reconstruct(&f)?;
        worst = worst.max(w.sub(&full.w)?.frobenius_norm() / full.w.frobenius_norm());
    }
    Ok((
        worst <= 1e-10,
        format!("max relative deviation {worst:.1e}"),
    ))
}

fn check_gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dense = Network::dense_random(&[5, 7, 6, 3], &[Activation::Tanh; 3], 1.0, &mut rng)?;
    let batch = Batch::new(
        Matrix::random_normal(4, 5, 1.0, &mut rng),
        Targets::Values(Matrix::random_normal(4, 3, 1.0, &mut rng)),
    )?;
    let e_dense = finite_difference_check(&dense, &batch, &LossKind::Mse, 1e-5)?;
    let e_low = finite_difference_check(&dense.factorized(2)?, &batch, &LossKind::Mse, 1e-5)?;
    Ok((
        e_dense <= 1e-5 && e_low <= 1e-5,
        format!("dense {e_dense:.1e}, low-rank {e_low:.1e}"),
    ))
}

fn check_adam_moments() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 8;
    let target = Matrix::random_normal(n, n, 1.0, &mut rng);
    let mut f = LowRankFactors::from_dense(&Matrix::random_normal(n, n, 1.0, &mut rng), 3)?;
    let hyper = AdamHyper {
        lambda: 1e-2,
        ..AdamHyper::default()
    };
    let mut state = AdamState::zeros(3, hyper);
    let mut oracle = QuadraticOracle::new(target);
    let policy = TruncationPolicy::new(0.05, 1, None)?;

    let aug = lr_adam_augment(&f, &state, &mut oracle, true)?;
    let closed = aug.s_bar.zip_map(&aug.g_s, "closed form", |s, g| {
        s - hyper.lambda * g / (g * g + hyper.eps).sqrt()
    })?;
    let first = aug.s_hat.sub(&closed)?.max_abs();

    let mut min_k = f64::INFINITY;
    for _ in 0..100 {
        let (g, s, _) = lr_adam_step(&f, &state, &mut oracle, &policy)?;
        min_k = min_k.min(s.s_k.min_entry());
        f = g;
        state = s;
    }
    Ok((
        min_k >= 0.0 && first <= 1e-12,
        format!("min second moment {min_k:.2e}, first-step deviation {first:.1e}"),
    ))
}

fn check_compression() -> Result<(bool, String)> {
    let c = super::compression_ratio(1025, 10000)?;
    Ok((c == 89.75, format!("compression_ratio(1025, 10000) = {c}")))
}

fn check_scaling() -> Result<(bool, String)> {
    let study = ScalingStudy::default();
    let rows = run_scaling_study(&study)?;
    let ratios: Vec<f64> = study
        .conds
        .iter()
        .flat_map(|&c| halving_ratios(&rows, c))
        .collect();
    let ok = ratios.iter().all(|r| (1.33..=3.0).contains(r));
    Ok((ok, format!("error ratios {ratios:.3?}")))
}

/// Run every self-check; each returns a named pass/fail outcome.
pub fn verify_suite() -> Vec<CheckOutcome> {
    vec![
        outcome("counterexample", check_counterexample()),
        outcome("energy-dissipation", check_energy()),
        outcome("momentum-identity", check_momentum_identity()),
        outcome("full-rank-equivalence", check_full_rank_equivalence()),
        outcome("gradient-check", check_gradients()),
        outcome("adam-moments", check_adam_moments()),
        outcome("compression-ratio", check_compression()),
        outcome("step-size-scaling", check_scaling()),
    ]
}
