use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, LossKind, Targets};
use crate::error::{Error, Result};
use crate::linalg::{householder_q, Matrix};

/// `½‖W − A‖²` with `A = X diag(2⁻¹, …, 2⁻ʳ) Yᵀ` plus optional Gaussian noise.
pub fn gen_matrix_recovery(n: usize, true_rank: usize, noise: f64, seed: u64) -> Result<LossKind> {
    if true_rank == 0 || true_rank > n {
        return Err(Error::Argument(format!(
            "true_rank {true_rank} must lie in 1..={n}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Argument(format!(
            "noise {noise} must be finite and >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = householder_q(&Matrix::random_normal(n, true_rank, 1.0, &mut rng));
    let y = householder_q(&Matrix::random_normal(n, true_rank, 1.0, &mut rng));
    let sigma: Vec<f64> = (1..=true_rank).map(|i| 0.5f64.powi(i as i32)).collect();
    let mut a = x.matmul(&Matrix::from_diag(&sigma))?.matmul_t(&y)?;
    if noise > 0.0 {
        a.axpy(1.0, &Matrix::random_normal(n, n, noise, &mut rng))?;
    }
    Ok(LossKind::QuadraticMatrixRecovery(a))
}

/// Two Gaussian blobs `±μ + N(0, I)` with `‖μ‖ = 3`; labels alternate 0, 1, 0, 1, ….
pub fn gen_two_class(n_samples: usize, dim: usize, seed: u64) -> Result<Batch> {
    if !n_samples.is_multiple_of(2) || n_samples == 0 {
        return Err(Error::Argument(format!(
            "n_samples {n_samples} must be positive and even"
        )));
    }
    if dim == 0 {
        return Err(Error::Argument("dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = Matrix::random_normal(1, dim, 1.0, &mut rng);
    let mu = dir.scale(3.0 / dir.frobenius_norm());
    let noise = Matrix::random_normal(n_samples, dim, 1.0, &mut rng);
    let labels: Vec<usize> = (0..n_samples).map(|i| i % 2).collect();
    let inputs = Matrix::from_fn(n_samples, dim, |i, j| {
        let sign = if labels[i] == 1 { 1.0 } else { -1.0 };
        sign * mu[(0, j)] + noise[(i, j)]
    });
    Batch::new(inputs, Targets::Labels(labels))
}

/// Inputs with a trailing column of ones.
pub fn append_bias_column(inputs: &Matrix) -> Matrix {
    let c = inputs.cols();
    Matrix::from_fn(inputs.rows(), c + 1, |i, j| {
        if j < c {
            inputs[(i, j)]
        } else {
            1.0
        }
    })
}

/// Leading `⌊train_fraction · n⌋` rows for training, the rest for validation.
pub fn split(batch: &Batch, train_fraction: f64) -> Result<(Batch, Batch)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Argument(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let n = batch.len();
    let cut = ((n as f64) * train_fraction).floor() as usize;
    let train: Vec<usize> = (0..cut).collect();
    let val: Vec<usize> = (cut..n).collect();
    Ok((batch.select(&train), batch.select(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;

    #[test]
    fn rank_one_target_is_exact() {
        let LossKind::QuadraticMatrixRecovery(a) = gen_matrix_recovery(4, 1, 0.0, 3).unwrap()
        else {
            unreachable!()
        };
        let s = svd(&a).unwrap().sigma;
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!(s[1..].iter().all(|&x| x < 1e-15));
    }

    #[test]
    fn recovery_is_seeded() {
        assert_eq!(
            gen_matrix_recovery(6, 3, 0.1, 9).unwrap(),
            gen_matrix_recovery(6, 3, 0.1, 9).unwrap()
        );
        assert_ne!(
            gen_matrix_recovery(6, 3, 0.1, 9).unwrap(),
            gen_matrix_recovery(6, 3, 0.1, 10).unwrap()
        );
    }

    #[test]
    fn balanced_classes() {
        let b = gen_two_class(40, 5, 1).unwrap();
        let Targets::Labels(l) = &b.targets else {
            unreachable!()
        };
        assert_eq!(l.iter().filter(|&&c| c == 1).count(), 20);
        assert_eq!(b, gen_two_class(40, 5, 1).unwrap());
        assert!(gen_two_class(7, 5, 1).is_err());
    }

    #[test]
    fn split_is_prefix() {
        let b = gen_two_class(10, 2, 0).unwrap();
        let (tr, va) = split(&b, 0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        assert_eq!(va.inputs.row(0), b.inputs.row(8));
    }

    #[test]
    fn bias_column() {
        let m = append_bias_column(&Matrix::from_rows(&[&[2.0], &[3.0]]));
        assert_eq!(m, Matrix::from_rows(&[&[2.0, 1.0], &[3.0, 1.0]]));
    }
}
