//! Symmetric in-batch InfoNCE.

use crate::linalg::Matrix;

use super::TrainError;

/// `ln Σ exp(x)` computed stably.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric contrastive loss over a square similarity matrix whose diagonal
/// holds the positive pairs. Returns the loss and `dLoss/dSim`.
pub fn contrastive_loss(sim: &Matrix, temperature: f64) -> Result<(f64, Matrix), TrainError> {
    if sim.rows() != sim.cols() {
        return Err(TrainError::NonSquare { rows: sim.rows(), cols: sim.cols() });
    }
    contrastive_loss_with_negatives(sim, temperature)
}

/// As [`contrastive_loss`], but `sim` may carry extra columns beyond the
/// first `N` (hard negatives). Extra columns join every row's softmax and
/// have no column term of their own.
pub fn contrastive_loss_with_negatives(sim: &Matrix, temperature: f64) -> Result<(f64, Matrix), TrainError> {
    let n = sim.rows();
    let m = sim.cols();
    if m < n {
        return Err(TrainError::NonSquare { rows: n, cols: m });
    }
    if n < 2 {
        return Err(TrainError::BatchTooSmall(n));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TrainError::NonPositiveTemperature(temperature));
    }
    let inv_t = 1.0 / temperature;
    let logit = |i: usize, j: usize| sim.get(i, j) * inv_t;
    let scale = 0.5 / n as f64;
    let mut grad = Matrix::zeros(n, m);
    let mut row_loss = 0.0;
    for i in 0..n {
        let lse = log_sum_exp((0..m).map(|j| logit(i, j)));
        row_loss += lse - logit(i, i);
        for j in 0..m {
            let p = (logit(i, j) - lse).exp();
            let g = grad.get(i, j) + scale * (p - if i == j { 1.0 } else { 0.0 });
            grad.set(i, j, g);
        }
    }
    let mut col_loss = 0.0;
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| logit(i, j)));
        col_loss += lse - logit(j, j);
        for i in 0..n {
            let p = (logit(i, j) - lse).exp();
            let g = grad.get(i, j) + scale * (p - if i == j { 1.0 } else { 0.0 });
            grad.set(i, j, g);
        }
    }
    for g in grad.as_mut_slice() {
        *g *= inv_t;
    }
    let loss = 0.5 * (row_loss + col_loss) / n as f64;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_matrix_gives_log_n() {
        for n in 2..10 {
            let sim = Matrix::from_vec(n, n, vec![0.37; n * n]);
            let (loss, _) = contrastive_loss(&sim, 0.07).unwrap();
            assert!((loss - (n as f64).ln()).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn strong_diagonal_drives_loss_to_zero() {
        let n = 8;
        let mut sim = Matrix::zeros(n, n);
        for i in 0..n {
            sim.set(i, i, 10.0);
        }
        let (loss, _) = contrastive_loss(&sim, 0.07).unwrap();
        assert!(loss < 1e-3, "{loss}");
    }

    #[test]
    fn two_by_two_hand_value() {
        let sim = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (loss, _) = contrastive_loss(&sim, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(contrastive_loss(&rect, 1.0), Err(TrainError::NonSquare { .. })));
        let sq = Matrix::zeros(2, 2);
        assert!(matches!(contrastive_loss(&sq, 0.0), Err(TrainError::NonPositiveTemperature(_))));
        assert!(matches!(contrastive_loss(&sq, -1.0), Err(TrainError::NonPositiveTemperature(_))));
        assert!(matches!(contrastive_loss(&Matrix::zeros(1, 1), 1.0), Err(TrainError::BatchTooSmall(1))));
    }

    fn fd_check(sim: &Matrix, t: f64) {
        let (_, grad) = contrastive_loss_with_negatives(sim, t).unwrap();
        let eps = 1e-6;
        for i in 0..sim.rows() {
            for j in 0..sim.cols() {
                let mut up = sim.clone();
                up.set(i, j, sim.get(i, j) + eps);
                let mut dn = sim.clone();
                dn.set(i, j, sim.get(i, j) - eps);
                let fd = (contrastive_loss_with_negatives(&up, t).unwrap().0 - contrastive_loss_with_negatives(&dn, t).unwrap().0)
                    / (2.0 * eps);
                assert!((fd - grad.get(i, j)).abs() < 1e-7 * (1.0 + fd.abs()), "({i},{j}) fd {fd} an {}", grad.get(i, j));
            }
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(vals in proptest::collection::vec(-1.0f64..1.0, 20), t in 0.2f64..2.0) {
            fd_check(&Matrix::from_vec(4, 4, vals[..16].to_vec()), t);
            fd_check(&Matrix::from_vec(4, 5, vals.clone()), t);
        }

        #[test]
        fn loss_is_nonnegative_and_permutation_invariant(vals in proptest::collection::vec(-1.0f64..1.0, 25),
                                                         perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
                                                         t in 0.05f64..2.0) {
            let sim = Matrix::from_vec(5, 5, vals);
            let (loss, _) = contrastive_loss(&sim, t).unwrap();
            prop_assert!(loss >= 0.0);
            let mut permuted = Matrix::zeros(5, 5);
            for i in 0..5 {
                for j in 0..5 {
                    permuted.set(i, j, sim.get(perm[i], perm[j]));
                }
            }
            let (ploss, _) = contrastive_loss(&permuted, t).unwrap();
            prop_assert!((loss - ploss).abs() < 1e-12);
        }
    }
}
