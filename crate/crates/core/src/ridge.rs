//! Closed-form multi-target ridge regression via thin SVD of the centered
//! design matrix. One decomposition serves every shrinkage candidate during
//! cross-validation, which is what makes grid search affordable at a few
//! thousand voxels.
//!
//! Weights live in f64 in memory (serialization truncates to the f32 file
//! format); the solve never assumes any particular singular-value ordering.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataio::{self, Matrix};
use crate::error::{Error, Result};

/// Fitted ridge decoder for one latent family.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    /// n_voxels x n_targets.
    pub weights: DMatrix<f64>,
    /// n_targets; equals y_mean - x_mean^T weights (centering identity).
    pub bias: DVector<f64>,
    pub lambda: f64,
    pub x_mean: DVector<f64>,
    pub y_mean: DVector<f64>,
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.rows, m.cols, m.values.iter().map(|&v| v as f64))
}

/// Centered design with its thin SVD, reusable across lambda candidates.
struct CenteredDesign {
    u: DMatrix<f64>,
    s: DVector<f64>,
    vt: DMatrix<f64>,
    x_mean: DVector<f64>,
    n_cols: usize,
}

impl CenteredDesign {
    fn new(x: &DMatrix<f64>) -> Self {
        let n = x.nrows();
        let x_mean = x.row_mean().transpose();
        let mut xc = x.clone();
        for r in 0..n {
            for c in 0..x.ncols() {
                xc[(r, c)] -= x_mean[c];
            }
        }
        let svd = xc.svd(true, true);
        CenteredDesign {
            u: svd.u.expect("svd requested u"),
            s: svd.singular_values,
            vt: svd.v_t.expect("svd requested v_t"),
            x_mean,
            n_cols: x.ncols(),
        }
    }

    /// W = V diag(s_i / (s_i^2 + lambda)) U^T Yc, independent of singular
    /// value ordering since each triple is scaled in place.
    fn solve(&self, yc: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
        if lambda == 0.0 {
            let s_max = self.s.iter().cloned().fold(0.0, f64::max);
            let tol = s_max * f64::EPSILON * self.u.nrows().max(self.n_cols) as f64;
            let rank = self.s.iter().filter(|&&s| s > tol).count();
            if rank < self.n_cols {
                return Err(Error::SingularDesign);
            }
        }
        let mut t = self.u.transpose() * yc;
        for (i, mut row) in t.row_iter_mut().enumerate() {
            let s = self.s[i];
            row *= s / (s * s + lambda);
        }
        Ok(self.vt.transpose() * t)
    }
}

fn center_targets(y: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let y_mean = y.row_mean().transpose();
    let mut yc = y.clone();
    for r in 0..y.nrows() {
        for c in 0..y.ncols() {
            yc[(r, c)] -= y_mean[c];
        }
    }
    (yc, y_mean)
}

/// Fit a multi-target ridge model; lambda = 0 requires the centered design
/// to have full column rank.
pub fn fit(x: &Matrix, y: &Matrix, lambda: f64) -> Result<RidgeModel> {
    if x.rows != y.rows {
        return Err(Error::ShapeMismatch {
            context: format!("X has {} rows, Y has {}", x.rows, y.rows),
        });
    }
    if x.rows < 2 {
        return Err(Error::TooFewSamples {
            n: x.rows,
            need: "ridge fit (>= 2)".into(),
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::NonFinite {
            context: format!("lambda {lambda}"),
        });
    }
    let xd = to_dmatrix(x);
    let yd = to_dmatrix(y);
    let design = CenteredDesign::new(&xd);
    let (yc, y_mean) = center_targets(&yd);
    let weights = design.solve(&yc, lambda)?;
    let bias = &y_mean - weights.transpose() * &design.x_mean;
    Ok(RidgeModel {
        weights,
        bias,
        lambda,
        x_mean: design.x_mean,
        y_mean,
    })
}

impl RidgeModel {
    /// X W + bias, row-broadcast.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.weights.nrows() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "predict expects {} voxels, got {}",
                    self.weights.nrows(),
                    x.cols
                ),
            });
        }
        let p = to_dmatrix(x) * &self.weights;
        let t = self.weights.ncols();
        let mut values = Vec::with_capacity(x.rows * t);
        for r in 0..x.rows {
            for c in 0..t {
                values.push((p[(r, c)] + self.bias[c]) as f32);
            }
        }
        Matrix::new(x.rows, t, values)
    }

    /// Predict one row as f64, without f32 truncation of the result.
    pub fn predict_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.weights.nrows() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "predict expects {} voxels, got {}",
                    self.weights.nrows(),
                    x.len()
                ),
            });
        }
        let xv = DVector::from_column_slice(x);
        let p = self.weights.transpose() * xv + &self.bias;
        Ok(p.iter().cloned().collect())
    }

    /// Serialize as LDM1 matrices plus a small metadata file under `dir`,
    /// using `name` as the file prefix.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let v = self.weights.nrows();
        let t = self.weights.ncols();
        let w_flat: Vec<f64> = (0..v)
            .flat_map(|r| (0..t).map(move |c| (r, c)))
            .map(|(r, c)| self.weights[(r, c)])
            .collect();
        dataio::write_matrix(
            &dir.join(format!("{name}_weights.ldm1")),
            &Matrix::from_f64(v, t, &w_flat)?,
        )?;
        let vecs = [
            ("bias", &self.bias),
            ("x_mean", &self.x_mean),
            ("y_mean", &self.y_mean),
        ];
        for (suffix, vec) in vecs {
            let flat: Vec<f64> = vec.iter().cloned().collect();
            dataio::write_matrix(
                &dir.join(format!("{name}_{suffix}.ldm1")),
                &Matrix::from_f64(1, flat.len(), &flat)?,
            )?;
        }
        let meta = format!(
            "format = ridge-v1\nlambda = {}\nn_voxels = {}\nn_targets = {}\n",
            self.lambda, v, t
        );
        std::fs::write(dir.join(format!("{name}_meta.txt")), meta).map_err(|e| {
            Error::IoFailure {
                path: dir.join(format!("{name}_meta.txt")),
                source: e,
            }
        })
    }

    /// Load a model serialized by `save`. Weights come back f32-rounded;
    /// predictions remain deterministic.
    pub fn load(dir: &Path, name: &str) -> Result<RidgeModel> {
        let meta_path = dir.join(format!("{name}_meta.txt"));
        if !meta_path.exists() {
            return Err(Error::UpstreamMissing {
                detail: format!("ridge model metadata {}", meta_path.display()),
            });
        }
        let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::IoFailure {
            path: meta_path.clone(),
            source: e,
        })?;
        let mut lambda = None;
        for line in meta.lines() {
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == "lambda" {
                    lambda = v.trim().parse::<f64>().ok();
                }
            }
        }
        let lambda = lambda.ok_or_else(|| Error::UnknownFormat {
            path: meta_path,
            detail: "missing lambda".into(),
        })?;
        let w = dataio::read_matrix(&dir.join(format!("{name}_weights.ldm1")))?;
        let weights = DMatrix::from_row_iterator(w.rows, w.cols, w.values.iter().map(|&v| v as f64));
        let mut vecs = Vec::new();
        for suffix in ["bias", "x_mean", "y_mean"] {
            let m = dataio::read_matrix(&dir.join(format!("{name}_{suffix}.ldm1")))?;
            vecs.push(DVector::from_iterator(
                m.values.len(),
                m.values.iter().map(|&v| v as f64),
            ));
        }
        let y_mean = vecs.pop().unwrap();
        let x_mean = vecs.pop().unwrap();
        let bias = vecs.pop().unwrap();
        Ok(RidgeModel {
            weights,
            bias,
            lambda,
            x_mean,
            y_mean,
        })
    }
}

/// Pick the shrinkage candidate with the lowest mean held-out MSE over
/// contiguous-block folds. Ties go to the earlier candidate. Returns the
/// winner and all per-candidate CV errors.
pub fn select_lambda(
    x: &Matrix,
    y: &Matrix,
    candidates: &[f64],
    k_folds: usize,
) -> Result<(f64, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput {
            context: "lambda candidates".into(),
        });
    }
    if k_folds < 2 {
        return Err(Error::TooFewSamples {
            n: k_folds,
            need: "at least 2 folds".into(),
        });
    }
    let n = x.rows;
    if n < k_folds {
        return Err(Error::TooFewSamples {
            n,
            need: format!("{k_folds} folds"),
        });
    }
    if x.rows != y.rows {
        return Err(Error::ShapeMismatch {
            context: format!("X has {} rows, Y has {}", x.rows, y.rows),
        });
    }
    let xd = to_dmatrix(x);
    let yd = to_dmatrix(y);
    let mut errs = vec![0.0; candidates.len()];
    for fold in 0..k_folds {
        let lo = fold * n / k_folds;
        let hi = (fold + 1) * n / k_folds;
        let train_rows: Vec<usize> = (0..lo).chain(hi..n).collect();
        let xt = xd.select_rows(train_rows.iter());
        let yt = yd.select_rows(train_rows.iter());
        let design = CenteredDesign::new(&xt);
        let (yc, y_mean) = center_targets(&yt);
        let xv = xd.rows(lo, hi - lo).into_owned();
        let yv = yd.rows(lo, hi - lo).into_owned();
        for (ci, &lambda) in candidates.iter().enumerate() {
            if !(lambda >= 0.0) || !lambda.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("lambda candidate {lambda}"),
                });
            }
            let w = design.solve(&yc, lambda)?;
            let bias = &y_mean - w.transpose() * &design.x_mean;
            let mut pred = &xv * &w;
            for r in 0..pred.nrows() {
                for c in 0..pred.ncols() {
                    pred[(r, c)] += bias[c];
                }
            }
            let diff = &pred - &yv;
            errs[ci] += diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        }
    }
    for e in &mut errs {
        *e /= k_folds as f64;
    }
    let mut best = 0;
    for i in 1..errs.len() {
        if errs[i] < errs[best] {
            best = i;
        }
    }
    Ok((candidates[best], errs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_design_shrinks_targets() {
        // X = I_n: centered design has equal singular values, so W acts as
        // Yc scaled by s/(s^2 + lambda) in the design's coordinates; check
        // the fit reproduces training targets exactly at lambda -> 0.
        let n = 6;
        let mut values = vec![0.0f32; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        let x = Matrix::new(n, n, values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = rand_matrix(&mut rng, n, 2);
        let model = fit(&x, &y, 1e-9).unwrap();
        let pred = model.predict(&x).unwrap();
        for (p, t) in pred.values.iter().zip(&y.values) {
            assert!((p - t).abs() < 1e-4, "{p} vs {t}");
        }
    }

    #[test]
    fn zero_targets_give_zero_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_matrix(&mut rng, 10, 4);
        let y = Matrix::zeros(10, 3);
        let model = fit(&x, &y, 1.0).unwrap();
        assert!(model.weights.iter().all(|&w| w.abs() < 1e-14));
        assert!(model.bias.iter().all(|&b| b.abs() < 1e-14));
    }

    #[test]
    fn mean_row_predicts_mean_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_matrix(&mut rng, 20, 5);
        let y = rand_matrix(&mut rng, 20, 3);
        let model = fit(&x, &y, 0.5).unwrap();
        let xm: Vec<f64> = model.x_mean.iter().cloned().collect();
        let pred = model.predict_row(&xm).unwrap();
        for (p, m) in pred.iter().zip(model.y_mean.iter()) {
            assert!((p - m).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_column_leaves_predictions_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(&mut rng, 30, 6);
        let y = rand_matrix(&mut rng, 30, 2);
        let model = fit(&x, &y, 2.0).unwrap();
        // same design with an extra all-zero voxel column
        let mut wide = Vec::new();
        for r in 0..30 {
            wide.extend_from_slice(x.row(r));
            wide.push(0.0);
        }
        let xw = Matrix::new(30, 7, wide).unwrap();
        let model_w = fit(&xw, &y, 2.0).unwrap();
        let p1 = model.predict(&x).unwrap();
        let p2 = model_w.predict(&xw).unwrap();
        for (a, b) in p1.values.iter().zip(&p2.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_norm_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_matrix(&mut rng, 40, 8);
        let y = rand_matrix(&mut rng, 40, 3);
        let mut last = f64::INFINITY;
        for lambda in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let norm = fit(&x, &y, lambda).unwrap().weights.norm();
            assert!(norm <= last + 1e-12, "norm rose at lambda={lambda}");
            last = norm;
        }
    }

    #[test]
    fn targets_decompose_per_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_matrix(&mut rng, 25, 6);
        let y = rand_matrix(&mut rng, 25, 4);
        let joint = fit(&x, &y, 3.0).unwrap();
        for c in 0..4 {
            let yc: Vec<f32> = (0..25).map(|r| y.at(r, c)).collect();
            let single = fit(&x, &Matrix::new(25, 1, yc).unwrap(), 3.0).unwrap();
            for v in 0..6 {
                assert!((joint.weights[(v, c)] - single.weights[(v, 0)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lambda_zero_on_rank_deficient_design_errors() {
        // wide design: centered rank < column count
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_matrix(&mut rng, 5, 10);
        let y = rand_matrix(&mut rng, 5, 2);
        assert!(matches!(fit(&x, &y, 0.0), Err(Error::SingularDesign)));
        assert!(fit(&x, &y, 0.1).is_ok());
    }

    #[test]
    fn duplicated_rows_duplicate_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_matrix(&mut rng, 15, 4);
        let y = rand_matrix(&mut rng, 15, 2);
        let model = fit(&x, &y, 1.0).unwrap();
        let mut doubled = x.values.clone();
        doubled.extend_from_slice(&x.values);
        let xd = Matrix::new(30, 4, doubled).unwrap();
        let p = model.predict(&xd).unwrap();
        for r in 0..15 {
            assert_eq!(p.row(r), p.row(r + 15));
        }
    }

    #[test]
    fn select_lambda_prefers_smallest_when_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_matrix(&mut rng, 60, 4);
        let w_true: Vec<f64> = (0..4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut yv = Vec::new();
        for r in 0..60 {
            for c in 0..2 {
                let mut acc = 0.0;
                for v in 0..4 {
                    acc += x.at(r, v) as f64 * w_true[v * 2 + c];
                }
                yv.push(acc as f32);
            }
        }
        let y = Matrix::new(60, 2, yv).unwrap();
        let (best, errs) = select_lambda(&x, &y, &[0.001, 1.0, 100.0], 5).unwrap();
        assert_eq!(best, 0.001);
        assert!(errs[0] <= errs[1] && errs[1] <= errs[2]);
    }

    #[test]
    fn select_lambda_single_candidate_unconditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_matrix(&mut rng, 10, 3);
        let y = rand_matrix(&mut rng, 10, 2);
        let (best, errs) = select_lambda(&x, &y, &[42.0], 2).unwrap();
        assert_eq!(best, 42.0);
        assert_eq!(errs.len(), 1);
    }

    #[test]
    fn select_lambda_needs_enough_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_matrix(&mut rng, 3, 2);
        let y = rand_matrix(&mut rng, 3, 1);
        assert!(matches!(
            select_lambda(&x, &y, &[1.0], 5),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn save_load_roundtrip_predicts_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_matrix(&mut rng, 20, 5);
        let y = rand_matrix(&mut rng, 20, 3);
        let model = fit(&x, &y, 2.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), "h").unwrap();
        let loaded = RidgeModel::load(dir.path(), "h").unwrap();
        assert_eq!(loaded.lambda, 2.5);
        let p1 = loaded.predict(&x).unwrap();
        let p2 = RidgeModel::load(dir.path(), "h").unwrap().predict(&x).unwrap();
        assert_eq!(p1.values, p2.values);
    }
}
