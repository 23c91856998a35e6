//! Reconstruction quality measures: pixel correlation, two-way
//! identification, windowed SSIM, and feature-space distance.
//!
//! Everything here is pure and deterministic; two-way identification is the
//! rank-based score, so any strictly increasing rescaling of the similarity
//! function leaves it unchanged.

use crate::dataio::ImageTensor;
use crate::error::{Error, Result};
use crate::oracle::FeatureExtractorOracle;
use rayon::prelude::*;

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian window standard deviation.
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers for unit dynamic range: (0.01 L)^2 and (0.03 L)^2 with L = 1.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    let (ma, mb) = (a.as_map(), b.as_map());
    if ma.channels != mb.channels || ma.height != mb.height || ma.width != mb.width {
        return Err(Error::ShapeMismatch {
            context: format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                ma.channels, ma.height, ma.width, mb.channels, mb.height, mb.width
            ),
        });
    }
    Ok(())
}

/// Pearson correlation over all flattened pixel values, channels included.
pub fn pixel_correlation(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "pixel_correlation")?;
    let x = a.values();
    let y = b.values();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ZeroVariance {
            context: "pixel_correlation input image".into(),
        });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// All-pairs two-way identification: for every reconstruction, the fraction
/// of distractor truths it beats (ties count half), as a percentage.
pub fn two_way_identification<F>(
    recons: &[ImageTensor],
    truths: &[ImageTensor],
    similarity: F,
) -> Result<f64>
where
    F: Fn(&ImageTensor, &ImageTensor) -> Result<f64> + Sync,
{
    if recons.len() != truths.len() {
        return Err(Error::LengthMismatch {
            context: format!("{} reconstructions vs {} truths", recons.len(), truths.len()),
        });
    }
    let n = recons.len();
    if n < 2 {
        return Err(Error::TooFewItems { need: 2, got: n });
    }
    let sims: Vec<Vec<f64>> = recons
        .par_iter()
        .map(|r| truths.iter().map(|t| similarity(r, t)).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut score = 0.0;
    for i in 0..n {
        let own = sims[i][i];
        for j in 0..n {
            if j == i {
                continue;
            }
            if own > sims[i][j] {
                score += 1.0;
            } else if own == sims[i][j] {
                score += 0.5;
            }
        }
    }
    Ok(100.0 * score / (n * (n - 1)) as f64)
}

/// Normalized 11x11 Gaussian window as the outer product of a 1-D kernel.
/// The total is nudged onto exactly 1 so constant images keep their mean.
fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut line = [0.0; SSIM_WINDOW];
    for (i, v) in line.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let norm: f64 = line.iter().sum();
    for v in &mut line {
        *v /= norm;
    }
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for r in 0..SSIM_WINDOW {
        for c in 0..SSIM_WINDOW {
            w[r * SSIM_WINDOW + c] = line[r] * line[c];
        }
    }
    let total: f64 = w.iter().sum();
    let center = (SSIM_WINDOW / 2) * (SSIM_WINDOW + 1);
    w[center] += 1.0 - total;
    w
}

/// Mean structural similarity over all fully interior 11x11 windows,
/// averaged across channels. Gaussian weighting, sigma 1.5, unit range.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let map_a = a.as_map();
    let map_b = b.as_map();
    let (h, w) = (map_a.height, map_a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..map_a.channels {
        let pa = &map_a.data[ch * plane..][..plane];
        let pb = &map_b.data[ch * plane..][..plane];
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    let ra = &pa[(y0 + dy) * w + x0..][..SSIM_WINDOW];
                    let rb = &pb[(y0 + dy) * w + x0..][..SSIM_WINDOW];
                    let wr = &win[dy * SSIM_WINDOW..][..SSIM_WINDOW];
                    for dx in 0..SSIM_WINDOW {
                        let (va, vb, wi) = (ra[dx], rb[dx], wr[dx]);
                        mu_a += wi * va;
                        mu_b += wi * vb;
                        saa += wi * va * va;
                        sbb += wi * vb * vb;
                        sab += wi * va * vb;
                    }
                }
                let var_a = (saa - mu_a * mu_a).max(0.0);
                let var_b = (sbb - mu_b * mu_b).max(0.0);
                let cov = sab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Cosine distance between two vectors; exactly invariant to rescaling
/// either input by a positive power of two.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            context: format!("cosine distance: {} vs {}", a.len(), b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm {
            context: "cosine distance input".into(),
        });
    }
    Ok(1.0 - dot / (na * nb))
}

/// One minus the cosine similarity of the two images' instance features.
pub fn feature_distance(
    a: &ImageTensor,
    b: &ImageTensor,
    feat: &dyn FeatureExtractorOracle,
) -> Result<f64> {
    check_same_shape(a, b, "feature_distance")?;
    let fa = feat.instance_features(a)?;
    let fb = feat.instance_features(b)?;
    cosine_distance(fa.as_slice(), fb.as_slice())
}

/// Per-variant evaluation summary with the per-item values behind it.
#[derive(Debug, Clone)]
pub struct MetricReport {
    /// Two-way identification over pixel correlation, in percent.
    pub pix_comp: f64,
    pub ssim_mean: f64,
    pub feature_distance_mean: f64,
    pub pixel_correlations: Vec<f64>,
    pub ssim_values: Vec<f64>,
    pub feature_distances: Vec<f64>,
}

impl MetricReport {
    /// Rows for the metric CSV: (item_id, metric, value), summary rows last.
    pub fn rows(&self, ids: &[String]) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            rows.push((id.clone(), "pixel_correlation".into(), self.pixel_correlations[i]));
            rows.push((id.clone(), "ssim".into(), self.ssim_values[i]));
            rows.push((id.clone(), "feature_distance".into(), self.feature_distances[i]));
        }
        rows.push(("summary".into(), "pix_comp".into(), self.pix_comp));
        rows.push(("summary".into(), "ssim_mean".into(), self.ssim_mean));
        rows.push((
            "summary".into(),
            "feature_distance_mean".into(),
            self.feature_distance_mean,
        ));
        rows
    }
}

/// Evaluate reconstructions against matched ground-truth images.
pub fn evaluate_reconstructions(
    recons: &[ImageTensor],
    truths: &[ImageTensor],
    feat: &dyn FeatureExtractorOracle,
) -> Result<MetricReport> {
    if recons.len() != truths.len() {
        return Err(Error::LengthMismatch {
            context: format!("{} reconstructions vs {} truths", recons.len(), truths.len()),
        });
    }
    let pix_comp = two_way_identification(recons, truths, pixel_correlation)?;
    let per_item: Vec<(f64, f64, f64)> = recons
        .par_iter()
        .zip(truths.par_iter())
        .map(|(r, t)| {
            Ok((
                pixel_correlation(r, t)?,
                ssim(r, t)?,
                feature_distance(r, t, feat)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_item.len() as f64;
    Ok(MetricReport {
        pix_comp,
        ssim_mean: per_item.iter().map(|v| v.1).sum::<f64>() / n,
        feature_distance_mean: per_item.iter().map(|v| v.2).sum::<f64>() / n,
        pixel_correlations: per_item.iter().map(|v| v.0).collect(),
        ssim_values: per_item.iter().map(|v| v.1).collect(),
        feature_distances: per_item.iter().map(|v| v.2).collect(),
    })
}
