//! Two-stage latent extraction: CMA-ES over the noise vector against the
//! mid-feature loss, then RMSProp over the dense vector under a combined
//! mid + perceptual + pixel loss with the noise tail held fixed.

use crate::cmaes::{self, CmaesConfig};
use crate::dataio::ImageTensor;
use crate::error::{Error, Result};
use crate::gradopt::{finite_diff_grad, minimize_grad, GradOptTrace, RmspropConfig};
use crate::oracle::{
    DenseVector, FeatureExtractorOracle, GeneratorOracle, InstanceFeature, NoiseVector,
};
use crate::tensor::{area_downsample, area_downsample_adjoint, FeatureMap};
use rayon::prelude::*;

/// Finite differences for declined VJPs are only attempted up to this dense
/// dimension; past it the cost is prohibitive and we fail loudly instead.
const FD_FALLBACK_LIMIT: usize = 512;

#[derive(Debug, Clone)]
pub struct InversionConfig {
    pub cmaes: CmaesConfig,
    pub stage2: RmspropConfig,
    pub w_mid: f64,
    pub w_perc: f64,
    pub w_pix: f64,
    /// Side length both images are area-averaged to for the pixel loss.
    pub pixel_downsample: usize,
    /// Extra CMA-ES attempts when `cmaes.f_tol` is finite and unmet; each
    /// restart doubles the population and moves to a fresh sampling stream.
    pub stage1_restarts: usize,
}

impl InversionConfig {
    /// Stage-1 search centered on the noise prior's mean with unit step.
    ///
    /// Stage 2 starts where stage 1 left off, so its loss is already small
    /// and RMSProp's scale-free step must stay below the curvature floor;
    /// a 1e-3 rate with 200 steps refines without oscillating back up.
    pub fn new(z_dim: usize, max_evals: usize, seed: u64) -> Self {
        let mut stage2 = RmspropConfig::default();
        stage2.learning_rate = 1e-3;
        stage2.steps = 200;
        InversionConfig {
            cmaes: CmaesConfig::new(vec![0.0; z_dim], 1.0, max_evals, seed),
            stage2,
            w_mid: 1.0,
            w_perc: 1.0,
            w_pix: 1.0,
            pixel_downsample: 16,
            stage1_restarts: 0,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let weights = [self.w_mid, self.w_perc, self.w_pix];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config {
                detail: format!(
                    "loss weights must be finite and nonnegative, got {weights:?}"
                ),
            });
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config {
                detail: "at least one loss weight must be positive".into(),
            });
        }
        if self.pixel_downsample == 0 || self.pixel_downsample > image_size {
            return Err(Error::Config {
                detail: format!(
                    "pixel downsample {} outside 1..={image_size}",
                    self.pixel_downsample
                ),
            });
        }
        Ok(())
    }
}

/// Everything the decoder needs to reproduce one image. Extraction fills in
/// the per-stage losses; triples that were sampled or regression-predicted
/// carry `None` there.
#[derive(Debug, Clone)]
pub struct LatentTriple {
    pub h: InstanceFeature,
    pub z: NoiseVector,
    pub d: DenseVector,
    pub stage1_loss: Option<f64>,
    pub stage2_loss: Option<f64>,
}

impl LatentTriple {
    /// Triple without extraction provenance.
    pub fn new(h: InstanceFeature, z: NoiseVector, d: DenseVector) -> Self {
        LatentTriple {
            h,
            z,
            d,
            stage1_loss: None,
            stage2_loss: None,
        }
    }
}

/// Mean squared difference between the two images' mid-feature maps.
pub fn mid_feature_loss(
    candidate: &ImageTensor,
    target: &ImageTensor,
    feat: &dyn FeatureExtractorOracle,
) -> Result<f64> {
    let a = feat.mid_features(candidate)?;
    let b = feat.mid_features(target)?;
    Ok(mean_sq_diff(&a, &b))
}

fn mean_sq_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    debug_assert!(a.same_shape(b));
    let n = a.data.len() as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Unit-normalize each spatial location's channel vector; zero vectors stay
/// zero.
fn unit_normalize(map: &FeatureMap) -> FeatureMap {
    let plane = map.height * map.width;
    let mut out = map.clone();
    for p in 0..plane {
        let mut norm_sq = 0.0;
        for c in 0..map.channels {
            let v = map.data[c * plane + p];
            norm_sq += v * v;
        }
        if norm_sq > 0.0 {
            let inv = 1.0 / norm_sq.sqrt();
            for c in 0..map.channels {
                out.data[c * plane + p] *= inv;
            }
        }
    }
    out
}

/// LPIPS-style distance: per layer, unit-normalize channel vectors at each
/// location, take the mean over locations of the squared channel
/// difference, then average across layers.
pub fn perceptual_distance(
    a: &ImageTensor,
    b: &ImageTensor,
    feat: &dyn FeatureExtractorOracle,
) -> Result<f64> {
    let la = feat.multi_layer_features(a)?;
    let lb = feat.multi_layer_features(b)?;
    let mut total = 0.0;
    for (fa, fb) in la.iter().zip(&lb) {
        let na = unit_normalize(fa);
        let nb = unit_normalize(fb);
        let plane = (fa.height * fa.width) as f64;
        total += na
            .data
            .iter()
            .zip(&nb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / plane;
    }
    Ok(total / la.len() as f64)
}

/// Mean squared error after area-averaging both images to `size x size`.
pub fn pixel_mse_down(a: &ImageTensor, b: &ImageTensor, size: usize) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "pixel loss images {}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        });
    }
    let da = area_downsample(a.as_map(), size, size)?;
    let db = area_downsample(b.as_map(), size, size)?;
    Ok(mean_sq_diff(&da, &db))
}

/// Minimize the mid-feature loss over the full noise vector with CMA-ES,
/// keeping `h` fixed. Returns the best-sampled noise vector and its loss.
///
/// The perceptual and pixel weights play no part here; stage 1 is driven by
/// the mid-feature distance alone.
pub fn stage1_optimize_noise(
    target: &ImageTensor,
    h: &InstanceFeature,
    gen: &dyn GeneratorOracle,
    feat: &dyn FeatureExtractorOracle,
    config: &InversionConfig,
) -> Result<(NoiseVector, f64)> {
    let spec = gen.spec();
    config.validate(spec.image_size)?;
    if config.cmaes.dim != spec.z_dim {
        return Err(Error::ShapeMismatch {
            context: format!(
                "CMA-ES dimension {} vs noise dimension {}",
                config.cmaes.dim, spec.z_dim
            ),
        });
    }
    let target_mid = feat.mid_features(target)?;
    // One eager evaluation so shape/config errors propagate instead of being
    // masked by the infallible objective below.
    let probe = NoiseVector::new(config.cmaes.mean0.clone(), spec.level_dim)?;
    let probe_image = gen.generate(h, &probe)?;
    drop(feat.mid_features(&probe_image)?);
    let objective = |z: &[f64]| -> f64 {
        let noise = match NoiseVector::new(z.to_vec(), spec.level_dim) {
            Ok(n) => n,
            Err(_) => return f64::INFINITY,
        };
        match gen
            .generate(h, &noise)
            .and_then(|img| feat.mid_features(&img))
        {
            Ok(mid) => mean_sq_diff(&mid, &target_mid),
            Err(_) => f64::INFINITY,
        }
    };
    let mut best_z = Vec::new();
    let mut best_f = f64::INFINITY;
    let mut attempt_config = config.cmaes.clone();
    for attempt in 0..=config.stage1_restarts {
        let (z, f, _) = cmaes::minimize(&objective, &attempt_config)?;
        if f < best_f || attempt == 0 {
            best_z = z;
            best_f = f;
        }
        if best_f <= config.cmaes.f_tol {
            break;
        }
        attempt_config.population *= 2;
        // golden-ratio stride keeps restart streams disjoint from the
        // per-image seed offsets used by extract_latents
        attempt_config.seed = attempt_config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    }
    Ok((NoiseVector::new(best_z, spec.level_dim)?, best_f))
}

/// Combined stage-2 objective value at a dense vector.
fn combined_loss(
    d: &[f64],
    target: &ImageTensor,
    target_mid: &FeatureMap,
    h: &InstanceFeature,
    z_tail: &[f64],
    gen: &dyn GeneratorOracle,
    feat: &dyn FeatureExtractorOracle,
    config: &InversionConfig,
) -> Result<f64> {
    let image = gen.generate_from_dense(h, z_tail, &DenseVector::new(d.to_vec())?)?;
    let mut loss = 0.0;
    if config.w_mid > 0.0 {
        let mid = feat.mid_features(&image)?;
        loss += config.w_mid * mean_sq_diff(&mid, target_mid);
    }
    if config.w_perc > 0.0 {
        loss += config.w_perc * perceptual_distance(&image, target, feat)?;
    }
    if config.w_pix > 0.0 {
        loss += config.w_pix * pixel_mse_down(&image, target, config.pixel_downsample)?;
    }
    Ok(loss)
}

/// Analytic gradient of the combined loss via the oracle VJPs. Returns
/// `Unsupported` if either oracle declines.
fn combined_grad(
    d: &[f64],
    target: &ImageTensor,
    target_mid: &FeatureMap,
    target_layers: &[FeatureMap],
    h: &InstanceFeature,
    z_tail: &[f64],
    gen: &dyn GeneratorOracle,
    feat: &dyn FeatureExtractorOracle,
    config: &InversionConfig,
) -> Result<(f64, Vec<f64>)> {
    let dense = DenseVector::new(d.to_vec())?;
    let image = gen.generate_from_dense(h, z_tail, &dense)?;
    let size = image.height();
    let mut image_cograd = FeatureMap::zeros(3, size, size);
    let mut loss = 0.0;

    if config.w_mid > 0.0 {
        let mid = feat.mid_features(&image)?;
        loss += config.w_mid * mean_sq_diff(&mid, target_mid);
        let n = mid.data.len() as f64;
        let mut cograd = FeatureMap::zeros(mid.channels, mid.height, mid.width);
        for ((c, a), b) in cograd.data.iter_mut().zip(&mid.data).zip(&target_mid.data) {
            *c = config.w_mid * 2.0 * (a - b) / n;
        }
        let g = feat.vjp_mid_features(&image, &cograd)?;
        for (acc, v) in image_cograd.data.iter_mut().zip(&g.data) {
            *acc += v;
        }
    }

    if config.w_perc > 0.0 {
        let layers = feat.multi_layer_features(&image)?;
        let n_layers = layers.len() as f64;
        let mut cograds = Vec::with_capacity(layers.len());
        for (fa, fb) in layers.iter().zip(target_layers) {
            let na = unit_normalize(fa);
            let nb = unit_normalize(fb);
            let plane = fa.height * fa.width;
            loss += config.w_perc
                * na.data
                    .iter()
                    .zip(&nb.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                / plane as f64
                / n_layers;
            // d/dv of |v/|v| - nb|^2 = (2/|v|) (I - na na^T) (na - nb)
            let mut cg = FeatureMap::zeros(fa.channels, fa.height, fa.width);
            let scale = config.w_perc * 2.0 / plane as f64 / n_layers;
            for p in 0..plane {
                let mut norm_sq = 0.0;
                for c in 0..fa.channels {
                    let v = fa.data[c * plane + p];
                    norm_sq += v * v;
                }
                if norm_sq == 0.0 {
                    continue;
                }
                let inv_norm = 1.0 / norm_sq.sqrt();
                let mut dot = 0.0;
                for c in 0..fa.channels {
                    let diff = na.data[c * plane + p] - nb.data[c * plane + p];
                    dot += diff * na.data[c * plane + p];
                }
                for c in 0..fa.channels {
                    let diff = na.data[c * plane + p] - nb.data[c * plane + p];
                    cg.data[c * plane + p] =
                        scale * inv_norm * (diff - dot * na.data[c * plane + p]);
                }
            }
            cograds.push(cg);
        }
        let g = feat.vjp_multi_layer_features(&image, &cograds)?;
        for (acc, v) in image_cograd.data.iter_mut().zip(&g.data) {
            *acc += v;
        }
    }

    if config.w_pix > 0.0 {
        let s = config.pixel_downsample;
        let da = area_downsample(image.as_map(), s, s)?;
        let db = area_downsample(target.as_map(), s, s)?;
        loss += config.w_pix * mean_sq_diff(&da, &db);
        let n = da.data.len() as f64;
        let mut cograd = FeatureMap::zeros(3, s, s);
        for ((c, a), b) in cograd.data.iter_mut().zip(&da.data).zip(&db.data) {
            *c = config.w_pix * 2.0 * (a - b) / n;
        }
        let g = area_downsample_adjoint(&cograd, size, size);
        for (acc, v) in image_cograd.data.iter_mut().zip(&g.data) {
            *acc += v;
        }
    }

    let grad = gen.vjp_dense(h, z_tail, &dense, &image_cograd)?;
    Ok((loss, grad.as_slice().to_vec()))
}

/// Minimize the combined loss over the dense vector with RMSProp, starting
/// from `dense_layer(z.head)` and keeping `h` and `z.tail` fixed.
///
/// Prefers the oracles' VJPs; if either declines, falls back to central
/// finite differences when the dense dimension is at most
/// `FD_FALLBACK_LIMIT`, and otherwise fails with `GradientUnavailable`.
pub fn stage2_optimize_dense(
    target: &ImageTensor,
    h: &InstanceFeature,
    z: &NoiseVector,
    gen: &dyn GeneratorOracle,
    feat: &dyn FeatureExtractorOracle,
    config: &InversionConfig,
) -> Result<(DenseVector, GradOptTrace)> {
    let spec = gen.spec();
    config.validate(spec.image_size)?;
    let d0 = gen.dense_layer(z.head())?;
    let target_mid = feat.mid_features(target)?;
    let target_layers = feat.multi_layer_features(target)?;

    let analytic = |d: &[f64]| -> Result<(f64, Vec<f64>)> {
        combined_grad(
            d,
            target,
            &target_mid,
            &target_layers,
            h,
            z.tail(),
            gen,
            feat,
            config,
        )
    };
    // Probe once to decide between the VJP path and finite differences.
    match analytic(d0.as_slice()) {
        Ok(_) => {
            let trace = minimize_grad(analytic, d0.as_slice(), &config.stage2)?;
            let d = DenseVector::new(trace.final_params.clone())?;
            Ok((d, trace))
        }
        Err(Error::Unsupported { .. }) => {
            if spec.dense_dim() > FD_FALLBACK_LIMIT {
                return Err(Error::GradientUnavailable {
                    context: format!(
                        "oracle declined VJP and dense dimension {} exceeds the finite-difference limit {}",
                        spec.dense_dim(),
                        FD_FALLBACK_LIMIT
                    ),
                });
            }
            let value = |d: &[f64]| -> Result<f64> {
                combined_loss(d, target, &target_mid, h, z.tail(), gen, feat, config)
            };
            let loss_and_grad = |d: &[f64]| -> Result<(f64, Vec<f64>)> {
                let loss = value(d)?;
                let grad = finite_diff_grad(
                    |x| value(x).unwrap_or(f64::NAN),
                    d,
                    1e-5,
                )?;
                Ok((loss, grad))
            };
            let trace = minimize_grad(loss_and_grad, d0.as_slice(), &config.stage2)?;
            let d = DenseVector::new(trace.final_params.clone())?;
            Ok((d, trace))
        }
        Err(e) => Err(e),
    }
}

/// Run the full two-stage extraction for each image, in parallel, with the
/// CMA-ES seed offset by the image index so streams are independent.
pub fn extract_latents(
    images: &[ImageTensor],
    gen: &dyn GeneratorOracle,
    feat: &dyn FeatureExtractorOracle,
    config: &InversionConfig,
) -> Result<Vec<LatentTriple>> {
    if images.is_empty() {
        return Err(Error::EmptyInput {
            context: "extract_latents needs at least one image".into(),
        });
    }
    images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let mut local = config.clone();
            local.cmaes.seed = config.cmaes.seed.wrapping_add(i as u64);
            let h = feat.instance_features(image)?;
            let (z, stage1_loss) = stage1_optimize_noise(image, &h, gen, feat, &local)?;
            let (d, trace) = stage2_optimize_dense(image, &h, &z, gen, feat, &local)?;
            let stage2_loss = *trace.losses.last().expect("trace never empty");
            Ok(LatentTriple {
                h,
                z,
                d,
                stage1_loss: Some(stage1_loss),
                stage2_loss: Some(stage2_loss),
            })
        })
        .collect()
}
