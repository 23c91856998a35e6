//! Generator and feature-extractor interfaces plus the seeded toy
//! implementations used for desk-scale verification.
//!
//! The generator contract is defined by one equation:
//! `generate(h, z) == generate_from_dense(h, z.tail, dense_layer(z.head))`.
//! The default `generate` IS that composition, so implementations satisfy it
//! by construction unless they override it.

use crate::dataio::ImageTensor;
use crate::error::{Error, Result};
use crate::tensor::{
    affine, area_downsample, area_downsample_adjoint, channel_mix, channel_mix_adjoint,
    conv3x3_circular, conv3x3_circular_adjoint, bilinear_up2, bilinear_up2_adjoint, sigmoid,
    FeatureMap,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dimension plan shared by generator and extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub h_dim: usize,
    pub z_dim: usize,
    pub levels: usize,
    pub level_dim: usize,
    pub embed_dim: usize,
    pub dense_channels: usize,
    pub dense_h: usize,
    pub dense_w: usize,
    pub image_size: usize,
}

impl GeneratorSpec {
    /// Full-scale dimensions of the original pipeline (not instantiated in
    /// tests; the toy plan below scales every axis down).
    pub fn full_scale() -> Self {
        GeneratorSpec {
            h_dim: 2048,
            z_dim: 119,
            levels: 7,
            level_dim: 17,
            embed_dim: 512,
            dense_channels: 1536,
            dense_h: 4,
            dense_w: 4,
            image_size: 256,
        }
    }

    /// Reduced dimensions preserving the structure: 7 levels of 5 noise
    /// dims, 24x2x2 dense activation, 32x32 output.
    pub fn toy() -> Self {
        GeneratorSpec {
            h_dim: 64,
            z_dim: 35,
            levels: 7,
            level_dim: 5,
            embed_dim: 16,
            dense_channels: 24,
            dense_h: 2,
            dense_w: 2,
            image_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim != self.levels * self.level_dim {
            return Err(Error::Config {
                detail: format!(
                    "z_dim {} != levels {} x level_dim {}",
                    self.z_dim, self.levels, self.level_dim
                ),
            });
        }
        let dims = [
            self.h_dim,
            self.embed_dim,
            self.dense_channels,
            self.dense_h,
            self.dense_w,
            self.image_size,
            self.levels,
            self.level_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config {
                detail: "all generator dimensions must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn dense_dim(&self) -> usize {
        self.dense_channels * self.dense_h * self.dense_w
    }

    pub fn tail_dim(&self) -> usize {
        self.z_dim - self.level_dim
    }
}

fn check_finite(values: &[f64], context: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{context}: {v}"),
        });
    }
    Ok(())
}

/// Semantic embedding of an image; the generator's conditioning input.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeature(Vec<f64>);

impl InstanceFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "instance feature")?;
        Ok(InstanceFeature(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Hierarchical noise vector; the head level feeds the dense layer, the
/// tail levels condition the upsampling blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector {
    values: Vec<f64>,
    level_dim: usize,
}

impl NoiseVector {
    pub fn new(values: Vec<f64>, level_dim: usize) -> Result<Self> {
        check_finite(&values, "noise vector")?;
        if level_dim == 0 || values.len() % level_dim != 0 || values.len() < level_dim {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "noise length {} not a positive multiple of level dim {}",
                    values.len(),
                    level_dim
                ),
            });
        }
        Ok(NoiseVector { values, level_dim })
    }

    pub fn head(&self) -> &[f64] {
        &self.values[..self.level_dim]
    }

    pub fn tail(&self) -> &[f64] {
        &self.values[self.level_dim..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn level_dim(&self) -> usize {
        self.level_dim
    }
}

/// First-layer activation of the generator, exposed so it can be overridden.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "dense vector")?;
        Ok(DenseVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub trait GeneratorOracle: Sync + Send {
    fn spec(&self) -> &GeneratorSpec;

    /// Deterministic affine + nonlinear map from the head noise level to the
    /// initial dense activation.
    fn dense_layer(&self, z_head: &[f64]) -> Result<DenseVector>;

    /// Forward pass with the dense activation overridden by `d`.
    fn generate_from_dense(
        &self,
        h: &InstanceFeature,
        z_tail: &[f64],
        d: &DenseVector,
    ) -> Result<ImageTensor>;

    /// The defining composition; override only with something bitwise equal.
    fn generate(&self, h: &InstanceFeature, z: &NoiseVector) -> Result<ImageTensor> {
        let spec = self.spec();
        if z.len() != spec.z_dim || z.level_dim() != spec.level_dim {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "noise vector {}x(level {}) vs spec {}x(level {})",
                    z.len(),
                    z.level_dim(),
                    spec.z_dim,
                    spec.level_dim
                ),
            });
        }
        let d = self.dense_layer(z.head())?;
        self.generate_from_dense(h, z.tail(), &d)
    }

    /// Gradient of `<image, cogradient>` with respect to `d` for the exact
    /// forward map. Implementations may decline; callers fall back to finite
    /// differences when the dense dimension is small enough.
    fn vjp_dense(
        &self,
        _h: &InstanceFeature,
        _z_tail: &[f64],
        _d: &DenseVector,
        _image_cogradient: &FeatureMap,
    ) -> Result<DenseVector> {
        Err(Error::Unsupported {
            what: "vjp_dense".into(),
        })
    }
}

pub trait FeatureExtractorOracle: Sync + Send {
    fn spec(&self) -> &GeneratorSpec;

    /// Global semantic embedding (the conditioning vector's source).
    fn instance_features(&self, image: &ImageTensor) -> Result<InstanceFeature>;

    /// Spatially structured mid-depth feature map.
    fn mid_features(&self, image: &ImageTensor) -> Result<FeatureMap>;

    /// Coarse-to-fine feature maps backing the perceptual distance.
    fn multi_layer_features(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>>;

    /// Gradient of `<mid_features(image), cogradient>` with respect to the
    /// image. Optional, like `vjp_dense`.
    fn vjp_mid_features(
        &self,
        _image: &ImageTensor,
        _cogradient: &FeatureMap,
    ) -> Result<FeatureMap> {
        Err(Error::Unsupported {
            what: "vjp_mid_features".into(),
        })
    }

    /// Gradient of `sum_l <layer_l(image), cogradient_l>` with respect to
    /// the image. Optional.
    fn vjp_multi_layer_features(
        &self,
        _image: &ImageTensor,
        _cogradients: &[FeatureMap],
    ) -> Result<FeatureMap> {
        Err(Error::Unsupported {
            what: "vjp_multi_layer_features".into(),
        })
    }
}

/// Strength of the tanh correction each block adds on top of its linear
/// skip path; keeps the skip chain dominant so inversion stays
/// well-conditioned.
const BLOCK_NONLIN_GAIN: f64 = 0.5;
/// Scale of the per-dimension noise basis patterns.
const NOISE_BASIS_GAIN: f64 = 0.25;

struct ToyBlock {
    /// 3x3 conv taps, `[out][in][dy][dx]`.
    conv: Vec<f64>,
    /// Conditioning map applied to `[embed ++ z_level]`, `out x (embed+level)`.
    cond: Vec<f64>,
    bias: Vec<f64>,
    /// Linear channel-mix skip path, `out x in`.
    skip: Vec<f64>,
    /// One fixed spatial pattern per noise dimension of this level.
    noise_basis: Vec<FeatureMap>,
    c_in: usize,
    c_out: usize,
    upsample: bool,
}

/// Seeded reduced-scale generator. Each block computes
/// `A' = skip(A) + g * tanh(conv(A) + bias + cond([embed ++ z_lvl])) + sum_k z_lvl[k] * basis[k]`
/// on the (optionally upsampled) previous activation, followed by a final
/// 1x1 mix and sigmoid into [0,1].
pub struct ToyGenerator {
    spec: GeneratorSpec,
    seed: u64,
    embed_w: Vec<f64>,
    embed_b: Vec<f64>,
    dense_w: Vec<f64>,
    dense_b: Vec<f64>,
    blocks: Vec<ToyBlock>,
    out_mix: Vec<f64>,
    out_bias: Vec<f64>,
}

fn draw(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

/// Channel plan: halve per block with a floor of 4. Spatial plan: double
/// until the image size is reached.
fn layer_plan(spec: &GeneratorSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.dense_h != spec.dense_w {
        return Err(Error::Config {
            detail: format!("toy generator needs square dense maps, got {}x{}", spec.dense_h, spec.dense_w),
        });
    }
    let mut channels = vec![spec.dense_channels];
    let mut spatial = vec![spec.dense_h];
    for i in 0..spec.levels - 1 {
        channels.push((channels[i] / 2).max(4));
        let s = spatial[i];
        spatial.push(if s < spec.image_size { s * 2 } else { s });
    }
    if *spatial.last().unwrap() != spec.image_size {
        return Err(Error::Config {
            detail: format!(
                "dense map {} cannot reach image size {} in {} doubling blocks",
                spec.dense_h,
                spec.image_size,
                spec.levels - 1
            ),
        });
    }
    Ok((channels, spatial))
}

impl ToyGenerator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (channels, spatial) = layer_plan(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_w = draw(&mut rng, spec.embed_dim * spec.h_dim, 1.0 / (spec.h_dim as f64).sqrt());
        let embed_b = draw(&mut rng, spec.embed_dim, 0.1);
        let dense_w = draw(
            &mut rng,
            spec.dense_dim() * spec.level_dim,
            1.0 / (spec.level_dim as f64).sqrt(),
        );
        let dense_b = draw(&mut rng, spec.dense_dim(), 0.1);
        let cond_in = spec.embed_dim + spec.level_dim;
        let mut blocks = Vec::with_capacity(spec.levels - 1);
        for i in 0..spec.levels - 1 {
            let (ci, co) = (channels[i], channels[i + 1]);
            let res = spatial[i + 1];
            let conv = draw(&mut rng, co * ci * 9, 1.0 / (9.0 * ci as f64).sqrt());
            let cond = draw(&mut rng, co * cond_in, 1.0 / (cond_in as f64).sqrt());
            let bias = draw(&mut rng, co, 0.1);
            let skip = draw(&mut rng, co * ci, 1.0 / (ci as f64).sqrt());
            let noise_basis = (0..spec.level_dim)
                .map(|_| {
                    let data = draw(&mut rng, co * res * res, NOISE_BASIS_GAIN);
                    FeatureMap::from_vec(co, res, res, data).expect("seeded pattern is finite")
                })
                .collect();
            blocks.push(ToyBlock {
                conv,
                cond,
                bias,
                skip,
                noise_basis,
                c_in: ci,
                c_out: co,
                upsample: spatial[i + 1] > spatial[i],
            });
        }
        let c_last = *channels.last().unwrap();
        let out_mix = draw(&mut rng, 3 * c_last, 1.0 / (c_last as f64).sqrt());
        let out_bias = draw(&mut rng, 3, 0.1);
        Ok(ToyGenerator {
            spec,
            seed,
            embed_w,
            embed_b,
            dense_w,
            dense_b,
            blocks,
            out_mix,
            out_bias,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Affine part of the dense layer, exposed so its linearity can be
    /// verified independently of the tanh.
    pub fn dense_preactivation(&self, z_head: &[f64]) -> Result<Vec<f64>> {
        if z_head.len() != self.spec.level_dim {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "z head length {} vs level dim {}",
                    z_head.len(),
                    self.spec.level_dim
                ),
            });
        }
        check_finite(z_head, "z head")?;
        Ok(affine(
            &self.dense_w,
            self.spec.dense_dim(),
            self.spec.level_dim,
            z_head,
            &self.dense_b,
        ))
    }

    fn check_inputs(&self, h: &InstanceFeature, z_tail: &[f64], d: &DenseVector) -> Result<()> {
        if h.len() != self.spec.h_dim {
            return Err(Error::ShapeMismatch {
                context: format!("h length {} vs spec {}", h.len(), self.spec.h_dim),
            });
        }
        if z_tail.len() != self.spec.tail_dim() {
            return Err(Error::ShapeMismatch {
                context: format!("z tail length {} vs spec {}", z_tail.len(), self.spec.tail_dim()),
            });
        }
        if d.len() != self.spec.dense_dim() {
            return Err(Error::ShapeMismatch {
                context: format!("dense length {} vs spec {}", d.len(), self.spec.dense_dim()),
            });
        }
        check_finite(z_tail, "z tail")
    }

    /// Forward pass; when `tape` is given, the per-block tanh outputs and
    /// the final image are stored for the backward pass.
    fn forward(
        &self,
        h: &InstanceFeature,
        z_tail: &[f64],
        d: &DenseVector,
        mut tape: Option<&mut ForwardTape>,
    ) -> Result<FeatureMap> {
        self.check_inputs(h, z_tail, d)?;
        let spec = &self.spec;
        let embed = affine(&self.embed_w, spec.embed_dim, spec.h_dim, h.as_slice(), &self.embed_b);
        let mut activation = FeatureMap::from_vec(
            spec.dense_channels,
            spec.dense_h,
            spec.dense_w,
            d.as_slice().to_vec(),
        )?;
        let mut cond_input = vec![0.0; spec.embed_dim + spec.level_dim];
        cond_input[..spec.embed_dim].copy_from_slice(&embed);
        for (i, block) in self.blocks.iter().enumerate() {
            if block.upsample {
                activation = bilinear_up2(&activation);
            }
            let z_level = &z_tail[i * spec.level_dim..(i + 1) * spec.level_dim];
            cond_input[spec.embed_dim..].copy_from_slice(z_level);
            let cond_shift = affine(
                &block.cond,
                block.c_out,
                spec.embed_dim + spec.level_dim,
                &cond_input,
                &block.bias,
            );
            let mut pre = conv3x3_circular(&block.conv, block.c_out, &activation);
            let plane = pre.height * pre.width;
            for c in 0..block.c_out {
                let shift = cond_shift[c];
                for v in &mut pre.data[c * plane..(c + 1) * plane] {
                    *v = (*v + shift).tanh();
                }
            }
            let mut next = channel_mix(&block.skip, block.c_out, &activation);
            for (nv, tv) in next.data.iter_mut().zip(&pre.data) {
                *nv += BLOCK_NONLIN_GAIN * tv;
            }
            for (k, basis) in block.noise_basis.iter().enumerate() {
                let zk = z_level[k];
                for (nv, bv) in next.data.iter_mut().zip(&basis.data) {
                    *nv += zk * bv;
                }
            }
            if let Some(t) = tape.as_deref_mut() {
                t.tanh_maps.push(pre);
            }
            activation = next;
        }
        let mut image = channel_mix(&self.out_mix, 3, &activation);
        let plane = image.height * image.width;
        for c in 0..3 {
            let b = self.out_bias[c];
            for v in &mut image.data[c * plane..(c + 1) * plane] {
                *v = sigmoid(*v + b);
            }
        }
        if let Some(t) = tape {
            t.image = image.clone();
        }
        Ok(image)
    }
}

struct ForwardTape {
    tanh_maps: Vec<FeatureMap>,
    image: FeatureMap,
}

impl ForwardTape {
    fn new() -> Self {
        ForwardTape {
            tanh_maps: Vec::new(),
            image: FeatureMap::zeros(0, 0, 0),
        }
    }
}

impl GeneratorOracle for ToyGenerator {
    fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn dense_layer(&self, z_head: &[f64]) -> Result<DenseVector> {
        let pre = self.dense_preactivation(z_head)?;
        DenseVector::new(pre.into_iter().map(f64::tanh).collect())
    }

    fn generate_from_dense(
        &self,
        h: &InstanceFeature,
        z_tail: &[f64],
        d: &DenseVector,
    ) -> Result<ImageTensor> {
        let image = self.forward(h, z_tail, d, None)?;
        ImageTensor::from_map(image)
    }

    fn vjp_dense(
        &self,
        h: &InstanceFeature,
        z_tail: &[f64],
        d: &DenseVector,
        image_cogradient: &FeatureMap,
    ) -> Result<DenseVector> {
        let size = self.spec.image_size;
        if image_cogradient.channels != 3
            || image_cogradient.height != size
            || image_cogradient.width != size
        {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "cogradient {}x{}x{} vs image 3x{}x{}",
                    image_cogradient.channels,
                    image_cogradient.height,
                    image_cogradient.width,
                    size,
                    size
                ),
            });
        }
        let mut tape = ForwardTape::new();
        self.forward(h, z_tail, d, Some(&mut tape))?;
        // d sigmoid = img (1 - img)
        let mut grad = FeatureMap::zeros(3, size, size);
        for ((g, cg), img) in grad
            .data
            .iter_mut()
            .zip(&image_cogradient.data)
            .zip(&tape.image.data)
        {
            *g = cg * img * (1.0 - img);
        }
        let mut grad = channel_mix_adjoint(&self.out_mix, 3, &grad);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let tanh_map = &tape.tanh_maps[i];
            // d tanh = 1 - tanh^2, scaled by the block gain
            let mut tanh_grad = FeatureMap::zeros(block.c_out, tanh_map.height, tanh_map.width);
            for ((tg, g), t) in tanh_grad.data.iter_mut().zip(&grad.data).zip(&tanh_map.data) {
                *tg = BLOCK_NONLIN_GAIN * g * (1.0 - t * t);
            }
            let mut upstream = channel_mix_adjoint(&block.skip, block.c_out, &grad);
            let conv_part = conv3x3_circular_adjoint(&block.conv, block.c_out, &tanh_grad);
            for (u, c) in upstream.data.iter_mut().zip(&conv_part.data) {
                *u += c;
            }
            debug_assert_eq!(upstream.channels, block.c_in);
            grad = if block.upsample {
                bilinear_up2_adjoint(&upstream)
            } else {
                upstream
            };
        }
        DenseVector::new(grad.data)
    }
}

/// Seeded reduced-scale feature extractor: a global tanh embedding for
/// instance features, one conv+tanh map at 16x16 for mid features, and
/// three conv+tanh maps at 4/8/16 for the perceptual stack.
pub struct ToyFeatureExtractor {
    spec: GeneratorSpec,
    seed: u64,
    inst_w: Vec<f64>,
    inst_b: Vec<f64>,
    mid_conv: Vec<f64>,
    mid_bias: Vec<f64>,
    layer_convs: Vec<Vec<f64>>,
    layer_biases: Vec<Vec<f64>>,
}

/// Mid features are computed on this grid.
const MID_SCALE: usize = 16;
/// Instance features are computed on this grid.
const INSTANCE_SCALE: usize = 8;
/// Perceptual layers, coarse to fine: (downsample grid, channels).
const LAYER_PLANS: [(usize, usize); 3] = [(4, 4), (8, 6), (16, 8)];
const MID_CHANNELS: usize = 8;

impl ToyFeatureExtractor {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.image_size % MID_SCALE != 0 || spec.image_size < MID_SCALE {
            return Err(Error::Config {
                detail: format!(
                    "extractor needs image size divisible by {MID_SCALE}, got {}",
                    spec.image_size
                ),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = 3 * INSTANCE_SCALE * INSTANCE_SCALE;
        let inst_w = draw(&mut rng, spec.h_dim * patch, 1.0 / (patch as f64).sqrt());
        let inst_b = draw(&mut rng, spec.h_dim, 0.1);
        let mid_conv = draw(&mut rng, MID_CHANNELS * 3 * 9, 1.0 / 27f64.sqrt());
        let mid_bias = draw(&mut rng, MID_CHANNELS, 0.1);
        let mut layer_convs = Vec::new();
        let mut layer_biases = Vec::new();
        for (_, c) in LAYER_PLANS {
            layer_convs.push(draw(&mut rng, c * 3 * 9, 1.0 / 27f64.sqrt()));
            layer_biases.push(draw(&mut rng, c, 0.1));
        }
        Ok(ToyFeatureExtractor {
            spec,
            seed,
            inst_w,
            inst_b,
            mid_conv,
            mid_bias,
            layer_convs,
            layer_biases,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.spec.image_size || image.width() != self.spec.image_size {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "image {}x{} vs spec {}",
                    image.height(),
                    image.width(),
                    self.spec.image_size
                ),
            });
        }
        Ok(())
    }

    fn conv_tanh_at_scale(
        &self,
        image: &ImageTensor,
        scale: usize,
        conv: &[f64],
        bias: &[f64],
        channels: usize,
    ) -> Result<FeatureMap> {
        let down = area_downsample(image.as_map(), scale, scale)?;
        let mut out = conv3x3_circular(conv, channels, &down);
        let plane = scale * scale;
        for c in 0..channels {
            let b = bias[c];
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = (*v + b).tanh();
            }
        }
        Ok(out)
    }

    /// Backward of `conv_tanh_at_scale`: cograd through tanh, conv adjoint,
    /// then spread back up to image resolution.
    fn vjp_conv_tanh(
        &self,
        features: &FeatureMap,
        cogradient: &FeatureMap,
        conv: &[f64],
        channels: usize,
    ) -> Result<FeatureMap> {
        if !features.same_shape(cogradient) {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "cogradient {}x{}x{} vs features {}x{}x{}",
                    cogradient.channels,
                    cogradient.height,
                    cogradient.width,
                    features.channels,
                    features.height,
                    features.width
                ),
            });
        }
        let mut pre_grad = FeatureMap::zeros(channels, features.height, features.width);
        for ((pg, cg), t) in pre_grad
            .data
            .iter_mut()
            .zip(&cogradient.data)
            .zip(&features.data)
        {
            *pg = cg * (1.0 - t * t);
        }
        let down_grad = conv3x3_circular_adjoint(conv, channels, &pre_grad);
        Ok(area_downsample_adjoint(
            &down_grad,
            self.spec.image_size,
            self.spec.image_size,
        ))
    }
}

impl FeatureExtractorOracle for ToyFeatureExtractor {
    fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn instance_features(&self, image: &ImageTensor) -> Result<InstanceFeature> {
        self.check_image(image)?;
        let down = area_downsample(image.as_map(), INSTANCE_SCALE, INSTANCE_SCALE)?;
        let patch = 3 * INSTANCE_SCALE * INSTANCE_SCALE;
        let pre = affine(&self.inst_w, self.spec.h_dim, patch, &down.data, &self.inst_b);
        InstanceFeature::new(pre.into_iter().map(f64::tanh).collect())
    }

    fn mid_features(&self, image: &ImageTensor) -> Result<FeatureMap> {
        self.check_image(image)?;
        self.conv_tanh_at_scale(image, MID_SCALE, &self.mid_conv, &self.mid_bias, MID_CHANNELS)
    }

    fn multi_layer_features(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>> {
        self.check_image(image)?;
        LAYER_PLANS
            .iter()
            .enumerate()
            .map(|(j, &(scale, channels))| {
                self.conv_tanh_at_scale(
                    image,
                    scale,
                    &self.layer_convs[j],
                    &self.layer_biases[j],
                    channels,
                )
            })
            .collect()
    }

    fn vjp_mid_features(
        &self,
        image: &ImageTensor,
        cogradient: &FeatureMap,
    ) -> Result<FeatureMap> {
        let features = self.mid_features(image)?;
        self.vjp_conv_tanh(&features, cogradient, &self.mid_conv, MID_CHANNELS)
    }

    fn vjp_multi_layer_features(
        &self,
        image: &ImageTensor,
        cogradients: &[FeatureMap],
    ) -> Result<FeatureMap> {
        let layers = self.multi_layer_features(image)?;
        if cogradients.len() != layers.len() {
            return Err(Error::LengthMismatch {
                context: format!(
                    "{} cogradients for {} layers",
                    cogradients.len(),
                    layers.len()
                ),
            });
        }
        let size = self.spec.image_size;
        let mut total = FeatureMap::zeros(3, size, size);
        for (j, (layer, cograd)) in layers.iter().zip(cogradients).enumerate() {
            let (_, channels) = LAYER_PLANS[j];
            let g = self.vjp_conv_tanh(layer, cograd, &self.layer_convs[j], channels)?;
            for (t, v) in total.data.iter_mut().zip(&g.data) {
                *t += v;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_pair() -> (ToyGenerator, ToyFeatureExtractor) {
        (
            ToyGenerator::new(GeneratorSpec::toy(), 7).unwrap(),
            ToyFeatureExtractor::new(GeneratorSpec::toy(), 8).unwrap(),
        )
    }

    fn random_latents(rng: &mut ChaCha8Rng, spec: &GeneratorSpec) -> (InstanceFeature, NoiseVector) {
        let h: Vec<f64> = (0..spec.h_dim).map(|_| StandardNormal.sample(rng)).collect();
        let z: Vec<f64> = (0..spec.z_dim).map(|_| StandardNormal.sample(rng)).collect();
        (
            InstanceFeature::new(h).unwrap(),
            NoiseVector::new(z, spec.level_dim).unwrap(),
        )
    }

    #[test]
    fn spec_validation() {
        assert!(GeneratorSpec::toy().validate().is_ok());
        assert!(GeneratorSpec::full_scale().validate().is_ok());
        let mut bad = GeneratorSpec::toy();
        bad.z_dim = 34;
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn toy_layer_plan_matches_expected() {
        let (channels, spatial) = layer_plan(&GeneratorSpec::toy()).unwrap();
        assert_eq!(channels, vec![24, 12, 6, 4, 4, 4, 4]);
        assert_eq!(spatial, vec![2, 4, 8, 16, 32, 32, 32]);
    }

    #[test]
    fn noise_vector_views() {
        let z = NoiseVector::new((0..35).map(|v| v as f64).collect(), 5).unwrap();
        assert_eq!(z.head(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(z.tail().len(), 30);
        assert_eq!(z.tail()[0], 5.0);
        assert!(NoiseVector::new(vec![0.0; 34], 5).is_err());
        assert!(NoiseVector::new(vec![f64::NAN; 35], 5).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let (gen_a, _) = toy_pair();
        let gen_b = ToyGenerator::new(GeneratorSpec::toy(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (h, z) = random_latents(&mut rng, gen_a.spec());
        let img_a = gen_a.generate(&h, &z).unwrap();
        let img_b = gen_b.generate(&h, &z).unwrap();
        assert_eq!(img_a.values(), img_b.values());
    }

    #[test]
    fn dense_override_identity_holds_bitwise() {
        let (gen, _) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (h, z) = random_latents(&mut rng, gen.spec());
            let via_generate = gen.generate(&h, &z).unwrap();
            let d = gen.dense_layer(z.head()).unwrap();
            let via_dense = gen.generate_from_dense(&h, z.tail(), &d).unwrap();
            assert_eq!(via_generate.values(), via_dense.values());
        }
    }

    #[test]
    fn dense_layer_zero_reproducible() {
        let (gen, _) = toy_pair();
        let zero = vec![0.0; 5];
        let a = gen.dense_layer(&zero).unwrap();
        let b = gen.dense_layer(&zero).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        // preactivation at zero is exactly the bias
        assert_eq!(gen.dense_preactivation(&zero).unwrap(), gen.dense_b);
    }

    #[test]
    fn dense_preactivation_is_linear() {
        let (gen, _) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
        let u2: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let d0 = gen.dense_preactivation(&vec![0.0; 5]).unwrap();
        let du = gen.dense_preactivation(&u).unwrap();
        let du2 = gen.dense_preactivation(&u2).unwrap();
        for i in 0..d0.len() {
            let lhs = du2[i] - d0[i];
            let rhs = 2.0 * (du[i] - d0[i]);
            assert!(
                (lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0),
                "entry {i}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn image_range_and_finiteness() {
        let (gen, _) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let img = gen.generate(&h, &z).unwrap();
        assert!(img.values().iter().all(|v| (0.0..=1.0).contains(v)));
        // all-zero dense override also yields a valid image
        let d = DenseVector::new(vec![0.0; gen.spec().dense_dim()]).unwrap();
        let img0 = gen.generate_from_dense(&h, z.tail(), &d).unwrap();
        assert!(img0.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_dense_unit_is_live() {
        let (gen, _) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let d = gen.dense_layer(z.head()).unwrap();
        let base = gen.generate_from_dense(&h, z.tail(), &d).unwrap();
        for i in 0..d.len() {
            let mut bumped = d.as_slice().to_vec();
            bumped[i] += 0.5;
            let img = gen
                .generate_from_dense(&h, z.tail(), &DenseVector::new(bumped).unwrap())
                .unwrap();
            let diff: f64 = img
                .values()
                .iter()
                .zip(base.values())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 0.0, "dense unit {i} is dead");
        }
    }

    #[test]
    fn noise_smoothness_bound() {
        let (gen, _) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let base = gen.generate(&h, &z).unwrap();
        let mut delta: Vec<f64> = (0..35).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut delta {
            *v *= 1e-6 / norm;
        }
        let z2: Vec<f64> = z.as_slice().iter().zip(&delta).map(|(a, b)| a + b).collect();
        let img2 = gen
            .generate(&h, &NoiseVector::new(z2, 5).unwrap())
            .unwrap();
        let max_change = img2
            .values()
            .iter()
            .zip(base.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_change <= 1e-2, "max pixel change {max_change}");
    }

    fn scalarize(img: &ImageTensor, cograd: &FeatureMap) -> f64 {
        img.values().iter().zip(&cograd.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn vjp_dense_matches_finite_differences() {
        let (gen, _) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..3 {
            let (h, z) = random_latents(&mut rng, gen.spec());
            let d = gen.dense_layer(z.head()).unwrap();
            let size = gen.spec().image_size;
            let cograd = FeatureMap::from_vec(
                3,
                size,
                size,
                (0..3 * size * size).map(|_| StandardNormal.sample(&mut rng)).collect(),
            )
            .unwrap();
            let analytic = gen.vjp_dense(&h, z.tail(), &d, &cograd).unwrap();
            let fd_h = 1e-5;
            let mut max_rel = 0.0f64;
            for i in (0..d.len()).step_by(7) {
                let mut dp = d.as_slice().to_vec();
                dp[i] += fd_h;
                let fp = scalarize(
                    &gen.generate_from_dense(&h, z.tail(), &DenseVector::new(dp.clone()).unwrap())
                        .unwrap(),
                    &cograd,
                );
                dp[i] -= 2.0 * fd_h;
                let fm = scalarize(
                    &gen.generate_from_dense(&h, z.tail(), &DenseVector::new(dp).unwrap())
                        .unwrap(),
                    &cograd,
                );
                let fd = (fp - fm) / (2.0 * fd_h);
                let denom = fd.abs().max(analytic.as_slice()[i].abs()).max(1e-6);
                max_rel = max_rel.max((fd - analytic.as_slice()[i]).abs() / denom);
            }
            assert!(max_rel < 1e-4, "trial {trial}: max rel err {max_rel}");
        }
    }

    #[test]
    fn vjp_dense_zero_and_linear_in_cogradient() {
        let (gen, _) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let d = gen.dense_layer(z.head()).unwrap();
        let size = gen.spec().image_size;
        let zero = FeatureMap::zeros(3, size, size);
        let g0 = gen.vjp_dense(&h, z.tail(), &d, &zero).unwrap();
        assert!(g0.as_slice().iter().all(|v| *v == 0.0));

        let mk = |rng: &mut ChaCha8Rng| {
            FeatureMap::from_vec(
                3,
                size,
                size,
                (0..3 * size * size).map(|_| StandardNormal.sample(rng)).collect(),
            )
            .unwrap()
        };
        let u = mk(&mut rng);
        let v = mk(&mut rng);
        let (alpha, beta) = (0.3, -1.7);
        let mut combo = FeatureMap::zeros(3, size, size);
        for ((c, a), b) in combo.data.iter_mut().zip(&u.data).zip(&v.data) {
            *c = alpha * a + beta * b;
        }
        let gu = gen.vjp_dense(&h, z.tail(), &d, &u).unwrap();
        let gv = gen.vjp_dense(&h, z.tail(), &d, &v).unwrap();
        let gc = gen.vjp_dense(&h, z.tail(), &d, &combo).unwrap();
        for i in 0..gc.len() {
            let expect = alpha * gu.as_slice()[i] + beta * gv.as_slice()[i];
            assert!((gc.as_slice()[i] - expect).abs() <= 1e-8 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn extractor_deterministic_and_discriminative() {
        let (gen, feat) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let img = gen.generate(&h, &z).unwrap();
        let f1 = feat.instance_features(&img).unwrap();
        let f2 = feat.instance_features(&img).unwrap();
        assert_eq!(f1.as_slice(), f2.as_slice());

        let size = gen.spec().image_size;
        let gray = ImageTensor::new(size, size, vec![0.5; 3 * size * size]).unwrap();
        let white = ImageTensor::new(size, size, vec![1.0; 3 * size * size]).unwrap();
        let fg = feat.instance_features(&gray).unwrap();
        let fw = feat.instance_features(&white).unwrap();
        assert!(fg.as_slice() != fw.as_slice());
    }

    #[test]
    fn mid_features_are_translation_sensitive() {
        let (gen, feat) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let img = gen.generate(&h, &z).unwrap();
        let size = gen.spec().image_size;
        // cyclic 4-pixel horizontal shift
        let mut shifted = vec![0.0; 3 * size * size];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    shifted[(c * size + y) * size + (x + 4) % size] =
                        img.values()[(c * size + y) * size + x];
                }
            }
        }
        let shifted = ImageTensor::new(size, size, shifted).unwrap();
        let ma = feat.mid_features(&img).unwrap();
        let mb = feat.mid_features(&shifted).unwrap();
        assert!(ma.data != mb.data);
        assert_eq!(ma.channels, MID_CHANNELS);
        assert_eq!(ma.height, MID_SCALE);
    }

    #[test]
    fn multi_layer_shapes_fixed() {
        let (gen, feat) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let img = gen.generate(&h, &z).unwrap();
        let layers = feat.multi_layer_features(&img).unwrap();
        assert_eq!(layers.len(), 3);
        for (layer, &(scale, channels)) in layers.iter().zip(&LAYER_PLANS) {
            assert_eq!((layer.channels, layer.height, layer.width), (channels, scale, scale));
        }
    }

    #[test]
    fn extractor_vjps_match_finite_differences() {
        let (gen, feat) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let img = gen.generate(&h, &z).unwrap();
        let size = gen.spec().image_size;

        let mid = feat.mid_features(&img).unwrap();
        let cograd = FeatureMap::from_vec(
            mid.channels,
            mid.height,
            mid.width,
            (0..mid.data.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap();
        let analytic = feat.vjp_mid_features(&img, &cograd).unwrap();
        // floor the denominator at 1e-3 of the gradient scale: differences of
        // ~2k-term sums leave ~1e-7 absolute noise in the FD quotient
        let gmax = analytic.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let fd_h = 1e-5;
        let mut max_rel = 0.0f64;
        for idx in (0..img.values().len()).step_by(97) {
            let mut vals = img.values().to_vec();
            let orig = vals[idx];
            if orig < fd_h || orig > 1.0 - fd_h {
                continue;
            }
            vals[idx] = orig + fd_h;
            let fp: f64 = feat
                .mid_features(&ImageTensor::new(size, size, vals.clone()).unwrap())
                .unwrap()
                .data
                .iter()
                .zip(&cograd.data)
                .map(|(a, b)| a * b)
                .sum();
            vals[idx] = orig - fd_h;
            let fm: f64 = feat
                .mid_features(&ImageTensor::new(size, size, vals).unwrap())
                .unwrap()
                .data
                .iter()
                .zip(&cograd.data)
                .map(|(a, b)| a * b)
                .sum();
            let fd = (fp - fm) / (2.0 * fd_h);
            let a = analytic.data[idx];
            let denom = fd.abs().max(a.abs()).max(1e-3 * gmax);
            max_rel = max_rel.max((fd - a).abs() / denom);
        }
        assert!(max_rel < 1e-4, "mid vjp max rel err {max_rel}");
    }

    #[test]
    fn multi_layer_vjp_matches_finite_differences() {
        let (gen, feat) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, z) = random_latents(&mut rng, gen.spec());
        let img = gen.generate(&h, &z).unwrap();
        let size = gen.spec().image_size;
        let layers = feat.multi_layer_features(&img).unwrap();
        let cograds: Vec<FeatureMap> = layers
            .iter()
            .map(|l| {
                FeatureMap::from_vec(
                    l.channels,
                    l.height,
                    l.width,
                    (0..l.data.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
                )
                .unwrap()
            })
            .collect();
        let analytic = feat.vjp_multi_layer_features(&img, &cograds).unwrap();
        let gmax = analytic.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scalar = |image: &ImageTensor| -> f64 {
            feat.multi_layer_features(image)
                .unwrap()
                .iter()
                .zip(&cograds)
                .map(|(l, c)| l.data.iter().zip(&c.data).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let fd_h = 1e-5;
        let mut max_rel = 0.0f64;
        for idx in (0..img.values().len()).step_by(131) {
            let mut vals = img.values().to_vec();
            let orig = vals[idx];
            if orig < fd_h || orig > 1.0 - fd_h {
                continue;
            }
            vals[idx] = orig + fd_h;
            let fp = scalar(&ImageTensor::new(size, size, vals.clone()).unwrap());
            vals[idx] = orig - fd_h;
            let fm = scalar(&ImageTensor::new(size, size, vals).unwrap());
            let fd = (fp - fm) / (2.0 * fd_h);
            let a = analytic.data[idx];
            let denom = fd.abs().max(a.abs()).max(1e-3 * gmax);
            max_rel = max_rel.max((fd - a).abs() / denom);
        }
        assert!(max_rel < 1e-4, "multi-layer vjp max rel err {max_rel}");
    }

    #[test]
    fn shape_errors_surface() {
        let (gen, feat) = toy_pair();
        let h_bad = InstanceFeature::new(vec![0.0; 63]).unwrap();
        let z = NoiseVector::new(vec![0.0; 35], 5).unwrap();
        assert!(matches!(
            gen.generate(&h_bad, &z),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            gen.dense_layer(&[0.0; 4]),
            Err(Error::ShapeMismatch { .. })
        ));
        let small = ImageTensor::new(16, 16, vec![0.5; 3 * 256]).unwrap();
        assert!(matches!(
            feat.instance_features(&small),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn vjp_default_declines() {
        struct Dummy(GeneratorSpec);
        impl GeneratorOracle for Dummy {
            fn spec(&self) -> &GeneratorSpec {
                &self.0
            }
            fn dense_layer(&self, _z: &[f64]) -> Result<DenseVector> {
                DenseVector::new(vec![0.0; self.0.dense_dim()])
            }
            fn generate_from_dense(
                &self,
                _h: &InstanceFeature,
                _t: &[f64],
                _d: &DenseVector,
            ) -> Result<ImageTensor> {
                let s = self.0.image_size;
                ImageTensor::new(s, s, vec![0.5; 3 * s * s])
            }
        }
        let dummy = Dummy(GeneratorSpec::toy());
        let h = InstanceFeature::new(vec![0.0; 64]).unwrap();
        let d = DenseVector::new(vec![0.0; 96]).unwrap();
        let cg = FeatureMap::zeros(3, 32, 32);
        assert!(matches!(
            dummy.vjp_dense(&h, &[0.0; 30], &d, &cg),
            Err(Error::Unsupported { .. })
        ));
    }
}
