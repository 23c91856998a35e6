//! End-to-end decode-and-reconstruct flow: fit one ridge decoder per latent
//! family, decode held-out responses into latent triples, render the three
//! reconstruction variants, and drive the synthetic closed-loop experiment
//! that validates the whole chain against known ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::dataio::{self, ImageTensor, Matrix, RoiMask};
use crate::error::{Error, Result};
use crate::inversion::LatentTriple;
use crate::metrics::{self, MetricReport};
use crate::oracle::{
    DenseVector, FeatureExtractorOracle, GeneratorOracle, GeneratorSpec, InstanceFeature,
    NoiseVector,
};
use crate::ridge::{self, RidgeModel};
use crate::roi;

/// How the shrinkage strength is chosen for a latent family.
#[derive(Debug, Clone)]
pub enum LambdaChoice {
    Fixed(f64),
    CrossValidated { candidates: Vec<f64>, folds: usize },
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub lambda: LambdaChoice,
    /// Z-score design columns with training mean and population SD.
    pub standardize: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda: LambdaChoice::CrossValidated {
                candidates: vec![0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0],
                folds: 5,
            },
            standardize: true,
        }
    }
}

/// Column scaler learned on training rows; near-constant columns keep unit
/// scale so they cannot blow up the design.
#[derive(Debug, Clone)]
pub struct ColumnScaler {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ColumnScaler {
    pub fn identity(cols: usize) -> Self {
        ColumnScaler {
            mean: vec![0.0; cols],
            sd: vec![1.0; cols],
        }
    }

    pub fn fit(x: &Matrix) -> Self {
        let (n, v) = (x.rows, x.cols);
        let mut mean = vec![0.0; v];
        for r in 0..n {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += x.at(r, c) as f64;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut sd = vec![0.0; v];
        for r in 0..n {
            for (c, s) in sd.iter_mut().enumerate() {
                let d = x.at(r, c) as f64 - mean[c];
                *s += d * d;
            }
        }
        for s in &mut sd {
            *s = (*s / n as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        ColumnScaler { mean, sd }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.mean.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "scaler expects {} columns, got {}",
                    self.mean.len(),
                    x.cols
                ),
            });
        }
        let mut out = Vec::with_capacity(x.rows * x.cols);
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.push((x.at(r, c) as f64 - self.mean[c]) / self.sd[c]);
            }
        }
        Matrix::from_f64(x.rows, x.cols, &out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat = self.mean.clone();
        flat.extend_from_slice(&self.sd);
        dataio::write_matrix(path, &Matrix::from_f64(2, self.mean.len(), &flat)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = dataio::read_matrix(path)?;
        if m.rows != 2 {
            return Err(Error::UnknownFormat {
                path: path.to_path_buf(),
                detail: format!("scaler needs 2 rows, got {}", m.rows),
            });
        }
        Ok(ColumnScaler {
            mean: m.row_f64(0),
            sd: m.row_f64(1),
        })
    }
}

/// The three trained ridge decoders plus the scaler they were fitted under.
#[derive(Debug, Clone)]
pub struct DecoderSet {
    pub model_h: RidgeModel,
    pub model_z: RidgeModel,
    pub model_d: RidgeModel,
    pub scaler: ColumnScaler,
    pub spec: GeneratorSpec,
    /// Shrinkage actually used per family, in (h, z, d) order.
    pub lambdas: [f64; 3],
}

impl DecoderSet {
    fn validate_dims(&self) -> Result<()> {
        let dims = [
            ("h", self.model_h.weights.ncols(), self.spec.h_dim),
            ("z", self.model_z.weights.ncols(), self.spec.z_dim),
            ("d", self.model_d.weights.ncols(), self.spec.dense_dim()),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::ShapeMismatch {
                    context: format!("decoder {name} has {got} targets, spec wants {want}"),
                });
            }
        }
        let v = self.model_h.weights.nrows();
        if self.model_z.weights.nrows() != v
            || self.model_d.weights.nrows() != v
            || self.scaler.mean.len() != v
        {
            return Err(Error::ShapeMismatch {
                context: "decoder voxel counts disagree".into(),
            });
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::IoFailure {
            path: dir.to_path_buf(),
            source: e,
        })?;
        self.model_h.save(dir, "model_h")?;
        self.model_z.save(dir, "model_z")?;
        self.model_d.save(dir, "model_d")?;
        self.scaler.save(&dir.join("scaler.ldm1"))
    }

    pub fn load(dir: &Path, spec: GeneratorSpec) -> Result<DecoderSet> {
        let model_h = RidgeModel::load(dir, "model_h")?;
        let model_z = RidgeModel::load(dir, "model_z")?;
        let model_d = RidgeModel::load(dir, "model_d")?;
        let scaler = ColumnScaler::load(&dir.join("scaler.ldm1"))?;
        let lambdas = [model_h.lambda, model_z.lambda, model_d.lambda];
        let set = DecoderSet {
            model_h,
            model_z,
            model_d,
            scaler,
            spec,
            lambdas,
        };
        set.validate_dims()?;
        Ok(set)
    }
}

/// Stack one latent family (`get` selects it) into a row-per-item matrix.
pub fn family_matrix(
    latents: &[LatentTriple],
    dim: usize,
    name: &str,
    get: impl Fn(&LatentTriple) -> &[f64],
) -> Result<Matrix> {
    let mut flat = Vec::with_capacity(latents.len() * dim);
    for t in latents {
        let row = get(t);
        if row.len() != dim {
            return Err(Error::ShapeMismatch {
                context: format!("latent family {name}: row has {} values, want {dim}", row.len()),
            });
        }
        flat.extend_from_slice(row);
    }
    Matrix::from_f64(latents.len(), dim, &flat)
}

fn fit_family(x: &Matrix, y: &Matrix, choice: &LambdaChoice) -> Result<(RidgeModel, f64)> {
    let lambda = match choice {
        LambdaChoice::Fixed(l) => *l,
        LambdaChoice::CrossValidated { candidates, folds } => {
            ridge::select_lambda(x, y, candidates, *folds)?.0
        }
    };
    Ok((ridge::fit(x, y, lambda)?, lambda))
}

/// Train the three latent decoders on row-aligned responses and latents.
pub fn fit_decoders(
    x_train: &Matrix,
    latents: &[LatentTriple],
    spec: &GeneratorSpec,
    config: &FitConfig,
) -> Result<DecoderSet> {
    if x_train.rows != latents.len() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "{} response rows vs {} latent triples",
                x_train.rows,
                latents.len()
            ),
        });
    }
    if x_train.rows < 2 {
        return Err(Error::TooFewSamples {
            n: x_train.rows,
            need: "at least 2 training rows".into(),
        });
    }
    let y_h = family_matrix(latents, spec.h_dim, "h", |t| t.h.as_slice())?;
    let y_z = family_matrix(latents, spec.z_dim, "z", |t| t.z.as_slice())?;
    let y_d = family_matrix(latents, spec.dense_dim(), "d", |t| t.d.as_slice())?;
    let scaler = if config.standardize {
        ColumnScaler::fit(x_train)
    } else {
        ColumnScaler::identity(x_train.cols)
    };
    let xs = scaler.apply(x_train)?;
    let (model_h, l_h) = fit_family(&xs, &y_h, &config.lambda)?;
    let (model_z, l_z) = fit_family(&xs, &y_z, &config.lambda)?;
    let (model_d, l_d) = fit_family(&xs, &y_d, &config.lambda)?;
    let set = DecoderSet {
        model_h,
        model_z,
        model_d,
        scaler,
        spec: spec.clone(),
        lambdas: [l_h, l_z, l_d],
    };
    set.validate_dims()?;
    Ok(set)
}

/// Decode repetition-averaged test responses into predicted latent triples.
pub fn decode_latents(decoders: &DecoderSet, x_test_avg: &Matrix) -> Result<Vec<LatentTriple>> {
    let xs = decoders.scaler.apply(x_test_avg)?;
    let p_h = decoders.model_h.predict(&xs)?;
    let p_z = decoders.model_z.predict(&xs)?;
    let p_d = decoders.model_d.predict(&xs)?;
    (0..xs.rows)
        .map(|r| {
            Ok(LatentTriple::new(
                InstanceFeature::new(p_h.row_f64(r))?,
                NoiseVector::new(p_z.row_f64(r), decoders.spec.level_dim)?,
                DenseVector::new(p_d.row_f64(r))?,
            ))
        })
        .collect()
}

/// Which latents drive a reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconstructionVariant {
    /// Decoded instance features with freshly sampled noise.
    Random { seed: u64 },
    /// Decoded instance features and decoded noise vector.
    Noise,
    /// All three decoded latents, dense override active.
    Dense,
}

impl ReconstructionVariant {
    pub fn label(&self) -> &'static str {
        match self {
            ReconstructionVariant::Random { .. } => "random",
            ReconstructionVariant::Noise => "noise",
            ReconstructionVariant::Dense => "dense",
        }
    }
}

/// Render one reconstruction from a decoded triple.
pub fn reconstruct(
    gen: &dyn GeneratorOracle,
    triple: &LatentTriple,
    variant: ReconstructionVariant,
) -> Result<ImageTensor> {
    match variant {
        ReconstructionVariant::Dense => {
            gen.generate_from_dense(&triple.h, triple.z.tail(), &triple.d)
        }
        ReconstructionVariant::Noise => gen.generate(&triple.h, &triple.z),
        ReconstructionVariant::Random { seed } => {
            let spec = gen.spec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = (0..spec.z_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            gen.generate(&triple.h, &NoiseVector::new(z, spec.level_dim)?)
        }
    }
}

/// Synthetic closed-loop experiment parameters. Responses are a seeded
/// random linear mixing of the true latents plus Gaussian noise whose
/// standard deviation is RMS(signal) / snr (snr may be infinite).
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_voxels: usize,
    /// Noisy repetitions averaged into each test row.
    pub repetitions: usize,
    /// Amplitude signal-to-noise ratio of single presentations.
    pub snr: f64,
    /// SD of the residual added on top of the dense layer when sampling d,
    /// so the dense family carries information beyond the noise vector.
    pub dense_residual: f64,
    pub seed: u64,
    /// Replace responses with pure noise (chance-level control).
    pub pure_noise: bool,
}

impl SyntheticConfig {
    /// Desk-scale defaults; only the seed is left to the caller.
    pub fn new(seed: u64) -> Self {
        SyntheticConfig {
            n_train: 200,
            n_test: 20,
            n_voxels: 500,
            repetitions: 8,
            snr: 10.0,
            dense_residual: 0.7,
            seed,
            pure_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_test < 2 {
            return Err(Error::Config {
                detail: format!(
                    "synthetic set needs >= 2 train and test items, got {}/{}",
                    self.n_train, self.n_test
                ),
            });
        }
        if self.n_voxels == 0 || self.repetitions == 0 {
            return Err(Error::Config {
                detail: "n_voxels and repetitions must be positive".into(),
            });
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config {
                detail: format!("snr must be positive (may be inf), got {}", self.snr),
            });
        }
        if !self.dense_residual.is_finite() || self.dense_residual < 0.0 {
            return Err(Error::Config {
                detail: format!("dense_residual must be finite >= 0, got {}", self.dense_residual),
            });
        }
        Ok(())
    }
}

/// Fully known-ground-truth dataset produced by `synthesize_dataset`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub x_train: Matrix,
    /// Already repetition-averaged.
    pub x_test: Matrix,
    pub train_latents: Vec<LatentTriple>,
    pub test_latents: Vec<LatentTriple>,
    pub truth_images: Vec<ImageTensor>,
    pub ids: Vec<String>,
}

fn draw_block(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Build the synthetic linear brain: latents, mixed responses, truth images.
pub fn synthesize_dataset(
    gen: &dyn GeneratorOracle,
    config: &SyntheticConfig,
) -> Result<SyntheticDataset> {
    config.validate()?;
    let spec = gen.spec();
    let n = config.n_train + config.n_test;
    let v = config.n_voxels;
    let (hd, zd, dd) = (spec.h_dim, spec.z_dim, spec.dense_dim());
    let latent_dim = hd + zd + dd;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let h_all = draw_block(&mut rng, n * hd);
    let z_all = draw_block(&mut rng, n * zd);
    let d_res = draw_block(&mut rng, n * dd);
    let mut d_all = Vec::with_capacity(n * dd);
    for i in 0..n {
        let z_row = &z_all[i * zd..(i + 1) * zd];
        let head = &z_row[..spec.level_dim];
        let base = gen.dense_layer(head)?;
        for (k, b) in base.as_slice().iter().enumerate() {
            d_all.push(b + config.dense_residual * d_res[i * dd + k]);
        }
    }

    let (x_train_rows, x_test_rows) = if config.pure_noise {
        let tr = draw_block(&mut rng, config.n_train * v);
        let te = draw_block(&mut rng, config.n_test * v);
        (tr, te)
    } else {
        let g = draw_block(&mut rng, v * latent_dim);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let mut clean = Vec::with_capacity(n * v);
        for i in 0..n {
            let (hr, zr, dr) = (
                &h_all[i * hd..(i + 1) * hd],
                &z_all[i * zd..(i + 1) * zd],
                &d_all[i * dd..(i + 1) * dd],
            );
            for k in 0..v {
                let gr = &g[k * latent_dim..(k + 1) * latent_dim];
                let mut acc = 0.0;
                for (j, x) in hr.iter().enumerate() {
                    acc += gr[j] * x;
                }
                for (j, x) in zr.iter().enumerate() {
                    acc += gr[hd + j] * x;
                }
                for (j, x) in dr.iter().enumerate() {
                    acc += gr[hd + zd + j] * x;
                }
                clean.push(acc * scale);
            }
        }
        let mean = clean.iter().sum::<f64>() / clean.len() as f64;
        let var = clean.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
            / clean.len() as f64;
        let sd = if config.snr.is_finite() {
            var.sqrt() / config.snr
        } else {
            0.0
        };
        let tr_noise = draw_block(&mut rng, config.n_train * v);
        let tr: Vec<f64> = clean[..config.n_train * v]
            .iter()
            .zip(&tr_noise)
            .map(|(c, e)| c + sd * e)
            .collect();
        let te_noise = draw_block(&mut rng, config.n_test * config.repetitions * v);
        let mut te = Vec::with_capacity(config.n_test * v);
        for i in 0..config.n_test {
            for k in 0..v {
                let base = clean[(config.n_train + i) * v + k];
                let mut acc = 0.0;
                for rep in 0..config.repetitions {
                    acc += sd * te_noise[(i * config.repetitions + rep) * v + k];
                }
                te.push(base + acc / config.repetitions as f64);
            }
        }
        (tr, te)
    };

    let mut triple_at = |i: usize| -> Result<LatentTriple> {
        Ok(LatentTriple::new(
            InstanceFeature::new(h_all[i * hd..(i + 1) * hd].to_vec())?,
            NoiseVector::new(z_all[i * zd..(i + 1) * zd].to_vec(), spec.level_dim)?,
            DenseVector::new(d_all[i * dd..(i + 1) * dd].to_vec())?,
        ))
    };
    let train_latents: Vec<LatentTriple> =
        (0..config.n_train).map(&mut triple_at).collect::<Result<_>>()?;
    let test_latents: Vec<LatentTriple> = (config.n_train..n)
        .map(&mut triple_at)
        .collect::<Result<_>>()?;
    let truth_images: Vec<ImageTensor> = test_latents
        .iter()
        .map(|t| gen.generate_from_dense(&t.h, t.z.tail(), &t.d))
        .collect::<Result<_>>()?;

    Ok(SyntheticDataset {
        x_train: Matrix::from_f64(config.n_train, v, &x_train_rows)?,
        x_test: Matrix::from_f64(config.n_test, v, &x_test_rows)?,
        train_latents,
        test_latents,
        truth_images,
        ids: (0..config.n_test).map(|i| format!("test_{i:03}")).collect(),
    })
}

/// Flattened Pearson correlation between predicted and true values of one
/// latent family.
pub fn latent_family_correlation(
    pred: &[LatentTriple],
    truth: &[LatentTriple],
    get: impl Fn(&LatentTriple) -> &[f64],
) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            context: format!("{} predictions vs {} truths", pred.len(), truth.len()),
        });
    }
    let a: Vec<f64> = pred.iter().flat_map(|t| get(t).iter().copied()).collect();
    let b: Vec<f64> = truth.iter().flat_map(|t| get(t).iter().copied()).collect();
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(&b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::ZeroVariance {
            context: "latent family correlation".into(),
        });
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Everything `run_experiment` writes and measures.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub lambdas: [f64; 3],
    /// (variant label, metrics) in dense, noise, random order.
    pub reports: Vec<(String, MetricReport)>,
    /// Decoded-vs-true correlation per family (h, z, d).
    pub latent_correlations: [f64; 3],
    pub manifest_path: PathBuf,
    pub manifest_digest: String,
}

/// Orchestration parameters for one experiment run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub fit: FitConfig,
    /// Base seed for the RANDOM variant; item i draws from seed + i.
    pub random_variant_seed: u64,
    pub out_dir: PathBuf,
    /// Hash of the resolved configuration, recorded in the manifest.
    pub config_digest: String,
    /// Named seeds recorded in the manifest.
    pub seeds: Vec<(String, u64)>,
    /// When present, weight-map and ROI-image artifacts join the run output.
    pub roi_masks: Option<Vec<RoiMask>>,
    /// Canonical config text; written as `resolved.cfg` when present.
    pub resolved_config: Option<String>,
}

/// Tracks artifacts so a failed run removes everything it created.
pub struct ArtifactWriter {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::IoFailure {
            path: root.to_path_buf(),
            source: e,
        })?;
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers `rel`, creates parent directories, and returns the full path.
    pub fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::IoFailure {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        self.written.push(p.clone());
        Ok(p)
    }

    /// Registers a path written by code that does not go through `path`,
    /// so cleanup and the manifest still cover it.
    pub fn register(&mut self, p: PathBuf) {
        self.written.push(p);
    }

    pub fn cleanup(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }

    /// Manifest lines for every artifact written so far, sorted by path.
    pub fn checksum_lines(&self) -> Result<Vec<String>> {
        let mut lines = Vec::new();
        for p in &self.written {
            let bytes = fs::read(p).map_err(|e| Error::IoFailure {
                path: p.clone(),
                source: e,
            })?;
            let digest = Sha256::digest(&bytes);
            let rel = p.strip_prefix(&self.root).unwrap_or(p);
            lines.push(format!("file {:x} {}", digest, rel.display()));
        }
        lines.sort();
        Ok(lines)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::IoFailure {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `manifest.txt` covering every artifact registered so far and
/// returns its path and SHA-256 digest. The manifest is the reproducibility
/// witness: identical configs must yield identical digests.
pub fn write_manifest(
    writer: &mut ArtifactWriter,
    config_digest: &str,
    seeds: &[(String, u64)],
    extra_lines: &[String],
) -> Result<(PathBuf, String)> {
    let mut manifest = format!("config-sha256 {config_digest}\n");
    for (name, value) in seeds {
        manifest.push_str(&format!("seed {name} {value}\n"));
    }
    for line in extra_lines {
        manifest.push_str(line);
        manifest.push('\n');
    }
    for line in writer.checksum_lines()? {
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let manifest_path = writer.path("manifest.txt")?;
    write_text(&manifest_path, &manifest)?;
    let digest = format!("{:x}", Sha256::digest(manifest.as_bytes()));
    Ok((manifest_path, digest))
}

/// Reassembles per-item latent triples from the three family matrices
/// (one row per item), checking row counts and widths against `spec`.
pub fn triples_from_matrices(
    h: &Matrix,
    z: &Matrix,
    d: &Matrix,
    spec: &GeneratorSpec,
) -> Result<Vec<LatentTriple>> {
    let checks = [
        ("h", h.cols, spec.h_dim, h.rows),
        ("z", z.cols, spec.z_dim, z.rows),
        ("d", d.cols, spec.dense_dim(), d.rows),
    ];
    for (name, got, want, rows) in checks {
        if got != want {
            return Err(Error::ShapeMismatch {
                context: format!("latent family {name}: expected {want} columns, got {got}"),
            });
        }
        if rows != h.rows {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "latent family {name}: expected {} rows, got {rows}",
                    h.rows
                ),
            });
        }
    }
    (0..h.rows)
        .map(|i| {
            Ok(LatentTriple::new(
                InstanceFeature::new(h.row_f64(i))?,
                NoiseVector::new(z.row_f64(i), spec.level_dim)?,
                DenseVector::new(d.row_f64(i))?,
            ))
        })
        .collect()
}

/// Writes the weight-percentile map, the per-ROI summary, and one maximizing
/// image per ROI under `writer`.
pub fn write_roi_artifacts(
    writer: &mut ArtifactWriter,
    decoders: &DecoderSet,
    gen: &dyn GeneratorOracle,
    masks: &[RoiMask],
) -> Result<()> {
    let stats = roi::weight_percentile_map(decoders)?;
    write_text(&writer.path("roi/weight_map.csv")?, &stats.to_csv())?;
    let summaries = roi::roi_summary(&stats, masks)?;
    let mut csv = String::from("roi,mean_diff,se_diff,n_voxels\n");
    for s in &summaries {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            s.name, s.mean_diff, s.se_diff, s.n_voxels
        ));
    }
    write_text(&writer.path("roi/roi_summary.csv")?, &csv)?;
    for mask in masks {
        let img = roi::roi_maximize(decoders, gen, mask)?;
        dataio::write_ppm(&writer.path(&format!("roi/{}.ppm", mask.name))?, &img)?;
    }
    Ok(())
}

/// Run the full closed-loop experiment and write all artifacts plus a
/// manifest under `config.out_dir`. Deterministic given config and seeds;
/// partial outputs are removed on failure.
pub fn run_experiment(
    dataset: &SyntheticDataset,
    gen: &dyn GeneratorOracle,
    feat: &dyn FeatureExtractorOracle,
    config: &RunConfig,
) -> Result<ExperimentReport> {
    let mut writer = ArtifactWriter::new(&config.out_dir)?;
    match run_experiment_inner(dataset, gen, feat, config, &mut writer) {
        Ok(report) => Ok(report),
        Err(e) => {
            writer.cleanup();
            Err(e)
        }
    }
}

fn run_experiment_inner(
    dataset: &SyntheticDataset,
    gen: &dyn GeneratorOracle,
    feat: &dyn FeatureExtractorOracle,
    config: &RunConfig,
    writer: &mut ArtifactWriter,
) -> Result<ExperimentReport> {
    if let Some(text) = &config.resolved_config {
        write_text(&writer.path("resolved.cfg")?, text)?;
    }
    let spec = gen.spec();
    let decoders = fit_decoders(&dataset.x_train, &dataset.train_latents, spec, &config.fit)?;
    let decoders_dir = config.out_dir.join("decoders");
    for prefix in ["model_h", "model_z", "model_d"] {
        for suffix in ["weights.ldm1", "bias.ldm1", "x_mean.ldm1", "y_mean.ldm1", "meta.txt"] {
            writer.register(decoders_dir.join(format!("{prefix}_{suffix}")));
        }
    }
    writer.register(decoders_dir.join("scaler.ldm1"));
    decoders.save(&decoders_dir)?;

    dataio::write_matrix(&writer.path("responses/x_train.ldm1")?, &dataset.x_train)?;
    dataio::write_matrix(&writer.path("responses/x_test.ldm1")?, &dataset.x_test)?;

    let predicted = decode_latents(&decoders, &dataset.x_test)?;
    let latent_files: [(&str, usize, fn(&LatentTriple) -> &[f64]); 3] = [
        ("h", spec.h_dim, |t| t.h.as_slice()),
        ("z", spec.z_dim, |t| t.z.as_slice()),
        ("d", spec.dense_dim(), |t| t.d.as_slice()),
    ];
    for (name, dim, get) in latent_files {
        dataio::write_matrix(
            &writer.path(&format!("latents_train/{name}.ldm1"))?,
            &family_matrix(&dataset.train_latents, dim, name, get)?,
        )?;
        dataio::write_matrix(
            &writer.path(&format!("latents/pred_{name}.ldm1"))?,
            &family_matrix(&predicted, dim, name, get)?,
        )?;
        dataio::write_matrix(
            &writer.path(&format!("latents/true_{name}.ldm1"))?,
            &family_matrix(&dataset.test_latents, dim, name, get)?,
        )?;
    }

    let latent_correlations = [
        latent_family_correlation(&predicted, &dataset.test_latents, |t| t.h.as_slice())?,
        latent_family_correlation(&predicted, &dataset.test_latents, |t| t.z.as_slice())?,
        latent_family_correlation(&predicted, &dataset.test_latents, |t| t.d.as_slice())?,
    ];

    for (id, img) in dataset.ids.iter().zip(&dataset.truth_images) {
        dataio::write_ppm(&writer.path(&format!("recon/{id}_truth.ppm"))?, img)?;
    }
    let mut reports = Vec::new();
    let mut csv = String::from("item_id,metric,variant,value\n");
    for base in [
        ReconstructionVariant::Dense,
        ReconstructionVariant::Noise,
        ReconstructionVariant::Random { seed: 0 },
    ] {
        let mut recons = Vec::with_capacity(predicted.len());
        for (i, triple) in predicted.iter().enumerate() {
            let variant = match base {
                ReconstructionVariant::Random { .. } => ReconstructionVariant::Random {
                    seed: config.random_variant_seed.wrapping_add(i as u64),
                },
                other => other,
            };
            recons.push(reconstruct(gen, triple, variant)?);
        }
        for (id, img) in dataset.ids.iter().zip(&recons) {
            dataio::write_ppm(
                &writer.path(&format!("recon/{id}_{}.ppm", base.label()))?,
                img,
            )?;
        }
        let report = metrics::evaluate_reconstructions(&recons, &dataset.truth_images, feat)?;
        for (item, metric, value) in report.rows(&dataset.ids) {
            csv.push_str(&format!("{item},{metric},{},{value}\n", base.label()));
        }
        reports.push((base.label().to_string(), report));
    }
    for (i, family) in ["h", "z", "d"].iter().enumerate() {
        csv.push_str(&format!(
            "summary,latent_r_{family},-,{}\n",
            latent_correlations[i]
        ));
    }
    write_text(&writer.path("metrics.csv")?, &csv)?;

    if let Some(masks) = &config.roi_masks {
        write_roi_artifacts(writer, &decoders, gen, masks)?;
    }

    let lambda_line = format!(
        "lambda h {} z {} d {}",
        decoders.lambdas[0], decoders.lambdas[1], decoders.lambdas[2]
    );
    let (manifest_path, manifest_digest) =
        write_manifest(writer, &config.config_digest, &config.seeds, &[lambda_line])?;

    Ok(ExperimentReport {
        lambdas: decoders.lambdas,
        reports,
        latent_correlations,
        manifest_path,
        manifest_digest,
    })
}
