//! The six subcommands. Each validates its config slice, takes the output
//! lock, writes artifacts through an `ArtifactWriter` (so failures leave no
//! partial output), and finishes with a manifest that checksums everything.

use crate::config::{DataSection, ExperimentConfig, InversionSection, PathsSection};
use latentdecode::dataio::{self, ImageTensor, Matrix};
use latentdecode::error::{Error, Result};
use latentdecode::inversion::{extract_latents, InversionConfig, LatentTriple};
use latentdecode::metrics;
use latentdecode::oracle::{ToyFeatureExtractor, ToyGenerator};
use latentdecode::pipeline::{
    self, decode_latents, family_matrix, fit_decoders, reconstruct, run_experiment,
    synthesize_dataset, ArtifactWriter, DecoderSet, ReconstructionVariant, RunConfig,
};
use std::fs;
use std::path::{Path, PathBuf};

fn config_err(detail: impl Into<String>) -> Error {
    Error::Config {
        detail: detail.into(),
    }
}

/// Everything a command needs beyond its positional name.
pub struct CommandContext {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub verbose: bool,
}

impl CommandContext {
    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("[latentdecode] {msg}");
        }
    }

    fn oracles(&self) -> Result<(ToyGenerator, ToyFeatureExtractor)> {
        Ok((
            ToyGenerator::new(self.config.spec.clone(), self.config.generator_seed)?,
            ToyFeatureExtractor::new(self.config.spec.clone(), self.config.extractor_seed)?,
        ))
    }

    fn paths(&self) -> Result<&PathsSection> {
        match &self.config.data {
            DataSection::Paths(p) => Ok(p),
            DataSection::Synthetic(_) => Err(config_err(
                "this command reads files; set [data] source = paths",
            )),
        }
    }

    fn random_seed(&self) -> Result<u64> {
        self.config
            .random_seed
            .ok_or_else(|| config_err("missing required key [variants] random_seed"))
    }

    fn inversion(&self) -> Result<&InversionSection> {
        self.config
            .inversion
            .as_ref()
            .ok_or_else(|| config_err("extract requires an [inversion] section"))
    }
}

fn require_path<'a>(
    slot: &'a Option<PathBuf>,
    key: &str,
) -> Result<&'a Path> {
    slot.as_deref()
        .ok_or_else(|| config_err(format!("missing required key [data] {key}")))
}

/// Serializes runs per output directory. The file is removed on drop; a
/// leftover `.lock` from a killed process must be deleted by hand.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir).map_err(|e| Error::IoFailure {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(config_err(format!(
                "output directory {} is locked by another run (stale? remove {})",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::IoFailure { path, source: e }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Runs `body` against a fresh writer; removes everything on failure and
/// seals a manifest on success.
fn with_artifacts(
    ctx: &CommandContext,
    body: impl FnOnce(&mut ArtifactWriter) -> Result<Vec<String>>,
) -> Result<String> {
    let _lock = DirLock::acquire(&ctx.out_dir)?;
    let mut writer = ArtifactWriter::new(&ctx.out_dir)?;
    let sealed = (|| {
        pipeline::write_text(&writer.path("resolved.cfg")?, &ctx.config.canonical)?;
        let extra = body(&mut writer)?;
        pipeline::write_manifest(&mut writer, &ctx.config.digest, &ctx.config.seed_lines(), &extra)
    })();
    match sealed {
        Ok((path, digest)) => {
            println!("manifest {} sha256 {digest}", path.display());
            Ok(digest)
        }
        Err(e) => {
            writer.cleanup();
            Err(e)
        }
    }
}

fn latent_writers(
    spec: &latentdecode::oracle::GeneratorSpec,
) -> [(&'static str, usize, fn(&LatentTriple) -> &[f64]); 3] {
    [
        ("h", spec.h_dim, |t| t.h.as_slice()),
        ("z", spec.z_dim, |t| t.z.as_slice()),
        ("d", spec.dense_dim(), |t| t.d.as_slice()),
    ]
}

fn write_latent_files(
    writer: &mut ArtifactWriter,
    spec: &latentdecode::oracle::GeneratorSpec,
    triples: &[LatentTriple],
    prefix: &str,
) -> Result<()> {
    for (name, dim, get) in latent_writers(spec) {
        dataio::write_matrix(
            &writer.path(&format!("latents/{prefix}{name}.ldm1"))?,
            &family_matrix(triples, dim, name, get)?,
        )?;
    }
    Ok(())
}

fn read_latent_dir(dir: &Path, spec: &latentdecode::oracle::GeneratorSpec) -> Result<Vec<LatentTriple>> {
    let read = |name: &str| -> Result<Matrix> {
        let path = dir.join(format!("{name}.ldm1"));
        if !path.exists() {
            return Err(Error::UpstreamMissing {
                detail: format!("latent file {} (run extract or synthetic first)", path.display()),
            });
        }
        dataio::read_matrix(&path)
    };
    pipeline::triples_from_matrices(&read("h")?, &read("z")?, &read("d")?, spec)
}

/// Sorted `(stem, image)` pairs for every `.ppm` directly inside `dir`.
fn read_image_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    if !dir.is_dir() {
        return Err(Error::UpstreamMissing {
            detail: format!("image directory {} does not exist", dir.display()),
        });
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::IoFailure {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::IoFailure {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::UpstreamMissing {
            detail: format!("no .ppm images in {}", dir.display()),
        });
    }
    names
        .into_iter()
        .map(|name| {
            let image = dataio::read_ppm(&dir.join(&name))?;
            Ok((name.trim_end_matches(".ppm").to_string(), image))
        })
        .collect()
}

fn item_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("test_{i:03}")).collect()
}

/// Two-stage latent extraction from a directory of images.
pub fn cmd_extract(ctx: &CommandContext) -> Result<()> {
    let images_dir = require_path(&ctx.paths()?.images, "images")?;
    let inv = ctx.inversion()?;
    let (gen, feat) = ctx.oracles()?;
    let spec = ctx.config.spec.clone();

    let mut config = InversionConfig::new(spec.z_dim, inv.max_evals, inv.seed);
    config.cmaes.population *= inv.population_multiplier;
    config.cmaes.f_tol = inv.f_tol;
    config.stage1_restarts = inv.restarts;
    config.stage2.learning_rate = inv.stage2_learning_rate;
    config.stage2.steps = inv.stage2_steps;

    let named = read_image_dir(images_dir)?;
    ctx.note(&format!("extracting latents from {} images", named.len()));
    let images: Vec<ImageTensor> = named.iter().map(|(_, img)| img.clone()).collect();
    let triples = extract_latents(&images, &gen, &feat, &config)?;

    with_artifacts(ctx, |writer| {
        write_latent_files(writer, &spec, &triples, "")?;
        let mut csv = String::from("item_id,stage1_loss,stage2_loss\n");
        for ((id, _), t) in named.iter().zip(&triples) {
            let s1 = t.stage1_loss.expect("extract_latents records stage losses");
            let s2 = t.stage2_loss.expect("extract_latents records stage losses");
            csv.push_str(&format!("{id},{s1},{s2}\n"));
        }
        pipeline::write_text(&writer.path("extraction.csv")?, &csv)?;
        Ok(vec![])
    })?;
    Ok(())
}

/// Fit the three ridge decoders from saved responses and latents.
pub fn cmd_fit(ctx: &CommandContext) -> Result<()> {
    let paths = ctx.paths()?;
    let x_path = require_path(&paths.x_train, "x_train")?;
    let latents_dir = require_path(&paths.latents_dir, "latents_dir")?;
    if !x_path.exists() {
        return Err(Error::UpstreamMissing {
            detail: format!("training responses {} do not exist", x_path.display()),
        });
    }
    let x_train = dataio::read_matrix(x_path)?;
    let triples = read_latent_dir(latents_dir, &ctx.config.spec)?;
    ctx.note(&format!(
        "fitting decoders on {} samples x {} voxels",
        x_train.rows, x_train.cols
    ));
    let decoders = fit_decoders(&x_train, &triples, &ctx.config.spec, &ctx.config.fit)?;

    with_artifacts(ctx, |writer| {
        let dir = writer.root().join("decoders");
        for prefix in ["model_h", "model_z", "model_d"] {
            for suffix in ["weights.ldm1", "bias.ldm1", "x_mean.ldm1", "y_mean.ldm1", "meta.txt"] {
                writer.register(dir.join(format!("{prefix}_{suffix}")));
            }
        }
        writer.register(dir.join("scaler.ldm1"));
        decoders.save(&dir)?;
        Ok(vec![format!(
            "lambda h {} z {} d {}",
            decoders.lambdas[0], decoders.lambdas[1], decoders.lambdas[2]
        )])
    })?;
    Ok(())
}

/// Decode latents from held-out responses and render all three variants.
pub fn cmd_decode(ctx: &CommandContext) -> Result<()> {
    let paths = ctx.paths()?;
    let x_path = require_path(&paths.x_test, "x_test")?;
    let decoders_dir = require_path(&paths.decoders_dir, "decoders_dir")?;
    let random_seed = ctx.random_seed()?;
    let (gen, _) = ctx.oracles()?;

    let decoders = DecoderSet::load(decoders_dir, ctx.config.spec.clone())?;
    let trials = dataio::read_matrix(x_path)?;
    let reps = paths.repetitions;
    if trials.rows % reps != 0 {
        return Err(Error::ShapeMismatch {
            context: format!("{} trial rows not divisible by {reps} repetitions", trials.rows),
        });
    }
    let ids = item_ids(trials.rows / reps);
    let x_test = if reps == 1 {
        trials
    } else {
        let trial_ids: Vec<String> = ids
            .iter()
            .flat_map(|id| std::iter::repeat(id.clone()).take(reps))
            .collect();
        dataio::average_repetitions(&trials, &trial_ids)?.0
    };
    ctx.note(&format!("decoding {} test items", ids.len()));
    let predicted = decode_latents(&decoders, &x_test)?;

    with_artifacts(ctx, |writer| {
        write_latent_files(writer, &ctx.config.spec, &predicted, "pred_")?;
        for base in [
            ReconstructionVariant::Dense,
            ReconstructionVariant::Noise,
            ReconstructionVariant::Random { seed: 0 },
        ] {
            for (i, (id, triple)) in ids.iter().zip(&predicted).enumerate() {
                let variant = match base {
                    ReconstructionVariant::Random { .. } => ReconstructionVariant::Random {
                        seed: random_seed.wrapping_add(i as u64),
                    },
                    other => other,
                };
                let img = reconstruct(&gen, triple, variant)?;
                dataio::write_ppm(&writer.path(&format!("recon/{id}_{}.ppm", base.label()))?, &img)?;
            }
        }
        Ok(vec![])
    })?;
    Ok(())
}

const VARIANT_LABELS: [&str; 3] = ["dense", "noise", "random"];

/// Score saved reconstructions against saved ground-truth images.
pub fn cmd_evaluate(ctx: &CommandContext) -> Result<()> {
    if !ctx.config.metrics_enabled {
        return Err(config_err("evaluate requires [metrics] enabled = true"));
    }
    let paths = ctx.paths()?;
    let recon_dir = require_path(&paths.recon_dir, "recon_dir")?;
    let truth_dir = require_path(&paths.truth_dir, "truth_dir")?;
    let (_, feat) = ctx.oracles()?;

    let mut ids = Vec::new();
    let mut truths = Vec::new();
    for (stem, image) in read_image_dir(truth_dir)? {
        if let Some(id) = stem.strip_suffix("_truth") {
            ids.push(id.to_string());
            truths.push(image);
        }
    }
    if ids.is_empty() {
        return Err(Error::UpstreamMissing {
            detail: format!("no *_truth.ppm images in {}", truth_dir.display()),
        });
    }

    let mut scored: Vec<(&str, Vec<ImageTensor>)> = Vec::new();
    for label in VARIANT_LABELS {
        let files: Vec<PathBuf> = ids
            .iter()
            .map(|id| recon_dir.join(format!("{id}_{label}.ppm")))
            .collect();
        let present = files.iter().filter(|p| p.exists()).count();
        if present == 0 {
            continue;
        }
        if present < files.len() {
            let missing = files.iter().find(|p| !p.exists()).expect("some file is missing");
            return Err(Error::UpstreamMissing {
                detail: format!("variant {label} is incomplete: {} not found", missing.display()),
            });
        }
        let images = files
            .iter()
            .map(|p| dataio::read_ppm(p))
            .collect::<Result<Vec<_>>>()?;
        scored.push((label, images));
    }
    if scored.is_empty() {
        return Err(Error::UpstreamMissing {
            detail: format!("no reconstruction variants found in {}", recon_dir.display()),
        });
    }

    with_artifacts(ctx, |writer| {
        let mut csv = String::from("item_id,metric,variant,value\n");
        for (label, recons) in &scored {
            ctx.note(&format!("scoring {} items for variant {label}", recons.len()));
            let report = metrics::evaluate_reconstructions(recons, &truths, &feat)?;
            for (item, metric, value) in report.rows(&ids) {
                csv.push_str(&format!("{item},{metric},{label},{value}\n"));
            }
        }
        pipeline::write_text(&writer.path("metrics.csv")?, &csv)?;
        Ok(vec![])
    })?;
    Ok(())
}

/// Weight-percentile map plus per-ROI summaries and maximizing images.
pub fn cmd_roi(ctx: &CommandContext) -> Result<()> {
    let decoders_dir = require_path(&ctx.paths()?.decoders_dir, "decoders_dir")?;
    let masks_path = ctx
        .config
        .roi_masks
        .as_deref()
        .ok_or_else(|| config_err("roi requires [roi] enabled = true with a masks path"))?;
    let (gen, _) = ctx.oracles()?;
    let decoders = DecoderSet::load(decoders_dir, ctx.config.spec.clone())?;
    let masks = dataio::read_roi_masks(masks_path, decoders.scaler.mean.len())?;
    ctx.note(&format!("maximizing {} ROIs", masks.len()));

    with_artifacts(ctx, |writer| {
        pipeline::write_roi_artifacts(writer, &decoders, &gen, &masks)?;
        Ok(vec![])
    })?;
    Ok(())
}

/// Full closed-loop experiment on a synthetic linear brain.
pub fn cmd_synthetic(ctx: &CommandContext) -> Result<()> {
    let syn = match &ctx.config.data {
        DataSection::Synthetic(s) => s.clone(),
        DataSection::Paths(_) => {
            return Err(config_err("synthetic requires [data] source = synthetic"))
        }
    };
    let random_seed = ctx.random_seed()?;
    let roi_masks = match &ctx.config.roi_masks {
        Some(path) => Some(dataio::read_roi_masks(path, syn.n_voxels)?),
        None => None,
    };
    let (gen, feat) = ctx.oracles()?;
    ctx.note(&format!(
        "synthesizing {} train / {} test items over {} voxels",
        syn.n_train, syn.n_test, syn.n_voxels
    ));
    let dataset = synthesize_dataset(&gen, &syn)?;

    let _lock = DirLock::acquire(&ctx.out_dir)?;
    let run = RunConfig {
        fit: ctx.config.fit.clone(),
        random_variant_seed: random_seed,
        out_dir: ctx.out_dir.clone(),
        config_digest: ctx.config.digest.clone(),
        seeds: ctx.config.seed_lines(),
        roi_masks,
        resolved_config: Some(ctx.config.canonical.clone()),
    };
    let report = run_experiment(&dataset, &gen, &feat, &run)?;
    for (label, metrics) in &report.reports {
        ctx.note(&format!(
            "variant {label}: pix-comp {:.1}% ssim {:.4}",
            metrics.pix_comp, metrics.ssim_mean
        ));
    }
    println!(
        "manifest {} sha256 {}",
        report.manifest_path.display(),
        report.manifest_digest
    );
    Ok(())
}
