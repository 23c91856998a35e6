//! Flat sectioned run configuration: `[section]` headers and one typed
//! `key = value` per line, `#` comments, UTF-8. No nesting, so files diff
//! cleanly and parse trivially anywhere.
//!
//! Every random choice in a run flows from a seed named here; a command
//! that needs a seed which is absent fails with a config error rather than
//! inventing one. Unknown sections or keys are rejected outright so typos
//! surface before any compute.

use latentdecode::error::{Error, Result};
use latentdecode::oracle::GeneratorSpec;
use latentdecode::pipeline::{FitConfig, LambdaChoice, SyntheticConfig};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

fn config_err(detail: impl Into<String>) -> Error {
    Error::Config {
        detail: detail.into(),
    }
}

/// Parsed but untyped config: section -> key -> raw value string.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(config_err(format!("config file not found: {}", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::IoFailure {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |what: &str| {
                config_err(format!("config line {}: {what}: {raw:?}", lineno + 1))
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(err("empty section name"));
                }
                sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(err("empty key or value"));
            }
            let section = current
                .as_ref()
                .ok_or_else(|| err("key before any [section] header"))?;
            let entries = sections.get_mut(section).expect("section registered");
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(config_err(format!(
                    "config line {}: duplicate key {key:?} in [{section}]",
                    lineno + 1
                )));
            }
        }
        Ok(RawConfig { sections })
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| config_err(format!("missing required key [{section}] {key}")))
    }

    fn parse_value<T: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            config_err(format!(
                "[{section}] {key}: cannot parse {raw:?} as {}",
                std::any::type_name::<T>()
            ))
        })
    }

    fn req_u64(&self, section: &str, key: &str) -> Result<u64> {
        Self::parse_value(section, key, self.require(section, key)?)
    }

    fn opt_usize(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.get(section, key) {
            Some(raw) => Self::parse_value(section, key, raw),
            None => Ok(default),
        }
    }

    fn opt_f64(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        let v = match self.get(section, key) {
            Some(raw) => Self::parse_value::<f64>(section, key, raw)?,
            None => default,
        };
        if v.is_nan() {
            return Err(config_err(format!("[{section}] {key}: NaN is not a value")));
        }
        Ok(v)
    }

    fn opt_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(raw) => Err(config_err(format!(
                "[{section}] {key}: expected true or false, got {raw:?}"
            ))),
            None => Ok(default),
        }
    }

    fn opt_path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.get(section, key).map(PathBuf::from)
    }

    /// Rejects keys outside the declared schema for `section`.
    fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<()> {
        if let Some(entries) = self.sections.get(section) {
            for key in entries.keys() {
                if !allowed.contains(&key.as_str()) {
                    return Err(config_err(format!("unknown key {key:?} in [{section}]")));
                }
            }
        }
        Ok(())
    }

    /// Canonical text: sections and keys sorted, comments stripped, and the
    /// `[output]` section dropped so the digest identifies the experiment
    /// rather than where its artifacts land.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (section, entries) in &self.sections {
            if section == "output" || entries.is_empty() {
                continue;
            }
            out.push_str(&format!("[{section}]\n"));
            for (key, value) in entries {
                out.push_str(&format!("{key} = {value}\n"));
            }
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical().as_bytes()))
    }
}

/// Where the voxel data comes from: generated on the fly or read from disk.
#[derive(Debug, Clone)]
pub enum DataSection {
    Synthetic(SyntheticConfig),
    Paths(PathsSection),
}

/// File-based inputs; each command requires the subset it consumes.
#[derive(Debug, Clone, Default)]
pub struct PathsSection {
    pub x_train: Option<PathBuf>,
    pub x_test: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub latents_dir: Option<PathBuf>,
    pub decoders_dir: Option<PathBuf>,
    pub recon_dir: Option<PathBuf>,
    pub truth_dir: Option<PathBuf>,
    /// Consecutive test trials per stimulus; rows are averaged in blocks.
    pub repetitions: usize,
}

/// Stage-1/stage-2 inversion budgets for `extract`.
#[derive(Debug, Clone)]
pub struct InversionSection {
    pub seed: u64,
    pub max_evals: usize,
    pub population_multiplier: usize,
    pub restarts: usize,
    /// Absolute stage-1 target loss; NEG_INFINITY runs the full budget.
    pub f_tol: f64,
    pub stage2_learning_rate: f64,
    pub stage2_steps: usize,
}

/// Fully typed and validated run configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub generator_seed: u64,
    pub extractor_seed: u64,
    pub spec: GeneratorSpec,
    pub data: DataSection,
    pub fit: FitConfig,
    pub inversion: Option<InversionSection>,
    pub metrics_enabled: bool,
    pub roi_masks: Option<PathBuf>,
    pub random_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// SHA-256 of the canonical config text; recorded in every manifest.
    pub digest: String,
    /// Canonical config text, written alongside artifacts for provenance.
    pub canonical: String,
}

const SYNTHETIC_KEYS: &[&str] = &[
    "source",
    "seed",
    "n_train",
    "n_test",
    "n_voxels",
    "repetitions",
    "snr",
    "dense_residual",
    "pure_noise",
];
const PATH_KEYS: &[&str] = &[
    "source",
    "x_train",
    "x_test",
    "images",
    "latents_dir",
    "decoders_dir",
    "recon_dir",
    "truth_dir",
    "repetitions",
];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        for section in raw.sections.keys() {
            if !["oracle", "data", "ridge", "inversion", "metrics", "roi", "variants", "output"]
                .contains(&section.as_str())
            {
                return Err(config_err(format!("unknown section [{section}]")));
            }
        }

        raw.check_keys("oracle", &["preset", "generator_seed", "extractor_seed"])?;
        let preset = raw.require("oracle", "preset")?;
        let spec = match preset {
            "toy" => GeneratorSpec::toy(),
            other => return Err(config_err(format!("unknown oracle preset {other:?}"))),
        };
        let generator_seed = raw.req_u64("oracle", "generator_seed")?;
        let extractor_seed = raw.req_u64("oracle", "extractor_seed")?;

        let data = Self::data_section(raw)?;
        let fit = Self::ridge_section(raw)?;
        let inversion = Self::inversion_section(raw)?;

        raw.check_keys("metrics", &["enabled"])?;
        let metrics_enabled = raw.opt_bool("metrics", "enabled", true)?;

        raw.check_keys("roi", &["enabled", "masks"])?;
        let roi_enabled = raw.opt_bool("roi", "enabled", false)?;
        let roi_masks = if roi_enabled {
            let masks = raw
                .opt_path("roi", "masks")
                .ok_or_else(|| config_err("[roi] enabled but no masks path given"))?;
            if !masks.exists() {
                return Err(config_err(format!(
                    "[roi] masks file not found: {}",
                    masks.display()
                )));
            }
            Some(masks)
        } else {
            None
        };

        raw.check_keys("variants", &["random_seed"])?;
        let random_seed = match raw.get("variants", "random_seed") {
            Some(_) => Some(raw.req_u64("variants", "random_seed")?),
            None => None,
        };

        raw.check_keys("output", &["dir"])?;
        let output_dir = raw.opt_path("output", "dir");

        Ok(ExperimentConfig {
            generator_seed,
            extractor_seed,
            spec,
            data,
            fit,
            inversion,
            metrics_enabled,
            roi_masks,
            random_seed,
            output_dir,
            digest: raw.digest(),
            canonical: raw.canonical(),
        })
    }

    fn data_section(raw: &RawConfig) -> Result<DataSection> {
        match raw.require("data", "source")? {
            "synthetic" => {
                raw.check_keys("data", SYNTHETIC_KEYS)?;
                let seed = raw.req_u64("data", "seed")?;
                let mut cfg = SyntheticConfig::new(seed);
                cfg.n_train = raw.opt_usize("data", "n_train", cfg.n_train)?;
                cfg.n_test = raw.opt_usize("data", "n_test", cfg.n_test)?;
                cfg.n_voxels = raw.opt_usize("data", "n_voxels", cfg.n_voxels)?;
                cfg.repetitions = raw.opt_usize("data", "repetitions", cfg.repetitions)?;
                cfg.snr = raw.opt_f64("data", "snr", cfg.snr)?;
                cfg.dense_residual = raw.opt_f64("data", "dense_residual", cfg.dense_residual)?;
                cfg.pure_noise = raw.opt_bool("data", "pure_noise", cfg.pure_noise)?;
                cfg.validate()?;
                Ok(DataSection::Synthetic(cfg))
            }
            "paths" => {
                raw.check_keys("data", PATH_KEYS)?;
                let repetitions = raw.opt_usize("data", "repetitions", 1)?;
                if repetitions == 0 {
                    return Err(config_err("[data] repetitions must be at least 1"));
                }
                Ok(DataSection::Paths(PathsSection {
                    x_train: raw.opt_path("data", "x_train"),
                    x_test: raw.opt_path("data", "x_test"),
                    images: raw.opt_path("data", "images"),
                    latents_dir: raw.opt_path("data", "latents_dir"),
                    decoders_dir: raw.opt_path("data", "decoders_dir"),
                    recon_dir: raw.opt_path("data", "recon_dir"),
                    truth_dir: raw.opt_path("data", "truth_dir"),
                    repetitions,
                }))
            }
            other => Err(config_err(format!(
                "[data] source must be \"synthetic\" or \"paths\", got {other:?}"
            ))),
        }
    }

    fn ridge_section(raw: &RawConfig) -> Result<FitConfig> {
        raw.check_keys("ridge", &["lambda", "lambda_grid", "folds", "zscore"])?;
        let mut fit = FitConfig::default();
        fit.standardize = raw.opt_bool("ridge", "zscore", true)?;
        let fixed = raw.get("ridge", "lambda");
        let grid = raw.get("ridge", "lambda_grid");
        fit.lambda = match (fixed, grid) {
            (Some(_), Some(_)) => {
                return Err(config_err("[ridge] give either lambda or lambda_grid, not both"))
            }
            (Some(_), None) => {
                if raw.get("ridge", "folds").is_some() {
                    return Err(config_err("[ridge] folds applies only to lambda_grid"));
                }
                LambdaChoice::Fixed(raw.opt_f64("ridge", "lambda", 1.0)?)
            }
            (None, Some(list)) => {
                let candidates = list
                    .split(',')
                    .map(|tok| {
                        RawConfig::parse_value::<f64>("ridge", "lambda_grid", tok.trim())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                LambdaChoice::CrossValidated {
                    candidates,
                    folds: raw.opt_usize("ridge", "folds", 5)?,
                }
            }
            (None, None) => fit.lambda,
        };
        Ok(fit)
    }

    fn inversion_section(raw: &RawConfig) -> Result<Option<InversionSection>> {
        if !raw.sections.contains_key("inversion") {
            return Ok(None);
        }
        raw.check_keys(
            "inversion",
            &[
                "seed",
                "max_evals",
                "population_multiplier",
                "restarts",
                "f_tol",
                "stage2_learning_rate",
                "stage2_steps",
            ],
        )?;
        let section = InversionSection {
            seed: raw.req_u64("inversion", "seed")?,
            max_evals: raw.opt_usize("inversion", "max_evals", 20_000)?,
            population_multiplier: raw.opt_usize("inversion", "population_multiplier", 1)?,
            restarts: raw.opt_usize("inversion", "restarts", 0)?,
            f_tol: raw.opt_f64("inversion", "f_tol", f64::NEG_INFINITY)?,
            stage2_learning_rate: raw.opt_f64("inversion", "stage2_learning_rate", 1e-3)?,
            stage2_steps: raw.opt_usize("inversion", "stage2_steps", 200)?,
        };
        if section.population_multiplier == 0 {
            return Err(config_err("[inversion] population_multiplier must be at least 1"));
        }
        Ok(Some(section))
    }

    /// Seeds recorded in every manifest, in a fixed order.
    pub fn seed_lines(&self) -> Vec<(String, u64)> {
        let mut seeds = vec![
            ("generator".to_string(), self.generator_seed),
            ("extractor".to_string(), self.extractor_seed),
        ];
        if let DataSection::Synthetic(cfg) = &self.data {
            seeds.push(("data".to_string(), cfg.seed));
        }
        if let Some(inv) = &self.inversion {
            seeds.push(("inversion".to_string(), inv.seed));
        }
        if let Some(seed) = self.random_seed {
            seeds.push(("random_variant".to_string(), seed));
        }
        seeds
    }
}
