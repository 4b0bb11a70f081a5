//! Run configuration: the JSON a command is started from, and its resolved
//! echo with every default written out.

use std::path::PathBuf;

use cpgm::aae::{AaeConfig, AaeVariant};
use cpgm::data::{downscale, gen_noise_dataset, load_idx, make_split, SplitSpec, UnknownSource, UNKNOWN_LABEL};
use cpgm::detector::DEFAULT_COVERAGE;
use cpgm::eval::{AblationMode, GlyphSweepSpec, OpennessSpec, SweepData, TrainSettings, UnknownClass};
use cpgm::model::ModelKind;
use cpgm::rng;
use cpgm::vae::VaeConfig;
use cpgm::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model_kind: ModelKind,
    pub dataset: DatasetConfig,
    /// Required for `cpgm_vae` and `cnn`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae: Option<VaeConfig>,
    /// Required for `cpgm_aae`, `variant1` and `variant2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aae: Option<AaeConfig>,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    /// Ablation mode used by `eval`; `full` unless set.
    #[serde(default = "default_mode")]
    pub eval_mode: AblationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds model initialisation and training; overrides the model
    /// config's own seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> AblationMode {
    AblationMode::Full
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(default = "default_tau_l")]
    pub tau_l: f64,
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    /// Fixed reconstruction threshold instead of the calibrated one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_r: Option<f64>,
}

fn default_tau_l() -> f64 {
    0.5
}

fn default_coverage() -> f64 {
    DEFAULT_COVERAGE
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { tau_l: default_tau_l(), coverage: default_coverage(), tau_r: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub openness: OpennessSpec,
    pub modes: Vec<AblationMode>,
    /// Defaults to the run seed alone.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Training config of the CNN baseline when `model_kind` is an AAE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<VaeConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    GlyphSweep(GlyphSweepSpec),
    Idx(IdxDataset),
}

/// A labelled IDX pair split into known classes and held-out unknowns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxDataset {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub known_classes: Vec<i64>,
    #[serde(default)]
    pub heldout_classes: Vec<i64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Uniform-noise images added as one more unknown class.
    #[serde(default)]
    pub noise_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<[usize; 2]>,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::GlyphSweep(g) => g.known.len(),
            DatasetConfig::Idx(d) => d.known_classes.len(),
        }
    }

    pub fn build(&self) -> cpgm::Result<SweepData> {
        match self {
            DatasetConfig::GlyphSweep(g) => g.build(),
            DatasetConfig::Idx(d) => d.build(),
        }
    }
}

impl IdxDataset {
    fn build(&self) -> cpgm::Result<SweepData> {
        let mut ds = load_idx(&self.images, &self.labels)?;
        if let Some([h, w]) = self.resize {
            ds = downscale(&ds, h, w)?;
        }
        let split = make_split(
            &ds,
            &SplitSpec {
                known_classes: self.known_classes.clone(),
                unknown_source: UnknownSource::HeldoutClasses(self.heldout_classes.clone()),
                test_fraction: self.test_fraction,
                seed: self.seed,
            },
        )?;
        let mut pool = Vec::new();
        for &c in &self.heldout_classes {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect();
            if idx.is_empty() {
                return Err(Error::Spec(format!("held-out class {c} has no images")));
            }
            pool.push(UnknownClass { name: format!("class{c}"), source_label: Some(c), data: ds.subset(&idx)?.relabel(UNKNOWN_LABEL) });
        }
        if self.noise_count > 0 {
            let [c, h, w] = ds.image_shape();
            let data = gen_noise_dataset(self.noise_count, c, h, w, rng::derive_seed(self.seed, "noise", 0))?;
            pool.push(UnknownClass { name: "noise".into(), source_label: None, data });
        }
        Ok(SweepData { train: split.train, known_test: split.known_test, known_classes: split.remap, unknown_pool: pool })
    }
}

fn aae_variant(kind: ModelKind) -> Option<AaeVariant> {
    match kind {
        ModelKind::CpgmAae => Some(AaeVariant::Cpgm),
        ModelKind::Variant1 => Some(AaeVariant::Variant1),
        ModelKind::Variant2 => Some(AaeVariant::Variant2),
        ModelKind::CpgmVae | ModelKind::Cnn => None,
    }
}

impl RunConfig {
    /// Checks the config against itself and materializes derived values: the
    /// run seed is copied into the model configs and the AAE variant follows
    /// `model_kind`.
    pub fn resolve(mut self, seed: Option<u64>, output_dir: Option<PathBuf>) -> cpgm::Result<RunConfig> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = output_dir {
            self.output_dir = o;
        }
        let k = self.dataset.num_classes();
        match aae_variant(self.model_kind) {
            None => {
                if self.aae.is_some() {
                    return Err(config_err("aae", format!("model_kind {} takes a `vae` config only", self.model_kind.name())));
                }
                let vae = self.vae.as_mut().ok_or_else(|| config_err("vae", format!("required for model_kind {}", self.model_kind.name())))?;
                vae.seed = self.seed;
                if vae.num_classes != k {
                    return Err(config_err("vae.num_classes", format!("{} but the dataset has {k} known classes", vae.num_classes)));
                }
                vae.validate()?;
            }
            Some(variant) => {
                if self.vae.is_some() {
                    return Err(config_err("vae", format!("model_kind {} takes an `aae` config only", self.model_kind.name())));
                }
                let aae = self.aae.as_mut().ok_or_else(|| config_err("aae", format!("required for model_kind {}", self.model_kind.name())))?;
                aae.seed = self.seed;
                aae.variant = variant;
                if aae.num_classes != k {
                    return Err(config_err("aae.num_classes", format!("{} but the dataset has {k} known classes", aae.num_classes)));
                }
                aae.validate()?;
            }
        }
        if !(self.thresholds.tau_l > 0.0 && self.thresholds.tau_l < 1.0) {
            return Err(config_err("thresholds.tau_l", "must lie in (0, 1)"));
        }
        if !(self.thresholds.coverage > 0.0 && self.thresholds.coverage <= 1.0) {
            return Err(config_err("thresholds.coverage", "must lie in (0, 1]"));
        }
        if matches!(self.thresholds.tau_r, Some(t) if !(t >= 0.0)) {
            return Err(config_err("thresholds.tau_r", "must be non-negative"));
        }
        let seed = self.seed;
        let kind = self.model_kind;
        if let Some(sweep) = self.sweep.as_mut() {
            if sweep.seeds.is_empty() {
                sweep.seeds.push(seed);
            }
            if sweep.modes.is_empty() {
                return Err(config_err("sweep.modes", "lists no ablation modes"));
            }
            if let Some(b) = &sweep.baseline {
                if b.num_classes != k {
                    return Err(config_err("sweep.baseline.num_classes", format!("{} but the dataset has {k} known classes", b.num_classes)));
                }
                b.validate()?;
            } else if aae_variant(kind).is_some() && sweep.modes.contains(&AblationMode::Cnn) {
                return Err(config_err("sweep.baseline", "the cnn mode of an AAE sweep needs a baseline VAE config"));
            }
        }
        Ok(self)
    }

    /// Settings for the evaluation harness. The config of the family not in
    /// use is a placeholder that is never trained.
    pub fn train_settings(&self) -> TrainSettings {
        let k = self.dataset.num_classes();
        let baseline = self.sweep.as_ref().and_then(|s| s.baseline.clone());
        let vae = self.vae.clone().or(baseline).unwrap_or_else(|| VaeConfig::new(k));
        let aae = self.aae.clone().unwrap_or_else(|| AaeConfig::new(k, AaeVariant::Cpgm));
        TrainSettings { vae, aae, tau_l: self.thresholds.tau_l, coverage: self.thresholds.coverage }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
