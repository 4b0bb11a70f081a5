//! Openness, macro-F1 over `K + 1` classes, openness sweeps and ablation grids.
//!
//! A grid run trains each required backbone once per seed, fits its detector
//! on the training set, and then scores every requested detection mode at
//! every sweep point from cached inference passes. Seeds run on up to
//! `threads` worker threads; rows come back ordered by seed, experiment and
//! point regardless of scheduling.
//!
//! CSV schema (one row per experiment, seed and sweep point):
//!
//! ```text
//! seed,model_kind,mode,unknown_classes,openness,macro_f1,closed_acc,unknown_recall
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aae::{train_cpgm_aae, AaeConfig, AaeVariant};
use crate::checkpoint::AnyModel;
use crate::cnn::train_cnn;
use crate::data::{gen_glyphs, gen_noise_dataset, make_split, Dataset, Glyph, SplitSpec, UnknownSource, UNKNOWN_LABEL};
use crate::detector::{DetectMode, DetectionResult, Detector, Verdict, DEFAULT_COVERAGE};
use crate::error::{domain_err, Error, Result};
use crate::model::{infer, Inference, ModelKind, OpenSetModel};
use crate::rng;
use crate::vae::{train_cpgm_vae, VaeConfig};

/// `1 − √(2·n_train / (n_test + n_target))`.
pub fn openness(n_train: usize, n_test: usize, n_target: usize) -> Result<f64> {
    if n_train == 0 {
        return domain_err("n_train must be at least 1");
    }
    if n_test + n_target == 0 {
        return domain_err("n_test + n_target must be positive");
    }
    Ok(1.0 - (2.0 * n_train as f64 / (n_test + n_target) as f64).sqrt())
}

/// `(K+1)×(K+1)` counts, rows = truth, columns = prediction; label −1 maps to
/// the last index.
pub fn confusion(truth: &[i64], pred: &[i64], k: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::Length(format!("{} truths, {} predictions", truth.len(), pred.len())));
    }
    let idx = |l: i64| -> Result<usize> {
        match l {
            UNKNOWN_LABEL => Ok(k),
            l if l >= 0 && (l as usize) < k => Ok(l as usize),
            l => Err(Error::Contract(format!("label {l} outside [-1, {k})"))),
        }
    };
    let mut m = vec![vec![0u64; k + 1]; k + 1];
    for (&t, &p) in truth.iter().zip(pred) {
        m[idx(t)?][idx(p)?] += 1;
    }
    Ok(m)
}

/// Per-class F1 and their unweighted mean. A class with no true positives
/// possible (no predictions or no ground truth) scores 0.
pub fn macro_f1(confusion: &[Vec<u64>]) -> Result<(f64, Vec<f64>)> {
    let n = confusion.len();
    if n == 0 || confusion.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
    }
    let per: Vec<f64> = (0..n)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let actual: u64 = confusion[c].iter().sum();
            if predicted == 0 || actual == 0 || tp == 0.0 {
                return 0.0;
            }
            let (p, r) = (tp / predicted as f64, tp / actual as f64);
            2.0 * p * r / (p + r)
        })
        .collect();
    Ok((per.iter().sum::<f64>() / n as f64, per))
}

/// Fraction of truly unknown samples rejected; 0 when there are none.
pub fn unknown_recall(confusion: &[Vec<u64>]) -> f64 {
    let last = confusion.len() - 1;
    let total: u64 = confusion[last].iter().sum();
    if total == 0 {
        0.0
    } else {
        confusion[last][last] as f64 / total as f64
    }
}

fn accuracy(out: &Inference, labels: &[i64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = out.predictions().iter().zip(labels).filter(|(p, l)| **p as i64 == **l).count();
    hits as f64 / labels.len() as f64
}

/// Argmax accuracy on known test samples, detector bypassed.
pub fn closed_set_accuracy(model: &dyn OpenSetModel, known_test: &Dataset) -> Result<f64> {
    let out = infer(model, known_test, false)?;
    Ok(accuracy(&out, known_test.labels()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_kind: ModelKind,
    pub mode: AblationMode,
    pub seed: u64,
    pub unknown_classes: usize,
    pub openness: f64,
    pub closed_set_accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub unknown_recall: f64,
    /// Rows = truth, columns = prediction, last index = unknown.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "seed,model_kind,mode,unknown_classes,openness,macro_f1,closed_acc,unknown_recall";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.seed,
            self.model_kind.name(),
            self.mode.name(),
            self.unknown_classes,
            self.openness,
            self.macro_f1,
            self.closed_set_accuracy,
            self.unknown_recall
        )
    }

    /// Confusion matrix as CSV with a header of predicted labels.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len() - 1;
        let name = |c: usize| if c == k { "unknown".to_string() } else { c.to_string() };
        let mut s = String::from("truth");
        for c in 0..=k {
            let _ = write!(s, ",{}", name(c));
        }
        s.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            s.push_str(&name(c));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// CSV text for a list of reports, header included.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut s = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Confusion, F1 and recall of a set of decisions against ground truth.
pub fn score(results: &[DetectionResult], truth: &[i64], k: usize) -> Result<(Vec<Vec<u64>>, f64, Vec<f64>, f64)> {
    let pred: Vec<i64> = results
        .iter()
        .map(|r| match r.verdict {
            Verdict::Known(c) => c as i64,
            Verdict::Unknown => UNKNOWN_LABEL,
        })
        .collect();
    let conf = confusion(truth, &pred, k)?;
    let (macro_, per) = macro_f1(&conf)?;
    let recall = unknown_recall(&conf);
    Ok((conf, macro_, per, recall))
}

/// The ablation switches. VAE family: `cnn, cvae, lcvae, cvae_cgd,
/// lcvae_cgd, lcvae_re, full`; AAE family: `cnn, caae, caae_cgd, caae_re,
/// full`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Cnn,
    Cvae,
    Lcvae,
    CvaeCgd,
    LcvaeCgd,
    LcvaeRe,
    Caae,
    CaaeCgd,
    CaaeRe,
    Full,
}

impl AblationMode {
    pub const VAE: [AblationMode; 7] = [
        AblationMode::Cnn,
        AblationMode::Cvae,
        AblationMode::Lcvae,
        AblationMode::CvaeCgd,
        AblationMode::LcvaeCgd,
        AblationMode::LcvaeRe,
        AblationMode::Full,
    ];
    pub const AAE: [AblationMode; 5] =
        [AblationMode::Cnn, AblationMode::Caae, AblationMode::CaaeCgd, AblationMode::CaaeRe, AblationMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Cnn => "cnn",
            AblationMode::Cvae => "cvae",
            AblationMode::Lcvae => "lcvae",
            AblationMode::CvaeCgd => "cvae_cgd",
            AblationMode::LcvaeCgd => "lcvae_cgd",
            AblationMode::LcvaeRe => "lcvae_re",
            AblationMode::Caae => "caae",
            AblationMode::CaaeCgd => "caae_cgd",
            AblationMode::CaaeRe => "caae_re",
            AblationMode::Full => "full",
        }
    }
}

/// A trained network a mode runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backbone {
    Cnn,
    /// Conditional VAE without ladder terms.
    Cvae,
    Lcvae,
    Aae(AaeVariant),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model_kind: ModelKind,
    pub ablation_mode: AblationMode,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    /// The backbone and detection rule this experiment toggles on.
    pub fn resolve(&self) -> Result<(Backbone, DetectMode)> {
        use AblationMode as A;
        let bad = || Error::Spec(format!("mode {} is not valid for {}", self.ablation_mode.name(), self.model_kind.name()));
        let aae = match self.model_kind {
            ModelKind::CpgmVae => None,
            ModelKind::CpgmAae => Some(AaeVariant::Cpgm),
            ModelKind::Variant1 => Some(AaeVariant::Variant1),
            ModelKind::Variant2 => Some(AaeVariant::Variant2),
            ModelKind::Cnn => return Err(Error::Spec("model_kind cnn is expressed as ablation mode cnn".into())),
        };
        Ok(match (aae, self.ablation_mode) {
            (_, A::Cnn) => (Backbone::Cnn, DetectMode::Softmax),
            (None, A::Cvae) => (Backbone::Cvae, DetectMode::Softmax),
            (None, A::Lcvae) => (Backbone::Lcvae, DetectMode::Softmax),
            (None, A::CvaeCgd) => (Backbone::Cvae, DetectMode::Cgd),
            (None, A::LcvaeCgd) => (Backbone::Lcvae, DetectMode::Cgd),
            (None, A::LcvaeRe) => (Backbone::Lcvae, DetectMode::Re),
            (None, A::Full) => (Backbone::Lcvae, DetectMode::Full),
            (Some(v), A::Caae) => (Backbone::Aae(v), DetectMode::Softmax),
            (Some(v), A::CaaeCgd) => (Backbone::Aae(v), DetectMode::Cgd),
            (Some(v), A::CaaeRe) => (Backbone::Aae(v), DetectMode::Re),
            (Some(v), A::Full) => (Backbone::Aae(v), DetectMode::Full),
            _ => return Err(bad()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpennessSpec {
    pub n_train: usize,
    pub n_target: usize,
    pub unknown_class_counts: Vec<usize>,
}

impl OpennessSpec {
    pub fn validate(&self, pool: usize) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Spec("n_train must be at least 1".into()));
        }
        if let Some(c) = self.unknown_class_counts.iter().find(|&&c| c > pool) {
            return Err(Error::Spec(format!("{c} unknown classes requested, pool has {pool}")));
        }
        Ok(())
    }

    pub fn openness_at(&self, count: usize) -> Result<f64> {
        openness(self.n_train, self.n_train + count, self.n_target)
    }
}

/// One unknown class of the sweep pool.
#[derive(Clone, Debug)]
pub struct UnknownClass {
    pub name: String,
    /// Original dataset label, when the class comes from the same dataset as
    /// the known classes.
    pub source_label: Option<i64>,
    pub data: Dataset,
}

#[derive(Clone, Debug)]
pub struct SweepData {
    pub train: Dataset,
    pub known_test: Dataset,
    /// Original labels of the remapped known classes.
    pub known_classes: Vec<i64>,
    pub unknown_pool: Vec<UnknownClass>,
}

impl SweepData {
    pub fn validate(&self) -> Result<()> {
        for u in &self.unknown_pool {
            if let Some(l) = u.source_label {
                if self.known_classes.contains(&l) {
                    return Err(Error::Spec(format!("unknown class {} (label {l}) is also a known class", u.name)));
                }
            }
            if u.data.labels().iter().any(|&l| l != UNKNOWN_LABEL) {
                return Err(Error::Spec(format!("unknown class {} carries known labels", u.name)));
            }
        }
        Ok(())
    }
}

/// Synthetic glyph sweep: known glyphs split into train/test, each held-out
/// glyph and a block of uniform noise forming one unknown class each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphSweepSpec {
    pub known: Vec<Glyph>,
    pub heldout: Vec<Glyph>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Size of the noise class; 0 leaves it out of the pool.
    pub noise_count: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    16
}

impl GlyphSweepSpec {
    pub fn build(&self) -> Result<SweepData> {
        if let Some(g) = self.heldout.iter().find(|g| self.known.contains(g)) {
            return Err(Error::Spec(format!("glyph {} is both known and held out", g.name())));
        }
        let per = self.train_per_class + self.test_per_class;
        let known = gen_glyphs(&self.known, per, self.size, self.seed)?;
        let ids: Vec<i64> = self.known.iter().map(|&g| glyph_id(g)).collect();
        let split = make_split(
            &known,
            &SplitSpec {
                known_classes: ids.clone(),
                unknown_source: UnknownSource::ExternalDataset("glyph pool".into()),
                test_fraction: self.test_per_class as f64 / per as f64,
                seed: self.seed,
            },
        )?;
        let mut pool = Vec::new();
        for &g in &self.heldout {
            let data = gen_glyphs(&[g], self.test_per_class, self.size, self.seed)?.relabel(UNKNOWN_LABEL);
            pool.push(UnknownClass { name: g.name().into(), source_label: Some(glyph_id(g)), data });
        }
        if self.noise_count > 0 {
            let data = gen_noise_dataset(self.noise_count, 1, self.size, self.size, rng::derive_seed(self.seed, "noise", 0))?;
            pool.push(UnknownClass { name: "noise".into(), source_label: None, data });
        }
        Ok(SweepData { train: split.train, known_test: split.known_test, known_classes: ids, unknown_pool: pool })
    }
}

fn glyph_id(g: Glyph) -> i64 {
    Glyph::ALL.iter().position(|&a| a == g).expect("glyph listed in ALL") as i64
}

/// Training and detector settings shared by every grid cell; the seed of
/// each run replaces the configs' own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub vae: VaeConfig,
    pub aae: AaeConfig,
    #[serde(default = "default_tau_l")]
    pub tau_l: f64,
    #[serde(default = "default_coverage")]
    pub coverage: f64,
}

fn default_tau_l() -> f64 {
    0.5
}

fn default_coverage() -> f64 {
    DEFAULT_COVERAGE
}

/// Trains one backbone with the given seed.
pub fn train_backbone(b: Backbone, settings: &TrainSettings, data: &Dataset, seed: u64) -> Result<AnyModel> {
    Ok(match b {
        Backbone::Cnn => AnyModel::Cnn(train_cnn(data, &VaeConfig { seed, ..settings.vae.clone() })?.0),
        Backbone::Cvae => AnyModel::Vae(train_cpgm_vae(data, &VaeConfig { seed, ladder: false, ..settings.vae.clone() })?.0),
        Backbone::Lcvae => AnyModel::Vae(train_cpgm_vae(data, &VaeConfig { seed, ladder: true, ..settings.vae.clone() })?.0),
        Backbone::Aae(variant) => AnyModel::Aae(train_cpgm_aae(data, &AaeConfig { seed, variant, ..settings.aae.clone() })?.0),
    })
}

/// Unknown classes drawn for each sweep point, from a sub-seed of
/// `(seed, point index)`.
pub fn sample_unknown(seed: u64, point: usize, count: usize, pool: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    idx.shuffle(&mut rng::stream(seed, "sweep", point as u64));
    let mut pick = idx[..count.min(pool)].to_vec();
    pick.sort_unstable();
    pick
}

struct Evaluated {
    detector: Detector,
    closed_acc: f64,
    known: Inference,
    unknown: Vec<Inference>,
}

fn evaluate_backbone(model: &dyn OpenSetModel, settings: &TrainSettings, data: &SweepData, with_recon: bool) -> Result<Evaluated> {
    let detector = Detector::fit(model, &data.train, settings.tau_l, settings.coverage)?;
    let known = infer(model, &data.known_test, with_recon)?;
    let closed_acc = accuracy(&known, data.known_test.labels());
    let unknown = data.unknown_pool.iter().map(|u| infer(model, &u.data, with_recon)).collect::<Result<_>>()?;
    Ok(Evaluated { detector, closed_acc, known, unknown })
}

fn concat_inference(parts: &[&Inference]) -> Result<Inference> {
    let cat = |f: &dyn Fn(&Inference) -> &crate::autodiff::Tensor| -> Result<crate::autodiff::Tensor> {
        let cols = f(parts[0]).shape()[1];
        let data: Vec<f64> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        crate::autodiff::Tensor::new(vec![data.len() / cols.max(1), cols], data)
    };
    let recon = parts.iter().map(|p| p.recon_error.clone()).collect::<Option<Vec<_>>>().map(|v| v.concat());
    Ok(Inference { latent: cat(&|p| &p.latent)?, scores: cat(&|p| &p.scores)?, recon_error: recon })
}

/// A trained backbone with its fitted detector, kept for inspection.
pub struct TrainedBackbone {
    pub seed: u64,
    pub backbone: Backbone,
    pub model: AnyModel,
    pub detector: Detector,
}

#[derive(Default)]
pub struct GridOutput {
    /// Ordered by seed, then experiment, then sweep point.
    pub reports: Vec<MetricsReport>,
    pub models: Vec<TrainedBackbone>,
}

fn run_seed(
    seed: u64,
    experiments: &[(usize, &ExperimentSpec, Backbone, DetectMode)],
    spec: &OpennessSpec,
    settings: &TrainSettings,
    data: &SweepData,
    keep_models: bool,
) -> Result<(Vec<(usize, MetricsReport)>, Vec<TrainedBackbone>)> {
    let mut needed: BTreeMap<Backbone, Vec<DetectMode>> = BTreeMap::new();
    for (_, e, b, m) in experiments {
        if e.seeds.contains(&seed) {
            needed.entry(*b).or_default().push(*m);
        }
    }
    let k = data.known_classes.len();
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for (backbone, modes) in needed {
        let model = train_backbone(backbone, settings, &data.train, seed)?;
        let with_recon = modes.iter().any(|m| m.uses_recon());
        let ev = evaluate_backbone(model.as_model(), settings, data, with_recon)?;
        for (point, &count) in spec.unknown_class_counts.iter().enumerate() {
            let pick = sample_unknown(seed, point, count, data.unknown_pool.len());
            let mut parts = vec![&ev.known];
            parts.extend(pick.iter().map(|&i| &ev.unknown[i]));
            let out = concat_inference(&parts)?;
            let mut truth = data.known_test.labels().to_vec();
            for &i in &pick {
                truth.extend_from_slice(data.unknown_pool[i].data.labels());
            }
            let op = spec.openness_at(count)?;
            for (ei, e, b, mode) in experiments {
                if *b != backbone || !e.seeds.contains(&seed) {
                    continue;
                }
                let results = ev.detector.decide_all(&out, *mode)?;
                let (confusion, macro_f1, per_class_f1, unknown_recall) = score(&results, &truth, k)?;
                rows.push((
                    ei * spec.unknown_class_counts.len() + point,
                    MetricsReport {
                        model_kind: e.model_kind,
                        mode: e.ablation_mode,
                        seed,
                        unknown_classes: count,
                        openness: op,
                        closed_set_accuracy: ev.closed_acc,
                        macro_f1,
                        per_class_f1,
                        unknown_recall,
                        confusion,
                    },
                ));
            }
        }
        if keep_models {
            models.push(TrainedBackbone { seed, backbone, model, detector: ev.detector });
        }
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok((rows, models))
}

/// Runs every experiment at every sweep point. Backbones shared between
/// experiments are trained once per seed.
pub fn run_grid(
    experiments: &[ExperimentSpec],
    spec: &OpennessSpec,
    settings: &TrainSettings,
    data: &SweepData,
    threads: usize,
    keep_models: bool,
) -> Result<GridOutput> {
    data.validate()?;
    spec.validate(data.unknown_pool.len())?;
    let resolved = experiments
        .iter()
        .enumerate()
        .map(|(i, e)| e.resolve().map(|(b, m)| (i, e, b, m)))
        .collect::<Result<Vec<_>>>()?;
    let mut seeds: Vec<u64> = experiments.iter().flat_map(|e| e.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<(Vec<(usize, MetricsReport)>, Vec<TrainedBackbone>)>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, seeds.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = run_seed(seeds[i], &resolved, spec, settings, data, keep_models);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let mut out = GridOutput::default();
    for slot in slots.into_inner().expect("no worker panicked") {
        let (rows, models) = slot.expect("every seed ran")?;
        out.reports.extend(rows.into_iter().map(|(_, r)| r));
        out.models.extend(models);
    }
    Ok(out)
}

/// One experiment across the sweep: `(openness, macro_f1)` rows per seed.
pub fn run_openness_sweep(
    spec: &OpennessSpec,
    experiment: &ExperimentSpec,
    settings: &TrainSettings,
    data: &SweepData,
    threads: usize,
) -> Result<Vec<MetricsReport>> {
    Ok(run_grid(std::slice::from_ref(experiment), spec, settings, data, threads, false)?.reports)
}

/// Every experiment against the whole unknown pool.
pub fn run_ablation(grid: &[ExperimentSpec], n_target: usize, settings: &TrainSettings, data: &SweepData, threads: usize) -> Result<Vec<MetricsReport>> {
    let n_train = data.known_classes.len();
    let spec = OpennessSpec { n_train, n_target, unknown_class_counts: vec![data.unknown_pool.len()] };
    Ok(run_grid(grid, &spec, settings, data, threads, false)?.reports)
}
