use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cpgm::aae::train_cpgm_aae;
use cpgm::autodiff::GradCheckOptions;
use cpgm::checkpoint::AnyModel;
use cpgm::cnn::train_cnn;
use cpgm::data::{Dataset, UNKNOWN_LABEL};
use cpgm::detector::{DetectMode, Detector};
use cpgm::eval::{closed_set_accuracy, openness, reports_csv, run_grid, score, AblationMode, ExperimentSpec, MetricsReport, SweepData};
use cpgm::gradsuite::{aae_suite, primitive_suite, vae_suite};
use cpgm::model::{infer, ModelKind};
use cpgm::vae::train_cpgm_vae;
use cpgm::Error;

use crate::config::RunConfig;

/// A failure carrying the process exit code: 2 for configuration problems,
/// 1 for everything that goes wrong while running.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Json(_) | Error::Spec(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

pub fn config_failure(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Which split a checkpoint is run on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSet {
    /// Known test images plus every unknown class of the pool.
    Test,
    /// The training images.
    Train,
}

pub fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_failure(format!("cannot read config {}: {e}", path.display())))?;
    let raw: RunConfig = serde_json::from_str(&text).map_err(|e| config_failure(format!("invalid config {}: {e}", path.display())))?;
    Ok(raw.resolve(seed, out)?)
}

/// Creates the output directory and writes the resolved config into it.
fn prepare_output(config: &RunConfig) -> CmdResult<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| config_failure(format!("output_dir {} is not writable: {e}", dir.display())))?;
    write(&dir.join("config.resolved.json"), config.to_json())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult<()> {
    fs::write(path, contents).map_err(|e| Failure { code: 1, message: format!("cannot write {}: {e}", path.display()) })
}

pub fn train(config: &RunConfig) -> CmdResult<()> {
    prepare_output(config)?;
    let data = config.dataset.build()?;
    let mut csv = String::new();
    let model = match config.model_kind {
        ModelKind::CpgmVae => {
            let (m, trace) = train_cpgm_vae(&data.train, config.vae.as_ref().expect("resolved"))?;
            csv.push_str("epoch,beta,total,recon,kl,cls,batch_accuracy\n");
            for e in &trace {
                let _ = writeln!(csv, "{},{},{},{},{},{},{}", e.epoch, e.beta, e.total, e.recon, e.kl, e.cls, e.batch_accuracy);
            }
            AnyModel::Vae(m)
        }
        ModelKind::Cnn => {
            let (m, trace) = train_cnn(&data.train, config.vae.as_ref().expect("resolved"))?;
            csv.push_str("epoch,cls,batch_accuracy\n");
            for e in &trace {
                let _ = writeln!(csv, "{},{},{}", e.epoch, e.cls, e.batch_accuracy);
            }
            AnyModel::Cnn(m)
        }
        ModelKind::CpgmAae | ModelKind::Variant1 | ModelKind::Variant2 => {
            let (m, trace) = train_cpgm_aae(&data.train, config.aae.as_ref().expect("resolved"))?;
            csv.push_str("epoch,recon,d_loss,g_loss,cls,distance,batch_accuracy\n");
            for e in &trace {
                let _ = writeln!(csv, "{},{},{},{},{},{},{}", e.epoch, e.recon, e.d_loss, e.g_loss, e.cls, e.distance, e.batch_accuracy);
            }
            AnyModel::Aae(m)
        }
    };
    let dir = &config.output_dir;
    model.save(dir.join("checkpoint.bin"))?;
    write(&dir.join("loss.csv"), &csv)?;
    let last = csv.lines().last().unwrap_or_default();
    println!("trained {} on {} images; final epoch: {last}", config.model_kind.name(), data.train.len());
    println!("wrote {}", dir.display());
    Ok(())
}

fn load_checkpoint(config: &RunConfig, path: Option<&Path>) -> CmdResult<AnyModel> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.join("checkpoint.bin"));
    let model = AnyModel::load(&path)?;
    if model.kind() != config.model_kind {
        return Err(config_failure(format!(
            "checkpoint {} holds a {} model but the config asks for {}",
            path.display(),
            model.kind().name(),
            config.model_kind.name()
        )));
    }
    Ok(model)
}

fn detect_mode(config: &RunConfig) -> CmdResult<DetectMode> {
    if config.model_kind == ModelKind::Cnn {
        return match config.eval_mode {
            AblationMode::Cnn => Ok(DetectMode::Softmax),
            m => Err(config_failure(format!("eval_mode {} needs a generative model; cnn supports only `cnn`", m.name()))),
        };
    }
    let spec = ExperimentSpec { model_kind: config.model_kind, ablation_mode: config.eval_mode, seeds: vec![config.seed] };
    Ok(spec.resolve()?.1)
}

/// The images a checkpoint is evaluated or embedded on, with the number of
/// unknown classes among them.
fn eval_images(data: &SweepData, set: EvalSet) -> CmdResult<(Dataset, usize)> {
    match set {
        EvalSet::Train => Ok((data.train.clone(), 0)),
        EvalSet::Test => {
            let mut ds = data.known_test.clone();
            for u in &data.unknown_pool {
                ds = ds.concat(&u.data)?;
            }
            Ok((ds, data.unknown_pool.len()))
        }
    }
}

pub fn eval(config: &RunConfig, checkpoint: Option<&Path>, set: EvalSet) -> CmdResult<()> {
    let model = load_checkpoint(config, checkpoint)?;
    let mode = detect_mode(config)?;
    prepare_output(config)?;
    let data = config.dataset.build()?;
    let m = model.as_model();
    let k = m.num_classes();
    let mut detector = Detector::fit(m, &data.train, config.thresholds.tau_l, config.thresholds.coverage)?;
    if let Some(t) = config.thresholds.tau_r {
        detector.thresholds.tau_r = t;
    }
    let (images, unknown_classes) = eval_images(&data, set)?;
    let known = if set == EvalSet::Train { &data.train } else { &data.known_test };
    let results = detector.decide_all(&infer(m, &images, mode.uses_recon())?, mode)?;
    let (confusion, macro_f1, per_class_f1, unknown_recall) = score(&results, images.labels(), k)?;
    let report = MetricsReport {
        model_kind: config.model_kind,
        mode: config.eval_mode,
        seed: config.seed,
        unknown_classes,
        openness: openness(k, k + unknown_classes, k)?,
        closed_set_accuracy: closed_set_accuracy(m, known)?,
        macro_f1,
        per_class_f1,
        unknown_recall,
        confusion,
    };
    let dir = &config.output_dir;
    let mut json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    json.push('\n');
    write(&dir.join("metrics.json"), json)?;
    write(&dir.join("confusion.csv"), report.confusion_csv())?;
    write(&dir.join("detector.txt"), detector.to_text())?;
    println!(
        "{} {}: closed-set accuracy {:.4}, macro-F1 {:.4}, unknown recall {:.4}, openness {:.4}",
        config.model_kind.name(),
        config.eval_mode.name(),
        report.closed_set_accuracy,
        report.macro_f1,
        report.unknown_recall,
        report.openness
    );
    Ok(())
}

pub fn sweep(config: &RunConfig, threads: usize) -> CmdResult<()> {
    let sweep = config.sweep.as_ref().ok_or_else(|| config_failure("invalid configuration field `sweep`: required by the sweep command"))?;
    let kind = match config.model_kind {
        ModelKind::Cnn => ModelKind::CpgmVae,
        k => k,
    };
    if config.model_kind == ModelKind::Cnn && sweep.modes.iter().any(|&m| m != AblationMode::Cnn) {
        return Err(config_failure("invalid configuration field `sweep.modes`: model_kind cnn supports only `cnn`"));
    }
    let experiments: Vec<ExperimentSpec> =
        sweep.modes.iter().map(|&m| ExperimentSpec { model_kind: kind, ablation_mode: m, seeds: sweep.seeds.clone() }).collect();
    prepare_output(config)?;
    let data = config.dataset.build()?;
    let out = run_grid(&experiments, &sweep.openness, &config.train_settings(), &data, threads, false)?;
    write(&config.output_dir.join("sweep.csv"), reports_csv(&out.reports))?;
    for r in &out.reports {
        println!("seed {} {} unknown={} openness={:.4} macro_f1={:.4}", r.seed, r.mode.name(), r.unknown_classes, r.openness, r.macro_f1);
    }
    Ok(())
}

pub fn export_embeddings(config: &RunConfig, checkpoint: Option<&Path>, set: EvalSet) -> CmdResult<()> {
    let model = load_checkpoint(config, checkpoint)?;
    prepare_output(config)?;
    let data = config.dataset.build()?;
    let (images, _) = eval_images(&data, set)?;
    let m = model.as_model();
    let out = infer(m, &images, true)?;
    let j = m.latent_dim();
    let mut csv = String::from("id,label");
    for c in 0..j {
        let _ = write!(csv, ",z{c}");
    }
    csv.push_str(",recon_error\n");
    for i in 0..images.len() {
        let label = images.labels()[i];
        if label == UNKNOWN_LABEL {
            let _ = write!(csv, "{i},unknown");
        } else {
            let _ = write!(csv, "{i},{label}");
        }
        for v in &out.latent.data()[i * j..(i + 1) * j] {
            let _ = write!(csv, ",{v}");
        }
        match &out.recon_error {
            Some(r) => {
                let _ = writeln!(csv, ",{}", r[i]);
            }
            None => csv.push_str(",\n"),
        }
    }
    write(&config.output_dir.join("embeddings.csv"), csv)?;
    println!("wrote {} embeddings of dimension {j}", images.len());
    Ok(())
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Runs the primitive and model finite-difference suites; returns whether
/// every entry passed.
pub fn gradcheck(config: &RunConfig, batch: usize) -> CmdResult<bool> {
    let opts = GradCheckOptions { seed: config.seed, ..Default::default() };
    let model = match config.model_kind {
        ModelKind::CpgmVae => vae_suite(config.vae.as_ref().expect("resolved"), batch, opts)?,
        ModelKind::CpgmAae | ModelKind::Variant1 | ModelKind::Variant2 => aae_suite(config.aae.as_ref().expect("resolved"), batch, opts)?,
        ModelKind::Cnn => return Err(config_failure("gradcheck covers the generative models; model_kind cnn has no suite")),
    };
    let mut entries = primitive_suite(config.seed)?;
    entries.extend(model);
    prepare_output(config)?;
    let mut text = String::new();
    let mut ok = true;
    for e in &entries {
        let pass = e.report.passes(GRADCHECK_TOLERANCE);
        ok &= pass;
        let _ = writeln!(text, "{} max_rel_error={:.3e} {}", e.name, e.report.max_rel_error, if pass { "PASS" } else { "FAIL" });
        for p in &e.report.flagged {
            let _ = writeln!(text, "  flagged {p}");
        }
    }
    print!("{text}");
    write(&config.output_dir.join("gradcheck.txt"), text)?;
    Ok(ok)
}
