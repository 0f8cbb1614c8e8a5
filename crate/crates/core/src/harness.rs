//! End-to-end experiment runner and feature export.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, ImageSet};
use crate::engine::{Adapter, AdaptationConfig, AdaptationReport, Runner, Stream};
use crate::error::{Error, Result};
use crate::eval::{self, Summary};
use crate::nn::{checkpoint, NormMode, OutputMode, SplitModel};
use crate::tensor::Tensor;

pub const REPORT_FILE: &str = "report.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const POLICY_FILE: &str = "policy_history.jsonl";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const RUN_STATE_FILE: &str = "run_state.json";

fn default_bins() -> usize {
    15
}

/// Structured run configuration, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    /// Optional subdirectory of `dataset` (for example a held-out split).
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    /// Save resumable run state every this many batches (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.checkpoint, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        match &self.split {
            Some(s) => self.dataset.join(s),
            None => self.dataset.clone(),
        }
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        self.adaptation.validate()?;
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be positive".into()));
        }
        let data = self.dataset_dir();
        if !data.join(data::MANIFEST_FILE).is_file() {
            return Err(Error::Config(format!("no image set at {}", data.display())));
        }
        if !self.checkpoint.is_file() {
            return Err(Error::Config(format!("no checkpoint at {}", self.checkpoint.display())));
        }
        Ok(())
    }
}

/// Flat per-run metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub protocol: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub metrics: Summary,
    pub data_sha256: String,
    pub checkpoint_sha256: String,
    pub head_unchanged: bool,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the per-batch report followed by one summary record.
pub fn write_report(report: &AdaptationReport, summary: &RunSummary, path: &Path) -> Result<()> {
    let mut rows: Vec<serde_json::Value> = Vec::new();
    for b in &report.batches {
        let mut v = serde_json::to_value(b)?;
        v["type"] = "batch".into();
        rows.push(v);
    }
    for e in &report.epochs {
        let mut v = serde_json::to_value(e)?;
        v["type"] = "epoch".into();
        rows.push(v);
    }
    let mut s = serde_json::to_value(summary)?;
    s["type"] = "summary".into();
    rows.push(s);
    write_jsonl(path, rows)
}

/// Everything a finished experiment produced.
pub struct RunOutcome {
    pub report: AdaptationReport,
    pub summary: RunSummary,
}

/// Loads data and checkpoint, adapts, and writes report, summary, policy
/// history, reliability table and final checkpoints into the output
/// directory. With `resume`, continues from saved run state when present.
pub fn run_experiment(cfg: &RunConfig, resume: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let set = ImageSet::load(&cfg.dataset_dir())?;
    let ckpt_bytes = std::fs::read(&cfg.checkpoint).map_err(|e| Error::io(&cfg.checkpoint, e))?;
    let source = checkpoint::from_bytes(&ckpt_bytes, None)?;
    if source.num_classes() != set.num_classes {
        return Err(Error::Shape(format!(
            "checkpoint predicts {} classes, data has {}",
            source.num_classes(),
            set.num_classes
        )));
    }
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let state_path = out.join(RUN_STATE_FILE);

    let mut runner = if resume && state_path.is_file() {
        let r = Runner::load(&state_path)?;
        if r.adapter.cfg != cfg.adaptation || r.num_samples != set.len() {
            return Err(Error::Config("saved run state does not match this configuration".into()));
        }
        log::info!("resuming at epoch {} batch {}", r.epoch, r.batch);
        r
    } else {
        Runner::new(Adapter::new(cfg.adaptation.clone(), source.clone())?, set.len())?
    };
    let stream = Stream::new(&set.images, Some(&set.labels))?;
    while !runner.is_done() {
        runner.step(&stream, &mut ())?;
        if cfg.checkpoint_every > 0 && runner.adapter.steps % cfg.checkpoint_every as u64 == 0 {
            runner.save(&state_path)?;
        }
    }
    let mut report = runner.finish(&stream)?;

    let student_path = out.join(STUDENT_FILE);
    checkpoint::save(&runner.adapter.pair.student, &student_path)?;
    checkpoint::save(&runner.adapter.pair.teacher, &out.join(TEACHER_FILE))?;
    report.final_checkpoint = Some(student_path.display().to_string());

    let records = report.records(&set.labels)?;
    let metrics = eval::summarize(&records, cfg.ece_bins)?;
    let summary = RunSummary {
        method: cfg.adaptation.method.name().into(),
        protocol: cfg.adaptation.protocol.label().into(),
        seed: cfg.adaptation.seed,
        epochs: cfg.adaptation.epochs,
        batch_size: cfg.adaptation.batch_size,
        metrics,
        data_sha256: data::sha256_hex(&set.payload()),
        checkpoint_sha256: data::sha256_hex(&ckpt_bytes),
        head_unchanged: runner.adapter.pair.student.head_bytes() == source.head_bytes()
            && runner.adapter.pair.heads_identical(),
    };
    write_report(&report, &summary, &out.join(REPORT_FILE))?;
    let summary_path = out.join(SUMMARY_FILE);
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&summary_path, e))?;
    write_jsonl(&out.join(POLICY_FILE), &report.policy_history)?;
    let bins = eval::reliability_bins(&records, cfg.ece_bins, 0.0, 1.0)?;
    eval::write_reliability_csv(&bins, &out.join(RELIABILITY_FILE))?;
    if state_path.is_file() {
        std::fs::remove_file(&state_path).map_err(|e| Error::io(&state_path, e))?;
    }
    log::info!(
        "{} {}: error {:.2}%, ECE {:.2}%",
        summary.method,
        summary.protocol,
        summary.metrics.error_rate,
        summary.metrics.ece
    );
    Ok(RunOutcome { report, summary })
}

/// Encoder features (stored normalization statistics) for every image.
pub fn extract_features(model: &SplitModel, set: &ImageSet, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let (c, h, w) = set.shape();
    let a = &model.arch;
    if (c, h, w) != (a.in_channels, a.height, a.width) {
        return Err(Error::Shape(format!(
            "images are {c}x{h}x{w}, model expects {}x{}x{}",
            a.in_channels, a.height, a.width
        )));
    }
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.images.chunks(batch_size.max(1)) {
        let f = model.forward(&Tensor::from_images(chunk)?, NormMode::Running, OutputMode::Features)?;
        out.extend(f.features.expect("features requested"));
    }
    Ok(out)
}

/// Writes `label,f0,...,f{D-1}` rows for every image.
pub fn export_features(ckpt: &Path, data_dir: &Path, out: &Path) -> Result<(usize, usize)> {
    let model = checkpoint::load(ckpt, None)?;
    let set = ImageSet::load(data_dir)?;
    let feats = extract_features(&model, &set, 64)?;
    let d = model.feature_dim();
    let mut text = String::from("label");
    for j in 0..d {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    for (row, label) in feats.iter().zip(&set.labels) {
        text.push_str(&label.to_string());
        for v in row {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    let mut f = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(out, e))?;
    Ok((feats.len(), d))
}
