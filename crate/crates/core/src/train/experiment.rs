use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{leakage_report, DatasetManifest, LeakageReport, Split};
use crate::metrics::{per_class_csv, ClassMetrics, ConfusionMatrix, MacroMetrics};

use super::checkpoint::{architecture_fingerprint, Checkpoint, CheckpointMeta};
use super::engine::{evaluate, train_one_epoch, LabeledImages, TrainState};
use super::{TrainConfig, TrainError};

/// One row of `metrics.csv`. `epoch` is 1-based; `lr` is the rate used for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub skipped_steps: usize,
    pub loss_scale: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from `resume.bin` in the run directory when present.
    pub resume: bool,
    /// Stop cleanly after this epoch (state is saved for a later resume).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAudit {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Training ids found among the evaluated ids; always 0 in a written summary.
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub profile: String,
    pub fingerprint: String,
    pub num_parameters: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub test: MacroMetrics,
    pub test_loss: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub evaluated_with_ema: bool,
    pub tencrop: bool,
    /// How per-view predictions are combined.
    pub tencrop_averaging: String,
    pub skipped_steps: usize,
    pub id_audit: IdAudit,
    pub leakage: LeakageReport,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed(Box<RunSummary>),
    /// Halted by [`RunOptions::stop_after`] after this epoch.
    Stopped { epoch: usize },
}

impl RunOutcome {
    pub fn summary(&self) -> Option<&RunSummary> {
        match self {
            RunOutcome::Completed(s) => Some(s),
            RunOutcome::Stopped { .. } => None,
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| TrainError::io(path, e))
}

fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(
        "epoch,lr,train_loss,train_accuracy,skipped_steps,loss_scale,val_loss,val_accuracy,val_macro_f1,improved\n",
    );
    for r in history {
        writeln!(
            s,
            "{},{:e},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_accuracy,
            r.skipped_steps,
            r.loss_scale,
            r.val_loss,
            r.val_accuracy,
            r.val_macro_f1,
            r.improved
        )
        .unwrap();
    }
    s
}

fn lr_trace_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("t,lr\n");
    for r in history {
        writeln!(s, "{},{:e}", r.epoch - 1, r.lr).unwrap();
    }
    s
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:03}.ckpt"))
}

fn id_audit(manifest: &DatasetManifest) -> IdAudit {
    let train = manifest.ids(Split::Train);
    let val = manifest.ids(Split::Val);
    let test = manifest.ids(Split::Test);
    let overlap = val.union(&test).filter(|id| train.contains(*id)).count();
    IdAudit {
        train: train.len(),
        val: val.len(),
        test: test.len(),
        overlap,
    }
}

/// Trains for `cfg.epochs` epochs, validating after each and checkpointing on
/// strict improvement of validation macro-F1, then evaluates the best
/// checkpoint once on the test split.
///
/// Outputs in `out_dir`: `metrics.csv`, `lr_trace.csv`, `checkpoints/`,
/// `resume.bin`, `confusion_matrix.txt`, `per_class.csv`, `summary.json` and
/// `timing.json` (the only file with wall-clock values).
pub fn run_experiment(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome, TrainError> {
    let started = Instant::now();
    cfg.validate()?;
    manifest.validate()?;
    let audit = id_audit(manifest);
    if audit.overlap > 0 {
        return Err(TrainError::IdLeak(audit.overlap));
    }
    let leakage = leakage_report(manifest);
    if leakage.train_parent_in_eval > 0 {
        return Err(TrainError::IdLeak(leakage.train_parent_in_eval));
    }
    let train = LabeledImages::from_manifest(manifest, Split::Train)?;
    let val = LabeledImages::from_manifest(manifest, Split::Val)?;
    let test = LabeledImages::from_manifest(manifest, Split::Test)?;
    for (split, d) in [(Split::Train, &train), (Split::Val, &val), (Split::Test, &test)] {
        if d.is_empty() {
            return Err(TrainError::empty(split));
        }
    }

    let profile = cfg.resolve_profile()?;
    let mut state = TrainState::new(cfg, &profile)?;
    let schedule = cfg.lr_schedule();
    let use_ema = state.ema.is_some();
    let resume_path = out_dir.join("resume.bin");

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    if opts.resume && resume_path.exists() {
        let ckpt = Checkpoint::load(&resume_path)?;
        ckpt.restore_into(&mut state)?;
        history = ckpt.meta.history.clone();
        best = ckpt.meta.best_epoch.zip(ckpt.meta.best_val_macro_f1);
        log::info!("resuming after epoch {}", history.len());
    }

    for epoch in history.len() + 1..=cfg.epochs {
        let t = epoch - 1;
        let lr = schedule.lr(t, cfg.epochs)?;
        let stats = train_one_epoch(&mut state, &train, cfg, t, lr)?;
        let v = evaluate(&mut state, &val, cfg, use_ema, Split::Val)?;
        let f1 = v.metrics.f1;
        let improved = best.is_none_or(|(_, b)| f1 > b);
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: stats.mean_loss,
            train_accuracy: stats.accuracy,
            skipped_steps: stats.skipped_steps,
            loss_scale: stats.loss_scale,
            val_loss: v.loss,
            val_accuracy: v.metrics.accuracy,
            val_macro_f1: f1,
            improved,
        });
        if improved {
            best = Some((epoch, f1));
        }
        let (best_epoch, best_f1) = best.expect("set on the first epoch");
        let meta = CheckpointMeta {
            epoch,
            val_macro_f1: Some(f1),
            best_epoch: Some(best_epoch),
            best_val_macro_f1: Some(best_f1),
            profile: profile.clone(),
            optimizer_step: state.opt.state.step,
            ema_decay: cfg.ema_decay,
            ema_updates: state.ema.as_ref().map_or(0, |e| e.updates()),
            scaler: state.scaler.clone(),
            history: history.clone(),
        };
        let ckpt = Checkpoint::capture(&state, meta);
        if improved {
            ckpt.save(&checkpoint_path(out_dir, epoch))?;
        }
        ckpt.save(&resume_path)?;
        write(&out_dir.join("metrics.csv"), metrics_csv(&history))?;
        write(&out_dir.join("lr_trace.csv"), lr_trace_csv(&history))?;
        log::info!(
            "epoch {epoch}/{}: lr {lr:.3e} loss {:.4} train acc {:.4} val macro-F1 {f1:.4}{}",
            cfg.epochs,
            stats.mean_loss,
            stats.accuracy,
            if improved { " *" } else { "" }
        );
        if opts.stop_after == Some(epoch) && epoch < cfg.epochs {
            return Ok(RunOutcome::Stopped { epoch });
        }
    }

    let (best_epoch, best_f1) = best.expect("at least one epoch");
    Checkpoint::load(&checkpoint_path(out_dir, best_epoch))?.restore_into(&mut state)?;
    let result = evaluate(&mut state, &test, cfg, use_ema, Split::Test)?;
    let summary = RunSummary {
        seed: cfg.seed,
        profile: profile.name.clone(),
        fingerprint: architecture_fingerprint(&profile),
        num_parameters: state.net.num_parameters(),
        epochs: cfg.epochs,
        best_epoch,
        best_val_macro_f1: best_f1,
        test: result.metrics,
        test_loss: result.loss,
        per_class: result.per_class.clone(),
        confusion: result.confusion.clone(),
        evaluated_with_ema: use_ema,
        tencrop: cfg.tencrop,
        tencrop_averaging: "probability".into(),
        skipped_steps: history.iter().map(|r| r.skipped_steps).sum(),
        id_audit: audit,
        leakage,
    };
    write(&out_dir.join("confusion_matrix.txt"), result.confusion.render_text())?;
    write(&out_dir.join("per_class.csv"), per_class_csv(&result.per_class))?;
    write(&out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    write(
        &out_dir.join("timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "wall_seconds": started.elapsed().as_secs_f64() }))?,
    )?;
    Ok(RunOutcome::Completed(Box::new(summary)))
}
