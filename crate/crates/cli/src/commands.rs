use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chexopt::data::{
    balance_dataset, generate_synthetic, leakage_report, stratified_split, ClassLabel, DatasetManifest, Split,
};
use chexopt::metrics::per_class_csv;
use chexopt::train::{
    compare_summaries, evaluate as eval_split, run_experiment, Checkpoint, LabeledImages, RunOptions, RunOutcome,
    RunSummary, TrainConfig, TrainState,
};
use log::info;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::CliConfig;
use crate::error::CliError;
use crate::{Arm, BalanceArgs, CompareArgs, EvaluateArgs, GenerateArgs, ReportArgs, SplitArgs, TrainArgs};

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Directory image paths in a manifest are relative to.
fn manifest_root(manifest: &Path) -> PathBuf {
    match manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Derived manifests must stay next to the images they reference.
fn derived_path(input: &Path, out: Option<PathBuf>, default_name: &str) -> Result<PathBuf, CliError> {
    let root = manifest_root(input);
    let out = out.unwrap_or_else(|| root.join(default_name));
    let out_dir = manifest_root(&out);
    let same = match (fs::canonicalize(&root), fs::canonicalize(&out_dir)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if !same {
        return Err(CliError::Config(format!(
            "{} must be written to {} so its image paths stay valid",
            out.display(),
            root.display()
        )));
    }
    Ok(out)
}

fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<String, CliError> {
    let text = m.to_json()?;
    write(path, &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn generate(cfg: &CliConfig, a: GenerateArgs) -> Result<(), CliError> {
    let mut counts = match (a.counts, a.per_class) {
        (Some(c), _) => c
            .try_into()
            .map_err(|c: Vec<usize>| CliError::Config(format!("--counts needs 5 values, got {}", c.len())))?,
        (None, Some(n)) => [n; 5],
        (None, None) => cfg.counts(),
    };
    if let Some(names) = a.classes {
        let keep: Vec<ClassLabel> = names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?;
        for c in ClassLabel::ALL {
            if !keep.contains(&c) {
                counts[c.index()] = 0;
            }
        }
    }
    let seed = a.seed.unwrap_or(cfg.data.seed);
    let size = a.image_size.unwrap_or(cfg.data.image_size);
    let mut m = generate_synthetic(&counts, size, seed)?;
    m.write_to_dir(&a.out_dir)?;
    let path = a.out_dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    info!("wrote {} images of {size}×{size} to {}", m.records.len(), a.out_dir.display());
    for c in ClassLabel::ALL {
        println!("{:<14} {}", c.name(), counts[c.index()]);
    }
    println!("manifest {} sha256 {}", path.display(), sha256_hex(&text));
    Ok(())
}

/// Size of the largest class below the maximum (the maximum itself when all are equal).
fn default_target(counts: &[usize; 5]) -> usize {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts.iter().copied().filter(|&n| n < max).max().unwrap_or(max)
}

pub fn balance(cfg: &CliConfig, a: BalanceArgs) -> Result<(), CliError> {
    let m = DatasetManifest::load(&a.manifest)?;
    let out = derived_path(&a.manifest, a.out, "balanced.json")?;
    let counts = m.class_counts();
    let target = a.target.or(cfg.data.balance_target).unwrap_or_else(|| default_target(&counts));
    let seed = a.seed.unwrap_or(cfg.data.seed);
    let (balanced, report) = balance_dataset(&m, target, &cfg.data.augmentation, seed)?;
    if report.is_noop() {
        println!("already balanced at {target} per class; nothing to do");
    } else {
        print!("{report}");
    }
    let hash = save_manifest(&balanced, &out)?;
    println!("manifest {} sha256 {hash}", out.display());
    Ok(())
}

pub fn split(cfg: &CliConfig, a: SplitArgs) -> Result<(), CliError> {
    let m = DatasetManifest::load(&a.manifest)?;
    let out = derived_path(&a.manifest, a.out, "split.json")?;
    let seed = a.seed.unwrap_or(cfg.data.seed);
    let s = stratified_split(&m, &cfg.data.split, seed)?;
    println!("| Class | Train | Val | Test |");
    println!("|---|---:|---:|---:|");
    let (tr, va, te) = (s.split_counts(Split::Train), s.split_counts(Split::Val), s.split_counts(Split::Test));
    for c in ClassLabel::ALL {
        let i = c.index();
        println!("| {} | {} | {} | {} |", c.name(), tr[i], va[i], te[i]);
    }
    let sum = |x: [usize; 5]| x.iter().sum::<usize>();
    println!("| Total | {} | {} | {} |", sum(tr), sum(va), sum(te));
    let leak = leakage_report(&s);
    if leak.cross_split > 0 {
        println!(
            "{} of {} augmented images sit in a different split from their source image",
            leak.cross_split, leak.augmented
        );
    }
    let hash = save_manifest(&s, &out)?;
    println!("manifest {} sha256 {hash}", out.display());
    Ok(())
}

fn load_materialized(path: &Path) -> Result<DatasetManifest, CliError> {
    let mut m = DatasetManifest::load(path)?;
    m.materialize(&manifest_root(path))?;
    Ok(m)
}

pub fn train(mut cfg: CliConfig, a: TrainArgs) -> Result<(), CliError> {
    if let Some(s) = a.seeds {
        cfg.train.seeds = s.0;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.optim.adamw.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(p) = a.profile {
        cfg.model.profile = p;
    }
    if let Some(p) = a.parallel {
        cfg.train.parallel = p;
    }
    if let Some(d) = a.out_dir {
        cfg.report.out_dir = d;
    }
    cfg.validate()?;
    let manifest = load_materialized(&a.manifest)?;
    let arm_dir = cfg.report.out_dir.join(a.arm.dir_name());
    fs::create_dir_all(&arm_dir).map_err(|e| CliError::io(&arm_dir, e))?;
    write(
        &arm_dir.join("config.json"),
        &serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;
    let opts = RunOptions {
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let job = |seed: u64| -> Result<(u64, RunOutcome), CliError> {
        let mut tc: TrainConfig = cfg.train_config(seed);
        if a.arm == Arm::Baseline {
            tc = tc.ablated_baseline();
        }
        let dir = arm_dir.join(format!("seed_{seed}"));
        info!("{} seed {seed} -> {}", a.arm.dir_name(), dir.display());
        Ok((seed, run_experiment(&tc, &manifest, &dir, &opts)?))
    };
    let results: Vec<Result<(u64, RunOutcome), CliError>> = if cfg.train.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.train.parallel.min(rayon::current_num_threads().max(1)))
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(|| cfg.train.seeds.par_iter().map(|&s| job(s)).collect())
    } else {
        cfg.train.seeds.iter().map(|&s| job(s)).collect()
    };
    for r in results {
        match r? {
            (seed, RunOutcome::Completed(s)) => println!(
                "seed {seed}: test macro-F1 {:.4}, accuracy {:.4} (best epoch {}, val macro-F1 {:.4})",
                s.test.f1, s.test.accuracy, s.best_epoch, s.best_val_macro_f1
            ),
            (seed, RunOutcome::Stopped { epoch }) => {
                println!("seed {seed}: stopped after epoch {epoch}; rerun with --resume to continue")
            }
        }
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" | "validation" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Config(format!("unknown split {s:?} (train, val or test)"))),
    }
}

pub fn evaluate(cfg: &CliConfig, a: EvaluateArgs) -> Result<(), CliError> {
    let split = parse_split(&a.split)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut tc = cfg.train_config(cfg.train.seeds[0]);
    if let Some(p) = a.profile {
        tc.profile = p;
    }
    tc.ema_decay = ckpt.meta.ema_decay;
    let profile = tc.resolve_profile()?;
    let mut state = TrainState::new(&tc, &profile)?;
    ckpt.restore_into(&mut state)?;
    let manifest = load_materialized(&a.manifest)?;
    let data = LabeledImages::from_manifest(&manifest, split)?;
    let use_ema = state.ema.is_some();
    let r = eval_split(&mut state, &data, &tc, use_ema, split)?;

    write(&a.out_dir.join("confusion_matrix.txt"), &r.confusion.render_text())?;
    write(&a.out_dir.join("per_class.csv"), &per_class_csv(&r.per_class))?;
    let mut preds = String::from("id,label,prediction\n");
    for ((id, &y), &p) in data.ids.iter().zip(&data.labels).zip(&r.predictions) {
        let name = |i: usize| ClassLabel::from_index(i).map(|c| c.name()).unwrap_or("?");
        let _ = writeln!(preds, "{id},{},{}", name(y), name(p));
    }
    write(&a.out_dir.join("predictions.csv"), &preds)?;
    let metrics = serde_json::json!({
        "split": split.name(),
        "checkpoint_epoch": ckpt.meta.epoch,
        "samples": data.len(),
        "evaluated_with_ema": use_ema,
        "tencrop": tc.tencrop,
        "loss": r.loss,
        "metrics": r.metrics,
    });
    write(
        &a.out_dir.join("metrics.json"),
        &serde_json::to_string_pretty(&metrics).expect("metrics serialize"),
    )?;
    print!("{}", r.confusion.render_text());
    println!(
        "{} split: accuracy {:.4}, macro precision {:.4}, macro recall {:.4}, macro F1 {:.4}",
        split.name(),
        r.metrics.accuracy,
        r.metrics.precision,
        r.metrics.recall,
        r.metrics.f1
    );
    Ok(())
}

/// `dir/summary.json` if present, otherwise every `dir/*/summary.json`.
fn collect_summaries(dirs: &[PathBuf]) -> Result<Vec<RunSummary>, CliError> {
    let mut out = Vec::new();
    for d in dirs {
        let direct = d.join("summary.json");
        if direct.is_file() {
            out.push(RunSummary::load(&direct)?);
            continue;
        }
        let entries = fs::read_dir(d).map_err(|e| CliError::io(d, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path().join("summary.json")))
            .filter(|p| p.is_file())
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(CliError::Config(format!("no summary.json in or under {}", d.display())));
        }
        for p in found {
            out.push(RunSummary::load(&p)?);
        }
    }
    Ok(out)
}

pub fn compare(cfg: &CliConfig, a: CompareArgs) -> Result<(), CliError> {
    let baseline = collect_summaries(&a.baseline)?;
    let proposed = collect_summaries(&a.proposed)?;
    for (arm, runs) in [("baseline", &baseline), ("proposed", &proposed)] {
        if runs.len() < 2 {
            return Err(CliError::Config(format!(
                "{arm} arm has {} run; a paired comparison needs n ≥ 2 runs per arm",
                runs.len()
            )));
        }
    }
    let iters = a.bootstrap_iterations.unwrap_or(cfg.report.bootstrap_iterations);
    let out = compare_summaries(&baseline, &proposed, iters, a.seed)?;
    out.write(&a.out_dir)?;
    print!("{}", out.report);
    Ok(())
}

fn render_report(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run report: {} profile, seed {}\n", s.profile, s.seed);
    let _ = writeln!(out, "- parameters: {}", s.num_parameters);
    let _ = writeln!(out, "- architecture fingerprint: `{}`", s.fingerprint);
    let _ = writeln!(out, "- epochs: {} (best {}, validation macro-F1 {:.4})", s.epochs, s.best_epoch, s.best_val_macro_f1);
    let _ = writeln!(
        out,
        "- evaluation: {}, {}",
        if s.evaluated_with_ema { "EMA weights" } else { "live weights" },
        if s.tencrop { "ten-crop probability averaging" } else { "centre crop" }
    );
    let _ = writeln!(out, "- skipped steps: {}", s.skipped_steps);
    let _ = writeln!(
        out,
        "- split sizes: {} train / {} val / {} test, {} shared ids",
        s.id_audit.train, s.id_audit.val, s.id_audit.test, s.id_audit.overlap
    );
    let _ = writeln!(
        out,
        "- augmented images in a different split from their source: {} of {}\n",
        s.leakage.cross_split, s.leakage.augmented
    );
    let _ = writeln!(out, "## Test metrics\n");
    let _ = writeln!(out, "| Accuracy | Precision | Recall | F1 | Loss |");
    let _ = writeln!(out, "|---:|---:|---:|---:|---:|");
    let _ = writeln!(
        out,
        "| {:.2} | {:.2} | {:.2} | {:.2} | {:.4} |\n",
        100.0 * s.test.accuracy,
        100.0 * s.test.precision,
        100.0 * s.test.recall,
        100.0 * s.test.f1,
        s.test_loss
    );
    let _ = writeln!(out, "## Per class\n");
    let _ = writeln!(out, "| Class | Precision | Recall | F1 | Support |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|");
    for m in &s.per_class {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {:.2} | {} |",
            m.class,
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1,
            m.support
        );
    }
    let _ = writeln!(out, "\n## Confusion matrix\n\n```\n{}```", s.confusion.render_text());
    out
}

pub fn report(a: ReportArgs) -> Result<(), CliError> {
    let s = RunSummary::load(&a.run_dir.join("summary.json"))?;
    let text = render_report(&s);
    write(&a.run_dir.join("report.md"), &text)?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_is_largest_minority_class() {
        assert_eq!(default_target(&[2735, 3616, 60361, 1390, 2494]), 3616);
        assert_eq!(default_target(&[7; 5]), 7);
    }

    #[test]
    fn split_names() {
        assert_eq!(parse_split("Test").unwrap(), Split::Test);
        assert_eq!(parse_split("validation").unwrap(), Split::Val);
        assert!(parse_split("dev").is_err());
    }
}
