use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::DatasetManifest;
use crate::metrics::{compare_arms, render_comparison, ArmSamples, ComparisonRow};

use super::experiment::{run_experiment, RunOptions, RunOutcome, RunSummary};
use super::{TrainConfig, TrainError};

pub const BASELINE_LABEL: &str = "Baseline";
pub const PROPOSED_LABEL: &str = "Proposed";

/// Proposed stack vs ablated baseline over a shared list of seeds.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub seeds: Vec<u64>,
    pub proposed: TrainConfig,
    pub baseline: TrainConfig,
    pub out_dir: PathBuf,
    /// Concurrent runs; each run has its own directory.
    pub parallel: usize,
    pub bootstrap_iterations: usize,
}

impl ExperimentPlan {
    /// Nine seeds `0..9`, desk configuration and its ablation.
    pub fn desk(out_dir: impl Into<PathBuf>) -> Self {
        let proposed = TrainConfig::desk();
        Self {
            seeds: (0..9).collect(),
            baseline: proposed.ablated_baseline(),
            proposed,
            out_dir: out_dir.into(),
            parallel: 1,
            bootstrap_iterations: 10_000,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(TrainError::Config("seeds must be distinct".into()));
        }
        if self.seeds.len() < 2 {
            return Err(TrainError::Config("a comparison needs at least 2 seeds".into()));
        }
        if self.parallel == 0 {
            return Err(TrainError::Config("parallel must be at least 1".into()));
        }
        self.proposed.validate()?;
        self.baseline.validate()
    }

    pub fn run_dir(&self, arm: &str, seed: u64) -> PathBuf {
        self.out_dir.join(arm.to_lowercase()).join(format!("seed_{seed}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOutput {
    pub rows: Vec<ComparisonRow>,
    /// Markdown table (`comparison.md`).
    pub report: String,
    /// One line per (arm, seed) (`per_run.csv`).
    pub per_run_csv: String,
}

impl ComparisonOutput {
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        for (name, text) in [
            ("comparison.md", self.report.clone()),
            ("per_run.csv", self.per_run_csv.clone()),
            ("comparison.json", serde_json::to_string_pretty(&self.rows)?),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| TrainError::io(&path, e))?;
        }
        Ok(())
    }
}

fn by_seed<'a>(arm: &str, runs: &'a [RunSummary]) -> Result<BTreeMap<u64, &'a RunSummary>, TrainError> {
    let mut map = BTreeMap::new();
    for r in runs {
        if map.insert(r.seed, r).is_some() {
            return Err(TrainError::Pairing(format!("{arm} arm has seed {} twice", r.seed)));
        }
    }
    Ok(map)
}

/// Pairs runs by seed and reports accuracy, precision, recall and F1 in percent.
pub fn compare_summaries(
    baseline: &[RunSummary],
    proposed: &[RunSummary],
    bootstrap_iterations: usize,
    seed: u64,
) -> Result<ComparisonOutput, TrainError> {
    let b = by_seed("baseline", baseline)?;
    let p = by_seed("proposed", proposed)?;
    if !b.keys().eq(p.keys()) {
        return Err(TrainError::Pairing(format!(
            "baseline seeds {:?} differ from proposed seeds {:?}",
            b.keys().collect::<Vec<_>>(),
            p.keys().collect::<Vec<_>>()
        )));
    }
    let metrics: [(&str, fn(&RunSummary) -> f64); 4] = [
        ("Accuracy (%)", |r| r.test.accuracy),
        ("Precision (%)", |r| r.test.precision),
        ("Recall (%)", |r| r.test.recall),
        ("F1-Score (%)", |r| r.test.f1),
    ];
    let samples: Vec<ArmSamples> = metrics
        .iter()
        .map(|(name, f)| ArmSamples {
            metric: name.to_string(),
            baseline: b.values().map(|r| 100.0 * f(r)).collect(),
            proposed: p.values().map(|r| 100.0 * f(r)).collect(),
        })
        .collect();
    let rows = compare_arms(&samples, bootstrap_iterations, seed)?;
    let report = render_comparison(&rows, BASELINE_LABEL, PROPOSED_LABEL, b.len());

    let mut csv = String::from("arm,seed,accuracy,precision,recall,f1,test_loss,best_epoch,best_val_macro_f1\n");
    for (arm, runs) in [("baseline", &b), ("proposed", &p)] {
        for r in runs.values() {
            writeln!(
                csv,
                "{arm},{},{},{},{},{},{},{},{}",
                r.seed, r.test.accuracy, r.test.precision, r.test.recall, r.test.f1, r.test_loss, r.best_epoch, r.best_val_macro_f1
            )
            .unwrap();
        }
    }
    Ok(ComparisonOutput {
        rows,
        report,
        per_run_csv: csv,
    })
}

fn summaries_in(dir: &Path) -> Result<Vec<RunSummary>, TrainError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| TrainError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path().join("summary.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    for p in paths {
        out.push(RunSummary::load(&p)?);
    }
    if out.is_empty() {
        return Err(TrainError::Pairing(format!("no run summaries under {}", dir.display())));
    }
    Ok(out)
}

/// Compares previously completed runs laid out as `<arm_dir>/<run>/summary.json`.
pub fn compare_run_dirs(
    baseline_dir: &Path,
    proposed_dir: &Path,
    bootstrap_iterations: usize,
    seed: u64,
) -> Result<ComparisonOutput, TrainError> {
    compare_summaries(&summaries_in(baseline_dir)?, &summaries_in(proposed_dir)?, bootstrap_iterations, seed)
}

/// Runs every (arm, seed) pair, then writes `comparison.md`, `per_run.csv` and
/// `comparison.json` into `plan.out_dir`. Finished runs are resumed, not redone.
pub fn multi_run_compare(plan: &ExperimentPlan, manifest: &DatasetManifest) -> Result<ComparisonOutput, TrainError> {
    plan.validate()?;
    let jobs: Vec<(&str, u64, TrainConfig)> = plan
        .seeds
        .iter()
        .flat_map(|&s| {
            [
                (BASELINE_LABEL, s, TrainConfig { seed: s, ..plan.baseline.clone() }),
                (PROPOSED_LABEL, s, TrainConfig { seed: s, ..plan.proposed.clone() }),
            ]
        })
        .collect();
    let run = |(arm, seed, cfg): &(&str, u64, TrainConfig)| -> Result<(String, RunSummary), TrainError> {
        let dir = plan.run_dir(arm, *seed);
        let done = dir.join("summary.json");
        if done.is_file() {
            return Ok((arm.to_string(), RunSummary::load(&done)?));
        }
        log::info!("{arm} seed {seed}");
        let opts = RunOptions {
            resume: true,
            stop_after: None,
        };
        match run_experiment(cfg, manifest, &dir, &opts)? {
            RunOutcome::Completed(s) => Ok((arm.to_string(), *s)),
            RunOutcome::Stopped { .. } => unreachable!("no stop requested"),
        }
    };
    let results: Vec<(String, RunSummary)> = if plan.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.parallel)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_, _>>())?
    } else {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    };
    let (mut baseline, mut proposed) = (Vec::new(), Vec::new());
    for (arm, s) in results {
        if arm == BASELINE_LABEL {
            baseline.push(s);
        } else {
            proposed.push(s);
        }
    }
    let out = compare_summaries(&baseline, &proposed, plan.bootstrap_iterations, plan.seeds[0])?;
    out.write(&plan.out_dir)?;
    Ok(out)
}
