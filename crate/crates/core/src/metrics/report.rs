use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::rng::derive_seed;
use crate::rng::Stream;

use super::confusion::ClassMetrics;
use super::stats::{bootstrap_ci, cohens_d, mean, paired_t_test, sample_std, ConfidenceInterval};
use super::MetricsError;

/// Per-class table: accuracy, precision, recall and F1 in percent, plus support.
pub fn per_class_csv(metrics: &[ClassMetrics]) -> String {
    let mut out = String::from("class,accuracy_pct,precision_pct,recall_pct,f1_pct,support\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{}",
            m.class,
            100.0 * m.accuracy,
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1,
            m.support
        );
    }
    out
}

/// Per-seed values of one metric under both arms, paired by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSamples {
    pub metric: String,
    pub baseline: Vec<f64>,
    pub proposed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub proposed_mean: f64,
    pub proposed_std: f64,
    /// `proposed_mean − baseline_mean`
    pub delta: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// Paired effect size, proposed minus baseline.
    pub cohens_d: f64,
    pub baseline_ci: ConfidenceInterval,
    pub proposed_ci: ConfidenceInterval,
}

/// Summary statistics, paired tests and bootstrap intervals for every metric.
pub fn compare_arms(samples: &[ArmSamples], bootstrap_iterations: usize, seed: u64) -> Result<Vec<ComparisonRow>, MetricsError> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let with_context = |e: MetricsError| match e {
                MetricsError::DegenerateVariance { .. } => MetricsError::DegenerateVariance {
                    context: Some(s.metric.clone()),
                },
                other => other,
            };
            let tt = paired_t_test(&s.proposed, &s.baseline).map_err(with_context)?;
            let d = cohens_d(&s.proposed, &s.baseline).map_err(with_context)?;
            let ci_seed = derive_seed(seed, Stream::Bootstrap, &[i as u64]);
            Ok(ComparisonRow {
                metric: s.metric.clone(),
                baseline_mean: mean(&s.baseline),
                baseline_std: sample_std(&s.baseline),
                proposed_mean: mean(&s.proposed),
                proposed_std: sample_std(&s.proposed),
                delta: mean(&s.proposed) - mean(&s.baseline),
                t: tt.t,
                df: tt.df,
                p: tt.p,
                cohens_d: d,
                baseline_ci: bootstrap_ci(&s.baseline, bootstrap_iterations, 0.95, ci_seed)?,
                proposed_ci: bootstrap_ci(&s.proposed, bootstrap_iterations, 0.95, ci_seed ^ 1)?,
            })
        })
        .collect()
}

fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

/// Markdown comparison table: mean ± std per arm, absolute Δ, paired t, p,
/// paired Cohen's d and 95% bootstrap intervals.
pub fn render_comparison(rows: &[ComparisonRow], baseline: &str, proposed: &str, runs: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Overall performance comparison across {runs} independent runs\n");
    let _ = writeln!(
        out,
        "| Metric | {baseline} | {proposed} | Absolute Δ | t (df) | p-value | Cohen's d (paired) | 95% CI {baseline} | 95% CI {proposed} |"
    );
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|---:|---:|---:|");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:+.2} | {:.2} ({}) | {} | {:.2} | [{:.2}, {:.2}] | [{:.2}, {:.2}] |",
            r.metric,
            r.baseline_mean,
            r.baseline_std,
            r.proposed_mean,
            r.proposed_std,
            r.delta,
            r.t,
            r.df,
            format_p(r.p),
            r.cohens_d,
            r.baseline_ci.lo,
            r.baseline_ci.hi,
            r.proposed_ci.lo,
            r.proposed_ci.hi,
        );
    }
    let _ = writeln!(
        out,
        "\nPaired t-tests pair runs by seed (n = {runs}); Cohen's d is mean(d)/sd(d) of the paired differences; \
         intervals are percentile bootstrap over run means."
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_formatting() {
        assert_eq!(format_p(0.0004), "<0.001");
        assert_eq!(format_p(0.0123), "0.012");
    }

    #[test]
    fn swapped_arms_negate() {
        let s = ArmSamples {
            metric: "Accuracy (%)".into(),
            baseline: vec![90.0, 91.0, 90.5, 90.2],
            proposed: vec![92.0, 92.5, 91.9, 92.4],
        };
        let swapped = ArmSamples {
            metric: s.metric.clone(),
            baseline: s.proposed.clone(),
            proposed: s.baseline.clone(),
        };
        let a = &compare_arms(&[s], 200, 0).unwrap()[0];
        let b = &compare_arms(&[swapped], 200, 0).unwrap()[0];
        assert_eq!(a.delta, -b.delta);
        assert_eq!(a.t, -b.t);
        assert_eq!(a.cohens_d, -b.cohens_d);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn degenerate_names_metric() {
        let s = ArmSamples {
            metric: "F1-Score (%)".into(),
            baseline: vec![1.0, 2.0],
            proposed: vec![1.0, 2.0],
        };
        match compare_arms(&[s], 10, 0) {
            Err(MetricsError::DegenerateVariance { context }) => assert_eq!(context.as_deref(), Some("F1-Score (%)")),
            other => panic!("{other:?}"),
        }
    }
}
