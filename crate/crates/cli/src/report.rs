//! Run summary assembled from whatever stages exist in a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::Result;
use serde::Serialize;

use qarsmith_core::filter::ThresholdCurvePoint;
use qarsmith_core::generate::DropRecord;
use qarsmith_core::model::{CriticScore, QarInstance};
use qarsmith_core::stats::StatsReport;
use qarsmith_core::store::Store;

use crate::pipeline::{SkipRecord, Stage};

#[derive(Debug, Clone, Serialize)]
pub struct StageLine {
    pub stage: String,
    pub complete: bool,
    /// Record count per output stage that exists.
    pub outputs: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterSummary {
    pub threshold: f64,
    pub scored: usize,
    pub kept: usize,
    pub rejected: usize,
    /// Curve points over labeled instances, if any labels exist.
    pub curve: Vec<ThresholdCurvePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub stages: Vec<StageLine>,
    /// Counts of dropped or skipped items keyed by "<stage>:<rule>".
    pub drops: BTreeMap<String, u64>,
    pub filter: Option<FilterSummary>,
    pub stats: Option<StatsReport>,
}

impl RunReport {
    pub fn is_empty(&self) -> bool {
        self.stages.iter().all(|s| s.outputs.is_empty())
    }
}

pub fn build_run_report(store: &Store, threshold: f64) -> Result<RunReport> {
    let m = store.manifest();
    let stages = Stage::ALL
        .iter()
        .map(|s| StageLine {
            stage: s.name().into(),
            complete: store.has_stage(s.primary()),
            outputs: s
                .outputs()
                .iter()
                .filter_map(|o| m.stage(o).map(|e| (o.to_string(), e.count)))
                .collect(),
        })
        .collect();

    let mut drops: BTreeMap<String, u64> = BTreeMap::new();
    for stage in ["curate_skips", "verbalize_skips"] {
        if store.has_stage(stage) {
            for s in store.read_stage::<SkipRecord>(stage)? {
                *drops.entry(format!("{}:{}", s.stage, s.reason)).or_default() += 1;
            }
        }
    }
    if store.has_stage("drops") {
        for d in store.read_stage::<DropRecord>("drops")? {
            *drops.entry(format!("generate:{}", d.rule)).or_default() += 1;
        }
    }

    let filter = if store.has_stage("filtered") && store.has_stage("scores") {
        let scores: Vec<CriticScore> = store.read_stage("scores")?;
        let kept = store.read_stage::<QarInstance>("filtered")?.len();
        let rejected = scores.len().saturating_sub(kept);
        if rejected > 0 {
            drops.insert("filter:below_threshold".into(), rejected as u64);
        }
        Some(FilterSummary {
            threshold,
            scored: scores.len(),
            kept,
            rejected,
            curve: store.read_stage("filter_curve")?,
        })
    } else {
        None
    };

    let stats = if store.has_stage("stats") {
        store.read_stage::<StatsReport>("stats")?.into_iter().next()
    } else {
        None
    };

    Ok(RunReport {
        run_id: m.run_id.clone(),
        seed: m.seed,
        config_digest: m.config_digest.clone(),
        stages,
        drops,
        filter,
        stats,
    })
}

pub fn report_text(r: &RunReport) -> String {
    let mut s = String::new();
    if r.is_empty() {
        s.push_str("no stages\n");
        return s;
    }
    let _ = writeln!(s, "run {} (seed {}, config {})", r.run_id, r.seed, &r.config_digest[..r.config_digest.len().min(12)]);
    let _ = writeln!(s);
    for line in &r.stages {
        let mark = if line.complete { "done" } else { "-" };
        let outs: Vec<String> = line.outputs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "{:<14} {:<5} {}", line.stage, mark, outs.join(" "));
    }
    if !r.drops.is_empty() {
        let _ = writeln!(s, "\ndrops");
        for (k, v) in &r.drops {
            let _ = writeln!(s, "  {k:<40} {v}");
        }
    }
    if let Some(f) = &r.filter {
        let _ = writeln!(
            s,
            "\nfilter: kept {} of {} at threshold {} ({} rejected)",
            f.kept, f.scored, f.threshold, f.rejected
        );
        for p in &f.curve {
            let _ = writeln!(
                s,
                "  tau {:.2}  retained {:>5}  precision {}",
                p.threshold,
                p.retained_count,
                if p.precision_undefined { "n/a".to_string() } else { format!("{:.3}", p.precision) }
            );
        }
    }
    if let Some(st) = &r.stats {
        let t = &st.summary.total;
        let _ = writeln!(
            s,
            "\ncorpus: {} QARs over {} images, {:.2} per image",
            t.qars, t.images, t.qs_per_image
        );
    }
    s
}
