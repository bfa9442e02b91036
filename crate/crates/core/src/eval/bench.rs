//! Benchmark cases, the batch runner and its report.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use super::metrics::{average_precision_at_k, hits_at_k, mean, recall_at_k, recall_subset_at_k, HitsMode};
use crate::adapters::{run_query, run_session_round, Session};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::index::EmbeddingIndex;
use crate::model::{validate_query, QueryKind, RetrievalQuery, Stage};

/// One line of a benchmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: RetrievalQuery,
    pub ground_truth: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_group: Option<Vec<String>>,
    /// Chat turns, oldest first, all sharing `ground_truth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialog_rounds: Option<Vec<String>>,
}

impl BenchmarkCase {
    /// Turns a chat case is played as: `dialog_rounds` when given, else the
    /// query's dialog followed by its text.
    pub fn chat_turns(&self) -> Vec<String> {
        match &self.dialog_rounds {
            Some(rounds) if !rounds.is_empty() => rounds.clone(),
            _ => self
                .query
                .dialog
                .iter()
                .cloned()
                .chain(std::iter::once(self.query.text.clone()))
                .collect(),
        }
    }
}

/// Parses JSON-lines cases; blank lines are skipped. Case ids default to
/// `case-<line>`.
pub fn load_cases(text: &str) -> Result<Vec<BenchmarkCase>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut case: BenchmarkCase = serde_json::from_str(line)
                .map_err(|e| Error::InvalidCase(format!("line {}: {e}", i + 1)))?;
            case.id.get_or_insert_with(|| format!("case-{}", i + 1));
            Ok(case)
        })
        .collect()
}

/// Checks a case's shape, and ground-truth membership when the database
/// ids are known.
pub fn validate_case(case: &BenchmarkCase, database: Option<&HashSet<&str>>) -> Result<()> {
    let id = case.id.as_deref().unwrap_or("?");
    let invalid = |m: String| Error::InvalidCase(format!("{id}: {m}"));
    if case.ground_truth.is_empty() {
        return Err(invalid("ground_truth is empty".into()));
    }
    if case.query.kind == QueryKind::ChatIr {
        if case.chat_turns().iter().any(|t| t.trim().is_empty()) {
            return Err(invalid("empty dialog turn".into()));
        }
    } else {
        validate_query(&case.query).map_err(|e| invalid(e.to_string()))?;
    }
    if let Some(subset) = &case.subset_group {
        if !case.ground_truth.iter().any(|g| subset.contains(g)) {
            return Err(invalid("subset_group contains no ground-truth id".into()));
        }
    }
    if let Some(db) = database {
        let unknown = case
            .ground_truth
            .iter()
            .chain(case.subset_group.iter().flatten())
            .find(|g| !db.contains(g.as_str()));
        if let Some(u) = unknown {
            return Err(invalid(format!("{u:?} is not in the database")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub stages: Stage,
    pub workers: usize,
    pub hits_mode: HitsMode,
    pub recall_ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    pub map_ks: Vec<usize>,
    pub hits_ks: Vec<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            stages: Stage::Stage3,
            workers: 4,
            hits_mode: HitsMode::Cumulative,
            recall_ks: vec![1, 5, 10, 50],
            subset_ks: vec![1, 2, 3],
            map_ks: vec![5, 10, 25, 50],
            hits_ks: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub kind: QueryKind,
    /// Best 1-based rank of a ground-truth image in the final ranking.
    pub rank: Option<usize>,
    /// Same, per chat round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub round_ranks: Vec<Option<usize>>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hits: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_ms: u64,
    pub mean_case_ms: f64,
    pub max_case_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stages: u8,
    pub hits_mode: HitsMode,
    pub n_cases: usize,
    pub n_failed: usize,
    /// `name@k` → mean over the cases the metric applies to. Failed cases
    /// count as misses.
    pub metrics: BTreeMap<String, f64>,
    /// `Hits@k` → mean per round over chat cases that reached the round.
    pub hits: BTreeMap<String, Vec<f64>>,
    pub cases: Vec<CaseResult>,
    pub runtime: RuntimeStats,
}

fn best_rank(ranking: &[String], ground_truth: &[String]) -> Option<usize> {
    ranking
        .iter()
        .position(|id| ground_truth.contains(id))
        .map(|p| p + 1)
}

struct Ranked {
    final_ids: Vec<String>,
    rounds: Vec<Vec<String>>,
}

async fn rank_case(engine: &Engine, index: &EmbeddingIndex, case: &BenchmarkCase, last: Stage) -> Result<Ranked> {
    let ids = |r: &crate::model::RankedList| r.entries.iter().map(|e| e.image_id.clone()).collect::<Vec<_>>();
    if case.query.kind == QueryKind::ChatIr {
        let mut session = Session::new(case.id.clone().unwrap_or_default(), QueryKind::ChatIr);
        let mut rounds = Vec::new();
        for turn in case.chat_turns() {
            let out = run_session_round(engine, index, &mut session, &turn, None, last).await?;
            rounds.push(ids(&out.ranking));
        }
        Ok(Ranked {
            final_ids: rounds.last().cloned().unwrap_or_default(),
            rounds,
        })
    } else {
        let out = run_query(engine, index, &case.query, last).await?;
        Ok(Ranked {
            final_ids: ids(&out.ranking),
            rounds: Vec::new(),
        })
    }
}

fn score_case(case: &BenchmarkCase, ranked: Option<&Ranked>, opts: &BenchOptions) -> (BTreeMap<String, f64>, BTreeMap<String, Vec<f64>>) {
    let empty = Vec::new();
    let final_ids = ranked.map_or(&empty, |r| &r.final_ids);
    let gt = &case.ground_truth;
    let mut metrics = BTreeMap::new();
    for &k in &opts.recall_ks {
        metrics.insert(format!("Recall@{k}"), recall_at_k(final_ids, gt, k));
    }
    if case.subset_group.is_some() {
        for &k in &opts.subset_ks {
            let v = recall_subset_at_k(final_ids, case.subset_group.as_deref(), gt, k).unwrap_or(0.0);
            metrics.insert(format!("Recall_subset@{k}"), v);
        }
    }
    for &k in &opts.map_ks {
        metrics.insert(format!("mAP@{k}"), average_precision_at_k(final_ids, gt, k));
    }
    let mut hits = BTreeMap::new();
    if case.query.kind == QueryKind::ChatIr {
        let n_rounds = case.chat_turns().len();
        for &k in &opts.hits_ks {
            let values = match ranked {
                Some(r) => hits_at_k(&r.rounds, gt, k, opts.hits_mode),
                None => vec![0.0; n_rounds],
            };
            hits.insert(format!("Hits@{k}"), values);
        }
    }
    (metrics, hits)
}

/// Runs every case through stages 1..`opts.stages`, `opts.workers` at a
/// time. A failing case is recorded with its error and scored as a miss.
pub async fn run_benchmark(
    engine: &Engine,
    index: &EmbeddingIndex,
    cases: &[BenchmarkCase],
    opts: &BenchOptions,
) -> MetricReport {
    let started = Instant::now();
    let results: Vec<CaseResult> = futures::stream::iter(cases.iter().enumerate())
        .map(|(i, case)| async move {
            let t0 = Instant::now();
            let outcome = rank_case(engine, index, case, opts.stages).await;
            let elapsed_ms = t0.elapsed().as_millis() as u64;
            let ranked = outcome.as_ref().ok();
            let (metrics, hits) = score_case(case, ranked, opts);
            CaseResult {
                id: case.id.clone().unwrap_or_else(|| format!("case-{}", i + 1)),
                kind: case.query.kind,
                rank: ranked.and_then(|r| best_rank(&r.final_ids, &case.ground_truth)),
                round_ranks: ranked
                    .map(|r| r.rounds.iter().map(|ids| best_rank(ids, &case.ground_truth)).collect())
                    .unwrap_or_default(),
                metrics,
                hits,
                error: outcome.err().map(|e| e.to_string()),
                elapsed_ms,
            }
        })
        .buffered(opts.workers.max(1))
        .collect()
        .await;
    aggregate(results, opts, started.elapsed().as_millis() as u64)
}

fn aggregate(cases: Vec<CaseResult>, opts: &BenchOptions, total_ms: u64) -> MetricReport {
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut per_round: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for c in &cases {
        for (name, v) in &c.metrics {
            per_metric.entry(name.clone()).or_default().push(*v);
        }
        for (name, values) in &c.hits {
            let rounds = per_round.entry(name.clone()).or_default();
            for (r, v) in values.iter().enumerate() {
                if rounds.len() <= r {
                    rounds.push(Vec::new());
                }
                rounds[r].push(*v);
            }
        }
    }
    let elapsed: Vec<f64> = cases.iter().map(|c| c.elapsed_ms as f64).collect();
    MetricReport {
        stages: opts.stages.number(),
        hits_mode: opts.hits_mode,
        n_cases: cases.len(),
        n_failed: cases.iter().filter(|c| c.error.is_some()).count(),
        metrics: per_metric.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
        hits: per_round
            .into_iter()
            .map(|(k, rounds)| (k, rounds.iter().map(|r| mean(r)).collect()))
            .collect(),
        runtime: RuntimeStats {
            total_ms,
            mean_case_ms: mean(&elapsed),
            max_case_ms: cases.iter().map(|c| c.elapsed_ms).max().unwrap_or(0),
        },
        cases,
    }
}

/// Metric names sorted by family then k, e.g. Recall@1 before Recall@10.
fn ordered_names<'a>(names: impl Iterator<Item = &'a String>) -> Vec<&'a String> {
    let mut names: Vec<&String> = names.collect();
    names.sort_by_key(|n| {
        let (family, k) = n.split_once('@').unwrap_or((n.as_str(), "0"));
        let rank = ["Recall", "Recall_subset", "mAP", "Hits"]
            .iter()
            .position(|f| *f == family)
            .unwrap_or(9);
        (rank, k.parse::<usize>().unwrap_or(0))
    });
    names
}

impl MetricReport {
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Benchmark report\n");
        let _ = writeln!(
            md,
            "stages: {} | cases: {} | failed: {} | total: {} ms | mean per case: {:.1} ms\n",
            self.stages, self.n_cases, self.n_failed, self.runtime.total_ms, self.runtime.mean_case_ms
        );
        if !self.metrics.is_empty() {
            let _ = writeln!(md, "| metric | value |\n|---|---|");
            for name in ordered_names(self.metrics.keys()) {
                let _ = writeln!(md, "| {name} | {:.4} |", self.metrics[name]);
            }
            md.push('\n');
        }
        if !self.hits.is_empty() {
            let rounds = self.hits.values().map(Vec::len).max().unwrap_or(0);
            let _ = write!(md, "| {:?} hits |", self.hits_mode);
            for r in 1..=rounds {
                let _ = write!(md, " round {r} |");
            }
            let _ = write!(md, "\n|---|");
            md.push_str(&"---|".repeat(rounds));
            md.push('\n');
            for name in ordered_names(self.hits.keys()) {
                let _ = write!(md, "| {name} |");
                for v in &self.hits[name] {
                    let _ = write!(md, " {v:.4} |");
                }
                md.push('\n');
            }
            md.push('\n');
        }
        let failed: Vec<&CaseResult> = self.cases.iter().filter(|c| c.error.is_some()).collect();
        if !failed.is_empty() {
            let _ = writeln!(md, "## Failed cases\n");
            for c in failed {
                let _ = writeln!(md, "- {}: {}", c.id, c.error.as_deref().unwrap_or(""));
            }
        }
        md
    }
}
