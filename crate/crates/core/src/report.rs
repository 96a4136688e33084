//! Tables, curves and plot data recomputed from a run directory's raw files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    curve_csv, interpolate_and_aggregate, AggregatedCurve, AnalysisError, PerturbVariant, ProbeRecord, SimilarityCurve,
    TargetMode, TrialRecord,
};
use crate::answer::Question;
use crate::config::ReportConfig;
use crate::engine::{
    compute_budget, BudgetReport, ExperimentConfig, FirstStepCandidate, Phase, ScoreLine, Selection, TimingLine,
    TraceRecord,
};
use crate::metrics::{difficulty_profile, maj_at_k, pass_at_k, pearson_phi, Bucket, Correlation, MajMode, MetricsError};
use crate::store::{RecordFile, RunManifest, RunStore, StoreError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("run manifest has no usable experiment settings: {0}")]
    Manifest(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format {other:?} (expected md, csv or json)")),
        }
    }
}

/// Everything a report reads, loaded once from the run directory.
#[derive(Debug, Clone)]
pub struct ReportInputs {
    pub manifest: RunManifest,
    pub experiment: ExperimentConfig,
    pub candidates: Vec<FirstStepCandidate>,
    pub scores: Vec<ScoreLine>,
    pub selections: Vec<Selection>,
    pub records: Vec<TraceRecord>,
    pub baseline: Vec<TraceRecord>,
    pub timings: Vec<TimingLine>,
    pub probes: Vec<ProbeRecord>,
    pub trials: Vec<TrialRecord>,
    pub curves: Vec<SimilarityCurve>,
}

impl ReportInputs {
    pub fn load(store: &RunStore) -> Result<Self, ReportError> {
        let manifest = store.manifest();
        let experiment = match manifest.config.get("experiment") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| ReportError::Manifest(e.to_string()))?,
            None => return Err(ReportError::Manifest("missing \"experiment\"".into())),
        };
        Ok(Self {
            manifest,
            experiment,
            candidates: store.load(RecordFile::Candidates)?,
            scores: store.load(RecordFile::Scores)?,
            selections: store.load(RecordFile::Selections)?,
            records: store.load(RecordFile::Records)?,
            baseline: store.load(RecordFile::Baseline)?,
            timings: store.load(RecordFile::Timings)?,
            probes: store.load(RecordFile::Probes)?,
            trials: store.load(RecordFile::Trials)?,
            curves: store.load(RecordFile::Curves)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveSource {
    /// Rank-order prefix of the continued traces.
    PrunedRecords,
    /// Plain-sampling traces ordered by their first-step reward.
    BaselineReranked,
    /// Plain-sampling traces in seed order.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajPoint {
    /// M for pruned points, K for plain-sampling points.
    pub m: usize,
    pub accuracy: f64,
    pub questions: usize,
    pub source: CurveSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub benchmark: String,
    pub questions: usize,
    pub plain_n: Option<f64>,
    pub plain_m: Option<f64>,
    pub pruned: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: Bucket,
    pub questions: usize,
    pub first_step_accuracy: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub traces: usize,
    pub first_step_accuracy: f64,
    pub final_accuracy: f64,
    pub final_given_first_correct: Option<f64>,
    pub final_given_first_wrong: Option<f64>,
    /// Over traces of questions that are neither always right nor always wrong.
    pub correlation: Option<Correlation>,
    pub buckets: Vec<BucketRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub variant: PerturbVariant,
    pub delta: Option<i64>,
    pub questions: usize,
    pub trials: usize,
    pub trial_accuracy: f64,
    pub question_mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySeries {
    pub model_family: String,
    pub segmentation: String,
    pub target: String,
    pub curve: AggregatedCurve,
}

impl SimilaritySeries {
    pub fn file_name(&self) -> String {
        format!("similarity_{}_{}_{}.csv", self.model_family, self.segmentation, self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportData {
    pub run_id: String,
    pub n_candidates: usize,
    pub keep_m: usize,
    pub pruned_curve: Vec<MajPoint>,
    pub baseline_curve: Vec<MajPoint>,
    pub baseline_n_accuracy: Option<f64>,
    /// Smallest M whose pruned accuracy reaches plain maj@N.
    pub marker: Option<usize>,
    pub benchmarks: Vec<BenchmarkRow>,
    pub average: BenchmarkRow,
    pub budget: Option<BudgetReport>,
    pub token_ratio: Option<f64>,
    pub wall_time_ratio: Option<f64>,
    pub pass_at_k: Vec<(usize, f64)>,
    pub probe: Option<ProbeSummary>,
    pub perturbation: Vec<PerturbRow>,
    pub similarity: Vec<SimilaritySeries>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn rank_key(r: &TraceRecord) -> (usize, u64) {
    (r.rank.unwrap_or(usize::MAX), r.seed)
}

struct Grouped<'a> {
    /// Continued traces of questions with a complete selection, in rank order.
    pruned: BTreeMap<&'a str, Vec<&'a TraceRecord>>,
    /// Plain-sampling traces with all N seeds present, in seed order.
    baseline: BTreeMap<&'a str, Vec<&'a TraceRecord>>,
    rewards: HashMap<(&'a str, u64), f64>,
}

fn group<'a>(inputs: &'a ReportInputs) -> Grouped<'a> {
    let exp = &inputs.experiment;
    let mut records: BTreeMap<&str, BTreeMap<u64, &TraceRecord>> = BTreeMap::new();
    for r in &inputs.records {
        records.entry(&r.question_id).or_default().insert(r.seed, r);
    }
    let mut pruned = BTreeMap::new();
    for sel in &inputs.selections {
        let Some(by_seed) = records.get(sel.question_id.as_str()) else { continue };
        let kept: Option<Vec<&TraceRecord>> = sel.selected.iter().map(|s| by_seed.get(s).copied()).collect();
        if let Some(mut kept) = kept {
            kept.sort_by_key(|r| rank_key(r));
            pruned.insert(sel.question_id.as_str(), kept);
        }
    }
    let seeds = exp.seeds();
    let mut base: BTreeMap<&str, BTreeMap<u64, &TraceRecord>> = BTreeMap::new();
    for r in &inputs.baseline {
        base.entry(&r.question_id).or_default().insert(r.seed, r);
    }
    let baseline = base
        .into_iter()
        .filter_map(|(q, by_seed)| {
            let all: Option<Vec<&TraceRecord>> = seeds.iter().map(|s| by_seed.get(s).copied()).collect();
            all.map(|a| (q, a))
        })
        .collect();
    let rewards = inputs
        .scores
        .iter()
        .map(|l| ((l.question_id.as_str(), l.seed), l.reward.value))
        .collect();
    Grouped {
        pruned,
        baseline,
        rewards,
    }
}

fn maj(records: &[&TraceRecord], k: usize, mode: MajMode) -> Result<f64, MetricsError> {
    let owned: Vec<TraceRecord> = records.iter().map(|r| (*r).clone()).collect();
    maj_at_k(&owned, k, mode)
}

/// Reward order, best first, ties by ascending seed.
fn reranked<'a>(records: &[&'a TraceRecord], rewards: &HashMap<(&str, u64), f64>) -> Option<Vec<&'a TraceRecord>> {
    let mut keyed: Vec<(f64, &TraceRecord)> = records
        .iter()
        .map(|r| rewards.get(&(r.question_id.as_str(), r.seed)).map(|v| (*v, *r)))
        .collect::<Option<_>>()?;
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.seed.cmp(&b.1.seed)));
    Some(keyed.into_iter().map(|(_, r)| r).collect())
}

fn dataset_accuracy<'a>(
    groups: impl Iterator<Item = &'a Vec<&'a TraceRecord>>,
    k: usize,
    mode: MajMode,
) -> Result<(Option<f64>, usize), MetricsError> {
    let accs: Vec<f64> = groups
        .filter(|g| g.len() >= k)
        .map(|g| maj(g, k, mode))
        .collect::<Result<_, _>>()?;
    Ok((mean(&accs), accs.len()))
}

fn pruned_curve(g: &Grouped, exp: &ExperimentConfig, cfg: &ReportConfig) -> Result<Vec<MajPoint>, MetricsError> {
    let reranked: Vec<Vec<&TraceRecord>> = g.baseline.values().filter_map(|b| reranked(b, &g.rewards)).collect();
    let mut out = Vec::new();
    for &m in cfg.m_values.iter().filter(|&&m| m >= 1 && m <= exp.n_candidates) {
        let (acc, questions, source) = if m <= exp.keep_m && !g.pruned.is_empty() {
            let (a, n) = dataset_accuracy(g.pruned.values(), m, MajMode::PrefixTopK)?;
            (a, n, CurveSource::PrunedRecords)
        } else if !reranked.is_empty() {
            let (a, n) = dataset_accuracy(reranked.iter(), m, MajMode::PrefixTopK)?;
            (a, n, CurveSource::BaselineReranked)
        } else {
            (None, 0, CurveSource::PrunedRecords)
        };
        if let Some(accuracy) = acc {
            out.push(MajPoint {
                m,
                accuracy,
                questions,
                source,
            });
        }
    }
    Ok(out)
}

fn baseline_curve(g: &Grouped, exp: &ExperimentConfig, cfg: &ReportConfig) -> Result<Vec<MajPoint>, MetricsError> {
    let mut out = Vec::new();
    for &k in cfg.m_values.iter().filter(|&&k| k >= 1 && k <= exp.n_candidates) {
        let mode = if k == exp.n_candidates { MajMode::PrefixTopK } else { cfg.baseline_mode };
        if let (Some(accuracy), questions) = dataset_accuracy(g.baseline.values(), k, mode)? {
            out.push(MajPoint {
                m: k,
                accuracy,
                questions,
                source: CurveSource::Baseline,
            });
        }
    }
    Ok(out)
}

/// Smallest M on the pruned curve whose accuracy reaches `target`; needs at least two points.
pub fn marker(curve: &[MajPoint], target: f64) -> Option<usize> {
    if curve.len() < 2 {
        return None;
    }
    curve.iter().find(|p| p.accuracy >= target - 1e-12).map(|p| p.m)
}

fn benchmark_rows(
    g: &Grouped,
    exp: &ExperimentConfig,
    cfg: &ReportConfig,
    questions: Option<&[Question]>,
) -> Result<(Vec<BenchmarkRow>, BenchmarkRow), MetricsError> {
    let tag_of: HashMap<&str, &str> = questions
        .into_iter()
        .flatten()
        .map(|q| (q.id.as_str(), q.tag()))
        .collect();
    let tag = |id: &str| tag_of.get(id).copied().unwrap_or("default").to_string();
    let mut tags: BTreeMap<String, (Vec<&str>, Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (id, recs) in &g.pruned {
        let e = tags.entry(tag(id)).or_default();
        e.0.push(id);
        e.3.push(maj(recs, exp.keep_m.min(recs.len()), MajMode::PrefixTopK)?);
    }
    for (id, recs) in &g.baseline {
        let e = tags.entry(tag(id)).or_default();
        if !e.0.contains(id) {
            e.0.push(id);
        }
        e.1.push(maj(recs, exp.n_candidates, MajMode::PrefixTopK)?);
        e.2.push(maj(recs, exp.keep_m, cfg.baseline_mode)?);
    }
    let rows: Vec<BenchmarkRow> = tags
        .into_iter()
        .map(|(benchmark, (ids, n, m, p))| BenchmarkRow {
            benchmark,
            questions: ids.len(),
            plain_n: mean(&n),
            plain_m: mean(&m),
            pruned: mean(&p),
        })
        .collect();
    let col = |f: fn(&BenchmarkRow) -> Option<f64>| -> Option<f64> {
        rows.iter().map(f).collect::<Option<Vec<f64>>>().and_then(|v| mean(&v))
    };
    let average = BenchmarkRow {
        benchmark: "Average".into(),
        questions: rows.iter().map(|r| r.questions).sum(),
        plain_n: col(|r| r.plain_n),
        plain_m: col(|r| r.plain_m),
        pruned: col(|r| r.pruned),
    };
    Ok((rows, average))
}

fn budget(inputs: &ReportInputs, g: &Grouped) -> Option<BudgetReport> {
    if g.pruned.is_empty() {
        return None;
    }
    let cands: HashMap<(&str, u64), &FirstStepCandidate> = inputs
        .candidates
        .iter()
        .map(|c| ((c.question_id.as_str(), c.seed), c))
        .collect();
    let per_question: Vec<BudgetReport> = inputs
        .selections
        .iter()
        .filter_map(|sel| {
            let recs = g.pruned.get(sel.question_id.as_str())?;
            let discarded: Vec<FirstStepCandidate> = sel
                .discarded
                .iter()
                .filter_map(|s| cands.get(&(sel.question_id.as_str(), *s)).map(|c| (*c).clone()))
                .collect();
            let recs: Vec<TraceRecord> = recs.iter().map(|r| (*r).clone()).collect();
            let base: Option<Vec<TraceRecord>> = g
                .baseline
                .get(sel.question_id.as_str())
                .map(|b| b.iter().map(|r| (*r).clone()).collect());
            Some(compute_budget(&recs, &discarded, base.as_deref()))
        })
        .collect();
    Some(BudgetReport::combine(&per_question))
}

fn wall_time_ratio(inputs: &ReportInputs, g: &Grouped) -> Option<f64> {
    let mut last: HashMap<(&str, Phase), f64> = HashMap::new();
    for t in &inputs.timings {
        last.insert((t.question_id.as_str(), t.phase), t.seconds);
    }
    let (mut pruned, mut plain) = (0.0, 0.0);
    let mut any = false;
    for id in g.pruned.keys() {
        let (Some(b), Some(c)) = (last.get(&(*id, Phase::Baseline)), last.get(&(*id, Phase::Continue))) else {
            continue;
        };
        let s = last.get(&(*id, Phase::Sample)).copied().unwrap_or(0.0);
        let r = last.get(&(*id, Phase::Score)).copied().unwrap_or(0.0);
        pruned += s + r + c;
        plain += b;
        any = true;
    }
    (any && plain > 0.0).then(|| pruned / plain)
}

fn pass_at_k_table(g: &Grouped, n: usize) -> Result<Vec<(usize, f64)>, MetricsError> {
    let mut out = Vec::new();
    let mut k = 1;
    while k <= n && !g.baseline.is_empty() {
        let vals: Vec<f64> = g
            .baseline
            .values()
            .map(|recs| {
                let v: Vec<bool> = recs.iter().map(|r| r.correct.unwrap_or(false)).collect();
                pass_at_k(&v, k)
            })
            .collect::<Result<_, _>>()?;
        out.push((k, mean(&vals).unwrap_or(0.0)));
        k *= 2;
    }
    Ok(out)
}

fn frac(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

fn probe_summary(inputs: &ReportInputs, g: &Grouped) -> Result<Option<ProbeSummary>, MetricsError> {
    let scored: Vec<(&ProbeRecord, bool, bool)> = inputs
        .probes
        .iter()
        .filter_map(|p| Some((p, p.first_correct?, p.final_correct?)))
        .collect();
    if scored.is_empty() {
        return Ok(None);
    }
    let n = scored.len();
    let first_right = scored.iter().filter(|s| s.1).count();
    let final_right = scored.iter().filter(|s| s.2).count();
    let both = scored.iter().filter(|s| s.1 && s.2).count();
    let final_given_wrong = scored.iter().filter(|s| !s.1 && s.2).count();

    let mut per_question: BTreeMap<&str, Vec<(bool, bool)>> = BTreeMap::new();
    for (p, f, c) in &scored {
        per_question.entry(&p.question_id).or_default().push((*f, *c));
    }
    let bucket_of = |id: &str, own: &[(bool, bool)]| -> Bucket {
        match g.baseline.get(id) {
            Some(recs) => {
                let owned: Vec<TraceRecord> = recs.iter().map(|r| (*r).clone()).collect();
                difficulty_profile(&owned).bucket
            }
            None => Bucket::of(own.iter().filter(|x| x.1).count(), own.len()),
        }
    };
    let mut buckets: BTreeMap<Bucket, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (id, pairs) in &per_question {
        let b = bucket_of(id, pairs);
        let e = buckets.entry(b).or_default();
        e.0 += 1;
        e.1.push(pairs.iter().filter(|p| p.0).count() as f64 / pairs.len() as f64);
        e.2.push(pairs.iter().filter(|p| p.1).count() as f64 / pairs.len() as f64);
        if !b.is_degenerate() {
            xs.extend(pairs.iter().map(|p| p.0));
            ys.extend(pairs.iter().map(|p| p.1));
        }
    }
    let correlation = match pearson_phi(&xs, &ys) {
        Ok(c) => Some(c),
        Err(MetricsError::TooFew { .. } | MetricsError::ConstantInput) => None,
        Err(e) => return Err(e),
    };
    Ok(Some(ProbeSummary {
        traces: n,
        first_step_accuracy: first_right as f64 / n as f64,
        final_accuracy: final_right as f64 / n as f64,
        final_given_first_correct: frac(both, first_right),
        final_given_first_wrong: frac(final_given_wrong, n - first_right),
        correlation,
        buckets: buckets
            .into_iter()
            .map(|(bucket, (questions, f, c))| BucketRow {
                bucket,
                questions,
                first_step_accuracy: mean(&f).unwrap_or(0.0),
                final_accuracy: mean(&c).unwrap_or(0.0),
            })
            .collect(),
    }))
}

fn perturbation_rows(trials: &[TrialRecord]) -> Vec<PerturbRow> {
    let mut groups: BTreeMap<(PerturbVariant, Option<i64>), BTreeMap<&str, Vec<bool>>> = BTreeMap::new();
    let mut latest: BTreeMap<(String, PerturbVariant, Option<i64>, usize), &TrialRecord> = BTreeMap::new();
    for t in trials {
        latest.insert(t.key(), t);
    }
    for t in latest.values() {
        groups
            .entry((t.variant, t.delta))
            .or_default()
            .entry(&t.question_id)
            .or_default()
            .push(t.record.correct.unwrap_or(false));
    }
    groups
        .into_iter()
        .map(|((variant, delta), per_q)| {
            let all: Vec<bool> = per_q.values().flatten().copied().collect();
            let q_means: Vec<f64> = per_q
                .values()
                .map(|v| v.iter().filter(|b| **b).count() as f64 / v.len() as f64)
                .collect();
            PerturbRow {
                variant,
                delta,
                questions: per_q.len(),
                trials: all.len(),
                trial_accuracy: all.iter().filter(|b| **b).count() as f64 / all.len() as f64,
                question_mean_accuracy: mean(&q_means).unwrap_or(0.0),
            }
        })
        .collect()
}

fn similarity_series(curves: &[SimilarityCurve]) -> Result<Vec<SimilaritySeries>, AnalysisError> {
    let mut by_family: BTreeMap<&str, Vec<SimilarityCurve>> = BTreeMap::new();
    for c in curves.iter().filter(|c| !c.values.is_empty()) {
        by_family.entry(&c.model_family).or_default().push(c.clone());
    }
    let mut out = Vec::new();
    for (family, cs) in by_family {
        for mode in [TargetMode::MeanSteps, TargetMode::MaxSteps] {
            out.push(SimilaritySeries {
                model_family: family.to_string(),
                segmentation: "keyword".into(),
                target: mode.label().to_string(),
                curve: interpolate_and_aggregate(&cs, mode)?,
            });
        }
    }
    Ok(out)
}

pub fn compute_report(
    inputs: &ReportInputs,
    questions: Option<&[Question]>,
    cfg: &ReportConfig,
) -> Result<ReportData, ReportError> {
    let exp = &inputs.experiment;
    let g = group(inputs);
    let pruned_curve = pruned_curve(&g, exp, cfg)?;
    let baseline_curve = baseline_curve(&g, exp, cfg)?;
    let (baseline_n_accuracy, _) = dataset_accuracy(g.baseline.values(), exp.n_candidates, MajMode::PrefixTopK)?;
    let marker = baseline_n_accuracy.and_then(|t| marker(&pruned_curve, t));
    let (benchmarks, average) = benchmark_rows(&g, exp, cfg, questions)?;
    let budget = budget(inputs, &g);
    Ok(ReportData {
        run_id: inputs.manifest.run_id.clone(),
        n_candidates: exp.n_candidates,
        keep_m: exp.keep_m,
        token_ratio: budget.as_ref().and_then(|b| b.ratio_vs_baseline),
        wall_time_ratio: wall_time_ratio(inputs, &g),
        pass_at_k: pass_at_k_table(&g, exp.n_candidates)?,
        probe: probe_summary(inputs, &g)?,
        perturbation: perturbation_rows(&inputs.trials),
        similarity: similarity_series(&inputs.curves)?,
        pruned_curve,
        baseline_curve,
        baseline_n_accuracy,
        marker,
        benchmarks,
        average,
        budget,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn ratio(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn main_rows(d: &ReportData) -> Vec<(String, fn(&BenchmarkRow) -> Option<f64>, Option<f64>, Option<f64>)> {
    vec![
        (format!("Maj@{}", d.n_candidates), |r| r.plain_n, Some(1.0), Some(1.0)),
        (format!("Maj@{}", d.keep_m), |r| r.plain_m, None, None),
        (
            format!("Pruned {}->{}", d.n_candidates, d.keep_m),
            |r| r.pruned,
            d.token_ratio,
            d.wall_time_ratio,
        ),
    ]
}

/// The main accuracy table as CSV; accuracies are fractions.
pub fn table_csv(d: &ReportData) -> String {
    let mut out = String::from("method");
    for b in d.benchmarks.iter().chain([&d.average]) {
        let _ = write!(out, ",{}", b.benchmark);
    }
    out.push_str(",token_ratio,wall_time_ratio\n");
    for (label, f, tok, wall) in main_rows(d) {
        out.push_str(&label);
        for b in d.benchmarks.iter().chain([&d.average]) {
            let _ = write!(out, ",{}", num(f(b)));
        }
        let _ = writeln!(out, ",{},{}", num(tok), num(wall));
    }
    out
}

pub fn maj_curve_csv(d: &ReportData) -> String {
    let mut out = String::from("series,m,accuracy,questions,source\n");
    for (series, curve) in [("pruned", &d.pruned_curve), ("plain", &d.baseline_curve)] {
        for p in curve {
            let source = serde_json::to_value(p.source).ok().and_then(|v| v.as_str().map(str::to_string));
            let _ = writeln!(
                out,
                "{series},{},{:.4},{},{}",
                p.m,
                p.accuracy,
                p.questions,
                source.unwrap_or_default()
            );
        }
    }
    out
}

pub fn perturbation_csv(d: &ReportData) -> String {
    let mut out = String::from("variant,delta,questions,trials,trial_accuracy,question_mean_accuracy\n");
    for r in &d.perturbation {
        let variant = match r.variant {
            PerturbVariant::CorrectBaseline => "correct_baseline",
            PerturbVariant::Incorrect => "incorrect",
        };
        let delta = r.delta.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{variant},{delta},{},{},{:.4},{:.4}",
            r.questions, r.trials, r.trial_accuracy, r.question_mean_accuracy
        );
    }
    out
}

pub fn render_markdown(d: &ReportData) -> String {
    let mut out = format!("# Run {}\n\nN = {}, M = {}\n\n", d.run_id, d.n_candidates, d.keep_m);
    out.push_str("## Accuracy (%)\n\n| Method |");
    for b in d.benchmarks.iter().chain([&d.average]) {
        let _ = write!(out, " {} |", b.benchmark);
    }
    out.push_str(" Tokens | Time |\n|---|");
    for _ in 0..=d.benchmarks.len() {
        out.push_str("---|");
    }
    out.push_str("---|---|\n");
    for (label, f, tok, wall) in main_rows(d) {
        let _ = write!(out, "| {label} |");
        for b in d.benchmarks.iter().chain([&d.average]) {
            let _ = write!(out, " {} |", pct(f(b)));
        }
        let _ = writeln!(out, " {} | {} |", ratio(tok), ratio(wall));
    }
    if let Some(b) = &d.budget {
        let _ = writeln!(
            out,
            "\nTokens: {} first-step (all N) + {} continuation (kept M) = {}; plain sampling {}.",
            b.first_step_tokens_all_n,
            b.continuation_tokens_kept_m,
            b.pruned_total(),
            b.baseline_total_tokens_n_full
                .map(|x| x.to_string())
                .unwrap_or_else(|| "not available".into())
        );
        if b.mixed_usage_sources {
            out.push_str("Token counts mix backend-reported and approximate usage.\n");
        }
    }

    if d.pruned_curve.len() >= 2 {
        out.push_str("\n## maj@K against M\n\n| M | Pruned (%) | Source |\n|---|---|---|\n");
        for p in &d.pruned_curve {
            let source = match p.source {
                CurveSource::PrunedRecords => "continued traces",
                CurveSource::BaselineReranked => "plain traces by reward",
                CurveSource::Baseline => "plain traces",
            };
            let _ = writeln!(out, "| {} | {} | {source} |", p.m, pct(Some(p.accuracy)));
        }
        match (d.marker, d.baseline_n_accuracy) {
            (Some(m), Some(t)) => {
                let _ = writeln!(out, "\nSmallest M reaching plain maj@{} ({}%): {m}", d.n_candidates, pct(Some(t)));
            }
            (None, Some(t)) => {
                let _ = writeln!(out, "\nNo M reaches plain maj@{} ({}%).", d.n_candidates, pct(Some(t)));
            }
            _ => {}
        }
    }
    if !d.baseline_curve.is_empty() {
        out.push_str("\n## Plain sampling maj@K\n\n| K | Accuracy (%) |\n|---|---|\n");
        for p in &d.baseline_curve {
            let _ = writeln!(out, "| {} | {} |", p.m, pct(Some(p.accuracy)));
        }
    }
    if !d.pass_at_k.is_empty() {
        out.push_str("\n## pass@k\n\n| k | pass@k (%) |\n|---|---|\n");
        for (k, v) in &d.pass_at_k {
            let _ = writeln!(out, "| {k} | {} |", pct(Some(*v)));
        }
    }
    if let Some(p) = &d.probe {
        let _ = writeln!(
            out,
            "\n## First-step probing\n\nTraces: {}. First-step accuracy {}%, final accuracy {}%.\n\
             Final accuracy when the first step is right: {}%; when wrong: {}%.",
            p.traces,
            pct(Some(p.first_step_accuracy)),
            pct(Some(p.final_accuracy)),
            pct(p.final_given_first_correct),
            pct(p.final_given_first_wrong)
        );
        if let Some(c) = &p.correlation {
            let _ = writeln!(out, "Correlation r = {:.3} (p = {:.4}, n = {}).", c.r, c.p_value, c.n);
        }
        out.push_str("\n| Bucket | Questions | First step (%) | Final (%) |\n|---|---|---|---|\n");
        for b in &p.buckets {
            let _ = writeln!(
                out,
                "| {:?} | {} | {} | {} |",
                b.bucket,
                b.questions,
                pct(Some(b.first_step_accuracy)),
                pct(Some(b.final_accuracy))
            );
        }
    }
    if !d.perturbation.is_empty() {
        out.push_str(
            "\n## Perturbed first steps\n\n| Variant | Delta | Questions | Trials | Per trial (%) | Per question (%) |\n\
             |---|---|---|---|---|---|\n",
        );
        for r in &d.perturbation {
            let _ = writeln!(
                out,
                "| {:?} | {} | {} | {} | {} | {} |",
                r.variant,
                r.delta.map(|x| format!("{x:+}")).unwrap_or_else(|| "-".into()),
                r.questions,
                r.trials,
                pct(Some(r.trial_accuracy)),
                pct(Some(r.question_mean_accuracy))
            );
        }
    }
    if !d.similarity.is_empty() {
        out.push_str("\n## Similarity curves\n\n");
        for s in &d.similarity {
            let _ = writeln!(out, "- {} ({} curves)", s.file_name(), s.curve.n_curves);
        }
    }
    out
}

fn write(path: PathBuf, body: &str, written: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    std::fs::write(&path, body).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    written.push(path);
    Ok(())
}

/// Writes the requested formats into `out_dir` and returns the files written.
pub fn write_report(d: &ReportData, formats: &[ReportFormat], out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Markdown => write(out_dir.join("report.md"), &render_markdown(d), &mut written)?,
            ReportFormat::Csv => {
                write(out_dir.join("report.csv"), &table_csv(d), &mut written)?;
                write(out_dir.join("maj_vs_m.csv"), &maj_curve_csv(d), &mut written)?;
                if !d.pass_at_k.is_empty() {
                    let mut body = String::from("k,pass_at_k\n");
                    for (k, v) in &d.pass_at_k {
                        let _ = writeln!(body, "{k},{v:.4}");
                    }
                    write(out_dir.join("pass_at_k.csv"), &body, &mut written)?;
                }
                if !d.perturbation.is_empty() {
                    write(out_dir.join("perturbation.csv"), &perturbation_csv(d), &mut written)?;
                }
                for s in &d.similarity {
                    write(out_dir.join(s.file_name()), &curve_csv(&s.curve), &mut written)?;
                }
            }
            ReportFormat::Json => {
                let body = serde_json::to_string_pretty(d).map_err(|e| ReportError::Manifest(e.to_string()))?;
                write(out_dir.join("plotdata.json"), &body, &mut written)?;
            }
        }
    }
    Ok(written)
}
