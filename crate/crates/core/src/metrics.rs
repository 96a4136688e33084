//! Majority voting, maj@K, pass@k, difficulty buckets and first-step correlation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::Prediction;
use crate::engine::TraceRecord;
use crate::store::{load_records, StoreError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("need {k} records, have {n}")]
    InsufficientRecords { k: usize, n: usize },
    #[error("k={k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("correlation undefined for constant input")]
    ConstantInput,
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, have {have}")]
    TooFew { needed: usize, have: usize },
}

/// Subsets averaged by [`MajMode::SubsetMean`].
pub const SUBSET_DRAWS: usize = 100;
const SUBSET_SEED: u64 = 0x5eed_0001;
pub const PERMUTATIONS: usize = 10_000;
const PERMUTATION_SEED: u64 = 0x5eed_0002;

/// Most frequent canonical answer among present predictions; ties go to the
/// lexicographically smallest canonical value.
pub fn majority_vote(predictions: &[Prediction]) -> Result<Prediction, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(vote(predictions.iter()))
}

fn vote<'a>(predictions: impl Iterator<Item = &'a Prediction>) -> Prediction {
    let mut counts: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for p in predictions.filter(|p| p.present) {
        let e = counts.entry(p.canonical.as_str()).or_insert((0, p.raw.as_str()));
        e.0 += 1;
        e.1 = e.1.min(p.raw.as_str());
    }
    let mut best: Option<(&str, usize, &str)> = None;
    for (canonical, (count, raw)) in counts {
        if best.is_none_or(|(_, c, _)| count > c) {
            best = Some((canonical, count, raw));
        }
    }
    match best {
        Some((canonical, _, raw)) => Prediction {
            raw: raw.to_string(),
            canonical: canonical.to_string(),
            present: true,
        },
        None => Prediction::absent(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MajMode {
    /// Vote over the first K voters in the given order.
    PrefixTopK,
    /// Mean vote correctness over K-subsets: exhaustive when there are at
    /// most [`SUBSET_DRAWS`] of them, otherwise that many seeded draws.
    SubsetMean,
}

/// One voter: its prediction and whether that prediction is correct.
pub type Voter = (Prediction, bool);

fn vote_correct(voters: &[&Voter]) -> bool {
    let v = vote(voters.iter().map(|(p, _)| p));
    v.present && voters.iter().any(|(p, c)| *c && p.present && p.canonical == v.canonical)
}

/// Binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Calls `f` with every k-subset of 0..n in lexicographic order.
pub fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == i - 1 + n - k {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

pub fn maj_at_k_voters(voters: &[Voter], k: usize, mode: MajMode) -> Result<f64, MetricsError> {
    let n = voters.len();
    if k == 0 || k > n {
        return Err(MetricsError::InsufficientRecords { k, n });
    }
    match mode {
        MajMode::PrefixTopK => {
            let chosen: Vec<&Voter> = voters[..k].iter().collect();
            Ok(vote_correct(&chosen) as u8 as f64)
        }
        MajMode::SubsetMean if binomial(n, k) <= SUBSET_DRAWS as u128 => {
            let (mut hits, mut total) = (0u64, 0u64);
            for_each_combination(n, k, |idx| {
                let chosen: Vec<&Voter> = idx.iter().map(|&i| &voters[i]).collect();
                hits += vote_correct(&chosen) as u64;
                total += 1;
            });
            Ok(hits as f64 / total as f64)
        }
        MajMode::SubsetMean => {
            let mut rng = ChaCha8Rng::seed_from_u64(SUBSET_SEED);
            let mut hits = 0u64;
            for _ in 0..SUBSET_DRAWS {
                let chosen: Vec<&Voter> = sample(&mut rng, n, k).iter().map(|i| &voters[i]).collect();
                hits += vote_correct(&chosen) as u64;
            }
            Ok(hits as f64 / SUBSET_DRAWS as f64)
        }
    }
}

/// maj@K for one question. Records must already be in designated order:
/// rank order for pruned runs, seed order for plain runs.
pub fn maj_at_k(records: &[TraceRecord], k: usize, mode: MajMode) -> Result<f64, MetricsError> {
    let voters: Vec<Voter> = records
        .iter()
        .map(|r| (r.prediction.clone(), r.correct.unwrap_or(false)))
        .collect();
    maj_at_k_voters(&voters, k, mode)
}

/// Unbiased pass@k, `1 - C(n-c, k) / C(n, k)`, in product form.
pub fn pass_at_k(verdicts: &[bool], k: usize) -> Result<f64, MetricsError> {
    let n = verdicts.len();
    if k == 0 || k > n {
        return Err(MetricsError::KOutOfRange { k, n });
    }
    let c = verdicts.iter().filter(|v| **v).count();
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation of two 0/1 sequences with a two-sided permutation p-value.
pub fn pearson_phi(first_correct: &[bool], final_correct: &[bool]) -> Result<Correlation, MetricsError> {
    let n = first_correct.len();
    if n != final_correct.len() {
        return Err(MetricsError::LengthMismatch(n, final_correct.len()));
    }
    if n < 3 {
        return Err(MetricsError::TooFew { needed: 3, have: n });
    }
    let sx = first_correct.iter().filter(|b| **b).count() as i128;
    let sy = final_correct.iter().filter(|b| **b).count() as i128;
    let ni = n as i128;
    let vx = ni * sx - sx * sx;
    let vy = ni * sy - sy * sy;
    if vx == 0 || vy == 0 {
        return Err(MetricsError::ConstantInput);
    }
    let denom = ((vx as f64) * (vy as f64)).sqrt();
    let r_of = |sxy: i128| (ni * sxy - sx * sy) as f64 / denom;
    let sxy = first_correct.iter().zip(final_correct).filter(|(a, b)| **a && **b).count() as i128;
    let r = r_of(sxy);

    let mut rng = ChaCha8Rng::seed_from_u64(PERMUTATION_SEED);
    let mut y: Vec<bool> = final_correct.to_vec();
    let threshold = r.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..PERMUTATIONS {
        for i in (1..n).rev() {
            y.swap(i, rng.gen_range(0..=i));
        }
        let s = first_correct.iter().zip(&y).filter(|(a, b)| **a && **b).count() as i128;
        if r_of(s).abs() >= threshold {
            extreme += 1;
        }
    }
    Ok(Correlation {
        r,
        p_value: (extreme + 1) as f64 / (PERMUTATIONS + 1) as f64,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    /// pass@1 in (0, 33%].
    Hard,
    /// pass@1 in (33%, 67%].
    Medium,
    /// pass@1 in (67%, 100%).
    Easy,
    DegenerateAllWrong,
    DegenerateAllRight,
}

impl Bucket {
    /// Integer-exact interval membership for `correct` of `n`.
    pub fn of(correct: usize, n: usize) -> Bucket {
        if correct == 0 {
            Bucket::DegenerateAllWrong
        } else if correct >= n {
            Bucket::DegenerateAllRight
        } else if 100 * correct <= 33 * n {
            Bucket::Hard
        } else if 100 * correct <= 67 * n {
            Bucket::Medium
        } else {
            Bucket::Easy
        }
    }

    pub fn is_degenerate(self) -> bool {
        matches!(self, Bucket::DegenerateAllWrong | Bucket::DegenerateAllRight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub question_id: String,
    pub predictions: Vec<(u64, Prediction, bool)>,
    pub pass_at_1: f64,
    pub bucket: Bucket,
}

/// pass@1 and difficulty bucket of one question's records. Records without
/// a verdict count as incorrect.
pub fn difficulty_profile(records: &[TraceRecord]) -> QuestionOutcome {
    let predictions: Vec<(u64, Prediction, bool)> = records
        .iter()
        .map(|r| (r.seed, r.prediction.clone(), r.correct.unwrap_or(false)))
        .collect();
    let n = predictions.len();
    let c = predictions.iter().filter(|p| p.2).count();
    QuestionOutcome {
        question_id: records.first().map(|r| r.question_id.clone()).unwrap_or_default(),
        pass_at_1: if n == 0 { 0.0 } else { c as f64 / n as f64 },
        bucket: Bucket::of(c, n),
        predictions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub mean_diff: f64,
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    pub resamples: usize,
}

/// Percentile bootstrap interval for `mean(a - b)` over paired observations.
pub fn paired_bootstrap(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapInterval, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() || resamples == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let mean_diff = d.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| d[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(BootstrapInterval {
        mean_diff,
        lower: at(alpha),
        upper: at(1.0 - alpha),
        confidence,
        resamples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub question_id: String,
    pub seed: u64,
    pub verdict: bool,
}

pub fn load_verdicts(path: &Path) -> Result<HashMap<(String, u64), bool>, StoreError> {
    Ok(load_records::<VerdictLine>(path)?
        .into_iter()
        .map(|v| ((v.question_id, v.seed), v.verdict))
        .collect())
}

/// Fills `correct` from externally produced verdicts. Returns how many
/// records received one.
pub fn apply_verdicts(records: &mut [TraceRecord], verdicts: &HashMap<(String, u64), bool>) -> usize {
    let mut applied = 0;
    for r in records {
        if let Some(v) = verdicts.get(&(r.question_id.clone(), r.seed)) {
            r.correct = Some(*v);
            applied += 1;
        }
    }
    applied
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::AnswerKind;
    use proptest::prelude::*;

    fn p(s: &str) -> Prediction {
        Prediction::from_raw(s, AnswerKind::Integer)
    }

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[p("7"), p("7"), p("3")]).unwrap().canonical, "7");
        assert_eq!(majority_vote(&[p("7"), p("3")]).unwrap().canonical, "3");
        assert!(!majority_vote(&[Prediction::absent(), Prediction::absent()]).unwrap().present);
        assert_eq!(majority_vote(&[]), Err(MetricsError::EmptyInput));
        assert_eq!(majority_vote(&[Prediction::absent(), p("5")]).unwrap().canonical, "5");
    }

    #[test]
    fn binomials_and_combinations() {
        assert_eq!(binomial(6, 3), 20);
        assert_eq!(binomial(64, 16), 488_526_937_079_580);
        assert_eq!(binomial(3, 4), 0);
        let mut seen = Vec::new();
        for_each_combination(4, 2, |c| seen.push(c.to_vec()));
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        let mut count = 0;
        for_each_combination(5, 5, |_| count += 1);
        assert_eq!(count, 1);
        for_each_combination(5, 0, |c| assert!(c.is_empty()));
    }

    #[test]
    fn maj_at_k_examples() {
        let voters: Vec<Voter> = vec![(p("7"), true), (p("3"), false), (p("7"), true)];
        assert_eq!(maj_at_k_voters(&voters, 1, MajMode::PrefixTopK).unwrap(), 1.0);
        assert_eq!(maj_at_k_voters(&voters, 2, MajMode::PrefixTopK).unwrap(), 0.0);
        assert_eq!(maj_at_k_voters(&voters, 3, MajMode::PrefixTopK).unwrap(), 1.0);
        assert!(maj_at_k_voters(&voters, 4, MajMode::PrefixTopK).is_err());
        let all: Vec<Voter> = (0..64).map(|_| (p("113"), true)).collect();
        for k in [1, 8, 64] {
            assert_eq!(maj_at_k_voters(&all, k, MajMode::SubsetMean).unwrap(), 1.0);
        }
    }

    #[test]
    fn pass_at_k_edges() {
        assert_eq!(pass_at_k(&[true; 5], 3).unwrap(), 1.0);
        assert_eq!(pass_at_k(&[false; 5], 3).unwrap(), 0.0);
        assert!(matches!(pass_at_k(&[true], 2), Err(MetricsError::KOutOfRange { .. })));
        let v = [true, true, true, false, false, false, false, false, false, false];
        let exact = 1.0 - binomial(7, 4) as f64 / binomial(10, 4) as f64;
        assert!((pass_at_k(&v, 4).unwrap() - exact).abs() < 1e-12);
    }

    #[test]
    fn phi_examples() {
        let x = [true, false, true, true, false];
        assert!((pearson_phi(&x, &x).unwrap().r - 1.0).abs() < 1e-12);
        let y: Vec<bool> = x.iter().map(|b| !b).collect();
        assert!((pearson_phi(&x, &y).unwrap().r + 1.0).abs() < 1e-12);
        assert_eq!(pearson_phi(&[true; 4], &x[..4]), Err(MetricsError::ConstantInput));
        assert!(matches!(pearson_phi(&x[..2], &x[..2]), Err(MetricsError::TooFew { .. })));
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(Bucket::of(64, 64), Bucket::DegenerateAllRight);
        assert_eq!(Bucket::of(0, 64), Bucket::DegenerateAllWrong);
        assert_eq!(Bucket::of(20, 64), Bucket::Hard);
        assert_eq!(Bucket::of(21, 64), Bucket::Hard);
        assert_eq!(Bucket::of(22, 64), Bucket::Medium);
        assert_eq!(Bucket::of(42, 64), Bucket::Medium);
        assert_eq!(Bucket::of(43, 64), Bucket::Easy);
        assert_eq!(Bucket::of(33, 100), Bucket::Hard);
        assert_eq!(Bucket::of(67, 100), Bucket::Medium);
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let a: Vec<f64> = (0..100).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let b = vec![0.0; 100];
        let ci = paired_bootstrap(&a, &b, 2000, 0.95, 1).unwrap();
        assert!(ci.lower <= ci.mean_diff && ci.mean_diff <= ci.upper);
        assert!((ci.mean_diff - 0.34).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn vote_is_permutation_invariant(vals in proptest::collection::vec(0u8..5, 1..12), rot in 0usize..12) {
            let preds: Vec<Prediction> = vals.iter().map(|v| if *v == 0 { Prediction::absent() } else { p(&v.to_string()) }).collect();
            let mut rotated = preds.clone();
            rotated.rotate_left(rot % preds.len());
            rotated.reverse();
            let a = majority_vote(&preds).unwrap();
            prop_assert_eq!(&a, &majority_vote(&rotated).unwrap());
            prop_assert!(!a.present || preds.iter().any(|x| x.canonical == a.canonical));
        }

        #[test]
        fn pass_at_k_is_monotone(v in proptest::collection::vec(any::<bool>(), 1..20)) {
            let mut prev = 0.0;
            for k in 1..=v.len() {
                let x = pass_at_k(&v, k).unwrap();
                prop_assert!(x + 1e-12 >= prev);
                prev = x;
            }
        }

        #[test]
        fn phi_is_symmetric(v in proptest::collection::vec((any::<bool>(), any::<bool>()), 3..30)) {
            let (x, y): (Vec<bool>, Vec<bool>) = v.into_iter().unzip();
            if let (Ok(a), Ok(b)) = (pearson_phi(&x, &y), pearson_phi(&y, &x)) {
                prop_assert!((a.r - b.r).abs() < 1e-12);
            }
        }
    }
}
