//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when any criterion fails or overruns its time budget.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use firstprune::analysis::{
    build_perturbed_first_step, resample, run_perturb_dataset, run_probe_dataset, run_similarity_dataset,
    PerturbSettings, PerturbVariant,
};
use firstprune::answer::{AnswerKind, Prediction, Question};
use firstprune::backend::sim::{CallCounter, HashingEmbedder, OracleScorer, SimProfile, SimWorld, SimulatedBackend};
use firstprune::backend::{EmbeddingClient, FinishReason, RewardScore, UsageSource};
use firstprune::config::RunConfig;
use firstprune::engine::{
    run_baseline, run_baseline_dataset, run_early_pruning, run_pipeline, select_top_m, CandidateStatus,
    ExperimentConfig, FirstStepCandidate, Phase, RunSettings,
};
use firstprune::metrics::{maj_at_k_voters, majority_vote, paired_bootstrap, pass_at_k, pearson_phi, MajMode, Voter};
use firstprune::segment::{segment_steps, KeywordProfile};
use firstprune::store::{RecordFile, RunStore};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn questions(n: usize, seed: u64) -> Vec<Question> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let answer: u32 = rng.gen_range(0..999);
            Question::new(
                format!("q{i:03}"),
                format!("Problem {i}: find the integer value described by case {i}."),
                answer.to_string(),
                AnswerKind::Integer,
            )
        })
        .collect()
}

fn sim(profile: SimProfile, qs: &[Question]) -> (Arc<SimWorld>, SimulatedBackend, OracleScorer) {
    let world = SimWorld::new(profile, qs.to_vec()).expect("valid profile");
    (world.clone(), SimulatedBackend::new(world.clone()), OracleScorer::new(world))
}

fn budget_arithmetic() -> Outcome {
    let profile = SimProfile {
        length_jitter: 0.0,
        ..SimProfile::new(0.8, 0.3, 0.5, 12_800)
    };
    let qs = questions(1, 1);
    let (_, generator, scorer) = sim(profile, &qs);
    let cfg = ExperimentConfig::new(64, 16);
    let baseline = run_baseline(&generator, &qs[0], &cfg, &cfg.seeds()).accept(Phase::Baseline, &qs[0].id, 0, 64, 1.0);
    let baseline = baseline.map_err(|e| e.to_string())?;
    let pruned = run_early_pruning(&generator, &scorer, &qs[0], &cfg, Some(&baseline)).map_err(|e| e.to_string())?;
    ensure!(
        pruned.records.iter().all(|r| r.first_step_tokens == 512 && r.continuation_tokens == 12_288),
        "kept traces are not 512 + 12288 tokens"
    );
    let parts = pruned.budget.ratio_parts();
    ensure!(parts == Some((229_376, 819_200)), "ratio parts {parts:?}");
    let ratio = pruned.budget.ratio_vs_baseline.unwrap_or(f64::NAN);
    ensure!((ratio - 0.28).abs() < 1e-12, "ratio {ratio}");
    Ok(format!("229376/819200 = {ratio}"))
}

fn m_equals_n_identity() -> Outcome {
    let qs = questions(4, 2);
    let (_, generator, scorer) = sim(SimProfile::new(0.8, 0.3, 0.5, 2_000), &qs);
    let cfg = ExperimentConfig::new(64, 64);
    for q in &qs {
        let baseline = run_baseline(&generator, q, &cfg, &cfg.seeds())
            .accept(Phase::Baseline, &q.id, 0, 64, 1.0)
            .map_err(|e| e.to_string())?;
        let pruned = run_early_pruning(&generator, &scorer, q, &cfg, None).map_err(|e| e.to_string())?;
        let multiset = |preds: Vec<&Prediction>| {
            let mut v: Vec<String> = preds.iter().map(|p| serde_json::to_string(p).unwrap()).collect();
            v.sort();
            v
        };
        let a = multiset(baseline.iter().map(|r| &r.prediction).collect());
        let b = multiset(pruned.records.iter().map(|r| &r.prediction).collect());
        ensure!(a == b, "{}: prediction multisets differ", q.id);
        let mut by_seed: BTreeMap<u64, String> = baseline.iter().map(|r| (r.seed, r.full_text())).collect();
        for r in &pruned.records {
            ensure!(by_seed.remove(&r.seed).as_deref() == Some(r.full_text().as_str()), "{} seed {} text differs", q.id, r.seed);
        }
    }
    Ok(format!("{} questions, 64 predictions each", qs.len()))
}

fn candidate(seed: u64, value: f64) -> FirstStepCandidate {
    FirstStepCandidate {
        question_id: "q".into(),
        seed,
        text: String::new(),
        token_count: 1,
        reward: Some(RewardScore {
            value,
            scorer_id: "oracle".into(),
        }),
        status: CandidateStatus::Scored,
        finish_reason: FinishReason::LengthCap,
        usage_source: UsageSource::BackendReported,
    }
}

fn selection_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ties = 0usize;
    for round in 0..1000 {
        let n = rng.gen_range(1..=1000);
        let m = rng.gen_range(1..=n);
        let levels = if round % 2 == 0 { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut cands: Vec<FirstStepCandidate> = scores.iter().enumerate().map(|(s, v)| candidate(s as u64, *v)).collect();
        cands.shuffle(&mut rng);

        let mut oracle: Vec<(f64, u64)> = scores.iter().enumerate().map(|(s, v)| (*v, s as u64)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want_kept: Vec<u64> = oracle[..m].iter().map(|x| x.1).collect();
        let mut want_dropped: Vec<u64> = oracle[m..].iter().map(|x| x.1).collect();
        want_dropped.sort_unstable();
        if m < n && oracle[m - 1].0 == oracle[m].0 {
            ties += 1;
        }

        let (kept, dropped) = select_top_m(cands, m).map_err(|e| e.to_string())?;
        let kept: Vec<u64> = kept.iter().map(|c| c.seed).collect();
        let dropped: Vec<u64> = dropped.iter().map(|c| c.seed).collect();
        ensure!(kept == want_kept, "round {round}: selected {kept:?} != {want_kept:?}");
        ensure!(dropped == want_dropped, "round {round}: discarded set differs");
    }
    Ok(format!("1000 vectors, {ties} with ties at the cut"))
}

fn pred(symbol: u8) -> Prediction {
    match symbol {
        0 => Prediction::absent(),
        s => Prediction::from_raw(&s.to_string(), AnswerKind::Integer),
    }
}

/// Independent vote: most frequent present symbol, smallest on ties.
fn oracle_vote(symbols: &[u8]) -> u8 {
    let mut counts = [0usize; 8];
    for &s in symbols {
        counts[s as usize] += 1;
    }
    let mut best = 0u8;
    for s in 1..8u8 {
        if counts[s as usize] > counts[best as usize] || (best == 0 && counts[s as usize] > 0) {
            best = s;
        }
    }
    best
}

fn aggregation_oracles() -> Outcome {
    let mut instances = 0usize;
    for (alphabet, max_n) in [(3u8, 8usize), (4, 6)] {
        for n in 1..=max_n {
            let total = (alphabet as usize).pow(n as u32);
            for code in 0..total {
                let mut c = code;
                let symbols: Vec<u8> = (0..n)
                    .map(|_| {
                        let s = (c % alphabet as usize) as u8;
                        c /= alphabet as usize;
                        s
                    })
                    .collect();
                let preds: Vec<Prediction> = symbols.iter().map(|s| pred(*s)).collect();
                let got = majority_vote(&preds).map_err(|e| e.to_string())?;
                ensure!(got == pred(oracle_vote(&symbols)), "vote of {symbols:?} = {got:?}");
                let voters: Vec<Voter> = symbols.iter().map(|s| (pred(*s), *s == 1)).collect();
                for k in 1..=n {
                    let (mut hits, mut subsets) = (0u32, 0u32);
                    for mask in 0u32..(1 << n) {
                        if mask.count_ones() as usize != k {
                            continue;
                        }
                        let chosen: Vec<u8> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| symbols[i]).collect();
                        hits += (oracle_vote(&chosen) == 1) as u32;
                        subsets += 1;
                    }
                    let want = hits as f64 / subsets as f64;
                    let got = maj_at_k_voters(&voters, k, MajMode::SubsetMean).map_err(|e| e.to_string())?;
                    ensure!((got - want).abs() < 1e-12, "maj@{k} of {symbols:?}: {got} != {want}");
                }
                instances += 1;
            }
        }
    }
    for n in 1..=8usize {
        for c in 0..=n {
            let verdicts: Vec<bool> = (0..n).map(|i| i < c).collect();
            for k in 1..=n {
                let (mut hit, mut total) = (0u32, 0u32);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize == k {
                        total += 1;
                        hit += (0..n).any(|i| mask >> i & 1 == 1 && verdicts[i]) as u32;
                    }
                }
                let got = pass_at_k(&verdicts, k).map_err(|e| e.to_string())?;
                ensure!((got - hit as f64 / total as f64).abs() < 1e-12, "pass@{k} n={n} c={c}: {got}");
            }
        }
    }
    let verdicts: Vec<bool> = (0..10).map(|i| i < 3).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 100_000;
    let hits = (0..draws)
        .filter(|_| rand::seq::index::sample(&mut rng, 10, 4).iter().any(|i| verdicts[i]))
        .count();
    let mc = hits as f64 / draws as f64;
    let exact = pass_at_k(&verdicts, 4).map_err(|e| e.to_string())?;
    ensure!((mc - exact).abs() < 0.01, "pass@4 {exact} vs Monte Carlo {mc}");
    Ok(format!("{instances} vote instances; pass@4(10,3) = {exact:.6}, Monte Carlo {mc:.4}"))
}

fn correlation() -> Outcome {
    let (a, b, c, d) = (40usize, 10usize, 10usize, 40usize);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (count, fx, fy) in [(a, true, true), (b, true, false), (c, false, true), (d, false, false)] {
        x.extend(std::iter::repeat(fx).take(count));
        y.extend(std::iter::repeat(fy).take(count));
    }
    let phi = (a * d) as f64 - (b * c) as f64;
    let phi = phi / (((a + b) * (c + d) * (a + c) * (b + d)) as f64).sqrt();
    let r = pearson_phi(&x, &y).map_err(|e| e.to_string())?;
    ensure!((r.r - phi).abs() < 1e-12 && (r.r - 0.6).abs() < 1e-12, "r = {} vs phi {phi}", r.r);
    ensure!(r.p_value < 0.001, "p = {}", r.p_value);
    Ok(format!("r = {}, p = {:.2e}", r.r, r.p_value))
}

fn pipeline_efficacy() -> Outcome {
    let qs = questions(200, 6);
    let (_, generator, scorer) = sim(SimProfile::new(0.8, 0.3, 0.5, 12_800), &qs);
    let cfg = ExperimentConfig::new(64, 16);
    let (mut pruned, mut n64, mut n16) = (Vec::new(), Vec::new(), Vec::new());
    let (mut spent, mut plain) = (0u64, 0u64);
    for q in &qs {
        let baseline = run_baseline(&generator, q, &cfg, &cfg.seeds())
            .accept(Phase::Baseline, &q.id, 0, 64, 1.0)
            .map_err(|e| e.to_string())?;
        let p = run_early_pruning(&generator, &scorer, q, &cfg, Some(&baseline)).map_err(|e| e.to_string())?;
        let (num, den) = p.budget.ratio_parts().ok_or("missing baseline tokens")?;
        spent += num;
        plain += den;
        let voters = |records: &[firstprune::engine::TraceRecord]| -> Vec<Voter> {
            records
                .iter()
                .map(|r| (r.prediction.clone(), r.correct.unwrap_or(false)))
                .collect()
        };
        let base = voters(&baseline);
        pruned.push(maj_at_k_voters(&voters(&p.records), 16, MajMode::PrefixTopK).map_err(|e| e.to_string())?);
        n64.push(maj_at_k_voters(&base, 64, MajMode::PrefixTopK).map_err(|e| e.to_string())?);
        n16.push(maj_at_k_voters(&base, 16, MajMode::SubsetMean).map_err(|e| e.to_string())?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let vs64 = paired_bootstrap(&pruned, &n64, 10_000, 0.95, 61).map_err(|e| e.to_string())?;
    let vs16 = paired_bootstrap(&pruned, &n16, 10_000, 0.95, 62).map_err(|e| e.to_string())?;
    let ratio = spent as f64 / plain as f64;
    let detail = format!(
        "pruned {:.1}%, maj@64 {:.1}%, maj@16 {:.1}%; diff vs 64 CI [{:+.3}, {:+.3}], vs 16 CI [{:+.3}, {:+.3}]; tokens x{ratio:.3}",
        100.0 * mean(&pruned),
        100.0 * mean(&n64),
        100.0 * mean(&n16),
        vs64.lower,
        vs64.upper,
        vs16.lower,
        vs16.upper
    );
    ensure!(vs64.lower >= -0.02 && vs64.upper <= 0.02, "not within 2 points of maj@64: {detail}");
    ensure!(vs16.lower >= 0.03, "not 3 points above maj@16: {detail}");
    ensure!(ratio < 0.35, "token ratio too high: {detail}");
    Ok(detail)
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 12] = [
        "alternatively", "Alternatively", "WAIT", "wait", "waiting", "otherwise", "so", "x=3", "naïve", "fühlen",
        "alternatively_", "step",
    ];
    const SEPS: [&str; 8] = [" ", " ", ". ", "! ", "? ", "\n", "\n\n ", ", "];
    let mut s = String::from("start");
    for _ in 0..rng.gen_range(0..40) {
        s.push_str(SEPS[rng.gen_range(0..SEPS.len())]);
        s.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    if rng.gen_bool(0.3) {
        s.push_str(SEPS[rng.gen_range(0..SEPS.len())]);
    }
    s
}

fn segmentation_and_interpolation() -> Outcome {
    let profile = KeywordProfile::new("test", &["alternatively", "wait"]).map_err(|e| e.to_string())?;
    let cue = Regex::new(r"(?i)(?:^|[.!?\n])[ \t\n]*\b(alternatively|wait)\b").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cuts = 0usize;
    for i in 0..1000 {
        let text = random_text(&mut rng);
        let seg = segment_steps(&text, &profile).map_err(|e| e.to_string())?;
        ensure!(seg.steps.concat() == text, "text {i} not reconstructed");
        let expected = cue.captures_iter(&text).filter(|c| c.get(1).unwrap().start() > 0).count();
        ensure!(seg.step_count() == 1 + expected, "text {i}: {} steps, oracle {}: {text:?}", seg.step_count(), 1 + expected);
        cuts += expected;
    }
    for i in 0..1000 {
        let t = rng.gen_range(1..60);
        let values: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = rng.gen_range(2..120);
        let out = resample(&values, g);
        ensure!(out.len() == g, "curve {i}: length {}", out.len());
        ensure!(out[0] == values[0] && out[g - 1] == values[t - 1], "curve {i}: endpoints moved");
        ensure!(resample(&values, t) == values, "curve {i}: identity resample not exact");
    }
    Ok(format!("1000 texts ({cuts} cuts), 1000 curves"))
}

const WORKED: &str = "To solve the problem, we are given triangle $ABC$ with side lengths $AB = 5$, $BC = 9$, and $AC = 10$.\n\nStep 4: Compute $AP$. Since $P$ lies on line segment $AD$, the point $P$ lies between $A$ and $D$. Therefore:\n\\[\nAP = DA - DP = \\frac{325}{22} - \\frac{2025}{286}.\n\\]\nFind a common denominator:\n\\[\n\\frac{325}{22} = \\frac{4225}{286} \\Rightarrow AP = \\frac{2200}{286} = \\frac{100}{13}.\n\\]\n\nFinal Step: Compute $m + n$.\nThe reduced form of $AP$ is $\\frac{100}{13}$, so:\n\\[\nm = 100, \\quad n = 13 \\Rightarrow m + n = \\boxed{113}.\n\\]\n\nFinal Answer: \\boxed{113}\n";

fn synthetic_conclusion(rng: &mut ChaCha8Rng, a: u32) -> String {
    let other = (a + 1 + rng.gen_range(0..500)) % 999;
    let templates = [
        format!("We first note that t = {a}."),
        format!("Substituting gives {a}0 as an intermediate value."),
        format!("A quick check with {a}.5 fails."),
        format!("Then s = {other} holds."),
        format!("Since v = \\boxed{{{a}}}, we continue."),
        format!("The candidate {a} satisfies every constraint."),
        "Collecting terms simplifies the expression.".to_string(),
        format!("Hence w \\Rightarrow {a}."),
        format!("Mod 1000 the residue ({a}) is stable."),
    ];
    let mut s = String::new();
    for _ in 0..rng.gen_range(3..12) {
        s.push_str(&templates[rng.gen_range(0..templates.len())]);
        s.push(' ');
    }
    s.push_str(&format!("\n\nFinal answer: \\boxed{{{a}}}\n"));
    s
}

fn perturbation_construction() -> Outcome {
    let q = Question::new("worked", "Find m + n.", "113", AnswerKind::Integer);
    let base = build_perturbed_first_step(WORKED, &q, PerturbVariant::CorrectBaseline, 0).map_err(|e| e.to_string())?;
    ensure!(!base.text.contains("\\boxed"), "baseline keeps a boxed group");
    let wrong = build_perturbed_first_step(WORKED, &q, PerturbVariant::Incorrect, -10).map_err(|e| e.to_string())?;
    ensure!(wrong.text.contains("103") && !wrong.text.contains("113"), "incorrect variant: {:?}", wrong.text);

    let number = Regex::new(r"\.?[0-9]+(?:\.[0-9]+)*").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut sites = 0;
    let mut built = 0;
    for i in 0..100 {
        let a = rng.gen_range(100..900);
        let q = Question::new(format!("s{i}"), "p", a.to_string(), AnswerKind::Integer);
        let conclusion = synthetic_conclusion(&mut rng, a);
        let base = build_perturbed_first_step(&conclusion, &q, PerturbVariant::CorrectBaseline, 0).map_err(|e| e.to_string())?;
        let oracle: Vec<(usize, usize)> = number
            .find_iter(&base.text)
            .filter(|m| m.as_str() == q.answer)
            .map(|m| (m.start(), m.end()))
            .collect();
        let delta = [1i64, -1, 10, -10][i % 4];
        match build_perturbed_first_step(&conclusion, &q, PerturbVariant::Incorrect, delta) {
            Ok(p) => {
                ensure!(p.replacement_sites == oracle.len(), "conclusion {i}: {} sites, oracle {}", p.replacement_sites, oracle.len());
                let mut expect = base.text.clone();
                for &(s, e) in oracle.iter().rev() {
                    expect.replace_range(s..e, &(a as i64 + delta).to_string());
                }
                ensure!(p.text == expect, "conclusion {i}: replaced text differs");
                sites += p.replacement_sites;
                built += 1;
            }
            Err(e) => ensure!(oracle.is_empty(), "conclusion {i}: {e} but oracle found {}", oracle.len()),
        }
    }
    Ok(format!("worked example ok; {built} variants, {sites} sites"))
}

fn store_for(dir: &Path, cfg: &RunConfig) -> Result<RunStore, String> {
    RunStore::create(dir, cfg.manifest("acceptance"), true).map_err(|e| e.to_string())
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.experiment = ExperimentConfig::new(16, 4);
    cfg.experiment.first_step_len = 128;
    cfg.simulation.profile = SimProfile::new(0.8, 0.3, 0.5, 1_500);
    cfg
}

const COMPARED: [RecordFile; 10] = [
    RecordFile::Candidates,
    RecordFile::Scores,
    RecordFile::Selections,
    RecordFile::Records,
    RecordFile::Baseline,
    RecordFile::Budgets,
    RecordFile::Probes,
    RecordFile::Trials,
    RecordFile::Curves,
    RecordFile::Errors,
];

fn full_run(dir: &Path, workers: usize, qs: &[Question]) -> Result<(), String> {
    let cfg = small_config();
    let store = store_for(dir, &cfg)?;
    let b = cfg.build_backends(qs).map_err(|e| e.to_string())?;
    let scorer = b.scorer().map_err(|e| e.to_string())?;
    let exp = &cfg.experiment;
    run_baseline_dataset(b.generator.as_ref(), qs, exp, &store, workers).map_err(|e| e.to_string())?;
    let settings = RunSettings {
        workers,
        stop_after: Phase::Continue,
    };
    run_pipeline(b.generator.as_ref(), scorer.as_ref(), qs, exp, &store, settings).map_err(|e| e.to_string())?;
    let profile = cfg.segmentation.profile().map_err(|e| e.to_string())?;
    let params = exp.decoding;
    run_probe_dataset(b.generator.as_ref(), qs, &store, &profile, &params, workers).map_err(|e| e.to_string())?;
    let perturb = PerturbSettings {
        trials: 2,
        ..PerturbSettings::default()
    };
    run_perturb_dataset(b.generator.as_ref(), qs, &store, &perturb, &params, workers).map_err(|e| e.to_string())?;
    let embedder = EmbeddingClient::new(HashingEmbedder::new(32));
    run_similarity_dataset(qs, &store, &profile, &embedder, b.generator.think_close(), workers).map_err(|e| e.to_string())?;
    Ok(())
}

fn read(dir: &Path, f: RecordFile) -> Vec<u8> {
    std::fs::read(dir.join(f.file_name())).unwrap_or_default()
}

fn determinism() -> Outcome {
    let qs = questions(24, 9);
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs: Vec<_> = [1usize, 4, 16].iter().map(|w| (w, root.path().join(format!("w{w}")))).collect();
    for (w, d) in &dirs {
        full_run(d, **w, &qs)?;
    }
    let mut bytes = 0;
    for f in COMPARED {
        let reference = read(&dirs[0].1, f);
        for (w, d) in &dirs[1..] {
            ensure!(read(d, f) == reference, "{} differs with {w} workers", f.file_name());
        }
        bytes += reference.len();
    }
    ensure!(bytes > 0, "no records written");
    Ok(format!("{} files, {bytes} bytes each run", COMPARED.len()))
}

fn resumability() -> Outcome {
    let qs = questions(20, 10);
    let cfg = small_config();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (interrupted, whole) = (root.path().join("interrupted"), root.path().join("whole"));
    let b = cfg.build_backends(&qs).map_err(|e| e.to_string())?;
    let scorer = b.scorer().map_err(|e| e.to_string())?;
    let counter = CallCounter::new(b.generator.clone());
    let exp = &cfg.experiment;
    let stop = |p| RunSettings {
        workers: 4,
        stop_after: p,
    };
    {
        let store = store_for(&interrupted, &cfg)?;
        run_pipeline(&counter, scorer.as_ref(), &qs, exp, &store, stop(Phase::Score)).map_err(|e| e.to_string())?;
    }
    let after_first = counter.calls();
    {
        let store = store_for(&interrupted, &cfg)?;
        run_pipeline(&counter, scorer.as_ref(), &qs, exp, &store, stop(Phase::Continue)).map_err(|e| e.to_string())?;
    }
    ensure!(counter.duplicate_calls() == 0, "{} duplicate generation calls", counter.duplicate_calls());
    let store = store_for(&whole, &cfg)?;
    run_pipeline(b.generator.as_ref(), scorer.as_ref(), &qs, exp, &store, stop(Phase::Continue)).map_err(|e| e.to_string())?;
    for f in [RecordFile::Candidates, RecordFile::Scores, RecordFile::Selections, RecordFile::Records, RecordFile::Budgets] {
        ensure!(read(&interrupted, f) == read(&whole, f), "{} differs from the uninterrupted run", f.file_name());
    }
    Ok(format!("{after_first} calls before the stop, {} after, 0 duplicates", counter.calls() - after_first))
}

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "budget arithmetic", budget: Duration::from_secs(1), run: budget_arithmetic },
        Criterion { id: 2, name: "M = N identity", budget: Duration::from_secs(5), run: m_equals_n_identity },
        Criterion { id: 3, name: "selection correctness", budget: Duration::from_secs(5), run: selection_correctness },
        Criterion { id: 4, name: "aggregation oracles", budget: Duration::from_secs(30), run: aggregation_oracles },
        Criterion { id: 5, name: "correlation", budget: Duration::from_secs(10), run: correlation },
        Criterion { id: 6, name: "simulated pipeline efficacy", budget: Duration::from_secs(60), run: pipeline_efficacy },
        Criterion { id: 7, name: "segmentation and interpolation", budget: Duration::from_secs(10), run: segmentation_and_interpolation },
        Criterion { id: 8, name: "perturbation construction", budget: Duration::from_secs(5), run: perturbation_construction },
        Criterion { id: 9, name: "determinism under concurrency", budget: Duration::from_secs(60), run: determinism },
        Criterion { id: 10, name: "resumability", budget: Duration::from_secs(30), run: resumability },
    ];
    let filter: Option<u8> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_none_or(|f| f == c.id)) {
        let t = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = t.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(e) => (false, e),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:>2} {:<32} {:>8.3}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
