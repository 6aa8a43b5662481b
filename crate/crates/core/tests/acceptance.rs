//! Release gate: every pinned behavior of the scoring library, one test per
//! guarantee, each printing a `[PASS]` line with its runtime. Run with
//! `--nocapture` to see the lines; any regression fails the suite loudly.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sui_generis::baselines;
use sui_generis::corpus::{self, from_segment_texts, AuthorKind, RawStory, Source};
use sui_generis::gateway::{CacheStore, Gateway, MockBackend, MockScript};
use sui_generis::pipeline::{score_story, ScoreRun};
use sui_generis::report::{estimate_calls, RunDir};
use sui_generis::scorer::{
    drop_between, score_matrix, sui_generis, EchoMatrix, ScoreConfig,
};
use sui_generis::templates::PromptTemplates;

fn pass(label: &str, started: Instant, limit: Duration) {
    let elapsed = started.elapsed();
    println!("[PASS] {label} ({elapsed:.2?})");
    assert!(elapsed < limit, "{label}: took {elapsed:.2?}, limit {limit:.2?}");
}

fn human_story(id: &str, n_words: usize) -> RawStory {
    RawStory {
        id: id.into(),
        prompt: format!("a prompt for {id}"),
        body: (0..n_words).map(|w| format!("{id}w{w}")).collect::<Vec<_>>().join(" "),
        source: Source::Other,
        author_kind: AuthorKind::Human,
        model: None,
    }
}

fn mock_gateway(seed: u64, cache: &Arc<CacheStore>) -> Gateway {
    let backend = Arc::new(MockBackend::new(MockScript::seeded(seed)));
    Gateway::builder(backend).cache_store(Arc::clone(cache)).build()
}

// ─────────────────────────────────────────────────────────────────────────────
// Arithmetic reproduction
// ─────────────────────────────────────────────────────────────────────────────

/// A story none of whose segments is ever echoed scores at the ceiling
/// `-ln(epsilon)` — 13.8155 to four decimals — at every position past the
/// first.
#[test]
fn unechoed_stories_score_at_the_ceiling() {
    let started = Instant::now();
    let config = ScoreConfig::default();
    let n = 10u32;
    let cells = (n as usize) * (n as usize - 1) / 2;
    let matrix = EchoMatrix::from_counts("flat", n, config.k, vec![0.0; cells], config.epsilon)
        .unwrap();
    let scores = score_matrix(&matrix, &config).unwrap();
    assert!(scores[0].sg.is_none(), "the opening segment has no score");
    for score in &scores[1..] {
        let sg = score.sg.expect("positions past the first are scored");
        assert!(
            (sg - 13.8155).abs() <= 0.005,
            "position {}: sg = {sg}, want 13.8155 +/- 0.005",
            score.i
        );
    }
    pass("unechoed stories score 13.8155 +/- 0.005 at every position past the first", started, Duration::from_secs(1));
}

/// The projected call count for a 10-segment story at 20 continuations per
/// prefix is 910, and actually scoring such a story against the offline
/// backend dispatches exactly the 900 judgments the projection prices in.
#[test]
fn ten_segment_scoring_dispatches_exactly_the_projected_judge_calls() {
    let started = Instant::now();
    assert_eq!(estimate_calls(10, 20), 910);

    let tmp = tempfile::tempdir().unwrap();
    let cache = Arc::new(CacheStore::open(tmp.path().join("cache")).unwrap());
    let gateway = mock_gateway(11, &cache);
    let run_dir = RunDir::create(tmp.path().join("run")).unwrap();
    let templates = PromptTemplates::default();
    let config = ScoreConfig::default();
    let run = ScoreRun {
        gen_gateway: &gateway,
        judge_gateway: &gateway,
        continuation_model: "writer",
        judge_model: "judge",
        templates: &templates,
        config,
        run_id: "acceptance".into(),
        config_hash: "-".into(),
        run_dir: Some(&run_dir),
    };
    let story = human_story("ten", 500);
    let report = score_story(&run, &story, 50).unwrap();
    assert_eq!(report.n, 10);

    let stats = gateway.stats();
    assert_eq!(stats.dispatched_judge, 900, "judge dispatches for n=10, k=20");
    assert_eq!(stats.dispatched_generate, 9, "one sampling call per proper prefix");
    pass("a 10-segment story projects 910 calls and dispatches exactly 900 judgments", started, Duration::from_secs(10));
}

/// An independent re-evaluation of the score formula (explicit powers instead
/// of the pipeline's incremental weights) agrees to 1e-12 relative error on
/// random matrices, and re-applying the drop formula to the pipeline's scores
/// reproduces its drops bit for bit.
#[test]
fn random_matrices_match_an_independent_oracle() {
    let started = Instant::now();
    let config = ScoreConfig::default();

    fn oracle_sg(ps: &[f64], lambda: f64) -> f64 {
        let mut numerator = 0.0;
        let mut denominator = 0.0;
        for (idx, &p) in ps.iter().enumerate() {
            let weight = lambda.powi(idx as i32 + 1);
            numerator += weight * -p.ln();
            denominator += weight;
        }
        numerator / denominator
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let n: u32 = rng.random_range(2..=10);
        let cells = (n as usize) * (n as usize - 1) / 2;
        let counts: Vec<f64> =
            (0..cells).map(|_| rng.random_range(0..=config.k) as f64).collect();
        let matrix =
            EchoMatrix::from_counts(format!("m{case}"), n, config.k, counts, config.epsilon)
                .unwrap();
        let scores = score_matrix(&matrix, &config).unwrap();

        for i in 2..=n {
            let got = scores[(i - 1) as usize].sg.unwrap();
            let want = oracle_sg(matrix.p_row(i), config.lambda);
            let scale = want.abs().max(1e-300);
            assert!(
                (got - want).abs() / scale <= 1e-12 || (got - want).abs() <= 1e-12,
                "case {case}, i={i}: pipeline {got} vs oracle {want}"
            );
        }
        for i in 2..n {
            let sg_i = scores[(i - 1) as usize].sg.unwrap();
            let sg_next = scores[i as usize].sg.unwrap();
            let want = if sg_i == 0.0 {
                0.0
            } else {
                ((sg_i - sg_next) / sg_i - config.theta).max(0.0)
            };
            let got = scores[(i - 1) as usize].drop.unwrap();
            assert!(
                got == want,
                "case {case}, i={i}: drop {got} differs from direct evaluation {want}"
            );
        }
    }
    pass("200 random matrices match an independent oracle (sg <= 1e-12 rel, drops exact)", started, Duration::from_secs(5));
}

/// Structural properties of the score, each over 1000 seeded random
/// instances: cell-wise monotonicity, the [0, -ln eps] bound, weight-decay
/// independence on uniform rows, earliest-position dominance, and the drop
/// clip range.
#[test]
fn score_properties_hold_across_randomized_instances() {
    let started = Instant::now();
    let config = ScoreConfig::default();
    let ceiling = config.ceiling();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let random_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let len = rng.random_range(1..=9usize);
        (0..len)
            .map(|_| {
                // log-uniform between epsilon and 1 so small likelihoods are common
                let exponent = rng.random_range(config.epsilon.ln()..=0.0);
                exponent.exp().clamp(config.epsilon, 1.0)
            })
            .collect()
    };

    // raising any single echo likelihood never raises the score
    for _ in 0..1000 {
        let row = random_row(&mut rng);
        let base = sui_generis(&row, config.lambda).unwrap().unwrap();
        let mut raised = row.clone();
        let cell = rng.random_range(0..row.len());
        raised[cell] = rng.random_range(raised[cell]..=1.0);
        let after = sui_generis(&raised, config.lambda).unwrap().unwrap();
        assert!(after <= base, "raising p from {} to {} raised sg {base} -> {after}", row[cell], raised[cell]);
    }

    // scores stay inside [0, -ln epsilon]
    for _ in 0..1000 {
        let row = random_row(&mut rng);
        let sg = sui_generis(&row, config.lambda).unwrap().unwrap();
        assert!(
            (0.0..=ceiling).contains(&sg),
            "sg {sg} escaped [0, {ceiling}] for row {row:?}"
        );
    }

    // on a uniform row the weight decay cancels out of the average
    for _ in 0..1000 {
        let p = rng.random_range(config.epsilon..=1.0);
        let len = rng.random_range(1..=9usize);
        let row = vec![p; len];
        let a = sui_generis(&row, rng.random_range(0.05..0.95)).unwrap().unwrap();
        let b = sui_generis(&row, rng.random_range(0.05..0.95)).unwrap().unwrap();
        let scale = a.abs().max(1e-12);
        assert!((a - b).abs() / scale <= 1e-12, "uniform row scored {a} vs {b}");
    }

    // the earliest prefix carries the largest weight: moving the strongest
    // echo (largest p) there never increases the score
    for _ in 0..1000 {
        let row = random_row(&mut rng);
        let base = sui_generis(&row, config.lambda).unwrap().unwrap();
        let strongest = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(idx, _)| idx)
            .unwrap();
        let mut fronted = row.clone();
        fronted.swap(0, strongest);
        let after = sui_generis(&fronted, config.lambda).unwrap().unwrap();
        assert!(
            after <= base + 1e-12,
            "fronting the strongest echo raised sg {base} -> {after} for {row:?}"
        );
    }

    // drops are clipped to [0, 1 - theta]
    for _ in 0..1000 {
        let theta = rng.random_range(0.0..1.0);
        let sg_i = rng.random_range(0.0..=ceiling);
        let sg_next = rng.random_range(0.0..=ceiling);
        let drop = drop_between(sg_i, sg_next, theta);
        assert!(
            drop >= 0.0 && drop <= 1.0 - theta,
            "drop {drop} escaped [0, {}] for sg {sg_i} -> {sg_next}",
            1.0 - theta
        );
    }

    pass("5 score properties hold on 1000 randomized instances each", started, Duration::from_secs(10));
}

// ─────────────────────────────────────────────────────────────────────────────
// Determinism
// ─────────────────────────────────────────────────────────────────────────────

/// Scoring the same corpus twice against the same cache writes byte-identical
/// reports and dispatches nothing the second time.
#[test]
fn rescoring_with_a_warm_cache_is_byte_identical_and_dispatch_free() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cache = Arc::new(CacheStore::open(tmp.path().join("cache")).unwrap());
    let templates = PromptTemplates::default();
    let config = ScoreConfig { k: 4, ..ScoreConfig::default() };
    let stories = [human_story("alpha", 40), human_story("beta", 50)];

    let score_all = |label: &str| {
        let gateway = mock_gateway(17, &cache);
        let run_dir = RunDir::create(tmp.path().join(label)).unwrap();
        let run = ScoreRun {
            gen_gateway: &gateway,
            judge_gateway: &gateway,
            continuation_model: "writer",
            judge_model: "judge",
            templates: &templates,
            config,
            run_id: "repeat".into(),
            config_hash: "-".into(),
            run_dir: Some(&run_dir),
        };
        for story in &stories {
            score_story(&run, story, 10).unwrap();
        }
        (gateway.stats(), run_dir)
    };

    let (cold, first_dir) = score_all("first");
    let (warm, second_dir) = score_all("second");
    assert!(cold.dispatched_total > 0, "the cold run reaches the backend");
    assert_eq!(warm.dispatched_total, 0, "the warm run is served from cache");
    assert_eq!(warm.cache_hits, warm.logical_calls);

    let mut compared = 0usize;
    for sub in ["reports", "echo", "figures", "continuations", "judgments"] {
        for entry in walk(&first_dir.root().join(sub)) {
            let relative = entry.strip_prefix(first_dir.root()).unwrap();
            let twin = second_dir.root().join(relative);
            assert_eq!(
                std::fs::read(&entry).unwrap(),
                std::fs::read(&twin).unwrap(),
                "{} differs between runs",
                relative.display()
            );
            compared += 1;
        }
    }
    assert!(compared >= 18, "compared only {compared} files");
    pass("rescoring with a warm cache is byte-identical and dispatch-free", started, Duration::from_secs(10));
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    files
}

// ─────────────────────────────────────────────────────────────────────────────
// Reference metrics
// ─────────────────────────────────────────────────────────────────────────────

/// Hand-computable fixtures for every reference metric.
#[test]
fn baseline_metrics_reproduce_hand_computed_values() {
    let started = Instant::now();

    let sentence = "the lighthouse keeper counted the ships that never came home";
    let clones = vec![sentence; 5];
    let bleu = baselines::self_bleu(&clones, 4, baselines::Smoothing::Off).unwrap();
    assert!((bleu - 1.0).abs() <= 1e-9, "self-BLEU of identical texts = {bleu}");

    let rouge = baselines::rouge_l_f1(sentence, sentence);
    assert_eq!(rouge, 1.0, "ROUGE-L F1 of an identical pair = {rouge}");

    let diversity = baselines::ngram_diversity(&["a a a a"], 1).unwrap();
    assert_eq!(diversity, 0.25, "1 unique unigram over 4 = {diversity}");

    let x: Vec<f64> = (1..=7).map(f64::from).collect();
    let reversed: Vec<f64> = x.iter().rev().copied().collect();
    let rho = baselines::spearman(&x, &reversed).unwrap().rho;
    assert_eq!(rho, -1.0, "reversed ranks correlate at {rho}");

    let rho = baselines::spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap().rho;
    assert!((rho - 0.5).abs() <= 1e-12, "one adjacent transposition = {rho}");

    let script = MockScript {
        logprob_per_token: Some(-(2.0f64.ln())),
        ..MockScript::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let cache = Arc::new(CacheStore::open(tmp.path().join("cache")).unwrap());
    let gateway = Gateway::builder(Arc::new(MockBackend::new(script)))
        .cache_store(cache)
        .build();
    let ppl = baselines::perplexity("a steady stream of tokens", &gateway, "scorer").unwrap();
    assert!((ppl - 2.0).abs() <= 1e-9, "uniform -ln 2 logprobs give perplexity {ppl}");

    pass("baseline metrics reproduce hand-computed values", started, Duration::from_secs(10));
}

// ─────────────────────────────────────────────────────────────────────────────
// Segmentation
// ─────────────────────────────────────────────────────────────────────────────

/// Fuzzed bodies (messy whitespace, 1..=400 words) split and reassemble
/// losslessly at every width from 1 to 80.
#[test]
fn segmentation_round_trips_across_fuzzed_stories() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let glyphs: Vec<char> = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789,.;!?'\"-"
        .chars()
        .collect();
    let separators = [" ", "  ", "\t", "\n", " \n ", "\r\n", "   "];

    for case in 0..1000 {
        let n_words = rng.random_range(1..=400usize);
        let words: Vec<String> = (0..n_words)
            .map(|_| {
                let len = rng.random_range(1..=12usize);
                (0..len).map(|_| glyphs[rng.random_range(0..glyphs.len())]).collect()
            })
            .collect();
        let mut body = String::new();
        for (idx, word) in words.iter().enumerate() {
            if idx > 0 {
                body.push_str(separators[rng.random_range(0..separators.len())]);
            }
            body.push_str(word);
        }
        let width: u32 = rng.random_range(1..=80);

        let story = RawStory {
            id: format!("fuzz{case}"),
            prompt: String::new(),
            body,
            source: Source::Other,
            author_kind: AuthorKind::Human,
            model: None,
        };
        let seg = corpus::segment(&story, width).unwrap();

        let expected_n = n_words.div_ceil(width as usize);
        assert_eq!(seg.n() as usize, expected_n, "case {case}: segment count");
        for (idx, s) in seg.segments.iter().enumerate() {
            let want = if idx + 1 < expected_n {
                width
            } else {
                (n_words - (expected_n - 1) * width as usize) as u32
            };
            assert_eq!(s.word_count, want, "case {case}: width of segment {}", idx + 1);
            assert_eq!(s.text.split_whitespace().count() as u32, s.word_count);
        }
        assert_eq!(seg.normalized_body(), words.join(" "), "case {case}: lossless reassembly");
        if seg.n() >= 2 {
            let j = rng.random_range(1..seg.n());
            let prefix = seg.prefix(j).unwrap();
            let want: Vec<&str> = words.iter().take((j * width) as usize).map(|w| w.as_str()).collect();
            assert_eq!(prefix, want.join(" "), "case {case}: prefix of {j} segments");
        }

        let texts: Vec<String> = seg.segments.iter().map(|s| s.text.clone()).collect();
        let rebuilt = from_segment_texts(&story.id, width, &texts).unwrap();
        assert_eq!(rebuilt, seg, "case {case}: rebuilding from segment texts");
    }
    pass("segmentation round-trips 1000 fuzzed stories at widths 1..=80", started, Duration::from_secs(10));
}
