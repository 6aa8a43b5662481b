//! End-to-end scoring of one story: segment, sample alternative
//! continuations for every prefix, judge every (segment, continuation)
//! pair, fold the verdicts into an echo matrix, and score it. Every
//! intermediate product is persisted under the run directory so a run can
//! be audited and re-derived piecewise.

use std::fs;

use crate::corpus::{segment, RawStory};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, UsageTotals};
use crate::judge::{judge_matrix, write_judgments};
use crate::report::{emit_heatmap, story_table_csv, story_table_text, RunDir};
use crate::sampler::{sample_all_prefixes, write_continuations};
use crate::scorer::{
    score_matrix, story_drop_pct, story_mean_sg, EchoMatrix, ScoreConfig, StoryReport,
};
use crate::templates::PromptTemplates;

/// Shared context for scoring stories within one run. Generation and
/// judging may use different gateways (different backends or models);
/// cross-model scoring swaps only the generation side.
pub struct ScoreRun<'a> {
    pub gen_gateway: &'a Gateway,
    pub judge_gateway: &'a Gateway,
    pub continuation_model: &'a str,
    pub judge_model: &'a str,
    pub templates: &'a PromptTemplates,
    pub config: ScoreConfig,
    pub run_id: String,
    pub config_hash: String,
    /// When present, all intermediates and reports are persisted here.
    pub run_dir: Option<&'a RunDir>,
}

/// Score one story end to end. The returned report is identical across
/// reruns that share a cache: usage totals count logical calls, not
/// dispatches, so a warm cache changes cost but never content.
pub fn score_story(run: &ScoreRun, story: &RawStory, width: u32) -> Result<StoryReport> {
    score_story_inner(run, story, width).map_err(|e| Error::for_story(&story.id, e))
}

fn score_story_inner(run: &ScoreRun, story: &RawStory, width: u32) -> Result<StoryReport> {
    run.config.validate()?;
    story.validate()?;
    let segmented = segment(story, width)?;
    let n = segmented.n();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "needs at least 2 segments of {width} words to score, has {n}"
        )));
    }

    let sets = sample_all_prefixes(
        &segmented,
        &story.prompt,
        run.config.k,
        run.gen_gateway,
        run.continuation_model,
        None,
        run.templates,
    )?;
    if let Some(dir) = run.run_dir {
        for set in &sets {
            write_continuations(&dir.continuations_dir(), set)?;
        }
    }

    let (records, judge_usage) =
        judge_matrix(&segmented, &sets, run.judge_gateway, run.judge_model, run.templates)?;
    if let Some(dir) = run.run_dir {
        write_judgments(&dir.judgments_dir(), &story.id, &records)?;
    }

    let matrix = EchoMatrix::from_judgments(&story.id, n, &records, &run.config)?;
    if let Some(dir) = run.run_dir {
        fs::write(dir.echo_dir().join(format!("{}.csv", story.id)), matrix.to_csv())?;
        let mut json = serde_json::to_vec_pretty(&matrix)?;
        json.push(b'\n');
        fs::write(dir.echo_dir().join(format!("{}.json", story.id)), json)?;
    }

    let scores = score_matrix(&matrix, &run.config)?;
    let mut usage = UsageTotals::default();
    for set in &sets {
        usage.merge(&set.usage);
    }
    usage.merge(&judge_usage);

    let report = StoryReport {
        story_id: story.id.clone(),
        run_id: run.run_id.clone(),
        generator_model: story.author_label().to_string(),
        continuation_model: run.continuation_model.to_string(),
        judge_model: run.judge_model.to_string(),
        n,
        segment_width: width,
        story_mean_sg: story_mean_sg(&scores),
        story_drop_ratio_pct: story_drop_pct(&scores),
        segments: scores,
        usage,
        config: run.config,
        template_hash: run.templates.hash(),
        config_hash: run.config_hash.clone(),
    };

    if let Some(dir) = run.run_dir {
        fs::write(dir.reports_dir().join(format!("{}.json", story.id)), report.to_json_bytes())?;
        fs::write(
            dir.reports_dir().join(format!("{}.csv", story.id)),
            story_table_csv(&segmented, &report.segments)?,
        )?;
        fs::write(
            dir.reports_dir().join(format!("{}.txt", story.id)),
            story_table_text(&segmented, &report.segments)?,
        )?;
        emit_heatmap(&matrix, None, &dir.figures_dir().join(format!("{}.svg", story.id)))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AuthorKind, Source};
    use crate::gateway::{Budget, CacheStore, MockBackend, MockScript};
    use std::sync::Arc;

    fn story(n_words: usize) -> RawStory {
        let body: Vec<String> = (0..n_words).map(|w| format!("word{w}")).collect();
        RawStory {
            id: "story-a".into(),
            prompt: "a test prompt".into(),
            body: body.join(" "),
            source: Source::Other,
            author_kind: AuthorKind::Human,
            model: None,
        }
    }

    fn gateway_with_cache(cache: Arc<CacheStore>) -> Gateway {
        Gateway::builder(Arc::new(MockBackend::new(MockScript::seeded(11))))
            .cache_store(cache)
            .budget(Arc::new(Budget::default()))
            .build()
    }

    fn run<'a>(
        gateway: &'a Gateway,
        config: &ScoreConfig,
        templates: &'a PromptTemplates,
        dir: Option<&'a RunDir>,
    ) -> ScoreRun<'a> {
        ScoreRun {
            gen_gateway: gateway,
            judge_gateway: gateway,
            continuation_model: "writer",
            judge_model: "checker",
            templates,
            config: *config,
            run_id: "testrun".into(),
            config_hash: "cfg".into(),
            run_dir: dir,
        }
    }

    #[test]
    fn scores_and_persists_a_story() {
        let tmp = tempfile::tempdir().unwrap();
        let run_dir = RunDir::create(tmp.path().join("run")).unwrap();
        let cache = Arc::new(CacheStore::open(tmp.path().join("cache")).unwrap());
        let gateway = gateway_with_cache(cache);
        let templates = PromptTemplates::default();
        let config = ScoreConfig { k: 2, ..ScoreConfig::default() };

        let story = story(12); // 4 segments of width 3
        let ctx = run(&gateway, &config, &templates, Some(&run_dir));
        let report = score_story(&ctx, &story, 3).unwrap();

        assert_eq!(report.n, 4);
        assert_eq!(report.segments.len(), 4);
        assert_eq!(report.segments[0].sg, None);
        assert!(report.segments[1..].iter().all(|s| s.sg.is_some()));
        assert!(report.story_mean_sg.is_some());
        assert_eq!(report.generator_model, "human");

        // 3 batched sampling calls + 2·(4·3/2) = 12 judgments
        assert_eq!(report.usage.logical_calls, 15);
        assert_eq!(gateway.stats().dispatched_judge, 12);
        assert_eq!(gateway.stats().dispatched_generate, 3);

        for path in [
            run_dir.continuations_dir().join("story-a/1.jsonl"),
            run_dir.continuations_dir().join("story-a/3.jsonl"),
            run_dir.judgments_dir().join("story-a.jsonl"),
            run_dir.echo_dir().join("story-a.csv"),
            run_dir.echo_dir().join("story-a.json"),
            run_dir.reports_dir().join("story-a.json"),
            run_dir.reports_dir().join("story-a.csv"),
            run_dir.reports_dir().join("story-a.txt"),
            run_dir.figures_dir().join("story-a.svg"),
        ] {
            assert!(path.is_file(), "{path:?} missing");
        }
    }

    #[test]
    fn warm_cache_reruns_are_byte_identical_with_zero_dispatches() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = Arc::new(CacheStore::open(tmp.path().join("cache")).unwrap());
        let templates = PromptTemplates::default();
        let config = ScoreConfig { k: 2, ..ScoreConfig::default() };
        let story = story(9); // 3 segments

        let cold_dir = RunDir::create(tmp.path().join("cold")).unwrap();
        let cold_gateway = gateway_with_cache(Arc::clone(&cache));
        let cold =
            score_story(&run(&cold_gateway, &config, &templates, Some(&cold_dir)), &story, 3)
                .unwrap();
        assert!(cold_gateway.stats().dispatched_total > 0);

        let warm_dir = RunDir::create(tmp.path().join("warm")).unwrap();
        let warm_gateway = gateway_with_cache(Arc::clone(&cache));
        let warm =
            score_story(&run(&warm_gateway, &config, &templates, Some(&warm_dir)), &story, 3)
                .unwrap();
        assert_eq!(warm_gateway.stats().dispatched_total, 0);
        assert_eq!(warm_gateway.stats().cache_hits, warm.usage.logical_calls);

        assert_eq!(warm.to_json_bytes(), cold.to_json_bytes());
        for file in ["reports/story-a.json", "echo/story-a.csv", "figures/story-a.svg"] {
            assert_eq!(
                fs::read(cold_dir.root().join(file)).unwrap(),
                fs::read(warm_dir.root().join(file)).unwrap(),
                "{file} differs between cold and warm runs"
            );
        }
    }

    #[test]
    fn short_stories_are_rejected_with_story_context() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = Arc::new(CacheStore::open(tmp.path().join("cache")).unwrap());
        let gateway = gateway_with_cache(cache);
        let templates = PromptTemplates::default();
        let config = ScoreConfig { k: 2, ..ScoreConfig::default() };

        let short = story(3); // a single 3-word segment
        let err = score_story(&run(&gateway, &config, &templates, None), &short, 3).unwrap_err();
        assert!(matches!(err, Error::Story { ref story_id, .. } if story_id == "story-a"));
        assert!(matches!(err.root(), Error::Invalid(_)));
        assert_eq!(gateway.stats().logical_calls, 0);
    }
}
