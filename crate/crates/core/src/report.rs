//! Run persistence and output rendering: run directories, manifests, cost
//! estimation, echo heatmaps, score tables, and position curves.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SegmentedStory;
use crate::error::{Error, Result};
use crate::scorer::{EchoMatrix, PositionAggregate, ScoreConfig, SegmentScore, StoryReport};

/// Total LLM calls to score one story of `n` segments with `k` continuations
/// per prefix: one generation per prefix plus one for the story itself, and
/// `k` judgments for every (segment, shorter prefix) pair.
pub fn estimate_calls(n: u64, k: u64) -> u64 {
    n + k * n * n.saturating_sub(1) / 2
}

/// Directory holding everything one run produces. Every output lands under
/// this root; only the request cache may live elsewhere (it is shared
/// between runs).
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the run directory and its fixed layout.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = RunDir { root: root.into() };
        fs::create_dir_all(dir.continuations_dir())?;
        fs::create_dir_all(dir.judgments_dir())?;
        fs::create_dir_all(dir.echo_dir())?;
        fs::create_dir_all(dir.reports_dir())?;
        fs::create_dir_all(dir.figures_dir())?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn usage_log_path(&self) -> PathBuf {
        self.root.join("usage.jsonl")
    }
    pub fn continuations_dir(&self) -> PathBuf {
        self.root.join("continuations")
    }
    pub fn judgments_dir(&self) -> PathBuf {
        self.root.join("judgments")
    }
    pub fn echo_dir(&self) -> PathBuf {
        self.root.join("echo")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn figures_dir(&self) -> PathBuf {
        self.root.join("figures")
    }
}

/// Everything needed to reproduce a run: with this manifest and a warm
/// cache, every output is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub corpus_digest: String,
    pub segment_width: u32,
    pub config: ScoreConfig,
    pub continuation_model: String,
    pub judge_model: String,
    pub gen_backend: String,
    pub judge_backend: String,
    pub template_hash: String,
    /// Hash of every behavior-affecting parameter; changes iff one of them
    /// changes.
    pub config_hash: String,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Fingerprint of the parameters that change scoring behavior. Deliberately
/// excludes run ids, timestamps, paths, and parallelism knobs: those affect
/// where and how fast outputs appear, never what they contain.
#[allow(clippy::too_many_arguments)]
pub fn behavior_hash(
    config: &ScoreConfig,
    segment_width: u32,
    continuation_model: &str,
    judge_model: &str,
    gen_backend: &str,
    judge_backend: &str,
    template_hash: &str,
) -> String {
    #[derive(Serialize)]
    struct Fingerprint<'a> {
        config: &'a ScoreConfig,
        segment_width: u32,
        continuation_model: &'a str,
        judge_model: &'a str,
        gen_backend: &'a str,
        judge_backend: &'a str,
        template_hash: &'a str,
    }
    let fingerprint = Fingerprint {
        config,
        segment_width,
        continuation_model,
        judge_model,
        gen_backend,
        judge_backend,
        template_hash,
    };
    let canonical = serde_json::to_value(&fingerprint).expect("fingerprint serializes").to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Stable short run id from the behavior hash and the corpus content.
pub fn derive_run_id(config_hash: &str, corpus_digest: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_hash.as_bytes());
    hasher.update(corpus_digest.as_bytes());
    hex::encode(hasher.finalize())[..12].to_string()
}

/// Content digest of a corpus file.
pub fn corpus_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

const HEATMAP_LOW: (u8, u8, u8) = (255, 255, 255);
const HEATMAP_HIGH: (u8, u8, u8) = (8, 48, 107);

fn heat_color(p: f64) -> String {
    let p = p.clamp(0.0, 1.0);
    let channel = |low: u8, high: u8| -> u8 {
        (low as f64 + (high as f64 - low as f64) * p).round() as u8
    };
    format!(
        "#{:02x}{:02x}{:02x}",
        channel(HEATMAP_LOW.0, HEATMAP_HIGH.0),
        channel(HEATMAP_LOW.1, HEATMAP_HIGH.1),
        channel(HEATMAP_LOW.2, HEATMAP_HIGH.2)
    )
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render one or two echo matrices as an SVG heatmap and write the CSV data
/// alongside. The lower-left triangle shows `a`'s likelihoods at (row i,
/// column j); with a second matrix its transpose fills the upper-right
/// triangle, so two stories (or two scoring setups) share one figure. The
/// companion CSV lands next to the SVG (`<stem>.csv`, plus `<stem>-b.csv`
/// for the second matrix).
pub fn emit_heatmap(a: &EchoMatrix, b: Option<&EchoMatrix>, svg_path: &Path) -> Result<()> {
    if let Some(b) = b {
        if b.n != a.n {
            return Err(Error::Invalid(format!(
                "heatmap matrices must share n, got {} and {}",
                a.n, b.n
            )));
        }
    }
    let n = a.n as usize;
    let cell = 28usize;
    let margin_left = 46usize;
    let margin_top = 46usize;
    let legend_gap = 18usize;
    let legend_width = 64usize;
    let grid = n * cell;
    let width = margin_left + grid + legend_gap + legend_width + 10;
    let height = margin_top + grid + 16;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str("<defs><linearGradient id=\"scale\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">");
    svg.push_str(&format!("<stop offset=\"0\" stop-color=\"{}\"/>", heat_color(0.0)));
    svg.push_str(&format!("<stop offset=\"1\" stop-color=\"{}\"/>", heat_color(1.0)));
    svg.push_str("</linearGradient></defs>\n");
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));

    let title = match b {
        Some(b) if b.story_id != a.story_id => {
            format!("{} (lower) vs {} (upper)", a.story_id, b.story_id)
        }
        Some(_) => format!("{} (both triangles)", a.story_id),
        None => a.story_id.clone(),
    };
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"14\" text-anchor=\"middle\">{}</text>\n",
        margin_left + grid / 2,
        xml_escape(&title)
    ));

    // axis labels: columns are prefix lengths j, rows are segments i
    for col in 1..=n {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{col}</text>\n",
            margin_left + (col - 1) * cell + cell / 2,
            margin_top - 8
        ));
    }
    for row in 1..=n {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{row}</text>\n",
            margin_left - 8,
            margin_top + (row - 1) * cell + cell / 2 + 4
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">j</text>\n",
        margin_left + grid / 2,
        margin_top - 24
    ));
    svg.push_str(&format!(
        "<text x=\"12\" y=\"{}\" text-anchor=\"middle\">i</text>\n",
        margin_top + grid / 2
    ));

    // grid backdrop; value cells are drawn on top and carry class="cell"
    svg.push_str(&format!(
        "<rect x=\"{margin_left}\" y=\"{margin_top}\" width=\"{grid}\" height=\"{grid}\" \
         fill=\"#eeeeee\" stroke=\"#999999\"/>\n"
    ));
    for row in 1..=n {
        for col in 1..=n {
            let (i, j) = (row as u32, col as u32);
            let value = if j < i {
                Some(a.p(i, j))
            } else if j > i {
                b.map(|b| b.p(j, i))
            } else {
                None
            };
            let Some(p) = value else { continue };
            let x = margin_left + (col - 1) * cell;
            let y = margin_top + (row - 1) * cell;
            svg.push_str(&format!(
                "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"{}\" stroke=\"#999999\"><title>p({i},{j}) = {p}</title></rect>\n",
                heat_color(p)
            ));
        }
    }

    let legend_x = margin_left + grid + legend_gap;
    svg.push_str(&format!(
        "<rect x=\"{legend_x}\" y=\"{margin_top}\" width=\"16\" height=\"{grid}\" \
         fill=\"url(#scale)\" stroke=\"#999999\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\">1</text>\n",
        legend_x + 22,
        margin_top + 10
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\">0</text>\n",
        legend_x + 22,
        margin_top + grid
    ));
    svg.push_str("</svg>\n");

    fs::write(svg_path, svg)?;
    fs::write(svg_path.with_extension("csv"), a.to_csv())?;
    if let Some(b) = b {
        let stem = svg_path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
        let sibling = svg_path.with_file_name(format!("{stem}-b.csv"));
        fs::write(sibling, b.to_csv())?;
    }
    Ok(())
}

/// Quote a CSV field when it contains a comma, quote, or line break.
pub fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "--".to_string(),
    }
}

/// Per-segment scores next to the segment text, as CSV.
pub fn story_table_csv(story: &SegmentedStory, scores: &[SegmentScore]) -> Result<String> {
    if story.segments.len() != scores.len() {
        return Err(Error::Invalid(format!(
            "story has {} segments but {} scores",
            story.segments.len(),
            scores.len()
        )));
    }
    let mut out = String::from("i,sg,drop,word_count,text\n");
    for (segment, score) in story.segments.iter().zip(scores) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            score.i,
            fmt_opt(score.sg),
            fmt_opt(score.drop),
            segment.word_count,
            csv_escape(&segment.text)
        ));
    }
    Ok(out)
}

/// Per-segment scores next to the segment text, as an aligned text table.
pub fn story_table_text(story: &SegmentedStory, scores: &[SegmentScore]) -> Result<String> {
    if story.segments.len() != scores.len() {
        return Err(Error::Invalid(format!(
            "story has {} segments but {} scores",
            story.segments.len(),
            scores.len()
        )));
    }
    let mut out = format!("{:>3}  {:>8}  {:>8}  text\n", "i", "sg", "drop");
    for (segment, score) in story.segments.iter().zip(scores) {
        out.push_str(&format!(
            "{:>3}  {:>8}  {:>8}  {}\n",
            score.i,
            fmt_opt(score.sg),
            fmt_opt(score.drop),
            segment.text
        ));
    }
    Ok(out)
}

/// One row per story: headline numbers for a whole run, sorted by story id.
pub fn summary_csv(reports: &[StoryReport]) -> String {
    let mut rows: Vec<&StoryReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.story_id.cmp(&b.story_id));
    let mut out = String::from(
        "story_id,n,segment_width,mean_sg,drop_ratio_pct,logical_calls,prompt_tokens,completion_tokens\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            csv_escape(&r.story_id),
            r.n,
            r.segment_width,
            fmt_opt(r.story_mean_sg),
            fmt_opt(r.story_drop_ratio_pct),
            r.usage.logical_calls,
            r.usage.prompt_tokens,
            r.usage.completion_tokens
        ));
    }
    out
}

/// Cross-story position means as CSV.
pub fn positions_csv(aggregates: &[PositionAggregate]) -> String {
    let mut out = String::from("i,mean_sg,ci95_half,m\n");
    for a in aggregates {
        out.push_str(&format!(
            "{},{},{},{}\n",
            a.i,
            a.mean,
            a.ci_half.map(|c| c.to_string()).unwrap_or_default(),
            a.m
        ));
    }
    out
}

/// Line chart of mean score by segment position, with 95% CI whiskers where
/// defined.
pub fn positions_svg(aggregates: &[PositionAggregate], path: &Path) -> Result<()> {
    if aggregates.is_empty() {
        return Err(Error::Invalid("no positions to plot".into()));
    }
    let width = 480.0f64;
    let height = 280.0f64;
    let left = 52.0f64;
    let right = 16.0f64;
    let top = 20.0f64;
    let bottom = 36.0f64;
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let max_i = aggregates.iter().map(|a| a.i).max().unwrap() as f64;
    let min_i = aggregates.iter().map(|a| a.i).min().unwrap() as f64;
    let y_max = aggregates
        .iter()
        .map(|a| a.mean + a.ci_half.unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-9);
    let x = |i: f64| {
        if max_i > min_i {
            left + (i - min_i) / (max_i - min_i) * plot_w
        } else {
            left + plot_w / 2.0
        }
    };
    let y = |v: f64| top + plot_h - (v.max(0.0) / y_max) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y_max:.2}</text>\n",
        left - 6.0,
        top + 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>\n",
        left - 6.0,
        top + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">segment position</text>\n",
        left + plot_w / 2.0,
        height - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">mean score</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    ));

    let points: Vec<String> =
        aggregates.iter().map(|a| format!("{:.2},{:.2}", x(a.i as f64), y(a.mean))).collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#08306b\" stroke-width=\"1.5\"/>\n",
        points.join(" ")
    ));
    for a in aggregates {
        let cx = x(a.i as f64);
        if let Some(ci) = a.ci_half {
            let y_hi = y(a.mean + ci);
            let y_lo = y((a.mean - ci).max(0.0));
            svg.push_str(&format!(
                "<line x1=\"{cx:.2}\" y1=\"{y_hi:.2}\" x2=\"{cx:.2}\" y2=\"{y_lo:.2}\" \
                 stroke=\"#08306b\"/>\n"
            ));
        }
        svg.push_str(&format!(
            "<circle class=\"point\" cx=\"{cx:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"#08306b\">\
             <title>i={} mean={} m={}</title></circle>\n",
            y(a.mean),
            a.i,
            a.mean,
            a.m
        ));
        svg.push_str(&format!(
            "<text x=\"{cx:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            top + plot_h + 14.0,
            a.i
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}
