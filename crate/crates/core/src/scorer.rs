//! Echo likelihoods and per-segment uniqueness scores.
//!
//! For segment `i` and prefix length `j < i`, the echo likelihood
//! `p[i][j] = max(count/K, epsilon)` estimates how often continuations
//! sampled from the first `j` segments already contain segment `i`'s plot.
//! The floor keeps `-ln p` finite when nothing echoes: with the default
//! `epsilon = 1e-6` a never-echoed segment scores `-ln 1e-6 ≈ 13.8155`.
//!
//! Segment `i`'s score is the exponentially decayed weighted average
//!
//! ```text
//! SG_i = Σ_{j=1..i-1} λ^j · (-ln p[i][j]) / Σ_{j=1..i-1} λ^j
//! ```
//!
//! (natural log throughout), so echoes from *short* prefixes — plot turns a
//! model reinvents with almost no context — weigh the most. The first
//! segment has no prior prefixes and its score is undefined, rendered "--".
//!
//! The drop ratio between consecutive defined scores,
//! `drop_i = max((SG_i − SG_{i+1})/SG_i − θ, 0)`, flags abrupt deflation: it
//! is zero until the relative drop exceeds the threshold `θ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::UsageTotals;
use crate::judge::JudgmentRecord;

/// Scoring knobs. `epsilon` must stay below `1/K` so the floor only ever
/// applies to zero counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Continuations sampled per prefix.
    pub k: u32,
    /// Exponential decay of prefix weights, in (0, 1).
    pub lambda: f64,
    /// Drop-ratio threshold, in [0, 1).
    pub theta: f64,
    /// Echo-likelihood floor, in (0, 1/K).
    pub epsilon: f64,
    /// Use the soft verdict values (yes 1, partially 0.5, no 0) instead of
    /// binary (yes 1, else 0).
    pub soft: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { k: 20, lambda: 0.9, theta: 0.5, epsilon: 1e-6, soft: false }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 || self.lambda >= 1.0 {
            return Err(Error::Config(format!("lambda must be in (0, 1), got {}", self.lambda)));
        }
        if !self.theta.is_finite() || self.theta < 0.0 || self.theta >= 1.0 {
            return Err(Error::Config(format!("theta must be in [0, 1), got {}", self.theta)));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 || self.epsilon >= 1.0 / self.k as f64 {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1/k = {}), got {}",
                1.0 / self.k as f64,
                self.epsilon
            )));
        }
        Ok(())
    }

    /// The largest attainable score: `-ln epsilon`.
    pub fn ceiling(&self) -> f64 {
        -self.epsilon.ln()
    }
}

/// Echo likelihood for one cell: `max(count/k, epsilon)`. `count` may be a
/// fractional sum under soft verdicts.
pub fn echo_score(count: f64, k: u32, epsilon: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if !count.is_finite() || count < 0.0 || count > k as f64 {
        return Err(Error::Invalid(format!("echo count {count} outside 0..={k}")));
    }
    Ok((count / k as f64).max(epsilon))
}

/// Lower-triangular echo matrix for one story: cells `(i, j)` with
/// `2 <= i <= n`, `1 <= j < i`, stored row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EchoMatrix {
    pub story_id: String,
    pub n: u32,
    pub k: u32,
    /// Verdict sums per cell; absent when the matrix was reloaded from a
    /// CSV, which stores only the likelihoods.
    pub counts: Option<Vec<f64>>,
    /// Echo likelihoods per cell, already floored.
    pub ps: Vec<f64>,
}

/// Number of cells in the lower triangle for `n` segments.
pub fn triangle_cells(n: u32) -> usize {
    (n as usize) * (n as usize - 1) / 2
}

fn cell_index(i: u32, j: u32) -> usize {
    debug_assert!(i >= 2 && j >= 1 && j < i);
    let i = i as usize;
    let j = j as usize;
    (i - 1) * (i - 2) / 2 + (j - 1)
}

impl EchoMatrix {
    /// Build from per-cell verdict sums laid out row by row:
    /// `(2,1), (3,1), (3,2), (4,1), ...`.
    pub fn from_counts(
        story_id: impl Into<String>,
        n: u32,
        k: u32,
        counts: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid("echo matrix needs at least 2 segments".into()));
        }
        if counts.len() != triangle_cells(n) {
            return Err(Error::Invalid(format!(
                "expected {} cells for n={n}, got {}",
                triangle_cells(n),
                counts.len()
            )));
        }
        let ps = counts.iter().map(|&c| echo_score(c, k, epsilon)).collect::<Result<Vec<_>>>()?;
        Ok(EchoMatrix { story_id: story_id.into(), n, k, counts: Some(counts), ps })
    }

    /// Build from a full set of judgment records: every cell must receive
    /// exactly `config.k` verdicts, each (i, j, k) exactly once.
    pub fn from_judgments(
        story_id: impl Into<String>,
        n: u32,
        records: &[JudgmentRecord],
        config: &ScoreConfig,
    ) -> Result<Self> {
        config.validate()?;
        if n < 2 {
            return Err(Error::Invalid("echo matrix needs at least 2 segments".into()));
        }
        let cells = triangle_cells(n);
        let mut counts = vec![0.0f64; cells];
        let mut seen = vec![0u32; cells * config.k as usize];
        for record in records {
            if record.i < 2 || record.i > n || record.j == 0 || record.j >= record.i {
                return Err(Error::Invalid(format!(
                    "judgment ({}, {}) outside the lower triangle for n={n}",
                    record.i, record.j
                )));
            }
            if record.k == 0 || record.k > config.k {
                return Err(Error::Invalid(format!(
                    "judgment k={} outside 1..={}",
                    record.k, config.k
                )));
            }
            let cell = cell_index(record.i, record.j);
            let slot = cell * config.k as usize + (record.k - 1) as usize;
            seen[slot] += 1;
            if seen[slot] > 1 {
                return Err(Error::Invalid(format!(
                    "duplicate judgment for (i={}, j={}, k={})",
                    record.i, record.j, record.k
                )));
            }
            counts[cell] += if config.soft {
                record.value_soft
            } else {
                record.value_binary as f64
            };
        }
        if let Some(missing) = seen.iter().position(|&s| s == 0) {
            let cell = missing / config.k as usize;
            return Err(Error::Invalid(format!(
                "incomplete judgments: cell {cell} is missing verdicts (expected {} per cell)",
                config.k
            )));
        }
        EchoMatrix::from_counts(story_id, n, config.k, counts, config.epsilon)
    }

    pub fn p(&self, i: u32, j: u32) -> f64 {
        self.ps[cell_index(i, j)]
    }

    pub fn count(&self, i: u32, j: u32) -> Option<f64> {
        self.counts.as_ref().map(|c| c[cell_index(i, j)])
    }

    /// The echo likelihoods `p[i][1..i-1]` feeding segment `i`'s score.
    pub fn p_row(&self, i: u32) -> &[f64] {
        let start = cell_index(i, 1);
        &self.ps[start..start + (i - 1) as usize]
    }

    /// CSV render: header `i\j,1,..,n-1`, one row per segment, likelihoods in
    /// the lower triangle and empty cells elsewhere. Values use the shortest
    /// round-trip float form, so parse → render reproduces the bytes.
    pub fn to_csv(&self) -> String {
        let n = self.n;
        let mut out = String::from("i\\j");
        for j in 1..n {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for i in 1..=n {
            out.push_str(&i.to_string());
            for j in 1..n {
                out.push(',');
                if i >= 2 && j < i {
                    out.push_str(&format!("{}", self.p(i, j)));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parse a CSV written by [`to_csv`]. Counts are not recoverable from
    /// the likelihood rendering, so `counts` is `None`.
    pub fn from_csv(story_id: impl Into<String>, k: u32, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid("empty echo CSV".into()))?;
        let cols = header.split(',').count() - 1;
        let n = (cols + 1) as u32;
        if n < 2 {
            return Err(Error::Invalid("echo CSV must have at least one j column".into()));
        }
        let mut ps = vec![0.0f64; triangle_cells(n)];
        let mut rows = 0u32;
        for (row_idx, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let i = (row_idx + 1) as u32;
            rows += 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols + 1 {
                return Err(Error::Invalid(format!(
                    "echo CSV row {i}: expected {} fields, got {}",
                    cols + 1,
                    fields.len()
                )));
            }
            for (j_idx, field) in fields[1..].iter().enumerate() {
                let j = (j_idx + 1) as u32;
                let in_triangle = i >= 2 && j < i;
                if field.is_empty() {
                    if in_triangle {
                        return Err(Error::Invalid(format!(
                            "echo CSV row {i}: missing value at j={j}"
                        )));
                    }
                    continue;
                }
                if !in_triangle {
                    return Err(Error::Invalid(format!(
                        "echo CSV row {i}: unexpected value outside the triangle at j={j}"
                    )));
                }
                let p: f64 = field.parse().map_err(|_| {
                    Error::Invalid(format!("echo CSV row {i}: bad float '{field}'"))
                })?;
                ps[cell_index(i, j)] = p;
            }
        }
        if rows != n {
            return Err(Error::Invalid(format!("echo CSV: expected {n} rows, got {rows}")));
        }
        Ok(EchoMatrix { story_id: story_id.into(), n, k, counts: None, ps })
    }
}

/// Weighted score for one segment given its echo row `p[i][1..i-1]`.
/// An empty row (the first segment) is undefined and returns `None`.
pub fn sui_generis(p_row: &[f64], lambda: f64) -> Result<Option<f64>> {
    if !lambda.is_finite() || lambda <= 0.0 || lambda >= 1.0 {
        return Err(Error::Config(format!("lambda must be in (0, 1), got {lambda}")));
    }
    if p_row.is_empty() {
        return Ok(None);
    }
    let mut numerator = 0.0f64;
    let mut denominator = 0.0f64;
    let mut weight = lambda;
    for &p in p_row {
        if !p.is_finite() || p <= 0.0 || p > 1.0 {
            return Err(Error::Invalid(format!("echo likelihood {p} outside (0, 1]")));
        }
        numerator += weight * (-p.ln());
        denominator += weight;
        weight *= lambda;
    }
    Ok(Some(numerator / denominator))
}

/// Clipped relative drop between two consecutive defined scores. A zero
/// score has nothing to drop from, so its drop is zero by definition.
pub fn drop_between(sg_i: f64, sg_next: f64, theta: f64) -> f64 {
    if sg_i == 0.0 {
        0.0
    } else {
        ((sg_i - sg_next) / sg_i - theta).max(0.0)
    }
}

/// Per-position drops over a sequence of consecutive defined scores, plus
/// the story aggregate (mean drop × 100, in percent). Sequences shorter than
/// two have no drops and an undefined aggregate.
pub fn drop_ratio(sg_sequence: &[f64], theta: f64) -> (Vec<f64>, Option<f64>) {
    let drops: Vec<f64> =
        sg_sequence.windows(2).map(|w| drop_between(w[0], w[1], theta)).collect();
    let aggregate = if drops.is_empty() {
        None
    } else {
        Some(drops.iter().sum::<f64>() / drops.len() as f64 * 100.0)
    };
    (drops, aggregate)
}

/// Scores attached to one segment. `sg` is undefined for the first segment;
/// `drop` is defined only where this segment and its successor both have
/// defined scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub i: u32,
    pub sg: Option<f64>,
    pub drop: Option<f64>,
}

/// Score every segment of an echo matrix.
pub fn score_matrix(matrix: &EchoMatrix, config: &ScoreConfig) -> Result<Vec<SegmentScore>> {
    config.validate()?;
    let n = matrix.n;
    let mut sgs: Vec<Option<f64>> = vec![None];
    for i in 2..=n {
        sgs.push(sui_generis(matrix.p_row(i), config.lambda)?);
    }
    let scores = (1..=n)
        .map(|i| {
            let idx = (i - 1) as usize;
            let sg = sgs[idx];
            let drop = if i < n {
                match (sg, sgs[idx + 1]) {
                    (Some(a), Some(b)) => Some(drop_between(a, b, config.theta)),
                    _ => None,
                }
            } else {
                None
            };
            SegmentScore { i, sg, drop }
        })
        .collect();
    Ok(scores)
}

/// Mean of the defined segment scores.
pub fn story_mean_sg(scores: &[SegmentScore]) -> Option<f64> {
    let defined: Vec<f64> = scores.iter().filter_map(|s| s.sg).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Mean of the defined drops × 100 (percent).
pub fn story_drop_pct(scores: &[SegmentScore]) -> Option<f64> {
    let drops: Vec<f64> = scores.iter().filter_map(|s| s.drop).collect();
    if drops.is_empty() {
        None
    } else {
        Some(drops.iter().sum::<f64>() / drops.len() as f64 * 100.0)
    }
}

/// Everything recorded about one scored story.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryReport {
    pub story_id: String,
    pub run_id: String,
    /// Who wrote the story ("human" or a model id).
    pub generator_model: String,
    /// Model that sampled the alternative continuations; differs from the
    /// generator in cross-model runs.
    pub continuation_model: String,
    pub judge_model: String,
    pub n: u32,
    pub segment_width: u32,
    pub segments: Vec<SegmentScore>,
    pub story_mean_sg: Option<f64>,
    pub story_drop_ratio_pct: Option<f64>,
    pub usage: UsageTotals,
    pub config: ScoreConfig,
    pub template_hash: String,
    pub config_hash: String,
}

impl StoryReport {
    /// Stable serialization used for persisted reports; identical inputs
    /// yield identical bytes.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }
}

/// Cross-story mean (and, with at least two samples, a 95% normal
/// confidence half-width `1.96·s/√m`) of the defined scores at one position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PositionAggregate {
    pub i: u32,
    pub mean: f64,
    pub ci_half: Option<f64>,
    pub m: u32,
}

/// Aggregate segment scores by position across stories.
pub fn aggregate_by_position(reports: &[StoryReport]) -> Vec<PositionAggregate> {
    let max_n = reports.iter().map(|r| r.n).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 1..=max_n {
        let values: Vec<f64> = reports
            .iter()
            .flat_map(|r| r.segments.iter().filter(|s| s.i == i).filter_map(|s| s.sg))
            .collect();
        if values.is_empty() {
            continue;
        }
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let ci_half = if values.len() >= 2 {
            let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
            Some(1.96 * variance.sqrt() / m.sqrt())
        } else {
            None
        };
        out.push(PositionAggregate { i, mean, ci_half, m: values.len() as u32 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::JudgmentLabel;
    use proptest::prelude::*;

    fn record(i: u32, j: u32, k: u32, label: JudgmentLabel) -> JudgmentRecord {
        JudgmentRecord {
            story_id: "s".into(),
            i,
            j,
            k,
            label,
            value_binary: label.binary(),
            value_soft: label.soft(),
            raw_response: label.as_str().into(),
        }
    }

    #[test]
    fn echo_score_is_the_floored_ratio() {
        assert_eq!(echo_score(5.0, 20, 1e-6).unwrap(), 0.25);
        assert_eq!(echo_score(0.0, 20, 1e-6).unwrap(), 1e-6);
        assert_eq!(echo_score(20.0, 20, 1e-6).unwrap(), 1.0);
        assert!(echo_score(21.0, 20, 1e-6).is_err());
        assert!(echo_score(-1.0, 20, 1e-6).is_err());
    }

    #[test]
    fn single_term_score_is_plain_negative_log() {
        // weights cancel when only j=1 contributes
        let sg = sui_generis(&[0.25], 0.9).unwrap().unwrap();
        assert!((sg - 0.25f64.ln().abs()).abs() < 1e-12);
        assert!((sg - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn two_term_score_matches_hand_computation() {
        // (0.9·(-ln 0.1) + 0.81·(-ln 0.5)) / (0.9 + 0.81)
        let sg = sui_generis(&[0.1, 0.5], 0.9).unwrap().unwrap();
        let expected = (0.9 * 0.1f64.ln().abs() + 0.81 * 0.5f64.ln().abs()) / 1.71;
        assert!((sg - expected).abs() < 1e-15);
        assert!((sg - 1.5402).abs() < 5e-5);
    }

    #[test]
    fn floored_row_hits_the_ceiling() {
        let config = ScoreConfig::default();
        for len in 1..8 {
            let sg = sui_generis(&vec![1e-6; len], config.lambda).unwrap().unwrap();
            assert!((sg - config.ceiling()).abs() < 1e-9);
            assert!((sg - 13.815510557964274).abs() < 1e-9);
        }
    }

    #[test]
    fn first_segment_is_undefined() {
        assert_eq!(sui_generis(&[], 0.9).unwrap(), None);
    }

    #[test]
    fn out_of_range_likelihoods_are_rejected() {
        assert!(sui_generis(&[0.0], 0.9).is_err());
        assert!(sui_generis(&[1.5], 0.9).is_err());
        assert!(sui_generis(&[0.5], 1.0).is_err());
    }

    #[test]
    fn drop_matches_hand_computation() {
        assert!((drop_between(10.0, 2.0, 0.5) - 0.3).abs() < 1e-15); // 0.8 - 0.5
        assert_eq!(drop_between(10.0, 6.0, 0.5), 0.0); // clamp at zero
        assert_eq!(drop_between(5.0, 5.0, 0.5), 0.0); // no drop
        assert_eq!(drop_between(0.0, 3.0, 0.5), 0.0); // nothing to drop from
    }

    #[test]
    fn drop_ratio_aggregates_in_percent() {
        let (drops, agg) = drop_ratio(&[10.0, 2.0, 2.0], 0.5);
        assert_eq!(drops.len(), 2);
        assert!((drops[0] - 0.3).abs() < 1e-15);
        assert_eq!(drops[1], 0.0);
        assert!((agg.unwrap() - 15.0).abs() < 1e-12);
        assert_eq!(drop_ratio(&[5.0], 0.5).1, None);
    }

    #[test]
    fn from_judgments_counts_yes_only_by_default() {
        let config = ScoreConfig { k: 2, ..ScoreConfig::default() };
        let records = vec![
            record(2, 1, 1, JudgmentLabel::Yes),
            record(2, 1, 2, JudgmentLabel::Partially),
        ];
        let m = EchoMatrix::from_judgments("s", 2, &records, &config).unwrap();
        assert_eq!(m.count(2, 1), Some(1.0));
        assert_eq!(m.p(2, 1), 0.5);

        let soft = ScoreConfig { soft: true, ..config };
        let m = EchoMatrix::from_judgments("s", 2, &records, &soft).unwrap();
        assert_eq!(m.count(2, 1), Some(1.5));
        assert_eq!(m.p(2, 1), 0.75);
    }

    #[test]
    fn from_judgments_rejects_gaps_and_duplicates() {
        let config = ScoreConfig { k: 2, ..ScoreConfig::default() };
        let missing = vec![record(2, 1, 1, JudgmentLabel::No)];
        assert!(EchoMatrix::from_judgments("s", 2, &missing, &config).is_err());
        let duplicated = vec![
            record(2, 1, 1, JudgmentLabel::No),
            record(2, 1, 1, JudgmentLabel::Yes),
        ];
        assert!(EchoMatrix::from_judgments("s", 2, &duplicated, &config).is_err());
    }

    #[test]
    fn score_matrix_renders_undefined_edges() {
        let config = ScoreConfig { k: 2, ..ScoreConfig::default() };
        let counts = vec![1.0, 0.0, 2.0]; // (2,1), (3,1), (3,2)
        let m = EchoMatrix::from_counts("s", 3, 2, counts, config.epsilon).unwrap();
        let scores = score_matrix(&m, &config).unwrap();
        assert_eq!(scores.len(), 3);
        assert_eq!(scores[0].sg, None);
        assert_eq!(scores[0].drop, None); // needs a defined SG_1
        assert!(scores[1].sg.is_some());
        assert!(scores[1].drop.is_some()); // SG_2 and SG_3 both defined
        assert!(scores[2].sg.is_some());
        assert_eq!(scores[2].drop, None); // no successor
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let config = ScoreConfig::default();
        let counts = vec![3.0, 0.0, 17.0, 20.0, 1.0, 7.0]; // n = 4
        let m = EchoMatrix::from_counts("s", 4, 20, counts, config.epsilon).unwrap();
        let csv = m.to_csv();
        let back = EchoMatrix::from_csv("s", 20, &csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.ps, m.ps);
        assert_eq!(back.counts, None);
        assert!(csv.starts_with("i\\j,1,2,3\n1,,,\n"));
    }

    #[test]
    fn csv_rejects_malformed_shapes() {
        assert!(EchoMatrix::from_csv("s", 20, "").is_err());
        // value outside the triangle
        let bad = "i\\j,1\n1,0.5\n2,0.5\n";
        assert!(EchoMatrix::from_csv("s", 20, bad).is_err());
        // missing triangle value
        let gap = "i\\j,1\n1,\n2,\n";
        assert!(EchoMatrix::from_csv("s", 20, gap).is_err());
    }

    #[test]
    fn aggregate_means_and_cis() {
        let base = StoryReport {
            story_id: "a".into(),
            run_id: "r".into(),
            generator_model: "human".into(),
            continuation_model: "m".into(),
            judge_model: "m".into(),
            n: 2,
            segment_width: 50,
            segments: vec![
                SegmentScore { i: 1, sg: None, drop: None },
                SegmentScore { i: 2, sg: Some(1.0), drop: None },
            ],
            story_mean_sg: Some(1.0),
            story_drop_ratio_pct: None,
            usage: UsageTotals::default(),
            config: ScoreConfig::default(),
            template_hash: "t".into(),
            config_hash: "c".into(),
        };
        let mut other = base.clone();
        other.story_id = "b".into();
        other.segments[1].sg = Some(3.0);

        // identical reports → zero half-width
        let same = aggregate_by_position(&[base.clone(), base.clone()]);
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].i, 2);
        assert_eq!(same[0].ci_half, Some(0.0));

        // {1, 3} → mean 2, s = √2, half-width 1.96·√2/√2 = 1.96
        let pair = aggregate_by_position(&[base.clone(), other]);
        assert_eq!(pair[0].mean, 2.0);
        assert!((pair[0].ci_half.unwrap() - 1.96).abs() < 1e-12);
        assert_eq!(pair[0].m, 2);

        // single report → mean only
        let single = aggregate_by_position(&[base]);
        assert_eq!(single[0].ci_half, None);
        assert_eq!(single[0].m, 1);
    }

    proptest! {
        /// Lowering any single echo likelihood never lowers the score.
        #[test]
        fn monotone_in_each_cell(
            mut ps in proptest::collection::vec(1e-6f64..=1.0, 1..8),
            idx in 0usize..8,
            shrink in 0.01f64..0.99,
        ) {
            let idx = idx % ps.len();
            let before = sui_generis(&ps, 0.9).unwrap().unwrap();
            ps[idx] = (ps[idx] * shrink).max(1e-9);
            let after = sui_generis(&ps, 0.9).unwrap().unwrap();
            prop_assert!(after >= before - 1e-12);
        }

        /// Uniform echo rows score -ln p for any decay.
        #[test]
        fn uniform_rows_ignore_lambda(
            p in 1e-6f64..=1.0,
            lambda in 0.05f64..0.95,
            len in 1usize..8,
        ) {
            let sg = sui_generis(&vec![p; len], lambda).unwrap().unwrap();
            let expected = -p.ln();
            let tolerance = 1e-12 * expected.abs().max(1.0);
            prop_assert!((sg - expected).abs() <= tolerance);
        }

        /// Swapping the smallest likelihood into the first position never
        /// lowers the score: early echoes carry the largest weight.
        #[test]
        fn earliest_position_dominates(
            ps in proptest::collection::vec(1e-6f64..=1.0, 2..8),
        ) {
            let min_idx = ps
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(idx, _)| idx)
                .unwrap();
            let mut fronted = ps.clone();
            fronted.swap(0, min_idx);
            let original = sui_generis(&ps, 0.9).unwrap().unwrap();
            let swapped = sui_generis(&fronted, 0.9).unwrap().unwrap();
            prop_assert!(swapped >= original - 1e-12);
        }

        /// Scores stay inside [0, -ln epsilon] for floored rows.
        #[test]
        fn bounded_by_the_ceiling(
            counts in proptest::collection::vec(0u32..=20, 1..9),
            lambda in 0.05f64..0.95,
        ) {
            let config = ScoreConfig { lambda, ..ScoreConfig::default() };
            let ps: Vec<f64> =
                counts.iter().map(|&c| echo_score(c as f64, 20, config.epsilon).unwrap()).collect();
            let sg = sui_generis(&ps, lambda).unwrap().unwrap();
            prop_assert!(sg >= 0.0);
            prop_assert!(sg <= config.ceiling() + 1e-12);
        }

        /// Drops always land in [0, 1 - theta] for nonnegative scores.
        #[test]
        fn drops_stay_clipped(
            sg_i in 0.0f64..14.0,
            sg_next in 0.0f64..14.0,
            theta in 0.0f64..0.95,
        ) {
            let d = drop_between(sg_i, sg_next, theta);
            prop_assert!(d >= 0.0);
            prop_assert!(d <= 1.0 - theta + 1e-12);
        }
    }
}
