//! Measurement suite: pairwise accuracy, the cross-dataset accuracy matrix
//! with per-group rAcc, best-of-N selection with top-k recall against a
//! judge, and implicit rewards from DPO-trained policies. All routines are
//! pure functions of an immutable scorer, so any of them can run against
//! the trained model, a ground-truth rule or a random baseline.

mod judge;
mod sampler;
mod scorer;

pub use judge::{judged_ranking, validate_permutation, FileJudge, Judge, OracleJudge};
pub use sampler::{sample_candidates, sample_candidates_with_len, DEFAULT_SAMPLE_TOKENS};
pub use scorer::{
    ImplicitDpoScorer, ModelScorer, RewardScorer, RuleScorer, ShiftedScorer, UniformRandomScorer,
};

use crate::data::PreferenceRecord;
use crate::model::{DualHeadModel, ModelError, ReferenceModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation contract violated: {0}")]
    Contract(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("judge returned an invalid permutation for prompt '{prompt_id}': {detail}")]
    InvalidPermutation { prompt_id: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Pairwise accuracy over one dataset: the share of pairs whose preferred
/// response scores strictly higher. Exact ties count as wrong.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub dataset: String,
    pub n_pairs: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    /// Mean of `score(chosen) - score(rejected)`.
    pub mean_margin: f64,
}

pub fn pairwise_accuracy(
    scorer: &dyn RewardScorer,
    dataset: &str,
    records: &[PreferenceRecord],
) -> Result<AccuracyReport, EvalError> {
    Ok(validation_summary(scorer, dataset, records)?.0)
}

/// Accuracy report plus the mean reward over both responses, from a single
/// scoring pass. The mean reward is the raw "reward on the validation set"
/// reading of the checkpoint-selection metric, logged next to accuracy.
pub fn validation_summary(
    scorer: &dyn RewardScorer,
    dataset: &str,
    records: &[PreferenceRecord],
) -> Result<(AccuracyReport, f64), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Contract(
            "pairwise accuracy needs at least one record".into(),
        ));
    }
    let mut n_correct = 0usize;
    let mut margin_sum = 0.0;
    let mut reward_sum = 0.0;
    for r in records {
        let s_w = scorer.score(&r.prompt, &r.chosen)?;
        let s_l = scorer.score(&r.prompt, &r.rejected)?;
        if s_w > s_l {
            n_correct += 1;
        }
        margin_sum += s_w - s_l;
        reward_sum += s_w + s_l;
    }
    Ok((
        AccuracyReport {
            dataset: dataset.to_string(),
            n_pairs: records.len(),
            n_correct,
            accuracy: n_correct as f64 / records.len() as f64,
            mean_margin: margin_sum / records.len() as f64,
        },
        reward_sum / (2 * records.len()) as f64,
    ))
}

/// Cross-dataset accuracy grid. Rows are training tags, columns evaluation
/// tags. `racc` is the mean over same-group columns excluding the row's own
/// dataset; a row whose group has no other member reports its
/// in-distribution accuracy instead, flagged as such.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OODMatrix {
    pub row_tags: Vec<String>,
    pub col_tags: Vec<String>,
    /// `cells[i][j]` = accuracy of row model `i` on column dataset `j`.
    pub cells: Vec<Vec<f64>>,
    /// Mean over columns other than the row's own tag.
    pub row_avg: Vec<f64>,
    pub racc: Vec<Option<f64>>,
    pub in_distribution_only: Vec<bool>,
    pub groups: BTreeMap<String, String>,
}

impl OODMatrix {
    pub fn cell(&self, row_tag: &str, col_tag: &str) -> Option<f64> {
        let i = self.row_tags.iter().position(|t| t == row_tag)?;
        let j = self.col_tags.iter().position(|t| t == col_tag)?;
        Some(self.cells[i][j])
    }

    /// Recompute rAcc for a row straight from the stored cells; used to
    /// cross-check the aggregation.
    pub fn recompute_racc(&self, row: usize) -> Option<f64> {
        let row_tag = &self.row_tags[row];
        let group = self.groups.get(row_tag)?;
        let mut values = Vec::new();
        for (j, col_tag) in self.col_tags.iter().enumerate() {
            if col_tag != row_tag && self.groups.get(col_tag) == Some(group) {
                values.push(self.cells[row][j]);
            }
        }
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Evaluate every (model, dataset) combination. `groups` must cover every
/// row and column tag.
pub fn ood_matrix(
    models: &BTreeMap<String, &dyn RewardScorer>,
    datasets: &BTreeMap<String, Vec<PreferenceRecord>>,
    groups: &BTreeMap<String, String>,
) -> Result<OODMatrix, EvalError> {
    if models.is_empty() || datasets.is_empty() {
        return Err(EvalError::Config(
            "the matrix needs at least one model and one dataset".into(),
        ));
    }
    for tag in models.keys().chain(datasets.keys()) {
        if !groups.contains_key(tag) {
            return Err(EvalError::Config(format!(
                "group map is missing tag '{tag}'"
            )));
        }
    }
    let row_tags: Vec<String> = models.keys().cloned().collect();
    let col_tags: Vec<String> = datasets.keys().cloned().collect();
    let mut cells = Vec::with_capacity(row_tags.len());
    for row_tag in &row_tags {
        let scorer = models[row_tag];
        let mut row = Vec::with_capacity(col_tags.len());
        for col_tag in &col_tags {
            let report = pairwise_accuracy(scorer, col_tag, &datasets[col_tag])?;
            row.push(report.accuracy);
        }
        cells.push(row);
    }

    let mut row_avg = Vec::with_capacity(row_tags.len());
    let mut racc = Vec::with_capacity(row_tags.len());
    let mut in_distribution_only = Vec::with_capacity(row_tags.len());
    for (i, row_tag) in row_tags.iter().enumerate() {
        let off_diag: Vec<f64> = col_tags
            .iter()
            .enumerate()
            .filter(|(_, c)| *c != row_tag)
            .map(|(j, _)| cells[i][j])
            .collect();
        row_avg.push(if off_diag.is_empty() {
            cells[i].iter().sum::<f64>() / cells[i].len() as f64
        } else {
            off_diag.iter().sum::<f64>() / off_diag.len() as f64
        });

        let group = &groups[row_tag];
        let same_group: Vec<f64> = col_tags
            .iter()
            .enumerate()
            .filter(|(_, c)| *c != row_tag && &groups[*c] == group)
            .map(|(j, _)| cells[i][j])
            .collect();
        if same_group.is_empty() {
            // degenerate: nothing to generalize to; report the
            // in-distribution cell when present
            let diag = col_tags.iter().position(|c| c == row_tag);
            racc.push(diag.map(|j| cells[i][j]));
            in_distribution_only.push(true);
        } else {
            racc.push(Some(same_group.iter().sum::<f64>() / same_group.len() as f64));
            in_distribution_only.push(false);
        }
    }

    Ok(OODMatrix {
        row_tags,
        col_tags,
        cells,
        row_avg,
        racc,
        in_distribution_only,
        groups: groups.clone(),
    })
}

/// One best-of-N decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfNResult {
    pub prompt_id: String,
    pub rewards: Vec<f64>,
    /// Argmax index; ties resolve to the lowest index.
    pub selected: usize,
    pub tie: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_ranking: Option<Vec<usize>>,
}

pub fn best_of_n(
    scorer: &dyn RewardScorer,
    prompt_id: &str,
    prompt: &str,
    candidates: &[String],
) -> Result<BestOfNResult, EvalError> {
    if candidates.len() < 2 {
        return Err(EvalError::Contract(format!(
            "best-of-N needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    let mut rewards = Vec::with_capacity(candidates.len());
    for c in candidates {
        rewards.push(scorer.score(prompt, c)?);
    }
    let mut selected = 0usize;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[selected] {
            selected = i;
        }
    }
    let tie = rewards
        .iter()
        .enumerate()
        .any(|(i, &r)| i != selected && r == rewards[selected]);
    Ok(BestOfNResult {
        prompt_id: prompt_id.to_string(),
        rewards,
        selected,
        tie,
        judge_ranking: None,
    })
}

/// How a selection is counted against the judge ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecallMode {
    /// Hit when the argmax-reward candidate lies in the judge's top k.
    ArgmaxInTopK,
    /// Mean overlap between the reward top-k set and the judge top-k set.
    TopKOverlap,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallEntry {
    pub k: usize,
    pub n_prompts: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallReport {
    pub mode: RecallMode,
    pub entries: Vec<RecallEntry>,
}

/// Top-k recall over judged best-of-N results, reported for each `k`.
pub fn top_k_recall(
    results: &[BestOfNResult],
    ks: &[usize],
    mode: RecallMode,
) -> Result<RecallReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Contract("recall needs at least one result".into()));
    }
    for r in results {
        let ranking = r.judge_ranking.as_ref().ok_or_else(|| {
            EvalError::Contract(format!("prompt '{}' carries no judge ranking", r.prompt_id))
        })?;
        validate_permutation(&r.prompt_id, ranking, r.rewards.len())?;
    }
    let mut entries = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut total = 0.0;
        for r in results {
            let n = r.rewards.len();
            if k == 0 || k >= n {
                return Err(EvalError::Contract(format!(
                    "k must satisfy 1 <= k < {n}, got {k} (prompt '{}')",
                    r.prompt_id
                )));
            }
            let ranking = r.judge_ranking.as_ref().expect("checked above");
            match mode {
                RecallMode::ArgmaxInTopK => {
                    if ranking[..k].contains(&r.selected) {
                        total += 1.0;
                    }
                }
                RecallMode::TopKOverlap => {
                    let model_top = top_indices(&r.rewards, k);
                    let overlap = ranking[..k]
                        .iter()
                        .filter(|idx| model_top.contains(idx))
                        .count();
                    total += overlap as f64 / k as f64;
                }
            }
        }
        entries.push(RecallEntry {
            k,
            n_prompts: results.len(),
            recall: total / results.len() as f64,
        });
    }
    Ok(RecallReport { mode, entries })
}

/// Indices of the k largest rewards, ties resolved to lower indices.
fn top_indices(rewards: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| {
        rewards[b]
            .partial_cmp(&rewards[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// `log pi(x, y) - log pi_ref(x, y)`: the log of the policy/reference
/// probability ratio, the implicit reward of a DPO-trained policy.
pub fn implicit_dpo_reward(
    policy: &DualHeadModel,
    reference: &ReferenceModel,
    prompt: &str,
    response: &str,
) -> Result<f64, EvalError> {
    let pair = policy.encode_pair(prompt, response)?;
    Ok(policy.sequence_log_prob(&pair)? - reference.sequence_log_prob(&pair)?)
}

// ---- report serialization -------------------------------------------

pub fn accuracy_csv(reports: &[AccuracyReport]) -> String {
    let mut out = String::from("dataset,n_pairs,n_correct,accuracy,mean_margin\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.dataset, r.n_pairs, r.n_correct, r.accuracy, r.mean_margin
        ));
    }
    out
}

pub fn ood_matrix_csv(matrix: &OODMatrix) -> String {
    let mut out = String::from("train_tag");
    for c in &matrix.col_tags {
        out.push(',');
        out.push_str(c);
    }
    out.push_str(",avg,racc\n");
    for (i, row_tag) in matrix.row_tags.iter().enumerate() {
        out.push_str(row_tag);
        for (j, col_tag) in matrix.col_tags.iter().enumerate() {
            out.push(',');
            if col_tag == row_tag {
                // in-distribution cell, marked like the diagonal of the
                // published grids
                out.push_str(&format!("{}*", matrix.cells[i][j]));
            } else {
                out.push_str(&matrix.cells[i][j].to_string());
            }
        }
        out.push_str(&format!(",{}", matrix.row_avg[i]));
        match matrix.racc[i] {
            Some(v) if matrix.in_distribution_only[i] => {
                out.push_str(&format!(",{v} (in-distribution only)"))
            }
            Some(v) => out.push_str(&format!(",{v}")),
            None => out.push_str(",n/a"),
        }
        out.push('\n');
    }
    out
}

pub fn recall_csv(report: &RecallReport) -> String {
    let mut out = String::from("k,n_prompts,recall,mode\n");
    for e in &report.entries {
        out.push_str(&format!(
            "{},{},{},{:?}\n",
            e.k, e.n_prompts, e.recall, report.mode
        ));
    }
    out
}

pub fn bon_jsonl(results: &[BestOfNResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).expect("bon result serializes"));
        out.push('\n');
    }
    out
}

/// Row of a side-by-side comparison manifest: selections from two systems
/// on the same prompt, to be judged externally and ingested as verdicts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub prompt_id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub prompt_id: String,
    /// "a" or "b".
    pub winner: String,
}

/// One manifest row per line, ready for an external judge.
pub fn comparison_manifest_jsonl(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("manifest row serializes"));
        out.push('\n');
    }
    out
}

/// Parse externally produced verdict lines `{"prompt_id": .., "winner":
/// "a"|"b"}`.
pub fn parse_verdicts(text: &str) -> Result<Vec<Verdict>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| EvalError::Config(format!("verdict line {}: {e}", i + 1)))
        })
        .collect()
}

/// Win rate of system A from ingested verdicts over a manifest.
pub fn win_rate(manifest: &[ComparisonRow], verdicts: &[Verdict]) -> Result<f64, EvalError> {
    if manifest.is_empty() {
        return Err(EvalError::Contract("empty comparison manifest".into()));
    }
    let by_id: BTreeMap<&str, &str> = verdicts
        .iter()
        .map(|v| (v.prompt_id.as_str(), v.winner.as_str()))
        .collect();
    let mut wins = 0usize;
    for row in manifest {
        match by_id.get(row.prompt_id.as_str()) {
            Some(&"a") => wins += 1,
            Some(&"b") => {}
            Some(other) => {
                return Err(EvalError::Contract(format!(
                    "verdict for '{}' must be \"a\" or \"b\", got {other:?}",
                    row.prompt_id
                )))
            }
            None => {
                return Err(EvalError::Contract(format!(
                    "no verdict for prompt '{}'",
                    row.prompt_id
                )))
            }
        }
    }
    Ok(wins as f64 / manifest.len() as f64)
}
