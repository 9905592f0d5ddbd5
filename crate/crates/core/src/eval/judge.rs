//! Judges rank best-of-N candidate lists. External judging (a GPT grader,
//! a human) plugs in through the file judge: rankings are produced out of
//! band and ingested as JSONL. The oracle judge ranks by the synthetic
//! ground-truth rules and exists so recall numbers can be verified exactly.

use super::EvalError;
use crate::data::SynthRule;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

pub trait Judge {
    /// Permutation of candidate indices, best first.
    fn rank(
        &self,
        prompt_id: &str,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<usize>, EvalError>;
}

/// Rank candidates and verify the returned permutation is a bijection over
/// the candidate indices. All callers go through this.
pub fn judged_ranking(
    judge: &dyn Judge,
    prompt_id: &str,
    prompt: &str,
    candidates: &[String],
) -> Result<Vec<usize>, EvalError> {
    let ranking = judge.rank(prompt_id, prompt, candidates)?;
    validate_permutation(prompt_id, &ranking, candidates.len())?;
    Ok(ranking)
}

pub fn validate_permutation(
    prompt_id: &str,
    ranking: &[usize],
    n: usize,
) -> Result<(), EvalError> {
    if ranking.len() != n {
        return Err(EvalError::InvalidPermutation {
            prompt_id: prompt_id.to_string(),
            detail: format!("ranking has {} entries for {} candidates", ranking.len(), n),
        });
    }
    let mut seen = vec![false; n];
    for &idx in ranking {
        if idx >= n || seen[idx] {
            return Err(EvalError::InvalidPermutation {
                prompt_id: prompt_id.to_string(),
                detail: format!("index {idx} repeated or out of range"),
            });
        }
        seen[idx] = true;
    }
    Ok(())
}

/// Ranks by ground-truth rule score, descending; ties by candidate index.
pub struct OracleJudge {
    pub rule: SynthRule,
}

impl Judge for OracleJudge {
    fn rank(
        &self,
        _prompt_id: &str,
        _prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<usize>, EvalError> {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            self.rule
                .score(&candidates[b])
                .partial_cmp(&self.rule.score(&candidates[a]))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        Ok(order)
    }
}

#[derive(Serialize, Deserialize)]
struct JudgeLine {
    prompt_id: String,
    ranking: Vec<usize>,
}

/// Precomputed rankings read from JSONL lines `{"prompt_id": ..,
/// "ranking": [..]}`.
pub struct FileJudge {
    rankings: HashMap<String, Vec<usize>>,
}

impl FileJudge {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path_str = path.as_ref().display().to_string();
        let file = std::fs::File::open(path.as_ref()).map_err(|e| {
            EvalError::Config(format!("cannot open judge file {path_str}: {e}"))
        })?;
        let mut rankings = HashMap::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| {
                EvalError::Config(format!("cannot read judge file {path_str}: {e}"))
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: JudgeLine = serde_json::from_str(&line).map_err(|e| {
                EvalError::Config(format!("judge file {}:{}: {e}", path_str, idx + 1))
            })?;
            rankings.insert(parsed.prompt_id, parsed.ranking);
        }
        Ok(FileJudge { rankings })
    }
}

impl Judge for FileJudge {
    fn rank(
        &self,
        prompt_id: &str,
        _prompt: &str,
        _candidates: &[String],
    ) -> Result<Vec<usize>, EvalError> {
        self.rankings
            .get(prompt_id)
            .cloned()
            .ok_or_else(|| EvalError::Contract(format!("judge file has no ranking for prompt '{prompt_id}'")))
    }
}
