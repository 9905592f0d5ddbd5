//! Synthetic preference corpora with known ground truth. Each rule is a
//! pure text scorer; the generator builds (prompt, chosen, rejected)
//! triples where the chosen response scores strictly higher, and emits the
//! true scores alongside so evaluation can be checked against an oracle.

use super::{DataError, PreferenceRecord};
use crate::rng::{derive_seed, Rng};

const MARKER: &str = "zap";
const HARMFUL: &str = "danger";
const LENGTH_TARGET: usize = 8;

const TOPICS: &[&str] = &[
    "cats", "tea", "rain", "maps", "code", "music", "bread", "stars", "boats", "silk", "moss",
    "wind", "glass", "paint", "rope",
];
const TEMPLATES: &[&str] = &[
    "tell me about {}",
    "what about {}",
    "how is {} made",
    "describe {} for me",
    "any view on {}",
    "why study {}",
];
// Filler pool; none of these contain the marker or harmful substrings.
const FILLER: &[&str] = &[
    "it", "is", "so", "very", "much", "quite", "well", "made", "good", "form", "and", "the",
    "then", "now", "fine", "calm", "soft", "plain", "bit", "old",
];

/// Built-in ground-truth preference rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthRule {
    /// Score = number of marker tokens: more is better.
    MarkerCount,
    /// Score = negative distance of the word count from a target band
    /// center: closer is better.
    LengthBand,
    /// Score = negative count of a harmful marker token: clean is better.
    KeywordSafety,
}

impl SynthRule {
    pub fn parse(id: &str) -> Result<Self, DataError> {
        match id {
            "marker-count" => Ok(SynthRule::MarkerCount),
            "length-band" => Ok(SynthRule::LengthBand),
            "keyword-safety" => Ok(SynthRule::KeywordSafety),
            other => Err(DataError::UnknownRule(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            SynthRule::MarkerCount => "marker-count",
            SynthRule::LengthBand => "length-band",
            SynthRule::KeywordSafety => "keyword-safety",
        }
    }

    pub fn all() -> [SynthRule; 3] {
        [
            SynthRule::MarkerCount,
            SynthRule::LengthBand,
            SynthRule::KeywordSafety,
        ]
    }

    /// Ground-truth score of a response under this rule.
    pub fn score(&self, response: &str) -> f64 {
        let words: Vec<&str> = response.split_whitespace().collect();
        match self {
            SynthRule::MarkerCount => words.iter().filter(|w| **w == MARKER).count() as f64,
            SynthRule::LengthBand => {
                -((words.len() as f64 - LENGTH_TARGET as f64).abs())
            }
            SynthRule::KeywordSafety => {
                -(words.iter().filter(|w| **w == HARMFUL).count() as f64)
            }
        }
    }
}

/// A generated record plus the hidden true scores of both responses.
#[derive(Clone, Debug)]
pub struct SynthRecord {
    pub record: PreferenceRecord,
    pub chosen_score: f64,
    pub rejected_score: f64,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub rule: SynthRule,
    pub records: Vec<SynthRecord>,
}

impl SynthCorpus {
    pub fn preference_records(&self) -> Vec<PreferenceRecord> {
        self.records.iter().map(|r| r.record.clone()).collect()
    }
}

/// Generate `n` strictly-ordered preference pairs under the named rule.
pub fn synth_generate(rule_id: &str, n: usize, seed: u64) -> Result<SynthCorpus, DataError> {
    let rule = SynthRule::parse(rule_id)?;
    if n == 0 {
        return Err(DataError::Config("synthetic corpus size must be at least 1".into()));
    }
    let mut rng = Rng::new(derive_seed(seed, 0x73796e74)); // "synt"
    let records = (0..n)
        .map(|i| {
            let prompt = gen_prompt(&mut rng);
            let (chosen, rejected) = gen_response_pair(rule, &mut rng);
            let chosen_score = rule.score(&chosen);
            let rejected_score = rule.score(&rejected);
            debug_assert!(chosen_score > rejected_score);
            SynthRecord {
                record: PreferenceRecord {
                    id: format!("{}-{i:05}", rule.id()),
                    prompt,
                    chosen,
                    rejected,
                    source: rule.id().to_string(),
                },
                chosen_score,
                rejected_score,
            }
        })
        .collect();
    Ok(SynthCorpus { rule, records })
}

fn gen_prompt(rng: &mut Rng) -> String {
    let template = TEMPLATES[rng.below(TEMPLATES.len())];
    let topic = TOPICS[rng.below(TOPICS.len())];
    template.replace("{}", topic)
}

fn filler_words(rng: &mut Rng, count: usize) -> Vec<&'static str> {
    (0..count).map(|_| FILLER[rng.below(FILLER.len())]).collect()
}

/// Build a response of `total` words containing exactly `special_count`
/// copies of `special` at random positions.
fn response_with(special: &'static str, special_count: usize, total: usize, rng: &mut Rng) -> String {
    debug_assert!(special_count <= total);
    let mut words = filler_words(rng, total - special_count);
    for _ in 0..special_count {
        let pos = rng.below(words.len() + 1);
        words.insert(pos, special);
    }
    words.join(" ")
}

fn gen_response_pair(rule: SynthRule, rng: &mut Rng) -> (String, String) {
    match rule {
        SynthRule::MarkerCount => {
            // distinct marker counts in 0..=4, higher count wins
            let a = rng.below(5);
            let b = loop {
                let b = rng.below(5);
                if b != a {
                    break b;
                }
            };
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            let len_hi = 5 + rng.below(4) + hi;
            let len_lo = 5 + rng.below(4) + lo;
            (
                response_with(MARKER, hi, len_hi, rng),
                response_with(MARKER, lo, len_lo, rng),
            )
        }
        SynthRule::LengthBand => {
            // distinct distances from the target length, closer wins
            let dist_near = rng.below(2); // 0 or 1 words off target
            let dist_far = 3 + rng.below(3); // 3 to 5 words off target
            let signed = |d: usize, rng: &mut Rng| -> usize {
                if d == 0 || rng.below(2) == 0 {
                    LENGTH_TARGET + d
                } else {
                    LENGTH_TARGET - d
                }
            };
            let near_len = signed(dist_near, rng);
            let far_len = signed(dist_far, rng);
            (
                filler_words(rng, near_len).join(" "),
                filler_words(rng, far_len).join(" "),
            )
        }
        SynthRule::KeywordSafety => {
            let clean_len = 5 + rng.below(5);
            let dirty_len = 5 + rng.below(5);
            let dirty_count = 1 + rng.below(2);
            (
                filler_words(rng, clean_len).join(" "),
                response_with(HARMFUL, dirty_count, dirty_len + dirty_count, rng),
            )
        }
    }
}
