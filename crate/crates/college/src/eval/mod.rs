//! Evaluation harnesses: GRE-style fill-in-the-blank multiple choice
//! (top-1 and top-2), slang-to-definition matching, and definition
//! generation scored by embedding-similarity F1 plus a judged Elo
//! tournament. Every harness consumes the same provider contract, so the
//! generator and all baselines run through identical code paths.

pub mod elo;
pub mod judge;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::baselines::EmbeddingProvider;
use crate::data::split_sentences;

use crate::error::{CollegeError, Result};
use crate::lm::{AugmentedLm, Decoding};
use crate::models::LanguageModel;
use crate::tensor::cosine;
use crate::tok::{replace_surfaces, split_words};

pub use elo::{bootstrap_intervals, EloState, MatchRecord, MatchResult, DEFAULT_K, INITIAL_RATING};
pub use judge::{judge_pair, JudgeClient, JudgeOutcome, JudgeVerdict};

/// Blank marker inside GRE stems.
pub const BLANK: &str = "[BLANK]";

/// Prompt used for definition generation and slang scoring.
pub const DEFINITION_PROMPT: &str = "The word <nonce> is defined as";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GREMode {
    Top1,
    Top2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GREChoice {
    pub word: String,
    pub examples: Vec<String>,
    #[serde(default)]
    pub definition: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GREItem {
    pub stem: String,
    pub choices: Vec<GREChoice>,
    pub answers: Vec<usize>,
    pub mode: GREMode,
}

impl GREItem {
    pub fn validate(&self) -> Result<()> {
        if !self.stem.contains(BLANK) {
            return Err(CollegeError::InvalidInput(format!(
                "stem {:?} has no {BLANK}",
                self.stem
            )));
        }
        if self.choices.len() < 2 {
            return Err(CollegeError::InvalidInput(
                "an item needs at least two choices".into(),
            ));
        }
        let expected = match self.mode {
            GREMode::Top1 => 1,
            GREMode::Top2 => 2,
        };
        if self.answers.len() != expected {
            return Err(CollegeError::InvalidInput(format!(
                "{:?} item must have exactly {expected} answers",
                self.mode
            )));
        }
        if self.answers.iter().any(|&a| a >= self.choices.len()) {
            return Err(CollegeError::InvalidInput(
                "answer index outside the choice list".into(),
            ));
        }
        for c in &self.choices {
            if c.examples.is_empty() {
                return Err(CollegeError::InvalidInput(format!(
                    "choice {:?} has no example sentences",
                    c.word
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlangItem {
    pub term: String,
    pub definition: String,
    pub tweets: Vec<String>,
}

impl SlangItem {
    pub fn validate(&self) -> Result<()> {
        if self.tweets.is_empty() {
            return Err(CollegeError::InvalidInput(format!(
                "slang term {:?} has no example tweets",
                self.term
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefGenItem {
    pub word: String,
    pub examples: Vec<String>,
    pub reference: String,
}

impl DefGenItem {
    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(CollegeError::InvalidInput(format!(
                "definition item {:?} has no examples",
                self.word
            )));
        }
        Ok(())
    }
}

fn load_items<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|e| CollegeError::io(&p, e))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| CollegeError::format(&p, e.to_string()))
}

pub fn load_gre_items(path: &Path) -> Result<Vec<GREItem>> {
    let items: Vec<GREItem> = load_items(path)?;
    for (i, item) in items.iter().enumerate() {
        item.validate().map_err(|e| {
            CollegeError::format(path.display().to_string(), format!("item {i}: {e}"))
        })?;
    }
    Ok(items)
}

pub fn load_slang_items(path: &Path) -> Result<Vec<SlangItem>> {
    let items: Vec<SlangItem> = load_items(path)?;
    for (i, item) in items.iter().enumerate() {
        item.validate().map_err(|e| {
            CollegeError::format(path.display().to_string(), format!("item {i}: {e}"))
        })?;
    }
    Ok(items)
}

pub fn load_defgen_items(path: &Path) -> Result<Vec<DefGenItem>> {
    let items: Vec<DefGenItem> = load_items(path)?;
    for (i, item) in items.iter().enumerate() {
        item.validate().map_err(|e| {
            CollegeError::format(path.display().to_string(), format!("item {i}: {e}"))
        })?;
    }
    Ok(items)
}

/// `k` distinct indices from 0..n, keeping draw order; all of them when
/// `k >= n`.
fn sample_indices(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order.truncate(k.min(n));
    order
}

/// Supports for one choice: `k_shot` sampled examples plus, when asked, the
/// definition rendered as an extra support sentence that contains the word.
fn choice_supports(
    choice: &GREChoice,
    k_shot: usize,
    with_definition: bool,
    rng: &mut impl Rng,
) -> (Vec<String>, bool) {
    let picked = sample_indices(choice.examples.len(), k_shot, rng);
    let shortfall = choice.examples.len() < k_shot;
    let mut supports: Vec<String> = picked
        .into_iter()
        .map(|i| choice.examples[i].clone())
        .collect();
    if with_definition {
        if let Some(def) = &choice.definition {
            supports.push(format!("The word {} means {def}", choice.word));
        }
    }
    (supports, shortfall)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McSelection {
    /// Chosen indices, ascending (one for top-1, two for top-2).
    pub chosen: Vec<usize>,
    pub scores: Vec<f64>,
    /// Choices that had fewer examples than requested.
    pub shortfall: Vec<usize>,
}

/// Scores every choice by splicing its fresh token into the blank
/// (optionally with supports and definition in context) and selects the
/// best sequence log-probabilities.
pub fn score_multiple_choice(
    lm: &dyn LanguageModel,
    provider: &dyn EmbeddingProvider,
    item: &GREItem,
    k_shot: usize,
    with_definition: bool,
    with_context_prompt: bool,
    rng: &mut impl Rng,
) -> Result<McSelection> {
    item.validate()?;
    let mut scores = Vec::with_capacity(item.choices.len());
    let mut shortfall = Vec::new();
    for (ci, choice) in item.choices.iter().enumerate() {
        let (supports, short) = choice_supports(choice, k_shot, with_definition, rng);
        if short {
            shortfall.push(ci);
        }
        let output = provider.generate(&choice.word, &supports, rng)?;
        let aug = AugmentedLm::augment(lm, &output.embedding)?;
        let mut parts: Vec<String> = Vec::new();
        if with_context_prompt || output.supports_in_context {
            for s in &supports {
                parts.push(replace_surfaces(s, &[&choice.word], &aug.placeholder));
            }
        }
        parts.push(item.stem.replace(BLANK, &aug.placeholder));
        let text = parts.join(" ");
        let ids = aug.splice(&text);
        scores.push(aug.sequence_logprob(&ids)?);
    }
    let take = match item.mode {
        GREMode::Top1 => 1,
        GREMode::Top2 => 2,
    };
    let mut chosen = top_indices(&scores, take);
    chosen.sort_unstable();
    Ok(McSelection {
        chosen,
        scores,
        shortfall,
    })
}

/// Indices of the `take` highest scores; ties resolve to the lower index.
pub fn top_indices(scores: &[f64], take: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(take);
    order
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GREOutcome {
    pub mean_accuracy: f64,
    pub sd: f64,
    pub per_trial: Vec<f64>,
    /// Fraction of trials each item was answered correctly.
    pub per_item: Vec<f64>,
}

/// Accuracy over `trials` resamplings of the per-choice example sentences.
/// A top-2 item counts only when both selections match the key.
#[allow(clippy::too_many_arguments)]
pub fn eval_gre_dataset(
    lm: &dyn LanguageModel,
    provider: &dyn EmbeddingProvider,
    items: &[GREItem],
    trials: usize,
    k_shot: usize,
    with_definition: bool,
    with_context_prompt: bool,
    rng: &mut impl Rng,
) -> Result<GREOutcome> {
    if items.is_empty() || trials == 0 {
        return Err(CollegeError::InvalidInput(
            "need at least one item and one trial".into(),
        ));
    }
    let mut per_trial = Vec::with_capacity(trials);
    let mut item_hits = vec![0usize; items.len()];
    for _ in 0..trials {
        let mut correct = 0usize;
        for (i, item) in items.iter().enumerate() {
            let sel = score_multiple_choice(
                lm,
                provider,
                item,
                k_shot,
                with_definition,
                with_context_prompt,
                rng,
            )?;
            let mut key = item.answers.clone();
            key.sort_unstable();
            if sel.chosen == key {
                correct += 1;
                item_hits[i] += 1;
            }
        }
        per_trial.push(correct as f64 / items.len() as f64);
    }
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    let sd = if trials > 1 {
        (per_trial.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (trials - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(GREOutcome {
        mean_accuracy: mean,
        sd,
        per_trial,
        per_item: item_hits
            .into_iter()
            .map(|h| h as f64 / trials as f64)
            .collect(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlangItemResult {
    pub term: String,
    pub correct: bool,
    /// Log probability of the true definition under each candidate's
    /// conditioning, true term first.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlangOutcome {
    pub accuracy: f64,
    pub per_item: Vec<SlangItemResult>,
}

/// For every term: condition the model on the candidate's example tweets
/// (as a generated embedding, plus raw tweets in context when prompting)
/// and score the true definition; the candidate with the highest
/// log-probability wins.
#[allow(clippy::too_many_arguments)]
pub fn eval_slang(
    lm: &dyn LanguageModel,
    provider: &dyn EmbeddingProvider,
    items: &[SlangItem],
    n_distractors: usize,
    k_shot: usize,
    with_context_prompt: bool,
    rng: &mut impl Rng,
) -> Result<SlangOutcome> {
    if items.len() <= n_distractors {
        return Err(CollegeError::Dataset(format!(
            "{} items cannot supply {n_distractors} distractors",
            items.len()
        )));
    }
    let mut per_item = Vec::with_capacity(items.len());
    let mut correct_count = 0usize;
    for (i, item) in items.iter().enumerate() {
        item.validate()?;
        // distractor terms sampled without replacement, never the truth
        let others: Vec<usize> = (0..items.len()).filter(|&j| j != i).collect();
        let picked = sample_indices(others.len(), n_distractors, rng);
        let mut candidates: Vec<usize> = vec![i];
        candidates.extend(picked.into_iter().map(|p| others[p]));
        // randomized scoring order so ties cannot favor the truth
        let order = sample_indices(candidates.len(), candidates.len(), rng);
        let mut scores = vec![0.0; candidates.len()];
        for &slot in &order {
            let cand = &items[candidates[slot]];
            let supports: Vec<String> = sample_indices(cand.tweets.len(), k_shot, rng)
                .into_iter()
                .map(|t| cand.tweets[t].clone())
                .collect();
            let output = provider.generate(&cand.term, &supports, rng)?;
            let aug = AugmentedLm::augment(lm, &output.embedding)?;
            let mut parts: Vec<String> = Vec::new();
            if with_context_prompt || output.supports_in_context {
                for s in &supports {
                    parts.push(replace_surfaces(s, &[&cand.term], &aug.placeholder));
                }
            }
            parts.push(DEFINITION_PROMPT.to_string());
            let prefix = parts.join(" ");
            let prefix_len = aug.splice(&prefix).len();
            let full = aug.splice(&format!("{prefix} {}", item.definition));
            scores[slot] = aug.conditional_logprob(&full, prefix_len)?;
        }
        let winner = top_indices(&scores, 1)[0];
        let correct = candidates[winner] == i;
        if correct {
            correct_count += 1;
        }
        per_item.push(SlangItemResult {
            term: item.term.clone(),
            correct,
            scores,
        });
    }
    Ok(SlangOutcome {
        accuracy: correct_count as f64 / items.len() as f64,
        per_item,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratedDefinition {
    pub text: String,
    /// Generation came back empty; scored as a zero/loss downstream.
    pub empty: bool,
}

/// Prompts the augmented model with the fixed template and keeps the first
/// generated sentence.
pub fn generate_definition(
    lm: &dyn LanguageModel,
    provider: &dyn EmbeddingProvider,
    item: &DefGenItem,
    k_shot: usize,
    decoding: Decoding,
    max_new: usize,
    rng: &mut impl Rng,
) -> Result<GeneratedDefinition> {
    item.validate()?;
    let supports: Vec<String> = sample_indices(item.examples.len(), k_shot, rng)
        .into_iter()
        .map(|i| item.examples[i].clone())
        .collect();
    definition_from_supports(lm, provider, &item.word, &supports, decoding, max_new, rng)
}

/// Same as [`generate_definition`] but over a fixed support set, so several
/// providers can be compared on identical evidence.
pub fn definition_from_supports(
    lm: &dyn LanguageModel,
    provider: &dyn EmbeddingProvider,
    word: &str,
    supports: &[String],
    decoding: Decoding,
    max_new: usize,
    rng: &mut impl Rng,
) -> Result<GeneratedDefinition> {
    let output = provider.generate(word, supports, rng)?;
    let aug = AugmentedLm::augment(lm, &output.embedding)?;
    let mut parts: Vec<String> = Vec::new();
    if output.supports_in_context {
        for s in supports {
            parts.push(replace_surfaces(s, &[word], &aug.placeholder));
        }
    }
    parts.push(DEFINITION_PROMPT.to_string());
    let prompt = aug.splice(&parts.join(" "));
    let generated = aug.generate_text(&prompt, decoding, max_new)?;
    let first = split_sentences(&generated).into_iter().next().unwrap_or_default();
    Ok(GeneratedDefinition {
        empty: first.trim().is_empty(),
        text: first,
    })
}

/// Per-token embeddings for similarity scoring.
pub trait TokenEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>>;
}

/// Contextual embeddings from the frozen toy extractor.
pub struct MlmTokenEmbedder<'a> {
    pub mlm: &'a crate::models::ToyMaskedLm,
}

impl TokenEmbedder for MlmTokenEmbedder<'_> {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        if tokens.is_empty() {
            return vec![];
        }
        let mut ids: Vec<u32> = tokens
            .iter()
            .map(|t| self.mlm.tokenizer.id(t).unwrap_or(self.mlm.tokenizer.unk_id()))
            .collect();
        ids.truncate(self.mlm.cfg.max_seq);
        match self.mlm.encode(&ids) {
            Ok(states) => (0..states.rows()).map(|r| states.row(r).to_vec()).collect(),
            Err(_) => vec![],
        }
    }
}

/// One-hot embedder over a fixed vocabulary; unknown tokens embed to zero.
/// Deterministic, for tests.
#[derive(Clone, Debug, Default)]
pub struct VocabOneHotEmbedder {
    index: BTreeMap<String, usize>,
}

impl VocabOneHotEmbedder {
    pub fn from_texts(texts: &[&str]) -> Self {
        let mut index = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                let next = index.len();
                index.entry(w).or_insert(next);
            }
        }
        VocabOneHotEmbedder { index }
    }
}

impl TokenEmbedder for VocabOneHotEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        let dim = self.index.len().max(1);
        tokens
            .iter()
            .map(|t| {
                let mut v = vec![0.0; dim];
                if let Some(&i) = self.index.get(t) {
                    v[i] = 1.0;
                }
                v
            })
            .collect()
    }
}

/// Greedy-matching embedding F1: precision matches every candidate token to
/// its most similar reference token, recall the reverse, and the harmonic
/// mean combines them. An empty candidate scores 0.
pub fn score_similarity_f1(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> f64 {
    let cand_tokens = split_words(candidate);
    let ref_tokens = split_words(reference);
    if cand_tokens.is_empty() || ref_tokens.is_empty() {
        return 0.0;
    }
    let cand = embedder.embed(&cand_tokens);
    let refs = embedder.embed(&ref_tokens);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| -> f64 {
        from.iter()
            .map(|f| {
                to.iter()
                    .map(|t| cosine(f, t))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(&cand, &refs);
    let r = best(&refs, &cand);
    if p + r <= 0.0 {
        0.0
    } else {
        (2.0 * p * r / (p + r)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EloRow {
    pub name: String,
    pub rating: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TournamentReport {
    /// Rating table, best first.
    pub table: Vec<EloRow>,
    pub matches: usize,
    pub abstains: usize,
    /// One entry per judged item: word, challenger, judge verdict (with
    /// the presentation permutation used).
    pub match_log: Vec<MatchLogEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchLogEntry {
    pub word: String,
    pub challenger: String,
    pub k_shot: usize,
    pub verdict: JudgeVerdict,
}

/// Head-to-head definition tournament: for each item a k-shot setting and a
/// random challenger are drawn, the champion (first provider) and the
/// challenger are judged, and Elo is updated; every provider's definition is
/// also scored against the reference for the mean-F1 column.
#[allow(clippy::too_many_arguments)]
pub fn run_def_tournament(
    lm: &dyn LanguageModel,
    providers: &[&dyn EmbeddingProvider],
    items: &[DefGenItem],
    k_settings: &[usize],
    judge: &dyn JudgeClient,
    judge_retries: u32,
    embedder: &dyn TokenEmbedder,
    max_new: usize,
    rng: &mut impl Rng,
) -> Result<TournamentReport> {
    if providers.len() < 2 {
        return Err(CollegeError::InvalidInput(
            "a tournament needs at least two providers".into(),
        ));
    }
    if k_settings.is_empty() || items.is_empty() {
        return Err(CollegeError::InvalidInput(
            "need items and at least one k-shot setting".into(),
        ));
    }
    let names: Vec<String> = providers.iter().map(|p| p.name()).collect();
    {
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != names.len() {
            return Err(CollegeError::InvalidInput(
                "provider names must be unique".into(),
            ));
        }
    }
    let mut state = EloState::new(DEFAULT_K);
    for n in &names {
        state.register(n);
    }
    let mut f1_sum: BTreeMap<String, f64> = names.iter().map(|n| (n.clone(), 0.0)).collect();
    let mut f1_count: BTreeMap<String, usize> = names.iter().map(|n| (n.clone(), 0)).collect();
    let mut abstains = 0usize;
    let mut matches = 0usize;
    let mut match_log = Vec::with_capacity(items.len());

    for item in items {
        item.validate()?;
        let k = k_settings[rng.random_range(0..k_settings.len())];
        let challenger = 1 + rng.random_range(0..providers.len() - 1);
        let supports: Vec<String> = sample_indices(item.examples.len(), k, rng)
            .into_iter()
            .map(|i| item.examples[i].clone())
            .collect();
        let mut defs: Vec<GeneratedDefinition> = Vec::with_capacity(providers.len());
        for p in providers {
            let d = definition_from_supports(
                lm,
                *p,
                &item.word,
                &supports,
                Decoding::Greedy,
                max_new,
                rng,
            )?;
            let f1 = if d.empty {
                0.0
            } else {
                score_similarity_f1(&d.text, &item.reference, embedder)
            };
            *f1_sum.get_mut(&names[defs.len()]).unwrap() += f1;
            *f1_count.get_mut(&names[defs.len()]).unwrap() += 1;
            defs.push(d);
        }
        let verdict = judge_pair(
            judge,
            &item.word,
            &defs[0].text,
            &defs[challenger].text,
            rng,
            judge_retries,
        )?;
        match verdict.outcome {
            JudgeOutcome::A => {
                state.elo_update(&names[0], &names[challenger], MatchResult::AWins)?;
                matches += 1;
            }
            JudgeOutcome::B => {
                state.elo_update(&names[0], &names[challenger], MatchResult::BWins)?;
                matches += 1;
            }
            JudgeOutcome::Tie => {
                state.elo_update(&names[0], &names[challenger], MatchResult::Tie)?;
                matches += 1;
            }
            JudgeOutcome::Abstain => abstains += 1,
        }
        match_log.push(MatchLogEntry {
            word: item.word.clone(),
            challenger: names[challenger].clone(),
            k_shot: k,
            verdict,
        });
    }

    let intervals = bootstrap_intervals(&state, 200, rng)?;
    let mut table: Vec<EloRow> = names
        .iter()
        .map(|n| {
            let (lo, hi) = intervals[n];
            EloRow {
                name: n.clone(),
                rating: state.rating(n).unwrap(),
                ci_low: lo,
                ci_high: hi,
                mean_f1: f1_sum[n] / f1_count[n].max(1) as f64,
            }
        })
        .collect();
    table.sort_by(|a, b| {
        b.rating
            .partial_cmp(&a.rating)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.name.cmp(&b.name))
    });
    Ok(TournamentReport {
        table,
        matches,
        abstains,
        match_log,
    })
}
