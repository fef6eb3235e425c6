//! Corpus-to-episode pipeline: clean and filter raw documents, chunk them
//! into 4-sentence queries, pick a concept word per query, mine and rank
//! support sentences, and emit line-delimited episode records plus a
//! manifest.
//!
//! Language identification, perplexity and contextual similarity are
//! injected behind small traits so tests run on deterministic stubs and
//! production adapters stay thin.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{CollegeError, Result};
use crate::models::ToyMaskedLm;
use crate::tensor::cosine;
use crate::tok::{contains_surface, find_surface_hits, replace_surfaces, split_words};

/// Queries are built from consecutive chunks of exactly this many sentences.
pub const QUERY_CHUNK_SENTENCES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Minimum English-likelihood score.
    pub lang_threshold: f64,
    /// Maximum document perplexity.
    pub ppl_threshold: f64,
    /// Support candidates with fewer words are dropped.
    pub min_support_words: usize,
    /// Support candidates with more newlines per word are dropped (titles,
    /// tables of contents, lists).
    pub max_newlines_per_word: f64,
    /// Longest tolerated run of one repeated character.
    pub max_char_run: usize,
    pub obscene_words: Vec<String>,
    pub excluded_source_tags: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            lang_threshold: 0.90,
            ppl_threshold: 1000.0,
            min_support_words: 15,
            max_newlines_per_word: 0.15,
            max_char_run: 10,
            obscene_words: vec![],
            excluded_source_tags: vec![
                "freelaw".into(),
                "uspto".into(),
                "pubmed".into(),
                "nih".into(),
            ],
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lang_threshold <= 0.0
            || self.ppl_threshold <= 0.0
            || self.min_support_words == 0
            || self.max_newlines_per_word <= 0.0
            || self.max_char_run == 0
        {
            return Err(CollegeError::InvalidInput(
                "filter thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source_tag: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    SourceTag,
    Language,
    Perplexity,
    Repetition,
    Obscenity,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::SourceTag => "source_tag",
            RejectReason::Language => "language",
            RejectReason::Perplexity => "perplexity",
            RejectReason::Repetition => "repetition",
            RejectReason::Obscenity => "obscenity",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub enum FilterOutcome {
    /// Document passed every gate; text is whitespace/punctuation
    /// normalized.
    Accepted(Document),
    Rejected { id: String, reason: RejectReason },
}

pub trait LangScorer {
    /// English likelihood in [0, 1].
    fn score(&self, text: &str) -> Result<f64>;
}

pub trait PplScorer {
    fn perplexity(&self, text: &str) -> Result<f64>;
}

pub trait ContextualScorer {
    /// Contextual vector of the concept occurrence inside `text`.
    fn concept_vector(&self, text: &str, concept: &str) -> Result<Vec<f64>>;
}

/// Gates in order: source tag, language, perplexity, character repetition,
/// obscenity. The first failing gate names the rejection reason.
pub fn clean_and_filter(
    doc: &Document,
    cfg: &FilterConfig,
    lang: &dyn LangScorer,
    ppl: &dyn PplScorer,
) -> Result<FilterOutcome> {
    cfg.validate()?;
    let reject = |reason| {
        Ok(FilterOutcome::Rejected {
            id: doc.id.clone(),
            reason,
        })
    };
    if let Some(tag) = &doc.source_tag {
        let tag = tag.to_lowercase();
        if cfg
            .excluded_source_tags
            .iter()
            .any(|t| tag.contains(&t.to_lowercase()))
        {
            return reject(RejectReason::SourceTag);
        }
    }
    let lang_score = lang.score(&doc.text).map_err(|e| CollegeError::Pipeline {
        doc_id: doc.id.clone(),
        message: format!("language scorer failed: {e}"),
    })?;
    if lang_score < cfg.lang_threshold {
        return reject(RejectReason::Language);
    }
    let ppl_value = ppl
        .perplexity(&doc.text)
        .map_err(|e| CollegeError::Pipeline {
            doc_id: doc.id.clone(),
            message: format!("perplexity scorer failed: {e}"),
        })?;
    if ppl_value > cfg.ppl_threshold {
        return reject(RejectReason::Perplexity);
    }
    if longest_char_run(&doc.text) > cfg.max_char_run {
        return reject(RejectReason::Repetition);
    }
    if !cfg.obscene_words.is_empty() {
        let words: HashSet<String> = split_words(&doc.text).into_iter().collect();
        if cfg
            .obscene_words
            .iter()
            .any(|w| words.contains(&w.to_lowercase()))
        {
            return reject(RejectReason::Obscenity);
        }
    }
    Ok(FilterOutcome::Accepted(Document {
        id: doc.id.clone(),
        text: normalize_text(&doc.text),
        source_tag: doc.source_tag.clone(),
    }))
}

fn longest_char_run(text: &str) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for ch in text.chars() {
        if ch.is_whitespace() {
            prev = None;
            run = 0;
            continue;
        }
        if Some(ch) == prev {
            run += 1;
        } else {
            run = 1;
            prev = Some(ch);
        }
        best = best.max(run);
    }
    best
}

/// Collapses space/tab runs (newlines are preserved for the downstream
/// newline-density rule) and maps typographic punctuation to ASCII.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        let ch = match ch {
            '\u{2018}' | '\u{2019}' => '\'',
            '\u{201c}' | '\u{201d}' => '"',
            '\u{2013}' | '\u{2014}' => '-',
            c => c,
        };
        if ch == ' ' || ch == '\t' {
            pending_space = true;
            continue;
        }
        if ch == '\n' {
            pending_space = false;
            out.push('\n');
            continue;
        }
        if pending_space && !out.is_empty() && !out.ends_with('\n') {
            out.push(' ');
        }
        pending_space = false;
        if ch == '\u{2026}' {
            out.push_str("...");
        } else {
            out.push(ch);
        }
    }
    out.trim().to_string()
}

const ABBREVIATIONS: [&str; 12] = [
    "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "etc.", "e.g.", "i.e.", "vs.",
];

/// Rule-based sentence splitter: breaks after `.`, `!` or `?` unless the
/// token is a known abbreviation or a dotted initial. Deterministic.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        cur.push(ch);
        if ch == '.' || ch == '!' || ch == '?' {
            let next_is_boundary = chars.get(i + 1).map(|c| c.is_whitespace()).unwrap_or(true);
            if !next_is_boundary {
                continue;
            }
            let last_word = cur
                .rsplit(|c: char| c.is_whitespace())
                .next()
                .unwrap_or("")
                .to_lowercase();
            if ABBREVIATIONS.contains(&last_word.as_str()) {
                continue;
            }
            // dotted single initials like "J."
            if last_word.len() == 2
                && last_word.ends_with('.')
                && last_word.starts_with(|c: char| c.is_alphabetic())
            {
                continue;
            }
            let s = cur.trim().to_string();
            if !s.is_empty() {
                sentences.push(s);
            }
            cur.clear();
        }
    }
    let tail = cur.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

/// Consecutive groups of exactly [`QUERY_CHUNK_SENTENCES`] sentences; a
/// short trailing remainder is dropped.
pub fn chunk_into_queries(text: &str, splitter: impl Fn(&str) -> Vec<String>) -> Vec<String> {
    let sentences = splitter(text);
    sentences
        .chunks(QUERY_CHUNK_SENTENCES)
        .filter(|c| c.len() == QUERY_CHUNK_SENTENCES)
        .map(|c| c.join(" "))
        .collect()
}

/// Candidate concept words. The corpus builder keeps content words that are
/// not stopwords and appear often enough to yield supports.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    words: BTreeSet<String>,
}

const STOPWORDS: [&str; 36] = [
    "the", "a", "an", "and", "or", "but", "of", "to", "in", "on", "at", "by", "for", "with",
    "is", "are", "was", "were", "be", "been", "it", "its", "this", "that", "these", "those",
    "he", "she", "they", "we", "you", "i", "as", "from", "not", "so",
];

impl Lexicon {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        Lexicon {
            words: words.into_iter().map(|w| w.to_lowercase()).collect(),
        }
    }

    /// Content words with at least `min_count` corpus occurrences.
    pub fn from_corpus<S: AsRef<str>>(texts: &[S], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        Lexicon {
            words: counts
                .into_iter()
                .filter(|(w, c)| {
                    *c >= min_count
                        && w.len() >= 3
                        && w.chars().all(|ch| ch.is_alphabetic() || ch == '-' || ch == '\'')
                        && !STOPWORDS.contains(&w.as_str())
                })
                .map(|(w, _)| w)
                .collect(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Word-keyed index over corpus sentences, supporting stem lookups.
#[derive(Clone, Debug, Default)]
pub struct SentenceIndex {
    sentences: Vec<String>,
    by_word: BTreeMap<String, Vec<usize>>,
}

impl SentenceIndex {
    pub fn build<S: AsRef<str>>(sentences: &[S]) -> Self {
        let mut idx = SentenceIndex::default();
        for s in sentences {
            idx.insert(s.as_ref());
        }
        idx
    }

    pub fn insert(&mut self, sentence: &str) {
        let id = self.sentences.len();
        self.sentences.push(sentence.to_string());
        for w in split_words(sentence) {
            match self.by_word.entry(w) {
                Entry::Occupied(mut e) => {
                    if *e.get().last().unwrap() != id {
                        e.get_mut().push(id);
                    }
                }
                Entry::Vacant(e) => {
                    e.insert(vec![id]);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Sentences containing the concept stem, in insertion order.
    pub fn sentences_with(&self, stem: &str) -> Vec<&String> {
        let stem = stem.to_lowercase();
        let mut ids = BTreeSet::new();
        for (word, sids) in self.by_word.range(stem.clone()..) {
            if !word.starts_with(&stem) {
                break;
            }
            if word == &stem || word.len() > stem.len() {
                ids.extend(sids.iter().copied());
            }
        }
        ids.into_iter().map(|i| &self.sentences[i]).collect()
    }

    /// True when the word occurs in some sentence that is not part of the
    /// query text.
    pub fn has_support_outside(&self, word: &str, query_text: &str) -> bool {
        self.sentences_with(word)
            .iter()
            .any(|s| !query_text.contains(s.as_str()))
    }
}

/// Picks the concept word for a query: a lexicon word occurring in the query
/// with at least one support sentence elsewhere in the corpus. Uniform over
/// the sorted candidates, so a fixed seed gives a fixed choice. `None` means
/// the record is skipped.
pub fn choose_concept(
    query_text: &str,
    lexicon: &Lexicon,
    index: &SentenceIndex,
    rng: &mut impl Rng,
) -> Option<String> {
    let mut candidates: Vec<String> = split_words(query_text)
        .into_iter()
        .filter(|w| lexicon.contains(w))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    candidates.retain(|w| index.has_support_outside(w, query_text));
    if candidates.is_empty() {
        return None;
    }
    let i = rng.random_range(0..candidates.len());
    Some(candidates[i].clone())
}

/// Support candidates for a concept: contain the concept, are not part of
/// the query, are long enough, and are not newline-heavy.
pub fn gather_supports(
    concept: &str,
    index: &SentenceIndex,
    query_text: &str,
    cfg: &FilterConfig,
) -> Vec<String> {
    index
        .sentences_with(concept)
        .into_iter()
        .filter(|s| !query_text.contains(s.as_str()))
        .filter(|s| word_count(s) >= cfg.min_support_words)
        .filter(|s| newline_density(s) <= cfg.max_newlines_per_word)
        .cloned()
        .collect()
}

pub fn word_count(text: &str) -> usize {
    split_words(text)
        .iter()
        .filter(|w| w.chars().any(|c| c.is_alphanumeric()))
        .count()
}

fn newline_density(text: &str) -> f64 {
    let words = word_count(text).max(1);
    let newlines = text.chars().filter(|&c| c == '\n').count();
    newlines as f64 / words as f64
}

/// Orders candidates by cosine similarity between the concept's contextual
/// vector in the query and in each candidate, descending; ties keep input
/// order.
pub fn rank_supports(
    query_text: &str,
    concept: &str,
    candidates: &[String],
    scorer: &dyn ContextualScorer,
) -> Result<Vec<String>> {
    let query_vec = scorer.concept_vector(query_text, concept)?;
    let mut scored: Vec<(usize, f64, &String)> = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let v = scorer.concept_vector(c, concept)?;
        scored.push((i, cosine(&query_vec, &v), c));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(scored.into_iter().map(|(_, _, c)| c.clone()).collect())
}

/// One line of the episode dataset shared with the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub concept_surface: String,
    /// Query with every concept occurrence replaced by the placeholder.
    pub query_text: String,
    pub original_text: String,
    /// Ranked support candidates, best first.
    pub support_sentences: Vec<String>,
    pub source_tag: String,
}

impl EpisodeRecord {
    pub fn validate(&self, placeholder: &str) -> Result<()> {
        if self.support_sentences.is_empty() {
            return Err(CollegeError::InvalidInput(format!(
                "record for {:?} has no supports",
                self.concept_surface
            )));
        }
        if !self.query_text.contains(placeholder) {
            return Err(CollegeError::InvalidInput(format!(
                "query for {:?} lost its placeholder",
                self.concept_surface
            )));
        }
        if !contains_surface(&self.original_text, &self.concept_surface) {
            return Err(CollegeError::InvalidInput(format!(
                "original text lacks the concept {:?}",
                self.concept_surface
            )));
        }
        for s in &self.support_sentences {
            if self.query_text.contains(s.as_str()) || self.original_text.contains(s.as_str()) {
                return Err(CollegeError::InvalidInput(format!(
                    "support sentence overlaps the query for {:?}",
                    self.concept_surface
                )));
            }
        }
        if split_sentences(&self.original_text).len() != QUERY_CHUNK_SENTENCES {
            return Err(CollegeError::InvalidInput(format!(
                "query for {:?} is not a {QUERY_CHUNK_SENTENCES}-sentence chunk",
                self.concept_surface
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub total: usize,
    pub per_source: BTreeMap<String, usize>,
}

pub fn manifest_path(records_path: &Path) -> std::path::PathBuf {
    let mut os = records_path.as_os_str().to_owned();
    os.push(".manifest.json");
    std::path::PathBuf::from(os)
}

/// Writes records as JSON lines plus a sibling manifest with per-source
/// counts.
pub fn emit_episodes(records: &[EpisodeRecord], path: &Path) -> Result<Manifest> {
    let p = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| CollegeError::io(&p, e))?);
    let mut manifest = Manifest::default();
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| CollegeError::format(&p, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CollegeError::io(&p, e))?;
        manifest.total += 1;
        *manifest.per_source.entry(r.source_tag.clone()).or_default() += 1;
    }
    w.flush().map_err(|e| CollegeError::io(&p, e))?;
    let mp = manifest_path(path);
    let mps = mp.display().to_string();
    let mw = BufWriter::new(File::create(&mp).map_err(|e| CollegeError::io(&mps, e))?);
    serde_json::to_writer_pretty(mw, &manifest)
        .map_err(|e| CollegeError::format(&mps, e.to_string()))?;
    Ok(manifest)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|e| CollegeError::io(&p, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CollegeError::io(&p, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line)
            .map_err(|e| CollegeError::format(&p, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Everything the pipeline produced for one corpus, including why documents
/// were dropped.
#[derive(Debug, Default)]
pub struct PipelineReport {
    pub records: Vec<EpisodeRecord>,
    pub rejections: Vec<(String, RejectReason)>,
    pub skipped_queries: usize,
}

/// Full pipeline: filter documents, index sentences, chunk queries, choose
/// concepts, mine + rank supports, and assemble validated records.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    docs: &[Document],
    cfg: &FilterConfig,
    lang: &dyn LangScorer,
    ppl: &dyn PplScorer,
    ctx: &dyn ContextualScorer,
    lexicon: &Lexicon,
    rng: &mut impl Rng,
    placeholder: &str,
) -> Result<PipelineReport> {
    let mut report = PipelineReport::default();
    let mut accepted = Vec::new();
    for doc in docs {
        match clean_and_filter(doc, cfg, lang, ppl)? {
            FilterOutcome::Accepted(d) => accepted.push(d),
            FilterOutcome::Rejected { id, reason } => report.rejections.push((id, reason)),
        }
    }
    let mut index = SentenceIndex::default();
    for d in &accepted {
        for s in split_sentences(&d.text) {
            index.insert(&s);
        }
    }
    for d in &accepted {
        let tag = d.source_tag.clone().unwrap_or_else(|| "untagged".into());
        for query in chunk_into_queries(&d.text, split_sentences) {
            let Some(concept) = choose_concept(&query, lexicon, &index, rng) else {
                report.skipped_queries += 1;
                continue;
            };
            let candidates = gather_supports(&concept, &index, &query, cfg);
            if candidates.is_empty() {
                report.skipped_queries += 1;
                continue;
            }
            let ranked = rank_supports(&query, &concept, &candidates, ctx)?;
            let record = EpisodeRecord {
                query_text: replace_surfaces(&query, &[&concept], placeholder),
                original_text: query,
                concept_surface: concept,
                support_sentences: ranked,
                source_tag: tag.clone(),
            };
            if record.validate(placeholder).is_ok() {
                report.records.push(record);
            } else {
                report.skipped_queries += 1;
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Production adapters and test stubs
// ---------------------------------------------------------------------------

/// Cheap lexical English-likelihood: blends the alphabetic-word ratio with
/// the (normalized) stopword rate.
#[derive(Clone, Debug, Default)]
pub struct LexicalLangScorer;

impl LangScorer for LexicalLangScorer {
    fn score(&self, text: &str) -> Result<f64> {
        let words = split_words(text);
        if words.is_empty() {
            return Ok(0.0);
        }
        let alpha = words
            .iter()
            .filter(|w| w.chars().all(|c| c.is_ascii_alphabetic() || c == '\'' || c == '-'))
            .count() as f64
            / words.len() as f64;
        let stop = words.iter().filter(|w| STOPWORDS.contains(&w.as_str())).count() as f64
            / words.len() as f64;
        Ok((0.6 * alpha + 0.4 * (stop / 0.25).min(1.0)).clamp(0.0, 1.0))
    }
}

/// Add-k smoothed word-unigram perplexity, fit on a reference sample.
#[derive(Clone, Debug)]
pub struct UnigramPplScorer {
    logp: HashMap<String, f64>,
    unk_logp: f64,
}

impl UnigramPplScorer {
    pub fn fit<S: AsRef<str>>(reference: &[S], add_k: f64) -> Self {
        let mut counts: HashMap<String, f64> = HashMap::new();
        let mut total = 0.0;
        for t in reference {
            for w in split_words(t.as_ref()) {
                *counts.entry(w).or_default() += 1.0;
                total += 1.0;
            }
        }
        let v = counts.len().max(1) as f64;
        let denom = total + add_k * (v + 1.0);
        let logp = counts
            .into_iter()
            .map(|(w, c)| (w, ((c + add_k) / denom).ln()))
            .collect();
        UnigramPplScorer {
            logp,
            unk_logp: (add_k / denom).max(f64::MIN_POSITIVE).ln(),
        }
    }
}

impl PplScorer for UnigramPplScorer {
    fn perplexity(&self, text: &str) -> Result<f64> {
        let words = split_words(text);
        if words.is_empty() {
            return Ok(f64::INFINITY);
        }
        let mean_nll = -words
            .iter()
            .map(|w| self.logp.get(w).copied().unwrap_or(self.unk_logp))
            .sum::<f64>()
            / words.len() as f64;
        Ok(mean_nll.exp())
    }
}

/// Contextual vectors from the frozen toy extractor: the state at the first
/// stem-matched occurrence of the concept.
pub struct MlmContextualScorer<'a> {
    pub mlm: &'a ToyMaskedLm,
}

impl ContextualScorer for MlmContextualScorer<'_> {
    fn concept_vector(&self, text: &str, concept: &str) -> Result<Vec<f64>> {
        let words = split_words(text);
        let hits = find_surface_hits(&words, &[concept]);
        let hit = hits.first().ok_or_else(|| {
            CollegeError::NotFound(format!("concept {concept:?} not found in text"))
        })?;
        let mut ids: Vec<u32> = words
            .iter()
            .map(|w| self.mlm.tokenizer.id(w).unwrap_or(self.mlm.tokenizer.unk_id()))
            .collect();
        ids.truncate(self.mlm.cfg.max_seq);
        let states = self.mlm.encode(&ids)?;
        let row = hit.start.min(states.rows() - 1);
        Ok(states.row(row).to_vec())
    }
}

/// Fixed-score stubs for deterministic tests.
#[derive(Clone, Copy, Debug)]
pub struct FixedLangScorer(pub f64);

impl LangScorer for FixedLangScorer {
    fn score(&self, _text: &str) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FixedPplScorer(pub f64);

impl PplScorer for FixedPplScorer {
    fn perplexity(&self, _text: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// Stub contextual scorer: looks vectors up by the candidate text, falling
/// back to a hash-derived vector.
#[derive(Clone, Debug, Default)]
pub struct StubContextualScorer {
    pub vectors: HashMap<String, Vec<f64>>,
    pub dim: usize,
}

impl ContextualScorer for StubContextualScorer {
    fn concept_vector(&self, text: &str, _concept: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.vectors.get(text) {
            return Ok(v.clone());
        }
        let dim = self.dim.max(4);
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        Ok((0..dim)
            .map(|i| (((h >> (i % 48)) & 0xff) as f64 / 255.0) - 0.5)
            .collect())
    }
}
