//! Deterministic synthetic corpus for demos and desk-scale tests: a tiny
//! templated language where every pseudo-word concept co-occurs with two
//! signature objects, so a competent encoder can identify a concept from a
//! few masked sentences and a small LM can be pretrained to exploit it.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::data::EpisodeRecord;
use crate::eval::{DefGenItem, GREChoice, GREItem, GREMode, SlangItem};
use crate::lm::NONCE;
use crate::tok::replace_surfaces;

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub n_concepts: usize,
    /// Concepts whose records appear only at the tail (never used to train
    /// the encoder when the tail is held out).
    pub held_out_concepts: usize,
    pub sentences_per_concept: usize,
    pub filler_sentences: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_concepts: 24,
            held_out_concepts: 6,
            sentences_per_concept: 12,
            filler_sentences: 60,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub concepts: Vec<String>,
    /// Two signature objects per concept, aligned with `concepts`.
    pub signatures: Vec<(String, String)>,
    /// Every sentence in the corpus (usage sentences, one definitional
    /// sentence per concept, fillers); the pretraining stream for both toy
    /// models.
    pub sentences: Vec<String>,
    /// Usage sentences per concept, aligned with `concepts`. Task fixtures
    /// draw from these so definitional sentences never leak into supports.
    pub usage_sentences: Vec<Vec<String>>,
    /// Episode records; records for held-out concepts come last.
    pub records: Vec<EpisodeRecord>,
    /// Index of the first record belonging to a held-out concept.
    pub held_out_from: usize,
    pub spec: SynthSpec,
}

const VERBS: [&str; 6] = ["likes", "eats", "sees", "wants", "finds", "keeps"];
const ADVERBS: [&str; 4] = ["today", "often", "always", "quietly"];
const GENERICS: [&str; 6] = ["stone", "leaf", "rope", "cup", "box", "sand"];

/// Distinct two-syllable pseudo-words: "dakel", "bofin", ...
fn pseudo_words(rng: &mut ChaCha8Rng, count: usize, taken: &mut Vec<String>) -> Vec<String> {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 6] = ["k", "n", "p", "t", "m", "x"];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = format!(
            "{}{}{}{}{}",
            ONSETS[rng.random_range(0..ONSETS.len())],
            VOWELS[rng.random_range(0..VOWELS.len())],
            CODAS[rng.random_range(0..CODAS.len())],
            ONSETS[rng.random_range(0..ONSETS.len())],
            VOWELS[rng.random_range(0..VOWELS.len())],
        );
        if !taken.contains(&w) && !GENERICS.contains(&w.as_str()) {
            taken.push(w.clone());
            out.push(w);
        }
    }
    out
}

fn concept_sentence(rng: &mut ChaCha8Rng, concept: &str, sig: &(String, String)) -> String {
    let verb = VERBS[rng.random_range(0..VERBS.len())];
    let adv = ADVERBS[rng.random_range(0..ADVERBS.len())];
    // signature objects dominate so the context identifies the concept
    let object = match rng.random_range(0..10u32) {
        0..=4 => sig.0.as_str(),
        5..=8 => sig.1.as_str(),
        _ => GENERICS[rng.random_range(0..GENERICS.len())],
    };
    match rng.random_range(0..3u32) {
        0 => format!("the {concept} {verb} the {object}."),
        1 => format!("{adv} the {concept} {verb} the {object}."),
        _ => format!("the {concept} {verb} the {object} {adv}."),
    }
}

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    let verb = VERBS[rng.random_range(0..VERBS.len())];
    let a = GENERICS[rng.random_range(0..GENERICS.len())];
    let b = GENERICS[rng.random_range(0..GENERICS.len())];
    let adv = ADVERBS[rng.random_range(0..ADVERBS.len())];
    format!("the {a} {verb} the {b} {adv}.")
}

pub fn build(spec: SynthSpec) -> SynthCorpus {
    assert!(spec.n_concepts > spec.held_out_concepts);
    assert!(
        spec.sentences_per_concept >= 6,
        "need at least 6 sentences per concept for a chunk plus supports"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = Vec::new();
    let concepts = pseudo_words(&mut rng, spec.n_concepts, &mut taken);
    let objects = pseudo_words(&mut rng, 2 * spec.n_concepts, &mut taken);
    let signatures: Vec<(String, String)> = objects
        .chunks(2)
        .map(|c| (c[0].clone(), c[1].clone()))
        .collect();

    let mut sentences = Vec::new();
    let mut per_concept: Vec<Vec<String>> = Vec::with_capacity(spec.n_concepts);
    for (concept, sig) in concepts.iter().zip(&signatures) {
        let mut own = Vec::with_capacity(spec.sentences_per_concept);
        while own.len() < spec.sentences_per_concept {
            let s = concept_sentence(&mut rng, concept, sig);
            if !own.contains(&s) {
                own.push(s);
            }
        }
        sentences.extend(own.iter().cloned());
        // one definitional sentence so the LM learns the template
        sentences.push(format!(
            "the word {concept} is defined as a thing that goes with the {} and the {}.",
            sig.0, sig.1
        ));
        per_concept.push(own);
    }
    for _ in 0..spec.filler_sentences {
        sentences.push(filler_sentence(&mut rng));
    }

    // Records: consecutive 4-sentence chunks per concept; the sentences not
    // used by a record's chunk serve as its mined supports.
    let make_records = |indices: &[usize], rng: &mut ChaCha8Rng| -> Vec<EpisodeRecord> {
        let mut records = Vec::new();
        for &ci in indices {
            let own = &per_concept[ci];
            let concept = &concepts[ci];
            let n_chunks = own.len() / 4;
            for chunk in 0..n_chunks.max(1).min(own.len() / 4) {
                let chunk_sentences = &own[chunk * 4..chunk * 4 + 4];
                let original_text = chunk_sentences.join(" ");
                let mut supports: Vec<String> = own
                    .iter()
                    .filter(|s| !original_text.contains(s.as_str()))
                    .cloned()
                    .collect();
                for i in (1..supports.len()).rev() {
                    supports.swap(i, rng.random_range(0..=i));
                }
                supports.truncate(8);
                if supports.is_empty() {
                    continue;
                }
                records.push(EpisodeRecord {
                    concept_surface: concept.clone(),
                    query_text: replace_surfaces(&original_text, &[concept], NONCE),
                    original_text,
                    support_sentences: supports,
                    source_tag: "synthetic".into(),
                });
            }
        }
        records
    };
    let train_idx: Vec<usize> = (0..spec.n_concepts - spec.held_out_concepts).collect();
    let held_idx: Vec<usize> = (spec.n_concepts - spec.held_out_concepts..spec.n_concepts).collect();
    let mut records = make_records(&train_idx, &mut rng);
    let held_out_from = records.len();
    records.extend(make_records(&held_idx, &mut rng));
    for r in &records {
        r.validate(NONCE).expect("synthetic record invariant");
    }

    SynthCorpus {
        concepts,
        signatures,
        sentences,
        usage_sentences: per_concept,
        records,
        held_out_from,
        spec,
    }
}

impl SynthCorpus {
    /// All corpus text joined, for building tokenizers.
    pub fn joined_text(&self) -> String {
        self.sentences.join(" ")
    }

    /// Sentences about one concept.
    pub fn sentences_for(&self, concept: &str) -> Vec<String> {
        self.sentences
            .iter()
            .filter(|s| crate::tok::contains_surface(s, concept))
            .cloned()
            .collect()
    }

    /// pick-the-concept fill-in-the-blank items: the stem pairs the blank
    /// with one concept's signature object, so exactly one choice fits.
    pub fn fixture_gre_items(&self, n: usize, choices: usize, rng: &mut ChaCha8Rng) -> Vec<GREItem> {
        assert!(choices >= 2 && choices <= self.concepts.len());
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pool: Vec<usize> = (0..self.concepts.len()).collect();
            for i in (1..pool.len()).rev() {
                pool.swap(i, rng.random_range(0..=i));
            }
            let picked = &pool[..choices];
            let answer_slot = rng.random_range(0..choices);
            let answer_concept = picked[answer_slot];
            let sig = if rng.random_range(0..2u32) == 0 {
                &self.signatures[answer_concept].0
            } else {
                &self.signatures[answer_concept].1
            };
            let verb = VERBS[rng.random_range(0..VERBS.len())];
            items.push(GREItem {
                stem: format!("the [BLANK] {verb} the {sig}."),
                choices: picked
                    .iter()
                    .map(|&ci| GREChoice {
                        word: self.concepts[ci].clone(),
                        examples: self.usage_sentences[ci].clone(),
                        definition: Some(self.definition_of(ci)),
                    })
                    .collect(),
                answers: vec![answer_slot],
                mode: GREMode::Top1,
            });
        }
        items
    }

    pub fn definition_of(&self, ci: usize) -> String {
        format!(
            "a thing that goes with the {} and the {}",
            self.signatures[ci].0, self.signatures[ci].1
        )
    }

    pub fn fixture_slang_items(&self) -> Vec<SlangItem> {
        self.concepts
            .iter()
            .enumerate()
            .map(|(ci, c)| SlangItem {
                term: c.clone(),
                definition: self.definition_of(ci),
                tweets: self.usage_sentences[ci].iter().take(8).cloned().collect(),
            })
            .collect()
    }

    pub fn fixture_defgen_items(&self) -> Vec<DefGenItem> {
        self.concepts
            .iter()
            .enumerate()
            .map(|(ci, c)| DefGenItem {
                word: c.clone(),
                examples: self.usage_sentences[ci].iter().take(8).cloned().collect(),
                reference: self.definition_of(ci),
            })
            .collect()
    }
}
