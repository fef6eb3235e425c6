//! Word-level tokenization for the toy models, plus the surface-form
//! matching rules shared by the masking, splicing and data-pipeline code.
//!
//! Tokens are lowercased words; punctuation splits off as single-character
//! tokens. Four special tokens are always present: `<unk>`, `<mask>`,
//! `<bos>`, `<eos>`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

const SPECIALS: [&str; 4] = [UNK, MASK, BOS, EOS];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WordTokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    /// Builds a tokenizer over the given non-special words. Ids are stable:
    /// specials first, then the words sorted and deduplicated.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.to_lowercase())
            .filter(|w| !w.is_empty() && !SPECIALS.contains(&w.as_str()))
            .collect();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(set);
        let mut t = WordTokenizer {
            words: all,
            index: HashMap::new(),
        };
        t.rebuild_index();
        t
    }

    pub fn from_corpus<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut words = Vec::new();
        for t in texts {
            words.extend(split_words(t.as_ref()));
        }
        Self::from_words(words)
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn mask_id(&self) -> u32 {
        1
    }

    pub fn bos_id(&self) -> u32 {
        2
    }

    pub fn eos_id(&self) -> u32 {
        3
    }

    /// Plain encoding: words to ids, unknown words to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(self.unk_id()))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Splits text into lowercased word tokens; punctuation becomes its own
/// token. Apostrophes and hyphens stay inside words.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' || ch == '_' || ch == '<' || ch == '>' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// True when `word` is `stem` or an inflected form of it (the stem plus a
/// trailing suffix), case-insensitively.
pub fn stem_match(word: &str, stem: &str) -> bool {
    let w = word.to_lowercase();
    let s = stem.to_lowercase();
    w == s || (w.len() > s.len() && w.starts_with(&s))
}

/// One matched occurrence of a surface form inside a word stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SurfaceHit {
    /// word index where the match starts
    pub start: usize,
    /// number of words covered
    pub len: usize,
    /// index into the surface list that matched
    pub surface: usize,
}

/// Finds all non-overlapping occurrences of the surface forms in a word
/// stream. Matching is case-insensitive and word-boundary based; the final
/// word of a surface may be inflected (longest-stem-match). When several
/// surfaces match at the same position the longest one wins.
pub fn find_surface_hits(words: &[String], surfaces: &[&str]) -> Vec<SurfaceHit> {
    // Longest surface first so e.g. "beige flag" beats "beige".
    let mut order: Vec<usize> = (0..surfaces.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(split_words(surfaces[i]).len() * 1000 + surfaces[i].len()));
    let surface_words: Vec<Vec<String>> = surfaces.iter().map(|s| split_words(s)).collect();

    let mut hits = Vec::new();
    let mut pos = 0;
    while pos < words.len() {
        let mut matched = None;
        for &si in &order {
            let sw = &surface_words[si];
            if sw.is_empty() || pos + sw.len() > words.len() {
                continue;
            }
            let ok = sw.iter().enumerate().all(|(j, part)| {
                if j + 1 == sw.len() {
                    stem_match(&words[pos + j], part)
                } else {
                    words[pos + j].to_lowercase() == *part
                }
            });
            if ok {
                matched = Some(SurfaceHit {
                    start: pos,
                    len: sw.len(),
                    surface: si,
                });
                break;
            }
        }
        match matched {
            Some(h) => {
                pos += h.len;
                hits.push(h);
            }
            None => pos += 1,
        }
    }
    hits
}

/// Replaces every occurrence of the surface forms with `replacement`,
/// returning a whitespace-normalized string (words joined by single
/// spaces, matching what the tokenizer sees).
pub fn replace_surfaces(text: &str, surfaces: &[&str], replacement: &str) -> String {
    let words = split_words(text);
    let hits = find_surface_hits(&words, surfaces);
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut hit_iter = hits.iter().peekable();
    let mut i = 0;
    while i < words.len() {
        if let Some(h) = hit_iter.peek() {
            if h.start == i {
                out.push(replacement.to_string());
                i += h.len;
                hit_iter.next();
                continue;
            }
        }
        out.push(words[i].clone());
        i += 1;
    }
    out.join(" ")
}

/// True when any surface form occurs in the text (stem-matched).
pub fn contains_surface(text: &str, surface: &str) -> bool {
    let words = split_words(text);
    !find_surface_hits(&words, &[surface]).is_empty()
}
