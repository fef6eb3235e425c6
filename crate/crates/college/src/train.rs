//! Training the concept encoder against a frozen LM: the four-term loss
//! (positive and negative cross entropy, hidden-state cosine distillation,
//! logit MSE distillation), the positive-to-original index alignment,
//! episode sampling with a per-concept example buffer, the AdamW loop with
//! warmup and clipping, and checkpoint selection.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::data::{split_sentences, EpisodeRecord};
use crate::encoder::{BoundConceptEncoder, ConceptEncoder};
use crate::error::{CollegeError, Result};
use crate::lm::{mask_concept, splice_tokens, ForwardTrace, NONCE};
use crate::models::{LanguageModel, ToyCausalLm, ToyMaskedLm};
use crate::nn::{clip_global_norm, AdamW, WarmupLinearSchedule};
use crate::tensor::{cosine, log_softmax, Graph, Tensor, Var};
use crate::tok::{contains_surface, split_words};

/// One training unit: supports, placeholder-substituted positive query, a
/// negative sequence with no new token, and the unmasked original text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support_sentences: Vec<String>,
    pub positive_text: String,
    pub negative_text: String,
    pub original_text: String,
    pub concept_surface: String,
}

impl Episode {
    pub fn validate(&self, placeholder: &str) -> Result<()> {
        if self.support_sentences.is_empty() {
            return Err(CollegeError::InvalidInput("episode has no supports".into()));
        }
        if !self.positive_text.contains(placeholder) {
            return Err(CollegeError::InvalidInput(
                "positive text has no placeholder".into(),
            ));
        }
        if self.negative_text.contains(placeholder) {
            return Err(CollegeError::InvalidInput(
                "negative text contains a placeholder".into(),
            ));
        }
        // The original must be the positive with placeholders restored:
        // checked as word-level alignability.
        let (pos_ids, orig_ids, new_id) =
            word_alignment_ids(&self.positive_text, &self.original_text, placeholder);
        build_index_map(&pos_ids, &orig_ids, new_id).map(|_| ())
    }
}

/// Encodes the two word streams into ids for an alignment check; the
/// placeholder maps to a reserved id.
fn word_alignment_ids(positive: &str, original: &str, placeholder: &str) -> (Vec<u32>, Vec<u32>, u32) {
    let mut dict: HashMap<String, u32> = HashMap::new();
    let new_id = 0u32;
    dict.insert(placeholder.to_lowercase(), new_id);
    let encode = |words: Vec<String>, dict: &mut HashMap<String, u32>| -> Vec<u32> {
        words
            .into_iter()
            .map(|w| {
                let next = dict.len() as u32;
                *dict.entry(w).or_insert(next)
            })
            .collect()
    };
    let pos = encode(split_words(positive), &mut dict);
    let orig = encode(split_words(original), &mut dict);
    (pos, orig, new_id)
}

/// Alignment from positions in the positive sequence to positions in the
/// original sequence, defined outside the new-token positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    sigma: BTreeMap<usize, usize>,
    new_indices: BTreeSet<usize>,
}

impl IndexMap {
    pub fn sigma(&self, k: usize) -> Option<usize> {
        self.sigma.get(&k).copied()
    }

    pub fn new_indices(&self) -> &BTreeSet<usize> {
        &self.new_indices
    }

    /// (k, σ(k)) pairs in ascending k.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.sigma.iter().map(|(&k, &v)| (k, v)).collect()
    }
}

/// Contiguous non-new segments of the positive sequence, with the number of
/// new tokens preceding each and trailing new tokens after the last.
struct SegmentLayout {
    /// (nonces before segment, k offset of segment, segment length)
    segments: Vec<(usize, usize, usize)>,
    trailing_nonces: usize,
    new_indices: BTreeSet<usize>,
}

fn layout(pos: &[u32], new_token_id: u32) -> SegmentLayout {
    let mut segments = Vec::new();
    let mut new_indices = BTreeSet::new();
    let mut gap = 0usize;
    let mut start = None;
    for (k, &t) in pos.iter().enumerate() {
        if t == new_token_id {
            new_indices.insert(k);
            if let Some(s) = start.take() {
                segments.push((gap, s, k - s));
                gap = 0;
            }
            gap += 1;
        } else if start.is_none() {
            start = Some(k);
        }
    }
    let trailing_nonces = match start {
        Some(s) => {
            segments.push((gap, s, pos.len() - s));
            0
        }
        None => gap,
    };
    SegmentLayout {
        segments,
        trailing_nonces,
        new_indices,
    }
}

/// Greedy left-to-right alignment of the positive sequence onto the
/// original: tokens before the first new token map to identical indices;
/// each later segment is placed at the leftmost original position (past at
/// least one original token per intervening new token) from which the whole
/// remainder can still be matched; the final segment must reach the end of
/// the original. Every new token covers one or more original tokens.
pub fn build_index_map(pos: &[u32], orig: &[u32], new_token_id: u32) -> Result<IndexMap> {
    if !pos.contains(&new_token_id) {
        return Err(CollegeError::InvalidInput(
            "positive sequence has no new token".into(),
        ));
    }
    let lay = layout(pos, new_token_id);
    let fail = |reason: &str| CollegeError::Alignment {
        reason: reason.into(),
        positive: pos.to_vec(),
        original: orig.to_vec(),
    };

    // Minimum original tokens needed from segment r on.
    let n_seg = lay.segments.len();
    let mut min_need = vec![0usize; n_seg + 1];
    min_need[n_seg] = lay.trailing_nonces;
    for r in (0..n_seg).rev() {
        let (gap, _, len) = lay.segments[r];
        min_need[r] = min_need[r + 1] + gap + len;
    }
    if orig.len() < min_need.first().copied().unwrap_or(lay.trailing_nonces) {
        return Err(fail("original sequence too short"));
    }

    fn matches(orig: &[u32], at: usize, pos: &[u32], k: usize, len: usize) -> bool {
        at + len <= orig.len() && (0..len).all(|j| orig[at + j] == pos[k + j])
    }

    // Depth-first search over segment placements, earliest first, so the
    // first complete assignment is the leftmost one.
    fn place(
        r: usize,
        cursor: usize,
        lay: &SegmentLayout,
        pos: &[u32],
        orig: &[u32],
        out: &mut Vec<usize>,
    ) -> bool {
        if r == lay.segments.len() {
            return orig.len() >= cursor + lay.trailing_nonces;
        }
        let (gap, k, len) = lay.segments[r];
        let lo = cursor + gap;
        if r == 0 && gap == 0 {
            // identity prefix before the first new token
            if lo == 0 && matches(orig, 0, pos, k, len) && place(r + 1, len, lay, pos, orig, out) {
                out.push(0);
                return true;
            }
            return false;
        }
        let last = r + 1 == lay.segments.len();
        let mut p = lo;
        while p + len <= orig.len() {
            if matches(orig, p, pos, k, len) {
                if last && lay.trailing_nonces == 0 && p + len != orig.len() {
                    p += 1;
                    continue;
                }
                if place(r + 1, p + len, lay, pos, orig, out) {
                    out.push(p);
                    return true;
                }
            }
            p += 1;
        }
        false
    }

    let mut placements = Vec::new();
    if !place(0, 0, &lay, pos, orig, &mut placements) {
        return Err(fail("no consistent alignment"));
    }
    placements.reverse();

    let mut sigma = BTreeMap::new();
    for ((_, k, len), &p) in lay.segments.iter().zip(&placements) {
        for j in 0..*len {
            sigma.insert(k + j, p + j);
        }
    }
    Ok(IndexMap {
        sigma,
        new_indices: lay.new_indices,
    })
}

/// The four loss terms and their unweighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_pos: f64,
    pub ce_neg: f64,
    pub cos: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown {
            ce_pos: 0.0,
            ce_neg: 0.0,
            cos: 0.0,
            mse: 0.0,
            total: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ce_pos.is_finite()
            && self.ce_neg.is_finite()
            && self.cos.is_finite()
            && self.mse.is_finite()
            && self.total.is_finite()
    }
}

/// Unweighted sum of the four parts; weighting the terms was no better.
pub fn total_loss(ce_pos: f64, ce_neg: f64, cos: f64, mse: f64) -> Result<LossBreakdown> {
    let b = LossBreakdown {
        ce_pos,
        ce_neg,
        cos,
        mse,
        total: ce_pos + ce_neg + cos + mse,
    };
    if !b.is_finite() {
        return Err(CollegeError::NonFinite("loss term".into()));
    }
    Ok(b)
}

/// Mean next-token cross entropy over the positive and negative sequences,
/// both under the V+1 augmented vocabulary.
pub fn compute_ce_losses(
    aug: &crate::lm::AugmentedLm,
    pos: &[u32],
    neg: &[u32],
) -> Result<(f64, f64)> {
    let v = aug.base().base_vocab() as u32;
    if !pos.iter().any(|&t| t >= v) {
        return Err(CollegeError::InvalidInput(
            "positive sequence lacks the new token".into(),
        ));
    }
    if neg.iter().any(|&t| t >= v) {
        return Err(CollegeError::InvalidInput(
            "negative sequence contains a new token".into(),
        ));
    }
    Ok((mean_ce(aug, pos)?, mean_ce(aug, neg)?))
}

fn mean_ce(aug: &crate::lm::AugmentedLm, ids: &[u32]) -> Result<f64> {
    if ids.len() < 2 {
        return Err(CollegeError::InvalidInput(
            "sequence too short for next-token loss".into(),
        ));
    }
    let trace = aug.forward_trace(ids)?;
    let mut total = 0.0;
    for t in 1..ids.len() {
        total -= log_softmax(trace.logits.row(t - 1))[ids[t] as usize];
    }
    Ok(total / (ids.len() - 1) as f64)
}

/// Cosine distance over matched final states and MSE over matched logit
/// rows restricted to the shared original-vocabulary columns, each averaged
/// over the non-new positions.
pub fn compute_distillation(
    pos_trace: &ForwardTrace,
    orig_trace: &ForwardTrace,
    map: &IndexMap,
) -> Result<(f64, f64)> {
    let n = pos_trace.logits.rows();
    let shared = orig_trace.logits.cols().min(pos_trace.logits.cols());
    for (k, s) in map.pairs() {
        if k >= n || s >= orig_trace.logits.rows() {
            return Err(CollegeError::InvalidInput(format!(
                "index map entry ({k}, {s}) outside trace bounds"
            )));
        }
    }
    let pairs = map.pairs();
    if pairs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut cos_total = 0.0;
    let mut mse_total = 0.0;
    for (k, s) in &pairs {
        cos_total += 1.0
            - cosine(
                pos_trace.final_states.row(*k),
                orig_trace.final_states.row(*s),
            );
        let pr = &pos_trace.logits.row(*k)[..shared];
        let or = &orig_trace.logits.row(*s)[..shared];
        mse_total += pr
            .iter()
            .zip(or)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / shared as f64;
    }
    Ok((cos_total / pairs.len() as f64, mse_total / pairs.len() as f64))
}

/// Per-concept FIFO store of previously seen sentences.
#[derive(Clone, Debug)]
pub struct ExampleBuffer {
    capacity: usize,
    store: HashMap<String, VecDeque<String>>,
}

impl ExampleBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ExampleBuffer {
            capacity,
            store: HashMap::new(),
        }
    }

    pub fn insert(&mut self, concept: &str, sentence: &str) {
        let q = self.store.entry(concept.to_lowercase()).or_default();
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(sentence.to_string());
    }

    pub fn sentences(&self, concept: &str) -> Vec<&String> {
        self.store
            .get(&concept.to_lowercase())
            .map(|q| q.iter().collect())
            .unwrap_or_default()
    }

    pub fn len_for(&self, concept: &str) -> usize {
        self.store
            .get(&concept.to_lowercase())
            .map(|q| q.len())
            .unwrap_or(0)
    }
}

/// Negative sequences: drawn uniformly among pool texts that do not contain
/// the concept surface form.
#[derive(Clone, Debug)]
pub struct NegativePool {
    texts: Vec<String>,
}

impl NegativePool {
    pub fn new(texts: Vec<String>) -> Self {
        NegativePool { texts }
    }

    pub fn draw_without(&self, surface: &str, rng: &mut impl Rng) -> Result<String> {
        let eligible: Vec<&String> = self
            .texts
            .iter()
            .filter(|t| !contains_surface(t, surface))
            .collect();
        if eligible.is_empty() {
            return Err(CollegeError::Dataset(format!(
                "no negative text avoids the surface form {surface:?}"
            )));
        }
        Ok(eligible[rng.random_range(0..eligible.len())].clone())
    }
}

#[derive(Clone, Debug)]
pub enum SampleOutcome {
    Emitted(Episode),
    /// First sighting of the concept; its sentence was buffered.
    Deferred,
}

/// Buffer-driven episode sampling: serve supports from the buffer when it
/// already holds sentences for this concept, then feed the query's own
/// concept sentence back in; otherwise just feed and defer. A stored
/// sentence never supports the query it came from.
pub fn sample_episode(
    buffer: &mut ExampleBuffer,
    record: &EpisodeRecord,
    negatives: &NegativePool,
    supports_per_query: usize,
    rng: &mut impl Rng,
) -> Result<SampleOutcome> {
    let concept_sentence = split_sentences(&record.original_text)
        .into_iter()
        .find(|s| contains_surface(s, &record.concept_surface))
        .ok_or_else(|| {
            CollegeError::InvalidInput(format!(
                "query for {:?} has no concept-bearing sentence",
                record.concept_surface
            ))
        })?;
    let candidates: Vec<String> = buffer
        .sentences(&record.concept_surface)
        .into_iter()
        .filter(|s| *s != &concept_sentence && !record.original_text.contains(s.as_str()))
        .cloned()
        .collect();
    if candidates.is_empty() {
        buffer.insert(&record.concept_surface, &concept_sentence);
        return Ok(SampleOutcome::Deferred);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let support_sentences: Vec<String> = order
        .into_iter()
        .take(supports_per_query.max(1))
        .map(|i| candidates[i].clone())
        .collect();
    let negative_text = negatives.draw_without(&record.concept_surface, rng)?;
    let episode = Episode {
        support_sentences,
        positive_text: record.query_text.clone(),
        negative_text,
        original_text: record.original_text.clone(),
        concept_surface: record.concept_surface.clone(),
    };
    buffer.insert(&record.concept_surface, &concept_sentence);
    Ok(SampleOutcome::Emitted(episode))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Defaults to 1% of `steps` when absent.
    pub warmup_steps: Option<u64>,
    pub grad_clip_norm: f64,
    pub supports_per_query: usize,
    pub buffer_capacity: usize,
    pub checkpoint_every: u64,
    /// Records reserved for the held-out metrics ledger.
    pub held_out: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 28_000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_steps: None,
            grad_clip_norm: 1.0,
            supports_per_query: 1,
            buffer_capacity: 8,
            checkpoint_every: 1000,
            held_out: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0
            || self.batch_size == 0
            || self.lr <= 0.0
            || self.grad_clip_norm <= 0.0
            || self.supports_per_query == 0
            || self.buffer_capacity == 0
        {
            return Err(CollegeError::InvalidInput(
                "train config fields must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.steps / 100)
    }

    pub fn schedule(&self) -> WarmupLinearSchedule {
        WarmupLinearSchedule {
            base_lr: self.lr,
            warmup_steps: self.effective_warmup(),
            total_steps: self.steps,
        }
    }
}

pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
    pub skipped: bool,
}

/// Owns the trainable encoder and optimizer; the LM and the extractor stay
/// frozen behind shared references.
pub struct Trainer<'a> {
    pub encoder: ConceptEncoder,
    pub lm: &'a ToyCausalLm,
    pub mlm: &'a ToyMaskedLm,
    pub cfg: TrainConfig,
    pub placeholder: String,
    pub step: u64,
    opt: AdamW,
}

struct EpisodeLossVars {
    ce_pos: Var,
    ce_neg: Var,
    cos: Var,
    mse: Var,
    total: Var,
}

impl<'a> Trainer<'a> {
    pub fn new(
        encoder: ConceptEncoder,
        lm: &'a ToyCausalLm,
        mlm: &'a ToyMaskedLm,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.lr, cfg.weight_decay);
        Ok(Trainer {
            encoder,
            lm,
            mlm,
            cfg,
            placeholder: NONCE.to_string(),
            step: 0,
            opt,
        })
    }

    fn encode_checked(&self, ids: Vec<u32>, what: &str) -> Result<Vec<u32>> {
        if ids.len() < 2 {
            return Err(CollegeError::InvalidInput(format!("{what} is too short")));
        }
        if ids.len() > self.lm.cfg.max_seq {
            return Err(CollegeError::InvalidInput(format!(
                "{what} has {} tokens, the model supports {}",
                ids.len(),
                self.lm.cfg.max_seq
            )));
        }
        Ok(ids)
    }

    /// Builds the full four-term loss for one episode inside `g`.
    fn episode_loss(
        &self,
        g: &mut Graph,
        enc: &BoundConceptEncoder,
        ep: &Episode,
    ) -> Result<EpisodeLossVars> {
        ep.validate(&self.placeholder)?;
        // supports -> frozen extractor states -> generated pair
        let mut state_vars = Vec::with_capacity(ep.support_sentences.len());
        for s in &ep.support_sentences {
            let ids = mask_concept(s, &[&ep.concept_surface], &self.mlm.tokenizer)?;
            let states = self.mlm.encode(&ids)?;
            state_vars.push(g.constant(states));
        }
        let (e_in, e_out) = enc.generate(g, &state_vars);

        let v = self.lm.base_vocab() as u32;
        let bos = Some(self.lm.tokenizer.bos_id());
        let pos_ids = self.encode_checked(
            splice_tokens(
                &ep.positive_text,
                &self.lm.tokenizer,
                &self.placeholder,
                Some(v),
                bos,
            ),
            "positive sequence",
        )?;
        let neg_ids = self.encode_checked(
            splice_tokens(
                &ep.negative_text,
                &self.lm.tokenizer,
                &self.placeholder,
                None,
                bos,
            ),
            "negative sequence",
        )?;
        let orig_ids = self.encode_checked(
            splice_tokens(
                &ep.original_text,
                &self.lm.tokenizer,
                &self.placeholder,
                None,
                bos,
            ),
            "original sequence",
        )?;

        let bound_lm = self.lm.bind(g, false);
        let pos_out = bound_lm.forward(g, &pos_ids, Some(e_in), Some(e_out));
        let predict_rows: Vec<usize> = (0..pos_ids.len() - 1).collect();
        let pos_pred = g.select_rows(pos_out.logits, &predict_rows);
        let pos_targets: Vec<usize> = pos_ids[1..].iter().map(|&t| t as usize).collect();
        let ce_pos = g.cross_entropy_mean(pos_pred, &pos_targets);

        let neg_out = bound_lm.forward(g, &neg_ids, Some(e_in), Some(e_out));
        let neg_rows: Vec<usize> = (0..neg_ids.len() - 1).collect();
        let neg_pred = g.select_rows(neg_out.logits, &neg_rows);
        let neg_targets: Vec<usize> = neg_ids[1..].iter().map(|&t| t as usize).collect();
        let ce_neg = g.cross_entropy_mean(neg_pred, &neg_targets);

        // distillation against the frozen base run on the original text
        let (orig_logits, orig_states) = self.lm.trace_tensors(&orig_ids, &[], &[]);
        let map = build_index_map(&pos_ids, &orig_ids, v)?;
        let pairs = map.pairs();
        let (cos, mse) = if pairs.is_empty() {
            (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
        } else {
            let ks: Vec<usize> = pairs.iter().map(|(k, _)| *k).collect();
            let ss: Vec<usize> = pairs.iter().map(|(_, s)| *s).collect();
            let pos_states_sel = g.select_rows(pos_out.states, &ks);
            let orig_states_all = g.constant(orig_states);
            let orig_states_sel = g.select_rows(orig_states_all, &ss);
            let cos = g.cosine_distance_mean(pos_states_sel, orig_states_sel);

            let shared = orig_logits.cols();
            let pos_shared = g.slice_cols(pos_out.logits, 0, shared);
            let pos_logits_sel = g.select_rows(pos_shared, &ks);
            let orig_logits_all = g.constant(orig_logits);
            let orig_logits_sel = g.select_rows(orig_logits_all, &ss);
            let mse = g.mse_mean(pos_logits_sel, orig_logits_sel);
            (cos, mse)
        };

        let total = g.add_scalars(&[ce_pos, ce_neg, cos, mse]);
        Ok(EpisodeLossVars {
            ce_pos,
            ce_neg,
            cos,
            mse,
            total,
        })
    }

    /// Loss values for one episode without touching any parameter.
    pub fn episode_breakdown(&self, ep: &Episode) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g, false);
        let vars = self.episode_loss(&mut g, &enc, ep)?;
        total_loss(
            g.value(vars.ce_pos).item(),
            g.value(vars.ce_neg).item(),
            g.value(vars.cos).item(),
            g.value(vars.mse).item(),
        )
    }

    /// Analytic gradients of the total episode loss with respect to every
    /// encoder parameter, in `params()` order. No parameter is updated.
    pub fn episode_gradients(&self, ep: &Episode) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g, true);
        let vars = self.episode_loss(&mut g, &enc, ep)?;
        let grads = g.backward(vars.total);
        Ok(enc
            .vars()
            .iter()
            .zip(self.encoder.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect())
    }

    /// One optimizer update over a batch of episodes. Non-finite losses or
    /// gradients skip the step and report it.
    pub fn train_step(&mut self, batch: &[Episode]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(CollegeError::InvalidInput("empty batch".into()));
        }
        let lr = self.cfg.schedule().lr_at(self.step);
        let shapes: Vec<(usize, usize)> = self.encoder.params().iter().map(|p| p.shape()).collect();
        let mut grad_sum: Vec<Tensor> =
            shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        let mut sum = LossBreakdown::zero();
        for ep in batch {
            let mut g = Graph::new();
            let enc = self.encoder.bind(&mut g, true);
            let vars = self.episode_loss(&mut g, &enc, ep)?;
            let breakdown = total_loss(
                g.value(vars.ce_pos).item(),
                g.value(vars.ce_neg).item(),
                g.value(vars.cos).item(),
                g.value(vars.mse).item(),
            );
            let breakdown = match breakdown {
                Ok(b) => b,
                Err(_) => {
                    return Ok(StepReport {
                        loss: LossBreakdown::zero(),
                        grad_norm: f64::NAN,
                        lr,
                        skipped: true,
                    })
                }
            };
            sum.ce_pos += breakdown.ce_pos;
            sum.ce_neg += breakdown.ce_neg;
            sum.cos += breakdown.cos;
            sum.mse += breakdown.mse;
            sum.total += breakdown.total;
            let grads = g.backward(vars.total);
            for ((acc, &var), &shape) in grad_sum.iter_mut().zip(&enc.vars()).zip(&shapes) {
                acc.add_assign(&grads.get_or_zeros(var, shape));
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for gr in &mut grad_sum {
            gr.scale_assign(inv);
        }
        if grad_sum.iter().any(|gr| !gr.all_finite()) {
            return Ok(StepReport {
                loss: LossBreakdown::zero(),
                grad_norm: f64::NAN,
                lr,
                skipped: true,
            });
        }
        let grad_norm = clip_global_norm(&mut grad_sum, self.cfg.grad_clip_norm);
        self.opt.lr = lr;
        self.opt.step(&mut self.encoder.params_mut(), &grad_sum);
        self.step += 1;
        sum.ce_pos *= inv;
        sum.ce_neg *= inv;
        sum.cos *= inv;
        sum.mse *= inv;
        sum.total *= inv;
        Ok(StepReport {
            loss: sum,
            grad_norm,
            lr,
            skipped: false,
        })
    }

    /// Held-out metrics for the checkpoint ledger: mean positive CE (the LM
    /// loss) and mean CE at positions whose target is the new token.
    pub fn held_out_metrics(&self, episodes: &[Episode]) -> Result<HeldOutMetrics> {
        let mut lm_loss = 0.0;
        let mut new_ce = 0.0;
        let mut new_count = 0usize;
        let mut used = 0usize;
        for ep in episodes {
            let Ok(ce) = self.positive_ce_terms(ep) else {
                continue;
            };
            used += 1;
            lm_loss += ce.mean_all;
            new_ce += ce.new_token_sum;
            new_count += ce.new_token_positions;
        }
        if used == 0 {
            return Err(CollegeError::InvalidInput(
                "no usable held-out episodes".into(),
            ));
        }
        Ok(HeldOutMetrics {
            lm_loss: lm_loss / used as f64,
            new_token_ce: if new_count > 0 {
                new_ce / new_count as f64
            } else {
                f64::INFINITY
            },
            episodes: used,
        })
    }

    fn positive_ce_terms(&self, ep: &Episode) -> Result<PositiveCeTerms> {
        let v = self.lm.base_vocab() as u32;
        let support = crate::encoder::SupportSet::new(
            ep.support_sentences
                .iter()
                .map(|s| mask_concept(s, &[&ep.concept_surface], &self.mlm.tokenizer))
                .collect::<Result<Vec<_>>>()?,
            self.mlm.tokenizer.mask_id(),
        )?;
        let ce = crate::encoder::generate_concept_embedding(
            &self.encoder,
            self.mlm,
            &support,
            &ep.concept_surface,
        )?;
        let aug = crate::lm::AugmentedLm::augment(self.lm, &ce)?;
        let pos_ids = self.encode_checked(aug.splice(&ep.positive_text), "positive sequence")?;
        let trace = aug.forward_trace(&pos_ids)?;
        let mut mean_all = 0.0;
        let mut new_token_sum = 0.0;
        let mut new_token_positions = 0usize;
        for t in 1..pos_ids.len() {
            let nll = -log_softmax(trace.logits.row(t - 1))[pos_ids[t] as usize];
            mean_all += nll;
            if pos_ids[t] >= v {
                new_token_sum += nll;
                new_token_positions += 1;
            }
        }
        mean_all /= (pos_ids.len() - 1) as f64;
        Ok(PositiveCeTerms {
            mean_all,
            new_token_sum,
            new_token_positions,
        })
    }
}

struct PositiveCeTerms {
    mean_all: f64,
    new_token_sum: f64,
    new_token_positions: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub lm_loss: f64,
    pub new_token_ce: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub id: String,
    pub step: u64,
    pub new_token_ce: f64,
    pub lm_loss: f64,
    pub train_total: f64,
}

/// Lowest new-token CE wins; ties break on LM loss, then on recency. An
/// override metric (e.g. a downstream task score) takes precedence as an
/// argmax when supplied.
pub fn select_checkpoint(
    history: &[CheckpointMetrics],
    override_scores: Option<&[(String, f64)]>,
) -> Result<String> {
    if history.is_empty() {
        return Err(CollegeError::NotFound("checkpoint history is empty".into()));
    }
    if let Some(scores) = override_scores {
        let mut best: Option<&(String, f64)> = None;
        for s in scores {
            if history.iter().all(|h| h.id != s.0) {
                return Err(CollegeError::NotFound(format!(
                    "override names unknown checkpoint {:?}",
                    s.0
                )));
            }
            if best.map(|b| s.1 > b.1).unwrap_or(true) {
                best = Some(s);
            }
        }
        return best
            .map(|(id, _)| id.clone())
            .ok_or_else(|| CollegeError::NotFound("override metric list is empty".into()));
    }
    let mut best = &history[0];
    for h in &history[1..] {
        let better = (h.new_token_ce, h.lm_loss, std::cmp::Reverse(h.step))
            < (best.new_token_ce, best.lm_loss, std::cmp::Reverse(best.step));
        if better {
            best = h;
        }
    }
    Ok(best.id.clone())
}

pub fn checkpoint_id(step: u64) -> String {
    format!("step-{step:08}")
}

/// Writes the encoder weights and appends the metrics line to the ledger.
pub fn save_checkpoint(
    dir: &Path,
    encoder: &ConceptEncoder,
    metrics: &CheckpointMetrics,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CollegeError::io(dir.display().to_string(), e))?;
    let path = dir.join(format!("{}.ckpt", metrics.id));
    encoder.save(&path)?;
    let ledger = dir.join("metrics.jsonl");
    let lp = ledger.display().to_string();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ledger)
        .map_err(|e| CollegeError::io(&lp, e))?;
    let line =
        serde_json::to_string(metrics).map_err(|e| CollegeError::format(&lp, e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| CollegeError::io(&lp, e))?;
    Ok(path)
}

pub fn read_ledger(dir: &Path) -> Result<Vec<CheckpointMetrics>> {
    let ledger = dir.join("metrics.jsonl");
    let lp = ledger.display().to_string();
    let f = File::open(&ledger).map_err(|e| CollegeError::io(&lp, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| CollegeError::io(&lp, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CollegeError::format(&lp, e.to_string()))?,
        );
    }
    Ok(out)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub skipped_steps: u64,
    pub skipped_episodes: u64,
    pub curve: Vec<(u64, LossBreakdown)>,
    pub ledger: Vec<CheckpointMetrics>,
    pub selected: Option<String>,
}

/// Full training run over an episode dataset. Records stream through the
/// example buffer; a query whose concept has no buffered sentence yet falls
/// back to its mined support candidates so single-occurrence concepts still
/// train. The last `held_out` records never train and feed the ledger.
pub fn run_training(
    trainer: &mut Trainer,
    records: &[EpisodeRecord],
    ckpt_dir: &Path,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    let cfg = trainer.cfg.clone();
    if records.len() <= cfg.held_out {
        return Err(CollegeError::Dataset(format!(
            "{} records cannot cover {} held-out episodes",
            records.len(),
            cfg.held_out
        )));
    }
    let (train_records, held_records) = records.split_at(records.len() - cfg.held_out);
    let pool = NegativePool::new(records.iter().map(|r| r.original_text.clone()).collect());
    let held_episodes: Vec<Episode> = held_records
        .iter()
        .filter_map(|r| fixed_episode(r, &pool, cfg.supports_per_query, rng).ok())
        .collect();

    // each run owns its ledger; stale entries would corrupt selection
    let stale_ledger = ckpt_dir.join("metrics.jsonl");
    if stale_ledger.exists() {
        std::fs::remove_file(&stale_ledger)
            .map_err(|e| CollegeError::io(stale_ledger.display().to_string(), e))?;
    }

    let mut buffer = ExampleBuffer::new(cfg.buffer_capacity);
    let mut outcome = TrainOutcome {
        steps_run: 0,
        skipped_steps: 0,
        skipped_episodes: 0,
        curve: vec![],
        ledger: vec![],
        selected: None,
    };
    let mut cursor = 0usize;
    let mut next_episode = |buffer: &mut ExampleBuffer,
                            skipped: &mut u64,
                            rng: &mut dyn rand::Rng|
     -> Option<Episode> {
        for _ in 0..train_records.len() * 2 {
            let record = &train_records[cursor % train_records.len()];
            cursor += 1;
            let mut local = seeded_from(rng);
            match sample_episode(buffer, record, &pool, cfg.supports_per_query, &mut local) {
                Ok(SampleOutcome::Emitted(ep)) => return Some(ep),
                Ok(SampleOutcome::Deferred) => {
                    if let Ok(ep) = fixed_episode(record, &pool, cfg.supports_per_query, &mut local)
                    {
                        return Some(ep);
                    }
                    *skipped += 1;
                }
                Err(_) => *skipped += 1,
            }
        }
        None
    };

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            match next_episode(&mut buffer, &mut outcome.skipped_episodes, rng) {
                Some(ep) => {
                    if trainer.episode_breakdown(&ep).is_ok() {
                        batch.push(ep);
                    } else {
                        outcome.skipped_episodes += 1;
                    }
                }
                None => break,
            }
        }
        if batch.is_empty() {
            return Err(CollegeError::Dataset(
                "episode stream produced no usable episodes".into(),
            ));
        }
        let report = trainer.train_step(&batch)?;
        if report.skipped {
            outcome.skipped_steps += 1;
        } else {
            outcome.steps_run += 1;
        }
        outcome.curve.push((step, report.loss));
        let is_last = step + 1 == cfg.steps;
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) || is_last {
            let held = trainer.held_out_metrics(&held_episodes)?;
            let metrics = CheckpointMetrics {
                id: checkpoint_id(step + 1),
                step: step + 1,
                new_token_ce: held.new_token_ce,
                lm_loss: held.lm_loss,
                train_total: report.loss.total,
            };
            save_checkpoint(ckpt_dir, &trainer.encoder, &metrics)?;
            outcome.ledger.push(metrics);
        }
    }
    outcome.selected = select_checkpoint(&outcome.ledger, None).ok();
    Ok(outcome)
}

/// Deterministic episode built straight from a record's mined supports.
pub fn fixed_episode(
    record: &EpisodeRecord,
    pool: &NegativePool,
    supports_per_query: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if record.support_sentences.is_empty() {
        return Err(CollegeError::InvalidInput(
            "record has no mined supports".into(),
        ));
    }
    let supports: Vec<String> = record
        .support_sentences
        .iter()
        .take(supports_per_query.max(1))
        .cloned()
        .collect();
    Ok(Episode {
        support_sentences: supports,
        positive_text: record.query_text.clone(),
        negative_text: pool.draw_without(&record.concept_surface, rng)?,
        original_text: record.original_text.clone(),
        concept_surface: record.concept_surface.clone(),
    })
}

fn seeded_from(rng: &mut dyn rand::Rng) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    rand_chacha::ChaCha8Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::models::{RiggedLm, ToyModelConfig};
    use crate::tok::WordTokenizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn index_map_same_length_alignment() {
        // pos=[The, <n>, ran], orig=[The, dog, ran]
        let map = build_index_map(&[10, 99, 12], &[10, 11, 12], 99).unwrap();
        assert_eq!(map.new_indices().iter().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(map.sigma(0), Some(0));
        assert_eq!(map.sigma(2), Some(2));
        assert_eq!(map.sigma(1), None);
    }

    #[test]
    fn index_map_subtokenized_word() {
        // pos=[The, <n>, ran], orig=[The, pend, ant, ran]
        let map = build_index_map(&[10, 99, 12], &[10, 20, 21, 12], 99).unwrap();
        assert_eq!(map.sigma(2), Some(3));
    }

    #[test]
    fn index_map_multiple_nonces() {
        // pos=[<n>, a, <n>, b], orig=[x, y, a, z, b]
        let map = build_index_map(&[99, 1, 99, 2], &[7, 8, 1, 9, 2], 99).unwrap();
        let new: Vec<usize> = map.new_indices().iter().copied().collect();
        assert_eq!(new, vec![0, 2]);
        assert_eq!(map.sigma(1), Some(2));
        assert_eq!(map.sigma(3), Some(4));
    }

    #[test]
    fn index_map_failures() {
        // no new token
        assert!(build_index_map(&[1, 2], &[1, 2], 99).is_err());
        // prefix mismatch
        assert!(build_index_map(&[5, 99, 2], &[1, 7, 2], 99).is_err());
        // suffix cannot be matched
        assert!(matches!(
            build_index_map(&[1, 99, 3], &[1, 7, 4], 99),
            Err(CollegeError::Alignment { .. })
        ));
        // a nonce must consume at least one original token
        assert!(build_index_map(&[1, 99, 2], &[1, 2], 99).is_err());
        assert!(build_index_map(&[1, 99], &[1], 99).is_err());
        assert!(build_index_map(&[1, 99, 2], &[1, 7, 2], 99).is_ok());
    }

    /// Exhaustive enumeration over all contiguous segment placements,
    /// returning the lexicographically smallest feasible one.
    fn oracle_index_map(pos: &[u32], orig: &[u32], new_id: u32) -> Option<Vec<(usize, usize)>> {
        let lay = layout(pos, new_id);
        let segs = &lay.segments;
        #[allow(clippy::too_many_arguments)]
        fn rec(
            r: usize,
            cursor: usize,
            segs: &[(usize, usize, usize)],
            trailing: usize,
            pos: &[u32],
            orig: &[u32],
            acc: &mut Vec<usize>,
            best: &mut Option<Vec<usize>>,
        ) {
            if best.is_some() {
                return;
            }
            if r == segs.len() {
                if orig.len() >= cursor + trailing {
                    *best = Some(acc.clone());
                }
                return;
            }
            let (gap, k, len) = segs[r];
            let identity_only = r == 0 && gap == 0;
            let lo = cursor + gap;
            for p in lo..=orig.len().saturating_sub(len) {
                if identity_only && p != 0 {
                    break;
                }
                let ok = (0..len).all(|j| orig[p + j] == pos[k + j]);
                let last = r + 1 == segs.len();
                if ok && (!last || trailing > 0 || p + len == orig.len()) {
                    acc.push(p);
                    rec(r + 1, p + len, segs, trailing, pos, orig, acc, best);
                    acc.pop();
                }
            }
        }
        let mut best = None;
        rec(
            0,
            0,
            segs,
            lay.trailing_nonces,
            pos,
            orig,
            &mut vec![],
            &mut best,
        );
        best.map(|placements| {
            let mut pairs = Vec::new();
            for ((_, k, len), p) in segs.iter().zip(placements) {
                for j in 0..*len {
                    pairs.push((k + j, p + j));
                }
            }
            pairs
        })
    }

    #[test]
    fn index_map_agrees_with_bruteforce_oracle_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        for _ in 0..300 {
            // random original: words subtokenized into 1..=3 pieces
            let n_words = rng.random_range(3..9);
            let mut orig = Vec::new();
            let mut word_spans = Vec::new();
            for w in 0..n_words {
                let pieces = rng.random_range(1..=3);
                let start = orig.len();
                for p in 0..pieces {
                    // small token alphabet forces repeats
                    orig.push((10 + (w * 3 + p) % 6) as u32);
                }
                word_spans.push((start, orig.len()));
            }
            // replace 1..=2 words with the nonce
            let new_id = 99u32;
            let n_replace = rng.random_range(1..=2.min(n_words));
            let mut chosen: Vec<usize> = (0..n_words).collect();
            for i in (1..chosen.len()).rev() {
                chosen.swap(i, rng.random_range(0..=i));
            }
            let mut replaced: Vec<(usize, usize)> =
                chosen[..n_replace].iter().map(|&w| word_spans[w]).collect();
            replaced.sort();
            let mut pos = Vec::new();
            let mut at = 0;
            for &(s, e) in &replaced {
                pos.extend_from_slice(&orig[at..s]);
                pos.push(new_id);
                at = e;
            }
            pos.extend_from_slice(&orig[at..]);

            let got = build_index_map(&pos, &orig, new_id);
            let want = oracle_index_map(&pos, &orig, new_id);
            match (got, want) {
                (Ok(map), Some(pairs)) => {
                    assert_eq!(map.pairs(), pairs, "pos={pos:?} orig={orig:?}");
                    // soundness: ids agree, sigma strictly increasing
                    let mut prev = None;
                    for (k, s) in map.pairs() {
                        assert_eq!(pos[k], orig[s]);
                        if let Some(p) = prev {
                            assert!(s > p);
                        }
                        prev = Some(s);
                    }
                    checked += 1;
                }
                (Err(_), None) => {}
                (got, want) => {
                    panic!("disagreement for pos={pos:?} orig={orig:?}: impl={got:?} oracle={want:?}")
                }
            }
        }
        assert!(checked > 200, "only {checked} feasible fixtures");
    }

    #[test]
    fn total_loss_sums_parts() {
        let b = total_loss(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(b.total, 4.0);
        let z = total_loss(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(z.total, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let parts: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 3.0).collect();
            let b = total_loss(parts[0], parts[1], parts[2], parts[3]).unwrap();
            assert!((b.total - parts.iter().sum::<f64>()).abs() < 1e-9);
        }
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn ce_losses_on_rigged_lms() {
        use crate::encoder::ConceptEmbedding;
        use crate::lm::AugmentedLm;

        let tok = WordTokenizer::from_corpus(&["a b c d"]);
        let lm = RiggedLm::uniform(tok.clone(), 4);
        let zero = ConceptEmbedding {
            e_in: vec![0.0; lm.d],
            e_out: vec![0.0; lm.d],
            k_used: 1,
            concept_label: "x".into(),
        };
        let aug = AugmentedLm::augment(&lm, &zero).unwrap();
        let v1 = aug.vocab_size() as f64;
        let pos = aug.splice("a <nonce> b");
        let neg = aug.splice("a c d");
        let (cp, cn) = compute_ce_losses(&aug, &pos, &neg).unwrap();
        assert!((cp - v1.ln()).abs() < 1e-6, "{cp} vs {}", v1.ln());
        assert!((cn - v1.ln()).abs() < 1e-6);

        // near-perfect prediction drives both terms to zero
        let mut lm2 = RiggedLm::uniform(tok.clone(), 4);
        let a = tok.id("a").unwrap() as usize;
        let b = tok.id("b").unwrap() as usize;
        let c = tok.id("c").unwrap() as usize;
        let d = tok.id("d").unwrap() as usize;
        let mut e_out = vec![0.0; lm2.d];
        e_out[a] = 60.0; // nonce predicted after "a"
        lm2.nonce_row[b] = 60.0; // "b" predicted after the nonce
        lm2.table.set(b, c, 60.0);
        lm2.table.set(c, d, 60.0);
        let ce = ConceptEmbedding {
            e_in: vec![0.0; lm2.d],
            e_out: e_out.iter().map(|&v| v as f32).collect(),
            k_used: 1,
            concept_label: "x".into(),
        };
        let aug2 = AugmentedLm::augment(&lm2, &ce).unwrap();
        let pos = aug2.splice("a <nonce> b");
        let neg = aug2.splice("b c d");
        let (cp, cn) = compute_ce_losses(&aug2, &pos, &neg).unwrap();
        assert!(cp < 1e-6, "{cp}");
        assert!(cn < 1e-6, "{cn}");

        // preconditions
        assert!(compute_ce_losses(&aug2, &neg, &neg).is_err());
        assert!(compute_ce_losses(&aug2, &pos, &pos).is_err());
    }

    #[test]
    fn ce_losses_match_scalar_loop_oracle_on_tiny_lm() {
        use crate::encoder::ConceptEmbedding;
        use crate::lm::AugmentedLm;
        let tok = WordTokenizer::from_corpus(&["the dog ran far and fast"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lm = ToyCausalLm::new(
            &mut rng,
            tok,
            ToyModelConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq: 16,
            },
        );
        let ce = ConceptEmbedding {
            e_in: (0..16).map(|i| (i as f32) * 0.02).collect(),
            e_out: (0..16).map(|i| (i as f32) * -0.03).collect(),
            k_used: 1,
            concept_label: "x".into(),
        };
        let aug = AugmentedLm::augment(&lm, &ce).unwrap();
        let pos = aug.splice("the <nonce> ran");
        let neg = aug.splice("the dog ran far");
        let (cp, cn) = compute_ce_losses(&aug, &pos, &neg).unwrap();
        for (ids, got) in [(&pos, cp), (&neg, cn)] {
            let trace = aug.forward_trace(ids).unwrap();
            let mut want = 0.0;
            for t in 1..ids.len() {
                let row = trace.logits.row(t - 1);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln() + mx;
                want -= row[ids[t] as usize] - lse;
            }
            want /= (ids.len() - 1) as f64;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn distillation_zero_orthogonal_and_loop_oracle() {
        let mk = |states: Vec<Vec<f64>>, logits: Vec<Vec<f64>>| ForwardTrace {
            final_states: Tensor::from_rows(&states),
            logits: Tensor::from_rows(&logits),
        };
        // identical traces under the identity-ish map -> (0, 0)
        let t1 = mk(
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]],
        );
        let map = build_index_map(&[1, 99, 2], &[1, 7, 2], 99).unwrap();
        let t_orig = mk(
            vec![vec![1.0, 2.0], vec![9.0, 9.0], vec![5.0, 6.0]],
            vec![vec![0.1, 0.2], vec![9.0, 9.0], vec![0.5, 0.6]],
        );
        let (cos, mse) = compute_distillation(&t1, &t_orig, &map).unwrap();
        assert!(cos.abs() < 1e-6);
        assert!(mse.abs() < 1e-6);

        // orthogonal matched states -> cos = 1
        let t_pos = mk(
            vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]],
        );
        let t_orth = mk(
            vec![vec![0.0, 1.0], vec![7.0, 7.0], vec![1.0, 0.0]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]],
        );
        let (cos, _) = compute_distillation(&t_pos, &t_orth, &map).unwrap();
        assert!((cos - 1.0).abs() < 1e-6);

        // random traces agree with a per-position loop
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let randmat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Tensor::randn(rng, r, c, 1.0)
        };
        let pos_trace = ForwardTrace {
            final_states: randmat(&mut rng, 3, 5),
            logits: randmat(&mut rng, 3, 7), // V+1 columns
        };
        let orig_trace = ForwardTrace {
            final_states: randmat(&mut rng, 3, 5),
            logits: randmat(&mut rng, 3, 6), // V columns
        };
        let (cos, mse) = compute_distillation(&pos_trace, &orig_trace, &map).unwrap();
        let pairs = map.pairs();
        let mut cos_want = 0.0;
        let mut mse_want = 0.0;
        for (k, s) in &pairs {
            cos_want += 1.0
                - cosine(
                    pos_trace.final_states.row(*k),
                    orig_trace.final_states.row(*s),
                );
            let mut acc = 0.0;
            for c in 0..6 {
                let d = pos_trace.logits.get(*k, c) - orig_trace.logits.get(*s, c);
                acc += d * d;
            }
            mse_want += acc / 6.0;
        }
        cos_want /= pairs.len() as f64;
        mse_want /= pairs.len() as f64;
        assert!((cos - cos_want).abs() < 1e-6);
        assert!((mse - mse_want).abs() < 1e-6);

        // inconsistent map is rejected
        let bad_map = build_index_map(&[1, 99, 2, 3], &[1, 7, 2, 3], 99).unwrap();
        assert!(compute_distillation(&t1, &t_orig, &bad_map).is_err());
    }

    #[test]
    fn buffer_fifo_and_sampling_flow() {
        let mut buffer = ExampleBuffer::new(2);
        buffer.insert("c", "s1");
        buffer.insert("c", "s2");
        buffer.insert("c", "s3");
        let stored: Vec<&String> = buffer.sentences("c");
        assert_eq!(stored, vec!["s2", "s3"]);

        let record = |i: usize| EpisodeRecord {
            concept_surface: "pendant".into(),
            query_text: format!("The {NONCE} appeared {i}. It sat. It shone. Done."),
            original_text: format!("The pendant appeared {i}. It sat. It shone. Done."),
            support_sentences: vec![format!("A spare pendant support sentence number {i}.")],
            source_tag: "t".into(),
        };
        let pool = NegativePool::new(vec![
            "Something entirely different happened.".into(),
            "The pendant was elsewhere.".into(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut buffer = ExampleBuffer::new(2);

        // cold start: defer, one sentence buffered
        match sample_episode(&mut buffer, &record(1), &pool, 1, &mut rng).unwrap() {
            SampleOutcome::Deferred => {}
            other => panic!("expected deferral, got {other:?}"),
        }
        assert_eq!(buffer.len_for("pendant"), 1);

        // second sighting: emits with one support, buffer grows
        match sample_episode(&mut buffer, &record(2), &pool, 1, &mut rng).unwrap() {
            SampleOutcome::Emitted(ep) => {
                assert_eq!(ep.support_sentences.len(), 1);
                assert!(ep.support_sentences[0].contains("appeared 1"));
                assert!(!ep.negative_text.contains("pendant"));
                ep.validate(NONCE).unwrap();
            }
            other => panic!("expected episode, got {other:?}"),
        }
        assert_eq!(buffer.len_for("pendant"), 2);

        // negative pool refuses when every text mentions the surface form
        let poisoned = NegativePool::new(vec!["all about the pendant".into()]);
        assert!(poisoned.draw_without("pendant", &mut rng).is_err());
    }

    #[test]
    fn episode_validation_rules() {
        let ep = Episode {
            support_sentences: vec!["A pendant gleamed.".into()],
            positive_text: format!("The {NONCE} sat."),
            negative_text: "A dog ran.".into(),
            original_text: "The pendant sat.".into(),
            concept_surface: "pendant".into(),
        };
        ep.validate(NONCE).unwrap();

        let mut bad = ep.clone();
        bad.positive_text = "The thing sat.".into();
        assert!(bad.validate(NONCE).is_err());

        let mut bad = ep.clone();
        bad.negative_text = format!("A {NONCE} ran.");
        assert!(bad.validate(NONCE).is_err());

        let mut bad = ep.clone();
        bad.original_text = "A completely different sentence here.".into();
        assert!(bad.validate(NONCE).is_err());

        let mut bad = ep;
        bad.support_sentences.clear();
        assert!(bad.validate(NONCE).is_err());
    }

    #[test]
    fn select_checkpoint_rules() {
        let h = |id: &str, step, nce, lml| CheckpointMetrics {
            id: id.into(),
            step,
            new_token_ce: nce,
            lm_loss: lml,
            train_total: 0.0,
        };
        assert!(select_checkpoint(&[], None).is_err());
        let hist = vec![h("a", 100, 2.0, 3.0), h("b", 200, 1.5, 3.5)];
        assert_eq!(select_checkpoint(&hist, None).unwrap(), "b");
        // tie on new-token CE: lower LM loss wins
        let hist = vec![h("a", 100, 1.5, 3.0), h("b", 200, 1.5, 3.5)];
        assert_eq!(select_checkpoint(&hist, None).unwrap(), "a");
        // full tie: recency wins
        let hist = vec![h("a", 100, 1.5, 3.0), h("b", 200, 1.5, 3.0)];
        assert_eq!(select_checkpoint(&hist, None).unwrap(), "b");
        // override hook: argmax of the supplied score
        let hist = vec![h("a", 100, 1.0, 1.0), h("b", 200, 9.0, 9.0)];
        let over = vec![("a".to_string(), 0.31), ("b".to_string(), 0.44)];
        assert_eq!(select_checkpoint(&hist, Some(&over)).unwrap(), "b");
        let unknown = vec![("zz".to_string(), 1.0)];
        assert!(select_checkpoint(&hist, Some(&unknown)).is_err());
    }

    fn tiny_stack() -> (ToyCausalLm, ToyMaskedLm) {
        let corpus = [
            "the pendant glowed near the window",
            "a dog ran across the field",
            "the goblet stood on the table",
        ];
        let lm_tok = WordTokenizer::from_corpus(&corpus);
        let mlm_tok = WordTokenizer::from_corpus(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lm = ToyCausalLm::new(
            &mut rng,
            lm_tok,
            ToyModelConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq: 32,
            },
        );
        let mlm = ToyMaskedLm::new(
            &mut rng,
            mlm_tok,
            ToyModelConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq: 32,
            },
        );
        (lm, mlm)
    }

    fn tiny_encoder(lm: &ToyCausalLm, mlm: &ToyMaskedLm, seed: u64) -> ConceptEncoder {
        let cfg = EncoderConfig {
            mlm_checkpoint_id: "test".into(),
            n_attn_heads: 2,
            d_enc: mlm.d_enc(),
            d_ff: 32,
            init_target_in_norm: lm.avg_in_row_norm(),
            init_target_out_norm: lm.avg_out_row_norm(),
        };
        ConceptEncoder::new(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, 16, 16).unwrap()
    }

    fn tiny_episode() -> Episode {
        Episode {
            support_sentences: vec!["a pendant glowed near the table".into()],
            positive_text: format!("the {NONCE} glowed near the window"),
            negative_text: "a dog ran across the field".into(),
            original_text: "the pendant glowed near the window".into(),
            concept_surface: "pendant".into(),
        }
    }

    #[test]
    fn graph_losses_match_plain_losses() {
        let (lm, mlm) = tiny_stack();
        let encoder = tiny_encoder(&lm, &mlm, 11);
        let trainer = Trainer::new(encoder, &lm, &mlm, TrainConfig::default()).unwrap();
        let ep = tiny_episode();
        let b = trainer.episode_breakdown(&ep).unwrap();
        assert!((b.total - (b.ce_pos + b.ce_neg + b.cos + b.mse)).abs() < 1e-6);

        // recompute through the inference path
        let support = crate::encoder::SupportSet::new(
            vec![mask_concept(&ep.support_sentences[0], &["pendant"], &mlm.tokenizer).unwrap()],
            mlm.tokenizer.mask_id(),
        )
        .unwrap();
        let ce = crate::encoder::generate_concept_embedding(
            &trainer.encoder,
            &mlm,
            &support,
            "pendant",
        )
        .unwrap();
        let aug = crate::lm::AugmentedLm::augment(&lm, &ce).unwrap();
        let pos = aug.splice(&ep.positive_text);
        let neg = aug.splice(&ep.negative_text);
        let (cp, cn) = compute_ce_losses(&aug, &pos, &neg).unwrap();
        // f32 storage in ConceptEmbedding rounds the inference path
        assert!((cp - b.ce_pos).abs() < 1e-4, "{cp} vs {}", b.ce_pos);
        assert!((cn - b.ce_neg).abs() < 1e-4);

        let orig = aug.splice(&ep.original_text);
        let pos_trace = aug.forward_trace(&pos).unwrap();
        let (orig_logits, orig_states) = lm.trace_tensors(&orig, &[], &[]);
        let map = build_index_map(&pos, &orig, lm.base_vocab() as u32).unwrap();
        let (cos, mse) = compute_distillation(
            &pos_trace,
            &ForwardTrace {
                logits: orig_logits,
                final_states: orig_states,
            },
            &map,
        )
        .unwrap();
        assert!((cos - b.cos).abs() < 1e-4);
        assert!((mse - b.mse).abs() < 1e-4);
    }

    #[test]
    fn zero_lr_step_is_identity_and_frozen_models_stay_frozen() {
        let (lm, mlm) = tiny_stack();
        let encoder = tiny_encoder(&lm, &mlm, 12);
        let cfg = TrainConfig {
            steps: 100,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(encoder, &lm, &mlm, cfg).unwrap();
        // validate() requires a positive lr; force the null update after
        trainer.cfg.lr = 0.0;
        let before: Vec<Tensor> = trainer.encoder.params().iter().map(|p| (*p).clone()).collect();
        let lm_fp = lm.fingerprint();
        let mlm_fp = mlm.fingerprint();
        let ep = tiny_episode();
        let report = trainer.train_step(std::slice::from_ref(&ep)).unwrap();
        assert!(!report.skipped);
        for (b, a) in before.iter().zip(trainer.encoder.params()) {
            assert_eq!(b, a, "zero-lr step changed a parameter");
        }
        // ten real steps leave both frozen models bit-identical
        trainer.cfg.lr = 1e-3;
        for _ in 0..10 {
            trainer.train_step(std::slice::from_ref(&ep)).unwrap();
        }
        assert_eq!(lm.fingerprint(), lm_fp);
        assert_eq!(mlm.fingerprint(), mlm_fp);
        // and the encoder did move this time
        let moved = before
            .iter()
            .zip(trainer.encoder.params())
            .any(|(b, a)| b != a);
        assert!(moved);
    }

    #[test]
    fn repeated_steps_reduce_the_loss() {
        let (lm, mlm) = tiny_stack();
        let encoder = tiny_encoder(&lm, &mlm, 13);
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 1,
            lr: 3e-3,
            weight_decay: 0.0,
            warmup_steps: Some(5),
            held_out: 0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(encoder, &lm, &mlm, cfg).unwrap();
        let ep = tiny_episode();
        let first = trainer.train_step(std::slice::from_ref(&ep)).unwrap().loss.total;
        let mut last = first;
        for _ in 0..199 {
            last = trainer.train_step(std::slice::from_ref(&ep)).unwrap().loss.total;
        }
        assert!(
            last < first,
            "loss did not decrease over 200 steps: {first} -> {last}"
        );
    }

    #[test]
    fn checkpoint_ledger_round_trip() {
        let (lm, mlm) = tiny_stack();
        let encoder = tiny_encoder(&lm, &mlm, 14);
        let dir = std::env::temp_dir().join("college_ckpt_test");
        let _ = std::fs::remove_dir_all(&dir);
        let m1 = CheckpointMetrics {
            id: checkpoint_id(10),
            step: 10,
            new_token_ce: 2.0,
            lm_loss: 3.0,
            train_total: 9.0,
        };
        let m2 = CheckpointMetrics {
            id: checkpoint_id(20),
            step: 20,
            new_token_ce: 1.0,
            lm_loss: 3.0,
            train_total: 7.0,
        };
        save_checkpoint(&dir, &encoder, &m1).unwrap();
        save_checkpoint(&dir, &encoder, &m2).unwrap();
        let ledger = read_ledger(&dir).unwrap();
        assert_eq!(ledger.len(), 2);
        assert_eq!(select_checkpoint(&ledger, None).unwrap(), checkpoint_id(20));
        let loaded = ConceptEncoder::load(&dir.join(format!("{}.ckpt", m2.id))).unwrap();
        assert_eq!(loaded.d_enc, 16);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
