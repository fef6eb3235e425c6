//! Toy frozen models: a small autoregressive transformer LM, a small
//! bidirectional masked LM used for feature extraction, and a table-driven
//! rigged LM for harness tests. All models run in f64 on the CPU.
//!
//! The real-scale counterparts (a 7B decoder, a RoBERTa-class encoder) are
//! out of reach on a workstation; everything here implements the same
//! contracts at desk scale so the full pipeline can be exercised end to end.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::prelude::IndexedRandom;
use rand::{Rng, RngExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CollegeError, Result};
use crate::fileio::*;
use crate::nn::{
    clip_global_norm, fingerprint_params, AdamW, BoundLayerNorm, BoundTransformerLayer, LayerNorm,
    TransformerLayer,
};
use crate::tensor::{Graph, Tensor, Var};
use crate::tok::WordTokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ToyModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            max_seq: 64,
        }
    }
}

/// A frozen autoregressive language model handle. Implementations expose
/// enough structure for embedding splicing, scoring, generation and the
/// cross-space baselines.
pub trait LanguageModel {
    fn tok(&self) -> &WordTokenizer;
    /// Vocabulary size before any concept rows are appended.
    fn base_vocab(&self) -> usize;
    fn d_in(&self) -> usize;
    fn d_out(&self) -> usize;
    fn max_seq(&self) -> usize;
    /// Id prepended to every spliced sequence, when the model uses one.
    fn bos_id(&self) -> Option<u32>;
    /// Pre-softmax logits `[T × (V + extra)]` and final hidden states
    /// `[T × d_out]` for the sequence, with the given extra embedding rows
    /// appended to the input and output matrices.
    fn trace_tensors(
        &self,
        ids: &[u32],
        extra_in: &[Vec<f64>],
        extra_out: &[Vec<f64>],
    ) -> (Tensor, Tensor);
    fn input_row(&self, id: u32) -> Vec<f64>;
    fn output_row(&self, id: u32) -> Vec<f64>;
    fn avg_in_row_norm(&self) -> f64;
    fn avg_out_row_norm(&self) -> f64;
    /// Bit-level checksum over every frozen parameter.
    fn fingerprint(&self) -> u64;
}

const LM_MAGIC: &[u8; 8] = b"CLGLM\x01\x00\x00";
const MLM_MAGIC: &[u8; 8] = b"CLGMLM\x01\x00";

/// Small decoder-only transformer with untied input and output embedding
/// matrices.
#[derive(Clone, Debug)]
pub struct ToyCausalLm {
    pub cfg: ToyModelConfig,
    pub tokenizer: WordTokenizer,
    /// [V × d]
    pub emb_in: Tensor,
    /// [V × d] unembedding rows; logits = states · emb_outᵀ
    pub emb_out: Tensor,
    /// [max_seq × d] learned positions
    pub pos: Tensor,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
}

impl ToyCausalLm {
    pub fn new(rng: &mut impl Rng, tokenizer: WordTokenizer, cfg: ToyModelConfig) -> Self {
        let v = tokenizer.vocab_size();
        let d = cfg.d_model;
        ToyCausalLm {
            cfg,
            tokenizer,
            emb_in: Tensor::randn(rng, v, d, 0.5 / (d as f64).sqrt()),
            emb_out: Tensor::randn(rng, v, d, 0.5 / (d as f64).sqrt()),
            pos: Tensor::randn(rng, cfg.max_seq, d, 0.02),
            layers: (0..cfg.n_layers)
                .map(|_| TransformerLayer::new(rng, d, cfg.n_heads, cfg.d_ff))
                .collect(),
            final_ln: LayerNorm::new(d),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.emb_in, &self.emb_out, &self.pos];
        for l in &self.layers {
            p.extend(l.params());
        }
        p.extend(self.final_ln.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.emb_in, &mut self.emb_out, &mut self.pos];
        for l in &mut self.layers {
            p.extend(l.params_mut());
        }
        p.extend(self.final_ln.params_mut());
        p
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundCausalLm {
        let (emb_in, emb_out, pos) = if trainable {
            (
                g.leaf(self.emb_in.clone()),
                g.leaf(self.emb_out.clone()),
                g.leaf(self.pos.clone()),
            )
        } else {
            (
                g.constant(self.emb_in.clone()),
                g.constant(self.emb_out.clone()),
                g.constant(self.pos.clone()),
            )
        };
        BoundCausalLm {
            emb_in,
            emb_out,
            pos,
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
            final_ln: self.final_ln.bind(g, trainable),
            base_vocab: self.tokenizer.vocab_size(),
            d_model: self.cfg.d_model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(|e| CollegeError::io(&p, e))?);
        use std::io::Write;
        w.write_all(LM_MAGIC).map_err(|e| CollegeError::io(&p, e))?;
        write_model_body(
            &mut w,
            &p,
            &self.cfg,
            &self.tokenizer,
            &self.params().iter().map(|t| (*t).clone()).collect::<Vec<_>>(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut r = BufReader::new(File::open(path).map_err(|e| CollegeError::io(&p, e))?);
        expect_magic(&mut r, &p, LM_MAGIC)?;
        let (cfg, tokenizer, tensors) = read_model_body(&mut r, &p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lm = ToyCausalLm::new(&mut rng, tokenizer, cfg);
        assign_params(lm.params_mut(), tensors, &p)?;
        Ok(lm)
    }
}

impl LanguageModel for ToyCausalLm {
    fn tok(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    fn base_vocab(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn d_in(&self) -> usize {
        self.cfg.d_model
    }

    fn d_out(&self) -> usize {
        self.cfg.d_model
    }

    fn max_seq(&self) -> usize {
        self.cfg.max_seq
    }

    fn bos_id(&self) -> Option<u32> {
        Some(self.tokenizer.bos_id())
    }

    fn trace_tensors(
        &self,
        ids: &[u32],
        extra_in: &[Vec<f64>],
        extra_out: &[Vec<f64>],
    ) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let (ein, eout) = bind_extra_rows(&mut g, self.cfg.d_model, extra_in, extra_out, false);
        let out = bound.forward(&mut g, ids, ein, eout);
        (g.value(out.logits).clone(), g.value(out.states).clone())
    }

    fn input_row(&self, id: u32) -> Vec<f64> {
        self.emb_in.row(id as usize).to_vec()
    }

    fn output_row(&self, id: u32) -> Vec<f64> {
        self.emb_out.row(id as usize).to_vec()
    }

    fn avg_in_row_norm(&self) -> f64 {
        avg_row_norm(&self.emb_in)
    }

    fn avg_out_row_norm(&self) -> f64 {
        avg_row_norm(&self.emb_out)
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_params(&self.params())
    }
}

pub fn avg_row_norm(m: &Tensor) -> f64 {
    let mut total = 0.0;
    for r in 0..m.rows() {
        total += crate::tensor::norm(m.row(r));
    }
    total / m.rows() as f64
}

/// Inserts concept rows into a graph, returning the stacked extra input and
/// output matrices (empty if no rows).
pub fn bind_extra_rows(
    g: &mut Graph,
    d: usize,
    extra_in: &[Vec<f64>],
    extra_out: &[Vec<f64>],
    trainable: bool,
) -> (Option<Var>, Option<Var>) {
    let make = |g: &mut Graph, rows: &[Vec<f64>]| {
        if rows.is_empty() {
            return None;
        }
        for r in rows {
            assert_eq!(r.len(), d, "extra row width mismatch");
        }
        let t = Tensor::from_rows(rows);
        Some(if trainable { g.leaf(t) } else { g.constant(t) })
    };
    (make(g, extra_in), make(g, extra_out))
}

pub struct LmGraphOutput {
    /// [T × (V + extra)] pre-softmax logits
    pub logits: Var,
    /// [T × d] final hidden states (after the final layer norm)
    pub states: Var,
}

pub struct BoundCausalLm {
    pub emb_in: Var,
    pub emb_out: Var,
    pub pos: Var,
    pub layers: Vec<BoundTransformerLayer>,
    pub final_ln: BoundLayerNorm,
    base_vocab: usize,
    d_model: usize,
}

impl BoundCausalLm {
    /// Causal forward pass. `extra_in`/`extra_out` are optional `[k × d]`
    /// matrices of appended concept rows; ids may then refer to `V..V+k`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[u32],
        extra_in: Option<Var>,
        extra_out: Option<Var>,
    ) -> LmGraphOutput {
        assert!(!ids.is_empty(), "empty sequence");
        let emb_in_full = match extra_in {
            Some(e) => g.concat_rows(&[self.emb_in, e]),
            None => self.emb_in,
        };
        let emb_out_full = match extra_out {
            Some(e) => g.concat_rows(&[self.emb_out, e]),
            None => self.emb_out,
        };
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let max_id = *idx.iter().max().unwrap();
        assert!(
            max_id < g.value(emb_in_full).rows(),
            "token id {max_id} out of range"
        );
        let x = g.select_rows(emb_in_full, &idx);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.select_rows(self.pos, &positions);
        let mut x = g.add(x, pos);
        for layer in &self.layers {
            x = layer.forward(g, x, true);
        }
        let states = self.final_ln.forward(g, x);
        let logits = g.matmul_nt(states, emb_out_full);
        LmGraphOutput { logits, states }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.emb_in, self.emb_out, self.pos];
        for l in &self.layers {
            v.extend(l.vars());
        }
        v.extend(self.final_ln.vars());
        v
    }

    pub fn base_vocab(&self) -> usize {
        self.base_vocab
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

/// Small bidirectional transformer used as the frozen feature extractor.
#[derive(Clone, Debug)]
pub struct ToyMaskedLm {
    pub cfg: ToyModelConfig,
    pub tokenizer: WordTokenizer,
    /// [V × d], tied for the masked-prediction head
    pub emb: Tensor,
    pub pos: Tensor,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
}

impl ToyMaskedLm {
    pub fn new(rng: &mut impl Rng, tokenizer: WordTokenizer, cfg: ToyModelConfig) -> Self {
        let v = tokenizer.vocab_size();
        let d = cfg.d_model;
        ToyMaskedLm {
            cfg,
            tokenizer,
            emb: Tensor::randn(rng, v, d, 0.5 / (d as f64).sqrt()),
            pos: Tensor::randn(rng, cfg.max_seq, d, 0.02),
            layers: (0..cfg.n_layers)
                .map(|_| TransformerLayer::new(rng, d, cfg.n_heads, cfg.d_ff))
                .collect(),
            final_ln: LayerNorm::new(d),
        }
    }

    pub fn d_enc(&self) -> usize {
        self.cfg.d_model
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.emb, &self.pos];
        for l in &self.layers {
            p.extend(l.params());
        }
        p.extend(self.final_ln.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.emb, &mut self.pos];
        for l in &mut self.layers {
            p.extend(l.params_mut());
        }
        p.extend(self.final_ln.params_mut());
        p
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_params(&self.params())
    }

    /// Contextual states `[n × d_enc]` for a token sequence; inference only.
    pub fn encode(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(CollegeError::InvalidInput(
                "cannot encode an empty sequence".into(),
            ));
        }
        if ids.len() > self.cfg.max_seq {
            return Err(CollegeError::InvalidInput(format!(
                "sequence length {} exceeds max {}",
                ids.len(),
                self.cfg.max_seq
            )));
        }
        let mut g = Graph::new();
        let states = self.encode_graph(&mut g, ids);
        Ok(g.value(states).clone())
    }

    /// Same forward as [`encode`], expressed inside an existing graph. The
    /// extractor is frozen, so everything enters as constants.
    pub fn encode_graph(&self, g: &mut Graph, ids: &[u32]) -> Var {
        let emb = g.constant(self.emb.clone());
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.select_rows(emb, &idx);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos_all = g.constant(self.pos.clone());
        let pos = g.select_rows(pos_all, &positions);
        let mut x = g.add(x, pos);
        for layer in &self.layers {
            let bound = layer.bind(g, false);
            x = bound.forward(g, x, false);
        }
        let bound_ln = self.final_ln.bind(g, false);
        bound_ln.forward(g, x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(|e| CollegeError::io(&p, e))?);
        use std::io::Write;
        w.write_all(MLM_MAGIC).map_err(|e| CollegeError::io(&p, e))?;
        write_model_body(
            &mut w,
            &p,
            &self.cfg,
            &self.tokenizer,
            &self.params().iter().map(|t| (*t).clone()).collect::<Vec<_>>(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut r = BufReader::new(File::open(path).map_err(|e| CollegeError::io(&p, e))?);
        expect_magic(&mut r, &p, MLM_MAGIC)?;
        let (cfg, tokenizer, tensors) = read_model_body(&mut r, &p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlm = ToyMaskedLm::new(&mut rng, tokenizer, cfg);
        assign_params(mlm.params_mut(), tensors, &p)?;
        Ok(mlm)
    }
}

fn write_model_body(
    w: &mut impl std::io::Write,
    path: &str,
    cfg: &ToyModelConfig,
    tok: &WordTokenizer,
    params: &[Tensor],
) -> Result<()> {
    for v in [
        cfg.d_model as u32,
        cfg.n_layers as u32,
        cfg.n_heads as u32,
        cfg.d_ff as u32,
        cfg.max_seq as u32,
    ] {
        write_u32(w, path, v)?;
    }
    write_u32(w, path, tok.vocab_size() as u32)?;
    for word in tok.words() {
        write_string(w, path, word)?;
    }
    write_u32(w, path, params.len() as u32)?;
    for t in params {
        write_tensor(w, path, t)?;
    }
    Ok(())
}

fn read_model_body(
    r: &mut impl std::io::Read,
    path: &str,
) -> Result<(ToyModelConfig, WordTokenizer, Vec<Tensor>)> {
    let d_model = read_u32(r, path)? as usize;
    let n_layers = read_u32(r, path)? as usize;
    let n_heads = read_u32(r, path)? as usize;
    let d_ff = read_u32(r, path)? as usize;
    let max_seq = read_u32(r, path)? as usize;
    let vocab = read_u32(r, path)? as usize;
    let mut words = Vec::with_capacity(vocab);
    for _ in 0..vocab {
        words.push(read_string(r, path)?);
    }
    // The first four words are the specials; from_words re-adds them.
    let tok = WordTokenizer::from_words(words.into_iter().skip(4));
    if tok.vocab_size() != vocab {
        return Err(CollegeError::format(path, "vocabulary mismatch"));
    }
    let n_params = read_u32(r, path)? as usize;
    let mut tensors = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        tensors.push(read_tensor(r, path)?);
    }
    Ok((
        ToyModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq,
        },
        tok,
        tensors,
    ))
}

fn assign_params(slots: Vec<&mut Tensor>, tensors: Vec<Tensor>, path: &str) -> Result<()> {
    if slots.len() != tensors.len() {
        return Err(CollegeError::format(
            path,
            format!("expected {} tensors, found {}", slots.len(), tensors.len()),
        ));
    }
    for (slot, t) in slots.into_iter().zip(tensors) {
        if slot.shape() != t.shape() {
            return Err(CollegeError::format(path, "tensor shape mismatch"));
        }
        *slot = t;
    }
    Ok(())
}

/// Next-token pretraining for the toy LM. Returns the loss curve.
pub fn pretrain_causal_lm(
    lm: &mut ToyCausalLm,
    texts: &[String],
    steps: u64,
    batch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut opt = AdamW::new(lr, 0.01);
    let mut curve = Vec::new();
    let encoded: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| {
            let mut ids = vec![lm.tokenizer.bos_id()];
            ids.extend(lm.tokenizer.encode(t));
            ids.push(lm.tokenizer.eos_id());
            ids.truncate(lm.cfg.max_seq);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect();
    assert!(!encoded.is_empty(), "no usable pretraining sequences");
    for step in 0..steps {
        let mut grad_sum: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..batch {
            let ids = encoded.choose(rng).unwrap();
            let mut g = Graph::new();
            let bound = lm.bind(&mut g, true);
            let out = bound.forward(&mut g, ids, None, None);
            let t = ids.len();
            let rows: Vec<usize> = (0..t - 1).collect();
            let pred = g.select_rows(out.logits, &rows);
            let targets: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
            let loss = g.cross_entropy_mean(pred, &targets);
            loss_sum += g.value(loss).item();
            let grads = g.backward(loss);
            let vars = bound.vars();
            let these: Vec<Tensor> = vars
                .iter()
                .zip(lm.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            match &mut grad_sum {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&these) {
                        a.add_assign(b);
                    }
                }
                None => grad_sum = Some(these),
            }
        }
        let mut grads = grad_sum.unwrap();
        for gr in &mut grads {
            gr.scale_assign(1.0 / batch as f64);
        }
        clip_global_norm(&mut grads, 1.0);
        opt.step(&mut lm.params_mut(), &grads);
        let _ = step;
        curve.push(loss_sum / batch as f64);
    }
    curve
}

/// Masked-token pretraining for the toy MLM (tied-embedding prediction
/// head). Returns the loss curve.
pub fn pretrain_masked_lm(
    mlm: &mut ToyMaskedLm,
    texts: &[String],
    steps: u64,
    batch: usize,
    lr: f64,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut opt = AdamW::new(lr, 0.01);
    let mut curve = Vec::new();
    let encoded: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| {
            let mut ids = mlm.tokenizer.encode(t);
            ids.truncate(mlm.cfg.max_seq);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect();
    assert!(!encoded.is_empty(), "no usable pretraining sequences");
    for _ in 0..steps {
        let mut grad_sum: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..batch {
            let clean = encoded.choose(rng).unwrap().clone();
            let mut masked = clean.clone();
            let mut positions = Vec::new();
            for (i, id) in masked.iter_mut().enumerate() {
                if rng.random::<f64>() < mask_prob {
                    *id = mlm.tokenizer.mask_id();
                    positions.push(i);
                }
            }
            if positions.is_empty() {
                let i = rng.random_range(0..masked.len());
                masked[i] = mlm.tokenizer.mask_id();
                positions.push(i);
            }
            let mut g = Graph::new();
            // Trainable pass: bind everything by hand so gradients reach
            // the embedding and the layers.
            let emb = g.leaf(mlm.emb.clone());
            let pos_all = g.leaf(mlm.pos.clone());
            let idx: Vec<usize> = masked.iter().map(|&i| i as usize).collect();
            let x0 = g.select_rows(emb, &idx);
            let prange: Vec<usize> = (0..masked.len()).collect();
            let posv = g.select_rows(pos_all, &prange);
            let mut x = g.add(x0, posv);
            let mut layer_vars = Vec::new();
            for layer in &mlm.layers {
                let bound = layer.bind(&mut g, true);
                layer_vars.extend(bound.vars());
                x = bound.forward(&mut g, x, false);
            }
            let bound_ln = mlm.final_ln.bind(&mut g, true);
            let ln_vars = bound_ln.vars();
            let states = bound_ln.forward(&mut g, x);
            let picked = g.select_rows(states, &positions);
            let logits = g.matmul_nt(picked, emb);
            let targets: Vec<usize> = positions.iter().map(|&i| clean[i] as usize).collect();
            let loss = g.cross_entropy_mean(logits, &targets);
            loss_sum += g.value(loss).item();
            let grads = g.backward(loss);
            let mut vars = vec![emb, pos_all];
            vars.extend(layer_vars);
            vars.extend(ln_vars);
            let these: Vec<Tensor> = vars
                .iter()
                .zip(mlm.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            match &mut grad_sum {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&these) {
                        a.add_assign(b);
                    }
                }
                None => grad_sum = Some(these),
            }
        }
        let mut grads = grad_sum.unwrap();
        for gr in &mut grads {
            gr.scale_assign(1.0 / batch as f64);
        }
        clip_global_norm(&mut grads, 1.0);
        opt.step(&mut mlm.params_mut(), &grads);
        curve.push(loss_sum / batch as f64);
    }
    curve
}

/// Table-driven model with exactly controllable logits, for harness tests.
/// States are one-hot in the current token; the logit of an appended
/// concept row at position `t` is therefore `e_out[token_t]`.
#[derive(Clone, Debug)]
pub struct RiggedLm {
    pub tokenizer: WordTokenizer,
    /// [V × V] bigram logits: row = current token, column = next token.
    pub table: Tensor,
    /// Logits emitted from a position holding an appended token.
    pub nonce_row: Vec<f64>,
    /// State dimension (≥ V so one-hot states exist for a few extra ids).
    pub d: usize,
}

impl RiggedLm {
    pub fn new(tokenizer: WordTokenizer, table: Tensor, extra_capacity: usize) -> Self {
        let v = tokenizer.vocab_size();
        assert_eq!(table.shape(), (v, v));
        RiggedLm {
            tokenizer,
            nonce_row: vec![0.0; v],
            table,
            d: v + extra_capacity,
        }
    }

    pub fn uniform(tokenizer: WordTokenizer, extra_capacity: usize) -> Self {
        let v = tokenizer.vocab_size();
        Self::new(tokenizer, Tensor::zeros(v, v), extra_capacity)
    }
}

impl LanguageModel for RiggedLm {
    fn tok(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    fn base_vocab(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn d_in(&self) -> usize {
        self.d
    }

    fn d_out(&self) -> usize {
        self.d
    }

    fn max_seq(&self) -> usize {
        usize::MAX
    }

    fn bos_id(&self) -> Option<u32> {
        None
    }

    fn trace_tensors(
        &self,
        ids: &[u32],
        _extra_in: &[Vec<f64>],
        extra_out: &[Vec<f64>],
    ) -> (Tensor, Tensor) {
        let v = self.base_vocab();
        let cols = v + extra_out.len();
        let mut logits = Tensor::zeros(ids.len(), cols);
        let mut states = Tensor::zeros(ids.len(), self.d);
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < v + extra_out.len(), "token id out of range");
            states.set(t, id.min(self.d - 1), 1.0);
            let base: &[f64] = if id < v {
                self.table.row(id)
            } else {
                &self.nonce_row
            };
            for (c, val) in base.iter().enumerate() {
                logits.set(t, c, *val);
            }
            for (j, row) in extra_out.iter().enumerate() {
                // dot(one-hot(id), e_out) = e_out[id]
                let val = if id < row.len() { row[id] } else { 0.0 };
                logits.set(t, v + j, val);
            }
        }
        (logits, states)
    }

    fn input_row(&self, id: u32) -> Vec<f64> {
        let mut r = vec![0.0; self.d];
        r[(id as usize).min(self.d - 1)] = 1.0;
        r
    }

    fn output_row(&self, id: u32) -> Vec<f64> {
        self.table
            .row(id as usize)
            .iter()
            .copied()
            .chain(std::iter::repeat(0.0))
            .take(self.d)
            .collect()
    }

    fn avg_in_row_norm(&self) -> f64 {
        1.0
    }

    fn avg_out_row_norm(&self) -> f64 {
        avg_row_norm(&self.table)
    }

    fn fingerprint(&self) -> u64 {
        let nr = Tensor::row_vector(self.nonce_row.clone());
        fingerprint_params(&[&self.table, &nr])
    }
}
