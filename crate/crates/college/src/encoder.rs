//! Concept embedding generation: a frozen masked LM extracts contextual
//! states from masked support sentences, a trainable self-attention layer
//! refines them, two-stage mean pooling collapses them to a single vector,
//! and a shared layer norm followed by two calibrated linear heads produces
//! the input/output embedding pair for the new token.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CollegeError, Result};
use crate::fileio::*;
use crate::models::ToyMaskedLm;
use crate::nn::{
    BoundLayerNorm, BoundLinear, BoundTransformerLayer, LayerNorm, Linear, TransformerLayer,
};
use crate::tensor::{gaussian, norm, Graph, Tensor, Var};

/// Masked support sequences for one concept.
#[derive(Clone, Debug)]
pub struct SupportSet {
    sequences: Vec<Vec<u32>>,
    mask_id: u32,
}

impl SupportSet {
    pub fn new(sequences: Vec<Vec<u32>>, mask_id: u32) -> Result<Self> {
        if sequences.is_empty() {
            return Err(CollegeError::InvalidInput(
                "support set needs at least one sequence".into(),
            ));
        }
        for (i, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(CollegeError::InvalidInput(format!(
                    "support sequence {i} has no tokens"
                )));
            }
            if !seq.contains(&mask_id) {
                return Err(CollegeError::InvalidInput(format!(
                    "support sequence {i} contains no mask token"
                )));
            }
        }
        Ok(SupportSet { sequences, mask_id })
    }

    pub fn k(&self) -> usize {
        self.sequences.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.len()).collect()
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }
}

/// Pooled embedding of a single support sequence.
#[derive(Clone, Debug)]
pub struct SequenceEmbedding {
    pub vector: Vec<f64>,
    pub source_index: usize,
}

/// The generated input/output pair for a new token, stored as 32-bit floats
/// (the on-disk format).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbedding {
    pub e_in: Vec<f32>,
    pub e_out: Vec<f32>,
    pub k_used: u32,
    pub concept_label: String,
}

const CE_MAGIC: &[u8; 8] = b"CLGCE\x01\x00\x00";

impl ConceptEmbedding {
    pub fn from_f64(e_in: &[f64], e_out: &[f64], k_used: u32, label: &str) -> Self {
        ConceptEmbedding {
            e_in: e_in.iter().map(|&v| v as f32).collect(),
            e_out: e_out.iter().map(|&v| v as f32).collect(),
            k_used,
            concept_label: label.to_string(),
        }
    }

    pub fn e_in_f64(&self) -> Vec<f64> {
        self.e_in.iter().map(|&v| v as f64).collect()
    }

    pub fn e_out_f64(&self) -> Vec<f64> {
        self.e_out.iter().map(|&v| v as f64).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(|e| CollegeError::io(&p, e))?);
        w.write_all(CE_MAGIC).map_err(|e| CollegeError::io(&p, e))?;
        write_u32(&mut w, &p, self.e_in.len() as u32)?;
        write_u32(&mut w, &p, self.e_out.len() as u32)?;
        write_u32(&mut w, &p, self.k_used)?;
        write_string(&mut w, &p, &self.concept_label)?;
        write_f32_slice(&mut w, &p, &self.e_in)?;
        write_f32_slice(&mut w, &p, &self.e_out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut r = BufReader::new(File::open(path).map_err(|e| CollegeError::io(&p, e))?);
        expect_magic(&mut r, &p, CE_MAGIC)?;
        let d_in = read_u32(&mut r, &p)? as usize;
        let d_out = read_u32(&mut r, &p)? as usize;
        let k_used = read_u32(&mut r, &p)?;
        let concept_label = read_string(&mut r, &p)?;
        let e_in = read_f32_vec(&mut r, &p, d_in)?;
        let e_out = read_f32_vec(&mut r, &p, d_out)?;
        Ok(ConceptEmbedding {
            e_in,
            e_out,
            k_used,
            concept_label,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mlm_checkpoint_id: String,
    pub n_attn_heads: usize,
    pub d_enc: usize,
    /// Feed-forward width of the extra attention layer.
    pub d_ff: usize,
    pub init_target_in_norm: f64,
    pub init_target_out_norm: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.n_attn_heads == 0 || !self.d_enc.is_multiple_of(self.n_attn_heads) {
            return Err(CollegeError::InvalidInput(format!(
                "d_enc {} must be a positive multiple of n_attn_heads {}",
                self.d_enc, self.n_attn_heads
            )));
        }
        if self.init_target_in_norm <= 0.0 || self.init_target_out_norm <= 0.0 {
            return Err(CollegeError::InvalidInput(
                "init target norms must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable encoder state: one extra self-attention layer over the frozen
/// extractor's states, a shared layer norm, and the two projection heads.
#[derive(Clone, Debug)]
pub struct ConceptEncoder {
    pub attn: TransformerLayer,
    pub ln: LayerNorm,
    pub proj_in: Linear,
    pub proj_out: Linear,
    pub d_enc: usize,
}

const ENC_MAGIC: &[u8; 8] = b"CLGENC\x01\x00";

impl ConceptEncoder {
    pub fn new(
        rng: &mut impl Rng,
        cfg: &EncoderConfig,
        d_lm_in: usize,
        d_lm_out: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(ConceptEncoder {
            attn: TransformerLayer::new(rng, cfg.d_enc, cfg.n_attn_heads, cfg.d_ff),
            ln: LayerNorm::new(cfg.d_enc),
            proj_in: init_projection(rng, cfg.d_enc, d_lm_in, cfg.init_target_in_norm)?,
            proj_out: init_projection(rng, cfg.d_enc, d_lm_out, cfg.init_target_out_norm)?,
            d_enc: cfg.d_enc,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.attn.params();
        p.extend(self.ln.params());
        p.extend(self.proj_in.params());
        p.extend(self.proj_out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.attn.params_mut();
        p.extend(self.ln.params_mut());
        p.extend(self.proj_in.params_mut());
        p.extend(self.proj_out.params_mut());
        p
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundConceptEncoder {
        BoundConceptEncoder {
            attn: self.attn.bind(g, trainable),
            ln: self.ln.bind(g, trainable),
            proj_in: self.proj_in.bind(g, trainable),
            proj_out: self.proj_out.bind(g, trainable),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(|e| CollegeError::io(&p, e))?);
        w.write_all(ENC_MAGIC).map_err(|e| CollegeError::io(&p, e))?;
        write_u32(&mut w, &p, self.d_enc as u32)?;
        write_u32(&mut w, &p, self.attn.attn.n_heads as u32)?;
        write_u32(&mut w, &p, self.proj_in.w.cols() as u32)?;
        write_u32(&mut w, &p, self.proj_out.w.cols() as u32)?;
        write_u32(&mut w, &p, self.attn.ff1.w.cols() as u32)?;
        let params = self.params();
        write_u32(&mut w, &p, params.len() as u32)?;
        for t in params {
            write_tensor(&mut w, &p, t)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut r = BufReader::new(File::open(path).map_err(|e| CollegeError::io(&p, e))?);
        expect_magic(&mut r, &p, ENC_MAGIC)?;
        let d_enc = read_u32(&mut r, &p)? as usize;
        let heads = read_u32(&mut r, &p)? as usize;
        let d_lm_in = read_u32(&mut r, &p)? as usize;
        let d_lm_out = read_u32(&mut r, &p)? as usize;
        let d_ff = read_u32(&mut r, &p)? as usize;
        let n = read_u32(&mut r, &p)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            tensors.push(read_tensor(&mut r, &p)?);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut enc = ConceptEncoder {
            attn: TransformerLayer::new(&mut rng, d_enc, heads, d_ff),
            ln: LayerNorm::new(d_enc),
            proj_in: Linear::new(&mut rng, d_enc, d_lm_in),
            proj_out: Linear::new(&mut rng, d_enc, d_lm_out),
            d_enc,
        };
        let slots = enc.params_mut();
        if slots.len() != tensors.len() {
            return Err(CollegeError::format(&p, "parameter count mismatch"));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(CollegeError::format(&p, "parameter shape mismatch"));
            }
            *slot = t;
        }
        Ok(enc)
    }
}

pub struct BoundConceptEncoder {
    pub attn: BoundTransformerLayer,
    pub ln: BoundLayerNorm,
    pub proj_in: BoundLinear,
    pub proj_out: BoundLinear,
}

impl BoundConceptEncoder {
    /// Self-attention layer over the extractor states, then mean pooling
    /// over every position (mask positions included, nothing is padded).
    pub fn encode_and_pool(&self, g: &mut Graph, mlm_states: Var) -> Var {
        let h = self.attn.forward(g, mlm_states, false);
        g.mean_rows(h)
    }

    /// Mean over the per-sequence embeddings.
    pub fn aggregate(&self, g: &mut Graph, embs: &[Var]) -> Var {
        assert!(!embs.is_empty());
        let stacked = g.concat_rows(embs);
        g.mean_rows(stacked)
    }

    /// Shared layer norm, then the two projection heads.
    pub fn project(&self, g: &mut Graph, e_new: Var) -> (Var, Var) {
        let normed = self.ln.forward(g, e_new);
        (
            self.proj_in.forward(g, normed),
            self.proj_out.forward(g, normed),
        )
    }

    /// Full pipeline over pre-computed extractor states, one per support.
    pub fn generate(&self, g: &mut Graph, support_states: &[Var]) -> (Var, Var) {
        let embs: Vec<Var> = support_states
            .iter()
            .map(|&s| self.encode_and_pool(g, s))
            .collect();
        let e_new = self.aggregate(g, &embs);
        self.project(g, e_new)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.attn.vars();
        v.extend(self.ln.vars());
        v.extend(self.proj_in.vars());
        v.extend(self.proj_out.vars());
        v
    }
}

/// Builds a projection whose expected output norm matches the target (the
/// average embedding-row norm of the frozen LM). The weight starts as a
/// random orthogonal map, so its gain is the same in every input direction
/// and the calibration survives the non-isotropic vectors the encoder
/// actually produces; a Monte-Carlo pass over normalized random inputs then
/// sets the scale. Uncalibrated layers start far larger and waste early
/// training shrinking the rows.
pub fn init_projection(
    rng: &mut impl Rng,
    d_enc: usize,
    d_out: usize,
    target_norm: f64,
) -> Result<Linear> {
    if target_norm <= 0.0 {
        return Err(CollegeError::InvalidInput(format!(
            "target norm must be positive, got {target_norm}"
        )));
    }
    let mut layer = Linear::new(rng, d_enc, d_out);
    orthogonalize(&mut layer.w);
    const SAMPLES: usize = 256;
    let mut mean_norm = 0.0;
    for _ in 0..SAMPLES {
        let z: Vec<f64> = (0..d_enc).map(|_| gaussian(rng)).collect();
        let x = standardize(&z);
        let y = Tensor::row_vector(x).matmul_raw(&layer.w);
        mean_norm += y.frob_norm();
    }
    mean_norm /= SAMPLES as f64;
    if mean_norm > 0.0 {
        layer.w.scale_assign(target_norm / mean_norm);
    }
    Ok(layer)
}

/// Gram-Schmidt on the smaller side of the matrix: orthonormal rows when
/// rows ≤ cols (an exact isometry), orthonormal columns otherwise.
fn orthogonalize(w: &mut Tensor) {
    let (rows, cols) = w.shape();
    if rows <= cols {
        for i in 0..rows {
            for j in 0..i {
                let dot: f64 = w.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
                let other: Vec<f64> = w.row(j).to_vec();
                for (a, b) in w.row_mut(i).iter_mut().zip(other) {
                    *a -= dot * b;
                }
            }
            let n = norm(w.row(i)).max(1e-12);
            for a in w.row_mut(i).iter_mut() {
                *a /= n;
            }
        }
    } else {
        let col = |w: &Tensor, c: usize| -> Vec<f64> { (0..rows).map(|r| w.get(r, c)).collect() };
        for i in 0..cols {
            for j in 0..i {
                let ci = col(w, i);
                let cj = col(w, j);
                let dot: f64 = ci.iter().zip(&cj).map(|(a, b)| a * b).sum();
                for r in 0..rows {
                    w.set(r, i, w.get(r, i) - dot * cj[r]);
                }
            }
            let n = norm(&col(w, i)).max(1e-12);
            for r in 0..rows {
                w.set(r, i, w.get(r, i) / n);
            }
        }
    }
}

/// Zero-mean unit-variance version of a vector (what the layer norm emits
/// with unit gain and zero shift).
fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + crate::nn::LN_EPS).sqrt();
    v.iter().map(|x| (x - mean) * inv).collect()
}

/// Mean state over all positions of one masked support sequence after the
/// extra attention layer. Fails when the sequence is empty or has no mask.
pub fn encode_and_pool(
    sequence: &[u32],
    mlm: &ToyMaskedLm,
    enc: &ConceptEncoder,
    source_index: usize,
) -> Result<SequenceEmbedding> {
    if sequence.is_empty() {
        return Err(CollegeError::InvalidInput(
            "sequence has zero non-padding tokens".into(),
        ));
    }
    if !sequence.contains(&mlm.tokenizer.mask_id()) {
        return Err(CollegeError::InvalidInput(
            "sequence contains no mask token".into(),
        ));
    }
    let states = mlm.encode(sequence)?;
    let mut g = Graph::new();
    let s = g.constant(states);
    let bound = enc.bind(&mut g, false);
    let pooled = bound.encode_and_pool(&mut g, s);
    let v = g.value(pooled);
    if !v.all_finite() {
        return Err(CollegeError::NonFinite("pooled sequence embedding".into()));
    }
    Ok(SequenceEmbedding {
        vector: v.row(0).to_vec(),
        source_index,
    })
}

/// Mean of the per-sequence embeddings; order independent.
pub fn aggregate(embs: &[SequenceEmbedding]) -> Result<Vec<f64>> {
    if embs.is_empty() {
        return Err(CollegeError::InvalidInput(
            "aggregate over an empty list".into(),
        ));
    }
    let d = embs[0].vector.len();
    if embs.iter().any(|e| e.vector.len() != d) {
        return Err(CollegeError::InvalidInput(
            "sequence embeddings have mixed lengths".into(),
        ));
    }
    let mut out = vec![0.0; d];
    for e in embs {
        for (o, v) in out.iter_mut().zip(&e.vector) {
            *o += v / embs.len() as f64;
        }
    }
    Ok(out)
}

/// Layer norm then the two affine heads, on plain data.
pub fn project(enc: &ConceptEncoder, e_new: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if e_new.len() != enc.d_enc {
        return Err(CollegeError::InvalidInput(format!(
            "expected width {}, got {}",
            enc.d_enc,
            e_new.len()
        )));
    }
    if e_new.iter().any(|v| !v.is_finite()) {
        return Err(CollegeError::NonFinite("projection input".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(e_new.to_vec()));
    let bound = enc.bind(&mut g, false);
    let (e_in, e_out) = bound.project(&mut g, x);
    Ok((
        g.value(e_in).row(0).to_vec(),
        g.value(e_out).row(0).to_vec(),
    ))
}

/// Runs the full pipeline on a support set in inference mode.
pub fn generate_concept_embedding(
    enc: &ConceptEncoder,
    mlm: &ToyMaskedLm,
    support: &SupportSet,
    concept_label: &str,
) -> Result<ConceptEmbedding> {
    let mut g = Graph::new();
    let mut state_vars = Vec::with_capacity(support.k());
    for seq in support.sequences() {
        if !seq.contains(&support.mask_id()) {
            return Err(CollegeError::InvalidInput(
                "support sequence lost its mask token".into(),
            ));
        }
        let states = mlm.encode(seq)?;
        state_vars.push(g.constant(states));
    }
    let bound = enc.bind(&mut g, false);
    let (e_in, e_out) = bound.generate(&mut g, &state_vars);
    let (vin, vout) = (g.value(e_in), g.value(e_out));
    if !vin.all_finite() || !vout.all_finite() {
        return Err(CollegeError::NonFinite("generated concept embedding".into()));
    }
    Ok(ConceptEmbedding::from_f64(
        vin.row(0),
        vout.row(0),
        support.k() as u32,
        concept_label,
    ))
}

/// Mean over the rows of a state matrix; the pooling stage in isolation.
pub fn pool_rows(states: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; states.cols()];
    for r in 0..states.rows() {
        for (o, v) in out.iter_mut().zip(states.row(r)) {
            *o += v / states.rows() as f64;
        }
    }
    out
}

pub fn vector_norm(v: &[f64]) -> f64 {
    norm(v)
}
