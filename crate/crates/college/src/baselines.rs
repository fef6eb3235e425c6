//! Embedding providers: the trained generator itself plus the reference
//! baselines (Token Tuning, the Additive static-vector method with a fitted
//! cross-space map, and Prompting with norm-matched random rows). Every
//! provider satisfies one contract so the evaluation harnesses treat them
//! interchangeably, and any provider composes with prompting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;



use crate::encoder::{generate_concept_embedding, ConceptEmbedding, ConceptEncoder, SupportSet};
use crate::error::{CollegeError, Result};
use crate::lm::{mask_concept, splice_tokens, NONCE};
use crate::models::{LanguageModel, ToyCausalLm, ToyMaskedLm};
use crate::tensor::{norm, Graph, Tensor};
use crate::tok::{replace_surfaces, split_words};

/// What a provider hands the harness: the generated pair plus whether the
/// support sentences should also be placed in the LM context window.
#[derive(Clone, Debug)]
pub struct ProviderOutput {
    pub embedding: ConceptEmbedding,
    pub supports_in_context: bool,
}

/// Uniform contract consumed by all three harnesses.
pub trait EmbeddingProvider {
    fn name(&self) -> String;
    /// Builds the new token's embedding pair from raw support sentences
    /// containing the concept surface form.
    fn generate(
        &self,
        concept: &str,
        supports: &[String],
        rng: &mut dyn rand::Rng,
    ) -> Result<ProviderOutput>;
}

/// The trained generator behind the provider contract.
pub struct CollegeProvider<'a> {
    pub encoder: &'a ConceptEncoder,
    pub mlm: &'a ToyMaskedLm,
    pub in_context: bool,
}

impl EmbeddingProvider for CollegeProvider<'_> {
    fn name(&self) -> String {
        if self.in_context {
            "prompting+college".into()
        } else {
            "college".into()
        }
    }

    fn generate(
        &self,
        concept: &str,
        supports: &[String],
        _rng: &mut dyn rand::Rng,
    ) -> Result<ProviderOutput> {
        let sequences = supports
            .iter()
            .map(|s| mask_concept(s, &[concept], &self.mlm.tokenizer))
            .collect::<Result<Vec<_>>>()?;
        let support = SupportSet::new(sequences, self.mlm.tokenizer.mask_id())?;
        let embedding = generate_concept_embedding(self.encoder, self.mlm, &support, concept)?;
        Ok(ProviderOutput {
            embedding,
            supports_in_context: self.in_context,
        })
    }
}

/// Gradient-descent tuning of only the new token's input and output rows on
/// the support batch; everything else stays frozen.
pub struct TokenTuningProvider<'a> {
    pub lm: &'a ToyCausalLm,
    pub steps: usize,
    pub lr: f64,
    pub init: Option<ConceptEmbedding>,
    pub in_context: bool,
}

impl<'a> TokenTuningProvider<'a> {
    /// One step at lr 1e-3.
    pub fn tt1(lm: &'a ToyCausalLm) -> Self {
        TokenTuningProvider {
            lm,
            steps: 1,
            lr: 1e-3,
            init: None,
            in_context: false,
        }
    }

    /// Two steps at lr 3e-4.
    pub fn tt2(lm: &'a ToyCausalLm) -> Self {
        TokenTuningProvider {
            lm,
            steps: 2,
            lr: 3e-4,
            init: None,
            in_context: false,
        }
    }
}

impl EmbeddingProvider for TokenTuningProvider<'_> {
    fn name(&self) -> String {
        let base = format!("tt{}", self.steps);
        if self.in_context {
            format!("prompting+{base}")
        } else {
            base
        }
    }

    fn generate(
        &self,
        concept: &str,
        supports: &[String],
        rng: &mut dyn rand::Rng,
    ) -> Result<ProviderOutput> {
        let embedding = token_tune(
            self.lm,
            supports,
            concept,
            NONCE,
            self.steps,
            self.lr,
            self.init.clone(),
            rng,
        )?;
        Ok(ProviderOutput {
            embedding,
            supports_in_context: self.in_context,
        })
    }
}

/// `steps` full-batch gradient-descent updates of the new token's rows,
/// minimizing next-token cross entropy on the supports with the concept
/// spliced in. Returns the tuned pair; every other parameter is untouched.
#[allow(clippy::too_many_arguments)]
pub fn token_tune(
    lm: &ToyCausalLm,
    supports: &[String],
    concept: &str,
    placeholder: &str,
    steps: usize,
    lr: f64,
    init: Option<ConceptEmbedding>,
    rng: &mut dyn rand::Rng,
) -> Result<ConceptEmbedding> {
    if steps == 0 {
        return Err(CollegeError::InvalidInput(
            "token tuning needs at least one step".into(),
        ));
    }
    if supports.is_empty() {
        return Err(CollegeError::InvalidInput("no support sentences".into()));
    }
    let d = lm.cfg.d_model;
    let (mut e_in, mut e_out) = match init {
        Some(ce) => {
            if ce.e_in.len() != d || ce.e_out.len() != d {
                return Err(CollegeError::InvalidInput(
                    "init embedding width mismatch".into(),
                ));
            }
            (
                Tensor::row_vector(ce.e_in_f64()),
                Tensor::row_vector(ce.e_out_f64()),
            )
        }
        None => (
            norm_matched_random(rng, d, lm.avg_in_row_norm()),
            norm_matched_random(rng, d, lm.avg_out_row_norm()),
        ),
    };
    let v = lm.base_vocab() as u32;
    let bos = Some(lm.tokenizer.bos_id());
    let spliced: Vec<Vec<u32>> = supports
        .iter()
        .map(|s| {
            let text = replace_surfaces(s, &[concept], placeholder);
            let ids = splice_tokens(&text, &lm.tokenizer, placeholder, Some(v), bos);
            if !ids.contains(&v) {
                return Err(CollegeError::NotFound(format!(
                    "concept {concept:?} does not occur in support {s:?}"
                )));
            }
            if ids.len() < 2 || ids.len() > lm.cfg.max_seq {
                return Err(CollegeError::InvalidInput(
                    "support does not fit the model".into(),
                ));
            }
            Ok(ids)
        })
        .collect::<Result<Vec<_>>>()?;

    for _ in 0..steps {
        let mut g = Graph::new();
        let bound = lm.bind(&mut g, false);
        let ein = g.leaf(e_in.clone());
        let eout = g.leaf(e_out.clone());
        let mut losses = Vec::with_capacity(spliced.len());
        for ids in &spliced {
            let out = bound.forward(&mut g, ids, Some(ein), Some(eout));
            let rows: Vec<usize> = (0..ids.len() - 1).collect();
            let pred = g.select_rows(out.logits, &rows);
            let targets: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
            losses.push(g.cross_entropy_mean(pred, &targets));
        }
        let sum = g.add_scalars(&losses);
        let loss = g.scale(sum, 1.0 / spliced.len() as f64);
        if !g.value(loss).item().is_finite() {
            return Err(CollegeError::NonFinite(format!(
                "token tuning loss for {concept:?}"
            )));
        }
        let grads = g.backward(loss);
        let gin = grads.get_or_zeros(ein, (1, d));
        let gout = grads.get_or_zeros(eout, (1, d));
        if !gin.all_finite() || !gout.all_finite() {
            return Err(CollegeError::NonFinite(format!(
                "token tuning gradient for {concept:?}"
            )));
        }
        for (w, gr) in e_in.data_mut().iter_mut().zip(gin.data()) {
            *w -= lr * gr;
        }
        for (w, gr) in e_out.data_mut().iter_mut().zip(gout.data()) {
            *w -= lr * gr;
        }
    }
    Ok(ConceptEmbedding::from_f64(
        e_in.data(),
        e_out.data(),
        supports.len() as u32,
        concept,
    ))
}

fn norm_matched_random(mut rng: &mut dyn rand::Rng, d: usize, target: f64) -> Tensor {
    let mut t = Tensor::randn(&mut rng, 1, d, 1.0);
    let n = t.frob_norm().max(1e-12);
    t.scale_assign(target / n);
    t
}

/// Fixed word -> vector table (the static-embedding source for the Additive
/// baseline). Lookups of unknown words fail explicitly.
#[derive(Clone, Debug)]
pub struct StaticVectorTable {
    dim: usize,
    map: BTreeMap<String, Vec<f64>>,
}

impl StaticVectorTable {
    pub fn new(dim: usize) -> Self {
        StaticVectorTable {
            dim,
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, word: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(CollegeError::InvalidInput(format!(
                "vector for {word:?} has length {}, table dim is {}",
                v.len(),
                self.dim
            )));
        }
        self.map.insert(word.to_lowercase(), v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Result<&Vec<f64>> {
        self.map
            .get(&word.to_lowercase())
            .ok_or_else(|| CollegeError::NotFound(format!("word {word:?} not in static table")))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.map.contains_key(&word.to_lowercase())
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Text format: header `<count> <dim>`, then one `word v1 .. vd` line
    /// per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(|e| CollegeError::io(&p, e))?);
        writeln!(w, "{} {}", self.map.len(), self.dim).map_err(|e| CollegeError::io(&p, e))?;
        for (word, v) in &self.map {
            write!(w, "{word}").map_err(|e| CollegeError::io(&p, e))?;
            for x in v {
                write!(w, " {x:e}").map_err(|e| CollegeError::io(&p, e))?;
            }
            writeln!(w).map_err(|e| CollegeError::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let f = File::open(path).map_err(|e| CollegeError::io(&p, e))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| CollegeError::format(&p, "empty table file"))?
            .map_err(|e| CollegeError::io(&p, e))?;
        let mut parts = header.split_whitespace();
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CollegeError::format(&p, "bad header"))?;
        let dim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CollegeError::format(&p, "bad header"))?;
        let mut table = StaticVectorTable::new(dim);
        for line in lines {
            let line = line.map_err(|e| CollegeError::io(&p, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let word = it
                .next()
                .ok_or_else(|| CollegeError::format(&p, "missing word"))?;
            let v: Vec<f64> = it
                .map(|s| s.parse().map_err(|e| CollegeError::format(&p, format!("{e}"))))
                .collect::<Result<_>>()?;
            table.insert(word, v)?;
        }
        if table.len() != count {
            return Err(CollegeError::format(
                &p,
                format!("header said {count} entries, found {}", table.len()),
            ));
        }
        Ok(table)
    }
}

/// Affine maps from the static-vector space into the LM input and output
/// embedding spaces, least-squares fitted on shared-vocabulary pairs.
#[derive(Clone, Debug)]
pub struct CrossSpaceMap {
    /// [d_w2v × d_lm] plus a bias row each.
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub fitted: bool,
    /// Set when the normal equations needed ridge regularization.
    pub regularized: bool,
}

impl CrossSpaceMap {
    pub fn apply_in(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply(&self.w_in, &self.b_in, v)
    }

    pub fn apply_out(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply(&self.w_out, &self.b_out, v)
    }

    fn apply(&self, w: &Tensor, b: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(CollegeError::InvalidInput(
                "cross-space map used before fitting".into(),
            ));
        }
        if v.len() != w.rows() {
            return Err(CollegeError::InvalidInput(format!(
                "vector length {} does not match map input {}",
                v.len(),
                w.rows()
            )));
        }
        let y = Tensor::row_vector(v.to_vec()).matmul_raw(w);
        Ok(y.row(0).iter().zip(b.row(0)).map(|(a, c)| a + c).collect())
    }

    /// Binary persistence in the same style as the concept-embedding file.
    pub fn save(&self, path: &Path) -> Result<()> {
        use crate::fileio::*;
        let p = path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(|e| CollegeError::io(&p, e))?);
        w.write_all(b"CLGMAP\x01\x00")
            .map_err(|e| CollegeError::io(&p, e))?;
        write_u32(&mut w, &p, self.regularized as u32)?;
        for t in [&self.w_in, &self.b_in, &self.w_out, &self.b_out] {
            write_tensor(&mut w, &p, t)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        use crate::fileio::*;
        let p = path.display().to_string();
        let mut r = BufReader::new(File::open(path).map_err(|e| CollegeError::io(&p, e))?);
        expect_magic(&mut r, &p, b"CLGMAP\x01\x00")?;
        let regularized = read_u32(&mut r, &p)? != 0;
        let w_in = read_tensor(&mut r, &p)?;
        let b_in = read_tensor(&mut r, &p)?;
        let w_out = read_tensor(&mut r, &p)?;
        let b_out = read_tensor(&mut r, &p)?;
        Ok(CrossSpaceMap {
            w_in,
            b_in,
            w_out,
            b_out,
            fitted: true,
            regularized,
        })
    }
}

/// Least-squares fit of the two affine branches on tokens shared between
/// the static table and the LM vocabulary. A rank-deficient design falls
/// back to a ridge-regularized solve and flags it.
pub fn fit_cross_space_map(table: &StaticVectorTable, lm: &dyn LanguageModel) -> Result<CrossSpaceMap> {
    let shared: Vec<(String, u32)> = table
        .words()
        .filter_map(|w| lm.tok().id(w).map(|id| (w.clone(), id)))
        .collect();
    if shared.is_empty() {
        return Err(CollegeError::InvalidInput(
            "no shared tokens between the table and the model".into(),
        ));
    }
    let n = shared.len();
    let d = table.dim();
    // design matrix with a trailing ones column for the bias
    let mut x = Tensor::zeros(n, d + 1);
    let mut y_in = Tensor::zeros(n, lm.d_in());
    let mut y_out = Tensor::zeros(n, lm.d_out());
    for (r, (word, id)) in shared.iter().enumerate() {
        let v = table.lookup(word)?;
        x.row_mut(r)[..d].copy_from_slice(v);
        x.set(r, d, 1.0);
        y_in.row_mut(r).copy_from_slice(&lm.input_row(*id));
        y_out.row_mut(r).copy_from_slice(&lm.output_row(*id));
    }
    let (sol_in, reg_a) = solve_least_squares(&x, &y_in)?;
    let (sol_out, reg_b) = solve_least_squares(&x, &y_out)?;
    let split = |sol: Tensor| {
        let mut w = Tensor::zeros(d, sol.cols());
        for r in 0..d {
            w.row_mut(r).copy_from_slice(sol.row(r));
        }
        let b = Tensor::row_vector(sol.row(d).to_vec());
        (w, b)
    };
    let (w_in, b_in) = split(sol_in);
    let (w_out, b_out) = split(sol_out);
    Ok(CrossSpaceMap {
        w_in,
        b_in,
        w_out,
        b_out,
        fitted: true,
        regularized: reg_a || reg_b,
    })
}

/// Solves min ‖XW − Y‖² via the normal equations with Cholesky; retries
/// with a ridge term when the factorization breaks down. Returns the
/// solution and whether regularization was needed.
fn solve_least_squares(x: &Tensor, y: &Tensor) -> Result<(Tensor, bool)> {
    let xtx = x.matmul_tn_raw(x);
    let xty = x.matmul_tn_raw(y);
    if let Some(sol) = cholesky_solve(&xtx, &xty) {
        return Ok((sol, false));
    }
    let mut damped = xtx.clone();
    let mean_diag = (0..damped.rows()).map(|i| damped.get(i, i)).sum::<f64>()
        / damped.rows() as f64;
    let ridge = (mean_diag * 1e-3).max(1e-6);
    for i in 0..damped.rows() {
        damped.set(i, i, damped.get(i, i) + ridge);
    }
    match cholesky_solve(&damped, &xty) {
        Some(sol) => Ok((sol, true)),
        None => Err(CollegeError::InvalidInput(
            "least-squares system could not be solved".into(),
        )),
    }
}

/// Cholesky factorization + triangular solves; `None` when the matrix is
/// not positive definite.
fn cholesky_solve(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 1e-12 {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    // forward substitution L Z = B, then backward Lᵀ W = Z
    let m = b.cols();
    let mut z = Tensor::zeros(n, m);
    for i in 0..n {
        for c in 0..m {
            let mut s = b.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * z.get(k, c);
            }
            z.set(i, c, s / l.get(i, i));
        }
    }
    let mut w = Tensor::zeros(n, m);
    for i in (0..n).rev() {
        for c in 0..m {
            let mut s = z.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * w.get(k, c);
            }
            w.set(i, c, s / l.get(i, i));
        }
    }
    Some(w)
}

/// Sums the static vectors of every in-vocabulary context word across the
/// supports (the concept itself and the placeholder are excluded) and maps
/// the sum through both branches.
pub fn additive_embedding(
    supports: &[String],
    concept: &str,
    table: &StaticVectorTable,
    map: &CrossSpaceMap,
) -> Result<ConceptEmbedding> {
    if !map.fitted {
        return Err(CollegeError::InvalidInput(
            "cross-space map used before fitting".into(),
        ));
    }
    let mut sum = vec![0.0; table.dim()];
    let mut hits = 0usize;
    for s in supports {
        for w in split_words(s) {
            if w == NONCE || crate::tok::stem_match(&w, concept) {
                continue;
            }
            if let Ok(v) = table.lookup(&w) {
                for (a, b) in sum.iter_mut().zip(v) {
                    *a += b;
                }
                hits += 1;
            }
        }
    }
    if hits == 0 {
        return Err(CollegeError::InvalidInput(format!(
            "no in-vocabulary context words for {concept:?}"
        )));
    }
    let e_in = map.apply_in(&sum)?;
    let e_out = map.apply_out(&sum)?;
    Ok(ConceptEmbedding::from_f64(
        &e_in,
        &e_out,
        supports.len() as u32,
        concept,
    ))
}

pub struct AdditiveProvider<'a> {
    pub table: &'a StaticVectorTable,
    pub map: &'a CrossSpaceMap,
    pub in_context: bool,
}

impl EmbeddingProvider for AdditiveProvider<'_> {
    fn name(&self) -> String {
        if self.in_context {
            "prompting+additive".into()
        } else {
            "additive".into()
        }
    }

    fn generate(
        &self,
        concept: &str,
        supports: &[String],
        _rng: &mut dyn rand::Rng,
    ) -> Result<ProviderOutput> {
        Ok(ProviderOutput {
            embedding: additive_embedding(supports, concept, self.table, self.map)?,
            supports_in_context: self.in_context,
        })
    }
}

/// Random rows scaled to the LM's average input/output row norms, with the
/// supports placed in the context window.
pub struct PromptingProvider {
    pub avg_in_norm: f64,
    pub avg_out_norm: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl PromptingProvider {
    pub fn for_model(lm: &dyn LanguageModel) -> Self {
        PromptingProvider {
            avg_in_norm: lm.avg_in_row_norm(),
            avg_out_norm: lm.avg_out_row_norm(),
            d_in: lm.d_in(),
            d_out: lm.d_out(),
        }
    }
}

impl EmbeddingProvider for PromptingProvider {
    fn name(&self) -> String {
        "prompting".into()
    }

    fn generate(
        &self,
        concept: &str,
        supports: &[String],
        rng: &mut dyn rand::Rng,
    ) -> Result<ProviderOutput> {
        let e_in = norm_matched_random(rng, self.d_in, self.avg_in_norm);
        let e_out = norm_matched_random(rng, self.d_out, self.avg_out_norm);
        Ok(ProviderOutput {
            embedding: ConceptEmbedding::from_f64(
                e_in.data(),
                e_out.data(),
                supports.len() as u32,
                concept,
            ),
            supports_in_context: true,
        })
    }
}

/// Wraps any provider and forces its supports into the context window
/// (the prompting+X composition).
pub struct PromptingPlus<'a> {
    pub inner: &'a dyn EmbeddingProvider,
}

impl EmbeddingProvider for PromptingPlus<'_> {
    fn name(&self) -> String {
        format!("prompting+{}", self.inner.name())
    }

    fn generate(
        &self,
        concept: &str,
        supports: &[String],
        rng: &mut dyn rand::Rng,
    ) -> Result<ProviderOutput> {
        let mut out = self.inner.generate(concept, supports, rng)?;
        out.supports_in_context = true;
        Ok(out)
    }
}

pub fn embedding_norms(ce: &ConceptEmbedding) -> (f64, f64) {
    (norm(&ce.e_in_f64()), norm(&ce.e_out_f64()))
}
