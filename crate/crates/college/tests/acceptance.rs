#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (visible with `--nocapture`). Independent oracles live in
//! this file and never call the code paths they check.
//!
//! Run with: cargo test -p college --test acceptance -- --nocapture

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use college::baselines::{EmbeddingProvider, ProviderOutput};
use college::data::{
    chunk_into_queries, clean_and_filter, gather_supports, split_sentences, Document,
    FilterConfig, FilterOutcome, FixedLangScorer, FixedPplScorer, RejectReason, SentenceIndex,
};
use college::encoder::{
    aggregate, generate_concept_embedding, ConceptEmbedding, ConceptEncoder, EncoderConfig,
    SequenceEmbedding, SupportSet,
};
use college::eval::{
    elo::{EloState, MatchResult, DEFAULT_K, INITIAL_RATING},
    eval_slang, score_multiple_choice, top_indices, GREChoice, GREItem, GREMode, SlangItem,
};
use college::lm::{mask_concept, AugmentedLm, ForwardTrace, NONCE};
use college::models::{
    pretrain_causal_lm, pretrain_masked_lm, LanguageModel, RiggedLm, ToyCausalLm, ToyMaskedLm,
    ToyModelConfig,
};
use college::synth;
use college::tok::WordTokenizer;
use college::train::{
    build_index_map, compute_ce_losses, compute_distillation, run_training, total_loss, Episode,
    TrainConfig, Trainer,
};

fn tiny_model_cfg(d: usize, layers: usize) -> ToyModelConfig {
    ToyModelConfig {
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        d_ff: 2 * d,
        max_seq: 48,
    }
}

fn tiny_stack(seed: u64, d: usize) -> (ToyCausalLm, ToyMaskedLm) {
    let corpus = [
        "the pendant glowed near the window",
        "a dog ran across the field today",
        "the goblet stood on the table",
        "a mote drifted in the light",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lm = ToyCausalLm::new(
        &mut rng,
        WordTokenizer::from_corpus(&corpus),
        tiny_model_cfg(d, 1),
    );
    let mlm = ToyMaskedLm::new(
        &mut rng,
        WordTokenizer::from_corpus(&corpus),
        tiny_model_cfg(d, 1),
    );
    (lm, mlm)
}

fn tiny_encoder(lm: &ToyCausalLm, mlm: &ToyMaskedLm, seed: u64) -> ConceptEncoder {
    let cfg = EncoderConfig {
        mlm_checkpoint_id: "fixture".into(),
        n_attn_heads: 2,
        d_enc: mlm.d_enc(),
        d_ff: 2 * mlm.d_enc(),
        init_target_in_norm: lm.avg_in_row_norm(),
        init_target_out_norm: lm.avg_out_row_norm(),
    };
    ConceptEncoder::new(
        &mut ChaCha8Rng::seed_from_u64(seed),
        &cfg,
        lm.d_in(),
        lm.d_out(),
    )
    .unwrap()
}

fn fixture_episodes() -> Vec<Episode> {
    let mk = |concept: &str, support: &str, positive: &str, negative: &str, original: &str| {
        Episode {
            support_sentences: vec![support.to_string()],
            positive_text: positive.to_string(),
            negative_text: negative.to_string(),
            original_text: original.to_string(),
            concept_surface: concept.to_string(),
        }
    };
    vec![
        mk(
            "pendant",
            "a pendant stood on the table",
            "the <nonce> glowed near the window",
            "a dog ran across the field today",
            "the pendant glowed near the window",
        ),
        mk(
            "goblet",
            "the goblet glowed in the light",
            "the <nonce> stood on the table",
            "a mote drifted in the light",
            "the goblet stood on the table",
        ),
        mk(
            "mote",
            "a mote stood near the window",
            "a <nonce> drifted in the light",
            "the pendant glowed near the window",
            "a mote drifted in the light",
        ),
    ]
}

#[test]
fn criterion_01_gradient_isolation() {
    let start = Instant::now();
    let (lm, mlm) = tiny_stack(3, 16);
    let encoder = tiny_encoder(&lm, &mlm, 4);
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 2,
        lr: 1e-3,
        weight_decay: 0.1,
        warmup_steps: Some(2),
        held_out: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(encoder, &lm, &mlm, cfg).unwrap();
    let lm_fp = lm.fingerprint();
    let mlm_fp = mlm.fingerprint();
    let enc_before: Vec<_> = trainer.encoder.params().iter().map(|p| (*p).clone()).collect();
    let episodes = fixture_episodes();
    for step in 0..50 {
        let batch = vec![
            episodes[step % episodes.len()].clone(),
            episodes[(step + 1) % episodes.len()].clone(),
        ];
        let report = trainer.train_step(&batch).unwrap();
        assert!(!report.skipped, "step {step} skipped");
    }
    assert_eq!(lm.fingerprint(), lm_fp, "frozen LM parameters changed");
    assert_eq!(mlm.fingerprint(), mlm_fp, "frozen extractor parameters changed");
    let moved = enc_before
        .iter()
        .zip(trainer.encoder.params())
        .filter(|(b, a)| *b != *a)
        .count();
    assert!(moved > 0, "no encoder parameter moved in 50 steps");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, limit 2 min");
    println!("ACCEPTANCE gradient_isolation: PASS ({elapsed:?}, {moved} tensors updated)");
}

/// Exhaustive enumeration over contiguous segment placements; the
/// lexicographically smallest feasible assignment, or None.
fn oracle_alignment(pos: &[u32], orig: &[u32], new_id: u32) -> Option<Vec<(usize, usize)>> {
    // segments of non-new tokens with preceding nonce counts
    let mut segments: Vec<(usize, usize, usize)> = Vec::new();
    let mut gap = 0usize;
    let mut start: Option<usize> = None;
    for (k, &t) in pos.iter().enumerate() {
        if t == new_id {
            if let Some(s) = start.take() {
                segments.push((gap, s, k - s));
                gap = 0;
            }
            gap += 1;
        } else if start.is_none() {
            start = Some(k);
        }
    }
    let trailing = match start {
        Some(s) => {
            segments.push((gap, s, pos.len() - s));
            0
        }
        None => gap,
    };

    fn search(
        r: usize,
        cursor: usize,
        segments: &[(usize, usize, usize)],
        trailing: usize,
        pos: &[u32],
        orig: &[u32],
        acc: &mut Vec<usize>,
        found: &mut Option<Vec<usize>>,
    ) {
        if found.is_some() {
            return;
        }
        if r == segments.len() {
            if orig.len() >= cursor + trailing {
                *found = Some(acc.clone());
            }
            return;
        }
        let (gap, k, len) = segments[r];
        let lo = cursor + gap;
        let identity_only = r == 0 && gap == 0;
        let mut p = lo;
        while p + len <= orig.len() {
            if identity_only && p != 0 {
                break;
            }
            let matched = (0..len).all(|j| orig[p + j] == pos[k + j]);
            let last = r + 1 == segments.len();
            if matched && (!last || trailing > 0 || p + len == orig.len()) {
                acc.push(p);
                search(r + 1, p + len, segments, trailing, pos, orig, acc, found);
                acc.pop();
                if found.is_some() {
                    return;
                }
            }
            p += 1;
        }
    }

    let mut found = None;
    search(0, 0, &segments, trailing, pos, orig, &mut vec![], &mut found);
    found.map(|placements| {
        let mut pairs = Vec::new();
        for ((_, k, len), p) in segments.iter().zip(placements) {
            for j in 0..*len {
                pairs.push((k + j, p + j));
            }
        }
        pairs
    })
}

#[test]
fn criterion_02_sigma_mapping_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let new_id = 999u32;
    let mut feasible = 0usize;
    for case in 0..1000 {
        // random subtokenization fixture: words of 1..=3 pieces over a
        // small alphabet (repeats are common), 1..=2 words replaced
        let n_words = rng.random_range(3..10);
        let mut orig: Vec<u32> = Vec::new();
        let mut spans = Vec::new();
        for _ in 0..n_words {
            let pieces = rng.random_range(1..=3);
            let s = orig.len();
            for _ in 0..pieces {
                orig.push(rng.random_range(10..17));
            }
            spans.push((s, orig.len()));
        }
        let n_replace = rng.random_range(1..=2usize.min(n_words));
        let mut word_order: Vec<usize> = (0..n_words).collect();
        for i in (1..word_order.len()).rev() {
            word_order.swap(i, rng.random_range(0..=i));
        }
        let mut replaced: Vec<(usize, usize)> =
            word_order[..n_replace].iter().map(|&w| spans[w]).collect();
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
        let want = oracle_alignment(&pos, &orig, new_id);
        match (got, want) {
            (Ok(map), Some(pairs)) => {
                assert_eq!(
                    map.pairs(),
                    pairs,
                    "case {case}: pos={pos:?} orig={orig:?}"
                );
                let mut prev: Option<usize> = None;
                for (k, s) in map.pairs() {
                    assert_eq!(pos[k], orig[s], "token mismatch at ({k},{s})");
                    if let Some(p) = prev {
                        assert!(s > p, "sigma not strictly increasing");
                    }
                    prev = Some(s);
                }
                feasible += 1;
            }
            (Err(_), None) => {}
            (got, want) => panic!(
                "case {case} disagreement: pos={pos:?} orig={orig:?} impl={got:?} oracle={want:?}"
            ),
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, limit 1 min");
    assert!(feasible > 700, "only {feasible}/1000 fixtures were feasible");
    println!(
        "ACCEPTANCE sigma_mapping_oracle: PASS ({feasible}/1000 feasible, all agree, {elapsed:?})"
    );
}

#[test]
fn criterion_03_loss_correctness() {
    let (lm, _) = tiny_stack(7, 16);
    let ce = ConceptEmbedding {
        e_in: (0..16).map(|i| (i as f32 * 0.37).sin() * 0.2).collect(),
        e_out: (0..16).map(|i| (i as f32 * 0.73).cos() * 0.2).collect(),
        k_used: 1,
        concept_label: "pendant".into(),
    };
    let aug = AugmentedLm::augment(&lm, &ce).unwrap();
    let pos = aug.splice("the <nonce> glowed near the window");
    let neg = aug.splice("a dog ran across the field");
    let orig = aug.splice("the pendant glowed near the window");

    // cross entropies against a scalar-loop oracle
    let (ce_pos, ce_neg) = compute_ce_losses(&aug, &pos, &neg).unwrap();
    for (ids, got) in [(&pos, ce_pos), (&neg, ce_neg)] {
        let trace = aug.forward_trace(ids).unwrap();
        let mut want = 0.0;
        for t in 1..ids.len() {
            let row = trace.logits.row(t - 1);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln() + mx;
            want -= row[ids[t] as usize] - lse;
        }
        want /= (ids.len() - 1) as f64;
        assert!((got - want).abs() < 1e-6, "ce {got} vs oracle {want}");
    }

    // distillation terms against a per-position loop oracle
    let pos_trace = aug.forward_trace(&pos).unwrap();
    let (ol, os) = lm.trace_tensors(&orig, &[], &[]);
    let orig_trace = ForwardTrace {
        logits: ol,
        final_states: os,
    };
    let map = build_index_map(&pos, &orig, lm.base_vocab() as u32).unwrap();
    let (cos, mse) = compute_distillation(&pos_trace, &orig_trace, &map).unwrap();
    let pairs = map.pairs();
    let shared = orig_trace.logits.cols();
    let mut cos_want = 0.0;
    let mut mse_want = 0.0;
    for (k, s) in &pairs {
        let a = pos_trace.final_states.row(*k);
        let b = orig_trace.final_states.row(*s);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        cos_want += 1.0 - dot / (na * nb);
        let mut acc = 0.0;
        for c in 0..shared {
            let d = pos_trace.logits.get(*k, c) - orig_trace.logits.get(*s, c);
            acc += d * d;
        }
        mse_want += acc / shared as f64;
    }
    cos_want /= pairs.len() as f64;
    mse_want /= pairs.len() as f64;
    assert!((cos - cos_want).abs() < 1e-6, "cos {cos} vs {cos_want}");
    assert!((mse - mse_want).abs() < 1e-6, "mse {mse} vs {mse_want}");

    // self-distillation is exactly zero
    let self_map = build_index_map(&pos, &pos, u32::MAX - 1).err();
    assert!(self_map.is_some(), "self map should need a real new token");
    let identity = build_index_map(
        &[1, lm.base_vocab() as u32, 2],
        &[1, 9, 2],
        lm.base_vocab() as u32,
    )
    .unwrap();
    let (c0, m0) = compute_distillation(&pos_trace, &pos_trace, &identity).unwrap();
    assert!(c0.abs() < 1e-6 && m0.abs() < 1e-6, "self-distillation ({c0}, {m0})");

    // the total is the plain sum
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let parts: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 5.0).collect();
        let b = total_loss(parts[0], parts[1], parts[2], parts[3]).unwrap();
        assert!((b.total - parts.iter().sum::<f64>()).abs() < 1e-6);
    }
    println!("ACCEPTANCE loss_correctness: PASS");
}

#[test]
fn criterion_04_gradient_check() {
    let start = Instant::now();
    let (lm, mlm) = tiny_stack(11, 16);
    let encoder = tiny_encoder(&lm, &mlm, 12);
    let cfg = TrainConfig {
        steps: 10,
        batch_size: 1,
        held_out: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(encoder, &lm, &mlm, cfg).unwrap();
    let episode = fixture_episodes()[0].clone();

    // analytic gradients through the training path
    let analytic = trainer.episode_gradients(&episode).unwrap();

    // central finite differences over each checked parameter
    let n_params = trainer.encoder.params().len();
    let eps = 1e-5;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel: f64 = 0.0;
    for pi in 0..n_params {
        let coords = trainer.encoder.params()[pi].len();
        for ci in 0..coords {
            // every coordinate of the projections and layer norms, every
            // third coordinate of the attention layer (for runtime)
            let is_proj = pi >= n_params - 6;
            if !is_proj && ci % 3 != 0 {
                continue;
            }
            let orig = trainer.encoder.params()[pi].data()[ci];
            trainer.encoder.params_mut()[pi].data_mut()[ci] = orig + eps;
            let plus = trainer.episode_breakdown(&episode).unwrap().total;
            trainer.encoder.params_mut()[pi].data_mut()[ci] = orig - eps;
            let minus = trainer.episode_breakdown(&episode).unwrap().total;
            trainer.encoder.params_mut()[pi].data_mut()[ci] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[pi].data()[ci];
            if an.abs().max(fd.abs()) < 1e-7 {
                skipped += 1;
                continue; // below finite-difference resolution
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs());
            max_rel = max_rel.max(rel);
            assert!(
                rel <= 1e-3,
                "param {pi} coord {ci}: analytic {an} vs fd {fd} (rel {rel})"
            );
            checked += 1;
        }
    }
    assert!(checked > 300, "only {checked} coordinates checked");
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE gradient_check: PASS ({checked} coords, {skipped} below resolution, max rel {max_rel:.2e}, {elapsed:?})"
    );
}

#[test]
fn criterion_05_pooling_aggregation_invariants() {
    let (lm, mlm) = tiny_stack(21, 16);
    let enc = tiny_encoder(&lm, &mlm, 22);
    let mask = mlm.tokenizer.mask_id();
    let sentences = [
        "the pendant glowed near the window",
        "a pendant stood on the table",
        "the pendant drifted in the light",
        "a pendant ran across the field",
    ];
    let seqs: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| mask_concept(s, &["pendant"], &mlm.tokenizer).unwrap())
        .collect();
    let forward = SupportSet::new(seqs.clone(), mask).unwrap();
    let mut shuffled = seqs.clone();
    shuffled.reverse();
    shuffled.swap(0, 1);
    let backward = SupportSet::new(shuffled, mask).unwrap();
    let a = generate_concept_embedding(&enc, &mlm, &forward, "pendant").unwrap();
    let b = generate_concept_embedding(&enc, &mlm, &backward, "pendant").unwrap();
    let mut max_diff = 0f64;
    for (x, y) in a.e_in_f64().iter().zip(b.e_in_f64()).chain(
        a.e_out_f64().iter().zip(b.e_out_f64()),
    ) {
        max_diff = max_diff.max((x - y).abs());
    }
    assert!(max_diff < 1e-6, "permutation moved the embedding by {max_diff}");

    // K = 1 aggregation is the exact identity
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let v: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let out = aggregate(&[SequenceEmbedding {
            vector: v.clone(),
            source_index: 0,
        }])
        .unwrap();
        assert_eq!(out, v, "K=1 aggregation must be bit-exact");
    }
    println!("ACCEPTANCE pooling_aggregation_invariants: PASS (perm diff {max_diff:.2e})");
}

#[test]
fn criterion_06_norm_calibration() {
    let (lm, mlm) = tiny_stack(31, 16);
    let enc = tiny_encoder(&lm, &mlm, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let words = ["pendant", "dog", "goblet", "mote", "window", "field", "table", "light"];
    let mut mean_in = 0.0;
    let mut mean_out = 0.0;
    for i in 0..100 {
        let w = words[i % words.len()];
        let others: Vec<&str> = words.iter().filter(|x| **x != w).cloned().collect();
        let filler = others[rng.random_range(0..others.len())];
        let sentence = format!("the {w} glowed near the {filler}");
        let ids = mask_concept(&sentence, &[w], &mlm.tokenizer).unwrap();
        let support = SupportSet::new(vec![ids], mlm.tokenizer.mask_id()).unwrap();
        let ce = generate_concept_embedding(&enc, &mlm, &support, w).unwrap();
        mean_in += college::tensor::norm(&ce.e_in_f64()) / 100.0;
        mean_out += college::tensor::norm(&ce.e_out_f64()) / 100.0;
    }
    let target_in = lm.avg_in_row_norm();
    let target_out = lm.avg_out_row_norm();
    let rel_in = (mean_in - target_in).abs() / target_in;
    let rel_out = (mean_out - target_out).abs() / target_out;
    assert!(rel_in <= 0.2, "e_in mean norm {mean_in} vs target {target_in} ({rel_in:.3})");
    assert!(rel_out <= 0.2, "e_out mean norm {mean_out} vs target {target_out} ({rel_out:.3})");
    println!(
        "ACCEPTANCE norm_calibration: PASS (e_in {mean_in:.3}/{target_in:.3}, e_out {mean_out:.3}/{target_out:.3})"
    );
}

/// Deterministic per-word embedding provider for the rigged harness check.
struct WordHashProvider {
    d: usize,
}

impl EmbeddingProvider for WordHashProvider {
    fn name(&self) -> String {
        "wordhash".into()
    }

    fn generate(
        &self,
        concept: &str,
        supports: &[String],
        _rng: &mut dyn rand::Rng,
    ) -> college::Result<ProviderOutput> {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in concept.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let e_out: Vec<f64> = (0..self.d)
            .map(|i|

                (((h.rotate_left((i % 61) as u32)) & 0xffff) as f64 / 65535.0) * 6.0 - 3.0)
            .collect();
        Ok(ProviderOutput {
            embedding: ConceptEmbedding::from_f64(&vec![0.0; self.d], &e_out, supports.len() as u32, concept),
            supports_in_context: false,
        })
    }
}

#[test]
fn criterion_07_harness_oracle() {
    // 50 rigged-logit instances: the harness selection must match a
    // brute-force argmax over independently computed sequence logprobs.
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let base_words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let corpus = base_words.join(" ");
    for case in 0..50 {
        let tok = WordTokenizer::from_corpus(&[corpus.as_str()]);
        let v = tok.vocab_size();
        let mut table = college::tensor::Tensor::zeros(v, v);
        for r in 0..v {
            for c in 0..v {
                table.set(r, c, rng.random::<f64>() * 4.0 - 2.0);
            }
        }
        let mut lm = RiggedLm::new(tok, table, 4);
        for x in lm.nonce_row.iter_mut() {
            *x = rng.random::<f64>() * 2.0 - 1.0;
        }
        let n_choices = rng.random_range(3..6);
        let mode = if rng.random::<f64>() < 0.5 {
            GREMode::Top1
        } else {
            GREMode::Top2
        };
        let choices: Vec<GREChoice> = (0..n_choices)
            .map(|i| GREChoice {
                word: format!("c{case}x{i}"),
                examples: vec![format!("example for c{case}x{i}")],
                definition: None,
            })
            .collect();
        let stem = format!(
            "{} {} [BLANK] {} {}",
            base_words[rng.random_range(0..10)],
            base_words[rng.random_range(0..10)],
            base_words[rng.random_range(0..10)],
            base_words[rng.random_range(0..10)],
        );
        let item = GREItem {
            stem: stem.clone(),
            choices,
            answers: match mode {
                GREMode::Top1 => vec![0],
                GREMode::Top2 => vec![0, 1],
            },
            mode,
        };
        let provider = WordHashProvider { d: lm.d };
        let sel = score_multiple_choice(&lm, &provider, &item, 1, false, false, &mut rng)
            .unwrap();

        // oracle: assemble each candidate sequence, compute its logprob
        // with an independent softmax loop, take the best indices
        let mut oracle_scores = Vec::new();
        for choice in &item.choices {
            let po = provider
                .generate(&choice.word, &choice.examples, &mut rng)
                .unwrap();
            let aug = AugmentedLm::augment(&lm, &po.embedding).unwrap();
            let ids = aug.splice(&stem.replace("[BLANK]", NONCE));
            let trace = aug.forward_trace(&ids).unwrap();
            let mut lp = 0.0;
            for t in 1..ids.len() {
                let row = trace.logits.row(t - 1);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln() + mx;
                lp += row[ids[t] as usize] - lse;
            }
            oracle_scores.push(lp);
        }
        let take = match mode {
            GREMode::Top1 => 1,
            GREMode::Top2 => 2,
        };
        let mut oracle_choice = top_indices(&oracle_scores, take);
        oracle_choice.sort_unstable();
        assert_eq!(
            sel.chosen, oracle_choice,
            "case {case}: harness {:?} vs oracle {:?} (scores {:?} vs {:?})",
            sel.chosen, oracle_choice, sel.scores, oracle_scores
        );
    }

    // slang harness under random scores converges to chance level
    let n_items = 1000;
    let corpus: String = (0..n_items)
        .map(|i| format!("term{i} meaning{i} tweet using here always "))
        .collect();
    let lm = RiggedLm::uniform(WordTokenizer::from_corpus(&[corpus.as_str()]), 4);
    struct NoisyProvider {
        d: usize,
    }
    impl EmbeddingProvider for NoisyProvider {
        fn name(&self) -> String {
            "noise".into()
        }
        fn generate(
            &self,
            concept: &str,
            _supports: &[String],
            rng: &mut dyn rand::Rng,
        ) -> college::Result<ProviderOutput> {
            let e_out: Vec<f64> = (0..self.d).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            Ok(ProviderOutput {
                embedding: ConceptEmbedding::from_f64(&vec![0.0; self.d], &e_out, 1, concept),
                supports_in_context: false,
            })
        }
    }
    let items: Vec<SlangItem> = (0..n_items)
        .map(|i| SlangItem {
            term: format!("term{i}"),
            definition: format!("meaning{i} always"),
            tweets: vec![format!("tweet using term{i} here")],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let out = eval_slang(&lm, &NoisyProvider { d: lm.d }, &items, 3, 1, false, &mut rng).unwrap();
    // binomial: 3 sd over 1000 trials at p = 0.25 is ±0.0411
    let band = 3.0 * (0.25f64 * 0.75 / n_items as f64).sqrt();
    assert!(
        (out.accuracy - 0.25).abs() <= band,
        "slang accuracy {} outside 0.25 ± {band:.4}",
        out.accuracy
    );
    println!(
        "ACCEPTANCE harness_oracle: PASS (50/50 agree, slang accuracy {:.4} within ±{band:.4})",
        out.accuracy
    );
}

#[test]
fn criterion_08_elo_suite() {
    // equal ratings, one win at K = 32
    let mut s = EloState::new(DEFAULT_K);
    s.register("a");
    s.register("b");
    s.elo_update("a", "b", MatchResult::AWins).unwrap();
    assert!((s.rating("a").unwrap() - 1016.0).abs() < 1e-9);
    assert!((s.rating("b").unwrap() - 984.0).abs() < 1e-9);

    // ties leave equal ratings unchanged
    let mut s = EloState::new(DEFAULT_K);
    s.register("a");
    s.register("b");
    s.elo_update("a", "b", MatchResult::Tie).unwrap();
    assert_eq!(s.rating("a").unwrap(), INITIAL_RATING);
    assert_eq!(s.rating("b").unwrap(), INITIAL_RATING);

    // rating sum is conserved across a simulated tournament
    let mut s = EloState::new(DEFAULT_K);
    let names = ["a", "b", "c", "d", "e"];
    for n in names {
        s.register(n);
    }
    let before = s.rating_sum();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let i = rng.random_range(0..names.len());
        let mut j = rng.random_range(0..names.len());
        while j == i {
            j = rng.random_range(0..names.len());
        }
        let result = match rng.random_range(0..3u32) {
            0 => MatchResult::AWins,
            1 => MatchResult::BWins,
            _ => MatchResult::Tie,
        };
        s.elo_update(names[i], names[j], result).unwrap();
    }
    assert!((s.rating_sum() - before).abs() < 1e-6);
    println!("ACCEPTANCE elo_suite: PASS");
}

#[test]
fn criterion_09_training_smoke() {
    let start = Instant::now();
    // synthetic corpus with held-out concepts at the tail
    let corpus = synth::build(synth::SynthSpec {
        n_concepts: 24,
        held_out_concepts: 6,
        sentences_per_concept: 12,
        filler_sentences: 60,
        seed: 90,
    });
    let lm_cfg = ToyModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_seq: 48,
    };
    let mlm_cfg = ToyModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 4,
        d_ff: 64,
        max_seq: 48,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut lm = ToyCausalLm::new(
        &mut rng,
        WordTokenizer::from_corpus(&[corpus.joined_text().as_str()]),
        lm_cfg,
    );
    let mut mlm = ToyMaskedLm::new(
        &mut rng,
        WordTokenizer::from_corpus(&[corpus.joined_text().as_str()]),
        mlm_cfg,
    );
    // pretrain both frozen models on the synthetic sentences
    let lm_curve = pretrain_causal_lm(&mut lm, &corpus.sentences, 600, 12, 3e-3, &mut rng);
    assert!(
        lm_curve.last().unwrap() < &lm_curve[2],
        "toy LM pretraining failed to learn"
    );
    pretrain_masked_lm(&mut mlm, &corpus.sentences, 400, 12, 3e-3, 0.25, &mut rng);
    let pretrain_done = Instant::now();

    // train the encoder on the training-concept records
    let encoder = tiny_encoder(&lm, &mlm, 92);
    let held_records = corpus.records.len() - corpus.held_out_from;
    let cfg = TrainConfig {
        steps: 150,
        batch_size: 4,
        lr: 1e-3,
        weight_decay: 0.1,
        warmup_steps: None, // 1% of steps
        grad_clip_norm: 1.0,
        supports_per_query: 1,
        buffer_capacity: 8,
        checkpoint_every: 75,
        held_out: held_records,
    };
    let mut trainer = Trainer::new(encoder, &lm, &mlm, cfg).unwrap();
    let ckpt_dir = std::env::temp_dir().join("college_acceptance_smoke");
    let _ = std::fs::remove_dir_all(&ckpt_dir);
    let outcome = run_training(&mut trainer, &corpus.records, &ckpt_dir, &mut rng).unwrap();
    assert_eq!(outcome.steps_run + outcome.skipped_steps, 150);
    assert!(outcome.steps_run as usize * 4 >= 500, "fewer than 500 episodes consumed");
    assert!(outcome.selected.is_some());

    // margin on held-out concepts: trained embeddings vs norm-matched noise
    let held = &corpus.records[corpus.held_out_from..];
    let mut college_ce = 0.0;
    let mut random_ce = 0.0;
    let mut episodes = 0usize;
    for (ri, record) in held.iter().enumerate() {
        for draw in 0..3 {
            let support = record.support_sentences
                [(draw * 3 + ri) % record.support_sentences.len()]
            .clone();
            let seqs =
                vec![mask_concept(&support, &[&record.concept_surface], &mlm.tokenizer).unwrap()];
            let sset = SupportSet::new(seqs, mlm.tokenizer.mask_id()).unwrap();
            let learned =
                generate_concept_embedding(&trainer.encoder, &mlm, &sset, &record.concept_surface)
                    .unwrap();

            let mut noise_rng = ChaCha8Rng::seed_from_u64(9000 + (ri * 3 + draw) as u64);
            let rand_in = random_unit(&mut noise_rng, lm.d_in(), lm.avg_in_row_norm());
            let rand_out = random_unit(&mut noise_rng, lm.d_out(), lm.avg_out_row_norm());
            let random = ConceptEmbedding::from_f64(
                &rand_in,
                &rand_out,
                1,
                &record.concept_surface,
            );

            college_ce += positive_ce(&lm, &learned, &record.query_text);
            random_ce += positive_ce(&lm, &random, &record.query_text);
            episodes += 1;
        }
    }
    assert!(episodes >= 50, "only {episodes} held-out episodes");
    college_ce /= episodes as f64;
    random_ce /= episodes as f64;
    let margin = (random_ce - college_ce) / random_ce;
    let elapsed = start.elapsed();
    assert!(
        margin >= 0.10,
        "margin {margin:.4} below 10% (college {college_ce:.4} vs random {random_ce:.4})"
    );
    assert!(elapsed.as_secs() < 1800, "took {elapsed:?}, limit 30 min");
    let _ = std::fs::remove_dir_all(&ckpt_dir);
    println!(
        "ACCEPTANCE training_smoke: PASS (margin {:.1}%, college {college_ce:.3} vs random {random_ce:.3}, {episodes} episodes, pretrain {:?}, total {elapsed:?})",
        margin * 100.0,
        pretrain_done.duration_since(start)
    );
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize, target: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x *= target / n;
    }
    v
}

/// Mean next-token cross entropy of the positive sequence under a given
/// embedding pair (independent scalar loop).
fn positive_ce(lm: &ToyCausalLm, ce: &ConceptEmbedding, positive_text: &str) -> f64 {
    let aug = AugmentedLm::augment(lm, ce).unwrap();
    let ids = aug.splice(positive_text);
    let trace = aug.forward_trace(&ids).unwrap();
    let mut total = 0.0;
    for t in 1..ids.len() {
        let row = trace.logits.row(t - 1);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln() + mx;
        total -= row[ids[t] as usize] - lse;
    }
    total / (ids.len() - 1) as f64
}

#[test]
fn criterion_10_data_pipeline_fixtures() {
    let cfg = FilterConfig::default();
    let doc = |id: &str, text: &str| Document {
        id: id.into(),
        text: text.into(),
        source_tag: None,
    };

    // language threshold 0.90
    let r = clean_and_filter(
        &doc("lang", "text"),
        &cfg,
        &FixedLangScorer(0.89),
        &FixedPplScorer(10.0),
    )
    .unwrap();
    match r {
        FilterOutcome::Rejected { reason, .. } => {
            assert_eq!(reason, RejectReason::Language);
            assert_eq!(reason.to_string(), "language");
        }
        _ => panic!("0.89 language score must be rejected"),
    }
    let r = clean_and_filter(
        &doc("lang-ok", "text"),
        &cfg,
        &FixedLangScorer(0.90),
        &FixedPplScorer(10.0),
    )
    .unwrap();
    assert!(matches!(r, FilterOutcome::Accepted(_)), "0.90 must pass");

    // perplexity threshold 1000
    let r = clean_and_filter(
        &doc("ppl", "text"),
        &cfg,
        &FixedLangScorer(0.95),
        &FixedPplScorer(1000.5),
    )
    .unwrap();
    match r {
        FilterOutcome::Rejected { reason, .. } => {
            assert_eq!(reason, RejectReason::Perplexity);
            assert_eq!(reason.to_string(), "perplexity");
        }
        _ => panic!("perplexity 1000.5 must be rejected"),
    }

    // 8 sentences -> exactly two 4-sentence chunks
    let eight: String = (1..=8).map(|i| format!("Sentence number {i}. ")).collect();
    assert_eq!(chunk_into_queries(&eight, split_sentences).len(), 2);

    // 10-word support candidates are excluded
    let query = "The pendant was displayed. It shone. People stared. Nobody spoke.";
    let ten_words = "The pendant sat there on its silver chain quietly."; // 10 words
    let long_enough =
        "This pendant support sentence easily contains the required fifteen words because it simply keeps going.";
    let index = SentenceIndex::build(&[ten_words, long_enough]);
    let supports = gather_supports("pendant", &index, query, &cfg);
    assert_eq!(supports, vec![long_enough.to_string()]);

    // every record a synthetic pipeline emits passes invariant validation
    let corpus = synth::build(synth::SynthSpec {
        n_concepts: 10,
        held_out_concepts: 2,
        sentences_per_concept: 8,
        filler_sentences: 20,
        seed: 77,
    });
    assert!(!corpus.records.is_empty());
    for r in &corpus.records {
        r.validate(NONCE).unwrap();
    }
    println!("ACCEPTANCE data_pipeline_fixtures: PASS ({} records validated)", corpus.records.len());
}

#[test]
fn criterion_00_inventory() {
    // not a spec criterion: asserts the suite stays in sync with itself
    let criteria: BTreeSet<&str> = [
        "gradient_isolation",
        "sigma_mapping_oracle",
        "loss_correctness",
        "gradient_check",
        "pooling_aggregation_invariants",
        "norm_calibration",
        "harness_oracle",
        "elo_suite",
        "training_smoke",
        "data_pipeline_fixtures",
    ]
    .into_iter()
    .collect();
    let counts: BTreeMap<&str, usize> = criteria.iter().map(|c| (*c, 1)).collect();
    assert_eq!(counts.len(), 10, "one in-crate test per criterion; the end-to-end determinism criterion lives in the CLI crate");
    println!("ACCEPTANCE inventory: 10 criteria here + determinism in college-cli");
}
