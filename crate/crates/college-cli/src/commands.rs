//! Command implementations. Every command loads its models from the config,
//! seeds one RNG, runs, and emits a JSON report (plus optional SVG plots);
//! input datasets are never mutated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use college::baselines::{
    fit_cross_space_map, AdditiveProvider, CollegeProvider, CrossSpaceMap, EmbeddingProvider,
    PromptingProvider, StaticVectorTable, TokenTuningProvider,
};
use college::data::{
    build_dataset, emit_episodes, read_episodes, Document, Lexicon, LexicalLangScorer,
    MlmContextualScorer, UnigramPplScorer,
};
use college::encoder::ConceptEncoder;
use college::error::{CollegeError, Result};
use college::eval::judge::{HttpJudgeClient, JudgeClient, StubJudge};
use college::eval::{
    definition_from_supports, eval_gre_dataset, eval_slang, load_defgen_items, load_gre_items,
    load_slang_items, run_def_tournament, GREOutcome, MlmTokenEmbedder, SlangOutcome,
    TournamentReport,
};
use college::lm::{Decoding, NONCE};
use college::models::{ToyCausalLm, ToyMaskedLm};
use college::synth;
use college::train::{run_training, Trainer};

use crate::config::{load_encoder, load_lm, load_mlm, AppConfig};
use crate::report::{emit_report, write_accuracy_plot, Report};

pub const PROVIDERS: [&str; 6] = [
    "college",
    "tt1",
    "tt2",
    "additive",
    "prompting",
    "prompting+college",
];

pub struct ModelContext {
    pub lm: ToyCausalLm,
    pub mlm: ToyMaskedLm,
    pub encoder: ConceptEncoder,
    pub table: Option<StaticVectorTable>,
    pub map: Option<CrossSpaceMap>,
}

impl ModelContext {
    pub fn load(cfg: &AppConfig) -> Result<Self> {
        let lm = load_lm(&cfg.models.lm)?;
        let mlm = load_mlm(&cfg.models.mlm)?;
        let encoder = load_encoder(&cfg.models.encoder, &lm, &mlm)?;
        let (table, map) = match &cfg.models.static_table {
            Some(path) => {
                let table = StaticVectorTable::load(path)?;
                let map = fit_cross_space_map(&table, &lm)?;
                (Some(table), Some(map))
            }
            None => (None, None),
        };
        Ok(ModelContext {
            lm,
            mlm,
            encoder,
            table,
            map,
        })
    }

    fn additive_parts(&self) -> Result<(&StaticVectorTable, &CrossSpaceMap)> {
        match (&self.table, &self.map) {
            (Some(t), Some(m)) => Ok((t, m)),
            _ => Err(CollegeError::InvalidInput(
                "the additive provider needs models.static_table in the config".into(),
            )),
        }
    }

    /// Runs `f` with the named provider constructed in scope.
    pub fn with_provider<R>(
        &self,
        name: &str,
        f: impl FnOnce(&dyn EmbeddingProvider) -> Result<R>,
    ) -> Result<R> {
        match name {
            "college" => f(&CollegeProvider {
                encoder: &self.encoder,
                mlm: &self.mlm,
                in_context: false,
            }),
            "prompting+college" => f(&CollegeProvider {
                encoder: &self.encoder,
                mlm: &self.mlm,
                in_context: true,
            }),
            "tt1" => f(&TokenTuningProvider::tt1(&self.lm)),
            "tt2" => f(&TokenTuningProvider::tt2(&self.lm)),
            "prompting" => f(&PromptingProvider::for_model(&self.lm)),
            "additive" => {
                let (table, map) = self.additive_parts()?;
                f(&AdditiveProvider {
                    table,
                    map,
                    in_context: false,
                })
            }
            other => Err(CollegeError::InvalidInput(format!(
                "unknown provider {other:?}; valid: {}",
                PROVIDERS.join(", ")
            ))),
        }
    }
}

fn judge_from_config(cfg: &AppConfig) -> Result<Box<dyn JudgeClient>> {
    let spec = cfg.models.judge.as_str();
    if let Some(kind) = spec.strip_prefix("stub:") {
        let stub = match kind {
            "tie" => StubJudge::AlwaysTie,
            "first" => StubJudge::FirstPresented,
            "longer" => StubJudge::Longer,
            "broken" => StubJudge::Broken,
            other => {
                return Err(CollegeError::InvalidInput(format!(
                    "unknown judge stub {other:?}; valid: tie, first, longer, broken"
                )))
            }
        };
        return Ok(Box::new(stub));
    }
    if let Some(url) = spec.strip_prefix("http:") {
        return Ok(Box::new(HttpJudgeClient::new(
            &format!("http:{url}"),
            &cfg.models.judge_model,
            &cfg.models.judge_api_key_env,
        )));
    }
    if spec.starts_with("https://") || spec.starts_with("http://") {
        return Ok(Box::new(HttpJudgeClient::new(
            spec,
            &cfg.models.judge_model,
            &cfg.models.judge_api_key_env,
        )));
    }
    Err(CollegeError::InvalidInput(format!(
        "judge spec {spec:?} must be stub:<kind> or an http(s) URL"
    )))
}

fn args_map(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

// ---------------------------------------------------------------------------
// build-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct BuildDataSummary {
    documents: usize,
    records: usize,
    skipped_queries: usize,
    rejections: usize,
    output: PathBuf,
    manifest_total: usize,
}

pub fn build_data(cfg: &AppConfig, inputs: &[PathBuf], output: Option<PathBuf>) -> Result<PathBuf> {
    let output = output.unwrap_or_else(|| cfg.paths.data.clone());
    let mut docs = Vec::new();
    for input in inputs {
        let p = input.display().to_string();
        let text = std::fs::read_to_string(input).map_err(|e| CollegeError::io(&p, e))?;
        let is_jsonl = input
            .extension()
            .map(|e| e == "jsonl" || e == "ndjson")
            .unwrap_or(false);
        if is_jsonl {
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let doc: Document = serde_json::from_str(line)
                    .map_err(|e| CollegeError::format(&p, format!("line {}: {e}", n + 1)))?;
                docs.push(doc);
            }
        } else {
            docs.push(Document {
                id: input
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| p.clone()),
                text,
                source_tag: None,
            });
        }
    }
    if docs.is_empty() {
        return Err(CollegeError::Dataset("no input documents".into()));
    }
    let mlm = load_mlm(&cfg.models.mlm)?;
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let ppl = UnigramPplScorer::fit(&texts, 0.1);
    let lexicon = Lexicon::from_corpus(&texts, cfg.data.lexicon_min_count);
    let ctx_scorer = MlmContextualScorer { mlm: &mlm };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = build_dataset(
        &docs,
        &cfg.filter,
        &LexicalLangScorer,
        &ppl,
        &ctx_scorer,
        &lexicon,
        &mut rng,
        NONCE,
    )?;
    let manifest = emit_episodes(&report.records, &output)?;
    let summary = BuildDataSummary {
        documents: docs.len(),
        records: report.records.len(),
        skipped_queries: report.skipped_queries,
        rejections: report.rejections.len(),
        output: output.clone(),
        manifest_total: manifest.total,
    };
    println!(
        "build-data: {} documents -> {} records ({} queries skipped, {} docs rejected) -> {}",
        summary.documents,
        summary.records,
        summary.skipped_queries,
        summary.rejections,
        output.display()
    );
    let rejections: Vec<(String, String)> = report
        .rejections
        .iter()
        .map(|(id, r)| (id.clone(), r.to_string()))
        .collect();
    emit_report(
        &Report {
            command: "build-data".into(),
            seed: cfg.seed,
            args: args_map(&[(
                "input",
                inputs
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            )]),
            summary,
            items: rejections,
            config: cfg.clone(),
        },
        &cfg.paths.reports,
    )
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainSummary {
    steps_run: u64,
    skipped_steps: u64,
    skipped_episodes: u64,
    selected_checkpoint: Option<String>,
    final_total_loss: Option<f64>,
    checkpoint_dir: PathBuf,
}

pub fn train(cfg: &AppConfig) -> Result<PathBuf> {
    let records = read_episodes(&cfg.paths.data)?;
    let lm = load_lm(&cfg.models.lm)?;
    let mlm = load_mlm(&cfg.models.mlm)?;
    let encoder = load_encoder(&cfg.models.encoder, &lm, &mlm)?;
    let mut trainer = Trainer::new(encoder, &lm, &mlm, cfg.train.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outcome = run_training(&mut trainer, &records, &cfg.paths.checkpoints, &mut rng)?;
    // stable alias for the selected checkpoint so configs can reference it
    if let Some(selected) = &outcome.selected {
        let src = cfg.paths.checkpoints.join(format!("{selected}.ckpt"));
        let dst = cfg.paths.checkpoints.join("best.ckpt");
        std::fs::copy(&src, &dst).map_err(|e| CollegeError::io(dst.display().to_string(), e))?;
    }
    let summary = TrainSummary {
        steps_run: outcome.steps_run,
        skipped_steps: outcome.skipped_steps,
        skipped_episodes: outcome.skipped_episodes,
        selected_checkpoint: outcome.selected.clone(),
        final_total_loss: outcome.curve.last().map(|(_, l)| l.total),
        checkpoint_dir: cfg.paths.checkpoints.clone(),
    };
    println!(
        "train: {} steps ({} skipped), selected {:?}, final loss {:?}",
        summary.steps_run,
        summary.skipped_steps,
        summary.selected_checkpoint,
        summary.final_total_loss
    );
    emit_report(
        &Report {
            command: "train".into(),
            seed: cfg.seed,
            args: args_map(&[("data", cfg.paths.data.display().to_string())]),
            summary,
            items: outcome.ledger,
            config: cfg.clone(),
        },
        &cfg.paths.reports,
    )
}

// ---------------------------------------------------------------------------
// gen-embedding and define
// ---------------------------------------------------------------------------

/// A word file: first non-empty line is the surface form, every following
/// non-empty line is one support sentence.
pub fn read_word_file(path: &Path) -> Result<(String, Vec<String>)> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CollegeError::io(&p, e))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let word = lines
        .next()
        .ok_or_else(|| CollegeError::format(&p, "empty word file"))?
        .to_string();
    let supports: Vec<String> = lines.map(|l| l.to_string()).collect();
    if supports.is_empty() {
        return Err(CollegeError::format(
            &p,
            "word file needs at least one support sentence after the word",
        ));
    }
    Ok((word, supports))
}

#[derive(Serialize)]
struct GenEmbeddingSummary {
    word: String,
    provider: String,
    k_used: u32,
    e_in_norm: f64,
    e_out_norm: f64,
    output: PathBuf,
}

pub fn gen_embedding(
    cfg: &AppConfig,
    word_file: &Path,
    output: &Path,
    provider: &str,
    k_shot: Option<usize>,
) -> Result<PathBuf> {
    let (word, mut supports) = read_word_file(word_file)?;
    if let Some(k) = k_shot {
        supports.truncate(k.max(1));
    }
    let ctx = ModelContext::load(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = ctx.with_provider(provider, |p| p.generate(&word, &supports, &mut rng))?;
    out.embedding.save(output)?;
    let (e_in_norm, e_out_norm) = college::baselines::embedding_norms(&out.embedding);
    let summary = GenEmbeddingSummary {
        word: word.clone(),
        provider: provider.to_string(),
        k_used: out.embedding.k_used,
        e_in_norm,
        e_out_norm,
        output: output.to_path_buf(),
    };
    println!(
        "gen-embedding: {word:?} ({} supports) -> {} (|e_in| {:.3}, |e_out| {:.3})",
        summary.k_used,
        output.display(),
        e_in_norm,
        e_out_norm
    );
    emit_report(
        &Report {
            command: "gen-embedding".into(),
            seed: cfg.seed,
            args: args_map(&[
                ("word_file", word_file.display().to_string()),
                ("provider", provider.to_string()),
            ]),
            summary,
            items: Vec::<u8>::new(),
            config: cfg.clone(),
        },
        &cfg.paths.reports,
    )
}

#[derive(Serialize)]
struct DefineSummary {
    word: String,
    provider: String,
    definition: String,
    empty: bool,
    supports_used: usize,
}

pub fn define(
    cfg: &AppConfig,
    word_file: &Path,
    provider: &str,
    k_shot: Option<usize>,
    max_new: Option<usize>,
) -> Result<PathBuf> {
    let (word, mut supports) = read_word_file(word_file)?;
    if let Some(k) = k_shot {
        supports.truncate(k.max(1));
    }
    let max_new = max_new.unwrap_or(cfg.harness.max_new_tokens);
    let ctx = ModelContext::load(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let def = ctx.with_provider(provider, |p| {
        definition_from_supports(
            &ctx.lm,
            p,
            &word,
            &supports,
            Decoding::Greedy,
            max_new,
            &mut rng,
        )
    })?;
    println!("{word}: {}", if def.empty { "(empty)" } else { &def.text });
    let summary = DefineSummary {
        word,
        provider: provider.to_string(),
        definition: def.text.clone(),
        empty: def.empty,
        supports_used: supports.len(),
    };
    emit_report(
        &Report {
            command: "define".into(),
            seed: cfg.seed,
            args: args_map(&[
                ("word_file", word_file.display().to_string()),
                ("provider", provider.to_string()),
            ]),
            summary,
            items: Vec::<u8>::new(),
            config: cfg.clone(),
        },
        &cfg.paths.reports,
    )
}

// ---------------------------------------------------------------------------
// eval-gre
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalGreSummary {
    provider: String,
    k_shot: usize,
    trials: usize,
    with_definition: bool,
    prompting: bool,
    items: usize,
    mean_accuracy: f64,
    sd: f64,
    accuracy_by_k: Vec<(usize, f64)>,
}

#[allow(clippy::too_many_arguments)]
pub fn eval_gre(
    cfg: &AppConfig,
    tasks: &Path,
    provider: &str,
    k_shot: usize,
    trials: usize,
    with_definition: bool,
    prompting: bool,
    plot: bool,
) -> Result<PathBuf> {
    let items = load_gre_items(tasks)?;
    let ctx = ModelContext::load(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outcome: GREOutcome = ctx.with_provider(provider, |p| {
        eval_gre_dataset(
            &ctx.lm,
            p,
            &items,
            trials,
            k_shot,
            with_definition,
            prompting,
            &mut rng,
        )
    })?;
    let mut accuracy_by_k = Vec::new();
    if plot {
        for &k in &cfg.harness.k_values {
            let out: GREOutcome = ctx.with_provider(provider, |p| {
                eval_gre_dataset(
                    &ctx.lm,
                    p,
                    &items,
                    trials,
                    k,
                    with_definition,
                    prompting,
                    &mut rng,
                )
            })?;
            accuracy_by_k.push((k, out.mean_accuracy));
        }
        let plot_path = cfg.paths.reports.join("eval-gre_accuracy_vs_k.svg");
        std::fs::create_dir_all(&cfg.paths.reports)
            .map_err(|e| CollegeError::io(cfg.paths.reports.display().to_string(), e))?;
        write_accuracy_plot(
            &plot_path,
            &format!("fill-in-the-blank accuracy vs k ({provider})"),
            &accuracy_by_k,
        )?;
        println!("eval-gre: wrote {}", plot_path.display());
    }
    println!(
        "eval-gre: {provider} {k_shot}-shot over {} items x {trials} trials: {:.1}% ± {:.1}",
        items.len(),
        outcome.mean_accuracy * 100.0,
        outcome.sd * 100.0
    );
    let summary = EvalGreSummary {
        provider: provider.to_string(),
        k_shot,
        trials,
        with_definition,
        prompting,
        items: items.len(),
        mean_accuracy: outcome.mean_accuracy,
        sd: outcome.sd,
        accuracy_by_k,
    };
    emit_report(
        &Report {
            command: "eval-gre".into(),
            seed: cfg.seed,
            args: args_map(&[
                ("tasks", tasks.display().to_string()),
                ("provider", provider.to_string()),
                ("k_shot", k_shot.to_string()),
            ]),
            summary,
            items: outcome,
            config: cfg.clone(),
        },
        &cfg.paths.reports,
    )
}

// ---------------------------------------------------------------------------
// eval-slang
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalSlangSummary {
    provider: String,
    k_shot: usize,
    n_distractors: usize,
    prompting: bool,
    items: usize,
    accuracy: f64,
    accuracy_by_k: Vec<(usize, f64)>,
}

#[allow(clippy::too_many_arguments)]
pub fn eval_slang_cmd(
    cfg: &AppConfig,
    tasks: &Path,
    provider: &str,
    k_shot: usize,
    n_distractors: usize,
    prompting: bool,
    plot: bool,
) -> Result<PathBuf> {
    let items = load_slang_items(tasks)?;
    let ctx = ModelContext::load(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outcome: SlangOutcome = ctx.with_provider(provider, |p| {
        eval_slang(&ctx.lm, p, &items, n_distractors, k_shot, prompting, &mut rng)
    })?;
    let mut accuracy_by_k = Vec::new();
    if plot {
        for &k in &cfg.harness.k_values {
            let out: SlangOutcome = ctx.with_provider(provider, |p| {
                eval_slang(&ctx.lm, p, &items, n_distractors, k, prompting, &mut rng)
            })?;
            accuracy_by_k.push((k, out.accuracy));
        }
        let plot_path = cfg.paths.reports.join("eval-slang_accuracy_vs_k.svg");
        std::fs::create_dir_all(&cfg.paths.reports)
            .map_err(|e| CollegeError::io(cfg.paths.reports.display().to_string(), e))?;
        write_accuracy_plot(
            &plot_path,
            &format!("slang accuracy vs k ({provider})"),
            &accuracy_by_k,
        )?;
        println!("eval-slang: wrote {}", plot_path.display());
    }
    println!(
        "eval-slang: {provider} {k_shot}-shot over {} items: {:.1}%",
        items.len(),
        outcome.accuracy * 100.0
    );
    let summary = EvalSlangSummary {
        provider: provider.to_string(),
        k_shot,
        n_distractors,
        prompting,
        items: items.len(),
        accuracy: outcome.accuracy,
        accuracy_by_k,
    };
    emit_report(
        &Report {
            command: "eval-slang".into(),
            seed: cfg.seed,
            args: args_map(&[
                ("tasks", tasks.display().to_string()),
                ("provider", provider.to_string()),
            ]),
            summary,
            items: outcome,
            config: cfg.clone(),
        },
        &cfg.paths.reports,
    )
}

// ---------------------------------------------------------------------------
// eval-defgen
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalDefgenSummary {
    champion: String,
    items: usize,
    matches: usize,
    abstains: usize,
}

pub fn eval_defgen(
    cfg: &AppConfig,
    tasks: &Path,
    champion: &str,
    max_new: Option<usize>,
) -> Result<PathBuf> {
    let items = load_defgen_items(tasks)?;
    let ctx = ModelContext::load(cfg)?;
    let judge = judge_from_config(cfg)?;
    let max_new = max_new.unwrap_or(cfg.harness.max_new_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // champion first, then every other constructible provider
    let college = CollegeProvider {
        encoder: &ctx.encoder,
        mlm: &ctx.mlm,
        in_context: false,
    };
    let pcollege = CollegeProvider {
        encoder: &ctx.encoder,
        mlm: &ctx.mlm,
        in_context: true,
    };
    let tt1 = TokenTuningProvider::tt1(&ctx.lm);
    let tt2 = TokenTuningProvider::tt2(&ctx.lm);
    let prompting = PromptingProvider::for_model(&ctx.lm);
    let additive = match (&ctx.table, &ctx.map) {
        (Some(table), Some(map)) => Some(AdditiveProvider {
            table,
            map,
            in_context: false,
        }),
        _ => None,
    };
    let mut named: Vec<(&str, &dyn EmbeddingProvider)> = vec![
        ("college", &college),
        ("tt1", &tt1),
        ("tt2", &tt2),
        ("prompting", &prompting),
        ("prompting+college", &pcollege),
    ];
    if let Some(a) = &additive {
        named.push(("additive", a));
    }
    let champ_pos = named
        .iter()
        .position(|(n, _)| *n == champion)
        .ok_or_else(|| {
            CollegeError::InvalidInput(format!(
                "unknown or unavailable champion {champion:?}; valid here: {}",
                named.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ))
        })?;
    named.swap(0, champ_pos);
    let providers: Vec<&dyn EmbeddingProvider> = named.iter().map(|(_, p)| *p).collect();

    let embedder = MlmTokenEmbedder { mlm: &ctx.mlm };
    let report: TournamentReport = run_def_tournament(
        &ctx.lm,
        &providers,
        &items,
        &cfg.harness.k_values,
        judge.as_ref(),
        cfg.harness.judge_retries,
        &embedder,
        max_new,
        &mut rng,
    )?;
    println!("eval-defgen: {} items, {} matches, {} abstains", items.len(), report.matches, report.abstains);
    for row in &report.table {
        println!(
            "  {:<20} elo {:7.2} [{:7.2}, {:7.2}]  mean F1 {:.3}",
            row.name, row.rating, row.ci_low, row.ci_high, row.mean_f1
        );
    }
    let summary = EvalDefgenSummary {
        champion: champion.to_string(),
        items: items.len(),
        matches: report.matches,
        abstains: report.abstains,
    };
    emit_report(
        &Report {
            command: "eval-defgen".into(),
            seed: cfg.seed,
            args: args_map(&[
                ("tasks", tasks.display().to_string()),
                ("provider", champion.to_string()),
            ]),
            summary,
            items: report,
            config: cfg.clone(),
        },
        &cfg.paths.reports,
    )
}

// ---------------------------------------------------------------------------
// demo fixture emission (synthetic corpus for trying the pipeline end to end)
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FixturesSummary {
    corpus: PathBuf,
    episodes: PathBuf,
    gre: PathBuf,
    slang: PathBuf,
    defgen: PathBuf,
    lm: PathBuf,
    mlm: PathBuf,
    vectors: PathBuf,
    config: PathBuf,
    config_trained: PathBuf,
    lm_loss_start: f64,
    lm_loss_end: f64,
}

/// Writes a self-contained synthetic working set: corpus text, an episode
/// dataset, the three task files, pretrained toy LM/MLM checkpoints, a
/// static word-vector table for the additive baseline, and two ready
/// configs (`config.toml` with a fresh encoder for training,
/// `config-trained.toml` pointing at `ckpts/best.ckpt`).
pub fn make_fixtures(
    cfg: &AppConfig,
    dir: &Path,
    concepts: usize,
    pretrain_steps: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CollegeError::io(dir.display().to_string(), e))?;
    let corpus = synth::build(synth::SynthSpec {
        n_concepts: concepts.max(8),
        held_out_concepts: (concepts.max(8) / 4).max(1),
        sentences_per_concept: 12,
        filler_sentences: 40,
        seed: cfg.seed,
    });
    let corpus_path = dir.join("corpus.txt");
    std::fs::write(&corpus_path, corpus.joined_text())
        .map_err(|e| CollegeError::io(corpus_path.display().to_string(), e))?;
    let episodes_path = dir.join("episodes.jsonl");
    emit_episodes(&corpus.records, &episodes_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gre_path = dir.join("gre.json");
    let gre = corpus.fixture_gre_items(16, 4, &mut rng);
    std::fs::write(&gre_path, serde_json::to_string_pretty(&gre).unwrap())
        .map_err(|e| CollegeError::io(gre_path.display().to_string(), e))?;
    let slang_path = dir.join("slang.json");
    let slang = corpus.fixture_slang_items();
    std::fs::write(&slang_path, serde_json::to_string_pretty(&slang).unwrap())
        .map_err(|e| CollegeError::io(slang_path.display().to_string(), e))?;
    let defgen_path = dir.join("defgen.json");
    let defgen = corpus.fixture_defgen_items();
    std::fs::write(&defgen_path, serde_json::to_string_pretty(&defgen).unwrap())
        .map_err(|e| CollegeError::io(defgen_path.display().to_string(), e))?;

    // pretrained toy stack over the same corpus
    let model_cfg = college::models::ToyModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_seq: 48,
    };
    let mlm_cfg = college::models::ToyModelConfig {
        n_layers: 1,
        ..model_cfg
    };
    let corpus_text = corpus.joined_text();
    let mut lm = ToyCausalLm::new(
        &mut rng,
        college::tok::WordTokenizer::from_corpus(&[corpus_text.as_str()]),
        model_cfg,
    );
    let mut mlm = ToyMaskedLm::new(
        &mut rng,
        college::tok::WordTokenizer::from_corpus(&[corpus_text.as_str()]),
        mlm_cfg,
    );
    let curve =
        college::models::pretrain_causal_lm(&mut lm, &corpus.sentences, pretrain_steps, 12, 3e-3, &mut rng);
    college::models::pretrain_masked_lm(
        &mut mlm,
        &corpus.sentences,
        pretrain_steps.max(2) * 2 / 3,
        12,
        3e-3,
        0.25,
        &mut rng,
    );
    let lm_path = dir.join("lm.bin");
    let mlm_path = dir.join("mlm.bin");
    lm.save(&lm_path)?;
    mlm.save(&mlm_path)?;

    // static vectors for the additive baseline: the LM's own input rows
    let mut table = college::baselines::StaticVectorTable::new(lm.cfg.d_model);
    for (i, word) in lm.tokenizer.words().iter().enumerate() {
        table.insert(word, lm.emb_in.row(i).to_vec())?;
    }
    let vectors_path = dir.join("vectors.txt");
    table.save(&vectors_path)?;

    // ready-to-run configs
    let write_config = |path: &Path, encoder: &str| -> Result<()> {
        let text = format!(
            r#"seed = {seed}

[models]
lm = "file:{lm}"
mlm = "file:{mlm}"
encoder = "{encoder}"
judge = "stub:longer"
static_table = "{vectors}"

[paths]
data = "{data}"
checkpoints = "{ckpts}"
reports = "{reports}"

[train]
steps = 300
batch_size = 4
checkpoint_every = 50
held_out = {held}

[harness]
k_shot = 2
trials = 10
max_new_tokens = 12
k_values = [1, 2, 4]
"#,
            seed = cfg.seed,
            lm = lm_path.display(),
            mlm = mlm_path.display(),
            vectors = vectors_path.display(),
            data = episodes_path.display(),
            ckpts = dir.join("ckpts").display(),
            reports = dir.join("reports").display(),
            held = corpus.records.len() - corpus.held_out_from,
        );
        std::fs::write(path, text).map_err(|e| CollegeError::io(path.display().to_string(), e))
    };
    let config_path = dir.join("config.toml");
    write_config(&config_path, "init:seed=5,heads=8")?;
    let config_trained_path = dir.join("config-trained.toml");
    let best = dir.join("ckpts").join("best.ckpt");
    write_config(&config_trained_path, &format!("file:{}", best.display()))?;

    let summary = FixturesSummary {
        corpus: corpus_path,
        episodes: episodes_path,
        gre: gre_path,
        slang: slang_path,
        defgen: defgen_path,
        lm: lm_path,
        mlm: mlm_path,
        vectors: vectors_path,
        config: config_path,
        config_trained: config_trained_path,
        lm_loss_start: curve.first().copied().unwrap_or(f64::NAN),
        lm_loss_end: curve.last().copied().unwrap_or(f64::NAN),
    };
    println!(
        "make-fixtures: corpus, episodes, tasks, pretrained toys (lm loss {:.2} -> {:.2}) and configs under {}",
        summary.lm_loss_start,
        summary.lm_loss_end,
        dir.display()
    );
    emit_report(
        &Report {
            command: "make-fixtures".into(),
            seed: cfg.seed,
            args: args_map(&[("dir", dir.display().to_string())]),
            summary,
            items: Vec::<u8>::new(),
            config: cfg.clone(),
        },
        &cfg.paths.reports,
    )
}
