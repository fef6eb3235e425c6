//! Configuration file handling: a TOML file fully describes a run (models,
//! paths, training, filtering, harness settings, seed); CLI flags override
//! individual fields and the resolved config is echoed into every report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use college::data::FilterConfig;
use college::encoder::{ConceptEncoder, EncoderConfig};
use college::error::{CollegeError, Result};
use college::models::{LanguageModel, ToyCausalLm, ToyMaskedLm, ToyModelConfig};
use college::tok::WordTokenizer;
use college::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub models: ModelsConfig,
    pub paths: PathsConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub harness: HarnessConfig,
    pub data: DataConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 42,
            models: ModelsConfig::default(),
            paths: PathsConfig::default(),
            train: TrainConfig::default(),
            filter: FilterConfig::default(),
            harness: HarnessConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    /// "toy:seed=7,d=32,layers=1,heads=4,ff=64,max_seq=48,vocab=<path>" or
    /// "file:<path>".
    pub mlm: String,
    pub lm: String,
    /// "init:seed=5,heads=4,ff=128" or "file:<path>".
    pub encoder: String,
    /// "stub:tie" | "stub:first" | "stub:longer" | "http:<url>".
    pub judge: String,
    pub judge_model: String,
    pub judge_api_key_env: String,
    /// Static word-vector table for the additive baseline (optional).
    pub static_table: Option<PathBuf>,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            mlm: String::new(),
            lm: String::new(),
            encoder: "init:seed=5,heads=4,ff=128".into(),
            judge: "stub:tie".into(),
            judge_model: "judge".into(),
            judge_api_key_env: "COLLEGE_JUDGE_API_KEY".into(),
            static_table: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: PathBuf::from("episodes.jsonl"),
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub k_shot: usize,
    pub trials: usize,
    pub n_distractors: usize,
    pub max_new_tokens: usize,
    /// K values swept when a plot is requested.
    pub k_values: Vec<usize>,
    pub judge_retries: u32,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            k_shot: 1,
            trials: 10,
            n_distractors: 3,
            max_new_tokens: 24,
            k_values: vec![1, 2, 3, 4],
            judge_retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Minimum corpus occurrences for a concept-lexicon word.
    pub lexicon_min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            lexicon_min_count: 2,
        }
    }
}

/// Field-by-field CLI overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub report_dir: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub k_shot: Option<usize>,
    pub trials: Option<usize>,
    pub n_distractors: Option<usize>,
    pub max_new: Option<usize>,
}

pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<AppConfig> {
    let p = path.display().to_string();
    if !path.exists() {
        return Err(CollegeError::NotFound(format!("config file {p} not found")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CollegeError::io(&p, e))?;
    let mut cfg: AppConfig =
        toml::from_str(&text).map_err(|e| CollegeError::format(&p, e.to_string()))?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(d) = &overrides.report_dir {
        cfg.paths.reports = d.clone();
    }
    if let Some(d) = &overrides.data {
        cfg.paths.data = d.clone();
    }
    if let Some(d) = &overrides.checkpoint_dir {
        cfg.paths.checkpoints = d.clone();
    }
    if let Some(v) = overrides.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = overrides.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = overrides.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = overrides.k_shot {
        cfg.harness.k_shot = v;
    }
    if let Some(v) = overrides.trials {
        cfg.harness.trials = v;
    }
    if let Some(v) = overrides.n_distractors {
        cfg.harness.n_distractors = v;
    }
    if let Some(v) = overrides.max_new {
        cfg.harness.max_new_tokens = v;
    }
    Ok(cfg)
}

/// Key=value pairs of a "kind:key=v,key=v" spec string.
fn spec_fields<'a>(spec: &'a str, kind: &str) -> Result<BTreeMap<&'a str, &'a str>> {
    let rest = spec.strip_prefix(&format!("{kind}:")).ok_or_else(|| {
        CollegeError::InvalidInput(format!("expected a {kind}: spec, got {spec:?}"))
    })?;
    let mut map = BTreeMap::new();
    for part in rest.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            CollegeError::InvalidInput(format!("bad field {part:?} in spec {spec:?}"))
        })?;
        map.insert(k.trim(), v.trim());
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(
    map: &BTreeMap<&str, &str>,
    key: &str,
    spec: &str,
) -> Result<T> {
    map.get(key)
        .ok_or_else(|| CollegeError::InvalidInput(format!("spec {spec:?} lacks {key}=")))?
        .parse()
        .map_err(|_| CollegeError::InvalidInput(format!("bad {key}= in spec {spec:?}")))
}

fn toy_model_parts(spec: &str) -> Result<(u64, ToyModelConfig, WordTokenizer)> {
    let map = spec_fields(spec, "toy")?;
    let seed: u64 = field(&map, "seed", spec)?;
    let cfg = ToyModelConfig {
        d_model: field(&map, "d", spec)?,
        n_layers: field(&map, "layers", spec)?,
        n_heads: field(&map, "heads", spec)?,
        d_ff: field(&map, "ff", spec)?,
        max_seq: field(&map, "max_seq", spec)?,
    };
    let vocab_path: String = field(&map, "vocab", spec)?;
    let text = std::fs::read_to_string(&vocab_path)
        .map_err(|e| CollegeError::io(&vocab_path, e))?;
    Ok((seed, cfg, WordTokenizer::from_corpus(&[text.as_str()])))
}

pub fn load_lm(spec: &str) -> Result<ToyCausalLm> {
    if let Some(path) = spec.strip_prefix("file:") {
        return ToyCausalLm::load(Path::new(path));
    }
    let (seed, cfg, tok) = toy_model_parts(spec)?;
    use rand::SeedableRng;
    Ok(ToyCausalLm::new(
        &mut ChaCha8Rng::seed_from_u64(seed),
        tok,
        cfg,
    ))
}

pub fn load_mlm(spec: &str) -> Result<ToyMaskedLm> {
    if let Some(path) = spec.strip_prefix("file:") {
        return ToyMaskedLm::load(Path::new(path));
    }
    let (seed, cfg, tok) = toy_model_parts(spec)?;
    use rand::SeedableRng;
    Ok(ToyMaskedLm::new(
        &mut ChaCha8Rng::seed_from_u64(seed),
        tok,
        cfg,
    ))
}

pub fn load_encoder(spec: &str, lm: &ToyCausalLm, mlm: &ToyMaskedLm) -> Result<ConceptEncoder> {
    if let Some(path) = spec.strip_prefix("file:") {
        return ConceptEncoder::load(Path::new(path));
    }
    let map = spec_fields(spec, "init")?;
    let seed: u64 = field(&map, "seed", spec)?;
    // 8 heads unless the extractor width demands fewer
    let heads: usize = map
        .get("heads")
        .map(|v| v.parse())
        .transpose()
        .map_err(|_| CollegeError::InvalidInput(format!("bad heads= in spec {spec:?}")))?
        .unwrap_or(8);
    let d_ff: usize = map
        .get("ff")
        .map(|v| v.parse())
        .transpose()
        .map_err(|_| CollegeError::InvalidInput(format!("bad ff= in spec {spec:?}")))?
        .unwrap_or(4 * mlm.d_enc());
    let cfg = EncoderConfig {
        mlm_checkpoint_id: spec.to_string(),
        n_attn_heads: heads,
        d_enc: mlm.d_enc(),
        d_ff,
        init_target_in_norm: lm.avg_in_row_norm(),
        init_target_out_norm: lm.avg_out_row_norm(),
    };
    use rand::SeedableRng;
    ConceptEncoder::new(
        &mut ChaCha8Rng::seed_from_u64(seed),
        &cfg,
        lm.d_in(),
        lm.d_out(),
    )
}
