//! Command implementations behind the `mctrans` binary: synthetic corpus
//! generation, training, translation, decoding-grid evaluation, and gradient
//! checking. All randomness flows from the single config seed, fanned out to
//! named sub-seeds.
//!
//! Exit codes: 0 success, 1 check failure, 2 input/config error, 3 runtime
//! numeric failure.

use mctrans::checkpoint;
use mctrans::data::{load_corpus, select_channels, write_corpus, MultiChannelSample, Vocabulary};
use mctrans::decoding::translate_corpus;
use mctrans::error::Error;
use mctrans::gradcheck::{gradcheck_model, GRADCHECK_TOLERANCE};
use mctrans::metrics::{bleu4, rouge_l, EvalPair, ROUGE_BETA};
use mctrans::model::{fuse_early, FusionMode, Model, ModelConfig};
use mctrans::synth::synth_generate;
use mctrans::tensor::Scalar;
use mctrans::training::{
    greedy_dev_scores, train_loop, LossConfig, OptimizerConfig, ScheduleConfig,
    DEFAULT_MAX_DECODE_LEN,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Map an error to the process exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_BAD_INPUT,
    }
}

/// Derive a named sub-seed from the run seed.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed
}

// ── run configuration ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub dev_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run_out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Drop tokens below this corpus frequency (they encode to `<unk>`).
    pub min_freq: usize,
    /// Keep only these corpus channels, in order.
    pub use_channels: Option<Vec<usize>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { min_freq: 1, use_channels: None }
    }
}

fn default_heads() -> usize {
    1
}

fn default_t_max() -> usize {
    mctrans::embeddings::DEFAULT_T_MAX
}

fn default_vocab_size() -> usize {
    11
}

/// The `[model]` section: architecture minus the corpus-derived quantities.
/// `channel_dims` is optional; training derives dims from the corpus (and
/// validates them when pinned here), gradient checking requires them.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_m: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub anchor_classes: Vec<usize>,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default)]
    pub channel_dims: Option<Vec<usize>>,
    /// Used only when no corpus is loaded (gradcheck).
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "mctrans::embeddings::EmbeddingSwitches::channel_default")]
    pub channel_embedding: mctrans::embeddings::EmbeddingSwitches,
    #[serde(default = "mctrans::embeddings::EmbeddingSwitches::word_default")]
    pub word_embedding: mctrans::embeddings::EmbeddingSwitches,
}

impl ModelSection {
    pub fn to_model_config(
        &self,
        channel_dims: Vec<usize>,
        vocab_size: usize,
        loss: &LossConfig,
    ) -> ModelConfig {
        ModelConfig {
            channel_dims,
            d_m: self.d_m,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            vocab_size,
            anchor_classes: self.anchor_classes.clone(),
            fusion: self.fusion,
            lambda_t: loss.lambda_t,
            lambda_a: loss.lambda_a,
            channel_embedding: self.channel_embedding,
            word_embedding: self.word_embedding,
            t_max: self.t_max,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingConfig {
    pub max_len: usize,
    pub beam: usize,
    pub alpha: f64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig { max_len: DEFAULT_MAX_DECODE_LEN, beam: 0, alpha: 0.0 }
    }
}

/// One structured configuration document covering the whole run. Unknown
/// keys are hard errors; the resolved form (defaults filled in) is dumped
/// next to the outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub data: DataConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub decoding: DecodingConfig,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }
}

// ── synth ────────────────────────────────────────────────────────────

/// Generate the synthetic corpus and write train/dev/test manifests with an
/// 80/10/10 split. Returns the split sizes.
pub fn run_synth(out_dir: &Path, n: usize, seed: u64) -> Result<(usize, usize, usize), Error> {
    if n == 0 {
        return Err(Error::Input("need at least one synthetic sample (--n >= 1)".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Input(format!("cannot create {}: {e}", out_dir.display())))?;
    let samples = synth_generate(n, sub_seed(seed, "synth"))?;
    let n_train = n * 8 / 10;
    let n_dev = (n - n_train) / 2;
    let (train, rest) = samples.split_at(n_train);
    let (dev, test) = rest.split_at(n_dev);
    write_corpus(&out_dir.join("train.jsonl"), "features", train)?;
    write_corpus(&out_dir.join("dev.jsonl"), "features", dev)?;
    write_corpus(&out_dir.join("test.jsonl"), "features", test)?;
    Ok((train.len(), dev.len(), test.len()))
}

// ── train ────────────────────────────────────────────────────────────

/// Load a corpus and apply channel selection / early fusion as configured.
fn prepare_corpus<F: Scalar>(
    manifest: &Path,
    data: &DataConfig,
    fusion: FusionMode,
) -> Result<Vec<MultiChannelSample<F>>, Error> {
    let mut corpus = load_corpus::<F>(manifest)?;
    if let Some(keep) = &data.use_channels {
        corpus = select_channels(corpus, keep)?;
    }
    if fusion == FusionMode::Early {
        corpus = fuse_early(&corpus)?;
    }
    Ok(corpus)
}

/// Final metrics of a training run.
pub struct TrainSummary {
    pub best_bleu: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub checkpoint: PathBuf,
    pub loss_trace: Vec<f64>,
}

pub fn run_train(config_path: &Path) -> Result<TrainSummary, Error> {
    let cfg = RunConfig::from_path(config_path)?;
    match cfg.precision {
        Precision::F32 => run_train_typed::<f32>(&cfg),
        Precision::F64 => run_train_typed::<f64>(&cfg),
    }
}

pub fn run_train_typed<F: Scalar>(cfg: &RunConfig) -> Result<TrainSummary, Error> {
    let train_manifest = cfg
        .paths
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("paths.train_manifest is required for training".into()))?;
    let dev_manifest = cfg
        .paths
        .dev_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("paths.dev_manifest is required for training".into()))?;
    let train = prepare_corpus::<F>(train_manifest, &cfg.data, cfg.model.fusion)?;
    let dev = prepare_corpus::<F>(dev_manifest, &cfg.data, cfg.model.fusion)?;
    let vocab = Vocabulary::build(&train, cfg.data.min_freq)?;
    // channel dims come from the (possibly fused) corpus and are validated
    // against the config when it pins them
    let dims: Vec<usize> = train[0].channels.iter().map(|c| c.shape()[1]).collect();
    if let Some(expected) = &cfg.model.channel_dims {
        let derived = if cfg.model.fusion == FusionMode::Early {
            vec![expected.iter().sum::<usize>()]
        } else {
            expected.clone()
        };
        if derived != dims {
            return Err(Error::Config(format!(
                "config channel_dims {expected:?} do not match corpus dims {dims:?}"
            )));
        }
    }
    // with early fusion the model config records the original per-channel dims
    let config_dims = match (&cfg.model.fusion, &cfg.model.channel_dims) {
        (FusionMode::Early, Some(orig)) => orig.clone(),
        _ => dims,
    };
    let model_cfg = cfg.model.to_model_config(config_dims, vocab.size(), &cfg.loss);
    model_cfg.validate()?;
    let mut model = Model::<F>::new(model_cfg.clone(), sub_seed(cfg.seed, "init"))?;

    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    std::fs::write(cfg.paths.out_dir.join("resolved_config.toml"), cfg.resolved_toml())?;
    let log_path = cfg.paths.out_dir.join("train.log");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let max_len = cfg.decoding.max_len;
    let outcome = train_loop(
        &mut model,
        &train,
        &dev,
        &vocab,
        &cfg.loss,
        &cfg.optimizer,
        &cfg.schedule,
        sub_seed(cfg.seed, "shuffle"),
        |m, d, v| greedy_dev_scores(m, d, v, max_len),
        |line| {
            println!("{line}");
            let _ = writeln!(log_file, "{line}");
        },
    )?;
    let checkpoint_path = cfg.paths.out_dir.join("model.ckpt");
    checkpoint::save(&checkpoint_path, &model_cfg, &vocab, &outcome.best_params)?;
    println!(
        "done steps={} best_bleu4={:.4} best_step={} checkpoint={}",
        outcome.steps_run,
        outcome.best_bleu,
        outcome.best_step,
        checkpoint_path.display()
    );
    Ok(TrainSummary {
        best_bleu: outcome.best_bleu,
        best_step: outcome.best_step,
        steps_run: outcome.steps_run,
        checkpoint: checkpoint_path,
        loss_trace: outcome.loss_trace,
    })
}

// ── translate / evaluate ─────────────────────────────────────────────

fn load_for_inference(
    checkpoint_path: &Path,
    manifest: &Path,
    config: Option<&Path>,
) -> Result<(Model<f32>, Vocabulary, Vec<MultiChannelSample<f32>>), Error> {
    let (model_cfg, vocab, bank) = checkpoint::load::<f32>(checkpoint_path)?;
    let data = match config {
        Some(path) => RunConfig::from_path(path)?.data,
        None => DataConfig::default(),
    };
    let corpus = prepare_corpus::<f32>(manifest, &data, model_cfg.fusion)?;
    let model = Model::from_parts(model_cfg, bank)?;
    let dims: Vec<usize> = corpus[0].channels.iter().map(|c| c.shape()[1]).collect();
    let expected = model.config().graph_dims();
    if dims != expected {
        return Err(Error::Dim {
            op: "translate",
            details: format!(
                "manifest channel dims {dims:?} do not match checkpoint dims {expected:?}"
            ),
        });
    }
    Ok((model, vocab, corpus))
}

/// Translate a manifest: one line per sample in manifest order.
pub fn run_translate(
    checkpoint_path: &Path,
    manifest: &Path,
    width: usize,
    alpha: f64,
    max_len: usize,
    config: Option<&Path>,
) -> Result<Vec<String>, Error> {
    let (model, vocab, corpus) = load_for_inference(checkpoint_path, manifest, config)?;
    let translations = translate_corpus(&model, &corpus, &vocab, width, alpha, max_len)?;
    Ok(translations.into_iter().map(|tokens| tokens.join(" ")).collect())
}

/// One decoding-grid cell.
#[derive(Clone, Copy, Debug)]
pub struct GridCell {
    pub width: usize,
    pub alpha: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

pub struct EvaluateReport {
    pub cells: Vec<GridCell>,
    pub best: GridCell,
    pub test: Option<GridCell>,
}

fn score_translations(
    hyps: &[Vec<String>],
    corpus: &[MultiChannelSample<f32>],
) -> Result<(f64, f64), Error> {
    let pairs: Vec<EvalPair> = hyps
        .iter()
        .zip(corpus)
        .map(|(h, s)| EvalPair { hypothesis: h.clone(), reference: s.target.clone() })
        .collect();
    Ok((bleu4(&pairs)?, rouge_l(&pairs, ROUGE_BETA)?))
}

/// Sweep beam widths 0..=10 × α 0..=5 on the dev manifest; the best cell (by
/// dev BLEU-4, first in scan order on ties) is optionally applied to a test
/// manifest.
pub fn run_evaluate(
    checkpoint_path: &Path,
    dev_manifest: &Path,
    test_manifest: Option<&Path>,
    max_len: usize,
    config: Option<&Path>,
) -> Result<EvaluateReport, Error> {
    let (model, vocab, dev) = load_for_inference(checkpoint_path, dev_manifest, config)?;
    let mut cells = Vec::with_capacity(11 * 6);
    let mut best: Option<GridCell> = None;
    for width in 0..=10usize {
        for alpha_i in 0..=5usize {
            let alpha = alpha_i as f64;
            let hyps = translate_corpus(&model, &dev, &vocab, width, alpha, max_len)?;
            let (b, r) = score_translations(&hyps, &dev)?;
            let cell = GridCell { width, alpha, bleu4: b, rouge_l: r };
            if best.map_or(true, |bc| b > bc.bleu4) {
                best = Some(cell);
            }
            cells.push(cell);
        }
    }
    let best = best.expect("non-empty grid");
    let test = match test_manifest {
        Some(path) => {
            let (_, _, test_corpus) = load_for_inference(checkpoint_path, path, config)?;
            let hyps =
                translate_corpus(&model, &test_corpus, &vocab, best.width, best.alpha, max_len)?;
            let (b, r) = score_translations(&hyps, &test_corpus)?;
            Some(GridCell { width: best.width, alpha: best.alpha, bleu4: b, rouge_l: r })
        }
        None => None,
    };
    Ok(EvaluateReport { cells, best, test })
}

// ── gradcheck ────────────────────────────────────────────────────────

pub struct GradCheckSummary {
    pub max_rel_err: f64,
    pub passed: bool,
    pub worst: Vec<(String, usize, f64)>,
    pub checked_scalars: usize,
}

/// Finite-difference check of the configured (tiny) model. `sabotage`
/// deliberately corrupts one recorded gradient to verify detection.
pub fn run_gradcheck(
    config_path: &Path,
    seed: u64,
    sabotage: bool,
) -> Result<GradCheckSummary, Error> {
    let cfg = RunConfig::from_path(config_path)?;
    if cfg.model.d_m > 16 {
        return Err(Error::Config(format!(
            "gradient checking needs a tiny model (d_m <= 16), got d_m = {}",
            cfg.model.d_m
        )));
    }
    let dims = cfg.model.channel_dims.clone().ok_or_else(|| {
        Error::Config("model.channel_dims is required for gradcheck (no corpus is loaded)".into())
    })?;
    let model_cfg = cfg.model.to_model_config(dims, cfg.model.vocab_size, &cfg.loss);
    model_cfg.validate()?;
    let report =
        gradcheck_model(&model_cfg, sub_seed(seed, "gradcheck"), GRADCHECK_TOLERANCE, sabotage)?;
    Ok(GradCheckSummary {
        max_rel_err: report.max_rel_err,
        passed: report.passed,
        worst: report.worst,
        checked_scalars: report.checked_scalars,
    })
}
