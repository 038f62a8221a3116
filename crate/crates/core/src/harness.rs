//! Experiment orchestration: single runs, buffer-size and sample-order
//! sweeps, gradient checks, and the CSV/JSON result files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugConfig;
use crate::error::{invalid, Error, Result};
use crate::linalg::normalized;
use crate::model::{finite_diff_grad, grad_entropy, ClassEmbeddings, ModelConfig, Prompt, TokenGrad};
use crate::strategy::{OpCounts, StepOutcome, StrategyKind, StrategyState};
use crate::stream::{collapse_stream, gen_stream, StreamConfig};

/// A stream given inline or by preset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StreamSource {
    Preset(String),
    Config(StreamConfig),
}

impl StreamSource {
    pub fn resolve(&self) -> Result<StreamConfig> {
        match self {
            Self::Preset(name) => collapse_stream(name),
            Self::Config(cfg) => Ok(cfg.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub alpha: f64,
    /// Maximum buffer size `M`; only used by the buffer strategy.
    pub buffer_size: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::DynaPrompt,
            alpha: 0.005,
            buffer_size: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub aug: AugConfig,
    pub stream: StreamSource,
    pub strategy: StrategyConfig,
    pub block_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub run_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            aug: AugConfig::default(),
            stream: StreamSource::Preset("collapse-v1".into()),
            strategy: StrategyConfig::default(),
            block_size: 200,
            output_dir: None,
            run_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Checks every nested invariant and returns the resolved stream.
    pub fn validate(&self) -> Result<StreamConfig> {
        self.model.validate()?;
        self.aug.validate()?;
        if self.block_size < 1 {
            return Err(invalid("block_size must be >= 1"));
        }
        if !(self.strategy.alpha >= 0.0 && self.strategy.alpha.is_finite()) {
            return Err(invalid("strategy.alpha must be >= 0"));
        }
        if self.strategy.buffer_size < 1 {
            return Err(invalid("strategy.buffer_size must be >= 1"));
        }
        let stream = self.stream.resolve()?;
        stream.validate()?;
        if stream.dim != self.model.dim || stream.num_classes != self.model.num_classes {
            return Err(invalid(format!(
                "stream is {} classes x {} dims but the model is {} x {}",
                stream.num_classes, stream.dim, self.model.num_classes, self.model.dim
            )));
        }
        Ok(stream)
    }

    /// Seed of the augmentation stream. Independent of the strategy so that
    /// all strategies see identical views.
    pub fn augmentation_seed(&self) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.aug.seed);
        rng.random::<u64>() ^ self.run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

/// Applies a dotted-path override such as `strategy.alpha=0.01` to a JSON
/// config value. The right-hand side is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(config: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = config;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert((*key).to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| serde_json::json!({}))
            }
            serde_json::Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| invalid(format!("`{key}` in `{path}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| invalid(format!("index {idx} out of range (len {len}) in `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(invalid(format!("cannot descend into `{key}` of `{path}`"))),
        };
    }
    Ok(())
}

/// Builds a config from optional JSON text plus overrides. A preset stream
/// is expanded first whenever an override reaches into `stream.`.
pub fn config_with_overrides(base: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let cfg = match base {
        Some(text) => RunConfig::from_json(text)?,
        None => RunConfig::default(),
    };
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut value = serde_json::to_value(&cfg)?;
    if overrides.iter().any(|o| o.starts_with("stream.")) {
        value["stream"] = serde_json::to_value(cfg.stream.resolve()?)?;
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    Ok(serde_json::from_value(value)?)
}

/// One row of `steps.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub block: usize,
    pub strategy: StrategyKind,
    #[serde(flatten)]
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub appends: u64,
    pub deletes: u64,
    pub selected_prompts: u64,
    pub resets: u64,
    pub correct: u64,
    pub ops: OpCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub per_step: Vec<StepRow>,
    pub block_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub counters: Counters,
    pub config_echo: RunConfig,
}

impl RunResult {
    /// Mean accuracy over the last `blocks` blocks.
    pub fn tail_accuracy(&self, blocks: usize) -> f64 {
        let n = self.block_accuracies.len();
        mean(&self.block_accuracies[n.saturating_sub(blocks)..])
    }

    /// Mean accuracy over the first `blocks` blocks.
    pub fn head_accuracy(&self, blocks: usize) -> f64 {
        mean(&self.block_accuracies[..blocks.min(self.block_accuracies.len())])
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.per_step.iter().map(|r| r.outcome.predicted).collect()
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs one strategy over one stream. Writes result files when `output_dir` is set.
pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    let stream_cfg = cfg.validate()?;
    let classes = ClassEmbeddings::generate(&cfg.model);
    let stream = gen_stream(&stream_cfg, &classes)?;
    let v0 = Prompt::zeros(0, cfg.model.prompt_len, cfg.model.dim);
    let mut state = StrategyState::new(
        cfg.strategy.kind,
        classes,
        cfg.model.tau,
        v0,
        cfg.aug.clone(),
        cfg.strategy.alpha,
        cfg.strategy.buffer_size,
        cfg.augmentation_seed(),
    )?;

    let mut per_step = Vec::with_capacity(stream.len());
    let mut counters = Counters::default();
    for (i, sample) in stream.iter().enumerate() {
        let outcome = state.step(sample)?;
        counters.appends += u64::from(outcome.appended);
        counters.deletes += u64::from(outcome.deleted);
        counters.resets += u64::from(outcome.reset);
        counters.correct += u64::from(outcome.correct);
        counters.selected_prompts += outcome.selected_count as u64;
        per_step.push(StepRow {
            step: i as u64,
            block: i / cfg.block_size,
            strategy: cfg.strategy.kind,
            outcome,
        });
    }
    counters.ops = state.ops();

    let block_accuracies = per_step
        .chunks(cfg.block_size)
        .map(|block| block.iter().filter(|r| r.outcome.correct).count() as f64 / block.len() as f64)
        .collect();
    let mut config_echo = cfg.clone();
    config_echo.stream = StreamSource::Config(stream_cfg);
    let result = RunResult {
        mean_accuracy: counters.correct as f64 / per_step.len() as f64,
        per_step,
        block_accuracies,
        counters,
        config_echo,
    };
    if let Some(dir) = &cfg.output_dir {
        emit(&result, dir)?;
    }
    Ok(result)
}

/// Runs every strategy on the same stream and seeds.
pub fn run_all_strategies(cfg: &RunConfig) -> Result<Vec<RunResult>> {
    StrategyKind::ALL
        .par_iter()
        .map(|&kind| {
            let mut c = cfg.clone();
            c.strategy.kind = kind;
            c.output_dir = None;
            run(&c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSweepPoint {
    pub buffer_size: usize,
    pub mean_accuracy: f64,
    pub ops: OpCounts,
}

/// One run per buffer size on a shared stream and seeds.
pub fn sweep_buffer_size(cfg: &RunConfig, sizes: &[usize]) -> Result<Vec<BufferSweepPoint>> {
    if sizes.is_empty() {
        return Err(Error::EmptyInput("buffer sizes"));
    }
    if sizes.contains(&0) {
        return Err(invalid("buffer sizes must be >= 1"));
    }
    cfg.validate()?;
    sizes
        .par_iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.strategy.buffer_size = m;
            c.output_dir = None;
            let r = run(&c)?;
            Ok(BufferSweepPoint {
                buffer_size: m,
                mean_accuracy: r.mean_accuracy,
                ops: r.counters.ops,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSweepPoint {
    pub order_seed: u64,
    pub mean_accuracy: f64,
}

/// One run per sample order; everything else is shared.
pub fn sweep_order(cfg: &RunConfig, order_seeds: &[u64]) -> Result<Vec<OrderSweepPoint>> {
    if order_seeds.is_empty() {
        return Err(Error::EmptyInput("order seeds"));
    }
    let base = cfg.validate()?;
    order_seeds
        .par_iter()
        .map(|&seed| {
            let mut stream = base.clone();
            stream.order_seed = seed;
            let mut c = cfg.clone();
            c.stream = StreamSource::Config(stream);
            c.output_dir = None;
            Ok(OrderSweepPoint {
                order_seed: seed,
                mean_accuracy: run(&c)?.mean_accuracy,
            })
        })
        .collect()
}

/// Relative error threshold of the gradient check.
pub const GRADCHECK_REL_TOL: f64 = 1e-4;
/// Differences at or below this are accepted regardless of relative error.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub epsilon: f64,
    /// Largest relative error among coordinates whose absolute difference
    /// exceeds the floor (0 when none does).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failed_trials: usize,
    pub passed: bool,
}

/// Relative error of one coordinate, or `None` when the absolute difference
/// is within the floor.
pub fn coordinate_error(analytic: f64, numeric: f64) -> Option<f64> {
    let diff = (analytic - numeric).abs();
    if diff <= GRADCHECK_ABS_FLOOR {
        None
    } else {
        Some(diff / analytic.abs().max(numeric.abs()))
    }
}

type GradFn = dyn Fn(&[Vec<f64>], &[Prompt], &ClassEmbeddings, f64) -> Result<Vec<TokenGrad>> + Sync;

/// Compares the analytic gradient with central differences on `trials`
/// random problems (d <= 16, n <= 4, C <= 8, 1-3 prompts, 1-4 samples)
/// drawn from `model_cfg.seed`; `model_cfg.tau` is the temperature.
pub fn gradcheck(model_cfg: &ModelConfig, trials: usize, epsilon: f64) -> Result<GradcheckReport> {
    gradcheck_with(model_cfg, trials, epsilon, &grad_entropy)
}

/// [`gradcheck`] against an arbitrary gradient implementation.
pub fn gradcheck_with(model_cfg: &ModelConfig, trials: usize, epsilon: f64, grad: &GradFn) -> Result<GradcheckReport> {
    if trials < 1 {
        return Err(invalid("gradcheck needs at least one trial"));
    }
    let problems: Vec<GradProblem> = {
        let mut rng = ChaCha8Rng::seed_from_u64(model_cfg.seed);
        (0..trials).map(|_| GradProblem::random(&mut rng)).collect()
    };
    let tau = model_cfg.tau;
    let per_trial: Vec<(f64, f64)> = problems
        .par_iter()
        .map(|p| {
            let a = grad(&p.samples, &p.prompts, &p.classes, tau)?;
            let f = finite_diff_grad(&p.samples, &p.prompts, &p.classes, tau, epsilon)?;
            Ok(compare_grads(&a, &f))
        })
        .collect::<Result<_>>()?;
    let failed_trials = per_trial.iter().filter(|(rel, _)| *rel >= GRADCHECK_REL_TOL).count();
    Ok(GradcheckReport {
        trials,
        epsilon,
        max_rel_error: per_trial.iter().map(|t| t.0).fold(0.0, f64::max),
        max_abs_error: per_trial.iter().map(|t| t.1).fold(0.0, f64::max),
        failed_trials,
        passed: failed_trials == 0,
    })
}

/// `(max relative error above the floor, max absolute difference)`.
pub fn compare_grads(analytic: &[TokenGrad], numeric: &[TokenGrad]) -> (f64, f64) {
    let mut rel = 0.0f64;
    let mut abs = 0.0f64;
    for (a, f) in analytic
        .iter()
        .flatten()
        .flatten()
        .zip(numeric.iter().flatten().flatten())
    {
        abs = abs.max((a - f).abs());
        if let Some(r) = coordinate_error(*a, *f) {
            rel = rel.max(r);
        }
    }
    if analytic.iter().flatten().flatten().any(|v| !v.is_finite()) {
        rel = f64::INFINITY;
    }
    (rel, abs)
}

/// A random gradient-check problem.
pub struct GradProblem {
    pub classes: ClassEmbeddings,
    pub prompts: Vec<Prompt>,
    pub samples: Vec<Vec<f64>>,
}

impl GradProblem {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let dim = rng.random_range(2..=16);
        let prompt_len = rng.random_range(1..=4);
        let num_classes = rng.random_range(2..=8);
        let num_prompts = rng.random_range(1..=3);
        let num_samples = rng.random_range(1..=4);
        let classes = ClassEmbeddings::generate(&ModelConfig {
            dim,
            prompt_len,
            num_classes,
            tau: 0.07,
            seed: rng.random(),
        });
        let prompts = (0..num_prompts)
            .map(|j| {
                let tokens = (0..prompt_len)
                    .map(|_| (0..dim).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect();
                Prompt::from_tokens(j as u64, tokens).expect("non-empty")
            })
            .collect();
        let samples = (0..num_samples)
            .map(|_| normalized(&(0..dim).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>()).0)
            .collect();
        Self {
            classes,
            prompts,
            samples,
        }
    }
}

/// Header of `steps.csv`.
pub const STEPS_HEADER: &str =
    "step,block,strategy,predicted,label,correct,selected_count,appended,deleted,buffer_len,pre_entropy,post_entropy";

/// Six significant digits, then the shortest decimal that round-trips that value.
pub fn format_float(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("valid float literal");
    format!("{rounded}")
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

pub fn steps_csv(result: &RunResult) -> String {
    let mut out = String::with_capacity(64 * (result.per_step.len() + 1));
    out.push_str(STEPS_HEADER);
    out.push('\n');
    for row in &result.per_step {
        let o = &row.outcome;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            row.step,
            row.block,
            row.strategy,
            o.predicted,
            o.label,
            u8::from(o.correct),
            o.selected_count,
            u8::from(o.appended),
            u8::from(o.deleted),
            o.buffer_len_after,
            format_opt(o.pre_step_entropy),
            format_opt(o.post_step_entropy),
        );
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    block_accuracies: &'a [f64],
    mean_accuracy: f64,
    counters: &'a Counters,
    config_echo: &'a RunConfig,
}

pub fn summary_json(result: &RunResult) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&Summary {
        block_accuracies: &result.block_accuracies,
        mean_accuracy: result.mean_accuracy,
        counters: &result.counters,
        config_echo: &result.config_echo,
    })?;
    text.push('\n');
    Ok(text)
}

/// Writes `steps.csv` and `summary.json` into `dir`, creating it if needed.
pub fn emit(result: &RunResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.per_step.is_empty() {
        return Err(Error::EmptyInput("run has no steps"));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let steps = dir.join("steps.csv");
    std::fs::write(&steps, steps_csv(result)).map_err(io(&steps))?;
    let summary = dir.join("summary.json");
    std::fs::write(&summary, summary_json(result)?).map_err(io(&summary))?;
    Ok(vec![steps, summary])
}
