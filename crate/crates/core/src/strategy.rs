//! Per-sample adaptation strategies: episodic TPT, online TPT, the
//! label-gated oracle, and the dynamic prompt buffer.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, select_lowest, AugConfig};
use crate::buffer::{optimize_selected, predict_final, OptimizeOutcome, PromptBuffer};
use crate::error::{invalid, Error, Result};
use crate::metrics::score_prompt;
use crate::model::{predict, predict_many, ClassEmbeddings, Prompt};
use crate::stream::LabeledSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "tpt")]
    Tpt,
    #[serde(rename = "online_tpt")]
    OnlineTpt,
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "dynaprompt")]
    DynaPrompt,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [Self::Tpt, Self::OnlineTpt, Self::Oracle, Self::DynaPrompt];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tpt => "tpt",
            Self::OnlineTpt => "online_tpt",
            Self::Oracle => "oracle",
            Self::DynaPrompt => "dynaprompt",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown strategy `{s}`")))
    }
}

/// What happened on one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: u64,
    pub predicted: usize,
    pub label: usize,
    pub correct: bool,
    pub selected_count: usize,
    pub appended: bool,
    pub deleted: bool,
    pub buffer_len_after: usize,
    pub pre_step_entropy: Option<f64>,
    pub post_step_entropy: Option<f64>,
    /// The carried prompt degenerated and was reset to the initial prompt.
    pub reset: bool,
}

/// Deterministic cost proxy: forward evaluations of (prompt, input vector)
/// pairs and per-pair gradient evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub prompt_evals: u64,
    pub grad_evals: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.prompt_evals + self.grad_evals
    }
}

pub struct StrategyState {
    kind: StrategyKind,
    alpha: f64,
    tau: f64,
    classes: ClassEmbeddings,
    aug: AugConfig,
    rng: ChaCha8Rng,
    v0: Prompt,
    carried: Option<Prompt>,
    buffer: Option<PromptBuffer>,
    step: u64,
    ops: OpCounts,
}

impl StrategyState {
    /// `buffer_size` is only used by [`StrategyKind::DynaPrompt`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: StrategyKind,
        classes: ClassEmbeddings,
        tau: f64,
        v0: Prompt,
        aug: AugConfig,
        alpha: f64,
        buffer_size: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        aug.validate()?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("alpha must be >= 0, got {alpha}")));
        }
        if v0.dim() != classes.dim() {
            return Err(Error::DimensionMismatch("initial prompt vs class embeddings".into()));
        }
        let (carried, buffer) = match kind {
            StrategyKind::Tpt => (None, None),
            StrategyKind::OnlineTpt | StrategyKind::Oracle => (Some(v0.clone()), None),
            StrategyKind::DynaPrompt => (None, Some(PromptBuffer::new(buffer_size, v0.clone())?)),
        };
        Ok(Self {
            kind,
            alpha,
            tau,
            classes,
            aug,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            v0,
            carried,
            buffer,
            step: 0,
            ops: OpCounts::default(),
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn ops(&self) -> OpCounts {
        self.ops
    }

    pub fn buffer(&self) -> Option<&PromptBuffer> {
        self.buffer.as_ref()
    }

    pub fn carried_prompt(&self) -> Option<&Prompt> {
        self.carried.as_ref()
    }

    pub fn classes(&self) -> &ClassEmbeddings {
        &self.classes
    }

    /// Processes one sample with the configured strategy.
    pub fn step(&mut self, sample: &LabeledSample) -> Result<StepOutcome> {
        let outcome = match self.kind {
            StrategyKind::Tpt => self.step_tpt(sample),
            StrategyKind::OnlineTpt => self.step_online(sample, false),
            StrategyKind::Oracle => self.step_online(sample, true),
            StrategyKind::DynaPrompt => self.step_dynaprompt(sample),
        }?;
        self.step += 1;
        Ok(outcome)
    }

    /// Augments the sample and keeps the confident views under `prompt`.
    fn confident_views(&mut self, x: &[f64], prompt: &Prompt) -> Result<Vec<Vec<f64>>> {
        let views = augment(x, &self.aug, &mut self.rng)?;
        let entropies: Vec<f64> = predict_many(&views, prompt, &self.classes, self.tau)?
            .iter()
            .map(|p| p.entropy())
            .collect();
        self.ops.prompt_evals += views.len() as u64;
        let keep = select_lowest(&entropies, self.aug.rho);
        Ok(keep.into_iter().map(|i| views[i].clone()).collect())
    }

    fn optimize(&mut self, working_set: &[Prompt], views: &[Vec<f64>]) -> Result<OptimizeOutcome> {
        let out = optimize_selected(working_set, views, &self.classes, self.tau, self.alpha, self.step)?;
        let pairs = (working_set.len() * views.len()) as u64;
        self.ops.grad_evals += pairs;
        self.ops.prompt_evals += 2 * pairs;
        Ok(out)
    }

    fn predict_with(&mut self, x: &[f64], prompts: &[Prompt]) -> Result<usize> {
        self.ops.prompt_evals += prompts.len() as u64;
        Ok(predict_final(x, prompts, &self.classes, self.tau)?.0)
    }

    fn zero_shot(&mut self, x: &[f64]) -> Result<usize> {
        self.ops.prompt_evals += 1;
        Ok(predict(x, &self.v0, &self.classes, self.tau)?.argmax())
    }

    fn outcome(&self, sample: &LabeledSample, predicted: usize, out: Option<&OptimizeOutcome>) -> StepOutcome {
        StepOutcome {
            step: self.step,
            predicted,
            label: sample.y_gt,
            correct: predicted == sample.y_gt,
            selected_count: 1,
            appended: false,
            deleted: false,
            buffer_len_after: 0,
            pre_step_entropy: out.and_then(|o| o.pre_entropy),
            post_step_entropy: out.and_then(|o| o.post_entropy),
            reset: false,
        }
    }

    /// Fresh copy of the initial prompt, one step, predict, discard.
    pub fn step_tpt(&mut self, sample: &LabeledSample) -> Result<StepOutcome> {
        let v0 = self.v0.clone();
        let views = self.confident_views(&sample.x, &v0)?;
        let out = self.optimize(std::slice::from_ref(&v0), &views)?;
        let predicted = if out.updated.is_empty() {
            self.zero_shot(&sample.x)?
        } else {
            self.predict_with(&sample.x, &out.updated)?
        };
        Ok(self.outcome(sample, predicted, Some(&out)))
    }

    /// Online TPT, or the oracle when `gate_on_label` is set: the oracle keeps
    /// the update only if the post-update prediction is correct.
    fn step_online(&mut self, sample: &LabeledSample, gate_on_label: bool) -> Result<StepOutcome> {
        let mut reset = false;
        let mut start = self.carried.clone().unwrap_or_else(|| self.v0.clone());
        let views = match self.confident_views(&sample.x, &start) {
            Err(Error::DegenerateTextFeature { .. }) => {
                reset = true;
                start = self.v0.clone();
                self.confident_views(&sample.x, &start)?
            }
            other => other?,
        };
        let out = self.optimize(std::slice::from_ref(&start), &views)?;
        let predicted = match out.updated.first() {
            Some(updated) => {
                let updated = updated.clone();
                let predicted = self.predict_with(&sample.x, std::slice::from_ref(&updated))?;
                if !gate_on_label || predicted == sample.y_gt {
                    self.carried = Some(updated);
                } else {
                    self.carried = Some(start);
                }
                predicted
            }
            None => {
                reset = true;
                self.carried = Some(self.v0.clone());
                self.zero_shot(&sample.x)?
            }
        };
        if reset {
            log::debug!("{}: carried prompt reset at step {}", self.kind, self.step);
        }
        let mut o = self.outcome(sample, predicted, Some(&out));
        o.reset = reset;
        Ok(o)
    }

    pub fn step_online_tpt(&mut self, sample: &LabeledSample) -> Result<StepOutcome> {
        self.step_online(sample, false)
    }

    pub fn step_oracle(&mut self, sample: &LabeledSample) -> Result<StepOutcome> {
        self.step_online(sample, true)
    }

    /// Augment, confidence-select under the initial prompt, score every
    /// buffer prompt against the initial prompt, select or append, take one
    /// joint step, predict on the original sample, commit.
    pub fn step_dynaprompt(&mut self, sample: &LabeledSample) -> Result<StepOutcome> {
        let v0 = self.v0.clone();
        let x = &sample.x;
        let views = self.confident_views(x, &v0)?;
        let step = self.step;
        let (classes, tau) = (&self.classes, self.tau);
        let buffer = self
            .buffer
            .as_mut()
            .ok_or_else(|| invalid("dynaprompt state without a buffer"))?;
        buffer.set_step(step);

        let v0_score = score_prompt(x, &views, &v0, classes, tau)?;
        let mut scores = Vec::with_capacity(buffer.len());
        let mut degenerate = Vec::new();
        for prompt in buffer.slots() {
            match score_prompt(x, &views, prompt, classes, tau) {
                Ok(s) => scores.push(s),
                Err(Error::DegenerateTextFeature { .. }) => degenerate.push(prompt.id),
                Err(e) => return Err(e),
            }
        }
        let scored = (buffer.len() + 1) as u64;
        for id in &degenerate {
            buffer.remove(*id);
        }
        let selection = buffer.select(&scores, &v0_score);
        let working_set = buffer.working_set(&selection);
        self.ops.prompt_evals += scored * (views.len() as u64 + 1);

        let out = self.optimize(&working_set, &views)?;
        let predicted = if out.updated.is_empty() {
            self.zero_shot(x)?
        } else {
            self.predict_with(x, &out.updated)?
        };

        let buffer = self.buffer.as_mut().expect("checked above");
        for id in &out.degenerate_ids {
            if buffer.remove(*id).is_some() {
                degenerate.push(*id);
            }
        }
        let report = buffer.commit(&selection, out.updated.clone());
        let buffer_len_after = buffer.len();
        let mut o = self.outcome(sample, predicted, Some(&out));
        o.selected_count = working_set.len();
        o.appended = selection.appended_fresh;
        o.deleted = report.evicted.is_some() || !degenerate.is_empty();
        o.buffer_len_after = buffer_len_after;
        Ok(o)
    }
}
