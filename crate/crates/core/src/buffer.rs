//! The online prompt buffer: a bounded, recency-ordered list of prompts with
//! threshold-based selection, a joint one-step update of the selected
//! prompts, and the append/evict commit protocol.
//!
//! Slot 0 is the top of the buffer (most recently updated). Updated prompts
//! are always reinserted at the top, so the bottom slot is the one that has
//! been inactive the longest and is the eviction victim when a fresh prompt
//! is appended to a full buffer.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::PromptScore;
use crate::model::{entropy_loss, grad_entropy, predict_avg, text_features, ClassEmbeddings, ProbVector, Prompt};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Ids of the buffer prompts passing both thresholds, in slot order.
    pub selected_ids: Vec<u64>,
    /// Set when nothing passed and a fresh copy of the initial prompt is used.
    pub appended_fresh: bool,
    pub scores: Vec<PromptScore>,
    pub v0_score: PromptScore,
}

/// Result of one joint gradient step over a working set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    /// Updated prompts in working-set order, degenerate ones removed.
    pub updated: Vec<Prompt>,
    /// Ids of prompts whose text features degenerated before or after the step.
    pub degenerate_ids: Vec<u64>,
    pub pre_entropy: Option<f64>,
    pub post_entropy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitReport {
    pub inserted: usize,
    pub evicted: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PromptBuffer {
    slots: Vec<Prompt>,
    capacity: usize,
    step: u64,
    next_id: u64,
    v0_template: Prompt,
}

/// JSON-friendly view of the buffer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSnapshot {
    pub capacity: usize,
    pub step: u64,
    pub next_id: u64,
    pub v0_template: Prompt,
    pub slots: Vec<Prompt>,
}

impl PromptBuffer {
    /// Starts empty. Ids of appended prompts are allocated above the template's id.
    pub fn new(capacity: usize, v0_template: Prompt) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("buffer capacity must be >= 1"));
        }
        Ok(Self {
            slots: Vec::with_capacity(capacity),
            capacity,
            step: 0,
            next_id: v0_template.id + 1,
            v0_template,
        })
    }

    pub fn slots(&self) -> &[Prompt] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn v0_template(&self) -> &Prompt {
        &self.v0_template
    }

    pub fn get(&self, id: u64) -> Option<&Prompt> {
        self.slots.iter().find(|p| p.id == id)
    }

    /// Keeps every buffer prompt with `d_ent <= v0.d_ent` and `d_pro >= v0.d_pro`.
    /// Prompts without a score are never selected.
    pub fn select(&self, scores: &[PromptScore], v0_score: &PromptScore) -> SelectionResult {
        let selected_ids: Vec<u64> = self
            .slots
            .iter()
            .filter(|p| {
                scores
                    .iter()
                    .find(|s| s.prompt_id == p.id)
                    .is_some_and(|s| passes(s, v0_score))
            })
            .map(|p| p.id)
            .collect();
        SelectionResult {
            appended_fresh: selected_ids.is_empty(),
            selected_ids,
            scores: scores.to_vec(),
            v0_score: *v0_score,
        }
    }

    /// A deep copy of the initial prompt with a newly allocated id.
    pub fn fresh_prompt(&mut self) -> Prompt {
        let mut p = self.v0_template.clone();
        p.id = self.next_id;
        p.last_active_step = self.step;
        self.next_id += 1;
        p
    }

    /// Copies of the selected prompts in slot order, or a single fresh prompt
    /// when the selection was empty.
    pub fn working_set(&mut self, selection: &SelectionResult) -> Vec<Prompt> {
        if selection.appended_fresh {
            vec![self.fresh_prompt()]
        } else {
            self.slots
                .iter()
                .filter(|p| selection.selected_ids.contains(&p.id))
                .cloned()
                .collect()
        }
    }

    pub fn remove(&mut self, id: u64) -> Option<Prompt> {
        let pos = self.slots.iter().position(|p| p.id == id)?;
        Some(self.slots.remove(pos))
    }

    /// Writes the updated working set back.
    ///
    /// Selected prompts leave their old slots and the updated copies go to the
    /// top in their prior relative order. A fresh prompt goes to slot 0,
    /// evicting the bottom slot first when the buffer is full. Selected ids
    /// missing from `updated` (degenerate prompts) are dropped.
    pub fn commit(&mut self, selection: &SelectionResult, updated: Vec<Prompt>) -> CommitReport {
        let mut report = CommitReport::default();
        if selection.appended_fresh {
            debug_assert!(updated.len() <= 1);
            if let Some(fresh) = updated.into_iter().next() {
                if self.is_full() {
                    report.evicted = self.slots.pop().map(|p| p.id);
                }
                self.slots.insert(0, fresh);
                report.inserted = 1;
            }
        } else {
            debug_assert!(updated.iter().all(|p| selection.selected_ids.contains(&p.id)));
            self.slots.retain(|p| !selection.selected_ids.contains(&p.id));
            report.inserted = updated.len();
            self.slots.splice(0..0, updated);
        }
        debug_assert!(self.slots.len() <= self.capacity);
        report
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            capacity: self.capacity,
            step: self.step,
            next_id: self.next_id,
            v0_template: self.v0_template.clone(),
            slots: self.slots.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.snapshot())?)
    }

    pub fn from_snapshot(snapshot: BufferSnapshot) -> Result<Self> {
        if snapshot.capacity == 0 || snapshot.slots.len() > snapshot.capacity {
            return Err(invalid("snapshot violates buffer capacity"));
        }
        Ok(Self {
            slots: snapshot.slots,
            capacity: snapshot.capacity,
            step: snapshot.step,
            next_id: snapshot.next_id,
            v0_template: snapshot.v0_template,
        })
    }
}

fn passes(score: &PromptScore, v0: &PromptScore) -> bool {
    score.d_ent <= v0.d_ent && score.d_pro >= v0.d_pro
}

/// One joint entropy-minimization step on every prompt of the working set.
///
/// Prompts that are already degenerate are left out of the step; prompts
/// that become degenerate after it are reported and not returned. Updated
/// prompts get `last_active_step = step`.
pub fn optimize_selected(
    working_set: &[Prompt],
    selected_views: &[Vec<f64>],
    classes: &ClassEmbeddings,
    tau: f64,
    alpha: f64,
    step: u64,
) -> Result<OptimizeOutcome> {
    if working_set.is_empty() {
        return Err(Error::EmptyInput("working set"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("learning rate must be >= 0, got {alpha}")));
    }
    let (mut usable, mut degenerate_ids) = partition_usable(working_set.to_vec(), classes);
    if usable.is_empty() {
        return Ok(OptimizeOutcome {
            updated: usable,
            degenerate_ids,
            pre_entropy: None,
            post_entropy: None,
        });
    }
    let pre_entropy = entropy_loss(selected_views, &usable, classes, tau)?;
    let grads = grad_entropy(selected_views, &usable, classes, tau)?;
    for (prompt, g) in usable.iter_mut().zip(&grads) {
        prompt.descend(g, alpha);
        prompt.last_active_step = step;
    }
    let (updated, bad) = partition_usable(usable, classes);
    degenerate_ids.extend(bad);
    let post_entropy = if updated.is_empty() {
        None
    } else {
        Some(entropy_loss(selected_views, &updated, classes, tau)?)
    };
    Ok(OptimizeOutcome {
        updated,
        degenerate_ids,
        pre_entropy: Some(pre_entropy),
        post_entropy,
    })
}

fn partition_usable(prompts: Vec<Prompt>, classes: &ClassEmbeddings) -> (Vec<Prompt>, Vec<u64>) {
    let mut ok = Vec::with_capacity(prompts.len());
    let mut bad = Vec::new();
    for p in prompts {
        if p.is_finite() && text_features(&p, classes).is_ok() {
            ok.push(p);
        } else {
            bad.push(p.id);
        }
    }
    (ok, bad)
}

/// Prediction on the original sample with probabilities averaged over the
/// updated prompts. Returns the argmax (lowest index on ties) and the average.
pub fn predict_final(
    x: &[f64],
    updated: &[Prompt],
    classes: &ClassEmbeddings,
    tau: f64,
) -> Result<(usize, ProbVector)> {
    let p = predict_avg(std::slice::from_ref(&x.to_vec()), updated, classes, tau)?;
    Ok((p.argmax(), p))
}
