//! Prompt selection metrics: prediction entropy over the confident views and
//! the probability gap between the original sample and its views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, predict_many, ClassEmbeddings, ProbVector, Prompt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt_id: u64,
    pub d_ent: f64,
    pub d_pro: f64,
    pub pseudo_label: usize,
}

/// Entropy of the prediction averaged over `selected_views`.
pub fn d_ent(selected_views: &[Vec<f64>], prompt: &Prompt, classes: &ClassEmbeddings, tau: f64) -> Result<f64> {
    Ok(view_mean(selected_views, prompt, classes, tau)?.entropy())
}

/// `p(c*|x) - mean_views p(c*|view)` where `c*` is the prompt's argmax on
/// the original sample. Returns the difference and `c*`.
pub fn d_pro(
    x: &[f64],
    selected_views: &[Vec<f64>],
    prompt: &Prompt,
    classes: &ClassEmbeddings,
    tau: f64,
) -> Result<(f64, usize)> {
    let on_original = predict(x, prompt, classes, tau)?;
    let on_views = view_mean(selected_views, prompt, classes, tau)?;
    Ok(prob_difference(&on_original, &on_views))
}

pub(crate) fn prob_difference(on_original: &ProbVector, on_views: &ProbVector) -> (f64, usize) {
    let c = on_original.argmax();
    (on_original.as_slice()[c] - on_views.as_slice()[c], c)
}

/// Both metrics for one prompt, sharing the forward passes.
pub fn score_prompt(
    x: &[f64],
    selected_views: &[Vec<f64>],
    prompt: &Prompt,
    classes: &ClassEmbeddings,
    tau: f64,
) -> Result<PromptScore> {
    let on_original = predict(x, prompt, classes, tau)?;
    let on_views = view_mean(selected_views, prompt, classes, tau)?;
    let (d_pro, pseudo_label) = prob_difference(&on_original, &on_views);
    Ok(PromptScore {
        prompt_id: prompt.id,
        d_ent: on_views.entropy(),
        d_pro,
        pseudo_label,
    })
}

fn view_mean(views: &[Vec<f64>], prompt: &Prompt, classes: &ClassEmbeddings, tau: f64) -> Result<ProbVector> {
    if views.is_empty() {
        return Err(Error::EmptyInput("selected views"));
    }
    ProbVector::mean(&predict_many(views, prompt, classes, tau)?)
}
