//! Vector-space augmentation and confidence selection of augmented views.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::normalized;
use crate::model::{predict_many, ClassEmbeddings, Prompt};

/// Resampling attempts before a degenerate view becomes an error.
pub const MAX_VIEW_RETRIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Number of augmented views per sample.
    pub views: usize,
    /// Scale of the additive Gaussian perturbation.
    pub sigma: f64,
    /// Fraction of coordinates zeroed in every view.
    pub drop_frac: f64,
    /// Fraction of lowest-entropy views kept by confidence selection.
    pub rho: f64,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            views: 63,
            sigma: 0.1,
            drop_frac: 0.1,
            rho: 0.10,
            seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views < 1 {
            return Err(invalid("aug.views must be >= 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("aug.sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.drop_frac) {
            return Err(invalid(format!(
                "aug.drop_frac must lie in [0, 1), got {}",
                self.drop_frac
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid(format!("aug.rho must lie in (0, 1], got {}", self.rho)));
        }
        Ok(())
    }

    /// `max(1, floor(rho * views))`
    pub fn selected_count(&self) -> usize {
        selected_count(self.views, self.rho)
    }
}

pub fn selected_count(views: usize, rho: f64) -> usize {
    ((rho * views as f64).floor() as usize).clamp(1, views.max(1))
}

/// A test sample with its augmented views and the confident subset.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub original: Vec<f64>,
    pub views: Vec<Vec<f64>>,
    pub selected_indices: Vec<usize>,
}

impl AugmentedSet {
    pub fn selected_views(&self) -> Vec<Vec<f64>> {
        self.selected_indices.iter().map(|&i| self.views[i].clone()).collect()
    }
}

/// Draws `cfg.views` views `normalize(mask * (x + sigma * eps))`.
pub fn augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let d = x.len();
    let dropped = (cfg.drop_frac * d as f64).floor() as usize;
    let mut views = Vec::with_capacity(cfg.views);
    for _ in 0..cfg.views {
        views.push(one_view(x, cfg.sigma, dropped, rng)?);
    }
    Ok(views)
}

fn one_view<R: Rng + ?Sized>(x: &[f64], sigma: f64, dropped: usize, rng: &mut R) -> Result<Vec<f64>> {
    for _ in 0..=MAX_VIEW_RETRIES {
        let mut v: Vec<f64> = x
            .iter()
            .map(|xi| xi + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for i in index::sample(rng, x.len(), dropped) {
            v[i] = 0.0;
        }
        let (unit, n) = normalized(&v);
        if n > 1e-12 && n.is_finite() {
            return Ok(unit);
        }
    }
    Err(Error::DegenerateView {
        attempts: MAX_VIEW_RETRIES,
    })
}

/// Indices of the `max(1, floor(rho*K))` lowest-entropy views under `prompt`,
/// sorted ascending. Ties go to the lower index.
pub fn select_confident(
    views: &[Vec<f64>],
    prompt: &Prompt,
    classes: &ClassEmbeddings,
    tau: f64,
    rho: f64,
) -> Result<Vec<usize>> {
    if views.is_empty() {
        return Err(Error::EmptyInput("views"));
    }
    let entropies: Vec<f64> = predict_many(views, prompt, classes, tau)?
        .iter()
        .map(|p| p.entropy())
        .collect();
    Ok(select_lowest(&entropies, rho))
}

/// Confidence selection on precomputed per-view entropies.
pub fn select_lowest(entropies: &[f64], rho: f64) -> Vec<usize> {
    let keep = selected_count(entropies.len(), rho);
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}
