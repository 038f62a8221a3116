//! Toy differentiable stand-in for a frozen contrastive image/text model.
//!
//! Text features are `t_c = normalize(sum_i v_i + e_c)` (the mean-pool scale
//! factor cancels under normalization but is kept in the gradient), and the
//! class posterior for a unit-norm image feature `x` is
//! `softmax_c(x . t_c / tau)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, normalized};

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
/// Text features whose pre-normalization norm is at or below this are degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(alias = "d")]
    pub dim: usize,
    #[serde(alias = "n")]
    pub prompt_len: usize,
    #[serde(alias = "C")]
    pub num_classes: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            prompt_len: 4,
            num_classes: 10,
            tau: 0.07,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(invalid(format!("model.dim must be >= 2, got {}", self.dim)));
        }
        if self.prompt_len < 1 {
            return Err(invalid("model.prompt_len must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(invalid(format!(
                "model.num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("model.tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Frozen unit-norm class embeddings, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    rows: Vec<Vec<f64>>,
}

impl ClassEmbeddings {
    /// Draws i.i.d. standard normal rows from `cfg.seed` and L2-normalizes each.
    pub fn generate(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rows = (0..cfg.num_classes)
            .map(|_| {
                let raw: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalized(&raw).0
            })
            .collect();
        Self { rows }
    }

    /// Builds embeddings from explicit rows, normalizing each one.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(invalid("at least two classes are required"));
        }
        let dim = rows[0].len();
        let mut out = Vec::with_capacity(rows.len());
        for (c, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "class {c} has {} coordinates, expected {dim}",
                    row.len()
                )));
            }
            let (unit, n) = normalized(&row);
            if !(n > DEGENERATE_NORM && n.is_finite()) {
                return Err(invalid(format!("class {c} embedding has zero norm")));
            }
            out.push(unit);
        }
        Ok(Self { rows: out })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }
}

/// A learnable prompt: `n` token vectors of dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub tokens: Vec<Vec<f64>>,
    pub last_active_step: u64,
}

impl Prompt {
    pub fn zeros(id: u64, prompt_len: usize, dim: usize) -> Self {
        Self {
            id,
            tokens: vec![vec![0.0; dim]; prompt_len],
            last_active_step: 0,
        }
    }

    pub fn from_tokens(id: u64, tokens: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("prompt tokens"));
        }
        let dim = tokens[0].len();
        if tokens.iter().any(|t| t.len() != dim) {
            return Err(Error::DimensionMismatch("ragged prompt token matrix".into()));
        }
        Ok(Self {
            id,
            tokens,
            last_active_step: 0,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().flatten().all(|v| v.is_finite())
    }

    /// Bitwise equality of the token matrices.
    pub fn same_tokens(&self, other: &Prompt) -> bool {
        self.tokens.len() == other.tokens.len()
            && self
                .tokens
                .iter()
                .flatten()
                .zip(other.tokens.iter().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `tokens -= alpha * grad`
    pub fn descend(&mut self, grad: &[Vec<f64>], alpha: f64) {
        for (tok, g) in self.tokens.iter_mut().zip(grad) {
            axpy(-alpha, g, tok);
        }
    }

    fn token_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim()];
        for tok in &self.tokens {
            axpy(1.0, tok, &mut sum);
        }
        sum
    }
}

/// A class probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Numerically stable softmax.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / total).collect())
    }

    /// Wraps an explicit probability vector. Used by tests and callers that
    /// already hold normalized probabilities.
    pub fn from_probs(p: Vec<f64>) -> Self {
        Self(p)
    }

    /// Arithmetic mean of several vectors of the same length.
    pub fn mean<'a, I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ProbVector>,
    {
        let mut acc: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for v in vectors {
            let a = acc.get_or_insert_with(|| vec![0.0; v.0.len()]);
            axpy(1.0, &v.0, a);
            count += 1;
        }
        let acc = acc.ok_or(Error::EmptyInput("probability vectors"))?;
        Ok(Self(acc.into_iter().map(|s| s / count as f64).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (c, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = c;
            }
        }
        best
    }

    /// Shannon entropy in nats with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        entropy_of(&self.0)
    }
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&pc| pc > 0.0)
        .map(|&pc| -pc * pc.max(LOG_FLOOR).ln())
        .sum();
    h.max(0.0)
}

/// Text features of one prompt plus the pre-normalization norms needed for
/// the backward pass.
struct TextFeatures {
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl TextFeatures {
    fn compute(prompt: &Prompt, classes: &ClassEmbeddings) -> Result<Self> {
        if prompt.dim() != classes.dim() {
            return Err(Error::DimensionMismatch(format!(
                "prompt dim {} vs class dim {}",
                prompt.dim(),
                classes.dim()
            )));
        }
        let scale = 1.0 / (prompt.prompt_len() as f64 + 1.0);
        let sum = prompt.token_sum();
        let mut rows = Vec::with_capacity(classes.num_classes());
        let mut norms = Vec::with_capacity(classes.num_classes());
        for (c, e) in classes.rows().iter().enumerate() {
            let u: Vec<f64> = sum.iter().zip(e).map(|(s, ec)| (s + ec) * scale).collect();
            let (t, n) = normalized(&u);
            if !(n > DEGENERATE_NORM && n.is_finite()) {
                return Err(Error::DegenerateTextFeature { class: c, norm: n });
            }
            rows.push(t);
            norms.push(n);
        }
        Ok(Self { rows, norms })
    }

    fn logits(&self, x: &[f64], tau: f64) -> Vec<f64> {
        self.rows.iter().map(|t| dot(x, t) / tau).collect()
    }
}

/// Unit-norm text features, one row per class.
pub fn text_features(prompt: &Prompt, classes: &ClassEmbeddings) -> Result<Vec<Vec<f64>>> {
    Ok(TextFeatures::compute(prompt, classes)?.rows)
}

/// Class posterior of a unit-norm image feature under one prompt.
pub fn predict(x: &[f64], prompt: &Prompt, classes: &ClassEmbeddings, tau: f64) -> Result<ProbVector> {
    check_sample(x, classes)?;
    let feats = TextFeatures::compute(prompt, classes)?;
    Ok(ProbVector::softmax(&feats.logits(x, tau)))
}

/// Per-sample posteriors under one prompt, computing text features once.
pub fn predict_many(
    samples: &[Vec<f64>],
    prompt: &Prompt,
    classes: &ClassEmbeddings,
    tau: f64,
) -> Result<Vec<ProbVector>> {
    let feats = TextFeatures::compute(prompt, classes)?;
    samples
        .iter()
        .map(|x| {
            check_sample(x, classes)?;
            Ok(ProbVector::softmax(&feats.logits(x, tau)))
        })
        .collect()
}

/// Mean posterior over every (sample, prompt) pair, averaged in probability space.
pub fn predict_avg(
    samples: &[Vec<f64>],
    prompts: &[Prompt],
    classes: &ClassEmbeddings,
    tau: f64,
) -> Result<ProbVector> {
    check_nonempty(samples, prompts)?;
    let mut all = Vec::with_capacity(samples.len() * prompts.len());
    for prompt in prompts {
        all.extend(predict_many(samples, prompt, classes, tau)?);
    }
    ProbVector::mean(&all)
}

/// Entropy of [`predict_avg`].
pub fn entropy_loss(samples: &[Vec<f64>], prompts: &[Prompt], classes: &ClassEmbeddings, tau: f64) -> Result<f64> {
    Ok(predict_avg(samples, prompts, classes, tau)?.entropy())
}

/// Gradient of one prompt's token matrix (`n x d`).
pub type TokenGrad = Vec<Vec<f64>>;

/// Analytic gradient of [`entropy_loss`] with respect to every token of every
/// prompt. Prompts are coupled through the shared probability average.
pub fn grad_entropy(
    samples: &[Vec<f64>],
    prompts: &[Prompt],
    classes: &ClassEmbeddings,
    tau: f64,
) -> Result<Vec<TokenGrad>> {
    check_nonempty(samples, prompts)?;
    let feats: Vec<TextFeatures> = prompts
        .iter()
        .map(|p| TextFeatures::compute(p, classes))
        .collect::<Result<_>>()?;
    for x in samples {
        check_sample(x, classes)?;
    }

    let probs: Vec<Vec<ProbVector>> = feats
        .iter()
        .map(|f| samples.iter().map(|x| ProbVector::softmax(&f.logits(x, tau))).collect())
        .collect();
    let mean = ProbVector::mean(probs.iter().flatten())?;
    // dH/dpbar_c up to an additive constant that cancels through the softmax Jacobian.
    let dh_dp: Vec<f64> = mean.as_slice().iter().map(|&p| -p.max(LOG_FLOOR).ln()).collect();
    let pairs = (samples.len() * prompts.len()) as f64;
    let dim = classes.dim();

    let mut grads = Vec::with_capacity(prompts.len());
    for ((prompt, f), prompt_probs) in prompts.iter().zip(&feats).zip(&probs) {
        // weighted[k] = sum_s dH/dz_{s,k} * x_s
        let mut weighted = vec![vec![0.0; dim]; classes.num_classes()];
        for (x, p) in samples.iter().zip(prompt_probs) {
            let p = p.as_slice();
            for (k, w) in weighted.iter_mut().enumerate() {
                // centered form so equal dH/dp entries cancel exactly
                let centered: f64 = p.iter().zip(&dh_dp).map(|(pc, hc)| pc * (dh_dp[k] - hc)).sum();
                let dz = p[k] * centered / pairs;
                axpy(dz, x, w);
            }
        }
        // Back through t = u/||u|| and u = (sum_i v_i + e)/(n+1); every token
        // receives the same gradient.
        let scale = 1.0 / (prompt.prompt_len() as f64 + 1.0);
        let mut g = vec![0.0; dim];
        for ((w, t), &un) in weighted.iter().zip(&f.rows).zip(&f.norms) {
            let along = dot(t, w);
            let coef = scale / (tau * un);
            for ((gi, wi), ti) in g.iter_mut().zip(w).zip(t) {
                *gi += coef * (wi - along * ti);
            }
        }
        grads.push(vec![g; prompt.prompt_len()]);
    }
    Ok(grads)
}

/// Central finite-difference gradient of [`entropy_loss`], one coordinate at
/// a time. Test oracle for [`grad_entropy`].
pub fn finite_diff_grad(
    samples: &[Vec<f64>],
    prompts: &[Prompt],
    classes: &ClassEmbeddings,
    tau: f64,
    epsilon: f64,
) -> Result<Vec<TokenGrad>> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(invalid(format!("epsilon must lie in (0, 1e-2], got {epsilon}")));
    }
    check_nonempty(samples, prompts)?;
    let mut work = prompts.to_vec();
    let mut grads = Vec::with_capacity(prompts.len());
    for j in 0..prompts.len() {
        let (n, d) = (prompts[j].prompt_len(), prompts[j].dim());
        let mut g = Vec::with_capacity(n);
        for r in 0..n {
            let mut row = Vec::with_capacity(d);
            for c in 0..d {
                let orig = work[j].tokens[r][c];
                work[j].tokens[r][c] = orig + epsilon;
                let plus = entropy_loss(samples, &work, classes, tau)?;
                work[j].tokens[r][c] = orig - epsilon;
                let minus = entropy_loss(samples, &work, classes, tau)?;
                work[j].tokens[r][c] = orig;
                row.push((plus - minus) / (2.0 * epsilon));
            }
            g.push(row);
        }
        grads.push(g);
    }
    Ok(grads)
}

fn check_nonempty(samples: &[Vec<f64>], prompts: &[Prompt]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompts"));
    }
    Ok(())
}

fn check_sample(x: &[f64], classes: &ClassEmbeddings) -> Result<()> {
    if x.len() != classes.dim() {
        return Err(Error::DimensionMismatch(format!(
            "sample dim {} vs class dim {}",
            x.len(),
            classes.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 4,
            prompt_len: 2,
            num_classes: 3,
            tau: 0.07,
            seed: 7,
        }
    }

    fn wavy_prompt(id: u64, n: usize, d: usize, phase: f64) -> Prompt {
        let tokens = (0..n)
            .map(|r| {
                (0..d)
                    .map(|i| 0.3 * (0.9 * i as f64 + 1.7 * r as f64 + phase).cos())
                    .collect()
            })
            .collect();
        Prompt::from_tokens(id, tokens).unwrap()
    }

    fn wavy_sample(d: usize, phase: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..d).map(|i| (1.3 * i as f64 + phase).sin()).collect();
        normalized(&raw).0
    }

    #[test]
    fn class_embeddings_are_unit_and_reproducible() {
        let cfg = small_cfg();
        let a = ClassEmbeddings::generate(&cfg);
        let b = ClassEmbeddings::generate(&cfg);
        for row in a.rows() {
            assert!((crate::linalg::norm(row) - 1.0).abs() < 1e-9);
        }
        let bits = |e: &ClassEmbeddings| -> Vec<u64> { e.rows().iter().flatten().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_prompt_recovers_class_embeddings() {
        let cfg = small_cfg();
        let classes = ClassEmbeddings::generate(&cfg);
        let t = text_features(&Prompt::zeros(0, cfg.prompt_len, cfg.dim), &classes).unwrap();
        for (tc, ec) in t.iter().zip(classes.rows()) {
            for (a, b) in tc.iter().zip(ec) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn prompt_equal_to_class_embedding_gives_that_embedding() {
        let cfg = small_cfg();
        let classes = ClassEmbeddings::generate(&cfg);
        let e1 = classes.row(1).to_vec();
        let prompt = Prompt::from_tokens(0, vec![e1.clone(); cfg.prompt_len]).unwrap();
        let t = text_features(&prompt, &classes).unwrap();
        for (a, b) in t[1].iter().zip(&e1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_prompt_rows_are_unit_norm() {
        let cfg = small_cfg();
        let classes = ClassEmbeddings::generate(&cfg);
        let t = text_features(&wavy_prompt(0, 2, 4, 0.2), &classes).unwrap();
        for row in &t {
            assert!((crate::linalg::norm(row) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_prompt_is_reported() {
        let cfg = small_cfg();
        let classes = ClassEmbeddings::generate(&cfg);
        // sum of tokens cancels class 2 exactly
        let neg: Vec<f64> = classes.row(2).iter().map(|v| -v).collect();
        let prompt = Prompt::from_tokens(0, vec![neg, vec![0.0; 4]]).unwrap();
        let err = text_features(&prompt, &classes).unwrap_err();
        assert!(matches!(err, Error::DegenerateTextFeature { class: 2, .. }));
    }

    #[test]
    fn identical_text_features_give_uniform_prediction() {
        let classes = ClassEmbeddings::from_rows(vec![vec![1.0, 0.0]; 4]).unwrap();
        let p = predict(&[0.6, 0.8], &Prompt::zeros(0, 1, 2), &classes, 0.07).unwrap();
        for &pc in p.as_slice() {
            assert!((pc - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_ln3_gap() {
        let tau = 0.07;
        let z = 0.4;
        let p = ProbVector::softmax(&[z, z + tau * 3f64.ln()].map(|l| l / tau));
        assert!((p.as_slice()[0] - 0.25).abs() < 1e-12);
        assert!((p.as_slice()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let logits = [1.5, -0.3, 2.2, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|z| z + 37.25).collect();
        let a = ProbVector::softmax(&logits);
        let b = ProbVector::softmax(&shifted);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_avg_singleton_matches_predict() {
        let cfg = small_cfg();
        let classes = ClassEmbeddings::generate(&cfg);
        let x = wavy_sample(4, 0.1);
        let prompt = wavy_prompt(0, 2, 4, 0.5);
        let a = predict(&x, &prompt, &classes, cfg.tau).unwrap();
        let b = predict_avg(
            std::slice::from_ref(&x),
            std::slice::from_ref(&prompt),
            &classes,
            cfg.tau,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_avg_rejects_empty_lists() {
        let cfg = small_cfg();
        let classes = ClassEmbeddings::generate(&cfg);
        let x = wavy_sample(4, 0.1);
        let err = predict_avg(&[], &[Prompt::zeros(0, 2, 4)], &classes, 0.07).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
        let err = predict_avg(&[x], &[], &classes, 0.07).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn opposite_votes_average_to_half() {
        let a = ProbVector::from_probs(vec![1.0, 0.0]);
        let b = ProbVector::from_probs(vec![0.0, 1.0]);
        assert_eq!(ProbVector::mean([&a, &b]).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn entropy_reference_values() {
        assert!((ProbVector::from_probs(vec![0.25; 4]).entropy() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(ProbVector::from_probs(vec![0.0, 1.0, 0.0]).entropy(), 0.0);
        // -0.7 ln 0.7 - 3 * 0.1 ln 0.1
        let h = ProbVector::from_probs(vec![0.7, 0.1, 0.1, 0.1]).entropy();
        assert!((h - 0.940448).abs() < 1e-6, "{h}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(ProbVector::from_probs(vec![0.4, 0.4, 0.2]).argmax(), 0);
        assert_eq!(ProbVector::from_probs(vec![0.2, 0.4, 0.4]).argmax(), 1);
    }

    #[test]
    fn uniform_point_has_zero_gradient() {
        let classes = ClassEmbeddings::from_rows(vec![vec![0.0, 1.0, 0.0]; 3]).unwrap();
        let samples = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]];
        let prompts = vec![Prompt::zeros(0, 2, 3)];
        for g in grad_entropy(&samples, &prompts, &classes, 0.07)
            .unwrap()
            .iter()
            .flatten()
            .flatten()
        {
            assert_eq!(*g, 0.0);
        }
        for g in finite_diff_grad(&samples, &prompts, &classes, 0.07, 1e-5)
            .unwrap()
            .iter()
            .flatten()
            .flatten()
        {
            assert!(g.abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_rejects_bad_epsilon() {
        let cfg = small_cfg();
        let classes = ClassEmbeddings::generate(&cfg);
        let x = vec![wavy_sample(4, 0.0)];
        let p = vec![Prompt::zeros(0, 2, 4)];
        assert!(finite_diff_grad(&x, &p, &classes, 0.07, 0.0).is_err());
        assert!(finite_diff_grad(&x, &p, &classes, 0.07, 0.1).is_err());
    }

    #[test]
    fn single_prompt_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            dim: 8,
            prompt_len: 2,
            num_classes: 4,
            tau: 0.07,
            seed: 11,
        };
        let classes = ClassEmbeddings::generate(&cfg);
        let samples = vec![wavy_sample(8, 0.7)];
        let prompts = vec![wavy_prompt(0, 2, 8, 0.0)];
        let analytic = grad_entropy(&samples, &prompts, &classes, cfg.tau).unwrap();
        let numeric = finite_diff_grad(&samples, &prompts, &classes, cfg.tau, 1e-5).unwrap();
        for (a, f) in analytic
            .iter()
            .flatten()
            .flatten()
            .zip(numeric.iter().flatten().flatten())
        {
            let diff = (a - f).abs();
            assert!(diff <= 1e-6 || diff / a.abs().max(f.abs()) < 1e-4, "{a} vs {f}");
        }
    }

    #[test]
    fn coupled_prompts_directional_derivative() {
        let cfg = ModelConfig {
            dim: 6,
            prompt_len: 3,
            num_classes: 5,
            tau: 0.1,
            seed: 3,
        };
        let classes = ClassEmbeddings::generate(&cfg);
        let samples = vec![wavy_sample(6, 0.2), wavy_sample(6, 1.1)];
        let prompts = vec![wavy_prompt(0, 3, 6, 0.0), wavy_prompt(1, 3, 6, 2.0)];
        let grads = grad_entropy(&samples, &prompts, &classes, cfg.tau).unwrap();
        let dir: Vec<Vec<f64>> = (0..3)
            .map(|r| (0..6).map(|c| ((r * 6 + c) as f64 * 0.37).sin()).collect())
            .collect();
        let base = entropy_loss(&samples, &prompts, &classes, cfg.tau).unwrap();
        let predicted_slope: f64 = grads[0]
            .iter()
            .flatten()
            .zip(dir.iter().flatten())
            .map(|(g, v)| g * v)
            .sum();
        let mut prev_err = f64::INFINITY;
        for &delta in &[1e-2, 5e-3, 2.5e-3] {
            let mut moved = prompts.clone();
            moved[0].descend(&dir, -delta);
            let actual = entropy_loss(&samples, &moved, &classes, cfg.tau).unwrap() - base;
            let err = (actual - predicted_slope * delta).abs();
            // first-order remainder is O(delta^2)
            assert!(err < prev_err);
            prev_err = err;
        }
        assert!(prev_err < 1e-3 * predicted_slope.abs().max(1.0));
    }

    /// d=8, n=2, C=4, class seed 11; sample and prompt drawn from seed 12.
    fn golden_setup() -> (ClassEmbeddings, Prompt, Vec<f64>) {
        let classes = ClassEmbeddings::generate(&ModelConfig {
            dim: 8,
            prompt_len: 2,
            num_classes: 4,
            tau: 0.07,
            seed: 11,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let raw: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let tokens = (0..2)
            .map(|_| {
                (0..8)
                    .map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        (classes, Prompt::from_tokens(0, tokens).unwrap(), normalized(&raw).0)
    }

    // evaluated independently at 50 digits
    const GOLDEN_PROBS: [f64; 4] = [
        0.007_713_771_509_255_852,
        0.000_384_622_351_147_873_7,
        0.985_461_173_035_543,
        0.006_440_433_104_053_259,
    ];
    const GOLDEN_ENTROPY: f64 = 0.087_475_570_452_979_59;

    #[test]
    fn golden_prediction() {
        let (classes, prompt, x) = golden_setup();
        assert!(
            (classes.row(0)[0] + 0.238_987_821_541_484_3).abs() < 1e-15,
            "class rng changed"
        );
        let p = predict(&x, &prompt, &classes, 0.07).unwrap();
        for (got, want) in p.as_slice().iter().zip(GOLDEN_PROBS) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        assert!((p.entropy() - GOLDEN_ENTROPY).abs() < 1e-13);
        assert_eq!(p.argmax(), 2);
    }

    #[test]
    fn golden_small_step_lowers_entropy() {
        let (classes, prompt, x) = golden_setup();
        let samples = vec![x];
        let before = entropy_loss(&samples, std::slice::from_ref(&prompt), &classes, 0.07).unwrap();
        let g = grad_entropy(&samples, std::slice::from_ref(&prompt), &classes, 0.07).unwrap();
        let mut stepped = prompt.clone();
        stepped.descend(&g[0], 1e-3);
        let after = entropy_loss(&samples, &[stepped], &classes, 0.07).unwrap();
        assert!(after < before);
    }
}
