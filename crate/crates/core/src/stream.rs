//! Synthetic labeled test streams with domain shift.
//!
//! Class prototypes are the class embeddings blended toward one shared
//! direction (`overlap`), then every domain rotates them by a fixed angle in
//! a random orthonormal frame and translates them by a shared offset. Samples
//! are noisy normalized prototypes. Domains occupy contiguous blocks of the
//! default order; a nonzero `order_seed` shuffles the whole stream.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, normalized};
use crate::model::ClassEmbeddings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub rotation_seed: u64,
    /// Angle in radians by which the domain rotates every prototype. Zero is
    /// the identity.
    #[serde(default)]
    pub rotation_angle: f64,
    pub offset_scale: f64,
    pub weight: f64,
    /// Relative class frequencies inside this domain; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl DomainSpec {
    pub fn identity(weight: f64) -> Self {
        Self {
            rotation_seed: 0,
            rotation_angle: 0.0,
            offset_scale: 0.0,
            weight,
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(alias = "C")]
    pub num_classes: usize,
    #[serde(alias = "d")]
    pub dim: usize,
    pub num_samples: usize,
    pub domains: Vec<DomainSpec>,
    /// 0 keeps the default (domain-blocked) order.
    #[serde(default)]
    pub order_seed: u64,
    pub proto_seed: u64,
    pub overlap: f64,
    pub sample_noise: f64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 1 {
            return Err(invalid("stream.num_samples must be >= 1"));
        }
        if self.num_classes < 2 || self.dim < 2 {
            return Err(invalid("stream needs num_classes >= 2 and dim >= 2"));
        }
        if self.domains.is_empty() {
            return Err(invalid("stream.domains must not be empty"));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(invalid(format!(
                "stream.overlap must lie in [0, 1], got {}",
                self.overlap
            )));
        }
        if !(self.sample_noise >= 0.0 && self.sample_noise.is_finite()) {
            return Err(invalid("stream.sample_noise must be >= 0"));
        }
        if self.domains.iter().any(|d| {
            d.weight.is_nan() || d.weight < 0.0 || !d.offset_scale.is_finite() || !d.rotation_angle.is_finite()
        }) {
            return Err(invalid("domain weights must be >= 0 and all domain parameters finite"));
        }
        for d in &self.domains {
            if let Some(w) = &d.class_weights {
                if w.len() != self.num_classes
                    || w.iter().any(|v| !(*v >= 0.0 && v.is_finite()))
                    || w.iter().sum::<f64>() <= 0.0
                {
                    return Err(invalid(
                        "class_weights need one non-negative entry per class with a positive sum",
                    ));
                }
            }
        }
        let total: f64 = self.domains.iter().map(|d| d.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("domain weights must sum to 1, got {total}")));
        }
        Ok(())
    }

    /// Number of samples in each domain's contiguous block.
    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = Vec::with_capacity(self.domains.len());
        let mut cumulative = 0.0;
        let mut prev = 0usize;
        for (k, d) in self.domains.iter().enumerate() {
            cumulative += d.weight;
            let end = if k + 1 == self.domains.len() {
                self.num_samples
            } else {
                ((cumulative * self.num_samples as f64).round() as usize).min(self.num_samples)
            };
            counts.push(end.saturating_sub(prev));
            prev = prev.max(end);
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y_gt: usize,
    pub domain_id: usize,
    pub index: usize,
}

/// Orthogonal transform rotating every vector by `angle` in `d/2` mutually
/// orthogonal random planes.
struct PlaneRotation {
    basis: Vec<Vec<f64>>,
    cos: f64,
    sin: f64,
}

impl PlaneRotation {
    fn new(dim: usize, seed: u64, angle: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for q in &basis {
                let proj = dot(q, &v);
                axpy(-proj, q, &mut v);
            }
            let (unit, n) = normalized(&v);
            if n > 1e-8 {
                basis.push(unit);
            }
        }
        Self {
            basis,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let coords: Vec<f64> = self.basis.iter().map(|q| dot(q, v)).collect();
        let mut rotated = coords.clone();
        for pair in 0..coords.len() / 2 {
            let (a, b) = (coords[2 * pair], coords[2 * pair + 1]);
            rotated[2 * pair] = self.cos * a - self.sin * b;
            rotated[2 * pair + 1] = self.sin * a + self.cos * b;
        }
        let mut out = vec![0.0; v.len()];
        for (q, c) in self.basis.iter().zip(&rotated) {
            axpy(*c, q, &mut out);
        }
        out
    }
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let (unit, n) = normalized(&v);
        if n > 1e-8 {
            return unit;
        }
    }
}

/// Per-domain class prototypes, `[domain][class]`.
pub fn prototypes(cfg: &StreamConfig, classes: &ClassEmbeddings) -> Result<Vec<Vec<Vec<f64>>>> {
    cfg.validate()?;
    if classes.num_classes() != cfg.num_classes || classes.dim() != cfg.dim {
        return Err(Error::DimensionMismatch(format!(
            "stream is {}x{} but class embeddings are {}x{}",
            cfg.num_classes,
            cfg.dim,
            classes.num_classes(),
            classes.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.proto_seed);
    let shared = random_unit(cfg.dim, &mut rng);
    let base: Vec<Vec<f64>> = classes
        .rows()
        .iter()
        .map(|e| {
            let blend: Vec<f64> = shared
                .iter()
                .zip(e)
                .map(|(g, ec)| cfg.overlap * g + (1.0 - cfg.overlap) * ec)
                .collect();
            normalized(&blend).0
        })
        .collect();

    Ok(cfg
        .domains
        .iter()
        .map(|domain| {
            let rotation = (domain.rotation_angle != 0.0)
                .then(|| PlaneRotation::new(cfg.dim, domain.rotation_seed, domain.rotation_angle));
            let offset_dir = random_unit(
                cfg.dim,
                &mut ChaCha8Rng::seed_from_u64(domain.rotation_seed ^ 0x6f66_6673_6574),
            );
            base.iter()
                .map(|p| {
                    let mut q = match &rotation {
                        Some(r) => r.apply(p),
                        None => p.clone(),
                    };
                    axpy(domain.offset_scale, &offset_dir, &mut q);
                    q
                })
                .collect()
        })
        .collect())
}

/// Exact label counts for one domain block: largest-remainder allocation of
/// `count` over the class weights, ties to the lower class.
fn block_labels(count: usize, num_classes: usize, weights: Option<&[f64]>) -> Vec<usize> {
    let uniform = vec![1.0; num_classes];
    let weights = weights.unwrap_or(&uniform);
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * count as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = count - counts.iter().sum::<usize>();
    for &c in order.iter().cycle().take(missing) {
        counts[c] += 1;
    }
    counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect()
}

/// Generates the stream. Deterministic in `cfg` and the class embeddings.
pub fn gen_stream(cfg: &StreamConfig, classes: &ClassEmbeddings) -> Result<Vec<LabeledSample>> {
    let protos = prototypes(cfg, classes)?;
    // Sample draws use their own stream so prototype construction can change
    // without reshuffling labels.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.proto_seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for (domain_id, count) in cfg.domain_counts().into_iter().enumerate() {
        let mut labels = block_labels(count, cfg.num_classes, cfg.domains[domain_id].class_weights.as_deref());
        labels.shuffle(&mut rng);
        for y_gt in labels {
            let x = loop {
                let mut v = protos[domain_id][y_gt].clone();
                for vi in v.iter_mut() {
                    *vi += cfg.sample_noise * rng.sample::<f64, _>(StandardNormal);
                }
                let (unit, n) = normalized(&v);
                if n > 1e-12 {
                    break unit;
                }
            };
            samples.push(LabeledSample {
                x,
                y_gt,
                domain_id,
                index: samples.len(),
            });
        }
    }
    if cfg.order_seed != 0 {
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.order_seed));
        for (i, s) in samples.iter_mut().enumerate() {
            s.index = i;
        }
    }
    Ok(samples)
}

/// Names of the shipped presets, in registry order.
pub const PRESET_NAMES: &[&str] = &["collapse-v1", "separable"];

/// Looks up a frozen stream preset.
pub fn collapse_stream(name: &str) -> Result<StreamConfig> {
    match name {
        "collapse-v1" => {
            // the two domains favour complementary halves of the label set
            let favoured = |parity: usize| (0..10).map(|c| if c % 2 == parity { 9.0 } else { 1.0 }).collect();
            Ok(StreamConfig {
                num_classes: 10,
                dim: 32,
                num_samples: 2000,
                domains: vec![
                    DomainSpec {
                        rotation_seed: 101,
                        rotation_angle: 0.0,
                        offset_scale: 0.5,
                        weight: 0.5,
                        class_weights: Some(favoured(0)),
                    },
                    DomainSpec {
                        rotation_seed: 202,
                        rotation_angle: 0.0,
                        offset_scale: 0.5,
                        weight: 0.5,
                        class_weights: Some(favoured(1)),
                    },
                ],
                order_seed: 0,
                proto_seed: 7,
                overlap: 0.4,
                sample_noise: 0.4,
            })
        }
        "separable" => Ok(StreamConfig {
            num_classes: 10,
            dim: 32,
            num_samples: 400,
            domains: vec![DomainSpec::identity(1.0)],
            order_seed: 0,
            proto_seed: 7,
            overlap: 0.0,
            sample_noise: 0.0,
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Writes `index,domain_id,y_gt,x0..x{d-1}`.
pub fn write_stream_csv(samples: &[LabeledSample], path: &Path) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut header = String::from("index,domain_id,y_gt");
    for i in 0..dim {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for s in samples {
        let mut line = format!("{},{},{}", s.index, s.domain_id, s.y_gt);
        for v in &s.x {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use crate::model::ModelConfig;

    fn classes_for(cfg: &StreamConfig) -> ClassEmbeddings {
        ClassEmbeddings::generate(&ModelConfig {
            dim: cfg.dim,
            num_classes: cfg.num_classes,
            ..ModelConfig::default()
        })
    }

    #[test]
    fn separable_samples_equal_class_embeddings() {
        let cfg = collapse_stream("separable").unwrap();
        let classes = classes_for(&cfg);
        for s in gen_stream(&cfg, &classes).unwrap() {
            for (a, b) in s.x.iter().zip(classes.row(s.y_gt)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let cfg = collapse_stream("collapse-v1").unwrap();
        let classes = classes_for(&cfg);
        let a = gen_stream(&cfg, &classes).unwrap();
        let b = gen_stream(&cfg, &classes).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2000);
        for s in &a {
            assert!((norm(&s.x) - 1.0).abs() < 1e-9);
            assert!(s.y_gt < 10);
        }
    }

    #[test]
    fn rotation_moves_by_the_angle() {
        let r = PlaneRotation::new(8, 3, 0.4);
        let v = normalized(&[0.3, -0.1, 0.5, 0.2, 0.9, -0.4, 0.1, 0.0]).0;
        let w = r.apply(&v);
        assert!((norm(&w) - 1.0).abs() < 1e-12);
        assert!((dot(&v, &w) - 0.4f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn domains_are_contiguous_blocks() {
        let cfg = collapse_stream("collapse-v1").unwrap();
        let stream = gen_stream(&cfg, &classes_for(&cfg)).unwrap();
        assert!(stream[..1000].iter().all(|s| s.domain_id == 0));
        assert!(stream[1000..].iter().all(|s| s.domain_id == 1));
    }

    #[test]
    fn domain_counts_sum_to_length() {
        let mut cfg = collapse_stream("collapse-v1").unwrap();
        cfg.num_samples = 7;
        cfg.domains[0].weight = 0.3;
        cfg.domains[1].weight = 0.7;
        let counts = cfg.domain_counts();
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert_eq!(counts, vec![2, 5]);
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(collapse_stream("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn preset_json_round_trip() {
        for name in PRESET_NAMES {
            let cfg = collapse_stream(name).unwrap();
            let back: StreamConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn label_balance_of_presets() {
        for name in PRESET_NAMES {
            let cfg = collapse_stream(name).unwrap();
            let stream = gen_stream(&cfg, &classes_for(&cfg)).unwrap();
            let expected = cfg.num_samples as f64 / cfg.num_classes as f64;
            let mut counts = vec![0usize; cfg.num_classes];
            for s in &stream {
                counts[s.y_gt] += 1;
            }
            for c in counts {
                assert!(
                    (c as f64 - expected).abs() <= 0.2 * expected,
                    "{name}: {c} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn validation_errors() {
        let mut cfg = collapse_stream("collapse-v1").unwrap();
        cfg.domains[0].weight = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = collapse_stream("collapse-v1").unwrap();
        cfg.overlap = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = collapse_stream("collapse-v1").unwrap();
        cfg.domains.clear();
        assert!(cfg.validate().is_err());
        let cfg = collapse_stream("collapse-v1").unwrap();
        let wrong = ClassEmbeddings::generate(&ModelConfig {
            dim: 16,
            ..ModelConfig::default()
        });
        assert!(matches!(gen_stream(&cfg, &wrong), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn csv_export() {
        let cfg = collapse_stream("separable").unwrap();
        let stream = gen_stream(&cfg, &classes_for(&cfg)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.csv");
        write_stream_csv(&stream[..3], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("index,domain_id,y_gt,x0,x1"));
        assert_eq!(lines[1].split(',').count(), 3 + 32);
    }
}
