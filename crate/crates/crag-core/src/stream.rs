//! Synthetic non-stationary data stream: domain mixture with prototype
//! embeddings, scripted drift events (abrupt / gradual / seasonal), planted
//! ground-truth knowledge, and a divergence estimate for reporting.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, IngestOutcome, KnowledgeEntry};
use crate::linalg::{self, normalized, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Abrupt,
    Gradual,
    Seasonal,
}

/// One scripted drift event. The magnitude is a rotation angle applied to the
/// domain prototypes and, when `perturb_targets` is set, the scale of a
/// target-map perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub kind: DriftKind,
    pub onset: u64,
    pub duration: u64,
    pub magnitude: f64,
    #[serde(default = "default_true")]
    pub rotate_prototypes: bool,
    #[serde(default)]
    pub perturb_targets: bool,
}

fn default_true() -> bool {
    true
}

impl DriftEvent {
    /// Drift intensity in [0, ..] at tick t: the fraction of the magnitude in
    /// effect. Abrupt: step at onset. Gradual: linear ramp over `duration`.
    /// Seasonal: sinusoid with period `duration`.
    fn intensity(&self, t: u64) -> f64 {
        if t < self.onset {
            return 0.0;
        }
        let dt = (t - self.onset) as f64;
        match self.kind {
            DriftKind::Abrupt => 1.0,
            DriftKind::Gradual => (dt / self.duration as f64).min(1.0),
            DriftKind::Seasonal => {
                // Integer phase reduction keeps the pattern exactly periodic.
                let phase = (t - self.onset) % self.duration;
                (2.0 * std::f64::consts::PI * phase as f64 / self.duration as f64).sin()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Unit-norm prototype; samples scatter around it.
    pub prototype: Vec<f64>,
    /// Sample spread sigma > 0.
    pub spread: f64,
    /// Linear map defining y from x.
    pub target: Matrix,
    /// Token pool for text rendering.
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub dim: usize,
    pub output_dim: usize,
    pub domains: Vec<DomainSpec>,
    /// Mixture weights over domains; uniform when empty.
    #[serde(default)]
    pub mixture: Vec<f64>,
    #[serde(default)]
    pub drift_events: Vec<DriftEvent>,
    pub batch_size: usize,
    pub seed: u64,
}

impl StreamConfig {
    /// Three default urban domains with orthogonal prototypes and
    /// deterministic target maps derived from the seed.
    pub fn default_domains(dim: usize, output_dim: usize, batch_size: usize, seed: u64) -> Self {
        let names = ["traffic", "safety", "planning"];
        let vocab: [&[&str]; 3] = [
            &["traffic", "congestion", "highway", "commute", "vehicle"],
            &["safety", "incident", "alert", "patrol", "emergency"],
            &["planning", "zoning", "permit", "development", "district"],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domains = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mut proto = vec![0.0; dim];
                proto[i] = 1.0;
                let mut target = Matrix::zeros(output_dim, dim);
                for v in &mut target.data {
                    *v = rng.gen_range(-1.0..1.0);
                }
                DomainSpec {
                    name: name.to_string(),
                    prototype: proto,
                    spread: 0.1,
                    target,
                    vocabulary: vocab[i].iter().map(|s| s.to_string()).collect(),
                }
            })
            .collect();
        Self {
            dim,
            output_dim,
            domains,
            mixture: Vec::new(),
            drift_events: Vec::new(),
            batch_size,
            seed,
        }
    }
}

/// One stream sample: input embedding, rendered text, target, domain tag, and
/// ground-truth relevant corpus ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub embedding: Vec<f64>,
    pub text: String,
    pub target: Vec<f64>,
    pub domain: String,
    pub relevant_ids: Vec<u64>,
}

/// One time-step dataset D_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamBatch {
    pub tick: u64,
    pub samples: Vec<Sample>,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stream generator plus the registry of planted knowledge (ground truth for
/// the ranking metrics). Batch generation is a pure function of
/// (tick, config, seed); only `plant_knowledge` mutates state.
#[derive(Debug, Clone)]
pub struct StreamSim {
    config: StreamConfig,
    /// domain name -> planting epochs, each with the ids ingested then.
    planted: BTreeMap<String, Vec<(u64, Vec<u64>)>>,
}

impl StreamSim {
    pub fn new(config: StreamConfig) -> Self {
        assert!(config.batch_size >= 1);
        assert!(!config.domains.is_empty());
        Self { config, planted: BTreeMap::new() }
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    /// Per-domain rotation axis: a deterministic unit vector orthogonal to
    /// the prototype, derived from the stream seed.
    fn rotation_axis(&self, domain_idx: usize) -> Vec<f64> {
        let spec = &self.config.domains[domain_idx];
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e3779b97f4a7c15 ^ domain_idx as u64);
        let mut axis: Vec<f64> = (0..self.config.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Gram-Schmidt against the prototype.
        let proj = linalg::dot(&axis, &spec.prototype);
        for (a, p) in axis.iter_mut().zip(&spec.prototype) {
            *a -= proj * p;
        }
        normalized(axis)
    }

    fn rotation_angle(&self, t: u64) -> f64 {
        self.config
            .drift_events
            .iter()
            .filter(|e| e.rotate_prototypes)
            .map(|e| e.magnitude * e.intensity(t))
            .sum()
    }

    fn target_perturbation(&self, t: u64) -> f64 {
        self.config
            .drift_events
            .iter()
            .filter(|e| e.perturb_targets)
            .map(|e| e.magnitude * e.intensity(t))
            .sum()
    }

    /// Prototype of a domain at tick t with all active drift applied: a
    /// rotation in the plane spanned by the base prototype and the domain's
    /// rotation axis.
    pub fn prototype_at(&self, domain_idx: usize, t: u64) -> Vec<f64> {
        let spec = &self.config.domains[domain_idx];
        let angle = self.rotation_angle(t);
        if angle == 0.0 {
            return spec.prototype.clone();
        }
        let axis = self.rotation_axis(domain_idx);
        spec.prototype
            .iter()
            .zip(&axis)
            .map(|(p, u)| angle.cos() * p + angle.sin() * u)
            .collect()
    }

    fn target_at(&self, domain_idx: usize, t: u64) -> Matrix {
        let spec = &self.config.domains[domain_idx];
        let scale = self.target_perturbation(t);
        if scale == 0.0 {
            return spec.target.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7f4a7c15 ^ domain_idx as u64);
        let mut target = spec.target.clone();
        for v in &mut target.data {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
        target
    }

    fn mixture_weights(&self) -> Vec<f64> {
        if self.config.mixture.is_empty() {
            vec![1.0 / self.config.domains.len() as f64; self.config.domains.len()]
        } else {
            let sum: f64 = self.config.mixture.iter().sum();
            self.config.mixture.iter().map(|w| w / sum).collect()
        }
    }

    /// Planted ids for a domain at the most recent epoch at or before t.
    pub fn relevant_ids(&self, domain: &str, t: u64) -> Vec<u64> {
        self.planted
            .get(domain)
            .and_then(|epochs| epochs.iter().rev().find(|(epoch, _)| *epoch <= t))
            .map(|(_, ids)| ids.clone())
            .unwrap_or_default()
    }

    /// Deterministic batch for tick t: domain drawn from the mixture,
    /// x = normalize(prototype_t + sigma * noise), y = target_t(x).
    pub fn next_batch(&self, t: u64) -> StreamBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(t.wrapping_mul(0x2545f4914f6cdd1d)));
        let weights = self.mixture_weights();
        let samples = (0..self.config.batch_size)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut domain_idx = self.config.domains.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        domain_idx = i;
                        break;
                    }
                }
                let spec = &self.config.domains[domain_idx];
                let proto = self.prototype_at(domain_idx, t);
                let x: Vec<f64> = proto
                    .iter()
                    .map(|p| {
                        // Box-Muller normal noise.
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen();
                        let z = (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos();
                        p + spec.spread * z
                    })
                    .collect();
                let x = normalized(x);
                let target = self.target_at(domain_idx, t).matvec(&x);
                let words: Vec<&str> = (0..3)
                    .map(|_| {
                        spec.vocabulary[rng.gen_range(0..spec.vocabulary.len())].as_str()
                    })
                    .collect();
                Sample {
                    embedding: x,
                    text: format!("{} {}", spec.name, words.join(" ")),
                    target,
                    domain: spec.name.clone(),
                    relevant_ids: self.relevant_ids(&spec.name, t),
                }
            })
            .collect();
        StreamBatch { tick: t, samples }
    }

    /// Ingests one epoch-stamped entry per domain whose embedding tracks the
    /// drifted prototype, keeping continual corpora aligned with P_t. Returns
    /// the ids the entries landed on (new or merged).
    pub fn plant_knowledge(&mut self, corpus: &mut Corpus, t: u64) -> Vec<u64> {
        let mut ids = Vec::new();
        for (idx, spec) in self.config.domains.clone().iter().enumerate() {
            let embedding = normalized(self.prototype_at(idx, t));
            let id = corpus.next_id();
            let entry = KnowledgeEntry {
                id,
                embedding,
                text: format!("{} knowledge epoch {}", spec.name, t),
                domain: spec.name.clone(),
                relevance: [(spec.name.clone(), 1.0)].into_iter().collect(),
                created_at: t,
                last_validated: t,
                uncertainty: 0.0,
                source: "stream".into(),
            };
            let landed = match corpus.ingest(entry, t) {
                IngestOutcome::Accepted => id,
                IngestOutcome::Merged(existing) => existing,
                IngestOutcome::Rejected(failure) => {
                    panic!("planted entry rejected: {failure:?}")
                }
            };
            ids.push(landed);
            let epochs = self.planted.entry(spec.name.clone()).or_default();
            match epochs.last_mut() {
                Some((epoch, epoch_ids)) if *epoch == t => {
                    if !epoch_ids.contains(&landed) {
                        epoch_ids.push(landed);
                    }
                }
                _ => epochs.push((t, vec![landed])),
            }
        }
        ids
    }
}

/// KL divergence between diagonal Gaussians fitted to the two batches'
/// embeddings (variances floored at 1e-6). Reporting estimate against the
/// configured shift budget; not a training signal.
pub fn estimate_divergence(batch_a: &StreamBatch, batch_b: &StreamBatch) -> f64 {
    assert!(!batch_a.is_empty() && !batch_b.is_empty());
    let dim = batch_a.samples[0].embedding.len();
    let fit = |batch: &StreamBatch| {
        let n = batch.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in &batch.samples {
            for (m, v) in mean.iter_mut().zip(&s.embedding) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in &batch.samples {
            for (vv, (v, m)) in var.iter_mut().zip(s.embedding.iter().zip(&mean)) {
                *vv += (v - m) * (v - m) / n;
            }
        }
        for v in &mut var {
            *v = v.max(1e-6);
        }
        (mean, var)
    };
    let (mu_a, var_a) = fit(batch_a);
    let (mu_b, var_b) = fit(batch_b);
    let mut kl = 0.0;
    for i in 0..dim {
        kl += 0.5
            * (var_a[i] / var_b[i] + (mu_a[i] - mu_b[i]).powi(2) / var_b[i] - 1.0
                + (var_b[i] / var_a[i]).ln());
    }
    kl
}
