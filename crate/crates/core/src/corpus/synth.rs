//! Synthetic corpora with a controllable per-corpus bias.
//!
//! Every frame of every layer of an utterance from domain `d` with class
//! `c` is drawn as `s·u_c + β·b_d + ε`, `ε ~ N(0, σ²)` per dimension. The
//! bias is shared by both classes of a domain, like a recording-channel
//! artifact.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{Corpus, CorpusSet, Label, Payload, UtteranceRecord};
use crate::error::{Error, Result};
use crate::stack::LayerStack;

/// Scalar knobs of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub num_domains: usize,
    pub dim: usize,
    pub layers: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub bias_magnitude: f64,
    pub class_separation: f64,
    pub noise: f64,
    /// Draw one extra bias direction for a held-out evaluation domain.
    pub unseen_domain: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_domains: 3,
            dim: 64,
            layers: 2,
            frames_min: 1,
            frames_max: 4,
            bias_magnitude: 2.0,
            class_separation: 1.0,
            noise: 1.0,
            unseen_domain: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub params: SynthParams,
    /// Unit directions `[u_bona, u_spoof]`.
    pub class_directions: [Vec<f64>; 2],
    /// Unit bias direction per domain; the unseen domain, if any, is last.
    pub bias_directions: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl SynthSpec {
    /// Draws class and bias directions uniformly on the unit sphere.
    pub fn new(params: SynthParams, seed: u64) -> Result<Self> {
        if params.dim == 0 {
            return Err(Error::Config("synthetic dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class_directions = [unit_vector(&mut rng, params.dim), unit_vector(&mut rng, params.dim)];
        let n = params.num_domains + usize::from(params.unseen_domain);
        let bias_directions = (0..n).map(|_| unit_vector(&mut rng, params.dim)).collect();
        let spec = SynthSpec {
            params,
            class_directions,
            bias_directions,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let mut problems = Vec::new();
        if p.num_domains == 0 {
            problems.push("num_domains must be positive".to_owned());
        }
        if p.layers == 0 {
            problems.push("layers must be positive".to_owned());
        }
        if p.frames_min == 0 || p.frames_min > p.frames_max {
            problems.push(format!("frame range [{}, {}] is empty or starts at 0", p.frames_min, p.frames_max));
        }
        for (what, v) in [
            ("bias_magnitude", p.bias_magnitude),
            ("class_separation", p.class_separation),
            ("noise", p.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{what} = {v} must be finite and non-negative"));
            }
        }
        let expected = p.num_domains + usize::from(p.unseen_domain);
        if self.bias_directions.len() != expected {
            problems.push(format!("{} bias directions for {expected} domains", self.bias_directions.len()));
        }
        for v in self.class_directions.iter().chain(&self.bias_directions) {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if v.len() != p.dim || (norm - 1.0).abs() > 1e-9 {
                problems.push(format!("direction of length {} and norm {norm} is not a unit vector in {} dims", v.len(), p.dim));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// The same spec restricted to the training domains.
    pub fn seen(&self) -> SynthSpec {
        let mut s = self.clone();
        s.bias_directions.truncate(self.params.num_domains);
        s.params.unseen_domain = false;
        s
    }

    /// Number of domains `synth_generate` emits.
    pub fn num_generated(&self) -> usize {
        self.bias_directions.len()
    }

    /// Frame mean `s·u_c + β·b_d` for one cohort.
    pub fn cohort_mean(&self, label: Label, domain: usize) -> Vec<f64> {
        let p = &self.params;
        self.class_directions[label.index()]
            .iter()
            .zip(&self.bias_directions[domain])
            .map(|(u, b)| p.class_separation * u + p.bias_magnitude * b)
            .collect()
    }
}

/// Generates `n` utterances per class per domain for every bias direction
/// in `spec`. Utterance `i` draws from its own random stream, so output is
/// independent of thread count.
pub fn synth_generate(spec: &SynthSpec, n_per_domain_per_class: usize, seed: u64) -> Result<CorpusSet> {
    spec.validate()?;
    let p = &spec.params;
    let per_domain = 2 * n_per_domain_per_class;
    let corpora = (0..spec.num_generated())
        .map(|domain| {
            let records = (0..per_domain)
                .into_par_iter()
                .map(|j| {
                    let label = if j < n_per_domain_per_class { Label::Bonafide } else { Label::Spoof };
                    let index = j % n_per_domain_per_class.max(1);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((domain * per_domain + j) as u64);
                    let frames = rng.random_range(p.frames_min..=p.frames_max);
                    let mean = spec.cohort_mean(label, domain);
                    let mut data = Vec::with_capacity(p.layers * frames * p.dim);
                    for _ in 0..p.layers * frames {
                        for m in &mean {
                            let e: f64 = rng.sample(StandardNormal);
                            data.push((m + p.noise * e) as f32);
                        }
                    }
                    let stack = LayerStack::new(p.layers, frames, p.dim, data)?;
                    Ok(UtteranceRecord {
                        utt_id: format!("d{domain}-{label}-{index:05}"),
                        label,
                        domain,
                        payload: Payload::Stack(Arc::new(stack)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Corpus {
                name: domain.to_string(),
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CorpusSet::new(corpora)
}
