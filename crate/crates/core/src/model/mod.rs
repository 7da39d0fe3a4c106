//! The domain-adversarial countermeasure network.
//!
//! Feature extractor: an optional per-frame linear + ReLU encoder followed
//! by multi-head factorized attentive (MHFA) pooling over a stack of layer
//! outputs. Two classifier heads read the pooled embedding: a spoofing head
//! and a domain head, the latter behind a gradient-reversal node.
//!
//! MHFA, per utterance with stack `X` of shape `[L, T, D]`:
//!
//! ```text
//! wk = softmax(layer_key)        wv = softmax(layer_value)      (over L)
//! K  = Σ_l wk[l]·X[l]            V  = Σ_l wv[l]·X[l]            ([T, D])
//! A  = softmax_T(K · key_proj)                                  ([T, H])
//! c_h = Σ_t A[t, h] · (V · value_proj)[t]                       ([d_v])
//! embedding = concat(c_1..c_H) · out_proj + out_bias            ([E])
//! ```

mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormState, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::stack::LayerStack;
use crate::tensor::{Real, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct MhfaConfig {
    pub num_layers: usize,
    pub frame_dim: usize,
    pub num_heads: usize,
    pub value_dim: usize,
    pub embedding_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub dropout: f64,
    pub num_outputs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mhfa: MhfaConfig,
    /// Trainable per-frame encoder in front of the pooling.
    pub encoder: bool,
    pub spoof_head: HeadConfig,
    /// Absent for single-corpus training, where there is nothing to adapt
    /// away from.
    pub domain_head: Option<HeadConfig>,
}

impl ModelConfig {
    /// Defaults for a desk-scale run over `num_domains` training corpora.
    pub fn desk(num_layers: usize, frame_dim: usize, num_domains: usize) -> Self {
        let head = |n| HeadConfig {
            hidden_dim: 128,
            dropout: 0.2,
            num_outputs: n,
        };
        ModelConfig {
            mhfa: MhfaConfig {
                num_layers,
                frame_dim,
                num_heads: 4,
                value_dim: 16,
                embedding_dim: 64,
            },
            encoder: false,
            spoof_head: head(2),
            domain_head: (num_domains >= 2).then(|| head(num_domains)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mhfa;
        for (what, v) in [
            ("num_layers", m.num_layers),
            ("frame_dim", m.frame_dim),
            ("num_heads", m.num_heads),
            ("value_dim", m.value_dim),
            ("embedding_dim", m.embedding_dim),
            ("spoof hidden_dim", self.spoof_head.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be positive")));
            }
        }
        if self.spoof_head.num_outputs != 2 {
            return Err(Error::Config("spoofing head must have 2 outputs".into()));
        }
        if let Some(d) = &self.domain_head {
            if d.num_outputs < 2 {
                return Err(Error::Config(format!(
                    "domain head needs at least 2 domains, got {}",
                    d.num_outputs
                )));
            }
            if d.hidden_dim == 0 {
                return Err(Error::Config("domain hidden_dim must be positive".into()));
            }
        }
        for h in std::iter::once(&self.spoof_head).chain(&self.domain_head) {
            if !(0.0..1.0).contains(&h.dropout) {
                return Err(Error::Config(format!("dropout {} outside [0, 1)", h.dropout)));
            }
        }
        Ok(())
    }

    pub fn num_domains(&self) -> usize {
        self.domain_head.as_ref().map_or(1, |d| d.num_outputs)
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    FeatureExtractor,
    SpoofHead,
    DomainHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("spoof.") {
            ParamGroup::SpoofHead
        } else if name.starts_with("domain.") {
            ParamGroup::DomainHead
        } else {
            ParamGroup::FeatureExtractor
        }
    }
}

pub const SPOOF: &str = "spoof";
pub const DOMAIN: &str = "domain";

/// Trainable tensors by name, plus the batch-norm running statistics of
/// each head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub batch_norm: BTreeMap<String, BatchNormState<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            batch_norm: self
                .batch_norm
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BatchNormState {
                            running_mean: s.running_mean.iter().map(|v| U::of(v.f64())).collect(),
                            running_var: s.running_var.iter().map(|v| U::of(v.f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

/// Parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("parameter {name} not bound")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

/// How the domain head is attached to the embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DomainPath {
    /// Through a gradient-reversal node with the given scale.
    Reversed(f64),
    /// Plain identity, gradients flow unreversed.
    Identity,
    /// Domain head not evaluated.
    Skip,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub domain: DomainPath,
    /// Seeds the dropout masks; each head draws from its own stream.
    pub dropout_seed: u64,
}

pub struct ForwardOutput {
    pub bound: Bound,
    /// `[batch, E]`
    pub embeddings: Var,
    /// `[batch, 2]`
    pub spoof_logits: Var,
    /// `[batch, domains]`
    pub domain_logits: Option<Var>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl<T: Real> Model<T> {
    /// Fresh parameters: linear layers uniform in ±1/sqrt(fan_in), layer
    /// weights zero (uniform mixing), batch-norm scale one and shift zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = &config.mhfa;
        let mut tensors = BTreeMap::new();
        let linear = |tensors: &mut BTreeMap<String, Tensor<T>>, rng: &mut ChaCha8Rng, w: &str, b: Option<&str>, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            tensors.insert(w.to_owned(), uniform(rng, vec![fan_in, fan_out], bound));
            if let Some(b) = b {
                tensors.insert(b.to_owned(), uniform(rng, vec![fan_out], bound));
            }
        };
        if config.encoder {
            linear(&mut tensors, &mut rng, "encoder.weight", Some("encoder.bias"), m.frame_dim, m.frame_dim);
        }
        tensors.insert("mhfa.layer_key".into(), Tensor::zeros(vec![m.num_layers]));
        tensors.insert("mhfa.layer_value".into(), Tensor::zeros(vec![m.num_layers]));
        linear(&mut tensors, &mut rng, "mhfa.key_proj", None, m.frame_dim, m.num_heads);
        linear(&mut tensors, &mut rng, "mhfa.value_proj", None, m.frame_dim, m.value_dim);
        linear(
            &mut tensors,
            &mut rng,
            "mhfa.out_proj",
            Some("mhfa.out_bias"),
            m.num_heads * m.value_dim,
            m.embedding_dim,
        );
        let mut batch_norm = BTreeMap::new();
        let heads = std::iter::once((SPOOF, &config.spoof_head))
            .chain(config.domain_head.as_ref().map(|h| (DOMAIN, h)));
        for (prefix, h) in heads {
            let p = |s: &str| format!("{prefix}.{s}");
            linear(&mut tensors, &mut rng, &p("fc1.weight"), Some(&p("fc1.bias")), m.embedding_dim, h.hidden_dim);
            tensors.insert(p("bn.gamma"), Tensor::full(vec![h.hidden_dim], T::one()));
            tensors.insert(p("bn.beta"), Tensor::zeros(vec![h.hidden_dim]));
            linear(&mut tensors, &mut rng, &p("fc2.weight"), Some(&p("fc2.bias")), h.hidden_dim, h.num_outputs);
            batch_norm.insert(prefix.to_owned(), BatchNormState::new(h.hidden_dim));
        }
        Ok(Model {
            config,
            params: ModelParams { tensors, batch_norm },
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Registers every trainable tensor on `tape` under its own name.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params.tensors {
            vars.insert(name.clone(), tape.param(name, t.clone())?);
        }
        Ok(Bound { vars })
    }

    fn check_stack(&self, stack: &LayerStack) -> Result<()> {
        let m = &self.config.mhfa;
        if stack.layers() != m.num_layers || stack.dim() != m.frame_dim {
            return Err(Error::dim(
                "mhfa_pool",
                format!(
                    "stack [{}, {}, {}] vs model layers {} dim {}",
                    stack.layers(),
                    stack.frames(),
                    stack.dim(),
                    m.num_layers,
                    m.frame_dim
                ),
            ));
        }
        Ok(())
    }

    /// Pooled embedding `[1, E]` of one utterance.
    pub fn embed(&self, tape: &mut Tape<T>, bound: &Bound, stack: &LayerStack) -> Result<Var> {
        self.check_stack(stack)?;
        let x = tape.leaf(stack.to_tensor());
        let x = frame_encode(tape, &self.config, bound, x)?;
        mhfa_pool(tape, &self.config.mhfa, bound, x)
    }

    /// Embeddings `[batch, E]` for a batch of utterances.
    pub fn embed_batch(&self, tape: &mut Tape<T>, bound: &Bound, stacks: &[&LayerStack]) -> Result<Var> {
        let rows = stacks
            .iter()
            .map(|s| self.embed(tape, bound, s))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&rows, 0)
    }

    /// Full forward pass over a batch: embeddings, spoofing logits and,
    /// unless skipped or absent, domain logits.
    pub fn forward(&mut self, tape: &mut Tape<T>, stacks: &[&LayerStack], opts: ForwardOptions) -> Result<ForwardOutput> {
        let bound = self.bind(tape)?;
        let embeddings = self.embed_batch(tape, &bound, stacks)?;
        let Model { config, params } = self;
        let mut spoof_rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
        spoof_rng.set_stream(1);
        let spoof_bn = params.batch_norm.get_mut(SPOOF).expect("spoof head present");
        let spoof_logits = head(tape, SPOOF, &config.spoof_head, &bound, embeddings, spoof_bn, opts.mode, &mut spoof_rng)?;
        let domain_logits = match (opts.domain, &config.domain_head) {
            (DomainPath::Skip, _) => None,
            (_, None) => {
                return Err(Error::Config(
                    "domain head requested but the model has a single domain".into(),
                ))
            }
            (path, Some(cfg)) => {
                let mut domain_rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
                domain_rng.set_stream(2);
                let bn = params.batch_norm.get_mut(DOMAIN).expect("domain head present");
                let lambda = match path {
                    DomainPath::Reversed(l) => Some(l),
                    _ => None,
                };
                Some(domain_head(tape, cfg, &bound, embeddings, lambda, bn, opts.mode, &mut domain_rng)?)
            }
        };
        Ok(ForwardOutput {
            bound,
            embeddings,
            spoof_logits,
            domain_logits,
        })
    }

    /// Eval-mode embedding of one utterance as a plain vector.
    pub fn embedding(&self, stack: &LayerStack) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let e = self.embed(&mut tape, &bound, stack)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Eval-mode embedding and detection score of one utterance.
    pub fn score(&self, stack: &LayerStack) -> Result<(Vec<T>, f64)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let e = self.embed(&mut tape, &bound, stack)?;
        let mut bn = self.params.batch_norm[SPOOF].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = head(&mut tape, SPOOF, &self.config.spoof_head, &bound, e, &mut bn, Mode::Eval, &mut rng)?;
        let score = detection_score(tape.value(logits).data());
        Ok((tape.value(e).data().to_vec(), score))
    }
}

/// Per-frame `relu(x · W + b)` over every layer and frame; identity when
/// the model has no encoder. Input and output are `[L, T, D]`.
pub fn frame_encode<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, bound: &Bound, stack: Var) -> Result<Var> {
    if !config.encoder {
        return Ok(stack);
    }
    let shape = tape.shape(stack).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("frame_encode", format!("expected [L, T, D], got {shape:?}")));
    }
    let flat = tape.reshape(stack, vec![shape[0] * shape[1], shape[2]])?;
    let h = tape.matmul(flat, bound.var("encoder.weight")?)?;
    let h = tape.add(h, bound.var("encoder.bias")?)?;
    let h = tape.relu(h);
    tape.reshape(h, shape)
}

/// Multi-head factorized attentive pooling of an `[L, T, D]` stack into a
/// `[1, E]` embedding.
pub fn mhfa_pool<T: Real>(tape: &mut Tape<T>, cfg: &MhfaConfig, bound: &Bound, stack: Var) -> Result<Var> {
    let shape = tape.shape(stack).to_vec();
    if shape.len() != 3 || shape[0] != cfg.num_layers || shape[2] != cfg.frame_dim {
        return Err(Error::dim(
            "mhfa_pool",
            format!("stack {shape:?} vs layers {} dim {}", cfg.num_layers, cfg.frame_dim),
        ));
    }
    let (layers, frames, dim) = (shape[0], shape[1], shape[2]);
    if frames == 0 {
        return Err(Error::EmptyAudio("utterance has no frames".into()));
    }
    let flat = tape.reshape(stack, vec![layers, frames * dim])?;
    let mix = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
        let w = tape.reshape(bound.var(name)?, vec![1, layers])?;
        let w = tape.softmax(w, 1)?;
        let m = tape.matmul(w, flat)?;
        tape.reshape(m, vec![frames, dim])
    };
    let keys = mix(tape, "mhfa.layer_key")?;
    let values = mix(tape, "mhfa.layer_value")?;
    let logits = tape.matmul(keys, bound.var("mhfa.key_proj")?)?;
    let attn = tape.softmax(logits, 0)?;
    let projected = tape.matmul(values, bound.var("mhfa.value_proj")?)?;
    let attn_t = tape.transpose(attn)?;
    let contexts = tape.matmul(attn_t, projected)?;
    let concat = tape.reshape(contexts, vec![1, cfg.num_heads * cfg.value_dim])?;
    let out = tape.matmul(concat, bound.var("mhfa.out_proj")?)?;
    tape.add(out, bound.var("mhfa.out_bias")?)
}

/// Linear → batch norm → ReLU → dropout → linear, on `[batch, E]` input.
#[allow(clippy::too_many_arguments)]
pub fn head<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    prefix: &str,
    cfg: &HeadConfig,
    bound: &Bound,
    x: Var,
    bn: &mut BatchNormState<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let p = |s: &str| format!("{prefix}.{s}");
    let h = tape.matmul(x, bound.var(&p("fc1.weight"))?)?;
    let h = tape.add(h, bound.var(&p("fc1.bias"))?)?;
    let h = tape.batch_norm(h, bound.var(&p("bn.gamma"))?, bound.var(&p("bn.beta"))?, bn, mode)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, cfg.dropout, mode, rng)?;
    let out = tape.matmul(h, bound.var(&p("fc2.weight"))?)?;
    tape.add(out, bound.var(&p("fc2.bias"))?)
}

/// Domain classifier behind a gradient-reversal node (`lambda = Some`) or
/// a plain identity link (`None`).
#[allow(clippy::too_many_arguments)]
pub fn domain_head<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    cfg: &HeadConfig,
    bound: &Bound,
    embeddings: Var,
    lambda: Option<f64>,
    bn: &mut BatchNormState<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if cfg.num_outputs < 2 {
        return Err(Error::Config(format!(
            "domain head needs at least 2 domains, got {}",
            cfg.num_outputs
        )));
    }
    let x = match lambda {
        Some(l) => tape.grl(embeddings, T::of(l))?,
        None => embeddings,
    };
    head(tape, DOMAIN, cfg, bound, x, bn, mode, rng)
}

/// Bona fide logit minus spoof logit; higher means more bona fide.
pub fn detection_score<T: Real>(logits: &[T]) -> f64 {
    logits[0].f64() - logits[1].f64()
}

#[cfg(test)]
mod tests;
