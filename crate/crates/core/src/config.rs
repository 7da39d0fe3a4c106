//! Flat `key = value` run configuration.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are errors, both in files and in overrides. The resolved
//! form lists every key in a fixed order and parses back to the same
//! settings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audio::{Order, Policy, PrepConfig, TrimParams};
use crate::corpus::SynthParams;
use crate::error::{Error, Result};
use crate::experiment::PhenomenonConfig;
use crate::model::{HeadConfig, MhfaConfig, ModelConfig};
use crate::training::{ClassWeightMode, Precision, TrainConfig};

/// `(key, default, description)` in snapshot order.
const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for data, initialization, batching and dropout"),
    // synthetic corpora
    ("num_domains", "3", "training corpora to synthesize"),
    ("dim", "64", "frame dimension of synthetic stacks"),
    ("layers", "2", "layers per synthetic stack"),
    ("frames_min", "1", "shortest synthetic utterance in frames"),
    ("frames_max", "4", "longest synthetic utterance in frames"),
    ("bias_magnitude", "2", "length of the per-corpus bias vector"),
    ("class_separation", "1", "length of the class direction"),
    ("noise", "1", "per-dimension noise standard deviation"),
    ("unseen_domain", "true", "add an evaluation corpus with a bias never seen in training"),
    ("train_per_class", "300", "training utterances per domain and class"),
    ("eval_per_class", "100", "evaluation utterances per domain and class; 0 skips the evaluation set"),
    // model
    ("embedding_dim", "64", "pooled embedding size"),
    ("num_heads", "4", "attention heads in the pooling"),
    ("value_dim", "16", "compressed value size per head"),
    ("hidden_dim", "128", "hidden width of both heads"),
    ("dropout", "0.2", "dropout probability in both heads"),
    ("encoder", "false", "trainable per-frame encoder in front of the pooling"),
    // training
    ("alpha", "0.1", "weight of the domain loss; 0 trains the plain detector"),
    ("lr", "0.001", "Adam learning rate"),
    ("batch_size", "32", "utterances per batch"),
    ("epochs", "10", "passes over the training set"),
    ("gamma", "10", "steepness of the reversal-strength schedule"),
    ("class_weight_mode", "ratio", "ratio or none"),
    ("segment_seconds", "4", "training clip length in seconds"),
    ("frame_rate", "50", "stack frames per second"),
    ("precision", "f32", "f32 or f64 arithmetic for training"),
    ("case", "0", "training case 1-4 over manifest domains A, B, C; 0 uses every domain as is"),
    ("train_manifest", "", "manifest of training stacks"),
    // evaluation
    ("eval_manifest", "", "manifest scored by eval, probe and export-emb"),
    ("checkpoint", "", "model checkpoint for eval, probe and export-emb"),
    ("probe_train_frac", "0.8", "fraction of each domain used to fit the probe"),
    // waveform preparation
    ("prep_manifest", "", "manifest of WAV files to prepare"),
    ("assets", "", "asset manifest of path/category lines; required when augment is not none"),
    ("augment", "none", "none, all, or a comma list of reverb, speech, music, noise"),
    ("augment_prob", "1", "probability that an utterance is augmented"),
    ("order", "trim_first", "trim_first or augment_first"),
    ("top_db", "40", "trimming threshold below the loudest frame"),
    ("trim_frame", "2048", "trimming analysis frame in samples"),
    ("trim_hop", "512", "trimming hop in samples"),
    ("prep_segment", "true", "cut prepared audio to segment_seconds"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: KEYS.iter().map(|(k, v, _)| (*k, (*v).to_owned())).collect(),
        }
    }
}

fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl Settings {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _, _)| *k)
    }

    /// Defaults overlaid with the assignments in `text`. Every bad line is
    /// reported.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        let mut problems = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match split_pair(line) {
                Some((k, v)) => {
                    if let Err(e) = s.set(k, v) {
                        problems.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => problems.push(format!("line {}: expected key = value, got {line:?}", i + 1)),
            }
        }
        if problems.is_empty() {
            Ok(s)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Settings::parse(&text).map_err(|e| match e {
            Error::Validation(p) => Error::Validation(p.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.iter_mut().find(|(k, _)| **k == key) {
            Some((_, v)) => {
                *v = value.to_owned();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split_pair(assignment).ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
    }

    /// A path-valued key, `None` when empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::Config(format!("{key} is not set")))
    }

    /// Every key with its value and description, in a fixed order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{k} = {}\n", self.values[k]));
        }
        out
    }

    /// Parses every key once, so a bad value fails before any work starts.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut note = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        note(self.get::<u64>("seed").map(drop));
        note(self.synth_params().map(drop));
        note(self.train_config().map(drop));
        note(self.prep_config().map(drop));
        note(self.case().map(drop));
        note(self.get::<usize>("train_per_class").map(drop));
        note(self.get::<usize>("eval_per_class").map(drop));
        note(self.model_config(1, 1, 2).map(drop));
        note(self.get::<f64>("probe_train_frac").map(drop));
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn case(&self) -> Result<u8> {
        let c: u8 = self.get("case")?;
        if c > 4 {
            return Err(Error::Config(format!("case = {c} must be 0-4")));
        }
        Ok(c)
    }

    pub fn synth_params(&self) -> Result<SynthParams> {
        Ok(SynthParams {
            num_domains: self.get("num_domains")?,
            dim: self.get("dim")?,
            layers: self.get("layers")?,
            frames_min: self.get("frames_min")?,
            frames_max: self.get("frames_max")?,
            bias_magnitude: self.get("bias_magnitude")?,
            class_separation: self.get("class_separation")?,
            noise: self.get("noise")?,
            unseen_domain: self.get("unseen_domain")?,
        })
    }

    pub fn phenomenon(&self) -> Result<PhenomenonConfig> {
        Ok(PhenomenonConfig {
            synth: self.synth_params()?,
            train_per_class: self.get("train_per_class")?,
            eval_per_class: self.get("eval_per_class")?,
            train: self.train_config()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let class_weight_mode = match self.raw("class_weight_mode") {
            "ratio" => ClassWeightMode::Ratio,
            "none" => ClassWeightMode::None,
            other => return Err(Error::Config(format!("class_weight_mode = {other:?}: expected ratio or none"))),
        };
        let precision = match self.raw("precision") {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(Error::Config(format!("precision = {other:?}: expected f32 or f64"))),
        };
        let cfg = TrainConfig {
            alpha: self.get("alpha")?,
            lr: self.get("lr")?,
            batch_size: self.get("batch_size")?,
            epochs: self.get("epochs")?,
            gamma: self.get("gamma")?,
            class_weight_mode,
            seed: self.seed()?,
            segment_seconds: self.get("segment_seconds")?,
            frame_rate: self.get("frame_rate")?,
            precision,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model architecture for data of the given shape. The domain head
    /// exists only for two or more training domains.
    pub fn model_config(&self, num_layers: usize, frame_dim: usize, num_domains: usize) -> Result<ModelConfig> {
        let head = |n| -> Result<HeadConfig> {
            Ok(HeadConfig {
                hidden_dim: self.get("hidden_dim")?,
                dropout: self.get("dropout")?,
                num_outputs: n,
            })
        };
        let cfg = ModelConfig {
            mhfa: MhfaConfig {
                num_layers,
                frame_dim,
                num_heads: self.get("num_heads")?,
                value_dim: self.get("value_dim")?,
                embedding_dim: self.get("embedding_dim")?,
            },
            encoder: self.get("encoder")?,
            spoof_head: head(2)?,
            domain_head: if num_domains >= 2 { Some(head(num_domains)?) } else { None },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prep_config(&self) -> Result<PrepConfig> {
        let policies = match self.raw("augment") {
            "none" | "" => Vec::new(),
            "all" => Policy::ALL.to_vec(),
            list => list.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<Policy>>>()?,
        };
        let augment_prob: f64 = self.get("augment_prob")?;
        if !(0.0..=1.0).contains(&augment_prob) {
            return Err(Error::Config(format!("augment_prob = {augment_prob} outside [0, 1]")));
        }
        let order: Order = self.raw("order").parse()?;
        let segment: bool = self.get("prep_segment")?;
        Ok(PrepConfig {
            trim: TrimParams {
                top_db: self.get("top_db")?,
                frame: self.get("trim_frame")?,
                hop: self.get("trim_hop")?,
            },
            policies,
            augment_prob,
            order,
            segment_seconds: if segment { Some(self.get("segment_seconds")?) } else { None },
        })
    }
}
