//! Desk-scale reproduction of the dataset-bias effect: train on several
//! biased synthetic corpora with and without the adversarial domain loss,
//! then measure how much domain identity the embeddings carry and how well
//! spoofing detection transfers to a corpus with an unseen bias.

use crate::corpus::{synth_generate, CorpusSet, Label, SynthParams, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{domain_probe, eer, EmbeddingDump, EmbeddingRow, ProbeResult};
use crate::model::{Model, ModelConfig};
use crate::tensor::Real;
use crate::training::{derive_seed, train, EpochLog, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PhenomenonConfig {
    pub synth: SynthParams,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub train: TrainConfig,
}

impl Default for PhenomenonConfig {
    fn default() -> Self {
        PhenomenonConfig {
            synth: SynthParams::default(),
            train_per_class: 300,
            eval_per_class: 100,
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 32,
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhenomenonRun {
    pub alpha: f64,
    pub seed: u64,
    /// Domain probe on held-out utterances of the training domains.
    pub probe: ProbeResult,
    /// EER per seen evaluation domain.
    pub seen_eers: Vec<f64>,
    /// EER on the corpus whose bias was never seen in training.
    pub unseen_eer: f64,
    pub logs: Vec<EpochLog>,
}

/// Corpora shared by every run of one seed: training set over the seen
/// domains and an evaluation set that adds the unseen domain, if any, last.
pub fn phenomenon_corpora(cfg: &PhenomenonConfig, seed: u64) -> Result<(CorpusSet, CorpusSet)> {
    let spec = SynthSpec::new(cfg.synth.clone(), derive_seed(seed, 0, 0))?;
    let train_set = synth_generate(&spec.seen(), cfg.train_per_class, derive_seed(seed, 1, 0))?;
    let eval_set = synth_generate(&spec, cfg.eval_per_class, derive_seed(seed, 2, 0))?;
    Ok((train_set, eval_set))
}

/// Eval-mode embeddings of every record in `set`, with detection scores.
pub fn embed_set<T: Real>(model: &Model<T>, set: &CorpusSet) -> Result<(EmbeddingDump, Vec<f64>)> {
    let mut rows = Vec::with_capacity(set.len());
    let mut scores = Vec::with_capacity(set.len());
    for r in set.records() {
        let (e, s) = model.score(&*r.stack()?)?;
        rows.push(EmbeddingRow {
            utt_id: r.utt_id.clone(),
            label: r.label,
            domain: r.domain,
            vector: e.iter().map(|v| v.f64()).collect(),
        });
        scores.push(s);
    }
    Ok((EmbeddingDump { rows }, scores))
}

/// Trains one model with objective weight `alpha` and evaluates it.
pub fn run_phenomenon(cfg: &PhenomenonConfig, alpha: f64, seed: u64) -> Result<PhenomenonRun> {
    if !cfg.synth.unseen_domain {
        return Err(Error::Config("the experiment needs an unseen evaluation domain".into()));
    }
    let (train_set, eval_set) = phenomenon_corpora(cfg, seed)?;
    let p = &cfg.synth;
    let mut model = Model::<f32>::init(ModelConfig::desk(p.layers, p.dim, p.num_domains), derive_seed(seed, 3, 0))?;
    let tc = TrainConfig {
        alpha,
        seed: derive_seed(seed, 4, 0),
        ..cfg.train.clone()
    };
    let logs = train(&mut model, &train_set, &tc, |_, _| Ok(()))?;
    let (dump, scores) = embed_set(&model, &eval_set)?;
    let seen = EmbeddingDump {
        rows: dump.rows.iter().filter(|r| r.domain < p.num_domains).cloned().collect(),
    };
    let probe = domain_probe(&seen, 0.8, seed)?;
    let mut eers = Vec::new();
    for d in 0..eval_set.num_domains() {
        let (mut bona, mut spoof) = (Vec::new(), Vec::new());
        for (r, s) in dump.rows.iter().zip(&scores) {
            if r.domain == d {
                match r.label {
                    Label::Bonafide => bona.push(*s),
                    Label::Spoof => spoof.push(*s),
                }
            }
        }
        eers.push(eer(&bona, &spoof)?.eer);
    }
    let unseen_eer = eers.pop().expect("unseen domain is evaluated");
    Ok(PhenomenonRun {
        alpha,
        seed,
        probe,
        seen_eers: eers,
        unseen_eer,
        logs,
    })
}
