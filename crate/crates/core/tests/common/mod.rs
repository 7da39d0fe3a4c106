//! Checks shared by the integration tests and the acceptance run. Each
//! returns what it measured so callers can both assert and report.

#![allow(dead_code)]

use std::collections::BTreeMap;

use idfe::autodiff::{Mode, Tape};
use idfe::corpus::{
    decode_embedding, encode_embedding, make_batches, synth_generate, CorpusSet, SynthParams, SynthSpec,
};
use idfe::model::{Checkpoint, DomainPath, HeadConfig, MhfaConfig, Model, ModelConfig, ParamGroup};
use idfe::training::{objective_gradients, train_observed, Batch, Objective, Precision, TrainConfig};
use idfe::{LayerStack, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(domains: usize) -> ModelConfig {
    let head = |n| HeadConfig {
        hidden_dim: 7,
        dropout: 0.2,
        num_outputs: n,
    };
    ModelConfig {
        mhfa: MhfaConfig {
            num_layers: 2,
            frame_dim: 5,
            num_heads: 2,
            value_dim: 3,
            embedding_dim: 6,
        },
        encoder: true,
        spoof_head: head(2),
        domain_head: (domains >= 2).then(|| head(domains)),
    }
}

pub fn tiny_set(domains: usize, per_class: usize, seed: u64) -> CorpusSet {
    let params = SynthParams {
        num_domains: domains,
        dim: 5,
        layers: 2,
        frames_min: 2,
        frames_max: 5,
        unseen_domain: false,
        ..SynthParams::default()
    };
    synth_generate(&SynthSpec::new(params, seed).unwrap(), per_class, seed).unwrap()
}

pub fn batch_of(set: &CorpusSet, size: usize, seed: u64) -> Batch {
    let examples = set.examples().unwrap();
    let indices = &make_batches(examples.len(), size, seed, 0).unwrap()[0];
    Batch::gather(&examples, indices, usize::MAX, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = scale(a).max(scale(b));
    if s == 0.0 {
        0.0
    } else {
        diff / s
    }
}

fn group_vectors(grads: &BTreeMap<String, Tensor<f64>>) -> BTreeMap<ParamGroup, Vec<f64>> {
    let mut out: BTreeMap<ParamGroup, Vec<f64>> = BTreeMap::new();
    for (name, g) in grads {
        out.entry(ParamGroup::of(name)).or_default().extend_from_slice(g.data());
    }
    out
}

const ALPHA: f64 = 0.1;
const WEIGHTS: [f64; 2] = [0.7, 1.3];

/// Relative error, per parameter group, between the trainer's analytic
/// gradients and central differences (h = 1e-5) on one seeded instance
/// with alpha = 0.1 and lambda = 1.
///
/// The finite differences are of the two losses separately. The heads
/// must match `d(L_s + a L_d)`; the extractor must match
/// `d L_s - a lambda d L_d`, which is what the reversal makes of it. The
/// unreversed gradient of `L_s + a L_d` is checked against the plain sum
/// too.
pub fn fd_errors(seed: u64) -> BTreeMap<ParamGroup, f64> {
    let lambda = 1.0;
    let set = tiny_set(3, 3, seed);
    let batch = batch_of(&set, 8, seed);
    let mut model = Model::<f64>::init(tiny_config(3), seed).unwrap();
    let dropout_seed = seed ^ 0xD0;
    let joint = Objective::Joint { alpha: ALPHA, lambda };
    let run = |m: &mut Model<f64>, obj| objective_gradients(m, &batch, WEIGHTS, obj, Mode::Train, dropout_seed).unwrap();
    let reversed = run(&mut model, joint).grads;
    let spoof = run(&mut model, Objective::Spoof).grads;
    let domain = run(&mut model, Objective::Domain(DomainPath::Identity)).grads;

    let h = 1e-5;
    let mut fd_s = BTreeMap::new();
    let mut fd_d = BTreeMap::new();
    let names: Vec<String> = model.params.tensors.keys().cloned().collect();
    for name in &names {
        let n = model.params.tensors[name].len();
        let (mut gs, mut gd) = (vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let x0 = model.params.tensors[name].data()[i];
            let mut at = |x: f64| {
                model.params.tensors.get_mut(name).unwrap().data_mut()[i] = x;
                let g = run(&mut model, joint);
                (g.loss_s, g.loss_d)
            };
            let (sp, dp) = at(x0 + h);
            let (sm, dm) = at(x0 - h);
            at(x0);
            gs[i] = (sp - sm) / (2.0 * h);
            gd[i] = (dp - dm) / (2.0 * h);
        }
        fd_s.insert(name.clone(), Tensor::new(model.params.tensors[name].shape().to_vec(), gs).unwrap());
        fd_d.insert(name.clone(), Tensor::new(model.params.tensors[name].shape().to_vec(), gd).unwrap());
    }

    let combine = |reverse_features: bool| -> BTreeMap<String, Tensor<f64>> {
        names
            .iter()
            .map(|name| {
                let c = if reverse_features && ParamGroup::of(name) == ParamGroup::FeatureExtractor {
                    -ALPHA * lambda
                } else {
                    ALPHA
                };
                let v: Vec<f64> = fd_s[name].data().iter().zip(fd_d[name].data()).map(|(s, d)| s + c * d).collect();
                (name.clone(), Tensor::new(fd_s[name].shape().to_vec(), v).unwrap())
            })
            .collect()
    };
    let unreversed: BTreeMap<String, Tensor<f64>> = names
        .iter()
        .map(|name| {
            let v: Vec<f64> = spoof[name].data().iter().zip(domain[name].data()).map(|(s, d)| s + ALPHA * d).collect();
            (name.clone(), Tensor::new(spoof[name].shape().to_vec(), v).unwrap())
        })
        .collect();

    let mut worst = BTreeMap::new();
    for (analytic, numeric) in [(&reversed, combine(true)), (&unreversed, combine(false))] {
        let a = group_vectors(analytic);
        let f = group_vectors(&numeric);
        for (g, av) in &a {
            let e = rel(av, &f[g]);
            let w = worst.entry(*g).or_insert(0.0f64);
            *w = w.max(e);
        }
    }
    worst
}

/// Worst relative gap, over the extractor parameters, between the joint
/// gradient and `grad L_s - alpha lambda grad L_d` (the latter without
/// the reversal), at the first, middle and last step of a short run.
pub fn composition_errors(seed: u64) -> Vec<(usize, f64, f64)> {
    let set = tiny_set(3, 8, seed);
    let cfg = TrainConfig {
        alpha: ALPHA,
        batch_size: 8,
        epochs: 2,
        seed,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    let mut model = Model::<f64>::init(tiny_config(3), seed).unwrap();
    let mut out = Vec::new();
    train_observed(
        &mut model,
        &set,
        &cfg,
        |v| {
            if ![0, v.total_steps / 2, v.total_steps - 1].contains(&v.step) {
                return Ok(());
            }
            let mut m = v.model.clone();
            let mut run = |obj| objective_gradients(&mut m, v.batch, v.class_weights, obj, Mode::Train, v.dropout_seed);
            let joint = run(Objective::Joint { alpha: ALPHA, lambda: v.lambda })?.grads;
            let s = run(Objective::Spoof)?.grads;
            let d = run(Objective::Domain(DomainPath::Identity))?.grads;
            // One vector over the whole extractor: a tensor whose true
            // gradient is zero (a bias ahead of batch norm) has only
            // rounding noise to compare on its own.
            let (mut got, mut want) = (Vec::new(), Vec::new());
            for (name, g) in &joint {
                if ParamGroup::of(name) != ParamGroup::FeatureExtractor {
                    continue;
                }
                got.extend_from_slice(g.data());
                want.extend(s[name].data().iter().zip(d[name].data()).map(|(s, d)| s - ALPHA * v.lambda * d));
            }
            let worst = rel(&got, &want);
            out.push((v.step, v.lambda, worst));
            Ok(())
        },
        |_, _| Ok(()),
    )
    .unwrap();
    out
}

/// Largest magnitudes that must be exactly zero: spoof-head gradient of
/// `L_d`, domain-head gradient of `L_s`, and domain-head gradient of the
/// joint objective at alpha = 0.
pub fn routing_leaks(seed: u64) -> [f64; 3] {
    let set = tiny_set(3, 3, seed);
    let batch = batch_of(&set, 8, seed);
    let mut model = Model::<f64>::init(tiny_config(3), seed).unwrap();
    let mut run = |obj| objective_gradients(&mut model, &batch, WEIGHTS, obj, Mode::Train, seed).unwrap().grads;
    let max_in = |grads: &BTreeMap<String, Tensor<f64>>, group| {
        grads
            .iter()
            .filter(|(k, _)| ParamGroup::of(k) == group)
            .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    };
    let d = run(Objective::Domain(DomainPath::Reversed(1.0)));
    let s = run(Objective::Spoof);
    let frozen = run(Objective::Joint { alpha: 0.0, lambda: 1.0 });
    [
        max_in(&d, ParamGroup::SpoofHead),
        max_in(&s, ParamGroup::DomainHead),
        max_in(&frozen, ParamGroup::DomainHead),
    ]
}

/// Number of (lambda, tensor) cases where the reversal's input gradient
/// is not bit-identical to `-lambda * upstream`.
pub fn grl_mismatches(tensors: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for lambda in [0.0, 0.1, 0.5, 1.0] {
        for _ in 0..tensors {
            let shape = vec![rng.random_range(1..6), rng.random_range(1..9)];
            let n = shape[0] * shape[1];
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let up: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(shape.clone(), x).unwrap());
            let uv = tape.leaf(Tensor::new(shape, up.clone()).unwrap());
            let y = tape.grl(xv, lambda).unwrap();
            let p = tape.mul(y, uv).unwrap();
            let loss = tape.sum_all(p).unwrap();
            let g = tape.backward(loss).unwrap().wrt(xv);
            if g.data().iter().zip(&up).any(|(g, u)| g.to_bits() != (-lambda * u).to_bits()) {
                bad += 1;
            }
        }
    }
    bad
}

/// A layer stack whose values are arbitrary finite f32 bit patterns,
/// including subnormals and negative zero.
pub fn random_stack(rng: &mut ChaCha8Rng) -> LayerStack {
    let (l, t, d) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..7));
    let data = (0..l * t * d)
        .map(|_| loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        })
        .collect();
    LayerStack::new(l, t, d, data).unwrap()
}

/// A checkpoint of random records: names, ranks 0-3 and arbitrary bits.
pub fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    for _ in 0..rng.random_range(0..5) {
        let name: String = (0..rng.random_range(1..12)).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        let shape: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(1..5)).collect();
        let n = shape.iter().product();
        let data = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        ckpt.tensors.insert(name, Tensor::new(shape, data).unwrap());
    }
    ckpt
}

/// Failures among `n` random IDF1 and IDFC byte round trips.
pub fn format_round_trip_failures(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut emb, mut ckpt) = (0, 0);
    for _ in 0..n {
        let s = random_stack(&mut rng);
        let bytes = encode_embedding(&s);
        match decode_embedding(&bytes) {
            Ok(back) if encode_embedding(&back) == bytes && back.data().len() == s.data().len() => {}
            _ => emb += 1,
        }
        let c = random_checkpoint(&mut rng);
        let bytes = c.to_bytes();
        match Checkpoint::from_bytes(&bytes) {
            Ok(back) if back.to_bytes() == bytes && back.tensors.len() == c.tensors.len() => {}
            _ => ckpt += 1,
        }
    }
    (emb, ckpt)
}
