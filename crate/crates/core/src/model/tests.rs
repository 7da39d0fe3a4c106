use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_stack(rng: &mut ChaCha8Rng, l: usize, t: usize, d: usize) -> LayerStack {
    let data = (0..l * t * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    LayerStack::new(l, t, d, data).unwrap()
}

fn small_config(encoder: bool, domains: usize) -> ModelConfig {
    ModelConfig {
        mhfa: MhfaConfig {
            num_layers: 3,
            frame_dim: 5,
            num_heads: 2,
            value_dim: 3,
            embedding_dim: 4,
        },
        encoder,
        spoof_head: HeadConfig {
            hidden_dim: 6,
            dropout: 0.0,
            num_outputs: 2,
        },
        domain_head: (domains >= 2).then_some(HeadConfig {
            hidden_dim: 6,
            dropout: 0.0,
            num_outputs: domains,
        }),
    }
}

fn randomize(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// MHFA written directly from its defining sums, one loop per index.
fn mhfa_oracle(model: &Model<f64>, stack: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let c = &model.config.mhfa;
    let p = |n: &str| model.params.tensors[n].data().to_vec();
    let (l, t, d) = (stack.len(), stack[0].len(), c.frame_dim);
    let wk = softmax(&p("mhfa.layer_key"));
    let wv = softmax(&p("mhfa.layer_value"));
    let (kp, vp, op, ob) = (p("mhfa.key_proj"), p("mhfa.value_proj"), p("mhfa.out_proj"), p("mhfa.out_bias"));
    let mut concat = Vec::new();
    for h in 0..c.num_heads {
        let logits: Vec<f64> = (0..t)
            .map(|ti| {
                (0..d)
                    .map(|di| {
                        let k: f64 = (0..l).map(|li| wk[li] * stack[li][ti][di]).sum();
                        k * kp[di * c.num_heads + h]
                    })
                    .sum()
            })
            .collect();
        let attn = softmax(&logits);
        for j in 0..c.value_dim {
            let mut ctx = 0.0;
            for ti in 0..t {
                let vproj: f64 = (0..d)
                    .map(|di| {
                        let v: f64 = (0..l).map(|li| wv[li] * stack[li][ti][di]).sum();
                        v * vp[di * c.value_dim + j]
                    })
                    .sum();
                ctx += attn[ti] * vproj;
            }
            concat.push(ctx);
        }
    }
    (0..c.embedding_dim)
        .map(|e| ob[e] + concat.iter().enumerate().map(|(i, x)| x * op[i * c.embedding_dim + e]).sum::<f64>())
        .collect()
}

fn nested(stack: &LayerStack) -> Vec<Vec<Vec<f64>>> {
    (0..stack.layers())
        .map(|l| {
            (0..stack.frames())
                .map(|t| stack.frame(l, t).iter().map(|&v| v as f64).collect())
                .collect()
        })
        .collect()
}

#[test]
fn mhfa_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Model::<f64>::init(small_config(false, 2), 0).unwrap();
    for seed in 0..10 {
        randomize(&mut model, seed);
        let stack = random_stack(&mut rng, 3, 7, 5);
        let got = model.embedding(&stack).unwrap();
        let want = mhfa_oracle(&model, &nested(&stack));
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_key_projection_gives_mean_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = Model::<f64>::init(small_config(false, 2), 0).unwrap();
    randomize(&mut model, 3);
    model.params.tensors.get_mut("mhfa.key_proj").unwrap().data_mut().fill(0.0);
    let stack = random_stack(&mut rng, 3, 6, 5);

    // each head context is the frame mean of V·value_proj
    let x = nested(&stack);
    let wv = softmax(model.params.tensors["mhfa.layer_value"].data());
    let vp = model.params.tensors["mhfa.value_proj"].data();
    let mut mean_ctx = vec![0.0; 3];
    for t in 0..6 {
        for (j, m) in mean_ctx.iter_mut().enumerate() {
            let proj: f64 = (0..5)
                .map(|d| (0..3).map(|l| wv[l] * x[l][t][d]).sum::<f64>() * vp[d * 3 + j])
                .sum();
            *m += proj / 6.0;
        }
    }
    let concat: Vec<f64> = mean_ctx.iter().chain(&mean_ctx).copied().collect();
    let op = model.params.tensors["mhfa.out_proj"].data();
    let ob = model.params.tensors["mhfa.out_bias"].data();
    let got = model.embedding(&stack).unwrap();
    for e in 0..4 {
        let want = ob[e] + (0..6).map(|i| concat[i] * op[i * 4 + e]).sum::<f64>();
        assert!((got[e] - want).abs() < 1e-12);
    }
}

#[test]
fn single_layer_and_single_frame_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = small_config(false, 2);
    cfg.mhfa.num_layers = 1;
    let mut model = Model::<f64>::init(cfg, 0).unwrap();
    randomize(&mut model, 5);
    // L = 1: layer weights are irrelevant
    let stack = random_stack(&mut rng, 1, 4, 5);
    let before = model.embedding(&stack).unwrap();
    model.params.tensors.get_mut("mhfa.layer_key").unwrap().data_mut()[0] = 7.0;
    assert_eq!(model.embedding(&stack).unwrap(), before);

    // T = 1: key projection is irrelevant
    let one = random_stack(&mut rng, 1, 1, 5);
    let a = model.embedding(&one).unwrap();
    randomize_key_proj(&mut model);
    assert_eq!(model.embedding(&one).unwrap(), a);
}

fn randomize_key_proj(model: &mut Model<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for v in model.params.tensors.get_mut("mhfa.key_proj").unwrap().data_mut() {
        *v = rng.random_range(-3.0..3.0);
    }
}

#[test]
fn layer_and_attention_weights_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = Model::<f64>::init(small_config(true, 2), 0).unwrap();
    randomize(&mut model, 7);
    let stack = random_stack(&mut rng, 3, 9, 5);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    model.embed(&mut tape, &bound, &stack).unwrap();
    // Every softmax node on the tape normalizes along its reduced axis:
    // two [1, L] layer-weight rows and one [T, H] attention matrix.
    let mut seen = 0;
    for node in &tape.nodes {
        if let crate::autodiff::Op::Softmax { axis, .. } = node.op {
            let v = &node.value;
            let (outer, n, inner) = Tensor::<f64>::axis_split(v.shape(), axis);
            for o in 0..outer {
                for j in 0..inner {
                    let s: f64 = (0..n).map(|i| v.data()[(o * n + i) * inner + j]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
            seen += 1;
        }
    }
    assert_eq!(seen, 3);
}

#[test]
fn pooling_ignores_frame_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = Model::<f64>::init(small_config(true, 2), 0).unwrap();
    randomize(&mut model, 9);
    let stack = random_stack(&mut rng, 3, 6, 5);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut data = Vec::new();
    for l in 0..3 {
        for &t in &perm {
            data.extend_from_slice(stack.frame(l, t));
        }
    }
    let permuted = LayerStack::new(3, 6, 5, data).unwrap();
    let a = model.embedding(&stack).unwrap();
    let b = model.embedding(&permuted).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn frame_encode_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let stack = random_stack(&mut rng, 2, 3, 5);

    let disabled = Model::<f64>::init(small_config(false, 2), 0).unwrap();
    let mut tape = Tape::new();
    let bound = disabled.bind(&mut tape).unwrap();
    let x = tape.leaf(stack.to_tensor());
    assert_eq!(frame_encode(&mut tape, &disabled.config, &bound, x).unwrap(), x);

    let mut model = Model::<f64>::init(small_config(true, 2), 0).unwrap();
    let run = |model: &Model<f64>| {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let x = tape.leaf(stack.to_tensor());
        let y = frame_encode(&mut tape, &model.config, &bound, x).unwrap();
        tape.value(y).clone()
    };
    model.params.tensors.get_mut("encoder.weight").unwrap().data_mut().fill(0.0);
    model.params.tensors.get_mut("encoder.bias").unwrap().data_mut().fill(0.0);
    assert!(run(&model).data().iter().all(|&v| v == 0.0));

    randomize(&mut model, 11);
    let out = run(&model);
    assert_eq!(out.shape(), &[2, 3, 5]);
    let w = model.params.tensors["encoder.weight"].data();
    let b = model.params.tensors["encoder.bias"].data();
    for l in 0..2 {
        for t in 0..3 {
            let f = stack.frame(l, t);
            for j in 0..5 {
                let pre: f64 = b[j] + (0..5).map(|i| f[i] as f64 * w[i * 5 + j]).sum::<f64>();
                let got = out.data()[(l * 3 + t) * 5 + j];
                assert!((got - pre.max(0.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mismatched_stack_is_a_dimension_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = Model::<f64>::init(small_config(true, 2), 0).unwrap();
    let stack = random_stack(&mut rng, 3, 4, 6);
    assert!(matches!(model.embedding(&stack), Err(Error::Dimension { .. })));
}

fn batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<LayerStack> {
    (0..n).map(|i| random_stack(rng, 3, 3 + i % 4, 5)).collect()
}

#[test]
fn spoof_head_eval_is_deterministic_and_bias_only_with_zero_output_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut model = Model::<f64>::init(small_config(true, 2), 0).unwrap();
    randomize(&mut model, 14);
    let stacks = batch(&mut rng, 4);
    let refs: Vec<_> = stacks.iter().collect();
    let opts = ForwardOptions {
        mode: Mode::Eval,
        domain: DomainPath::Skip,
        dropout_seed: 0,
    };
    let logits = |model: &mut Model<f64>| {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &refs, opts).unwrap();
        tape.value(out.spoof_logits).clone()
    };
    assert_eq!(logits(&mut model), logits(&mut model));
    model.params.tensors.get_mut("spoof.fc2.weight").unwrap().data_mut().fill(0.0);
    let bias = model.params.tensors["spoof.fc2.bias"].data().to_vec();
    let out = logits(&mut model);
    for row in out.data().chunks(2) {
        assert_eq!(row, bias.as_slice());
    }
}

#[test]
fn train_without_dropout_equals_eval_with_batch_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut model = Model::<f64>::init(small_config(true, 2), 0).unwrap();
    randomize(&mut model, 16);
    let stacks = batch(&mut rng, 6);
    let refs: Vec<_> = stacks.iter().collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let emb = model.embed_batch(&mut tape, &bound, &refs).unwrap();
    let mut frozen = model.params.batch_norm[SPOOF].clone();
    let train = head(&mut tape, SPOOF, &model.config.spoof_head, &bound, emb, &mut frozen, Mode::Train, &mut rng).unwrap();

    // freeze running stats at this batch's statistics of the fc1 output
    let fc1 = {
        let mut t2 = Tape::new();
        let b2 = model.bind(&mut t2).unwrap();
        let e2 = model.embed_batch(&mut t2, &b2, &refs).unwrap();
        let h = t2.matmul(e2, b2.var("spoof.fc1.weight").unwrap()).unwrap();
        let h = t2.add(h, b2.var("spoof.fc1.bias").unwrap()).unwrap();
        t2.value(h).clone()
    };
    let f = model.config.spoof_head.hidden_dim;
    let rows = refs.len() as f64;
    let mut stats = BatchNormState::<f64>::new(f);
    for c in 0..f {
        let col: Vec<f64> = fc1.data().iter().skip(c).step_by(f).copied().collect();
        let mean = col.iter().sum::<f64>() / rows;
        stats.running_mean[c] = mean;
        stats.running_var[c] = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
    }
    let eval = head(&mut tape, SPOOF, &model.config.spoof_head, &bound, emb, &mut stats, Mode::Eval, &mut rng).unwrap();
    for (a, b) in tape.value(train).data().iter().zip(tape.value(eval).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn domain_pass(model: &mut Model<f64>, refs: &[&LayerStack], path: DomainPath) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let out = model
        .forward(
            &mut tape,
            refs,
            ForwardOptions {
                mode: Mode::Train,
                domain: path,
                dropout_seed: 3,
            },
        )
        .unwrap();
    let logits = out.domain_logits.unwrap();
    let targets: Vec<usize> = (0..refs.len()).map(|i| i % 2).collect();
    let loss = tape.cross_entropy(logits, &targets, &[1.0, 1.0]).unwrap();
    let grads = tape.backward(loss).unwrap();
    (tape.value(logits).clone(), grads.wrt(out.embeddings))
}

#[test]
fn domain_head_reversal_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = Model::<f64>::init(small_config(true, 2), 0).unwrap();
    randomize(&mut model, 18);
    let stacks = batch(&mut rng, 4);
    let refs: Vec<_> = stacks.iter().collect();
    let (l0, g0) = domain_pass(&mut model, &refs, DomainPath::Reversed(0.0));
    let (l1, g1) = domain_pass(&mut model, &refs, DomainPath::Reversed(1.0));
    let (lid, gid) = domain_pass(&mut model, &refs, DomainPath::Identity);
    assert_eq!(l0, l1);
    assert_eq!(l1, lid);
    assert!(g0.data().iter().all(|&v| v == 0.0));
    assert!(gid.norm() > 0.0);
    for (a, b) in g1.data().iter().zip(gid.data()) {
        assert_eq!(*a, -*b);
    }
}

#[test]
fn domain_head_needs_two_domains() {
    let cfg = HeadConfig {
        hidden_dim: 4,
        dropout: 0.0,
        num_outputs: 1,
    };
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 4]));
    let bound = Bound {
        vars: Default::default(),
    };
    let mut bn = BatchNormState::new(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        domain_head(&mut tape, &cfg, &bound, x, Some(1.0), &mut bn, Mode::Train, &mut rng),
        Err(Error::Config(_))
    ));
    let mut bad = small_config(true, 2);
    bad.domain_head.as_mut().unwrap().num_outputs = 1;
    assert!(bad.validate().is_err());
}

#[test]
fn detection_score_is_logit_difference() {
    assert_eq!(detection_score(&[3.0f64, 1.0]), 2.0);
    assert_eq!(detection_score(&[0.0f64, 0.0]), 0.0);
    assert_eq!(detection_score(&[5.0f64, 3.0]), 2.0);
}

#[test]
fn param_groups_partition_names() {
    let model = Model::<f32>::init(ModelConfig::desk(2, 4, 3), 0).unwrap();
    for name in model.params.tensors.keys() {
        let g = ParamGroup::of(name);
        match g {
            ParamGroup::FeatureExtractor => assert!(name.starts_with("encoder.") || name.starts_with("mhfa.")),
            ParamGroup::SpoofHead => assert!(name.starts_with("spoof.")),
            ParamGroup::DomainHead => assert!(name.starts_with("domain.")),
        }
    }
}
