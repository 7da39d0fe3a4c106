use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idfe::audio::{write_wav, Waveform};
use idfe::model::{write_checkpoint, Model, ModelConfig};

fn idfe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idfe"))
        .current_dir(dir)
        .env("IDFE_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = idfe(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

const SMALL: &[&str] = &["--set", "train_per_class=24", "--set", "eval_per_class=12", "--set", "dim=8"];

fn synth_small(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", name, "--seed", "3"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(name)
}

fn train_small(dir: &Path, name: &str, manifest: &Path, extra: &[&str]) -> Output {
    let m = format!("train_manifest={}", manifest.display());
    let mut args = vec!["train", "--out", name, "--seed", "3", "--set", &m, "--set", "epochs=2", "--set", "batch_size=16"];
    args.extend_from_slice(extra);
    idfe(dir, &args)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn synth_writes_six_hundred_files_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "synth", "--set", "train_per_class=100", "--set", "eval_per_class=0", "--set", "unseen_domain=false", "--seed", "9",
    ];
    let mut a = args.to_vec();
    a.extend(["--out", "a"]);
    let stdout = ok(tmp.path(), &a);
    assert!(stdout.contains("2\t100\t100"), "{stdout}");
    let mut b = args.to_vec();
    b.extend(["--out", "b"]);
    ok(tmp.path(), &b);
    let fa = files(&tmp.path().join("a"));
    let idf1 = fa.iter().filter(|(n, _)| n.ends_with(".idf1")).count();
    assert_eq!(idf1, 600);
    assert!(fa.iter().any(|(n, _)| n == "train/manifest.tsv"));
    assert!(!tmp.path().join("a/eval").exists());
    assert_eq!(fa, files(&tmp.path().join("b")));
    let snapshot = fs::read_to_string(tmp.path().join("a/config.resolved")).unwrap();
    assert!(snapshot.contains("\ntrain_per_class = 100\n"));
    assert!(snapshot.contains("\nseed = 9\n"));
}

#[test]
fn default_run_directory_is_created() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--set", "train_per_class=2", "--set", "eval_per_class=0", "--set", "dim=2"]);
    let runs: Vec<_> = fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name().into_string().unwrap();
    assert!(name.starts_with("synth-"), "{name}");
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = idfe(tmp.path(), &["synth", "--set", "alhpa=0.1", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alhpa"));
    fs::write(tmp.path().join("bad.cfg"), "epochs = many\n").unwrap();
    assert_eq!(code(&idfe(tmp.path(), &["train", "--config", "bad.cfg", "--out", "x"])), 2);
    assert_eq!(code(&idfe(tmp.path(), &["train", "--out", "x"])), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_idfe"))
        .current_dir(tmp.path())
        .env("IDFE_THREADS", "zero")
        .args(["synth", "--out", "y"])
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn single_corpus_adversarial_training_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), "data", &[]);
    let out = train_small(tmp.path(), "t", &data.join("train/manifest.tsv"), &["--set", "case=1", "--set", "alpha=0.1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires D ≥ 2"));
    let out = train_small(tmp.path(), "t0", &data.join("train/manifest.tsv"), &["--set", "case=1", "--set", "alpha=0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), "data", &[]);
    let out = train_small(tmp.path(), "t", &data.join("train/manifest.tsv"), &["--set", "lr=1e30"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn train_eval_probe_export_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), "data", &[]);
    let manifest = data.join("train/manifest.tsv");
    for run in ["r1", "r2"] {
        let out = train_small(tmp.path(), run, &manifest, &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let ckpt = format!("checkpoint={run}/model.idfc");
        let eval = format!("eval_manifest={}", data.join("eval/manifest.tsv").display());
        for cmd in ["eval", "probe", "export-emb"] {
            ok(tmp.path(), &[cmd, "--out", &format!("{run}-{cmd}"), "--set", &ckpt, "--set", &eval]);
        }
    }
    let r1 = tmp.path().join("r1");
    let log = fs::read_to_string(r1.join("epoch_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch\tloss_s\tloss_d\tlambda\tdomain_acc\n"));
    assert!(r1.join("checkpoints/epoch_001.idfc").exists());
    assert_eq!(
        fs::read(r1.join("checkpoints/epoch_002.idfc")).unwrap(),
        fs::read(r1.join("model.idfc")).unwrap()
    );
    // Snapshots of the downstream runs name different checkpoints.
    let outputs = |dir: String| -> Vec<(String, Vec<u8>)> {
        files(&tmp.path().join(dir)).into_iter().filter(|(n, _)| n != "config.resolved").collect()
    };
    for suffix in ["", "-eval", "-probe", "-export-emb"] {
        let a = outputs(format!("r1{suffix}"));
        let b = outputs(format!("r2{suffix}"));
        assert!(!a.is_empty());
        assert_eq!(a, b, "run outputs r1{suffix} differ");
    }

    // One row per evaluation domain plus the pooled row, which is their mean.
    let report = fs::read_to_string(tmp.path().join("r1-eval/report.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = report.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4 + 1);
    let eers: Vec<f64> = rows[..4].iter().map(|r| r[1].parse().unwrap()).collect();
    let pooled: f64 = rows[4][1].parse().unwrap();
    assert_eq!(rows[4][0], "pooled");
    assert!((pooled - eers.iter().sum::<f64>() / 4.0).abs() < 0.005);
    let scores = fs::read_to_string(tmp.path().join("r1-eval/scores.tsv")).unwrap();
    assert_eq!(scores.lines().filter(|l| !l.starts_with('#') && !l.starts_with("utt_id")).count(), 4 * 24);
    let probe = fs::read_to_string(tmp.path().join("r1-probe/probe.tsv")).unwrap();
    assert!(probe.contains("chance\t0.250000\ndomains\t4\n"), "{probe}");
}

fn random_checkpoint(path: &Path, dim: usize) {
    let model = Model::<f32>::init(ModelConfig::desk(2, dim, 3), 1).unwrap();
    write_checkpoint(path, &model.to_checkpoint()).unwrap();
}

#[test]
fn untrained_checkpoint_probe_and_unbiased_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    random_checkpoint(&tmp.path().join("rand.idfc"), 8);
    let data = synth_small(tmp.path(), "flat", &["--set", "bias_magnitude=0", "--set", "train_per_class=100"]);
    let eval = format!("eval_manifest={}", data.join("train/manifest.tsv").display());
    let out = ok(tmp.path(), &["probe", "--out", "p", "--set", "checkpoint=rand.idfc", "--set", &eval]);
    let acc: f64 = out.lines().next().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    // Without a bias nothing separates the domains: 120 held-out rows
    // around chance 1/3.
    assert!(acc < 0.5, "{out}");
}

#[test]
fn checkpoint_data_mismatch_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    random_checkpoint(&tmp.path().join("rand.idfc"), 5);
    let data = synth_small(tmp.path(), "data", &[]);
    let eval = format!("eval_manifest={}", data.join("eval/manifest.tsv").display());
    let out = idfe(tmp.path(), &["eval", "--out", "e", "--set", "checkpoint=rand.idfc", "--set", &eval]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn separable_toy_model_scores_zero_eer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), "data", &["--set", "noise=0", "--set", "class_separation=3"]);
    let out = train_small(tmp.path(), "t", &data.join("train/manifest.tsv"), &["--set", "alpha=0", "--set", "epochs=5"]);
    assert!(out.status.success());
    let eval = format!("eval_manifest={}", data.join("eval/manifest.tsv").display());
    let report = ok(tmp.path(), &["eval", "--out", "e", "--set", "checkpoint=t/model.idfc", "--set", &eval]);
    for row in report.lines().skip(1) {
        assert_eq!(row.split('\t').nth(1), Some("0.000000"), "{report}");
    }
}

#[test]
fn prep_trims_augments_and_segments() {
    let tmp = tempfile::tempdir().unwrap();
    let sr = 8000;
    let tone = |n: usize, amp: f64| -> Vec<f64> { (0..n).map(|i| amp * (i as f64 * 0.3).sin()).collect() };
    let mut speech = vec![0.0; 4096];
    speech.extend(tone(6000, 0.5));
    speech.extend(vec![0.0; 4096]);
    let mut manifest = String::from("utt_id\tlabel\tdomain\tpath\n");
    for i in 0..4 {
        write_wav(tmp.path().join(format!("u{i}.wav")), &Waveform::new(speech.clone(), sr).unwrap()).unwrap();
        manifest.push_str(&format!("u{i}\t{}\t{}\tu{i}.wav\n", if i % 2 == 0 { "bonafide" } else { "spoof" }, i / 2));
    }
    fs::write(tmp.path().join("in.tsv"), manifest).unwrap();
    let noise: Vec<f64> = (0..3000).map(|i| ((i * 7919) % 200) as f64 / 1000.0 - 0.1).collect();
    write_wav(tmp.path().join("n.wav"), &Waveform::new(noise, sr).unwrap()).unwrap();
    fs::write(tmp.path().join("assets.tsv"), "path\tcategory\nn.wav\tnoise\n").unwrap();
    let args = |out: &'static str| {
        vec![
            "prep", "--out", out, "--set", "prep_manifest=in.tsv", "--set", "assets=assets.tsv", "--set", "augment=noise",
            "--set", "segment_seconds=1.5", "--set", "trim_frame=512", "--set", "trim_hop=128",
        ]
    };
    ok(tmp.path(), &args("a"));
    ok(tmp.path(), &args("b"));
    assert_eq!(files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    let w = idfe::audio::read_wav(tmp.path().join("a/wav/u0.wav")).unwrap();
    assert_eq!(w.len(), 12_000);
    let aug = fs::read_to_string(tmp.path().join("a/augment.tsv")).unwrap();
    assert_eq!(aug.lines().filter(|l| l.contains("\tnoise\t")).count(), 4);
    let set = idfe::corpus::load_manifest(tmp.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(set.len(), 4);
    // Augmentation without assets is a configuration error.
    let out = idfe(tmp.path(), &["prep", "--out", "c", "--set", "prep_manifest=in.tsv", "--set", "augment=music"]);
    assert_eq!(code(&out), 2);
}
