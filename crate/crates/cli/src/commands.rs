use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use idfe::audio::{load_assets, prepare, read_wav, write_wav, Assets};
use idfe::config::Settings;
use idfe::corpus::{compose_case, format_manifest, load_manifest, write_embedding, CorpusSet, Payload, MANIFEST_HEADER};
use idfe::experiment::{embed_set, phenomenon_corpora};
use idfe::metrics::{domain_probe, export_embeddings, export_scores, pooled_eer, ScoreEntry, ScoreSet};
use idfe::model::{read_checkpoint, write_checkpoint, Model};
use idfe::training::{derive_seed, format_epoch_log, train as train_model, Precision, TrainConfig, EPOCH_LOG_HEADER};
use idfe::{Error, Real, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const SNAPSHOT: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.tsv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Creates the output directory and writes the resolved configuration
/// into it.
pub fn prepare_out(out: Option<&Path>, command: &str, s: &Settings) -> Result<PathBuf> {
    let resolved = s.resolved();
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let mut h = DefaultHasher::new();
            command.hash(&mut h);
            resolved.hash(&mut h);
            let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            Path::new("runs").join(format!("{command}-{:016x}-{now}", h.finish()))
        }
    };
    mkdir(&dir)?;
    write(&dir.join(SNAPSHOT), resolved)?;
    Ok(dir)
}

/// Writes every stack of `set` as `<dir>/<utt_id>.idf1` plus a manifest.
fn write_set(set: &CorpusSet, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    set.records()
        .collect::<Vec<_>>()
        .par_iter()
        .try_for_each(|r| write_embedding(dir.join(format!("{}.idf1", r.utt_id)), &*r.stack()?))?;
    let text = format_manifest(set, dir, |r| PathBuf::from(format!("{}.idf1", r.utt_id)));
    write(&dir.join(MANIFEST), text)
}

fn count_table(set: &CorpusSet) -> String {
    let mut t = String::from("domain\tbonafide\tspoof\n");
    for (name, [b, s]) in set.domain_names().iter().zip(set.counts()) {
        let _ = writeln!(t, "{name}\t{b}\t{s}");
    }
    t
}

pub fn synth(s: &Settings, out: &Path) -> Result<()> {
    let cfg = s.phenomenon()?;
    let (train, eval) = phenomenon_corpora(&cfg, s.seed()?)?;
    write_set(&train, &out.join("train"))?;
    print!("train\n{}", count_table(&train));
    if cfg.eval_per_class > 0 {
        write_set(&eval, &out.join("eval"))?;
        print!("eval\n{}", count_table(&eval));
    }
    Ok(())
}

pub fn prep(s: &Settings, out: &Path) -> Result<()> {
    let cfg = s.prep_config()?;
    let set = load_manifest(s.require_path("prep_manifest")?)?;
    let assets = if cfg.policies.is_empty() {
        Assets::default()
    } else {
        load_assets(s.require_path("assets")?)?
    };
    let wav_dir = out.join("wav");
    mkdir(&wav_dir)?;
    let base = derive_seed(s.seed()?, 5, 0);
    let records: Vec<_> = set.records().collect();
    let notes = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let Payload::File(path) = &r.payload else {
                unreachable!("manifests hold paths")
            };
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            rng.set_stream(i as u64);
            let (w, applied) = prepare(&read_wav(path)?, &cfg, &assets, &mut rng)?;
            write_wav(wav_dir.join(format!("{}.wav", r.utt_id)), &w)?;
            Ok(match applied {
                Some(a) => {
                    let picks: Vec<String> = a.picks.iter().map(|p| p.to_string()).collect();
                    let snrs: Vec<String> = a.snrs_db.iter().map(|x| format!("{x:.3}")).collect();
                    format!("{}\t{}\t{}\t{}\n", r.utt_id, a.policy, picks.join(","), snrs.join(","))
                }
                None => format!("{}\tnone\t\t\n", r.utt_id),
            })
        })
        .collect::<Result<Vec<String>>>()?;
    let mut text = format!("{MANIFEST_HEADER}\n");
    for r in &records {
        let _ = writeln!(text, "{}\t{}\t{}\twav/{}.wav", r.utt_id, r.label, r.domain, r.utt_id);
    }
    write(&out.join(MANIFEST), text)?;
    write(&out.join("augment.tsv"), format!("utt_id\tpolicy\tpicks\tsnr_db\n{}", notes.concat()))?;
    println!("prepared {} utterances into {}", records.len(), wav_dir.display());
    Ok(())
}

fn training_set(s: &Settings) -> Result<CorpusSet> {
    let set = load_manifest(s.require_path("train_manifest")?)?;
    let set = match s.case()? {
        0 => set,
        c => compose_case(c, set.corpora())?,
    };
    set.materialize()
}

fn shape_of(set: &CorpusSet) -> Result<(usize, usize)> {
    let r = set
        .records()
        .next()
        .ok_or_else(|| Error::Config("manifest has no utterances".into()))?;
    let st = r.stack()?;
    Ok((st.layers(), st.dim()))
}

pub fn train(s: &Settings, out: &Path) -> Result<()> {
    let set = training_set(s)?;
    let (layers, dim) = shape_of(&set)?;
    let mc = s.model_config(layers, dim, set.num_domains())?;
    let mut tc = s.train_config()?;
    let seed = s.seed()?;
    tc.seed = derive_seed(seed, 4, 0);
    match tc.precision {
        Precision::F32 => run_training(Model::<f32>::init(mc, derive_seed(seed, 3, 0))?, &set, &tc, out),
        Precision::F64 => run_training(Model::<f64>::init(mc, derive_seed(seed, 3, 0))?, &set, &tc, out),
    }
}

fn run_training<T: Real>(mut model: Model<T>, set: &CorpusSet, tc: &TrainConfig, out: &Path) -> Result<()> {
    let ckpt_dir = out.join("checkpoints");
    mkdir(&ckpt_dir)?;
    println!("{EPOCH_LOG_HEADER}");
    let logs = train_model(&mut model, set, tc, |log, m| {
        println!("{log}");
        write_checkpoint(ckpt_dir.join(format!("epoch_{:03}.idfc", log.epoch)), &m.to_checkpoint())
    })?;
    write_checkpoint(out.join("model.idfc"), &model.to_checkpoint())?;
    write(&out.join("epoch_log.tsv"), format_epoch_log(&logs))
}

/// Checkpoint and evaluation manifest, checked for matching shapes.
fn load_eval(s: &Settings) -> Result<(Model<f32>, CorpusSet)> {
    let model = Model::<f32>::from_checkpoint(&read_checkpoint(s.require_path("checkpoint")?)?)?;
    let set = load_manifest(s.require_path("eval_manifest")?)?.materialize()?;
    let m = &model.config.mhfa;
    for r in set.records() {
        let st = r.stack()?;
        if st.layers() != m.num_layers || st.dim() != m.frame_dim {
            return Err(Error::Dimension {
                op: "eval",
                detail: format!(
                    "{} has {} layers of dim {}; the checkpoint expects {} of dim {}",
                    r.utt_id,
                    st.layers(),
                    st.dim(),
                    m.num_layers,
                    m.frame_dim
                ),
            });
        }
    }
    Ok((model, set))
}

pub fn eval(s: &Settings, out: &Path) -> Result<()> {
    let (model, set) = load_eval(s)?;
    let names = set.domain_names();
    let records: Vec<_> = set.records().collect();
    let entries = records
        .par_iter()
        .map(|r| {
            let (_, score) = model.score(&*r.stack()?)?;
            Ok(ScoreEntry {
                utt_id: r.utt_id.clone(),
                domain: names[r.domain].clone(),
                label: r.label,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = ScoreSet { entries };
    export_scores(&scores, out.join("scores.tsv"))?;
    let per_domain = scores.eer_by_domain()?;
    let eers: Vec<f64> = per_domain.iter().map(|(_, e)| e.eer).collect();
    let mut report = String::from("domain\teer\tthreshold\n");
    for (name, e) in &per_domain {
        let _ = writeln!(report, "{name}\t{:.6}\t{:.6}", e.eer, e.threshold);
    }
    let _ = writeln!(report, "pooled\t{:.6}\t-", pooled_eer(&eers)?);
    print!("{report}");
    write(&out.join("report.tsv"), report)
}

pub fn probe(s: &Settings, out: &Path) -> Result<()> {
    let (model, set) = load_eval(s)?;
    let (dump, _) = embed_set(&model, &set)?;
    let r = domain_probe(&dump, s.get("probe_train_frac")?, s.seed()?)?;
    let report = format!(
        "accuracy\t{:.6}\nchance\t{:.6}\ndomains\t{}\ntrain\t{}\ntest\t{}\n",
        r.accuracy, r.chance, r.num_domains, r.train_size, r.test_size
    );
    print!("{report}");
    write(&out.join("probe.tsv"), report)
}

pub fn export_emb(s: &Settings, out: &Path) -> Result<()> {
    let (model, set) = load_eval(s)?;
    let (dump, _) = embed_set(&model, &set)?;
    let path = out.join("embeddings.tsv");
    export_embeddings(&dump, &path)?;
    println!("{} embeddings of dim {} written to {}", dump.rows.len(), dump.dim().unwrap_or(0), path.display());
    Ok(())
}
