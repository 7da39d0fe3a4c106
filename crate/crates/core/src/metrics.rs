//! Detection error rates, domain probing and score/embedding files.
//!
//! Scores are oriented so that higher means more bona fide. At threshold
//! `tau` a spoof is accepted when its score is `>= tau` (APCER) and a bona
//! fide utterance is rejected when its score is `< tau` (BPCER).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEntry {
    pub utt_id: String,
    pub domain: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    /// Entries grouped by domain, domains in order of first appearance.
    pub fn by_domain(&self) -> Vec<(String, Vec<&ScoreEntry>)> {
        let mut groups: Vec<(String, Vec<&ScoreEntry>)> = Vec::new();
        let mut index = BTreeMap::new();
        for e in &self.entries {
            let i = *index.entry(e.domain.clone()).or_insert_with(|| {
                groups.push((e.domain.clone(), Vec::new()));
                groups.len() - 1
            });
            groups[i].1.push(e);
        }
        groups
    }

    /// EER of every domain group.
    pub fn eer_by_domain(&self) -> Result<Vec<(String, Eer)>> {
        self.by_domain()
            .into_iter()
            .map(|(name, entries)| {
                let (bona, spoof) = split_scores(&entries);
                let e = eer(&bona, &spoof).map_err(|e| Error::Metric(format!("domain {name}: {e}")))?;
                Ok((name, e))
            })
            .collect()
    }
}

/// `(bona fide, spoof)` scores of a group.
pub fn split_scores(entries: &[&ScoreEntry]) -> (Vec<f64>, Vec<f64>) {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for e in entries {
        match e.label {
            Label::Bonafide => bona.push(e.score),
            Label::Spoof => spoof.push(e.score),
        }
    }
    (bona, spoof)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

fn sorted(v: &[f64], what: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Metric(format!("no {what} scores")));
    }
    if v.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric(format!("NaN among {what} scores")));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Operating points at every distinct score and at `+inf`, in increasing
/// threshold order. The first point is `(1, 0)`, the last `(0, 1)`.
pub fn det_points(bona: &[f64], spoof: &[f64]) -> Result<Vec<DetPoint>> {
    let b = sorted(bona, "bona fide")?;
    let s = sorted(spoof, "spoof")?;
    let mut thresholds: Vec<f64> = b.iter().chain(&s).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (nb, ns) = (b.len() as f64, s.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            apcer: (s.len() - s.partition_point(|&x| x < t)) as f64 / ns,
            bpcer: b.partition_point(|&x| x < t) as f64 / nb,
        })
        .collect())
}

/// Equal error rate, linearly interpolated between the two operating
/// points that straddle `APCER = BPCER`.
pub fn eer(bona: &[f64], spoof: &[f64]) -> Result<Eer> {
    let points = det_points(bona, spoof)?;
    let i = points
        .iter()
        .position(|p| p.apcer <= p.bpcer)
        .expect("the last point has APCER 0");
    let p1 = points[i];
    if p1.apcer == p1.bpcer || i == 0 {
        return Ok(Eer {
            eer: p1.apcer,
            threshold: p1.threshold,
        });
    }
    let p0 = points[i - 1];
    let d0 = p0.apcer - p0.bpcer;
    let d1 = p1.apcer - p1.bpcer;
    let t = d0 / (d0 - d1);
    let threshold = if p1.threshold.is_finite() {
        p0.threshold + t * (p1.threshold - p0.threshold)
    } else {
        p0.threshold
    };
    Ok(Eer {
        eer: p0.apcer + t * (p1.apcer - p0.apcer),
        threshold,
    })
}

/// Unweighted mean of per-domain EERs.
pub fn pooled_eer(per_domain: &[f64]) -> Result<f64> {
    if per_domain.is_empty() {
        return Err(Error::Metric("pooled EER of no domains".into()));
    }
    Ok(per_domain.iter().sum::<f64>() / per_domain.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub utt_id: String,
    pub label: Label,
    pub domain: usize,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingDump {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingDump {
    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.vector.len())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dim() {
            if let Some(r) = self.rows.iter().find(|r| r.vector.len() != d) {
                return Err(Error::Metric(format!(
                    "{} has {} values, expected {d}",
                    r.utt_id,
                    r.vector.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub chance: f64,
    pub num_domains: usize,
    pub train_size: usize,
    pub test_size: usize,
}

pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_MIN_PER_DOMAIN: usize = 10;

/// Held-out accuracy of a linear softmax classifier predicting the domain
/// from frozen embeddings.
///
/// Each domain is split `train_frac` / rest after a seeded shuffle;
/// features are standardized with training statistics; the classifier is
/// fitted with full-batch Adam.
pub fn domain_probe(dump: &EmbeddingDump, train_frac: f64, seed: u64) -> Result<ProbeResult> {
    dump.validate()?;
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Metric(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let num_domains = dump.rows.iter().map(|r| r.domain + 1).max().unwrap_or(0);
    let mut by_domain = vec![Vec::new(); num_domains];
    for (i, r) in dump.rows.iter().enumerate() {
        by_domain[r.domain].push(i);
    }
    if num_domains < 2 {
        return Err(Error::Metric(format!("domain probe needs at least 2 domains, got {num_domains}")));
    }
    if let Some((d, rows)) = by_domain.iter().enumerate().find(|(_, r)| r.len() < PROBE_MIN_PER_DOMAIN) {
        return Err(Error::Metric(format!(
            "domain {d} has {} embeddings, the probe needs {PROBE_MIN_PER_DOMAIN}",
            rows.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for rows in &mut by_domain {
        rows.shuffle(&mut rng);
        let k = ((rows.len() as f64 * train_frac).round() as usize).clamp(1, rows.len() - 1);
        train.extend_from_slice(&rows[..k]);
        test.extend_from_slice(&rows[k..]);
    }
    let dim = dump.dim().expect("rows present");
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&dump.rows[i].vector) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in &train {
        for ((s, v), m) in sd.iter_mut().zip(&dump.rows[i].vector).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut sd {
        *s = (*s / train.len() as f64).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    let features = |idx: &[usize]| -> Result<Tensor<f64>> {
        let data = idx
            .iter()
            .flat_map(|&i| {
                dump.rows[i]
                    .vector
                    .iter()
                    .zip(&mean)
                    .zip(&sd)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect();
        Tensor::new(vec![idx.len(), dim], data)
    };
    let x_train = features(&train)?;
    let y_train: Vec<usize> = train.iter().map(|&i| dump.rows[i].domain).collect();
    let mut params = BTreeMap::from([
        ("weight".to_owned(), Tensor::<f64>::zeros(vec![dim, num_domains])),
        ("bias".to_owned(), Tensor::zeros(vec![num_domains])),
    ]);
    let ones = vec![1.0; num_domains];
    let mut opt = Adam::new(PROBE_LR);
    for _ in 0..PROBE_STEPS {
        let mut tape = Tape::new();
        let x = tape.leaf(x_train.clone());
        let w = tape.param("weight", params["weight"].clone())?;
        let b = tape.param("bias", params["bias"].clone())?;
        let logits = tape.matmul(x, w)?;
        let logits = tape.add(logits, b)?;
        let loss = tape.cross_entropy(logits, &y_train, &ones)?;
        let grads = tape.backward(loss)?.named();
        opt.update(&mut params, &grads)?;
    }
    let x_test = features(&test)?;
    let w = params["weight"].data();
    let b = params["bias"].data();
    let correct = test
        .iter()
        .zip(x_test.data().chunks_exact(dim))
        .filter(|(&i, x)| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..num_domains {
                let z: f64 = b[c] + x.iter().enumerate().map(|(j, v)| v * w[j * num_domains + c]).sum::<f64>();
                if z > best.1 {
                    best = (c, z);
                }
            }
            best.0 == dump.rows[i].domain
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        chance: 1.0 / num_domains as f64,
        num_domains,
        train_size: train.len(),
        test_size: test.len(),
    })
}

pub const SCORES_HEADER: &str = "# idfe-scores v1";
pub const EMBEDDINGS_HEADER: &str = "# idfe-emb v1";
const SCORE_COLUMNS: &str = "utt_id\tdomain\tlabel\tscore";

/// Nine significant digits.
fn real(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn format_scores(scores: &ScoreSet) -> String {
    let mut out = format!("{SCORES_HEADER}\n{SCORE_COLUMNS}\n");
    for e in &scores.entries {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.utt_id, e.domain, e.label, real(e.score));
    }
    out
}

fn parse_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Validation(vec![format!("line {line}: {}", detail.into())])
}

fn parse_real(s: &str, line: usize) -> Result<f64> {
    s.parse().map_err(|_| parse_err(line, format!("bad number {s:?}")))
}

pub fn parse_scores(text: &str) -> Result<ScoreSet> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, SCORES_HEADER)) => {}
        _ => return Err(parse_err(1, format!("expected {SCORES_HEADER:?}"))),
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        if line.is_empty() || line == SCORE_COLUMNS {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 columns, got {}", cols.len())));
        }
        entries.push(ScoreEntry {
            utt_id: cols[0].to_owned(),
            domain: cols[1].to_owned(),
            label: cols[2].parse().map_err(|e: String| parse_err(i + 1, e))?,
            score: parse_real(cols[3], i + 1)?,
        });
    }
    Ok(ScoreSet { entries })
}

pub fn format_embeddings(dump: &EmbeddingDump) -> Result<String> {
    dump.validate()?;
    let mut out = format!("{EMBEDDINGS_HEADER}\n");
    if let Some(d) = dump.dim() {
        out.push_str("utt_id\tlabel\tdomain");
        for j in 0..d {
            let _ = write!(out, "\tv{j}");
        }
        out.push('\n');
    }
    for r in &dump.rows {
        let _ = write!(out, "{}\t{}\t{}", r.utt_id, r.label, r.domain);
        for v in &r.vector {
            out.push('\t');
            out.push_str(&real(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingDump> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, EMBEDDINGS_HEADER)) => {}
        _ => return Err(parse_err(1, format!("expected {EMBEDDINGS_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() || line.starts_with("utt_id\t") {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(parse_err(i + 1, "embedding row needs utt_id, label, domain and values"));
        }
        rows.push(EmbeddingRow {
            utt_id: cols[0].to_owned(),
            label: cols[1].parse().map_err(|e: String| parse_err(i + 1, e))?,
            domain: cols[2]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad domain {:?}", cols[2])))?,
            vector: cols[3..].iter().map(|s| parse_real(s, i + 1)).collect::<Result<_>>()?,
        });
    }
    let dump = EmbeddingDump { rows };
    dump.validate()?;
    Ok(dump)
}

pub fn export_scores(scores: &ScoreSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_scores(scores)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    parse_scores(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn export_embeddings(dump: &EmbeddingDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_embeddings(dump)?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDump> {
    let path = path.as_ref();
    parse_embeddings(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
