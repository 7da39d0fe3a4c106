//! Multi-corpus datasets: manifests, case composition and batching.

mod embedding;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stack::LayerStack;

pub use embedding::{
    decode_embedding, encode_embedding, read_embedding, write_embedding, EMBEDDING_HEADER_LEN, EMBEDDING_MAGIC,
    EMBEDDING_VERSION,
};
pub use synth::{synth_generate, SynthParams, SynthSpec};

/// Spoofing label. The index doubles as the class index of the spoofing
/// head: 0 is bona fide, 1 is spoof.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("unknown label {other:?} (expected \"bonafide\" or \"spoof\")")),
        }
    }
}

/// Where an utterance's layer stack lives.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    File(PathBuf),
    Stack(Arc<LayerStack>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub label: Label,
    pub domain: usize,
    pub payload: Payload,
}

impl UtteranceRecord {
    pub fn stack(&self) -> Result<Arc<LayerStack>> {
        match &self.payload {
            Payload::Stack(s) => Ok(Arc::clone(s)),
            Payload::File(p) => read_embedding(p).map(Arc::new),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub records: Vec<UtteranceRecord>,
}

/// Corpora in domain order: corpus `i` holds exactly the records of
/// domain `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSet {
    corpora: Vec<Corpus>,
}

impl CorpusSet {
    pub fn new(corpora: Vec<Corpus>) -> Result<Self> {
        let mut problems = Vec::new();
        for (i, c) in corpora.iter().enumerate() {
            let mut seen = HashSet::new();
            for r in &c.records {
                if r.domain != i {
                    problems.push(format!("{}: domain {} inside corpus {i} ({})", r.utt_id, r.domain, c.name));
                }
                if !seen.insert(r.utt_id.as_str()) {
                    problems.push(format!("duplicate utt_id {} in corpus {}", r.utt_id, c.name));
                }
            }
        }
        if problems.is_empty() {
            Ok(CorpusSet { corpora })
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn corpora(&self) -> &[Corpus] {
        &self.corpora
    }

    pub fn into_corpora(self) -> Vec<Corpus> {
        self.corpora
    }

    pub fn num_domains(&self) -> usize {
        self.corpora.len()
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.corpora.iter().map(|c| c.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.corpora.iter().map(|c| c.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every record, corpus by corpus.
    pub fn records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.corpora.iter().flat_map(|c| &c.records)
    }

    /// `[bona fide, spoof]` counts per domain.
    pub fn counts(&self) -> Vec<[usize; 2]> {
        self.corpora
            .iter()
            .map(|c| {
                let mut n = [0; 2];
                for r in &c.records {
                    n[r.label.index()] += 1;
                }
                n
            })
            .collect()
    }

    /// Total `[bona fide, spoof]` counts.
    pub fn class_counts(&self) -> [usize; 2] {
        self.counts()
            .iter()
            .fold([0, 0], |acc, c| [acc[0] + c[0], acc[1] + c[1]])
    }

    /// Loads every file-backed stack into memory.
    pub fn materialize(&self) -> Result<CorpusSet> {
        let corpora = self
            .corpora
            .iter()
            .map(|c| {
                let records = c
                    .records
                    .par_iter()
                    .map(|r| {
                        Ok(UtteranceRecord {
                            payload: Payload::Stack(r.stack()?),
                            ..r.clone()
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Corpus {
                    name: c.name.clone(),
                    records,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CorpusSet { corpora })
    }

    /// Flat training examples in record order, loading files as needed.
    pub fn examples(&self) -> Result<Vec<Example>> {
        let records: Vec<&UtteranceRecord> = self.records().collect();
        records
            .par_iter()
            .map(|r| {
                Ok(Example {
                    utt_id: r.utt_id.clone(),
                    label: r.label,
                    domain: r.domain,
                    stack: r.stack()?,
                })
            })
            .collect()
    }
}

/// One utterance with its stack in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub label: Label,
    pub domain: usize,
    pub stack: Arc<LayerStack>,
}

pub const MANIFEST_HEADER: &str = "utt_id\tlabel\tdomain\tpath";

/// Parses a manifest. Relative paths resolve against `base`. Blank lines,
/// `#` comments and the column header are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<CorpusSet> {
    let mut problems = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed == MANIFEST_HEADER {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if cols.len() != 4 {
            problems.push(format!("line {line_no}: expected 4 columns, got {}", cols.len()));
            continue;
        }
        let label = match cols[1].parse::<Label>() {
            Ok(l) => l,
            Err(e) => {
                problems.push(format!("line {line_no} ({}): {e}", cols[0]));
                continue;
            }
        };
        let domain = match cols[2].parse::<usize>() {
            Ok(d) => d,
            Err(_) => {
                problems.push(format!("line {line_no} ({}): domain {:?} is not a non-negative integer", cols[0], cols[2]));
                continue;
            }
        };
        let path = Path::new(cols[3]);
        let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        rows.push(UtteranceRecord {
            utt_id: cols[0].to_owned(),
            label,
            domain,
            payload: Payload::File(path),
        });
    }
    let mut by_domain: BTreeMap<usize, Vec<UtteranceRecord>> = BTreeMap::new();
    let mut ids = HashSet::new();
    for r in rows {
        if !ids.insert(r.utt_id.clone()) {
            problems.push(format!("duplicate utt_id {}", r.utt_id));
        }
        by_domain.entry(r.domain).or_default().push(r);
    }
    let present: Vec<usize> = by_domain.keys().copied().collect();
    if present.iter().enumerate().any(|(i, &d)| i != d) {
        problems.push(format!("domains {present:?} are not dense 0..{}", present.len()));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let corpora = by_domain
        .into_iter()
        .map(|(d, records)| Corpus {
            name: d.to_string(),
            records,
        })
        .collect();
    CorpusSet::new(corpora)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

/// Manifest text for `set`, writing each record's path relative to `base`
/// when possible. In-memory records need a path from `path_of`.
pub fn format_manifest(set: &CorpusSet, base: &Path, path_of: impl Fn(&UtteranceRecord) -> PathBuf) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in set.records() {
        let p = match &r.payload {
            Payload::File(p) => p.clone(),
            Payload::Stack(_) => path_of(r),
        };
        let p = p.strip_prefix(base).map(Path::to_path_buf).unwrap_or(p);
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.utt_id, r.label, r.domain, p.display()));
    }
    out
}

/// Training scenario: which source corpora are combined.
///
/// Case 1 is corpus A alone, case 2 corpus B alone, case 3 A and B, case 4
/// A, B and C. Sources are A, B, C in order.
pub fn compose_case(case: u8, sources: &[Corpus]) -> Result<CorpusSet> {
    let picks: &[usize] = match case {
        1 => &[0],
        2 => &[1],
        3 => &[0, 1],
        4 => &[0, 1, 2],
        other => return Err(Error::Config(format!("unknown training case {other} (expected 1-4)"))),
    };
    let corpora = picks
        .iter()
        .enumerate()
        .map(|(domain, &src)| {
            let c = sources.get(src).ok_or_else(|| {
                Error::Config(format!(
                    "case {case} needs source corpus {} but only {} given",
                    ["A", "B", "C"][src],
                    sources.len()
                ))
            })?;
            Ok(Corpus {
                name: c.name.clone(),
                records: c
                    .records
                    .iter()
                    .map(|r| UtteranceRecord {
                        domain,
                        ..r.clone()
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CorpusSet::new(corpora)
}

/// Shuffled index batches over `n` examples for one epoch. The order depends
/// only on `(seed, epoch)`; a final short batch is dropped.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size {batch_size} < 2")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}
