//! Waveform preprocessing: energy-based edge trimming, fixed-length
//! segmentation, additive mixing at a target SNR and impulse-response
//! convolution, plus the four augmentation policies built from them.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("sample {i} is not finite")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    fn with_samples(&self, samples: Vec<f64>) -> Waveform {
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn same_rate(a: &Waveform, b: &Waveform, what: &str) -> Result<()> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::Parameter(format!(
            "{what} sample rate {} Hz differs from signal rate {} Hz",
            b.sample_rate, a.sample_rate
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrimParams {
    pub top_db: f64,
    pub frame: usize,
    pub hop: usize,
}

impl Default for TrimParams {
    fn default() -> Self {
        TrimParams {
            top_db: 40.0,
            frame: 2048,
            hop: 512,
        }
    }
}

/// Number of analysis frames. Frames start at multiples of `hop` and are
/// not centered; the last one is zero-padded so the tail is covered.
fn frame_count(len: usize, frame: usize, hop: usize) -> usize {
    if len <= frame {
        1
    } else {
        1 + (len - frame).div_ceil(hop)
    }
}

/// Sample range `[start, end)` kept by [`trim_edges`].
pub fn trim_bounds(samples: &[f64], p: TrimParams) -> Result<(usize, usize)> {
    if !(p.top_db > 0.0) || p.frame == 0 || p.hop == 0 {
        return Err(Error::Parameter(format!(
            "trim needs top_db > 0 and positive frame/hop, got {} / {} / {}",
            p.top_db, p.frame, p.hop
        )));
    }
    let n = frame_count(samples.len(), p.frame, p.hop);
    // Mean square per frame, divided by the full frame length so padded
    // frames count their zeros.
    let power: Vec<f64> = (0..n)
        .map(|i| {
            let start = (i * p.hop).min(samples.len());
            let end = (start + p.frame).min(samples.len());
            samples[start..end].iter().map(|v| v * v).sum::<f64>() / p.frame as f64
        })
        .collect();
    let max = power.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::EmptyAudio("signal is silent".into()));
    }
    // level_dB >= max_dB - top_db, compared in the power domain.
    let floor = max * 10f64.powf(-p.top_db / 10.0);
    let loud = |i: &usize| power[*i] >= floor;
    let first = (0..n).find(loud).expect("the loudest frame passes");
    let last = (0..n).rev().find(loud).expect("the loudest frame passes");
    Ok((first * p.hop, (last * p.hop + p.frame).min(samples.len())))
}

/// Removes leading and trailing frames more than `top_db` below the
/// loudest frame. Frames are aligned to the start of the signal, so
/// trimming twice equals trimming once.
pub fn trim_edges(w: &Waveform, p: TrimParams) -> Result<Waveform> {
    let (start, end) = trim_bounds(&w.samples, p)?;
    Ok(w.with_samples(w.samples[start..end].to_vec()))
}

pub fn target_len(seconds: f64, sample_rate: u32) -> Result<usize> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Error::Parameter(format!("segment length {seconds} s must be positive")));
    }
    Ok(((seconds * sample_rate as f64).round() as usize).max(1))
}

/// Exactly `len` samples starting at `offset`, wrapping around the end.
fn cyclic(samples: &[f64], offset: usize, len: usize) -> Vec<f64> {
    (0..len).map(|i| samples[(offset + i) % samples.len()]).collect()
}

/// Cuts a random contiguous clip of `seconds`, or repeats a shorter
/// signal cyclically until it is long enough.
pub fn segment<R: Rng + ?Sized>(w: &Waveform, seconds: f64, rng: &mut R) -> Result<Waveform> {
    let target = target_len(seconds, w.sample_rate)?;
    if w.is_empty() {
        return Err(Error::EmptyAudio("cannot segment an empty signal".into()));
    }
    if w.len() >= target {
        let start = rng.random_range(0..=w.len() - target);
        Ok(w.with_samples(w.samples[start..start + target].to_vec()))
    } else {
        Ok(w.with_samples(cyclic(&w.samples, 0, target)))
    }
}

/// Noise gain that puts noise of RMS `noise_rms` at `snr_db` below a
/// signal of RMS `signal_rms`.
pub fn snr_gain(signal_rms: f64, noise_rms: f64, snr_db: f64) -> f64 {
    signal_rms / noise_rms * 10f64.powf(-snr_db / 20.0)
}

/// Noise cropped at a random offset, or wrapped, to `len` samples.
fn fit_noise<R: Rng + ?Sized>(noise: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    if noise.len() >= len {
        let start = rng.random_range(0..=noise.len() - len);
        noise[start..start + len].to_vec()
    } else {
        cyclic(noise, 0, len)
    }
}

/// The scaled noise that [`mix_at_snr`] adds.
pub fn scaled_noise<R: Rng + ?Sized>(signal: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut R) -> Result<Vec<f64>> {
    same_rate(signal, noise, "noise")?;
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!("SNR {snr_db} dB is not finite")));
    }
    if noise.is_empty() {
        return Err(Error::DegenerateNoise("noise is empty".into()));
    }
    let fitted = fit_noise(&noise.samples, signal.len(), rng);
    let noise_rms = rms(&fitted);
    if noise_rms == 0.0 {
        return Err(Error::DegenerateNoise("noise is silent over the mixed span".into()));
    }
    let g = snr_gain(signal.rms(), noise_rms, snr_db);
    Ok(fitted.into_iter().map(|v| g * v).collect())
}

/// Adds `noise` to `signal` so that their power ratio is `snr_db`.
pub fn mix_at_snr<R: Rng + ?Sized>(signal: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut R) -> Result<Waveform> {
    let n = scaled_noise(signal, noise, snr_db, rng)?;
    Ok(signal.with_samples(signal.samples.iter().zip(&n).map(|(s, n)| s + n).collect()))
}

/// Below this many multiply-adds the direct sum is used.
const DIRECT_CONV_LIMIT: usize = 1 << 16;

/// First `out_len` samples of the full linear convolution.
pub fn convolve_direct(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    let mut y = vec![0.0; out_len];
    for (n, yn) in y.iter_mut().enumerate() {
        let lo = n.saturating_sub(x.len().saturating_sub(1));
        for k in lo..=n.min(h.len().saturating_sub(1)) {
            *yn += h[k] * x[n - k];
        }
    }
    y
}

fn convolve_fft(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| -> Vec<Complex<f64>> {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (a, b) in a.iter_mut().zip(&b) {
        *a *= b;
    }
    inv.process(&mut a);
    a[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Convolves with an impulse response, keeps the signal's length and
/// rescales to unit peak if the result would clip.
pub fn convolve_ir(signal: &Waveform, ir: &Waveform) -> Result<Waveform> {
    same_rate(signal, ir, "impulse response")?;
    if ir.is_empty() {
        return Err(Error::Parameter("impulse response is empty".into()));
    }
    if signal.is_empty() {
        return Ok(signal.clone());
    }
    let len = signal.len();
    let mut y = if len.saturating_mul(ir.len()) <= DIRECT_CONV_LIMIT {
        convolve_direct(&signal.samples, &ir.samples, len)
    } else {
        convolve_fft(&signal.samples, &ir.samples, len)
    };
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        y.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(signal.with_samples(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    Reverb,
    Speech,
    Music,
    Noise,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Reverb, Policy::Speech, Policy::Music, Policy::Noise];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Reverb => "reverb",
            Policy::Speech => "speech",
            Policy::Music => "music",
            Policy::Noise => "noise",
        }
    }

    /// SNR range in dB for the additive policies.
    pub fn snr_range(self) -> Option<(f64, f64)> {
        match self {
            Policy::Reverb => None,
            Policy::Speech => Some((13.0, 20.0)),
            Policy::Music => Some((5.0, 15.0)),
            Policy::Noise => Some((0.0, 15.0)),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation policy {s:?}; expected reverb, speech, music or noise")))
    }
}

/// Asset category names used in asset manifests.
fn category_name(p: Policy) -> &'static str {
    match p {
        Policy::Reverb => "rir",
        other => other.as_str(),
    }
}

/// Pools of recordings the augmentation policies draw from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assets {
    pub rirs: Vec<Waveform>,
    pub speech: Vec<Waveform>,
    pub music: Vec<Waveform>,
    pub noise: Vec<Waveform>,
}

impl Assets {
    pub fn pool(&self, p: Policy) -> &[Waveform] {
        match p {
            Policy::Reverb => &self.rirs,
            Policy::Speech => &self.speech,
            Policy::Music => &self.music,
            Policy::Noise => &self.noise,
        }
    }

    fn pool_mut(&mut self, p: Policy) -> &mut Vec<Waveform> {
        match p {
            Policy::Reverb => &mut self.rirs,
            Policy::Speech => &mut self.speech,
            Policy::Music => &mut self.music,
            Policy::Noise => &mut self.noise,
        }
    }
}

pub const SPEECH_MIN: usize = 3;
pub const SPEECH_MAX: usize = 8;

/// What one augmentation did: the policy, which pool entries it used and
/// the SNR of each (empty for reverberation).
#[derive(Clone, Debug, PartialEq)]
pub struct Applied {
    pub policy: Policy,
    pub picks: Vec<usize>,
    pub snrs_db: Vec<f64>,
}

/// Applies one augmentation policy. Babble mixes 3 to 8 distinct pool
/// utterances, each at its own SNR relative to the clean signal.
pub fn augment<R: Rng + ?Sized>(signal: &Waveform, policy: Policy, assets: &Assets, rng: &mut R) -> Result<(Waveform, Applied)> {
    let pool = assets.pool(policy);
    let need = if policy == Policy::Speech { SPEECH_MIN } else { 1 };
    if pool.len() < need {
        return Err(Error::Asset(format!(
            "{policy} augmentation needs {need} {} recording(s), pool has {}",
            category_name(policy),
            pool.len()
        )));
    }
    let Some((lo, hi)) = policy.snr_range() else {
        let pick = rng.random_range(0..pool.len());
        let out = convolve_ir(signal, &pool[pick])?;
        return Ok((
            out,
            Applied {
                policy,
                picks: vec![pick],
                snrs_db: Vec::new(),
            },
        ));
    };
    let k = if policy == Policy::Speech {
        rng.random_range(SPEECH_MIN..=SPEECH_MAX.min(pool.len()))
    } else {
        1
    };
    let picks = sample(rng, pool.len(), k).into_vec();
    let mut out = signal.samples.clone();
    let mut snrs = Vec::with_capacity(k);
    for &i in &picks {
        let snr = rng.random_range(lo..=hi);
        let n = scaled_noise(signal, &pool[i], snr, rng)?;
        out.iter_mut().zip(&n).for_each(|(o, n)| *o += n);
        snrs.push(snr);
    }
    Ok((
        signal.with_samples(out),
        Applied {
            policy,
            picks,
            snrs_db: snrs,
        },
    ))
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a 16-bit PCM mono WAV file as samples in [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Config(format!(
            "{}: expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono, clipping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &v in &w.samples {
        let q = (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

/// Parses an asset manifest of `path<TAB>category` lines, where category
/// is one of `rir`, `speech`, `music`, `noise`. Relative paths resolve
/// against `base`.
pub fn parse_asset_manifest(text: &str, base: &Path) -> Result<Vec<(PathBuf, Policy)>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || line == "path\tcategory" {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            problems.push(format!("line {}: expected 2 tab-separated fields, got {}", n + 1, fields.len()));
            continue;
        }
        match Policy::ALL.into_iter().find(|p| category_name(*p) == fields[1]) {
            Some(p) => out.push((base.join(fields[0]), p)),
            None => problems.push(format!(
                "line {}: unknown asset category {:?}; expected rir, speech, music or noise",
                n + 1,
                fields[1]
            )),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(problems))
    }
}

/// Loads every recording named by an asset manifest file.
pub fn load_assets(manifest: impl AsRef<Path>) -> Result<Assets> {
    let manifest = manifest.as_ref();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut assets = Assets::default();
    for (path, policy) in parse_asset_manifest(&text, base)? {
        assets.pool_mut(policy).push(read_wav(&path)?);
    }
    Ok(assets)
}

/// Order of trimming and augmentation in [`prepare`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    TrimFirst,
    AugmentFirst,
}

impl FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trim_first" => Ok(Order::TrimFirst),
            "augment_first" => Ok(Order::AugmentFirst),
            _ => Err(Error::Config(format!("unknown order {s:?}; expected trim_first or augment_first"))),
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::TrimFirst => "trim_first",
            Order::AugmentFirst => "augment_first",
        })
    }
}

/// How one training utterance is prepared.
#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub trim: TrimParams,
    /// Policies drawn from uniformly; empty disables augmentation.
    pub policies: Vec<Policy>,
    /// Probability that an utterance is augmented at all.
    pub augment_prob: f64,
    pub order: Order,
    /// Clip length; `None` keeps the full utterance.
    pub segment_seconds: Option<f64>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            trim: TrimParams::default(),
            policies: Vec::new(),
            augment_prob: 1.0,
            order: Order::TrimFirst,
            segment_seconds: Some(4.0),
        }
    }
}

/// Trims, optionally augments and segments one utterance. An utterance
/// that is silent throughout is passed on untrimmed.
pub fn prepare<R: Rng + ?Sized>(w: &Waveform, cfg: &PrepConfig, assets: &Assets, rng: &mut R) -> Result<(Waveform, Option<Applied>)> {
    let trim = |w: Waveform| match trim_edges(&w, cfg.trim) {
        Err(Error::EmptyAudio(_)) => Ok(w),
        other => other,
    };
    let mut applied = None;
    let mut aug = |w: Waveform, rng: &mut R| -> Result<Waveform> {
        if cfg.policies.is_empty() || !rng.random_bool(cfg.augment_prob.clamp(0.0, 1.0)) {
            return Ok(w);
        }
        let policy = cfg.policies[rng.random_range(0..cfg.policies.len())];
        let (out, a) = augment(&w, policy, assets, rng)?;
        applied = Some(a);
        Ok(out)
    };
    let mut out = match cfg.order {
        Order::TrimFirst => {
            let t = trim(w.clone())?;
            aug(t, rng)?
        }
        Order::AugmentFirst => {
            let a = aug(w.clone(), rng)?;
            trim(a)?
        }
    };
    if let Some(s) = cfg.segment_seconds {
        out = segment(&out, s, rng)?;
    }
    Ok((out, applied))
}
