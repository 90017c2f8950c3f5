//! Log-mel filterbank front end, training crops and noise/reverb augmentation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Mono audio with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub utterance_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, speaker_id: impl Into<String>, utterance_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Length("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate, speaker_id: speaker_id.into(), utterance_id: utterance_id.into() })
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

    fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self { samples, sample_rate: self.sample_rate, speaker_id: self.speaker_id.clone(), utterance_id: self.utterance_id.clone() }
    }
}

/// `T × F` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub frame_shift: f64,
    pub speaker_id: String,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    /// Subtract the per-bin mean over time.
    pub fn mean_normalized(&self) -> Array2<f64> {
        let mean = self.values.mean_axis(Axis(0)).expect("at least one frame");
        &self.values - &mean.insert_axis(Axis(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbankConfig {
    pub n_mels: usize,
    /// Seconds.
    pub frame_len: f64,
    /// Seconds.
    pub frame_shift: f64,
    pub sample_rate: u32,
    pub log_floor: f64,
    pub f_min: f64,
    /// Defaults to Nyquist.
    pub f_max: Option<f64>,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self { n_mels: 80, frame_len: 0.025, frame_shift: 0.010, sample_rate: 16_000, log_floor: 1e-10, f_min: 20.0, f_max: None }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (1..=n_mels).map(|k| mel_to_hz(lo + (hi - lo) * k as f64 / (n_mels + 1) as f64)).collect()
}

/// `n_mels × (n_fft/2 + 1)` triangular filters, linear in Hz between
/// neighbouring mel-spaced edges.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Array2<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2).map(|k| mel_to_hz(lo + (hi - lo) * k as f64 / (n_mels + 1) as f64)).collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, b)| {
        let f = b as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        }
    })
}

/// Reusable filterbank extractor (window, FFT plan and mel weights cached).
#[derive(Clone)]
pub struct Fbank {
    cfg: FbankConfig,
    frame_len: usize,
    frame_shift: usize,
    window: Vec<f64>,
    weights: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fbank").field("cfg", &self.cfg).finish()
    }
}

impl Fbank {
    pub fn new(cfg: &FbankConfig) -> Result<Self> {
        if cfg.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        let sr = cfg.sample_rate as f64;
        let frame_len = (cfg.frame_len * sr).round() as usize;
        let frame_shift = (cfg.frame_shift * sr).round() as usize;
        if frame_len == 0 || frame_shift == 0 {
            return Err(Error::Config("frame length and shift must cover at least one sample".into()));
        }
        let n_fft = frame_len.next_power_of_two();
        let f_max = cfg.f_max.unwrap_or(sr / 2.0);
        if !(cfg.f_min >= 0.0 && cfg.f_min < f_max) {
            return Err(Error::Config(format!("bad mel range {}..{}", cfg.f_min, f_max)));
        }
        let window =
            (0..frame_len).map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame_len - 1).max(1) as f64).cos()).collect();
        let weights = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate, cfg.f_min, f_max);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self { cfg: cfg.clone(), frame_len, frame_shift, window, weights, fft })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    pub fn n_fft(&self) -> usize {
        self.fft.len()
    }

    /// Number of frames produced for `n` samples.
    pub fn num_frames(&self, n: usize) -> usize {
        if n < self.frame_len {
            0
        } else {
            (n - self.frame_len) / self.frame_shift + 1
        }
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::Config(format!(
                "waveform rate {} Hz does not match front-end rate {} Hz",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        let t = self.num_frames(w.len());
        if t == 0 {
            return Err(Error::Length(format!("{} samples is shorter than one {}-sample frame", w.len(), self.frame_len)));
        }
        let n_fft = self.n_fft();
        let n_bins = n_fft / 2 + 1;
        let mut values = Array2::zeros((t, self.cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = Array1::zeros(n_bins);
        for (ti, mut row) in values.rows_mut().into_iter().enumerate() {
            let start = ti * self.frame_shift;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < self.frame_len { Complex::new(w.samples[start + i] * self.window[i], 0.0) } else { Complex::new(0.0, 0.0) };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let energies = self.weights.dot(&power);
            for (o, e) in row.iter_mut().zip(energies.iter()) {
                *o = e.max(self.cfg.log_floor).ln();
            }
        }
        Ok(FeatureMatrix { values, frame_shift: self.cfg.frame_shift, speaker_id: w.speaker_id.clone() })
    }
}

/// Log-mel filterbank of `w` with `n_mels` bins and the given framing
/// (seconds); other settings take their defaults.
pub fn extract_fbank(w: &Waveform, n_mels: usize, frame_len: f64, frame_shift: f64) -> Result<FeatureMatrix> {
    let cfg = FbankConfig { n_mels, frame_len, frame_shift, sample_rate: w.sample_rate, ..FbankConfig::default() };
    Fbank::new(&cfg)?.extract(w)
}

/// Tile `src` from its start until `len` samples are filled.
fn tile(src: &[f64], len: usize) -> Vec<f64> {
    src.iter().copied().cycle().take(len).collect()
}

/// Fixed-length crop at a seeded uniform offset; inputs shorter than the
/// target are repeated end to end instead.
pub fn random_crop(w: &Waveform, duration: f64, rng_seed: u64) -> Result<Waveform> {
    if !(duration > 0.0) {
        return Err(Error::Config(format!("crop duration must be positive, got {duration}")));
    }
    let target = (duration * w.sample_rate as f64).round() as usize;
    if target == 0 {
        return Err(Error::Config("crop shorter than one sample".into()));
    }
    if w.len() <= target {
        return Ok(w.with_samples(tile(&w.samples, target)));
    }
    let offset = rng::rng(rng_seed).gen_range(0..=w.len() - target);
    Ok(w.with_samples(w.samples[offset..offset + target].to_vec()))
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Noise gain that puts `noise` at `snr_db` below `signal` (mean-square power).
pub fn noise_gain(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    let ps = power(signal);
    let pn = power(noise);
    if ps == 0.0 {
        return Err(Error::Degenerate("signal is silent; SNR undefined".into()));
    }
    if pn == 0.0 {
        return Err(Error::Degenerate("noise is silent".into()));
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Mix `noise` (tiled or cut to length) into `w` at the requested SNR.
pub fn add_noise(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    add_noise_samples(w, &noise.samples, snr_db)
}

fn add_noise_samples(w: &Waveform, noise: &[f64], snr_db: f64) -> Result<Waveform> {
    if noise.is_empty() {
        return Err(Error::Length("noise has no samples".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("SNR must be finite, got {snr_db}")));
    }
    let noise = tile(noise, w.len());
    let g = noise_gain(&w.samples, &noise, snr_db)?;
    let mixed = w.samples.iter().zip(&noise).map(|(s, n)| s + g * n).collect();
    Ok(w.with_samples(mixed))
}

/// Direct `O(N·K)` convolution truncated to `len(x)`.
pub fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (n, o) in out.iter_mut().enumerate() {
        let kmax = h.len().min(n + 1);
        let mut acc = 0.0;
        for k in 0..kmax {
            acc += h[k] * x[n - k];
        }
        *o = acc;
    }
    out
}

/// FFT convolution truncated to `len(x)`.
pub fn convolve_fft(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.iter().take(x.len()).map(|c| c.re / n as f64).collect()
}

/// Convolve with `ir`, truncate to the input length and rescale to the
/// input's peak amplitude.
pub fn add_reverb(w: &Waveform, ir: &[f64]) -> Result<Waveform> {
    if ir.is_empty() {
        return Err(Error::Length("impulse response is empty".into()));
    }
    if ir.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("impulse response is all zeros".into()));
    }
    // direct convolution stays cheaper for short responses
    let mut out = if ir.len() <= 64 { convolve_direct(&w.samples, ir) } else { convolve_fft(&w.samples, ir) };
    let peak = |s: &[f64]| s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (pin, pout) = (peak(&w.samples), peak(&out));
    if pout > 0.0 && pin > 0.0 {
        let r = pin / pout;
        if r != 1.0 {
            out.iter_mut().for_each(|v| *v *= r);
        }
    }
    Ok(w.with_samples(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Noise,
    Reverb,
}

/// Where additive noise comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// Gaussian white noise drawn from the spec's seed.
    White,
    /// A recorded clip, read from a seeded offset and tiled to length.
    Clip(Arc<[f64]>),
}

/// One augmentation, fully determined (including its randomness).
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentSpec {
    Noise { snr_db: f64, source: NoiseSource, rng_seed: u64 },
    Reverb { impulse_response: Vec<f64> },
}

impl AugmentSpec {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentSpec::Noise { .. } => AugmentKind::Noise,
            AugmentSpec::Reverb { .. } => AugmentKind::Reverb,
        }
    }
}

pub fn white_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    (0..len).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Apply one augmentation.
pub fn augment(w: &Waveform, spec: &AugmentSpec) -> Result<Waveform> {
    match spec {
        AugmentSpec::Noise { snr_db, source, rng_seed } => {
            let noise = match source {
                NoiseSource::White => white_noise(w.len(), *rng_seed),
                NoiseSource::Clip(clip) => {
                    if clip.is_empty() {
                        return Err(Error::Length("noise clip is empty".into()));
                    }
                    let off = rng::rng(*rng_seed).gen_range(0..clip.len());
                    clip[off..].iter().chain(clip.iter()).copied().cycle().take(w.len()).collect()
                }
            };
            add_noise_samples(w, &noise, *snr_db)
        }
        AugmentSpec::Reverb { impulse_response } => add_reverb(w, impulse_response),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of choosing noise over reverberation.
    pub p_noise: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Length of synthetic impulse responses, seconds.
    pub ir_duration: f64,
    /// Range of the exponential decay time constant, seconds.
    pub ir_decay_min: f64,
    pub ir_decay_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_noise: 0.5, snr_min_db: 0.0, snr_max_db: 15.0, ir_duration: 0.25, ir_decay_min: 0.03, ir_decay_max: 0.12 }
    }
}

/// Exponentially decaying Gaussian impulse response with a unit direct path.
pub fn synthetic_ir(sample_rate: u32, cfg: &AugmentConfig, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    let len = ((cfg.ir_duration * sample_rate as f64).round() as usize).max(1);
    let tau = r.gen_range(cfg.ir_decay_min..=cfg.ir_decay_max.max(cfg.ir_decay_min));
    let mut ir: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sample_rate as f64;
            let g: f64 = StandardNormal.sample(&mut r);
            0.3 * g * (-t / tau).exp()
        })
        .collect();
    ir[0] = 1.0;
    ir
}

/// Pools of augmentation material. Empty pools fall back to the synthetic
/// generators.
#[derive(Debug, Clone, Default)]
pub struct AugmentSource {
    pub noises: Vec<Arc<[f64]>>,
    pub impulse_responses: Vec<Vec<f64>>,
}

impl AugmentSource {
    pub fn synthetic() -> Self {
        Self::default()
    }

    /// Load every WAV under the given directories (either may be absent).
    pub fn from_dirs(noise_dir: Option<&Path>, rir_dir: Option<&Path>) -> Result<Self> {
        let mut src = Self::default();
        if let Some(d) = noise_dir {
            for p in list_wavs(d)? {
                src.noises.push(read_wav_samples(&p)?.0.into());
            }
        }
        if let Some(d) = rir_dir {
            for p in list_wavs(d)? {
                src.impulse_responses.push(read_wav_samples(&p)?.0);
            }
        }
        Ok(src)
    }

    /// Draw an augmentation: the kind with probability `p_noise`, then its
    /// SNR or impulse response, all from `seed`.
    pub fn sample(&self, sample_rate: u32, cfg: &AugmentConfig, seed: u64) -> AugmentSpec {
        let mut r = rng::rng(seed);
        if r.gen_bool(cfg.p_noise.clamp(0.0, 1.0)) {
            let snr_db = if cfg.snr_max_db > cfg.snr_min_db { r.gen_range(cfg.snr_min_db..cfg.snr_max_db) } else { cfg.snr_min_db };
            let source = if self.noises.is_empty() {
                NoiseSource::White
            } else {
                NoiseSource::Clip(self.noises[r.gen_range(0..self.noises.len())].clone())
            };
            AugmentSpec::Noise { snr_db, source, rng_seed: r.gen() }
        } else {
            let impulse_response = if self.impulse_responses.is_empty() {
                synthetic_ir(sample_rate, cfg, r.gen())
            } else {
                self.impulse_responses[r.gen_range(0..self.impulse_responses.len())].clone()
            };
            AugmentSpec::Reverb { impulse_response }
        }
    }
}

/// Read a 16-bit PCM mono WAV. Returns samples scaled to [-1, 1) and the rate.
pub fn read_wav_samples(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Config(format!("{}: {} channels, only mono is supported", path.display(), spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Config(format!("{}: expected 16-bit integer PCM", path.display())));
    }
    let samples = reader.into_samples::<i16>().map(|s| s.map(|v| v as f64 / 32768.0)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

pub fn read_wav(path: &Path, speaker_id: &str, utterance_id: &str) -> Result<Waveform> {
    let (samples, sr) = read_wav_samples(path)?;
    Waveform::new(samples, sr, speaker_id, utterance_id)
}

/// Write 16-bit PCM mono, clipping to the representable range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: w.sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// All `.wav` files below `dir`, sorted.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
