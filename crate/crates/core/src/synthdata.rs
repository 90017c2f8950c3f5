//! Deterministic synthetic speaker corpus and trial lists.
//!
//! Each speaker is a harmonic source: a fundamental frequency plus three
//! resonances shaping the harmonic amplitudes. Utterances perturb that latent
//! (pitch, resonance positions, intonation, syllable envelope) and add a
//! little white noise, so same-speaker recordings are similar but not equal.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::features::{self, Waveform};
use crate::metrics::Trial;
use crate::rng;

pub const F0_RANGE: (f64, f64) = (90.0, 250.0);
const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 850.0), (900.0, 2300.0), (2400.0, 3400.0)];
const FORMANT_BANDWIDTHS: [f64; 3] = [90.0, 130.0, 180.0];
const MAX_HARMONIC_HZ: f64 = 4000.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerModel {
    #[default]
    Harmonic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Utterance length in seconds.
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub speaker_model: SpeakerModel,
    /// Relative standard deviation of per-utterance pitch and resonance shifts.
    pub jitter: f64,
    /// Additive white-noise level relative to the signal RMS.
    pub noise_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 10,
            utts_per_speaker: 20,
            duration: 1.0,
            sample_rate: 16_000,
            seed: 0,
            speaker_model: SpeakerModel::Harmonic,
            jitter: 0.04,
            noise_level: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 || self.utts_per_speaker < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 speakers with 2 utterances each".into()));
        }
        if !(self.duration > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("duration and sample rate must be positive".into()));
        }
        if self.jitter < 0.0 || self.noise_level < 0.0 {
            return Err(Error::Config("jitter and noise level must be non-negative".into()));
        }
        Ok(())
    }
}

/// Latent description of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerLatent {
    pub f0: f64,
    pub formants: [f64; 3],
}

impl SpeakerLatent {
    fn draw<R: Rng>(r: &mut R) -> Self {
        Self { f0: r.gen_range(F0_RANGE.0..F0_RANGE.1), formants: FORMANT_RANGES.map(|(lo, hi)| r.gen_range(lo..hi)) }
    }
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

pub fn utterance_id(s: usize, u: usize) -> String {
    format!("spk{s:03}/utt{u:03}")
}

pub fn speaker_latents(spec: &SynthSpec) -> Vec<SpeakerLatent> {
    (0..spec.n_speakers).map(|s| SpeakerLatent::draw(&mut rng::rng_at(spec.seed, &[0, s as u64]))).collect()
}

fn resonance_gain(f: f64, formants: &[f64; 3]) -> f64 {
    formants.iter().zip(FORMANT_BANDWIDTHS).map(|(&fc, bw)| 1.0 / (1.0 + ((f - fc) / bw).powi(2))).sum::<f64>()
}

fn synthesize(latent: &SpeakerLatent, spec: &SynthSpec, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    let mut jitter = |scale: f64| -> f64 {
        let g: f64 = StandardNormal.sample(&mut r);
        1.0 + scale * g
    };
    let f0 = latent.f0 * jitter(spec.jitter);
    let formants = latent.formants.map(|f| f * jitter(spec.jitter));
    let sr = spec.sample_rate as f64;
    let n = (spec.duration * sr).round().max(1.0) as usize;

    let intonation_rate = r.gen_range(0.5..2.0);
    let intonation_depth = r.gen_range(0.02..0.06);
    let syllable_rate = r.gen_range(3.0..6.0);
    let phase0: f64 = r.gen_range(0.0..std::f64::consts::TAU);

    let top = MAX_HARMONIC_HZ.min(0.45 * sr);
    let n_harm = ((top / (f0 * (1.0 + intonation_depth))).floor() as usize).max(1);
    let amps: Vec<f64> = (1..=n_harm).map(|k| resonance_gain(k as f64 * f0, &formants) / (k as f64).sqrt()).collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| r.gen_range(0.0..std::f64::consts::TAU)).collect();

    let mut out = vec![0.0; n];
    let mut theta = 0.0;
    for (i, y) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let inst = f0 * (1.0 + intonation_depth * (std::f64::consts::TAU * intonation_rate * t + phase0).sin());
        theta += std::f64::consts::TAU * inst / sr;
        let env = 0.6 + 0.4 * (std::f64::consts::TAU * syllable_rate * t + phase0).sin();
        let mut v = 0.0;
        for (k, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            v += a * ((k + 1) as f64 * theta + p).sin();
        }
        *y = env * v;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let noise = features::white_noise(n, rng::derive(seed, &[1]));
    let g = 0.1 / rms.max(1e-12);
    for (y, e) in out.iter_mut().zip(noise) {
        *y = g * (*y + spec.noise_level * rms * e);
    }
    out
}

/// All utterances, speaker-major, deterministic under `spec.seed`.
pub fn generate_corpus(spec: &SynthSpec, exec: Execution) -> Result<Vec<Waveform>> {
    spec.validate()?;
    let latents = speaker_latents(spec);
    exec::map_range(exec, spec.n_speakers * spec.utts_per_speaker, |i| {
        let (s, u) = (i / spec.utts_per_speaker, i % spec.utts_per_speaker);
        let samples = synthesize(&latents[s], spec, rng::derive(spec.seed, &[1, s as u64, u as u64]));
        Waveform::new(samples, spec.sample_rate, speaker_id(s), utterance_id(s, u))
    })
    .into_iter()
    .collect()
}

/// Random target and nontarget trials without repeated unordered pairs or
/// self-pairs.
pub fn generate_trials(corpus: &[Waveform], n_target: usize, n_nontarget: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..corpus.len() {
        for j in i + 1..corpus.len() {
            if corpus[i].utterance_id == corpus[j].utterance_id {
                continue;
            }
            if corpus[i].speaker_id == corpus[j].speaker_id {
                targets.push((i, j));
            } else {
                nontargets.push((i, j));
            }
        }
    }
    if n_target > targets.len() || n_nontarget > nontargets.len() {
        return Err(Error::Config(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials but only {} / {} distinct pairs exist",
            targets.len(),
            nontargets.len()
        )));
    }
    let mut r = rng::rng(seed);
    targets.shuffle(&mut r);
    nontargets.shuffle(&mut r);
    let mut trials: Vec<Trial> = targets[..n_target]
        .iter()
        .map(|&p| (p, true))
        .chain(nontargets[..n_nontarget].iter().map(|&p| (p, false)))
        .map(|((i, j), t)| {
            let (a, b) = if r.gen::<bool>() { (i, j) } else { (j, i) };
            Trial::new(&corpus[a].utterance_id, &corpus[b].utterance_id, t)
        })
        .collect();
    trials.shuffle(&mut r);
    Ok(trials)
}

/// Split of a trial budget into target and nontarget counts, half each.
pub fn split_trials(total: usize) -> (usize, usize) {
    (total / 2, total - total / 2)
}

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
}

/// Write every utterance as `<dir>/wav/<utt_id>.wav` plus `<dir>/manifest.txt`.
pub fn export_corpus(dir: &Path, corpus: &[Waveform]) -> Result<PathBuf> {
    let mut manifest = String::new();
    for w in corpus {
        let rel = PathBuf::from("wav").join(format!("{}.wav", w.utterance_id));
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        features::write_wav(&path, w)?;
        let _ = writeln!(manifest, "{} {} {}", w.utterance_id, w.speaker_id, rel.display());
    }
    let out = dir.join(MANIFEST);
    fs::write(&out, manifest)?;
    Ok(out)
}

/// Parse `<utt_id> <speaker_id> <path>` lines; relative paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        if f.len() != 3 {
            return Err(err("expected `<utt_id> <speaker_id> <path>`".into()));
        }
        if let Some(prev) = seen.insert(f[0].to_string(), i + 1) {
            return Err(err(format!("utterance `{}` already listed on line {prev}", f[0])));
        }
        out.push(ManifestEntry { utterance_id: f[0].to_string(), speaker_id: f[1].to_string(), path: base.join(f[2]) });
    }
    Ok(out)
}

/// Load every utterance listed in a manifest.
pub fn load_manifest(path: &Path, exec: Execution) -> Result<Vec<Waveform>> {
    let entries = read_manifest(path)?;
    exec::map(exec, &entries, |_, e| features::read_wav(&e.path, &e.speaker_id, &e.utterance_id)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { n_speakers: 3, utts_per_speaker: 4, duration: 0.2, ..SynthSpec::default() }
    }

    #[test]
    fn counts_and_ids() {
        let c = generate_corpus(&small(), Execution::Sequential).unwrap();
        assert_eq!(c.len(), 12);
        assert_eq!(c[5].speaker_id, "spk001");
        assert_eq!(c[5].utterance_id, "spk001/utt001");
        assert!(c.iter().all(|w| w.len() == 3200));
    }

    #[test]
    fn latents_stay_in_range() {
        for l in speaker_latents(&SynthSpec { n_speakers: 50, ..small() }) {
            assert!((F0_RANGE.0..F0_RANGE.1).contains(&l.f0));
            for (f, (lo, hi)) in l.formants.iter().zip(FORMANT_RANGES) {
                assert!((lo..hi).contains(f));
            }
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate_corpus(&SynthSpec { n_speakers: 1, ..small() }, Execution::Sequential).is_err());
        assert!(generate_corpus(&SynthSpec { utts_per_speaker: 1, ..small() }, Execution::Sequential).is_err());
    }

    #[test]
    fn trials_are_well_formed() {
        let c = generate_corpus(&small(), Execution::Sequential).unwrap();
        let spk: HashMap<_, _> = c.iter().map(|w| (w.utterance_id.clone(), w.speaker_id.clone())).collect();
        let trials = generate_trials(&c, 10, 20, 3).unwrap();
        assert_eq!(trials.len(), 30);
        assert_eq!(trials.iter().filter(|t| t.is_target).count(), 10);
        let mut pairs = std::collections::HashSet::new();
        for t in &trials {
            assert_ne!(t.enroll_utt, t.test_utt);
            assert_eq!(spk[&t.enroll_utt] == spk[&t.test_utt], t.is_target);
            let key = if t.enroll_utt < t.test_utt {
                (t.enroll_utt.clone(), t.test_utt.clone())
            } else {
                (t.test_utt.clone(), t.enroll_utt.clone())
            };
            assert!(pairs.insert(key));
        }
        // 3 speakers x C(4,2) = 18 target pairs.
        assert!(generate_trials(&c, 19, 0, 3).is_err());
        assert_eq!(generate_trials(&c, 0, 5, 3).unwrap().len(), 5);
    }
}
