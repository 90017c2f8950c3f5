//! Verification scoring: cosine scores, EER and minDCF.
//!
//! Decision rule everywhere: a trial is accepted iff `score >= threshold`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

pub const P_TARGET: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll_utt: String,
    pub test_utt: String,
    pub is_target: bool,
}

impl Trial {
    pub fn new(enroll_utt: impl Into<String>, test_utt: impl Into<String>, is_target: bool) -> Self {
        Self { enroll_utt: enroll_utt.into(), test_utt: test_utt.into(), is_target }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialScoreSet {
    pub scores: Vec<f64>,
    pub is_target: Vec<bool>,
}

impl TrialScoreSet {
    pub fn new(scores: Vec<f64>, is_target: Vec<bool>) -> Result<Self> {
        if scores.len() != is_target.len() {
            return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), is_target.len())));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Degenerate(format!("score {i} is not finite")));
        }
        Ok(Self { scores, is_target })
    }

    pub fn from_pairs(pairs: &[(f64, bool)]) -> Result<Self> {
        Self::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.is_target.iter().filter(|&&t| t).count()
    }

    fn check_two_classes(&self) -> Result<(usize, usize)> {
        let nt = self.num_targets();
        let nn = self.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(Error::SingleClass);
        }
        Ok((nt, nn))
    }

    /// Operating points at every distinct score plus `+inf`, ascending:
    /// `(threshold, p_miss, p_fa)`.
    pub fn operating_points(&self) -> Result<Vec<(f64, f64, f64)>> {
        let (nt, nn) = self.check_two_classes()?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut out = Vec::with_capacity(self.len() + 1);
        // Counts of trials strictly below the current threshold.
        let (mut tgt_below, mut non_below) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let t = self.scores[order[i]];
            out.push((t, tgt_below as f64 / nt as f64, (nn - non_below) as f64 / nn as f64));
            while i < order.len() && self.scores[order[i]] == t {
                if self.is_target[order[i]] {
                    tgt_below += 1;
                } else {
                    non_below += 1;
                }
                i += 1;
            }
        }
        out.push((f64::INFINITY, 1.0, 0.0));
        Ok(out)
    }
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine_score(e1: &Array1<f64>, e2: &Array1<f64>) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::Shape(format!("embedding lengths {} and {}", e1.len(), e2.len())));
    }
    let n1 = e1.dot(e1).sqrt();
    let n2 = e2.dot(e2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((e1.dot(e2) / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Equal error rate and the threshold where it is reached.
///
/// The ROC is traced through the operating points of all distinct
/// thresholds; the miss/false-accept crossing is linearly interpolated
/// between the two neighbouring points.
pub fn compute_eer(s: &TrialScoreSet) -> Result<(f64, f64)> {
    let pts = s.operating_points()?;
    // The first point has p_miss = 0 and p_fa = 1, so the crossing is after it.
    let k = pts.iter().position(|&(_, pm, pf)| pm >= pf).expect("last operating point has p_miss = 1 >= p_fa = 0");
    let (t0, m0, f0) = pts[k - 1];
    let (t1, m1, f1) = pts[k];
    let d0 = f0 - m0;
    let d1 = f1 - m1;
    let a = d0 / (d0 - d1);
    let eer = m0 + a * (m1 - m0);
    let thr = if t1.is_finite() { t0 + a * (t1 - t0) } else { t0 };
    Ok((eer, thr))
}

/// Normalised minimum detection cost and its threshold.
pub fn compute_mindcf(s: &TrialScoreSet, p_target: f64, c_miss: f64, c_fa: f64) -> Result<(f64, f64)> {
    if !(p_target > 0.0 && p_target < 1.0) || c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::Config(format!("invalid cost model p={p_target} c_miss={c_miss} c_fa={c_fa}")));
    }
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let mut best = (f64::INFINITY, f64::NAN);
    for (t, pm, pf) in s.operating_points()? {
        let dcf = (c_miss * p_target * pm + c_fa * (1.0 - p_target) * pf) / norm;
        if dcf < best.0 {
            best = (dcf, t);
        }
    }
    Ok(best)
}

/// minDCF with unit costs.
pub fn mindcf(s: &TrialScoreSet, p_target: f64) -> Result<f64> {
    compute_mindcf(s, p_target, 1.0, 1.0).map(|r| r.0)
}

/// Score every trial by cosine similarity, preserving order. All missing ids
/// are reported together.
pub fn score_trials(trials: &[Trial], store: &HashMap<String, Array1<f64>>, exec: Execution) -> Result<TrialScoreSet> {
    let missing: BTreeSet<&str> =
        trials.iter().flat_map(|t| [t.enroll_utt.as_str(), t.test_utt.as_str()]).filter(|id| !store.contains_key(*id)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing.into_iter().map(String::from).collect()));
    }
    let scores =
        exec::map(exec, trials, |_, t| cosine_score(&store[&t.enroll_utt], &store[&t.test_utt])).into_iter().collect::<Result<Vec<_>>>()?;
    TrialScoreSet::new(scores, trials.iter().map(|t| t.is_target).collect())
}

/// Parse a trial list: one `<label> <enroll> <test>` per line, label 0 or 1.
pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err("expected `<label> <enroll> <test>`"));
        }
        let is_target = match f[0] {
            "1" => true,
            "0" => false,
            _ => return Err(err("label must be 0 or 1")),
        };
        out.push(Trial::new(f[1], f[2], is_target));
    }
    Ok(out)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&fs::read_to_string(path)?, path)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.is_target), t.enroll_utt, t.test_utt);
    }
    s
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    fs::write(path, format_trials(trials))?;
    Ok(())
}

/// One `<score> <label>` line per trial, six decimals.
pub fn format_scores(s: &TrialScoreSet) -> String {
    let mut out = String::new();
    for (score, t) in s.scores.iter().zip(&s.is_target) {
        let _ = writeln!(out, "{score:.6} {}", u8::from(*t));
    }
    out
}

pub fn write_scores(path: &Path, s: &TrialScoreSet) -> Result<()> {
    fs::write(path, format_scores(s))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(t: &[f64], n: &[f64]) -> TrialScoreSet {
        let mut p: Vec<(f64, bool)> = t.iter().map(|&s| (s, true)).collect();
        p.extend(n.iter().map(|&s| (s, false)));
        TrialScoreSet::from_pairs(&p).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let v = array![1.0, 2.0, -0.5];
        assert!((cosine_score(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_score(&v, &(-&v)).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&array![1.0, 0.0], &array![0.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(cosine_score(&v, &Array1::zeros(3)), Err(Error::ZeroVector)));
    }

    #[test]
    fn eer_cases() {
        assert_eq!(compute_eer(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap().0, 0.0);
        let (eer, thr) = compute_eer(&set(&[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1])).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-12);
        assert!(thr > 0.4 && thr <= 0.5);
        assert!(matches!(compute_eer(&set(&[0.1], &[])), Err(Error::SingleClass)));
    }

    #[test]
    fn mindcf_cases() {
        assert_eq!(compute_mindcf(&set(&[0.9, 0.8], &[0.2, 0.1]), P_TARGET, 1.0, 1.0).unwrap().0, 0.0);
        let flat = set(&[0.5; 4], &[0.5; 6]);
        assert!((mindcf(&flat, P_TARGET).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scoring_reports_every_missing_id() {
        let mut store = HashMap::new();
        store.insert("a".to_string(), array![1.0, 0.0]);
        let trials = vec![Trial::new("a", "x", true), Trial::new("y", "a", false)];
        match score_trials(&trials, &store, Execution::Sequential) {
            Err(Error::MissingIds(ids)) => assert_eq!(ids, vec!["x", "y"]),
            other => panic!("unexpected {other:?}"),
        }
        let s = score_trials(&[Trial::new("a", "a", true)], &store, Execution::Sequential).unwrap();
        assert_eq!(s.scores, vec![1.0]);
        assert!(score_trials(&[], &store, Execution::Sequential).unwrap().is_empty());
    }

    #[test]
    fn trial_list_round_trip() {
        let trials = vec![Trial::new("s1/u1.wav", "s2/u3.wav", false), Trial::new("s1/u1.wav", "s1/u2.wav", true)];
        let text = format_trials(&trials);
        assert_eq!(text, "0 s1/u1.wav s2/u3.wav\n1 s1/u1.wav s1/u2.wav\n");
        assert_eq!(parse_trials(&text, Path::new("t")).unwrap(), trials);
        assert!(matches!(parse_trials("2 a b\n", Path::new("t")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn score_file_format() {
        let s = TrialScoreSet::new(vec![0.5, -0.25], vec![true, false]).unwrap();
        assert_eq!(format_scores(&s), "0.500000 1\n-0.250000 0\n");
    }
}
