//! Verification metrics: similarity scores, DET curves, EER and FRR at a
//! fixed FAR.
//!
//! A probe is accepted when its score is at least the threshold. DET points
//! are taken at one threshold below every score, at the midpoints between
//! consecutive distinct scores, and at one threshold above every score.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discrete::{DiscreteNet, Phase};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Scalar;

/// FAR targets reported by default.
pub const FAR_TARGETS: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        ScoreSet { genuine, impostor }
    }

    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(Error::Metrics("no genuine scores".into()));
        }
        if self.impostor.is_empty() {
            return Err(Error::Metrics("no impostor scores".into()));
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| !v.is_finite()) {
            return Err(Error::Metrics("scores must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// DET points in ascending threshold order.
pub fn det_curve(s: &ScoreSet) -> Result<Vec<DetPoint>> {
    s.validate()?;
    let gen = sorted(&s.genuine);
    let imp = sorted(&s.impostor);
    let mut all: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = Vec::with_capacity(all.len() + 1);
    thresholds.push(all[0] - 1.0);
    thresholds.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(all[all.len() - 1] + 1.0);
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            far: (imp.len() - imp.partition_point(|&v| v < t)) as f64 / ni,
            frr: gen.partition_point(|&v| v < t) as f64 / ng,
        })
        .collect())
}

/// Equal error rate: the first point where FRR reaches FAR, interpolated
/// linearly with its predecessor.
pub fn compute_eer(s: &ScoreSet) -> Result<f64> {
    Ok(eer_from_det(&det_curve(s)?))
}

pub fn eer_from_det(det: &[DetPoint]) -> f64 {
    let d = |p: &DetPoint| p.frr - p.far;
    let i = det.iter().position(|p| d(p) >= 0.0).expect("the last point has FRR 1 and FAR 0");
    if i == 0 || d(&det[i]) == 0.0 {
        return det[i].far;
    }
    let (a, b) = (&det[i - 1], &det[i]);
    let lam = -d(a) / (d(b) - d(a));
    a.far + lam * (b.far - a.far)
}

/// FRR at the first threshold whose FAR is at most `far_target`,
/// interpolated linearly in FAR between that point and its predecessor.
pub fn frr_at_far(s: &ScoreSet, far_target: f64) -> Result<f64> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::Metrics(format!("FAR target {far_target} outside (0, 1)")));
    }
    Ok(frr_from_det(&det_curve(s)?, far_target))
}

pub fn frr_from_det(det: &[DetPoint], far_target: f64) -> f64 {
    let i = det.iter().position(|p| p.far <= far_target).expect("the last point has FAR 0");
    if i == 0 || det[i].far == far_target {
        return det[i].frr;
    }
    let (a, b) = (&det[i - 1], &det[i]);
    let lam = (a.far - far_target) / (a.far - b.far);
    a.frr + lam * (b.frr - a.frr)
}

/// Serialized form of a verification result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub frr_at_far: BTreeMap<String, f64>,
    pub n_genuine: usize,
    pub n_impostor: usize,
    /// FAR targets finer than one impostor comparison can resolve.
    pub under_resolved: Vec<String>,
}

pub fn far_label(target: f64) -> String {
    format!("{target:e}")
}

impl MetricsReport {
    pub fn compute(s: &ScoreSet) -> Result<Self> {
        let det = det_curve(s)?;
        let mut frr = BTreeMap::new();
        let mut under = Vec::new();
        for t in FAR_TARGETS {
            frr.insert(far_label(t), frr_from_det(&det, t));
            if (s.impostor.len() as f64) < 1.0 / t {
                under.push(far_label(t));
            }
        }
        Ok(MetricsReport {
            eer: eer_from_det(&det),
            frr_at_far: frr,
            n_genuine: s.genuine.len(),
            n_impostor: s.impostor.len(),
            under_resolved: under,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn write_det_csv(det: &[DetPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "far", "frr"])?;
    for p in det {
        w.write_record([p.threshold.to_string(), p.far.to_string(), p.frr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit-length pooled features of `x` (`[n, channels, time]`, row-major),
/// computed in evaluation mode in chunks of `batch_size`.
pub fn embed<F: Scalar>(net: &DiscreteNet<F>, set: &crate::data::WindowSet, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = set.batch::<F>(chunk);
        let mut tape = Tape::new();
        let (o, _) = net.forward(&mut tape, &batch.x, Phase::Eval)?;
        let e = tape.value(o.embedding);
        let d = e.shape()[1];
        for row in e.data().chunks(d) {
            let mut v: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("embedding".into()));
            }
            normalize(&mut v);
            out.push(v);
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Centroid enrollment and cosine scoring. Each enrollment label gets the
/// re-normalized mean of its embeddings; every probe is scored against every
/// centroid. Probes whose subject was never enrolled are skipped.
pub fn score_protocol(
    enroll: &[Vec<f64>],
    enroll_labels: &[usize],
    probe: &[Vec<f64>],
    probe_labels: &[usize],
) -> Result<ScoreSet> {
    if enroll.is_empty() || probe.is_empty() {
        return Err(Error::Metrics("both sessions need embeddings".into()));
    }
    if enroll.len() != enroll_labels.len() || probe.len() != probe_labels.len() {
        return Err(Error::Metrics("embedding and label counts differ".into()));
    }
    let dim = enroll[0].len();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (e, &l) in enroll.iter().zip(enroll_labels) {
        let (s, n) = sums.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
        s.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        *n += 1;
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(l, (mut s, n))| {
            s.iter_mut().for_each(|v| *v /= n as f64);
            normalize(&mut s);
            (l, s)
        })
        .collect();
    let mut missing: Vec<usize> = probe_labels
        .iter()
        .filter(|l| !centroids.iter().any(|(c, _)| c == *l))
        .copied()
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        log::warn!("subjects {missing:?} have no enrollment data; their probes are excluded");
    }
    let probed: std::collections::BTreeSet<usize> = probe_labels.iter().copied().collect();
    let unprobed: Vec<usize> = centroids.iter().map(|(l, _)| *l).filter(|l| !probed.contains(l)).collect();
    if !unprobed.is_empty() {
        log::warn!("subjects {unprobed:?} have no probe data; they serve only as impostor references");
    }
    let mut s = ScoreSet::default();
    for (p, &l) in probe.iter().zip(probe_labels) {
        if missing.binary_search(&l).is_ok() {
            continue;
        }
        for (c, centroid) in &centroids {
            let score = dot(p, centroid);
            if *c == l {
                s.genuine.push(score);
            } else {
                s.impostor.push(score);
            }
        }
    }
    Ok(s)
}

/// Median cosine similarity of same-label and different-label pairs, up to
/// `max_pairs` of each, taken in index order.
pub fn pair_similarity_medians(emb: &[Vec<f64>], labels: &[usize], max_pairs: usize) -> (f64, f64) {
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    'outer: for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let v = dot(&emb[i], &emb[j]);
            if labels[i] == labels[j] {
                if same.len() < max_pairs {
                    same.push(v);
                }
            } else if diff.len() < max_pairs {
                diff.push(v);
            }
            if same.len() >= max_pairs && diff.len() >= max_pairs {
                break 'outer;
            }
        }
    }
    let median = |v: Vec<f64>| {
        let v = sorted(&v);
        if v.is_empty() {
            f64::NAN
        } else if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
        }
    };
    (median(same), median(diff))
}

/// Writes a plain-text table, one row per labelled result.
pub fn write_table(rows: &[(String, MetricsReport)], out: &mut impl Write) -> Result<()> {
    let header: Vec<String> = FAR_TARGETS.iter().map(|&t| format!("FRR@FAR={}", far_label(t))).collect();
    writeln!(out, "{:<8} {:>8} {}", "tier", "EER", header.iter().map(|h| format!("{h:>15}")).collect::<String>())?;
    for (name, m) in rows {
        let cols: String = FAR_TARGETS
            .iter()
            .map(|&t| format!("{:>15.4}", m.frr_at_far[&far_label(t)]))
            .collect();
        writeln!(out, "{name:<8} {:>8.4} {cols}", m.eer)?;
    }
    Ok(())
}
