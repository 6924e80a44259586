//! Multi-channel recordings: CSV ingestion and export, windowing, session
//! splits, and a seeded synthetic generator with per-subject signatures.
//!
//! # CSV schema
//!
//! One row per sample. Required columns are `subject` (string), `session`
//! (integer, 1 = enrollment/search/training, 2 = test) and one column per
//! channel. An optional `segment` column (integer) separates pieces of one
//! session; it is written by [`export_csv`]. Missing values are empty cells
//! or `nan`. Rows of one `(subject, session, segment)` key must be contiguous
//! in time order but keys may interleave.
//!
//! ```text
//! subject,session,gaze_x,gaze_y
//! s01,1,0.12,-0.40
//! s01,1,0.13,-0.38
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Longest gap, in seconds, that is bridged by interpolation.
pub const MAX_GAP_SECONDS: f64 = 0.05;

/// One contiguous recording of one subject in one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub subject: String,
    pub session: u32,
    /// Piece index when a session was split at a long gap.
    pub segment: u32,
    pub sampling_rate: f64,
    pub channel_names: Vec<String>,
    /// Channel-major samples, all of equal length.
    pub channels: Vec<Vec<f64>>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Column layout of an input CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub subject_column: String,
    pub session_column: String,
    /// Channel columns; empty means every column other than subject, session
    /// and segment.
    pub channels: Vec<String>,
    pub sampling_rate: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            subject_column: "subject".into(),
            session_column: "session".into(),
            channels: Vec::new(),
            sampling_rate: 1000.0,
        }
    }
}

const SEGMENT_COLUMN: &str = "segment";

fn parse_value(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        Ok(f64::NAN)
    } else {
        s.parse()
    }
}

/// Reads records grouped by `(subject, session, segment)` in order of first
/// appearance, bridging short gaps and splitting at long ones.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<SequenceRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let subject_col = find(&schema.subject_column)?;
    let session_col = find(&schema.session_column)?;
    let segment_col = headers.iter().position(|h| h == SEGMENT_COLUMN);
    let channel_names: Vec<String> = if schema.channels.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != subject_col && i != session_col && Some(i) != segment_col)
            .map(|(_, h)| h.to_string())
            .collect()
    } else {
        schema.channels.clone()
    };
    if channel_names.is_empty() {
        return Err(Error::Data(format!("{}: no channel columns", path.display())));
    }
    let channel_cols = channel_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    if !(schema.sampling_rate > 0.0) {
        return Err(Error::Data(format!("sampling rate {} must be positive", schema.sampling_rate)));
    }

    let mut order: Vec<(String, u32, u32)> = Vec::new();
    let mut groups: HashMap<(String, u32, u32), Vec<Vec<f64>>> = HashMap::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let at = |i: usize| row.get(i).unwrap_or("");
        let bad = |what: &str, v: &str| Error::Data(format!("{}: row {}: bad {what} {v:?}", path.display(), line + 2));
        let subject = at(subject_col).to_string();
        let session: u32 = at(session_col).parse().map_err(|_| bad("session", at(session_col)))?;
        let segment: u32 = match segment_col {
            Some(c) => at(c).parse().map_err(|_| bad("segment", at(c)))?,
            None => 0,
        };
        let key = (subject, session, segment);
        let series = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            vec![Vec::new(); channel_cols.len()]
        });
        for (ch, &col) in series.iter_mut().zip(&channel_cols) {
            ch.push(parse_value(at(col)).map_err(|_| bad("value", at(col)))?);
        }
    }
    if order.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }

    let max_gap = (MAX_GAP_SECONDS * schema.sampling_rate).floor() as usize;
    let mut out = Vec::new();
    for key in order {
        let series = groups.remove(&key).expect("grouped key");
        let (subject, session, segment) = key;
        let pieces = repair_gaps(&series, max_gap);
        if pieces.is_empty() {
            return Err(Error::Data(format!("subject {subject} session {session}: no valid samples")));
        }
        // Splitting renumbers pieces after the original segment index.
        let base = segment * pieces.len() as u32;
        for (k, channels) in pieces.into_iter().enumerate() {
            out.push(SequenceRecord {
                subject: subject.clone(),
                session,
                segment: if k == 0 { segment } else { base + k as u32 },
                sampling_rate: schema.sampling_rate,
                channel_names: channel_names.clone(),
                channels,
            });
        }
    }
    Ok(out)
}

/// Splits channel-major series at missing runs longer than `max_gap` samples
/// and interpolates the rest. Edge gaps take the nearest valid value.
pub fn repair_gaps(series: &[Vec<f64>], max_gap: usize) -> Vec<Vec<Vec<f64>>> {
    let len = series.first().map_or(0, Vec::len);
    let missing: Vec<bool> = (0..len).map(|t| series.iter().any(|c| c[t].is_nan())).collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut t = 0;
    while t <= len {
        if t < len && missing[t] {
            let run_start = t;
            while t < len && missing[t] {
                t += 1;
            }
            if t - run_start > max_gap {
                pieces.push((start, run_start));
                start = t;
            }
            continue;
        }
        if t == len {
            pieces.push((start, len));
        }
        t += 1;
    }
    pieces
        .into_iter()
        .filter(|&(a, b)| (a..b).any(|t| !missing[t]))
        .map(|(a, b)| series.iter().map(|c| interpolate(&c[a..b])).collect())
        .collect()
}

fn interpolate(x: &[f64]) -> Vec<f64> {
    let valid: Vec<usize> = (0..x.len()).filter(|&i| !x[i].is_nan()).collect();
    if valid.is_empty() {
        return vec![0.0; x.len()];
    }
    let mut out = x.to_vec();
    let (first, last) = (valid[0], *valid.last().expect("nonempty"));
    out[..first].fill(x[first]);
    out[last + 1..].fill(x[last]);
    for pair in valid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in a + 1..b {
            let lam = (i - a) as f64 / (b - a) as f64;
            out[i] = x[a] + lam * (x[b] - x[a]);
        }
    }
    out
}

/// Writes records in the ingestion schema, including the `segment` column.
pub fn export_csv(records: &[SequenceRecord], path: &Path) -> Result<()> {
    let first = records.first().ok_or_else(|| Error::Data("no records to export".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject".to_string(), "session".to_string(), SEGMENT_COLUMN.to_string()];
    header.extend(first.channel_names.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        if r.channel_names != first.channel_names {
            return Err(Error::Data("records disagree on channel names".into()));
        }
        for t in 0..r.len() {
            let mut row = vec![r.subject.clone(), r.session.to_string(), r.segment.to_string()];
            // `{:?}` prints the shortest representation that parses back exactly.
            row.extend(r.channels.iter().map(|c| format!("{:?}", c[t])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-channel normalization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fixed-length windows with subject labels and session tags.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub channels: usize,
    pub length: usize,
    pub stride: usize,
    /// `[n, channels, length]` row-major.
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub sessions: Vec<u32>,
    /// Index of the source record of each window.
    pub source: Vec<usize>,
    /// Subject id of each label.
    pub subjects: Vec<String>,
    pub norm: Option<ChannelNorm>,
}

/// One mini-batch ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub x: Tensor<F>,
    pub labels: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.subjects.len()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.channels * self.length;
        &self.data[i * w..(i + 1) * w]
    }

    /// Windows at `indices`, keeping labels and subject names.
    pub fn select(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            data: indices.iter().flat_map(|&i| self.window(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sessions: indices.iter().map(|&i| self.sessions[i]).collect(),
            source: indices.iter().map(|&i| self.source[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> WindowSet {
        WindowSet {
            channels: self.channels,
            length: self.length,
            stride: self.stride,
            data: Vec::new(),
            labels: Vec::new(),
            sessions: Vec::new(),
            source: Vec::new(),
            subjects: self.subjects.clone(),
            norm: self.norm.clone(),
        }
    }

    pub fn session(&self, session: u32) -> WindowSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.sessions[i] == session).collect();
        self.select(&idx)
    }

    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Batch<F> {
        let data = indices
            .iter()
            .flat_map(|&i| self.window(i).iter().map(|&v| F::lit(v)))
            .collect();
        Batch {
            x: Tensor::new(vec![indices.len(), self.channels, self.length], data).expect("window shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// SHA-256 over shape, samples, labels and sessions.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in [self.channels, self.length, self.len()] {
            h.update((n as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        for (&l, &s) in self.labels.iter().zip(&self.sessions) {
            h.update((l as u64).to_le_bytes());
            h.update(s.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Cuts every record into windows of `length` samples every `stride` samples.
/// Labels index the sorted subject ids. With `z_normalize`, each channel is
/// shifted and scaled by statistics of the session-1 windows only.
pub fn make_windows(records: &[SequenceRecord], length: usize, stride: usize, z_normalize: bool) -> Result<WindowSet> {
    if records.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    if length == 0 || stride == 0 {
        return Err(Error::Data("window length and stride must be positive".into()));
    }
    let channels = records[0].num_channels();
    if let Some(r) = records.iter().find(|r| r.num_channels() != channels) {
        return Err(Error::Data(format!(
            "subject {} session {} has {} channels, expected {channels}",
            r.subject,
            r.session,
            r.num_channels()
        )));
    }
    let short: Vec<String> = records
        .iter()
        .filter(|r| r.len() < length)
        .map(|r| format!("{}/{}/{} ({} samples)", r.subject, r.session, r.segment, r.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::Data(format!(
            "window length {length} exceeds records: {}",
            short.join(", ")
        )));
    }
    let mut subjects: Vec<String> = records.iter().map(|r| r.subject.clone()).collect();
    subjects.sort();
    subjects.dedup();

    let mut set = WindowSet {
        channels,
        length,
        stride,
        data: Vec::new(),
        labels: Vec::new(),
        sessions: Vec::new(),
        source: Vec::new(),
        subjects,
        norm: None,
    };
    for (ri, r) in records.iter().enumerate() {
        let label = set.subjects.binary_search(&r.subject).expect("known subject");
        let mut start = 0;
        while start + length <= r.len() {
            for ch in &r.channels {
                set.data.extend_from_slice(&ch[start..start + length]);
            }
            set.labels.push(label);
            set.sessions.push(r.session);
            set.source.push(ri);
            start += stride;
        }
    }
    if z_normalize {
        let norm = session_one_stats(&set)?;
        let w = channels * length;
        for win in set.data.chunks_mut(w) {
            for (c, row) in win.chunks_mut(length).enumerate() {
                row.iter_mut().for_each(|v| *v = (*v - norm.mean[c]) / norm.std[c]);
            }
        }
        set.norm = Some(norm);
    }
    Ok(set)
}

fn session_one_stats(set: &WindowSet) -> Result<ChannelNorm> {
    let c = set.channels;
    let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
    for i in (0..set.len()).filter(|&i| set.sessions[i] == 1) {
        for (ch, row) in set.window(i).chunks(set.length).enumerate() {
            sum[ch] += row.iter().sum::<f64>();
        }
        n += set.length;
    }
    if n == 0 {
        return Err(Error::Data("normalization needs session-1 windows".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    for i in (0..set.len()).filter(|&i| set.sessions[i] == 1) {
        for (ch, row) in set.window(i).chunks(set.length).enumerate() {
            sq[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let std = sq
        .iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        })
        .collect();
    Ok(ChannelNorm { mean, std })
}

/// Label-stratified disjoint split; `ratio` of each subject's windows go to
/// the first (training) split.
pub fn split_for_search(set: &WindowSet, ratio: f64, seed: u64) -> Result<(WindowSet, WindowSet)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in 0..set.num_classes() {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == label).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "subject {} has a single window and cannot be split",
                set.subjects[label]
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((ratio * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        val.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((set.select(&train), set.select(&val)))
}

/// Synthetic cohort settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_subjects: usize,
    pub sessions: u32,
    /// Samples per record.
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_subjects: 20,
            sessions: 2,
            length: 2048,
            channels: 2,
            seed: 0,
        }
    }
}

/// Dominant frequency of subject `s`, in cycles per sample. At the default
/// window length of 128 it falls exactly on FFT bin `4 + s`.
pub fn subject_frequency(s: usize) -> f64 {
    (4 + s) as f64 / 128.0
}

/// Standard deviation, in radians per sample, of the random walk added to
/// every oscillator phase so that windows never repeat one waveform.
pub const PHASE_DIFFUSION: f64 = 0.08;

/// Mean amplitude of a subject-independent oscillation in the band
/// `NUISANCE_BAND` (cycles per 128 samples). Its frequency and amplitude are
/// redrawn every `NUISANCE_SPAN` samples, so window energy says nothing about
/// identity and an untrained network scores near chance.
pub const NUISANCE_AMPLITUDE: f64 = 1.25;
pub const NUISANCE_SPAN: usize = 96;
pub const NUISANCE_BAND: (f64, f64) = (40.0, 60.0);

/// Per-subject signature: a dominant oscillation shared by all channels,
/// a weaker secondary oscillation per channel, and the statistics of a
/// saccade-like jump process, on top of a shared nuisance oscillation.
/// Phases drift slowly. Sessions reuse the
/// signature with fresh phases, jump times and noise.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<SequenceRecord>> {
    if config.num_subjects < 2 {
        return Err(Error::InvalidArgument("at least two synthetic subjects are required".into()));
    }
    if config.channels == 0 || config.length == 0 || config.sessions == 0 {
        return Err(Error::InvalidArgument("channels, length and sessions must be positive".into()));
    }
    let noise = Normal::new(0.0, 0.25).expect("valid std");
    let drift = Normal::new(0.0, PHASE_DIFFUSION).expect("valid std");
    let tau = std::f64::consts::TAU;
    let mut out = Vec::new();
    for s in 0..config.num_subjects {
        let mut sig = ChaCha8Rng::seed_from_u64(config.seed);
        sig.set_stream(1 + s as u64);
        let f0 = subject_frequency(s);
        let amp: Vec<f64> = (0..config.channels).map(|_| sig.random_range(0.8..1.2)).collect();
        let f1: Vec<f64> = (0..config.channels).map(|_| sig.random_range(1.0..40.0) / 128.0).collect();
        let amp1: Vec<f64> = (0..config.channels).map(|_| sig.random_range(0.2..0.4)).collect();
        let jump_rate = sig.random_range(0.005..0.02);
        let jump_size = sig.random_range(0.1..0.3);
        for session in 1..=config.sessions {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0000_0000);
            rng.set_stream(((s as u64) << 8) | u64::from(session));
            let channels = (0..config.channels)
                .map(|c| {
                    let (mut p0, mut p1) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
                    let mut level = 0.0;
                    let (mut pn, mut fnu, mut an) = (0.0, 0.0, 0.0);
                    (0..config.length)
                        .map(|t| {
                            if rng.random_bool(jump_rate) {
                                level = jump_size * rng.random_range(-1.0..1.0);
                            }
                            if t % NUISANCE_SPAN == 0 {
                                fnu = rng.random_range(NUISANCE_BAND.0..NUISANCE_BAND.1) / 128.0;
                                an = rng.random_range(0.0..2.0 * NUISANCE_AMPLITUDE);
                            }
                            pn += tau * fnu;
                            let v = amp[c] * p0.sin()
                                + amp1[c] * p1.sin()
                                + an * pn.sin()
                                + level
                                + noise.sample(&mut rng);
                            p0 += tau * f0 + drift.sample(&mut rng);
                            p1 += tau * f1[c] + drift.sample(&mut rng);
                            v
                        })
                        .collect()
                })
                .collect();
            out.push(SequenceRecord {
                subject: format!("s{s:02}"),
                session,
                segment: 0,
                sampling_rate: 1000.0,
                channel_names: (0..config.channels).map(|c| format!("ch{c}")).collect(),
                channels,
            });
        }
    }
    Ok(out)
}

/// Self-describing summary of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub channels: Vec<String>,
    pub sampling_rate: f64,
    pub window_length: usize,
    pub window_stride: usize,
    pub subjects: Vec<String>,
    pub records: Vec<RecordSummary>,
    pub windows_per_session: Vec<(u32, usize)>,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub subject: String,
    pub session: u32,
    pub segment: u32,
    pub length: usize,
}

impl DatasetManifest {
    pub fn new(source: &str, records: &[SequenceRecord], set: &WindowSet) -> Self {
        let mut per_session: Vec<(u32, usize)> = Vec::new();
        for &s in &set.sessions {
            match per_session.iter_mut().find(|(k, _)| *k == s) {
                Some((_, n)) => *n += 1,
                None => per_session.push((s, 1)),
            }
        }
        per_session.sort_unstable();
        DatasetManifest {
            source: source.to_string(),
            channels: records.first().map(|r| r.channel_names.clone()).unwrap_or_default(),
            sampling_rate: records.first().map_or(0.0, |r| r.sampling_rate),
            window_length: set.length,
            window_stride: set.stride,
            subjects: set.subjects.clone(),
            records: records
                .iter()
                .map(|r| RecordSummary {
                    subject: r.subject.clone(),
                    session: r.session,
                    segment: r.segment,
                    length: r.len(),
                })
                .collect(),
            windows_per_session: per_session,
            fingerprint: set.fingerprint(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_bridges_short_gaps() {
        let x = vec![vec![1.0, f64::NAN, 3.0, f64::NAN, f64::NAN, 9.0]];
        let pieces = repair_gaps(&x, 2);
        assert_eq!(pieces, vec![vec![vec![1.0, 2.0, 3.0, 5.0, 7.0, 9.0]]]);
    }

    #[test]
    fn long_gaps_split_records() {
        let x = vec![vec![1.0, 2.0, f64::NAN, f64::NAN, f64::NAN, 4.0, 5.0]];
        let pieces = repair_gaps(&x, 2);
        assert_eq!(pieces, vec![vec![vec![1.0, 2.0]], vec![vec![4.0, 5.0]]]);
    }

    #[test]
    fn edge_gaps_take_nearest_value() {
        let x = vec![vec![f64::NAN, 2.0, 3.0, f64::NAN]];
        assert_eq!(repair_gaps(&x, 5), vec![vec![vec![2.0, 2.0, 3.0, 3.0]]]);
    }

    #[test]
    fn window_counts_follow_stride() {
        let rec = SequenceRecord {
            subject: "a".into(),
            session: 1,
            segment: 0,
            sampling_rate: 100.0,
            channel_names: vec!["x".into()],
            channels: vec![(0..100).map(f64::from).collect()],
        };
        let recs = [rec];
        assert_eq!(make_windows(&recs, 50, 50, false).unwrap().len(), 2);
        assert_eq!(make_windows(&recs, 50, 25, false).unwrap().len(), 3);
        let err = make_windows(&recs, 101, 1, false).unwrap_err();
        assert!(err.to_string().contains("a/1/0"), "{err}");
    }
}
