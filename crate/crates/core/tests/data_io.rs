use std::io::Write as _;

use cellsearch::data::*;
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn write_csv(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

fn magnitude(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[..x.len() / 2].iter().map(|c| c.norm()).collect()
}

fn peak_bin(x: &[f64]) -> usize {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let m = magnitude(&centered);
    (1..m.len()).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap()
}

#[test]
fn csv_groups_by_subject_and_session() {
    let f = write_csv("subject,session,x,y\na,1,1,2\na,1,2,3\na,2,1,1\nb,1,0,0\nb,2,5,5\nb,2,6,6\n");
    let recs = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[0].subject, "a");
    assert_eq!(recs[0].channels, vec![vec![1.0, 2.0], vec![2.0, 3.0]]);
    assert_eq!(recs[3].channel_names, vec!["x", "y"]);
}

#[test]
fn single_nan_is_mean_of_neighbours() {
    let f = write_csv("subject,session,x\na,1,1.0\na,1,nan\na,1,4.0\n");
    let recs = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
    assert_eq!(recs[0].channels[0], vec![1.0, 2.5, 4.0]);
}

#[test]
fn long_nan_runs_split_records() {
    // 100 Hz: gaps of more than 5 samples split.
    let mut text = String::from("subject,session,x\n");
    for i in 0..20 {
        let v = if (5..12).contains(&i) { String::new() } else { i.to_string() };
        text += &format!("a,1,{v}\n");
    }
    let f = write_csv(&text);
    let schema = CsvSchema {
        sampling_rate: 100.0,
        ..CsvSchema::default()
    };
    let recs = ingest_csv(f.path(), &schema).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].len(), 5);
    assert_eq!(recs[1].len(), 8);
    assert_ne!(recs[0].segment, recs[1].segment);
}

#[test]
fn missing_column_and_empty_file_are_reported() {
    let f = write_csv("subject,x\na,1\n");
    let err = ingest_csv(f.path(), &CsvSchema::default()).unwrap_err();
    assert!(err.to_string().contains("session"), "{err}");
    let f = write_csv("subject,session,x\n");
    assert!(ingest_csv(f.path(), &CsvSchema::default()).is_err());
    let schema = CsvSchema {
        channels: vec!["gaze_z".into()],
        ..CsvSchema::default()
    };
    let f = write_csv("subject,session,x\na,1,1\n");
    let err = ingest_csv(f.path(), &schema).unwrap_err();
    assert!(err.to_string().contains("gaze_z"), "{err}");
}

#[test]
fn export_then_ingest_round_trips() {
    let recs = synth_generate(&SynthConfig {
        num_subjects: 3,
        length: 50,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    export_csv(&recs, &path).unwrap();
    assert_eq!(ingest_csv(&path, &CsvSchema::default()).unwrap(), recs);
}

#[test]
fn z_normalized_session_one_has_unit_statistics() {
    let recs = synth_generate(&SynthConfig {
        num_subjects: 4,
        length: 512,
        ..SynthConfig::default()
    })
    .unwrap();
    let set = make_windows(&recs, 128, 64, true).unwrap();
    let s1 = set.session(1);
    for ch in 0..set.channels {
        let vals: Vec<f64> = (0..s1.len())
            .flat_map(|i| s1.window(i)[ch * s1.length..(ch + 1) * s1.length].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((std - 1.0).abs() < 1e-6, "{std}");
    }
    // Session 2 is transformed with the session-1 constants, not its own.
    let raw = make_windows(&recs, 128, 64, false).unwrap();
    let norm = set.norm.clone().unwrap();
    let i = (0..set.len()).find(|&i| set.sessions[i] == 2).unwrap();
    let expect = (raw.window(i)[0] - norm.mean[0]) / norm.std[0];
    assert!((set.window(i)[0] - expect).abs() < 1e-12);
}

#[test]
fn oversized_window_lists_offenders() {
    let recs = synth_generate(&SynthConfig {
        num_subjects: 2,
        length: 100,
        ..SynthConfig::default()
    })
    .unwrap();
    let err = make_windows(&recs, 101, 10, false).unwrap_err().to_string();
    assert!(err.contains("s00/1/0") && err.contains("s01/2/0"), "{err}");
}

#[test]
fn synthetic_generation_is_seeded() {
    let cfg = SynthConfig {
        num_subjects: 3,
        length: 200,
        seed: 11,
        ..SynthConfig::default()
    };
    assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    let other = SynthConfig { seed: 12, ..cfg.clone() };
    assert_ne!(synth_generate(&cfg).unwrap(), synth_generate(&other).unwrap());
    assert!(synth_generate(&SynthConfig { num_subjects: 1, ..cfg }).is_err());
}

#[test]
fn dominant_frequency_identifies_subject_across_sessions() {
    let cfg = SynthConfig::default();
    let recs = synth_generate(&cfg).unwrap();
    // Phase drift widens the line, so peaks are read at window resolution.
    let coarse = |bin: usize| (bin as f64 * 128.0 / cfg.length as f64).round() as usize;
    let mut peaks = std::collections::BTreeMap::new();
    for r in &recs {
        let s: usize = r.subject[1..].parse().unwrap();
        for ch in &r.channels {
            let bin = coarse(peak_bin(ch));
            assert_eq!(bin, (subject_frequency(s) * 128.0).round() as usize, "{} session {}", r.subject, r.session);
            peaks.entry(s).or_insert_with(Vec::new).push(bin);
        }
    }
    // Sessions share the signature but not the noise.
    for s in 0..cfg.num_subjects {
        let a = &recs[2 * s];
        let b = &recs[2 * s + 1];
        assert_eq!((a.session, b.session), (1, 2));
        assert_ne!(a.channels, b.channels);
    }
    let distinct: std::collections::BTreeSet<usize> = peaks.values().map(|v| v[0]).collect();
    assert_eq!(distinct.len(), cfg.num_subjects);
}

#[test]
fn spectral_nearest_centroid_separates_subjects() {
    let cfg = SynthConfig::default();
    let set = make_windows(&synth_generate(&cfg).unwrap(), 128, 64, false).unwrap();
    let feature = |i: usize| -> Vec<f64> {
        let w = set.window(i);
        let mut acc = vec![0.0; set.length / 2];
        for ch in w.chunks(set.length) {
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            let c: Vec<f64> = ch.iter().map(|v| v - mean).collect();
            acc.iter_mut().zip(magnitude(&c)).for_each(|(a, m)| *a += m);
        }
        acc
    };
    let classes = set.num_classes();
    let mut centroids = vec![vec![0.0; set.length / 2]; classes];
    let mut counts = vec![0usize; classes];
    for i in (0..set.len()).filter(|&i| set.sessions[i] == 1) {
        centroids[set.labels[i]].iter_mut().zip(feature(i)).for_each(|(c, f)| *c += f);
        counts[set.labels[i]] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let probes: Vec<usize> = (0..set.len()).filter(|&i| set.sessions[i] == 2).collect();
    let correct = probes
        .iter()
        .filter(|&&i| {
            let f = feature(i);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == set.labels[i]
        })
        .count();
    let acc = correct as f64 / probes.len() as f64;
    assert!(acc > 0.95, "nearest-centroid accuracy {acc}");
}

fn ten_per_subject() -> WindowSet {
    let recs = synth_generate(&SynthConfig {
        num_subjects: 3,
        sessions: 1,
        length: 110,
        ..SynthConfig::default()
    })
    .unwrap();
    make_windows(&recs, 20, 10, false).unwrap()
}

#[test]
fn split_is_stratified_disjoint_and_seeded() {
    let set = ten_per_subject();
    assert_eq!(set.len(), 30);
    let (a, b) = split_for_search(&set, 0.5, 3).unwrap();
    for label in 0..3 {
        assert_eq!(a.labels.iter().filter(|&&l| l == label).count(), 5);
        assert_eq!(b.labels.iter().filter(|&&l| l == label).count(), 5);
    }
    let (a2, b2) = split_for_search(&set, 0.5, 3).unwrap();
    assert_eq!((a.data.clone(), b.data.clone()), (a2.data, b2.data));
    for i in 0..a.len() {
        for j in 0..b.len() {
            assert_ne!(a.window(i), b.window(j));
        }
    }
}

#[test]
fn single_window_subject_cannot_be_split() {
    let set = ten_per_subject();
    let keep: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] != 2 || i == 29).collect();
    let err = split_for_search(&set.select(&keep), 0.5, 0).unwrap_err();
    assert!(err.to_string().contains("s02"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn split_partitions_every_subject(ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let set = ten_per_subject();
        let (a, b) = split_for_search(&set, ratio, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), set.len());
        for label in 0..3 {
            prop_assert!(a.labels.contains(&label));
            prop_assert!(b.labels.contains(&label));
        }
    }
}
