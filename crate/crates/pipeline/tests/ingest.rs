use std::fs;

use wavegp::wavelet::Recording;
use wavegp_pipeline::ingest::*;
use wavegp_pipeline::simulate::{simulate, SynthSpec};

fn meta(id: &str, fs: f64, nchan: usize) -> ObservationMeta {
    ObservationMeta {
        id: id.into(),
        fields: vec![("subj".into(), "S01".into())],
        fs,
        spacing: 1.0,
        nchan,
    }
}

#[test]
fn two_channel_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let rec = Recording::new(vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]], 4.0, 1.0).unwrap();
    write_dataset(
        &dir.path().join("rec"),
        &dir.path().join("meta.csv"),
        &[(rec, meta("a", 4.0, 2))],
    )
    .unwrap();
    let got = ingest(&dir.path().join("rec"), &dir.path().join("meta.csv")).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].0.channels(), 2);
    assert_eq!(got[0].1.nchan, 2);
    assert_eq!(got[0].1.field("subj"), Some("S01"));
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(&SynthSpec {
        subjects: 1,
        duration_s: 120.0,
        fs: 7.3,
        ..SynthSpec::default()
    })
    .unwrap();
    let data: Vec<_> = sim.into_iter().map(|s| (s.recording, s.meta)).collect();
    write_dataset(&dir.path().join("rec"), &dir.path().join("meta.csv"), &data).unwrap();
    let back = ingest(&dir.path().join("rec"), &dir.path().join("meta.csv")).unwrap();
    assert_eq!(back.len(), data.len());
    for ((r0, m0), (r1, m1)) in data.iter().zip(&back) {
        assert_eq!(m0, m1);
        for c in 0..r0.channels() {
            let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(r0.channel(c)), bits(r1.channel(c)));
        }
    }
}

#[test]
fn missing_metadata_lists_the_observation() {
    let dir = tempfile::tempdir().unwrap();
    let rec = Recording::new(vec![vec![1.0, 2.0, 3.0]], 1.0, 1.0).unwrap();
    let rdir = dir.path().join("rec");
    write_dataset(
        &rdir,
        &dir.path().join("meta.csv"),
        &[(rec.clone(), meta("a", 1.0, 1))],
    )
    .unwrap();
    write_recording(&rdir.join("orphan-7.csv"), &rec).unwrap();
    let err = ingest(&rdir, &dir.path().join("meta.csv"))
        .unwrap_err()
        .to_string();
    assert!(err.contains("orphan-7"), "{err}");
    assert!(err.contains("no metadata row"), "{err}");
}

#[test]
fn per_file_problems_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    let rdir = dir.path().join("rec");
    let rec = Recording::new(vec![vec![1.0, 2.0, 3.0, 4.0]], 2.0, 1.0).unwrap();
    let rows = [
        (rec.clone(), meta("good", 2.0, 1)),
        (rec.clone(), meta("rate", 2.0, 1)),
        (rec.clone(), meta("text", 2.0, 1)),
    ];
    write_dataset(&rdir, &dir.path().join("meta.csv"), &rows).unwrap();
    // metadata claims 5 Hz while the time column is sampled at 2 Hz
    let text = fs::read_to_string(dir.path().join("meta.csv"))
        .unwrap()
        .replace("rate,S01,2,", "rate,S01,5,");
    fs::write(dir.path().join("meta.csv"), text).unwrap();
    fs::write(rdir.join("text.csv"), "time,ch0\n0,1\n0.5,abc\n").unwrap();
    let err = match ingest(&rdir, &dir.path().join("meta.csv")) {
        Err(IngestError::Files(e)) => e,
        other => panic!("expected a file report, got {other:?}"),
    };
    assert_eq!(err.len(), 2, "{err:?}");
    assert!(err
        .iter()
        .any(|e| e.file.ends_with("rate.csv") && e.message.contains("sampling-rate mismatch")));
    assert!(err
        .iter()
        .any(|e| e.file.ends_with("text.csv") && e.message.contains("non-numeric")));
}

#[test]
fn metadata_channel_count_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let rec = Recording::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]], 1.0, 1.0).unwrap();
    write_dataset(
        &dir.path().join("rec"),
        &dir.path().join("meta.csv"),
        &[(rec, meta("a", 1.0, 3))],
    )
    .unwrap();
    let err = ingest(&dir.path().join("rec"), &dir.path().join("meta.csv"))
        .unwrap_err()
        .to_string();
    assert!(err.contains("2 channels"), "{err}");
}
