use std::fs;
use std::path::Path;
use std::process::Command;

use wavegp_pipeline::stages::{run_pipeline, stage_dir, Stage};
use wavegp_pipeline::{write_synthetic, RunConfig, SynthSpec};

fn small_config(data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(data.join("recordings"), data.join("metadata.csv"), out);
    cfg.seed = 5;
    cfg.sampler.warmup = 150;
    cfg.sampler.draws = 60;
    cfg.sampler.chains = 2;
    cfg.sampler.adapt_delta = 0.8;
    cfg.sampler.max_treedepth = 7;
    cfg.refine.freq_bins = 40;
    cfg.refine.overlay = 20;
    cfg.model
        .levels
        .insert("reg".into(), vec!["descending".into(), "sigmoid".into()]);
    cfg
}

fn small_data(dir: &Path) {
    let spec = SynthSpec {
        subjects: 3,
        duration_s: 600.0,
        ..SynthSpec::default()
    };
    assert_eq!(write_synthetic(&spec, dir).unwrap(), 12);
}

#[test]
fn end_to_end_is_staged_resumable_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data);
    let cfg = small_config(&data, &tmp.path().join("out"));

    let first = run_pipeline(&cfg, false).unwrap();
    assert_eq!(first.ran, Stage::ALL.to_vec());
    let report = stage_dir(&cfg, Stage::Report);
    let svgs: Vec<_> = fs::read_dir(&report)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    assert_eq!(svgs.len(), 12, "{svgs:?}");
    assert!(report.join("index.html").is_file());

    // every intermediate names its own coordinates
    let responses =
        fs::read_to_string(stage_dir(&cfg, Stage::Spectra).join("responses.csv")).unwrap();
    assert!(responses.starts_with("obs_id,freq_hz,phase,value"));
    let draws = fs::read_to_string(stage_dir(&cfg, Stage::Fit).join("draws.csv")).unwrap();
    assert!(draws.starts_with("chain,draw,"));
    assert_eq!(draws.lines().count(), 1 + 120);

    let summary = fs::read(stage_dir(&cfg, Stage::Refine).join("summary.csv")).unwrap();
    let draws_time = fs::metadata(stage_dir(&cfg, Stage::Fit).join("draws.csv"))
        .unwrap()
        .modified()
        .unwrap();

    // deleting only the plots reruns only the report
    fs::remove_dir_all(&report).unwrap();
    let resumed = run_pipeline(&cfg, false).unwrap();
    assert_eq!(resumed.ran, vec![Stage::Report]);
    assert_eq!(
        resumed.skipped,
        vec![Stage::Spectra, Stage::Fit, Stage::Refine]
    );
    assert_eq!(
        fs::metadata(stage_dir(&cfg, Stage::Fit).join("draws.csv"))
            .unwrap()
            .modified()
            .unwrap(),
        draws_time
    );
    assert!(report.join("cell_j.svg").is_file());

    // nothing to do when everything is current
    assert_eq!(
        run_pipeline(&cfg, false).unwrap().skipped,
        Stage::ALL.to_vec()
    );

    // changing the refinement reruns refine and report only
    let mut finer = cfg.clone();
    finer.refine.freq_bins = 41;
    assert_eq!(
        run_pipeline(&finer, false).unwrap().ran,
        vec![Stage::Refine, Stage::Report]
    );

    // a fresh run with the same seed reproduces the summary byte for byte
    let again = small_config(&data, &tmp.path().join("again"));
    run_pipeline(&again, false).unwrap();
    assert_eq!(
        fs::read(stage_dir(&again, Stage::Refine).join("summary.csv")).unwrap(),
        summary
    );
}

#[test]
fn cli_failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "recordings = 'missing'\nmetadata = 'missing.csv'\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wavegp"))
        .args(["run", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[spectra]"), "{err}");

    fs::write(
        &cfg,
        "recordings = 'r'\nmetadata = 'm.csv'\n[spectra]\nbins_1d = 2\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wavegp"))
        .args(["fit", "-c"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 4"));
}

#[test]
fn cli_simulate_writes_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("synth.toml");
    fs::write(&spec, "subjects = 2\nduration_s = 60.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wavegp"))
        .args(["simulate", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(tmp.path().join("d"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read_dir(tmp.path().join("d/recordings"))
            .unwrap()
            .count(),
        8
    );
    let meta = fs::read_to_string(tmp.path().join("d/metadata.csv")).unwrap();
    assert!(meta.starts_with("obs_id,subj,reg,meal,fs,spacing,nchan"));
}
