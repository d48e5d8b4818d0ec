//! End-to-end pipeline behavior: staged execution, prerequisite gating,
//! lenient ingest, and the command-line interface.

#![allow(clippy::needless_range_loop)]

use std::process::Command;

use chrono::NaiveDate;
use segmob::config::RunConfig;
use segmob::error::Error;
use segmob::pipeline::{emit_plots, Manifest, Pipeline};
use segmob::synth::{generate_city, SynthSpec};

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn small_city(dir: &std::path::Path) -> segmob::synth::CityFiles {
    let spec = SynthSpec {
        n_users: 120,
        n_regions: 50,
        n_classes: 10,
        mixing: vec![(date(2020, 1, 1), 0.5), (date(2020, 1, 16), 0.8)],
        visits_per_day: 1.0,
        home_fidelity: 0.95,
        start: date(2020, 1, 1),
        n_days: 30,
        seed: 31,
    };
    generate_city(&spec, dir).unwrap()
}

#[test]
fn full_run_produces_expected_outputs() {
    let city = tempfile::tempdir().unwrap();
    let files = small_city(city.path());
    let out = tempfile::tempdir().unwrap();
    let config = RunConfig::load(&files.config).unwrap();
    assert_eq!(config.periods.len(), 2);
    assert_eq!(config.periods[0].label, "BL");
    let pipeline = Pipeline::new(config, out.path()).unwrap();
    pipeline.run_all().unwrap();

    for path in [
        "manifest.json",
        "ingest/regions.json",
        "ingest/stringency.csv",
        "infer/homes.csv",
        "infer/stays.csv",
        "label/visits.csv",
        "label/user_classes.csv",
        "label/place_classes.csv",
        "matrices/M_BL.csv",
        "matrices/M_L1.csv",
        "matrices/S_BL_L1.csv",
        "matrices/assortativity.json",
        "matrices/residual_isolation.json",
        "matrices/series.csv",
        "entropy/user_entropy.csv",
        "entropy/summary.json",
        "entropy/series.csv",
        "stats/regression_assortativity.json",
        "stats/ratios.json",
        "stats/kruskal_wallis.json",
    ] {
        assert!(out.path().join(path).is_file(), "missing {path}");
    }

    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        manifest.completed,
        vec!["ingest", "infer", "label", "matrices", "entropy", "stats"]
    );
    assert_eq!(manifest.inputs.len(), 3);
    assert!(manifest.stages["label"].rows["visits"] > 0);

    // every active column of every stratification matrix is a distribution
    for label in ["BL", "L1"] {
        let text =
            std::fs::read_to_string(out.path().join(format!("matrices/M_{label}.csv"))).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 10);
        for i in 0..10 {
            let sum: f64 = (0..10).map(|j| rows[j][i]).sum();
            assert!(sum.abs() < 1e-12 || (sum - 1.0).abs() < 1e-12, "col {i} = {sum}");
        }
    }

    emit_plots(out.path()).unwrap();
    assert!(out.path().join("plots/matrix_heatmaps.csv").is_file());
}

#[test]
fn single_stage_rerun_is_stable_and_gated() {
    let city = tempfile::tempdir().unwrap();
    let files = small_city(city.path());
    let out = tempfile::tempdir().unwrap();
    let config = RunConfig::load(&files.config).unwrap();
    let pipeline = Pipeline::new(config, out.path()).unwrap();

    // stats without any prior stage names its first missing prerequisite
    match pipeline.run_stage("stats") {
        Err(Error::MissingPrerequisite { stage, prerequisite }) => {
            assert_eq!(stage, "stats");
            assert_eq!(prerequisite, "matrices");
        }
        other => panic!("unexpected: {other:?}"),
    }

    pipeline.run_all().unwrap();
    let before = std::fs::read(out.path().join("matrices/M_BL.csv")).unwrap();
    pipeline.run_stage("matrices").unwrap();
    let after = std::fs::read(out.path().join("matrices/M_BL.csv")).unwrap();
    assert_eq!(before, after, "re-running a stage changed its output");
}

#[test]
fn strict_ingest_rejects_malformed_rows_lenient_counts_them() {
    let city = tempfile::tempdir().unwrap();
    let files = small_city(city.path());
    let mut csv = std::fs::read_to_string(&files.trajectories).unwrap();
    csv.push_str("u000001,not_a_number,0.005,100,200\n");
    std::fs::write(&files.trajectories, csv).unwrap();

    let strict = RunConfig::load(&files.config).unwrap();
    let out1 = tempfile::tempdir().unwrap();
    let err = Pipeline::new(strict, out1.path())
        .unwrap()
        .run_stage("ingest")
        .unwrap_err();
    assert!(err.to_string().contains("ingest"), "got: {err}");

    let mut lenient = RunConfig::load(&files.config).unwrap();
    lenient.lenient = true;
    let out2 = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(lenient, out2.path()).unwrap();
    pipeline.run_stage("ingest").unwrap();
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(out2.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.stages["ingest"].rows["rejected_rows"], 1);
}

#[test]
fn cli_synth_run_plots_breakpoints() {
    let bin = env!("CARGO_BIN_EXE_segmob");
    let city = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();

    let synth = Command::new(bin)
        .args([
            "synth",
            "--out",
            city.path().to_str().unwrap(),
            "--users",
            "80",
            "--regions",
            "50",
            "--days",
            "30",
            "--visits-per-day",
            "1.0",
            "--baseline-p",
            "0.5",
            "--shift",
            "2020-01-16=0.8",
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));

    let run = Command::new(bin)
        .args([
            "run",
            "--config",
            city.path().join("config.txt").to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
            "--threads",
            "2",
        ])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.path().join("stats/kruskal_wallis.json").is_file());

    let plots = Command::new(bin)
        .args(["emit-plots", "--out", out.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(plots.status.success(), "{}", String::from_utf8_lossy(&plots.stderr));
    assert!(out.path().join("plots/kruskal_table.csv").is_file());

    // the planted mixing shift shows up as a stringency jump on its date
    let bp = Command::new(bin)
        .args([
            "suggest-breakpoints",
            "--stringency",
            city.path().join("stringency.csv").to_str().unwrap(),
            "--min-jump",
            "0.9",
        ])
        .output()
        .unwrap();
    assert!(bp.status.success());
    let stdout = String::from_utf8_lossy(&bp.stdout);
    assert!(stdout.lines().any(|l| l.trim() == "2020-01-16"), "{stdout}");

    // single-stage invocation on a fresh directory reports the prerequisite
    let fresh = tempfile::tempdir().unwrap();
    let gated = Command::new(bin)
        .args([
            "run",
            "--config",
            city.path().join("config.txt").to_str().unwrap(),
            "--out",
            fresh.path().to_str().unwrap(),
            "--stage",
            "label",
        ])
        .output()
        .unwrap();
    assert!(!gated.status.success());
    let stderr = String::from_utf8_lossy(&gated.stderr);
    assert!(stderr.contains("missing prerequisite"), "{stderr}");
}

#[test]
fn stage_resumption_matches_full_run() {
    let city = tempfile::tempdir().unwrap();
    let files = small_city(city.path());
    let config = RunConfig::load(&files.config).unwrap();

    let full = tempfile::tempdir().unwrap();
    Pipeline::new(config.clone(), full.path())
        .unwrap()
        .run_all()
        .unwrap();

    let staged = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(config, staged.path()).unwrap();
    for stage in ["ingest", "infer", "label", "matrices", "entropy", "stats"] {
        pipeline.run_stage(stage).unwrap();
    }
    for rel in [
        "label/visits.csv",
        "matrices/series.csv",
        "entropy/summary.json",
        "stats/kruskal_wallis.json",
    ] {
        assert_eq!(
            std::fs::read(full.path().join(rel)).unwrap(),
            std::fs::read(staged.path().join(rel)).unwrap(),
            "{rel} differs between full and staged runs"
        );
    }
}
