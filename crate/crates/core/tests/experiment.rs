use std::fs;
use std::path::Path;

use zeronorm_core::corpus::CorpusConfig;
use zeronorm_core::experiment::{
    default_rows, run_matrix, AnalysisConfig, ExperimentSpec, RunOptions,
};
use zeronorm_core::model::ModelConfig;
use zeronorm_core::probes::{DirectionClass, LabelKind};
use zeronorm_core::report::read_report;
use zeronorm_core::training::TrainConfig;

fn tiny_spec(out: &Path) -> ExperimentSpec {
    ExperimentSpec {
        rows: default_rows()[..4].to_vec(),
        seeds: vec![1, 2],
        corpus: CorpusConfig {
            seed: 3,
            languages: 3,
            concepts: 16,
            train_pairs_per_direction: 20,
            valid_per_direction: 6,
            test_per_direction: 12,
            min_len: 3,
            max_len: 5,
        },
        model: ModelConfig {
            encoder_layers: 2,
            decoder_layers: 1,
            d_model: 16,
            heads: 2,
            d_ffn: 32,
            ..Default::default()
        },
        training: TrainConfig {
            epochs: 1,
            max_tokens: 128,
            lr: 1e-3,
            warmup: 10,
            seed: 1,
        },
        decode: Default::default(),
        probe: Default::default(),
        analysis: AnalysisConfig {
            svcca_sentences: 12,
            bootstrap_resamples: 200,
            ..Default::default()
        },
        out: out.to_path_buf(),
    }
}

const CSVS: [&str; 6] = [
    "summary.csv",
    "cells.csv",
    "directions.csv",
    "llr.csv",
    "svcca.csv",
    "significance.csv",
];

#[test]
fn matrix_runs_resumes_and_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let spec = tiny_spec(a.path());
    let run = run_matrix(
        &spec,
        RunOptions {
            jobs: 2,
            progress: None,
        },
    )
    .unwrap();
    assert!(!run.failed());
    assert_eq!((run.trained, run.cached), (8, 0));
    let report = &run.report;
    assert_eq!(report.cells.len(), 8);
    report.check_consistency().unwrap();
    let pivot = report.pivot.as_ref().expect("row #4 produces the pivot");
    assert_eq!(pivot.seeds, vec![1, 2]);
    // Zero-shot and supervised comparisons for the #1/#2 and #3/#4 pairs.
    assert_eq!(report.significance.len(), 4);
    for s in &report.significance {
        assert!((0.0..=1.0).contains(&s.p_row_better));
    }
    let llr = report.summaries[0].llr.as_ref().unwrap();
    let layers = spec.model.encoder_layers + spec.model.decoder_layers;
    assert_eq!(llr.len(), layers * 2 * 2);
    assert!(llr.iter().any(|r| r.layer == layers
        && r.kind == LabelKind::Target
        && r.split == DirectionClass::ZeroShot));
    assert_eq!(report.summaries[0].svcca.as_ref().unwrap().len(), 2);

    let table = fs::read_to_string(a.path().join("table.md")).unwrap();
    assert!(table.contains("| 0 | *Pivot*"));
    assert_eq!(
        table.lines().filter(|l| l.starts_with("| ")).count(),
        1 + 1 + 4
    );
    assert!(a.path().join("plots/llr_1_vs_2_zero_shot.svg").exists());
    assert_eq!(&read_report(&a.path().join("report.json")).unwrap(), report);

    let again = run_matrix(
        &spec,
        RunOptions {
            jobs: 1,
            progress: None,
        },
    )
    .unwrap();
    assert_eq!((again.trained, again.cached), (0, 8));

    let b = tempfile::tempdir().unwrap();
    run_matrix(
        &tiny_spec(b.path()),
        RunOptions {
            jobs: 1,
            progress: None,
        },
    )
    .unwrap();
    for name in CSVS {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
}

#[test]
fn stale_or_corrupt_cells_are_retrained() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(dir.path());
    spec.rows = default_rows()[..2].to_vec();
    spec.seeds = vec![1];
    spec.analysis = AnalysisConfig {
        llr: false,
        svcca: false,
        pivot_row: None,
        bootstrap_resamples: 100,
        ..Default::default()
    };
    run_matrix(&spec, RunOptions::default()).unwrap();
    let cell = spec.cell_dir(&spec.rows[0], 1).join("cell.json");
    let mut text = fs::read_to_string(&cell).unwrap();
    text.push(' ');
    fs::write(&cell, text).unwrap();
    let run = run_matrix(&spec, RunOptions::default()).unwrap();
    assert_eq!((run.trained, run.cached), (1, 1));

    spec.training.epochs = 2;
    let run = run_matrix(&spec, RunOptions::default()).unwrap();
    assert_eq!((run.trained, run.cached), (2, 0));
}

#[test]
fn a_failed_cell_does_not_stop_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(dir.path());
    spec.rows = default_rows()[..2].to_vec();
    spec.seeds = vec![1];
    spec.analysis.pivot_row = None;
    spec.analysis.llr = false;
    let blocked = spec.cell_dir(&spec.rows[1], 1);
    fs::create_dir_all(blocked.parent().unwrap()).unwrap();
    fs::write(&blocked, "not a directory").unwrap();
    let run = run_matrix(&spec, RunOptions::default()).unwrap();
    assert!(run.failed());
    assert_eq!(run.report.failures.len(), 1);
    assert_eq!(run.report.failures[0].row, "#2");
    assert_eq!(run.report.cells.len(), 1);
    let table = fs::read_to_string(dir.path().join("table.md")).unwrap();
    assert!(table.contains("failed"));
}
