//! Staged pipeline: caching, selective reruns, determinism and ANCE rounds.

use std::fs;
use std::path::Path;

use qr_core::ance::read_hard_negatives;
use qr_core::application::{run_pipeline, PipelineConfig, Stage, Workspace};
use qr_core::synthgen::SynthConfig;
use qr_core::training::TrainConfig;

fn small_config() -> PipelineConfig {
    let quick = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let mut config = PipelineConfig {
        synth: SynthConfig {
            n_intents: 12,
            queries_per_intent: 15,
            n_heads: 4,
            n_modifiers: 4,
            purchases_per_intent: 400,
            n_audit_pairs: 60,
            ..SynthConfig::default()
        },
        retriever: quick.clone(),
        reranker: quick.clone(),
        circle: quick,
        ..PipelineConfig::default()
    };
    config.corpus.n_test_queries = 20;
    config.ance.epochs_per_round = 1;
    config.ance.top_k = 20;
    config.application.top_k = 20;
    config
}

fn report_bytes(dir: &Path) -> Vec<u8> {
    fs::read(dir.join("report.tsv")).unwrap()
}

#[test]
fn reruns_skip_and_deleted_outputs_rebuild_only_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let first = run_pipeline(&config, dir.path()).unwrap();
    assert_eq!(first.ran, Stage::ALL.to_vec());
    assert!(first.skipped.is_empty());
    let report = report_bytes(dir.path());

    let second = run_pipeline(&config, dir.path()).unwrap();
    assert!(second.ran.is_empty(), "reran {:?}", second.ran);
    assert_eq!(report_bytes(dir.path()), report);

    let ws = Workspace::new(dir.path(), &config);
    fs::remove_file(ws.index()).unwrap();
    let third = run_pipeline(&config, dir.path()).unwrap();
    assert_eq!(third.ran, vec![Stage::Index]);
    assert_eq!(report_bytes(dir.path()), report);

    // A re-ranker setting invalidates the re-ranker and everything downstream of it.
    let mut changed = config.clone();
    changed.circle.learning_rate = 2e-3;
    let fourth = run_pipeline(&changed, dir.path()).unwrap();
    assert!(fourth.ran.contains(&Stage::TrainReranker));
    for upstream in [Stage::Synth, Stage::Ingest, Stage::Normalize, Stage::Mine, Stage::TrainRetriever, Stage::Ance] {
        assert!(!fourth.ran.contains(&upstream), "{upstream:?} reran");
    }
}

#[test]
fn identical_configs_give_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = small_config();
    run_pipeline(&config, a.path()).unwrap();
    run_pipeline(&config, b.path()).unwrap();
    assert_eq!(report_bytes(a.path()), report_bytes(b.path()));

    // Every ANCE round mines with a different checkpoint and finds a different set.
    let ws = Workspace::new(a.path(), &config);
    let rounds: Vec<_> = (1..=config.ance.rounds)
        .map(|r| read_hard_negatives(&ws.hard_negatives(r)).unwrap())
        .collect();
    for pair in rounds.windows(2) {
        assert_ne!(pair[0], pair[1]);
        assert_ne!(pair[0][0].provenance, pair[1][0].provenance);
    }
}
