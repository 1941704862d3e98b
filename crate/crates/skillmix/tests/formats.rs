mod common;

use std::collections::BTreeSet;
use std::path::Path;

use skillmix::analysis::extract_routing;
use skillmix::checkpoint::{Checkpoint, RngState};
use skillmix::config::RunConfig;
use skillmix::error::AppError;
use skillmix::experiment::{generate_dataset, prepare_model, Dataset};
use skillmix::io::{parse_jsonl, parse_vocab, to_jsonl};
use skillmix_core::corpus::Vocabulary;
use skillmix_core::Model;

fn tiny() -> RunConfig {
    RunConfig::from_toml(common::TINY_TOML, Path::new("tiny.toml")).unwrap()
}

fn inputs(v: &[skillmix_core::corpus::SkillInstance]) -> BTreeSet<&str> {
    v.iter().map(|i| i.input.as_str()).collect()
}

#[test]
fn splits_do_not_leak() {
    let data = generate_dataset(&tiny()).unwrap();
    let held = inputs(&data.pretrain_held);
    assert_eq!(held.len(), data.pretrain_held.len());
    assert!(data.pretrain_train.iter().all(|i| !held.contains(i.input.as_str())));
    for (name, t) in &data.tasks {
        let test = inputs(&t.test);
        assert_eq!(test.len(), t.test.len(), "{name}");
        assert!(t.train.iter().all(|i| !test.contains(i.input.as_str())), "{name}");
        assert_eq!(t.few_shot, t.train[..t.few_shot.len()]);
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let data = generate_dataset(&tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    assert_eq!(Dataset::read(dir.path()).unwrap(), data);
    assert_eq!(parse_jsonl(&to_jsonl(&data.pretrain_held), Path::new("x")).unwrap(), data.pretrain_held);
}

#[test]
fn jsonl_errors_carry_line_numbers() {
    let good = r#"{"input":"a b","target":"c","skill":"qa","task":""}"#;
    for (text, line) in [
        (format!("{good}\n{good}\nnot json\n"), 3),
        (format!("{good}\n\n{}\n", r#"{"input":"a","target":"b","skill":"juggling"}"#), 3),
        (format!("{}\n", r#"{"input":"a"}"#), 1),
    ] {
        match parse_jsonl(&text, Path::new("f.jsonl")) {
            Err(AppError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
    assert_eq!(parse_jsonl(&format!("{good}\n\n"), Path::new("f")).unwrap().len(), 1);
}

#[test]
fn vocab_file_rejects_bad_tokens() {
    assert!(matches!(parse_vocab("a\nb c\n", Path::new("v")), Err(AppError::Parse { line: 2, .. })));
    assert!(matches!(parse_vocab("a\na\n", Path::new("v")), Err(AppError::Format { .. })));
    assert_eq!(parse_vocab("a\nb\n", Path::new("v")).unwrap().len(), 7);
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let cfg = tiny();
    let data = generate_dataset(&cfg).unwrap();
    let model = prepare_model(&cfg, &data.vocab, None).unwrap();
    let ckpt = Checkpoint::from_model(&model, &data.vocab, 0, RngState { seed: 5, word_pos: "0".into() });
    let bytes = ckpt.to_bytes();
    let p = Path::new("c.bin");
    assert_eq!(Checkpoint::from_bytes(&bytes, p).unwrap().to_bytes(), bytes);
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    let mut trailing = bytes.clone();
    trailing.push(0);
    for b in [&bad_magic[..], &bytes[..bytes.len() - 3], &trailing[..]] {
        let err = Checkpoint::from_bytes(b, p).unwrap_err();
        assert_eq!(err.kind(), "format", "{err}");
    }
    // shape mismatches fail even when extra arrays are tolerated
    let mut other = tiny();
    other.model.d_model = 8;
    other.model.router_hidden = 8;
    let mut small = prepare_model(&other, &data.vocab, None).unwrap();
    assert!(ckpt.restore_into(&mut small, false).is_err());
}

#[test]
fn routing_profile_is_uniform_at_init_and_checks_vocab() {
    let cfg = tiny();
    let data = generate_dataset(&cfg).unwrap();
    let model: Model = prepare_model(&cfg, &data.vocab, None).unwrap();
    let p = extract_routing(&model, &data.vocab, "held", &data.pretrain_held, 7).unwrap();
    let n = model.config.n_skills;
    assert_eq!(p.traces.len(), data.pretrain_held.len());
    for row in &p.mean_weights {
        for &w in row {
            assert!((w - 1.0 / n as f64).abs() < 1e-12);
        }
    }
    // ties go to the lowest indices
    assert!(p.traces.iter().all(|t| t.iter().all(|a| a == &vec![0, 1])));
    let wrong = Vocabulary::from_tokens(["a"]);
    let err = extract_routing(&model, &wrong, "held", &data.pretrain_held, 7).unwrap_err();
    assert_eq!(err.kind(), "validation");
    assert_eq!(extract_routing(&model, &data.vocab, "x", &[], 7).unwrap_err().kind(), "usage");
}
