mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use promptflow::backend::BackendError;
use promptflow::config::OptimizerKind;
use promptflow::engine::{initial_matrix, train, EngineError};
use promptflow::report::StopReason;
use promptflow_core::matrix::{SelectionMode, TransitionMatrix};
use promptflow_core::rng::seeded;
use promptflow_core::{Candidate, ExperienceStore, OperatorId, TaskKind};

fn counting_refine(calls: Arc<AtomicUsize>) -> impl Fn(&str) -> Result<String, BackendError> + Send + Sync {
    move |text| {
        if is_refine(text) {
            let n = calls.fetch_add(1, Ordering::SeqCst);
            Ok(body_response(&format!("variant {n}")))
        } else {
            Ok("{}".into())
        }
    }
}

fn four_sections() -> promptflow_core::MetaPrompt {
    template(&[("task_description", "Classify."), ("label:A", "A: apples."), ("label:B", "B: boats."), ("notes", "Be brief.")])
}

#[test]
fn beam_builds_one_candidate_per_variant() {
    let calls = Arc::new(AtomicUsize::new(0));
    let backend = environment(|_, i| i % 3 != 0, counting_refine(Arc::clone(&calls)));
    let mut cfg = config(1);
    cfg.beam_init = 6;
    cfg.operators = vec![OperatorId::Cot];
    let out = train(&cfg, &datasets(6, 2), four_sections(), &backend, None).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 24);
    assert_eq!(out.report.initial_pool_size, 6);
}

#[test]
fn identical_variants_collapse_to_one_candidate() {
    let backend = environment(
        |_, _| true,
        |text| match refine_body(text) {
            Some(body) if is_refine(text) => Ok(body_response(&body)),
            _ => Ok("{}".into()),
        },
    );
    let mut cfg = config(1);
    cfg.beam_init = 6;
    cfg.operators = vec![OperatorId::Cot];
    let out = train(&cfg, &datasets(6, 2), four_sections(), &backend, None).unwrap();
    assert_eq!(out.report.initial_pool_size, 1);
}

#[test]
fn beam_of_one_is_the_template() {
    let calls = Arc::new(AtomicUsize::new(0));
    let backend = environment(|_, _| false, counting_refine(Arc::clone(&calls)));
    let mut cfg = config(1);
    cfg.operators = vec![OperatorId::Cot];
    let t = four_sections();
    let out = train(&cfg, &datasets(6, 2), t.clone(), &backend, None).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    assert_eq!(out.report.initial_pool_size, 1);
    assert_eq!(out.report.iterations[0].base_fingerprint, t.fingerprint());
}

/// Each refine of `label:A` appends one `+`, and every `+` in the prompt
/// turns one more example correct, up to `ceiling` correct examples.
fn climbing(ceiling: usize) -> promptflow::backend::FnBackend {
    environment(
        move |text, i| i < (6 + text.matches('+').count()).min(ceiling),
        |text| match refine_body(text) {
            Some(body) => Ok(body_response(&format!("{body}+"))),
            None => Ok("{}".into()),
        },
    )
}

#[test]
fn score_climbs_to_the_ceiling_then_stops() {
    for optimizer in [OptimizerKind::Msgd, OptimizerKind::MsgdRl] {
        let mut cfg = config(10);
        cfg.optimizer = optimizer;
        cfg.operators = vec![OperatorId::Refine];
        let t = template(&[("label:A", "A: apples")]);
        let out = train(&cfg, &datasets(10, 2), t, &climbing(10), None).unwrap();
        let best: Vec<f64> = out.report.iterations.iter().map(|i| i.best).collect();
        let want = [0.7, 0.8, 0.9, 1.0];
        assert_eq!(best.len(), want.len(), "{best:?}");
        for (b, w) in best.iter().zip(want) {
            assert!((b - w).abs() < 1e-12, "{best:?}");
        }
        assert_eq!(out.report.stop_reason, StopReason::PerfectScore);
        assert_eq!(out.best.prompt.section_by_name("label:A").unwrap().body, "A: apples++++");
    }
}

#[test]
fn plateau_triggers_convergence() {
    let mut cfg = config(10);
    cfg.convergence_patience = 3;
    cfg.operators = vec![OperatorId::Refine];
    let out = train(&cfg, &datasets(10, 2), template(&[("label:A", "A")]), &climbing(9), None).unwrap();
    let best: Vec<f64> = out.report.iterations.iter().map(|i| (i.best * 10.0).round() / 10.0).collect();
    assert_eq!(best, [0.7, 0.8, 0.9, 0.9, 0.9, 0.9]);
    assert_eq!(out.report.stop_reason, StopReason::Converged);
}

#[test]
fn single_iteration_has_one_update_and_a_test_point() {
    let mut cfg = config(1);
    cfg.operators = vec![OperatorId::Refine];
    let out = train(&cfg, &datasets(10, 4), template(&[("label:A", "A")]), &climbing(10), None).unwrap();
    assert_eq!(out.report.iterations.len(), 1);
    assert_eq!(out.report.iterations[0].edits.len(), 1);
    let test = out.report.test.expect("test slice evaluated");
    assert_eq!(test.objective, 0.0);
    assert!((out.report.best_train - 0.7).abs() < 1e-12);
}

#[test]
fn oracle_finishes_after_one_iteration() {
    for optimizer in [OptimizerKind::Msgd, OptimizerKind::MsgdRl] {
        let mut cfg = config(10);
        cfg.optimizer = optimizer;
        cfg.beam_init = 3;
        let backend = environment(|_, _| true, |_| Ok(body_response("same")));
        let out = train(&cfg, &datasets(8, 2), four_sections(), &backend, None).unwrap();
        assert_eq!(out.report.iterations.len(), 1);
        assert_eq!(out.report.best_train, 1.0);
        assert_eq!(out.report.stop_reason, StopReason::PerfectScore);
    }
}

#[test]
fn failed_iteration_keeps_earlier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let backend = environment(
        |text, i| i < 6 + text.matches('+').count(),
        |text| match refine_body(text) {
            Some(body) if body.contains("++") => Err(BackendError::Other("provider went away".into())),
            Some(body) => Ok(body_response(&format!("{body}+"))),
            None => Ok("{}".into()),
        },
    );
    let mut cfg = config(10);
    cfg.operators = vec![OperatorId::Refine];
    let err = train(&cfg, &datasets(10, 2), template(&[("label:A", "A")]), &backend, Some(dir.path()))
        .err()
        .expect("third edit fails");
    assert!(matches!(err, EngineError::Backend(BackendError::Other(_))), "{err}");
    let run = dir.path().join(cfg.run_id());
    assert!(run.join("iter_002/report.json").is_file());
    assert!(!run.join("iter_003").exists());
    assert!(!run.join("report.json").exists());
}

fn lineage_is_valid(c: &Candidate, last_iteration: u32, ops: &[OperatorId]) -> bool {
    c.lineage.iter().all(|e| {
        e.iteration >= 1
            && e.iteration <= last_iteration
            && ops.contains(&e.operator)
            && c.prompt.section(&e.section).is_some_and(|s| s.editable)
    })
}

#[test]
fn lineage_references_past_iterations_and_real_cells() {
    let dir = tempfile::tempdir().unwrap();
    let backend = environment(
        |text, i| (i + text.len()) % 3 != 0,
        |text| Ok(body_response(&format!("edit {}", text.len() % 7))),
    );
    let mut cfg = config(5);
    cfg.beam_init = 2;
    cfg.seed = 3;
    let out = train(&cfg, &datasets(9, 3), four_sections(), &backend, Some(dir.path())).unwrap();
    let run = out.run_dir.unwrap();
    for it in 1..=out.report.iterations.len() as u32 {
        let text = std::fs::read_to_string(run.join(format!("iter_{it:03}/candidates.json"))).unwrap();
        let pool: Vec<Candidate> = serde_json::from_str(&text).unwrap();
        assert!(pool.iter().all(|c| lineage_is_valid(c, it, &cfg.operators)));
    }
}

fn init_table() -> TransitionMatrix {
    TransitionMatrix::from_values(
        ["Address", "Book", "Name", "Company"].map(String::from).to_vec(),
        vec![OperatorId::DefineSort, OperatorId::Refine, OperatorId::Reflect, OperatorId::Cot],
        vec![
            vec![0.0647, 0.0625, 0.0625, 0.0625],
            vec![0.0605, 0.0605, 0.0820, 0.0625],
            vec![0.0610, 0.0625, 0.0625, 0.0440],
            vec![0.0625, 0.0550, 0.0625, 0.0625],
        ],
    )
    .unwrap()
}

#[test]
fn experience_prior_biases_first_epoch_selection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    let store = ExperienceStore::from_matrix(&init_table(), TaskKind::Ner, 4, "t0".into(), "t1".into());
    std::fs::write(&path, store.to_json()).unwrap();
    let mut cfg = config(1);
    cfg.experience_in = Some(path);
    cfg.operators = init_table().operators().to_vec();
    let t = template(&[("Address", "a"), ("Book", "b"), ("Name", "n"), ("Company", "c")]);
    let (m, prior) = initial_matrix(&cfg, &t).unwrap();
    assert_eq!(prior.unwrap().epochs_trained, 4);
    assert_eq!(m.values(), init_table().values());

    let mut rng = seeded(2024);
    let (mut book_reflect, mut name_cot) = (0u32, 0u32);
    for _ in 0..10_000 {
        let p = &m.select_pairs(1, SelectionMode::ValueProportional, &mut rng).unwrap()[0];
        match (p.section.as_str(), p.operator) {
            ("Book", OperatorId::Reflect) => book_reflect += 1,
            ("Name", OperatorId::Cot) => name_cot += 1,
            _ => {}
        }
    }
    let ratio = book_reflect as f64 / name_cot as f64;
    let expected = 0.0820 / 0.0440;
    assert!((ratio / expected - 1.0).abs() < 0.10, "ratio {ratio}, expected {expected}");
}

#[test]
fn warm_start_accumulates_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(2);
    cfg.operators = vec![OperatorId::Refine, OperatorId::Cot];
    cfg.experience_out = Some(dir.path().join("first.json"));
    let t = template(&[("label:A", "A")]);
    train(&cfg, &datasets(10, 2), t.clone(), &climbing(10), None).unwrap();
    cfg.experience_in = cfg.experience_out.take();
    let second = train(&cfg, &datasets(10, 2), t, &climbing(10), None).unwrap();
    assert_eq!(second.experience.epochs_trained, 4);
    let first = ExperienceStore::parse(&std::fs::read_to_string(dir.path().join("first.json")).unwrap()).unwrap();
    assert_eq!(second.experience.created_at, first.created_at);
}
