use std::path::PathBuf;
use std::sync::Arc;

use juvenotes_core::clock::SystemClock;
use juvenotes_core::domain::{PaperMeta, QuestionState, Role, UserId};
use juvenotes_core::engagement::FlagOutcome;
use juvenotes_core::ocr::{content_type_for, FixtureOcrProvider};
use juvenotes_core::pipeline::{JobState, Pipeline, PipelineConfig};
use juvenotes_core::progress::ProgressHub;
use juvenotes_core::store::{check_integrity, QuestionFilter, SeedFile, Store};
use juvenotes_core::synthesis::LocalSynthesisProvider;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn seeded() -> Arc<Store> {
    let seed: SeedFile = serde_json::from_str(&std::fs::read_to_string(fixtures().join("seed.json")).unwrap()).unwrap();
    let store = Store::in_memory(Arc::new(SystemClock)).unwrap();
    store.seed(&seed).unwrap();
    Arc::new(store)
}

fn pipeline(store: &Arc<Store>, review_first: bool) -> Pipeline {
    Pipeline::new(
        Arc::clone(store),
        Arc::new(FixtureOcrProvider::new(fixtures().join("layouts"), Arc::clone(store.clock()))),
        Arc::new(LocalSynthesisProvider),
        Arc::new(ProgressHub::new()),
        PipelineConfig {
            review_first,
            workers: 1,
            prompt_path: Some(fixtures().join("../prompts/system.txt")),
            ..PipelineConfig::default()
        },
    )
}

fn run(p: &Pipeline, file: &str) -> juvenotes_core::pipeline::JobResult {
    let store = p.store();
    let bytes = std::fs::read(fixtures().join(file)).unwrap();
    let doc = store.put_document(file, content_type_for(file), &bytes).unwrap();
    let course = store.course_by_code("PHA301").unwrap().id;
    let meta = PaperMeta { title: format!("{file} paper"), year: 2023 };
    let job = p.submit_job(&doc.id, &course, &meta).unwrap();
    assert_eq!(p.run_job(&job).unwrap(), JobState::Done);
    p.job(&job).unwrap().result.unwrap()
}

#[test]
fn fixture_paper_becomes_a_published_bank() {
    let store = seeded();
    let result = run(&pipeline(&store, false), "paper_A.pdf");
    assert_eq!(result.accepted_count, 22);

    let filter = QuestionFilter { paper: Some(result.past_paper_id.clone()), page: 1, page_size: 100, ..Default::default() };
    let page = store.query_questions(&filter, Role::Student).unwrap();
    assert_eq!(page.items.len(), 22);
    assert!(page.items.iter().all(|q| q.state == QuestionState::Published));
    assert!(check_integrity(&store).unwrap().is_empty());
}

#[test]
fn review_first_hides_drafts_until_published() {
    let store = seeded();
    let result = run(&pipeline(&store, true), "paper_B.pdf");
    let filter = QuestionFilter { paper: Some(result.past_paper_id), page: 1, page_size: 100, ..Default::default() };
    assert!(store.query_questions(&filter, Role::Student).unwrap().items.is_empty());

    let drafts = store.query_questions(&filter, Role::Faculty).unwrap().items;
    assert_eq!(drafts.len(), 5);
    store.publish_question(&UserId::from("user-faculty"), &drafts[0].id).unwrap();
    assert_eq!(store.query_questions(&filter, Role::Student).unwrap().items.len(), 1);
}

#[test]
fn export_import_round_trip_is_byte_identical() {
    let source = seeded();
    let result = run(&pipeline(&source, false), "paper_D.pdf");
    let exported = source.export_bank(&result.past_paper_id).unwrap();

    let target = seeded();
    let course = target.course_by_code("PHA301").unwrap().id;
    let imported = target.import_bank(exported.as_bytes(), &course).unwrap();
    assert_eq!(imported.inserted, result.accepted_count as usize);
    assert_eq!(target.export_bank(&imported.past_paper_id).unwrap(), exported);

    // a second import adds nothing
    let again = target.import_bank(exported.as_bytes(), &course).unwrap();
    assert_eq!((again.inserted, again.skipped), (0, imported.inserted));
}

#[test]
fn pull_reflects_retirement() {
    let store = seeded();
    run(&pipeline(&store, false), "paper_B.pdf");
    let first = store.sync_pull(None).unwrap();
    assert_eq!(first.upserted_questions.len(), 5);

    let victim = first.upserted_questions[0].id.clone();
    let faculty = UserId::from("user-faculty");
    let flag = store.flag_question(&faculty, &victim, "wrong key").unwrap();
    store.resolve_flag(&faculty, &flag.id, FlagOutcome::Retire).unwrap();

    let next = store.sync_pull(Some(&first.cursor)).unwrap();
    assert!(next.retired_question_ids.contains(&victim));
    assert!(next.upserted_questions.iter().all(|q| q.id != victim));
}
