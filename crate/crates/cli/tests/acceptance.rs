//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use serde_json::{json, Value};

use common::{fixture_paper, fixtures, manifest, repo, FixturePaper, Workspace};
use juvenotes_core::clock::{Clock, ManualClock, SystemClock};
use juvenotes_core::domain::{
    validate_question, ConceptId, CourseId, DraftQuestion, FlagId, Generator, McqChoice, PaperMeta, PastPaperId,
    Provenance, Question, QuestionBody, QuestionContent, QuestionId, QuestionKind, QuestionState, Role, SaqPart,
    UserId, MAX_CHOICES,
};
use juvenotes_core::engagement::{DateRange, FlagOutcome};
use juvenotes_core::ocr::{content_type_for, FixtureOcrProvider};
use juvenotes_core::pipeline::{JobState, Pipeline, PipelineConfig};
use juvenotes_core::progress::ProgressHub;
use juvenotes_core::store::{check_integrity, QuestionFilter, SeedFile, Store};
use juvenotes_core::synthesis::LocalSynthesisProvider;
use juvenotes_core::sync::{OpStatus, SyncOp, SyncOpKind};
use juvenotes_core::upload::protocol::{binary_frame, ClientMessage, ServerMessage, UploadConnection};
use juvenotes_core::upload::{sha256_hex, UploadConfig, UploadManager, MAX_CHUNK_SIZE, MIN_CHUNK_SIZE};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// in-process helpers

fn seed_value() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("seed.json")).unwrap()).unwrap()
}

fn seed_with_users(extra: &[String]) -> SeedFile {
    let mut v = seed_value();
    let users = v["users"].as_array_mut().unwrap();
    for id in extra {
        users.push(json!({"id": id, "role": "student", "institution_id": "inst-uon", "display_name": id}));
    }
    serde_json::from_value(v).unwrap()
}

fn memory_store(clock: Arc<dyn Clock>, seed: &SeedFile) -> Arc<Store> {
    let store = Store::in_memory(clock).unwrap();
    store.seed(seed).unwrap();
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
            prompt_path: Some(repo().join("prompts/system.txt")),
            ..PipelineConfig::default()
        },
    )
}

fn course_id(store: &Store, code: &str) -> CourseId {
    store.course_by_code(code).unwrap().id
}

/// Runs a fixture document through the pipeline and returns its paper id.
fn ingest(p: &Pipeline, paper: &FixturePaper) -> Result<PastPaperId, String> {
    let store = p.store();
    let bytes = std::fs::read(fixtures().join(&paper.file)).map_err(err)?;
    let doc = store.put_document(&paper.file, content_type_for(&paper.file), &bytes).map_err(err)?;
    let meta = PaperMeta { title: paper.title.clone(), year: paper.year };
    let job = p.submit_job(&doc.id, &course_id(store, &paper.course), &meta).map_err(err)?;
    ensure!(p.run_job(&job).map_err(err)? == JobState::Done, "{} did not finish", paper.file);
    let job = p.job(&job).map_err(err)?;
    Ok(job.result.ok_or("no result")?.past_paper_id)
}

/// Every question in the store, any state.
fn all_questions(store: &Store) -> Vec<Question> {
    let mut out = Vec::new();
    let mut page = 1;
    loop {
        let filter = QuestionFilter { page, page_size: 100, ..QuestionFilter::default() };
        let got = store.query_questions(&filter, Role::Admin).unwrap();
        let n = got.items.len();
        out.extend(got.items);
        if n < 100 {
            return out;
        }
        page += 1;
    }
}

fn student_visible(store: &Store) -> BTreeSet<QuestionId> {
    let mut out = BTreeSet::new();
    let mut page = 1;
    loop {
        let filter = QuestionFilter { page, page_size: 100, ..QuestionFilter::default() };
        let got = store.query_questions(&filter, Role::Student).unwrap();
        let n = got.items.len();
        out.extend(got.items.into_iter().map(|q| q.id));
        if n < 100 {
            return out;
        }
        page += 1;
    }
}

fn day(d: NaiveDate, secs: u32) -> DateTime<Utc> {
    Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).unwrap()) + chrono::Duration::seconds(secs as i64)
}

// ---------------------------------------------------------------------------
// criteria

fn pipeline_speed() -> Outcome {
    let ws = Workspace::new();
    ws.seed();
    let paper = fixture_paper("paper_A.pdf");
    let out = ws.path("a.json");
    let started = Instant::now();
    let summary = ws.process(&paper, Some(&out));
    let wall = started.elapsed();
    ensure!(wall < Duration::from_secs(60), "process took {wall:?}");
    ensure!(summary["accepted"] == 22, "accepted {}", summary["accepted"]);
    let bank: Value = serde_json::from_slice(&std::fs::read(&out).map_err(err)?).map_err(err)?;
    ensure!(bank["questions"].as_array().map(Vec::len) == Some(22), "exported bank is short");

    let store = Store::open_path(ws.db(), Arc::new(SystemClock)).map_err(err)?;
    let today = Utc::now().date_naive();
    let stats = store.processing_time_stats(&DateRange::new(today, today).map_err(err)?).map_err(err)?;
    let job = summary["job_id"].as_str().unwrap();
    let recorded = stats.jobs.iter().find(|j| j.job_id.as_str() == job).ok_or("job missing from processing stats")?;
    ensure!(recorded.seconds < 60.0, "stats report {}s", recorded.seconds);
    Ok(format!("wall {:.2}s, stats {:.3}s", wall.as_secs_f64(), recorded.seconds))
}

/// Order-independent signature of one accepted question.
fn signature_of_manifest(item: &Value) -> String {
    match item["kind"].as_str().unwrap() {
        "mcq" => format!("mcq/{}/{}", item["choices"], item["correct"]),
        _ => format!("saq/{}", item["marks"]),
    }
}

fn signature_of_bank(q: &Value) -> Result<String, String> {
    match q["kind"].as_str() {
        Some("mcq") => {
            let choices = q["choices"].as_array().ok_or("mcq without choices")?;
            let correct: Vec<usize> =
                choices.iter().enumerate().filter(|(_, c)| c["is_correct"] == true).map(|(i, _)| i).collect();
            ensure!(correct.len() == 1, "mcq with {} correct choices", correct.len());
            Ok(format!("mcq/{}/{}", choices.len(), correct[0]))
        }
        Some("saq") => {
            let marks: Vec<u64> =
                q["parts"].as_array().ok_or("saq without parts")?.iter().map(|p| p["marks"].as_u64().unwrap()).collect();
            Ok(format!("saq/{}", json!(marks)))
        }
        other => Err(format!("unknown kind {other:?}")),
    }
}

fn oracle_equivalence() -> Outcome {
    let ws = Workspace::new();
    ws.seed();
    let mut checked = 0;
    for paper in manifest().iter().filter(|p| p.file != "blank.pdf") {
        let out = ws.path(&format!("{}.json", paper.file));
        let summary = ws.process(paper, Some(&out));
        let expected = paper.entry["accepted"].as_array().unwrap();
        ensure!(summary["accepted"] == expected.len(), "{}: accepted {} != {}", paper.file, summary["accepted"], expected.len());

        let bank: Value = serde_json::from_slice(&std::fs::read(&out).map_err(err)?).map_err(err)?;
        let mut got: Vec<String> =
            bank["questions"].as_array().unwrap().iter().map(signature_of_bank).collect::<Result<_, _>>()?;
        let mut want: Vec<String> = expected.iter().map(signature_of_manifest).collect();
        got.sort();
        want.sort();
        ensure!(got == want, "{}: {got:?} != {want:?}", paper.file);

        let dropped: BTreeMap<String, u64> = serde_json::from_value(paper.entry["dropped"].clone()).map_err(err)?;
        let got_dropped: BTreeMap<String, u64> = serde_json::from_value(summary["dropped_reasons"].clone()).map_err(err)?;
        ensure!(got_dropped == dropped, "{}: dropped {got_dropped:?} != {dropped:?}", paper.file);
        let mut rejected: Vec<String> = serde_json::from_value(paper.entry["rejected"].clone()).map_err(err)?;
        let mut got_rejected: Vec<String> = serde_json::from_value(summary["rejected"].clone()).map_err(err)?;
        rejected.sort();
        got_rejected.sort();
        ensure!(got_rejected == rejected, "{}: rejected {got_rejected:?} != {rejected:?}", paper.file);
        checked += 1;
    }
    ensure!(checked == 5, "expected 5 exam papers, saw {checked}");
    Ok("5/5 papers match the labeled manifest".into())
}

fn analytics() -> Outcome {
    let start = NaiveDate::from_ymd_opt(2025, 3, 3).unwrap();
    let users: Vec<String> = (0..150).map(|i| format!("dau-{i:03}")).collect();
    let clock = Arc::new(ManualClock::new(day(start, 0)));
    let store = memory_store(clock.clone(), &seed_with_users(&users));
    let mut rng = StdRng::seed_from_u64(40);

    // baseline week averages 100 active users a day, the next week 140
    let baseline_counts = [95, 105, 100, 98, 102, 110, 90];
    let current_counts = [130, 150, 140, 135, 145, 142, 138];
    for (offset, count) in baseline_counts.iter().chain(current_counts.iter()).enumerate() {
        let d = start + chrono::Duration::days(offset as i64);
        let mut events: Vec<(u32, &String)> = Vec::new();
        for u in users.choose_multiple(&mut rng, *count) {
            for _ in 0..rng.gen_range(1..=3) {
                events.push((rng.gen_range(0..86_400), u));
            }
        }
        events.sort();
        for (secs, u) in events {
            clock.set(day(d, secs));
            store.record_study_activity(&UserId::from(u.as_str())).map_err(err)?;
        }
    }
    let baseline = DateRange::new(start, start + chrono::Duration::days(6)).map_err(err)?;
    let current = DateRange::new(start + chrono::Duration::days(7), start + chrono::Duration::days(13)).map_err(err)?;
    let report = store.daily_active_users(&current, Some(&baseline)).map_err(err)?;
    let change = report.percent_change.ok_or("no percent change")?;
    ensure!((change - 40.0).abs() <= 0.1, "DAU change {change}");

    // ten raters over two questions, nine with a mean of at least 4
    let raters: Vec<String> = (0..11).map(|i| format!("rater-{i:02}")).collect();
    let clock = Arc::new(ManualClock::new(day(start, 3600)));
    let store = memory_store(clock.clone(), &seed_with_users(&raters));
    let p = pipeline(&store, false);
    ingest(&p, &fixture_paper("paper_B.pdf"))?;
    let qs = all_questions(&store);
    let ratings: [(i64, i64); 10] = [(5, 5), (4, 4), (5, 3), (4, 5), (5, 4), (4, 4), (3, 5), (5, 5), (4, 4), (4, 3)];
    for (rater, (a, b)) in raters.iter().zip(ratings) {
        let u = UserId::from(rater.as_str());
        // an earlier rating that is later overwritten
        store.record_feedback(&u, &qs[0].id, 1, None).map_err(err)?;
        store.record_feedback(&u, &qs[0].id, a, None).map_err(err)?;
        store.record_feedback(&u, &qs[1].id, b, Some("ok")).map_err(err)?;
    }
    // a rater outside the range does not count
    clock.set(day(start + chrono::Duration::days(5), 0));
    store.record_feedback(&UserId::from(raters[10].as_str()), &qs[0].id, 1, None).map_err(err)?;
    let summary = store.satisfaction_summary(&DateRange::new(start, start).map_err(err)?).map_err(err)?;
    ensure!(summary.raters == 10, "{} raters", summary.raters);
    ensure!(summary.fraction_satisfied == 0.90, "satisfaction {}", summary.fraction_satisfied);

    // brute-force distinct counts on randomized logs
    for trial in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(1000 + trial);
        let n_users = rng.gen_range(1..=15);
        let ids: Vec<String> = (0..n_users).map(|i| format!("t{trial}-u{i}")).collect();
        let clock = Arc::new(ManualClock::new(day(start, 0)));
        let store = memory_store(clock.clone(), &seed_with_users(&ids));
        let mut events: Vec<(i64, usize)> =
            (0..rng.gen_range(0..120)).map(|_| (rng.gen_range(0..10 * 86_400), rng.gen_range(0..n_users))).collect();
        events.sort();
        for (secs, u) in &events {
            clock.set(day(start, 0) + chrono::Duration::seconds(*secs));
            store.record_study_activity(&UserId::from(ids[*u].as_str())).map_err(err)?;
        }
        let from = start + chrono::Duration::days(rng.gen_range(0..10));
        let to = from + chrono::Duration::days(rng.gen_range(0..(10 - (from - start).num_days())));
        let got = store.daily_active_users(&DateRange::new(from, to).map_err(err)?, None).map_err(err)?;

        let mut oracle: BTreeMap<NaiveDate, HashSet<usize>> = BTreeMap::new();
        let mut d = from;
        while d <= to {
            oracle.insert(d, HashSet::new());
            d = d.succ_opt().unwrap();
        }
        for (secs, u) in &events {
            let date = (day(start, 0) + chrono::Duration::seconds(*secs)).date_naive();
            if let Some(set) = oracle.get_mut(&date) {
                set.insert(*u);
            }
        }
        let want: Vec<(NaiveDate, u64)> = oracle.iter().map(|(d, s)| (*d, s.len() as u64)).collect();
        let have: Vec<(NaiveDate, u64)> = got.series.iter().map(|c| (c.date, c.dau)).collect();
        ensure!(have == want, "trial {trial}: {have:?} != {want:?}");
        let mean = want.iter().map(|(_, n)| *n as f64).sum::<f64>() / want.len() as f64;
        ensure!((got.mean - mean).abs() < 1e-9, "trial {trial}: mean {} != {mean}", got.mean);
    }
    Ok(format!("DAU {change:+.1}%, satisfaction {:.2}, 100/100 randomized logs", summary.fraction_satisfied))
}

fn upload_trial(trial: u64) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(7_000 + trial);
    let size = rng.gen_range(1024..=5 * 1024 * 1024);
    let mut bytes = vec![0u8; size];
    rng.fill_bytes(&mut bytes);
    let chunk = rng.gen_range(MIN_CHUNK_SIZE..=MAX_CHUNK_SIZE);

    let store = memory_store(Arc::new(SystemClock), &serde_json::from_value(seed_value()).unwrap());
    let manager = Arc::new(UploadManager::new(
        Arc::new(pipeline(&store, false)),
        UploadConfig::with_chunk_size(chunk).map_err(err)?,
    ));
    let mut percents: Vec<u8> = Vec::new();
    let mut received: Vec<u64> = Vec::new();
    let mut collect = |messages: Vec<ServerMessage>| -> Result<Vec<ServerMessage>, String> {
        for m in &messages {
            match m {
                ServerMessage::Progress { percent, .. } => percents.push(*percent),
                ServerMessage::Ack(a) if a.of == "upload.chunk" => received.push(a.received.unwrap()),
                ServerMessage::Error { code, message, .. } => return Err(format!("{code}: {message}")),
                _ => {}
            }
        }
        Ok(messages)
    };

    let mut conn = UploadConnection::new(Arc::clone(&manager), true);
    let init = ClientMessage::Init {
        filename: "trial.pdf".into(),
        size: size as u64,
        sha256: sha256_hex(&bytes),
        course_id: CourseId::from("course-pha301"),
        paper: PaperMeta { title: format!("Trial {trial}"), year: 2024 },
    };
    let reply = collect(conn.on_text(&serde_json::to_string(&init).unwrap()).messages)?;
    let Some(ServerMessage::Ack(ack)) = reply.first() else { return Err("no init ack".into()) };
    let session = ack.session_id.clone();
    let total = ack.total_chunks.unwrap() as usize;

    let deliver = |conn: &mut UploadConnection, i: usize| -> Vec<ServerMessage> {
        let payload = &bytes[i * chunk as usize..((i + 1) * chunk as usize).min(size)];
        let head =
            ClientMessage::Chunk { session_id: session.clone(), index: i as i64, sha256: sha256_hex(payload), data: None };
        let mut out = conn.on_text(&serde_json::to_string(&head).unwrap()).messages;
        out.extend(conn.on_binary(&binary_frame(i as u32, payload)).messages);
        out
    };
    let with_duplicates = |rng: &mut StdRng, indices: &[usize]| -> Vec<usize> {
        let mut order = indices.to_vec();
        for _ in 0..rng.gen_range(0..=indices.len().min(8)) {
            order.push(rng.gen_range(0..total));
        }
        order.shuffle(rng);
        order
    };

    let first = with_duplicates(&mut rng, &(0..total).collect::<Vec<_>>());
    let drop_at = rng.gen_range(0..=first.len());
    for &i in &first[..drop_at] {
        collect(deliver(&mut conn, i))?;
    }
    drop(conn);

    let mut conn = UploadConnection::new(Arc::clone(&manager), true);
    let resume = conn.on_text(&serde_json::to_string(&ClientMessage::Resume { session_id: session.clone() }).unwrap());
    let Some(ServerMessage::Ack(resumed)) = resume.messages.first() else { return Err("no resume ack".into()) };
    let missing: Vec<usize> = resumed.missing.clone().unwrap().into_iter().map(|i| i as usize).collect();
    let delivered: HashSet<usize> = first[..drop_at].iter().copied().collect();
    ensure!(
        missing.iter().copied().collect::<HashSet<_>>() == (0..total).filter(|i| !delivered.contains(i)).collect(),
        "resume reported the wrong missing set"
    );
    for i in with_duplicates(&mut rng, &missing) {
        collect(deliver(&mut conn, i))?;
    }
    let done = collect(conn.on_text(&serde_json::to_string(&ClientMessage::Complete { session_id: session }).unwrap()).messages)?;
    let Some(ServerMessage::Ack(ack)) = done.first() else { return Err("no complete ack".into()) };
    let (_, stored) = store.document(ack.document_id.as_ref().ok_or("no document")?).map_err(err)?;
    ensure!(stored == bytes, "assembled bytes differ (size {size}, chunk {chunk})");
    ensure!(percents.windows(2).all(|w| w[0] <= w[1]), "progress went backwards: {percents:?}");
    ensure!(percents.last() == Some(&100), "progress ended at {:?}", percents.last());
    ensure!(received.windows(2).all(|w| w[0] <= w[1]), "received count went backwards");
    Ok(())
}

fn resumable_upload() -> Outcome {
    let mut passed = 0;
    for trial in 0..200 {
        upload_trial(trial).map_err(|e| format!("trial {trial}: {e}"))?;
        passed += 1;
    }
    Ok(format!("{passed}/200 trials reassembled exactly"))
}

fn draft_from(q: &Question) -> DraftQuestion {
    DraftQuestion {
        content: q.content.clone(),
        concept_ids: q.concept_ids.clone(),
        concept_names: Vec::new(),
        // the source document only exists in the original store
        provenance: Provenance { source_document_id: None, ..q.provenance.clone() },
        source_span: None,
        source_offsets: None,
    }
}

/// Fingerprint-uniqueness scan plus the store's own integrity check.
fn fingerprint_scan(store: &Store) -> Result<usize, String> {
    let questions = all_questions(store);
    let mut seen = HashSet::new();
    for q in &questions {
        ensure!(q.fingerprint == q.content.fingerprint(), "question {} has a stale fingerprint", q.id);
        ensure!(seen.insert((q.course_id.clone(), q.fingerprint.clone())), "duplicate fingerprint {}", q.fingerprint);
    }
    let problems = check_integrity(store).map_err(err)?;
    ensure!(problems.is_empty(), "integrity problems: {problems:?}");
    Ok(questions.len())
}

fn idempotence_and_crash_safety() -> Outcome {
    // bank insertion replayed three times
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let source = memory_store(clock.clone(), &serde_json::from_value(seed_value()).unwrap());
    let paper = fixture_paper("paper_A.pdf");
    ingest(&pipeline(&source, false), &paper)?;
    let drafts: Vec<DraftQuestion> = all_questions(&source).iter().map(draft_from).collect();
    let target = memory_store(clock.clone(), &serde_json::from_value(seed_value()).unwrap());
    let course = course_id(&target, "PHA301");
    let meta = PaperMeta { title: paper.title.clone(), year: paper.year };
    let mut snapshots = Vec::new();
    for n in 0..3 {
        let insert = target.insert_question_bank(&drafts, &course, &meta, None, QuestionState::Published).map_err(err)?;
        ensure!(insert.inserted == if n == 0 { 22 } else { 0 }, "replay {n} inserted {}", insert.inserted);
        snapshots.push((insert.question_ids, target.question_count().map_err(err)?, target.export_bank(&insert.past_paper_id).map_err(err)?));
    }
    ensure!(snapshots.windows(2).all(|w| w[0] == w[1]), "bank replays changed the store");

    // a sync batch replayed three times
    let qs = all_questions(&target);
    let student = UserId::from("user-student");
    let mut ops = Vec::new();
    for (i, q) in qs.iter().enumerate() {
        let (kind, payload) = match q.content.kind() {
            QuestionKind::Mcq => (SyncOpKind::McqResponse, json!({"question_id": q.id, "chosen_index": 0})),
            QuestionKind::Saq => (
                SyncOpKind::SaqResponse,
                json!({"question_id": q.id, "parts": vec!["answer"; q.content.parts().len()], "self_correct": true}),
            ),
        };
        ops.push(SyncOp { op_id: format!("op-{i}"), kind, payload, client_clock: Utc::now(), user_id: student.clone() });
        ops.push(SyncOp {
            op_id: format!("fb-{i}"),
            kind: SyncOpKind::Feedback,
            payload: json!({"question_id": q.id, "rating": 1 + (i % 5)}),
            client_clock: Utc::now(),
            user_id: student.clone(),
        });
    }
    let mut counts = Vec::new();
    for n in 0..3 {
        let results = target.sync_push(&student, &ops).map_err(err)?;
        let want = if n == 0 { OpStatus::Applied } else { OpStatus::Duplicate };
        ensure!(results.iter().all(|r| r.status == want), "replay {n}: {:?}", results.iter().find(|r| r.status != want));
        counts.push((target.engagement_counts().map_err(err)?, target.sync_op_count().map_err(err)?));
    }
    ensure!(counts.windows(2).all(|w| w[0] == w[1]), "sync replays changed counts: {counts:?}");

    // the process dies at each stage boundary and is started again
    let mut boundaries = 0;
    for halt in ["queued", "ocr", "generating", "inserting", "before-commit"] {
        let ws = Workspace::new();
        ws.seed();
        let file = fixtures().join(&paper.file).display().to_string();
        let year = paper.year.to_string();
        let args = ["process", file.as_str(), "--course", "PHA301", "--paper-title", paper.title.as_str(), "--paper-year", year.as_str()];
        let crashed = ws.cmd().env("JUVENOTES_HALT_AT", halt).args(args).output().map_err(err)?;
        ensure!(!crashed.status.success() && crashed.status.code().is_none_or(|c| c > 2), "{halt}: process did not die: {:?}", crashed.status);
        {
            let store = Store::open_path(ws.db(), Arc::new(SystemClock)).map_err(err)?;
            let count = fingerprint_scan(&store)?;
            ensure!(count == 0, "{halt}: {count} questions visible before recovery");
        }
        let restarted = ws.cmd().arg("--json").args(args).output().map_err(err)?;
        ensure!(restarted.status.success(), "{halt}: restart failed: {}", String::from_utf8_lossy(&restarted.stderr));
        ensure!(String::from_utf8_lossy(&restarted.stderr).contains("recovered unfinished job"), "{halt}: nothing recovered");
        let summary: Value = serde_json::from_slice(&restarted.stdout).map_err(err)?;
        // recovery finishes the crashed job, so the fresh job only finds duplicates
        ensure!(
            summary["inserted"] == 0 && summary["dropped_reasons"]["duplicate-existing"] == 22,
            "{halt}: second run {summary}"
        );
        let store = Store::open_path(ws.db(), Arc::new(SystemClock)).map_err(err)?;
        let count = fingerprint_scan(&store)?;
        ensure!(count == 22, "{halt}: {count} questions after recovery");
        boundaries += 1;
    }
    Ok(format!("3 bank replays, 3 sync replays, {boundaries} crash points recovered cleanly"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Published,
    Draft,
    Flagged,
    Retired,
}

fn visibility_fuzz(ops: usize) -> Result<usize, String> {
    let store = memory_store(Arc::new(SystemClock), &serde_json::from_value(seed_value()).unwrap());
    for file in ["paper_A.pdf", "paper_B.pdf", "paper_D.pdf"] {
        ingest(&pipeline(&store, false), &fixture_paper(file))?;
    }
    for file in ["paper_C.pdf", "paper_E.pdf"] {
        ingest(&pipeline(&store, true), &fixture_paper(file))?;
    }
    let questions = all_questions(&store);
    let mut model: HashMap<QuestionId, Expect> = questions
        .iter()
        .map(|q| (q.id.clone(), if q.state == QuestionState::Draft { Expect::Draft } else { Expect::Published }))
        .collect();
    let mut flags: Vec<(FlagId, QuestionId, bool)> = Vec::new();
    let students = [UserId::from("user-student"), UserId::from("user-student2")];
    let reviewers = [UserId::from("user-faculty"), UserId::from("user-admin")];
    let mut rng = StdRng::seed_from_u64(10_000);

    for step in 0..ops {
        let q = &questions[rng.gen_range(0..questions.len())];
        let state = model[&q.id];
        match rng.gen_range(0..100) {
            0..=39 => {
                let user = &students[rng.gen_range(0..2)];
                let r = match q.content.kind() {
                    QuestionKind::Mcq => {
                        store.record_mcq_response(user, &q.id, rng.gen_range(0..q.content.choices().len() as i64)).map(|_| ())
                    }
                    QuestionKind::Saq => {
                        store.record_saq_response(user, &q.id, &vec!["a".to_string(); q.content.parts().len()], rng.gen())
                    }
                };
                ensure!(r.is_ok() == (state == Expect::Published), "step {step}: response on {state:?} gave {r:?}");
            }
            40..=54 => {
                let r = store.record_feedback(&students[rng.gen_range(0..2)], &q.id, rng.gen_range(1..=5), None);
                ensure!(r.is_ok() == (state == Expect::Published), "step {step}: feedback on {state:?} gave {r:?}");
            }
            55..=69 => {
                let r = store.flag_question(&students[0], &q.id, "looks wrong");
                ensure!(r.as_ref().err().map(|e| e.code()) == Some("forbidden"), "step {step}: student flag gave {r:?}");
                let r = store.flag_question(&reviewers[rng.gen_range(0..2)], &q.id, "looks wrong");
                let allowed = matches!(state, Expect::Published | Expect::Draft);
                ensure!(r.is_ok() == allowed, "step {step}: flag on {state:?} gave {r:?}");
                if let Ok(f) = r {
                    flags.push((f.id, q.id.clone(), true));
                    model.insert(q.id.clone(), Expect::Flagged);
                }
            }
            70..=89 if !flags.is_empty() => {
                let k = rng.gen_range(0..flags.len());
                let (flag, question, open) = flags[k].clone();
                let outcome = if rng.gen_bool(0.6) { FlagOutcome::Republish } else { FlagOutcome::Retire };
                let r = store.resolve_flag(&students[1], &flag, outcome);
                ensure!(r.as_ref().err().map(|e| e.code()) == Some("forbidden"), "step {step}: student resolve gave {r:?}");
                let r = store.resolve_flag(&reviewers[rng.gen_range(0..2)], &flag, outcome);
                if open {
                    ensure!(r.is_ok(), "step {step}: resolving an open flag gave {r:?}");
                    flags[k].2 = false;
                    model.insert(
                        question,
                        if outcome == FlagOutcome::Republish { Expect::Published } else { Expect::Retired },
                    );
                } else {
                    ensure!(r.as_ref().err().map(|e| e.code()) == Some("flag-closed"), "step {step}: re-resolve gave {r:?}");
                }
            }
            _ => {
                let r = store.publish_question(&reviewers[rng.gen_range(0..2)], &q.id);
                ensure!(r.is_ok() == (state == Expect::Draft), "step {step}: publish on {state:?} gave {r:?}");
                if r.is_ok() {
                    model.insert(q.id.clone(), Expect::Published);
                }
            }
        }

        // full scan after every operation
        let want: BTreeSet<QuestionId> =
            model.iter().filter(|(_, s)| **s == Expect::Published).map(|(id, _)| id.clone()).collect();
        let visible = student_visible(&store);
        ensure!(visible == want, "step {step}: students see {} questions, expected {}", visible.len(), want.len());
        if step % 500 == 0 {
            let snapshot: BTreeSet<QuestionId> =
                store.sync_pull(None).map_err(err)?.upserted_questions.into_iter().map(|q| q.id).collect();
            ensure!(snapshot == want, "step {step}: offline snapshot disagrees with visibility");
            for q in all_questions(&store) {
                let expected = match model[&q.id] {
                    Expect::Published => QuestionState::Published,
                    Expect::Draft => QuestionState::Draft,
                    Expect::Flagged => QuestionState::Flagged,
                    Expect::Retired => QuestionState::Retired,
                };
                ensure!(q.state == expected, "step {step}: {} is {:?}, expected {expected:?}", q.id, q.state);
            }
        }
    }
    Ok(ops)
}

fn round_trip_and_visibility() -> Outcome {
    let source = Workspace::new();
    source.seed();
    let mut banks = 0;
    for paper in manifest() {
        let out = source.path(&format!("{}.json", paper.file));
        let summary = source.process(&paper, Some(&out));
        if summary["accepted"] == 0 {
            continue;
        }
        let first = std::fs::read(&out).map_err(err)?;
        let mut previous = first.clone();
        for hop in 0..2 {
            let ws = Workspace::new();
            ws.seed();
            let input = ws.path("in.json");
            std::fs::write(&input, &previous).map_err(err)?;
            let input = input.display().to_string();
            let imported = ws.json(&["import", "--file", &input, "--course", &paper.course]);
            let output = ws.path("out.json").display().to_string();
            ws.json(&["export", "--paper-id", imported["paper_id"].as_str().unwrap(), "--out", &output]);
            let again = std::fs::read(&output).map_err(err)?;
            ensure!(again == first, "{}: hop {hop} export differs", paper.file);
            previous = again;
        }
        banks += 1;
    }
    ensure!(banks == 5, "{banks} banks round-tripped");
    let ops = visibility_fuzz(10_000)?;
    Ok(format!("{banks}/5 banks byte-identical, {ops}-op visibility fuzz clean"))
}

fn mcq(stem: &str, choices: &[(&str, bool)], indices: Option<&[u32]>) -> QuestionContent {
    QuestionContent {
        stem: stem.into(),
        explanation: None,
        body: QuestionBody::Mcq {
            choices: choices
                .iter()
                .enumerate()
                .map(|(i, (t, c))| McqChoice {
                    index: indices.map(|ix| ix[i]).unwrap_or(i as u32),
                    text: t.to_string(),
                    is_correct: *c,
                })
                .collect(),
        },
    }
}

fn saq(stem: &str, parts: &[(u32, u32)]) -> QuestionContent {
    QuestionContent {
        stem: stem.into(),
        explanation: None,
        body: QuestionBody::Saq {
            parts: parts
                .iter()
                .map(|(i, m)| SaqPart { index: *i, prompt: format!("part {i}"), expected_answer: String::new(), marks: *m })
                .collect(),
        },
    }
}

fn mcq_invariants() -> Outcome {
    let concepts: BTreeSet<ConceptId> = [ConceptId::from("concept-pharm")].into();
    let good = [("alpha", false), ("beta", true), ("gamma", false)];
    ensure!(validate_question(&mcq("Which?", &good, None), &concepts, 0.9).is_ok(), "a valid mcq was rejected");

    let too_many: Vec<(String, bool)> = (0..=MAX_CHOICES).map(|i| (format!("choice {i}"), i == 0)).collect();
    let too_many: Vec<(&str, bool)> = too_many.iter().map(|(t, c)| (t.as_str(), *c)).collect();
    let cases: Vec<(&str, QuestionContent, BTreeSet<ConceptId>, f64)> = vec![
        ("empty-stem", mcq("  ", &good, None), concepts.clone(), 0.9),
        ("no-concepts", mcq("Which?", &good, None), BTreeSet::new(), 0.9),
        ("confidence-out-of-range", mcq("Which?", &good, None), concepts.clone(), 1.5),
        ("too-few-choices", mcq("Which?", &[("only", true)], None), concepts.clone(), 0.9),
        ("too-many-choices", mcq("Which?", &too_many, None), concepts.clone(), 0.9),
        ("non-contiguous-choices", mcq("Which?", &good, Some(&[0, 1, 3])), concepts.clone(), 0.9),
        ("no-correct-choice", mcq("Which?", &[("a", false), ("b", false)], None), concepts.clone(), 0.9),
        ("multiple-correct-choices", mcq("Which?", &[("a", true), ("b", true), ("c", false)], None), concepts.clone(), 0.9),
        ("duplicate-choice-text", mcq("Which?", &[("Same", true), ("same ", false)], None), concepts.clone(), 0.9),
        ("saq-no-parts", saq("Explain.", &[]), concepts.clone(), 0.9),
        ("non-contiguous-parts", saq("Explain.", &[(0, 2), (2, 3)]), concepts.clone(), 0.9),
        ("zero-marks", saq("Explain.", &[(0, 0)]), concepts.clone(), 0.9),
    ];
    for (code, content, concept_ids, confidence) in &cases {
        let report = validate_question(content, concept_ids, *confidence);
        ensure!(report.contains(code), "{code} not detected: {:?}", report.codes());
    }

    // every stored mcq after the fixture papers and random insertions
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let store = memory_store(clock, &serde_json::from_value(seed_value()).unwrap());
    for paper in manifest() {
        let p = pipeline(&store, false);
        if paper.file != "blank.pdf" {
            ingest(&p, &paper)?;
        }
    }
    let tampered = {
        let mut q = all_questions(&store).into_iter().next().ok_or("no questions")?;
        q.content.stem.push_str(" (edited)");
        q
    };
    ensure!(tampered.validate().contains("fingerprint-mismatch"), "fingerprint-mismatch not detected");

    let course = course_id(&store, "PHA301");
    let mut rng = StdRng::seed_from_u64(820);
    let (mut accepted, mut refused) = (0, 0);
    for i in 0..500 {
        let n = rng.gen_range(0..=MAX_CHOICES + 1);
        let texts: Vec<String> = (0..n).map(|j| format!("option {i}-{j}")).collect();
        let choices: Vec<(&str, bool)> = texts.iter().map(|t| (t.as_str(), rng.gen_bool(0.3))).collect();
        let content = mcq(&format!("Random stem {i}?"), &choices, None);
        let draft = DraftQuestion {
            content: content.clone(),
            concept_ids: concepts.clone(),
            concept_names: Vec::new(),
            provenance: Provenance { source_document_id: None, generator: Generator::Manual, confidence: 1.0, created_at: Utc::now() },
            source_span: None,
            source_offsets: None,
        };
        let valid = validate_question(&content, &concepts, 1.0).is_ok();
        let meta = PaperMeta { title: "Random bank".into(), year: 2024 };
        let r = store.insert_question_bank(&[draft], &course, &meta, None, QuestionState::Published);
        ensure!(r.is_ok() == valid, "draft {i}: validation {valid} but insertion {r:?}");
        if valid { accepted += 1 } else { refused += 1 }
    }
    ensure!(accepted > 0 && refused > 0, "random drafts did not cover both outcomes");

    let mut mcqs = 0;
    for q in all_questions(&store) {
        if q.content.kind() == QuestionKind::Mcq {
            let correct = q.content.choices().iter().filter(|c| c.is_correct).count();
            ensure!(correct == 1, "question {} has {correct} correct choices", q.id);
            mcqs += 1;
        }
    }
    Ok(format!("{} violation classes rejected, {mcqs} stored mcqs each with one correct choice", cases.len() + 1))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("pipeline-speed", pipeline_speed),
        ("oracle-equivalence", oracle_equivalence),
        ("analytics-reproduction", analytics),
        ("resumable-upload", resumable_upload),
        ("idempotence-crash-safety", idempotence_and_crash_safety),
        ("round-trip-visibility", round_trip_and_visibility),
        ("mcq-invariants", mcq_invariants),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {reason}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
