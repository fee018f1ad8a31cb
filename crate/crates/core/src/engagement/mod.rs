//! Learner engagement and faculty review: responses, ratings, concept
//! mastery, study sessions, and the flag / republish lifecycle.

mod analytics;

use chrono::{DateTime, Duration, Utc};
use rusqlite::{params, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};

use crate::domain::{wire_enum, ConceptId, FlagId, QuestionId, QuestionKind, QuestionState, UserId};
use crate::store::{from_ts, load_question, load_user, set_question_state, ts, Store};
use crate::{Error, Result};

pub use analytics::{
    DailyActiveUsers, DateRange, DayCount, JobDuration, ProcessingStats, SatisfactionSummary,
};

/// Inactivity gap that closes a study session.
pub const SESSION_IDLE: Duration = Duration::minutes(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOutcome {
    pub correct: bool,
    pub correct_index: u32,
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFeedback {
    pub user_id: UserId,
    pub question_id: QuestionId,
    pub rating: u8,
    pub comment: Option<String>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagState {
    Open,
    ResolvedRepublished,
    ResolvedRetired,
}

wire_enum!(FlagState {
    Open => "open",
    ResolvedRepublished => "resolved-republished",
    ResolvedRetired => "resolved-retired",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlagOutcome {
    Republish,
    Retire,
}

wire_enum!(FlagOutcome { Republish => "republish", Retire => "retire" });

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub id: FlagId,
    pub question_id: QuestionId,
    pub raised_by: UserId,
    pub reason: String,
    pub state: FlagState,
    pub at: DateTime<Utc>,
    pub resolved_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptProgress {
    pub user_id: UserId,
    pub concept_id: ConceptId,
    pub attempted: u64,
    pub correct: u64,
    pub mastery: f64,
}

/// Row counts of the engagement tables, for exactly-once checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementCounts {
    pub mcq_responses: u64,
    pub saq_responses: u64,
    pub feedbacks: u64,
    pub events: u64,
}

/// Appends to the engagement event log and extends or opens the user's
/// study session.
fn log_event(tx: &Transaction<'_>, user: &UserId, kind: &str, question: Option<&QuestionId>, at: DateTime<Utc>) -> Result<()> {
    tx.execute(
        "INSERT INTO analytics (user_id, kind, question_id, at) VALUES (?1, ?2, ?3, ?4)",
        params![user.as_str(), kind, question.map(|q| q.as_str()), ts(at)],
    )?;
    let open: Option<(String, i64)> = tx
        .query_row(
            "SELECT id, last_event_at FROM user_study_sessions WHERE user_id = ?1
             ORDER BY last_event_at DESC LIMIT 1",
            [user.as_str()],
            |r| Ok((r.get(0)?, r.get(1)?)),
        )
        .optional()?;
    match open {
        Some((id, last)) if at >= from_ts(last) && at - from_ts(last) <= SESSION_IDLE => {
            let seconds = (at - from_ts(last)).num_seconds();
            tx.execute("UPDATE user_study_sessions SET last_event_at = ?2 WHERE id = ?1", params![id, ts(at)])?;
            tx.execute(
                "INSERT INTO user_study_times (user_id, day, seconds) VALUES (?1, ?2, ?3)
                 ON CONFLICT (user_id, day) DO UPDATE SET seconds = seconds + excluded.seconds",
                params![user.as_str(), at.date_naive().to_string(), seconds],
            )?;
        }
        _ => {
            tx.execute(
                "INSERT INTO user_study_sessions (id, user_id, started_at, last_event_at) VALUES (?1, ?2, ?3, ?3)",
                params![uuid::Uuid::new_v4().to_string(), user.as_str(), ts(at)],
            )?;
            tx.execute(
                "INSERT OR IGNORE INTO user_study_times (user_id, day, seconds) VALUES (?1, ?2, 0)",
                params![user.as_str(), at.date_naive().to_string()],
            )?;
        }
    }
    Ok(())
}

fn published(tx: &Transaction<'_>, question: &QuestionId) -> Result<crate::domain::Question> {
    let q = load_question(tx, question)?;
    if q.state != QuestionState::Published {
        return Err(Error::NotAvailable(question.to_string()));
    }
    Ok(q)
}

fn reviewer(tx: &Transaction<'_>, actor: &UserId) -> Result<()> {
    let user = load_user(tx, actor)?;
    if !user.role.can_review() {
        return Err(Error::Forbidden(format!("{} may not review content", user.role)));
    }
    Ok(())
}

pub(crate) fn apply_mcq_response(
    tx: &Transaction<'_>,
    user: &UserId,
    question: &QuestionId,
    chosen: i64,
    at: DateTime<Utc>,
    client_at: Option<DateTime<Utc>>,
) -> Result<McqOutcome> {
    load_user(tx, user)?;
    let q = published(tx, question)?;
    if q.content.kind() != QuestionKind::Mcq {
        return Err(Error::InvalidRequest(format!("question {question} is not multiple-choice")));
    }
    let choices = q.content.choices();
    let choice = usize::try_from(chosen).ok().and_then(|i| choices.get(i)).ok_or(Error::BadChoice(chosen))?;
    let correct = choice.is_correct;
    tx.execute(
        "INSERT INTO user_mcq_responses (user_id, question_id, chosen_index, correct, at, client_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![user.as_str(), question.as_str(), chosen, correct, ts(at), client_at.map(ts)],
    )?;
    for concept in &q.concept_ids {
        tx.execute(
            "INSERT INTO user_concept_progress (user_id, concept_id, attempted, correct) VALUES (?1, ?2, 1, ?3)
             ON CONFLICT (user_id, concept_id) DO UPDATE
             SET attempted = attempted + 1, correct = correct + excluded.correct",
            params![user.as_str(), concept.as_str(), correct as i64],
        )?;
    }
    log_event(tx, user, "mcq-response", Some(question), at)?;
    Ok(McqOutcome {
        correct,
        correct_index: q.content.correct_index().unwrap_or_default(),
        explanation: q.content.explanation.clone(),
    })
}

pub(crate) fn apply_saq_response(
    tx: &Transaction<'_>,
    user: &UserId,
    question: &QuestionId,
    answers: &[String],
    self_correct: bool,
    at: DateTime<Utc>,
    client_at: Option<DateTime<Utc>>,
) -> Result<()> {
    load_user(tx, user)?;
    let q = published(tx, question)?;
    if q.content.kind() != QuestionKind::Saq {
        return Err(Error::InvalidRequest(format!("question {question} is not short-answer")));
    }
    if answers.len() != q.content.parts().len() {
        return Err(Error::InvalidRequest(format!(
            "expected {} answers, got {}",
            q.content.parts().len(),
            answers.len()
        )));
    }
    tx.execute(
        "INSERT INTO user_saq_responses (user_id, question_id, answers, self_correct, at, client_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![user.as_str(), question.as_str(), serde_json::to_string(answers)?, self_correct, ts(at), client_at.map(ts)],
    )?;
    log_event(tx, user, "saq-response", Some(question), at)
}

/// Upserts the user's rating of a question; the latest write wins.
pub(crate) fn apply_feedback(
    tx: &Transaction<'_>,
    user: &UserId,
    question: &QuestionId,
    rating: i64,
    comment: Option<&str>,
    at: DateTime<Utc>,
    client_at: Option<DateTime<Utc>>,
) -> Result<QuestionFeedback> {
    if !(1..=5).contains(&rating) {
        return Err(Error::InvalidRequest(format!("rating {rating} outside 1..=5")));
    }
    load_user(tx, user)?;
    published(tx, question)?;
    let comment = comment.map(str::trim).filter(|c| !c.is_empty());
    tx.execute(
        "INSERT INTO question_feedbacks (user_id, question_id, rating, comment, at, client_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)
         ON CONFLICT (user_id, question_id) DO UPDATE
         SET rating = excluded.rating, comment = excluded.comment, at = excluded.at, client_at = excluded.client_at",
        params![user.as_str(), question.as_str(), rating, comment, ts(at), client_at.map(ts)],
    )?;
    log_event(tx, user, "feedback", Some(question), at)?;
    Ok(QuestionFeedback {
        user_id: user.clone(),
        question_id: question.clone(),
        rating: rating as u8,
        comment: comment.map(str::to_string),
        at,
    })
}

fn load_flag(conn: &rusqlite::Connection, id: &FlagId) -> Result<Flag> {
    conn.query_row(
        "SELECT id, question_id, raised_by, reason, state, at, resolved_at FROM flags WHERE id = ?1",
        [id.as_str()],
        |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, String>(4)?,
                r.get::<_, i64>(5)?,
                r.get::<_, Option<i64>>(6)?,
            ))
        },
    )
    .optional()?
    .ok_or_else(|| Error::UnknownFlag(id.to_string()))
    .and_then(|(id, question, by, reason, state, at, resolved)| {
        Ok(Flag {
            id: id.into(),
            question_id: question.into(),
            raised_by: by.into(),
            reason,
            state: state.parse().map_err(Error::IntegrityViolation)?,
            at: from_ts(at),
            resolved_at: resolved.map(from_ts),
        })
    })
}

impl Store {
    pub fn record_mcq_response(&self, user: &UserId, question: &QuestionId, chosen: i64) -> Result<McqOutcome> {
        let now = self.now();
        self.write(|tx| apply_mcq_response(tx, user, question, chosen, now, None))
    }

    /// Stores free-text answers (one per part) with the learner's own
    /// judgement of correctness.
    pub fn record_saq_response(&self, user: &UserId, question: &QuestionId, answers: &[String], self_correct: bool) -> Result<()> {
        let now = self.now();
        self.write(|tx| apply_saq_response(tx, user, question, answers, self_correct, now, None))
    }

    pub fn record_feedback(&self, user: &UserId, question: &QuestionId, rating: i64, comment: Option<&str>) -> Result<QuestionFeedback> {
        let now = self.now();
        self.write(|tx| apply_feedback(tx, user, question, rating, comment, now, None))
    }

    /// Logs time spent studying without answering anything, e.g. reading.
    pub fn record_study_activity(&self, user: &UserId) -> Result<()> {
        let now = self.now();
        self.write(|tx| {
            load_user(tx, user)?;
            log_event(tx, user, "study", None, now)
        })
    }

    /// Hides a published or draft question from students until a reviewer
    /// resolves the flag.
    pub fn flag_question(&self, actor: &UserId, question: &QuestionId, reason: &str) -> Result<Flag> {
        let now = self.now();
        self.write(|tx| {
            reviewer(tx, actor)?;
            let state = load_question(tx, question)?.state;
            if !matches!(state, QuestionState::Published | QuestionState::Draft) {
                return Err(Error::BadState(format!("cannot flag a {state} question")));
            }
            let reason = reason.trim();
            if reason.is_empty() {
                return Err(Error::InvalidRequest("a flag needs a reason".into()));
            }
            let flag = Flag {
                id: FlagId::new(),
                question_id: question.clone(),
                raised_by: actor.clone(),
                reason: reason.to_string(),
                state: FlagState::Open,
                at: now,
                resolved_at: None,
            };
            tx.execute(
                "INSERT INTO flags (id, question_id, raised_by, reason, state, at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![flag.id.as_str(), question.as_str(), actor.as_str(), flag.reason, flag.state.as_str(), ts(now)],
            )?;
            set_question_state(tx, question, QuestionState::Flagged, now)?;
            Ok(flag)
        })
    }

    pub fn resolve_flag(&self, actor: &UserId, flag: &FlagId, outcome: FlagOutcome) -> Result<QuestionState> {
        let now = self.now();
        self.write(|tx| {
            reviewer(tx, actor)?;
            let current = load_flag(tx, flag)?;
            if current.state != FlagState::Open {
                return Err(Error::FlagClosed(flag.to_string()));
            }
            let (flag_state, question_state) = match outcome {
                FlagOutcome::Republish => (FlagState::ResolvedRepublished, QuestionState::Published),
                FlagOutcome::Retire => (FlagState::ResolvedRetired, QuestionState::Retired),
            };
            tx.execute(
                "UPDATE flags SET state = ?2, resolved_at = ?3, resolved_by = ?4 WHERE id = ?1",
                params![flag.as_str(), flag_state.as_str(), ts(now), actor.as_str()],
            )?;
            set_question_state(tx, &current.question_id, question_state, now)?;
            Ok(question_state)
        })
    }

    /// Publishes a draft held back for review.
    pub fn publish_question(&self, actor: &UserId, question: &QuestionId) -> Result<()> {
        let now = self.now();
        self.write(|tx| {
            reviewer(tx, actor)?;
            let state = load_question(tx, question)?.state;
            if state != QuestionState::Draft {
                return Err(Error::BadState(format!("only drafts can be published, question is {state}")));
            }
            set_question_state(tx, question, QuestionState::Published, now)?;
            Ok(())
        })
    }

    pub fn flag(&self, id: &FlagId) -> Result<Flag> {
        self.read(|c| load_flag(c, id))
    }

    pub fn open_flags(&self) -> Result<Vec<Flag>> {
        self.read(|c| {
            let ids: Vec<String> = c
                .prepare("SELECT id FROM flags WHERE state = 'open' ORDER BY at, id")?
                .query_map([], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
            ids.into_iter().map(|id| load_flag(c, &id.into())).collect()
        })
    }

    pub fn concept_progress(&self, user: &UserId) -> Result<Vec<ConceptProgress>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT concept_id, attempted, correct FROM user_concept_progress WHERE user_id = ?1 ORDER BY concept_id",
            )?;
            let rows = stmt.query_map([user.as_str()], |r| {
                let attempted: i64 = r.get(1)?;
                let correct: i64 = r.get(2)?;
                Ok(ConceptProgress {
                    user_id: user.clone(),
                    concept_id: r.get::<_, String>(0)?.into(),
                    attempted: attempted as u64,
                    correct: correct as u64,
                    mastery: if attempted == 0 { 0.0 } else { correct as f64 / attempted as f64 },
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    /// Seconds studied per UTC day, as (day, seconds) in date order.
    pub fn study_times(&self, user: &UserId) -> Result<Vec<(String, u64)>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT day, seconds FROM user_study_times WHERE user_id = ?1 ORDER BY day")?;
            let rows = stmt.query_map([user.as_str()], |r| Ok((r.get(0)?, r.get::<_, i64>(1)? as u64)))?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    pub fn engagement_counts(&self) -> Result<EngagementCounts> {
        self.read(|c| {
            let count = |table: &str| -> Result<u64> {
                Ok(c.query_row(&format!("SELECT count(*) FROM {table}"), [], |r| r.get::<_, i64>(0))? as u64)
            };
            Ok(EngagementCounts {
                mcq_responses: count("user_mcq_responses")?,
                saq_responses: count("user_saq_responses")?,
                feedbacks: count("question_feedbacks")?,
                events: count("analytics")?,
            })
        })
    }
}
