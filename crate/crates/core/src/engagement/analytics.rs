use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{JobId, UserId};
use crate::store::{ts, Store};
use crate::{Error, Result};

/// Inclusive range of UTC calendar days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub from: NaiveDate,
    pub to: NaiveDate,
}

const MAX_RANGE_DAYS: i64 = 3_660;

impl DateRange {
    pub fn new(from: NaiveDate, to: NaiveDate) -> Result<Self> {
        if from > to {
            return Err(Error::InvalidRequest(format!("range starts ({from}) after it ends ({to})")));
        }
        if (to - from).num_days() >= MAX_RANGE_DAYS {
            return Err(Error::InvalidRequest("range longer than ten years".into()));
        }
        Ok(Self { from, to })
    }

    pub fn parse(from: &str, to: &str) -> Result<Self> {
        let day = |s: &str| {
            s.parse::<NaiveDate>().map_err(|_| Error::InvalidRequest(format!("{s:?} is not a YYYY-MM-DD date")))
        };
        Self::new(day(from)?, day(to)?)
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> {
        self.from.iter_days().take_while({
            let to = self.to;
            move |d| *d <= to
        })
    }

    pub fn len(&self) -> usize {
        (self.to - self.from).num_days() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Half-open millisecond bounds covering every day in the range.
    fn millis(&self) -> (i64, i64) {
        let start = self.from.and_hms_opt(0, 0, 0).unwrap().and_utc();
        let end = self.to.succ_opt().unwrap_or(self.to).and_hms_opt(0, 0, 0).unwrap().and_utc();
        (ts(start), ts(end))
    }

    fn contains(&self, t: DateTime<Utc>) -> bool {
        let d = t.date_naive();
        self.from <= d && d <= self.to
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayCount {
    pub date: NaiveDate,
    pub dau: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyActiveUsers {
    pub series: Vec<DayCount>,
    pub mean: f64,
    pub baseline: Option<Vec<DayCount>>,
    pub baseline_mean: Option<f64>,
    /// (mean − baseline mean) / baseline mean × 100.
    pub percent_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionSummary {
    /// Rating → number of ratings; only ratings that occur appear.
    pub histogram: BTreeMap<u8, u64>,
    pub raters: u64,
    pub satisfied: u64,
    /// Share of distinct raters whose mean rating is at least 4.
    pub fraction_satisfied: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDuration {
    pub job_id: JobId,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingStats {
    pub jobs: Vec<JobDuration>,
    pub median_seconds: Option<f64>,
    pub p95_seconds: Option<f64>,
}

fn mean(series: &[DayCount]) -> f64 {
    series.iter().map(|d| d.dau as f64).sum::<f64>() / series.len() as f64
}

/// Median of sorted values; the mean of the two middle values when the
/// count is even.
fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

impl Store {
    fn dau_series(&self, range: &DateRange) -> Result<Vec<DayCount>> {
        let (start, end) = range.millis();
        let counts: BTreeMap<String, u64> = self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT date(at / 1000, 'unixepoch') AS day, count(DISTINCT user_id)
                 FROM analytics WHERE at >= ?1 AND at < ?2 GROUP BY day",
            )?;
            let rows = stmt.query_map([start, end], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)? as u64)))?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })?;
        Ok(range
            .days()
            .map(|date| DayCount { date, dau: counts.get(&date.to_string()).copied().unwrap_or(0) })
            .collect())
    }

    /// Distinct engaged users per UTC day, and the change of the mean
    /// against a baseline range when one is given.
    pub fn daily_active_users(&self, range: &DateRange, baseline: Option<&DateRange>) -> Result<DailyActiveUsers> {
        let series = self.dau_series(range)?;
        let current = mean(&series);
        let Some(baseline) = baseline else {
            return Ok(DailyActiveUsers { series, mean: current, baseline: None, baseline_mean: None, percent_change: None });
        };
        let base_series = self.dau_series(baseline)?;
        let base = mean(&base_series);
        let change = if base == 0.0 {
            if current > 0.0 {
                return Err(Error::UndefinedBaseline);
            }
            0.0
        } else {
            (current - base) / base * 100.0
        };
        Ok(DailyActiveUsers {
            series,
            mean: current,
            baseline: Some(base_series),
            baseline_mean: Some(base),
            percent_change: Some(change),
        })
    }

    pub fn satisfaction_summary(&self, range: &DateRange) -> Result<SatisfactionSummary> {
        let (start, end) = range.millis();
        let ratings: Vec<(String, i64)> = self.read(|c| {
            let mut stmt = c.prepare("SELECT user_id, rating FROM question_feedbacks WHERE at >= ?1 AND at < ?2")?;
            let rows = stmt.query_map([start, end], |r| Ok((r.get(0)?, r.get(1)?)))?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })?;
        let mut histogram = BTreeMap::new();
        let mut per_user: BTreeMap<UserId, (i64, i64)> = BTreeMap::new();
        for (user, rating) in ratings {
            *histogram.entry(rating as u8).or_insert(0) += 1;
            let e = per_user.entry(user.into()).or_default();
            e.0 += rating;
            e.1 += 1;
        }
        // mean >= 4 compared exactly in integers
        let satisfied = per_user.values().filter(|(sum, n)| *sum >= 4 * *n).count() as u64;
        let raters = per_user.len() as u64;
        Ok(SatisfactionSummary {
            histogram,
            raters,
            satisfied,
            fraction_satisfied: if raters == 0 { 0.0 } else { satisfied as f64 / raters as f64 },
        })
    }

    /// Queue-to-done durations of jobs that finished within the range.
    pub fn processing_time_stats(&self, range: &DateRange) -> Result<ProcessingStats> {
        let rows: Vec<(String, String)> = self.read(|c| {
            let mut stmt = c.prepare("SELECT id, timestamps FROM jobs WHERE state = 'done' ORDER BY seq")?;
            let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })?;
        let mut jobs = Vec::new();
        for (id, stamps) in rows {
            let stamps: BTreeMap<String, DateTime<Utc>> = serde_json::from_str(&stamps)?;
            let (Some(queued), Some(done)) = (stamps.get("queued"), stamps.get("done")) else {
                return Err(Error::IntegrityViolation(format!("done job {id} lacks queued/done timestamps")));
            };
            if range.contains(*done) {
                jobs.push(JobDuration { job_id: id.into(), seconds: (*done - *queued).num_milliseconds() as f64 / 1000.0 });
            }
        }
        let mut sorted: Vec<f64> = jobs.iter().map(|j| j.seconds).collect();
        sorted.sort_by(f64::total_cmp);
        Ok(ProcessingStats { median_seconds: median(&sorted), p95_seconds: percentile(&sorted, 95.0), jobs })
    }
}
