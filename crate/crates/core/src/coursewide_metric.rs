//! Retrospective five-indicator course-wide engagement score.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chapter_metric::{minmax_scale, ActivityIdentity, MetricError};
use crate::sessionizer::SessionSpan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CourseIndicator {
    Immediacy,
    Frequency,
    Diversity,
    Recency,
    Interval,
}

impl CourseIndicator {
    pub const ALL: [CourseIndicator; 5] = [
        CourseIndicator::Immediacy,
        CourseIndicator::Frequency,
        CourseIndicator::Diversity,
        CourseIndicator::Recency,
        CourseIndicator::Interval,
    ];
    pub const CHAPTER_ALIGNED: [CourseIndicator; 3] =
        [CourseIndicator::Immediacy, CourseIndicator::Frequency, CourseIndicator::Diversity];
}

/// Raw indicators; the day-based ones are `None` for a student with no sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CourseWideRaw {
    /// `-min(day)`
    pub immediacy: Option<i64>,
    pub frequency: u32,
    pub diversity: u32,
    /// `max(day)`
    pub recency: Option<i64>,
    /// `max(day) - min(day)`
    pub interval: Option<i64>,
}

pub fn coursewide_indicators<'a, S, I>(sessions: I, identity: &ActivityIdentity) -> CourseWideRaw
where
    S: SessionSpan + ?Sized + 'a,
    I: IntoIterator<Item = &'a S>,
{
    let mut frequency = 0u32;
    let mut days: Option<(i64, i64)> = None;
    let mut activities = HashSet::new();
    for s in sessions {
        frequency += 1;
        let d = s.start_day();
        days = Some(days.map_or((d, d), |(lo, hi)| (lo.min(d), hi.max(d))));
        activities.extend(s.span_events().iter().map(|e| identity.key(&e.event)));
    }
    CourseWideRaw {
        immediacy: days.map(|(lo, _)| -lo),
        frequency,
        diversity: activities.len() as u32,
        recency: days.map(|(_, hi)| hi),
        interval: days.map(|(lo, hi)| hi - lo),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CourseWideWeights {
    pub immediacy: f64,
    pub frequency: f64,
    pub diversity: f64,
    pub recency: f64,
    pub interval: f64,
}

impl Default for CourseWideWeights {
    fn default() -> Self {
        Self { immediacy: 1.0, frequency: 1.0, diversity: 1.0, recency: 1.0, interval: 1.0 }
    }
}

impl CourseWideWeights {
    pub fn get(&self, ind: CourseIndicator) -> f64 {
        match ind {
            CourseIndicator::Immediacy => self.immediacy,
            CourseIndicator::Frequency => self.frequency,
            CourseIndicator::Diversity => self.diversity,
            CourseIndicator::Recency => self.recency,
            CourseIndicator::Interval => self.interval,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CourseWideScaled {
    pub immediacy: f64,
    pub frequency: f64,
    pub diversity: f64,
    pub recency: f64,
    pub interval: f64,
}

impl CourseWideScaled {
    pub fn get(&self, ind: CourseIndicator) -> f64 {
        match ind {
            CourseIndicator::Immediacy => self.immediacy,
            CourseIndicator::Frequency => self.frequency,
            CourseIndicator::Diversity => self.diversity,
            CourseIndicator::Recency => self.recency,
            CourseIndicator::Interval => self.interval,
        }
    }
}

/// Weighted sum over all five scaled indicators.
pub fn coursewide_score(scaled: &CourseWideScaled, weights: &CourseWideWeights) -> f64 {
    coursewide_variant(scaled, weights, &CourseIndicator::ALL).expect("non-empty")
}

/// Weighted sum restricted to `subset`. Terms are added in canonical
/// indicator order regardless of how the subset is listed.
pub fn coursewide_variant(
    scaled: &CourseWideScaled,
    weights: &CourseWideWeights,
    subset: &[CourseIndicator],
) -> Result<f64, MetricError> {
    if subset.is_empty() {
        return Err(MetricError::EmptySubset);
    }
    let chosen: BTreeSet<_> = subset.iter().copied().collect();
    Ok(CourseIndicator::ALL
        .iter()
        .filter(|ind| chosen.contains(ind))
        .fold(0.0, |acc, &ind| acc + weights.get(ind) * scaled.get(ind)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CourseWideRow {
    pub user: String,
    pub raw: CourseWideRaw,
    pub scaled: CourseWideScaled,
    pub score: f64,
}

/// Scales a day-based indicator over students that have sessions; others get 0.
fn scale_defined(values: &[Option<i64>]) -> Vec<f64> {
    let defined: Vec<f64> = values.iter().flatten().map(|&v| v as f64).collect();
    let scaled = minmax_scale(&defined).unwrap_or_default();
    let mut it = scaled.into_iter();
    values.iter().map(|v| if v.is_some() { it.next().unwrap_or(0.0) } else { 0.0 }).collect()
}

/// Course-wide rows for the whole roster, sorted by user.
///
/// Frequency and Diversity are scaled over every roster student (silent
/// students contribute zeros); the day-based indicators only over students
/// with at least one session, silent students receiving 0.
pub fn score_coursewide<S: SessionSpan + ?Sized>(
    sessions_by_user: &BTreeMap<String, Vec<&S>>,
    roster: &[String],
    identity: &ActivityIdentity,
    weights: &CourseWideWeights,
    subset: &[CourseIndicator],
) -> Result<Vec<CourseWideRow>, MetricError> {
    let users: Vec<String> = roster.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let raws: Vec<CourseWideRaw> = users
        .iter()
        .map(|u| {
            let sessions = sessions_by_user.get(u).map(Vec::as_slice).unwrap_or(&[]);
            coursewide_indicators(sessions.iter().copied(), identity)
        })
        .collect();
    if users.is_empty() {
        return Ok(Vec::new());
    }

    let frequency = minmax_scale(&raws.iter().map(|r| f64::from(r.frequency)).collect::<Vec<_>>())?;
    let diversity = minmax_scale(&raws.iter().map(|r| f64::from(r.diversity)).collect::<Vec<_>>())?;
    let immediacy = scale_defined(&raws.iter().map(|r| r.immediacy).collect::<Vec<_>>());
    let recency = scale_defined(&raws.iter().map(|r| r.recency).collect::<Vec<_>>());
    let interval = scale_defined(&raws.iter().map(|r| r.interval).collect::<Vec<_>>());

    users
        .into_iter()
        .zip(raws)
        .enumerate()
        .map(|(i, (user, raw))| {
            let scaled = CourseWideScaled {
                immediacy: immediacy[i],
                frequency: frequency[i],
                diversity: diversity[i],
                recency: recency[i],
                interval: interval[i],
            };
            let score = coursewide_variant(&scaled, weights, subset)?;
            Ok(CourseWideRow { user, raw, scaled, score })
        })
        .collect()
}

/// Writes `user`, the five raw values, the five scaled values and `score`.
pub fn write_coursewide_csv<W: Write>(writer: W, rows: &[CourseWideRow]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "user",
        "immediacy_raw",
        "frequency_raw",
        "diversity_raw",
        "recency_raw",
        "interval_raw",
        "immediacy",
        "frequency",
        "diversity",
        "recency",
        "interval",
        "score",
    ])?;
    let opt = |v: Option<i64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        wtr.write_record([
            r.user.clone(),
            opt(r.raw.immediacy),
            r.raw.frequency.to_string(),
            r.raw.diversity.to_string(),
            opt(r.raw.recency),
            opt(r.raw.interval),
            r.scaled.immediacy.to_string(),
            r.scaled.frequency.to_string(),
            r.scaled.diversity.to_string(),
            r.scaled.recency.to_string(),
            r.scaled.interval.to_string(),
            r.score.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
