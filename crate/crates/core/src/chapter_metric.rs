//! Chapter-aligned cumulative engagement score.
//!
//! For every week `t`, chapter `k` and student `i` the metric counts the
//! chapter's study sessions (Frequency), the distinct activities touched in
//! them (Diversity), and the delay of the student's first session relative
//! to the earliest first access in the cohort (Immediacy). Each indicator is
//! min-max scaled over the students engaged with `k` by `t`, summed into a
//! chapter score in `[0, 3]`, and the chapter scores are combined by a
//! weighted sum into `y_t`.
//!
//! Immediacy and the release proxy are frozen the first week they are
//! observed; Frequency and Diversity accumulate.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{LogColumn, LogEvent};
use crate::sessionizer::{Session, SessionSpan};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("cannot scale an empty population")]
    EmptyPopulation,
    #[error("{provided} chapter weights given but {required} chapters are released")]
    WeightMismatch { required: usize, provided: usize },
    #[error("chapter weight {0} is negative or not finite")]
    InvalidWeight(f64),
    #[error("indicator subset is empty")]
    EmptySubset,
}

/// Columns whose values together identify one learning activity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivityIdentity {
    pub columns: Vec<LogColumn>,
}

impl Default for ActivityIdentity {
    fn default() -> Self {
        Self { columns: vec![LogColumn::EventContext] }
    }
}

impl ActivityIdentity {
    pub fn key(&self, event: &LogEvent) -> String {
        let mut key = String::new();
        for (i, col) in self.columns.iter().enumerate() {
            if i > 0 {
                key.push('\u{1f}');
            }
            key.push_str(&event.field(*col));
        }
        key
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RawChapterIndicators {
    pub frequency: u32,
    /// `release_day - first_session_day`; `None` when unengaged.
    pub immediacy: Option<i64>,
    pub diversity: u32,
}

impl RawChapterIndicators {
    pub const UNENGAGED: Self = Self { frequency: 0, immediacy: None, diversity: 0 };

    pub fn is_engaged(&self) -> bool {
        self.frequency > 0
    }
}

/// Raw indicators for one student's sessions on one chapter.
pub fn raw_indicators<'a, I>(sessions: I, release_day: i64, identity: &ActivityIdentity) -> RawChapterIndicators
where
    I: IntoIterator<Item = &'a Session>,
{
    let mut frequency = 0u32;
    let mut first_day: Option<i64> = None;
    let mut activities = HashSet::new();
    for s in sessions {
        frequency += 1;
        first_day = Some(first_day.map_or(s.start_day(), |d| d.min(s.start_day())));
        activities.extend(s.events.iter().map(|e| identity.key(&e.event)));
    }
    RawChapterIndicators {
        frequency,
        immediacy: first_day.map(|d| release_day - d),
        diversity: activities.len() as u32,
    }
}

/// `(v - min) / (max - min)`; every output is 0 when the population is constant.
pub fn minmax_scale(values: &[f64]) -> Result<Vec<f64>, MetricError> {
    let (min, max) = values
        .iter()
        .fold(None, |acc: Option<(f64, f64)>, &v| Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v)))))
        .ok_or(MetricError::EmptyPopulation)?;
    let range = max - min;
    if range <= 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaledIndicators {
    pub frequency: f64,
    pub immediacy: f64,
    pub diversity: f64,
}

/// `F + I + D`, or 0 for an unengaged or unreleased chapter.
pub fn chapter_score(scaled: Option<&ScaledIndicators>) -> f64 {
    scaled.map_or(0.0, |s| s.frequency + s.immediacy + s.diversity)
}

/// Weighted sum `sum_k w_k * IDF_k` over the released chapters.
pub fn engagement_score(idfs: &[f64], weights: &[f64]) -> Result<f64, MetricError> {
    if weights.len() < idfs.len() {
        return Err(MetricError::WeightMismatch { required: idfs.len(), provided: weights.len() });
    }
    let mut y = 0.0;
    for (idf, &w) in idfs.iter().zip(weights) {
        if !w.is_finite() || w < 0.0 {
            return Err(MetricError::InvalidWeight(w));
        }
        y += w * idf;
    }
    Ok(y)
}

/// Chapter weights. `Explicit` lists one weight per released chapter in
/// ascending chapter order.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum ChapterWeights {
    #[default]
    Uniform,
    Explicit(Vec<f64>),
}

impl ChapterWeights {
    pub fn from_option(weights: Option<Vec<f64>>) -> Self {
        weights.map_or(ChapterWeights::Uniform, ChapterWeights::Explicit)
    }

    pub fn for_released(&self, released: usize) -> Vec<f64> {
        match self {
            ChapterWeights::Uniform => vec![1.0; released],
            ChapterWeights::Explicit(w) => w.clone(),
        }
    }

    pub fn scaled(&self, factor: f64, chapters: usize) -> Self {
        ChapterWeights::Explicit(self.for_released(chapters).iter().map(|w| w * factor).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricConfig {
    pub chapter_weights: ChapterWeights,
    pub activity: ActivityIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChapterRelease {
    pub chapter: u32,
    /// Earliest first-access day in the cohort, frozen when first observed.
    pub release_day: i64,
    pub observed_from: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChapterIndicators {
    pub user: String,
    pub chapter: u32,
    pub week: u32,
    pub raw: RawChapterIndicators,
    pub scaled: Option<ScaledIndicators>,
}

impl ChapterIndicators {
    pub fn idf(&self) -> f64 {
        chapter_score(self.scaled.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeekScores {
    pub week: u32,
    /// Chapters released by this week, ascending.
    pub released: Vec<u32>,
    /// `y_t` per student, aligned with [`EngagementSeries::users`].
    pub scores: Vec<f64>,
    /// `idf[j][u]`: chapter `released[j]`, student `u`.
    pub idf: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// One row per (student, released chapter).
    pub indicators: Vec<ChapterIndicators>,
}

impl WeekScores {
    pub fn upper_bound(&self) -> f64 {
        3.0 * self.weights.iter().take(self.released.len()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngagementSeries {
    pub users: Vec<String>,
    pub weeks: Vec<WeekScores>,
    pub releases: Vec<ChapterRelease>,
}

impl EngagementSeries {
    pub fn week(&self, week: u32) -> Option<&WeekScores> {
        self.weeks.iter().find(|w| w.week == week)
    }

    pub fn user_index(&self, user: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(user)).ok()
    }

    /// `y_1..y_T` for one student.
    pub fn series_for(&self, user: &str) -> Option<Vec<f64>> {
        let i = self.user_index(user)?;
        Some(self.weeks.iter().map(|w| w.scores[i]).collect())
    }

    /// First bound violation found, if any.
    pub fn bound_violation(&self) -> Option<String> {
        const EPS: f64 = 1e-9;
        for w in &self.weeks {
            let upper = w.upper_bound();
            for (u, &y) in w.scores.iter().enumerate() {
                if !(y >= 0.0 && y <= upper + EPS) {
                    return Some(format!("week {}: y for {} = {y} outside [0, {upper}]", w.week, self.users[u]));
                }
            }
            for row in &w.indicators {
                let idf = row.idf();
                if !(0.0..=3.0 + EPS).contains(&idf) {
                    return Some(format!("week {}: IDF for {} chapter {} = {idf}", w.week, row.user, row.chapter));
                }
                if let Some(s) = row.scaled {
                    if [s.frequency, s.immediacy, s.diversity].iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Some(format!("week {}: scaled indicator out of [0,1] for {}", w.week, row.user));
                    }
                }
            }
        }
        None
    }
}

struct StudentChapterState<'a> {
    sessions: Vec<&'a Session>,
    consumed: usize,
    frequency: u32,
    first_day: Option<i64>,
    activities: HashSet<String>,
}

/// Cumulative weekly scores for weeks `1..=through_week`.
///
/// Only chapter-attributed sessions of roster students count. Students in
/// the roster with no sessions stay in the cohort with `y_t = 0`.
pub fn weekly_series(
    sessions: &[Session],
    roster: &[String],
    through_week: u32,
    config: &MetricConfig,
) -> Result<EngagementSeries, MetricError> {
    let users: Vec<String> = roster.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index_of = |user: &str| users.binary_search_by(|u| u.as_str().cmp(user)).ok();

    let mut per_chapter: BTreeMap<u32, BTreeMap<usize, StudentChapterState<'_>>> = BTreeMap::new();
    for s in sessions {
        let (Some(k), Some(u)) = (s.chapter_number(), index_of(&s.user)) else { continue };
        per_chapter
            .entry(k)
            .or_default()
            .entry(u)
            .or_insert_with(|| StudentChapterState {
                sessions: Vec::new(),
                consumed: 0,
                frequency: 0,
                first_day: None,
                activities: HashSet::new(),
            })
            .sessions
            .push(s);
    }
    for students in per_chapter.values_mut() {
        for st in students.values_mut() {
            st.sessions.sort_by_key(|s| (s.week, s.start_day_offset));
        }
    }

    let mut releases: BTreeMap<u32, ChapterRelease> = BTreeMap::new();
    let mut frozen_immediacy: BTreeMap<(u32, usize), i64> = BTreeMap::new();
    let mut weeks = Vec::with_capacity(through_week as usize);

    for t in 1..=through_week {
        // absorb sessions that start in week t
        for students in per_chapter.values_mut() {
            for st in students.values_mut() {
                while let Some(s) = st.sessions.get(st.consumed).filter(|s| s.week <= t) {
                    st.frequency += 1;
                    st.first_day = Some(st.first_day.map_or(s.start_day_offset, |d| d.min(s.start_day_offset)));
                    st.activities.extend(s.events.iter().map(|e| config.activity.key(&e.event)));
                    st.consumed += 1;
                }
            }
        }

        let mut released = Vec::new();
        let mut idf = Vec::new();
        let mut indicators = Vec::new();
        for (&k, students) in &per_chapter {
            let engaged: Vec<(usize, &StudentChapterState<'_>)> =
                students.iter().filter(|(_, st)| st.frequency > 0).map(|(&u, st)| (u, st)).collect();
            if engaged.is_empty() {
                continue;
            }
            let release = releases.entry(k).or_insert_with(|| ChapterRelease {
                chapter: k,
                release_day: engaged.iter().filter_map(|(_, st)| st.first_day).min().expect("engaged"),
                observed_from: t,
            });
            let raws: Vec<(usize, RawChapterIndicators)> = engaged
                .iter()
                .map(|&(u, st)| {
                    let first = st.first_day.expect("engaged");
                    let imm = *frozen_immediacy.entry((k, u)).or_insert(release.release_day - first);
                    (
                        u,
                        RawChapterIndicators {
                            frequency: st.frequency,
                            immediacy: Some(imm),
                            diversity: st.activities.len() as u32,
                        },
                    )
                })
                .collect();

            let f = minmax_scale(&raws.iter().map(|(_, r)| f64::from(r.frequency)).collect::<Vec<_>>())?;
            let i =
                minmax_scale(&raws.iter().map(|(_, r)| r.immediacy.unwrap_or_default() as f64).collect::<Vec<_>>())?;
            let d = minmax_scale(&raws.iter().map(|(_, r)| f64::from(r.diversity)).collect::<Vec<_>>())?;

            let mut column = vec![0.0; users.len()];
            let mut scaled_by_user: BTreeMap<usize, (RawChapterIndicators, ScaledIndicators)> = BTreeMap::new();
            for (j, &(u, raw)) in raws.iter().enumerate() {
                let scaled = ScaledIndicators { frequency: f[j], immediacy: i[j], diversity: d[j] };
                column[u] = chapter_score(Some(&scaled));
                scaled_by_user.insert(u, (raw, scaled));
            }
            for (u, user) in users.iter().enumerate() {
                let (raw, scaled) = match scaled_by_user.get(&u) {
                    Some(&(raw, scaled)) => (raw, Some(scaled)),
                    None => (RawChapterIndicators::UNENGAGED, None),
                };
                indicators.push(ChapterIndicators { user: user.clone(), chapter: k, week: t, raw, scaled });
            }
            released.push(k);
            idf.push(column);
        }

        let weights = config.chapter_weights.for_released(released.len());
        let mut scores = Vec::with_capacity(users.len());
        let mut row = vec![0.0; released.len()];
        for u in 0..users.len() {
            for (j, col) in idf.iter().enumerate() {
                row[j] = col[u];
            }
            scores.push(engagement_score(&row, &weights)?);
        }
        weeks.push(WeekScores { week: t, released, scores, idf, weights, indicators });
    }

    Ok(EngagementSeries { users, weeks, releases: releases.into_values().collect() })
}

/// Writes `user, week, y` for every week plus, when requested, one `idf_<k>`
/// column per chapter released by the last week.
pub fn write_scores_csv<W: Write>(writer: W, series: &EngagementSeries, idf_columns: bool) -> Result<(), csv::Error> {
    write_weeks_csv(writer, series, &series.weeks, idf_columns)
}

/// Same layout as [`write_scores_csv`] restricted to one week.
pub fn write_week_csv<W: Write>(
    writer: W,
    series: &EngagementSeries,
    week: u32,
    idf_columns: bool,
) -> Result<(), csv::Error> {
    let weeks = series.week(week).map(std::slice::from_ref).unwrap_or_default();
    write_weeks_csv(writer, series, weeks, idf_columns)
}

fn write_weeks_csv<W: Write>(
    writer: W,
    series: &EngagementSeries,
    weeks: &[WeekScores],
    idf_columns: bool,
) -> Result<(), csv::Error> {
    let chapters: Vec<u32> =
        if idf_columns { weeks.last().map(|w| w.released.clone()).unwrap_or_default() } else { Vec::new() };
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["user".to_string(), "week".into(), "y".into()];
    header.extend(chapters.iter().map(|k| format!("idf_{k}")));
    wtr.write_record(&header)?;
    for (u, user) in series.users.iter().enumerate() {
        for w in weeks {
            let mut rec = vec![user.clone(), w.week.to_string(), w.scores[u].to_string()];
            for k in &chapters {
                let v = w.released.iter().position(|r| r == k).map_or(0.0, |j| w.idf[j][u]);
                rec.push(v.to_string());
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}
