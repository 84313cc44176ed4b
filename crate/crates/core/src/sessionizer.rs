//! Study-session extraction.
//!
//! A user's labelled stream is first cut at every inactivity gap longer than
//! the course threshold, then each raw session is split again wherever a new
//! chapter appears.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::ingest::{ChapterLabel, LabeledEvent};

/// Gaps above this many minutes are left out of the percentile sample.
pub const GAP_WINDOW_MINUTES: f64 = 120.0;
/// Percentile used for the computed threshold.
pub const GAP_PERCENTILE: u64 = 95;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("no inactivity gaps within {GAP_WINDOW_MINUTES} minutes; configure a threshold explicitly")]
    InsufficientData,
    #[error("threshold must lie in (0, {GAP_WINDOW_MINUTES}] minutes, got {0}")]
    InvalidThreshold(f64),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Computed,
    Configured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapThreshold {
    minutes: f64,
    source: ThresholdSource,
}

impl GapThreshold {
    pub fn configured(minutes: f64) -> Result<Self, SessionError> {
        Self::checked(minutes, ThresholdSource::Configured)
    }

    fn checked(minutes: f64, source: ThresholdSource) -> Result<Self, SessionError> {
        if minutes.is_finite() && minutes > 0.0 && minutes <= GAP_WINDOW_MINUTES {
            Ok(Self { minutes, source })
        } else {
            Err(SessionError::InvalidThreshold(minutes))
        }
    }

    pub fn minutes(&self) -> f64 {
        self.minutes
    }

    pub fn source(&self) -> ThresholdSource {
        self.source
    }
}

fn gap_minutes(a: &LabeledEvent, b: &LabeledEvent) -> f64 {
    (b.event.time - a.event.time).num_seconds() as f64 / 60.0
}

/// Nearest-rank percentile of the positive same-user gaps no longer than
/// [`GAP_WINDOW_MINUTES`]. `events` must be time-sorted; users may interleave.
pub fn compute_gap_threshold(events: &[LabeledEvent]) -> Result<GapThreshold, SessionError> {
    let mut last_seen: HashMap<&str, &LabeledEvent> = HashMap::new();
    let mut gaps = Vec::new();
    for e in events {
        if let Some(prev) = last_seen.insert(e.event.user.as_str(), e) {
            let gap = gap_minutes(prev, e);
            if gap > 0.0 && gap <= GAP_WINDOW_MINUTES {
                gaps.push(gap);
            }
        }
    }
    if gaps.is_empty() {
        return Err(SessionError::InsufficientData);
    }
    gaps.sort_by(f64::total_cmp);
    // 1-based rank ceil(p*n/100), in integer arithmetic
    let n = gaps.len() as u64;
    let rank = (GAP_PERCENTILE * n).div_ceil(100).max(1);
    GapThreshold::checked(gaps[(rank - 1) as usize], ThresholdSource::Computed)
}

/// Returns the configured threshold unchanged, else computes one from `events`.
pub fn resolve_threshold(configured: Option<f64>, events: &[LabeledEvent]) -> Result<GapThreshold, SessionError> {
    match configured {
        Some(minutes) => GapThreshold::configured(minutes),
        None => compute_gap_threshold(events),
    }
}

/// Splits one user's time-sorted events wherever the gap to the previous
/// event exceeds the threshold.
pub fn split_by_inactivity<'a>(events: &'a [LabeledEvent], threshold: &GapThreshold) -> Vec<&'a [LabeledEvent]> {
    debug_assert!(events.windows(2).all(|w| w[0].event.user == w[1].event.user));
    let mut sessions = Vec::new();
    let mut start = 0;
    for i in 1..events.len() {
        if gap_minutes(&events[i - 1], &events[i]) > threshold.minutes {
            sessions.push(&events[start..i]);
            start = i;
        }
    }
    if start < events.len() {
        sessions.push(&events[start..]);
    }
    sessions
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SessionChapter {
    Chapter(u32),
    /// Only general or unlabelled material; ignored by the chapter metric.
    GeneralOnly,
}

impl fmt::Display for SessionChapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionChapter::Chapter(k) => write!(f, "{k}"),
            SessionChapter::GeneralOnly => f.write_str("general"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Session {
    pub user: String,
    pub events: Vec<LabeledEvent>,
    pub start_day_offset: i64,
    pub week: u32,
    pub chapter: SessionChapter,
}

impl Session {
    fn from_events(events: Vec<LabeledEvent>, chapter: SessionChapter) -> Self {
        let first = &events[0];
        Self { user: first.event.user.clone(), start_day_offset: first.day_offset, week: first.week, chapter, events }
    }

    pub fn chapter_number(&self) -> Option<u32> {
        match self.chapter {
            SessionChapter::Chapter(k) => Some(k),
            SessionChapter::GeneralOnly => None,
        }
    }

    pub fn excluded_from_metrics(&self) -> bool {
        self.chapter == SessionChapter::GeneralOnly
    }
}

/// Anything with a non-empty, time-ordered run of events.
pub trait SessionSpan {
    fn span_events(&self) -> &[LabeledEvent];

    fn start_day(&self) -> i64 {
        self.span_events()[0].day_offset
    }
}

impl SessionSpan for Session {
    fn span_events(&self) -> &[LabeledEvent] {
        &self.events
    }

    fn start_day(&self) -> i64 {
        self.start_day_offset
    }
}

impl SessionSpan for [LabeledEvent] {
    fn span_events(&self) -> &[LabeledEvent] {
        self
    }
}

/// Applies the new-chapter-starts-a-new-session rule to each raw session.
///
/// General events before the first chapter event join that chapter's
/// session; later general events stay with the current chapter. A raw
/// session with no chapter events at all becomes one `GeneralOnly` session.
pub fn attribute_chapter_sessions(raw: &[&[LabeledEvent]]) -> Vec<Session> {
    let mut out = Vec::new();
    for run in raw {
        let mut current: Option<u32> = None;
        let mut buf: Vec<LabeledEvent> = Vec::new();
        for e in run.iter() {
            if let ChapterLabel::Chapter(k) = e.chapter {
                match current {
                    Some(c) if c != k => {
                        out.push(Session::from_events(std::mem::take(&mut buf), SessionChapter::Chapter(c)));
                        current = Some(k);
                    }
                    None => current = Some(k),
                    Some(_) => {}
                }
            }
            buf.push(e.clone());
        }
        if !buf.is_empty() {
            let chapter = current.map_or(SessionChapter::GeneralOnly, SessionChapter::Chapter);
            out.push(Session::from_events(buf, chapter));
        }
    }
    out
}

/// Events regrouped so each user's stream is one contiguous, time-ordered run.
#[derive(Debug, Clone, Default)]
pub struct UserStreams {
    events: Vec<LabeledEvent>,
    spans: Vec<(usize, usize)>,
}

impl UserStreams {
    pub fn new(mut events: Vec<LabeledEvent>) -> Self {
        // stable: time order (and input order among equal times) survives
        events.sort_by(|a, b| a.event.user.cmp(&b.event.user));
        let mut spans = Vec::new();
        let mut start = 0;
        for i in 1..=events.len() {
            if i == events.len() || events[i].event.user != events[start].event.user {
                if start < i {
                    spans.push((start, i));
                }
                start = i;
            }
        }
        Self { events, spans }
    }

    /// `(user, events)` pairs in ascending user order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[LabeledEvent])> + '_ {
        self.spans.iter().map(|&(a, b)| (self.events[a].event.user.as_str(), &self.events[a..b]))
    }

    pub fn users(&self) -> impl Iterator<Item = &str> + '_ {
        self.iter().map(|(u, _)| u)
    }

    pub fn all_events(&self) -> &[LabeledEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Chapter-attributed sessions for every user, ordered by user then time.
pub fn sessionize(streams: &UserStreams, threshold: &GapThreshold) -> Vec<Session> {
    streams.iter().flat_map(|(_, events)| attribute_chapter_sessions(&split_by_inactivity(events, threshold))).collect()
}

/// Writes `user, session_index, chapter, week, start_day_offset, n_events`.
pub fn write_sessions_csv<W: Write>(writer: W, sessions: &[Session]) -> Result<(), SessionError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["user", "session_index", "chapter", "week", "start_day_offset", "n_events"])?;
    let mut index = 0usize;
    let mut prev_user: Option<&str> = None;
    for s in sessions {
        if prev_user != Some(s.user.as_str()) {
            index = 0;
            prev_user = Some(&s.user);
        }
        index += 1;
        wtr.write_record([
            s.user.clone(),
            index.to_string(),
            s.chapter.to_string(),
            s.week.to_string(),
            s.start_day_offset.to_string(),
            s.events.len().to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
