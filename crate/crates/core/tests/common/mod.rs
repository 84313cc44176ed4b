#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use vle_engagement::chapter_metric::{weekly_series, EngagementSeries, MetricConfig};
use vle_engagement::cohort_sim::{generate_cohort, SimConfig, SimulatedCohort};
use vle_engagement::coursewide_metric::{score_coursewide, CourseIndicator, CourseWideRow, CourseWideWeights};
use vle_engagement::ingest::{label_events, ChapterRules, LabeledEvent};
use vle_engagement::sessionizer::{compute_gap_threshold, sessionize, split_by_inactivity, Session, UserStreams};

/// One simulated cohort pushed through ingest, sessionizer and both metrics.
pub struct Scored {
    pub cohort: SimulatedCohort,
    pub sessions: Vec<Session>,
    pub series: EngagementSeries,
    pub coursewide: Vec<CourseWideRow>,
    /// Final grades aligned with `series.users`.
    pub grades: Vec<f64>,
}

pub fn labelled(config: &SimConfig, cohort: &SimulatedCohort) -> Vec<LabeledEvent> {
    let rules = ChapterRules::default();
    let classifier = rules.compile().unwrap();
    label_events(cohort.events.clone(), &config.calendar, &classifier)
}

pub fn score_simulated(config: &SimConfig, seed: u64, subset: &[CourseIndicator], roster_from_log: bool) -> Scored {
    let cohort = generate_cohort(config, seed).unwrap();
    let events = labelled(config, &cohort);
    let threshold = compute_gap_threshold(&events).unwrap();
    let roster: Vec<String> = if roster_from_log {
        events.iter().map(|e| e.event.user.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        cohort.grades.iter().filter(|g| !g.excluded).map(|g| g.user.clone()).collect()
    };
    let streams = UserStreams::new(events);
    let sessions = sessionize(&streams, &threshold);
    let series = weekly_series(&sessions, &roster, config.calendar.num_weeks, &MetricConfig::default()).unwrap();

    let mut raw: BTreeMap<String, Vec<&[LabeledEvent]>> = BTreeMap::new();
    for (user, evs) in streams.iter() {
        raw.insert(user.to_string(), split_by_inactivity(evs, &threshold));
    }
    let coursewide =
        score_coursewide(&raw, &roster, &Default::default(), &CourseWideWeights::default(), subset).unwrap();

    let grade_map: BTreeMap<&str, f64> = cohort.grades.iter().map(|g| (g.user.as_str(), g.final_grade)).collect();
    let grades = series.users.iter().map(|u| grade_map[u.as_str()]).collect();
    Scored { cohort, sessions, series, coursewide, grades }
}

/// `(week, y_t)` rows in the layout the evaluator expects.
pub fn weekly_rows(series: &EngagementSeries) -> Vec<(u32, Vec<f64>)> {
    series.weeks.iter().map(|w| (w.week, w.scores.clone())).collect()
}

pub fn coursewide_scores(rows: &[CourseWideRow]) -> Vec<f64> {
    rows.iter().map(|r| r.score).collect()
}
