//! File-level orchestration behind the command-line subcommands.
//!
//! Every command takes a resolved [`RunConfig`] and writes its artifacts into
//! `paths.out`. Randomness is confined to [`cmd_simulate`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chapter_metric::{
    weekly_series, write_scores_csv, write_week_csv, ActivityIdentity, ChapterRelease, ChapterWeights, MetricConfig,
};
use crate::cohort_sim::{generate_cohort, write_grades_csv, SimConfig};
use crate::coursewide_metric::{score_coursewide, write_coursewide_csv, CourseIndicator, CourseWideWeights};
use crate::evaluation::{
    evaluate, write_alignment_csv, write_classification_csv, write_grade_rho_csv, write_quintiles_csv, EvaluationInput,
    EvaluationReport, FAIL, LOW_PERFORMANCE,
};
use crate::ingest::{
    apply_exclusions, label_events, parse_grades, parse_log, write_log, ChapterRules, CourseCalendar, Exclusions,
    LabeledEvent, LogFormat, RejectedRow,
};
use crate::sessionizer::{
    resolve_threshold, sessionize, split_by_inactivity, write_sessions_csv, ThresholdSource, UserStreams,
};
use crate::{Error, Result};

pub const SCORES_FILE: &str = "scores.csv";
pub const WEEKLY_SCORES_FILE: &str = "weekly_scores.csv";
pub const SESSIONS_FILE: &str = "sessions.csv";
pub const SCORE_MANIFEST_FILE: &str = "score_manifest.json";
pub const COURSEWIDE_FILE: &str = "coursewide.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ALIGNMENT_FILE: &str = "alignment.csv";
pub const GRADE_RHO_FILE: &str = "grade_rho.csv";
pub const QUINTILES_FILE: &str = "quintiles.csv";
pub const CLASSIFICATION_FILE: &str = "classification.csv";
pub const LOG_FILE: &str = "log.csv";
pub const GRADES_FILE: &str = "grades.csv";
pub const SIM_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Defaults to `<out>/log.csv`.
    pub log: Option<PathBuf>,
    /// Defaults to `<out>/grades.csv`.
    pub grades: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { log: None, grades: None, out: PathBuf::from("out") }
    }
}

impl Paths {
    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| self.out.join(LOG_FILE))
    }

    pub fn grades_path(&self) -> PathBuf {
        self.grades.clone().unwrap_or_else(|| self.out.join(GRADES_FILE))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    /// One weight per released chapter; uniform when absent.
    pub chapter_weights: Option<Vec<f64>>,
    pub activity: ActivityIdentity,
    pub idf_columns: bool,
    pub write_sessions: bool,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self { chapter_weights: None, activity: ActivityIdentity::default(), idf_columns: true, write_sessions: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoursewideSection {
    pub weights: CourseWideWeights,
    pub indicators: Vec<CourseIndicator>,
}

impl Default for CoursewideSection {
    fn default() -> Self {
        Self { weights: CourseWideWeights::default(), indicators: CourseIndicator::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Grade cut-offs; a student below a cut-off is a positive.
    pub thresholds: Vec<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { thresholds: vec![LOW_PERFORMANCE, FAIL] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Weeks `1..=as_of_week` are scored; defaults to the full term.
    pub as_of_week: Option<u32>,
    pub threshold_minutes: Option<f64>,
    pub seed: u64,
    pub paths: Paths,
    /// Falls back to the simulation calendar when absent.
    pub calendar: Option<CourseCalendar>,
    pub format: LogFormat,
    pub rules: ChapterRules,
    pub metric: MetricSection,
    pub coursewide: CoursewideSection,
    pub evaluation: EvaluationSection,
    pub simulate: Option<SimConfig>,
}

impl RunConfig {
    /// Reads a TOML config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.paths.out);
        config.paths.log.as_mut().map(resolve);
        config.paths.grades.as_mut().map(resolve);
        Ok(config)
    }

    pub fn calendar(&self) -> Result<CourseCalendar> {
        let calendar = match (&self.calendar, &self.simulate) {
            (Some(c), _) => c.clone(),
            (None, Some(sim)) => sim.calendar.clone(),
            (None, None) => return Err(Error::Config("a [calendar] section with term_start is required".into())),
        };
        calendar.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(calendar)
    }

    pub fn as_of_week(&self) -> Result<u32> {
        let calendar = self.calendar()?;
        let week = self.as_of_week.unwrap_or(calendar.num_weeks);
        if week == 0 || week > calendar.num_weeks {
            return Err(Error::Config(format!("as-of week {week} must lie in [1, {}]", calendar.num_weeks)));
        }
        Ok(week)
    }

    pub fn sim_config(&self) -> SimConfig {
        self.simulate.clone().unwrap_or_default()
    }

    fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            chapter_weights: ChapterWeights::from_option(self.metric.chapter_weights.clone()),
            activity: self.metric.activity.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.as_of_week()?;
        if let Some(m) = self.threshold_minutes {
            crate::sessionizer::GapThreshold::configured(m)?;
        }
        if self.coursewide.indicators.is_empty() {
            return Err(Error::Config("coursewide.indicators must not be empty".into()));
        }
        if self.evaluation.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("evaluation thresholds must be finite".into()));
        }
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(Error::io(path))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(Error::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io { path: path.into(), source: e.into() })?;
    writeln!(w).and_then(|_| w.flush()).map_err(Error::io(path))
}

/// Cohort inputs shared by the scoring commands.
struct Prepared {
    events: Vec<LabeledEvent>,
    roster: Vec<String>,
    exclusions: Option<Exclusions>,
    events_read: usize,
    rejected: Vec<RejectedRow>,
}

fn load_grades(path: &Path) -> Result<Exclusions> {
    let records = parse_grades(open(path)?, b',').map_err(Error::ingest(path))?;
    apply_exclusions(records).map_err(Error::ingest(path))
}

fn prepare(config: &RunConfig, through_week: u32) -> Result<Prepared> {
    let calendar = config.calendar()?;
    let classifier = config.rules.compile().map_err(|e| Error::Config(e.to_string()))?;
    let log_path = config.paths.log_path();
    let parsed = parse_log(open(&log_path)?, &config.format).map_err(Error::ingest(&log_path))?;
    let events_read = parsed.events.len() + parsed.rejected.len();

    let grades_path = config.paths.grades_path();
    let exclusions =
        if config.paths.grades.is_some() || grades_path.exists() { Some(load_grades(&grades_path)?) } else { None };
    let excluded = exclusions.as_ref().map(|e| &e.excluded);
    let is_excluded = |user: &str| excluded.is_some_and(|set| set.contains(user));

    let events: Vec<LabeledEvent> = label_events(parsed.events, &calendar, &classifier)
        .into_iter()
        .filter(|e| e.week <= through_week && !is_excluded(&e.event.user))
        .collect();

    let mut roster: BTreeSet<String> = events.iter().map(|e| e.event.user.clone()).collect();
    if let Some(ex) = &exclusions {
        roster.extend(ex.retained.iter().map(|g| g.user.clone()));
    }
    Ok(Prepared { events, roster: roster.into_iter().collect(), exclusions, events_read, rejected: parsed.rejected })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreManifest {
    pub as_of_week: u32,
    pub threshold_minutes: f64,
    pub threshold_source: ThresholdSource,
    pub cohort_size: usize,
    pub excluded_users: usize,
    pub events_read: usize,
    pub events_scored: usize,
    pub sessions: usize,
    pub rejected_rows: Vec<RejectedRow>,
    pub releases: Vec<ChapterRelease>,
}

/// Chapter-aligned scores for weeks `1..=as_of_week`.
pub fn cmd_score(config: &RunConfig) -> Result<ScoreManifest> {
    config.validate()?;
    let as_of = config.as_of_week()?;
    let prep = prepare(config, as_of)?;
    let threshold = resolve_threshold(config.threshold_minutes, &prep.events)?;
    let events_scored = prep.events.len();
    let streams = UserStreams::new(prep.events);
    let sessions = sessionize(&streams, &threshold);
    let series = weekly_series(&sessions, &prep.roster, as_of, &config.metric_config())?;
    if let Some(violation) = series.bound_violation() {
        return Err(Error::Invariant(violation));
    }

    let out = &config.paths.out;
    let path = out.join(SCORES_FILE);
    let mut w = create(&path)?;
    write_week_csv(&mut w, &series, as_of, config.metric.idf_columns).map_err(Error::csv(&path))?;
    w.flush().map_err(Error::io(&path))?;
    let path = out.join(WEEKLY_SCORES_FILE);
    let mut w = create(&path)?;
    write_scores_csv(&mut w, &series, config.metric.idf_columns).map_err(Error::csv(&path))?;
    w.flush().map_err(Error::io(&path))?;
    if config.metric.write_sessions {
        let path = out.join(SESSIONS_FILE);
        write_sessions_csv(create(&path)?, &sessions)?;
    }

    let manifest = ScoreManifest {
        as_of_week: as_of,
        threshold_minutes: threshold.minutes(),
        threshold_source: threshold.source(),
        cohort_size: series.users.len(),
        excluded_users: prep.exclusions.as_ref().map_or(0, |e| e.excluded.len()),
        events_read: prep.events_read,
        events_scored,
        sessions: sessions.len(),
        rejected_rows: prep.rejected,
        releases: series.releases,
    };
    write_json(&out.join(SCORE_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Retrospective course-wide scores over the full term.
pub fn cmd_score_coursewide(config: &RunConfig) -> Result<usize> {
    config.validate()?;
    let calendar = config.calendar()?;
    let prep = prepare(config, calendar.num_weeks)?;
    let threshold = resolve_threshold(config.threshold_minutes, &prep.events)?;
    let streams = UserStreams::new(prep.events);
    let mut by_user: BTreeMap<String, Vec<&[LabeledEvent]>> = BTreeMap::new();
    for (user, events) in streams.iter() {
        by_user.insert(user.to_string(), split_by_inactivity(events, &threshold));
    }
    let rows = score_coursewide(
        &by_user,
        &prep.roster,
        &config.metric.activity,
        &config.coursewide.weights,
        &config.coursewide.indicators,
    )?;
    let path = config.paths.out.join(COURSEWIDE_FILE);
    let mut w = create(&path)?;
    write_coursewide_csv(&mut w, &rows).map_err(Error::csv(&path))?;
    w.flush().map_err(Error::io(&path))?;
    Ok(rows.len())
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::Malformed { path: path.into(), message: message.into() }
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| malformed(path, format!("missing column `{name}`")))
}

fn parse_number(raw: &str, path: &Path, line: u64) -> Result<f64> {
    raw.parse().map_err(|_| malformed(path, format!("line {line}: `{raw}` is not a number")))
}

/// Sorted users and `(week, y per user)` rows.
type ScoreTable = (Vec<String>, Vec<(u32, Vec<f64>)>);

/// Reads `user, week, y` rows back into a dense user × week table.
fn read_scores(path: &Path) -> Result<ScoreTable> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let headers = rdr.headers().map_err(Error::csv(path))?.clone();
    let (iu, iw, iy) = (column(&headers, "user", path)?, column(&headers, "week", path)?, column(&headers, "y", path)?);
    let mut cells: BTreeMap<(u32, String), f64> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(Error::csv(path))?;
        let line = record.position().map_or(0, |p| p.line());
        let user = record.get(iu).unwrap_or("").to_string();
        let week_raw = record.get(iw).unwrap_or("");
        let week: u32 = week_raw.parse().map_err(|_| malformed(path, format!("line {line}: bad week `{week_raw}`")))?;
        let y = parse_number(record.get(iy).unwrap_or(""), path, line)?;
        if cells.insert((week, user.clone()), y).is_some() {
            return Err(malformed(path, format!("line {line}: duplicate row for `{user}` in week {week}")));
        }
    }
    let users: Vec<String> = cells.keys().map(|(_, u)| u.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let weeks: Vec<u32> = cells.keys().map(|(w, _)| *w).collect::<BTreeSet<_>>().into_iter().collect();
    let mut table = Vec::with_capacity(weeks.len());
    for &week in &weeks {
        let mut row = Vec::with_capacity(users.len());
        for user in &users {
            let y = cells
                .get(&(week, user.clone()))
                .ok_or_else(|| malformed(path, format!("no score for `{user}` in week {week}")))?;
            row.push(*y);
        }
        table.push((week, row));
    }
    Ok((users, table))
}

fn read_coursewide(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let headers = rdr.headers().map_err(Error::csv(path))?.clone();
    let (iu, is) = (column(&headers, "user", path)?, column(&headers, "score", path)?);
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(Error::csv(path))?;
        let line = record.position().map_or(0, |p| p.line());
        let score = parse_number(record.get(is).unwrap_or(""), path, line)?;
        out.insert(record.get(iu).unwrap_or("").to_string(), score);
    }
    Ok(out)
}

fn first_difference<'a>(a: &'a BTreeSet<&'a str>, b: &'a BTreeSet<&'a str>) -> Option<&'a str> {
    a.difference(b).next().copied()
}

/// Evaluates previously written `weekly_scores.csv` and `coursewide.csv` against grades.
pub fn cmd_evaluate(config: &RunConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let out = &config.paths.out;
    let grades_path = config.paths.grades_path();
    if !grades_path.exists() {
        return Err(Error::MissingGrades(format!("{} not found", grades_path.display())));
    }
    let grades = load_grades(&grades_path)?.grade_map();
    let (users, weekly) = read_scores(&out.join(WEEKLY_SCORES_FILE))?;
    let coursewide = read_coursewide(&out.join(COURSEWIDE_FILE))?;

    let scored: BTreeSet<&str> = users.iter().map(String::as_str).collect();
    let graded: BTreeSet<&str> = grades.keys().map(String::as_str).collect();
    let course: BTreeSet<&str> = coursewide.keys().map(String::as_str).collect();
    if let Some(user) = first_difference(&scored, &graded) {
        return Err(Error::CohortMismatch { user: user.into(), detail: "scored but has no retained grade".into() });
    }
    if let Some(user) = first_difference(&graded, &scored) {
        return Err(Error::CohortMismatch { user: user.into(), detail: "graded but not scored".into() });
    }
    if let Some(user) = first_difference(&scored, &course).or_else(|| first_difference(&course, &scored)) {
        return Err(Error::CohortMismatch {
            user: user.into(),
            detail: "chapter and course-wide score files cover different students".into(),
        });
    }

    let grade_vec: Vec<f64> = users.iter().map(|u| grades[u]).collect();
    let course_vec: Vec<f64> = users.iter().map(|u| coursewide[u]).collect();
    let report = evaluate(&EvaluationInput {
        users: &users,
        weekly: &weekly,
        coursewide: &course_vec,
        grades: &grade_vec,
        thresholds: &config.evaluation.thresholds,
    })?;

    write_json(&out.join(REPORT_FILE), &report)?;
    type Writer = fn(&mut BufWriter<File>, &EvaluationReport) -> std::result::Result<(), csv::Error>;
    let writers: [(&str, Writer); 4] = [
        (ALIGNMENT_FILE, |w, r| write_alignment_csv(w, r)),
        (GRADE_RHO_FILE, |w, r| write_grade_rho_csv(w, r)),
        (QUINTILES_FILE, |w, r| write_quintiles_csv(w, r)),
        (CLASSIFICATION_FILE, |w, r| write_classification_csv(w, r)),
    ];
    for (name, write) in writers {
        let path = out.join(name);
        let mut w = create(&path)?;
        write(&mut w, &report).map_err(Error::csv(&path))?;
        w.flush().map_err(Error::io(&path))?;
    }
    Ok(report)
}

/// Score, course-wide score and evaluation in sequence.
pub fn cmd_report(config: &RunConfig) -> Result<EvaluationReport> {
    cmd_score(config)?;
    cmd_score_coursewide(config)?;
    cmd_evaluate(config)
}

#[derive(Debug, Clone, Serialize)]
pub struct SimManifest {
    pub seed: u64,
    pub n_events: usize,
    pub archetype_counts: BTreeMap<String, usize>,
    pub config: SimConfig,
}

/// Writes a synthetic `log.csv`, `grades.csv` and `manifest.json` into `paths.out`.
pub fn cmd_simulate(config: &RunConfig) -> Result<SimManifest> {
    let sim = config.sim_config();
    let cohort = generate_cohort(&sim, config.seed)?;
    let out = &config.paths.out;

    let path = out.join(LOG_FILE);
    let mut w = create(&path)?;
    write_log(&mut w, &cohort.events, &LogFormat::default()).map_err(Error::ingest(&path))?;
    w.flush().map_err(Error::io(&path))?;

    let path = out.join(GRADES_FILE);
    let mut w = create(&path)?;
    write_grades_csv(&mut w, &cohort.grades).map_err(Error::csv(&path))?;
    w.flush().map_err(Error::io(&path))?;

    let mut archetype_counts = BTreeMap::new();
    for t in &cohort.truth {
        *archetype_counts.entry(t.archetype.clone()).or_insert(0) += 1;
    }
    let manifest = SimManifest { seed: config.seed, n_events: cohort.events.len(), archetype_counts, config: sim };
    write_json(&out.join(SIM_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
