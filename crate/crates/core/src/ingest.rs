//! Activity-log ingestion.
//!
//! Parses delimiter-separated VLE exports into [`LogEvent`]s, places each
//! event on the teaching calendar, attaches a chapter label, and applies the
//! grade-based exclusion rule.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";
pub const DEFAULT_CHAPTER_PATTERN: &str = r"(?i)\bch(?:apter)?\.?\s*(\d+)";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{column}` in header")]
    MissingColumn { column: String },
    #[error("line {line}: cannot parse timestamp `{raw}`")]
    BadTimestamp { line: u64, raw: String },
    #[error("line {line}: empty user identifier")]
    EmptyUser { line: u64 },
    #[error("line {line}: invalid grade `{raw}`")]
    InvalidGrade { line: u64, raw: String },
    #[error("user `{user}` has conflicting grade records")]
    DuplicateUser { user: String },
    #[error("invalid chapter pattern: {0}")]
    BadPattern(#[from] regex::Error),
    #[error("invalid calendar: {0}")]
    InvalidCalendar(String),
    #[error("invalid log format: {0}")]
    InvalidFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One click record from the VLE export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub time: NaiveDateTime,
    pub user: String,
    pub event_context: String,
    pub component: String,
    pub event_name: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogColumn {
    Time,
    User,
    EventContext,
    Component,
    EventName,
    Description,
}

impl LogEvent {
    pub fn field(&self, column: LogColumn) -> Cow<'_, str> {
        match column {
            LogColumn::Time => Cow::Owned(self.time.format(DEFAULT_TIMESTAMP_FORMAT).to_string()),
            LogColumn::User => Cow::Borrowed(&self.user),
            LogColumn::EventContext => Cow::Borrowed(&self.event_context),
            LogColumn::Component => Cow::Borrowed(&self.component),
            LogColumn::EventName => Cow::Borrowed(&self.event_name),
            LogColumn::Description => Cow::Borrowed(&self.description),
        }
    }
}

/// Header names for the six log columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub time: String,
    pub user: String,
    pub event_context: String,
    pub component: String,
    pub event_name: String,
    pub description: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            time: "Time".into(),
            user: "User".into(),
            event_context: "Event.context".into(),
            component: "Component".into(),
            event_name: "Event.name".into(),
            description: "Description".into(),
        }
    }
}

impl ColumnMapping {
    fn names(&self) -> [&str; 6] {
        [&self.time, &self.user, &self.event_context, &self.component, &self.event_name, &self.description]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BadRowPolicy {
    /// Abort on the first malformed row.
    #[default]
    Fail,
    /// Record the row in [`ParsedLog::rejected`] and continue.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogFormat {
    pub delimiter: char,
    pub timestamp_format: String,
    pub columns: ColumnMapping,
    pub on_bad_row: BadRowPolicy,
}

impl Default for LogFormat {
    fn default() -> Self {
        Self {
            delimiter: ',',
            timestamp_format: DEFAULT_TIMESTAMP_FORMAT.into(),
            columns: ColumnMapping::default(),
            on_bad_row: BadRowPolicy::Fail,
        }
    }
}

impl LogFormat {
    fn delimiter_byte(&self) -> Result<u8, IngestError> {
        u8::try_from(self.delimiter).ok().filter(u8::is_ascii).ok_or_else(|| {
            IngestError::InvalidFormat(format!("delimiter {:?} is not a single ASCII byte", self.delimiter))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub events: Vec<LogEvent>,
    pub rejected: Vec<RejectedRow>,
}

/// Parses a log export. Events come back in ascending time order; rows that
/// share a timestamp keep their input order.
pub fn parse_log<R: Read>(reader: R, format: &LogFormat) -> Result<ParsedLog, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(format.delimiter_byte()?).flexible(true).from_reader(reader);

    let headers = rdr.headers()?.clone();
    let mut index = [0usize; 6];
    for (slot, name) in index.iter_mut().zip(format.columns.names()) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn { column: name.to_string() })?;
    }
    let [i_time, i_user, i_ctx, i_comp, i_name, i_desc] = index;

    let mut parsed = ParsedLog::default();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |i: usize| record.get(i).unwrap_or("");

        let row = (|| {
            let raw_time = get(i_time).trim();
            let time = NaiveDateTime::parse_from_str(raw_time, &format.timestamp_format)
                .map_err(|_| IngestError::BadTimestamp { line, raw: raw_time.to_string() })?;
            let user = get(i_user).trim();
            if user.is_empty() {
                return Err(IngestError::EmptyUser { line });
            }
            Ok(LogEvent {
                time,
                user: user.to_string(),
                event_context: get(i_ctx).to_string(),
                component: get(i_comp).to_string(),
                event_name: get(i_name).to_string(),
                description: get(i_desc).to_string(),
            })
        })();

        match (row, format.on_bad_row) {
            (Ok(event), _) => parsed.events.push(event),
            (Err(err), BadRowPolicy::Skip) => parsed.rejected.push(RejectedRow { line, reason: err.to_string() }),
            (Err(err), BadRowPolicy::Fail) => return Err(err),
        }
    }

    parsed.events.sort_by_key(|e| e.time);
    Ok(parsed)
}

/// Writes events in the same layout [`parse_log`] reads.
pub fn write_log<W: Write>(writer: W, events: &[LogEvent], format: &LogFormat) -> Result<(), IngestError> {
    let mut wtr = csv::WriterBuilder::new().delimiter(format.delimiter_byte()?).from_writer(writer);
    wtr.write_record(format.columns.names())?;
    for e in events {
        let time = e.time.format(&format.timestamp_format).to_string();
        wtr.write_record([time.as_str(), &e.user, &e.event_context, &e.component, &e.event_name, &e.description])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Teaching calendar. Week `w` covers days `[(w-1)*len, w*len)` from `term_start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseCalendar {
    pub term_start: NaiveDate,
    #[serde(default = "default_num_weeks")]
    pub num_weeks: u32,
    #[serde(default = "default_week_length")]
    pub week_length_days: u32,
}

fn default_num_weeks() -> u32 {
    11
}

fn default_week_length() -> u32 {
    7
}

impl CourseCalendar {
    pub fn new(term_start: NaiveDate, num_weeks: u32, week_length_days: u32) -> Result<Self, IngestError> {
        let cal = Self { term_start, num_weeks, week_length_days };
        cal.validate()?;
        Ok(cal)
    }

    pub fn with_defaults(term_start: NaiveDate) -> Self {
        Self { term_start, num_weeks: default_num_weeks(), week_length_days: default_week_length() }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.num_weeks == 0 {
            return Err(IngestError::InvalidCalendar("num_weeks must be positive".into()));
        }
        if self.week_length_days == 0 {
            return Err(IngestError::InvalidCalendar("week_length_days must be positive".into()));
        }
        Ok(())
    }

    pub fn term_days(&self) -> i64 {
        i64::from(self.num_weeks) * i64::from(self.week_length_days)
    }

    /// Whole days since `term_start`; negative before the term.
    pub fn day_offset(&self, time: &NaiveDateTime) -> i64 {
        (time.date() - self.term_start).num_days()
    }

    /// Week number for a day offset, or `None` outside the teaching weeks.
    pub fn week_of_day(&self, day_offset: i64) -> Option<u32> {
        if day_offset < 0 || day_offset >= self.term_days() {
            return None;
        }
        Some((day_offset / i64::from(self.week_length_days)) as u32 + 1)
    }

    pub fn week_start_day(&self, week: u32) -> i64 {
        i64::from(week.saturating_sub(1)) * i64::from(self.week_length_days)
    }

    /// Measurement instant for `week`: the last minute of its final day.
    pub fn week_end(&self, week: u32) -> NaiveDateTime {
        let days = i64::from(week) * i64::from(self.week_length_days);
        self.term_start.and_hms_opt(0, 0, 0).expect("midnight is valid") + Duration::days(days) - Duration::minutes(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ChapterLabel {
    Chapter(u32),
    General,
    Excluded,
}

impl fmt::Display for ChapterLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChapterLabel::Chapter(k) => write!(f, "{k}"),
            ChapterLabel::General => f.write_str("general"),
            ChapterLabel::Excluded => f.write_str("excluded"),
        }
    }
}

impl FromStr for ChapterLabel {
    type Err = String;

    /// Accepts `3`, `chapter 3`, `chapter:3`, `general`, `excluded`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "general" => return Ok(ChapterLabel::General),
            "excluded" | "exclude" => return Ok(ChapterLabel::Excluded),
            _ => {}
        }
        let digits = lower.strip_prefix("chapter").map(|rest| rest.trim_start_matches([':', ' '])).unwrap_or(&lower);
        digits.parse::<u32>().map(ChapterLabel::Chapter).map_err(|_| format!("unrecognised chapter label `{s}`"))
    }
}

impl TryFrom<String> for ChapterLabel {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ChapterLabel> for String {
    fn from(label: ChapterLabel) -> Self {
        label.to_string()
    }
}

fn default_title_column() -> LogColumn {
    LogColumn::EventContext
}

fn default_chapter_pattern() -> String {
    DEFAULT_CHAPTER_PATTERN.into()
}

fn default_general_markers() -> Vec<String> {
    vec!["forum".into()]
}

/// Chapter labelling rules. Evaluation order: exact-title override, general
/// component marker, numeric pattern, fallback to General.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChapterRules {
    #[serde(default = "default_chapter_pattern")]
    pub numeric_pattern: String,
    #[serde(default = "default_title_column")]
    pub title_column: LogColumn,
    #[serde(default)]
    pub overrides: BTreeMap<String, ChapterLabel>,
    #[serde(default = "default_general_markers")]
    pub general_markers: Vec<String>,
}

impl Default for ChapterRules {
    fn default() -> Self {
        Self {
            numeric_pattern: default_chapter_pattern(),
            title_column: default_title_column(),
            overrides: BTreeMap::new(),
            general_markers: default_general_markers(),
        }
    }
}

impl ChapterRules {
    pub fn compile(&self) -> Result<ChapterClassifier<'_>, IngestError> {
        Ok(ChapterClassifier {
            rules: self,
            pattern: Regex::new(&self.numeric_pattern)?,
            markers: self.general_markers.iter().map(|m| m.trim().to_lowercase()).collect(),
        })
    }
}

#[derive(Debug)]
pub struct ChapterClassifier<'a> {
    rules: &'a ChapterRules,
    pattern: Regex,
    markers: BTreeSet<String>,
}

impl ChapterClassifier<'_> {
    pub fn classify(&self, event: &LogEvent) -> ChapterLabel {
        let title = event.field(self.rules.title_column);
        if let Some(label) = self.rules.overrides.get(title.trim()) {
            return *label;
        }
        if self.markers.contains(&event.component.trim().to_lowercase()) {
            return ChapterLabel::General;
        }
        self.pattern
            .captures(&title)
            .and_then(|caps| caps.get(1).or_else(|| caps.get(0)))
            .and_then(|m| m.as_str().parse::<u32>().ok())
            .map_or(ChapterLabel::General, ChapterLabel::Chapter)
    }
}

/// A log event placed on the calendar. `chapter` is never `Excluded` here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabeledEvent {
    pub event: LogEvent,
    pub week: u32,
    pub day_offset: i64,
    pub chapter: ChapterLabel,
}

/// Drops events outside the teaching weeks or labelled `Excluded`; every
/// retained event gets its week, day offset and chapter.
pub fn label_events<I>(events: I, calendar: &CourseCalendar, classifier: &ChapterClassifier<'_>) -> Vec<LabeledEvent>
where
    I: IntoIterator<Item = LogEvent>,
{
    events
        .into_iter()
        .filter_map(|event| {
            let day_offset = calendar.day_offset(&event.time);
            let week = calendar.week_of_day(day_offset)?;
            let chapter = classifier.classify(&event);
            (chapter != ChapterLabel::Excluded).then_some(LabeledEvent { event, week, day_offset, chapter })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub user: String,
    pub final_grade: f64,
    pub exam_grade: Option<f64>,
    pub excluded: bool,
}

impl GradeRecord {
    /// A zero final grade, or a zero exam component, marks an absence.
    pub fn new(user: impl Into<String>, final_grade: f64, exam_grade: Option<f64>) -> Self {
        let excluded = final_grade == 0.0 || exam_grade == Some(0.0);
        Self { user: user.into(), final_grade, exam_grade, excluded }
    }
}

/// Reads a grades file with columns `user`, `final_grade` and optionally `exam_grade`.
pub fn parse_grades<R: Read>(reader: R, delimiter: u8) -> Result<Vec<GradeRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let i_user = find("user").ok_or_else(|| IngestError::MissingColumn { column: "user".into() })?;
    let i_final = find("final_grade").ok_or_else(|| IngestError::MissingColumn { column: "final_grade".into() })?;
    let i_exam = find("exam_grade");

    let parse_grade = |raw: &str, line: u64| -> Result<f64, IngestError> {
        raw.trim()
            .parse::<f64>()
            .ok()
            .filter(|g| (0.0..=100.0).contains(g))
            .ok_or_else(|| IngestError::InvalidGrade { line, raw: raw.to_string() })
    };

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let user = record.get(i_user).unwrap_or("").trim();
        if user.is_empty() {
            return Err(IngestError::EmptyUser { line });
        }
        let final_grade = parse_grade(record.get(i_final).unwrap_or(""), line)?;
        let exam_grade = match i_exam.and_then(|i| record.get(i)).map(str::trim) {
            Some(raw) if !raw.is_empty() => Some(parse_grade(raw, line)?),
            _ => None,
        };
        out.push(GradeRecord::new(user, final_grade, exam_grade));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Exclusions {
    /// Retained records, sorted by user.
    pub retained: Vec<GradeRecord>,
    pub excluded: BTreeSet<String>,
}

impl Exclusions {
    pub fn grade_map(&self) -> BTreeMap<String, f64> {
        self.retained.iter().map(|g| (g.user.clone(), g.final_grade)).collect()
    }
}

/// Splits grade records into the retained cohort and the excluded user set.
/// Exact duplicate rows collapse; conflicting duplicates are an error.
pub fn apply_exclusions(grades: Vec<GradeRecord>) -> Result<Exclusions, IngestError> {
    let mut by_user: BTreeMap<String, GradeRecord> = BTreeMap::new();
    for record in grades {
        match by_user.get(&record.user) {
            Some(existing) if *existing != record => {
                return Err(IngestError::DuplicateUser { user: record.user });
            }
            Some(_) => {}
            None => {
                by_user.insert(record.user.clone(), record);
            }
        }
    }
    let mut out = Exclusions::default();
    for (user, record) in by_user {
        if record.excluded {
            out.excluded.insert(user);
        } else {
            out.retained.push(record);
        }
    }
    Ok(out)
}
