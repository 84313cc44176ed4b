//! Seeded synthetic cohorts.
//!
//! Each student draws an archetype and a latent propensity multiplier. The
//! multiplier raises session rates and activity breadth and shortens
//! first-access delays; final grades load on the latent engagement through
//! [`GradeModel::engagement_coefficient`]. Sessions are emitted as short click
//! bursts (intra-gaps under five minutes) placed in well-separated time
//! slots, so the sessionizer recovers them one-for-one.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CourseCalendar, GradeRecord, LogEvent};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeConfig {
    pub name: String,
    /// Mean sessions per chapter per active week.
    pub session_rate_mean: f64,
    /// Variance of the gamma mixing factor on the rate; 0 gives plain Poisson.
    #[serde(default)]
    pub session_rate_dispersion: f64,
    /// Mean days from chapter release to first access.
    pub first_access_delay_days: f64,
    /// Mean distinct activities per session.
    pub activity_breadth: f64,
    /// No activity from the start of this week on.
    #[serde(default)]
    pub dropout_week: Option<u32>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeModel {
    pub base: f64,
    /// Grade points per standard deviation of latent engagement.
    pub engagement_coefficient: f64,
    pub noise_scale: f64,
}

impl Default for GradeModel {
    fn default() -> Self {
        Self { base: 62.0, engagement_coefficient: 12.0, noise_scale: 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChapterPlan {
    pub count: u32,
    /// Release week per chapter; chapter `k` opens in week `k` when absent.
    pub release_weeks: Option<Vec<u32>>,
    pub resources_per_chapter: u32,
    /// Weeks after release during which a chapter attracts sessions.
    pub active_weeks: u32,
}

impl Default for ChapterPlan {
    fn default() -> Self {
        Self { count: 11, release_weeks: None, resources_per_chapter: 8, active_weeks: 2 }
    }
}

impl ChapterPlan {
    pub fn release_week(&self, chapter: u32) -> u32 {
        self.release_weeks.as_ref().and_then(|w| w.get(chapter as usize - 1).copied()).unwrap_or(chapter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneralActivity {
    /// `(title, component)` pairs for non-chapter resources.
    pub resources: Vec<(String, String)>,
    /// Chance per active week of a separate general-only visit.
    pub session_prob: f64,
    /// Chance that a chapter session also touches a general resource.
    pub click_prob: f64,
}

impl Default for GeneralActivity {
    fn default() -> Self {
        Self {
            resources: vec![
                ("Course forum".into(), "Forum".into()),
                ("Module handbook".into(), "File".into()),
                ("Announcements".into(), "Forum".into()),
            ],
            session_prob: 0.3,
            click_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_students: usize,
    pub calendar: CourseCalendar,
    pub chapters: ChapterPlan,
    pub general: GeneralActivity,
    pub archetypes: Vec<ArchetypeConfig>,
    pub grade_model: GradeModel,
    /// Standard deviation of the per-student log propensity.
    pub propensity_spread: f64,
}

pub fn default_term_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2022, 9, 26).expect("valid date")
}

pub fn default_archetypes() -> Vec<ArchetypeConfig> {
    let a = |name: &str, rate, delay, breadth, dropout, weight| ArchetypeConfig {
        name: name.into(),
        session_rate_mean: rate,
        session_rate_dispersion: 0.3,
        first_access_delay_days: delay,
        activity_breadth: breadth,
        dropout_week: dropout,
        weight,
    };
    vec![
        a("engaged", 2.0, 1.0, 4.0, None, 0.3),
        a("steady", 1.3, 2.0, 3.0, None, 0.35),
        a("lagging", 0.7, 4.0, 2.0, None, 0.25),
        a("dropout", 1.2, 2.5, 2.5, Some(5), 0.1),
    ]
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_students: 200,
            calendar: CourseCalendar::with_defaults(default_term_start()),
            chapters: ChapterPlan::default(),
            general: GeneralActivity::default(),
            archetypes: default_archetypes(),
            grade_model: GradeModel::default(),
            propensity_spread: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.calendar.validate().map_err(|e| invalid(e.to_string()))?;
        if self.n_students == 0 {
            return Err(invalid("n_students must be positive"));
        }
        if self.archetypes.is_empty() {
            return Err(invalid("at least one archetype is required"));
        }
        let mut total = 0.0;
        for a in &self.archetypes {
            let fields = [
                a.session_rate_mean,
                a.session_rate_dispersion,
                a.first_access_delay_days,
                a.activity_breadth,
                a.weight,
            ];
            if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(invalid(format!("archetype `{}` has a negative or non-finite parameter", a.name)));
            }
            total += a.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("archetype weights sum to {total}, expected 1")));
        }
        if self.chapters.count == 0 || self.chapters.resources_per_chapter == 0 || self.chapters.active_weeks == 0 {
            return Err(invalid("chapter count, resources per chapter and active weeks must be positive"));
        }
        if let Some(weeks) = &self.chapters.release_weeks {
            if weeks.len() != self.chapters.count as usize {
                return Err(invalid("release_weeks must list one week per chapter"));
            }
        }
        for k in 1..=self.chapters.count {
            let w = self.chapters.release_week(k);
            if w == 0 || w > self.calendar.num_weeks {
                return Err(invalid(format!("chapter {k} release week {w} lies outside the term")));
            }
        }
        for p in [self.general.session_prob, self.general.click_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid("general activity probabilities must lie in [0, 1]"));
            }
        }
        let g = &self.grade_model;
        if !g.base.is_finite()
            || !g.engagement_coefficient.is_finite()
            || !g.noise_scale.is_finite()
            || g.noise_scale < 0.0
        {
            return Err(invalid("grade model parameters must be finite with non-negative noise"));
        }
        if !self.propensity_spread.is_finite() || self.propensity_spread < 0.0 {
            return Err(invalid("propensity_spread must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentTruth {
    pub user: String,
    pub archetype: String,
    /// Expected chapter sessions over the term.
    pub latent_engagement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCohort {
    /// Sorted by time, then user.
    pub events: Vec<LogEvent>,
    pub grades: Vec<GradeRecord>,
    pub truth: Vec<StudentTruth>,
}

const SLOT_HOURS: [u32; 5] = [8, 11, 14, 17, 20];
const RESOURCE_KINDS: [(&str, &str, &str); 6] = [
    ("Notes", "File", "Course module viewed"),
    ("Slides", "File", "Course module viewed"),
    ("Video", "URL", "Course module viewed"),
    ("Quiz", "Quiz", "Quiz attempt viewed"),
    ("Problem Sheet", "Assignment", "Course module viewed"),
    ("Exercises", "Page", "Course module viewed"),
];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn student_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ stream.rotate_left(32)) ^ index as u64))
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

#[derive(Debug, Clone)]
struct Resource {
    title: String,
    component: String,
    event_name: String,
    module_id: u32,
}

fn chapter_resources(chapter: u32, count: u32) -> Vec<Resource> {
    (0..count)
        .map(|j| {
            let (kind, component, event_name) = RESOURCE_KINDS[j as usize % RESOURCE_KINDS.len()];
            let round = j as usize / RESOURCE_KINDS.len();
            let title = if round == 0 {
                format!("Chapter {chapter} {kind}")
            } else {
                format!("Chapter {chapter} {kind} {}", round + 1)
            };
            Resource {
                title,
                component: component.into(),
                event_name: event_name.into(),
                module_id: 1000 + chapter * 100 + j,
            }
        })
        .collect()
}

struct StudentPlan {
    user: String,
    numeric_id: u32,
    archetype: usize,
    propensity: f64,
}

struct Emitter {
    term_start: NaiveDateTime,
    occupied: BTreeSet<(i64, usize)>,
    out: Vec<LogEvent>,
}

impl Emitter {
    fn click(&mut self, time: NaiveDateTime, user: &str, numeric_id: u32, r: &Resource) {
        self.out.push(LogEvent {
            time,
            user: user.to_string(),
            event_context: r.title.clone(),
            component: r.component.clone(),
            event_name: r.event_name.clone(),
            description: format!(
                "The user with id '{numeric_id}' viewed the '{}' activity with course module id '{}'.",
                r.component.to_lowercase(),
                r.module_id
            ),
        });
    }

    /// Claims a free slot on `day`; `None` once all slots that day are used.
    fn claim_slot<R: Rng>(&mut self, rng: &mut R, day: i64) -> Option<NaiveDateTime> {
        let free: Vec<usize> = (0..SLOT_HOURS.len()).filter(|s| !self.occupied.contains(&(day, *s))).collect();
        if free.is_empty() {
            return None;
        }
        let slot = free[rng.random_range(0..free.len())];
        self.occupied.insert((day, slot));
        let minute = rng.random_range(0..30);
        Some(
            self.term_start
                + Duration::days(day)
                + Duration::hours(i64::from(SLOT_HOURS[slot]))
                + Duration::minutes(minute),
        )
    }

    fn burst<R: Rng>(&mut self, rng: &mut R, start: NaiveDateTime, student: &StudentPlan, resources: &[&Resource]) {
        let mut t = start;
        let mut first = true;
        for r in resources {
            let clicks = 1 + usize::from(rng.random_bool(0.4));
            for _ in 0..clicks {
                if !first {
                    t += Duration::minutes(rng.random_range(0..5));
                }
                first = false;
                self.click(t, &student.user, student.numeric_id, r);
            }
        }
    }
}

/// Generates a cohort. Identical `(config, seed)` gives identical output.
pub fn generate_cohort(config: &SimConfig, seed: u64) -> Result<SimulatedCohort, SimError> {
    config.validate()?;
    let cal = &config.calendar;
    let term_start = cal.term_start.and_hms_opt(0, 0, 0).expect("midnight");
    let week_len = i64::from(cal.week_length_days);
    let term_days = cal.term_days();

    let chapter_pool: BTreeMap<u32, Vec<Resource>> =
        (1..=config.chapters.count).map(|k| (k, chapter_resources(k, config.chapters.resources_per_chapter))).collect();
    let general_pool: Vec<Resource> = config
        .general
        .resources
        .iter()
        .enumerate()
        .map(|(i, (title, component))| Resource {
            title: title.clone(),
            component: component.clone(),
            event_name: "Course module viewed".into(),
            module_id: 900 + i as u32,
        })
        .collect();

    let width = config.n_students.to_string().len().max(4);
    let spread = Normal::new(0.0, config.propensity_spread.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let students: Vec<StudentPlan> = (0..config.n_students)
        .map(|i| {
            let mut rng = student_rng(seed, i, 0);
            let pick: f64 = rng.random();
            let mut acc = 0.0;
            let mut archetype = config.archetypes.len() - 1;
            for (j, a) in config.archetypes.iter().enumerate() {
                acc += a.weight;
                if pick < acc {
                    archetype = j;
                    break;
                }
            }
            StudentPlan {
                user: format!("S{:0width$}", i + 1),
                numeric_id: 100_000 + i as u32 + 1,
                archetype,
                propensity: spread.sample(&mut rng).exp(),
            }
        })
        .collect();

    let mut events = Vec::new();
    let mut truth = Vec::with_capacity(students.len());
    for (i, st) in students.iter().enumerate() {
        let arch = &config.archetypes[st.archetype];
        let mut rng = student_rng(seed, i, 1);
        let mut emitter = Emitter { term_start, occupied: BTreeSet::new(), out: Vec::new() };

        let rate = arch.session_rate_mean * st.propensity;
        let delay_mean = arch.first_access_delay_days / st.propensity;
        let breadth = arch.activity_breadth * st.propensity;
        let stop_day = arch.dropout_week.map_or(term_days, |w| cal.week_start_day(w).min(term_days));
        let mixing = (arch.session_rate_dispersion > 0.0)
            .then(|| Gamma::new(1.0 / arch.session_rate_dispersion, arch.session_rate_dispersion).expect("positive"));

        let mut expected_sessions = 0.0;
        for k in 1..=config.chapters.count {
            let release_day = cal.week_start_day(config.chapters.release_week(k));
            let window_end = (release_day + i64::from(config.chapters.active_weeks) * week_len).min(stop_day);
            if window_end <= release_day {
                continue;
            }
            let active_weeks = (window_end - release_day) as f64 / week_len as f64;
            expected_sessions += rate * active_weeks;

            let gamma = mixing.as_ref().map_or(1.0, |g| g.sample(&mut rng));
            let chapter_mean = rate * gamma * active_weeks;
            if chapter_mean <= 0.0 || !rng.random_bool(1.0 - (-chapter_mean).exp()) {
                continue;
            }
            let delay = if delay_mean > 0.0 {
                Exp::new(1.0 / delay_mean).expect("positive").sample(&mut rng).floor() as i64
            } else {
                0
            };
            let first_day = release_day + delay;
            if first_day >= window_end {
                continue;
            }
            let extra = poisson(&mut rng, chapter_mean - 1.0);
            let mut days = vec![first_day];
            days.extend((0..extra).map(|_| rng.random_range(first_day..window_end)));
            days.sort_unstable();

            let pool = &chapter_pool[&k];
            for day in days {
                let Some(start) = emitter.claim_slot(&mut rng, day) else { continue };
                let n = (1 + poisson(&mut rng, breadth - 1.0) as usize).min(pool.len());
                let mut touched: Vec<&Resource> =
                    sample(&mut rng, pool.len(), n).into_iter().map(|j| &pool[j]).collect();
                touched.sort_by_key(|r| r.module_id);
                if !general_pool.is_empty() && rng.random_bool(config.general.click_prob) {
                    touched.push(&general_pool[rng.random_range(0..general_pool.len())]);
                }
                emitter.burst(&mut rng, start, st, &touched);
            }
        }

        if rate > 0.0 && !general_pool.is_empty() {
            for w in 1..=cal.num_weeks {
                let week_start = cal.week_start_day(w);
                if week_start >= stop_day || !rng.random_bool(config.general.session_prob) {
                    continue;
                }
                let day = rng.random_range(week_start..(week_start + week_len).min(stop_day));
                let Some(start) = emitter.claim_slot(&mut rng, day) else { continue };
                let r = &general_pool[rng.random_range(0..general_pool.len())];
                emitter.burst(&mut rng, start, st, &[r]);
            }
        }

        events.extend(emitter.out);
        truth.push(StudentTruth {
            user: st.user.clone(),
            archetype: arch.name.clone(),
            latent_engagement: expected_sessions,
        });
    }

    events.sort_by(|a, b| a.time.cmp(&b.time).then_with(|| a.user.cmp(&b.user)));

    let latent: Vec<f64> = truth.iter().map(|t| t.latent_engagement).collect();
    let n = latent.len() as f64;
    let mean = latent.iter().sum::<f64>() / n;
    let sd = (latent.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let gm = config.grade_model;
    let noise = Normal::new(0.0, gm.noise_scale).map_err(|e| invalid(e.to_string()))?;
    let grades = truth
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = student_rng(seed, i, 2);
            let z = if sd > 0.0 { (t.latent_engagement - mean) / sd } else { 0.0 };
            let g = (gm.base + gm.engagement_coefficient * z + noise.sample(&mut rng)).clamp(0.0, 100.0);
            GradeRecord::new(t.user.clone(), (g * 10.0).round() / 10.0, None)
        })
        .collect();

    Ok(SimulatedCohort { events, grades, truth })
}

/// Writes `user, final_grade`.
pub fn write_grades_csv<W: std::io::Write>(writer: W, grades: &[GradeRecord]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["user", "final_grade"])?;
    for g in grades {
        wtr.write_record([g.user.clone(), g.final_grade.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SimConfig {
        SimConfig { n_students: n, ..SimConfig::default() }
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&small(30), 7).unwrap();
        let b = generate_cohort(&small(30), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small(30), 8).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn silent_cohort_has_no_events() {
        let mut cfg = small(20);
        cfg.archetypes = vec![ArchetypeConfig {
            name: "silent".into(),
            session_rate_mean: 0.0,
            session_rate_dispersion: 0.0,
            first_access_delay_days: 0.0,
            activity_breadth: 0.0,
            dropout_week: None,
            weight: 1.0,
        }];
        cfg.grade_model.noise_scale = 0.0;
        let cohort = generate_cohort(&cfg, 1).unwrap();
        assert!(cohort.events.is_empty());
        assert!(cohort.grades.iter().all(|g| g.final_grade == cfg.grade_model.base));
    }

    #[test]
    fn events_stay_in_term_and_sorted() {
        let cfg = small(40);
        let cohort = generate_cohort(&cfg, 3).unwrap();
        assert!(!cohort.events.is_empty());
        let start = cfg.calendar.term_start.and_hms_opt(0, 0, 0).unwrap();
        let end = cfg.calendar.week_end(cfg.calendar.num_weeks);
        assert!(cohort.events.iter().all(|e| e.time >= start && e.time <= end));
        assert!(cohort.events.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(cohort.grades.iter().all(|g| (0.0..=100.0).contains(&g.final_grade)));
    }

    #[test]
    fn dropouts_go_quiet() {
        let mut cfg = small(30);
        cfg.archetypes =
            vec![ArchetypeConfig { dropout_week: Some(4), weight: 1.0, ..default_archetypes()[0].clone() }];
        let cohort = generate_cohort(&cfg, 5).unwrap();
        let cutoff = cfg.calendar.term_start.and_hms_opt(0, 0, 0).unwrap() + Duration::days(21);
        assert!(!cohort.events.is_empty());
        assert!(cohort.events.iter().all(|e| e.time < cutoff));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small(10);
        cfg.archetypes[0].weight = 0.9;
        assert!(matches!(generate_cohort(&cfg, 1), Err(SimError::InvalidConfig(_))));
        let mut cfg = small(10);
        cfg.archetypes[1].session_rate_mean = -1.0;
        assert!(generate_cohort(&cfg, 1).is_err());
        let mut cfg = small(10);
        cfg.chapters.release_weeks = Some(vec![1, 2]);
        assert!(generate_cohort(&cfg, 1).is_err());
        let mut cfg = small(0);
        cfg.n_students = 0;
        assert!(generate_cohort(&cfg, 1).is_err());
    }

    #[test]
    fn merged_chapter_schedule() {
        let mut cfg = small(30);
        cfg.chapters.count = 5;
        cfg.chapters.release_weeks = Some(vec![1, 3, 5, 7, 9]);
        cfg.chapters.active_weeks = 2;
        let cohort = generate_cohort(&cfg, 2).unwrap();
        let start = cfg.calendar.term_start;
        for e in cohort.events.iter().filter(|e| e.event_context.starts_with("Chapter 3 ")) {
            let day = (e.time.date() - start).num_days();
            assert!((28..42).contains(&day), "chapter 3 event on day {day}");
        }
    }
}
