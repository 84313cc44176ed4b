//! Rank correlation, engagement quintiles and at-risk classification.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least two pairs and a non-constant vector on each side")]
    DegenerateInput,
    #[error("paired inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("quintiles need at least 5 students, got {0}")]
    TooFewStudents(usize),
    #[error("no grade for user `{0}`")]
    MissingGrade(String),
    #[error("both classes must be non-empty")]
    SingleClass,
}

/// Grade cut-off for low performance (D and F).
pub const LOW_PERFORMANCE: f64 = 50.0;
/// Grade cut-off for failing.
pub const FAIL: f64 = 40.0;

/// 1-based ranks; tied values share the mean of their rank range.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::DegenerateInput);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn rho_or_none(x: &[f64], y: &[f64]) -> Result<Option<f64>, EvalError> {
    match spearman_rho(x, y) {
        Ok(r) => Ok(Some(r)),
        Err(EvalError::DegenerateInput) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One rho per week against a fixed reference. Weeks where either side is
/// constant get `None`.
pub fn alignment_series(weekly: &[Vec<f64>], reference: &[f64]) -> Result<Vec<Option<f64>>, EvalError> {
    weekly.iter().map(|scores| rho_or_none(scores, reference)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradeCorrelation {
    pub weekly: Vec<Option<f64>>,
    pub coursewide: Option<f64>,
}

pub fn grade_correlation_series(
    weekly: &[Vec<f64>],
    grades: &[f64],
    coursewide: &[f64],
) -> Result<GradeCorrelation, EvalError> {
    Ok(GradeCorrelation { weekly: alignment_series(weekly, grades)?, coursewide: rho_or_none(coursewide, grades)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Quintile {
    VeryLow,
    Low,
    Moderate,
    High,
    VeryHigh,
}

impl Quintile {
    pub const ALL: [Quintile; 5] =
        [Quintile::VeryLow, Quintile::Low, Quintile::Moderate, Quintile::High, Quintile::VeryHigh];
}

impl fmt::Display for Quintile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quintile::VeryLow => "very_low",
            Quintile::Low => "low",
            Quintile::Moderate => "moderate",
            Quintile::High => "high",
            Quintile::VeryHigh => "very_high",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuintileAssignment {
    pub week: u32,
    /// Members of each band in ascending score order, `VeryLow` first.
    pub groups: [Vec<String>; 5],
}

impl QuintileAssignment {
    pub fn sizes(&self) -> [usize; 5] {
        std::array::from_fn(|i| self.groups[i].len())
    }

    pub fn labels(&self) -> BTreeMap<&str, Quintile> {
        Quintile::ALL
            .iter()
            .zip(&self.groups)
            .flat_map(|(&q, members)| members.iter().map(move |u| (u.as_str(), q)))
            .collect()
    }

    pub fn flagged(&self) -> &[String] {
        &self.groups[0]
    }
}

/// Ranks ascending by score (ties by ascending user id) and cuts five bands.
/// The first `N mod 5` bands take one extra member, so `VeryLow` has
/// `ceil(N/5)` and sizes differ by at most one.
pub fn assign_quintiles(week: u32, users: &[String], scores: &[f64]) -> Result<QuintileAssignment, EvalError> {
    if users.len() != scores.len() {
        return Err(EvalError::LengthMismatch(users.len(), scores.len()));
    }
    let n = users.len();
    if n < 5 {
        return Err(EvalError::TooFewStudents(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| users[a].cmp(&users[b])));
    let (base, extra) = (n / 5, n % 5);
    let mut groups: [Vec<String>; 5] = Default::default();
    let mut it = order.into_iter();
    for (g, group) in groups.iter_mut().enumerate() {
        let size = base + usize::from(g < extra);
        group.extend(it.by_ref().take(size).map(|i| users[i].clone()));
    }
    Ok(QuintileAssignment { week, groups })
}

/// Linear interpolation between closest ranks, `h = (n-1)p` on sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradeSummary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme grades within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub below_50: usize,
    pub below_40: usize,
}

impl GradeSummary {
    pub fn from_grades(grades: &[f64]) -> Option<Self> {
        if grades.is_empty() {
            return None;
        }
        let mut sorted = grades.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&sorted, 0.25);
        let median = quantile_sorted(&sorted, 0.5);
        let q3 = quantile_sorted(&sorted, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_low = sorted.iter().copied().find(|&g| g >= lo_fence).unwrap_or(q1);
        let whisker_high = sorted.iter().rev().copied().find(|&g| g <= hi_fence).unwrap_or(q3);
        Some(Self {
            n: sorted.len(),
            median,
            q1,
            q3,
            whisker_low,
            whisker_high,
            below_50: sorted.iter().filter(|&&g| g < LOW_PERFORMANCE).count(),
            below_40: sorted.iter().filter(|&&g| g < FAIL).count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuintileSummary {
    pub quintile: Quintile,
    pub summary: GradeSummary,
}

pub fn quintile_grade_summary(
    assignment: &QuintileAssignment,
    grades: &BTreeMap<String, f64>,
) -> Result<Vec<QuintileSummary>, EvalError> {
    Quintile::ALL
        .iter()
        .zip(&assignment.groups)
        .filter(|(_, members)| !members.is_empty())
        .map(|(&quintile, members)| {
            let g = members
                .iter()
                .map(|u| grades.get(u).copied().ok_or_else(|| EvalError::MissingGrade(u.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(QuintileSummary { quintile, summary: GradeSummary::from_grades(&g).expect("non-empty") })
        })
        .collect()
}

/// Probability that a positive (low performer) has lower engagement than a
/// negative, ties counted one half. Computed from average ranks of the
/// negated scores.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::LengthMismatch(scores.len(), positive.len()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
    let ranks = average_ranks(&negated);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let n_pos = n_pos as f64;
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionCounts {
    pub flagged: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub positives_total: usize,
    pub threshold: f64,
}

impl ConfusionCounts {
    pub fn from_counts(flagged: usize, true_positive: usize, positives_total: usize, threshold: f64) -> Self {
        assert!(true_positive <= flagged && true_positive <= positives_total);
        Self {
            flagged,
            true_positive,
            false_positive: flagged - true_positive,
            false_negative: positives_total - true_positive,
            positives_total,
            threshold,
        }
    }

    /// `None` when the cohort has no positives.
    pub fn recall(&self) -> Option<f64> {
        (self.positives_total > 0).then(|| self.true_positive as f64 / self.positives_total as f64)
    }

    /// `None` when nobody is flagged.
    pub fn precision(&self) -> Option<f64> {
        (self.flagged > 0).then(|| self.true_positive as f64 / self.flagged as f64)
    }
}

/// Flags the `VeryLow` band and scores it against `grade < threshold`.
pub fn recall_precision(
    assignment: &QuintileAssignment,
    grades: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<ConfusionCounts, EvalError> {
    let grade_of = |u: &String| grades.get(u).copied().ok_or_else(|| EvalError::MissingGrade(u.clone()));
    let mut positives_total = 0;
    for members in &assignment.groups {
        for u in members {
            if grade_of(u)? < threshold {
                positives_total += 1;
            }
        }
    }
    let flagged = assignment.flagged();
    let mut true_positive = 0;
    for u in flagged {
        if grade_of(u)? < threshold {
            true_positive += 1;
        }
    }
    Ok(ConfusionCounts::from_counts(flagged.len(), true_positive, positives_total, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeekValue {
    pub week: u32,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeekQuintiles {
    pub week: u32,
    pub sizes: [usize; 5],
    pub groups: Vec<QuintileSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeekClassification {
    pub week: u32,
    pub threshold: f64,
    pub auc: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub cohort_size: usize,
    pub thresholds: Vec<f64>,
    pub alignment: Vec<WeekValue>,
    pub grade_correlation: Vec<WeekValue>,
    pub coursewide_grade_rho: Option<f64>,
    pub quintiles: Vec<WeekQuintiles>,
    pub classification: Vec<WeekClassification>,
}

/// Inputs for [`evaluate`], all aligned on `users`.
#[derive(Debug, Clone)]
pub struct EvaluationInput<'a> {
    pub users: &'a [String],
    /// `(week, y_t per user)`.
    pub weekly: &'a [(u32, Vec<f64>)],
    pub coursewide: &'a [f64],
    pub grades: &'a [f64],
    pub thresholds: &'a [f64],
}

pub fn evaluate(input: &EvaluationInput<'_>) -> Result<EvaluationReport, EvalError> {
    let n = input.users.len();
    for len in [input.coursewide.len(), input.grades.len()].into_iter().chain(input.weekly.iter().map(|(_, s)| s.len()))
    {
        if len != n {
            return Err(EvalError::LengthMismatch(n, len));
        }
    }
    let grade_map: BTreeMap<String, f64> = input.users.iter().cloned().zip(input.grades.iter().copied()).collect();
    let score_rows: Vec<Vec<f64>> = input.weekly.iter().map(|(_, s)| s.clone()).collect();
    let weeks: Vec<u32> = input.weekly.iter().map(|(w, _)| *w).collect();

    let alignment = alignment_series(&score_rows, input.coursewide)?;
    let grade_rho = grade_correlation_series(&score_rows, input.grades, input.coursewide)?;

    let mut quintiles = Vec::new();
    let mut classification = Vec::new();
    for (&week, scores) in weeks.iter().zip(&score_rows) {
        let assignment = assign_quintiles(week, input.users, scores)?;
        quintiles.push(WeekQuintiles {
            week,
            sizes: assignment.sizes(),
            groups: quintile_grade_summary(&assignment, &grade_map)?,
        });
        for &threshold in input.thresholds {
            let labels: Vec<bool> = input.grades.iter().map(|&g| g < threshold).collect();
            let auc = match roc_auc(scores, &labels) {
                Ok(a) => Some(a),
                Err(EvalError::SingleClass) => None,
                Err(e) => return Err(e),
            };
            let counts = recall_precision(&assignment, &grade_map, threshold)?;
            classification.push(WeekClassification {
                week,
                threshold,
                auc,
                recall: counts.recall(),
                precision: counts.precision(),
                counts,
            });
        }
    }

    let pair =
        |values: Vec<Option<f64>>| weeks.iter().zip(values).map(|(&week, rho)| WeekValue { week, rho }).collect();
    Ok(EvaluationReport {
        cohort_size: n,
        thresholds: input.thresholds.to_vec(),
        alignment: pair(alignment),
        grade_correlation: pair(grade_rho.weekly),
        coursewide_grade_rho: grade_rho.coursewide,
        quintiles,
        classification,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_alignment_csv<W: Write>(writer: W, report: &EvaluationReport) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["week", "rho"])?;
    for v in &report.alignment {
        wtr.write_record([v.week.to_string(), opt(v.rho)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_grade_rho_csv<W: Write>(writer: W, report: &EvaluationReport) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["week", "rho", "coursewide_rho"])?;
    for v in &report.grade_correlation {
        wtr.write_record([v.week.to_string(), opt(v.rho), opt(report.coursewide_grade_rho)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_quintiles_csv<W: Write>(writer: W, report: &EvaluationReport) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "week",
        "quintile",
        "n",
        "median",
        "q1",
        "q3",
        "whisker_low",
        "whisker_high",
        "below_50",
        "below_40",
    ])?;
    for wq in &report.quintiles {
        for g in &wq.groups {
            let s = &g.summary;
            wtr.write_record([
                wq.week.to_string(),
                g.quintile.to_string(),
                s.n.to_string(),
                s.median.to_string(),
                s.q1.to_string(),
                s.q3.to_string(),
                s.whisker_low.to_string(),
                s.whisker_high.to_string(),
                s.below_50.to_string(),
                s.below_40.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_classification_csv<W: Write>(writer: W, report: &EvaluationReport) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "week",
        "threshold",
        "auc",
        "recall",
        "precision",
        "flagged",
        "true_positive",
        "false_positive",
        "false_negative",
        "positives_total",
    ])?;
    for c in &report.classification {
        wtr.write_record([
            c.week.to_string(),
            c.threshold.to_string(),
            opt(c.auc),
            opt(c.recall),
            opt(c.precision),
            c.counts.flagged.to_string(),
            c.counts.true_positive.to_string(),
            c.counts.false_positive.to_string(),
            c.counts.false_negative.to_string(),
            c.counts.positives_total.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
