//! Cohort summaries, their analytic expectations, and the comparison
//! between the two.
//!
//! [`summarize`] streams a written repository once per file and checks its
//! referential integrity on the way. [`expected_from_config`] derives the
//! same statistics from the configuration alone, each with a standard
//! error, and [`compare`] flags statistics that drift further than the
//! tolerance profile allows.
//!
//! Standard deviations use the population denominator `n`.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::PathBuf;

use chrono::{NaiveDate, NaiveDateTime};
use flate2::read::MultiGzDecoder;
use uuid::Uuid;

use crate::config::{self, AdmissionCountDist, Configs};
use crate::emit::{RepoFile, RepositoryLayout};
use crate::patientgen::midnight;

pub const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;
pub const FOLLOW_UP_BUCKETS: [&str; 3] = ["0-9", "10-15", ">15"];
/// Demographic columns summarised, as (config variable, patients-file column).
pub const DEMOGRAPHIC_COLUMNS: [(&str, usize); 4] = [
    (config::GENDER, 1),
    (config::ETHNICITY, 3),
    (config::MARITAL_STATUS, 4),
    (config::LANGUAGE, 5),
];

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}:{line}: malformed row: {message}")]
    Malformed {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}:{line}: integrity violation: {message}")]
    Integrity {
        file: String,
        line: u64,
        message: String,
    },
    #[error("statistic sets differ: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Config(String),
}

/// One-pass (Welford) accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combines two accumulators (Chan et al. parallel update).
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * self.n as f64 * other.n as f64 / n as f64;
        Moments { n, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.m2 / self.n as f64).max(0.0)
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    fn stat(&self) -> MeanSd {
        MeanSd {
            mean: self.mean(),
            sd: self.sd(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelShare {
    pub level: String,
    pub count: u64,
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalSummary {
    pub variable: String,
    pub levels: Vec<LevelShare>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prevalence {
    pub category: String,
    pub patients: u64,
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabSummary {
    pub title: String,
    pub units: String,
    pub count: u64,
    pub mean: f64,
    pub sd: f64,
}

/// Observed cohort statistics of a repository.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSummary {
    pub n_patients: u64,
    pub cutoff: NaiveDate,
    pub age: MeanSd,
    pub demographics: Vec<CategoricalSummary>,
    pub admissions_per_patient: MeanSd,
    pub los_days: MeanSd,
    pub follow_up_pct: [f64; 3],
    pub poverty: MeanSd,
    pub comorbidities: Vec<Prevalence>,
    pub labs: Vec<LabSummary>,
    pub total_admissions: u64,
    pub total_lab_rows: u64,
}

fn pct(count: u64, total: u64) -> f64 {
    if total == 0 {
        f64::NAN
    } else {
        100.0 * count as f64 / total as f64
    }
}

impl CohortSummary {
    /// Named statistics that have an analytic expectation. Means, SDs and
    /// shares are only defined for a non-empty cohort.
    pub fn statistics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("n_patients".to_string(), self.n_patients as f64),
            ("total_admissions".to_string(), self.total_admissions as f64),
            ("total_lab_rows".to_string(), self.total_lab_rows as f64),
        ];
        if self.n_patients == 0 {
            return out;
        }
        out.push(("age_mean".into(), self.age.mean));
        out.push(("age_sd".into(), self.age.sd));
        for cat in &self.demographics {
            for level in &cat.levels {
                out.push((pct_name(&cat.variable, &level.level), level.pct));
            }
        }
        out.push(("admissions_mean".into(), self.admissions_per_patient.mean));
        out.push(("admissions_sd".into(), self.admissions_per_patient.sd));
        out.push(("los_mean".into(), self.los_days.mean));
        out.push(("los_sd".into(), self.los_days.sd));
        out.push(("poverty_mean".into(), self.poverty.mean));
        out.push(("poverty_sd".into(), self.poverty.sd));
        for p in &self.comorbidities {
            out.push((format!("prevalence[{}]", p.category), p.pct));
        }
        for lab in &self.labs {
            out.push((format!("lab_mean[{}]", lab.title), lab.mean));
            out.push((format!("lab_sd[{}]", lab.title), lab.sd));
        }
        out
    }

    /// Statistics reported without an expectation.
    pub fn reported_only(&self) -> Vec<(String, f64)> {
        FOLLOW_UP_BUCKETS
            .iter()
            .zip(self.follow_up_pct)
            .map(|(b, v)| (format!("followup_pct[{b}]"), v))
            .collect()
    }

    pub fn lab(&self, title: &str) -> Option<&LabSummary> {
        self.labs.iter().find(|l| l.title == title)
    }

    pub fn share(&self, variable: &str, level: &str) -> Option<f64> {
        self.demographics
            .iter()
            .find(|c| c.variable == variable)?
            .levels
            .iter()
            .find(|l| l.level == level)
            .map(|l| l.pct)
    }

    pub fn prevalence(&self, category: &str) -> Option<f64> {
        self.comorbidities
            .iter()
            .find(|p| p.category == category)
            .map(|p| p.pct)
    }

    /// Plain-text report: demographics, utilisation, comorbidities, labs.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let cutoff = self.cutoff.format("%-m/%-d/%Y");
        let _ = writeln!(
            s,
            "Variable and category\tPatients (n = {})",
            self.n_patients
        );
        let _ = writeln!(
            s,
            "Mean age as of {cutoff}, years (SD)\t{:.1} ({:.1})",
            self.age.mean, self.age.sd
        );
        for cat in &self.demographics {
            let _ = writeln!(s, "{} (%)", cat.variable);
            for level in &cat.levels {
                let _ = writeln!(s, "  {}\t{:.1}", level.level, level.pct);
            }
        }
        let _ = writeln!(
            s,
            "Mean number of admissions per patient (SD)\t{:.1} ({:.1})",
            self.admissions_per_patient.mean, self.admissions_per_patient.sd
        );
        let _ = writeln!(
            s,
            "Mean length of stay, days (SD)\t{:.1} ({:.1})",
            self.los_days.mean, self.los_days.sd
        );
        let _ = writeln!(s, "% Population with length of follow-up (years)");
        for (bucket, v) in FOLLOW_UP_BUCKETS.iter().zip(self.follow_up_pct) {
            let _ = writeln!(s, "  {bucket}\t{v:.1}");
        }
        let _ = writeln!(s, "Population below poverty (%)\t{:.1}", self.poverty.mean);
        let _ = writeln!(s, "Comorbidities; Prevalence (%)");
        for p in &self.comorbidities {
            let _ = writeln!(s, "  {}\t{:.1}", p.category, p.pct);
        }
        let _ = writeln!(s, "Laboratory values (Mean; SD)");
        for lab in &self.labs {
            let _ = writeln!(
                s,
                "  {} ({})\t{}; {}",
                lab.title,
                lab.units,
                sig(lab.mean),
                sig(lab.sd)
            );
        }
        let _ = writeln!(s, "Total admissions\t{}", self.total_admissions);
        let _ = writeln!(s, "Total laboratory measurements\t{}", self.total_lab_rows);
        let _ = writeln!(s, "(SDs use the population denominator n.)");
        s
    }
}

fn sig(v: f64) -> String {
    if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn pct_name(variable: &str, level: &str) -> String {
    format!("pct[{variable}={level}]")
}

/// Reads one tab-delimited repository file line by line.
struct TableReader {
    name: String,
    reader: Box<dyn BufRead>,
    line: u64,
}

impl TableReader {
    fn open(layout: &RepositoryLayout, file: RepoFile) -> Result<Self, StatsError> {
        let path = layout.path(file);
        let handle = File::open(&path).map_err(|source| StatsError::Io {
            path: path.clone(),
            source,
        })?;
        let reader: Box<dyn BufRead> = if layout.gzip {
            Box::new(BufReader::with_capacity(
                1 << 20,
                MultiGzDecoder::new(handle),
            ))
        } else {
            Box::new(BufReader::with_capacity(1 << 20, handle))
        };
        let mut table = TableReader {
            name: layout.file_name(file),
            reader,
            line: 0,
        };
        let mut header = String::new();
        if table.read(&mut header)? && row_of(&header) == file.header() {
            Ok(table)
        } else {
            Err(table.malformed(format!("expected header `{}`", file.header())))
        }
    }

    /// Reads the next line into `buf`; false at end of file.
    fn read(&mut self, buf: &mut String) -> Result<bool, StatsError> {
        buf.clear();
        let read = self.reader.read_line(buf).map_err(|source| {
            let message = source.to_string();
            if source.kind() == io::ErrorKind::InvalidData {
                StatsError::Malformed {
                    file: self.name.clone(),
                    line: self.line + 1,
                    message,
                }
            } else {
                StatsError::Io {
                    path: PathBuf::from(&self.name),
                    source,
                }
            }
        })?;
        if read == 0 {
            return Ok(false);
        }
        self.line += 1;
        Ok(true)
    }

    fn malformed(&self, message: impl Into<String>) -> StatsError {
        StatsError::Malformed {
            file: self.name.clone(),
            line: self.line,
            message: message.into(),
        }
    }

    fn integrity(&self, message: impl Into<String>) -> StatsError {
        StatsError::Integrity {
            file: self.name.clone(),
            line: self.line,
            message: message.into(),
        }
    }
}

fn row_of(line: &str) -> &str {
    line.strip_suffix('\n').unwrap_or(line)
}

/// Splits a row into exactly `N` tab-separated fields.
fn fields<const N: usize>(row: &str) -> Option<[&str; N]> {
    let mut out = [""; N];
    let mut parts = row.split('\t');
    for slot in out.iter_mut() {
        *slot = parts.next()?;
    }
    if parts.next().is_some() {
        return None;
    }
    Some(out)
}

/// Parses `YYYY-MM-DD HH:MM:SS`.
pub fn parse_datetime(text: &str) -> Option<NaiveDateTime> {
    let b = text.as_bytes();
    if b.len() != 19
        || b[4] != b'-'
        || b[7] != b'-'
        || b[10] != b' '
        || b[13] != b':'
        || b[16] != b':'
    {
        return None;
    }
    let num = |range: std::ops::Range<usize>| -> Option<u32> {
        b[range].iter().try_fold(0u32, |acc, &c| {
            c.is_ascii_digit().then(|| acc * 10 + (c - b'0') as u32)
        })
    };
    NaiveDate::from_ymd_opt(num(0..4)? as i32, num(5..7)?, num(8..10)?)?.and_hms_opt(
        num(11..13)?,
        num(14..16)?,
        num(17..19)?,
    )
}

fn seconds(t: NaiveDateTime) -> i64 {
    t.and_utc().timestamp()
}

struct PatientAgg {
    admissions: u32,
    first_start: i64,
    last_end: i64,
    categories: u64,
}

struct AdmissionAgg {
    patient: usize,
    start: i64,
    end: i64,
    diagnosed: bool,
}

/// Streams a repository and computes its summary, checking that every row
/// refers to existing patients/admissions, that each admission has exactly
/// one diagnosis, and that lab values and times respect their bounds.
pub fn summarize(
    layout: &RepositoryLayout,
    configs: &Configs,
    cutoff: NaiveDate,
) -> Result<CohortSummary, StatsError> {
    let categories = configs.catalog.categories();
    if categories.len() > 64 {
        return Err(StatsError::Config(
            "more than 64 comorbidity categories".into(),
        ));
    }
    let code_mask: HashMap<&str, u64> = configs
        .catalog
        .entries
        .iter()
        .map(|c| {
            let mask = c
                .categories
                .iter()
                .map(|t| 1u64 << categories.iter().position(|x| x == t).unwrap())
                .fold(0, |a, b| a | b);
            (c.code.as_str(), mask)
        })
        .collect();
    let cutoff_secs = seconds(midnight(cutoff));

    // Patients.
    let mut demo_levels: Vec<(String, Vec<String>, Vec<u64>)> = Vec::new();
    for (variable, _) in DEMOGRAPHIC_COLUMNS {
        let spec = configs
            .population
            .categorical(variable)
            .ok_or_else(|| StatsError::Config(format!("missing variable `{variable}`")))?;
        let levels: Vec<String> = spec.levels.iter().map(|l| l.value.clone()).collect();
        let n = levels.len();
        demo_levels.push((variable.to_string(), levels, vec![0; n]));
    }
    let mut line = String::new();
    // Aggregates are kept in file order so the summary never depends on
    // hash iteration order.
    let mut patients: Vec<PatientAgg> = Vec::new();
    let mut patient_ids: HashMap<u128, usize> = HashMap::new();
    let mut age = Moments::default();
    let mut poverty = Moments::default();
    let mut table = TableReader::open(layout, RepoFile::Patients)?;
    while table.read(&mut line)? {
        let row = row_of(&line);
        let [id, _, dob, _, _, _, pov] =
            fields::<7>(row).ok_or_else(|| table.malformed("expected 7 fields"))?;
        let cols: Vec<&str> = row.split('\t').collect();
        let id = Uuid::parse_str(id)
            .map_err(|_| table.malformed(format!("bad patient id `{id}`")))?
            .as_u128();
        let dob =
            parse_datetime(dob).ok_or_else(|| table.malformed(format!("bad date `{dob}`")))?;
        let pov: f64 = pov
            .parse()
            .map_err(|_| table.malformed(format!("bad poverty percentage `{pov}`")))?;
        for ((variable, levels, counts), (_, column)) in
            demo_levels.iter_mut().zip(DEMOGRAPHIC_COLUMNS)
        {
            let value = cols[column];
            let j = levels
                .iter()
                .position(|l| l == value)
                .ok_or_else(|| table.integrity(format!("unknown {variable} `{value}`")))?;
            counts[j] += 1;
        }
        age.push((cutoff_secs - seconds(dob)) as f64 / SECONDS_PER_YEAR);
        poverty.push(pov);
        let fresh = PatientAgg {
            admissions: 0,
            first_start: i64::MAX,
            last_end: i64::MIN,
            categories: 0,
        };
        if patient_ids.insert(id, patients.len()).is_some() {
            return Err(table.integrity("duplicate patient id"));
        }
        patients.push(fresh);
    }
    let n_patients = patients.len() as u64;

    // Admissions.
    let mut admissions: Vec<AdmissionAgg> = Vec::new();
    let mut admission_ids: HashMap<(u128, u32), usize> = HashMap::new();
    let mut los = Moments::default();
    let mut table = TableReader::open(layout, RepoFile::Admissions)?;
    while table.read(&mut line)? {
        let row = row_of(&line);
        let [id, adm, start, end] =
            fields::<4>(row).ok_or_else(|| table.malformed("expected 4 fields"))?;
        let id = Uuid::parse_str(id)
            .map_err(|_| table.malformed(format!("bad patient id `{id}`")))?
            .as_u128();
        let adm: u32 = adm
            .parse()
            .map_err(|_| table.malformed(format!("bad admission id `{adm}`")))?;
        let start =
            parse_datetime(start).ok_or_else(|| table.malformed(format!("bad date `{start}`")))?;
        let end =
            parse_datetime(end).ok_or_else(|| table.malformed(format!("bad date `{end}`")))?;
        let (start, end) = (seconds(start), seconds(end));
        if end < start {
            return Err(table.integrity("admission ends before it starts"));
        }
        let owner = *patient_ids
            .get(&id)
            .ok_or_else(|| table.integrity("admission of unknown patient"))?;
        let patient = &mut patients[owner];
        patient.admissions += 1;
        patient.first_start = patient.first_start.min(start);
        patient.last_end = patient.last_end.max(end);
        los.push((end - start) as f64 / 86_400.0);
        if admission_ids.insert((id, adm), admissions.len()).is_some() {
            return Err(table.integrity("duplicate admission id"));
        }
        admissions.push(AdmissionAgg {
            patient: owner,
            start,
            end,
            diagnosed: false,
        });
    }

    // Diagnoses.
    let mut table = TableReader::open(layout, RepoFile::Diagnoses)?;
    while table.read(&mut line)? {
        let row = row_of(&line);
        let [id, adm, code, _] =
            fields::<4>(row).ok_or_else(|| table.malformed("expected 4 fields"))?;
        let id = Uuid::parse_str(id)
            .map_err(|_| table.malformed(format!("bad patient id `{id}`")))?
            .as_u128();
        let adm: u32 = adm
            .parse()
            .map_err(|_| table.malformed(format!("bad admission id `{adm}`")))?;
        let mask = *code_mask
            .get(code)
            .ok_or_else(|| table.integrity(format!("code `{code}` not in the catalog")))?;
        let j = *admission_ids
            .get(&(id, adm))
            .ok_or_else(|| table.integrity("diagnosis of unknown admission"))?;
        let agg = &mut admissions[j];
        if agg.diagnosed {
            return Err(table.integrity("second diagnosis for one admission"));
        }
        agg.diagnosed = true;
        patients[agg.patient].categories |= mask;
    }
    if let Some(j) = admissions.iter().position(|a| !a.diagnosed) {
        return Err(StatsError::Integrity {
            file: layout.file_name(RepoFile::Diagnoses),
            line: 0,
            message: format!(
                "admission in row {} of the admissions file has no diagnosis",
                j + 2
            ),
        });
    }

    // Labs.
    let lab_index: HashMap<&str, usize> = configs
        .labs
        .iter()
        .enumerate()
        .map(|(i, l)| (l.title.as_str(), i))
        .collect();
    let mut lab_moments = vec![Moments::default(); configs.labs.len()];
    let mut total_lab_rows = 0u64;
    let mut current: Option<((u128, u32), (i64, i64))> = None;
    let mut last_lab = 0usize;
    let mut table = TableReader::open(layout, RepoFile::Labs)?;
    while table.read(&mut line)? {
        let row = row_of(&line);
        let [id, adm, name, value, _, taken] =
            fields::<6>(row).ok_or_else(|| table.malformed("expected 6 fields"))?;
        let id = Uuid::parse_str(id)
            .map_err(|_| table.malformed(format!("bad patient id `{id}`")))?
            .as_u128();
        let adm: u32 = adm
            .parse()
            .map_err(|_| table.malformed(format!("bad admission id `{adm}`")))?;
        let (start, end) = match current {
            Some((key, window)) if key == (id, adm) => window,
            _ => {
                let agg = &admissions[*admission_ids
                    .get(&(id, adm))
                    .ok_or_else(|| table.integrity("lab of unknown admission"))?];
                current = Some(((id, adm), (agg.start, agg.end)));
                (agg.start, agg.end)
            }
        };
        let lab = if configs.labs[last_lab].title == name {
            last_lab
        } else {
            *lab_index
                .get(name)
                .ok_or_else(|| table.integrity(format!("unknown lab `{name}`")))?
        };
        last_lab = lab;
        let spec = &configs.labs[lab];
        let value: f64 = value
            .parse()
            .map_err(|_| table.malformed(format!("bad lab value `{value}`")))?;
        if !spec.contains(value) {
            return Err(table.integrity(format!(
                "{name} value {value} outside [{}, {}]",
                spec.min_value, spec.max_value
            )));
        }
        let taken =
            parse_datetime(taken).ok_or_else(|| table.malformed(format!("bad date `{taken}`")))?;
        let taken = seconds(taken);
        if taken < start || taken > end {
            return Err(table.integrity("lab taken outside its admission"));
        }
        lab_moments[lab].push(value);
        total_lab_rows += 1;
    }

    let mut per_patient = Moments::default();
    let mut follow_up = [0u64; 3];
    let mut comorbid = vec![0u64; categories.len()];
    for p in &patients {
        per_patient.push(p.admissions as f64);
        let years = if p.admissions == 0 {
            0.0
        } else {
            (p.last_end - p.first_start) as f64 / SECONDS_PER_YEAR
        };
        follow_up[follow_up_bucket(years)] += 1;
        for (j, count) in comorbid.iter_mut().enumerate() {
            if p.categories & (1 << j) != 0 {
                *count += 1;
            }
        }
    }

    Ok(CohortSummary {
        n_patients,
        cutoff,
        age: age.stat(),
        demographics: demo_levels
            .into_iter()
            .map(|(variable, levels, counts)| CategoricalSummary {
                variable,
                levels: levels
                    .into_iter()
                    .zip(counts)
                    .map(|(level, count)| LevelShare {
                        level,
                        count,
                        pct: pct(count, n_patients),
                    })
                    .collect(),
            })
            .collect(),
        admissions_per_patient: per_patient.stat(),
        los_days: los.stat(),
        follow_up_pct: follow_up.map(|c| pct(c, n_patients)),
        poverty: poverty.stat(),
        comorbidities: categories
            .into_iter()
            .zip(comorbid)
            .map(|(category, patients)| Prevalence {
                category,
                patients,
                pct: pct(patients, n_patients),
            })
            .collect(),
        labs: configs
            .labs
            .iter()
            .zip(&lab_moments)
            .map(|(spec, m)| LabSummary {
                title: spec.title.clone(),
                units: spec.units.clone(),
                count: m.count(),
                mean: m.mean(),
                sd: m.sd(),
            })
            .collect(),
        total_admissions: admissions.len() as u64,
        total_lab_rows,
    })
}

/// Index into [`FOLLOW_UP_BUCKETS`]: `< 10`, `10..=15`, `> 15` years.
pub fn follow_up_bucket(years: f64) -> usize {
    if years < 10.0 {
        0
    } else if years <= 15.0 {
        1
    } else {
        2
    }
}

/// Expected share of patients with at least one admission in a category
/// whose per-admission probability is `p`: `1 - sum_m P(m) (1 - p)^m`.
pub fn prevalence_expected(p: f64, dist: &AdmissionCountDist) -> f64 {
    1.0 - dist
        .probabilities()
        .iter()
        .map(|&(m, prob)| prob * (1.0 - p).powi(m as i32))
        .sum::<f64>()
}

/// Central moments of a weighted mixture of continuous uniform ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureMoments {
    pub mean: f64,
    pub variance: f64,
    pub fourth: f64,
}

impl MixtureMoments {
    pub fn uniform_mixture(components: &[(f64, f64, f64)]) -> Self {
        let total: f64 = components.iter().map(|c| c.0).sum();
        let mean = components
            .iter()
            .map(|&(w, a, b)| w / total * (a + b) / 2.0)
            .sum::<f64>();
        // E[(X - mean)^k] of a uniform on [a, b].
        let central = |k: i32, a: f64, b: f64| {
            let (a, b) = (a - mean, b - mean);
            (b.powi(k + 1) - a.powi(k + 1)) / ((k + 1) as f64 * (b - a))
        };
        let variance = components
            .iter()
            .map(|&(w, a, b)| w / total * central(2, a, b))
            .sum();
        let fourth = components
            .iter()
            .map(|&(w, a, b)| w / total * central(4, a, b))
            .sum();
        MixtureMoments {
            mean,
            variance,
            fourth,
        }
    }

    pub fn discrete(values: &[(f64, f64)]) -> Self {
        let total: f64 = values.iter().map(|v| v.1).sum();
        let mean = values.iter().map(|&(x, w)| w / total * x).sum::<f64>();
        let variance = values
            .iter()
            .map(|&(x, w)| w / total * (x - mean).powi(2))
            .sum();
        let fourth = values
            .iter()
            .map(|&(x, w)| w / total * (x - mean).powi(4))
            .sum();
        MixtureMoments {
            mean,
            variance,
            fourth,
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn se_mean(&self, n: f64) -> f64 {
        (self.variance / n).sqrt()
    }

    /// Large-sample standard error of the sample SD.
    pub fn se_sd(&self, n: f64) -> f64 {
        if self.variance <= 0.0 {
            0.0
        } else {
            ((self.fourth - self.variance.powi(2)).max(0.0) / (4.0 * self.variance * n)).sqrt()
        }
    }
}

/// How the comparison floor of a statistic is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Count,
    Moment,
    Percent,
    LabMoment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedStatistic {
    pub name: String,
    pub expected: f64,
    pub std_error: f64,
    pub kind: StatKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedSummary {
    pub n_patients: u64,
    pub statistics: Vec<ExpectedStatistic>,
}

impl ExpectedSummary {
    pub fn get(&self, name: &str) -> Option<&ExpectedStatistic> {
        self.statistics.iter().find(|s| s.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.get(name).map(|s| s.expected)
    }
}

impl fmt::Display for ExpectedSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "statistic\texpected\tstd_error")?;
        for s in &self.statistics {
            writeln!(
                f,
                "{}\t{}\t{}",
                s.name,
                fmt_num(s.expected),
                fmt_num(s.std_error)
            )?;
        }
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else if v != 0.0 && v.abs() < 0.01 {
        format!("{v:.3e}")
    } else {
        format!("{:.4}", v)
    }
}

/// Statistics the configuration implies for `configs.params.n_patients`.
pub fn expected_from_config(configs: &Configs, cutoff: NaiveDate) -> ExpectedSummary {
    let params = &configs.params;
    let n = params.n_patients;
    let nf = n as f64;
    let mut stats = Vec::new();
    let mut push = |name: String, expected: f64, std_error: f64, kind: StatKind| {
        stats.push(ExpectedStatistic {
            name,
            expected,
            std_error,
            kind,
        })
    };

    let dist = &params.admission_count_dist;
    let counts = MixtureMoments::discrete(
        &dist
            .buckets
            .iter()
            .map(|&(m, w)| (m as f64, w))
            .collect::<Vec<_>>(),
    );
    let labs_per_type = MixtureMoments::discrete(
        &(1..=params.labs_per_type_max)
            .map(|k| (k as f64, 1.0))
            .collect::<Vec<_>>(),
    );
    let lab_types = configs.labs.len() as f64;
    let per_admission_labs = lab_types * labs_per_type.mean;
    let total_labs_var = counts.mean * lab_types * labs_per_type.variance
        + counts.variance * per_admission_labs.powi(2);

    push("n_patients".into(), nf, 0.0, StatKind::Count);
    push(
        "total_admissions".into(),
        nf * counts.mean,
        (nf * counts.variance).sqrt(),
        StatKind::Count,
    );
    push(
        "total_lab_rows".into(),
        nf * counts.mean * per_admission_labs,
        (nf * total_labs_var).sqrt(),
        StatKind::Count,
    );
    if n == 0 {
        return ExpectedSummary {
            n_patients: n,
            statistics: stats,
        };
    }

    let cutoff_secs = seconds(midnight(cutoff));
    if let Some(dob) = configs.population.range(config::DATE_OF_BIRTH) {
        let components: Vec<(f64, f64, f64)> = dob
            .buckets
            .iter()
            .filter_map(|b| {
                let lo = seconds(midnight(b.min.as_date()?));
                let hi = seconds(midnight(b.max.as_date()?));
                Some((
                    b.weight,
                    (cutoff_secs - hi) as f64 / SECONDS_PER_YEAR,
                    (cutoff_secs - lo) as f64 / SECONDS_PER_YEAR,
                ))
            })
            .collect();
        let age = MixtureMoments::uniform_mixture(&components);
        push(
            "age_mean".into(),
            age.mean,
            age.se_mean(nf),
            StatKind::Moment,
        );
        push("age_sd".into(), age.sd(), age.se_sd(nf), StatKind::Moment);
    }
    for (variable, _) in DEMOGRAPHIC_COLUMNS {
        if let Some(spec) = configs.population.categorical(variable) {
            let total = spec.total_weight();
            for level in &spec.levels {
                let p = level.weight / total;
                push(
                    pct_name(variable, &level.value),
                    100.0 * p,
                    100.0 * (p * (1.0 - p) / nf).sqrt(),
                    StatKind::Percent,
                );
            }
        }
    }
    push(
        "admissions_mean".into(),
        counts.mean,
        counts.se_mean(nf),
        StatKind::Moment,
    );
    push(
        "admissions_sd".into(),
        counts.sd(),
        counts.se_sd(nf),
        StatKind::Moment,
    );

    let n_admissions = nf * counts.mean;
    let los = MixtureMoments::discrete(
        &(params.los_days_min..=params.los_days_max)
            .map(|d| (d as f64, 1.0))
            .collect::<Vec<_>>(),
    );
    push(
        "los_mean".into(),
        los.mean,
        los.se_mean(n_admissions),
        StatKind::Moment,
    );
    push(
        "los_sd".into(),
        los.sd(),
        los.se_sd(n_admissions),
        StatKind::Moment,
    );

    if let Some(poverty) = configs.population.range(config::POVERTY) {
        let components: Vec<(f64, f64, f64)> = poverty
            .buckets
            .iter()
            .filter_map(|b| Some((b.weight, b.min.as_scalar()?, b.max.as_scalar()?)))
            .collect();
        let m = MixtureMoments::uniform_mixture(&components);
        push(
            "poverty_mean".into(),
            m.mean,
            m.se_mean(nf),
            StatKind::Moment,
        );
        push("poverty_sd".into(), m.sd(), m.se_sd(nf), StatKind::Moment);
    }

    for category in configs.catalog.categories() {
        let p = prevalence_expected(configs.catalog.category_mass(&category), dist);
        push(
            format!("prevalence[{category}]"),
            100.0 * p,
            100.0 * (p * (1.0 - p) / nf).sqrt(),
            StatKind::Percent,
        );
    }

    let n_per_lab = n_admissions * labs_per_type.mean;
    for lab in &configs.labs {
        let m = MixtureMoments::uniform_mixture(&[(1.0, lab.min_value, lab.max_value)]);
        push(
            format!("lab_mean[{}]", lab.title),
            m.mean,
            m.se_mean(n_per_lab),
            StatKind::LabMoment,
        );
        push(
            format!("lab_sd[{}]", lab.title),
            m.sd(),
            m.se_sd(n_per_lab),
            StatKind::LabMoment,
        );
    }

    ExpectedSummary {
        n_patients: n,
        statistics: stats,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToleranceProfile {
    /// Standard errors allowed.
    pub z: f64,
    /// Absolute floor for percentages, in percentage points.
    pub percent_floor: f64,
    /// Relative floor for lab means and SDs.
    pub lab_relative_floor: f64,
}

impl Default for ToleranceProfile {
    fn default() -> Self {
        ToleranceProfile {
            z: 4.0,
            percent_floor: 0.1,
            lab_relative_floor: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub rows: Vec<Deviation>,
    pub pass: bool,
}

impl DeviationReport {
    pub fn failures(&self) -> impl Iterator<Item = &Deviation> {
        self.rows.iter().filter(|d| !d.pass)
    }
}

impl fmt::Display for DeviationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "statistic\tobserved\texpected\ttolerance\tresult")?;
        for d in &self.rows {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}",
                d.name,
                fmt_num(d.observed),
                fmt_num(d.expected),
                fmt_num(d.tolerance),
                if d.pass { "pass" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall: {} ({} of {} statistics failed)",
            if self.pass { "pass" } else { "FAIL" },
            self.failures().count(),
            self.rows.len()
        )
    }
}

/// Passes a statistic when `|observed - expected| <= max(floor, z * se)`.
pub fn compare(
    observed: &CohortSummary,
    expected: &ExpectedSummary,
    profile: &ToleranceProfile,
) -> Result<DeviationReport, StatsError> {
    let observed_stats = observed.statistics();
    let observed_names: HashSet<&str> = observed_stats.iter().map(|(n, _)| n.as_str()).collect();
    let expected_names: HashSet<&str> = expected
        .statistics
        .iter()
        .map(|s| s.name.as_str())
        .collect();
    if observed_names != expected_names {
        let mut missing: Vec<&str> = expected_names
            .difference(&observed_names)
            .copied()
            .collect();
        let mut extra: Vec<&str> = observed_names
            .difference(&expected_names)
            .copied()
            .collect();
        missing.sort_unstable();
        extra.sort_unstable();
        return Err(StatsError::Mismatch(format!(
            "not observed: {missing:?}; not expected: {extra:?}"
        )));
    }
    let lookup: HashMap<&str, f64> = observed_stats
        .iter()
        .map(|(n, v)| (n.as_str(), *v))
        .collect();
    let rows: Vec<Deviation> = expected
        .statistics
        .iter()
        .map(|s| {
            let observed = lookup[s.name.as_str()];
            let floor = match s.kind {
                StatKind::Count | StatKind::Moment => 0.0,
                StatKind::Percent => profile.percent_floor,
                StatKind::LabMoment => profile.lab_relative_floor * s.expected.abs(),
            };
            let tolerance = floor.max(profile.z * s.std_error);
            Deviation {
                name: s.name.clone(),
                observed,
                expected: s.expected,
                tolerance,
                pass: (observed - s.expected).abs() <= tolerance,
            }
        })
        .collect();
    let pass = rows.iter().all(|d| d.pass);
    Ok(DeviationReport { rows, pass })
}

/// Machine-readable summary: `statistic<TAB>observed<TAB>expected<TAB>pass`.
/// Statistics without an expectation carry `NA` in the last two columns.
pub fn summary_tsv(observed: &CohortSummary, report: Option<&DeviationReport>) -> String {
    let mut s = String::from("statistic\tobserved\texpected\tpass\n");
    match report {
        Some(report) => {
            for d in &report.rows {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", d.name, d.observed, d.expected, d.pass);
            }
        }
        None => {
            for (name, v) in observed.statistics() {
                let _ = writeln!(s, "{name}\t{v}\tNA\tNA");
            }
        }
    }
    for (name, v) in observed.reported_only() {
        let _ = writeln!(s, "{name}\t{v}\tNA\tNA");
    }
    s
}
