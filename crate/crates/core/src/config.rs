//! Generation configuration: demographic weight tables, range buckets, lab
//! types, the chief-complaint catalog and generation parameters.
//!
//! Every table is a small comma-separated text file. Lines starting with `#`
//! are comments, and a header row matching the documented column names is
//! skipped. Loaders reject rows that cannot be parsed, reporting the line
//! number; [`validate`] checks the semantic invariants and collects every
//! violation into a [`ValidationReport`].

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};

/// Absolute tolerance on "weights sum to 100".
pub const WEIGHT_SUM_TOLERANCE: f64 = 0.01;
pub const MAX_DECIMALS: u32 = 6;

pub const GENDER: &str = "Gender";
pub const MARITAL_STATUS: &str = "MaritalStatus";
pub const LANGUAGE: &str = "Language";
pub const ETHNICITY: &str = "Ethnicity";
pub const DATE_OF_BIRTH: &str = "DateOfBirth";
pub const POVERTY: &str = "PopulationPercentageBelowPoverty";

pub const POPULATION_FILE: &str = "population.csv";
pub const RANGES_FILE: &str = "population_ranges.csv";
pub const LABS_FILE: &str = "labs.csv";
pub const COMPLAINTS_FILE: &str = "complaints.csv";
pub const PARAMS_FILE: &str = "params.cfg";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}: {message}")]
    Invalid { file: String, message: String },
}

impl ConfigError {
    fn parse(file: &str, line: u64, message: impl Into<String>) -> Self {
        ConfigError::Parse {
            file: file.to_string(),
            line,
            message: message.into(),
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, ConfigError::Io { .. })
    }
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub value: String,
    /// Percentage of the population, 0..=100.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalSpec {
    pub variable: String,
    pub levels: Vec<Level>,
}

impl CategoricalSpec {
    pub fn weights(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.weight).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.levels.iter().map(|l| l.weight).sum()
    }
}

/// One end of a range bucket: a plain number or a calendar date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Scalar(f64),
    Date(NaiveDate),
}

impl Bound {
    fn parse(text: &str) -> Option<Bound> {
        if text.contains('/') {
            parse_mdy(text).map(Bound::Date)
        } else {
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Bound::Scalar)
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match *self {
            Bound::Scalar(v) => Some(v),
            Bound::Date(_) => None,
        }
    }

    pub fn as_date(&self) -> Option<NaiveDate> {
        match *self {
            Bound::Date(d) => Some(d),
            Bound::Scalar(_) => None,
        }
    }

    fn same_kind(&self, other: &Bound) -> bool {
        matches!(
            (self, other),
            (Bound::Scalar(_), Bound::Scalar(_)) | (Bound::Date(_), Bound::Date(_))
        )
    }

    fn less_than(&self, other: &Bound) -> bool {
        match (self, other) {
            (Bound::Scalar(a), Bound::Scalar(b)) => a < b,
            (Bound::Date(a), Bound::Date(b)) => a < b,
            _ => false,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Scalar(v) => write!(f, "{v}"),
            Bound::Date(d) => write!(f, "{}/{}/{}", d.month(), d.day(), d.year()),
        }
    }
}

/// Parses the `M/D/YYYY` dates used by the range tables.
pub fn parse_mdy(text: &str) -> Option<NaiveDate> {
    let mut parts = text.trim().split('/');
    let month = parts.next()?.parse().ok()?;
    let day = parts.next()?.parse().ok()?;
    let year = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    NaiveDate::from_ymd_opt(year, month, day)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub min: Bound,
    pub max: Bound,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeBucketSpec {
    pub variable: String,
    pub buckets: Vec<Bucket>,
}

impl RangeBucketSpec {
    pub fn weights(&self) -> Vec<f64> {
        self.buckets.iter().map(|b| b.weight).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.buckets.iter().map(|b| b.weight).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PopulationConfig {
    pub categorical: Vec<CategoricalSpec>,
    pub ranges: Vec<RangeBucketSpec>,
}

impl PopulationConfig {
    pub fn categorical(&self, variable: &str) -> Option<&CategoricalSpec> {
        self.categorical.iter().find(|c| c.variable == variable)
    }

    pub fn range(&self, variable: &str) -> Option<&RangeBucketSpec> {
        self.ranges.iter().find(|r| r.variable == variable)
    }

    pub fn categorical_csv(&self) -> String {
        let out = String::from("variable,value,weight\n");
        let mut w = csv_writer();
        for spec in &self.categorical {
            for level in &spec.levels {
                w.write_record([
                    spec.variable.as_str(),
                    level.value.as_str(),
                    &level.weight.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        finish(w, out)
    }

    pub fn ranges_csv(&self) -> String {
        let out = String::from("variable,min,max,weight\n");
        let mut w = csv_writer();
        for spec in &self.ranges {
            for b in &spec.buckets {
                w.write_record([
                    spec.variable.as_str(),
                    &b.min.to_string(),
                    &b.max.to_string(),
                    &b.weight.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        finish(w, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabSpec {
    pub title: String,
    pub min_value: f64,
    pub max_value: f64,
    pub units: String,
    /// Display precision of generated values.
    pub decimals: u32,
}

impl LabSpec {
    /// 3 decimals for ranges narrower than one unit, 1 otherwise.
    pub fn default_decimals(min: f64, max: f64) -> u32 {
        if max - min < 1.0 {
            3
        } else {
            1
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min_value && value <= self.max_value
    }
}

pub fn labs_csv(labs: &[LabSpec]) -> String {
    let out = String::from("title,min,max,units,decimals\n");
    let mut w = csv_writer();
    for lab in labs {
        w.write_record([
            lab.title.as_str(),
            &lab.min_value.to_string(),
            &lab.max_value.to_string(),
            lab.units.as_str(),
            &lab.decimals.to_string(),
        ])
        .expect("in-memory write");
    }
    finish(w, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SexRestriction {
    None,
    MaleOnly,
    FemaleOnly,
}

impl SexRestriction {
    fn parse(text: &str) -> Option<Self> {
        match text.to_ascii_lowercase().as_str() {
            "none" | "" => Some(SexRestriction::None),
            "male_only" => Some(SexRestriction::MaleOnly),
            "female_only" => Some(SexRestriction::FemaleOnly),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SexRestriction::None => "none",
            SexRestriction::MaleOnly => "male_only",
            SexRestriction::FemaleOnly => "female_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Complaint {
    pub code: String,
    pub description: String,
    pub weight: f64,
    pub categories: Vec<String>,
    pub sex_restricted: SexRestriction,
}

impl Complaint {
    pub fn is_usable(&self) -> bool {
        self.sex_restricted == SexRestriction::None
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComplaintCatalog {
    pub entries: Vec<Complaint>,
}

impl ComplaintCatalog {
    /// Entries applicable to both sexes; the only ones generation draws from.
    pub fn usable(&self) -> impl Iterator<Item = &Complaint> {
        self.entries.iter().filter(|c| c.is_usable())
    }

    pub fn usable_weight(&self) -> f64 {
        self.usable().map(|c| c.weight).sum()
    }

    /// Distinct category tags in first-appearance order.
    pub fn categories(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for entry in &self.entries {
            for cat in &entry.categories {
                if seen.insert(cat.as_str()) {
                    out.push(cat.clone());
                }
            }
        }
        out
    }

    /// Probability that one admission's diagnosis carries `category`.
    pub fn category_mass(&self, category: &str) -> f64 {
        let total = self.usable_weight();
        if total <= 0.0 {
            return 0.0;
        }
        let tagged: f64 = self
            .usable()
            .filter(|c| c.categories.iter().any(|t| t == category))
            .map(|c| c.weight)
            .sum();
        tagged / total
    }

    pub fn to_csv(&self) -> String {
        let out = String::from("code,description,weight,categories,sex_restricted\n");
        let mut w = csv_writer();
        for c in &self.entries {
            w.write_record([
                c.code.as_str(),
                c.description.as_str(),
                &c.weight.to_string(),
                &c.categories.join(";"),
                c.sex_restricted.as_str(),
            ])
            .expect("in-memory write");
        }
        finish(w, out)
    }
}

/// Weighted distribution over admission counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissionCountDist {
    pub buckets: Vec<(u32, f64)>,
}

impl AdmissionCountDist {
    pub fn single(count: u32) -> Self {
        AdmissionCountDist {
            buckets: vec![(count, 100.0)],
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        let mut buckets = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (count, weight) = item.split_once(':')?;
            let count = count.trim().parse().ok()?;
            let weight: f64 = weight.trim().parse().ok()?;
            if !weight.is_finite() {
                return None;
            }
            buckets.push((count, weight));
        }
        if buckets.is_empty() {
            None
        } else {
            Some(AdmissionCountDist { buckets })
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.buckets.iter().map(|b| b.1).sum()
    }

    /// Normalised `(count, probability)` pairs.
    pub fn probabilities(&self) -> Vec<(u32, f64)> {
        let total = self.total_weight();
        self.buckets.iter().map(|&(m, w)| (m, w / total)).collect()
    }

    pub fn mean(&self) -> f64 {
        self.probabilities()
            .iter()
            .map(|&(m, p)| p * m as f64)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.probabilities()
            .iter()
            .map(|&(m, p)| p * (m as f64 - mean).powi(2))
            .sum()
    }
}

impl fmt::Display for AdmissionCountDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (m, w)) in self.buckets.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{m}:{w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub n_patients: u64,
    pub master_seed: u64,
    pub admission_count_dist: AdmissionCountDist,
    pub los_days_min: u32,
    pub los_days_max: u32,
    pub labs_per_type_max: u32,
    pub cutoff_date: NaiveDate,
    pub max_age_years: u32,
    pub first_admission_offset_years: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            n_patients: 100,
            master_seed: 0,
            admission_count_dist: AdmissionCountDist::parse(DEFAULT_ADMISSION_DIST)
                .expect("default distribution"),
            los_days_min: 1,
            los_days_max: 20,
            labs_per_type_max: 16,
            cutoff_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            max_age_years: 95,
            first_admission_offset_years: 1.0,
        }
    }
}

const DEFAULT_ADMISSION_DIST: &str =
    "1:7.87,2:16.72,3:24.28,4:24.13,5:16.38,6:7.60,7:2.41,8:0.52,9:0.08,10:0.01";

impl GenerationParams {
    pub fn parse(src: &str) -> Result<Self> {
        let file = PARAMS_FILE;
        let mut params = GenerationParams::default();
        let mut seen = HashSet::new();
        for (idx, raw) in src.lines().enumerate() {
            let line_no = idx as u64 + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::parse(file, line_no, "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::parse(
                    file,
                    line_no,
                    format!("duplicate key `{key}`"),
                ));
            }
            let bad =
                |what: &str| ConfigError::parse(file, line_no, format!("invalid {what} `{value}`"));
            match key {
                "n_patients" => params.n_patients = value.parse().map_err(|_| bad(key))?,
                "master_seed" => params.master_seed = value.parse().map_err(|_| bad(key))?,
                "admission_count_dist" => {
                    params.admission_count_dist =
                        AdmissionCountDist::parse(value).ok_or_else(|| bad(key))?
                }
                "los_days_min" => params.los_days_min = value.parse().map_err(|_| bad(key))?,
                "los_days_max" => params.los_days_max = value.parse().map_err(|_| bad(key))?,
                "labs_per_type_max" => {
                    params.labs_per_type_max = value.parse().map_err(|_| bad(key))?
                }
                "cutoff_date" => {
                    params.cutoff_date = NaiveDate::parse_from_str(value, "%Y-%m-%d")
                        .or_else(|_| parse_mdy(value).ok_or(()))
                        .map_err(|_| bad(key))?
                }
                "max_age_years" => params.max_age_years = value.parse().map_err(|_| bad(key))?,
                "first_admission_offset_years" => {
                    params.first_admission_offset_years = value
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad(key))?
                }
                _ => {
                    return Err(ConfigError::parse(
                        file,
                        line_no,
                        format!("unknown key `{key}`"),
                    ))
                }
            }
        }
        Ok(params)
    }

    pub fn to_cfg(&self) -> String {
        format!(
            "n_patients={}\nmaster_seed={}\nadmission_count_dist={}\nlos_days_min={}\n\
             los_days_max={}\nlabs_per_type_max={}\ncutoff_date={}\nmax_age_years={}\n\
             first_admission_offset_years={}\n",
            self.n_patients,
            self.master_seed,
            self.admission_count_dist,
            self.los_days_min,
            self.los_days_max,
            self.labs_per_type_max,
            self.cutoff_date.format("%Y-%m-%d"),
            self.max_age_years,
            self.first_admission_offset_years,
        )
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>, mut out: String) -> String {
    let bytes = w.into_inner().expect("in-memory flush");
    out.push_str(std::str::from_utf8(&bytes).expect("utf-8 input"));
    out
}

/// Data rows of a comma-separated table with their 1-based line numbers.
/// Comments, blank lines and a leading header row are skipped.
/// A data row and its 1-based line number.
type Row = (u64, Vec<String>);

fn rows(file: &str, src: &str, header_first: &str) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(src.as_bytes());
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(ConfigError::parse(file, line, e.to_string()));
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if first {
            first = false;
            if record
                .get(0)
                .is_some_and(|f| f.eq_ignore_ascii_case(header_first))
            {
                continue;
            }
        }
        out.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn parse_weight(file: &str, line: u64, text: &str) -> Result<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|w| w.is_finite())
        .ok_or_else(|| ConfigError::parse(file, line, format!("non-numeric weight `{text}`")))
}

fn expect_columns(file: &str, line: u64, row: &[String], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&row.len()) {
        Ok(())
    } else {
        Err(ConfigError::parse(
            file,
            line,
            format!("expected {allowed:?} columns, found {}", row.len()),
        ))
    }
}

/// Groups rows by variable name. A variable must be defined by one
/// contiguous block of rows; seeing it again later is a duplicate definition.
fn group_rows<'a>(
    file: &str,
    rows: &'a [Row],
    seen: &mut HashSet<String>,
) -> Result<Vec<(String, Vec<&'a Row>)>> {
    let mut groups: Vec<(String, Vec<&Row>)> = Vec::new();
    for row in rows {
        let var = &row.1[0];
        match groups.last_mut() {
            Some((current, members)) if current == var => members.push(row),
            _ => {
                if !seen.insert(var.clone()) {
                    return Err(ConfigError::parse(
                        file,
                        row.0,
                        format!("duplicate definition of variable `{var}`"),
                    ));
                }
                groups.push((var.clone(), vec![row]));
            }
        }
    }
    Ok(groups)
}

pub fn parse_categorical(src: &str) -> Result<Vec<CategoricalSpec>> {
    parse_categorical_tracked(src, &mut HashSet::new())
}

fn parse_categorical_tracked(
    src: &str,
    seen: &mut HashSet<String>,
) -> Result<Vec<CategoricalSpec>> {
    let file = POPULATION_FILE;
    let rows = rows(file, src, "variable")?;
    for (line, row) in &rows {
        expect_columns(file, *line, row, &[3])?;
    }
    group_rows(file, &rows, seen)?
        .into_iter()
        .map(|(variable, members)| {
            let levels = members
                .into_iter()
                .map(|(line, row)| {
                    Ok(Level {
                        value: row[1].clone(),
                        weight: parse_weight(file, *line, &row[2])?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(CategoricalSpec { variable, levels })
        })
        .collect()
}

pub fn parse_ranges(src: &str) -> Result<Vec<RangeBucketSpec>> {
    parse_ranges_tracked(src, &mut HashSet::new())
}

fn parse_ranges_tracked(src: &str, seen: &mut HashSet<String>) -> Result<Vec<RangeBucketSpec>> {
    let file = RANGES_FILE;
    let rows = rows(file, src, "variable")?;
    for (line, row) in &rows {
        expect_columns(file, *line, row, &[4])?;
    }
    group_rows(file, &rows, seen)?
        .into_iter()
        .map(|(variable, members)| {
            let buckets = members
                .into_iter()
                .map(|(line, row)| {
                    let bound = |text: &str| {
                        Bound::parse(text).ok_or_else(|| {
                            ConfigError::parse(file, *line, format!("invalid bound `{text}`"))
                        })
                    };
                    Ok(Bucket {
                        min: bound(&row[1])?,
                        max: bound(&row[2])?,
                        weight: parse_weight(file, *line, &row[3])?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(RangeBucketSpec { variable, buckets })
        })
        .collect()
}

/// Loads the categorical table and the range-bucket table. A variable
/// defined in both is a duplicate.
pub fn load_population_config(categorical_src: &str, ranges_src: &str) -> Result<PopulationConfig> {
    let mut seen = HashSet::new();
    let categorical = parse_categorical_tracked(categorical_src, &mut seen)?;
    let ranges = parse_ranges_tracked(ranges_src, &mut seen)?;
    Ok(PopulationConfig {
        categorical,
        ranges,
    })
}

pub fn load_lab_config(src: &str) -> Result<Vec<LabSpec>> {
    let file = LABS_FILE;
    let mut titles = HashSet::new();
    let mut labs = Vec::new();
    for (line, row) in rows(file, src, "title")? {
        expect_columns(file, line, &row, &[4, 5])?;
        let number = |text: &str| {
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    ConfigError::parse(file, line, format!("non-numeric value `{text}`"))
                })
        };
        let min_value = number(&row[1])?;
        let max_value = number(&row[2])?;
        if min_value >= max_value {
            return Err(ConfigError::parse(
                file,
                line,
                format!(
                    "`{}`: min {min_value} must be below max {max_value}",
                    row[0]
                ),
            ));
        }
        let decimals = match row.get(4).map(String::as_str) {
            None | Some("") => LabSpec::default_decimals(min_value, max_value),
            Some(text) => text.parse().map_err(|_| {
                ConfigError::parse(file, line, format!("invalid decimals `{text}`"))
            })?,
        };
        if !titles.insert(row[0].clone()) {
            return Err(ConfigError::parse(
                file,
                line,
                format!("duplicate lab title `{}`", row[0]),
            ));
        }
        labs.push(LabSpec {
            title: row[0].clone(),
            min_value,
            max_value,
            units: row[3].clone(),
            decimals,
        });
    }
    Ok(labs)
}

/// Replaces field and record separators so descriptions stay on one
/// tab-delimited output row.
fn sanitize(text: &str) -> String {
    text.chars()
        .map(|c| {
            if matches!(c, '\t' | '\n' | '\r') {
                ' '
            } else {
                c
            }
        })
        .collect()
}

pub fn load_complaint_catalog(src: &str) -> Result<ComplaintCatalog> {
    let file = COMPLAINTS_FILE;
    let mut entries = Vec::new();
    for (line, row) in rows(file, src, "code")? {
        expect_columns(file, line, &row, &[5])?;
        let weight = parse_weight(file, line, &row[2])?;
        if weight < 0.0 {
            return Err(ConfigError::parse(
                file,
                line,
                format!("negative weight for `{}`", row[0]),
            ));
        }
        let sex_restricted = SexRestriction::parse(&row[4]).ok_or_else(|| {
            ConfigError::parse(file, line, format!("invalid sex restriction `{}`", row[4]))
        })?;
        entries.push(Complaint {
            code: row[0].clone(),
            description: sanitize(&row[1]),
            weight,
            categories: row[3]
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            sex_restricted,
        });
    }
    let catalog = ComplaintCatalog { entries };
    if catalog.usable().next().is_none() {
        return Err(ConfigError::Invalid {
            file: file.into(),
            message: "no entry applicable to both sexes".into(),
        });
    }
    if catalog.usable_weight() <= 0.0 {
        return Err(ConfigError::Invalid {
            file: file.into(),
            message: "usable entries have zero total weight".into(),
        });
    }
    Ok(catalog)
}

/// Raw text of the five configuration files.
#[derive(Debug, Clone)]
pub struct ConfigSources {
    pub population: String,
    pub ranges: String,
    pub labs: String,
    pub complaints: String,
    pub params: String,
}

impl ConfigSources {
    /// The shipped default configuration.
    pub fn defaults() -> Self {
        ConfigSources {
            population: include_str!("../config/population.csv").into(),
            ranges: include_str!("../config/population_ranges.csv").into(),
            labs: include_str!("../config/labs.csv").into(),
            complaints: include_str!("../config/complaints.csv").into(),
            params: include_str!("../config/params.cfg").into(),
        }
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source })
        };
        Ok(ConfigSources {
            population: read(POPULATION_FILE)?,
            ranges: read(RANGES_FILE)?,
            labs: read(LABS_FILE)?,
            complaints: read(COMPLAINTS_FILE)?,
            params: read(PARAMS_FILE)?,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        for (name, text) in self.files() {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|source| ConfigError::Io { path, source })?;
        }
        Ok(())
    }

    /// `(file name, contents)` pairs in a fixed order.
    pub fn files(&self) -> [(&'static str, &str); 5] {
        [
            (POPULATION_FILE, &self.population),
            (RANGES_FILE, &self.ranges),
            (LABS_FILE, &self.labs),
            (COMPLAINTS_FILE, &self.complaints),
            (PARAMS_FILE, &self.params),
        ]
    }

    pub fn parse(&self) -> Result<Configs> {
        Ok(Configs {
            population: load_population_config(&self.population, &self.ranges)?,
            labs: load_lab_config(&self.labs)?,
            catalog: load_complaint_catalog(&self.complaints)?,
            params: GenerationParams::parse(&self.params)?,
        })
    }
}

/// Everything needed to generate a cohort. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Configs {
    pub population: PopulationConfig,
    pub labs: Vec<LabSpec>,
    pub catalog: ComplaintCatalog,
    pub params: GenerationParams,
}

impl Configs {
    pub fn defaults() -> Self {
        ConfigSources::defaults()
            .parse()
            .expect("shipped defaults parse")
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        ConfigSources::read_dir(dir)?.parse()
    }

    pub fn validate(&self) -> ValidationReport {
        validate(&self.population, &self.labs, &self.catalog, &self.params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.errors.push(Issue {
            location: location.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.warnings.push(Issue {
            location: location.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        write!(
            f,
            "{} error(s), {} warning(s)",
            self.errors.len(),
            self.warnings.len()
        )
    }
}

fn check_weights(report: &mut ValidationReport, location: &str, weights: &[f64]) {
    if weights.is_empty() {
        report.error(location, "no levels defined");
        return;
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        report.error(location, "weights must be non-negative");
    }
    let total: f64 = weights.iter().sum();
    if (total - 100.0).abs() > WEIGHT_SUM_TOLERANCE {
        report.error(location, format!("weights sum to {total}, expected 100"));
    }
}

/// Calendar age in completed years on `on`.
pub fn age_in_years(dob: NaiveDate, on: NaiveDate) -> i32 {
    let mut age = on.year() - dob.year();
    if (on.month(), on.day()) < (dob.month(), dob.day()) {
        age -= 1;
    }
    age
}

/// Checks every configuration invariant and collects all violations.
pub fn validate(
    population: &PopulationConfig,
    labs: &[LabSpec],
    catalog: &ComplaintCatalog,
    params: &GenerationParams,
) -> ValidationReport {
    let mut report = ValidationReport::default();

    for spec in &population.categorical {
        let location = format!("{POPULATION_FILE}:{}", spec.variable);
        check_weights(&mut report, &location, &spec.weights());
        let mut values = HashSet::new();
        for level in &spec.levels {
            if !values.insert(level.value.as_str()) {
                report.error(&location, format!("duplicate level `{}`", level.value));
            }
        }
    }
    for required in [GENDER, MARITAL_STATUS, LANGUAGE, ETHNICITY] {
        if population.categorical(required).is_none() {
            report.error(POPULATION_FILE, format!("missing variable `{required}`"));
        }
    }

    for spec in &population.ranges {
        let location = format!("{RANGES_FILE}:{}", spec.variable);
        check_weights(&mut report, &location, &spec.weights());
        for (i, b) in spec.buckets.iter().enumerate() {
            if !b.min.same_kind(&b.max) {
                report.error(
                    &location,
                    format!("bucket {} mixes dates and numbers", i + 1),
                );
            } else if !b.min.less_than(&b.max) {
                report.error(
                    &location,
                    format!("bucket {}: min {} not below max {}", i + 1, b.min, b.max),
                );
            }
        }
        for (i, pair) in spec.buckets.windows(2).enumerate() {
            if pair[1].min.less_than(&pair[0].max) || !pair[0].min.same_kind(&pair[1].min) {
                report.error(
                    &location,
                    format!(
                        "buckets {} and {} overlap or are out of order",
                        i + 1,
                        i + 2
                    ),
                );
            }
        }
    }

    let cutoff = params.cutoff_date;
    match population.range(DATE_OF_BIRTH) {
        None => report.error(RANGES_FILE, format!("missing variable `{DATE_OF_BIRTH}`")),
        Some(spec) => {
            let location = format!("{RANGES_FILE}:{DATE_OF_BIRTH}");
            let dates: Vec<(NaiveDate, NaiveDate)> = spec
                .buckets
                .iter()
                .filter_map(|b| Some((b.min.as_date()?, b.max.as_date()?)))
                .collect();
            if dates.len() != spec.buckets.len() {
                report.error(&location, "bounds must be dates");
            }
            for (lo, hi) in &dates {
                let oldest = age_in_years(*lo, cutoff);
                if oldest > params.max_age_years as i32 {
                    report.error(
                        &location,
                        format!(
                            "bucket starting {} allows age {oldest} at {cutoff}, above {}",
                            Bound::Date(*lo),
                            params.max_age_years
                        ),
                    );
                }
                // Birth must leave room for the first admission before the cutoff.
                let latest_start = cutoff - chrono::Duration::days(params.los_days_max as i64);
                let earliest_admission = hi.and_hms_opt(0, 0, 0).unwrap()
                    + offset_duration(params.first_admission_offset_years);
                if earliest_admission >= latest_start.and_hms_opt(0, 0, 0).unwrap() {
                    report.error(
                        &location,
                        format!(
                            "bucket ending {} leaves no admission window before {cutoff}",
                            Bound::Date(*hi)
                        ),
                    );
                }
            }
        }
    }
    match population.range(POVERTY) {
        None => report.error(RANGES_FILE, format!("missing variable `{POVERTY}`")),
        Some(spec) => {
            let location = format!("{RANGES_FILE}:{POVERTY}");
            for b in &spec.buckets {
                match (b.min.as_scalar(), b.max.as_scalar()) {
                    (Some(lo), Some(hi))
                        if (0.0..=100.0).contains(&lo) && (0.0..=100.0).contains(&hi) => {}
                    (Some(_), Some(_)) => {
                        report.error(&location, "percentages must lie in 0..=100")
                    }
                    _ => report.error(&location, "bounds must be numbers"),
                }
            }
        }
    }

    if labs.is_empty() {
        report.error(LABS_FILE, "no lab types defined");
    }
    let mut titles = HashSet::new();
    for lab in labs {
        let location = format!("{LABS_FILE}:{}", lab.title);
        if lab.min_value.partial_cmp(&lab.max_value) != Some(Ordering::Less) {
            report.error(&location, "min must be below max");
        }
        if lab.decimals > MAX_DECIMALS {
            report.error(
                &location,
                format!("decimals {} exceeds {MAX_DECIMALS}", lab.decimals),
            );
        }
        if !titles.insert(lab.title.as_str()) {
            report.error(&location, "duplicate title");
        }
    }

    let mut codes = HashSet::new();
    for entry in &catalog.entries {
        if !codes.insert(entry.code.as_str()) {
            report.error(
                format!("{COMPLAINTS_FILE}:{}", entry.code),
                "duplicate code",
            );
        }
        if entry.weight.is_nan() || entry.weight < 0.0 {
            report.error(
                format!("{COMPLAINTS_FILE}:{}", entry.code),
                "weight must be non-negative",
            );
        }
    }
    if catalog.usable().next().is_none() {
        report.error(COMPLAINTS_FILE, "no entry applicable to both sexes");
    } else if catalog.usable_weight().partial_cmp(&0.0) != Some(Ordering::Greater) {
        report.error(COMPLAINTS_FILE, "usable entries have zero total weight");
    }

    let dist = &params.admission_count_dist;
    check_weights(
        &mut report,
        "params:admission_count_dist",
        &dist.buckets.iter().map(|b| b.1).collect::<Vec<_>>(),
    );
    if dist.buckets.iter().any(|&(m, _)| !(1..=10).contains(&m)) {
        report.error("params:admission_count_dist", "counts must lie in 1..=10");
    }
    let mut counts = HashSet::new();
    if dist.buckets.iter().any(|&(m, _)| !counts.insert(m)) {
        report.error("params:admission_count_dist", "duplicate count");
    }
    if params.los_days_min < 1 || params.los_days_min > params.los_days_max {
        report.error("params:los_days", "need 1 <= los_days_min <= los_days_max");
    } else if params.los_days_max > 20 {
        report.warn("params:los_days_max", "longer than the 20-day default");
    }
    if params.labs_per_type_max < 1 {
        report.error("params:labs_per_type_max", "must be at least 1");
    }
    if !params.first_admission_offset_years.is_finite() || params.first_admission_offset_years < 0.0
    {
        report.error(
            "params:first_admission_offset_years",
            "must be non-negative",
        );
    }
    if !(1901..=2100).contains(&cutoff.year()) {
        report.error("params:cutoff_date", "must lie in 1901..=2100");
    }
    if params.n_patients == 0 {
        report.warn("params:n_patients", "empty cohort");
    }
    report
}

/// Duration of the first-admission offset, years of 365.25 days.
pub fn offset_duration(years: f64) -> chrono::Duration {
    chrono::Duration::seconds((years * 365.25 * 86_400.0).round() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gender_rows_form_one_categorical_spec() {
        let specs = parse_categorical("Gender,Male,48\nGender,Female,52\n").unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].variable, "Gender");
        assert_eq!(
            specs[0].levels,
            vec![
                Level {
                    value: "Male".into(),
                    weight: 48.0
                },
                Level {
                    value: "Female".into(),
                    weight: 52.0
                }
            ]
        );
    }

    #[test]
    fn date_of_birth_bucket() {
        let specs = parse_ranges("DateOfBirth,1/1/1940,1/1/1950,15\n").unwrap();
        let b = &specs[0].buckets[0];
        assert_eq!(
            b.min,
            Bound::Date(NaiveDate::from_ymd_opt(1940, 1, 1).unwrap())
        );
        assert_eq!(
            b.max,
            Bound::Date(NaiveDate::from_ymd_opt(1950, 1, 1).unwrap())
        );
        assert_eq!(b.weight, 15.0);
    }

    #[test]
    fn single_level_and_unknown_variables_are_kept() {
        let specs = parse_categorical("X,only,100\n").unwrap();
        assert_eq!(specs[0].variable, "X");
        assert_eq!(specs[0].levels.len(), 1);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err =
            parse_categorical("# comment\nvariable,value,weight\nGender,Male,lots\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_categorical("Gender,Male\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    #[test]
    fn duplicate_variable_definition_is_rejected() {
        let err = parse_categorical("Gender,Male,48\nLanguage,English,100\nGender,Female,52\n")
            .unwrap_err();
        assert!(err.to_string().contains("duplicate definition"), "{err}");
        let err = load_population_config("Gender,Male,100\n", "Gender,0,1,100\n").unwrap_err();
        assert!(err.to_string().contains("duplicate definition"), "{err}");
    }

    #[test]
    fn lab_rows() {
        let labs =
            load_lab_config("Sodium,125,155,mmol/L\nUrine specific gravity,1.014,1.028,no unit\n")
                .unwrap();
        assert_eq!(labs[0].title, "Sodium");
        assert_eq!((labs[0].min_value, labs[0].max_value), (125.0, 155.0));
        assert_eq!(labs[0].units, "mmol/L");
        assert_eq!(labs[0].decimals, 1);
        assert_eq!(labs[1].decimals, 3);
        assert_eq!(labs[1].units, "no unit");

        let err = load_lab_config("Bad,10,5,u\n").unwrap_err();
        assert!(err.to_string().contains("must be below max"), "{err}");
        let err = load_lab_config("A,1,2,u\nA,3,4,u\n").unwrap_err();
        assert!(err.to_string().contains("duplicate lab title"), "{err}");
    }

    #[test]
    fn complaint_rows() {
        let catalog = load_complaint_catalog(
            "E11.9,Type 2 diabetes without complications,1.0,Diabetes,none\n\
             N18.9,Chronic kidney disease,1.0,Renal complications,none\n\
             C61,Malignant neoplasm of prostate,1.0,Malignant neoplasm,male_only\n",
        )
        .unwrap();
        assert_eq!(catalog.entries[0].categories, vec!["Diabetes"]);
        assert_eq!(catalog.entries[1].categories, vec!["Renal complications"]);
        assert_eq!(catalog.usable().count(), 2);
        assert_eq!(catalog.category_mass("Diabetes"), 0.5);
        assert_eq!(catalog.category_mass("Malignant neoplasm"), 0.0);
    }

    #[test]
    fn catalog_load_errors() {
        let err =
            load_complaint_catalog("C61,Prostate,1,Malignant neoplasm,male_only\n").unwrap_err();
        assert!(err.to_string().contains("both sexes"), "{err}");
        let err = load_complaint_catalog("A,a,-1,X,none\n").unwrap_err();
        assert!(err.to_string().contains("negative weight"), "{err}");
    }

    #[test]
    fn descriptions_lose_tabs_and_newlines() {
        let catalog = load_complaint_catalog("A,\"tab\there\nnewline\",1,X,none\n").unwrap();
        assert_eq!(catalog.entries[0].description, "tab here newline");
    }

    #[test]
    fn defaults_validate_cleanly() {
        let configs = Configs::defaults();
        let report = configs.validate();
        assert!(report.errors.is_empty(), "{report}");
        assert_eq!(configs.labs.len(), 35);
    }

    #[test]
    fn weight_sum_error() {
        let mut configs = Configs::defaults();
        configs.population.categorical[0].levels[1].weight = 53.0;
        let report = configs.validate();
        assert_eq!(report.errors.len(), 1, "{report}");
        assert!(report.errors[0].message.contains("sum to 101"), "{report}");
    }

    #[test]
    fn old_birth_bucket_violates_max_age() {
        let mut configs = Configs::defaults();
        let dob = configs
            .population
            .ranges
            .iter_mut()
            .find(|r| r.variable == DATE_OF_BIRTH)
            .unwrap();
        dob.buckets[0].min = Bound::Date(NaiveDate::from_ymd_opt(1910, 1, 1).unwrap());
        let report = configs.validate();
        assert!(
            report.errors.iter().any(|e| e.message.contains("age 105")),
            "{report}"
        );
    }

    #[test]
    fn validation_collects_every_violation() {
        let mut configs = Configs::defaults();
        configs.labs[0].min_value = 50.0;
        configs.labs[1].decimals = 9;
        configs.params.los_days_min = 0;
        configs.params.admission_count_dist = AdmissionCountDist {
            buckets: vec![(11, 100.0)],
        };
        configs.catalog.entries[1].code = configs.catalog.entries[0].code.clone();
        let report = configs.validate();
        assert_eq!(report.errors.len(), 5, "{report}");
    }

    #[test]
    fn params_round_trip() {
        let params = GenerationParams::parse(include_str!("../config/params.cfg")).unwrap();
        assert_eq!(params, GenerationParams::default());
        assert_eq!(GenerationParams::parse(&params.to_cfg()).unwrap(), params);
        assert!(GenerationParams::parse("bogus=1\n").is_err());
        assert!(GenerationParams::parse("los_days_min=x\n").is_err());
    }

    #[test]
    fn calendar_age() {
        let cutoff = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        assert_eq!(
            age_in_years(NaiveDate::from_ymd_opt(1920, 1, 1).unwrap(), cutoff),
            95
        );
        assert_eq!(
            age_in_years(NaiveDate::from_ymd_opt(1919, 12, 31).unwrap(), cutoff),
            95
        );
        assert_eq!(
            age_in_years(NaiveDate::from_ymd_opt(1919, 1, 1).unwrap(), cutoff),
            96
        );
    }
}
