//! Builds the longitudinal record of each virtual patient.
//!
//! A patient is a pure function of `(configs, patient_index)`. Draws from
//! the patient's stream happen in a fixed order so independent
//! implementations can be compared draw for draw:
//!
//! 1. patient id (two 64-bit draws)
//! 2. demographics: gender, date of birth (bucket, then instant), ethnicity,
//!    marital status, language, poverty percentage (bucket, then value)
//! 3. admission count
//! 4. all admission start instants, then all lengths of stay
//! 5. one diagnosis per scheduled admission
//! 6. labs per admission, in lab-table order; for each lab type the count,
//!    then the timestamps, then the values

use std::collections::VecDeque;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rayon::prelude::*;
use uuid::Uuid;

use crate::config::{self, Complaint, Configs, GenerationParams, LabSpec, ValidationReport};
use crate::rng::{stream_for_patient, RngStream, WeightedIndex};

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("configuration is not usable for generation:\n{0}")]
    InvalidConfig(ValidationReport),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demographics {
    pub gender: String,
    pub date_of_birth: NaiveDateTime,
    pub ethnicity: String,
    pub marital_status: String,
    pub language: String,
    pub poverty_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabResult {
    /// Position of the lab type in the lab table.
    pub lab: usize,
    pub value: f64,
    pub taken_at: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Admission {
    /// 1-based, chronological within the patient.
    pub admission_index: u32,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub diagnosis_code: String,
    pub diagnosis_description: String,
    pub labs: Vec<LabResult>,
}

impl Admission {
    pub fn length_of_stay_days(&self) -> i64 {
        (self.end - self.start).num_days()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub index: u64,
    pub patient_id: Uuid,
    pub demographics: Demographics,
    pub admissions: Vec<Admission>,
    /// Admissions dropped because they did not fit before the cutoff.
    pub dropped_admissions: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub spans: Vec<(NaiveDateTime, NaiveDateTime)>,
    pub dropped: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no admission window between {earliest} and {latest}")]
pub struct EmptyWindow {
    pub earliest: NaiveDateTime,
    pub latest: NaiveDateTime,
}

pub fn midnight(date: NaiveDate) -> NaiveDateTime {
    date.and_hms_opt(0, 0, 0).expect("midnight exists")
}

/// Places `count` admissions between `dob + offset` and the cutoff.
///
/// Starts are uniform over `[dob + offset, cutoff - los_max)`; each admission
/// lasts a whole number of days. After sorting by start, an admission that
/// begins before the previous one ends is moved to one day after that end,
/// and one pushed past the cutoff is clamped to end exactly at the cutoff.
/// Admissions that still overlap after clamping are dropped (never the first).
pub fn schedule_admissions(
    stream: &mut RngStream,
    dob: NaiveDateTime,
    count: u32,
    params: &GenerationParams,
) -> Result<Schedule, EmptyWindow> {
    let cutoff = midnight(params.cutoff_date);
    let earliest = dob + config::offset_duration(params.first_admission_offset_years);
    let latest = cutoff - Duration::days(params.los_days_max as i64);
    if earliest >= latest {
        return Err(EmptyWindow { earliest, latest });
    }
    let count = count.max(1) as usize;
    let starts: Vec<NaiveDateTime> = (0..count)
        .map(|_| stream.uniform_datetime(earliest, latest))
        .collect();
    let stays: Vec<i64> = (0..count)
        .map(|_| stream.uniform_int(params.los_days_min as i64, params.los_days_max as i64))
        .collect();

    let mut drafted: Vec<(NaiveDateTime, Duration)> = starts
        .into_iter()
        .zip(stays.into_iter().map(Duration::days))
        .collect();
    drafted.sort_by_key(|&(start, _)| start);

    let mut spans: Vec<(NaiveDateTime, NaiveDateTime)> = Vec::with_capacity(count);
    for (mut start, los) in drafted {
        if let Some(&(_, prev_end)) = spans.last() {
            if start <= prev_end {
                start = prev_end + Duration::days(1);
            }
            if start + los > cutoff {
                start = cutoff - los;
            }
            if start <= prev_end {
                break;
            }
        }
        spans.push((start, start + los));
    }
    let dropped = (count - spans.len()) as u32;
    Ok(Schedule { spans, dropped })
}

/// Rounds half away from zero to `decimals` places.
#[inline]
pub fn round_half_up(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (value * scale).round() / scale
}

/// Cohort generator over one immutable, validated configuration.
#[derive(Debug, Clone)]
pub struct Generator<'a> {
    configs: &'a Configs,
    gender: (Vec<String>, WeightedIndex),
    ethnicity: (Vec<String>, WeightedIndex),
    marital_status: (Vec<String>, WeightedIndex),
    language: (Vec<String>, WeightedIndex),
    dob_buckets: Vec<(NaiveDateTime, NaiveDateTime)>,
    dob_index: WeightedIndex,
    poverty_buckets: Vec<(f64, f64)>,
    poverty_index: WeightedIndex,
    admission_counts: Vec<u32>,
    admission_index: WeightedIndex,
    complaints: Vec<&'a Complaint>,
    complaint_index: WeightedIndex,
}

fn levels(configs: &Configs, variable: &str) -> (Vec<String>, WeightedIndex) {
    let spec = configs.population.categorical(variable).expect("validated");
    (
        spec.levels.iter().map(|l| l.value.clone()).collect(),
        WeightedIndex::new(&spec.weights()).expect("validated"),
    )
}

impl<'a> Generator<'a> {
    /// Fails when [`Configs::validate`] reports errors.
    pub fn new(configs: &'a Configs) -> Result<Self, GenerateError> {
        let report = configs.validate();
        if !report.is_ok() {
            return Err(GenerateError::InvalidConfig(report));
        }
        let dob = configs
            .population
            .range(config::DATE_OF_BIRTH)
            .expect("validated");
        let poverty = configs
            .population
            .range(config::POVERTY)
            .expect("validated");
        let complaints: Vec<&Complaint> = configs.catalog.usable().collect();
        let dist = &configs.params.admission_count_dist;
        Ok(Generator {
            configs,
            gender: levels(configs, config::GENDER),
            ethnicity: levels(configs, config::ETHNICITY),
            marital_status: levels(configs, config::MARITAL_STATUS),
            language: levels(configs, config::LANGUAGE),
            dob_buckets: dob
                .buckets
                .iter()
                .map(|b| {
                    (
                        midnight(b.min.as_date().unwrap()),
                        midnight(b.max.as_date().unwrap()),
                    )
                })
                .collect(),
            dob_index: WeightedIndex::new(&dob.weights()).expect("validated"),
            poverty_buckets: poverty
                .buckets
                .iter()
                .map(|b| (b.min.as_scalar().unwrap(), b.max.as_scalar().unwrap()))
                .collect(),
            poverty_index: WeightedIndex::new(&poverty.weights()).expect("validated"),
            admission_counts: dist.buckets.iter().map(|b| b.0).collect(),
            admission_index: WeightedIndex::new(
                &dist.buckets.iter().map(|b| b.1).collect::<Vec<_>>(),
            )
            .expect("validated"),
            complaint_index: WeightedIndex::new(
                &complaints.iter().map(|c| c.weight).collect::<Vec<_>>(),
            )
            .expect("validated"),
            complaints,
        })
    }

    pub fn configs(&self) -> &'a Configs {
        self.configs
    }

    pub fn params(&self) -> &'a GenerationParams {
        &self.configs.params
    }

    pub fn labs(&self) -> &'a [LabSpec] {
        &self.configs.labs
    }

    pub fn generate_demographics(&self, stream: &mut RngStream) -> Demographics {
        let pick = |stream: &mut RngStream, (values, index): &(Vec<String>, WeightedIndex)| {
            values[index.pick(stream)].clone()
        };
        let gender = pick(stream, &self.gender);
        let (lo, hi) = self.dob_buckets[self.dob_index.pick(stream)];
        let date_of_birth = stream.uniform_datetime(lo, hi);
        let ethnicity = pick(stream, &self.ethnicity);
        let marital_status = pick(stream, &self.marital_status);
        let language = pick(stream, &self.language);
        let (lo, hi) = self.poverty_buckets[self.poverty_index.pick(stream)];
        let poverty_pct = round_half_up(lo + stream.next_unit() * (hi - lo), 2).clamp(lo, hi);
        Demographics {
            gender,
            date_of_birth,
            ethnicity,
            marital_status,
            language,
            poverty_pct,
        }
    }

    pub fn sample_admission_count(&self, stream: &mut RngStream) -> u32 {
        self.admission_counts[self.admission_index.pick(stream)]
    }

    pub fn assign_diagnosis(&self, stream: &mut RngStream) -> &'a Complaint {
        self.complaints[self.complaint_index.pick(stream)]
    }

    /// Lab results for one admission, grouped by lab type in table order and
    /// sorted by time within a type.
    pub fn generate_labs(
        &self,
        stream: &mut RngStream,
        start: NaiveDateTime,
        end: NaiveDateTime,
    ) -> Vec<LabResult> {
        let max_per_type = self.params().labs_per_type_max as i64;
        let mut results = Vec::with_capacity(self.labs().len() * (max_per_type as usize + 1) / 2);
        let mut times = Vec::with_capacity(max_per_type as usize);
        for (lab, spec) in self.labs().iter().enumerate() {
            let count = stream.uniform_int(1, max_per_type);
            times.clear();
            times.extend((0..count).map(|_| stream.uniform_datetime(start, end)));
            times.sort_unstable();
            let (lo, hi) = (spec.min_value, spec.max_value);
            for &taken_at in &times {
                let raw = lo + stream.next_unit() * (hi - lo);
                results.push(LabResult {
                    lab,
                    value: round_half_up(raw, spec.decimals).clamp(lo, hi),
                    taken_at,
                });
            }
        }
        results
    }

    pub fn generate_patient(&self, index: u64) -> Patient {
        let params = self.params();
        let mut stream = stream_for_patient(params.master_seed, index);
        let id_bits = ((stream.next_u64() as u128) << 64) | stream.next_u64() as u128;
        let demographics = self.generate_demographics(&mut stream);
        let count = self.sample_admission_count(&mut stream);
        let schedule = schedule_admissions(&mut stream, demographics.date_of_birth, count, params)
            .expect("validated configs leave an admission window");
        let diagnoses: Vec<&Complaint> = schedule
            .spans
            .iter()
            .map(|_| self.assign_diagnosis(&mut stream))
            .collect();
        let admissions = schedule
            .spans
            .iter()
            .zip(diagnoses)
            .enumerate()
            .map(|(i, (&(start, end), diagnosis))| Admission {
                admission_index: i as u32 + 1,
                start,
                end,
                diagnosis_code: diagnosis.code.clone(),
                diagnosis_description: diagnosis.description.clone(),
                labs: self.generate_labs(&mut stream, start, end),
            })
            .collect();
        Patient {
            index,
            patient_id: Uuid::from_u128(id_bits),
            demographics,
            admissions,
            dropped_admissions: schedule.dropped,
        }
    }

    /// Patients `0..n_patients` in index order. Work is spread over
    /// `workers` threads a chunk at a time, so at most one chunk of patients
    /// is held in memory.
    pub fn generate_cohort(&self, workers: usize) -> Cohort<'_, 'a> {
        let workers = workers.max(1);
        Cohort {
            generator: self,
            pool: rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool"),
            next_index: 0,
            end: self.params().n_patients,
            chunk: (workers * 16) as u64,
            ready: VecDeque::new(),
        }
    }
}

pub struct Cohort<'g, 'a> {
    generator: &'g Generator<'a>,
    pool: rayon::ThreadPool,
    next_index: u64,
    end: u64,
    chunk: u64,
    ready: VecDeque<Patient>,
}

impl Iterator for Cohort<'_, '_> {
    type Item = Patient;

    fn next(&mut self) -> Option<Patient> {
        if self.ready.is_empty() && self.next_index < self.end {
            let range = self.next_index..(self.next_index + self.chunk).min(self.end);
            self.next_index = range.end;
            let generator = self.generator;
            let batch: Vec<Patient> = self.pool.install(|| {
                range
                    .into_par_iter()
                    .map(|i| generator.generate_patient(i))
                    .collect()
            });
            self.ready.extend(batch);
        }
        self.ready.pop_front()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.ready.len() + (self.end - self.next_index) as usize;
        (left, Some(left))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AdmissionCountDist, ComplaintCatalog, SexRestriction};

    fn dt(y: i32, m: u32, d: u32) -> NaiveDateTime {
        midnight(NaiveDate::from_ymd_opt(y, m, d).unwrap())
    }

    #[test]
    fn single_admission_fits_window() {
        let params = GenerationParams::default();
        for seed in 0..200 {
            let mut s = RngStream::from_state(seed);
            let dob = dt(1982, 5, 17);
            let schedule = schedule_admissions(&mut s, dob, 1, &params).unwrap();
            assert_eq!(schedule.spans.len(), 1);
            let (start, end) = schedule.spans[0];
            let los = (end - start).num_days();
            assert!((1..=20).contains(&los));
            assert_eq!(end - start, Duration::days(los));
            assert!(start >= dob + Duration::days(365));
            assert!(end <= dt(2015, 1, 1));
        }
    }

    #[test]
    fn crowded_window_is_repaired_or_trimmed() {
        // Birth late enough that only a couple of 20-day stays fit.
        let params = GenerationParams {
            los_days_min: 20,
            los_days_max: 20,
            first_admission_offset_years: 0.0,
            ..GenerationParams::default()
        };
        let dob = dt(2014, 11, 1);
        for seed in 0..200 {
            let mut s = RngStream::from_state(seed);
            let schedule = schedule_admissions(&mut s, dob, 10, &params).unwrap();
            assert!(!schedule.spans.is_empty());
            assert_eq!(schedule.spans.len() as u32 + schedule.dropped, 10);
            assert!(schedule.dropped >= 8);
            for pair in schedule.spans.windows(2) {
                assert!(pair[1].0 > pair[0].1);
            }
            for &(start, end) in &schedule.spans {
                assert_eq!(end - start, Duration::days(20));
                assert!(start >= dob && end <= dt(2015, 1, 1));
            }
        }
    }

    #[test]
    fn empty_window_is_an_error() {
        let params = GenerationParams::default();
        let mut s = RngStream::from_state(1);
        assert!(schedule_admissions(&mut s, dt(2014, 6, 1), 1, &params).is_err());
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(10.25, 1), 10.3);
        assert_eq!(round_half_up(7.0, 0), 7.0);
        assert_eq!(round_half_up(1.0144, 3), 1.014);
    }

    #[test]
    fn fixed_admission_count() {
        let mut configs = Configs::defaults();
        configs.params.admission_count_dist = AdmissionCountDist::single(3);
        let generator = Generator::new(&configs).unwrap();
        let mut s = RngStream::from_state(11);
        for _ in 0..1000 {
            assert_eq!(generator.sample_admission_count(&mut s), 3);
        }
    }

    #[test]
    fn singleton_catalog_always_picked() {
        let mut configs = Configs::defaults();
        configs.catalog = ComplaintCatalog {
            entries: vec![
                Complaint {
                    code: "I10".into(),
                    description: "Essential (primary) hypertension".into(),
                    weight: 1.0,
                    categories: vec!["Other".into()],
                    sex_restricted: SexRestriction::None,
                },
                Complaint {
                    code: "C61".into(),
                    description: "Malignant neoplasm of prostate".into(),
                    weight: 1000.0,
                    categories: vec!["Malignant neoplasm".into()],
                    sex_restricted: SexRestriction::MaleOnly,
                },
            ],
        };
        let generator = Generator::new(&configs).unwrap();
        let mut s = RngStream::from_state(5);
        for _ in 0..1000 {
            assert_eq!(generator.assign_diagnosis(&mut s).code, "I10");
        }
    }

    #[test]
    fn one_lab_per_type_when_forced() {
        let mut configs = Configs::defaults();
        configs.params.labs_per_type_max = 1;
        let generator = Generator::new(&configs).unwrap();
        let mut s = RngStream::from_state(2);
        let labs = generator.generate_labs(&mut s, dt(2010, 1, 1), dt(2010, 1, 4));
        assert_eq!(labs.len(), 35);
        assert!(labs.iter().enumerate().all(|(i, r)| r.lab == i));
    }

    #[test]
    fn three_day_stay_can_carry_six_creatinine_draws() {
        let configs = Configs::defaults();
        let generator = Generator::new(&configs).unwrap();
        let creatinine = configs
            .labs
            .iter()
            .position(|l| l.title == "Creatinine")
            .unwrap();
        let found = (0..500u64).any(|seed| {
            let mut s = RngStream::from_state(seed);
            let labs = generator.generate_labs(&mut s, dt(2010, 3, 1), dt(2010, 3, 4));
            labs.iter().filter(|r| r.lab == creatinine).count() == 6
        });
        assert!(found);
    }

    #[test]
    fn invalid_configs_are_refused() {
        let mut configs = Configs::defaults();
        configs.params.los_days_min = 0;
        assert!(Generator::new(&configs).is_err());
    }

    #[test]
    fn patients_are_reproducible() {
        let configs = Configs::defaults();
        let generator = Generator::new(&configs).unwrap();
        assert_eq!(
            generator.generate_patient(17),
            generator.generate_patient(17)
        );
        assert_ne!(
            generator.generate_patient(0).patient_id,
            generator.generate_patient(1).patient_id
        );
    }

    #[test]
    fn cohort_order_is_independent_of_workers() {
        let mut configs = Configs::defaults();
        configs.params.n_patients = 40;
        let generator = Generator::new(&configs).unwrap();
        let serial: Vec<Patient> = generator.generate_cohort(1).collect();
        let parallel: Vec<Patient> = generator.generate_cohort(3).collect();
        assert_eq!(serial.len(), 40);
        assert_eq!(serial, parallel);
        assert!(serial.iter().enumerate().all(|(i, p)| p.index == i as u64));

        configs.params.n_patients = 0;
        let generator = Generator::new(&configs).unwrap();
        assert_eq!(generator.generate_cohort(2).count(), 0);
    }
}
