//! Tab-delimited flat-file repository output.
//!
//! A repository is four UTF-8 text files with LF line endings, each starting
//! with a header row. Patients appear in index order, admissions in
//! chronological order, and lab rows in lab-table order then by time.
//! Nothing in the output depends on the number of worker threads.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;

use chrono::{Datelike, NaiveDateTime, Timelike};
use flate2::write::GzEncoder;
use flate2::Compression;
use rayon::prelude::*;

use crate::config::{LabSpec, MAX_DECIMALS};
use crate::patientgen::{Generator, Patient};

pub const PATIENTS_FILE: &str = "patients.txt";
pub const ADMISSIONS_FILE: &str = "admissions.txt";
pub const DIAGNOSES_FILE: &str = "diagnoses.txt";
pub const LABS_FILE: &str = "labs.txt";

pub const PATIENTS_HEADER: &str = "PatientID\tPatientGender\tPatientDateOfBirth\tPatientRace\t\
PatientMaritalStatus\tPatientLanguage\tPatientPopulationPercentageBelowPoverty";
pub const ADMISSIONS_HEADER: &str = "PatientID\tAdmissionID\tAdmissionStartDate\tAdmissionEndDate";
pub const DIAGNOSES_HEADER: &str =
    "PatientID\tAdmissionID\tPrimaryDiagnosisCode\tPrimaryDiagnosisDescription";
pub const LABS_HEADER: &str = "PatientID\tAdmissionID\tLabName\tLabValue\tLabUnits\tLabDateTime";

pub const POVERTY_DECIMALS: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("datetime {0} outside the supported years 1900..=2100")]
    DateOutOfRange(NaiveDateTime),
    #[error("cannot format value {value} with {decimals} decimals")]
    Value { value: f64, decimals: u32 },
    #[error("row counter overflow in {0}")]
    CounterOverflow(&'static str),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// The four files of a repository.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepoFile {
    Patients,
    Admissions,
    Diagnoses,
    Labs,
}

impl RepoFile {
    pub const ALL: [RepoFile; 4] = [
        RepoFile::Patients,
        RepoFile::Admissions,
        RepoFile::Diagnoses,
        RepoFile::Labs,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            RepoFile::Patients => PATIENTS_FILE,
            RepoFile::Admissions => ADMISSIONS_FILE,
            RepoFile::Diagnoses => DIAGNOSES_FILE,
            RepoFile::Labs => LABS_FILE,
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            RepoFile::Patients => PATIENTS_HEADER,
            RepoFile::Admissions => ADMISSIONS_HEADER,
            RepoFile::Diagnoses => DIAGNOSES_HEADER,
            RepoFile::Labs => LABS_HEADER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepositoryLayout {
    pub dir: PathBuf,
    pub gzip: bool,
}

impl RepositoryLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RepositoryLayout {
            dir: dir.into(),
            gzip: false,
        }
    }

    pub fn gzipped(dir: impl Into<PathBuf>) -> Self {
        RepositoryLayout {
            dir: dir.into(),
            gzip: true,
        }
    }

    /// Layout of an existing repository: gzip when `patients.txt.gz` exists.
    pub fn detect(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        let gzip =
            !dir.join(PATIENTS_FILE).exists() && dir.join(format!("{PATIENTS_FILE}.gz")).exists();
        RepositoryLayout { dir, gzip }
    }

    pub fn file_name(&self, file: RepoFile) -> String {
        if self.gzip {
            format!("{}.gz", file.file_name())
        } else {
            file.file_name().to_string()
        }
    }

    pub fn path(&self, file: RepoFile) -> PathBuf {
        self.dir.join(self.file_name(file))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileStats {
    pub name: String,
    /// Data rows, header excluded.
    pub rows: u64,
    /// Size on disk.
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmitStats {
    pub files: Vec<FileStats>,
    pub patients: u64,
    pub dropped_admissions: u64,
}

impl EmitStats {
    pub fn rows(&self, file: RepoFile) -> u64 {
        self.files[RepoFile::ALL.iter().position(|f| *f == file).unwrap()].rows
    }

    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.bytes).sum()
    }
}

impl fmt::Display for EmitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, file) in self.files.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {} rows, {} bytes", file.name, file.rows, file.bytes)?;
        }
        Ok(())
    }
}

/// `YYYY-MM-DD HH:MM:SS`.
pub fn format_datetime(t: NaiveDateTime) -> Result<String, EmitError> {
    let mut buf = Vec::with_capacity(19);
    write_datetime(&mut buf, t)?;
    Ok(String::from_utf8(buf).expect("ascii"))
}

#[inline]
fn push_digits(buf: &mut Vec<u8>, value: u32, width: usize) {
    let mut digits = [b'0'; 4];
    let mut v = value;
    for slot in digits[..width].iter_mut().rev() {
        *slot = b'0' + (v % 10) as u8;
        v /= 10;
    }
    buf.extend_from_slice(&digits[..width]);
}

pub fn write_datetime(buf: &mut Vec<u8>, t: NaiveDateTime) -> Result<(), EmitError> {
    let year = t.year();
    if !(1900..=2100).contains(&year) {
        return Err(EmitError::DateOutOfRange(t));
    }
    push_digits(buf, year as u32, 4);
    buf.push(b'-');
    push_digits(buf, t.month(), 2);
    buf.push(b'-');
    push_digits(buf, t.day(), 2);
    buf.push(b' ');
    push_digits(buf, t.hour(), 2);
    buf.push(b':');
    push_digits(buf, t.minute(), 2);
    buf.push(b':');
    push_digits(buf, t.second(), 2);
    Ok(())
}

/// Fixed-point rendering, rounded half-up on the shortest decimal form of
/// `value` (so `1.0145` at 3 decimals is `1.015`). Never uses exponents.
pub fn format_value(value: f64, decimals: u32) -> Result<String, EmitError> {
    let mut buf = Vec::new();
    write_value(&mut buf, value, decimals)?;
    Ok(String::from_utf8(buf).expect("ascii"))
}

pub fn write_value(buf: &mut Vec<u8>, value: f64, decimals: u32) -> Result<(), EmitError> {
    if !value.is_finite() || decimals > MAX_DECIMALS {
        return Err(EmitError::Value { value, decimals });
    }
    // Display for f64 is the shortest round-trip form and never exponential.
    let text = value.abs().to_string();
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let d = decimals as usize;
    let mut digits: Vec<u8> = int_part.bytes().collect();
    let frac = frac_part.as_bytes();
    digits.extend((0..d).map(|i| frac.get(i).copied().unwrap_or(b'0')));
    if frac.get(d).is_some_and(|&next| next >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, b'1');
                break;
            }
            i -= 1;
            if digits[i] == b'9' {
                digits[i] = b'0';
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    // A carry out of the leading digit lengthens the integer part.
    let int_len = digits.len() - d;
    if value < 0.0 && digits.iter().any(|&c| c != b'0') {
        buf.push(b'-');
    }
    buf.extend_from_slice(&digits[..int_len]);
    if d > 0 {
        buf.push(b'.');
        buf.extend_from_slice(&digits[int_len..]);
    }
    Ok(())
}

/// Rendered rows for one or more patients, one byte buffer per file.
#[derive(Debug, Default)]
pub struct RowBuffers {
    pub bytes: [Vec<u8>; 4],
    pub rows: [u64; 4],
    pub patients: u64,
    pub dropped_admissions: u64,
}

impl RowBuffers {
    pub fn clear(&mut self) {
        for b in &mut self.bytes {
            b.clear();
        }
        self.rows = [0; 4];
        self.patients = 0;
        self.dropped_admissions = 0;
    }
}

pub fn render_patient(
    patient: &Patient,
    labs: &[LabSpec],
    out: &mut RowBuffers,
) -> Result<(), EmitError> {
    let mut id_buf = [0u8; 36];
    let id = patient
        .patient_id
        .hyphenated()
        .encode_lower(&mut id_buf)
        .as_bytes();
    let d = &patient.demographics;
    let [patients, admissions, diagnoses, lab_rows] = &mut out.bytes;

    patients.extend_from_slice(id);
    patients.push(b'\t');
    patients.extend_from_slice(d.gender.as_bytes());
    patients.push(b'\t');
    write_datetime(patients, d.date_of_birth)?;
    for field in [&d.ethnicity, &d.marital_status, &d.language] {
        patients.push(b'\t');
        patients.extend_from_slice(field.as_bytes());
    }
    patients.push(b'\t');
    write_value(patients, d.poverty_pct, POVERTY_DECIMALS)?;
    patients.push(b'\n');
    out.rows[0] += 1;

    let mut index_buf = itoa_buf();
    for adm in &patient.admissions {
        let adm_id = format_index(&mut index_buf, adm.admission_index);

        admissions.extend_from_slice(id);
        admissions.push(b'\t');
        admissions.extend_from_slice(adm_id);
        admissions.push(b'\t');
        write_datetime(admissions, adm.start)?;
        admissions.push(b'\t');
        write_datetime(admissions, adm.end)?;
        admissions.push(b'\n');

        diagnoses.extend_from_slice(id);
        diagnoses.push(b'\t');
        diagnoses.extend_from_slice(adm_id);
        diagnoses.push(b'\t');
        diagnoses.extend_from_slice(adm.diagnosis_code.as_bytes());
        diagnoses.push(b'\t');
        diagnoses.extend_from_slice(adm.diagnosis_description.as_bytes());
        diagnoses.push(b'\n');

        for result in &adm.labs {
            let spec = &labs[result.lab];
            lab_rows.extend_from_slice(id);
            lab_rows.push(b'\t');
            lab_rows.extend_from_slice(adm_id);
            lab_rows.push(b'\t');
            lab_rows.extend_from_slice(spec.title.as_bytes());
            lab_rows.push(b'\t');
            write_value(lab_rows, result.value, spec.decimals)?;
            lab_rows.push(b'\t');
            lab_rows.extend_from_slice(spec.units.as_bytes());
            lab_rows.push(b'\t');
            write_datetime(lab_rows, result.taken_at)?;
            lab_rows.push(b'\n');
        }
        out.rows[3] += adm.labs.len() as u64;
    }
    out.rows[1] += patient.admissions.len() as u64;
    out.rows[2] += patient.admissions.len() as u64;
    out.patients += 1;
    out.dropped_admissions += patient.dropped_admissions as u64;
    Ok(())
}

fn itoa_buf() -> [u8; 10] {
    [0; 10]
}

fn format_index(buf: &mut [u8; 10], mut value: u32) -> &[u8] {
    let mut i = buf.len();
    loop {
        i -= 1;
        buf[i] = b'0' + (value % 10) as u8;
        value /= 10;
        if value == 0 {
            break;
        }
    }
    &buf[i..]
}

enum Sink {
    Plain(BufWriter<File>),
    Gzip(GzEncoder<BufWriter<File>>),
}

impl Write for Sink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Sink::Plain(w) => w.write(buf),
            Sink::Gzip(w) => w.write(buf),
        }
    }

    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        match self {
            Sink::Plain(w) => w.write_all(buf),
            Sink::Gzip(w) => w.write_all(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Sink::Plain(w) => w.flush(),
            Sink::Gzip(w) => w.flush(),
        }
    }
}

impl Sink {
    fn finish(self) -> io::Result<()> {
        let file = match self {
            Sink::Plain(w) => w.into_inner().map_err(|e| e.into_error())?,
            Sink::Gzip(w) => w.finish()?.into_inner().map_err(|e| e.into_error())?,
        };
        file.sync_all()
    }
}

/// Owns the four output files while a repository is written.
pub struct RepositoryWriter {
    layout: RepositoryLayout,
    sinks: Vec<Sink>,
    rows: [u64; 4],
    patients: u64,
    dropped_admissions: u64,
}

impl RepositoryWriter {
    pub fn create(layout: &RepositoryLayout) -> Result<Self, EmitError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EmitError::Io { path, source }
        };
        fs::create_dir_all(&layout.dir).map_err(io_err(&layout.dir))?;
        let mut writer = RepositoryWriter {
            layout: layout.clone(),
            sinks: Vec::with_capacity(4),
            rows: [0; 4],
            patients: 0,
            dropped_admissions: 0,
        };
        for file in RepoFile::ALL {
            let path = layout.path(file);
            let opened = File::create(&path).map_err(io_err(&path)).and_then(|f| {
                let buffered = BufWriter::with_capacity(1 << 20, f);
                let mut sink = if layout.gzip {
                    Sink::Gzip(GzEncoder::new(buffered, Compression::fast()))
                } else {
                    Sink::Plain(buffered)
                };
                sink.write_all(file.header().as_bytes())
                    .and_then(|_| sink.write_all(b"\n"))
                    .map_err(io_err(&path))?;
                Ok(sink)
            });
            match opened {
                Ok(sink) => writer.sinks.push(sink),
                Err(e) => {
                    writer.abort();
                    return Err(e);
                }
            }
        }
        Ok(writer)
    }

    pub fn write_rows(&mut self, rows: &RowBuffers) -> Result<(), EmitError> {
        for (i, file) in RepoFile::ALL.into_iter().enumerate() {
            self.sinks[i]
                .write_all(&rows.bytes[i])
                .map_err(|source| EmitError::Io {
                    path: self.layout.path(file),
                    source,
                })?;
            self.rows[i] = self.rows[i]
                .checked_add(rows.rows[i])
                .ok_or(EmitError::CounterOverflow(file.file_name()))?;
        }
        self.patients += rows.patients;
        self.dropped_admissions += rows.dropped_admissions;
        Ok(())
    }

    pub fn rows_written(&self) -> [u64; 4] {
        self.rows
    }

    pub fn finish(self) -> Result<EmitStats, EmitError> {
        let RepositoryWriter {
            layout,
            sinks,
            rows,
            patients,
            dropped_admissions,
        } = self;
        let mut files = Vec::with_capacity(4);
        let mut failure = None;
        for ((file, sink), rows) in RepoFile::ALL.into_iter().zip(sinks).zip(rows) {
            let path = layout.path(file);
            let result = sink
                .finish()
                .and_then(|_| fs::metadata(&path))
                .map_err(|source| EmitError::Io {
                    path: path.clone(),
                    source,
                });
            match result {
                Ok(meta) => files.push(FileStats {
                    name: layout.file_name(file),
                    rows,
                    bytes: meta.len(),
                }),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(e) = failure {
            remove_files(&layout);
            return Err(e);
        }
        Ok(EmitStats {
            files,
            patients,
            dropped_admissions,
        })
    }

    /// Closes and deletes the partially written files.
    pub fn abort(self) {
        let layout = self.layout.clone();
        drop(self);
        remove_files(&layout);
    }
}

fn remove_files(layout: &RepositoryLayout) {
    for file in RepoFile::ALL {
        let _ = fs::remove_file(layout.path(file));
    }
}

/// Writes an already generated cohort, rendering one patient at a time.
pub fn write_cohort<I>(
    layout: &RepositoryLayout,
    labs: &[LabSpec],
    cohort: I,
) -> Result<EmitStats, EmitError>
where
    I: IntoIterator<Item = Patient>,
{
    let mut writer = RepositoryWriter::create(layout)?;
    let mut rows = RowBuffers::default();
    for patient in cohort {
        rows.clear();
        let step = render_patient(&patient, labs, &mut rows).and_then(|_| writer.write_rows(&rows));
        if let Err(e) = step {
            writer.abort();
            return Err(e);
        }
    }
    writer.finish()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Progress {
    pub patients: u64,
    pub rows: u64,
}

const PATIENTS_PER_TASK: u64 = 8;
const TASKS_PER_WORKER: u64 = 4;

/// Generates and writes the whole cohort. Worker threads generate and render
/// chunks of patients; this thread writes them in index order. The channel
/// holds one chunk, so generation waits for the writer instead of buffering.
pub fn write_repository<F>(
    generator: &Generator<'_>,
    layout: &RepositoryLayout,
    workers: usize,
    mut progress: F,
) -> Result<EmitStats, EmitError>
where
    F: FnMut(Progress),
{
    let workers = workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EmitError::Pool(e.to_string()))?;
    let n = generator.params().n_patients;
    let labs = generator.labs();
    let chunk = PATIENTS_PER_TASK * TASKS_PER_WORKER * workers as u64;

    let mut writer = RepositoryWriter::create(layout)?;
    let outcome = thread::scope(|scope| {
        let (tx, rx) = sync_channel::<Result<Vec<RowBuffers>, EmitError>>(1);
        scope.spawn(move || {
            let mut start = 0;
            while start < n {
                let end = (start + chunk).min(n);
                let tasks: Vec<Range<u64>> = (start..end)
                    .step_by(PATIENTS_PER_TASK as usize)
                    .map(|s| s..(s + PATIENTS_PER_TASK).min(end))
                    .collect();
                let rendered = pool.install(|| {
                    tasks
                        .into_par_iter()
                        .map(|range| {
                            let mut rows = RowBuffers::default();
                            for i in range {
                                render_patient(&generator.generate_patient(i), labs, &mut rows)?;
                            }
                            Ok(rows)
                        })
                        .collect::<Result<Vec<_>, EmitError>>()
                });
                let failed = rendered.is_err();
                if tx.send(rendered).is_err() || failed {
                    return;
                }
                start = end;
            }
        });
        let mut written = Progress::default();
        for message in rx {
            for rows in message? {
                writer.write_rows(&rows)?;
                written.patients += rows.patients;
                written.rows += rows.rows.iter().sum::<u64>();
            }
            progress(written);
        }
        Ok(())
    });
    match outcome {
        Ok(()) => writer.finish(),
        Err(e) => {
            writer.abort();
            Err(e)
        }
    }
}
