use std::fs;
use std::path::Path;

use vpgen_core::cohortstats::{
    compare, expected_from_config, summarize, StatsError, ToleranceProfile,
};
use vpgen_core::emit::{write_repository, RepoFile, RepositoryLayout};
use vpgen_core::{Configs, Generator};

const ID: &str = "0a1b2c3d-0000-4000-8000-00000000000a";

fn write_files(dir: &Path, rows: [&str; 4]) -> RepositoryLayout {
    let layout = RepositoryLayout::new(dir);
    for (file, body) in RepoFile::ALL.into_iter().zip(rows) {
        fs::write(layout.path(file), format!("{}\n{body}", file.header())).unwrap();
    }
    layout
}

fn one_patient(dir: &Path, lab_row: &str) -> RepositoryLayout {
    write_files(
        dir,
        [
            &format!("{ID}\tFemale\t1950-06-01 00:00:00\tWhite\tMarried\tEnglish\t12.50\n"),
            &format!("{ID}\t1\t2000-01-01 08:00:00\t2000-01-04 08:00:00\n"),
            &format!("{ID}\t1\tE11.9\tType 2 diabetes mellitus without complications\n"),
            lab_row,
        ],
    )
}

fn defaults() -> Configs {
    Configs::defaults()
}

#[test]
fn single_values_have_zero_sd() {
    let dir = tempfile::tempdir().unwrap();
    let layout = one_patient(
        dir.path(),
        &format!("{ID}\t1\tSodium\t141\tmmol/L\t2000-01-02 10:00:00\n"),
    );
    let configs = defaults();
    let s = summarize(&layout, &configs, configs.params.cutoff_date).unwrap();
    assert_eq!(s.n_patients, 1);
    assert_eq!(s.total_admissions, 1);
    assert_eq!(s.total_lab_rows, 1);
    assert_eq!(s.poverty.mean, 12.5);
    assert_eq!(s.poverty.sd, 0.0);
    assert_eq!(s.los_days.mean, 3.0);
    assert_eq!(s.los_days.sd, 0.0);
    assert_eq!(s.admissions_per_patient.mean, 1.0);
    let sodium = s.lab("Sodium").unwrap();
    assert_eq!((sodium.count, sodium.mean, sodium.sd), (1, 141.0, 0.0));
    assert_eq!(s.lab("Albumin").unwrap().count, 0);
    assert_eq!(s.share("Gender", "Female"), Some(100.0));
    assert_eq!(s.prevalence("Diabetes"), Some(100.0));
    assert_eq!(s.prevalence("Malignant neoplasm"), Some(0.0));
    assert_eq!(s.follow_up_pct, [100.0, 0.0, 0.0]);
}

#[test]
fn empty_repository_summarises_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let layout = write_files(dir.path(), ["", "", "", ""]);
    let configs = defaults();
    let s = summarize(&layout, &configs, configs.params.cutoff_date).unwrap();
    assert_eq!(s.n_patients, 0);
    assert_eq!(s.statistics().len(), 3);
    let mut empty = configs.clone();
    empty.params.n_patients = 0;
    let report = compare(
        &s,
        &expected_from_config(&empty, empty.params.cutoff_date),
        &ToleranceProfile::default(),
    )
    .unwrap();
    assert!(report.pass);
}

fn integrity_line(result: Result<impl std::fmt::Debug, StatsError>) -> (String, u64) {
    match result {
        Err(StatsError::Integrity { file, line, .. }) => (file, line),
        other => panic!("expected an integrity error, got {other:?}"),
    }
}

#[test]
fn out_of_range_lab_names_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let layout = one_patient(
        dir.path(),
        &format!(
            "{ID}\t1\tSodium\t141\tmmol/L\t2000-01-02 10:00:00\n{ID}\t1\tSodium\t180\tmmol/L\t2000-01-02 11:00:00\n"
        ),
    );
    let configs = defaults();
    let at = integrity_line(summarize(&layout, &configs, configs.params.cutoff_date));
    assert_eq!(at, ("labs.txt".to_string(), 3));
}

#[test]
fn lab_outside_its_admission_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let layout = one_patient(
        dir.path(),
        &format!("{ID}\t1\tSodium\t141\tmmol/L\t2000-01-05 10:00:00\n"),
    );
    let configs = defaults();
    integrity_line(summarize(&layout, &configs, configs.params.cutoff_date));
}

#[test]
fn dangling_references_are_rejected() {
    let other = "ffffffff-0000-4000-8000-00000000000a";
    let dir = tempfile::tempdir().unwrap();
    let layout = one_patient(
        dir.path(),
        &format!("{ID}\t2\tSodium\t141\tmmol/L\t2000-01-02 10:00:00\n"),
    );
    let configs = defaults();
    integrity_line(summarize(&layout, &configs, configs.params.cutoff_date));

    let layout = write_files(
        dir.path(),
        [
            &format!("{ID}\tFemale\t1950-06-01 00:00:00\tWhite\tMarried\tEnglish\t12.50\n"),
            &format!("{other}\t1\t2000-01-01 08:00:00\t2000-01-04 08:00:00\n"),
            "",
            "",
        ],
    );
    assert_eq!(
        integrity_line(summarize(&layout, &configs, configs.params.cutoff_date)),
        ("admissions.txt".to_string(), 2)
    );
}

#[test]
fn diagnoses_must_be_one_per_admission() {
    let dir = tempfile::tempdir().unwrap();
    let patient = format!("{ID}\tFemale\t1950-06-01 00:00:00\tWhite\tMarried\tEnglish\t12.50\n");
    let admission = format!("{ID}\t1\t2000-01-01 08:00:00\t2000-01-04 08:00:00\n");
    let diagnosis = format!("{ID}\t1\tE11.9\tType 2 diabetes\n");
    let configs = defaults();

    let twice = format!("{diagnosis}{diagnosis}");
    let layout = write_files(dir.path(), [&patient, &admission, &twice, ""]);
    assert_eq!(
        integrity_line(summarize(&layout, &configs, configs.params.cutoff_date)),
        ("diagnoses.txt".to_string(), 3)
    );

    let layout = write_files(dir.path(), [&patient, &admission, "", ""]);
    integrity_line(summarize(&layout, &configs, configs.params.cutoff_date));
}

#[test]
fn malformed_rows_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let layout = one_patient(dir.path(), &format!("{ID}\t1\tSodium\t141\n"));
    let configs = defaults();
    match summarize(&layout, &configs, configs.params.cutoff_date) {
        Err(StatsError::Malformed { file, line, .. }) => {
            assert_eq!((file.as_str(), line), ("labs.txt", 2))
        }
        other => panic!("{other:?}"),
    }

    fs::write(layout.path(RepoFile::Admissions), "wrong header\n").unwrap();
    match summarize(&layout, &configs, configs.params.cutoff_date) {
        Err(StatsError::Malformed { file, line, .. }) => {
            assert_eq!((file.as_str(), line), ("admissions.txt", 1))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let layout = one_patient(dir.path(), "");
    fs::remove_file(layout.path(RepoFile::Labs)).unwrap();
    let configs = defaults();
    assert!(matches!(
        summarize(&layout, &configs, configs.params.cutoff_date),
        Err(StatsError::Io { .. })
    ));
}

#[test]
fn gzip_and_plain_repositories_summarise_identically() {
    let mut configs = defaults();
    configs.params.n_patients = 40;
    configs.params.master_seed = 11;
    let generator = Generator::new(&configs).unwrap();
    let plain_dir = tempfile::tempdir().unwrap();
    let gz_dir = tempfile::tempdir().unwrap();
    let plain = RepositoryLayout::new(plain_dir.path());
    let gz = RepositoryLayout::gzipped(gz_dir.path());
    let a = write_repository(&generator, &plain, 2, |_| {}).unwrap();
    let b = write_repository(&generator, &gz, 3, |_| {}).unwrap();
    for file in RepoFile::ALL {
        assert_eq!(a.rows(file), b.rows(file));
    }
    assert_eq!(RepositoryLayout::detect(gz_dir.path()), gz);
    let cutoff = configs.params.cutoff_date;
    assert_eq!(
        summarize(&plain, &configs, cutoff).unwrap(),
        summarize(&gz, &configs, cutoff).unwrap()
    );
}

#[test]
fn honest_small_cohort_passes_its_expectations() {
    let mut configs = defaults();
    configs.params.n_patients = 300;
    configs.params.master_seed = 5;
    let generator = Generator::new(&configs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let layout = RepositoryLayout::new(dir.path());
    write_repository(&generator, &layout, 1, |_| {}).unwrap();
    let cutoff = configs.params.cutoff_date;
    let observed = summarize(&layout, &configs, cutoff).unwrap();
    let expected = expected_from_config(&configs, cutoff);
    let report = compare(&observed, &expected, &ToleranceProfile::default()).unwrap();
    assert!(report.pass, "{report}");

    // Shifting one lab mean by ten SDs fails that statistic alone.
    let mut shifted = observed.clone();
    let bun = shifted
        .labs
        .iter_mut()
        .find(|l| l.title == "Blood urea nitrogen")
        .unwrap();
    bun.mean += 10.0 * bun.sd;
    let report = compare(&shifted, &expected, &ToleranceProfile::default()).unwrap();
    assert!(!report.pass);
    let failed: Vec<&str> = report.failures().map(|d| d.name.as_str()).collect();
    assert_eq!(failed, ["lab_mean[Blood urea nitrogen]"]);
}

#[test]
fn partitions_sum_to_one_hundred() {
    let mut configs = defaults();
    configs.params.n_patients = 250;
    let generator = Generator::new(&configs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let layout = RepositoryLayout::new(dir.path());
    write_repository(&generator, &layout, 1, |_| {}).unwrap();
    let s = summarize(&layout, &configs, configs.params.cutoff_date).unwrap();
    for cat in &s.demographics {
        let total: f64 = cat.levels.iter().map(|l| l.pct).sum();
        assert!((total - 100.0).abs() <= 0.1, "{}: {total}", cat.variable);
    }
    assert!((s.follow_up_pct.iter().sum::<f64>() - 100.0).abs() <= 0.1);
}

#[test]
fn mismatched_statistic_sets_are_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let layout = one_patient(dir.path(), "");
    let configs = defaults();
    let observed = summarize(&layout, &configs, configs.params.cutoff_date).unwrap();
    let mut fewer_labs = configs.clone();
    fewer_labs.labs.pop();
    let expected = expected_from_config(&fewer_labs, configs.params.cutoff_date);
    assert!(matches!(
        compare(&observed, &expected, &ToleranceProfile::default()),
        Err(StatsError::Mismatch(_))
    ));
}
