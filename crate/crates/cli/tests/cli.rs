use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use vpgen_core::config::ConfigSources;

fn vpgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpgen"))
        .args(args)
        .output()
        .expect("spawn vpgen")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn digests(dir: &Path) -> Vec<String> {
    [
        "patients.txt",
        "admissions.txt",
        "diagnoses.txt",
        "labs.txt",
    ]
    .iter()
    .map(|f| hex::encode(Sha256::digest(fs::read(dir.join(f)).unwrap())))
    .collect()
}

fn default_config_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ConfigSources::defaults().write_dir(dir.path()).unwrap();
    dir
}

#[test]
fn small_preset_writes_one_hundred_patients() {
    let cfg = default_config_dir();
    let out = tempfile::tempdir().unwrap();
    let run1 = out.path().join("run1");
    let result = vpgen(&[
        "generate",
        "--config",
        cfg.path().to_str().unwrap(),
        "--size",
        "small",
        "--seed",
        "42",
        "--out",
        run1.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&result),
        0,
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    let text = stdout(&result);
    assert!(
        text.lines()
            .next()
            .unwrap()
            .starts_with("patients.txt: 100 rows, "),
        "{text}"
    );
    let patients = fs::read_to_string(run1.join("patients.txt")).unwrap();
    assert_eq!(patients.lines().count(), 101);

    let manifest = fs::read_to_string(run1.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=42\n"));
    assert!(manifest.contains("n_patients=100\n"));
    assert!(manifest.contains("param.master_seed=42\n"));
    assert!(manifest.contains("rows.patients.txt=100\n"));
    let digest = hex::encode(Sha256::digest(ConfigSources::defaults().labs.as_bytes()));
    assert!(manifest.contains(&format!("config_sha256.labs.csv={digest}\n")));

    let run2 = out.path().join("run2");
    let again = vpgen(&[
        "generate",
        "--size",
        "small",
        "--seed",
        "42",
        "--out",
        run2.to_str().unwrap(),
    ]);
    assert_eq!(code(&again), 0);
    assert_eq!(digests(&run1), digests(&run2));
}

#[test]
fn n_overrides_size_and_seed_changes_output() {
    let out = tempfile::tempdir().unwrap();
    let a = out.path().join("a");
    let b = out.path().join("b");
    let run = |dir: &Path, seed: &str| {
        vpgen(&[
            "generate",
            "--size",
            "large",
            "--n",
            "7",
            "--seed",
            seed,
            "--out",
            dir.to_str().unwrap(),
        ])
    };
    assert_eq!(code(&run(&a, "1")), 0);
    assert_eq!(code(&run(&b, "2")), 0);
    assert_eq!(
        fs::read_to_string(a.join("patients.txt"))
            .unwrap()
            .lines()
            .count(),
        8
    );
    assert_ne!(digests(&a), digests(&b));
}

#[test]
fn gzip_flag_writes_compressed_files() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("gz");
    let result = vpgen(&[
        "generate",
        "--n",
        "5",
        "--seed",
        "3",
        "--gzip",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&result), 0);
    assert!(dir.join("labs.txt.gz").exists());
    assert!(!dir.join("labs.txt").exists());
    let stats = vpgen(&["stats", dir.to_str().unwrap()]);
    assert_eq!(code(&stats), 0);
    assert!(stdout(&stats).contains("Patients (n = 5)"));
}

#[test]
fn flag_misuse_exits_four() {
    assert_eq!(
        code(&vpgen(&["generate", "--n", "5", "--out", "/tmp/never"])),
        4
    );
    assert_eq!(
        code(&vpgen(&["generate", "--seed", "x", "--out", "/tmp/never"])),
        4
    );
    assert_eq!(
        code(&vpgen(&[
            "generate",
            "--seed",
            "1",
            "--size",
            "huge",
            "--out",
            "/tmp/never"
        ])),
        4
    );
    assert_eq!(
        code(&vpgen(&[
            "generate",
            "--seed",
            "1",
            "--workers",
            "0",
            "--out",
            "/tmp/never"
        ])),
        4
    );
    assert_eq!(code(&vpgen(&["frobnicate"])), 4);
    assert_eq!(code(&vpgen(&[])), 4);
    assert_eq!(code(&vpgen(&["--help"])), 0);
    assert_eq!(code(&vpgen(&["--version"])), 0);
}

#[test]
fn check_reports_configuration_problems() {
    let ok = vpgen(&["check"]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("0 error(s)"));

    let cfg = default_config_dir();
    assert_eq!(
        code(&vpgen(&["check", "--config", cfg.path().to_str().unwrap()])),
        0
    );

    let population = cfg.path().join("population.csv");
    let text = fs::read_to_string(&population).unwrap();
    let line = text
        .lines()
        .find(|l| l.starts_with("Gender,"))
        .unwrap()
        .to_string();
    let mut fields: Vec<String> = line.split(',').map(String::from).collect();
    let weight: f64 = fields[2].parse().unwrap();
    fields[2] = (weight - 1.0).to_string();
    fs::write(&population, text.replacen(&line, &fields.join(","), 1)).unwrap();
    let bad = vpgen(&["check", "--config", cfg.path().to_str().unwrap()]);
    assert_eq!(code(&bad), 2);
    assert!(stdout(&bad).contains("sum to 99"), "{}", stdout(&bad));

    let out = tempfile::tempdir().unwrap();
    let gen = vpgen(&[
        "generate",
        "--config",
        cfg.path().to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&gen), 2);

    fs::remove_file(cfg.path().join("labs.csv")).unwrap();
    assert_eq!(
        code(&vpgen(&["check", "--config", cfg.path().to_str().unwrap()])),
        3
    );
}

#[test]
fn unwritable_output_exits_three() {
    let out = tempfile::tempdir().unwrap();
    let file = out.path().join("plain-file");
    fs::write(&file, "").unwrap();
    let result = vpgen(&[
        "generate",
        "--n",
        "2",
        "--seed",
        "1",
        "--out",
        file.to_str().unwrap(),
    ]);
    assert_eq!(code(&result), 3);
}

fn write_headers(dir: &Path) {
    fs::write(
        dir.join("patients.txt"),
        "PatientID\tPatientGender\tPatientDateOfBirth\tPatientRace\tPatientMaritalStatus\tPatientLanguage\tPatientPopulationPercentageBelowPoverty\n",
    )
    .unwrap();
    fs::write(
        dir.join("admissions.txt"),
        "PatientID\tAdmissionID\tAdmissionStartDate\tAdmissionEndDate\n",
    )
    .unwrap();
    fs::write(
        dir.join("diagnoses.txt"),
        "PatientID\tAdmissionID\tPrimaryDiagnosisCode\tPrimaryDiagnosisDescription\n",
    )
    .unwrap();
    fs::write(
        dir.join("labs.txt"),
        "PatientID\tAdmissionID\tLabName\tLabValue\tLabUnits\tLabDateTime\n",
    )
    .unwrap();
}

#[test]
fn stats_on_headers_only_is_an_empty_summary() {
    let repo = tempfile::tempdir().unwrap();
    write_headers(repo.path());
    let result = vpgen(&["stats", repo.path().to_str().unwrap()]);
    assert_eq!(
        code(&result),
        0,
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    assert!(stdout(&result).contains("Patients (n = 0)"));
    let tsv = fs::read_to_string(repo.path().join("summary.tsv")).unwrap();
    assert!(tsv.starts_with("statistic\tobserved\texpected\tpass\nn_patients\t0\t"));
    assert!(repo.path().join("report.txt").exists());
}

#[test]
fn corrupted_lab_value_exits_two() {
    let repo = tempfile::tempdir().unwrap();
    let dir = repo.path().join("r");
    assert_eq!(
        code(&vpgen(&[
            "generate",
            "--n",
            "3",
            "--seed",
            "8",
            "--out",
            dir.to_str().unwrap()
        ])),
        0
    );
    let labs = dir.join("labs.txt");
    let text = fs::read_to_string(&labs).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<String> = lines[5].split('\t').map(String::from).collect();
    fields[3] = "100000".into();
    lines[5] = fields.join("\t");
    fs::write(&labs, lines.join("\n") + "\n").unwrap();
    let result = vpgen(&["stats", dir.to_str().unwrap()]);
    assert_eq!(code(&result), 2);
    let err = String::from_utf8_lossy(&result.stderr);
    assert!(err.contains("labs.txt:6"), "{err}");
}

#[test]
fn stats_on_missing_repository_exits_three() {
    let repo = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&vpgen(&[
            "stats",
            repo.path().join("none").to_str().unwrap()
        ])),
        3
    );
    write_headers(repo.path());
    fs::remove_file(repo.path().join("labs.txt")).unwrap();
    assert_eq!(code(&vpgen(&["stats", repo.path().to_str().unwrap()])), 3);
}

fn expected_value(text: &str, name: &str) -> f64 {
    text.lines()
        .find_map(|l| {
            let mut f = l.split('\t');
            (f.next() == Some(name)).then(|| f.next().unwrap().parse().unwrap())
        })
        .unwrap_or_else(|| panic!("{name} missing"))
}

#[test]
fn expect_prints_analytic_statistics() {
    let result = vpgen(&["expect"]);
    assert_eq!(code(&result), 0);
    let text = stdout(&result);
    assert!((expected_value(&text, "lab_mean[Blood urea nitrogen]") - 17.5).abs() < 1e-9);
    assert!((expected_value(&text, "lab_sd[Blood urea nitrogen]") - 7.22).abs() < 0.005);
    assert!((expected_value(&text, "age_mean") - 57.3).abs() < 0.05);
    assert!((expected_value(&text, "age_sd") - 17.26).abs() < 0.01);

    let large = stdout(&vpgen(&["expect", "--n", "100000"]));
    let labs = expected_value(&large, "total_lab_rows");
    assert!((labs / 1.076e8 - 1.0).abs() < 0.005, "{labs}");
    assert_eq!(expected_value(&large, "n_patients"), 100000.0);

    let cfg = default_config_dir();
    fs::write(
        cfg.path().join("params.cfg"),
        "los_days_min=5\nlos_days_max=2\n",
    )
    .unwrap();
    assert_eq!(
        code(&vpgen(&[
            "expect",
            "--config",
            cfg.path().to_str().unwrap()
        ])),
        2
    );
}
