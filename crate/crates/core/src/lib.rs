//! Deterministic generator of virtual patient repositories.
//!
//! Configuration tables ([`config`]) drive a per-patient random stream
//! ([`rng`]) through the record builder ([`patientgen`]); patients are
//! written as four tab-delimited files ([`emit`]) and can be summarised and
//! checked against analytic expectations ([`cohortstats`]).

pub mod cohortstats;
pub mod config;
pub mod emit;
pub mod patientgen;
pub mod rng;

pub use cohortstats::{
    compare, expected_from_config, prevalence_expected, summarize, CohortSummary, DeviationReport,
    ExpectedSummary, ToleranceProfile,
};
pub use config::{ConfigError, ConfigSources, Configs, GenerationParams, ValidationReport};
pub use emit::{write_cohort, write_repository, EmitStats, RepoFile, RepositoryLayout};
pub use patientgen::{Generator, Patient};
pub use rng::{stream_for_patient, RngStream};
