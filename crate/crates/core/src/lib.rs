//! Two-parameter PGM learned index ("PGM++"): optimal ε-PLA fitting, a
//! bottom-up leveled index with hybrid error-bounded search and layer
//! skipping, gap-distribution analytics, calibrated space/time cost models
//! and an automatic `(eps_internal, eps_leaf)` tuner.

pub mod cost;
pub mod data;
pub mod error;
pub mod harness;
pub mod index;
pub mod oracle;
pub mod pla;
pub mod search;
pub mod stats;
pub mod timing;

pub use error::{Error, Result};
pub use pla::{eval_segment, fit_epsilon_pla, fit_keys, PlaModel, Point, Segment};
pub use index::{BuildParams, IndexStats, Level, PgmIndex};
pub use stats::{
    btree_height, expected_coverage, gap_statistics, hardness_ratio, partition_gaps,
    CalibrationConfig, Coverage, Estimator, EstimatorKind, GapPartition, GapStats,
};
pub use data::{generate_synthetic, generate_workload, read_keyset, write_keyset, Distribution, KeySet, Workload, WorkloadKind};
pub use cost::{CostConstants, TuningBudget, TuningResult};
pub use harness::{LookupTiming, RunReport, Strategy};
