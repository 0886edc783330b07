//! Dataset ingestion, synthetic problem generation and report output.

pub mod g2o;
pub mod report;
pub mod synthetic;

pub use g2o::{parse_dataset, parse_str, write_g2o, Dataset, DatasetRecord};
pub use report::{read_report, write_report, InitMethod, Provenance, ReportDocument};
pub use synthetic::{generate_synthetic, NoiseSpec, SyntheticConfig, SyntheticProblem, Topology};
