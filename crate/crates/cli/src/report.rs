use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use hja::data::{DropStats, GraphReport};
use hja::decomposition::{ConstraintReport, DecomposeWarning, ParamsExport};
use hja::inference::{Interval, LeverageRow};
use hja::linalg::MatrixExport;
use hja::selection::RankSelection;
use hja::IdMap;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Header {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    pub config: RunConfig,
}

impl Header {
    pub fn new(config: &RunConfig) -> Self {
        let timestamp = (!config.deterministic)
            .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
        Self { schema_version: SCHEMA_VERSION, timestamp, config: config.clone() }
    }
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub header: Header,
    pub id_map: IdMap,
    pub drop_stats: DropStats,
    pub rank_selection: Option<RankSelection>,
    pub params: ParamsExport,
    pub constraints: ConstraintReport,
    pub converged: bool,
    pub iterations: usize,
    pub guard_failures: usize,
    pub final_nll: f64,
    pub nll_trace: Vec<f64>,
    pub warnings: Vec<String>,
    pub intervals: Vec<Interval>,
    pub leverage: Vec<LeverageRow>,
    pub uvt: MatrixExport,
    pub graph_report: GraphReport,
}

#[derive(Debug, Serialize)]
pub struct DecomposeReport {
    #[serde(flatten)]
    pub header: Header,
    pub id_map: IdMap,
    pub params: ParamsExport,
    pub constraints: ConstraintReport,
    pub singular_values: Vec<f64>,
    pub warnings: Vec<DecomposeWarning>,
}

#[derive(Debug, Serialize)]
pub struct SelectionReport {
    #[serde(flatten)]
    pub header: Header,
    pub id_map: IdMap,
    pub drop_stats: DropStats,
    pub graph_report: GraphReport,
    #[serde(flatten)]
    pub selection: RankSelection,
}

pub fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(format!("cannot encode report: {e}")))?;
    text.push('\n');
    write_bytes(text.as_bytes(), out)
}

pub fn write_bytes(bytes: &[u8], out: Option<&Path>) -> Result<(), CliError> {
    let result = match out {
        Some(path) => std::fs::write(path, bytes),
        None => std::io::stdout().lock().write_all(bytes),
    };
    result.map_err(|e| CliError::Core(e.into()))
}
