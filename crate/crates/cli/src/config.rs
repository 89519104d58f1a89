use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use hja::evaluation::ProtocolConfig;
use hja::selection::{SelectionMethod, DEFAULT_FOLDS};
use hja::simulation::{Method, StudyConfig, StudyGrid};
use hja::solver::SolverConfig;
use hja::InputFormat;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "hja", version, about = "Judge-aware ranking from multi-judge pairwise comparisons")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model and report estimates, intervals and diagnostics as JSON.
    Fit(FitArgs),
    /// Decompose a judge-by-item score matrix into canonical parameters.
    Decompose(DecomposeArgs),
    /// Run a synthetic recovery study and write a summary CSV.
    Simulate(SimulateArgs),
    /// Choose the heterogeneity rank by BIC or cross-validation.
    SelectRank(SelectArgs),
    /// Run the hold-out, noisy-judge and near-tie protocols on a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Omit the timestamp so identical runs give identical bytes.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Args, Debug, Default)]
pub struct SolverArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Fit even when some judge's comparison graph is disconnected.
    #[arg(long)]
    pub allow_disconnected: bool,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// csv or jsonl; guessed from the file extension when omitted.
    #[arg(long)]
    pub format: Option<InputFormat>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Heterogeneity rank, or `auto` to select it.
    #[arg(long)]
    pub rank: Option<RankArg>,
    #[arg(long)]
    pub rank_method: Option<SelectionMethod>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Comma-separated targets, e.g. `consensus_contrasts,gamma(0)`.
    #[arg(long)]
    pub targets: Option<String>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    /// Score matrix CSV: header of item labels, one row per judge.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<RankArg>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// `n_cmp=400,800,...` or `h=0,0.5,...`.
    #[arg(long)]
    pub grid: Option<GridArg>,
    /// Number of replicates per grid point.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comparison budget for a heterogeneity grid.
    #[arg(long)]
    pub n_cmp: Option<u64>,
    /// Heterogeneity scale for a budget grid.
    #[arg(long)]
    pub het_scale: Option<f64>,
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub n_judges: Option<usize>,
    /// Rank of the data-generating heterogeneity.
    #[arg(long)]
    pub true_rank: Option<usize>,
    /// Rank used by the HJA and truncated-SVD fits.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Comma-separated subset of hja, pooled_btl, sensitivity_only, btl_svd.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub rank_method: Option<SelectionMethod>,
    /// Largest candidate rank.
    #[arg(long)]
    pub r_max: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Dataset name in the output table; defaults to the input file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Number of random splits and noise draws.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated subset of hja, ja, btl.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub r_max: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankArg {
    #[default]
    Auto,
    Fixed(usize),
}

impl FromStr for RankArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(RankArg::Auto);
        }
        s.parse().map(RankArg::Fixed).map_err(|_| format!("expected an integer or `auto`, got {s:?}"))
    }
}

impl fmt::Display for RankArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankArg::Auto => write!(f, "auto"),
            RankArg::Fixed(r) => write!(f, "{r}"),
        }
    }
}

impl Serialize for RankArg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RankArg::Auto => s.serialize_str("auto"),
            RankArg::Fixed(r) => s.serialize_u64(*r as u64),
        }
    }
}

impl<'de> Deserialize<'de> for RankArg {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(r) => Ok(RankArg::Fixed(r)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridArg(pub StudyGrid);

impl FromStr for GridArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (key, values) = s.split_once('=').ok_or_else(|| format!("grid {s:?} must look like n_cmp=400,800"))?;
        let parts: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if parts.is_empty() {
            return Err("grid has no values".into());
        }
        match key.trim() {
            "n_cmp" => parts
                .iter()
                .map(|v| v.parse::<u64>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad comparison budget {v:?}")))
                .collect::<Result<Vec<_>, _>>()
                .map(|v| GridArg(StudyGrid::NCmp(v))),
            "h" => parts
                .iter()
                .map(|v| v.parse::<f64>().ok().filter(|h| *h >= 0.0 && h.is_finite()).ok_or_else(|| format!("bad scale {v:?}")))
                .collect::<Result<Vec<_>, _>>()
                .map(|values| GridArg(StudyGrid::HetScale { values, n_cmp: 800 })),
            other => Err(format!("unknown grid variable {other:?}; expected n_cmp or h")),
        }
    }
}

/// Everything needed to reproduce a run. Written into every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<PathBuf>,
    pub format: Option<InputFormat>,
    pub rank: RankArg,
    pub rank_method: SelectionMethod,
    pub r_max: Option<usize>,
    pub folds: usize,
    pub level: f64,
    pub targets: Vec<String>,
    pub solver: SolverConfig,
    pub study: StudyConfig,
    pub protocol: ProtocolConfig,
    pub dataset: Option<String>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            input: None,
            format: None,
            rank: RankArg::Auto,
            rank_method: SelectionMethod::Bic,
            r_max: None,
            folds: DEFAULT_FOLDS,
            level: 0.95,
            targets: vec!["consensus_contrasts".into()],
            solver: SolverConfig::default(),
            study: StudyConfig::default(),
            protocol: ProtocolConfig::default(),
            dataset: None,
            out: None,
            threads: None,
            deterministic: false,
        }
    }
}

fn load_base(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let Some(path) = &common.config else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn apply_common(cfg: &mut RunConfig, common: &CommonArgs) {
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.solver.seed = seed;
        cfg.study.seed = seed;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    cfg.deterministic |= common.deterministic;
}

fn apply_solver(cfg: &mut RunConfig, s: &SolverArgs) {
    if let Some(tau) = s.tau {
        cfg.solver.tau = tau;
    }
    if let Some(tol) = s.tol {
        cfg.solver.tol = tol;
    }
    if let Some(m) = s.max_iters {
        cfg.solver.max_iters = m;
    }
    cfg.solver.allow_disconnected |= s.allow_disconnected;
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if d.input.is_some() {
        cfg.input = d.input.clone();
    }
    if d.format.is_some() {
        cfg.format = d.format;
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

/// Split a target list on commas that are not inside parentheses.
pub fn split_targets(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur);
    out.into_iter().map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Decompose(_) => "decompose",
            Command::Simulate(_) => "simulate",
            Command::SelectRank(_) => "select-rank",
            Command::Evaluate(_) => "evaluate",
        }
    }

    /// Resolve the run configuration: config file first, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match self {
            Command::Fit(a) => {
                let mut cfg = load_base(&a.common)?;
                apply_common(&mut cfg, &a.common);
                apply_solver(&mut cfg, &a.solver);
                apply_data(&mut cfg, &a.data);
                if let Some(r) = a.rank {
                    cfg.rank = r;
                }
                if let Some(m) = a.rank_method {
                    cfg.rank_method = m;
                }
                if let Some(l) = a.level {
                    cfg.level = l;
                }
                if let Some(t) = &a.targets {
                    cfg.targets = split_targets(t);
                }
                cfg
            }
            Command::Decompose(a) => {
                let mut cfg = load_base(&a.common)?;
                apply_common(&mut cfg, &a.common);
                if a.input.is_some() {
                    cfg.input = a.input.clone();
                }
                if let Some(r) = a.rank {
                    cfg.rank = r;
                }
                cfg
            }
            Command::Simulate(a) => {
                let mut cfg = load_base(&a.common)?;
                apply_common(&mut cfg, &a.common);
                apply_solver(&mut cfg, &a.solver);
                let study = &mut cfg.study;
                if let Some(GridArg(g)) = &a.grid {
                    study.grid = g.clone();
                }
                if let (Some(n), StudyGrid::HetScale { n_cmp, .. }) = (a.n_cmp, &mut study.grid) {
                    *n_cmp = n;
                }
                if let Some(n) = a.seeds {
                    study.n_seeds = n;
                }
                if let Some(h) = a.het_scale {
                    study.truth.het_scale = h;
                }
                if let Some(n) = a.n_items {
                    study.truth.n_items = n;
                }
                if let Some(k) = a.n_judges {
                    study.truth.n_judges = k;
                }
                if let Some(r) = a.true_rank {
                    study.truth.rank = r;
                }
                if let Some(r) = a.rank {
                    study.fit_rank = r;
                }
                if let Some(m) = &a.methods {
                    study.methods = parse_list(m)?;
                }
                if let Some(l) = a.level {
                    study.level = l;
                }
                cfg
            }
            Command::SelectRank(a) => {
                let mut cfg = load_base(&a.common)?;
                apply_common(&mut cfg, &a.common);
                apply_solver(&mut cfg, &a.solver);
                apply_data(&mut cfg, &a.data);
                if let Some(m) = a.rank_method {
                    cfg.rank_method = m;
                }
                if a.r_max.is_some() {
                    cfg.r_max = a.r_max;
                }
                if let Some(f) = a.folds {
                    cfg.folds = f;
                }
                cfg
            }
            Command::Evaluate(a) => {
                let mut cfg = load_base(&a.common)?;
                apply_common(&mut cfg, &a.common);
                apply_solver(&mut cfg, &a.solver);
                apply_data(&mut cfg, &a.data);
                let p = &mut cfg.protocol;
                if let Some(n) = a.seeds {
                    let start = a.common.seed.unwrap_or(0);
                    p.seeds = (start..start + n as u64).collect();
                } else if let Some(start) = a.common.seed {
                    let n = p.seeds.len() as u64;
                    p.seeds = (start..start + n).collect();
                }
                if let Some(m) = &a.methods {
                    p.methods = parse_list::<Method>(m)?;
                }
                if a.r_max.is_some() {
                    p.r_max = a.r_max;
                }
                if let Some(f) = a.folds {
                    p.cv_folds = f;
                }
                if let Some(t) = a.test_fraction {
                    p.test_fraction = t;
                }
                if a.dataset.is_some() {
                    cfg.dataset = a.dataset.clone();
                }
                cfg
            }
        };
        cfg.command = self.name().to_string();
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_split_outside_parentheses() {
        assert_eq!(split_targets("gamma(0), judge_contrast(1,2,3),leverage"), vec!["gamma(0)", "judge_contrast(1,2,3)", "leverage"]);
    }

    #[test]
    fn rank_round_trips() {
        for r in [RankArg::Auto, RankArg::Fixed(3)] {
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(serde_json::from_str::<RankArg>(&json).unwrap(), r);
        }
    }

    #[test]
    fn grid_parsing() {
        assert_eq!("n_cmp=400,800".parse::<GridArg>().unwrap().0, StudyGrid::NCmp(vec![400, 800]));
        assert!("h=-1".parse::<GridArg>().is_err());
        assert!("x=1".parse::<GridArg>().is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig { rank: RankArg::Fixed(2), ..RunConfig::default() };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
