use std::fs::File;
use std::path::Path;

use hja::data::{check_connectivity, parse_records, DropStats};
use hja::decomposition::{check_constraints, check_rank, max_rank, DEFAULT_CONSTRAINT_TOL};
use hja::evaluation::{evaluate_dataset, write_protocol_csv};
use hja::inference::{leverage_diagnostics, InferenceEngine, Interval, TargetSpec, LEVERAGE_SMOOTH_MIN};
use hja::linalg::MatrixExport;
use hja::selection::{select_rank, SelectionInput, SelectionOptions};
use hja::simulation::{run_recovery_study, write_study_csv};
use hja::solver::fit;
use hja::{aggregate, decompose, ComparisonRecord, HjaError, HjaParams, IdMap, InputFormat, RankChoice, ScoreMatrix};
use nalgebra::DMatrix;

use crate::config::{Command, RankArg, RunConfig};
use crate::report::{write_bytes, write_json, DecomposeReport, FitReport, Header, SelectionReport};
use crate::CliError;

pub fn dispatch(command: Command) -> Result<(), CliError> {
    let cfg = command.resolve()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    if cfg.solver.allow_disconnected {
        log::warn!(
            "--allow-disconnected: judges with disconnected comparison graphs are fitted through the pooled graph; \
             sampling is partial and interval guarantees are weaker"
        );
    }
    match command {
        Command::Fit(_) => run_fit(&cfg),
        Command::Decompose(_) => run_decompose(&cfg),
        Command::Simulate(_) => run_simulate(&cfg),
        Command::SelectRank(_) => run_select(&cfg),
        Command::Evaluate(_) => run_evaluate(&cfg),
    }
}

fn input_path(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.input.as_deref().ok_or_else(|| CliError::Usage(format!("{} needs --input", cfg.command)))
}

fn read_records(cfg: &RunConfig) -> Result<(Vec<ComparisonRecord>, DropStats), CliError> {
    let path = input_path(cfg)?;
    let format = cfg.format.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") | Some("ndjson") => InputFormat::Jsonl,
        _ => InputFormat::Csv,
    });
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let (records, stats) = parse_records(file, format)?;
    if stats.total() > 0 {
        log::warn!("skipped {} rows with unknown outcomes and {} malformed rows", stats.dropped, stats.malformed);
    }
    if records.is_empty() {
        return Err(HjaError::Validation("input contains no usable comparison records".into()).into());
    }
    Ok((records, stats))
}

fn lookup(label: &str, n: usize, find: impl Fn(&str) -> Option<usize>) -> Result<usize, CliError> {
    let idx = match label.parse::<usize>() {
        Ok(idx) => Some(idx),
        Err(_) => find(label),
    };
    idx.filter(|&i| i < n).ok_or_else(|| CliError::Usage(format!("unknown judge or item {label:?} in target")))
}

/// Expand the requested target names into concrete targets. Group keywords
/// return `true` in the second slot so non-smooth members can be skipped.
fn resolve_targets(names: &[String], map: &IdMap) -> Result<Vec<(TargetSpec, bool)>, CliError> {
    let (kk, nn) = (map.n_judges(), map.n_items());
    let pairs: Vec<(usize, usize)> = (0..nn).flat_map(|i| (i + 1..nn).map(move |j| (i, j))).collect();
    let mut out = Vec::new();
    for name in names {
        let group: Vec<TargetSpec> = match name.as_str() {
            "none" => Vec::new(),
            "consensus_contrasts" => pairs.iter().map(|&(i, j)| TargetSpec::ConsensusContrast { i, j }).collect(),
            "judge_contrasts" => (0..kk)
                .flat_map(|k| pairs.iter().map(move |&(i, j)| TargetSpec::JudgeContrast { k, i, j }))
                .collect(),
            "pairwise_probs" => (0..kk)
                .flat_map(|k| pairs.iter().map(move |&(i, j)| TargetSpec::PairwiseProb { k, i, j }))
                .collect(),
            "gamma" | "gammas" => (0..kk).map(|k| TargetSpec::Gamma { k }).collect(),
            "score_entries" => (0..kk).flat_map(|k| (0..nn).map(move |i| TargetSpec::ScoreEntry { k, i })).collect(),
            "leverage" => (0..kk).map(|k| TargetSpec::Leverage { k }).collect(),
            _ => {
                out.push((parse_target(name, map)?, false));
                continue;
            }
        };
        out.extend(group.into_iter().map(|t| (t, true)));
    }
    Ok(out)
}

fn parse_target(s: &str, map: &IdMap) -> Result<TargetSpec, CliError> {
    let bad = || CliError::Usage(format!("cannot parse target {s:?}"));
    let (head, rest) = s.split_once('(').ok_or_else(bad)?;
    let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').map(str::trim).collect();
    let (kk, nn) = (map.n_judges(), map.n_items());
    let judge = |a: &str| lookup(a, kk, |l| map.judge(l));
    let item = |a: &str| lookup(a, nn, |l| map.item(l));
    match (head.trim(), args.as_slice()) {
        ("consensus_contrast", [i, j]) => Ok(TargetSpec::ConsensusContrast { i: item(i)?, j: item(j)? }),
        ("judge_contrast", [k, i, j]) => Ok(TargetSpec::JudgeContrast { k: judge(k)?, i: item(i)?, j: item(j)? }),
        ("pairwise_prob", [k, i, j]) => Ok(TargetSpec::PairwiseProb { k: judge(k)?, i: item(i)?, j: item(j)? }),
        ("gamma", [k]) => Ok(TargetSpec::Gamma { k: judge(k)? }),
        ("score_entry", [k, i]) => Ok(TargetSpec::ScoreEntry { k: judge(k)?, i: item(i)? }),
        ("leverage", [k]) => Ok(TargetSpec::Leverage { k: judge(k)? }),
        _ => Err(bad()),
    }
}

fn choose_rank(
    cfg: &RunConfig,
    records: &[ComparisonRecord],
    counts: &hja::AggregatedCounts,
) -> Result<(usize, Option<hja::selection::RankSelection>), CliError> {
    let (kk, nn) = (counts.n_judges(), counts.n_items());
    match cfg.rank {
        RankArg::Fixed(r) => {
            check_rank(r, kk, nn)?;
            Ok((r, None))
        }
        RankArg::Auto => {
            let opts = selection_options(cfg, kk, nn)?;
            let sel = select_rank(SelectionInput::Records(records), &opts, &cfg.solver)?;
            log::info!("selected rank {} by {:?}", sel.chosen_rank, sel.method);
            Ok((sel.chosen_rank, Some(sel)))
        }
    }
}

fn selection_options(cfg: &RunConfig, kk: usize, nn: usize) -> Result<SelectionOptions, CliError> {
    let r_max = cfg.r_max.unwrap_or_else(|| max_rank(kk, nn));
    check_rank(r_max, kk, nn)?;
    Ok(SelectionOptions { method: cfg.rank_method, r_max, folds: cfg.folds, seed: cfg.solver.seed })
}

fn run_fit(cfg: &RunConfig) -> Result<(), CliError> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(CliError::Usage(format!("--level {} must lie in (0, 1)", cfg.level)));
    }
    cfg.solver.validate()?;
    let (records, drop_stats) = read_records(cfg)?;
    let counts = aggregate(&records)?;
    let graph = check_connectivity(&counts);
    let id_map = counts.id_map().clone();
    let targets = resolve_targets(&cfg.targets, &id_map)?;
    let (rank, rank_selection) = choose_rank(cfg, &records, &counts)?;

    let solver = hja::solver::SolverConfig { rank, ..cfg.solver.clone() };
    let result = fit(&counts, &solver)?;
    if !result.converged {
        log::warn!("solver did not converge in {} iterations", result.iterations);
    }
    let params = &result.params;
    let intervals = if targets.is_empty() { Vec::new() } else { intervals_for(params, &counts, &targets, cfg.level)? };

    let report = FitReport {
        header: Header::new(cfg),
        id_map,
        drop_stats,
        rank_selection,
        params: params.export(),
        constraints: check_constraints(params, DEFAULT_CONSTRAINT_TOL),
        converged: result.converged,
        iterations: result.iterations,
        guard_failures: result.guard_failures,
        final_nll: result.final_nll,
        nll_trace: result.nll_trace.clone(),
        warnings: result.warnings.clone(),
        intervals,
        leverage: leverage_diagnostics(params, LEVERAGE_SMOOTH_MIN),
        uvt: MatrixExport::from(&params.uvt()),
        graph_report: graph,
    };
    write_json(&report, cfg.out.as_deref())
}

fn intervals_for(
    params: &HjaParams,
    counts: &hja::AggregatedCounts,
    targets: &[(TargetSpec, bool)],
    level: f64,
) -> Result<Vec<Interval>, CliError> {
    let engine = InferenceEngine::new(params, counts)?;
    let mut out = Vec::with_capacity(targets.len());
    for &(target, from_group) in targets {
        match engine.interval(target, level) {
            Ok(iv) => out.push(iv),
            Err(HjaError::NonSmoothTarget(msg)) if from_group => log::warn!("skipping {target}: {msg}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Score matrix CSV: a header whose first cell names the judge column followed by
/// item labels, then one row per judge.
fn read_score_matrix(path: &Path) -> Result<(IdMap, DMatrix<f64>), CliError> {
    let format_err = |msg: String| CliError::Core(HjaError::Format(msg));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let header = reader.headers().map_err(|e| format_err(e.to_string()))?.clone();
    let items: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if items.len() < 2 {
        return Err(format_err("score matrix needs at least two item columns".into()));
    }
    let mut judges = Vec::new();
    let mut values = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| format_err(e.to_string()))?;
        if row.len() != items.len() + 1 {
            return Err(format_err(format!("row for {:?} has {} fields, expected {}", &row[0], row.len(), items.len() + 1)));
        }
        judges.push(row[0].to_string());
        for cell in row.iter().skip(1) {
            values.push(cell.parse::<f64>().map_err(|_| format_err(format!("non-numeric score {cell:?}")))?);
        }
    }
    if judges.is_empty() {
        return Err(format_err("score matrix has no judge rows".into()));
    }
    let s = DMatrix::from_row_slice(judges.len(), items.len(), &values);
    Ok((IdMap::from_labels(judges, items)?, s))
}

fn run_decompose(cfg: &RunConfig) -> Result<(), CliError> {
    let (id_map, s) = read_score_matrix(input_path(cfg)?)?;
    let rank = match cfg.rank {
        RankArg::Auto => RankChoice::Auto,
        RankArg::Fixed(r) => RankChoice::Fixed(r),
    };
    let s = ScoreMatrix::new(s, DEFAULT_CONSTRAINT_TOL)?;
    let d = decompose(&s, rank, DEFAULT_CONSTRAINT_TOL)?;
    let report = DecomposeReport {
        header: Header::new(cfg),
        id_map,
        params: d.params.export(),
        constraints: check_constraints(&d.params, DEFAULT_CONSTRAINT_TOL),
        singular_values: d.singular_values,
        warnings: d.warnings,
    };
    write_json(&report, cfg.out.as_deref())
}

fn run_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.solver.validate()?;
    let study = hja::simulation::StudyConfig { solver: cfg.solver.clone(), ..cfg.study.clone() };
    let rows = run_recovery_study(&study)?;
    let mut buf = Vec::new();
    write_study_csv(&mut buf, &rows)?;
    write_bytes(&buf, cfg.out.as_deref())
}

fn run_select(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.solver.validate()?;
    let (records, drop_stats) = read_records(cfg)?;
    let counts = aggregate(&records)?;
    let opts = selection_options(cfg, counts.n_judges(), counts.n_items())?;
    let selection = select_rank(SelectionInput::Records(&records), &opts, &cfg.solver)?;
    let report = SelectionReport {
        header: Header::new(cfg),
        id_map: counts.id_map().clone(),
        drop_stats,
        graph_report: check_connectivity(&counts),
        selection,
    };
    write_json(&report, cfg.out.as_deref())
}

fn run_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.solver.validate()?;
    let (records, _) = read_records(cfg)?;
    let dataset = cfg.dataset.clone().unwrap_or_else(|| {
        input_path(cfg)
            .ok()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let rows = evaluate_dataset(&dataset, &records, &cfg.protocol, &cfg.solver)?;
    let mut buf = Vec::new();
    write_protocol_csv(&mut buf, &rows)?;
    write_bytes(&buf, cfg.out.as_deref())
}
