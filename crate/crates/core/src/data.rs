//! Comparison records, aggregation into per-cell counts, and comparison-graph checks.
//!
//! A record `(judge, item_a, item_b, outcome)` says that `judge` compared `item_a`
//! against `item_b`; `outcome` is 1 when `item_a` won, 0 when it lost and 0.5 for a
//! tie. Aggregation maps labels to dense indices (first appearance order) and folds
//! every record into the canonical orientation `i < j`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HjaError, Result};

pub const CSV_HEADER: &str = "judge,item_a,item_b,outcome";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub judge: String,
    pub item_a: String,
    pub item_b: String,
    pub outcome: f64,
}

fn is_valid_outcome(y: f64) -> bool {
    y == 0.0 || y == 0.5 || y == 1.0
}

impl ComparisonRecord {
    pub fn new(
        judge: impl Into<String>,
        item_a: impl Into<String>,
        item_b: impl Into<String>,
        outcome: f64,
    ) -> Result<Self> {
        let rec = Self {
            judge: judge.into(),
            item_a: item_a.into(),
            item_b: item_b.into(),
            outcome,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_a == self.item_b {
            return Err(HjaError::Validation(format!(
                "record compares item {:?} with itself",
                self.item_a
            )));
        }
        if !is_valid_outcome(self.outcome) {
            return Err(HjaError::Validation(format!(
                "outcome {} is not one of 0, 0.5, 1",
                self.outcome
            )));
        }
        Ok(())
    }

    pub fn is_tie(&self) -> bool {
        self.outcome == 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for InputFormat {
    type Err = HjaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" => Ok(InputFormat::Jsonl),
            other => Err(HjaError::Validation(format!("unknown input format {other:?}"))),
        }
    }
}

/// Rows rejected while parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropStats {
    /// Outcome missing, unparsable, or outside {0, 0.5, 1}.
    pub dropped: usize,
    /// Wrong field count, quoted labels, self-comparisons, or undecodable JSON.
    pub malformed: usize,
}

impl DropStats {
    pub fn total(&self) -> usize {
        self.dropped + self.malformed
    }
}

/// Parse comparison records from CSV or JSON lines.
///
/// Rows with an unknown outcome label are dropped and counted, never coerced.
pub fn parse_records<R: Read>(
    source: R,
    format: InputFormat,
) -> Result<(Vec<ComparisonRecord>, DropStats)> {
    let reader = BufReader::new(source);
    match format {
        InputFormat::Csv => parse_csv(reader),
        InputFormat::Jsonl => parse_jsonl(reader),
    }
}

fn parse_csv<R: BufRead>(reader: R) -> Result<(Vec<ComparisonRecord>, DropStats)> {
    let mut records = Vec::new();
    let mut stats = DropStats::default();
    let mut header_seen = false;

    for line in reader.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if !header_seen {
            let header = line.trim_start_matches('\u{feff}').trim();
            if header.is_empty() {
                continue;
            }
            if header != CSV_HEADER {
                return Err(HjaError::Format(format!(
                    "expected CSV header {CSV_HEADER:?}, found {header:?}"
                )));
            }
            header_seen = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 || fields.iter().any(|f| f.contains('"')) {
            stats.malformed += 1;
            continue;
        }
        let (judge, a, b) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if judge.is_empty() || a.is_empty() || b.is_empty() || a == b {
            stats.malformed += 1;
            continue;
        }
        match fields[3].trim().parse::<f64>() {
            Ok(y) if is_valid_outcome(y) => records.push(ComparisonRecord {
                judge: judge.to_string(),
                item_a: a.to_string(),
                item_b: b.to_string(),
                outcome: y,
            }),
            _ => stats.dropped += 1,
        }
    }
    if !header_seen {
        return Err(HjaError::Format("empty CSV input (missing header)".into()));
    }
    Ok((records, stats))
}

#[derive(Deserialize)]
struct JsonRow {
    judge: String,
    item_a: String,
    item_b: String,
    outcome: serde_json::Value,
}

fn parse_jsonl<R: BufRead>(reader: R) -> Result<(Vec<ComparisonRecord>, DropStats)> {
    let mut records = Vec::new();
    let mut stats = DropStats::default();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: JsonRow = match serde_json::from_str(line) {
            Ok(row) => row,
            Err(_) => {
                stats.malformed += 1;
                continue;
            }
        };
        if row.item_a == row.item_b || row.judge.is_empty() {
            stats.malformed += 1;
            continue;
        }
        match row.outcome.as_f64() {
            Some(y) if is_valid_outcome(y) => records.push(ComparisonRecord {
                judge: row.judge,
                item_a: row.item_a,
                item_b: row.item_b,
                outcome: y,
            }),
            _ => stats.dropped += 1,
        }
    }
    Ok((records, stats))
}

fn format_outcome(y: f64) -> &'static str {
    if y == 0.0 {
        "0"
    } else if y == 1.0 {
        "1"
    } else {
        "0.5"
    }
}

/// Write records in the same format `parse_records` reads.
pub fn serialize_records(records: &[ComparisonRecord], format: InputFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        InputFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in records {
                r.validate()?;
                for label in [&r.judge, &r.item_a, &r.item_b] {
                    if label.contains(',') || label.contains('"') || label.contains('\n') {
                        return Err(HjaError::Validation(format!(
                            "label {label:?} cannot be written to CSV"
                        )));
                    }
                }
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    r.judge,
                    r.item_a,
                    r.item_b,
                    format_outcome(r.outcome)
                ));
            }
        }
        InputFormat::Jsonl => {
            for r in records {
                r.validate()?;
                out.push_str(&serde_json::to_string(r).expect("record serializes"));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Dense index assignment for judge and item labels, in first-appearance order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IdMap {
    pub judges: Vec<String>,
    pub items: Vec<String>,
    #[serde(skip)]
    judge_index: HashMap<String, usize>,
    #[serde(skip)]
    item_index: HashMap<String, usize>,
}

impl PartialEq for IdMap {
    fn eq(&self, other: &Self) -> bool {
        self.judges == other.judges && self.items == other.items
    }
}

impl IdMap {
    pub fn from_records(records: &[ComparisonRecord]) -> Self {
        let mut map = IdMap::default();
        for r in records {
            map.push_judge(&r.judge);
            map.push_item(&r.item_a);
            map.push_item(&r.item_b);
        }
        map
    }

    pub fn from_labels(judges: Vec<String>, items: Vec<String>) -> Result<Self> {
        let mut map = IdMap::default();
        for j in &judges {
            if map.push_judge(j) + 1 != map.judges.len() {
                return Err(HjaError::Validation(format!("duplicate judge label {j:?}")));
            }
        }
        for i in &items {
            if map.push_item(i) + 1 != map.items.len() {
                return Err(HjaError::Validation(format!("duplicate item label {i:?}")));
            }
        }
        Ok(map)
    }

    /// Synthetic labels `judge_<k>` / `item_<i>`.
    pub fn synthetic(n_judges: usize, n_items: usize) -> Self {
        Self::from_labels(
            (0..n_judges).map(|k| format!("judge_{k}")).collect(),
            (0..n_items).map(|i| format!("item_{i}")).collect(),
        )
        .expect("synthetic labels are unique")
    }

    pub fn push_judge(&mut self, label: &str) -> usize {
        if let Some(&k) = self.judge_index.get(label) {
            return k;
        }
        let k = self.judges.len();
        self.judges.push(label.to_string());
        self.judge_index.insert(label.to_string(), k);
        k
    }

    pub fn push_item(&mut self, label: &str) -> usize {
        if let Some(&i) = self.item_index.get(label) {
            return i;
        }
        let i = self.items.len();
        self.items.push(label.to_string());
        self.item_index.insert(label.to_string(), i);
        i
    }

    pub fn judge(&self, label: &str) -> Option<usize> {
        self.judge_index.get(label).copied()
    }

    pub fn item(&self, label: &str) -> Option<usize> {
        self.item_index.get(label).copied()
    }

    pub fn n_judges(&self) -> usize {
        self.judges.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Rebuild the lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.judge_index = self
            .judges
            .iter()
            .enumerate()
            .map(|(k, s)| (s.clone(), k))
            .collect();
        self.item_index = self
            .items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }
}

/// One observed judge-item-pair cell with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    /// Number of comparisons.
    pub n: f64,
    /// Wins of item `i` over item `j`; ties count one half.
    pub y: f64,
}

impl Cell {
    pub fn key(&self) -> (usize, usize, usize) {
        (self.k, self.i, self.j)
    }

    pub fn mean(&self) -> f64 {
        self.y / self.n
    }
}

/// Per-cell counts over the observed set of judge-item-pair triples.
///
/// Cells are kept sorted by `(k, i, j)`; every likelihood sum iterates in this order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedCounts {
    id_map: IdMap,
    cells: Vec<Cell>,
    n_total: f64,
}

impl AggregatedCounts {
    /// Build from explicit cells. Duplicate keys are merged; zero-count cells dropped.
    pub fn from_cells(id_map: IdMap, cells: impl IntoIterator<Item = Cell>) -> Result<Self> {
        let (kk, nn) = (id_map.n_judges(), id_map.n_items());
        let mut merged: std::collections::BTreeMap<(usize, usize, usize), (f64, f64)> =
            Default::default();
        for c in cells {
            if c.k >= kk || c.i >= nn || c.j >= nn {
                return Err(HjaError::IndexOutOfRange(format!(
                    "cell ({}, {}, {}) outside {kk} judges x {nn} items",
                    c.k, c.i, c.j
                )));
            }
            if c.i >= c.j {
                return Err(HjaError::Validation(format!(
                    "cell ({}, {}, {}) must satisfy i < j",
                    c.k, c.i, c.j
                )));
            }
            if !(c.n >= 0.0) || !(c.y >= 0.0) || c.y > c.n || !c.n.is_finite() {
                return Err(HjaError::Validation(format!(
                    "cell ({}, {}, {}) has invalid counts n={}, y={}",
                    c.k, c.i, c.j, c.n, c.y
                )));
            }
            let e = merged.entry(c.key()).or_insert((0.0, 0.0));
            e.0 += c.n;
            e.1 += c.y;
        }
        let cells: Vec<Cell> = merged
            .into_iter()
            .filter(|(_, (n, _))| *n > 0.0)
            .map(|((k, i, j), (n, y))| Cell { k, i, j, n, y })
            .collect();
        let n_total = cells.iter().map(|c| c.n).sum();
        Ok(Self {
            id_map,
            cells,
            n_total,
        })
    }

    pub fn id_map(&self) -> &IdMap {
        &self.id_map
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_total(&self) -> f64 {
        self.n_total
    }

    pub fn n_judges(&self) -> usize {
        self.id_map.n_judges()
    }

    pub fn n_items(&self) -> usize {
        self.id_map.n_items()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> Option<&Cell> {
        self.cells
            .binary_search_by_key(&(k, i, j), Cell::key)
            .ok()
            .map(|idx| &self.cells[idx])
    }

    /// Cells belonging to judge `k` (a contiguous slice thanks to the sort order).
    pub fn judge_cells(&self, k: usize) -> &[Cell] {
        let lo = self.cells.partition_point(|c| c.k < k);
        let hi = self.cells.partition_point(|c| c.k <= k);
        &self.cells[lo..hi]
    }

    /// Counts summed over judges, as a single-judge table keyed by `(i, j)`.
    pub fn pooled(&self) -> Vec<Cell> {
        let mut acc: std::collections::BTreeMap<(usize, usize), (f64, f64)> = Default::default();
        for c in &self.cells {
            let e = acc.entry((c.i, c.j)).or_insert((0.0, 0.0));
            e.0 += c.n;
            e.1 += c.y;
        }
        acc.into_iter()
            .map(|((i, j), (n, y))| Cell { k: 0, i, j, n, y })
            .collect()
    }

    /// Total comparisons per judge.
    pub fn judge_volumes(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_judges()];
        for c in &self.cells {
            v[c.k] += c.n;
        }
        v
    }

    /// Copy with every count multiplied by `factor` (used in scaling checks).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            id_map: self.id_map.clone(),
            cells: self
                .cells
                .iter()
                .map(|c| Cell {
                    n: c.n * factor,
                    y: c.y * factor,
                    ..*c
                })
                .collect(),
            n_total: self.n_total * factor,
        }
    }

    pub fn snapshot(&self) -> CountsSnapshot {
        CountsSnapshot {
            judges: self.id_map.judges.clone(),
            items: self.id_map.items.clone(),
            cells: self.cells.clone(),
        }
    }
}

/// JSON export of aggregated counts: `{judges, items, cells: [{k,i,j,n,y}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsSnapshot {
    pub judges: Vec<String>,
    pub items: Vec<String>,
    pub cells: Vec<Cell>,
}

impl CountsSnapshot {
    pub fn into_counts(self) -> Result<AggregatedCounts> {
        let map = IdMap::from_labels(self.judges, self.items)?;
        AggregatedCounts::from_cells(map, self.cells)
    }
}

/// Aggregate records, assigning indices by first appearance.
pub fn aggregate(records: &[ComparisonRecord]) -> Result<AggregatedCounts> {
    if records.is_empty() {
        return Err(HjaError::Validation("no records to aggregate".into()));
    }
    let map = IdMap::from_records(records);
    aggregate_with(records, &map)
}

/// Aggregate against a fixed index map (train/validation splits share the full map).
pub fn aggregate_with(records: &[ComparisonRecord], id_map: &IdMap) -> Result<AggregatedCounts> {
    let mut cells = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let lookup = |label: &str, kind: &str, idx: Option<usize>| {
            idx.ok_or_else(|| HjaError::Validation(format!("unknown {kind} label {label:?}")))
        };
        let k = lookup(&r.judge, "judge", id_map.judge(&r.judge))?;
        let a = lookup(&r.item_a, "item", id_map.item(&r.item_a))?;
        let b = lookup(&r.item_b, "item", id_map.item(&r.item_b))?;
        let (i, j, y) = if a < b {
            (a, b, r.outcome)
        } else {
            (b, a, 1.0 - r.outcome)
        };
        cells.push(Cell { k, i, j, n: 1.0, y });
    }
    AggregatedCounts::from_cells(id_map.clone(), cells)
}

/// Connectivity of per-judge and pooled comparison graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub per_judge_connected: Vec<bool>,
    pub pooled_connected: bool,
    /// Per judge, the connected components as sorted item-index lists.
    pub components: Vec<Vec<Vec<usize>>>,
    pub pooled_components: Vec<Vec<usize>>,
}

impl GraphReport {
    pub fn all_judges_connected(&self) -> bool {
        self.per_judge_connected.iter().all(|&c| c)
    }

    pub fn disconnected_judges(&self) -> Vec<usize> {
        self.per_judge_connected
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(k, _)| k)
            .collect()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }

    fn components(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for x in 0..n {
            let r = self.find(x);
            groups.entry(r).or_default().push(x);
        }
        groups.into_values().collect()
    }
}

/// Connected components of the undirected graph on `n_items` nodes with the given edges.
pub fn components_of(n_items: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n_items);
    for (a, b) in edges {
        uf.union(a, b);
    }
    uf.components()
}

pub fn check_connectivity(counts: &AggregatedCounts) -> GraphReport {
    let n = counts.n_items();
    let components: Vec<Vec<Vec<usize>>> = (0..counts.n_judges())
        .map(|k| components_of(n, counts.judge_cells(k).iter().map(|c| (c.i, c.j))))
        .collect();
    let pooled_components = components_of(n, counts.cells().iter().map(|c| (c.i, c.j)));
    GraphReport {
        per_judge_connected: components.iter().map(|c| c.len() <= 1).collect(),
        pooled_connected: pooled_components.len() <= 1,
        components,
        pooled_components,
    }
}

/// Uniform record-level split into (train, test) with `round(test_fraction * len)` test records.
///
/// Both halves keep the input order.
pub fn split_records(
    records: &[ComparisonRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<ComparisonRecord>, Vec<ComparisonRecord>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(HjaError::Validation(format!(
            "test fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let n_test = (test_fraction * records.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; records.len()];
    for &idx in &order[..n_test] {
        is_test[idx] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(is_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Assign each record to one of `folds` folds, uniformly at random given `seed`.
pub fn fold_assignment(n_records: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n_records];
    for (pos, &idx) in order.iter().enumerate() {
        fold[idx] = pos % folds.max(1);
    }
    fold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(k: &str, a: &str, b: &str, y: f64) -> ComparisonRecord {
        ComparisonRecord::new(k, a, b, y).unwrap()
    }

    #[test]
    fn csv_row_maps_fields() {
        let src = "judge,item_a,item_b,outcome\nj1,a,b,1\nj1,a,b,0.5\nj1,a,b,unknown\n";
        let (recs, stats) = parse_records(src.as_bytes(), InputFormat::Csv).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0], rec("j1", "a", "b", 1.0));
        assert!(recs[1].is_tie());
        assert_eq!(stats.dropped, 1);
    }

    #[test]
    fn csv_drops_out_of_set_outcomes_without_coercion() {
        let src = "judge,item_a,item_b,outcome\nj,a,b,0.7\nj,a,b,2\nj,a,b,\nj,a,b,0\n";
        let (recs, stats) = parse_records(src.as_bytes(), InputFormat::Csv).unwrap();
        assert_eq!(recs, vec![rec("j", "a", "b", 0.0)]);
        assert_eq!(stats.dropped, 3);
    }

    #[test]
    fn csv_rejects_quoted_or_extra_fields() {
        let src = "judge,item_a,item_b,outcome\nj,\"a,x\",b,1\nj,a,b,1,extra\nj,a,a,1\n";
        let (recs, stats) = parse_records(src.as_bytes(), InputFormat::Csv).unwrap();
        assert!(recs.is_empty());
        assert_eq!(stats.malformed, 3);
    }

    #[test]
    fn csv_bad_header_is_format_error() {
        let err = parse_records("a,b,c,d\nj,a,b,1\n".as_bytes(), InputFormat::Csv).unwrap_err();
        assert!(matches!(err, HjaError::Format(_)));
    }

    #[test]
    fn jsonl_parses_and_drops() {
        let src = r#"{"judge":"j","item_a":"a","item_b":"b","outcome":1}
{"judge":"j","item_a":"a","item_b":"b","outcome":"unknown"}
{"judge":"j","item_a":"a","item_b":"b","outcome":0.5}
not json
"#;
        let (recs, stats) = parse_records(src.as_bytes(), InputFormat::Jsonl).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(stats.dropped, 1);
        assert_eq!(stats.malformed, 1);
    }

    #[test]
    fn aggregate_counts_repeated_cells() {
        let recs = vec![rec("k", "a", "b", 1.0), rec("k", "a", "b", 0.0)];
        let c = aggregate(&recs).unwrap();
        assert_eq!(c.cells(), &[Cell { k: 0, i: 0, j: 1, n: 2.0, y: 1.0 }]);
        assert_eq!(c.n_total(), 2.0);
    }

    #[test]
    fn aggregate_flips_orientation() {
        // "a" gets index 0 from the first record
        let recs = vec![rec("k", "a", "c", 0.5), rec("k", "b", "a", 1.0)];
        let c = aggregate(&recs).unwrap();
        let cell = c.get(0, 0, 2).unwrap();
        assert_eq!((cell.n, cell.y), (1.0, 0.0));
        let tie = c.get(0, 0, 1).unwrap();
        assert_eq!((tie.n, tie.y), (1.0, 0.5));
    }

    #[test]
    fn aggregate_rejects_self_comparison() {
        let bad = ComparisonRecord {
            judge: "k".into(),
            item_a: "a".into(),
            item_b: "a".into(),
            outcome: 1.0,
        };
        assert!(matches!(aggregate(&[bad]), Err(HjaError::Validation(_))));
    }

    #[test]
    fn connectivity_path_and_split_graph() {
        let map = IdMap::synthetic(2, 4);
        let cells = vec![
            Cell { k: 0, i: 0, j: 1, n: 1.0, y: 1.0 },
            Cell { k: 0, i: 1, j: 2, n: 1.0, y: 1.0 },
            Cell { k: 0, i: 2, j: 3, n: 1.0, y: 1.0 },
            Cell { k: 1, i: 0, j: 1, n: 1.0, y: 1.0 },
            Cell { k: 1, i: 2, j: 3, n: 1.0, y: 1.0 },
        ];
        let report = check_connectivity(&AggregatedCounts::from_cells(map, cells).unwrap());
        assert_eq!(report.per_judge_connected, vec![true, false]);
        assert_eq!(report.components[1], vec![vec![0, 1], vec![2, 3]]);
        assert!(report.pooled_connected);
        assert_eq!(report.disconnected_judges(), vec![1]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let recs: Vec<_> = (0..10)
            .map(|t| rec("k", &format!("a{t}"), "b", 1.0))
            .collect();
        let (train, test) = split_records(&recs, 0.2, 7).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(split_records(&recs, 0.2, 7).unwrap(), (train, test));
        let (all, none) = split_records(&recs, 0.0, 7).unwrap();
        assert_eq!((all.len(), none.len()), (10, 0));
        assert!(split_records(&recs, 1.0, 7).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let recs = vec![rec("k", "a", "b", 1.0), rec("m", "b", "c", 0.5)];
        let c = aggregate(&recs).unwrap();
        let json = serde_json::to_string(&c.snapshot()).unwrap();
        let back: CountsSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_counts().unwrap(), c);
    }
}
