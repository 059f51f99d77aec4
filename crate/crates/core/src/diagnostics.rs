//! Spatial (Moran's I) and temporal (lagged autocorrelation) diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crude_rate, Panel};

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("edge list: {0}")]
    Csv(#[from] csv::Error),
    #[error("edge list: {0}")]
    Format(String),
    #[error("self-loop on unit `{0}`")]
    SelfLoop(String),
    #[error("edge references unit `{0}` which is not in the roster")]
    UnknownId(String),
    #[error("values are constant across the {0} units used; Moran's I is undefined")]
    ConstantField(usize),
    #[error("Moran's I needs at least two connected units with values, found {0}")]
    TooFewUnits(usize),
    #[error("unit `{unit}` has {months} months; lag {max_lag} needs at least {}", max_lag + 2)]
    ShortSeries { unit: String, months: usize, max_lag: usize },
    #[error("unit `{unit}` has gaps in its monthly series")]
    Gap { unit: String },
    #[error("rate column `{0}` not found")]
    UnknownColumn(String),
    #[error("non-finite or missing rate for unit `{unit}` at month {month}")]
    BadRate { unit: String, month: i32 },
    #[error("every unit has a constant series; no autocorrelation is defined")]
    NoUsableSeries,
}

/// Undirected unit adjacency with row-standardized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    unit_ids: Vec<String>,
    /// Sorted, deduplicated neighbor indices per unit.
    neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// Symmetrize and deduplicate `edges`. With a roster, every edge endpoint
    /// must be listed and roster units without edges are kept as isolated.
    pub fn from_edges(
        edges: &[(String, String)],
        roster: Option<&BTreeSet<String>>,
    ) -> Result<NeighborGraph, DiagnosticsError> {
        let mut ids: BTreeSet<String> = roster.cloned().unwrap_or_default();
        for (a, b) in edges {
            if a == b {
                return Err(DiagnosticsError::SelfLoop(a.clone()));
            }
            for id in [a, b] {
                if let Some(r) = roster {
                    if !r.contains(id) {
                        return Err(DiagnosticsError::UnknownId(id.clone()));
                    }
                }
                ids.insert(id.clone());
            }
        }
        let unit_ids: Vec<String> = ids.into_iter().collect();
        let index = |id: &str| unit_ids.binary_search_by(|u| u.as_str().cmp(id)).expect("id inserted");
        let mut sets = vec![BTreeSet::new(); unit_ids.len()];
        for (a, b) in edges {
            let (i, j) = (index(a), index(b));
            sets[i].insert(j);
            sets[j].insert(i);
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(NeighborGraph { unit_ids, neighbors })
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.unit_ids.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    /// Neighbors of `id` with their row-standardized weights.
    pub fn weights(&self, id: &str) -> Vec<(&str, f64)> {
        match self.index_of(id) {
            Some(i) => {
                let nb = &self.neighbors[i];
                let w = 1.0 / nb.len() as f64;
                nb.iter().map(|&j| (self.unit_ids[j].as_str(), w)).collect()
            }
            None => Vec::new(),
        }
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) => self.neighbors[i].binary_search(&j).is_ok(),
            _ => false,
        }
    }
}

/// Read an edge list CSV with header `id_a,id_b`.
pub fn build_neighbor_graph(
    path: &Path,
    roster: Option<&BTreeSet<String>>,
) -> Result<NeighborGraph, DiagnosticsError> {
    let file = std::fs::File::open(path)?;
    neighbor_graph_from_reader(file, roster)
}

pub fn neighbor_graph_from_reader<R: Read>(
    reader: R,
    roster: Option<&BTreeSet<String>>,
) -> Result<NeighborGraph, DiagnosticsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DiagnosticsError::Format(format!("missing column `{name}`")))
    };
    let (ia, ib) = (col("id_a")?, col("id_b")?);
    let mut edges = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let get = |i: usize| {
            record
                .get(i)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .ok_or_else(|| DiagnosticsError::Format(format!("empty id on data line {}", line + 1)))
        };
        edges.push((get(ia)?, get(ib)?));
    }
    NeighborGraph::from_edges(&edges, roster)
}

/// Rook adjacency of a `rows x cols` lattice whose cell `(r, c)` is named by `id`.
pub fn rook_grid_edges<F: Fn(usize, usize) -> String>(rows: usize, cols: usize, id: F) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    edges
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    #[serde(rename = "I")]
    pub i: f64,
    /// Row-standardized neighbor average of each used unit.
    #[serde(skip)]
    pub neighbor_means: BTreeMap<String, f64>,
    /// OLS slope of neighbor means on values.
    pub slope: f64,
    pub n_used: usize,
    pub n_isolated: usize,
}

/// Units with values and at least one neighbor that also has a value.
struct MoranLayout {
    ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    n_isolated: usize,
}

fn layout(values: &BTreeMap<String, f64>, graph: &NeighborGraph) -> MoranLayout {
    let present: Vec<bool> = graph.unit_ids.iter().map(|u| values.contains_key(u)).collect();
    let mut keep: Vec<usize> = Vec::new();
    let mut n_isolated = values.keys().filter(|k| graph.index_of(k).is_none()).count();
    for (i, nb) in graph.neighbors.iter().enumerate() {
        if !present[i] {
            continue;
        }
        if nb.iter().any(|&j| present[j]) {
            keep.push(i);
        } else {
            n_isolated += 1;
        }
    }
    let position: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let neighbors = keep
        .iter()
        .map(|&i| graph.neighbors[i].iter().filter_map(|j| position.get(j).copied()).collect())
        .collect();
    MoranLayout { ids: keep.iter().map(|&i| graph.unit_ids[i].clone()).collect(), neighbors, n_isolated }
}

fn moran_statistic(x: &[f64], neighbors: &[Vec<usize>]) -> Option<(f64, Vec<f64>, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let z: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss: f64 = z.iter().map(|v| v * v).sum();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(ss > 1e-24 * scale * scale * n) {
        return None;
    }
    let lag: Vec<f64> = neighbors
        .iter()
        .map(|nb| nb.iter().map(|&j| z[j]).sum::<f64>() / nb.len() as f64)
        .collect();
    // row-standardized weights sum to n, so n / S0 = 1
    let cross: f64 = z.iter().zip(&lag).map(|(a, b)| a * b).sum();
    let i = cross / ss;
    let neighbor_means: Vec<f64> = lag.iter().map(|l| l + mean).collect();
    let m_mean = neighbor_means.iter().sum::<f64>() / n;
    let sxy: f64 = z.iter().zip(&neighbor_means).map(|(a, m)| a * (m - m_mean)).sum();
    Some((i, neighbor_means, sxy / ss))
}

/// Moran's I of `values` on `graph`. Units without a value-bearing neighbor are
/// excluded and counted as isolated.
pub fn morans_i(values: &BTreeMap<String, f64>, graph: &NeighborGraph) -> Result<MoranResult, DiagnosticsError> {
    let lay = layout(values, graph);
    if lay.ids.len() < 2 {
        return Err(DiagnosticsError::TooFewUnits(lay.ids.len()));
    }
    let x: Vec<f64> = lay.ids.iter().map(|u| values[u]).collect();
    let (i, means, slope) = moran_statistic(&x, &lay.neighbors).ok_or(DiagnosticsError::ConstantField(x.len()))?;
    Ok(MoranResult {
        i,
        neighbor_means: lay.ids.into_iter().zip(means).collect(),
        slope,
        n_used: x.len(),
        n_isolated: lay.n_isolated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationSummary {
    pub observed: f64,
    pub mean: f64,
    pub std_dev: f64,
    /// Share of permutations (observed included) with `I` at least as large as observed.
    pub p_upper: f64,
    pub permutations: usize,
}

/// Null distribution of Moran's I under random relabelling of the values.
pub fn moran_permutation(
    values: &BTreeMap<String, f64>,
    graph: &NeighborGraph,
    permutations: usize,
    seed: u64,
) -> Result<PermutationSummary, DiagnosticsError> {
    let observed = morans_i(values, graph)?.i;
    let lay = layout(values, graph);
    let mut x: Vec<f64> = lay.ids.iter().map(|u| values[u]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        x.shuffle(&mut rng);
        let (i, _, _) = moran_statistic(&x, &lay.neighbors).expect("variance is permutation invariant");
        stats.push(i);
    }
    let m = permutations as f64;
    let mean = stats.iter().sum::<f64>() / m;
    let var = stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let above = stats.iter().filter(|&&s| s >= observed).count();
    Ok(PermutationSummary {
        observed,
        mean,
        std_dev: var.sqrt(),
        p_upper: (above + 1) as f64 / (m + 1.0),
        permutations,
    })
}

/// Quantile levels reported for autocorrelation bands.
pub const ACF_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Weighted quantile using midpoint cumulative weights: the `k`-th smallest
/// value sits at level `(C_k − w_k/2)/W`, with linear interpolation between
/// values and clamping outside the first and last levels.
pub fn weighted_quantile(values: &[f64], weights: &[f64], level: f64) -> Option<f64> {
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .filter(|(v, w)| v.is_finite() && **w > 0.0)
        .map(|(&v, &w)| (v, w))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut cumulative = 0.0;
    let levels: Vec<f64> = pairs
        .iter()
        .map(|&(_, w)| {
            cumulative += w;
            (cumulative - w / 2.0) / total
        })
        .collect();
    if level <= levels[0] {
        return Some(pairs[0].0);
    }
    let last = pairs.len() - 1;
    if level >= levels[last] {
        return Some(pairs[last].0);
    }
    let k = levels.partition_point(|&p| p <= level);
    let (p0, p1) = (levels[k - 1], levels[k]);
    let (v0, v1) = (pairs[k - 1].0, pairs[k].0);
    Some(v0 + (level - p0) / (p1 - p0) * (v1 - v0))
}

/// Sample autocorrelation at `lag`; `None` for a constant series.
pub fn sample_acf(series: &[f64], lag: usize) -> Option<f64> {
    let n = series.len();
    if lag >= n {
        return None;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    if !(denom > 0.0) {
        return None;
    }
    let num: f64 = (0..n - lag).map(|t| (series[t] - mean) * (series[t + lag] - mean)).sum();
    Some(num / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    pub level: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfSummary {
    pub lag: usize,
    pub per_unit_acf: BTreeMap<String, f64>,
    pub weighted_quantiles: Vec<QuantilePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfReport {
    pub summaries: Vec<AcfSummary>,
    /// Units left out because their series is constant.
    pub excluded_units: Vec<String>,
}

/// Name that selects the crude rate (deaths per 100,000 person-years).
pub const CRUDE_RATE: &str = "crude_rate";

/// Per-unit lag-ℓ autocorrelation for ℓ = 1..=max_lag, summarized across
/// units by population-weighted quantiles.
pub fn temporal_acf(panel: &Panel, rate_column: &str, max_lag: usize) -> Result<AcfReport, DiagnosticsError> {
    let rates: Vec<Option<f64>> = if rate_column == CRUDE_RATE {
        panel.deaths().iter().zip(panel.popsize()).map(|(&d, &p)| Some(crude_rate(d, p))).collect()
    } else {
        panel.column(rate_column).ok_or_else(|| DiagnosticsError::UnknownColumn(rate_column.to_string()))?
    };
    let ids = panel.unit_ids();
    let months = panel.months();
    let mut series: Vec<(String, Vec<f64>, f64)> = Vec::new();
    let mut start = 0;
    while start < ids.len() {
        let mut end = start;
        while end < ids.len() && ids[end] == ids[start] {
            end += 1;
        }
        let unit = ids[start].clone();
        if (start + 1..end).any(|i| months[i] != months[i - 1] + 1) {
            return Err(DiagnosticsError::Gap { unit });
        }
        if end - start < max_lag + 2 {
            return Err(DiagnosticsError::ShortSeries { unit, months: end - start, max_lag });
        }
        let mut values = Vec::with_capacity(end - start);
        for i in start..end {
            match rates[i] {
                Some(v) if v.is_finite() => values.push(v),
                _ => return Err(DiagnosticsError::BadRate { unit, month: months[i] }),
            }
        }
        let weight = panel.popsize()[start..end].iter().map(|&p| p as f64).sum::<f64>() / (end - start) as f64;
        series.push((unit, values, weight));
        start = end;
    }

    let mut excluded_units = Vec::new();
    series.retain(|(unit, values, _)| {
        let constant = sample_acf(values, 1).is_none();
        if constant {
            excluded_units.push(unit.clone());
        }
        !constant
    });
    if series.is_empty() {
        return Err(DiagnosticsError::NoUsableSeries);
    }

    let weights: Vec<f64> = series.iter().map(|s| s.2).collect();
    let summaries = (1..=max_lag)
        .map(|lag| {
            let acfs: Vec<f64> = series.iter().map(|(_, v, _)| sample_acf(v, lag).expect("non-constant")).collect();
            let weighted_quantiles = ACF_LEVELS
                .iter()
                .map(|&level| QuantilePoint {
                    level,
                    value: weighted_quantile(&acfs, &weights, level).expect("non-empty"),
                })
                .collect();
            AcfSummary {
                lag,
                per_unit_acf: series.iter().map(|s| s.0.clone()).zip(acfs).collect(),
                weighted_quantiles,
            }
        })
        .collect();
    Ok(AcfReport { summaries, excluded_units })
}
