//! Batch runs over structure libraries, random-coupling ensembles and
//! cross-pair transfer grids.

use crate::dynamics::{singlet_probability_factorized, CorrelationTensor, DynamicsOptions, MoleculeModel, TimeGrid};
use crate::error::{Result, SpinError};
use crate::observables::{entanglement_yield, reduced_pair_density, threshold_crossings, CrossingReport};
use crate::spin::SpinSystem;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_YIELD_RATE: f64 = 1.0 / 300.0;
pub const DEFAULT_YIELD_HORIZON: f64 = 1000.0;

/// Settings shared by every structure in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: TimeGrid,
    pub dynamics: DynamicsOptions,
    /// Site in molecule A and site in molecule B that start in the singlet.
    pub pair: (usize, usize),
    pub threshold: f64,
    pub yield_rate_per_s: f64,
    pub yield_horizon_s: f64,
    pub quantiles: Vec<f64>,
    pub concurrence: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: TimeGrid::default(),
            dynamics: DynamicsOptions::default(),
            pair: (0, 0),
            threshold: 0.5,
            yield_rate_per_s: DEFAULT_YIELD_RATE,
            yield_horizon_s: DEFAULT_YIELD_HORIZON,
            quantiles: vec![0.5],
            concurrence: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite()) {
            return Err(SpinError::InvalidArgument(format!("threshold {} is not finite", self.threshold)));
        }
        if !(self.yield_rate_per_s > 0.0) || !(self.yield_horizon_s > 0.0) {
            return Err(SpinError::InvalidArgument("yield rate and horizon must be positive".into()));
        }
        if let Some(q) = self.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(SpinError::InvalidArgument(format!("quantile {q} outside [0, 1]")));
        }
        Ok(())
    }
}

/// p(t) and optionally C(t) for the configured pair of one structure.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSeries {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub concurrence: Option<Vec<f64>>,
}

fn pair_tensors(model: &MoleculeModel, pair: (usize, usize), grid: &TimeGrid) -> Result<(CorrelationTensor, CorrelationTensor)> {
    let (ia, ib) = pair;
    if ia == ib {
        let m = model.correlation_tensor(ia, ia, grid)?;
        Ok((m.clone(), m))
    } else {
        let mut t = model.correlation_tensors(&[(ia, ia), (ib, ib)], grid)?;
        let mb = t.pop().expect("two tensors");
        let ma = t.pop().expect("two tensors");
        Ok((ma, mb))
    }
}

/// Singlet probability (and concurrence when enabled) of `config.pair` for two copies of `system`.
pub fn simulate_pair(system: &SpinSystem, config: &RunConfig) -> Result<PairSeries> {
    let model = MoleculeModel::new(system, &config.dynamics)?;
    let (ma, mb) = pair_tensors(&model, config.pair, &config.grid)?;
    let p = singlet_probability_factorized(&ma, &mb)?;
    let concurrence = if config.concurrence {
        Some(reduced_pair_density(&ma, &mb)?.concurrence()?)
    } else {
        None
    };
    Ok(PairSeries {
        times: ma.times,
        p,
        concurrence,
    })
}

/// Number of symmetry operations of a Schoenflies point group (`C2v`, `S4`, `Td`, `D_{2h}`, ...).
pub fn symmetry_operation_count(label: &str) -> Option<u32> {
    let clean: String = label.chars().filter(|c| !matches!(c, '_' | '{' | '}' | ' ')).collect();
    let lower = clean.to_ascii_lowercase();
    let fixed = match lower.as_str() {
        "c1" => Some(1),
        "cs" | "ci" => Some(2),
        "t" => Some(12),
        "td" | "th" | "o" => Some(24),
        "oh" => Some(48),
        "i" => Some(60),
        "ih" => Some(120),
        _ => None,
    };
    if fixed.is_some() {
        return fixed;
    }
    let family = lower.chars().next()?;
    let digits: String = lower[1..].chars().take_while(|c| c.is_ascii_digit()).collect();
    let n: u32 = digits.parse().ok().filter(|&n| n >= 1)?;
    let suffix = &lower[1 + digits.len()..];
    match (family, suffix) {
        ('c', "") => Some(n),
        ('c', "v") | ('c', "h") => Some(2 * n),
        ('d', "") => Some(2 * n),
        ('d', "d") | ('d', "h") => Some(4 * n),
        ('s', "") if n.is_multiple_of(2) => Some(n),
        _ => None,
    }
}

/// Median-unbiased sample quantile (Hyndman-Fan type 8) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let h = (n as f64 + 1.0 / 3.0) * q + 1.0 / 3.0;
    if h <= 1.0 {
        return Some(sorted[0]);
    }
    if h >= n as f64 {
        return Some(sorted[n - 1]);
    }
    let lo = h.floor();
    let i = lo as usize - 1;
    Some(sorted[i] + (h - lo) * (sorted[i + 1] - sorted[i]))
}

/// Type-8 quantile of unsorted data, ignoring nothing; returns `None` when empty.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureOutcome {
    pub index: usize,
    pub label: String,
    pub symmetry_label: String,
    pub crossings: CrossingReport,
    /// `None` when the grid ends before the yield horizon.
    pub entanglement_yield: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub index: usize,
    pub label: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingQuantile {
    pub q: f64,
    pub first_below_s: Option<f64>,
    pub last_above_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryPoint {
    pub label: String,
    pub symmetry_label: String,
    pub operations: u32,
    pub first_below_s: Option<f64>,
    pub last_above_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub times: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub mean_c: Option<Vec<f64>>,
    pub structures: Vec<StructureOutcome>,
    pub quantiles: Vec<CrossingQuantile>,
    /// Structures that never drop below the threshold.
    pub undefined_first_below: usize,
    /// Structures that are never at or above the threshold.
    pub undefined_last_above: usize,
    pub symmetry_scatter: Vec<SymmetryPoint>,
    pub failures: Vec<Failure>,
}

fn mean_series<'a>(series: impl Iterator<Item = &'a [f64]>, len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    let mut count = 0usize;
    for s in series {
        for (acc, x) in sum.iter_mut().zip(s) {
            *acc += x;
        }
        count += 1;
    }
    if count == 0 {
        return Vec::new();
    }
    sum.iter().map(|x| x / count as f64).collect()
}

fn label_of(system: &SpinSystem, index: usize) -> String {
    if system.label.is_empty() {
        format!("structure-{index}")
    } else {
        system.label.clone()
    }
}

/// Runs every structure on the shared grid and aggregates the results.
///
/// A structure that fails is listed under `failures` and left out of every statistic.
pub fn run_structure_batch(systems: &[SpinSystem], config: &RunConfig) -> Result<EnsembleSummary> {
    if systems.is_empty() {
        return Err(SpinError::InvalidArgument("batch needs at least one structure".into()));
    }
    config.validate()?;
    let results: Vec<Result<PairSeries>> = systems.par_iter().map(|s| simulate_pair(s, config)).collect();

    let times = config.grid.points().to_vec();
    let mut structures = Vec::new();
    let mut failures = Vec::new();
    let mut ok: Vec<&PairSeries> = Vec::new();
    for (index, (system, result)) in systems.iter().zip(&results).enumerate() {
        let label = label_of(system, index);
        let outcome = result.as_ref().map_err(|e| e.to_string()).and_then(|series| {
            let crossings = threshold_crossings(&series.times, &series.p, config.threshold).map_err(|e| e.to_string())?;
            let entanglement_yield =
                match entanglement_yield(&series.times, &series.p, config.yield_rate_per_s, config.yield_horizon_s) {
                    Ok(y) => Some(y),
                    Err(SpinError::ShortSeries { .. }) => None,
                    Err(e) => return Err(e.to_string()),
                };
            Ok(StructureOutcome {
                index,
                label: label.clone(),
                symmetry_label: system.symmetry_label.clone(),
                crossings,
                entanglement_yield,
            })
        });
        match outcome {
            Ok(o) => {
                structures.push(o);
                ok.push(result.as_ref().expect("checked above"));
            }
            Err(message) => failures.push(Failure { index, label, message }),
        }
    }

    let mean_p = mean_series(ok.iter().map(|s| s.p.as_slice()), times.len());
    let mean_c = if config.concurrence {
        Some(mean_series(
            ok.iter().filter_map(|s| s.concurrence.as_deref()),
            times.len(),
        ))
    } else {
        None
    };
    let firsts: Vec<f64> = structures.iter().filter_map(|o| o.crossings.first_below_s).collect();
    let lasts: Vec<f64> = structures.iter().filter_map(|o| o.crossings.last_above_s).collect();
    let quantiles = config
        .quantiles
        .iter()
        .map(|&q| CrossingQuantile {
            q,
            first_below_s: quantile(&firsts, q),
            last_above_s: quantile(&lasts, q),
        })
        .collect();
    let symmetry_scatter = structures
        .iter()
        .filter_map(|o| {
            symmetry_operation_count(&o.symmetry_label).map(|operations| SymmetryPoint {
                label: o.label.clone(),
                symmetry_label: o.symmetry_label.clone(),
                operations,
                first_below_s: o.crossings.first_below_s,
                last_above_s: o.crossings.last_above_s,
            })
        })
        .collect();
    Ok(EnsembleSummary {
        times,
        mean_p,
        mean_c,
        undefined_first_below: structures.len() - firsts.len(),
        undefined_last_above: structures.len() - lasts.len(),
        structures,
        quantiles,
        symmetry_scatter,
        failures,
    })
}

// ---------------------------------------------------------------------------
// Random-coupling ensembles

/// Which sums of squared couplings are pinned to the target norm.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    /// Root-sum-square over all distinct pairs.
    #[default]
    AllPairs,
    /// Root-sum-square of every row of the coupling matrix.
    PerRow,
}

impl FromStr for NormalizationScope {
    type Err = SpinError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_pairs" | "all-pairs" => Ok(NormalizationScope::AllPairs),
            "per_row" | "per-row" => Ok(NormalizationScope::PerRow),
            other => Err(SpinError::InvalidArgument(format!("unknown normalization scope `{other}`"))),
        }
    }
}

impl fmt::Display for NormalizationScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationScope::AllPairs => "all_pairs",
            NormalizationScope::PerRow => "per_row",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomEnsembleSpec {
    pub n_p_values: Vec<usize>,
    pub samples_per_size: usize,
    pub seed: u64,
    pub normalization_hz: f64,
    pub normalization_scope: NormalizationScope,
}

impl Default for RandomEnsembleSpec {
    fn default() -> Self {
        RandomEnsembleSpec {
            n_p_values: vec![2, 3, 4, 5, 6],
            samples_per_size: 50,
            seed: 0,
            normalization_hz: 1.0,
            normalization_scope: NormalizationScope::AllPairs,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of sample `index` of size `n_p`, independent of execution order.
pub fn sample_seed(seed: u64, n_p: usize, index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ n_p as u64) ^ index as u64)
}

/// Coupling-only system with standard-normal couplings rescaled to `normalization_hz` over all pairs.
pub fn random_coupling_system(n_p: usize, seed: u64, normalization_hz: f64) -> Result<SpinSystem> {
    random_coupling_system_scoped(n_p, seed, normalization_hz, NormalizationScope::AllPairs)
}

pub fn random_coupling_system_scoped(
    n_p: usize,
    seed: u64,
    normalization_hz: f64,
    scope: NormalizationScope,
) -> Result<SpinSystem> {
    if n_p < 2 {
        return Err(SpinError::InvalidArgument(format!("random system needs at least 2 spins, got {n_p}")));
    }
    if !(normalization_hz > 0.0 && normalization_hz.is_finite()) {
        return Err(SpinError::InvalidArgument(format!("normalization must be positive, got {normalization_hz}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut j = Array2::<f64>::zeros((n_p, n_p));
    for a in 0..n_p {
        for b in a + 1..n_p {
            let v: f64 = StandardNormal.sample(&mut rng);
            j[[a, b]] = v;
            j[[b, a]] = v;
        }
    }
    match scope {
        NormalizationScope::AllPairs => {
            let rss = (0..n_p)
                .flat_map(|a| (a + 1..n_p).map(move |b| (a, b)))
                .map(|(a, b)| j[[a, b]] * j[[a, b]])
                .sum::<f64>()
                .sqrt();
            j.mapv_inplace(|v| v * normalization_hz / rss);
        }
        NormalizationScope::PerRow => scale_rows(&mut j, normalization_hz)?,
    }
    Ok(SpinSystem::from_couplings(j)?.with_label(format!("random-n{n_p}-{seed:016x}"), "C1"))
}

/// Symmetric diagonal scaling `J -> D J D` so every row has root-sum-square `target`.
///
/// With `s_i = exp(x_i)` the squared row sums are the gradient of the convex
/// `phi(x) = 1/2 sum_ij J_ij^2 exp(x_i + x_j)`, so Newton steps with backtracking on
/// `phi(x) - target^2 sum_i x_i` find the scaling.
fn scale_rows(j: &mut Array2<f64>, target: f64) -> Result<()> {
    let n = j.nrows();
    let a = j.mapv(|v| v * v);
    let t2 = target * target;
    if n == 2 {
        // one coupling: both rows are that coupling, and the Hessian is singular
        let v = j[[0, 1]];
        j[[0, 1]] = target.copysign(v);
        j[[1, 0]] = target.copysign(v);
        return Ok(());
    }
    let objective = |x: &DVector<f64>| {
        let mut phi = 0.0;
        for p in 0..n {
            for q in 0..n {
                phi += 0.5 * a[[p, q]] * (x[p] + x[q]).exp();
            }
        }
        phi - t2 * x.sum()
    };
    let mut x = DVector::<f64>::zeros(n);
    for _ in 0..200 {
        let b = DMatrix::from_fn(n, n, |p, q| a[[p, q]] * (x[p] + x[q]).exp());
        let rows: DVector<f64> = DVector::from_fn(n, |p, _| b.row(p).sum());
        let worst = rows.iter().map(|r| (r / t2 - 1.0).abs()).fold(0.0, f64::max);
        if worst < 1e-14 {
            for p in 0..n {
                for q in 0..n {
                    j[[p, q]] *= (0.5 * (x[p] + x[q])).exp();
                }
            }
            return Ok(());
        }
        let hess = &b + DMatrix::from_diagonal(&rows);
        let grad = rows.add_scalar(-t2);
        let step = hess
            .lu()
            .solve(&(-&grad))
            .ok_or_else(|| SpinError::Numerical("singular Hessian in per-row normalization".into()))?;
        let f0 = objective(&x);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        while objective(&(&x + &step * t)) > f0 + 1e-4 * t * slope && t > 1e-12 {
            t *= 0.5;
        }
        x += step * t;
    }
    Err(SpinError::Numerical("per-row coupling normalization did not converge".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub n_p: usize,
    pub yields: Vec<f64>,
    pub failures: Vec<Failure>,
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
}

/// Entanglement yield of random coherent systems per size. Relaxation is always off here.
pub fn yield_vs_size_study(spec: &RandomEnsembleSpec, config: &RunConfig) -> Result<Vec<SizeRow>> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.dynamics.relaxation = false;
    cfg.concurrence = false;
    let jobs: Vec<(usize, usize)> = spec
        .n_p_values
        .iter()
        .flat_map(|&n| (0..spec.samples_per_size).map(move |i| (n, i)))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(n, i)| {
            let system = random_coupling_system_scoped(n, sample_seed(spec.seed, n, i), spec.normalization_hz, spec.normalization_scope)?;
            let series = simulate_pair(&system, &cfg)?;
            entanglement_yield(&series.times, &series.p, cfg.yield_rate_per_s, cfg.yield_horizon_s)
        })
        .collect();
    let mut rows: Vec<SizeRow> = Vec::new();
    for (&(n, i), r) in jobs.iter().zip(results) {
        if rows.last().map(|row| row.n_p) != Some(n) || i == 0 {
            rows.push(SizeRow {
                n_p: n,
                yields: Vec::new(),
                failures: Vec::new(),
                median: None,
                q25: None,
                q75: None,
            });
        }
        let row = rows.last_mut().expect("row pushed");
        match r {
            Ok(y) => row.yields.push(y),
            Err(e) => row.failures.push(Failure {
                index: i,
                label: format!("random-n{n}-{i}"),
                message: e.to_string(),
            }),
        }
    }
    for row in &mut rows {
        row.median = quantile(&row.yields, 0.5);
        row.q25 = quantile(&row.yields, 0.25);
        row.q75 = quantile(&row.yields, 0.75);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Cross-pair transfer

/// `series[s][q]`: singlet probability of probe pair `pairs[q]` after preparing source pair `pairs[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferGrid {
    pub times: Vec<f64>,
    /// `(site in A, site in B)` with the first index not above the second.
    pub pairs: Vec<(usize, usize)>,
    pub series: Vec<Vec<Vec<f64>>>,
}

impl TransferGrid {
    pub fn get(&self, source: (usize, usize), probe: (usize, usize)) -> Option<&[f64]> {
        let s = self.pairs.iter().position(|&p| p == source)?;
        let q = self.pairs.iter().position(|&p| p == probe)?;
        Some(&self.series[s][q])
    }
}

/// Singlet probabilities of every probe pair for every prepared source pair.
pub fn transfer_grid(system: &SpinSystem, config: &RunConfig) -> Result<TransferGrid> {
    let n = system.n_spins;
    let model = MoleculeModel::new(system, &config.dynamics)?;
    let all: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
    let tensors = model.correlation_tensors(&all, &config.grid)?;
    let m = |src: usize, probe: usize| &tensors[src * n + probe];
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let series = pairs
        .par_iter()
        .map(|&(i, j)| {
            pairs
                .iter()
                .map(|&(k, l)| singlet_probability_factorized(m(i, k), m(j, l)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferGrid {
        times: config.grid.points().to_vec(),
        pairs,
        series,
    })
}
