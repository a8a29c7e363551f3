use crate::{CliError, RunArgs, Toggle};
use log::{info, warn};
use serde_json::json;
use spinpair::ensemble::{
    run_structure_batch, simulate_pair, transfer_grid, yield_vs_size_study, NormalizationScope, RandomEnsembleSpec, RunConfig,
};
use spinpair::io::{load_structure, parse_run_config, parse_structure, read_series, structure_hash, write_atomic, CODE_VERSION};
use spinpair::observables::{diffusion_traversal_time, entanglement_yield, threshold_crossings, unique_frequency_bound};
use spinpair::validation::{run_oracle_suite, OracleSpec};
use spinpair::{Mechanism, PropagationMethod, ResultSeries, SpinSystem};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

type CliResult = Result<(), CliError>;

fn resolve_config(run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &run.config {
        Some(path) => parse_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = run.relaxation {
        cfg.dynamics.relaxation = t == Toggle::On;
    }
    if let Some(m) = &run.mechanisms {
        if !cfg.dynamics.relaxation {
            return Err(CliError::Input("--mechanisms needs --relaxation on".into()));
        }
        if m.is_empty() {
            return Err(CliError::Input("--mechanisms is empty".into()));
        }
        cfg.dynamics.mechanisms = m.clone();
    }
    if let Some(g) = &run.grid {
        cfg.grid = g.clone();
    }
    if let Some(p) = run.pair {
        cfg.pair = p;
    }
    if let Some(m) = run.method {
        cfg.dynamics.method = m;
    }
    if let Some(s) = run.orientation_seed {
        cfg.dynamics.orientation_seed = s;
    }
    if run.no_concurrence {
        cfg.concurrence = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(system: SpinSystem, cfg: &RunConfig, run: &RunArgs) -> Result<SpinSystem, CliError> {
    let system = match run.field_ut {
        Some(b) => system.with_field(b / 1e6)?,
        None => system,
    };
    if cfg.dynamics.relaxation {
        if cfg.dynamics.mechanisms.contains(&Mechanism::Csa) && system.shielding.is_none() {
            return Err(CliError::Input(format!(
                "{}: the csa mechanism needs shielding_tensors in the structure file",
                system.label
            )));
        }
        if cfg.dynamics.mechanisms.contains(&Mechanism::Dipolar) && system.positions.is_none() {
            return Err(CliError::Input(format!(
                "{}: the dipolar mechanism needs positions_angstrom in the structure file",
                system.label
            )));
        }
    }
    let (a, b) = cfg.pair;
    if a >= system.n_spins || b >= system.n_spins {
        return Err(CliError::Input(format!(
            "--pair {a},{b} is out of range for {} ({} spins)",
            system.label, system.n_spins
        )));
    }
    Ok(system)
}

fn mechanisms_label(cfg: &RunConfig) -> String {
    if !cfg.dynamics.relaxation {
        return "none".into();
    }
    cfg.dynamics.mechanisms.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
}

fn method_label(m: PropagationMethod) -> &'static str {
    match m {
        PropagationMethod::Eigendecomposition => "eig",
        PropagationMethod::KrylovExpm => "krylov",
    }
}

fn config_json(cfg: &RunConfig) -> Result<String, CliError> {
    serde_json::to_string(cfg).map_err(|e| CliError::Failed(format!("serializing run config: {e}")))
}

fn with_run_metadata(series: ResultSeries, system: &SpinSystem, cfg: &RunConfig) -> Result<ResultSeries, CliError> {
    Ok(series
        .with_meta("label", &system.label)
        .with_meta("symmetry", &system.symmetry_label)
        .with_meta("structure_hash", structure_hash(system))
        .with_meta("b_field_t", system.b_field_t)
        .with_meta("mechanisms", mechanisms_label(cfg))
        .with_meta("grid", &cfg.grid)
        .with_meta("pair", format!("{},{}", cfg.pair.0, cfg.pair.1))
        .with_meta("method", method_label(cfg.dynamics.method))
        .with_meta("seed", cfg.dynamics.orientation_seed)
        .with_meta("code_version", CODE_VERSION)
        .with_meta("run_config", config_json(cfg)?))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            info!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn simulate(structure: &str, run: &RunArgs, out: Option<&Path>) -> CliResult {
    let cfg = resolve_config(run)?;
    let system = prepare(load_structure(structure)?, &cfg, run)?;
    let series = simulate_pair(&system, &cfg)?;
    let rs = with_run_metadata(ResultSeries::new(series.times, series.p, series.concurrence), &system, &cfg)?;
    emit(out, &rs.to_text()?)
}

fn is_series_file(input: &str) -> bool {
    fs::read_to_string(input)
        .map(|t| t.starts_with("# format: spinpair-series/"))
        .unwrap_or(false)
}

/// Times and p from a series file, or from simulating a structure.
fn series_or_structure(input: &str, run: &RunArgs) -> Result<(Vec<f64>, Vec<f64>, RunConfig), CliError> {
    let mut cfg = resolve_config(run)?;
    if is_series_file(input) {
        if run.config.is_some() || run.grid.is_some() || run.relaxation.is_some() || run.mechanisms.is_some() {
            warn!("{input} is a series file; simulation flags are ignored");
        }
        let s = read_series(Path::new(input))?;
        return Ok((s.time_s, s.p_singlet, cfg));
    }
    cfg.concurrence = false;
    let system = prepare(load_structure(input)?, &cfg, run)?;
    let s = simulate_pair(&system, &cfg)?;
    Ok((s.times, s.p, cfg))
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "none".into(), |v| format!("{v:.6}"))
}

pub fn crossings(input: &str, threshold: Option<f64>, run: &RunArgs) -> CliResult {
    let (times, p, cfg) = series_or_structure(input, run)?;
    let thr = threshold.unwrap_or(cfg.threshold);
    let r = threshold_crossings(&times, &p, thr)?;
    println!("input: {input}");
    println!("threshold: {thr}");
    println!("first_below_s: {}", opt(r.first_below_s));
    println!("last_above_s: {}", opt(r.last_above_s));
    Ok(())
}

pub fn yield_command(input: &str, k: Option<f64>, horizon: Option<f64>, run: &RunArgs) -> CliResult {
    let (times, p, cfg) = series_or_structure(input, run)?;
    let k = k.unwrap_or(cfg.yield_rate_per_s);
    let horizon = horizon.unwrap_or(cfg.yield_horizon_s);
    let y = entanglement_yield(&times, &p, k, horizon)?;
    println!("input: {input}");
    println!("k_per_s: {k}");
    println!("horizon_s: {horizon}");
    println!("yield: {y:.9}");
    Ok(())
}

pub fn transfer(structure: &str, run: &RunArgs, out: &Path) -> CliResult {
    let cfg = resolve_config(run)?;
    let system = prepare(load_structure(structure)?, &cfg, run)?;
    let grid = transfer_grid(&system, &cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    let mut entries = Vec::new();
    for (si, src) in grid.pairs.iter().enumerate() {
        for (qi, probe) in grid.pairs.iter().enumerate() {
            let file = format!("src_{}_{}__probe_{}_{}.csv", src.0, src.1, probe.0, probe.1);
            let rs = with_run_metadata(ResultSeries::new(grid.times.clone(), grid.series[si][qi].clone(), None), &system, &cfg)?
                .with_meta("source", format!("{},{}", src.0, src.1))
                .with_meta("probe", format!("{},{}", probe.0, probe.1));
            write_atomic(&out.join(&file), rs.to_text()?.as_bytes())?;
            entries.push(json!({ "source": [src.0, src.1], "probe": [probe.0, probe.1], "file": file }));
        }
    }
    let manifest = json!({
        "format": "spinpair-transfer/1",
        "label": system.label,
        "structure_hash": structure_hash(&system),
        "code_version": CODE_VERSION,
        "grid": cfg.grid.to_string(),
        "run_config": cfg,
        "pairs": grid.pairs,
        "entries": entries,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Failed(e.to_string()))? + "\n";
    write_atomic(&out.join("manifest.json"), text.as_bytes())?;
    println!("wrote {} series and manifest.json to {}", entries.len(), out.display());
    Ok(())
}

pub fn batch(dir: &Path, run: &RunArgs, out: Option<&Path>) -> CliResult {
    let cfg = resolve_config(run)?;
    let listing = fs::read_dir(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Input(format!("{} holds no .toml structure files", dir.display())));
    }
    let mut systems = Vec::new();
    let mut errors = Vec::new();
    for p in &paths {
        match parse_structure(p).map_err(CliError::from).and_then(|s| prepare(s, &cfg, run)) {
            Ok(s) => systems.push(s),
            Err(e) => errors.push(e.to_string()),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Input(format!("unusable structure files:\n  {}", errors.join("\n  "))));
    }
    info!("running {} structures", systems.len());
    let summary = run_structure_batch(&systems, &cfg)?;
    let structures: Vec<_> = paths
        .iter()
        .zip(&systems)
        .map(|(p, s)| json!({ "file": p.display().to_string(), "label": s.label, "structure_hash": structure_hash(s) }))
        .collect();
    let doc = json!({
        "format": "spinpair-batch/1",
        "metadata": {
            "code_version": CODE_VERSION,
            "mechanisms": mechanisms_label(&cfg),
            "grid": cfg.grid.to_string(),
            "seed": cfg.dynamics.orientation_seed,
            "run_config": cfg,
            "structures": structures,
        },
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Failed(e.to_string()))? + "\n";
    emit(out, &text)?;
    if !summary.failures.is_empty() {
        let names: Vec<String> = summary.failures.iter().map(|f| format!("{}: {}", f.label, f.message)).collect();
        return Err(CliError::Failed(format!("{} structures failed:\n  {}", names.len(), names.join("\n  "))));
    }
    Ok(())
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.9e}"))
}

pub fn ensemble(
    sizes: Vec<usize>,
    samples: usize,
    seed: u64,
    norm_hz: f64,
    scope: NormalizationScope,
    run: &RunArgs,
    out: Option<&Path>,
) -> CliResult {
    if run.relaxation == Some(Toggle::On) || run.mechanisms.is_some() {
        return Err(CliError::Input(
            "random ensembles are coherent-only; use `batch` for relaxation".into(),
        ));
    }
    let cfg = resolve_config(run)?;
    if cfg.dynamics.relaxation {
        return Err(CliError::Input("random ensembles are coherent-only; the run config enables relaxation".into()));
    }
    let spec = RandomEnsembleSpec {
        n_p_values: sizes,
        samples_per_size: samples,
        seed,
        normalization_hz: norm_hz,
        normalization_scope: scope,
    };
    let rows = yield_vs_size_study(&spec, &cfg)?;
    let mut s = String::new();
    let _ = writeln!(s, "# format: spinpair-ensemble/1");
    let _ = writeln!(s, "# seed: {seed}");
    let _ = writeln!(s, "# samples: {samples}");
    let _ = writeln!(s, "# normalization_hz: {norm_hz}");
    let _ = writeln!(s, "# normalization_scope: {scope}");
    let _ = writeln!(s, "# grid: {}", cfg.grid);
    let _ = writeln!(s, "# code_version: {CODE_VERSION}");
    let _ = writeln!(s, "n_p,samples,failures,q25,median,q75");
    for r in &rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.n_p,
            r.yields.len(),
            r.failures.len(),
            cell(r.q25),
            cell(r.median),
            cell(r.q75)
        );
    }
    emit(out, &s)?;
    let failed: usize = rows.iter().map(|r| r.failures.len()).sum();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} samples failed")));
    }
    Ok(())
}

pub fn freqbound(levels: u64) -> CliResult {
    println!("{}", unique_frequency_bound(levels)?);
    Ok(())
}

pub fn oracle_check(max_spins: usize, seed: u64, cases: usize) -> CliResult {
    let spec = OracleSpec {
        max_spins,
        seed,
        cases,
        ..OracleSpec::default()
    };
    let r = run_oracle_suite(&spec)?;
    println!("runs: {}", r.runs);
    println!("max_p_deviation: {:.3e} (limit {:.1e})", r.max_p_deviation, spec.tolerance);
    println!("max_density_deviation: {:.3e} (limit {:.1e})", r.max_density_deviation, spec.tolerance);
    println!("max_method_deviation: {:.3e} (limit {:.1e})", r.max_method_deviation, spec.method_tolerance);
    println!("status: {}", if r.passed { "pass" } else { "fail" });
    if !r.passed {
        return Err(CliError::Failed("oracle check exceeded its tolerances".into()));
    }
    Ok(())
}

pub fn diffusion(d: f64, length: f64) -> CliResult {
    let t = diffusion_traversal_time(d, length)?;
    println!("traversal_time_s: {t:.6e}");
    println!("traversal_time_h: {:.4}", t / 3600.0);
    Ok(())
}
