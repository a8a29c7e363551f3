//! Structure files, run configuration files and result series.
//!
//! Structure files are TOML with lengths in Angstrom, couplings in Hz, shielding
//! tensors in ppm, correlation times in ps and fields in microtesla; values are
//! converted to seconds, tesla and absolute shielding fractions on parse.

use crate::ensemble::RunConfig;
use crate::error::{Result, SpinError};
use crate::fixtures;
use crate::spin::{SpinSystem, GAMMA_31P};
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use toml::{Table, Value};

pub const SCHEMA_VERSION: i64 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_TAU_C_PS: f64 = 177.0;
pub const DEFAULT_B_FIELD_UT: f64 = 50.0;
const SYMMETRY_TOL: f64 = 1e-12;

const KNOWN_KEYS: [&str; 9] = [
    "schema_version",
    "label",
    "symmetry_label",
    "n_spins",
    "positions_angstrom",
    "j_couplings_hz",
    "shielding_tensors",
    "tau_c_ps",
    "b_field_ut",
];

fn parse_err(origin: &str, message: impl Into<String>) -> SpinError {
    SpinError::Parse {
        path: origin.to_string(),
        message: message.into(),
    }
}

fn as_f64(v: &Value, field: &str) -> std::result::Result<f64, String> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("{field}: expected a number, found {}", other.type_str())),
    }
}

fn as_index(v: &Value, field: &str) -> std::result::Result<usize, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(format!("{field}: expected a nonnegative integer, found {other}")),
    }
}

fn as_array<'a>(v: &'a Value, field: &str) -> std::result::Result<&'a Vec<Value>, String> {
    v.as_array().ok_or_else(|| format!("{field}: expected an array, found {}", v.type_str()))
}

fn vec3(v: &Value, field: &str) -> std::result::Result<[f64; 3], String> {
    let a = as_array(v, field)?;
    if a.len() != 3 {
        return Err(format!("{field}: expected 3 components, found {}", a.len()));
    }
    Ok([
        as_f64(&a[0], &format!("{field}[0]"))?,
        as_f64(&a[1], &format!("{field}[1]"))?,
        as_f64(&a[2], &format!("{field}[2]"))?,
    ])
}

fn couplings(v: &Value, n: usize, strict: bool) -> std::result::Result<Array2<f64>, String> {
    let rows = as_array(v, "j_couplings_hz")?;
    let mut j = Array2::<f64>::zeros((n, n));
    if rows.iter().all(|r| r.is_array()) && !rows.is_empty() {
        if rows.len() != n {
            return Err(format!("j_couplings_hz: matrix has {} rows, n_spins = {n}", rows.len()));
        }
        for (a, row) in rows.iter().enumerate() {
            let row = as_array(row, &format!("j_couplings_hz[{a}]"))?;
            if row.len() != n {
                return Err(format!("j_couplings_hz[{a}]: row has {} entries, n_spins = {n}", row.len()));
            }
            for (b, x) in row.iter().enumerate() {
                j[[a, b]] = as_f64(x, &format!("j_couplings_hz[{a}][{b}]"))?;
            }
        }
        for a in 0..n {
            if j[[a, a]] != 0.0 {
                return Err(format!("j_couplings_hz[{a}][{a}] = {} must be zero", j[[a, a]]));
            }
            for b in a + 1..n {
                let (x, y) = (j[[a, b]], j[[b, a]]);
                if !x.is_finite() || (x - y).abs() > SYMMETRY_TOL {
                    return Err(format!(
                        "j_couplings_hz: pair ({a}, {b}) is asymmetric, [{a}][{b}] = {x} but [{b}][{a}] = {y}"
                    ));
                }
                j[[b, a]] = x;
            }
        }
        return Ok(j);
    }
    let mut seen = BTreeSet::new();
    for (k, entry) in rows.iter().enumerate() {
        let field = format!("j_couplings_hz[{k}]");
        let t = entry
            .as_table()
            .ok_or_else(|| format!("{field}: expected a table with i, j, value or a matrix row"))?;
        for key in t.keys() {
            if !matches!(key.as_str(), "i" | "j" | "value") {
                let msg = format!("{field}: unknown key `{key}`");
                if strict {
                    return Err(msg);
                }
                log::warn!("{msg}");
            }
        }
        let get = |key: &str| t.get(key).ok_or_else(|| format!("{field}: missing `{key}`"));
        let a = as_index(get("i")?, &format!("{field}.i"))?;
        let b = as_index(get("j")?, &format!("{field}.j"))?;
        let value = as_f64(get("value")?, &format!("{field}.value"))?;
        if a >= n || b >= n {
            return Err(format!("{field}: pair ({a}, {b}) out of range for n_spins = {n}"));
        }
        if a == b {
            return Err(format!("{field}: self-coupling ({a}, {a}) is not allowed"));
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            return Err(format!("{field}: duplicate entry for pair ({}, {})", key.0, key.1));
        }
        if !value.is_finite() {
            return Err(format!("{field}.value is not finite"));
        }
        j[[a, b]] = value;
        j[[b, a]] = value;
    }
    Ok(j)
}

fn structure_from_table(doc: &Table, strict: bool) -> std::result::Result<SpinSystem, String> {
    for key in doc.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            let msg = format!("unknown key `{key}`");
            if strict {
                return Err(msg);
            }
            log::warn!("{msg}");
        }
    }
    match doc.get("schema_version") {
        Some(Value::Integer(SCHEMA_VERSION)) => {}
        Some(other) => return Err(format!("schema_version: unsupported value {other}, expected {SCHEMA_VERSION}")),
        None => return Err("schema_version: missing".into()),
    }
    let n = as_index(doc.get("n_spins").ok_or("n_spins: missing")?, "n_spins")?;
    if !(2..=crate::spin::MAX_SPINS).contains(&n) {
        return Err(format!("n_spins: {n} outside 2..={}", crate::spin::MAX_SPINS));
    }
    let text = |key: &str| -> std::result::Result<String, String> {
        match doc.get(key) {
            None => Ok(String::new()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(format!("{key}: expected a string, found {}", other.type_str())),
        }
    };
    let j = couplings(doc.get("j_couplings_hz").ok_or("j_couplings_hz: missing")?, n, strict)?;

    let positions = match doc.get("positions_angstrom") {
        None => None,
        Some(v) => {
            let rows = as_array(v, "positions_angstrom")?;
            if rows.len() != n {
                return Err(format!("positions_angstrom: {} rows, n_spins = {n}", rows.len()));
            }
            let pos = rows
                .iter()
                .enumerate()
                .map(|(k, r)| vec3(r, &format!("positions_angstrom[{k}]")).map(Vector3::from))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(pos)
        }
    };
    let shielding = match doc.get("shielding_tensors") {
        None => None,
        Some(v) => {
            let tensors = as_array(v, "shielding_tensors")?;
            if tensors.len() != n {
                return Err(format!("shielding_tensors: {} tensors, n_spins = {n}", tensors.len()));
            }
            let mut out = Vec::with_capacity(n);
            for (k, t) in tensors.iter().enumerate() {
                let rows = as_array(t, &format!("shielding_tensors[{k}]"))?;
                if rows.len() != 3 {
                    return Err(format!("shielding_tensors[{k}]: expected 3 rows, found {}", rows.len()));
                }
                let r: Vec<[f64; 3]> = rows
                    .iter()
                    .enumerate()
                    .map(|(a, row)| vec3(row, &format!("shielding_tensors[{k}][{a}]")))
                    .collect::<std::result::Result<_, _>>()?;
                out.push(Matrix3::from_fn(|a, b| r[a][b] / 1e6));
            }
            Some(out)
        }
    };
    let scalar = |key: &str, default: f64| match doc.get(key) {
        None => Ok(default),
        Some(v) => as_f64(v, key),
    };
    let tau_c_ps = scalar("tau_c_ps", DEFAULT_TAU_C_PS)?;
    let b_ut = scalar("b_field_ut", DEFAULT_B_FIELD_UT)?;

    let system = SpinSystem {
        n_spins: n,
        positions,
        j_hz: j,
        shielding,
        tau_c_s: tau_c_ps / 1e12,
        b_field_t: b_ut / 1e6,
        gamma_rad_s_t: GAMMA_31P,
        label: text("label")?,
        symmetry_label: text("symmetry_label")?,
    };
    system.validate().map_err(|e| e.to_string())?;
    Ok(system)
}

/// Parses a structure document; `origin` names the source in error messages.
pub fn parse_structure_str(text: &str, origin: &str, strict: bool) -> Result<SpinSystem> {
    let doc: Table = toml::from_str(text).map_err(|e| parse_err(origin, e.to_string()))?;
    structure_from_table(&doc, strict).map_err(|m| parse_err(origin, m))
}

/// Reads and validates a structure file, rejecting unknown keys.
pub fn parse_structure(path: &Path) -> Result<SpinSystem> {
    parse_structure_with(path, true)
}

pub fn parse_structure_with(path: &Path, strict: bool) -> Result<SpinSystem> {
    let text = fs::read_to_string(path).map_err(|e| parse_err(&path.display().to_string(), e.to_string()))?;
    parse_structure_str(&text, &path.display().to_string(), strict)
}

/// A structure from a file path, or a bundled fixture when no such file exists.
pub fn load_structure(spec: &str) -> Result<SpinSystem> {
    let path = Path::new(spec);
    if path.exists() {
        return parse_structure(path);
    }
    match fixtures::fixture_text(spec) {
        Some(_) => fixtures::fixture(spec),
        None => Err(parse_err(
            spec,
            format!("no such file, and not a bundled fixture ({})", fixtures::ALL.join(", ")),
        )),
    }
}

/// Unit-converted value rounded to 12 significant digits, so parse and write are inverse.
fn converted(x: f64) -> f64 {
    format!("{x:.11e}").parse().expect("formatted float parses")
}

/// Canonical structure document (pair-list couplings, every field explicit).
pub fn structure_to_toml(system: &SpinSystem) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "schema_version = {SCHEMA_VERSION}");
    let _ = writeln!(s, "label = {}", Value::String(system.label.clone()));
    let _ = writeln!(s, "symmetry_label = {}", Value::String(system.symmetry_label.clone()));
    let _ = writeln!(s, "n_spins = {}", system.n_spins);
    let _ = writeln!(s, "tau_c_ps = {:?}", converted(system.tau_c_s * 1e12));
    let _ = writeln!(s, "b_field_ut = {:?}", converted(system.b_field_t * 1e6));
    if let Some(pos) = &system.positions {
        let _ = writeln!(s, "positions_angstrom = [");
        for p in pos {
            let _ = writeln!(s, "    [{:?}, {:?}, {:?}],", p.x, p.y, p.z);
        }
        let _ = writeln!(s, "]");
    }
    if let Some(sh) = &system.shielding {
        let _ = writeln!(s, "shielding_tensors = [");
        for t in sh {
            let rows: Vec<String> = (0..3)
                .map(|a| {
                    let c = |b: usize| converted(t[(a, b)] * 1e6);
                    format!("[{:?}, {:?}, {:?}]", c(0), c(1), c(2))
                })
                .collect();
            let _ = writeln!(s, "    [{}],", rows.join(", "));
        }
        let _ = writeln!(s, "]");
    }
    for (a, b) in system.pairs() {
        let _ = writeln!(s, "\n[[j_couplings_hz]]\ni = {a}\nj = {b}\nvalue = {:?}", system.j_hz[[a, b]]);
    }
    s
}

/// SHA-256 of the canonical document, as lowercase hex.
pub fn structure_hash(system: &SpinSystem) -> String {
    hex::encode(Sha256::digest(structure_to_toml(system).as_bytes()))
}

/// Run settings from a TOML file; unknown keys are rejected.
pub fn parse_run_config(path: &Path) -> Result<RunConfig> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| parse_err(&origin, e.to_string()))?;
    parse_run_config_str(&text, &origin)
}

pub fn parse_run_config_str(text: &str, origin: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| parse_err(origin, e.to_string()))?;
    cfg.validate().map_err(|e| parse_err(origin, e.to_string()))?;
    Ok(cfg)
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| SpinError::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

// ---------------------------------------------------------------------------
// Result series

const SERIES_FORMAT: &str = "spinpair-series/1";

/// Columnar time series with a `# key: value` metadata header.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultSeries {
    pub metadata: Vec<(String, String)>,
    pub time_s: Vec<f64>,
    pub p_singlet: Vec<f64>,
    pub concurrence: Option<Vec<f64>>,
}

impl ResultSeries {
    pub fn new(time_s: Vec<f64>, p_singlet: Vec<f64>, concurrence: Option<Vec<f64>>) -> Self {
        ResultSeries {
            metadata: Vec::new(),
            time_s,
            p_singlet,
            concurrence,
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.push((key.into(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn columns(&self) -> Vec<(&'static str, &[f64])> {
        let mut cols: Vec<(&'static str, &[f64])> = vec![("time_s", &self.time_s), ("p_singlet", &self.p_singlet)];
        if let Some(c) = &self.concurrence {
            cols.push(("concurrence", c));
        }
        cols
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(':') || k.contains('\n') || k.trim() != k {
                return Err(SpinError::InvalidArgument(format!("bad metadata key `{k}`")));
            }
            if v.contains('\n') || v.contains('\r') {
                return Err(SpinError::InvalidArgument(format!("metadata `{k}` spans lines")));
            }
        }
        let cols = self.columns();
        for (name, c) in &cols {
            if c.len() != self.time_s.len() {
                return Err(SpinError::Dimension(format!(
                    "column {name} has {} rows, time_s has {}",
                    c.len(),
                    self.time_s.len()
                )));
            }
            if let Some(row) = c.iter().position(|x| !x.is_finite()) {
                return Err(SpinError::NonFinite {
                    column: name.to_string(),
                    row,
                });
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let mut s = String::new();
        let _ = writeln!(s, "# format: {SERIES_FORMAT}");
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k}: {v}");
        }
        let cols = self.columns();
        let names: Vec<&str> = cols.iter().map(|(n, _)| *n).collect();
        let _ = writeln!(s, "{}", names.join(","));
        for i in 0..self.time_s.len() {
            let row: Vec<String> = cols.iter().map(|(_, c)| format!("{:.16e}", c[i])).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        Ok(s)
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, m: String| parse_err(origin, format!("line {line}: {m}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == format!("# format: {SERIES_FORMAT}") => {}
            _ => return Err(err(1, format!("expected `# format: {SERIES_FORMAT}`"))),
        }
        let mut metadata = Vec::new();
        let mut header = None;
        for (no, line) in lines.by_ref() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once(": ")
                    .ok_or_else(|| err(no, "metadata line is not `# key: value`".into()))?;
                metadata.push((k.to_string(), v.to_string()));
            } else {
                header = Some((no, line));
                break;
            }
        }
        let (hno, header) = header.ok_or_else(|| err(1, "missing column header".into()))?;
        let with_c = match header {
            "time_s,p_singlet" => false,
            "time_s,p_singlet,concurrence" => true,
            other => return Err(err(hno, format!("unexpected column header `{other}`"))),
        };
        let width = if with_c { 3 } else { 2 };
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); width];
        for (no, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(err(no, format!("expected {width} fields, found {}", fields.len())));
            }
            for (c, f) in cols.iter_mut().zip(fields) {
                let x: f64 = f.parse().map_err(|_| err(no, format!("bad number `{f}`")))?;
                if !x.is_finite() {
                    return Err(err(no, format!("non-finite value `{f}`")));
                }
                c.push(x);
            }
        }
        let concurrence = if with_c { cols.pop() } else { None };
        let p_singlet = cols.pop().expect("column");
        let time_s = cols.pop().expect("column");
        Ok(ResultSeries {
            metadata,
            time_s,
            p_singlet,
            concurrence,
        })
    }
}

pub fn write_series(series: &ResultSeries, path: &Path) -> Result<()> {
    write_atomic(path, series.to_text()?.as_bytes())
}

pub fn read_series(path: &Path) -> Result<ResultSeries> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| parse_err(&origin, e.to_string()))?;
    ResultSeries::from_text(&text, &origin)
}
