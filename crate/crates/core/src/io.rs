//! Files: trace, governor-log and slice CSVs, JSON documents, run manifests.
//!
//! Numbers are written with 17 significant digits, so a value read back is
//! bit-identical and a read-write cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::LoopGains;
use crate::dmdc::{to_rows, LtiModel, SignalTable};
use crate::governor::StepFlag;
use crate::moas::{AdmissibleSet, OutputConstraintSet, Polygon, Provenance, RowOrigin};
use crate::scenario::{model_hash, ConstraintSchedule, ReferenceTrajectory, RunResult, ScenarioConfig, StepLog, INPUT_NAMES, TRACE_COLUMNS};
use crate::{Error, Result};

pub const SLICE_HEADER: [&str; 2] = ["dm_dot_s_ref", "dT_p_in_ref"];

/// `t` followed by the trace columns.
pub fn trace_header() -> Vec<&'static str> {
    std::iter::once("t").chain(TRACE_COLUMNS).collect()
}

pub fn format_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        // NaN, inf, -inf
        format!("{x}")
    }
}

fn parse_f64(field: &str, column: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Schema(format!("row {row}, column {column}: `{field}` is not a number")))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema(format!("{other:?}")),
    }
}

/// Numeric CSV with a header row; columns are bound by name.
fn read_numeric<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let names: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let mut dup = names.clone();
    dup.sort();
    if let Some(w) = dup.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Schema(format!("duplicate column {}", w[0])));
    }
    let mut columns = vec![Vec::new(); names.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != names.len() {
            return Err(Error::Schema(format!("row {} has {} fields, header has {}", row + 1, rec.len(), names.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            columns[j].push(parse_f64(field, &names[j], row + 1)?);
        }
    }
    Ok((names, columns))
}

fn write_row<W: Write>(w: &mut W, fields: impl IntoIterator<Item = String>) -> Result<()> {
    let line = fields.into_iter().collect::<Vec<_>>().join(",");
    writeln!(w, "{line}")?;
    Ok(())
}

/// Trace CSV with the fixed header; other columns in `table` are not written.
pub fn write_trace<W: Write>(mut w: W, table: &SignalTable) -> Result<()> {
    let missing: Vec<String> = TRACE_COLUMNS.iter().filter(|c| table.column(c).is_none()).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let cols: Vec<&[f64]> = TRACE_COLUMNS.iter().map(|c| table.column(c).expect("checked")).collect();
    write_row(&mut w, trace_header().into_iter().map(String::from))?;
    for (i, t) in table.time.iter().enumerate() {
        write_row(&mut w, std::iter::once(format_f64(*t)).chain(cols.iter().map(|c| format_f64(c[i]))))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace CSV. Column order is free; every header column is required.
/// Extra columns are kept.
pub fn read_trace<R: Read>(reader: R) -> Result<SignalTable> {
    let (names, mut columns) = read_numeric(reader)?;
    let missing: Vec<String> = trace_header().into_iter().filter(|c| !names.iter().any(|n| n == c)).map(String::from).collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let ti = names.iter().position(|n| n == "t").expect("checked");
    let time = columns.remove(ti);
    let mut names = names;
    names.remove(ti);
    SignalTable::new(time, names, columns)
}

pub fn write_trace_file(path: &Path, table: &SignalTable) -> Result<()> {
    write_trace(BufWriter::new(File::create(path)?), table)
}

pub fn read_trace_file(path: &Path) -> Result<SignalTable> {
    read_trace(BufReader::new(File::open(path)?))
}

pub fn governor_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(INPUT_NAMES.iter().map(|n| format!("r_{n}")));
    h.extend(INPUT_NAMES.iter().map(|n| format!("v_{n}")));
    h.extend(["kappa_or_nan", "margin", "flag"].map(String::from));
    h
}

/// One row per governor step.
pub fn write_governor_log<W: Write>(mut w: W, log: &[StepLog]) -> Result<()> {
    write_row(&mut w, governor_header())?;
    for l in log {
        let rec = &l.record;
        if rec.r.len() != INPUT_NAMES.len() || rec.v.len() != INPUT_NAMES.len() {
            return Err(Error::Dimension(format!("governor record with {} references", rec.r.len())));
        }
        let fields = std::iter::once(format_f64(l.time))
            .chain(rec.r.iter().chain(&rec.v).map(|x| format_f64(*x)))
            .chain([format_f64(rec.kappa.unwrap_or(f64::NAN)), format_f64(rec.margin), rec.flag.as_str().to_string()]);
        write_row(&mut w, fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Governor log columns as read back: numeric columns plus the flags.
#[derive(Debug, Clone, PartialEq)]
pub struct GovernorTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub flags: Vec<String>,
}

pub fn read_governor_log<R: Read>(reader: R) -> Result<GovernorTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != governor_header() {
        return Err(Error::Schema(format!("unexpected governor log header {header:?}")));
    }
    let n = header.len() - 1;
    let mut columns = vec![Vec::new(); n];
    let mut flags = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for j in 0..n {
            columns[j].push(parse_f64(&rec[j], &header[j], row + 1)?);
        }
        flags.push(rec[n].to_string());
    }
    Ok(GovernorTable { names: header[..n].to_vec(), columns, flags })
}

pub fn write_slice<W: Write>(mut w: W, polygon: &Polygon) -> Result<()> {
    write_row(&mut w, SLICE_HEADER.map(String::from))?;
    for p in &polygon.vertices {
        write_row(&mut w, p.iter().map(|x| format_f64(*x)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_slice<R: Read>(reader: R) -> Result<Polygon> {
    let (names, columns) = read_numeric(reader)?;
    if names != SLICE_HEADER {
        return Err(Error::Schema(format!("slice header must be {SLICE_HEADER:?}, got {names:?}")));
    }
    Ok(Polygon { vertices: columns[0].iter().zip(&columns[1]).map(|(a, b)| [*a, *b]).collect() })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Admissible set as written to disk: row-major matrices plus labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSetFile {
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub horizon: usize,
    pub epsilon: f64,
    pub h_x: Vec<Vec<f64>>,
    pub h_v: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub rows: Vec<RowOrigin>,
    pub constraints: OutputConstraintSet,
    pub provenance: Provenance,
    pub warnings: Vec<String>,
}

impl AdmissibleSetFile {
    pub fn new(set: &AdmissibleSet, model: &LtiModel) -> Self {
        Self {
            state_names: model.state_names.clone(),
            input_names: model.input_names.clone(),
            horizon: set.horizon,
            epsilon: set.epsilon,
            h_x: to_rows(set.h_x()),
            h_v: to_rows(set.h_v()),
            h: set.h().iter().copied().collect(),
            rows: set.origins(),
            constraints: set.constraints().clone(),
            provenance: set.provenance.clone(),
            warnings: set.warnings.clone(),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSummary {
    pub label: String,
    pub max_violation: f64,
    pub steps_violated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaStats {
    pub min: f64,
    pub mean: f64,
    /// Steps with `κ < 1`.
    pub limited_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub constraints: Vec<ConstraintSummary>,
    pub flags: BTreeMap<String, usize>,
    pub kappa: Option<KappaStats>,
    /// CG: how often each row was active, by label.
    pub active_rows: BTreeMap<String, usize>,
    pub max_kkt_residual: Option<f64>,
}

fn row_label(set_rows: &[RowOrigin], constraints: &OutputConstraintSet, i: usize) -> String {
    let o = set_rows[i];
    let name = &constraints.rows[o.constraint].label;
    match o.step {
        Some(k) => format!("{name} @ k={k}"),
        None => format!("{name} @ steady state"),
    }
}

impl RunSummary {
    pub fn new(result: &RunResult, rows: Option<(&[RowOrigin], &OutputConstraintSet)>) -> Self {
        let mut flags = BTreeMap::new();
        for f in [StepFlag::Ok, StepFlag::Relaxed, StepFlag::Fallback] {
            flags.insert(f.as_str().to_string(), result.flag_count(f));
        }
        let kappas: Vec<f64> = result.governor_log.iter().filter_map(|l| l.record.kappa).collect();
        let kappa = (!kappas.is_empty()).then(|| KappaStats {
            min: kappas.iter().copied().fold(f64::INFINITY, f64::min),
            mean: kappas.iter().sum::<f64>() / kappas.len() as f64,
            limited_steps: kappas.iter().filter(|k| **k < 1.0).count(),
        });
        let mut active_rows = BTreeMap::new();
        if let Some((origins, cons)) = rows {
            for l in &result.governor_log {
                for &i in &l.record.active {
                    *active_rows.entry(row_label(origins, cons, i)).or_insert(0) += 1;
                }
            }
        }
        let kkt = result.governor_log.iter().any(|l| l.record.kkt_residual.is_some()).then(|| result.max_kkt_residual());
        Self {
            steps: result.governor_log.len(),
            constraints: result
                .violations
                .iter()
                .map(|v| ConstraintSummary { label: v.label.clone(), max_violation: v.max_violation, steps_violated: v.steps_violated })
                .collect(),
            flags,
            kappa,
            active_rows,
            max_kkt_residual: kkt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub time: f64,
    pub step: usize,
    pub state: Vec<f64>,
    pub applied: [f64; 2],
    /// `None` when the slice was empty.
    pub path: Option<String>,
    pub area: Option<f64>,
}

/// Everything needed to repeat a run: the resolved config (including the
/// gains actually used), the expanded trajectory and schedule, and hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub config: ScenarioConfig,
    pub trajectory: ReferenceTrajectory,
    pub schedule: ConstraintSchedule,
    pub gains: LoopGains,
    pub model_hash: Option<String>,
    pub initial_constraint_hash: Option<String>,
    pub moas_warnings: Vec<String>,
    pub summary: RunSummary,
    pub slices: Vec<SliceEntry>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Paths of a written run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub trace_csv: PathBuf,
    pub governor_csv: PathBuf,
    pub model_json: Option<PathBuf>,
    pub moas_slices: Vec<PathBuf>,
    pub manifest_json: PathBuf,
}

pub const TRACE_FILE: &str = "trace.csv";
pub const GOVERNOR_FILE: &str = "governor.csv";
pub const MODEL_FILE: &str = "model.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn slice_file_name(time: f64) -> String {
    format!("slice_t{}.csv", format!("{time}").replace('.', "p"))
}

/// Write the artifacts of `result` into `dir` (created if needed).
pub fn write_run(dir: &Path, result: &RunResult) -> Result<(RunArtifacts, RunManifest)> {
    let set = result.initial_set.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut record = |name: &str| -> Result<PathBuf> {
        let path = dir.join(name);
        entries.push(ArtifactEntry { path: name.to_string(), sha256: sha256_file(&path)? });
        Ok(path)
    };

    write_trace_file(&dir.join(TRACE_FILE), &result.trace)?;
    let trace_csv = record(TRACE_FILE)?;
    write_governor_log(BufWriter::new(File::create(dir.join(GOVERNOR_FILE))?), &result.governor_log)?;
    let governor_csv = record(GOVERNOR_FILE)?;
    let model_json = match &result.model {
        Some(m) => {
            write_json(&dir.join(MODEL_FILE), m)?;
            Some(record(MODEL_FILE)?)
        }
        None => None,
    };
    let mut moas_slices = Vec::new();
    let mut slices = Vec::new();
    for s in &result.slices {
        let (path, area) = match &s.polygon {
            Ok(p) => {
                let name = slice_file_name(s.time);
                write_slice(BufWriter::new(File::create(dir.join(&name))?), p)?;
                moas_slices.push(record(&name)?);
                (Some(name), Some(p.area()))
            }
            Err(_) => (None, None),
        };
        slices.push(SliceEntry { time: s.time, step: s.step, state: s.state.clone(), applied: s.applied, path, area });
    }

    let mut config = result.config.clone();
    config.gains = Some(result.gains);
    let origins = set.map(|s| s.origins());
    let summary = RunSummary::new(result, origins.as_deref().zip(set.map(|s| s.constraints())));
    let manifest = RunManifest {
        tool: format!("saltgov {}", env!("CARGO_PKG_VERSION")),
        trajectory: result.config.trajectory.build()?,
        schedule: result.config.schedule(),
        config,
        gains: result.gains,
        model_hash: result.model.as_ref().map(model_hash),
        initial_constraint_hash: set.map(|s| s.provenance.constraint_hash.clone()),
        moas_warnings: result.moas_warnings.clone(),
        summary,
        slices,
        artifacts: entries,
    };
    let manifest_json = dir.join(MANIFEST_FILE);
    write_json(&manifest_json, &manifest)?;
    Ok((RunArtifacts { trace_csv, governor_csv, model_json, moas_slices, manifest_json }, manifest))
}
