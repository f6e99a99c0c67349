//! Dynamic Mode Decomposition with Control.
//!
//! Snapshots are grouped as `Ω = [X_{0..L-1}; U]` and `X' = X_{1..L}` (all in
//! deviation coordinates about a reference point), and `[A B] = X' Ω⁺` is
//! formed from the truncated SVD of `Ω`. The output map `C` is a least-squares
//! fit `Y ≈ C X`; `D` is identically zero.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Condition number above which identification reports a warning.
pub const ILL_CONDITIONED: f64 = 1e12;

/// Named, uniformly sampled signals; one column per signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTable {
    pub time: Vec<f64>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl SignalTable {
    pub fn new(time: Vec<f64>, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Dimension(format!("{} names for {} columns", names.len(), columns.len())));
        }
        if let Some((name, col)) = names.iter().zip(&columns).find(|(_, c)| c.len() != time.len()) {
            return Err(Error::Dimension(format!("column {name} has {} rows, expected {}", col.len(), time.len())));
        }
        Ok(Self { time, names, columns })
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    fn require(&self, names: &[String]) -> Result<Vec<&[f64]>> {
        let missing: Vec<String> = names.iter().filter(|n| self.column(n).is_none()).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingColumns(missing));
        }
        Ok(names.iter().map(|n| self.column(n).unwrap()).collect())
    }
}

/// Operating point subtracted before identification, aligned with the names
/// of the log or model it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub states: Vec<f64>,
    pub inputs: Vec<f64>,
    pub outputs: Vec<f64>,
}

/// Time-aligned states `X` (n × (L+1)), inputs `U` (m × L) and outputs
/// `Y` (p × (L+1)), stored in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotLog {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub reference: ReferencePoint,
}

fn rows_from(columns: &[&[f64]], len: usize) -> DMatrix<f64> {
    DMatrix::from_fn(columns.len(), len, |i, k| columns[i][k])
}

impl SnapshotLog {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        times: Vec<f64>,
        states: DMatrix<f64>,
        inputs: DMatrix<f64>,
        outputs: DMatrix<f64>,
        state_names: Vec<String>,
        input_names: Vec<String>,
        output_names: Vec<String>,
        reference: ReferencePoint,
    ) -> Result<Self> {
        let snaps = times.len();
        if snaps < 2 {
            return Err(Error::InsufficientData(format!("{snaps} snapshots")));
        }
        if states.ncols() != snaps || outputs.ncols() != snaps || inputs.ncols() + 1 != snaps {
            return Err(Error::Dimension(format!(
                "{snaps} instants but X has {} columns, U {} and Y {}",
                states.ncols(),
                inputs.ncols(),
                outputs.ncols()
            )));
        }
        if states.nrows() != state_names.len() || inputs.nrows() != input_names.len() || outputs.nrows() != output_names.len() {
            return Err(Error::Dimension("row labels do not match matrix rows".into()));
        }
        if reference.states.len() != states.nrows() || reference.inputs.len() != inputs.nrows() || reference.outputs.len() != outputs.nrows() {
            return Err(Error::Dimension("reference point does not match the log".into()));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() >= 1e-9) {
            return Err(Error::Invalid("snapshot times are not uniformly sampled".into()));
        }
        Ok(Self {
            times,
            states,
            inputs,
            outputs,
            state_names,
            input_names,
            output_names,
            reference,
        })
    }

    /// Bind log rows to table columns by name. The last row's inputs are
    /// dropped, giving `u_0 … u_{L-1}`.
    pub fn from_table(
        table: &SignalTable,
        state_names: &[String],
        input_names: &[String],
        output_names: &[String],
        reference: &HashMap<String, f64>,
    ) -> Result<Self> {
        let mut wanted: Vec<String> = state_names.to_vec();
        wanted.extend(input_names.iter().cloned());
        wanted.extend(output_names.iter().cloned());
        table.require(&wanted)?;
        let missing: Vec<String> = wanted.iter().filter(|n| !reference.contains_key(*n)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::Invalid(format!("no reference value for {missing:?}")));
        }
        let snaps = table.len();
        if snaps < 2 {
            return Err(Error::InsufficientData(format!("{snaps} rows")));
        }
        let pick = |names: &[String]| table.require(names).map(|cols| rows_from(&cols, snaps));
        let states = pick(state_names)?;
        let inputs = pick(input_names)?.columns(0, snaps - 1).into_owned();
        let outputs = pick(output_names)?;
        let lookup = |names: &[String]| names.iter().map(|n| reference[n]).collect::<Vec<_>>();
        Self::new(
            table.time.clone(),
            states,
            inputs,
            outputs,
            state_names.to_vec(),
            input_names.to_vec(),
            output_names.to_vec(),
            ReferencePoint {
                states: lookup(state_names),
                inputs: lookup(input_names),
                outputs: lookup(output_names),
            },
        )
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// Number of transitions `L`.
    pub fn transitions(&self) -> usize {
        self.inputs.ncols()
    }

    fn centered(m: &DMatrix<f64>, offsets: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| m[(i, k)] - offsets[i])
    }

    pub fn state_deviations(&self) -> DMatrix<f64> {
        Self::centered(&self.states, &self.reference.states)
    }

    pub fn input_deviations(&self) -> DMatrix<f64> {
        Self::centered(&self.inputs, &self.reference.inputs)
    }

    pub fn output_deviations(&self) -> DMatrix<f64> {
        Self::centered(&self.outputs, &self.reference.outputs)
    }

    /// Sub-log over instants `first..=last`.
    pub fn segment(&self, first: usize, last: usize) -> Result<Self> {
        if last <= first || last >= self.times.len() {
            return Err(Error::Invalid(format!("bad segment {first}..={last}")));
        }
        let cols = last - first + 1;
        Self::new(
            self.times[first..=last].to_vec(),
            self.states.columns(first, cols).into_owned(),
            self.inputs.columns(first, cols - 1).into_owned(),
            self.outputs.columns(first, cols).into_owned(),
            self.state_names.clone(),
            self.input_names.clone(),
            self.output_names.clone(),
            self.reference.clone(),
        )
    }

    /// Same log restricted to the named state rows, in the given order.
    pub fn with_states(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.state_names
                    .iter()
                    .position(|s| s == n)
                    .ok_or_else(|| Error::MissingColumns(vec![n.clone()]))
            })
            .collect::<Result<Vec<_>>>()?;
        let states = DMatrix::from_fn(idx.len(), self.states.ncols(), |i, k| self.states[(idx[i], k)]);
        let reference = ReferencePoint {
            states: idx.iter().map(|&i| self.reference.states[i]).collect(),
            ..self.reference.clone()
        };
        Self::new(
            self.times.clone(),
            states,
            self.inputs.clone(),
            self.outputs.clone(),
            names.to_vec(),
            self.input_names.clone(),
            self.output_names.clone(),
            reference,
        )
    }
}

/// Discrete-time `x⁺ = A x + B u`, `y = C x + D u` in deviation coordinates.
///
/// Serialized with row-major nested matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelFile", try_from = "ModelFile")]
pub struct LtiModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub dt: f64,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub reference: ReferencePoint,
}

/// On-disk layout of [`LtiModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub dt: f64,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub reference_point: ReferencePoint,
}

/// Row-major nested vectors.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Inverse of [`to_rows`]; `cols` is needed when there are no rows.
pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension(format!("ragged matrix, expected {cols} columns")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl From<LtiModel> for ModelFile {
    fn from(m: LtiModel) -> Self {
        Self {
            a: to_rows(&m.a),
            b: to_rows(&m.b),
            c: to_rows(&m.c),
            d: to_rows(&m.d),
            dt: m.dt,
            state_names: m.state_names,
            input_names: m.input_names,
            output_names: m.output_names,
            reference_point: m.reference,
        }
    }
}

impl TryFrom<ModelFile> for LtiModel {
    type Error = Error;
    fn try_from(f: ModelFile) -> Result<Self> {
        let (n, m) = (f.state_names.len(), f.input_names.len());
        let a = from_rows(&f.a, n)?;
        let b = from_rows(&f.b, m)?;
        let c = from_rows(&f.c, n)?;
        let d = from_rows(&f.d, m)?;
        if d.nrows() != c.nrows() || d.iter().any(|v| *v != 0.0) {
            return Err(Error::Schema("model feedthrough d must be an all-zero matrix".into()));
        }
        LtiModel::new(a, b, c, f.dt, f.state_names, f.input_names, f.output_names, f.reference_point)
    }
}

impl LtiModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        dt: f64,
        state_names: Vec<String>,
        input_names: Vec<String>,
        output_names: Vec<String>,
        reference: ReferencePoint,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(Error::Dimension(format!(
                "A {}x{}, B {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        if state_names.len() != n || input_names.len() != b.ncols() || output_names.len() != c.nrows() {
            return Err(Error::Dimension("labels do not match model dimensions".into()));
        }
        if reference.states.len() != n || reference.inputs.len() != b.ncols() || reference.outputs.len() != c.nrows() {
            return Err(Error::Dimension("reference point does not match model dimensions".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
        }
        let d = DMatrix::zeros(c.nrows(), b.ncols());
        Ok(Self {
            a,
            b,
            c,
            d,
            dt,
            state_names,
            input_names,
            output_names,
            reference,
        })
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.n_states() == 0 {
            return 0.0;
        }
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `C (I - A)⁻¹ B`, the DC gain from inputs to outputs.
    pub fn steady_state_gain(&self) -> Result<DMatrix<f64>> {
        let n = self.n_states();
        let lu = (DMatrix::identity(n, n) - &self.a).lu();
        let x = lu.solve(&self.b).ok_or(Error::Unstable(1.0))?;
        Ok(&self.c * x)
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.output_names.iter().position(|n| n == name)
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|n| n == name)
    }

    /// Physical state vector -> deviation coordinates.
    pub fn state_deviation(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().zip(&self.reference.states).map(|(v, r)| v - r))
    }

    pub fn input_deviation(&self, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().zip(&self.reference.inputs).map(|(v, r)| v - r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankTruncation {
    /// Keep singular values with `σ_i / σ_1` above the threshold.
    Relative(f64),
    /// Keep exactly this many directions.
    Fixed(usize),
}

impl Default for RankTruncation {
    fn default() -> Self {
        RankTruncation::Relative(1e-8)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DmdcOptions {
    pub rank: RankTruncation,
    /// Optional reduced state rank from the SVD of `X'`.
    pub output_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmdcDiagnostics {
    pub singular_values: Vec<f64>,
    pub retained_rank: usize,
    pub condition_number: f64,
    /// `‖X' − [A B] Ω‖_F`
    pub residual: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub model: LtiModel,
    pub diagnostics: DmdcDiagnostics,
}

/// Truncated pseudo-inverse from a sorted SVD.
fn truncated_pinv(m: &DMatrix<f64>, rank: RankTruncation) -> Result<(DMatrix<f64>, Vec<f64>, usize)> {
    let svd = m.clone().svd(true, true);
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let top = sigma.first().copied().unwrap_or(0.0);
    let nonzero = sigma.iter().filter(|s| **s > top * 1e-14 && **s > 0.0).count();
    let keep = match rank {
        RankTruncation::Relative(tol) => sigma.iter().filter(|s| **s > top * tol && **s > 0.0).count(),
        RankTruncation::Fixed(r) => {
            if nonzero < r {
                return Err(Error::RankDeficient { retained: nonzero, requested: r });
            }
            r
        }
    };
    if keep == 0 {
        return Err(Error::RankDeficient { retained: 0, requested: 1 });
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut pinv = DMatrix::zeros(m.ncols(), m.nrows());
    for i in 0..keep {
        pinv += (v_t.row(i).transpose() / sigma[i]) * u.column(i).transpose();
    }
    Ok((pinv, sigma, keep))
}

/// Identify `(A, B, C)` from a snapshot log.
pub fn identify_dmdc(log: &SnapshotLog, options: &DmdcOptions) -> Result<Identification> {
    let n = log.state_names.len();
    let m = log.input_names.len();
    let l = log.transitions();
    if l < n + m {
        return Err(Error::InsufficientData(format!("{l} transitions for {n} states and {m} inputs")));
    }
    let x = log.state_deviations();
    let u = log.input_deviations();
    let mut omega = DMatrix::zeros(n + m, l);
    omega.view_mut((0, 0), (n, l)).copy_from(&x.columns(0, l));
    omega.view_mut((n, 0), (m, l)).copy_from(&u);
    let x_next = x.columns(1, l).into_owned();

    let (omega_pinv, sigma, keep) = truncated_pinv(&omega, options.rank)?;
    let g = &x_next * omega_pinv;
    let mut a = g.columns(0, n).into_owned();
    let mut b = g.columns(n, m).into_owned();

    let mut warnings = Vec::new();
    let condition_number = sigma[0] / sigma[keep - 1];
    if condition_number > ILL_CONDITIONED {
        warnings.push(format!("retained singular values have condition number {condition_number:.3e}"));
    }

    if let Some(r) = options.output_rank.filter(|r| *r < n) {
        let svd = x_next.clone().svd(true, false);
        let basis = svd.u.as_ref().expect("u requested").columns(0, r).into_owned();
        let projector = &basis * basis.transpose();
        a = &projector * a * &projector;
        b = &projector * b;
    }
    let residual = (&x_next - &a * x.columns(0, l) - &b * &u).norm();

    let y = log.output_deviations();
    let (x_pinv, _, _) = truncated_pinv(&x, RankTruncation::Relative(1e-12))?;
    let mut c = &y * x_pinv;
    for (row, out) in log.output_names.iter().enumerate() {
        if let Some(col) = log.state_names.iter().position(|s| s == out) {
            c.row_mut(row).fill(0.0);
            c[(row, col)] = 1.0;
        }
    }

    let model = LtiModel::new(
        a,
        b,
        c,
        log.dt(),
        log.state_names.clone(),
        log.input_names.clone(),
        log.output_names.clone(),
        log.reference.clone(),
    )?;
    Ok(Identification {
        model,
        diagnostics: DmdcDiagnostics {
            singular_values: sigma,
            retained_rank: keep,
            condition_number,
            residual,
            warnings,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// n × (L+1), physical units.
    pub states: DMatrix<f64>,
    /// p × (L+1), physical units.
    pub outputs: DMatrix<f64>,
}

/// Iterate the model from a physical initial state under physical inputs
/// (m × L). Returned trajectories are in physical units.
pub fn simulate_model(model: &LtiModel, x0: &[f64], inputs: &DMatrix<f64>) -> Result<Simulation> {
    let n = model.n_states();
    if x0.len() != n || inputs.nrows() != model.n_inputs() {
        return Err(Error::Dimension(format!(
            "model has {n} states and {} inputs, got x0 of length {} and {} input rows",
            model.n_inputs(),
            x0.len(),
            inputs.nrows()
        )));
    }
    let steps = inputs.ncols();
    let mut states = DMatrix::zeros(n, steps + 1);
    let mut outputs = DMatrix::zeros(model.n_outputs(), steps + 1);
    let mut x = model.state_deviation(x0);
    for k in 0..=steps {
        states.set_column(k, &x);
        outputs.set_column(k, &(&model.c * &x));
        if k < steps {
            let u: Vec<f64> = inputs.column(k).iter().copied().collect();
            x = &model.a * &x + &model.b * model.input_deviation(&u);
        }
    }
    for (i, r) in model.reference.states.iter().enumerate() {
        states.row_mut(i).add_scalar_mut(*r);
    }
    for (i, r) in model.reference.outputs.iter().enumerate() {
        outputs.row_mut(i).add_scalar_mut(*r);
    }
    Ok(Simulation { states, outputs })
}

/// Per-row MSE divided by the variance of the truth row. Rows with
/// (numerically) zero variance report the raw MSE.
pub fn normalized_mse(predicted: &DMatrix<f64>, truth: &DMatrix<f64>) -> Vec<f64> {
    (0..truth.nrows())
        .map(|i| {
            let t = truth.row(i);
            let p = predicted.row(i);
            let n = t.len() as f64;
            let mse = t.iter().zip(p.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
            let mean = t.iter().sum::<f64>() / n;
            let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let floor = 1e-12 * (1.0 + mean * mean);
            let score = if var > floor { mse / var } else { mse };
            if score.is_finite() {
                score
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// Open-loop replay of `log` through `model`: per-output normalized MSE.
/// The model's state set must be available in the log.
pub fn replay_nmse(model: &LtiModel, log: &SnapshotLog) -> Result<Vec<f64>> {
    let log = log.with_states(&model.state_names)?;
    if log.output_names != model.output_names || log.input_names != model.input_names {
        return Err(Error::Dimension("log and model disagree on inputs/outputs".into()));
    }
    let x0: Vec<f64> = log.states.column(0).iter().copied().collect();
    let sim = simulate_model(model, &x0, &log.inputs)?;
    Ok(normalized_mse(&sim.outputs, &log.outputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    /// Leading fraction of the log used for identification.
    pub train_fraction: f64,
    /// Stop once the best candidate improves the objective by less than this fraction.
    pub min_relative_improvement: f64,
    pub dmdc: DmdcOptions,
    /// Additional subsets scored and reported alongside the greedy path.
    pub reference_subsets: Vec<Vec<String>>,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            min_relative_improvement: 0.01,
            dmdc: DmdcOptions::default(),
            reference_subsets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub states: Vec<String>,
    /// Mean over outputs of the validation normalized MSE.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRound {
    pub added: String,
    pub objective: f64,
    pub evaluated: Vec<SubsetScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub selected: Vec<String>,
    pub objective: f64,
    pub rounds: Vec<SelectionRound>,
    pub full_set: SubsetScore,
    pub reference_subsets: Vec<SubsetScore>,
}

/// Validation objective of a state subset: identify on the leading part of
/// the log, replay the trailing part open loop.
pub fn subset_objective(log: &SnapshotLog, states: &[String], options: &SelectionOptions) -> Result<f64> {
    let snaps = log.times.len();
    let split = ((snaps as f64) * options.train_fraction).floor() as usize;
    if split < 2 || split + 2 > snaps {
        return Err(Error::InsufficientData(format!("cannot split {snaps} snapshots at {split}")));
    }
    let sub = log.with_states(states)?;
    let validation = sub.segment(split - 1, snaps - 1)?;
    let scores = if states.is_empty() {
        // No states: the prediction is the reference point itself.
        let zero = DMatrix::from_fn(validation.outputs.nrows(), validation.outputs.ncols(), |i, _| validation.reference.outputs[i]);
        normalized_mse(&zero, &validation.outputs)
    } else {
        let train = sub.segment(0, split - 1)?;
        match identify_dmdc(&train, &options.dmdc) {
            Ok(id) => replay_nmse(&id.model, &validation)?,
            Err(Error::RankDeficient { .. }) | Err(Error::InsufficientData(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    };
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(if mean.is_finite() { mean } else { f64::INFINITY })
}

/// Greedy forward selection of model states among `candidates`.
///
/// Each round adds the candidate that minimises the validation objective;
/// ties go to the earlier candidate. Selection stops when the best addition
/// improves the objective by less than `min_relative_improvement`.
pub fn select_states(log: &SnapshotLog, candidates: &[String], options: &SelectionOptions) -> Result<SelectionReport> {
    log.with_states(candidates)?;
    let mut selected: Vec<String> = Vec::new();
    let mut current = subset_objective(log, &selected, options)?;
    let mut rounds = Vec::new();
    loop {
        let remaining: Vec<&String> = candidates.iter().filter(|c| !selected.contains(c)).collect();
        if remaining.is_empty() {
            break;
        }
        let mut evaluated = Vec::with_capacity(remaining.len());
        let mut best: Option<(usize, f64)> = None;
        for (i, cand) in remaining.iter().enumerate() {
            let mut trial = selected.clone();
            trial.push((*cand).clone());
            let objective = subset_objective(log, &trial, options)?;
            if best.map_or(true, |(_, b)| objective < b) {
                best = Some((i, objective));
            }
            evaluated.push(SubsetScore { states: trial, objective });
        }
        let (idx, objective) = best.expect("at least one candidate");
        let improved = current.is_infinite() && objective.is_finite() || objective < current * (1.0 - options.min_relative_improvement);
        if !improved {
            break;
        }
        selected.push(remaining[idx].clone());
        current = objective;
        rounds.push(SelectionRound {
            added: remaining[idx].clone(),
            objective,
            evaluated,
        });
    }
    let full_set = SubsetScore {
        states: candidates.to_vec(),
        objective: subset_objective(log, candidates, options)?,
    };
    let reference_subsets = options
        .reference_subsets
        .iter()
        .map(|s| subset_objective(log, s, options).map(|objective| SubsetScore { states: s.clone(), objective }))
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionReport {
        selected,
        objective: current,
        rounds,
        full_set,
        reference_subsets,
    })
}
