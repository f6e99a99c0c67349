//! Finite-horizon maximal output admissible sets.
//!
//! For a model `x⁺ = A x + B ṽ`, `y = C x` held at a constant command `ṽ`,
//! the predicted output after `k` steps is `C A^k x + C S_k B ṽ` with
//! `S_k = Σ_{j<k} A^j`. Every constraint row `g·y ≤ b` therefore yields one
//! linear inequality per `k = 0..=T` in `(x, ṽ)`, plus a steady-state row
//! `g C (I-A)⁻¹ B ṽ ≤ b − ε·scale` that stands in for the tail `k > T`.
//!
//! All vectors handled here are in deviation coordinates of the model.

use std::sync::Arc;

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dmdc::LtiModel;
use crate::{Error, Result};

/// Closed-set convention: a point is a member when its margin is at least `-BOUNDARY_TOL`.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// One output inequality `coeff · y ≤ bound` in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConstraint {
    pub coeff: Vec<f64>,
    pub bound: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConstraintSet {
    pub output_names: Vec<String>,
    pub rows: Vec<OutputConstraint>,
}

impl OutputConstraintSet {
    pub fn new(output_names: Vec<String>) -> Self {
        Self { output_names, rows: Vec::new() }
    }

    fn unit(&self, output: &str, sign: f64) -> Result<Vec<f64>> {
        let idx = self
            .output_names
            .iter()
            .position(|n| n == output)
            .ok_or_else(|| Error::Invalid(format!("unknown output {output}")))?;
        let mut coeff = vec![0.0; self.output_names.len()];
        coeff[idx] = sign;
        Ok(coeff)
    }

    /// `output ≤ bound`
    pub fn upper(mut self, output: &str, bound: f64) -> Result<Self> {
        let coeff = self.unit(output, 1.0)?;
        self.rows.push(OutputConstraint { coeff, bound, label: format!("{output} <= max") });
        Ok(self)
    }

    /// `output ≥ bound`, stored as `-output ≤ -bound`.
    pub fn lower(mut self, output: &str, bound: f64) -> Result<Self> {
        let coeff = self.unit(output, -1.0)?;
        self.rows.push(OutputConstraint { coeff, bound: -bound, label: format!("{output} >= min") });
        Ok(self)
    }

    /// Replace the bound of the row with `label`, keeping its sense.
    pub fn with_bound(mut self, label: &str, physical_bound: f64) -> Result<Self> {
        let row = self
            .rows
            .iter_mut()
            .find(|r| r.label == label)
            .ok_or_else(|| Error::Invalid(format!("no constraint labelled {label}")))?;
        let sign = row.coeff.iter().copied().find(|c| *c != 0.0).unwrap_or(1.0).signum();
        row.bound = sign * physical_bound;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Invalid("constraint set has no rows".into()));
        }
        for row in &self.rows {
            if row.coeff.len() != self.output_names.len() {
                return Err(Error::Dimension(format!("constraint {} has {} coefficients", row.label, row.coeff.len())));
            }
            if row.coeff.iter().all(|c| *c == 0.0) {
                return Err(Error::Invalid(format!("constraint {} has only zero coefficients", row.label)));
            }
            if !row.bound.is_finite() {
                return Err(Error::Invalid(format!("constraint {} has a non-finite bound", row.label)));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.output_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        for row in &self.rows {
            for c in &row.coeff {
                h.update(c.to_le_bytes());
            }
            h.update(row.bound.to_le_bytes());
            h.update(row.label.as_bytes());
        }
        hex(&h.finalize()[..8])
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.output_names == other.output_names
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.coeff == b.coeff)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable fingerprint of a model's matrices, dt and reference point.
pub fn model_fingerprint(model: &LtiModel) -> String {
    let mut h = Sha256::new();
    for m in [&model.a, &model.b, &model.c, &model.d] {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                h.update(m[(i, j)].to_le_bytes());
            }
        }
    }
    h.update(model.dt.to_le_bytes());
    for v in model.reference.states.iter().chain(&model.reference.inputs).chain(&model.reference.outputs) {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize()[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoasOptions {
    pub horizon: usize,
    pub epsilon: f64,
    /// Drop rows implied by the others (one LP per row).
    pub prune: bool,
    /// Solve one LP per constraint to see whether the `k = T` row still matters.
    pub check_determinedness: bool,
    /// Bound movement (output units) that triggers re-pruning on rebuild.
    pub reprune_threshold: f64,
}

impl Default for MoasOptions {
    fn default() -> Self {
        Self {
            horizon: 1500,
            epsilon: 1e-3,
            prune: false,
            check_determinedness: true,
            reprune_threshold: 0.0,
        }
    }
}

/// Where a polytope row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowOrigin {
    pub constraint: usize,
    /// Prediction step, `None` for the tightened steady-state row.
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_hash: String,
    pub constraint_hash: String,
    /// Outer-loop step at which the bounds were last set, if known.
    pub time_index: Option<usize>,
}

/// Rows shared, unchanged, by every rebuild of the same set.
#[derive(Debug, PartialEq)]
struct RowBank {
    h_x: DMatrix<f64>,
    h_v: DMatrix<f64>,
    origin: Vec<RowOrigin>,
    /// `g · y_ref` per constraint.
    offsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleSet {
    bank: Arc<RowBank>,
    /// Rows of `bank` in use (after pruning and dropping trivially true rows).
    active: Arc<Vec<usize>>,
    h_x: Arc<DMatrix<f64>>,
    h_v: Arc<DMatrix<f64>>,
    h: DVector<f64>,
    bank_h: DVector<f64>,
    constraints: OutputConstraintSet,
    /// Bounds at the last pruning pass.
    pruned_bounds: Vec<f64>,
    pub horizon: usize,
    pub epsilon: f64,
    pub options: MoasOptions,
    pub provenance: Provenance,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub member: bool,
    /// `min(h − H_x x − H_v ṽ)` over active rows.
    pub margin: f64,
}

fn row_bounds(bank: &RowBank, constraints: &OutputConstraintSet, epsilon: f64) -> DVector<f64> {
    row_bounds_with(bank, epsilon, |j, _| constraints.rows[j].bound)
}

fn row_bounds_with(bank: &RowBank, epsilon: f64, bound: impl Fn(usize, Option<usize>) -> f64) -> DVector<f64> {
    DVector::from_iterator(
        bank.origin.len(),
        bank.origin.iter().map(|o| {
            let dev = bound(o.constraint, o.step) - bank.offsets[o.constraint];
            match o.step {
                Some(_) => dev,
                None => dev - epsilon * dev.abs().max(1.0),
            }
        }),
    )
}

fn is_zero_row(bank: &RowBank, i: usize) -> bool {
    bank.h_x.row(i).iter().chain(bank.h_v.row(i).iter()).all(|c| c.abs() <= 1e-300)
}

/// LP: max `row_i · z` over the polytope formed by `rows` (excluding `i`),
/// with `row_i · z ≤ h_i + 1` added to keep the problem bounded.
///
/// Rows are scaled to unit norm. A failed LP counts as "not redundant", which
/// only ever keeps a row that could have been dropped.
fn row_is_redundant(a: &DMatrix<f64>, h: &DVector<f64>, rows: &[usize], i: usize) -> bool {
    let norm = |r: usize| a.row(r).norm();
    let ni = norm(i);
    if ni == 0.0 {
        return h[i] >= 0.0;
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    // Free variables are split into nonnegative parts; microlp can stall on free columns.
    let vars: Vec<_> = (0..a.ncols())
        .map(|j| (lp.add_var(a[(i, j)] / ni, (0.0, f64::INFINITY)), lp.add_var(-a[(i, j)] / ni, (0.0, f64::INFINITY))))
        .collect();
    let expr = |r: usize, scale: f64| -> Vec<(microlp::Variable, f64)> {
        vars.iter()
            .enumerate()
            .flat_map(|(j, (p, m))| [(*p, a[(r, j)] / scale), (*m, -a[(r, j)] / scale)])
            .collect()
    };
    for &r in rows.iter().filter(|&&r| r != i) {
        let nr = norm(r);
        if nr > 0.0 {
            lp.add_constraint(expr(r, nr), ComparisonOp::Le, h[r] / nr);
        } else if h[r] < 0.0 {
            return true;
        }
    }
    let hi = h[i] / ni;
    lp.add_constraint(expr(i, ni), ComparisonOp::Le, hi + 1.0);
    match lp.solve() {
        Ok(sol) => sol.objective() <= hi + 1e-9 * (1.0 + hi.abs()),
        // An empty polytope implies every row.
        Err(microlp::Error::Infeasible) => true,
        Err(_) => false,
    }
}

impl AdmissibleSet {
    pub fn h_x(&self) -> &DMatrix<f64> {
        &self.h_x
    }

    pub fn h_v(&self) -> &DMatrix<f64> {
        &self.h_v
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn n_rows(&self) -> usize {
        self.active.len()
    }

    pub fn n_states(&self) -> usize {
        self.bank.h_x.ncols()
    }

    pub fn n_inputs(&self) -> usize {
        self.bank.h_v.ncols()
    }

    pub fn constraints(&self) -> &OutputConstraintSet {
        &self.constraints
    }

    /// Origin of each active row.
    pub fn origins(&self) -> Vec<RowOrigin> {
        self.active.iter().map(|&i| self.bank.origin[i]).collect()
    }

    fn combined(&self) -> DMatrix<f64> {
        let (rows, n, m) = (self.bank.origin.len(), self.n_states(), self.n_inputs());
        let mut a = DMatrix::zeros(rows, n + m);
        a.view_mut((0, 0), (rows, n)).copy_from(&self.bank.h_x);
        a.view_mut((0, n), (rows, m)).copy_from(&self.bank.h_v);
        a
    }

    fn materialize(bank: &RowBank, active: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(active.len(), m.ncols(), |r, c| m[(active[r], c)]);
        (pick(&bank.h_x), pick(&bank.h_v))
    }

    /// Active rows after dropping trivially satisfied zero rows and, if
    /// enabled, rows implied by the rest.
    fn select_rows(bank: &RowBank, bank_h: &DVector<f64>, combined: Option<&DMatrix<f64>>) -> Result<Vec<usize>> {
        let mut active: Vec<usize> = (0..bank.origin.len()).filter(|&i| !(is_zero_row(bank, i) && bank_h[i] >= 0.0)).collect();
        if let Some(a) = combined {
            let mut i = 0;
            while i < active.len() {
                let row = active[i];
                if active.len() > 1 && row_is_redundant(a, bank_h, &active, row) {
                    active.remove(i);
                } else {
                    i += 1;
                }
            }
        }
        Ok(active)
    }

    fn with_bank(bank: Arc<RowBank>, constraints: OutputConstraintSet, options: MoasOptions, provenance: Provenance) -> Result<Self> {
        let bank_h = row_bounds(&bank, &constraints, options.epsilon);
        let mut set = Self {
            active: Arc::new(Vec::new()),
            h_x: Arc::new(DMatrix::zeros(0, bank.h_x.ncols())),
            h_v: Arc::new(DMatrix::zeros(0, bank.h_v.ncols())),
            h: DVector::zeros(0),
            bank_h,
            pruned_bounds: constraints.rows.iter().map(|r| r.bound).collect(),
            constraints,
            horizon: options.horizon,
            epsilon: options.epsilon,
            options,
            provenance,
            warnings: Vec::new(),
            bank,
        };
        set.reselect()?;
        Ok(set)
    }

    fn reselect(&mut self) -> Result<()> {
        let combined = self.options.prune.then(|| self.combined());
        let active = Self::select_rows(&self.bank, &self.bank_h, combined.as_ref())?;
        let (h_x, h_v) = Self::materialize(&self.bank, &active);
        self.h = DVector::from_iterator(active.len(), active.iter().map(|&i| self.bank_h[i]));
        self.h_x = Arc::new(h_x);
        self.h_v = Arc::new(h_v);
        self.active = Arc::new(active);
        self.pruned_bounds = self.constraints.rows.iter().map(|r| r.bound).collect();
        Ok(())
    }
}

/// Build the finite-horizon admissible set of `model` under `constraints`.
pub fn build_moas(model: &LtiModel, constraints: &OutputConstraintSet, options: &MoasOptions) -> Result<AdmissibleSet> {
    constraints.validate()?;
    if constraints.output_names != model.output_names {
        return Err(Error::Dimension(format!(
            "constraints are over {:?}, model outputs are {:?}",
            constraints.output_names, model.output_names
        )));
    }
    if !(options.epsilon > 0.0 && options.epsilon <= 0.1) {
        return Err(Error::Invalid(format!("epsilon must lie in (0, 0.1], got {}", options.epsilon)));
    }
    if model.d.iter().any(|v| *v != 0.0) {
        return Err(Error::Invalid("feedthrough D must be zero".into()));
    }
    let rho = model.spectral_radius();
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    let (n, m) = (model.n_states(), model.n_inputs());
    let t = options.horizon;
    let n_con = constraints.rows.len();
    let rows = n_con * (t + 2);
    let gc: Vec<DMatrix<f64>> = constraints
        .rows
        .iter()
        .map(|r| DMatrix::from_row_slice(1, r.coeff.len(), &r.coeff) * &model.c)
        .collect();
    let offsets: Vec<f64> = constraints
        .rows
        .iter()
        .map(|r| r.coeff.iter().zip(&model.reference.outputs).map(|(g, y)| g * y).sum())
        .collect();

    let mut h_x = DMatrix::zeros(rows, n);
    let mut h_v = DMatrix::zeros(rows, m);
    let mut origin = Vec::with_capacity(rows);
    let mut a_pow = DMatrix::<f64>::identity(n, n);
    let mut s_b = DMatrix::<f64>::zeros(n, m);
    for k in 0..=t {
        for (j, g) in gc.iter().enumerate() {
            let r = origin.len();
            h_x.row_mut(r).copy_from(&(g * &a_pow));
            h_v.row_mut(r).copy_from(&(g * &s_b));
            origin.push(RowOrigin { constraint: j, step: Some(k) });
        }
        s_b += &a_pow * &model.b;
        a_pow = &model.a * a_pow;
    }
    let dc = (DMatrix::identity(n, n) - &model.a)
        .lu()
        .solve(&model.b)
        .ok_or(Error::Unstable(rho))?;
    for (j, g) in gc.iter().enumerate() {
        let r = origin.len();
        h_v.row_mut(r).copy_from(&(g * &dc));
        origin.push(RowOrigin { constraint: j, step: None });
    }

    let bank = Arc::new(RowBank { h_x, h_v, origin, offsets });
    let provenance = Provenance {
        model_hash: model_fingerprint(model),
        constraint_hash: constraints.fingerprint(),
        time_index: None,
    };
    let mut set = AdmissibleSet::with_bank(bank, constraints.clone(), *options, provenance)?;
    if options.check_determinedness {
        set.warnings = determinedness_warnings(&set)?;
    }
    Ok(set)
}

/// Most prediction steps per constraint used by the determinedness LP.
const DETERMINEDNESS_STEPS: usize = 200;

/// One warning per constraint whose `k = T` row is not implied by the others.
///
/// The LP uses a subsample of the earlier steps plus the steady-state rows.
/// Fewer rows give a larger polytope, so a row found redundant there is
/// redundant in the full set; the converse may warn spuriously.
pub fn determinedness_warnings(set: &AdmissibleSet) -> Result<Vec<String>> {
    let a = set.combined();
    let t = set.horizon;
    let stride = (t / DETERMINEDNESS_STEPS).max(1);
    let rows: Vec<usize> = (0..set.bank.origin.len())
        .filter(|&i| !is_zero_row(&set.bank, i))
        .filter(|&i| match set.bank.origin[i].step {
            None => true,
            Some(k) => k == t || k + 1 == t || k % stride == 0,
        })
        .collect();
    let mut warnings = Vec::new();
    for (j, row) in set.constraints.rows.iter().enumerate() {
        let last = rows
            .iter()
            .copied()
            .find(|&i| set.bank.origin[i] == RowOrigin { constraint: j, step: Some(t) });
        if let Some(i) = last {
            if !row_is_redundant(&a, &set.bank_h, &rows, i) {
                warnings.push(format!("horizon {t} may be too small: final row of `{}` is not shown redundant", row.label));
            }
        }
    }
    Ok(warnings)
}

/// Membership test with worst-row margin.
pub fn is_member(set: &AdmissibleSet, x: &DVector<f64>, v: &DVector<f64>) -> Result<Membership> {
    if x.len() != set.n_states() || v.len() != set.n_inputs() {
        return Err(Error::Dimension(format!(
            "set is over {} states and {} inputs, got {} and {}",
            set.n_states(),
            set.n_inputs(),
            x.len(),
            v.len()
        )));
    }
    let slack = &set.h - &*set.h_x * x - &*set.h_v * v;
    let margin = slack.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Membership { member: margin >= -BOUNDARY_TOL, margin })
}

/// Refresh the bounds of `set` for new constraint values with the same rows.
///
/// Only `h` is recomputed; the row matrices are shared with `set`.
pub fn rebuild_bounds(set: &AdmissibleSet, constraints_at_t: &OutputConstraintSet) -> Result<AdmissibleSet> {
    rebuild_bounds_with(set, constraints_at_t, |j, _| constraints_at_t.rows[j].bound)
}

/// Like [`rebuild_bounds`], but the bound of each row may depend on its
/// prediction step: `bound(j, Some(k))` for step `k` of constraint `j`,
/// `bound(j, None)` for the steady-state row. Bounds are in the stored
/// `coeff · y ≤ bound` form. `constraints_at_t` supplies the structure and
/// the fingerprint.
pub fn rebuild_bounds_with(
    set: &AdmissibleSet,
    constraints_at_t: &OutputConstraintSet,
    bound: impl Fn(usize, Option<usize>) -> f64,
) -> Result<AdmissibleSet> {
    if !set.constraints.same_structure(constraints_at_t) {
        return Err(Error::ShapeChange("constraint rows differ from those the set was built with".into()));
    }
    constraints_at_t.validate()?;
    let mut next = set.clone();
    next.constraints = constraints_at_t.clone();
    next.bank_h = row_bounds_with(&next.bank, next.epsilon, bound);
    if next.bank_h.iter().any(|b| !b.is_finite()) {
        return Err(Error::Invalid("non-finite row bound".into()));
    }
    next.provenance.constraint_hash = constraints_at_t.fingerprint();
    let moved = next
        .constraints
        .rows
        .iter()
        .zip(&set.pruned_bounds)
        .map(|(r, b)| (r.bound - b).abs())
        .fold(0.0, f64::max);
    let zero_rows_flip = set
        .bank
        .origin
        .iter()
        .enumerate()
        .any(|(i, _)| is_zero_row(&set.bank, i) && (set.bank_h[i] >= 0.0) != (next.bank_h[i] >= 0.0));
    if (next.options.prune && moved > next.options.reprune_threshold) || zero_rows_flip {
        next.reselect()?;
    } else {
        next.h = DVector::from_iterator(next.active.len(), next.active.iter().map(|&i| next.bank_h[i]));
        next.pruned_bounds = set.pruned_bounds.clone();
    }
    Ok(next)
}

/// Axis-aligned clipping box for slices, `[(lo, hi); 2]` in deviation units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Default for SliceBox {
    /// ±100 kg/s on `Δṁ_s,ref`, ±30 °C on `ΔT_p,in,ref`.
    fn default() -> Self {
        Self { lo: [-100.0, -30.0], hi: [100.0, 30.0] }
    }
}

/// Convex polygon, vertices counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        0.5 * (0..v.len())
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
    }

    /// Point-in-polygon for a CCW convex polygon, with tolerance `tol` on each edge.
    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        let v = &self.vertices;
        (0..v.len()).all(|i| {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            let edge = [b[0] - a[0], b[1] - a[1]];
            let len = (edge[0] * edge[0] + edge[1] * edge[1]).sqrt();
            len == 0.0 || (edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])) / len >= -tol
        })
    }
}

/// Clip a convex polygon by `a·p ≤ c`.
fn clip(poly: &[[f64; 2]], a: [f64; 2], c: f64) -> Vec<[f64; 2]> {
    let f = |p: &[f64; 2]| a[0] * p[0] + a[1] * p[1] - c;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let (fp, fq) = (f(&p), f(&q));
        if fp <= 0.0 {
            out.push(p);
        }
        if (fp < 0.0 && fq > 0.0) || (fp > 0.0 && fq < 0.0) {
            let t = fp / (fp - fq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

fn dedup(poly: Vec<[f64; 2]>, scale: f64) -> Vec<[f64; 2]> {
    let tol = 1e-12 * scale;
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(poly.len());
    for p in poly {
        if out.last().map_or(true, |q| (p[0] - q[0]).abs() > tol || (p[1] - q[1]).abs() > tol) {
            out.push(p);
        }
    }
    while out.len() > 1 {
        let (f, l) = (out[0], out[out.len() - 1]);
        if (f[0] - l[0]).abs() <= tol && (f[1] - l[1]).abs() <= tol {
            out.pop();
        } else {
            break;
        }
    }
    out
}

/// Input-plane slice of the set at fixed state `x`, clipped to `bounds`.
pub fn export_slice(set: &AdmissibleSet, x: &DVector<f64>, bounds: &SliceBox) -> Result<Polygon> {
    if set.n_inputs() != 2 {
        return Err(Error::Dimension(format!("slices need two inputs, set has {}", set.n_inputs())));
    }
    if x.len() != set.n_states() {
        return Err(Error::Dimension(format!("state has length {}, set expects {}", x.len(), set.n_states())));
    }
    let rhs = &set.h - &*set.h_x * x;
    let (lo, hi) = (bounds.lo, bounds.hi);
    let mut poly = vec![[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]];
    let scale = (hi[0] - lo[0]).abs().max((hi[1] - lo[1]).abs());
    for r in 0..set.n_rows() {
        let a = [set.h_v[(r, 0)], set.h_v[(r, 1)]];
        let norm = a[0].hypot(a[1]);
        if norm <= 1e-14 {
            if rhs[r] < -BOUNDARY_TOL {
                return Err(Error::EmptySlice);
            }
            continue;
        }
        poly = clip(&poly, a, rhs[r]);
        if poly.is_empty() {
            return Err(Error::EmptySlice);
        }
    }
    let poly = dedup(poly, scale);
    if poly.len() < 3 {
        return Err(Error::EmptySlice);
    }
    Ok(Polygon { vertices: poly })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmdc::ReferencePoint;

    fn scalar_model(a: f64, b: f64) -> LtiModel {
        LtiModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, 1.0),
            0.2,
            vec!["x".into()],
            vec!["v".into()],
            vec!["y".into()],
            ReferencePoint { states: vec![0.0], inputs: vec![0.0], outputs: vec![0.0] },
        )
        .unwrap()
    }

    fn scalar_set() -> AdmissibleSet {
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 1.0).unwrap();
        let opts = MoasOptions { horizon: 20, epsilon: 0.01, ..MoasOptions::default() };
        build_moas(&scalar_model(0.5, 0.5), &cons, &opts).unwrap()
    }

    /// Explicit forward simulation: y_k ≤ 1 for k = 0..=20 and the tightened
    /// steady-state condition.
    fn scalar_oracle(x: f64, v: f64) -> bool {
        let mut state = x;
        for _ in 0..=20 {
            if state > 1.0 {
                return false;
            }
            state = 0.5 * state + 0.5 * v;
        }
        v <= 0.99
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn scalar_rows_match_closed_form() {
        let set = scalar_set();
        assert_eq!(set.n_rows(), 22);
        for (r, o) in set.origins().iter().enumerate() {
            match o.step {
                Some(k) => {
                    assert!((set.h_x()[(r, 0)] - 0.5f64.powi(k as i32)).abs() < 1e-15);
                    assert!((set.h_v()[(r, 0)] - (1.0 - 0.5f64.powi(k as i32))).abs() < 1e-15);
                    assert_eq!(set.h()[r], 1.0);
                }
                None => {
                    assert_eq!(set.h_x()[(r, 0)], 0.0);
                    assert!((set.h_v()[(r, 0)] - 1.0).abs() < 1e-15);
                    assert!((set.h()[r] - 0.99).abs() < 1e-15);
                }
            }
        }
        assert!(is_member(&set, &dv(&[0.0]), &dv(&[0.9])).unwrap().member);
        assert!(!is_member(&set, &dv(&[2.0]), &dv(&[0.0])).unwrap().member);
        assert!(scalar_oracle(0.0, 0.9) && !scalar_oracle(2.0, 0.0));
    }

    #[test]
    fn membership_agrees_with_forward_simulation() {
        let set = scalar_set();
        let mut s = 12345u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..2000 {
            let x = 4.0 * next() - 2.0;
            let v = 4.0 * next() - 2.0;
            let m = is_member(&set, &dv(&[x]), &dv(&[v])).unwrap();
            if m.margin.abs() > 1e-9 {
                assert_eq!(m.member, scalar_oracle(x, v), "x={x} v={v}");
            }
        }
    }

    #[test]
    fn boundary_points_are_members() {
        let set = scalar_set();
        let m = is_member(&set, &dv(&[1.0]), &dv(&[0.99])).unwrap();
        assert!(m.margin.abs() < 1e-12);
        assert!(m.member);
    }

    #[test]
    fn deadbeat_model_is_determined_at_one_step() {
        let model = LtiModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            0.2,
            vec!["a".into(), "b".into()],
            vec!["v".into()],
            vec!["y".into()],
            ReferencePoint { states: vec![0.0; 2], inputs: vec![0.0], outputs: vec![0.0] },
        )
        .unwrap();
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 3.0).unwrap();
        let set = build_moas(&model, &cons, &MoasOptions { horizon: 1, epsilon: 0.01, ..MoasOptions::default() }).unwrap();
        // Rows k >= 1 coincide with the (untightened) steady-state row.
        for (r, o) in set.origins().iter().enumerate() {
            if o.step == Some(1) {
                assert_eq!(set.h_x().row(r).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
                assert!((set.h_v()[(r, 0)] - 1.5).abs() < 1e-15);
            }
        }
        assert!(set.warnings.is_empty(), "{:?}", set.warnings);
    }

    #[test]
    fn unstable_models_are_rejected() {
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 1.0).unwrap();
        let err = build_moas(&scalar_model(1.0, 0.5), &cons, &MoasOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Unstable(_)));
        let err = build_moas(&scalar_model(0.5, 0.5), &cons, &MoasOptions { epsilon: 0.5, ..MoasOptions::default() }).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn short_horizon_on_oscillating_model_warns() {
        // Lightly damped rotation: the output keeps overshooting past a short horizon.
        let (r, th) = (0.97f64, 0.3f64);
        let model = LtiModel::new(
            DMatrix::from_row_slice(2, 2, &[r * th.cos(), -r * th.sin(), r * th.sin(), r * th.cos()]),
            DMatrix::from_row_slice(2, 1, &[0.05, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            0.2,
            vec!["a".into(), "b".into()],
            vec!["v".into()],
            vec!["y".into()],
            ReferencePoint { states: vec![0.0; 2], inputs: vec![0.0], outputs: vec![0.0] },
        )
        .unwrap();
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 1.0).unwrap().lower("y", -1.0).unwrap();
        let short = build_moas(&model, &cons, &MoasOptions { horizon: 3, epsilon: 0.01, ..MoasOptions::default() }).unwrap();
        assert!(!short.warnings.is_empty());
        let long = build_moas(&model, &cons, &MoasOptions { horizon: 400, epsilon: 0.01, ..MoasOptions::default() }).unwrap();
        assert!(long.warnings.is_empty(), "{:?}", long.warnings);
    }

    #[test]
    fn monotone_scalar_model_is_determined_at_any_horizon() {
        // The last row is a convex combination of the k = 0 and steady-state rows.
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 1.0).unwrap();
        let set = build_moas(&scalar_model(0.99, 0.01), &cons, &MoasOptions { horizon: 3, epsilon: 0.01, ..MoasOptions::default() }).unwrap();
        assert!(set.warnings.is_empty());
    }

    #[test]
    fn pruning_keeps_the_classification() {
        let cons = OutputConstraintSet::new(vec!["y".into()])
            .upper("y", 1.0)
            .unwrap()
            .lower("y", -0.5)
            .unwrap();
        let model = scalar_model(0.8, 0.2);
        let full = build_moas(&model, &cons, &MoasOptions { horizon: 40, epsilon: 0.01, ..MoasOptions::default() }).unwrap();
        let pruned = build_moas(&model, &cons, &MoasOptions { horizon: 40, epsilon: 0.01, prune: true, ..MoasOptions::default() }).unwrap();
        assert!(pruned.n_rows() < full.n_rows());
        for i in 0..60 {
            for j in 0..60 {
                let x = dv(&[-3.0 + 0.1 * i as f64]);
                let v = dv(&[-3.0 + 0.1 * j as f64]);
                let a = is_member(&full, &x, &v).unwrap();
                let b = is_member(&pruned, &x, &v).unwrap();
                assert_eq!(a.member, b.member, "x={x} v={v}");
            }
        }
    }

    #[test]
    fn rebuild_updates_bounds_only() {
        let set = scalar_set();
        let same = rebuild_bounds(&set, set.constraints()).unwrap();
        assert_eq!(same.h(), set.h());
        assert!(Arc::ptr_eq(&same.h_x, &set.h_x));

        let cons = set.constraints().clone().with_bound("y <= max", 1.5).unwrap();
        let moved = rebuild_bounds(&set, &cons).unwrap();
        let x = dv(&[0.3]);
        let v = dv(&[0.4]);
        let before = &set.h - &*set.h_x * &x - &*set.h_v * &v;
        let after = &moved.h - &*moved.h_x * &x - &*moved.h_v * &v;
        for (r, o) in set.origins().iter().enumerate() {
            let want = if o.step.is_some() { 0.5 } else { 0.5 - 0.01 * 0.5 };
            assert!((after[r] - before[r] - want).abs() < 1e-12);
        }

        let other = OutputConstraintSet::new(vec!["y".into()]).lower("y", 0.0).unwrap();
        assert!(matches!(rebuild_bounds(&set, &other), Err(Error::ShapeChange(_))));
    }

    #[test]
    fn scalar_slice_matches_a_scan() {
        // Two inputs driving one output; at x = 0 the slice is a half-plane
        // in (v0, v1) clipped by the box.
        let model = LtiModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_row_slice(1, 2, &[0.5, 0.25]),
            DMatrix::from_element(1, 1, 1.0),
            0.2,
            vec!["x".into()],
            vec!["v0".into(), "v1".into()],
            vec!["y".into()],
            ReferencePoint { states: vec![0.0], inputs: vec![0.0; 2], outputs: vec![0.0] },
        )
        .unwrap();
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 1.0).unwrap();
        let set = build_moas(&model, &cons, &MoasOptions { horizon: 20, epsilon: 0.01, ..MoasOptions::default() }).unwrap();
        let bounds = SliceBox { lo: [-2.0, -2.0], hi: [2.0, 2.0] };
        let poly = export_slice(&set, &dv(&[0.0]), &bounds).unwrap();
        assert!(poly.area() > 0.0);
        // scan v0 at v1 = 0: admissible iff v0 <= 0.99
        let mut last_in = f64::NAN;
        for k in 0..=4000 {
            let v0 = -2.0 + 0.001 * k as f64;
            if is_member(&set, &dv(&[0.0]), &dv(&[v0, 0.0])).unwrap().member {
                last_in = v0;
            }
        }
        let edge = poly
            .vertices
            .iter()
            .map(|p| p[0])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((last_in - 0.99).abs() <= 1e-3);
        // The right edge crosses v1 = 0 at v0 = 0.99; the top-right vertex sits at v1 = -2.
        assert!(poly.contains([0.99 - 1e-9, 0.0], 1e-12));
        assert!(!poly.contains([0.99 + 1e-6, 0.0], 0.0));
        assert!(edge >= 0.99);
    }

    #[test]
    fn huge_bounds_slice_is_the_box() {
        let model = LtiModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_row_slice(1, 2, &[0.5, 0.25]),
            DMatrix::from_element(1, 1, 1.0),
            0.2,
            vec!["x".into()],
            vec!["v0".into(), "v1".into()],
            vec!["y".into()],
            ReferencePoint { states: vec![0.0], inputs: vec![0.0; 2], outputs: vec![0.0] },
        )
        .unwrap();
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 1e9).unwrap();
        let set = build_moas(&model, &cons, &MoasOptions { horizon: 20, epsilon: 0.01, ..MoasOptions::default() }).unwrap();
        let poly = export_slice(&set, &dv(&[0.0]), &SliceBox::default()).unwrap();
        assert_eq!(poly.vertices, vec![[-100.0, -30.0], [100.0, -30.0], [100.0, 30.0], [-100.0, 30.0]]);
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 1.0).unwrap();
        let set = build_moas(&model, &cons, &MoasOptions { horizon: 20, epsilon: 0.01, ..MoasOptions::default() }).unwrap();
        assert!(matches!(export_slice(&set, &dv(&[5.0]), &SliceBox::default()), Err(Error::EmptySlice)));
    }
}
