//! Reference governors: pick an admissible setpoint `v` near the requested `r`.
//!
//! `r` and `v` are in physical setpoint units. The admissible set works in
//! deviation coordinates, so every step subtracts `input_reference` first.
//! The CG objective uses `Q` on inputs normalized by `input_scale`.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::moas::{is_member, AdmissibleSet};
use crate::{Error, Result};
pub use qp::{solve_qp, QpProblem, QpSolution};

/// Inputs span used for normalization: 80 kg/s on `ṁ_s`, 10 °C on `T_p,in`.
pub const DEFAULT_INPUT_SCALE: [f64; 2] = [80.0, 10.0];

/// Largest violation by `v_prev`, in constraint units (°C for the default
/// constraints), still treated as model mismatch rather than infeasibility.
pub const DEFAULT_RELAX_TOLERANCE: f64 = 1e-3;

/// Extra room on shifted rows so the previous input is strictly inside.
const RELAX_PAD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bypass,
    Srg,
    Cg,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bypass" => Ok(Mode::Bypass),
            "srg" => Ok(Mode::Srg),
            "cg" => Ok(Mode::Cg),
            other => Err(Error::Invalid(format!("unknown governor mode {other}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Bypass => "bypass",
            Mode::Srg => "srg",
            Mode::Cg => "cg",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GovernorState {
    pub v_prev: DVector<f64>,
    pub mode: Mode,
    /// Weight on normalized inputs.
    pub q_weight: DMatrix<f64>,
    pub input_scale: DVector<f64>,
    /// Setpoints at the model's reference point.
    pub input_reference: DVector<f64>,
    /// See [`DEFAULT_RELAX_TOLERANCE`].
    pub relax_tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepFlag {
    Ok,
    /// As `Fallback`, but `v_prev` violated no row by more than the relax
    /// tolerance: the gap is model mismatch, not an unreachable set.
    Relaxed,
    /// The previous input was not admissible; rows it violates were relaxed
    /// to its own violation before choosing `v`.
    Fallback,
}

impl StepFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepFlag::Ok => "ok",
            StepFlag::Relaxed => "relaxed",
            StepFlag::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GovernorRecord {
    pub r: Vec<f64>,
    pub v: Vec<f64>,
    /// SRG only.
    pub kappa: Option<f64>,
    /// CG only: rows of the set active at the solution.
    pub active: Vec<usize>,
    /// Worst-row margin of `(x, v)`; NaN without a set.
    pub margin: f64,
    pub flag: StepFlag,
    /// CG only.
    pub kkt_residual: Option<f64>,
}

impl GovernorState {
    pub fn new(
        mode: Mode,
        v0: DVector<f64>,
        q_weight: DMatrix<f64>,
        input_scale: DVector<f64>,
        input_reference: DVector<f64>,
    ) -> Result<Self> {
        let m = v0.len();
        if q_weight.shape() != (m, m) || input_scale.len() != m || input_reference.len() != m {
            return Err(Error::Dimension(format!(
                "governor with {m} inputs got Q {:?}, scale {}, reference {}",
                q_weight.shape(),
                input_scale.len(),
                input_reference.len()
            )));
        }
        let asym = (&q_weight - q_weight.transpose()).amax();
        if asym > 1e-12 * q_weight.amax().max(1.0) || q_weight.clone().cholesky().is_none() {
            return Err(Error::Invalid("Q must be symmetric positive definite".into()));
        }
        if input_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid("input scales must be positive".into()));
        }
        Ok(Self { v_prev: v0, mode, q_weight, input_scale, input_reference, relax_tolerance: DEFAULT_RELAX_TOLERANCE })
    }

    pub fn with_relax_tolerance(mut self, tol: f64) -> Result<Self> {
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(Error::Invalid(format!("relax tolerance must be finite and nonnegative, got {tol}")));
        }
        self.relax_tolerance = tol;
        Ok(self)
    }

    /// Flag for a step where `v_prev` is outside the set.
    fn outside_flag(&self, set: &AdmissibleSet, x: &DVector<f64>) -> StepFlag {
        let slack = set.h() - set.h_x() * x - set.h_v() * self.to_dev(&self.v_prev);
        if slack.min() >= -self.relax_tolerance {
            StepFlag::Relaxed
        } else {
            StepFlag::Fallback
        }
    }

    fn check(&self, set: &AdmissibleSet, x: &DVector<f64>, r: &DVector<f64>) -> Result<()> {
        if r.len() != self.v_prev.len() || set.n_inputs() != r.len() || set.n_states() != x.len() {
            return Err(Error::Dimension(format!(
                "governor step with {} inputs, reference of length {}, set over {} states and {} inputs, state of length {}",
                self.v_prev.len(),
                r.len(),
                set.n_states(),
                set.n_inputs(),
                x.len()
            )));
        }
        Ok(())
    }

    fn to_dev(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.input_reference
    }

    /// Fallback input in physical units.
    ///
    /// Rows that `v_prev` violates are relaxed to its own violation, so no row
    /// ends up worse than holding `v_prev`. Rows from prediction step `k0` on,
    /// and the steady-state rows, are then kept strict for the smallest `k0`
    /// that leaves the problem feasible, which steers the prediction back
    /// inside as early as possible. The CG objective picks `v` among the rest.
    fn fallback(&self, set: &AdmissibleSet, x: &DVector<f64>, r: &DVector<f64>) -> Result<(DVector<f64>, Option<f64>)> {
        let s = DMatrix::from_diagonal(&self.input_scale);
        let rhs = set.h() - set.h_x() * x;
        let lhs = set.h_v() * &s;
        let w_prev = self.to_dev(&self.v_prev).component_div(&self.input_scale);
        let relaxed = shifted_bounds(&lhs, &rhs, &w_prev);
        let keep: Vec<usize> = (0..lhs.nrows()).filter(|&i| lhs.row(i).amax() > 0.0).collect();
        let steps: Vec<Option<usize>> = set.origins().iter().map(|o| o.step).collect();
        let n = DMatrix::from_fn(keep.len(), lhs.ncols(), |i, j| lhs[(keep[i], j)]);
        let target = self.to_dev(r).component_div(&self.input_scale);
        let hessian = &self.q_weight * 2.0;
        let linear = -(&hessian * &target);
        let solve = |k0: Option<usize>| -> Result<Option<QpSolution>> {
            let b = DVector::from_iterator(
                keep.len(),
                keep.iter().map(|&i| {
                    let strict = match (k0, steps[i]) {
                        (None, _) => false,
                        (Some(_), None) => true,
                        (Some(k0), Some(k)) => k >= k0,
                    };
                    if strict {
                        rhs[i]
                    } else {
                        relaxed[i]
                    }
                }),
            );
            match solve_qp(&QpProblem::new(hessian.clone(), linear.clone(), n.clone(), b)?) {
                Ok(sol) => Ok(Some(sol)),
                Err(Error::QpInfeasible { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        };
        // Strict rows shrink as k0 grows, so feasibility is monotone in k0.
        let last = set.horizon + 1;
        let mut best = solve(Some(last))?;
        if best.is_some() {
            let (mut lo, mut hi) = (0, last);
            while lo < hi {
                let mid = (lo + hi) / 2;
                match solve(Some(mid))? {
                    Some(sol) => {
                        hi = mid;
                        best = Some(sol);
                    }
                    None => lo = mid + 1,
                }
            }
        }
        let sol = match best {
            Some(sol) => sol,
            None => solve(None)?.ok_or_else(|| Error::Invalid("relaxed fallback problem is infeasible".into()))?,
        };
        Ok((sol.v.component_mul(&self.input_scale) + &self.input_reference, Some(sol.kkt_residual)))
    }
}

/// `b` raised on each row that `w` violates, so that `N w ≤ b'` holds.
pub fn shifted_bounds(lhs: &DMatrix<f64>, rhs: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let slack = rhs - lhs * w;
    DVector::from_iterator(
        rhs.len(),
        rhs.iter().zip(slack.iter()).map(|(b, s)| if *s < 0.0 { b - s + RELAX_PAD * b.abs().max(1.0) } else { *b }),
    )
}

/// `κ = max{κ ∈ [0,1] : (x, v_prev + κ(r − v_prev)) ∈ set}` in closed form.
///
/// Returns `None` when `v_prev` itself is outside the set.
pub fn srg_kappa(set: &AdmissibleSet, x: &DVector<f64>, v_prev_dev: &DVector<f64>, r_dev: &DVector<f64>) -> Option<f64> {
    let base = set.h() - set.h_x() * x - set.h_v() * v_prev_dev;
    let outside = base
        .iter()
        .zip(set.h().iter())
        .any(|(b, h)| *b < -1e-9 * h.abs().max(1.0));
    if outside {
        return None;
    }
    Some(kappa_along(&base, &(set.h_v() * (r_dev - v_prev_dev))))
}

/// Largest step in `[0, 1]` keeping every row's slack from decreasing below
/// `max(base, 0)`; a violated row may not get worse.
fn kappa_along(base: &DVector<f64>, rate: &DVector<f64>) -> f64 {
    let mut kappa: f64 = 1.0;
    for (b, r) in base.iter().zip(rate.iter()) {
        if *r > 0.0 {
            kappa = kappa.min(b.max(0.0) / r);
        }
    }
    kappa.clamp(0.0, 1.0)
}

pub fn srg_step(
    gov: &GovernorState,
    set: &AdmissibleSet,
    x: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(GovernorState, DVector<f64>, GovernorRecord)> {
    gov.check(set, x, r)?;
    let vp = gov.to_dev(&gov.v_prev);
    let rd = gov.to_dev(r);
    let (kappa, flag) = match srg_kappa(set, x, &vp, &rd) {
        Some(k) => (k, StepFlag::Ok),
        None => {
            let base = set.h() - set.h_x() * x - set.h_v() * &vp;
            (kappa_along(&base, &(set.h_v() * (&rd - &vp))), gov.outside_flag(set, x))
        }
    };
    let v = &gov.v_prev + (r - &gov.v_prev) * kappa;
    let margin = is_member(set, x, &gov.to_dev(&v))?.margin;
    let next = GovernorState { v_prev: v.clone(), ..gov.clone() };
    let record = GovernorRecord {
        r: r.iter().copied().collect(),
        v: v.iter().copied().collect(),
        kappa: Some(kappa),
        active: Vec::new(),
        margin,
        flag,
        kkt_residual: None,
    };
    Ok((next, v, record))
}

/// QP in normalized deviation coordinates `w = S⁻¹(v − v_ref)`.
///
/// Rows with a zero input part are left out; their feasibility depends on `x`
/// only and is checked by [`cg_step`].
pub fn cg_problem(gov: &GovernorState, set: &AdmissibleSet, x: &DVector<f64>, r: &DVector<f64>) -> Result<(QpProblem, Vec<usize>)> {
    gov.check(set, x, r)?;
    let s = DMatrix::from_diagonal(&gov.input_scale);
    let rhs = set.h() - set.h_x() * x;
    let lhs = set.h_v() * &s;
    let keep: Vec<usize> = (0..lhs.nrows()).filter(|&i| lhs.row(i).amax() > 0.0).collect();
    let target = DVector::from_iterator(r.len(), gov.to_dev(r).iter().zip(gov.input_scale.iter()).map(|(d, s)| d / s));
    let hessian = &gov.q_weight * 2.0;
    let linear = -(&hessian * &target);
    let n = DMatrix::from_fn(keep.len(), lhs.ncols(), |i, j| lhs[(keep[i], j)]);
    let b = DVector::from_iterator(keep.len(), keep.iter().map(|&i| rhs[i]));
    Ok((QpProblem::new(hessian, linear, n, b)?, keep))
}

pub fn cg_step(
    gov: &GovernorState,
    set: &AdmissibleSet,
    x: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(GovernorState, DVector<f64>, GovernorRecord)> {
    let (problem, keep) = cg_problem(gov, set, x, r)?;
    let rhs = set.h() - set.h_x() * x;
    let mut has_input = vec![false; rhs.len()];
    keep.iter().for_each(|&i| has_input[i] = true);
    let state_only_ok = (0..rhs.len())
        .filter(|&i| !has_input[i])
        .all(|i| rhs[i] >= -1e-9 * set.h()[i].abs().max(1.0));
    let solved = if state_only_ok {
        match solve_qp(&problem) {
            Ok(sol) => Some(sol),
            Err(Error::QpInfeasible { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let (v, active, kkt, flag) = match solved {
        Some(sol) => {
            let v = DVector::from_iterator(
                sol.v.len(),
                sol.v.iter().zip(gov.input_scale.iter()).map(|(w, s)| w * s),
            ) + &gov.input_reference;
            let active = sol.active.iter().map(|&i| keep[i]).collect();
            (v, active, Some(sol.kkt_residual), StepFlag::Ok)
        }
        None => {
            let (v, kkt) = gov.fallback(set, x, r)?;
            (v, Vec::new(), kkt, gov.outside_flag(set, x))
        }
    };
    let margin = is_member(set, x, &gov.to_dev(&v))?.margin;
    let next = GovernorState { v_prev: v.clone(), ..gov.clone() };
    let record = GovernorRecord {
        r: r.iter().copied().collect(),
        v: v.iter().copied().collect(),
        kappa: None,
        active,
        margin,
        flag,
        kkt_residual: kkt,
    };
    Ok((next, v, record))
}

/// One governor step in the state's mode. `set` may be `None` only in bypass.
pub fn govern(
    gov: &GovernorState,
    set: Option<&AdmissibleSet>,
    x: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(GovernorState, DVector<f64>, GovernorRecord)> {
    match (gov.mode, set) {
        (Mode::Bypass, _) => {
            let margin = match set {
                Some(s) if s.n_states() == x.len() && s.n_inputs() == r.len() => is_member(s, x, &gov.to_dev(r))?.margin,
                _ => f64::NAN,
            };
            let record = GovernorRecord {
                r: r.iter().copied().collect(),
                v: r.iter().copied().collect(),
                kappa: None,
                active: Vec::new(),
                margin,
                flag: StepFlag::Ok,
                kkt_residual: None,
            };
            Ok((GovernorState { v_prev: r.clone(), ..gov.clone() }, r.clone(), record))
        }
        (Mode::Srg, Some(s)) => srg_step(gov, s, x, r),
        (Mode::Cg, Some(s)) => cg_step(gov, s, x, r),
        (mode, None) => Err(Error::Invalid(format!("{mode} mode needs an admissible set"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmdc::{LtiModel, ReferencePoint};
    use crate::moas::{build_moas, MoasOptions, OutputConstraintSet};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn scalar_set() -> AdmissibleSet {
        let model = LtiModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            0.2,
            vec!["x".into()],
            vec!["v".into()],
            vec!["y".into()],
            ReferencePoint { states: vec![0.0], inputs: vec![0.0], outputs: vec![0.0] },
        )
        .unwrap();
        let cons = OutputConstraintSet::new(vec!["y".into()]).upper("y", 1.0).unwrap();
        build_moas(&model, &cons, &MoasOptions { horizon: 20, epsilon: 0.01, ..MoasOptions::default() }).unwrap()
    }

    fn scalar_gov(mode: Mode) -> GovernorState {
        GovernorState::new(mode, dv(&[0.0]), DMatrix::identity(1, 1), dv(&[1.0]), dv(&[0.0])).unwrap()
    }

    fn bisect(set: &AdmissibleSet, x: &DVector<f64>, vp: &DVector<f64>, r: &DVector<f64>) -> f64 {
        let ok = |k: f64| is_member(set, x, &(vp + (r - vp) * k)).unwrap().margin >= 0.0;
        if ok(1.0) {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn srg_scalar_example() {
        let set = scalar_set();
        let (_, v, rec) = srg_step(&scalar_gov(Mode::Srg), &set, &dv(&[0.0]), &dv(&[2.0])).unwrap();
        assert!((rec.kappa.unwrap() - 0.495).abs() < 1e-12);
        assert!((v[0] - 0.99).abs() < 1e-12);
        assert!((bisect(&set, &dv(&[0.0]), &dv(&[0.0]), &dv(&[2.0])) - 0.495).abs() < 1e-9);
    }

    #[test]
    fn srg_accepts_admissible_references_and_holds_on_equal_reference() {
        let set = scalar_set();
        let (_, v, rec) = srg_step(&scalar_gov(Mode::Srg), &set, &dv(&[0.0]), &dv(&[0.5])).unwrap();
        assert_eq!(rec.kappa, Some(1.0));
        assert_eq!(v[0], 0.5);
        let g = GovernorState { v_prev: dv(&[0.3]), ..scalar_gov(Mode::Srg) };
        let (_, v, _) = srg_step(&g, &set, &dv(&[0.9]), &dv(&[0.3])).unwrap();
        assert_eq!(v[0], 0.3);
    }

    #[test]
    fn srg_and_cg_agree_with_one_input() {
        let set = scalar_set();
        for (x, r, vp) in [(0.0, 2.0, 0.0), (0.8, 1.5, 0.2), (-1.0, -3.0, 0.5), (0.5, 0.7, 0.1), (0.95, 4.0, 0.9)] {
            let g = GovernorState { v_prev: dv(&[vp]), ..scalar_gov(Mode::Srg) };
            let (_, a, _) = srg_step(&g, &set, &dv(&[x]), &dv(&[r])).unwrap();
            let (_, b, rec) = cg_step(&g, &set, &dv(&[x]), &dv(&[r])).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-9, "x={x} r={r}: {a} vs {b}");
            assert!(rec.kkt_residual.unwrap() <= 1e-8);
        }
    }

    #[test]
    fn infeasible_previous_input_falls_back() {
        let set = scalar_set();
        // x = 2 violates the k = 0 row for every v
        let g = scalar_gov(Mode::Cg);
        let (_, _, rec) = cg_step(&g, &set, &dv(&[2.0]), &dv(&[0.5])).unwrap();
        assert_eq!(rec.flag, StepFlag::Fallback);
        let (_, _, rec) = srg_step(&scalar_gov(Mode::Srg), &set, &dv(&[2.0]), &dv(&[0.5])).unwrap();
        assert_eq!(rec.flag, StepFlag::Fallback);
    }

    #[test]
    fn fallback_never_worsens_a_row() {
        let set = scalar_set();
        let g = GovernorState { v_prev: dv(&[0.4]), ..scalar_gov(Mode::Cg) };
        let x = dv(&[2.2]);
        let before = set.h() - set.h_x() * &x - set.h_v() * dv(&[0.4]);
        let (_, v, rec) = cg_step(&g, &set, &x, &dv(&[3.0])).unwrap();
        assert_eq!(rec.flag, StepFlag::Fallback);
        let after = set.h() - set.h_x() * &x - set.h_v() * &v;
        for (a, b) in after.iter().zip(before.iter()) {
            assert!(*a >= b.min(0.0) - 1e-9, "{a} < {b}");
        }
        // moving toward a smaller r is allowed
        let (_, v, _) = cg_step(&g, &set, &x, &dv(&[-1.0])).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_violations_are_flagged_relaxed() {
        let set = scalar_set();
        let (_, _, rec) = cg_step(&scalar_gov(Mode::Cg), &set, &dv(&[1.0005]), &dv(&[0.5])).unwrap();
        assert_eq!(rec.flag, StepFlag::Relaxed);
        let strict = scalar_gov(Mode::Cg).with_relax_tolerance(0.0).unwrap();
        let (_, _, rec) = cg_step(&strict, &set, &dv(&[1.0005]), &dv(&[0.5])).unwrap();
        assert_eq!(rec.flag, StepFlag::Fallback);
    }

    #[test]
    fn shifted_bounds_contain_the_point() {
        let lhs = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = shifted_bounds(&lhs, &dv(&[-1.0, 3.0]), &dv(&[0.5]));
        assert!(b[0] > 0.5 && b[0] < 0.5 + 1e-8);
        assert_eq!(b[1], 3.0);
    }

    #[test]
    fn bypass_passes_reference_through() {
        let (_, v, rec) = govern(&scalar_gov(Mode::Bypass), None, &dv(&[5.0]), &dv(&[7.0])).unwrap();
        assert_eq!(v[0], 7.0);
        assert!(rec.margin.is_nan());
        assert!(govern(&scalar_gov(Mode::Cg), None, &dv(&[0.0]), &dv(&[0.0])).is_err());
    }

    #[test]
    fn q_must_be_positive_definite() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GovernorState::new(Mode::Cg, dv(&[0.0, 0.0]), bad, dv(&[1.0, 1.0]), dv(&[0.0, 0.0])).is_err());
    }
}
