//! Load-follow transients, constraint schedules and the governed closed-loop run.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{tune_open_loop, ClosedLoop, LoopGains, LoopSample};
use crate::dmdc::{identify_dmdc, DmdcOptions, Identification, LtiModel, RankTruncation, SignalTable, SnapshotLog};
use crate::governor::{govern, GovernorRecord, GovernorState, Mode, StepFlag, DEFAULT_INPUT_SCALE, DEFAULT_RELAX_TOLERANCE};
use crate::moas::{
    build_moas, export_slice, model_fingerprint, rebuild_bounds, rebuild_bounds_with, AdmissibleSet, MoasOptions, OutputConstraintSet, Polygon,
    SliceBox,
};
use crate::plant::{self, LoopParams, SteadyStateTable, NOMINAL_DT, OUTPUT_NAMES};
use crate::{Error, Result};

/// Trace columns after `t`, in file order.
pub const TRACE_COLUMNS: [&str; 13] = [
    "m_dot_s_ref",
    "T_p_in_ref",
    "m_dot_s",
    "T_p_in",
    "T_p_out",
    "T_s_out",
    "T_p_1",
    "T_p_3",
    "P_p_out",
    "P_p_1",
    "Q_dot",
    "u_s",
    "I_pi_mdot_s",
];

/// Heater-loop integrator; kept in memory traces but not in the trace file.
pub const HEATER_INTEGRATOR: &str = "I_pi_q_dot";

pub const INPUT_NAMES: [&str; 2] = ["m_dot_s_ref", "T_p_in_ref"];

/// State set of the governed model.
pub const DEFAULT_MODEL_STATES: [&str; 3] = ["T_p_1", "T_p_3", "I_pi_mdot_s"];

/// Every measured state-like signal of the loop.
pub const FULL_STATES: [&str; 8] =
    ["T_p_3", "T_p_in", "T_p_out", "T_p_1", "T_s_out", "m_dot_s", "I_pi_mdot_s", "I_pi_q_dot"];

/// Candidates offered to forward selection.
pub const SELECTION_CANDIDATES: [&str; 11] = [
    "T_p_3",
    "T_p_in",
    "T_p_out",
    "T_p_1",
    "T_s_out",
    "m_dot_s",
    "P_p_1",
    "Q_dot",
    "u_s",
    "I_pi_mdot_s",
    "I_pi_q_dot",
];

pub const T_P_OUT_MAX: f64 = 586.85;
pub const T_S_OUT_MIN: f64 = 512.85;

/// Linear piece of a setpoint channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub start_value: f64,
    pub end_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub names: Vec<String>,
    pub channels: Vec<Vec<Segment>>,
}

impl ReferenceTrajectory {
    /// Piecewise-linear channels through `(t, value)` knots.
    pub fn from_knots(names: &[&str], knots: &[&[(f64, f64)]]) -> Result<Self> {
        let channels = knots
            .iter()
            .map(|k| {
                k.windows(2)
                    .map(|w| Segment { t_start: w[0].0, t_end: w[1].0, start_value: w[0].1, end_value: w[1].1 })
                    .collect()
            })
            .collect();
        let traj = Self { names: names.iter().map(|s| s.to_string()).collect(), channels };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.channels.len() {
            return Err(Error::Invalid("trajectory names and channels differ in length".into()));
        }
        for (name, segs) in self.names.iter().zip(&self.channels) {
            let first = segs.first().ok_or_else(|| Error::Invalid(format!("channel {name} has no segments")))?;
            if first.t_start != 0.0 {
                return Err(Error::Invalid(format!("channel {name} starts at t = {}", first.t_start)));
            }
            for s in segs {
                if !(s.t_end > s.t_start) || !s.start_value.is_finite() || !s.end_value.is_finite() {
                    return Err(Error::Invalid(format!("channel {name} has a bad segment {s:?}")));
                }
            }
            for w in segs.windows(2) {
                if w[0].t_end != w[1].t_start {
                    return Err(Error::Invalid(format!("channel {name} is not contiguous at t = {}", w[0].t_end)));
                }
            }
        }
        Ok(())
    }

    /// Shortest channel end time.
    pub fn duration(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.last().map_or(0.0, |s| s.t_end))
            .fold(f64::INFINITY, f64::min)
    }

    /// Values at `t`; held at the end value past the last segment.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        self.channels
            .iter()
            .map(|segs| {
                let s = segs
                    .iter()
                    .find(|s| t < s.t_end)
                    .unwrap_or_else(|| segs.last().expect("validated"));
                if t >= s.t_end {
                    s.end_value
                } else if t <= s.t_start {
                    s.start_value
                } else {
                    s.start_value + (s.end_value - s.start_value) * (t - s.t_start) / (s.t_end - s.t_start)
                }
            })
            .collect()
    }
}

/// Load-follow maneuver from the steady setpoints (380 kg/s, 585 °C), 3600 s.
///
/// A heater swing up to 604 °C with slightly reduced flow pushes `T_p,out`
/// over its limit. The heater then drops while flow rises to 400 kg/s, which
/// pulls `T_s,out` under its limit; after a feasible dwell around 2000 s,
/// flow rises to 420 kg/s and `T_s,out` stays short until the end.
pub fn build_load_follow() -> ReferenceTrajectory {
    ReferenceTrajectory::from_knots(
        &INPUT_NAMES,
        &[
            &[
                (0.0, 380.0),
                (300.0, 380.0),
                (450.0, 372.0),
                (1000.0, 372.0),
                (1300.0, 400.0),
                (1700.0, 400.0),
                (1850.0, 390.0),
                (2100.0, 390.0),
                (2300.0, 420.0),
                (3600.0, 420.0),
            ],
            &[
                (0.0, 585.0),
                (100.0, 585.0),
                (450.0, 604.0),
                (900.0, 604.0),
                (1300.0, 568.0),
                (1700.0, 568.0),
                (1850.0, 576.0),
                (2100.0, 576.0),
                (2300.0, 573.5),
                (3600.0, 573.5),
            ],
        ],
    )
    .expect("static trajectory")
}

/// Alternating ramps used to validate an identified model.
pub fn build_alternating() -> ReferenceTrajectory {
    ReferenceTrajectory::from_knots(
        &INPUT_NAMES,
        &[
            &[
                (0.0, 380.0),
                (150.0, 380.0),
                (350.0, 386.0),
                (800.0, 386.0),
                (1100.0, 374.0),
                (1900.0, 374.0),
                (2200.0, 384.0),
                (2900.0, 384.0),
                (3200.0, 378.0),
                (3600.0, 378.0),
            ],
            &[
                (0.0, 585.0),
                (400.0, 585.0),
                (700.0, 570.0),
                (1000.0, 570.0),
                (1300.0, 600.0),
                (1700.0, 600.0),
                (2100.0, 568.0),
                (2500.0, 568.0),
                (2800.0, 595.0),
                (3600.0, 595.0),
            ],
        ],
    )
    .expect("static trajectory")
}

/// Constant setpoints at the nominal point.
pub fn build_steady_hold(duration: f64) -> ReferenceTrajectory {
    ReferenceTrajectory::from_knots(&INPUT_NAMES, &[&[(0.0, 380.0), (duration, 380.0)], &[(0.0, 585.0), (duration, 585.0)]])
        .expect("static trajectory")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrajectorySpec {
    LoadFollow,
    Alternating,
    SteadyHold { duration: f64 },
    Custom(ReferenceTrajectory),
}

impl TrajectorySpec {
    pub fn build(&self) -> Result<ReferenceTrajectory> {
        let traj = match self {
            TrajectorySpec::LoadFollow => build_load_follow(),
            TrajectorySpec::Alternating => build_alternating(),
            TrajectorySpec::SteadyHold { duration } => {
                if !(*duration > 0.0) {
                    return Err(Error::Config { key: "trajectory.duration".into(), message: "must be positive".into() });
                }
                build_steady_hold(*duration)
            }
            TrajectorySpec::Custom(t) => t.clone(),
        };
        traj.validate()?;
        if traj.names != INPUT_NAMES {
            return Err(Error::Config { key: "trajectory.names".into(), message: format!("expected {INPUT_NAMES:?}") });
        }
        Ok(traj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Upper,
    Lower,
}

/// Bound held at `base`, ramped by `amplitude` over `[ramp_start, ramp_end]`
/// in the given direction, then held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSchedule {
    pub output: String,
    pub sense: Sense,
    pub base: f64,
    pub direction: Direction,
    pub ramp_start: f64,
    pub ramp_end: f64,
    pub amplitude: f64,
}

impl BoundSchedule {
    pub fn constant(output: &str, sense: Sense, base: f64) -> Self {
        Self {
            output: output.into(),
            sense,
            base,
            direction: Direction::Constant,
            ramp_start: 0.0,
            ramp_end: 0.0,
            amplitude: 0.0,
        }
    }

    pub fn bound_at(&self, t: f64) -> f64 {
        let sign = match self.direction {
            Direction::Increasing => 1.0,
            Direction::Decreasing => -1.0,
            Direction::Constant => return self.base,
        };
        let shift = if t <= self.ramp_start {
            0.0
        } else if t >= self.ramp_end {
            self.amplitude
        } else {
            self.amplitude * (t - self.ramp_start) / (self.ramp_end - self.ramp_start)
        };
        self.base + sign * shift
    }

    /// Most restrictive bound over `[t, ∞)`.
    pub fn tightest_from(&self, t: f64) -> f64 {
        let (now, last) = (self.bound_at(t), self.bound_at(t.max(self.ramp_end)));
        match self.sense {
            Sense::Upper => now.min(last),
            Sense::Lower => now.max(last),
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.base.is_finite() || !self.amplitude.is_finite() {
            return Err(Error::Config { key: format!("constraints.{}", self.output), message: "non-finite bound".into() });
        }
        if self.direction != Direction::Constant && !(self.ramp_end > self.ramp_start) {
            return Err(Error::Config { key: format!("constraints.{}", self.output), message: "ramp_end must exceed ramp_start".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSchedule {
    pub bounds: Vec<BoundSchedule>,
}

/// Preset schedules: both bounds constant, or the `T_s,out` floor ramped by
/// ±2 °C between 2000 s and 2800 s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulePreset {
    #[serde(rename = "constant")]
    Constant,
    #[serde(rename = "eq7-increasing")]
    RampUp,
    #[serde(rename = "eq7-decreasing")]
    RampDown,
}

impl std::str::FromStr for SchedulePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "eq7-increasing" => Ok(Self::RampUp),
            "eq7-decreasing" => Ok(Self::RampDown),
            other => Err(Error::Invalid(format!("unknown constraint schedule {other}"))),
        }
    }
}

impl std::fmt::Display for SchedulePreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::RampUp => "eq7-increasing",
            Self::RampDown => "eq7-decreasing",
        })
    }
}

impl ConstraintSchedule {
    pub fn preset(preset: SchedulePreset) -> Self {
        let direction = match preset {
            SchedulePreset::Constant => Direction::Constant,
            SchedulePreset::RampUp => Direction::Increasing,
            SchedulePreset::RampDown => Direction::Decreasing,
        };
        Self {
            bounds: vec![
                BoundSchedule::constant("T_p_out", Sense::Upper, T_P_OUT_MAX),
                BoundSchedule {
                    output: "T_s_out".into(),
                    sense: Sense::Lower,
                    base: T_S_OUT_MIN,
                    direction,
                    ramp_start: 2000.0,
                    ramp_end: 2800.0,
                    amplitude: 2.0,
                },
            ],
        }
    }

    pub fn is_constant(&self) -> bool {
        self.bounds.iter().all(|b| b.direction == Direction::Constant)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() {
            return Err(Error::Config { key: "constraints".into(), message: "no bounds".into() });
        }
        self.bounds.iter().try_for_each(BoundSchedule::validate)
    }

    /// Constraint set over `output_names` at time `t`.
    pub fn constraints_at(&self, output_names: &[String], t: f64) -> Result<OutputConstraintSet> {
        let mut set = OutputConstraintSet::new(output_names.to_vec());
        for b in &self.bounds {
            let value = b.bound_at(t);
            set = match b.sense {
                Sense::Upper => set.upper(&b.output, value)?,
                Sense::Lower => set.lower(&b.output, value)?,
            };
        }
        Ok(set)
    }

    /// Bound of row `index` in the `coeff · y ≤ bound` form used by the
    /// admissible set, `steps` periods of `dt` after step `now`; `None` asks
    /// for the tightest bound from the end of the horizon on.
    pub fn stored_bound(&self, index: usize, now: usize, steps: Option<usize>, horizon: usize, dt: f64) -> f64 {
        let b = &self.bounds[index];
        let value = match steps {
            Some(k) => b.bound_at((now + k) as f64 * dt),
            None => b.tightest_from((now + horizon) as f64 * dt),
        };
        match b.sense {
            Sense::Upper => value,
            Sense::Lower => -value,
        }
    }

    /// Signed violation per bound for a physical output value (positive = violated).
    pub fn violation(&self, index: usize, value: f64, t: f64) -> f64 {
        let b = &self.bounds[index];
        match b.sense {
            Sense::Upper => value - b.bound_at(t),
            Sense::Lower => b.bound_at(t) - value,
        }
    }
}

/// Selected plant parameters a config may override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantOverrides {
    pub hx_ua: Option<f64>,
    pub pump_head: Option<f64>,
    pub friction_coeff: Option<f64>,
    pub flow_inertance: Option<f64>,
    pub q_dot_max: Option<f64>,
    pub t_s_in: Option<f64>,
    pub substeps: Option<usize>,
}

impl PlantOverrides {
    pub fn apply(&self, mut p: LoopParams) -> Result<LoopParams> {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut p.hx_ua, self.hx_ua);
        set(&mut p.pump_head, self.pump_head);
        set(&mut p.friction_coeff, self.friction_coeff);
        set(&mut p.flow_inertance, self.flow_inertance);
        set(&mut p.q_dot_max, self.q_dot_max);
        set(&mut p.t_s_in, self.t_s_in);
        if let Some(n) = self.substeps {
            p.substeps = n;
        }
        p.validate().map_err(|e| Error::Config { key: "plant".into(), message: e.to_string() })?;
        Ok(p)
    }
}

/// Where the governed model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// Identify from an ungoverned run of `trajectory`.
    Identify {
        trajectory: TrajectorySpec,
        states: Vec<String>,
        rank: Option<usize>,
    },
    Inline(LtiModel),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Identify {
            trajectory: TrajectorySpec::LoadFollow,
            states: DEFAULT_MODEL_STATES.iter().map(|s| s.to_string()).collect(),
            rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub mode: Mode,
    pub trajectory: TrajectorySpec,
    pub constraints: SchedulePreset,
    /// Overrides `constraints` when present.
    pub schedule: Option<ConstraintSchedule>,
    pub plant: PlantOverrides,
    /// Tuned from open-loop steps when absent.
    pub gains: Option<LoopGains>,
    pub model: ModelSpec,
    pub horizon: usize,
    pub epsilon: f64,
    pub prune: bool,
    /// Let each prediction row see the scheduled bound at its own future
    /// instant instead of the bound at the current one.
    pub bound_preview: bool,
    /// Violations by the held input up to this size (°C) are flagged
    /// `relaxed` rather than `fallback`.
    pub relax_tolerance: f64,
    /// Weight on normalized inputs, row-major.
    pub q_weight: [[f64; 2]; 2],
    pub input_scale: [f64; 2],
    /// Instants (s) at which to export input-plane slices.
    pub slice_times: Vec<f64>,
    pub slice_box: SliceBox,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "load-follow".into(),
            mode: Mode::Cg,
            trajectory: TrajectorySpec::LoadFollow,
            constraints: SchedulePreset::Constant,
            schedule: None,
            plant: PlantOverrides::default(),
            gains: None,
            model: ModelSpec::default(),
            horizon: MoasOptions::default().horizon,
            epsilon: MoasOptions::default().epsilon,
            prune: false,
            bound_preview: true,
            relax_tolerance: DEFAULT_RELAX_TOLERANCE,
            q_weight: [[1.0, 0.0], [0.0, 1.0]],
            input_scale: DEFAULT_INPUT_SCALE,
            slice_times: Vec::new(),
            slice_box: SliceBox::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn schedule(&self) -> ConstraintSchedule {
        self.schedule.clone().unwrap_or_else(|| ConstraintSchedule::preset(self.constraints))
    }

    pub fn moas_options(&self) -> MoasOptions {
        MoasOptions { horizon: self.horizon, epsilon: self.epsilon, prune: self.prune, ..MoasOptions::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.build()?;
        self.schedule().validate()?;
        if self.horizon == 0 {
            return Err(Error::Config { key: "horizon".into(), message: "must be at least 1".into() });
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.1) {
            return Err(Error::Config { key: "epsilon".into(), message: format!("{} outside (0, 0.1]", self.epsilon) });
        }
        if self.input_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config { key: "input_scale".into(), message: "scales must be positive".into() });
        }
        if let ModelSpec::Identify { states, rank, .. } = &self.model {
            if states.is_empty() {
                return Err(Error::Config { key: "model.states".into(), message: "no states".into() });
            }
            if rank == &Some(0) {
                return Err(Error::Config { key: "model.rank".into(), message: "must be at least 1".into() });
            }
        }
        Ok(())
    }

    /// Plant parameters and PI gains, tuning when none are configured.
    pub fn resolve_loop(&self) -> Result<(LoopParams, LoopGains)> {
        let params = self.plant.apply(plant::calibrate_steady_state()?)?;
        let gains = match self.gains {
            Some(g) => g,
            None => tune_open_loop(&params, &SteadyStateTable::NOMINAL)?.gains,
        };
        Ok((params, gains))
    }
}

/// Value of a named trace signal in a loop sample.
pub fn sample_value(s: &LoopSample, name: &str) -> Option<f64> {
    Some(match name {
        "m_dot_s_ref" => s.setpoints[0],
        "T_p_in_ref" => s.setpoints[1],
        "m_dot_s" => s.plant.m_dot_s,
        "T_p_in" => s.plant.t_p_in,
        "T_p_out" => s.plant.t_p_out,
        "T_s_out" => s.plant.t_s_out,
        "T_p_1" => s.plant.t_p_1,
        "T_p_3" => s.plant.t_p_3,
        "P_p_out" => s.plant.p_p_out,
        "P_p_1" => s.plant.p_p_1,
        "m_dot_p" => s.plant.m_dot_p,
        "Q_dot" => s.command.q_dot,
        "u_s" => s.command.u_s,
        "I_pi_mdot_s" => s.integrators[0],
        "I_pi_q_dot" => s.integrators[1],
        _ => return None,
    })
}

fn trace_names() -> Vec<String> {
    TRACE_COLUMNS.iter().copied().chain([HEATER_INTEGRATOR]).map(String::from).collect()
}

fn push_sample(columns: &mut [Vec<f64>], names: &[String], s: &LoopSample) {
    for (col, name) in columns.iter_mut().zip(names) {
        col.push(sample_value(s, name).expect("known column"));
    }
}

/// Ungoverned closed-loop run; setpoints follow the trajectory exactly.
pub fn simulate_bypass(params: &LoopParams, gains: LoopGains, trajectory: &ReferenceTrajectory) -> Result<SignalTable> {
    let mut cl = ClosedLoop::at_steady_state(*params, &SteadyStateTable::NOMINAL, gains)?;
    let steps = step_count(trajectory.duration(), cl.dt)?;
    let names = trace_names();
    let mut columns = vec![Vec::with_capacity(steps + 1); names.len()];
    let mut time = Vec::with_capacity(steps + 1);
    for k in 0..steps {
        let t = k as f64 * cl.dt;
        let r = trajectory.value_at(t);
        let s = cl.step([r[0], r[1]]).map_err(|e| e.at_step(k, t))?;
        time.push(t);
        push_sample(&mut columns, &names, &s);
    }
    let t = steps as f64 * cl.dt;
    let r = trajectory.value_at(t);
    time.push(t);
    push_sample(&mut columns, &names, &cl.peek([r[0], r[1]]));
    SignalTable::new(time, names, columns)
}

fn step_count(duration: f64, dt: f64) -> Result<usize> {
    let steps = (duration / dt).round();
    if !(steps >= 1.0) || ((steps * dt) - duration).abs() > 1e-9 * duration.max(1.0) {
        return Err(Error::Invalid(format!("duration {duration} is not a whole number of {dt} s steps")));
    }
    Ok(steps as usize)
}

/// Reference point: the first row of the table (the steady state).
pub fn reference_from_first_row(table: &SignalTable) -> HashMap<String, f64> {
    table.names.iter().zip(&table.columns).map(|(n, c)| (n.clone(), c[0])).collect()
}

/// Snapshot log over `states` with the standard inputs and outputs.
pub fn snapshot_log(table: &SignalTable, states: &[String]) -> Result<SnapshotLog> {
    let inputs: Vec<String> = INPUT_NAMES.iter().map(|s| s.to_string()).collect();
    let outputs: Vec<String> = OUTPUT_NAMES.iter().map(|s| s.to_string()).collect();
    SnapshotLog::from_table(table, states, &inputs, &outputs, &reference_from_first_row(table))
}

pub fn dmdc_options(rank: Option<usize>) -> DmdcOptions {
    DmdcOptions {
        rank: rank.map_or(RankTruncation::default(), RankTruncation::Fixed),
        ..DmdcOptions::default()
    }
}

/// Identify the governed model from an ungoverned run.
pub fn identify_from_run(
    params: &LoopParams,
    gains: LoopGains,
    trajectory: &ReferenceTrajectory,
    states: &[String],
    rank: Option<usize>,
) -> Result<(Identification, SignalTable)> {
    let table = simulate_bypass(params, gains, trajectory)?;
    let log = snapshot_log(&table, states)?;
    Ok((identify_dmdc(&log, &dmdc_options(rank))?, table))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedSlice {
    pub time: f64,
    pub step: usize,
    pub state: Vec<f64>,
    /// Governed input at that step, in deviation coordinates.
    pub applied: [f64; 2],
    pub polygon: std::result::Result<Polygon, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub time: f64,
    pub record: GovernorRecord,
    pub constraint_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationSummary {
    pub label: String,
    /// Largest positive violation over the run (0 when never violated).
    pub max_violation: f64,
    pub steps_violated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: ScenarioConfig,
    pub gains: LoopGains,
    pub trace: SignalTable,
    pub governor_log: Vec<StepLog>,
    pub slices: Vec<TimedSlice>,
    pub model: Option<LtiModel>,
    pub moas_warnings: Vec<String>,
    pub violations: Vec<ViolationSummary>,
    /// Admissible set at `t = 0`; later bounds differ only in `h`.
    pub initial_set: Option<AdmissibleSet>,
}

impl RunResult {
    pub fn fallback_steps(&self) -> usize {
        self.flag_count(StepFlag::Fallback)
    }

    pub fn flag_count(&self, flag: StepFlag) -> usize {
        self.governor_log.iter().filter(|l| l.record.flag == flag).count()
    }

    pub fn max_kkt_residual(&self) -> f64 {
        self.governor_log
            .iter()
            .filter_map(|l| l.record.kkt_residual)
            .fold(0.0, f64::max)
    }
}

/// Model for a config: identified or inline.
pub fn prepare_model(config: &ScenarioConfig, params: &LoopParams, gains: LoopGains) -> Result<LtiModel> {
    match &config.model {
        ModelSpec::Inline(m) => Ok(m.clone()),
        ModelSpec::Identify { trajectory, states, rank } => {
            let traj = trajectory.build()?;
            Ok(identify_from_run(params, gains, &traj, states, *rank)?.0.model)
        }
    }
}

/// Run a configured experiment end to end.
pub fn run_experiment(config: &ScenarioConfig) -> Result<RunResult> {
    config.validate()?;
    let (params, gains) = config.resolve_loop()?;
    let model = match config.mode {
        Mode::Bypass if config.slice_times.is_empty() => None,
        _ => Some(prepare_model(config, &params, gains)?),
    };
    run_with_model(config, &params, gains, model)
}

fn model_state(model: &LtiModel, s: &LoopSample) -> Result<DVector<f64>> {
    let x = model
        .state_names
        .iter()
        .map(|n| sample_value(s, n).ok_or_else(|| Error::Invalid(format!("state {n} is not a loop signal"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(model.state_deviation(&x))
}

/// Closed-loop run with a given model (required unless bypassing without slices).
pub fn run_with_model(config: &ScenarioConfig, params: &LoopParams, gains: LoopGains, model: Option<LtiModel>) -> Result<RunResult> {
    let trajectory = config.trajectory.build()?;
    let schedule = config.schedule();
    schedule.validate()?;
    let mut cl = ClosedLoop::at_steady_state(*params, &SteadyStateTable::NOMINAL, gains)?;
    let steps = step_count(trajectory.duration(), cl.dt)?;
    if (cl.dt - NOMINAL_DT).abs() > 1e-15 {
        return Err(Error::Invalid("closed loop runs at the nominal period".into()));
    }

    let mut set: Option<AdmissibleSet> = None;
    let mut initial_set = None;
    let mut warnings = Vec::new();
    if let Some(m) = &model {
        if m.input_names != INPUT_NAMES {
            return Err(Error::Invalid(format!("model inputs {:?} are not {INPUT_NAMES:?}", m.input_names)));
        }
        if (m.dt - cl.dt).abs() > 1e-12 {
            return Err(Error::Invalid(format!("model dt {} differs from loop dt {}", m.dt, cl.dt)));
        }
        let s = build_moas(m, &schedule.constraints_at(&m.output_names, 0.0)?, &config.moas_options())?;
        warnings = s.warnings.clone();
        initial_set = Some(s.clone());
        set = Some(s);
    }

    let r0 = trajectory.value_at(0.0);
    let input_reference = model
        .as_ref()
        .map(|m| DVector::from_column_slice(&m.reference.inputs))
        .unwrap_or_else(|| DVector::from_column_slice(&r0));
    let q = DMatrix::from_row_slice(2, 2, &[config.q_weight[0][0], config.q_weight[0][1], config.q_weight[1][0], config.q_weight[1][1]]);
    let mut gov = GovernorState::new(
        config.mode,
        DVector::from_column_slice(&r0),
        q,
        DVector::from_column_slice(&config.input_scale),
        input_reference,
    )
    .map_err(|e| Error::Config { key: "q_weight".into(), message: e.to_string() })?
    .with_relax_tolerance(config.relax_tolerance)
    .map_err(|e| Error::Config { key: "relax_tolerance".into(), message: e.to_string() })?;

    let slice_steps: Vec<(f64, usize)> = config
        .slice_times
        .iter()
        .map(|&t| (t, (t / cl.dt).round() as usize))
        .filter(|(_, k)| *k <= steps)
        .collect();

    let names = trace_names();
    let mut columns = vec![Vec::with_capacity(steps + 1); names.len()];
    let mut time = Vec::with_capacity(steps + 1);
    let mut log = Vec::with_capacity(steps);
    let mut slices = Vec::new();
    let constant = schedule.is_constant();
    let mut v_last = r0.clone();

    for k in 0..=steps {
        let t = k as f64 * cl.dt;
        let r = DVector::from_column_slice(&trajectory.value_at(t));
        let probe = cl.peek([r[0], r[1]]);
        let x = match &model {
            Some(m) => Some(model_state(m, &probe)?),
            None => None,
        };
        if let (Some(m), Some(s)) = (&model, set.as_mut()) {
            if !constant {
                let horizon = s.horizon;
                let now = schedule.constraints_at(&m.output_names, t)?;
                let mut next = if config.bound_preview {
                    rebuild_bounds_with(s, &now, |j, step| schedule.stored_bound(j, k, step, horizon, cl.dt))
                } else {
                    rebuild_bounds(s, &now)
                }
                .map_err(|e| e.at_step(k, t))?;
                next.provenance.time_index = Some(k);
                *s = next;
            }
        }
        let x_ref = x.clone().unwrap_or_else(|| DVector::zeros(0));
        let (next, v, record) = if k < steps {
            govern(&gov, set.as_ref().filter(|_| x.is_some()), &x_ref, &r).map_err(|e| e.at_step(k, t))?
        } else {
            // last row: no move follows, keep the previous setpoint record-free
            (gov.clone(), DVector::from_column_slice(&v_last), GovernorRecord {
                r: r.iter().copied().collect(),
                v: v_last.clone(),
                kappa: None,
                active: Vec::new(),
                margin: f64::NAN,
                flag: StepFlag::Ok,
                kkt_residual: None,
            })
        };
        if let Some((slice_t, _)) = slice_steps.iter().find(|(_, ks)| *ks == k) {
            let (s, xk) = (set.as_ref().expect("model present with slices"), x.as_ref().expect("state"));
            let dv = &v - &gov.input_reference;
            slices.push(TimedSlice {
                time: *slice_t,
                step: k,
                state: xk.iter().copied().collect(),
                applied: [dv[0], dv[1]],
                polygon: export_slice(s, xk, &config.slice_box).map_err(|e| e.to_string()),
            });
        }
        let sample = if k < steps {
            cl.step([v[0], v[1]]).map_err(|e| e.at_step(k, t))?
        } else {
            cl.peek([v[0], v[1]])
        };
        time.push(t);
        push_sample(&mut columns, &names, &sample);
        if k < steps {
            log.push(StepLog { time: t, record, constraint_hash: set.as_ref().map(|s| s.provenance.constraint_hash.clone()) });
            gov = next;
            v_last = v.iter().copied().collect();
        }
    }
    let trace = SignalTable::new(time, names, columns)?;
    let violations = summarize_violations(&trace, &schedule)?;
    Ok(RunResult {
        config: config.clone(),
        gains,
        trace,
        governor_log: log,
        slices,
        model,
        moas_warnings: warnings,
        violations,
        initial_set,
    })
}

/// Admissible set for the bounds in force at `time` (rounded to a step),
/// with the same preview rule as a governed run.
pub fn set_at_time(model: &LtiModel, schedule: &ConstraintSchedule, time: f64, options: &MoasOptions, preview: bool) -> Result<AdmissibleSet> {
    if !(time >= 0.0) {
        return Err(Error::Invalid(format!("time must be nonnegative, got {time}")));
    }
    let k = (time / model.dt).round() as usize;
    let t = k as f64 * model.dt;
    let now = schedule.constraints_at(&model.output_names, t)?;
    let set = build_moas(model, &now, options)?;
    if !preview || schedule.is_constant() {
        return Ok(set);
    }
    let mut set = rebuild_bounds_with(&set, &now, |j, step| schedule.stored_bound(j, k, step, options.horizon, model.dt))?;
    set.provenance.time_index = Some(k);
    Ok(set)
}

/// Worst violation of each scheduled bound along a trace.
pub fn summarize_violations(trace: &SignalTable, schedule: &ConstraintSchedule) -> Result<Vec<ViolationSummary>> {
    schedule
        .bounds
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let col = trace
                .column(&b.output)
                .ok_or_else(|| Error::MissingColumns(vec![b.output.clone()]))?;
            let mut worst: f64 = 0.0;
            let mut count = 0;
            for (&t, &y) in trace.time.iter().zip(col) {
                let v = schedule.violation(i, y, t);
                if v > 0.0 {
                    count += 1;
                    worst = worst.max(v);
                }
            }
            let label = match b.sense {
                Sense::Upper => format!("{} <= max", b.output),
                Sense::Lower => format!("{} >= min", b.output),
            };
            Ok(ViolationSummary { label, max_violation: worst, steps_violated: count })
        })
        .collect()
}

/// Fingerprint of a model for manifests.
pub fn model_hash(model: &LtiModel) -> String {
    model_fingerprint(model)
}
