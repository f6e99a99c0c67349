//! Lumped-parameter surrogate of the flibe/flinak test loop.
//!
//! Primary loop (flibe), in flow order:
//!
//! ```text
//!   heater (T_p,3) -> hot leg lag (T_p,in) -> HX primary (T_p,out) -> cold leg lag (T_p,1) -> heater
//! ```
//!
//! The secondary side (flinak) is a single well-mixed HX node at `T_s,out` fed
//! at the fixed source temperature `T_s,in`. Heat crosses the exchanger as
//! `UA * LMTD` in counter-current arrangement. Primary flow is set by a fixed
//! pump head against quadratic friction; secondary flow follows the pump drive
//! through a first-order lag.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sampling period of the outer loop, in seconds.
pub const NOMINAL_DT: f64 = 0.2;

/// Physically accepted temperature band (°C).
pub const TEMPERATURE_RANGE: (f64, f64) = (400.0, 800.0);

/// Output labels, in the order returned by [`measure_outputs`].
pub const OUTPUT_NAMES: [&str; 4] = ["T_p_out", "T_s_out", "P_p_out", "P_p_1"];

/// Published steady operating point of the loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateTable {
    /// Heater power (MW).
    pub q_dot: f64,
    pub m_dot_p: f64,
    pub t_p_in: f64,
    pub t_p_out: f64,
    pub t_p_1: f64,
    pub t_p_3: f64,
    pub p_p_out: f64,
    pub p_p_1: f64,
    pub m_dot_s: f64,
    pub t_s_in: f64,
    pub t_s_out: f64,
}

impl SteadyStateTable {
    pub const NOMINAL: Self = Self {
        q_dot: 18.0,
        m_dot_p: 589.0,
        t_p_in: 585.0,
        t_p_out: 572.0,
        t_p_1: 572.0,
        t_p_3: 585.0,
        p_p_out: 179.0,
        p_p_1: 200.0,
        m_dot_s: 380.0,
        t_s_in: 492.0,
        t_s_out: 517.0,
    };
}

impl Default for SteadyStateTable {
    fn default() -> Self {
        Self::NOMINAL
    }
}

/// Residence times used to size node heat capacities and lags at nominal flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsTargets {
    pub heater_residence: f64,
    pub hx_primary_residence: f64,
    pub hx_secondary_residence: f64,
    pub hot_leg_lag: f64,
    pub cold_leg_lag: f64,
    pub pump_time_constant: f64,
    pub primary_flow_time_constant: f64,
}

impl Default for DynamicsTargets {
    fn default() -> Self {
        Self {
            heater_residence: 15.0,
            hx_primary_residence: 10.0,
            hx_secondary_residence: 8.0,
            hot_leg_lag: 10.0,
            cold_leg_lag: 10.0,
            pump_time_constant: 2.0,
            primary_flow_time_constant: 1.0,
        }
    }
}

/// Heat capacity of each well-mixed node (J/K).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalMasses {
    pub heater: f64,
    pub hx_primary: f64,
    pub hx_secondary: f64,
}

/// Advection lags of the primary pipe segments (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportDelays {
    pub hot_leg: f64,
    pub cold_leg: f64,
}

/// Secondary pump: `m_dot_s` relaxes towards `flow_per_drive * u_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondaryPump {
    /// Steady flow per unit drive (kg/s).
    pub flow_per_drive: f64,
    pub time_constant: f64,
    pub drive_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopParams {
    /// J/(kg K)
    pub cp_primary: f64,
    /// J/(kg K)
    pub cp_secondary: f64,
    pub thermal_masses: ThermalMasses,
    /// W/K
    pub hx_ua: f64,
    pub transport_delays: TransportDelays,
    /// kPa
    pub pump_head: f64,
    /// kPa s^2 / kg^2
    pub friction_coeff: f64,
    /// Loop inertance, kPa s^2 / kg.
    pub flow_inertance: f64,
    /// Pressure held at the HX primary outlet (kPa).
    pub p_p_out: f64,
    /// °C
    pub t_s_in: f64,
    pub pump: SecondaryPump,
    /// Heater capacity (MW).
    pub q_dot_max: f64,
    /// RK4 substeps per outer step.
    pub substeps: usize,
}

impl LoopParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cp_primary", self.cp_primary),
            ("cp_secondary", self.cp_secondary),
            ("thermal_masses.heater", self.thermal_masses.heater),
            ("thermal_masses.hx_primary", self.thermal_masses.hx_primary),
            ("thermal_masses.hx_secondary", self.thermal_masses.hx_secondary),
            ("hx_ua", self.hx_ua),
            ("transport_delays.hot_leg", self.transport_delays.hot_leg),
            ("transport_delays.cold_leg", self.transport_delays.cold_leg),
            ("pump_head", self.pump_head),
            ("friction_coeff", self.friction_coeff),
            ("flow_inertance", self.flow_inertance),
            ("pump.flow_per_drive", self.pump.flow_per_drive),
            ("pump.time_constant", self.pump.time_constant),
            ("pump.drive_max", self.pump.drive_max),
            ("q_dot_max", self.q_dot_max),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Invalid(format!("{name} must be strictly positive, got {value}")));
            }
        }
        if self.substeps == 0 {
            return Err(Error::Invalid("substeps must be at least 1".into()));
        }
        Ok(())
    }

    /// Primary flow at which pump head balances friction.
    pub fn balanced_primary_flow(&self) -> f64 {
        (self.pump_head / self.friction_coeff).sqrt()
    }

    /// Frictional drop between pump discharge (`P_p,1`) and HX outlet (`P_p,out`).
    pub fn pressure_drop(&self, m_dot_p: f64) -> f64 {
        self.friction_coeff * m_dot_p * m_dot_p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorCommand {
    /// Secondary pump drive, normalised.
    pub u_s: f64,
    /// Heater power (MW).
    pub q_dot: f64,
}

impl ActuatorCommand {
    pub fn validate(&self, params: &LoopParams) -> Result<()> {
        if !(self.q_dot.is_finite() && self.q_dot >= 0.0 && self.q_dot <= params.q_dot_max) {
            return Err(Error::Invalid(format!("q_dot = {} outside [0, {}]", self.q_dot, params.q_dot_max)));
        }
        if !(self.u_s.is_finite() && self.u_s >= 0.0 && self.u_s <= params.pump.drive_max) {
            return Err(Error::Invalid(format!("u_s = {} outside [0, {}]", self.u_s, params.pump.drive_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub t_p_in: f64,
    pub t_p_out: f64,
    pub t_p_1: f64,
    pub t_p_3: f64,
    pub t_s_out: f64,
    pub p_p_out: f64,
    pub p_p_1: f64,
    pub m_dot_p: f64,
    pub m_dot_s: f64,
    /// Heater power applied over the last step (MW).
    pub q_dot: f64,
}

impl PlantState {
    fn temperatures(&self) -> [(&'static str, f64); 5] {
        [
            ("T_p_in", self.t_p_in),
            ("T_p_out", self.t_p_out),
            ("T_p_1", self.t_p_1),
            ("T_p_3", self.t_p_3),
            ("T_s_out", self.t_s_out),
        ]
    }

    pub fn check_range(&self) -> Result<()> {
        let (lo, hi) = TEMPERATURE_RANGE;
        for (variable, value) in self.temperatures() {
            if !(value >= lo && value <= hi) {
                return Err(Error::OutOfRange { variable, value, lo, hi });
            }
        }
        for (variable, value) in [("m_dot_p", self.m_dot_p), ("m_dot_s", self.m_dot_s)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::OutOfRange { variable, value, lo: 0.0, hi: f64::INFINITY });
            }
        }
        Ok(())
    }
}

/// Log-mean temperature difference; falls back to the arithmetic mean when
/// the terminal differences are (nearly) equal or not both positive.
pub fn lmtd(dt_a: f64, dt_b: f64) -> f64 {
    if dt_a <= 0.0 || dt_b <= 0.0 || (dt_a - dt_b).abs() <= 1e-9 * dt_a.max(dt_b) {
        return 0.5 * (dt_a + dt_b);
    }
    (dt_a - dt_b) / (dt_a / dt_b).ln()
}

fn hx_duty(params: &LoopParams, t_p_in: f64, t_p_out: f64, t_s_out: f64) -> f64 {
    params.hx_ua * lmtd(t_p_in - t_s_out, t_p_out - params.t_s_in)
}

/// Calibrate the loop so that the nominal actuator commands hold `table`.
///
/// Heat capacities follow from the two loop-side energy balances, UA from
/// the counter-current LMTD, friction from the measured pressure drop. The
/// closed-form parameters are then checked by solving the steady state of
/// the full model, which must reproduce every tabulated value within 0.5 %.
pub fn calibrate(table: &SteadyStateTable, targets: &DynamicsTargets) -> Result<LoopParams> {
    let q = table.q_dot * 1e6;
    let dt_primary = table.t_p_in - table.t_p_out;
    let dt_secondary = table.t_s_out - table.t_s_in;
    if !(q > 0.0 && dt_primary > 0.0 && dt_secondary > 0.0) {
        return Err(Error::Calibration("table must describe heat flowing primary -> secondary".into()));
    }
    let cp_primary = q / (table.m_dot_p * dt_primary);
    let cp_secondary = q / (table.m_dot_s * dt_secondary);
    let hx_ua = q / lmtd(table.t_p_in - table.t_s_out, table.t_p_out - table.t_s_in);
    let drop = table.p_p_1 - table.p_p_out;
    if drop <= 0.0 {
        return Err(Error::Calibration("P_p,1 must exceed P_p,out".into()));
    }
    let friction_coeff = drop / (table.m_dot_p * table.m_dot_p);
    let primary_capacity = table.m_dot_p * cp_primary;
    let secondary_capacity = table.m_dot_s * cp_secondary;

    let params = LoopParams {
        cp_primary,
        cp_secondary,
        thermal_masses: ThermalMasses {
            heater: targets.heater_residence * primary_capacity,
            hx_primary: targets.hx_primary_residence * primary_capacity,
            hx_secondary: targets.hx_secondary_residence * secondary_capacity,
        },
        hx_ua,
        transport_delays: TransportDelays {
            hot_leg: targets.hot_leg_lag,
            cold_leg: targets.cold_leg_lag,
        },
        pump_head: drop,
        friction_coeff,
        // L / (2 f m) is the small-signal flow time constant.
        flow_inertance: 2.0 * friction_coeff * table.m_dot_p * targets.primary_flow_time_constant,
        p_p_out: table.p_p_out,
        t_s_in: table.t_s_in,
        pump: SecondaryPump {
            flow_per_drive: table.m_dot_s,
            time_constant: targets.pump_time_constant,
            drive_max: 2.0,
        },
        q_dot_max: 2.5 * table.q_dot,
        substeps: 10,
    };
    params.validate().map_err(|e| Error::Calibration(e.to_string()))?;

    let cmd = nominal_command(&params, table);
    let state = steady_state(&params, cmd)?;
    let checks = [
        ("T_p_in", state.t_p_in, table.t_p_in),
        ("T_p_out", state.t_p_out, table.t_p_out),
        ("T_p_1", state.t_p_1, table.t_p_1),
        ("T_p_3", state.t_p_3, table.t_p_3),
        ("T_s_out", state.t_s_out, table.t_s_out),
        ("m_dot_p", state.m_dot_p, table.m_dot_p),
        ("m_dot_s", state.m_dot_s, table.m_dot_s),
        ("P_p_out", state.p_p_out, table.p_p_out),
        ("P_p_1", state.p_p_1, table.p_p_1),
    ];
    for (name, got, want) in checks {
        if (got - want).abs() > 5e-3 * want.abs() {
            return Err(Error::Calibration(format!("{name}: steady state {got} vs table {want}")));
        }
    }
    Ok(params)
}

/// Calibration against the nominal operating point.
pub fn calibrate_steady_state() -> Result<LoopParams> {
    calibrate(&SteadyStateTable::NOMINAL, &DynamicsTargets::default())
}

/// Actuator commands that hold `table` on calibrated parameters.
pub fn nominal_command(params: &LoopParams, table: &SteadyStateTable) -> ActuatorCommand {
    ActuatorCommand {
        u_s: table.m_dot_s / params.pump.flow_per_drive,
        q_dot: table.q_dot,
    }
}

/// Equilibrium of the loop under constant commands.
///
/// Flows and pressures are explicit; the only implicit unknown is the HX
/// primary outlet temperature, found by safeguarded Newton iteration on the
/// HX duty balance (duty is strictly increasing in `T_p,out`).
pub fn steady_state(params: &LoopParams, cmd: ActuatorCommand) -> Result<PlantState> {
    params.validate()?;
    if cmd.q_dot <= 0.0 || cmd.u_s <= 0.0 {
        return Err(Error::Calibration("steady state needs positive heater power and pump drive".into()));
    }
    let m_dot_p = params.balanced_primary_flow();
    let m_dot_s = params.pump.flow_per_drive * cmd.u_s;
    let q = cmd.q_dot * 1e6;
    let rise_p = q / (m_dot_p * params.cp_primary);
    let t_s_out = params.t_s_in + q / (m_dot_s * params.cp_secondary);
    let residual = |t_out: f64| hx_duty(params, t_out + rise_p, t_out, t_s_out) - q;

    // Bracket: at T_p,out = T_s,in the cold-end difference vanishes.
    let mut lo = params.t_s_in;
    let mut hi = params.t_s_in + 10.0;
    let mut expansions = 0;
    while residual(hi) < 0.0 {
        hi += 2.0 * (hi - params.t_s_in);
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Calibration("could not bracket the HX balance".into()));
        }
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = residual(t);
        if r.abs() <= 1e-9 * q {
            let state = PlantState {
                t_p_in: t + rise_p,
                t_p_out: t,
                t_p_1: t,
                t_p_3: t + rise_p,
                t_s_out,
                p_p_out: params.p_p_out,
                p_p_1: params.p_p_out + params.pressure_drop(m_dot_p),
                m_dot_p,
                m_dot_s,
                q_dot: cmd.q_dot,
            };
            return Ok(state);
        }
        if r > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let h = 1e-6 * t.abs().max(1.0);
        let slope = (residual(t + h) - residual(t - h)) / (2.0 * h);
        let newton = t - r / slope;
        t = if slope > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Err(Error::Calibration("steady-state iteration did not converge".into()))
}

/// Internal ODE state: `[T_p,3, T_p,in, T_p,out, T_p,1, T_s,out, m_dot_s, m_dot_p]`.
type Ode = [f64; 7];

fn pack(s: &PlantState) -> Ode {
    [s.t_p_3, s.t_p_in, s.t_p_out, s.t_p_1, s.t_s_out, s.m_dot_s, s.m_dot_p]
}

fn derivative(params: &LoopParams, y: &Ode, cmd: &ActuatorCommand) -> Ode {
    let [t3, t_in, t_out, t1, ts, m_s, m_p] = *y;
    let flow_p = m_p * params.cp_primary;
    let q_hx = hx_duty(params, t_in, t_out, ts);
    let masses = &params.thermal_masses;
    [
        (flow_p * (t1 - t3) + cmd.q_dot * 1e6) / masses.heater,
        (t3 - t_in) / params.transport_delays.hot_leg,
        (flow_p * (t_in - t_out) - q_hx) / masses.hx_primary,
        (t_out - t1) / params.transport_delays.cold_leg,
        (m_s * params.cp_secondary * (params.t_s_in - ts) + q_hx) / masses.hx_secondary,
        (params.pump.flow_per_drive * cmd.u_s - m_s) / params.pump.time_constant,
        (params.pump_head - params.pressure_drop(m_p)) / params.flow_inertance,
    ]
}

fn axpy(y: &Ode, h: f64, k: &Ode) -> Ode {
    let mut out = *y;
    for (o, d) in out.iter_mut().zip(k) {
        *o += h * d;
    }
    out
}

/// Advance the plant by `dt` under a command held constant over the step.
pub fn step_plant(params: &LoopParams, state: &PlantState, cmd: ActuatorCommand, dt: f64) -> Result<PlantState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
    }
    cmd.validate(params)?;
    state.check_range()?;
    let h = dt / params.substeps as f64;
    let mut y = pack(state);
    for _ in 0..params.substeps {
        let k1 = derivative(params, &y, &cmd);
        let k2 = derivative(params, &axpy(&y, 0.5 * h, &k1), &cmd);
        let k3 = derivative(params, &axpy(&y, 0.5 * h, &k2), &cmd);
        let k4 = derivative(params, &axpy(&y, h, &k3), &cmd);
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let [t_p_3, t_p_in, t_p_out, t_p_1, t_s_out, m_dot_s, m_dot_p] = y;
    let next = PlantState {
        t_p_in,
        t_p_out,
        t_p_1,
        t_p_3,
        t_s_out,
        p_p_out: params.p_p_out,
        p_p_1: params.p_p_out + params.pressure_drop(m_dot_p),
        m_dot_p,
        m_dot_s,
        q_dot: cmd.q_dot,
    };
    next.check_range()?;
    Ok(next)
}

/// `[T_p,out, T_s,out, P_p,out, P_p,1]`
pub fn measure_outputs(state: &PlantState) -> [f64; 4] {
    [state.t_p_out, state.t_s_out, state.p_p_out, state.p_p_1]
}
