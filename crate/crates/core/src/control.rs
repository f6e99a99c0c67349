//! Inner PI loops: `m_dot_s` is regulated by the pump drive `u_s`, `T_p,in` by
//! the heater power `Q_dot`.

use serde::{Deserialize, Serialize};

use crate::plant::{self, ActuatorCommand, LoopParams, PlantState, SteadyStateTable, NOMINAL_DT};
use crate::{Error, Result};

/// PI law with conditional-integration anti-windup.
///
/// `integrator` stores `ki * ∫e dt` directly, so the command is
/// `bias + kp*e + integrator` before clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiController {
    pub kp: f64,
    pub ki: f64,
    pub integrator: f64,
    pub bias: f64,
    pub output_limits: (f64, f64),
    pub setpoint: f64,
}

impl PiController {
    pub fn new(gains: PiGains, bias: f64, output_limits: (f64, f64), setpoint: f64) -> Self {
        Self {
            kp: gains.kp,
            ki: gains.ki,
            integrator: 0.0,
            bias,
            output_limits,
            setpoint,
        }
    }

    pub fn with_setpoint(self, setpoint: f64) -> Self {
        Self { setpoint, ..self }
    }

    /// One controller update. Returns the next controller and the clamped command.
    pub fn pi_step(&self, measurement: f64, dt: f64) -> (PiController, f64) {
        debug_assert!(dt > 0.0);
        let (lo, hi) = self.output_limits;
        let error = self.setpoint - measurement;
        let raw = self.bias + self.kp * error + self.integrator;
        let command = raw.clamp(lo, hi);
        let mut next = *self;
        if raw >= lo && raw <= hi {
            next.integrator += self.ki * error * dt;
        }
        (next, command)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    pub kp: f64,
    pub ki: f64,
}

/// Gains for both loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopGains {
    pub flow: PiGains,
    pub heat: PiGains,
}

/// First-order-plus-dead-time fit of an open-loop step response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactionCurve {
    pub gain: f64,
    pub time_constant: f64,
    pub dead_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub gains: LoopGains,
    pub flow_curve: ReactionCurve,
    pub heat_curve: ReactionCurve,
    /// Closed-loop time constants finally used by the SIMC rule.
    pub flow_tau_c: f64,
    pub heat_tau_c: f64,
    /// Worst overshoot (fraction of step) over the ±1 % setpoint steps.
    pub flow_overshoot: f64,
    pub heat_overshoot: f64,
}

/// Everything the outer loop sees at one sampling instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopSample {
    pub time: f64,
    /// Setpoints `[m_dot_s,ref, T_p,in,ref]` applied at this instant.
    pub setpoints: [f64; 2],
    pub plant: PlantState,
    /// `[I_pi(m_dot_s), I_pi(Q_dot)]` before this instant's update.
    pub integrators: [f64; 2],
    /// Actuator commands issued at this instant.
    pub command: ActuatorCommand,
}

/// Plant plus its two PI loops, advanced at the outer sampling period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoop {
    pub params: LoopParams,
    pub plant: PlantState,
    pub flow: PiController,
    pub heat: PiController,
    pub time: f64,
    pub dt: f64,
}

impl ClosedLoop {
    /// Loop resting at the steady state of `table` with setpoints on it.
    pub fn at_steady_state(params: LoopParams, table: &SteadyStateTable, gains: LoopGains) -> Result<Self> {
        let cmd = plant::nominal_command(&params, table);
        let state = plant::steady_state(&params, cmd)?;
        Ok(Self {
            flow: PiController::new(gains.flow, cmd.u_s, (0.0, params.pump.drive_max), state.m_dot_s),
            heat: PiController::new(gains.heat, cmd.q_dot, (0.0, params.q_dot_max), state.t_p_in),
            params,
            plant: state,
            time: 0.0,
            dt: NOMINAL_DT,
        })
    }

    pub fn integrators(&self) -> [f64; 2] {
        [self.flow.integrator, self.heat.integrator]
    }

    /// Apply setpoints, run both controllers on the current measurements and
    /// advance the plant one period. Returns the sample taken *before* the move.
    pub fn step(&mut self, setpoints: [f64; 2]) -> Result<LoopSample> {
        let flow = self.flow.with_setpoint(setpoints[0]);
        let heat = self.heat.with_setpoint(setpoints[1]);
        let (flow_next, u_s) = flow.pi_step(self.plant.m_dot_s, self.dt);
        let (heat_next, q_dot) = heat.pi_step(self.plant.t_p_in, self.dt);
        let command = ActuatorCommand { u_s, q_dot };
        let sample = LoopSample {
            time: self.time,
            setpoints,
            plant: self.plant,
            integrators: self.integrators(),
            command,
        };
        self.plant = plant::step_plant(&self.params, &self.plant, command, self.dt)?;
        self.flow = flow_next;
        self.heat = heat_next;
        self.time += self.dt;
        Ok(sample)
    }

    /// Sample at the current instant without moving (used for the final trace row).
    pub fn peek(&self, setpoints: [f64; 2]) -> LoopSample {
        let (_, u_s) = self.flow.with_setpoint(setpoints[0]).pi_step(self.plant.m_dot_s, self.dt);
        let (_, q_dot) = self.heat.with_setpoint(setpoints[1]).pi_step(self.plant.t_p_in, self.dt);
        LoopSample {
            time: self.time,
            setpoints,
            plant: self.plant,
            integrators: self.integrators(),
            command: ActuatorCommand { u_s, q_dot },
        }
    }
}

/// Two-point (28.3 % / 63.2 %) reaction-curve fit of a step response sampled
/// every `dt`, starting at the step instant.
pub fn fit_reaction_curve(response: &[f64], input_step: f64, dt: f64) -> Result<ReactionCurve> {
    let n = response.len();
    if n < 10 || input_step == 0.0 {
        return Err(Error::Tuning("step response too short".into()));
    }
    let y0 = response[0];
    let y_end = response[n - 1];
    let delta = y_end - y0;
    if delta.abs() < 1e-12 {
        return Err(Error::Tuning("step produced no response".into()));
    }
    // Settled: the last tenth moves by less than 1 % of the total change.
    let tail = response[n - n / 10];
    if ((y_end - tail) / delta).abs() > 1e-2 {
        return Err(Error::Tuning("response has not settled within the test window".into()));
    }
    let mut peak: f64 = 0.0;
    let mut prev = 0.0;
    for y in response {
        let frac = (y - y0) / delta;
        peak = peak.max(frac);
        if frac < prev - 2e-2 {
            return Err(Error::Tuning("non-monotonic step response".into()));
        }
        prev = prev.max(frac);
    }
    if peak > 1.02 {
        return Err(Error::Tuning(format!("step response overshoots by {:.1} %", (peak - 1.0) * 100.0)));
    }
    let crossing = |level: f64| -> f64 {
        for k in 1..n {
            let a = (response[k - 1] - y0) / delta;
            let b = (response[k] - y0) / delta;
            if b >= level {
                let w = if b > a { (level - a) / (b - a) } else { 1.0 };
                return (k as f64 - 1.0 + w) * dt;
            }
        }
        n as f64 * dt
    };
    let t28 = crossing(0.283);
    let t63 = crossing(0.632);
    let time_constant = (1.5 * (t63 - t28)).max(dt);
    let dead_time = (t63 - time_constant).max(0.0);
    Ok(ReactionCurve {
        gain: delta / input_step,
        time_constant,
        dead_time,
    })
}

/// SIMC rule for a first-order-plus-dead-time process.
pub fn simc_gains(curve: &ReactionCurve, tau_c: f64) -> PiGains {
    let kp = curve.time_constant / (curve.gain * (tau_c + curve.dead_time));
    let ti = curve.time_constant.min(4.0 * (tau_c + curve.dead_time));
    PiGains { kp, ki: kp / ti }
}

fn open_loop_step(params: &LoopParams, table: &SteadyStateTable, bump: ActuatorCommand, seconds: f64) -> Result<Vec<PlantState>> {
    let mut state = plant::steady_state(params, plant::nominal_command(params, table))?;
    let steps = (seconds / NOMINAL_DT).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(state);
    for _ in 0..steps {
        state = plant::step_plant(params, &state, bump, NOMINAL_DT)?;
        out.push(state);
    }
    Ok(out)
}

/// Worst overshoot over +1 % and -1 % setpoint steps of one loop, the other
/// loop holding its nominal setpoint.
fn setpoint_step_overshoot(params: &LoopParams, table: &SteadyStateTable, gains: LoopGains, channel: usize, seconds: f64) -> Result<f64> {
    let nominal = [table.m_dot_s, table.t_p_in];
    let mut worst: f64 = 0.0;
    for sign in [1.0, -1.0] {
        let mut lp = ClosedLoop::at_steady_state(*params, table, gains)?;
        let mut target = nominal;
        let step = 0.01 * nominal[channel] * sign;
        target[channel] += step;
        let steps = (seconds / NOMINAL_DT).round() as usize;
        let mut extreme: f64 = 0.0;
        for _ in 0..steps {
            lp.step(target)?;
            let y = if channel == 0 { lp.plant.m_dot_s } else { lp.plant.t_p_in };
            extreme = extreme.max((y - nominal[channel]) / step);
        }
        worst = worst.max(extreme - 1.0);
    }
    Ok(worst.max(0.0))
}

/// Tune both loops from open-loop step responses of the calibrated plant.
///
/// Each actuator is bumped by +1 % from the steady state, the response is
/// fitted with a reaction curve and SIMC gains are computed. The closed-loop
/// time constant starts at `max(θ, τ/4, 5 Δt)` and is relaxed by 1.5× until a
/// ±1 % setpoint step overshoots by less than 5 %.
pub fn tune_open_loop(params: &LoopParams, table: &SteadyStateTable) -> Result<TuningReport> {
    let nominal = plant::nominal_command(params, table);

    let flow_resp = open_loop_step(params, table, ActuatorCommand { u_s: nominal.u_s * 1.01, ..nominal }, 60.0)?;
    let flow_y: Vec<f64> = flow_resp.iter().map(|s| s.m_dot_s).collect();
    let flow_curve = fit_reaction_curve(&flow_y, 0.01 * nominal.u_s, NOMINAL_DT)?;

    let heat_resp = open_loop_step(params, table, ActuatorCommand { q_dot: nominal.q_dot * 1.01, ..nominal }, 3000.0)?;
    let heat_y: Vec<f64> = heat_resp.iter().map(|s| s.t_p_in).collect();
    let heat_curve = fit_reaction_curve(&heat_y, 0.01 * nominal.q_dot, NOMINAL_DT)?;

    let initial = |c: &ReactionCurve| c.dead_time.max(c.time_constant / 4.0).max(5.0 * NOMINAL_DT);
    let mut flow_tau_c = initial(&flow_curve);
    let mut heat_tau_c = initial(&heat_curve);
    for _ in 0..12 {
        let gains = LoopGains {
            flow: simc_gains(&flow_curve, flow_tau_c),
            heat: simc_gains(&heat_curve, heat_tau_c),
        };
        if [gains.flow.kp, gains.flow.ki, gains.heat.kp, gains.heat.ki].iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Tuning("reaction curve produced non-positive gains".into()));
        }
        let flow_overshoot = setpoint_step_overshoot(params, table, gains, 0, 20.0 * flow_tau_c.max(1.0))?;
        let heat_overshoot = setpoint_step_overshoot(params, table, gains, 1, 1500.0)?;
        if flow_overshoot < 0.05 && heat_overshoot < 0.05 {
            return Ok(TuningReport {
                gains,
                flow_curve,
                heat_curve,
                flow_tau_c,
                heat_tau_c,
                flow_overshoot,
                heat_overshoot,
            });
        }
        if flow_overshoot >= 0.05 {
            flow_tau_c *= 1.5;
        }
        if heat_overshoot >= 0.05 {
            heat_tau_c *= 1.5;
        }
    }
    Err(Error::Tuning("could not meet the 5 % overshoot limit".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn controller() -> PiController {
        PiController::new(PiGains { kp: 2.0, ki: 0.5 }, 10.0, (0.0, 20.0), 5.0)
    }

    #[test]
    fn zero_error_returns_bias() {
        let c = controller();
        let (next, u) = c.pi_step(5.0, 0.2);
        assert_eq!(u, 10.0);
        assert_eq!(next.integrator, 0.0);
    }

    #[test]
    fn integrator_accumulates_ki_e_dt() {
        let c = controller();
        let (c1, _) = c.pi_step(4.0, 0.2);
        let (c2, _) = c1.pi_step(4.0, 0.2);
        assert!((c1.integrator - 0.5 * 1.0 * 0.2).abs() < 1e-15);
        assert!((c2.integrator - c1.integrator - 0.1).abs() < 1e-15);
        assert!(c2.integrator > c1.integrator);
    }

    #[test]
    fn saturation_holds_integrator() {
        let mut c = controller().with_setpoint(1000.0);
        let mut last = c.integrator;
        for _ in 0..50 {
            let (next, u) = c.pi_step(0.0, 0.2);
            assert_eq!(u, 20.0);
            assert!(next.integrator.abs() <= last.abs());
            last = next.integrator;
            c = next;
        }
    }

    #[test]
    fn reaction_curve_of_first_order_lag() {
        // y = K (1 - exp(-(t - θ)/τ)), K = 3, τ = 20, θ = 2
        let dt = 0.2;
        let resp: Vec<f64> = (0..2000)
            .map(|k| {
                let t = k as f64 * dt;
                if t < 2.0 { 0.0 } else { 3.0 * (1.0 - (-(t - 2.0) / 20.0).exp()) }
            })
            .collect();
        let c = fit_reaction_curve(&resp, 1.0, dt).unwrap();
        assert!((c.gain - 3.0).abs() < 1e-3);
        assert!((c.time_constant - 20.0).abs() < 0.5, "{c:?}");
        assert!((c.dead_time - 2.0).abs() < 0.5, "{c:?}");
    }

    #[test]
    fn oscillating_response_is_rejected() {
        let resp: Vec<f64> = (0..2000).map(|k| 1.0 - (-(k as f64) / 50.0).exp() * (k as f64 / 10.0).cos()).collect();
        assert!(matches!(fit_reaction_curve(&resp, 1.0, 0.2), Err(Error::Tuning(_))));
    }

    #[test]
    fn tuned_gains_are_finite_and_positive() {
        let params = plant::calibrate_steady_state().unwrap();
        let report = tune_open_loop(&params, &SteadyStateTable::NOMINAL).unwrap();
        for g in [report.gains.flow, report.gains.heat] {
            assert!(g.kp.is_finite() && g.kp > 0.0);
            assert!(g.ki.is_finite() && g.ki > 0.0);
        }
        // Pump: ṁ_s = 380 u_s through a 2 s lag.
        assert!((report.flow_curve.gain - 380.0).abs() < 1.0, "{:?}", report.flow_curve);
        assert!(report.flow_overshoot < 0.05 && report.heat_overshoot < 0.05);
    }
}
