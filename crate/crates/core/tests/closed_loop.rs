use nalgebra::{DMatrix, DVector};

use saltgov_core::control::{tune_open_loop, ClosedLoop};
use saltgov_core::governor::{govern, GovernorState, Mode, StepFlag, DEFAULT_INPUT_SCALE};
use saltgov_core::moas::{build_moas, MoasOptions, OutputConstraintSet};
use saltgov_core::plant::{calibrate_steady_state, SteadyStateTable};
use saltgov_core::scenario::{build_load_follow, prepare_model, ScenarioConfig};

fn nominal_loop() -> ClosedLoop {
    let params = calibrate_steady_state().unwrap();
    let gains = tune_open_loop(&params, &SteadyStateTable::NOMINAL).unwrap().gains;
    ClosedLoop::at_steady_state(params, &SteadyStateTable::NOMINAL, gains).unwrap()
}

#[test]
fn steady_setpoints_hold_for_600_s() {
    let mut cl = nominal_loop();
    for _ in 0..3000 {
        let s = cl.step([380.0, 585.0]).unwrap();
        assert!((s.plant.m_dot_s - 380.0).abs() <= 0.38, "m_dot_s {}", s.plant.m_dot_s);
        assert!((s.plant.t_p_in - 585.0).abs() <= 0.585, "T_p_in {}", s.plant.t_p_in);
    }
}

#[test]
fn flow_tracks_a_ramp_down_to_300() {
    let mut cl = nominal_loop();
    let mut last = 0.0;
    for k in 0..4000 {
        let t = k as f64 * cl.dt;
        let sp = if t < 200.0 { 380.0 - 80.0 * t / 200.0 } else { 300.0 };
        last = cl.step([sp, 585.0]).unwrap().plant.m_dot_s;
    }
    assert!((last - 300.0).abs() < 0.5, "settled at {last}");
}

/// With the identified model standing in for the plant, predictions are exact
/// and the governed outputs must stay inside the bounds.
fn governed_on_model(mode: Mode) {
    let cfg = ScenarioConfig::default();
    let (params, gains) = cfg.resolve_loop().unwrap();
    let model = prepare_model(&cfg, &params, gains).unwrap();
    let constraints = OutputConstraintSet::new(model.output_names.clone())
        .upper("T_p_out", 586.85)
        .and_then(|c| c.lower("T_s_out", 512.85))
        .unwrap();
    let set = build_moas(&model, &constraints, &MoasOptions { check_determinedness: false, ..MoasOptions::default() }).unwrap();
    let v_ref = DVector::from_column_slice(&model.reference.inputs);
    let y_ref = DVector::from_column_slice(&model.reference.outputs);
    let mut gov = GovernorState::new(
        mode,
        v_ref.clone(),
        DMatrix::identity(2, 2),
        DVector::from_column_slice(&DEFAULT_INPUT_SCALE),
        v_ref.clone(),
    )
    .unwrap();
    let traj = build_load_follow();
    let mut x = DVector::zeros(model.n_states());
    let mut limited = 0;
    for k in 0..18000 {
        let y = &model.c * &x + &y_ref;
        assert!(y[0] <= 586.85 + 1e-9 && y[1] >= 512.85 - 1e-9, "step {k}: {y}");
        let r = DVector::from_column_slice(&traj.value_at(k as f64 * model.dt));
        let (next, v, record) = govern(&gov, Some(&set), &x, &r).unwrap();
        assert_eq!(record.flag, StepFlag::Ok, "step {k}");
        limited += ((&v - &r).amax() > 1e-9) as usize;
        x = &model.a * x + &model.b * (v - &v_ref);
        gov = next;
    }
    assert!(limited > 0, "the reference never needed limiting");
}

#[test]
fn cg_on_its_own_model_never_violates() {
    governed_on_model(Mode::Cg);
}

#[test]
fn srg_on_its_own_model_never_violates() {
    governed_on_model(Mode::Srg);
}
