//! Closed-loop control: one controller iteration per control period, using
//! plant voltage measurements in place of the model's prediction.

use log::warn;
use nalgebra::DVector;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linflow::OperatingPoint;
use crate::netmodel::{LinearSensitivityModel, NetworkModel};
use crate::plant::{solve_nonlinear, MeasurementNoise, PlantConfig};
use crate::pnm::{
    armijo_search, build_diagonal_scaling, build_scaling, deviation_objective, gradient, largest_eigenvalue,
    objective, project_box, ControllerConfig, ControllerState, Method, ScalingMatrix, VarLimits,
};

/// Time series driving a simulation, sampled at a uniform resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSeries {
    pub resolution_s: f64,
    pub control_period_s: f64,
    /// Load real power per phase node (before PV).
    pub p: Vec<DVector<f64>>,
    /// Reactive load per phase node.
    pub qc: Vec<DVector<f64>>,
    /// DER real output per phase node.
    pub pv_real: Vec<DVector<f64>>,
    /// Squared head voltages.
    pub v0: Vec<DVector<f64>>,
    /// Inverter apparent-power capacity per phase node.
    pub capacity: DVector<f64>,
    /// Std of the additive noise on squared-voltage measurements.
    pub noise_std: f64,
}

/// Data in effect at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepData {
    pub point: OperatingPoint,
    pub pv_real: DVector<f64>,
}

impl ScenarioSeries {
    /// The same operating point repeated for `samples` samples.
    pub fn constant(
        point: &OperatingPoint,
        pv_real: DVector<f64>,
        capacity: DVector<f64>,
        samples: usize,
        resolution_s: f64,
        control_period_s: f64,
    ) -> Self {
        ScenarioSeries {
            resolution_s,
            control_period_s,
            p: vec![&point.p + &pv_real; samples],
            qc: vec![point.qc.clone(); samples],
            pv_real: vec![pv_real; samples],
            v0: vec![point.v0.clone(); samples],
            capacity,
            noise_std: 0.0,
        }
    }

    pub fn samples(&self) -> usize {
        self.p.len()
    }

    /// Number of control periods covered by the data.
    pub fn control_steps(&self) -> usize {
        let span = self.samples() as f64 * self.resolution_s;
        (span / self.control_period_s + 1e-9).floor() as usize
    }

    pub fn validate(&self, m: usize, n0: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Scenario(msg));
        if !(self.resolution_s > 0.0 && self.control_period_s > 0.0) {
            return bad("resolution and control period must be positive".into());
        }
        let ratio = if self.control_period_s >= self.resolution_s {
            self.control_period_s / self.resolution_s
        } else {
            self.resolution_s / self.control_period_s
        };
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad(format!(
                "control period {} s and resolution {} s are not integer multiples",
                self.control_period_s, self.resolution_s
            ));
        }
        let n = self.samples();
        if n == 0 {
            return bad("scenario has no samples".into());
        }
        for (name, len) in [("qc", self.qc.len()), ("pv", self.pv_real.len()), ("v0", self.v0.len())] {
            if len != n {
                return bad(format!("series {name} has {len} samples, expected {n}"));
            }
        }
        check_dim("capacity", m, self.capacity.len())?;
        if !(self.noise_std >= 0.0) {
            return bad("noise std must be non-negative".into());
        }
        for t in 0..n {
            check_dim("p", m, self.p[t].len())?;
            check_dim("qc", m, self.qc[t].len())?;
            check_dim("pv", m, self.pv_real[t].len())?;
            check_dim("v0", n0, self.v0[t].len())?;
            if let Some(k) = (0..m).find(|&k| self.pv_real[t][k] > self.capacity[k] + 1e-12 || self.pv_real[t][k] < 0.0) {
                return bad(format!("sample {t}: PV output at phase node {k} is outside [0, capacity]"));
            }
        }
        Ok(())
    }

    /// Zero-order hold: the sample in effect at control step `step`.
    pub fn sample_index(&self, step: usize) -> usize {
        let t = step as f64 * self.control_period_s;
        ((t / self.resolution_s + 1e-9).floor() as usize).min(self.samples() - 1)
    }

    pub fn at(&self, step: usize) -> Result<StepData> {
        let i = self.sample_index(step);
        let point = OperatingPoint::new(self.v0[i].clone(), &self.p[i] - &self.pv_real[i], self.qc[i].clone())?;
        Ok(StepData {
            point,
            pv_real: self.pv_real[i].clone(),
        })
    }
}

/// `±sqrt(capacity² − pv²)`, zero where there is no inverter.
pub fn estimate_var_limits(capacity: &DVector<f64>, pv_real: &DVector<f64>) -> Result<VarLimits> {
    check_dim("pv", capacity.len(), pv_real.len())?;
    let mut bound = DVector::zeros(capacity.len());
    for k in 0..capacity.len() {
        let (s, p) = (capacity[k], pv_real[k]);
        if p < 0.0 || p > s + 1e-12 {
            return Err(Error::Scenario(format!(
                "PV output {p} at phase node {k} exceeds inverter capacity {s}"
            )));
        }
        bound[k] = (s * s - p * p).max(0.0).sqrt();
    }
    VarLimits::symmetric(bound)
}

/// `Mᵀ(v_measured − v_r)`.
pub fn feedback_gradient(
    model: &LinearSensitivityModel,
    v_measured: &DVector<f64>,
    v_ref: &DVector<f64>,
) -> Result<DVector<f64>> {
    gradient(model, v_measured, v_ref)
}

/// What to do when no trial step passes the decrease test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExhaustionPolicy {
    /// Keep the previous command.
    Hold,
    /// Apply the first (largest) trial step anyway.
    FirstTrial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub qg_next: DVector<f64>,
    pub backtracks: usize,
    pub exhausted: bool,
    pub active: usize,
}

/// One controller, fixed for a run.
#[derive(Debug, Clone)]
pub struct OnlineController<'a> {
    model: &'a LinearSensitivityModel,
    method: Method,
    cfg: ControllerConfig,
    policy: ExhaustionPolicy,
    gp_step: f64,
    diagonal: Option<ScalingMatrix>,
}

impl<'a> OnlineController<'a> {
    pub fn new(
        model: &'a LinearSensitivityModel,
        method: Method,
        cfg: ControllerConfig,
        policy: ExhaustionPolicy,
    ) -> Result<Self> {
        cfg.validate()?;
        let gp_step = match (method, cfg.gp_step) {
            (Method::Gp, Some(s)) => s,
            (Method::Gp, None) => 1.0 / largest_eigenvalue(&model.hessian)?,
            _ => 0.0,
        };
        let diagonal = match method {
            Method::Dsgp => Some(build_diagonal_scaling(&model.hessian)?),
            _ => None,
        };
        Ok(OnlineController {
            model,
            method,
            cfg,
            policy,
            gp_step,
            diagonal,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// One control cycle: gradient from the measurement, active set and
    /// scaling at the held command, then a line search that compares the
    /// measured objective against the model's prediction `½‖M q + c − v_r‖²`.
    ///
    /// `qg` is first projected into `limits`, which may have shrunk.
    pub fn step(
        &self,
        qg: &DVector<f64>,
        c: &DVector<f64>,
        v_ref: &DVector<f64>,
        limits: &VarLimits,
        v_measured: &DVector<f64>,
    ) -> Result<StepOutcome> {
        let m = self.model.dim();
        check_dim("qg", m, qg.len())?;
        check_dim("limits", m, limits.dim())?;
        let q = project_box(qg, limits);
        let g = feedback_gradient(self.model, v_measured, v_ref)?;

        if self.method == Method::Gp {
            return Ok(StepOutcome {
                qg_next: project_box(&(&q - g * self.gp_step), limits),
                backtracks: 0,
                exhausted: false,
                active: 0,
            });
        }

        let h_measured = deviation_objective(v_measured, v_ref);
        let state = ControllerState::from_gradient(q, g, h_measured, limits, &self.cfg, |a| match &self.diagonal {
            Some(d) => Ok(d.clone()),
            None => build_scaling(&self.model.hessian, a),
        })?;
        let out = armijo_search(&state, limits, &self.cfg, |trial| objective(self.model, trial, c, v_ref))?;
        let qg_next = if out.accepted {
            out.qg_next
        } else {
            match self.policy {
                ExhaustionPolicy::Hold => state.qg.clone(),
                ExhaustionPolicy::FirstTrial => {
                    let alpha = self.cfg.beta.powi(self.cfg.first_trial_exponent as i32);
                    project_box(&(&state.qg - &state.direction * alpha), limits)
                }
            }
        };
        Ok(StepOutcome {
            qg_next,
            backtracks: out.backtracks,
            exhausted: !out.accepted,
            active: state.active.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PlantKind {
    /// `v = M q + c` with the true data.
    Linear,
    /// Backward/forward sweep power flow.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// `None` runs the uncontrolled baseline (`q ≡ 0`).
    pub controller: Option<Method>,
    pub solver: ControllerConfig,
    pub plant: PlantKind,
    pub plant_config: PlantConfig,
    /// Build `c(t)` and the VAr limits from the previous sample instead of the current one.
    pub stale_data: bool,
    pub exhaustion: ExhaustionPolicy,
    pub seed: u64,
    pub v_ref: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            controller: Some(Method::Pnm),
            solver: ControllerConfig::default(),
            plant: PlantKind::Nonlinear,
            plant_config: PlantConfig::default(),
            stale_data: false,
            exhaustion: ExhaustionPolicy::FirstTrial,
            seed: 0,
            v_ref: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub time_s: f64,
    /// Command applied to the plant during this step.
    pub qg: DVector<f64>,
    pub v_measured: DVector<f64>,
    /// Noise-free plant voltage magnitudes.
    pub magnitudes: DVector<f64>,
    /// `½‖v^m − v_r‖²`.
    pub objective: f64,
    pub backtracks: usize,
    pub active: usize,
    pub exhausted: bool,
    pub plant_converged: bool,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub controller: String,
    pub steps: usize,
    pub time_average_objective: f64,
    pub min_voltage: f64,
    pub max_voltage: f64,
    /// Steps with some |V| below 0.95 pu.
    pub steps_below: usize,
    /// Steps with some |V| above 1.05 pu.
    pub steps_above: usize,
    pub exhausted_steps: usize,
    pub plant_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub labels: Vec<String>,
    pub rows: Vec<TraceRow>,
    pub summary: TraceSummary,
}

pub const VOLTAGE_LOW: f64 = 0.95;
pub const VOLTAGE_HIGH: f64 = 1.05;

fn summarize(controller: String, rows: &[TraceRow]) -> TraceSummary {
    let ok: Vec<&TraceRow> = rows.iter().filter(|r| r.plant_converged).collect();
    let mean = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().map(|r| r.objective).sum::<f64>() / ok.len() as f64
    };
    TraceSummary {
        controller,
        steps: rows.len(),
        time_average_objective: mean,
        min_voltage: ok.iter().map(|r| r.magnitudes.min()).fold(f64::INFINITY, f64::min),
        max_voltage: ok.iter().map(|r| r.magnitudes.max()).fold(f64::NEG_INFINITY, f64::max),
        steps_below: ok.iter().filter(|r| r.magnitudes.min() < VOLTAGE_LOW).count(),
        steps_above: ok.iter().filter(|r| r.magnitudes.max() > VOLTAGE_HIGH).count(),
        exhausted_steps: rows.iter().filter(|r| r.exhausted).count(),
        plant_failures: rows.len() - ok.len(),
    }
}

/// Run the closed loop over every control step of the scenario.
pub fn run_simulation(
    net: &NetworkModel,
    model: &LinearSensitivityModel,
    scenario: &ScenarioSeries,
    cfg: &SimulationConfig,
) -> Result<SimulationTrace> {
    let m = net.dim();
    scenario.validate(m, net.root_dim())?;
    let v_ref = DVector::from_element(m, cfg.v_ref);
    let controller = cfg
        .controller
        .map(|method| OnlineController::new(model, method, cfg.solver.clone(), cfg.exhaustion))
        .transpose()?;
    let mut noise = MeasurementNoise::new(scenario.noise_std, cfg.seed)?;
    let mut qg = DVector::zeros(m);
    let mut rows = Vec::with_capacity(scenario.control_steps());

    for step in 0..scenario.control_steps() {
        let now = scenario.at(step)?;
        let known = if cfg.stale_data && step > 0 { scenario.at(step - 1)? } else { now.clone() };
        let limits = estimate_var_limits(&scenario.capacity, &known.pv_real)?;
        let true_limits = estimate_var_limits(&scenario.capacity, &now.pv_real)?;
        // the inverter cannot exceed its present headroom whatever the controller believes
        qg = project_box(&project_box(&qg, &limits), &true_limits);

        let (v_true, plant_ok) = match cfg.plant {
            PlantKind::Linear => (&model.m_matrix * &qg + now.point.offset(model)?, true),
            PlantKind::Nonlinear => match solve_nonlinear(net, &now.point, &qg, &cfg.plant_config) {
                Ok(sol) => (sol.squared_magnitudes, true),
                Err(e @ (Error::NonConvergence { .. } | Error::VoltageCollapse(_))) => {
                    warn!("step {step}: plant failed ({e}); holding the command");
                    (DVector::from_element(m, f64::NAN), false)
                }
                Err(e) => return Err(e),
            },
        };

        let mut row = TraceRow {
            step,
            time_s: step as f64 * scenario.control_period_s,
            qg: qg.clone(),
            v_measured: DVector::from_element(m, f64::NAN),
            magnitudes: v_true.map(|x| x.max(0.0).sqrt()),
            objective: f64::NAN,
            backtracks: 0,
            active: 0,
            exhausted: false,
            plant_converged: plant_ok,
            lower: limits.lower.clone(),
            upper: limits.upper.clone(),
        };
        if plant_ok {
            let v_measured = noise.corrupt(&v_true);
            row.objective = deviation_objective(&v_measured, &v_ref);
            if let Some(ctrl) = &controller {
                let c = known.point.offset(model)?;
                let out = ctrl.step(&qg, &c, &v_ref, &limits, &v_measured)?;
                row.backtracks = out.backtracks;
                row.exhausted = out.exhausted;
                row.active = out.active;
                qg = out.qg_next;
            }
            row.v_measured = v_measured;
        }
        rows.push(row);
    }

    let name = cfg.controller.map_or_else(|| "none".to_string(), |m| m.to_string());
    let summary = summarize(name, &rows);
    Ok(SimulationTrace {
        labels: net.labels(),
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{StaticInstance, StaticLoading};
    use crate::generate::{generate_feeder, FeederOptions};
    use crate::pnm::pnm_solve;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn instance(buses: usize, seed: u64) -> StaticInstance {
        let doc = generate_feeder(&FeederOptions {
            buses,
            seed,
            ..Default::default()
        })
        .unwrap();
        StaticInstance::new(NetworkModel::from_document(&doc).unwrap(), &StaticLoading::default()).unwrap()
    }

    fn static_scenario(inst: &StaticInstance, samples: usize) -> ScenarioSeries {
        let cap = inst.net.der_capacity();
        let pv = cap.map(|c| if c > 0.0 { 0.2 } else { 0.0 });
        ScenarioSeries::constant(&inst.point, pv, cap, samples, 1.0, 1.0)
    }

    #[test]
    fn var_limit_examples() {
        let l = estimate_var_limits(&v(&[0.5, 0.5, 0.5, 0.0]), &v(&[0.5, 0.0, 0.3, 0.0])).unwrap();
        assert_eq!(l.upper[0], 0.0);
        assert_eq!(l.upper[1], 0.5);
        assert_abs_diff_eq!(l.upper[2], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(l.lower[2], -0.4, epsilon = 1e-15);
        assert_eq!((l.lower[3], l.upper[3]), (0.0, 0.0));
        assert!(estimate_var_limits(&v(&[0.5]), &v(&[0.6])).is_err());
    }

    #[test]
    fn feedback_gradient_on_model_voltages_is_model_gradient() {
        let inst = instance(8, 1);
        let q = DVector::from_fn(inst.dim(), |k, _| inst.limits.upper[k] * 0.3);
        let volt = &inst.model.m_matrix * &q + &inst.c;
        let g = feedback_gradient(&inst.model, &volt, &inst.v_ref).unwrap();
        assert_eq!(g, gradient(&inst.model, &volt, &inst.v_ref).unwrap());
        assert_eq!(feedback_gradient(&inst.model, &inst.v_ref, &inst.v_ref).unwrap(), DVector::zeros(inst.dim()));
    }

    #[test]
    fn static_linear_loop_reaches_offline_optimum() {
        let inst = instance(12, 3);
        let cfg = SimulationConfig {
            plant: PlantKind::Linear,
            ..Default::default()
        };
        let trace = run_simulation(&inst.net, &inst.model, &static_scenario(&inst, 80), &cfg).unwrap();
        let offline = pnm_solve(
            &inst.model,
            &inst.c,
            &inst.v_ref,
            &inst.limits,
            &ControllerConfig::default(),
            &DVector::zeros(inst.dim()),
        )
        .unwrap();
        let last = trace.rows.last().unwrap();
        assert_abs_diff_eq!(last.qg, offline.qg, epsilon = 1e-7);
        // non-increasing after the first step
        for w in trace.rows[1..].windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-15);
        }
        // the decrease test only runs out of backtracks at rounding level, once converged
        for r in trace.rows.iter().filter(|r| r.exhausted) {
            assert!((&r.qg - &offline.qg).amax() < 1e-6);
        }
    }

    #[test]
    fn zero_load_stays_flat() {
        let inst = instance(6, 2);
        let m = inst.dim();
        let point = OperatingPoint::no_load(3, m);
        let scen = ScenarioSeries::constant(&point, DVector::zeros(m), inst.net.der_capacity(), 5, 10.0, 2.0);
        assert_eq!(scen.control_steps(), 25);
        let trace = run_simulation(&inst.net, &inst.model, &scen, &SimulationConfig::default()).unwrap();
        for r in &trace.rows {
            assert!(r.qg.amax() < 1e-12);
            assert_abs_diff_eq!(r.objective, 0.0, epsilon = 1e-20);
        }
        assert_abs_diff_eq!(trace.summary.min_voltage, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn collapsed_limits_force_zero_command() {
        let inst = instance(10, 5);
        let mut scen = static_scenario(&inst, 20);
        for t in 10..20 {
            scen.pv_real[t] = scen.capacity.clone();
            scen.p[t] = &scen.p[t] + &scen.capacity - DVector::from_fn(inst.dim(), |k, _| if scen.capacity[k] > 0.0 { 0.2 } else { 0.0 });
        }
        let trace = run_simulation(&inst.net, &inst.model, &scen, &SimulationConfig::default()).unwrap();
        assert!(trace.rows[9].qg.amax() > 0.0);
        for r in &trace.rows[10..] {
            assert_eq!(r.qg, DVector::zeros(inst.dim()));
        }
    }

    #[test]
    fn commands_respect_limits_and_runs_repeat() {
        let inst = instance(15, 8);
        let mut scen = static_scenario(&inst, 30);
        scen.noise_std = 1e-3;
        for t in 0..30 {
            let f = 0.5 + 0.5 * (t as f64 / 5.0).sin().abs();
            scen.pv_real[t] *= f;
        }
        let cfg = SimulationConfig {
            seed: 9,
            ..Default::default()
        };
        let a = run_simulation(&inst.net, &inst.model, &scen, &cfg).unwrap();
        let b = run_simulation(&inst.net, &inst.model, &scen, &cfg).unwrap();
        assert_eq!(a, b);
        for r in &a.rows {
            for k in 0..inst.dim() {
                assert!(r.lower[k] <= r.qg[k] && r.qg[k] <= r.upper[k]);
            }
        }
    }

    #[test]
    fn scenario_validation() {
        let inst = instance(5, 0);
        let mut scen = static_scenario(&inst, 4);
        scen.control_period_s = 0.3;
        assert!(scen.validate(inst.dim(), 3).is_err());
        let mut scen = static_scenario(&inst, 4);
        scen.qc.pop();
        assert!(scen.validate(inst.dim(), 3).is_err());
        let scen = static_scenario(&inst, 4);
        assert!(scen.validate(inst.dim() + 1, 3).is_err());
    }
}
