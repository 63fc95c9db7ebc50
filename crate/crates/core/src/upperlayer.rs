//! Slow-timescale scheduling of OLTC taps and capacitor banks.
//!
//! The horizon problem is solved exactly by enumerating every admissible
//! discrete trajectory. Given the device positions at a step, the DER
//! subproblem is a box-constrained convex quadratic that does not couple
//! steps, so its optimal cost is computed once per (step, devices) pair with
//! the projected Newton solver and reused across trajectories.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::netmodel::{compute_c, LinearSensitivityModel, NetworkModel};
use crate::online::{estimate_var_limits, ScenarioSeries};
use crate::pnm::{pnm_solve, ControllerConfig, DenseQuadratic, VarLimits};

/// One switched capacitor bank; all its phase nodes switch together.
#[derive(Debug, Clone, PartialEq)]
pub struct Bank {
    pub nodes: Vec<usize>,
    pub unit_var: f64,
    pub max_units: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDeviceConfig {
    /// Tap step per head phase.
    pub tap_step: DVector<f64>,
    pub tap_min: i32,
    pub tap_max: i32,
    /// Largest |Δn_tap| per phase per period.
    pub tap_change_limit: i32,
    pub banks: Vec<Bank>,
    /// Largest |Δn_cb| per bank per period.
    pub cb_switch_limit: u32,
    /// Diagonal of the voltage-deviation weight.
    pub c_v: DVector<f64>,
    pub c_tap: f64,
    pub c_cb: f64,
    /// Refuse problems with more discrete trajectories than this.
    pub enumeration_cap: u128,
}

impl DiscreteDeviceConfig {
    /// Devices described in the network document. A missing OLTC is a tap fixed at 0.
    pub fn from_network(net: &NetworkModel) -> Result<Self> {
        let n0 = net.root_dim();
        let (tap_step, tap_min, tap_max, tap_change_limit, c_tap) = match &net.oltc {
            Some(o) => {
                let step = match o.tap_step.len() {
                    1 => DVector::from_element(n0, o.tap_step[0]),
                    n if n == n0 => DVector::from_column_slice(&o.tap_step),
                    n => return Err(Error::dim("tap_step", n0, n)),
                };
                (step, o.tap_min, o.tap_max, o.max_change, o.weight)
            }
            None => (DVector::zeros(n0), 0, 0, 0, 1.0),
        };
        let (banks, cb_switch_limit, c_cb) = match &net.capacitor_banks {
            Some(cb) => {
                let banks = cb
                    .banks
                    .iter()
                    .map(|b| {
                        let phases: crate::netmodel::PhaseSet = b.phases.parse()?;
                        let nodes = phases
                            .iter()
                            .map(|p| {
                                net.phase_node_index(b.bus, p).ok_or_else(|| {
                                    Error::Malformed(format!("capacitor bank at bus {} lacks phase {p}", b.bus))
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Bank {
                            nodes,
                            unit_var: b.unit_var_pu,
                            max_units: b.max_units,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (banks, cb.switch_limit, cb.weight)
            }
            None => (Vec::new(), 0, 1.0),
        };
        let cfg = DiscreteDeviceConfig {
            tap_step,
            tap_min,
            tap_max,
            tap_change_limit,
            banks,
            cb_switch_limit,
            c_v: DVector::from_element(net.dim(), 1.0),
            c_tap,
            c_cb,
            enumeration_cap: 1_000_000,
        };
        cfg.validate(net.dim(), n0)?;
        Ok(cfg)
    }

    pub fn validate(&self, m: usize, n0: usize) -> Result<()> {
        check_dim("tap_step", n0, self.tap_step.len())?;
        check_dim("c_v", m, self.c_v.len())?;
        if self.tap_min > self.tap_max || self.tap_change_limit < 0 {
            return Err(Error::Config("empty tap range or negative tap change limit".into()));
        }
        if self.c_v.iter().any(|&w| !(w > 0.0)) || !(self.c_tap > 0.0) || !(self.c_cb > 0.0) {
            return Err(Error::Config("MPC weights must be positive".into()));
        }
        for b in &self.banks {
            if b.nodes.iter().any(|&k| k >= m) {
                return Err(Error::Config("capacitor bank refers to an unknown phase node".into()));
            }
        }
        Ok(())
    }
}

/// Exact squared head voltage `(1 + nΔ)²` per phase.
pub fn oltc_squared_voltage_exact(n_tap: &[i32], tap_step: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(n_tap.len(), |i, _| (1.0 + n_tap[i] as f64 * tap_step[i]).powi(2))
}

/// Linearized squared head voltage `1 + 2nΔ` per phase.
pub fn oltc_squared_voltage(n_tap: &[i32], tap_step: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(n_tap.len(), |i, _| 1.0 + 2.0 * n_tap[i] as f64 * tap_step[i])
}

/// Reactive injection of the banks, per phase node.
pub fn cb_reactive(n_cb: &[u32], banks: &[Bank], m: usize) -> Result<DVector<f64>> {
    check_dim("bank counts", banks.len(), n_cb.len())?;
    let mut q = DVector::zeros(m);
    for (b, &n) in banks.iter().zip(n_cb) {
        if n > b.max_units {
            return Err(Error::Config(format!("{n} units exceed the bank size {}", b.max_units)));
        }
        for &k in &b.nodes {
            q[k] += n as f64 * b.unit_var;
        }
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TapModel {
    Linear,
    Exact,
}

/// Forecast for one period of the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Net real consumption per phase node.
    pub p: DVector<f64>,
    /// Reactive load per phase node (before banks and DERs).
    pub ql: DVector<f64>,
    pub limits: VarLimits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub period_s: f64,
    pub forecasts: Vec<Forecast>,
    pub initial_tap: Vec<i32>,
    pub initial_cb: Vec<u32>,
    pub v_ref: f64,
    pub tap_model: TapModel,
}

impl MpcProblem {
    /// Horizon of `steps` samples starting at `start`, read at the scenario's resolution.
    pub fn from_scenario(
        scenario: &ScenarioSeries,
        start: usize,
        steps: usize,
        initial_tap: Vec<i32>,
        initial_cb: Vec<u32>,
    ) -> Result<Self> {
        if steps == 0 || start + steps > scenario.samples() {
            return Err(Error::Scenario(format!(
                "horizon {start}..{} is outside the {} scenario samples",
                start + steps,
                scenario.samples()
            )));
        }
        let forecasts = (start..start + steps)
            .map(|t| {
                Ok(Forecast {
                    p: &scenario.p[t] - &scenario.pv_real[t],
                    ql: scenario.qc[t].clone(),
                    limits: estimate_var_limits(&scenario.capacity, &scenario.pv_real[t])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MpcProblem {
            period_s: scenario.resolution_s,
            forecasts,
            initial_tap,
            initial_cb,
            v_ref: 1.0,
            tap_model: TapModel::Linear,
        })
    }

    pub fn horizon(&self) -> usize {
        self.forecasts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleStep {
    pub n_tap: Vec<i32>,
    pub n_cb: Vec<u32>,
    pub qg: Vec<f64>,
    /// `½‖v − v_r‖²_{C_v}` at the optimal DER setting.
    pub voltage_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteSchedule {
    pub steps: Vec<ScheduleStep>,
    pub objective: f64,
    pub movements: u32,
    pub trajectories_evaluated: u64,
}

/// Device commands for the first period; the rest of the horizon is discarded.
pub fn apply_receding_horizon(schedule: &DiscreteSchedule) -> (Vec<i32>, Vec<u32>) {
    let first = &schedule.steps[0];
    (first.n_tap.clone(), first.n_cb.clone())
}

type DeviceState = (Vec<i32>, Vec<u32>);

/// Admissible device states one period after `from`.
fn successors(from: &DeviceState, dev: &DiscreteDeviceConfig) -> Vec<DeviceState> {
    let mut taps: Vec<Vec<i32>> = vec![Vec::new()];
    for &n in &from.0 {
        let lo = (n - dev.tap_change_limit).max(dev.tap_min);
        let hi = (n + dev.tap_change_limit).min(dev.tap_max);
        taps = taps
            .into_iter()
            .flat_map(|prefix| {
                (lo..=hi).map(move |x| {
                    let mut v = prefix.clone();
                    v.push(x);
                    v
                })
            })
            .collect();
    }
    let mut cbs: Vec<Vec<u32>> = vec![Vec::new()];
    for (b, &n) in dev.banks.iter().zip(&from.1) {
        let lo = n.saturating_sub(dev.cb_switch_limit);
        let hi = (n + dev.cb_switch_limit).min(b.max_units);
        cbs = cbs
            .into_iter()
            .flat_map(|prefix| {
                (lo..=hi).map(move |x| {
                    let mut v = prefix.clone();
                    v.push(x);
                    v
                })
            })
            .collect();
    }
    let mut out = Vec::with_capacity(taps.len() * cbs.len());
    for t in &taps {
        for c in &cbs {
            out.push((t.clone(), c.clone()));
        }
    }
    out
}

/// Upper bound on the number of discrete trajectories: per-period branching to the power of the horizon.
pub fn enumeration_size(dev: &DiscreteDeviceConfig, n0: usize, horizon: usize) -> u128 {
    let tap_range = (dev.tap_max - dev.tap_min + 1) as u128;
    let tap_branch = tap_range.min(2 * dev.tap_change_limit as u128 + 1);
    let mut per = tap_branch.pow(n0 as u32);
    for b in &dev.banks {
        per = per.saturating_mul((b.max_units as u128 + 1).min(2 * dev.cb_switch_limit as u128 + 1));
    }
    per.saturating_pow(horizon as u32)
}

fn movements(prev: &DeviceState, next: &DeviceState) -> (f64, f64, u32) {
    let dt: Vec<i64> = prev.0.iter().zip(&next.0).map(|(a, b)| (*b - *a) as i64).collect();
    let dc: Vec<i64> = prev.1.iter().zip(&next.1).map(|(a, b)| *b as i64 - *a as i64).collect();
    let sq = |v: &[i64]| v.iter().map(|x| (x * x) as f64).sum::<f64>();
    let moves = dt.iter().chain(&dc).map(|x| x.unsigned_abs() as u32).sum();
    (sq(&dt), sq(&dc), moves)
}

struct StepCost {
    cost: f64,
    qg: DVector<f64>,
}

struct Enumerator<'a> {
    model: &'a LinearSensitivityModel,
    weighted: DenseQuadratic,
    sqrt_w: DVector<f64>,
    problem: &'a MpcProblem,
    dev: &'a DiscreteDeviceConfig,
    solver: &'a ControllerConfig,
    memo: HashMap<(usize, DeviceState), StepCost>,
    best: Option<(f64, u32, Vec<DeviceState>)>,
    path: Vec<DeviceState>,
    evaluated: u64,
}

impl Enumerator<'_> {
    fn step_cost(&mut self, t: usize, state: &DeviceState) -> Result<f64> {
        let key = (t, state.clone());
        if let Some(c) = self.memo.get(&key) {
            return Ok(c.cost);
        }
        let f = &self.problem.forecasts[t];
        let m = self.model.dim();
        let v0 = match self.problem.tap_model {
            TapModel::Linear => oltc_squared_voltage(&state.0, &self.dev.tap_step),
            TapModel::Exact => oltc_squared_voltage_exact(&state.0, &self.dev.tap_step),
        };
        let qc = &f.ql - cb_reactive(&state.1, &self.dev.banks, m)?;
        let c = compute_c(self.model, &v0, &f.p, &qc)?;
        let cw = c.component_mul(&self.sqrt_w);
        let vr = &self.sqrt_w * self.problem.v_ref;
        let rep = pnm_solve(&self.weighted, &cw, &vr, &f.limits, self.solver, &DVector::zeros(m))?;
        let cost = rep.objective;
        self.memo.insert(key, StepCost { cost, qg: rep.qg });
        Ok(cost)
    }

    fn search(&mut self, t: usize, prev: &DeviceState, acc: f64, moves: u32) -> Result<()> {
        if t == self.problem.horizon() {
            self.evaluated += 1;
            let better = match &self.best {
                None => true,
                Some((obj, mv, path)) => {
                    let tol = 1e-12 * obj.abs().max(1e-12);
                    if acc < obj - tol {
                        true
                    } else if acc <= obj + tol {
                        moves < *mv || (moves == *mv && self.path < *path)
                    } else {
                        false
                    }
                }
            };
            if better {
                self.best = Some((acc, moves, self.path.clone()));
            }
            return Ok(());
        }
        for next in successors(prev, self.dev) {
            let (dt, dc, mv) = movements(prev, &next);
            let cost = self.step_cost(t, &next)? + 0.5 * (self.dev.c_tap * dt + self.dev.c_cb * dc);
            self.path.push(next.clone());
            self.search(t + 1, &next, acc + cost, moves + mv)?;
            self.path.pop();
        }
        Ok(())
    }
}

/// Globally optimal device schedule over the horizon.
pub fn solve_mpc(
    model: &LinearSensitivityModel,
    problem: &MpcProblem,
    dev: &DiscreteDeviceConfig,
    solver: &ControllerConfig,
) -> Result<DiscreteSchedule> {
    let m = model.dim();
    let n0 = model.root_dim();
    dev.validate(m, n0)?;
    if problem.horizon() == 0 {
        return Err(Error::Config("empty MPC horizon".into()));
    }
    check_dim("initial taps", n0, problem.initial_tap.len())?;
    check_dim("initial banks", dev.banks.len(), problem.initial_cb.len())?;
    for f in &problem.forecasts {
        check_dim("forecast p", m, f.p.len())?;
        check_dim("forecast ql", m, f.ql.len())?;
        check_dim("forecast limits", m, f.limits.dim())?;
    }
    let count = enumeration_size(dev, n0, problem.horizon());
    if count > dev.enumeration_cap {
        return Err(Error::EnumerationCap {
            count,
            cap: dev.enumeration_cap,
        });
    }
    let sqrt_w = dev.c_v.map(f64::sqrt);
    let weighted = DenseQuadratic::new(DMatrix::from_diagonal(&sqrt_w) * &model.m_matrix)?;
    let mut e = Enumerator {
        model,
        weighted,
        sqrt_w,
        problem,
        dev,
        solver,
        memo: HashMap::new(),
        best: None,
        path: Vec::new(),
        evaluated: 0,
    };
    let start = (problem.initial_tap.clone(), problem.initial_cb.clone());
    e.search(0, &start, 0.0, 0)?;
    let (objective, movements, path) = e
        .best
        .take()
        .ok_or_else(|| Error::Infeasible("no admissible device trajectory".into()))?;
    let steps = path
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let c = &e.memo[&(t, s.clone())];
            ScheduleStep {
                n_tap: s.0.clone(),
                n_cb: s.1.clone(),
                qg: c.qg.iter().copied().collect(),
                voltage_cost: c.cost,
            }
        })
        .collect();
    Ok(DiscreteSchedule {
        steps,
        objective,
        movements,
        trajectories_evaluated: e.evaluated,
    })
}

/// Every constraint of the horizon problem, checked directly on a schedule.
pub fn check_schedule(schedule: &DiscreteSchedule, problem: &MpcProblem, dev: &DiscreteDeviceConfig) -> Result<()> {
    let fail = |msg: String| Err(Error::Infeasible(msg));
    if schedule.steps.len() != problem.horizon() {
        return fail(format!("schedule has {} steps, horizon is {}", schedule.steps.len(), problem.horizon()));
    }
    let mut prev_tap = problem.initial_tap.clone();
    let mut prev_cb = problem.initial_cb.clone();
    for (t, s) in schedule.steps.iter().enumerate() {
        for (i, &n) in s.n_tap.iter().enumerate() {
            if n < dev.tap_min || n > dev.tap_max {
                return fail(format!("step {t}: tap {n} outside [{}, {}]", dev.tap_min, dev.tap_max));
            }
            if (n - prev_tap[i]).abs() > dev.tap_change_limit {
                return fail(format!("step {t}: tap moves by more than {}", dev.tap_change_limit));
            }
        }
        for (b, (&n, bank)) in s.n_cb.iter().zip(&dev.banks).enumerate() {
            if n > bank.max_units {
                return fail(format!("step {t}: bank {b} has {n} units > {}", bank.max_units));
            }
            if (n as i64 - prev_cb[b] as i64).unsigned_abs() > dev.cb_switch_limit as u64 {
                return fail(format!("step {t}: bank {b} switches more than {}", dev.cb_switch_limit));
            }
        }
        let lim = &problem.forecasts[t].limits;
        for (k, &q) in s.qg.iter().enumerate() {
            if q < lim.lower[k] - 1e-12 || q > lim.upper[k] + 1e-12 {
                return fail(format!("step {t}: DER VAr at node {k} outside its limits"));
            }
        }
        prev_tap = s.n_tap.clone();
        prev_cb = s.n_cb.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_linear_model, parse_network};
    use approx::assert_abs_diff_eq;

    fn feeder(oltc: &str, banks: &str) -> NetworkModel {
        parse_network(&format!(
            r#"{{"base_voltage_v":4160,"base_power_va":1e5,
                "buses":[{{"id":0,"phases":"a"}},{{"id":1,"phases":"a","der":{{"capacity_pu":0.2}}}},{{"id":2,"phases":"a"}}],
                "segments":[{{"from":0,"to":1,"phases":"a","z_pu":[[0.02,0.05]]}},
                            {{"from":1,"to":2,"phases":"a","z_pu":[[0.02,0.05]]}}]
                {oltc} {banks}}}"#
        ))
        .unwrap()
    }

    fn problem(net: &NetworkModel, load: f64, steps: usize) -> MpcProblem {
        let m = net.dim();
        MpcProblem {
            period_s: 900.0,
            forecasts: vec![
                Forecast {
                    p: DVector::from_element(m, load),
                    ql: DVector::from_element(m, load / 2.0),
                    limits: VarLimits::symmetric(net.der_capacity()).unwrap(),
                };
                steps
            ],
            initial_tap: vec![0; net.root_dim()],
            initial_cb: vec![0; net.capacitor_banks.as_ref().map_or(0, |c| c.banks.len())],
            v_ref: 1.0,
            tap_model: TapModel::Linear,
        }
    }

    const OLTC: &str = r#","oltc":{"tap_step":[0.00625],"tap_min":-1,"tap_max":1,"max_change":1,"weight":1e-6}"#;

    #[test]
    fn tap_voltage_examples() {
        let step = DVector::from_element(3, 0.00625);
        assert_eq!(oltc_squared_voltage(&[0, 0, 0], &step), DVector::from_element(3, 1.0));
        let lin = oltc_squared_voltage(&[16, 16, 16], &step);
        let exact = oltc_squared_voltage_exact(&[16, 16, 16], &step);
        assert_abs_diff_eq!(lin[0], 1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(exact[0], 1.21, epsilon = 1e-15);
        for n in -16..=16 {
            let e = oltc_squared_voltage_exact(&[n], &step)[0] - oltc_squared_voltage(&[n], &step)[0];
            assert_abs_diff_eq!(e, (n as f64 * 0.00625).powi(2), epsilon = 1e-15);
        }
    }

    #[test]
    fn bank_injection() {
        let banks = vec![
            Bank { nodes: vec![0, 1], unit_var: 0.5, max_units: 3 },
            Bank { nodes: vec![3], unit_var: 0.1, max_units: 1 },
        ];
        assert_eq!(cb_reactive(&[0, 0], &banks, 4).unwrap(), DVector::zeros(4));
        let q = cb_reactive(&[2, 1], &banks, 4).unwrap();
        assert_eq!(q.as_slice(), &[1.0, 1.0, 0.0, 0.1]);
        assert!(cb_reactive(&[4, 0], &banks, 4).is_err());
    }

    #[test]
    fn heavy_switching_weight_keeps_devices_still() {
        let net = feeder(
            r#","oltc":{"tap_step":[0.00625],"tap_min":-2,"tap_max":2,"max_change":1,"weight":1e6}"#,
            "",
        );
        let model = build_linear_model(&net).unwrap();
        let dev = DiscreteDeviceConfig::from_network(&net).unwrap();
        let prob = problem(&net, 0.3, 2);
        let s = solve_mpc(&model, &prob, &dev, &ControllerConfig::default()).unwrap();
        assert!(s.steps.iter().all(|st| st.n_tap == vec![0]));
        assert_eq!(s.movements, 0);
    }

    #[test]
    fn single_step_matches_three_candidates() {
        let net = feeder(OLTC, "");
        let model = build_linear_model(&net).unwrap();
        let dev = DiscreteDeviceConfig::from_network(&net).unwrap();
        let prob = problem(&net, 0.3, 1);
        let s = solve_mpc(&model, &prob, &dev, &ControllerConfig::default()).unwrap();
        assert_eq!(s.trajectories_evaluated, 3);
        let weighted = DenseQuadratic::new(model.m_matrix.clone()).unwrap();
        let best = (-1..=1)
            .map(|n| {
                let v0 = oltc_squared_voltage(&[n], &dev.tap_step);
                let c = compute_c(&model, &v0, &prob.forecasts[0].p, &prob.forecasts[0].ql).unwrap();
                let r = pnm_solve(&weighted, &c, &DVector::from_element(2, 1.0), &prob.forecasts[0].limits, &ControllerConfig::default(), &DVector::zeros(2)).unwrap();
                (r.objective + 0.5 * dev.c_tap * (n * n) as f64, n)
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .unwrap();
        assert_abs_diff_eq!(s.objective, best.0, epsilon = 1e-12);
        assert_eq!(s.steps[0].n_tap, vec![best.1]);
    }

    #[test]
    fn depressed_voltage_raises_tap() {
        let net = feeder(OLTC, "");
        let model = build_linear_model(&net).unwrap();
        let dev = DiscreteDeviceConfig::from_network(&net).unwrap();
        let prob = problem(&net, 0.5, 1);
        let s = solve_mpc(&model, &prob, &dev, &ControllerConfig::default()).unwrap();
        assert!(s.steps[0].n_tap[0] > 0);
        let still = DiscreteDeviceConfig { tap_max: 0, tap_min: 0, ..dev.clone() };
        let s0 = solve_mpc(&model, &prob, &still, &ControllerConfig::default()).unwrap();
        assert!(s.objective < s0.objective);
        check_schedule(&s, &prob, &dev).unwrap();
    }

    #[test]
    fn receding_horizon_takes_first_step() {
        let net = feeder(
            OLTC,
            r#","capacitor_banks":{"switch_limit":1,"weight":1e-6,"banks":[{"bus":2,"phases":"a","unit_var_pu":0.05,"max_units":2}]}"#,
        );
        let model = build_linear_model(&net).unwrap();
        let dev = DiscreteDeviceConfig::from_network(&net).unwrap();
        let one = solve_mpc(&model, &problem(&net, 0.5, 1), &dev, &ControllerConfig::default()).unwrap();
        let (tap, cb) = apply_receding_horizon(&one);
        assert_eq!((tap, cb), (one.steps[0].n_tap.clone(), one.steps[0].n_cb.clone()));
        let three = solve_mpc(&model, &problem(&net, 0.5, 3), &dev, &ControllerConfig::default()).unwrap();
        assert_eq!(three.steps.len(), 3);
        let (tap, cb) = apply_receding_horizon(&three);
        assert_eq!((tap, cb), (three.steps[0].n_tap.clone(), three.steps[0].n_cb.clone()));
        check_schedule(&three, &problem(&net, 0.5, 3), &dev).unwrap();
    }

    #[test]
    fn cap_is_enforced() {
        let net = feeder(OLTC, "");
        let model = build_linear_model(&net).unwrap();
        let dev = DiscreteDeviceConfig { enumeration_cap: 8, ..DiscreteDeviceConfig::from_network(&net).unwrap() };
        let err = solve_mpc(&model, &problem(&net, 0.3, 2), &dev, &ControllerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { count: 9, cap: 8 }));
    }

    #[test]
    fn checker_rejects_bad_moves() {
        let net = feeder(OLTC, "");
        let model = build_linear_model(&net).unwrap();
        let dev = DiscreteDeviceConfig::from_network(&net).unwrap();
        let prob = problem(&net, 0.3, 2);
        let mut s = solve_mpc(&model, &prob, &dev, &ControllerConfig::default()).unwrap();
        s.steps[0].n_tap = vec![1];
        s.steps[1].n_tap = vec![-1];
        assert!(check_schedule(&s, &prob, &dev).is_err());
        s.steps[1].n_tap = vec![1];
        s.steps[1].qg = vec![5.0, 0.0];
        assert!(check_schedule(&s, &prob, &dev).is_err());
    }
}
