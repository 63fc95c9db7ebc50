#![allow(dead_code)]

use nalgebra::DVector;
use voltvar::generate::{generate_feeder, FeederOptions};
use voltvar::netmodel::build_linear_model;
use voltvar::online::ScenarioSeries;
use voltvar::{LinearSensitivityModel, NetworkModel};

pub fn feeder(buses: usize, seed: u64) -> NetworkModel {
    NetworkModel::from_document(&generate_feeder(&FeederOptions { buses, seed, ..Default::default() }).unwrap()).unwrap()
}

pub fn feeder_with_model(buses: usize, seed: u64) -> (NetworkModel, LinearSensitivityModel) {
    let net = feeder(buses, seed);
    let model = build_linear_model(&net).unwrap();
    (net, model)
}

fn bump(x: f64, centre: f64, width: f64) -> f64 {
    (-((x - centre) / width).powi(2)).exp()
}

/// A compressed day: a midday PV peak, then an evening load peak that drives
/// the uncontrolled feeder below 0.95 pu. 200 samples at 10 s, control every 2 s.
pub fn daily_scenario(net: &NetworkModel) -> ScenarioSeries {
    let m = net.dim();
    let cap = net.der_capacity();
    let samples = 200;
    let mut s = ScenarioSeries {
        resolution_s: 10.0,
        control_period_s: 2.0,
        p: vec![],
        qc: vec![],
        pv_real: vec![],
        v0: vec![],
        capacity: cap.clone(),
        noise_std: 1e-4,
    };
    for t in 0..samples {
        let x = t as f64 / samples as f64;
        let load = 0.6 + 0.75 * bump(x, 0.72, 0.12);
        let sun = 0.3 * bump(x, 0.35, 0.12);
        s.p.push(DVector::from_element(m, 0.06 * load));
        s.qc.push(DVector::from_element(m, 0.03 * load));
        s.pv_real.push(cap.map(|c| if c > 0.0 { sun } else { 0.0 }));
        s.v0.push(DVector::from_element(net.root_dim(), 1.0));
    }
    s
}

/// Two static regimes of `steps_each` control steps: PV-rich light load, then heavy load without PV.
pub fn two_regime_scenario(net: &NetworkModel, steps_each: usize) -> (ScenarioSeries, [(DVector<f64>, DVector<f64>, DVector<f64>); 2]) {
    let m = net.dim();
    let cap = net.der_capacity();
    let regimes = [(0.06, 0.03, 0.2), (0.1, 0.05, 0.0)].map(|(lp, lq, pv)| {
        (
            DVector::from_element(m, lp),
            DVector::from_element(m, lq),
            cap.map(|c| if c > 0.0 { pv } else { 0.0 }),
        )
    });
    let mut s = ScenarioSeries {
        resolution_s: 1.0,
        control_period_s: 1.0,
        p: vec![],
        qc: vec![],
        pv_real: vec![],
        v0: vec![],
        capacity: cap,
        noise_std: 0.0,
    };
    for (p, q, pv) in &regimes {
        for _ in 0..steps_each {
            s.p.push(p.clone());
            s.qc.push(q.clone());
            s.pv_real.push(pv.clone());
            s.v0.push(DVector::from_element(net.root_dim(), 1.0));
        }
    }
    (s, regimes)
}
