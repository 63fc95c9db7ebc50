use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use voltvar::benchmark::{StaticInstance, StaticLoading};
use voltvar::generate::{generate_feeder, FeederOptions};
use voltvar::linflow::{branch_flows, predict_voltages, voltages_from_flows, OperatingPoint};
use voltvar::netmodel::{build_incidence, build_linear_model, parse_network};
use voltvar::plant::{solve_nonlinear, PlantConfig};
use voltvar::pnm::{deviation_objective, ControllerConfig, Method};
use voltvar::NetworkModel;

fn feeder(buses: usize, seed: u64) -> NetworkModel {
    NetworkModel::from_document(&generate_feeder(&FeederOptions { buses, seed, ..Default::default() }).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn incidence_columns_are_signed_pairs(buses in 2usize..30, seed in 0u64..1000) {
        let net = feeder(buses, seed);
        let (a0, a) = build_incidence(&net);
        let full = DMatrix::from_fn(a0.nrows() + a.nrows(), a.ncols(), |i, j| {
            if i < a0.nrows() { a0[(i, j)] } else { a[(i - a0.nrows(), j)] }
        });
        for j in 0..full.ncols() {
            let col: Vec<f64> = full.column(j).iter().copied().filter(|&x| x != 0.0).collect();
            prop_assert_eq!(col.len(), 2);
            prop_assert_eq!(col.iter().sum::<f64>(), 0.0);
            prop_assert!(col.contains(&1.0) && col.contains(&-1.0));
        }
        prop_assert!(a.clone().lu().try_inverse().is_some());
    }

    #[test]
    fn stacking_is_a_bijection(buses in 2usize..30, seed in 0u64..1000) {
        let net = feeder(buses, seed);
        let mut seen = vec![false; net.dim()];
        for (k, pn) in net.phase_nodes.iter().enumerate() {
            prop_assert_eq!(net.phase_node_index(pn.bus, pn.phase), Some(k));
            seen[k] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
        let total: usize = net.buses.iter().filter(|b| b.id != 0).map(|b| b.phases.len()).sum();
        prop_assert_eq!(total, net.dim());
    }

    #[test]
    fn sensitivity_matches_dense_inverse(buses in 2usize..20, seed in 0u64..1000) {
        let net = feeder(buses, seed);
        let model = build_linear_model(&net).unwrap();
        let (_, a) = build_incidence(&net);
        let a_inv = a.lu().try_inverse().unwrap();
        let dx = DMatrix::from_fn(net.dim(), net.dim(), |i, j| {
            let e = DVector::from_fn(net.dim(), |k, _| if k == j { 1.0 } else { 0.0 });
            model.dx.mul_vec(&e)[i]
        });
        let oracle = a_inv.transpose() * dx * a_inv * 2.0;
        let err = (&model.m_matrix - &oracle).amax();
        prop_assert!(err <= 1e-12 * oracle.amax().max(1.0), "err {err:e}");
        let h = &model.hessian;
        prop_assert!((h - h.transpose()).amax() <= 1e-12 * h.amax().max(1.0));
        prop_assert!(h.clone().cholesky().is_some());
    }

    #[test]
    fn prediction_is_affine(buses in 2usize..25, seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let net = feeder(buses, seed);
        let model = build_linear_model(&net).unwrap();
        let m = net.dim();
        let c = DVector::from_fn(m, |k, _| 1.0 - 0.01 * k as f64);
        let q1 = DVector::from_fn(m, |k, _| ((k * 7 + 3) % 11) as f64 * 0.01);
        let q2 = DVector::from_fn(m, |k, _| -(((k * 5 + 1) % 13) as f64) * 0.01);
        let mix = &q1 * alpha + &q2 * (1.0 - alpha);
        let lhs = predict_voltages(&model, &mix, &c).unwrap().v;
        let rhs = predict_voltages(&model, &q1, &c).unwrap().v * alpha + predict_voltages(&model, &q2, &c).unwrap().v * (1.0 - alpha);
        prop_assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn flow_recursion_reproduces_prediction(buses in 2usize..30, seed in 0u64..1000) {
        let net = feeder(buses, seed);
        let model = build_linear_model(&net).unwrap();
        let m = net.dim();
        let p = DVector::from_fn(m, |k, _| 0.02 + 0.001 * (k % 5) as f64);
        let qc = DVector::from_fn(m, |k, _| 0.01 + 0.002 * (k % 3) as f64);
        let qg = DVector::from_fn(m, |k, _| if k % 4 == 0 { 0.03 } else { 0.0 });
        let v0 = DVector::from_element(net.root_dim(), 1.0);
        let point = OperatingPoint::new(v0.clone(), p.clone(), qc.clone()).unwrap();
        let predicted = predict_voltages(&model, &qg, &point.offset(&model).unwrap()).unwrap().v;
        let flows = branch_flows(&model, &p, &(&qc - &qg)).unwrap();
        let walked = voltages_from_flows(&net, &model, &v0, &flows).unwrap().v;
        prop_assert!((predicted - walked).amax() < 1e-10);
    }
}

/// Single-phase trees: M_ij is twice the reactance shared by the paths of i and j to the head.
#[test]
fn single_phase_path_sum_oracle() {
    let trees: [&[usize]; 4] = [&[0], &[0, 1, 2, 3, 4], &[0, 0, 1, 1], &[0, 1, 1, 2, 3]];
    for (t, parents) in trees.iter().enumerate() {
        let n = parents.len() + 1;
        let xs: Vec<f64> = (0..parents.len()).map(|i| 0.03 + 0.01 * ((i * 3 + t) % 5) as f64).collect();
        let buses: Vec<_> = (0..n).map(|id| serde_json::json!({"id": id, "phases": "b"})).collect();
        let segs: Vec<_> = parents
            .iter()
            .enumerate()
            .map(|(i, &p)| serde_json::json!({"from": p, "to": i + 1, "phases": "b", "z_pu": [[0.01, xs[i]]]}))
            .collect();
        let doc = serde_json::json!({"base_voltage_v": 2400, "base_power_va": 1e5, "buses": buses, "segments": segs});
        let net = parse_network(&doc.to_string()).unwrap();
        let model = build_linear_model(&net).unwrap();
        let path = |bus: usize| {
            let mut out = vec![];
            let mut b = bus;
            while b != 0 {
                out.push(b);
                b = parents[b - 1];
            }
            out
        };
        for (i, ni) in net.phase_nodes.iter().enumerate() {
            for (j, nj) in net.phase_nodes.iter().enumerate() {
                let (pi, pj) = (path(ni.bus), path(nj.bus));
                let shared: f64 = pi.iter().filter(|b| pj.contains(b)).map(|b| xs[b - 1]).sum();
                assert!((model.m_matrix[(i, j)] - 2.0 * shared).abs() < 1e-14, "tree {t} ({i},{j})");
            }
        }
    }
}

#[test]
fn plant_sweep_settles_monotonically() {
    for seed in 0..10 {
        let net = feeder(5 + 3 * seed as usize, seed);
        for load in [0.02, 0.06, 0.1] {
            let m = net.dim();
            let point = OperatingPoint::new(
                DVector::from_element(net.root_dim(), 1.0),
                DVector::from_element(m, load),
                DVector::from_element(m, load / 2.0),
            )
            .unwrap();
            let Ok(sol) = solve_nonlinear(&net, &point, &DVector::zeros(m), &PlantConfig::default()) else {
                continue;
            };
            let h = &sol.residual_history;
            for w in h[h.len().saturating_sub(3)..].windows(2) {
                assert!(w[1] <= w[0], "seed {seed} load {load}: {h:?}");
            }
        }
    }
}

#[test]
fn plant_tracks_linear_model_at_light_load() {
    for seed in 0..5 {
        let net = feeder(15, seed);
        let model = build_linear_model(&net).unwrap();
        let m = net.dim();
        for scale in [0.1, 0.05] {
            let point = OperatingPoint::new(
                DVector::from_element(net.root_dim(), 1.0),
                DVector::from_element(m, 0.06 * scale),
                DVector::from_element(m, 0.03 * scale),
            )
            .unwrap();
            let sol = solve_nonlinear(&net, &point, &DVector::zeros(m), &PlantConfig::default()).unwrap();
            let lin = predict_voltages(&model, &DVector::zeros(m), &point.offset(&model).unwrap()).unwrap().v;
            let drop = (DVector::from_element(m, 1.0) - &lin).amax();
            let err = (&sol.squared_magnitudes - &lin).amax();
            // the neglected loss terms scale with the square of the load
            assert!(err < 0.1 * drop, "seed {seed} scale {scale}: err {err:e} drop {drop:e}");
        }
    }
}

#[test]
fn control_never_hurts_on_the_plant() {
    for seed in 0..10 {
        let inst = StaticInstance::new(feeder(25, seed), &StaticLoading::default()).unwrap();
        let rep = inst.solve(Method::Pnm, &ControllerConfig::default()).unwrap();
        let with = inst.plant_objective(&rep.qg).unwrap();
        let without = inst.plant_objective(&DVector::zeros(inst.dim())).unwrap();
        assert!(with <= without, "seed {seed}: {with} > {without}");
        let sol = solve_nonlinear(&inst.net, &inst.point, &rep.qg, &PlantConfig::default()).unwrap();
        assert_eq!(with, deviation_objective(&sol.squared_magnitudes, &inst.v_ref));
    }
}
