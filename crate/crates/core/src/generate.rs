//! Random radial unbalanced test feeders.

use nalgebra::DVector;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netmodel::{
    tilde_impedance, BusDoc, CapacitorBankSpec, CapacitorBanksSpec, DerDoc, NetworkDocument, NetworkModel, OltcSpec,
    Phase, PhaseSet, SegmentDoc,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FeederOptions {
    pub buses: usize,
    pub seed: u64,
    /// Probability that a bus below a multi-phase parent drops to a phase subset.
    pub lateral_probability: f64,
    /// Probability that a bus hangs off one of the most recent buses (long runs) rather than anywhere.
    pub chain_bias: f64,
    pub xr_range: (f64, f64),
    /// Mutual impedance as a fraction of self impedance.
    pub mutual_range: (f64, f64),
    pub der_fraction: f64,
    pub der_capacity: f64,
    /// Per-phase-node nominal load used to size impedances.
    pub nominal_load: (f64, f64),
    /// Lowest |V| the linear model predicts under nominal load and no DER output.
    pub target_min_voltage: f64,
    /// Add an OLTC and capacitor banks.
    pub devices: bool,
}

impl Default for FeederOptions {
    fn default() -> Self {
        FeederOptions {
            buses: 25,
            seed: 0,
            lateral_probability: 0.35,
            chain_bias: 0.6,
            xr_range: (0.5, 3.0),
            mutual_range: (0.25, 0.45),
            der_fraction: 0.4,
            der_capacity: 0.5,
            nominal_load: (0.06, 0.03),
            target_min_voltage: 0.95,
            devices: false,
        }
    }
}

fn random_subset(rng: &mut ChaCha8Rng, parent: PhaseSet) -> PhaseSet {
    let phases: Vec<Phase> = parent.iter().collect();
    let k = rng.random_range(1..phases.len());
    let mut chosen: Vec<Phase> = phases.choose_multiple(rng, k).copied().collect();
    chosen.sort();
    PhaseSet::from_phases(chosen)
}

fn random_impedance(rng: &mut ChaCha8Rng, n: usize, opts: &FeederOptions) -> Vec<[f64; 2]> {
    let mag = rng.random_range(0.5..1.5);
    let ratio = rng.random_range(opts.xr_range.0..=opts.xr_range.1);
    let r = mag / (1.0 + ratio * ratio).sqrt();
    let x = r * ratio;
    let mut z = vec![[0.0, 0.0]; n * n];
    let selfs: Vec<f64> = (0..n).map(|_| rng.random_range(0.9..1.1)).collect();
    for i in 0..n {
        z[i * n + i] = [r * selfs[i], x * selfs[i]];
        for j in (i + 1)..n {
            let f = rng.random_range(opts.mutual_range.0..=opts.mutual_range.1);
            let zij = [r * f, x * f];
            z[i * n + j] = zij;
            z[j * n + i] = zij;
        }
    }
    z
}

/// Linear squared-voltage drop at every phase node under `load` per phase node,
/// walked directly over the tree.
fn linear_drops(net: &NetworkModel, load: (f64, f64)) -> Result<DVector<f64>> {
    let m = net.dim();
    let mut p = DVector::from_element(m, load.0);
    let mut q = DVector::from_element(m, load.1);
    for &k in net.topo_order().iter().rev() {
        if let Ok(parent) = net.parent(k) {
            p[parent] += p[k];
            q[parent] += q[k];
        }
    }
    let mut drop = DVector::zeros(m);
    for (si, seg) in net.segments.iter().enumerate() {
        let off = net.segment_offset(si);
        let n = seg.phases.len();
        let (rt, xt) = tilde_impedance(&seg.impedance, seg.phases)?;
        let d = (rt * p.rows(off, n) + xt * q.rows(off, n)) * 2.0;
        drop.rows_mut(off, n).copy_from(&d);
    }
    let mut total = DVector::zeros(m);
    for &k in net.topo_order() {
        let up = net.parent(k).map_or(0.0, |p| total[p]);
        total[k] = up + drop[k];
    }
    Ok(total)
}

/// Synthesize a feeder document that validates under `parse_network`.
pub fn generate_feeder(opts: &FeederOptions) -> Result<NetworkDocument> {
    if opts.buses < 2 {
        return Err(Error::Config(format!("a feeder needs at least 2 buses, got {}", opts.buses)));
    }
    if !(opts.target_min_voltage > 0.0 && opts.target_min_voltage < 1.0) {
        return Err(Error::Config("target_min_voltage must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut phases = vec![PhaseSet::ABC; opts.buses];
    let mut buses = vec![BusDoc {
        id: 0,
        phases: PhaseSet::ABC.to_string(),
        der: None,
    }];
    let mut segments = Vec::with_capacity(opts.buses - 1);

    for id in 1..opts.buses {
        let parent = if id == 1 {
            0
        } else if rng.random_bool(opts.chain_bias) {
            rng.random_range(id.saturating_sub(3).max(1)..id)
        } else {
            rng.random_range(0..id)
        };
        let pp = phases[parent];
        let own = if id > 1 && pp.len() > 1 && rng.random_bool(opts.lateral_probability) {
            random_subset(&mut rng, pp)
        } else {
            pp
        };
        phases[id] = own;
        let der = rng
            .random_bool(opts.der_fraction)
            .then_some(DerDoc {
                capacity_pu: opts.der_capacity,
            });
        buses.push(BusDoc {
            id,
            phases: own.to_string(),
            der,
        });
        segments.push(SegmentDoc {
            from: parent,
            to: id,
            phases: own.to_string(),
            z_pu: Some(random_impedance(&mut rng, own.len(), opts)),
            z_ohm: None,
        });
    }
    if opts.der_fraction > 0.0 && buses.iter().all(|b| b.der.is_none()) {
        let id = rng.random_range(1..opts.buses);
        buses[id].der = Some(DerDoc {
            capacity_pu: opts.der_capacity,
        });
    }

    let mut doc = NetworkDocument {
        base_voltage_v: 4160.0,
        base_power_va: 1e5,
        buses,
        segments,
        oltc: None,
        capacitor_banks: None,
    };

    // impedances enter the linear drop linearly, so one rescale hits the target
    let net = NetworkModel::from_document(&doc)?;
    let worst = linear_drops(&net, opts.nominal_load)?.max();
    let scale = (1.0 - opts.target_min_voltage.powi(2)) / worst;
    for seg in &mut doc.segments {
        for z in seg.z_pu.iter_mut().flatten() {
            z[0] *= scale;
            z[1] *= scale;
        }
    }

    if opts.devices {
        doc.oltc = Some(OltcSpec {
            tap_step: vec![0.00625],
            tap_min: -16,
            tap_max: 16,
            max_change: 1,
            weight: 1e-4,
        });
        let candidates: Vec<usize> = (1..opts.buses).filter(|&b| phases[b] == PhaseSet::ABC).collect();
        let bank_bus = *candidates.last().unwrap_or(&1);
        doc.capacitor_banks = Some(CapacitorBanksSpec {
            switch_limit: 1,
            weight: 1e-4,
            banks: vec![CapacitorBankSpec {
                bus: bank_bus,
                phases: phases[bank_bus].to_string(),
                unit_var_pu: 0.1,
                max_units: 2,
            }],
        });
    }
    NetworkModel::from_document(&doc)?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linflow::{branch_flows, voltages_from_flows};
    use crate::netmodel::build_linear_model;

    #[test]
    fn two_bus_is_minimal_and_deterministic() {
        let opts = FeederOptions {
            buses: 2,
            ..Default::default()
        };
        let a = generate_feeder(&opts).unwrap();
        assert_eq!(a, generate_feeder(&opts).unwrap());
        assert_eq!(a.buses.len(), 2);
        assert_eq!(a.segments[0].phases, "abc");
        assert!(generate_feeder(&FeederOptions { buses: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn seeds_differ_and_phases_nest() {
        let a = generate_feeder(&FeederOptions { seed: 1, buses: 40, ..Default::default() }).unwrap();
        let b = generate_feeder(&FeederOptions { seed: 2, buses: 40, ..Default::default() }).unwrap();
        assert_ne!(a, b);
        let net = NetworkModel::from_document(&a).unwrap();
        assert!(net.buses.iter().any(|b| b.phases.len() < 3));
        for s in &net.segments {
            let parent = net.bus(s.from).unwrap().phases;
            assert!(s.phases.is_subset(parent));
        }
    }

    #[test]
    fn nominal_load_hits_target_voltage() {
        let opts = FeederOptions {
            buses: 30,
            seed: 7,
            ..Default::default()
        };
        let net = NetworkModel::from_document(&generate_feeder(&opts).unwrap()).unwrap();
        let model = build_linear_model(&net).unwrap();
        let m = net.dim();
        // the model's own flow recursion agrees with the generator's sizing
        let flows = branch_flows(
            &model,
            &DVector::from_element(m, opts.nominal_load.0),
            &DVector::from_element(m, opts.nominal_load.1),
        )
        .unwrap();
        let v = voltages_from_flows(&net, &model, &DVector::from_element(3, 1.0), &flows).unwrap();
        let lowest = v.v.min().sqrt();
        assert!((lowest - opts.target_min_voltage).abs() < 1e-9, "{lowest}");
    }

    #[test]
    fn devices_section_validates() {
        let doc = generate_feeder(&FeederOptions { devices: true, ..Default::default() }).unwrap();
        let net = NetworkModel::from_document(&doc).unwrap();
        assert!(net.oltc.is_some() && net.capacitor_banks.is_some());
    }
}
