//! Scenario files and the CSV / JSON artifacts written by runs.
//!
//! A scenario is a JSON document:
//!
//! ```json
//! {
//!   "network": "feeder.json",
//!   "resolution_s": 10, "control_period_s": 2, "noise_std": 1e-4,
//!   "profiles": { "load": [0.6, 0.8, 1.0], "sun": [0, 1, 0] },
//!   "load_p": { "default": { "profile": "load", "scale": 0.06 },
//!               "nodes": { "4.b": { "values": [0.1, 0.1, 0.2] } } },
//!   "load_q": { "default": { "constant": 0.03 } },
//!   "pv":     { "default": { "profile": "sun", "scale": 0.3 }, "csv": "pv.csv" },
//!   "head_voltage": { "constant": 1.0 }
//! }
//! ```
//!
//! Each quantity takes a per-node override, then a CSV column (header is the
//! phase-node label `bus.phase`), then the default. PV defaults apply only at
//! nodes with an inverter. `head_voltage` is a magnitude shared by all head
//! phases. Relative paths resolve against the scenario file's directory.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchRow;
use crate::error::{Error, Result};
use crate::netmodel::{parse_network, NetworkDocument, NetworkModel};
use crate::online::{ScenarioSeries, SimulationTrace};
use crate::plant::PlantSolution;
use crate::pnm::SolveReport;
use crate::upperlayer::DiscreteSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SeriesSpec {
    Values { values: Vec<f64> },
    Profile { profile: String, scale: f64 },
    Constant { constant: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantitySpec {
    #[serde(default)]
    pub default: Option<SeriesSpec>,
    #[serde(default)]
    pub nodes: BTreeMap<String, SeriesSpec>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub network: PathBuf,
    pub resolution_s: f64,
    pub control_period_s: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Needed only when every series is constant.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub profiles: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub load_p: QuantitySpec,
    #[serde(default)]
    pub load_q: QuantitySpec,
    #[serde(default)]
    pub pv: QuantitySpec,
    #[serde(default)]
    pub head_voltage: Option<SeriesSpec>,
}

pub fn read_network(path: &Path) -> Result<NetworkModel> {
    parse_network(&std::fs::read_to_string(path)?)
}

pub fn write_network<W: Write>(doc: &NetworkDocument, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, doc)?;
    Ok(())
}

/// Columns of a CSV whose header row holds phase-node labels; one row per sample.
pub fn read_series_csv<R: Read>(input: R) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut cols: BTreeMap<String, Vec<f64>> = headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    if cols.len() != headers.len() {
        return Err(Error::Scenario("duplicate column in series CSV".into()));
    }
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (h, field) in headers.iter().zip(rec.iter()) {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Scenario(format!("row {}: column {h}: not a number: {field:?}", row + 1)))?;
            cols.get_mut(h).expect("header present").push(x);
        }
    }
    Ok(cols)
}

pub fn write_series_csv<W: Write>(labels: &[String], series: &[DVector<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(labels)?;
    for s in series {
        w.write_record(s.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

enum Resolved<'a> {
    Series(&'a [f64], f64),
    Constant(f64),
}

impl Resolved<'_> {
    fn len(&self) -> Option<usize> {
        match self {
            Resolved::Series(s, _) => Some(s.len()),
            Resolved::Constant(_) => None,
        }
    }

    fn at(&self, t: usize) -> f64 {
        match self {
            Resolved::Series(s, k) => s[t] * k,
            Resolved::Constant(c) => *c,
        }
    }
}

fn resolve<'a>(spec: &'a SeriesSpec, profiles: &'a BTreeMap<String, Vec<f64>>) -> Result<Resolved<'a>> {
    Ok(match spec {
        SeriesSpec::Values { values } => Resolved::Series(values, 1.0),
        SeriesSpec::Profile { profile, scale } => Resolved::Series(
            profiles
                .get(profile)
                .ok_or_else(|| Error::Scenario(format!("unknown profile {profile:?}")))?,
            *scale,
        ),
        SeriesSpec::Constant { constant } => Resolved::Constant(*constant),
    })
}

struct Quantity<'a> {
    per_node: Vec<Option<Resolved<'a>>>,
}

fn quantity<'a>(
    name: &str,
    spec: &'a QuantitySpec,
    csv: Option<&'a BTreeMap<String, Vec<f64>>>,
    labels: &[String],
    applies: &dyn Fn(usize) -> bool,
    profiles: &'a BTreeMap<String, Vec<f64>>,
) -> Result<Quantity<'a>> {
    for key in spec.nodes.keys().chain(csv.into_iter().flat_map(|c| c.keys())) {
        if !labels.contains(key) {
            return Err(Error::Scenario(format!("{name}: unknown phase node {key:?}")));
        }
    }
    let default = spec.default.as_ref().map(|d| resolve(d, profiles)).transpose()?;
    let per_node = labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            if let Some(s) = spec.nodes.get(label) {
                return resolve(s, profiles).map(Some);
            }
            if let Some(col) = csv.and_then(|c| c.get(label)) {
                return Ok(Some(Resolved::Series(col, 1.0)));
            }
            Ok(match &default {
                Some(Resolved::Series(s, f)) if applies(k) => Some(Resolved::Series(s, *f)),
                Some(Resolved::Constant(c)) if applies(k) => Some(Resolved::Constant(*c)),
                _ => None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Quantity { per_node })
}

impl Quantity<'_> {
    fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_node.iter().flatten().filter_map(Resolved::len)
    }

    fn sample(&self, t: usize) -> DVector<f64> {
        DVector::from_iterator(self.per_node.len(), self.per_node.iter().map(|r| r.as_ref().map_or(0.0, |r| r.at(t))))
    }
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Build the time series for `net` from a scenario document. CSV paths resolve against `base`.
pub fn scenario_from_document(doc: &ScenarioDocument, net: &NetworkModel, base: &Path) -> Result<ScenarioSeries> {
    let labels = net.labels();
    let capacity = net.der_capacity();
    let load_csv = |q: &QuantitySpec| -> Result<Option<BTreeMap<String, Vec<f64>>>> {
        q.csv
            .as_ref()
            .map(|p| read_series_csv(std::fs::File::open(resolve_path(base, p))?))
            .transpose()
    };
    let (pc, qc_csv, pvc) = (load_csv(&doc.load_p)?, load_csv(&doc.load_q)?, load_csv(&doc.pv)?);
    let everywhere = |_: usize| true;
    let has_der = |k: usize| capacity[k] > 0.0;
    let p = quantity("load_p", &doc.load_p, pc.as_ref(), &labels, &everywhere, &doc.profiles)?;
    let q = quantity("load_q", &doc.load_q, qc_csv.as_ref(), &labels, &everywhere, &doc.profiles)?;
    let pv = quantity("pv", &doc.pv, pvc.as_ref(), &labels, &has_der, &doc.profiles)?;
    let head = doc
        .head_voltage
        .as_ref()
        .map(|h| resolve(h, &doc.profiles))
        .transpose()?
        .unwrap_or(Resolved::Constant(1.0));

    let mut lens: Vec<usize> = p.lengths().chain(q.lengths()).chain(pv.lengths()).chain(head.len()).collect();
    lens.extend(doc.samples);
    lens.sort_unstable();
    lens.dedup();
    let samples = match lens.as_slice() {
        [n] => *n,
        [] => return Err(Error::Scenario("every series is constant; set \"samples\"".into())),
        _ => return Err(Error::Scenario(format!("series lengths disagree: {lens:?}"))),
    };

    let n0 = net.root_dim();
    let series = ScenarioSeries {
        resolution_s: doc.resolution_s,
        control_period_s: doc.control_period_s,
        p: (0..samples).map(|t| p.sample(t)).collect(),
        qc: (0..samples).map(|t| q.sample(t)).collect(),
        pv_real: (0..samples).map(|t| pv.sample(t)).collect(),
        v0: (0..samples).map(|t| DVector::from_element(n0, head.at(t).powi(2))).collect(),
        capacity,
        noise_std: doc.noise_std,
    };
    series.validate(net.dim(), n0)?;
    Ok(series)
}

/// Load a scenario file and the network it references.
pub fn load_scenario(path: &Path) -> Result<(NetworkModel, ScenarioSeries)> {
    let doc: ScenarioDocument =
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Scenario(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let net = read_network(&resolve_path(base, &doc.network))?;
    let series = scenario_from_document(&doc, &net, base)?;
    Ok((net, series))
}

/// One row per control step; per-node columns `v.<label>` (noise-free |V|) and `qg.<label>` at DER nodes.
pub fn write_trace_csv<W: Write>(trace: &SimulationTrace, capacity: &DVector<f64>, out: W) -> Result<()> {
    let der: Vec<usize> = (0..capacity.len()).filter(|&k| capacity[k] > 0.0).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["step", "time_s", "objective", "backtracks", "active", "exhausted", "plant_converged"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(trace.labels.iter().map(|l| format!("v.{l}")));
    header.extend(der.iter().map(|&k| format!("qg.{}", trace.labels[k])));
    w.write_record(&header)?;
    for r in &trace.rows {
        let mut rec = vec![
            r.step.to_string(),
            r.time_s.to_string(),
            r.objective.to_string(),
            r.backtracks.to_string(),
            r.active.to_string(),
            r.exhausted.to_string(),
            r.plant_converged.to_string(),
        ];
        rec.extend(r.magnitudes.iter().map(|x| x.to_string()));
        rec.extend(der.iter().map(|&k| r.qg[k].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize, W: Write>(value: &T, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, value)?;
    Ok(())
}

/// Per-iteration convergence record of an offline solve.
pub fn write_solve_trace_csv<W: Write>(report: &SolveReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "objective", "alpha", "backtracks", "active", "step_inf"])?;
    w.write_record(["0", &report.initial_objective.to_string(), "", "", "", ""])?;
    for (i, r) in report.history.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.objective.to_string(),
            r.alpha.to_string(),
            r.backtracks.to_string(),
            r.active.to_string(),
            r.step.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Voltage table of a plant solve: one row per phase node.
pub fn write_voltage_csv<W: Write>(labels: &[String], sol: &PlantSolution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "v_squared", "magnitude", "angle_deg"])?;
    for (label, z) in labels.iter().zip(sol.complex_voltages.iter()) {
        w.write_record([
            label.clone(),
            z.norm_sqr().to_string(),
            z.norm().to_string(),
            z.arg().to_degrees().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_schedule<W: Write>(schedule: &DiscreteSchedule, out: W) -> Result<()> {
    write_json(schedule, out)
}
