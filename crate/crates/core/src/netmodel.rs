//! Phase-aware radial feeder and the constant matrices of the compact
//! linearized branch-flow model.
//!
//! Phase nodes are stacked by ascending bus id and, within a bus, in the
//! order a, b, c. Every non-root bus `j` is fed by exactly one segment whose
//! phase set equals the phase set of `j`, so the segment-phase columns of the
//! incidence matrix line up one-to-one with the phase-node rows: column `k`
//! belongs to the segment phase that feeds phase node `k`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, Complex, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type Complex64 = Complex<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }

    pub fn from_char(c: char) -> Option<Phase> {
        match c.to_ascii_lowercase() {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }

    /// Balanced phasor rotation `1, e^{-j2π/3}, e^{j2π/3}`.
    pub fn rotation(self) -> Complex64 {
        let angle = match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * std::f64::consts::PI / 3.0,
            Phase::C => 2.0 * std::f64::consts::PI / 3.0,
        };
        Complex64::from_polar(1.0, angle)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Ordered subset of {a, b, c}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn empty() -> Self {
        PhaseSet(0)
    }

    pub fn single(phase: Phase) -> Self {
        PhaseSet(1 << phase.index())
    }

    pub fn from_phases<I: IntoIterator<Item = Phase>>(phases: I) -> Self {
        PhaseSet(phases.into_iter().fold(0, |acc, p| acc | (1 << p.index())))
    }

    pub fn contains(self, phase: Phase) -> bool {
        self.0 & (1 << phase.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 | other.0)
    }

    pub fn intersection(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Position of `phase` within this set, in a < b < c order.
    pub fn position(self, phase: Phase) -> Option<usize> {
        self.iter().position(|p| p == phase)
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p.label())?;
        }
        Ok(())
    }
}

impl FromStr for PhaseSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = PhaseSet::empty();
        for c in s.chars() {
            let p = Phase::from_char(c)
                .ok_or_else(|| Error::Malformed(format!("unknown phase '{c}' in \"{s}\"")))?;
            if set.contains(p) {
                return Err(Error::Malformed(format!("phase '{c}' repeated in \"{s}\"")));
            }
            set = set.union(PhaseSet::single(p));
        }
        if set.is_empty() {
            return Err(Error::Malformed("empty phase set".into()));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Der {
    /// Inverter apparent-power capacity per phase, per-unit.
    pub capacity_pu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub phases: PhaseSet,
    pub der: Option<Der>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSegment {
    pub from: usize,
    pub to: usize,
    pub phases: PhaseSet,
    /// Per-unit impedance, rows/columns ordered like `phases`.
    pub impedance: DMatrix<Complex64>,
}

/// A (bus, phase) pair in the global stacking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhaseNode {
    pub bus: usize,
    pub phase: Phase,
}

impl fmt::Display for PhaseNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.bus, self.phase)
    }
}

impl FromStr for PhaseNode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (bus, phase) = s
            .split_once('.')
            .ok_or_else(|| Error::Malformed(format!("phase-node label \"{s}\" is not <bus>.<phase>")))?;
        let bus = bus
            .trim()
            .parse()
            .map_err(|_| Error::Malformed(format!("bad bus id in \"{s}\"")))?;
        let mut chars = phase.trim().chars();
        let phase = match (chars.next().and_then(Phase::from_char), chars.next()) {
            (Some(p), None) => p,
            _ => return Err(Error::Malformed(format!("bad phase in \"{s}\""))),
        };
        Ok(PhaseNode { bus, phase })
    }
}

/// OLTC description embedded in the network document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OltcSpec {
    /// Tap step per head phase; a single value applies to every phase.
    pub tap_step: Vec<f64>,
    pub tap_min: i32,
    pub tap_max: i32,
    /// Largest |Δn_tap| per phase per period.
    pub max_change: i32,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitorBankSpec {
    pub bus: usize,
    /// Phases switched together by this bank (ganged).
    pub phases: String,
    pub unit_var_pu: f64,
    pub max_units: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitorBanksSpec {
    /// Largest |Δn_cb| per bank per period.
    pub switch_limit: u32,
    #[serde(default = "one")]
    pub weight: f64,
    pub banks: Vec<CapacitorBankSpec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerDoc {
    pub capacity_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusDoc {
    pub id: usize,
    pub phases: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub der: Option<DerDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDoc {
    pub from: usize,
    pub to: usize,
    pub phases: String,
    /// Row-major `[re, im]` pairs, per-unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_pu: Option<Vec<[f64; 2]>>,
    /// Row-major `[re, im]` pairs in ohms; converted with the base impedance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_ohm: Option<Vec<[f64; 2]>>,
}

/// On-disk network description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub base_voltage_v: f64,
    pub base_power_va: f64,
    pub buses: Vec<BusDoc>,
    pub segments: Vec<SegmentDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oltc: Option<OltcSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacitor_banks: Option<CapacitorBanksSpec>,
}

/// Validated radial feeder.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    /// Sorted by id; `buses[0]` is the feeder head.
    pub buses: Vec<Bus>,
    /// Sorted by to-bus id.
    pub segments: Vec<LineSegment>,
    pub base_voltage: f64,
    pub base_power: f64,
    /// Non-root phase nodes in stacking order.
    pub phase_nodes: Vec<PhaseNode>,
    phase_node_index: HashMap<(usize, Phase), usize>,
    /// For each phase node: its parent phase node, or `Err(root_row)` when fed by bus 0.
    parents: Vec<std::result::Result<usize, usize>>,
    /// Phase nodes ordered so that every parent precedes its children.
    topo_order: Vec<usize>,
    /// For each phase node: index of the segment feeding its bus.
    node_segment: Vec<usize>,
    /// Stacking offset of each segment's block (segment order).
    segment_offsets: Vec<usize>,
    pub oltc: Option<OltcSpec>,
    pub capacitor_banks: Option<CapacitorBanksSpec>,
}

impl NetworkModel {
    /// m: number of non-root phase nodes.
    pub fn dim(&self) -> usize {
        self.phase_nodes.len()
    }

    /// n_0: number of phases at the feeder head.
    pub fn root_dim(&self) -> usize {
        self.root_phases().len()
    }

    pub fn root_phases(&self) -> PhaseSet {
        self.buses[0].phases
    }

    pub fn phase_node_index(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.phase_node_index.get(&(bus, phase)).copied()
    }

    pub fn bus(&self, id: usize) -> Option<&Bus> {
        self.buses
            .binary_search_by_key(&id, |b| b.id)
            .ok()
            .map(|i| &self.buses[i])
    }

    /// Parent phase node of `k`; `Err(r)` means `k` is fed directly from head row `r`.
    pub fn parent(&self, k: usize) -> std::result::Result<usize, usize> {
        self.parents[k]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Segment index feeding phase node `k`.
    pub fn segment_of(&self, k: usize) -> usize {
        self.node_segment[k]
    }

    /// Stacking offset of segment `s` (its phase nodes are contiguous).
    pub fn segment_offset(&self, s: usize) -> usize {
        self.segment_offsets[s]
    }

    /// Per-phase-node inverter capacity (zero where there is no DER).
    pub fn der_capacity(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.phase_nodes.iter().map(|n| {
                self.bus(n.bus)
                    .and_then(|b| b.der)
                    .map_or(0.0, |d| d.capacity_pu)
            }),
        )
    }

    pub fn labels(&self) -> Vec<String> {
        self.phase_nodes.iter().map(|n| n.to_string()).collect()
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            base_voltage_v: self.base_voltage,
            base_power_va: self.base_power,
            buses: self
                .buses
                .iter()
                .map(|b| BusDoc {
                    id: b.id,
                    phases: b.phases.to_string(),
                    der: b.der.map(|d| DerDoc {
                        capacity_pu: d.capacity_pu,
                    }),
                })
                .collect(),
            segments: self
                .segments
                .iter()
                .map(|s| SegmentDoc {
                    from: s.from,
                    to: s.to,
                    phases: s.phases.to_string(),
                    z_pu: Some(s.impedance.transpose().iter().map(|z| [z.re, z.im]).collect()),
                    z_ohm: None,
                })
                .collect(),
            oltc: self.oltc.clone(),
            capacitor_banks: self.capacitor_banks.clone(),
        }
    }
}

/// Parse and validate a JSON network document.
pub fn parse_network(text: &str) -> Result<NetworkModel> {
    let doc: NetworkDocument =
        serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    NetworkModel::from_document(&doc)
}

impl NetworkModel {
    pub fn from_document(doc: &NetworkDocument) -> Result<NetworkModel> {
        if !(doc.base_voltage_v > 0.0 && doc.base_power_va > 0.0) {
            return Err(Error::Malformed("base voltage and power must be positive".into()));
        }
        let z_base = doc.base_voltage_v * doc.base_voltage_v / doc.base_power_va;

        let mut buses = BTreeMap::new();
        for b in &doc.buses {
            let phases: PhaseSet = b.phases.parse()?;
            let der = match &b.der {
                Some(d) if !(d.capacity_pu >= 0.0 && d.capacity_pu.is_finite()) => {
                    return Err(Error::Malformed(format!("bus {}: bad DER capacity", b.id)));
                }
                Some(d) => Some(Der {
                    capacity_pu: d.capacity_pu,
                }),
                None => None,
            };
            if buses
                .insert(b.id, Bus { id: b.id, phases, der })
                .is_some()
            {
                return Err(Error::Malformed(format!("bus {} declared twice", b.id)));
            }
        }
        if !buses.contains_key(&0) {
            return Err(Error::Malformed("bus 0 (feeder head) is missing".into()));
        }
        if buses.len() < 2 {
            return Err(Error::Malformed("feeder needs at least one segment".into()));
        }

        let mut segments = Vec::with_capacity(doc.segments.len());
        for s in &doc.segments {
            for id in [s.from, s.to] {
                if !buses.contains_key(&id) {
                    return Err(Error::Malformed(format!(
                        "segment {}->{} references unknown bus {id}",
                        s.from, s.to
                    )));
                }
            }
            if s.from == s.to {
                return Err(Error::Cycle(s.from));
            }
            let phases: PhaseSet = s.phases.parse()?;
            let n = phases.len();
            let (raw, scale) = match (&s.z_pu, &s.z_ohm) {
                (Some(z), None) => (z, 1.0),
                (None, Some(z)) => (z, 1.0 / z_base),
                _ => {
                    return Err(Error::Malformed(format!(
                        "segment {}->{} needs exactly one of z_pu / z_ohm",
                        s.from, s.to
                    )))
                }
            };
            if raw.len() != n * n {
                return Err(Error::Malformed(format!(
                    "segment {}->{}: impedance has {} entries, expected {}",
                    s.from,
                    s.to,
                    raw.len(),
                    n * n
                )));
            }
            if raw.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Malformed(format!(
                    "segment {}->{}: non-finite impedance",
                    s.from, s.to
                )));
            }
            let impedance =
                DMatrix::from_row_iterator(n, n, raw.iter().map(|[re, im]| Complex64::new(*re, *im) * scale));
            segments.push(LineSegment {
                from: s.from,
                to: s.to,
                phases,
                impedance,
            });
        }

        detect_directed_cycle(&buses, &segments)?;

        let mut parent_of: HashMap<usize, usize> = HashMap::new();
        for s in &segments {
            if s.to == 0 {
                return Err(Error::Malformed("bus 0 cannot be a segment's to-bus".into()));
            }
            if parent_of.insert(s.to, s.from).is_some() {
                return Err(Error::DuplicateSegment(s.to));
            }
        }
        for &id in buses.keys().filter(|&&id| id != 0) {
            if !parent_of.contains_key(&id) {
                return Err(Error::Disconnected(id));
            }
        }
        // Walking parents from every bus must reach 0; otherwise there is an
        // undirected cycle disconnected from the head.
        for &start in buses.keys() {
            let mut cur = start;
            let mut steps = 0;
            while cur != 0 {
                cur = parent_of[&cur];
                steps += 1;
                if steps > buses.len() {
                    return Err(Error::Cycle(start));
                }
            }
        }

        for s in &segments {
            let from = &buses[&s.from];
            let to = &buses[&s.to];
            for p in s.phases.iter() {
                if !from.phases.contains(p) || !to.phases.contains(p) {
                    return Err(Error::PhaseMismatch {
                        from: s.from,
                        to: s.to,
                        phase: p.label(),
                    });
                }
            }
            if s.phases != to.phases {
                let missing = to.phases.iter().find(|p| !s.phases.contains(*p)).unwrap();
                return Err(Error::PhaseMismatch {
                    from: s.from,
                    to: s.to,
                    phase: missing.label(),
                });
            }
            let (_, x) = tilde_impedance(&s.impedance, s.phases)?;
            let sv = x.clone().singular_values();
            let (lo, hi) = (sv.min(), sv.max());
            if !(hi > 0.0) || lo <= 1e-12 * hi {
                return Err(Error::SingularReactance {
                    from: s.from,
                    to: s.to,
                });
            }
        }

        let outgoing = segments
            .iter()
            .filter(|s| s.from == 0)
            .fold(PhaseSet::empty(), |acc, s| acc.union(s.phases));
        if outgoing != buses[&0].phases {
            return Err(Error::Malformed(format!(
                "bus 0 declares phases \"{}\" but its outgoing segments carry \"{}\"",
                buses[&0].phases, outgoing
            )));
        }

        segments.sort_by_key(|s| s.to);
        let buses: Vec<Bus> = buses.into_values().collect();

        let mut phase_nodes = Vec::new();
        let mut phase_node_index = HashMap::new();
        for b in buses.iter().skip(1) {
            for p in b.phases.iter() {
                phase_node_index.insert((b.id, p), phase_nodes.len());
                phase_nodes.push(PhaseNode { bus: b.id, phase: p });
            }
        }

        let root_phases = buses[0].phases;
        let parents = phase_nodes
            .iter()
            .map(|n| {
                let pb = parent_of[&n.bus];
                if pb == 0 {
                    Err(root_phases.position(n.phase).expect("validated phase subset"))
                } else {
                    Ok(phase_node_index[&(pb, n.phase)])
                }
            })
            .collect::<Vec<_>>();

        let mut segment_offsets = Vec::with_capacity(segments.len());
        let mut node_segment = vec![0; phase_nodes.len()];
        for (si, s) in segments.iter().enumerate() {
            let first = s.phases.iter().next().unwrap();
            let off = phase_node_index[&(s.to, first)];
            segment_offsets.push(off);
            for i in 0..s.phases.len() {
                node_segment[off + i] = si;
            }
        }

        // Breadth-first order over buses, expanded to phase nodes.
        let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
        for s in &segments {
            children.entry(s.from).or_default().push(s.to);
        }
        let mut topo_order = Vec::with_capacity(phase_nodes.len());
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(b) = queue.pop_front() {
            if b != 0 {
                let bus = &buses[buses.binary_search_by_key(&b, |x| x.id).unwrap()];
                topo_order.extend(bus.phases.iter().map(|p| phase_node_index[&(b, p)]));
            }
            if let Some(ch) = children.get(&b) {
                queue.extend(ch.iter().copied());
            }
        }
        debug_assert_eq!(topo_order.len(), phase_nodes.len());

        let net = NetworkModel {
            buses,
            segments,
            base_voltage: doc.base_voltage_v,
            base_power: doc.base_power_va,
            phase_nodes,
            phase_node_index,
            parents,
            topo_order,
            node_segment,
            segment_offsets,
            oltc: doc.oltc.clone(),
            capacitor_banks: doc.capacitor_banks.clone(),
        };
        net.validate_devices()?;
        Ok(net)
    }

    fn validate_devices(&self) -> Result<()> {
        if let Some(o) = &self.oltc {
            if o.tap_step.len() != 1 && o.tap_step.len() != self.root_dim() {
                return Err(Error::Malformed(format!(
                    "oltc.tap_step needs 1 or {} entries",
                    self.root_dim()
                )));
            }
            if o.tap_min > o.tap_max || o.max_change < 0 || !(o.weight > 0.0) {
                return Err(Error::Malformed("oltc ranges or weight invalid".into()));
            }
        }
        if let Some(cb) = &self.capacitor_banks {
            if !(cb.weight > 0.0) {
                return Err(Error::Malformed("capacitor_banks.weight must be positive".into()));
            }
            for bank in &cb.banks {
                let phases: PhaseSet = bank.phases.parse()?;
                let bus = self.bus(bank.bus).filter(|b| b.id != 0).ok_or_else(|| {
                    Error::Malformed(format!("capacitor bank on unknown bus {}", bank.bus))
                })?;
                if !phases.is_subset(bus.phases) {
                    return Err(Error::Malformed(format!(
                        "capacitor bank phases \"{}\" not present at bus {}",
                        bank.phases, bank.bus
                    )));
                }
            }
        }
        Ok(())
    }
}

fn detect_directed_cycle(buses: &BTreeMap<usize, Bus>, segments: &[LineSegment]) -> Result<()> {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for s in segments {
        adj.entry(s.from).or_default().push(s.to);
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: HashMap<usize, u8> = HashMap::new();
    for &start in buses.keys() {
        if state.get(&start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state.insert(start, 1);
        while let Some((node, next)) = stack.pop() {
            let succ = adj.get(&node).map(|v| v.as_slice()).unwrap_or(&[]);
            if next < succ.len() {
                stack.push((node, next + 1));
                let s = succ[next];
                match state.get(&s).copied().unwrap_or(0) {
                    0 => {
                        state.insert(s, 1);
                        stack.push((s, 0));
                    }
                    1 => return Err(Error::Cycle(s)),
                    _ => {}
                }
            } else {
                state.insert(node, 2);
            }
        }
    }
    Ok(())
}

/// Phase-transformed impedance `Z̃ = [(a aᴴ)^Φ ⊙ Z*]*`, split into `(R̃, X̃)`.
pub fn tilde_impedance(z: &DMatrix<Complex64>, phases: PhaseSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = phases.len();
    check_dim("impedance rows", n, z.nrows())?;
    check_dim("impedance columns", n, z.ncols())?;
    let rot: Vec<Complex64> = phases.iter().map(Phase::rotation).collect();
    // [(a aᴴ)_kl · conj(Z_kl)]* = conj(a_k) a_l Z_kl
    let zt = DMatrix::from_fn(n, n, |k, l| rot[k].conj() * rot[l] * z[(k, l)]);
    Ok((zt.map(|c| c.re), zt.map(|c| c.im)))
}

/// Incidence matrix blocks: `a0` (n_0 × m, head rows) and `a` (m × m).
pub fn build_incidence(net: &NetworkModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = net.dim();
    let mut a0 = DMatrix::zeros(net.root_dim(), m);
    let mut a = DMatrix::zeros(m, m);
    for k in 0..m {
        a[(k, k)] = -1.0;
        match net.parent(k) {
            Ok(p) => a[(p, k)] = 1.0,
            Err(r) => a0[(r, k)] = 1.0,
        }
    }
    (a0, a)
}

/// Solves with the incidence block `A` using the tree structure.
///
/// `A = -(I - S)` where `S` carries a 1 at (parent, child), so both
/// `A x = b` and `Aᵀ y = d` reduce to one sweep over the tree.
#[derive(Debug, Clone)]
pub struct IncidenceFactor {
    parent: Vec<Option<usize>>,
    order: Vec<usize>,
}

impl IncidenceFactor {
    pub fn new(net: &NetworkModel) -> Self {
        IncidenceFactor {
            parent: (0..net.dim()).map(|k| net.parent(k).ok()).collect(),
            order: net.topo_order().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.parent.len()
    }

    /// `x = A⁻¹ b`: leaf-to-root accumulation.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("A solve rhs", self.dim(), b.len())?;
        let mut acc = DVector::<f64>::zeros(self.dim());
        let mut x = DVector::zeros(self.dim());
        for &k in self.order.iter().rev() {
            x[k] = acc[k] - b[k];
            if let Some(p) = self.parent[k] {
                acc[p] += x[k];
            }
        }
        Ok(x)
    }

    /// `y = A⁻ᵀ d`: root-to-leaf propagation.
    pub fn solve_transpose(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("Aᵀ solve rhs", self.dim(), d.len())?;
        let mut y = DVector::zeros(self.dim());
        for &k in &self.order {
            let up = self.parent[k].map_or(0.0, |p| y[p]);
            y[k] = up - d[k];
        }
        Ok(y)
    }

    /// Dense `A⁻¹`, one tree solve per column.
    pub fn inverse(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut inv = DMatrix::zeros(m, m);
        let mut e = DVector::zeros(m);
        for j in 0..m {
            e[j] = 1.0;
            let col = self.solve(&e).expect("dimension checked");
            inv.set_column(j, &col);
            e[j] = 0.0;
        }
        inv
    }
}

/// Block-diagonal matrix stored as its blocks and their offsets.
#[derive(Debug, Clone)]
pub struct BlockDiagonal {
    blocks: Vec<(usize, DMatrix<f64>)>,
    dim: usize,
}

impl BlockDiagonal {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.dim, self.dim);
        for (off, b) in &self.blocks {
            d.view_mut((*off, *off), b.shape()).copy_from(b);
        }
        d
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim);
        for (off, b) in &self.blocks {
            let n = b.nrows();
            let r = b * x.rows(*off, n);
            y.rows_mut(*off, n).copy_from(&r);
        }
        y
    }

    pub fn mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.dim, x.ncols());
        for (off, b) in &self.blocks {
            let n = b.nrows();
            let r = b * x.rows(*off, n);
            y.rows_mut(*off, n).copy_from(&r);
        }
        y
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, &DMatrix<f64>)> {
        self.blocks.iter().map(|(o, b)| (*o, b))
    }
}

/// Constant matrices of the compact linear model `v = M q^g + c`.
#[derive(Debug, Clone)]
pub struct LinearSensitivityModel {
    pub a0: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub dr: BlockDiagonal,
    pub dx: BlockDiagonal,
    pub m_matrix: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub factor: IncidenceFactor,
    pub hessian_cholesky: Cholesky<f64, Dyn>,
}

pub fn build_linear_model(net: &NetworkModel) -> Result<LinearSensitivityModel> {
    let m = net.dim();
    let (a0, a) = build_incidence(net);
    let factor = IncidenceFactor::new(net);

    let mut r_blocks = Vec::with_capacity(net.segments.len());
    let mut x_blocks = Vec::with_capacity(net.segments.len());
    for (si, s) in net.segments.iter().enumerate() {
        let (r, x) = tilde_impedance(&s.impedance, s.phases)?;
        let off = net.segment_offset(si);
        r_blocks.push((off, r));
        x_blocks.push((off, x));
    }
    let dr = BlockDiagonal {
        blocks: r_blocks,
        dim: m,
    };
    let dx = BlockDiagonal {
        blocks: x_blocks,
        dim: m,
    };

    // M = 2 A⁻ᵀ Dx A⁻¹
    let a_inv = factor.inverse();
    let dx_ainv = dx.mul_mat(&a_inv);
    let mut m_matrix = DMatrix::zeros(m, m);
    for j in 0..m {
        let col = factor.solve_transpose(&dx_ainv.column(j).into_owned())?;
        m_matrix.set_column(j, &(col * 2.0));
    }

    let hessian = m_matrix.tr_mul(&m_matrix);
    let asym = (&hessian - hessian.transpose()).amax();
    if asym > 1e-12 * hessian.amax().max(1.0) {
        return Err(Error::Internal(format!("Hessian asymmetry {asym:e}")));
    }
    let hessian_cholesky =
        Cholesky::new(hessian.clone()).ok_or(Error::HessianNotPositiveDefinite)?;

    Ok(LinearSensitivityModel {
        a0,
        a,
        dr,
        dx,
        m_matrix,
        hessian,
        factor,
        hessian_cholesky,
    })
}

impl LinearSensitivityModel {
    pub fn dim(&self) -> usize {
        self.m_matrix.nrows()
    }

    pub fn root_dim(&self) -> usize {
        self.a0.nrows()
    }
}

/// Offset `c = -M qc - A⁻ᵀ A0ᵀ v0 - 2 A⁻ᵀ Dr A⁻¹ p`.
pub fn compute_c(
    model: &LinearSensitivityModel,
    v0: &DVector<f64>,
    p: &DVector<f64>,
    qc: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = model.dim();
    check_dim("v0", model.root_dim(), v0.len())?;
    check_dim("p", m, p.len())?;
    check_dim("qc", m, qc.len())?;
    let slack = model.factor.solve_transpose(&model.a0.tr_mul(v0))?;
    let real = model
        .factor
        .solve_transpose(&model.dr.mul_vec(&model.factor.solve(p)?))?;
    Ok(-(&model.m_matrix * qc) - slack - real * 2.0)
}
