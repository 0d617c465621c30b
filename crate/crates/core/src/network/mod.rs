//! Radial three-phase distribution network.
//!
//! Phases are modeled as three decoupled single-phase networks sharing the
//! same branch impedances. Each bus carries its own per-phase load, so a
//! phase-wise imbalance is representable even though the built-in feeder is
//! balanced.
//!
//! Impedances are stored in ohms and loads in kW/kvar per phase. The
//! per-unit system is built on the line-to-line kV of the substation and a
//! three-phase MVA base; per phase this gives `S_base / 3` on the
//! line-to-neutral voltage, which leaves the impedance base unchanged.

mod baran_wu;
mod plan;

pub use baran_wu::builtin_baran_wu_33;
pub use plan::{
    default_measurement_plan, full_measurement_plan, Location, MeasurementKind, MeasurementPlan,
    MeasurementSpec, MeterPrecision, Source,
};

use crate::error::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;

pub type BusId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::C => "C",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Phase::A),
            "B" | "b" => Ok(Phase::B),
            "C" | "c" => Ok(Phase::C),
            other => Err(Error::config("phase", format!("unknown phase '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Substation,
    Load,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseLoad {
    pub p_kw: f64,
    pub q_kvar: f64,
}

impl PhaseLoad {
    pub fn new(p_kw: f64, q_kvar: f64) -> Self {
        Self { p_kw, q_kvar }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub base_kv: f64,
    /// Load on phases A, B, C.
    pub load_per_phase: [PhaseLoad; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub r_ohm: f64,
    pub x_ohm: f64,
    pub status: BranchStatus,
}

impl Branch {
    pub fn closed(from: BusId, to: BusId, r_ohm: f64, x_ohm: f64) -> Self {
        Self {
            from,
            to,
            r_ohm,
            x_ohm,
            status: BranchStatus::Closed,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.status == BranchStatus::Closed
    }
}

/// Per-unit bases for one phase of the feeder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub kv_ll: f64,
    pub mva_3ph: f64,
}

impl PerUnitBase {
    pub fn z_ohm(&self) -> f64 {
        self.kv_ll * self.kv_ll / self.mva_3ph
    }

    pub fn v_ln_volts(&self) -> f64 {
        self.kv_ll * 1e3 / 3f64.sqrt()
    }

    pub fn s_phase_va(&self) -> f64 {
        self.mva_3ph * 1e6 / 3.0
    }

    pub fn i_amps(&self) -> f64 {
        self.s_phase_va() / self.v_ln_volts()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
}

impl NetworkTopology {
    pub const PHASE_COUNT: usize = 3;

    /// Checks the structural invariants: unique ids, one substation,
    /// positive voltages, finite loads, sane branch data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidNetwork(m));
        if self.buses.is_empty() {
            return bad("network has no buses".into());
        }
        if !(self.base_mva > 0.0 && self.base_mva.is_finite()) {
            return bad(format!("base_mva must be positive, got {}", self.base_mva));
        }
        let mut seen = HashMap::new();
        for (i, bus) in self.buses.iter().enumerate() {
            if seen.insert(bus.id, i).is_some() {
                return bad(format!("duplicate bus id {}", bus.id));
            }
            if !(bus.base_kv > 0.0 && bus.base_kv.is_finite()) {
                return bad(format!("bus {}: base_kv must be positive", bus.id));
            }
            if bus
                .load_per_phase
                .iter()
                .any(|l| !l.p_kw.is_finite() || !l.q_kvar.is_finite())
            {
                return bad(format!("bus {}: non-finite load", bus.id));
            }
        }
        let substations = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Substation)
            .count();
        if substations != 1 {
            return bad(format!("expected exactly one substation bus, found {substations}"));
        }
        for br in &self.branches {
            if br.from == br.to {
                return bad(format!("branch {}-{} is a self loop", br.from, br.to));
            }
            if !seen.contains_key(&br.from) || !seen.contains_key(&br.to) {
                return bad(format!("branch {}-{} references an unknown bus", br.from, br.to));
            }
            if br.r_ohm < 0.0 || br.x_ohm < 0.0 || (br.r_ohm == 0.0 && br.x_ohm == 0.0) {
                return bad(format!(
                    "branch {}-{}: impedance must be non-negative and non-zero",
                    br.from, br.to
                ));
            }
            if !br.r_ohm.is_finite() || !br.x_ohm.is_finite() {
                return bad(format!("branch {}-{}: non-finite impedance", br.from, br.to));
            }
        }
        Ok(())
    }

    /// Validates structure and radiality.
    pub fn validate_full(&self) -> Result<()> {
        self.validate()?;
        if !validate_radial(self) {
            return Err(Error::InvalidNetwork(
                "closed branches do not form a spanning tree".into(),
            ));
        }
        Ok(())
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn closed_branches(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| b.is_closed())
    }

    /// Number of per-phase state variables, `2n - 1`.
    pub fn state_count(&self) -> usize {
        2 * self.buses.len() - 1
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn substation_index(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Substation)
    }

    pub fn substation(&self) -> Option<&Bus> {
        self.substation_index().map(|i| &self.buses[i])
    }

    pub fn per_unit_base(&self) -> PerUnitBase {
        let kv = self.substation().map_or(self.buses[0].base_kv, |b| b.base_kv);
        PerUnitBase {
            kv_ll: kv,
            mva_3ph: self.base_mva,
        }
    }

    /// Same network with a different load on every phase of every bus.
    pub fn with_loads(&self, loads: &[[PhaseLoad; 3]]) -> Result<Self> {
        if loads.len() != self.buses.len() {
            return Err(Error::InvalidNetwork(format!(
                "{} load rows for {} buses",
                loads.len(),
                self.buses.len()
            )));
        }
        let mut out = self.clone();
        for (bus, l) in out.buses.iter_mut().zip(loads) {
            bus.load_per_phase = *l;
        }
        Ok(out)
    }

    /// Per-unit load at every bus on one phase (positive = consumption).
    pub fn phase_loads_pu(&self, phase: Phase) -> Vec<Complex64> {
        let s_base_kva = self.per_unit_base().s_phase_va() / 1e3;
        self.buses
            .iter()
            .map(|b| {
                let l = b.load_per_phase[phase.index()];
                Complex64::new(l.p_kw / s_base_kva, l.q_kvar / s_base_kva)
            })
            .collect()
    }

    /// Parent structure of the closed-branch tree rooted at the substation.
    pub fn tree(&self) -> Result<RadialTree> {
        RadialTree::build(self)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let net: NetworkTopology = toml::from_str(s)?;
        net.validate_full()?;
        Ok(net)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let net: NetworkTopology = serde_json::from_str(s)?;
        net.validate_full()?;
        Ok(net)
    }

    /// Loads a network from a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }
}

/// True iff the closed branches form a spanning tree over all buses.
pub fn validate_radial(topology: &NetworkTopology) -> bool {
    let n = topology.buses.len();
    if n == 0 {
        return false;
    }
    let index: HashMap<BusId, usize> = topology
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    if index.len() != n {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    let mut closed = 0usize;
    for br in topology.closed_branches() {
        let (Some(&f), Some(&t)) = (index.get(&br.from), index.get(&br.to)) else {
            return false;
        };
        if f == t {
            return false;
        }
        adj[f].push(t);
        adj[t].push(f);
        closed += 1;
    }
    if closed != n - 1 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut visited = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                visited += 1;
                stack.push(v);
            }
        }
    }
    visited == n
}

/// Closed-branch tree rooted at the substation, in breadth-first order.
#[derive(Debug, Clone)]
pub struct RadialTree {
    pub root: usize,
    /// Bus indices in breadth-first order from the root.
    pub order: Vec<usize>,
    /// `(parent bus index, branch index)` for every non-root bus.
    pub parent: Vec<Option<(usize, usize)>>,
    pub children: Vec<Vec<usize>>,
}

impl RadialTree {
    fn build(topology: &NetworkTopology) -> Result<Self> {
        topology.validate_full()?;
        let n = topology.buses.len();
        let root = topology.substation_index().expect("validated");
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, br) in topology.branches.iter().enumerate() {
            if !br.is_closed() {
                continue;
            }
            let f = topology.bus_index(br.from).expect("validated");
            let t = topology.bus_index(br.to).expect("validated");
            adj[f].push((t, k));
            adj[t].push((f, k));
        }
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, k) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some((u, k));
                    children[u].push(v);
                    queue.push_back(v);
                }
            }
        }
        Ok(Self {
            root,
            order,
            parent,
            children,
        })
    }

    pub fn is_leaf(&self, bus: usize) -> bool {
        self.children[bus].is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_case_is_radial() {
        assert!(validate_radial(&builtin_baran_wu_33()));
    }

    #[test]
    fn opening_a_branch_disconnects() {
        let mut net = builtin_baran_wu_33();
        let br = net
            .branches
            .iter_mut()
            .find(|b| b.from == 5 && b.to == 6)
            .unwrap();
        br.status = BranchStatus::Open;
        assert!(!validate_radial(&net));
    }

    #[test]
    fn closing_a_tie_creates_a_loop() {
        let mut net = builtin_baran_wu_33();
        net.branches.push(Branch::closed(8, 21, 2.0, 2.0));
        assert!(!validate_radial(&net));
        // the open tie is fine
        net.branches.last_mut().unwrap().status = BranchStatus::Open;
        assert!(validate_radial(&net));
    }

    #[test]
    fn rejects_bad_structure() {
        let mut net = builtin_baran_wu_33();
        net.buses[3].kind = BusKind::Substation;
        assert!(matches!(net.validate(), Err(Error::InvalidNetwork(_))));

        let mut net = builtin_baran_wu_33();
        net.buses[4].id = net.buses[5].id;
        assert!(net.validate().is_err());

        let mut net = builtin_baran_wu_33();
        net.branches[2].r_ohm = 0.0;
        net.branches[2].x_ohm = 0.0;
        assert!(net.validate().is_err());

        let mut net = builtin_baran_wu_33();
        net.buses[7].base_kv = 0.0;
        assert!(net.validate().is_err());
    }

    #[test]
    fn per_unit_base_matches_hand_values() {
        let base = builtin_baran_wu_33().per_unit_base();
        assert!((base.z_ohm() - 160.2756).abs() < 1e-4);
        assert!((base.i_amps() - 45.6048).abs() < 1e-3);
        // per-phase loads in pu match the balanced three-phase values
        let loads = builtin_baran_wu_33().phase_loads_pu(Phase::B);
        assert!((loads[1] - Complex64::new(0.1, 0.06)).norm() < 1e-12);
    }

    #[test]
    fn tree_order_starts_at_substation() {
        let net = builtin_baran_wu_33();
        let tree = net.tree().unwrap();
        assert_eq!(tree.root, 0);
        assert_eq!(tree.order.len(), 33);
        assert!(tree.parent[0].is_none());
        // leaves of the feeder: 18, 22, 25, 33
        let mut leaves: Vec<u32> = (0..33)
            .filter(|&i| tree.is_leaf(i))
            .map(|i| net.buses[i].id)
            .collect();
        leaves.sort();
        assert_eq!(leaves, vec![18, 22, 25, 33]);
    }

    #[test]
    fn toml_round_trip() {
        let net = builtin_baran_wu_33();
        let text = toml::to_string(&net).unwrap();
        let back = NetworkTopology::from_toml_str(&text).unwrap();
        assert_eq!(back, net);
    }
}
