//! Per-phase measurement functions `h(x)` and their Jacobian.
//!
//! Each phase is a single-phase network of series branch admittances with
//! no shunt elements. The state is bus voltage magnitudes and angles; the
//! substation angle is the reference and is not part of the state vector.
//! State vector layout: non-reference angles first (bus order), then all
//! magnitudes.

use crate::error::{Error, Result};
use crate::network::{Location, MeasurementKind, MeasurementSpec, NetworkTopology};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

impl PhaseState {
    pub fn flat(n: usize) -> Self {
        Self {
            vm: vec![1.0; n],
            va: vec![0.0; n],
        }
    }

    pub fn from_phasors(v: &[Complex64]) -> Self {
        Self {
            vm: v.iter().map(|c| c.norm()).collect(),
            va: v.iter().map(|c| c.arg()).collect(),
        }
    }

    pub fn phasor(&self, bus: usize) -> Complex64 {
        Complex64::from_polar(self.vm[bus], self.va[bus])
    }

    pub fn len(&self) -> usize {
        self.vm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vm.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct BranchAdmittance {
    from: usize,
    to: usize,
    g: f64,
    b: f64,
}

/// A measurement resolved against bus and branch indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolved {
    Flow { branch: usize, forward: bool, reactive: bool },
    Injection { bus: usize, reactive: bool },
    VMag { bus: usize },
}

#[derive(Debug, Clone)]
pub struct PhaseModel {
    n: usize,
    reference: usize,
    branches: Vec<BranchAdmittance>,
    /// `(branch, bus is the from end)` per bus.
    incident: Vec<Vec<(usize, bool)>>,
    bus_ids: Vec<u32>,
}

impl PhaseModel {
    /// Builds the per-unit model from the closed branches of a topology.
    pub fn new(topology: &NetworkTopology) -> Result<Self> {
        topology.validate()?;
        let n = topology.buses.len();
        let reference = topology
            .substation_index()
            .ok_or_else(|| Error::InvalidNetwork("no substation bus".into()))?;
        let z_base = topology.per_unit_base().z_ohm();
        let mut branches = Vec::new();
        let mut incident = vec![Vec::new(); n];
        for br in topology.closed_branches() {
            let from = topology.bus_index(br.from).expect("validated");
            let to = topology.bus_index(br.to).expect("validated");
            let y = Complex64::new(br.r_ohm / z_base, br.x_ohm / z_base).inv();
            let k = branches.len();
            branches.push(BranchAdmittance { from, to, g: y.re, b: y.im });
            incident[from].push((k, true));
            incident[to].push((k, false));
        }
        Ok(Self {
            n,
            reference,
            branches,
            incident,
            bus_ids: topology.buses.iter().map(|b| b.id).collect(),
        })
    }

    pub fn bus_count(&self) -> usize {
        self.n
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn state_len(&self) -> usize {
        2 * self.n - 1
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == id)
    }

    pub fn bus_id(&self, index: usize) -> u32 {
        self.bus_ids[index]
    }

    /// Series admittance (pu) of a closed branch, indexed as in [`Resolved::Flow`].
    pub fn branch_admittance(&self, branch: usize) -> Complex64 {
        let b = &self.branches[branch];
        Complex64::new(b.g, b.b)
    }

    pub fn branch_ends(&self, branch: usize) -> (usize, usize) {
        (self.branches[branch].from, self.branches[branch].to)
    }

    pub fn resolve(&self, spec: &MeasurementSpec) -> Result<Resolved> {
        let bus = |id: u32| {
            self.bus_index(id)
                .ok_or_else(|| Error::InvalidPlan(format!("{}: unknown bus {id}", spec.full_label())))
        };
        match (spec.kind, spec.location) {
            (MeasurementKind::PFlow | MeasurementKind::QFlow, Location::Branch { from, to }) => {
                let (f, t) = (bus(from)?, bus(to)?);
                let found = self.branches.iter().enumerate().find_map(|(k, b)| {
                    if b.from == f && b.to == t {
                        Some((k, true))
                    } else if b.from == t && b.to == f {
                        Some((k, false))
                    } else {
                        None
                    }
                });
                let (branch, forward) = found.ok_or_else(|| {
                    Error::InvalidPlan(format!("{}: no closed branch", spec.full_label()))
                })?;
                Ok(Resolved::Flow {
                    branch,
                    forward,
                    reactive: spec.kind == MeasurementKind::QFlow,
                })
            }
            (MeasurementKind::PInj | MeasurementKind::QInj, Location::Bus(id)) => Ok(Resolved::Injection {
                bus: bus(id)?,
                reactive: spec.kind == MeasurementKind::QInj,
            }),
            (MeasurementKind::VMag, Location::Bus(id)) => Ok(Resolved::VMag { bus: bus(id)? }),
            _ => Err(Error::InvalidPlan(format!(
                "{}: kind does not match location",
                spec.full_label()
            ))),
        }
    }

    pub fn resolve_all<'a>(&self, specs: impl IntoIterator<Item = &'a MeasurementSpec>) -> Result<Vec<Resolved>> {
        specs.into_iter().map(|s| self.resolve(s)).collect()
    }

    /// Column of a bus angle in the state vector.
    pub fn angle_col(&self, bus: usize) -> Option<usize> {
        match bus.cmp(&self.reference) {
            std::cmp::Ordering::Less => Some(bus),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(bus - 1),
        }
    }

    pub fn mag_col(&self, bus: usize) -> usize {
        self.n - 1 + bus
    }

    /// Flow `(P, Q)` from one end of a branch into it.
    pub fn flow(&self, branch: usize, forward: bool, x: &PhaseState) -> (f64, f64) {
        let br = &self.branches[branch];
        let (i, j) = if forward { (br.from, br.to) } else { (br.to, br.from) };
        let (vi, vj) = (x.vm[i], x.vm[j]);
        let th = x.va[i] - x.va[j];
        let (s, c) = th.sin_cos();
        let p = br.g * vi * vi - vi * vj * (br.g * c + br.b * s);
        let q = -br.b * vi * vi - vi * vj * (br.g * s - br.b * c);
        (p, q)
    }

    /// Net power injected into the network at a bus (sum of outgoing flows).
    pub fn injection(&self, bus: usize, x: &PhaseState) -> (f64, f64) {
        self.incident[bus].iter().fold((0.0, 0.0), |(p, q), &(k, fwd)| {
            let (pf, qf) = self.flow(k, fwd, x);
            (p + pf, q + qf)
        })
    }

    pub fn value(&self, m: &Resolved, x: &PhaseState) -> f64 {
        match *m {
            Resolved::Flow { branch, forward, reactive } => {
                let (p, q) = self.flow(branch, forward, x);
                if reactive {
                    q
                } else {
                    p
                }
            }
            Resolved::Injection { bus, reactive } => {
                let (p, q) = self.injection(bus, x);
                if reactive {
                    q
                } else {
                    p
                }
            }
            Resolved::VMag { bus } => x.vm[bus],
        }
    }

    fn add_flow_row(&self, branch: usize, forward: bool, reactive: bool, x: &PhaseState, row: &mut [f64]) {
        let br = &self.branches[branch];
        let (i, j) = if forward { (br.from, br.to) } else { (br.to, br.from) };
        let (vi, vj) = (x.vm[i], x.vm[j]);
        let th = x.va[i] - x.va[j];
        let (s, c) = th.sin_cos();
        let (g, b) = (br.g, br.b);
        let (d_thi, d_vi, d_vj) = if reactive {
            (
                -vi * vj * (g * c + b * s),
                -2.0 * b * vi - vj * (g * s - b * c),
                -vi * (g * s - b * c),
            )
        } else {
            (
                vi * vj * (g * s - b * c),
                2.0 * g * vi - vj * (g * c + b * s),
                -vi * (g * c + b * s),
            )
        };
        if let Some(col) = self.angle_col(i) {
            row[col] += d_thi;
        }
        if let Some(col) = self.angle_col(j) {
            row[col] -= d_thi;
        }
        row[self.mag_col(i)] += d_vi;
        row[self.mag_col(j)] += d_vj;
    }

    /// Writes `dh/dx` for one measurement into `row` (length `state_len`).
    pub fn jacobian_row(&self, m: &Resolved, x: &PhaseState, row: &mut [f64]) {
        row.iter_mut().for_each(|v| *v = 0.0);
        match *m {
            Resolved::Flow { branch, forward, reactive } => {
                self.add_flow_row(branch, forward, reactive, x, row)
            }
            Resolved::Injection { bus, reactive } => {
                for &(k, fwd) in &self.incident[bus] {
                    self.add_flow_row(k, fwd, reactive, x, row);
                }
            }
            Resolved::VMag { bus } => row[self.mag_col(bus)] = 1.0,
        }
    }

    pub fn state_to_vec(&self, x: &PhaseState) -> Vec<f64> {
        let mut out = vec![0.0; self.state_len()];
        for k in 0..self.n {
            if let Some(c) = self.angle_col(k) {
                out[c] = x.va[k];
            }
            out[self.mag_col(k)] = x.vm[k];
        }
        out
    }

    /// Applies a state correction in place.
    pub fn apply_step(&self, x: &mut PhaseState, dx: &[f64]) {
        for k in 0..self.n {
            if let Some(c) = self.angle_col(k) {
                x.va[k] += dx[c];
            }
            x.vm[k] += dx[self.mag_col(k)];
        }
    }
}
