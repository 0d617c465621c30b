//! Per-phase backward/forward sweep power flow with an optional HIF draw.
//!
//! The fault is coupled through an outer fixed-point loop: solve the
//! feeder with the current fault draw as a constant-power load, recompute
//! the draw from the new fault-bus voltage, repeat until the fault-bus
//! voltage settles.

use crate::error::{Error, Result};
use crate::hif::{hif_equivalent_injection_sampled, HifScenario, DEFAULT_SAMPLES_PER_CYCLE};
use crate::network::{NetworkTopology, PerUnitBase, Phase, RadialTree};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Sweep convergence on max voltage change (pu).
    pub inner_tol: f64,
    /// Fault-bus voltage change between outer iterations (pu).
    pub outer_tol: f64,
    pub samples_per_cycle: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer: 50,
            max_inner: 100,
            inner_tol: 1e-12,
            outer_tol: 1e-8,
            samples_per_cycle: DEFAULT_SAMPLES_PER_CYCLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSolution {
    /// Bus voltage phasors (pu), bus order.
    pub v: Vec<Complex64>,
    /// Current from `branch.from` to `branch.to` (pu), topology branch
    /// order; zero on open branches.
    pub branch_current: Vec<Complex64>,
    /// Metered load per bus (pu).
    pub load: Vec<Complex64>,
    /// Fault draw (pu) and its bus index.
    pub hif_draw: Complex64,
    pub hif_bus: Option<usize>,
    pub iterations: usize,
}

impl PhaseSolution {
    /// Power leaving the substation into the feeder (pu).
    pub fn substation_injection(&self, tree: &RadialTree, topology: &NetworkTopology) -> Complex64 {
        let root = tree.root;
        let mut s = Complex64::new(0.0, 0.0);
        for (k, br) in topology.branches.iter().enumerate() {
            if !br.is_closed() {
                continue;
            }
            let f = topology.bus_index(br.from).unwrap();
            let t = topology.bus_index(br.to).unwrap();
            if f == root {
                s += self.v[root] * self.branch_current[k].conj();
            } else if t == root {
                s -= self.v[root] * self.branch_current[k].conj();
            }
        }
        s
    }

    /// Series losses over all branches (pu).
    pub fn losses(&self, topology: &NetworkTopology) -> Complex64 {
        let z_base = topology.per_unit_base().z_ohm();
        topology
            .branches
            .iter()
            .zip(&self.branch_current)
            .filter(|(b, _)| b.is_closed())
            .map(|(b, i)| Complex64::new(b.r_ohm, b.x_ohm) / z_base * i.norm_sqr())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasorSolution {
    pub phases: Vec<PhaseSolution>,
    pub converged: bool,
    pub iterations: usize,
    pub base: PerUnitBase,
}

impl PhasorSolution {
    pub fn phase(&self, phase: Phase) -> &PhaseSolution {
        &self.phases[phase.index()]
    }

    /// RMS current (A) on the branch between two buses, either orientation.
    pub fn branch_current_amps(&self, topology: &NetworkTopology, phase: Phase, a: u32, b: u32) -> Option<f64> {
        let k = topology
            .branches
            .iter()
            .position(|br| br.is_closed() && ((br.from == a && br.to == b) || (br.from == b && br.to == a)))?;
        Some(self.phase(phase).branch_current[k].norm() * self.base.i_amps())
    }

    /// RMS fault current (A) on a phase, zero without a fault.
    pub fn hif_current_amps(&self, phase: Phase) -> f64 {
        let ph = self.phase(phase);
        match ph.hif_bus {
            Some(bus) if ph.v[bus].norm() > 0.0 => (ph.hif_draw / ph.v[bus]).norm() * self.base.i_amps(),
            _ => 0.0,
        }
    }
}

struct Sweep {
    v: Vec<Complex64>,
    current: Vec<Complex64>,
    iterations: usize,
    converged: bool,
    last_change: f64,
}

fn sweep(
    topology: &NetworkTopology,
    tree: &RadialTree,
    z: &[Complex64],
    loads: &[Complex64],
    v0: &[Complex64],
    opts: &SolverOptions,
) -> Sweep {
    let n = loads.len();
    let mut v = v0.to_vec();
    let mut total = vec![Complex64::new(0.0, 0.0); n];
    let mut current = vec![Complex64::new(0.0, 0.0); topology.branches.len()];
    let mut last_change = f64::INFINITY;
    for it in 1..=opts.max_inner {
        // backward: accumulate load currents towards the root
        for &bus in tree.order.iter().rev() {
            let mut i = (loads[bus] / v[bus]).conj();
            for &child in &tree.children[bus] {
                i += total[child];
            }
            total[bus] = i;
        }
        // forward: voltage drops away from the root
        let mut change: f64 = 0.0;
        for &bus in tree.order.iter().skip(1) {
            let (parent, k) = tree.parent[bus].expect("non-root bus has a parent");
            let vn = v[parent] - z[k] * total[bus];
            change = change.max((vn - v[bus]).norm());
            v[bus] = vn;
        }
        last_change = change;
        if change < opts.inner_tol {
            fill_currents(topology, tree, &total, &mut current);
            return Sweep { v, current, iterations: it, converged: true, last_change };
        }
    }
    fill_currents(topology, tree, &total, &mut current);
    Sweep {
        v,
        current,
        iterations: opts.max_inner,
        converged: false,
        last_change,
    }
}

fn fill_currents(topology: &NetworkTopology, tree: &RadialTree, total: &[Complex64], current: &mut [Complex64]) {
    current.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
    for &bus in tree.order.iter().skip(1) {
        let (parent, k) = tree.parent[bus].unwrap();
        let from = topology.bus_index(topology.branches[k].from).unwrap();
        current[k] = if from == parent { total[bus] } else { -total[bus] };
    }
}

/// Solves every phase of the feeder, with the fault active at time `t` if given.
pub fn solve_power_flow(topology: &NetworkTopology, hif: Option<(&HifScenario, f64)>) -> Result<PhasorSolution> {
    solve_power_flow_with(topology, hif, &SolverOptions::default())
}

pub fn solve_power_flow_with(
    topology: &NetworkTopology,
    hif: Option<(&HifScenario, f64)>,
    opts: &SolverOptions,
) -> Result<PhasorSolution> {
    let tree = topology.tree()?;
    let base = topology.per_unit_base();
    let z_base = base.z_ohm();
    let z: Vec<Complex64> = topology
        .branches
        .iter()
        .map(|b| Complex64::new(b.r_ohm, b.x_ohm) / z_base)
        .collect();
    let fault = match hif {
        Some((sc, t)) => {
            let bus = topology
                .bus_index(sc.bus)
                .ok_or_else(|| Error::InvalidScenario(format!("fault bus {} not in network", sc.bus)))?;
            Some((sc, t, bus))
        }
        None => None,
    };
    let n = topology.buses.len();
    let flat = vec![Complex64::new(1.0, 0.0); n];
    let mut phases = Vec::with_capacity(3);
    let mut converged = true;
    let mut iterations = 0;
    let mut worst_change: f64 = 0.0;
    for phase in Phase::ALL {
        let load = topology.phase_loads_pu(phase);
        let faulted = fault.filter(|(sc, t, _)| sc.phase == phase && sc.is_active(*t));
        let Some((sc, t, fbus)) = faulted else {
            let s = sweep(topology, &tree, &z, &load, &flat, opts);
            converged &= s.converged;
            iterations += s.iterations;
            if !s.converged {
                worst_change = worst_change.max(s.last_change);
            }
            phases.push(PhaseSolution {
                v: s.v,
                branch_current: s.current,
                load,
                hif_draw: Complex64::new(0.0, 0.0),
                hif_bus: fault.filter(|f| f.0.phase == phase).map(|f| f.2),
                iterations: s.iterations,
            });
            continue;
        };
        let mut draw = Complex64::new(0.0, 0.0);
        let mut v_prev = Complex64::new(f64::INFINITY, 0.0);
        let mut guess = flat.clone();
        let mut phase_iters = 0;
        let mut outer_ok = false;
        let mut last = None;
        for _ in 0..opts.max_outer {
            let mut total_load = load.clone();
            total_load[fbus] += draw;
            let s = sweep(topology, &tree, &z, &total_load, &guess, opts);
            phase_iters += s.iterations;
            if !s.converged {
                worst_change = worst_change.max(s.last_change);
                last = Some(s);
                break;
            }
            let vf = s.v[fbus];
            let change = (vf - v_prev).norm();
            worst_change = change;
            v_prev = vf;
            guess = s.v.clone();
            last = Some(s);
            if change < opts.outer_tol {
                outer_ok = true;
                break;
            }
            let volts = vf * base.v_ln_volts();
            draw = hif_equivalent_injection_sampled(volts, sc, t, opts.samples_per_cycle) / base.s_phase_va();
        }
        let s = last.expect("at least one sweep");
        converged &= outer_ok && s.converged;
        iterations += phase_iters;
        if outer_ok {
            // draw consistent with the final voltage
            let volts = s.v[fbus] * base.v_ln_volts();
            draw = hif_equivalent_injection_sampled(volts, sc, t, opts.samples_per_cycle) / base.s_phase_va();
        }
        phases.push(PhaseSolution {
            v: s.v,
            branch_current: s.current,
            load,
            hif_draw: draw,
            hif_bus: Some(fbus),
            iterations: phase_iters,
        });
    }
    let solution = PhasorSolution {
        phases,
        converged,
        iterations,
        base,
    };
    if !converged {
        return Err(Error::PowerFlowDivergence {
            iterations,
            last_change: worst_change,
            last: Box::new(solution),
        });
    }
    Ok(solution)
}
