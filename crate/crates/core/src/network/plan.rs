//! Measurement plans.

use super::{BusId, NetworkTopology, Phase};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeasurementKind {
    #[serde(rename = "P-flow")]
    PFlow,
    #[serde(rename = "Q-flow")]
    QFlow,
    #[serde(rename = "P-inj")]
    PInj,
    #[serde(rename = "Q-inj")]
    QInj,
    #[serde(rename = "V-mag")]
    VMag,
}

impl MeasurementKind {
    pub fn is_flow(self) -> bool {
        matches!(self, MeasurementKind::PFlow | MeasurementKind::QFlow)
    }

    pub fn is_injection(self) -> bool {
        matches!(self, MeasurementKind::PInj | MeasurementKind::QInj)
    }

    /// Prefix used in measurement labels.
    pub fn letter(self) -> &'static str {
        match self {
            MeasurementKind::PFlow | MeasurementKind::PInj => "P",
            MeasurementKind::QFlow | MeasurementKind::QInj => "Q",
            MeasurementKind::VMag => "V",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasurementKind::PFlow => "P-flow",
            MeasurementKind::QFlow => "Q-flow",
            MeasurementKind::PInj => "P-inj",
            MeasurementKind::QInj => "Q-inj",
            MeasurementKind::VMag => "V-mag",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    /// Directed flow metered at the `from` end.
    Branch { from: BusId, to: BusId },
    Bus(BusId),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Branch { from, to } => write!(f, "{from}-{to}"),
            Location::Bus(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

/// Meter precision (pu) per measurement type, used by the second
/// estimation step.
///
/// A meter reading never gets a tighter deviation than its reading class
/// allows: `sigma = max(table value, reading_class * |z|)`. Setting
/// `reading_class` to zero gives the bare table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterPrecision {
    pub flow: f64,
    pub injection: f64,
    pub voltage: f64,
    pub synthetic: f64,
    pub reading_class: f64,
}

impl Default for MeterPrecision {
    fn default() -> Self {
        Self {
            flow: 0.008,
            injection: 0.010,
            voltage: 0.004,
            synthetic: 0.030,
            reading_class: 0.01,
        }
    }
}

impl MeterPrecision {
    pub fn table_sigma(&self, kind: MeasurementKind, source: Source) -> f64 {
        if source == Source::Synthetic {
            return self.synthetic;
        }
        match kind {
            MeasurementKind::PFlow | MeasurementKind::QFlow => self.flow,
            MeasurementKind::PInj | MeasurementKind::QInj => self.injection,
            MeasurementKind::VMag => self.voltage,
        }
    }

    pub fn sigma(&self, spec: &MeasurementSpec, z: f64) -> f64 {
        spec.sigma.max(self.reading_class * z.abs())
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.flow, self.injection, self.voltage, self.synthetic];
        if all.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("precision", "meter precision values must be positive"));
        }
        if !(self.reading_class >= 0.0 && self.reading_class.is_finite()) {
            return Err(Error::config("precision.reading_class", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSpec {
    pub kind: MeasurementKind,
    pub location: Location,
    pub phase: Phase,
    pub source: Source,
    /// Meter standard deviation in per-unit.
    pub sigma: f64,
}

impl MeasurementSpec {
    pub fn new(kind: MeasurementKind, location: Location, phase: Phase, sigma: f64) -> Self {
        Self {
            kind,
            location,
            phase,
            source: Source::Real,
            sigma,
        }
    }

    pub fn synthetic(kind: MeasurementKind, location: Location, phase: Phase, sigma: f64) -> Self {
        Self {
            source: Source::Synthetic,
            ..Self::new(kind, location, phase, sigma)
        }
    }

    /// Label in the `P:19-20` style.
    pub fn label(&self) -> String {
        format!("{}:{}", self.kind.letter(), self.location)
    }

    /// Label including the phase, `P:19-20:A`.
    pub fn full_label(&self) -> String {
        format!("{}:{}:{}", self.kind.letter(), self.location, self.phase)
    }

    /// Buses the measurement touches.
    pub fn buses(&self) -> Vec<BusId> {
        match self.location {
            Location::Branch { from, to } => vec![from, to],
            Location::Bus(b) => vec![b],
        }
    }

    pub fn at_bus(&self) -> Option<BusId> {
        match self.location {
            Location::Bus(b) => Some(b),
            Location::Branch { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub specs: Vec<MeasurementSpec>,
}

impl MeasurementPlan {
    pub fn new(specs: Vec<MeasurementSpec>) -> Self {
        Self { specs }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Number of measurements on one phase, `m_i`.
    pub fn per_phase_count(&self, phase: Phase) -> usize {
        self.specs.iter().filter(|s| s.phase == phase).count()
    }

    /// Indices into `specs` of the measurements on one phase, in plan order.
    pub fn phase_indices(&self, phase: Phase) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.phase == phase)
            .map(|(i, _)| i)
            .collect()
    }

    /// Global redundancy level of one phase, `m_i / (2n - 1)`.
    pub fn grl(&self, phase: Phase, topology: &NetworkTopology) -> f64 {
        self.per_phase_count(phase) as f64 / topology.state_count() as f64
    }

    pub fn validate(&self, topology: &NetworkTopology) -> Result<()> {
        for (i, s) in self.specs.iter().enumerate() {
            if !(s.sigma > 0.0 && s.sigma.is_finite()) {
                return Err(Error::InvalidPlan(format!("spec {i} ({}): sigma must be positive", s.full_label())));
            }
            match (s.kind.is_flow(), s.location) {
                (true, Location::Branch { from, to }) => {
                    let ok = topology.closed_branches().any(|b| {
                        (b.from == from && b.to == to) || (b.from == to && b.to == from)
                    });
                    if !ok {
                        return Err(Error::InvalidPlan(format!(
                            "spec {i} ({}): no closed branch {from}-{to}",
                            s.full_label()
                        )));
                    }
                }
                (false, Location::Bus(b)) => {
                    if topology.bus_index(b).is_none() {
                        return Err(Error::InvalidPlan(format!(
                            "spec {i} ({}): unknown bus {b}",
                            s.full_label()
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidPlan(format!(
                        "spec {i}: {} measurement at location {}",
                        s.kind.name(),
                        s.location
                    )))
                }
            }
        }
        Ok(())
    }

    /// Plan with every measurement on one phase only.
    pub fn restricted_to(&self, phase: Phase) -> Self {
        Self::new(self.specs.iter().filter(|s| s.phase == phase).copied().collect())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }
}

/// All injections, both directions of every closed-branch flow, and the
/// substation voltage magnitude, on every phase.
pub fn full_measurement_plan(topology: &NetworkTopology, precision: &MeterPrecision) -> MeasurementPlan {
    use MeasurementKind::*;
    let sig = |k| precision.table_sigma(k, Source::Real);
    let mut specs = Vec::new();
    for phase in Phase::ALL {
        if let Some(sub) = topology.substation() {
            specs.push(MeasurementSpec::new(VMag, Location::Bus(sub.id), phase, sig(VMag)));
        }
        for kind in [PInj, QInj] {
            for bus in &topology.buses {
                specs.push(MeasurementSpec::new(kind, Location::Bus(bus.id), phase, sig(kind)));
            }
        }
        for br in topology.closed_branches() {
            for kind in [PFlow, QFlow] {
                for (from, to) in [(br.from, br.to), (br.to, br.from)] {
                    specs.push(MeasurementSpec::new(
                        kind,
                        Location::Branch { from, to },
                        phase,
                        sig(kind),
                    ));
                }
            }
        }
    }
    MeasurementPlan::new(specs)
}

/// The 195-per-phase plan for the 33-bus feeder: 66 injections, 128 directed
/// flows and the substation voltage magnitude.
pub fn default_measurement_plan(topology: &NetworkTopology) -> Result<MeasurementPlan> {
    topology.validate_full()?;
    let closed = topology.closed_branches().count();
    if topology.buses.len() != 33 || closed != 32 {
        return Err(Error::InvalidPlan(format!(
            "default plan is defined for the 33-bus/32-branch feeder, got {} buses and {closed} closed branches",
            topology.buses.len()
        )));
    }
    Ok(full_measurement_plan(topology, &MeterPrecision::default()))
}
