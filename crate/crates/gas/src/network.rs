//! Pipeline network topology and physical pipe parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GasError, Result};
use crate::schedule::{BoundarySchedule, PiecewiseSeries};

const METERS_TO_INCHES: f64 = 39.3701;

/// Darcy friction factor from the Weymouth correlation.
///
/// `sqrt(1/f) = 11.19 * D^0.167 * E` with `D` in inches, and `lambda = 4 f`.
pub fn compute_weymouth_friction(diameter: f64, efficiency: f64) -> Result<f64> {
    if !(diameter > 0.0) || !diameter.is_finite() {
        return Err(GasError::Domain(format!("diameter must be positive, got {diameter}")));
    }
    if !(efficiency > 0.0) || !efficiency.is_finite() {
        return Err(GasError::Domain(format!("efficiency must be positive, got {efficiency}")));
    }
    let d_in = diameter * METERS_TO_INCHES;
    let inv_sqrt_f = 11.19 * d_in.powf(0.167) * efficiency;
    Ok(4.0 / (inv_sqrt_f * inv_sqrt_f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeSpec {
    pub id: u32,
    #[serde(rename = "diameter_m")]
    pub diameter: f64,
    #[serde(rename = "length_m")]
    pub length: f64,
    #[serde(rename = "lambda")]
    pub friction: f64,
    #[serde(rename = "Z")]
    pub compressibility: f64,
    #[serde(rename = "R")]
    pub gas_constant: f64,
    #[serde(rename = "T_K")]
    pub temperature: f64,
    #[serde(rename = "E")]
    pub efficiency: f64,
}

impl PipeSpec {
    /// A pipe whose friction factor comes from the Weymouth correlation.
    pub fn new(
        id: u32,
        diameter: f64,
        length: f64,
        compressibility: f64,
        gas_constant: f64,
        temperature: f64,
        efficiency: f64,
    ) -> Result<Self> {
        let friction = compute_weymouth_friction(diameter, efficiency)?;
        Ok(Self {
            id,
            diameter,
            length,
            friction,
            compressibility,
            gas_constant,
            temperature,
            efficiency,
        })
    }

    /// Replace the correlated friction factor with a tabulated value.
    pub fn with_friction(mut self, friction: f64) -> Self {
        self.friction = friction;
        self
    }

    pub fn area(&self) -> f64 {
        PI * self.diameter * self.diameter / 4.0
    }

    /// `Z R T`, the isothermal `P / rho` ratio (squared sound speed).
    pub fn zrt(&self) -> f64 {
        self.compressibility * self.gas_constant * self.temperature
    }

    fn check(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.diameter > 0.0) {
            bad.push("diameter must be > 0".to_string());
        }
        if !(self.length > 0.0) {
            bad.push("length must be > 0".to_string());
        }
        if !(self.friction > 0.0) {
            bad.push("friction must be > 0".to_string());
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.5) {
            bad.push("efficiency must lie in (0, 1.5]".to_string());
        }
        if !(self.compressibility > 0.0 && self.gas_constant > 0.0 && self.temperature > 0.0) {
            bad.push("Z, R and T must be > 0".to_string());
        }
        bad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum End {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    /// Pressure-controlled supply node.
    Source,
    /// Interior node: mass balance plus pressure equality.
    Junction,
    /// Flow-controlled consumption node.
    Demand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u32,
    pub kind: NodeKind,
    /// `(pipe id, end)` pairs attached to this node.
    pub ports: Vec<(u32, End)>,
}

/// A single problem found by [`NetworkTopology::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    InvalidPipe { pipe: u32, reason: String },
    DuplicatePipeId(u32),
    DuplicateNodeId(u32),
    UnknownPipe { node: u32, pipe: u32 },
    DuplicatePort { pipe: u32, end: End },
    DanglingEnd { pipe: u32, end: End },
    PortlessNode(u32),
    JunctionTooFewPorts(u32),
    NoPressureReference,
    Disconnected,
    Empty,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidPipe { pipe, reason } => write!(f, "invalid pipe {pipe}: {reason}"),
            Violation::DuplicatePipeId(id) => write!(f, "duplicate pipe id {id}"),
            Violation::DuplicateNodeId(id) => write!(f, "duplicate node id {id}"),
            Violation::UnknownPipe { node, pipe } => {
                write!(f, "node {node} references unknown pipe {pipe}")
            }
            Violation::DuplicatePort { pipe, end } => {
                write!(f, "duplicate port: pipe {pipe} {end:?} end attached more than once")
            }
            Violation::DanglingEnd { pipe, end } => {
                write!(f, "pipe {pipe} {end:?} end is not attached to any node")
            }
            Violation::PortlessNode(id) => write!(f, "node {id} has no ports"),
            Violation::JunctionTooFewPorts(id) => write!(f, "junction {id} has fewer than 2 ports"),
            Violation::NoPressureReference => write!(f, "no pressure reference: network has no source node"),
            Violation::Disconnected => write!(f, "pipe-node graph is not connected"),
            Violation::Empty => write!(f, "network has no pipes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub pipes: Vec<PipeSpec>,
    pub nodes: Vec<NodeSpec>,
}

impl NetworkTopology {
    /// Collect every violation instead of stopping at the first one.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        if self.pipes.is_empty() {
            out.push(Violation::Empty);
        }
        let mut pipe_ids = BTreeSet::new();
        for p in &self.pipes {
            if !pipe_ids.insert(p.id) {
                out.push(Violation::DuplicatePipeId(p.id));
            }
            for reason in p.check() {
                out.push(Violation::InvalidPipe { pipe: p.id, reason });
            }
        }
        let mut node_ids = BTreeSet::new();
        let mut seen: BTreeMap<(u32, End), u32> = BTreeMap::new();
        for n in &self.nodes {
            if !node_ids.insert(n.id) {
                out.push(Violation::DuplicateNodeId(n.id));
            }
            if n.ports.is_empty() {
                out.push(Violation::PortlessNode(n.id));
            }
            if n.kind == NodeKind::Junction && n.ports.len() < 2 {
                out.push(Violation::JunctionTooFewPorts(n.id));
            }
            for &(pipe, end) in &n.ports {
                if !pipe_ids.contains(&pipe) {
                    out.push(Violation::UnknownPipe { node: n.id, pipe });
                    continue;
                }
                if seen.insert((pipe, end), n.id).is_some() {
                    out.push(Violation::DuplicatePort { pipe, end });
                }
            }
        }
        for p in &self.pipes {
            for end in [End::Left, End::Right] {
                if !seen.contains_key(&(p.id, end)) {
                    out.push(Violation::DanglingEnd { pipe: p.id, end });
                }
            }
        }
        if !self.nodes.iter().any(|n| n.kind == NodeKind::Source) {
            out.push(Violation::NoPressureReference);
        }
        if !self.pipes.is_empty() && !self.is_connected() {
            out.push(Violation::Disconnected);
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        self.validate()
            .map_err(|v| GasError::InvalidNetwork(v.iter().map(|x| x.to_string()).collect()))
    }

    fn is_connected(&self) -> bool {
        // Union-find over pipes (0..P) and nodes (P..P+N).
        let np = self.pipes.len();
        let mut parent: Vec<usize> = (0..np + self.nodes.len()).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for (k, n) in self.nodes.iter().enumerate() {
            for &(pipe, _) in &n.ports {
                if let Some(pi) = self.pipe_index(pipe) {
                    let a = find(&mut parent, pi);
                    let b = find(&mut parent, np + k);
                    parent[a] = b;
                }
            }
        }
        let root = find(&mut parent, 0);
        (0..parent.len()).all(|i| find(&mut parent, i) == root)
    }

    pub fn pipe_index(&self, id: u32) -> Option<usize> {
        self.pipes.iter().position(|p| p.id == id)
    }

    pub fn node(&self, id: u32) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Node ids of the given kind in ascending id order.
    pub fn node_ids(&self, kind: NodeKind) -> Vec<u32> {
        let mut ids: Vec<u32> = self.nodes.iter().filter(|n| n.kind == kind).map(|n| n.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> Vec<&NodeSpec> {
        self.node_ids(kind).into_iter().filter_map(|id| self.node(id)).collect()
    }

    /// Pipes sorted by id: this is the region order used everywhere.
    pub fn region_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.pipes.len()).collect();
        idx.sort_by_key(|&i| self.pipes[i].id);
        idx
    }

    /// Ports resolved to `(region index, end)` in region order.
    pub fn resolved_ports(&self, node: &NodeSpec) -> Vec<(usize, End)> {
        let order = self.region_order();
        node.ports
            .iter()
            .filter_map(|&(pipe, end)| {
                let pi = self.pipe_index(pipe)?;
                let region = order.iter().position(|&i| i == pi)?;
                Some((region, end))
            })
            .collect()
    }

    /// Pipes in region order.
    pub fn regions(&self) -> Vec<&PipeSpec> {
        self.region_order().into_iter().map(|i| &self.pipes[i]).collect()
    }

    pub fn to_json(&self, schedule: Option<&BoundarySchedule>) -> Result<String> {
        let doc = ScenarioDocument {
            pipes: self.pipes.clone(),
            nodes: self.nodes.clone(),
            schedule: schedule.cloned(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// On-disk network description, optionally carrying a boundary schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDocument {
    pub pipes: Vec<PipeSpec>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<BoundarySchedule>,
}

impl ScenarioDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn network(&self) -> NetworkTopology {
        NetworkTopology { pipes: self.pipes.clone(), nodes: self.nodes.clone() }
    }
}

pub const PAPER_SOURCE_PRESSURE: f64 = 3.0e5;
pub const PAPER_HORIZON: f64 = 86_400.0;
pub const PAPER_GAS_CONSTANT: f64 = 288.0937;
pub const PAPER_TEMPERATURE: f64 = 288.15;
/// Ramp width and switch snapping interval of generated scenarios (s).
pub const PAPER_RAMP: f64 = 640.0;

/// Three-pipe Y network: source -> pipe 1 -> junction -> pipes 2, 3 -> demands.
///
/// Friction factors are the tabulated values, not the correlation output.
/// The returned schedule holds the fixed 0.3 MPa source and constant 1 kg/s
/// demands over 24 h as a template.
pub fn build_paper_network() -> (NetworkTopology, BoundarySchedule) {
    let table = [
        (1u32, 0.5, 60_000.0, 0.011851315),
        (2, 0.6, 50_000.0, 0.011152515),
        (3, 0.7, 40_000.0, 0.010593932),
    ];
    let pipes = table
        .iter()
        .map(|&(id, d, l, lambda)| PipeSpec {
            id,
            diameter: d,
            length: l,
            friction: lambda,
            compressibility: 1.0,
            gas_constant: PAPER_GAS_CONSTANT,
            temperature: PAPER_TEMPERATURE,
            efficiency: 1.0,
        })
        .collect();
    let nodes = vec![
        NodeSpec { id: 0, kind: NodeKind::Source, ports: vec![(1, End::Left)] },
        NodeSpec {
            id: 1,
            kind: NodeKind::Junction,
            ports: vec![(1, End::Right), (2, End::Left), (3, End::Left)],
        },
        NodeSpec { id: 2, kind: NodeKind::Demand, ports: vec![(2, End::Right)] },
        NodeSpec { id: 3, kind: NodeKind::Demand, ports: vec![(3, End::Right)] },
    ];
    let network = NetworkTopology { pipes, nodes };
    let mut schedule = BoundarySchedule::new(PAPER_HORIZON, PAPER_RAMP);
    schedule.source_pressure.insert(0, PiecewiseSeries::constant(PAPER_SOURCE_PRESSURE));
    schedule.demand_flow.insert(2, PiecewiseSeries::constant(1.0));
    schedule.demand_flow.insert(3, PiecewiseSeries::constant(1.0));
    (network, schedule)
}

/// One pipe between a source (left end, node 0) and a demand (right end, node 1).
pub fn single_pipe_network(pipe: PipeSpec) -> NetworkTopology {
    let id = pipe.id;
    NetworkTopology {
        pipes: vec![pipe],
        nodes: vec![
            NodeSpec { id: 0, kind: NodeKind::Source, ports: vec![(id, End::Left)] },
            NodeSpec { id: 1, kind: NodeKind::Demand, ports: vec![(id, End::Right)] },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weymouth_matches_direct_arithmetic() {
        let lambda = compute_weymouth_friction(0.5, 1.0).unwrap();
        let direct = 4.0 / (11.19 * (0.5f64 * 39.3701).powf(0.167)).powi(2);
        assert_eq!(lambda, direct);
        assert!((lambda - 0.01181).abs() < 5e-6);
        // Tabulated value differs by roughly 0.4 %.
        let rel = (lambda - 0.011851315) / 0.011851315;
        assert!(rel < 0.0 && rel.abs() < 0.005, "rel = {rel}");
    }

    #[test]
    fn weymouth_scales_with_inverse_square_efficiency() {
        for d in [0.3, 0.5, 0.9] {
            let a = compute_weymouth_friction(d, 1.0).unwrap();
            let b = compute_weymouth_friction(d, 2.0).unwrap();
            assert!((b - a / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weymouth_rejects_bad_domain() {
        assert!(compute_weymouth_friction(0.0, 1.0).is_err());
        assert!(compute_weymouth_friction(0.5, -1.0).is_err());
    }

    #[test]
    fn paper_network_shape() {
        let (net, sched) = build_paper_network();
        assert_eq!(net.pipes.len(), 3);
        assert_eq!(net.node_ids(NodeKind::Source).len(), 1);
        assert_eq!(net.node_ids(NodeKind::Junction).len(), 1);
        assert_eq!(net.node_ids(NodeKind::Demand).len(), 2);
        assert_eq!(net.pipes[0].friction, 0.011851315);
        assert!(net.validate().is_ok());
        assert!(sched.validate(&net).is_ok());
    }

    #[test]
    fn violations_are_all_reported() {
        let (mut net, _) = build_paper_network();
        net.nodes[0].kind = NodeKind::Demand;
        net.nodes[2].ports.push((1, End::Right));
        let v = net.validate().unwrap_err();
        let text: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        assert!(text.iter().any(|t| t.contains("duplicate port")), "{text:?}");
        assert!(text.iter().any(|t| t.contains("no pressure reference")), "{text:?}");
    }

    #[test]
    fn disconnected_network_detected() {
        let (mut net, _) = build_paper_network();
        let extra = PipeSpec { id: 9, ..net.pipes[0].clone() };
        net.pipes.push(extra);
        net.nodes.push(NodeSpec { id: 8, kind: NodeKind::Source, ports: vec![(9, End::Left)] });
        net.nodes.push(NodeSpec { id: 9, kind: NodeKind::Demand, ports: vec![(9, End::Right)] });
        let v = net.validate().unwrap_err();
        assert_eq!(v, vec![Violation::Disconnected]);
    }

    #[test]
    fn json_field_names() {
        let (net, sched) = build_paper_network();
        let text = net.to_json(Some(&sched)).unwrap();
        for key in ["\"diameter_m\"", "\"length_m\"", "\"lambda\"", "\"Z\"", "\"R\"", "\"T_K\"", "\"E\"", "\"ports\"", "\"schedule\""] {
            assert!(text.contains(key), "missing {key}");
        }
        let doc = ScenarioDocument::from_json(&text).unwrap();
        assert_eq!(doc.network(), net);
        assert_eq!(doc.schedule.as_ref(), Some(&sched));
    }
}
