//! Velocity-grid graph over the upcoming lights and its shortest-path
//! cost-to-go.
//!
//! Each interior layer holds the candidate passing velocities at one light.
//! An edge into a light costs the change in squared velocity plus, if the
//! light is not green on arrival, the squared velocity lost by stopping.
//! Edge costs can be negative, so every edge is shifted by the constant
//! [`EDGE_OFFSET`]; all start-to-terminal paths have the same number of edges
//! and the shift does not change the argmin.
//!
//! Arrival times accumulate along the path (`t_j = t_i + ds / v_j`), so the
//! time at a light depends on every earlier velocity choice. Layers whose
//! outgoing edges need that time (lights 2..N-1) are expanded per incoming
//! path; the last light layer needs no time state and stays at one node per
//! grid velocity.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::signal::{phase_at, Phase};
use crate::world::{SpatEntry, SpatHorizon};
use crate::{Error, Result};

pub const GRID_MIN: f64 = 5.0;
pub const GRID_MAX: f64 = 10.0;
pub const GRID_VELOCITIES: [f64; 6] = [5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

/// Per-edge shift that makes every edge weight positive.
pub const EDGE_OFFSET: f64 = 2.0 * GRID_MAX * GRID_MAX;

/// Sign applied to the stop penalty. `Printed` subtracts it, which rewards
/// stopping; it exists only for auditing against the printed formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StopPenaltySign {
    #[default]
    Kinetic,
    Printed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLayer {
    Start,
    /// 1-based light index, 2..=N_TL.
    Light(usize),
    Terminal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GraphNode {
    pub layer: NodeLayer,
    pub v: f64,
    /// Passage time at the node's light, if it carries time state.
    pub time: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    /// Arrival time at the destination light (absent for terminal edges).
    pub arrival_time: Option<f64>,
    pub green_on_arrival: bool,
    pub raw_cost: f64,
}

impl GraphEdge {
    pub fn shifted_cost(&self) -> f64 {
        self.raw_cost + EDGE_OFFSET
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LightGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub light_count: usize,
    #[serde(skip)]
    out_edges: Vec<Vec<usize>>,
}

impl LightGraph {
    pub const START: usize = 0;

    pub fn terminal(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = &GraphEdge> {
        self.out_edges[node].iter().map(move |&e| &self.edges[e])
    }

    pub fn layer_nodes(&self, layer: NodeLayer) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(move |(_, n)| n.layer == layer).map(|(i, _)| i)
    }

    pub fn path_cost(&self, nodes: &[usize]) -> f64 {
        nodes
            .windows(2)
            .map(|pair| self.out_edges(pair[0]).find(|e| e.to == pair[1]).expect("consecutive path nodes share an edge").raw_cost)
            .sum()
    }
}

/// Raw edge cost `v_i^2 - v_j^2 + [not green] v_j^2`.
pub fn edge_cost(v_i: f64, v_j: f64, green_at_arrival: bool) -> f64 {
    edge_cost_with_sign(v_i, v_j, green_at_arrival, StopPenaltySign::Kinetic)
}

pub fn edge_cost_with_sign(v_i: f64, v_j: f64, green_at_arrival: bool, sign: StopPenaltySign) -> f64 {
    let base = v_i * v_i - v_j * v_j;
    if green_at_arrival {
        base
    } else {
        match sign {
            StopPenaltySign::Kinetic => base + v_j * v_j,
            StopPenaltySign::Printed => base - v_j * v_j,
        }
    }
}

pub fn build_graph(v_pass: f64, spat: &SpatHorizon, t_to_first_light: f64) -> Result<LightGraph> {
    build_graph_with(v_pass, spat.entries(), t_to_first_light, StopPenaltySign::Kinetic)
}

/// Builds the graph for `lights` (the first one is the start node's light).
/// Times are relative to the instant the SPaT entries describe.
pub fn build_graph_with(
    v_pass: f64,
    lights: &[SpatEntry],
    t_to_first_light: f64,
    sign: StopPenaltySign,
) -> Result<LightGraph> {
    if !(v_pass > 0.0 && v_pass.is_finite()) {
        return Err(Error::Graph(format!("passing velocity must be positive, got {v_pass}")));
    }
    if lights.is_empty() {
        return Err(Error::Graph("need at least one light".into()));
    }
    if lights.windows(2).any(|pair| pair[1].s_tl <= pair[0].s_tl) {
        return Err(Error::Graph("light positions must be strictly increasing".into()));
    }

    let n_tl = lights.len();
    let mut nodes = vec![GraphNode { layer: NodeLayer::Start, v: v_pass, time: Some(t_to_first_light) }];
    let mut edges = Vec::new();
    let mut frontier = vec![LightGraph::START];

    for j in 1..n_tl {
        let light = &lights[j];
        let ds = light.s_tl - lights[j - 1].s_tl;
        let is_last = j == n_tl - 1;
        let mut next = Vec::new();

        if is_last {
            let first = nodes.len();
            for &v in &GRID_VELOCITIES {
                nodes.push(GraphNode { layer: NodeLayer::Light(j + 1), v, time: None });
            }
            for &from in &frontier {
                let t_from = nodes[from].time.expect("non-final layers carry time");
                for (k, &v) in GRID_VELOCITIES.iter().enumerate() {
                    let arrival = t_from + ds / v;
                    let green = phase_at(light, arrival).0 == Phase::Green;
                    let raw_cost = edge_cost_with_sign(nodes[from].v, v, green, sign);
                    edges.push(GraphEdge { from, to: first + k, arrival_time: Some(arrival), green_on_arrival: green, raw_cost });
                }
            }
            next.extend(first..first + GRID_VELOCITIES.len());
        } else {
            for &from in &frontier {
                let t_from = nodes[from].time.expect("non-final layers carry time");
                for &v in &GRID_VELOCITIES {
                    let arrival = t_from + ds / v;
                    let green = phase_at(light, arrival).0 == Phase::Green;
                    let raw_cost = edge_cost_with_sign(nodes[from].v, v, green, sign);
                    let to = nodes.len();
                    nodes.push(GraphNode { layer: NodeLayer::Light(j + 1), v, time: Some(arrival) });
                    edges.push(GraphEdge { from, to, arrival_time: Some(arrival), green_on_arrival: green, raw_cost });
                    next.push(to);
                }
            }
        }
        frontier = next;
    }

    let terminal = nodes.len();
    nodes.push(GraphNode { layer: NodeLayer::Terminal, v: v_pass, time: None });
    for &from in &frontier {
        let raw_cost = edge_cost_with_sign(nodes[from].v, v_pass, true, sign);
        edges.push(GraphEdge { from, to: terminal, arrival_time: None, green_on_arrival: true, raw_cost });
    }

    let mut out_edges = vec![Vec::new(); nodes.len()];
    for (idx, e) in edges.iter().enumerate() {
        out_edges[e.from].push(idx);
    }
    Ok(LightGraph { nodes, edges, light_count: n_tl, out_edges })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShortestPath {
    /// Raw (unshifted) path cost.
    pub cost: f64,
    pub nodes: Vec<usize>,
    pub velocities: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (dist, node).
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Relaxation shared by both solvers: strictly better distance, or equal
/// distance through a lower-indexed predecessor.
fn improves(candidate: f64, from: usize, dist: f64, pred: Option<usize>) -> bool {
    candidate < dist || (candidate == dist && pred.is_some_and(|p| from < p))
}

fn trace(graph: &LightGraph, pred: &[Option<usize>]) -> Vec<usize> {
    let mut path = vec![graph.terminal()];
    while let Some(p) = pred[*path.last().unwrap()] {
        path.push(p);
    }
    path.reverse();
    path
}

/// Dijkstra over the shifted (positive) edge weights.
pub fn shortest_path(graph: &LightGraph) -> ShortestPath {
    let n = graph.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut settled = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[LightGraph::START] = 0.0;
    heap.push(HeapItem { dist: 0.0, node: LightGraph::START });

    while let Some(HeapItem { dist: d, node }) = heap.pop() {
        if settled[node] || d > dist[node] {
            continue;
        }
        settled[node] = true;
        if node == graph.terminal() {
            break;
        }
        for e in graph.out_edges(node) {
            let candidate = d + e.shifted_cost();
            if !settled[e.to] && improves(candidate, node, dist[e.to], pred[e.to]) {
                dist[e.to] = candidate;
                pred[e.to] = Some(node);
                heap.push(HeapItem { dist: candidate, node: e.to });
            }
        }
    }

    let nodes = trace(graph, &pred);
    finish(graph, nodes)
}

/// Layer-by-layer dynamic programming on the raw edge costs. Node indices
/// are already a topological order.
pub fn dag_shortest_path(graph: &LightGraph) -> ShortestPath {
    let n = graph.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    dist[LightGraph::START] = 0.0;
    for node in 0..n {
        if dist[node].is_infinite() {
            continue;
        }
        for e in graph.out_edges(node) {
            let candidate = dist[node] + e.raw_cost;
            if improves(candidate, node, dist[e.to], pred[e.to]) {
                dist[e.to] = candidate;
                pred[e.to] = Some(node);
            }
        }
    }
    let nodes = trace(graph, &pred);
    finish(graph, nodes)
}

fn finish(graph: &LightGraph, nodes: Vec<usize>) -> ShortestPath {
    let cost = graph.path_cost(&nodes);
    let velocities = nodes.iter().map(|&i| graph.nodes[i].v).collect();
    ShortestPath { cost, nodes, velocities }
}

/// Minimum raw path cost from the first light to the terminal node.
pub fn terminal_cost(v_pass: f64, spat: &SpatHorizon, t_to_first_light: f64) -> Result<f64> {
    let graph = build_graph(v_pass, spat, t_to_first_light)?;
    Ok(shortest_path(&graph).cost)
}

/// Structured dump of a graph and its chosen path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphDiagnostic {
    pub light_count: usize,
    pub node_count: usize,
    pub edge_count: usize,
    pub cost: f64,
    pub path_velocities: Vec<f64>,
    pub path_arrival_times: Vec<f64>,
    pub path_green: Vec<bool>,
}

impl GraphDiagnostic {
    pub fn new(graph: &LightGraph, path: &ShortestPath) -> Self {
        let mut path_arrival_times = Vec::new();
        let mut path_green = Vec::new();
        for pair in path.nodes.windows(2) {
            if let Some(e) = graph.out_edges(pair[0]).find(|e| e.to == pair[1]) {
                if let Some(t) = e.arrival_time {
                    path_arrival_times.push(t);
                    path_green.push(e.green_on_arrival);
                }
            }
        }
        Self {
            light_count: graph.light_count,
            node_count: graph.nodes.len(),
            edge_count: graph.edges.len(),
            cost: path.cost,
            path_velocities: path.velocities.clone(),
            path_arrival_times,
            path_green,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::CycleSpec;

    fn light(s: f64, phase: Phase, rem: f64, cycle: [f64; 3]) -> SpatEntry {
        SpatEntry::new(s, phase, rem, CycleSpec::new(cycle[0], cycle[1], cycle[2]).unwrap()).unwrap()
    }

    fn always_green(s: f64) -> SpatEntry {
        light(s, Phase::Green, 1000.0, [1000.0, 1.0, 1.0])
    }

    #[test]
    fn single_light_graph() {
        let spat = SpatHorizon::new(vec![always_green(0.0)]).unwrap();
        let g = build_graph(7.0, &spat, 3.0).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(terminal_cost(7.0, &spat, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn three_light_counts() {
        let spat = SpatHorizon::new(vec![always_green(0.0), always_green(200.0), always_green(400.0)]).unwrap();
        let g = build_graph(8.0, &spat, 0.0).unwrap();
        assert_eq!(g.nodes.len(), 2 + 6 * 2);
        assert_eq!(g.edges.len(), 6 + 36 + 6);
    }

    #[test]
    fn four_lights_expand_the_middle_layer() {
        let spat = SpatHorizon::new((0..4).map(|i| always_green(200.0 * i as f64)).collect()).unwrap();
        let g = build_graph(8.0, &spat, 0.0).unwrap();
        assert_eq!(g.nodes.len(), 2 + 6 + 36 + 6);
        assert_eq!(g.edges.len(), 6 + 36 + 216 + 6);
    }

    #[test]
    fn arrival_time_from_destination_velocity() {
        let spat = SpatHorizon::new(vec![always_green(0.0), always_green(200.0)]).unwrap();
        let g = build_graph(6.0, &spat, 0.0).unwrap();
        let e = g.out_edges(LightGraph::START).find(|e| g.nodes[e.to].v == 10.0).unwrap();
        assert_eq!(e.arrival_time, Some(20.0));
    }

    #[test]
    fn edge_cost_examples() {
        assert_eq!(edge_cost(7.0, 7.0, true), 0.0);
        assert_eq!(edge_cost(7.0, 7.0, true) + EDGE_OFFSET, 200.0);
        assert_eq!(edge_cost(5.0, 10.0, true), -75.0);
        assert_eq!(edge_cost(5.0, 10.0, true) + EDGE_OFFSET, 125.0);
        assert_eq!(edge_cost(6.0, 5.0, false), 36.0);
        assert_eq!(edge_cost(6.0, 5.0, false) + EDGE_OFFSET, 236.0);
        assert_eq!(edge_cost_with_sign(6.0, 5.0, false, StopPenaltySign::Printed), -14.0);
    }

    #[test]
    fn all_green_telescopes_to_zero() {
        let spat = SpatHorizon::new(vec![always_green(0.0), always_green(200.0)]).unwrap();
        assert_eq!(terminal_cost(8.0, &spat, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn all_red_second_light() {
        let red = light(200.0, Phase::Red, 1000.0, [1.0, 1.0, 1000.0]);
        let spat = SpatHorizon::new(vec![always_green(0.0), red]).unwrap();
        // Every path stops at light 2: (vp^2 - vj^2) + vj^2 + (vj^2 - vp^2) = vj^2,
        // minimised by the slowest grid velocity.
        assert_eq!(terminal_cost(8.0, &spat, 0.0).unwrap(), 25.0);
    }

    #[test]
    fn dijkstra_and_dp_agree_on_mixed_case() {
        let spat = SpatHorizon::new(vec![
            always_green(0.0),
            light(180.0, Phase::Red, 20.0, [15.0, 3.0, 22.0]),
            light(420.0, Phase::Green, 12.0, [25.0, 3.0, 20.0]),
            light(610.0, Phase::Yellow, 2.0, [30.0, 3.0, 30.0]),
        ])
        .unwrap();
        let g = build_graph(7.0, &spat, 4.0).unwrap();
        let a = shortest_path(&g);
        let b = dag_shortest_path(&g);
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.cost, b.cost);
    }

    #[test]
    fn rejects_bad_inputs() {
        let lights = [always_green(100.0), always_green(100.0)];
        assert!(build_graph_with(5.0, &lights, 0.0, StopPenaltySign::Kinetic).is_err());
        assert!(build_graph_with(0.0, &lights[..1], 0.0, StopPenaltySign::Kinetic).is_err());
    }
}
