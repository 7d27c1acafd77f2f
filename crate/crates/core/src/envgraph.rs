//! Navigation environments as undirected weighted graphs with panoramic
//! observations, plus the geodesic machinery everything else leans on:
//! shortest paths for supervision, distances for rewards and metrics, view
//! features and navigable-action candidates for the encoders and the agent.
//!
//! Environments are immutable after construction; all operations here are
//! pure functions of their inputs.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-view appearance features for one location. Rows are indexed
/// `elevation * n_head + heading`; headings are evenly spaced at
/// `2 pi / n_head`, elevations evenly spaced in [-30 deg, +30 deg].
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    pub n_elev: usize,
    pub n_head: usize,
    /// `[n_elev * n_head, d_app]` appearance features.
    pub features: Array2<f64>,
}

impl Panorama {
    pub fn k_views(&self) -> usize {
        self.n_elev * self.n_head
    }

    pub fn d_app(&self) -> usize {
        self.features.ncols()
    }

    /// Heading angle (compass radians, 0 = +y, clockwise positive) of a view.
    pub fn heading_of(&self, view_index: usize) -> f64 {
        2.0 * PI * ((view_index % self.n_head) as f64) / (self.n_head as f64)
    }

    /// Elevation angle of a view.
    pub fn elevation_of(&self, view_index: usize) -> f64 {
        let row = view_index / self.n_head;
        if self.n_elev == 1 {
            0.0
        } else {
            let lo = -PI / 6.0;
            let hi = PI / 6.0;
            lo + (hi - lo) * (row as f64) / ((self.n_elev - 1) as f64)
        }
    }

    /// Index of the middle-elevation view whose heading sector contains
    /// `bearing` (sectors are centered on the evenly spaced headings).
    pub fn view_facing(&self, bearing: f64) -> usize {
        let sector = 2.0 * PI / (self.n_head as f64);
        let h = (wrap_angle(bearing) / sector).round() as usize % self.n_head;
        (self.n_elev / 2) * self.n_head + h
    }
}

/// Room/object annotations used by the synthetic instruction generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeLabels {
    #[serde(default)]
    pub room: String,
    #[serde(default)]
    pub objects: Vec<ObjectPlacement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub name: String,
    /// Compass bearing of the object from the node, radians in [0, 2 pi).
    pub bearing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeRecord {
    pub node_id: String,
    pub position: [f64; 2],
    pub panorama: Panorama,
    pub labels: NodeLabels,
}

/// Undirected weighted graph of locations. Edge weight is the Euclidean
/// distance between endpoint positions. Nodes are stored sorted by id, and
/// adjacency lists are sorted by neighbor id, so index order is id order.
#[derive(Clone, Debug)]
pub struct EnvironmentGraph {
    env_id: String,
    nodes: Vec<NodeRecord>,
    index: BTreeMap<String, usize>,
    adj: Vec<Vec<(usize, f64)>>,
}

/// Euclidean distance, used for every edge weight and path segment in the
/// crate so that sums over the same segments are bit-identical.
pub fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Compass bearing from `a` to `b`: 0 at +y (north), clockwise positive,
/// normalized to [0, 2 pi).
pub fn bearing(a: [f64; 2], b: [f64; 2]) -> f64 {
    wrap_angle((b[0] - a[0]).atan2(b[1] - a[1]))
}

/// Normalize an angle to [0, 2 pi).
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = theta % two_pi;
    if t < 0.0 {
        t += two_pi;
    }
    t
}

/// Signed smallest difference `a - b`, in (-pi, pi].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = wrap_angle(a - b);
    if d > PI {
        d -= 2.0 * PI;
    }
    d
}

impl EnvironmentGraph {
    /// Validating constructor. Checks id uniqueness, finiteness, panorama
    /// shape consistency, edge sanity (known endpoints, no self-loops,
    /// positive weight), and connectivity.
    pub fn new(
        env_id: impl Into<String>,
        mut nodes: Vec<NodeRecord>,
        edges: &[(String, String)],
    ) -> Result<Self> {
        let env_id = env_id.into();
        let invalid = |reason: String| Error::InvalidEnvironment { env_id: env_id.clone(), reason };

        if nodes.is_empty() {
            return Err(invalid("no nodes".into()));
        }
        nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        let mut index = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.node_id.clone(), i).is_some() {
                return Err(invalid(format!("duplicate node id `{}`", node.node_id)));
            }
            if !node.position.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("non-finite position at `{}`", node.node_id)));
            }
            let pano = &node.panorama;
            if pano.features.nrows() != pano.k_views() {
                return Err(invalid(format!(
                    "panorama at `{}` has {} rows, expected n_elev * n_head = {}",
                    node.node_id,
                    pano.features.nrows(),
                    pano.k_views()
                )));
            }
            if !pano.features.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("non-finite features at `{}`", node.node_id)));
            }
        }

        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nodes.len()];
        let mut seen = std::collections::BTreeSet::new();
        for (a, b) in edges {
            let ia = *index
                .get(a)
                .ok_or_else(|| Error::UnknownNode(a.clone()))?;
            let ib = *index
                .get(b)
                .ok_or_else(|| Error::UnknownNode(b.clone()))?;
            if ia == ib {
                return Err(invalid(format!("self-loop at `{a}`")));
            }
            let key = (ia.min(ib), ia.max(ib));
            if !seen.insert(key) {
                continue; // duplicate edge entries collapse
            }
            let w = euclid(nodes[ia].position, nodes[ib].position);
            if !(w > 0.0) {
                return Err(invalid(format!("zero-length edge `{a}`-`{b}`")));
            }
            adj[ia].push((ib, w));
            adj[ib].push((ia, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(n, _)| n); // index order == id order
        }

        let graph = Self { env_id, nodes, index, adj };
        if !graph.is_connected() {
            return Err(Error::InvalidEnvironment {
                env_id: graph.env_id.clone(),
                reason: "graph is not connected".into(),
            });
        }
        Ok(graph)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.nodes.len()
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.node_id.as_str())
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn node(&self, id: &str) -> Result<&NodeRecord> {
        Ok(&self.nodes[self.node_index(id)?])
    }

    pub fn node_by_index(&self, idx: usize) -> &NodeRecord {
        &self.nodes[idx]
    }

    /// Neighbor indices with edge weights, sorted by neighbor id.
    pub fn neighbors(&self, idx: usize) -> &[(usize, f64)] {
        &self.adj[idx]
    }

    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (u, list) in self.adj.iter().enumerate() {
            for &(v, _) in list {
                if u < v {
                    out.push((self.nodes[u].node_id.clone(), self.nodes[v].node_id.clone()));
                }
            }
        }
        out
    }

    /// Minimum-total-weight path from `a` to `b`; among ties, the
    /// lexicographically smallest node-id sequence.
    pub fn shortest_path(&self, a: &str, b: &str) -> Result<Path> {
        let ia = self.node_index(a)?;
        let ib = self.node_index(b)?;
        let ids = self
            .shortest_path_indices(ia, ib)
            .into_iter()
            .map(|i| self.nodes[i].node_id.clone())
            .collect();
        Ok(Path::new_unchecked(&self.env_id, ids, false))
    }

    /// Index-level shortest path; relies on connectivity (always reachable).
    pub(crate) fn shortest_path_indices(&self, from: usize, to: usize) -> Vec<usize> {
        if from == to {
            return vec![from];
        }
        let dist_from = self.dijkstra(from);
        let dist_to = self.dijkstra(to);
        let total = dist_from[to];
        let eps = 1e-9 * total.max(1.0);
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            // Adjacency is id-sorted, so the first consistent neighbor is the
            // lexicographically smallest feasible continuation.
            let mut chosen = None;
            for &(n, w) in &self.adj[cur] {
                let on_shortest = (dist_from[cur] + w + dist_to[n] - total).abs() <= eps;
                let advances = (dist_from[cur] + w - dist_from[n]).abs() <= eps;
                if on_shortest && advances {
                    chosen = Some(n);
                    break;
                }
            }
            cur = chosen.expect("shortest-path walk lost consistency");
            path.push(cur);
        }
        path
    }

    /// Dijkstra distances from `source` to every node.
    pub(crate) fn dijkstra(&self, source: usize) -> Vec<f64> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        dist[source] = 0.0;
        let mut heap: BinaryHeap<(Reverse<OrdF64>, usize)> = BinaryHeap::new();
        heap.push((Reverse(OrdF64(0.0)), source));
        while let Some((Reverse(d), u)) = heap.pop() {
            let d = d.0;
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push((Reverse(OrdF64(nd)), v));
                }
            }
        }
        dist
    }

    /// Geodesic distance between two nodes. Computed over the canonical
    /// endpoint ordering so `d(a, b)` and `d(b, a)` are bit-identical.
    pub fn geodesic_distance(&self, a: &str, b: &str) -> Result<f64> {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        let path = self.shortest_path(x, y)?;
        self.path_length(&path)
    }

    /// Total length of a path: the sum of Euclidean segment lengths, which
    /// for connected paths equals the sum of edge weights. Segments are
    /// summed in a canonical direction (from the smaller endpoint id) so a
    /// path and its reverse sum bit-identically.
    pub fn path_length(&self, path: &Path) -> Result<f64> {
        if path.env_id() != self.env_id {
            return Err(Error::InvalidPath(format!(
                "path belongs to `{}`, not `{}`",
                path.env_id(),
                self.env_id
            )));
        }
        let ids = path.node_ids();
        let mut positions = Vec::with_capacity(ids.len());
        for (step, id) in ids.iter().enumerate() {
            let idx = self.node_index(id)?;
            if !path.disconnected_ok() && step > 0 {
                let prev = self.node_index(&ids[step - 1])?;
                if !self.adj[prev].iter().any(|&(n, _)| n == idx) {
                    return Err(Error::InvalidPath(format!(
                        "`{}` and `{}` are not adjacent",
                        ids[step - 1],
                        id
                    )));
                }
            }
            positions.push(self.nodes[idx].position);
        }
        let forward = ids.first() <= ids.last();
        let mut total = 0.0;
        if forward {
            for pair in positions.windows(2) {
                total += euclid(pair[0], pair[1]);
            }
        } else {
            for pair in positions.windows(2).rev() {
                total += euclid(pair[1], pair[0]);
            }
        }
        Ok(total)
    }

    /// Appearance features of one view concatenated with its orientation
    /// encoding `[sin phi, cos phi, sin theta, cos theta]`.
    pub fn view_features(&self, node_id: &str, view_index: usize) -> Result<Array1<f64>> {
        let node = self.node(node_id)?;
        let pano = &node.panorama;
        if view_index >= pano.k_views() {
            return Err(Error::InvalidParams(format!(
                "view index {view_index} out of range for {} views",
                pano.k_views()
            )));
        }
        let phi = pano.heading_of(view_index);
        let theta = pano.elevation_of(view_index);
        let d = pano.d_app();
        let mut out = Array1::zeros(d + 4);
        out.slice_mut(ndarray::s![..d])
            .assign(&pano.features.row(view_index));
        out[d] = phi.sin();
        out[d + 1] = phi.cos();
        out[d + 2] = theta.sin();
        out[d + 3] = theta.cos();
        Ok(out)
    }

    /// All views of a node as a `[k_views, d_app + 4]` matrix.
    pub fn view_matrix(&self, node_id: &str) -> Result<Array2<f64>> {
        let node = self.node(node_id)?;
        let pano = &node.panorama;
        let d = pano.d_app();
        let mut out = Array2::zeros((pano.k_views(), d + 4));
        for i in 0..pano.k_views() {
            out.row_mut(i).assign(&self.view_features(node_id, i)?);
        }
        Ok(out)
    }

    /// Action candidates at a node: one per graph neighbor (sorted by id)
    /// plus a terminal STOP candidate, last. A move candidate's feature is
    /// the appearance feature of the view facing that neighbor, with the
    /// orientation suffix taken relative to the agent's heading.
    pub fn navigable_actions(
        &self,
        node_id: &str,
        agent_heading: f64,
        stop_feature: &Array1<f64>,
    ) -> Result<Vec<ActionCandidate>> {
        let idx = self.node_index(node_id)?;
        let node = &self.nodes[idx];
        let d = node.panorama.d_app();
        let mut out = Vec::with_capacity(self.adj[idx].len() + 1);
        for &(n, _) in &self.adj[idx] {
            let neighbor = &self.nodes[n];
            let brg = bearing(node.position, neighbor.position);
            let view = node.panorama.view_facing(brg);
            let rel = angle_diff(brg, agent_heading);
            let mut feature = Array1::zeros(d + 4);
            feature
                .slice_mut(ndarray::s![..d])
                .assign(&node.panorama.features.row(view));
            feature[d] = rel.sin();
            feature[d + 1] = rel.cos();
            feature[d + 2] = 0.0;
            feature[d + 3] = 1.0;
            out.push(ActionCandidate {
                target: Some(neighbor.node_id.clone()),
                feature,
                bearing: Some(brg),
            });
        }
        assert_eq!(
            stop_feature.len(),
            d + 4,
            "stop feature must be d_app + 4 wide"
        );
        out.push(ActionCandidate { target: None, feature: stop_feature.clone(), bearing: None });
        Ok(out)
    }
}

/// Wrapper giving f64 a total order for the Dijkstra heap (no NaNs occur).
#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("NaN in edge weights")
    }
}

/// One navigable direction (or STOP when `target` is `None`).
#[derive(Clone, Debug)]
pub struct ActionCandidate {
    pub target: Option<String>,
    pub feature: Array1<f64>,
    pub bearing: Option<f64>,
}

/// An ordered node sequence in one environment. Consecutive nodes must be
/// adjacent unless the path is tagged `disconnected_ok` (partial-reorder
/// negatives, whose shuffled interiors rarely form edges).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    env_id: String,
    node_ids: Vec<String>,
    #[serde(default)]
    disconnected_ok: bool,
}

impl Path {
    /// Construct and validate against an environment: length >= 1 (a single
    /// node is the degenerate identity path), all nodes known, consecutive
    /// nodes adjacent unless `disconnected_ok`.
    pub fn new(env: &EnvironmentGraph, node_ids: Vec<String>, disconnected_ok: bool) -> Result<Self> {
        if node_ids.is_empty() {
            return Err(Error::InvalidPath("empty node sequence".into()));
        }
        for pair in node_ids.windows(2) {
            let a = env.node_index(&pair[0])?;
            let b = env.node_index(&pair[1])?;
            if !disconnected_ok && !env.adj[a].iter().any(|&(n, _)| n == b) {
                return Err(Error::InvalidPath(format!(
                    "`{}` and `{}` are not adjacent",
                    pair[0], pair[1]
                )));
            }
        }
        env.node_index(&node_ids[0])?;
        Ok(Self::new_unchecked(env.env_id(), node_ids, disconnected_ok))
    }

    pub(crate) fn new_unchecked(
        env_id: &str,
        node_ids: Vec<String>,
        disconnected_ok: bool,
    ) -> Self {
        Self { env_id: env_id.to_string(), node_ids, disconnected_ok }
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn first(&self) -> &str {
        &self.node_ids[0]
    }

    pub fn last(&self) -> &str {
        self.node_ids.last().unwrap()
    }

    pub fn n_edges(&self) -> usize {
        self.node_ids.len() - 1
    }

    pub fn disconnected_ok(&self) -> bool {
        self.disconnected_ok
    }
}

// ---------------------------------------------------------------------------
// Serialization (schema: schemas/environment.schema.json)

#[derive(Serialize, Deserialize)]
struct EnvFile {
    env_id: String,
    nodes: Vec<NodeFile>,
    edges: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    id: String,
    pos: [f64; 2],
    panorama: PanoramaFile,
    #[serde(default, skip_serializing_if = "labels_empty")]
    labels: NodeLabels,
}

fn labels_empty(l: &NodeLabels) -> bool {
    l.room.is_empty() && l.objects.is_empty()
}

#[derive(Serialize, Deserialize)]
struct PanoramaFile {
    n_elev: usize,
    n_head: usize,
    d_app: usize,
    /// Nested rows, `n_elev * n_head` of them, each `d_app` long.
    features: Vec<Vec<f64>>,
}

impl EnvironmentGraph {
    pub fn to_json(&self) -> serde_json::Value {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeFile {
                id: n.node_id.clone(),
                pos: n.position,
                panorama: PanoramaFile {
                    n_elev: n.panorama.n_elev,
                    n_head: n.panorama.n_head,
                    d_app: n.panorama.d_app(),
                    features: n
                        .panorama
                        .features
                        .rows()
                        .into_iter()
                        .map(|r| r.to_vec())
                        .collect(),
                },
                labels: n.labels.clone(),
            })
            .collect();
        let file = EnvFile { env_id: self.env_id.clone(), nodes, edges: self.edges() };
        serde_json::to_value(file).expect("environment serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: EnvFile = serde_json::from_value(value)?;
        let nodes = file
            .nodes
            .into_iter()
            .map(|n| {
                let k = n.panorama.n_elev * n.panorama.n_head;
                if n.panorama.features.len() != k {
                    return Err(Error::Parse(format!(
                        "node `{}`: {} feature rows, expected {k}",
                        n.id,
                        n.panorama.features.len()
                    )));
                }
                let mut features = Array2::zeros((k, n.panorama.d_app));
                for (i, row) in n.panorama.features.iter().enumerate() {
                    if row.len() != n.panorama.d_app {
                        return Err(Error::Parse(format!(
                            "node `{}` view {i}: {} columns, expected {}",
                            n.id,
                            row.len(),
                            n.panorama.d_app
                        )));
                    }
                    features.row_mut(i).assign(&Array1::from_vec(row.clone()));
                }
                Ok(NodeRecord {
                    node_id: n.id,
                    position: n.pos,
                    panorama: Panorama {
                        n_elev: n.panorama.n_elev,
                        n_head: n.panorama.n_head,
                        features,
                    },
                    labels: n.labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.env_id, nodes, &file.edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use vln_oracles::graph::brute_shortest_path;

    fn pano(n_elev: usize, n_head: usize, d_app: usize, fill: f64) -> Panorama {
        Panorama {
            n_elev,
            n_head,
            features: Array2::from_shape_fn((n_elev * n_head, d_app), |(i, j)| {
                fill + 0.01 * i as f64 + 0.001 * j as f64
            }),
        }
    }

    fn node(id: &str, x: f64, y: f64) -> NodeRecord {
        NodeRecord {
            node_id: id.to_string(),
            position: [x, y],
            panorama: pano(1, 4, 2, x + y),
            labels: NodeLabels::default(),
        }
    }

    fn edge(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    /// Connected random geometric graph with at most 12 nodes.
    fn random_env(seed: u64) -> EnvironmentGraph {
        let mut seed = seed;
        loop {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = rng.random_range(8..=12);
            let nodes: Vec<NodeRecord> = (0..n)
                .map(|i| {
                    node(
                        &format!("n{i:02}"),
                        rng.random_range(0.0..10.0),
                        rng.random_range(0.0..10.0),
                    )
                })
                .collect();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if euclid(nodes[i].position, nodes[j].position) < 4.5 {
                        edges.push((nodes[i].node_id.clone(), nodes[j].node_id.clone()));
                    }
                }
            }
            match EnvironmentGraph::new(format!("test-{seed}"), nodes, &edges) {
                Ok(env) => return env,
                Err(_) => seed += 1,
            }
        }
    }

    fn adjacency_lists(env: &EnvironmentGraph) -> Vec<Vec<(usize, f64)>> {
        (0..env.n_nodes()).map(|i| env.neighbors(i).to_vec()).collect()
    }

    #[test]
    fn shortest_path_matches_brute_force() {
        for seed in 0..6 {
            let env = random_env(seed * 100);
            let adj = adjacency_lists(&env);
            let ids: Vec<String> = env.node_ids().map(str::to_string).collect();
            for a in 0..env.n_nodes() {
                for b in 0..env.n_nodes() {
                    let (bw, bpath) = brute_shortest_path(&adj, a, b).unwrap();
                    let path = env.shortest_path(&ids[a], &ids[b]).unwrap();
                    let got: Vec<usize> = path
                        .node_ids()
                        .iter()
                        .map(|id| env.node_index(id).unwrap())
                        .collect();
                    assert_eq!(got, bpath, "seed {seed} pair {a}->{b}");
                    let w = env.path_length(&path).unwrap();
                    assert_relative_eq!(w, bw, max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // Two equal-length routes from a to d: a-b-d and a-c-d. The node-id
        // sequence through b sorts first.
        let nodes = vec![
            node("a", 0.0, 0.0),
            node("b", 1.0, 1.0),
            node("c", 1.0, -1.0),
            node("d", 2.0, 0.0),
        ];
        let env = EnvironmentGraph::new(
            "tie",
            nodes,
            &[edge("a", "b"), edge("a", "c"), edge("b", "d"), edge("c", "d")],
        )
        .unwrap();
        let path = env.shortest_path("a", "d").unwrap();
        assert_eq!(path.node_ids(), &["a", "b", "d"]);
        let back = env.shortest_path("d", "a").unwrap();
        assert_eq!(back.node_ids(), &["d", "b", "a"]);
    }

    #[test]
    fn geodesic_is_a_metric() {
        let env = random_env(41);
        let ids: Vec<String> = env.node_ids().map(str::to_string).collect();
        for a in &ids {
            assert_eq!(env.geodesic_distance(a, a).unwrap(), 0.0);
            for b in &ids {
                let dab = env.geodesic_distance(a, b).unwrap();
                let dba = env.geodesic_distance(b, a).unwrap();
                assert_eq!(dab.to_bits(), dba.to_bits(), "asymmetry {a} {b}");
                for c in &ids {
                    let dac = env.geodesic_distance(a, c).unwrap();
                    let dbc = env.geodesic_distance(b, c).unwrap();
                    assert!(dac <= dab + dbc + 1e-9, "triangle {a} {b} {c}");
                }
            }
        }
    }

    #[test]
    fn path_length_of_shortest_path_equals_geodesic_exactly() {
        for seed in [3, 77] {
            let env = random_env(seed);
            let ids: Vec<String> = env.node_ids().map(str::to_string).collect();
            for a in &ids {
                for b in &ids {
                    let p = env.shortest_path(a, b).unwrap();
                    let pl = env.path_length(&p).unwrap();
                    let gd = env.geodesic_distance(a, b).unwrap();
                    assert_eq!(pl.to_bits(), gd.to_bits(), "{a}->{b}");
                }
            }
        }
    }

    #[test]
    fn path_length_is_reverse_invariant() {
        let env = random_env(9);
        let ids: Vec<String> = env.node_ids().map(str::to_string).collect();
        let p = env.shortest_path(&ids[0], ids.last().unwrap()).unwrap();
        let rev = Path::new_unchecked(
            env.env_id(),
            p.node_ids().iter().rev().cloned().collect(),
            false,
        );
        let a = env.path_length(&p).unwrap();
        let b = env.path_length(&rev).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn bearing_follows_compass_convention() {
        let o = [0.0, 0.0];
        assert_relative_eq!(bearing(o, [0.0, 1.0]), 0.0);
        assert_relative_eq!(bearing(o, [1.0, 0.0]), PI / 2.0);
        assert_relative_eq!(bearing(o, [0.0, -1.0]), PI);
        assert_relative_eq!(bearing(o, [-1.0, 0.0]), 3.0 * PI / 2.0);
        assert_relative_eq!(bearing(o, [1.0, 1.0]), PI / 4.0);
    }

    #[test]
    fn angle_diff_is_signed_smallest() {
        assert_relative_eq!(angle_diff(0.1, 2.0 * PI - 0.1), 0.2, epsilon = 1e-12);
        assert_relative_eq!(angle_diff(2.0 * PI - 0.1, 0.1), -0.2, epsilon = 1e-12);
        assert_relative_eq!(angle_diff(PI / 2.0, 0.0), PI / 2.0);
    }

    #[test]
    fn view_features_append_orientation() {
        let env = EnvironmentGraph::new(
            "v",
            vec![
                {
                    let mut n = node("a", 0.0, 0.0);
                    n.panorama = pano(3, 4, 2, 0.5);
                    n
                },
                node("b", 1.0, 0.0),
            ],
            &[edge("a", "b")],
        )
        .unwrap();
        // View 5: elevation row 1 (middle of three, angle 0), heading index 1
        // (pi / 2).
        let f = env.view_features("a", 5).unwrap();
        assert_eq!(f.len(), 6);
        assert_relative_eq!(f[2], 1.0, epsilon = 1e-12); // sin(pi/2)
        assert_relative_eq!(f[3], 0.0, epsilon = 1e-12); // cos(pi/2)
        assert_relative_eq!(f[4], 0.0, epsilon = 1e-12); // sin(0)
        assert_relative_eq!(f[5], 1.0, epsilon = 1e-12); // cos(0)
        let top = env.view_features("a", 9).unwrap();
        assert_relative_eq!(top[4], (PI / 6.0).sin(), epsilon = 1e-12);
        let m = env.view_matrix("a").unwrap();
        assert_eq!(m.dim(), (12, 6));
        assert_eq!(m.row(5).to_vec(), f.to_vec());
    }

    #[test]
    fn view_facing_picks_nearest_heading_sector() {
        let p = pano(3, 12, 2, 0.0);
        let sector = 2.0 * PI / 12.0;
        assert_eq!(p.view_facing(0.0), 12); // middle elevation row starts at 12
        assert_eq!(p.view_facing(sector), 13);
        assert_eq!(p.view_facing(0.49 * sector), 12);
        assert_eq!(p.view_facing(0.51 * sector), 13);
        assert_eq!(p.view_facing(2.0 * PI - 0.01), 12); // wraps to heading 0
    }

    #[test]
    fn navigable_actions_sorted_with_stop_last() {
        let env = EnvironmentGraph::new(
            "act",
            vec![
                node("hub", 0.0, 0.0),
                node("east", 2.0, 0.0),
                node("north", 0.0, 2.0),
            ],
            &[edge("hub", "east"), edge("hub", "north")],
        )
        .unwrap();
        let stop = Array1::from_elem(6, 9.0);
        let acts = env.navigable_actions("hub", 0.0, &stop).unwrap();
        assert_eq!(acts.len(), 3);
        assert_eq!(acts[0].target.as_deref(), Some("east"));
        assert_eq!(acts[1].target.as_deref(), Some("north"));
        assert!(acts[2].target.is_none());
        assert_eq!(acts[2].feature.to_vec(), stop.to_vec());
        // Facing north, the north neighbor is dead ahead: sin 0, cos 1.
        let f = &acts[1].feature;
        assert_relative_eq!(f[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(f[3], 1.0, epsilon = 1e-12);
        // The east neighbor is at relative bearing pi / 2.
        let f = &acts[0].feature;
        assert_relative_eq!(f[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f[3], 0.0, epsilon = 1e-12);
        assert_relative_eq!(acts[0].bearing.unwrap(), PI / 2.0);
    }

    #[test]
    fn paths_validate_adjacency_unless_disconnected_ok() {
        let env = EnvironmentGraph::new(
            "p",
            vec![node("a", 0.0, 0.0), node("b", 3.0, 4.0), node("c", 3.0, 5.0)],
            &[edge("a", "b"), edge("b", "c")],
        )
        .unwrap();
        assert!(Path::new(&env, vec!["a".into(), "c".into()], false).is_err());
        let skip = Path::new(&env, vec!["a".into(), "c".into()], true).unwrap();
        let len = env.path_length(&skip).unwrap();
        assert_relative_eq!(len, (9.0f64 + 25.0).sqrt());
        let walk = Path::new(&env, vec!["a".into(), "b".into(), "c".into()], false).unwrap();
        assert_relative_eq!(env.path_length(&walk).unwrap(), 6.0);
    }

    #[test]
    fn construction_rejects_bad_graphs() {
        assert!(EnvironmentGraph::new("x", vec![], &[]).is_err());
        // duplicate ids
        assert!(EnvironmentGraph::new(
            "x",
            vec![node("a", 0.0, 0.0), node("a", 1.0, 0.0)],
            &[]
        )
        .is_err());
        // disconnected
        assert!(EnvironmentGraph::new(
            "x",
            vec![node("a", 0.0, 0.0), node("b", 1.0, 0.0)],
            &[]
        )
        .is_err());
        // self loop
        assert!(EnvironmentGraph::new(
            "x",
            vec![node("a", 0.0, 0.0), node("b", 1.0, 0.0)],
            &[edge("a", "a"), edge("a", "b")]
        )
        .is_err());
        // unknown endpoint
        assert!(matches!(
            EnvironmentGraph::new(
                "x",
                vec![node("a", 0.0, 0.0), node("b", 1.0, 0.0)],
                &[edge("a", "z")]
            ),
            Err(Error::UnknownNode(_))
        ));
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut env = random_env(5);
        env.nodes[0].labels = NodeLabels {
            room: "kitchen".into(),
            objects: vec![ObjectPlacement { name: "lamp".into(), bearing: 1.25 }],
        };
        let json = env.to_json();
        let text = serde_json::to_string(&json).unwrap();
        let back = EnvironmentGraph::from_json(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.env_id(), env.env_id());
        assert_eq!(back.n_nodes(), env.n_nodes());
        for (a, b) in env.nodes().iter().zip(back.nodes()) {
            assert_eq!(a, b);
        }
        assert_eq!(env.edges(), back.edges());
    }
}
