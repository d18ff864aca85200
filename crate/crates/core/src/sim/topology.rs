//! Random peer graphs.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologyKind {
    RandomRegular { degree: usize },
    ErdosRenyi { p: f64 },
}

/// Undirected simple graph as sorted adjacency lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    pub adjacency: Vec<Vec<usize>>,
}

impl Graph {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Graph { adjacency }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, list) in self.adjacency.iter().enumerate() {
            out.extend(list.iter().filter(|&&b| a < b).map(|&b| (a, b)));
        }
        out
    }

    /// Hop distance from `from` to every node; `None` if unreachable.
    pub fn distances(&self, from: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::from([from]);
        dist[from] = Some(0);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].expect("queued nodes have a distance");
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.is_empty() || self.distances(0).iter().all(Option::is_some)
    }

    /// Largest hop distance from `node`, or `None` if the graph is disconnected.
    pub fn eccentricity(&self, node: usize) -> Option<usize> {
        self.distances(node)
            .into_iter()
            .try_fold(0, |acc, d| d.map(|d| acc.max(d)))
    }
}

/// Draws a connected graph, redrawing up to `max_retries` times.
pub fn build_topology<R: Rng>(
    n: usize,
    kind: TopologyKind,
    max_retries: usize,
    rng: &mut R,
) -> Result<Graph, SimError> {
    if n < 2 {
        return Err(SimError::ConfigInvalid("at least two peers are needed".into()));
    }
    match kind {
        TopologyKind::RandomRegular { degree } => {
            if degree == 0 || degree >= n || (n * degree) % 2 == 1 {
                return Err(SimError::ConfigInvalid(format!(
                    "no {degree}-regular simple graph on {n} nodes"
                )));
            }
        }
        TopologyKind::ErdosRenyi { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(SimError::ConfigInvalid(format!("edge probability {p} outside (0, 1]")));
            }
        }
    }
    for _ in 0..=max_retries {
        let graph = match kind {
            TopologyKind::RandomRegular { degree } => match random_regular(n, degree, rng) {
                Some(g) => g,
                None => continue,
            },
            TopologyKind::ErdosRenyi { p } => erdos_renyi(n, p, rng),
        };
        if graph.is_connected() {
            return Ok(graph);
        }
    }
    Err(SimError::DisconnectedAfterRetries(max_retries))
}

fn erdos_renyi<R: Rng>(n: usize, p: f64, rng: &mut R) -> Graph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    Graph::from_edges(n, &edges)
}

/// Pairs free stubs at random, rejecting loops and repeated edges; gives up
/// (returning `None`) when only unusable pairs remain.
fn random_regular<R: Rng>(n: usize, degree: usize, rng: &mut R) -> Option<Graph> {
    let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, degree)).collect();
    let mut adjacency = vec![Vec::with_capacity(degree); n];
    stubs.shuffle(rng);
    while !stubs.is_empty() {
        let mut paired = false;
        for _ in 0..stubs.len() * 4 {
            let i = rng.random_range(0..stubs.len());
            let j = rng.random_range(0..stubs.len());
            let (a, b) = (stubs[i], stubs[j]);
            if i == j || a == b || adjacency[a].contains(&b) {
                continue;
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
            let (hi, lo) = (i.max(j), i.min(j));
            stubs.swap_remove(hi);
            stubs.swap_remove(lo);
            paired = true;
            break;
        }
        if !paired {
            return None;
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Some(Graph { adjacency })
}
