use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ItemRelationGraph;

/// Summary statistics of an IRG. Degrees ignore self edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub avg_degree: f64,
    pub median_degree: f64,
    pub connected_components: usize,
    pub transitivity: f64,
    pub avg_clustering_coeff: f64,
}

pub fn graph_stats(irg: &ItemRelationGraph) -> GraphStats {
    let n = irg.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| irg.neighbors(i).iter().copied().filter(|&j| j != i).collect())
        .collect();
    let degrees: Vec<usize> = neighbors.iter().map(Vec::len).collect();
    let edge_count = degrees.iter().sum::<usize>() / 2;

    let avg_degree = if n == 0 { 0.0 } else { (2 * edge_count) as f64 / n as f64 };
    let median_degree = if n == 0 {
        0.0
    } else {
        let mut sorted = degrees.clone();
        sorted.sort_unstable();
        if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        }
    };

    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &u in &neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }

    // Linked neighbor pairs per node: sum over nodes is 3 × triangles.
    let mut closed_total = 0u64;
    let mut triples_total = 0u64;
    let mut clustering_sum = 0.0;
    for v in 0..n {
        let d = degrees[v] as u64;
        let pairs = d * d.saturating_sub(1) / 2;
        let ns = &neighbors[v];
        let mut closed = 0u64;
        for (a_pos, &a) in ns.iter().enumerate() {
            for &b in &ns[a_pos + 1..] {
                if neighbors[a].binary_search(&b).is_ok() {
                    closed += 1;
                }
            }
        }
        closed_total += closed;
        triples_total += pairs;
        if pairs > 0 {
            clustering_sum += closed as f64 / pairs as f64;
        }
    }
    let transitivity = if triples_total == 0 {
        0.0
    } else {
        closed_total as f64 / triples_total as f64
    };
    let avg_clustering_coeff = if n == 0 { 0.0 } else { clustering_sum / n as f64 };

    GraphStats {
        node_count: n,
        edge_count,
        avg_degree,
        median_degree,
        connected_components: components,
        transitivity,
        avg_clustering_coeff,
    }
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Nodes: {}", self.node_count)?;
        writeln!(f, "Edges: {}", self.edge_count)?;
        writeln!(f, "Avg. Degree: {:.4}", self.avg_degree)?;
        writeln!(f, "Median Degree: {}", self.median_degree)?;
        writeln!(f, "Conn. Components: {}", self.connected_components)?;
        writeln!(f, "Transitivity: {:.4}", self.transitivity)?;
        writeln!(f, "Avg. Cluster Coeff.: {:.4}", self.avg_clustering_coeff)
    }
}
