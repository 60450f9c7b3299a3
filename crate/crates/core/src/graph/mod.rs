//! Outfit and item relation graphs.
//!
//! The outfit relation graph (ORG) links two outfits when they share a
//! garment. The item relation graph (IRG) links two garments when some
//! outfit contains both, and every IRG node is its own neighbor.

mod partition;
mod stats;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use crate::catalog::{Catalog, GarmentId, OutfitId};

pub use partition::{partition_for_outfit, partition_org, LookupMode, PartitionLocator, PartitionSet};
pub use stats::{graph_stats, GraphStats};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown outfit {0}")]
    UnknownOutfit(OutfitId),
    #[error("garment {0} is not a node of the graph")]
    MissingNode(GarmentId),
    #[error("query is empty")]
    EmptyQuery,
    #[error("there are no partitions to search")]
    NoPartitions,
    #[error("partition size target must be at least 2, got {0}")]
    InvalidSizeTarget(usize),
    #[error("outfit {0} is assigned to more than one partition")]
    DuplicateAssignment(OutfitId),
    #[error("query garments do not form an outfit of the training catalog")]
    NotAnOutfit,
}

/// Undirected graph over outfits; no self edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutfitRelationGraph {
    nodes: Vec<OutfitId>,
    /// Sorted local neighbor indices.
    adjacency: Vec<Vec<usize>>,
}

impl OutfitRelationGraph {
    /// ORG over every outfit of the catalog.
    pub fn build(catalog: &Catalog) -> Self {
        let n = catalog.outfits().len();
        let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for g in catalog.garment_ids() {
            let owners = catalog.outfits_of(g);
            for (i, a) in owners.iter().enumerate() {
                for b in &owners[i + 1..] {
                    adjacency[a.index()].insert(b.index());
                    adjacency[b.index()].insert(a.index());
                }
            }
        }
        OutfitRelationGraph {
            nodes: catalog.outfit_ids().collect(),
            adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    /// Builds a graph from explicit nodes and edges (local indices).
    pub fn from_edges(nodes: Vec<OutfitId>, edges: &[(usize, usize)]) -> Self {
        let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
        for &(a, b) in edges {
            if a != b {
                adjacency[a].insert(b);
                adjacency[b].insert(a);
            }
        }
        OutfitRelationGraph {
            nodes,
            adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn nodes(&self) -> &[OutfitId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn neighbors(&self, local: usize) -> &[usize] {
        &self.adjacency[local]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges as ascending local index pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }
}

/// Undirected garment graph with self edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemRelationGraph {
    /// Ascending garment ids.
    nodes: Vec<GarmentId>,
    index: HashMap<GarmentId, usize>,
    /// Sorted local neighbor indices, each list containing the node itself.
    adjacency: Vec<Vec<usize>>,
}

impl ItemRelationGraph {
    fn from_sets(nodes: Vec<GarmentId>, sets: Vec<BTreeSet<usize>>) -> Self {
        let index = nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        ItemRelationGraph {
            nodes,
            index,
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    /// IRG of the whole catalog: one node per garment that appears in an
    /// outfit, a clique per outfit.
    pub fn build(catalog: &Catalog) -> Self {
        let nodes = catalog.used_garments();
        let local: HashMap<GarmentId, usize> = nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let mut sets: Vec<BTreeSet<usize>> = (0..nodes.len()).map(|i| BTreeSet::from([i])).collect();
        for outfit in catalog.outfits() {
            for &a in &outfit.members {
                for &b in &outfit.members {
                    sets[local[&a]].insert(local[&b]);
                }
            }
        }
        Self::from_sets(nodes, sets)
    }

    /// Induction of the ORG node subset `outfits`: nodes are the garments of
    /// those outfits, and two of them are linked when any outfit of the
    /// catalog contains both.
    pub fn induce(outfits: &[OutfitId], catalog: &Catalog) -> Result<Self, GraphError> {
        let mut members = BTreeSet::new();
        for &o in outfits {
            if o.index() >= catalog.outfits().len() {
                return Err(GraphError::UnknownOutfit(o));
            }
            members.extend(catalog.outfit(o).members.iter().copied());
        }
        let nodes: Vec<GarmentId> = members.into_iter().collect();
        let local: HashMap<GarmentId, usize> = nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let sets = nodes
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let mut set = BTreeSet::from([i]);
                for &o in catalog.outfits_of(g) {
                    for h in &catalog.outfit(o).members {
                        if let Some(&j) = local.get(h) {
                            set.insert(j);
                        }
                    }
                }
                set
            })
            .collect();
        Ok(Self::from_sets(nodes, sets))
    }

    /// Graph from explicit garments and undirected edges; self edges are
    /// always added.
    pub fn from_edges(nodes: Vec<GarmentId>, edges: &[(GarmentId, GarmentId)]) -> Result<Self, GraphError> {
        let mut nodes = nodes;
        nodes.sort();
        nodes.dedup();
        let local: HashMap<GarmentId, usize> = nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let mut sets: Vec<BTreeSet<usize>> = (0..nodes.len()).map(|i| BTreeSet::from([i])).collect();
        for &(a, b) in edges {
            let ia = *local.get(&a).ok_or(GraphError::MissingNode(a))?;
            let ib = *local.get(&b).ok_or(GraphError::MissingNode(b))?;
            sets[ia].insert(ib);
            sets[ib].insert(ia);
        }
        Ok(Self::from_sets(nodes, sets))
    }

    /// Drops every edge between two distinct members of `outfit`. Self edges
    /// and all other edges are kept.
    pub fn remove_outfit_edges(&self, outfit: &[GarmentId]) -> Result<Self, GraphError> {
        for &g in outfit {
            if !self.index.contains_key(&g) {
                return Err(GraphError::MissingNode(g));
            }
        }
        Ok(self.remove_edges_among(outfit))
    }

    /// Like [`remove_outfit_edges`](Self::remove_outfit_edges) but ignores
    /// garments that are not nodes of the graph.
    pub fn remove_edges_among(&self, garments: &[GarmentId]) -> Self {
        let locals: BTreeSet<usize> = garments.iter().filter_map(|g| self.index.get(g).copied()).collect();
        let mut out = self.clone();
        for &i in &locals {
            out.adjacency[i].retain(|j| *j == i || !locals.contains(j));
        }
        out
    }

    pub fn nodes(&self) -> &[GarmentId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn local_index(&self, g: GarmentId) -> Option<usize> {
        self.index.get(&g).copied()
    }

    pub fn contains(&self, g: GarmentId) -> bool {
        self.index.contains_key(&g)
    }

    /// Neighborhood of local node `i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// Neighborhood as garment ids.
    pub fn neighborhood(&self, g: GarmentId) -> Option<Vec<GarmentId>> {
        let i = self.local_index(g)?;
        Some(self.adjacency[i].iter().map(|&j| self.nodes[j]).collect())
    }

    pub fn has_edge(&self, a: GarmentId, b: GarmentId) -> bool {
        match (self.local_index(a), self.local_index(b)) {
            (Some(i), Some(j)) => self.adjacency[i].binary_search(&j).is_ok(),
            _ => false,
        }
    }

    /// Undirected edges excluding self edges.
    pub fn edge_count(&self) -> usize {
        let with_self: usize = self.adjacency.iter().map(Vec::len).sum();
        (with_self - self.nodes.len()) / 2
    }

    /// Local neighbor lists in the layout expected by attention masks.
    pub fn neighbor_lists(&self) -> Arc<Vec<Vec<usize>>> {
        Arc::new(self.adjacency.clone())
    }

    /// True when no two of `garments` are linked (a valid generation seed).
    pub fn pairwise_unlinked(&self, garments: &[GarmentId]) -> bool {
        garments.iter().enumerate().all(|(i, &a)| {
            garments[i + 1..].iter().all(|&b| a == b || !self.has_edge(a, b))
        })
    }
}

#[cfg(test)]
mod tests;
