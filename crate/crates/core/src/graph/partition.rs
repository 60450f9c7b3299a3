use std::collections::{BTreeSet, BinaryHeap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphError, OutfitRelationGraph};
use crate::catalog::{Catalog, GarmentId, OutfitId};

/// Disjoint cover of the ORG nodes by roughly φ-sized chunks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionSet {
    partitions: Vec<Vec<OutfitId>>,
    assignment: HashMap<OutfitId, usize>,
    size_target: usize,
    edge_cut: usize,
}

impl PartitionSet {
    /// Builds a set from explicit partitions. Fails if an outfit appears
    /// twice.
    pub fn from_partitions(
        partitions: Vec<Vec<OutfitId>>,
        size_target: usize,
        org: Option<&OutfitRelationGraph>,
    ) -> Result<Self, GraphError> {
        let mut assignment = HashMap::new();
        for (p, members) in partitions.iter().enumerate() {
            for &o in members {
                if assignment.insert(o, p).is_some() {
                    return Err(GraphError::DuplicateAssignment(o));
                }
            }
        }
        let edge_cut = org.map_or(0, |g| {
            g.edges()
                .filter(|&(a, b)| assignment.get(&g.nodes()[a]) != assignment.get(&g.nodes()[b]))
                .count()
        });
        Ok(PartitionSet {
            partitions,
            assignment,
            size_target,
            edge_cut,
        })
    }

    pub fn partitions(&self) -> &[Vec<OutfitId>] {
        &self.partitions
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn partition(&self, p: usize) -> &[OutfitId] {
        &self.partitions[p]
    }

    pub fn assignment(&self, o: OutfitId) -> Option<usize> {
        self.assignment.get(&o).copied()
    }

    pub fn size_target(&self) -> usize {
        self.size_target
    }

    /// Number of ORG edges whose endpoints lie in different partitions.
    pub fn edge_cut(&self) -> usize {
        self.edge_cut
    }

    /// Allowed partition size range `[⌈φ/2⌉, ⌈3φ/2⌉]`.
    pub fn size_bounds(size_target: usize) -> (usize, usize) {
        (size_target.div_ceil(2), (3 * size_target).div_ceil(2))
    }

    /// Text form: one partition per line, outfit keys separated by commas.
    pub fn to_text(&self, catalog: &Catalog) -> String {
        let mut out = format!("# size_target={} edge_cut={}\n", self.size_target, self.edge_cut);
        for members in &self.partitions {
            let keys: Vec<&str> = members.iter().map(|&o| catalog.outfit(o).key.as_str()).collect();
            out.push_str(&keys.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output against `catalog`.
    pub fn from_text(text: &str, catalog: &Catalog) -> Result<Self, GraphError> {
        let mut size_target = 0;
        let mut partitions = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    if let Some(v) = field.strip_prefix("size_target=") {
                        size_target = v.parse().map_err(|_| GraphError::InvalidSizeTarget(0))?;
                    }
                }
                continue;
            }
            let mut members = Vec::new();
            for key in line.split(',') {
                let o = catalog
                    .outfit_by_key(key.trim())
                    .map_err(|_| GraphError::NotAnOutfit)?;
                members.push(o);
            }
            partitions.push(members);
        }
        let org = OutfitRelationGraph::build(catalog);
        Self::from_partitions(partitions, size_target, Some(&org))
    }
}

/// Weighted graph used during coarsening.
struct Weighted {
    vwgt: Vec<usize>,
    adj: Vec<Vec<(usize, usize)>>,
}

impl Weighted {
    fn len(&self) -> usize {
        self.vwgt.len()
    }

    /// Heavy-edge matching; returns the coarse graph and fine→coarse map.
    fn coarsen(&self, cap: usize, rng: &mut ChaCha8Rng) -> (Weighted, Vec<usize>) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut mate = vec![usize::MAX; n];
        for &v in &order {
            if mate[v] != usize::MAX {
                continue;
            }
            let best = self.adj[v]
                .iter()
                .filter(|&&(u, _)| mate[u] == usize::MAX && u != v && self.vwgt[u] + self.vwgt[v] <= cap)
                .max_by_key(|&&(u, w)| (w, std::cmp::Reverse(u)));
            match best {
                Some(&(u, _)) => {
                    mate[v] = u;
                    mate[u] = v;
                }
                None => mate[v] = v,
            }
        }
        let mut cmap = vec![usize::MAX; n];
        let mut vwgt = Vec::new();
        for v in 0..n {
            if cmap[v] == usize::MAX {
                cmap[v] = vwgt.len();
                cmap[mate[v]] = vwgt.len();
                vwgt.push(self.vwgt[v] + if mate[v] != v { self.vwgt[mate[v]] } else { 0 });
            }
        }
        let mut maps: Vec<HashMap<usize, usize>> = vec![HashMap::new(); vwgt.len()];
        for v in 0..n {
            for &(u, w) in &self.adj[v] {
                let (cv, cu) = (cmap[v], cmap[u]);
                if cv != cu {
                    *maps[cv].entry(cu).or_insert(0) += w;
                }
            }
        }
        let adj = maps
            .into_iter()
            .map(|m| {
                let mut list: Vec<(usize, usize)> = m.into_iter().collect();
                list.sort_unstable();
                list
            })
            .collect();
        (Weighted { vwgt, adj }, cmap)
    }

    fn cut(&self, part: &[usize]) -> usize {
        let mut cut = 0;
        for v in 0..self.len() {
            for &(u, w) in &self.adj[v] {
                if u > v && part[u] != part[v] {
                    cut += w;
                }
            }
        }
        cut
    }

    fn part_weights(&self, part: &[usize], k: usize) -> Vec<usize> {
        let mut weights = vec![0; k];
        for v in 0..self.len() {
            weights[part[v]] += self.vwgt[v];
        }
        weights
    }

    /// Connection weight from `v` to each neighboring part.
    fn connections(&self, v: usize, part: &[usize]) -> Vec<(usize, usize)> {
        let mut conn: Vec<(usize, usize)> = Vec::new();
        for &(u, w) in &self.adj[v] {
            match conn.iter_mut().find(|(p, _)| *p == part[u]) {
                Some(entry) => entry.1 += w,
                None => conn.push((part[u], w)),
            }
        }
        conn
    }

    /// Greedy region growing: each part absorbs the frontier vertex most
    /// strongly connected to it until it reaches its target weight.
    fn grow(&self, targets: &[usize], hi: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.len();
        let k = targets.len();
        let mut part = vec![usize::MAX; n];
        let mut unassigned: BTreeSet<usize> = (0..n).collect();
        let tiebreak: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        for (p, &target) in targets.iter().enumerate().take(k - 1) {
            let mut weight = 0;
            let mut conn = vec![0usize; n];
            let mut heap: BinaryHeap<(usize, u64, usize)> = BinaryHeap::new();
            let mut skipped = Vec::new();
            while weight < target && !unassigned.is_empty() {
                let v = loop {
                    match heap.pop() {
                        Some((c, _, v)) if part[v] == usize::MAX && c == conn[v] => break Some(v),
                        Some(_) => continue,
                        None => break None,
                    }
                };
                let v = match v {
                    Some(v) => v,
                    None => {
                        // Disconnected remainder: restart from a random free vertex.
                        let free: Vec<usize> = unassigned.iter().copied().filter(|v| !skipped.contains(v)).collect();
                        match free.choose(rng) {
                            Some(&v) => v,
                            None => break,
                        }
                    }
                };
                if weight > 0 && weight + self.vwgt[v] > hi {
                    skipped.push(v);
                    continue;
                }
                part[v] = p;
                unassigned.remove(&v);
                weight += self.vwgt[v];
                for &(u, w) in &self.adj[v] {
                    if part[u] == usize::MAX {
                        conn[u] += w;
                        heap.push((conn[u], tiebreak[u], u));
                    }
                }
            }
        }
        for v in unassigned {
            part[v] = k - 1;
        }
        part
    }

    /// Greedy boundary refinement: move vertices to the neighboring part
    /// with the largest positive cut gain while staying inside `[lo, hi]`.
    fn refine(&self, part: &mut [usize], k: usize, lo: usize, hi: usize, rng: &mut ChaCha8Rng) {
        let mut weights = self.part_weights(part, k);
        let mut order: Vec<usize> = (0..self.len()).collect();
        for _ in 0..10 {
            order.shuffle(rng);
            let mut moved = false;
            for &v in &order {
                let p = part[v];
                let w = self.vwgt[v];
                if weights[p] < lo + w {
                    continue;
                }
                let conn = self.connections(v, part);
                let internal = conn.iter().find(|(q, _)| *q == p).map_or(0, |e| e.1);
                let best = conn
                    .iter()
                    .filter(|&&(q, c)| q != p && c > internal && weights[q] + w <= hi)
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
                if let Some(&(q, _)) = best {
                    part[v] = q;
                    weights[p] -= w;
                    weights[q] += w;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    }

    /// Moves unit-weight vertices until every part is inside `[lo, hi]`.
    fn balance(&self, part: &mut [usize], k: usize, lo: usize, hi: usize) {
        let mut weights = self.part_weights(part, k);
        let gain = |v: usize, to: usize, part: &[usize]| -> i64 {
            let mut g = 0i64;
            for &(u, w) in &self.adj[v] {
                if part[u] == to {
                    g += w as i64;
                } else if part[u] == part[v] {
                    g -= w as i64;
                }
            }
            g
        };
        loop {
            if let Some(p) = (0..k).find(|&p| weights[p] < lo) {
                let donor = (0..self.len())
                    .filter(|&v| part[v] != p && weights[part[v]] > lo)
                    .max_by(|&a, &b| {
                        gain(a, p, part)
                            .cmp(&gain(b, p, part))
                            .then(weights[part[a]].cmp(&weights[part[b]]))
                            .then(b.cmp(&a))
                    });
                let Some(v) = donor else { break };
                weights[part[v]] -= 1;
                weights[p] += 1;
                part[v] = p;
            } else if let Some(p) = (0..k).find(|&p| weights[p] > hi) {
                let best = (0..self.len())
                    .filter(|&v| part[v] == p)
                    .flat_map(|v| (0..k).filter(|&q| q != p && weights[q] < hi).map(move |q| (v, q)))
                    .max_by(|&(a, qa), &(b, qb)| {
                        gain(a, qa, part)
                            .cmp(&gain(b, qb, part))
                            .then(weights[qb].cmp(&weights[qa]))
                            .then((b, qb).cmp(&(a, qa)))
                    });
                let Some((v, q)) = best else { break };
                weights[p] -= 1;
                weights[q] += 1;
                part[v] = q;
            } else {
                break;
            }
        }
    }
}

/// Splits the ORG into `max(1, round(n/φ))` connected-ish chunks of about
/// φ outfits with a multilevel greedy partitioner. Deterministic in `seed`.
pub fn partition_org(org: &OutfitRelationGraph, phi: usize, seed: u64) -> Result<PartitionSet, GraphError> {
    if phi < 2 {
        return Err(GraphError::InvalidSizeTarget(phi));
    }
    let n = org.len();
    if n == 0 {
        return PartitionSet::from_partitions(Vec::new(), phi, Some(org));
    }
    if phi > n {
        log::warn!("partition size {phi} exceeds the {n} ORG nodes; using a single partition");
    }
    let k = ((n + phi / 2) / phi).max(1);
    if k == 1 {
        return PartitionSet::from_partitions(vec![org.nodes().to_vec()], phi, Some(org));
    }
    let (lo, hi) = PartitionSet::size_bounds(phi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let finest = Weighted {
        vwgt: vec![1; n],
        adj: (0..n).map(|v| org.neighbors(v).iter().map(|&u| (u, 1)).collect()).collect(),
    };
    let cap = (phi / 4).max(1);
    let mut levels = vec![finest];
    let mut maps: Vec<Vec<usize>> = Vec::new();
    loop {
        let current = levels.last().expect("at least one level");
        if current.len() <= (8 * k).max(32) {
            break;
        }
        let (coarse, cmap) = current.coarsen(cap, &mut rng);
        if coarse.len() * 10 > current.len() * 9 {
            break;
        }
        levels.push(coarse);
        maps.push(cmap);
    }

    let targets: Vec<usize> = (0..k).map(|p| n / k + usize::from(p < n % k)).collect();
    let coarsest = levels.last().expect("at least one level");
    let mut part = (0..4)
        .map(|_| {
            let mut candidate = coarsest.grow(&targets, hi, &mut rng);
            coarsest.refine(&mut candidate, k, lo, hi, &mut rng);
            candidate
        })
        .min_by_key(|candidate| {
            let weights = coarsest.part_weights(candidate, k);
            let imbalance: usize = weights.iter().map(|&w| lo.saturating_sub(w) + w.saturating_sub(hi)).sum();
            (imbalance, coarsest.cut(candidate))
        })
        .expect("four attempts");

    for level in (0..maps.len()).rev() {
        let cmap = &maps[level];
        part = cmap.iter().map(|&c| part[c]).collect();
        levels[level].refine(&mut part, k, lo, hi, &mut rng);
    }
    levels[0].balance(&mut part, k, lo, hi);
    levels[0].refine(&mut part, k, lo, hi, &mut rng);

    let mut partitions = vec![Vec::new(); k];
    for (v, &p) in part.iter().enumerate() {
        partitions[p].push(org.nodes()[v]);
    }
    partitions.retain(|p| !p.is_empty());
    let set = PartitionSet::from_partitions(partitions, phi, Some(org))?;
    log::info!("partitioned {n} outfits into {} chunks, edge cut {}", set.len(), set.edge_cut());
    Ok(set)
}

/// How [`PartitionLocator::partition_for_outfit`] resolves a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookupMode {
    /// The query is a training outfit; use its assignment.
    Train,
    /// Vote by nearest training garments.
    Test,
}

/// Nearest-garment index over the garments of a partitioned catalog.
#[derive(Clone, Debug, Default)]
pub struct PartitionLocator {
    garments: Vec<GarmentId>,
    /// Unit-norm embeddings, row per garment.
    unit: Vec<f64>,
    dim: usize,
    /// Partitions holding an outfit of each garment, ascending.
    partitions_of: Vec<Vec<usize>>,
    partition_count: usize,
}

fn unit_vector(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; x.len()]
    }
}

impl PartitionLocator {
    /// `catalog` must be the catalog the partitions were built from.
    pub fn new(partitions: &PartitionSet, catalog: &Catalog) -> Self {
        let mut owners: HashMap<GarmentId, BTreeSet<usize>> = HashMap::new();
        for (p, members) in partitions.partitions().iter().enumerate() {
            for &o in members {
                for &g in &catalog.outfit(o).members {
                    owners.entry(g).or_default().insert(p);
                }
            }
        }
        let mut garments: Vec<GarmentId> = owners.keys().copied().collect();
        garments.sort();
        let dim = catalog.dim();
        let mut unit = Vec::with_capacity(garments.len() * dim);
        for &g in &garments {
            unit.extend(unit_vector(catalog.embedding(g)));
        }
        let partitions_of = garments.iter().map(|g| owners[g].iter().copied().collect()).collect();
        PartitionLocator {
            garments,
            unit,
            dim,
            partitions_of,
            partition_count: partitions.len(),
        }
    }

    /// Training garment with the highest cosine similarity to `embedding`;
    /// ties go to the smallest garment id.
    pub fn nearest(&self, embedding: &[f64]) -> Option<GarmentId> {
        self.nearest_index(embedding).map(|i| self.garments[i])
    }

    fn nearest_index(&self, embedding: &[f64]) -> Option<usize> {
        let q = unit_vector(embedding);
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.unit.chunks_exact(self.dim.max(1)).enumerate().take(self.garments.len()) {
            let sim: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((i, sim));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Vote count per partition for a query given by its embeddings.
    pub fn votes(&self, embeddings: &[&[f64]]) -> Vec<usize> {
        let mut votes = vec![0; self.partition_count];
        for e in embeddings {
            if let Some(i) = self.nearest_index(e) {
                for &p in &self.partitions_of[i] {
                    votes[p] += 1;
                }
            }
        }
        votes
    }

    /// Partition with the most votes; ties go to the smallest index.
    pub fn locate(&self, embeddings: &[&[f64]]) -> Result<usize, GraphError> {
        if embeddings.is_empty() {
            return Err(GraphError::EmptyQuery);
        }
        if self.partition_count == 0 {
            return Err(GraphError::NoPartitions);
        }
        let votes = self.votes(embeddings);
        let mut best = 0;
        for (p, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = p;
            }
        }
        Ok(best)
    }

    /// Resolves the partition for `query`. In test mode the embeddings are
    /// taken from `catalog`, which must share garment ids with the
    /// partitioned catalog.
    pub fn partition_for_outfit(
        &self,
        query: &[GarmentId],
        partitions: &PartitionSet,
        catalog: &Catalog,
        mode: LookupMode,
    ) -> Result<usize, GraphError> {
        if query.is_empty() {
            return Err(GraphError::EmptyQuery);
        }
        if partitions.is_empty() {
            return Err(GraphError::NoPartitions);
        }
        match mode {
            LookupMode::Train => {
                let wanted: BTreeSet<GarmentId> = query.iter().copied().collect();
                catalog
                    .outfits_of(query[0])
                    .iter()
                    .find(|&&o| catalog.outfit(o).members.iter().copied().collect::<BTreeSet<_>>() == wanted)
                    .and_then(|&o| partitions.assignment(o))
                    .ok_or(GraphError::NotAnOutfit)
            }
            LookupMode::Test => {
                let embeddings: Vec<&[f64]> = query.iter().map(|&g| catalog.embedding(g)).collect();
                self.locate(&embeddings)
            }
        }
    }
}

/// One-shot lookup; builds a [`PartitionLocator`] for test mode. Prefer a
/// reused locator when resolving many queries.
pub fn partition_for_outfit(
    query: &[GarmentId],
    partitions: &PartitionSet,
    catalog: &Catalog,
    mode: LookupMode,
) -> Result<usize, GraphError> {
    let locator = match mode {
        LookupMode::Test => PartitionLocator::new(partitions, catalog),
        LookupMode::Train => PartitionLocator::default(),
    };
    locator.partition_for_outfit(query, partitions, catalog, mode)
}
