use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::catalog::{Catalog, GarmentRecord, OutfitRecord};

fn catalog(garments: &[(&str, &str)], outfits: &[(&str, &[&str])]) -> Catalog {
    let garments: Vec<GarmentRecord> = garments
        .iter()
        .enumerate()
        .map(|(i, (k, c))| (k.to_string(), c.to_string(), vec![i as f64 + 1.0, 1.0]))
        .collect();
    let outfits: Vec<OutfitRecord> = outfits
        .iter()
        .map(|(k, ms)| (k.to_string(), ms.iter().map(|m| m.to_string()).collect()))
        .collect();
    Catalog::from_records(garments, outfits).unwrap()
}

fn random_catalog(rng: &mut ChaCha8Rng, n_outfits: usize, n_garments: usize) -> Catalog {
    let garments: Vec<GarmentRecord> = (0..n_garments)
        .map(|i| (format!("g{i}"), format!("c{}", i % 4), vec![rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]))
        .collect();
    let ids: Vec<usize> = (0..n_garments).collect();
    let outfits: Vec<OutfitRecord> = (0..n_outfits)
        .map(|o| {
            let size = rng.random_range(2..=4);
            let members = ids.choose_multiple(rng, size).map(|i| format!("g{i}")).collect();
            (format!("o{o}"), members)
        })
        .collect();
    Catalog::from_records(garments, outfits).unwrap()
}

fn g(c: &Catalog, key: &str) -> GarmentId {
    c.garment_by_key(key).unwrap()
}

#[test]
fn org_links_outfits_sharing_a_garment() {
    let c = catalog(
        &[("a", "x"), ("b", "y"), ("c", "z"), ("d", "x"), ("e", "y")],
        &[("o1", &["a", "b"]), ("o2", &["b", "c"]), ("o3", &["d", "e"])],
    );
    let org = OutfitRelationGraph::build(&c);
    assert_eq!(org.edges().collect::<Vec<_>>(), vec![(0, 1)]);
    assert_eq!(org.edge_count(), 1);
}

#[test]
fn disjoint_outfits_have_no_org_edges() {
    let c = catalog(
        &[("a", "x"), ("b", "y"), ("c", "x"), ("d", "y")],
        &[("o1", &["a", "b"]), ("o2", &["c", "d"])],
    );
    assert_eq!(OutfitRelationGraph::build(&c).edge_count(), 0);
}

#[test]
fn org_matches_pairwise_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let c = random_catalog(&mut rng, 40, 60);
        let org = OutfitRelationGraph::build(&c);
        let sets: Vec<BTreeSet<GarmentId>> =
            c.outfits().iter().map(|o| o.members.iter().copied().collect()).collect();
        let mut expected = Vec::new();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                if !sets[i].is_disjoint(&sets[j]) {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(org.edges().collect::<Vec<_>>(), expected);
    }
}

#[test]
fn single_outfit_induces_a_clique() {
    let c = catalog(&[("a", "x"), ("b", "y"), ("c", "z")], &[("o", &["a", "b", "c"])]);
    let irg = ItemRelationGraph::induce(&[OutfitId(0)], &c).unwrap();
    let a = g(&c, "a");
    assert_eq!(irg.neighborhood(a).unwrap(), vec![a, g(&c, "b"), g(&c, "c")]);
    assert_eq!(irg.edge_count(), 3);
}

#[test]
fn chained_outfits_do_not_link_ends() {
    let c = catalog(
        &[("a", "x"), ("b", "y"), ("c", "z")],
        &[("o1", &["a", "b"]), ("o2", &["b", "c"])],
    );
    let irg = ItemRelationGraph::induce(&[OutfitId(0), OutfitId(1)], &c).unwrap();
    let (a, b, cc) = (g(&c, "a"), g(&c, "b"), g(&c, "c"));
    assert!(irg.has_edge(a, b) && irg.has_edge(b, cc));
    assert!(!irg.has_edge(a, cc));
    for x in [a, b, cc] {
        assert!(irg.has_edge(x, x));
    }
}

#[test]
fn induce_rejects_unknown_outfit() {
    let c = catalog(&[("a", "x"), ("b", "y")], &[("o", &["a", "b"])]);
    assert!(matches!(
        ItemRelationGraph::induce(&[OutfitId(3)], &c),
        Err(GraphError::UnknownOutfit(_))
    ));
}

/// Definition-level oracle: garments are linked iff some outfit of the
/// catalog holds both, found by scanning every outfit.
fn brute_irg_edges(c: &Catalog, nodes: &[GarmentId]) -> BTreeSet<(GarmentId, GarmentId)> {
    let mut edges = BTreeSet::new();
    for &x in nodes {
        for &y in nodes {
            if c.outfits().iter().any(|o| o.members.contains(&x) && o.members.contains(&y)) || x == y {
                edges.insert((x, y));
            }
        }
    }
    edges
}

fn irg_edges(irg: &ItemRelationGraph) -> BTreeSet<(GarmentId, GarmentId)> {
    let mut edges = BTreeSet::new();
    for (i, &x) in irg.nodes().iter().enumerate() {
        for &j in irg.neighbors(i) {
            edges.insert((x, irg.nodes()[j]));
        }
    }
    edges
}

#[test]
fn induced_irg_matches_brute_force_and_full_build() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let c = random_catalog(&mut rng, 30, 50);
        let all: Vec<OutfitId> = c.outfit_ids().collect();
        let induced = ItemRelationGraph::induce(&all, &c).unwrap();
        assert_eq!(induced, ItemRelationGraph::build(&c));
        assert_eq!(irg_edges(&induced), brute_irg_edges(&c, &c.used_garments()));

        let subset: Vec<OutfitId> = all.choose_multiple(&mut rng, 10).copied().collect();
        let sub = ItemRelationGraph::induce(&subset, &c).unwrap();
        let nodes: BTreeSet<GarmentId> =
            subset.iter().flat_map(|&o| c.outfit(o).members.iter().copied()).collect();
        assert_eq!(sub.nodes(), nodes.iter().copied().collect::<Vec<_>>().as_slice());
        assert_eq!(irg_edges(&sub), brute_irg_edges(&c, sub.nodes()));
    }
}

#[test]
fn removing_a_clique_leaves_self_edges() {
    let c = catalog(&[("a", "x"), ("b", "y"), ("c", "z")], &[("o", &["a", "b", "c"])]);
    let irg = ItemRelationGraph::build(&c);
    let stripped = irg.remove_outfit_edges(&c.outfit(OutfitId(0)).members).unwrap();
    assert_eq!(stripped.edge_count(), 0);
    for i in 0..3 {
        assert_eq!(stripped.neighbors(i), &[i]);
    }
}

#[test]
fn removing_an_unlinked_outfit_is_a_noop() {
    let c = catalog(
        &[("a", "x"), ("b", "y"), ("c", "x"), ("d", "y")],
        &[("o1", &["a", "b"]), ("o2", &["c", "d"])],
    );
    let irg = ItemRelationGraph::build(&c);
    let out = irg.remove_outfit_edges(&[g(&c, "a"), g(&c, "c")]).unwrap();
    assert_eq!(out, irg);
}

#[test]
fn removal_ignores_edge_provenance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let c = random_catalog(&mut rng, 25, 20);
        let irg = ItemRelationGraph::build(&c);
        let target = &c.outfit(OutfitId(0)).members;
        let out = irg.remove_outfit_edges(target).unwrap();
        let expected: BTreeSet<_> = irg_edges(&irg)
            .into_iter()
            .filter(|(x, y)| x == y || !(target.contains(x) && target.contains(y)))
            .collect();
        assert_eq!(irg_edges(&out), expected);
        assert!(irg_edges(&out).is_subset(&irg_edges(&irg)));
    }
}

#[test]
fn removal_requires_members_in_graph() {
    let c = catalog(
        &[("a", "x"), ("b", "y"), ("c", "x"), ("d", "y")],
        &[("o1", &["a", "b"]), ("o2", &["c", "d"])],
    );
    let irg = ItemRelationGraph::induce(&[OutfitId(0)], &c).unwrap();
    assert!(matches!(
        irg.remove_outfit_edges(&[g(&c, "a"), g(&c, "c")]),
        Err(GraphError::MissingNode(_))
    ));
    assert_eq!(irg.remove_edges_among(&[g(&c, "a"), g(&c, "c")]), irg);
}

fn explicit(n: usize, edges: &[(usize, usize)]) -> ItemRelationGraph {
    let nodes: Vec<GarmentId> = (0..n as u32).map(GarmentId).collect();
    let edges: Vec<_> = edges.iter().map(|&(a, b)| (GarmentId(a as u32), GarmentId(b as u32))).collect();
    ItemRelationGraph::from_edges(nodes, &edges).unwrap()
}

#[test]
fn triangle_stats() {
    let s = graph_stats(&explicit(3, &[(0, 1), (1, 2), (0, 2)]));
    assert_eq!(s.transitivity, 1.0);
    assert_eq!(s.avg_clustering_coeff, 1.0);
    assert_eq!(s.connected_components, 1);
    assert_eq!(s.avg_degree, 2.0);
}

#[test]
fn path_stats() {
    let s = graph_stats(&explicit(3, &[(0, 1), (1, 2)]));
    assert_eq!(s.transitivity, 0.0);
    assert_eq!(s.connected_components, 1);
    assert!((s.avg_degree - 4.0 / 3.0).abs() < 1e-15);
    assert_eq!(s.median_degree, 1.0);
}

#[test]
fn single_outfit_degree_excludes_self() {
    let c = catalog(&[("a", "x"), ("b", "y"), ("c", "z"), ("d", "w")], &[("o", &["a", "b", "c", "d"])]);
    let s = graph_stats(&ItemRelationGraph::build(&c));
    assert_eq!(s.avg_degree, 3.0);
    assert_eq!(s.edge_count, 6);
}

#[test]
fn empty_graph_stats_are_zero() {
    let s = graph_stats(&explicit(0, &[]));
    assert_eq!((s.node_count, s.edge_count, s.connected_components), (0, 0, 0));
    assert_eq!(s.transitivity, 0.0);
}

#[test]
fn stats_report_uses_table_row_names() {
    let text = graph_stats(&explicit(3, &[(0, 1), (1, 2), (0, 2)])).to_string();
    for name in [
        "Nodes:",
        "Edges:",
        "Avg. Degree:",
        "Median Degree:",
        "Conn. Components:",
        "Transitivity:",
        "Avg. Cluster Coeff.:",
    ] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }
}

#[test]
fn erdos_renyi_stats_match_triple_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let n = 40;
        let mut adj = vec![vec![false; n]; n];
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.15 {
                    adj[i][j] = true;
                    adj[j][i] = true;
                    edges.push((i, j));
                }
            }
        }
        let s = graph_stats(&explicit(n, &edges));
        let mut triangles = 0;
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    if adj[i][j] && adj[j][k] && adj[i][k] {
                        triangles += 1;
                    }
                }
            }
        }
        let deg: Vec<usize> = adj.iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
        let triples: usize = deg.iter().map(|d| d * d.saturating_sub(1) / 2).sum();
        let trans = if triples == 0 { 0.0 } else { 3.0 * triangles as f64 / triples as f64 };
        assert!((s.transitivity - trans).abs() < 1e-12);
        assert_eq!(s.edge_count, edges.len());
    }
}

fn isolated_org(n: usize) -> OutfitRelationGraph {
    OutfitRelationGraph::from_edges((0..n as u32).map(OutfitId).collect(), &[])
}

fn check_partition_contract(org: &OutfitRelationGraph, set: &PartitionSet, phi: usize) {
    let mut seen = BTreeSet::new();
    for (p, members) in set.partitions().iter().enumerate() {
        for &o in members {
            assert!(seen.insert(o), "outfit {o} in two partitions");
            assert_eq!(set.assignment(o), Some(p));
        }
    }
    assert_eq!(seen.len(), org.len());
    let (lo, hi) = PartitionSet::size_bounds(phi);
    let out_of_bounds = set.partitions().iter().filter(|p| p.len() < lo || p.len() > hi).count();
    assert!(out_of_bounds <= usize::from(set.len() == 1), "sizes {:?}", set.partitions().iter().map(Vec::len).collect::<Vec<_>>());
}

#[test]
fn isolated_outfits_split_evenly() {
    let org = isolated_org(100);
    let set = partition_org(&org, 50, 0).unwrap();
    assert_eq!(set.len(), 2);
    assert!(set.partitions().iter().all(|p| p.len() == 50));
    assert_eq!(set.edge_cut(), 0);
}

#[test]
fn small_clique_is_one_partition() {
    let edges: Vec<_> = (0..10).flat_map(|i| (i + 1..10).map(move |j| (i, j))).collect();
    let org = OutfitRelationGraph::from_edges((0..10).map(OutfitId).collect(), &edges);
    let set = partition_org(&org, 50, 0).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.edge_cut(), 0);
}

#[test]
fn size_target_must_be_at_least_two() {
    assert!(matches!(partition_org(&isolated_org(4), 1, 0), Err(GraphError::InvalidSizeTarget(1))));
}

/// Sparse random graph with planted communities, so a good partitioner has
/// something to find.
fn random_org(rng: &mut ChaCha8Rng, n: usize) -> OutfitRelationGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if i * 8 / n == j * 8 / n { 0.08 } else { 0.01 };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    OutfitRelationGraph::from_edges((0..n as u32).map(OutfitId).collect(), &edges)
}

fn random_assignment_cut(org: &OutfitRelationGraph, k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut part: Vec<usize> = (0..org.len()).map(|i| i % k).collect();
    part.shuffle(rng);
    org.edges().filter(|&(a, b)| part[a] != part[b]).count()
}

#[test]
fn partitioner_beats_random_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..5 {
        let org = random_org(&mut rng, 200);
        let set = partition_org(&org, 50, trial).unwrap();
        assert_eq!(set.len(), 4);
        check_partition_contract(&org, &set, 50);
        let recount = org
            .edges()
            .filter(|&(a, b)| set.assignment(org.nodes()[a]) != set.assignment(org.nodes()[b]))
            .count();
        assert_eq!(set.edge_cut(), recount);
        let baseline = (0..20).map(|_| random_assignment_cut(&org, 4, &mut rng)).min().unwrap();
        assert!(set.edge_cut() <= baseline, "cut {} vs best random {baseline}", set.edge_cut());
    }
}

#[test]
fn partitioner_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let org = random_org(&mut rng, 300);
    assert_eq!(partition_org(&org, 40, 9).unwrap(), partition_org(&org, 40, 9).unwrap());
}

#[test]
fn awkward_sizes_respect_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (n, phi) in [(74, 50), (75, 50), (130, 20), (11, 4), (7, 2), (333, 17)] {
        let org = random_org(&mut rng, n);
        let set = partition_org(&org, phi, 1).unwrap();
        check_partition_contract(&org, &set, phi);
    }
}

#[test]
fn partition_text_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = random_catalog(&mut rng, 40, 60);
    let org = OutfitRelationGraph::build(&c);
    let set = partition_org(&org, 10, 3).unwrap();
    assert_eq!(PartitionSet::from_text(&set.to_text(&c), &c).unwrap(), set);
}

fn two_partition_fixture() -> (Catalog, PartitionSet) {
    let c = Catalog::from_records(
        vec![
            ("a".into(), "x".into(), vec![1.0, 0.0]),
            ("b".into(), "y".into(), vec![0.9, 0.1]),
            ("c".into(), "x".into(), vec![0.0, 1.0]),
            ("d".into(), "y".into(), vec![0.1, 0.9]),
            ("e".into(), "z".into(), vec![-1.0, 0.0]),
            ("f".into(), "z".into(), vec![0.0, -1.0]),
        ],
        vec![
            ("o0".into(), vec!["a".into(), "b".into()]),
            ("o1".into(), vec!["c".into(), "d".into()]),
            ("o2".into(), vec!["e".into(), "a".into()]),
        ],
    )
    .unwrap();
    let set = PartitionSet::from_partitions(vec![vec![OutfitId(0)], vec![OutfitId(1)], vec![OutfitId(2)]], 2, None)
        .unwrap();
    (c, set)
}

#[test]
fn train_lookup_is_assignment() {
    let (c, set) = two_partition_fixture();
    let q = &c.outfit(OutfitId(2)).members;
    assert_eq!(partition_for_outfit(q, &set, &c, LookupMode::Train).unwrap(), 2);
    assert!(matches!(
        partition_for_outfit(&[g(&c, "a"), g(&c, "c")], &set, &c, LookupMode::Train),
        Err(GraphError::NotAnOutfit)
    ));
}

#[test]
fn test_lookup_votes_by_nearest_garment() {
    let (c, set) = two_partition_fixture();
    let locator = PartitionLocator::new(&set, &c);
    // c and d live only in partition 1.
    assert_eq!(locator.locate(&[&[0.05, 1.0], &[0.2, 0.8]]).unwrap(), 1);
    // a sits in partitions 0 and 2, so each vote lands in both: tie → 0.
    assert_eq!(locator.votes(&[&[1.0, 0.01]]), vec![1, 0, 1]);
    assert_eq!(locator.locate(&[&[1.0, 0.01]]).unwrap(), 0);
    // f is in no outfit; a and e tie at zero similarity and the smaller id wins.
    assert_eq!(locator.nearest(&[0.0, -1.0]), Some(g(&c, "a")));
    assert!(matches!(locator.locate(&[]), Err(GraphError::EmptyQuery)));
}

#[test]
fn test_lookup_tie_break_matches_vote_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let c = random_catalog(&mut rng, 30, 40);
        let org = OutfitRelationGraph::build(&c);
        let set = partition_org(&org, 6, rng.random()).unwrap();
        let locator = PartitionLocator::new(&set, &c);
        let query: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let refs: Vec<&[f64]> = query.iter().map(Vec::as_slice).collect();

        let mut votes = vec![0; set.len()];
        for q in &query {
            let qn = (q[0] * q[0] + q[1] * q[1]).sqrt();
            let nearest = c
                .used_garments()
                .into_iter()
                .map(|h| {
                    let e = c.embedding(h);
                    let en = (e[0] * e[0] + e[1] * e[1]).sqrt();
                    (h, (q[0] * e[0] + q[1] * e[1]) / (qn * en))
                })
                .fold(None::<(GarmentId, f64)>, |best, (h, s)| match best {
                    Some((_, bs)) if bs >= s => best,
                    _ => Some((h, s)),
                })
                .unwrap()
                .0;
            for (p, members) in set.partitions().iter().enumerate() {
                if members.iter().any(|&o| c.outfit(o).members.contains(&nearest)) {
                    votes[p] += 1;
                }
            }
        }
        let max = *votes.iter().max().unwrap();
        let expected = votes.iter().position(|&v| v == max).unwrap();
        assert_eq!(locator.votes(&refs), votes);
        assert_eq!(locator.locate(&refs).unwrap(), expected);
    }
}

#[test]
fn lookup_without_partitions_fails() {
    let (c, _) = two_partition_fixture();
    let empty = PartitionSet::from_partitions(Vec::new(), 2, None).unwrap();
    assert!(matches!(
        partition_for_outfit(&[g(&c, "a")], &empty, &c, LookupMode::Test),
        Err(GraphError::NoPartitions)
    ));
}
