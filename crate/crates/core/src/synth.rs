//! Synthetic catalogs with a planted style structure.
//!
//! Every garment belongs to one style and one category. Its embedding is
//! `style anchor + category anchor + N(0, σ²)` with mutually orthogonal
//! unit anchors. Outfits are single-style with pairwise distinct
//! categories, so compatibility has an exact oracle.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::catalog::{Catalog, CatalogError, GarmentId, GarmentRecord, OutfitId, OutfitRecord};
use crate::config::{self, ConfigError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("garment {0} is unknown to the oracle")]
    UnknownGarment(String),
    #[error("oracle file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_styles: usize,
    pub num_categories: usize,
    pub garments_per_cell: usize,
    pub outfit_count: usize,
    pub min_outfit_size: usize,
    pub max_outfit_size: usize,
    pub embedding_dim: usize,
    pub noise_sigma: f64,
    /// Chance that an outfit slot reuses a garment that already appeared
    /// in an earlier outfit of the same style and category.
    pub sharing_probability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_styles: 4,
            num_categories: 8,
            garments_per_cell: 62,
            outfit_count: 600,
            min_outfit_size: 3,
            max_outfit_size: 8,
            embedding_dim: 128,
            noise_sigma: 0.1,
            sharing_probability: 0.5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.num_styles < 2 || self.num_categories < 2 {
            return bad("need at least 2 styles and 2 categories".into());
        }
        if self.garments_per_cell == 0 {
            return bad("garments_per_cell must be positive".into());
        }
        if self.min_outfit_size < 2 || self.min_outfit_size > self.max_outfit_size {
            return bad(format!(
                "outfit size range {}..={} is empty or below 2",
                self.min_outfit_size, self.max_outfit_size
            ));
        }
        if self.max_outfit_size > self.num_categories {
            return bad(format!(
                "outfit size {} exceeds the {} categories",
                self.max_outfit_size, self.num_categories
            ));
        }
        if self.num_styles + self.num_categories > self.embedding_dim {
            return bad("embedding_dim too small for orthogonal anchors".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} is negative", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.sharing_probability) {
            return bad(format!("sharing probability {} outside [0, 1]", self.sharing_probability));
        }
        Ok(())
    }
}

impl SynthConfig {
    /// Applies one `key = value` entry. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "num_styles" => self.num_styles = config::parse_value(key, value)?,
            "num_categories" => self.num_categories = config::parse_value(key, value)?,
            "garments_per_cell" => self.garments_per_cell = config::parse_value(key, value)?,
            "outfit_count" => self.outfit_count = config::parse_value(key, value)?,
            "min_outfit_size" => self.min_outfit_size = config::parse_value(key, value)?,
            "max_outfit_size" => self.max_outfit_size = config::parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = config::parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = config::parse_value(key, value)?,
            "sharing_probability" => self.sharing_probability = config::parse_value(key, value)?,
            "seed" => self.seed = config::parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        config::render([
            ("num_styles", config::show(self.num_styles)),
            ("num_categories", config::show(self.num_categories)),
            ("garments_per_cell", config::show(self.garments_per_cell)),
            ("outfit_count", config::show(self.outfit_count)),
            ("min_outfit_size", config::show(self.min_outfit_size)),
            ("max_outfit_size", config::show(self.max_outfit_size)),
            ("embedding_dim", config::show(self.embedding_dim)),
            ("noise_sigma", config::show(self.noise_sigma)),
            ("sharing_probability", config::show(self.sharing_probability)),
            ("seed", config::show(self.seed)),
        ])
    }
}

/// Ground-truth `(style, category)` labels by garment key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthOracle {
    labels: HashMap<String, (usize, usize)>,
}

impl SynthOracle {
    pub fn label(&self, key: &str) -> Option<(usize, usize)> {
        self.labels.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels of catalog garments by id.
    pub fn labels_for(&self, catalog: &Catalog) -> Result<Vec<(usize, usize)>, SynthError> {
        catalog
            .garments()
            .iter()
            .map(|g| self.label(&g.key).ok_or_else(|| SynthError::UnknownGarment(g.key.clone())))
            .collect()
    }

    /// True iff all garments share one style and their categories are
    /// pairwise distinct.
    pub fn compatible<'a>(&self, keys: impl IntoIterator<Item = &'a str>) -> Result<bool, SynthError> {
        let mut style = None;
        let mut categories = BTreeSet::new();
        let mut ok = true;
        for key in keys {
            let (s, c) = self.label(key).ok_or_else(|| SynthError::UnknownGarment(key.to_string()))?;
            if *style.get_or_insert(s) != s || !categories.insert(c) {
                ok = false;
            }
        }
        Ok(ok)
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        let mut keys: Vec<&String> = self.labels.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let (s, c) = self.labels[k];
            out.push_str(&format!("{k}\t{s}\t{c}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path)?;
        let mut labels = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let parse = |s: &str| {
                s.trim().parse::<usize>().map_err(|_| SynthError::Parse {
                    line: i + 1,
                    message: format!("invalid label {s:?}"),
                })
            };
            if fields.len() != 3 {
                return Err(SynthError::Parse {
                    line: i + 1,
                    message: "expected garment<TAB>style<TAB>category".into(),
                });
            }
            labels.insert(fields[0].to_string(), (parse(fields[1])?, parse(fields[2])?));
        }
        Ok(SynthOracle { labels })
    }
}

/// `n` orthonormal vectors in `dim` dimensions (QR of a Gaussian matrix).
fn orthonormal_anchors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = DMatrix::from_fn(dim, n, |_, _| normal.sample(rng));
    let q = m.qr().q();
    (0..n).map(|j| q.column(j).iter().copied().collect()).collect()
}

fn garment_key(style: usize, category: usize, i: usize) -> String {
    format!("s{style}c{category}g{i:03}")
}

/// Outfit size weights peaked around 5–6 items.
fn size_weights(min: usize, max: usize) -> Vec<f64> {
    (min..=max).map(|s| (-((s as f64 - 5.5).powi(2)) / 4.0).exp()).collect()
}

/// Builds a catalog and its label oracle. Deterministic in `config.seed`.
pub fn generate_synthetic_catalog(config: &SynthConfig) -> Result<(Catalog, SynthOracle), SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (s_n, k_n, per) = (config.num_styles, config.num_categories, config.garments_per_cell);
    let anchors = orthonormal_anchors(s_n + k_n, config.embedding_dim, &mut rng);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut garments: Vec<GarmentRecord> = Vec::with_capacity(s_n * k_n * per);
    let mut labels = HashMap::new();
    for s in 0..s_n {
        for c in 0..k_n {
            for i in 0..per {
                let key = garment_key(s, c, i);
                let embedding: Vec<f64> = (0..config.embedding_dim)
                    .map(|d| {
                        let eps = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        anchors[s][d] + anchors[s_n + c][d] + eps
                    })
                    .collect();
                labels.insert(key.clone(), (s, c));
                garments.push((key, format!("cat{c}"), embedding));
            }
        }
    }

    let sizes = WeightedIndex::new(size_weights(config.min_outfit_size, config.max_outfit_size))
        .expect("positive weights");
    let categories: Vec<usize> = (0..k_n).collect();
    // Per cell: garments not yet used, in random order, and those already used.
    let mut fresh: Vec<Vec<usize>> = (0..s_n * k_n)
        .map(|_| {
            let mut v: Vec<usize> = (0..per).collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); s_n * k_n];
    let mut outfits: Vec<OutfitRecord> = Vec::with_capacity(config.outfit_count);
    for o in 0..config.outfit_count {
        let style = rng.random_range(0..s_n);
        let size = config.min_outfit_size + sizes.sample(&mut rng);
        let chosen: Vec<usize> = categories.choose_multiple(&mut rng, size).copied().collect();
        let mut members = Vec::with_capacity(size);
        for c in chosen {
            let cell = style * k_n + c;
            let share = !used[cell].is_empty() && rng.random::<f64>() < config.sharing_probability;
            let i = if share || fresh[cell].is_empty() {
                *used[cell].choose(&mut rng).expect("a cell with no fresh garments has used ones")
            } else {
                let i = fresh[cell].pop().expect("non-empty");
                used[cell].push(i);
                i
            };
            members.push(garment_key(style, c, i));
        }
        outfits.push((format!("outfit{o:05}"), members));
    }
    let catalog = Catalog::from_records(garments, outfits)?;
    Ok((catalog, SynthOracle { labels }))
}

/// Outfit-level train/validation/test split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<OutfitId>,
    pub val: Vec<OutfitId>,
    pub test: Vec<OutfitId>,
    /// Outfits dropped to keep garment sets disjoint.
    pub dropped: Vec<OutfitId>,
}

/// Shuffles outfits and splits them by `fractions` (train, val; test gets
/// the rest). With `disjoint_garments`, an outfit whose garments already
/// belong to another split is dropped so no garment appears in two splits.
pub fn split_outfits(catalog: &Catalog, fractions: (f64, f64), disjoint_garments: bool, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<OutfitId> = catalog.outfit_ids().collect();
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = ((fractions.1 * n as f64).round() as usize).min(n - n_train.min(n));
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        dropped: Vec::new(),
    };
    let mut owner: HashMap<GarmentId, usize> = HashMap::new();
    for (pos, o) in ids.into_iter().enumerate() {
        let target = if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        };
        if disjoint_garments {
            let members = &catalog.outfit(o).members;
            if members.iter().any(|g| owner.get(g).is_some_and(|&s| s != target)) {
                split.dropped.push(o);
                continue;
            }
            for &g in members {
                owner.insert(g, target);
            }
        }
        match target {
            0 => split.train.push(o),
            1 => split.val.push(o),
            _ => split.test.push(o),
        }
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OutfitRelationGraph;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_styles: 3,
            num_categories: 5,
            garments_per_cell: 20,
            outfit_count: 60,
            min_outfit_size: 2,
            max_outfit_size: 4,
            embedding_dim: 16,
            noise_sigma: 0.05,
            sharing_probability: 0.5,
            seed,
        }
    }

    #[test]
    fn zero_noise_cells_share_an_embedding() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            num_styles: 2,
            ..small(1)
        };
        let (c, oracle) = generate_synthetic_catalog(&cfg).unwrap();
        let labels = oracle.labels_for(&c).unwrap();
        for (i, a) in c.garments().iter().enumerate() {
            for (j, b) in c.garments().iter().enumerate() {
                assert_eq!(labels[i] == labels[j], a.embedding == b.embedding);
            }
        }
    }

    #[test]
    fn no_sharing_means_no_org_edges() {
        let cfg = SynthConfig {
            sharing_probability: 0.0,
            ..small(2)
        };
        let (c, _) = generate_synthetic_catalog(&cfg).unwrap();
        assert_eq!(OutfitRelationGraph::build(&c).edge_count(), 0);
    }

    #[test]
    fn shared_items_match_org_edges() {
        let cfg = SynthConfig {
            outfit_count: 300,
            ..small(3)
        };
        let (c, _) = generate_synthetic_catalog(&cfg).unwrap();
        let mut expected = 0;
        for i in 0..c.outfits().len() {
            for j in i + 1..c.outfits().len() {
                let a = &c.outfits()[i].members;
                if c.outfits()[j].members.iter().any(|g| a.contains(g)) {
                    expected += 1;
                }
            }
        }
        assert!(expected > 0);
        assert_eq!(OutfitRelationGraph::build(&c).edge_count(), expected);
    }

    #[test]
    fn outfits_are_oracle_compatible() {
        let (c, oracle) = generate_synthetic_catalog(&small(4)).unwrap();
        for o in c.outfits() {
            assert!(oracle.compatible(o.members.iter().map(|&g| c.garment(g).key.as_str())).unwrap());
            assert!(o.members.len() >= 2 && o.members.len() <= 4);
        }
    }

    #[test]
    fn compatibility_matches_label_recount() {
        let (c, oracle) = generate_synthetic_catalog(&small(5)).unwrap();
        let labels = oracle.labels_for(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let all: Vec<usize> = (0..c.garments().len()).collect();
        let mut seen_true = false;
        for _ in 0..500 {
            let pick: Vec<usize> = all.choose_multiple(&mut rng, 4).copied().collect();
            let styles: BTreeSet<usize> = pick.iter().map(|&i| labels[i].0).collect();
            let cats: BTreeSet<usize> = pick.iter().map(|&i| labels[i].1).collect();
            let expected = styles.len() == 1 && cats.len() == 4;
            seen_true |= expected;
            let keys = pick.iter().map(|&i| c.garments()[i].key.as_str());
            assert_eq!(oracle.compatible(keys).unwrap(), expected);
        }
        assert!(seen_true);
        assert!(oracle.compatible(["s0c0g000", "s0c1g000"]).unwrap());
        assert!(!oracle.compatible(["s0c0g000", "s1c1g000"]).unwrap());
        assert!(!oracle.compatible(["s0c0g000", "s0c0g001"]).unwrap());
        assert!(matches!(oracle.compatible(["nope"]), Err(SynthError::UnknownGarment(_))));
    }

    #[test]
    fn nearest_centroid_recovers_labels() {
        let cfg = SynthConfig::default();
        let (c, oracle) = generate_synthetic_catalog(&cfg).unwrap();
        let labels = oracle.labels_for(&c).unwrap();
        let cells = cfg.num_styles * cfg.num_categories;
        let mut centroids = vec![vec![0.0; cfg.embedding_dim]; cells];
        let mut counts = vec![0.0; cells];
        for (g, &(s, k)) in c.garments().iter().zip(&labels) {
            let cell = s * cfg.num_categories + k;
            counts[cell] += 1.0;
            for (a, b) in centroids[cell].iter_mut().zip(&g.embedding) {
                *a += b;
            }
        }
        for (cent, n) in centroids.iter_mut().zip(&counts) {
            cent.iter_mut().for_each(|x| *x /= n);
        }
        let correct = c
            .garments()
            .iter()
            .zip(&labels)
            .filter(|(g, &(s, k))| {
                let best = (0..cells)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(&g.embedding).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(&g.embedding).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == s * cfg.num_categories + k
            })
            .count();
        assert!(correct as f64 / c.garments().len() as f64 >= 0.99);
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        let a = generate_synthetic_catalog(&small(7)).unwrap();
        let b = generate_synthetic_catalog(&small(7)).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.outfits(), b.0.outfits());
        let too_big = SynthConfig {
            max_outfit_size: 6,
            ..small(7)
        };
        assert!(matches!(generate_synthetic_catalog(&too_big), Err(SynthError::Config(_))));
    }

    #[test]
    fn disjoint_split_shares_no_garments() {
        let (c, _) = generate_synthetic_catalog(&SynthConfig {
            outfit_count: 200,
            ..small(8)
        })
        .unwrap();
        let split = split_outfits(&c, (0.6, 0.2), true, 1);
        let garments = |ids: &[OutfitId]| -> BTreeSet<GarmentId> {
            ids.iter().flat_map(|&o| c.outfit(o).members.iter().copied()).collect()
        };
        let (tr, va, te) = (garments(&split.train), garments(&split.val), garments(&split.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        let total = split.train.len() + split.val.len() + split.test.len() + split.dropped.len();
        assert_eq!(total, 200);

        let loose = split_outfits(&c, (0.6, 0.2), false, 1);
        assert!(loose.dropped.is_empty());
        assert_eq!(loose.train.len(), 120);
        assert_eq!(loose.val.len(), 40);
    }

    #[test]
    fn oracle_file_round_trip() {
        let (_, oracle) = generate_synthetic_catalog(&small(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.tsv");
        oracle.write(&path).unwrap();
        assert_eq!(SynthOracle::read(&path).unwrap(), oracle);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = small(3);
        let mut back = SynthConfig::default();
        for (k, v) in config::parse_key_values(&cfg.to_text()).unwrap() {
            assert!(back.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert!(!back.set("d_m", "3").unwrap());
        assert!(back.set("noise_sigma", "abc").is_err());
    }
}
