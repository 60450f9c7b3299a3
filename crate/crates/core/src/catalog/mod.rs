//! Garments, outfits and the inverted garment → outfit index.
//!
//! File formats (UTF-8, one record per line, blank lines ignored):
//!
//! * outfits: `outfit_id<TAB>garment_id,garment_id,...`
//! * embeddings: `garment_id<TAB>category_id<TAB>v1,v2,...`

mod pca;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use pca::{PcaError, PcaModel};

/// Dense index of a garment inside its [`Catalog`] (row order of the
/// embeddings file).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GarmentId(pub u32);

/// Dense index of an outfit inside its [`Catalog`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OutfitId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CategoryId(pub u32);

impl GarmentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl OutfitId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl CategoryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for GarmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g#{}", self.0)
    }
}

impl fmt::Display for OutfitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Garment {
    pub key: String,
    pub category: CategoryId,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outfit {
    pub key: String,
    /// Storage order only; an outfit is semantically a set.
    pub members: Vec<GarmentId>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("outfit {outfit} references unknown garment {garment}")]
    DanglingGarment { outfit: String, garment: String },
    #[error("duplicate garment id {0}")]
    DuplicateGarment(String),
    #[error("duplicate outfit id {0}")]
    DuplicateOutfit(String),
    #[error("outfit {outfit} lists garment {garment} more than once")]
    DuplicateMember { outfit: String, garment: String },
    #[error("outfit {outfit} has {size} members, need at least 2")]
    OutfitTooSmall { outfit: String, size: usize },
    #[error("garment {garment} has embedding length {found}, expected {expected}")]
    EmbeddingLength {
        garment: String,
        expected: usize,
        found: usize,
    },
    #[error("garment {garment} has a non-finite embedding value")]
    NonFinite { garment: String },
    #[error("unknown garment {0}")]
    UnknownGarment(String),
    #[error("unknown outfit {0}")]
    UnknownOutfit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable, validated collection of garments and outfits.
#[derive(Clone, Debug)]
pub struct Catalog {
    dim: usize,
    categories: Vec<String>,
    category_index: HashMap<String, CategoryId>,
    garments: Vec<Garment>,
    garment_index: HashMap<String, GarmentId>,
    outfits: Vec<Outfit>,
    outfit_index: HashMap<String, OutfitId>,
    outfits_of: Vec<Vec<OutfitId>>,
}

/// Raw garment record: `(garment key, category key, embedding)`.
pub type GarmentRecord = (String, String, Vec<f64>);
/// Raw outfit record: `(outfit key, member garment keys)`.
pub type OutfitRecord = (String, Vec<String>);

impl Catalog {
    /// Validates records and builds the inverted index.
    pub fn from_records(
        garments: Vec<GarmentRecord>,
        outfits: Vec<OutfitRecord>,
    ) -> Result<Self, CatalogError> {
        let dim = garments.first().map_or(0, |g| g.2.len());
        let mut catalog = Catalog {
            dim,
            categories: Vec::new(),
            category_index: HashMap::new(),
            garments: Vec::with_capacity(garments.len()),
            garment_index: HashMap::with_capacity(garments.len()),
            outfits: Vec::with_capacity(outfits.len()),
            outfit_index: HashMap::with_capacity(outfits.len()),
            outfits_of: Vec::new(),
        };
        for (key, category, embedding) in garments {
            if embedding.len() != dim {
                return Err(CatalogError::EmbeddingLength {
                    garment: key,
                    expected: dim,
                    found: embedding.len(),
                });
            }
            if embedding.iter().any(|x| !x.is_finite()) {
                return Err(CatalogError::NonFinite { garment: key });
            }
            if catalog.garment_index.contains_key(&key) {
                return Err(CatalogError::DuplicateGarment(key));
            }
            let category = catalog.intern_category(category);
            let id = GarmentId(catalog.garments.len() as u32);
            catalog.garment_index.insert(key.clone(), id);
            catalog.garments.push(Garment {
                key,
                category,
                embedding,
            });
        }
        for (key, member_keys) in outfits {
            catalog.push_outfit(key, &member_keys)?;
        }
        catalog.rebuild_index();
        Ok(catalog)
    }

    fn intern_category(&mut self, key: String) -> CategoryId {
        if let Some(&id) = self.category_index.get(&key) {
            return id;
        }
        let id = CategoryId(self.categories.len() as u32);
        self.category_index.insert(key.clone(), id);
        self.categories.push(key);
        id
    }

    fn push_outfit(&mut self, key: String, member_keys: &[String]) -> Result<OutfitId, CatalogError> {
        if self.outfit_index.contains_key(&key) {
            return Err(CatalogError::DuplicateOutfit(key));
        }
        if member_keys.len() < 2 {
            return Err(CatalogError::OutfitTooSmall {
                outfit: key,
                size: member_keys.len(),
            });
        }
        let mut members = Vec::with_capacity(member_keys.len());
        let mut seen = BTreeSet::new();
        for garment in member_keys {
            let id = *self
                .garment_index
                .get(garment)
                .ok_or_else(|| CatalogError::DanglingGarment {
                    outfit: key.clone(),
                    garment: garment.clone(),
                })?;
            if !seen.insert(id) {
                return Err(CatalogError::DuplicateMember {
                    outfit: key,
                    garment: garment.clone(),
                });
            }
            members.push(id);
        }
        let categories: BTreeSet<CategoryId> =
            members.iter().map(|g| self.garments[g.index()].category).collect();
        if categories.len() < members.len() {
            log::warn!("outfit {key} holds more than one garment of some category");
        }
        let id = OutfitId(self.outfits.len() as u32);
        self.outfit_index.insert(key.clone(), id);
        self.outfits.push(Outfit { key, members });
        Ok(id)
    }

    fn rebuild_index(&mut self) {
        self.outfits_of = vec![Vec::new(); self.garments.len()];
        for (i, outfit) in self.outfits.iter().enumerate() {
            for g in &outfit.members {
                self.outfits_of[g.index()].push(OutfitId(i as u32));
            }
        }
    }

    /// Reads and validates the outfits and embeddings files.
    pub fn load(outfits_path: &Path, embeddings_path: &Path) -> Result<Self, CatalogError> {
        let garments = read_embeddings(embeddings_path)?;
        let outfits = read_outfits(outfits_path)?;
        Catalog::from_records(garments, outfits)
    }

    /// Same garments, restricted to the given outfits (renumbered in the
    /// given order). Garment ids are preserved.
    pub fn with_outfits(&self, ids: &[OutfitId]) -> Catalog {
        let mut out = Catalog {
            outfits: Vec::with_capacity(ids.len()),
            outfit_index: HashMap::with_capacity(ids.len()),
            ..self.clone()
        };
        for &id in ids {
            let outfit = self.outfits[id.index()].clone();
            out.outfit_index
                .insert(outfit.key.clone(), OutfitId(out.outfits.len() as u32));
            out.outfits.push(outfit);
        }
        out.rebuild_index();
        out
    }

    /// Same structure with every embedding replaced by `f(embedding)`.
    pub fn map_embeddings<E>(
        &self,
        mut f: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    ) -> Result<Catalog, E> {
        let mut out = self.clone();
        for g in &mut out.garments {
            g.embedding = f(&g.embedding)?;
        }
        out.dim = out.garments.first().map_or(0, |g| g.embedding.len());
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn garments(&self) -> &[Garment] {
        &self.garments
    }

    pub fn garment_ids(&self) -> impl Iterator<Item = GarmentId> {
        (0..self.garments.len() as u32).map(GarmentId)
    }

    pub fn garment(&self, id: GarmentId) -> &Garment {
        &self.garments[id.index()]
    }

    pub fn embedding(&self, id: GarmentId) -> &[f64] {
        &self.garments[id.index()].embedding
    }

    pub fn category(&self, id: GarmentId) -> CategoryId {
        self.garments[id.index()].category
    }

    pub fn garment_by_key(&self, key: &str) -> Result<GarmentId, CatalogError> {
        self.garment_index
            .get(key)
            .copied()
            .ok_or_else(|| CatalogError::UnknownGarment(key.to_string()))
    }

    pub fn outfits(&self) -> &[Outfit] {
        &self.outfits
    }

    pub fn outfit_ids(&self) -> impl Iterator<Item = OutfitId> {
        (0..self.outfits.len() as u32).map(OutfitId)
    }

    pub fn outfit(&self, id: OutfitId) -> &Outfit {
        &self.outfits[id.index()]
    }

    pub fn outfit_by_key(&self, key: &str) -> Result<OutfitId, CatalogError> {
        self.outfit_index
            .get(key)
            .copied()
            .ok_or_else(|| CatalogError::UnknownOutfit(key.to_string()))
    }

    /// `O(g)`: outfits containing garment `g`, ascending.
    pub fn outfits_of(&self, g: GarmentId) -> &[OutfitId] {
        &self.outfits_of[g.index()]
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_name(&self, c: CategoryId) -> &str {
        &self.categories[c.index()]
    }

    /// Garments that belong to at least one outfit.
    pub fn used_garments(&self) -> Vec<GarmentId> {
        self.garment_ids()
            .filter(|g| !self.outfits_of(*g).is_empty())
            .collect()
    }

    pub fn write_outfits(&self, path: &Path) -> Result<(), CatalogError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for outfit in &self.outfits {
            let keys: Vec<&str> = outfit
                .members
                .iter()
                .map(|g| self.garments[g.index()].key.as_str())
                .collect();
            writeln!(out, "{}\t{}", outfit.key, keys.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_embeddings(&self, path: &Path) -> Result<(), CatalogError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for g in &self.garments {
            write!(out, "{}\t{}\t", g.key, self.categories[g.category.index()])?;
            write_floats(&mut out, &g.embedding)?;
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn write_floats(out: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.write_all(b",")?;
        }
        // `{}` prints the shortest representation that parses back exactly
        write!(out, "{x}")?;
    }
    Ok(())
}

pub(crate) fn parse_floats(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("invalid number {v:?}"))
        })
        .collect()
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> CatalogError {
    CatalogError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn records(path: &Path) -> Result<Vec<(usize, String)>, CatalogError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<GarmentRecord>, CatalogError> {
    records(path)?
        .into_iter()
        .map(|(line, text)| {
            let mut fields = text.split('\t');
            let (Some(id), Some(category), Some(values), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(parse_error(path, line, "expected 3 tab-separated fields"));
            };
            if id.is_empty() || category.is_empty() {
                return Err(parse_error(path, line, "empty garment or category id"));
            }
            let values = parse_floats(values).map_err(|m| parse_error(path, line, m))?;
            Ok((id.to_string(), category.to_string(), values))
        })
        .collect()
}

pub fn read_outfits(path: &Path) -> Result<Vec<OutfitRecord>, CatalogError> {
    records(path)?
        .into_iter()
        .map(|(line, text)| {
            let Some((id, members)) = text.split_once('\t') else {
                return Err(parse_error(path, line, "expected outfit_id<TAB>members"));
            };
            if id.is_empty() || members.contains('\t') {
                return Err(parse_error(path, line, "malformed outfit record"));
            }
            let members: Vec<String> = members.split(',').map(|m| m.trim().to_string()).collect();
            if members.iter().any(String::is_empty) {
                return Err(parse_error(path, line, "empty garment id"));
            }
            Ok((id.to_string(), members))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn garments(keys: &[&str]) -> Vec<GarmentRecord> {
        keys.iter()
            .enumerate()
            .map(|(i, k)| (k.to_string(), format!("c{}", i % 3), vec![i as f64, 1.0]))
            .collect()
    }

    fn outfit(key: &str, members: &[&str]) -> OutfitRecord {
        (key.to_string(), members.iter().map(|m| m.to_string()).collect())
    }

    #[test]
    fn inverted_index() {
        let c = Catalog::from_records(
            garments(&["a", "b", "c", "d"]),
            vec![outfit("o1", &["a", "b", "c"]), outfit("o2", &["c", "d"])],
        )
        .unwrap();
        let gc = c.garment_by_key("c").unwrap();
        assert_eq!(c.outfits_of(gc), [OutfitId(0), OutfitId(1)]);
        assert_eq!(c.outfits_of(c.garment_by_key("a").unwrap()), [OutfitId(0)]);
    }

    #[test]
    fn validation_errors() {
        let err = Catalog::from_records(garments(&["a", "b"]), vec![outfit("o", &["a", "z"])]);
        assert!(matches!(err, Err(CatalogError::DanglingGarment { .. })));
        let err = Catalog::from_records(garments(&["a", "a"]), vec![]);
        assert!(matches!(err, Err(CatalogError::DuplicateGarment(_))));
        let err = Catalog::from_records(
            garments(&["a", "b"]),
            vec![outfit("o", &["a", "b"]), outfit("o", &["b", "a"])],
        );
        assert!(matches!(err, Err(CatalogError::DuplicateOutfit(_))));
        let err = Catalog::from_records(garments(&["a", "b"]), vec![outfit("o", &["a", "a"])]);
        assert!(matches!(err, Err(CatalogError::DuplicateMember { .. })));
        let err = Catalog::from_records(garments(&["a", "b"]), vec![outfit("o", &["a"])]);
        assert!(matches!(err, Err(CatalogError::OutfitTooSmall { .. })));
        let mut gs = garments(&["a", "b"]);
        gs[1].2.push(0.0);
        assert!(matches!(
            Catalog::from_records(gs, vec![]),
            Err(CatalogError::EmbeddingLength { .. })
        ));
    }

    #[test]
    fn file_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = Catalog::from_records(
            garments(&["a", "b", "c"]),
            vec![outfit("o1", &["a", "b"]), outfit("o2", &["b", "c"])],
        )
        .unwrap();
        let (op, ep) = (dir.path().join("o.tsv"), dir.path().join("e.tsv"));
        c.write_outfits(&op).unwrap();
        c.write_embeddings(&ep).unwrap();
        let back = Catalog::load(&op, &ep).unwrap();
        assert_eq!(back.garments(), c.garments());
        assert_eq!(back.outfits(), c.outfits());

        fs::write(&ep, "a\tc0\t1,2\nb\tc1\t1,x\n").unwrap();
        match Catalog::load(&op, &ep) {
            Err(CatalogError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn restriction_keeps_garment_ids() {
        let c = Catalog::from_records(
            garments(&["a", "b", "c", "d"]),
            vec![outfit("o1", &["a", "b"]), outfit("o2", &["c", "d"])],
        )
        .unwrap();
        let r = c.with_outfits(&[OutfitId(1)]);
        assert_eq!(r.outfits().len(), 1);
        assert_eq!(r.garment_by_key("c").unwrap(), c.garment_by_key("c").unwrap());
        assert!(r.outfits_of(r.garment_by_key("a").unwrap()).is_empty());
        assert_eq!(r.outfit_by_key("o2").unwrap(), OutfitId(0));
    }
}
