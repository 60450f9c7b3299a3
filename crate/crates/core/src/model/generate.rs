use std::collections::HashSet;

use super::{Candidate, ModelError, Tgnn};
use crate::autodiff::Tensor;
use crate::catalog::{Catalog, GarmentId};
use crate::graph::ItemRelationGraph;

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Garments that may no longer be proposed: everything in `exclude`, the
/// `chosen` garments themselves, and every garment sharing an outfit of
/// `catalog` with a chosen garment.
fn blocked(chosen: &[GarmentId], exclude: &[GarmentId], catalog: &Catalog) -> HashSet<GarmentId> {
    let mut out: HashSet<GarmentId> = exclude.iter().chain(chosen).copied().collect();
    for &g in chosen {
        if g.index() < catalog.garments().len() {
            for &o in catalog.outfits_of(g) {
                out.extend(catalog.outfit(o).members.iter().copied());
            }
        }
    }
    out
}

/// The pool with blocked garments removed; the stop token always survives.
pub fn filter_pool(
    pool: &[Candidate],
    chosen: &[GarmentId],
    exclude: &[GarmentId],
    catalog: &Catalog,
) -> Vec<Candidate> {
    let blocked = blocked(chosen, exclude, catalog);
    pool.iter()
        .copied()
        .filter(|c| match c {
            Candidate::Garment(g) => !blocked.contains(g),
            Candidate::Stop => true,
        })
        .collect()
}

/// One generation decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    pub candidate: Candidate,
    /// Probability of `candidate` within the filtered pool.
    pub probability: f64,
    /// Size of the filtered pool the choice was made from.
    pub pool_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub seed: Vec<GarmentId>,
    /// Generated garments in order, seed excluded.
    pub garments: Vec<GarmentId>,
    pub steps: Vec<Choice>,
    /// True when the stop token ended generation (false when the length
    /// cap did).
    pub stopped: bool,
}

fn pick(h: &[f64], rows: &[usize], reprs: &Tensor, pool: &[Candidate]) -> Choice {
    let logits: Vec<f64> = rows
        .iter()
        .map(|&r| reprs.row(r).iter().zip(h).map(|(a, b)| a * b).sum())
        .collect();
    let probs = softmax(&logits);
    let best = argmax(&logits).expect("non-empty pool");
    Choice {
        candidate: pool[rows[best]],
        probability: probs[best],
        pool_size: rows.len(),
    }
}

impl Tgnn {
    /// Best-scoring candidate of `pool` after filtering (see
    /// [`filter_pool`]). An empty filtered pool yields the stop token.
    pub fn next_garment(
        &self,
        h: &[f64],
        pool: &[Candidate],
        chosen: &[GarmentId],
        exclude: &[GarmentId],
        catalog: &Catalog,
    ) -> Result<Choice, ModelError> {
        let filtered = filter_pool(pool, chosen, exclude, catalog);
        if filtered.is_empty() {
            log::warn!("candidate pool exhausted; stopping generation");
            return Ok(Choice {
                candidate: Candidate::Stop,
                probability: 1.0,
                pool_size: 0,
            });
        }
        let reprs = self.candidate_reprs(&filtered, catalog)?;
        if h.len() != self.config.d_m {
            return Err(ModelError::DimensionMismatch {
                expected: self.config.d_m,
                found: h.len(),
            });
        }
        let rows: Vec<usize> = (0..filtered.len()).collect();
        Ok(pick(h, &rows, &reprs, &filtered))
    }

    /// Autoregressive generation from `seed` until the stop token wins or
    /// `max_generation_len` garments have been produced. The stop token is
    /// added to `pool` if absent. `catalog` supplies embeddings and the
    /// outfit memberships used by the pool filter.
    pub fn generate(
        &self,
        seed: &[GarmentId],
        irg: &ItemRelationGraph,
        pool: &[Candidate],
        catalog: &Catalog,
    ) -> Result<Generation, ModelError> {
        if seed.is_empty() {
            return Err(ModelError::EmptySeed);
        }
        for (i, &a) in seed.iter().enumerate() {
            for &b in &seed[i + 1..] {
                if a != b && irg.has_edge(a, b) {
                    return Err(ModelError::SeedLinked(a, b));
                }
            }
        }
        let mut pool = pool.to_vec();
        if !pool.contains(&Candidate::Stop) {
            pool.push(Candidate::Stop);
        }
        let encoded = self.encoder_output(irg, catalog)?;
        let reprs = self.candidate_reprs(&pool, catalog)?;

        let mut prefix = seed.to_vec();
        let mut garments = Vec::new();
        let mut steps = Vec::new();
        let mut stopped = false;
        while garments.len() < self.config.max_generation_len {
            let h = self.decode_step(&prefix, &encoded, catalog)?;
            let blocked = blocked(&garments, seed, catalog);
            let rows: Vec<usize> = (0..pool.len())
                .filter(|&i| match pool[i] {
                    Candidate::Garment(g) => !blocked.contains(&g),
                    Candidate::Stop => true,
                })
                .collect();
            let choice = pick(&h, &rows, &reprs, &pool);
            let candidate = choice.candidate;
            steps.push(choice);
            match candidate {
                Candidate::Stop => {
                    stopped = true;
                    break;
                }
                Candidate::Garment(g) => {
                    garments.push(g);
                    prefix.push(g);
                }
            }
        }
        Ok(Generation {
            seed: seed.to_vec(),
            garments,
            steps,
            stopped,
        })
    }
}
