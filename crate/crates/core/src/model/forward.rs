use std::collections::HashSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{Attn, Candidate, Linear, ModelError, Norm, Tgnn, NORM_EPS};
use crate::autodiff::{AttentionMask, Tape, Tensor, Var};
use crate::catalog::{Catalog, GarmentId};
use crate::graph::ItemRelationGraph;

/// Whether dropout is active.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Which transition layer to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Contextualized node representations, one row per IRG node.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub nodes: Vec<GarmentId>,
    /// `|nodes| x d_m`.
    pub reprs: Tensor,
}

impl EncoderOutput {
    pub fn row(&self, g: GarmentId) -> Option<&[f64]> {
        let i = self.nodes.binary_search(&g).ok()?;
        Some(self.reprs.row(i))
    }
}

impl Tgnn {
    fn linear(&self, tape: &mut Tape<'_>, l: Linear, x: Var) -> Result<Var, ModelError> {
        let w = tape.param(l.w);
        let b = tape.param(l.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn norm(&self, tape: &mut Tape<'_>, n: Norm, x: Var) -> Result<Var, ModelError> {
        let gamma = tape.param(n.gamma);
        let beta = tape.param(n.beta);
        let y = tape.layer_norm(x, 1, NORM_EPS)?;
        let y = tape.mul_row(y, gamma)?;
        Ok(tape.add_row(y, beta)?)
    }

    fn drop(&self, tape: &mut Tape<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var, ModelError> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => Ok(tape.dropout(x, self.config.dropout, &mut **rng)?),
        }
    }

    /// Multi-head attention with output projection and dropout.
    fn attend(
        &self,
        tape: &mut Tape<'_>,
        a: Attn,
        query: Var,
        memory: Var,
        mask: &AttentionMask,
        mode: &mut Mode<'_>,
    ) -> Result<Var, ModelError> {
        let q = self.linear(tape, a.q, query)?;
        let k = self.linear(tape, a.k, memory)?;
        let v = self.linear(tape, a.v, memory)?;
        let out = tape.attention(q, k, v, self.config.heads, mask)?;
        let out = self.linear(tape, a.o, out)?;
        self.drop(tape, out, mode)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape<'_>,
        ff1: Linear,
        ff2: Linear,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var, ModelError> {
        let hidden = self.linear(tape, ff1, x)?;
        let hidden = tape.relu(hidden);
        let hidden = self.drop(tape, hidden, mode)?;
        self.linear(tape, ff2, hidden)
    }

    /// `ReLU(x W + b)` row-wise, `n x d_e -> n x d_m`.
    pub fn transition(
        &self,
        tape: &mut Tape<'_>,
        side: Side,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var, ModelError> {
        let layer = match side {
            Side::Encoder => self.layout.enc_transition,
            Side::Decoder => self.layout.dec_transition,
        };
        let y = self.linear(tape, layer, x)?;
        let y = tape.relu(y);
        self.drop(tape, y, mode)
    }

    /// Encoder stack over node embeddings `x` (`n x d_e`); node `i` attends
    /// to the rows listed in `neighbors[i]`.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        neighbors: Arc<Vec<Vec<usize>>>,
        mode: &mut Mode<'_>,
    ) -> Result<Var, ModelError> {
        let mask = AttentionMask::Neighbors(neighbors);
        let mut h = self.transition(tape, Side::Encoder, x, mode)?;
        for layer in &self.layout.encoder {
            let a = self.attend(tape, layer.attn, h, h, &mask, mode)?;
            let sum = tape.add(h, a)?;
            h = self.norm(tape, layer.norm1, sum)?;
            let f = self.feed_forward(tape, layer.ff1, layer.ff2, h, mode)?;
            let sum = tape.add(h, f)?;
            h = self.norm(tape, layer.norm2, sum)?;
        }
        Ok(h)
    }

    /// Decoder stack over a prefix (`t x d_e`) attending to `memory`
    /// (`n x d_m`). Row `i` of the result only depends on prefix rows
    /// `0..=i`.
    pub fn decode(
        &self,
        tape: &mut Tape<'_>,
        prefix: Var,
        memory: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var, ModelError> {
        if tape.shape(prefix).first() == Some(&0) {
            return Err(ModelError::EmptyPrefix);
        }
        let mut y = self.transition(tape, Side::Decoder, prefix, mode)?;
        for layer in &self.layout.decoder {
            let a = self.attend(tape, layer.self_attn, y, y, &AttentionMask::Causal, mode)?;
            let sum = tape.add(y, a)?;
            y = self.norm(tape, layer.norm1, sum)?;
            let a = self.attend(tape, layer.cross_attn, y, memory, &AttentionMask::Full, mode)?;
            let sum = tape.add(y, a)?;
            y = self.norm(tape, layer.norm2, sum)?;
            let f = self.feed_forward(tape, layer.ff1, layer.ff2, y, mode)?;
            let sum = tape.add(y, f)?;
            y = self.norm(tape, layer.norm3, sum)?;
        }
        Ok(y)
    }

    /// Attention sublayer of encoder module `layer` for one node: the query
    /// is the node's row of `reprs`, keys and values are the rows of its
    /// IRG neighborhood (itself included). Output projection applied,
    /// dropout off.
    pub fn neighborhood_attention(
        &self,
        layer: usize,
        irg: &ItemRelationGraph,
        reprs: &Tensor,
        node: GarmentId,
    ) -> Result<Vec<f64>, ModelError> {
        let i = irg.local_index(node).ok_or(ModelError::MissingNode(node))?;
        let block = self.layout.encoder.get(layer).ok_or_else(|| {
            ModelError::Config(format!("encoder module {layer} of {}", self.layout.encoder.len()))
        })?;
        let d = self.config.d_m;
        let neighborhood = irg.neighbors(i);
        let rows: Vec<f64> = neighborhood.iter().flat_map(|&j| reprs.row(j).to_vec()).collect();
        let mut tape = Tape::inference(&self.params);
        let query = tape.constant(Tensor::new(vec![1, d], reprs.row(i).to_vec())?);
        let memory = tape.constant(Tensor::new(vec![neighborhood.len(), d], rows)?);
        let out = self.attend(&mut tape, block.attn, query, memory, &AttentionMask::Full, &mut Mode::Eval)?;
        Ok(tape.value(out).to_vec())
    }

    /// Stop-token embedding as a `1 x d_e` row.
    pub fn stop_row(&self, tape: &mut Tape<'_>) -> Result<Var, ModelError> {
        let stop = tape.param(self.layout.stop);
        Ok(tape.reshape(stop, &[1, self.config.d_e])?)
    }

    fn check_dim(&self, catalog: &Catalog) -> Result<(), ModelError> {
        if catalog.dim() != self.config.d_e {
            return Err(ModelError::DimensionMismatch {
                expected: self.config.d_e,
                found: catalog.dim(),
            });
        }
        Ok(())
    }

    /// Raw `c x d_e` inputs for a candidate list, stop token included
    /// where it appears.
    pub fn candidate_inputs(
        &self,
        tape: &mut Tape<'_>,
        candidates: &[Candidate],
        catalog: &Catalog,
    ) -> Result<Var, ModelError> {
        if candidates.is_empty() {
            return Err(ModelError::EmptyCandidates);
        }
        self.check_dim(catalog)?;
        let mut seen = HashSet::new();
        for c in candidates {
            if !seen.insert(*c) {
                return Err(ModelError::DuplicateCandidate(*c));
            }
        }
        let mut pieces = Vec::new();
        let mut run: Vec<f64> = Vec::new();
        let d_e = self.config.d_e;
        for c in candidates {
            match c {
                Candidate::Garment(g) => run.extend_from_slice(catalog.embedding(*g)),
                Candidate::Stop => {
                    if !run.is_empty() {
                        let rows = run.len() / d_e;
                        pieces.push(tape.constant(Tensor::new(vec![rows, d_e], std::mem::take(&mut run))?));
                    }
                    pieces.push(self.stop_row(tape)?);
                }
            }
        }
        if !run.is_empty() {
            let rows = run.len() / d_e;
            pieces.push(tape.constant(Tensor::new(vec![rows, d_e], run)?));
        }
        if pieces.len() == 1 {
            return Ok(pieces[0]);
        }
        Ok(tape.concat(&pieces, 0)?)
    }

    /// Rows of `catalog` embeddings for `garments`, in order.
    pub fn embedding_rows(&self, garments: &[GarmentId], catalog: &Catalog) -> Result<Tensor, ModelError> {
        self.check_dim(catalog)?;
        let mut data = Vec::with_capacity(garments.len() * self.config.d_e);
        for &g in garments {
            data.extend_from_slice(catalog.embedding(g));
        }
        Ok(Tensor::new(vec![garments.len(), self.config.d_e], data)?)
    }

    /// Runs the encoder on every node of `irg` (dropout off).
    pub fn encoder_output(&self, irg: &ItemRelationGraph, catalog: &Catalog) -> Result<EncoderOutput, ModelError> {
        let mut tape = Tape::inference(&self.params);
        let x = tape.constant(self.embedding_rows(irg.nodes(), catalog)?);
        let e = self.encode(&mut tape, x, irg.neighbor_lists(), &mut Mode::Eval)?;
        Ok(EncoderOutput {
            nodes: irg.nodes().to_vec(),
            reprs: tape.tensor(e),
        })
    }

    /// Decoder outputs for every prefix position (dropout off). Row `t` is
    /// the state after reading `prefix[..=t]`.
    pub fn decoder_states(
        &self,
        prefix: &[GarmentId],
        encoded: &EncoderOutput,
        catalog: &Catalog,
    ) -> Result<Tensor, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let mut tape = Tape::inference(&self.params);
        let x = tape.constant(self.embedding_rows(prefix, catalog)?);
        let memory = tape.constant(encoded.reprs.clone());
        let y = self.decode(&mut tape, x, memory, &mut Mode::Eval)?;
        Ok(tape.tensor(y))
    }

    /// `h` after reading the whole prefix.
    pub fn decode_step(
        &self,
        prefix: &[GarmentId],
        encoded: &EncoderOutput,
        catalog: &Catalog,
    ) -> Result<Vec<f64>, ModelError> {
        let states = self.decoder_states(prefix, encoded, catalog)?;
        Ok(states.row(prefix.len() - 1).to_vec())
    }

    /// `τ(c)` for every candidate (dropout off), `c x d_m`.
    pub fn candidate_reprs(&self, candidates: &[Candidate], catalog: &Catalog) -> Result<Tensor, ModelError> {
        let mut tape = Tape::inference(&self.params);
        let x = self.candidate_inputs(&mut tape, candidates, catalog)?;
        let t = self.transition(&mut tape, Side::Decoder, x, &mut Mode::Eval)?;
        Ok(tape.tensor(t))
    }

    /// Dot products `h · τ(c)`.
    pub fn candidate_logits(
        &self,
        h: &[f64],
        candidates: &[Candidate],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, ModelError> {
        if h.len() != self.config.d_m {
            return Err(ModelError::DimensionMismatch {
                expected: self.config.d_m,
                found: h.len(),
            });
        }
        let reprs = self.candidate_reprs(candidates, catalog)?;
        Ok((0..candidates.len())
            .map(|i| reprs.row(i).iter().zip(h).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Probability of each candidate being the next garment.
    pub fn score_candidates(
        &self,
        h: &[f64],
        candidates: &[Candidate],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, ModelError> {
        Ok(super::softmax(&self.candidate_logits(h, candidates, catalog)?))
    }
}
