//! Training triplets, the sequence objective and the optimization loop.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AutodiffError, Gradients, PlateauScheduler, Tape, Var};
use crate::catalog::{Catalog, CategoryId, GarmentId, OutfitId};
use crate::config::{self, ConfigError};
use crate::graph::{GraphError, ItemRelationGraph, LookupMode, PartitionLocator, PartitionSet};
use crate::model::{Candidate, Mode, ModelError, Side, Tgnn, TgnnConfig};


#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("outfit {0:?} has fewer than 2 garments")]
    OutfitTooShort(OutfitId),
    #[error("outfit {0:?} is not assigned to a partition")]
    Unpartitioned(OutfitId),
    #[error("no training outfits")]
    EmptyTrainingSet,
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub n_c: usize,
    pub n_r: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stopping_patience: usize,
    pub max_epochs: usize,
    /// Outfits per optimizer step (gradients are averaged).
    pub accumulate: usize,
    /// Wall-clock limit in seconds; 0 disables it.
    pub time_budget_secs: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            n_c: 3,
            n_r: 5,
            learning_rate: 5e-4,
            weight_decay: 5e-5,
            plateau_factor: 0.1,
            plateau_patience: 5,
            early_stopping_patience: 10,
            max_epochs: 1000,
            accumulate: 1,
            time_budget_secs: 0.0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub const KEYS: [&'static str; 11] = [
        "n_c",
        "n_r",
        "learning_rate",
        "weight_decay",
        "plateau_factor",
        "plateau_patience",
        "early_stopping_patience",
        "max_epochs",
        "accumulate",
        "time_budget_secs",
        "seed",
    ];

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.n_c + self.n_r == 0 {
            return bad("n_c + n_r must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if self.accumulate == 0 || self.max_epochs == 0 {
            return bad("accumulate and max_epochs must be positive");
        }
        if !(self.time_budget_secs >= 0.0) {
            return bad("time budget must be non-negative");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "n_c" => self.n_c = config::parse_value(key, value)?,
            "n_r" => self.n_r = config::parse_value(key, value)?,
            "learning_rate" => self.learning_rate = config::parse_value(key, value)?,
            "weight_decay" => self.weight_decay = config::parse_value(key, value)?,
            "plateau_factor" => self.plateau_factor = config::parse_value(key, value)?,
            "plateau_patience" => self.plateau_patience = config::parse_value(key, value)?,
            "early_stopping_patience" => self.early_stopping_patience = config::parse_value(key, value)?,
            "max_epochs" => self.max_epochs = config::parse_value(key, value)?,
            "accumulate" => self.accumulate = config::parse_value(key, value)?,
            "time_budget_secs" => self.time_budget_secs = config::parse_value(key, value)?,
            "seed" => self.seed = config::parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        config::render([
            ("n_c", config::show(self.n_c)),
            ("n_r", config::show(self.n_r)),
            ("learning_rate", config::show(self.learning_rate)),
            ("weight_decay", config::show(self.weight_decay)),
            ("plateau_factor", config::show(self.plateau_factor)),
            ("plateau_patience", config::show(self.plateau_patience)),
            ("early_stopping_patience", config::show(self.early_stopping_patience)),
            ("max_epochs", config::show(self.max_epochs)),
            ("accumulate", config::show(self.accumulate)),
            ("time_budget_secs", config::show(self.time_budget_secs)),
            ("seed", config::show(self.seed)),
        ])
    }
}

/// Model and trainer settings read from one config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: TgnnConfig,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if self.model.set(key, value)? || self.trainer.set(key, value)? {
            Ok(())
        } else {
            Err(ConfigError::UnknownKey(key.to_string()))
        }
    }

    pub fn from_text(text: &str) -> Result<Self, TrainingError> {
        let mut cfg = RunConfig::default();
        for (k, v) in config::parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        self.model.validate()?;
        self.trainer.validate()
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.model.to_text(), self.trainer.to_text())
    }
}

/// Garments of one partition grouped for negative sampling.
#[derive(Clone, Debug)]
struct Pool {
    garments: Vec<GarmentId>,
    by_category: HashMap<CategoryId, Vec<GarmentId>>,
}

/// One candidate set with the position of its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub answer: usize,
    /// Same-category negatives that had to be replaced by distractors.
    pub shortfall: usize,
}

/// A permuted outfit with its partition graph and per-step candidates.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// Permuted garments; step `t` reads `order[..=t]`.
    pub order: Vec<GarmentId>,
    pub partition: usize,
    /// Partition graph with the outfit's internal edges removed.
    pub irg: ItemRelationGraph,
    /// One set per step; the last one's ground truth is the stop token.
    pub steps: Vec<CandidateSet>,
}

impl TrainingSample {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ground_truth(&self, t: usize) -> Candidate {
        self.steps[t].candidates[self.steps[t].answer]
    }
}

/// Per-partition graphs, candidate pools and the similarity index, built
/// once over the training catalog.
#[derive(Clone, Debug)]
pub struct SampleBuilder {
    pub n_c: usize,
    pub n_r: usize,
    partitions: PartitionSet,
    graphs: Vec<ItemRelationGraph>,
    pools: Vec<Pool>,
    locator: PartitionLocator,
}

impl SampleBuilder {
    /// `catalog` is the training catalog the partitions were built from.
    pub fn new(catalog: &Catalog, partitions: &PartitionSet, n_c: usize, n_r: usize) -> Result<Self, TrainingError> {
        let mut graphs = Vec::with_capacity(partitions.len());
        let mut pools = Vec::with_capacity(partitions.len());
        for members in partitions.partitions() {
            let irg = ItemRelationGraph::induce(members, catalog)?;
            let mut by_category: HashMap<CategoryId, Vec<GarmentId>> = HashMap::new();
            for &g in irg.nodes() {
                by_category.entry(catalog.category(g)).or_default().push(g);
            }
            pools.push(Pool {
                garments: irg.nodes().to_vec(),
                by_category,
            });
            graphs.push(irg);
        }
        Ok(SampleBuilder {
            n_c,
            n_r,
            partitions: partitions.clone(),
            graphs,
            pools,
            locator: PartitionLocator::new(partitions, catalog),
        })
    }

    pub fn partitions(&self) -> &PartitionSet {
        &self.partitions
    }

    pub fn partition_graph(&self, p: usize) -> &ItemRelationGraph {
        &self.graphs[p]
    }

    pub fn partition_garments(&self, p: usize) -> &[GarmentId] {
        &self.pools[p].garments
    }

    /// Test-mode partition lookup for `query`; `catalog` must share garment
    /// ids with the training catalog.
    pub fn locate(&self, query: &[GarmentId], catalog: &Catalog) -> Result<usize, GraphError> {
        self.locator
            .partition_for_outfit(query, &self.partitions, catalog, LookupMode::Test)
    }

    /// Partition graph of `p` with every edge among `members` removed;
    /// members outside the partition are ignored.
    pub fn held_out_graph(&self, p: usize, members: &[GarmentId]) -> ItemRelationGraph {
        self.graphs[p].remove_edges_among(members)
    }

    /// `n_c` negatives sharing `category` (topped up with distractors when
    /// the partition runs short), `n_r` distractors and `answer`, shuffled.
    /// Negatives avoid `exclude`. `category` is `None` for the stop step,
    /// whose negatives are all distractors.
    pub fn candidate_set<R: rand::Rng + ?Sized>(
        &self,
        p: usize,
        answer: Candidate,
        category: Option<CategoryId>,
        exclude: &HashSet<GarmentId>,
        rng: &mut R,
    ) -> CandidateSet {
        self.candidate_set_sized(p, answer, category, exclude, (self.n_c, self.n_r), rng)
    }

    /// [`SampleBuilder::candidate_set`] with explicit `(n_c, n_r)` counts.
    pub fn candidate_set_sized<R: rand::Rng + ?Sized>(
        &self,
        p: usize,
        answer: Candidate,
        category: Option<CategoryId>,
        exclude: &HashSet<GarmentId>,
        (n_c, n_r): (usize, usize),
        rng: &mut R,
    ) -> CandidateSet {
        let pool = &self.pools[p];
        let allowed = |g: &GarmentId| !exclude.contains(g) && answer != Candidate::Garment(*g);
        let mut negatives: Vec<GarmentId> = match category.and_then(|c| pool.by_category.get(&c)) {
            Some(same) => {
                let eligible: Vec<GarmentId> = same.iter().copied().filter(allowed).collect();
                eligible.choose_multiple(rng, n_c).copied().collect()
            }
            None => Vec::new(),
        };
        let shortfall = n_c - negatives.len();
        let taken: HashSet<GarmentId> = negatives.iter().copied().collect();
        let rest: Vec<GarmentId> = pool
            .garments
            .iter()
            .copied()
            .filter(|g| allowed(g) && !taken.contains(g))
            .collect();
        negatives.extend(rest.choose_multiple(rng, n_r + shortfall).copied());
        if negatives.len() < n_c + n_r {
            log::warn!(
                "partition {p} holds only {} eligible negatives; candidate set is short",
                negatives.len()
            );
        }
        let mut candidates: Vec<Candidate> = negatives.into_iter().map(Candidate::Garment).collect();
        candidates.push(answer);
        candidates.shuffle(rng);
        let answer = candidates.iter().position(|&c| c == answer).expect("answer inserted");
        CandidateSet {
            candidates,
            answer,
            shortfall,
        }
    }

    /// Candidate sets for every step of `order`: step `t` predicts
    /// `order[t + 1]`, the last step predicts the stop token.
    pub fn candidate_sets<R: rand::Rng + ?Sized>(
        &self,
        p: usize,
        order: &[GarmentId],
        catalog: &Catalog,
        rng: &mut R,
    ) -> Vec<CandidateSet> {
        let members: HashSet<GarmentId> = order.iter().copied().collect();
        (0..order.len())
            .map(|t| match order.get(t + 1) {
                Some(&g) => self.candidate_set(p, Candidate::Garment(g), Some(catalog.category(g)), &members, rng),
                None => self.candidate_set(p, Candidate::Stop, None, &members, rng),
            })
            .collect()
    }

    /// Fresh training sample for training outfit `o`: a random permutation,
    /// its own partition's graph with the outfit's edges removed, and
    /// candidate sets drawn from that partition.
    pub fn training_sample<R: rand::Rng + ?Sized>(
        &self,
        o: OutfitId,
        catalog: &Catalog,
        rng: &mut R,
    ) -> Result<TrainingSample, TrainingError> {
        let members = &catalog.outfit(o).members;
        if members.len() < 2 {
            return Err(TrainingError::OutfitTooShort(o));
        }
        let p = self.partitions.assignment(o).ok_or(TrainingError::Unpartitioned(o))?;
        let mut order = members.clone();
        order.shuffle(rng);
        let irg = self.graphs[p].remove_outfit_edges(members)?;
        let steps = self.candidate_sets(p, &order, catalog, rng);
        warn_shortfall(&steps);
        Ok(TrainingSample {
            order,
            partition: p,
            irg,
            steps,
        })
    }

    /// Sample for an outfit outside the training catalog, kept in the given
    /// order; the partition comes from a similarity lookup on the whole
    /// outfit.
    pub fn held_out_sample<R: rand::Rng + ?Sized>(
        &self,
        order: &[GarmentId],
        catalog: &Catalog,
        rng: &mut R,
    ) -> Result<TrainingSample, TrainingError> {
        if order.len() < 2 {
            return Err(TrainingError::Config(format!("held-out outfit of size {}", order.len())));
        }
        let p = self.locate(order, catalog)?;
        let steps = self.candidate_sets(p, order, catalog, rng);
        Ok(TrainingSample {
            order: order.to_vec(),
            partition: p,
            irg: self.held_out_graph(p, order),
            steps,
        })
    }
}

fn warn_shortfall(steps: &[CandidateSet]) {
    let short: usize = steps.iter().map(|s| s.shortfall).sum();
    if short > 0 {
        log::debug!("{short} same-category negatives replaced by distractors");
    }
}

/// Builds a single training sample. Prefer a reused [`SampleBuilder`] in
/// loops; this one induces every partition graph.
pub fn build_training_sample<R: rand::Rng + ?Sized>(
    o: OutfitId,
    partitions: &PartitionSet,
    catalog: &Catalog,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<TrainingSample, TrainingError> {
    SampleBuilder::new(catalog, partitions, config.n_c, config.n_r)?.training_sample(o, catalog, rng)
}

/// `-(1/n) Σ_t log P(Γ_t)` under teacher forcing, recorded on `tape`.
pub fn sequence_loss(
    tape: &mut Tape<'_>,
    model: &Tgnn,
    sample: &TrainingSample,
    catalog: &Catalog,
    mode: &mut Mode<'_>,
) -> Result<Var, TrainingError> {
    let n = sample.len();
    if n == 0 {
        return Err(ModelError::EmptyPrefix.into());
    }
    let x = tape.constant(model.embedding_rows(sample.irg.nodes(), catalog)?);
    let memory = model.encode(tape, x, sample.irg.neighbor_lists(), mode)?;
    let prefix = tape.constant(model.embedding_rows(&sample.order, catalog)?);
    let states = model.decode(tape, prefix, memory, mode)?;
    let mut picked = Vec::with_capacity(n);
    for (t, set) in sample.steps.iter().enumerate() {
        let inputs = model.candidate_inputs(tape, &set.candidates, catalog)?;
        let reprs = model.transition(tape, Side::Decoder, inputs, mode)?;
        let h = tape.index_select(states, &[t])?;
        let logits = tape.matmul_t(h, false, reprs, true)?;
        let log_p = tape.log_softmax(logits, 1)?;
        let column = tape.reshape(log_p, &[set.candidates.len(), 1])?;
        picked.push(tape.index_select(column, &[set.answer])?);
    }
    let all = tape.concat(&picked, 0)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Loss of `sample` with dropout off.
pub fn evaluate_loss(model: &Tgnn, sample: &TrainingSample, catalog: &Catalog) -> Result<f64, TrainingError> {
    let mut tape = Tape::inference(model.params());
    let loss = sequence_loss(&mut tape, model, sample, catalog, &mut Mode::Eval)?;
    Ok(tape.value(loss)[0])
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
    TimeBudget,
    NonFiniteLoss,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters from the epoch with the best validation loss.
    pub model: Tgnn,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of `model`; 0 when no epoch finished.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

fn sum_into(acc: &mut [Vec<f64>], model: &Tgnn, tape_grads: &Gradients) {
    for id in model.params().ids() {
        if let Some(g) = tape_grads.param(id) {
            for (a, b) in acc[id.index()].iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Mean held-out loss over fixed samples (dropout off).
pub fn mean_loss(model: &Tgnn, samples: &[TrainingSample], catalog: &Catalog) -> Result<f64, TrainingError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| evaluate_loss(model, s, catalog))
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fixed validation samples: given order, candidates drawn once from a
/// seeded generator.
pub fn validation_samples(
    builder: &SampleBuilder,
    val: &Catalog,
    seed: u64,
) -> Result<Vec<TrainingSample>, TrainingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    val.outfits()
        .iter()
        .filter(|o| o.members.len() >= 2)
        .map(|o| builder.held_out_sample(&o.members, val, &mut rng))
        .collect()
}

/// Trains `model` on the outfits of `train` (the catalog `partitions` was
/// built from), monitoring the loss on `val`. When `val` holds no outfits
/// the training loss is monitored instead. Each epoch appends one JSON line
/// to `log` if given.
pub fn fit(
    model: Tgnn,
    train: &Catalog,
    val: &Catalog,
    partitions: &PartitionSet,
    config: &TrainerConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitOutcome, TrainingError> {
    config.validate()?;
    let started = Instant::now();
    let outfits: Vec<OutfitId> = train.outfit_ids().filter(|&o| train.outfit(o).members.len() >= 2).collect();
    if outfits.is_empty() {
        return Err(TrainingError::EmptyTrainingSet);
    }
    let builder = SampleBuilder::new(train, partitions, config.n_c, config.n_r)?;
    let val_samples = validation_samples(&builder, val, config.seed)?;

    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);

    let mut model = model;
    let mut adam = Adam::new(model.params(), config.learning_rate, config.weight_decay);
    let mut scheduler = PlateauScheduler::new(config.learning_rate, config.plateau_factor, config.plateau_patience)?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();
    let over_budget = || config.time_budget_secs > 0.0 && started.elapsed().as_secs_f64() >= config.time_budget_secs;

    let mut stop_reason = StopReason::MaxEpochs;
    'epochs: for epoch in 1..=config.max_epochs {
        let mut order = outfits.clone();
        order.shuffle(&mut sample_rng);
        let mut acc: Vec<Vec<f64>> = model.params().ids().map(|id| vec![0.0; model.params().get(id).len()]).collect();
        let mut pending = 0;
        let mut total = 0.0;
        let mut seen = 0;
        for &o in &order {
            let sample = builder.training_sample(o, train, &mut sample_rng)?;
            let tape = {
                let mut tape = Tape::new(model.params());
                let loss = sequence_loss(&mut tape, &model, &sample, train, &mut Mode::Train(&mut dropout_rng))?;
                let value = tape.value(loss)[0];
                if !value.is_finite() {
                    log::error!("non-finite training loss at epoch {epoch}; keeping the last good checkpoint");
                    stop_reason = StopReason::NonFiniteLoss;
                    break 'epochs;
                }
                total += value;
                seen += 1;
                tape.backward(loss)?
            };
            sum_into(&mut acc, &model, &tape);
            pending += 1;
            if pending == config.accumulate {
                if !apply(&mut adam, &mut model, &mut acc, pending)? {
                    stop_reason = StopReason::NonFiniteLoss;
                    break 'epochs;
                }
                pending = 0;
            }
            if over_budget() {
                break;
            }
        }
        if pending > 0 && !apply(&mut adam, &mut model, &mut acc, pending)? {
            stop_reason = StopReason::NonFiniteLoss;
            break;
        }
        let train_loss = total / seen as f64;
        let val_loss = if val_samples.is_empty() {
            train_loss
        } else {
            mean_loss(&model, &val_samples, val)?
        };
        if !val_loss.is_finite() {
            stop_reason = StopReason::NonFiniteLoss;
            break;
        }
        let improved = scheduler.is_improvement(val_loss);
        let lr = scheduler.observe(val_loss);
        adam.learning_rate = lr;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).expect("plain record"))?;
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.2e}");
        history.push(record);
        if improved {
            best = model.clone();
            best_epoch = epoch;
            best_val = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stopping_patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
        if over_budget() {
            stop_reason = StopReason::TimeBudget;
            break;
        }
    }
    Ok(FitOutcome {
        model: best,
        history,
        best_epoch,
        best_val_loss: best_val,
        stop_reason,
    })
}

/// One optimizer step on averaged gradients; `false` when a gradient was
/// not finite (parameters are left untouched).
fn apply(adam: &mut Adam, model: &mut Tgnn, acc: &mut [Vec<f64>], count: usize) -> Result<bool, TrainingError> {
    if count > 1 {
        let inv = 1.0 / count as f64;
        acc.iter_mut().flatten().for_each(|g| *g *= inv);
    }
    match adam.step_with(model.params_mut(), |id| Some(&acc[id.index()][..])) {
        Ok(()) => {}
        Err(AutodiffError::NonFinite(what)) => {
            log::error!("non-finite {what}; keeping the last good checkpoint");
            return Ok(false);
        }
        Err(e) => return Err(e.into()),
    }
    acc.iter_mut().flatten().for_each(|g| *g = 0.0);
    Ok(true)
}
