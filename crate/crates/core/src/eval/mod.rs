//! Seeded item prediction, fill-in-the-blank and compatibility prediction.
//!
//! Every task is reduced to [`EpisodeSpec`]s: an ordered garment sequence,
//! the partition used as encoder context, and a list of steps. Step `t`
//! conditions on `sequence[..prefix_len]` and asks which candidate comes
//! next. A [`Scorer`] turns a spec into per-step probabilities.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CategoryId, GarmentId};
use crate::graph::{GraphError, ItemRelationGraph};
use crate::model::{argmax, softmax, Candidate, ModelError, Tgnn};
use crate::synth::SynthOracle;
use crate::training::SampleBuilder;

#[cfg(test)]
mod tests;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no episodes to evaluate")]
    Empty,
    #[error("outfit {0} is too short to evaluate")]
    TooShort(String),
    #[error("malformed query {outfit}: {reason}")]
    Malformed { outfit: String, reason: String },
    #[error("auroc needs non-empty positive and negative scores")]
    EmptyScores,
    #[error("scorer returned {found} probabilities for {expected} candidates")]
    ScorerShape { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sip,
    Fitb,
    Cp,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Sip => "sip",
            Task::Fitb => "fitb",
            Task::Cp => "cp",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sip" => Ok(Task::Sip),
            "fitb" => Ok(Task::Fitb),
            "cp" => Ok(Task::Cp),
            other => Err(format!("unknown task {other:?} (expected sip, fitb or cp)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// Number of leading sequence garments the step conditions on.
    pub prefix_len: usize,
    pub candidates: Vec<Candidate>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub task: Task,
    pub outfit: String,
    /// Ground-truth garments in the order they are read.
    pub sequence: Vec<GarmentId>,
    pub partition: usize,
    pub steps: Vec<Step>,
}

impl EpisodeSpec {
    fn check(&self) -> Result<(), EvalError> {
        let bad = |reason: String| EvalError::Malformed {
            outfit: self.outfit.clone(),
            reason,
        };
        for s in &self.steps {
            if s.prefix_len == 0 || s.prefix_len > self.sequence.len() {
                return Err(bad(format!("prefix length {} out of range", s.prefix_len)));
            }
            if s.answer >= s.candidates.len() {
                return Err(bad("answer index outside the candidate set".into()));
            }
            let unique: HashSet<&Candidate> = s.candidates.iter().collect();
            if unique.len() != s.candidates.len() {
                return Err(bad("duplicate candidates".into()));
            }
        }
        Ok(())
    }
}

/// A scored episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub probabilities: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
    pub correct: Vec<bool>,
}

impl Episode {
    /// Mean probability assigned to the ground truth over all steps.
    pub fn mean_answer_probability(&self) -> f64 {
        let total: f64 = self
            .spec
            .steps
            .iter()
            .zip(&self.probabilities)
            .map(|(s, p)| p[s.answer])
            .sum();
        total / self.spec.steps.len().max(1) as f64
    }
}

/// Per-step candidate probabilities for an episode.
pub trait Scorer: Sync {
    fn score(&self, spec: &EpisodeSpec, graph: &ItemRelationGraph, catalog: &Catalog) -> Result<Vec<Vec<f64>>, EvalError>;
}

impl Scorer for Tgnn {
    fn score(&self, spec: &EpisodeSpec, graph: &ItemRelationGraph, catalog: &Catalog) -> Result<Vec<Vec<f64>>, EvalError> {
        let longest = spec.steps.iter().map(|s| s.prefix_len).max().unwrap_or(0);
        if longest == 0 {
            return Ok(Vec::new());
        }
        let encoded = self.encoder_output(graph, catalog)?;
        // Causal masking makes row t depend on the first t + 1 garments only.
        let states = self.decoder_states(&spec.sequence[..longest], &encoded, catalog)?;
        spec.steps
            .iter()
            .map(|s| Ok(self.score_candidates(states.row(s.prefix_len - 1), &s.candidates, catalog)?))
            .collect()
    }
}

/// Equal probability for every candidate. With first-index tie breaking and
/// shuffled candidate sets this is the random baseline.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformScorer;

impl Scorer for UniformScorer {
    fn score(&self, spec: &EpisodeSpec, _: &ItemRelationGraph, _: &Catalog) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(spec
            .steps
            .iter()
            .map(|s| vec![1.0 / s.candidates.len() as f64; s.candidates.len()])
            .collect())
    }
}

/// Test double that reads the ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct AnswerScorer;

impl Scorer for AnswerScorer {
    fn score(&self, spec: &EpisodeSpec, _: &ItemRelationGraph, _: &Catalog) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(spec
            .steps
            .iter()
            .map(|s| (0..s.candidates.len()).map(|i| if i == s.answer { 1.0 } else { 0.0 }).collect())
            .collect())
    }
}

/// Scores candidates with synthetic ground-truth labels: a garment is
/// plausible when it keeps the prefix single-style with distinct
/// categories. The stop token sits between plausible and implausible
/// garments since the labels carry no outfit length. Ties are broken by
/// candidate order, so on shuffled sets this estimates the accuracy a
/// label-aware scorer can reach.
#[derive(Clone, Debug)]
pub struct LabelScorer {
    labels: Vec<(usize, usize)>,
}

impl LabelScorer {
    pub fn new(oracle: &SynthOracle, catalog: &Catalog) -> Result<Self, crate::synth::SynthError> {
        Ok(LabelScorer {
            labels: oracle.labels_for(catalog)?,
        })
    }

    fn fits(&self, prefix: &[GarmentId], g: GarmentId) -> bool {
        let (style, category) = self.labels[g.index()];
        prefix.iter().all(|p| {
            let (s, c) = self.labels[p.index()];
            s == style && c != category
        })
    }
}

impl Scorer for LabelScorer {
    fn score(&self, spec: &EpisodeSpec, _: &ItemRelationGraph, _: &Catalog) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(spec
            .steps
            .iter()
            .map(|s| {
                let prefix = &spec.sequence[..s.prefix_len];
                let raw: Vec<f64> = s
                    .candidates
                    .iter()
                    .map(|c| match c {
                        Candidate::Garment(g) if self.fits(prefix, *g) => 1.0,
                        Candidate::Garment(_) => 0.0,
                        Candidate::Stop => 0.5,
                    })
                    .collect();
                softmax(&raw.iter().map(|x| x * 50.0).collect::<Vec<_>>())
            })
            .collect())
    }
}

/// Shared state for building and scoring episodes: the training partitions
/// and a catalog holding the evaluated outfits (garment ids must match the
/// training catalog's).
pub struct EvalContext<'a> {
    pub builder: &'a SampleBuilder,
    pub catalog: &'a Catalog,
}

impl EvalContext<'_> {
    /// Partition graph with every edge among `sequence` removed.
    pub fn graph(&self, spec: &EpisodeSpec) -> ItemRelationGraph {
        self.builder.held_out_graph(spec.partition, &spec.sequence)
    }

    fn members(sequence: &[GarmentId]) -> HashSet<GarmentId> {
        sequence.iter().copied().collect()
    }

    fn category(&self, g: GarmentId) -> CategoryId {
        self.catalog.category(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_c: usize,
    pub n_r: usize,
    /// Garments given up front in SIP.
    pub seed_len: usize,
    /// Whether SIP also asks for the stop token after the last garment.
    pub include_stop: bool,
    /// Random partition garments per CP step.
    pub cp_distractors: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            n_c: 3,
            n_r: 5,
            seed_len: 1,
            include_stop: true,
            cp_distractors: 3,
        }
    }
}

/// SIP episodes over `outfits` kept in their given order.
pub fn sip_episodes(
    ctx: &EvalContext<'_>,
    outfits: &[(String, Vec<GarmentId>)],
    config: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeSpec>, EvalError> {
    let mut out = Vec::with_capacity(outfits.len());
    for (key, sequence) in outfits {
        if sequence.len() < 2 {
            return Err(EvalError::TooShort(key.clone()));
        }
        let seed_len = config.seed_len.clamp(1, sequence.len() - 1);
        let partition = ctx.builder.locate(&sequence[..seed_len], ctx.catalog)?;
        let members = EvalContext::members(sequence);
        let last = if config.include_stop { sequence.len() } else { sequence.len() - 1 };
        let steps = (seed_len..=last)
            .map(|t| {
                let (answer, category) = match sequence.get(t) {
                    Some(&g) => (Candidate::Garment(g), Some(ctx.category(g))),
                    None => (Candidate::Stop, None),
                };
                let set = ctx
                    .builder
                    .candidate_set_sized(partition, answer, category, &members, (config.n_c, config.n_r), rng);
                Step {
                    prefix_len: t,
                    candidates: set.candidates,
                    answer: set.answer,
                }
            })
            .collect();
        out.push(EpisodeSpec {
            task: Task::Sip,
            outfit: key.clone(),
            sequence: sequence.clone(),
            partition,
            steps,
        });
    }
    Ok(out)
}

/// A fill-in-the-blank question.
#[derive(Clone, Debug, PartialEq)]
pub struct FitbQuery {
    pub outfit: String,
    pub incomplete: Vec<GarmentId>,
    pub answers: Vec<GarmentId>,
    pub correct: usize,
}

/// One query per outfit: the last garment is blanked and three wrong
/// answers are drawn from the garments of `catalog`'s outfits, preferring
/// the blank's category.
pub fn fitb_queries(catalog: &Catalog, rng: &mut ChaCha8Rng) -> Vec<FitbQuery> {
    let used = catalog.used_garments();
    let mut by_category: BTreeMap<CategoryId, Vec<GarmentId>> = BTreeMap::new();
    for &g in &used {
        by_category.entry(catalog.category(g)).or_default().push(g);
    }
    catalog
        .outfits()
        .iter()
        .filter(|o| o.members.len() >= 2)
        .map(|o| {
            let (blank, incomplete) = o.members.split_last().expect("non-empty");
            let members: HashSet<GarmentId> = o.members.iter().copied().collect();
            let same: Vec<GarmentId> = by_category[&catalog.category(*blank)]
                .iter()
                .copied()
                .filter(|g| !members.contains(g))
                .collect();
            let mut wrong: Vec<GarmentId> = same.choose_multiple(rng, 3).copied().collect();
            if wrong.len() < 3 {
                let taken: HashSet<GarmentId> = wrong.iter().copied().collect();
                let rest: Vec<GarmentId> = used
                    .iter()
                    .copied()
                    .filter(|g| !members.contains(g) && !taken.contains(g))
                    .collect();
                wrong.extend(rest.choose_multiple(rng, 3 - wrong.len()).copied());
            }
            let mut answers = wrong;
            answers.push(*blank);
            answers.shuffle(rng);
            let correct = answers.iter().position(|g| g == blank).expect("inserted");
            FitbQuery {
                outfit: o.key.clone(),
                incomplete: incomplete.to_vec(),
                answers,
                correct,
            }
        })
        .collect()
}

/// Single-step episodes for FITB queries; the partition is looked up from
/// the incomplete outfit.
pub fn fitb_episodes(ctx: &EvalContext<'_>, queries: &[FitbQuery]) -> Result<Vec<EpisodeSpec>, EvalError> {
    queries
        .iter()
        .map(|q| {
            let bad = |reason: &str| EvalError::Malformed {
                outfit: q.outfit.clone(),
                reason: reason.to_string(),
            };
            if q.answers.len() != 4 || q.correct >= 4 {
                return Err(bad("expected 4 answers and a correct index below 4"));
            }
            if q.incomplete.is_empty() {
                return Err(bad("empty incomplete outfit"));
            }
            let partition = ctx.builder.locate(&q.incomplete, ctx.catalog)?;
            let mut sequence = q.incomplete.clone();
            sequence.push(q.answers[q.correct]);
            let spec = EpisodeSpec {
                task: Task::Fitb,
                outfit: q.outfit.clone(),
                sequence,
                partition,
                steps: vec![Step {
                    prefix_len: q.incomplete.len(),
                    candidates: q.answers.iter().copied().map(Candidate::Garment).collect(),
                    answer: q.correct,
                }],
            };
            spec.check()?;
            Ok(spec)
        })
        .collect()
}

/// Random negative outfits, one per positive and of the same size: garments
/// drawn uniformly from `catalog`'s outfits with distinct categories where
/// possible.
pub fn cp_negatives(catalog: &Catalog, rng: &mut ChaCha8Rng) -> Vec<(String, Vec<GarmentId>)> {
    let used = catalog.used_garments();
    catalog
        .outfits()
        .iter()
        .map(|o| {
            let mut picked: Vec<GarmentId> = Vec::with_capacity(o.members.len());
            let mut categories = BTreeSet::new();
            let mut order = used.clone();
            order.shuffle(rng);
            for &g in &order {
                if picked.len() == o.members.len() {
                    break;
                }
                if categories.insert(catalog.category(g)) {
                    picked.push(g);
                }
            }
            for &g in &order {
                if picked.len() == o.members.len() {
                    break;
                }
                if !picked.contains(&g) {
                    picked.push(g);
                }
            }
            (format!("{}#neg", o.key), picked)
        })
        .collect()
}

/// CP episodes: a random permutation, a one-garment seed, and per step the
/// next garment among `cp_distractors` random partition garments.
pub fn cp_episodes(
    ctx: &EvalContext<'_>,
    outfits: &[(String, Vec<GarmentId>)],
    config: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeSpec>, EvalError> {
    outfits
        .iter()
        .map(|(key, members)| {
            if members.len() < 2 {
                return Err(EvalError::TooShort(key.clone()));
            }
            let mut sequence = members.clone();
            sequence.shuffle(rng);
            let partition = ctx.builder.locate(&sequence[..1], ctx.catalog)?;
            let exclude = EvalContext::members(&sequence);
            let steps = (1..sequence.len())
                .map(|t| {
                    let set = ctx.builder.candidate_set_sized(
                        partition,
                        Candidate::Garment(sequence[t]),
                        None,
                        &exclude,
                        (0, config.cp_distractors),
                        rng,
                    );
                    Step {
                        prefix_len: t,
                        candidates: set.candidates,
                        answer: set.answer,
                    }
                })
                .collect();
            Ok(EpisodeSpec {
                task: Task::Cp,
                outfit: key.clone(),
                sequence,
                partition,
                steps,
            })
        })
        .collect()
}

/// Scores every spec (in parallel, results in input order).
pub fn run_episodes<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    specs: Vec<EpisodeSpec>,
) -> Result<Vec<Episode>, EvalError> {
    specs
        .into_par_iter()
        .map(|spec| {
            spec.check()?;
            let graph = ctx.graph(&spec);
            let probabilities = scorer.score(&spec, &graph, ctx.catalog)?;
            if probabilities.len() != spec.steps.len() {
                return Err(EvalError::ScorerShape {
                    expected: spec.steps.len(),
                    found: probabilities.len(),
                });
            }
            let mut predicted = Vec::with_capacity(spec.steps.len());
            let mut correct = Vec::with_capacity(spec.steps.len());
            for (s, p) in spec.steps.iter().zip(&probabilities) {
                if p.len() != s.candidates.len() {
                    return Err(EvalError::ScorerShape {
                        expected: s.candidates.len(),
                        found: p.len(),
                    });
                }
                let best = argmax(p).expect("non-empty candidate set");
                predicted.push(best);
                correct.push(best == s.answer);
            }
            Ok(Episode {
                spec,
                probabilities,
                predicted,
                correct,
            })
        })
        .collect()
}

/// `(#{p > n} + 0.5 #{p = n}) / (|P| |N|)` over all positive/negative
/// pairs, computed by sorting.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64, EvalError> {
    if positive.is_empty() || negative.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut greater: u64 = 0;
    let mut ties: u64 = 0;
    for &p in positive {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        greater += below as u64;
        ties += (not_above - below) as u64;
    }
    let pairs = positive.len() as f64 * negative.len() as f64;
    Ok((greater as f64 + 0.5 * ties as f64) / pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub seed: u64,
    pub episodes: usize,
    pub steps: usize,
    /// Correct steps over all steps (SIP, FITB).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Episodes with every step correct (SIP).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outfit_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
}

/// Step and outfit accuracy over scored episodes.
pub fn accuracy_report(task: Task, seed: u64, episodes: &[Episode]) -> Result<MetricReport, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::Empty);
    }
    let steps: usize = episodes.iter().map(|e| e.correct.len()).sum();
    let hits: usize = episodes.iter().map(|e| e.correct.iter().filter(|&&c| c).count()).sum();
    let whole = episodes.iter().filter(|e| e.correct.iter().all(|&c| c)).count();
    Ok(MetricReport {
        task,
        seed,
        episodes: episodes.len(),
        steps,
        accuracy: Some(hits as f64 / steps.max(1) as f64),
        outfit_accuracy: (task == Task::Sip).then(|| whole as f64 / episodes.len() as f64),
        auroc: None,
    })
}

/// AUROC of mean ground-truth probability, positives against negatives.
pub fn cp_report(seed: u64, positives: &[Episode], negatives: &[Episode]) -> Result<MetricReport, EvalError> {
    let pos: Vec<f64> = positives.iter().map(Episode::mean_answer_probability).collect();
    let neg: Vec<f64> = negatives.iter().map(Episode::mean_answer_probability).collect();
    Ok(MetricReport {
        task: Task::Cp,
        seed,
        episodes: positives.len() + negatives.len(),
        steps: positives.iter().chain(negatives).map(|e| e.spec.steps.len()).sum(),
        accuracy: None,
        outfit_accuracy: None,
        auroc: Some(auroc(&pos, &neg)?),
    })
}

fn outfit_list(catalog: &Catalog) -> Vec<(String, Vec<GarmentId>)> {
    catalog
        .outfits()
        .iter()
        .map(|o| (o.key.clone(), o.members.clone()))
        .collect()
}

fn task_rng(seed: u64, task: Task) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match task {
        Task::Sip => 10,
        Task::Fitb => 11,
        Task::Cp => 12,
    });
    rng
}

/// SIP over every outfit of `ctx.catalog`.
pub fn eval_sip<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    config: &EvalConfig,
) -> Result<(MetricReport, Vec<Episode>), EvalError> {
    let outfits = outfit_list(ctx.catalog);
    if outfits.is_empty() {
        return Err(EvalError::Empty);
    }
    let specs = sip_episodes(ctx, &outfits, config, &mut task_rng(config.seed, Task::Sip))?;
    let episodes = run_episodes(scorer, ctx, specs)?;
    Ok((accuracy_report(Task::Sip, config.seed, &episodes)?, episodes))
}

/// FITB over `queries`.
pub fn eval_fitb<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    queries: &[FitbQuery],
    seed: u64,
) -> Result<(MetricReport, Vec<Episode>), EvalError> {
    if queries.is_empty() {
        return Err(EvalError::Empty);
    }
    let episodes = run_episodes(scorer, ctx, fitb_episodes(ctx, queries)?)?;
    Ok((accuracy_report(Task::Fitb, seed, &episodes)?, episodes))
}

/// FITB with one generated query per outfit of `ctx.catalog`.
pub fn eval_fitb_generated<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    config: &EvalConfig,
) -> Result<(MetricReport, Vec<Episode>), EvalError> {
    let queries = fitb_queries(ctx.catalog, &mut task_rng(config.seed, Task::Fitb));
    eval_fitb(scorer, ctx, &queries, config.seed)
}

/// CP with every outfit of `ctx.catalog` as a positive and one random
/// negative per positive.
pub fn eval_cp<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    config: &EvalConfig,
) -> Result<(MetricReport, Vec<Episode>), EvalError> {
    let positives = outfit_list(ctx.catalog);
    if positives.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rng = task_rng(config.seed, Task::Cp);
    let negatives = cp_negatives(ctx.catalog, &mut rng);
    let pos_specs = cp_episodes(ctx, &positives, config, &mut rng)?;
    let neg_specs = cp_episodes(ctx, &negatives, config, &mut rng)?;
    let pos = run_episodes(scorer, ctx, pos_specs)?;
    let neg = run_episodes(scorer, ctx, neg_specs)?;
    let report = cp_report(config.seed, &pos, &neg)?;
    Ok((report, pos.into_iter().chain(neg).collect()))
}
