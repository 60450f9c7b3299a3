use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use tgnn::catalog::{read_embeddings, Catalog, GarmentId, PcaModel};
use tgnn::config::{parse_key_values, ConfigError};
use tgnn::eval::{self, Episode, EvalConfig, EvalContext, FitbQuery, MetricReport, Task};
use tgnn::graph::{graph_stats, partition_org, ItemRelationGraph, OutfitRelationGraph, PartitionSet};
use tgnn::model::{Candidate, Tgnn};
use tgnn::synth::{generate_synthetic_catalog, split_outfits, SynthConfig};
use tgnn::training::{fit, RunConfig, SampleBuilder};

use crate::manifest::{read, RunManifest};
use crate::{CatalogArgs, Cli, CliError, Command, Common, Result};

pub fn run(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { split, disjoint } => synth(common, split, *disjoint),
        Command::Ingest { catalog } => ingest(common, catalog),
        Command::Pca { embeddings, dim, model } => pca(common, embeddings, *dim, model.as_deref()),
        Command::GraphStats { catalog } => stats(common, catalog),
        Command::Partition { catalog, phi } => partition(common, catalog, *phi),
        Command::Train {
            catalog,
            val_outfits,
            partitions,
            phi,
            init_only,
        } => train(common, catalog, val_outfits.as_deref(), partitions.as_deref(), *phi, *init_only),
        Command::Eval {
            task,
            model,
            train_outfits,
            test_outfits,
            embeddings,
            partitions,
            fitb_queries,
            seed_len,
            no_stop,
            cp_distractors,
            episodes,
        } => {
            let files = EvalFiles {
                model,
                train_outfits,
                test_outfits,
                embeddings,
                partitions,
                fitb_queries: fitb_queries.as_deref(),
            };
            let config = EvalConfig {
                seed: common.seed.unwrap_or(0),
                seed_len: *seed_len,
                include_stop: !no_stop,
                cp_distractors: *cp_distractors,
                ..EvalConfig::default()
            };
            evaluate(common, (*task).into(), &files, config, *episodes)
        }
        Command::Generate {
            model,
            catalog,
            partitions,
            seed_ids,
        } => generate(common, model, catalog, partitions, seed_ids),
    }
}

/// Applies the config file and then `--set` entries through `set`, which
/// returns `false` for keys it does not know.
fn apply_config(
    common: &Common,
    mut set: impl FnMut(&str, &str) -> std::result::Result<bool, ConfigError>,
    fallback: Option<&Path>,
) -> Result<()> {
    let file = common.config.as_deref().or(fallback.filter(|p| p.exists()));
    let mut entries = match file {
        Some(path) => parse_key_values(&read(path)?)?,
        None => Vec::new(),
    };
    for item in &common.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in entries {
        if !set(&k, &v)? {
            return Err(ConfigError::UnknownKey(k).into());
        }
    }
    Ok(())
}

fn config_inputs(manifest: &mut RunManifest, common: &Common, fallback: Option<&Path>) -> Result<()> {
    if let Some(path) = common.config.as_deref().or(fallback.filter(|p| p.exists())) {
        manifest.input(path)?;
    }
    Ok(())
}

fn run_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    apply_config(
        common,
        |k, v| match cfg.set(k, v) {
            Ok(()) => Ok(true),
            Err(ConfigError::UnknownKey(_)) => Ok(false),
            Err(e) => Err(e),
        },
        fallback,
    )?;
    if let Some(seed) = common.seed {
        cfg.trainer.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_catalog(manifest: &mut RunManifest, outfits: &Path, embeddings: &Path) -> Result<Catalog> {
    manifest.input(outfits)?;
    manifest.input(embeddings)?;
    Ok(Catalog::load(outfits, embeddings)?)
}

fn load_partitions(manifest: &mut RunManifest, path: &Path, catalog: &Catalog) -> Result<PartitionSet> {
    manifest.input(path)?;
    Ok(PartitionSet::from_text(&read(path)?, catalog)?)
}

fn check_dim(catalog: &Catalog, cfg: &RunConfig) -> Result<()> {
    if catalog.dim() != cfg.model.d_e {
        return Err(CliError::Usage(format!(
            "embeddings have {} dimensions but d_e = {}; project them with `pca` or set d_e",
            catalog.dim(),
            cfg.model.d_e
        )));
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn synth(common: &Common, split: &[f64], disjoint: bool) -> Result<()> {
    let mut manifest = RunManifest::start("synth", &common.out_dir)?;
    config_inputs(&mut manifest, common, None)?;
    let mut cfg = SynthConfig::default();
    apply_config(common, |k, v| cfg.set(k, v), None)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let &[train_frac, val_frac] = split else {
        return Err(CliError::Usage(format!("--split expects TRAIN,VAL, got {} values", split.len())));
    };
    if !(train_frac >= 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
        return Err(CliError::Usage(format!("bad split fractions {train_frac},{val_frac}")));
    }
    let text = cfg.to_text();
    manifest.config(&format!("{text}split = {train_frac},{val_frac}\ndisjoint = {disjoint}\n"));
    manifest.seed = Some(cfg.seed);
    let (catalog, oracle) = generate_synthetic_catalog(&cfg)?;
    catalog.write_embeddings(&manifest.output("embeddings.tsv"))?;
    catalog.write_outfits(&manifest.output("outfits.tsv"))?;
    oracle.write(&manifest.output("oracle.tsv"))?;
    manifest.write_output("synth_config.txt", &text)?;
    let parts = split_outfits(&catalog, (train_frac, val_frac), disjoint, cfg.seed);
    for (name, ids) in [("train.tsv", &parts.train), ("val.tsv", &parts.val), ("test.tsv", &parts.test)] {
        catalog.with_outfits(ids).write_outfits(&manifest.output(name))?;
    }
    log::info!(
        "{} garments, {} outfits: {} train, {} val, {} test, {} dropped",
        catalog.garments().len(),
        catalog.outfits().len(),
        parts.train.len(),
        parts.val.len(),
        parts.test.len(),
        parts.dropped.len()
    );
    manifest.finish("synth.manifest.json")
}

fn ingest(common: &Common, args: &CatalogArgs) -> Result<()> {
    let mut manifest = RunManifest::start("ingest", &common.out_dir)?;
    manifest.config("");
    let catalog = load_catalog(&mut manifest, &args.outfits, &args.embeddings)?;
    catalog.write_outfits(&manifest.output("outfits.tsv"))?;
    catalog.write_embeddings(&manifest.output("embeddings.tsv"))?;
    let summary = json!({
        "garments": catalog.garments().len(),
        "outfits": catalog.outfits().len(),
        "categories": catalog.categories().len(),
        "dim": catalog.dim(),
        "used_garments": catalog.used_garments().len(),
    });
    manifest.write_output("catalog.json", &to_json(&summary)?)?;
    manifest.finish("ingest.manifest.json")
}

fn pca(common: &Common, embeddings: &Path, dim: usize, model: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("pca", &common.out_dir)?;
    manifest.config(&format!("dim = {dim}\n"));
    manifest.input(embeddings)?;
    let records = read_embeddings(embeddings)?;
    let pca = match model {
        Some(path) => {
            manifest.input(path)?;
            PcaModel::load(path)?
        }
        None => {
            let rows: Vec<&[f64]> = records.iter().map(|r| r.2.as_slice()).collect();
            let fitted = PcaModel::fit(&rows, dim)?;
            fitted.save(&manifest.output("pca.txt"))?;
            fitted
        }
    };
    let projected = records
        .into_iter()
        .map(|(key, category, x)| Ok((key, category, pca.transform(&x)?)))
        .collect::<std::result::Result<Vec<_>, tgnn::catalog::PcaError>>()?;
    Catalog::from_records(projected, Vec::new())?.write_embeddings(&manifest.output("embeddings.tsv"))?;
    let ratio: f64 = pca.explained_variance_ratio().iter().sum();
    log::info!("{} components keep {:.4} of the variance", pca.d_e(), ratio);
    manifest.finish("pca.manifest.json")
}

fn stats(common: &Common, args: &CatalogArgs) -> Result<()> {
    let mut manifest = RunManifest::start("graph-stats", &common.out_dir)?;
    manifest.config("");
    let catalog = load_catalog(&mut manifest, &args.outfits, &args.embeddings)?;
    let s = graph_stats(&ItemRelationGraph::build(&catalog));
    manifest.write_output("graph_stats.txt", &s.to_string())?;
    manifest.write_output("graph_stats.json", &to_json(&s)?)?;
    print!("{s}");
    manifest.finish("graph-stats.manifest.json")
}

fn partition(common: &Common, args: &CatalogArgs, phi: usize) -> Result<()> {
    let mut manifest = RunManifest::start("partition", &common.out_dir)?;
    let seed = common.seed.unwrap_or(0);
    manifest.config(&format!("phi = {phi}\n"));
    manifest.seed = Some(seed);
    let catalog = load_catalog(&mut manifest, &args.outfits, &args.embeddings)?;
    let parts = partition_org(&OutfitRelationGraph::build(&catalog), phi, seed)?;
    manifest.write_output("partitions.txt", &parts.to_text(&catalog))?;
    log::info!("{} partitions, edge cut {}", parts.len(), parts.edge_cut());
    manifest.finish("partition.manifest.json")
}

fn train(
    common: &Common,
    args: &CatalogArgs,
    val_outfits: Option<&Path>,
    partitions: Option<&Path>,
    phi: usize,
    init_only: bool,
) -> Result<()> {
    let mut manifest = RunManifest::start("train", &common.out_dir)?;
    config_inputs(&mut manifest, common, None)?;
    let cfg = run_config(common, None)?;
    let text = cfg.to_text();
    manifest.config(&format!("{text}phi = {phi}\ninit_only = {init_only}\n"));
    manifest.seed = Some(cfg.trainer.seed);
    let catalog = load_catalog(&mut manifest, &args.outfits, &args.embeddings)?;
    check_dim(&catalog, &cfg)?;
    let model = Tgnn::new(cfg.model.clone(), cfg.trainer.seed)?;
    manifest.write_output("run_config.txt", &text)?;
    if init_only {
        model.save(&manifest.output("model.ckpt"))?;
        return manifest.finish("train.manifest.json");
    }
    let val = match val_outfits {
        Some(path) => {
            manifest.input(path)?;
            Catalog::load(path, &args.embeddings)?
        }
        None => catalog.with_outfits(&[]),
    };
    let parts = match partitions {
        Some(path) => load_partitions(&mut manifest, path, &catalog)?,
        None => {
            let parts = partition_org(&OutfitRelationGraph::build(&catalog), phi, cfg.trainer.seed)?;
            manifest.write_output("partitions.txt", &parts.to_text(&catalog))?;
            parts
        }
    };
    let log_path = manifest.output("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|source| CliError::Io {
        path: log_path.clone(),
        source,
    })?;
    let outcome = fit(model, &catalog, &val, &parts, &cfg.trainer, Some(&mut log as &mut dyn Write))?;
    outcome.model.save(&manifest.output("model.ckpt"))?;
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "epochs": outcome.history.len(),
        "stop_reason": outcome.stop_reason,
    });
    manifest.write_output("train_summary.json", &to_json(&summary)?)?;
    log::info!(
        "stopped after {} epochs ({:?}); best epoch {} with loss {:.5}",
        outcome.history.len(),
        outcome.stop_reason,
        outcome.best_epoch,
        outcome.best_val_loss
    );
    manifest.finish("train.manifest.json")
}

struct EvalFiles<'a> {
    model: &'a Path,
    train_outfits: &'a Path,
    test_outfits: &'a Path,
    embeddings: &'a Path,
    partitions: &'a Path,
    fitb_queries: Option<&'a Path>,
}

fn sibling_config(model: &Path) -> PathBuf {
    model.with_file_name("run_config.txt")
}

fn load_model(manifest: &mut RunManifest, common: &Common, model: &Path) -> Result<(RunConfig, Tgnn)> {
    let fallback = sibling_config(model);
    config_inputs(manifest, common, Some(&fallback))?;
    let cfg = run_config(common, Some(&fallback))?;
    manifest.input(model)?;
    let tgnn = Tgnn::load(model, cfg.model.clone())?;
    Ok((cfg, tgnn))
}

/// `outfit<TAB>incomplete ids<TAB>four answer ids<TAB>correct index`.
fn read_fitb(path: &Path, catalog: &Catalog) -> Result<Vec<FitbQuery>> {
    let text = read(path)?;
    let malformed = |line: usize, reason: &str| {
        CliError::Usage(format!("{}:{line}: {reason}", path.display()))
    };
    let ids = |line: usize, field: &str| -> Result<Vec<GarmentId>> {
        field
            .split(',')
            .map(|k| catalog.garment_by_key(k.trim()).map_err(|e| malformed(line, &e.to_string())))
            .collect()
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let [outfit, incomplete, answers, correct] = fields[..] else {
            return Err(malformed(line, "expected 4 tab-separated fields"));
        };
        out.push(FitbQuery {
            outfit: outfit.to_string(),
            incomplete: ids(line, incomplete)?,
            answers: ids(line, answers)?,
            correct: correct.trim().parse().map_err(|_| malformed(line, "bad correct index"))?,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct StepRecord {
    prefix_len: usize,
    candidates: Vec<String>,
    answer: usize,
    probabilities: Vec<f64>,
    predicted: usize,
    correct: bool,
}

#[derive(Serialize)]
struct EpisodeRecord {
    task: Task,
    outfit: String,
    partition: usize,
    sequence: Vec<String>,
    steps: Vec<StepRecord>,
}

fn candidate_key(c: &Candidate, catalog: &Catalog) -> String {
    match c {
        Candidate::Garment(g) => catalog.garment(*g).key.clone(),
        Candidate::Stop => "<stop>".to_string(),
    }
}

fn episode_record(e: &Episode, catalog: &Catalog) -> EpisodeRecord {
    EpisodeRecord {
        task: e.spec.task,
        outfit: e.spec.outfit.clone(),
        partition: e.spec.partition,
        sequence: e.spec.sequence.iter().map(|g| catalog.garment(*g).key.clone()).collect(),
        steps: e
            .spec
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| StepRecord {
                prefix_len: s.prefix_len,
                candidates: s.candidates.iter().map(|c| candidate_key(c, catalog)).collect(),
                answer: s.answer,
                probabilities: e.probabilities[i].clone(),
                predicted: e.predicted[i],
                correct: e.correct[i],
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    task: Task,
    seed: u64,
    config: Vec<String>,
    metrics: &'a MetricReport,
}

fn evaluate(common: &Common, task: Task, files: &EvalFiles<'_>, mut config: EvalConfig, episodes: bool) -> Result<()> {
    let mut manifest = RunManifest::start("eval", &common.out_dir)?;
    let (cfg, model) = load_model(&mut manifest, common, files.model)?;
    config.n_c = cfg.trainer.n_c;
    config.n_r = cfg.trainer.n_r;
    let echo = format!(
        "{}task = {task}\nseed = {}\nseed_len = {}\ninclude_stop = {}\ncp_distractors = {}\n",
        cfg.to_text(),
        config.seed,
        config.seed_len,
        config.include_stop,
        config.cp_distractors
    );
    manifest.config(&echo);
    manifest.seed = Some(config.seed);
    let train = load_catalog(&mut manifest, files.train_outfits, files.embeddings)?;
    manifest.input(files.test_outfits)?;
    let test = Catalog::load(files.test_outfits, files.embeddings)?;
    check_dim(&train, &cfg)?;
    let parts = load_partitions(&mut manifest, files.partitions, &train)?;
    let builder = SampleBuilder::new(&train, &parts, config.n_c, config.n_r)?;
    let ctx = EvalContext {
        builder: &builder,
        catalog: &test,
    };
    let (report, scored) = match task {
        Task::Sip => eval::eval_sip(&model, &ctx, &config)?,
        Task::Fitb => match files.fitb_queries {
            Some(path) => {
                manifest.input(path)?;
                eval::eval_fitb(&model, &ctx, &read_fitb(path, &test)?, config.seed)?
            }
            None => eval::eval_fitb_generated(&model, &ctx, &config)?,
        },
        Task::Cp => eval::eval_cp(&model, &ctx, &config)?,
    };
    let out = EvalReport {
        task,
        seed: config.seed,
        config: echo.lines().map(str::to_string).collect(),
        metrics: &report,
    };
    manifest.write_output(&format!("report_{task}.json"), &to_json(&out)?)?;
    if episodes {
        let mut text = String::new();
        for e in &scored {
            text.push_str(&serde_json::to_string(&episode_record(e, &test))?);
            text.push('\n');
        }
        manifest.write_output(&format!("episodes_{task}.jsonl"), &text)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    manifest.finish(&format!("eval-{task}.manifest.json"))
}

fn generate(common: &Common, model: &Path, args: &CatalogArgs, partitions: &Path, seed_ids: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("generate", &common.out_dir)?;
    let (cfg, tgnn) = load_model(&mut manifest, common, model)?;
    manifest.config(&format!("{}seed_ids = {}\n", cfg.to_text(), seed_ids.join(",")));
    let catalog = load_catalog(&mut manifest, &args.outfits, &args.embeddings)?;
    check_dim(&catalog, &cfg)?;
    let parts = load_partitions(&mut manifest, partitions, &catalog)?;
    let seed = seed_ids
        .iter()
        .map(|k| catalog.garment_by_key(k))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let builder = SampleBuilder::new(&catalog, &parts, cfg.trainer.n_c, cfg.trainer.n_r)?;
    let p = builder.locate(&seed, &catalog)?;
    let graph = builder.held_out_graph(p, &seed);
    let pool: Vec<Candidate> = builder.partition_garments(p).iter().copied().map(Candidate::Garment).collect();
    let generation = tgnn.generate(&seed, &graph, &pool, &catalog)?;
    let key = |g: &GarmentId| catalog.garment(*g).key.clone();
    let ids: String = seed.iter().chain(&generation.garments).map(|g| key(g) + "\n").collect();
    manifest.write_output("generated.txt", &ids)?;
    let report = json!({
        "partition": p,
        "seed": seed.iter().map(key).collect::<Vec<_>>(),
        "garments": generation.garments.iter().map(key).collect::<Vec<_>>(),
        "stopped": generation.stopped,
        "steps": generation.steps.iter().map(|c| json!({
            "candidate": candidate_key(&c.candidate, &catalog),
            "probability": c.probability,
            "pool_size": c.pool_size,
        })).collect::<Vec<_>>(),
    });
    manifest.write_output("generation.json", &to_json(&report)?)?;
    print!("{ids}");
    manifest.finish("generate.manifest.json")
}
