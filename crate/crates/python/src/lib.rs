use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgnn::catalog::{self as cat, GarmentId, OutfitId, PcaModel};
use tgnn::eval::{self, EvalConfig, EvalContext, MetricReport};
use tgnn::graph::{graph_stats, partition_org, ItemRelationGraph, OutfitRelationGraph, PartitionSet};
use tgnn::model::{Candidate, TgnnConfig};
use tgnn::synth::{self, SynthConfig};
use tgnn::training::{self, RunConfig, SampleBuilder, TrainerConfig};

create_exception!(pytgnn, TgnnError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    TgnnError::new_err(e.to_string())
}

/// Applies `{key: value}` entries through a `key = value` setter.
fn apply(
    entries: Option<&Bound<'_, PyDict>>,
    mut set: impl FnMut(&str, &str) -> Result<(), String>,
) -> PyResult<()> {
    let Some(entries) = entries else {
        return Ok(());
    };
    for (k, v) in entries.iter() {
        let key: String = k.extract()?;
        let value = v.str()?.to_string();
        let value = match value.as_str() {
            "True" => "true".to_string(),
            "False" => "false".to_string(),
            _ => value,
        };
        set(&key, &value).map_err(TgnnError::new_err)?;
    }
    Ok(())
}

fn run_config(entries: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    apply(entries, |k, v| cfg.set(k, v).map_err(|e| e.to_string()))?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Garments, categories and outfits.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Catalog {
    inner: cat::Catalog,
}

impl Catalog {
    fn ids(&self, keys: &[String]) -> PyResult<Vec<GarmentId>> {
        keys.iter()
            .map(|k| self.inner.garment_by_key(k).map_err(err))
            .collect()
    }

    fn key(&self, g: GarmentId) -> String {
        self.inner.garment(g).key.clone()
    }
}

#[pymethods]
impl Catalog {
    #[staticmethod]
    fn load(outfits: PathBuf, embeddings: PathBuf) -> PyResult<Self> {
        Ok(Catalog {
            inner: cat::Catalog::load(&outfits, &embeddings).map_err(err)?,
        })
    }

    /// Builds a catalog from `(key, category, embedding)` garments and
    /// `(key, member keys)` outfits.
    #[staticmethod]
    fn from_records(garments: Vec<(String, String, Vec<f64>)>, outfits: Vec<(String, Vec<String>)>) -> PyResult<Self> {
        Ok(Catalog {
            inner: cat::Catalog::from_records(garments, outfits).map_err(err)?,
        })
    }

    fn write(&self, outfits: PathBuf, embeddings: PathBuf) -> PyResult<()> {
        self.inner.write_outfits(&outfits).map_err(err)?;
        self.inner.write_embeddings(&embeddings).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn garment_keys(&self) -> Vec<String> {
        self.inner.garments().iter().map(|g| g.key.clone()).collect()
    }

    fn outfit_keys(&self) -> Vec<String> {
        self.inner.outfits().iter().map(|o| o.key.clone()).collect()
    }

    fn outfit(&self, key: &str) -> PyResult<Vec<String>> {
        let o = self.inner.outfit_by_key(key).map_err(err)?;
        Ok(self.inner.outfit(o).members.iter().map(|&g| self.key(g)).collect())
    }

    fn category(&self, garment: &str) -> PyResult<String> {
        let g = self.inner.garment_by_key(garment).map_err(err)?;
        Ok(self.inner.category_name(self.inner.category(g)).to_string())
    }

    fn embedding(&self, garment: &str) -> PyResult<Vec<f64>> {
        let g = self.inner.garment_by_key(garment).map_err(err)?;
        Ok(self.inner.embedding(g).to_vec())
    }

    /// Same garments restricted to the named outfits.
    fn subset(&self, outfit_keys: Vec<String>) -> PyResult<Self> {
        let ids = outfit_keys
            .iter()
            .map(|k| self.inner.outfit_by_key(k).map_err(err))
            .collect::<PyResult<Vec<OutfitId>>>()?;
        Ok(Catalog {
            inner: self.inner.with_outfits(&ids),
        })
    }

    /// Item relation graph statistics as a dict.
    fn graph_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = graph_stats(&ItemRelationGraph::build(&self.inner));
        let d = PyDict::new(py);
        d.set_item("nodes", s.node_count)?;
        d.set_item("edges", s.edge_count)?;
        d.set_item("avg_degree", s.avg_degree)?;
        d.set_item("median_degree", s.median_degree)?;
        d.set_item("connected_components", s.connected_components)?;
        d.set_item("transitivity", s.transitivity)?;
        d.set_item("avg_clustering_coeff", s.avg_clustering_coeff)?;
        Ok(d)
    }

    fn __len__(&self) -> usize {
        self.inner.outfits().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Catalog(garments={}, outfits={}, dim={})",
            self.inner.garments().len(),
            self.inner.outfits().len(),
            self.inner.dim()
        )
    }
}

/// Synthetic catalog plus `{garment key: (style, category)}` labels.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn synthetic_catalog(config: Option<&Bound<'_, PyDict>>) -> PyResult<(Catalog, HashMap<String, (usize, usize)>)> {
    let mut cfg = SynthConfig::default();
    apply(config, |k, v| match cfg.set(k, v) {
        Ok(true) => Ok(()),
        Ok(false) => Err(format!("unknown synth key {k:?}")),
        Err(e) => Err(e.to_string()),
    })?;
    let (catalog, oracle) = synth::generate_synthetic_catalog(&cfg).map_err(err)?;
    let labels = catalog
        .garments()
        .iter()
        .filter_map(|g| oracle.label(&g.key).map(|l| (g.key.clone(), l)))
        .collect();
    Ok((Catalog { inner: catalog }, labels))
}

/// Seeded `(train, val, test)` outfit key lists.
#[pyfunction]
#[pyo3(signature = (catalog, train_fraction=0.8, val_fraction=0.1, disjoint=false, seed=0))]
fn split_outfits(
    catalog: &Catalog,
    train_fraction: f64,
    val_fraction: f64,
    disjoint: bool,
    seed: u64,
) -> (Vec<String>, Vec<String>, Vec<String>) {
    let s = synth::split_outfits(&catalog.inner, (train_fraction, val_fraction), disjoint, seed);
    let keys = |ids: &[OutfitId]| ids.iter().map(|&o| catalog.inner.outfit(o).key.clone()).collect();
    (keys(&s.train), keys(&s.val), keys(&s.test))
}

/// Partitioned outfit relation graph of one catalog.
#[pyclass(frozen)]
struct Partitions {
    inner: PartitionSet,
    catalog: cat::Catalog,
}

#[pymethods]
impl Partitions {
    #[staticmethod]
    #[pyo3(signature = (catalog, phi=50, seed=0))]
    fn build(catalog: &Catalog, phi: usize, seed: u64) -> PyResult<Self> {
        let inner = partition_org(&OutfitRelationGraph::build(&catalog.inner), phi, seed).map_err(err)?;
        Ok(Partitions {
            inner,
            catalog: catalog.inner.clone(),
        })
    }

    #[staticmethod]
    fn from_text(text: &str, catalog: &Catalog) -> PyResult<Self> {
        Ok(Partitions {
            inner: PartitionSet::from_text(text, &catalog.inner).map_err(err)?,
            catalog: catalog.inner.clone(),
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text(&self.catalog)
    }

    /// Outfit keys per partition.
    fn members(&self) -> Vec<Vec<String>> {
        self.inner
            .partitions()
            .iter()
            .map(|p| p.iter().map(|&o| self.catalog.outfit(o).key.clone()).collect())
            .collect()
    }

    #[getter]
    fn edge_cut(&self) -> usize {
        self.inner.edge_cut()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(frozen)]
struct Pca {
    inner: PcaModel,
}

#[pymethods]
impl Pca {
    #[staticmethod]
    fn fit(rows: Vec<Vec<f64>>, d_e: usize) -> PyResult<Self> {
        Ok(Pca {
            inner: PcaModel::fit(&rows, d_e).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Pca {
            inner: PcaModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn transform(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.transform(&x).map_err(err)
    }

    #[getter]
    fn explained_variance_ratio(&self) -> Vec<f64> {
        self.inner.explained_variance_ratio().to_vec()
    }
}

/// A TGNN model with its run configuration (model and trainer keys).
#[pyclass]
struct Model {
    inner: tgnn::model::Tgnn,
    config: RunConfig,
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("task", r.task.to_string())?;
    d.set_item("seed", r.seed)?;
    d.set_item("episodes", r.episodes)?;
    d.set_item("steps", r.steps)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("outfit_accuracy", r.outfit_accuracy)?;
    d.set_item("auroc", r.auroc)?;
    Ok(d)
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let config = run_config(config)?;
        Ok(Model {
            inner: tgnn::model::Tgnn::new(config.model.clone(), seed).map_err(err)?,
            config,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let config = run_config(config)?;
        Ok(Model {
            inner: tgnn::model::Tgnn::load(&path, config.model.clone()).map_err(err)?,
            config,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// `key = value` text of the run configuration.
    fn config_text(&self) -> String {
        self.config.to_text()
    }

    /// Trains in place and returns the per-epoch history.
    #[pyo3(signature = (train, val, partitions, trainer=None))]
    fn fit(
        &mut self,
        py: Python<'_>,
        train: &Catalog,
        val: &Catalog,
        partitions: &Partitions,
        trainer: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let mut cfg = self.config.trainer.clone();
        apply(trainer, |k, v| match cfg.set(k, v) {
            Ok(true) => Ok(()),
            Ok(false) => Err(format!("unknown trainer key {k:?}")),
            Err(e) => Err(e.to_string()),
        })?;
        let model = self.inner.clone();
        let outcome = py
            .detach(|| training::fit(model, &train.inner, &val.inner, &partitions.inner, &cfg, None))
            .map_err(err)?;
        self.inner = outcome.model;
        self.config.trainer = cfg;
        Ok(outcome
            .history
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.val_loss, r.lr))
            .collect())
    }

    /// Loss of one training sample drawn for `outfit` with `seed`.
    fn sample_loss(&self, outfit: &str, catalog: &Catalog, partitions: &Partitions, seed: u64) -> PyResult<f64> {
        let o = catalog.inner.outfit_by_key(outfit).map_err(err)?;
        let trainer: &TrainerConfig = &self.config.trainer;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = training::build_training_sample(o, &partitions.inner, &catalog.inner, trainer, &mut rng)
            .map_err(err)?;
        training::evaluate_loss(&self.inner, &sample, &catalog.inner).map_err(err)
    }

    /// Next-garment probabilities for `candidates` (use `None` for the stop
    /// token) after reading `prefix`, with the located training partition
    /// as context.
    fn score(
        &self,
        prefix: Vec<String>,
        candidates: Vec<Option<String>>,
        catalog: &Catalog,
        partitions: &Partitions,
    ) -> PyResult<Vec<f64>> {
        let prefix = catalog.ids(&prefix)?;
        let candidates = candidates
            .iter()
            .map(|c| match c {
                Some(k) => catalog.inner.garment_by_key(k).map(Candidate::Garment).map_err(err),
                None => Ok(Candidate::Stop),
            })
            .collect::<PyResult<Vec<_>>>()?;
        let builder = self.builder(&partitions.catalog, partitions)?;
        let p = builder.locate(&prefix, &catalog.inner).map_err(err)?;
        let graph = builder.held_out_graph(p, &prefix);
        let encoded = self.inner.encoder_output(&graph, &catalog.inner).map_err(err)?;
        let h = self.inner.decode_step(&prefix, &encoded, &catalog.inner).map_err(err)?;
        self.inner
            .score_candidates(&h, &candidates, &catalog.inner)
            .map_err(err)
    }

    /// Generates an outfit (seed first) from seed garment keys; the pool is
    /// the located partition of `partitions`.
    fn generate(&self, seed: Vec<String>, catalog: &Catalog, partitions: &Partitions) -> PyResult<Vec<String>> {
        let seed = catalog.ids(&seed)?;
        let builder = self.builder(&partitions.catalog, partitions)?;
        let p = builder.locate(&seed, &catalog.inner).map_err(err)?;
        let graph = builder.held_out_graph(p, &seed);
        let pool: Vec<Candidate> = builder
            .partition_garments(p)
            .iter()
            .copied()
            .map(Candidate::Garment)
            .collect();
        let generation = self
            .inner
            .generate(&seed, &graph, &pool, &catalog.inner)
            .map_err(err)?;
        Ok(seed.iter().chain(&generation.garments).map(|&g| catalog.key(g)).collect())
    }

    /// Evaluates on the outfits of `test`; `task` is "sip", "fitb" or "cp".
    #[pyo3(signature = (task, train, test, partitions, seed=0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        task: &str,
        train: &Catalog,
        test: &Catalog,
        partitions: &Partitions,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let task: eval::Task = task.parse().map_err(TgnnError::new_err)?;
        let builder = self.builder(&train.inner, partitions)?;
        let config = EvalConfig {
            seed,
            n_c: self.config.trainer.n_c,
            n_r: self.config.trainer.n_r,
            ..EvalConfig::default()
        };
        let ctx = EvalContext {
            builder: &builder,
            catalog: &test.inner,
        };
        let model = &self.inner;
        let report = py
            .detach(|| match task {
                eval::Task::Sip => eval::eval_sip(model, &ctx, &config),
                eval::Task::Fitb => eval::eval_fitb_generated(model, &ctx, &config),
                eval::Task::Cp => eval::eval_cp(model, &ctx, &config),
            })
            .map_err(err)?
            .0;
        report_dict(py, &report)
    }

    fn __repr__(&self) -> String {
        let m: &TgnnConfig = &self.config.model;
        format!(
            "Model(d_e={}, d_m={}, heads={}, k_enc={}, k_dec={})",
            m.d_e, m.d_m, m.heads, m.k_enc, m.k_dec
        )
    }
}

impl Model {
    fn builder(&self, train: &cat::Catalog, partitions: &Partitions) -> PyResult<SampleBuilder> {
        SampleBuilder::new(train, &partitions.inner, self.config.trainer.n_c, self.config.trainer.n_r).map_err(err)
    }
}

#[pyfunction]
fn auroc(positive: Vec<f64>, negative: Vec<f64>) -> PyResult<f64> {
    eval::auroc(&positive, &negative).map_err(err)
}

#[pymodule]
fn pytgnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TgnnError", m.py().get_type::<TgnnError>())?;
    m.add_class::<Catalog>()?;
    m.add_class::<Partitions>()?;
    m.add_class::<Pca>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synthetic_catalog, m)?)?;
    m.add_function(wrap_pyfunction!(split_outfits, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    Ok(())
}
