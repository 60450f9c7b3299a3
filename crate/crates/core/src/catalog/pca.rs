use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{parse_floats, write_floats};

#[derive(Debug, thiserror::Error)]
pub enum PcaError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("requested {requested} components but the rank budget is {budget}")]
    RankBudget { requested: usize, budget: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("ragged input: row {row} has length {found}, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("expected a vector of length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("SVD did not converge")]
    NoConvergence,
    #[error("pca checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear projection onto the leading principal directions of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `d_e x raw_dim`, row-major, orthonormal rows.
    components: Vec<f64>,
    /// Eigenvalues of the sample covariance (divisor `N - 1`) for the kept
    /// components.
    explained_variance: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
}

const FORMAT_TAG: &str = "tgnn-pca";
const FORMAT_VERSION: u32 = 1;

impl PcaModel {
    /// Fits `d_e` components to the rows of `data` via SVD of the centered
    /// matrix. Each component is signed so that its largest-magnitude entry
    /// is positive.
    pub fn fit<R: AsRef<[f64]>>(data: &[R], d_e: usize) -> Result<Self, PcaError> {
        let n = data.len();
        if n < 2 {
            return Err(PcaError::TooFewSamples(n));
        }
        let raw = data[0].as_ref().len();
        for (row, x) in data.iter().enumerate() {
            let x = x.as_ref();
            if x.len() != raw {
                return Err(PcaError::Ragged {
                    row,
                    expected: raw,
                    found: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(PcaError::NonFinite);
            }
        }
        let budget = n.min(raw);
        if d_e == 0 || d_e > budget {
            return Err(PcaError::RankBudget {
                requested: d_e,
                budget,
            });
        }
        let mut mean = vec![0.0; raw];
        for x in data {
            for (m, v) in mean.iter_mut().zip(x.as_ref()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, raw, |i, j| data[i].as_ref()[j] - mean[j]);
        let svd = centered
            .try_svd(false, true, f64::EPSILON, 0)
            .ok_or(PcaError::NoConvergence)?;
        let v_t = svd.v_t.as_ref().ok_or(PcaError::NoConvergence)?;
        let singular = &svd.singular_values;
        let mut order: Vec<usize> = (0..singular.len()).collect();
        order.sort_by(|&a, &b| singular[b].total_cmp(&singular[a]));

        let total: f64 = singular.iter().map(|s| s * s).sum();
        let mut components = Vec::with_capacity(d_e * raw);
        let mut explained_variance = Vec::with_capacity(d_e);
        let mut explained_variance_ratio = Vec::with_capacity(d_e);
        for &k in order.iter().take(d_e) {
            let mut row: Vec<f64> = v_t.row(k).iter().copied().collect();
            let pivot = row
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(0.0);
            if pivot < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
            components.extend(row);
            let s2 = singular[k] * singular[k];
            explained_variance.push(s2 / (n - 1) as f64);
            explained_variance_ratio.push(if total > 0.0 { s2 / total } else { 0.0 });
        }
        Ok(PcaModel {
            mean,
            components,
            explained_variance,
            explained_variance_ratio,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn d_e(&self) -> usize {
        self.explained_variance_ratio.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let raw = self.raw_dim();
        &self.components[k * raw..(k + 1) * raw]
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn explained_variance_ratio(&self) -> &[f64] {
        &self.explained_variance_ratio
    }

    /// `components · (x − mean)`.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, PcaError> {
        if x.len() != self.raw_dim() {
            return Err(PcaError::DimensionMismatch {
                expected: self.raw_dim(),
                found: x.len(),
            });
        }
        Ok((0..self.d_e())
            .map(|k| {
                self.component(k)
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(c, (v, m))| c * (v - m))
                    .sum()
            })
            .collect())
    }

    /// Maps projected coordinates back to the raw space (`mean + Cᵀ y`).
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>, PcaError> {
        if y.len() != self.d_e() {
            return Err(PcaError::DimensionMismatch {
                expected: self.d_e(),
                found: y.len(),
            });
        }
        let mut x = self.mean.clone();
        for (k, yk) in y.iter().enumerate() {
            for (xi, c) in x.iter_mut().zip(self.component(k)) {
                *xi += yk * c;
            }
        }
        Ok(x)
    }

    /// Structured-text checkpoint: a header with version, raw dim and `d_e`,
    /// then the mean, the component rows and the variance ratios.
    pub fn save(&self, path: &Path) -> Result<(), PcaError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{FORMAT_TAG}")?;
        writeln!(out, "version={FORMAT_VERSION}")?;
        writeln!(out, "raw_dim={}", self.raw_dim())?;
        writeln!(out, "d_e={}", self.d_e())?;
        let mut line = |label: &str, xs: &[f64]| -> std::io::Result<()> {
            write!(out, "{label}\t")?;
            write_floats(&mut out, xs)?;
            writeln!(out)
        };
        line("mean", &self.mean)?;
        for k in 0..self.d_e() {
            line("component", self.component(k))?;
        }
        line("explained_variance", &self.explained_variance)?;
        line("explained_variance_ratio", &self.explained_variance_ratio)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PcaError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| PcaError::Format(format!("missing {what}")))
        };
        if next("header")? != FORMAT_TAG {
            return Err(PcaError::Format("not a PCA checkpoint".into()));
        }
        let header = |line: &str, key: &str| -> Result<usize, PcaError> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PcaError::Format(format!("expected {key}=..., got {line:?}")))
        };
        let version = header(next("version")?, "version")?;
        if version != FORMAT_VERSION as usize {
            return Err(PcaError::Format(format!("unsupported version {version}")));
        }
        let raw_dim = header(next("raw_dim")?, "raw_dim")?;
        let d_e = header(next("d_e")?, "d_e")?;
        let mut field = |label: &str, len: usize| -> Result<Vec<f64>, PcaError> {
            let line = next(label)?;
            let values = line
                .strip_prefix(label)
                .and_then(|r| r.strip_prefix('\t'))
                .ok_or_else(|| PcaError::Format(format!("expected {label} line")))?;
            let xs = parse_floats(values).map_err(PcaError::Format)?;
            if xs.len() != len {
                return Err(PcaError::Format(format!(
                    "{label}: expected {len} values, got {}",
                    xs.len()
                )));
            }
            Ok(xs)
        };
        let mean = field("mean", raw_dim)?;
        let mut components = Vec::with_capacity(d_e * raw_dim);
        for _ in 0..d_e {
            components.extend(field("component", raw_dim)?);
        }
        let explained_variance = field("explained_variance", d_e)?;
        let explained_variance_ratio = field("explained_variance_ratio", d_e)?;
        Ok(PcaModel {
            mean,
            components,
            explained_variance,
            explained_variance_ratio,
        })
    }
}
