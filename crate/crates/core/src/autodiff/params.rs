use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AutodiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

const CHECKPOINT_MAGIC: &str = "tgnn-params";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Writes a versioned checkpoint: a text header followed by, for each
    /// parameter, a `name<TAB>d0,d1,...` line and its little-endian payload.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<(), AutodiffError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "version={CHECKPOINT_VERSION}")?;
        writeln!(out, "config_hash={config_hash}")?;
        writeln!(out, "count={}", self.tensors.len())?;
        for (name, tensor) in self.names.iter().zip(&self.tensors) {
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "{name}\t{}", dims.join(","))?;
            for x in tensor.data() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`]. Rejects files whose
    /// config hash differs from `expected_hash`.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self, AutodiffError> {
        let mut input = BufReader::new(File::open(path)?);
        let magic = read_header_line(&mut input)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(AutodiffError::Checkpoint(format!(
                "not a parameter checkpoint (header {magic:?})"
            )));
        }
        let version: u32 = parse_field(&read_header_line(&mut input)?, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hash: String = parse_field(&read_header_line(&mut input)?, "config_hash")?;
        if hash != expected_hash {
            return Err(AutodiffError::ConfigHashMismatch {
                expected: expected_hash.to_string(),
                found: hash,
            });
        }
        let count: usize = parse_field(&read_header_line(&mut input)?, "count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let line = read_header_line(&mut input)?;
            let (name, dims) = line
                .split_once('\t')
                .ok_or_else(|| AutodiffError::Checkpoint(format!("bad entry line {line:?}")))?;
            let shape = if dims.is_empty() {
                vec![]
            } else {
                dims.split(',')
                    .map(|d| {
                        d.parse::<usize>()
                            .map_err(|_| AutodiffError::Checkpoint(format!("bad dim {d:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            };
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; len * 8];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

fn read_header_line(input: &mut impl BufRead) -> Result<String, AutodiffError> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(AutodiffError::Checkpoint("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn parse_field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T, AutodiffError> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| AutodiffError::Checkpoint(format!("expected {key}=..., got {line:?}")))
}
