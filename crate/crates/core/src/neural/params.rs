//! Named parameter storage, initialization and the checkpoint container.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::optim::OptimizerState;

/// Parameters keyed by dotted path (`text.layer0.attn.wq`), kept sorted so
/// serialization order is stable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound = "T: Scalar")]
pub struct ParamStore<T: Scalar>(BTreeMap<String, ArrayD<T>>);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.0.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<T>> {
        self.0.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.0.values().map(ArrayD::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|e| U::of(e.as_f64()))))
                .collect(),
        )
    }
}

impl<T: Scalar> FromIterator<(String, ArrayD<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, ArrayD<T>)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> ArrayD<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(normal.sample(rng)))
}

/// Normal draws with standard deviation `sqrt(gain / fan_in)`.
pub fn fan_in_normal<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> ArrayD<T> {
    normal(shape, (gain / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::ones(IxDyn(shape))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter container; optionally carries optimizer state so
/// training can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T: Scalar> {
    pub version: u32,
    pub scalar: String,
    pub params: ParamStore<T>,
    #[serde(default)]
    pub buffers: ParamStore<T>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(params: ParamStore<T>, buffers: ParamStore<T>, optimizer: Option<OptimizerState<T>>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            params,
            buffers,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        check_header(&bytes, CHECKPOINT_VERSION, T::NAME)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
    }
}

/// Pretty JSON with a trailing newline, written atomically through a sibling temp file.
pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Check `version` and `scalar` before a full decode so mismatches get a
/// precise message rather than a serde one.
pub(crate) fn check_header(bytes: &[u8], version: u32, scalar: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Header {
        version: u32,
        scalar: String,
    }
    let header: Header = serde_json::from_slice(bytes).map_err(|e| Error::Load(format!("corrupt file: {e}")))?;
    if header.version != version {
        return Err(Error::Load(format!(
            "version mismatch: file has {}, expected {version}",
            header.version
        )));
    }
    if header.scalar != scalar {
        return Err(Error::Load(format!(
            "scalar mismatch: file holds {}, expected {scalar}",
            header.scalar
        )));
    }
    Ok(())
}
