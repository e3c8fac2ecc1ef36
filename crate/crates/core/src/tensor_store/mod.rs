//! Checkpoint storage: named tensors in a little-endian binary archive with a
//! JSON header.
//!
//! Layout on disk:
//!
//! ```text
//! [u64 LE header length N][N bytes UTF-8 JSON header][raw data region]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! (offsets relative to the start of the data region) plus an optional
//! `"__metadata__"` object of string pairs. This is the same layout that
//! common training frameworks export, so their checkpoints load as-is.

mod archive;
mod dtype;

use std::collections::BTreeMap;

use bytes::Bytes;

pub use archive::{
    read_archive, read_archive_file, validate_archive, validate_bytes, write_archive,
    write_archive_file, write_archive_to, DTypePolicy, ValidationReport, WriteOptions,
};
pub use dtype::{DType, UnknownDType};

/// Header key reserved for free-form metadata.
pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("truncated archive: {0}")]
    Truncated(String),
    #[error("malformed header JSON: {0}")]
    MalformedHeader(String),
    #[error("tensor {name:?}: unknown dtype {dtype:?}")]
    UnknownDType { name: String, dtype: String },
    #[error(
        "tensor {name:?}: out-of-bounds byte range [{begin}, {end}) in data region of {len} bytes"
    )]
    OutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        len: u64,
    },
    #[error("tensor {name:?}: overlapping byte range at offset {offset}")]
    Overlap { name: String, offset: u64 },
    #[error("tensor {name:?}: byte range [{begin}, {end}) holds {actual} bytes, numel x dtype size = {expected}")]
    SizeMismatch {
        name: String,
        begin: u64,
        end: u64,
        actual: u64,
        expected: u64,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("tensor {name:?}: {what}")]
    Invalid { name: String, what: String },
    #[error("tensor {name:?}: non-finite value at element {index} not allowed")]
    NonFinite { name: String, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// A dense row-major tensor with its raw little-endian storage.
///
/// Equality is bit-exact over dtype, shape and bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Bytes,
}

impl Tensor {
    /// Wraps raw little-endian bytes. Fails if the length does not match the shape.
    pub fn from_bytes(dtype: DType, shape: Vec<usize>, data: impl Into<Bytes>) -> Result<Self> {
        let data = data.into();
        let expected = numel(&shape) * dtype.size();
        if data.len() != expected {
            return Err(StoreError::Invalid {
                name: String::new(),
                what: format!(
                    "{} bytes for shape {:?} of {} (expected {})",
                    data.len(),
                    shape,
                    dtype,
                    expected
                ),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    /// Builds a tensor from `f64` values, rounding each onto `dtype`.
    ///
    /// # Panics
    /// If `values.len()` is not the shape's element count.
    pub fn from_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(
            values.len(),
            numel(&shape),
            "value count does not match shape {shape:?}"
        );
        let mut buf = vec![0u8; values.len() * dtype.size()];
        dtype.encode_into(values, &mut buf);
        Self {
            dtype,
            shape,
            data: Bytes::from(buf),
        }
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            dtype,
            shape,
            data: Bytes::from(vec![0u8; n * dtype.size()]),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    /// Raw little-endian storage.
    pub fn bytes(&self) -> &Bytes {
        &self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    /// Decodes all elements to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.numel()];
        self.dtype.decode_into(&self.data, &mut out);
        out
    }

    /// Decodes elements `start..start + out.len()` into `out`.
    pub fn read_f64(&self, start: usize, out: &mut [f64]) {
        let sz = self.dtype.size();
        self.dtype
            .decode_into(&self.data[start * sz..(start + out.len()) * sz], out);
    }

    /// Re-encodes the tensor in `dtype`. Returns a cheap clone when unchanged.
    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype {
            return self.clone();
        }
        Tensor::from_f64(dtype, self.shape.clone(), &self.to_f64_vec())
    }
}

/// Element count of a shape; the empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Checks a tensor name against the naming rules.
pub fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name == METADATA_KEY {
        return Err(StoreError::InvalidName(name.to_string()));
    }
    Ok(())
}

/// An ordered map of named tensors plus string metadata.
///
/// Immutable once built: mutation goes through the builder-style methods
/// that take `&mut self` before the checkpoint is shared.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, replacing any previous tensor of the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Option<Tensor>> {
        let name = name.into();
        check_name(&name)?;
        Ok(self.tensors.insert(name, tensor))
    }

    /// Builder form of [`Checkpoint::insert`].
    ///
    /// # Panics
    /// On an invalid name.
    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Self {
        self.insert(name, tensor).expect("invalid tensor name");
        self
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Tensors in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Total element count over all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Total size of the data region in bytes.
    pub fn byte_len(&self) -> usize {
        self.tensors.values().map(Tensor::byte_len).sum()
    }
}

impl FromIterator<(String, Tensor)> for Checkpoint {
    /// # Panics
    /// On an invalid name.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut ck = Checkpoint::new();
        for (name, t) in iter {
            ck.insert(name, t).expect("invalid tensor name");
        }
        ck
    }
}
