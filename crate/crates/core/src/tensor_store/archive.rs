use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use bytes::Bytes;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::{Checkpoint, DType, StoreError, Tensor, METADATA_KEY};

/// Elements converted per chunk when casting during a write.
const CAST_CHUNK: usize = 1 << 14;

/// How tensor dtypes are treated on write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DTypePolicy {
    #[default]
    Keep,
    Cast(DType),
}

impl DTypePolicy {
    pub fn target(self, source: DType) -> DType {
        match self {
            DTypePolicy::Keep => source,
            DTypePolicy::Cast(dt) => dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub dtype: DTypePolicy,
    /// When false, NaN and infinities (including overflow from a narrowing
    /// cast) are rejected.
    pub allow_nonfinite: bool,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            dtype: DTypePolicy::Keep,
            allow_nonfinite: true,
        }
    }
}

impl From<DTypePolicy> for WriteOptions {
    fn from(dtype: DTypePolicy) -> Self {
        Self {
            dtype,
            ..Self::default()
        }
    }
}

/// Result of [`validate_archive`]. Valid iff `violations` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub tensor_count: usize,
    pub total_bytes: u64,
    pub dtype_counts: BTreeMap<String, usize>,
    pub metadata_keys: usize,
    pub violations: Vec<String>,
}

/// Header entries in file order, duplicates kept.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: (u64, u64),
}

#[derive(Serialize)]
struct EntryOut<'a> {
    dtype: &'a str,
    shape: &'a [usize],
    data_offsets: [u64; 2],
}

struct Located {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

/// Everything learned from one scan of an archive.
struct Scan {
    entries: Vec<Located>,
    metadata: BTreeMap<String, String>,
    data_start: usize,
    /// Problems that make the archive unreadable.
    fatal: Vec<StoreError>,
    /// Layout problems that do not prevent decoding (gaps, trailing bytes).
    layout: Vec<StoreError>,
}

fn non_contiguous(name: &str, what: String) -> StoreError {
    StoreError::Invalid {
        name: name.to_string(),
        what: format!("non-contiguous data: {what}"),
    }
}

fn scan(buf: &[u8]) -> Scan {
    let mut scan = Scan {
        entries: Vec::new(),
        metadata: BTreeMap::new(),
        data_start: 0,
        fatal: Vec::new(),
        layout: Vec::new(),
    };
    if buf.len() < 8 {
        scan.fatal.push(StoreError::Truncated(format!(
            "{} bytes, need 8 for the header length",
            buf.len()
        )));
        return scan;
    }
    let header_len = u64::from_le_bytes(buf[..8].try_into().unwrap());
    let data_start = match usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= buf.len())
    {
        Some(end) => end,
        None => {
            scan.fatal.push(StoreError::Truncated(format!(
                "header length {header_len} exceeds the {} bytes after offset 8",
                buf.len() - 8
            )));
            return scan;
        }
    };
    scan.data_start = data_start;
    let data_len = (buf.len() - data_start) as u64;

    let header: RawHeader = match std::str::from_utf8(&buf[8..data_start])
        .map_err(|e| e.to_string())
        .and_then(|s| serde_json::from_str(s).map_err(|e| e.to_string()))
    {
        Ok(h) => h,
        Err(e) => {
            scan.fatal.push(StoreError::MalformedHeader(e));
            return scan;
        }
    };

    let mut seen = HashSet::new();
    for (name, value) in header.0 {
        if !seen.insert(name.clone()) {
            scan.fatal.push(StoreError::DuplicateName(name));
            continue;
        }
        if name == METADATA_KEY {
            match serde_json::from_value::<BTreeMap<String, String>>(value) {
                Ok(m) => scan.metadata = m,
                Err(e) => scan.fatal.push(StoreError::MalformedHeader(format!(
                    "{METADATA_KEY} must map strings to strings: {e}"
                ))),
            }
            continue;
        }
        if name.is_empty() {
            scan.fatal.push(StoreError::InvalidName(name));
            continue;
        }
        let raw: RawEntry = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                scan.fatal
                    .push(StoreError::MalformedHeader(format!("tensor {name:?}: {e}")));
                continue;
            }
        };
        let dtype: DType = match raw.dtype.parse() {
            Ok(d) => d,
            Err(_) => {
                scan.fatal.push(StoreError::UnknownDType {
                    name,
                    dtype: raw.dtype,
                });
                continue;
            }
        };
        let (begin, end) = raw.data_offsets;
        if begin > end || end > data_len {
            scan.fatal.push(StoreError::OutOfBounds {
                name,
                begin,
                end,
                len: data_len,
            });
            continue;
        }
        let shape: Vec<usize> = match raw
            .shape
            .iter()
            .map(|&d| usize::try_from(d).ok())
            .collect::<Option<_>>()
        {
            Some(s) => s,
            None => {
                scan.fatal.push(StoreError::Invalid {
                    name,
                    what: "shape dimension does not fit in usize".into(),
                });
                continue;
            }
        };
        let expected = shape
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(end - begin) {
            scan.fatal.push(StoreError::SizeMismatch {
                name,
                begin,
                end,
                actual: end - begin,
                expected: expected.unwrap_or(u64::MAX),
            });
            continue;
        }
        scan.entries.push(Located {
            name,
            dtype,
            shape,
            begin,
            end,
        });
    }

    let mut order: Vec<usize> = (0..scan.entries.len()).collect();
    order.sort_by_key(|&i| (scan.entries[i].begin, scan.entries[i].end));
    let mut cursor = 0u64;
    for i in order {
        let e = &scan.entries[i];
        if e.begin > cursor {
            scan.layout.push(non_contiguous(
                &e.name,
                format!(
                    "gap of {} bytes before offset {}",
                    e.begin - cursor,
                    e.begin
                ),
            ));
        } else if e.begin < cursor && e.end > e.begin {
            scan.fatal.push(StoreError::Overlap {
                name: e.name.clone(),
                offset: e.begin,
            });
        }
        cursor = cursor.max(e.end);
    }
    if cursor < data_len {
        scan.layout.push(non_contiguous(
            "",
            format!("{} trailing bytes after offset {cursor}", data_len - cursor),
        ));
    }
    scan
}

/// Decodes an archive held in memory.
///
/// Tensor buffers are zero-copy slices of `bytes`. Gaps and trailing bytes
/// in the data region are tolerated; every other violation is an error.
pub fn read_archive(bytes: impl Into<Bytes>) -> Result<Checkpoint, StoreError> {
    let bytes = bytes.into();
    let mut scan = scan(&bytes);
    if !scan.fatal.is_empty() {
        return Err(scan.fatal.swap_remove(0));
    }
    let mut ck = Checkpoint::new();
    for e in scan.entries {
        let lo = scan.data_start + e.begin as usize;
        let hi = scan.data_start + e.end as usize;
        let t = Tensor::from_bytes(e.dtype, e.shape, bytes.slice(lo..hi))?;
        ck.insert(e.name, t)?;
    }
    *ck.metadata_mut() = scan.metadata;
    Ok(ck)
}

/// Reads an archive file. The file is read into memory once; tensors
/// reference that buffer.
pub fn read_archive_file(path: impl AsRef<Path>) -> Result<Checkpoint, StoreError> {
    read_archive(fs::read(path)?)
}

/// Checks every format invariant without failing on the first one.
pub fn validate_bytes(buf: &[u8]) -> ValidationReport {
    let scan = scan(buf);
    let mut dtype_counts = BTreeMap::new();
    let mut total_bytes = 0;
    for e in &scan.entries {
        *dtype_counts
            .entry(e.dtype.as_str().to_string())
            .or_insert(0) += 1;
        total_bytes += e.end - e.begin;
    }
    let violations: Vec<String> = scan
        .fatal
        .iter()
        .chain(&scan.layout)
        .map(ToString::to_string)
        .collect();
    ValidationReport {
        valid: violations.is_empty(),
        tensor_count: scan.entries.len(),
        total_bytes,
        dtype_counts,
        metadata_keys: scan.metadata.len(),
        violations,
    }
}

/// Validates an archive on disk. Only I/O failures are errors.
pub fn validate_archive(path: impl AsRef<Path>) -> Result<ValidationReport, StoreError> {
    Ok(validate_bytes(&fs::read(path)?))
}

fn header_json(ck: &Checkpoint, opts: &WriteOptions) -> String {
    let mut header = String::from("{");
    let mut first = true;
    let mut push = |header: &mut String, key: &str, value: String| {
        if !std::mem::take(&mut first) {
            header.push(',');
        }
        header.push_str(&serde_json::to_string(key).expect("string key"));
        header.push(':');
        header.push_str(&value);
    };
    if !ck.metadata().is_empty() {
        let meta = serde_json::to_string(ck.metadata()).expect("string map");
        push(&mut header, METADATA_KEY, meta);
    }
    let mut offset = 0u64;
    for (name, t) in ck.iter() {
        let dtype = opts.dtype.target(t.dtype());
        let len = (t.numel() * dtype.size()) as u64;
        let entry = EntryOut {
            dtype: dtype.as_str(),
            shape: t.shape(),
            data_offsets: [offset, offset + len],
        };
        push(
            &mut header,
            name,
            serde_json::to_string(&entry).expect("entry"),
        );
        offset += len;
    }
    header.push('}');
    header
}

fn check_finite(name: &str, values: &[f64], base_index: usize) -> Result<(), StoreError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(StoreError::NonFinite {
            name: name.to_string(),
            index: base_index + i,
        }),
        None => Ok(()),
    }
}

/// Streams the canonical encoding of `ck` into `w`: tensors in
/// lexicographic name order, offsets packed from 0.
pub fn write_archive_to<W: Write>(
    ck: &Checkpoint,
    opts: impl Into<WriteOptions>,
    w: &mut W,
) -> Result<(), StoreError> {
    let opts = opts.into();
    let header = header_json(ck, &opts);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;

    let mut vals = Vec::new();
    let mut out = Vec::new();
    for (name, t) in ck.iter() {
        let target = opts.dtype.target(t.dtype());
        if target == t.dtype() && opts.allow_nonfinite {
            w.write_all(t.bytes())?;
            continue;
        }
        let n = t.numel();
        let mut start = 0;
        while start < n {
            let len = CAST_CHUNK.min(n - start);
            vals.resize(len, 0.0);
            t.read_f64(start, &mut vals);
            out.resize(len * target.size(), 0);
            target.encode_into(&vals, &mut out);
            if !opts.allow_nonfinite {
                target.decode_into(&out, &mut vals);
                check_finite(name, &vals, start)?;
            }
            w.write_all(&out)?;
            start += len;
        }
    }
    Ok(())
}

/// Canonical encoding of `ck` as a byte vector.
pub fn write_archive(
    ck: &Checkpoint,
    opts: impl Into<WriteOptions>,
) -> Result<Vec<u8>, StoreError> {
    let opts = opts.into();
    let header_len = header_json(ck, &opts).len();
    let data_len: usize = ck
        .iter()
        .map(|(_, t)| t.numel() * opts.dtype.target(t.dtype()).size())
        .sum();
    let mut buf = Vec::with_capacity(8 + header_len + data_len);
    write_archive_to(ck, opts, &mut buf)?;
    Ok(buf)
}

/// Writes `ck` to `path` through a temporary file in the same directory and
/// an atomic rename, so a failed write never leaves a partial archive.
pub fn write_archive_file(
    ck: &Checkpoint,
    opts: impl Into<WriteOptions>,
    path: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write_archive_to(ck, opts, &mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
    Ok(())
}
