//! On-disk storage for hidden-representation records.
//!
//! Record file layout (all integers little-endian):
//!
//! ```text
//! "BAPR"            4 bytes magic
//! version           u32 (= 1)
//! header_len        u32
//! header            header_len bytes of UTF-8 JSON
//!                   {sample_id, layer_k, T, d, label, buggy_lines, provenance}
//! token_line        T x i32
//! data              T*d x f32, row-major (row = token)
//! ```
//!
//! A manifest is a JSON-lines file. The first line is a header object
//! `{"format_version", "split", "provenance"}`; every following line is an
//! entry `{"sample_id", "path", "T", "label"}` with `path` relative to the
//! manifest's directory. A code corpus is a JSON-lines file of [`CodeRecord`]s.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RECORD_MAGIC: [u8; 4] = *b"BAPR";
pub const RECORD_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RepstoreError {
    #[error("bad magic bytes {0:?}, expected \"BAPR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported record version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record: {0}")]
    Truncated(&'static str),
    #[error("malformed record header: {0}")]
    BadHeader(String),
    #[error("non-finite value at data index {index}")]
    NonFinite { index: usize },
    #[error("token {token} has line index {line}, expected -1 or a non-negative line")]
    LineOutOfRange { token: usize, line: i32 },
    #[error("invalid record: {0}")]
    Invariant(String),
    #[error("record file for sample '{sample_id}' is missing: {path}")]
    MissingRecord { sample_id: String, path: PathBuf },
    #[error("record '{path}' does not match its manifest entry: {detail}")]
    HeaderMismatch { path: PathBuf, detail: String },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Stream(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, RepstoreError>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> RepstoreError + '_ {
    move |source| RepstoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One program's layer-k hidden states, its token-to-line map and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub sample_id: String,
    pub layer_k: u32,
    pub provenance: String,
    n_tokens: usize,
    dim: usize,
    data: Vec<f32>,
    token_line: Vec<i32>,
    pub label: u8,
    /// Ground-truth buggy lines (0-based). Only evaluation reads this.
    pub buggy_lines: BTreeSet<usize>,
}

impl RepRecord {
    /// Builds a record and checks every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sample_id: impl Into<String>,
        layer_k: u32,
        provenance: impl Into<String>,
        n_tokens: usize,
        dim: usize,
        data: Vec<f32>,
        token_line: Vec<i32>,
        label: u8,
        buggy_lines: BTreeSet<usize>,
    ) -> Result<Self> {
        let record = Self {
            sample_id: sample_id.into(),
            layer_k,
            provenance: provenance.into(),
            n_tokens,
            dim,
            data,
            token_line,
            label,
            buggy_lines,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.dim == 0 {
            return Err(RepstoreError::Invariant(format!(
                "T and d must be positive (T={}, d={})",
                self.n_tokens, self.dim
            )));
        }
        let expected = self
            .n_tokens
            .checked_mul(self.dim)
            .ok_or_else(|| RepstoreError::Invariant("T*d overflows".into()))?;
        if self.data.len() != expected {
            return Err(RepstoreError::Invariant(format!(
                "data has {} values, expected T*d = {expected}",
                self.data.len()
            )));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(RepstoreError::NonFinite { index });
        }
        if self.token_line.len() != self.n_tokens {
            return Err(RepstoreError::Invariant(format!(
                "token_line has {} entries, expected T = {}",
                self.token_line.len(),
                self.n_tokens
            )));
        }
        check_token_lines(&self.token_line)?;
        if self.label > 1 {
            return Err(RepstoreError::Invariant(format!(
                "label must be 0 or 1, got {}",
                self.label
            )));
        }
        if self.label == 0 && !self.buggy_lines.is_empty() {
            return Err(RepstoreError::Invariant(
                "clean sample (label 0) lists buggy lines".into(),
            ));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token_line(&self) -> &[i32] {
        &self.token_line
    }

    pub fn token(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Number of source lines covered by tokens: 1 + max non-negative line id.
    pub fn n_lines(&self) -> usize {
        line_count(&self.token_line)
    }

    pub fn is_buggy(&self) -> bool {
        self.label == 1
    }
}

/// `1 + max(token_line)` over non-special tokens, 0 if there are none.
pub fn line_count(token_line: &[i32]) -> usize {
    token_line
        .iter()
        .filter(|&&l| l >= 0)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
}

fn check_token_lines(token_line: &[i32]) -> Result<()> {
    let mut prev = -1i32;
    for (token, &line) in token_line.iter().enumerate() {
        if line < -1 {
            return Err(RepstoreError::LineOutOfRange { token, line });
        }
        if line >= 0 {
            if line < prev {
                return Err(RepstoreError::Invariant(format!(
                    "token_line decreases at token {token} ({prev} -> {line})"
                )));
            }
            prev = line;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    sample_id: String,
    layer_k: u32,
    #[serde(rename = "T")]
    n_tokens: usize,
    d: usize,
    label: u8,
    buggy_lines: BTreeSet<usize>,
    provenance: String,
}

/// Writes `record` in the binary record format. Returns the number of bytes
/// written. Invalid records are rejected before anything is written.
pub fn write_record<W: Write>(record: &RepRecord, mut sink: W) -> Result<usize> {
    record.validate()?;
    let header = RecordHeader {
        sample_id: record.sample_id.clone(),
        layer_k: record.layer_k,
        n_tokens: record.n_tokens,
        d: record.dim,
        label: record.label,
        buggy_lines: record.buggy_lines.clone(),
        provenance: record.provenance.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| RepstoreError::BadHeader(e.to_string()))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| RepstoreError::Invariant("header longer than u32::MAX".into()))?;

    let mut buf = Vec::with_capacity(12 + header.len() + 4 * (record.n_tokens + record.data.len()));
    buf.extend_from_slice(&RECORD_MAGIC);
    buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    for &line in &record.token_line {
        buf.extend_from_slice(&line.to_le_bytes());
    }
    for &v in &record.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

fn read_exact_or_truncated<R: Read>(src: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => RepstoreError::Truncated(what),
        _ => RepstoreError::Stream(e),
    })
}

/// Reads `len` bytes without trusting `len` for the allocation size.
fn read_bounded<R: Read>(src: &mut R, len: u64, what: &'static str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    src.take(len).read_to_end(&mut out)?;
    if (out.len() as u64) < len {
        return Err(RepstoreError::Truncated(what));
    }
    Ok(out)
}

fn read_u32<R: Read>(src: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(src, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses one record. Any byte string yields either a valid record or a
/// typed error.
pub fn read_record<R: Read>(mut source: R) -> Result<RepRecord> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut source, &mut magic, "magic")?;
    if magic != RECORD_MAGIC {
        return Err(RepstoreError::BadMagic(magic));
    }
    let version = read_u32(&mut source, "version")?;
    if version != RECORD_VERSION {
        return Err(RepstoreError::UnsupportedVersion(version));
    }
    let header_len = read_u32(&mut source, "header length")?;
    let header = read_bounded(&mut source, u64::from(header_len), "header")?;
    let header: RecordHeader =
        serde_json::from_slice(&header).map_err(|e| RepstoreError::BadHeader(e.to_string()))?;
    if header.n_tokens == 0 || header.d == 0 {
        return Err(RepstoreError::BadHeader(format!(
            "T and d must be positive (T={}, d={})",
            header.n_tokens, header.d
        )));
    }
    let n_values = header
        .n_tokens
        .checked_mul(header.d)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| RepstoreError::BadHeader("T*d overflows".into()))?;

    let lines = read_bounded(&mut source, 4 * header.n_tokens as u64, "token_line")?;
    let token_line: Vec<i32> = lines
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let raw = read_bounded(&mut source, 4 * n_values as u64, "data matrix")?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    RepRecord::new(
        header.sample_id,
        header.layer_k,
        header.provenance,
        header.n_tokens,
        header.d,
        data,
        token_line,
        header.label,
        header.buggy_lines,
    )
}

pub fn read_record_file(path: &Path) -> Result<RepRecord> {
    let file = File::open(path).map_err(io_at(path))?;
    read_record(BufReader::new(file))
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_at(dir))?;
    tmp.write_all(bytes).map_err(io_at(path))?;
    tmp.as_file().sync_all().map_err(io_at(path))?;
    tmp.persist(path).map_err(|e| RepstoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_record_file(path: &Path, record: &RepRecord) -> Result<usize> {
    let mut bytes = Vec::new();
    let n = write_record(record, &mut bytes)?;
    write_atomic(path, &bytes)?;
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: PathBuf,
    #[serde(rename = "T")]
    pub n_tokens: usize,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    format_version: u32,
    split: Split,
    provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub split: Split,
    pub provenance: String,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(split: Split, provenance: impl Into<String>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            split,
            provenance: provenance.into(),
            entries: Vec::new(),
            root: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Serializes to JSON-lines text (header line, then one entry per line).
    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            format_version: self.format_version,
            split: self.split,
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("manifest header serializes");
        out.push('\n');
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Iterates records lazily in manifest order, one in memory at a time.
    pub fn records(&self) -> RecordIter<'_> {
        RecordIter {
            manifest: self,
            next: 0,
        }
    }

    /// Reads every record into memory.
    pub fn read_all(&self) -> Result<Vec<RepRecord>> {
        self.records().collect()
    }
}

/// Loads a manifest and checks that every referenced record file exists.
/// Use [`Manifest::records`] for the lazy record iterator.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(io_at(path))?;
    let bad = |detail: String| RepstoreError::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: ManifestHeader = loop {
        match lines.next() {
            None => return Err(bad("missing header line".into())),
            Some((_, line)) => {
                let line = line.map_err(io_at(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| bad(format!("line 1: bad header: {e}")))?;
            }
        }
    };
    if header.format_version != MANIFEST_VERSION {
        return Err(bad(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        if !seen.insert(entry.sample_id.clone()) {
            return Err(bad(format!("duplicate sample_id '{}'", entry.sample_id)));
        }
        let full = root.join(&entry.path);
        if !full.is_file() {
            return Err(RepstoreError::MissingRecord {
                sample_id: entry.sample_id,
                path: full,
            });
        }
        entries.push(entry);
    }
    Ok(Manifest {
        format_version: header.format_version,
        split: header.split,
        provenance: header.provenance,
        entries,
        root,
    })
}

pub struct RecordIter<'a> {
    manifest: &'a Manifest,
    next: usize,
}

impl Iterator for RecordIter<'_> {
    type Item = Result<RepRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.manifest.entries.get(self.next)?;
        self.next += 1;
        let path = self.manifest.resolve(entry);
        if !path.is_file() {
            return Some(Err(RepstoreError::MissingRecord {
                sample_id: entry.sample_id.clone(),
                path,
            }));
        }
        Some(read_record_file(&path).and_then(|record| {
            check_entry(entry, &record, &path)?;
            Ok(record)
        }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.manifest.entries.len() - self.next;
        (left, Some(left))
    }
}

fn check_entry(entry: &ManifestEntry, record: &RepRecord, path: &Path) -> Result<()> {
    let mismatch = |detail: String| RepstoreError::HeaderMismatch {
        path: path.to_path_buf(),
        detail,
    };
    if entry.sample_id != record.sample_id {
        return Err(mismatch(format!(
            "sample_id '{}' vs '{}'",
            entry.sample_id, record.sample_id
        )));
    }
    if entry.n_tokens != record.n_tokens() {
        return Err(mismatch(format!("T {} vs {}", entry.n_tokens, record.n_tokens())));
    }
    if entry.label != record.label {
        return Err(mismatch(format!("label {} vs {}", entry.label, record.label)));
    }
    Ok(())
}

/// Writes records under `dir/records/` and a manifest at `dir/manifest.jsonl`.
pub fn write_dataset(
    dir: &Path,
    split: Split,
    provenance: &str,
    records: &[RepRecord],
) -> Result<PathBuf> {
    let rec_dir = dir.join("records");
    std::fs::create_dir_all(&rec_dir).map_err(io_at(&rec_dir))?;
    let mut manifest = Manifest::new(split, provenance);
    for record in records {
        let rel = PathBuf::from("records").join(format!("{}.bapr", file_stem(&record.sample_id)));
        write_record_file(&dir.join(&rel), record)?;
        manifest.entries.push(ManifestEntry {
            sample_id: record.sample_id.clone(),
            path: rel,
            n_tokens: record.n_tokens(),
            label: record.label,
        });
    }
    let path = dir.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(path)
}

fn file_stem(sample_id: &str) -> String {
    sample_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Raw source sample with labels, as consumed by the extractor and by
/// evaluation of external predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub sample_id: String,
    pub code: String,
    pub label: u8,
    #[serde(default)]
    pub buggy_lines: BTreeSet<usize>,
}

impl CodeRecord {
    pub fn lines(&self) -> Vec<&str> {
        source_lines(&self.code)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lines().len();
        if self.label > 1 {
            return Err(RepstoreError::Invariant(format!(
                "{}: label must be 0 or 1",
                self.sample_id
            )));
        }
        if let Some(&bad) = self.buggy_lines.iter().find(|&&l| l >= n) {
            return Err(RepstoreError::Invariant(format!(
                "{}: buggy line {bad} outside the {n} lines of code",
                self.sample_id
            )));
        }
        if self.label == 0 && !self.buggy_lines.is_empty() {
            return Err(RepstoreError::Invariant(format!(
                "{}: clean sample lists buggy lines",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// Newline-delimited source lines (a trailing newline does not open a new line).
pub fn source_lines(code: &str) -> Vec<&str> {
    code.lines().collect()
}

pub fn read_code_corpus(path: &Path) -> Result<Vec<CodeRecord>> {
    let file = File::open(path).map_err(io_at(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CodeRecord = serde_json::from_str(&line).map_err(|e| RepstoreError::Manifest {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_code_corpus(path: &Path, records: &[CodeRecord]) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| RepstoreError::BadHeader(e.to_string()))?;
        buf.write_all(b"\n")?;
    }
    let bytes = buf.into_inner().map_err(|e| e.into_error())?;
    write_atomic(path, &bytes)
}
