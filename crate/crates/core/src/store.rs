//! On-disk formats: JSON-Lines dataset manifests, the binary descriptor
//! database, and model checkpoints. All formats are versioned,
//! little-endian, and round-trip bit-exactly.
//!
//! Descriptor database layout:
//! `"NOCP" | u32 version=1 | u32 dim | u64 count | count*dim le f32 |
//!  id table (u32 length-prefixed UTF-8) | 32-byte fingerprint`.
//!
//! Checkpoints are a human-inspectable JSON header plus a sidecar
//! `<path>.bin` holding raw little-endian f32 tensors in declared order.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderError, EncoderParams};
use crate::geo::{DomainTag, GeoError, GeoPoint, PlanarPoint};
use crate::losses::{ClassifierHead, LossError};

pub const DB_MAGIC: &[u8; 4] = b"NOCP";
pub const DB_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Database rows must be unit-norm within this tolerance.
pub const DB_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    ManifestLine { line: usize, msg: String },
    #[error("manifest line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("manifest line {line}: mixed coordinate modes (manifest started as {first})")]
    MixedCoordModes { line: usize, first: CoordMode },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("bad magic: expected \"NOCP\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated while reading {reading}")]
    Truncated { reading: &'static str },
    #[error("{extra} trailing bytes after a complete record")]
    TrailingBytes { extra: usize },
    #[error("descriptor row {row} has norm {norm}, violating the unit-norm invariant")]
    NormViolation { row: usize, norm: f64 },
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("row has {got} values, database dim is {expected}")]
    RowDim { got: usize, expected: usize },
    #[error("fingerprint must be 64 hex chars, got {0:?}")]
    FingerprintFormat(String),
    #[error("blob fingerprint mismatch: header says {header}, blob hashes to {actual}")]
    FingerprintMismatch { header: String, actual: String },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("invalid id {0:?}: ids must be non-empty")]
    EmptyId(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Coordinate mode of a manifest; uniform across all its records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordMode {
    Geo,
    Planar,
}

impl fmt::Display for CoordMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoordMode::Geo => write!(f, "geo"),
            CoordMode::Planar => write!(f, "planar"),
        }
    }
}

/// A record's location in one of the two coordinate modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position {
    Geo(GeoPoint),
    Planar(PlanarPoint),
}

impl Position {
    pub fn mode(&self) -> CoordMode {
        match self {
            Position::Geo(_) => CoordMode::Geo,
            Position::Planar(_) => CoordMode::Planar,
        }
    }
}

/// Where a record's pixels come from: a file on disk (relative paths resolve
/// against the manifest location) or an inline procedural seed.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Path(String),
    Synth {
        place_seed: u64,
        view_seed: u64,
        size: usize,
        /// Viewpoint jitter scale, preserved bit-exactly.
        jitter_bits: u64,
    },
}

impl ImageSource {
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("synth:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 5 || parts[0] != "v1" {
                return Err(format!("malformed synth image ref {s:?}"));
            }
            let place_seed = u64::from_str_radix(parts[1], 16)
                .map_err(|e| format!("synth ref place seed: {e}"))?;
            let view_seed = u64::from_str_radix(parts[2], 16)
                .map_err(|e| format!("synth ref view seed: {e}"))?;
            let size: usize = parts[3].parse().map_err(|e| format!("synth ref size: {e}"))?;
            let jitter_bits = u64::from_str_radix(parts[4], 16)
                .map_err(|e| format!("synth ref jitter: {e}"))?;
            if size == 0 {
                return Err("synth ref size must be positive".into());
            }
            Ok(ImageSource::Synth {
                place_seed,
                view_seed,
                size,
                jitter_bits,
            })
        } else if s.is_empty() {
            Err("empty image ref".into())
        } else {
            Ok(ImageSource::Path(s.to_owned()))
        }
    }

    pub fn jitter(&self) -> Option<f64> {
        match self {
            ImageSource::Synth { jitter_bits, .. } => Some(f64::from_bits(*jitter_bits)),
            ImageSource::Path(_) => None,
        }
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSource::Path(p) => write!(f, "{p}"),
            ImageSource::Synth {
                place_seed,
                view_seed,
                size,
                jitter_bits,
            } => write!(f, "synth:v1:{place_seed:x}:{view_seed:x}:{size}:{jitter_bits:x}"),
        }
    }
}

/// One dataset item.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: ImageSource,
    pub position: Position,
    pub utc: Option<DateTime<Utc>>,
    pub class_label: Option<u32>,
    pub domain: Option<DomainTag>,
}

/// JSON-Lines wire shape of one record.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    utc: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<DomainTag>,
}

impl RecordLine {
    fn into_record(self, line: usize) -> Result<ImageRecord, StoreError> {
        let bad = |msg: String| StoreError::ManifestLine { line, msg };
        let geo_err = |e: GeoError| StoreError::ManifestLine {
            line,
            msg: e.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id".into()));
        }
        let position = match (self.lat, self.lon, self.x_m, self.y_m) {
            (Some(lat), Some(lon), None, None) => {
                Position::Geo(GeoPoint::new(lat, lon).map_err(geo_err)?)
            }
            (None, None, Some(x), Some(y)) => {
                Position::Planar(PlanarPoint::new(x, y).map_err(geo_err)?)
            }
            _ => {
                return Err(bad(
                    "record needs exactly one of (lat, lon) or (x_m, y_m)".into(),
                ))
            }
        };
        let image = ImageSource::parse(&self.image).map_err(bad)?;
        Ok(ImageRecord {
            id: self.id,
            image,
            position,
            utc: self.utc,
            class_label: self.label,
            domain: self.domain,
        })
    }

    fn from_record(r: &ImageRecord) -> Self {
        let (lat, lon, x_m, y_m) = match r.position {
            Position::Geo(p) => (Some(p.lat()), Some(p.lon()), None, None),
            Position::Planar(p) => (None, None, Some(p.x_m()), Some(p.y_m())),
        };
        RecordLine {
            id: r.id.clone(),
            image: r.image.to_string(),
            lat,
            lon,
            x_m,
            y_m,
            utc: r.utc,
            label: r.class_label,
            domain: r.domain,
        }
    }
}

/// An ordered dataset with a uniform coordinate mode and unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    coord_mode: CoordMode,
    records: Vec<ImageRecord>,
}

impl Manifest {
    /// Empty manifest with an explicit coordinate mode. Valid for database
    /// construction; training and evaluation require records.
    pub fn empty(coord_mode: CoordMode) -> Self {
        Self {
            coord_mode,
            records: Vec::new(),
        }
    }

    /// Build from records, deriving the coordinate mode from the first one.
    pub fn new(records: Vec<ImageRecord>) -> Result<Self, StoreError> {
        let first = records.first().ok_or(StoreError::EmptyManifest)?;
        let coord_mode = first.position.mode();
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.position.mode() != coord_mode {
                return Err(StoreError::MixedCoordModes {
                    line: i + 1,
                    first: coord_mode,
                });
            }
            if !seen.insert(r.id.clone()) {
                return Err(StoreError::DuplicateId {
                    line: i + 1,
                    id: r.id.clone(),
                });
            }
        }
        Ok(Self {
            coord_mode,
            records,
        })
    }

    pub fn coord_mode(&self) -> CoordMode {
        self.coord_mode
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every record carries a class label (required for training).
    pub fn fully_labeled(&self) -> bool {
        self.records.iter().all(|r| r.class_label.is_some())
    }
}

/// Read a JSON-Lines manifest; errors carry 1-based line numbers.
pub fn read_manifest(path: &Path) -> Result<Manifest, StoreError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut coord_mode: Option<CoordMode> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(io_err(path))?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine =
            serde_json::from_str(&text).map_err(|e| StoreError::ManifestLine {
                line: line_no,
                msg: e.to_string(),
            })?;
        let record = parsed.into_record(line_no)?;
        if !seen.insert(record.id.clone()) {
            return Err(StoreError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        match coord_mode {
            None => coord_mode = Some(record.position.mode()),
            Some(mode) if mode != record.position.mode() => {
                return Err(StoreError::MixedCoordModes {
                    line: line_no,
                    first: mode,
                });
            }
            _ => {}
        }
        records.push(record);
    }
    let coord_mode = coord_mode.ok_or(StoreError::EmptyManifest)?;
    Ok(Manifest {
        coord_mode,
        records,
    })
}

/// Write a manifest as JSON Lines, one record per line.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), StoreError> {
    let mut out = Vec::new();
    for r in &manifest.records {
        serde_json::to_writer(&mut out, &RecordLine::from_record(r))
            .expect("record serialization is infallible");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Descriptor database
// ---------------------------------------------------------------------------

/// Searchable collection of unit-norm f32 descriptor rows, aligned with a
/// list of record ids and stamped with the producing model's fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDB {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    encoder_fingerprint: String,
}

impl DescriptorDB {
    pub fn new(dim: usize, encoder_fingerprint: String) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        validate_fingerprint(&encoder_fingerprint)?;
        Ok(Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            encoder_fingerprint,
        })
    }

    pub fn push(&mut self, id: String, row: &[f32]) -> Result<(), StoreError> {
        if row.len() != self.dim {
            return Err(StoreError::RowDim {
                got: row.len(),
                expected: self.dim,
            });
        }
        if id.is_empty() {
            return Err(StoreError::EmptyId(id));
        }
        let norm = row_norm(row);
        if !((norm - 1.0).abs() <= DB_NORM_TOL) {
            return Err(StoreError::NormViolation {
                row: self.ids.len(),
                norm,
            });
        }
        self.ids.push(id);
        self.vectors.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

fn validate_fingerprint(fp: &str) -> Result<(), StoreError> {
    if fp.len() != 64 || !fp.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(StoreError::FingerprintFormat(fp.to_owned()));
    }
    Ok(())
}

/// Serialize a descriptor database to its binary file format.
pub fn save_db(db: &DescriptorDB, path: &Path) -> Result<(), StoreError> {
    let mut out: Vec<u8> = Vec::with_capacity(24 + db.vectors.len() * 4);
    out.extend_from_slice(DB_MAGIC);
    out.extend_from_slice(&DB_VERSION.to_le_bytes());
    out.extend_from_slice(&(db.dim as u32).to_le_bytes());
    out.extend_from_slice(&(db.count() as u64).to_le_bytes());
    for v in &db.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in &db.ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    let fp = hex::decode(&db.encoder_fingerprint).expect("fingerprint validated as hex");
    out.extend_from_slice(&fp);
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&out).map_err(io_err(path))?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, reading: &'static str) -> Result<&'a [u8], StoreError> {
        if self.pos + n > self.data.len() {
            return Err(StoreError::Truncated { reading });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, reading: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, reading)?.try_into().unwrap()))
    }

    fn u64(&mut self, reading: &'static str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, reading)?.try_into().unwrap()))
    }
}

/// Load and fully validate a descriptor database: magic, version, exact
/// payload length, per-row norms, id table, fingerprint.
pub fn load_db(path: &Path) -> Result<DescriptorDB, StoreError> {
    let data = std::fs::read(path).map_err(io_err(path))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };
    if cur.take(4, "magic")? != DB_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != DB_VERSION {
        return Err(StoreError::Version(version));
    }
    let dim = cur.u32("dim")? as usize;
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let count = cur.u64("count")? as usize;
    let payload = cur.take(count * dim * 4, "descriptor payload")?;
    let mut vectors = Vec::with_capacity(count * dim);
    for chunk in payload.chunks_exact(4) {
        vectors.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    for row in 0..count {
        let norm = row_norm(&vectors[row * dim..(row + 1) * dim]);
        if !((norm - 1.0).abs() <= DB_NORM_TOL) {
            return Err(StoreError::NormViolation { row, norm });
        }
    }
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32("id length")? as usize;
        let bytes = cur.take(len, "id bytes")?;
        let id = String::from_utf8(bytes.to_vec()).map_err(|_| StoreError::Header(
            "id table contains invalid UTF-8".into(),
        ))?;
        ids.push(id);
    }
    let fp = cur.take(32, "fingerprint")?;
    let encoder_fingerprint = hex::encode(fp);
    if cur.pos != data.len() {
        return Err(StoreError::TrailingBytes {
            extra: data.len() - cur.pos,
        });
    }
    Ok(DescriptorDB {
        dim,
        ids,
        vectors,
        encoder_fingerprint,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Encoder weights plus an optional classifier head, with a fingerprint over
/// the serialized tensor blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub head: Option<ClassifierHead>,
    pub format_version: u32,
    pub fingerprint: String,
}

impl Checkpoint {
    pub fn new(params: EncoderParams, head: Option<ClassifierHead>) -> Self {
        let blob = blob_bytes(&params, head.as_ref());
        let fingerprint = hex::encode(Sha256::digest(&blob));
        Self {
            params,
            head,
            format_version: CHECKPOINT_VERSION,
            fingerprint,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.params.out_dim()
    }
}

fn blob_bytes(params: &EncoderParams, head: Option<&ClassifierHead>) -> Vec<u8> {
    let mut flat = params.to_flat();
    if let Some(h) = head {
        flat.extend_from_slice(h.weights());
    }
    let mut out = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadHeader {
    classes: usize,
    s: f64,
    m: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    encoder: EncoderConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    head: Option<HeadHeader>,
    tensors: Vec<TensorHeader>,
    blob: String,
    fingerprint: String,
}

fn tensor_headers(cfg: EncoderConfig, head: Option<&ClassifierHead>) -> Vec<TensorHeader> {
    let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    let mut tensors = vec![
        TensorHeader {
            name: "w1".into(),
            shape: vec![patch_dim, cfg.feat_dim],
        },
        TensorHeader {
            name: "b1".into(),
            shape: vec![cfg.feat_dim],
        },
        TensorHeader {
            name: "gem_p".into(),
            shape: vec![1],
        },
        TensorHeader {
            name: "w2".into(),
            shape: vec![cfg.feat_dim, cfg.out_dim],
        },
        TensorHeader {
            name: "b2".into(),
            shape: vec![cfg.out_dim],
        },
    ];
    if let Some(h) = head {
        tensors.push(TensorHeader {
            name: "head_w".into(),
            shape: vec![h.classes(), h.dim()],
        });
    }
    tensors
}

/// Write the JSON header at `path` and the tensor blob at `<path>.bin`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), StoreError> {
    let blob = blob_bytes(&ckpt.params, ckpt.head.as_ref());
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != ckpt.fingerprint {
        return Err(StoreError::FingerprintMismatch {
            header: ckpt.fingerprint.clone(),
            actual,
        });
    }
    let blob_path = blob_path_for(path);
    let header = CheckpointHeader {
        format_version: ckpt.format_version,
        encoder: ckpt.params.config(),
        head: ckpt.head.as_ref().map(|h| HeadHeader {
            classes: h.classes(),
            s: h.s(),
            m: h.m(),
        }),
        tensors: tensor_headers(ckpt.params.config(), ckpt.head.as_ref()),
        blob: blob_path
            .file_name()
            .expect("blob path has a file name")
            .to_string_lossy()
            .into_owned(),
        fingerprint: ckpt.fingerprint.clone(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serialization is infallible");
    std::fs::write(path, json).map_err(io_err(path))?;
    std::fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    Ok(())
}

fn blob_path_for(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".bin");
    path.with_file_name(name)
}

/// Load a checkpoint, verifying the fingerprint and every tensor shape.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, StoreError> {
    let json = std::fs::read_to_string(path).map_err(io_err(path))?;
    let header: CheckpointHeader =
        serde_json::from_str(&json).map_err(|e| StoreError::Header(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(StoreError::Version(header.format_version));
    }
    validate_fingerprint(&header.fingerprint)?;
    let blob_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.blob);
    let mut blob = Vec::new();
    std::fs::File::open(&blob_path)
        .map_err(io_err(&blob_path))?
        .read_to_end(&mut blob)
        .map_err(io_err(&blob_path))?;
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != header.fingerprint {
        return Err(StoreError::FingerprintMismatch {
            header: header.fingerprint,
            actual,
        });
    }

    let declared: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if blob.len() != declared * 4 {
        return Err(StoreError::ShapeMismatch(format!(
            "declared {declared} f32 values ({} bytes) but blob has {} bytes",
            declared * 4,
            blob.len()
        )));
    }
    let expected = tensor_headers(
        header.encoder,
        None, // head shape checked separately below
    );
    for (a, b) in header.tensors.iter().zip(&expected) {
        if a.name != b.name || a.shape != b.shape {
            return Err(StoreError::ShapeMismatch(format!(
                "tensor {} has shape {:?}, expected {:?}",
                a.name, a.shape, b.shape
            )));
        }
    }

    let mut flat = Vec::with_capacity(blob.len() / 4);
    for chunk in blob.chunks_exact(4) {
        flat.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let cfg = header.encoder;
    let enc_len = 3 * cfg.patch_size * cfg.patch_size * cfg.feat_dim
        + cfg.feat_dim
        + 1
        + cfg.feat_dim * cfg.out_dim
        + cfg.out_dim;
    let params = EncoderParams::from_flat(cfg, flat.get(..enc_len).ok_or_else(|| {
        StoreError::ShapeMismatch("blob shorter than encoder tensors".into())
    })?)?;

    let head = match header.head {
        None => {
            if flat.len() != enc_len {
                return Err(StoreError::ShapeMismatch(
                    "blob has trailing values but no head is declared".into(),
                ));
            }
            None
        }
        Some(hh) => {
            let expect_head = header
                .tensors
                .last()
                .filter(|t| t.name == "head_w")
                .ok_or_else(|| StoreError::Header("head declared but head_w tensor missing".into()))?;
            if expect_head.shape != vec![hh.classes, cfg.out_dim] {
                return Err(StoreError::ShapeMismatch(format!(
                    "head_w shape {:?}, expected [{}, {}]",
                    expect_head.shape, hh.classes, cfg.out_dim
                )));
            }
            let w = flat[enc_len..].to_vec();
            Some(ClassifierHead::new(w, hh.classes, cfg.out_dim, hh.s, hh.m)?)
        }
    };

    Ok(Checkpoint {
        params,
        head,
        format_version: header.format_version,
        fingerprint: header.fingerprint,
    })
}
