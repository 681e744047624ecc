//! Data ingestion: IDX and CSV files, synthetic blobs, row normalization.
//!
//! Everything downstream consumes a [`Dataset`]: an `n_s x d` feature matrix
//! plus optional integer category labels used for evaluation only. Loaders
//! validate eagerly and report malformed input as [`Error::Format`] with
//! enough position information to find the offending byte or row.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// A feature matrix with optional ground-truth labels.
///
/// Labels never influence clustering or training; they exist so that runs on
/// benchmark data can be scored after the fact.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Identifier echoed into reports (file stem, URI, or generator tag).
    pub name: String,
    /// `n_s x d` row-major feature matrix; every entry is finite.
    pub features: Array2<f64>,
    /// Optional per-sample category ids, `labels.len() == n_s`.
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    /// Validates and assembles a dataset.
    ///
    /// Rejects non-finite feature entries and label vectors whose length
    /// does not match the number of rows.
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if let Some((row, col)) = features
            .indexed_iter()
            .find_map(|((i, j), v)| (!v.is_finite()).then_some((i, j)))
        {
            return Err(Error::Format(format!(
                "non-finite feature value at row {row}, column {col}"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::Format(format!(
                    "label count {} does not match sample count {}",
                    l.len(),
                    features.nrows()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
        })
    }

    /// Number of samples `n_s`.
    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    /// Feature dimension `d`.
    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

/// Magic number of an IDX file holding unsigned-byte images (3 dimensions).
const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
/// Magic number of an IDX file holding unsigned-byte labels (1 dimension).
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    let slice = bytes
        .get(offset..end)
        .ok_or_else(|| Error::Format(format!("file truncated reading {what} at byte {offset}")))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Reads an IDX image file into an `count x (rows*cols)` matrix.
///
/// Layout: big-endian magic `0x00000803`, then three big-endian `u32`
/// dimensions (count, rows, cols), then `count*rows*cols` raw bytes in
/// row-major order. Pixels are scaled to `[0, 1]` by dividing by 255.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let bytes = fs::read(&path)?;
    let magic = read_be_u32(&bytes, 0, "magic number")?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::Format(format!(
            "bad image magic number {magic:#010x}, expected {IDX_MAGIC_IMAGES:#010x}"
        )));
    }
    let count = read_be_u32(&bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&bytes, 8, "row count")? as usize;
    let cols = read_be_u32(&bytes, 12, "column count")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "image payload is {} bytes, expected {} for {count} images of {rows}x{cols}",
            bytes.len() - 16.min(bytes.len()),
            expected - 16
        )));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Array2::from_shape_vec((count, rows * cols), data)
        .map_err(|e| Error::Format(format!("image shape error: {e}")))
}

/// Reads an IDX label file into a vector of category ids.
///
/// Layout: big-endian magic `0x00000801`, one big-endian `u32` count, then
/// `count` raw label bytes.
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let bytes = fs::read(&path)?;
    let magic = read_be_u32(&bytes, 0, "magic number")?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::Format(format!(
            "bad label magic number {magic:#010x}, expected {IDX_MAGIC_LABELS:#010x}"
        )));
    }
    let count = read_be_u32(&bytes, 4, "label count")? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::Format(format!(
            "label payload is {} bytes, expected {count}",
            bytes.len() - 8.min(bytes.len())
        )));
    }
    Ok(bytes[8..].iter().map(|&b| u32::from(b)).collect())
}

/// Loads an IDX image file, optionally paired with an IDX label file.
///
/// The two files must agree on the sample count. The dataset name is the
/// image file's stem.
pub fn load_idx(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Dataset> {
    let images = images.as_ref();
    let features = read_idx_images(images)?;
    let labels = match labels {
        Some(p) => {
            let l = read_idx_labels(p)?;
            if l.len() != features.nrows() {
                return Err(Error::Format(format!(
                    "label file has {} entries but image file has {} images",
                    l.len(),
                    features.nrows()
                )));
            }
            Some(l)
        }
        None => None,
    };
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Dataset::new(name, features, labels)
}

// ---------------------------------------------------------------------------
// CSV files
// ---------------------------------------------------------------------------

/// Loads a rectangular numeric CSV table.
///
/// If `label_column` is given, that column must hold non-negative integers
/// and is split off as labels; the remaining columns become features in file
/// order. `has_header` skips the first line. An empty file yields an empty
/// dataset with `d = 0`.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: Option<usize>,
    has_header: bool,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut width: Option<usize> = None;

    let lines = text.lines().skip(usize::from(has_header));
    for (line_idx, line) in lines.enumerate() {
        let row_no = line_idx + 1 + usize::from(has_header);
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Format(format!(
                    "ragged row {row_no}: {} cells, expected {w}",
                    cells.len()
                )));
            }
            _ => {}
        }
        if let Some(col) = label_column {
            if col >= cells.len() {
                return Err(Error::Format(format!(
                    "label column {col} out of range on row {row_no} with {} cells",
                    cells.len()
                )));
            }
        }
        let mut row = Vec::with_capacity(
            cells
                .len()
                .saturating_sub(usize::from(label_column.is_some())),
        );
        for (col, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            if Some(col) == label_column {
                let v: i64 = cell.parse().map_err(|_| {
                    Error::Format(format!("non-integer label {cell:?} at row {row_no}"))
                })?;
                if v < 0 {
                    return Err(Error::Format(format!("negative label {v} at row {row_no}")));
                }
                labels.push(v as u32);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Format(format!(
                        "non-numeric cell {cell:?} at row {row_no}, column {col}"
                    ))
                })?;
                row.push(v);
            }
        }
        rows.push(row);
    }

    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    let features = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Format(format!("csv shape error: {e}")))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".to_string());
    Dataset::new(name, features, label_column.map(|_| labels))
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

/// Generates `k * n_per` samples from isotropic Gaussians at `k`
/// deterministic centers.
///
/// Center `i` sits on coordinate axis `i mod d` at distance
/// `(1 + i/d) * separation` from the origin, so any two centers are at least
/// `separation` apart. Noise is drawn from `N(0, spread^2)` per coordinate
/// using the seeded ChaCha8 stream, which makes output bit-identical across
/// runs and platforms for a fixed seed. Labels record the generating
/// component.
pub fn make_blobs(
    k: usize,
    n_per: usize,
    d: usize,
    spread: f64,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 1 || n_per < 1 || d < 1 {
        return Err(Error::Config(format!(
            "blob generation needs k >= 1, n_per >= 1, d >= 1 (got k={k}, n_per={n_per}, d={d})"
        )));
    }
    if spread.is_nan() || spread < 0.0 || separation.is_nan() || separation < 0.0 {
        return Err(Error::Config(format!(
            "blob spread and separation must be non-negative (got spread={spread}, separation={separation})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k * n_per;
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for blob in 0..k {
        let axis = blob % d;
        let radius = (1.0 + (blob / d) as f64) * separation;
        for s in 0..n_per {
            let row = blob * n_per + s;
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let center = if j == axis { radius } else { 0.0 };
                features[[row, j]] = center + spread * noise;
            }
            let _ = s;
            labels.push(blob as u32);
        }
    }
    Dataset::new(
        format!("blobs-k{k}-n{n_per}-d{d}-s{seed}"),
        features,
        Some(labels),
    )
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

fn row_norm(row: ArrayView1<'_, f64>) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales every nonzero row to unit Euclidean norm.
///
/// Zero rows pass through unchanged — dividing by zero is undefined and
/// dropping samples would desynchronize labels — and their number is
/// returned so callers can surface a warning. Applying this twice equals
/// applying it once (within round-off).
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, usize) {
    let mut out = x.clone();
    let mut zero_rows = 0usize;
    for mut row in out.rows_mut() {
        let norm = row_norm(row.view());
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        } else {
            zero_rows += 1;
        }
    }
    (out, zero_rows)
}

impl Dataset {
    /// Returns a copy with L2-normalized feature rows and the zero-row count.
    pub fn l2_normalized(&self) -> (Dataset, usize) {
        let (features, zero_rows) = l2_normalize_rows(&self.features);
        (
            Dataset {
                name: self.name.clone(),
                features,
                labels: self.labels.clone(),
            },
            zero_rows,
        )
    }
}
