//! Data model and on-disk formats: voxel response matrices (LDM1 binary),
//! images (binary PPM), ROI masks (plain text), and the dataset bundle
//! tying them together.
//!
//! Matrices are stored as 32-bit floats for economy; all computation
//! elsewhere runs in f64. NaN or Inf anywhere in a loaded file is a hard
//! error: silently masked non-finite voxels would degrade decoding quality
//! without any visible failure.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const LDM1_MAGIC: &[u8; 4] = b"LDM1";

/// Row-major f32 matrix; the payload type of every LDM1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "matrix {}x{} needs {} values, got {}",
                    rows,
                    cols,
                    rows * cols,
                    values.len()
                ),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("matrix value {v}"),
            });
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Build from f64 values, truncating to f32 storage.
    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Matrix::new(rows, cols, values.iter().map(|&v| v as f32).collect())
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_f64(&self, r: usize) -> Vec<f64> {
        self.row(r).iter().map(|&v| v as f64).collect()
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Read an LDM1 matrix file. Strict: magic, reserved word, payload length,
/// and finiteness are all validated.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    if &header[0..4] != LDM1_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "LDM1".into(),
        });
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let reserved = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if reserved != 0 {
        return Err(Error::UnknownFormat {
            path: path.to_path_buf(),
            detail: format!("reserved header word is {reserved}, expected 0"),
        });
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != rows * cols * 4 {
        return Err(Error::ShapeMismatch {
            context: format!(
                "{}: header declares {}x{} ({} bytes), payload has {} bytes",
                path.display(),
                rows,
                cols,
                rows * cols * 4,
                payload.len()
            ),
        });
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{}: payload value {v}", path.display()),
            });
        }
        values.push(v);
    }
    Matrix::new(rows, cols, values)
}

/// Write an LDM1 matrix file; bit-exact deterministic for equal inputs.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + m.values.len() * 4);
    bytes.extend_from_slice(LDM1_MAGIC);
    bytes.extend_from_slice(&(m.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for v in &m.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// CSV import for small fixtures: one row per line, comma-separated floats.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(Error::UnknownFormat {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {} fields, expected {}", lineno + 1, fields.len(), c),
                })
            }
            _ => {}
        }
        for f in fields {
            let v: f32 = f.trim().parse().map_err(|_| Error::UnknownFormat {
                path: path.to_path_buf(),
                detail: format!("line {}: bad float {f:?}", lineno + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{}: csv value {v}", path.display()),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), values)
}

/// RGB image with values in [0,1], stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    map: FeatureMap,
}

impl ImageTensor {
    /// Wrap a 3-channel feature map, validating the [0,1] range invariant.
    pub fn from_map(map: FeatureMap) -> Result<Self> {
        if map.channels != 3 || map.height == 0 || map.width == 0 {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "image must be 3x h x w with positive dims, got {}x{}x{}",
                    map.channels, map.height, map.width
                ),
            });
        }
        if let Some(v) = map.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::NonFinite {
                context: format!("image value {v} outside [0,1]"),
            });
        }
        Ok(ImageTensor { map })
    }

    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ImageTensor::from_map(FeatureMap::from_vec(3, height, width, values)?)
    }

    pub fn height(&self) -> usize {
        self.map.height
    }

    pub fn width(&self) -> usize {
        self.map.width
    }

    pub fn values(&self) -> &[f64] {
        &self.map.data
    }

    pub fn as_map(&self) -> &FeatureMap {
        &self.map
    }
}

/// Write a binary PPM (P6, maxval 255); each value maps to round(v*255).
pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let m = image.as_map();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((m.at(c, y, x) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Read a binary PPM written by `write_ppm` (P6, maxval 255 only).
pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |detail: &str| Error::UnknownFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    // header: three whitespace-separated tokens after "P6"
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "P6".into(),
        });
    }
    let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    if token()? != "255" {
        return Err(bad("maxval must be 255"));
    }
    pos += 1; // single whitespace byte after maxval
    let payload = &bytes[pos..];
    if payload.len() != 3 * w * h {
        return Err(Error::ShapeMismatch {
            context: format!(
                "{}: expected {} pixel bytes, got {}",
                path.display(),
                3 * w * h,
                payload.len()
            ),
        });
    }
    let mut map = FeatureMap::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                *map.at_mut(c, y, x) = payload[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    ImageTensor::from_map(map)
}

/// Named voxel subset; indices sorted, deduplicated, all < n_voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub name: String,
    pub voxel_indices: Vec<usize>,
}

/// Parse an ROI mask file: one `NAME: idx idx ...` per line, `#` comments.
pub fn read_roi_masks(path: &Path, n_voxels: usize) -> Result<Vec<RoiMask>> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut masks = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line.split_once(':').ok_or_else(|| Error::UnknownFormat {
            path: path.to_path_buf(),
            detail: format!("line {}: expected `NAME: idx ...`", lineno + 1),
        })?;
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::UnknownFormat {
                path: path.to_path_buf(),
                detail: format!("line {}: empty ROI name", lineno + 1),
            });
        }
        let mut indices = BTreeSet::new();
        for tok in rest.split_whitespace() {
            let idx: usize = tok.parse().map_err(|_| Error::UnknownFormat {
                path: path.to_path_buf(),
                detail: format!("line {}: bad index {tok:?}", lineno + 1),
            })?;
            if idx >= n_voxels {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    limit: n_voxels,
                    context: format!("ROI {name}"),
                });
            }
            indices.insert(idx);
        }
        if indices.is_empty() {
            return Err(Error::UnknownFormat {
                path: path.to_path_buf(),
                detail: format!("line {}: ROI {name} has no voxels", lineno + 1),
            });
        }
        masks.push(RoiMask {
            name: name.to_string(),
            voxel_indices: indices.into_iter().collect(),
        });
    }
    Ok(masks)
}

/// Voxel responses plus stimulus bookkeeping for one subject.
#[derive(Debug, Clone)]
pub struct DecodingDataset {
    pub x_train: Matrix,
    pub train_stimulus_ids: Vec<String>,
    pub x_test_trials: Matrix,
    pub test_trial_stimulus_ids: Vec<String>,
    pub n_voxels: usize,
    pub roi_masks: Vec<RoiMask>,
}

impl DecodingDataset {
    pub fn new(
        x_train: Matrix,
        train_stimulus_ids: Vec<String>,
        x_test_trials: Matrix,
        test_trial_stimulus_ids: Vec<String>,
        roi_masks: Vec<RoiMask>,
    ) -> Result<Self> {
        let n_voxels = x_train.cols;
        if x_test_trials.cols != n_voxels {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "train has {} voxels, test has {}",
                    n_voxels, x_test_trials.cols
                ),
            });
        }
        if x_train.rows != train_stimulus_ids.len() || x_test_trials.rows != test_trial_stimulus_ids.len()
        {
            return Err(Error::ShapeMismatch {
                context: "row count does not match stimulus ID count".into(),
            });
        }
        // every test stimulus must repeat the same number of times
        let mut counts: Vec<(usize, &String)> = Vec::new();
        for id in &test_trial_stimulus_ids {
            match counts.iter_mut().find(|(_, i)| *i == id) {
                Some((c, _)) => *c += 1,
                None => counts.push((1, id)),
            }
        }
        if let Some(&(first, _)) = counts.first() {
            if let Some((c, id)) = counts.iter().find(|(c, _)| *c != first) {
                return Err(Error::ShapeMismatch {
                    context: format!("stimulus {id} has {c} repetitions, expected {first}"),
                });
            }
        }
        let train_set: BTreeSet<&String> = train_stimulus_ids.iter().collect();
        if let Some(id) = test_trial_stimulus_ids.iter().find(|id| train_set.contains(id)) {
            return Err(Error::ShapeMismatch {
                context: format!("stimulus {id} appears in both train and test"),
            });
        }
        for mask in &roi_masks {
            if let Some(&idx) = mask.voxel_indices.iter().find(|&&i| i >= n_voxels) {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    limit: n_voxels,
                    context: format!("ROI {}", mask.name),
                });
            }
        }
        Ok(DecodingDataset {
            x_train,
            train_stimulus_ids,
            x_test_trials,
            test_trial_stimulus_ids,
            n_voxels,
            roi_masks,
        })
    }
}

/// Average repeated trials of each stimulus into one row per unique ID,
/// in first-appearance order.
///
/// Per-cell addends are sorted by value before summation, which makes the
/// result exactly invariant to trial row order within an ID.
pub fn average_repetitions(
    x_test_trials: &Matrix,
    trial_ids: &[String],
) -> Result<(Matrix, Vec<String>)> {
    if x_test_trials.rows == 0 || trial_ids.is_empty() {
        return Err(Error::EmptyInput {
            context: "average_repetitions".into(),
        });
    }
    if x_test_trials.rows != trial_ids.len() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "{} trial rows but {} trial IDs",
                x_test_trials.rows,
                trial_ids.len()
            ),
        });
    }
    let mut order: Vec<&String> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (row, id) in trial_ids.iter().enumerate() {
        match order.iter().position(|&o| o == id) {
            Some(g) => groups[g].push(row),
            None => {
                order.push(id);
                groups.push(vec![row]);
            }
        }
    }
    let cols = x_test_trials.cols;
    let mut values = Vec::with_capacity(order.len() * cols);
    for group in &groups {
        for c in 0..cols {
            let mut addends: Vec<f64> =
                group.iter().map(|&r| x_test_trials.at(r, c) as f64).collect();
            addends.sort_by(|a, b| a.total_cmp(b));
            let sum: f64 = addends.iter().sum();
            values.push((sum / group.len() as f64) as f32);
        }
    }
    Ok((
        Matrix::new(order.len(), cols, values)?,
        order.into_iter().cloned().collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matrix_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ldm1");
        let m = Matrix::new(3, 4, (0..12).map(|v| v as f32).collect()).unwrap();
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn matrix_roundtrip_large_random() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.ldm1");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f32> = (0..1000 * 500).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let m = Matrix::new(1000, 500, values).unwrap();
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.values, m.values);
        // writer-side checksum: writing the reread matrix gives identical bytes
        let path2 = dir.path().join("big2.ldm1");
        write_matrix(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn short_payload_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ldm1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LDM1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_matrix(&path),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ldm1");
        fs::write(&path, b"NOPE\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn nonzero_reserved_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rsv.ldm1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LDM1");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&7u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_matrix(&path),
            Err(Error::UnknownFormat { .. })
        ));
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ldm1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LDM1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ldm1");
        write_matrix(&path, &Matrix::zeros(0, 0)).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 16);
        assert_eq!(read_matrix(&path).unwrap(), Matrix::zeros(0, 0));
    }

    #[test]
    fn identity_payload_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("id.ldm1");
        let m = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        write_matrix(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        let payload: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(payload, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn write_twice_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        let m = Matrix::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        write_matrix(&p1, &m).unwrap();
        write_matrix(&p2, &m).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn average_repetitions_means_and_order() {
        let m = Matrix::new(3, 2, vec![0.0, 0.0, 2.0, 4.0, 9.0, 9.0]).unwrap();
        let ids = vec!["b".to_string(), "b".to_string(), "a".to_string()];
        let (avg, order) = average_repetitions(&m, &ids).unwrap();
        assert_eq!(order, vec!["b".to_string(), "a".to_string()]);
        assert_eq!(avg.row(0), &[1.0, 2.0]);
        assert_eq!(avg.row(1), &[9.0, 9.0]);
    }

    #[test]
    fn average_repetitions_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = 12;
        let values: Vec<f32> = (0..rows * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ids: Vec<String> = (0..rows).map(|i| format!("s{}", i % 3)).collect();
        let m = Matrix::new(rows, 3, values.clone()).unwrap();
        let (a1, order1) = average_repetitions(&m, &ids).unwrap();
        // reverse trial order; grouped means must match bit-exactly
        let rev_values: Vec<f32> = (0..rows)
            .rev()
            .flat_map(|r| m.row(r).to_vec())
            .collect();
        let rev_ids: Vec<String> = ids.iter().rev().cloned().collect();
        let m2 = Matrix::new(rows, 3, rev_values).unwrap();
        let (a2, order2) = average_repetitions(&m2, &rev_ids).unwrap();
        for (pos2, id) in order2.iter().enumerate() {
            let pos1 = order1.iter().position(|i| i == id).unwrap();
            assert_eq!(a2.row(pos2), a1.row(pos1), "id {id}");
        }
    }

    #[test]
    fn average_single_repetition_is_identity() {
        let m = Matrix::new(2, 2, vec![0.25, 0.5, 0.75, 1.0]).unwrap();
        let ids = vec!["x".to_string(), "y".to_string()];
        let (avg, order) = average_repetitions(&m, &ids).unwrap();
        assert_eq!(avg, m);
        assert_eq!(order, ids);
    }

    #[test]
    fn roi_mask_parse_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rois.txt");
        fs::write(&path, "# comment\nV1: 2 0 1 1\nFFA: 5 6 # inline\n").unwrap();
        let masks = read_roi_masks(&path, 10).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0].name, "V1");
        assert_eq!(masks[0].voxel_indices, vec![0, 1, 2]);
        assert_eq!(masks[1].voxel_indices, vec![5, 6]);
        fs::write(&path, "V1: 10\n").unwrap();
        assert!(matches!(
            read_roi_masks(&path, 10),
            Err(Error::IndexOutOfRange { .. })
        ));
        fs::write(&path, "V1:\n").unwrap();
        assert!(matches!(
            read_roi_masks(&path, 10),
            Err(Error::UnknownFormat { .. })
        ));
    }

    #[test]
    fn overlapping_rois_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rois.txt");
        fs::write(&path, "FFA: 5 6\nLOC: 6 7\n").unwrap();
        assert_eq!(read_roi_masks(&path, 10).unwrap().len(), 2);
    }

    #[test]
    fn dataset_validates_repetitions_and_disjointness() {
        let x_train = Matrix::zeros(2, 3);
        let x_test = Matrix::zeros(4, 3);
        let ok = DecodingDataset::new(
            x_train.clone(),
            vec!["t1".into(), "t2".into()],
            x_test.clone(),
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            vec![],
        );
        assert!(ok.is_ok());
        let uneven = DecodingDataset::new(
            x_train.clone(),
            vec!["t1".into(), "t2".into()],
            x_test.clone(),
            vec!["a".into(), "a".into(), "a".into(), "b".into()],
            vec![],
        );
        assert!(uneven.is_err());
        let overlap = DecodingDataset::new(
            x_train,
            vec!["a".into(), "t2".into()],
            x_test,
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            vec![],
        );
        assert!(overlap.is_err());
    }

    #[test]
    fn ppm_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let values: Vec<f64> = (0..3 * 4 * 4).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = ImageTensor::new(4, 4, values).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        // values on the 1/255 grid survive the byte round-trip exactly
        assert_eq!(back.values(), img.values());
    }

    #[test]
    fn image_range_enforced() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.1]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }
}
