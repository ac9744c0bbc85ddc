//! MNIST-style IDX ingestion, synthetic-dataset persistence in the same
//! container, and PGM grid rendering for visual inspection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the directory that holds the four canonical
/// MNIST IDX files; defaults to `data/mnist` under the current directory.
pub const MNIST_DIR_ENV: &str = "MNIST_DIR";

/// Resolves the MNIST data directory from `MNIST_DIR` or the default.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Images paired with one-hot labels; the unit every pipeline stage consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Matrix,
    labels: Matrix,
    num_classes: usize,
}

impl LabeledDataset {
    /// Builds a dataset, checking the invariants: matching row counts,
    /// pixels in [0,1], and strictly one-hot label rows.
    pub fn new(images: Matrix, labels: Matrix) -> Result<Self> {
        if images.rows() != labels.rows() {
            return Err(Error::Shape(format!(
                "image rows {} vs label rows {}",
                images.rows(),
                labels.rows()
            )));
        }
        if labels.cols() == 0 {
            return Err(Error::Shape("labels need at least one class column".into()));
        }
        for (i, &p) in images.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Param(format!(
                    "pixel {} of flattened image data is {p}, outside [0,1]",
                    i
                )));
            }
        }
        for r in 0..labels.rows() {
            let row = labels.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != row.len() - 1 {
                return Err(Error::Param(format!("label row {r} is not one-hot")));
            }
        }
        let num_classes = labels.cols();
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.images.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    /// Class index of example `i` (argmax of its one-hot row).
    pub fn class_of(&self, i: usize) -> usize {
        let row = self.labels.row(i);
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("labels are finite"))
            .map(|(j, _)| j)
            .expect("non-empty label row")
    }

    /// The first `n` examples in file order.
    pub fn take(&self, n: usize) -> Result<LabeledDataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Param(format!(
                "cannot take {n} examples from a dataset of {}",
                self.len()
            )));
        }
        Ok(LabeledDataset {
            images: self.images.slice_rows(0, n)?,
            labels: self.labels.slice_rows(0, n)?,
            num_classes: self.num_classes,
        })
    }
}

/// One-hot encodes byte labels over `num_classes` columns.
pub fn one_hot(labels: &[u8], num_classes: usize) -> Result<Matrix> {
    if num_classes == 0 {
        return Err(Error::Param("num_classes must be positive".into()));
    }
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::Param(format!(
                "label {l} at row {i} exceeds {} classes",
                num_classes
            )));
        }
        m.set(i, l as usize, 1.0);
    }
    Ok(m)
}

/// Inverts [`one_hot`]: argmax per row back to byte labels.
pub fn one_hot_decode(labels: &Matrix) -> Vec<u8> {
    (0..labels.rows())
        .map(|r| {
            labels
                .row(r)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("labels are finite"))
                .map(|(j, _)| j as u8)
                .expect("non-empty row")
        })
        .collect()
}

/// Parsed IDX header: big-endian magic plus per-dimension sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    /// Header length in bytes (magic + one u32 per dimension).
    pub fn byte_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    /// Payload element count implied by the dims.
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: offset as u64,
            message: format!("file truncated: needed 4 bytes, had {}", bytes.len() - offset),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn parse_idx<'a>(bytes: &'a [u8], path: &Path) -> Result<(IdxHeader, &'a [u8])> {
    let magic = read_u32_be(bytes, 0, path)?;
    let ndims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                message: format!("bad magic 0x{other:08x} (expected 0x00000803 or 0x00000801)"),
            })
        }
    };
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(read_u32_be(bytes, 4 + 4 * d, path)?);
    }
    let header = IdxHeader { magic, dims };
    let start = header.byte_len();
    let expected = header.element_count();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: start as u64,
            message: format!(
                "payload length {} does not match header ({} elements expected)",
                payload.len(),
                expected
            ),
        });
    }
    Ok((header, payload))
}

/// Loads an image/label IDX pair into a dataset: pixels scaled by 1/255,
/// labels one-hot over 10 classes, row order preserved.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = fs::read(images_path)
        .map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let label_bytes = fs::read(labels_path)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;

    let (img_header, img_payload) = parse_idx(&image_bytes, images_path)?;
    if img_header.magic != IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            offset: 0,
            message: format!(
                "expected image magic 0x{IMAGES_MAGIC:08x}, found 0x{:08x}",
                img_header.magic
            ),
        });
    }
    let (lbl_header, lbl_payload) = parse_idx(&label_bytes, labels_path)?;
    if lbl_header.magic != LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 0,
            message: format!(
                "expected label magic 0x{LABELS_MAGIC:08x}, found 0x{:08x}",
                lbl_header.magic
            ),
        });
    }

    let n = img_header.dims[0] as usize;
    if lbl_header.dims[0] as usize != n {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 4,
            message: format!(
                "label count {} does not match image count {n}",
                lbl_header.dims[0]
            ),
        });
    }
    let pixel_dim = (img_header.dims[1] as usize) * (img_header.dims[2] as usize);

    let data: Vec<f64> = img_payload.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Matrix::new(n, pixel_dim, data)?;
    let labels = one_hot(lbl_payload, 10).map_err(|_| {
        let bad = lbl_payload.iter().position(|&l| l >= 10).unwrap_or(0);
        Error::Format {
            path: labels_path.display().to_string(),
            offset: (lbl_header.byte_len() + bad) as u64,
            message: format!("label byte {} exceeds 9", lbl_payload[bad]),
        }
    })?;
    LabeledDataset::new(images, labels)
}

fn square_side(dim: usize) -> Result<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(Error::Param(format!(
            "feature dimension {dim} is not a square image"
        )));
    }
    Ok(side)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Persists a dataset as an IDX pair. Pixels quantize to `round(p·255)`, so a
/// round-trip reproduces values to within 1/510.
pub fn save_idx(
    dataset: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let n = dataset.len();
    let side = square_side(dataset.feature_dim())?;

    let mut img_bytes = Vec::with_capacity(16 + n * dataset.feature_dim());
    img_bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(side as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(side as u32).to_be_bytes());
    img_bytes.extend(
        dataset
            .images()
            .data()
            .iter()
            .map(|&p| (p * 255.0).round() as u8),
    );

    let mut lbl_bytes = Vec::with_capacity(8 + n);
    lbl_bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    lbl_bytes.extend(one_hot_decode(dataset.labels()));

    write_file(images_path, &img_bytes)?;
    write_file(labels_path, &lbl_bytes)
}

/// Renders the dataset's images as a binary PGM tile grid. When the labels
/// provide at least `cols` examples of every class `0..rows`, row `r` shows
/// class `r`; otherwise images appear in file order.
pub fn render_grid(
    dataset: &LabeledDataset,
    rows: usize,
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if rows == 0 || cols == 0 {
        return Err(Error::Param("grid must have at least one row and column".into()));
    }
    if rows * cols > dataset.len() {
        return Err(Error::Param(format!(
            "grid of {rows}×{cols} needs {} images, dataset has {}",
            rows * cols,
            dataset.len()
        )));
    }
    let side = square_side(dataset.feature_dim())?;

    // Prefer one class per row: row r = first `cols` examples of class r.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for i in 0..dataset.len() {
        let c = dataset.class_of(i);
        if by_class[c].len() < cols {
            by_class[c].push(i);
        }
    }
    let classed = rows <= dataset.num_classes()
        && by_class.iter().take(rows).all(|v| v.len() >= cols);
    let index_at = |r: usize, c: usize| -> usize {
        if classed {
            by_class[r][c]
        } else {
            r * cols + c
        }
    };

    let width = cols * side;
    let height = rows * side;
    let mut pixels = vec![0u8; width * height];
    for r in 0..rows {
        for c in 0..cols {
            let img = dataset.images().row(index_at(r, c));
            for y in 0..side {
                for x in 0..side {
                    let v = (img[y * side + x] * 255.0).round() as u8;
                    pixels[(r * side + y) * width + c * side + x] = v;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(32 + pixels.len());
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(&pixels);
    write_file(path, &out)
}
