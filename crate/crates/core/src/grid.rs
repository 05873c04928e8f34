//! Dense latent grids and scalar fields.
//!
//! A [`LatentGrid`] is a `channels x width x height` block of `f64` values,
//! the common currency of every noise predictor and guidance operation in
//! this crate. Storage is location-major: all channels of one spatial
//! location are contiguous, i.e. entry `(c, w, h)` lives at index
//! `(h * width + w) * channels + c`. Per-location channel vectors are
//! therefore plain slices, which is exactly the access pattern the guidance
//! decomposition wants.
//!
//! Grids are immutable once built; operations return new grids. Constructors
//! reject non-finite entries so that downstream numeric code can assume
//! finite inputs, and arithmetic helpers `debug_assert` the same on their
//! outputs.
//!
//! A [`ScalarField`] is the single-channel `width x height` companion used
//! for per-location statistics.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Magic bytes at the head of the grid binary format.
const GRID_MAGIC: &[u8; 4] = b"LGRD";
/// Current version of the grid binary format.
const GRID_FORMAT_VERSION: u32 = 1;
/// Refuse to allocate grids beyond this many entries when deserializing.
const MAX_GRID_ENTRIES: usize = 1 << 28;

/// Shape of a latent grid: channel count and spatial extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl GridShape {
    pub fn new(channels: usize, width: usize, height: usize) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::param(format!(
                "grid dimensions must be positive, got {channels}x{width}x{height}"
            )));
        }
        Ok(GridShape {
            channels,
            width,
            height,
        })
    }

    /// Number of spatial locations (`width * height`).
    pub fn locations(&self) -> usize {
        self.width * self.height
    }

    /// Total number of scalar entries (`channels * width * height`).
    pub fn len(&self) -> usize {
        self.channels * self.locations()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.width, self.height)
    }
}

/// A dense `channels x width x height` grid of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    shape: GridShape,
    data: Vec<f64>,
}

impl LatentGrid {
    /// All-zero grid of the given shape.
    pub fn zeros(shape: GridShape) -> Self {
        LatentGrid {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Builds a grid from raw data in location-major order.
    ///
    /// Errors if the length does not match the shape or any entry is not
    /// finite.
    pub fn from_vec(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::param(format!(
                "data length {} does not match shape {} ({} entries)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::param(format!(
                "non-finite entry {bad} in grid data"
            )));
        }
        Ok(LatentGrid { shape, data })
    }

    /// Builds a grid by evaluating `f(c, w, h)` at every coordinate.
    pub fn from_fn(shape: GridShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for h in 0..shape.height {
            for w in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(c, w, h));
                }
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        LatentGrid { shape, data }
    }

    /// Grid of i.i.d. standard normal draws from `rng`.
    pub fn standard_normal(shape: GridShape, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        LatentGrid { shape, data }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    /// Raw entries in location-major order.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value at `(c, w, h)`.
    pub fn get(&self, c: usize, w: usize, h: usize) -> Result<f64> {
        self.check_location(w, h)?;
        if c >= self.shape.channels {
            return Err(Error::param(format!(
                "channel {c} out of bounds for {} channels",
                self.shape.channels
            )));
        }
        Ok(self.data[(h * self.shape.width + w) * self.shape.channels + c])
    }

    /// The channel vector at spatial location `(w, h)` as a contiguous slice.
    pub fn channel_vector_at(&self, w: usize, h: usize) -> Result<&[f64]> {
        self.check_location(w, h)?;
        let c = self.shape.channels;
        let start = (h * self.shape.width + w) * c;
        Ok(&self.data[start..start + c])
    }

    /// Iterates over per-location channel vectors in location order.
    pub fn locations(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.shape.channels)
    }

    /// `a * self + other`, elementwise.
    pub fn axpy(&self, a: f64, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_with(other, |x, y| a * x + y)
    }

    /// Elementwise sum.
    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_with(other, |x, y| x + y)
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_with(other, |x, y| x - y)
    }

    /// Every entry multiplied by `a`.
    pub fn scale(&self, a: f64) -> LatentGrid {
        let data: Vec<f64> = self.data.iter().map(|x| a * x).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        LatentGrid {
            shape: self.shape,
            data,
        }
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        let data: Vec<f64> = self.data.iter().map(|x| f(*x)).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        LatentGrid {
            shape: self.shape,
            data,
        }
    }

    /// Inner product over all entries.
    pub fn dot(&self, other: &LatentGrid) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| x * y)
            .sum())
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Multiplies each location's channel vector by the field value there.
    pub fn mul_field(&self, field: &ScalarField) -> Result<LatentGrid> {
        if field.width() != self.shape.width || field.height() != self.shape.height {
            return Err(Error::param(format!(
                "field {}x{} does not match grid {}",
                field.width(),
                field.height(),
                self.shape
            )));
        }
        let c = self.shape.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for (vec, s) in self.data.chunks_exact(c).zip(field.data()) {
            data.extend(vec.iter().map(|x| x * s));
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Ok(LatentGrid {
            shape: self.shape,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the grid in the binary format (see module docs of [`crate::grid`]).
    ///
    /// Layout: magic `LGRD`, format version, `channels`, `width`, `height`
    /// as little-endian `u32`, then all entries as little-endian `f64` in
    /// location-major order.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(GRID_MAGIC)?;
        out.write_all(&GRID_FORMAT_VERSION.to_le_bytes())?;
        for dim in [self.shape.channels, self.shape.width, self.shape.height] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::param(format!("dimension {dim} exceeds u32")))?;
            out.write_all(&dim.to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a grid written by [`LatentGrid::write_to`].
    pub fn read_from(input: &mut impl Read) -> Result<LatentGrid> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic, "grid file")?;
        if &magic != GRID_MAGIC {
            return Err(Error::format("grid file", "bad magic bytes"));
        }
        let version = read_u32(input, "grid file")?;
        if version != GRID_FORMAT_VERSION {
            return Err(Error::format(
                "grid file",
                format!("unsupported version {version}"),
            ));
        }
        let channels = read_u32(input, "grid file")? as usize;
        let width = read_u32(input, "grid file")? as usize;
        let height = read_u32(input, "grid file")? as usize;
        let shape = GridShape::new(channels, width, height)
            .map_err(|e| Error::format("grid file", e.to_string()))?;
        if shape.len() > MAX_GRID_ENTRIES {
            return Err(Error::format("grid file", "grid too large"));
        }
        let mut data = vec![0.0f64; shape.len()];
        let mut buf = [0u8; 8];
        for v in &mut data {
            read_exact(input, &mut buf, "grid file")?;
            *v = f64::from_le_bytes(buf);
        }
        LatentGrid::from_vec(shape, data).map_err(|e| Error::format("grid file", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LatentGrid> {
        let mut input = BufReader::new(File::open(path)?);
        let grid = LatentGrid::read_from(&mut input)?;
        // Trailing garbage means the file was not produced by `save`.
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::format("grid file", "trailing bytes after payload"));
        }
        Ok(grid)
    }

    fn check_location(&self, w: usize, h: usize) -> Result<()> {
        if w >= self.shape.width || h >= self.shape.height {
            return Err(Error::IndexOutOfBounds {
                w,
                h,
                width: self.shape.width,
                height: self.shape.height,
            });
        }
        Ok(())
    }

    fn check_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.check_shape(other)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Ok(LatentGrid {
            shape: self.shape,
            data,
        })
    }
}

/// A `width x height` field of per-location scalars, stored row-major
/// (`data[h * width + w]`), matching the location order of [`LatentGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!(
                "field dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(ScalarField {
            width,
            height,
            data: vec![0.0; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::param(format!(
                "data length {} does not match {width}x{height} field",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::param(format!(
                "non-finite entry {bad} in field data"
            )));
        }
        Ok(ScalarField {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, w: usize, h: usize) -> Result<f64> {
        if w >= self.width || h >= self.height {
            return Err(Error::IndexOutOfBounds {
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.data[h * self.width + w])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        let data: Vec<f64> = self.data.iter().map(|x| f(*x)).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        ScalarField {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Population mean and standard deviation of the field.
    ///
    /// The variance divides by the number of locations, not `n - 1`: the
    /// field is the whole population of locations, not a sample from one.
    pub fn mean_std(&self) -> (f64, f64) {
        field_mean_std(&self.data)
    }
}

/// Population mean and standard deviation of a slice of values.
pub fn field_mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(what, "truncated file")
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(input: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}
