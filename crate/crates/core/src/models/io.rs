//! On-disk container for trained and analytic models.
//!
//! One binary format holds either predictor family, distinguished by a kind
//! tag: magic `PRGM`, a format version, the kind byte, then a payload of
//! little-endian integers and doubles. Serialization is deterministic — the
//! same model always produces the same bytes — so rebuilt artifacts can be
//! compared by hash.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::grid::{GridShape, LatentGrid};
use crate::models::mlp::Dense;
use crate::models::{
    Condition, GaussianMixtureModel, MixtureComponent, MlpConfig, MlpDenoiser, NoisePredictor,
};
use crate::sampler::NoiseSchedule;

const MODEL_MAGIC: &[u8; 4] = b"PRGM";
const MODEL_FORMAT_VERSION: u32 = 1;
const KIND_GMM: u8 = 1;
const KIND_MLP: u8 = 2;
/// Cap on any single stored dimension, to reject nonsense sizes early.
const MAX_DIM: u32 = 1 << 24;

/// A predictor loaded from (or destined for) a model file.
#[derive(Clone, Debug)]
pub enum Model {
    Gmm(GaussianMixtureModel),
    Mlp(MlpDenoiser),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Gmm(_) => "gmm",
            Model::Mlp(_) => "mlp",
        }
    }

    /// The analytic mixture inside, if that is what this model is.
    pub fn as_gmm(&self) -> Option<&GaussianMixtureModel> {
        match self {
            Model::Gmm(m) => Some(m),
            Model::Mlp(_) => None,
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
        match self {
            Model::Gmm(m) => {
                out.write_all(&[KIND_GMM])?;
                write_gmm(m, out)
            }
            Model::Mlp(m) => {
                out.write_all(&[KIND_MLP])?;
                write_mlp(m, out)
            }
        }
    }

    pub fn read_from(input: &mut impl Read) -> Result<Model> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::format("model file", "bad magic bytes"));
        }
        let version = read_u32(input)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::format(
                "model file",
                format!("unsupported version {version}"),
            ));
        }
        let mut kind = [0u8; 1];
        read_exact(input, &mut kind)?;
        match kind[0] {
            KIND_GMM => Ok(Model::Gmm(read_gmm(input)?)),
            KIND_MLP => Ok(Model::Mlp(read_mlp(input)?)),
            other => Err(Error::format(
                "model file",
                format!("unknown model kind {other}"),
            )),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let mut input = BufReader::new(File::open(path)?);
        let model = Model::read_from(&mut input)?;
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::format("model file", "trailing bytes after payload"));
        }
        Ok(model)
    }
}

impl NoisePredictor for Model {
    fn shape(&self) -> GridShape {
        match self {
            Model::Gmm(m) => m.shape(),
            Model::Mlp(m) => m.shape(),
        }
    }

    fn epsilon(
        &self,
        x_t: &LatentGrid,
        t: usize,
        cond: &Condition,
        schedule: &NoiseSchedule,
    ) -> Result<LatentGrid> {
        match self {
            Model::Gmm(m) => m.epsilon(x_t, t, cond, schedule),
            Model::Mlp(m) => m.epsilon(x_t, t, cond, schedule),
        }
    }
}

fn write_shape(shape: GridShape, out: &mut impl Write) -> Result<()> {
    for dim in [shape.channels, shape.width, shape.height] {
        write_u32(dim, out)?;
    }
    Ok(())
}

fn read_shape(input: &mut impl Read) -> Result<GridShape> {
    let c = read_dim(input)?;
    let w = read_dim(input)?;
    let h = read_dim(input)?;
    GridShape::new(c, w, h).map_err(|e| Error::format("model file", e.to_string()))
}

fn write_gmm(m: &GaussianMixtureModel, out: &mut impl Write) -> Result<()> {
    write_shape(m.shape(), out)?;
    write_u32(m.components().len(), out)?;
    for comp in m.components() {
        out.write_all(&comp.weight.to_le_bytes())?;
        out.write_all(&comp.variance.to_le_bytes())?;
        out.write_all(&comp.label.to_le_bytes())?;
        match comp.subject {
            Some(s) => {
                out.write_all(&[1])?;
                out.write_all(&s.to_le_bytes())?;
            }
            None => {
                out.write_all(&[0])?;
                out.write_all(&0u32.to_le_bytes())?;
            }
        }
        for v in comp.mean.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_gmm(input: &mut impl Read) -> Result<GaussianMixtureModel> {
    let shape = read_shape(input)?;
    let n = read_dim(input)?;
    let mut components = Vec::with_capacity(n);
    for _ in 0..n {
        let weight = read_f64(input)?;
        let variance = read_f64(input)?;
        let label = read_u32(input)?;
        let mut flag = [0u8; 1];
        read_exact(input, &mut flag)?;
        let subject_id = read_u32(input)?;
        let subject = match flag[0] {
            0 => None,
            1 => Some(subject_id),
            other => {
                return Err(Error::format(
                    "model file",
                    format!("bad subject flag {other}"),
                ))
            }
        };
        let mean_data = read_f64_vec(input, shape.len())?;
        let mean = LatentGrid::from_vec(shape, mean_data)
            .map_err(|e| Error::format("model file", e.to_string()))?;
        components.push(MixtureComponent {
            weight,
            mean,
            variance,
            label,
            subject,
        });
    }
    GaussianMixtureModel::new(components).map_err(|e| Error::format("model file", e.to_string()))
}

fn write_mlp(m: &MlpDenoiser, out: &mut impl Write) -> Result<()> {
    write_shape(m.shape, out)?;
    let cfg = &m.config;
    write_u32(cfg.n_labels as usize, out)?;
    write_u32(cfg.n_subjects as usize, out)?;
    write_u32(cfg.time_embed, out)?;
    write_u32(cfg.label_embed, out)?;
    write_u32(cfg.hidden.len(), out)?;
    for h in &cfg.hidden {
        write_u32(*h, out)?;
    }
    for layer in &m.layers {
        write_f64_slice(layer.w.as_slice().expect("contiguous"), out)?;
        write_f64_slice(layer.b.as_slice().expect("contiguous"), out)?;
    }
    write_f64_slice(m.label_table.as_slice().expect("contiguous"), out)?;
    write_f64_slice(m.subject_table.as_slice().expect("contiguous"), out)?;
    Ok(())
}

fn read_mlp(input: &mut impl Read) -> Result<MlpDenoiser> {
    let shape = read_shape(input)?;
    let n_labels = read_u32(input)?;
    let n_subjects = read_u32(input)?;
    let time_embed = read_dim(input)?;
    let label_embed = read_dim(input)?;
    let n_hidden = read_dim(input)?;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(read_dim(input)?);
    }
    let config = MlpConfig {
        hidden,
        time_embed,
        label_embed,
        n_labels,
        n_subjects,
    };

    let input_dim = shape.len() + config.time_embed + config.label_embed;
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&config.hidden);
    dims.push(shape.len());
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (rows, cols) = (pair[1], pair[0]);
        let w = read_f64_vec(input, rows * cols)?;
        let b = read_f64_vec(input, rows)?;
        let w = Array2::from_shape_vec((rows, cols), w)
            .map_err(|e| Error::format("model file", e.to_string()))?;
        layers.push(Dense {
            w,
            b: Array1::from_vec(b),
        });
    }
    let label_table = read_table(input, config.n_labels as usize, config.label_embed)?;
    let subject_table = read_table(input, config.n_subjects as usize, config.label_embed)?;
    MlpDenoiser::from_parts(shape, config, layers, label_table, subject_table)
        .map_err(|e| Error::format("model file", e.to_string()))
}

fn read_table(input: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let data = read_f64_vec(input, rows * cols)?;
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::format("model file", e.to_string()))
}

fn write_u32(v: usize, out: &mut impl Write) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::param(format!("value {v} exceeds u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64_slice(vs: &[f64], out: &mut impl Write) -> Result<()> {
    for v in vs {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("model file", "truncated file")
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_dim(input: &mut impl Read) -> Result<usize> {
    let v = read_u32(input)?;
    if v > MAX_DIM {
        return Err(Error::format(
            "model file",
            format!("dimension {v} is implausibly large"),
        ));
    }
    Ok(v as usize)
}

fn read_f64(input: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(input, &mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_f64_vec(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut data = vec![0.0f64; n];
    let mut buf = [0u8; 8];
    for v in &mut data {
        read_exact(input, &mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(data)
}
