//! `SNFC` checkpoint files.
//!
//! ```text
//! magic "SNFC" | version u32 | fusion u8
//! input_dim d_model n_heads d_ff n_encoder_layers hidden_classifier lc_dense n_classes  (u32 each)
//! dropout_p f64 | proj_bias u8 | cascade_identity u8 | seed u64
//! n_entries u32
//! entry: name_len u32 | name (utf-8) | ndim u32 | dims u64[ndim] | f64[numel]
//! ```
//!
//! Integers and floats are little-endian. Loading rebuilds the model from
//! the stored config and then overwrites every parameter, so a round trip is
//! bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FusionKind, Model, ModelConfig, ModelError};
use crate::diff_engine::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SNFC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 4096;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn u32_field(name: &str, v: usize) -> Result<[u8; 4], ModelError> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| ModelError::Checkpoint(format!("{name} = {v} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<(), ModelError> {
    let c = model.config();
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[c.fusion.code()])?;
    for (name, v) in [
        ("input_dim", c.input_dim),
        ("d_model", c.d_model),
        ("n_heads", c.n_heads),
        ("d_ff", c.d_ff),
        ("n_encoder_layers", c.n_encoder_layers),
        ("hidden_classifier", c.hidden_classifier),
        ("lc_dense", c.lc_dense),
        ("n_classes", c.n_classes),
    ] {
        w.write_all(&u32_field(name, v)?)?;
    }
    w.write_all(&c.dropout_p.to_le_bytes())?;
    w.write_all(&[c.proj_bias as u8, c.cascade_identity as u8])?;
    w.write_all(&c.seed.to_le_bytes())?;

    w.write_all(&u32_field("entry count", model.params().len())?)?;
    let mut buf = Vec::new();
    for (name, t) in model.param_names().iter().zip(model.params()) {
        buf.clear();
        buf.extend_from_slice(&u32_field("name length", name.len())?);
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'r, R> {
    r: &'r mut R,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], ModelError> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => ModelError::Checkpoint(format!("truncated while reading {what}")),
            _ => ModelError::Io(e),
        })?;
        Ok(b)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn flag(&mut self, what: &str) -> Result<bool, ModelError> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(ModelError::Checkpoint(format!("{what} flag is {b}"))),
        }
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model, ModelError> {
    let mut c = Cursor { r };
    let magic: [u8; 4] = c.bytes("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let code = c.u8("fusion kind")?;
    let fusion = FusionKind::from_code(code)
        .ok_or_else(|| ModelError::Checkpoint(format!("unknown fusion code {code}")))?;
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = c.u32("config")? as usize;
    }
    let [input_dim, d_model, n_heads, d_ff, n_encoder_layers, hidden_classifier, lc_dense, n_classes] = dims;
    let config = ModelConfig {
        fusion,
        input_dim,
        d_model,
        n_heads,
        d_ff,
        n_encoder_layers,
        dropout_p: c.f64("dropout")?,
        hidden_classifier,
        lc_dense,
        n_classes,
        proj_bias: c.flag("proj_bias")?,
        cascade_identity: c.flag("cascade_identity")?,
        seed: c.u64("seed")?,
    };
    let mut model = Model::build(config)?;

    let n = c.u32("entry count")? as usize;
    if n != model.params().len() {
        return Err(ModelError::Checkpoint(format!(
            "{n} entries, the configured model has {}",
            model.params().len()
        )));
    }
    let mut params: Vec<Option<Tensor>> = vec![None; n];
    for _ in 0..n {
        let len = c.u32("name length")?;
        if len > MAX_NAME_LEN {
            return Err(ModelError::Checkpoint(format!("name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        c.r.read_exact(&mut name)
            .map_err(|_| ModelError::Checkpoint("truncated while reading a name".into()))?;
        let name = String::from_utf8(name).map_err(|_| ModelError::Checkpoint("name is not utf-8".into()))?;
        let slot = model
            .param_names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unexpected parameter {name}")))?;
        if params[slot].is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate parameter {name}")));
        }
        let expected = model.params()[slot].shape().to_vec();
        let ndim = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(2));
        for _ in 0..ndim {
            shape.push(c.u64("shape")? as usize);
        }
        if shape != expected {
            return Err(ModelError::Checkpoint(format!("{name} has shape {shape:?}, expected {expected:?}")));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(c.f64(&name)?);
        }
        params[slot] = Some(Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if c.r.read(&mut trailing)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after the last entry".into()));
    }
    model.set_params(params.into_iter().map(|p| p.expect("every slot filled")).collect())?;
    Ok(model)
}
