//! Versioned binary model container.
//!
//! ```text
//! magic        8 bytes  "EVADMODL"
//! version      u32
//! config       n_input u64, n_target u64, embed_dim u64, hidden_dim u64,
//!              learning_rate f64, l2_weight f64, rng_seed u64
//! parameters   w_emb, w_z, b_z, w_r, b_r, w_n, b_n, w_o, b_o
//! adam.m       same nine tensors
//! adam.v       same nine tensors
//! adam.steps   3 × u64 (embedding, cell, output)
//! ```
//!
//! Every number is little-endian; tensors are row-major `f64` with shapes
//! implied by the config block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AdamState, ModelConfig, ModelError, ModelState, Parameters, Result};

pub const MODEL_MAGIC: [u8; 8] = *b"EVADMODL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Upper bound on any single dimension read from a file.
const MAX_DIM: u64 = 1 << 24;

fn truncated(e: std::io::Error) -> ModelError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ModelError::Format("file is truncated".into())
    } else {
        ModelError::Io(e)
    }
}

fn write_params<W: Write>(w: &mut W, p: &Parameters) -> std::io::Result<()> {
    for t in p.tensors() {
        for &x in t.data {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R, cfg: &ModelConfig) -> Result<Parameters> {
    let mut p = Parameters::zeros(cfg);
    for (_, t) in p.tensors_mut() {
        r.read_f64_into::<LittleEndian>(t).map_err(truncated)?;
    }
    Ok(p)
}

pub fn write_model<W: Write>(mut w: W, model: &ModelState) -> Result<()> {
    let c = &model.config;
    w.write_all(&MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_FORMAT_VERSION)?;
    for d in [c.n_input, c.n_target, c.embed_dim, c.hidden_dim] {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    w.write_f64::<LittleEndian>(c.learning_rate)?;
    w.write_f64::<LittleEndian>(c.l2_weight)?;
    w.write_u64::<LittleEndian>(c.rng_seed)?;
    write_params(&mut w, &model.params)?;
    write_params(&mut w, &model.adam.m)?;
    write_params(&mut w, &model.adam.v)?;
    for s in model.adam.steps {
        w.write_u64::<LittleEndian>(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<ModelState> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != MODEL_MAGIC {
        return Err(ModelError::Version(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelError::Version(format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let v = r.read_u64::<LittleEndian>().map_err(truncated)?;
        if v > MAX_DIM {
            return Err(ModelError::Format(format!("dimension {v} out of range")));
        }
        *d = v as usize;
    }
    let config = ModelConfig {
        n_input: dims[0],
        n_target: dims[1],
        embed_dim: dims[2],
        hidden_dim: dims[3],
        learning_rate: r.read_f64::<LittleEndian>().map_err(truncated)?,
        l2_weight: r.read_f64::<LittleEndian>().map_err(truncated)?,
        rng_seed: r.read_u64::<LittleEndian>().map_err(truncated)?,
    };
    config.validate().map_err(|e| ModelError::Format(e.to_string()))?;
    let params = read_params(&mut r, &config)?;
    let m = read_params(&mut r, &config)?;
    let v = read_params(&mut r, &config)?;
    let mut steps = [0u64; 3];
    for s in &mut steps {
        *s = r.read_u64::<LittleEndian>().map_err(truncated)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::Format("trailing bytes after model".into()));
    }
    Ok(ModelState { config, params, adam: AdamState { m, v, steps } })
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelState) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{optimizer_step, ParamMask};

    fn trained() -> ModelState {
        let mut m = ModelState::new(ModelConfig { embed_dim: 3, hidden_dim: 5, rng_seed: 9, ..ModelConfig::new(6, 4) }).unwrap();
        let mut g = Parameters::init(&ModelConfig { rng_seed: 10, ..m.config.clone() });
        g.scale(0.1);
        optimizer_step(&mut m, &g, ParamMask::ALL).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = trained();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(back.params_bits_equal(&m));
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let mut buf = Vec::new();
        write_model(&mut buf, &trained()).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_model(buf.as_slice()), Err(ModelError::Version(_))));
        let mut buf2 = Vec::new();
        write_model(&mut buf2, &trained()).unwrap();
        buf2[8] = 99;
        assert!(matches!(read_model(buf2.as_slice()), Err(ModelError::Version(_))));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let mut buf = Vec::new();
        write_model(&mut buf, &trained()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_model(buf.as_slice()), Err(ModelError::Format(_))));
    }
}
