//! Binary checkpoints.
//!
//! Layout (little-endian): magic `CASR`, `u32` version, `u32` length of the
//! hyperparameter text followed by that UTF-8 text, `u32` tensor count, then
//! per tensor `u32 rows, u32 cols` and `rows * cols` `f64` values in
//! row-major order. Tensor order is the order of [`ModelParams::tensors`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{hyperparams_from_text, hyperparams_to_text};
use crate::error::{CaserError, Result};
use crate::model::{HyperParams, ModelParams};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"CASR";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, hp: &HyperParams) -> Result<()> {
    params.check_shapes(hp)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let text = hyperparams_to_text(hp);
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (_, m) in tensors {
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CaserError::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelParams, HyperParams)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4).ok() != Some(&MAGIC[..]) {
        return Err(CaserError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CaserError::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(len)?)
        .map_err(|_| CaserError::Format("hyperparameter block is not UTF-8".into()))?;
    let hp = hyperparams_from_text(text)?;
    let count = c.u32()? as usize;
    let mut mats = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let bytes = c.take(rows.saturating_mul(cols).saturating_mul(8))?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        mats.push(Matrix::from_vec(rows, cols, data));
    }
    if c.pos != buf.len() {
        return Err(CaserError::Format("trailing bytes after checkpoint".into()));
    }
    if mats.len() < 2 {
        return Err(CaserError::Format("checkpoint has too few tensors".into()));
    }
    let mut params = ModelParams::zeros(&hp, mats[0].rows(), mats[1].rows().saturating_sub(1));
    if params.tensors().len() != mats.len() {
        return Err(CaserError::ShapeMismatch(format!(
            "checkpoint has {} tensors, hyperparameters imply {}",
            mats.len(),
            params.tensors().len()
        )));
    }
    for ((kind, slot), m) in params.tensors_mut().into_iter().zip(mats) {
        if slot.shape() != m.shape() {
            return Err(CaserError::ShapeMismatch(format!(
                "{kind:?}: stored {:?}, hyperparameters imply {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    Ok((params, hp))
}

pub fn save(path: impl AsRef<Path>, params: &ModelParams, hp: &HyperParams) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params, hp)
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, HyperParams)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Loads and checks that the stored network has the shape `expected`
/// describes.
pub fn load_expecting(path: impl AsRef<Path>, expected: &HyperParams) -> Result<(ModelParams, HyperParams)> {
    let (params, hp) = load(path)?;
    params.check_shapes(expected)?;
    Ok((params, hp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(dim: usize) -> (ModelParams, HyperParams) {
        let hp = HyperParams {
            dim,
            markov_order: 3,
            heights: vec![1, 3],
            filters_per_height: 2,
            vertical_filters: 2,
            ..Default::default()
        };
        (init_params(&hp, 4, 9, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(), hp)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, hp) = model(10);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &hp).unwrap();
        let (q, hq) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(hq, hp);
        for ((_, a), (_, b)) in p.tensors().iter().zip(q.tensors()) {
            let a: Vec<u64> = a.as_slice().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = b.as_slice().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_and_truncated_inputs_fail() {
        let (p, hp) = model(10);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &hp).unwrap();
        let mut bad = buf.clone();
        bad[1] ^= 0xff;
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(CaserError::Format(_))));
        assert!(matches!(
            read_checkpoint(&buf[..buf.len() - 3]),
            Err(CaserError::Format(_))
        ));
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (p, hp) = model(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.casr");
        save(&path, &p, &hp).unwrap();
        let (_, other) = model(20);
        assert!(matches!(
            load_expecting(&path, &other),
            Err(CaserError::ShapeMismatch(_))
        ));
        assert!(load_expecting(&path, &hp).is_ok());
    }
}
