//! Binary file formats.
//!
//! Tensors (`.ttn`): magic `TTN1`, `u32` order, the dims as `u32`, then
//! the payload as little-endian `f64`, first index fastest.
//! Masks (`.ttm`): magic `TTM1`, same header, payload `u8` in `{0, 1}`.
//! Model states (`TTMS`): versioned dump of every posterior in
//! declaration order, for checkpoint/resume.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use thiserror::Error;

use crate::model::{CorePosterior, LambdaPosterior, ModelState, PriorHyper, TauPosterior};
use crate::tensor::{DenseTensor, MaskTensor, TensorError};

const TENSOR_MAGIC: &[u8; 4] = b"TTN1";
const MASK_MAGIC: &[u8; 4] = b"TTM1";
const STATE_MAGIC: &[u8; 4] = b"TTMS";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: String, found: [u8; 4] },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], dims: &[usize]) -> Result<(), IoError> {
    w.write_all(magic)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Vec<usize>, IoError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(IoError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found,
        });
    }
    let order = read_u32(r)? as usize;
    if order == 0 || order > 64 {
        return Err(IoError::Corrupt(format!("implausible order {order}")));
    }
    let mut dims = Vec::with_capacity(order);
    for _ in 0..order {
        dims.push(read_u32(r)? as usize);
    }
    Ok(dims)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_f64_slice<W: Write>(w: &mut W, xs: &[f64]) -> Result<(), IoError> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, IoError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

pub fn write_tensor(path: &Path, t: &DenseTensor) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, TENSOR_MAGIC, t.dims())?;
    write_f64_slice(&mut w, t.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let dims = read_header(&mut r, TENSOR_MAGIC)?;
    let n = dims.iter().product();
    let data = read_f64_vec(&mut r, n)?;
    Ok(DenseTensor::new(dims, data)?)
}

pub fn write_mask(path: &Path, m: &MaskTensor) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, MASK_MAGIC, m.dims())?;
    w.write_all(m.bits())?;
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<MaskTensor, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let dims = read_header(&mut r, MASK_MAGIC)?;
    let n: usize = dims.iter().product();
    let mut bits = vec![0u8; n];
    r.read_exact(&mut bits)?;
    Ok(MaskTensor::new(dims, bits)?)
}

pub fn write_state(path: &Path, state: &ModelState) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STATE_MAGIC)?;
    w.write_all(&STATE_VERSION.to_le_bytes())?;
    let d = state.order();
    w.write_all(&(d as u32).to_le_bytes())?;
    for c in &state.cores {
        let (la, lb, j) = c.shape();
        for v in [la, lb, j] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        write_f64_slice(&mut w, c.mean.as_slice().unwrap())?;
        write_f64_slice(&mut w, c.var.as_slice().unwrap())?;
    }
    for lam in &state.lambdas {
        w.write_all(&(lam.len() as u32).to_le_bytes())?;
        write_f64_slice(&mut w, &lam.shape)?;
        write_f64_slice(&mut w, &lam.rate)?;
    }
    write_f64_slice(&mut w, &[state.tau.shape, state.tau.rate])?;
    for i in 0..d.saturating_sub(1) {
        w.write_all(&(state.prior.alpha[i].len() as u32).to_le_bytes())?;
        write_f64_slice(&mut w, &state.prior.alpha[i])?;
        write_f64_slice(&mut w, &state.prior.beta[i])?;
    }
    write_f64_slice(&mut w, &[state.prior.alpha_tau, state.prior.beta_tau])?;
    w.flush()?;
    Ok(())
}

pub fn read_state(path: &Path) -> Result<ModelState, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != STATE_MAGIC {
        return Err(IoError::BadMagic { expected: "TTMS".into(), found });
    }
    let version = read_u32(&mut r)?;
    if version != STATE_VERSION {
        return Err(IoError::BadVersion(version));
    }
    let d = read_u32(&mut r)? as usize;
    if d == 0 || d > 64 {
        return Err(IoError::Corrupt(format!("implausible order {d}")));
    }
    let mut cores = Vec::with_capacity(d);
    for _ in 0..d {
        let la = read_u32(&mut r)? as usize;
        let lb = read_u32(&mut r)? as usize;
        let j = read_u32(&mut r)? as usize;
        let n = la * lb * j;
        let mean = Array3::from_shape_vec((la, lb, j), read_f64_vec(&mut r, n)?)
            .map_err(|e| IoError::Corrupt(e.to_string()))?;
        let var = Array3::from_shape_vec((la, lb, j), read_f64_vec(&mut r, n)?)
            .map_err(|e| IoError::Corrupt(e.to_string()))?;
        cores.push(CorePosterior { mean, var });
    }
    let mut lambdas = Vec::with_capacity(d.saturating_sub(1));
    for _ in 0..d.saturating_sub(1) {
        let n = read_u32(&mut r)? as usize;
        lambdas.push(LambdaPosterior {
            shape: read_f64_vec(&mut r, n)?,
            rate: read_f64_vec(&mut r, n)?,
        });
    }
    let tau = TauPosterior { shape: read_f64(&mut r)?, rate: read_f64(&mut r)? };
    let mut alpha = Vec::with_capacity(d.saturating_sub(1));
    let mut beta = Vec::with_capacity(d.saturating_sub(1));
    for _ in 0..d.saturating_sub(1) {
        let n = read_u32(&mut r)? as usize;
        alpha.push(read_f64_vec(&mut r, n)?);
        beta.push(read_f64_vec(&mut r, n)?);
    }
    let prior = PriorHyper {
        alpha,
        beta,
        alpha_tau: read_f64(&mut r)?,
        beta_tau: read_f64(&mut r)?,
    };
    let state = ModelState { cores, lambdas, tau, prior };
    state.validate().map_err(|e| IoError::Corrupt(e.to_string()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_state, InitConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tmpdir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ttb_io_{name}"));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn tensor_roundtrip() {
        let path = tmpdir("tensor").join("t.ttn");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = DenseTensor::new(vec![3, 2, 4], (0..24).map(|_| rng.random()).collect()).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn mask_roundtrip_and_bad_magic() {
        let path = tmpdir("mask").join("m.ttm");
        let m = MaskTensor::new(vec![2, 3], vec![1, 0, 1, 1, 0, 1]).unwrap();
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn state_roundtrip() {
        let path = tmpdir("state").join("s.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = DenseTensor::new(vec![4, 3, 4], (0..48).map(|_| rng.random()).collect()).unwrap();
        let o = MaskTensor::all_observed(vec![4, 3, 4]).unwrap();
        let state = init_state(&t, &o, &InitConfig::default()).unwrap();
        write_state(&path, &state).unwrap();
        assert_eq!(read_state(&path).unwrap(), state);
    }
}
