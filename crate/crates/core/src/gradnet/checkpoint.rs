//! Binary checkpoint: `TSHNCKPT`, version, architecture, named little-endian
//! `f32` parameter blobs, then optional optimizer state.

use std::io::{Read, Write};

use super::{Architecture, EmbeddingNetwork, Optimizer, OptimizerKind, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSHNCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;
/// Only valid convolutions exist; recorded so readers can reject other layouts.
const PADDING_VALID: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: EmbeddingNetwork<f32>,
    pub optimizer: Option<Optimizer<f32>>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format("value exceeds u32".into()))?;
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    put_u32(w, data.len())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(take(r)?) as usize)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

fn get_f32s(r: &mut impl Read) -> Result<Vec<f32>> {
    let n = get_u32(r)?;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn save_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let arch = ckpt.net.arch();
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[PADDING_VALID])?;
    for v in [
        arch.n_classes,
        arch.sample_len,
        arch.conv1_filters,
        arch.conv1_kernel,
        arch.conv2_filters,
        arch.conv2_kernel,
        arch.feature_dim,
    ] {
        put_u32(w, v)?;
    }
    w.write_all(&arch.dropout.to_le_bytes())?;

    let params = ckpt.net.params();
    put_u32(w, params.len())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.value.shape().len() as u8])?;
        for &d in p.value.shape() {
            put_u32(w, d)?;
        }
        put_f32s(w, p.value.data())?;
    }

    match &ckpt.optimizer {
        None => w.write_all(&[0])?,
        Some(opt) => {
            let (tag, b1, b2, eps) = match opt.kind {
                OptimizerKind::Sgd => (1u8, 0.0, 0.0, 0.0),
                OptimizerKind::Adam { beta1, beta2, eps } => (2u8, beta1, beta2, eps),
            };
            w.write_all(&[tag])?;
            for v in [opt.lr, b1, b2, eps] {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&opt.steps.to_le_bytes())?;
            put_u32(w, opt.m.len())?;
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_f32s(w, m)?;
                put_f32s(w, v)?;
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    if &take::<8>(r)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if take::<1>(r)?[0] != PADDING_VALID {
        return Err(Error::Format("unsupported convolution padding".into()));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = get_u32(r)?;
    }
    let arch = Architecture {
        n_classes: dims[0],
        sample_len: dims[1],
        conv1_filters: dims[2],
        conv1_kernel: dims[3],
        conv2_filters: dims[4],
        conv2_kernel: dims[5],
        feature_dim: dims[6],
        dropout: get_f64(r)?,
    };

    let n = get_u32(r)?;
    let mut params = ParamStore::default();
    for _ in 0..n {
        let len = u16::from_le_bytes(take(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = take::<1>(r)?[0] as usize;
        let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let data = get_f32s(r)?;
        params.push(&name, Tensor::new(shape, data)?);
    }
    let net = EmbeddingNetwork::from_params(arch, params)?;

    let optimizer = match take::<1>(r)?[0] {
        0 => None,
        tag @ (1 | 2) => {
            let lr = get_f64(r)?;
            let (beta1, beta2, eps) = (get_f64(r)?, get_f64(r)?, get_f64(r)?);
            let steps = u64::from_le_bytes(take(r)?);
            let k = get_u32(r)?;
            let mut m = Vec::with_capacity(k);
            let mut v = Vec::with_capacity(k);
            for _ in 0..k {
                m.push(get_f32s(r)?);
                v.push(get_f32s(r)?);
            }
            let kind = if tag == 1 { OptimizerKind::Sgd } else { OptimizerKind::Adam { beta1, beta2, eps } };
            Some(Optimizer { kind, lr, steps, m, v })
        }
        t => return Err(Error::Format(format!("unknown optimizer tag {t}"))),
    };
    Ok(Checkpoint { net, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradnet::{Grads, Tensor};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = EmbeddingNetwork::<f32>::new(Architecture::desk(8, 128), 42).unwrap();
        let mut opt = Optimizer::adam(1e-3, net.params());
        let g = Grads {
            tensors: net.params().iter().map(|p| Tensor::filled(p.value.shape(), 0.01f32)).collect(),
        };
        opt.step(net.params_mut(), &g).unwrap();
        let ckpt = Checkpoint { net, optimizer: Some(opt) };
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &ckpt).unwrap();
        let back = load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        save_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = load_checkpoint(&mut &b"NOTACKPTxx"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
