//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FTCK" | version u16 | depth u32 | width u32 | in_channels u32 | out_channels u32
//! entry_count u32, then per entry:
//!   name_len u16 | name (utf-8) | kind u8 | ndim u8 | dims u32 * ndim | f32 payload
//! optimizer flag u8; if 1: step u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64
//! ```
//!
//! Entry kinds: 0 parameter, 1 running statistic, 2 Adam first moment,
//! 3 Adam second moment. Moment entries carry the name of their parameter.

use std::path::Path;

use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum EntryKind {
    Parameter = 0,
    RunningStat = 1,
    FirstMoment = 2,
    SecondMoment = 3,
}

impl EntryKind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Self::Parameter,
            1 => Self::RunningStat,
            2 => Self::FirstMoment,
            3 => Self::SecondMoment,
            other => return Err(Error::Checkpoint(format!("unknown entry kind {other}"))),
        })
    }
}

fn put_entry(out: &mut Vec<u8>, name: &str, kind: EntryKind, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(kind as u8);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &UNet<f32>, optimizer: Option<&AdamState<f32>>) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cfg.depth, cfg.width, cfg.in_channels, cfg.out_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let params = model.params();
    let buffers = model.buffers();
    let moments = optimizer.map_or(0, |o| o.first_moment.len() + o.second_moment.len());
    out.extend_from_slice(&((params.len() + buffers.len() + moments) as u32).to_le_bytes());
    for p in &params {
        put_entry(&mut out, &p.name, EntryKind::Parameter, &p.value);
    }
    for b in &buffers {
        put_entry(&mut out, &b.name, EntryKind::RunningStat, &b.value);
    }
    match optimizer {
        Some(opt) => {
            for (p, m) in params.iter().zip(&opt.first_moment) {
                put_entry(&mut out, &p.name, EntryKind::FirstMoment, m);
            }
            for (p, v) in params.iter().zip(&opt.second_moment) {
                put_entry(&mut out, &p.name, EntryKind::SecondMoment, v);
            }
            out.push(1);
            out.extend_from_slice(&opt.step_count.to_le_bytes());
            for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(UNet<f32>, Option<AdamState<f32>>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = UNetConfig {
        depth: r.u32()? as usize,
        width: r.u32()? as usize,
        in_channels: r.u32()? as usize,
        out_channels: r.u32()? as usize,
    };
    let mut model = UNet::<f32>::new(config, 0)?;
    let n_entries = r.u32()? as usize;
    let mut params = Vec::new();
    let mut stats = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for _ in 0..n_entries {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?
            .to_string();
        let kind = EntryKind::from_u8(r.u8()?)?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(&shape, data)?;
        match kind {
            EntryKind::Parameter => params.push((name, t)),
            EntryKind::RunningStat => stats.push((name, t)),
            EntryKind::FirstMoment => first.push((name, t)),
            EntryKind::SecondMoment => second.push((name, t)),
        }
    }

    let expected: Vec<String> = model
        .params()
        .iter()
        .map(|p| p.name.clone())
        .chain(model.buffers().iter().map(|b| b.name.clone()))
        .collect();
    let got: Vec<&String> = params.iter().chain(&stats).map(|(n, _)| n).collect();
    if got.len() != expected.len() || got.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(Error::Checkpoint("parameter names do not match the configured topology".into()));
    }
    let state: Vec<Tensor<f32>> = params.into_iter().chain(stats).map(|(_, t)| t).collect();
    model.load_state(&state)?;

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step_count = r.u64()?;
            let mut opt = AdamState::new(r.f64()?);
            opt.step_count = step_count;
            opt.beta1 = r.f64()?;
            opt.beta2 = r.f64()?;
            opt.eps = r.f64()?;
            opt.first_moment = first.into_iter().map(|(_, t)| t).collect();
            opt.second_moment = second.into_iter().map(|(_, t)| t).collect();
            Some(opt)
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok((model, optimizer))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &UNet<f32>, optimizer: Option<&AdamState<f32>>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(UNet<f32>, Option<AdamState<f32>>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::Mode;
    use crate::optim::adam_step;

    #[test]
    fn round_trip_is_bit_exact_with_optimizer() {
        let mut m: UNet<f32> = UNet::new(UNetConfig::new(2, 2), 11).unwrap();
        let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
        let y = m.forward(&x).unwrap();
        m.backward(&y).unwrap();
        let mut opt = AdamState::new(1e-3);
        adam_step(&mut m.params_mut(), &mut opt).unwrap();

        let bytes = encode_checkpoint(&m, Some(&opt));
        assert_eq!(&bytes[..4], b"FTCK");
        let (back, back_opt) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.state(), m.state());
        assert_eq!(back_opt.as_ref(), Some(&opt));
        assert_eq!(encode_checkpoint(&back, back_opt.as_ref()), bytes);

        m.set_mode(Mode::Evaluation);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_input_rejected() {
        let m: UNet<f32> = UNet::new(UNetConfig::new(2, 1), 1).unwrap();
        let bytes = encode_checkpoint(&m, None);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
