//! Versioned little-endian binary container for [`ModelParams`].
//!
//! ```text
//! magic        4 bytes   "SCRF"
//! version      u32       1
//! mode         u8        0 off, 1 contrast, 2 learned
//! alpha, beta  f64, f64  contrast parameters (0 unless mode = 1)
//! p1, p2       f64, f64
//! coord        u8        1 if coordinate channels are appended
//! sign         i8        +1 or -1
//! unary net    <net>
//! has_pairwise u8
//! pairwise net <net>     only when has_pairwise = 1
//!
//! <net>   = u32 layer count, then per layer:
//!           u32 out, u32 in, u32 kh, u32 kw, u8 activation (0 tanh, 1 identity, 2 abs),
//!           out*in*kh*kw f64 kernel ([out][in][kh][kw]), out f64 bias
//! ```

use std::fs;
use std::path::Path;

use crate::conv::{Activation, ConvLayer, ConvNet};
use crate::correlation::Sign;
use crate::error::{fmt_err, Result};
use crate::pairwise::PenaltyParams;
use crate::training::{ModelParams, PairwiseMode};

pub const MAGIC: &[u8; 4] = b"SCRF";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_net(out: &mut Vec<u8>, net: &ConvNet) {
    put_u32(out, net.layers.len());
    for l in &net.layers {
        for v in [l.out_channels, l.in_channels, l.kh, l.kw] {
            put_u32(out, v);
        }
        out.push(l.activation.code());
        put_f64s(out, &l.kernel);
        put_f64s(out, &l.bias);
    }
}

pub fn encode(model: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (mode, alpha, beta) = match model.mode {
        PairwiseMode::Off => (0u8, 0.0, 0.0),
        PairwiseMode::Contrast { alpha, beta } => (1, alpha, beta),
        PairwiseMode::Learned => (2, 0.0, 0.0),
    };
    out.push(mode);
    put_f64s(&mut out, &[alpha, beta, model.penalty.p1, model.penalty.p2]);
    out.push(model.coord_features as u8);
    out.push(model.sign.as_i32() as i8 as u8);
    put_net(&mut out, &model.unary);
    match &model.pairwise {
        Some(net) => {
            out.push(1);
            put_net(&mut out, net);
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| fmt_err("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| fmt_err("checkpoint layer too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn net(&mut self) -> Result<ConvNet> {
        let n = self.u32()?;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let (o, i, kh, kw) = (self.u32()?, self.u32()?, self.u32()?, self.u32()?);
            if o == 0 || i == 0 || kh == 0 || kw == 0 {
                return Err(fmt_err("checkpoint layer with zero extent"));
            }
            let activation = Activation::from_code(self.u8()?).ok_or_else(|| fmt_err("unknown activation code"))?;
            let count = o
                .checked_mul(i)
                .and_then(|v| v.checked_mul(kh * kw))
                .ok_or_else(|| fmt_err("checkpoint layer too large"))?;
            let kernel = self.f64s(count)?;
            let bias = self.f64s(o)?;
            layers.push(ConvLayer {
                out_channels: o,
                in_channels: i,
                kh,
                kw,
                kernel,
                bias,
                activation,
            });
        }
        for pair in layers.windows(2) {
            if pair[1].in_channels != pair[0].out_channels {
                return Err(fmt_err("checkpoint layers do not chain"));
            }
        }
        Ok(ConvNet { layers })
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(fmt_err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let mode_code = r.u8()?;
    let (alpha, beta, p1, p2) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let mode = match mode_code {
        0 => PairwiseMode::Off,
        1 => PairwiseMode::Contrast { alpha, beta },
        2 => PairwiseMode::Learned,
        m => return Err(fmt_err(format!("unknown pairwise mode {m}"))),
    };
    let coord_features = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(fmt_err(format!("bad coordinate flag {v}"))),
    };
    let sign = Sign::from_i32(r.u8()? as i8 as i32).map_err(|_| fmt_err("bad disparity sign"))?;
    let unary = r.net()?;
    if unary.layers.is_empty() {
        return Err(fmt_err("checkpoint without unary layers"));
    }
    let pairwise = match r.u8()? {
        0 => None,
        1 => Some(r.net()?),
        v => return Err(fmt_err(format!("bad pairwise flag {v}"))),
    };
    if r.pos != bytes.len() {
        return Err(fmt_err("trailing bytes after checkpoint"));
    }
    if mode == PairwiseMode::Learned && pairwise.is_none() {
        return Err(fmt_err("learned pairwise mode without pairwise network"));
    }
    Ok(ModelParams {
        unary,
        pairwise,
        penalty: PenaltyParams { p1, p2 },
        mode,
        coord_features,
        sign,
    })
}

pub fn save(path: &Path, model: &ModelParams) -> Result<()> {
    Ok(fs::write(path, encode(model))?)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}
