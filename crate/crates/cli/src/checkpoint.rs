//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//! `"AGSM"`, `u32` version, `u8` model kind (0 diffusion, 1 flow), schedule
//! `(u64 T, f64 beta_start, f64 beta_end)`, flow `(Δ, σ², λ, B)` as `f64`,
//! seven `u64` network sizes, `u32` tensor count and then per tensor a
//! `u32`-prefixed UTF-8 name, `u32` rank, `u64` dims and a `u64`-prefixed
//! `f64` array. A trailing `u8` flags a token bank, which follows as the EMA
//! decay and four tensors in the same encoding.

use std::path::Path;

use agsm_core::denoiser::{DenoiserConfig, DenoiserParams, SoftTokenBank, TokenMatrix};
use agsm_core::flow::FlowConfig;

use crate::config::{ModelKind, ScheduleSection};
use crate::error::{io, CliError, Result};

pub const MAGIC: &[u8; 4] = b"AGSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub schedule: ScheduleSection,
    pub flow: FlowConfig,
    pub params: DenoiserParams,
    pub bank: Option<SoftTokenBank>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len() as u32);
        for d in shape {
            self.u64(*d as u64);
        }
        self.u64(data.len() as u64);
        for v in data {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type Tensor = (String, Vec<usize>, Vec<f64>);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "size overflows usize".to_string())
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<std::result::Result<Vec<_>, _>>()?;
        let len = self.usize()?;
        if shape.iter().product::<usize>() != len {
            return Err(format!("tensor {name}: shape {shape:?} does not hold {len} values"));
        }
        let data = (0..len).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((name, shape, data))
    }
}

fn matrix(t: Tensor, want: &str) -> std::result::Result<TokenMatrix, String> {
    let (name, shape, data) = t;
    if name != want || shape.len() != 2 {
        return Err(format!("expected 2-d tensor {want}, found {name} with shape {shape:?}"));
    }
    TokenMatrix::from_shape_vec((shape[0], shape[1]), data).map_err(|e| e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(match self.kind {
            ModelKind::Diffusion => 0,
            ModelKind::Flow => 1,
        });
        w.u64(self.schedule.timesteps as u64);
        w.f64(self.schedule.beta_start);
        w.f64(self.schedule.beta_end);
        for v in [self.flow.delta_step, self.flow.sigma2, self.flow.lambda, self.flow.b_scale] {
            w.f64(v);
        }
        let c = self.params.config;
        for v in [c.data_dim, c.num_conditions, c.time_dim, c.cond_dim, c.token_dim, c.hidden_width, c.hidden_layers] {
            w.u64(v as u64);
        }
        let tensors = self.params.named_tensors();
        w.u32(tensors.len() as u32);
        for (name, shape, data) in &tensors {
            w.tensor(name, shape, data);
        }
        match &self.bank {
            None => w.u8(0),
            Some(b) => {
                w.u8(1);
                w.f64(b.ema_decay);
                for (name, m) in [("psi_pos", &b.psi_pos), ("psi_neg", &b.psi_neg), ("ema_pos", &b.ema_pos), ("ema_neg", &b.ema_neg)] {
                    w.tensor(name, m.shape(), m.as_slice().expect("standard layout"));
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("format version {version}, this build reads {VERSION}"));
        }
        let kind = match r.u8()? {
            0 => ModelKind::Diffusion,
            1 => ModelKind::Flow,
            k => return Err(format!("unknown model kind tag {k}")),
        };
        let schedule = ScheduleSection { timesteps: r.usize()?, beta_start: r.f64()?, beta_end: r.f64()? };
        let flow = FlowConfig { delta_step: r.f64()?, sigma2: r.f64()?, lambda: r.f64()?, b_scale: r.f64()? };
        let mut sizes = [0usize; 7];
        for s in &mut sizes {
            *s = r.usize()?;
        }
        let config = DenoiserConfig {
            data_dim: sizes[0],
            num_conditions: sizes[1],
            time_dim: sizes[2],
            cond_dim: sizes[3],
            token_dim: sizes[4],
            hidden_width: sizes[5],
            hidden_layers: sizes[6],
        };
        if sizes.iter().any(|s| *s > 1 << 20) || config.input_dim().max(config.num_conditions) * config.hidden_width > 1 << 28 {
            return Err(format!("implausible network sizes {sizes:?}"));
        }
        let mut params = DenoiserParams::init(config, &mut agsm_core::rng::substream(0, agsm_core::rng::Stream::Init))
            .map_err(|e| e.to_string())?;
        let expected: Vec<(String, Vec<usize>)> =
            params.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(format!("{count} tensors, the network needs {}", expected.len()));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let (n, s, data) = r.tensor()?;
            if &n != name || &s != shape {
                return Err(format!("expected tensor {name} {shape:?}, found {n} {s:?}"));
            }
            loaded.push(data);
        }
        for (dst, src) in params.tensors_mut().into_iter().zip(&loaded) {
            dst.copy_from_slice(src);
        }
        let bank = match r.u8()? {
            0 => None,
            1 => {
                let ema_decay = r.f64()?;
                let psi_pos = matrix(r.tensor()?, "psi_pos")?;
                let psi_neg = matrix(r.tensor()?, "psi_neg")?;
                let ema_pos = matrix(r.tensor()?, "ema_pos")?;
                let ema_neg = matrix(r.tensor()?, "ema_neg")?;
                let shape = psi_pos.shape().to_vec();
                if [&psi_neg, &ema_pos, &ema_neg].iter().any(|m| m.shape() != shape.as_slice()) {
                    return Err("token tensors disagree in shape".into());
                }
                if shape[1] != config.token_dim {
                    return Err(format!("tokens of width {} for a network expecting {}", shape[1], config.token_dim));
                }
                Some(SoftTokenBank { psi_pos, psi_neg, ema_pos, ema_neg, ema_decay })
            }
            f => return Err(format!("bad token bank flag {f}")),
        };
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Checkpoint { kind, schedule, flow, params, bank })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(io(path))?;
        Self::from_bytes(&buf).map_err(|detail| CliError::Checkpoint { path: path.into(), detail })
    }
}
