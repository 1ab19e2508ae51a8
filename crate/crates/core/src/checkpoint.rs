//! Checkpoint container.
//!
//! Little-endian layout: magic `ARTC`, `u16` version, the model config as TOML
//! text, a named tensor table, optional Adam moments, an optional trainer
//! state blob (JSON: RNG and data order), step and epoch counters, and an
//! optional stream state blob for paused inference.

use std::fs;
use std::path::Path;

use tubestream_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"ARTC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub moments: Option<AdamMoments>,
    pub trainer: Option<String>,
    pub step: u64,
    pub epoch: u64,
    pub stream: Option<String>,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            model: model.config.clone(),
            params: model.params.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            moments: None,
            trainer: None,
            step: 0,
            epoch: 0,
            stream: None,
        }
    }

    /// Rebuild the model this checkpoint describes.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone())?;
        model.params.load(self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &toml::to_string(&self.model).expect("model config serialises"));
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_tensor(&mut out, t);
        }
        match &self.moments {
            Some(m) => {
                out.push(1);
                out.extend_from_slice(&m.t.to_le_bytes());
                put_u32(&mut out, m.m.len());
                for t in m.m.iter().chain(&m.v) {
                    put_tensor(&mut out, t);
                }
            }
            None => out.push(0),
        }
        put_opt_str(&mut out, self.trainer.as_deref());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_opt_str(&mut out, self.stream.as_deref());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("missing ARTC magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let model: ModelConfig =
            toml::from_str(&r.string()?).map_err(|e| fmt_err(format!("model config: {e}")))?;
        let n = r.u32()?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            params.push((name, r.tensor()?));
        }
        let moments = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let k = r.u32()?;
                let m = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(AdamMoments { t, m, v })
            }
            b => return Err(fmt_err(format!("bad optimizer flag {b}"))),
        };
        let trainer = r.opt_string()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let stream = r.opt_string()?;
        if r.pos != buf.len() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(Self { model, params, moments, trainer, step, epoch, stream })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_opt_str(out: &mut Vec<u8>, s: Option<&str>) {
    match s {
        Some(s) => {
            out.push(1);
            put_str(out, s);
        }
        None => out.push(0),
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| fmt_err(e.to_string()))
    }
    fn opt_string(&mut self) -> Result<Option<String>> {
        match self.take(1)?[0] {
            0 => Ok(None),
            1 => Ok(Some(self.string()?)),
            b => Err(fmt_err(format!("bad presence flag {b}"))),
        }
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}
