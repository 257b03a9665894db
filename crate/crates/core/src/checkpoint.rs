//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SVAR" | u32 version | u64 len | config JSON | u64 entry count | entries
//! entry: u32 name len | name | u8 dtype | u32 ndim | u64 dims.. | payload | u32 crc32(payload)
//! ```
//!
//! Entries are written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{is_adapter, Model, ModelConfig, ModelDims};
use crate::tensor::optim::{AdamWConfig, AdamWState};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::{Codebook, ScaleSchedule, Tokenizer};

pub const MAGIC: &[u8; 4] = b"SVAR";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U64: u8 = 1;

const MODEL: &str = "model/";
const TOKENIZER: &str = "tokenizer/";
const OPTIM_M: &str = "optim/m/";
const OPTIM_V: &str = "optim/v/";
const OPTIM_STEP: &str = "optim/step";
const MERGES: &str = "meta/merges";

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F64(Tensor),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration as JSON text.
    pub config: String,
    pub entries: BTreeMap<String, Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} overflows")))
    }
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Checkpoint { config, entries: BTreeMap::new() }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), Entry::F64(t));
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, data: Vec<u64>) {
        self.entries.insert(name.into(), Entry::U64 { shape: vec![data.len()], data });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::F64(t)) => Ok(t),
            Some(_) => Err(Error::Checkpoint(format!("entry `{name}` is not a float tensor"))),
            None => Err(Error::Checkpoint(format!("missing entry `{name}`"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.entries.get(name) {
            Some(Entry::U64 { data, .. }) => Ok(data),
            Some(_) => Err(Error::Checkpoint(format!("entry `{name}` is not an integer array"))),
            None => Err(Error::Checkpoint(format!("missing entry `{name}`"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            other => Err(Error::Checkpoint(format!("entry `{name}` holds {} values, expected 1", other.len()))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, shape, payload): (u8, &[usize], Vec<u8>) = match e {
                Entry::F64(t) => (DTYPE_F64, t.shape(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()),
                Entry::U64 { shape, data } => (DTYPE_U64, shape, data.iter().flat_map(|v| v.to_le_bytes()).collect()),
            };
            out.push(dtype);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let n = r.len("config length")?;
        let config = String::from_utf8(r.take(n, "config")?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let count = r.len("entry count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32("entry name length")? as usize;
            let name = String::from_utf8(r.take(n, "entry name")?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let ctx = |what: &str| format!("{what} of `{name}`");
            let dtype = r.u8(&ctx("dtype"))?;
            let ndim = r.u32(&ctx("rank"))? as usize;
            let shape = (0..ndim).map(|_| r.len(&ctx("shape"))).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(ctx("oversized shape")))?;
            let payload = r.take(numel, &ctx("payload"))?;
            let crc = r.u32(&ctx("checksum"))?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Checkpoint(format!("checksum mismatch in entry `{name}`")));
            }
            let words = payload.chunks(8).map(|c| c.try_into().expect("8 bytes"));
            let entry = match dtype {
                DTYPE_F64 => Entry::F64(Tensor::new(shape, words.map(f64::from_le_bytes).collect())?),
                DTYPE_U64 => Entry::U64 { shape, data: words.map(u64::from_le_bytes).collect() },
                d => return Err(Error::Checkpoint(format!("unknown dtype {d} in entry `{name}`"))),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn put_params(&mut self, prefix: &str, params: &ParamStore) {
        for (name, t) in params.iter() {
            self.put_tensor(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn params(&self, prefix: &str, skip_adapters: bool) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, e) in self.entries.range(prefix.to_string()..) {
            let Some(short) = name.strip_prefix(prefix) else { break };
            if skip_adapters && is_adapter(short) {
                continue;
            }
            if let Entry::F64(t) = e {
                p.insert(short, t.clone());
            }
        }
        p
    }

    pub fn put_model(&mut self, model: &Model) {
        self.put_params(MODEL, model.params());
        self.put_u64s(MERGES, vec![model.merges()]);
    }

    /// Rebuilds the model; `reference` drops the adapter namespace.
    pub fn model(&self, config: ModelConfig, dims: ModelDims, reference: bool) -> Result<Model> {
        let params = self.params(MODEL, reference);
        Model::from_params(config, dims, params, self.u64(MERGES)?)
    }

    pub fn put_optimizer(&mut self, state: &AdamWState) {
        for (n, t) in &state.first {
            self.put_tensor(format!("{OPTIM_M}{n}"), t.clone());
        }
        for (n, t) in &state.second {
            self.put_tensor(format!("{OPTIM_V}{n}"), t.clone());
        }
        self.put_u64s(OPTIM_STEP, vec![state.step]);
    }

    pub fn optimizer(&self, config: AdamWConfig) -> Result<AdamWState> {
        let collect = |prefix: &str| -> BTreeMap<String, Tensor> {
            self.params(prefix, false).iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
        };
        Ok(AdamWState {
            config,
            step: self.u64(OPTIM_STEP)?,
            first: collect(OPTIM_M),
            second: collect(OPTIM_V),
        })
    }

    pub fn put_tokenizer(&mut self, tok: &Tokenizer) {
        self.put_u64s(format!("{TOKENIZER}schedule"), tok.schedule().sides().iter().map(|&s| s as u64).collect());
        self.put_u64s(format!("{TOKENIZER}image_size"), vec![tok.image_size() as u64]);
        self.put_tensor(format!("{TOKENIZER}projection"), tok.projection().clone());
        let cb = tok.codebook();
        self.put_tensor(
            format!("{TOKENIZER}codebook"),
            Tensor::matrix(cb.len(), cb.dim(), cb.entries().to_vec()).expect("codebook dims"),
        );
        self.put_tensor(format!("{TOKENIZER}decoder_weight"), tok.decoder_weight().clone());
        self.put_tensor(format!("{TOKENIZER}decoder_bias"), tok.decoder_bias().clone());
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let sides = self.u64s(&format!("{TOKENIZER}schedule"))?.iter().map(|&s| s as usize).collect();
        let cb = self.tensor(&format!("{TOKENIZER}codebook"))?;
        if cb.shape().len() != 2 {
            return Err(Error::Checkpoint("codebook must be 2-D".into()));
        }
        Tokenizer::from_parts(
            ScaleSchedule::new(sides)?,
            self.u64(&format!("{TOKENIZER}image_size"))? as usize,
            self.tensor(&format!("{TOKENIZER}projection"))?.clone(),
            Codebook::new(cb.cols(), cb.data().to_vec())?,
            self.tensor(&format!("{TOKENIZER}decoder_weight"))?.clone(),
            self.tensor(&format!("{TOKENIZER}decoder_bias"))?.clone(),
        )
    }
}
