//! Binary checkpoints: a versioned header, string metadata and named
//! little-endian `f64` arrays with explicit shapes.
//!
//! ```text
//! magic "DALNCKPT" | u32 version | [u8; 32] config sha256
//! u32 n_meta   { u32 len, key | u32 len, value }*
//! u32 n_arrays { u32 len, name | u32 ndim | u64 dim* | f64 data* }*
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::align::AlignState;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, OptimizerState, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"DALNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Checkpoint { config_hash, meta: BTreeMap::new(), arrays: BTreeMap::new() }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("missing metadata '{key}'")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| Error::Checkpoint(format!("metadata '{key}' = '{v}' does not parse")))
    }

    pub fn put_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.arrays.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Arrays named `prefix/...`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let head = format!("{prefix}/");
        self.arrays
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&head).filter(|rest| !rest.contains('/')).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    pub fn put_optimizer(&mut self, prefix: &str, opt: &OptimizerState) {
        self.put_params(&format!("{prefix}/m"), &opt.m);
        self.put_params(&format!("{prefix}/v"), &opt.v);
        self.set_meta(&format!("{prefix}.step"), opt.step);
        self.set_meta(&format!("{prefix}.config"), serde_json::to_string(&opt.config).expect("config serializes"));
    }

    pub fn optimizer(&self, prefix: &str) -> Result<OptimizerState> {
        let config: AdamWConfig = serde_json::from_str(self.meta(&format!("{prefix}.config"))?)
            .map_err(|e| Error::Checkpoint(format!("{prefix}.config: {e}")))?;
        Ok(OptimizerState {
            config,
            m: self.params(&format!("{prefix}/m")),
            v: self.params(&format!("{prefix}/v")),
            step: self.meta_parse(&format!("{prefix}.step"))?,
        })
    }

    pub fn put_align_state(&mut self, state: &AlignState) {
        self.put_params("theta", &state.theta);
        self.put_params("phi", &state.phi);
        self.put_optimizer("opt_theta", &state.opt_theta);
        self.put_optimizer("opt_phi", &state.opt_phi);
        self.set_meta("epoch", state.epoch);
        self.set_meta("step", state.step);
    }

    pub fn align_state(&self) -> Result<AlignState> {
        let state = AlignState {
            theta: self.params("theta"),
            phi: self.params("phi"),
            opt_theta: self.optimizer("opt_theta")?,
            opt_phi: self.optimizer("opt_phi")?,
            epoch: self.meta_parse("epoch")?,
            step: self.meta_parse("step")?,
        };
        state.theta.check_aligned(&state.opt_theta.m)?;
        state.theta.check_aligned(&state.opt_theta.v)?;
        state.phi.check_aligned(&state.opt_phi.m)?;
        state.phi.check_aligned(&state.opt_phi.v)?;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut ck = Checkpoint::new(config_hash);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("array '{name}' overruns the file")))?;
            let data = r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("array '{name}': {e}")))?;
            ck.arrays.insert(name, t);
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}
