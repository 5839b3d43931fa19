//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STUN"  u32 version
//! u64 length, then that many bytes of `key=value` lines (run settings
//!         without file paths, and normalizer statistics)
//! u32 parameter count, then per parameter in registration order:
//!   u32 name length, name bytes, u32 rank, rank × u64 extents,
//!   raw f64 values
//! ```

use std::path::Path;

use stunet_core::data::Normalizer;
use stunet_core::{Graph, Stunet, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STUN";
pub const VERSION: u32 = 1;

const NORM_MEAN: &str = "normalizer.mean";
const NORM_STD: &str = "normalizer.std";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub normalizer: Normalizer,
    pub params: Vec<(String, Tensor)>,
}

fn floats(values: &[f64]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, normalizer: &Normalizer, model: &Stunet) -> Self {
        let p = model.params();
        Self {
            config: config.clone(),
            normalizer: normalizer.clone(),
            params: p.names().iter().cloned().zip(p.values().iter().cloned()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = self.config.settings_text();
        if let (Some(m), Some(s)) = (self.normalizer.mean(), self.normalizer.std()) {
            text.push_str(&format!("{NORM_MEAN}={}\n{NORM_STD}={}\n", floats(m), floats(s)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "config block is not UTF-8"))?;
        let mut config = RunConfig::default();
        let (mut mean, mut std) = (None, None);
        for line in text.lines().filter(|l| !l.is_empty()) {
            let parse = |v: &str| -> Result<Vec<f64>> {
                v.split(',')
                    .map(|x| x.parse().map_err(|_| Error::format(path, format!("bad normalizer value '{x}'"))))
                    .collect()
            };
            match line.split_once('=') {
                Some((NORM_MEAN, v)) => mean = Some(parse(v)?),
                Some((NORM_STD, v)) => std = Some(parse(v)?),
                _ => config.set_pair(line)?,
            }
        }
        let normalizer = match (mean, std) {
            (Some(m), Some(s)) => Normalizer::from_stats(m, s)?,
            _ => Normalizer::new(),
        };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&l| l <= bytes.len() / 8)
                .ok_or_else(|| Error::format(path, format!("parameter '{name}' has implausible shape {shape:?}")))?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            normalizer,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Rebuilds the model on `graph` and installs the stored parameters,
    /// checking names and shapes against the freshly built layout.
    pub fn restore(&self, path: &Path, graph: &Graph) -> Result<Stunet> {
        let mut model = Stunet::build(self.config.effective_model(), graph)?;
        let names = model.params().names();
        if names.len() != self.params.len() {
            return Err(Error::format(
                path,
                format!("checkpoint has {} parameters, model expects {}", self.params.len(), names.len()),
            ));
        }
        for ((name, t), (expected, current)) in self.params.iter().zip(names.iter().zip(model.params().values())) {
            if name != expected || t.shape() != current.shape() {
                return Err(Error::format(
                    path,
                    format!(
                        "parameter '{name}' {:?} does not match model parameter '{expected}' {:?}",
                        t.shape(),
                        current.shape()
                    ),
                ));
            }
        }
        model
            .params_mut()
            .assign(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(model)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stunet_core::data::knn_grid_graph;

    fn sample() -> (RunConfig, Graph, Stunet, Normalizer) {
        let mut c = RunConfig::default();
        c.apply_text("order=2\nhidden=4\ninput_len=3\nhorizon=2\nhorizons=1,2").unwrap();
        let g = knn_grid_graph(2, 2).unwrap();
        let m = Stunet::build(c.effective_model(), &g).unwrap();
        let n = Normalizer::from_stats(vec![0.5], vec![2.0]).unwrap();
        (c, g, m, n)
    }

    #[test]
    fn round_trip_is_exact() {
        let (c, g, m, n) = sample();
        let ck = Checkpoint::capture(&c, &n, &m);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(Path::new("x"), &bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let restored = back.restore(Path::new("x"), &g).unwrap();
        assert_eq!(restored.params(), m.params());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let (c, _, m, n) = sample();
        let bytes = Checkpoint::capture(&c, &n, &m).to_bytes();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(Path::new("x"), &b).unwrap_err().to_string().contains("magic"));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(Checkpoint::from_bytes(Path::new("x"), &b).unwrap_err().to_string().contains("version"));
        let b = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::from_bytes(Path::new("x"), b).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (c, _, m, n) = sample();
        let ck = Checkpoint::capture(&c, &n, &m);
        let bigger = knn_grid_graph(2, 3).unwrap();
        let mut other = ck.clone();
        other.config.set("hidden", "5").unwrap();
        let e = other.restore(Path::new("x"), &bigger).unwrap_err().to_string();
        assert!(e.contains("does not match"), "{e}");
    }
}
