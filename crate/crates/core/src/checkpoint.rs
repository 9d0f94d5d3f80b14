//! Checkpoint container: a text header (step, bounds, embedded config and a
//! block manifest) followed by a little-endian `f32` payload.
//!
//! ```text
//! STRF1
//! step 120
//! bounds 0 0 0 64 64 16
//! config 57
//! <57 config lines>
//! blocks 42
//! <name> <d0>x<d1>... <byte offset> <byte length>
//! payload <bytes>
//! <binary>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{SceneBounds, Vec3};
use crate::model::RadianceModel;

pub const MAGIC: &str = "STRF1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: Config,
    pub model: RadianceModel<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        writeln!(head, "{MAGIC}").unwrap();
        writeln!(head, "step {}", self.step).unwrap();
        let (lo, hi) = (self.model.bounds.min, self.model.bounds.max);
        writeln!(head, "bounds {} {} {} {} {} {}", lo.x, lo.y, lo.z, hi.x, hi.y, hi.z).unwrap();
        let cfg = self.config.to_text();
        writeln!(head, "config {}", cfg.lines().count()).unwrap();
        head.push_str(&cfg);
        if !cfg.ends_with('\n') {
            head.push('\n');
        }
        let blocks = self.model.blocks();
        writeln!(head, "blocks {}", blocks.len()).unwrap();
        let mut offset = 0;
        for b in &blocks {
            let shape: Vec<String> = b.shape.iter().map(usize::to_string).collect();
            let bytes = b.len() * 4;
            writeln!(head, "{} {} {offset} {bytes}", b.name, shape.join("x")).unwrap();
            offset += bytes;
        }
        writeln!(head, "payload {offset}").unwrap();
        let mut out = head.into_bytes();
        out.reserve(offset);
        for data in self.model.block_data() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let rest = bytes.get(pos..).unwrap_or_default();
            let end = rest.iter().position(|b| *b == b'\n').ok_or_else(|| bad("truncated header"))?;
            let s = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?.to_string();
            pos += end + 1;
            Ok(s)
        };
        let magic = line()?;
        if magic != MAGIC {
            return Err(bad(format!("expected magic {MAGIC}, found `{magic}`")));
        }
        let field = |s: &str, key: &str| -> Result<String> {
            s.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}` line, found `{s}`")))
        };
        let count = |s: String| -> Result<usize> { s.trim().parse().map_err(|_| bad(format!("bad count `{s}`"))) };
        let step = count(field(&line()?, "step")?)?;
        let b: Vec<f64> = field(&line()?, "bounds")?
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad("bad bounds")))
            .collect::<Result<_>>()?;
        if b.len() != 6 {
            return Err(bad("bounds need six numbers"));
        }
        let bounds = SceneBounds::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))?;
        let n_cfg = count(field(&line()?, "config")?)?;
        let mut cfg_text = String::new();
        for _ in 0..n_cfg {
            cfg_text.push_str(&line()?);
            cfg_text.push('\n');
        }
        let config = Config::from_text(&cfg_text)?;
        let n_blocks = count(field(&line()?, "blocks")?)?;
        let mut manifest = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let l = line()?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(bad(format!("bad manifest line `{l}`")));
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|t| t.parse().map_err(|_| bad(format!("bad shape in `{l}`"))))
                .collect::<Result<_>>()?;
            let offset: usize = parts[2].parse().map_err(|_| bad(format!("bad offset in `{l}`")))?;
            let len: usize = parts[3].parse().map_err(|_| bad(format!("bad length in `{l}`")))?;
            manifest.push((parts[0].to_string(), shape, offset, len));
        }
        let payload_len = count(field(&line()?, "payload")?)?;
        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            return Err(bad(format!("payload has {} bytes, header says {payload_len}", payload.len())));
        }

        // Rebuild the architecture, then overwrite every block.
        let mut model = RadianceModel::<f32>::new(&config, bounds, &mut ChaCha8Rng::seed_from_u64(0));
        let expected = model.blocks();
        if expected.len() != manifest.len() {
            return Err(bad(format!("{} blocks stored, config implies {}", manifest.len(), expected.len())));
        }
        let mut covered = 0;
        for ((name, shape, offset, len), info) in manifest.iter().zip(&expected) {
            if *name != info.name || *shape != info.shape || *len != info.len() * 4 {
                return Err(bad(format!("block `{name}` does not match the configured `{}`", info.name)));
            }
            if *offset != covered || offset + len > payload.len() {
                return Err(bad(format!("block `{name}` has overlapping or out-of-range offset")));
            }
            covered += len;
        }
        if covered != payload.len() {
            return Err(bad("payload has unreferenced bytes"));
        }
        for ((_, _, offset, len), data) in manifest.iter().zip(model.block_data_mut()) {
            for (v, chunk) in data.iter_mut().zip(payload[*offset..offset + len].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
        }
        Ok(Self { step, config, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
