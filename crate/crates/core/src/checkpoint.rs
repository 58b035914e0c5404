//! `.crda` checkpoint container.
//!
//! A UTF-8 text header followed by raw payloads:
//!
//! ```text
//! crda-checkpoint
//! version 1
//! epoch <n>
//! meta <key> <value>          (zero or more)
//! config <byte length>
//! section <name> <f64 count>  (zero or more)
//! end
//! <config bytes><section 0 as little-endian f64>...
//! ```
//!
//! Parsing never yields a partially filled checkpoint: a file is either
//! fully decoded or rejected with a version, truncation or shape error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CrdaError, Result};

pub const CHECKPOINT_MAGIC: &str = "crda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub epoch: usize,
    pub meta: BTreeMap<String, String>,
    pub config: String,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(epoch: usize, config: String) -> Self {
        Self {
            epoch,
            config,
            ..Self::default()
        }
    }

    pub fn push_section(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.sections.push(Section {
            name: name.into(),
            data,
        });
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CrdaError::Invalid(format!("checkpoint lacks meta field `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| CrdaError::Invalid(format!("checkpoint meta `{key}` has bad value `{raw}`")))
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections.iter().find(|s| s.name == name).map(|s| s.data.as_slice())
    }

    /// The named section, required to hold exactly `len` values.
    pub fn expect_section(&self, name: &str, len: usize) -> Result<&[f64]> {
        let data = self.section(name).ok_or_else(|| CrdaError::CheckpointShape {
            name: name.to_string(),
            expected: len,
            found: 0,
        })?;
        if data.len() != len {
            return Err(CrdaError::CheckpointShape {
                name: name.to_string(),
                expected: len,
                found: data.len(),
            });
        }
        Ok(data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!(
            "{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\nepoch {}\n",
            self.epoch
        );
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        header.push_str(&format!("config {}\n", self.config.len()));
        for s in &self.sections {
            header.push_str(&format!("section {} {}\n", s.name, s.data.len()));
        }
        header.push_str("end\n");
        let payload: usize = self.sections.iter().map(|s| 8 * s.data.len()).sum();
        let mut out = Vec::with_capacity(header.len() + self.config.len() + payload);
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for s in &self.sections {
            for x in &s.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = |what: &str| -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| CrdaError::CheckpointTruncated(format!("header ends before {what}")))?;
            pos += end + 1;
            String::from_utf8(rest[..end].to_vec())
                .map_err(|_| CrdaError::CheckpointVersion("header is not valid UTF-8".into()))
        };

        let magic = next_line("magic line")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CrdaError::CheckpointVersion(format!(
                "bad magic `{}`",
                magic.chars().take(32).collect::<String>()
            )));
        }
        let version_line = next_line("version")?;
        let version = version_line
            .strip_prefix("version ")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| CrdaError::CheckpointVersion(format!("unreadable version line `{version_line}`")))?;
        if version != CHECKPOINT_VERSION {
            return Err(CrdaError::CheckpointVersion(format!(
                "file has version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }

        let mut ckpt = Checkpoint::default();
        let mut config_len = None;
        let mut layout: Vec<(String, usize)> = Vec::new();
        let bad = |line: &str| CrdaError::Invalid(format!("malformed checkpoint header line `{line}`"));
        loop {
            let line = next_line("`end`")?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["end"] => break,
                ["epoch", n] => ckpt.epoch = n.parse().map_err(|_| bad(&line))?,
                ["meta", k, v] => {
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                ["config", n] => config_len = Some(n.parse::<usize>().map_err(|_| bad(&line))?),
                ["section", name, n] => layout.push((name.to_string(), n.parse().map_err(|_| bad(&line))?)),
                _ => return Err(bad(&line)),
            }
        }
        let config_len =
            config_len.ok_or_else(|| CrdaError::Invalid("checkpoint header lacks config length".into()))?;

        let needed = layout
            .iter()
            .try_fold(config_len, |acc, (_, n)| {
                n.checked_mul(8).and_then(|b| acc.checked_add(b))
            })
            .ok_or_else(|| CrdaError::Invalid("checkpoint section sizes overflow".into()))?;
        let available = bytes.len() - pos;
        if available < needed {
            return Err(CrdaError::CheckpointTruncated(format!(
                "payload has {available} bytes, header declares {needed}"
            )));
        }
        if available > needed {
            return Err(CrdaError::Invalid(format!(
                "{} trailing bytes after declared payload",
                available - needed
            )));
        }
        ckpt.config = String::from_utf8(bytes[pos..pos + config_len].to_vec())
            .map_err(|_| CrdaError::Invalid("embedded config is not valid UTF-8".into()))?;
        pos += config_len;
        for (name, n) in layout {
            let data = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            pos += 8 * n;
            ckpt.sections.push(Section { name, data });
        }
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("crda.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| CrdaError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CrdaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CrdaError::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| CrdaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CrdaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
