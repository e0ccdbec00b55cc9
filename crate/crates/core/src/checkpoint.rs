//! The `XTAMER1` binary container shared by every persisted model.
//!
//! ```text
//! magic        8 bytes  "XTAMER1\0"
//! version      u32 LE   (currently 1)
//! sections     u32 LE   count, then per section:
//!   tag          4 bytes  e.g. "CNN\0", "SOM\0", "RWD\0"
//!   descriptor   u32 LE length + UTF-8 "key=value" lines
//!   payload      u64 LE count + f64 LE values
//! crc32        u32 LE   over every preceding byte
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CheckpointError, Result};

pub const MAGIC: &[u8; 8] = b"XTAMER1\0";
pub const FORMAT_VERSION: u32 = 1;

pub type Tag = [u8; 4];

pub const CNN_TAG: Tag = *b"CNN\0";
pub const SOM_TAG: Tag = *b"SOM\0";
pub const REWARD_TAG: Tag = *b"RWD\0";
pub const SESSION_TAG: Tag = *b"SESS";

/// One tagged block: a textual architecture/metadata descriptor plus a flat
/// parameter payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: Tag,
    descriptor: Vec<(String, String)>,
    pub values: Vec<f64>,
}

impl Section {
    pub fn new(tag: Tag) -> Self {
        Self {
            tag,
            descriptor: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Adds a descriptor entry. `f64` values round-trip exactly through their
    /// `Display` form.
    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.descriptor.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_values(mut self, values: Vec<f64>) -> Self {
        self.values = values;
        self
    }

    pub fn descriptor(&self) -> &[(String, String)] {
        &self.descriptor
    }

    pub fn tag_name(&self) -> String {
        tag_name(&self.tag)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .descriptor
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| self.malformed(format!("missing descriptor key `{key}`")))?;
        raw.parse()
            .map_err(|_| self.malformed(format!("bad value `{raw}` for `{key}`")).into())
    }

    pub fn malformed(&self, reason: String) -> CheckpointError {
        CheckpointError::Malformed {
            tag: self.tag_name(),
            reason,
        }
    }

    fn descriptor_text(&self) -> String {
        self.descriptor.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn tag_name(tag: &Tag) -> String {
    String::from_utf8_lossy(tag).trim_end_matches('\0').to_string()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(sections: Vec<Section>) -> Self {
        Self { sections }
    }

    pub fn section(&self, tag: Tag) -> Result<&Section, CheckpointError> {
        self.sections
            .iter()
            .find(|s| s.tag == tag)
            .ok_or_else(|| CheckpointError::MissingSection(tag_name(&tag)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            let desc = s.descriptor_text();
            out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
            out.extend_from_slice(desc.as_bytes());
            out.extend_from_slice(&(s.values.len() as u64).to_le_bytes());
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            let found = bytes.get(..MAGIC.len().min(bytes.len())).unwrap_or_default();
            return Err(CheckpointError::Version {
                found: format!("magic {:?}", String::from_utf8_lossy(found)),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version.to_string(),
            });
        }
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated { len: bytes.len() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 12 };
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag: Tag = r.take(4)?.try_into().expect("4 bytes");
            let dlen = r.u32()? as usize;
            let text = std::str::from_utf8(r.take(dlen)?).map_err(|_| CheckpointError::Malformed {
                tag: tag_name(&tag),
                reason: "descriptor is not UTF-8".into(),
            })?;
            let mut descriptor = Vec::new();
            for line in text.lines() {
                let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Malformed {
                    tag: tag_name(&tag),
                    reason: format!("descriptor line `{line}` lacks `=`"),
                })?;
                descriptor.push((k.to_string(), v.to_string()));
            }
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated { len: bytes.len() })?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.push(Section { tag, descriptor, values });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed {
                tag: "container".into(),
                reason: format!("{} trailing bytes", body.len() - r.pos),
            });
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&fs::read(path)?)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated { len: self.buf.len() + 4 })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
