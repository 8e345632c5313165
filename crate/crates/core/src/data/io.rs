//! On-disk formats: the plain-text manifest and the binary record file.
//!
//! Manifest: one source per line, whitespace-separated `key=value` fields
//! `name`, `split`, `category`, `count`, `seed` and `params` (compact JSON of
//! the generator parameters). Lines starting with `#` are comments.
//!
//! Record file (all integers little-endian):
//!
//! ```text
//! magic  b"KVDREC\0\0"      8 bytes
//! version u32               currently 1
//! count   u32
//! count × record:
//!   task u8, category u8, name_len u8, name bytes
//!   n u16, tokens n × u16, labels n × i32
//!   has_scene u8 [, n_obj u8, n_obj × (kind u8, a u8, b u8, x u8, y u8)]
//! ```
//!
//! `kind` is 0 for a shape (`a` = shape, `b` = color) and 1 for a glyph
//! (`a` = ASCII code, `b` = 0).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::generators::{Sample, TaskKind};
use crate::data::scene::{ObjectKind, Scene, SceneObject};
use crate::error::{Error, Result};
use crate::objective::{SourceCategory, SourceTag};

pub const RECORD_MAGIC: &[u8; 8] = b"KVDREC\0\0";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub split: String,
    pub category: SourceCategory,
    pub count: usize,
    pub seed: u64,
    pub params: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::from("# name split category count seed params(json)\n");
        for e in &self.entries {
            out.push_str(&format!(
                "name={} split={} category={} count={} seed={} params={}\n",
                e.name, e.split, e.category, e.count, e.seed, e.params
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: String| Error::Format(format!("manifest line {}: {why}", lineno + 1));
            let mut fields = std::collections::BTreeMap::new();
            for kv in line.split_whitespace() {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("`{kv}` is not key=value")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing `{k}`")));
            entries.push(ManifestEntry {
                name: get("name")?.to_string(),
                split: get("split")?.to_string(),
                category: get("category")?.parse()?,
                count: get("count")?.parse().map_err(|e| bad(format!("count: {e}")))?,
                seed: get("seed")?.parse().map_err(|e| bad(format!("seed: {e}")))?,
                params: get("params")?.to_string(),
            });
        }
        Ok(Self { entries })
    }
}

fn category_code(c: SourceCategory) -> u8 {
    match c {
        SourceCategory::LanguageHeavy => 0,
        SourceCategory::OcrHeavy => 1,
    }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit the record format")))
}

/// Stable byte encoding of one sample, also used for content hashing.
pub fn encode_sample(s: &Sample, out: &mut Vec<u8>) -> Result<()> {
    out.push(s.task.code());
    out.push(category_code(s.tag.category));
    out.push(narrow::<u8>(s.tag.name.len(), "source name length")?);
    out.extend_from_slice(s.tag.name.as_bytes());
    out.extend_from_slice(&narrow::<u16>(s.tokens.len(), "sequence length")?.to_le_bytes());
    for &t in &s.tokens {
        out.extend_from_slice(&narrow::<u16>(t, "token id")?.to_le_bytes());
    }
    for &l in &s.labels {
        let l = i32::try_from(l).map_err(|_| Error::Format(format!("label {l} out of range")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    match &s.scene {
        None => out.push(0),
        Some(scene) => {
            out.push(1);
            out.push(narrow::<u8>(scene.objects.len(), "object count")?);
            for o in &scene.objects {
                let (kind, a, b) = match o.kind {
                    ObjectKind::Shape { shape, color } => (0u8, shape, color),
                    ObjectKind::Glyph(c) => (1u8, u8::try_from(c).map_err(|_| Error::Format(format!("glyph {c:?}")))?, 0),
                };
                out.extend_from_slice(&[kind, a, b, narrow(o.x, "x")?, narrow(o.y, "y")?]);
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("record file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode_sample(c: &mut Cursor<'_>) -> Result<Sample> {
    let task = TaskKind::from_code(c.u8()?).ok_or_else(|| Error::Format("unknown task code".into()))?;
    let category = match c.u8()? {
        0 => SourceCategory::LanguageHeavy,
        1 => SourceCategory::OcrHeavy,
        other => return Err(Error::UnknownCategory(format!("code {other}"))),
    };
    let name_len = c.u8()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let n = c.u16()? as usize;
    let tokens = (0..n).map(|_| c.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| c.i32().map(i64::from)).collect::<Result<Vec<_>>>()?;
    let scene = match c.u8()? {
        0 => None,
        1 => {
            let n_obj = c.u8()? as usize;
            let mut objects = Vec::with_capacity(n_obj);
            for _ in 0..n_obj {
                let b = c.take(5)?;
                let kind = match b[0] {
                    0 => ObjectKind::Shape { shape: b[1], color: b[2] },
                    1 => ObjectKind::Glyph(char::from(b[1])),
                    k => return Err(Error::Format(format!("unknown object kind {k}"))),
                };
                objects.push(SceneObject {
                    kind,
                    x: b[3] as usize,
                    y: b[4] as usize,
                });
            }
            Some(Scene { objects })
        }
        f => return Err(Error::Format(format!("bad scene flag {f}"))),
    };
    Ok(Sample {
        tokens,
        labels,
        scene,
        tag: SourceTag { name, category },
        task,
    })
}

pub fn sample_hash(s: &Sample) -> [u8; 32] {
    let mut buf = Vec::new();
    encode_sample(s, &mut buf).expect("generated samples fit the record format");
    Sha256::digest(&buf).into()
}

pub fn write_records(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::with_capacity(64 * samples.len());
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    buf.extend_from_slice(&narrow::<u32>(samples.len(), "sample count")?.to_le_bytes());
    for s in samples {
        encode_sample(s, &mut buf)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Sample>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != RECORD_MAGIC {
        return Err(Error::Format(format!("{}: not a record file", path.display())));
    }
    let version = c.u32()?;
    if version != RECORD_VERSION {
        return Err(Error::Format(format!(
            "{}: record version {version}, expected {RECORD_VERSION}",
            path.display()
        )));
    }
    let count = c.u32()? as usize;
    let samples = (0..count).map(|_| decode_sample(&mut c)).collect::<Result<Vec<_>>>()?;
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(samples)
}
