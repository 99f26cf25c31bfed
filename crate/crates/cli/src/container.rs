//! On-disk container shared by checkpoints, datasets and sample dumps: a
//! directory holding `manifest.json` and `payload.bin`, the latter being the
//! listed arrays as little-endian `f32`, concatenated in manifest order.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "payload.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

impl ArrayEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `checkpoint`, `dataset` or `samples`.
    pub kind: String,
    /// Kind-specific structured metadata.
    pub meta: Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    arrays: Vec<ArrayEntry>,
    payload: Vec<f32>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self { kind: kind.into(), meta, arrays: Vec::new(), payload: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) -> Result<()> {
        let name = name.into();
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            "array {name}: shape {shape:?} vs {} values",
            data.len()
        );
        ensure!(self.entry(&name).is_none(), "duplicate array {name}");
        self.arrays.push(ArrayEntry { name, shape: shape.to_vec(), offset: self.payload.len() });
        self.payload.extend_from_slice(data);
        Ok(())
    }

    pub fn arrays(&self) -> &[ArrayEntry] {
        &self.arrays
    }

    pub fn entry(&self, name: &str) -> Option<&ArrayEntry> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let e = self.entry(name).with_context(|| format!("{} container has no array {name}", self.kind))?;
        Ok((&e.shape, &self.payload[e.offset..e.offset + e.len()]))
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self.arrays.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut text = serde_json::to_string_pretty(&self.manifest())?;
        text.push('\n');
        let bytes: Vec<u8> = self.payload.iter().flat_map(|x| x.to_le_bytes()).collect();
        // Payload first: a manifest on disk always describes a complete payload.
        fs::write(dir.join(PAYLOAD), bytes)?;
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .with_context(|| format!("reading {}", dir.join(MANIFEST).display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", dir.display()))?;
        if m.format_version != FORMAT_VERSION {
            bail!(
                "{}: format version {} is not supported (expected {FORMAT_VERSION})",
                dir.display(),
                m.format_version
            );
        }
        let bytes = fs::read(dir.join(PAYLOAD)).with_context(|| format!("reading payload in {}", dir.display()))?;
        ensure!(bytes.len() % 4 == 0, "payload length {} is not a multiple of 4", bytes.len());
        let payload: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let mut expect = 0;
        for a in &m.arrays {
            ensure!(a.offset == expect, "array {} starts at {} instead of {expect}", a.name, a.offset);
            expect += a.len();
        }
        ensure!(expect == payload.len(), "manifest lists {expect} values, payload holds {}", payload.len());
        Ok(Self { kind: m.kind, meta: m.meta, arrays: m.arrays, payload })
    }

    pub fn read_kind(dir: &Path, kind: &str) -> Result<Self> {
        let c = Self::read(dir)?;
        ensure!(c.kind == kind, "{} holds a {} container, expected {kind}", dir.display(), c.kind);
        Ok(c)
    }
}
