//! Manifest-plus-raw-tensor container.
//!
//! A container is a `manifest.json` naming every tensor entry (shape, element
//! type, byte order, file name) plus one raw little-endian binary file per
//! entry. Auxiliary files (JSON records, meshes) can ride along. The same
//! layout is written either as a plain directory or packed into a tar archive.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub byte_order: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub entries: BTreeMap<String, EntryMeta>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    files: BTreeMap<String, Vec<u8>>,
}

fn encode(dtype: Dtype, t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(t.len() * dtype.size());
    for &v in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::U8 => {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::invalid("u8 tensor", format!("value {v} is not a byte")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

fn decode(dtype: Dtype, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
    }
}

fn file_name_for(entry: &str) -> String {
    format!("{}.bin", entry.replace('/', "_"))
}

impl Container {
    pub fn new(format: &str, format_version: u32) -> Self {
        Self {
            manifest: Manifest {
                format: format.to_string(),
                format_version,
                entries: BTreeMap::new(),
                metadata: serde_json::Value::Null,
            },
            files: BTreeMap::new(),
        }
    }

    pub fn format_version(&self) -> u32 {
        self.manifest.format_version
    }

    pub fn set_metadata(&mut self, metadata: serde_json::Value) {
        self.manifest.metadata = metadata;
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.manifest.metadata
    }

    pub fn insert(&mut self, name: &str, dtype: Dtype, tensor: &Tensor) -> Result<()> {
        let file = file_name_for(name);
        let bytes = encode(dtype, tensor).map_err(|e| match e {
            Error::Invalid { reason, .. } => Error::invalid(format!("entry `{name}`"), reason),
            e => e,
        })?;
        self.files.insert(file.clone(), bytes);
        self.manifest.entries.insert(
            name.to_string(),
            EntryMeta {
                shape: tensor.shape().to_vec(),
                dtype,
                byte_order: "little".into(),
                file,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.manifest.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&EntryMeta> {
        self.manifest
            .entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("entry `{name}`"), "missing from manifest"))
    }

    /// Decode an entry to `f64`, checking the file length against the
    /// manifest shape.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let meta = self.entry(name)?;
        if meta.byte_order != "little" {
            return Err(Error::invalid(
                format!("entry `{name}`"),
                format!("unsupported byte order `{}`", meta.byte_order),
            ));
        }
        let bytes = self
            .files
            .get(&meta.file)
            .ok_or_else(|| Error::invalid(format!("entry `{name}`"), format!("data file `{}` missing", meta.file)))?;
        let expected: usize = meta.shape.iter().product();
        let found = bytes.len() / meta.dtype.size();
        if bytes.len() % meta.dtype.size() != 0 || found != expected {
            return Err(Error::ShapeMismatch {
                entry: name.to_string(),
                expected: meta.shape.clone(),
                found: vec![found],
            });
        }
        Ok(Tensor::new(meta.shape.clone(), decode(meta.dtype, bytes)))
    }

    /// [`Container::get`] plus a check against the shape the caller requires.
    pub fn get_shaped(&self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let meta = self.entry(name)?;
        if meta.shape != expected {
            return Err(Error::ShapeMismatch {
                entry: name.to_string(),
                expected: expected.to_vec(),
                found: meta.shape.clone(),
            });
        }
        self.get(name)
    }

    /// Attach a non-tensor file stored verbatim.
    pub fn put_file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    pub fn file(&self, name: &str) -> Result<&[u8]> {
        self.files
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("file `{name}`"), "missing from container"))
    }

    pub fn check_format(&self, format: &'static str, supported: u32) -> Result<()> {
        if self.manifest.format != format {
            return Err(Error::invalid(
                "container",
                format!("expected format `{format}`, found `{}`", self.manifest.format),
            ));
        }
        if self.manifest.format_version != supported {
            return Err(Error::UnsupportedVersion {
                format,
                found: self.manifest.format_version,
                supported,
            });
        }
        Ok(())
    }

    fn manifest_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        s.push('\n');
        s.into_bytes()
    }

    fn from_files(mut files: BTreeMap<String, Vec<u8>>, origin: &Path) -> Result<Self> {
        let raw = files
            .remove(MANIFEST_FILE)
            .ok_or_else(|| Error::invalid("container", format!("{} has no {MANIFEST_FILE}", origin.display())))?;
        let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::json(origin.join(MANIFEST_FILE), e))?;
        Ok(Self { manifest, files })
    }

    /// Write as a directory, creating it if needed.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in &self.files {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, self.manifest_bytes()).map_err(|e| Error::io(&p, e))
    }

    /// Read every regular file at the top level of `dir`.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                files.insert(name, fs::read(&path).map_err(|e| Error::io(&path, e))?);
            }
        }
        Self::from_files(files, dir)
    }

    /// Pack into a single tar archive. Entry order and headers are fixed so
    /// identical containers produce identical archives.
    pub fn write_tar(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut builder = tar::Builder::new(std::io::BufWriter::new(file));
        let mut append = |name: &str, bytes: &[u8]| -> std::io::Result<()> {
            let mut header = tar::Header::new_gnu();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder.append_data(&mut header, name, bytes)
        };
        append(MANIFEST_FILE, &self.manifest_bytes()).map_err(|e| Error::io(path, e))?;
        for (name, bytes) in &self.files {
            append(name, bytes).map_err(|e| Error::io(path, e))?;
        }
        builder
            .into_inner()
            .and_then(|mut w| std::io::Write::flush(&mut w))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_tar(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut archive = tar::Archive::new(std::io::BufReader::new(file));
        let mut files = BTreeMap::new();
        for entry in archive.entries().map_err(|e| Error::io(path, e))? {
            let mut entry = entry.map_err(|e| Error::io(path, e))?;
            let name = entry.path().map_err(|e| Error::io(path, e))?.to_string_lossy().into_owned();
            let mut bytes = Vec::new();
            entry.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
            files.insert(name, bytes);
        }
        Self::from_files(files, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", 1);
        c.insert("a", Dtype::F64, &Tensor::new([2, 2], vec![0.1, -2.0, 3.5, 1e-300])).unwrap();
        c.insert("b/c", Dtype::F32, &Tensor::new([3], vec![0.1, 0.2, 0.3])).unwrap();
        c.insert("m", Dtype::U8, &Tensor::new([2], vec![0.0, 1.0])).unwrap();
        c.put_file("extra.json", b"{}".to_vec());
        c
    }

    #[test]
    fn dir_and_tar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.write_dir(&dir.path().join("d")).unwrap();
        assert_eq!(Container::read_dir(&dir.path().join("d")).unwrap(), c);
        let tar = dir.path().join("c.tar");
        c.write_tar(&tar).unwrap();
        let back = Container::read_tar(&tar).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("a").unwrap().data()[3], 1e-300);
        assert_eq!(back.get("b/c").unwrap().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn tar_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (p, q) = (dir.path().join("p.tar"), dir.path().join("q.tar"));
        sample().write_tar(&p).unwrap();
        sample().write_tar(&q).unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap());
    }

    #[test]
    fn truncated_data_is_a_shape_mismatch() {
        let mut c = sample();
        c.put_file("a.bin", vec![0; 24]);
        match c.get("a") {
            Err(Error::ShapeMismatch { entry, expected, found }) => {
                assert_eq!(entry, "a");
                assert_eq!(expected, vec![2, 2]);
                assert_eq!(found, vec![3]);
            }
            other => panic!("{other:?}"),
        }
        assert!(c.get_shaped("m", &[3]).is_err());
    }

    #[test]
    fn rejects_non_byte_values() {
        let mut c = Container::new("test", 1);
        assert!(c.insert("m", Dtype::U8, &Tensor::new([1], vec![0.5])).is_err());
    }
}
