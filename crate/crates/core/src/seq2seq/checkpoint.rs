//! Checkpoint directories: `manifest.txt` plus `tensors.bin`.
//!
//! The manifest is line oriented:
//!
//! ```text
//! attrsteer-checkpoint 1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>... <byte offset>
//! ```
//!
//! The blob holds every tensor's values as little-endian f64, concatenated
//! in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, ModelParams, ParamSet};
use crate::diff::Tensor;
use crate::{Error, Result};

const MAGIC: &str = "attrsteer-checkpoint 1";
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Saves header fields and tensors into directory `dir`.
pub fn save(dir: &Path, meta: &[(String, String)], params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MAGIC);
    manifest.push('\n');
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Contract(format!("unserialisable header field `{k}`")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut blob = Vec::new();
    for (name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("tensor {name} {} {}\n", shape.join("x"), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Loads header fields and tensors from directory `dir`.
pub fn load(dir: &Path) -> Result<(Vec<(String, String)>, ParamSet)> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(Error::Missing(mpath));
    }
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let bad = |line: &str| Error::Data(format!("malformed manifest line `{line}`"));
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Data(format!("{} is not a checkpoint manifest", mpath.display())));
    }
    let mut meta = Vec::new();
    let mut params = ParamSet::new();
    let mut expected_offset = 0usize;
    for line in lines {
        let mut parts = line.splitn(2, ' ');
        match parts.next() {
            Some("meta") => {
                let rest = parts.next().ok_or_else(|| bad(line))?;
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            }
            Some("tensor") => {
                let f: Vec<&str> = parts.next().ok_or_else(|| bad(line))?.split(' ').collect();
                let [name, shape, offset] = f[..] else {
                    return Err(bad(line));
                };
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(line))?;
                let offset: usize = offset.parse().map_err(|_| bad(line))?;
                if offset != expected_offset {
                    return Err(Error::Data(format!("tensor `{name}` at unexpected offset {offset}")));
                }
                let n: usize = shape.iter().product();
                let end = offset + 8 * n;
                let bytes = blob
                    .get(offset..end)
                    .ok_or_else(|| Error::Data(format!("blob too short for `{name}`")))?;
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                params.push(name, Tensor::new(shape, data)?);
                expected_offset = end;
            }
            Some("") => {}
            _ => return Err(bad(line)),
        }
    }
    if expected_offset != blob.len() {
        return Err(Error::Data(format!(
            "blob has {} bytes, manifest covers {expected_offset}",
            blob.len()
        )));
    }
    Ok((meta, params))
}

pub fn meta_value<'m>(meta: &'m [(String, String)], key: &str) -> Result<&'m str> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Data(format!("checkpoint header lacks `{key}`")))
}

pub fn save_model(dir: &Path, model: &ModelParams) -> Result<()> {
    let mut meta = vec![("kind".to_string(), "model".to_string())];
    meta.extend(model.config().to_meta());
    save(dir, &meta, model.params())
}

pub fn load_model(dir: &Path) -> Result<ModelParams> {
    let (meta, params) = load(dir)?;
    if meta_value(&meta, "kind")? != "model" {
        return Err(Error::Data(format!("{} is not a model checkpoint", dir.display())));
    }
    let cfg = ModelConfig::from_meta(&meta)?;
    ModelParams::from_params(cfg, params)
}
