//! Flat array files: a text manifest (`name shape byte_offset` per line,
//! shape written as `d1xd2x...`) beside a binary blob of little-endian f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NamedArrays = Vec<(String, Tensor)>;

/// Writes `<stem>.txt` and `<stem>.bin` inside `dir`.
pub fn write_arrays(dir: &Path, stem: &str, arrays: &[(String, Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut blob = Vec::new();
    for (name, t) in arrays {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("array name `{name}` must be one word")));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name} {} {}\n", shape.join("x"), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join(format!("{stem}.txt"));
    let bpath = dir.join(format!("{stem}.bin"));
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn read_arrays(dir: &Path, stem: &str) -> Result<NamedArrays> {
    let mpath = dir.join(format!("{stem}.txt"));
    let bpath = dir.join(format!("{stem}.bin"));
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut out = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{}:{}", mpath.display(), i + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset] = fields[..] else {
            return Err(Error::parse(&loc, "expected `name shape byte_offset`"));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(&loc, format!("bad shape `{shape}`")))?;
        let offset: usize = offset.parse().map_err(|_| Error::parse(&loc, "bad byte offset"))?;
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if offset % 8 != 0 || end > blob.len() {
            return Err(Error::parse(&loc, "array lies outside the binary file"));
        }
        let data = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name.to_string(), Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

/// Flat `key=value` text, one pair per line; `#` starts a comment.
pub fn parse_key_values(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("{origin}:{}", i + 1), "expected key=value"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn format_key_values<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
