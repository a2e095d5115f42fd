//! Checkpoint files: a text header listing every parameter (name, group,
//! decay flag, shape), then the values as little-endian `f64` in header
//! order.
//!
//! ```text
//! fusion-asr-checkpoint 1
//! meta stage stage1
//! param projector.mlp.up.w projector 1 112x128
//! ...
//! payload 123456
//! <raw bytes>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &str = "fusion-asr-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

pub fn to_bytes(store: &ParamStore, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut header = format!("{MAGIC} {VERSION}\n");
    for (k, v) in meta {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(bad(format!("unusable meta entry {k:?}")));
        }
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let mut total = 0;
    for (_, p) in store.iter() {
        if p.name.is_empty() || p.name.contains(char::is_whitespace) {
            return Err(bad(format!("parameter name {:?} contains whitespace", p.name)));
        }
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "param {} {} {} {}\n",
            p.name,
            p.group,
            u8::from(p.decay),
            if dims.is_empty() { "scalar".to_string() } else { dims.join("x") }
        ));
        total += p.value.numel();
    }
    header.push_str(&format!("payload {total}\n"));
    let mut bytes = header.into_bytes();
    bytes.reserve(total * 8);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8"))?;
        pos += end + 1;
        Ok(line)
    };
    let first = next_line()?;
    if first != format!("{MAGIC} {VERSION}") {
        return Err(bad(format!("unknown header {first:?}")));
    }
    let mut meta = BTreeMap::new();
    let mut entries: Vec<(String, Group, bool, Vec<usize>)> = Vec::new();
    let total: usize = loop {
        let line = next_line()?;
        let mut parts = line.splitn(2, ' ');
        match (parts.next(), parts.next()) {
            (Some("meta"), Some(rest)) => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            (Some("param"), Some(rest)) => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("bad param line {line:?}")));
                }
                let group: Group = f[1].parse()?;
                let decay = match f[2] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(format!("bad decay flag in {line:?}"))),
                };
                let shape = if f[3] == "scalar" {
                    Vec::new()
                } else {
                    f[3].split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape in {line:?}"))))
                        .collect::<Result<Vec<_>>>()?
                };
                entries.push((f[0].to_string(), group, decay, shape));
            }
            (Some("payload"), Some(n)) => break n.parse().map_err(|_| bad("bad payload count"))?,
            _ => return Err(bad(format!("unexpected header line {line:?}"))),
        }
    };
    let expected: usize = entries.iter().map(|e| e.3.iter().product::<usize>()).sum();
    let payload = &bytes[pos..];
    if expected != total || payload.len() != total * 8 {
        return Err(bad(format!(
            "manifest lists {expected} values, header says {total}, payload holds {} bytes",
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut store = ParamStore::new();
    for (name, group, decay, shape) in entries {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if store.find(&name).is_some() {
            return Err(bad(format!("duplicate parameter {name}")));
        }
        store.add(name, group, Tensor::new(shape, data)?, decay);
    }
    Ok(Checkpoint { meta, store })
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, to_bytes(store, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

/// Overwrites every parameter of `store` with the checkpoint's value of the
/// same name. Fails if any is missing or differently shaped.
pub fn restore(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    if let Some((_, p)) = store.iter().find(|(_, p)| ckpt.store.find(&p.name).is_none()) {
        return Err(bad(format!("parameter {} is missing", p.name)));
    }
    store.load_matching(&ckpt.store)?;
    Ok(())
}
