//! Single-file binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (caller metadata, parameter names and shapes, optimizer scalars),
//! then every parameter and optimizer moment as little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};

pub const MAGIC: &[u8; 8] = b"MOTIFCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    /// Which parameters carry moment buffers.
    present: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct Header<H> {
    kind: String,
    meta: H,
    params: Vec<ParamEntry>,
    adam: Option<AdamHeader>,
}

fn put(out: &mut Vec<u8>, m: &Array2<f64>) {
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save<H: Serialize>(
    path: &Path,
    kind: &str,
    meta: &H,
    store: &ParamStore,
    adam: Option<&Adam>,
) -> Result<()> {
    let params: Vec<ParamEntry> = store
        .iter()
        .map(|(_, name, m)| ParamEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
        })
        .collect();
    let adam_header = adam.map(|a| AdamHeader {
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        step: a.step,
        present: (0..store.len())
            .map(|i| a.m.get(i).is_some_and(Option::is_some))
            .collect(),
    });
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        meta,
        params,
        adam: adam_header,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * store.numel() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, m) in store.iter() {
        put(&mut out, m);
    }
    if let Some(a) = adam {
        for i in 0..store.len() {
            if let (Some(Some(m)), Some(Some(v))) = (a.m.get(i), a.v.get(i)) {
                put(&mut out, m);
                put(&mut out, v);
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::format("checkpoint", "truncated file"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let bytes = self.take(rows * cols * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"))
    }
}

/// Loads a checkpoint written by [`save`] with the same `kind`.
pub fn load<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, ParamStore, Option<Adam>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|_| {
            Error::missing(
                path,
                format!("{kind} checkpoint; pass --checkpoint or run the producing stage first"),
            )
        })?
        .read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::SchemaVersion {
            what: "checkpoint",
            found: version,
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header<H> = serde_json::from_slice(r.take(len)?)?;
    if header.kind != kind {
        return Err(Error::format(
            "checkpoint",
            format!("expected a {kind} checkpoint, found {}", header.kind),
        ));
    }
    let mut store = ParamStore::new();
    for p in &header.params {
        let m = r.matrix(p.rows, p.cols)?;
        store.add(p.name.clone(), m);
    }
    let adam = match header.adam {
        Some(h) => {
            let mut a = Adam {
                beta1: h.beta1,
                beta2: h.beta2,
                eps: h.eps,
                step: h.step,
                m: Vec::new(),
                v: Vec::new(),
            };
            for (i, present) in h.present.iter().enumerate() {
                if *present {
                    let p = &header.params[i];
                    a.m.push(Some(r.matrix(p.rows, p.cols)?));
                    a.v.push(Some(r.matrix(p.rows, p.cols)?));
                } else {
                    a.m.push(None);
                    a.v.push(None);
                }
            }
            Some(a)
        }
        None => None,
    };
    if !r.buf.is_empty() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok((header.meta, store, adam))
}
