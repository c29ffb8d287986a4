//! Tensor archive: a directory holding `index.txt` and `data.bin`.
//!
//! `data.bin` is the concatenation of every tensor as little-endian IEEE-754
//! 32-bit floats in row-major order. `index.txt` is UTF-8 text; lines starting
//! with `#` are comments and every other line describes one tensor as four
//! tab-separated fields:
//!
//! ```text
//! <name>\t<dim0>x<dim1>x...\t<offset>\t<count>
//! ```
//!
//! `offset` and `count` are measured in elements (not bytes). Scalars use the
//! shape `scalar`. Entries appear in lexicographic name order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{numel, Float, Tensor};

pub const INDEX_FILE: &str = "index.txt";
pub const DATA_FILE: &str = "data.bin";
const HEADER: &str = "# svdamage tensor archive v1\n# name\tshape\toffset\tcount (elements of little-endian f32)\n";

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(vec![]);
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

/// Write every parameter of `store` (frozen flags are not recorded).
pub fn save_archive<T: Float>(dir: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from(HEADER);
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    let mut offset = 0;
    for (name, p) in store.iter() {
        if name.contains(['\t', '\n']) {
            return Err(Error::Invalid(format!("parameter name `{name}` contains a tab or newline")));
        }
        let n = p.value.numel();
        index.push_str(&format!("{name}\t{}\t{offset}\t{n}\n", format_shape(p.value.shape())));
        for v in p.value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += n;
    }
    let write = |name: &str, data: &[u8]| -> Result<()> {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(data).map_err(|e| Error::io(&path, e))?;
        f.sync_all().map_err(|e| Error::io(&path, e))
    };
    write(DATA_FILE, &bytes)?;
    write(INDEX_FILE, index.as_bytes())
}

/// Read every tensor in an archive.
pub fn load_archive<T: Float>(dir: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let dir = dir.as_ref();
    let ipath = dir.join(INDEX_FILE);
    let dpath = dir.join(DATA_FILE);
    let index = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let data = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
    if data.len() % 4 != 0 {
        return Err(Error::Invalid(format!("{}: length {} is not a multiple of 4", dpath.display(), data.len())));
    }
    let total = data.len() / 4;
    let mut store = ParamStore::new();
    for (lineno, line) in index.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::Invalid(format!("{}:{}: {why}", ipath.display(), lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset, count] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let shape = parse_shape(shape).ok_or_else(|| bad("malformed shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("malformed offset"))?;
        let count: usize = count.parse().map_err(|_| bad("malformed count"))?;
        if numel(&shape) != count {
            return Err(bad("count does not match shape"));
        }
        if offset + count > total {
            return Err(bad("tensor extends past the end of data.bin"));
        }
        let values = data[offset * 4..(offset + count) * 4]
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        if store.contains(name) {
            return Err(bad("duplicate tensor name"));
        }
        store.insert(name, Tensor::from_vec(&shape, values)?);
    }
    Ok(store)
}
