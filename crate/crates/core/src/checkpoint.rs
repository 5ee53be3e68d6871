//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RFT1" | version u32 | entry count u32
//! per entry: name length u16 | UTF-8 name | dtype u8 (0 = f32) | rank u8 | dims u32 × rank | values
//! ```
//!
//! Every parameter tensor is written once under its canonical name, so a
//! shared kernel appears a single time. Running batch-norm statistics are
//! stored as `bn{slot}.running_mean` / `bn{slot}.running_var`. The network
//! spec that rebuilds the sharing structure is written next to the
//! checkpoint as JSON in `<path>.spec`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::blocks::RunningStats;
use crate::error::{Error, Result};
use crate::network::{Architecture, Model, NetworkSpec};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor4};

pub const MAGIC: &[u8; 4] = b"RFT1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_entries<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::format(format!("name too long: {}", e.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[DTYPE_F32, e.dims.len() as u8])?;
        for &d in &e.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(e.values.len() * 4);
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::format(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("not a checkpoint: bad magic bytes"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format("entry name is not UTF-8"))?
            .to_string();
        let head = c.take(2, "dtype")?;
        if head[0] != DTYPE_F32 {
            return Err(Error::format(format!("entry {name}: unsupported dtype code {}", head[0])));
        }
        let rank = head[1] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(format!("entry {name}: size overflow")))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?, &name)?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push(Entry { name, dims, values });
    }
    if c.pos != data.len() {
        return Err(Error::format(format!("{} trailing bytes after the last entry", data.len() - c.pos)));
    }
    Ok(out)
}

pub fn spec_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".spec");
    PathBuf::from(s)
}

/// All tensors of a model as checkpoint entries.
pub fn model_entries<T: Scalar>(model: &Model<T>) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for d in &model.arch.decls {
        let v = model.store.value(d.id)?;
        out.push(Entry { name: d.name.clone(), dims: d.shape.to_vec(), values: v.data().iter().map(|x| x.as_f64() as f32).collect() });
    }
    for (slot, rs) in model.running.iter().enumerate() {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect();
        out.push(Entry { name: format!("bn{slot}.running_mean"), dims: vec![rs.mean.len()], values: f(&rs.mean) });
        out.push(Entry { name: format!("bn{slot}.running_var"), dims: vec![rs.var.len()], values: f(&rs.var) });
    }
    Ok(out)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let entries = model_entries(model)?;
    let json = serde_json::to_string_pretty(&model.arch.spec).map_err(|e| Error::format(e.to_string()))?;
    let mut buf = Vec::new();
    write_entries(&mut buf, &entries)?;
    fs::write(path, buf)?;
    fs::write(spec_path(path), json)?;
    Ok(())
}

/// Rebuilds a model from entries; every parameter and statistic must be present.
pub fn model_from_entries<T: Scalar>(spec: &NetworkSpec, entries: Vec<Entry>) -> Result<Model<T>> {
    let arch = Architecture::plan(spec)?;
    let mut by_name: HashMap<String, Entry> = entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<T>> {
        let e = by_name.remove(name).ok_or_else(|| Error::format(format!("checkpoint has no entry {name}")))?;
        if e.dims != dims {
            return Err(Error::format(format!("entry {name}: dims {:?}, expected {:?}", e.dims, dims)));
        }
        Ok(e.values.iter().map(|&v| T::of(v as f64)).collect())
    };
    let mut store = ParamStore::new();
    for d in &arch.decls {
        let v = take(&d.name, &d.shape)?;
        store.insert_at(d.id, d.name.clone(), d.kind, Tensor4::from_vec(d.shape, v)?);
    }
    let mut running = Vec::with_capacity(arch.bn_channels.len());
    for (slot, &c) in arch.bn_channels.iter().enumerate() {
        let mean = take(&format!("bn{slot}.running_mean"), &[c])?;
        let var = take(&format!("bn{slot}.running_var"), &[c])?;
        running.push(RunningStats { mean, var });
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::format(format!("checkpoint entry {extra} does not belong to this network")));
    }
    Ok(Model { arch, store, running })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let sp = spec_path(path);
    let json = fs::read_to_string(&sp)
        .map_err(|e| Error::format(format!("cannot read network spec {}: {e}", sp.display())))?;
    let spec: NetworkSpec = serde_json::from_str(&json).map_err(|e| Error::format(format!("bad network spec: {e}")))?;
    let entries = read_entries(fs::File::open(path)?)?;
    model_from_entries(&spec, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        write_entries(&mut buf, &[Entry { name: "w".into(), dims: vec![2], values: vec![1.0, -2.0] }]).unwrap();
        assert_eq!(&buf[..4], b"RFT1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..14], &1u16.to_le_bytes());
        assert_eq!(buf[14], b'w');
        assert_eq!(&buf[15..17], &[0, 1]);
        assert_eq!(&buf[17..21], &2u32.to_le_bytes());
        assert_eq!(&buf[21..25], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 29);
        assert_eq!(read_entries(&buf[..]).unwrap()[0].values, vec![1.0, -2.0]);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        write_entries(&mut buf, &[Entry { name: "w".into(), dims: vec![3], values: vec![0.0; 3] }]).unwrap();
        assert!(read_entries(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_entries(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[15] = 7;
        assert!(read_entries(&bad[..]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_entries(&long[..]).is_err());
    }
}
