//! Binary parameter archive.
//!
//! Layout (little endian): magic `SHMA`, `u32` version, `u32` entry count, then
//! per entry a `u32`-prefixed UTF-8 name, a `u32` rank, `u64` dims and `f32`
//! values.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{Adam, Module, NnError, Scalar};

const MAGIC: &[u8; 4] = b"SHMA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_archive<W: Write>(mut out: W, entries: &[ArchiveEntry]) -> Result<(), NnError> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(entries.len() as u32)?;
    for e in entries {
        out.write_u32::<LittleEndian>(e.name.len() as u32)?;
        out.write_all(e.name.as_bytes())?;
        out.write_u32::<LittleEndian>(e.shape.len() as u32)?;
        for &d in &e.shape {
            out.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in &e.values {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_archive<R: Read>(mut input: R) -> Result<Vec<ArchiveEntry>, NnError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Archive("not a parameter archive".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(NnError::Archive(format!(
            "archive version {version}, expected {VERSION}"
        )));
    }
    let count = input.read_u32::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = input.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NnError::Archive(e.to_string()))?;
        let rank = input.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| input.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut values = vec![0f32; n];
        input.read_f32_into::<LittleEndian>(&mut values)?;
        entries.push(ArchiveEntry {
            name,
            shape,
            values,
        });
    }
    Ok(entries)
}

/// Parameters followed by buffers, in visitation order.
pub fn module_entries<T: Scalar>(module: &mut dyn Module<T>) -> Vec<ArchiveEntry> {
    let mut out = Vec::new();
    let mut push = |p: &mut crate::Param<T>| {
        out.push(ArchiveEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            values: p.value.iter().map(|v| v.as_f64() as f32).collect(),
        })
    };
    module.visit_params(&mut push);
    module.visit_buffers(&mut push);
    out
}

/// Load values produced by [`module_entries`], checking names and shapes.
pub fn load_module_entries<T: Scalar>(
    module: &mut dyn Module<T>,
    entries: &[ArchiveEntry],
) -> Result<(), NnError> {
    let mut iter = entries.iter();
    let mut err: Option<NnError> = None;
    let mut take = |p: &mut crate::Param<T>| {
        if err.is_some() {
            return;
        }
        match iter.next() {
            Some(e) if e.name == p.name && e.shape == p.shape => {
                for (d, &v) in p.value.iter_mut().zip(&e.values) {
                    *d = T::lit(v as f64);
                }
            }
            Some(e) => {
                err = Some(NnError::Archive(format!(
                    "entry {} {:?} does not match parameter {} {:?}",
                    e.name, e.shape, p.name, p.shape
                )))
            }
            None => err = Some(NnError::Archive(format!("archive ends before {}", p.name))),
        }
    };
    module.visit_params(&mut take);
    module.visit_buffers(&mut take);
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = iter.next() {
        return Err(NnError::Archive(format!("unexpected extra entry {}", extra.name)));
    }
    Ok(())
}

impl<T: Scalar> Adam<T> {
    pub fn export(&self) -> Vec<ArchiveEntry> {
        let mut out = Vec::new();
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            for (kind, data) in [("first", m), ("second", v)] {
                out.push(ArchiveEntry {
                    name: format!("adam.{kind}.{i}"),
                    shape: vec![data.len()],
                    values: data.iter().map(|x| x.as_f64() as f32).collect(),
                });
            }
        }
        out
    }

    pub fn import(&mut self, entries: &[ArchiveEntry], step: u64) -> Result<(), NnError> {
        if entries.len() % 2 != 0 {
            return Err(NnError::Archive("unpaired optimizer moments".into()));
        }
        self.first.clear();
        self.second.clear();
        for (i, pair) in entries.chunks(2).enumerate() {
            if pair[0].name != format!("adam.first.{i}") || pair[1].name != format!("adam.second.{i}") {
                return Err(NnError::Archive(format!("unexpected optimizer entry {}", pair[0].name)));
            }
            self.first.push(pair[0].values.iter().map(|&v| T::lit(v as f64)).collect());
            self.second.push(pair[1].values.iter().map(|&v| T::lit(v as f64)).collect());
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{BatchNorm2d, Conv2d};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn module_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f32>::new(2, 3, 3, &mut rng);
        let mut bytes = Vec::new();
        write_archive(&mut bytes, &module_entries(&mut conv)).unwrap();
        let entries = read_archive(bytes.as_slice()).unwrap();
        let mut other = Conv2d::<f32>::new(2, 3, 3, &mut rng);
        assert_ne!(other.weight.value, conv.weight.value);
        load_module_entries(&mut other, &entries).unwrap();
        assert_eq!(other.weight.value, conv.weight.value);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut bn = BatchNorm2d::<f32>::new(4);
        let entries = module_entries(&mut bn);
        let mut smaller = BatchNorm2d::<f32>::new(3);
        assert!(load_module_entries(&mut smaller, &entries).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(read_archive(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
    }
}
