//! Binary checkpoint format.
//!
//! Little-endian layout: 8-byte magic, u32 version, u32 entry count, u64
//! trainable element count, then one record per parameter in registry order:
//! u32 name length, name bytes, u32 rank (always 4), four u32 dims, and the
//! raw f32 payload. Trainable values and BN running statistics are both
//! stored, so a round trip reproduces inference bit-exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"SWUNETCK";
const VERSION: u32 = 1;

/// Header fields of a checkpoint file.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointHeader {
    pub version: u32,
    pub entries: u32,
    pub trainable_elements: u64,
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(net.store.len() as u32).to_le_bytes())?;
    w.write_all(&(net.count_parameters() as u64).to_le_bytes())?;
    for (_, p) in net.store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&4u32.to_le_bytes())?;
        let s = p.value.shape();
        for d in [s.n, s.c, s.h, s.w] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    Ok(CheckpointHeader {
        version,
        entries: read_u32(&mut r)?,
        trainable_elements: read_u64(&mut r)?,
    })
}

/// Loads a checkpoint into a network with the same registry. Every name must
/// match shape-for-shape; the error names the first offending parameter.
pub fn load(net: &mut Network<f32>, path: &Path) -> Result<()> {
    let header = read_header(path)?;
    let mut r = BufReader::new(File::open(path)?);
    let mut skip = [0u8; 24];
    r.read_exact(&mut skip)?; // magic + version + counts

    let mut file_entries: HashMap<String, Tensor<f32>> = HashMap::new();
    let mut order = Vec::new();
    for _ in 0..header.entries {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::checkpoint("parameter name is not valid utf-8"))?;
        let rank = read_u32(&mut r)?;
        if rank != 4 {
            return Err(Error::checkpoint(format!(
                "parameter `{name}` has rank {rank}, expected 4"
            )));
        }
        let dims = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = vec![0f32; shape.numel()];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        order.push(name.clone());
        file_entries.insert(name, Tensor::new(shape, data)?);
    }

    // every network parameter must be present with a matching shape
    let ids: Vec<_> = net.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in &ids {
        let t = file_entries.get(name).ok_or_else(|| {
            Error::checkpoint(format!("checkpoint is missing parameter `{name}`"))
        })?;
        let want = net.store.value(*id).shape();
        if t.shape() != want {
            return Err(Error::checkpoint(format!(
                "parameter `{name}` has shape {} in the file but {want} in the network",
                t.shape()
            )));
        }
    }
    // and the file must not carry parameters the network lacks
    for name in &order {
        if net.store.by_name(name).is_none() {
            return Err(Error::checkpoint(format!(
                "checkpoint carries unknown parameter `{name}`"
            )));
        }
    }
    for (id, name) in ids {
        let t = file_entries.remove(&name).expect("checked above");
        net.store.set_value(id, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{named_config, SwitchConfig};
    use crate::net::build_network;

    fn tiny(base: Vec<usize>) -> SwitchConfig {
        SwitchConfig { base_filters: base, ..named_config("s-r2f2u-net").unwrap() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut net = build_network::<f32>(&tiny(vec![2, 4]), 11).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, xx| {
            (y * 8 + xx) as f32 / 64.0
        });
        // move the BN running stats off their init values first
        let (g, _) = net.train_pass(&x).unwrap();
        drop(g);
        let before = net.infer(&x).unwrap();

        save(&net, &path).unwrap();
        let mut other = build_network::<f32>(&tiny(vec![2, 4]), 999).unwrap();
        load(&mut other, &path).unwrap();
        let after = other.infer(&x).unwrap();
        assert_eq!(before.data(), after.data());

        let header = read_header(&path).unwrap();
        assert_eq!(header.trainable_elements as usize, net.count_parameters());
    }

    #[test]
    fn depth_mismatch_names_the_missing_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let shallow = build_network::<f32>(&tiny(vec![2, 4]), 1).unwrap();
        save(&shallow, &path).unwrap();

        let mut deep = build_network::<f32>(&tiny(vec![2, 4, 8]), 1).unwrap();
        let err = load(&mut deep, &path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc2") || msg.contains("dec1"), "got: {msg}");
    }

    #[test]
    fn extra_parameters_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let deep = build_network::<f32>(&tiny(vec![2, 4, 8]), 1).unwrap();
        save(&deep, &path).unwrap();
        let mut shallow = build_network::<f32>(&tiny(vec![2, 4]), 1).unwrap();
        assert!(matches!(load(&mut shallow, &path), Err(Error::Checkpoint(_))));
    }
}
