//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MONETCKP"
//! version  u32      1
//! arch     5 x u32  base_channels, depth, kernel_size, C_w, C_s
//! count    u32      number of parameter tensors
//! per tensor:
//!   name_len u32, name UTF-8, rank u32, dims u32[rank], data f32[numel]
//! adam     u8       0 = absent, 1 = present
//! if present:
//!   lr, beta1, beta2, epsilon  f32 each
//!   t  u64
//!   per tensor (same order): m f32[numel], v f32[numel]
//! ```
//!
//! Round-trips are bit-exact including parameter order; loading validates
//! the name grammar and every shape against the architecture echo.

use crate::engine::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::models::{ArchConfig, ModelParams};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MONETCKP";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams<f32>,
    state: Option<&AdamState<f32>>,
) -> Result<()> {
    let path = path.as_ref();
    let err = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(err)?;
    let mut w = BufWriter::new(file);
    let mut inner = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let a = &params.arch;
        for field in [
            a.base_channels,
            a.depth,
            a.kernel_size,
            a.num_partial_classes,
            a.num_full_classes,
        ] {
            w.write_u32::<LittleEndian>(field as u32)?;
        }
        w.write_u32::<LittleEndian>(params.tensors().len() as u32)?;
        for (name, t) in params.tensors() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        match state {
            None => w.write_u8(0)?,
            Some(s) => {
                w.write_u8(1)?;
                for v in [s.lr, s.beta1, s.beta2, s.epsilon] {
                    w.write_f32::<LittleEndian>(v)?;
                }
                w.write_u64::<LittleEndian>(s.t)?;
                for (name, t) in params.tensors() {
                    let (m, v) = s.slots.get(name).ok_or(std::io::Error::other(format!(
                        "optimizer state missing slot {name}"
                    )))?;
                    if m.len() != t.numel() {
                        return Err(std::io::Error::other(format!(
                            "optimizer slot {name} has wrong length"
                        )));
                    }
                    for &x in m {
                        w.write_f32::<LittleEndian>(x)?;
                    }
                    for &x in v {
                        w.write_f32::<LittleEndian>(x)?;
                    }
                }
            }
        }
        w.flush()
    };
    inner().map_err(err)
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ModelParams<f32>, Option<AdamState<f32>>)> {
    let path = path.as_ref();
    let err = |e| Error::io(path, e);
    let file = std::fs::File::open(path).map_err(err)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad checkpoint magic {magic:?}",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(err)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut fields = [0usize; 5];
    for f in &mut fields {
        *f = r.read_u32::<LittleEndian>().map_err(err)? as usize;
    }
    let arch = ArchConfig {
        base_channels: fields[0],
        depth: fields[1],
        kernel_size: fields[2],
        num_partial_classes: fields[3],
        num_full_classes: fields[4],
    };
    let count = r.read_u32::<LittleEndian>().map_err(err)? as usize;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(err)? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!(
                "{}: implausible name length {name_len}",
                path.display()
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format(format!("{}: parameter name is not UTF-8", path.display())))?;
        let rank = r.read_u32::<LittleEndian>().map_err(err)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!(
                "{}: implausible tensor rank {rank}",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(err)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(err)?;
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!(
                "{}: duplicate parameter {name}",
                path.display()
            )));
        }
    }
    // validates the name set, the grammar, and every shape against arch
    let params = ModelParams::from_tensors(arch, tensors)?;

    let state = match r.read_u8().map_err(err)? {
        0 => None,
        1 => {
            let mut state = AdamState::new(0.0, params.tensors());
            state.lr = r.read_f32::<LittleEndian>().map_err(err)?;
            state.beta1 = r.read_f32::<LittleEndian>().map_err(err)?;
            state.beta2 = r.read_f32::<LittleEndian>().map_err(err)?;
            state.epsilon = r.read_f32::<LittleEndian>().map_err(err)?;
            state.t = r.read_u64::<LittleEndian>().map_err(err)?;
            for (name, t) in params.tensors() {
                let (m, v) = state.slots.get_mut(name).unwrap();
                m.resize(t.numel(), 0.0);
                v.resize(t.numel(), 0.0);
                r.read_f32_into::<LittleEndian>(m).map_err(err)?;
                r.read_f32_into::<LittleEndian>(v).map_err(err)?;
            }
            Some(state)
        }
        flag => {
            return Err(Error::Format(format!(
                "{}: bad optimizer-state flag {flag}",
                path.display()
            )))
        }
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(err)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after checkpoint payload",
            path.display()
        )));
    }
    Ok((params, state))
}
