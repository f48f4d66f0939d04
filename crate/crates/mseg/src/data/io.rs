//! Volume file I/O.
//!
//! Native format (bit-exact round trips):
//! ```text
//! magic  8 bytes  "MSEGVOL1"
//! dims   3 x u32  little-endian, [D, H, W]
//! space  3 x f32  little-endian, mm per voxel
//! dtype  1 x u8   0 = f32 image, 1 = u16 labels
//! data   D*H*W voxels, little-endian, W fastest
//! ```
//!
//! Also reads uncompressed single-file NIfTI-1 (`.nii`) with datatypes
//! uint8/int16/float32, honoring `dim[1..3]` and `pixdim[1..3]`. Orientation
//! matrices are ignored; inputs must be pre-registered externally.
//!
//! Label map text format: one `full_id partial_id` pair per line,
//! whitespace separated, `#` starts a comment.

use super::{LabelMap, LabelVolume, Volume};
use crate::error::{Error, Result};
use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MSEGVOL1";
const DTYPE_F32: u8 = 0;
const DTYPE_U16: u8 = 1;
const MAX_VOXELS: u64 = 1 << 33;

/// Either payload of the native volume format.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Image(Volume),
    Labels(LabelVolume),
}

impl VolumeFile {
    pub fn into_image(self) -> Result<Volume> {
        match self {
            VolumeFile::Image(v) => Ok(v),
            VolumeFile::Labels(_) => Err(Error::Format("expected image, found labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            VolumeFile::Labels(l) => Ok(l),
            VolumeFile::Image(_) => Err(Error::Format("expected labels, found image".into())),
        }
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &VolumeFile) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    let (dims, spacing) = match v {
        VolumeFile::Image(img) => (img.dims, img.spacing),
        VolumeFile::Labels(lab) => (lab.dims, [1.0f32; 3]),
    };
    for d in dims {
        w.write_u32::<LittleEndian>(d as u32).map_err(io_err)?;
    }
    for s in spacing {
        w.write_f32::<LittleEndian>(s).map_err(io_err)?;
    }
    match v {
        VolumeFile::Image(img) => {
            w.write_u8(DTYPE_F32).map_err(io_err)?;
            let mut buf = vec![0u8; img.data.len() * 4];
            LittleEndian::write_f32_into(&img.data, &mut buf);
            w.write_all(&buf).map_err(io_err)?;
        }
        VolumeFile::Labels(lab) => {
            w.write_u8(DTYPE_U16).map_err(io_err)?;
            let mut buf = vec![0u8; lab.data.len() * 2];
            LittleEndian::write_u16_into(&lab.data, &mut buf);
            w.write_all(&buf).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let trunc = |_| Error::Format(format!("{}: truncated payload", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    }
    let n = dims.iter().map(|&d| d as u64).product::<u64>();
    if n == 0 || n > MAX_VOXELS {
        return Err(Error::Format(format!(
            "{}: dims {dims:?} overflow",
            path.display()
        )));
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = r.read_f32::<LittleEndian>().map_err(trunc)?;
    }
    let dtype = r.read_u8().map_err(trunc)?;
    match dtype {
        DTYPE_F32 => {
            let mut buf = vec![0u8; n as usize * 4];
            r.read_exact(&mut buf).map_err(trunc)?;
            let mut data = vec![0f32; n as usize];
            LittleEndian::read_f32_into(&buf, &mut data);
            Ok(VolumeFile::Image(Volume::new(dims, spacing, data)?))
        }
        DTYPE_U16 => {
            let mut buf = vec![0u8; n as usize * 2];
            r.read_exact(&mut buf).map_err(trunc)?;
            let mut data = vec![0u16; n as usize];
            LittleEndian::read_u16_into(&buf, &mut data);
            let num_classes = data.iter().copied().max().unwrap_or(0) as usize + 1;
            Ok(VolumeFile::Labels(LabelVolume::new(dims, data, num_classes)?))
        }
        other => Err(Error::Format(format!(
            "{}: unknown dtype code {other}",
            path.display()
        ))),
    }
}

const NIFTI_HEADER_LEN: usize = 348;

/// Minimal NIfTI-1 ingestion: uncompressed single-file `.nii`, native (little)
/// endianness, datatypes uint8 (2), int16 (4), float32 (16). Values are
/// widened to f32.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::Format(format!(
            "{}: shorter than a NIfTI-1 header",
            path.display()
        )));
    }
    let sizeof_hdr = LittleEndian::read_i32(&bytes[0..4]);
    if sizeof_hdr != 348 {
        return Err(Error::Format(format!(
            "{}: sizeof_hdr {sizeof_hdr}, expected 348 (big-endian files are unsupported)",
            path.display()
        )));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Format(format!(
            "{}: NIfTI magic {:?}, only single-file \"n+1\" is supported",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let ndim = LittleEndian::read_i16(&bytes[40..42]);
    if !(3..=7).contains(&ndim) {
        return Err(Error::Format(format!(
            "{}: dim[0] = {ndim}, need at least 3 spatial dimensions",
            path.display()
        )));
    }
    let mut dim = [0i16; 7];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = LittleEndian::read_i16(&bytes[42 + 2 * i..44 + 2 * i]);
    }
    // trailing non-spatial dimensions must be singleton
    for &extra in dim[3..ndim as usize].iter() {
        if extra > 1 {
            return Err(Error::Format(format!(
                "{}: non-singleton dimension beyond the third ({extra})",
                path.display()
            )));
        }
    }
    if dim[..3].iter().any(|&d| d < 1) {
        return Err(Error::Format(format!(
            "{}: non-positive spatial dims {:?}",
            path.display(),
            &dim[..3]
        )));
    }
    let datatype = LittleEndian::read_i16(&bytes[70..72]);
    let mut pixdim = [0f32; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = LittleEndian::read_f32(&bytes[80 + 4 * i..84 + 4 * i]);
        if *p <= 0.0 {
            *p = 1.0;
        }
    }
    let vox_offset = LittleEndian::read_f32(&bytes[108..112]) as usize;
    let vox_offset = vox_offset.max(NIFTI_HEADER_LEN);

    // NIfTI dim order is x-fastest; map (x,y,z) onto (W,H,D)
    let (nx, ny, nz) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);
    let n = (nx as u64) * (ny as u64) * (nz as u64);
    if n > MAX_VOXELS {
        return Err(Error::Format(format!(
            "{}: dims overflow",
            path.display()
        )));
    }
    let n = n as usize;
    let payload = &bytes[vox_offset..];
    let data: Vec<f32> = match datatype {
        2 => {
            if payload.len() < n {
                return Err(Error::Format(format!("{}: truncated payload", path.display())));
            }
            payload[..n].iter().map(|&b| b as f32).collect()
        }
        4 => {
            if payload.len() < n * 2 {
                return Err(Error::Format(format!("{}: truncated payload", path.display())));
            }
            (0..n)
                .map(|i| LittleEndian::read_i16(&payload[i * 2..i * 2 + 2]) as f32)
                .collect()
        }
        16 => {
            if payload.len() < n * 4 {
                return Err(Error::Format(format!("{}: truncated payload", path.display())));
            }
            let mut data = vec![0f32; n];
            LittleEndian::read_f32_into(&payload[..n * 4], &mut data);
            data
        }
        other => return Err(Error::NiftiDatatype(other)),
    };
    Volume::new([nz, ny, nx], [pixdim[2], pixdim[1], pixdim[0]], data)
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<u16> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| {
                Error::Format(format!(
                    "{}:{}: expected `full_id partial_id`",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let full = parse(it.next())?;
        let partial = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Format(format!(
                "{}:{}: trailing tokens",
                path.display(),
                lineno + 1
            )));
        }
        pairs.push((full, partial));
    }
    LabelMap::new(pairs)
}

pub fn write_label_map(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# full_id partial_id").map_err(|e| Error::io(path, e))?;
    for &(full, partial) in map.pairs() {
        writeln!(w, "{full} {partial}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
