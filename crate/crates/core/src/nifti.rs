//! Single-file NIfTI-1 (`.nii`, optionally gzip-compressed) reading and writing.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, NiftiError, Result};
use crate::ops::Dims3;
use crate::volume::{Mask, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

/// Supported on-disk element types (NIfTI datatype codes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8 = 2,
    I16 = 4,
    I32 = 8,
    F32 = 16,
    F64 = 64,
}

impl Datatype {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

struct Fields<'a> {
    b: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.b[at..at + N]);
        if self.big_endian {
            a.reverse();
        }
        a
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Decodes an in-memory single-file NIfTI-1 image.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE,
            available: bytes.len(),
        }
        .into());
    }
    let magic: [u8; 4] = bytes[344..348].try_into().expect("4 bytes");
    match &magic {
        b"n+1\0" => {}
        b"ni1\0" => return Err(NiftiError::UnsupportedFormat.into()),
        _ => return Err(NiftiError::BadMagic(magic).into()),
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) == 348 => true,
        other => return Err(NiftiError::Header(format!("sizeof_hdr is {other}")).into()),
    };
    let h = Fields {
        b: bytes,
        big_endian,
    };
    let ndim = h.i16(40);
    let dim: Vec<i16> = (1..8).map(|i| h.i16(40 + 2 * i)).collect();
    // trailing singleton dimensions (e.g. a 4D header with one frame) are still a 3D volume
    if !(3..=7).contains(&ndim) || dim[3..ndim as usize].iter().any(|&d| d != 1) {
        return Err(NiftiError::Dimensionality(ndim).into());
    }
    if dim[..3].iter().any(|&d| d < 1) {
        return Err(NiftiError::Header(format!("non-positive extent in {:?}", &dim[..3])).into());
    }
    let (nx, ny, nz) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);
    let code = h.i16(70);
    let dtype = Datatype::from_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;
    let pixdim: Vec<f32> = (1..4).map(|i| h.f32(76 + 4 * i).abs()).collect();
    let spacing =
        [pixdim[2], pixdim[1], pixdim[0]].map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
    let vox_offset = h.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(NiftiError::Header(format!("vox_offset {vox_offset}")).into());
    }
    let offset = vox_offset as usize;
    let slope = h.f32(112);
    let inter = h.f32(116);
    let (qform, sform) = (h.i16(252), h.i16(254));
    if sform > 0 {
        let off_diag = [284, 288, 296, 304, 312, 316];
        if off_diag.iter().any(|&o| h.f32(o) != 0.0) {
            log::warn!("oblique orientation ignored; only axis-aligned volumes are supported");
        }
    } else if qform > 0 && [256, 260, 264].iter().any(|&o| h.f32(o) != 0.0) {
        log::warn!("rotated qform ignored; only axis-aligned volumes are supported");
    }
    let origin = [h.f32(276), h.f32(272), h.f32(268)];

    let count = nx * ny * nz;
    let needed = offset + count * dtype.size();
    if bytes.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            available: bytes.len(),
        }
        .into());
    }
    let raw = &bytes[offset..needed];
    let p = Fields { b: raw, big_endian };
    let mut data: Vec<f32> = match dtype {
        Datatype::U8 => raw.iter().map(|&v| v as f32).collect(),
        Datatype::I16 => (0..count).map(|i| p.i16(2 * i) as f32).collect(),
        Datatype::I32 => (0..count).map(|i| p.i32(4 * i) as f32).collect(),
        Datatype::F32 => (0..count).map(|i| p.f32(4 * i)).collect(),
        Datatype::F64 => (0..count)
            .map(|i| f64::from_le_bytes(p.bytes(8 * i)) as f32)
            .collect(),
    };
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(Volume::new(Dims3::new(nz, ny, nx), data, spacing)?.with_origin(origin))
}

/// Reads a `.nii` or `.nii.gz` file (compression detected from the content).
pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    decode_nifti(&read_bytes(path)?).map_err(|e| match e {
        Error::Nifti(source) => Error::NiftiFile {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Encodes a volume; masks are usually written as [`Datatype::U8`].
pub fn encode_nifti(volume: &Volume, datatype: Datatype) -> Vec<u8> {
    let dims = volume.dims();
    let [sz, sy, sx] = volume.spacing();
    let [oz, oy, ox] = volume.origin();
    let mut h = vec![0u8; VOX_OFFSET];
    let mut put = |at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(0, &(HEADER_SIZE as i32).to_le_bytes());
    put(38, b"r");
    let dim: [i16; 8] = [3, dims.w as i16, dims.h as i16, dims.d as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(40 + 2 * i, &d.to_le_bytes());
    }
    put(70, &(datatype as i16).to_le_bytes());
    put(72, &((datatype.size() * 8) as i16).to_le_bytes());
    let pixdim: [f32; 8] = [1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(76 + 4 * i, &p.to_le_bytes());
    }
    put(108, &(VOX_OFFSET as f32).to_le_bytes());
    put(112, &1.0f32.to_le_bytes());
    put(123, &[2]); // mm
    put(252, &1i16.to_le_bytes());
    put(254, &1i16.to_le_bytes());
    for (at, v) in [(268, ox), (272, oy), (276, oz)] {
        put(at, &v.to_le_bytes());
    }
    for (row, (s, o)) in [(sx, ox), (sy, oy), (sz, oz)].into_iter().enumerate() {
        let mut r = [0f32; 4];
        r[row] = s;
        r[3] = o;
        for (j, v) in r.iter().enumerate() {
            put(280 + 16 * row + 4 * j, &v.to_le_bytes());
        }
    }
    put(344, b"n+1\0");
    let data = volume.data();
    match datatype {
        Datatype::U8 => h.extend(data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
        Datatype::I16 => h.extend(data.iter().flat_map(|&v| (v.round() as i16).to_le_bytes())),
        Datatype::I32 => h.extend(data.iter().flat_map(|&v| (v.round() as i32).to_le_bytes())),
        Datatype::F32 => h.extend(data.iter().flat_map(|&v| v.to_le_bytes())),
        Datatype::F64 => h.extend(data.iter().flat_map(|&v| (v as f64).to_le_bytes())),
    }
    h
}

/// Writes a volume; a path ending in `.gz` is gzip-compressed.
pub fn save_nifti(volume: &Volume, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(volume, datatype);
    let io = |e| Error::io(path, e);
    if path.extension().is_some_and(|e| e == "gz") {
        let file = std::fs::File::create(path).map_err(io)?;
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&bytes).map_err(io)?;
        enc.finish().map_err(io)?;
        Ok(())
    } else {
        std::fs::write(path, bytes).map_err(io)
    }
}

/// Writes a binary mask as `uint8` zeros and ones.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    save_nifti(&mask.to_volume(), path, Datatype::U8)
}

/// Reads a mask, binarizing at `> 0.5`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(Mask::from_volume(&load_nifti(path)?, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dims: Dims3) -> Volume {
        Volume::new(
            dims,
            (0..dims.len())
                .map(|i| (i as f32 * 0.37).sin() * 100.0)
                .collect(),
            [0.9, 1.0, 1.2],
        )
        .unwrap()
    }

    #[test]
    fn header_constants() {
        let bytes = encode_nifti(&sample(Dims3::new(2, 3, 4)), Datatype::F32);
        assert_eq!(i32::from_le_bytes(bytes[0..4].try_into().unwrap()), 348);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(bytes.len(), 352 + 24 * 4);
    }

    #[test]
    fn float_round_trip_in_memory() {
        let v = sample(Dims3::new(3, 4, 5));
        let back = decode_nifti(&encode_nifti(&v, Datatype::F32)).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(back.spacing(), v.spacing());
        assert_eq!(back.dims(), v.dims());
    }

    #[test]
    fn applies_scaling() {
        let v = Volume::new(Dims3::new(1, 1, 2), vec![3.0, -2.0], [1.0; 3]).unwrap();
        let mut bytes = encode_nifti(&v, Datatype::I16);
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(decode_nifti(&bytes).unwrap().data(), &[7.0, -3.0]);
    }

    #[test]
    fn distinct_errors() {
        let v = sample(Dims3::cube(2));
        let good = encode_nifti(&v, Datatype::F32);
        let mut detached = good.clone();
        detached[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(
            decode_nifti(&detached),
            Err(Error::Nifti(NiftiError::UnsupportedFormat))
        ));
        let mut junk = good.clone();
        junk[344..348].copy_from_slice(b"abcd");
        assert!(matches!(
            decode_nifti(&junk),
            Err(Error::Nifti(NiftiError::BadMagic(_)))
        ));
        let mut dtype = good.clone();
        dtype[70..72].copy_from_slice(&128i16.to_le_bytes());
        assert!(matches!(
            decode_nifti(&dtype),
            Err(Error::Nifti(NiftiError::UnsupportedDatatype(128)))
        ));
        let mut four_d = good.clone();
        four_d[40..42].copy_from_slice(&4i16.to_le_bytes());
        four_d[48..50].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(
            decode_nifti(&four_d),
            Err(Error::Nifti(NiftiError::Dimensionality(4)))
        ));
        assert!(matches!(
            decode_nifti(&good[..good.len() - 1]),
            Err(Error::Nifti(NiftiError::Truncated { .. }))
        ));
    }

    #[test]
    fn big_endian_header_is_read() {
        let v = Volume::new(Dims3::new(1, 1, 3), vec![1.0, 2.0, 3.0], [1.0; 3]).unwrap();
        let le = encode_nifti(&v, Datatype::I16);
        let mut be = le.clone();
        let swap = |b: &mut [u8], at: usize, n: usize| b[at..at + n].reverse();
        swap(&mut be, 0, 4);
        for i in 0..8 {
            swap(&mut be, 40 + 2 * i, 2);
            swap(&mut be, 76 + 4 * i, 4);
        }
        for at in [70, 72] {
            swap(&mut be, at, 2);
        }
        for at in [108, 112, 116] {
            swap(&mut be, at, 4);
        }
        be[252..254].fill(0);
        be[254..256].fill(0);
        for i in 0..3 {
            swap(&mut be, 352 + 2 * i, 2);
        }
        assert_eq!(decode_nifti(&be).unwrap().data(), &[1.0, 2.0, 3.0]);
    }
}
