//! Minimal NIfTI-1 support: single-file `.nii` and `.nii.gz`, datatypes
//! uint8, int16 and float32, three spatial dimensions.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            NiftiDatatype::Uint8 => "uint8",
            NiftiDatatype::Int16 => "int16",
            NiftiDatatype::Float32 => "float32",
        }
    }
}

/// Parsed NIfTI-1 header. The raw 348 bytes are kept so orientation fields
/// (qform/sform) survive a read-modify-write untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    raw: Vec<u8>,
}

// byte offsets within the header
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_QUATERN_B: usize = 256;
const OFF_SROW_X: usize = 280;
const OFF_MAGIC: usize = 344;

impl NiftiHeader {
    /// A fresh little-endian header for a volume of `dims` and `spacing`, with
    /// scanner-anatomical sform/qform set to a plain scaling.
    pub fn new(dims: [usize; 3], spacing: [f32; 3], datatype: NiftiDatatype) -> Self {
        let mut raw = vec![0u8; HEADER_SIZE];
        LittleEndian::write_i32(&mut raw[0..4], HEADER_SIZE as i32);
        raw[38] = b'r'; // regular
        raw[OFF_XYZT_UNITS] = 2; // mm
        LittleEndian::write_i16(&mut raw[OFF_QFORM_CODE..], 1);
        LittleEndian::write_i16(&mut raw[OFF_SFORM_CODE..], 1);
        for (row, s) in spacing.iter().enumerate() {
            LittleEndian::write_f32(&mut raw[OFF_SROW_X + row * 16 + row * 4..], *s);
        }
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = dims[a] as i16;
        }
        let mut pixdim = [1f32; 8];
        pixdim[0] = 1.0; // qfac
        pixdim[1..4].copy_from_slice(&spacing);
        NiftiHeader {
            dim,
            datatype: datatype.code(),
            bitpix: 8 * datatype.bytes() as i16,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            magic: *MAGIC_SINGLE,
            raw,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [1, 2, 3].map(|a| {
            if (a as i16) <= self.dim[0] {
                self.dim[a].max(1) as usize
            } else {
                1
            }
        })
    }

    pub fn spacing(&self) -> [f32; 3] {
        [1, 2, 3].map(|a| {
            let s = self.pixdim[a].abs();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
    }

    pub fn datatype(&self) -> Result<NiftiDatatype> {
        NiftiDatatype::from_code(self.datatype)
    }

    /// qform/sform codes (never interpreted).
    pub fn orientation_codes(&self) -> (i16, i16) {
        (
            LittleEndian::read_i16(&self.raw[OFF_QFORM_CODE..]),
            LittleEndian::read_i16(&self.raw[OFF_SFORM_CODE..]),
        )
    }

    /// The `[quatern_b .. srow_z]` block, verbatim.
    pub fn orientation_block(&self) -> &[u8] {
        &self.raw[OFF_QUATERN_B..OFF_SROW_X + 48]
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Truncated {
                expected: HEADER_SIZE,
                found: bytes.len(),
            });
        }
        let little = LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32;
        let big = BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32;
        let magic: [u8; 4] = bytes[OFF_MAGIC..OFF_MAGIC + 4].try_into().unwrap();
        if &magic != MAGIC_SINGLE || !(little || big) {
            return Err(Error::BadMagic);
        }
        let header = if little {
            Self::parse_fields::<LittleEndian>(bytes, magic)
        } else {
            Self::parse_fields::<BigEndian>(bytes, magic)
        };
        // keep the raw bytes little-endian so writing is uniform
        let mut h = header;
        h.raw = bytes[..HEADER_SIZE].to_vec();
        if big {
            swap_header_to_little(&mut h.raw);
        }
        Ok(h)
    }

    fn parse_fields<B: ByteOrder>(bytes: &[u8], magic: [u8; 4]) -> Self {
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = B::read_i16(&bytes[OFF_DIM + 2 * i..]);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = B::read_f32(&bytes[OFF_PIXDIM + 4 * i..]);
        }
        NiftiHeader {
            dim,
            datatype: B::read_i16(&bytes[OFF_DATATYPE..]),
            bitpix: B::read_i16(&bytes[OFF_BITPIX..]),
            pixdim,
            vox_offset: B::read_f32(&bytes[OFF_VOX_OFFSET..]),
            scl_slope: B::read_f32(&bytes[OFF_SCL_SLOPE..]),
            scl_inter: B::read_f32(&bytes[OFF_SCL_INTER..]),
            magic,
            raw: Vec::new(),
        }
    }

    /// Header bytes for writing: preserved fields plus the current values of
    /// the parsed ones, little-endian.
    fn to_bytes(&self) -> Vec<u8> {
        let mut raw = if self.raw.len() == HEADER_SIZE {
            self.raw.clone()
        } else {
            vec![0u8; HEADER_SIZE]
        };
        LittleEndian::write_i32(&mut raw[0..4], HEADER_SIZE as i32);
        for (i, d) in self.dim.iter().enumerate() {
            LittleEndian::write_i16(&mut raw[OFF_DIM + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut raw[OFF_DATATYPE..], self.datatype);
        LittleEndian::write_i16(&mut raw[OFF_BITPIX..], self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            LittleEndian::write_f32(&mut raw[OFF_PIXDIM + 4 * i..], *p);
        }
        LittleEndian::write_f32(&mut raw[OFF_VOX_OFFSET..], self.vox_offset);
        LittleEndian::write_f32(&mut raw[OFF_SCL_SLOPE..], self.scl_slope);
        LittleEndian::write_f32(&mut raw[OFF_SCL_INTER..], self.scl_inter);
        raw[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(&self.magic);
        raw
    }
}

/// Field layout of the NIfTI-1 header as (offset, width) pairs for every
/// multi-byte numeric field, used to byte-swap big-endian files.
fn swap_header_to_little(raw: &mut [u8]) {
    let mut fields: Vec<(usize, usize)> = vec![(0, 4), (32, 4), (36, 2)];
    fields.extend((0..8).map(|i| (OFF_DIM + 2 * i, 2)));
    fields.extend([(56, 4), (60, 4), (64, 4), (68, 2), (70, 2), (72, 2), (74, 2)]);
    fields.extend((0..8).map(|i| (OFF_PIXDIM + 4 * i, 4)));
    fields.extend([
        (108, 4),
        (112, 4),
        (116, 4),
        (120, 2),
        (124, 4),
        (128, 4),
        (132, 4),
        (136, 4),
        (140, 4),
        (144, 4),
    ]);
    fields.extend([(OFF_QFORM_CODE, 2), (OFF_SFORM_CODE, 2)]);
    fields.extend((0..6).map(|i| (OFF_QUATERN_B + 4 * i, 4)));
    fields.extend((0..12).map(|i| (OFF_SROW_X + 4 * i, 4)));
    for (off, width) in fields {
        raw[off..off + width].reverse();
    }
}

/// In-memory content of a NIfTI file.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiData {
    /// float32 or int16 data (scaled).
    Intensity(Volume),
    /// uint8 data with identity scaling.
    Labels(LabelVolume, Volume),
}

impl NiftiData {
    /// Intensities regardless of storage type.
    pub fn into_volume(self) -> Volume {
        match self {
            NiftiData::Intensity(v) => v,
            NiftiData::Labels(_, v) => v,
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(Cursor::new(raw))
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads a single-file NIfTI-1 volume. Intensities are scaled by
/// `scl_slope`/`scl_inter` when the slope is non-zero.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<(NiftiData, NiftiHeader)> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let header = NiftiHeader::parse(&bytes)?;
    let little = LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32;
    let datatype = header.datatype()?;
    let dims = header.dims();
    if header.dim[0] < 1 || header.dim[0] > 7 || header.dim[1..=3].iter().any(|&d| d < 1) {
        return Err(Error::InvalidVolume(format!("bad dim field {:?}", header.dim)));
    }
    let extra = (4..=header.dim[0] as usize)
        .map(|a| header.dim[a].max(1) as usize)
        .product::<usize>();
    if extra != 1 {
        return Err(Error::InvalidVolume(format!(
            "only 3D volumes are supported, dim = {:?}",
            header.dim
        )));
    }
    let n: usize = dims.iter().product();
    let offset = (header.vox_offset as usize).max(HEADER_SIZE);
    let expected = offset + n * datatype.bytes();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[offset..expected];
    let raw: Vec<f32> = match (datatype, little) {
        (NiftiDatatype::Uint8, _) => payload.iter().map(|&b| b as f32).collect(),
        (NiftiDatatype::Int16, true) => payload
            .chunks_exact(2)
            .map(|c| LittleEndian::read_i16(c) as f32)
            .collect(),
        (NiftiDatatype::Int16, false) => payload.chunks_exact(2).map(|c| BigEndian::read_i16(c) as f32).collect(),
        (NiftiDatatype::Float32, true) => payload.chunks_exact(4).map(LittleEndian::read_f32).collect(),
        (NiftiDatatype::Float32, false) => payload.chunks_exact(4).map(BigEndian::read_f32).collect(),
    };
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let values: Vec<f32> = if scaled {
        raw.iter().map(|&v| v * slope + inter).collect()
    } else {
        raw.clone()
    };
    let volume = Volume::new(dims, header.spacing(), values)?;
    let data = if datatype == NiftiDatatype::Uint8 && !scaled {
        let labels = LabelVolume::new(dims, payload.to_vec())?;
        NiftiData::Labels(labels, volume)
    } else {
        NiftiData::Intensity(volume)
    };
    Ok((data, header))
}

/// Reads any supported file as intensities.
pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume, NiftiHeader)> {
    let (data, header) = read_nifti(path)?;
    Ok((data.into_volume(), header))
}

/// Reads a label file. Non-uint8 files are accepted when every value is an
/// integer in 0..=255.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(LabelVolume, NiftiHeader)> {
    let (data, header) = read_nifti(path)?;
    match data {
        NiftiData::Labels(l, _) => Ok((l, header)),
        NiftiData::Intensity(v) => {
            let mut labels = Vec::with_capacity(v.len());
            for &x in v.data() {
                if !(0.0..=255.0).contains(&x) || x.fract() != 0.0 {
                    return Err(Error::ValueOutOfRange {
                        value: x,
                        datatype: "label",
                    });
                }
                labels.push(x as u8);
            }
            Ok((LabelVolume::new(v.dims(), labels)?, header))
        }
    }
}

/// Writes `values` with a fresh header.
pub fn write_nifti(
    dims: [usize; 3],
    spacing: [f32; 3],
    values: &[f32],
    path: impl AsRef<Path>,
    datatype: NiftiDatatype,
) -> Result<()> {
    let header = NiftiHeader::new(dims, spacing, datatype);
    write_nifti_with_header(dims, spacing, values, &header, path, datatype)
}

/// Writes `values`, copying every non-geometry field (including orientation)
/// from `template`.
pub fn write_nifti_with_header(
    dims: [usize; 3],
    spacing: [f32; 3],
    values: &[f32],
    template: &NiftiHeader,
    path: impl AsRef<Path>,
    datatype: NiftiDatatype,
) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(values.len(), dims.iter().product::<usize>());
    let mut header = template.clone();
    header.dim = [1; 8];
    header.dim[0] = 3;
    for a in 0..3 {
        if dims[a] > i16::MAX as usize {
            return Err(Error::InvalidVolume(format!("dimension {} too large", dims[a])));
        }
        header.dim[a + 1] = dims[a] as i16;
    }
    header.pixdim[1..4].copy_from_slice(&spacing);
    header.datatype = datatype.code();
    header.bitpix = 8 * datatype.bytes() as i16;
    header.vox_offset = DATA_OFFSET as f32;
    header.scl_slope = 1.0;
    header.scl_inter = 0.0;
    header.magic = *MAGIC_SINGLE;

    let mut buf = header.to_bytes();
    buf.extend_from_slice(&[0u8; DATA_OFFSET - HEADER_SIZE]);
    buf.reserve(values.len() * datatype.bytes());
    let range_err = |value: f32| Error::ValueOutOfRange {
        value,
        datatype: datatype.name(),
    };
    match datatype {
        NiftiDatatype::Uint8 => {
            for &v in values {
                if !(0.0..=255.0).contains(&v) {
                    return Err(range_err(v));
                }
                buf.push(v.round() as u8);
            }
        }
        NiftiDatatype::Int16 => {
            for &v in values {
                if !(i16::MIN as f32..=i16::MAX as f32).contains(&v) {
                    return Err(range_err(v));
                }
                buf.write_i16::<LittleEndian>(v.round() as i16).unwrap();
            }
        }
        NiftiDatatype::Float32 => {
            for &v in values {
                buf.write_f32::<LittleEndian>(v).unwrap();
            }
        }
    }

    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let bytes = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&buf).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        buf
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Convenience wrapper for label volumes (uint8).
pub fn write_labels(labels: &LabelVolume, spacing: [f32; 3], path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<f32> = labels.labels().iter().map(|&l| l as f32).collect();
    write_nifti(labels.dims(), spacing, &values, path, NiftiDatatype::Uint8)
}
