//! Label volumes and a strict NIfTI-1 single-file reader/writer.
//!
//! Only uncompressed `.nii` files with the `n+1\0` magic are accepted. The
//! affine (qform/sform) is ignored: voxels are kept in stored order, which is
//! x-fastest, `index = x + H·(y + W·z)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
const NIFTI2_HEADER_SIZE: i32 = 540;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const MAGIC: usize = 344;
}

const UNITS_MM: u8 = 2;
const LEGEND_PREFIX: &str = "labels:";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad NIfTI magic {0:?}; only single-file \"n+1\" volumes are supported")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("file truncated: need {needed} bytes, found {found}")]
    TruncatedFile { needed: u64, found: u64 },
    #[error("voxel {index} holds non-integer label value {value}")]
    NonIntegerLabels { index: usize, value: f64 },
    #[error("voxel spacing must be finite and > 0, got {0:?}")]
    NonPositiveSpacing([f32; 3]),
    #[error("label value {value} at voxel {index} is outside 0..=255")]
    LabelOutOfRange { index: usize, value: i64 },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("unsupported file: {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// NIfTI datatype codes accepted by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    UInt8,
    Int16,
    Int32,
    Float32,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self, VolumeError> {
        match code {
            2 => Ok(Self::UInt8),
            4 => Ok(Self::Int16),
            8 => Ok(Self::Int32),
            16 => Ok(Self::Float32),
            other => Err(VolumeError::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Self::UInt8 => 2,
            Self::Int16 => 4,
            Self::Int32 => 8,
            Self::Float32 => 16,
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Self::UInt8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
        }
    }
}

pub fn default_legend() -> BTreeMap<u8, String> {
    [(0, "background"), (1, "liver"), (2, "tumor")]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect()
}

/// A dense 3D label grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing_mm: [f32; 3],
    labels: Vec<u8>,
    legend: BTreeMap<u8, String>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing_mm: [f32; 3], labels: Vec<u8>) -> Result<Self, VolumeError> {
        Self::with_legend(dims, spacing_mm, labels, default_legend())
    }

    pub fn with_legend(
        dims: [usize; 3],
        spacing_mm: [f32; 3],
        labels: Vec<u8>,
        legend: BTreeMap<u8, String>,
    ) -> Result<Self, VolumeError> {
        let count = voxel_count(dims)?;
        if labels.len() != count {
            return Err(VolumeError::InvalidDims(format!(
                "{} labels for dims {:?} ({} voxels)",
                labels.len(),
                dims,
                count
            )));
        }
        check_spacing(spacing_mm)?;
        Ok(Self { dims, spacing_mm, labels, legend })
    }

    /// All-background volume.
    pub fn zeros(dims: [usize; 3], spacing_mm: [f32; 3]) -> Result<Self, VolumeError> {
        let count = voxel_count(dims)?;
        Self::new(dims, spacing_mm, vec![0; count])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().map(|&s| f64::from(s)).product()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn legend(&self) -> &BTreeMap<u8, String> {
        &self.legend
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [h, w, _] = self.dims;
        [index % h, (index / h) % w, index / (h * w)]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Mirror the volume along one axis (0 = x, 1 = y, 2 = z).
    pub fn flipped(&self, axis: usize) -> Self {
        let [h, w, l] = self.dims;
        let mut out = self.clone();
        for z in 0..l {
            for y in 0..w {
                for x in 0..h {
                    let (sx, sy, sz) = match axis {
                        0 => (h - 1 - x, y, z),
                        1 => (x, w - 1 - y, z),
                        _ => (x, y, l - 1 - z),
                    };
                    out.set(x, y, z, self.get(sx, sy, sz));
                }
            }
        }
        out
    }
}

fn voxel_count(dims: [usize; 3]) -> Result<usize, VolumeError> {
    if dims.contains(&0) {
        return Err(VolumeError::InvalidDims(format!("zero-sized axis in {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VolumeError::InvalidDims(format!("{dims:?} overflows")))
}

fn check_spacing(spacing: [f32; 3]) -> Result<(), VolumeError> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(VolumeError::NonPositiveSpacing(spacing))
    }
}

/// Non-fatal observations made while reading a file.
#[derive(Debug, Clone, PartialEq)]
pub enum ReadWarning {
    /// scl_slope/scl_inter would rescale values; they are ignored for labels.
    IntensityScalingIgnored { slope: f32, inter: f32 },
}

#[derive(Debug, Clone)]
pub struct NiftiReadout {
    pub volume: LabelVolume,
    pub warnings: Vec<ReadWarning>,
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeError> {
    let readout = read_nifti_report(path)?;
    for w in &readout.warnings {
        log::warn!("{w:?}");
    }
    Ok(readout.volume)
}

pub fn read_nifti_report(path: impl AsRef<Path>) -> Result<NiftiReadout, VolumeError> {
    let mut file = File::open(path.as_ref())?;
    let file_len = file.metadata()?.len();

    let mut header = [0u8; HEADER_SIZE];
    let got = read_up_to(&mut file, &mut header)?;
    if got >= 2 && header[0] == 0x1f && header[1] == 0x8b {
        return Err(VolumeError::Unsupported("gzip-compressed NIfTI"));
    }
    if got < 4 {
        return Err(VolumeError::TruncatedFile { needed: HEADER_SIZE as u64, found: file_len });
    }
    let little = if LittleEndian::read_i32(&header[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        true
    } else if BigEndian::read_i32(&header[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        false
    } else if LittleEndian::read_i32(&header) == NIFTI2_HEADER_SIZE
        || BigEndian::read_i32(&header) == NIFTI2_HEADER_SIZE
    {
        return Err(VolumeError::Unsupported("NIfTI-2"));
    } else {
        return Err(VolumeError::Unsupported("header size is not 348"));
    };
    if got < HEADER_SIZE {
        return Err(VolumeError::TruncatedFile { needed: HEADER_SIZE as u64, found: file_len });
    }
    if little {
        parse_body::<LittleEndian>(&header, &mut file, file_len)
    } else {
        parse_body::<BigEndian>(&header, &mut file, file_len)
    }
}

fn read_up_to(file: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match file.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

fn parse_body<E: ByteOrder>(
    header: &[u8; HEADER_SIZE],
    file: &mut File,
    file_len: u64,
) -> Result<NiftiReadout, VolumeError> {
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&header[offsets::MAGIC..offsets::MAGIC + 4]);
    if &magic != b"n+1\0" {
        return Err(VolumeError::BadMagic(magic));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&header[offsets::DIM + 2 * i..]);
    }
    let rank = dim[0];
    if !(3..=7).contains(&rank) {
        return Err(VolumeError::InvalidDims(format!("dim[0] = {rank}, expected 3..=7")));
    }
    if dim[4..=rank as usize].iter().any(|&d| d != 1) {
        return Err(VolumeError::InvalidDims(format!(
            "trailing dimensions {:?} must all be 1",
            &dim[4..=rank as usize]
        )));
    }
    if dim[1..=3].iter().any(|&d| d <= 0) {
        return Err(VolumeError::InvalidDims(format!("non-positive spatial dims {:?}", &dim[1..=3])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = Datatype::from_code(E::read_i16(&header[offsets::DATATYPE..]))?;
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = E::read_f32(&header[offsets::PIXDIM + 4 * (i + 1)..]);
    }
    check_spacing(spacing)?;

    let vox_offset = E::read_f32(&header[offsets::VOX_OFFSET..]);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(VolumeError::InvalidDims(format!("vox_offset {vox_offset} precedes data")));
    }
    let vox_offset = vox_offset as u64;

    let mut warnings = Vec::new();
    let slope = E::read_f32(&header[offsets::SCL_SLOPE..]);
    let inter = E::read_f32(&header[offsets::SCL_INTER..]);
    if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
        warnings.push(ReadWarning::IntensityScalingIgnored { slope, inter });
    }

    let count = voxel_count(dims)?;
    let payload = (count * datatype.bytes_per_voxel()) as u64;
    if file_len < vox_offset + payload {
        return Err(VolumeError::TruncatedFile { needed: vox_offset + payload, found: file_len });
    }
    file.seek(SeekFrom::Start(vox_offset))?;
    let mut raw = vec![0u8; payload as usize];
    file.read_exact(&mut raw)?;

    let labels = decode_labels::<E>(&raw, datatype)?;
    let legend = parse_legend(&header[offsets::DESCRIP..offsets::DESCRIP + 80]).unwrap_or_else(default_legend);
    let volume = LabelVolume::with_legend(dims, spacing, labels, legend)?;
    Ok(NiftiReadout { volume, warnings })
}

fn decode_labels<E: ByteOrder>(raw: &[u8], datatype: Datatype) -> Result<Vec<u8>, VolumeError> {
    let to_label = |index: usize, value: i64| {
        u8::try_from(value).map_err(|_| VolumeError::LabelOutOfRange { index, value })
    };
    match datatype {
        Datatype::UInt8 => Ok(raw.to_vec()),
        Datatype::Int16 => raw
            .chunks_exact(2)
            .enumerate()
            .map(|(i, c)| to_label(i, i64::from(E::read_i16(c))))
            .collect(),
        Datatype::Int32 => raw
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| to_label(i, i64::from(E::read_i32(c))))
            .collect(),
        Datatype::Float32 => raw
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = E::read_f32(c);
                if !v.is_finite() || v.fract() != 0.0 {
                    return Err(VolumeError::NonIntegerLabels { index: i, value: f64::from(v) });
                }
                to_label(i, v as i64)
            })
            .collect(),
    }
}

fn encode_legend(legend: &BTreeMap<u8, String>) -> Option<String> {
    let body: Vec<String> = legend.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let text = format!("{LEGEND_PREFIX}{}", body.join(";"));
    let fits = text.len() < 80 && legend.values().all(|v| !v.contains([';', '=', '\0']));
    fits.then_some(text)
}

fn parse_legend(descrip: &[u8]) -> Option<BTreeMap<u8, String>> {
    let end = descrip.iter().position(|&b| b == 0).unwrap_or(descrip.len());
    let text = std::str::from_utf8(&descrip[..end]).ok()?;
    let body = text.strip_prefix(LEGEND_PREFIX)?;
    if body.is_empty() {
        return Some(BTreeMap::new());
    }
    body.split(';')
        .map(|entry| {
            let (k, v) = entry.split_once('=')?;
            Some((k.parse().ok()?, v.to_string()))
        })
        .collect()
}

/// Serialize to the 352-byte-offset little-endian uint8 layout.
pub fn encode_nifti(vol: &LabelVolume) -> Vec<u8> {
    let mut buf = vec![0u8; DEFAULT_VOX_OFFSET + vol.len()];
    let h = &mut buf[..HEADER_SIZE];
    LittleEndian::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    let dims = vol.dims();
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[offsets::DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[offsets::DATATYPE..], Datatype::UInt8.code());
    LittleEndian::write_i16(&mut h[offsets::BITPIX..], 8);
    let sp = vol.spacing_mm();
    let pixdim: [f32; 8] = [1.0, sp[0], sp[1], sp[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[offsets::PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[offsets::VOX_OFFSET..], DEFAULT_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[offsets::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[offsets::SCL_INTER..], 0.0);
    h[offsets::XYZT_UNITS] = UNITS_MM;
    if let Some(text) = encode_legend(vol.legend()) {
        h[offsets::DESCRIP..offsets::DESCRIP + text.len()].copy_from_slice(text.as_bytes());
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    // bytes 348..352: extension flag, all zero
    buf[DEFAULT_VOX_OFFSET..].copy_from_slice(vol.labels());
    buf
}

pub fn write_nifti(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    if dims_product(vol.dims()) == 0 {
        return Err(VolumeError::InvalidDims("cannot write an empty volume".into()));
    }
    if vol.dims().iter().any(|&d| d > i16::MAX as usize) {
        return Err(VolumeError::InvalidDims(format!("{:?} exceeds the NIfTI-1 axis limit", vol.dims())));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&encode_nifti(vol))?;
    out.flush()?;
    Ok(())
}

fn dims_product(dims: [usize; 3]) -> usize {
    dims.iter().product()
}
