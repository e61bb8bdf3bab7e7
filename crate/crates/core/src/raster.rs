//! `F32R` binary rasters: the on-disk format for every map artifact.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `"F32R"`                          |
//! | 4      | 4    | u32 version (= 1)                       |
//! | 8      | 4    | u32 width                               |
//! | 12     | 4    | u32 height                              |
//! | 16     | 4    | u32 channels (1 scalar, 2 vector, 3 photometry) |
//! | 20     | 8    | f64 field of view in arcsec             |
//! | 28     | 4    | u32 quantity tag                        |
//! | 32     | …    | f32 payload, row-major, channel-interleaved |
//!
//! Values are stored as 32-bit floats; reading back a written raster
//! reproduces the stored 32-bit values bit-exactly.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::grid::{AngularGrid, GridError, PhotometryStack, Quantity, ScalarField, VectorField};

pub const MAGIC: [u8; 4] = *b"F32R";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Errors carrying the byte offset at which decoding failed.
#[derive(Debug, Error)]
pub enum RasterError {
    #[error("bad magic at byte 0: found {found:?}, expected \"F32R\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {version} at byte 4 (expected {VERSION})")]
    UnsupportedVersion { version: u32 },
    #[error("truncated raster at byte {offset}: needed {needed} more bytes, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("bad channel count {channels} at byte 16 (expected 1, 2 or 3)")]
    BadChannelCount { channels: u32 },
    #[error("non-square raster {width}x{height} at byte 8 (grids are square)")]
    NonSquare { width: u32, height: u32 },
    #[error("unknown quantity tag {tag} at byte 28")]
    BadQuantityTag { tag: u32 },
    #[error("quantity tag {tag} at byte 28 is invalid for {channels} channel(s)")]
    QuantityChannelMismatch { tag: u32, channels: u32 },
    #[error("raster holds {found} channel(s), expected {expected}")]
    ChannelMismatch { expected: u32, found: u32 },
    #[error("raster payload violates field invariants: {0}")]
    InvalidField(#[from] GridError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// A decoded raster of any channel count.
#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    Scalar(ScalarField),
    Vector(VectorField),
    Photometry(PhotometryStack),
}

impl RasterData {
    pub fn channels(&self) -> u32 {
        match self {
            RasterData::Scalar(_) => 1,
            RasterData::Vector(_) => 2,
            RasterData::Photometry(_) => 3,
        }
    }

    pub fn grid(&self) -> AngularGrid {
        match self {
            RasterData::Scalar(f) => f.grid(),
            RasterData::Vector(f) => f.grid(),
            RasterData::Photometry(f) => f.grid(),
        }
    }

    fn quantity_tag(&self) -> u32 {
        match self {
            RasterData::Scalar(f) => f.quantity().tag(),
            RasterData::Vector(_) => Quantity::Generic.tag(),
            RasterData::Photometry(_) => Quantity::Photometry.tag(),
        }
    }
}

/// Encodes a raster into the `F32R` byte layout.
pub fn encode_raster(data: &RasterData) -> Vec<u8> {
    let grid = data.grid();
    let n = grid.n_pix() as u32;
    let channels = data.channels();
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * channels as usize * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&grid.fov_arcsec().to_le_bytes());
    out.extend_from_slice(&data.quantity_tag().to_le_bytes());
    match data {
        RasterData::Scalar(f) => {
            for &v in f.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        RasterData::Vector(f) => {
            for v in f.values() {
                out.extend_from_slice(&(v[0] as f32).to_le_bytes());
                out.extend_from_slice(&(v[1] as f32).to_le_bytes());
            }
        }
        RasterData::Photometry(f) => {
            for v in f.values() {
                for c in 0..3 {
                    out.extend_from_slice(&(v[c] as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RasterError> {
        if self.offset + n > self.bytes.len() {
            return Err(RasterError::Truncated {
                offset: self.offset,
                needed: n,
                available: self.bytes.len() - self.offset,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RasterError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, RasterError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a raster from bytes, validating the header field by field.
pub fn decode_raster(bytes: &[u8]) -> Result<RasterData, RasterError> {
    let mut cur = Cursor { bytes, offset: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(RasterError::BadMagic { found: magic.try_into().unwrap() });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(RasterError::UnsupportedVersion { version });
    }
    let width = cur.u32()?;
    let height = cur.u32()?;
    if width != height {
        return Err(RasterError::NonSquare { width, height });
    }
    let channels = cur.u32()?;
    if !(1..=3).contains(&channels) {
        return Err(RasterError::BadChannelCount { channels });
    }
    let fov = cur.f64()?;
    let tag = cur.u32()?;
    let quantity = Quantity::from_tag(tag).ok_or(RasterError::BadQuantityTag { tag })?;
    if channels == 3 && quantity != Quantity::Photometry {
        return Err(RasterError::QuantityChannelMismatch { tag, channels });
    }
    if channels == 2 && quantity != Quantity::Generic {
        return Err(RasterError::QuantityChannelMismatch { tag, channels });
    }

    let grid = AngularGrid::new(width as usize, fov)
        .map_err(RasterError::InvalidField)?;
    let n_values = grid.len() * channels as usize;
    let payload = cur.take(n_values * 4)?;
    let mut floats = Vec::with_capacity(n_values);
    for chunk in payload.chunks_exact(4) {
        floats.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
    }

    let data = match channels {
        1 => RasterData::Scalar(ScalarField::new(grid, quantity, floats)?),
        2 => {
            let values = floats.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            RasterData::Vector(VectorField::new(grid, values)?)
        }
        3 => {
            let values = floats.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            RasterData::Photometry(PhotometryStack::new(grid, values)?)
        }
        _ => unreachable!(),
    };
    Ok(data)
}

/// Writes a raster to disk (plain write; callers wanting atomicity should
/// write to a temporary path and rename).
pub fn write_raster(path: &Path, data: &RasterData) -> Result<(), RasterError> {
    fs::write(path, encode_raster(data))?;
    Ok(())
}

/// Reads any raster from disk.
pub fn read_raster(path: &Path) -> Result<RasterData, RasterError> {
    let bytes = fs::read(path)?;
    decode_raster(&bytes)
}

/// Reads a raster that must hold a single channel.
pub fn read_scalar(path: &Path) -> Result<ScalarField, RasterError> {
    match read_raster(path)? {
        RasterData::Scalar(f) => Ok(f),
        other => Err(RasterError::ChannelMismatch { expected: 1, found: other.channels() }),
    }
}

/// Reads a raster that must hold two channels.
pub fn read_vector(path: &Path) -> Result<VectorField, RasterError> {
    match read_raster(path)? {
        RasterData::Vector(f) => Ok(f),
        other => Err(RasterError::ChannelMismatch { expected: 2, found: other.channels() }),
    }
}

/// Reads a raster that must hold three channels.
pub fn read_photometry(path: &Path) -> Result<PhotometryStack, RasterError> {
    match read_raster(path)? {
        RasterData::Photometry(f) => Ok(f),
        other => Err(RasterError::ChannelMismatch { expected: 3, found: other.channels() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize, fov: f64) -> AngularGrid {
        AngularGrid::new(n, fov).unwrap()
    }

    #[test]
    fn scalar_roundtrip_preserves_f32_values_bitwise() {
        let g = grid(4, 9.0);
        // 0.1 is not exactly representable; the raster must reproduce the
        // 32-bit rounding of it bit-for-bit.
        let values = vec![0.1f64; 16];
        let field = ScalarField::new(g, Quantity::Convergence, values).unwrap();
        let bytes = encode_raster(&RasterData::Scalar(field));
        let RasterData::Scalar(back) = decode_raster(&bytes).unwrap() else {
            panic!("expected scalar");
        };
        let expected = f64::from(0.1f32);
        for &v in back.values() {
            assert_eq!(v.to_bits(), expected.to_bits());
        }
        assert_eq!(back.quantity(), Quantity::Convergence);
        assert_eq!(back.grid(), g);
    }

    #[test]
    fn header_errors_carry_offsets() {
        let g = grid(4, 9.0);
        let good = encode_raster(&RasterData::Scalar(ScalarField::zeros(g, Quantity::Generic)));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_raster(&bad_magic), Err(RasterError::BadMagic { .. })));

        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            decode_raster(&bad_version),
            Err(RasterError::UnsupportedVersion { version: 9 })
        ));

        let mut non_square = good.clone();
        non_square[12..16].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            decode_raster(&non_square),
            Err(RasterError::NonSquare { width: 4, height: 5 })
        ));

        let mut bad_channels = good.clone();
        bad_channels[16..20].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_raster(&bad_channels),
            Err(RasterError::BadChannelCount { channels: 7 })
        ));

        let mut bad_tag = good.clone();
        bad_tag[28..32].copy_from_slice(&42u32.to_le_bytes());
        assert!(matches!(decode_raster(&bad_tag), Err(RasterError::BadQuantityTag { tag: 42 })));

        // Truncation inside the payload reports the payload offset.
        let truncated = &good[..good.len() - 3];
        match decode_raster(truncated) {
            Err(RasterError::Truncated { offset, needed, available }) => {
                assert_eq!(offset, HEADER_LEN);
                assert_eq!(needed, 64);
                assert_eq!(available, 61);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn typed_readers_reject_wrong_channel_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.f32r");
        let g = grid(4, 9.0);
        write_raster(&path, &RasterData::Vector(VectorField::zeros(g))).unwrap();
        assert!(read_vector(&path).is_ok());
        assert!(matches!(
            read_scalar(&path),
            Err(RasterError::ChannelMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(
            read_photometry(&path),
            Err(RasterError::ChannelMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn photometry_roundtrip_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.f32r");
        let g = grid(6, 12.0);
        let mut stack = PhotometryStack::zeros(g);
        for (i, v) in stack.values_mut().iter_mut().enumerate() {
            *v = [i as f64, i as f64 * 0.5, i as f64 * 0.25];
        }
        write_raster(&path, &RasterData::Photometry(stack.clone())).unwrap();
        let back = read_photometry(&path).unwrap();
        assert_eq!(back, stack);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_raster(Path::new("/nonexistent/raster.f32r")),
            Err(RasterError::Io(_))
        ));
    }

    proptest! {
        /// Round-trip is the identity on (values, n_pix, fov, channels)
        /// for arbitrary finite f32 payloads.
        #[test]
        fn roundtrip_identity(
            n in 2usize..9,
            fov in 1.0f64..500.0,
            channels in 1u32..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = grid(n, fov);
            // Generate f32-representable values (the format stores f32).
            let mut gen = |non_negative: bool| -> f64 {
                let v = rng.gen_range(-1.0e6f32..1.0e6f32);
                f64::from(if non_negative { v.abs() } else { v })
            };
            let data = match channels {
                1 => RasterData::Scalar(ScalarField::new(
                    g, Quantity::Generic,
                    (0..g.len()).map(|_| gen(false)).collect(),
                ).unwrap()),
                2 => RasterData::Vector(VectorField::new(
                    g,
                    (0..g.len()).map(|_| [gen(false), gen(false)]).collect(),
                ).unwrap()),
                _ => RasterData::Photometry(PhotometryStack::new(
                    g,
                    (0..g.len()).map(|_| [gen(true), gen(true), gen(true)]).collect(),
                ).unwrap()),
            };
            let back = decode_raster(&encode_raster(&data)).unwrap();
            prop_assert_eq!(back, data);
        }
    }
}
