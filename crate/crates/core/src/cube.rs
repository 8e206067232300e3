//! Spectral cubes, measurements and latent cubes, plus the CSI1 file container.
//!
//! All volumes are stored band-sequential: the value at `(i, j, k)` lives at flat
//! offset `k * H * W + i * W + j`. In memory values are `f64`; on disk they are
//! little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{argument, Error, Result};

pub const CSI1_MAGIC: &[u8; 4] = b"CSI1";
pub const CSI1_VERSION: u32 = 1;
pub const CSI1_HEADER_LEN: usize = 20;

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::Data(format!("{what} has non-finite value at offset {pos}"))),
        None => Ok(()),
    }
}

macro_rules! volume_impl {
    ($ty:ident, $depth:ident) => {
        impl $ty {
            /// Builds a volume from band-sequential data, validating shape and finiteness.
            pub fn new(height: usize, width: usize, $depth: usize, data: Vec<f64>) -> Result<Self> {
                if height == 0 || width == 0 || $depth == 0 {
                    return Err(argument(format!(
                        "{} dimensions must be positive, got {height}x{width}x{}",
                        stringify!($ty),
                        $depth
                    )));
                }
                if data.len() != height * width * $depth {
                    return Err(argument(format!(
                        "{} of {height}x{width}x{} needs {} values, got {}",
                        stringify!($ty),
                        $depth,
                        height * width * $depth,
                        data.len()
                    )));
                }
                check_finite(&data, stringify!($ty))?;
                Ok(Self { height, width, $depth, data })
            }

            pub fn zeros(height: usize, width: usize, $depth: usize) -> Self {
                Self { height, width, $depth, data: vec![0.0; height * width * $depth] }
            }

            /// Builds a volume from a function of `(i, j, k)`.
            pub fn from_fn(
                height: usize,
                width: usize,
                $depth: usize,
                mut f: impl FnMut(usize, usize, usize) -> f64,
            ) -> Result<Self> {
                let mut data = Vec::with_capacity(height * width * $depth);
                for k in 0..$depth {
                    for i in 0..height {
                        for j in 0..width {
                            data.push(f(i, j, k));
                        }
                    }
                }
                Self::new(height, width, $depth, data)
            }

            pub(crate) fn from_raw(height: usize, width: usize, $depth: usize, data: Vec<f64>) -> Self {
                debug_assert_eq!(data.len(), height * width * $depth);
                Self { height, width, $depth, data }
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn $depth(&self) -> usize {
                self.$depth
            }

            pub fn dims(&self) -> (usize, usize, usize) {
                (self.height, self.width, self.$depth)
            }

            #[inline]
            pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
                k * self.height * self.width + i * self.width + j
            }

            #[inline]
            pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
                self.data[self.offset(i, j, k)]
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            /// One band (or feature plane) as a row-major `H x W` slice.
            pub fn band(&self, k: usize) -> &[f64] {
                let plane = self.height * self.width;
                &self.data[k * plane..(k + 1) * plane]
            }
        }
    };
}

/// A spectral scene `x` of `H x W` pixels and `C` bands.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

volume_impl!(SpectralCube, bands);

/// A latent cube `alpha` of `H x W` pixels and `F` feature channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCube {
    height: usize,
    width: usize,
    features: usize,
    data: Vec<f64>,
}

volume_impl!(LatentCube, features);

impl SpectralCube {
    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Spatial crop of `size x size` pixels with top-left corner at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<SpectralCube> {
        if size_h == 0 || size_w == 0 || top + size_h > self.height || left + size_w > self.width {
            return Err(argument(format!(
                "crop {size_h}x{size_w} at ({top},{left}) exceeds {}x{} cube",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size_h * size_w * self.bands);
        for k in 0..self.bands {
            for i in top..top + size_h {
                let start = self.offset(i, left, k);
                data.extend_from_slice(&self.data[start..start + size_w]);
            }
        }
        Ok(SpectralCube::from_raw(size_h, size_w, self.bands, data))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SpectralCube> {
        load_cube(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_cube(self, path)
    }
}

/// A 2D compressed projection `y` of `H x W` detector pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Measurement {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(argument(format!("measurement dimensions must be positive, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(argument(format!(
                "measurement of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        check_finite(&data, "Measurement")?;
        Ok(Self { height, width, data })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Stored on disk as a one-band cube.
    pub fn to_cube(&self) -> SpectralCube {
        SpectralCube::from_raw(self.height, self.width, 1, self.data.clone())
    }

    pub fn from_cube(cube: SpectralCube) -> Result<Measurement> {
        if cube.bands() != 1 {
            return Err(argument(format!("measurement file must have one band, found {}", cube.bands())));
        }
        let (h, w, _) = cube.dims();
        Ok(Measurement::from_raw(h, w, cube.into_vec()))
    }
}

/// Reads a CSI1 cube file.
pub fn load_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let bytes = fs::read(path.as_ref())?;
    decode_cube(&bytes)
}

/// Writes a CSI1 cube file. Values are rounded to binary32.
pub fn save_cube(cube: &SpectralCube, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_cube(cube);
    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn encode_cube(cube: &SpectralCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(CSI1_HEADER_LEN + 4 * cube.data.len());
    out.extend_from_slice(CSI1_MAGIC);
    out.extend_from_slice(&CSI1_VERSION.to_le_bytes());
    for dim in [cube.height, cube.width, cube.bands] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in &cube.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_cube(bytes: &[u8]) -> Result<SpectralCube> {
    if bytes.len() < CSI1_HEADER_LEN {
        return Err(Error::Format(format!("file is {} bytes, shorter than the 20-byte header", bytes.len())));
    }
    if &bytes[0..4] != CSI1_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != CSI1_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (h, w, c) = (word(8) as usize, word(12) as usize, word(16) as usize);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("zero dimension in header {h}x{w}x{c}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("header dimensions {h}x{w}x{c} overflow")))?;
    let payload = &bytes[CSI1_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Length { expected, found: payload.len() });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    SpectralCube::new(h, w, c, data)
}

/// Scales a cube by its maximum so that the largest value becomes 1.
pub fn normalize(cube: &SpectralCube) -> Result<SpectralCube> {
    let peak = cube.max_value();
    if cube.data.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("cannot normalize an all-zero cube".into()));
    }
    if peak <= 0.0 {
        return Err(Error::Degenerate(format!("cube maximum {peak} is not positive")));
    }
    let data = cube.data.iter().map(|v| v / peak).collect();
    Ok(SpectralCube::from_raw(cube.height, cube.width, cube.bands, data))
}
