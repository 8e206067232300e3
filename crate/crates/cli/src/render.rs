//! PNG previews of spectral cubes.

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use jr2net::{Error, Result, SpectralCube};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub enum Rendered {
    Gray(GrayImage),
    Color(RgbImage),
}

impl Rendered {
    pub fn save(&self, path: &std::path::Path) -> image::ImageResult<()> {
        match self {
            Rendered::Gray(img) => img.save(path),
            Rendered::Color(img) => img.save(path),
        }
    }
}

pub fn band(cube: &SpectralCube, k: usize) -> Result<Rendered> {
    if k >= cube.bands() {
        return Err(Error::Argument(format!("band {k} out of range for {} bands", cube.bands())));
    }
    let (h, w, _) = cube.dims();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |j, i| Luma([to_byte(cube.get(i as usize, j as usize, k))]));
    Ok(Rendered::Gray(img))
}

/// Three smooth bumps: blue on the first bands, green mid-range, red at the end.
pub fn default_weights(bands: usize) -> [Vec<f64>; 3] {
    let bump = |center: f64| -> Vec<f64> {
        let span = (bands.max(2) - 1) as f64;
        (0..bands)
            .map(|k| {
                let t = k as f64 / span;
                (-(t - center).powi(2) / (2.0 * 0.15 * 0.15)).exp()
            })
            .collect()
    };
    [bump(0.85), bump(0.5), bump(0.15)]
}

/// Parses `r0,r1,..;g0,..;b0,..` with one weight per band in each channel.
pub fn parse_weights(text: &str, bands: usize) -> Result<[Vec<f64>; 3]> {
    let parts: Vec<&str> = text.split(';').collect();
    if parts.len() != 3 {
        return Err(Error::Argument(format!("expected 3 ';'-separated weight lists, got {}", parts.len())));
    }
    let mut out: [Vec<f64>; 3] = Default::default();
    for (slot, part) in out.iter_mut().zip(parts) {
        let values = part
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Argument(format!("bad weight in '{part}': {e}")))?;
        if values.len() != bands {
            return Err(Error::Argument(format!("{} weights given for {bands} bands", values.len())));
        }
        if values.iter().any(|v| *v < 0.0) || values.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Argument(format!("weights '{part}' must be non-negative and not all zero")));
        }
        *slot = values;
    }
    Ok(out)
}

pub fn composite(cube: &SpectralCube, weights: &[Vec<f64>; 3]) -> Result<Rendered> {
    let (h, w, c) = cube.dims();
    if weights.iter().any(|v| v.len() != c) {
        return Err(Error::Argument(format!("weights must have {c} entries per channel")));
    }
    let totals: Vec<f64> = weights.iter().map(|v| v.iter().sum()).collect();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |j, i| {
        let mut px = [0u8; 3];
        for (ch, (wv, total)) in weights.iter().zip(&totals).enumerate() {
            let v: f64 = wv.iter().enumerate().map(|(k, a)| a * cube.get(i as usize, j as usize, k)).sum();
            px[ch] = to_byte(v / total);
        }
        Rgb(px)
    });
    Ok(Rendered::Color(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_parse_and_validate() {
        let w = parse_weights("1,0;0,1;1,1", 2).unwrap();
        assert_eq!(w[2], vec![1.0, 1.0]);
        assert!(parse_weights("1,0;0,1", 2).is_err());
        assert!(parse_weights("1;0;1", 2).is_err());
    }

    #[test]
    fn constant_cube_renders_flat_grey() {
        let cube = SpectralCube::new(2, 3, 4, vec![0.5; 24]).unwrap();
        let Rendered::Color(img) = composite(&cube, &default_weights(4)).unwrap() else { panic!() };
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
    }
}
