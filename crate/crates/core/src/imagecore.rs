//! Grayscale patches, binary PGM I/O, cropping, histograms and the synthetic
//! patch generator used when no photographic corpus is at hand.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Number of gray levels in an 8-bit image.
pub const LEVELS: usize = 256;

/// An 8-bit single-channel image stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grayscale8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Grayscale8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Applies `f` to every pixel, keeping the dimensions.
    pub fn map_pixels(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Gray-level histogram with one bin per intensity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram256 {
    counts: [u64; LEVELS],
}

impl Histogram256 {
    pub fn from_counts(counts: [u64; LEVELS]) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64; LEVELS] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin frequencies summing to one (all zeros for an empty histogram).
    pub fn normalized(&self) -> [f32; LEVELS] {
        let total = self.total();
        let mut out = [0f32; LEVELS];
        if total == 0 {
            return out;
        }
        for (o, &c) in out.iter_mut().zip(self.counts.iter()) {
            *o = c as f32 / total as f32;
        }
        out
    }
}

pub fn histogram(img: &Grayscale8) -> Histogram256 {
    let mut counts = [0u64; LEVELS];
    for &p in img.pixels() {
        counts[p as usize] += 1;
    }
    Histogram256 { counts }
}

pub fn load_pgm(path: &Path) -> Result<Grayscale8> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    decode_pgm(&bytes)
}

/// Decodes an in-memory binary (P5) PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Grayscale8> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::MalformedHeader("expected P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!("missing header field {}", i + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("header value {text} out of range")))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::MalformedHeader("no separator after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} unsupported, need 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(Error::TruncatedData {
            expected,
            found: raster.len(),
        });
    }
    Grayscale8::new(width, height, raster[..expected].to_vec())
}

pub fn encode_pgm(img: &Grayscale8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn save_pgm(img: &Grayscale8, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode_pgm(img))?;
    Ok(())
}

/// Cuts the `w`x`h` window centred in `img` (top-left rounded down).
pub fn central_crop(img: &Grayscale8, w: usize, h: usize) -> Result<Grayscale8> {
    if w == 0 || h == 0 || w > img.width || h > img.height {
        return Err(Error::CropTooLarge {
            crop_w: w,
            crop_h: h,
            width: img.width,
            height: img.height,
        });
    }
    crop_at(img, (img.width - w) / 2, (img.height - h) / 2, w, h)
}

fn crop_at(img: &Grayscale8, x0: usize, y0: usize, w: usize, h: usize) -> Result<Grayscale8> {
    let mut data = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        let row = y * img.width;
        data.extend_from_slice(&img.data[row + x0..row + x0 + w]);
    }
    Grayscale8::new(w, h, data)
}

/// Non-overlapping `w`x`h` tiles in raster order; partial tiles at the
/// right and bottom borders are dropped.
pub fn tile_crops(img: &Grayscale8, w: usize, h: usize) -> Result<Vec<Grayscale8>> {
    if w == 0 || h == 0 || w > img.width || h > img.height {
        return Err(Error::CropTooLarge {
            crop_w: w,
            crop_h: h,
            width: img.width,
            height: img.height,
        });
    }
    let mut tiles = Vec::new();
    for ty in 0..img.height / h {
        for tx in 0..img.width / w {
            tiles.push(crop_at(img, tx * w, ty * h, w, h)?);
        }
    }
    Ok(tiles)
}

/// Deterministic synthetic grayscale patch.
///
/// `smoothness == 0` yields i.i.d. uniform levels. Otherwise uniform noise is
/// blurred with a Gaussian of standard deviation `smoothness` (wrap-around
/// borders), standardized, clipped to two standard deviations and mapped
/// affinely onto a random sub-range biased toward darker tones, with a small
/// amount of sensor-like Gaussian noise added before quantization.
pub fn synth_patch(seed: u64, w: usize, h: usize, smoothness: f64) -> Result<Grayscale8> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!(
            "dimensions must be positive, got {w}x{h}"
        )));
    }
    if !(smoothness >= 0.0 && smoothness.is_finite()) {
        return Err(Error::InvalidImage(format!("smoothness must be >= 0, got {smoothness}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if smoothness == 0.0 {
        let data = (0..w * h).map(|_| rng.random::<u8>()).collect();
        return Grayscale8::new(w, h, data);
    }

    let noise: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
    let mut field = gaussian_blur_wrap(&noise, w, h, smoothness);
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);

    let center = rng.random_range(60.0..110.0);
    let span = rng.random_range(150.0..220.0);
    let sensor = Normal::new(0.0, 0.5).expect("valid std");
    for v in field.iter_mut() {
        let z = ((*v - mean) / std).clamp(-2.0, 2.0);
        *v = center + z * span / 4.0 + sensor.sample(&mut rng);
    }
    let data = field.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    Grayscale8::new(w, h, data)
}

fn gaussian_blur_wrap(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = wrap(x as isize + k as isize - radius, w);
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = wrap(y as isize + k as isize - radius, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_tiny_p5() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 7]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixels(), &[0, 255, 128, 7]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n1 # w\n 1\n255\n".to_vec();
        bytes.push(9);
        assert_eq!(decode_pgm(&bytes).unwrap().pixels(), &[9]);
    }

    #[test]
    fn rejects_wide_maxval_and_other_magics() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(decode_pgm(&bytes), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_pgm(b"P5\n1\n"), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn short_raster_is_truncated() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            decode_pgm(&bytes),
            Err(Error::TruncatedData { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn single_black_pixel_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pgm");
        save_pgm(&Grayscale8::filled(1, 1, 0).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, b"P5\n1 1\n255\n\x00");
    }

    #[test]
    fn missing_and_unwritable_paths() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_pgm(&dir.path().join("nope.pgm")),
            Err(Error::MissingFile(_))
        ));
        let img = Grayscale8::filled(2, 2, 3).unwrap();
        let bad = dir.path().join("no-such-dir").join("x.pgm");
        assert!(matches!(save_pgm(&img, &bad), Err(Error::IoFailure(_))));
    }

    #[test]
    fn crop_is_centred() {
        let img = Grayscale8::from_fn(4, 4, |x, y| (y * 4 + x) as u8).unwrap();
        let c = central_crop(&img, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[5, 6, 9, 10]);
        assert_eq!(central_crop(&img, 4, 4).unwrap(), img);
        assert!(matches!(central_crop(&img, 5, 2), Err(Error::CropTooLarge { .. })));
    }

    #[test]
    fn crop_offset_for_boss_sized_images() {
        let img = Grayscale8::from_fn(512, 512, |x, y| ((x + 3 * y) % 256) as u8).unwrap();
        let c = central_crop(&img, 128, 128).unwrap();
        assert_eq!(c.get(0, 0), img.get(192, 192));
        assert_eq!(c.get(127, 127), img.get(319, 319));
    }

    #[test]
    fn tiles_are_disjoint_raster_order() {
        let img = Grayscale8::from_fn(5, 4, |x, y| (y * 5 + x) as u8).unwrap();
        let tiles = tile_crops(&img, 2, 2).unwrap();
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[1].pixels(), &[2, 3, 7, 8]);
        assert_eq!(tiles[3].pixels(), &[12, 13, 17, 18]);
    }

    #[test]
    fn histogram_counts() {
        let img = Grayscale8::new(2, 2, vec![0, 0, 255, 128]).unwrap();
        let h = histogram(&img);
        assert_eq!(h.counts()[0], 2);
        assert_eq!(h.counts()[128], 1);
        assert_eq!(h.counts()[255], 1);
        assert_eq!(h.total(), 4);
        let c = histogram(&Grayscale8::filled(3, 3, 7).unwrap());
        assert_eq!(c.counts()[7], 9);
        assert_eq!(c.total(), 9);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_patch(11, 32, 24, 2.0).unwrap();
        let b = synth_patch(11, 32, 24, 2.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_patch(12, 32, 24, 2.0).unwrap());
    }

    proptest! {
        #[test]
        fn pgm_roundtrip(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
            let img = synth_patch(seed, w, h, 0.0).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        }

        #[test]
        fn histogram_conserves_mass(w in 1usize..40, h in 1usize..40, seed in any::<u64>(), s in 0.0f64..3.0) {
            let img = synth_patch(seed, w, h, s).unwrap();
            prop_assert_eq!(histogram(&img).total(), (w * h) as u64);
        }
    }
}
