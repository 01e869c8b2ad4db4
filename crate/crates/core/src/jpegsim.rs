//! Baseline-JPEG quantization loss for grayscale patches. Each 8x8 block is
//! level shifted, transformed with an orthonormal DCT-II, quantized with the
//! IJG-scaled luminance table and reconstructed. Entropy coding is lossless
//! and therefore skipped.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::imagecore::Grayscale8;

/// Luminance quantization table from ITU-T T.81 Annex K, row-major.
pub const BASE_LUMINANCE: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTable {
    pub q: [[u16; 8]; 8],
    pub quality: u8,
}

pub fn quant_table(quality: i64) -> Result<QuantTable> {
    if !(1..=100).contains(&quality) {
        return Err(Error::QualityOutOfRange(quality));
    }
    let scale = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    let mut q = [[0u16; 8]; 8];
    for (row, base_row) in q.iter_mut().zip(BASE_LUMINANCE.iter()) {
        for (v, &b) in row.iter_mut().zip(base_row.iter()) {
            *v = ((b as i64 * scale + 50) / 100).clamp(1, 255) as u16;
        }
    }
    Ok(QuantTable {
        q,
        quality: quality as u8,
    })
}

type Block = [[f64; 8]; 8];

fn dct_basis() -> &'static Block {
    static BASIS: OnceLock<Block> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (u, row) in c.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
            }
        }
        c
    })
}

/// Orthonormal 2-D DCT-II of one block: `C B C^T`.
pub fn forward_dct(block: &Block) -> Block {
    let c = dct_basis();
    let mut tmp = [[0.0; 8]; 8];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u][y] = (0..8).map(|x| c[u][x] * block[x][y]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            out[u][v] = (0..8).map(|y| tmp[u][y] * c[v][y]).sum();
        }
    }
    out
}

/// Inverse of [`forward_dct`]: `C^T F C`.
pub fn inverse_dct(coef: &Block) -> Block {
    let c = dct_basis();
    let mut tmp = [[0.0; 8]; 8];
    for x in 0..8 {
        for v in 0..8 {
            tmp[x][v] = (0..8).map(|u| c[u][x] * coef[u][v]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for x in 0..8 {
        for y in 0..8 {
            out[x][y] = (0..8).map(|v| tmp[x][v] * c[v][y]).sum();
        }
    }
    out
}

pub fn jpeg_roundtrip(img: &Grayscale8, quality: i64) -> Result<Grayscale8> {
    let table = quant_table(quality)?;
    let (w, h) = (img.width(), img.height());
    if w % 8 != 0 || h % 8 != 0 {
        return Err(Error::DimensionNotMultipleOf8 {
            width: w,
            height: h,
        });
    }
    let src = img.pixels();
    let mut out = vec![0u8; w * h];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (r, row) in block.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = src[(by + r) * w + bx + c] as f64 - 128.0;
                }
            }
            let mut coef = forward_dct(&block);
            for (crow, qrow) in coef.iter_mut().zip(table.q.iter()) {
                for (v, &q) in crow.iter_mut().zip(qrow.iter()) {
                    let q = q as f64;
                    *v = (*v / q).round() * q;
                }
            }
            let rec = inverse_dct(&coef);
            for (r, row) in rec.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    out[(by + r) * w + bx + c] = (v + 128.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Grayscale8::new(w, h, out)
}

/// Peak signal-to-noise ratio in dB (infinite for identical images).
pub fn psnr(a: &Grayscale8, b: &Grayscale8) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("PSNR needs equal shapes".into()));
    }
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    })
}
