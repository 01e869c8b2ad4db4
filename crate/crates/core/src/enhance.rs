//! Gamma correction and the closed-form analytics of its forensic footprint:
//! the largest pixel-domain displacement it causes, where that displacement
//! occurs, and how strongly it thins out the gray-level histogram.

use std::fmt;
use std::path::Path;

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::imagecore::{histogram, load_pgm, Grayscale8, Histogram256, LEVELS};
use crate::Label;

/// Closeness to 1 below which a gamma is treated as the identity.
const IDENTITY_EPS: f64 = 1e-12;

/// Exponent of the power-law mapping `Y = round(255 (X/255)^gamma)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct GammaParam(f64);

impl GammaParam {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Self(gamma))
        } else {
            Err(Error::NonPositiveGamma(gamma))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_identity(self) -> bool {
        (self.0 - 1.0).abs() < IDENTITY_EPS
    }

    fn non_identity(self) -> Result<f64> {
        if self.is_identity() {
            Err(Error::GammaIsOne)
        } else {
            Ok(self.0)
        }
    }
}

impl fmt::Display for GammaParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Lookup table of the quantized gamma mapping for every input level.
pub fn gamma_lut(g: GammaParam) -> [u8; LEVELS] {
    let mut lut = [0u8; LEVELS];
    for (x, out) in lut.iter_mut().enumerate() {
        let y = 255.0 * (x as f64 / 255.0).powf(g.value());
        // f64::round rounds half away from zero
        *out = y.round().clamp(0.0, 255.0) as u8;
    }
    lut
}

pub fn gamma_correct(img: &Grayscale8, g: GammaParam) -> Grayscale8 {
    let lut = gamma_lut(g);
    img.map_pixels(|p| lut[p as usize])
}

/// Maximum and mean of `|enh - orig|` over all pixels.
pub fn abs_diff_stats(orig: &Grayscale8, enh: &Grayscale8) -> Result<(u8, f64)> {
    if !orig.same_shape(enh) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            orig.width(),
            orig.height(),
            enh.width(),
            enh.height()
        )));
    }
    let mut max = 0u8;
    let mut sum = 0u64;
    for (&a, &b) in orig.pixels().iter().zip(enh.pixels()) {
        let d = a.abs_diff(b);
        max = max.max(d);
        sum += d as u64;
    }
    Ok((max, sum as f64 / orig.pixels().len() as f64))
}

/// Normalized intensity at which `|T^gamma - T|` peaks, i.e. where the
/// slope of the mapping equals one: `(1/gamma)^(1/(gamma-1))`.
pub fn t_dmax(g: GammaParam) -> Result<f64> {
    let gamma = g.non_identity()?;
    Ok((1.0 / gamma).powf(1.0 / (gamma - 1.0)))
}

/// Largest pixel displacement, in intensity levels, caused by the
/// (unquantized) gamma mapping.
pub fn d_max(g: GammaParam) -> Result<f64> {
    let gamma = g.non_identity()?;
    let inv = 1.0 / gamma;
    let at_peak = inv.powf(1.0 / (gamma - 1.0));
    let mapped = inv.powf(gamma / (gamma - 1.0));
    Ok(if gamma < 1.0 {
        255.0 * (mapped - at_peak)
    } else {
        255.0 * (at_peak - mapped)
    })
}

/// Samples `d_max / 255` on an evenly spaced gamma grid. A grid point at
/// the identity is emitted as 0.
pub fn dmax_curve(gamma_lo: f64, gamma_hi: f64, steps: usize) -> Result<Vec<(f64, f64)>> {
    if !(gamma_lo > 0.0 && gamma_lo.is_finite() && gamma_hi.is_finite()) {
        return Err(Error::BadRange(format!("need 0 < lo, got lo = {gamma_lo}")));
    }
    if steps == 0 {
        return Err(Error::BadRange("steps must be at least 1".into()));
    }
    if steps > 1 && gamma_lo >= gamma_hi {
        return Err(Error::BadRange(format!(
            "need lo < hi, got [{gamma_lo}, {gamma_hi}]"
        )));
    }
    let stride = if steps > 1 {
        (gamma_hi - gamma_lo) / (steps - 1) as f64
    } else {
        0.0
    };
    (0..steps)
        .map(|i| {
            let gamma = if i + 1 == steps && steps > 1 {
                gamma_hi
            } else {
                gamma_lo + stride * i as f64
            };
            let g = GammaParam::new(gamma)?;
            let value = if g.is_identity() { 0.0 } else { d_max(g)? / 255.0 };
            Ok((gamma, value))
        })
        .collect()
}

/// Relative stretch of the expanded intensity range, a proxy for how
/// likely gap bins are.
pub fn gap_ratio(g: GammaParam) -> Result<f64> {
    let gamma = g.non_identity()?;
    if gamma < 1.0 {
        return Ok(1.0 / gamma - 1.0);
    }
    let t = t_dmax(g)?;
    Ok((t - t.powf(gamma)) / (1.0 - t))
}

/// Gap bins found in one histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct GapStats {
    pub gap_positions: Vec<u8>,
    pub class_label: Option<GapClass>,
}

impl GapStats {
    pub fn gap_count(&self) -> usize {
        self.gap_positions.len()
    }

    pub fn with_class(mut self, class: GapClass) -> Self {
        self.class_label = Some(class);
        self
    }
}

/// Class key for gap statistics: untouched, or enhanced with a given gamma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GapClass {
    Original,
    Enhanced(f64),
}

impl GapClass {
    fn matches(self, label: Label, gamma: Option<f64>) -> bool {
        match (self, label, gamma) {
            (GapClass::Original, Label::Original, _) => true,
            (GapClass::Enhanced(a), Label::Enhanced, Some(b)) => (a - b).abs() < 1e-9,
            _ => false,
        }
    }
}

impl fmt::Display for GapClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GapClass::Original => write!(f, "original"),
            GapClass::Enhanced(g) => write!(f, "gamma_{g}"),
        }
    }
}

/// Interior levels `k` in `[1, 254]` with an empty bin between two
/// occupied neighbours.
pub fn count_gap_bins(h: &Histogram256) -> GapStats {
    let c = h.counts();
    let gap_positions = (1..LEVELS - 1)
        .filter(|&k| c[k] == 0 && c[k - 1] > 0 && c[k + 1] > 0)
        .map(|k| k as u8)
        .collect();
    GapStats {
        gap_positions,
        class_label: None,
    }
}

/// Per-class samples of gap counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GapDistribution {
    pub classes: Vec<(GapClass, Vec<usize>)>,
}

impl GapDistribution {
    /// Groups `(class, histogram)` samples by the requested classes, in the
    /// order given. Samples of other classes are ignored.
    pub fn from_samples<'a>(
        classes: &[GapClass],
        samples: impl IntoIterator<Item = (GapClass, &'a Histogram256)>,
    ) -> Self {
        let mut out: Vec<(GapClass, Vec<usize>)> =
            classes.iter().map(|&c| (c, Vec::new())).collect();
        for (class, h) in samples {
            if let Some((_, counts)) = out.iter_mut().find(|(c, _)| *c == class) {
                counts.push(count_gap_bins(h).gap_count());
            }
        }
        Self { classes: out }
    }

    pub fn counts(&self, class: GapClass) -> Option<&[usize]> {
        self.classes
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, v)| v.as_slice())
    }

    /// Lower median of the gap counts of `class`.
    pub fn median(&self, class: GapClass) -> Option<usize> {
        let mut v = self.counts(class)?.to_vec();
        if v.is_empty() {
            return None;
        }
        v.sort_unstable();
        Some(v[(v.len() - 1) / 2])
    }

    /// Most frequent gap count of `class` (smallest on ties).
    pub fn mode(&self, class: GapClass) -> Option<usize> {
        let v = self.counts(class)?;
        let max = *v.iter().max()?;
        let mut freq = vec![0usize; max + 1];
        v.iter().for_each(|&c| freq[c] += 1);
        let best = *freq.iter().max()?;
        freq.iter().position(|&f| f == best)
    }

    /// Comma-separated relative-frequency table: one row per gap count from
    /// 0 to the largest observed, one column per class.
    pub fn to_csv(&self) -> String {
        if self.classes.is_empty() {
            return String::new();
        }
        let mut out = String::from("gap_count");
        for (c, _) in &self.classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        let max = self
            .classes
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .max()
            .unwrap_or(0);
        for k in 0..=max {
            out.push_str(&k.to_string());
            for (_, v) in &self.classes {
                let n = v.iter().filter(|&&c| c == k).count();
                let f = if v.is_empty() { 0.0 } else { n as f64 / v.len() as f64 };
                out.push_str(&format!(",{f:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Gap-count distribution of every manifest entry belonging to `classes`.
/// Relative paths resolve against `root`.
pub fn gap_distribution(
    manifest: &DatasetManifest,
    root: &Path,
    classes: &[GapClass],
) -> Result<GapDistribution> {
    let mut samples = Vec::new();
    for entry in &manifest.entries {
        let Some(&class) = classes
            .iter()
            .find(|c| c.matches(entry.label, entry.gamma))
        else {
            continue;
        };
        let path = root.join(&entry.path);
        let img = load_pgm(&path).map_err(|e| match e {
            Error::MissingFile(p) => Error::MissingImage(p),
            other => other,
        })?;
        samples.push((class, histogram(&img)));
    }
    Ok(GapDistribution::from_samples(
        classes,
        samples.iter().map(|(c, h)| (*c, h)),
    ))
}

/// Fits the gap-count threshold `t` of the rule "enhanced iff
/// gap_count >= t" by exhaustive sweep over `[0, 255]`, keeping the smallest
/// maximizer of training accuracy.
pub fn cao_fit_threshold(train: &[(GapStats, Label)]) -> Result<u32> {
    let has = |l| train.iter().any(|(_, x)| *x == l);
    if !has(Label::Original) || !has(Label::Enhanced) {
        return Err(Error::DegenerateLabels);
    }
    let mut best = (0usize, 0u32);
    for t in 0..=255u32 {
        let correct = train
            .iter()
            .filter(|(s, l)| threshold_rule(s.gap_count(), t) == *l)
            .count();
        if correct > best.0 {
            best = (correct, t);
        }
    }
    Ok(best.1)
}

fn threshold_rule(gap_count: usize, threshold: u32) -> Label {
    if gap_count >= threshold as usize {
        Label::Enhanced
    } else {
        Label::Original
    }
}

pub fn cao_classify(h: &Histogram256, threshold: u32) -> Label {
    threshold_rule(count_gap_bins(h).gap_count(), threshold)
}

/// Two-column comma-separated table with a header row.
pub fn format_curve(header: (&str, &str), rows: &[(f64, f64)]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (a, b) in rows {
        out.push_str(&format!("{a:.6},{b:.6}\n"));
    }
    out
}
