//! Per-client covariate shift: gamma correction, hue rotation and saturation
//! scaling, applied in that order to byte images.
//!
//! HSV uses the max/min formulas with every channel in `[0, 1]`:
//! `v = max`, `s = (max - min) / max` (0 when `max = 0`), and the hue is the
//! usual sextant formula divided by 6 so that it lives in `[0, 1)`.

use serde::{Deserialize, Serialize};

use super::io::ImageSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Exponent applied to every channel value.
    pub gamma: f64,
    /// Hue offset in turns, in `[-0.5, 0.5]`.
    pub hue: f64,
    /// Saturation multiplier.
    pub saturation: f64,
}

impl ShiftSpec {
    pub const IDENTITY: ShiftSpec = ShiftSpec {
        gamma: 1.0,
        hue: 0.0,
        saturation: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma factor must be positive, got {}",
                self.gamma
            )));
        }
        if !(-0.5..=0.5).contains(&self.hue) {
            return Err(Error::config(format!(
                "hue delta must lie in [-0.5, 0.5], got {}",
                self.hue
            )));
        }
        if !(self.saturation >= 0.0 && self.saturation.is_finite()) {
            return Err(Error::config(format!(
                "saturation factor must be >= 0, got {}",
                self.saturation
            )));
        }
        Ok(())
    }

    fn touches_color(&self) -> bool {
        self.hue != 0.0 || self.saturation != 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftPreset {
    Low,
    Mid,
    High,
}

impl ShiftPreset {
    /// `(gamma, hue, saturation)` value pairs.
    fn levels(self) -> ([f64; 2], [f64; 2], [f64; 2]) {
        match self {
            ShiftPreset::Low => ([0.9, 1.1], [-0.01, 0.01], [0.9, 1.1]),
            ShiftPreset::Mid => ([0.75, 1.25], [-0.05, 0.05], [0.7, 1.3]),
            ShiftPreset::High => ([0.6, 1.4], [-0.1, 0.1], [0.5, 1.5]),
        }
    }
}

/// The eight combinations of a preset, gamma varying slowest.
pub fn preset_specs(preset: ShiftPreset) -> Vec<ShiftSpec> {
    let (g, h, s) = preset.levels();
    let mut out = Vec::with_capacity(8);
    for gamma in g {
        for hue in h {
            for saturation in s {
                out.push(ShiftSpec { gamma, hue, saturation });
            }
        }
    }
    out
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Applies `spec` to every image. Hue and saturation need three channels.
pub fn apply_covariate_shift(images: &ImageSet, spec: &ShiftSpec) -> Result<ImageSet> {
    spec.validate()?;
    if spec.touches_color() && images.channels != 3 {
        return Err(Error::data(format!(
            "hue and saturation shifts need 3 channels, found {}",
            images.channels
        )));
    }
    let plane = images.height * images.width;
    let mut out = images.clone();
    let stride = images.channels * plane;
    for img in out.data.chunks_exact_mut(stride) {
        let mut vals: Vec<f64> = img.iter().map(|&b| (b as f64 / 255.0).powf(spec.gamma)).collect();
        if images.channels == 3 {
            for px in 0..plane {
                let (h, s, v) = rgb_to_hsv(vals[px], vals[plane + px], vals[2 * plane + px]);
                let h = (h + spec.hue).rem_euclid(1.0);
                let s = (s * spec.saturation).clamp(0.0, 1.0);
                let (r, g, b) = hsv_to_rgb(h, s, v);
                vals[px] = r;
                vals[plane + px] = g;
                vals[2 * plane + px] = b;
            }
        }
        for (dst, v) in img.iter_mut().zip(vals) {
            *dst = quantize(v);
        }
    }
    Ok(out)
}
