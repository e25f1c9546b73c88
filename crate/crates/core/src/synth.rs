//! Procedural camouflage scenes: value-noise textures, a radial-noise blob
//! whose texture statistics approach the background's as the camouflage
//! strength grows, and boundary labels derived from the mask.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Real, Tensor};
use crate::error::{MglError, Result};
use crate::train::Sample;

/// Blob area bounds as fractions of the image.
pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.60;
const SHAPE_RETRIES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub octaves: usize,
    /// Lattice spacing of the coarsest background octave, in pixels.
    pub cell: f64,
    /// Camouflage strength in `[0, 1]`; 1 makes foreground and background
    /// statistics coincide.
    pub kappa: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            octaves: 3,
            cell: 12.0,
            kappa: 0.8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(MglError::Config(format!(
                "scene size {}×{} is below the 16×16 minimum",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(MglError::Config(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if self.octaves == 0 || self.cell < 1.0 {
            return Err(MglError::Config("texture needs at least one octave and a cell of ≥ 1 px".into()));
        }
        Ok(())
    }
}

/// Image `3×H×W` with values on the 8-bit grid `k/255`, binary mask and
/// edge maps in row-major `H×W` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
    pub edge: Vec<u8>,
    pub seed: u64,
}

impl SceneSample {
    pub fn image_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            // stored interleaved RGB, returned planar
            let (c, p) = (i / hw, i % hw);
            T::of(self.image[p * 3 + c] as f64 / 255.0)
        })
    }

    pub fn to_sample<T: Real>(&self) -> Sample<T> {
        let plane = |m: &[u8]| Tensor::from_fn(&[1, self.height, self.width], |i| T::of(m[i] as f64));
        Sample {
            image: self.image_tensor(),
            mask: plane(&self.mask),
            edge: plane(&self.edge),
        }
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.mask.len() as f64
    }
}

/// Multi-octave value noise in `[0, 1]`: random lattice values, bilinear
/// interpolation, amplitude halved per octave.
pub fn value_noise<R: Rng>(rng: &mut R, h: usize, w: usize, cell: f64, octaves: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut norm = 0.0;
    let mut step = cell;
    for _ in 0..octaves {
        let gh = (h as f64 / step).ceil() as usize + 2;
        let gw = (w as f64 / step).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let fy = y as f64 / step;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 / step;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let at = |r: usize, c: usize| lattice[r * gw + c];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        norm += amp;
        amp *= 0.5;
        step = (step / 2.0).max(1.0);
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Blob whose boundary radius is a smooth random function of angle.
fn radial_blob<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<u8> {
    let area = rng.random_range(0.06..0.35) * (h * w) as f64;
    let r0 = (area / std::f64::consts::PI).sqrt();
    let cy = rng.random_range(0.3..0.7) * h as f64;
    let cx = rng.random_range(0.3..0.7) * w as f64;
    let harmonics: Vec<(f64, f64)> = (1..=4)
        .map(|k| (rng.random_range(0.0..0.25) / k as f64, rng.random_range(0.0..TAU)))
        .collect();
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let theta = dy.atan2(dx);
            let wobble: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(k, (a, ph))| a * ((k + 1) as f64 * theta + ph).sin())
                .sum();
            if (dy * dy + dx * dx).sqrt() < r0 * (1.0 + wobble) {
                mask[y * w + x] = 1;
            }
        }
    }
    mask
}

/// `mask AND NOT erode(mask)` with a full 3×3 element; pixels outside the
/// image count as background.
pub fn edge_from_mask(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] != 0
    };
    let mut edge = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !inside(y, x) {
                continue;
            }
            let eroded = (-1..=1).all(|dy| (-1..=1).all(|dx| inside(y + dy, x + dx)));
            if !eroded {
                edge[y as usize * w + x as usize] = 1;
            }
        }
    }
    edge
}

fn masked_stats(v: &[f64], mask: &[u8], want: u8) -> (f64, f64) {
    let sel: Vec<f64> = v.iter().zip(mask).filter(|(_, &m)| m == want).map(|(x, _)| *x).collect();
    let n = sel.len().max(1) as f64;
    let mean = sel.iter().sum::<f64>() / n;
    let var = sel.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Deterministic scene for `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = None;
    for _ in 0..SHAPE_RETRIES {
        let m = radial_blob(&mut rng, h, w);
        let frac = m.iter().map(|&v| v as usize).sum::<usize>() as f64 / (h * w) as f64;
        if (MIN_AREA..=MAX_AREA).contains(&frac) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        MglError::Data(format!("seed {seed}: no blob within area bounds after {SHAPE_RETRIES} tries"))
    })?;
    let gap = (1.0 - cfg.kappa) * 0.5;
    let mut image = vec![0u8; h * w * 3];
    for c in 0..3 {
        let bg = value_noise(&mut rng, h, w, cfg.cell, cfg.octaves);
        let fg = value_noise(&mut rng, h, w, cfg.cell * 0.5, cfg.octaves);
        let (mb, sb) = masked_stats(&bg, &mask, 0);
        let (mf, sf) = masked_stats(&fg, &mask, 1);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mean = mb + sign * gap;
        let std = sb * (1.0 + (if rng.random::<bool>() { 1.0 } else { -1.0 }) * gap);
        for p in 0..h * w {
            let v = if mask[p] == 1 {
                mean + std * (fg[p] - mf) / sf.max(1e-12)
            } else {
                bg[p]
            };
            image[p * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let edge = edge_from_mask(&mask, h, w);
    Ok(SceneSample {
        height: h,
        width: w,
        image,
        mask,
        edge,
        seed,
    })
}

/// Per-channel `|mean_fg − mean_bg|` of a sample's image, averaged.
pub fn mean_gap(s: &SceneSample) -> f64 {
    let hw = s.height * s.width;
    (0..3)
        .map(|c| {
            let v: Vec<f64> = (0..hw).map(|p| s.image[p * 3 + c] as f64 / 255.0).collect();
            let (mf, _) = masked_stats(&v, &s.mask, 1);
            let (mb, _) = masked_stats(&v, &s.mask, 0);
            (mf - mb).abs()
        })
        .sum::<f64>()
        / 3.0
}

/// Largest per-channel `|mean_fg − mean_bg|`.
pub fn max_channel_gap(s: &SceneSample) -> f64 {
    let hw = s.height * s.width;
    (0..3)
        .map(|c| {
            let v: Vec<f64> = (0..hw).map(|p| s.image[p * 3 + c] as f64 / 255.0).collect();
            (masked_stats(&v, &s.mask, 1).0 - masked_stats(&v, &s.mask, 0).0).abs()
        })
        .fold(0.0, f64::max)
}
