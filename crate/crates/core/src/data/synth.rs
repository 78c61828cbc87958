//! Synthetic infrared scenes: smooth backgrounds with a few small, bright Gaussian targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::Sample;
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

/// Largest number of pixels one target may cover.
pub const MAX_TARGET_PIXELS: usize = 81;
const MAX_RADIUS: f64 = 4.5;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Flat,
    Gradient,
    CloudNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of targets per image.
    pub target_count: (usize, usize),
    /// Radius, in pixels, at which a target falls to half its peak.
    pub radius: (f64, f64),
    /// Peak amplitude of a target above the local background.
    pub intensity: (f64, f64),
    pub background: Background,
    /// Mean background level.
    pub background_level: f64,
    /// Peak-to-mean amplitude of gradient and cloud backgrounds.
    pub background_variation: f64,
    pub noise_sigma: f64,
    /// Minimum target amplitude above the background mean.
    pub contrast_margin: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            target_count: (1, 3),
            radius: (1.0, 4.0),
            intensity: (0.35, 0.6),
            background: Background::CloudNoise,
            background_level: 0.3,
            background_variation: 0.1,
            noise_sigma: 0.02,
            contrast_margin: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn sized(height: usize, width: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius;
        if !(1.0..=MAX_RADIUS).contains(&lo) || hi < lo || hi > MAX_RADIUS {
            return Err(Error::Config(format!(
                "radius range {:?} must lie within [1, {MAX_RADIUS}]",
                self.radius
            )));
        }
        let (c_lo, c_hi) = self.target_count;
        if c_lo == 0 || c_hi < c_lo {
            return Err(Error::Config(format!(
                "target count range {:?} is empty or zero",
                self.target_count
            )));
        }
        let margin = 2 * (hi.ceil() as usize + 1);
        if self.height <= margin || self.width <= margin {
            return Err(Error::Config(format!(
                "{}×{} scene is too small for radius {hi}",
                self.height, self.width
            )));
        }
        if !(self.intensity.0 > 0.0 && self.intensity.0 <= self.intensity.1) {
            return Err(Error::Config(format!(
                "intensity range {:?} is invalid",
                self.intensity
            )));
        }
        if self.intensity.0 < self.contrast_margin {
            return Err(Error::Config(format!(
                "intensity {:?} cannot guarantee contrast margin {}",
                self.intensity, self.contrast_margin
            )));
        }
        if self.background_level + self.contrast_margin > 1.0 {
            return Err(Error::Config(format!(
                "contrast margin {} is infeasible above background level {} within [0, 1]",
                self.contrast_margin, self.background_level
            )));
        }
        if self.noise_sigma < 0.0
            || self.background_variation < 0.0
            || !(0.0..=1.0).contains(&self.background_level)
        {
            return Err(Error::Config(
                "noise, variation and background level must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Bilinearly interpolated random lattice noise, summed over octaves, normalized to `[-1, 1]`.
fn cloud_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    let mut amplitude = 1.0;
    let mut cells = 3usize;
    for _ in 0..3 {
        let (gh, gw) = (cells + 1, cells + 1);
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in 0..h {
            let fy = r as f64 / h as f64 * cells as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for c in 0..w {
                let fx = c as f64 / w as f64 * cells as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let at = |y: usize, x: usize| lattice[y * gw + x];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                field[r * w + c] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        amplitude *= 0.5;
        cells *= 2;
    }
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    field.iter_mut().for_each(|v| *v /= peak);
    field
}

fn background(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let base = cfg.background_level;
    let amp = cfg.background_variation;
    match cfg.background {
        Background::Flat => vec![base; h * w],
        Background::Gradient => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (theta.sin(), theta.cos());
            let norm = (h as f64 / 2.0).hypot(w as f64 / 2.0);
            (0..h * w)
                .map(|i| {
                    let (r, c) = (
                        (i / w) as f64 - h as f64 / 2.0,
                        (i % w) as f64 - w as f64 / 2.0,
                    );
                    base + amp * (r * dy + c * dx) / norm
                })
                .collect()
        }
        Background::CloudNoise => cloud_noise(rng, h, w)
            .into_iter()
            .map(|v| base + amp * v)
            .collect(),
    }
}

struct Target {
    cy: f64,
    cx: f64,
    radius: f64,
    amplitude: f64,
}

/// Pixel-area average of a unit-peak Gaussian that falls to 1/2 at `radius`.
fn blob(t: &Target, r: usize, c: usize) -> f64 {
    let two_sigma_sq = t.radius * t.radius / std::f64::consts::LN_2;
    let mut acc = 0.0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let y = r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            let x = c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let d2 = (y - t.cy).powi(2) + (x - t.cx).powi(2);
            acc += (-d2 / two_sigma_sq).exp();
        }
    }
    acc / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn place_targets(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Vec<Target> {
    let count = rng.random_range(cfg.target_count.0..=cfg.target_count.1);
    let mut targets: Vec<Target> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..100 {
            let radius = rng.random_range(cfg.radius.0..=cfg.radius.1);
            let margin = radius.ceil() + 1.0;
            let cy = rng.random_range(margin..cfg.height as f64 - margin);
            let cx = rng.random_range(margin..cfg.width as f64 - margin);
            // keep components at least three pixels apart so they never touch
            let clear = targets
                .iter()
                .all(|t| (t.cy - cy).hypot(t.cx - cx) >= t.radius + radius + 3.0);
            let amplitude = rng.random_range(cfg.intensity.0..=cfg.intensity.1);
            if clear {
                targets.push(Target {
                    cy,
                    cx,
                    radius,
                    amplitude,
                });
                break;
            }
        }
    }
    targets
}

fn generate_one(cfg: &SyntheticSceneConfig, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (h, w) = (cfg.height, cfg.width);
    let mut values = background(cfg, &mut rng);
    let targets = place_targets(cfg, &mut rng);
    let mut mask = Mask::filled(h, w, false);
    for t in &targets {
        let reach = (t.radius * 2.0).ceil() as isize + 1;
        let (r0, c0) = (t.cy.floor() as isize, t.cx.floor() as isize);
        let mut best: Option<(f64, usize, usize)> = None;
        let mut marked = 0;
        for r in (r0 - reach).max(0)..(r0 + reach + 1).min(h as isize) {
            for c in (c0 - reach).max(0)..(c0 + reach + 1).min(w as isize) {
                let (r, c) = (r as usize, c as usize);
                let g = blob(t, r, c);
                values[r * w + c] += t.amplitude * g;
                if g >= 0.5 {
                    mask.set(r, c, true);
                    marked += 1;
                }
                if best.is_none_or(|(b, _, _)| g > b) {
                    best = Some((g, r, c));
                }
            }
        }
        if marked == 0 {
            let (_, r, c) = best.expect("target window is non-empty");
            mask.set(r, c, true);
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        values
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    }
    let image = Image::new(
        h,
        w,
        values
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect(),
    )
    .expect("extents");
    Sample {
        id: format!("s{}_{index:05}", cfg.seed),
        image,
        mask,
    }
}

/// Generates `n` scenes; identical `(cfg, n)` always yields identical samples.
pub fn generate_synthetic(cfg: &SyntheticSceneConfig, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect())
}
