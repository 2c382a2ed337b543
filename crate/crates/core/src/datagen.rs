//! Synthetic datasets with known generative labels.
//!
//! Circles follow a three-level probability tree: hue, then radius branch
//! given hue, then horizontal shift branch given radius. Curves are noisy
//! two-segment piecewise-linear profiles of two types, each paired with a
//! small striped texture image.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reference canvas width the radius and shift values are measured on.
pub const REFERENCE_CANVAS: f64 = 28.0;

/// Labels and draw parameters for one circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleLabels {
    /// 0 red, 1 blue.
    pub hue: usize,
    /// 0 small, 1 large.
    pub radius_branch: usize,
    /// 0 near (the likelier branch), 1 far.
    pub shift_branch: usize,
    /// Radius and shift in reference-canvas pixels.
    pub r: f64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircleSample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub labels: CircleLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircleConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub p_red: f64,
    /// `[hue][branch]` radius means.
    pub radius_means: [[f64; 2]; 2],
    /// Probability of the small-radius branch.
    pub p_small: f64,
    /// Variance of every radius branch.
    pub radius_var: f64,
    /// `[radius branch][shift branch]` shift means, for either hue.
    pub shift_means: [[f64; 2]; 2],
    /// Probability of the near-shift branch.
    pub p_near: f64,
    /// Variance of every shift branch.
    pub shift_var: f64,
}

impl Default for CircleConfig {
    fn default() -> Self {
        Self {
            n: 1024,
            height: 16,
            width: 16,
            p_red: 0.5,
            radius_means: [[4.0, 5.0], [6.0, 7.0]],
            p_small: 0.6,
            radius_var: 0.25,
            shift_means: [[-6.0, -3.0], [0.0, 3.0]],
            p_near: 0.7,
            shift_var: 0.5,
        }
    }
}

impl CircleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("circles: n must be at least 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("circles: images must be at least 8x8".into()));
        }
        let probs = [self.p_red, self.p_small, self.p_near];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("circles: branch probabilities must lie in [0, 1]".into()));
        }
        if !(self.radius_var >= 0.0 && self.shift_var >= 0.0) {
            return Err(Error::Config("circles: variances must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircleSet {
    pub samples: Vec<CircleSample>,
    /// Draws discarded because the circle left the canvas or had no radius.
    pub rejected: usize,
}

fn normal(mean: f64, var: f64) -> Normal<f64> {
    Normal::new(mean, var.sqrt()).expect("validated variance")
}

/// Anti-aliased disc with a one-pixel soft edge.
pub fn render_circle(height: usize, width: usize, hue: usize, r: f64, s: f64) -> Tensor<f64> {
    let scale = width as f64 / REFERENCE_CANVAS;
    let radius = r * scale;
    let cx = width as f64 / 2.0 + s * scale;
    let cy = height as f64 / 2.0;
    let channel = if hue == 0 { 0 } else { 2 };
    let mut data = vec![0.0; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            data[(y * width + x) * 3 + channel] = (radius - d + 0.5).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![height, width, 3], data).expect("sized buffer")
}

fn fits(cfg: &CircleConfig, r: f64, s: f64) -> bool {
    let scale = cfg.width as f64 / REFERENCE_CANVAS;
    let radius = r * scale;
    let cx = cfg.width as f64 / 2.0 + s * scale;
    let cy = cfg.height as f64 / 2.0;
    r > 0.0 && cx - radius >= 0.0 && cx + radius <= cfg.width as f64 && cy - radius >= 0.0 && cy + radius <= cfg.height as f64
}

pub fn generate_circles<R: Rng + ?Sized>(cfg: &CircleConfig, rng: &mut R) -> Result<CircleSet> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.n);
    let mut rejected = 0;
    while samples.len() < cfg.n {
        let hue = usize::from(!rng.random_bool(cfg.p_red));
        let radius_branch = usize::from(!rng.random_bool(cfg.p_small));
        let shift_branch = usize::from(!rng.random_bool(cfg.p_near));
        let r = normal(cfg.radius_means[hue][radius_branch], cfg.radius_var).sample(rng);
        let s = normal(cfg.shift_means[radius_branch][shift_branch], cfg.shift_var).sample(rng);
        if !fits(cfg, r, s) {
            rejected += 1;
            if rejected > 1000 * cfg.n {
                return Err(Error::Config("circles: almost every draw leaves the canvas".into()));
            }
            continue;
        }
        samples.push(CircleSample {
            image: render_circle(cfg.height, cfg.width, hue, r, s),
            labels: CircleLabels {
                hue,
                radius_branch,
                shift_branch,
                r,
                s,
            },
        });
    }
    Ok(CircleSet { samples, rejected })
}

/// Labels and draw parameters for one curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveLabels {
    /// 0 for type A, 1 for type B.
    pub kind: usize,
    pub breakpoint: f64,
    pub slope1: f64,
    pub slope2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSample {
    pub curve: Vec<f64>,
    /// `[S, S]` texture, horizontal stripes for type A and vertical for B.
    pub image: Tensor<f64>,
    pub labels: CurveLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub n: usize,
    pub grid_len: usize,
    pub noise_std: f64,
    pub intercept: f64,
    pub p_a: f64,
    pub breakpoint_a: [f64; 2],
    pub slopes_a: [f64; 2],
    pub breakpoint_b: [f64; 2],
    pub slopes_b: [f64; 2],
    pub image_size: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            n: 256,
            grid_len: 100,
            noise_std: 0.02,
            intercept: 0.02,
            p_a: 0.5,
            breakpoint_a: [0.2, 0.3],
            slopes_a: [2.0, 0.4],
            breakpoint_b: [0.5, 0.6],
            slopes_b: [0.4, 1.4],
            image_size: 8,
        }
    }
}

impl CurveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.grid_len < 2 || self.image_size < 2 {
            return Err(Error::Config("curves: n >= 1, grid_len >= 2 and image_size >= 2 required".into()));
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.p_a) {
            return Err(Error::Config("curves: noise_std >= 0 and p_a in [0, 1] required".into()));
        }
        for b in [self.breakpoint_a, self.breakpoint_b] {
            if !(0.0 < b[0] && b[0] <= b[1] && b[1] < 1.0) {
                return Err(Error::Config(format!("curves: breakpoint range {b:?} must be inside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Evenly spaced sample positions on `[0, 1]`.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.grid_len).map(|i| i as f64 / (self.grid_len - 1) as f64).collect()
    }
}

/// `intercept + slope1 * min(s, b) + slope2 * max(s - b, 0)`.
pub fn piecewise_linear(grid: &[f64], intercept: f64, breakpoint: f64, slope1: f64, slope2: f64) -> Vec<f64> {
    grid.iter()
        .map(|&s| intercept + slope1 * s.min(breakpoint) + slope2 * (s - breakpoint).max(0.0))
        .collect()
}

pub fn stripe_texture(size: usize, kind: usize) -> Tensor<f64> {
    Tensor::from_fn(&[size, size], |flat| {
        let (y, x) = (flat / size, flat % size);
        let line = if kind == 0 { y } else { x };
        if line % 2 == 0 {
            1.0
        } else {
            0.0
        }
    })
}

pub fn generate_curves<R: Rng + ?Sized>(cfg: &CurveConfig, rng: &mut R) -> Result<Vec<CurveSample>> {
    cfg.validate()?;
    let grid = cfg.grid();
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let mut out = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let kind = usize::from(!rng.random_bool(cfg.p_a));
        let (range, slopes) = if kind == 0 {
            (cfg.breakpoint_a, cfg.slopes_a)
        } else {
            (cfg.breakpoint_b, cfg.slopes_b)
        };
        let breakpoint = if range[0] < range[1] {
            rng.random_range(range[0]..range[1])
        } else {
            range[0]
        };
        let mut curve = piecewise_linear(&grid, cfg.intercept, breakpoint, slopes[0], slopes[1]);
        for c in &mut curve {
            *c = (*c + noise.sample(rng)).clamp(0.0, 1.0);
        }
        let mut image = stripe_texture(cfg.image_size, kind);
        for p in image.data_mut() {
            *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
        }
        out.push(CurveSample {
            curve,
            image,
            labels: CurveLabels {
                kind,
                breakpoint,
                slope1: slopes[0],
                slope2: slopes[1],
            },
        });
    }
    Ok(out)
}

fn stack(rows: Vec<Vec<f64>>) -> Result<Tensor<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect())
}

/// Flattened images as a single-modality dataset named `image`.
pub fn circles_dataset(samples: &[CircleSample]) -> Result<Dataset> {
    let x = stack(samples.iter().map(|s| s.image.data().to_vec()).collect())?;
    Dataset::new(vec![Modality::new("image", x, None)?])
}

/// Curves as modality `curve`, plus the textures as `image` when `with_image`.
pub fn curves_dataset(samples: &[CurveSample], with_image: bool) -> Result<Dataset> {
    let mut mods = vec![Modality::new("curve", stack(samples.iter().map(|s| s.curve.clone()).collect())?, None)?];
    if with_image {
        let x = stack(samples.iter().map(|s| s.image.data().to_vec()).collect())?;
        mods.push(Modality::new("image", x, None)?);
    }
    Dataset::new(mods)
}
