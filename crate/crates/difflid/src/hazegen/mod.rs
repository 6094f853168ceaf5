//! Procedural scene synthesis and the atmospheric scattering model that
//! turns clean scenes into hazy ones.

pub mod dataset;

pub use dataset::{build_dataset, load_dataset, Dataset, DatasetConfig, DatasetManifest};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Rng, Tensor};
use crate::Real;

pub const DEPTH_MIN: Real = 0.5;
pub const DEPTH_MAX: Real = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    /// Per-channel airlight color, each in [0, 1].
    pub airlight: [Real; 3],
    /// Scattering coefficient, >= 0.
    pub beta: Real,
}

/// One synthetic scene: clean image, its hazy rendering, and the depth map
/// used to produce it.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub image_id: u32,
    pub clean: Tensor,
    pub hazy: Tensor,
    pub depth: Tensor,
    pub params: HazeParams,
}

fn smoothstep(e0: Real, e1: Real, x: Real) -> Real {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Low-frequency field: a sum of a few sinusoidal plane waves, one value
/// per pixel.
fn smooth_field(size: usize, components: usize, amp: Real, rng: &mut Rng) -> Vec<Real> {
    let mut field = vec![0.0; size * size];
    for _ in 0..components {
        let fx = rng.uniform_in(-2.0, 2.0) as Real / size as Real;
        let fy = rng.uniform_in(-2.0, 2.0) as Real / size as Real;
        let phase = rng.uniform_in(0.0, std::f64::consts::TAU) as Real;
        let a = rng.uniform_in(0.3, 1.0) as Real * amp;
        for y in 0..size {
            for x in 0..size {
                let angle = std::f64::consts::TAU as Real * (fx * x as Real + fy * y as Real) + phase;
                field[y * size + x] += a * angle.sin();
            }
        }
    }
    field
}

/// Deterministic clean image and depth map for (image_id, seed). The image
/// layers soft-edged primitives over smooth color gradients; the depth map
/// is a smooth field in [DEPTH_MIN, DEPTH_MAX].
pub fn synth_scene(image_id: u32, size: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    if size != 32 && size != 64 {
        return Err(Error::contract("synth_scene", format!("size must be 32 or 64, got {size}")));
    }
    let mut rng = Rng::new(derive_seed(seed, &format!("scene/{image_id}")));
    let n = size * size;

    // Background: smooth gradients around a per-channel base tone.
    let mut img = vec![0.0; 3 * n];
    for c in 0..3 {
        let base = rng.uniform_in(0.25, 0.75) as Real;
        let field = smooth_field(size, 2, 0.18, &mut rng);
        for p in 0..n {
            img[c * n + p] = base + field[p];
        }
    }

    // Foreground primitives with soft edges.
    let count = 3 + rng.below(4);
    let edge = size as Real * 0.06;
    for _ in 0..count {
        let kind = rng.below(3);
        let color = [
            rng.uniform_in(0.0, 1.0) as Real,
            rng.uniform_in(0.0, 1.0) as Real,
            rng.uniform_in(0.0, 1.0) as Real,
        ];
        let alpha = rng.uniform_in(0.6, 1.0) as Real;
        let mut mask = vec![0.0; n];
        match kind {
            0 => {
                // Disc.
                let cx = rng.uniform_in(0.0, size as f64) as Real;
                let cy = rng.uniform_in(0.0, size as f64) as Real;
                let r = rng.uniform_in(size as f64 / 8.0, size as f64 / 3.0) as Real;
                for y in 0..size {
                    for x in 0..size {
                        let d = ((x as Real - cx).powi(2) + (y as Real - cy).powi(2)).sqrt();
                        mask[y * size + x] = smoothstep(r + edge, r - edge, d);
                    }
                }
            }
            1 => {
                // Axis-aligned rectangle.
                let x0 = rng.uniform_in(0.0, size as f64 * 0.7) as Real;
                let y0 = rng.uniform_in(0.0, size as f64 * 0.7) as Real;
                let w = rng.uniform_in(size as f64 / 6.0, size as f64 / 2.0) as Real;
                let h = rng.uniform_in(size as f64 / 6.0, size as f64 / 2.0) as Real;
                for y in 0..size {
                    for x in 0..size {
                        let mx = smoothstep(x0 - edge, x0 + edge, x as Real)
                            * smoothstep(x0 + w + edge, x0 + w - edge, x as Real);
                        let my = smoothstep(y0 - edge, y0 + edge, y as Real)
                            * smoothstep(y0 + h + edge, y0 + h - edge, y as Real);
                        mask[y * size + x] = mx * my;
                    }
                }
            }
            _ => {
                // Diagonal band.
                let theta = rng.uniform_in(0.0, std::f64::consts::PI) as Real;
                let (a, b) = (theta.cos(), theta.sin());
                let c0 = rng.uniform_in(0.2, 0.8) as Real * size as Real;
                let half_w = rng.uniform_in(size as f64 / 12.0, size as f64 / 4.0) as Real;
                for y in 0..size {
                    for x in 0..size {
                        let d = (a * x as Real + b * y as Real - c0).abs();
                        mask[y * size + x] = smoothstep(half_w + edge, half_w - edge, d);
                    }
                }
            }
        }
        for c in 0..3 {
            for p in 0..n {
                let m = mask[p] * alpha;
                img[c * n + p] = img[c * n + p] * (1.0 - m) + color[c] * m;
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    // Global exposure/contrast diversity. Real photographic corpora vary
    // widely in exposure and dynamic range; without this, every scene sits
    // at the same global brightness and any global shift becomes a
    // trivially separable cue rather than one entangled with scene
    // identity.
    let contrast = rng.uniform_in(0.5, 1.0) as Real;
    let brightness = rng.uniform_in(-0.10, 0.20) as Real;
    for v in img.iter_mut() {
        *v = (0.5 + contrast * (*v - 0.5) + brightness).clamp(0.0, 1.0);
    }

    // Depth: smooth field min-max normalized into [DEPTH_MIN, DEPTH_MAX].
    let field = smooth_field(size, 3, 1.0, &mut rng);
    let lo = field.iter().copied().fold(Real::INFINITY, Real::min);
    let hi = field.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let span = (hi - lo).max(1e-9);
    let depth: Vec<Real> = field
        .iter()
        .map(|v| DEPTH_MIN + (DEPTH_MAX - DEPTH_MIN) * ((v - lo) / span))
        .collect();

    Ok((
        Tensor::from_vec(&[3, size, size], img)?,
        Tensor::from_vec(&[1, size, size], depth)?,
    ))
}

/// Atmospheric scattering: hazy = clean * exp(-beta d) + A (1 - exp(-beta d)).
pub fn apply_scattering(clean: &Tensor, depth: &Tensor, params: &HazeParams) -> Result<Tensor> {
    let sc = clean.shape();
    let sd = depth.shape();
    if sc.len() != 3 || sc[0] != 3 {
        return Err(Error::dimension(
            "apply_scattering",
            format!("clean must be [3,h,w], got {:?}", sc),
        ));
    }
    if sd.len() != 3 || sd[0] != 1 || sd[1] != sc[1] || sd[2] != sc[2] {
        return Err(Error::dimension(
            "apply_scattering",
            format!("depth must be [1,{},{}], got {:?}", sc[1], sc[2], sd),
        ));
    }
    if params.beta < 0.0 || !params.beta.is_finite() {
        return Err(Error::contract(
            "apply_scattering",
            format!("beta must be finite and >= 0, got {}", params.beta),
        ));
    }
    for (c, a) in params.airlight.iter().enumerate() {
        if !(0.0..=1.0).contains(a) {
            return Err(Error::contract(
                "apply_scattering",
                format!("airlight channel {c} must be in [0,1], got {a}"),
            ));
        }
    }
    if depth.data().iter().any(|d| *d < 0.0 || !d.is_finite()) {
        return Err(Error::contract("apply_scattering", "depth must be finite and >= 0"));
    }
    let n = sc[1] * sc[2];
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        let t = (-params.beta * depth.data()[p]).exp();
        for c in 0..3 {
            out[c * n + p] = clean.data()[c * n + p] * t + params.airlight[c] * (1.0 - t);
        }
    }
    Tensor::from_vec(sc, out)
}

/// Ranges for sampled haze parameters.
#[derive(Clone, Debug)]
pub struct HazeRanges {
    pub airlight_min: Real,
    pub airlight_max: Real,
    pub beta_min: Real,
    pub beta_max: Real,
}

impl Default for HazeRanges {
    fn default() -> Self {
        HazeRanges { airlight_min: 0.7, airlight_max: 0.95, beta_min: 0.6, beta_max: 1.6 }
    }
}

impl HazeRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.airlight_min >= 0.6
            && self.airlight_max <= 1.0
            && self.airlight_min <= self.airlight_max
            && self.beta_min > 0.0
            && self.beta_min <= self.beta_max;
        if !ok {
            return Err(Error::contract(
                "haze_ranges",
                format!(
                    "need 0.6 <= airlight range <= 1.0 and 0 < beta range, got A [{}, {}], beta [{}, {}]",
                    self.airlight_min, self.airlight_max, self.beta_min, self.beta_max
                ),
            ));
        }
        Ok(())
    }

    /// Sample parameters: one base airlight tone with a small per-channel
    /// jitter, beta uniform in range.
    pub fn sample(&self, rng: &mut Rng) -> HazeParams {
        let base = rng.uniform_in(self.airlight_min as f64, self.airlight_max as f64);
        let mut airlight = [0.0; 3];
        for a in airlight.iter_mut() {
            let jitter = rng.uniform_in(-0.02, 0.02);
            *a = (base + jitter).clamp(self.airlight_min as f64, self.airlight_max as f64) as Real;
        }
        let beta = rng.uniform_in(self.beta_min as f64, self.beta_max as f64) as Real;
        HazeParams { airlight, beta }
    }
}

/// Build a full scene pair deterministically from (image_id, seed).
pub fn make_scene_pair(image_id: u32, size: usize, ranges: &HazeRanges, seed: u64) -> Result<ScenePair> {
    ranges.validate()?;
    let (clean, depth) = synth_scene(image_id, size, seed)?;
    let mut rng = Rng::new(derive_seed(seed, &format!("haze/{image_id}")));
    let params = ranges.sample(&mut rng);
    let hazy = apply_scattering(&clean, &depth, &params)?;
    Ok(ScenePair { image_id, clean, hazy, depth, params })
}
