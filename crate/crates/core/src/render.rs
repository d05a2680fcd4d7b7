//! Pinhole rays, stratified sampling, emission-absorption compositing and
//! the per-batch photometric loss.
//!
//! Camera convention: the camera looks down its local `-Z` axis with `+Y` up
//! and image rows growing downwards (the NeRF-synthetic convention). Ray
//! `(i, j)` passes through the pixel center `(i + 0.5, j + 0.5)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{dir_dim, encode_direction, DecoderTrace};
use crate::error::{Error, Result};
use crate::grid::Masks;
use crate::imageio::Image;
use crate::math::{add, cross, dot, norm, normalize, scale, softplus, sub, Vec3};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Stratified samples per ray across the ray/bbox chord.
    pub n_samples: usize,
    pub background: Vec3,
    /// Samples whose compositing weight falls below this skip the appearance
    /// branch (their color contribution is dropped).
    pub weight_threshold: f64,
    /// Marching stops once transmittance drops below this value.
    pub transmittance_cutoff: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_samples: 128,
            background: [1.0; 3],
            weight_threshold: 0.0,
            transmittance_cutoff: 0.0,
        }
    }
}

impl RenderConfig {
    /// Settings for training/eval speed: skip negligible samples and stop
    /// marching inside opaque regions.
    pub fn fast(n_samples: usize) -> Self {
        Self {
            n_samples,
            weight_threshold: 1e-4,
            transmittance_cutoff: 1e-4,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera-to-world rotation; columns are the camera axes in world space.
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
}

impl Camera {
    pub fn new(focal: f64, width: u32, height: u32, rotation: [[f64; 3]; 3], position: Vec3) -> Result<Self> {
        let cam = Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            position,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `position` looking at `target`, with `up` as the approximate up vector.
    pub fn look_at(focal: f64, width: u32, height: u32, position: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = normalize(sub(target, position));
        let mut right = cross(forward, up);
        if norm(right) < 1e-9 {
            right = cross(forward, [1.0, 0.0, 0.0]);
        }
        let right = normalize(right);
        let cam_up = cross(right, forward);
        let back = scale(forward, -1.0);
        let rotation = [0, 1, 2].map(|i| [right[i], cam_up[i], back[i]]);
        Self::new(focal, width, height, rotation, position)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::InvalidArgument(format!("focal length {} must be > 0", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                if (rtr - id).abs() > 1e-6 {
                    return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Camera axis `col` (0 = right, 1 = up, 2 = back) in world space.
    pub fn axis(&self, col: usize) -> Vec3 {
        [self.rotation[0][col], self.rotation[1][col], self.rotation[2][col]]
    }

    /// Ray through continuous image coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let d_cam = [(u - self.cx) / self.focal, -(v - self.cy) / self.focal, -1.0];
        let r = &self.rotation;
        let d = [0, 1, 2].map(|i| r[i][0] * d_cam[0] + r[i][1] * d_cam[1] + r[i][2] * d_cam[2]);
        Ray {
            origin: self.position,
            dir: normalize(d),
        }
    }

    /// 4×4 camera-to-world matrix, row-major.
    pub fn transform(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.position;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }
}

/// Rays through the centers of the given `(column, row)` pixels.
pub fn generate_rays(cam: &Camera, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(i, j)| {
            if i >= cam.width || j >= cam.height {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({i}, {j}) outside {}×{} image",
                    cam.width, cam.height
                )));
            }
            Ok(cam.ray_through(i as f64 + 0.5, j as f64 + 0.5))
        })
        .collect()
}

/// Compositing weights from per-sample optical depths `τ_n = δ σ_n`.
///
/// Returns `(weights, transmittances, residual)` with
/// `t_n = exp(-Σ_{m<n} τ_m)`, `w_n = t_n (1 - e^{-τ_n})` and the
/// transmittance left after the last sample. The exponent is accumulated
/// as a sum and exponentiated once per sample.
pub fn compositing_weights(optical_depths: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let mut acc: f64 = 0.0;
    let mut weights = Vec::with_capacity(optical_depths.len());
    let mut trans = Vec::with_capacity(optical_depths.len());
    for &tau in optical_depths {
        let t = (-acc).exp();
        trans.push(t);
        weights.push(t * -(-tau).exp_m1());
        acc += tau;
    }
    (weights, trans, (-acc).exp())
}

/// Color of one ray from densities, colors and a uniform step size,
/// composited over `background`.
pub fn composite_ray(sigmas: &[f64], colors: &[Vec3], delta: f64, background: Vec3) -> Result<Vec3> {
    if sigmas.len() != colors.len() {
        return Err(Error::Shape(format!("{} densities vs {} colors", sigmas.len(), colors.len())));
    }
    if sigmas.iter().chain(colors.iter().flatten()).any(|v| v.is_nan()) || delta.is_nan() {
        return Err(Error::NonFinite("compositing input"));
    }
    if sigmas.iter().any(|&s| s < 0.0) || !(delta > 0.0) {
        return Err(Error::InvalidArgument("densities must be ≥ 0 and step size > 0".into()));
    }
    let taus: Vec<f64> = sigmas.iter().map(|s| s * delta).collect();
    let (w, _, residual) = compositing_weights(&taus);
    let mut c = scale(background, residual);
    for (wn, cn) in w.iter().zip(colors) {
        c = add(c, scale(*cn, *wn));
    }
    Ok(c)
}

/// How sample offsets inside each stratum are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Jitter {
    /// Stratum midpoints.
    Centered,
    /// Uniform offsets drawn from a generator seeded with this value.
    Seeded(u64),
}

/// Additive perturbation of one dense appearance-feature grid element,
/// spread to sample points through their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePerturbation {
    pub node: [usize; 3],
    pub channel: usize,
    pub amount: f64,
}

#[derive(Debug, Clone)]
pub struct AppRecord {
    pub decoder: DecoderTrace,
}

impl AppRecord {
    pub fn rgb(&self) -> Vec3 {
        self.decoder.rgb
    }
}

/// One ray-march sample and everything the backward pass needs from it.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub t: f64,
    pub pos: Vec3,
    /// Pre-activation density `raw + shift`.
    pub z: f64,
    pub sigma: f64,
    pub transmittance: f64,
    pub weight: f64,
    /// `None` when the sample was outside the box or below the weight threshold.
    pub app: Option<AppRecord>,
}

/// Forward record of one ray.
#[derive(Debug, Clone)]
pub struct RayRecord {
    pub ray: Ray,
    pub delta: f64,
    pub samples: Vec<SampleRecord>,
    pub residual_transmittance: f64,
    pub color: Vec3,
    pub target: Vec3,
    pub background: Vec3,
}

impl RayRecord {
    pub fn weight_sum(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }
}

/// Per-ray sample positions, densities, colors, transmittances and predictions for a batch.
#[derive(Debug, Clone, Default)]
pub struct RaySampleBatch {
    pub rays: Vec<RayRecord>,
}

/// Mean over rays of the squared L2 color residual.
pub fn mse_loss(batch: &RaySampleBatch) -> Result<f64> {
    if batch.rays.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sum: f64 = batch
        .rays
        .iter()
        .map(|r| {
            let d = sub(r.target, r.color);
            dot(d, d)
        })
        .sum();
    Ok(sum / batch.rays.len() as f64)
}

/// March one ray through the model, recording every sample.
pub fn trace_ray(
    model: &Model,
    masks: &Masks,
    ray: &Ray,
    target: Vec3,
    cfg: &RenderConfig,
    jitter: Jitter,
    perturb: Option<&FeaturePerturbation>,
) -> RayRecord {
    let field = &model.field;
    let mut record = RayRecord {
        ray: *ray,
        delta: 0.0,
        samples: Vec::new(),
        residual_transmittance: 1.0,
        color: cfg.background,
        target,
        background: cfg.background,
    };
    let Some((t0, t1)) = field.bbox().intersect_ray(ray.origin, ray.dir) else {
        return record;
    };
    let n = cfg.n_samples.max(1);
    let delta = (t1 - t0) / n as f64;
    record.delta = delta;
    let mut rng = match jitter {
        Jitter::Seeded(s) => Some(ChaCha8Rng::seed_from_u64(s)),
        Jitter::Centered => None,
    };
    let app_dim = field.app_feature_dim();
    let mut enc = vec![0.0; dir_dim(model.decoder.dir_freqs())];
    encode_direction(ray.dir, model.decoder.dir_freqs(), &mut enc);
    let mut h = vec![0.0; 3 * field.app_rank()];
    let mut features = vec![0.0; app_dim];
    let mut color = [0.0; 3];
    let mut acc: f64 = 0.0;
    for k in 0..n {
        let xi = rng.as_mut().map_or(0.5, |r| r.gen::<f64>());
        let t = t0 + (k as f64 + xi) * delta;
        let pos = ray.at(t);
        let trans = (-acc).exp();
        if trans < cfg.transmittance_cutoff {
            break;
        }
        let Some(coord) = field.coord(pos) else {
            continue;
        };
        let z = field.sample_geo_at(masks, &coord) + model.density_shift;
        let sigma = softplus(z);
        let tau = sigma * delta;
        let weight = trans * -(-tau).exp_m1();
        acc += tau;
        let app = if weight >= cfg.weight_threshold && weight > 0.0 {
            field.sample_app_pairs_at(masks, &coord, &mut h);
            field.basis().matvec_t(&h, &mut features);
            if let Some(p) = perturb {
                features[p.channel] += p.amount * coord.weight_of(p.node);
            }
            let mut trace = DecoderTrace::default();
            model.decoder.forward(&features, &enc, &mut trace);
            for c in 0..3 {
                color[c] += weight * trace.rgb[c];
            }
            Some(AppRecord { decoder: trace })
        } else {
            None
        };
        record.samples.push(SampleRecord {
            t,
            pos,
            z,
            sigma,
            transmittance: trans,
            weight,
            app,
        });
    }
    let residual = (-acc).exp();
    record.residual_transmittance = residual;
    record.color = add(color, scale(cfg.background, residual));
    record
}

/// Deterministic full-frame render; `seed` selects jittered sampling, `None` uses stratum midpoints.
pub fn render_image(model: &Model, cam: &Camera, cfg: &RenderConfig, seed: Option<u64>) -> Image {
    let masks = model.masks();
    let w = cam.width;
    let pixels: Vec<Vec3> = (0..cam.height * w)
        .into_par_iter()
        .map(|p| {
            let ray = cam.ray_through((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            let jitter = match seed {
                Some(s) => Jitter::Seeded(s ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                None => Jitter::Centered,
            };
            trace_ray(model, &masks, &ray, [0.0; 3], cfg, jitter, None).color
        })
        .collect();
    Image {
        width: w,
        height: cam.height,
        pixels,
    }
}
