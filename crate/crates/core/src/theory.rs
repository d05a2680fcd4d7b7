//! Empirical checks of the decoder-Lipschitz gradient bounds.
//!
//! A grid element `g` is one channel of the dense appearance-feature grid at
//! one node. It reaches every sample whose cell touches the node through the
//! sample's trilinear weight, so derivatives are taken by perturbing the
//! decoder input of those samples (see [`FeaturePerturbation`]). Densities
//! do not depend on `g`, which keeps compositing weights fixed.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grad::loss_and_grad;
use crate::grid::Aabb;
use crate::math::{dot, normalize, scale, sub, Vec3};
use crate::model::Model;
use crate::render::{trace_ray, FeaturePerturbation, Jitter, Ray, RayRecord, RenderConfig};

/// Central-difference step on feature values.
pub const FD_STEP: f64 = 1e-4;
/// Relative slack allowed on every bound.
pub const BOUND_REL_TOL: f64 = 1e-6;

/// Outcome of one bound over many samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub name: String,
    /// Largest bound value met (constant for the color bound).
    pub bound: f64,
    pub max_observed: f64,
    /// Largest `observed / bound` over samples; `0` when both vanish.
    pub margin_ratio: f64,
    pub samples: usize,
    pub violations: usize,
    pub pass: bool,
}

impl BoundCheck {
    fn from_pairs(name: &str, pairs: &[(f64, f64)]) -> Self {
        let mut check = BoundCheck {
            name: name.to_string(),
            bound: 0.0,
            max_observed: 0.0,
            margin_ratio: 0.0,
            samples: pairs.len(),
            violations: 0,
            pass: true,
        };
        for &(observed, bound) in pairs {
            check.bound = check.bound.max(bound);
            check.max_observed = check.max_observed.max(observed);
            let ratio = if observed == 0.0 {
                0.0
            } else if bound == 0.0 {
                f64::INFINITY
            } else {
                observed / bound
            };
            check.margin_ratio = check.margin_ratio.max(ratio);
            if !(observed <= bound * (1.0 + BOUND_REL_TOL)) {
                check.violations += 1;
            }
        }
        check.pass = check.violations == 0;
        check
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundReport {
    pub checks: Vec<BoundCheck>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,bound,max_observed,margin_ratio,samples,violations,pass\n");
        for c in &self.checks {
            s.push_str(&format!(
                "{},{:e},{:e},{:.6},{},{},{}\n",
                c.name, c.bound, c.max_observed, c.margin_ratio, c.samples, c.violations, c.pass
            ));
        }
        s
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<8} {} samples={} violations={} max_observed={:.4e} bound={:.4e} margin={:.4}",
                c.name,
                if c.pass { "ok  " } else { "FAIL" },
                c.samples,
                c.violations,
                c.max_observed,
                c.bound,
                c.margin_ratio
            )?;
        }
        Ok(())
    }
}

/// `n` rays from a sphere around `bbox` aimed at random interior points.
pub fn probe_rays(bbox: &Aabb, n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = bbox.center();
    let ext = bbox.extent();
    let radius = 2.0 * ext.iter().cloned().fold(0.0, f64::max);
    (0..n)
        .map(|_| {
            let dir = normalize([0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)));
            let origin = [0, 1, 2].map(|a| center[a] + radius * dir[a]);
            let target = [0, 1, 2].map(|a| bbox.min[a] + ext[a] * rng.gen_range(0.1..0.9));
            Ray {
                origin,
                dir: normalize(sub(target, origin)),
            }
        })
        .collect()
}

/// A grid element touching the ray when possible: a random corner of a
/// random shaded sample's cell and a random channel.
fn pick_element(model: &Model, rec: &RayRecord, rng: &mut ChaCha8Rng) -> ([usize; 3], usize) {
    let field = &model.field;
    let channel = rng.gen_range(0..field.app_feature_dim());
    let shaded: Vec<_> = rec.samples.iter().filter(|s| s.app.is_some()).collect();
    if !shaded.is_empty() {
        let s = shaded[rng.gen_range(0..shaded.len())];
        if let Some(c) = field.coord(s.pos) {
            let corners = c.corners();
            return (corners[rng.gen_range(0..8)].0, channel);
        }
    }
    let res = field.resolution();
    ([0, 1, 2].map(|a| rng.gen_range(0..res[a])), channel)
}

/// Central difference of the ray color with respect to one grid element.
fn color_derivative(model: &Model, ray: &Ray, cfg: &RenderConfig, node: [usize; 3], channel: usize) -> Vec3 {
    let masks = model.masks();
    let at = |amount: f64| {
        let p = FeaturePerturbation { node, channel, amount };
        trace_ray(model, &masks, ray, [0.0; 3], cfg, Jitter::Centered, Some(&p)).color
    };
    scale(sub(at(FD_STEP), at(-FD_STEP)), 0.5 / FD_STEP)
}

fn element_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Color sensitivity: `‖∂C/∂g‖ ≤ K` for `n_checks` (ray, element) pairs.
pub fn check_lemma1(model: &Model, rays: &[Ray], cfg: &RenderConfig, n_checks: usize, seed: u64) -> Result<BoundCheck> {
    if rays.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = model.decoder.lipschitz_upper_bound();
    let masks = model.masks();
    let pairs: Vec<(f64, f64)> = (0..n_checks)
        .into_par_iter()
        .map(|i| {
            let mut rng = element_rng(seed, i);
            let ray = &rays[rng.gen_range(0..rays.len())];
            let rec = trace_ray(model, &masks, ray, [0.0; 3], cfg, Jitter::Centered, None);
            let (node, channel) = pick_element(model, &rec, &mut rng);
            let d = color_derivative(model, ray, cfg, node, channel);
            (dot(d, d).sqrt(), k)
        })
        .collect();
    Ok(BoundCheck::from_pairs("lemma1", &pairs))
}

/// Error sensitivity: for the per-ray error `θ = ‖C − c*‖²`,
/// `|∂θ/∂g| ≤ 2K·Σp·√θ`, checked on `per_ray` elements of every ray.
pub fn check_lemma2(
    model: &Model,
    rays: &[Ray],
    targets: &[Vec3],
    cfg: &RenderConfig,
    per_ray: usize,
    seed: u64,
) -> Result<BoundCheck> {
    if rays.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if rays.len() != targets.len() {
        return Err(Error::Shape(format!("{} rays vs {} targets", rays.len(), targets.len())));
    }
    let k = model.decoder.lipschitz_upper_bound();
    let masks = model.masks();
    let pairs: Vec<(f64, f64)> = rays
        .par_iter()
        .zip(targets)
        .enumerate()
        .flat_map_iter(|(q, (ray, target))| {
            let rec = trace_ray(model, &masks, ray, *target, cfg, Jitter::Centered, None);
            let residual = sub(rec.color, *target);
            let theta = dot(residual, residual);
            let bound = 2.0 * k * rec.weight_sum() * theta.sqrt();
            let mut rng = element_rng(seed, q);
            (0..per_ray)
                .map(|_| {
                    let (node, channel) = pick_element(model, &rec, &mut rng);
                    let d = color_derivative(model, ray, cfg, node, channel);
                    ((2.0 * dot(residual, d)).abs(), bound)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(BoundCheck::from_pairs("lemma2", &pairs))
}

/// Bound terms for rank `rank` (1-based), i.e. its three appearance components.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTerm {
    pub rank: usize,
    /// Sum of `|∂L/∂θ|` over the components' line and plane factors.
    pub observed_grad: f64,
    /// L1 distance between the components' dense masked contributions and the reference's.
    pub distance: f64,
    /// `2K²N²p_max² · distance`.
    pub bound: f64,
    /// `observed_grad / bound`, infinite when the bound vanishes.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub lipschitz: f64,
    pub samples_per_ray: usize,
    pub p_max: f64,
    pub rows: Vec<RankTerm>,
}

impl Theorem1Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,observed_grad,distance,bound,ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.rank, r.observed_grad, r.distance, r.bound, r.ratio));
        }
        s
    }
}

fn component_distance(snapshot: &Model, reference: &Model, s: usize) -> Result<f64> {
    let (a, b) = (&snapshot.field, &reference.field);
    let (ma, mb) = (snapshot.masks().app[s], reference.masks().app[s]);
    let res = a.resolution();
    let mut total = 0.0;
    for i in 0..res[0] {
        for j in 0..res[1] {
            for k in 0..res[2] {
                let va = a.eval_app_component(s, [i, j, k])?;
                let vb = b.eval_app_component(s, [i, j, k])?;
                total += va.iter().zip(&vb).map(|(x, y)| (ma * ma * x - mb * mb * y).abs()).sum::<f64>();
            }
        }
    }
    Ok(total)
}

/// Per-rank terms of the convergence bound for an in-training `snapshot`
/// against a converged `reference` of the same shape. Only observable terms
/// are computed; the residual term at the optimum is left out.
pub fn theorem1_terms(
    snapshot: &Model,
    reference: &Model,
    rays: &[Ray],
    targets: &[Vec3],
    cfg: &RenderConfig,
) -> Result<Theorem1Report> {
    if snapshot.field.resolution() != reference.field.resolution()
        || snapshot.field.rank() != reference.field.rank()
        || snapshot.field.app_feature_dim() != reference.field.app_feature_dim()
    {
        return Err(Error::Shape("snapshot and reference differ in resolution, rank or feature width".into()));
    }
    let masks = snapshot.masks();
    let (_, grads) = loss_and_grad(snapshot, &masks, rays, targets, cfg, None)?;
    let p_max = rays
        .par_iter()
        .zip(targets)
        .map(|(ray, t)| {
            let rec = trace_ray(snapshot, &masks, ray, *t, cfg, Jitter::Centered, None);
            rec.samples.iter().map(|s| s.weight).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    let k = snapshot.decoder.lipschitz_upper_bound();
    let n = cfg.n_samples as f64;
    let scale_term = 2.0 * k * k * n * n * p_max * p_max;
    let rows = (0..snapshot.field.rank())
        .map(|r| {
            let mut observed_grad = 0.0;
            let mut distance = 0.0;
            for s in 3 * r..3 * r + 3 {
                let comp = &grads.field.app()[s];
                observed_grad += (0..3)
                    .map(|a| comp.line(a).iter().chain(&comp.plane(a).data).map(|v| v.abs()).sum::<f64>())
                    .sum::<f64>();
                distance += component_distance(snapshot, reference, s)?;
            }
            let bound = scale_term * distance;
            let ratio = if bound > 0.0 { observed_grad / bound } else { f64::INFINITY };
            Ok(RankTerm {
                rank: r + 1,
                observed_grad,
                distance,
                bound,
                ratio,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Theorem1Report {
        lipschitz: k,
        samples_per_ray: cfg.n_samples,
        p_max,
        rows,
    })
}
