//! Oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimtensor::grad::{batch_loss, loss_and_grad, model_slices_mut};
use slimtensor::grid::{GridCoord, Masks, TensorField};
use slimtensor::math::Vec3;
use slimtensor::render::{Ray, RenderConfig};
use slimtensor::{Aabb, Model, ModelConfig, RankState};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn small_model(res: usize, rank: usize, r_d: usize, epsilon: f64, seed: u64) -> Model {
    let cfg = ModelConfig {
        resolution: [res; 3],
        rank,
        app_feature_dim: 27,
        dir_freqs: 1,
        density_shift: 0.0,
        init_scale: 1.5,
        epsilon,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::random(&cfg, Aabb::cube(1.0), r_d, &mut rng).unwrap();
    for b in m.decoder.b1.iter_mut().chain(m.decoder.b2.iter_mut()) {
        *b = rng.gen_range(-0.3..0.3);
    }
    m.rank = RankState::new(r_d, rank, epsilon).unwrap();
    m
}

/// Rays from a ring of origins aimed through the unit cube.
pub fn probe_rays(n: usize, seed: u64) -> (Vec<Ray>, Vec<Vec3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rays = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let origin = slimtensor::math::scale(
            slimtensor::math::normalize([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
            3.0,
        );
        let aim = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
        let dir = slimtensor::math::normalize(slimtensor::math::sub(aim, origin));
        rays.push(Ray { origin, dir });
        targets.push([rng.gen(), rng.gen(), rng.gen()]);
    }
    (rays, targets)
}

pub struct FdOutcome {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub failures: Vec<(usize, f64, f64)>,
}

/// Central differences of the batch loss against the analytic gradient for
/// every learnable scalar.
pub fn finite_difference_check(model: &Model, rays: &[Ray], targets: &[Vec3], cfg: &RenderConfig, seed: Option<u64>) -> FdOutcome {
    let masks = model.masks();
    let (_, grads) = loss_and_grad(model, &masks, rays, targets, cfg, seed).unwrap();
    let analytic = grads.to_flat();
    let loss_at = |m: &Model| batch_loss(m, &masks, rays, targets, cfg, seed).unwrap();
    let mut work = model.clone();
    let mut flat_index = 0;
    let mut out = FdOutcome {
        checked: 0,
        worst_rel: 0.0,
        worst_abs: 0.0,
        failures: Vec::new(),
    };
    let lens: Vec<usize> = model_slices_mut(&mut work).iter().map(|s| s.len()).collect();
    for (si, len) in lens.into_iter().enumerate() {
        for i in 0..len {
            let orig = model_slices_mut(&mut work)[si][i];
            model_slices_mut(&mut work)[si][i] = orig + FD_STEP;
            let lp = loss_at(&work);
            model_slices_mut(&mut work)[si][i] = orig - FD_STEP;
            let lm = loss_at(&work);
            model_slices_mut(&mut work)[si][i] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic[flat_index];
            let err = (a - numeric).abs();
            out.worst_abs = out.worst_abs.max(err);
            if err > FD_ABS_FLOOR {
                let rel = err / a.abs().max(numeric.abs());
                out.worst_rel = out.worst_rel.max(rel);
                if rel > FD_REL_TOL {
                    out.failures.push((flat_index, a, numeric));
                }
            }
            out.checked += 1;
            flat_index += 1;
        }
    }
    out
}

/// Dense materialization of every component by explicit triple loops.
pub fn dense_geo(field: &TensorField, masks: &Masks) -> Vec<f64> {
    let [nx, ny, nz] = field.resolution();
    let mut out = vec![0.0; nx * ny * nz];
    for (r, comp) in field.geo().iter().enumerate() {
        let m2 = masks.geo[r] * masks.geo[r];
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let v = comp.line(0)[i] * comp.plane(0).get(j, k)
                        + comp.line(1)[j] * comp.plane(1).get(i, k)
                        + comp.line(2)[k] * comp.plane(2).get(i, j);
                    out[(i * ny + j) * nz + k] += m2 * v;
                }
            }
        }
    }
    out
}

/// Dense appearance features `B · h` at every node, by triple loops.
pub fn dense_app(field: &TensorField, masks: &Masks) -> Vec<Vec<f64>> {
    let [nx, ny, nz] = field.resolution();
    let basis = field.basis();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let mut h = vec![0.0; basis.rows];
                for (s, comp) in field.app().iter().enumerate() {
                    let m2 = masks.app[s] * masks.app[s];
                    h[3 * s] = m2 * comp.line(0)[i] * comp.plane(0).get(j, k);
                    h[3 * s + 1] = m2 * comp.line(1)[j] * comp.plane(1).get(i, k);
                    h[3 * s + 2] = m2 * comp.line(2)[k] * comp.plane(2).get(i, j);
                }
                let f = (0..basis.cols)
                    .map(|c| (0..basis.rows).map(|q| basis.get(q, c) * h[q]).sum())
                    .collect();
                out.push(f);
            }
        }
    }
    out
}

/// Trilinear interpolation of a dense node array at world point `x`.
pub fn trilinear_dense(field: &TensorField, dense: &[f64], x: Vec3) -> f64 {
    let [_, ny, nz] = field.resolution();
    let Some(c): Option<GridCoord> = field.coord(x) else {
        return 0.0;
    };
    c.corners()
        .iter()
        .map(|(n, w)| w * dense[(n[0] * ny + n[1]) * nz + n[2]])
        .sum()
}

/// Largest absolute node value of every geometry component and every
/// appearance component (over nodes and channels).
pub fn component_sup_norms(field: &TensorField) -> (Vec<f64>, Vec<f64>) {
    let [nx, ny, nz] = field.resolution();
    let nodes: Vec<[usize; 3]> = (0..nx)
        .flat_map(|i| (0..ny).flat_map(move |j| (0..nz).map(move |k| [i, j, k])))
        .collect();
    let geo = (0..field.rank())
        .map(|r| nodes.iter().map(|&n| field.eval_geo_component(r, n).unwrap().abs()).fold(0.0, f64::max))
        .collect();
    let app = (0..field.app_rank())
        .map(|s| {
            nodes
                .iter()
                .flat_map(|&n| field.eval_app_component(s, n).unwrap())
                .map(f64::abs)
                .fold(0.0, f64::max)
        })
        .collect();
    (geo, app)
}

/// Absolute slack for summation-order rounding in mask/truncation comparisons.
pub const ROUNDING_SLACK: f64 = 1e-12;

pub struct MaskTruncOutcome {
    pub samples: usize,
    pub violations: usize,
    pub worst_ratio: f64,
}

/// Sample `n` random points and compare the ε-masked field at `r_d = k`
/// with the field truncated to rank `k`, value by value, against
/// `ε² · Σ_{tail} ‖component‖∞`.
pub fn mask_truncation_check(field: &TensorField, k: usize, epsilon: f64, n: usize, seed: u64) -> MaskTruncOutcome {
    use slimtensor::grid::GridKind;
    let masks = Masks::from_state(&RankState::new(k, field.rank(), epsilon).unwrap());
    let trunc = field.truncate_rank(k).unwrap();
    let ones = Masks::ones(k);
    let (geo_sup, app_sup) = component_sup_norms(field);
    let e2 = epsilon * epsilon;
    let geo_bound = e2 * geo_sup[k..].iter().sum::<f64>();
    let app_bound = e2 * app_sup[3 * k..].iter().sum::<f64>();
    let bbox = *field.bbox();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MaskTruncOutcome {
        samples: 0,
        violations: 0,
        worst_ratio: 0.0,
    };
    for _ in 0..n {
        let x = [0, 1, 2].map(|a| rng.gen_range(bbox.min[a]..bbox.max[a]));
        for (kind, bound) in [(GridKind::Geometry, geo_bound), (GridKind::Appearance, app_bound)] {
            let a = field.sample_trilinear(&masks, x, kind).unwrap();
            let b = trunc.sample_trilinear(&ones, x, kind).unwrap();
            for (va, vb) in a.iter().zip(&b) {
                let d = (va - vb).abs();
                out.samples += 1;
                if bound > 0.0 {
                    out.worst_ratio = out.worst_ratio.max(d / bound);
                }
                if d > bound + ROUNDING_SLACK {
                    out.violations += 1;
                }
            }
        }
    }
    out
}
