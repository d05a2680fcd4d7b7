//! Reverse pass over the fixed rendering pipeline and the Adam update.
//!
//! The forward pass ([`crate::render::trace_ray`]) records every sample of
//! every ray; [`Tape::backward`] walks those records in reverse:
//! photometric loss → compositing → (softplus density, decoder) → basis →
//! masked vector/matrix factors through their interpolation weights.
//!
//! A masked factor enters the forward pass as `μ · v*`, so its gradient is
//! `μ` times the gradient with respect to the effective factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::AppearanceDecoder;
use crate::error::{Error, Result};
use crate::grid::{Masks, TensorField, PLANE_AXES};
use crate::math::{sigmoid, Vec3};
use crate::model::Model;
use crate::render::{mse_loss, trace_ray, Jitter, Ray, RayRecord, RaySampleBatch, RenderConfig};

/// Rays per gradient partition. Partials are reduced in partition order, so
/// results do not depend on the thread count.
const CHUNK_RAYS: usize = 256;

/// Gradient buffers shaped like the model's learnable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub field: TensorField,
    pub decoder: AppearanceDecoder,
}

impl Gradients {
    pub fn zeros_for(model: &Model) -> Self {
        Self {
            field: model.field.zeros_like(),
            decoder: model.decoder.zeros_like(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.field.slices();
        v.extend(self.decoder.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.field.slices_mut();
        v.extend(self.decoder.slices_mut());
        v
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn zero(&mut self) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Flattened copy in registry order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

/// Per-ray jitter derived from a batch seed.
pub fn ray_jitter(seed: Option<u64>, index: usize) -> Jitter {
    match seed {
        Some(s) => Jitter::Seeded(s ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        None => Jitter::Centered,
    }
}

/// Recorded forward pass for one batch.
#[derive(Debug, Default)]
pub struct Tape {
    batch: Option<RaySampleBatch>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Run and record the forward pass; returns the batch MSE.
    pub fn forward(
        &mut self,
        model: &Model,
        masks: &Masks,
        rays: &[Ray],
        targets: &[Vec3],
        cfg: &RenderConfig,
        seed: Option<u64>,
    ) -> Result<f64> {
        if rays.len() != targets.len() {
            return Err(Error::Shape(format!("{} rays vs {} targets", rays.len(), targets.len())));
        }
        let batch = RaySampleBatch {
            rays: rays
                .iter()
                .zip(targets)
                .enumerate()
                .map(|(i, (r, t))| trace_ray(model, masks, r, *t, cfg, ray_jitter(seed, i), None))
                .collect(),
        };
        let loss = mse_loss(&batch)?;
        self.batch = Some(batch);
        Ok(loss)
    }

    pub fn batch(&self) -> Option<&RaySampleBatch> {
        self.batch.as_ref()
    }

    /// Accumulate `∂L/∂θ` of the recorded batch MSE into `grads`.
    pub fn backward(&self, model: &Model, masks: &Masks, grads: &mut Gradients) -> Result<()> {
        let batch = self.batch.as_ref().ok_or(Error::NoForwardPass)?;
        if batch.rays.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let q = batch.rays.len() as f64;
        let mut scratch = Scratch::new(model);
        for rec in &batch.rays {
            let d_color = [0, 1, 2].map(|c| 2.0 * (rec.color[c] - rec.target[c]) / q);
            backward_ray(model, masks, rec, d_color, grads, &mut scratch);
        }
        Ok(())
    }
}

struct Scratch {
    h: Vec<f64>,
    d_features: Vec<f64>,
    d_h: Vec<f64>,
    d_tau: Vec<f64>,
}

impl Scratch {
    fn new(model: &Model) -> Self {
        Self {
            h: vec![0.0; 3 * model.field.app_rank()],
            d_features: vec![0.0; model.field.app_feature_dim()],
            d_h: vec![0.0; 3 * model.field.app_rank()],
            d_tau: Vec::new(),
        }
    }
}

/// Backward through one recorded ray given `dL/dcolor`.
fn backward_ray(model: &Model, masks: &Masks, rec: &RayRecord, d_color: Vec3, grads: &mut Gradients, s: &mut Scratch) {
    let field = &model.field;
    let n = rec.samples.len();
    if n == 0 || d_color == [0.0; 3] {
        return;
    }
    let bg_term: f64 = (0..3).map(|c| d_color[c] * rec.residual_transmittance * rec.background[c]).sum();

    // dL/dτ_k = g·(T_{k+1} c_k − Σ_{n>k} w_n c_n − T_res bg), with c_k = 0 for skipped samples.
    s.d_tau.clear();
    s.d_tau.resize(n, 0.0);
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let smp = &rec.samples[k];
        let t_next = if k + 1 < n {
            rec.samples[k + 1].transmittance
        } else {
            rec.residual_transmittance
        };
        let gc = smp.app.as_ref().map_or(0.0, |a| {
            let rgb = a.rgb();
            d_color[0] * rgb[0] + d_color[1] * rgb[1] + d_color[2] * rgb[2]
        });
        s.d_tau[k] = t_next * gc - suffix - bg_term;
        suffix += smp.weight * gc;
    }

    for (k, smp) in rec.samples.iter().enumerate() {
        let coord = field.coord(smp.pos).expect("recorded samples lie inside the box");
        let d_z = s.d_tau[k] * rec.delta * sigmoid(smp.z);
        if d_z != 0.0 {
            for (r, (comp, m)) in field.geo().iter().zip(&masks.geo).enumerate() {
                let m2 = m * m;
                let pairs = comp.sample_pairs(&coord);
                let gcomp = &mut grads.field.geo_mut()[r];
                for (a, p) in pairs.iter().enumerate() {
                    gcomp.scatter_pair_grad(a, &coord, d_z * m2 * p.plane, d_z * m2 * p.line);
                }
            }
        }
        let Some(app) = &smp.app else { continue };
        let d_rgb = d_color.map(|g| g * smp.weight);
        model.decoder.backward(&app.decoder, d_rgb, &mut grads.decoder, &mut s.d_features);
        if s.d_features.iter().all(|&v| v == 0.0) {
            continue;
        }
        field.sample_app_pairs_at(masks, &coord, &mut s.h);
        // f = Bᵀ h with B stored pair-major  ⇒  dB[q] += h_q d_f, d_h = B d_f.
        let basis = field.basis();
        let cols = basis.cols;
        let gb = grads.field.basis_mut();
        for (q, &hq) in s.h.iter().enumerate() {
            if hq == 0.0 {
                continue;
            }
            let row = &mut gb[q * cols..(q + 1) * cols];
            row.iter_mut().zip(&s.d_features).for_each(|(g, df)| *g += hq * df);
        }
        basis.matvec(&s.d_features, &mut s.d_h);
        for (si, (comp, m)) in field.app().iter().zip(&masks.app).enumerate() {
            let m2 = m * m;
            let pairs = comp.sample_pairs(&coord);
            let gcomp = &mut grads.field.app_mut()[si];
            for (a, p) in pairs.iter().enumerate() {
                let dh = s.d_h[3 * si + a] * m2;
                if dh != 0.0 {
                    gcomp.scatter_pair_grad(a, &coord, dh * p.plane, dh * p.line);
                }
            }
        }
    }
}

/// Batch MSE without the reverse pass, using the same per-ray jitter.
pub fn batch_loss(model: &Model, masks: &Masks, rays: &[Ray], targets: &[Vec3], cfg: &RenderConfig, seed: Option<u64>) -> Result<f64> {
    if rays.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if rays.len() != targets.len() {
        return Err(Error::Shape(format!("{} rays vs {} targets", rays.len(), targets.len())));
    }
    let partials: Vec<f64> = rays
        .par_chunks(CHUNK_RAYS)
        .zip(targets.par_chunks(CHUNK_RAYS))
        .enumerate()
        .map(|(chunk, (rs, ts))| {
            rs.iter()
                .zip(ts)
                .enumerate()
                .map(|(i, (ray, target))| {
                    let rec = trace_ray(model, masks, ray, *target, cfg, ray_jitter(seed, chunk * CHUNK_RAYS + i), None);
                    (0..3).map(|c| (rec.color[c] - target[c]).powi(2)).sum::<f64>()
                })
                .sum()
        })
        .collect();
    Ok(partials.iter().sum::<f64>() / rays.len() as f64)
}

/// Batch MSE and its gradient, evaluated in fixed-size ray partitions that may
/// run in parallel and are summed in order.
pub fn loss_and_grad(
    model: &Model,
    masks: &Masks,
    rays: &[Ray],
    targets: &[Vec3],
    cfg: &RenderConfig,
    seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    if rays.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if rays.len() != targets.len() {
        return Err(Error::Shape(format!("{} rays vs {} targets", rays.len(), targets.len())));
    }
    let q = rays.len() as f64;
    let partials: Vec<(f64, Gradients)> = rays
        .par_chunks(CHUNK_RAYS)
        .zip(targets.par_chunks(CHUNK_RAYS))
        .enumerate()
        .map(|(chunk, (rs, ts))| {
            let mut g = Gradients::zeros_for(model);
            let mut scratch = Scratch::new(model);
            let mut sq = 0.0;
            for (i, (ray, target)) in rs.iter().zip(ts).enumerate() {
                let jitter = ray_jitter(seed, chunk * CHUNK_RAYS + i);
                let rec = trace_ray(model, masks, ray, *target, cfg, jitter, None);
                let d: Vec3 = [0, 1, 2].map(|c| rec.color[c] - rec.target[c]);
                sq += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                backward_ray(model, masks, &rec, d.map(|v| 2.0 * v / q), &mut g, &mut scratch);
            }
            (sq, g)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut sq, mut grads) = iter.next().expect("at least one partition");
    for (s, g) in iter {
        sq += s;
        grads.add_assign(&g);
    }
    Ok((sq / q, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    GeoLine { comp: usize, axis: usize },
    GeoPlane { comp: usize, axis: usize },
    AppLine { comp: usize, axis: usize },
    AppPlane { comp: usize, axis: usize },
    Basis,
    W1,
    B1,
    W2,
    B2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Grid,
    Network,
}

impl ParamId {
    /// Basis and decoder weights train at the network rate.
    pub fn group(&self) -> ParamGroup {
        match self {
            ParamId::GeoLine { .. } | ParamId::GeoPlane { .. } | ParamId::AppLine { .. } | ParamId::AppPlane { .. } => {
                ParamGroup::Grid
            }
            _ => ParamGroup::Network,
        }
    }

    /// Rank component owning this array (`None` for shared arrays).
    pub fn component(&self) -> Option<usize> {
        match *self {
            ParamId::GeoLine { comp, .. } | ParamId::GeoPlane { comp, .. } => Some(comp),
            ParamId::AppLine { comp, .. } | ParamId::AppPlane { comp, .. } => Some(comp / 3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub id: ParamId,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Registry of every learnable array in the canonical order used by
/// [`Model`]/[`Gradients`] slices.
pub fn param_entries(model: &Model) -> Vec<ParamEntry> {
    let field = &model.field;
    let res = field.resolution();
    let mut ids: Vec<(ParamId, Vec<usize>)> = Vec::new();
    for comp in 0..field.rank() {
        for axis in 0..3 {
            ids.push((ParamId::GeoLine { comp, axis }, vec![res[axis]]));
        }
        for axis in 0..3 {
            let [p, q] = PLANE_AXES[axis];
            ids.push((ParamId::GeoPlane { comp, axis }, vec![res[p], res[q]]));
        }
    }
    for comp in 0..field.app_rank() {
        for axis in 0..3 {
            ids.push((ParamId::AppLine { comp, axis }, vec![res[axis]]));
        }
        for axis in 0..3 {
            let [p, q] = PLANE_AXES[axis];
            ids.push((ParamId::AppPlane { comp, axis }, vec![res[p], res[q]]));
        }
    }
    ids.push((ParamId::Basis, vec![field.basis().rows, field.basis().cols]));
    let d = &model.decoder;
    ids.push((ParamId::W1, vec![d.w1.rows, d.w1.cols]));
    ids.push((ParamId::B1, vec![d.b1.len()]));
    ids.push((ParamId::W2, vec![d.w2.rows, d.w2.cols]));
    ids.push((ParamId::B2, vec![d.b2.len()]));
    let mut offset = 0;
    ids.into_iter()
        .map(|(id, shape)| {
            let len = shape.iter().product();
            let e = ParamEntry { id, shape, offset, len };
            offset += len;
            e
        })
        .collect()
}

pub fn model_slices(model: &Model) -> Vec<&[f64]> {
    let mut v = model.field.slices();
    v.extend(model.decoder.slices());
    v
}

pub fn model_slices_mut(model: &mut Model) -> Vec<&mut [f64]> {
    let mut v = model.field.slices_mut();
    v.extend(model.decoder.slices_mut());
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_grid: f64,
    pub lr_network: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_grid: 0.02,
            lr_network: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(self.beta1) || !ok(self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Learnable-parameter registry with gradient buffers and Adam moments.
/// Values live in the [`Model`]; buffers follow [`param_entries`] order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    pub grad: Gradients,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl ParamSet {
    pub fn new(model: &Model) -> Self {
        let entries = param_entries(model);
        let total = entries.last().map_or(0, |e| e.offset + e.len);
        Self {
            entries,
            grad: Gradients::zeros_for(model),
            m: vec![0.0; total],
            v: vec![0.0; total],
            step: 0,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.grad.zero();
    }

    /// One bias-corrected Adam step on `model` from the accumulated
    /// gradients, which are zeroed afterwards.
    pub fn adam_step(&mut self, model: &mut Model, cfg: &AdamConfig) -> Result<()> {
        if param_entries(model) != self.entries {
            return Err(Error::Shape("model layout changed since the parameter set was built".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let values = model_slices_mut(model);
        let grads = self.grad.slices();
        for ((entry, value), grad) in self.entries.iter().zip(values).zip(grads) {
            let lr = match entry.id.group() {
                ParamGroup::Grid => cfg.lr_grid,
                ParamGroup::Network => cfg.lr_network,
            };
            let m = &mut self.m[entry.offset..entry.offset + entry.len];
            let v = &mut self.v[entry.offset..entry.offset + entry.len];
            for i in 0..entry.len {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.grad.zero();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Aabb, RankState};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            resolution: [3, 3, 3],
            rank: 2,
            app_feature_dim: 4,
            density_shift: 0.0,
            init_scale: 1.0,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::random(&cfg, Aabb::cube(1.0), 2, &mut rng).unwrap()
    }

    #[test]
    fn backward_without_forward_errors() {
        let model = tiny_model(1);
        let mut g = Gradients::zeros_for(&model);
        let tape = Tape::new();
        assert!(matches!(tape.backward(&model, &model.masks(), &mut g), Err(Error::NoForwardPass)));
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let model = tiny_model(2);
        let masks = model.masks();
        let cfg = RenderConfig {
            n_samples: 8,
            ..RenderConfig::default()
        };
        let rays = vec![Ray {
            origin: [0.1, 0.2, 3.0],
            dir: [0.0, 0.0, -1.0],
        }];
        let pred = trace_ray(&model, &masks, &rays[0], [0.0; 3], &cfg, Jitter::Centered, None).color;
        let (loss, g) = loss_and_grad(&model, &masks, &rays, &[pred], &cfg, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_matches_partitioned_path() {
        let model = tiny_model(3);
        let masks = Masks::from_state(&RankState::new(1, 2, 0.3).unwrap());
        let cfg = RenderConfig {
            n_samples: 12,
            ..RenderConfig::default()
        };
        let rays: Vec<Ray> = (0..70)
            .map(|i| Ray {
                origin: [0.01 * i as f64 - 0.3, 0.2, 3.0],
                dir: crate::math::normalize([0.05, -0.02 * (i % 5) as f64, -1.0]),
            })
            .collect();
        let targets: Vec<Vec3> = (0..70).map(|i| [0.1 * (i % 7) as f64, 0.5, 0.2]).collect();
        let mut tape = Tape::new();
        let l1 = tape.forward(&model, &masks, &rays, &targets, &cfg, Some(5)).unwrap();
        let mut g1 = Gradients::zeros_for(&model);
        tape.backward(&model, &masks, &mut g1).unwrap();
        let (l2, g2) = loss_and_grad(&model, &masks, &rays, &targets, &cfg, Some(5)).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn registry_ids_unique_and_shapes_match() {
        let model = tiny_model(4);
        let entries = param_entries(&model);
        let ids: std::collections::HashSet<_> = entries.iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), entries.len());
        let slices = model_slices(&model);
        assert_eq!(slices.len(), entries.len());
        for (e, s) in entries.iter().zip(&slices) {
            assert_eq!(e.len, s.len());
        }
        let g = Gradients::zeros_for(&model);
        for (e, s) in entries.iter().zip(g.slices()) {
            assert_eq!(e.len, s.len());
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut model = tiny_model(5);
        let before = model.clone();
        let mut ps = ParamSet::new(&model);
        ps.adam_step(&mut model, &AdamConfig::default()).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn adam_first_step_matches_scalar_trace() {
        let mut model = tiny_model(6);
        let before = model.clone();
        let mut ps = ParamSet::new(&model);
        ps.grad.decoder.b2[1] = 0.37;
        ps.grad.field.geo_mut()[0].line_mut(0)[1] = -2.0;
        let cfg = AdamConfig::default();
        ps.adam_step(&mut model, &cfg).unwrap();
        // Hand-rolled scalar Adam: m = (1-β1) g, v = (1-β2) g², bias-corrected ratio = g/|g|.
        let step = |g: f64, lr: f64| {
            let m = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
            let v = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
            -lr * m / (v.sqrt() + cfg.eps)
        };
        let d_b2 = model.decoder.b2[1] - before.decoder.b2[1];
        assert!((d_b2 - step(0.37, cfg.lr_network)).abs() < 1e-15);
        let d_line = model.field.geo()[0].line(0)[1] - before.field.geo()[0].line(0)[1];
        assert!((d_line - step(-2.0, cfg.lr_grid)).abs() < 1e-15);
        assert!(ps.grad.to_flat().iter().all(|&v| v == 0.0));
    }
}
