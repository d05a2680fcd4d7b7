//! Loss-gated rank incrementation training and the simultaneous-rank baseline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{batch_loss, loss_and_grad, AdamConfig, ParamSet};
use crate::grid::{Aabb, Masks, RankState};
use crate::math::{softplus, Vec3};
use crate::model::{Model, ModelConfig};
use crate::render::{Ray, RenderConfig};
use crate::scene::RayPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Start at rank 1 and grow when the loss drops quickly.
    TrainTrains,
    /// All components active from the first iteration.
    Baseline,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_trains" => Ok(TrainMode::TrainTrains),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected train_trains or baseline)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampleStep {
    pub iteration: usize,
    pub resolution: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iter: usize,
    pub upsilon: f64,
    pub eta: usize,
    pub batch_size: usize,
    /// EMA window for the gate loss; 1 uses the raw minibatch loss.
    pub gate_window: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub upsample: Vec<UpsampleStep>,
    pub shrink_at: Vec<usize>,
    /// Nodes whose density exceeds this count as occupied when shrinking.
    pub shrink_density: f64,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            upsilon: 0.4,
            eta: 0,
            batch_size: 2048,
            gate_window: 1,
            seed: 0,
            mode: TrainMode::TrainTrains,
            upsample: vec![
                UpsampleStep {
                    iteration: 1000,
                    resolution: [17; 3],
                },
                UpsampleStep {
                    iteration: 1500,
                    resolution: [23; 3],
                },
                UpsampleStep {
                    iteration: 2000,
                    resolution: [32; 3],
                },
            ],
            shrink_at: vec![1200],
            shrink_density: 1.0,
            model: ModelConfig {
                resolution: [12; 3],
                ..ModelConfig::default()
            },
            render: RenderConfig::fast(64),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iter == 0 {
            return bad("max_iter must be positive");
        }
        if !(self.upsilon >= 0.0) {
            return bad("upsilon must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.gate_window == 0 {
            return bad("gate_window must be >= 1");
        }
        if self.model.rank == 0 {
            return bad("rank must be positive");
        }
        if !(self.model.epsilon >= 0.0) {
            return bad("epsilon must be >= 0");
        }
        if self.render.n_samples == 0 {
            return bad("render.n_samples must be positive");
        }
        let mut res = self.model.resolution;
        if res.iter().any(|&n| n < 2) {
            return bad("resolution must be at least 2 per axis");
        }
        let mut last = 0;
        for step in &self.upsample {
            if step.iteration <= last || (0..3).any(|a| step.resolution[a] < res[a]) {
                return bad("upsample steps must have increasing iterations and non-decreasing resolutions");
            }
            last = step.iteration;
            res = step.resolution;
        }
        self.adam.validate()
    }
}

/// Rank-increment gate: `|L_prev − L_cur| / L_cur > υ` and `it − last_inc > η`.
/// The caller checks that the rank is not already full.
pub fn should_increment(l_prev: f64, l_cur: f64, upsilon: f64, it: usize, last_inc: usize, eta: usize) -> Result<bool> {
    if !(l_cur > 0.0) || !l_cur.is_finite() || !l_prev.is_finite() {
        return Err(Error::InvalidArgument(format!("gate losses must be finite with L_cur > 0, got {l_prev}, {l_cur}")));
    }
    Ok((l_prev - l_cur).abs() / l_cur > upsilon && it.saturating_sub(last_inc) > eta)
}

/// Geometry mask `[1]·r_d ++ [ε]·(R−r_d)` and appearance mask over `3R` components.
pub fn update_masks(state: &RankState) -> Masks {
    Masks::from_state(state)
}

/// Gate loss for one batch: its mean MSE under the given masks.
pub fn eval_gate_loss(
    model: &Model,
    masks: &Masks,
    rays: &[Ray],
    targets: &[Vec3],
    cfg: &RenderConfig,
    seed: Option<u64>,
) -> Result<f64> {
    batch_loss(model, masks, rays, targets, cfg, seed)
}

/// Exponential moving average with `α = 2 / (window + 1)`.
#[derive(Debug, Clone)]
pub struct GateSmoother {
    alpha: f64,
    value: Option<f64>,
}

impl GateSmoother {
    pub fn new(window: usize) -> Self {
        Self {
            alpha: 2.0 / (window.max(1) as f64 + 1.0),
            value: None,
        }
    }

    pub fn push(&mut self, loss: f64) -> f64 {
        let v = match self.value {
            Some(prev) => prev + self.alpha * (loss - prev),
            None => loss,
        };
        self.value = Some(v);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEntry {
    pub iteration: usize,
    pub loss: f64,
    pub r_d: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub entries: Vec<LossEntry>,
    /// `(iteration, new r_d)` for every increment.
    pub increments: Vec<(usize, usize)>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,r_d\n");
        for e in &self.entries {
            s.push_str(&format!("{},{:e},{}\n", e.iteration, e.loss, e.r_d));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: LossHistory,
    /// The gate never fired in a rank-incrementing run.
    pub rank_never_incremented: bool,
}

/// Tight box around nodes with density above `threshold`, padded by one
/// cell and clipped to the current box. `None` when nothing is occupied.
pub fn occupied_bbox(model: &Model, threshold: f64) -> Option<Aabb> {
    let field = &model.field;
    let res = field.resolution();
    let masks = model.masks();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..res[0] {
        for j in 0..res[1] {
            for k in 0..res[2] {
                let raw = field.eval_geo_masked(&masks, [i, j, k]).expect("index in range");
                if softplus(raw + model.density_shift) > threshold {
                    any = true;
                    for (a, n) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(n);
                        hi[a] = hi[a].max(n);
                    }
                }
            }
        }
    }
    if !any {
        return None;
    }
    let lo_p = field.node_position([0, 1, 2].map(|a| lo[a].saturating_sub(1)));
    let hi_p = field.node_position([0, 1, 2].map(|a| (hi[a] + 1).min(res[a] - 1)));
    Aabb::new(lo_p, hi_p).ok()
}

/// Run the training loop on a pool of supervised rays.
pub fn train(cfg: &TrainConfig, pool: &RayPool, bbox: Aabb) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one ray".into()));
    }
    if pool.rays.len() != pool.colors.len() {
        return Err(Error::Shape("ray pool has mismatched rays and colors".into()));
    }
    let total = cfg.model.rank;
    let r0 = match cfg.mode {
        TrainMode::TrainTrains => 1,
        TrainMode::Baseline => total,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::random(&cfg.model, bbox, r0, &mut rng)?;
    let mut params = ParamSet::new(&model);
    let mut history = LossHistory::default();
    let mut smoother = GateSmoother::new(cfg.gate_window);
    let mut prev_gate: Option<f64> = None;
    let mut last_inc = 0usize;
    let mut rays = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);

    for it in 1..=cfg.max_iter {
        let mut reshaped = false;
        if let Some(step) = cfg.upsample.iter().find(|s| s.iteration == it) {
            model.field = model.field.upsample(step.resolution)?;
            reshaped = true;
        }
        if cfg.shrink_at.contains(&it) {
            if let Some(b) = occupied_bbox(&model, cfg.shrink_density) {
                model.field = model.field.shrink_bbox(b)?;
                reshaped = true;
            }
        }
        if reshaped {
            params = ParamSet::new(&model);
        }

        rays.clear();
        targets.clear();
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..pool.len());
            rays.push(pool.rays[i]);
            targets.push(pool.colors[i]);
        }
        let batch_seed: u64 = rng.gen();
        let masks = model.masks();
        let (loss, grads) = loss_and_grad(&model, &masks, &rays, &targets, &cfg.render, Some(batch_seed))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        params.grad = grads;
        params.adam_step(&mut model, &cfg.adam)?;
        history.entries.push(LossEntry {
            iteration: it,
            loss,
            r_d: model.rank.r_d,
        });

        let gate = smoother.push(loss);
        if cfg.mode == TrainMode::TrainTrains && model.rank.r_d < total && gate > 0.0 {
            if let Some(prev) = prev_gate {
                if should_increment(prev, gate, cfg.upsilon, it, last_inc, cfg.eta)? {
                    model.rank.r_d += 1;
                    model.rank.last_inc_iter = it;
                    last_inc = it;
                    history.increments.push((it, model.rank.r_d));
                    log::debug!("iteration {it}: rank -> {}", model.rank.r_d);
                }
            }
        }
        prev_gate = Some(gate);
        if it % 500 == 0 {
            log::info!("iteration {it}: loss {loss:.6}, rank {}/{total}", model.rank.r_d);
        }
    }
    let rank_never_incremented = cfg.mode == TrainMode::TrainTrains && total > 1 && history.increments.is_empty();
    if rank_never_incremented {
        log::warn!("the rank gate never fired; the model is effectively rank 1");
    }
    Ok(TrainOutcome {
        model,
        history,
        rank_never_incremented,
    })
}
