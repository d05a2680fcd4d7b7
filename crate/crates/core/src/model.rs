use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::AppearanceDecoder;
use crate::error::{Error, Result};
use crate::grid::{Aabb, Masks, RankState, TensorField};
use crate::math::{softplus, Vec3};

/// Shape and initialization settings for a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub resolution: [usize; 3],
    pub rank: usize,
    pub app_feature_dim: usize,
    pub dir_freqs: usize,
    /// Added to the raw geometry value before softplus.
    pub density_shift: f64,
    pub init_scale: f64,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: [16, 16, 16],
            rank: 8,
            app_feature_dim: 27,
            dir_freqs: 0,
            density_shift: -5.0,
            init_scale: 0.1,
            epsilon: 1e-4,
        }
    }
}

/// A radiance field: VM grids, appearance decoder and the dynamic rank the
/// grids are masked with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub field: TensorField,
    pub decoder: AppearanceDecoder,
    pub density_shift: f64,
    pub rank: RankState,
}

impl Model {
    pub fn new(field: TensorField, decoder: AppearanceDecoder, density_shift: f64, rank: RankState) -> Result<Self> {
        if decoder.app_feature_dim() != field.app_feature_dim() {
            return Err(Error::Shape(format!(
                "decoder reads {} features, field produces {}",
                decoder.app_feature_dim(),
                field.app_feature_dim()
            )));
        }
        if rank.total != field.rank() {
            return Err(Error::Shape(format!(
                "rank state total {} differs from field rank {}",
                rank.total,
                field.rank()
            )));
        }
        Ok(Self {
            field,
            decoder,
            density_shift,
            rank,
        })
    }

    pub fn random(cfg: &ModelConfig, bbox: Aabb, r_d: usize, rng: &mut impl Rng) -> Result<Self> {
        let field = TensorField::random(cfg.resolution, bbox, cfg.rank, cfg.app_feature_dim, cfg.init_scale, rng)?;
        let decoder = AppearanceDecoder::random(cfg.app_feature_dim, cfg.dir_freqs, rng);
        let rank = RankState::new(r_d, cfg.rank, cfg.epsilon)?;
        Self::new(field, decoder, cfg.density_shift, rank)
    }

    pub fn masks(&self) -> Masks {
        Masks::from_state(&self.rank)
    }

    /// Activated density `softplus(raw + shift)`; zero outside the bounding box.
    pub fn density(&self, masks: &Masks, x: Vec3) -> f64 {
        match self.field.coord(x) {
            Some(c) => softplus(self.field.sample_geo_at(masks, &c) + self.density_shift),
            None => 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.field.param_count() + self.decoder.param_count()
    }
}
