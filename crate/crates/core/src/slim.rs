//! Test-time slimming, half-precision checkpoints, PSNR and rank sweeps.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      7 bytes  "SLMRF1\0"
//! endian     u8       1 = little-endian payload
//! res        3 × u32
//! rank       u32      R
//! r_d        u32
//! app_dim    u32
//! bbox       6 × f64  min xyz, max xyz
//! decoder    4 × u32  feature inputs, direction bands, hidden width, outputs
//! shift      f64      density shift
//! epsilon    f64
//! count      u64      number of half-precision values that follow
//! payload    count × f16
//! crc        u32      CRC-32 of every preceding byte
//! ```
//!
//! Payload order: geometry components, appearance components (each as three
//! lines then three planes), basis, then decoder `w1, b1, w2, b2`.

use std::path::Path;

use half::f16;
use rayon::prelude::*;

use crate::decoder::{AppearanceDecoder, HIDDEN, OUTPUTS};
use crate::error::{CheckpointError, Error, Result};
use crate::grad::{model_slices, model_slices_mut};
use crate::grid::{Aabb, RankState, TensorField};
use crate::imageio::Image;
use crate::model::Model;
use crate::render::{render_image, Camera, RenderConfig};

pub const MAGIC: &[u8; 7] = b"SLMRF1\0";
pub const LITTLE_ENDIAN_TAG: u8 = 1;
pub const HEADER_BYTES: usize = 7 + 1 + 4 * 6 + 8 * 6 + 4 * 4 + 8 * 3;
pub const CRC_BYTES: usize = 4;
pub const PSNR_CAP_DB: f64 = 99.0;

/// Keep the first `r` components of both grids and their basis columns.
pub fn slim(model: &Model, r: usize) -> Result<Model> {
    let field = model.field.truncate_rank(r)?;
    let rank = RankState {
        r_d: model.rank.r_d.min(r),
        total: r,
        epsilon: model.rank.epsilon,
        last_inc_iter: model.rank.last_inc_iter,
    };
    Model::new(field, model.decoder.clone(), model.density_shift, rank)
}

/// Bytes taken by the grid factors and basis in a checkpoint.
pub fn factor_payload_bytes(model: &Model) -> usize {
    2 * model.field.param_count()
}

pub fn checkpoint_size(model: &Model) -> usize {
    HEADER_BYTES + 2 * model.param_count() + CRC_BYTES
}

/// Every parameter rounded through half precision.
pub fn fp16_rounded(model: &Model) -> Model {
    let mut m = model.clone();
    for s in model_slices_mut(&mut m) {
        s.iter_mut().for_each(|v| *v = f16::from_f64(*v).to_f64());
    }
    m
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let field = &model.field;
    let mut out = Vec::with_capacity(checkpoint_size(model));
    out.extend_from_slice(MAGIC);
    out.push(LITTLE_ENDIAN_TAG);
    let u32s = |out: &mut Vec<u8>, vals: &[usize]| {
        for &v in vals {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    };
    let res = field.resolution();
    u32s(&mut out, &res);
    u32s(&mut out, &[field.rank(), model.rank.r_d, field.app_feature_dim()]);
    let b = field.bbox();
    for v in b.min.iter().chain(&b.max) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let d = &model.decoder;
    u32s(&mut out, &[d.app_feature_dim(), d.dir_freqs(), HIDDEN, OUTPUTS]);
    out.extend_from_slice(&model.density_shift.to_le_bytes());
    out.extend_from_slice(&model.rank.epsilon.to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_BYTES);
    for s in model_slices(model) {
        for &v in s {
            let h = f16::from_f64(v);
            if !v.is_finite() || h.is_infinite() {
                return Err(CheckpointError::Overflow(v).into());
            }
            out.extend_from_slice(&h.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos + n;
        if end > self.data.len() {
            return Err(CheckpointError::Truncated {
                needed: end,
                have: self.data.len(),
            });
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Model> {
    let mut r = Reader { data, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let tag = r.take(1)?[0];
    if tag != LITTLE_ENDIAN_TAG {
        return Err(CheckpointError::Endianness(tag).into());
    }
    let res = [r.u32()?, r.u32()?, r.u32()?];
    let (rank, r_d, app_dim) = (r.u32()?, r.u32()?, r.u32()?);
    let min = [r.f64()?, r.f64()?, r.f64()?];
    let max = [r.f64()?, r.f64()?, r.f64()?];
    let (dec_in, dir_freqs, hidden, outputs) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let shift = r.f64()?;
    let epsilon = r.f64()?;
    let count = r.u64()?;
    let header = |m: String| Error::from(CheckpointError::Header(m));
    if hidden != HIDDEN || outputs != OUTPUTS || dec_in != app_dim {
        return Err(header(format!("unsupported decoder shape {dec_in}/{hidden}/{outputs}")));
    }
    if res.iter().any(|&n| !(2..=4096).contains(&n)) || rank == 0 || rank > 1 << 16 || dir_freqs > 64 || app_dim > 1 << 16 {
        return Err(header(format!("implausible dimensions {res:?}, rank {rank}")));
    }
    let bbox = Aabb::new(min, max).map_err(|e| header(e.to_string()))?;
    let field = TensorField::zeros(res, bbox, rank, app_dim).map_err(|e| header(e.to_string()))?;
    let decoder = AppearanceDecoder::zeros(app_dim, dir_freqs);
    let state = RankState::new(r_d, rank, epsilon).map_err(|e| header(e.to_string()))?;
    let mut model = Model::new(field, decoder, shift, state).map_err(|e| header(e.to_string()))?;
    if count != model.param_count() as u64 {
        return Err(header(format!(
            "payload holds {count} values, header shapes need {}",
            model.param_count()
        )));
    }
    let payload = r.take(2 * model.param_count())?;
    let body_end = r.pos;
    let stored = u32::from_le_bytes(r.take(CRC_BYTES)?.try_into().unwrap());
    let computed = crc32fast::hash(&data[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed }.into());
    }
    if r.pos != data.len() {
        return Err(header(format!("{} trailing bytes", data.len() - r.pos)));
    }
    let mut vals = payload.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64());
    for s in model_slices_mut(&mut model) {
        for v in s.iter_mut() {
            *v = vals.next().expect("count checked");
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(image: &Image, reference: &Image) -> Result<f64> {
    if image.width != reference.width || image.height != reference.height {
        return Err(Error::Shape(format!(
            "{}×{} image vs {}×{} reference",
            image.width, image.height, reference.width, reference.height
        )));
    }
    let n = image.pixels.len() * 3;
    if n == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let sq: f64 = image
        .pixels
        .iter()
        .zip(&reference.pixels)
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).powi(2)))
        .sum();
    let mse = sq / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Mean PSNR of deterministic renders against the given views.
pub fn evaluate(model: &Model, views: &[(Camera, Image)], cfg: &RenderConfig) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to evaluate".into()));
    }
    let mut total = 0.0;
    for (cam, reference) in views {
        total += psnr(&render_image(model, cam, cfg, None), reference)?;
    }
    Ok(total / views.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub rank: usize,
    pub psnr_db: f64,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub scene_id: String,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,psnr_db,bytes\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.4},{}\n", r.rank, r.psnr_db, r.bytes));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn psnr_at(&self, rank: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.rank == rank).map(|r| r.psnr_db)
    }
}

/// Short hex digest identifying a configuration text.
pub fn config_hash(text: &str) -> String {
    format!("{:08x}", crc32fast::hash(text.as_bytes()))
}

/// Slim to every rank `1..=R` and evaluate each on the views.
pub fn rank_sweep(
    model: &Model,
    views: &[(Camera, Image)],
    cfg: &RenderConfig,
    scene_id: &str,
    config_hash: &str,
) -> Result<SweepReport> {
    let rows = (1..=model.field.rank())
        .into_par_iter()
        .map(|r| {
            let m = slim(model, r)?;
            Ok(SweepRow {
                rank: r,
                psnr_db: evaluate(&m, views, cfg)?,
                bytes: checkpoint_size(&m),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        scene_id: scene_id.to_string(),
        config_hash: config_hash.to_string(),
        rows,
    })
}
