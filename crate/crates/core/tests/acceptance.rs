//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimtensor::grid::{GridKind, Masks, TensorField};
use slimtensor::math::Vec3;
use slimtensor::render::RenderConfig;
use slimtensor::scene::{generate_scene, make_dataset, DatasetConfig, RayPool, Split};
use slimtensor::slim::{decode_checkpoint, encode_checkpoint, evaluate, factor_payload_bytes, rank_sweep, slim, SweepReport};
use slimtensor::theory::{check_lemma1, check_lemma2, theorem1_terms};
use slimtensor::train::{train, TrainConfig, TrainMode, TrainOutcome, UpsampleStep};
use slimtensor::{Aabb, RankState};

// Criterion 1
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(10);
// Criterion 2
const MASK_EPSILON: f64 = 1e-4;
const MASK_SAMPLES: usize = 1000;
const MASK_TIME_LIMIT: Duration = Duration::from_secs(10);
// Criterion 3
const DENSE_REL_TOL: f64 = 1e-12;
// Criterion 4
const TRAIN_ITERS: usize = 1000;
const DOMINANCE_DB: f64 = 3.0;
const FULL_RANK_GAP_DB: f64 = 1.0;
const TRAIN_TIME_LIMIT: Duration = Duration::from_secs(15 * 60);
// Criterion 5
const MONOTONE_SLACK_DB: f64 = 0.5;
// Criterion 6
const ABLATION_GAP_DB: f64 = 3.0;
const UNREACHABLE_UPSILON: f64 = 1e9;
const UNREACHABLE_ITERS: usize = 60;
// Criterion 7
const BOUND_SAMPLES: usize = 1000;
const BOUND_RAYS: usize = 200;
// Criterion 8
const FP16_PSNR_TOL_DB: f64 = 0.1;
const HALF_PAYLOAD_TOL: f64 = 0.02;
const CORRUPTION_PROBES: usize = 400;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Scene, views and the shared training runs.
struct Fixture {
    test_views: Vec<(slimtensor::render::Camera, slimtensor::imageio::Image)>,
    pool: RayPool,
    bbox: Aabb,
    scene_id: String,
    trains: TrainOutcome,
    baseline: TrainOutcome,
    trains_sweep: SweepReport,
    baseline_sweep: SweepReport,
    train_time: Duration,
    cfg: TrainConfig,
}

/// Default schedule compressed to `TRAIN_ITERS`.
fn acceptance_config(mode: TrainMode, upsilon: f64) -> TrainConfig {
    let base = TrainConfig::default();
    let scale = |it: usize| it * TRAIN_ITERS / base.max_iter;
    TrainConfig {
        max_iter: TRAIN_ITERS,
        mode,
        upsilon,
        upsample: base
            .upsample
            .iter()
            .map(|s| UpsampleStep {
                iteration: scale(s.iteration),
                resolution: s.resolution,
            })
            .collect(),
        shrink_at: base.shrink_at.iter().map(|&s| scale(s)).collect(),
        ..base
    }
}

fn build_fixture() -> Result<Fixture, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scene = generate_scene(0, DatasetConfig::default().n_primitives).map_err(|e| e.to_string())?;
    let ds = make_dataset(&scene, &DatasetConfig::default(), dir.path()).map_err(|e| e.to_string())?;
    let train_views = ds.load_split(Split::Train).map_err(|e| e.to_string())?;
    let test_views = ds.load_split(Split::Test).map_err(|e| e.to_string())?;
    let pool = RayPool::from_views(&train_views);
    let cfg = acceptance_config(TrainMode::TrainTrains, 0.4);
    let start = Instant::now();
    let trains = train(&cfg, &pool, ds.bbox).map_err(|e| e.to_string())?;
    let baseline = train(&acceptance_config(TrainMode::Baseline, 0.4), &pool, ds.bbox).map_err(|e| e.to_string())?;
    let trains_sweep = rank_sweep(&trains.model, &test_views, &cfg.render, &ds.scene_id, "trains").map_err(|e| e.to_string())?;
    let baseline_sweep = rank_sweep(&baseline.model, &test_views, &cfg.render, &ds.scene_id, "baseline").map_err(|e| e.to_string())?;
    let train_time = start.elapsed();
    Ok(Fixture {
        test_views,
        pool,
        bbox: ds.bbox,
        scene_id: ds.scene_id.clone(),
        trains,
        baseline,
        trains_sweep,
        baseline_sweep,
        train_time,
        cfg,
    })
}

fn criterion1() -> Verdict {
    let start = Instant::now();
    let model = small_model(3, 2, 1, 0.3, 11);
    let (rays, targets) = probe_rays(8, 3);
    let cfg = RenderConfig {
        n_samples: 12,
        ..RenderConfig::default()
    };
    let out = finite_difference_check(&model, &rays, &targets, &cfg, Some(9));
    let elapsed = start.elapsed();
    verdict(
        out.failures.is_empty() && out.checked == model.param_count() && elapsed < GRAD_TIME_LIMIT,
        format!(
            "{} parameters, {} above rel tol {FD_REL_TOL:e}, worst abs err {:.2e}, worst rel err above floor {:.2e}, {:.1}s",
            out.checked,
            out.failures.len(),
            out.worst_abs,
            out.worst_rel,
            elapsed.as_secs_f64()
        ),
    )
}

fn random_field(rank: usize, seed: u64) -> TensorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorField::random([8, 8, 8], Aabb::cube(1.0), rank, 27, 1.0, &mut rng).unwrap()
}

fn criterion2(fx: Option<&Fixture>) -> Verdict {
    let start = Instant::now();
    let mut fields = vec![("random", random_field(8, 5))];
    if let Some(fx) = fx {
        fields.push(("trained", fx.trains.model.field.clone()));
    }
    let mut details = Vec::new();
    let mut pass = fx.is_some();
    for (name, field) in &fields {
        let k = field.rank() / 2;
        let out = mask_truncation_check(field, k, MASK_EPSILON, MASK_SAMPLES, 17);
        pass &= out.violations == 0;
        details.push(format!("{name}: {} values, {} violations, worst ratio {:.3}", out.samples, out.violations, out.worst_ratio));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < MASK_TIME_LIMIT;
    verdict(pass, format!("{}; {:.1}s", details.join("; "), elapsed.as_secs_f64()))
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= DENSE_REL_TOL * a.abs().max(b.abs()).max(1.0)
}

fn criterion3() -> Verdict {
    let mut compared = 0usize;
    let mut mismatches = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (res, rank) in [([2, 2, 2], 1), ([3, 6, 4], 3), ([8, 8, 8], 2), ([5, 8, 7], 4)] {
        let field = TensorField::random(res, Aabb::new([-1.0, -0.6, -0.3], [0.8, 0.9, 1.1]).unwrap(), rank, 11, 1.0, &mut rng).unwrap();
        let masked = Masks::from_state(&RankState::new(1, rank, 0.05).unwrap());
        for masks in [Masks::ones(rank), masked] {
            let dg = dense_geo(&field, &masks);
            let da = dense_app(&field, &masks);
            let mut n = 0;
            for i in 0..res[0] {
                for j in 0..res[1] {
                    for k in 0..res[2] {
                        let g = field.eval_geo_masked(&masks, [i, j, k]).unwrap();
                        let a = field.eval_app_masked(&masks, [i, j, k]).unwrap();
                        compared += 1 + a.len();
                        mismatches += usize::from(!rel_close(g, dg[n]));
                        mismatches += a.iter().zip(&da[n]).filter(|(x, y)| !rel_close(**x, **y)).count();
                        n += 1;
                    }
                }
            }
            let bbox = *field.bbox();
            for _ in 0..100 {
                let x: Vec3 = [0, 1, 2].map(|a| rng.gen_range(bbox.min[a]..bbox.max[a]));
                let g = field.sample_trilinear(&masks, x, GridKind::Geometry).unwrap()[0];
                compared += 1;
                mismatches += usize::from(!rel_close(g, trilinear_dense(&field, &dg, x)));
                let a = field.sample_trilinear(&masks, x, GridKind::Appearance).unwrap();
                for (ch, v) in a.iter().enumerate() {
                    let column: Vec<f64> = da.iter().map(|node| node[ch]).collect();
                    compared += 1;
                    mismatches += usize::from(!rel_close(*v, trilinear_dense(&field, &column, x)));
                }
            }
        }
    }
    verdict(mismatches == 0, format!("{compared} values, {mismatches} beyond rel {DENSE_REL_TOL:e}"))
}

fn criterion4(fx: &Fixture) -> Verdict {
    let r_total = fx.cfg.model.rank;
    let mut pass = fx.train_time < TRAIN_TIME_LIMIT;
    let mut gaps = Vec::new();
    for r in 1..=r_total / 2 {
        let t = fx.trains_sweep.psnr_at(r).unwrap();
        let b = fx.baseline_sweep.psnr_at(r).unwrap();
        pass &= t >= b + DOMINANCE_DB;
        gaps.push(format!("r{r} {t:.2}/{b:.2}"));
    }
    let t_full = fx.trains_sweep.psnr_at(r_total).unwrap();
    let b_full = fx.baseline_sweep.psnr_at(r_total).unwrap();
    pass &= (t_full - b_full).abs() <= FULL_RANK_GAP_DB;
    verdict(
        pass,
        format!(
            "TRaIn/baseline dB {}; full rank {t_full:.2}/{b_full:.2}; increments {:?}; {:.0}s",
            gaps.join(", "),
            fx.trains.history.increments,
            fx.train_time.as_secs_f64()
        ),
    )
}

fn criterion5(fx: &Fixture) -> Verdict {
    let rows = &fx.trains_sweep.rows;
    let mut worst_drop = f64::NEG_INFINITY;
    for (i, lo) in rows.iter().enumerate() {
        for hi in &rows[i + 1..] {
            worst_drop = worst_drop.max(lo.psnr_db - hi.psnr_db);
        }
    }
    let curve: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.psnr_db)).collect();
    verdict(
        worst_drop <= MONOTONE_SLACK_DB,
        format!("curve [{}], largest drop {:.3} dB", curve.join(", "), worst_drop.max(0.0)),
    )
}

fn criterion6(fx: &Fixture) -> Result<Verdict, String> {
    let half = fx.cfg.model.rank / 2;
    let zero = train(&acceptance_config(TrainMode::TrainTrains, 0.0), &fx.pool, fx.bbox).map_err(|e| e.to_string())?;
    let zero_half = evaluate(&slim(&zero.model, half).map_err(|e| e.to_string())?, &fx.test_views, &fx.cfg.render).map_err(|e| e.to_string())?;
    let ref_half = fx.trains_sweep.psnr_at(half).unwrap();
    let stuck_cfg = TrainConfig {
        max_iter: UNREACHABLE_ITERS,
        upsilon: UNREACHABLE_UPSILON,
        upsample: Vec::new(),
        shrink_at: Vec::new(),
        ..fx.cfg.clone()
    };
    let stuck = train(&stuck_cfg, &fx.pool, fx.bbox).map_err(|e| e.to_string())?;
    let flagged = stuck.rank_never_incremented && stuck.model.rank.r_d == 1;
    Ok(verdict(
        zero_half <= ref_half - ABLATION_GAP_DB && flagged,
        format!(
            "r{half}: upsilon=0 {zero_half:.2} dB vs upsilon=0.4 {ref_half:.2} dB; upsilon={UNREACHABLE_UPSILON:e} flagged={} r_d={}",
            stuck.rank_never_incremented, stuck.model.rank.r_d
        ),
    ))
}

fn criterion7(fx: &Fixture) -> Result<Verdict, String> {
    let per_ray = BOUND_SAMPLES / BOUND_RAYS;
    let random = small_model(8, 8, 8, 1e-4, 31);
    let random_rays = probe_rays(BOUND_RAYS, 32).0;
    let random_targets: Vec<Vec3> = probe_rays(BOUND_RAYS, 33).1;
    let step = fx.pool.len() / BOUND_RAYS;
    let trained_rays: Vec<_> = (0..BOUND_RAYS).map(|i| fx.pool.rays[i * step]).collect();
    let trained_targets: Vec<_> = (0..BOUND_RAYS).map(|i| fx.pool.colors[i * step]).collect();
    let exact = RenderConfig {
        n_samples: 32,
        ..RenderConfig::default()
    };
    let mut pass = true;
    let mut details = Vec::new();
    for (name, model, rays, targets, cfg) in [
        ("random", &random, &random_rays, &random_targets, &exact),
        ("trained", &fx.trains.model, &trained_rays, &trained_targets, &fx.cfg.render),
    ] {
        let l1 = check_lemma1(model, rays, cfg, BOUND_SAMPLES, 41).map_err(|e| e.to_string())?;
        let l2 = check_lemma2(model, rays, targets, cfg, per_ray, 42).map_err(|e| e.to_string())?;
        for c in [&l1, &l2] {
            pass &= c.pass && c.samples >= BOUND_SAMPLES;
            details.push(format!("{name} {} {} samples {} violations margin {:.3}", c.name, c.samples, c.violations, c.margin_ratio));
        }
    }
    // Report-only: per-rank bound terms against the full-rank baseline.
    if let Ok(rep) = theorem1_terms(&fx.trains.model, &fx.baseline.model, &trained_rays, &trained_targets, &fx.cfg.render) {
        for row in &rep.rows {
            println!(
                "      rank {} observed {:.3e} distance {:.3e} bound {:.3e} ratio {:.3e}",
                row.rank, row.observed_grad, row.distance, row.bound, row.ratio
            );
        }
    }
    Ok(verdict(pass, details.join("; ")))
}

fn criterion8(fx: &Fixture) -> Result<Verdict, String> {
    let model = &fx.trains.model;
    let bytes = encode_checkpoint(model).map_err(|e| e.to_string())?;
    let back = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let p0 = fx.trains_sweep.psnr_at(model.field.rank()).unwrap();
    let p1 = evaluate(&back, &fx.test_views, &fx.cfg.render).map_err(|e| e.to_string())?;
    let half = slim(model, model.field.rank() / 2).map_err(|e| e.to_string())?;
    let ratio = factor_payload_bytes(&half) as f64 / factor_payload_bytes(model) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut accepted = 0;
    for _ in 0..CORRUPTION_PROBES {
        let mut bad = bytes.clone();
        let pos = rng.gen_range(0..bad.len());
        bad[pos] ^= 1 << rng.gen_range(0..8);
        accepted += usize::from(decode_checkpoint(&bad).is_ok());
    }
    accepted += usize::from(decode_checkpoint(&bytes[..bytes.len() - 1]).is_ok());
    Ok(verdict(
        (p1 - p0).abs() <= FP16_PSNR_TOL_DB && (ratio - 0.5).abs() <= HALF_PAYLOAD_TOL && accepted == 0,
        format!(
            "fp16 PSNR {p0:.3} -> {p1:.3} dB; half payload {:.2}%; {accepted}/{} corrupted loads accepted",
            100.0 * ratio,
            CORRUPTION_PROBES + 1
        ),
    ))
}

fn criterion9(fx: &Fixture) -> Result<Verdict, String> {
    let again = train(&fx.cfg, &fx.pool, fx.bbox).map_err(|e| e.to_string())?;
    let a = fx.trains.history.to_csv();
    let b = again.history.to_csv();
    Ok(verdict(
        a == b && again.model == fx.trains.model,
        format!("{} history rows, identical={}", again.history.entries.len(), a == b),
    ))
}

fn report(id: usize, name: &str, v: Verdict, failures: &mut usize) {
    if !v.pass {
        *failures += 1;
    }
    println!("{} [{id}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

fn flatten(r: Result<Verdict, String>) -> Verdict {
    r.unwrap_or_else(|e| verdict(false, format!("error: {e}")))
}

fn main() {
    let mut failures = 0;
    report(1, "gradient correctness", criterion1(), &mut failures);
    report(3, "dense-tensor oracle", criterion3(), &mut failures);
    let fx = build_fixture();
    report(2, "mask/truncation consistency", criterion2(fx.as_ref().ok()), &mut failures);
    match &fx {
        Ok(fx) => {
            println!("      scene {}", fx.scene_id);
            report(4, "slimmability dominance", criterion4(fx), &mut failures);
            report(5, "weak monotonicity", criterion5(fx), &mut failures);
            report(6, "upsilon ablation", flatten(criterion6(fx)), &mut failures);
            report(7, "theory bounds", flatten(criterion7(fx)), &mut failures);
            report(8, "checkpoint", flatten(criterion8(fx)), &mut failures);
            report(9, "determinism", flatten(criterion9(fx)), &mut failures);
        }
        Err(e) => {
            for (id, name) in [(4, "slimmability dominance"), (5, "weak monotonicity"), (6, "upsilon ablation"), (7, "theory bounds"), (8, "checkpoint"), (9, "determinism")] {
                report(id, name, verdict(false, format!("fixture failed: {e}")), &mut failures);
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
