//! Procedural ground-truth scenes, an analytic reference renderer, and
//! on-disk datasets with a JSON camera manifest.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Aabb;
use crate::imageio::Image;
use crate::math::{add, dot, scale, sub, Vec3};
use crate::render::{Camera, Ray};

pub const MIN_REFERENCE_SAMPLES: usize = 64;
pub const MANIFEST_FILE: &str = "transforms.json";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    /// `peak · exp(-‖x − c‖² / 2s²)` with `s = scale[0]`.
    Blob,
    /// Constant `peak` inside the box of half extents `scale`.
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    pub scale: Vec3,
    pub peak: f64,
    pub albedo: Vec3,
}

impl Primitive {
    pub fn density(&self, x: Vec3) -> f64 {
        let d = sub(x, self.center);
        match self.kind {
            PrimitiveKind::Blob => {
                let s = self.scale[0];
                self.peak * (-dot(d, d) / (2.0 * s * s)).exp()
            }
            PrimitiveKind::Box => {
                if (0..3).all(|a| d[a].abs() <= self.scale[a]) {
                    self.peak
                } else {
                    0.0
                }
            }
        }
    }

    /// Integral of the density over the ray segment `[t0, t1]`: exact for
    /// boxes, midpoint rule for blobs.
    fn optical_depth(&self, ray: &Ray, t0: f64, t1: f64) -> f64 {
        match self.kind {
            PrimitiveKind::Blob => self.density(ray.at(0.5 * (t0 + t1))) * (t1 - t0),
            PrimitiveKind::Box => {
                let b = Aabb {
                    min: sub(self.center, self.scale),
                    max: add(self.center, self.scale),
                };
                match b.intersect_ray(ray.origin, ray.dir) {
                    Some((a, z)) => (z.min(t1) - a.max(t0)).max(0.0) * self.peak,
                    None => 0.0,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: String,
    pub seed: u64,
    pub bbox: Aabb,
    pub primitives: Vec<Primitive>,
}

/// Deterministic scene inside `[-1, 1]³`. Every fourth primitive is a box,
/// the rest are Gaussian blobs; all lie inside the central 90% of the box.
pub fn generate_scene(seed: u64, n_primitives: usize) -> Result<SyntheticScene> {
    if n_primitives == 0 {
        return Err(Error::InvalidArgument("a scene needs at least one primitive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = 0.9;
    let primitives = (0..n_primitives)
        .map(|i| {
            let albedo = [0, 1, 2].map(|_| rng.gen_range(0.05..0.95));
            if i % 4 == 3 {
                let half: Vec3 = [0, 1, 2].map(|_| rng.gen_range(0.15..0.3));
                let center = [0, 1, 2].map(|a| rng.gen_range(-(inner - half[a])..(inner - half[a])) * 0.7);
                Primitive {
                    kind: PrimitiveKind::Box,
                    center,
                    scale: half,
                    peak: rng.gen_range(8.0..20.0),
                    albedo,
                }
            } else {
                let s = rng.gen_range(0.12..0.22);
                let reach = inner - 3.0 * s;
                let center = [0, 1, 2].map(|_| rng.gen_range(-reach..reach));
                Primitive {
                    kind: PrimitiveKind::Blob,
                    center,
                    scale: [s; 3],
                    peak: rng.gen_range(15.0..40.0),
                    albedo,
                }
            }
        })
        .collect();
    Ok(SyntheticScene {
        id: format!("toy-{seed}-{n_primitives}"),
        seed,
        bbox: Aabb::cube(1.0),
        primitives,
    })
}

impl SyntheticScene {
    pub fn density(&self, x: Vec3) -> f64 {
        self.primitives.iter().map(|p| p.density(x)).sum()
    }

    /// Density-weighted albedo mix; black where the density vanishes.
    pub fn color(&self, x: Vec3) -> Vec3 {
        let mut c = [0.0; 3];
        let mut total = 0.0;
        for p in &self.primitives {
            let s = p.density(x);
            total += s;
            c = add(c, scale(p.albedo, s));
        }
        if total > 0.0 {
            scale(c, 1.0 / total)
        } else {
            c
        }
    }

    /// Dense ray march of the analytic field over the ray/bbox chord.
    pub fn trace(&self, ray: &Ray, samples: usize, background: Vec3) -> Vec3 {
        let Some((t0, t1)) = self.bbox.intersect_ray(ray.origin, ray.dir) else {
            return background;
        };
        let delta = (t1 - t0) / samples as f64;
        let mut color = [0.0; 3];
        let mut trans = 1.0;
        let mut taus = vec![0.0; self.primitives.len()];
        for k in 0..samples {
            let a = t0 + k as f64 * delta;
            let mut tau = 0.0;
            for (p, t) in self.primitives.iter().zip(taus.iter_mut()) {
                *t = p.optical_depth(ray, a, a + delta);
                tau += *t;
            }
            if tau <= 0.0 {
                continue;
            }
            let mut c = [0.0; 3];
            for (p, t) in self.primitives.iter().zip(&taus) {
                c = add(c, scale(p.albedo, t / tau));
            }
            let w = trans * -(-tau).exp_m1();
            color = add(color, scale(c, w));
            trans *= (-tau).exp();
        }
        add(color, scale(background, trans))
    }
}

/// Ground-truth image of the analytic scene.
pub fn render_reference(scene: &SyntheticScene, cam: &Camera, samples_per_ray: usize, background: Vec3) -> Result<Image> {
    if samples_per_ray < MIN_REFERENCE_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "reference renders need at least {MIN_REFERENCE_SAMPLES} samples per ray"
        )));
    }
    cam.validate()?;
    let w = cam.width;
    let pixels = (0..w * cam.height)
        .into_par_iter()
        .map(|p| {
            let ray = cam.ray_through((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            scene.trace(&ray, samples_per_ray, background)
        })
        .collect();
    Ok(Image {
        width: w,
        height: cam.height,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_primitives: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub width: u32,
    pub height: u32,
    pub camera_distance: f64,
    /// Horizontal field of view in radians.
    pub fov_x: f64,
    pub reference_samples: usize,
    pub background: Vec3,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_primitives: 4,
            n_train: 20,
            n_test: 5,
            width: 32,
            height: 32,
            camera_distance: 4.0,
            fov_x: PI / 3.0,
            reference_samples: 256,
            background: [1.0; 3],
        }
    }
}

/// Cameras on a golden-angle spiral around the origin, each looking at the
/// origin. `phase` rotates the spiral about the vertical axis.
pub fn spiral_cameras(n: usize, distance: f64, fov_x: f64, width: u32, height: u32, phase: f64) -> Result<Vec<Camera>> {
    let focal = 0.5 * width as f64 / (0.5 * fov_x).tan();
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64 + phase;
            let pos = [distance * r * phi.cos(), distance * r * phi.sin(), distance * z];
            Camera::look_at(focal, width, height, pos, [0.0; 3], [0.0, 0.0, 1.0])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    /// Relative to the dataset root.
    pub image_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub scene_id: String,
    pub width: u32,
    pub height: u32,
    pub background: Vec3,
    pub bbox: Aabb,
    pub views: Vec<View>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    file_path: String,
    split: Split,
    transform_matrix: [[f64; 4]; 4],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    scene_id: String,
    width: u32,
    height: u32,
    fl_x: f64,
    fl_y: f64,
    cx: f64,
    cy: f64,
    camera_angle_x: f64,
    background: Vec3,
    aabb: Aabb,
    frames: Vec<ManifestFrame>,
}

/// Render every view with the reference renderer and write images, the
/// camera manifest and the scene description under `root`.
pub fn make_dataset(scene: &SyntheticScene, cfg: &DatasetConfig, root: &Path) -> Result<Dataset> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::InvalidArgument("need at least one train and one test view".into()));
    }
    let phase = (scene.seed % 1000) as f64 * 0.001 * 2.0 * PI;
    let train = spiral_cameras(cfg.n_train, cfg.camera_distance, cfg.fov_x, cfg.width, cfg.height, phase)?;
    let test = spiral_cameras(cfg.n_test, cfg.camera_distance, cfg.fov_x, cfg.width, cfg.height, phase + 0.5)?;
    for dir in ["train", "test"] {
        std::fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
    }
    let mut views = Vec::new();
    for (split, cams) in [(Split::Train, train), (Split::Test, test)] {
        let dir = if split == Split::Train { "train" } else { "test" };
        for (i, camera) in cams.into_iter().enumerate() {
            let rel = PathBuf::from(dir).join(format!("r_{i:03}.png"));
            render_reference(scene, &camera, cfg.reference_samples, cfg.background)?.save(&root.join(&rel))?;
            views.push(View {
                camera,
                image_path: rel,
                split,
            });
        }
    }
    let ds = Dataset {
        root: root.to_path_buf(),
        scene_id: scene.id.clone(),
        width: cfg.width,
        height: cfg.height,
        background: cfg.background,
        bbox: scene.bbox,
        views,
    };
    ds.write_manifest()?;
    let scene_path = root.join(SCENE_FILE);
    let json = serde_json::to_string_pretty(scene).map_err(|e| Error::Manifest(e.to_string()))?;
    std::fs::write(&scene_path, json).map_err(|e| Error::io(scene_path, e))?;
    Ok(ds)
}

impl Dataset {
    pub fn write_manifest(&self) -> Result<()> {
        let cam = self
            .views
            .first()
            .ok_or_else(|| Error::Manifest("dataset has no views".into()))?
            .camera;
        let manifest = Manifest {
            scene_id: self.scene_id.clone(),
            width: self.width,
            height: self.height,
            fl_x: cam.focal,
            fl_y: cam.focal,
            cx: cam.cx,
            cy: cam.cy,
            camera_angle_x: 2.0 * (0.5 * self.width as f64 / cam.focal).atan(),
            background: self.background,
            aabb: self.bbox,
            frames: self
                .views
                .iter()
                .map(|v| ManifestFrame {
                    file_path: v.image_path.to_string_lossy().replace('\\', "/"),
                    split: v.split,
                    transform_matrix: v.camera.transform(),
                })
                .collect(),
        };
        let path = self.root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(root: &Path) -> Result<Dataset> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let views = m
            .frames
            .iter()
            .map(|f| {
                let t = f.transform_matrix;
                let camera = Camera {
                    focal: m.fl_x,
                    cx: m.cx,
                    cy: m.cy,
                    width: m.width,
                    height: m.height,
                    rotation: [0, 1, 2].map(|i| [t[i][0], t[i][1], t[i][2]]),
                    position: [t[0][3], t[1][3], t[2][3]],
                };
                camera.validate()?;
                Ok(View {
                    camera,
                    image_path: PathBuf::from(&f.file_path),
                    split: f.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            root: root.to_path_buf(),
            scene_id: m.scene_id,
            width: m.width,
            height: m.height,
            background: m.background,
            bbox: Aabb::new(m.aabb.min, m.aabb.max)?,
            views,
        };
        if ds.split(Split::Train).next().is_none() || ds.split(Split::Test).next().is_none() {
            return Err(Error::Manifest("manifest needs at least one train and one test view".into()));
        }
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }

    /// Cameras and images of one split, checked against the manifest size.
    pub fn load_split(&self, split: Split) -> Result<Vec<(Camera, Image)>> {
        self.split(split)
            .map(|v| {
                let img = Image::load(&self.root.join(&v.image_path))?;
                if img.width != v.camera.width || img.height != v.camera.height {
                    return Err(Error::Manifest(format!(
                        "{} is {}×{}, camera expects {}×{}",
                        v.image_path.display(),
                        img.width,
                        img.height,
                        v.camera.width,
                        v.camera.height
                    )));
                }
                Ok((v.camera, img))
            })
            .collect()
    }
}

/// Every pixel ray of a set of views with its target color.
#[derive(Debug, Clone, Default)]
pub struct RayPool {
    pub rays: Vec<Ray>,
    pub colors: Vec<Vec3>,
}

impl RayPool {
    pub fn from_views(views: &[(Camera, Image)]) -> Self {
        let mut pool = RayPool::default();
        for (cam, img) in views {
            for y in 0..img.height {
                for x in 0..img.width {
                    pool.rays.push(cam.ray_through(x as f64 + 0.5, y as f64 + 0.5));
                    pool.colors.push(img.get(x, y));
                }
            }
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front_camera(size: u32) -> Camera {
        Camera::look_at(size as f64, size, size, [0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(5, 4).unwrap(), generate_scene(5, 4).unwrap());
        assert_ne!(generate_scene(5, 4).unwrap(), generate_scene(6, 4).unwrap());
        assert!(generate_scene(1, 0).is_err());
    }

    #[test]
    fn primitives_stay_inside_inner_box() {
        for seed in 0..20 {
            let s = generate_scene(seed, 8).unwrap();
            for p in &s.primitives {
                let reach = match p.kind {
                    PrimitiveKind::Blob => p.scale[0],
                    PrimitiveKind::Box => 0.0,
                };
                for a in 0..3 {
                    let ext = if p.kind == PrimitiveKind::Box { p.scale[a] } else { reach };
                    assert!(p.center[a].abs() + ext <= 0.9);
                }
                assert!(p.peak >= 0.0);
                assert!(p.albedo.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }

    #[test]
    fn blob_density_matches_closed_form() {
        let mut scene = generate_scene(3, 1).unwrap();
        scene.primitives[0].center = [0.0; 3];
        let p = scene.primitives[0].clone();
        let s = p.scale[0];
        assert_eq!(scene.density([0.0; 3]), p.peak);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec3 = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            let expect = p.peak * (-r2 / (2.0 * s * s)).exp();
            assert!((scene.density(x) - expect).abs() <= 1e-12 * p.peak);
            assert!(scene.density(x) <= p.peak);
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = SyntheticScene {
            id: "empty".into(),
            seed: 0,
            bbox: Aabb::cube(1.0),
            primitives: vec![],
        };
        let img = render_reference(&scene, &front_camera(8), 64, [1.0, 0.5, 0.0]).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [1.0, 0.5, 0.0]));
        assert!(render_reference(&scene, &front_camera(8), 63, [1.0; 3]).is_err());
    }

    #[test]
    fn opaque_box_shows_albedo() {
        let scene = SyntheticScene {
            id: "box".into(),
            seed: 0,
            bbox: Aabb::cube(1.0),
            primitives: vec![Primitive {
                kind: PrimitiveKind::Box,
                center: [0.0; 3],
                scale: [0.8; 3],
                peak: 1e4,
                albedo: [0.2, 0.4, 0.6],
            }],
        };
        let img = render_reference(&scene, &front_camera(8), 64, [1.0; 3]).unwrap();
        let c = img.get(4, 4);
        for k in 0..3 {
            assert!((c[k] - [0.2, 0.4, 0.6][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_converges_with_sample_count() {
        let scene = generate_scene(7, 4).unwrap();
        let cams = spiral_cameras(3, 4.0, PI / 3.0, 32, 32, 0.0).unwrap();
        for cam in &cams {
            let a = render_reference(&scene, cam, 256, [1.0; 3]).unwrap();
            let b = render_reference(&scene, cam, 512, [1.0; 3]).unwrap();
            for (p, q) in a.pixels.iter().zip(&b.pixels) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() <= 1.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn spiral_cameras_are_orthonormal_and_aimed() {
        for cam in spiral_cameras(25, 4.0, PI / 3.0, 32, 32, 0.3).unwrap() {
            cam.validate().unwrap();
            let ray = cam.ray_through(cam.cx, cam.cy);
            let to_center = crate::math::normalize(scale(cam.position, -1.0));
            assert!((dot(ray.dir, to_center) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(2, 4).unwrap();
        let cfg = DatasetConfig {
            n_train: 3,
            n_test: 2,
            width: 8,
            height: 6,
            reference_samples: 64,
            ..DatasetConfig::default()
        };
        let ds = make_dataset(&scene, &cfg, dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.views.len(), 5);
        for (a, b) in ds.views.iter().zip(&back.views) {
            assert_eq!(a.image_path, b.image_path);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a.camera.rotation[i][j] - b.camera.rotation[i][j]).abs() <= 1e-12);
                }
                assert!((a.camera.position[i] - b.camera.position[i]).abs() <= 1e-12);
            }
        }
        let train = back.load_split(Split::Train).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(RayPool::from_views(&train).len(), 3 * 8 * 6);
    }
}
