//! Toy scenes with transient occluders, and the on-disk scene directory
//! format (`scene.json` plus 8-bit PNGs).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{add, dot, norm, scale, sub, Camera, Ray, Vec3};
use crate::raster::Image;
use crate::{Error, Result};

/// Name of the manifest inside a scene directory.
pub const MANIFEST: &str = "scene.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Box { center: Vec3, half_extents: Vec3 },
}

impl Shape {
    /// Nearest intersection distance along `ray` in `[t_min, t_max]`.
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = sub(ray.origin, center);
                let b = dot(oc, ray.direction);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t >= t_min && t <= t_max)
            }
            Shape::Box { center, half_extents } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    let (o, d) = (ray.origin[a] - center[a], ray.direction[a]);
                    let h = half_extents[a];
                    if d.abs() < 1e-15 {
                        if o.abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = ((-h - o) / d, (h - o) / d);
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
                if lo > hi {
                    return None;
                }
                [lo, hi].into_iter().find(|&t| t >= t_min && t <= t_max)
            }
        }
    }

    /// Center and radius of a bounding sphere.
    pub fn bounds(&self) -> (Vec3, f64) {
        match *self {
            Shape::Sphere { center, radius } => (center, radius),
            Shape::Box { center, half_extents } => (center, norm(half_extents)),
        }
    }
}

/// A flat-shaded primitive with an optional 3D checker texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub albedo: [f64; 3],
    /// Second checker color; the texture is off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub albedo2: Option<[f64; 3]>,
    /// Checker cell size in scene units.
    #[serde(default = "default_checker")]
    pub checker: f64,
    /// Views in which the primitive appears; all views when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_in: Option<Vec<usize>>,
}

fn default_checker() -> f64 {
    0.25
}

impl Primitive {
    pub fn color_at(&self, x: Vec3) -> [f64; 3] {
        match self.albedo2 {
            None => self.albedo,
            Some(other) => {
                let cell: i64 = x.iter().map(|c| (c / self.checker).floor() as i64).sum();
                if cell.rem_euclid(2) == 0 {
                    self.albedo
                } else {
                    other
                }
            }
        }
    }

    fn visible_in_view(&self, view: usize) -> bool {
        self.visible_in.as_ref().is_none_or(|v| v.contains(&view))
    }
}

/// Cameras evenly spaced on a circle around `target`, looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
    #[serde(default)]
    pub target: Vec3,
    /// Uniform random azimuth perturbation per camera, drawn from the seed.
    #[serde(default)]
    pub azimuth_jitter_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneSpec {
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    /// Transient primitives, normally restricted to a few views.
    #[serde(default)]
    pub occluders: Vec<Primitive>,
    pub cameras: CameraRing,
    pub width: usize,
    pub height: usize,
    /// Views withheld from training.
    #[serde(default)]
    pub holdout: Vec<usize>,
    /// Supersampling factor per axis for anti-aliased ground truth.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_supersample() -> usize {
    2
}

impl ToySceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        Self::from_json(&text).map_err(|e| Error::Scene(format!("{}: {e}", path.display())))
    }

    /// Textured sphere and box on a ring of 10 cameras (views 2 and 7 held
    /// out), with a transient occluder in front of the object in four
    /// training views.
    pub fn occluder_preset(size: usize, seed: u64) -> Self {
        let cameras = CameraRing {
            count: 10,
            radius: 3.2,
            elevation_deg: 25.0,
            fov_deg: 40.0,
            near: 1.6,
            far: 4.8,
            target: [0.0; 3],
            azimuth_jitter_deg: 0.0,
        };
        let primitives = vec![
            Primitive {
                shape: Shape::Sphere { center: [0.0, 0.0, 0.15], radius: 0.55 },
                albedo: [0.85, 0.3, 0.2],
                albedo2: Some([0.95, 0.85, 0.3]),
                checker: 0.3,
                visible_in: None,
            },
            Primitive {
                shape: Shape::Box { center: [0.35, -0.45, -0.35], half_extents: [0.3, 0.25, 0.2] },
                albedo: [0.2, 0.45, 0.85],
                albedo2: Some([0.8, 0.9, 0.95]),
                checker: 0.2,
                visible_in: None,
            },
            Primitive {
                shape: Shape::Box { center: [0.0, 0.0, -0.6], half_extents: [0.9, 0.9, 0.05] },
                albedo: [0.35, 0.6, 0.3],
                albedo2: Some([0.15, 0.3, 0.15]),
                checker: 0.3,
                visible_in: None,
            },
        ];
        let ring = ring_eyes(&cameras, seed);
        let palette = [[0.95, 0.95, 0.95], [0.1, 0.1, 0.1], [0.2, 0.9, 0.9], [0.9, 0.2, 0.9]];
        let occluders = [0usize, 3, 5, 8]
            .iter()
            .zip(palette)
            .map(|(&view, color)| {
                // Between the camera and the object, slightly above the axis.
                let eye = ring[view];
                let center = add(scale(eye, 0.4), [0.0, 0.0, 0.1]);
                Primitive {
                    shape: Shape::Sphere { center, radius: 0.22 },
                    albedo: color,
                    albedo2: None,
                    checker: default_checker(),
                    visible_in: Some(vec![view]),
                }
            })
            .collect();
        Self {
            primitives,
            occluders,
            cameras,
            width: size,
            height: size,
            holdout: vec![2, 7],
            supersample: 2,
            seed,
        }
    }

    pub fn build_cameras(&self) -> Result<Vec<Camera>> {
        let ring = &self.cameras;
        if ring.count == 0 || self.width < 2 || self.height < 2 || self.supersample == 0 {
            return Err(Error::Scene("need cameras, an image of at least 2x2 and supersample >= 1".into()));
        }
        ring_eyes(ring, self.seed)
            .into_iter()
            .map(|eye| {
                Camera::look_at(
                    eye,
                    ring.target,
                    [0.0, 0.0, 1.0],
                    ring.fov_deg.to_radians(),
                    self.width,
                    self.height,
                    ring.near,
                    ring.far,
                )
            })
            .collect()
    }

    fn validate(&self, cameras: &[Camera]) -> Result<()> {
        for &h in &self.holdout {
            if h >= cameras.len() {
                return Err(Error::Scene(format!("holdout view {h} does not exist")));
            }
        }
        for (i, p) in self.primitives.iter().chain(&self.occluders).enumerate() {
            let (center, radius) = p.shape.bounds();
            for (v, cam) in cameras.iter().enumerate() {
                if !p.visible_in_view(v) {
                    continue;
                }
                let d = norm(sub(center, cam.center()));
                if d - radius < cam.near || d + radius > cam.far {
                    return Err(Error::Scene(format!(
                        "primitive {i} leaves the [{}, {}] depth range of camera {v}",
                        cam.near, cam.far
                    )));
                }
            }
            if let Some(views) = &p.visible_in {
                if let Some(v) = views.iter().find(|&&v| v >= cameras.len()) {
                    return Err(Error::Scene(format!("primitive {i} refers to missing view {v}")));
                }
            }
        }
        Ok(())
    }

    /// Ground-truth image of view `view`: flat albedo of the nearest visible
    /// surface, black where nothing is hit, averaged over a supersampling
    /// grid.
    pub fn render_view(&self, cam: &Camera, view: usize) -> Result<Image> {
        let s = self.supersample;
        let prims: Vec<&Primitive> = self
            .primitives
            .iter()
            .chain(&self.occluders)
            .filter(|p| p.visible_in_view(view))
            .collect();
        let mut img = Image::zeros(cam.width, cam.height, 3);
        let inv = 1.0 / (s * s) as f64;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let mut acc = [0.0; 3];
                for sy in 0..s {
                    for sx in 0..s {
                        let u = x as f64 + (sx as f64 + 0.5) / s as f64 - 0.5;
                        let v = y as f64 + (sy as f64 + 0.5) / s as f64 - 0.5;
                        let ray = cam.generate_ray(u, v)?;
                        let hit = prims
                            .iter()
                            .filter_map(|p| p.shape.intersect(&ray, cam.near, cam.far).map(|t| (t, p)))
                            .min_by(|a, b| a.0.total_cmp(&b.0));
                        if let Some((t, p)) = hit {
                            let c = p.color_at(ray.at(t));
                            for ch in 0..3 {
                                acc[ch] += c[ch];
                            }
                        }
                    }
                }
                let px = img.pixel_mut(x, y);
                for ch in 0..3 {
                    px[ch] = acc[ch] * inv;
                }
            }
        }
        Ok(img)
    }

    /// Renders all views and writes a scene directory.
    pub fn generate(&self, out_dir: &Path) -> Result<Scene> {
        let cameras = self.build_cameras()?;
        self.validate(&cameras)?;
        fs::create_dir_all(out_dir).map_err(Error::at(out_dir))?;
        let mut images = Vec::with_capacity(cameras.len());
        for (i, cam) in cameras.iter().enumerate() {
            images.push(self.render_view(cam, i)?);
        }
        let scene = Scene {
            dir: out_dir.to_path_buf(),
            cameras,
            images,
            holdout: self.holdout.clone(),
        };
        scene.save()?;
        Ok(scene)
    }
}

fn ring_eyes(ring: &CameraRing, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elev = ring.elevation_deg.to_radians();
    (0..ring.count)
        .map(|i| {
            let jitter = if ring.azimuth_jitter_deg > 0.0 {
                rng.random_range(-1.0..1.0) * ring.azimuth_jitter_deg.to_radians()
            } else {
                0.0
            };
            let az = i as f64 / ring.count as f64 * std::f64::consts::TAU + jitter;
            add(
                ring.target,
                scale([az.cos() * elev.cos(), az.sin() * elev.cos(), elev.sin()], ring.radius),
            )
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    #[serde(rename = "K")]
    k: Vec<f64>,
    world_to_camera: Vec<f64>,
    near: f64,
    far: f64,
}

/// A novel camera: `{"K": [9], "world_to_camera": [16], "width", "height", "near", "far"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseFile {
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub world_to_camera: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl PoseFile {
    pub fn from_camera(cam: &Camera) -> Self {
        Self {
            k: cam.intrinsics().to_vec(),
            world_to_camera: cam.world_to_camera().to_vec(),
            width: cam.width,
            height: cam.height,
            near: cam.near,
            far: cam.far,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let k: [f64; 9] = self.k.as_slice().try_into().map_err(|_| Error::Camera("K needs 9 values".into()))?;
        let p: [f64; 16] = self
            .world_to_camera
            .as_slice()
            .try_into()
            .map_err(|_| Error::Camera("world_to_camera needs 16 values".into()))?;
        Camera::from_matrices(&k, &p, self.width, self.height, self.near, self.far)
    }

    pub fn load(path: &Path) -> Result<Camera> {
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        let pose: Self =
            serde_json::from_str(&text).map_err(|e| Error::Camera(format!("{}: {e}", path.display())))?;
        pose.camera()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::at(path))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    images: Vec<ManifestEntry>,
    #[serde(default)]
    holdout: Vec<usize>,
}

/// Posed images of one scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub dir: PathBuf,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub holdout: Vec<usize>,
}

impl Scene {
    pub fn image_name(i: usize) -> String {
        format!("view_{i:03}.png")
    }

    pub fn save(&self) -> Result<()> {
        let mut entries = Vec::with_capacity(self.cameras.len());
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            let name = Self::image_name(i);
            img.save_png(&self.dir.join(&name))?;
            entries.push(ManifestEntry {
                path: name,
                k: cam.intrinsics().to_vec(),
                world_to_camera: cam.world_to_camera().to_vec(),
                near: cam.near,
                far: cam.far,
            });
        }
        let manifest = Manifest {
            images: entries,
            holdout: self.holdout.clone(),
        };
        let path = self.dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(Error::at(&path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Scene(format!("{}: {e}", path.display())))?;
        if manifest.images.is_empty() {
            return Err(Error::Scene(format!("{} lists no images", path.display())));
        }
        let mut cameras = Vec::new();
        let mut images = Vec::new();
        for entry in &manifest.images {
            let image = Image::load_png(&dir.join(&entry.path))?;
            let k: [f64; 9] = entry
                .k
                .as_slice()
                .try_into()
                .map_err(|_| Error::Scene(format!("{}: K needs 9 values", entry.path)))?;
            let p: [f64; 16] = entry
                .world_to_camera
                .as_slice()
                .try_into()
                .map_err(|_| Error::Scene(format!("{}: world_to_camera needs 16 values", entry.path)))?;
            cameras.push(Camera::from_matrices(&k, &p, image.width, image.height, entry.near, entry.far)?);
            images.push(image);
        }
        if let Some(h) = manifest.holdout.iter().find(|&&h| h >= cameras.len()) {
            return Err(Error::Scene(format!("holdout view {h} does not exist")));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            cameras,
            images,
            holdout: manifest.holdout,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Views used for training (and as sources), in index order.
    pub fn training_views(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| !self.holdout.contains(i)).collect()
    }
}
