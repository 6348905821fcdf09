//! Pinhole cameras, rays, projection, bilinear sampling and depth sampling.
//!
//! Conventions: cameras look down their +z axis with +x right and +y down;
//! pixel `(0, 0)` is the center of the top-left texel.

use rand::Rng;

use crate::raster::Image;
use crate::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Pinhole camera with zero skew.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Builds a camera from a row-major 3x3 intrinsic matrix and a row-major
    /// 4x4 world-to-camera transform.
    pub fn from_matrices(
        k: &[f64; 9],
        world_to_camera: &[f64; 16],
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if k[1] != 0.0 || k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0 || k[8] != 1.0 {
            return Err(Error::Camera(format!(
                "intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]], got {k:?}"
            )));
        }
        let p = world_to_camera;
        if p[12] != 0.0 || p[13] != 0.0 || p[14] != 0.0 || p[15] != 1.0 {
            return Err(Error::Camera("world_to_camera last row must be [0,0,0,1]".into()));
        }
        let cam = Camera {
            fx: k[0],
            fy: k[4],
            cx: k[2],
            cy: k[5],
            rotation: [[p[0], p[1], p[2]], [p[4], p[5], p[6]], [p[8], p[9], p[10]]],
            translation: [p[3], p[7], p[11]],
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` roughly upward in the
    /// image and a horizontal field of view of `fov_x` radians.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_x: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let right = cross(forward, up);
        if norm(right) < 1e-9 {
            return Err(Error::Camera("up vector parallel to viewing direction".into()));
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = scale(mat_vec(&rotation, eye), -1.0);
        let focal = 0.5 * width as f64 / (0.5 * fov_x).tan();
        let cam = Camera {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Camera(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let col_dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (col_dot - expected).abs() >= 1e-6 {
                    return Err(Error::Camera("rotation block is not orthonormal".into()));
                }
            }
        }
        if self.fx == 0.0 || self.fy == 0.0 || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Camera("singular intrinsics".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }

    pub fn world_to_camera(&self) -> [f64; 16] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2], 0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        scale(mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    /// Unit viewing direction of the optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation[2]
    }

    /// Back-projects a pixel into a world-space ray from the camera center.
    pub fn generate_ray(&self, u: f64, v: f64) -> Result<Ray> {
        if self.fx == 0.0 || self.fy == 0.0 {
            return Err(Error::Camera("singular intrinsics".into()));
        }
        let d_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        Ok(Ray {
            origin: self.center(),
            direction: normalize(mat_t_vec(&self.rotation, d_cam)),
        })
    }

    pub fn project(&self, x: Vec3) -> Projection {
        let c = add(mat_vec(&self.rotation, x), self.translation);
        let depth = c[2];
        Projection {
            pixel: [
                self.fx * c[0] / depth + self.cx,
                self.fy * c[1] / depth + self.cy,
            ],
            depth,
            in_front: depth > 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub in_front: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

/// Texel indices (`y * width + x`) and weights of a bilinear lookup, or
/// `None` when any of the four texels lies outside the image.
pub fn bilinear_taps(width: usize, height: usize, u: f64, v: f64) -> Option<([usize; 4], [f64; 4])> {
    if width < 2 || height < 2 {
        return None;
    }
    let (max_u, max_v) = ((width - 1) as f64, (height - 1) as f64);
    if !(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v) {
        return None;
    }
    let x0 = (u.floor() as usize).min(width - 2);
    let y0 = (v.floor() as usize).min(height - 2);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let i00 = y0 * width + x0;
    Some((
        [i00, i00 + 1, i00 + width, i00 + width + 1],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    ))
}

/// Bilinear interpolation at `(u, v)`; out-of-image lookups return zeros
/// and `false`.
pub fn bilinear_sample(image: &Image, u: f64, v: f64) -> (Vec<f64>, bool) {
    let c = image.channels;
    match bilinear_taps(image.width, image.height, u, v) {
        None => (vec![0.0; c], false),
        Some((idx, w)) => {
            let mut out = vec![0.0; c];
            for q in 0..4 {
                let texel = &image.data[idx[q] * c..(idx[q] + 1) * c];
                for (o, t) in out.iter_mut().zip(texel) {
                    *o += w[q] * t;
                }
            }
            (out, true)
        }
    }
}

/// Sorted depths along a ray within `[near, far]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDepths {
    pub t: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl SampleDepths {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn is_sorted_within_bounds(&self) -> bool {
        self.t.windows(2).all(|w| w[0] <= w[1])
            && self.t.iter().all(|&t| t >= self.near && t <= self.far)
    }
}

/// One draw per equal-width bin of `[near, far]`; with no `rng`, every
/// draw sits at its bin midpoint.
pub fn stratified_sample<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    rng: Option<&mut R>,
) -> Result<SampleDepths> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples per ray, got {n}")));
    }
    if !(near.is_finite() && far.is_finite() && near < far) {
        return Err(Error::Config(format!("invalid depth bounds [{near}, {far}]")));
    }
    let width = (far - near) / n as f64;
    let t = match rng {
        None => (0..n).map(|i| near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..n)
            .map(|i| (near + (i as f64 + rng.random::<f64>()) * width).min(far))
            .collect(),
    };
    Ok(SampleDepths { t, near, far })
}

/// Floor added to normalized compositing weights before building the CDF.
pub const IMPORTANCE_FLOOR: f64 = 1e-5;

/// Draws `n_extra` depths from the piecewise-constant density over the
/// coarse bins (bin `i` spans the midpoints around coarse sample `i`,
/// clipped to the ray bounds) and returns the sorted union with the coarse
/// depths. With no `rng` the draws are stratified quantiles.
pub fn importance_sample<R: Rng + ?Sized>(
    coarse: &SampleDepths,
    weights: &[f64],
    n_extra: usize,
    rng: Option<&mut R>,
) -> Result<SampleDepths> {
    let n = coarse.len();
    if weights.len() != n {
        return Err(Error::Config(format!(
            "{} weights for {n} coarse samples",
            weights.len()
        )));
    }
    if n == 0 {
        return Err(Error::Config("no coarse samples".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config("compositing weights must be finite and non-negative".into()));
    }
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(coarse.near);
    for w in coarse.t.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(coarse.far);

    let total: f64 = weights.iter().sum();
    let mut pdf: Vec<f64> = weights
        .iter()
        .map(|&w| if total > 0.0 { w / total } else { 0.0 } + IMPORTANCE_FLOOR)
        .collect();
    let mass: f64 = pdf.iter().sum();
    assert!(mass > 0.0, "floored importance weights cannot sum to zero");
    for p in &mut pdf {
        *p /= mass;
    }
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p;
        cdf.push(acc);
    }

    let invert = |u: f64| -> f64 {
        let u = u.clamp(0.0, 1.0);
        // last bin whose lower CDF bound is <= u
        let bin = cdf[1..n].partition_point(|&c| c <= u);
        let frac = ((u - cdf[bin]) / pdf[bin]).clamp(0.0, 1.0);
        (edges[bin] + frac * (edges[bin + 1] - edges[bin])).clamp(coarse.near, coarse.far)
    };
    let mut t = coarse.t.clone();
    match rng {
        None => t.extend((0..n_extra).map(|j| invert((j as f64 + 0.5) / n_extra as f64))),
        Some(rng) => t.extend((0..n_extra).map(|_| invert(rng.random::<f64>()))),
    }
    t.sort_by(f64::total_cmp);
    Ok(SampleDepths {
        t,
        near: coarse.near,
        far: coarse.far,
    })
}

/// Picks `n` source cameras for `target` by smallest angle between optical
/// axes (ties broken by center distance), after skipping the `skip_nearest`
/// closest. Returns indices into `candidates`.
pub fn select_source_views(
    target: &Camera,
    candidates: &[&Camera],
    n: usize,
    skip_nearest: usize,
) -> Vec<usize> {
    let axis = target.optical_axis();
    let center = target.center();
    let mut order: Vec<(f64, f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let angle = dot(axis, cam.optical_axis()).clamp(-1.0, 1.0).acos();
            (angle, norm(sub(center, cam.center())), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    order
        .into_iter()
        .skip(skip_nearest)
        .take(n)
        .map(|(_, _, i)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: [f64; 16] = [
        1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
    ];

    fn canonical(fx: f64) -> Camera {
        let k = [fx, 0.0, 0.0, 0.0, fx, 0.0, 0.0, 0.0, 1.0];
        Camera::from_matrices(&k, &IDENTITY, 4, 4, 0.1, 10.0).unwrap()
    }

    fn assert_vec(a: Vec3, b: Vec3) {
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn canonical_rays() {
        let cam = canonical(1.0);
        let ray = cam.generate_ray(0.0, 0.0).unwrap();
        assert_vec(ray.origin, [0.0, 0.0, 0.0]);
        assert_vec(ray.direction, [0.0, 0.0, 1.0]);
        let ray = cam.generate_ray(1.0, 0.0).unwrap();
        let s = 0.5f64.sqrt();
        assert_vec(ray.direction, [s, 0.0, s]);
    }

    #[test]
    fn translated_camera_ray() {
        let mut pose = IDENTITY;
        pose[11] = 2.0; // camera at z = -2
        let k = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let cam = Camera::from_matrices(&k, &pose, 4, 4, 0.1, 10.0).unwrap();
        let ray = cam.generate_ray(0.0, 0.0).unwrap();
        assert_vec(ray.origin, [0.0, 0.0, -2.0]);
        assert_vec(ray.direction, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn projection_cases() {
        let p = canonical(1.0).project([0.0, 0.0, 1.0]);
        assert_eq!(p.pixel, [0.0, 0.0]);
        assert_eq!(p.depth, 1.0);
        assert!(p.in_front);
        assert_eq!(canonical(2.0).project([0.5, 0.0, 1.0]).pixel, [1.0, 0.0]);
        assert!(!canonical(1.0).project([0.0, 0.0, -1.0]).in_front);
    }

    #[test]
    fn camera_validation() {
        let k = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(Camera::from_matrices(&k, &IDENTITY, 4, 4, 1.0, 0.5).is_err());
        assert!(Camera::from_matrices(&k, &IDENTITY, 4, 4, 0.0, 1.0).is_err());
        let mut skewed = IDENTITY;
        skewed[1] = 0.3;
        assert!(Camera::from_matrices(&k, &skewed, 4, 4, 0.1, 1.0).is_err());
        let singular = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(Camera::from_matrices(&singular, &IDENTITY, 4, 4, 0.1, 1.0).is_err());
        let mut cam = canonical(1.0);
        cam.fx = 0.0;
        assert!(cam.generate_ray(0.0, 0.0).is_err());
    }

    #[test]
    fn look_at_sees_its_target() {
        let cam = Camera::look_at([3.0, 1.0, -2.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.8, 32, 24, 1.0, 8.0)
            .unwrap();
        let p = cam.project([0.0, 0.0, 0.0]);
        assert!((p.pixel[0] - cam.cx).abs() < 1e-9 && (p.pixel[1] - cam.cy).abs() < 1e-9);
        // world up appears above center, i.e. at smaller v
        assert!(cam.project([0.0, 0.5, 0.0]).pixel[1] < cam.cy);
        let round = Camera::from_matrices(&cam.intrinsics(), &cam.world_to_camera(), 32, 24, 1.0, 8.0)
            .unwrap();
        assert_eq!(round, cam);
    }

    #[test]
    fn bilinear_cases() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&img, 1.0, 1.0), (vec![3.0], true));
        assert_eq!(bilinear_sample(&img, 0.0, 1.0), (vec![2.0], true));
        assert_eq!(bilinear_sample(&img, 0.5, 0.0), (vec![0.5], true));
        assert_eq!(bilinear_sample(&img, -5.0, -5.0), (vec![0.0], false));
        assert_eq!(bilinear_sample(&img, 1.0001, 0.0).1, false);
    }

    #[test]
    fn stratified_midpoints() {
        let d = stratified_sample::<ChaCha8Rng>(0.0, 1.0, 2, None).unwrap();
        assert_eq!(d.t, vec![0.25, 0.75]);
        assert!(stratified_sample::<ChaCha8Rng>(0.0, 1.0, 1, None).is_err());
        assert!(stratified_sample::<ChaCha8Rng>(1.0, 1.0, 4, None).is_err());
    }

    #[test]
    fn stratified_one_draw_per_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        for _ in 0..10_000 {
            let d = stratified_sample(2.0, 6.0, n, Some(&mut rng)).unwrap();
            assert!(d.is_sorted_within_bounds());
            let mut counts = vec![0; n];
            for &t in &d.t {
                counts[(((t - 2.0) / 4.0 * n as f64) as usize).min(n - 1)] += 1;
            }
            assert!(counts.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn importance_concentrates_on_heavy_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coarse = stratified_sample::<ChaCha8Rng>(0.0, 1.0, 10, None).unwrap();
        let mut w = vec![0.0; 10];
        w[3] = 0.7;
        let out = importance_sample(&coarse, &w, 1000, Some(&mut rng)).unwrap();
        assert_eq!(out.len(), 1010);
        assert!(out.is_sorted_within_bounds());
        let (lo, hi) = (0.3, 0.4);
        let outside = out.t.iter().filter(|&&t| t < lo || t > hi).count() - 9;
        assert!((outside as f64) < 0.05 * 1000.0, "{outside} leaked");
    }

    #[test]
    fn importance_validates_inputs() {
        let coarse = stratified_sample::<ChaCha8Rng>(0.0, 1.0, 4, None).unwrap();
        assert!(importance_sample::<ChaCha8Rng>(&coarse, &[1.0; 3], 4, None).is_err());
        assert!(importance_sample::<ChaCha8Rng>(&coarse, &[1.0, -1.0, 0.0, 0.0], 4, None).is_err());
        let zero = importance_sample::<ChaCha8Rng>(&coarse, &[0.0; 4], 4, None).unwrap();
        assert!(zero.is_sorted_within_bounds());
    }

    #[test]
    fn view_selection_orders_by_angle() {
        let up = [0.0, 1.0, 0.0];
        let ring: Vec<Camera> = (0..6)
            .map(|i| {
                let a = i as f64 * std::f64::consts::PI / 3.0;
                Camera::look_at([4.0 * a.cos(), 0.0, 4.0 * a.sin()], [0.0; 3], up, 0.8, 8, 8, 1.0, 8.0)
                    .unwrap()
            })
            .collect();
        let refs: Vec<&Camera> = ring[1..].iter().collect();
        let picked = select_source_views(&ring[0], &refs, 2, 0);
        // candidates 0 and 4 (ring 1 and 5) are the immediate neighbours
        let mut sorted = picked.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 4]);
        let harsh = select_source_views(&ring[0], &refs, 2, 2);
        let mut sorted = harsh.clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 3]);
    }
}
