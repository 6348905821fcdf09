//! Toy scenes and image metrics.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use viewagg::geometry::{dot, norm, sub};
use viewagg::metrics::{mse, psnr, ssim, PSNR_CAP};
use viewagg::raster::Image;
use viewagg::scene::{Primitive, Scene, Shape, ToySceneSpec};

fn sphere_spec(count: usize) -> ToySceneSpec {
    let mut spec = common::micro_spec();
    spec.cameras.count = count;
    spec.width = 48;
    spec.height = 48;
    spec.holdout = vec![];
    spec.primitives[0].albedo2 = None;
    spec
}

fn lit(img: &Image, x: usize, y: usize) -> bool {
    img.pixel(x, y).iter().any(|&c| c > 0.0)
}

#[test]
fn sphere_silhouette_matches_projection() {
    let spec = sphere_spec(8);
    let cams = spec.build_cameras().unwrap();
    let radius = 0.7;
    for (i, cam) in cams.iter().enumerate() {
        let img = spec.render_view(cam, i).unwrap();
        // Horizontal extent of the silhouette through the image center row.
        let row = cam.height / 2;
        let lit_cols: Vec<usize> = (0..cam.width).filter(|&x| lit(&img, x, row)).collect();
        assert!(!lit_cols.is_empty(), "sphere missing in view {i}");
        let measured = (lit_cols.last().unwrap() - lit_cols[0] + 1) as f64;
        // Tangent cone of a sphere at distance d: half-angle asin(r / d).
        // Along the center row the silhouette spans fx * tan(asin(r/d)) on
        // each side of the principal point.
        let d = norm(cam.center());
        let half = (radius / d).asin();
        let expected = 2.0 * cam.fx * half.tan();
        assert!((measured - expected).abs() <= 1.0 + 1e-9, "view {i}: {measured} vs {expected}");
    }
}

#[test]
fn occluder_changes_only_its_views() {
    let mut spec = sphere_spec(6);
    let clean: Vec<Image> = {
        let cams = spec.build_cameras().unwrap();
        cams.iter().enumerate().map(|(i, c)| spec.render_view(c, i).unwrap()).collect()
    };
    let cams = spec.build_cameras().unwrap();
    let flagged = [0usize, 1, 2];
    spec.occluders = flagged
        .iter()
        .map(|&v| {
            let eye = cams[v].center();
            Primitive {
                shape: Shape::Sphere { center: [eye[0] * 0.4, eye[1] * 0.4, eye[2] * 0.4], radius: 0.15 },
                albedo: [0.1, 1.0, 0.1],
                albedo2: None,
                checker: 0.25,
                visible_in: Some(vec![v]),
            }
        })
        .collect();
    let dir = TempDir::new().unwrap();
    let scene = spec.generate(dir.path()).unwrap();
    for (v, (a, b)) in clean.iter().zip(&scene.images).enumerate() {
        let diff = a.data.iter().zip(&b.data).filter(|(x, y)| (*x - *y).abs() > 1e-3).count();
        if flagged.contains(&v) {
            assert!(diff > 0, "view {v} unchanged");
        } else {
            assert_eq!(diff, 0, "view {v} changed");
        }
    }
}

#[test]
fn empty_scene_is_black() {
    let mut spec = sphere_spec(4);
    spec.primitives.clear();
    let dir = TempDir::new().unwrap();
    let scene = spec.generate(dir.path()).unwrap();
    assert!(scene.images.iter().all(|img| img.data.iter().all(|&c| c == 0.0)));
}

#[test]
fn unreachable_geometry_is_rejected() {
    let mut spec = sphere_spec(4);
    spec.primitives[0].shape = Shape::Sphere { center: [0.0, 0.0, 0.0], radius: 2.0 };
    let dir = TempDir::new().unwrap();
    assert!(spec.generate(dir.path()).is_err());
    let mut spec = sphere_spec(4);
    spec.holdout = vec![9];
    assert!(spec.generate(dir.path()).is_err());
}

#[test]
fn generation_is_deterministic_and_round_trips() {
    let mut spec = ToySceneSpec::occluder_preset(16, 3);
    spec.cameras.azimuth_jitter_deg = 5.0;
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let sa = spec.generate(a.path()).unwrap();
    let sb = spec.generate(b.path()).unwrap();
    assert_eq!(sa.images, sb.images);
    assert_eq!(sa.cameras, sb.cameras);
    for i in 0..sa.len() {
        let name = Scene::image_name(i);
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
    let loaded = Scene::load(a.path()).unwrap();
    assert_eq!(loaded.holdout, vec![2, 7]);
    assert_eq!(loaded.training_views().len(), 8);
    for (c, d) in loaded.cameras.iter().zip(&sa.cameras) {
        let p = [0.1, -0.2, 0.3];
        let (x, y) = (c.project(p), d.project(p));
        assert!((x.pixel[0] - y.pixel[0]).abs() < 1e-9 && (x.pixel[1] - y.pixel[1]).abs() < 1e-9);
    }
    // PNG quantization only
    for (x, y) in loaded.images.iter().zip(&sa.images) {
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-12));
    }
    let other = ToySceneSpec { seed: 4, ..spec.clone() };
    assert_ne!(other.build_cameras().unwrap(), sa.cameras);
}

#[test]
fn occluder_preset_hides_the_object_in_flagged_views() {
    let spec = ToySceneSpec::occluder_preset(32, 0);
    let cams = spec.build_cameras().unwrap();
    for (occluder, view) in spec.occluders.iter().zip([0usize, 3, 5, 8]) {
        assert_eq!(occluder.visible_in.as_deref(), Some(&[view][..]));
        let Shape::Sphere { center, .. } = occluder.shape else { panic!("sphere expected") };
        // between camera and origin
        let eye = cams[view].center();
        assert!(dot(sub(center, eye), sub([0.0; 3], eye)) > 0.0);
        assert!(norm(sub(center, eye)) < norm(eye));
    }
}

fn pattern(w: usize, h: usize) -> Image {
    let data = (0..w * h * 3)
        .map(|k| {
            let (x, y) = ((k / 3) % w, (k / 3) / w);
            0.5 + 0.4 * ((x as f64 * 0.7).sin() * (y as f64 * 0.45).cos())
        })
        .collect();
    Image::new(w, h, 3, data).unwrap()
}

#[test]
fn psnr_of_known_mse() {
    let a = Image::zeros(10, 10, 3);
    let b = Image::new(10, 10, 3, vec![0.1; 300]).unwrap();
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!(psnr(&a, &Image::zeros(10, 9, 3)).is_err());
}

#[test]
fn psnr_falls_as_noise_grows() {
    let clean = pattern(64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise: Vec<f64> = (0..clean.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for level in 1..=20 {
        let amp = level as f64 * 0.01;
        let noisy = Image::new(64, 64, 3, clean.data.iter().zip(&noise).map(|(c, n)| c + amp * n).collect()).unwrap();
        let p = psnr(&clean, &noisy).unwrap();
        assert!(p < last, "level {level}: {p} !< {last}");
        last = p;
    }
}

#[test]
fn ssim_identity_symmetry_and_negative() {
    let a = pattern(32, 24);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    let neg = Image::new(32, 24, 3, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    let s = ssim(&a, &neg).unwrap();
    assert!(s < 0.0, "{s}");
    assert!(s >= -1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = Image::new(32, 24, 3, a.data.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect()).unwrap();
    let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-12);
    assert!(ab < 1.0 && ab > 0.0);
}

/// Direct per-window SSIM with an explicit 2D Gaussian, independent of the
/// library's separable filter.
fn ssim_reference(a: &Image, b: &Image) -> f64 {
    let gray = |img: &Image| -> Vec<f64> { img.data.chunks(3).map(|p| p.iter().sum::<f64>() / 3.0).collect() };
    let (ga, gb) = (gray(a), gray(b));
    let (w, h, n) = (a.width, a.height, 11usize);
    let mut kernel = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (i as f64 - 5.0, j as f64 - 5.0);
            kernel[j * n + i] = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..n {
                for i in 0..n {
                    let k = kernel[j * n + i];
                    let (p, q) = (ga[(y0 + j) * w + x0 + i], gb[(y0 + j) * w + x0 + i]);
                    ma += k * p;
                    mb += k * q;
                    aa += k * p * p;
                    bb += k * q * q;
                    ab += k * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_windowed_reference() {
    let a = pattern(20, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = Image::new(20, 17, 3, a.data.iter().map(|v| v * 0.8 + rng.random_range(0.0..0.2)).collect()).unwrap();
    assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-12);
}
