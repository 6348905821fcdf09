//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use viewagg::aggregation::{Mapping, Metric, SimilarityBank};
use viewagg::geometry::Camera;
use viewagg::network::{ModelConfig, Sources};
use viewagg::raster::Image;
use viewagg::scene::{CameraRing, Primitive, Scene, Shape, ToySceneSpec};
use viewagg::training::{TrainConfig, Variant};

/// `n` cameras on a ring looking at the origin, with a smooth pattern per
/// view.
pub fn ring_sources(n: usize, size: usize) -> Sources {
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    for i in 0..n {
        let a = i as f64 / n as f64 * std::f64::consts::TAU;
        let eye = [3.0 * a.cos(), 3.0 * a.sin(), 0.8];
        cameras.push(Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 0.9, size, size, 1.0, 5.0).unwrap());
        let data = (0..size * size * 3)
            .map(|k| 0.5 + 0.4 * ((k as f64) * 0.37 + i as f64).sin())
            .collect();
        images.push(Image::new(size, size, 3, data).unwrap());
    }
    Sources::new(cameras, images).unwrap()
}

/// Target camera between the ring cameras.
pub fn target_camera(size: usize) -> Camera {
    Camera::look_at([2.9, 0.6, 1.0], [0.0; 3], [0.0, 0.0, 1.0], 0.9, size, size, 1.0, 5.0).unwrap()
}

pub fn tiny_model_config(n_k: usize) -> ModelConfig {
    ModelConfig {
        feature_channels: 2,
        extractor_width: 3,
        direction_width: 3,
        mlp_width: 4,
        head_width: 3,
        bank: SimilarityBank::init(n_k).unwrap(),
        ..ModelConfig::default()
    }
}

/// A training configuration small enough for unit-speed tests.
pub fn micro_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        iterations: 20,
        rays: 16,
        n_s: 3,
        n_coarse: 8,
        n_fine: 8,
        n_k: 3,
        feature_channels: 4,
        extractor_width: 6,
        direction_width: 6,
        mlp_width: 12,
        head_width: 8,
        lr: 1e-3,
        lr_extractor: 1e-3,
        variant,
        log_every: 5,
        render_batch: 64,
        ..TrainConfig::default()
    }
}

/// A textured sphere seen by six 12x12 cameras, view 1 held out.
pub fn micro_spec() -> ToySceneSpec {
    ToySceneSpec {
        primitives: vec![Primitive {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.7,
            },
            albedo: [0.9, 0.3, 0.2],
            albedo2: Some([0.2, 0.4, 0.9]),
            checker: 0.35,
            visible_in: None,
        }],
        occluders: vec![],
        cameras: CameraRing {
            count: 6,
            radius: 3.0,
            elevation_deg: 20.0,
            fov_deg: 45.0,
            near: 1.5,
            far: 4.5,
            target: [0.0; 3],
            azimuth_jitter_deg: 0.0,
        },
        width: 12,
        height: 12,
        holdout: vec![1],
        supersample: 1,
        seed: 0,
    }
}

pub fn micro_scene(dir: &Path) -> Scene {
    micro_spec().generate(dir).unwrap()
}

/// Direct transcription of the weighted statistics, one view row at a time.
pub fn reference(rows: &[Vec<f64>], valid: &[bool], lambda: f64, metric: Metric, mapping: Mapping) -> Vec<(Vec<f64>, Vec<f64>)> {
    let n = rows.len();
    let nf = rows[0].len();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        match metric {
            Metric::SquaredL2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum(),
            Metric::Cosine => {
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            }
        }
    };
    let mut out = Vec::new();
    for i in 0..n {
        let mut w = vec![0.0; n];
        for j in 0..n {
            if valid[i] && valid[j] {
                let d = if i == j { 0.0 } else { dist(&rows[i], &rows[j]) };
                w[j] = match mapping {
                    Mapping::Exp => (-lambda * d).exp(),
                    Mapping::Rational => 1.0 / (1.0 + lambda * d),
                };
            } else if valid[j] {
                w[j] = 1.0;
            }
        }
        let total: f64 = w.iter().sum();
        let mut mean = vec![0.0; nf];
        let mut var = vec![0.0; nf];
        for l in 0..nf {
            for j in 0..n {
                mean[l] += w[j] / total * rows[j][l];
            }
            for j in 0..n {
                var[l] += w[j] / total * (rows[j][l] - mean[l]).powi(2);
            }
        }
        out.push((mean, var));
    }
    out
}
