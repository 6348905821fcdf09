//! Feature extractor, relative viewing-direction features, per-point feature
//! assembly and the density/color heads.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adcore::{AdError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::aggregation::{aggregate_on_tape, AggregationMode, FeatureSet, SimilarityBank};
use crate::geometry::{bilinear_taps, dot, norm, scale, sub, Camera, Vec3};
use crate::raster::Image;
use crate::{Error, Result};

/// Width of the relative viewing-direction descriptor.
pub const DIRECTION_DIM: usize = 4;

/// Prefix of extractor parameter names (its own learning-rate group).
pub const EXTRACTOR_PREFIX: &str = "extractor.";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Extractor output channels; per-view features add RGB on top.
    pub feature_channels: usize,
    pub extractor_width: usize,
    pub direction_width: usize,
    pub mlp_width: usize,
    pub head_width: usize,
    pub mode: AggregationMode,
    /// Similarity bank used by view-wise modes (initial or fixed ranges).
    pub bank: SimilarityBank,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 8,
            extractor_width: 16,
            direction_width: 16,
            mlp_width: 32,
            head_width: 16,
            mode: AggregationMode::ViewWise {
                metric: crate::aggregation::Metric::SquaredL2,
                mapping: crate::aggregation::Mapping::Exp,
            },
            bank: SimilarityBank::init(5).expect("n_k > 0"),
        }
    }
}

impl ModelConfig {
    /// Per-view feature width `n_f` (extractor channels plus RGB).
    pub fn n_f(&self) -> usize {
        self.feature_channels + 3
    }

    pub fn n_k(&self) -> usize {
        if self.mode.is_view_wise() {
            self.bank.n_k()
        } else {
            1
        }
    }

    /// Width of the per-view input to the shared MLP.
    pub fn per_view_width(&self) -> usize {
        self.n_f() + self.mode.output_width(self.n_f(), self.n_k())
    }

    fn validate(&self) -> Result<()> {
        let widths = [
            self.feature_channels,
            self.extractor_width,
            self.direction_width,
            self.mlp_width,
            self.head_width,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Glorot-uniform initialization.
fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-limit..limit)).collect())
        .expect("shape matches data")
}

/// Fully connected layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), glorot(rng, &[n_in, n_out], n_in, n_out))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]))?,
        })
    }

    fn zeroed(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[n_in, n_out]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]))?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, AdError> {
        x.matmul(tape.param(store, self.weight))?
            .add(tape.param(store, self.bias))
    }
}

/// Same-padded 3x3 convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                glorot(rng, &[3, 3, c_in, c_out], 9 * c_in, 9 * c_out),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, AdError> {
        x.conv2d(tape.param(store, self.weight))?
            .add(tape.param(store, self.bias))
    }
}

/// Three-layer convolutional extractor; the coarse and fine outputs share
/// the first two layers.
#[derive(Clone, Copy, Debug)]
pub struct Extractor {
    pub conv0: Conv,
    pub conv1: Conv,
    pub coarse: Conv,
    pub fine: Conv,
}

/// Coarse and fine feature maps of a stack of source images, flattened to
/// `[n_images * H * W, channels]`.
#[derive(Clone, Copy)]
pub struct FeatureMaps<'t> {
    pub coarse: Var<'t>,
    pub fine: Var<'t>,
}

impl Extractor {
    fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (w, c) = (config.extractor_width, config.feature_channels);
        Ok(Self {
            conv0: Conv::new(store, "extractor.conv0", 3, w, rng)?,
            conv1: Conv::new(store, "extractor.conv1", w, w, rng)?,
            coarse: Conv::new(store, "extractor.coarse", w, c, rng)?,
            fine: Conv::new(store, "extractor.fine", w, c, rng)?,
        })
    }

    /// `images` is `[B, H, W, 3]` in `[0, 1]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, images: Var<'t>) -> Result<FeatureMaps<'t>, AdError> {
        let shape = images.shape();
        let [b, h, w, 3] = shape[..] else {
            return Err(AdError::InvalidArgument(format!(
                "extractor expects [B, H, W, 3] images, got {shape:?}"
            )));
        };
        let x = self.conv0.forward(tape, store, images)?.elu()?;
        let x = self.conv1.forward(tape, store, x)?.elu()?;
        let flat = |y: Var<'t>| -> Result<Var<'t>, AdError> {
            let c = y.shape()[3];
            y.reshape(&[b * h * w, c])
        };
        Ok(FeatureMaps {
            coarse: flat(self.coarse.forward(tape, store, x)?)?,
            fine: flat(self.fine.forward(tape, store, x)?)?,
        })
    }
}

/// Source cameras and images, all of the same size.
#[derive(Clone, Debug)]
pub struct Sources {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// `[n_s, H, W, 3]`
    pub stacked: Tensor,
}

impl Sources {
    pub fn new(cameras: Vec<Camera>, images: Vec<Image>) -> Result<Self> {
        if cameras.is_empty() || cameras.len() != images.len() {
            return Err(Error::Scene(format!(
                "need matching, non-empty source cameras and images ({} vs {})",
                cameras.len(),
                images.len()
            )));
        }
        let (w, h) = (images[0].width, images[0].height);
        for (cam, img) in cameras.iter().zip(&images) {
            if img.width != w || img.height != h || img.channels != 3 || cam.width != w || cam.height != h {
                return Err(Error::Scene("source views must share one RGB image size".into()));
            }
        }
        let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        let stacked = Tensor::new(&[images.len(), h, w, 3], data)?;
        Ok(Self {
            cameras,
            images,
            stacked,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images[0].width
    }

    pub fn height(&self) -> usize {
        self.images[0].height
    }
}

/// Unit target direction minus unit source-to-point direction, and their dot
/// product.
pub fn direction_feature(target_dir: Vec3, point: Vec3, source_center: Vec3) -> [f64; DIRECTION_DIM] {
    let a = target_dir;
    let offset = sub(point, source_center);
    let len = norm(offset);
    let b = if len > 1e-12 { scale(offset, 1.0 / len) } else { a };
    let d = sub(a, b);
    [d[0], d[1], d[2], dot(a, b).clamp(-1.0, 1.0)]
}

/// Projections of a batch of points into every source view.
#[derive(Clone, Debug)]
pub struct PointBatch {
    pub n_points: usize,
    pub n_views: usize,
    /// Bilinear taps into the stacked `[n_s * H * W]` feature rows, per
    /// `(point, view)`.
    pub rows: Rc<[[u32; 4]]>,
    pub weights: Rc<[[f64; 4]]>,
    pub valid: Rc<[bool]>,
    /// `[P, n_s, 3]` bilinearly sampled source colors.
    pub rgb: Tensor,
    /// `[P * n_s, 4]`
    pub directions: Tensor,
}

impl PointBatch {
    /// Projects `points` (each seen along unit `target_dirs[p]`) into the
    /// sources.
    pub fn build(points: &[Vec3], target_dirs: &[Vec3], sources: &Sources) -> Result<Self> {
        if points.len() != target_dirs.len() {
            return Err(Error::Config("one target direction per point required".into()));
        }
        let (p, n_s) = (points.len(), sources.len());
        let (w, h) = (sources.width(), sources.height());
        let plane = w * h;
        let mut rows = Vec::with_capacity(p * n_s);
        let mut weights = Vec::with_capacity(p * n_s);
        let mut valid = Vec::with_capacity(p * n_s);
        let mut rgb = vec![0.0; p * n_s * 3];
        let mut directions = Vec::with_capacity(p * n_s * DIRECTION_DIM);
        let centers: Vec<Vec3> = sources.cameras.iter().map(|c| c.center()).collect();
        for (pi, (&x, &d)) in points.iter().zip(target_dirs).enumerate() {
            for (v, cam) in sources.cameras.iter().enumerate() {
                let proj = cam.project(x);
                let taps = if proj.in_front {
                    bilinear_taps(w, h, proj.pixel[0], proj.pixel[1])
                } else {
                    None
                };
                match taps {
                    Some((idx, wts)) => {
                        rows.push(idx.map(|i| (v * plane + i) as u32));
                        weights.push(wts);
                        valid.push(true);
                        let img = &sources.images[v].data;
                        let dst = &mut rgb[(pi * n_s + v) * 3..(pi * n_s + v + 1) * 3];
                        for q in 0..4 {
                            for c in 0..3 {
                                dst[c] += wts[q] * img[idx[q] * 3 + c];
                            }
                        }
                    }
                    None => {
                        rows.push([0; 4]);
                        weights.push([0.0; 4]);
                        valid.push(false);
                    }
                }
                directions.extend_from_slice(&direction_feature(d, x, centers[v]));
            }
        }
        Ok(Self {
            n_points: p,
            n_views: n_s,
            rows: rows.into(),
            weights: weights.into(),
            valid: valid.into(),
            rgb: Tensor::new(&[p, n_s, 3], rgb)?,
            directions: Tensor::new(&[p * n_s, DIRECTION_DIM], directions)?,
        })
    }

    /// `[P, n_s, 1]` validity as 0/1.
    fn mask(&self) -> Tensor {
        let data = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::from_parts(vec![self.n_points, self.n_views, 1], data)
    }

    fn valid_counts(&self) -> Vec<usize> {
        self.valid
            .chunks(self.n_views)
            .map(|c| c.iter().filter(|&&v| v).count())
            .collect()
    }
}

/// Per-view features of a single point: bilinear samples of `feature_map`
/// (`[n_s * H * W, channels]`) concatenated with sampled RGB, before the
/// direction embedding is added.
pub fn point_features(
    x: Vec3,
    target_dir: Vec3,
    sources: &Sources,
    feature_map: &Tensor,
) -> Result<(FeatureSet, Vec<[f64; DIRECTION_DIM]>)> {
    let batch = PointBatch::build(&[x], &[target_dir], sources)?;
    let c = feature_map.shape()[1];
    let mut rows = Vec::with_capacity(batch.n_views);
    for v in 0..batch.n_views {
        let mut row = vec![0.0; c + 3];
        for q in 0..4 {
            let r = batch.rows[v][q] as usize;
            for (ch, out) in row.iter_mut().take(c).enumerate() {
                *out += batch.weights[v][q] * feature_map.data()[r * c + ch];
            }
        }
        row[c..].copy_from_slice(&batch.rgb.data()[v * 3..v * 3 + 3]);
        rows.push(row);
    }
    let dirs = batch
        .directions
        .data()
        .chunks(DIRECTION_DIM)
        .map(|d| [d[0], d[1], d[2], d[3]])
        .collect();
    Ok((FeatureSet::new(rows, batch.valid.to_vec())?, dirs))
}

/// Density and color of a batch of points.
#[derive(Clone, Copy)]
pub struct Radiance<'t> {
    /// `[P]`, non-negative
    pub sigma: Var<'t>,
    /// `[P, 3]`, convex combinations of valid source colors
    pub color: Var<'t>,
}

/// Aggregation plus density/color heads for one sampling level.
#[derive(Clone, Debug)]
pub struct RadianceNet {
    pub mode: AggregationMode,
    pub n_f: usize,
    pub dir0: Dense,
    pub dir1: Dense,
    /// Learnable log-ranges (view-wise modes with a trainable bank).
    pub alpha: Option<ParamId>,
    /// Constant ranges of a frozen bank.
    pub fixed_lambdas: Option<Vec<f64>>,
    pub base0: Dense,
    pub base1: Dense,
    pub density0: Dense,
    pub density1: Dense,
    pub color0: Dense,
    pub color1: Dense,
}

impl RadianceNet {
    fn new(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n_f = config.n_f();
        let (alpha, fixed_lambdas) = match (config.mode.is_view_wise(), config.bank.is_frozen()) {
            (false, _) => (None, None),
            (true, true) => (None, Some(config.bank.lambdas())),
            (true, false) => (
                Some(store.add(
                    format!("{prefix}.agg.alpha"),
                    Tensor::vector(config.bank.alphas.clone()),
                )?),
                None,
            ),
        };
        let hw = config.head_width;
        Ok(Self {
            mode: config.mode,
            n_f,
            dir0: Dense::new(store, &format!("{prefix}.dir0"), DIRECTION_DIM, config.direction_width, rng)?,
            // Starts as a no-op so early training sees the raw features.
            dir1: Dense::zeroed(store, &format!("{prefix}.dir1"), config.direction_width, n_f)?,
            alpha,
            fixed_lambdas,
            base0: Dense::new(store, &format!("{prefix}.base0"), config.per_view_width(), config.mlp_width, rng)?,
            base1: Dense::new(store, &format!("{prefix}.base1"), config.mlp_width, hw, rng)?,
            density0: Dense::new(store, &format!("{prefix}.density0"), hw, hw, rng)?,
            density1: Dense::new(store, &format!("{prefix}.density1"), hw, 1, rng)?,
            color0: Dense::new(store, &format!("{prefix}.color0"), hw + DIRECTION_DIM, hw, rng)?,
            color1: Dense::new(store, &format!("{prefix}.color1"), hw, 1, rng)?,
        })
    }

    /// Current similarity ranges, empty for equal-weight modes.
    pub fn lambdas(&self, store: &ParamStore) -> Vec<f64> {
        match (&self.fixed_lambdas, self.alpha) {
            (Some(l), _) => l.clone(),
            (None, Some(a)) => store.get(a).value.data().iter().map(|x| x.exp()).collect(),
            (None, None) => Vec::new(),
        }
    }

    /// `[P, n_s, n_f]` per-view features: sampled feature rows and RGB, plus
    /// the embedded direction descriptor.
    pub fn view_features<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feature_rows: Var<'t>,
        batch: &PointBatch,
    ) -> Result<Var<'t>, AdError> {
        let (p, n_s) = (batch.n_points, batch.n_views);
        let sampled = feature_rows.gather_rows(batch.rows.clone(), batch.weights.clone())?;
        let rgb = tape.constant(batch.rgb.clone().reshaped(&[p * n_s, 3])?);
        let f = tape.concat(&[sampled, rgb], 1)?;
        let dirs = tape.constant(batch.directions.clone());
        let embed = self.dir0.forward(tape, store, dirs)?.elu()?;
        let embed = self.dir1.forward(tape, store, embed)?;
        f.add(embed)?.reshape(&[p, n_s, self.n_f])
    }

    /// Aggregated statistics `[P, n_s, width]` of per-view features.
    pub fn aggregate<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        features: Var<'t>,
        batch: &PointBatch,
    ) -> Result<Var<'t>, AdError> {
        let alphas = self.alpha.map(|a| tape.param(store, a));
        aggregate_on_tape(
            features,
            batch.valid.clone(),
            self.mode,
            alphas,
            self.fixed_lambdas.as_deref(),
        )
    }

    /// Density and color from per-view features and their aggregates.
    pub fn head<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        features: Var<'t>,
        aggregated: Var<'t>,
        batch: &PointBatch,
    ) -> Result<Radiance<'t>, AdError> {
        let (p, n_s) = (batch.n_points, batch.n_views);
        let x = tape.concat(&[features, aggregated], 2)?;
        let width = x.shape()[2];
        let x = x.reshape(&[p * n_s, width])?;
        let h = self.base0.forward(tape, store, x)?.elu()?;
        let h = self.base1.forward(tape, store, h)?.elu()?;
        let hw = h.shape()[1];

        let mask = batch.mask();
        let counts = batch.valid_counts();
        let inv_count: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let any_valid: Vec<f64> = counts.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect();

        let mask3 = tape.constant(mask.clone());
        let pooled = h
            .reshape(&[p, n_s, hw])?
            .mul(mask3)?
            .sum_axis(1)?
            .mul(tape.constant(Tensor::from_parts(vec![p, 1], inv_count)))?;
        let d = self.density0.forward(tape, store, pooled)?.elu()?;
        let sigma = self
            .density1
            .forward(tape, store, d)?
            .softplus()?
            .mul(tape.constant(Tensor::from_parts(vec![p, 1], any_valid.clone())))?
            .reshape(&[p])?;

        let dirs = tape.constant(batch.directions.clone());
        let c = tape.concat(&[h, dirs], 1)?;
        let c = self.color0.forward(tape, store, c)?.elu()?;
        let logits = self.color1.forward(tape, store, c)?.reshape(&[p, n_s])?;
        let shift = {
            let l = logits.value();
            let mut shift = vec![0.0; p * n_s];
            for pt in 0..p {
                let row = &l.data()[pt * n_s..(pt + 1) * n_s];
                let valid = &batch.valid[pt * n_s..(pt + 1) * n_s];
                let m = row
                    .iter()
                    .zip(valid)
                    .filter(|(_, &v)| v)
                    .map(|(&x, _)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let m = if m.is_finite() { m } else { 0.0 };
                shift[pt * n_s..(pt + 1) * n_s].fill(m);
            }
            drop(l);
            tape.constant(Tensor::from_parts(vec![p, n_s], shift))
        };
        let mask2 = tape.constant(mask.reshaped(&[p, n_s])?);
        let e = tape
            .select(batch.valid.clone(), logits, shift)?
            .sub(shift)?
            .exp()?
            .mul(mask2)?;
        let empty: Vec<f64> = any_valid.iter().map(|a| 1.0 - a).collect();
        let denom = e
            .sum_axis(1)?
            .add(tape.constant(Tensor::vector(empty)))?
            .reshape(&[p, 1])?;
        let blend = e.div(denom)?.reshape(&[p, n_s, 1])?;
        let color = blend
            .mul(tape.constant(batch.rgb.clone()))?
            .sum_axis(1)?;
        Ok(Radiance { sigma, color })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feature_rows: Var<'t>,
        batch: &PointBatch,
    ) -> Result<Radiance<'t>, AdError> {
        let f = self.view_features(tape, store, feature_rows, batch)?;
        let agg = self.aggregate(tape, store, f, batch)?;
        self.head(tape, store, f, agg, batch)
    }
}

/// Extractor plus coarse and fine radiance networks.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub coarse: RadianceNet,
    pub fine: RadianceNet,
}

impl Model {
    /// Registers all parameters in `store`, initialized from `seed`.
    pub fn new(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = Extractor::new(store, &config, &mut rng)?;
        let coarse = RadianceNet::new(store, "coarse", &config, &mut rng)?;
        let fine = RadianceNet::new(store, "fine", &config, &mut rng)?;
        Ok(Self {
            config,
            extractor,
            coarse,
            fine,
        })
    }

    pub fn is_extractor_param(name: &str) -> bool {
        name.starts_with(EXTRACTOR_PREFIX)
    }

    /// Feature maps of the sources as constants (no gradient), for
    /// inference.
    pub fn extract_features(&self, store: &ParamStore, sources: &Sources) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let images = tape.constant(sources.stacked.clone());
        let maps = self.extractor.forward(&tape, store, images)?;
        let out = (maps.coarse.value().clone(), maps.fine.value().clone());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize;

    fn ring_sources(n: usize, size: usize) -> Sources {
        let mut cameras = Vec::new();
        let mut images = Vec::new();
        for i in 0..n {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            let eye = [3.0 * a.cos(), 3.0 * a.sin(), 0.5];
            cameras.push(Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 0.8, size, size, 0.5, 6.0).unwrap());
            let data = (0..size * size * 3).map(|k| ((k * 7 + i * 13) % 17) as f64 / 16.0).collect();
            images.push(Image::new(size, size, 3, data).unwrap());
        }
        Sources::new(cameras, images).unwrap()
    }

    #[test]
    fn extractor_preserves_spatial_size_and_is_deterministic() {
        let mut store = ParamStore::new();
        let model = Model::new(ModelConfig::default(), &mut store, 3).unwrap();
        let sources = ring_sources(2, 6);
        let (coarse, fine) = model.extract_features(&store, &sources).unwrap();
        assert_eq!(coarse.shape(), &[2 * 36, 8]);
        assert_eq!(fine.shape(), &[2 * 36, 8]);
        let again = model.extract_features(&store, &sources).unwrap();
        assert_eq!(coarse, again.0);
        assert_ne!(coarse, fine);
    }

    #[test]
    fn zero_input_with_zero_last_layer_gives_zero_features() {
        let mut store = ParamStore::new();
        let model = Model::new(ModelConfig::default(), &mut store, 3).unwrap();
        for id in [model.extractor.coarse.weight, model.extractor.coarse.bias] {
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut sources = ring_sources(1, 4);
        sources.images[0].data.fill(0.0);
        sources.stacked = Tensor::zeros(&[1, 4, 4, 3]);
        let (coarse, _) = model.extract_features(&store, &sources).unwrap();
        assert!(coarse.data().iter().all(|&x| x == 0.0));
        let x = [0.0; 3];
        let d = normalize(sub(x, sources.cameras[0].center()));
        let (fs, _) = point_features(x, d, &sources, &coarse).unwrap();
        assert!(fs.features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direction_feature_dot_is_bounded() {
        let f = direction_feature([0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 0.0]);
        assert_eq!(f, [0.0, 0.0, 0.0, 1.0]);
        let f = direction_feature([0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 4.0]);
        assert_eq!(f, [0.0, 0.0, 2.0, -1.0]);
    }

    #[test]
    fn point_on_axis_samples_exact_texel() {
        let sources = ring_sources(3, 5);
        let c = 2;
        let map = Tensor::new(
            &[3 * 25, c],
            (0..3 * 25 * c).map(|k| k as f64 * 0.01).collect(),
        )
        .unwrap();
        let cam = &sources.cameras[1];
        // look_at puts the principal point at the center texel (2, 2)
        let x = cam.center();
        let axis = cam.optical_axis();
        let x = [x[0] + 2.0 * axis[0], x[1] + 2.0 * axis[1], x[2] + 2.0 * axis[2]];
        let (fs, dirs) = point_features(x, axis, &sources, &map).unwrap();
        assert_eq!(fs.n_views, 3);
        assert_eq!(dirs.len(), 3);
        assert!(fs.valid[1]);
        let texel = 25 + 2 * 5 + 2;
        for ch in 0..c {
            assert!((fs.row(1)[ch] - map.data()[texel * c + ch]).abs() < 1e-9);
        }
        let img = &sources.images[1];
        for ch in 0..3 {
            assert!((fs.row(1)[c + ch] - img.pixel(2, 2)[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn point_outside_all_sources_is_invalid() {
        let sources = ring_sources(4, 5);
        let batch = PointBatch::build(&[[0.0, 0.0, 50.0]], &[[0.0, 0.0, 1.0]], &sources).unwrap();
        assert!(batch.valid.iter().all(|&v| !v));
    }

    #[test]
    fn baseline_has_no_alpha_parameters() {
        let config = ModelConfig {
            mode: AggregationMode::GlobalMeanVar,
            bank: SimilarityBank::init(1).unwrap(),
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let model = Model::new(config, &mut store, 0).unwrap();
        assert!(model.coarse.alpha.is_none() && model.fine.alpha.is_none());
        assert!(store.iter().all(|p| !p.name.contains("alpha")));
        assert!(model.coarse.lambdas(&store).is_empty());
    }
}
