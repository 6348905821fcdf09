//! Volume compositing along rays and coarse/fine rendering of rays and
//! images.

use rand::Rng;

use crate::adcore::{AdError, ParamStore, Tape, Tensor, Var};
use crate::geometry::{importance_sample, stratified_sample, Camera, Ray, SampleDepths, Vec3};
use crate::network::{FeatureMaps, Model, PointBatch, Sources};
use crate::raster::Image;
use crate::{Error, Result};

/// Interval lengths `t_{i+1} - t_i`, the last one reaching the far bound.
pub fn deltas(depths: &SampleDepths) -> Result<Vec<f64>> {
    if !depths.is_sorted_within_bounds() {
        return Err(Error::Config("sample depths must be sorted and within [near, far]".into()));
    }
    let t = &depths.t;
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = t.last() {
        d.push(depths.far - last);
    }
    Ok(d)
}

/// Compositing of one ray without a tape. Returns the pixel color and the
/// per-sample weights `T_i (1 - exp(-sigma_i delta_i))`.
pub fn composite(depths: &SampleDepths, sigmas: &[f64], colors: &[[f64; 3]]) -> Result<([f64; 3], Vec<f64>)> {
    let n = depths.len();
    if sigmas.len() != n || colors.len() != n {
        return Err(Error::Config(format!(
            "{n} depths but {} densities and {} colors",
            sigmas.len(),
            colors.len()
        )));
    }
    if sigmas.iter().any(|s| s.is_nan() || *s < 0.0) {
        return Err(Error::Config("densities must be non-negative".into()));
    }
    let delta = deltas(depths)?;
    let mut optical = 0.0f64;
    let mut c = [0.0; 3];
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let sd = sigmas[i] * delta[i];
        let w = (-optical).exp() * -(-sd).exp_m1();
        optical += sd;
        for ch in 0..3 {
            c[ch] += w * colors[i][ch];
        }
        weights.push(w);
    }
    Ok((c, weights))
}

/// Batched compositing on the tape: `sigma` is `[R, n]`, `color` is
/// `[R, n, 3]` and `delta` is `[R, n]`. Returns colors `[R, 3]` and weights
/// `[R, n]`.
pub fn composite_on_tape<'t>(
    tape: &'t Tape,
    sigma: Var<'t>,
    color: Var<'t>,
    delta: Tensor,
) -> Result<(Var<'t>, Var<'t>), AdError> {
    let shape = sigma.shape();
    let sd = sigma.mul(tape.constant(delta))?;
    let alpha = sd.neg()?.exp()?.neg()?.add_scalar(1.0)?;
    let transmittance = sd.cumsum_exclusive()?.neg()?.exp()?;
    let weights = transmittance.mul(alpha)?;
    let c = weights
        .reshape(&[shape[0], shape[1], 1])?
        .mul(color)?
        .sum_axis(1)?;
    Ok((c, weights))
}

/// Sample counts along each ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingConfig {
    /// Stratified samples of the coarse pass.
    pub n_coarse: usize,
    /// Extra importance samples of the fine pass (0 disables it).
    pub n_fine: usize,
}

impl SamplingConfig {
    /// Total depths seen by the fine network.
    pub fn fine_total(&self) -> usize {
        self.n_coarse + self.n_fine
    }
}

/// Output of rendering a batch of rays.
pub struct RayOutput<'t> {
    /// `[R, 3]`
    pub coarse: Var<'t>,
    /// `[R, 3]`, absent when no fine samples are configured
    pub fine: Option<Var<'t>>,
    pub coarse_depths: Vec<SampleDepths>,
    pub fine_depths: Vec<SampleDepths>,
    /// `[R, n_coarse]` compositing weights of the coarse pass
    pub coarse_weights: Tensor,
}

impl<'t> RayOutput<'t> {
    /// The fine colors, or the coarse ones when there is no fine pass.
    pub fn best(&self) -> Var<'t> {
        self.fine.unwrap_or(self.coarse)
    }
}

/// Renders `rays` with one network on given depths; returns colors `[R, 3]`
/// and compositing weights `[R, n]`. All rays need the same sample count.
#[allow(clippy::too_many_arguments)]
pub fn render_with_depths<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    net: &crate::network::RadianceNet,
    rows: Var<'t>,
    sources: &Sources,
    rays: &[Ray],
    depths: &[SampleDepths],
) -> Result<(Var<'t>, Var<'t>)> {
    let n = depths.first().map_or(0, |d| d.len());
    let r = rays.len();
    if depths.len() != r || depths.iter().any(|d| d.len() != n) || n == 0 {
        return Err(Error::Config("one non-empty, equally sized depth set per ray required".into()));
    }
    let mut points: Vec<Vec3> = Vec::with_capacity(r * n);
    let mut dirs: Vec<Vec3> = Vec::with_capacity(r * n);
    let mut delta = Vec::with_capacity(r * n);
    for (ray, d) in rays.iter().zip(depths) {
        points.extend(d.t.iter().map(|&t| ray.at(t)));
        dirs.extend(std::iter::repeat_n(ray.direction, d.len()));
        delta.extend(deltas(d)?);
    }
    let batch = PointBatch::build(&points, &dirs, sources)?;
    let radiance = net.forward(tape, store, rows, &batch)?;
    let sigma = radiance.sigma.reshape(&[r, n])?;
    let color = radiance.color.reshape(&[r, n, 3])?;
    Ok(composite_on_tape(tape, sigma, color, Tensor::new(&[r, n], delta)?)?)
}

/// Renders `rays` with the coarse network on stratified depths, then the
/// fine network on the union with importance samples. Without `rng` the
/// depths are deterministic (bin midpoints and CDF quantiles).
#[allow(clippy::too_many_arguments)]
pub fn render_rays<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    store: &ParamStore,
    model: &Model,
    sources: &Sources,
    maps: FeatureMaps<'t>,
    rays: &[Ray],
    near: f64,
    far: f64,
    sampling: SamplingConfig,
    mut rng: Option<&mut R>,
) -> Result<RayOutput<'t>> {
    if rays.is_empty() {
        return Err(Error::Config("no rays to render".into()));
    }
    let coarse_depths = rays
        .iter()
        .map(|_| stratified_sample(near, far, sampling.n_coarse, rng.as_deref_mut()))
        .collect::<Result<Vec<_>>>()?;
    let (coarse, weights) = render_with_depths(tape, store, &model.coarse, maps.coarse, sources, rays, &coarse_depths)?;
    let coarse_weights = weights.value().clone();

    let (fine, fine_depths) = if sampling.n_fine > 0 {
        let n = sampling.n_coarse;
        let fine_depths = coarse_depths
            .iter()
            .enumerate()
            .map(|(i, d)| {
                importance_sample(
                    d,
                    &coarse_weights.data()[i * n..(i + 1) * n],
                    sampling.n_fine,
                    rng.as_deref_mut(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (fine, _) = render_with_depths(tape, store, &model.fine, maps.fine, sources, rays, &fine_depths)?;
        (Some(fine), fine_depths)
    } else {
        (None, Vec::new())
    };
    Ok(RayOutput {
        coarse,
        fine,
        coarse_depths,
        fine_depths,
        coarse_weights,
    })
}

/// Precomputed source features for inference.
pub struct InferenceContext<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub sources: &'a Sources,
    coarse_map: Tensor,
    fine_map: Tensor,
}

impl<'a> InferenceContext<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore, sources: &'a Sources) -> Result<Self> {
        let (coarse_map, fine_map) = model.extract_features(store, sources)?;
        Ok(Self {
            model,
            store,
            sources,
            coarse_map,
            fine_map,
        })
    }

    /// Deterministic coarse and fine colors of a batch of pixels.
    pub fn render_pixels(
        &self,
        camera: &Camera,
        pixels: &[(f64, f64)],
        sampling: SamplingConfig,
    ) -> Result<Vec<([f64; 3], [f64; 3])>> {
        let rays = pixels
            .iter()
            .map(|&(u, v)| camera.generate_ray(u, v))
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let maps = FeatureMaps {
            coarse: tape.constant(self.coarse_map.clone()),
            fine: tape.constant(self.fine_map.clone()),
        };
        let out = render_rays::<rand_chacha::ChaCha8Rng>(
            &tape,
            self.store,
            self.model,
            self.sources,
            maps,
            &rays,
            camera.near,
            camera.far,
            sampling,
            None,
        )?;
        let coarse = out.coarse.value();
        let fine = out.best().value();
        Ok((0..rays.len())
            .map(|i| {
                let c = &coarse.data()[i * 3..i * 3 + 3];
                let f = &fine.data()[i * 3..i * 3 + 3];
                ([c[0], c[1], c[2]], [f[0], f[1], f[2]])
            })
            .collect())
    }

    /// Coarse and fine colors of one pixel.
    pub fn render_pixel(&self, camera: &Camera, u: f64, v: f64, sampling: SamplingConfig) -> Result<([f64; 3], [f64; 3])> {
        Ok(self.render_pixels(camera, &[(u, v)], sampling)?[0])
    }

    /// Renders every pixel of `camera` in row-major batches of
    /// `batch_size`, sharding rows of the image over `workers` threads.
    /// Output values are unclamped fine-pass colors.
    pub fn render_image(
        &self,
        camera: &Camera,
        sampling: SamplingConfig,
        batch_size: usize,
        workers: usize,
    ) -> Result<Image> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let (w, h) = (camera.width, camera.height);
        let pixels: Vec<(f64, f64)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x as f64, y as f64)))
            .collect();
        let workers = workers.clamp(1, h.max(1));
        let share = pixels.len().div_ceil(workers).max(1);
        let render_share = |part: &[(f64, f64)]| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(part.len() * 3);
            for chunk in part.chunks(batch_size) {
                for (_, fine) in self.render_pixels(camera, chunk, sampling)? {
                    out.extend_from_slice(&fine);
                }
            }
            Ok(out)
        };
        let data = if workers == 1 {
            render_share(&pixels)?
        } else {
            let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
                let handles: Vec<_> = pixels
                    .chunks(share)
                    .map(|part| s.spawn(move || render_share(part)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("render worker panicked"))
                    .collect()
            });
            let mut data = Vec::with_capacity(pixels.len() * 3);
            for part in parts {
                data.extend(part?);
            }
            data
        };
        Image::new(w, h, 3, data)
    }
}
