//! Rendering loss, Adam, the learning-rate schedule, the coarse/fine
//! training loop and variant comparisons.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adcore::{AdError, Checkpoint, DType, ParamStore, Tape, Tensor, Var};
use crate::aggregation::{AggregationMode, Mapping, Metric, SimilarityBank};
use crate::config::KeyValues;
use crate::geometry::{select_source_views, Camera};
use crate::metrics::{psnr, ssim};
use crate::network::{Model, ModelConfig, Sources};
use crate::raster::Image;
use crate::renderer::{render_rays, InferenceContext, SamplingConfig};
use crate::scene::Scene;
use crate::{Error, Result};

/// Aggregation variant of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Learnable view-wise similarities, squared-L2 distance, exponential map.
    Proposed,
    /// Equal-weight mean and variance.
    Baseline,
    /// Equal-weight mean only.
    MeanOnly,
    /// View-wise similarities with constant ranges.
    FixedLambda,
    /// View-wise similarities on cosine distance.
    Cosine,
    /// View-wise similarities with the rational map.
    Rational,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Proposed,
        Variant::Baseline,
        Variant::MeanOnly,
        Variant::FixedLambda,
        Variant::Cosine,
        Variant::Rational,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::Baseline => "baseline",
            Variant::MeanOnly => "mean-only",
            Variant::FixedLambda => "fixed-lambda",
            Variant::Cosine => "cosine",
            Variant::Rational => "rational",
        }
    }

    pub fn mode(self) -> AggregationMode {
        match self {
            Variant::Proposed | Variant::FixedLambda => AggregationMode::ViewWise {
                metric: Metric::SquaredL2,
                mapping: Mapping::Exp,
            },
            Variant::Cosine => AggregationMode::ViewWise {
                metric: Metric::Cosine,
                mapping: Mapping::Exp,
            },
            Variant::Rational => AggregationMode::ViewWise {
                metric: Metric::SquaredL2,
                mapping: Mapping::Rational,
            },
            Variant::Baseline => AggregationMode::GlobalMeanVar,
            Variant::MeanOnly => AggregationMode::GlobalMean,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global-mean-var" => Ok(Variant::Baseline),
            "fixed" | "fixed-λ" => Ok(Variant::FixedLambda),
            _ => Variant::ALL
                .into_iter()
                .find(|v| v.name() == s)
                .ok_or_else(|| Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Rays per optimization step.
    pub rays: usize,
    /// Source views per target.
    pub n_s: usize,
    /// Source views skipped from the nearest end of the ranking.
    pub skip_nearest: usize,
    pub n_coarse: usize,
    /// Extra importance samples of the fine pass.
    pub n_fine: usize,
    pub n_k: usize,
    pub feature_channels: usize,
    pub extractor_width: usize,
    pub direction_width: usize,
    pub mlp_width: usize,
    pub head_width: usize,
    pub lr: f64,
    pub lr_extractor: f64,
    pub lr_decay: f64,
    pub lr_interval: usize,
    pub variant: Variant,
    pub fixed_lambdas: Vec<f64>,
    pub deterministic: bool,
    pub workers: usize,
    pub log_every: usize,
    /// Held-out PSNR cadence in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub render_batch: usize,
    pub checkpoint_dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            rays: 64,
            n_s: 4,
            skip_nearest: 0,
            n_coarse: 32,
            n_fine: 32,
            n_k: 5,
            feature_channels: 8,
            extractor_width: 16,
            direction_width: 16,
            mlp_width: 32,
            head_width: 16,
            lr: 5e-4,
            lr_extractor: 1e-3,
            lr_decay: 0.5,
            lr_interval: 1000,
            variant: Variant::Proposed,
            fixed_lambdas: vec![0.05, 1.2875, 2.525, 3.7625, 5.0],
            deterministic: true,
            workers: 1,
            log_every: 50,
            eval_every: 0,
            render_batch: 128,
            checkpoint_dtype: DType::F64,
        }
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Defaults overridden by `kv`; unknown keys are errors.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.parsed(stringify!($field))? { c.$field = v; })*
            };
        }
        take!(
            seed, iterations, rays, n_s, skip_nearest, n_coarse, n_fine, n_k, feature_channels,
            extractor_width, direction_width, mlp_width, head_width, lr, lr_extractor, lr_decay,
            lr_interval, variant, deterministic, workers, log_every, eval_every, render_batch,
            checkpoint_dtype
        );
        if let Some(v) = kv.get("fixed_lambdas") {
            c.fixed_lambdas = v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad fixed_lambdas entry `{x}`")))
                })
                .collect::<Result<_>>()?;
        }
        let known = c.to_key_values();
        if let Some(k) = kv.keys().find(|k| known.get(k).is_none()) {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let mut put = |k: &str, v: String| kv.set(k, v);
        put("seed", self.seed.to_string());
        put("iterations", self.iterations.to_string());
        put("rays", self.rays.to_string());
        put("n_s", self.n_s.to_string());
        put("skip_nearest", self.skip_nearest.to_string());
        put("n_coarse", self.n_coarse.to_string());
        put("n_fine", self.n_fine.to_string());
        put("n_k", self.n_k.to_string());
        put("feature_channels", self.feature_channels.to_string());
        put("extractor_width", self.extractor_width.to_string());
        put("direction_width", self.direction_width.to_string());
        put("mlp_width", self.mlp_width.to_string());
        put("head_width", self.head_width.to_string());
        put("lr", self.lr.to_string());
        put("lr_extractor", self.lr_extractor.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("lr_interval", self.lr_interval.to_string());
        put("variant", self.variant.to_string());
        put("fixed_lambdas", join(&self.fixed_lambdas));
        put("deterministic", self.deterministic.to_string());
        put("workers", self.workers.to_string());
        put("log_every", self.log_every.to_string());
        put("eval_every", self.eval_every.to_string());
        put("render_batch", self.render_batch.to_string());
        put("checkpoint_dtype", self.checkpoint_dtype.to_string());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("rays", self.rays),
            ("n_s", self.n_s),
            ("n_coarse", self.n_coarse),
            ("n_k", self.n_k),
            ("lr_interval", self.lr_interval),
            ("workers", self.workers),
            ("log_every", self.log_every),
            ("render_batch", self.render_batch),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if self.n_coarse < 2 {
            return Err(Error::Config("`n_coarse` must be at least 2".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("`lr_decay` must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.lr >= 0.0 && self.lr_extractor >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mode = self.variant.mode();
        let bank = match self.variant {
            Variant::FixedLambda => SimilarityBank::fixed(&self.fixed_lambdas)?,
            Variant::Baseline | Variant::MeanOnly => SimilarityBank::init(1)?,
            _ => SimilarityBank::init(self.n_k)?,
        };
        let bank = match mode {
            AggregationMode::ViewWise { metric, mapping } => bank.with_metric(metric).with_mapping(mapping),
            _ => bank,
        };
        Ok(ModelConfig {
            feature_channels: self.feature_channels,
            extractor_width: self.extractor_width,
            direction_width: self.direction_width,
            mlp_width: self.mlp_width,
            head_width: self.head_width,
            mode,
            bank,
        })
    }
}

/// `sum_r |rendered_r - truth_r|^2` over a `[R, 3]` batch.
pub fn rendering_loss<'t>(rendered: Var<'t>, truth: &Tensor) -> Result<Var<'t>> {
    if rendered.shape() != truth.shape() {
        return Err(Error::Config(format!(
            "rendered batch {:?} does not match ground truth {:?}",
            rendered.shape(),
            truth.shape()
        )));
    }
    let t = rendered.tape().constant(truth.clone());
    Ok(rendered.sub(t)?.square()?.sum_all()?)
}

/// `base * factor^floor(iteration / interval)`
pub fn lr_schedule(base: f64, iteration: usize, factor: f64, interval: usize) -> f64 {
    base * factor.powi((iteration / interval.max(1)) as i32)
}

/// Adam with bias correction over every non-frozen parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// First and second moments of parameter `index`.
    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.m[index], &self.v[index])
    }

    /// One update using the gradients accumulated in `store`, with a
    /// per-parameter learning rate chosen by name.
    pub fn update(&mut self, store: &mut ParamStore, lr_for: impl Fn(&str) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let lr = lr_for(&p.name);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Metrics of one rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean loss over the steps since the previous row.
    pub loss: f64,
    pub eval_psnr: Option<f64>,
    pub coarse_lambdas: Vec<f64>,
    pub fine_lambdas: Vec<f64>,
}

/// Writes the training log as CSV.
pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_k = rows.first().map_or(0, |r| r.coarse_lambdas.len());
    let mut header = vec!["iteration".to_string(), "loss".into(), "eval_psnr".into()];
    header.extend((1..=n_k).map(|k| format!("coarse_lambda_{k}")));
    header.extend((1..=n_k).map(|k| format!("fine_lambda_{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            r.loss.to_string(),
            r.eval_psnr.map(|p| p.to_string()).unwrap_or_default(),
        ];
        rec.extend(r.coarse_lambdas.iter().chain(&r.fine_lambdas).map(|l| l.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Sources for rendering `view`: the nearest training views other than
/// `view` itself.
pub fn sources_for(scene: &Scene, view: usize, config: &TrainConfig) -> Result<Sources> {
    if view >= scene.len() {
        return Err(Error::Scene(format!("view {view} does not exist ({} views)", scene.len())));
    }
    sources_for_camera(scene, &scene.cameras[view], Some(view), config)
}

/// Sources for an arbitrary target camera, never using view `exclude`.
pub fn sources_for_camera(scene: &Scene, target: &Camera, exclude: Option<usize>, config: &TrainConfig) -> Result<Sources> {
    let candidates: Vec<usize> = scene
        .training_views()
        .into_iter()
        .filter(|&v| Some(v) != exclude)
        .collect();
    let cams: Vec<_> = candidates.iter().map(|&v| &scene.cameras[v]).collect();
    let picked = select_source_views(target, &cams, config.n_s, config.skip_nearest);
    if picked.is_empty() {
        return Err(Error::Scene("no source views available".into()));
    }
    Sources::new(
        picked.iter().map(|&i| scene.cameras[candidates[i]].clone()).collect(),
        picked.iter().map(|&i| scene.images[candidates[i]].clone()).collect(),
    )
}

/// Renders `view` of `scene` with the given model.
pub fn render_view(scene: &Scene, view: usize, model: &Model, store: &ParamStore, config: &TrainConfig) -> Result<Image> {
    let sources = sources_for(scene, view, config)?;
    let ctx = InferenceContext::new(model, store, &sources)?;
    ctx.render_image(&scene.cameras[view], config.sampling(), config.render_batch, config.workers)
}

/// PSNR and SSIM of each listed view.
pub fn evaluate(scene: &Scene, views: &[usize], model: &Model, store: &ParamStore, config: &TrainConfig) -> Result<Vec<ViewMetrics>> {
    views
        .iter()
        .map(|&view| {
            let img = render_view(scene, view, model, store, config)?;
            Ok(ViewMetrics {
                view,
                psnr: psnr(&img, &scene.images[view])?,
                ssim: ssim(&img, &scene.images[view])?,
            })
        })
        .collect()
}

/// Model, parameters and optimizer state of a run in progress.
pub struct Trainer<'s> {
    pub scene: &'s Scene,
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub iteration: usize,
    rng: ChaCha8Rng,
    train_views: Vec<usize>,
    sources: Vec<Sources>,
}

impl<'s> Trainer<'s> {
    pub fn new(scene: &'s Scene, config: TrainConfig) -> Result<Self> {
        Self::with_init(scene, config, None)
    }

    /// Starts from the parameters of `init` instead of a fresh
    /// initialization; optimizer state starts empty.
    pub fn with_init(scene: &'s Scene, config: TrainConfig, init: Option<&Checkpoint>) -> Result<Self> {
        config.validate()?;
        let train_views = scene.training_views();
        if train_views.len() < 2 {
            return Err(Error::Scene("training needs at least two non-held-out views".into()));
        }
        let mut store = ParamStore::new();
        let model = Model::new(config.model_config()?, &mut store, config.seed)?;
        if let Some(ckpt) = init {
            ckpt.apply_to(&mut store)?;
        }
        let sources = train_views
            .iter()
            .map(|&v| sources_for(scene, v, &config))
            .collect::<Result<_>>()?;
        Ok(Self {
            scene,
            adam: Adam::new(&store),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7ea1),
            config,
            model,
            store,
            iteration: 0,
            train_views,
            sources,
        })
    }

    pub fn lambdas(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.model.coarse.lambdas(&self.store),
            self.model.fine.lambdas(&self.store),
        )
    }

    /// One step on a random training view and random pixels.
    pub fn step(&mut self) -> Result<f64> {
        let slot = self.rng.random_range(0..self.train_views.len());
        let view = self.train_views[slot];
        let cam = &self.scene.cameras[view];
        let pixels: Vec<(usize, usize)> = (0..self.config.rays)
            .map(|_| (self.rng.random_range(0..cam.width), self.rng.random_range(0..cam.height)))
            .collect();
        self.step_on_slot(slot, &pixels)
    }

    /// One step on given pixels of training view `view`.
    pub fn step_on(&mut self, view: usize, pixels: &[(usize, usize)]) -> Result<f64> {
        let slot = self
            .train_views
            .iter()
            .position(|&v| v == view)
            .ok_or_else(|| Error::Scene(format!("view {view} is not a training view")))?;
        self.step_on_slot(slot, pixels)
    }

    /// Loss of the next step and the accumulated gradients, without an
    /// optimizer update.
    fn loss_and_grad(&mut self, slot: usize, pixels: &[(usize, usize)]) -> Result<f64> {
        let view = self.train_views[slot];
        let cam = &self.scene.cameras[view];
        let gt_img = &self.scene.images[view];
        let mut rays = Vec::with_capacity(pixels.len());
        let mut truth = Vec::with_capacity(pixels.len() * 3);
        for &(x, y) in pixels {
            rays.push(cam.generate_ray(x as f64, y as f64)?);
            truth.extend_from_slice(gt_img.pixel(x, y));
        }
        let truth = Tensor::new(&[pixels.len(), 3], truth)?;
        let sources = &self.sources[slot];

        let tape = Tape::new();
        let images = tape.constant(sources.stacked.clone());
        let maps = self.model.extractor.forward(&tape, &self.store, images)?;
        let out = render_rays(
            &tape,
            &self.store,
            &self.model,
            sources,
            maps,
            &rays,
            cam.near,
            cam.far,
            self.config.sampling(),
            Some(&mut self.rng),
        )?;
        let mut loss = rendering_loss(out.coarse, &truth)?;
        if let Some(fine) = out.fine {
            loss = loss.add(rendering_loss(fine, &truth)?)?;
        }
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                reason: format!("loss is {value}"),
            });
        }
        tape.backward(loss, &mut self.store)?;
        Ok(value)
    }

    fn step_on_slot(&mut self, slot: usize, pixels: &[(usize, usize)]) -> Result<f64> {
        self.store.zero_grad();
        let loss = match self.loss_and_grad(slot, pixels) {
            Err(Error::Ad(AdError::NonFinite { op })) => {
                return Err(Error::Diverged {
                    iteration: self.iteration,
                    reason: format!("non-finite value produced by `{op}`"),
                })
            }
            other => other?,
        };
        let c = &self.config;
        let lr = lr_schedule(c.lr, self.iteration, c.lr_decay, c.lr_interval);
        let lr_ex = lr_schedule(c.lr_extractor, self.iteration, c.lr_decay, c.lr_interval);
        self.adam.update(&mut self.store, |name| {
            if Model::is_extractor_param(name) {
                lr_ex
            } else {
                lr
            }
        });
        self.iteration += 1;
        Ok(loss)
    }

    pub fn evaluate(&self, views: &[usize]) -> Result<Vec<ViewMetrics>> {
        evaluate(self.scene, views, &self.model, &self.store, &self.config)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = vec![("iteration".to_string(), self.iteration.to_string())];
        meta.extend(
            self.config
                .to_key_values()
                .iter()
                .map(|(k, v)| (format!("config.{k}"), v.to_string())),
        );
        Checkpoint::from_store(&self.store, meta)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub log: Vec<LogRow>,
    /// Held-out metrics after the last step (empty without held-out views).
    pub final_metrics: Vec<ViewMetrics>,
}

/// Every step builds and drops a tape of a few hundred MB; keeping that
/// memory mapped avoids page-fault churn that otherwise costs ~30% per step.
fn retain_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TOP_PAD, 256 << 20);
        });
    }
}

/// Runs `config.iterations` steps. With `out_dir`, writes `config.txt`,
/// `log.csv` and `checkpoint.txt` / `checkpoint.bin` there.
pub fn train(scene: &Scene, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_from(scene, config, out_dir, None)
}

/// [`train`] continuing from the parameters of a checkpoint.
pub fn train_from(scene: &Scene, config: &TrainConfig, out_dir: Option<&Path>, init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
        let path = dir.join("config.txt");
        fs::write(&path, config.to_key_values().to_string()).map_err(Error::at(path))?;
    }
    retain_heap();
    let mut trainer = Trainer::with_init(scene, config.clone(), init)?;
    let eval_view = scene.holdout.first().copied();
    let mut log = Vec::new();
    let mut window = (0.0, 0usize);
    let started = Instant::now();
    for it in 1..=config.iterations {
        let loss = trainer.step()?;
        window = (window.0 + loss, window.1 + 1);
        let last = it == config.iterations;
        if it % config.log_every == 0 || last {
            let eval_due = config.eval_every > 0 && it % config.eval_every == 0;
            let eval_psnr = match (eval_view, eval_due) {
                (Some(v), true) => Some(trainer.evaluate(&[v])?[0].psnr),
                _ => None,
            };
            let (coarse_lambdas, fine_lambdas) = trainer.lambdas();
            let row = LogRow {
                iteration: it,
                loss: window.0 / window.1 as f64,
                eval_psnr,
                coarse_lambdas,
                fine_lambdas,
            };
            log::info!(
                "[{}] iter {it}: loss {:.5}{} ({:.1}s)",
                config.variant,
                row.loss,
                eval_psnr.map(|p| format!(", held-out PSNR {p:.2} dB")).unwrap_or_default(),
                started.elapsed().as_secs_f64()
            );
            log.push(row);
            window = (0.0, 0);
        }
    }
    let final_metrics = trainer.evaluate(&scene.holdout)?;
    if let Some(dir) = out_dir {
        write_log(&log, &dir.join("log.csv"))?;
        trainer
            .checkpoint()
            .save(&dir.join("checkpoint.txt"), config.checkpoint_dtype)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        store: trainer.store,
        log,
        final_metrics,
    })
}

/// Rebuilds the model recorded in a checkpoint manifest.
pub fn load_checkpoint(manifest: &Path) -> Result<(Model, ParamStore, TrainConfig)> {
    let ckpt = Checkpoint::load(manifest)?;
    let mut kv = KeyValues::new();
    for (k, v) in &ckpt.meta {
        if let Some(key) = k.strip_prefix("config.") {
            kv.set(key, v.as_str());
        }
    }
    let config = TrainConfig::from_key_values(&kv)?;
    let mut store = ParamStore::new();
    let model = Model::new(config.model_config()?, &mut store, config.seed)?;
    ckpt.apply_to(&mut store)?;
    Ok((model, store, config))
}

/// One variant's row of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub variant: Variant,
    pub n_k: usize,
    pub seed: u64,
    pub iterations: usize,
    /// Means over the held-out views.
    pub psnr: f64,
    pub ssim: f64,
    pub coarse_lambdas: Vec<f64>,
    pub fine_lambdas: Vec<f64>,
}

impl ComparisonRow {
    pub fn from_metrics(label: &str, config: &TrainConfig, metrics: &[ViewMetrics], lambdas: (Vec<f64>, Vec<f64>)) -> Self {
        let n = metrics.len().max(1) as f64;
        Self {
            label: label.to_string(),
            variant: config.variant,
            n_k: lambdas.0.len(),
            seed: config.seed,
            iterations: config.iterations,
            psnr: metrics.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: metrics.iter().map(|m| m.ssim).sum::<f64>() / n,
            coarse_lambdas: lambdas.0,
            fine_lambdas: lambdas.1,
        }
    }
}

/// Trains every configuration on the same scene and reports held-out
/// metrics and learned ranges.
pub fn run_comparison(scene: &Scene, runs: &[(String, TrainConfig)]) -> Result<Vec<ComparisonRow>> {
    runs.iter()
        .map(|(label, config)| {
            let outcome = train(scene, config, None)?;
            let lambdas = (
                outcome.model.coarse.lambdas(&outcome.store),
                outcome.model.fine.lambdas(&outcome.store),
            );
            Ok(ComparisonRow::from_metrics(label, config, &outcome.final_metrics, lambdas))
        })
        .collect()
}

pub fn write_comparison(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "label", "variant", "n_k", "seed", "iterations", "psnr", "ssim", "coarse_lambdas", "fine_lambdas",
    ])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.variant.to_string(),
            r.n_k.to_string(),
            r.seed.to_string(),
            r.iterations.to_string(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            join_semicolon(&r.coarse_lambdas),
            join_semicolon(&r.fine_lambdas),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn join_semicolon(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_per_interval() {
        assert_eq!(lr_schedule(1e-3, 0, 0.5, 100), 1e-3);
        assert_eq!(lr_schedule(1e-3, 99, 0.5, 100), 1e-3);
        assert_eq!(lr_schedule(1e-3, 100, 0.5, 100), 5e-4);
        assert_eq!(lr_schedule(1e-3, 200, 0.5, 100), 2.5e-4);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut adam = Adam::new(&store);
        store.get_mut(id).grad = Tensor::vector(vec![1.0, 0.0]);
        adam.update(&mut store, |_| 0.1);
        let x = store.get(id).value.data().to_vec();
        assert!((x[0] - 0.9).abs() < 1e-7);
        assert_eq!(x[1], 2.0);
        let m_before = adam.moments(0).0[0];
        store.get_mut(id).grad = Tensor::vector(vec![0.0, 0.0]);
        adam.update(&mut store, |_| 0.1);
        assert!(adam.moments(0).0[0] < m_before);
        assert_eq!(store.get(id).value.data()[1], 2.0);
    }

    #[test]
    fn adam_zero_lr_and_frozen_are_no_ops() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.5])).unwrap();
        let b = store.add_frozen("b", Tensor::vector(vec![0.25])).unwrap();
        let mut adam = Adam::new(&store);
        store.get_mut(a).grad = Tensor::vector(vec![3.0]);
        store.get_mut(b).grad = Tensor::vector(vec![3.0]);
        adam.update(&mut store, |_| 0.0);
        assert_eq!(store.get(a).value.data()[0], 0.5);
        adam.update(&mut store, |_| 1.0);
        assert_eq!(store.get(b).value.data()[0], 0.25);
    }

    #[test]
    fn rendering_loss_cases() {
        let tape = Tape::new();
        let truth = Tensor::new(&[1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let same = tape.constant(truth.clone());
        assert_eq!(rendering_loss(same, &truth).unwrap().value().item(), 0.0);
        let off = tape.constant(Tensor::new(&[1, 3], vec![0.6, 0.5, 0.5]).unwrap());
        assert!((rendering_loss(off, &truth).unwrap().value().item() - 0.01).abs() < 1e-15);
        let wrong = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(rendering_loss(wrong, &truth).is_err());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = TrainConfig {
            variant: Variant::Cosine,
            fixed_lambdas: vec![0.5, 1.5],
            checkpoint_dtype: DType::F32,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_key_values(&c.to_key_values()).unwrap(), c);
        let mut kv = KeyValues::new();
        kv.set("bogus", "1");
        assert!(TrainConfig::from_key_values(&kv).is_err());
        let mut kv = KeyValues::new();
        kv.set("lr_decay", "1.5");
        assert!(TrainConfig::from_key_values(&kv).is_err());
        assert_eq!("global-mean-var".parse::<Variant>().unwrap(), Variant::Baseline);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
