//! `viewagg`: toy scenes, training, rendering, evaluation and variant
//! comparisons from the command line.
//!
//! Exit codes: 0 success, 2 usage or input error, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use viewagg::adcore::Checkpoint;
use viewagg::config::KeyValues;
use viewagg::metrics::{psnr, ssim};
use viewagg::renderer::InferenceContext;
use viewagg::scene::{PoseFile, Scene, ToySceneSpec};
use viewagg::training::{
    evaluate, load_checkpoint, render_view, run_comparison, sources_for_camera, train_from, write_comparison,
    ComparisonRow, TrainConfig, Variant,
};

#[derive(Parser)]
#[command(name = "viewagg", version, about = "Multi-view image-based rendering with view-wise feature aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory (or file, for `eval`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed-order reductions; runs are bitwise reproducible.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Threads used when rendering full images.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a toy scene from a JSON spec (or the occluder preset).
    MakeScene {
        /// JSON scene spec.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// Built-in spec: `occluder`.
        #[arg(long)]
        preset: Option<String>,
        /// Image size of the preset.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a scene directory.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from the parameters of a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a view (or a pose file) with a trained checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, conflicts_with = "pose_file", required_unless_present = "pose_file")]
        view: Option<usize>,
        /// JSON camera: K, world_to_camera, width, height, near, far.
        #[arg(long)]
        pose_file: Option<PathBuf>,
        /// Also write the raw float image.
        #[arg(long)]
        float_dump: bool,
        #[command(flatten)]
        common: Common,
    },
    /// PSNR / SSIM of checkpoints on the held-out views, as CSV.
    Eval {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        /// Views to evaluate; defaults to the held-out views.
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train several variants and seeds with one budget and tabulate them.
    Compare {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Variant list; `proposed:1` fixes n_k for one entry.
        #[arg(long, value_delimiter = ',', default_value = "baseline,proposed:1,proposed:5")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classified by exit code.
enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<viewagg::Error> for Failure {
    fn from(e: viewagg::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

trait InputExt<T> {
    fn input(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InputExt<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::MakeScene { spec, preset, size, common } => make_scene(spec, preset, size, &common),
        Command::Train { scene, config, set, variant, iterations, resume, common } => {
            let scene = load_scene(&scene)?;
            let mut cfg = build_config(config.as_deref(), &set, &common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.validate().input()?;
            let init = resume
                .map(|p| Checkpoint::load(&p).with_context(|| format!("loading {}", p.display())))
                .transpose()
                .input()?;
            create_out(&common.out)?;
            let outcome = train_from(&scene, &cfg, Some(&common.out), init.as_ref())?;
            for m in &outcome.final_metrics {
                println!("view {}: psnr {:.4} ssim {:.4}", m.view, m.psnr, m.ssim);
            }
            println!("checkpoint {}", common.out.join("checkpoint.txt").display());
            Ok(())
        }
        Command::Render { checkpoint, scene, view, pose_file, float_dump, common } => {
            render(&checkpoint, &scene, view, pose_file.as_deref(), float_dump, &common)
        }
        Command::Eval { checkpoints, scene, views, common } => eval(&checkpoints, &scene, views, &common),
        Command::Compare { scene, config, set, variants, seeds, iterations, common } => {
            let scene = load_scene(&scene)?;
            let mut base = build_config(config.as_deref(), &set, &common)?;
            if let Some(n) = iterations {
                base.iterations = n;
            }
            base.validate().input()?;
            let mut runs = Vec::new();
            for &seed in &seeds {
                for v in &variants {
                    let (name, n_k) = match v.split_once(':') {
                        Some((name, k)) => (name, Some(k.parse::<usize>().input()?)),
                        None => (v.as_str(), None),
                    };
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.variant = name.parse().input()?;
                    if let Some(k) = n_k {
                        cfg.n_k = k;
                    }
                    runs.push((v.clone(), cfg));
                }
            }
            if runs.is_empty() {
                return Err(Failure::Input(anyhow!("nothing to compare")));
            }
            create_out(&common.out)?;
            fs::write(common.out.join("config.txt"), base.to_key_values().to_string())
                .context("writing config snapshot")?;
            let rows = run_comparison(&scene, &runs)?;
            let path = common.out.join("comparison.csv");
            write_comparison(&rows, &path)?;
            print_rows(&rows);
            println!("table {}", path.display());
            Ok(())
        }
    }
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .input()
}

fn load_scene(dir: &Path) -> Result<Scene, Failure> {
    if !dir.join("scene.json").is_file() {
        return Err(Failure::Input(anyhow!("no scene found at {}", dir.display())));
    }
    Scene::load(dir).with_context(|| format!("loading scene {}", dir.display())).input()
}

fn build_config(file: Option<&Path>, set: &[String], common: &Common) -> Result<TrainConfig, Failure> {
    let mut kv = match file {
        Some(p) => KeyValues::load(p).with_context(|| format!("reading {}", p.display())).input()?,
        None => KeyValues::new(),
    };
    for entry in set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Failure::Input(anyhow!("--set expects KEY=VALUE, got `{entry}`")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed.to_string());
    }
    if let Some(d) = common.deterministic {
        kv.set("deterministic", d.to_string());
    }
    if let Some(w) = common.workers {
        kv.set("workers", w.to_string());
    }
    TrainConfig::from_key_values(&kv).input()
}

fn make_scene(spec: Option<PathBuf>, preset: Option<String>, size: usize, common: &Common) -> Result<(), Failure> {
    let mut spec = match (spec, preset.as_deref()) {
        (Some(path), _) => ToySceneSpec::load(&path).input()?,
        (None, Some("occluder")) => ToySceneSpec::occluder_preset(size, common.seed.unwrap_or(0)),
        (None, Some(other)) => return Err(Failure::Input(anyhow!("unknown preset `{other}`"))),
        (None, None) => return Err(Failure::Input(anyhow!("pass --spec FILE or --preset occluder"))),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    create_out(&common.out)?;
    let scene = match spec.generate(&common.out) {
        Err(e @ viewagg::Error::Scene(_)) | Err(e @ viewagg::Error::Camera(_)) => return Err(Failure::Input(e.into())),
        other => other?,
    };
    fs::write(common.out.join("spec.json"), spec.to_json()?).context("writing spec snapshot")?;
    println!("{} views written to {}", scene.len(), common.out.display());
    Ok(())
}

fn load_model(checkpoint: &Path, common: &Common) -> Result<(viewagg::network::Model, viewagg::ParamStore, TrainConfig), Failure> {
    if !checkpoint.is_file() {
        return Err(Failure::Input(anyhow!("no checkpoint found at {}", checkpoint.display())));
    }
    let (model, store, mut cfg) = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))
        .input()?;
    if let Some(w) = common.workers {
        cfg.workers = w.max(1);
    }
    Ok((model, store, cfg))
}

fn render(
    checkpoint: &Path,
    scene_dir: &Path,
    view: Option<usize>,
    pose_file: Option<&Path>,
    float_dump: bool,
    common: &Common,
) -> Result<(), Failure> {
    let scene = load_scene(scene_dir)?;
    let (model, store, cfg) = load_model(checkpoint, common)?;
    let (image, name, truth) = match (view, pose_file) {
        (Some(v), _) => {
            if v >= scene.len() {
                return Err(Failure::Input(anyhow!("view {v} does not exist; the scene has {} views", scene.len())));
            }
            create_out(&common.out)?;
            let img = render_view(&scene, v, &model, &store, &cfg)?;
            (img, format!("render_{v:03}"), Some(&scene.images[v]))
        }
        (None, Some(p)) => {
            let camera = PoseFile::load(p).input()?;
            create_out(&common.out)?;
            let sources = sources_for_camera(&scene, &camera, None, &cfg)?;
            let ctx = InferenceContext::new(&model, &store, &sources)?;
            let img = ctx.render_image(&camera, cfg.sampling(), cfg.render_batch, cfg.workers)?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("pose".into());
            (img, format!("render_{stem}"), None)
        }
        (None, None) => return Err(Failure::Input(anyhow!("pass --view or --pose-file"))),
    };
    let png = common.out.join(format!("{name}.png"));
    image.save_png(&png)?;
    println!("image {}", png.display());
    if float_dump {
        let dump = common.out.join(format!("{name}.f64"));
        image.save_float_dump(&dump)?;
        println!("float dump {}", dump.display());
    }
    if let Some(gt) = truth {
        println!("psnr {:.4}", psnr(&image, gt)?);
        println!("ssim {:.4}", ssim(&image, gt)?);
    }
    Ok(())
}

fn eval(checkpoints: &[PathBuf], scene_dir: &Path, views: Vec<usize>, common: &Common) -> Result<(), Failure> {
    if checkpoints.is_empty() {
        return Err(Failure::Input(anyhow!("no checkpoints given (use --checkpoint FILE)")));
    }
    let scene = load_scene(scene_dir)?;
    let views = if views.is_empty() { scene.holdout.clone() } else { views };
    if views.is_empty() {
        return Err(Failure::Input(anyhow!("the scene has no held-out views; pass --views")));
    }
    if let Some(v) = views.iter().find(|&&v| v >= scene.len()) {
        return Err(Failure::Input(anyhow!("view {v} does not exist; the scene has {} views", scene.len())));
    }
    let mut rows = Vec::new();
    for ckpt in checkpoints {
        let (model, store, cfg) = load_model(ckpt, common)?;
        let metrics = evaluate(&scene, &views, &model, &store, &cfg)?;
        let lambdas = (model.coarse.lambdas(&store), model.fine.lambdas(&store));
        rows.push(ComparisonRow::from_metrics(&ckpt.display().to_string(), &cfg, &metrics, lambdas));
    }
    let out = &common.out;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(parent)?;
    }
    if out.is_dir() {
        bail_input(format!("--out {} is a directory; eval writes a CSV file", out.display()))?;
    }
    write_comparison(&rows, out)?;
    print_rows(&rows);
    Ok(())
}

fn bail_input(msg: String) -> Result<(), Failure> {
    Err(Failure::Input(anyhow!(msg)))
}

fn print_rows(rows: &[ComparisonRow]) {
    for r in rows {
        println!(
            "{}\tvariant={}\tseed={}\tpsnr={:.4}\tssim={:.4}\tlambda_coarse={:?}",
            r.label, r.variant, r.seed, r.psnr, r.ssim, r.coarse_lambdas
        );
    }
}
