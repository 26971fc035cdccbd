use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use episdf::formats;
use episdf::geometry::BoundingBox;
use episdf::meshing::{self, Mesh};
use episdf::model::ModelParams;
use episdf::scenegen::{self, AnalyticScene, SceneBundle, SceneSpec, ShapeKind};
use episdf::trainer::{train, TrainConfig, TrainState};
use episdf::verify::{self, Suite};
use episdf::Error;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;

#[derive(Parser)]
#[command(name = "episdf", version, about = "Sparse-view neural SDF reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic analytic scene into a bundle directory.
    GenScene(GenSceneArgs),
    /// Optimise a model on a scene bundle.
    Train(TrainArgs),
    /// Render color, depth and opacity for every bundle view.
    Render(ModelArgs),
    /// Extract the zero level set as an OBJ mesh.
    ExtractMesh(MeshArgs),
    /// Depth metrics of a model (or a directory of depth maps) against the bundle.
    EvalDepth(EvalDepthArgs),
    /// Chamfer distance between a mesh and a reference surface.
    EvalChamfer(EvalChamferArgs),
    /// Finite-difference gradient checks.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Sphere,
    Box,
    Union,
}

impl From<Shape> for ShapeKind {
    fn from(s: Shape) -> Self {
        match s {
            Shape::Sphere => ShapeKind::Sphere,
            Shape::Box => ShapeKind::Box,
            Shape::Union => ShapeKind::Union,
        }
    }
}

#[derive(Args)]
struct GenSceneArgs {
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sphere")]
    shape: Shape,
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Image size as WxH.
    #[arg(long, default_value = "64x64", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.3)]
    mono_alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    mono_beta: f64,
    #[arg(long, default_value_t = 0.01)]
    mono_sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene bundle directory.
    #[arg(long)]
    scene: PathBuf,
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics.csv and config.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the checkpoint and optimizer state in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Scene bundle directory.
    #[arg(long)]
    scene: PathBuf,
    /// Model checkpoint (EPIS1).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config the checkpoint was trained with.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MeshArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Marching-cubes cells per axis.
    #[arg(long, default_value_t = 64)]
    grid: usize,
}

#[derive(Args)]
struct EvalDepthArgs {
    /// Scene bundle directory.
    #[arg(long)]
    scene: PathBuf,
    /// Model checkpoint to render depth from.
    #[arg(long, conflicts_with = "depths", required_unless_present = "depths")]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed `depth_{i}.pfm` maps instead of a model.
    #[arg(long)]
    depths: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for depth_report.txt.
    #[arg(long)]
    out: PathBuf,
    /// Accuracy thresholds in scene units.
    #[arg(long, value_delimiter = ',', default_value = "0.02,0.04,0.08")]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct EvalChamferArgs {
    /// Predicted mesh (OBJ).
    #[arg(long)]
    mesh: PathBuf,
    /// Reference mesh (OBJ); mutually exclusive with --shape.
    #[arg(long, conflicts_with = "shape", required_unless_present = "shape")]
    reference: Option<PathBuf>,
    /// Analytic reference surface.
    #[arg(long, value_enum)]
    shape: Option<Shape>,
    /// Bundle whose bounding box encloses the analytic reference.
    #[arg(long, requires = "shape")]
    scene: Option<PathBuf>,
    /// Points sampled from each surface.
    #[arg(long, default_value_t = 10000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for chamfer_report.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    All,
    Diffcore,
    Featvol,
    Epiattn,
    Renderer,
    Losses,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    module: Module,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let parse = |v: &str| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(w)?, parse(h)?))
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
            Error::InvalidArgument(_) => EXIT_USAGE,
            Error::Checkpoint(_) | Error::ParamMismatch { .. } => EXIT_CHECKPOINT,
            Error::Divergence { .. } | Error::NanGradient(_) => EXIT_DIVERGENCE,
            _ => EXIT_VERIFY,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        msg: format!("{}: {e}", path.display()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            TrainConfig::parse(&text, &p.display().to_string()).map_err(|e| Failure {
                code: EXIT_USAGE,
                msg: e.to_string(),
            })
        }
    }
}

fn load_model(args: &ModelArgs) -> Result<(SceneBundle, TrainConfig, ModelParams), Failure> {
    let bundle = scenegen::read_bundle(&args.scene)?;
    let config = load_config(args.config.as_deref())?;
    let params = ModelParams::load(&config.model, &args.checkpoint)?;
    Ok((bundle, config, params))
}

fn gen_scene(a: GenSceneArgs) -> CmdResult {
    let spec = SceneSpec {
        shape: a.shape.into(),
        views: a.views,
        width: a.res.0,
        height: a.res.1,
        seed: a.seed,
        mono_alpha: a.mono_alpha,
        mono_beta: a.mono_beta,
        mono_sigma: a.mono_sigma,
        ..SceneSpec::default()
    };
    let bundle = scenegen::generate_bundle(&spec)?;
    scenegen::write_bundle(&bundle, &a.out)?;
    let fg: usize = bundle.views.iter().map(|v| v.mask.iter().filter(|&&m| m).count()).sum();
    println!(
        "wrote {} views of {}x{} to {} ({} foreground pixels)",
        bundle.views.len(),
        spec.width,
        spec.height,
        a.out.display(),
        fg
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> CmdResult {
    let mut config = load_config(a.config.as_deref())?;
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(v) = a.iterations {
        overrides.push(("iterations".into(), v.to_string()));
    }
    if let Some(v) = a.learning_rate {
        overrides.push(("learning_rate".into(), v.to_string()));
    }
    if let Some(v) = a.seed {
        overrides.push(("seed".into(), v.to_string()));
    }
    if let Some(v) = a.checkpoint_every {
        overrides.push(("checkpoint_every".into(), v.to_string()));
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure {
            code: EXIT_USAGE,
            msg: format!("--set expects KEY=VALUE, got `{kv}`"),
        })?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in &overrides {
        config.set(k, v)?;
    }
    config.validate()?;
    let bundle = scenegen::read_bundle(&a.scene)?;
    let state = if a.resume {
        TrainState::load(&config, &a.out)?
    } else {
        TrainState::new(&config)?
    };
    print!("{}", config.to_text());
    let report_every = (config.iterations / 20).max(1);
    let outcome = train(&bundle, &config, state, Some(&a.out), |log| {
        if (log.iteration + 1) % report_every == 0 {
            info!("{}", log.csv_row());
        }
    })?;
    match outcome.logs.last() {
        Some(last) => println!(
            "final iteration {}: color {:.6} eik {:.6} sparse {:.6} global {:.6} local {:.6} total {:.6}",
            last.iteration,
            last.components[0],
            last.components[1],
            last.components[2],
            last.components[3],
            last.components[4],
            last.total
        ),
        None => println!("no iterations run; wrote initial checkpoint"),
    }
    Ok(())
}

fn render(a: ModelArgs) -> CmdResult {
    let (bundle, config, params) = load_model(&a)?;
    create_dir(&a.out)?;
    let rcfg = config.render_config(false);
    for i in 0..bundle.views.len() {
        let r = meshing::render_bundle_view(&params, &config.model, &bundle, i, &rcfg)?;
        let (w, h) = (bundle.width(), bundle.height());
        let rgb: Vec<u8> = r.color.iter().map(|&c| formats::quantize(c)).collect();
        let f32s = |d: &[f64]| d.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        write(&a.out.join(format!("color_{i}.ppm")), &formats::encode_ppm(w, h, &rgb))?;
        write(
            &a.out.join(format!("depth_{i}.pfm")),
            &formats::encode_pfm(w, h, &f32s(&r.depth)),
        )?;
        write(
            &a.out.join(format!("acc_{i}.pfm")),
            &formats::encode_pfm(w, h, &f32s(&r.acc)),
        )?;
    }
    println!("rendered {} views to {}", bundle.views.len(), a.out.display());
    Ok(())
}

fn mesh_to_obj(mesh: &Mesh) -> String {
    let tris: Vec<[usize; 3]> = mesh.triangles.iter().map(|t| t.map(|i| i as usize)).collect();
    formats::format_obj(&mesh.vertices, &tris)
}

fn read_mesh(path: &Path) -> Result<Mesh, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (vertices, faces) = formats::parse_obj(&text, &path.display().to_string())?;
    let triangles = faces.iter().map(|f| f.map(|i| i as u32)).collect();
    Ok(Mesh { vertices, triangles })
}

fn extract_mesh(a: MeshArgs) -> CmdResult {
    let (bundle, config, params) = load_model(&a.model)?;
    let mesh = meshing::extract_mesh(&params, &config.model, &bundle, a.grid, None)?;
    create_dir(&a.model.out)?;
    let path = a.model.out.join("mesh.obj");
    write(&path, mesh_to_obj(&mesh).as_bytes())?;
    if mesh.is_empty() {
        warn!("zero level set is empty; wrote an empty mesh");
    }
    println!(
        "wrote {} ({} vertices, {} triangles)",
        path.display(),
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}

fn eval_depth(a: EvalDepthArgs) -> CmdResult {
    let bundle = scenegen::read_bundle(&a.scene)?;
    let (mut pred, mut gt, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    if let Some(ckpt) = &a.checkpoint {
        let config = load_config(a.config.as_deref())?;
        let params = ModelParams::load(&config.model, ckpt)?;
        let rcfg = config.render_config(false);
        for i in 0..bundle.views.len() {
            pred.extend(meshing::render_bundle_view(&params, &config.model, &bundle, i, &rcfg)?.depth);
        }
    } else if let Some(dir) = &a.depths {
        for i in 0..bundle.views.len() {
            let path = dir.join(format!("depth_{i}.pfm"));
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let (w, h, d) = formats::parse_pfm(&bytes, &path.display().to_string())?;
            if (w, h) != (bundle.width(), bundle.height()) {
                return Err(Failure {
                    code: EXIT_IO,
                    msg: format!("{}: size {w}x{h} does not match the bundle", path.display()),
                });
            }
            pred.extend(d.iter().map(|&v| v as f64));
        }
    }
    for v in &bundle.views {
        gt.extend_from_slice(&v.depth);
        mask.extend_from_slice(&v.mask);
    }
    let metrics = meshing::depth_metrics(&pred, &gt, &mask, &a.thresholds)?;
    let report = meshing::format_report(&metrics.report_pairs());
    create_dir(&a.out)?;
    write(&a.out.join("depth_report.txt"), report.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn eval_chamfer(a: EvalChamferArgs) -> CmdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mesh = read_mesh(&a.mesh)?;
    let pred = meshing::sample_mesh(&mesh, a.samples, &mut rng)?;
    let reference = match (&a.reference, a.shape) {
        (Some(path), _) => meshing::sample_mesh(&read_mesh(path)?, a.samples, &mut rng)?,
        (None, Some(shape)) => {
            let bbox = match &a.scene {
                Some(dir) => scenegen::read_bundle(dir)?.bbox,
                None => {
                    let h = SceneSpec::default().bbox_half;
                    BoundingBox::new([-h; 3], [h; 3])?
                }
            };
            let scene = AnalyticScene::preset(shape.into());
            meshing::analytic_surface_samples(&scene, &bbox, a.samples, &mut rng)?
        }
        (None, None) => unreachable!("clap requires --reference or --shape"),
    };
    let c = meshing::chamfer(&pred, &reference)?;
    let report = meshing::format_report(&[
        ("accuracy".into(), c.accuracy),
        ("completeness".into(), c.completeness),
        ("chamfer".into(), c.mean),
    ]);
    create_dir(&a.out)?;
    write(&a.out.join("chamfer_report.txt"), report.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CmdResult {
    let suites: Vec<Suite> = match a.module {
        Module::All => Suite::ALL.to_vec(),
        Module::Diffcore => vec![Suite::Diffcore],
        Module::Featvol => vec![Suite::Featvol],
        Module::Epiattn => vec![Suite::Epiattn],
        Module::Renderer => vec![Suite::Renderer],
        Module::Losses => vec![Suite::Losses],
    };
    let mut results = Vec::new();
    for s in suites {
        results.extend(verify::run_suite(s, a.seed)?);
    }
    print!("{}", verify::format_table(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_VERIFY,
            msg: format!("{failed} of {} checks failed", results.len()),
        });
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::Train(a) => run_train(a),
        Command::Render(a) => render(a),
        Command::ExtractMesh(a) => extract_mesh(a),
        Command::EvalDepth(a) => eval_depth(a),
        Command::EvalChamfer(a) => eval_chamfer(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
