//! Training: configuration, Adam, patch sampling and the per-iteration
//! pipeline (patch rays → render → losses → step), with checkpoints and a
//! metrics CSV.
//!
//! Every iteration draws from its own random stream (seed, iteration), so
//! a run resumed from a checkpoint follows the uninterrupted trajectory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::checkpoint::{self, NamedArray};
use crate::diff::{DualArray, Tape};
use crate::error::{Error, Result};
use crate::featvol::dilate_cells;
use crate::geometry::{Ray, Vec3};
use crate::losses::{self, LossComponents, LossWeights};
use crate::model::{cells_along_rays, query_samples, ModelConfig, ModelParams, SceneContext};
use crate::params::ParamSet;
use crate::renderer::{clip_to_box, render_rays, RenderConfig};
use crate::scenegen::{BundleView, SceneBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub rays_per_batch: usize,
    pub patch_size: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub triples_per_patch: usize,
    /// Rays per batch whose SDF is differenced for the eikonal term.
    pub eikonal_rays: usize,
    pub eikonal_step: f64,
    pub min_foreground: f64,
    /// Include background pixels (target colour 0) in the colour loss.
    pub color_background: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-4,
            rays_per_batch: 256,
            patch_size: 5,
            n_coarse: 16,
            n_fine: 16,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            triples_per_patch: 8,
            eikonal_rays: 8,
            eikonal_step: 0.02,
            min_foreground: 0.6,
            color_background: false,
            model: ModelConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "iterations" => self.iterations = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "rays_per_batch" => self.rays_per_batch = parse_value(key, v)?,
            "patch_size" => self.patch_size = parse_value(key, v)?,
            "n_coarse" => self.n_coarse = parse_value(key, v)?,
            "n_fine" => self.n_fine = parse_value(key, v)?,
            "lambda1" => self.weights.lambda1 = parse_value(key, v)?,
            "lambda2" => self.weights.lambda2 = parse_value(key, v)?,
            "lambda3" => self.weights.lambda3 = parse_value(key, v)?,
            "lambda4" => self.weights.lambda4 = parse_value(key, v)?,
            "tau" => self.weights.tau = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "triples_per_patch" => self.triples_per_patch = parse_value(key, v)?,
            "eikonal_rays" => self.eikonal_rays = parse_value(key, v)?,
            "eikonal_step" => self.eikonal_step = parse_value(key, v)?,
            "min_foreground" => self.min_foreground = parse_value(key, v)?,
            "color_background" => self.color_background = parse_value(key, v)?,
            "channels" => self.model.channels = parse_value(key, v)?,
            "heads" => self.model.heads = parse_value(key, v)?,
            "ray_heads" => self.model.ray_heads = parse_value(key, v)?,
            "embed_freqs" => self.model.embed_freqs = parse_value(key, v)?,
            "volume_resolution" => self.model.volume_resolution = parse_value(key, v)?,
            "geometry_hidden" => self.model.geometry_hidden = parse_value(key, v)?,
            "weight_hidden" => self.model.weight_hidden = parse_value(key, v)?,
            "residual" => self.model.residual = parse_value(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Flat `key = value` text; `#` starts a comment. Keys not present keep
    /// their defaults.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(file, n + 1, "expected `key = value`"))?;
            cfg.set(k, v).map_err(|e| Error::parse(file, n + 1, e.to_string()))?;
        }
        cfg.validate().map_err(|e| Error::parse(file, 1, e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let m = &self.model;
        let mut s = String::new();
        let pairs: [(&str, String); 26] = [
            ("iterations", self.iterations.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("rays_per_batch", self.rays_per_batch.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("n_coarse", self.n_coarse.to_string()),
            ("n_fine", self.n_fine.to_string()),
            ("lambda1", format!("{:?}", w.lambda1)),
            ("lambda2", format!("{:?}", w.lambda2)),
            ("lambda3", format!("{:?}", w.lambda3)),
            ("lambda4", format!("{:?}", w.lambda4)),
            ("tau", format!("{:?}", w.tau)),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("triples_per_patch", self.triples_per_patch.to_string()),
            ("eikonal_rays", self.eikonal_rays.to_string()),
            ("eikonal_step", format!("{:?}", self.eikonal_step)),
            ("min_foreground", format!("{:?}", self.min_foreground)),
            ("color_background", self.color_background.to_string()),
            ("channels", m.channels.to_string()),
            ("heads", m.heads.to_string()),
            ("ray_heads", m.ray_heads.to_string()),
            ("embed_freqs", m.embed_freqs.to_string()),
            ("volume_resolution", m.volume_resolution.to_string()),
            ("geometry_hidden", m.geometry_hidden.to_string()),
            ("weight_hidden", m.weight_hidden.to_string()),
            ("residual", m.residual.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 || self.n_coarse < 2 {
            return Err(Error::invalid(
                "rays_per_batch must be positive and n_coarse at least 2",
            ));
        }
        if self.patch_size < 2 || self.patch_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "patch_size must be odd and >= 3, got {}",
                self.patch_size
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.eikonal_step > 0.0) {
            return Err(Error::invalid("learning_rate and eikonal_step must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_foreground) {
            return Err(Error::invalid("min_foreground must lie in [0, 1]"));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn render_config(&self, stratified: bool) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            stratified,
        }
    }

    pub fn patches_per_batch(&self) -> usize {
        (self.rays_per_batch / (self.patch_size * self.patch_size)).max(1)
    }
}

/// Bias-corrected Adam over a fixed list of named arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, a)| a.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. `grads` follows the order of `params.named()`.
    pub fn update<P: ParamSet>(&mut self, params: &P, grads: &[Vec<f64>], lr: f64) -> Result<P> {
        let names = params.named();
        if grads.len() != names.len() || self.m.len() != names.len() {
            return Err(Error::invalid("gradient list does not match parameters"));
        }
        for ((name, a), g) in names.iter().zip(grads) {
            if g.len() != a.len() {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    detail: format!("gradient has {} values, parameter {}", g.len(), a.len()),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NanGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut i = 0;
        Ok(params.map("", &mut |_, a| {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            i += 1;
            let data = a
                .values()
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                    p - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps)
                })
                .collect();
            DualArray::from_parts(a.shape().to_vec(), data)
        }))
    }

    pub fn to_named<P: ParamSet>(&self, params: &P) -> Vec<NamedArray> {
        let mut out = vec![NamedArray {
            name: "step".into(),
            shape: vec![1],
            values: vec![self.step as f64],
        }];
        for (((name, a), m), v) in params.named().iter().zip(&self.m).zip(&self.v) {
            for (tag, vals) in [("m", m), ("v", v)] {
                out.push(NamedArray {
                    name: format!("{tag}.{name}"),
                    shape: a.shape().to_vec(),
                    values: vals.clone(),
                });
            }
        }
        out
    }

    pub fn from_named<P: ParamSet>(params: &P, records: &[NamedArray]) -> Result<Self> {
        let mut adam = Self::new(params);
        let names = params.named();
        if records.len() != 1 + 2 * names.len() || records[0].name != "step" {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        adam.step = records[0].values[0] as u64;
        for (i, (name, a)) in names.iter().enumerate() {
            for (k, tag) in ["m", "v"].iter().enumerate() {
                let r = &records[1 + 2 * i + k];
                if r.name != format!("{tag}.{name}") || r.values.len() != a.len() {
                    return Err(Error::ParamMismatch {
                        name: name.clone(),
                        detail: "optimizer record missing or misshapen".into(),
                    });
                }
                if k == 0 {
                    adam.m[i] = r.values.clone();
                } else {
                    adam.v[i] = r.values.clone();
                }
            }
        }
        Ok(adam)
    }
}

/// A square block of pixels from one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub view: usize,
    /// Row-major `(x, y)` pixel coordinates.
    pub pixels: Vec<(usize, usize)>,
    /// `3 * k * k` colours.
    pub colors: Vec<f64>,
    pub mono: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Draws a `size x size` patch of `view` with at least `min_foreground` of
/// its pixels in the mask (up to 100 draws).
pub fn sample_patch(
    view: &BundleView,
    view_index: usize,
    size: usize,
    min_foreground: f64,
    rng: &mut impl Rng,
) -> Result<Patch> {
    let (w, h) = (view.camera.width, view.camera.height);
    if size > w || size > h {
        return Err(Error::invalid(format!("patch {size} does not fit a {w}x{h} image")));
    }
    for _ in 0..100 {
        let x0 = rng.random_range(0..=w - size);
        let y0 = rng.random_range(0..=h - size);
        let pixels: Vec<(usize, usize)> = (0..size * size).map(|i| (x0 + i % size, y0 + i / size)).collect();
        let fg = pixels.iter().filter(|&&(x, y)| view.mask[y * w + x]).count();
        if (fg as f64) < min_foreground * (size * size) as f64 {
            continue;
        }
        return Ok(Patch {
            view: view_index,
            colors: pixels.iter().flat_map(|&(x, y)| view.image.pixel(x, y)).collect(),
            mono: pixels.iter().map(|&(x, y)| view.mono[y * w + x]).collect(),
            mask: pixels.iter().map(|&(x, y)| view.mask[y * w + x]).collect(),
            pixels,
        });
    }
    Err(Error::invalid(format!(
        "no patch with {:.0}% foreground found in view {view_index} after 100 draws",
        min_foreground * 100.0
    )))
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// Fresh parameters for `config` (random stream 0 of the seed).
pub fn init_params(config: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(&config.model, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    /// Completed iterations.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let params = init_params(config)?;
        Ok(Self {
            adam: Adam::new(&params),
            params,
            iteration: 0,
        })
    }

    /// Writes `checkpoint.epis` and `optimizer.epis` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(&dir.join("checkpoint.epis"))?;
        let mut opt = self.adam.to_named(&self.params);
        opt.push(NamedArray {
            name: "iteration".into(),
            shape: vec![1],
            values: vec![self.iteration as f64],
        });
        checkpoint::write(&dir.join("optimizer.epis"), &opt)
    }

    pub fn load(config: &TrainConfig, dir: &Path) -> Result<Self> {
        let params = ModelParams::load(&config.model, &dir.join("checkpoint.epis"))?;
        let mut opt = checkpoint::read(&dir.join("optimizer.epis"))?;
        let it = opt
            .pop()
            .filter(|r| r.name == "iteration")
            .ok_or_else(|| Error::Checkpoint("optimizer state lacks the iteration count".into()))?;
        Ok(Self {
            adam: Adam::from_named(&params, &opt)?,
            params,
            iteration: it.values[0] as usize,
        })
    }
}

/// Loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub components: [f64; 5],
    pub total: f64,
}

impl IterationLog {
    pub fn csv_row(&self) -> String {
        losses::csv_row(self.iteration, self.components, self.total)
    }
}

/// Everything one iteration computes before the parameter update.
pub struct StepResult {
    pub log: IterationLog,
    /// Gradients in `params.named()` order.
    pub grads: Vec<Vec<f64>>,
}

fn patch_rays(bundle: &SceneBundle, patches: &[Patch]) -> Result<Vec<Ray>> {
    let mut rays = Vec::new();
    for p in patches {
        let cam = &bundle.views[p.view].camera;
        for &(x, y) in &p.pixels {
            rays.push(cam.pixel_to_ray([x as f64, y as f64], 0.0, f64::MAX)?);
        }
    }
    Ok(rays)
}

/// Central-difference SDF gradients of whole rays translated along each
/// axis; returns `[E * N, 3]`.
fn fd_sdf_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &SceneContext,
    rays_points: &[Vec3],
    samples_per_ray: usize,
    h: f64,
) -> Result<DualArray> {
    let mut cols = Vec::with_capacity(3);
    for axis in 0..3 {
        let shift = |sign: f64| -> Vec<Vec3> {
            rays_points
                .iter()
                .map(|&p| {
                    let mut q = p;
                    q[axis] += sign * h;
                    q
                })
                .collect()
        };
        let plus = query_samples(params, config, ctx, &shift(1.0), samples_per_ray)?.sdf;
        let minus = query_samples(params, config, ctx, &shift(-1.0), samples_per_ray)?.sdf;
        cols.push(plus.sub(&minus)?.scale(0.5 / h)?);
    }
    DualArray::concat(&[&cols[0], &cols[1], &cols[2]], 1)
}

/// Forward and backward pass of one iteration on `params`.
pub fn train_step(
    bundle: &SceneBundle,
    config: &TrainConfig,
    params: &ModelParams,
    iteration: usize,
) -> Result<StepResult> {
    let mut rng = iteration_rng(config.seed, iteration);
    let nviews = bundle.views.len();
    let target = iteration % nviews;
    let k = config.patch_size;
    let patches: Vec<Patch> = (0..config.patches_per_batch())
        .map(|_| sample_patch(&bundle.views[target], target, k, config.min_foreground, &mut rng))
        .collect::<Result<_>>()?;
    let rays = patch_rays(bundle, &patches)?;
    let res = config.model.volume_resolution;
    let clipped: Vec<Ray> = rays.iter().filter_map(|r| clip_to_box(r, &bundle.bbox)).collect();

    let eik_count = config.eikonal_rays.min(clipped.len());
    let eik_idx: Vec<usize> = rand::seq::index::sample(&mut rng, clipped.len(), eik_count).into_vec();
    let eik_rays: Vec<Ray> = eik_idx.iter().map(|&i| clipped[i]).collect();
    let mut cells = cells_along_rays(&bundle.bbox, res, &clipped);
    if !eik_rays.is_empty() {
        cells.extend(dilate_cells(res, &cells_along_rays(&bundle.bbox, res, &eik_rays), 1));
        cells.sort_unstable();
        cells.dedup();
    }

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let sources: Vec<_> = (0..nviews)
        .filter(|&v| v != target)
        .map(|v| (&bundle.views[v].camera, &bundle.views[v].image))
        .collect();
    let ctx = SceneContext::build(&bound, &config.model, &bundle.bbox, &sources, Some(&cells))?;
    let coarse_ctx = ctx.detached();
    let tcam = &bundle.views[target].camera;
    let out = render_rays(
        &bound,
        params,
        &config.model,
        &ctx,
        &coarse_ctx,
        tcam,
        &rays,
        &config.render_config(true),
        &mut rng,
    )?;

    let gt: Vec<f64> = patches.iter().flat_map(|p| p.colors.iter().copied()).collect();
    let fg: Vec<bool> = patches
        .iter()
        .flat_map(|p| p.mask.iter().map(|&m| m || config.color_background))
        .collect();
    let color = losses::color_loss(&out.color, &gt, &fg)?;

    let acc = out.acc.values();
    let kk = k * k;
    let mut triples = Vec::new();
    let mut local_terms = Vec::new();
    let mono: Vec<f64> = patches.iter().flat_map(|p| p.mono.iter().copied()).collect();
    for (pi, p) in patches.iter().enumerate() {
        let valid: Vec<bool> = (0..kk).map(|i| p.mask[i] && acc[pi * kk + i] > 0.5).collect();
        triples.extend(
            losses::sample_triples(&valid, config.triples_per_patch, &mut rng)
                .into_iter()
                .map(|(s, a, b)| (pi * kk + s, pi * kk + a, pi * kk + b)),
        );
        let depth = out.depth.narrow(0, pi * kk, kk)?;
        let (l, ok) = losses::local_gradient_loss(&depth, &p.mono, &valid, k)?;
        if ok {
            local_terms.push(l);
        }
    }
    let (global, _) = losses::global_triplet_loss(&out.depth, &mono, &triples)?;
    let local = if local_terms.is_empty() {
        DualArray::scalar(0.0)
    } else {
        let refs: Vec<&DualArray> = local_terms.iter().collect();
        DualArray::concat(&refs, 0)?.mean()?
    };
    let sparse = losses::sparse_loss(&out.sdf, config.weights.tau)?;
    let eikonal = if eik_rays.is_empty() {
        DualArray::scalar(0.0)
    } else {
        // reuse the final samples of the chosen rays
        let n = out.samples[0].len();
        let hit_pos: Vec<usize> = eik_rays
            .iter()
            .map(|r| {
                out.hits
                    .iter()
                    .position(|(_, h)| h == r)
                    .expect("eikonal rays are hits")
            })
            .collect();
        let pts: Vec<Vec3> = hit_pos
            .iter()
            .flat_map(|&i| {
                let ray = out.hits[i].1;
                out.samples[i].iter().map(move |&t| ray.at(t))
            })
            .collect();
        let grads = fd_sdf_gradients(&bound, &config.model, &ctx, &pts, n, config.eikonal_step)?;
        losses::eikonal_from_gradients(&grads)?
    };
    let comps = LossComponents {
        color,
        eikonal,
        sparse,
        global,
        local,
    };
    let total = losses::total_loss(&comps, &config.weights)?;
    let log = IterationLog {
        iteration,
        components: comps.values(),
        total: total.item(),
    };
    if !log.total.is_finite() {
        return Err(Error::Divergence { iteration });
    }
    let g = tape.backward(&total)?;
    let grads = bound.named().iter().map(|(_, a)| g.get(a).to_vec()).collect();
    Ok(StepResult { log, grads })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub logs: Vec<IterationLog>,
}

/// Files written by [`train`] into its output directory.
pub struct TrainFiles {
    pub dir: PathBuf,
}

impl TrainFiles {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.epis")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
}

/// Runs iterations `state.iteration .. config.iterations`. With `out`, the
/// effective config, metrics CSV and checkpoints are written there; on
/// divergence the last good state is saved before the error is returned.
pub fn train(
    bundle: &SceneBundle,
    config: &TrainConfig,
    state: TrainState,
    out: Option<&Path>,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if bundle.views.len() < 2 {
        return Err(Error::invalid("training needs at least 2 views"));
    }
    let mut csv = String::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = TrainFiles { dir: dir.to_path_buf() };
        std::fs::write(files.config(), config.to_text()).map_err(|e| Error::io(files.config(), e))?;
        let metrics = files.metrics();
        csv = if state.iteration > 0 {
            std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?
        } else {
            format!("{}\n", losses::CSV_HEADER)
        };
    }
    let flush = |csv: &str, state: &TrainState| -> Result<()> {
        if let Some(dir) = out {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            state.save(dir)?;
        }
        Ok(())
    };
    let mut state = state;
    let mut logs = Vec::new();
    while state.iteration < config.iterations {
        let it = state.iteration;
        let step = match train_step(bundle, config, &state.params, it) {
            Ok(s) => s,
            Err(e @ (Error::Divergence { .. } | Error::NanGradient(_))) => {
                flush(&csv, &state)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let mut adam = state.adam.clone();
        let params = match adam.update(&state.params, &step.grads, config.learning_rate) {
            Ok(p) => p,
            Err(e) => {
                flush(&csv, &state)?;
                return Err(e);
            }
        };
        state = TrainState {
            params,
            adam,
            iteration: it + 1,
        };
        if out.is_some() {
            csv.push_str(&step.log.csv_row());
            csv.push('\n');
        }
        progress(&step.log);
        logs.push(step.log);
        if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
            flush(&csv, &state)?;
        }
    }
    flush(&csv, &state)?;
    Ok(TrainOutcome { state, logs })
}

/// Mean of the first and last `fraction` of total losses.
pub fn loss_trend(logs: &[IterationLog], fraction: f64) -> Option<(f64, f64)> {
    let n = ((logs.len() as f64 * fraction).round() as usize).max(1);
    if logs.len() < 2 * n {
        return None;
    }
    let mean = |s: &[IterationLog]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
    Some((mean(&logs[..n]), mean(&logs[logs.len() - n..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("lambda3", "0").unwrap();
        cfg.set("residual", "true").unwrap();
        let back = TrainConfig::parse(&cfg.to_text(), "c.txt").unwrap();
        assert_eq!(back, cfg);
        let err = TrainConfig::parse("iterations = 5\nbogus = 1\n", "c.txt").unwrap_err();
        assert!(err.to_string().contains("c.txt:2"), "{err}");
        assert!(TrainConfig::parse("patch_size = 4", "c.txt").is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let p = crate::params::Linear {
            weight: DualArray::new(vec![1, 2], vec![1.0, -1.0]).unwrap(),
            bias: DualArray::vector(vec![0.5]),
        };
        let mut adam = Adam::new(&p);
        let q = adam.update(&p, &[vec![3.0, -0.2], vec![0.0]], 1e-3).unwrap();
        assert!((q.weight.values()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((q.weight.values()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(q.bias.values(), &[0.5]);
        let err = adam.update(&q, &[vec![f64::NAN, 0.0], vec![0.0]], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NanGradient(n) if n == "weight"));
    }
}
