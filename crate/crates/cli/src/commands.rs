//! Subcommand implementations. Every output depends only on the inputs
//! named by the arguments; per-scene work may run in parallel but files
//! and rows are written in manifest order.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gridsight_core::camera::CameraRig;
use gridsight_core::flatplane::flatplane_map;
use gridsight_core::grid::{read_grid, write_grid, GridMap};
use gridsight_core::gt::{project_labeled_cloud, ClassMapping};
use gridsight_core::imageio::{read_pfm, read_pgm, read_ppm, write_ppm, RgbImage};
use gridsight_core::metrics::{
    confusion, default_settings, perturbation_sweep, write_sweep_file, EvalSample, FlatplaneMapper, FrontView, GridMapper,
};
use gridsight_core::par::Execution;
use gridsight_core::synth::{generate_dataset, DatasetConfig, Manifest, ManifestRecord};
use gridsight_nn::latent::{pca_fit, perturb_axis, Pca};
use gridsight_nn::ved::{TrainSample, Ved, VedConfig, VedMapper};
use gridsight_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::render::render_map;

/// Overrides applied on top of a dataset config file.
#[derive(Clone, Debug, Default)]
pub struct DatasetOverrides {
    pub render_width: Option<usize>,
    pub render_height: Option<usize>,
    pub input_width: Option<usize>,
    pub input_height: Option<usize>,
    pub slope_fraction: Option<f64>,
}

pub fn synth_gen(n: usize, out: &Path, seed: u64, config: Option<&Path>, o: &DatasetOverrides, exec: Execution) -> Result<()> {
    let mut cfg = match config {
        Some(p) => DatasetConfig::read_json(p)?,
        None => DatasetConfig::default(),
    };
    cfg.render_width = o.render_width.unwrap_or(cfg.render_width);
    cfg.render_height = o.render_height.unwrap_or(cfg.render_height);
    cfg.input_width = o.input_width.unwrap_or(cfg.input_width);
    cfg.input_height = o.input_height.unwrap_or(cfg.input_height);
    cfg.slope_fraction = o.slope_fraction.unwrap_or(cfg.slope_fraction);
    let manifest = generate_dataset(n, &cfg, seed, out, exec)?;
    eprintln!("wrote {} scenes to {}", manifest.records.len(), out.display());
    Ok(())
}

fn load_mapping(path: Option<&Path>) -> Result<ClassMapping> {
    Ok(match path {
        Some(p) => ClassMapping::read_json(p)?,
        None => ClassMapping::synthetic(),
    })
}

fn grid_path(dir: &Path, rec: &ManifestRecord) -> PathBuf {
    dir.join(format!("{}.json", rec.id))
}

fn write_grids(manifest: &Manifest, out: &Path, exec: Execution, f: impl Fn(&ManifestRecord) -> Result<GridMap> + Sync + Send) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    exec.try_map(manifest.records.len(), |i| -> Result<()> {
        let rec = &manifest.records[i];
        let map = f(rec).with_context(|| rec.id.clone())?;
        write_grid(&map, grid_path(out, rec))?;
        Ok(())
    })?;
    Ok(())
}

pub fn gt_build(manifest: &Path, rig: &Path, mapping: Option<&Path>, out: &Path, ceiling: Option<f64>, exec: Execution) -> Result<()> {
    let m = Manifest::read(manifest)?;
    let rig = CameraRig::read_json(rig)?;
    let mapping = load_mapping(mapping)?;
    let spec = truth_spec(&m)?;
    write_grids(&m, out, exec, |rec| {
        let labels = read_pgm(m.resolve(&rec.labels))?;
        let disp = read_pfm(m.resolve(&rec.disparity))?;
        Ok(project_labeled_cloud(&disp, &labels, &rig, &spec, &mapping, ceiling)?)
    })
}

pub fn flatplane_run(manifest: &Path, rig: &Path, mapping: Option<&Path>, out: &Path, exec: Execution) -> Result<()> {
    let m = Manifest::read(manifest)?;
    let rig = CameraRig::read_json(rig)?;
    let mapping = load_mapping(mapping)?;
    let spec = truth_spec(&m)?;
    write_grids(&m, out, exec, |rec| {
        let labels = read_pgm(m.resolve(&rec.labels))?;
        Ok(flatplane_map(&labels, &rig, &spec, &mapping)?)
    })
}

/// Grid geometry of the dataset, taken from its first truth grid.
fn truth_spec(m: &Manifest) -> Result<gridsight_core::GridSpec> {
    let first = m.records.first().context("manifest has no records")?;
    Ok(*read_grid(m.resolve(&first.true_grid))?.spec())
}

/// Overrides applied on top of a model config file.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub no_sampling: bool,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f32>,
    pub batch_size: Option<usize>,
}

/// Train on the manifest's RGB inputs. Targets are the analytic truth
/// grids unless `targets` names a directory of grids (e.g. weak ground
/// truth from `gt build`).
pub fn ved_train(manifest: &Path, config: Option<&Path>, targets: Option<&Path>, out: &Path, o: &TrainOverrides, exec: Execution) -> Result<()> {
    let m = Manifest::read(manifest)?;
    let mut cfg = match config {
        Some(p) => VedConfig::read_json(p)?,
        None => VedConfig::desk(),
    };
    if o.no_sampling {
        cfg.sampling_enabled = false;
    }
    cfg.epochs = o.epochs.unwrap_or(cfg.epochs);
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.learning_rate = o.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.batch_size = o.batch_size.unwrap_or(cfg.batch_size);
    let samples = exec.try_map(m.records.len(), |i| -> Result<TrainSample> {
        let rec = &m.records[i];
        let truth = match targets {
            Some(dir) => read_grid(grid_path(dir, rec))?,
            None => read_grid(m.resolve(&rec.true_grid))?,
        };
        Ok(TrainSample {
            image: read_ppm(m.resolve(&rec.rgb))?,
            truth,
        })
    })?;
    let mut model = Ved::new(cfg)?;
    let metrics = model.train(&samples, exec, |l| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  latent {:.5}  mapping {:.5}",
            l.epoch, l.loss, l.latent_loss, l.mapping_loss
        )
    })?;
    model.save(out)?;
    eprintln!("train mean IoU {:.4}, saved {}", metrics.train_mean_iou, out.display());
    Ok(())
}

pub fn ved_infer(ckpt: &Path, image: &Path, rig: &Path, out: &Path, exec: Execution) -> Result<()> {
    let model = Ved::load(ckpt)?;
    let rig = CameraRig::read_json(rig)?;
    let img = read_ppm(image)?;
    let grid = model.predict(&[&img], exec)?.remove(0);
    let mask = rig.fov_mask(grid.spec());
    write_grid(&grid.with_mask(mask)?, out)?;
    Ok(())
}

/// `ved encode` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
}

fn read_rgb_all(m: &Manifest, exec: Execution) -> Result<Vec<RgbImage>> {
    exec.try_map(m.records.len(), |i| Ok(read_ppm(m.resolve(&m.records[i].rgb))?))
}

pub fn ved_encode(ckpt: &Path, manifest: &Path, out: &Path, exec: Execution) -> Result<()> {
    let model = Ved::load(ckpt)?;
    let m = Manifest::read(manifest)?;
    let images = read_rgb_all(&m, exec)?;
    let refs: Vec<&RgbImage> = images.iter().collect();
    let e = Embeddings {
        ids: m.records.iter().map(|r| r.id.clone()).collect(),
        embeddings: model.encode(&refs, exec)?,
    };
    fs::write(out, serde_json::to_vec(&e)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EvalRow {
    id: String,
    mean_accuracy: f64,
    mean_iou: f64,
}

/// Per-grid metrics for every `*.json` grid in `pred_dir` with a
/// namesake in `truth_dir`, then a `mean` row over evaluable grids.
pub fn eval_run(pred_dir: &Path, truth_dir: &Path, out: &Path) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(pred_dir)
        .with_context(|| format!("reading {}", pred_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no grids in {}", pred_dir.display());
    }
    let mut rows = Vec::new();
    for name in &names {
        let pred = read_grid(pred_dir.join(name))?;
        let truth = read_grid(truth_dir.join(name))?;
        let cm = confusion(&pred, &truth)?;
        if cm.total() == 0 {
            eprintln!("{name}: no evaluable cells, skipped");
            continue;
        }
        rows.push(EvalRow {
            id: name.trim_end_matches(".json").to_string(),
            mean_accuracy: cm.mean_accuracy()?,
            mean_iou: cm.mean_iou()?,
        });
    }
    if rows.is_empty() {
        bail!("no grid has evaluable cells");
    }
    let n = rows.len() as f64;
    let mean = EvalRow {
        id: "mean".into(),
        mean_accuracy: rows.iter().map(|r| r.mean_accuracy).sum::<f64>() / n,
        mean_iou: rows.iter().map(|r| r.mean_iou).sum::<f64>() / n,
    };
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    for r in rows.iter().chain([&mean]) {
        w.serialize(r)?;
    }
    w.flush()?;
    eprintln!("mean accuracy {:.4}, mean IoU {:.4} over {} grids", mean.mean_accuracy, mean.mean_iou, rows.len());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Flatplane,
    Ved,
    VedNoSampling,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Flatplane => "flatplane",
            Method::Ved => "ved",
            Method::VedNoSampling => "ved-no-sampling",
        }
    }
}

fn eval_samples(m: &Manifest, exec: Execution) -> Result<Vec<EvalSample>> {
    exec.try_map(m.records.len(), |i| -> Result<EvalSample> {
        let rec = &m.records[i];
        Ok(EvalSample {
            view: FrontView {
                rgb: read_ppm(m.resolve(&rec.rgb))?,
                labels: read_pgm(m.resolve(&rec.labels))?,
                rig: CameraRig::read_json(m.resolve(&rec.rig))?,
            },
            truth: read_grid(m.resolve(&rec.true_grid))?,
        })
    })
}

/// No perturbation, ±1.5 degree pitch and ±5 degree roll.
pub fn eval_sweep(method: Method, manifest: &Path, ckpt: Option<&Path>, mapping: Option<&Path>, out: &Path, exec: Execution) -> Result<()> {
    let m = Manifest::read(manifest)?;
    let samples = eval_samples(&m, exec)?;
    let mapper: Box<dyn GridMapper> = match method {
        Method::Flatplane => Box::new(FlatplaneMapper {
            spec: *samples[0].truth.spec(),
            mapping: load_mapping(mapping)?,
        }),
        Method::Ved | Method::VedNoSampling => {
            let ckpt = ckpt.context("--ckpt is required for VED methods")?;
            Box::new(VedMapper {
                model: Ved::load(ckpt)?,
                exec,
            })
        }
    };
    let rows = perturbation_sweep(method.name(), mapper.as_ref(), &samples, &default_settings(), exec)?;
    write_sweep_file(&rows, out)?;
    for r in &rows {
        eprintln!("{:<10} IoU {:.4} ({:+.4})  acc {:.4} ({:+.4})", r.perturbation, r.mean_iou, -r.iou_downgrade, r.mean_accuracy, -r.acc_downgrade);
    }
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn pca_fit_cmd(embeddings: &Path, out: &Path) -> Result<()> {
    let e = read_embeddings(embeddings)?;
    let pca = pca_fit(&e.embeddings)?;
    pca.write_json(out)?;
    let total: f64 = pca.eigenvalues.iter().sum();
    let head: Vec<String> = pca.eigenvalues.iter().take(5).map(|v| format!("{:.3}", v / total)).collect();
    eprintln!("explained variance of the leading axes: {}", head.join(" "));
    Ok(())
}

/// Decode `base + amount * axis` for every amount and write each map as
/// a grid and a PPM rendering. The base is the embedding mean unless an
/// image is given.
pub fn pca_sweep(ckpt: &Path, pca: &Path, axis: usize, amounts: &[f64], image: Option<&Path>, out_dir: &Path, exec: Execution) -> Result<()> {
    let model = Ved::load(ckpt)?;
    let pca = Pca::read_json(pca)?;
    let base: Vec<f32> = match image {
        Some(p) => model.encode(&[&read_ppm(p)?], exec)?.remove(0),
        None => pca.mean.iter().map(|&v| v as f32).collect(),
    };
    let latents = amounts
        .iter()
        .map(|&a| perturb_axis(&base, &pca, axis, a))
        .collect::<Result<Vec<_>, _>>()?;
    let probs: Tensor = model.decode(&latents, exec)?;
    let grids = model.grids_from_probs(&probs)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (a, g) in amounts.iter().zip(&grids) {
        let stem = format!("axis{axis}_amount{a}");
        write_grid(g, out_dir.join(format!("{stem}.json")))?;
        write_ppm(&render_map(g, 4), out_dir.join(format!("{stem}.ppm")))?;
    }
    Ok(())
}

pub fn render_map_cmd(grid: &Path, out: &Path, scale: usize) -> Result<()> {
    write_ppm(&render_map(&read_grid(grid)?, scale), out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub parameters: usize,
    pub input: String,
    pub runs: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub hz: f64,
}

/// Single-image inference latency on seeded random inputs. Uses the
/// checkpoint if given, otherwise a freshly initialised preset model.
pub fn bench_infer(ckpt: Option<&Path>, preset: Preset, n: usize, exec: Execution) -> Result<BenchReport> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let (model, name) = match ckpt {
        Some(p) => (Ved::load(p)?, p.display().to_string()),
        None => match preset {
            Preset::Desk => (Ved::new(VedConfig::desk())?, "desk".to_string()),
            Preset::Paper => (Ved::new(VedConfig::paper_scale())?, "paper-scale".to_string()),
        },
    };
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = RgbImage::from_fn(cfg.input_width, cfg.input_height, |_, _| [rng.random(), rng.random(), rng.random()]);
    model.predict(&[&img], exec)?;
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        let t = Instant::now();
        model.predict(&[&img], exec)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / n as f64;
    times.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
    Ok(BenchReport {
        model: name,
        parameters: model.num_parameters(),
        input: format!("{}x{}", cfg.input_width, cfg.input_height),
        runs: n,
        mean_ms: mean,
        median_ms: median,
        hz: 1e3 / mean,
    })
}
