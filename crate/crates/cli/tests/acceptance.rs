//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). A FAIL is reported but only
//! turns into a non-zero exit status with `ACCEPTANCE_STRICT=1`, so the
//! report can be produced by an ordinary `cargo test` run.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gridsight::experiment::{test_scenes, train_samples, TestScene};
use gridsight_core::camera::{CameraRig, Intrinsics};
use gridsight_core::flatplane::flatplane_map;
use gridsight_core::grid::{GridMap, GridSpec, SemanticClass};
use gridsight_core::gt::{project_labeled_cloud, ClassMapping};
use gridsight_core::metrics::{
    confusion, confusion_masked, evaluate_refs, perturbation_sweep, EvalSample, FlatplaneMapper, SweepSetting,
};
use gridsight_core::par::Execution;
use gridsight_core::perturb::Perturbation;
use gridsight_core::synth::{render_geometry, sample_scenes, true_grid, DatasetConfig};
use gridsight_core::RgbImage;
use gridsight_nn::gradcheck::check_all_ops;
use gridsight_nn::latent::pca_fit;
use gridsight_nn::tensor::{Graph, Tensor};
use gridsight_nn::ved::{TrainSample, Ved, VedConfig, VedMapper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ACCEPTANCE_VED: &str = include_str!("../configs/acceptance_ved.json");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TRAIN_SCENES: usize = 300;
const TEST_SCENES: usize = 100;
const TRAIN_SEED: u64 = 1000;
const TEST_SEED: u64 = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn exec() -> Execution {
    match std::env::var("GRIDSIGHT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 1 => {
            let _ = gridsight_core::par::init_threads(n);
            Execution::Parallel
        }
        _ => Execution::Sequential,
    }
}

fn geometry() -> Outcome {
    let t = Instant::now();
    let k = Intrinsics::new(2262.0, 2262.0, 1023.5, 511.5, 2048, 1024).unwrap();
    let rig = CameraRig::pitched(k, 0.22, [1.0, 0.0, 1.5], 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let (u, v) = (rng.random_range(0.0..2048.0), rng.random_range(0.0..1024.0));
        let depth = rng.random_range(0.5..200.0);
        let p = rig.backproject(u, v, depth).unwrap();
        let (pu, pv, _) = rig.project(&p).unwrap();
        worst = worst.max((pu - u).abs()).max((pv - v).abs());
    }
    let mut cells_ok = true;
    for spec in [GridSpec::default(), GridSpec::high_res()] {
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let (x, y) = spec.cell_center(row, col).unwrap();
                cells_ok &= spec.world_to_cell(x, y) == Some((row, col));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && cells_ok && secs < 5.0,
        format!("max reprojection error {worst:.2e} px over 1e5 samples, cell round trips exact on 64 and 128 grids: {cells_ok}, {secs:.2} s"),
    )
}

fn pipeline_consistency() -> Outcome {
    let t = Instant::now();
    let cfg = DatasetConfig {
        slope_fraction: 0.0,
        ..DatasetConfig::default()
    };
    let rig = cfg.rig().unwrap();
    let mapping = ClassMapping::synthetic();
    let scenes = sample_scenes(50, &cfg, 21).unwrap();
    let maps = exec().map(scenes.len(), |i| {
        let s = &scenes[i];
        let (labels, disp) = render_geometry(s, &rig, cfg.render_width, cfg.render_height);
        let truth = true_grid(s, &rig, &cfg.grid);
        let gt = project_labeled_cloud(&disp, &labels, &rig, &cfg.grid, &mapping, None).unwrap();
        let fp = flatplane_map(&labels, &rig, &cfg.grid, &mapping).unwrap();
        (gt, fp, truth)
    });
    let gt: Vec<(&GridMap, &GridMap)> = maps.iter().map(|(g, _, t)| (g, t)).collect();
    let fp: Vec<(&GridMap, &GridMap)> = maps.iter().map(|(_, f, t)| (f, t)).collect();
    let gt_iou = evaluate_refs(&gt).unwrap().mean_iou;
    let fp_iou = evaluate_refs(&fp).unwrap().mean_iou;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        gt_iou >= 0.95 && fp_iou >= 0.90 && secs < 120.0,
        format!("50 flat scenes: weak ground truth IoU {gt_iou:.4} (>= 0.95), flat-plane IoU {fp_iou:.4} (>= 0.90), {secs:.1} s"),
    )
}

/// Metrics of one trained model on the shared test set.
struct Trained {
    seed: u64,
    sampling: bool,
    train_secs: f64,
    iou_all: f64,
    iou_slope: f64,
    pitch_down_all: f64,
    pitch_down_flat: f64,
}

struct Experiment {
    trained: Vec<Trained>,
    fp_iou_all: f64,
    fp_iou_slope: f64,
    fp_pitch_down_flat: f64,
}

fn subset(test: &[TestScene], sloped: Option<bool>) -> Vec<EvalSample> {
    test.iter()
        .filter(|t| sloped.is_none_or(|s| t.sloped == s))
        .map(|t| t.sample.clone())
        .collect()
}

/// None and ±1.5 degree pitch on all, flat and sloped scenes:
/// (IoU all, IoU slope, pitch downgrade all, pitch downgrade flat).
fn sweep(mapper: &dyn gridsight_core::metrics::GridMapper, sets: &[Vec<EvalSample>; 3], exec: Execution) -> (f64, f64, f64, f64) {
    let settings = [SweepSetting::none(), SweepSetting::symmetric("pitch_1.5", Perturbation::Pitch(1.5))];
    let rows: Vec<_> = sets.iter().map(|s| perturbation_sweep("m", mapper, s, &settings, exec).unwrap()).collect();
    (rows[0][0].mean_iou, rows[2][0].mean_iou, rows[0][1].iou_downgrade, rows[1][1].iou_downgrade)
}

fn run_experiment() -> Experiment {
    let exec = exec();
    let base: VedConfig = serde_json::from_str(ACCEPTANCE_VED).unwrap();
    let data_cfg = DatasetConfig {
        input_width: base.input_width,
        input_height: base.input_height,
        ..DatasetConfig::default()
    };
    let t = Instant::now();
    let train: Vec<TrainSample> = train_samples(TRAIN_SCENES, &data_cfg, TRAIN_SEED, exec).unwrap();
    let test = test_scenes(TEST_SCENES, &data_cfg, TEST_SEED, exec).unwrap();
    let sets = [subset(&test, None), subset(&test, Some(false)), subset(&test, Some(true))];
    eprintln!(
        "  data: {} train, {} test ({} sloped), {:.1} s",
        train.len(),
        test.len(),
        sets[2].len(),
        t.elapsed().as_secs_f64()
    );
    let fp = FlatplaneMapper {
        spec: data_cfg.grid,
        mapping: ClassMapping::synthetic(),
    };
    let (fp_iou_all, fp_iou_slope, _, fp_pitch_down_flat) = sweep(&fp, &sets, exec);
    let mut trained = Vec::new();
    for &seed in &SEEDS {
        for sampling in [true, false] {
            let cfg = VedConfig {
                seed,
                sampling_enabled: sampling,
                ..base.clone()
            };
            let mut model = Ved::new(cfg).unwrap();
            let t = Instant::now();
            model.train(&train, exec, |_| {}).unwrap();
            let train_secs = t.elapsed().as_secs_f64();
            let mapper = VedMapper { model, exec };
            let (iou_all, iou_slope, pitch_down_all, pitch_down_flat) = sweep(&mapper, &sets, exec);
            eprintln!(
                "  seed {seed} sampling {sampling:<5}: IoU {iou_all:.4} (slope {iou_slope:.4}), pitch downgrade {pitch_down_all:.4} (flat {pitch_down_flat:.4}), trained in {train_secs:.0} s"
            );
            trained.push(Trained {
                seed,
                sampling,
                train_secs,
                iou_all,
                iou_slope,
                pitch_down_all,
                pitch_down_flat,
            });
        }
    }
    eprintln!("  flat-plane: IoU {fp_iou_all:.4} (slope {fp_iou_slope:.4}), pitch downgrade on flat {fp_pitch_down_flat:.4}");
    Experiment {
        trained,
        fp_iou_all,
        fp_iou_slope,
        fp_pitch_down_flat,
    }
}

fn flatplane_failure(e: &Experiment) -> Outcome {
    let ved: Vec<&Trained> = e.trained.iter().filter(|t| t.sampling).collect();
    let n = ved.len() as f64;
    let all = ved.iter().map(|t| t.iou_all).sum::<f64>() / n;
    let slope = ved.iter().map(|t| t.iou_slope).sum::<f64>() / n;
    let budget = ved.iter().map(|t| t.train_secs).fold(0.0, f64::max);
    let (gap_all, gap_slope) = (100.0 * (all - e.fp_iou_all), 100.0 * (slope - e.fp_iou_slope));
    outcome(
        gap_all >= 5.0 && gap_slope >= 10.0 && budget <= 1800.0,
        format!(
            "VED IoU {all:.4} vs flat-plane {:.4} ({gap_all:+.1} points, need >= 5); sloped {slope:.4} vs {:.4} ({gap_slope:+.1}, need >= 10); mean of {} seeds, longest training {budget:.0} s",
            e.fp_iou_all,
            e.fp_iou_slope,
            ved.len()
        ),
    )
}

fn perturbation_robustness(e: &Experiment) -> Outcome {
    let ved: Vec<&Trained> = e.trained.iter().filter(|t| t.sampling).collect();
    let wins = ved.iter().filter(|t| e.fp_pitch_down_flat >= 2.0 * t.pitch_down_flat).count();
    let downs: Vec<String> = ved.iter().map(|t| format!("{:.4}", t.pitch_down_flat)).collect();
    outcome(
        wins >= 3,
        format!(
            "flat-plane pitch downgrade {:.4} vs VED [{}] on flat scenes: >= 2x in {wins}/{} seeds",
            e.fp_pitch_down_flat,
            downs.join(", "),
            ved.len()
        ),
    )
}

fn ablation(e: &Experiment) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for &seed in &SEEDS {
        let find = |s: bool| e.trained.iter().find(|t| t.seed == seed && t.sampling == s).unwrap();
        let (with, without) = (find(true), find(false));
        if with.pitch_down_all < without.pitch_down_all {
            wins += 1;
        }
        pairs.push(format!("{:.4}/{:.4}", with.pitch_down_all, without.pitch_down_all));
    }
    outcome(
        wins >= 3,
        format!(
            "pitch downgrade with/without sampling per seed [{}]: sampling smaller in {wins}/{}",
            pairs.join(", "),
            SEEDS.len()
        ),
    )
}

fn end_to_end_gradient() -> f64 {
    let cfg = VedConfig {
        input_height: 16,
        input_width: 32,
        encoder_widths: vec![8, 16],
        latent_dim: 16,
        decoder_seed_channels: 16,
        decoder_widths: vec![16, 8, 8],
        grid_size: 64,
        batch_size: 4,
        epochs: 2,
        learning_rate: 1e-3,
        ..VedConfig::desk()
    };
    let data_cfg = DatasetConfig {
        render_width: 256,
        render_height: 128,
        input_width: 32,
        input_height: 16,
        supersample: 2,
        ..DatasetConfig::default()
    };
    let data = train_samples(3, &data_cfg, 8, Execution::Sequential).unwrap();
    let mut model = Ved::new(cfg).unwrap();
    model.train(&data, Execution::Sequential, |_| {}).unwrap();
    let imgs: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let truths: Vec<&GridMap> = data.iter().map(|s| &s.truth).collect();
    let eps = model.sample_noise(3, &mut ChaCha8Rng::seed_from_u64(2));
    let (_, grads) = model.batch_loss(&imgs, &truths, Some(eps.clone())).unwrap();
    let scale = grads.iter().flatten().flatten().fold(0.0f32, |m, g| m.max(g.abs())) as f64;
    let base: Vec<Vec<f64>> = model.params().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..base.len());
        let k = rng.random_range(0..base[i].len());
        let analytic = grads[i].as_ref().map_or(0.0, |g| g[k]) as f64;
        let mut p = base.clone();
        p[i][k] = base[i][k] + h;
        let up = model.reference_loss(&imgs, &truths, Some(&eps), &p).unwrap();
        p[i][k] = base[i][k] - h;
        let down = model.reference_loss(&imgs, &truths, Some(&eps), &p).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-2 * scale);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

fn autodiff() -> Outcome {
    let t = Instant::now();
    let ops = check_all_ops(7);
    let (worst_op, worst_err) = ops
        .iter()
        .map(|c| (c.op, c.max_rel_err))
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let e2e = end_to_end_gradient();
    let mut g = Graph::new();
    let logits = g.input(Tensor::zeros(&[2, 4, 3, 3]));
    let ce_var = g.softmax_ce_classes(logits, vec![1; 18]).unwrap();
    let ce = g.value(ce_var).data()[0] as f64;
    let mu = g.input(Tensor::full(&[1, 1], 1.0));
    let logvar = g.input(Tensor::zeros(&[1, 1]));
    let kl_var = g.kl_diag_gaussian(mu, logvar).unwrap();
    let kl = g.value(kl_var).data()[0] as f64;
    let ce_ok = (ce - 4f64.ln()).abs() < 1e-6;
    let kl_ok = (kl - 0.5).abs() < 1e-6;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_err < 1e-3 && e2e < 1e-2 && ce_ok && kl_ok && secs < 60.0,
        format!(
            "{} ops, worst {worst_op} {worst_err:.2e}; end-to-end loss gradient {e2e:.2e} on 20 parameters; uniform CE {ce:.6}; KL {kl:.6}; {secs:.1} s",
            ops.len()
        ),
    )
}

fn metrics() -> Outcome {
    use SemanticClass::{NonFree, Road};
    let spec = GridSpec::new(4, 5, 0.5, 5.0).unwrap();
    let truth: Vec<SemanticClass> = (0..20).map(|k| if k < 10 { Road } else { NonFree }).collect();
    let mut pred = truth.clone();
    pred[0] = NonFree;
    pred[1] = NonFree;
    pred[10] = Road;
    let truth = GridMap::from_parts(spec, truth, vec![true; 20]).unwrap();
    let pred = GridMap::from_parts(spec, pred, vec![true; 20]).unwrap();
    let cm = confusion(&pred, &truth).unwrap();
    let (acc, iou) = (cm.mean_accuracy().unwrap(), cm.mean_iou().unwrap());
    let hand = (acc - 0.85).abs() < 1e-5 && (iou - 0.73864).abs() < 1e-5;

    let spec = GridSpec::new(16, 16, 0.5, 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random = |rng: &mut ChaCha8Rng| {
        let classes = (0..spec.len()).map(|_| SemanticClass::ALL[rng.random_range(0..4)]).collect();
        let mask = (0..spec.len()).map(|_| rng.random_bool(0.9)).collect();
        GridMap::from_parts(spec, classes, mask).unwrap()
    };
    let mut oracle_ok = true;
    let mut additive_ok = true;
    for _ in 0..20 {
        let (p, t) = (random(&mut rng), random(&mut rng));
        let cm = confusion(&p, &t).unwrap();
        let mut present = 0;
        let (mut a, mut i) = (0.0, 0.0);
        for c in SemanticClass::ALL {
            let cells: Vec<usize> = (0..spec.len()).filter(|&k| p.eval_mask()[k] && t.eval_mask()[k]).collect();
            let tc = cells.iter().filter(|&&k| t.classes()[k] == c).count();
            if tc == 0 {
                continue;
            }
            let pc = cells.iter().filter(|&&k| p.classes()[k] == c).count();
            let both = cells.iter().filter(|&&k| t.classes()[k] == c && p.classes()[k] == c).count();
            a += both as f64 / tc as f64;
            i += both as f64 / (tc + pc - both) as f64;
            present += 1;
        }
        oracle_ok &= (cm.mean_accuracy().unwrap() - a / present as f64).abs() < 1e-12;
        oracle_ok &= (cm.mean_iou().unwrap() - i / present as f64).abs() < 1e-12;
        let half: Vec<bool> = (0..spec.len()).map(|_| rng.random_bool(0.5)).collect();
        let rest: Vec<bool> = half.iter().map(|h| !h).collect();
        let sum = confusion_masked(&p, &t, Some(&half)).unwrap() + confusion_masked(&p, &t, Some(&rest)).unwrap();
        additive_ok &= sum == cm;
    }
    outcome(
        hand && oracle_ok && additive_ok,
        format!("hand case accuracy {acc:.5} IoU {iou:.5}; brute force agrees on 20 pairs: {oracle_ok}; additive over disjoint masks: {additive_ok}"),
    )
}

fn gridsight(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gridsight")).args(args).output().expect("spawn gridsight")
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let t = tempfile::tempdir().unwrap();
    let p = |s: &str| t.path().join(s).display().to_string();
    let cfg = p("ved.json");
    std::fs::write(
        &cfg,
        r#"{"input_height":16,"input_width":32,"encoder_widths":[8,16],"latent_dim":16,"decoder_seed_channels":16,
            "decoder_widths":[16,8,8],"grid_size":64,"batch_size":4,"epochs":2,"learning_rate":0.001}"#,
    )
    .unwrap();
    let mut ok = true;
    for run in ["a", "b"] {
        let ds = p(&format!("ds_{run}"));
        let steps: [Vec<String>; 3] = [
            ["synth", "gen", "--n", "8", "--seed", "7", "--out", &ds, "--render-width", "256", "--render-height", "128"]
                .iter()
                .chain(&["--input-width", "32", "--input-height", "16"])
                .map(|s| s.to_string())
                .collect(),
            ["ved", "train", "--manifest", &format!("{ds}/manifest.jsonl"), "--config", &cfg, "--out", &p(&format!("m_{run}.ckpt"))]
                .map(String::from)
                .to_vec(),
            ["eval", "sweep", "--method", "ved", "--manifest", &format!("{ds}/manifest.jsonl"), "--ckpt", &p(&format!("m_{run}.ckpt"))]
                .iter()
                .chain(&["--out", &p(&format!("sweep_{run}.csv"))])
                .map(|s| s.to_string())
                .collect(),
        ];
        for args in &steps {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            ok &= gridsight(&args).status.success();
        }
    }
    let same_data = files(&t.path().join("ds_a")) == files(&t.path().join("ds_b"));
    let read = |s: &str| std::fs::read(p(s)).unwrap_or_default();
    let same_ckpt = !read("m_a.ckpt").is_empty() && read("m_a.ckpt") == read("m_b.ckpt");
    let same_sweep = !read("sweep_a.csv").is_empty() && read("sweep_a.csv") == read("sweep_b.csv");
    outcome(
        ok && same_data && same_ckpt && same_sweep,
        format!("repeated runs byte-identical: synth gen {same_data}, ved train {same_ckpt}, eval sweep {same_sweep}"),
    )
}

fn pca() -> Outcome {
    let line: Vec<Vec<f32>> = [-2.0f32, -1.0, 0.0, 1.0, 2.0].iter().map(|&t| vec![t, 2.0 * t]).collect();
    let fit = pca_fit(&line).unwrap();
    let axis = fit.axis(0).unwrap();
    let s5 = 5f64.sqrt();
    let axis_err = (axis[0] - 1.0 / s5).abs().max((axis[1] - 2.0 / s5).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 32;
    let mix: Vec<f32> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data: Vec<Vec<f32>> = (0..500)
        .map(|_| {
            let z: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..dim).map(|i| (0..dim).map(|j| mix[i * dim + j] * z[j]).sum()).collect()
        })
        .collect();
    let fit = pca_fit(&data).unwrap();
    let mut ortho = 0.0f64;
    for a in 0..dim {
        for b in 0..dim {
            let dot: f64 = (0..dim).map(|i| fit.axes[i * dim + a] * fit.axes[i * dim + b]).sum();
            ortho = ortho.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    outcome(
        axis_err < 1e-6 && ortho < 1e-6,
        format!("line axis error {axis_err:.2e}; orthonormality error {ortho:.2e} on 500 x {dim} embeddings"),
    )
}

fn throughput() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (preset, n) in [("desk", "20"), ("paper", "3")] {
        let out = gridsight(&["bench", "infer", "--preset", preset, "--n", n]);
        let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
        ok &= out.status.success() && text.contains(" Hz");
        lines.push(text);
    }
    outcome(ok, format!("{} (informational)", lines.join("; ")))
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report(1, geometry());
    report(2, pipeline_consistency());
    let e = run_experiment();
    report(3, flatplane_failure(&e));
    report(4, perturbation_robustness(&e));
    report(5, ablation(&e));
    report(6, autodiff());
    report(7, metrics());
    report(8, determinism());
    report(9, pca());
    report(10, throughput());
    println!("{failed} of 10 criteria failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
