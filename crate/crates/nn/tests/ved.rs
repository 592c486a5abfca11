//! Encoder-decoder behaviour: shapes, loss composition, training,
//! determinism and checkpoints.

use gridsight_core::par::Execution;
use gridsight_core::synth::{render_input, sample_scenes, true_grid, DatasetConfig};
use gridsight_core::RgbImage;
use gridsight_nn::tensor::{Graph, Mode, Tensor};
use gridsight_nn::ved::{ForwardVars, TrainSample, Ved, VedConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> VedConfig {
    VedConfig {
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
    }
}

fn samples(n: usize, seed: u64, config: &VedConfig) -> Vec<TrainSample> {
    let cfg = DatasetConfig {
        render_width: 256,
        render_height: 128,
        ..DatasetConfig::default()
    };
    let rig = cfg.rig().unwrap();
    sample_scenes(n, &cfg, seed)
        .unwrap()
        .iter()
        .map(|s| TrainSample {
            image: render_input(s, &rig, config.input_width, config.input_height, 2),
            truth: true_grid(s, &rig, &cfg.grid),
        })
        .collect()
}

fn noise_images(n: usize, h: usize, w: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])).collect()
}

fn refs<T>(v: &[T]) -> Vec<&T> {
    v.iter().collect()
}

#[test]
fn paper_scale_output_shape() {
    let cfg = VedConfig::paper_scale();
    let model = Ved::new(cfg.clone()).unwrap();
    let imgs = noise_images(1, cfg.input_height, cfg.input_width, 0);
    let p = model.probabilities(&refs(&imgs), Execution::Parallel).unwrap();
    assert_eq!(p.shape(), &[1, 4, 64, 64]);
}

#[test]
fn probabilities_sum_to_one() {
    let cfg = small();
    let mut model = Ved::new(cfg.clone()).unwrap();
    let imgs = noise_images(3, cfg.input_height, cfg.input_width, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in [Mode::Train, Mode::Eval] {
        let (p, mu, logvar) = model.forward(&refs(&imgs), mode, &mut rng, Execution::Sequential).unwrap();
        assert_eq!(mu.shape(), &[3, 16]);
        assert_eq!(logvar.shape(), &[3, 16]);
        let hw = 64 * 64;
        for n in 0..3 {
            for c in 0..hw {
                let s: f32 = (0..4).map(|k| p.data()[(n * 4 + k) * hw + c]).sum();
                assert!((s - 1.0).abs() < 1e-5, "sample {n} cell {c}: {s}");
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small();
    let model = Ved::new(cfg.clone()).unwrap();
    let imgs = noise_images(2, cfg.input_height, cfg.input_width, 2);
    let a = model.probabilities(&refs(&imgs), Execution::Sequential).unwrap();
    let b = model.probabilities(&refs(&imgs), Execution::Parallel).unwrap();
    assert_eq!(a.data(), b.data());
    let run = || {
        let mut m = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        m.forward(&refs(&imgs), Mode::Train, &mut rng, Execution::Sequential).unwrap().0
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn loss_composition() {
    let model = Ved::new(small()).unwrap();
    let mut g = Graph::new();
    let mu = g.input(Tensor::zeros(&[1, 16]));
    let logvar = g.input(Tensor::zeros(&[1, 16]));
    let logits = g.input(Tensor::zeros(&[1, 4, 64, 64]));
    let fw = ForwardVars {
        logits,
        mu,
        logvar,
        z: mu,
        params: Vec::new(),
    };
    let targets: Vec<u32> = (0..64 * 64).map(|k| (k % 4) as u32).collect();
    let (total, kl, ce) = model.loss_graph(&mut g, &fw, targets.clone()).unwrap();
    assert!((g.value(total).data()[0] as f64 - 0.9 * 4f64.ln()).abs() < 1e-6);
    assert_eq!(g.value(kl).data()[0], 0.0);
    assert!((g.value(ce).data()[0] as f64 - 4f64.ln()).abs() < 1e-6);

    let mut cfg = small();
    cfg.lambda_latent = 0.0;
    cfg.lambda_mapping = 1.0;
    let pure = Ved::new(cfg).unwrap();
    let mut g = Graph::new();
    let mu = g.input(Tensor::full(&[1, 16], 2.0));
    let logvar = g.input(Tensor::zeros(&[1, 16]));
    let logits = g.input(Tensor::zeros(&[1, 4, 64, 64]));
    let fw = ForwardVars {
        logits,
        mu,
        logvar,
        z: mu,
        params: Vec::new(),
    };
    let (total, kl, ce) = pure.loss_graph(&mut g, &fw, targets).unwrap();
    assert_eq!(g.value(total).data()[0], g.value(ce).data()[0]);
    assert!(g.value(kl).data()[0] > 0.0);
}

#[test]
fn loss_is_non_negative_on_real_batches() {
    let cfg = small();
    let model = Ved::new(cfg.clone()).unwrap();
    let data = samples(4, 3, &cfg);
    let imgs: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let truths: Vec<_> = data.iter().map(|s| &s.truth).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = model.sample_noise(4, &mut rng);
    let (loss, _) = model.batch_loss(&imgs, &truths, Some(eps)).unwrap();
    assert!(loss >= 0.0 && loss.is_finite());
}

#[test]
fn two_epochs_reduce_the_loss() {
    let cfg = small();
    let data = samples(8, 4, &cfg);
    let mut model = Ved::new(cfg).unwrap();
    let imgs: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let truths: Vec<_> = data.iter().map(|s| &s.truth).collect();
    let eps = model.sample_noise(8, &mut ChaCha8Rng::seed_from_u64(9));
    let before = model.batch_loss(&imgs, &truths, Some(eps.clone())).unwrap().0;
    let mut logs = Vec::new();
    model.train(&data, Execution::Sequential, |l| logs.push(l.clone())).unwrap();
    let after = model.batch_loss(&imgs, &truths, Some(eps)).unwrap().0;
    assert_eq!(logs.len(), 2);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = small();
    let data = samples(6, 5, &cfg);
    let train = |exec| {
        let mut m = Ved::new(cfg.clone()).unwrap();
        m.train(&data, exec, |_| {}).unwrap();
        m.to_bytes().unwrap()
    };
    let a = train(Execution::Sequential);
    assert_eq!(a, train(Execution::Sequential));
    assert_eq!(a, train(Execution::Parallel));
    let mut other = cfg.clone();
    other.seed = 1;
    let mut m = Ved::new(other).unwrap();
    m.train(&data, Execution::Sequential, |_| {}).unwrap();
    assert_ne!(a, m.to_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small();
    let data = samples(4, 6, &cfg);
    let mut model = Ved::new(cfg.clone()).unwrap();
    model.train(&data, Execution::Sequential, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = Ved::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.metrics, model.metrics);
    let imgs: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let (a, b) = (
        model.probabilities(&imgs, Execution::Sequential).unwrap(),
        back.probabilities(&imgs, Execution::Sequential).unwrap(),
    );
    assert_eq!(a.data(), b.data());
    assert_eq!(back.to_bytes().unwrap(), model.to_bytes().unwrap());

    let bytes = model.to_bytes().unwrap();
    assert!(Ved::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Ved::from_bytes(b"NOTACKPT").is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(Ved::from_bytes(&bad).is_err());
}

#[test]
fn mismatched_input_is_rejected() {
    let model = Ved::new(small()).unwrap();
    let imgs = noise_images(1, 16, 30, 0);
    assert!(model.probabilities(&refs(&imgs), Execution::Sequential).is_err());
    assert!(model.decode(&[vec![0.0; 15]], Execution::Sequential).is_err());
}

#[test]
fn encode_and_decode() {
    let cfg = small();
    let model = Ved::new(cfg.clone()).unwrap();
    let imgs = noise_images(2, cfg.input_height, cfg.input_width, 3);
    let mu = model.encode(&refs(&imgs), Execution::Sequential).unwrap();
    assert_eq!(mu.len(), 2);
    assert!(mu.iter().all(|m| m.len() == 16));
    assert_eq!(mu, model.encode(&refs(&imgs), Execution::Parallel).unwrap());
    // decoding the means reproduces the eval forward pass
    let direct = model.probabilities(&refs(&imgs), Execution::Sequential).unwrap();
    let via = model.decode(&mu, Execution::Sequential).unwrap();
    for (a, b) in direct.data().iter().zip(via.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn overfits_four_scenes() {
    let mut cfg = small().per_dim_latent_weight();
    cfg.epochs = 200;
    cfg.batch_size = 2;
    let data = samples(4, 7, &cfg);
    let mut model = Ved::new(cfg).unwrap();
    let m = model.train(&data, Execution::Parallel, |_| {}).unwrap();
    assert!(m.train_mean_iou >= 0.9, "{m:?}");
}

#[test]
fn end_to_end_gradient_spot_check() {
    let cfg = small();
    let data = samples(3, 8, &cfg);
    let mut model = Ved::new(cfg).unwrap();
    // a few steps move batchnorm statistics and weights off their init
    model.train(&data, Execution::Sequential, |_| {}).unwrap();
    let imgs: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let truths: Vec<_> = data.iter().map(|s| &s.truth).collect();
    let eps = model.sample_noise(3, &mut ChaCha8Rng::seed_from_u64(2));
    let (_, grads) = model.batch_loss(&imgs, &truths, Some(eps.clone())).unwrap();
    let scale = grads.iter().flatten().flatten().fold(0.0f32, |m, g| m.max(g.abs())) as f64;
    let base: Vec<Vec<f64>> = model.params().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    // the f32 engine's loss agrees with the f64 oracle at the unperturbed point
    let (loss32, _) = model.batch_loss(&imgs, &truths, Some(eps.clone())).unwrap();
    let loss64 = model.reference_loss(&imgs, &truths, Some(&eps), &base).unwrap();
    assert!((loss32 - loss64).abs() < 1e-4 * loss64.abs().max(1.0), "{loss32} vs {loss64}");
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
        let rel = (analytic - numeric).abs() / denom;
        worst = worst.max(rel);
        assert!(rel < 1e-2, "{} [{k}]: analytic {analytic:e}, numeric {numeric:e}", model.param_names()[i]);
    }
    eprintln!("worst relative error {worst:e}");
}
