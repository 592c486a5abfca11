//! Variational encoder-decoder from a front-view RGB image to a top-view
//! semantic grid.
//!
//! Encoder: blocks of (conv, batchnorm, relu) x 2 followed by 2x2 max
//! pooling, then two linear heads for the latent mean and log-variance.
//! Decoder: a linear layer seeds a small feature map, blocks of
//! up-convolution plus (conv, batchnorm, relu) x 2 double it up to the
//! grid size, and a final 3x3 convolution produces four class logits.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use gridsight_core::grid::{GridMap, GridSpec, SemanticClass};
use gridsight_core::imageio::RgbImage;
use gridsight_core::metrics::{evaluate_set, FrontView, GridMapper};
use gridsight_core::par::Execution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::tensor::{softmax_channels, BatchNormState, Graph, Mode, Tensor, Var};

const CLASSES: usize = SemanticClass::COUNT;
const MAGIC: &[u8; 8] = b"VEDCKPT1";
/// Samples per forward pass at inference time.
const INFER_CHUNK: usize = 16;

const LOGVAR_INIT_WEIGHT_SCALE: f32 = 0.1;
const LOGVAR_INIT_BIAS: f32 = -4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VedConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output width of each encoder block.
    pub encoder_widths: Vec<usize>,
    pub latent_dim: usize,
    /// Channels of the feature map the decoder starts from.
    pub decoder_seed_channels: usize,
    /// Output width of each decoder block.
    pub decoder_widths: Vec<usize>,
    /// Side of the square output grid.
    pub grid_size: usize,
    pub lambda_latent: f64,
    pub lambda_mapping: f64,
    pub sampling_enabled: bool,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl Default for VedConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VedConfig {
    /// 64x128 input, 64x64 grid.
    pub fn desk() -> Self {
        Self {
            input_height: 64,
            input_width: 128,
            encoder_widths: vec![32, 64, 128, 256],
            latent_dim: 128,
            decoder_seed_channels: 256,
            decoder_widths: vec![128, 64, 32, 16],
            grid_size: 64,
            lambda_latent: 0.1,
            lambda_mapping: 0.9,
            sampling_enabled: true,
            seed: 0,
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-4,
        }
    }

    /// 256x512 input, 512-d latent, 64x64 grid.
    pub fn paper_scale() -> Self {
        Self {
            input_height: 256,
            input_width: 512,
            encoder_widths: vec![64, 128, 256, 512, 512],
            latent_dim: 512,
            decoder_seed_channels: 512,
            decoder_widths: vec![256, 128, 64, 32],
            ..Self::desk()
        }
    }

    /// A few thousand parameters; for tests.
    pub fn tiny() -> Self {
        Self {
            input_height: 16,
            input_width: 32,
            encoder_widths: vec![4, 8],
            latent_dim: 8,
            decoder_seed_channels: 8,
            decoder_widths: vec![8, 4],
            grid_size: 8,
            batch_size: 4,
            epochs: 2,
            learning_rate: 1e-3,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if ((self.lambda_latent + self.lambda_mapping) - 1.0).abs() > 1e-9 {
            return bad(format!("loss weights {} + {} must sum to 1", self.lambda_latent, self.lambda_mapping));
        }
        if self.lambda_latent < 0.0 || self.lambda_mapping < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.latent_dim == 0 || self.decoder_seed_channels == 0 {
            return bad("latent_dim and decoder_seed_channels must be positive".into());
        }
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return bad("need at least one encoder and one decoder block".into());
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return bad("block widths must be positive".into());
        }
        let f = 1usize << self.encoder_widths.len();
        if self.input_height == 0 || self.input_width == 0 || self.input_height % f != 0 || self.input_width % f != 0 {
            return bad(format!(
                "input {}x{} must be a positive multiple of {f} for {} pooling stages",
                self.input_height,
                self.input_width,
                self.encoder_widths.len()
            ));
        }
        let u = 1usize << self.decoder_widths.len();
        if self.grid_size == 0 || self.grid_size % u != 0 {
            return bad(format!("grid {} must be a positive multiple of {u}", self.grid_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        Ok(())
    }

    /// Spatial size of the encoder output.
    pub fn feature_dims(&self) -> (usize, usize) {
        let f = 1usize << self.encoder_widths.len();
        (self.input_height / f, self.input_width / f)
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.feature_dims();
        h * w * self.encoder_widths.last().copied().unwrap_or(0)
    }

    /// Side of the decoder's seed feature map.
    pub fn seed_side(&self) -> usize {
        self.grid_size >> self.decoder_widths.len()
    }

    /// Divide the latent weight by `latent_dim`, keeping the weights summing
    /// to 1. Equivalent to averaging the KL term over latent dimensions
    /// instead of summing it; at small scale the summed term drives the
    /// posterior to the prior before the decoder learns to read it.
    pub fn per_dim_latent_weight(mut self) -> Self {
        self.lambda_latent /= self.latent_dim as f64;
        self.lambda_mapping = 1.0 - self.lambda_latent;
        self
    }

    /// Loss weights actually applied: the no-sampling ablation drops the
    /// latent term.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        if self.sampling_enabled {
            (self.lambda_latent, self.lambda_mapping)
        } else {
            (0.0, self.lambda_mapping)
        }
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: ConvIdx,
    bn: BnIdx,
}

#[derive(Clone, Debug)]
struct EncBlock {
    a: ConvBn,
    b: ConvBn,
}

#[derive(Clone, Debug)]
struct DecBlock {
    up: ConvIdx,
    a: ConvBn,
    b: ConvBn,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<EncBlock>,
    mu: ConvIdx,
    logvar: ConvIdx,
    seed: ConvIdx,
    dec: Vec<DecBlock>,
    out: ConvIdx,
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let t = Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), self.rng);
        self.add(name, t)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, bias: bool) -> ConvIdx {
        let w = self.he(format!("{name}.weight"), &[cout, cin, 3, 3], cin * 9);
        let b = bias.then(|| self.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvIdx { w, b }
    }

    fn upconv(&mut self, name: &str, cin: usize, cout: usize) -> ConvIdx {
        let w = self.he(format!("{name}.weight"), &[cin, cout, 2, 2], cin * 4);
        let b = Some(self.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvIdx { w, b }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> ConvIdx {
        let w = self.he(format!("{name}.weight"), &[din, dout], din);
        let b = Some(self.add(format!("{name}.bias"), Tensor::zeros(&[dout])));
        ConvIdx { w, b }
    }

    /// Shrink a log-variance head so training starts from a narrow
    /// posterior: with unit variance the sampling noise swamps the mean and
    /// the decoder never learns to read the latent.
    fn start_narrow(&mut self, head: ConvIdx) {
        for v in self.tensors[head.w].data_mut() {
            *v *= LOGVAR_INIT_WEIGHT_SCALE;
        }
        if let Some(b) = head.b {
            self.tensors[b].data_mut().fill(LOGVAR_INIT_BIAS);
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIdx {
        let gamma = self.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.bn_names.push(name.to_string());
        self.bn.push(BatchNormState::new(c));
        BnIdx {
            gamma,
            beta,
            state: self.bn.len() - 1,
        }
    }

    /// A convolution feeding batchnorm carries no bias: batchnorm would
    /// cancel it.
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), cin, cout, false),
            bn: self.bn(&format!("{name}.bn"), cout),
        }
    }
}

fn build(config: &VedConfig, rng: &mut ChaCha8Rng) -> (Layout, Vec<String>, Vec<Tensor>, Vec<String>, Vec<BatchNormState>) {
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        bn_names: Vec::new(),
        bn: Vec::new(),
        rng,
    };
    let mut cin = 3;
    let mut enc = Vec::new();
    for (i, &w) in config.encoder_widths.iter().enumerate() {
        enc.push(EncBlock {
            a: b.conv_bn(&format!("enc.{i}.0"), cin, w),
            b: b.conv_bn(&format!("enc.{i}.1"), w, w),
        });
        cin = w;
    }
    let flat = config.flat_features();
    let mu = b.linear("latent.mu", flat, config.latent_dim);
    let logvar = b.linear("latent.logvar", flat, config.latent_dim);
    b.start_narrow(logvar);
    let s = config.seed_side();
    let seed = b.linear("dec.seed", config.latent_dim, config.decoder_seed_channels * s * s);
    let mut cin = config.decoder_seed_channels;
    let mut dec = Vec::new();
    for (i, &w) in config.decoder_widths.iter().enumerate() {
        dec.push(DecBlock {
            up: b.upconv(&format!("dec.{i}.up"), cin, w),
            a: b.conv_bn(&format!("dec.{i}.0"), w, w),
            b: b.conv_bn(&format!("dec.{i}.1"), w, w),
        });
        cin = w;
    }
    let out = b.conv("dec.out", cin, CLASSES, true);
    let layout = Layout {
        enc,
        mu,
        logvar,
        seed,
        dec,
        out,
    };
    (layout, b.names, b.tensors, b.bn_names, b.bn)
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    /// Parameter leaves in model order.
    pub params: Vec<Var>,
}

/// Losses of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    pub latent_loss: f64,
    pub mapping_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub latent_loss: f64,
    pub mapping_loss: f64,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub final_latent_loss: f64,
    pub final_mapping_loss: f64,
    pub train_mean_accuracy: f64,
    pub train_mean_iou: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: VedConfig,
    metrics: Option<TrainMetrics>,
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: RgbImage,
    pub truth: GridMap,
}

#[derive(Clone, Debug)]
pub struct Ved {
    config: VedConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
    pub metrics: Option<TrainMetrics>,
}

/// `x / 255 - 0.5`, channels first.
pub fn image_to_chw(img: &RgbImage, out: &mut [f32]) {
    let hw = img.width() * img.height();
    for (p, px) in img.pixels().iter().enumerate() {
        for c in 0..3 {
            out[c * hw + p] = px[c] as f32 / 255.0 - 0.5;
        }
    }
}

/// Per-cell argmax over an `N x 4 x G x G` tensor; ties go to the lower
/// class id. Returns one class vector per sample.
pub fn argmax_classes(probs: &Tensor) -> Result<Vec<Vec<SemanticClass>>> {
    let (n, k, h, w) = match *probs.shape() {
        [n, k, h, w] if k == CLASSES => (n, k, h, w),
        ref s => return Err(Error::shape("argmax", format!("expected N x 4 x G x G, got {s:?}"))),
    };
    let hw = h * w;
    let d = probs.data();
    Ok((0..n)
        .map(|s| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(s * k + c) * hw + p] > d[(s * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    SemanticClass::ALL[best]
                })
                .collect()
        })
        .collect())
}

impl Ved {
    /// Freshly initialized model; weights drawn from the config seed.
    pub fn new(config: VedConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (layout, names, tensors, bn_names, bn) = build(&config, &mut rng);
        Ok(Self {
            config,
            layout,
            names,
            params: tensors.into_iter().map(Arc::new).collect(),
            bn_names,
            bn,
            metrics: None,
        })
    }

    pub fn config(&self) -> &VedConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| p.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| self.params[i].as_ref())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn batchnorm_states(&self) -> impl Iterator<Item = (&str, &BatchNormState)> {
        self.bn_names.iter().map(String::as_str).zip(&self.bn)
    }

    /// Overwrite one scalar parameter entry (finite-difference probes).
    pub fn set_param_value(&mut self, index: usize, k: usize, value: f32) -> Result<()> {
        let len = self.params.len();
        let p = self.params.get_mut(index).ok_or(Error::IndexOutOfRange { index, len })?;
        let t = Arc::make_mut(p);
        let n = t.len();
        *t.data_mut().get_mut(k).ok_or(Error::IndexOutOfRange { index: k, len: n })? = value;
        Ok(())
    }

    /// Stack images into an `N x 3 x H x W` input tensor.
    pub fn images_to_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut data = vec![0.0f32; images.len() * 3 * h * w];
        for (i, img) in images.iter().enumerate() {
            if img.width() != w || img.height() != h {
                return Err(Error::shape(
                    "ved input",
                    format!("image {}x{} but model expects {w}x{h}", img.width(), img.height()),
                ));
            }
            image_to_chw(img, &mut data[i * 3 * h * w..(i + 1) * 3 * h * w]);
        }
        Tensor::new(&[images.len(), 3, h, w], data)
    }

    fn target_classes(&self, truths: &[&GridMap]) -> Result<Vec<u32>> {
        let g = self.config.grid_size;
        let mut out = Vec::with_capacity(truths.len() * g * g);
        for t in truths {
            let s = t.spec();
            if s.rows != g || s.cols != g {
                return Err(Error::shape("ved target", format!("grid {}x{} but model predicts {g}x{g}", s.rows, s.cols)));
            }
            out.extend(t.classes().iter().map(|c| c.id() as u32));
        }
        Ok(out)
    }

    fn conv_block(&self, g: &mut Graph, x: Var, cb: ConvBn, pv: &[Var], zero: &mut ZeroBias, bn: &mut [BatchNormState], mode: Mode) -> Result<Var> {
        let b = zero.get(g, self.params[cb.conv.w].shape()[0]);
        let c = g.conv2d(x, pv[cb.conv.w], b)?;
        let n = g.batchnorm(c, pv[cb.bn.gamma], pv[cb.bn.beta], &mut bn[cb.bn.state], mode)?;
        Ok(g.relu(n))
    }

    /// Record the encoder on `g`; returns (mu, logvar).
    fn encode_graph(&self, g: &mut Graph, x: Var, pv: &[Var], bn: &mut [BatchNormState], mode: Mode) -> Result<(Var, Var)> {
        let mut zero = ZeroBias::default();
        let mut h = x;
        for blk in &self.layout.enc {
            h = self.conv_block(g, h, blk.a, pv, &mut zero, bn, mode)?;
            h = self.conv_block(g, h, blk.b, pv, &mut zero, bn, mode)?;
            h = g.maxpool2(h)?;
        }
        let n = g.shape(x)[0];
        let flat = g.reshape(h, &[n, self.config.flat_features()])?;
        let l = &self.layout;
        let mu = g.linear(flat, pv[l.mu.w], pv[l.mu.b.expect("head bias")])?;
        let logvar = g.linear(flat, pv[l.logvar.w], pv[l.logvar.b.expect("head bias")])?;
        Ok((mu, logvar))
    }

    /// Record the decoder from latent `z`; returns logits.
    fn decode_graph(&self, g: &mut Graph, z: Var, pv: &[Var], bn: &mut [BatchNormState], mode: Mode) -> Result<Var> {
        let mut zero = ZeroBias::default();
        let l = &self.layout;
        let n = g.shape(z)[0];
        let s = self.config.seed_side();
        let seed = g.linear(z, pv[l.seed.w], pv[l.seed.b.expect("seed bias")])?;
        let mut h = g.reshape(seed, &[n, self.config.decoder_seed_channels, s, s])?;
        for blk in &l.dec {
            h = g.upconv2(h, pv[blk.up.w], pv[blk.up.b.expect("upconv bias")])?;
            h = self.conv_block(g, h, blk.a, pv, &mut zero, bn, mode)?;
            h = self.conv_block(g, h, blk.b, pv, &mut zero, bn, mode)?;
        }
        Ok(g.conv2d(h, pv[l.out.w], pv[l.out.b.expect("output bias")])?)
    }

    fn leaves(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param_shared(p.clone()) } else { g.input_shared(p.clone()) })
            .collect()
    }

    /// Full forward pass recorded on `g`. In train mode batchnorm uses batch
    /// statistics and updates the running statistics in `bn`. The latent is
    /// sampled with noise `eps` when given, otherwise `z = mu`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        images: Tensor,
        bn: &mut [BatchNormState],
        mode: Mode,
        eps: Option<Vec<f32>>,
        trainable: bool,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        if images.shape() != [images.shape()[0], 3, c.input_height, c.input_width] {
            return Err(Error::shape("ved forward", format!("input {:?}", images.shape())));
        }
        let params = self.leaves(g, trainable);
        let x = g.input(images);
        let (mu, logvar) = self.encode_graph(g, x, &params, bn, mode)?;
        let z = match eps {
            Some(e) => g.reparameterize(mu, logvar, e)?,
            None => mu,
        };
        let logits = self.decode_graph(g, z, &params, bn, mode)?;
        Ok(ForwardVars {
            logits,
            mu,
            logvar,
            z,
            params,
        })
    }

    /// Weighted loss on a recorded forward pass: `l1 * KL + l2 * CE`, with
    /// CE over every grid cell (in and out of the field of view).
    pub fn loss_graph(&self, g: &mut Graph, fw: &ForwardVars, targets: Vec<u32>) -> Result<(Var, Var, Var)> {
        let (l1, l2) = self.config.effective_lambdas();
        let kl = g.kl_diag_gaussian(fw.mu, fw.logvar)?;
        let ce = g.softmax_ce_classes(fw.logits, targets)?;
        let wce = g.scale(ce, l2 as f32);
        let total = if l1 > 0.0 {
            let wkl = g.scale(kl, l1 as f32);
            g.add(wkl, wce)?
        } else {
            wce
        };
        Ok((total, kl, ce))
    }

    fn draw_eps(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n * self.config.latent_dim).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Class probabilities `N x 4 x G x G` and latent statistics.
    /// Eval mode always uses `z = mu`; train mode samples when enabled,
    /// drawing noise from `rng`, and updates batchnorm running statistics.
    pub fn forward(&mut self, images: &[&RgbImage], mode: Mode, rng: &mut ChaCha8Rng, exec: Execution) -> Result<(Tensor, Tensor, Tensor)> {
        let x = self.images_to_tensor(images)?;
        let eps = (mode == Mode::Train && self.config.sampling_enabled).then(|| self.draw_eps(images.len(), rng));
        let mut g = Graph::with_execution(exec);
        let mut bn = std::mem::take(&mut self.bn);
        let fw = self.forward_graph(&mut g, x, &mut bn, mode, eps, false);
        self.bn = bn;
        let fw = fw?;
        let probs = softmax_channels(g.value(fw.logits))?;
        if !probs.is_finite() {
            return Err(Error::NonFinite("forward probabilities".into()));
        }
        Ok((probs, g.value(fw.mu).clone(), g.value(fw.logvar).clone()))
    }

    /// Eval-mode class probabilities; read-only.
    pub fn probabilities(&self, images: &[&RgbImage], exec: Execution) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(INFER_CHUNK) {
            let x = self.images_to_tensor(chunk)?;
            let mut g = Graph::with_execution(exec);
            let mut bn = self.bn.clone();
            let fw = self.forward_graph(&mut g, x, &mut bn, Mode::Eval, None, false)?;
            parts.push(softmax_channels(g.value(fw.logits))?);
        }
        concat_batches(parts, self.config.grid_size)
    }

    /// Predicted grids with an all-true evaluation mask.
    pub fn predict(&self, images: &[&RgbImage], exec: Execution) -> Result<Vec<GridMap>> {
        let probs = self.probabilities(images, exec)?;
        self.grids_from_probs(&probs)
    }

    pub fn grids_from_probs(&self, probs: &Tensor) -> Result<Vec<GridMap>> {
        let spec = self.grid_spec()?;
        argmax_classes(probs)?
            .into_iter()
            .map(|classes| Ok(GridMap::from_parts(spec, classes, vec![true; spec.len()])?))
            .collect()
    }

    /// Grid geometry of the output: the default cell size for 64-cell grids,
    /// the high-resolution one for 128.
    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = self.config.grid_size;
        let base = if g == GridSpec::high_res().rows { GridSpec::high_res() } else { GridSpec::default() };
        Ok(GridSpec::new(g, g, base.cell_size_m, base.x_offset_m)?)
    }

    /// Latent means (eval mode), one row per image.
    pub fn encode(&self, images: &[&RgbImage], exec: Execution) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        let l = self.config.latent_dim;
        for chunk in images.chunks(INFER_CHUNK) {
            let x = self.images_to_tensor(chunk)?;
            let mut g = Graph::with_execution(exec);
            let mut bn = self.bn.clone();
            let pv = self.leaves(&mut g, false);
            let xv = g.input(x);
            let (mu, _) = self.encode_graph(&mut g, xv, &pv, &mut bn, Mode::Eval)?;
            out.extend(g.value(mu).data().chunks_exact(l).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Eval-mode class probabilities decoded from latent vectors.
    pub fn decode(&self, latents: &[Vec<f32>], exec: Execution) -> Result<Tensor> {
        let l = self.config.latent_dim;
        let mut parts = Vec::new();
        for chunk in latents.chunks(INFER_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * l);
            for z in chunk {
                if z.len() != l {
                    return Err(Error::shape("decode", format!("latent of length {} for latent_dim {l}", z.len())));
                }
                data.extend_from_slice(z);
            }
            let mut g = Graph::with_execution(exec);
            let mut bn = self.bn.clone();
            let pv = self.leaves(&mut g, false);
            let zv = g.input(Tensor::new(&[chunk.len(), l], data)?);
            let logits = self.decode_graph(&mut g, zv, &pv, &mut bn, Mode::Eval)?;
            parts.push(softmax_channels(g.value(logits))?);
        }
        concat_batches(parts, self.config.grid_size)
    }

    /// Loss of one batch in train mode with fixed noise, and its gradient
    /// for every parameter, without touching the model.
    pub fn batch_loss(&self, images: &[&RgbImage], truths: &[&GridMap], eps: Option<Vec<f32>>) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
        let x = self.images_to_tensor(images)?;
        let targets = self.target_classes(truths)?;
        let mut g = Graph::new();
        let mut bn = self.bn.clone();
        let eps = if self.config.sampling_enabled { eps } else { None };
        let fw = self.forward_graph(&mut g, x, &mut bn, Mode::Train, eps, true)?;
        let (total, _, _) = self.loss_graph(&mut g, &fw, targets)?;
        let loss = g.value(total).data()[0] as f64;
        g.backward(total)?;
        let grads = fw.params.iter().map(|&v| g.take_grad(v)).collect();
        Ok((loss, grads))
    }

    /// The train-mode loss of [`Ved::batch_loss`] recomputed in f64 from
    /// `params` (one vector per parameter, in model order) with the
    /// reference ops. An oracle for gradient checks: an f32 forward pass
    /// cannot resolve the loss change of a small parameter step.
    pub fn reference_loss(&self, images: &[&RgbImage], truths: &[&GridMap], eps: Option<&[f32]>, params: &[Vec<f64>]) -> Result<f64> {
        use crate::gradcheck::reference as r;
        if params.len() != self.params.len() || params.iter().zip(&self.params).any(|(p, t)| p.len() != t.len()) {
            return Err(Error::shape("reference_loss", "parameter vectors do not match the model"));
        }
        let cfg = &self.config;
        let x: Vec<f64> = self.images_to_tensor(images)?.data().iter().map(|&v| v as f64).collect();
        let targets = self.target_classes(truths)?;
        let n = images.len();
        let eps_bn = crate::tensor::BN_EPS as f64;
        let block = |x: &[f64], dims: (usize, usize, usize, usize), cb: ConvBn| {
            let o = params[cb.bn.gamma].len();
            let y = r::conv3(x, dims, &params[cb.conv.w], &vec![0.0; o]);
            let y = r::batchnorm(&y, (dims.0, o, dims.2 * dims.3), &params[cb.bn.gamma], &params[cb.bn.beta], None, eps_bn);
            (r::relu(&y), o)
        };
        let (mut h, mut w, mut c) = (cfg.input_height, cfg.input_width, 3);
        let mut act = x;
        for blk in &self.layout.enc {
            let (y, o) = block(&act, (n, c, h, w), blk.a);
            let (y, o) = block(&y, (n, o, h, w), blk.b);
            act = r::maxpool2(&y, (n, o, h, w));
            (c, h, w) = (o, h / 2, w / 2);
        }
        let l = &self.layout;
        let head = |idx: ConvIdx| r::linear(&act, n, &params[idx.w], &params[idx.b.expect("head bias")]);
        let (mu, logvar) = (head(l.mu), head(l.logvar));
        let (l1, l2) = cfg.effective_lambdas();
        let z = match eps.filter(|_| cfg.sampling_enabled) {
            Some(e) => r::reparameterize(&mu, &logvar, &e.iter().map(|&v| v as f64).collect::<Vec<_>>()),
            None => mu.clone(),
        };
        let mut act = r::linear(&z, n, &params[l.seed.w], &params[l.seed.b.expect("seed bias")]);
        let (mut c, mut s) = (cfg.decoder_seed_channels, cfg.seed_side());
        for blk in &l.dec {
            let up_b = &params[blk.up.b.expect("upconv bias")];
            act = r::upconv2(&act, (n, c, s, s), &params[blk.up.w], up_b);
            (c, s) = (up_b.len(), 2 * s);
            let (y, o) = block(&act, (n, c, s, s), blk.a);
            let (y, o) = block(&y, (n, o, s, s), blk.b);
            (act, c) = (y, o);
        }
        let logits = r::conv3(&act, (n, c, s, s), &params[l.out.w], &params[l.out.b.expect("output bias")]);
        let ce = r::softmax_ce(&logits, (n, CLASSES, s * s), &targets);
        Ok(l1 * r::kl_diag(&mu, &logvar, n) + l2 * ce)
    }

    /// Noise vector for `n` samples, as drawn during training.
    pub fn sample_noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        self.draw_eps(n, rng)
    }

    fn train_step(
        &mut self,
        adam: &mut AdamState,
        images: &[&RgbImage],
        truths: &[&GridMap],
        rng: &mut ChaCha8Rng,
        exec: Execution,
    ) -> Result<LossTerms> {
        let x = self.images_to_tensor(images)?;
        let targets = self.target_classes(truths)?;
        let eps = self.config.sampling_enabled.then(|| self.draw_eps(images.len(), rng));
        let mut g = Graph::with_execution(exec);
        let mut bn = std::mem::take(&mut self.bn);
        let fw = self.forward_graph(&mut g, x, &mut bn, Mode::Train, eps, true);
        self.bn = bn;
        let fw = fw?;
        let (total, kl, ce) = self.loss_graph(&mut g, &fw, targets)?;
        let terms = LossTerms {
            loss: g.value(total).data()[0] as f64,
            latent_loss: g.value(kl).data()[0] as f64,
            mapping_loss: g.value(ce).data()[0] as f64,
        };
        if !terms.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} (latent {}, mapping {}) at step {}",
                terms.loss,
                terms.latent_loss,
                terms.mapping_loss,
                adam.step + 1
            )));
        }
        g.backward(total)?;
        let grads: Vec<Option<Vec<f32>>> = fw.params.iter().map(|&v| g.take_grad(v)).collect();
        drop(g);
        let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut refs: Vec<&mut Tensor> = self.params.iter_mut().map(Arc::make_mut).collect();
        adam.step_refs(&mut refs, &grad_refs)?;
        Ok(terms)
    }

    /// Train on `samples` for `config.epochs` epochs of shuffled
    /// mini-batches. `log` receives one record per epoch. Batches of a
    /// single sample are skipped (batchnorm needs two).
    pub fn train(&mut self, samples: &[TrainSample], exec: Execution, mut log: impl FnMut(&EpochLog)) -> Result<TrainMetrics> {
        if samples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let cfg = self.config.clone();
        let mut adam = AdamState::new(
            AdamConfig {
                lr: cfg.learning_rate,
                ..AdamConfig::default()
            },
            &self.params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>(),
        );
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(1);
        let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise.set_stream(2);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut last = EpochLog {
            epoch: 0,
            loss: f64::NAN,
            latent_loss: f64::NAN,
            mapping_loss: f64::NAN,
            batches: 0,
        };
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle);
            let mut sums = LossTerms::default();
            let (mut seen, mut batches) = (0usize, 0usize);
            for batch in order.chunks(cfg.batch_size) {
                if batch.len() < 2 {
                    continue;
                }
                let images: Vec<&RgbImage> = batch.iter().map(|&i| &samples[i].image).collect();
                let truths: Vec<&GridMap> = batch.iter().map(|&i| &samples[i].truth).collect();
                let t = self.train_step(&mut adam, &images, &truths, &mut noise, exec)?;
                let w = batch.len() as f64;
                sums.loss += t.loss * w;
                sums.latent_loss += t.latent_loss * w;
                sums.mapping_loss += t.mapping_loss * w;
                seen += batch.len();
                batches += 1;
            }
            if batches == 0 {
                return Err(Error::Empty("training batches (need at least 2 samples)"));
            }
            let n = seen as f64;
            last = EpochLog {
                epoch: epoch + 1,
                loss: sums.loss / n,
                latent_loss: sums.latent_loss / n,
                mapping_loss: sums.mapping_loss / n,
                batches,
            };
            log(&last);
        }
        let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
        let preds = self.predict(&images, exec)?;
        let pairs: Vec<(GridMap, GridMap)> = preds
            .into_iter()
            .zip(samples)
            .map(|(p, s)| Ok((p.with_mask(s.truth.eval_mask().to_vec())?, s.truth.clone())))
            .collect::<Result<_>>()?;
        let set = evaluate_set(&pairs)?;
        let metrics = TrainMetrics {
            epochs: cfg.epochs,
            steps: adam.step,
            final_loss: last.loss,
            final_latent_loss: last.latent_loss,
            final_mapping_loss: last.mapping_loss,
            train_mean_accuracy: set.mean_accuracy,
            train_mean_iou: set.mean_iou,
        };
        self.metrics = Some(metrics.clone());
        Ok(metrics)
    }

    /// Serialize parameters, running statistics, config and metrics.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            metrics: self.metrics.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + self.num_parameters() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut record = |name: &str, shape: &[usize], data: &[f32]| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, p) in self.names.iter().zip(&self.params) {
            record(name, p.shape(), p.data());
        }
        for (name, st) in self.bn_names.iter().zip(&self.bn) {
            record(&format!("{name}.running_mean"), &[st.running_mean.len()], &st.running_mean);
            record(&format!("{name}.running_var"), &[st.running_var.len()], &st.running_var);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut model = Ved::new(header.config)?;
        model.metrics = header.metrics;
        let mut records = std::collections::HashMap::new();
        while r.pos < bytes.len() {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("non-utf8 name".into()))?.to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f32> = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if records.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record {name}")));
            }
        }
        let mut fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, d) = records.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
            if s != shape {
                return Err(Error::Checkpoint(format!("record {name} has shape {s:?}, expected {shape:?}")));
            }
            Ok(d)
        };
        for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
            let shape = p.shape().to_vec();
            *p = Arc::new(Tensor::new(&shape, fetch(name, &shape)?)?);
        }
        for (name, st) in model.bn_names.iter().zip(model.bn.iter_mut()) {
            let c = st.running_mean.len();
            st.running_mean = fetch(&format!("{name}.running_mean"), &[c])?;
            st.running_var = fetch(&format!("{name}.running_var"), &[c])?;
        }
        if let Some(extra) = records.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected record {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Lazily created zero bias vectors for bias-free convolutions.
#[derive(Default)]
struct ZeroBias {
    cache: Vec<(usize, Var)>,
}

impl ZeroBias {
    fn get(&mut self, g: &mut Graph, n: usize) -> Var {
        if let Some(&(_, v)) = self.cache.iter().find(|(k, _)| *k == n) {
            return v;
        }
        let v = g.input(Tensor::zeros(&[n]));
        self.cache.push((n, v));
        v
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn concat_batches(parts: Vec<Tensor>, g: usize) -> Result<Tensor> {
    let n: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(n * CLASSES * g * g);
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(&[n, CLASSES, g, g], data)
}

/// A trained model as a [`GridMapper`]: the front-view RGB image goes in,
/// the evaluation mask comes from the camera's field of view.
pub struct VedMapper {
    pub model: Ved,
    pub exec: Execution,
}

impl GridMapper for VedMapper {
    fn map_view(&self, view: &FrontView) -> gridsight_core::Result<GridMap> {
        let to_core = |e: Error| match e {
            Error::Core(c) => c,
            other => gridsight_core::Error::DimensionMismatch(other.to_string()),
        };
        let grid = self.model.predict(&[&view.rgb], self.exec).map_err(to_core)?.remove(0);
        let mask = view.rig.fov_mask(grid.spec());
        grid.with_mask(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(VedConfig::desk().validate().is_ok());
        assert!(VedConfig::paper_scale().validate().is_ok());
        assert!(VedConfig::tiny().validate().is_ok());
        let mut c = VedConfig::desk();
        c.lambda_latent = 0.2;
        assert!(c.validate().is_err());
        let mut c = VedConfig::desk();
        c.input_width = 100;
        assert!(c.validate().is_err());
        let mut c = VedConfig::desk();
        c.grid_size = 60;
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_dims() {
        let c = VedConfig::desk();
        assert_eq!(c.feature_dims(), (4, 8));
        assert_eq!(c.seed_side(), 4);
        let p = VedConfig::paper_scale();
        assert_eq!(p.feature_dims(), (8, 16));
        assert_eq!(p.flat_features(), 8 * 16 * 512);
    }

    #[test]
    fn ablation_drops_latent_weight() {
        let mut c = VedConfig::desk();
        assert_eq!(c.effective_lambdas(), (0.1, 0.9));
        c.sampling_enabled = false;
        assert_eq!(c.effective_lambdas(), (0.0, 0.9));
    }

    #[test]
    fn argmax_rules() {
        let t = Tensor::new(&[1, 4, 1, 2], vec![0.1, 0.25, 0.6, 0.25, 0.2, 0.25, 0.1, 0.25]).unwrap();
        let c = argmax_classes(&t).unwrap();
        assert_eq!(c[0], vec![SemanticClass::Road, SemanticClass::NonFree]);
    }

    #[test]
    fn names_are_unique() {
        let m = Ved::new(VedConfig::desk()).unwrap();
        let mut names = m.param_names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.param_names().len());
    }
}
