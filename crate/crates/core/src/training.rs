//! Supervised pre-training, gain-only adaptation and the all-parameter
//! finetuning baseline.

use std::fmt::Write as _;
use std::time::Instant;

use crate::analysis::psnr;
use crate::checkpoint::{Checkpoint, Metadata};
use crate::data::{extract_patches, sample_patch_specs, Augment, ImageGray};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Seed};
use crate::losses::{
    blindspot_loss, noise_resampling_loss, sure_loss, MaskConfig, MaskFill, ResampleState, SureConfig,
    DEFAULT_EPS_FACTOR,
};
use crate::models::{ArchitectureSpec, BoundParams, Network, Trainable};
use crate::optim::AdamState;
use crate::rng::RngStream;
use crate::tensor::Tensor;

const TAG_INIT: u64 = 1;
const TAG_PATCHES: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_LOSS: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Last epoch (1-based) run at the initial rate.
    pub decay_start: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub sigma255_lo: f64,
    pub sigma255_hi: f64,
    pub batch_size: usize,
    pub patches_per_epoch: usize,
    pub patch_size: usize,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            lr: 1e-3,
            decay_start: 50,
            decay_every: 10,
            decay_factor: 0.5,
            sigma255_lo: 0.0,
            sigma255_hi: 55.0,
            batch_size: 32,
            patches_per_epoch: 1024,
            patch_size: 40,
            augment: Augment::ALL,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_epoch == 0 || self.decay_every == 0 {
            return Err(Error::invalid("epochs, batch size, patches per epoch and decay period must be >= 1"));
        }
        if !(0.0 <= self.sigma255_lo && self.sigma255_lo <= self.sigma255_hi) {
            return Err(Error::invalid(format!(
                "noise range {}..{} must satisfy 0 <= lo <= hi",
                self.sigma255_lo, self.sigma255_hi
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.decay_start {
            return self.lr;
        }
        let k = (epoch - self.decay_start - 1) / self.decay_every + 1;
        self.lr * self.decay_factor.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Sure,
    Blindspot,
    Resample,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sure" => Ok(LossKind::Sure),
            "blindspot" => Ok(LossKind::Blindspot),
            "resample" => Ok(LossKind::Resample),
            _ => Err(Error::invalid(format!("unknown loss {s:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Sure => "sure",
            LossKind::Blindspot => "blindspot",
            LossKind::Resample => "resample",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    GainOnly,
    AllParams,
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gain" => Ok(AdaptMode::GainOnly),
            "all" => Ok(AdaptMode::AllParams),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdaptMode::GainOnly => "gain",
            AdaptMode::AllParams => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    /// Rate after `lr_drop_after` steps; `None` keeps `lr` throughout.
    pub lr_after: Option<f64>,
    pub lr_drop_after: usize,
    pub patches_per_step: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub mode: AdaptMode,
    pub sigma255: Option<f64>,
    pub eps_factor: f64,
    pub probes_per_eval: usize,
    pub mask_fraction: f64,
    pub mask_fill: MaskFill,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 100,
            lr: 1e-4,
            lr_after: Some(1e-5),
            lr_drop_after: 20,
            patches_per_step: 256,
            patch_size: 50,
            batch_size: 32,
            loss: LossKind::Sure,
            mode: AdaptMode::GainOnly,
            sigma255: None,
            eps_factor: DEFAULT_EPS_FACTOR,
            probes_per_eval: 1,
            mask_fraction: 0.03,
            mask_fill: MaskFill::NeighborMean,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// The all-parameter protocol: 1000 steps at a constant 1e-5.
    pub fn finetune_default() -> Self {
        AdaptConfig {
            steps: 1000,
            lr: 1e-5,
            lr_after: None,
            mode: AdaptMode::AllParams,
            ..Self::default()
        }
    }

    /// Learning rate for a 1-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_after {
            Some(lr) if step > self.lr_drop_after => lr,
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches_per_step == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::invalid("patch count, patch size and batch size must be >= 1"));
        }
        if !(self.lr > 0.0) || self.lr_after.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        match (self.loss, self.sigma255) {
            (LossKind::Sure, s) if !s.is_some_and(|s| s > 0.0) => Err(Error::MissingSigma),
            (LossKind::Resample, s) if !s.is_some_and(|s| s >= 0.0) => Err(Error::MissingSigma),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub psnr: Option<f64>,
    pub wall_ms: u64,
}

/// Append-only per-step training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,loss,lr,psnr,wall_ms";

    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// CSV with the wall-clock column left empty, for reproducibility
    /// comparisons.
    pub fn to_csv_untimed(&self) -> String {
        self.render(false)
    }

    fn render(&self, timed: bool) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let psnr = r.psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
            let wall = if timed { r.wall_ms.to_string() } else { String::new() };
            let _ = writeln!(s, "{},{:e},{:e},{},{}", r.step, r.loss, r.lr, psnr, wall);
        }
        s
    }

    pub fn psnr_at(&self, step: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.step == step).and_then(|r| r.psnr)
    }

    pub fn last_psnr(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.psnr)
    }
}

fn gather_grads(g: &Graph<f64>, grads: &crate::graph::Gradients<f64>, nodes: &[NodeId], out: &mut [f64], weight: f64) {
    let mut at = 0;
    for &n in nodes {
        let len = g.value(n).len();
        if let Some(gr) = grads.get(n) {
            for (o, v) in out[at..at + len].iter_mut().zip(gr.data()) {
                *o += weight * v;
            }
        }
        at += len;
    }
}

/// Supervised MSE training from a fresh initialization.
pub fn pretrain(spec: &ArchitectureSpec, dataset: &[ImageGray], cfg: &PretrainConfig) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("pre-training needs at least one image"));
    }
    let smallest = dataset.iter().map(|i| i.height().min(i.width())).min().unwrap();
    if cfg.patch_size > smallest {
        return Err(Error::invalid(format!(
            "patch size {} exceeds the smallest image extent {smallest}",
            cfg.patch_size
        )));
    }
    let root = RngStream::new(cfg.seed);
    let mut net = Network::init(spec.clone(), &mut root.fork(TAG_INIT))?;
    net.check_input([1, 1, cfg.patch_size, cfg.patch_size])?;
    let mut patch_stream = root.fork(TAG_PATCHES);
    let mut noise_stream = root.fork(TAG_NOISE);
    let tensors: Vec<Tensor<f64>> = dataset.iter().map(ImageGray::to_tensor).collect();
    let mut adam = AdamState::new(net.params.len(), cfg.lr);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let mut remaining = cfg.patches_per_epoch;
        while remaining > 0 {
            let b = remaining.min(cfg.batch_size);
            remaining -= b;
            let mut clean = Vec::with_capacity(b);
            for _ in 0..b {
                let idx = patch_stream.below(tensors.len() as u64) as usize;
                let src = &tensors[idx];
                let spec1 = sample_patch_specs(src.height(), src.width(), cfg.patch_size, cfg.augment, 1, &mut patch_stream)?;
                clean.push(extract_patches(src, &spec1, cfg.patch_size)?);
            }
            let clean = Tensor::stack(&clean)?;
            let mut noisy = clean.clone();
            let plane = cfg.patch_size * cfg.patch_size;
            for chunk in noisy.data_mut().chunks_mut(plane) {
                let s255 = noise_stream.uniform_range(cfg.sigma255_lo, cfg.sigma255_hi);
                let mut n = vec![0.0; plane];
                noise_stream.fill_normal(&mut n, s255 / 255.0);
                for (v, e) in chunk.iter_mut().zip(n) {
                    *v += e;
                }
            }
            let mut g = Graph::new();
            let bound = net.bind(&mut g, Trainable::All);
            let x = g.constant(noisy);
            let pred = net.forward_graph(&mut g, &bound, x)?;
            let target = g.constant(clean);
            let loss = g.mse(pred, target)?;
            let grads = g.backward(loss, Seed::Scalar)?;
            let mut flat_g = vec![0.0; net.params.len()];
            gather_grads(&g, &grads, &bound.param_nodes(), &mut flat_g, 1.0);
            let mut flat = net.params.flatten();
            adam.step(&mut flat, &flat_g)?;
            net.params.assign(&flat)?;
            loss_sum += g.value(loss).item() * b as f64;
            count += b;
        }
        log.push(LogRow {
            step: epoch,
            loss: loss_sum / count as f64,
            lr: adam.lr,
            psnr: None,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    let mut meta = Metadata::new();
    meta.set("stage", "pretrain");
    meta.set("seed", cfg.seed);
    meta.set("sigma255_lo", cfg.sigma255_lo);
    meta.set("sigma255_hi", cfg.sigma255_hi);
    meta.set("epochs", cfg.epochs);
    meta.set("images", dataset.len());
    Ok((Checkpoint::new(net, meta), log))
}

fn objective_sources(net: &Network<f64>, noisy: &Tensor<f64>, cfg: &AdaptConfig) -> Result<Tensor<f64>> {
    match cfg.loss {
        LossKind::Resample => Ok(ResampleState::from_network(net, noisy, cfg.sigma255.unwrap_or(0.0))?.x_hat),
        _ => Ok(noisy.clone()),
    }
}

/// Adapts `ckpt` to one noisy image. `reference`, if given, adds a PSNR
/// column to the log (measured after each update on the full image).
pub fn adapt(
    ckpt: &Checkpoint,
    noisy: &Tensor<f64>,
    cfg: &AdaptConfig,
    reference: Option<&ImageGray>,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let [_, c, h, w] = noisy.shape();
    if c != 1 || noisy.batch() != 1 {
        return Err(Error::invalid("adaptation takes a single one-channel image"));
    }
    if cfg.patch_size > h.min(w) {
        return Err(Error::invalid(format!(
            "patch size {} exceeds the image extent {}",
            cfg.patch_size,
            h.min(w)
        )));
    }
    let mut net = ckpt.network.clone();
    net.check_input([1, 1, cfg.patch_size, cfg.patch_size])?;
    let trainable = match cfg.mode {
        AdaptMode::GainOnly => Trainable::Gains,
        AdaptMode::AllParams => Trainable::All,
    };
    let source = objective_sources(&net, noisy, cfg)?;
    let root = RngStream::new(cfg.seed);
    let mut patch_stream = root.fork(TAG_PATCHES);
    let loss_stream = root.fork(TAG_LOSS);
    let mut sure_cfg = SureConfig {
        sigma255: cfg.sigma255.unwrap_or(0.0),
        eps_factor: cfg.eps_factor,
        probes_per_eval: cfg.probes_per_eval,
        stream: loss_stream.clone(),
    };
    let mut mask_cfg = MaskConfig {
        mask_fraction: cfg.mask_fraction,
        fill: cfg.mask_fill,
        stream: loss_stream.clone(),
    };
    let mut resample_stream = loss_stream;
    let n_opt = match cfg.mode {
        AdaptMode::GainOnly => net.gains.len(),
        AdaptMode::AllParams => net.params.len(),
    };
    let mut adam = AdamState::new(n_opt, cfg.lr);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 1..=cfg.steps {
        adam.lr = cfg.lr_at(step);
        let specs = sample_patch_specs(h, w, cfg.patch_size, Augment::NONE, cfg.patches_per_step, &mut patch_stream)?;
        let mut grad = vec![0.0; n_opt];
        let mut loss_acc = 0.0;
        for chunk in specs.chunks(cfg.batch_size) {
            let y = extract_patches(&source, chunk, cfg.patch_size)?;
            let weight = chunk.len() as f64 / specs.len() as f64;
            let mut g = Graph::new();
            let bound = net.bind(&mut g, trainable);
            let fwd = |g: &mut Graph<f64>, x: NodeId| net.forward_graph(g, &bound, x);
            let loss = match cfg.loss {
                LossKind::Sure => sure_loss(&mut g, &fwd, &y, &mut sure_cfg)?,
                LossKind::Blindspot => blindspot_loss(&mut g, &fwd, &y, &mut mask_cfg)?,
                LossKind::Resample => {
                    noise_resampling_loss(&mut g, &fwd, &y, cfg.sigma255.unwrap_or(0.0), &mut resample_stream)?
                }
            };
            let grads = g.backward(loss, Seed::Scalar)?;
            gather_grads(&g, &grads, &optimized_nodes(&bound, cfg.mode), &mut grad, weight);
            loss_acc += weight * g.value(loss).item();
        }
        match cfg.mode {
            AdaptMode::GainOnly => {
                let mut flat = net.gains.flatten();
                adam.step(&mut flat, &grad)?;
                net.gains.assign(&flat)?;
            }
            AdaptMode::AllParams => {
                let mut flat = net.params.flatten();
                adam.step(&mut flat, &grad)?;
                net.params.assign(&flat)?;
            }
        }
        let psnr_now = match reference {
            Some(r) => Some(psnr(r, &denoise(&net, noisy)?, 1.0)?),
            None => None,
        };
        log.push(LogRow {
            step,
            loss: loss_acc,
            lr: adam.lr,
            psnr: psnr_now,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    let mut meta = ckpt.metadata.clone();
    meta.set("stage", "adapt");
    meta.set("adapt_loss", cfg.loss);
    meta.set("adapt_mode", cfg.mode);
    meta.set("adapt_steps", cfg.steps);
    meta.set("adapt_seed", cfg.seed);
    if let Some(s) = cfg.sigma255 {
        meta.set("adapt_sigma255", s);
    }
    Ok((Checkpoint::new(net, meta), log))
}

fn optimized_nodes(bound: &BoundParams, mode: AdaptMode) -> Vec<NodeId> {
    match mode {
        AdaptMode::GainOnly => bound.gain_nodes(),
        AdaptMode::AllParams => bound.param_nodes(),
    }
}

/// Gain-only adaptation: only the gains of gain-tunable layers change.
pub fn gaintune(
    ckpt: &Checkpoint,
    noisy: &Tensor<f64>,
    cfg: &AdaptConfig,
    reference: Option<&ImageGray>,
) -> Result<(Checkpoint, TrainLog)> {
    if cfg.mode != AdaptMode::GainOnly {
        return Err(Error::invalid("gaintune optimizes gains only; use finetune_all for every parameter"));
    }
    adapt(ckpt, noisy, cfg, reference)
}

/// Optimizes every weight and bias, gains held fixed.
pub fn finetune_all(
    ckpt: &Checkpoint,
    noisy: &Tensor<f64>,
    cfg: &AdaptConfig,
    reference: Option<&ImageGray>,
) -> Result<(Checkpoint, TrainLog)> {
    if cfg.mode != AdaptMode::AllParams {
        return Err(Error::invalid("finetune_all needs mode all"));
    }
    adapt(ckpt, noisy, cfg, reference)
}

/// Raw single-pass estimate of a `(1, 1, h, w)` image. Extents that the
/// architecture cannot take are mirror-padded up to the next valid size and
/// the output is cropped back.
pub fn denoise_raw(net: &Network<f64>, noisy: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [_, _, h, w] = noisy.shape();
    let min = net.spec.min_extent();
    if h.min(w) < min {
        return Err(Error::UndersizedInput { got: h.min(w), min });
    }
    let m = net.spec.extent_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return net.forward(noisy);
    }
    let mut padded = Tensor::zeros([noisy.batch(), noisy.channels(), ph, pw]);
    for n in 0..noisy.batch() {
        for c in 0..noisy.channels() {
            let src = noisy.plane(n, c);
            let dst = padded.plane_mut(n, c);
            for r in 0..ph {
                let sr = if r < h { r } else { 2 * h - 1 - r };
                for col in 0..pw {
                    let sc = if col < w { col } else { 2 * w - 1 - col };
                    dst[r * pw + col] = src[sr * w + sc];
                }
            }
        }
    }
    net.forward(&padded)?.crop(0, 0, h, w)
}

/// Denoised image, clamped to `[0, 1]`.
pub fn denoise(net: &Network<f64>, noisy: &Tensor<f64>) -> Result<ImageGray> {
    Ok(ImageGray::from_tensor_clamped(&denoise_raw(net, noisy)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{add_gaussian_noise, gen_piecewise_constant};
    use crate::models::preset;

    fn tiny_ckpt() -> Checkpoint {
        let net = Network::init(preset("dncnn-s", 3, 4).unwrap(), &mut RngStream::new(1)).unwrap();
        Checkpoint::new(net, Metadata::new())
    }

    fn noisy_img(seed: u64) -> (ImageGray, Tensor<f64>) {
        let img = gen_piecewise_constant(&mut RngStream::new(seed), 24, 2..=4).unwrap();
        let pair = add_gaussian_noise(&img, 30.0, &mut RngStream::new(seed + 100)).unwrap();
        (img, pair.noisy)
    }

    #[test]
    fn pretrain_schedule() {
        let cfg = PretrainConfig::default();
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert_eq!(cfg.lr_at(50), 1e-3);
        assert_eq!(cfg.lr_at(51), 5e-4);
        assert_eq!(cfg.lr_at(60), 5e-4);
        assert_eq!(cfg.lr_at(61), 2.5e-4);
    }

    #[test]
    fn adapt_schedule_and_sigma_check() {
        let cfg = AdaptConfig::default();
        assert_eq!(cfg.lr_at(20), 1e-4);
        assert_eq!(cfg.lr_at(21), 1e-5);
        assert!(matches!(cfg.validate(), Err(Error::MissingSigma)));
        let ft = AdaptConfig::finetune_default();
        assert_eq!(ft.lr_at(999), 1e-5);
    }

    #[test]
    fn pretrain_is_deterministic_and_rejects_big_patches() {
        let data: Vec<_> = (0..3).map(|s| gen_piecewise_constant(&mut RngStream::new(s), 20, 1..=3).unwrap()).collect();
        let cfg = PretrainConfig {
            epochs: 2,
            patches_per_epoch: 8,
            batch_size: 4,
            patch_size: 12,
            ..Default::default()
        };
        let spec = preset("dncnn-s", 3, 4).unwrap();
        let (a, la) = pretrain(&spec, &data, &cfg).unwrap();
        let (b, lb) = pretrain(&spec, &data, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(la.to_csv_untimed(), lb.to_csv_untimed());
        assert!(a.network.gains.all_ones());
        assert_eq!(a.metadata.get("sigma255_hi"), Some("55"));
        let big = PretrainConfig { patch_size: 21, ..cfg };
        assert!(pretrain(&spec, &data, &big).is_err());
        assert!(pretrain(&spec, &[], &cfg).is_err());
    }

    #[test]
    fn gaintune_changes_only_gains() {
        let ck = tiny_ckpt();
        let (clean, noisy) = noisy_img(3);
        let cfg = AdaptConfig {
            steps: 3,
            lr: 1e-2,
            patches_per_step: 4,
            patch_size: 16,
            batch_size: 3,
            sigma255: Some(30.0),
            ..Default::default()
        };
        for loss in [LossKind::Sure, LossKind::Blindspot, LossKind::Resample] {
            let cfg = AdaptConfig { loss, ..cfg.clone() };
            let (out, log) = gaintune(&ck, &noisy, &cfg, Some(&clean)).unwrap();
            assert_eq!(out.network.params, ck.network.params);
            assert_ne!(out.network.gains, ck.network.gains);
            assert_eq!(log.rows.len(), 3);
            assert!(log.rows.iter().all(|r| r.psnr.is_some() && r.loss.is_finite()));
            let bytes = (out.to_bytes(), ck.to_bytes());
            assert_eq!(Checkpoint::param_section(&bytes.0), Checkpoint::param_section(&bytes.1));
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let ck = tiny_ckpt();
        let (_, noisy) = noisy_img(4);
        let cfg = AdaptConfig {
            steps: 0,
            patch_size: 16,
            sigma255: Some(30.0),
            ..Default::default()
        };
        let (out, log) = gaintune(&ck, &noisy, &cfg, None).unwrap();
        assert_eq!(out.network, ck.network);
        assert!(log.rows.is_empty());
        let ft = AdaptConfig {
            steps: 0,
            patch_size: 16,
            sigma255: Some(30.0),
            ..AdaptConfig::finetune_default()
        };
        assert_eq!(finetune_all(&ck, &noisy, &ft, None).unwrap().0.network, ck.network);
    }

    #[test]
    fn finetune_keeps_gains() {
        let ck = tiny_ckpt();
        let (_, noisy) = noisy_img(5);
        let cfg = AdaptConfig {
            steps: 2,
            patches_per_step: 2,
            patch_size: 16,
            sigma255: Some(30.0),
            ..AdaptConfig::finetune_default()
        };
        let (out, _) = finetune_all(&ck, &noisy, &cfg, None).unwrap();
        assert_eq!(out.network.gains, ck.network.gains);
        assert_ne!(out.network.params, ck.network.params);
        assert!(gaintune(&ck, &noisy, &cfg, None).is_err());
    }

    #[test]
    fn log_csv_format() {
        let mut log = TrainLog::default();
        log.push(LogRow {
            step: 1,
            loss: 0.5,
            lr: 1e-4,
            psnr: None,
            wall_ms: 7,
        });
        assert_eq!(log.to_csv(), "step,loss,lr,psnr,wall_ms\n1,5e-1,1e-4,,7\n");
        assert_eq!(log.to_csv_untimed(), "step,loss,lr,psnr,wall_ms\n1,5e-1,1e-4,,\n");
    }

    #[test]
    fn denoise_pads_odd_extents_for_unet() {
        let net = Network::init(preset("unet-s", 0, 4).unwrap(), &mut RngStream::new(2)).unwrap();
        let x: Tensor<f64> = RngStream::new(3).gaussian([1, 1, 21, 23], 0.3);
        let out = denoise_raw(&net, &x).unwrap();
        assert_eq!(out.shape(), [1, 1, 21, 23]);
        assert!(denoise_raw(&net, &x.crop(0, 0, 10, 10).unwrap()).is_err());
    }
}
