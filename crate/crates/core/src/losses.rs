//! Supervised and unsupervised denoising objectives.
//!
//! Every objective records itself on a [`Graph`] and returns the scalar loss
//! node, so the same code path serves evaluation and differentiation. The
//! denoiser is passed as a closure that records a forward pass on the graph.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::Network;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default ratio between the divergence probe step and σ.
pub const DEFAULT_EPS_FACTOR: f64 = 1.4e-4;

/// Records a denoiser forward pass from an input node.
pub trait Denoiser<T: Scalar> {
    fn record(&self, g: &mut Graph<T>, input: NodeId) -> Result<NodeId>;
}

impl<T: Scalar, F> Denoiser<T> for F
where
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    fn record(&self, g: &mut Graph<T>, input: NodeId) -> Result<NodeId> {
        self(g, input)
    }
}

#[derive(Clone, Debug)]
pub struct SureConfig {
    pub sigma255: f64,
    pub eps_factor: f64,
    pub probes_per_eval: usize,
    pub stream: RngStream,
}

impl SureConfig {
    pub fn new(sigma255: f64, stream: RngStream) -> Self {
        SureConfig {
            sigma255,
            eps_factor: DEFAULT_EPS_FACTOR,
            probes_per_eval: 1,
            stream,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma255 / 255.0
    }

    pub fn eps(&self) -> f64 {
        self.sigma() * self.eps_factor
    }
}

/// How masked pixels are replaced before the blind-spot forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFill {
    /// Mean of the unmasked pixels among the 3×3 neighbours, centre
    /// excluded. Falls back to the mean of all unmasked pixels in the patch
    /// when every neighbour is masked.
    NeighborMean,
    /// Independent `U[0, 1]` values.
    RandomUniform,
}

#[derive(Clone, Debug)]
pub struct MaskConfig {
    pub mask_fraction: f64,
    pub fill: MaskFill,
    pub stream: RngStream,
}

impl MaskConfig {
    pub fn new(stream: RngStream) -> Self {
        MaskConfig {
            mask_fraction: 0.03,
            fill: MaskFill::NeighborMean,
            stream,
        }
    }
}

/// A drawn blind-spot mask and the filled input.
#[derive(Clone, Debug)]
pub struct MaskDraw<T> {
    /// One flag per element of the patch batch.
    pub mask: Vec<bool>,
    pub filled: Tensor<T>,
}

impl<T> MaskDraw<T> {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Frozen initial estimate for the noise-resampling objective.
#[derive(Clone, Debug)]
pub struct ResampleState<T> {
    pub x_hat: Tensor<T>,
    pub sigma255: f64,
}

impl<T: Scalar> ResampleState<T> {
    /// Denoises `noisy` once with the network's gains reset to 1.
    pub fn from_network(net: &Network<T>, noisy: &Tensor<T>, sigma255: f64) -> Result<Self> {
        let mut base = net.clone();
        base.gains = crate::models::GainSet::ones(&net.spec);
        Ok(ResampleState {
            x_hat: base.forward(noisy)?,
            sigma255,
        })
    }
}

/// Mean of squared differences.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(target, "mse_loss")?;
    let d = pred.sub(target)?;
    Ok(d.sum_squares() / T::lit(d.len() as f64))
}

/// Monte-Carlo estimate of the divergence `Σₖ ∂fₖ/∂yₖ`:
/// `(1/ε)·⟨ñ, f(y + εñ) − f(y)⟩` averaged over `probes` standard normal
/// probes. `f_y` must be the node holding `f(y)`.
pub fn mc_divergence_node<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &impl Denoiser<T>,
    y: &Tensor<T>,
    f_y: NodeId,
    eps: f64,
    probes: usize,
    stream: &mut RngStream,
) -> Result<NodeId> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("probe step must be positive, got {eps}")));
    }
    if probes == 0 {
        return Err(Error::invalid("at least one probe is required"));
    }
    let mut total: Option<NodeId> = None;
    for _ in 0..probes {
        let probe: Tensor<T> = stream.gaussian(y.shape(), 1.0);
        let mut shifted = y.clone();
        shifted.axpy(T::lit(eps), &probe)?;
        let shifted = g.constant(shifted);
        let f_p = fwd.record(g, shifted)?;
        let diff = g.sub(f_p, f_y)?;
        let probe = g.constant(probe);
        let d = g.dot(diff, probe)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(g.affine(total.unwrap(), T::lit(1.0 / (eps * probes as f64)), T::zero()))
}

/// Value-only divergence estimate.
pub fn mc_divergence<T: Scalar>(
    fwd: &impl Denoiser<T>,
    y: &Tensor<T>,
    eps: f64,
    probes: usize,
    stream: &mut RngStream,
) -> Result<T> {
    let mut g = Graph::new();
    let yn = g.constant(y.clone());
    let f_y = fwd.record(&mut g, yn)?;
    let d = mc_divergence_node(&mut g, fwd, y, f_y, eps, probes, stream)?;
    Ok(g.value(d).item())
}

/// `(1/N)‖y − f(y)‖² − σ² + (2σ²/N)·div`, differentiable through both the
/// clean and the probe pass.
pub fn sure_loss<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &impl Denoiser<T>,
    y: &Tensor<T>,
    cfg: &mut SureConfig,
) -> Result<NodeId> {
    if !(cfg.sigma255 > 0.0) {
        return Err(Error::MissingSigma);
    }
    let n = y.len() as f64;
    let s2 = cfg.sigma() * cfg.sigma();
    let yn = g.constant(y.clone());
    let f_y = fwd.record(g, yn)?;
    let div = mc_divergence_node(g, fwd, y, f_y, cfg.eps(), cfg.probes_per_eval, &mut cfg.stream)?;
    let resid = g.sub(yn, f_y)?;
    let ss = g.sum_squares(resid);
    let fit = g.affine(ss, T::lit(1.0 / n), T::lit(-s2));
    let pen = g.affine(div, T::lit(2.0 * s2 / n), T::zero());
    g.add(fit, pen)
}

/// Closed-form SURE of the linear denoiser `y ↦ θ ⋆ y` (zero-padded
/// correlation, same extent): `(1/N)‖y − θ⋆y‖² − σ² + 2σ²θ₀` with `θ₀` the
/// centre tap. `theta` is `(1, 1, kh, kw)` with odd extents.
pub fn linear_sure_oracle(theta: &Tensor<f64>, y: &Tensor<f64>, sigma: f64) -> Result<f64> {
    let [_, _, kh, kw] = theta.shape();
    if kh % 2 == 0 || kw % 2 == 0 || theta.len() != kh * kw {
        return Err(Error::invalid(format!(
            "linear SURE needs a single odd-extent filter, got {:?}",
            theta.shape()
        )));
    }
    let [b, c, h, w] = y.shape();
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let t = theta.data();
    let mut ss = 0.0;
    for n in 0..b {
        for ch in 0..c {
            let p = y.plane(n, ch);
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for a in -rh..=rh {
                        for bb in -rw..=rw {
                            let (yi, yj) = (i + a, j + bb);
                            if yi >= 0 && yj >= 0 && yi < h as isize && yj < w as isize {
                                acc += t[((a + rh) * kw as isize + bb + rw) as usize]
                                    * p[(yi * w as isize + yj) as usize];
                            }
                        }
                    }
                    let r = p[(i * w as isize + j) as usize] - acc;
                    ss += r * r;
                }
            }
        }
    }
    let centre = t[(rh * kw as isize + rw) as usize];
    Ok(ss / y.len() as f64 - sigma * sigma + 2.0 * sigma * sigma * centre)
}

/// Draws a blind-spot mask with at least one masked pixel per patch and
/// fills the masked pixels. Redraws up to 8 times before giving up.
pub fn draw_mask<T: Scalar>(y: &Tensor<T>, cfg: &mut MaskConfig) -> Result<MaskDraw<T>> {
    if !(cfg.mask_fraction > 0.0 && cfg.mask_fraction <= 0.5) {
        return Err(Error::invalid(format!(
            "mask fraction must lie in (0, 0.5], got {}",
            cfg.mask_fraction
        )));
    }
    let plane = y.height() * y.width();
    for _ in 0..8 {
        let mask: Vec<bool> = (0..y.len()).map(|_| cfg.stream.bernoulli(cfg.mask_fraction)).collect();
        if mask.chunks(plane).all(|m| m.iter().any(|&v| v)) {
            let filled = fill_masked(y, &mask, cfg.fill, &mut cfg.stream);
            return Ok(MaskDraw { mask, filled });
        }
    }
    Err(Error::EmptyMask(8))
}

/// Replaces masked pixels of `y`. The fill of a masked pixel never reads
/// any masked pixel, so a prediction can not see its own target through a
/// masked neighbour.
pub fn fill_masked<T: Scalar>(y: &Tensor<T>, mask: &[bool], fill: MaskFill, stream: &mut RngStream) -> Tensor<T> {
    let (h, w) = (y.height(), y.width());
    let mut out = y.clone();
    for (pi, (src, m)) in y.data().chunks(h * w).zip(mask.chunks(h * w)).enumerate() {
        let dst = &mut out.data_mut()[pi * h * w..(pi + 1) * h * w];
        let (mut sum, mut cnt) = (T::zero(), 0usize);
        for (v, &mk) in src.iter().zip(m) {
            if !mk {
                sum += *v;
                cnt += 1;
            }
        }
        let fallback = if cnt > 0 { sum / T::lit(cnt as f64) } else { T::zero() };
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if !m[i] {
                    continue;
                }
                dst[i] = match fill {
                    MaskFill::RandomUniform => T::lit(stream.uniform()),
                    MaskFill::NeighborMean => {
                        let (mut s, mut k) = (T::zero(), 0usize);
                        for rr in r.saturating_sub(1)..(r + 2).min(h) {
                            for cc in c.saturating_sub(1)..(c + 2).min(w) {
                                let j = rr * w + cc;
                                if j != i && !m[j] {
                                    s += src[j];
                                    k += 1;
                                }
                            }
                        }
                        if k > 0 {
                            s / T::lit(k as f64)
                        } else {
                            fallback
                        }
                    }
                };
            }
        }
    }
    out
}

/// Mean over masked pixels of `(f(ỹ)ⱼ − yⱼ)²` for a given mask draw.
pub fn blindspot_loss_with<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &impl Denoiser<T>,
    y: &Tensor<T>,
    draw: &MaskDraw<T>,
) -> Result<NodeId> {
    let count = draw.count();
    if count == 0 {
        return Err(Error::invalid("mask draw has no masked pixels"));
    }
    let input = g.constant(draw.filled.clone());
    let pred = fwd.record(g, input)?;
    let target = g.constant(y.clone());
    let diff = g.sub(pred, target)?;
    let m = Tensor::from_vec(
        y.shape(),
        draw.mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
    )?;
    let m = g.constant(m);
    let masked = g.mul(diff, m)?;
    let ss = g.sum_squares(masked);
    Ok(g.affine(ss, T::lit(1.0 / count as f64), T::zero()))
}

/// Blind-spot objective with a fresh mask.
pub fn blindspot_loss<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &impl Denoiser<T>,
    y: &Tensor<T>,
    cfg: &mut MaskConfig,
) -> Result<NodeId> {
    let draw = draw_mask(y, cfg)?;
    blindspot_loss_with(g, fwd, y, &draw)
}

/// `(1/N)‖f(x̂ + n) − x̂‖²` with fresh `n ~ N(0, σ²)`; `x_hat` is constant.
pub fn noise_resampling_loss<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &impl Denoiser<T>,
    x_hat: &Tensor<T>,
    sigma255: f64,
    stream: &mut RngStream,
) -> Result<NodeId> {
    if !(sigma255 >= 0.0) {
        return Err(Error::MissingSigma);
    }
    let noise: Tensor<T> = stream.gaussian(x_hat.shape(), sigma255 / 255.0);
    let input = g.constant(x_hat.add(&noise)?);
    let pred = fwd.record(g, input)?;
    let target = g.constant(x_hat.clone());
    g.mse(pred, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvGeometry;

    fn identity(_: &mut Graph<f64>, x: NodeId) -> Result<NodeId> {
        Ok(x)
    }

    fn filter_fn(theta: Tensor<f64>) -> impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId> {
        move |g, x| {
            let w = g.constant(theta.clone());
            let pad = theta.height() / 2;
            g.conv2d(x, w, None, ConvGeometry::new(1, pad, 1))
        }
    }

    fn scalar_loop_mse(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s / a.len() as f64
    }

    #[test]
    fn mse_cases() {
        let a: Tensor<f64> = RngStream::new(1).gaussian([2, 1, 5, 7], 1.0);
        let b: Tensor<f64> = RngStream::new(2).gaussian([2, 1, 5, 7], 1.0);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.25);
        assert!((mse_loss(&shifted, &a).unwrap() - 0.0625).abs() < 1e-15);
        let oracle = scalar_loop_mse(a.data(), b.data());
        assert!((mse_loss(&a, &b).unwrap() - oracle).abs() < 1e-14);
        assert!(mse_loss(&a, &a.crop(0, 0, 4, 7).unwrap()).is_err());
    }

    #[test]
    fn constant_function_has_zero_divergence() {
        let c = Tensor::full([1, 1, 8, 8], 0.3);
        let f = move |g: &mut Graph<f64>, _x: NodeId| Ok(g.constant(c.clone()));
        let y: Tensor<f64> = RngStream::new(3).gaussian([1, 1, 8, 8], 1.0);
        assert_eq!(mc_divergence(&f, &y, 1e-3, 1, &mut RngStream::new(4)).unwrap(), 0.0);
    }

    #[test]
    fn identity_divergence_is_probe_norm() {
        let y = Tensor::zeros([1, 1, 16, 16]);
        let mut s = RngStream::new(5);
        let probe: Tensor<f64> = s.clone().gaussian([1, 1, 16, 16], 1.0);
        let d = mc_divergence(&identity, &y, 1e-4, 1, &mut s).unwrap();
        assert!((d - probe.sum_squares()).abs() < 1e-9 * probe.sum_squares());
    }

    #[test]
    fn sure_requires_sigma() {
        let y = Tensor::zeros([1, 1, 4, 4]);
        let mut cfg = SureConfig::new(0.0, RngStream::new(1));
        let mut g = Graph::new();
        assert!(matches!(sure_loss(&mut g, &identity, &y, &mut cfg), Err(Error::MissingSigma)));
    }

    #[test]
    fn oracle_trivial_filters() {
        let y: Tensor<f64> = RngStream::new(6).gaussian([1, 1, 9, 9], 1.0);
        let mut delta = Tensor::zeros([1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        assert!((linear_sure_oracle(&delta, &y, 0.1).unwrap() - 0.01).abs() < 1e-15);
        let zero = Tensor::zeros([1, 1, 3, 3]);
        let expect = y.sum_squares() / 81.0 - 0.01;
        assert!((linear_sure_oracle(&zero, &y, 0.1).unwrap() - expect).abs() < 1e-14);
        assert!(linear_sure_oracle(&Tensor::zeros([1, 1, 2, 3]), &y, 0.1).is_err());
    }

    #[test]
    fn sure_of_linear_filter_matches_oracle_on_average() {
        let y: Tensor<f64> = RngStream::new(7).gaussian([1, 1, 32, 32], 0.5);
        let theta = Tensor::full([1, 1, 3, 3], 1.0 / 9.0);
        let f = filter_fn(theta.clone());
        let mut cfg = SureConfig::new(25.0, RngStream::new(8));
        let mut acc = 0.0;
        for _ in 0..200 {
            let mut g = Graph::new();
            let l = sure_loss(&mut g, &f, &y, &mut cfg).unwrap();
            acc += g.value(l).item();
        }
        let oracle = linear_sure_oracle(&theta, &y, 25.0 / 255.0).unwrap();
        assert!(((acc / 200.0) - oracle).abs() < 0.02 * oracle.abs(), "{} vs {oracle}", acc / 200.0);
    }

    #[test]
    fn mask_always_has_pixels_and_fill_avoids_masked() {
        let y: Tensor<f64> = RngStream::new(9).gaussian([3, 1, 6, 6], 1.0);
        let mut cfg = MaskConfig::new(RngStream::new(10));
        cfg.mask_fraction = 0.5;
        for _ in 0..20 {
            let d = draw_mask(&y, &mut cfg).unwrap();
            for (p, m) in d.mask.chunks(36).enumerate() {
                assert!(m.iter().any(|&v| v), "patch {p} empty");
            }
            for (i, &m) in d.mask.iter().enumerate() {
                if !m {
                    assert_eq!(d.filled.data()[i], y.data()[i]);
                }
            }
        }
        cfg.mask_fraction = 0.0;
        assert!(draw_mask(&y, &mut cfg).is_err());
    }

    #[test]
    fn blindspot_identity_matches_hand_loop() {
        let (h, w) = (7, 9);
        let y: Tensor<f64> = RngStream::new(11).gaussian([1, 1, h, w], 1.0);
        let mut cfg = MaskConfig::new(RngStream::new(12));
        cfg.mask_fraction = 0.1;
        let draw = draw_mask(&y, &mut cfg).unwrap();
        let mut g = Graph::new();
        let l = blindspot_loss_with(&mut g, &identity, &y, &draw).unwrap();
        let (mut s, mut k) = (0.0, 0);
        for r in 0..h {
            for c in 0..w {
                if !draw.mask[r * w + c] {
                    continue;
                }
                let mut nb = Vec::new();
                for dr in -1i32..=1 {
                    for dc in -1i32..=1 {
                        let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                        if (dr, dc) != (0, 0) && rr >= 0 && cc >= 0 && rr < h as i32 && cc < w as i32 {
                            let j = rr as usize * w + cc as usize;
                            if !draw.mask[j] {
                                nb.push(y.data()[j]);
                            }
                        }
                    }
                }
                let pred = nb.iter().sum::<f64>() / nb.len() as f64;
                s += (pred - y.data()[r * w + c]).powi(2);
                k += 1;
            }
        }
        assert!((g.value(l).item() - s / k as f64).abs() < 1e-14);
    }

    #[test]
    fn blindspot_constant_image_is_zero() {
        let y = Tensor::full([2, 1, 8, 8], 0.4);
        let mut cfg = MaskConfig::new(RngStream::new(13));
        let mut g = Graph::new();
        let l = blindspot_loss(&mut g, &identity, &y, &mut cfg).unwrap();
        assert!(g.value(l).item().abs() < 1e-30);
    }

    #[test]
    fn resampling_trivial_cases() {
        let x_hat: Tensor<f64> = RngStream::new(14).gaussian([1, 1, 64, 64], 0.2);
        let mut s = RngStream::new(15);
        let mut g = Graph::new();
        let l = noise_resampling_loss(&mut g, &identity, &x_hat, 25.5, &mut s).unwrap();
        assert!((g.value(l).item() - 0.01).abs() < 0.01 * 4.0 * (2.0 / 4096f64).sqrt());
        let xc = x_hat.clone();
        let to_xhat = move |g: &mut Graph<f64>, _x: NodeId| Ok(g.constant(xc.clone()));
        let mut g = Graph::new();
        let l = noise_resampling_loss(&mut g, &to_xhat, &x_hat, 25.5, &mut s).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
