//! PSNR evaluation and first-order (Jacobian) instruments.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::ImageGray;
use crate::error::{Error, Result};
use crate::graph::{Graph, Seed};
use crate::imageio::{save_pgm, PgmDepth};
use crate::models::{Network, Trainable};
use crate::tensor::Tensor;

/// Step of the directional probe used by [`BiasMethod::Jvp`].
pub const JVP_STEP: f64 = 1e-6;

/// Largest image (in pixels) accepted by the full-Jacobian method.
pub const FULL_JACOBIAN_MAX_PIXELS: usize = 64 * 64;

/// `10·log10(peak² / MSE)` between two equally shaped tensors.
pub fn psnr_tensor(reference: &Tensor<f64>, estimate: &Tensor<f64>, peak: f64) -> Result<f64> {
    reference.expect_same_shape(estimate, "psnr")?;
    let mse = reference.sub(estimate)?.sum_squares() / reference.len() as f64;
    if mse == 0.0 {
        return Err(Error::IdenticalImages);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(reference: &ImageGray, estimate: &ImageGray, peak: f64) -> Result<f64> {
    psnr_tensor(&reference.to_tensor(), &estimate.to_tensor(), peak)
}

/// Jacobian row of one output pixel: the weights the network applies to
/// every input pixel at the linearization point.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalentFilter {
    pub row: usize,
    pub col: usize,
    /// `(1, 1, h, w)`.
    pub weights: Tensor<f64>,
}

impl EquivalentFilter {
    /// `⟨a_y(i), y⟩`.
    pub fn apply(&self, y: &Tensor<f64>) -> Result<f64> {
        self.weights.dot(y)
    }

    pub fn row_sum(&self) -> f64 {
        self.weights.sum()
    }
}

/// Reverse-mode gradient of output pixel `(row, col)` with respect to the
/// input image `y` of shape `(1, 1, h, w)`.
pub fn equivalent_filter(net: &Network<f64>, y: &Tensor<f64>, pixel: (usize, usize)) -> Result<EquivalentFilter> {
    let [n, _, h, w] = y.shape();
    let (row, col) = pixel;
    if n != 1 || row >= h || col >= w {
        return Err(Error::invalid(format!(
            "pixel ({row},{col}) outside the {h}x{w} image"
        )));
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, Trainable::None);
    let x = g.variable(y.clone());
    let out = net.forward_graph(&mut g, &bound, x)?;
    let mut grads = g.backward(out, Seed::Element(row * w + col))?;
    let weights = grads.take(x).unwrap_or_else(|| Tensor::zeros(y.shape()));
    Ok(EquivalentFilter { row, col, weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasMethod {
    /// Directional finite difference along `y`, verified by activation
    /// patterns.
    Jvp,
    /// One reverse sweep per pixel.
    FullJacobian,
}

impl std::str::FromStr for BiasMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jvp" => Ok(BiasMethod::Jvp),
            "full" | "full_jacobian" => Ok(BiasMethod::FullJacobian),
            _ => Err(Error::invalid(format!("unknown bias method {s:?}"))),
        }
    }
}

/// Constant term of the first-order expansion `f(y) = J_y·y + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetBias {
    pub bias: Tensor<f64>,
    pub bias_l2: f64,
    /// `‖b‖₂ / ‖f(y)‖₂`.
    pub relative: f64,
    /// The method that produced the result, after any fallback.
    pub method: BiasMethod,
}

fn output_and_pattern(net: &Network<f64>, y: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<usize>)> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, Trainable::None);
    let x = g.constant(y.clone());
    let out = net.forward_graph(&mut g, &bound, x)?;
    Ok((g.value(out).clone(), g.activation_pattern()))
}

/// `b = f(y) − J_y·y`. With [`BiasMethod::Jvp`], an activation flip between
/// `y` and `y + h·y` falls back to the full Jacobian when `fallback` is set
/// and is an error otherwise.
pub fn net_bias(net: &Network<f64>, y: &Tensor<f64>, method: BiasMethod, fallback: bool) -> Result<NetBias> {
    let (f_y, pattern) = output_and_pattern(net, y)?;
    let jy = match method {
        BiasMethod::Jvp => {
            let probe = y.map(|v| v + JVP_STEP * v);
            let (f_p, pattern_p) = output_and_pattern(net, &probe)?;
            if pattern_p == pattern {
                Some(f_p.sub(&f_y)?.scale(1.0 / JVP_STEP))
            } else if fallback {
                None
            } else {
                return Err(Error::ActivationFlip);
            }
        }
        BiasMethod::FullJacobian => None,
    };
    let (jy, used) = match jy {
        Some(jy) => (jy, BiasMethod::Jvp),
        None => (full_jacobian_product(net, y)?, BiasMethod::FullJacobian),
    };
    let bias = f_y.sub(&jy)?;
    let bias_l2 = bias.sum_squares().sqrt();
    let out_l2 = f_y.sum_squares().sqrt();
    Ok(NetBias {
        relative: if out_l2 > 0.0 { bias_l2 / out_l2 } else { f64::INFINITY },
        bias,
        bias_l2,
        method: used,
    })
}

/// `J_y·y`, one equivalent filter per output pixel.
pub fn full_jacobian_product(net: &Network<f64>, y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [_, _, h, w] = y.shape();
    if h * w > FULL_JACOBIAN_MAX_PIXELS {
        return Err(Error::invalid(format!(
            "full Jacobian limited to {FULL_JACOBIAN_MAX_PIXELS} pixels, image has {}",
            h * w
        )));
    }
    let mut out = Tensor::zeros(y.shape());
    let mut g = Graph::new();
    let bound = net.bind(&mut g, Trainable::None);
    let x = g.variable(y.clone());
    let f = net.forward_graph(&mut g, &bound, x)?;
    for i in 0..h * w {
        let mut grads = g.backward(f, Seed::Element(i))?;
        if let Some(row) = grads.take(x) {
            out.data_mut()[i] = row.dot(y)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaReport {
    pub csv: String,
    pub summary: DeltaSummary,
}

impl DeltaSummary {
    pub fn to_text(&self) -> String {
        format!(
            "count={} mean={:.4} median={:.4} min={:.4} max={:.4} negatives={}",
            self.count, self.mean, self.median, self.min, self.max, self.negatives
        )
    }
}

/// Per-image ΔPSNR rows `(id, before, after)` plus an order-independent
/// summary.
pub fn delta_psnr_report(results: &[(String, f64, f64)]) -> Result<DeltaReport> {
    if results.is_empty() {
        return Err(Error::invalid("ΔPSNR report needs at least one image"));
    }
    let mut csv = String::from("id,psnr_before,psnr_after,delta\n");
    for (id, before, after) in results {
        let _ = writeln!(csv, "{id},{before:.6},{after:.6},{:.6}", after - before);
    }
    let mut deltas: Vec<f64> = results.iter().map(|(_, b, a)| a - b).collect();
    deltas.sort_by(f64::total_cmp);
    let n = deltas.len();
    let median = if n % 2 == 1 {
        deltas[n / 2]
    } else {
        0.5 * (deltas[n / 2 - 1] + deltas[n / 2])
    };
    Ok(DeltaReport {
        csv,
        summary: DeltaSummary {
            count: n,
            mean: deltas.iter().sum::<f64>() / n as f64,
            median,
            min: deltas[0],
            max: deltas[n - 1],
            negatives: deltas.iter().filter(|&&d| d < 0.0).count(),
        },
    })
}

/// Symmetric gray-scale rendering: `[−max|w|, +max|w|]` maps onto
/// `[0, 1]`, so zero lands on 0.5 (byte 128 after 8-bit rounding). An
/// all-zero filter renders uniformly mid-gray.
pub fn filter_image(filter: &EquivalentFilter) -> ImageGray {
    let m = filter.weights.max_abs();
    let scale = if m > 0.0 { 0.5 / m } else { 0.0 };
    let shaded = filter.weights.map(|v| 0.5 + v * scale);
    ImageGray::from_tensor_clamped(&shaded)
}

pub fn filter_to_pgm(filter: &EquivalentFilter, path: impl AsRef<Path>) -> Result<()> {
    save_pgm(&filter_image(filter), path, PgmDepth::Eight)
}
