//! Finite-difference gradient checking shared by the gradient suite and the
//! acceptance runner.
#![allow(dead_code)]

use gaintune::graph::{NodeId, Seed};
use gaintune::models::{preset, Trainable};
use gaintune::ops::ConvGeometry;
use gaintune::rng::RngStream;
use gaintune::{Graph, Network, Tensor};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Copy, Debug, Default)]
pub struct Check {
    /// Largest `max|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// the checked tensors, the maxima taken per tensor.
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates where every step size moved a ReLU or pooling decision.
    pub skipped: usize,
}

impl Check {
    pub fn merge(self, other: Check) -> Check {
        Check {
            max_rel: self.max_rel.max(other.max_rel),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

const STEPS: [f64; 3] = [1e-5, 2e-6, 5e-7];

/// Records `record` on variables holding `inputs`, projects the output onto
/// a fixed random direction and checks the gradient of every input.
pub fn check<F>(inputs: &[Tensor], record: F) -> Check
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |values: &[Tensor]| {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values.iter().map(|v| g.variable(v.clone())).collect();
        let out = record(&mut g, &leaves);
        let mut proj = RngStream::new(0xfd);
        let dir = g.constant(proj.gaussian(g.value(out).shape(), 1.0));
        let s = g.dot(out, dir).unwrap();
        (g, leaves, s)
    };
    let (g, leaves, s) = eval(inputs);
    let pattern = g.activation_pattern();
    let grads = g.backward(s, Seed::Scalar).unwrap();
    let value_at = |values: &[Tensor]| {
        let (g, _, s) = eval(values);
        (g.value(s).item(), g.activation_pattern() == pattern)
    };

    let mut result = Check::default();
    let mut values = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            let mut numeric = None;
            for h in STEPS {
                values[i].data_mut()[j] = x0 + h;
                let (fp, okp) = value_at(&values);
                values[i].data_mut()[j] = x0 - h;
                let (fm, okm) = value_at(&values);
                values[i].data_mut()[j] = x0;
                if okp && okm {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
            }
            let a = analytic.data()[j];
            match numeric {
                Some(n) => {
                    worst = worst.max((a - n).abs());
                    scale = scale.max(a.abs()).max(n.abs());
                    result.checked += 1;
                }
                None => result.skipped += 1,
            }
        }
        if scale > 0.0 {
            result.max_rel = result.max_rel.max(worst / scale);
        }
    }
    result
}

pub fn gaussian(stream: &mut RngStream, shape: [usize; 4], sigma: f64) -> Tensor {
    stream.gaussian(shape, sigma)
}

/// Values bounded away from zero so ReLU kinks sit far from the probe.
pub fn away_from_zero(stream: &mut RngStream, shape: [usize; 4]) -> Tensor {
    let mut t = stream.gaussian::<f64>(shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

/// Distinct values in random order, so max-pool windows have clear winners.
pub fn distinct(stream: &mut RngStream, shape: [usize; 4]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, stream.below(i as u64 + 1) as usize);
    }
    Tensor::from_vec(shape, order.iter().map(|&k| k as f64 * 0.01 - 0.3).collect()).unwrap()
}

/// Every recorded operator on freshly drawn shapes and values.
pub fn operator_checks(seed: u64) -> Vec<(&'static str, Check)> {
    let mut s = RngStream::new(seed).fork(17);
    let mut out = Vec::new();
    let n = 1 + s.below(2) as usize;
    let cin = 1 + s.below(3) as usize;
    let cout = 1 + s.below(3) as usize;
    let h = 5 + s.below(4) as usize;
    let w = 5 + s.below(4) as usize;
    let k = [1, 3, 5][s.below(3) as usize];
    let geom = ConvGeometry::new(1 + s.below(2) as usize, s.below(3) as usize, 1 + s.below(2) as usize);

    let x = gaussian(&mut s, [n, cin, h, w], 1.0);
    let wt = gaussian(&mut s, [cout, cin, k, k], 0.5);
    let b = gaussian(&mut s, [1, cout, 1, 1], 0.5);
    if geom.out_extent(h, k) > 0 && geom.out_extent(w, k) > 0 {
        out.push((
            "conv2d",
            check(&[x.clone(), wt.clone(), b.clone()], |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), geom).unwrap()
            }),
        ));
    }
    // transposed: weights read as [cin, cout, k, k]
    let tk = [2, 3, 4][s.below(3) as usize];
    let tgeom = ConvGeometry::new(1 + s.below(2) as usize, s.below(2) as usize, 1);
    let tw = gaussian(&mut s, [cin, cout, tk, tk], 0.5);
    if tgeom.transpose_out_extent(h, tk) > 0 {
        out.push((
            "transpose_conv2d",
            check(&[x.clone(), tw, b.clone()], |g, v| {
                g.transpose_conv2d(v[0], v[1], Some(v[2]), tgeom).unwrap()
            }),
        ));
    }
    let xa = away_from_zero(&mut s, [n, cin, h, w]);
    out.push(("relu", check(&[xa.clone()], |g, v| g.relu(v[0]))));
    let gains = gaussian(&mut s, [1, cin, 1, 1], 1.0);
    out.push((
        "per_channel_scale",
        check(&[x.clone(), gains], |g, v| g.per_channel_scale(v[0], v[1]).unwrap()),
    ));
    let y = gaussian(&mut s, [n, cin, h, w], 1.0);
    out.push(("add", check(&[x.clone(), y.clone()], |g, v| g.add(v[0], v[1]).unwrap())));
    out.push(("sub", check(&[x.clone(), y.clone()], |g, v| g.sub(v[0], v[1]).unwrap())));
    out.push(("mul", check(&[x.clone(), y.clone()], |g, v| g.mul(v[0], v[1]).unwrap())));
    let (a, c) = (s.uniform_range(-2.0, 2.0), s.uniform_range(-1.0, 1.0));
    out.push(("affine", check(&[x.clone()], |g, v| g.affine(v[0], a, c))));
    let xe = distinct(&mut s, [n, cin, 2 * (h / 2), 2 * (w / 2)]);
    out.push(("maxpool2", check(&[xe], |g, v| g.maxpool2(v[0]).unwrap())));
    out.push(("upsample_nearest2", check(&[x.clone()], |g, v| g.upsample_nearest2(v[0]))));
    let z = gaussian(&mut s, [n, cout, h, w], 1.0);
    out.push((
        "concat_channels",
        check(&[x.clone(), z], |g, v| g.concat_channels(v[0], v[1]).unwrap()),
    ));
    out.push(("sum", check(&[x.clone()], |g, v| g.sum(v[0]))));
    out.push(("sum_squares", check(&[x.clone()], |g, v| g.sum_squares(v[0]))));
    out.push(("dot", check(&[x.clone(), y.clone()], |g, v| g.dot(v[0], v[1]).unwrap())));
    out.push(("mse", check(&[x, y], |g, v| g.mse(v[0], v[1]).unwrap())));
    out
}

/// Small instance of a preset with random biases and gains.
pub fn tiny_network(name: &str, seed: u64) -> (Network, usize) {
    let spec = preset(name, 4, 4).unwrap();
    let size = spec.min_extent().max(8);
    let mut s = RngStream::new(seed).fork(29);
    let mut net = Network::init(spec, &mut s).unwrap();
    for cp in &mut net.params.convs {
        if let Some(b) = &mut cp.bias {
            *b = s.gaussian(b.shape(), 0.1);
        }
    }
    let gains: Vec<f64> = net.gains.flatten().iter().map(|_| s.uniform_range(0.7, 1.3)).collect();
    net.gains.assign(&gains).unwrap();
    (net, size)
}

/// Gradients of a preset network's output with respect to its input, its
/// parameters and its gains.
pub fn network_checks(name: &str, seed: u64) -> Check {
    let (net, size) = tiny_network(name, seed);
    let mut s = RngStream::new(seed).fork(31);
    let y = s.gaussian::<f64>([1, 1, size, size], 1.0).map(|v| 0.5 + 0.3 * v);

    let input = check(&[y.clone()], |g, v| {
        let b = net.bind(g, Trainable::None);
        net.forward_graph(g, &b, v[0]).unwrap()
    });

    let params: Vec<Tensor> = net
        .params
        .convs
        .iter()
        .flat_map(|cp| std::iter::once(cp.weights.clone()).chain(cp.bias.clone()))
        .collect();
    let with_params = check(&params, |g, v| {
        let mut it = v.iter();
        let x = g.constant(y.clone());
        let mut b = net.bind(g, Trainable::None);
        for (ci, cp) in net.params.convs.iter().enumerate() {
            b.weights[ci] = *it.next().unwrap();
            if cp.bias.is_some() {
                b.biases[ci] = Some(*it.next().unwrap());
            }
        }
        net.forward_graph(g, &b, x).unwrap()
    });

    let gains: Vec<Tensor> = net.gains.layers.iter().flatten().cloned().collect();
    let with_gains = check(&gains, |g, v| {
        let x = g.constant(y.clone());
        let mut b = net.bind(g, Trainable::None);
        let mut it = v.iter();
        for slot in b.gains.iter_mut().filter(|s| s.is_some()) {
            *slot = Some(*it.next().unwrap());
        }
        net.forward_graph(g, &b, x).unwrap()
    });
    input.merge(with_params).merge(with_gains)
}

/// Direct six-loop convolution used as an independent forward reference.
pub fn conv_direct(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: ConvGeometry) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let oh = geom.out_extent(h, kh) as usize;
    let ow = geom.out_extent(wd, kw) as usize;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for b in 0..n {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * geom.stride + u * geom.dilation) as isize - geom.pad as isize;
                                let c = (j * geom.stride + v * geom.dilation) as isize - geom.pad as isize;
                                if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < wd {
                                    acc += x.get(b, ci, r as usize, c as usize) * w.get(co, ci, u, v);
                                }
                            }
                        }
                    }
                    out.set(b, co, i, j, acc);
                }
            }
        }
    }
    out
}
