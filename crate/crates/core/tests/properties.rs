mod support;

use std::path::Path;

use gaintune::checkpoint::{Checkpoint, Metadata};
use gaintune::data::ImageGray;
use gaintune::imageio::{decode_pgm, decode_rawf64, encode_pgm, encode_rawf64, PgmDepth};
use gaintune::models::{ArchitectureSpec, Layer};
use gaintune::rng::RngStream;
use gaintune::{Network, Network32, Tensor};
use proptest::prelude::*;

const PRESETS: [&str; 3] = ["dncnn-s", "bf-dncnn-s", "unet-s"];

fn input_for(size: usize, seed: u64) -> Tensor {
    RngStream::new(seed).gaussian::<f64>([1, 1, size, size], 0.25).map(|v| v + 0.5)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().max_abs()
}

fn linear_net(seed: u64) -> Network {
    let conv = |cin, cout| Layer::Conv {
        cin,
        cout,
        k: 3,
        pad: 1,
        stride: 1,
        dilation: 1,
        has_bias: false,
    };
    let spec = ArchitectureSpec::with_default_gains("linear", vec![conv(1, 3), conv(3, 3), conv(3, 1)], true);
    let mut s = RngStream::new(seed);
    let mut net = Network::init(spec, &mut s).unwrap();
    let gains: Vec<f64> = net.gains.flatten().iter().map(|_| s.uniform_range(0.5, 1.5)).collect();
    net.gains.assign(&gains).unwrap();
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn folding_gains_preserves_the_function(which in 0usize..3, seed in any::<u64>()) {
        let (net, size) = support::tiny_network(PRESETS[which], seed);
        let y = input_for(size, seed ^ 1);
        let a = net.forward(&y).unwrap();
        let b = net.folded().forward(&y).unwrap();
        prop_assert!(max_diff(&a, &b) <= 1e-12 * (1.0 + a.max_abs()));
    }

    #[test]
    fn unit_gains_are_bitwise_neutral(which in 0usize..3, seed in any::<u64>()) {
        let (mut net, size) = support::tiny_network(PRESETS[which], seed);
        let ones = vec![1.0; net.gains.len()];
        net.gains.assign(&ones).unwrap();
        let y = input_for(size, seed ^ 2);
        let with_gains = net.forward(&y).unwrap();
        let without = net.folded().forward(&y).unwrap();
        prop_assert_eq!(with_gains.data(), without.data());
    }

    #[test]
    fn bias_free_nets_are_positively_homogeneous(seed in any::<u64>(), alpha in 0.1f64..10.0) {
        let (net, size) = support::tiny_network("bf-dncnn-s", seed);
        let y = input_for(size, seed ^ 3);
        let fy = net.forward(&y).unwrap();
        let fay = net.forward(&y.scale(alpha)).unwrap();
        prop_assert!(max_diff(&fay, &fy.scale(alpha)) <= 1e-9 * alpha.max(1.0) * (1.0 + fy.max_abs()));
    }

    #[test]
    fn relu_free_bias_free_nets_are_linear(seed in any::<u64>()) {
        let net = linear_net(seed);
        let mut s = RngStream::new(seed ^ 4);
        let a: Tensor = s.gaussian([1, 1, 9, 11], 1.0);
        let b: Tensor = s.gaussian([1, 1, 9, 11], 1.0);
        let sum = net.forward(&a.add(&b).unwrap()).unwrap();
        let parts = net.forward(&a).unwrap().add(&net.forward(&b).unwrap()).unwrap();
        prop_assert!(max_diff(&sum, &parts) <= 1e-10);
    }

    #[test]
    fn checkpoints_round_trip(which in 0usize..3, seed in any::<u64>()) {
        let (net, size) = support::tiny_network(PRESETS[which], seed);
        let mut meta = Metadata::new();
        meta.set("seed", seed);
        let ck = Checkpoint::new(net, meta);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back.to_bytes(), &bytes);
        let y = input_for(size, seed ^ 5);
        let (a, b) = (back.network.forward(&y).unwrap(), ck.network.forward(&y).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn raw_tensors_round_trip(n in 1usize..3, c in 1usize..3, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let t: Tensor = RngStream::new(seed).gaussian([n, c, h, w], 3.0);
        let back = decode_rawf64(&encode_rawf64(&t), Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pgm_quantization_is_bounded(h in 1usize..12, w in 1usize..12, seed in any::<u64>(), deep in any::<bool>()) {
        let mut s = RngStream::new(seed);
        let img = ImageGray::new(h, w, (0..h * w).map(|_| s.uniform()).collect()).unwrap();
        let (depth, bound) = if deep {
            (PgmDepth::Sixteen, 1.0 / 131070.0)
        } else {
            (PgmDepth::Eight, 1.0 / 510.0)
        };
        let back = decode_pgm(&encode_pgm(&img, depth), Path::new("mem")).unwrap();
        let worst = back.pixels().iter().zip(img.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= bound * (1.0 + 1e-9));
    }

    #[test]
    fn single_and_double_precision_agree(which in 0usize..3, seed in any::<u64>()) {
        let (net, size) = support::tiny_network(PRESETS[which], seed);
        let y = input_for(size, seed ^ 6);
        let wide = net.forward(&y).unwrap();
        let narrow: Network32 = net.cast();
        let out = narrow.forward(&y.cast::<f32>()).unwrap().cast::<f64>();
        prop_assert!(max_diff(&wide, &out) <= 1e-4 * (1.0 + wide.max_abs()));
    }
}
