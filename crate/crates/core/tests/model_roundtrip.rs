mod common;

use bitstorm_core::io::{load_model, save_model};
use bitstorm_core::layers::{Activation, LayerKind, LayerSpec, Padding};
use bitstorm_core::{Model32, Tensor32};
use rand_chacha::ChaCha8Rng;

/// Weights with awkward bit patterns mixed in: signed zeros, subnormals,
/// infinities and NaNs with payloads must all survive the round trip.
fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor32 {
    let specials = [
        -0.0f32,
        f32::from_bits(1),
        f32::MIN_POSITIVE / 3.0,
        f32::INFINITY,
        f32::from_bits(0x7fc0_1234),
        f32::from_bits(0xffa0_0001),
    ];
    let mut t = common::random_tensor(rng, shape, -1.0, 1.0);
    let len = t.len();
    for s in specials {
        let i = common::below(rng, len as u32) as usize;
        t.data_mut()[i] = s;
    }
    t
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[common::below(rng, options.len() as u32) as usize]
}

fn random_model(seed: u64) -> Model32 {
    let mut rng = common::rng(seed);
    let (h, w, c) = (
        6 + common::below(&mut rng, 6) as usize,
        6 + common::below(&mut rng, 6) as usize,
        1 + common::below(&mut rng, 3) as usize,
    );
    let mut layers = Vec::new();
    let mut shape = vec![h, w, c];
    for i in 0..1 + common::below(&mut rng, 2) {
        let (kh, kw) = (1 + common::below(&mut rng, 3) as usize, 1 + common::below(&mut rng, 3) as usize);
        let cout = 1 + common::below(&mut rng, 5) as usize;
        let stride = (pick(&mut rng, &[1, 2]), pick(&mut rng, &[1, 2]));
        let spec = LayerSpec::new(
            format!("conv_{i}"),
            LayerKind::Conv2D {
                kernel: weights(&mut rng, &[kh, kw, shape[2], cout]),
                bias: weights(&mut rng, &[cout]),
                stride,
                padding: pick(&mut rng, &[Padding::Same, Padding::Valid]),
                activation: pick(&mut rng, &[Activation::Linear, Activation::Relu]),
            },
        );
        shape = spec.output_shape(&shape).unwrap();
        layers.push(spec);
    }
    let alpha_shape = pick(&mut rng, &[0usize, 1, 2]);
    let alpha_shape = match alpha_shape {
        0 => vec![shape[2]],
        1 => vec![1, 1, shape[2]],
        _ => shape.clone(),
    };
    layers.push(LayerSpec::new(
        "prelu",
        LayerKind::PRelu {
            alpha: weights(&mut rng, &alpha_shape),
        },
    ));
    if shape[0] >= 2 && shape[1] >= 2 {
        layers.push(LayerSpec::new(
            "pool",
            LayerKind::MaxPool2D {
                window: (2, 2),
                stride: (pick(&mut rng, &[1, 2]), 2),
            },
        ));
        shape = layers.last().unwrap().output_shape(&shape).unwrap();
    }
    layers.push(LayerSpec::new("relu", LayerKind::Relu));
    layers.push(LayerSpec::new("drop", LayerKind::Dropout { rate: 0.125 }));
    layers.push(LayerSpec::new("flat", LayerKind::Flatten));
    let n_in: usize = shape.iter().product();
    let classes = 2 + common::below(&mut rng, 6) as usize;
    let softmax_fused = common::below(&mut rng, 2) == 0;
    layers.push(LayerSpec::new(
        "dense",
        LayerKind::Dense {
            weights: weights(&mut rng, &[n_in, classes]),
            bias: weights(&mut rng, &[classes]),
            activation: if softmax_fused { Activation::Softmax } else { Activation::Linear },
        },
    ));
    if !softmax_fused {
        layers.push(LayerSpec::new("softmax", LayerKind::Softmax));
    }
    Model32::new(vec![h, w, c], layers).unwrap()
}

fn tensors(kind: &LayerKind<f32>) -> Vec<&Tensor32> {
    match kind {
        LayerKind::Conv2D { kernel, bias, .. } => vec![kernel, bias],
        LayerKind::Dense { weights, bias, .. } => vec![weights, bias],
        LayerKind::PRelu { alpha } => vec![alpha],
        _ => vec![],
    }
}

fn assert_same(a: &Model32, b: &Model32) {
    assert_eq!(a.input_shape(), b.input_shape());
    assert_eq!(a.layer_count(), b.layer_count());
    for (la, lb) in a.layers().iter().zip(b.layers()) {
        assert_eq!(la.name, lb.name);
        assert_eq!(la.kind_name(), lb.kind_name());
        let (ta, tb) = (tensors(&la.kind), tensors(&lb.kind));
        assert_eq!(ta.len(), tb.len());
        for (x, y) in ta.iter().zip(&tb) {
            assert_eq!(x.shape(), y.shape(), "{}", la.name);
            assert!(x.bit_identical(y), "{}: weights differ", la.name);
        }
        match (&la.kind, &lb.kind) {
            (
                LayerKind::Conv2D {
                    stride: s1,
                    padding: p1,
                    activation: a1,
                    ..
                },
                LayerKind::Conv2D {
                    stride: s2,
                    padding: p2,
                    activation: a2,
                    ..
                },
            ) => assert_eq!((s1, p1, a1), (s2, p2, a2)),
            (LayerKind::Dense { activation: a1, .. }, LayerKind::Dense { activation: a2, .. }) => assert_eq!(a1, a2),
            (LayerKind::MaxPool2D { window: w1, stride: s1 }, LayerKind::MaxPool2D { window: w2, stride: s2 }) => {
                assert_eq!((w1, s1), (w2, s2))
            }
            (LayerKind::Dropout { rate: r1 }, LayerKind::Dropout { rate: r2 }) => assert_eq!(r1, r2),
            _ => {}
        }
    }
}

#[test]
fn randomized_models_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for seed in [11, 22, 33] {
        let model = random_model(seed);
        let path = dir.path().join(seed.to_string()).join("model.json");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_same(&model, &loaded);

        let x = common::random_tensor(&mut common::rng(seed), model.input_shape(), -1.0, 1.0);
        assert!(model.forward(&x).unwrap().bit_identical(&loaded.forward(&x).unwrap()));

        // Saving the loaded copy reproduces both files byte for byte.
        let again = dir.path().join(format!("{seed}b")).join("model.json");
        save_model(&loaded, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        let blob = |p: &std::path::Path| std::fs::read(p.with_file_name("weights.bin")).unwrap();
        assert_eq!(blob(&path), blob(&again));
    }
}
