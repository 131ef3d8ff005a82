use proptest::prelude::*;
use qnet::layers::{activate, global_avg_pool, softmax_cross_entropy, ActivationSpec, BatchNormLayer, ConvLayer, Mode};
use qnet::tensor::{conv2d_direct, seeded_normal, Tensor};

#[test]
fn activation_table_values() {
    let q18 = ActivationSpec::quotient(1.8).unwrap();
    assert!((q18.apply(0.0f64) - 1.0).abs() < 1e-6);
    // 2 / (1 + e^-1)
    let q2 = ActivationSpec::quotient(2.0).unwrap();
    assert!((q2.apply(1.0f64) - 1.462117).abs() < 1e-5);
    assert!((q2.apply(1.0f32) as f64 - 2.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-6);
    let clip: ActivationSpec = "min(max(0, x+1), 4)".parse().unwrap();
    let x = Tensor::<f64>::from_vec(vec![3], vec![-2.0, 0.0, 5.0]).unwrap();
    assert_eq!(activate(&x, &clip).data(), &[0.0, 1.0, 4.0]);
    assert!(ActivationSpec::quotient(1.0).is_err());
    assert!(ActivationSpec::quotient(0.5).is_err());
}

#[test]
fn only_the_sigmoid_family_is_globally_differentiable() {
    assert!(ActivationSpec::quotient(1.5).unwrap().is_globally_differentiable());
    let clip = ActivationSpec::clipped_linear(1.0, 0.0, 4.0).unwrap();
    assert!(!clip.is_globally_differentiable());
    assert_eq!(clip.kinks(), vec![-1.0, 3.0]);
    assert_eq!(clip.derivative(-1.0f64), 0.0);
    assert_eq!(clip.derivative(0.0f64), 1.0);
    assert!(!ActivationSpec::Relu.is_globally_differentiable());
}

#[test]
fn conv_layer_matches_direct_loop() {
    for case in 0..50u64 {
        let stride = 1 + (case % 2) as usize;
        let (cin, cout, side) = (1 + (case % 3) as usize, 1 + (case % 4) as usize, 4 + (case % 5) as usize);
        let layer = ConvLayer::<f32>::new(cin, cout, stride, case).unwrap();
        let x = seeded_normal::<f32>(vec![2, cin, side, side], 0.0, 1.0, 1000 + case).unwrap();
        let got = layer.apply(&x).unwrap();
        let want = conv2d_direct(&x, &layer.weight.value, stride, 1).unwrap();
        assert_eq!(got.dims(), want.dims());
        let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-5, "case {case}: {err}");
    }
}

/// Per-channel mean and population variance by two explicit passes.
fn two_pass(x: &Tensor<f64>) -> Vec<(f64, f64)> {
    let [n, c, h, w] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> =
                (0..n).flat_map(|b| x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            (mean, var)
        })
        .collect()
}

fn channel(x: &Tensor<f32>, ch: usize) -> Vec<f64> {
    let [n, c, h, w] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    (0..n).flat_map(|b| x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].iter().map(|&v| v as f64)).collect()
}

#[test]
fn train_mode_normalizes_each_channel() {
    let x = seeded_normal::<f32>(vec![8, 3, 6, 6], 2.5, 4.0, 21).unwrap();
    let y = BatchNormLayer::<f32>::new(3).unwrap().apply(&x, Mode::Train).unwrap();
    for ch in 0..3 {
        let v = channel(&y, ch);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-5, "{mean}");
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn train_mode_matches_two_pass_oracle() {
    let x = seeded_normal::<f64>(vec![4, 2, 5, 5], -1.0, 3.0, 22).unwrap();
    let mut bn = BatchNormLayer::<f64>::new(2).unwrap();
    bn.gamma.value = Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap();
    bn.beta.value = Tensor::from_vec(vec![2], vec![0.25, 2.0]).unwrap();
    let y = bn.apply(&x, Mode::Train).unwrap();
    let stats = two_pass(&x);
    for (i, (&xv, &yv)) in x.data().iter().zip(y.data()).enumerate() {
        let ch = (i / 25) % 2;
        let (m, v) = stats[ch];
        let want = bn.gamma.value.data()[ch] * (xv - m) / (v + bn.epsilon).sqrt() + bn.beta.value.data()[ch];
        assert!((yv - want).abs() < 1e-5);
    }
}

#[test]
fn eval_mode_is_a_fixed_affine_map() {
    let mut bn = BatchNormLayer::<f32>::new(2).unwrap();
    bn.running_mean = Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap();
    bn.running_var = Tensor::from_vec(vec![2], vec![4.0, 0.25]).unwrap();
    let x = seeded_normal::<f32>(vec![1, 2, 3, 3], 0.0, 1.0, 23).unwrap();
    let a = bn.apply(&x, Mode::Eval).unwrap();
    let b = bn.apply(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(bn.running_mean.data(), &[1.0, -2.0]);
    assert!((a.data()[0] - (x.data()[0] - 1.0) / (4.0f32 + 1e-5).sqrt()).abs() < 1e-6);
}

#[test]
fn train_mode_rejects_single_value_channels() {
    let mut bn = BatchNormLayer::<f32>::new(1).unwrap();
    assert!(bn.apply(&Tensor::ones(vec![1, 1, 1, 1]).unwrap(), Mode::Train).is_err());
}

#[test]
fn pooling_matches_flat_loop() {
    let x = seeded_normal::<f32>(vec![2, 64, 8, 8], 0.0, 1.0, 24).unwrap();
    let y = global_avg_pool(&x).unwrap();
    assert_eq!(y.dims(), &[2, 64]);
    for (i, &v) in y.data().iter().enumerate() {
        let mut acc = 0.0f64;
        for j in 0..64 {
            acc += x.data()[i * 64 + j] as f64;
        }
        assert!((v as f64 - acc / 64.0).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_matches_direct_evaluation() {
    let z = seeded_normal::<f32>(vec![4, 10], 0.0, 3.0, 25).unwrap();
    let labels = [0, 7, 7, 2];
    let mut want = 0.0f64;
    for (row, &l) in z.data().chunks(10).zip(&labels) {
        let lse = row.iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
        want += lse - row[l] as f64;
    }
    want /= 4.0;
    assert!((softmax_cross_entropy(&z, &labels).unwrap() as f64 - want).abs() < 1e-6);

    let mut margin = vec![0.0f64; 10];
    margin[4] = 1e4;
    let confident = Tensor::from_vec(vec![1, 10], margin).unwrap();
    assert!(softmax_cross_entropy(&confident, &[4]).unwrap() < 1e-12);
    assert!(softmax_cross_entropy(&confident, &[10]).is_err());
}

proptest! {
    #[test]
    fn quotient_activation_shape(alpha in 1.01f64..10.0) {
        let f = ActivationSpec::quotient(alpha).unwrap();
        prop_assert!((f.apply(0.0f64) - 1.0).abs() < 1e-6);
        prop_assert!(f.apply(-20.0f64).abs() < 1e-6);
        prop_assert!((f.apply(20.0f64) - alpha).abs() < 1e-6);
        let mut prev = f.apply(-10.0f64);
        for i in 1..=400 {
            let x = -10.0 + 0.05 * i as f64;
            let y = f.apply(x);
            prop_assert!(y > prev);
            prop_assert!(y > 0.0 && y < alpha);
            prop_assert!(f.derivative(x) > 0.0);
            prev = y;
        }
        prop_assert!(f.value_range().contains(f.apply(-20.0f64)));
        prop_assert!(f.value_range().contains(f.apply(20.0f64)));
    }
}
