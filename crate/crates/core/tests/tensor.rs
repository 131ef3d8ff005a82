use proptest::prelude::*;
use qnet::tensor::{
    conv2d, conv2d_direct, crop2d, elementwise_mul, pad2d, seeded_normal, seeded_uniform, Element, Tensor,
};

/// Single-accumulator loop written independently of the library: walks the
/// output, then every kernel tap, skipping taps that land in the padding.
fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let [cout, _, k, _] = [w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]];
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * cin + i) * h + y as usize) * wd + xx as usize;
                                let wi = ((o * cin + i) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, cout, ho, wo], out).unwrap()
}

fn identity_kernel<T: Element>(c: usize, k: usize) -> Tensor<T> {
    let mut w = Tensor::zeros(vec![c, c, k, k]).unwrap();
    for i in 0..c {
        w.data_mut()[((i * c + i) * k + k / 2) * k + k / 2] = T::one();
    }
    w
}

fn max_abs_diff<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

#[test]
fn direct_conv_matches_independent_loop() {
    let x = seeded_normal::<f64>(vec![2, 3, 8, 8], 0.0, 1.0, 11).unwrap();
    let w = seeded_normal::<f64>(vec![4, 3, 3, 3], 0.0, 1.0, 12).unwrap();
    let got = conv2d_direct(&x, &w, 2, 1).unwrap();
    assert_eq!(got.dims(), &[2, 4, 4, 4]);
    assert!(max_abs_diff(&got, &reference_conv(&x, &w, 2, 1)) < 1e-12);
}

#[test]
fn fast_conv_matches_direct_on_fifty_cases() {
    for case in 0..50u64 {
        let cin = 1 + (case % 4) as usize;
        let cout = 1 + (case % 3) as usize;
        let side = 3 + (case % 7) as usize;
        let stride = 1 + (case % 2) as usize;
        let x = seeded_normal::<f32>(vec![2, cin, side, side], 0.0, 1.0, 100 + case).unwrap();
        let w = seeded_normal::<f32>(vec![cout, cin, 3, 3], 0.0, 0.5, 200 + case).unwrap();
        let fast = conv2d(&x, &w, stride, 1).unwrap();
        let slow = conv2d_direct(&x, &w, stride, 1).unwrap();
        assert_eq!(fast.dims(), slow.dims());
        assert!(max_abs_diff(&fast, &slow) < 1e-5, "case {case}");
    }
}

#[test]
fn uniform_draws_are_reproducible_and_in_range() {
    let a = seeded_uniform::<f64>(vec![1000], -0.5, 0.25, 3).unwrap();
    assert_eq!(a, seeded_uniform::<f64>(vec![1000], -0.5, 0.25, 3).unwrap());
    assert!(a.data().iter().all(|v| (-0.5..0.25).contains(v)));
    assert_ne!(a, seeded_uniform::<f64>(vec![1000], -0.5, 0.25, 4).unwrap());
}

fn nchw() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..9, 1usize..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_kernel_is_exact((n, c, h, w) in nchw(), k in prop::sample::select(vec![1usize, 3, 5]), seed: u64) {
        let x = seeded_normal::<f32>(vec![n, c, h, w], 0.0, 3.0, seed).unwrap();
        prop_assert_eq!(conv2d_direct(&x, &identity_kernel(c, k), 1, (k - 1) / 2).unwrap(), x.clone());
        prop_assert_eq!(conv2d(&x, &identity_kernel(c, k), 1, (k - 1) / 2).unwrap(), x);
    }

    #[test]
    fn conv_is_linear((n, c, h, w) in nchw(), a in -2.0f64..2.0, b in -2.0f64..2.0, seed: u64) {
        let cout = 2;
        #[allow(clippy::too_many_arguments)]
        fn check<T: Element>(n: usize, c: usize, h: usize, w: usize, cout: usize, a: f64, b: f64, seed: u64, tol: f64) -> bool {
            let x = seeded_uniform::<T>(vec![n, c, h, w], -1.0, 1.0, seed).unwrap();
            let y = seeded_uniform::<T>(vec![n, c, h, w], -1.0, 1.0, seed ^ 1).unwrap();
            let k = seeded_uniform::<T>(vec![cout, c, 3, 3], -1.0, 1.0, seed ^ 2).unwrap();
            let (ta, tb) = (T::from_f64(a), T::from_f64(b));
            let mix = x.zip_map(&y, "mix", |p, q| ta * p + tb * q).unwrap();
            let lhs = conv2d_direct(&mix, &k, 1, 1).unwrap();
            let cx = conv2d_direct(&x, &k, 1, 1).unwrap();
            let cy = conv2d_direct(&y, &k, 1, 1).unwrap();
            let rhs = cx.zip_map(&cy, "mix", |p, q| ta * p + tb * q).unwrap();
            max_abs_diff(&lhs, &rhs) < tol
        }
        prop_assert!(check::<f32>(n, c, h, w, cout, a, b, seed, 1e-5));
        prop_assert!(check::<f64>(n, c, h, w, cout, a, b, seed, 1e-10));
    }

    #[test]
    fn mul_is_commutative_with_unit_identity(len in 1usize..64, seed: u64) {
        let a = seeded_normal::<f32>(vec![len], 0.0, 10.0, seed).unwrap();
        let b = seeded_normal::<f32>(vec![len], 0.0, 10.0, seed.wrapping_add(1)).unwrap();
        prop_assert_eq!(elementwise_mul(&a, &b).unwrap(), elementwise_mul(&b, &a).unwrap());
        prop_assert_eq!(elementwise_mul(&a, &Tensor::ones(vec![len]).unwrap()).unwrap(), a);
    }

    #[test]
    fn pad_then_crop_is_identity((n, c, h, w) in nchw(), amount in 1usize..5, seed: u64) {
        let x = seeded_normal::<f64>(vec![n, c, h, w], 0.0, 1.0, seed).unwrap();
        let padded = pad2d(&x, amount).unwrap();
        prop_assert_eq!(padded.dims(), &[n, c, h + 2 * amount, w + 2 * amount][..]);
        prop_assert_eq!(crop2d(&padded, amount).unwrap(), x);
    }
}
