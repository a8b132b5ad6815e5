use capsdense::conv::{self, ConvGeometry, Padding};
use capsdense::{rng, Graph, Tensor};
use proptest::prelude::*;

/// Direct six-loop convolution with explicit zero padding.
fn naive_conv(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [o, kh, kw]: [usize; 3],
    bias: &[f64],
    stride: usize,
    padding: Padding,
) -> (Vec<f64>, usize, usize) {
    let (pt, pb) = padding.amounts(h, kh, stride);
    let (pl, pr) = padding.amounts(w, kw, stride);
    let oh = (h + pt + pb - kh) / stride + 1;
    let ow = (w + pl + pr - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pt as isize;
                                let ix = (xo * stride + dx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oc * c + ic) * kh + dy) * kw + dx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn check(n: usize, c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize, stride: usize, padding: Padding, seed: u64) {
    let x: Tensor<f64> = rng::normal(&mut rng::stream(seed, "x"), &[n, c, h, w], 1.0);
    let k: Tensor<f64> = rng::normal(&mut rng::stream(seed, "k"), &[o, c, kh, kw], 1.0);
    let b: Tensor<f64> = rng::normal(&mut rng::stream(seed, "b"), &[o], 1.0);
    let geom = ConvGeometry::new(x.shape(), k.shape(), stride, padding).unwrap();
    let got = conv::forward(&geom, x.data(), k.data(), Some(b.data()));
    let (want, oh, ow) = naive_conv(x.data(), [n, c, h, w], k.data(), [o, kh, kw], b.data(), stride, padding);
    assert_eq!((geom.out_h, geom.out_w), (oh, ow));
    assert_eq!(got.len(), want.len());
    for (a, e) in got.iter().zip(&want) {
        assert!((a - e).abs() < 1e-10, "{a} vs {e}");
    }
}

#[test]
fn valid_and_same_match_direct_loops() {
    check(2, 3, 7, 6, 4, 3, 3, 1, Padding::Valid, 1);
    check(1, 2, 9, 9, 3, 9, 9, 1, Padding::Valid, 2);
    check(2, 2, 8, 7, 3, 3, 3, 2, Padding::Same, 3);
    check(1, 1, 10, 10, 2, 9, 9, 2, Padding::Same, 4);
    check(1, 3, 12, 12, 5, 9, 9, 2, Padding::Valid, 5);
}

#[test]
fn same_padding_extra_pixel_goes_bottom_right() {
    assert_eq!(Padding::Same.amounts(8, 3, 2), (0, 1));
    assert_eq!(Padding::Same.amounts(7, 3, 1), (1, 1));
    assert_eq!(Padding::Same.amounts(28, 9, 1), (4, 4));
    assert_eq!(Padding::Same.output_size(7, 3, 2), Some(4));
}

#[test]
fn channel_mismatch_names_axis() {
    let err = ConvGeometry::new(&[1, 3, 8, 8], &[4, 2, 3, 3], 1, Padding::Valid).unwrap_err();
    assert!(err.to_string().contains("axis 1"), "{err}");
}

#[test]
fn kernel_larger_than_input_is_rejected() {
    assert!(ConvGeometry::new(&[1, 1, 4, 4], &[1, 1, 5, 5], 1, Padding::Valid).is_err());
}

#[test]
fn graph_conv_matches_oracle() {
    let x: Tensor<f64> = rng::normal(&mut rng::stream(9, "x"), &[1, 2, 6, 6], 1.0);
    let k: Tensor<f64> = rng::normal(&mut rng::stream(9, "k"), &[3, 2, 3, 3], 1.0);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let y = g.conv2d(xv, kv, None, 2, Padding::Same).unwrap();
    let (want, _, _) = naive_conv(x.data(), [1, 2, 6, 6], k.data(), [3, 3, 3], &[0.0; 3], 2, Padding::Same);
    for (a, e) in g.value(y).data().iter().zip(&want) {
        assert!((a - e).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn random_geometries_match(
        n in 1usize..3, c in 1usize..4, h in 3usize..11, w in 3usize..11,
        o in 1usize..4, kh in 1usize..4, kw in 1usize..4, stride in 1usize..4,
        same in any::<bool>(), seed in 0u64..1000,
    ) {
        let padding = if same { Padding::Same } else { Padding::Valid };
        check(n, c, h, w, o, kh, kw, stride, padding, seed);
    }
}
