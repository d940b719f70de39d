//! Forward kernels. Every reduction accumulates in `f64` in a fixed order, so
//! results are bit-identical across runs and threads.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Flat input index of the winning element for every maxpool output element.
pub type ArgmaxIndices = Vec<usize>;

fn out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation over a batch. `weights` is `(Cout, Cin, Kh, Kw)`.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let is = input.shape();
    let ws = weights.shape();
    let [cout, cin, kh, kw] = ws.0;
    if is.c() != cin || bias.len() != cout {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: is,
            right: ws,
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    let (oh, ow) = match (
        out_dim(is.h(), kh, stride, padding),
        out_dim(is.w(), kw, stride, padding),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: is,
                right: ws,
            })
        }
    };

    let (h, w) = (is.h() as isize, is.w() as isize);
    let pad = padding as isize;
    let x = input.data();
    let k = weights.data();
    let mut out = Tensor::zeros(Shape::new(is.n(), cout, oh, ow));
    let y = out.data_mut();
    let mut o = 0;
    for n in 0..is.n() {
        let xn = &x[n * is.item_len()..(n + 1) * is.item_len()];
        for co in 0..cout {
            let kco = &k[co * cin * kh * kw..(co + 1) * cin * kh * kw];
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad;
                    let mut acc = bias[co] as f64;
                    for ci in 0..cin {
                        let plane = &xn[ci * is.h() * is.w()..(ci + 1) * is.h() * is.w()];
                        let kp = &kco[ci * kh * kw..(ci + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let row = &plane[iy as usize * is.w()..(iy as usize + 1) * is.w()];
                            let krow = &kp[ky * kw..(ky + 1) * kw];
                            for (kx, &wv) in krow.iter().enumerate() {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                acc += row[ix as usize] as f64 * wv as f64;
                            }
                        }
                    }
                    y[o] = acc as f32;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

fn pool_dims(op: &'static str, input: &Tensor, k: usize, s: usize) -> Result<(usize, usize)> {
    let is = input.shape();
    if s == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be positive")));
    }
    match (out_dim(is.h(), k, s, 0), out_dim(is.w(), k, s, 0)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::WindowTooLarge {
            op,
            kernel: k,
            stride: s,
            input: is,
        }),
    }
}

/// Max pooling without padding. Ties go to the lowest flat input index.
pub fn maxpool2d(input: &Tensor, k: usize, s: usize) -> Result<(Tensor, ArgmaxIndices)> {
    let (oh, ow) = pool_dims("maxpool2d", input, k, s)?;
    let is = input.shape();
    let x = input.data();
    let mut out = Tensor::zeros(Shape::new(is.n(), is.c(), oh, ow));
    let mut argmax = Vec::with_capacity(out.len());
    let y = out.data_mut();
    let mut o = 0;
    for n in 0..is.n() {
        for c in 0..is.c() {
            let base = (n * is.c() + c) * is.h() * is.w();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * s * is.w() + ox * s;
                    for ky in 0..k {
                        let row = base + (oy * s + ky) * is.w() + ox * s;
                        for idx in row..row + k {
                            // scan order is increasing flat index, so `>` keeps the lowest on ties
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    y[o] = x[best];
                    argmax.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Average pooling without padding.
pub fn avgpool2d(input: &Tensor, k: usize, s: usize) -> Result<Tensor> {
    let (oh, ow) = pool_dims("avgpool2d", input, k, s)?;
    let is = input.shape();
    let x = input.data();
    let mut out = Tensor::zeros(Shape::new(is.n(), is.c(), oh, ow));
    let y = out.data_mut();
    let area = (k * k) as f64;
    let mut o = 0;
    for n in 0..is.n() {
        for c in 0..is.c() {
            let base = (n * is.c() + c) * is.h() * is.w();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ky in 0..k {
                        let row = base + (oy * s + ky) * is.w() + ox * s;
                        acc += x[row..row + k].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    y[o] = (acc / area) as f32;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// `weights` is `(out, in, 1, 1)`; returns `W·input + bias`.
pub fn dense(input: &[f32], weights: &Tensor, bias: &[f32]) -> Result<Vec<f32>> {
    let ws = weights.shape();
    let (rows, cols) = (ws.n(), ws.item_len());
    if input.len() != cols || bias.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "dense",
            left: Shape::new(1, input.len(), 1, 1),
            right: ws,
        });
    }
    Ok(weights
        .data()
        .chunks_exact(cols)
        .zip(bias)
        .map(|(row, &b)| {
            let acc = row
                .iter()
                .zip(input)
                .fold(b as f64, |acc, (&w, &x)| acc + w as f64 * x as f64);
            acc as f32
        })
        .collect())
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / z) as f32).collect()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f32], s: usize, p: usize) -> Tensor {
        let [n, cin, h, wd] = x.shape().0;
        let [cout, _, kh, kw] = w.shape().0;
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(Shape::new(n, cout, oh, ow));
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(bi, ci, iy as usize, ix as usize) as f64
                                            * w.at(co, ci, ky, kx) as f64;
                                    }
                                }
                            }
                        }
                        let i = out.index(bi, co, oy, ox);
                        out.data_mut()[i] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scaling_identity() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1., 2., 3., 4.]).unwrap();
        let w = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.]).unwrap();
        let y = conv2d(&x, &w, &[0.], 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn conv_sum_case() {
        let x = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, &[0.], 1, 0).unwrap();
        assert_eq!(y.data(), &[9.]);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(Shape::new(2, 3, 8, 8), &mut rng);
        let w = random(Shape::new(4, 3, 3, 3), &mut rng);
        let b: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (s, p) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let fast = conv2d(&x, &w, &b, s, p).unwrap();
            let slow = naive_conv(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) <= 1e-5);
        }
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        let err = conv2d(&x, &w, &[0.], 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 2, 4, 4)") && msg.contains("(1, 3, 3, 3)"), "{msg}");
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(conv2d(&x, &w, &[0.], 1, 0).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(vec![-1., 0., 2.]);
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let pos = Tensor::vector(vec![0., 1.5, 3.]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn maxpool_example_and_ties() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1., 2., 3., 4.]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::filled(Shape::new(1, 1, 4, 4), 0.5);
        let (_, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(
            maxpool2d(&x, 3, 1),
            Err(Error::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn maxpool_matches_window_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(Shape::new(2, 3, 9, 7), &mut rng);
        for (k, s) in [(2, 2), (3, 2), (3, 1)] {
            let (y, arg) = maxpool2d(&x, k, s).unwrap();
            let [n, c, h, w] = x.shape().0;
            let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
            let mut o = 0;
            for bi in 0..n {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f32::NEG_INFINITY, usize::MAX);
                            for ky in 0..k {
                                for kx in 0..k {
                                    let idx = x.index(bi, ci, oy * s + ky, ox * s + kx);
                                    let v = x.data()[idx];
                                    if v > best.0 || (v == best.0 && idx < best.1) {
                                        best = (v, idx);
                                    }
                                }
                            }
                            assert_eq!(y.data()[o], best.0);
                            assert_eq!(arg[o], best.1);
                            o += 1;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn avgpool_example() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1., 3., 5., 7.]).unwrap();
        assert_eq!(avgpool2d(&x, 2, 2).unwrap().data(), &[4.]);
    }

    #[test]
    fn softmax_symmetry() {
        assert_eq!(softmax(&[0., 0.]), vec![0.5, 0.5]);
    }

    #[test]
    fn dense_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(Shape::new(8, 16, 1, 1), &mut rng);
        let x: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = dense(&x, &w, &b).unwrap();
        for r in 0..8 {
            let mut acc = b[r] as f64;
            for c in 0..16 {
                acc += w.at(r, c, 0, 0) as f64 * x[c] as f64;
            }
            assert!((y[r] as f64 - acc).abs() < 1e-5);
        }
    }

    #[test]
    fn add_shape_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 2, 2, 1));
        assert!(matches!(add(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    fn arb_vec(len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-4.0f32..4.0, len)
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(v in arb_vec(32)) {
            let x = Tensor::vector(v);
            prop_assert_eq!(relu(&relu(&x)), relu(&x));
        }

        #[test]
        fn softmax_sums_to_one(v in arb_vec(10)) {
            let s: f64 = softmax(&v).iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn maxpool_value_is_gathered_at_argmax(v in arb_vec(2 * 36)) {
            let x = Tensor::from_vec(Shape::new(1, 2, 6, 6), v).unwrap();
            let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
            for (val, &i) in y.data().iter().zip(&arg) {
                prop_assert_eq!(*val, x.data()[i]);
            }
        }

        #[test]
        fn linear_kernels_are_linear(
            a in -2.0f32..2.0, b in -2.0f32..2.0,
            xs in arb_vec(2 * 36), ys in arb_vec(2 * 36), ws in arb_vec(3 * 2 * 9),
        ) {
            let shape = Shape::new(1, 2, 6, 6);
            let x = Tensor::from_vec(shape, xs).unwrap();
            let y = Tensor::from_vec(shape, ys).unwrap();
            let combo = add(&x.map(|v| a * v), &y.map(|v| b * v)).unwrap();
            let lin = |lhs: &Tensor, rhs: &Tensor, out: &Tensor| {
                let expect = add(&lhs.map(|v| a * v), &rhs.map(|v| b * v)).unwrap();
                expect.max_abs_diff(out)
            };

            let w = Tensor::from_vec(Shape::new(3, 2, 3, 3), ws).unwrap();
            let zero = [0.0; 3];
            let cx = conv2d(&x, &w, &zero, 1, 1).unwrap();
            let cy = conv2d(&y, &w, &zero, 1, 1).unwrap();
            let cc = conv2d(&combo, &w, &zero, 1, 1).unwrap();
            prop_assert!(lin(&cx, &cy, &cc) <= 1e-4);

            let px = avgpool2d(&x, 2, 2).unwrap();
            let py = avgpool2d(&y, 2, 2).unwrap();
            let pc = avgpool2d(&combo, 2, 2).unwrap();
            prop_assert!(lin(&px, &py, &pc) <= 1e-5);

            let dw = Tensor::from_vec(Shape::new(1, 72, 1, 1), x.data().to_vec()).unwrap();
            let dx = dense(y.data(), &dw, &[0.0]).unwrap()[0];
            let dsum = dense(combo.data(), &dw, &[0.0]).unwrap()[0];
            let dself = dense(x.data(), &dw, &[0.0]).unwrap()[0];
            prop_assert!(((a * dself + b * dx) - dsum).abs() <= 1e-3);
        }

        #[test]
        fn conv_is_deterministic(xs in arb_vec(36), ws in arb_vec(9)) {
            let x = Tensor::from_vec(Shape::new(1, 1, 6, 6), xs).unwrap();
            let w = Tensor::from_vec(Shape::new(1, 1, 3, 3), ws).unwrap();
            let a = conv2d(&x, &w, &[0.1], 1, 1).unwrap();
            let b = conv2d(&x, &w, &[0.1], 1, 1).unwrap();
            prop_assert_eq!(a.data(), b.data());
            prop_assert!(a.is_finite());
        }
    }
}
