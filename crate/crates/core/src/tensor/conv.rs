//! Convolution kernels: a direct (naive loop) reference path and an
//! im2col+matmul path. Both implement the same contract; the tape records
//! conv nodes through the im2col path and tests pin the two paths equal.

use super::Tensor;

/// Output spatial dims for a conv with the given geometry. Caller has
/// already validated that the kernel fits.
pub fn conv_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    (oh, ow)
}

/// Row-major matmul: C[m,n] += A[m,k] * B[k,n].
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// A^T * B where A is [k,m] and B is [k,n]; result [m,n].
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = arow[i];
            if a_pi == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a_pi * brow[j];
            }
        }
    }
    c
}

/// A * B^T where A is [m,k] and B is [n,k]; result [m,n].
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] = s;
        }
    }
    c
}

/// Gather one sample's padded patches into a (C*kh*kw) x (oh*ow) matrix.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    let out_n = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ch * kh + ki) * kw + kj) * out_n..][..out_n];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a (C*kh*kw) x (oh*ow) column gradient back to input layout.
fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let out_n = oh * ow;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ch * kh + ki) * kw + kj) * out_n..][..out_n];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let src = &row[oi * ow..(oi + 1) * ow];
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += src[oj];
                        }
                    }
                }
            }
        }
    }
}

/// Direct nested-loop convolution. Reference path.
pub fn conv2d_direct(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("conv input must be 4d");
    let (k, ck, kh, kw) = weight.dims4().expect("conv weight must be 4d");
    assert_eq!(c, ck);
    let (oh, ow) = conv_output_dims(h, w, kh, kw, stride, pad);
    let mut out = vec![0.0; n * k * oh * ow];
    let xd = x.data();
    let wd = weight.data();
    for ni in 0..n {
        for ko in 0..k {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let xv = xd[((ni * c + ci) * h + ii as usize) * w + jj as usize];
                                let wv = wd[((ko * c + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * k + ko) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, k, oh, ow], out).unwrap()
}

/// im2col+matmul convolution. Same contract as [`conv2d_direct`].
pub fn conv2d_im2col(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("conv input must be 4d");
    let (k, ck, kh, kw) = weight.dims4().expect("conv weight must be 4d");
    assert_eq!(c, ck);
    let (oh, ow) = conv_output_dims(h, w, kh, kw, stride, pad);
    let patch = c * kh * kw;
    let out_n = oh * ow;
    let mut out = vec![0.0; n * k * out_n];
    let xd = x.data();
    for ni in 0..n {
        let cols = im2col(
            &xd[ni * c * h * w..(ni + 1) * c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        matmul_acc(
            weight.data(),
            &cols,
            &mut out[ni * k * out_n..(ni + 1) * k * out_n],
            k,
            patch,
            out_n,
        );
    }
    Tensor::from_vec(&[n, k, oh, ow], out).unwrap()
}

/// Gradients of a conv2d node. `grad_out` has the output layout [n,k,oh,ow].
/// Either gradient can be skipped when the corresponding input does not
/// require one.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, w) = x.dims4().unwrap();
    let (k, _, kh, kw) = weight.dims4().unwrap();
    let (_, _, oh, ow) = grad_out.dims4().unwrap();
    let patch = c * kh * kw;
    let out_n = oh * ow;
    let mut dx = if need_dx {
        Some(vec![0.0; n * c * h * w])
    } else {
        None
    };
    let mut dw = if need_dw {
        Some(vec![0.0; k * patch])
    } else {
        None
    };
    let xd = x.data();
    let gd = grad_out.data();
    for ni in 0..n {
        let gslice = &gd[ni * k * out_n..(ni + 1) * k * out_n];
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T [patch,k] * g [k,out_n]
            let dcols = matmul_at_b(weight.data(), gslice, k, patch, out_n);
            col2im_acc(
                &dcols,
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut dx[ni * c * h * w..(ni + 1) * c * h * w],
            );
        }
        if let Some(dw) = dw.as_mut() {
            // dW += g [k,out_n] * cols^T [out_n,patch]
            let cols = im2col(
                &xd[ni * c * h * w..(ni + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            );
            let contrib = matmul_a_bt(gslice, &cols, k, out_n, patch);
            for (d, s) in dw.iter_mut().zip(&contrib) {
                *d += s;
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(&[n, c, h, w], d).unwrap()),
        dw.map(|d| Tensor::from_vec(&[k, c, kh, kw], d).unwrap()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn scaling_kernel_doubles_input() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_direct(&x, &w, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
        let y2 = conv2d_im2col(&x, &w, 1, 0);
        assert_eq!(y.data(), y2.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn direct_and_im2col_paths_agree(
            seed in any::<u64>(),
            n in 1usize..3,
            c in 1usize..4,
            k in 1usize..4,
            hw in 3usize..8,
            ksz in 1usize..4,
            stride in 1usize..3,
            pad in 0usize..2,
        ) {
            prop_assume!(hw + 2 * pad >= ksz);
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let x = random_tensor(&[n, c, hw, hw], &mut rng);
            let w = random_tensor(&[k, c, ksz, ksz], &mut rng);
            let a = conv2d_direct(&x, &w, stride, pad);
            let b = conv2d_im2col(&x, &w, stride, pad);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
