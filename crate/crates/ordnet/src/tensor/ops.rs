//! Forward tensor kernels. The tape reuses these for its forward pass; tests
//! and oracles call them directly.

use super::Tensor;
use crate::error::{OrdError, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(OrdError::Dimension(format!(
            "matmul shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for t in 0..k {
            let av = ad[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(OrdError::Dimension(format!(
            "transpose2d expects rank 2, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Per-position affine map over the channel axis of an H x W x C_in feature.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 2 || b.rank() != 1 {
        return Err(OrdError::Dimension(format!(
            "conv1x1 ranks {:?} {:?} {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if w.shape()[0] != cin || w.shape()[1] != b.shape()[0] {
        return Err(OrdError::Dimension(format!(
            "conv1x1 channels: input C={} vs weight {:?}, bias {:?}",
            cin,
            w.shape(),
            b.shape()
        )));
    }
    let flat = x.reshape(&[h * wd, cin])?;
    let mut y = matmul(&flat, w)?;
    let cout = b.shape()[0];
    for row in 0..h * wd {
        for c in 0..cout {
            y.data_mut()[row * cout + c] += b.data()[c];
        }
    }
    y.reshape(&[h, wd, cout])
}

/// Broadcast check for elementwise ops: identical shapes, or `b` matching `a`
/// with the trailing channel axis dropped (H x W against H x W x C) or kept
/// as a singleton.
fn broadcast_kind(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    let ar = a.rank();
    let sans_channel = ar >= 1 && b.shape() == &a.shape()[..ar - 1];
    let singleton = b.rank() == ar
        && b.shape()[ar - 1] == 1
        && b.shape()[..ar - 1] == a.shape()[..ar - 1];
    if sans_channel || singleton {
        Ok(true)
    } else {
        Err(OrdError::Dimension(format!(
            "incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let broadcast = broadcast_kind(a, b)?;
    let mut out = a.data().to_vec();
    if broadcast {
        let c = a.shape()[a.rank() - 1];
        for (pos, bv) in b.data().iter().enumerate() {
            for ch in 0..c {
                let i = pos * c + ch;
                out[i] = f(out[i], *bv);
            }
        }
    } else {
        for (o, bv) in out.iter_mut().zip(b.data()) {
            *o = f(*o, *bv);
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast(a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|v| v * c).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|v| v.tanh()).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Softmax along `axis` with max subtraction.
pub fn softmax_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(OrdError::Argument(format!(
            "softmax axis {} out of range for shape {:?}",
            axis,
            a.shape()
        )));
    }
    let lane = a.shape()[axis];
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let outer: usize = a.shape()[..axis].iter().product();
    let mut out = a.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..lane {
                mx = mx.max(out[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..lane {
                let e = (out[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            for l in 0..lane {
                out[base + l * inner] /= sum;
            }
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Split an H x W x C feature into a row-major P x P grid of patches,
/// stacked along a leading P^2 extent.
pub fn partition_patches(x: &Tensor, p: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(OrdError::Dimension(format!(
            "partition_patches expects H x W x C, got {:?}",
            x.shape()
        )));
    }
    if p == 0 {
        return Err(OrdError::Argument("patch grid P must be >= 1".into()));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % p != 0 || w % p != 0 {
        return Err(OrdError::Partition(format!(
            "grid {}x{} does not divide {}x{}",
            p, p, h, w
        )));
    }
    let (ph, pw) = (h / p, w / p);
    let mut out = vec![0.0; x.numel()];
    for pr in 0..p {
        for pc in 0..p {
            let patch = pr * p + pc;
            for i in 0..ph {
                for j in 0..pw {
                    let src = ((pr * ph + i) * w + pc * pw + j) * c;
                    let dst = ((patch * ph + i) * pw + j) * c;
                    out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
    }
    Tensor::new(vec![p * p, ph, pw, c], out)
}

/// Exact inverse of [`partition_patches`].
pub fn reassemble_patches(yp: &Tensor, p: usize) -> Result<Tensor> {
    if yp.rank() != 4 {
        return Err(OrdError::Dimension(format!(
            "reassemble_patches expects P^2 x h x w x C, got {:?}",
            yp.shape()
        )));
    }
    if yp.shape()[0] != p * p {
        return Err(OrdError::Partition(format!(
            "leading extent {} != P^2 = {}",
            yp.shape()[0],
            p * p
        )));
    }
    let (ph, pw, c) = (yp.shape()[1], yp.shape()[2], yp.shape()[3]);
    let (h, w) = (p * ph, p * pw);
    let mut out = vec![0.0; yp.numel()];
    for pr in 0..p {
        for pc in 0..p {
            let patch = pr * p + pc;
            for i in 0..ph {
                for j in 0..pw {
                    let dst = ((pr * ph + i) * w + pc * pw + j) * c;
                    let src = ((patch * ph + i) * pw + j) * c;
                    out[dst..dst + c].copy_from_slice(&yp.data()[src..src + c]);
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Zero-pad an H x W x C feature on the bottom/right to nh x nw.
pub fn pad_spatial(x: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if nh < h || nw < w {
        return Err(OrdError::Argument(format!(
            "pad target {}x{} smaller than {}x{}",
            nh, nw, h, w
        )));
    }
    if nh == h && nw == w {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[nh, nw, c]);
    for i in 0..h {
        let src = i * w * c;
        let dst = i * nw * c;
        out.data_mut()[dst..dst + w * c].copy_from_slice(&x.data()[src..src + w * c]);
    }
    Ok(out)
}

/// Zero-pad so P divides both spatial extents. Lenient partition mode.
pub fn pad_to_multiple(x: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    pad_spatial(x, h.div_ceil(p) * p, w.div_ceil(p) * p)
}

pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (xh, xw, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h > xh || w > xw {
        return Err(OrdError::Argument(format!(
            "crop {}x{} larger than {}x{}",
            h, w, xh, xw
        )));
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    for i in 0..h {
        let src = (i * xw) * c;
        let dst = i * w * c;
        out.data_mut()[dst..dst + w * c].copy_from_slice(&x.data()[src..src + w * c]);
    }
    Ok(out)
}

/// Source coordinate and lerp weights for one output coordinate under the
/// half-pixel-center convention.
fn bilinear_axis(dst: usize, src_extent: usize, ratio: f64) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) * ratio - 0.5;
    let s = s.max(0.0);
    let i0 = (s.floor() as usize).min(src_extent - 1);
    let i1 = (i0 + 1).min(src_extent - 1);
    let frac = s - i0 as f64;
    (i0, i1, frac.clamp(0.0, 1.0))
}

/// Bilinear resize of an H x W x C feature to an arbitrary size, half-pixel
/// centers (align-corners = false).
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(OrdError::Dimension(format!(
            "resize_bilinear expects H x W x C, got {:?}",
            x.shape()
        )));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if oh == 0 || ow == 0 {
        return Err(OrdError::Argument("resize target must be positive".into()));
    }
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    let ry = h as f64 / oh as f64;
    let rx = w as f64 / ow as f64;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_axis(oy, h, ry);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_axis(ox, w, rx);
            for ch in 0..c {
                let v00 = x.data()[(y0 * w + x0) * c + ch];
                let v01 = x.data()[(y0 * w + x1) * c + ch];
                let v10 = x.data()[(y1 * w + x0) * c + ch];
                let v11 = x.data()[(y1 * w + x1) * c + ch];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(oy * ow + ox) * c + ch] = top + fy * (bot - top);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(OrdError::Argument("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    resize_bilinear(x, x.shape()[0] * factor, x.shape()[1] * factor)
}

/// 2-D convolution, weight layout kh x kw x C_in x C_out, zero padding.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
        return Err(OrdError::Dimension(format!(
            "conv2d ranks {:?} {:?} {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wcin != cin || b.shape()[0] != cout {
        return Err(OrdError::Dimension(format!(
            "conv2d channels: input C={}, weight {:?}, bias {:?}",
            cin,
            w.shape(),
            b.shape()
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(OrdError::Dimension("conv2d kernel larger than input".into()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * cout;
            out[obase..obase + cout].copy_from_slice(b.data());
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xbase = (iy as usize * wd + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data()[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w.data()[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for co in 0..cout {
                            out[obase + co] += xv * wrow[co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Column sums of a 2-D matrix (axis 0), returning a length-N vector.
pub fn sum_axis0(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(OrdError::Dimension(format!(
            "sum_axis0 expects rank 2, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n], out)
}

/// Row sums of a 2-D matrix (axis 1), returning a length-M vector.
pub fn sum_axis1(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(OrdError::Dimension(format!(
            "sum_axis1 expects rank 2, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m];
    for i in 0..m {
        out[i] = a.data()[i * n..(i + 1) * n].iter().sum();
    }
    Tensor::new(vec![m], out)
}

pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(OrdError::Dimension(format!(
            "flip_horizontal expects H x W x C, got {:?}",
            x.shape()
        )));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.numel()];
    for i in 0..h {
        for j in 0..w {
            let src = (i * w + j) * c;
            let dst = (i * w + (w - 1 - j)) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Concatenate two H x W x C features along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[..2] != b.shape()[..2] {
        return Err(OrdError::Dimension(format!(
            "concat_channels shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let (ca, cb) = (a.shape()[2], b.shape()[2]);
    let mut out = vec![0.0; h * w * (ca + cb)];
    for pos in 0..h * w {
        let dst = pos * (ca + cb);
        out[dst..dst + ca].copy_from_slice(&a.data()[pos * ca..(pos + 1) * ca]);
        out[dst + ca..dst + ca + cb].copy_from_slice(&b.data()[pos * cb..(pos + 1) * cb]);
    }
    Tensor::new(vec![h, w, ca + cb], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), b);
    }

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    // Naive triple-loop reference, kept free of any shared code path.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.at(&[i, t]) * b.at(&[t, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn matmul_random_vs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 2], -2.0, 2.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"));
    }

    #[test]
    fn conv1x1_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(conv1x1(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn conv1x1_all_ones_counts_channels() {
        let x = Tensor::filled(&[2, 2, 3], 1.0);
        let w = Tensor::filled(&[3, 2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = conv1x1(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn conv1x1_matches_flattened_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[4, 4, 3], -2.0, 2.0, &mut rng);
        let w = Tensor::rand_uniform(&[3, 5], -2.0, 2.0, &mut rng);
        let b = Tensor::rand_uniform(&[5], -2.0, 2.0, &mut rng);
        let y = conv1x1(&x, &w, &b).unwrap();
        let flat = x.reshape(&[16, 3]).unwrap();
        let mut want = matmul(&flat, &w).unwrap();
        for row in 0..16 {
            for c in 0..5 {
                want.data_mut()[row * 5 + c] += b.data()[c];
            }
        }
        assert!(y.reshape(&[16, 5]).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn sigmoid_known_points() {
        let x = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let y = sigmoid(&x);
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Tensor::new(vec![3], vec![1.7, 1.7, 1.7]).unwrap();
        let y = softmax_axis(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let total: f64 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partition_2x2_row_major_order() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = partition_patches(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 1, 1, 1]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn partition_p1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[3, 5, 2], -1.0, 1.0, &mut rng);
        let p = partition_patches(&x, 1).unwrap();
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn partition_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(&[4, 6, 2], -1.0, 1.0, &mut rng);
        let p = partition_patches(&x, 2).unwrap();
        let back = reassemble_patches(&p, 2).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn partition_non_divisible_is_error() {
        let x = Tensor::zeros(&[3, 4, 1]);
        assert!(matches!(
            partition_patches(&x, 2),
            Err(OrdError::Partition(_))
        ));
    }

    #[test]
    fn reassemble_bad_leading_extent() {
        let x = Tensor::zeros(&[3, 1, 1, 1]);
        assert!(matches!(
            reassemble_patches(&x, 2),
            Err(OrdError::Partition(_))
        ));
    }

    #[test]
    fn upsample_factor_one_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::rand_uniform(&[2, 3, 2], -1.0, 1.0, &mut rng);
        assert_eq!(upsample_bilinear(&x, 1).unwrap(), x);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::filled(&[2, 2, 1], 4.25);
        let y = upsample_bilinear(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 4.25).abs() < 1e-14));
    }

    #[test]
    fn upsample_ramp_matches_direct_formula() {
        let x = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        // Direct half-pixel-center interpolation, written out independently.
        let mut want = Tensor::zeros(&[4, 4, 1]);
        for oy in 0..4usize {
            for ox in 0..4usize {
                let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as usize, x0 as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let g = |r: usize, c: usize| x.at(&[r, c, 0]);
                let v = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + g(y0, x1) * (1.0 - fy) * fx
                    + g(y1, x0) * fy * (1.0 - fx)
                    + g(y1, x1) * fy * fx;
                want.set(&[oy, ox, 0], v);
            }
        }
        assert!(y.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn upsample_factor_zero_rejected() {
        let x = Tensor::zeros(&[2, 2, 1]);
        assert!(matches!(
            upsample_bilinear(&x, 0),
            Err(OrdError::Argument(_))
        ));
    }

    #[test]
    fn broadcast_gate_over_channels() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Tensor::new(vec![1, 2], vec![10.0, 100.0]).unwrap();
        let z = mul(&a, &g).unwrap();
        assert_eq!(z.data(), &[10.0, 20.0, 300.0, 400.0]);
    }

    #[test]
    fn conv2d_stride2_shape() {
        let x = Tensor::zeros(&[8, 8, 3]);
        let w = Tensor::zeros(&[3, 3, 3, 4]);
        let b = Tensor::zeros(&[4]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
    }

    #[test]
    fn conv2d_1x1_kernel_matches_conv1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[2, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[5], -1.0, 1.0, &mut rng);
        let w4 = w.reshape(&[1, 1, 2, 5]).unwrap();
        let a = conv2d(&x, &w4, &b, 1, 0).unwrap();
        let c = conv1x1(&x, &w, &b).unwrap();
        assert!(a.max_abs_diff(&c) < 1e-13);
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(&[3, 5, 2], -1.0, 1.0, &mut rng);
        let y = flip_horizontal(&flip_horizontal(&x).unwrap()).unwrap();
        assert_eq!(y, x);
    }
}
