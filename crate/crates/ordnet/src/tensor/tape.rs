//! Dynamically recorded operation tape for reverse-mode differentiation.
//!
//! Forward calls append nodes; `backward` walks the tape in reverse and
//! accumulates exact analytic gradients. Node indices are topologically
//! ordered by construction, so a single reverse sweep suffices.

use super::{ops, Tensor};
use crate::error::{OrdError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Backward rule: given the tape (for parent values) and the gradient flowing
/// into this node, produce one gradient tensor per parent, in parent order.
pub type BackFn = Box<dyn Fn(&Tape, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Only leaves and the
/// requested output retain entries; interior gradients are dropped once
/// consumed.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Append a node. Custom fused operations (losses) use this directly.
    pub fn push(&mut self, value: Tensor, parents: Vec<Value>, back: Option<BackFn>) -> Value {
        let parents = parents.into_iter().map(|v| v.0).collect();
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        Value(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, vec![], None)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |tape, g| {
                let bt = ops::transpose2d(tape.value(b)).unwrap();
                let at = ops::transpose2d(tape.value(a)).unwrap();
                vec![
                    ops::matmul(g, &bt).unwrap(),
                    ops::matmul(&at, g).unwrap(),
                ]
            })),
        ))
    }

    pub fn transpose2d(&mut self, a: Value) -> Result<Value> {
        let out = ops::transpose2d(self.value(a))?;
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g| vec![ops::transpose2d(g).unwrap()])),
        ))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let out = self.value(a).reshape(shape)?;
        let orig = self.value(a).shape().to_vec();
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g| vec![g.reshape(&orig).unwrap()])),
        ))
    }

    /// Elementwise add; `b` may broadcast over the trailing channel axis.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = ops::add(self.value(a), self.value(b))?;
        let bshape = self.value(b).shape().to_vec();
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |_, g| {
                vec![g.clone(), reduce_to_shape(g, &bshape)]
            })),
        ))
    }

    /// Elementwise product; `b` may broadcast over the trailing channel axis.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let bshape = self.value(b).shape().to_vec();
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |tape, g| {
                let ga = ops::mul(g, tape.value(b)).unwrap();
                let gb_full = ops::mul(g, tape.value(a)).unwrap();
                vec![ga, reduce_to_shape(&gb_full, &bshape)]
            })),
        ))
    }

    /// Add a length-N bias to every row of an M x N matrix.
    pub fn add_bias(&mut self, a: Value, b: Value) -> Result<Value> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 2 || bv.rank() != 1 || av.shape()[1] != bv.shape()[0] {
            return Err(OrdError::Dimension(format!(
                "add_bias shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut data = av.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv.data()[j];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |_, g| {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g.data()[i * n + j];
                    }
                }
                vec![g.clone(), Tensor::new(vec![n], gb).unwrap()]
            })),
        ))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let out = ops::scale(self.value(a), c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g| vec![ops::scale(g, c)])),
        )
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let out = ops::sigmoid(self.value(a));
        let cached = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g| {
                let data = g
                    .data()
                    .iter()
                    .zip(cached.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                vec![Tensor::new(cached.shape().to_vec(), data).unwrap()]
            })),
        )
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let out = ops::tanh(self.value(a));
        let cached = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g| {
                let data = g
                    .data()
                    .iter()
                    .zip(cached.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                vec![Tensor::new(cached.shape().to_vec(), data).unwrap()]
            })),
        )
    }

    pub fn softmax_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        let out = ops::softmax_axis(self.value(a), axis)?;
        let cached = out.clone();
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g| {
                let shape = cached.shape();
                let lane = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let mut gx = vec![0.0; cached.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dot += g.data()[idx] * cached.data()[idx];
                        }
                        for l in 0..lane {
                            let idx = base + l * inner;
                            gx[idx] = cached.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                vec![Tensor::new(shape.to_vec(), gx).unwrap()]
            })),
        ))
    }

    pub fn sum_all(&mut self, a: Value) -> Value {
        let total: f64 = self.value(a).data().iter().sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::scalar(total),
            vec![a],
            Some(Box::new(move |_, g| {
                vec![Tensor::filled(&shape, g.item())]
            })),
        )
    }

    pub fn sum_axis0(&mut self, a: Value) -> Result<Value> {
        let out = ops::sum_axis0(self.value(a))?;
        let (m, n) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n..(i + 1) * n].copy_from_slice(g.data());
                }
                vec![Tensor::new(vec![m, n], gx).unwrap()]
            })),
        ))
    }

    pub fn sum_axis1(&mut self, a: Value) -> Result<Value> {
        let out = ops::sum_axis1(self.value(a))?;
        let (m, n) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g.data()[i];
                    }
                }
                vec![Tensor::new(vec![m, n], gx).unwrap()]
            })),
        ))
    }

    /// 1x1 convolution over the channel axis, composed from primitives.
    pub fn conv1x1(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let (h, wd, cin) = {
            let s = self.value(x).shape();
            if s.len() != 3 {
                return Err(OrdError::Dimension(format!(
                    "conv1x1 expects H x W x C, got {:?}",
                    s
                )));
            }
            (s[0], s[1], s[2])
        };
        let cout = {
            let ws = self.value(w).shape();
            if ws.len() != 2 || ws[0] != cin {
                return Err(OrdError::Dimension(format!(
                    "conv1x1 weight {:?} for input C={}",
                    ws, cin
                )));
            }
            ws[1]
        };
        let flat = self.reshape(x, &[h * wd, cin])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        self.reshape(y, &[h, wd, cout])
    }

    pub fn conv2d(
        &mut self,
        x: Value,
        w: Value,
        b: Value,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let xshape = self.value(x).shape().to_vec();
        let wshape = self.value(w).shape().to_vec();
        let oshape = out.shape().to_vec();
        Ok(self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |tape, g| {
                let (h, wd, cin) = (xshape[0], xshape[1], xshape[2]);
                let (kh, kw, cout) = (wshape[0], wshape[1], wshape[3]);
                let (oh, ow) = (oshape[0], oshape[1]);
                let xd = tape.value(x).data();
                let wdat = tape.value(w).data();
                let mut gx = vec![0.0; h * wd * cin];
                let mut gw = vec![0.0; kh * kw * cin * cout];
                let mut gb = vec![0.0; cout];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gbase = (oy * ow + ox) * cout;
                        for co in 0..cout {
                            gb[co] += g.data()[gbase + co];
                        }
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
                                    let xv = xd[xbase + ci];
                                    let wrow = &wdat[wbase + ci * cout..wbase + (ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        let gv = g.data()[gbase + co];
                                        acc += gv * wrow[co];
                                        gw[wbase + ci * cout + co] += gv * xv;
                                    }
                                    gx[xbase + ci] += acc;
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(xshape.clone(), gx).unwrap(),
                    Tensor::new(wshape.clone(), gw).unwrap(),
                    Tensor::new(vec![cout], gb).unwrap(),
                ]
            })),
        ))
    }

    pub fn upsample_bilinear(&mut self, x: Value, factor: usize) -> Result<Value> {
        let out = ops::upsample_bilinear(self.value(x), factor)?;
        let xshape = self.value(x).shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g| {
                let (h, w, c) = (xshape[0], xshape[1], xshape[2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![0.0; h * w * c];
                if factor == 1 {
                    gx.copy_from_slice(g.data());
                } else {
                    let ry = h as f64 / oh as f64;
                    let rx = w as f64 / ow as f64;
                    for oy in 0..oh {
                        let sy = ((oy as f64 + 0.5) * ry - 0.5).max(0.0);
                        let y0 = (sy.floor() as usize).min(h - 1);
                        let y1 = (y0 + 1).min(h - 1);
                        let fy = (sy - y0 as f64).clamp(0.0, 1.0);
                        for ox in 0..ow {
                            let sx = ((ox as f64 + 0.5) * rx - 0.5).max(0.0);
                            let x0 = (sx.floor() as usize).min(w - 1);
                            let x1 = (x0 + 1).min(w - 1);
                            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
                            for ch in 0..c {
                                let gv = g.data()[(oy * ow + ox) * c + ch];
                                gx[(y0 * w + x0) * c + ch] += gv * (1.0 - fy) * (1.0 - fx);
                                gx[(y0 * w + x1) * c + ch] += gv * (1.0 - fy) * fx;
                                gx[(y1 * w + x0) * c + ch] += gv * fy * (1.0 - fx);
                                gx[(y1 * w + x1) * c + ch] += gv * fy * fx;
                            }
                        }
                    }
                }
                vec![Tensor::new(xshape.clone(), gx).unwrap()]
            })),
        ))
    }

    /// Zero-pad an H x W x C node on the bottom/right.
    pub fn pad_spatial(&mut self, x: Value, nh: usize, nw: usize) -> Result<Value> {
        let out = ops::pad_spatial(self.value(x), nh, nw)?;
        let (h, w) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g| vec![ops::crop(g, h, w).unwrap()])),
        ))
    }

    /// Keep the top-left h x w window of an H x W x C node.
    pub fn crop_spatial(&mut self, x: Value, h: usize, w: usize) -> Result<Value> {
        let out = ops::crop(self.value(x), h, w)?;
        let (xh, xw) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g| {
                vec![ops::pad_spatial(g, xh, xw).unwrap()]
            })),
        ))
    }

    pub fn partition_patches(&mut self, x: Value, p: usize) -> Result<Value> {
        let out = ops::partition_patches(self.value(x), p)?;
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g| {
                vec![ops::reassemble_patches(g, p).unwrap()]
            })),
        ))
    }

    pub fn reassemble_patches(&mut self, yp: Value, p: usize) -> Result<Value> {
        let out = ops::reassemble_patches(self.value(yp), p)?;
        Ok(self.push(
            out,
            vec![yp],
            Some(Box::new(move |_, g| {
                vec![ops::partition_patches(g, p).unwrap()]
            })),
        ))
    }

    /// Slice index `i` out of the leading extent of a rank-4 tensor.
    pub fn index_first(&mut self, x: Value, i: usize) -> Result<Value> {
        let xv = self.value(x);
        if xv.rank() != 4 || i >= xv.shape()[0] {
            return Err(OrdError::Argument(format!(
                "index_first {} on shape {:?}",
                i,
                xv.shape()
            )));
        }
        let inner: usize = xv.shape()[1..].iter().product();
        let slice = xv.data()[i * inner..(i + 1) * inner].to_vec();
        let out = Tensor::new(xv.shape()[1..].to_vec(), slice)?;
        let xshape = xv.shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g| {
                let mut gx = vec![0.0; xshape.iter().product()];
                gx[i * inner..(i + 1) * inner].copy_from_slice(g.data());
                vec![Tensor::new(xshape.clone(), gx).unwrap()]
            })),
        ))
    }

    /// Stack same-shape rank-3 tensors along a new leading extent.
    pub fn stack_first(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(OrdError::Argument("stack_first of nothing".into()));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let inner: usize = shape.iter().product();
        let mut data = Vec::with_capacity(parts.len() * inner);
        for &p in parts {
            if self.value(p).shape() != shape.as_slice() {
                return Err(OrdError::Dimension(format!(
                    "stack_first shapes {:?} vs {:?}",
                    self.value(p).shape(),
                    shape
                )));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut oshape = vec![parts.len()];
        oshape.extend_from_slice(&shape);
        let out = Tensor::new(oshape, data)?;
        let n = parts.len();
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |_, g| {
                (0..n)
                    .map(|i| {
                        Tensor::new(
                            shape.clone(),
                            g.data()[i * inner..(i + 1) * inner].to_vec(),
                        )
                        .unwrap()
                    })
                    .collect()
            })),
        ))
    }

    pub fn concat_channels(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |_, g| {
                let (h, w) = (ashape[0], ashape[1]);
                let (ca, cb) = (ashape[2], bshape[2]);
                let mut ga = vec![0.0; h * w * ca];
                let mut gb = vec![0.0; h * w * cb];
                for pos in 0..h * w {
                    let src = pos * (ca + cb);
                    ga[pos * ca..(pos + 1) * ca]
                        .copy_from_slice(&g.data()[src..src + ca]);
                    gb[pos * cb..(pos + 1) * cb]
                        .copy_from_slice(&g.data()[src + ca..src + ca + cb]);
                }
                vec![
                    Tensor::new(ashape.clone(), ga).unwrap(),
                    Tensor::new(bshape.clone(), gb).unwrap(),
                ]
            })),
        ))
    }

    /// Reverse sweep from a scalar output. Gradient accumulation is serial
    /// per node; parent indices always precede children on the tape.
    pub fn backward(&self, out: Value) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(OrdError::Argument(format!(
                "backward from non-scalar shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.back.as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(g) = grads[i].take() else {
                continue; // not on any path to the output
            };
            let pgrads = back(self, &g);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Collapse a full-shape gradient down to a broadcast operand's shape by
/// summing over the broadcast channel axis.
fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let c = g.shape()[g.rank() - 1];
    let positions = g.numel() / c;
    let mut out = vec![0.0; positions];
    for pos in 0..positions {
        out[pos] = g.data()[pos * c..(pos + 1) * c].iter().sum();
    }
    Tensor::new(target.to_vec(), out).unwrap()
}
