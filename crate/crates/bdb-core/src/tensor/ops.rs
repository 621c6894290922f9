//! Tensor operations and their backward rules.

use super::{strides_of, unravel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

fn binary(a: &Tensor, b: &Tensor, kind: BinaryKind) -> Result<Tensor> {
    let a_scalar = a.numel() == 1;
    let b_scalar = b.numel() == 1;
    if a.shape() != b.shape() && !a_scalar && !b_scalar {
        return Err(Error::Dimension(format!(
            "elementwise op needs equal shapes or a scalar operand, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out_shape = if a_scalar && !b_scalar {
        b.shape().to_vec()
    } else {
        a.shape().to_vec()
    };
    let n = out_shape.iter().product::<usize>();
    let ad = a.data();
    let bd = b.data();
    let at = |i: usize| if a_scalar { ad[0] } else { ad[i] };
    let bt = |i: usize| if b_scalar { bd[0] } else { bd[i] };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(match kind {
            BinaryKind::Add => at(i) + bt(i),
            BinaryKind::Sub => at(i) - bt(i),
            BinaryKind::Mul => at(i) * bt(i),
        });
    }

    let (ac, bc) = (a.clone(), b.clone());
    let (an, bn) = (a.numel(), b.numel());
    let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
        let reduce_to = |grads: Vec<f64>, numel: usize| -> Vec<f64> {
            if numel == 1 && grads.len() != 1 {
                vec![grads.iter().sum()]
            } else {
                grads
            }
        };
        let ga = if ac.requires_grad() {
            let raw: Vec<f64> = match kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Mul => {
                    let bd = bc.data();
                    g.iter()
                        .enumerate()
                        .map(|(i, gi)| gi * if bn == 1 { bd[0] } else { bd[i] })
                        .collect()
                }
            };
            Some(reduce_to(raw, an))
        } else {
            None
        };
        let gb = if bc.requires_grad() {
            let raw: Vec<f64> = match kind {
                BinaryKind::Add => g.to_vec(),
                BinaryKind::Sub => g.iter().map(|gi| -gi).collect(),
                BinaryKind::Mul => {
                    let ad = ac.data();
                    g.iter()
                        .enumerate()
                        .map(|(i, gi)| gi * if an == 1 { ad[0] } else { ad[i] })
                        .collect()
                }
            };
            Some(reduce_to(raw, bn))
        } else {
            None
        };
        vec![ga, gb]
    };
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(rule),
    ))
}

/// Reduction flavors over a set of axes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinaryKind::Mul)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + c).collect();
        let req = self.requires_grad();
        let rule = move |g: &[f64]| vec![if req { Some(g.to_vec()) } else { None }];
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(rule))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        let req = self.requires_grad();
        let rule = move |g: &[f64]| {
            vec![if req {
                Some(g.iter().map(|gi| gi * c).collect())
            } else {
                None
            }]
        };
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(rule))
    }

    /// max(x, 0). The gradient at exactly 0 is defined as 0.
    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        let sc = self.clone();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !sc.requires_grad() {
                return vec![None];
            }
            let d = sc.data();
            vec![Some(
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| if d[i] > 0.0 { *gi } else { 0.0 })
                    .collect(),
            )]
        };
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(rule))
    }

    /// log(1 + exp(x)), evaluated in the overflow-safe form
    /// max(x, 0) + log1p(exp(-|x|)).
    pub fn softplus(&self) -> Tensor {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let sc = self.clone();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !sc.requires_grad() {
                return vec![None];
            }
            let d = sc.data();
            // d softplus / dx = sigmoid(x), in a form stable for |x| large.
            vec![Some(
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let x = d[i];
                        let s = if x >= 0.0 {
                            1.0 / (1.0 + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (1.0 + e)
                        };
                        gi * s
                    })
                    .collect(),
            )]
        };
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(rule))
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let out_copy = out.clone();
        let req = self.requires_grad();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !req {
                return vec![None];
            }
            vec![Some(
                g.iter().zip(&out_copy).map(|(gi, oi)| gi * oi).collect(),
            )]
        };
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(rule))
    }

    /// Natural logarithm; the caller is responsible for positive inputs.
    pub fn log(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.ln()).collect();
        let sc = self.clone();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !sc.requires_grad() {
                return vec![None];
            }
            let d = sc.data();
            vec![Some(g.iter().enumerate().map(|(i, gi)| gi / d[i]).collect())]
        };
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(rule))
    }

    /// sqrt(max(x, 0)) with the derivative singularity guarded: below `eps`
    /// the gradient is defined as 0. The value itself stays exact, so
    /// coincident points produce a distance of exactly zero.
    pub fn sqrt_eps(&self, eps: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| v.max(0.0).sqrt()).collect();
        let out_copy = out.clone();
        let sc = self.clone();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !sc.requires_grad() {
                return vec![None];
            }
            let d = sc.data();
            vec![Some(
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        if d[i] > eps {
                            gi * 0.5 / out_copy[i]
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )]
        };
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(rule))
    }

    /// 2-D matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), rhs.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                a_shape, b_shape
            )));
        }
        let (m, k) = (a_shape[0], a_shape[1]);
        let (k2, n) = (b_shape[0], b_shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                a_shape, b_shape
            )));
        }
        let (ad, bd) = (self.data(), rhs.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a_ip * b;
                }
            }
        }
        let (ac, bc) = (self.clone(), rhs.clone());
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            // dA = dC . B^T, dB = A^T . dC
            let ga = if ac.requires_grad() {
                let bd = bc.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                Some(da)
            } else {
                None
            };
            let gb = if bc.requires_grad() {
                let ad = ac.data();
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += ad[i * k + p] * g[i * n + j];
                        }
                        db[p * n + j] = s;
                    }
                }
                Some(db)
            } else {
                None
            };
            vec![ga, gb]
        };
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(rule),
        ))
    }

    fn validate_axes(&self, axes: &[usize]) -> Result<Vec<usize>> {
        if axes.is_empty() {
            return Err(Error::Dimension("reduction needs at least one axis".into()));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(Error::Dimension(format!("duplicate reduction axes {:?}", axes)));
        }
        for &ax in &sorted {
            if ax >= self.shape().len() {
                return Err(Error::Dimension(format!(
                    "axis {} out of range for shape {:?}",
                    ax,
                    self.shape()
                )));
            }
            if self.shape()[ax] == 0 {
                return Err(Error::Dimension(format!(
                    "cannot reduce over empty axis {} of shape {:?}",
                    ax,
                    self.shape()
                )));
            }
        }
        Ok(sorted)
    }

    /// Reduction over `axes`; reduced axes are removed from the shape.
    /// `Max` routes the gradient to the first maximal element in row-major
    /// scan order.
    pub fn reduce(&self, op: Reduce, axes: &[usize]) -> Result<Tensor> {
        let axes = self.validate_axes(axes)?;
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let out_numel: usize = out_shape.iter().product();
        let reduced_count: usize = axes.iter().map(|&a| in_shape[a]).product();

        let in_strides = strides_of(&in_shape);
        let out_strides = strides_of(&out_shape);
        // Map each input flat index to its output flat index.
        let out_index_of = |flat: usize, idx_buf: &mut [usize]| -> usize {
            unravel(flat, &in_strides, idx_buf);
            let mut out_flat = 0;
            let mut oi = 0;
            for (axis, &i) in idx_buf.iter().enumerate() {
                if !axes.contains(&axis) {
                    out_flat += i * out_strides[oi];
                    oi += 1;
                }
            }
            out_flat
        };

        let d = self.data();
        let mut idx_buf = vec![0usize; in_shape.len()];
        let (out, argmax): (Vec<f64>, Option<Vec<usize>>) = match op {
            Reduce::Sum | Reduce::Mean => {
                let mut acc = vec![0.0; out_numel];
                for (flat, &v) in d.iter().enumerate() {
                    acc[out_index_of(flat, &mut idx_buf)] += v;
                }
                if op == Reduce::Mean {
                    for a in &mut acc {
                        *a /= reduced_count as f64;
                    }
                }
                (acc, None)
            }
            Reduce::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_numel];
                let mut arg = vec![usize::MAX; out_numel];
                for (flat, &v) in d.iter().enumerate() {
                    let o = out_index_of(flat, &mut idx_buf);
                    // Strict comparison keeps the first maximum in scan order.
                    if v > best[o] {
                        best[o] = v;
                        arg[o] = flat;
                    }
                }
                (best, Some(arg))
            }
        };

        let in_numel = self.numel();
        let req = self.requires_grad();
        let in_strides_c = in_strides.clone();
        let out_strides_c = out_strides.clone();
        let axes_c = axes.clone();
        let rank = in_shape.len();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !req {
                return vec![None];
            }
            let mut gin = vec![0.0; in_numel];
            match op {
                Reduce::Sum | Reduce::Mean => {
                    let scale = if op == Reduce::Mean {
                        1.0 / reduced_count as f64
                    } else {
                        1.0
                    };
                    let mut idx = vec![0usize; rank];
                    for flat in 0..in_numel {
                        unravel(flat, &in_strides_c, &mut idx);
                        let mut out_flat = 0;
                        let mut oi = 0;
                        for (axis, &i) in idx.iter().enumerate() {
                            if !axes_c.contains(&axis) {
                                out_flat += i * out_strides_c[oi];
                                oi += 1;
                            }
                        }
                        gin[flat] = g[out_flat] * scale;
                    }
                }
                Reduce::Max => {
                    let arg = argmax.as_ref().expect("argmax recorded in forward");
                    for (o, &flat) in arg.iter().enumerate() {
                        gin[flat] += g[o];
                    }
                }
            }
            vec![Some(gin)]
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(Reduce::Sum, axes)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(Reduce::Mean, axes)
    }

    pub fn max_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(Reduce::Max, axes)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        if axes.is_empty() {
            // already rank 0
            return self.reshape(&[]);
        }
        self.reduce(Reduce::Sum, &axes)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        Ok(self.sum_all()?.mul_scalar(1.0 / n as f64))
    }

    /// Concatenation of two tensors along `axis`; all other dimensions must
    /// agree. Zero-width operands are allowed.
    pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::Dimension(format!(
                "concat axis {} invalid for shapes {:?} and {:?}",
                axis, sa, sb
            )));
        }
        for i in 0..sa.len() {
            if i != axis && sa[i] != sb[i] {
                return Err(Error::Dimension(format!(
                    "concat non-axis dims differ: {:?} vs {:?}",
                    sa, sb
                )));
            }
        }
        let mut out_shape = sa.to_vec();
        out_shape[axis] += sb[axis];

        // Treat each tensor as [outer, axis_len, inner].
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (la, lb) = (sa[axis], sb[axis]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bd[o * lb * inner..(o + 1) * lb * inner]);
        }

        let (reqa, reqb) = (a.requires_grad(), b.requires_grad());
        let (na, nb) = (a.numel(), b.numel());
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            let mut ga = if reqa { Some(Vec::with_capacity(na)) } else { None };
            let mut gb = if reqb { Some(Vec::with_capacity(nb)) } else { None };
            let stride = (la + lb) * inner;
            for o in 0..outer {
                let base = o * stride;
                if let Some(ga) = ga.as_mut() {
                    ga.extend_from_slice(&g[base..base + la * inner]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb.extend_from_slice(&g[base + la * inner..base + stride]);
                }
            }
            vec![ga, gb]
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![a.clone(), b.clone()],
            Box::new(rule),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow(axis={}, start={}, len={}) invalid for shape {:?}",
                axis, start, len, shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let d = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;

        let req = self.requires_grad();
        let in_numel = self.numel();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !req {
                return vec![None];
            }
            let mut gin = vec![0.0; in_numel];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * full + start) * inner;
                gin[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(gin)]
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                new_shape
            )));
        }
        let req = self.requires_grad();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            vec![if req { Some(g.to_vec()) } else { None }]
        };
        Ok(Tensor::from_op(
            self.data().to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension(format!(
                "permute {:?} is not a permutation of 0..{}",
                axes, rank
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides_of(shape);
        let out_strides = strides_of(&out_shape);
        let n = self.numel();
        let d = self.data();
        let mut out = vec![0.0; n];
        let mut out_idx = vec![0usize; rank];
        for (out_flat, slot) in out.iter_mut().enumerate() {
            unravel(out_flat, &out_strides, &mut out_idx);
            let mut in_flat = 0;
            for (i, &ax) in axes.iter().enumerate() {
                in_flat += out_idx[i] * in_strides[ax];
            }
            *slot = d[in_flat];
        }
        let req = self.requires_grad();
        let axes_c = axes.to_vec();
        let in_strides_c = in_strides;
        let out_strides_c = out_strides;
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !req {
                return vec![None];
            }
            let mut gin = vec![0.0; n];
            let mut out_idx = vec![0usize; rank];
            for (out_flat, gv) in g.iter().enumerate() {
                unravel(out_flat, &out_strides_c, &mut out_idx);
                let mut in_flat = 0;
                for (i, &ax) in axes_c.iter().enumerate() {
                    in_flat += out_idx[i] * in_strides_c[ax];
                }
                gin[in_flat] = *gv;
            }
            vec![Some(gin)]
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Repeats a size-1 axis `k` times. The gradient sums back over the
    /// expanded axis, making the broadcast explicit on the tape.
    pub fn expand_axis(&self, axis: usize, k: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(Error::Dimension(format!(
                "expand_axis needs a size-1 axis, shape {:?} axis {}",
                shape, axis
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for _ in 0..k {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = k;
        let req = self.requires_grad();
        let in_numel = self.numel();
        let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
            if !req {
                return vec![None];
            }
            let mut gin = vec![0.0; in_numel];
            for o in 0..outer {
                for r in 0..k {
                    let base = (o * k + r) * inner;
                    for i in 0..inner {
                        gin[o * inner + i] += g[base + i];
                    }
                }
            }
            vec![Some(gin)]
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose needs a 2-D tensor, got {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }
}
