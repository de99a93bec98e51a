//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! A forward pass pushes nodes onto a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients for every node, leaves included.
//! Tapes are rebuilt per step (define-by-run), which keeps the engine small
//! and the parameter update path explicit.
//!
//! Backward closures read parent values straight from the tape, so nodes are
//! created strictly after their parents. All kernels run in a fixed loop
//! order, making gradients bitwise reproducible.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// grad_out, parent values, own value -> one gradient per parent.
type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients by node, produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable input (parameter or probe point).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// reached; leaves keep theirs for parameter updates.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut by_node: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(gout) = by_node[id].take() else {
                continue;
            };
            match &self.nodes[id].back {
                Some(back) => {
                    let pvals: Vec<&Tensor> = self.nodes[id]
                        .parents
                        .iter()
                        .map(|p| &self.nodes[p.0].value)
                        .collect();
                    let pgrads = back(&gout, &pvals, &self.nodes[id].value);
                    debug_assert_eq!(pgrads.len(), self.nodes[id].parents.len());
                    for (p, g) in self.nodes[id].parents.iter().zip(pgrads) {
                        debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                        match &mut by_node[p.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                    // interior gradients are not needed once propagated
                }
                None => by_node[id] = Some(gout),
            }
        }
        Grads { by_node }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| vec![g.mul(p[1]), g.mul(p[0])])),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, vec![a], Some(Box::new(move |g, _, _| vec![g.scale(c)])))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, y| {
                vec![g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))]
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g.zip_map(p[0], |gi, x| gi * gelu_grad(x))]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let in_shape = self.value(a).shape().to_vec();
        let v = self.value(a).clone().reshape(shape);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![g.clone().reshape(in_shape.clone())]
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.matmul(&p[1].transposed()), p[0].transposed().matmul(g)]
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transposed();
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, _| vec![g.transposed()])),
        )
    }

    /// a[m,n] + b[n] broadcast over rows (bias add).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(b).shape(), &[n], "bias length mismatch");
        let mut out = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bd.iter()) {
                *o += bv;
            }
        }
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    let row = &g.data()[i * n..(i + 1) * n];
                    for (acc, &gv) in gb.iter_mut().zip(row.iter()) {
                        *acc += gv;
                    }
                }
                vec![g.clone(), Tensor::new(vec![n], gb)]
            })),
        )
    }

    /// a[N,d] + s[N] broadcast across the channel axis.
    pub fn add_col_broadcast(&mut self, a: Var, s: Var) -> Var {
        let (rows, cols) = self.value(a).dims2();
        assert_eq!(self.value(s).shape(), &[rows], "per-row scalar mismatch");
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..rows {
            for v in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                *v += sv[i];
            }
        }
        self.push(
            out,
            vec![a, s],
            Some(Box::new(move |g, _, _| {
                let mut gs = vec![0.0; rows];
                for i in 0..rows {
                    gs[i] = g.data()[i * cols..(i + 1) * cols].iter().sum();
                }
                vec![g.clone(), Tensor::new(vec![rows], gs)]
            })),
        )
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = &self.value(a).data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            let mut z = 0.0;
            for (o, &x) in orow.iter_mut().zip(row.iter()) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, y| {
                let mut gx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    let out = &mut gx.data_mut()[i * n..(i + 1) * n];
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![gx]
            })),
        )
    }

    /// LayerNorm over the last axis of x[m,n] with per-channel gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(gain).shape(), &[n]);
        assert_eq!(self.value(bias).shape(), &[n]);
        let mut xhat = Tensor::zeros(vec![m, n]);
        let mut inv_std = vec![0.0; m];
        {
            let xd = self.value(x).data();
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let s = 1.0 / (var + EPS).sqrt();
                inv_std[i] = s;
                for (o, &v) in xhat.data_mut()[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o = (v - mu) * s;
                }
            }
        }
        let mut out = Tensor::zeros(vec![m, n]);
        {
            let gd = self.value(gain).data();
            let bd = self.value(bias).data();
            for i in 0..m {
                for j in 0..n {
                    out.data_mut()[i * n + j] = xhat.data()[i * n + j] * gd[j] + bd[j];
                }
            }
        }
        let xhat_c = xhat;
        self.push(
            out,
            vec![x, gain, bias],
            Some(Box::new(move |g, p, _| {
                let gd = p[1].data();
                let mut gx = Tensor::zeros(vec![m, n]);
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for i in 0..m {
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let xr = &xhat_c.data()[i * n..(i + 1) * n];
                    let mut mean_gy = 0.0;
                    let mut mean_gyx = 0.0;
                    for j in 0..n {
                        let gy = gr[j] * gd[j];
                        mean_gy += gy;
                        mean_gyx += gy * xr[j];
                        ggain[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                    }
                    mean_gy /= n as f64;
                    mean_gyx /= n as f64;
                    let out = &mut gx.data_mut()[i * n..(i + 1) * n];
                    for j in 0..n {
                        let gy = gr[j] * gd[j];
                        out[j] = (gy - mean_gy - xr[j] * mean_gyx) * inv_std[i];
                    }
                }
                vec![
                    gx,
                    Tensor::new(vec![n], ggain),
                    Tensor::new(vec![n], gbias),
                ]
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= n, "column slice out of range");
        let mut out = Tensor::zeros(vec![m, len]);
        for i in 0..m {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(a).data()[i * n + start..i * n + start + len]);
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    gx.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                vec![gx]
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        let n: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![m, n]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let pv = self.value(p);
            assert_eq!(pv.dims2().0, m, "concat_cols row mismatch");
            for i in 0..m {
                out.data_mut()[i * n + off..i * n + off + w]
                    .copy_from_slice(&pv.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut gp = Tensor::zeros(vec![m, w]);
                    for i in 0..m {
                        gp.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * n + off..i * n + off + w]);
                    }
                    grads.push(gp);
                    off += w;
                }
                grads
            })),
        )
    }

    /// Mean over rows: [N,d] -> [d].
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out
                .iter_mut()
                .zip(self.value(a).data()[i * n..(i + 1) * n].iter())
            {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(
            Tensor::new(vec![n], out),
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    for (o, &gv) in gx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(g.data()) {
                        *o = gv / m as f64;
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Sum of all elements -> scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let v = self.value(a).sum();
        self.push(
            Tensor::scalar(v),
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![Tensor::full(shape.clone(), g.item())]
            })),
        )
    }

    /// Mean of all elements -> scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).numel() as f64;
        let v = self.value(a).sum() / n;
        self.push(
            Tensor::scalar(v),
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![Tensor::full(shape.clone(), g.item() / n)]
            })),
        )
    }

    // ---- token grid <-> spatial ----

    /// Tokens [N,d] laid out row-major on (ht, wt) -> channel-first [d,ht,wt].
    pub fn tokens_to_chw(&mut self, a: Var, ht: usize, wt: usize) -> Var {
        let (rows, d) = self.value(a).dims2();
        assert_eq!(rows, ht * wt, "token count does not match grid");
        let mut out = Tensor::zeros(vec![d, ht, wt]);
        for n in 0..rows {
            for c in 0..d {
                out.data_mut()[c * rows + n] = self.value(a).data()[n * d + c];
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(vec![rows, d]);
                for n in 0..rows {
                    for c in 0..d {
                        gx.data_mut()[n * d + c] = g.data()[c * rows + n];
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Inverse of [`Tape::tokens_to_chw`].
    pub fn chw_to_tokens(&mut self, a: Var) -> Var {
        let (d, ht, wt) = self.value(a).dims3();
        let rows = ht * wt;
        let mut out = Tensor::zeros(vec![rows, d]);
        for n in 0..rows {
            for c in 0..d {
                out.data_mut()[n * d + c] = self.value(a).data()[c * rows + n];
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(vec![d, ht, wt]);
                for n in 0..rows {
                    for c in 0..d {
                        gx.data_mut()[c * rows + n] = g.data()[n * d + c];
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Non-overlapping p-by-p patches of x[C,H,W] -> [N, C*p*p], N=(H/p)(W/p).
    /// Patch n = pr*(W/p)+pc; column = c*p*p + dy*p + dx.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(h % p == 0 && w % p == 0, "image not divisible by patch");
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let cols = c * p * p;
        let mut out = Tensor::zeros(vec![n, cols]);
        {
            let xd = self.value(x).data();
            for pr in 0..gh {
                for pc in 0..gw {
                    let row = (pr * gw + pc) * cols;
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                out.data_mut()[row + ch * p * p + dy * p + dx] =
                                    xd[ch * h * w + (pr * p + dy) * w + (pc * p + dx)];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(vec![c, h, w]);
                for pr in 0..gh {
                    for pc in 0..gw {
                        let row = (pr * gw + pc) * cols;
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    gx.data_mut()[ch * h * w + (pr * p + dy) * w + (pc * p + dx)] =
                                        g.data()[row + ch * p * p + dy * p + dx];
                                }
                            }
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    // ---- convolutions & resampling ----

    /// conv2d: x[C,H,W], w[O,C,kh,kw], b[O]; zero padding `pad`, stride `stride`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4-D");
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wc, c, "conv channel mismatch");
        assert_eq!(self.value(b).shape(), &[o]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![o, oh, ow]);
        {
            let xd = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for oc in 0..o {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bv[oc];
                        for ic in 0..c {
                            for i in 0..kh {
                                let iy = (y * stride + i) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let ix = (xo * stride + j) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += wv[((oc * c + ic) * kh + i) * kw + j]
                                        * xd[ic * h * wd + iy as usize * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[oc * oh * ow + y * ow + xo] = acc;
                    }
                }
            }
        }
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g, p, _| {
                let xd = p[0].data();
                let wv = p[1].data();
                let mut gx = Tensor::zeros(vec![c, h, wd]);
                let mut gw = Tensor::zeros(vec![o, c, kh, kw]);
                let mut gb = vec![0.0; o];
                for oc in 0..o {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let gv = g.data()[oc * oh * ow + y * ow + xo];
                            gb[oc] += gv;
                            for ic in 0..c {
                                for i in 0..kh {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for j in 0..kw {
                                        let ix = (xo * stride + j) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ic * h * wd + iy as usize * wd + ix as usize;
                                        let wi = ((oc * c + ic) * kh + i) * kw + j;
                                        gw.data_mut()[wi] += gv * xd[xi];
                                        gx.data_mut()[xi] += gv * wv[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, Tensor::new(vec![o], gb)]
            })),
        )
    }

    /// Transposed conv: x[C,H,W], w[C,O,kh,kw], b[O], stride s, no padding.
    /// Output is [O, (H-1)s+kh, (W-1)s+kw].
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv_transpose weight must be 4-D");
        let (wc, o, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wc, c, "conv_transpose channel mismatch");
        assert_eq!(self.value(b).shape(), &[o]);
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        let mut out = Tensor::zeros(vec![o, oh, ow]);
        {
            let xd = self.value(x).data();
            let wv = self.value(w).data();
            for ic in 0..c {
                for y in 0..h {
                    for xo in 0..wd {
                        let xv = xd[ic * h * wd + y * wd + xo];
                        for oc in 0..o {
                            for i in 0..kh {
                                for j in 0..kw {
                                    out.data_mut()
                                        [oc * oh * ow + (y * stride + i) * ow + (xo * stride + j)] +=
                                        xv * wv[((ic * o + oc) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                }
            }
            let bv = self.value(b).data();
            for oc in 0..o {
                for v in &mut out.data_mut()[oc * oh * ow..(oc + 1) * oh * ow] {
                    *v += bv[oc];
                }
            }
        }
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g, p, _| {
                let xd = p[0].data();
                let wv = p[1].data();
                let mut gx = Tensor::zeros(vec![c, h, wd]);
                let mut gw = Tensor::zeros(vec![c, o, kh, kw]);
                let mut gb = vec![0.0; o];
                for oc in 0..o {
                    for v in &g.data()[oc * oh * ow..(oc + 1) * oh * ow] {
                        gb[oc] += v;
                    }
                }
                for ic in 0..c {
                    for y in 0..h {
                        for xo in 0..wd {
                            let xi = ic * h * wd + y * wd + xo;
                            let mut acc = 0.0;
                            for oc in 0..o {
                                for i in 0..kh {
                                    for j in 0..kw {
                                        let gv = g.data()[oc * oh * ow
                                            + (y * stride + i) * ow
                                            + (xo * stride + j)];
                                        let wi = ((ic * o + oc) * kh + i) * kw + j;
                                        acc += gv * wv[wi];
                                        gw.data_mut()[wi] += gv * xd[xi];
                                    }
                                }
                            }
                            gx.data_mut()[xi] = acc;
                        }
                    }
                }
                vec![gx, gw, Tensor::new(vec![o], gb)]
            })),
        )
    }

    /// 2x2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(vec![c, oh, ow]);
        {
            let xd = self.value(x).data();
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let base = ch * h * w + 2 * y * w + 2 * xo;
                        out.data_mut()[ch * oh * ow + y * ow + xo] =
                            0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
                    }
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let gv = 0.25 * g.data()[ch * oh * ow + y * ow + xo];
                            let base = ch * h * w + 2 * y * w + 2 * xo;
                            gx.data_mut()[base] += gv;
                            gx.data_mut()[base + 1] += gv;
                            gx.data_mut()[base + w] += gv;
                            gx.data_mut()[base + w + 1] += gv;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(vec![c, oh, ow]);
        {
            let xd = self.value(x).data();
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        out.data_mut()[ch * oh * ow + y * ow + xo] =
                            xd[ch * h * w + (y / 2) * w + xo / 2];
                    }
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            gx.data_mut()[ch * h * w + (y / 2) * w + xo / 2] +=
                                g.data()[ch * oh * ow + y * ow + xo];
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Bilinear resize of x[C,H,W] to (oh, ow), half-pixel centers.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let ytab = interp_table(h, oh);
        let xtab = interp_table(w, ow);
        let mut out = Tensor::zeros(vec![c, oh, ow]);
        {
            let xd = self.value(x).data();
            for ch in 0..c {
                let plane = &xd[ch * h * w..(ch + 1) * h * w];
                for (y, &(y0, y1, ty)) in ytab.iter().enumerate() {
                    for (xo, &(x0, x1, tx)) in xtab.iter().enumerate() {
                        let v = (1.0 - ty) * ((1.0 - tx) * plane[y0 * w + x0] + tx * plane[y0 * w + x1])
                            + ty * ((1.0 - tx) * plane[y1 * w + x0] + tx * plane[y1 * w + x1]);
                        out.data_mut()[ch * oh * ow + y * ow + xo] = v;
                    }
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    for (y, &(y0, y1, ty)) in ytab.iter().enumerate() {
                        for (xo, &(x0, x1, tx)) in xtab.iter().enumerate() {
                            let gv = g.data()[ch * oh * ow + y * ow + xo];
                            let plane = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
                            plane[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                            plane[y0 * w + x1] += gv * (1.0 - ty) * tx;
                            plane[y1 * w + x0] += gv * ty * (1.0 - tx);
                            plane[y1 * w + x1] += gv * ty * tx;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Per-pixel inner product over channels: F[C,H,W] . q[C] -> [H,W].
    pub fn channel_dot(&mut self, f: Var, q: Var) -> Var {
        let (c, h, w) = self.value(f).dims3();
        assert_eq!(self.value(q).shape(), &[c], "channel width mismatch");
        let mut out = Tensor::zeros(vec![h, w]);
        {
            let fd = self.value(f).data();
            let qd = self.value(q).data();
            for ch in 0..c {
                let plane = &fd[ch * h * w..(ch + 1) * h * w];
                for (o, &v) in out.data_mut().iter_mut().zip(plane.iter()) {
                    *o += qd[ch] * v;
                }
            }
        }
        self.push(
            out,
            vec![f, q],
            Some(Box::new(move |g, p, _| {
                let fd = p[0].data();
                let qd = p[1].data();
                let mut gf = Tensor::zeros(vec![c, h, w]);
                let mut gq = vec![0.0; c];
                for ch in 0..c {
                    let fplane = &fd[ch * h * w..(ch + 1) * h * w];
                    let gplane = &mut gf.data_mut()[ch * h * w..(ch + 1) * h * w];
                    for ((go, &gv), &fv) in gplane.iter_mut().zip(g.data()).zip(fplane) {
                        *go = gv * qd[ch];
                        gq[ch] += gv * fv;
                    }
                }
                vec![gf, Tensor::new(vec![c], gq)]
            })),
        )
    }

    // ---- heads & objectives ----

    /// Confidence gate: keep g_n where sigmoid(g_n) >= tau, else 0.
    pub fn gate(&mut self, g: Var, tau: f64) -> Var {
        let v = self
            .value(g)
            .map(|x| if sigmoid(x) >= tau { x } else { 0.0 });
        self.push(
            v,
            vec![g],
            Some(Box::new(move |gout, p, _| {
                vec![gout.zip_map(p[0], |gv, x| if sigmoid(x) >= tau { gv } else { 0.0 })]
            })),
        )
    }

    /// Mean binary cross-entropy from logits, evaluated in stable log-sum-exp
    /// form; `targets` are 0/1 constants.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "bce target shape mismatch");
        let n = lv.numel() as f64;
        let mut acc = 0.0;
        for (&z, &y) in lv.data().iter().zip(targets.data()) {
            acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let t = targets.clone();
        self.push(
            Tensor::scalar(acc / n),
            vec![logits],
            Some(Box::new(move |g, p, _| {
                let g0 = g.item();
                vec![p[0].zip_map(&t, |z, y| g0 * (sigmoid(z) - y) / n)]
            })),
        )
    }

    /// Mean focal loss over probabilities against 0/1 ground truth.
    pub fn focal_loss_mean(&mut self, prob: Var, gt: &Tensor, gamma: f64, alpha: f64) -> Var {
        let pv = self.value(prob);
        assert_eq!(pv.shape(), gt.shape(), "focal gt shape mismatch");
        let n = pv.numel() as f64;
        let mut acc = 0.0;
        for (&p, &t) in pv.data().iter().zip(gt.data()) {
            let pt = if t > 0.5 { p } else { 1.0 - p };
            let at = if t > 0.5 { alpha } else { 1.0 - alpha };
            acc += -at * (1.0 - pt).powf(gamma) * pt.max(1e-12).ln();
        }
        let gt_c = gt.clone();
        self.push(
            Tensor::scalar(acc / n),
            vec![prob],
            Some(Box::new(move |g, p, _| {
                let g0 = g.item();
                vec![p[0].zip_map(&gt_c, |pv, t| {
                    let pt = if t > 0.5 { pv } else { 1.0 - pv };
                    let at = if t > 0.5 { alpha } else { 1.0 - alpha };
                    let pts = pt.max(1e-12);
                    let dpt = if gamma == 0.0 {
                        -at / pts
                    } else {
                        -at * (-gamma * (1.0 - pt).powf(gamma - 1.0) * pts.ln()
                            + (1.0 - pt).powf(gamma) / pts)
                    };
                    let sign = if t > 0.5 { 1.0 } else { -1.0 };
                    g0 * dpt * sign / n
                })]
            })),
        )
    }

    /// Mean focal loss straight from logits. Equivalent to
    /// `focal_loss_mean(sigmoid(z), ..)` but evaluated in log space, so both
    /// the value and the gradient stay bounded at saturated logits.
    pub fn focal_loss_logits_mean(
        &mut self,
        logits: Var,
        gt: &Tensor,
        gamma: f64,
        alpha: f64,
    ) -> Var {
        let zv = self.value(logits);
        assert_eq!(zv.shape(), gt.shape(), "focal gt shape mismatch");
        let n = zv.numel() as f64;
        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let mut acc = 0.0;
        for (&z, &t) in zv.data().iter().zip(gt.data()) {
            let (zt, at) = if t > 0.5 { (z, alpha) } else { (-z, 1.0 - alpha) };
            // pt = sigmoid(zt); ln pt = -softplus(-zt); 1-pt = sigmoid(-zt)
            let one_minus_pt = sigmoid(-zt);
            acc += at * one_minus_pt.powf(gamma) * softplus(-zt);
        }
        let gt_c = gt.clone();
        self.push(
            Tensor::scalar(acc / n),
            vec![logits],
            Some(Box::new(move |g, p, _| {
                let g0 = g.item();
                vec![p[0].zip_map(&gt_c, |z, t| {
                    let (zt, at, sign) = if t > 0.5 {
                        (z, alpha, 1.0)
                    } else {
                        (-z, 1.0 - alpha, -1.0)
                    };
                    let pt = sigmoid(zt);
                    let one_minus_pt = sigmoid(-zt);
                    let ln_pt = -(( -zt).max(0.0) + (-zt.abs()).exp().ln_1p());
                    let d = -at * one_minus_pt.powf(gamma)
                        * (one_minus_pt - gamma * pt * ln_pt);
                    g0 * sign * d / n
                })]
            })),
        )
    }

    /// Soft dice loss 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps).
    pub fn dice_loss(&mut self, prob: Var, gt: &Tensor, eps: f64) -> Var {
        let pv = self.value(prob);
        assert_eq!(pv.shape(), gt.shape(), "dice gt shape mismatch");
        let inter: f64 = pv.data().iter().zip(gt.data()).map(|(&p, &g)| p * g).sum();
        let psum: f64 = pv.data().iter().sum();
        let gsum: f64 = gt.data().iter().sum();
        let denom = psum + gsum + eps;
        let value = 1.0 - (2.0 * inter + eps) / denom;
        let gt_c = gt.clone();
        self.push(
            Tensor::scalar(value),
            vec![prob],
            Some(Box::new(move |g, _, _| {
                let g0 = g.item();
                let num = 2.0 * inter + eps;
                vec![gt_c.map(|t| g0 * -(2.0 * t * denom - num) / (denom * denom))]
            })),
        )
    }
}

/// Per-axis (i0, i1, t) interpolation table with half-pixel centers.
fn interp_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
