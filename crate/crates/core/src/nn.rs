//! Shared network building blocks: linear layers, attention, MLPs, and the
//! fixed sinusoidal positional encoding.

use crate::params::{Binding, Ownership, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fan-in scaled init keeps activations O(1) through the whole stack, which
/// lets the paper's small learning rate make visible progress from scratch.
pub fn fan_in_std(fan_in: usize) -> f64 {
    (1.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
        ownership: Ownership,
    ) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            Tensor::gaussian(vec![in_dim, out_dim], fan_in_std(in_dim), rng),
            ownership,
        );
        let b = store.register(
            &format!("{name}.b"),
            Tensor::zeros(vec![out_dim]),
            ownership,
        );
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Var) -> Var {
        let w = bind.var(tape, store, self.w);
        let b = bind.var(tape, store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row_broadcast(y, b)
    }
}

/// Scaled dot-product attention with learned q/k/v/out projections. With all
/// projections at identity this reduces to the bare softmax(QK^T/sqrt(d))V
/// form; with zero value weights it contributes nothing.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
        ownership: Ownership,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide dim");
        Self {
            wq: Linear::init(store, &format!("{name}.q"), dim, dim, rng, ownership),
            wk: Linear::init(store, &format!("{name}.k"), dim, dim, rng, ownership),
            wv: Linear::init(store, &format!("{name}.v"), dim, dim, rng, ownership),
            wo: Linear::init(store, &format!("{name}.out"), dim, dim, rng, ownership),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Var {
        let q = self.wq.forward(tape, store, bind, q_in);
        let k = self.wk.forward(tape, store, bind, k_in);
        let v = self.wv.forward(tape, store, bind, v_in);
        let dh = self.dim / self.heads;
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scaled);
            head_outs.push(tape.matmul(attn, vh));
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)
        };
        self.wo.forward(tape, store, bind, merged)
    }
}

/// Two-layer MLP with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut Rng,
        ownership: Ownership,
    ) -> Self {
        Self {
            fc1: Linear::init(store, &format!("{name}.fc1"), in_dim, hidden, rng, ownership),
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, out_dim, rng, ownership),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Var) -> Var {
        let h = self.fc1.forward(tape, store, bind, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, bind, h)
    }
}

/// LayerNorm gain/bias pair.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, ownership: Ownership) -> Self {
        Self {
            gain: store.register(
                &format!("{name}.gain"),
                Tensor::full(vec![dim], 1.0),
                ownership,
            ),
            bias: store.register(&format!("{name}.bias"), Tensor::zeros(vec![dim]), ownership),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Var) -> Var {
        let g = bind.var(tape, store, self.gain);
        let b = bind.var(tape, store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Fixed 2-D sinusoidal positional encoding over an (ht, wt) grid, [N, d].
/// The first d/2 channels encode the row coordinate, the rest the column.
pub fn positional_encoding(ht: usize, wt: usize, d: usize) -> Tensor {
    assert!(d % 4 == 0, "positional encoding needs dim divisible by 4");
    let quarter = d / 4;
    let n = ht * wt;
    let mut out = Tensor::zeros(vec![n, d]);
    for r in 0..ht {
        for c in 0..wt {
            let tok = r * wt + c;
            for i in 0..quarter {
                let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                let row = &mut out.data_mut()[tok * d..(tok + 1) * d];
                row[2 * i] = (r as f64 * omega).sin();
                row[2 * i + 1] = (r as f64 * omega).cos();
                row[d / 2 + 2 * i] = (c as f64 * omega).sin();
                row[d / 2 + 2 * i + 1] = (c as f64 * omega).cos();
            }
        }
    }
    out
}
