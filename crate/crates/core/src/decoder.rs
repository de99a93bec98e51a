//! Domain-query decoder.
//!
//! The gated self-prompt is broadcast-added onto the final image embedding,
//! then two decoder blocks alternate attention between a per-domain query
//! array and the hint-enhanced embedding. The embedding is upscaled 4x by two
//! transposed convolutions while the query is pooled and projected to the
//! upscaled channel width; their per-pixel dot product, bilinearly resized to
//! the input resolution, is the mask logit map.
//!
//! The bare attention updates
//!
//! ```text
//! q <- softmax(q (f+psi)^T / sqrt(d)) f + q
//! f <- softmax((f+psi) q^T / sqrt(d)) q + f
//! ```
//!
//! are exposed as standalone operations; the decoder blocks wrap the same
//! form with learned q/k/v/out projections (identity projections recover the
//! bare form, zero value weights make a block a no-op).

use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Attention, Mlp, Norm};
use crate::params::{Binding, Ownership, ParamId, ParamStore};
use crate::rng::Rng;
use crate::spgen::SelfPrompt;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::types::TokenGrid;

/// Mask logits at the input image resolution.
#[derive(Debug, Clone)]
pub struct DecodedMask {
    pub logits: Tensor,
}

impl DecodedMask {
    pub fn probability(&self) -> Tensor {
        self.logits.map(crate::tape::sigmoid)
    }
}

/// Which domain query drives a decode.
pub enum QuerySelect<'a> {
    Domain(usize),
    Custom(&'a Tensor),
}

// ---- bare attention operations ----

/// Hint fusion: f = h_L + g_hat, the per-token gate broadcast across channels.
pub fn fuse_prompt_t(tape: &mut Tape, h_l: Var, g_hat: Var) -> Var {
    tape.add_col_broadcast(h_l, g_hat)
}

pub fn fuse_prompt(h_l: &TokenGrid, prompt: &SelfPrompt) -> Result<TokenGrid> {
    if h_l.tokens() != prompt.g_hat.numel() {
        return Err(Error::Shape(format!(
            "{} tokens vs {} prompt entries",
            h_l.tokens(),
            prompt.g_hat.numel()
        )));
    }
    let mut tape = Tape::new();
    let h = tape.leaf(h_l.data().clone());
    let g = tape.leaf(prompt.g_hat.clone());
    let f = fuse_prompt_t(&mut tape, h, g);
    TokenGrid::new(tape.value(f).clone(), h_l.grid())
}

/// q' = softmax(q (f+psi)^T / sqrt(d)) f + q
pub fn query_to_image_attention_t(tape: &mut Tape, q: Var, f: Var, psi: Var) -> Var {
    let d = tape.value(q).dims2().1;
    let keys = tape.add(f, psi);
    let kt = tape.transpose(keys);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, f);
    tape.add(mixed, q)
}

/// f' = softmax((f+psi) q^T / sqrt(d)) q + f
pub fn image_to_query_attention_t(tape: &mut Tape, f: Var, q: Var, psi: Var) -> Var {
    let d = tape.value(f).dims2().1;
    let queries = tape.add(f, psi);
    let qt = tape.transpose(q);
    let scores = tape.matmul(queries, qt);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, q);
    tape.add(mixed, f)
}

fn check_same_2d(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn query_to_image_attention(q: &Tensor, f: &Tensor, psi: &Tensor) -> Result<Tensor> {
    check_same_2d(q, f, "query/image shapes")?;
    check_same_2d(f, psi, "image/positional shapes")?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let fv = tape.leaf(f.clone());
    let pv = tape.leaf(psi.clone());
    let out = query_to_image_attention_t(&mut tape, qv, fv, pv);
    Ok(tape.value(out).clone())
}

pub fn image_to_query_attention(f: &Tensor, q: &Tensor, psi: &Tensor) -> Result<Tensor> {
    check_same_2d(f, q, "image/query shapes")?;
    check_same_2d(f, psi, "image/positional shapes")?;
    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let qv = tape.leaf(q.clone());
    let pv = tape.leaf(psi.clone());
    let out = image_to_query_attention_t(&mut tape, fv, qv, pv);
    Ok(tape.value(out).clone())
}

// ---- decoder ----

struct DecBlock {
    self_attn: Attention,
    cross_q2i: Attention,
    mlp_norm: Norm,
    mlp: Mlp,
    cross_i2q: Attention,
}

struct ConvT {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderCfg {
    pub dim: usize,
    pub heads: usize,
    pub tokens: usize,
    pub grid: (usize, usize),
    pub domain_slots: usize,
    /// Decoder blocks run in sequence (two, following the SAM recipe).
    pub blocks: usize,
}

pub struct Decoder {
    pub cfg: DecoderCfg,
    queries: Vec<ParamId>,
    blocks: Vec<DecBlock>,
    final_mlp: Mlp,
    up1: ConvT,
    up2: ConvT,
}

impl Decoder {
    pub fn init(store: &mut ParamStore, cfg: DecoderCfg, rng: &mut Rng) -> Self {
        assert!(cfg.dim % 4 == 0, "decoder needs dim divisible by 4");
        let d = cfg.dim;
        let queries = (0..cfg.domain_slots)
            .map(|k| {
                store.register(
                    &format!("decoder.query{k}"),
                    Tensor::gaussian(vec![cfg.tokens, d], 1.0, rng),
                    if cfg.domain_slots == 1 {
                        Ownership::Shared
                    } else {
                        Ownership::DomainSpecific(k)
                    },
                )
            })
            .collect();
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = format!("decoder.block{i}");
                DecBlock {
                    self_attn: Attention::init(
                        store,
                        &format!("{p}.self"),
                        d,
                        cfg.heads,
                        rng,
                        Ownership::Shared,
                    ),
                    cross_q2i: Attention::init(
                        store,
                        &format!("{p}.q2i"),
                        d,
                        cfg.heads,
                        rng,
                        Ownership::Shared,
                    ),
                    mlp_norm: Norm::init(store, &format!("{p}.mlp_norm"), d, Ownership::Shared),
                    mlp: Mlp::init(store, &format!("{p}.mlp"), d, 2 * d, d, rng, Ownership::Shared),
                    cross_i2q: Attention::init(
                        store,
                        &format!("{p}.i2q"),
                        d,
                        cfg.heads,
                        rng,
                        Ownership::Shared,
                    ),
                }
            })
            .collect();
        let final_mlp = Mlp::init(
            store,
            "decoder.final_mlp",
            d,
            d,
            d / 4,
            rng,
            Ownership::Shared,
        );
        // zero the readout projection: mask logits start at exactly zero, so
        // no pixel is wrongly saturated before training has said anything
        *store.value_mut(final_mlp.fc2.w) = Tensor::zeros(vec![d, d / 4]);
        let up1 = ConvT {
            w: store.register(
                "decoder.up1.w",
                Tensor::gaussian(vec![d, d / 2, 2, 2], crate::nn::fan_in_std(d), rng),
                Ownership::Shared,
            ),
            b: store.register(
                "decoder.up1.b",
                Tensor::zeros(vec![d / 2]),
                Ownership::Shared,
            ),
        };
        let up2 = ConvT {
            w: store.register(
                "decoder.up2.w",
                Tensor::gaussian(vec![d / 2, d / 4, 2, 2], crate::nn::fan_in_std(d / 2), rng),
                Ownership::Shared,
            ),
            b: store.register(
                "decoder.up2.b",
                Tensor::zeros(vec![d / 4]),
                Ownership::Shared,
            ),
        };
        Self {
            cfg,
            queries,
            blocks,
            final_mlp,
            up1,
            up2,
        }
    }

    pub fn slot_for(&self, domain_id: usize) -> usize {
        if self.cfg.domain_slots == 1 {
            0
        } else {
            domain_id
        }
    }

    fn check_slot(&self, slot: usize) -> Result<()> {
        if slot < self.cfg.domain_slots {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "query slot {slot} outside {} slots",
                self.cfg.domain_slots
            )))
        }
    }

    pub fn query_id(&self, slot: usize) -> ParamId {
        self.queries[slot]
    }

    pub fn positional(&self) -> Tensor {
        positional_encoding(self.cfg.grid.0, self.cfg.grid.1, self.cfg.dim)
    }

    /// One decoder block: query self-attention, query-to-image cross
    /// attention, query MLP, then image-to-query cross attention, each with a
    /// residual, in exactly that order.
    pub fn block_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        idx: usize,
        q: Var,
        f: Var,
        psi: Var,
    ) -> (Var, Var) {
        let blk = &self.blocks[idx];
        let sa = blk.self_attn.forward(tape, store, bind, q, q, q);
        let q = tape.add(q, sa);
        let keys = tape.add(f, psi);
        let ca = blk.cross_q2i.forward(tape, store, bind, q, keys, f);
        let q = tape.add(q, ca);
        let normed = blk.mlp_norm.forward(tape, store, bind, q);
        let mlp_out = blk.mlp.forward(tape, store, bind, normed);
        let q = tape.add(q, mlp_out);
        let img_queries = tape.add(f, psi);
        let ca2 = blk.cross_i2q.forward(tape, store, bind, img_queries, q, q);
        let f = tape.add(f, ca2);
        (q, f)
    }

    /// 4x spatial upscale: two stride-2 transposed convs halving channels,
    /// with an activation between them. [N,d] tokens -> [d/4, 4ht, 4wt].
    pub fn upscale_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        f: Var,
    ) -> Var {
        let (ht, wt) = self.cfg.grid;
        let chw = tape.tokens_to_chw(f, ht, wt);
        let w1 = bind.var(tape, store, self.up1.w);
        let b1 = bind.var(tape, store, self.up1.b);
        let x = tape.conv_transpose2d(chw, w1, b1, 2);
        let x = tape.gelu(x);
        let w2 = bind.var(tape, store, self.up2.w);
        let b2 = bind.var(tape, store, self.up2.b);
        tape.conv_transpose2d(x, w2, b2, 2)
    }

    /// Final query update: one bare query-to-image attention, mean pooling
    /// over the query rows, then an MLP down to the upscaled channel width.
    pub fn final_query_update_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        q: Var,
        f: Var,
        psi: Var,
    ) -> Var {
        let q = query_to_image_attention_t(tape, q, f, psi);
        let pooled = tape.mean_rows(q);
        let row = tape.reshape(pooled, vec![1, self.cfg.dim]);
        let out = self.final_mlp.forward(tape, store, bind, row);
        tape.reshape(out, vec![self.cfg.dim / 4])
    }

    /// Mask logits: per-pixel channel dot product, bilinearly resized to the
    /// requested output resolution.
    pub fn predict_mask_t(
        &self,
        tape: &mut Tape,
        upscaled: Var,
        q_out: Var,
        out_hw: (usize, usize),
    ) -> Var {
        let dot = tape.channel_dot(upscaled, q_out);
        let (h, w) = tape.value(dot).dims2();
        let as_chw = tape.reshape(dot, vec![1, h, w]);
        let resized = tape.bilinear_resize(as_chw, out_hw.0, out_hw.1);
        tape.reshape(resized, vec![out_hw.0, out_hw.1])
    }

    /// Full decode on an existing tape.
    pub fn decode_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        h_l: Var,
        g_hat: Var,
        query: &QuerySelect,
        out_hw: (usize, usize),
    ) -> Var {
        let psi = tape.leaf(self.positional());
        let mut q = match query {
            QuerySelect::Domain(slot) => bind.var(tape, store, self.queries[*slot]),
            QuerySelect::Custom(t) => tape.leaf((*t).clone()),
        };
        let mut f = fuse_prompt_t(tape, h_l, g_hat);
        for i in 0..self.blocks.len() {
            let (q2, f2) = self.block_t(tape, store, bind, i, q, f, psi);
            q = q2;
            f = f2;
        }
        let upscaled = self.upscale_t(tape, store, bind, f);
        let q_out = self.final_query_update_t(tape, store, bind, q, f, psi);
        self.predict_mask_t(tape, upscaled, q_out, out_hw)
    }

    // ---- plain operation surface ----

    pub fn decoder_block(
        &self,
        store: &ParamStore,
        idx: usize,
        q: &Tensor,
        f: &Tensor,
        psi: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        check_same_2d(q, f, "query/image shapes")?;
        check_same_2d(f, psi, "image/positional shapes")?;
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let qv = tape.leaf(q.clone());
        let fv = tape.leaf(f.clone());
        let pv = tape.leaf(psi.clone());
        let (q2, f2) = self.block_t(&mut tape, store, &mut bind, idx, qv, fv, pv);
        Ok((tape.value(q2).clone(), tape.value(f2).clone()))
    }

    pub fn upscale(&self, store: &ParamStore, f: &TokenGrid) -> Result<Tensor> {
        if f.grid() != self.cfg.grid || f.dim() != self.cfg.dim {
            return Err(Error::Shape(format!(
                "token grid {:?}x{} does not match decoder {:?}x{}",
                f.grid(),
                f.dim(),
                self.cfg.grid,
                self.cfg.dim
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let fv = tape.leaf(f.data().clone());
        let out = self.upscale_t(&mut tape, store, &mut bind, fv);
        Ok(tape.value(out).clone())
    }

    pub fn final_query_update(
        &self,
        store: &ParamStore,
        q: &Tensor,
        f: &Tensor,
        psi: &Tensor,
    ) -> Result<Tensor> {
        check_same_2d(q, f, "query/image shapes")?;
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let qv = tape.leaf(q.clone());
        let fv = tape.leaf(f.clone());
        let pv = tape.leaf(psi.clone());
        let out = self.final_query_update_t(&mut tape, store, &mut bind, qv, fv, pv);
        Ok(tape.value(out).clone())
    }

    pub fn predict_mask(
        &self,
        upscaled: &Tensor,
        q_out: &Tensor,
        out_hw: (usize, usize),
    ) -> Result<DecodedMask> {
        let (c, _, _) = upscaled.dims3();
        if q_out.shape() != [c] {
            return Err(Error::Shape(format!(
                "{c}-channel map vs {:?} query vector",
                q_out.shape()
            )));
        }
        let mut tape = Tape::new();
        let f = tape.leaf(upscaled.clone());
        let q = tape.leaf(q_out.clone());
        let out = self.predict_mask_t(&mut tape, f, q, out_hw);
        Ok(DecodedMask {
            logits: tape.value(out).clone(),
        })
    }

    pub fn decode(
        &self,
        store: &ParamStore,
        h_l: &TokenGrid,
        prompt: &SelfPrompt,
        slot: usize,
        out_hw: (usize, usize),
    ) -> Result<DecodedMask> {
        self.check_slot(slot)?;
        self.decode_select(store, h_l, prompt, &QuerySelect::Domain(slot), out_hw)
    }

    pub fn decode_with_query(
        &self,
        store: &ParamStore,
        h_l: &TokenGrid,
        prompt: &SelfPrompt,
        query: &Tensor,
        out_hw: (usize, usize),
    ) -> Result<DecodedMask> {
        self.decode_select(store, h_l, prompt, &QuerySelect::Custom(query), out_hw)
    }

    fn decode_select(
        &self,
        store: &ParamStore,
        h_l: &TokenGrid,
        prompt: &SelfPrompt,
        query: &QuerySelect,
        out_hw: (usize, usize),
    ) -> Result<DecodedMask> {
        if h_l.grid() != self.cfg.grid || h_l.dim() != self.cfg.dim {
            return Err(Error::Shape(format!(
                "embedding {:?}x{} does not match decoder {:?}x{}",
                h_l.grid(),
                h_l.dim(),
                self.cfg.grid,
                self.cfg.dim
            )));
        }
        if prompt.g_hat.numel() != h_l.tokens() {
            return Err(Error::Shape("prompt/token count mismatch".into()));
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let h = tape.leaf(h_l.data().clone());
        let g = tape.leaf(prompt.g_hat.clone());
        let out = self.decode_t(&mut tape, store, &mut bind, h, g, query, out_hw);
        Ok(DecodedMask {
            logits: tape.value(out).clone(),
        })
    }

    /// Effective query tensor for an inference strategy over trained slots.
    pub fn select_query(
        &self,
        store: &ParamStore,
        strategy: crate::config::AdapterStrategy,
        specified: Option<usize>,
        trained: &[usize],
    ) -> Result<Tensor> {
        use crate::config::AdapterStrategy as S;
        if trained.is_empty() {
            return Err(Error::Domain("no trained domains to select from".into()));
        }
        match strategy {
            S::Specified => {
                let k = specified
                    .ok_or_else(|| Error::Domain("strategy `specified` needs a domain id".into()))?;
                if !trained.contains(&k) {
                    return Err(Error::Domain(format!("domain {k} has not been trained")));
                }
                Ok(store.value(self.queries[self.slot_for(k)]).clone())
            }
            S::Mean => {
                let mut acc = store.value(self.queries[self.slot_for(trained[0])]).clone();
                for &k in &trained[1..] {
                    acc.add_assign(store.value(self.queries[self.slot_for(k)]));
                }
                Ok(acc.scale(1.0 / trained.len() as f64))
            }
            S::Last => Ok(store
                .value(self.queries[self.slot_for(*trained.last().expect("nonempty"))])
                .clone()),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.queries.clone();
        for b in &self.blocks {
            for a in [&b.self_attn, &b.cross_q2i, &b.cross_i2q] {
                ids.extend([a.wq.w, a.wq.b, a.wk.w, a.wk.b, a.wv.w, a.wv.b, a.wo.w, a.wo.b]);
            }
            ids.extend([b.mlp_norm.gain, b.mlp_norm.bias]);
            ids.extend([b.mlp.fc1.w, b.mlp.fc1.b, b.mlp.fc2.w, b.mlp.fc2.b]);
        }
        ids.extend([
            self.final_mlp.fc1.w,
            self.final_mlp.fc1.b,
            self.final_mlp.fc2.w,
            self.final_mlp.fc2.b,
        ]);
        ids.extend([self.up1.w, self.up1.b, self.up2.w, self.up2.b]);
        ids
    }

    /// Ids of every value-projection weight plus MLP weights (test hook for
    /// the zero-weight no-op property).
    pub fn zeroing_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend([b.self_attn.wv.w, b.cross_q2i.wv.w, b.cross_i2q.wv.w]);
            ids.extend([b.mlp.fc1.w, b.mlp.fc2.w]);
        }
        ids
    }
}
