//! Domain-adaptive encoder: a ViT-style backbone whose weights stay frozen,
//! with a trainable low-rank bypass per transformer layer.
//!
//! The bypass composes a shared down-projection (domain-common, d -> r) with a
//! per-domain up-projection (r -> d) and is added to the block output after
//! the attention residual:
//!
//! ```text
//! h_attn = h + MSA(LN(h))
//! out    = h_attn + MLP(LN(h_attn)) + (h_attn . w_common) . w_spec[k]
//! ```
//!
//! Up-projections start at zero, so a freshly initialized bypass leaves the
//! backbone function untouched for every domain. The common half is a single
//! continuously trained tensor per layer: crossing a domain boundary hands the
//! next domain exactly the values the previous domain ended with, which is the
//! inheritance rule [`Encoder::inherit_common`] makes explicit. The per-domain
//! halves never receive gradients from other domains' batches.

use crate::config::{AdapterStrategy, RunConfig};
use crate::error::{Error, Result};
use crate::nn::{fan_in_std, Attention, Mlp, Norm};
use crate::params::{Binding, Ownership, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::types::TokenGrid;

/// Structural dimensions of the encoder, decoupled from file-level config so
/// tests can build arbitrarily small instances.
#[derive(Debug, Clone)]
pub struct EncoderCfg {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub adapter_rank: usize,
    /// Number of per-domain adapter slots (1 when domains share one adapter).
    pub domain_slots: usize,
}

impl EncoderCfg {
    pub fn from_run(cfg: &RunConfig, domains: usize) -> Self {
        Self {
            depth: cfg.depth,
            dim: cfg.dim,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            patch_size: cfg.patch_size,
            in_channels: cfg.in_channels,
            image_size: cfg.image_size,
            adapter_rank: cfg.adapter_rank,
            domain_slots: if cfg.shared_domain_params { 1 } else { domains },
        }
    }

    pub fn token_grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn tokens(&self) -> usize {
        let (ht, wt) = self.token_grid();
        ht * wt
    }
}

struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    mlp: Mlp,
    /// Domain-common down-projection [d, r].
    w_common: ParamId,
    /// Domain-specific up-projections, one [r, d] per slot.
    w_spec: Vec<ParamId>,
}

/// Per-layer outputs of a full encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub per_layer: Vec<TokenGrid>,
    pub final_: TokenGrid,
}

/// Which bypass up-projection a forward pass should use.
pub enum BypassSelect<'a> {
    /// A trained domain slot.
    Domain(usize),
    /// Externally supplied per-layer up-projection tensors (zero-shot).
    Custom(&'a [Tensor]),
}

pub struct Encoder {
    pub cfg: EncoderCfg,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, cfg: EncoderCfg, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        let patch_cols = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        let patch_w = store.register(
            "encoder.patch.w",
            Tensor::gaussian(vec![patch_cols, d], fan_in_std(patch_cols), rng),
            Ownership::Frozen,
        );
        let patch_b = store.register(
            "encoder.patch.b",
            Tensor::zeros(vec![d]),
            Ownership::Frozen,
        );
        let pos = store.register(
            "encoder.pos",
            Tensor::gaussian(vec![cfg.tokens(), d], 0.25, rng),
            Ownership::Frozen,
        );
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("encoder.layer{l}");
            let ln1 = Norm::init(store, &format!("{p}.ln1"), d, Ownership::Frozen);
            let attn = Attention::init(
                store,
                &format!("{p}.attn"),
                d,
                cfg.heads,
                rng,
                Ownership::Frozen,
            );
            let ln2 = Norm::init(store, &format!("{p}.ln2"), d, Ownership::Frozen);
            let mlp = Mlp::init(
                store,
                &format!("{p}.mlp"),
                d,
                d * cfg.mlp_ratio,
                d,
                rng,
                Ownership::Frozen,
            );
            let w_common = store.register(
                &format!("{p}.bypass.common"),
                Tensor::gaussian(vec![d, cfg.adapter_rank], 0.02, rng),
                Ownership::Shared,
            );
            let w_spec = (0..cfg.domain_slots)
                .map(|k| {
                    store.register(
                        &format!("{p}.bypass.spec{k}"),
                        Tensor::zeros(vec![cfg.adapter_rank, d]),
                        if cfg.domain_slots == 1 {
                            Ownership::Shared
                        } else {
                            Ownership::DomainSpecific(k)
                        },
                    )
                })
                .collect();
            layers.push(EncoderLayer {
                ln1,
                attn,
                ln2,
                mlp,
                w_common,
                w_spec,
            });
        }
        Self {
            cfg,
            patch_w,
            patch_b,
            pos,
            layers,
        }
    }

    /// Adapter slot for a registry domain id (collapses to 0 when shared).
    pub fn slot_for(&self, domain_id: usize) -> usize {
        if self.cfg.domain_slots == 1 {
            0
        } else {
            domain_id
        }
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < self.layers.len() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "layer {layer} outside encoder depth {}",
                self.layers.len()
            )))
        }
    }

    fn check_slot(&self, slot: usize) -> Result<()> {
        if slot < self.cfg.domain_slots {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "domain slot {slot} outside {} slots",
                self.cfg.domain_slots
            )))
        }
    }

    // ---- tape forward pieces ----

    pub fn patch_embed_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        image: Var,
    ) -> Var {
        let patches = tape.patchify(image, self.cfg.patch_size);
        let w = bind.var(tape, store, self.patch_w);
        let b = bind.var(tape, store, self.patch_b);
        let proj = tape.matmul(patches, w);
        tape.add_row_broadcast(proj, b)
    }

    pub fn bypass_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        h_attn: Var,
        layer: usize,
        select: &BypassSelect,
    ) -> Var {
        let common = bind.var(tape, store, self.layers[layer].w_common);
        let up = match select {
            BypassSelect::Domain(slot) => bind.var(tape, store, self.layers[layer].w_spec[*slot]),
            BypassSelect::Custom(ws) => tape.leaf(ws[layer].clone()),
        };
        let down = tape.matmul(h_attn, common);
        tape.matmul(down, up)
    }

    pub fn layer_forward_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        h: Var,
        layer: usize,
        select: &BypassSelect,
    ) -> Var {
        let lyr = &self.layers[layer];
        let normed = lyr.ln1.forward(tape, store, bind, h);
        let attn_out = lyr.attn.forward(tape, store, bind, normed, normed, normed);
        let h_attn = tape.add(h, attn_out);
        let normed2 = lyr.ln2.forward(tape, store, bind, h_attn);
        let mlp_out = lyr.mlp.forward(tape, store, bind, normed2);
        let bypass = self.bypass_t(tape, store, bind, h_attn, layer, select);
        let with_mlp = tape.add(h_attn, mlp_out);
        tape.add(with_mlp, bypass)
    }

    /// Full pass: patch embedding + positional table, then every layer.
    /// Returns all per-layer outputs (`h_1 .. h_L`).
    pub fn encode_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        image: Var,
        select: &BypassSelect,
    ) -> Vec<Var> {
        let tokens = self.patch_embed_t(tape, store, bind, image);
        let pos = bind.var(tape, store, self.pos);
        let mut h = tape.add(tokens, pos);
        let mut outs = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            h = self.layer_forward_t(tape, store, bind, h, l, select);
            outs.push(h);
        }
        outs
    }

    // ---- plain (non-tape) operation surface ----

    fn grid_of(&self) -> (usize, usize) {
        self.cfg.token_grid()
    }

    fn validate_image(&self, image: &Tensor) -> Result<()> {
        if image.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "image must be [C,H,W], got {:?}",
                image.shape()
            )));
        }
        let (c, h, w) = image.dims3();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % self.cfg.patch_size != 0 || w % self.cfg.patch_size != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} image not divisible by patch size {}",
                self.cfg.patch_size
            )));
        }
        Ok(())
    }

    pub fn patch_embed(&self, store: &ParamStore, image: &Tensor) -> Result<TokenGrid> {
        self.validate_image(image)?;
        let (_, h, w) = image.dims3();
        let grid = (h / self.cfg.patch_size, w / self.cfg.patch_size);
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let img = tape.leaf(image.clone());
        let out = self.patch_embed_t(&mut tape, store, &mut bind, img);
        TokenGrid::new(tape.value(out).clone(), grid)
    }

    pub fn domain_bypass(
        &self,
        store: &ParamStore,
        h_attn: &TokenGrid,
        layer: usize,
        domain_slot: usize,
    ) -> Result<TokenGrid> {
        self.check_layer(layer)?;
        self.check_slot(domain_slot)?;
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let h = tape.leaf(h_attn.data().clone());
        let out = self.bypass_t(
            &mut tape,
            store,
            &mut bind,
            h,
            layer,
            &BypassSelect::Domain(domain_slot),
        );
        TokenGrid::new(tape.value(out).clone(), h_attn.grid())
    }

    pub fn layer_forward(
        &self,
        store: &ParamStore,
        h: &TokenGrid,
        layer: usize,
        domain_slot: usize,
    ) -> Result<TokenGrid> {
        self.check_layer(layer)?;
        self.check_slot(domain_slot)?;
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let hv = tape.leaf(h.data().clone());
        let out = self.layer_forward_t(
            &mut tape,
            store,
            &mut bind,
            hv,
            layer,
            &BypassSelect::Domain(domain_slot),
        );
        TokenGrid::new(tape.value(out).clone(), h.grid())
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        image: &Tensor,
        domain_slot: usize,
    ) -> Result<EncoderOutput> {
        self.check_slot(domain_slot)?;
        self.encode_select(store, image, &BypassSelect::Domain(domain_slot))
    }

    /// Encode with externally selected bypass weights (zero-shot path).
    pub fn encode_with_weights(
        &self,
        store: &ParamStore,
        image: &Tensor,
        weights: &[Tensor],
    ) -> Result<EncoderOutput> {
        if weights.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} bypass tensors for {} layers",
                weights.len(),
                self.layers.len()
            )));
        }
        self.encode_select(store, image, &BypassSelect::Custom(weights))
    }

    fn encode_select(
        &self,
        store: &ParamStore,
        image: &Tensor,
        select: &BypassSelect,
    ) -> Result<EncoderOutput> {
        self.validate_image(image)?;
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let img = tape.leaf(image.clone());
        let outs = self.encode_t(&mut tape, store, &mut bind, img, select);
        let grid = self.grid_of();
        let per_layer: Result<Vec<TokenGrid>> = outs
            .iter()
            .map(|&v| TokenGrid::new(tape.value(v).clone(), grid))
            .collect();
        let per_layer = per_layer?;
        let final_ = per_layer.last().expect("depth >= 1").clone();
        Ok(EncoderOutput { per_layer, final_ })
    }

    /// Domain-boundary inheritance: the common embeddings entering the next
    /// domain are exactly those the finished domain ended with. The common
    /// half lives in a single slot, so this is the identity copy; it exists
    /// to mark (and validate) the boundary explicitly.
    pub fn inherit_common(&self, store: &mut ParamStore, from_domain: usize) -> Result<()> {
        self.check_slot(self.slot_for(from_domain).min(self.cfg.domain_slots - 1))?;
        for lyr in &self.layers {
            let v = store.value(lyr.w_common).clone();
            *store.value_mut(lyr.w_common) = v;
        }
        Ok(())
    }

    /// Current per-layer common tensors, for boundary audits.
    pub fn common_snapshot(&self, store: &ParamStore) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| store.value(l.w_common).clone())
            .collect()
    }

    /// Per-layer up-projection tensors for one slot.
    pub fn spec_snapshot(&self, store: &ParamStore, slot: usize) -> Result<Vec<Tensor>> {
        self.check_slot(slot)?;
        Ok(self
            .layers
            .iter()
            .map(|l| store.value(l.w_spec[slot]).clone())
            .collect())
    }

    /// Effective per-layer up-projection tensors for an inference strategy
    /// over the trained slots.
    pub fn select_inference_adapter(
        &self,
        store: &ParamStore,
        strategy: AdapterStrategy,
        specified: Option<usize>,
        trained: &[usize],
    ) -> Result<Vec<Tensor>> {
        if trained.is_empty() {
            return Err(Error::Domain("no trained domains to select from".into()));
        }
        match strategy {
            AdapterStrategy::Specified => {
                let k = specified
                    .ok_or_else(|| Error::Domain("strategy `specified` needs a domain id".into()))?;
                if !trained.contains(&k) {
                    return Err(Error::Domain(format!("domain {k} has not been trained")));
                }
                self.spec_snapshot(store, self.slot_for(k))
            }
            AdapterStrategy::Mean => {
                let mut acc = self.spec_snapshot(store, self.slot_for(trained[0]))?;
                for &k in &trained[1..] {
                    let next = self.spec_snapshot(store, self.slot_for(k))?;
                    for (a, b) in acc.iter_mut().zip(next.iter()) {
                        a.add_assign(b);
                    }
                }
                let scale = 1.0 / trained.len() as f64;
                Ok(acc.into_iter().map(|t| t.scale(scale)).collect())
            }
            AdapterStrategy::Last => {
                self.spec_snapshot(store, self.slot_for(*trained.last().expect("nonempty")))
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos];
        for l in &self.layers {
            ids.extend([l.ln1.gain, l.ln1.bias]);
            ids.extend([
                l.attn.wq.w, l.attn.wq.b, l.attn.wk.w, l.attn.wk.b,
                l.attn.wv.w, l.attn.wv.b, l.attn.wo.w, l.attn.wo.b,
            ]);
            ids.extend([l.ln2.gain, l.ln2.bias]);
            ids.extend([l.mlp.fc1.w, l.mlp.fc1.b, l.mlp.fc2.w, l.mlp.fc2.b]);
            ids.push(l.w_common);
            ids.extend(l.w_spec.iter().copied());
        }
        ids
    }

    /// The common tensor id of one layer (test/audit hook).
    pub fn common_id(&self, layer: usize) -> ParamId {
        self.layers[layer].w_common
    }

    /// A specific slot's up-projection id of one layer (test/audit hook).
    pub fn spec_id(&self, layer: usize, slot: usize) -> ParamId {
        self.layers[layer].w_spec[slot]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(slots: usize) -> EncoderCfg {
        EncoderCfg {
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 2,
            in_channels: 1,
            image_size: 4,
            adapter_rank: 2,
            domain_slots: slots,
        }
    }

    fn build(slots: usize, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let enc = Encoder::init(&mut store, tiny_cfg(slots), &mut rng);
        (store, enc)
    }

    #[test]
    fn patch_embed_shape_and_linearity() {
        let (store, enc) = build(1, 1);
        let img = Tensor::zeros(vec![1, 4, 4]);
        let tokens = enc.patch_embed(&store, &img).unwrap();
        assert_eq!(tokens.tokens(), 4);
        assert_eq!(tokens.grid(), (2, 2));
        // zero image through a zero-bias stem stays zero
        assert!(tokens.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_token_arithmetic_default_scale() {
        // 128x128 with patch 8 -> 256 tokens on a 16x16 grid
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let cfg = EncoderCfg {
            depth: 1,
            dim: 8,
            heads: 1,
            mlp_ratio: 1,
            patch_size: 8,
            in_channels: 3,
            image_size: 128,
            adapter_rank: 2,
            domain_slots: 1,
        };
        let enc = Encoder::init(&mut store, cfg, &mut rng);
        let img = Tensor::zeros(vec![3, 128, 128]);
        let tokens = enc.patch_embed(&store, &img).unwrap();
        assert_eq!(tokens.tokens(), 256);
        assert_eq!(tokens.grid(), (16, 16));
    }

    #[test]
    fn patch_embed_rejects_non_divisible() {
        let (store, enc) = build(1, 3);
        let img = Tensor::zeros(vec![1, 5, 4]);
        assert!(matches!(
            enc.patch_embed(&store, &img),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bypass_zero_init_is_zero() {
        let (store, enc) = build(2, 4);
        let mut rng = Rng::new(5);
        let h = TokenGrid::new(Tensor::gaussian(vec![4, 8], 1.0, &mut rng), (2, 2)).unwrap();
        let delta = enc.domain_bypass(&store, &h, 0, 0).unwrap();
        assert!(delta.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bypass_isolated_between_domains() {
        let (mut store, enc) = build(2, 6);
        let mut rng = Rng::new(7);
        *store.value_mut(enc.spec_id(0, 0)) = Tensor::gaussian(vec![2, 8], 0.5, &mut rng);
        let h = TokenGrid::new(Tensor::gaussian(vec![4, 8], 1.0, &mut rng), (2, 2)).unwrap();
        let before = enc.domain_bypass(&store, &h, 0, 0).unwrap();
        // perturbing the other domain's weights must not change domain 0
        *store.value_mut(enc.spec_id(0, 1)) = Tensor::gaussian(vec![2, 8], 0.9, &mut rng);
        let after = enc.domain_bypass(&store, &h, 0, 0).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn bypass_hand_matrix_example() {
        // d=2, r=1: (1,0) . [[1],[1]] = 1; 1 . [[2,3]] = (2,3)
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let cfg = EncoderCfg {
            depth: 1,
            dim: 2,
            heads: 1,
            mlp_ratio: 1,
            patch_size: 1,
            in_channels: 1,
            image_size: 1,
            adapter_rank: 1,
            domain_slots: 1,
        };
        let enc = Encoder::init(&mut store, cfg, &mut rng);
        *store.value_mut(enc.common_id(0)) = Tensor::new(vec![2, 1], vec![1.0, 1.0]);
        *store.value_mut(enc.spec_id(0, 0)) = Tensor::new(vec![1, 2], vec![2.0, 3.0]);
        let h = TokenGrid::new(Tensor::new(vec![1, 2], vec![1.0, 0.0]), (1, 1)).unwrap();
        let delta = enc.domain_bypass(&store, &h, 0, 0).unwrap();
        assert_eq!(delta.data().data(), &[2.0, 3.0]);
    }

    #[test]
    fn layer_forward_zero_init_matches_backbone() {
        let (mut store, enc) = build(2, 9);
        let mut rng = Rng::new(10);
        let h = TokenGrid::new(Tensor::gaussian(vec![4, 8], 1.0, &mut rng), (2, 2)).unwrap();
        let with_bypass = enc.layer_forward(&store, &h, 0, 0).unwrap();
        // zeroing the common half also kills the bypass entirely
        *store.value_mut(enc.common_id(0)) = Tensor::zeros(vec![8, 2]);
        let backbone_only = enc.layer_forward(&store, &h, 0, 0).unwrap();
        assert_eq!(with_bypass.data(), backbone_only.data());
        assert_eq!(with_bypass.data().shape(), h.data().shape());
    }

    #[test]
    fn encode_outputs_all_layers_and_is_deterministic() {
        let (store, enc) = build(2, 11);
        let mut rng = Rng::new(12);
        let img = Tensor::gaussian(vec![1, 4, 4], 1.0, &mut rng);
        let a = enc.encode(&store, &img, 0).unwrap();
        let b = enc.encode(&store, &img, 0).unwrap();
        assert_eq!(a.per_layer.len(), 2);
        assert_eq!(a.final_.data(), a.per_layer[1].data());
        assert_eq!(a.final_.data(), b.final_.data());
        // zero-init bypass: all domains encode identically
        let c = enc.encode(&store, &img, 1).unwrap();
        assert_eq!(a.final_.data(), c.final_.data());
    }

    #[test]
    fn inherit_common_is_bitwise_and_leaves_spec_untouched() {
        let (mut store, enc) = build(3, 13);
        let mut rng = Rng::new(14);
        *store.value_mut(enc.common_id(0)) = Tensor::gaussian(vec![8, 2], 0.3, &mut rng);
        *store.value_mut(enc.spec_id(0, 1)) = Tensor::gaussian(vec![2, 8], 0.3, &mut rng);
        let common_before = enc.common_snapshot(&store);
        let spec_before = enc.spec_snapshot(&store, 1).unwrap();
        enc.inherit_common(&mut store, 0).unwrap();
        assert_eq!(enc.common_snapshot(&store), common_before);
        assert_eq!(enc.spec_snapshot(&store, 1).unwrap(), spec_before);
    }

    #[test]
    fn adapter_selection_strategies() {
        let (mut store, enc) = build(3, 15);
        for slot in 0..3 {
            for l in 0..2 {
                *store.value_mut(enc.spec_id(l, slot)) =
                    Tensor::full(vec![2, 8], (slot + 1) as f64);
            }
        }
        let spec = enc
            .select_inference_adapter(&store, AdapterStrategy::Specified, Some(1), &[0, 1, 2])
            .unwrap();
        assert!(spec[0].data().iter().all(|&v| v == 2.0));
        let mean = enc
            .select_inference_adapter(&store, AdapterStrategy::Mean, None, &[0, 1])
            .unwrap();
        assert!(mean[0].data().iter().all(|&v| v == 1.5));
        let last = enc
            .select_inference_adapter(&store, AdapterStrategy::Last, None, &[0, 1, 2])
            .unwrap();
        assert!(last[0].data().iter().all(|&v| v == 3.0));
        assert!(enc
            .select_inference_adapter(&store, AdapterStrategy::Specified, Some(7), &[0, 1])
            .is_err());
    }

    #[test]
    fn layer_forward_gradcheck_vs_finite_differences() {
        // 4 tokens, d=8: gradient w.r.t. the active up-projection
        let (mut store, enc) = build(2, 16);
        let mut rng = Rng::new(17);
        *store.value_mut(enc.spec_id(0, 0)) = Tensor::gaussian(vec![2, 8], 0.1, &mut rng);
        let h = Tensor::gaussian(vec![4, 8], 0.7, &mut rng);

        let run = |store: &ParamStore| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let hv = tape.leaf(h.clone());
            let out =
                enc.layer_forward_t(&mut tape, store, &mut bind, hv, 0, &BypassSelect::Domain(0));
            let loss = tape.sum_all(out);
            let grads = tape.backward(loss);
            let g = bind.grad(&grads, enc.spec_id(0, 0)).cloned();
            (tape.value(loss).item(), g)
        };
        let (_, grad) = run(&store);
        let grad = grad.unwrap();
        let eps = 1e-6;
        for e in 0..grad.numel() {
            let orig = store.value(enc.spec_id(0, 0)).data()[e];
            store.value_mut(enc.spec_id(0, 0)).data_mut()[e] = orig + eps;
            let (up, _) = run(&store);
            store.value_mut(enc.spec_id(0, 0)).data_mut()[e] = orig - eps;
            let (down, _) = run(&store);
            store.value_mut(enc.spec_id(0, 0)).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grad.data()[e];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "elem {e}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
