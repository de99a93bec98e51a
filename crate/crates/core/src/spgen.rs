//! Multi-scale self-prompt generation.
//!
//! Three encoder layers are tapped and mapped to half, native, and double
//! token resolution by stride-2, 1x1, and transposed convolution heads. A
//! top-down pyramid (lateral 1x1, 2x nearest upsample, add) fuses them, the
//! finest level is pooled back to token resolution, and a 1x1 head predicts a
//! per-token foreground logit. Logits are trained with binary cross-entropy
//! against max-pooled ground truth and confidence-gated into the self-prompt
//! that replaces manual point/box prompts downstream.

use crate::error::{Error, Result};
use crate::params::{Binding, Ownership, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;
use crate::types::TokenGrid;

/// Tap points: thirds of the stack plus the final layer (0-based indices).
/// Needs at least three layers.
pub fn tap_indices(depth: usize) -> Result<[usize; 3]> {
    if depth < 3 {
        return Err(Error::Validation(format!(
            "multi-scale fusion needs depth >= 3, got {depth}"
        )));
    }
    Ok([depth / 3 - 1, 2 * depth / 3 - 1, depth - 1])
}

#[derive(Debug, Clone)]
pub struct MultiScalePyramid {
    /// Half, native, and double token resolution feature grids.
    pub levels: Vec<TokenGrid>,
    /// Fused embedding back at token resolution, `fuse_dim` channels wide.
    pub fused: TokenGrid,
}

/// Per-token foreground logits on the token grid.
#[derive(Debug, Clone)]
pub struct ForegroundLogits {
    pub grid: (usize, usize),
    pub g: Tensor,
}

/// Confidence-gated logits; zero where the gate dropped the token.
#[derive(Debug, Clone)]
pub struct SelfPrompt {
    pub grid: (usize, usize),
    pub g_hat: Tensor,
    /// How many tokens passed the gate.
    pub retained: usize,
}

struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn init(
        store: &mut ParamStore,
        name: &str,
        shape: Vec<usize>,
        out_ch: usize,
        fan_in: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            w: store.register(
                &format!("{name}.w"),
                Tensor::gaussian(shape, crate::nn::fan_in_std(fan_in), rng),
                Ownership::Shared,
            ),
            b: store.register(
                &format!("{name}.b"),
                Tensor::zeros(vec![out_ch]),
                Ownership::Shared,
            ),
        }
    }
}

pub struct SpGen {
    pub dim: usize,
    pub fuse_dim: usize,
    /// d -> fuse_dim at half resolution (3x3, stride 2, pad 1).
    head_coarse: Conv,
    /// d -> fuse_dim at native resolution (1x1).
    head_mid: Conv,
    /// d -> fuse_dim at double resolution (2x2 transposed, stride 2).
    head_fine: Conv,
    laterals: [Conv; 3],
    predict: Conv,
}

impl SpGen {
    pub fn init(store: &mut ParamStore, dim: usize, fuse_dim: usize, rng: &mut Rng) -> Self {
        let ds = fuse_dim;
        Self {
            dim,
            fuse_dim,
            head_coarse: Conv::init(store, "spgen.head_coarse", vec![ds, dim, 3, 3], ds, dim * 9, rng),
            head_mid: Conv::init(store, "spgen.head_mid", vec![ds, dim, 1, 1], ds, dim, rng),
            // stride-2 transposed conv: each output pixel sees `dim` inputs
            head_fine: Conv::init(store, "spgen.head_fine", vec![dim, ds, 2, 2], ds, dim, rng),
            laterals: [
                Conv::init(store, "spgen.lateral0", vec![ds, ds, 1, 1], ds, ds, rng),
                Conv::init(store, "spgen.lateral1", vec![ds, ds, 1, 1], ds, ds, rng),
                Conv::init(store, "spgen.lateral2", vec![ds, ds, 1, 1], ds, ds, rng),
            ],
            predict: Conv::init(store, "spgen.predict", vec![1, ds, 1, 1], 1, ds, rng),
        }
    }

    /// Start the foreground head at zero so every token opens at probability
    /// one half instead of a random confident guess.
    pub fn zero_head(&self, store: &mut ParamStore) {
        let shape = store.value(self.predict.w).shape().to_vec();
        *store.value_mut(self.predict.w) = Tensor::zeros(shape);
    }

    /// Tape path: per-layer token vars in, (pyramid level vars, fused tokens
    /// var) out.
    pub fn multiscale_fuse_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        per_layer: &[Var],
        grid: (usize, usize),
    ) -> ([Var; 3], Var) {
        let depth = per_layer.len();
        let taps = tap_indices(depth).expect("caller validates depth");
        let (ht, wt) = grid;
        let chw: Vec<Var> = taps
            .iter()
            .map(|&l| tape.tokens_to_chw(per_layer[l], ht, wt))
            .collect();

        let cw = bind.var(tape, store, self.head_coarse.w);
        let cb = bind.var(tape, store, self.head_coarse.b);
        let coarse = tape.conv2d(chw[0], cw, cb, 2, 1);

        let mw = bind.var(tape, store, self.head_mid.w);
        let mb = bind.var(tape, store, self.head_mid.b);
        let mid = tape.conv2d(chw[1], mw, mb, 1, 0);

        let fw = bind.var(tape, store, self.head_fine.w);
        let fb = bind.var(tape, store, self.head_fine.b);
        let fine = tape.conv_transpose2d(chw[2], fw, fb, 2);

        let lat = |tape: &mut Tape, bind: &mut Binding, conv: &Conv, x: Var| {
            let w = bind.var(tape, store, conv.w);
            let b = bind.var(tape, store, conv.b);
            tape.conv2d(x, w, b, 1, 0)
        };
        // top-down: coarsest to finest
        let p0 = lat(tape, bind, &self.laterals[0], coarse);
        let l1 = lat(tape, bind, &self.laterals[1], mid);
        let up0 = tape.upsample_nearest2(p0);
        let p1 = tape.add(l1, up0);
        let l2 = lat(tape, bind, &self.laterals[2], fine);
        let up1 = tape.upsample_nearest2(p1);
        let p2 = tape.add(l2, up1);

        let pooled = tape.avg_pool2(p2);
        let fused_tokens = tape.chw_to_tokens(pooled);
        ([coarse, mid, fine], fused_tokens)
    }

    /// Tape path: fused tokens -> per-token logits [N].
    pub fn predict_foreground_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        fused_tokens: Var,
        grid: (usize, usize),
    ) -> Var {
        let (ht, wt) = grid;
        let chw = tape.tokens_to_chw(fused_tokens, ht, wt);
        let w = bind.var(tape, store, self.predict.w);
        let b = bind.var(tape, store, self.predict.b);
        let logits = tape.conv2d(chw, w, b, 1, 0);
        tape.reshape(logits, vec![ht * wt])
    }

    // ---- plain operation surface ----

    pub fn multiscale_fuse(
        &self,
        store: &ParamStore,
        per_layer: &[TokenGrid],
    ) -> Result<MultiScalePyramid> {
        tap_indices(per_layer.len())?;
        let grid = per_layer[0].grid();
        for tg in per_layer {
            if tg.grid() != grid || tg.dim() != self.dim {
                return Err(Error::Shape(
                    "per-layer grids disagree in shape or width".into(),
                ));
            }
        }
        if grid.0 % 2 != 0 || grid.1 % 2 != 0 {
            return Err(Error::Shape(format!(
                "token grid {}x{} must be even for multi-scale heads",
                grid.0, grid.1
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let vars: Vec<Var> = per_layer
            .iter()
            .map(|tg| tape.leaf(tg.data().clone()))
            .collect();
        let (levels, fused) = self.multiscale_fuse_t(&mut tape, store, &mut bind, &vars, grid);
        let levels: Result<Vec<TokenGrid>> = levels
            .iter()
            .map(|&v| TokenGrid::from_chw(tape.value(v)))
            .collect();
        Ok(MultiScalePyramid {
            levels: levels?,
            fused: TokenGrid::new(tape.value(fused).clone(), grid)?,
        })
    }

    pub fn predict_foreground(
        &self,
        store: &ParamStore,
        h_ms: &TokenGrid,
    ) -> Result<ForegroundLogits> {
        if h_ms.dim() != self.fuse_dim {
            return Err(Error::Shape(format!(
                "fused width {} does not match head width {}",
                h_ms.dim(),
                self.fuse_dim
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let fused = tape.leaf(h_ms.data().clone());
        let logits = self.predict_foreground_t(&mut tape, store, &mut bind, fused, h_ms.grid());
        Ok(ForegroundLogits {
            grid: h_ms.grid(),
            g: tape.value(logits).clone(),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in [
            &self.head_coarse,
            &self.head_mid,
            &self.head_fine,
            &self.laterals[0],
            &self.laterals[1],
            &self.laterals[2],
            &self.predict,
        ] {
            ids.push(c.w);
            ids.push(c.b);
        }
        ids
    }
}

/// Token-level ground truth: a token is foreground iff any pixel of its
/// receptive cell is (max-pool reduction).
pub fn downsample_gt(mask: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (h, w) = mask.dims2();
    let (ht, wt) = grid;
    if ht == 0 || wt == 0 || h % ht != 0 || w % wt != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} mask not divisible by {ht}x{wt} token grid"
        )));
    }
    let (ch, cw) = (h / ht, w / wt);
    let mut out = Tensor::zeros(vec![ht * wt]);
    for ty in 0..ht {
        for tx in 0..wt {
            let mut any = 0.0;
            'cell: for dy in 0..ch {
                for dx in 0..cw {
                    if mask.data()[(ty * ch + dy) * w + tx * cw + dx] > 0.5 {
                        any = 1.0;
                        break 'cell;
                    }
                }
            }
            out.data_mut()[ty * wt + tx] = any;
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy of per-token logits against 0/1 labels.
pub fn spgen_loss(logits: &ForegroundLogits, labels: &Tensor) -> Result<f64> {
    if logits.g.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "{:?} logits vs {:?} labels",
            logits.g.shape(),
            labels.shape()
        )));
    }
    let mut tape = Tape::new();
    let g = tape.leaf(logits.g.clone());
    let loss = tape.bce_with_logits_mean(g, labels);
    Ok(tape.value(loss).item())
}

/// Confidence gate: keep the logit where sigmoid(g) >= tau (inclusive), else
/// zero it.
pub fn gate(logits: &ForegroundLogits, tau: f64) -> Result<SelfPrompt> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Validation(format!("tau {tau} outside [0, 1]")));
    }
    let mut retained = 0;
    let g_hat = logits.g.map(|x| {
        if sigmoid(x) >= tau {
            x
        } else {
            0.0
        }
    });
    for &x in logits.g.data() {
        if sigmoid(x) >= tau {
            retained += 1;
        }
    }
    Ok(SelfPrompt {
        grid: logits.grid,
        g_hat,
        retained,
    })
}
