//! Sequential multi-domain training, checkpointing, prompt-free inference,
//! and evaluation.
//!
//! Training follows the per-domain loop: for each domain, M epochs of
//! shuffled batches optimize the self-prompt head, the decoder, the shared
//! adapter halves, and that domain's specific adapter/query; the learning
//! rate decays exponentially per epoch. At every domain boundary the common
//! adapter half is inherited bitwise into the next domain. Backbone weights
//! never enter an optimizer update set, which is audited every epoch.

use std::collections::HashMap;
use std::path::Path;

use crate::config::{AdapterStrategy, RunConfig};
use crate::data::{Dataset, Sample, Split};
use crate::decoder::{DecodedMask, Decoder, DecoderCfg, QuerySelect};
use crate::encoder::{BypassSelect, Encoder, EncoderCfg};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{
    connected_components, score_image, BinaryMask, Connectivity, InstanceLabelMap, MetricsReport,
};
use crate::params::{Adam, Binding, Ownership, ParamId, ParamStore};
use crate::rng::{seed_all, Rng};
use crate::tape::{sigmoid, Tape};
use crate::tensor::Tensor;
use crate::types::DomainRegistry;

pub struct Model {
    pub cfg: RunConfig,
    pub registry: DomainRegistry,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub spgen: SpGenHandle,
    pub decoder: Decoder,
}

// spgen::SpGen is small; re-exported under a field-friendly alias
pub type SpGenHandle = crate::spgen::SpGen;

pub fn init_model(cfg: &RunConfig, registry: &DomainRegistry) -> Result<Model> {
    cfg.validate()?;
    if cfg.depth < 3 {
        return Err(Error::Validation(
            "multi-scale self-prompting needs encoder.depth >= 3".into(),
        ));
    }
    let streams = seed_all(cfg.seed);
    let mut rng = streams.init;
    let mut store = ParamStore::new();
    let encoder = Encoder::init(&mut store, EncoderCfg::from_run(cfg, registry.k()), &mut rng);
    let spgen = crate::spgen::SpGen::init(&mut store, cfg.dim, cfg.fuse_dim, &mut rng);
    spgen.zero_head(&mut store);
    let decoder = Decoder::init(
        &mut store,
        DecoderCfg {
            dim: cfg.dim,
            heads: cfg.decoder_heads,
            tokens: cfg.token_count(),
            grid: cfg.token_grid(),
            domain_slots: if cfg.shared_domain_params {
                1
            } else {
                registry.k()
            },
            blocks: 2,
        },
        &mut rng,
    );
    Ok(Model {
        cfg: cfg.clone(),
        registry: registry.clone(),
        store,
        encoder,
        spgen,
        decoder,
    })
}

impl Model {
    fn validate_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size] {
            return Err(Error::Shape(format!(
                "image {:?} incompatible with configured {}x{} ({} channels, patch {})",
                image.shape(),
                self.cfg.image_size,
                self.cfg.image_size,
                self.cfg.in_channels,
                self.cfg.patch_size
            )));
        }
        Ok(())
    }
}

/// One forward pass on a tape; returns the loss variables and gate stats.
struct ForwardOut {
    spgen_logits: crate::tape::Var,
    mask_logits: crate::tape::Var,
    prob: crate::tape::Var,
    retained: usize,
}

fn forward_t(
    model: &Model,
    tape: &mut Tape,
    bind: &mut Binding,
    image: &Tensor,
    bypass: &BypassSelect,
    query: &QuerySelect,
) -> ForwardOut {
    let grid = model.cfg.token_grid();
    let img = tape.leaf(image.clone());
    let per_layer = model.encoder.encode_t(tape, &model.store, bind, img, bypass);
    let (_levels, fused) = model
        .spgen
        .multiscale_fuse_t(tape, &model.store, bind, &per_layer, grid);
    let g = model
        .spgen
        .predict_foreground_t(tape, &model.store, bind, fused, grid);
    let retained = tape
        .value(g)
        .data()
        .iter()
        .filter(|&&x| sigmoid(x) >= model.cfg.tau)
        .count();
    let g_hat = tape.gate(g, model.cfg.tau);
    let h_l = *per_layer.last().expect("depth >= 1");
    let out_hw = (model.cfg.image_size, model.cfg.image_size);
    let logits = model
        .decoder
        .decode_t(tape, &model.store, bind, h_l, g_hat, query, out_hw);
    let prob = tape.sigmoid(logits);
    ForwardOut {
        spgen_logits: g,
        mask_logits: logits,
        prob,
        retained,
    }
}

/// Training cursor: where a run currently stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cursor {
    pub domain: usize,
    /// Completed epochs within the current domain.
    pub epoch: usize,
    /// Domains fully trained so far.
    pub completed_domains: usize,
}

impl Cursor {
    pub fn trained_domains(&self) -> Vec<usize> {
        (0..self.completed_domains).collect()
    }
}

/// Per-epoch training log; serializes to the loss CSV.
#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub domain: usize,
    /// 1-based epoch within the domain.
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
    pub retained_tokens: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,domain,focal,dice,spgen,total\n");
        for row in &self.rows {
            s.push_str(&row.report.csv_row(row.epoch, row.domain));
            s.push('\n');
        }
        s
    }
}

pub struct TrainState {
    pub model: Model,
    pub cursor: Cursor,
    pub lr: f64,
    /// Gate-retained token count summed over the latest step's batch.
    pub last_step_retained: usize,
    shuffle_rng: Rng,
    opt: Option<Adam>,
    opt_domain: Option<usize>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let lr = model.cfg.lr;
        let shuffle_rng = seed_all(model.cfg.seed).shuffle;
        Self {
            model,
            cursor: Cursor::default(),
            lr,
            last_step_retained: 0,
            shuffle_rng,
            opt: None,
            opt_domain: None,
        }
    }

    fn ensure_optimizer(&mut self, domain: usize) -> Result<()> {
        let reset = self.model.cfg.reset_optimizer_per_domain;
        let needs_new = match (&self.opt, self.opt_domain) {
            (None, _) => true,
            (Some(_), Some(d)) => reset && d != domain,
            (Some(_), None) => false,
        };
        if needs_new {
            let update_set = if reset {
                self.model.store.update_set(domain)
            } else {
                self.model.store.trainable_ids()
            };
            let opt = Adam::new(self.model.cfg.lr, update_set);
            opt.audit_disjoint_from_frozen(&self.model.store)?;
            self.opt = Some(opt);
        }
        self.opt_domain = Some(domain);
        Ok(())
    }

    /// One optimizer step on a batch of same-domain samples.
    pub fn train_step(&mut self, batch: &[&Sample], domain_id: usize) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        self.model.registry.check_id(domain_id)?;
        for s in batch {
            if s.domain_id != domain_id {
                return Err(Error::Validation(format!(
                    "sample {} belongs to domain {}, not {domain_id}",
                    s.id, s.domain_id
                )));
            }
            self.model.validate_image(&s.image)?;
        }
        self.ensure_optimizer(domain_id)?;
        let slot = self.model.encoder.slot_for(domain_id);
        let cfg = self.model.cfg.clone();
        let grid = cfg.token_grid();
        let scale = 1.0 / batch.len() as f64;

        let mut grad_acc: HashMap<ParamId, Tensor> = HashMap::new();
        let mut focal_sum = 0.0;
        let mut dice_sum = 0.0;
        let mut spgen_sum = 0.0;
        let mut retained_sum = 0usize;
        for sample in batch {
            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let fwd = forward_t(
                &self.model,
                &mut tape,
                &mut bind,
                &sample.image,
                &BypassSelect::Domain(slot),
                &QuerySelect::Domain(slot),
            );
            retained_sum += fwd.retained;
            let gt_pixels = sample.semantic_tensor();
            let gt_tokens = crate::spgen::downsample_gt(&gt_pixels, grid)?;
            let spgen_l = tape.bce_with_logits_mean(fwd.spgen_logits, &gt_tokens);
            let focal_l = tape.focal_loss_logits_mean(
                fwd.mask_logits,
                &gt_pixels,
                cfg.focal_gamma,
                cfg.focal_alpha,
            );
            let dice_l = tape.dice_loss(fwd.prob, &gt_pixels, cfg.dice_eps);
            let focal_w = tape.scale(focal_l, cfg.lambda);
            let dice_w = tape.scale(dice_l, 1.0 - cfg.lambda);
            let seg_l = tape.add(focal_w, dice_w);
            let total = tape.add(seg_l, spgen_l);

            let (fv, dv, sv) = (
                tape.value(focal_l).item(),
                tape.value(dice_l).item(),
                tape.value(spgen_l).item(),
            );
            if !(fv.is_finite() && dv.is_finite() && sv.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss on sample {} of domain {domain_id}: focal={fv} dice={dv} spgen={sv}",
                    sample.id
                )));
            }
            focal_sum += fv;
            dice_sum += dv;
            spgen_sum += sv;

            let grads = tape.backward(total);
            let opt = self.opt.as_ref().expect("optimizer ensured");
            for &id in opt.update_set() {
                if let Some(g) = bind.grad(&grads, id) {
                    if !g.is_finite() {
                        return Err(Error::Training(format!(
                            "non-finite gradient for `{}` on sample {}",
                            self.model.store.entry(id).name,
                            sample.id
                        )));
                    }
                    let scaled = g.scale(scale);
                    match grad_acc.get_mut(&id) {
                        Some(acc) => acc.add_assign(&scaled),
                        None => {
                            grad_acc.insert(id, scaled);
                        }
                    }
                }
            }
        }

        let opt = self.opt.as_mut().expect("optimizer ensured");
        opt.set_lr(self.lr);
        opt.step(&mut self.model.store, &grad_acc);
        self.last_step_retained = retained_sum;
        Ok(LossReport::new(
            focal_sum * scale,
            dice_sum * scale,
            cfg.lambda,
            spgen_sum * scale,
        ))
    }

    /// M epochs of shuffled batches over one domain's training split.
    pub fn train_domain(
        &mut self,
        dataset: &Dataset,
        domain_id: usize,
        log: &mut TrainingLog,
    ) -> Result<()> {
        let samples = dataset.split(Split::Train);
        if samples.is_empty() {
            return Err(Error::Validation(format!(
                "domain {domain_id} has no training samples"
            )));
        }
        self.ensure_optimizer(domain_id)?;
        self.cursor.domain = domain_id;
        self.cursor.epoch = 0;
        let epochs = self.model.cfg.epochs;
        let batch_size = self.model.cfg.batch_size;
        for epoch in 0..epochs {
            // decayed lr for this epoch; reset per domain alongside moments
            let decay_steps = if self.model.cfg.reset_optimizer_per_domain {
                epoch
            } else {
                self.cursor.completed_domains * epochs + epoch
            };
            self.lr = self.model.cfg.lr * self.model.cfg.lr_decay.powi(decay_steps as i32);
            self.opt
                .as_ref()
                .expect("optimizer ensured")
                .audit_disjoint_from_frozen(&self.model.store)?;

            let mut order: Vec<usize> = (0..samples.len()).collect();
            self.shuffle_rng.shuffle(&mut order);
            let mut focal = 0.0;
            let mut dice = 0.0;
            let mut spgen = 0.0;
            let mut retained = 0usize;
            let mut steps = 0usize;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
                let report = self.train_step(&batch, domain_id)?;
                focal += report.focal;
                dice += report.dice;
                spgen += report.spgen;
                retained += self.last_step_retained;
                steps += 1;
            }
            let n = steps.max(1) as f64;
            log.rows.push(LogRow {
                domain: domain_id,
                epoch: epoch + 1,
                lr: self.lr,
                report: LossReport::new(
                    focal / n,
                    dice / n,
                    self.model.cfg.lambda,
                    spgen / n,
                ),
                retained_tokens: retained,
            });
            self.cursor.epoch = epoch + 1;
        }
        Ok(())
    }

    /// Full sequential run over every domain in registry order, inheriting
    /// the common adapter half at each domain boundary.
    pub fn train_all(&mut self, datasets: &[Dataset]) -> Result<TrainingLog> {
        let k = self.model.registry.k();
        if datasets.len() != k {
            return Err(Error::Config(format!(
                "{} datasets for {k} registry domains",
                datasets.len()
            )));
        }
        for (i, ds) in datasets.iter().enumerate() {
            if ds.domain_id != i {
                return Err(Error::Config(format!(
                    "dataset order mismatch: position {i} holds domain {}",
                    ds.domain_id
                )));
            }
        }
        let mut log = TrainingLog::default();
        for domain in 0..k {
            self.train_domain(&datasets[domain], domain, &mut log)?;
            self.cursor.completed_domains = domain + 1;
            if domain + 1 < k {
                self.model
                    .encoder
                    .inherit_common(&mut self.model.store, domain)?;
            }
        }
        Ok(log)
    }

    pub fn shuffle_rng_state(&self) -> u64 {
        self.shuffle_rng.state()
    }

    pub fn set_shuffle_rng_state(&mut self, state: u64) {
        self.shuffle_rng = Rng::from_state(state);
    }
}

// ---- inference ----

/// How inference picks adapter/query weights.
#[derive(Debug, Clone)]
pub enum InferenceSelect {
    /// A trained registry domain.
    Domain(usize),
    /// Zero-shot strategy over the trained domains.
    ZeroShot {
        strategy: AdapterStrategy,
        specified: Option<usize>,
        trained: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: DecodedMask,
    pub semantic: BinaryMask,
    pub instances: InstanceLabelMap,
    /// Tokens that passed the confidence gate.
    pub retained: usize,
}

pub fn predict(model: &Model, image: &Tensor, select: &InferenceSelect) -> Result<Prediction> {
    model.validate_image(image)?;
    let out_hw = (model.cfg.image_size, model.cfg.image_size);

    let mut tape = Tape::new();
    let mut bind = Binding::new();
    let custom_bypass;
    let custom_query;
    let (bypass, query) = match select {
        InferenceSelect::Domain(k) => {
            model.registry.check_id(*k)?;
            let slot = model.encoder.slot_for(*k);
            (BypassSelect::Domain(slot), QuerySelect::Domain(slot))
        }
        InferenceSelect::ZeroShot {
            strategy,
            specified,
            trained,
        } => {
            custom_bypass = model.encoder.select_inference_adapter(
                &model.store,
                *strategy,
                *specified,
                trained,
            )?;
            custom_query =
                model
                    .decoder
                    .select_query(&model.store, *strategy, *specified, trained)?;
            (
                BypassSelect::Custom(&custom_bypass),
                QuerySelect::Custom(&custom_query),
            )
        }
    };
    let fwd = forward_t(model, &mut tape, &mut bind, image, &bypass, &query);
    let prob = tape.value(fwd.prob).clone();
    let logits_grid = prob.shape().to_vec();
    debug_assert_eq!(logits_grid, vec![out_hw.0, out_hw.1]);
    // probability >= 0.5 maps to foreground (inclusive tie rule)
    let semantic = BinaryMask::from_probability(&prob, 0.5);
    let conn = Connectivity::from_usize(model.cfg.connectivity)?;
    let instances = connected_components(&semantic, conn);
    Ok(Prediction {
        mask: DecodedMask {
            logits: prob.map(|p| {
                // recover logits for downstream consumers of the raw map
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                (p / (1.0 - p)).ln()
            }),
        },
        semantic,
        instances,
        retained: fwd.retained,
    })
}

/// Score a dataset split; one row per image plus means.
pub fn evaluate(
    model: &Model,
    samples: &[&Sample],
    select: &InferenceSelect,
) -> Result<MetricsReport> {
    evaluate_inner(model, samples, select, false)
}

/// Debug fixed point: feed ground truth as the prediction.
pub fn evaluate_gt_as_pred(model: &Model, samples: &[&Sample]) -> Result<MetricsReport> {
    evaluate_inner(model, samples, &InferenceSelect::Domain(0), true)
}

fn evaluate_inner(
    model: &Model,
    samples: &[&Sample],
    select: &InferenceSelect,
    gt_as_pred: bool,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation needs at least one sample".into()));
    }
    let mut report = MetricsReport::default();
    for sample in samples {
        let gt_sem = sample.semantic();
        let m = if gt_as_pred {
            score_image(&gt_sem, &sample.instances, &gt_sem, &sample.instances)?
        } else {
            let pred = predict(model, &sample.image, select)?;
            score_image(&pred.semantic, &pred.instances, &gt_sem, &sample.instances)?
        };
        report.push(sample.id.clone(), m);
    }
    Ok(report)
}

/// Total retained prompt tokens over a sample set at a given gate threshold.
pub fn retained_tokens(
    model: &Model,
    samples: &[&Sample],
    select: &InferenceSelect,
    tau: f64,
) -> Result<usize> {
    let mut total = 0;
    for sample in samples {
        model.validate_image(&sample.image)?;
        let slot = match select {
            InferenceSelect::Domain(k) => model.encoder.slot_for(*k),
            InferenceSelect::ZeroShot { .. } => {
                return Err(Error::Validation(
                    "retained-token probe supports trained domains only".into(),
                ))
            }
        };
        let out = model.encoder.encode(&model.store, &sample.image, slot)?;
        let pyr = model.spgen.multiscale_fuse(&model.store, &out.per_layer)?;
        let logits = model.spgen.predict_foreground(&model.store, &pyr.fused)?;
        total += crate::spgen::gate(&logits, tau)?.retained;
    }
    Ok(total)
}

// ---- checkpointing ----

const MAGIC: &[u8; 8] = b"NSEGCKP1";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn f64s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serialize config, registry, cursor, rng state, and every named parameter
/// (with ownership flags) into a digest-protected container.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let model = &state.model;
    let mut w = Writer::new();
    w.bytes(model.cfg.to_text().as_bytes());
    w.u32(model.registry.k() as u32);
    for name in model.registry.names() {
        w.bytes(name.as_bytes());
    }
    w.u32(state.cursor.domain as u32);
    w.u32(state.cursor.epoch as u32);
    w.u32(state.cursor.completed_domains as u32);
    w.u64(state.shuffle_rng_state());
    w.u32(model.store.len() as u32);
    for (_, entry) in model.store.iter() {
        w.bytes(entry.name.as_bytes());
        match entry.ownership {
            Ownership::Frozen => {
                w.buf.push(0);
                w.u32(0);
            }
            Ownership::Shared => {
                w.buf.push(1);
                w.u32(0);
            }
            Ownership::DomainSpecific(k) => {
                w.buf.push(2);
                w.u32(k as u32);
            }
        }
        w.u32(entry.value.shape().len() as u32);
        for &d in entry.value.shape() {
            w.u64(d as u64);
        }
        w.f64s(entry.value.data());
    }
    let payload = w.buf;
    let mut out = Vec::with_capacity(payload.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rebuild a [`TrainState`] from a checkpoint file. Every forward output of
/// the loaded model is bitwise identical to the saved one.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let raw = std::fs::read(path)?;
    if raw.len() < 24 || &raw[..8] != MAGIC {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} is not a recognized checkpoint",
            path.display()
        )));
    }
    let digest = u64::from_le_bytes(raw[8..16].try_into().unwrap());
    let len = u64::from_le_bytes(raw[16..24].try_into().unwrap()) as usize;
    if raw.len() != 24 + len {
        return Err(Error::Integrity(format!(
            "payload length {} does not match header {len}",
            raw.len() - 24
        )));
    }
    let payload = &raw[24..];
    if fnv1a(payload) != digest {
        return Err(Error::Integrity("checkpoint digest mismatch".into()));
    }
    let mut r = Reader::new(payload);
    let cfg_text = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Integrity("config block is not utf-8".into()))?;
    let cfg = RunConfig::from_text(&cfg_text)?;
    let k = r.u32()? as usize;
    let mut names = Vec::with_capacity(k);
    for _ in 0..k {
        names.push(
            String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Integrity("domain name is not utf-8".into()))?,
        );
    }
    let registry = DomainRegistry::new(names)?;
    let cursor = Cursor {
        domain: r.u32()? as usize,
        epoch: r.u32()? as usize,
        completed_domains: r.u32()? as usize,
    };
    let rng_state = r.u64()?;

    let mut model = init_model(&cfg, &registry)?;
    let n_params = r.u32()? as usize;
    if n_params != model.store.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{n_params} stored parameters but the model defines {}",
            model.store.len()
        )));
    }
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Integrity("parameter name is not utf-8".into()))?;
        let tag = r.take(1)?[0];
        let dom = r.u32()? as usize;
        let ownership = match tag {
            0 => Ownership::Frozen,
            1 => Ownership::Shared,
            2 => Ownership::DomainSpecific(dom),
            _ => return Err(Error::Integrity(format!("bad ownership tag {tag}"))),
        };
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        let id = model.store.id_of(&name).ok_or_else(|| {
            Error::IncompatibleCheckpoint(format!("unknown parameter `{name}`"))
        })?;
        let entry = model.store.entry(id);
        if entry.value.shape() != shape.as_slice() || entry.ownership != ownership {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter `{name}` has shape {:?}/{:?} but checkpoint stores {:?}",
                entry.value.shape(),
                entry.ownership,
                shape
            )));
        }
        *model.store.value_mut(id) = Tensor::new(shape, data);
    }
    let mut state = TrainState::new(model);
    state.cursor = cursor;
    state.set_shuffle_rng_state(rng_state);
    Ok(state)
}

/// Reject checkpoints whose registry disagrees with the one on disk.
pub fn ensure_registry_compatible(model: &Model, registry: &DomainRegistry) -> Result<()> {
    if model.registry.k() != registry.k() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint trained with K={} but data has K={}",
            model.registry.k(),
            registry.k()
        )));
    }
    if model.registry.names() != registry.names() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint domains {:?} do not match data domains {:?}",
            model.registry.names(),
            registry.names()
        )));
    }
    Ok(())
}
