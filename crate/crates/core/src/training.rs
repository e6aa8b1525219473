//! Three-stage training and the full-gallery fine-tuning phases.
//!
//! * Stage 1 pretrains the detail branch on edit-style triplets.
//! * Stage 2 fine-tunes both branches jointly on subset-style triplets.
//! * Stage 3 freezes both branches and trains a fresh compositor.
//! * The full-gallery phases fine-tune the global branch (after stage 2) or
//!   the compositor (after stage 3) against every gallery image.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositor::{CompositorConfig, ExtractionMode, FusionMode};
use crate::data::{DatasetKind, TripletDataset};
use crate::encoders::{BranchKind, TokenFeatures};
use crate::error::{Error, Result};
use crate::losses::{
    loss_compositor, loss_compositor_spn, loss_di, loss_di_sgn, loss_gm, loss_gm_spn, ContrastiveBatch, GROUP_NEGATIVES,
};
use crate::model::{Checkpoint, DetailFusionModel, EncodeTrace, ModelConfig, RngState, VisualInput};
use crate::nn::{l2_normalize, l2_normalize_backward, Grads, Mat, ParamGroup};
use crate::optim::AdamW;
use crate::retrieval::{build_index, evaluate_queries, EvalMode, GalleryIndex, QueryFeatures};

/// Temperature used by every contrastive loss unless configured.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Weight of the global loss in the joint stage-2 objective.
pub const DEFAULT_TRADE_OFF: f64 = 2.0;

/// Flat key-value training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub dataset: Option<String>,
    /// Stage default when absent.
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub temperature: f64,
    /// Stage-2 weight of the global loss.
    pub trade_off: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Add each target's five near-duplicates as detail-loss negatives (stage 2).
    pub sgn: bool,
    /// Run the full-gallery phase for this stage instead of the stage itself.
    pub spn: bool,
    pub checkpoint_in: Option<String>,
    pub checkpoint_out: Option<String>,
    pub loss_trace: Option<String>,
    pub cross_layers: usize,
    pub same_layers: usize,
    pub extraction: ExtractionMode,
    pub fusion: FusionMode,
    /// Held-out share of stage-1 triplets used to pick the best epoch.
    pub validation_fraction: f64,
    /// Stage 3: encode branch features once before the loop.
    pub cache_features: bool,
    pub vision_trainable: bool,
    /// Stage 3 only accepts `false`.
    pub unfreeze_branches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            dataset: None,
            epochs: None,
            batch_size: None,
            learning_rate: None,
            temperature: DEFAULT_TEMPERATURE,
            trade_off: None,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.05,
            seed: 7,
            sgn: false,
            spn: false,
            checkpoint_in: None,
            checkpoint_out: None,
            loss_trace: None,
            cross_layers: 2,
            same_layers: 2,
            extraction: ExtractionMode::Attention,
            fusion: FusionMode::PhiPsi,
            validation_fraction: 0.1,
            cache_features: true,
            vision_trainable: false,
            unfreeze_branches: false,
        }
    }
}

/// Epochs, batch size and learning rate after applying stage defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainConfig {
    pub fn for_stage(stage: u8) -> Self {
        Self {
            stage,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn trade_off(&self) -> f64 {
        self.trade_off.unwrap_or(DEFAULT_TRADE_OFF)
    }

    pub fn compositor(&self) -> CompositorConfig {
        CompositorConfig {
            cross_layers: self.cross_layers,
            same_layers: self.same_layers,
            extraction: self.extraction,
            fusion: self.fusion,
        }
    }

    /// Default epochs, batch size and learning rate for each stage.
    pub fn schedule(&self) -> Schedule {
        let (epochs, batch_size, learning_rate) = match (self.stage, self.spn) {
            (1, _) => (5, 64, 1e-3),
            (2, false) => (30, 32, 1e-3),
            (2, true) => (12, 8, 5e-5),
            (3, false) => (60, 128, 1e-3),
            _ => (3, 32, 1e-3),
        };
        Schedule {
            epochs: self.epochs.unwrap_or(epochs),
            batch_size: self.batch_size.unwrap_or(batch_size),
            learning_rate: self.learning_rate.unwrap_or(learning_rate),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.stage) {
            return err(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if let Some(g) = self.trade_off {
            if !(g > 0.0 && g.is_finite()) {
                return err("trade-off must be positive".into());
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err("temperature must be positive".into());
        }
        if self.epochs == Some(0) {
            return err("epochs must be positive".into());
        }
        if self.batch_size == Some(0) {
            return err("batch size must be positive".into());
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return err("learning rate must be positive".into());
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return err("validation fraction must lie in [0, 1)".into());
        }
        if self.sgn && self.stage != 2 {
            return err("group negatives apply to stage 2 only".into());
        }
        if self.spn && self.stage == 1 {
            return err("the full-gallery phase follows stage 2 or 3, not stage 1".into());
        }
        if self.stage == 3 && self.unfreeze_branches {
            return err("stage 3 trains the compositor only; branches must stay frozen".into());
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub columns: Vec<String>,
    pub rows: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Values aligned with [`LossTrace::columns`].
    pub parts: Vec<f64>,
}

impl LossTrace {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_string(), "epoch".into(), "loss".into()];
        header.extend(self.columns.iter().cloned());
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.epoch.to_string(), r.loss.to_string()];
            rec.extend(r.parts.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Result of one stage or phase.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
    /// Stage 1: validation recall@1 after each epoch.
    pub validation: Vec<f64>,
    pub best_epoch: Option<usize>,
}

const SALT_SHUFFLE: u64 = 0x5348_5546;
const SALT_SPLIT: u64 = 0x5350_4c54;
const SALT_COMPOSITOR: u64 = 0x434f_4d50;

/// Shuffled batches for one epoch from that epoch's own stream.
fn epoch_batches(n: usize, batch: usize, seed: u64, stage: u64, epoch: usize) -> (Vec<Vec<usize>>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_SHUFFLE);
    rng.set_stream(stage << 32 | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    (order.chunks(batch).map(|c| c.to_vec()).collect(), rng)
}

/// Splits stage-1 triplets into (train, validation) index lists.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if n >= 2 { ((n as f64 * fraction).round() as usize).min(n - 1) } else { 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_SPLIT);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn set_trainable(model: &mut DetailFusionModel<f32>, groups: &[ParamGroup]) {
    for g in ParamGroup::ALL {
        model.store_mut().set_frozen(g, !groups.contains(&g));
    }
}

fn optimizer(cfg: &TrainConfig) -> AdamW {
    AdamW::new(
        cfg.schedule().learning_rate as f32,
        cfg.beta1 as f32,
        cfg.beta2 as f32,
        cfg.weight_decay as f32,
    )
}

fn require_kind(dataset: &TripletDataset, kind: DatasetKind) -> Result<()> {
    if dataset.kind() != kind {
        return Err(Error::Config(format!(
            "dataset kind mismatch: expected {}, got {}",
            kind.as_str(),
            dataset.kind().as_str()
        )));
    }
    Ok(())
}

fn require_stage(ck: &Checkpoint, min: u8, what: &str) -> Result<()> {
    if ck.stage < min {
        return Err(Error::Config(format!(
            "{what} needs a stage-{min} checkpoint, got stage {}",
            ck.stage
        )));
    }
    Ok(())
}

/// Patch features for every gallery image when the vision encoder is frozen.
fn patch_cache(model: &DetailFusionModel<f32>, dataset: &TripletDataset) -> Result<Option<Vec<Mat<f32>>>> {
    if !model.store().is_frozen(ParamGroup::Vision) {
        return Ok(None);
    }
    dataset.images().iter().map(|im| model.vision_encode(im)).collect::<Result<Vec<_>>>().map(Some)
}

struct Encoded {
    unit: Vec<f32>,
    norm: f32,
    tokens: usize,
    trace: EncodeTrace<f32>,
}

struct Encoder<'a> {
    model: &'a DetailFusionModel<f32>,
    dataset: &'a TripletDataset,
    patches: Option<&'a [Mat<f32>]>,
}

impl Encoder<'_> {
    fn input(&self, id: u32) -> VisualInput<'_, f32> {
        match self.patches {
            Some(p) => VisualInput::Patches(&p[id as usize]),
            None => VisualInput::Image(&self.dataset.images()[id as usize]),
        }
    }

    fn encode(&self, id: u32, text: Option<&[u32]>, branch: BranchKind) -> Result<Encoded> {
        let (f, trace) = self.model.forward_encode(self.input(id), text, branch)?;
        let (unit, norm) =
            l2_normalize(f.cls()).ok_or_else(|| Error::Numeric("overall-representation token has zero norm".into()))?;
        Ok(Encoded {
            unit,
            norm,
            tokens: f.len(),
            trace,
        })
    }

    fn backprop(&self, e: &Encoded, d_unit: &[f32], grads: &mut Grads<f32>) {
        let d0 = l2_normalize_backward(&e.unit, e.norm, d_unit);
        let mut dt = Mat::zeros(e.tokens, d0.len());
        dt.row_mut(0).copy_from_slice(&d0);
        self.model.backward_encode(&e.trace, &dt, grads);
    }
}

/// Distinct images used in one step, each encoded once with summed gradients.
struct ImageBank {
    slots: BTreeMap<u32, usize>,
    items: Vec<Encoded>,
    grads: Vec<Vec<f32>>,
}

impl ImageBank {
    fn new() -> Self {
        Self {
            slots: BTreeMap::new(),
            items: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn slot(&mut self, enc: &Encoder<'_>, id: u32) -> Result<usize> {
        if let Some(&s) = self.slots.get(&id) {
            return Ok(s);
        }
        let e = enc.encode(id, None, BranchKind::Detail)?;
        self.grads.push(vec![0.0; e.unit.len()]);
        self.items.push(e);
        self.slots.insert(id, self.items.len() - 1);
        Ok(self.items.len() - 1)
    }

    fn matrix(&self, slots: &[usize]) -> Mat<f32> {
        let d = self.items.first().map_or(0, |e| e.unit.len());
        let mut m = Mat::zeros(slots.len(), d);
        for (i, &s) in slots.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&self.items[s].unit);
        }
        m
    }

    fn accumulate(&mut self, slots: &[usize], d: &Mat<f32>, scale: f32) {
        for (i, &s) in slots.iter().enumerate() {
            for (g, &v) in self.grads[s].iter_mut().zip(d.row(i)) {
                *g += scale * v;
            }
        }
    }

    fn backprop(&self, enc: &Encoder<'_>, grads: &mut Grads<f32>) {
        for (e, g) in self.items.iter().zip(&self.grads) {
            if g.iter().any(|&v| v != 0.0) {
                enc.backprop(e, g, grads);
            }
        }
    }
}

fn stack(rows: &[&Encoded]) -> Mat<f32> {
    let d = rows.first().map_or(0, |e| e.unit.len());
    let mut m = Mat::zeros(rows.len(), d);
    for (i, e) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&e.unit);
    }
    m
}

fn finite(v: f32, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(f64::from(v))
    } else {
        Err(Error::Numeric(format!("{what} became non-finite")))
    }
}

/// The five other members of a target's group.
fn group_negatives(dataset: &TripletDataset, triplet: usize) -> Result<Vec<u32>> {
    let rec = &dataset.triplets()[triplet];
    let gid = rec
        .subset_group
        .ok_or_else(|| Error::Config("group negatives need subset groups".into()))?;
    let group = dataset
        .group(gid)
        .ok_or_else(|| Error::Dataset(format!("missing subset group {gid}")))?;
    let others: Vec<u32> = group.members.iter().copied().filter(|&m| m != rec.target).collect();
    if others.len() != GROUP_NEGATIVES {
        return Err(Error::Dataset(format!(
            "group {gid} yields {} negatives instead of {GROUP_NEGATIVES}",
            others.len()
        )));
    }
    Ok(others)
}

/// One stage-1 or stage-2 step; returns the loss parts.
fn branch_step(
    enc: &Encoder<'_>,
    batch: &[usize],
    cfg: &TrainConfig,
    joint: bool,
    grads: &mut Grads<f32>,
) -> Result<(f64, Vec<f64>)> {
    let tau = cfg.temperature as f32;
    let records = enc.dataset.triplets();
    let mut bank = ImageBank::new();
    let mut q_di = Vec::with_capacity(batch.len());
    let mut q_gm = Vec::new();
    let mut t_slots = Vec::with_capacity(batch.len());
    let mut r_slots = Vec::with_capacity(batch.len());
    let mut g_slots = Vec::new();
    for &i in batch {
        let rec = &records[i];
        q_di.push(enc.encode(rec.reference, Some(&rec.tokens), BranchKind::Detail)?);
        if joint {
            q_gm.push(enc.encode(rec.reference, Some(&rec.tokens), BranchKind::Global)?);
        }
        t_slots.push(bank.slot(enc, rec.target)?);
        r_slots.push(bank.slot(enc, rec.reference)?);
        if cfg.sgn {
            for m in group_negatives(enc.dataset, i)? {
                g_slots.push(bank.slot(enc, m)?);
            }
        }
    }
    let targets = bank.matrix(&t_slots);
    let mut di_batch =
        ContrastiveBatch::new(stack(&q_di.iter().collect::<Vec<_>>()), targets.clone(), tau).with_reference(bank.matrix(&r_slots));
    let mut parts = Vec::new();
    let di = if cfg.sgn {
        di_batch = di_batch.with_group(bank.matrix(&g_slots));
        let plain = loss_di(&di_batch)?;
        let sgn = loss_di_sgn(&di_batch)?;
        parts.push(finite(sgn.value, "detail loss")?);
        parts.push(finite(plain.value, "detail loss")?);
        sgn
    } else {
        let l = loss_di(&di_batch)?;
        parts.push(finite(l.value, "detail loss")?);
        l
    };
    let mut total = f64::from(di.value);
    for (e, i) in q_di.iter().zip(0..) {
        enc.backprop(e, di.d_query.row(i), grads);
    }
    bank.accumulate(&t_slots, di.d_target.as_ref().expect("target grads"), 1.0);
    bank.accumulate(&r_slots, di.d_reference.as_ref().expect("reference grads"), 1.0);
    if let Some(dg) = &di.d_group {
        bank.accumulate(&g_slots, dg, 1.0);
    }
    if joint {
        let gamma = cfg.trade_off() as f32;
        let gm = loss_gm(&ContrastiveBatch::new(stack(&q_gm.iter().collect::<Vec<_>>()), targets, tau))?;
        parts.insert(1, finite(gm.value, "global loss")?);
        total += f64::from(gamma) * f64::from(gm.value);
        for (e, i) in q_gm.iter().zip(0..) {
            let d: Vec<f32> = gm.d_query.row(i).iter().map(|v| gamma * v).collect();
            enc.backprop(e, &d, grads);
        }
        bank.accumulate(&t_slots, gm.d_target.as_ref().expect("target grads"), gamma);
    }
    bank.backprop(enc, grads);
    Ok((total, parts))
}

fn finish(
    mut model: DetailFusionModel<f32>,
    stage: u8,
    parent: Option<&Checkpoint>,
    cfg: &TrainConfig,
    rng: &ChaCha8Rng,
) -> Checkpoint {
    // Leave the standard inference flags on the saved model.
    set_trainable(&mut model, &[]);
    Checkpoint {
        stage,
        config_digest: cfg.digest(),
        parent_digest: parent.map(Checkpoint::digest),
        init_seed: parent.map_or(cfg.seed, |p| p.init_seed),
        rng: Some(RngState::capture(rng)),
        model,
    }
}

/// Recall@1 of the detail branch on held-out triplets against their own images.
pub fn validation_recall(model: &DetailFusionModel<f32>, dataset: &TripletDataset, triplets: &[usize]) -> Result<f64> {
    let mut ids: Vec<u32> = triplets
        .iter()
        .flat_map(|&i| {
            let r = &dataset.triplets()[i];
            [r.reference, r.target]
        })
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let images: Vec<_> = ids.iter().map(|&id| dataset.images()[id as usize].clone()).collect();
    let index = build_index(model, &ids, &images, BTreeMap::new())?;
    let queries = QueryFeatures::encode(model, dataset, triplets)?;
    Ok(evaluate_queries(model, dataset, triplets, &queries, &index, EvalMode::Detail)?
        .recall
        .at_1)
}

/// Detail-branch pretraining on edit-style triplets, keeping the best epoch.
pub fn run_stage1(cfg: &TrainConfig, dataset: &TripletDataset, init: Option<&Checkpoint>) -> Result<StageOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config(format!("stage-1 run given a stage-{} config", cfg.stage)));
    }
    require_kind(dataset, DatasetKind::EditPretrain)?;
    let fresh;
    let base = match init {
        Some(c) => c,
        None => {
            let model = ModelConfig {
                vision_trainable: cfg.vision_trainable,
                ..Default::default()
            };
            fresh = Checkpoint::initial(model, cfg.compositor(), cfg.seed)?;
            &fresh
        }
    };
    let mut model = base.model.clone();
    let mut groups = vec![ParamGroup::Detail];
    if cfg.vision_trainable {
        groups.push(ParamGroup::Vision);
    }
    set_trainable(&mut model, &groups);
    let sched = cfg.schedule();
    let (train, val) = validation_split(dataset.triplets().len(), cfg.validation_fraction, cfg.seed);
    let mut opt = optimizer(cfg);
    let mut trace = LossTrace::new(&["loss_di"]);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, DetailFusionModel<f32>)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..sched.epochs {
        let cache = patch_cache(&model, dataset)?;
        let (batches, r) = epoch_batches(train.len(), sched.batch_size, cfg.seed, 1, epoch);
        rng = r;
        for batch in batches {
            let batch: Vec<usize> = batch.iter().map(|&i| train[i]).collect();
            let mut grads = Grads::zeros_like(model.store());
            let enc = Encoder {
                model: &model,
                dataset,
                patches: cache.as_deref(),
            };
            let (loss, parts) = branch_step(&enc, &batch, cfg, false, &mut grads)?;
            opt.step(model.store_mut(), &grads);
            trace.rows.push(TraceRow {
                step: trace.rows.len(),
                epoch,
                loss,
                parts,
            });
        }
        if !val.is_empty() {
            let r1 = validation_recall(&model, dataset, &val)?;
            validation.push(r1);
            if best.as_ref().is_none_or(|(b, _, _)| r1 > *b) {
                best = Some((r1, epoch, model.clone()));
            }
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, m)) = best {
        model = m;
    }
    Ok(StageOutcome {
        checkpoint: finish(model, 1, init, cfg, &rng),
        trace,
        validation,
        best_epoch,
    })
}

/// Joint fine-tuning of both branches on subset-style triplets.
pub fn run_stage2(cfg: &TrainConfig, dataset: &TripletDataset, init: &Checkpoint) -> Result<StageOutcome> {
    cfg.validate()?;
    if cfg.stage != 2 || cfg.spn {
        return Err(Error::Config("stage-2 run needs `stage = 2` without `spn`".into()));
    }
    require_kind(dataset, DatasetKind::CirFinetune)?;
    if cfg.sgn && !dataset.has_groups() {
        return Err(Error::Config("group negatives need a dataset with subset groups".into()));
    }
    let mut model = init.model.clone();
    let mut groups = vec![ParamGroup::Detail, ParamGroup::Global];
    if cfg.vision_trainable {
        groups.push(ParamGroup::Vision);
    }
    set_trainable(&mut model, &groups);
    let sched = cfg.schedule();
    let mut opt = optimizer(cfg);
    let columns: &[&str] = if cfg.sgn {
        &["loss_di_sgn", "loss_gm", "loss_di"]
    } else {
        &["loss_di", "loss_gm"]
    };
    let mut trace = LossTrace::new(columns);
    let n = dataset.triplets().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = patch_cache(&model, dataset)?;
    for epoch in 0..sched.epochs {
        if !model.store().is_frozen(ParamGroup::Vision) {
            cache = None;
        }
        let (batches, r) = epoch_batches(n, sched.batch_size, cfg.seed, 2, epoch);
        rng = r;
        for batch in batches {
            let mut grads = Grads::zeros_like(model.store());
            let enc = Encoder {
                model: &model,
                dataset,
                patches: cache.as_deref(),
            };
            let (loss, parts) = branch_step(&enc, &batch, cfg, true, &mut grads)?;
            opt.step(model.store_mut(), &grads);
            trace.rows.push(TraceRow {
                step: trace.rows.len(),
                epoch,
                loss,
                parts,
            });
        }
    }
    Ok(StageOutcome {
        checkpoint: finish(model, 2, Some(init), cfg, &rng),
        trace,
        validation: Vec::new(),
        best_epoch: None,
    })
}

/// Branch features consumed by the compositor, plus normalized target features.
#[derive(Clone, Debug)]
pub struct CompositorInputs {
    pub queries: QueryFeatures,
    pub targets: Mat<f32>,
}

impl CompositorInputs {
    pub fn encode(model: &DetailFusionModel<f32>, dataset: &TripletDataset, triplets: &[usize]) -> Result<Self> {
        let queries = QueryFeatures::encode(model, dataset, triplets)?;
        let d = model.config().feature_dim;
        let mut targets = Mat::zeros(triplets.len(), d);
        let mut seen: BTreeMap<u32, Vec<f32>> = BTreeMap::new();
        for (row, &i) in triplets.iter().enumerate() {
            let t = dataset.triplets()[i].target;
            if !seen.contains_key(&t) {
                let f = model.encode_image(&dataset.images()[t as usize])?.normalized()?;
                seen.insert(t, f.cls().to_vec());
            }
            targets.row_mut(row).copy_from_slice(&seen[&t]);
        }
        Ok(Self { queries, targets })
    }

    fn select(&self, rows: &[usize]) -> (Vec<TokenFeatures<f32>>, Vec<TokenFeatures<f32>>, Mat<f32>) {
        let g = rows.iter().map(|&r| self.queries.global[r].clone()).collect();
        let f = rows.iter().map(|&r| self.queries.detail[r].clone()).collect();
        let mut t = Mat::zeros(rows.len(), self.targets.cols());
        for (i, &r) in rows.iter().enumerate() {
            t.row_mut(i).copy_from_slice(self.targets.row(r));
        }
        (g, f, t)
    }
}

/// Gallery-wide target features for the full-gallery phases.
fn gallery_features(model: &DetailFusionModel<f32>, dataset: &TripletDataset) -> Result<GalleryIndex<f32>> {
    let ids: Vec<u32> = (0..dataset.gallery_len() as u32).collect();
    build_index(model, &ids, dataset.images(), BTreeMap::new())
}

fn check_gallery(dataset: &TripletDataset, index: &GalleryIndex<f32>) -> Result<()> {
    if let Some(r) = dataset.triplets().iter().find(|r| r.target as usize >= index.len()) {
        return Err(Error::Config(format!(
            "gallery of {} images does not contain target {}",
            index.len(),
            r.target
        )));
    }
    Ok(())
}

/// Compositor step over cached or freshly encoded inputs.
fn compositor_step(
    model: &DetailFusionModel<f32>,
    inputs: &CompositorInputs,
    rows: &[usize],
    gallery: Option<(&GalleryIndex<f32>, &[u32])>,
    tau: f32,
    grads: &mut Grads<f32>,
) -> Result<f64> {
    let (g, f, t) = inputs.select(rows);
    let comp = model.compositor();
    let (fused, trace) = comp.forward_batch(model.store(), &g, &f)?;
    let d = model.config().feature_dim;
    let mut q = Mat::zeros(rows.len(), d);
    for (i, x) in fused.iter().enumerate() {
        q.row_mut(i).copy_from_slice(&x.vector);
    }
    let out = match gallery {
        None => loss_compositor(&ContrastiveBatch::new(q, t, tau))?,
        Some((index, targets)) => {
            let ids: Vec<usize> = rows.iter().map(|&r| targets[r] as usize).collect();
            loss_compositor_spn(&q, &ids, index.features(), tau)?
        }
    };
    let loss = finite(out.value, "compositor loss")?;
    comp.backward_batch(model.store(), &trace, &out.d_query, grads);
    Ok(loss)
}

/// Trains a freshly initialized compositor on frozen branch features.
pub fn run_stage3(cfg: &TrainConfig, dataset: &TripletDataset, init: &Checkpoint) -> Result<StageOutcome> {
    cfg.validate()?;
    if cfg.stage != 3 || cfg.spn {
        return Err(Error::Config("stage-3 run needs `stage = 3` without `spn`".into()));
    }
    require_kind(dataset, DatasetKind::CirFinetune)?;
    require_stage(init, 2, "stage 3")?;
    let mut model = init.model.clone();
    model.reset_compositor(cfg.compositor(), cfg.seed ^ SALT_COMPOSITOR);
    set_trainable(&mut model, &[ParamGroup::Compositor]);
    let sched = cfg.schedule();
    let mut opt = optimizer(cfg);
    let mut trace = LossTrace::new(&["loss_c"]);
    let n = dataset.triplets().len();
    let all: Vec<usize> = (0..n).collect();
    let cached = if cfg.cache_features {
        Some(CompositorInputs::encode(&model, dataset, &all)?)
    } else {
        None
    };
    let tau = cfg.temperature as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..sched.epochs {
        let (batches, r) = epoch_batches(n, sched.batch_size, cfg.seed, 3, epoch);
        rng = r;
        for batch in batches {
            let mut grads = Grads::zeros_like(model.store());
            let loss = match &cached {
                Some(c) => compositor_step(&model, c, &batch, None, tau, &mut grads)?,
                None => {
                    let fresh = CompositorInputs::encode(&model, dataset, &batch)?;
                    let rows: Vec<usize> = (0..batch.len()).collect();
                    compositor_step(&model, &fresh, &rows, None, tau, &mut grads)?
                }
            };
            opt.step(model.store_mut(), &grads);
            trace.rows.push(TraceRow {
                step: trace.rows.len(),
                epoch,
                loss,
                parts: vec![loss],
            });
        }
    }
    Ok(StageOutcome {
        checkpoint: finish(model, 3, Some(init), cfg, &rng),
        trace,
        validation: Vec::new(),
        best_epoch: None,
    })
}

/// Full-gallery fine-tuning: the global branch after stage 2, the
/// compositor after stage 3. Gallery features are computed once.
pub fn run_spn_phase(cfg: &TrainConfig, dataset: &TripletDataset, init: &Checkpoint) -> Result<StageOutcome> {
    cfg.validate()?;
    if !cfg.spn {
        return Err(Error::Config("full-gallery phase needs `spn = true`".into()));
    }
    require_kind(dataset, DatasetKind::CirFinetune)?;
    require_stage(init, cfg.stage, "the full-gallery phase")?;
    let mut model = init.model.clone();
    let component = if cfg.stage == 2 {
        ParamGroup::Global
    } else {
        ParamGroup::Compositor
    };
    set_trainable(&mut model, &[component]);
    let index = gallery_features(&model, dataset)?;
    check_gallery(dataset, &index)?;
    let targets: Vec<u32> = dataset.triplets().iter().map(|r| r.target).collect();
    let sched = cfg.schedule();
    let mut opt = optimizer(cfg);
    let mut trace = LossTrace::new(&["loss_spn"]);
    let n = targets.len();
    let tau = cfg.temperature as f32;
    let all: Vec<usize> = (0..n).collect();
    let comp_inputs = if component == ParamGroup::Compositor {
        Some(CompositorInputs::encode(&model, dataset, &all)?)
    } else {
        None
    };
    let cache = patch_cache(&model, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..sched.epochs {
        let (batches, r) = epoch_batches(n, sched.batch_size, cfg.seed, 10 + u64::from(cfg.stage), epoch);
        rng = r;
        for batch in batches {
            let mut grads = Grads::zeros_like(model.store());
            let loss = match &comp_inputs {
                Some(c) => compositor_step(&model, c, &batch, Some((&index, &targets)), tau, &mut grads)?,
                None => {
                    let enc = Encoder {
                        model: &model,
                        dataset,
                        patches: cache.as_deref(),
                    };
                    let records = dataset.triplets();
                    let qs = batch
                        .iter()
                        .map(|&i| enc.encode(records[i].reference, Some(&records[i].tokens), BranchKind::Global))
                        .collect::<Result<Vec<_>>>()?;
                    let ids: Vec<usize> = batch.iter().map(|&i| targets[i] as usize).collect();
                    let out = loss_gm_spn(&stack(&qs.iter().collect::<Vec<_>>()), &ids, index.features(), tau)?;
                    for (e, i) in qs.iter().zip(0..) {
                        enc.backprop(e, out.d_query.row(i), &mut grads);
                    }
                    finite(out.value, "global loss")?
                }
            };
            opt.step(model.store_mut(), &grads);
            trace.rows.push(TraceRow {
                step: trace.rows.len(),
                epoch,
                loss,
                parts: vec![loss],
            });
        }
    }
    Ok(StageOutcome {
        checkpoint: finish(model, cfg.stage, Some(init), cfg, &rng),
        trace,
        validation: Vec::new(),
        best_epoch: None,
    })
}
