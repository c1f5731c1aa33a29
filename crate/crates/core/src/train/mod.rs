//! Optimizer, learning-rate schedule and the three-stage training procedure.
//!
//! Stage 0 fits the localization layer to ground-truth boxes and freezes it.
//! Stage 1 trains the global and head-shoulder streams one after the other,
//! each with its own classifier head. Stage 2 trains the whole model (minus
//! the frozen localization layer) on the fused descriptor.
//!
//! Every random draw comes from a stream keyed by seed, stage and epoch, so
//! stages shared by several variants can be trained once and reused.

mod optim;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use log::{info, warn};

pub use optim::{adam_step, is_gem_exponent, AdamConfig, AdamState};
pub use schedule::{lr_at, Schedule, BASE_LR, DECAY_EPOCHS, REFERENCE_EPOCHS};

use crate::data::{augment, batch_images, Dataset, PkSampler, Split};
use crate::error::{Error, Result};
use crate::losses::{self, LossParts, LossStage, LossWeights};
use crate::model::{
    classify_identity, init_head, params_to_box, save_checkpoint, AffineParams, BoxLtrb, Checkpoint, HaaModel,
    ModelConfig, Variant,
};
use crate::nn::{ParamStore, Session};
use crate::rng;
use crate::tensor::{Real, Tensor, Var};

pub const METRICS_HEADER: &str = "stage,epoch,loss_total,loss_ce,loss_triplet,loss_box,loss_black,lr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILES: [&str; 3] = ["stage0.haa1", "stage1.haa1", "final.haa1"];
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Epochs of localization pretraining, per-stream training and joint training.
    pub stage_epochs: [usize; 3],
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity in a batch.
    pub k: usize,
    /// PK batches per epoch.
    pub batches_per_epoch: usize,
    pub base_lr: f64,
    pub adam: AdamConfig,
    /// Stage-0 held-out IoU below this only logs a warning.
    pub iou_floor: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            stage_epochs: [10, 15, 15],
            p: 16,
            k: 4,
            batches_per_epoch: 20,
            base_lr: BASE_LR,
            adam: AdamConfig::default(),
            iou_floor: 0.7,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Multiplies every stage length by `scale`, keeping at least one epoch per stage.
    pub fn with_epochs_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("epochs scale must be positive, got {scale}")));
        }
        for e in &mut self.stage_epochs {
            *e = ((*e as f64 * scale).round() as usize).max(1);
        }
        Ok(self)
    }

    /// Decay epochs spread over the stage-1 plus stage-2 timeline.
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            ..Schedule::scaled(self.stage_epochs[1] + self.stage_epochs[2])
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.schedule().validate()?;
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid(format!(
                "triplet batches need P >= 2 and K >= 2, got P={} K={}",
                self.p, self.k
            )));
        }
        if self.batches_per_epoch == 0 {
            return Err(Error::invalid("batches per epoch must be at least 1"));
        }
        Ok(())
    }
}

/// Which part of the procedure produced a metrics row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Localization,
    GlobalStream,
    HeadShoulderStream,
    Joint,
}

impl Phase {
    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Localization => "0",
            Phase::GlobalStream => "1-global",
            Phase::HeadShoulderStream => "1-hsa",
            Phase::Joint => "2",
        })
    }
}

/// Mean losses over one epoch. Terms a phase does not use are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: usize,
    pub total: f64,
    pub ce: Option<f64>,
    pub triplet: Option<f64>,
    pub box_l2: Option<f64>,
    pub black: Option<f64>,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.phase,
            r.epoch,
            r.total,
            opt(r.ce),
            opt(r.triplet),
            opt(r.box_l2),
            opt(r.black),
            r.lr
        );
    }
    out
}

/// Parameters after each stage plus the metrics log of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub variant: Variant,
    pub seed: u64,
    pub config: ModelConfig,
    pub stage0: ParamStore<T>,
    pub stage1: ParamStore<T>,
    pub final_params: ParamStore<T>,
    pub metrics: Vec<EpochMetrics>,
    /// Held-out IoU of the localization layer after stage 0.
    pub stage0_iou: Option<f64>,
}

impl<T: Real> TrainOutcome<T> {
    pub fn model(&self) -> HaaModel {
        HaaModel {
            config: self.config.clone(),
            variant: self.variant,
        }
    }

    /// Checkpoints carry values only; frozen prefixes are not stored.
    pub fn checkpoint(&self, params: &ParamStore<T>) -> Checkpoint {
        let mut params: ParamStore<f32> = params.cast();
        params.unfreeze_all();
        Checkpoint {
            config: self.config.clone(),
            variant: self.variant,
            seed: self.seed,
            params,
        }
    }

    pub fn final_checkpoint(&self) -> Checkpoint {
        self.checkpoint(&self.final_params)
    }

    /// Writes the three checkpoints and the metrics log into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, params) in CHECKPOINT_FILES.iter().zip([&self.stage0, &self.stage1, &self.final_params]) {
            save_checkpoint(&dir.join(file), &self.checkpoint(params))?;
        }
        let path = dir.join(METRICS_FILE);
        std::fs::write(&path, metrics_csv(&self.metrics)).map_err(|e| Error::io(&path, e))
    }
}

struct BatchMeta {
    labels: Vec<usize>,
    black: Vec<usize>,
    boxes: Vec<[f64; 4]>,
}

#[derive(Default)]
struct StepLosses {
    total: Option<Var>,
    parts: LossParts,
}

struct Trainer<'a, T: Real> {
    cfg: &'a TrainConfig,
    ds: &'a Dataset,
    seed: u64,
    sampler: PkSampler,
    labels: BTreeMap<usize, usize>,
    model: HaaModel,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T: Real> Trainer<'a, T> {
    fn new(cfg: &'a TrainConfig, ds: &'a Dataset, seed: u64) -> Result<Self> {
        let train = ds.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::invalid("dataset has no training samples"));
        }
        let first = &ds.images[train[0]];
        if (first.height, first.width) != (cfg.model.input_h, cfg.model.input_w) {
            return Err(Error::invalid(format!(
                "dataset images are {}x{}, model expects {}x{}",
                first.height, first.width, cfg.model.input_h, cfg.model.input_w
            )));
        }
        Ok(Self {
            cfg,
            ds,
            seed,
            sampler: PkSampler::from_dataset(ds, Split::Train, cfg.p, cfg.k)?,
            labels: ds.label_map(&train),
            model: HaaModel::new(cfg.model.clone(), Variant::Haa)?,
            _marker: std::marker::PhantomData,
        })
    }

    fn epoch_batches(&self, phase: Phase, epoch: usize) -> Vec<Vec<usize>> {
        let mut r = rng::stream(self.seed, rng::BATCHES, (phase.code() << 32) | epoch as u64);
        let mut out = Vec::new();
        while out.len() < self.cfg.batches_per_epoch {
            out.extend(self.sampler.epoch(&mut r));
        }
        out.truncate(self.cfg.batches_per_epoch);
        out
    }

    fn prepare(&self, idx: &[usize], rng: &mut impl rand::Rng) -> Result<(Tensor<T>, BatchMeta)> {
        let mut images = Vec::with_capacity(idx.len());
        let mut meta = BatchMeta {
            labels: Vec::with_capacity(idx.len()),
            black: Vec::with_capacity(idx.len()),
            boxes: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            let r = &self.ds.records[i];
            let mut img = self.ds.images[i].clone();
            let mut bbox = r.bbox;
            if self.cfg.augment {
                augment(&mut img, &mut bbox, rng);
            }
            images.push(img);
            meta.labels.push(self.labels[&r.id]);
            meta.black.push(r.black as usize);
            meta.boxes.push(bbox);
        }
        Ok((batch_images(&images)?.cast(), meta))
    }

    /// Runs `epochs` epochs of `phase`; `lr` maps the phase-local epoch to a rate.
    fn run_phase(
        &self,
        store: &mut ParamStore<T>,
        phase: Phase,
        epochs: usize,
        lr: impl Fn(usize) -> f64,
        loss: impl Fn(&mut Session<T>, Var, &BatchMeta) -> Result<StepLosses>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut adam = AdamState::new(self.cfg.adam);
        let mut rows = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let rate = lr(epoch);
            let mut aug = rng::stream(self.seed, rng::AUGMENT, (phase.code() << 32) | epoch as u64);
            let mut sums = [0.0f64; 5];
            let mut seen = [false; 5];
            let batches = self.epoch_batches(phase, epoch);
            for idx in &batches {
                let (x, meta) = self.prepare(idx, &mut aug)?;
                let grads = {
                    let mut s = Session::new(store, true);
                    let xv = s.input(x);
                    let step = loss(&mut s, xv, &meta)?;
                    let total = step.total.expect("loss closure sets the total");
                    let p = step.parts;
                    for (k, v) in [Some(total), p.ce, p.triplet, p.box_l2, p.black].into_iter().enumerate() {
                        if let Some(v) = v {
                            sums[k] += s.graph.value(v).item().to_f64().expect("finite loss");
                            seen[k] = true;
                        }
                    }
                    let g = s.graph.backward(total)?;
                    s.param_grads(&g)
                };
                adam_step(store, &grads, &mut adam, rate)?;
            }
            let n = batches.len() as f64;
            let mean = |k: usize| seen[k].then(|| sums[k] / n);
            let row = EpochMetrics {
                phase,
                epoch,
                total: sums[0] / n,
                ce: mean(1),
                triplet: mean(2),
                box_l2: mean(3),
                black: mean(4),
                lr: rate,
            };
            info!("stage {} epoch {} loss {:.5} lr {}", row.phase, row.epoch, row.total, row.lr);
            rows.push(row);
        }
        Ok(rows)
    }

    fn localization(&self, store: &mut ParamStore<T>) -> Result<Vec<EpochMetrics>> {
        let model = &self.model;
        let epochs = self.cfg.stage_epochs[0];
        let rows = self.run_phase(store, Phase::Localization, epochs, |_| self.cfg.base_lr, |s, x, meta| {
            let params = model.hll_predict(s, x)?;
            let l = losses::box_l2(&mut s.graph, params, &meta.boxes)?;
            Ok(StepLosses {
                total: Some(l),
                parts: LossParts {
                    box_l2: Some(l),
                    ..LossParts::default()
                },
            })
        })?;
        store.freeze("hll.");
        Ok(rows)
    }

    fn identity_losses(
        &self,
        s: &mut Session<T>,
        f: Var,
        head: &str,
        meta: &BatchMeta,
        black_logits: Option<Var>,
    ) -> Result<StepLosses> {
        let w = &self.cfg.weights;
        let logits = classify_identity(s, f, head)?;
        let ce = losses::cross_entropy(&mut s.graph, logits, &meta.labels)?;
        let tri = losses::batch_hard_triplet(&mut s.graph, f, &meta.labels, w.margin)?;
        let black = black_logits
            .map(|b| losses::cross_entropy(&mut s.graph, b, &meta.black))
            .transpose()?;
        let parts = LossParts {
            ce: Some(ce),
            triplet: Some(tri),
            box_l2: None,
            black,
        };
        let stage = if black.is_some() {
            LossStage::IdentityWithBlack
        } else {
            LossStage::Identity
        };
        Ok(StepLosses {
            total: Some(losses::total_loss(&mut s.graph, &parts, w, stage)?),
            parts,
        })
    }

    fn stream(&self, store: &mut ParamStore<T>, phase: Phase) -> Result<Vec<EpochMetrics>> {
        let head = match phase {
            Phase::GlobalStream => "global",
            _ => "hsa",
        };
        init_head(store, head, self.cfg.model.half_dim(), self.labels.len(), self.seed);
        let schedule = self.cfg.schedule();
        let model = &self.model;
        let rows = self.run_phase(store, phase, self.cfg.stage_epochs[1], |e| lr_at(e, &schedule), |s, x, meta| {
            let f = match phase {
                Phase::GlobalStream => model.global_forward(s, x)?,
                _ => model.hsa_forward(s, x)?.0,
            };
            self.identity_losses(s, f, head, meta, None)
        })?;
        store.remove_prefix("head.");
        Ok(rows)
    }

    fn joint(&self, store: &mut ParamStore<T>, model: &HaaModel) -> Result<Vec<EpochMetrics>> {
        init_head(store, "joint", model.descriptor_dim(), self.labels.len(), self.seed);
        let schedule = self.cfg.schedule();
        let offset = self.cfg.stage_epochs[1];
        let rows = self.run_phase(store, Phase::Joint, self.cfg.stage_epochs[2], |e| lr_at(offset + e, &schedule), |s, x, meta| {
            let out = model.forward(s, x)?;
            self.identity_losses(s, out.f, "joint", meta, out.black_logits)
        })?;
        store.remove_prefix("head.");
        Ok(rows)
    }

    /// Mean IoU between predicted and ground-truth boxes on the held-out split.
    fn held_out_iou(&self, store: &ParamStore<T>) -> Result<f64> {
        let idx: Vec<usize> = (0..self.ds.len()).filter(|&i| self.ds.records[i].split != Split::Train).collect();
        let boxes = predict_boxes(&self.model, store, self.ds, &idx)?;
        let total: f64 = boxes
            .iter()
            .zip(&idx)
            .map(|(b, &i)| {
                let g = self.ds.records[i].bbox;
                b.iou(BoxLtrb::new(g[0], g[1], g[2], g[3]))
            })
            .sum();
        Ok(total / idx.len().max(1) as f64)
    }
}

/// Localization boxes for the given samples.
pub fn predict_boxes<T: Real>(model: &HaaModel, store: &ParamStore<T>, ds: &Dataset, idx: &[usize]) -> Result<Vec<BoxLtrb>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut s = Session::new(store, false);
        let x = s.input(ds.batch(chunk)?.cast());
        let p = model.hll_predict(&mut s, x)?;
        let vals = s.graph.value(p).to_f64();
        out.extend(vals.chunks(4).map(|r| params_to_box(AffineParams::from_slice(r))));
    }
    Ok(out)
}

fn restrict<T: Real>(full: &ParamStore<T>, names: &BTreeSet<String>, keep_frozen: bool) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (k, v) in full.iter().filter(|(k, _)| names.contains(*k)) {
        out.insert(k.clone(), v.clone());
    }
    if keep_frozen {
        for p in full.frozen_prefixes() {
            out.freeze(p);
        }
    }
    out
}

/// Trains several variants with one seed, sharing stages 0 and 1.
///
/// Each outcome equals what training that variant alone would produce.
pub fn train_variants<T: Real>(
    cfg: &TrainConfig,
    ds: &Dataset,
    seed: u64,
    variants: &[Variant],
) -> Result<Vec<TrainOutcome<T>>> {
    cfg.validate()?;
    if cfg.model.share_backbone && variants.len() > 1 {
        // a shared backbone couples the streams, so each variant runs alone
        return variants
            .iter()
            .map(|&v| train_variants(cfg, ds, seed, &[v]).map(|mut o| o.remove(0)))
            .collect();
    }
    let trainer = Trainer::<T>::new(cfg, ds, seed)?;
    let needs_global = variants.iter().any(|v| v.uses_global());
    let needs_hsa = variants.iter().any(|v| v.uses_hsa());
    let mut store = trainer.model.init_params::<T>(seed);
    let initial = store.clone();

    let mut loc_rows = Vec::new();
    let mut iou = None;
    if needs_hsa {
        loc_rows = trainer.localization(&mut store)?;
        let v = trainer.held_out_iou(&store)?;
        if v < cfg.iou_floor {
            warn!("localization IoU {v:.3} is below the floor {}", cfg.iou_floor);
        }
        iou = Some(v);
    }
    let after_stage0 = store.clone();
    let global_rows = if needs_global {
        trainer.stream(&mut store, Phase::GlobalStream)?
    } else {
        Vec::new()
    };
    let hsa_rows = if needs_hsa {
        trainer.stream(&mut store, Phase::HeadShoulderStream)?
    } else {
        Vec::new()
    };
    let after_stage1 = store;

    let mut outcomes = Vec::with_capacity(variants.len());
    for &variant in variants {
        let model = HaaModel::new(cfg.model.clone(), variant)?;
        let names: BTreeSet<String> = model.init_params::<T>(seed).names().cloned().collect();
        let hsa = variant.uses_hsa();
        let stage0 = if hsa {
            restrict(&after_stage0, &names, true)
        } else {
            restrict(&initial, &names, false)
        };
        let stage1 = restrict(&after_stage1, &names, hsa);
        let mut params = stage1.clone();
        let joint_rows = trainer.joint(&mut params, &model)?;
        let mut metrics = Vec::new();
        if hsa {
            metrics.extend(loc_rows.iter().cloned());
        }
        if variant.uses_global() {
            metrics.extend(global_rows.iter().cloned());
        }
        if hsa {
            metrics.extend(hsa_rows.iter().cloned());
        }
        metrics.extend(joint_rows);
        outcomes.push(TrainOutcome {
            variant,
            seed,
            config: cfg.model.clone(),
            stage0,
            stage1,
            final_params: params,
            metrics,
            stage0_iou: if hsa { iou } else { None },
        });
    }
    Ok(outcomes)
}

/// Parameters, per-epoch losses and held-out IoU after localization pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Localization<T> {
    pub params: ParamStore<T>,
    pub metrics: Vec<EpochMetrics>,
    pub iou: f64,
}

/// Stage 0 on its own.
pub fn pretrain_localization<T: Real>(cfg: &TrainConfig, ds: &Dataset, seed: u64) -> Result<Localization<T>> {
    cfg.validate()?;
    let trainer = Trainer::<T>::new(cfg, ds, seed)?;
    let mut params = trainer.model.init_params::<T>(seed);
    let metrics = trainer.localization(&mut params)?;
    let iou = trainer.held_out_iou(&params)?;
    Ok(Localization { params, metrics, iou })
}

/// Trains one variant through all stages.
pub fn train_staged<T: Real>(cfg: &TrainConfig, ds: &Dataset, seed: u64, variant: Variant) -> Result<TrainOutcome<T>> {
    Ok(train_variants(cfg, ds, seed, &[variant])?.remove(0))
}

#[cfg(test)]
mod tests;
