//! Memory consolidation: train a low-rank adapter so the context-free
//! student matches the context-conditioned teacher on the selected transfer
//! set.

mod early_stop;
pub mod losses;

pub use early_stop::{EarlyStopper, StopDecision};
pub use losses::LossKind;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::adapter::{AdapterConfig, AdapterGrads, AdapterState};
use crate::backend::{log_softmax, softmax, LmBackend, TinyTransformer, TokenSequence};
use crate::elicit::{query_template, Context, EntryKind, TransferEntry, TransferSet};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub adapter: AdapterConfig,
    /// Train : dev split parts.
    pub train_ratio: (usize, usize),
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub akl_head_mass: f64,
    /// Hidden layer for the MSE loss; `None` means the post-final-norm
    /// stream.
    pub mse_layer: Option<usize>,
    pub optimizer: OptimizerKind,
    /// Keep teacher outputs in memory across epochs (trades memory for
    /// speed; off by default to bound memory).
    pub cache_teacher: bool,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            loss: LossKind::Fkl,
            learning_rate: 1e-4,
            adapter: AdapterConfig::default(),
            train_ratio: (4, 1),
            patience: 2,
            max_epochs: 50,
            batch_size: 8,
            seed: 0,
            akl_head_mass: 0.5,
            mse_layer: None,
            optimizer: OptimizerKind::Sgd,
            cache_teacher: false,
        }
    }
}

impl ConsolidationConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        self.adapter.validate()?;
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.train_ratio.0 == 0 || self.train_ratio.1 == 0 {
            return Err(Error::Config("train/dev ratio parts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.akl_head_mass > 0.0 && self.akl_head_mass < 1.0) {
            return Err(Error::Config(format!(
                "akl_head_mass {} not in (0, 1)",
                self.akl_head_mass
            )));
        }
        if let Some(layer) = self.mse_layer {
            if layer > n_layers {
                return Err(Error::InvalidLayer {
                    layer,
                    max: n_layers,
                });
            }
        }
        Ok(())
    }

    fn mse_layer_for(&self, model: &TinyTransformer) -> usize {
        self.mse_layer.unwrap_or(model.config.n_layers)
    }
}

/// Per-epoch training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub epochs_run: usize,
    pub train_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    pub initial_dev_loss: f64,
    /// 1-based epoch whose state was returned; 0 means the input state.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

/// Frozen model view that produces the teacher targets.
pub struct TeacherView<'a> {
    pub model: &'a dyn LmBackend,
    pub adapter: Option<&'a AdapterState>,
}

/// Scoring-ready form of one transfer entry.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub teacher_prefix: TokenSequence,
    pub student_prefix: TokenSequence,
    pub response: TokenSequence,
}

impl TrainItem {
    pub fn from_entry(
        backend: &dyn LmBackend,
        context: &Context,
        entry: &TransferEntry,
    ) -> Result<TrainItem> {
        let (teacher_prefix, student_prefix) = match entry.kind {
            EntryKind::Qa => {
                let template = backend.tokenize(&query_template(&entry.query_text))?;
                (context.tokens.concat(&template), template)
            }
            EntryKind::Open => (context.tokens.clone(), TokenSequence::empty()),
        };
        Ok(TrainItem {
            teacher_prefix,
            student_prefix,
            response: entry.response_tokens.clone(),
        })
    }
}

/// Teacher targets for one item under a given loss.
#[derive(Debug, Clone)]
pub enum TeacherOutput {
    Dists(Vec<Vec<f64>>),
    Hidden(Vec<Vec<f64>>),
    NotNeeded,
}

pub fn teacher_output(
    teacher: &TeacherView,
    item: &TrainItem,
    cfg: &ConsolidationConfig,
    mse_layer: usize,
) -> Result<TeacherOutput> {
    match cfg.loss {
        LossKind::Seqkd => Ok(TeacherOutput::NotNeeded),
        LossKind::Mse => Ok(TeacherOutput::Hidden(
            teacher
                .model
                .hidden_at(teacher.adapter, &item.teacher_prefix, &item.response, mse_layer)?
                .rows,
        )),
        _ => Ok(TeacherOutput::Dists(
            teacher
                .model
                .next_token_distributions(teacher.adapter, &item.teacher_prefix, &item.response)?
                .rows,
        )),
    }
}

/// Loss and adapter gradients for one item. The student forward runs over
/// `[student_prefix ∥ response]`; only response positions carry loss.
pub fn entry_loss_and_grads(
    model: &TinyTransformer,
    adapter: &AdapterState,
    item: &TrainItem,
    teacher: &TeacherOutput,
    cfg: &ConsolidationConfig,
    dropout_rng: Option<&mut Rng>,
) -> Result<(f64, AdapterGrads)> {
    let vocab = model.config.vocab_size;
    let d = model.config.d_model;
    let tokens = item.student_prefix.concat(&item.response);
    let fwd = model.forward_full(&tokens.0, Some(adapter), dropout_rng)?;
    let t_len = fwd.seq_len();
    let r_len = item.response.len();
    let mask = vec![true; r_len];
    let pred0 = item.student_prefix.len();

    let student_rows = |as_probs: bool| -> Vec<Vec<f64>> {
        (0..r_len)
            .map(|j| {
                let row = &fwd.logits[(pred0 + j) * vocab..(pred0 + j + 1) * vocab];
                if as_probs {
                    softmax(row)
                } else {
                    row.to_vec()
                }
            })
            .collect()
    };

    let mut d_logits = vec![0.0; t_len * vocab];
    let mut d_hidden_buf: Option<(usize, Vec<f64>)> = None;

    let loss = match (cfg.loss, teacher) {
        (LossKind::Fkl, TeacherOutput::Dists(t_rows)) => {
            let s_rows = student_rows(true);
            let loss = losses::loss_fkl(t_rows, &s_rows, &mask)?;
            let g = losses::grad_logits_fkl(t_rows, &s_rows, &mask)?;
            scatter_rows(&mut d_logits, &g, pred0, vocab);
            loss
        }
        (LossKind::Rkl, TeacherOutput::Dists(t_rows)) => {
            let s_rows = student_rows(true);
            let loss = losses::loss_rkl(t_rows, &s_rows, &mask)?;
            let g = losses::grad_logits_rkl(t_rows, &s_rows, &mask)?;
            scatter_rows(&mut d_logits, &g, pred0, vocab);
            loss
        }
        (LossKind::Akl, TeacherOutput::Dists(t_rows)) => {
            let s_rows = student_rows(true);
            let loss = losses::loss_akl(t_rows, &s_rows, &mask, cfg.akl_head_mass)?;
            let g = losses::grad_logits_akl(t_rows, &s_rows, &mask, cfg.akl_head_mass)?;
            scatter_rows(&mut d_logits, &g, pred0, vocab);
            loss
        }
        (LossKind::Dpkd, TeacherOutput::Dists(t_rows)) => {
            let s_rows = student_rows(true);
            let loss = losses::loss_dpkd(t_rows, &s_rows, &mask)?;
            let g = losses::grad_logits_dpkd(t_rows, &s_rows, &mask)?;
            scatter_rows(&mut d_logits, &g, pred0, vocab);
            loss
        }
        (LossKind::Seqkd, TeacherOutput::NotNeeded) => {
            let s_rows = student_rows(true);
            let lps: Vec<f64> = (0..r_len)
                .map(|j| {
                    let row = &fwd.logits[(pred0 + j) * vocab..(pred0 + j + 1) * vocab];
                    log_softmax(row)[item.response.0[j] as usize]
                })
                .collect();
            let loss = losses::loss_seqkd(&lps, &mask)?;
            let g = losses::grad_logits_seqkd(&s_rows, &item.response.0, &mask)?;
            scatter_rows(&mut d_logits, &g, pred0, vocab);
            loss
        }
        (LossKind::Mse, TeacherOutput::Hidden(t_rows)) => {
            let layer = cfg.mse_layer_for(model);
            let stream = fwd.hidden_stream(layer);
            let s_rows: Vec<Vec<f64>> = (0..r_len)
                .map(|j| stream[(pred0 + j) * d..(pred0 + j + 1) * d].to_vec())
                .collect();
            let loss = losses::loss_mse(t_rows, &s_rows, &mask)?;
            let g = losses::grad_hidden_mse(t_rows, &s_rows, &mask)?;
            let mut dh = vec![0.0; t_len * d];
            scatter_rows(&mut dh, &g, pred0, d);
            d_hidden_buf = Some((layer, dh));
            loss
        }
        (kind, _) => {
            return Err(Error::ShapeMismatch(format!(
                "teacher output does not match loss kind {kind:?}"
            )))
        }
    };

    let grads = model.backward_adapter(
        &fwd,
        adapter,
        &d_logits,
        d_hidden_buf.as_ref().map(|(l, dh)| (*l, dh.as_slice())),
    );
    Ok((loss, grads))
}

fn scatter_rows(dst: &mut [f64], rows: &[Vec<f64>], pred0: usize, width: usize) {
    for (j, row) in rows.iter().enumerate() {
        let off = (pred0 + j) * width;
        dst[off..off + width].copy_from_slice(row);
    }
}

/// Deterministic shuffle split; sizes within one of the exact ratio, both
/// sides non-empty.
pub fn split_train_dev(
    subset: &TransferSet,
    ratio: (usize, usize),
    seed: u64,
) -> Result<(TransferSet, TransferSet)> {
    let n = subset.entries.len();
    if n < 5 {
        return Err(Error::Config(format!(
            "subset of {n} entries is too small to split (need >= 5)"
        )));
    }
    let total = (ratio.0 + ratio.1) as f64;
    let n_dev = ((n as f64 * ratio.1 as f64 / total).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let mut dev_idx = idx[..n_dev].to_vec();
    let mut train_idx = idx[n_dev..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |ids: &[usize]| TransferSet {
        context_id: subset.context_id.clone(),
        context_text: subset.context_text.clone(),
        config: subset.config.clone(),
        entries: ids.iter().map(|&i| subset.entries[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&dev_idx)))
}

struct AdapterAdam {
    m: AdapterGrads,
    v: AdapterGrads,
    t: u64,
}

impl AdapterAdam {
    fn new(like: &AdapterState) -> Self {
        AdapterAdam {
            m: AdapterGrads::zeros_like(like),
            v: AdapterGrads::zeros_like(like),
            t: 0,
        }
    }

    fn step(&mut self, adapter: &mut AdapterState, grads: &AdapterGrads, lr: f64) {
        self.t += 1;
        let b1: f64 = 0.9;
        let b2: f64 = 0.999;
        let eps = 1e-8;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (pi, pair) in adapter.pairs.iter_mut().enumerate() {
            let (gm, gv, g) = (&mut self.m.pairs[pi], &mut self.v.pairs[pi], &grads.pairs[pi]);
            for i in 0..pair.a.len() {
                gm.a[i] = b1 * gm.a[i] + (1.0 - b1) * g.a[i];
                gv.a[i] = b2 * gv.a[i] + (1.0 - b2) * g.a[i] * g.a[i];
                pair.a[i] -= lr * (gm.a[i] / bc1) / ((gv.a[i] / bc2).sqrt() + eps);
            }
            for i in 0..pair.b.len() {
                gm.b[i] = b1 * gm.b[i] + (1.0 - b1) * g.b[i];
                gv.b[i] = b2 * gv.b[i] + (1.0 - b2) * g.b[i] * g.b[i];
                pair.b[i] -= lr * (gm.b[i] / bc1) / ((gv.b[i] / bc2).sqrt() + eps);
            }
        }
    }
}

enum Optimizer {
    Sgd,
    Adam(AdapterAdam),
}

impl Optimizer {
    fn new(kind: OptimizerKind, adapter: &AdapterState) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdapterAdam::new(adapter)),
        }
    }

    fn step(&mut self, adapter: &mut AdapterState, grads: &AdapterGrads, lr: f64) {
        match self {
            Optimizer::Sgd => adapter.sgd_step(grads, lr),
            Optimizer::Adam(a) => a.step(adapter, grads, lr),
        }
    }
}

fn mean_loss_over(
    model: &TinyTransformer,
    adapter: &AdapterState,
    items: &[TrainItem],
    teacher_outputs: &[TeacherOutput],
    cfg: &ConsolidationConfig,
) -> Result<f64> {
    let mut acc = 0.0;
    for (item, teacher) in items.iter().zip(teacher_outputs.iter()) {
        let (loss, _) = entry_loss_and_grads(model, adapter, item, teacher, cfg, None)?;
        acc += loss;
    }
    Ok(acc / items.len().max(1) as f64)
}

/// Train the adapter on the selected transfer set. The teacher is the frozen
/// `(model, prior_adapter)` pair conditioned on the context; the student is
/// `model` plus the returned adapter, conditioned on queries only. With a
/// prior adapter, training continues from it (sequential turns).
pub fn consolidate(
    model: &TinyTransformer,
    prior_adapter: Option<&AdapterState>,
    context: &Context,
    subset: &TransferSet,
    cfg: &ConsolidationConfig,
) -> Result<(AdapterState, TrainRecord)> {
    let start = Instant::now();
    cfg.validate(model.config.n_layers)?;
    if subset.entries.is_empty() {
        return Err(Error::EmptyInput("transfer subset for consolidation".into()));
    }
    let window = model.config.context_window;
    for (i, e) in subset.entries.iter().enumerate() {
        let teacher_len = match e.kind {
            EntryKind::Qa => {
                context.tokens.len()
                    + model.tokenize(&query_template(&e.query_text))?.len()
                    + e.response_tokens.len()
            }
            EntryKind::Open => context.tokens.len() + e.response_tokens.len(),
        };
        if teacher_len > window {
            return Err(Error::WindowOverflow {
                got: teacher_len,
                window,
                detail: format!(
                    "teacher prompt for entry {i}; chunk the context with the streaming pipeline"
                ),
            });
        }
    }

    let mse_layer = cfg.mse_layer_for(model);
    let teacher = TeacherView {
        model,
        adapter: prior_adapter,
    };

    let mut adapter = match prior_adapter {
        Some(prior) => prior.clone(),
        None => model.init_adapter(cfg.adapter.clone(), derive_seed(cfg.seed, "adapter-init", 0))?,
    };

    let (train_set, dev_set) = split_train_dev(subset, cfg.train_ratio, derive_seed(cfg.seed, "split", 0))?;
    let to_items = |s: &TransferSet| -> Result<Vec<TrainItem>> {
        s.entries
            .iter()
            .map(|e| TrainItem::from_entry(model, context, e))
            .collect()
    };
    let train_items = to_items(&train_set)?;
    let dev_items = to_items(&dev_set)?;

    // Teacher targets. Without caching they are recomputed each epoch; dev
    // targets are always kept (computed once either way).
    let dev_teacher: Vec<TeacherOutput> = dev_items
        .iter()
        .map(|it| teacher_output(&teacher, it, cfg, mse_layer))
        .collect::<Result<_>>()?;
    let cached_train_teacher: Option<Vec<TeacherOutput>> = if cfg.cache_teacher {
        Some(
            train_items
                .iter()
                .map(|it| teacher_output(&teacher, it, cfg, mse_layer))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let initial_dev_loss = mean_loss_over(model, &adapter, &dev_items, &dev_teacher, cfg)?;
    let mut record = TrainRecord {
        loss: cfg.loss,
        optimizer: cfg.optimizer,
        epochs_run: 0,
        train_losses: Vec::new(),
        dev_losses: Vec::new(),
        initial_dev_loss,
        best_epoch: 0,
        stopped_early: false,
        wall_time_s: 0.0,
    };
    if cfg.max_epochs == 0 {
        record.wall_time_s = start.elapsed().as_secs_f64();
        return Ok((adapter, record));
    }

    let mut optimizer = Optimizer::new(cfg.optimizer, &adapter);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_adapter = adapter.clone();
    let mut best_dev = initial_dev_loss;
    let mut best_epoch = 0usize;

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        Rng::new(derive_seed(cfg.seed, "epoch-order", epoch as u64)).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch_grads = AdapterGrads::zeros_like(&adapter);
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let item = &train_items[idx];
                let teacher_out_local;
                let teacher_out = match &cached_train_teacher {
                    Some(cache) => &cache[idx],
                    None => {
                        teacher_out_local = teacher_output(&teacher, item, cfg, mse_layer)?;
                        &teacher_out_local
                    }
                };
                let mut drop_rng = Rng::new(derive_seed(
                    cfg.seed,
                    "dropout",
                    ((epoch as u64) << 32) | idx as u64,
                ));
                let (loss, grads) = entry_loss_and_grads(
                    model,
                    &adapter,
                    item,
                    teacher_out,
                    cfg,
                    Some(&mut drop_rng),
                )?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        value: loss,
                        epoch,
                        batch: batch_no,
                    });
                }
                epoch_loss += loss;
                batch_grads.accumulate(&grads, inv);
            }
            optimizer.step(&mut adapter, &batch_grads, cfg.learning_rate);
        }
        record.train_losses.push(epoch_loss / train_items.len() as f64);

        let dev_loss = mean_loss_over(model, &adapter, &dev_items, &dev_teacher, cfg)?;
        if !dev_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                value: dev_loss,
                epoch,
                batch: usize::MAX,
            });
        }
        record.dev_losses.push(dev_loss);
        record.epochs_run = epoch;
        if dev_loss < best_dev {
            best_dev = dev_loss;
            best_adapter = adapter.clone();
            best_epoch = epoch;
        }
        if stopper.observe(dev_loss) == StopDecision::Stop {
            record.stopped_early = true;
            break;
        }
    }

    record.best_epoch = best_epoch;
    record.wall_time_s = start.elapsed().as_secs_f64();
    Ok((best_adapter, record))
}

/// Baseline that fine-tunes the adapter directly on the raw context with
/// next-token cross-entropy; the dev set is the held-out last 20% of the
/// context tokens.
pub fn context_lm_baseline(
    model: &TinyTransformer,
    context: &Context,
    cfg: &ConsolidationConfig,
) -> Result<(AdapterState, TrainRecord)> {
    let start = Instant::now();
    cfg.validate(model.config.n_layers)?;
    let n = context.tokens.len();
    if n < 5 {
        return Err(Error::EmptyInput(format!(
            "context of {n} tokens is too short for the context-LM baseline"
        )));
    }
    if n > model.config.context_window {
        return Err(Error::WindowOverflow {
            got: n,
            window: model.config.context_window,
            detail: "context-LM baseline; chunk the context with the streaming pipeline".into(),
        });
    }
    let n_dev = ((n as f64 * 0.2).round() as usize).clamp(1, n - 1);
    let head = context.tokens.slice(0, n - n_dev);
    let tail = context.tokens.slice(n - n_dev, n);

    let mut adapter =
        model.init_adapter(cfg.adapter.clone(), derive_seed(cfg.seed, "adapter-init", 0))?;
    let vocab = model.config.vocab_size;

    let dev_loss_of = |ad: &AdapterState| -> Result<f64> {
        let lps = model.score_logprobs(Some(ad), &head, &tail)?;
        Ok(-lps.iter().sum::<f64>() / lps.len() as f64)
    };

    let train_step = |ad: &AdapterState, rng: Option<&mut Rng>| -> Result<(f64, AdapterGrads)> {
        let fwd = model.forward_full(&head.0, Some(ad), rng)?;
        // Predictor positions 0..m-1 predict head[0..m-1]; the final position
        // would predict into the dev tail and is left out.
        let m = head.len();
        let mut d_logits = vec![0.0; fwd.seq_len() * vocab];
        let mut loss = 0.0;
        let inv = 1.0 / m as f64;
        for t in 0..m {
            let row = &fwd.logits[t * vocab..(t + 1) * vocab];
            let lp = log_softmax(row);
            let tok = head.0[t] as usize;
            loss -= lp[tok];
            let drow = &mut d_logits[t * vocab..(t + 1) * vocab];
            for v in 0..vocab {
                drow[v] = (lp[v].exp() - if v == tok { 1.0 } else { 0.0 }) * inv;
            }
        }
        let grads = model.backward_adapter(&fwd, ad, &d_logits, None);
        Ok((loss * inv, grads))
    };

    let initial_dev_loss = dev_loss_of(&adapter)?;
    let mut record = TrainRecord {
        loss: LossKind::Seqkd,
        optimizer: cfg.optimizer,
        epochs_run: 0,
        train_losses: Vec::new(),
        dev_losses: Vec::new(),
        initial_dev_loss,
        best_epoch: 0,
        stopped_early: false,
        wall_time_s: 0.0,
    };
    if cfg.max_epochs == 0 {
        record.wall_time_s = start.elapsed().as_secs_f64();
        return Ok((adapter, record));
    }

    let mut optimizer = Optimizer::new(cfg.optimizer, &adapter);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_adapter = adapter.clone();
    let mut best_dev = initial_dev_loss;
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = Rng::new(derive_seed(cfg.seed, "dropout", epoch as u64));
        let (loss, grads) = train_step(&adapter, Some(&mut rng))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                value: loss,
                epoch,
                batch: 0,
            });
        }
        optimizer.step(&mut adapter, &grads, cfg.learning_rate);
        record.train_losses.push(loss);

        let dev_loss = dev_loss_of(&adapter)?;
        record.dev_losses.push(dev_loss);
        record.epochs_run = epoch;
        if dev_loss < best_dev {
            best_dev = dev_loss;
            best_adapter = adapter.clone();
            best_epoch = epoch;
        }
        if stopper.observe(dev_loss) == StopDecision::Stop {
            record.stopped_early = true;
            break;
        }
    }

    record.best_epoch = best_epoch;
    record.wall_time_s = start.elapsed().as_secs_f64();
    Ok((best_adapter, record))
}

#[cfg(test)]
mod tests;
