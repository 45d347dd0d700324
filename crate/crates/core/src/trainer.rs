//! Adam training with validation-based early stopping.
//!
//! Training samples are `(patch, band group)` pairs. Each batch stacks HR
//! group crops and builds the LR input on the fly with area degradation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::band_grouping::plan_groups;
use crate::config::KeyValues;
use crate::data::{degrade_area_tensor, DatasetSplit};
use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients, Var};
use crate::loss::{total_loss, LossConfig, LossTerms};
use crate::model::{forward, init_params, DacnConfig, DacnParams};
use crate::params::{named_vars, register, ParamTree};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            patience: 10,
            max_epochs: 100,
            max_steps: None,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "beta1",
        "beta2",
        "adam_eps",
        "batch_size",
        "patience",
        "max_epochs",
        "max_steps",
        "seed",
        "alpha",
        "include_grad_loss",
        "l2_all_params",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} = {b} must be in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be > 0"));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size, patience and max_epochs must be >= 1"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be >= 1"));
        }
        self.loss.validate()
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            adam_eps: kv.get_or("adam_eps", d.adam_eps)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            patience: kv.get_or("patience", d.patience)?,
            max_epochs: kv.get_or("max_epochs", d.max_epochs)?,
            max_steps: kv.get("max_steps")?,
            seed: kv.get_or("seed", d.seed)?,
            loss: LossConfig {
                alpha: kv.get_or("alpha", d.loss.alpha)?,
                include_grad_loss: kv.get_or("include_grad_loss", d.loss.include_grad_loss)?,
                l2_all_params: kv.get_or("l2_all_params", d.loss.l2_all_params)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("learning_rate", self.learning_rate);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("batch_size", self.batch_size);
        kv.set("patience", self.patience);
        kv.set("max_epochs", self.max_epochs);
        if let Some(s) = self.max_steps {
            kv.set("max_steps", s);
        }
        kv.set("seed", self.seed);
        kv.set("alpha", self.loss.alpha);
        kv.set("include_grad_loss", self.loss.include_grad_loss);
        kv.set("l2_all_params", self.loss.l2_all_params);
        kv
    }
}

/// Optimizer moments and early-stopping bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
}

impl TrainState {
    pub fn new() -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            ..Default::default()
        }
    }
}

/// One bias-corrected Adam update using each tensor's `grad` slot.
pub fn adam_step<P: ParamTree<Tensor>>(params: &mut P, state: &mut TrainState, cfg: &TrainConfig) -> Result<()> {
    let mut missing = None;
    params.visit("", &mut |name, _, t| {
        if missing.is_none() && t.grad.as_ref().is_none_or(|g| g.len() != t.len()) {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::contract("adam_step", format!("no gradient for parameter {name}")));
    }
    if state.m.is_empty() {
        params.visit("", &mut |_, _, t| {
            state.m.push(vec![0.0; t.len()]);
            state.v.push(vec![0.0; t.len()]);
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut i = 0;
    let (m_all, v_all) = (&mut state.m, &mut state.v);
    params.visit_mut("", &mut |_, _, p| {
        let g = p.grad.take().unwrap_or_default();
        let (m, v) = (&mut m_all[i], &mut v_all[i]);
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let mh = *mj / bc1;
            let vh = *vj / bc2;
            *w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
        i += 1;
    });
    Ok(())
}

/// Copies graph gradients for `vars` into the matching tensors of `params`.
pub fn store_grads(params: &mut DacnParams<Tensor>, vars: &DacnParams<Var>, grads: &Gradients) {
    let vars: Vec<Var> = named_vars(vars).into_iter().map(|(_, _, v)| v).collect();
    let mut i = 0;
    params.visit_mut("", &mut |_, _, t| {
        grads.write_into(vars[i], t);
        i += 1;
    });
}

/// Forward, loss, backward and one Adam step on an HR batch `[B, P, P, G]`.
/// Returns the loss terms evaluated before the update.
pub fn train_step(
    params: &mut DacnParams<Tensor>,
    state: &mut TrainState,
    model: &DacnConfig,
    cfg: &TrainConfig,
    hr: &Tensor,
) -> Result<LossTerms> {
    let lr = degrade_area_tensor(hr, model.scale)?;
    let mut g = Graph::new();
    let vars = register(&mut g, params);
    let x = g.input(lr);
    let y = g.input(hr.clone());
    let out = forward(&mut g, x, &vars, model, true)?;
    let (loss, terms) = total_loss(&mut g, y, out.output, &vars, &cfg.loss)?;
    let grads = g.backward(loss)?;
    store_grads(params, &vars, &grads);
    adam_step(params, state, cfg)?;
    params.apply_batch_stats(&out.bn_stats)?;
    Ok(terms)
}

/// Inference-mode objective on an HR batch.
pub fn eval_loss(params: &DacnParams<Tensor>, model: &DacnConfig, loss: &LossConfig, hr: &Tensor) -> Result<LossTerms> {
    let lr = degrade_area_tensor(hr, model.scale)?;
    let mut g = Graph::new();
    let vars = params.map("", &mut |_, _, t| g.input(t.clone()));
    let x = g.input(lr);
    let y = g.input(hr.clone());
    let out = forward(&mut g, x, &vars, model, false)?;
    Ok(total_loss(&mut g, y, out.output, &vars, loss)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: DacnParams<Tensor>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: u64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
    }
    s
}

/// Clear patience semantics: improvement resets the counter, otherwise it
/// grows and training stops once it reaches `patience`.
#[derive(Debug, Clone, Copy)]
pub struct EarlyStopping {
    pub patience: usize,
}

impl EarlyStopping {
    /// Records `val_loss`; returns `(improved, should_stop)`.
    pub fn observe(&self, state: &mut TrainState, val_loss: f64) -> (bool, bool) {
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.epochs_since_improvement = 0;
            (true, false)
        } else {
            state.epochs_since_improvement += 1;
            (false, state.epochs_since_improvement >= self.patience)
        }
    }
}

type Sample = (usize, std::ops::Range<usize>);

fn samples(split: &DatasetSplit, indices: &[usize], model: &DacnConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &i in indices {
        let bands = split.patches[i].bands;
        let plan = plan_groups(bands, model.group_size, model.group_stride)?;
        out.extend(plan.groups.iter().map(|r| (i, r.clone())));
    }
    Ok(out)
}

fn stack(split: &DatasetSplit, batch: &[Sample]) -> Result<Tensor> {
    let p = split.patch_size;
    let g = batch[0].1.len();
    let mut data = Vec::with_capacity(batch.len() * p * p * g);
    for (i, r) in batch {
        let cube = split.patches[*i].select_bands(r.start, r.end)?;
        data.extend_from_slice(cube.to_tensor().data());
    }
    Tensor::new(vec![batch.len(), p, p, g], data)
}

fn validation_loss(params: &DacnParams<Tensor>, model: &DacnConfig, cfg: &TrainConfig, split: &DatasetSplit, val: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in val.chunks(cfg.batch_size) {
        let terms = eval_loss(params, model, &cfg.loss, &stack(split, chunk)?)?;
        sum += terms.total * chunk.len() as f64;
    }
    Ok(sum / val.len() as f64)
}

pub fn train(model: &DacnConfig, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = init_params(model, model.seed)?;
    train_from(init, model, split, cfg)
}

pub fn train_from(
    mut params: DacnParams<Tensor>,
    model: &DacnConfig,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::config(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            split.train.len(),
            split.val.len()
        )));
    }
    if split.scale != model.scale {
        return Err(Error::config(format!(
            "dataset scale {} differs from model scale {}",
            split.scale, model.scale
        )));
    }
    let mut train_samples = samples(split, &split.train, model)?;
    let val_samples = samples(split, &split.val, model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::new();
    let stopper = EarlyStopping { patience: cfg.patience };
    let mut history = Vec::new();
    let mut best = (params.clone(), 0usize);
    'epochs: for epoch in 1..=cfg.max_epochs {
        train_samples.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        let mut capped = false;
        for batch in train_samples.chunks(cfg.batch_size) {
            let terms = train_step(&mut params, &mut state, model, cfg, &stack(split, batch)?)?;
            sum += terms.total * batch.len() as f64;
            seen += batch.len();
            if cfg.max_steps.is_some_and(|m| state.step >= m as u64) {
                capped = true;
                break;
            }
        }
        let val_loss = validation_loss(&params, model, cfg, split, &val_samples)?;
        history.push(EpochRecord {
            epoch,
            train_loss: sum / seen as f64,
            val_loss,
        });
        let (improved, stop) = stopper.observe(&mut state, val_loss);
        if improved {
            best = (params.clone(), epoch);
        }
        if stop || capped {
            break 'epochs;
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        history,
        best_epoch: best.1,
        steps: state.step,
    })
}
