//! Dice loss, the Nadam optimizer, plateau learning-rate schedule, early
//! stopping and the epoch loop.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegDataset;
use crate::error::{Error, Result};
use crate::graph::{apply_running_stats, backward, forward, GradientTape, Gradients, ModelGraph, ParamKind};
use crate::layers::Mode;
use crate::metrics::{compute_metrics, per_sample_confusion, MetricRow, DEFAULT_THRESHOLD};
use crate::model::component_of;
use crate::tensor::{Element, Tensor};
use crate::weights::WeightStore;

pub const DICE_SMOOTH: f64 = 1.0;

/// Soft dice loss `1 - (2 Σ p·t + s) / (Σ p + Σ t + s)` over the whole batch,
/// averaged over channels (classes), and its gradient w.r.t. `pred`.
pub fn dice_loss_with_grad<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<(f64, Tensor<T>)> {
    let s = pred.shape();
    if s != target.shape() {
        return Err(Error::Shape {
            op: "dice_loss",
            lhs: s,
            rhs: target.shape(),
        });
    }
    let k = s.c.max(1);
    let p = s.plane();
    let mut inter = vec![0f64; k];
    let mut sp = vec![0f64; k];
    let mut st = vec![0f64; k];
    for n in 0..s.n {
        for c in 0..s.c {
            for (&a, &b) in pred.plane(n, c).iter().zip(target.plane(n, c)) {
                let (a, b) = (a.as_f64(), b.as_f64());
                inter[c] += a * b;
                sp[c] += a;
                st[c] += b;
            }
        }
    }
    let mut loss = 0.0;
    let mut coef = Vec::with_capacity(k);
    for c in 0..k {
        let num = 2.0 * inter[c] + smooth;
        let den = sp[c] + st[c] + smooth;
        loss += 1.0 - num / den;
        // d/dp of -(num/den) = -(2 t den - num) / den²
        coef.push((num, den));
    }
    loss /= k as f64;
    let mut grad = Vec::with_capacity(s.numel());
    for idx in 0..s.n * s.c {
        let c = idx % s.c;
        let (num, den) = coef[c];
        for &t in &target.data()[idx * p..(idx + 1) * p] {
            let g = -(2.0 * t.as_f64() * den - num) / (den * den) / k as f64;
            grad.push(T::from_f64(g));
        }
    }
    Ok((loss, Tensor::new(s, grad)?))
}

pub fn dice_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64> {
    dice_loss_with_grad(pred, target, smooth).map(|(l, _)| l)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decay of the momentum schedule `β1 (1 - ½ · 0.96^(decay·t))`.
    pub schedule_decay: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            schedule_decay: 0.004,
        }
    }
}

/// Coefficients shared by every parameter within one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoeffs {
    pub step: u64,
    mu_t: f64,
    mu_next: f64,
    m_schedule_new: f64,
    m_schedule_next: f64,
    v_correction: f64,
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Nesterov-accelerated Adam with the momentum-cache schedule.
#[derive(Clone, Debug)]
pub struct Nadam {
    pub cfg: NadamConfig,
    step: u64,
    m_schedule: f64,
    moments: HashMap<String, Moments>,
}

impl Nadam {
    pub fn new(cfg: NadamConfig) -> Self {
        Nadam {
            cfg,
            step: 0,
            m_schedule: 1.0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the step counter and returns this step's coefficients.
    pub fn begin_step(&mut self) -> StepCoeffs {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.cfg;
        let mu_t = c.beta1 * (1.0 - 0.5 * 0.96f64.powf(c.schedule_decay * t));
        let mu_next = c.beta1 * (1.0 - 0.5 * 0.96f64.powf(c.schedule_decay * (t + 1.0)));
        let m_schedule_new = self.m_schedule * mu_t;
        self.m_schedule = m_schedule_new;
        StepCoeffs {
            step: self.step,
            mu_t,
            mu_next,
            m_schedule_new,
            m_schedule_next: m_schedule_new * mu_next,
            v_correction: 1.0 - c.beta2.powf(t),
        }
    }

    /// Updates one parameter slice in place.
    pub fn update<T: Element>(&mut self, name: &str, params: &mut [T], grads: &[T], lr: f64, k: &StepCoeffs) {
        let c = self.cfg;
        let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
        });
        for i in 0..params.len() {
            let g = grads[i].as_f64();
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let g_hat = g / (1.0 - k.m_schedule_new);
            let m_hat = st.m[i] / (1.0 - k.m_schedule_next);
            let v_hat = st.v[i] / k.v_correction;
            let m_bar = (1.0 - k.mu_t) * g_hat + k.mu_next * m_hat;
            let p = params[i].as_f64() - lr * m_bar / (v_hat.sqrt() + c.epsilon);
            params[i] = T::from_f64(p);
        }
    }

    /// One step over every trainable parameter that received a gradient and
    /// passes `filter`. All gradients are checked for finiteness before any
    /// parameter changes.
    pub fn step<T: Element>(
        &mut self,
        graph: &ModelGraph,
        store: &mut WeightStore<T>,
        grads: &Gradients<T>,
        lr: f64,
        filter: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let selected: Vec<(usize, &str)> = graph
            .params()
            .iter()
            .enumerate()
            .filter(|(i, p)| p.kind == ParamKind::Trainable && grads.params[*i].is_some() && filter(&p.name))
            .map(|(i, p)| (i, p.name.as_str()))
            .collect();
        for &(i, name) in &selected {
            let g = grads.params[i].as_ref().expect("selected");
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics { param: name.to_string() });
            }
        }
        let k = self.begin_step();
        for (i, name) in selected {
            let g = grads.params[i].as_ref().expect("selected");
            self.update(name, store.values_mut(name)?, g.data(), lr, &k);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 10,
            min_lr: 0.0,
        }
    }
}

/// Stateful plateau detector: multiplies the learning rate by `factor` once
/// the monitored loss has not improved for `patience` consecutive epochs,
/// then starts counting afresh.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig) -> Self {
        PlateauScheduler {
            cfg,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Feeds one epoch's loss; returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.cfg.patience {
            self.wait = 0;
            return (lr * self.cfg.factor).max(self.cfg.min_lr);
        }
        lr
    }
}

/// Replays `history` through a fresh scheduler and returns `lr` reduced by
/// the factor exactly when the last epoch triggers a reduction.
pub fn reduce_lr_on_plateau(history: &[f64], lr: f64, cfg: &PlateauConfig) -> f64 {
    let mut s = PlateauScheduler::new(*cfg);
    let mut fired = false;
    for &h in history {
        fired = s.observe(h, 1.0) != 1.0;
    }
    if fired {
        (lr * cfg.factor).max(cfg.min_lr)
    } else {
        lr
    }
}

/// True when the last `patience` epochs brought no improvement over the best
/// earlier loss.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut wait = 0;
    for &h in history {
        if h < best {
            best = h;
            wait = 0;
        } else {
            wait += 1;
        }
    }
    wait >= patience
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub plateau: PlateauConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub nadam: NadamConfig,
    pub dice_smooth: f64,
    pub freeze_encoder: bool,
    /// Stop as soon as validation DSC exceeds this value.
    pub target_val_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            lr: 1e-4,
            plateau: PlateauConfig::default(),
            early_stop_patience: 50,
            seed: 42,
            nadam: NadamConfig::default(),
            dice_smooth: DICE_SMOOTH,
            freeze_encoder: false,
            target_val_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return Err(Error::Config("plateau factor must lie in (0, 1)".into()));
        }
        if self.plateau.patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochLimit,
    EarlyStopping,
    TargetReached,
    Numerics(String),
}

pub struct TrainOutcome {
    /// Weights after the last completed epoch.
    pub weights: WeightStore,
    /// Weights of the epoch with the lowest validation loss.
    pub best_weights: WeightStore,
    pub log: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

/// Validation loss (sample-weighted mean of batch losses) and mean per-image
/// metrics with the model in inference mode.
pub fn evaluate_split(
    graph: &ModelGraph,
    store: &WeightStore,
    data: &SegDataset,
    batch_size: usize,
    smooth: f64,
) -> Result<(f64, MetricRow)> {
    let mut loss_sum = 0.0;
    let mut rows = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let p = forward(graph, store, &x, Mode::Infer, None)?;
        loss_sum += dice_loss(&p, &y, smooth)? * chunk.len() as f64;
        for c in per_sample_confusion(&p, &y, DEFAULT_THRESHOLD)? {
            rows.push(compute_metrics(&c));
        }
    }
    let mean = MetricRow::mean(&rows).ok_or_else(|| Error::Other("empty evaluation set".into()))?;
    Ok((loss_sum / data.len() as f64, mean))
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    graph: &ModelGraph,
    store: &mut WeightStore,
    opt: &mut Nadam,
    x: &Tensor,
    y: &Tensor,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = GradientTape::new();
    let p = forward(graph, store, x, Mode::Train, Some(&mut tape))?;
    let (loss, g) = dice_loss_with_grad(&p, y, cfg.dice_smooth)?;
    if !loss.is_finite() {
        return Err(Error::Numerics { param: "loss".into() });
    }
    let grads = backward(graph, store, &tape, &g)?;
    let freeze = cfg.freeze_encoder;
    opt.step(graph, store, &grads, lr, |name| {
        !freeze || component_of(name.split('/').next().unwrap_or(name)) != "encoder"
    })?;
    apply_running_stats(graph, store, &tape)?;
    Ok(loss)
}

/// The full recipe: shuffled mini-batches, Nadam, plateau schedule on the
/// validation loss, early stopping. `on_epoch` sees every record as it is
/// produced.
pub fn train(
    graph: &ModelGraph,
    init: WeightStore,
    train_set: &SegDataset,
    val_set: &SegDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    init.check_against(graph)?;
    let mut store = init;
    let mut best_weights = store.clone();
    let mut best_val = f64::INFINITY;
    let mut opt = Nadam::new(cfg.nadam);
    let mut sched = PlateauScheduler::new(cfg.plateau);
    let mut lr = cfg.lr;
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();
    let mut stop_reason = StopReason::EpochLimit;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let snapshot = store.clone();
        let mut failed = None;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            match train_step(graph, &mut store, &mut opt, &x, &y, lr, cfg) {
                Ok(l) => loss_sum += l * chunk.len() as f64,
                Err(e @ (Error::Numerics { .. } | Error::NonFinite { .. })) => {
                    failed = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(msg) = failed {
            log::warn!("epoch {epoch}: {msg}; keeping the last good weights");
            store = snapshot;
            stop_reason = StopReason::Numerics(msg);
            break;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val_metrics) = evaluate_split(graph, &store, val_set, cfg.batch_size, cfg.dice_smooth)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
            val_dice: val_metrics.dsc,
        };
        on_epoch(&rec);
        log.push(rec);
        if val_loss < best_val {
            best_val = val_loss;
            best_weights = store.clone();
        }
        history.push(val_loss);
        if cfg.target_val_dice.is_some_and(|t| val_metrics.dsc > t) {
            stop_reason = StopReason::TargetReached;
            break;
        }
        if early_stop(&history, cfg.early_stop_patience) {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
        lr = sched.observe(val_loss, lr);
    }
    Ok(TrainOutcome {
        weights: store,
        best_weights,
        log,
        stop_reason,
    })
}
