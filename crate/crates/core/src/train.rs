//! Synthetic tasks, label-smoothed cross-entropy, Adam and the training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Gradients};
use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{argmax, Model, BOS, EOS, FIRST_TOKEN, PAD};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    SyntheticLm,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::SyntheticLm => "synthetic-lm",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::SyntheticLm => "perplexity",
            _ => "token_accuracy",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "synthetic-lm" | "lm" => Ok(TaskKind::SyntheticLm),
            other => Err(Error::Config(format!("unknown task {other:?} (copy, reverse, synthetic-lm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Task {
    pub fn new(kind: TaskKind, vocab: usize, len: usize) -> Self {
        Task {
            kind,
            vocab,
            min_len: len,
            max_len: len,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < FIRST_TOKEN + 1 {
            return Err(Error::Config(format!("task vocab must be at least {}, got {}", FIRST_TOKEN + 1, self.vocab)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        Ok(())
    }

    pub fn take_from(mut self, kv: &mut KeyValues) -> Result<Self> {
        if let Some(k) = kv.take::<TaskKind>("task")? {
            self.kind = k;
        }
        if let Some(l) = kv.take::<usize>("length")? {
            self.min_len = l;
            self.max_len = l;
        }
        self.min_len = kv.take_or("min_len", self.min_len)?;
        self.max_len = kv.take_or("max_len", self.max_len)?;
        self.seed = kv.take_or("task_seed", self.seed)?;
        self.validate()?;
        Ok(self)
    }

    /// Row-stochastic next-token table over ordinary tokens, fixed by the
    /// task seed. Rows are peaked so the language has learnable structure.
    pub fn bigram_table(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6269_6772_616d);
        let n = self.vocab - FIRST_TOKEN;
        (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(4)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }
}

/// Sources and targets of one batch; every sequence has the same length.
/// Decoder-only tasks have no sources.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
}

impl Batch {
    /// `[BOS] + target`.
    pub fn decoder_input(&self) -> Vec<Vec<usize>> {
        self.target
            .iter()
            .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect()
    }

    /// `target + [EOS]`, flattened row-major.
    pub fn decoder_output(&self) -> Vec<usize> {
        self.target
            .iter()
            .flat_map(|t| t.iter().copied().chain(std::iter::once(EOS)))
            .collect()
    }

    pub fn source(&self) -> Option<&[Vec<usize>]> {
        (!self.source.is_empty()).then_some(self.source.as_slice())
    }
}

pub fn make_batch(task: &Task, batch: usize, rng: &mut impl Rng) -> Batch {
    let len = rng.gen_range(task.min_len..=task.max_len);
    let mut source = Vec::with_capacity(batch);
    let mut target = Vec::with_capacity(batch);
    match task.kind {
        TaskKind::Copy | TaskKind::Reverse => {
            for _ in 0..batch {
                let s: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_TOKEN..task.vocab)).collect();
                let mut t = s.clone();
                if task.kind == TaskKind::Reverse {
                    t.reverse();
                }
                source.push(s);
                target.push(t);
            }
        }
        TaskKind::SyntheticLm => {
            let table = task.bigram_table();
            let dists: Vec<WeightedIndex<f64>> = table
                .iter()
                .map(|row| WeightedIndex::new(row).expect("positive weights"))
                .collect();
            for _ in 0..batch {
                let mut cur = rng.gen_range(0..dists.len());
                let mut t = Vec::with_capacity(len);
                for _ in 0..len {
                    t.push(cur + FIRST_TOKEN);
                    cur = dists[cur].sample(rng);
                }
                target.push(t);
            }
        }
    }
    Batch { source, target }
}

/// Mean over non-pad rows of the label-smoothed cross-entropy.
pub fn label_smoothed_ce(logits: &Matrix, targets: &[usize], smoothing: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let l = g.constant(logits.clone());
    let loss = g.smoothed_cross_entropy(l, targets, smoothing, Some(PAD))?;
    Ok(g.value(loss).get(0, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_interval: usize,
    pub eval_batch: usize,
    pub seed: u64,
    /// Stop once the evaluation metric reaches this value (accuracy tasks).
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            batch: 64,
            steps: 5000,
            eval_interval: 100,
            eval_batch: 64,
            seed: 0,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and epsilon positive".into()));
        }
        if self.batch == 0 || self.eval_interval == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch, eval_interval and eval_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn take_from(mut self, kv: &mut KeyValues) -> Result<Self> {
        self.lr = kv.take_or("lr", self.lr)?;
        self.beta1 = kv.take_or("beta1", self.beta1)?;
        self.beta2 = kv.take_or("beta2", self.beta2)?;
        self.adam_eps = kv.take_or("adam_eps", self.adam_eps)?;
        self.label_smoothing = kv.take_or("label_smoothing", self.label_smoothing)?;
        self.batch = kv.take_or("batch", self.batch)?;
        self.steps = kv.take_or("steps", self.steps)?;
        self.eval_interval = kv.take_or("eval_interval", self.eval_interval)?;
        self.eval_batch = kv.take_or("eval_batch", self.eval_batch)?;
        self.seed = kv.take_or("seed", self.seed)?;
        if let Some(s) = kv.take::<f64>("stop_at")? {
            self.stop_at = Some(s);
        }
        self.validate()?;
        Ok(self)
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Non-finite gradients abort before anything is modified.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for id in store.ids() {
        if let Some(g) = grads.param(id) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: g.shape(),
                    right: store.get(id).shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: "adam_step",
                    detail: format!("gradient of {}", store.name(id)),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(g) = grads.param(id) else { continue };
        let i = id.index();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.get_mut(id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub metric_name: &'static str,
    pub metric_value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Training loss of every step, in order.
    pub losses: Vec<f64>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,metric_name,metric_value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.metric_name, r.metric_value);
        }
        s
    }

    pub fn last_metric(&self) -> Option<f64> {
        self.rows.last().map(|r| r.metric_value)
    }

    /// Mean of the `window` losses ending at `step` (1-based).
    pub fn moving_average(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.losses.len() || window == 0 || window > step {
            return None;
        }
        let w = &self.losses[step - window..step];
        Some(w.iter().sum::<f64>() / window as f64)
    }
}

/// Teacher-forced metric on a batch: token accuracy (copy, reverse) or
/// perplexity (synthetic-lm), padding excluded.
pub fn evaluate(model: &Model, task: &Task, batch: &Batch) -> Result<f64> {
    let logits = model.logits(batch.source(), &batch.decoder_input())?;
    let targets = batch.decoder_output();
    match task.kind {
        TaskKind::SyntheticLm => Ok(label_smoothed_ce(&logits, &targets, 0.0)?.exp()),
        _ => {
            let mut hit = 0usize;
            let mut total = 0usize;
            for (r, &t) in targets.iter().enumerate() {
                if t == PAD {
                    continue;
                }
                total += 1;
                if argmax(logits.row(r)) == t {
                    hit += 1;
                }
            }
            Ok(hit as f64 / total.max(1) as f64)
        }
    }
}

/// Where the trainer writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
}

fn save_store(model: &Model, store: &ParamStore, path: &Path) -> Result<()> {
    Checkpoint::from_store(model.cfg.to_kv().to_text(), store).save(path)
}

/// Runs the training loop. The evaluation batch is drawn once from a
/// stream derived from the seed, so metrics are comparable across rows.
pub fn train(model: &mut Model, task: &Task, cfg: &TrainConfig, out: &TrainOutputs) -> Result<TrainLog> {
    cfg.validate()?;
    task.validate()?;
    if task.vocab > model.cfg.vocab {
        return Err(Error::Config(format!("task vocab {} exceeds model vocab {}", task.vocab, model.cfg.vocab)));
    }
    if (task.kind == TaskKind::SyntheticLm) != model.cfg.is_decoder_only() {
        return Err(Error::Config(format!(
            "task {} needs a {} model",
            task.kind.name(),
            if task.kind == TaskKind::SyntheticLm { "decoder-only" } else { "encoder-decoder" }
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let eval = make_batch(task, cfg.eval_batch, &mut eval_rng);
    let mut adam = AdamState::new(&model.store);
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let batch = make_batch(task, cfg.batch, &mut rng);
        let before = model.store.clone();
        let outcome = (|| {
            let mut g = Graph::new(&model.store);
            let logits = model.logits_graph(&mut g, batch.source(), &batch.decoder_input())?;
            let loss = g.smoothed_cross_entropy(logits, &batch.decoder_output(), cfg.label_smoothing, Some(PAD))?;
            let value = g.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: "loss",
                    detail: format!("{value}"),
                });
            }
            Ok((value, g.backward(loss)?))
        })();
        let (loss, grads) = match outcome {
            Ok(v) => v,
            Err(e @ (Error::NonFinite { .. } | Error::Diverged { .. })) => return Err(diverged(model, &before, step, e, out)),
            Err(e) => return Err(e),
        };
        if let Err(e) = adam_step(&mut model.store, &grads, &mut adam, cfg) {
            return Err(diverged(model, &before, step, e, out));
        }
        log.losses.push(loss);
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let metric = evaluate(model, task, &eval)?;
            log.rows.push(LogRow {
                step,
                loss,
                metric_name: task.kind.metric_name(),
                metric_value: metric,
            });
            if let Some(path) = &out.checkpoint {
                model.save(path)?;
            }
            if cfg.stop_at.is_some_and(|s| metric >= s) && task.kind != TaskKind::SyntheticLm {
                break;
            }
        }
    }
    if let Some(path) = &out.checkpoint {
        model.save(path)?;
    }
    Ok(log)
}

fn diverged(model: &mut Model, last_good: &ParamStore, step: usize, cause: Error, out: &TrainOutputs) -> Error {
    if let Some(path) = &out.checkpoint {
        if let Err(e) = save_store(model, last_good, path) {
            return e;
        }
    }
    model.store = last_good.clone();
    Error::Diverged {
        step,
        detail: cause.to_string(),
    }
}
