use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{model_forward, ModelWeights};
use super::task::{Dataset, Example};
use crate::attention::ModelConfig;
use crate::diagnostics::{attention_entropy, DiffusionReport};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-9
}
fn default_lr() -> f64 {
    3e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("adam eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Fraction of target positions predicted correctly, teacher-forced.
    pub valid_acc: f64,
    pub mean_attn_entropy: f64,
}

pub const METRICS_CSV_HEADER: &str = "step,train_loss,valid_loss,valid_acc,mean_attn_entropy";

/// Metric CSV: a `# seed=...` provenance line, the header, one row per entry.
pub fn metrics_csv(rows: &[MetricRow], seed: u64, run: &str) -> String {
    let mut s = format!("# seed={seed} run={run}\n{METRICS_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.train_loss, r.valid_loss, r.valid_acc, r.mean_attn_entropy
        )
        .unwrap();
    }
    s
}

/// Adam with fixed learning rate and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Result of scoring a model on a set of examples.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_attn_entropy: f64,
    /// Per example `[T x vocab]` logits.
    pub logits: Vec<Tensor>,
    /// Per example `[layer][head]` attention weights.
    pub attention: Vec<Vec<Vec<Tensor>>>,
}

const EVAL_CHUNK: usize = 64;

/// Teacher-forced loss, accuracy and attention entropy over `examples`.
pub fn evaluate(
    cfg: &ModelConfig,
    weights: &ModelWeights<Tensor>,
    examples: &[Example],
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::config("evaluation needs at least one example"));
    }
    let mut loss_sum = 0.0;
    let mut scored = 0usize;
    let mut logits = Vec::with_capacity(examples.len());
    let mut attention = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = weights.map(&mut |t| g.constant(t.clone()));
        let inputs: Vec<&[usize]> = chunk.iter().map(|e| e.inputs()).collect();
        let labels: Vec<Option<usize>> = chunk.iter().flat_map(|e| e.labels()).collect();
        let out = model_forward(&mut g, &inputs, &bound, cfg)?;
        let loss = g.cross_entropy(out.logits, &labels)?;
        let n = labels.iter().flatten().count();
        loss_sum += g.value(loss).item() * n as f64;
        scored += n;
        let all = g.value(out.logits);
        let t = inputs[0].len();
        for (s, maps) in out.attention.iter().enumerate() {
            logits.push(all.slice_rows(s * t, t)?);
            attention.push(
                maps.iter()
                    .map(|layer| layer.iter().map(|&a| g.value(a).clone()).collect())
                    .collect(),
            );
        }
    }
    let accuracy = token_accuracy(&logits, examples);
    let mean_attn_entropy = mean_entropy(&attention, cfg.causal)?;
    Ok(Evaluation {
        loss: loss_sum / scored as f64,
        accuracy,
        mean_attn_entropy,
        logits,
        attention,
    })
}

/// Correct argmax predictions over scored target positions.
pub fn token_accuracy(logits: &[Tensor], examples: &[Example]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (l, e) in logits.iter().zip(examples) {
        for (p, label) in e.labels().into_iter().enumerate() {
            let Some(label) = label else { continue };
            let row = l.row(p);
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0;
            correct += usize::from(argmax == label);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

fn mean_entropy(attention: &[Vec<Vec<Tensor>>], causal: bool) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for a in attention.iter().flatten().flatten() {
        sum += attention_entropy(a, causal)?.mean_entropy;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    pub weights: ModelWeights<Tensor>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> &MetricRow {
        self.rows.last().expect("at least one metric row")
    }
}

/// Trains from a seeded initialization with Adam on target-position
/// cross-entropy. Rows are emitted at step 0, every `eval_every` steps and
/// after the final step.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::config(
            "training needs non-empty train and valid sets",
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = ModelWeights::init(model, &mut init_rng);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);

    let sizes: Vec<usize> = weights.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(cfg, &sizes);
    let mut rows = Vec::new();
    let mut last_train_loss = f64::NAN;

    for step in 0..=cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch)
            .map(|_| &data.train[batch_rng.gen_range(0..data.train.len())])
            .collect();
        let training = step < cfg.steps;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            if step == 0 {
                last_train_loss = batch_loss(model, &weights, &batch, None)?;
            }
            let eval = evaluate(model, &weights, &data.valid)?;
            if !eval.loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            rows.push(MetricRow {
                step,
                train_loss: last_train_loss,
                valid_loss: eval.loss,
                valid_acc: eval.accuracy,
                mean_attn_entropy: eval.mean_attn_entropy,
            });
        }
        if !training {
            break;
        }
        let mut grads = Vec::with_capacity(sizes.len());
        last_train_loss = batch_loss(model, &weights, &batch, Some(&mut grads))?;
        if !last_train_loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step });
        }
        let mut params: Vec<&mut Tensor> =
            weights.named_mut().into_iter().map(|(_, t)| t).collect();
        adam.step(&mut params, &grads);
    }
    Ok(TrainOutcome { rows, weights })
}

/// Mean target cross-entropy of a batch; fills `grads` (in `named()` order) when given.
fn batch_loss(
    model: &ModelConfig,
    weights: &ModelWeights<Tensor>,
    batch: &[&Example],
    grads: Option<&mut Vec<Vec<f64>>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let want_grad = grads.is_some();
    let bound = weights.map(&mut |t| {
        if want_grad {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    });
    let inputs: Vec<&[usize]> = batch.iter().map(|e| e.inputs()).collect();
    let labels: Vec<Option<usize>> = batch.iter().flat_map(|e| e.labels()).collect();
    let out = model_forward(&mut g, &inputs, &bound, model)?;
    let loss = g.cross_entropy(out.logits, &labels)?;
    let value = g.value(loss).item();
    if let Some(grads) = grads {
        if value.is_finite() {
            g.backward(loss)?;
            grads.extend(
                bound
                    .named()
                    .iter()
                    .map(|(_, &v)| g.grad(v).expect("param gradient").to_vec()),
            );
        }
    }
    Ok(value)
}

/// Diffusion report of trained weights on `examples`.
pub fn diffusion_report(
    label: &str,
    checkpoint_step: usize,
    cfg: &ModelConfig,
    weights: &ModelWeights<Tensor>,
    examples: &[Example],
) -> Result<DiffusionReport> {
    let eval = evaluate(cfg, weights, examples)?;
    DiffusionReport::from_samples(label, checkpoint_step, &eval.attention, cfg.causal)
}
