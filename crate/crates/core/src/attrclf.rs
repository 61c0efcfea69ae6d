//! Attribute classifier over frozen decoder hidden states.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::ops::softmax;
use crate::diff::{AdamState, Graph, InverseSqrtSchedule, Tensor, Var};
use crate::seed;
use crate::seq2seq::checkpoint::{self, meta_value};
use crate::seq2seq::{forced_decode, ModelParams, Pair, ParamSet};
use crate::{Error, Result};

/// How decoder states are reduced before classification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    #[default]
    Meanpool,
    TokenLevel,
    CumulativeSum,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 3] = [
        PoolingStrategy::Meanpool,
        PoolingStrategy::TokenLevel,
        PoolingStrategy::CumulativeSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolingStrategy::Meanpool => "meanpool",
            PoolingStrategy::TokenLevel => "token_level",
            PoolingStrategy::CumulativeSum => "cumulative_sum",
        }
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolingStrategy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling strategy `{s}`")))
    }
}

/// Reduces `hidden` (`[k, d]`, one row per position) to the classifier
/// input: `[d]` for the pooled strategies, the rows themselves for
/// [`PoolingStrategy::TokenLevel`].
pub fn pool(hidden: &Tensor, strategy: PoolingStrategy) -> Result<Tensor> {
    if hidden.ndim() != 2 || hidden.rows() == 0 {
        return Err(Error::Contract("pooling needs at least one hidden state".into()));
    }
    let (k, d) = (hidden.rows(), hidden.cols());
    let mut sum = vec![0.0; d];
    for i in 0..k {
        for (s, v) in sum.iter_mut().zip(hidden.row(i)) {
            *s += v;
        }
    }
    match strategy {
        PoolingStrategy::Meanpool => Ok(Tensor::vector(sum.into_iter().map(|s| s / k as f64).collect())),
        PoolingStrategy::CumulativeSum => Ok(Tensor::vector(sum)),
        PoolingStrategy::TokenLevel => Ok(hidden.clone()),
    }
}

/// Normalised class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Two-layer ReLU classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `[d_model, d_hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[d_hidden, C]`
    pub w2: Tensor,
    pub b2: Tensor,
    pub strategy: PoolingStrategy,
}

pub(crate) struct ClassifierVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub fn hidden_width(d_model: usize) -> usize {
    (d_model / 4).max(16)
}

impl ClassifierParams {
    pub fn zeros(d_model: usize, num_classes: usize, strategy: PoolingStrategy) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let h = hidden_width(d_model);
        Ok(ClassifierParams {
            w1: Tensor::zeros(&[d_model, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, num_classes]),
            b2: Tensor::zeros(&[num_classes]),
            strategy,
        })
    }

    /// Uniform fan-in weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(d_model: usize, num_classes: usize, strategy: PoolingStrategy, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(d_model, num_classes, strategy)?;
        let mut rng = seed::rng(seed);
        let h = hidden_width(d_model);
        p.w1 = Tensor::uniform(&[d_model, h], (d_model as f64).powf(-0.5), &mut rng);
        p.w2 = Tensor::uniform(&[h, num_classes], (h as f64).powf(-0.5), &mut rng);
        Ok(p)
    }

    pub fn num_classes(&self) -> usize {
        self.b2.numel()
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    fn param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("layer1.weight", self.w1.clone());
        ps.push("layer1.bias", self.b1.clone());
        ps.push("layer2.weight", self.w2.clone());
        ps.push("layer2.bias", self.b2.clone());
        ps
    }

    pub fn checksum(&self) -> String {
        self.param_set().checksum()
    }

    pub(crate) fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            w1: g.borrowed(&self.w1, trainable),
            b1: g.borrowed(&self.b1, trainable),
            w2: g.borrowed(&self.w2, trainable),
            b2: g.borrowed(&self.b2, trainable),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = vec![
            ("kind".to_string(), "classifier".to_string()),
            ("pooling".to_string(), self.strategy.to_string()),
            ("num_classes".to_string(), self.num_classes().to_string()),
            ("d_model".to_string(), self.d_model().to_string()),
        ];
        checkpoint::save(dir, &meta, &self.param_set())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, ps) = checkpoint::load(dir)?;
        if meta_value(&meta, "kind")? != "classifier" {
            return Err(Error::Structure(format!("{} is not a classifier checkpoint", dir.display())));
        }
        let strategy: PoolingStrategy = meta_value(&meta, "pooling")?.parse()?;
        let parse = |k: &str| -> Result<usize> {
            meta_value(&meta, k)?
                .parse()
                .map_err(|_| Error::Structure(format!("bad `{k}` in classifier manifest")))
        };
        let expected = Self::zeros(parse("d_model")?, parse("num_classes")?, strategy)?;
        if !expected.param_set().same_structure(&ps) {
            return Err(Error::Structure("classifier tensors do not match header".into()));
        }
        let t = ps.tensors();
        Ok(ClassifierParams {
            w1: t[0].clone(),
            b1: t[1].clone(),
            w2: t[2].clone(),
            b2: t[3].clone(),
            strategy,
        })
    }
}

/// `layer2(relu(layer1(x)))` for every row of `x`.
fn logits_graph(g: &mut Graph<'_>, v: &ClassifierVars, x: Var, drop: Option<(f64, &mut seed::Rng)>) -> Result<Var> {
    let h = g.matmul(x, v.w1)?;
    let h = g.add_bias(h, v.b1)?;
    let mut h = g.relu(h);
    if let Some((p, rng)) = drop {
        h = g.dropout(h, p, rng);
    }
    let o = g.matmul(h, v.w2)?;
    g.add_bias(o, v.b2)
}

/// `-log P(label | x)`: `x` is `[1, d]` for the pooled strategies or the
/// `[k, d]` state rows for token level, whose per-row probabilities are
/// averaged.
pub(crate) fn neg_log_prob(
    g: &mut Graph<'_>,
    v: &ClassifierVars,
    strategy: PoolingStrategy,
    x: Var,
    label: usize,
) -> Result<Var> {
    let logits = logits_graph(g, v, x, None)?;
    match strategy {
        PoolingStrategy::TokenLevel => {
            let k = g.value(x).rows();
            let probs = g.softmax(logits, 1)?;
            let avg = g.constant(Tensor::full(&[1, k], 1.0 / k as f64));
            let mean = g.matmul(avg, probs)?;
            let log_mean = g.ln(mean)?;
            g.cross_entropy(log_mean, &[label], 0.0)
        }
        _ => g.cross_entropy(logits, &[label], 0.0),
    }
}

/// Class distribution for a pooled vector (`[d]`) or token rows (`[k, d]`).
pub fn classify(pooled: &Tensor, params: &ClassifierParams) -> Result<ClassDistribution> {
    let d = params.d_model();
    let x = match pooled.ndim() {
        1 => pooled.clone().reshape(&[1, d])?,
        _ => pooled.clone(),
    };
    if x.cols() != d || x.rows() == 0 {
        return Err(Error::Shape(format!("classifier expects width {d}, got {:?}", pooled.shape())));
    }
    let mut g = Graph::new();
    let v = params.bind(&mut g, false);
    let xv = g.leaf(x, false);
    let logits = logits_graph(&mut g, &v, xv, None)?;
    let probs = softmax(g.value(logits), 1)?;
    let (k, c) = (probs.rows(), probs.cols());
    let mut avg = vec![0.0; c];
    for i in 0..k {
        for (a, p) in avg.iter_mut().zip(probs.row(i)) {
            *a += p / k as f64;
        }
    }
    Ok(ClassDistribution { probs: avg })
}

/// Forced-decoded states of one labelled pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1 + target length, d_model]`
    pub hidden: Tensor,
    pub label: usize,
}

/// Runs the frozen backbone once per pair.
pub fn extract_features(base: &ModelParams, data: &[(Pair, usize)], num_classes: usize) -> Result<Vec<Sample>> {
    data.iter()
        .map(|(p, label)| {
            if *label >= num_classes {
                return Err(Error::Data(format!("label {label} outside [0, {num_classes})")));
            }
            Ok(Sample {
                hidden: forced_decode(base, &p.source, &p.target)?,
                label: *label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub pooling: PoolingStrategy,
    pub updates: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// Target-token budget per batch.
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    /// Applied to the hidden layer during training.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            pooling: PoolingStrategy::Meanpool,
            updates: 100,
            learning_rate: 0.002,
            warmup_steps: 20,
            batch_tokens: 2000,
            label_smoothing: 0.1,
            dropout: 0.1,
            seed: 1,
        }
    }
}

/// Trains on precomputed features. Pooled strategies use one vector per
/// sample; token level uses every row with the sample's label.
pub fn train_on_features(samples: &[Sample], num_classes: usize, cfg: &ClassifierConfig) -> Result<ClassifierParams> {
    let Some(first) = samples.first() else {
        return Err(Error::Data("empty classifier training set".into()));
    };
    if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
        return Err(Error::Data(format!("label {} outside [0, {num_classes})", s.label)));
    }
    let d = first.hidden.cols();
    let mut params = ClassifierParams::init(d, num_classes, cfg.pooling, seed::sub_seed(cfg.seed, "classifier-init"))?;
    let inputs: Vec<Tensor> = samples
        .iter()
        .map(|s| match cfg.pooling {
            PoolingStrategy::TokenLevel => Ok(s.hidden.clone()),
            p => pool(&s.hidden, p)?.reshape(&[1, d]),
        })
        .collect::<Result<_>>()?;
    let sched = InverseSqrtSchedule::new(cfg.learning_rate, cfg.warmup_steps);
    let mut adam = AdamState::new(&[params.w1.clone(), params.b1.clone(), params.w2.clone(), params.b2.clone()]);
    let mut batch_rng = seed::named_rng(cfg.seed, "classifier-batches");
    let mut drop_rng = seed::named_rng(cfg.seed, "classifier-dropout");
    let mut update = 0;
    while update < cfg.updates {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut batch_rng);
        let mut start = 0;
        while start < order.len() && update < cfg.updates {
            let mut end = start;
            let mut tokens = 0;
            while end < order.len() && (end == start || tokens + samples[order[end]].hidden.rows() <= cfg.batch_tokens) {
                tokens += samples[order[end]].hidden.rows();
                end += 1;
            }
            let batch = &order[start..end];
            start = end;
            let mut x = Tensor::zeros(&[0, d]);
            let mut labels = Vec::new();
            for &i in batch {
                x.append_rows(&inputs[i])?;
                labels.extend(std::iter::repeat(samples[i].label).take(inputs[i].rows()));
            }
            let grads = {
                let mut g = Graph::new();
                let v = params.bind(&mut g, true);
                let xv = g.leaf(x, false);
                let drop = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut drop_rng));
                let logits = logits_graph(&mut g, &v, xv, drop)?;
                let loss = g.cross_entropy(logits, &labels, cfg.label_smoothing)?;
                let mut gr = g.backward(loss)?;
                [v.w1, v.b1, v.w2, v.b2].map(|var| gr.take(var))
            };
            update += 1;
            let mut ts = [
                std::mem::replace(&mut params.w1, Tensor::zeros(&[0])),
                std::mem::replace(&mut params.b1, Tensor::zeros(&[0])),
                std::mem::replace(&mut params.w2, Tensor::zeros(&[0])),
                std::mem::replace(&mut params.b2, Tensor::zeros(&[0])),
            ];
            adam.step(&mut ts, &grads, sched.lr(update))?;
            let [w1, b1, w2, b2] = ts;
            params = ClassifierParams { w1, b1, w2, b2, ..params };
        }
    }
    Ok(params)
}

/// Extracts features from the frozen `base` and trains a classifier.
pub fn train_classifier(
    base: &ModelParams,
    data: &[(Pair, usize)],
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<ClassifierParams> {
    let samples = extract_features(base, data, num_classes)?;
    train_on_features(&samples, num_classes, cfg)
}

/// Accuracy of argmax predictions over whole-sequence pooling.
pub fn evaluate_classifier(params: &ClassifierParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty set".into()));
    }
    let mut correct = 0;
    for s in samples {
        let dist = classify(&pool(&s.hidden, params.strategy)?, params)?;
        if dist.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
