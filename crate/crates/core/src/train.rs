//! Base translation training and full-model attribute finetuning.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::{AdamState, Graph, InverseSqrtSchedule};
use crate::seed;
use crate::seq2seq::{bind, packed_loss, Dropout, ModelConfig, ModelParams, Packed, Pair};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Target-token budget per batch, EOS included.
    pub batch_tokens: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub max_updates: u64,
    pub label_smoothing: f64,
    /// Overrides the model config's dropout when set.
    pub dropout: Option<f64>,
    /// Updates between evaluations (dev loss and metrics log line).
    pub eval_interval: u64,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tokens: 1000,
            learning_rate: 2e-3,
            warmup_steps: 200,
            max_updates: 3000,
            label_smoothing: 0.1,
            dropout: None,
            eval_interval: 100,
            patience: 3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Small-data attribute finetuning recipe.
    pub fn finetune() -> Self {
        TrainConfig {
            batch_tokens: 1000,
            learning_rate: 1e-4,
            warmup_steps: 20,
            max_updates: 60,
            eval_interval: 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("learning_rate must be >= 0 and label_smoothing in [0, 1)".into()));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} not in [0, 1)")));
            }
        }
        Ok(())
    }

    fn dropout_for(&self, model: &ModelConfig) -> f64 {
        self.dropout.unwrap_or(model.dropout)
    }
}

/// One metrics-log entry.
#[derive(Clone, Debug, PartialEq)]
pub struct LogPoint {
    pub update: u64,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    pub lr: f64,
    pub dev_loss: Option<f64>,
}

/// Training output: final parameters plus the metrics curve.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub log: Vec<LogPoint>,
    pub updates: u64,
}

impl TrainResult {
    /// Tab-separated `update loss lr dev_loss` lines; `-` for no dev loss.
    pub fn log_lines(&self) -> String {
        let mut s = String::new();
        for p in &self.log {
            let dev = p.dev_loss.map_or("-".to_string(), |d| format!("{d:.6}"));
            let _ = writeln!(s, "{}\t{:.6}\t{:.6e}\t{}", p.update, p.loss, p.lr, dev);
        }
        s
    }

    pub fn append_log(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(self.log_lines().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Groups shuffled pair indices into batches of at most `budget` target
/// tokens; a single longer pair forms its own batch.
fn make_batches(pairs: &[Pair], budget: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = pairs[i].target.tokens.len() + 1;
        if !cur.is_empty() && tokens + n > budget {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Token-averaged cross-entropy (no smoothing, no dropout) over `pairs`.
pub fn mean_loss(params: &ModelParams, pairs: &[Pair], batch_tokens: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let mut tokens = 0;
        while j < pairs.len() && (j == i || tokens + pairs[j].target.tokens.len() + 1 <= batch_tokens) {
            tokens += pairs[j].target.tokens.len() + 1;
            j += 1;
        }
        let refs: Vec<&Pair> = pairs[i..j].iter().collect();
        let pk = Packed::from_pairs(&refs, params.config().max_positions)?;
        let mut g = Graph::new();
        let b = bind(&mut g, params, false);
        let loss = packed_loss(&mut g, params, &b, &pk, 0.0, &mut Dropout::Off)?;
        total += g.value(loss).item() * pk.targets.len() as f64;
        count += pk.targets.len();
        i = j;
    }
    Ok(total / count as f64)
}

fn check_vocab(params: &ModelParams, pairs: &[Pair]) -> Result<()> {
    let v = params.config().vocab_size;
    for (n, p) in pairs.iter().enumerate() {
        let bad = p
            .source
            .iter()
            .chain(&p.target.tokens)
            .chain(std::iter::once(&p.target.language_tag))
            .find(|&&t| t >= v);
        if let Some(&t) = bad {
            return Err(Error::Data(format!("pair {n}: token {t} outside vocabulary of {v}")));
        }
    }
    Ok(())
}

/// Adam on the label-smoothed loss. Stops at `max_updates`, or when `dev`
/// is given and its loss has not improved for `patience` evaluations; the
/// best-dev parameters are returned in that case.
fn run(mut params: ModelParams, train: &[Pair], dev: Option<&[Pair]>, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    check_vocab(&params, train)?;
    let p_drop = cfg.dropout_for(params.config());
    let sched = InverseSqrtSchedule::new(cfg.learning_rate, cfg.warmup_steps);
    let mut adam = AdamState::new(params.params().tensors());
    let mut batch_rng = seed::named_rng(cfg.seed, "batches");
    let mut drop_rng = seed::named_rng(cfg.seed, "dropout");
    let max_pos = params.config().max_positions;
    let mut log = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut update = 0u64;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    'outer: while update < cfg.max_updates {
        for batch in make_batches(train, cfg.batch_tokens, &mut batch_rng) {
            let refs: Vec<&Pair> = batch.iter().map(|&i| &train[i]).collect();
            let pk = Packed::from_pairs(&refs, max_pos)?;
            let grads = {
                let mut g = Graph::new();
                let b = bind(&mut g, &params, true);
                let mut drop = if p_drop > 0.0 {
                    Dropout::On {
                        p: p_drop,
                        rng: &mut drop_rng,
                    }
                } else {
                    Dropout::Off
                };
                let loss = packed_loss(&mut g, &params, &b, &pk, cfg.label_smoothing, &mut drop)?;
                loss_sum += g.value(loss).item();
                loss_n += 1;
                let mut gr = g.backward(loss)?;
                b.0.iter().map(|&v| gr.take(v)).collect::<Vec<_>>()
            };
            update += 1;
            let lr = sched.lr(update);
            adam.step(params.params_mut().tensors_mut(), &grads, lr)?;
            if update % cfg.eval_interval == 0 {
                let dev_loss = dev.map(|d| mean_loss(&params, d, cfg.batch_tokens)).transpose()?;
                log.push(LogPoint {
                    update,
                    loss: loss_sum / loss_n as f64,
                    lr,
                    dev_loss,
                });
                (loss_sum, loss_n) = (0.0, 0);
                if let Some(d) = dev_loss {
                    if best.as_ref().map_or(true, |(b, _)| d < *b) {
                        best = Some((d, params.clone()));
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= cfg.patience {
                            break 'outer;
                        }
                    }
                }
            }
            if update >= cfg.max_updates {
                break 'outer;
            }
        }
    }
    let params = match best {
        Some((_, p)) if since_best > 0 => p,
        _ => params,
    };
    Ok(TrainResult { params, log, updates: update })
}

/// Trains a translation model from scratch on tagged multilingual pairs.
pub fn train_base(model: &ModelConfig, train: &[Pair], dev: &[Pair], cfg: &TrainConfig) -> Result<TrainResult> {
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    if cfg.max_updates == 0 {
        return Err(Error::Config("max_updates must be at least 1".into()));
    }
    let params = ModelParams::init(model, seed::sub_seed(cfg.seed, "init"))?;
    run(params, train, (!dev.is_empty()).then_some(dev), cfg)
}

/// Full-model finetuning of `base` on pairs that all carry `label`.
/// `base` itself is never modified; zero updates return an exact copy.
pub fn finetune_attribute(
    base: &ModelParams,
    data: &[(Pair, usize)],
    label: usize,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if let Some((_, l)) = data.iter().find(|(_, l)| *l != label) {
        return Err(Error::Data(format!("finetuning data for label {label} contains label {l}")));
    }
    if cfg.max_updates == 0 {
        return Ok(TrainResult {
            params: base.clone(),
            log: Vec::new(),
            updates: 0,
        });
    }
    if data.is_empty() {
        return Err(Error::Data("empty finetuning set".into()));
    }
    let pairs: Vec<Pair> = data.iter().map(|(p, _)| p.clone()).collect();
    run(base.clone(), &pairs, None, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::TokenSeq;

    fn toy_pairs(n: usize, seed_: u64) -> Vec<Pair> {
        use rand::Rng;
        let mut rng = seed::rng(seed_);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..5);
                let src: Vec<usize> = (0..len).map(|_| rng.gen_range(3..8)).collect();
                let tgt: Vec<usize> = src.iter().map(|t| t + 5).collect();
                Pair {
                    source: src,
                    target: TokenSeq::new(1, tgt),
                }
            })
            .collect()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 13,
            max_positions: 16,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            dropout: 0.1,
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_tokens: 60,
            learning_rate: 5e-3,
            warmup_steps: 5,
            max_updates: 20,
            eval_interval: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let data = toy_pairs(40, 3);
        let a = train_base(&tiny_model(), &data, &data[..8], &quick()).unwrap();
        let b = train_base(&tiny_model(), &data, &data[..8], &quick()).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn log_has_one_line_per_evaluation() {
        let data = toy_pairs(40, 3);
        let r = train_base(&tiny_model(), &data, &[], &quick()).unwrap();
        assert_eq!(r.updates, 20);
        assert_eq!(r.log_lines().lines().count(), 4);
    }

    #[test]
    fn empty_corpus_is_data_error() {
        assert!(matches!(
            train_base(&tiny_model(), &[], &[], &quick()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn out_of_vocab_is_data_error() {
        let mut data = toy_pairs(4, 3);
        data[2].target.tokens.push(99);
        assert!(matches!(
            train_base(&tiny_model(), &data, &[], &quick()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn finetune_zero_updates_is_identity_and_mixed_labels_rejected() {
        let base = ModelParams::init(&tiny_model(), 5).unwrap();
        let data: Vec<_> = toy_pairs(6, 1).into_iter().map(|p| (p, 0)).collect();
        let cfg = TrainConfig {
            max_updates: 0,
            ..quick()
        };
        let out = finetune_attribute(&base, &data, 0, &cfg).unwrap();
        assert_eq!(out.params, base);
        let mut mixed = data.clone();
        mixed[3].1 = 1;
        assert!(matches!(
            finetune_attribute(&base, &mixed, 0, &quick()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn finetune_updates_every_tensor_and_leaves_base() {
        let base = ModelParams::init(&tiny_model(), 5).unwrap();
        let before = base.checksum();
        let data: Vec<_> = toy_pairs(12, 1).into_iter().map(|p| (p, 1)).collect();
        let cfg = TrainConfig {
            max_updates: 2,
            ..quick()
        };
        let out = finetune_attribute(&base, &data, 1, &cfg).unwrap();
        assert_eq!(base.checksum(), before);
        assert!(out.params.params().same_structure(base.params()));
        for ((name, a), b) in out.params.params().iter().zip(base.params().tensors()) {
            assert!(a.max_abs_diff(b) > 0.0, "{name} unchanged");
        }
    }

    #[test]
    fn dev_loss_decreases_early() {
        let data = toy_pairs(200, 3);
        let cfg = TrainConfig {
            max_updates: 45,
            eval_interval: 15,
            ..quick()
        };
        let r = train_base(&tiny_model(), &data[20..], &data[..20], &cfg).unwrap();
        let dev: Vec<f64> = r.log.iter().map(|p| p.dev_loss.unwrap()).collect();
        assert_eq!(dev.len(), 3);
        assert!(dev[0] > dev[1] && dev[1] > dev[2], "{dev:?}");
    }
}
