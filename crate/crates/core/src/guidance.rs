//! Classifier-guided decoding: per-step gradient edits of the decoder's
//! cached keys and values toward a desired attribute label.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attrclf::{classify, neg_log_prob, pool, ClassifierParams, PoolingStrategy};
use crate::diff::ops::log_softmax_row;
use crate::diff::{Graph, Tensor, Var};
use crate::seq2seq::checkpoint::write_atomic;
use crate::seq2seq::{
    beam_search_state, bind, decode_step, decoder_step_graph, encode, encoder_input, BeamConfig, Hypothesis,
    KVCache, ModelParams, StepDecoder, TokenId,
};
use crate::seq2seq::CacheVars;
use crate::toylang::AttributeKind;
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub num_iterations: usize,
    pub step_size: f64,
    pub desired_label: usize,
    /// Divide each tensor's gradient by its own L2 norm.
    pub normalize_gradients: bool,
    /// Carry edited activations into later steps.
    pub persist_edits: bool,
    /// Pool the recomputed current state; otherwise recompute the previous
    /// one from a prefix of the edited cache.
    pub include_current_hidden: bool,
    pub edit_cross_attention: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            num_iterations: 5,
            step_size: 0.1,
            desired_label: 0,
            normalize_gradients: true,
            persist_edits: true,
            include_current_hidden: true,
            edit_cross_attention: true,
        }
    }
}

impl GuidanceConfig {
    /// Defaults with the step size used for `kind`.
    pub fn for_attribute(kind: AttributeKind, desired_label: usize) -> Self {
        GuidanceConfig {
            step_size: match kind {
                AttributeKind::Formality => 0.1,
                AttributeKind::Gender => 0.05,
            },
            desired_label,
            ..Default::default()
        }
    }

    /// True when guidance cannot change anything.
    pub fn is_noop(&self) -> bool {
        self.num_iterations == 0 || self.step_size == 0.0
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::Config(format!("step_size {} must be finite and >= 0", self.step_size)));
        }
        if self.desired_label >= num_classes {
            return Err(Error::Config(format!(
                "desired label {} outside [0, {num_classes})",
                self.desired_label
            )));
        }
        Ok(())
    }
}

/// Diagnostics for one decoding step of one hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based decoding step.
    pub step: usize,
    /// Guidance was requested but there was no history to edit.
    pub skipped: bool,
    pub prob_before: Option<f64>,
    pub prob_after: Option<f64>,
    /// Joint L2 norm of the raw gradient at each iteration.
    pub grad_norms: Vec<f64>,
    pub seconds: f64,
}

/// Per-step trace of the returned hypothesis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub steps: Vec<StepTrace>,
}

impl GuidanceTrace {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for st in &self.steps {
            let _ = writeln!(s, "{}", serde_json::to_string(st).expect("trace serializes"));
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad trace line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(GuidanceTrace { steps })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// Detached final-layer states of the positions decoded so far.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenHistory {
    rows: Tensor,
    sum: Tensor,
}

impl HiddenHistory {
    pub fn new(d_model: usize) -> Self {
        HiddenHistory {
            rows: Tensor::zeros(&[0, d_model]),
            sum: Tensor::zeros(&[1, d_model]),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// `[1, d]` running sum.
    pub fn sum(&self) -> &Tensor {
        &self.sum
    }

    pub fn push(&mut self, hidden: &Tensor) -> Result<()> {
        let d = self.sum.numel();
        let row = hidden.clone().reshape(&[1, d])?;
        for (s, v) in self.sum.data_mut().iter_mut().zip(row.data()) {
            *s += v;
        }
        self.rows.append_rows(&row)
    }
}

struct Objective<'a> {
    params: &'a ModelParams,
    classifier: &'a ClassifierParams,
    cfg: &'a GuidanceConfig,
    cache: &'a KVCache,
    history: &'a HiddenHistory,
    y_prev: TokenId,
    /// Input consumed one step earlier; needed without the current state.
    y_prev2: Option<TokenId>,
}

impl Objective<'_> {
    /// `-log P(c* | pooled)` under `cache + delta` and its gradient with
    /// respect to every delta tensor.
    fn eval(&self, delta: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let b = bind(&mut g, self.params, false);
        let cv = self.classifier.bind(&mut g, false);
        let mut dvars = Vec::with_capacity(delta.len());
        let mut next = delta.iter();
        let mut edited = |g: &mut Graph<'_>, t: Var, dv: &mut Vec<Var>| -> Result<Var> {
            let d = g.leaf(next.next().expect("delta per tensor").clone(), true);
            dv.push(d);
            g.add(t, d)
        };
        let mut vars = Vec::with_capacity(self.cache.layers.len());
        for l in &self.cache.layers {
            let sk = g.borrowed(&l.self_keys, false);
            let sv = g.borrowed(&l.self_values, false);
            let self_keys = edited(&mut g, sk, &mut dvars)?;
            let self_values = edited(&mut g, sv, &mut dvars)?;
            let ck = g.borrowed(&l.cross_keys, false);
            let cvv = g.borrowed(&l.cross_values, false);
            let (cross_keys, cross_values) = if self.cfg.edit_cross_attention {
                (edited(&mut g, ck, &mut dvars)?, edited(&mut g, cvv, &mut dvars)?)
            } else {
                (ck, cvv)
            };
            vars.push(CacheVars {
                self_keys,
                self_values,
                cross_keys,
                cross_values,
            });
        }
        let t = self.cache.len() + 1;
        let strategy = self.classifier.strategy;
        let x = if self.cfg.include_current_hidden {
            let step = decoder_step_graph(&mut g, self.params, &b, self.y_prev, t - 1, &vars)?;
            let sum = self.history.sum().clone();
            pool_with(&mut g, step.hidden, self.history.rows(), sum, t, strategy)?
        } else {
            let y = self
                .y_prev2
                .ok_or_else(|| Error::Contract("previous input required to recompute the last state".into()))?;
            let prefix = t - 2;
            let mut pv = Vec::with_capacity(vars.len());
            for v in &vars {
                pv.push(CacheVars {
                    self_keys: g.slice_rows(v.self_keys, 0, prefix)?,
                    self_values: g.slice_rows(v.self_values, 0, prefix)?,
                    cross_keys: v.cross_keys,
                    cross_values: v.cross_values,
                });
            }
            let step = decoder_step_graph(&mut g, self.params, &b, y, prefix, &pv)?;
            let n = self.history.len();
            let earlier = self.history.rows().slice_rows(0, n - 1);
            let last = self.history.rows().slice_rows(n - 1, n);
            let sum = self.history.sum().zip_map(&last, |s, l| s - l)?;
            pool_with(&mut g, step.hidden, &earlier, sum, t - 1, strategy)?
        };
        let loss = neg_log_prob(&mut g, &cv, strategy, x, self.cfg.desired_label)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let out = dvars
            .iter()
            .zip(delta)
            .map(|(&v, dt)| grads.take(v).unwrap_or_else(|| Tensor::zeros(dt.shape())))
            .collect();
        Ok((value, out))
    }

}

/// Guidance loss `-log P(c* | pooled)` at `cache + delta` and its gradient
/// with respect to each delta tensor, in [`KVCache::tensors`] order. Exposed
/// for gradient checking.
#[allow(clippy::too_many_arguments)]
pub fn guidance_objective(
    params: &ModelParams,
    classifier: &ClassifierParams,
    cfg: &GuidanceConfig,
    cache: &KVCache,
    y_prev: TokenId,
    y_prev2: Option<TokenId>,
    history: &HiddenHistory,
    delta: &[Tensor],
) -> Result<(f64, Vec<Tensor>)> {
    let shapes: Vec<&[usize]> = cache.tensors(cfg.edit_cross_attention).iter().map(|t| t.shape()).collect();
    if shapes.len() != delta.len() || shapes.iter().zip(delta).any(|(s, d)| *s != d.shape()) {
        return Err(Error::Shape("delta does not match the editable cache tensors".into()));
    }
    Objective {
        params,
        classifier,
        cfg,
        cache,
        history,
        y_prev,
        y_prev2,
    }
    .eval(delta)
}

/// Classifier input from detached `earlier` rows (with their `[1, d]` sum)
/// plus the live state `h`, covering `count` positions in total.
fn pool_with(
    g: &mut Graph<'_>,
    h: Var,
    earlier: &Tensor,
    earlier_sum: Tensor,
    count: usize,
    strategy: PoolingStrategy,
) -> Result<Var> {
    match strategy {
        PoolingStrategy::TokenLevel => {
            let e = g.constant(earlier.clone());
            g.concat_rows(&[e, h])
        }
        PoolingStrategy::Meanpool => {
            let c = g.constant(earlier_sum);
            let total = g.add(c, h)?;
            Ok(g.scale(total, 1.0 / count as f64))
        }
        PoolingStrategy::CumulativeSum => {
            let c = g.constant(earlier_sum);
            g.add(c, h)
        }
    }
}

/// Refines a perturbation of the cache for `cfg.num_iterations` steps of
/// normalised gradient descent on `-log P(c* | pooled)`. Returns the edited
/// cache (borrowing the input when nothing changes) and, unless guidance is
/// disabled, a trace entry. `y_prev2` is the input consumed before `y_prev`.
pub fn edit_cache<'c>(
    params: &ModelParams,
    classifier: &ClassifierParams,
    cfg: &GuidanceConfig,
    cache: &'c KVCache,
    y_prev: TokenId,
    y_prev2: Option<TokenId>,
    history: &HiddenHistory,
) -> Result<(Cow<'c, KVCache>, Option<StepTrace>)> {
    let t = cache.len() + 1;
    if cfg.is_noop() {
        return Ok((Cow::Borrowed(cache), None));
    }
    if history.len() != cache.len() {
        return Err(Error::Contract(format!(
            "history holds {} states for a cache of length {}",
            history.len(),
            cache.len()
        )));
    }
    let mut trace = StepTrace {
        step: t,
        skipped: false,
        prob_before: None,
        prob_after: None,
        grad_norms: Vec::with_capacity(cfg.num_iterations),
        seconds: 0.0,
    };
    if t < 2 {
        trace.skipped = true;
        return Ok((Cow::Borrowed(cache), Some(trace)));
    }
    let obj = Objective {
        params,
        classifier,
        cfg,
        cache,
        history,
        y_prev,
        y_prev2,
    };
    let mut delta: Vec<Tensor> = cache
        .tensors(cfg.edit_cross_attention)
        .into_iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    for it in 0..cfg.num_iterations {
        let (loss, grads) = obj.eval(&delta)?;
        if it == 0 {
            trace.prob_before = Some((-loss).exp());
        }
        trace
            .grad_norms
            .push(grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt());
        for (dt, gr) in delta.iter_mut().zip(&grads) {
            let scale = if cfg.normalize_gradients {
                cfg.step_size / (gr.l2_norm() + NORM_EPS)
            } else {
                cfg.step_size
            };
            for (d, g) in dt.data_mut().iter_mut().zip(gr.data()) {
                *d -= scale * g;
            }
        }
    }
    let mut edited = cache.clone();
    for (c, dt) in edited.tensors_mut(cfg.edit_cross_attention).into_iter().zip(&delta) {
        for (x, d) in c.data_mut().iter_mut().zip(dt.data()) {
            *x += d;
        }
    }
    Ok((Cow::Owned(edited), Some(trace)))
}

/// Result of one guided decoding step.
#[derive(Clone, Debug)]
pub struct GuidedStep {
    pub logits: Tensor,
    pub cache: KVCache,
    pub history: HiddenHistory,
    pub trace: Option<StepTrace>,
}

/// Edits the cache, decodes `y_prev` against the edited cache and extends
/// the history with the resulting state.
#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    params: &ModelParams,
    classifier: &ClassifierParams,
    cfg: &GuidanceConfig,
    cache: &KVCache,
    y_prev: TokenId,
    y_prev2: Option<TokenId>,
    history: &HiddenHistory,
) -> Result<GuidedStep> {
    let start = Instant::now();
    let (edited, mut trace) = edit_cache(params, classifier, cfg, cache, y_prev, y_prev2, history)?;
    let out = decode_step(params, y_prev, &edited)?;
    let mut hist = history.clone();
    hist.push(&out.hidden)?;
    let new_cache = if cfg.persist_edits || matches!(edited, Cow::Borrowed(_)) {
        out.cache
    } else {
        let mut c = cache.clone();
        let n = cache.len();
        for (dst, src) in c.layers.iter_mut().zip(&out.cache.layers) {
            dst.self_keys.append_rows(&src.self_keys.slice_rows(n, n + 1))?;
            dst.self_values.append_rows(&src.self_values.slice_rows(n, n + 1))?;
        }
        KVCache::from_layers(c.layers, n + 1)
    };
    if let Some(tr) = trace.as_mut() {
        let pooled = match classifier.strategy {
            PoolingStrategy::TokenLevel => hist.rows().clone(),
            s => pool(hist.rows(), s)?,
        };
        tr.prob_after = Some(classify(&pooled, classifier)?.probs[cfg.desired_label]);
        tr.seconds = start.elapsed().as_secs_f64();
    }
    Ok(GuidedStep {
        logits: out.logits,
        cache: new_cache,
        history: hist,
        trace,
    })
}

/// Beam-search state of one guided hypothesis.
#[derive(Clone, Debug)]
pub struct GuidedState {
    pub cache: KVCache,
    pub history: HiddenHistory,
    pub trace: Vec<StepTrace>,
}

/// [`StepDecoder`] that applies guidance at every step.
pub struct GuidedDecoder<'a> {
    params: &'a ModelParams,
    classifier: &'a ClassifierParams,
    cfg: &'a GuidanceConfig,
    src: Vec<TokenId>,
}

impl<'a> GuidedDecoder<'a> {
    pub fn new(
        params: &'a ModelParams,
        classifier: &'a ClassifierParams,
        cfg: &'a GuidanceConfig,
        src: &[TokenId],
    ) -> Result<Self> {
        cfg.validate(classifier.num_classes())?;
        if classifier.d_model() != params.config().d_model {
            return Err(Error::Structure(format!(
                "classifier width {} does not match model width {}",
                classifier.d_model(),
                params.config().d_model
            )));
        }
        Ok(GuidedDecoder {
            params,
            classifier,
            cfg,
            src: encoder_input(src),
        })
    }
}

impl StepDecoder for GuidedDecoder<'_> {
    type State = GuidedState;

    fn initial(&self) -> Result<GuidedState> {
        let enc = encode(self.params, &self.src)?;
        Ok(GuidedState {
            cache: KVCache::new(self.params, &enc)?,
            history: HiddenHistory::new(self.params.config().d_model),
            trace: Vec::new(),
        })
    }

    fn step(&self, state: &GuidedState, inputs: &[TokenId]) -> Result<(Vec<f64>, GuidedState)> {
        let y_prev = *inputs.last().expect("non-empty decoder inputs");
        let y_prev2 = inputs.len().checked_sub(2).map(|i| inputs[i]);
        let out = guided_step(
            self.params,
            self.classifier,
            self.cfg,
            &state.cache,
            y_prev,
            y_prev2,
            &state.history,
        )?;
        let mut trace = state.trace.clone();
        trace.extend(out.trace);
        Ok((
            log_softmax_row(out.logits.data()),
            GuidedState {
                cache: out.cache,
                history: out.history,
                trace,
            },
        ))
    }
}

/// Beam search with per-hypothesis guidance. Returns the best hypothesis
/// and the trace accumulated along its path.
pub fn guided_beam_search(
    params: &ModelParams,
    classifier: &ClassifierParams,
    cfg: &GuidanceConfig,
    src: &[TokenId],
    language_tag: TokenId,
    beam: &BeamConfig,
) -> Result<(Hypothesis, GuidanceTrace)> {
    let dec = GuidedDecoder::new(params, classifier, cfg, src)?;
    let (hyp, state) = beam_search_state(&dec, language_tag, beam)?;
    Ok((hyp, GuidanceTrace { steps: state.trace }))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::diff::gradcheck::max_rel_error;
    use crate::seed::rng;
    use crate::seq2seq::{beam_search, greedy_decode, ModelConfig, EOS};

    struct Fixture {
        params: ModelParams,
        clf: ClassifierParams,
        cache: KVCache,
        history: HiddenHistory,
        inputs: Vec<TokenId>,
    }

    fn model(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            d_model: 8,
            num_heads: 2,
            ffn_dim: 12,
            vocab_size: 11,
            max_positions: 16,
            dropout: 0.0,
            ..Default::default()
        };
        ModelParams::init(&cfg, seed).unwrap()
    }

    fn source(seed: u64) -> Vec<TokenId> {
        let mut r = rng(seed);
        let n = r.gen_range(2..6);
        (0..n).map(|_| r.gen_range(1..11)).collect()
    }

    /// A model, classifier and a cache after `steps` decoded inputs.
    fn fixture(seed: u64, strategy: PoolingStrategy, steps: usize) -> Fixture {
        let params = model(seed);
        let clf = ClassifierParams::init(8, 3, strategy, seed + 1).unwrap();
        let src = source(seed);
        let mut cache = KVCache::new(&params, &encode(&params, &encoder_input(&src)).unwrap()).unwrap();
        let mut history = HiddenHistory::new(8);
        let mut r = rng(seed + 2);
        let mut inputs = vec![2];
        for _ in 0..steps {
            let out = decode_step(&params, *inputs.last().unwrap(), &cache).unwrap();
            history.push(&out.hidden).unwrap();
            cache = out.cache;
            inputs.push(r.gen_range(1..11));
        }
        Fixture {
            params,
            clf,
            cache,
            history,
            inputs,
        }
    }

    fn objective_grad_error(seed: u64, strategy: PoolingStrategy, cfg: &GuidanceConfig) -> f64 {
        let f = fixture(seed, strategy, 3);
        let n = f.inputs.len();
        let obj = Objective {
            params: &f.params,
            classifier: &f.clf,
            cfg,
            cache: &f.cache,
            history: &f.history,
            y_prev: f.inputs[n - 1],
            y_prev2: Some(f.inputs[n - 2]),
        };
        let mut r = rng(seed + 3);
        let delta: Vec<Tensor> = f
            .cache
            .tensors(cfg.edit_cross_attention)
            .iter()
            .map(|t| Tensor::normal(t.shape(), 0.1, &mut r))
            .collect();
        let (_, grads) = obj.eval(&delta).unwrap();
        let mut worst = 0.0f64;
        for j in 0..delta.len() {
            let err = max_rel_error(
                |x| {
                    let mut d = delta.clone();
                    d[j] = x.clone();
                    Ok(obj.eval(&d)?.0)
                },
                &delta[j],
                &grads[j],
            )
            .unwrap();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for (i, strategy) in PoolingStrategy::ALL.into_iter().enumerate() {
            for include_current_hidden in [true, false] {
                let cfg = GuidanceConfig {
                    include_current_hidden,
                    desired_label: i % 3,
                    ..Default::default()
                };
                let err = objective_grad_error(10 + i as u64, strategy, &cfg);
                assert!(err <= 1e-4, "{strategy} current={include_current_hidden}: {err}");
            }
        }
        let self_only = GuidanceConfig {
            edit_cross_attention: false,
            ..Default::default()
        };
        assert!(objective_grad_error(3, PoolingStrategy::Meanpool, &self_only) <= 1e-4);
    }

    #[test]
    fn noop_borrows_the_cache() {
        let f = fixture(1, PoolingStrategy::Meanpool, 2);
        for cfg in [
            GuidanceConfig {
                num_iterations: 0,
                ..Default::default()
            },
            GuidanceConfig {
                step_size: 0.0,
                ..Default::default()
            },
        ] {
            let (c, trace) = edit_cache(&f.params, &f.clf, &cfg, &f.cache, 3, Some(4), &f.history).unwrap();
            assert!(matches!(c, Cow::Borrowed(_)));
            assert!(trace.is_none());
        }
    }

    #[test]
    fn first_step_is_skipped() {
        let f = fixture(2, PoolingStrategy::Meanpool, 0);
        let cfg = GuidanceConfig::default();
        let (c, trace) = edit_cache(&f.params, &f.clf, &cfg, &f.cache, 2, None, &f.history).unwrap();
        assert!(matches!(c, Cow::Borrowed(_)));
        let trace = trace.unwrap();
        assert!(trace.skipped && trace.step == 1 && trace.grad_norms.is_empty());
    }

    #[test]
    fn small_step_raises_desired_probability() {
        for seed in 0..10 {
            let f = fixture(seed, PoolingStrategy::Meanpool, 3);
            let cfg = GuidanceConfig {
                num_iterations: 1,
                step_size: 1e-3,
                desired_label: (seed % 3) as usize,
                ..Default::default()
            };
            let n = f.inputs.len();
            let (y, y2) = (f.inputs[n - 1], Some(f.inputs[n - 2]));
            let (edited, _) = edit_cache(&f.params, &f.clf, &cfg, &f.cache, y, y2, &f.history).unwrap();
            let loss = |cache: &KVCache| {
                let obj = Objective {
                    params: &f.params,
                    classifier: &f.clf,
                    cfg: &cfg,
                    cache,
                    history: &f.history,
                    y_prev: y,
                    y_prev2: y2,
                };
                let zero: Vec<Tensor> = cache.tensors(true).iter().map(|t| Tensor::zeros(t.shape())).collect();
                obj.eval(&zero).unwrap().0
            };
            assert!(loss(&edited) < loss(&f.cache), "seed {seed}");
        }
    }

    #[test]
    fn guided_step_extends_cache_and_history() {
        let f = fixture(4, PoolingStrategy::CumulativeSum, 2);
        let n = f.inputs.len();
        for persist_edits in [true, false] {
            let cfg = GuidanceConfig {
                persist_edits,
                ..Default::default()
            };
            let out = guided_step(&f.params, &f.clf, &cfg, &f.cache, f.inputs[n - 1], Some(f.inputs[n - 2]), &f.history)
                .unwrap();
            assert_eq!(out.cache.len(), f.cache.len() + 1);
            assert_eq!(out.history.len(), f.history.len() + 1);
            let trace = out.trace.unwrap();
            assert_eq!(trace.grad_norms.len(), cfg.num_iterations);
            assert!(trace.prob_after.is_some() && trace.prob_before.is_some());
            let k = f.cache.len();
            let prefix_kept = out.cache.layers.iter().zip(&f.cache.layers).all(|(a, b)| {
                a.self_keys.slice_rows(0, k) == b.self_keys && a.cross_values == b.cross_values
            });
            assert_eq!(prefix_kept, !persist_edits);
        }
    }

    #[test]
    fn disabled_guidance_reproduces_beam_search() {
        let params = model(7);
        let clf = ClassifierParams::init(8, 2, PoolingStrategy::Meanpool, 8).unwrap();
        for seed in 0..20 {
            let src = source(seed);
            let beam = BeamConfig::for_source(src.len(), 16);
            let base = beam_search(&params, &src, 2, &beam).unwrap();
            for cfg in [
                GuidanceConfig {
                    num_iterations: 0,
                    ..Default::default()
                },
                GuidanceConfig {
                    step_size: 0.0,
                    ..Default::default()
                },
            ] {
                let (hyp, trace) = guided_beam_search(&params, &clf, &cfg, &src, 2, &beam).unwrap();
                assert_eq!(hyp.tokens, base.tokens);
                assert_eq!(hyp.score.to_bits(), base.score.to_bits());
                assert!(trace.steps.is_empty());
            }
        }
    }

    #[test]
    fn beam_one_extends_greedy_guided_decoding() {
        let params = model(9);
        let clf = ClassifierParams::init(8, 2, PoolingStrategy::Meanpool, 10).unwrap();
        let cfg = GuidanceConfig {
            step_size: 0.5,
            ..Default::default()
        };
        for seed in 0..5 {
            let src = source(seed);
            let beam = BeamConfig {
                beam_size: 1,
                ..BeamConfig::for_source(src.len(), 16)
            };
            let (hyp, _) = guided_beam_search(&params, &clf, &cfg, &src, 2, &beam).unwrap();
            let dec = GuidedDecoder::new(&params, &clf, &cfg, &src).unwrap();
            let greedy = greedy_decode(&dec, 2, beam.max_len, beam.length_penalty).unwrap();
            assert!(hyp.tokens.starts_with(&greedy.tokens));
            if greedy.truncated {
                continue;
            }
            if hyp.tokens == greedy.tokens {
                assert!((hyp.score - greedy.score).abs() < 1e-12);
            } else {
                assert!(hyp.score > greedy.score);
            }
        }
    }

    #[test]
    fn decoding_leaves_parameters_untouched_and_traces_round_trip() {
        let params = model(11);
        let clf = ClassifierParams::init(8, 2, PoolingStrategy::TokenLevel, 12).unwrap();
        let (pm, cm) = (params.checksum(), clf.checksum());
        let cfg = GuidanceConfig {
            include_current_hidden: false,
            ..Default::default()
        };
        let src = source(3);
        let (hyp, trace) = guided_beam_search(&params, &clf, &cfg, &src, 2, &BeamConfig::for_source(src.len(), 16)).unwrap();
        assert_eq!(params.checksum(), pm);
        assert_eq!(clf.checksum(), cm);
        assert_eq!(trace.steps.len(), hyp.tokens.len() + usize::from(!hyp.truncated));
        assert!(trace.steps[0].skipped);
        assert!(trace.steps.iter().skip(1).all(|s| !s.skipped));
        assert!(!hyp.tokens.contains(&EOS));
        assert_eq!(GuidanceTrace::from_jsonl(&trace.to_jsonl()).unwrap(), trace);
    }

    #[test]
    fn width_mismatch_is_structural() {
        let params = model(1);
        let clf = ClassifierParams::init(6, 2, PoolingStrategy::Meanpool, 1).unwrap();
        let cfg = GuidanceConfig::default();
        assert!(matches!(GuidedDecoder::new(&params, &clf, &cfg, &[3, 4]), Err(Error::Structure(_))));
        let bad = GuidanceConfig {
            desired_label: 2,
            ..Default::default()
        };
        let clf = ClassifierParams::init(8, 2, PoolingStrategy::Meanpool, 1).unwrap();
        assert!(matches!(GuidedDecoder::new(&params, &clf, &bad, &[3, 4]), Err(Error::Config(_))));
    }
}
