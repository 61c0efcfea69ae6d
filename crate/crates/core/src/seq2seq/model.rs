use super::params::{AttnIdx, FfnIdx, LnIdx};
use super::{KVCache, LayerCache, ModelParams, TokenId, TokenSeq, EOS};
use crate::diff::{Graph, Tensor, Var};
use crate::seed::Rng;
use crate::{Error, Result};

/// Encoder states `[src_len, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput(pub Tensor);

/// Result of one incremental decoder step.
#[derive(Clone, Debug)]
pub struct DecoderStepOutput {
    /// Last-layer state `h_t`, shape `[d_model]`.
    pub hidden: Tensor,
    /// `h_t · W`, shape `[vocab]`.
    pub logits: Tensor,
    pub cache: KVCache,
}

/// A training or evaluation pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<TokenId>,
    pub target: TokenSeq,
}

/// Encoder input for a raw source: the tokens followed by EOS.
pub fn encoder_input(source: &[TokenId]) -> Vec<TokenId> {
    source.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// Training-time dropout switch.
pub(crate) enum Dropout<'r> {
    Off,
    On { p: f64, rng: &'r mut Rng },
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Dropout::Off => x,
            Dropout::On { p, rng } => {
                let p = *p;
                g.dropout(x, p, &mut **rng)
            }
        }
    }
}

/// Graph handles for every parameter, aligned with the [`super::ParamSet`].
pub(crate) struct Bound(pub Vec<Var>);

pub(crate) fn bind<'a>(g: &mut Graph<'a>, p: &'a ModelParams, trainable: bool) -> Bound {
    Bound(
        p.params()
            .tensors()
            .iter()
            .map(|t| g.borrowed(t, trainable))
            .collect(),
    )
}

fn linear(g: &mut Graph<'_>, b: &Bound, x: Var, w: usize, bias: usize) -> Result<Var> {
    let y = g.matmul(x, b.0[w])?;
    g.add_bias(y, b.0[bias])
}

fn norm(g: &mut Graph<'_>, b: &Bound, x: Var, ln: LnIdx) -> Result<Var> {
    g.layer_norm(x, b.0[ln.gain], b.0[ln.bias])
}

fn ffn(g: &mut Graph<'_>, b: &Bound, x: Var, f: FfnIdx) -> Result<Var> {
    let h = linear(g, b, x, f.w1, f.b1)?;
    let h = g.relu(h);
    linear(g, b, h, f.w2, f.b2)
}

fn embed<'a>(
    g: &mut Graph<'a>,
    p: &'a ModelParams,
    b: &Bound,
    ids: &[TokenId],
    positions: &[usize],
) -> Result<Var> {
    let max = p.config().max_positions;
    if let Some(&pos) = positions.iter().max() {
        if pos >= max {
            return Err(Error::Length { len: pos + 1, max });
        }
    }
    let e = g.embedding(b.0[p.layout.embed], ids)?;
    let e = g.scale(e, (p.config().d_model as f64).sqrt());
    let table = g.borrowed(&p.positions, false);
    let pe = g.embedding(table, positions)?;
    g.add(e, pe)
}

/// Projected keys and values of `src` for an attention block.
fn project_kv(g: &mut Graph<'_>, b: &Bound, src: Var, a: AttnIdx) -> Result<(Var, Var)> {
    Ok((linear(g, b, src, a.wk, a.bk)?, linear(g, b, src, a.wv, a.bv)?))
}

fn attend(
    g: &mut Graph<'_>,
    b: &Bound,
    x_normed: Var,
    keys: Var,
    values: Var,
    spans: &[(usize, usize)],
    a: AttnIdx,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, b, x_normed, a.wq, a.bq)?;
    let o = g.attention(q, keys, values, spans, heads)?;
    linear(g, b, o, a.wo, a.bo)
}

/// Concatenated batch layout: rows of all sentences stacked, attention
/// restricted per sentence through spans.
pub(crate) struct Packed {
    pub src_ids: Vec<TokenId>,
    pub src_pos: Vec<usize>,
    pub src_spans: Vec<(usize, usize)>,
    pub tgt_ids: Vec<TokenId>,
    pub tgt_pos: Vec<usize>,
    pub self_spans: Vec<(usize, usize)>,
    pub cross_spans: Vec<(usize, usize)>,
    pub targets: Vec<TokenId>,
    /// Decoder row range of each sentence.
    pub tgt_ranges: Vec<(usize, usize)>,
}

impl Packed {
    /// Packs raw encoder inputs and decoder input sequences.
    pub fn new(items: &[(&[TokenId], &[TokenId], &[TokenId])], max_positions: usize) -> Result<Self> {
        let mut pk = Packed {
            src_ids: vec![],
            src_pos: vec![],
            src_spans: vec![],
            tgt_ids: vec![],
            tgt_pos: vec![],
            self_spans: vec![],
            cross_spans: vec![],
            targets: vec![],
            tgt_ranges: vec![],
        };
        for &(src, dec_in, dec_tgt) in items {
            if src.is_empty() || dec_in.is_empty() {
                return Err(Error::Contract("empty sequence in batch".into()));
            }
            for len in [src.len(), dec_in.len()] {
                if len > max_positions {
                    return Err(Error::Length {
                        len,
                        max: max_positions,
                    });
                }
            }
            let s0 = pk.src_ids.len();
            let s1 = s0 + src.len();
            pk.src_ids.extend_from_slice(src);
            pk.src_pos.extend(0..src.len());
            pk.src_spans.extend(std::iter::repeat((s0, s1)).take(src.len()));
            let t0 = pk.tgt_ids.len();
            pk.tgt_ids.extend_from_slice(dec_in);
            pk.tgt_pos.extend(0..dec_in.len());
            for i in 0..dec_in.len() {
                pk.self_spans.push((t0, t0 + i + 1));
                pk.cross_spans.push((s0, s1));
            }
            pk.targets.extend_from_slice(dec_tgt);
            pk.tgt_ranges.push((t0, t0 + dec_in.len()));
        }
        Ok(pk)
    }

    pub fn from_pairs(pairs: &[&Pair], max_positions: usize) -> Result<Self> {
        let owned: Vec<_> = pairs
            .iter()
            .map(|p| {
                (
                    encoder_input(&p.source),
                    p.target.decoder_inputs(),
                    p.target.decoder_targets(),
                )
            })
            .collect();
        let items: Vec<_> = owned
            .iter()
            .map(|(a, b, c)| (a.as_slice(), b.as_slice(), c.as_slice()))
            .collect();
        Packed::new(&items, max_positions)
    }
}

pub(crate) fn encoder_graph<'a>(
    g: &mut Graph<'a>,
    p: &'a ModelParams,
    b: &Bound,
    ids: &[TokenId],
    positions: &[usize],
    spans: &[(usize, usize)],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let heads = p.config().num_heads;
    let mut x = embed(g, p, b, ids, positions)?;
    x = drop.apply(g, x);
    for layer in &p.layout.enc {
        let a = norm(g, b, x, layer.ln_attn)?;
        let (k, v) = project_kv(g, b, a, layer.attn)?;
        let o = attend(g, b, a, k, v, spans, layer.attn, heads)?;
        let o = drop.apply(g, o);
        x = g.add(x, o)?;
        let a = norm(g, b, x, layer.ln_ffn)?;
        let f = ffn(g, b, a, layer.ffn)?;
        let f = drop.apply(g, f);
        x = g.add(x, f)?;
    }
    norm(g, b, x, p.layout.enc_ln)
}

/// Full-sequence decoder under causal masking; returns last-layer states.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_graph<'a>(
    g: &mut Graph<'a>,
    p: &'a ModelParams,
    b: &Bound,
    enc: Var,
    ids: &[TokenId],
    positions: &[usize],
    self_spans: &[(usize, usize)],
    cross_spans: &[(usize, usize)],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let heads = p.config().num_heads;
    let mut x = embed(g, p, b, ids, positions)?;
    x = drop.apply(g, x);
    for layer in &p.layout.dec {
        let a = norm(g, b, x, layer.ln_self)?;
        let (k, v) = project_kv(g, b, a, layer.self_attn)?;
        let o = attend(g, b, a, k, v, self_spans, layer.self_attn, heads)?;
        let o = drop.apply(g, o);
        x = g.add(x, o)?;
        let a = norm(g, b, x, layer.ln_cross)?;
        let (ck, cv) = project_kv(g, b, enc, layer.cross_attn)?;
        let o = attend(g, b, a, ck, cv, cross_spans, layer.cross_attn, heads)?;
        let o = drop.apply(g, o);
        x = g.add(x, o)?;
        let a = norm(g, b, x, layer.ln_ffn)?;
        let f = ffn(g, b, a, layer.ffn)?;
        let f = drop.apply(g, f);
        x = g.add(x, f)?;
    }
    norm(g, b, x, p.layout.dec_ln)
}

/// Mean token cross-entropy over a packed batch.
pub(crate) fn packed_loss<'a>(
    g: &mut Graph<'a>,
    p: &'a ModelParams,
    b: &Bound,
    pk: &Packed,
    smoothing: f64,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let enc = encoder_graph(g, p, b, &pk.src_ids, &pk.src_pos, &pk.src_spans, drop)?;
    let h = decoder_graph(
        g,
        p,
        b,
        enc,
        &pk.tgt_ids,
        &pk.tgt_pos,
        &pk.self_spans,
        &pk.cross_spans,
        drop,
    )?;
    let logits = g.matmul(h, b.0[p.layout.out_proj])?;
    g.cross_entropy(logits, &pk.targets, smoothing)
}

/// Per-layer cache handles on a graph.
pub(crate) struct CacheVars {
    pub self_keys: Var,
    pub self_values: Var,
    pub cross_keys: Var,
    pub cross_values: Var,
}

pub(crate) struct StepVars {
    pub hidden: Var,
    /// Extended self-attention keys/values per layer.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// One decoder position against cached activations. `position` is the
/// 0-based index of the new row, i.e. the cache length.
pub(crate) fn decoder_step_graph<'a>(
    g: &mut Graph<'a>,
    p: &'a ModelParams,
    b: &Bound,
    y_prev: TokenId,
    position: usize,
    cache: &[CacheVars],
) -> Result<StepVars> {
    if cache.len() != p.layout.dec.len() {
        return Err(Error::Structure(format!(
            "cache has {} layers, model has {}",
            cache.len(),
            p.layout.dec.len()
        )));
    }
    let heads = p.config().num_heads;
    let mut x = embed(g, p, b, &[y_prev], &[position])?;
    let mut keys = Vec::with_capacity(cache.len());
    let mut values = Vec::with_capacity(cache.len());
    for (layer, c) in p.layout.dec.iter().zip(cache) {
        let a = norm(g, b, x, layer.ln_self)?;
        let (k_new, v_new) = project_kv(g, b, a, layer.self_attn)?;
        let k = g.concat_rows(&[c.self_keys, k_new])?;
        let v = g.concat_rows(&[c.self_values, v_new])?;
        let o = attend(g, b, a, k, v, &[(0, position + 1)], layer.self_attn, heads)?;
        x = g.add(x, o)?;
        let a = norm(g, b, x, layer.ln_cross)?;
        let src_len = g.value(c.cross_keys).rows();
        let o = attend(
            g,
            b,
            a,
            c.cross_keys,
            c.cross_values,
            &[(0, src_len)],
            layer.cross_attn,
            heads,
        )?;
        x = g.add(x, o)?;
        let a = norm(g, b, x, layer.ln_ffn)?;
        let f = ffn(g, b, a, layer.ffn)?;
        x = g.add(x, f)?;
        keys.push(k);
        values.push(v);
    }
    let hidden = norm(g, b, x, p.layout.dec_ln)?;
    Ok(StepVars {
        hidden,
        keys,
        values,
    })
}

/// Encodes a source sequence as given (callers append EOS when needed).
pub fn encode(params: &ModelParams, src: &[TokenId]) -> Result<EncoderOutput> {
    if src.is_empty() {
        return Err(Error::Contract("empty source".into()));
    }
    if src.len() > params.config().max_positions {
        return Err(Error::Length {
            len: src.len(),
            max: params.config().max_positions,
        });
    }
    let mut g = Graph::new();
    let b = bind(&mut g, params, false);
    let positions: Vec<usize> = (0..src.len()).collect();
    let spans = vec![(0, src.len()); src.len()];
    let out = encoder_graph(&mut g, params, &b, src, &positions, &spans, &mut Dropout::Off)?;
    Ok(EncoderOutput(g.value(out).clone()))
}

/// Last-layer decoder states for every decoder input position of `tgt`
/// (the tag plus each token), shape `[1 + tgt.tokens.len(), d_model]`.
/// `src` is the raw source; EOS is appended here.
pub fn forced_decode(params: &ModelParams, src: &[TokenId], tgt: &TokenSeq) -> Result<Tensor> {
    let enc_in = encoder_input(src);
    let dec_in = tgt.decoder_inputs();
    let dec_tgt = tgt.decoder_targets();
    let pk = Packed::new(&[(&enc_in, &dec_in, &dec_tgt)], params.config().max_positions)?;
    let mut g = Graph::new();
    let b = bind(&mut g, params, false);
    let enc = encoder_graph(
        &mut g,
        params,
        &b,
        &pk.src_ids,
        &pk.src_pos,
        &pk.src_spans,
        &mut Dropout::Off,
    )?;
    let h = decoder_graph(
        &mut g,
        params,
        &b,
        enc,
        &pk.tgt_ids,
        &pk.tgt_pos,
        &pk.self_spans,
        &pk.cross_spans,
        &mut Dropout::Off,
    )?;
    Ok(g.value(h).clone())
}

/// Incremental step: consumes `y_prev`, appends its keys/values to the cache.
pub fn decode_step(params: &ModelParams, y_prev: TokenId, cache: &KVCache) -> Result<DecoderStepOutput> {
    cache.check(params)?;
    let mut g = Graph::new();
    let b = bind(&mut g, params, false);
    let vars: Vec<CacheVars> = cache
        .layers
        .iter()
        .map(|l| CacheVars {
            self_keys: g.borrowed(&l.self_keys, false),
            self_values: g.borrowed(&l.self_values, false),
            cross_keys: g.borrowed(&l.cross_keys, false),
            cross_values: g.borrowed(&l.cross_values, false),
        })
        .collect();
    let step = decoder_step_graph(&mut g, params, &b, y_prev, cache.len(), &vars)?;
    let logits = g.matmul(step.hidden, b.0[params.layout.out_proj])?;
    let layers = cache
        .layers
        .iter()
        .zip(step.keys.iter().zip(&step.values))
        .map(|(old, (&k, &v))| LayerCache {
            self_keys: g.value(k).clone(),
            self_values: g.value(v).clone(),
            cross_keys: old.cross_keys.clone(),
            cross_values: old.cross_values.clone(),
        })
        .collect();
    let d = params.config().d_model;
    let v = params.config().vocab_size;
    Ok(DecoderStepOutput {
        hidden: g.value(step.hidden).clone().reshape(&[d])?,
        logits: g.value(logits).clone().reshape(&[v])?,
        cache: KVCache::from_layers(layers, cache.len() + 1),
    })
}

/// Cross-attention keys/values for every decoder layer.
pub(crate) fn cross_kv(params: &ModelParams, enc: &EncoderOutput) -> Result<Vec<(Tensor, Tensor)>> {
    let mut g = Graph::new();
    let b = bind(&mut g, params, false);
    let e = g.borrowed(&enc.0, false);
    let mut out = Vec::new();
    for layer in &params.layout.dec {
        let (k, v) = project_kv(&mut g, &b, e, layer.cross_attn)?;
        out.push((g.value(k).clone(), g.value(v).clone()));
    }
    Ok(out)
}
