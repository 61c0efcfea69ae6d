use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::diff::Tensor;
use crate::seed;
use crate::{Error, Result};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same names and shapes in the same order.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayerIdx {
    pub ln_attn: LnIdx,
    pub attn: AttnIdx,
    pub ln_ffn: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayerIdx {
    pub ln_self: LnIdx,
    pub self_attn: AttnIdx,
    pub ln_cross: LnIdx,
    pub cross_attn: AttnIdx,
    pub ln_ffn: LnIdx,
    pub ffn: FfnIdx,
}

/// Indices into the [`ParamSet`] for every named weight.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub out_proj: usize,
}

struct Builder<'i> {
    ps: ParamSet,
    d: usize,
    ffn_dim: usize,
    init: &'i mut dyn FnMut(&str, &[usize]) -> Tensor,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        let t = (self.init)(&name, shape);
        self.ps.push(name, t)
    }

    fn ln(&mut self, p: &str) -> LnIdx {
        let d = self.d;
        LnIdx {
            gain: self.add(format!("{p}.gain"), &[d]),
            bias: self.add(format!("{p}.bias"), &[d]),
        }
    }

    fn attn(&mut self, p: &str) -> AttnIdx {
        let d = self.d;
        AttnIdx {
            wq: self.add(format!("{p}.q.weight"), &[d, d]),
            bq: self.add(format!("{p}.q.bias"), &[d]),
            wk: self.add(format!("{p}.k.weight"), &[d, d]),
            bk: self.add(format!("{p}.k.bias"), &[d]),
            wv: self.add(format!("{p}.v.weight"), &[d, d]),
            bv: self.add(format!("{p}.v.bias"), &[d]),
            wo: self.add(format!("{p}.out.weight"), &[d, d]),
            bo: self.add(format!("{p}.out.bias"), &[d]),
        }
    }

    fn ffn(&mut self, p: &str) -> FfnIdx {
        let (d, f) = (self.d, self.ffn_dim);
        FfnIdx {
            w1: self.add(format!("{p}.fc1.weight"), &[d, f]),
            b1: self.add(format!("{p}.fc1.bias"), &[f]),
            w2: self.add(format!("{p}.fc2.weight"), &[f, d]),
            b2: self.add(format!("{p}.fc2.bias"), &[d]),
        }
    }
}

/// Builds the parameter set in canonical order, drawing values from `init`.
fn build(cfg: &ModelConfig, init: &mut dyn FnMut(&str, &[usize]) -> Tensor) -> (ParamSet, Layout) {
    let mut b = Builder {
        ps: ParamSet::new(),
        d: cfg.d_model,
        ffn_dim: cfg.ffn_dim,
        init,
    };
    let embed = b.add("embed_tokens".into(), &[cfg.vocab_size, cfg.d_model]);
    let enc = (0..cfg.num_encoder_layers)
        .map(|l| EncLayerIdx {
            ln_attn: b.ln(&format!("encoder.{l}.self_attn_ln")),
            attn: b.attn(&format!("encoder.{l}.self_attn")),
            ln_ffn: b.ln(&format!("encoder.{l}.ffn_ln")),
            ffn: b.ffn(&format!("encoder.{l}.ffn")),
        })
        .collect();
    let enc_ln = b.ln("encoder.final_ln");
    let dec = (0..cfg.num_decoder_layers)
        .map(|l| DecLayerIdx {
            ln_self: b.ln(&format!("decoder.{l}.self_attn_ln")),
            self_attn: b.attn(&format!("decoder.{l}.self_attn")),
            ln_cross: b.ln(&format!("decoder.{l}.cross_attn_ln")),
            cross_attn: b.attn(&format!("decoder.{l}.cross_attn")),
            ln_ffn: b.ln(&format!("decoder.{l}.ffn_ln")),
            ffn: b.ffn(&format!("decoder.{l}.ffn")),
        })
        .collect();
    let dec_ln = b.ln("decoder.final_ln");
    let out_proj = b.add("output_projection".into(), &[cfg.d_model, cfg.vocab_size]);
    (
        b.ps,
        Layout {
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_proj,
        },
    )
}

/// Fixed sinusoidal position table `[max_positions, d_model]`.
pub(crate) fn sinusoidal_positions(max_positions: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_positions * d];
    let half = d / 2;
    for pos in 0..max_positions {
        for i in 0..half {
            let freq = (-(i as f64) * (10000f64).ln() / half.max(1) as f64).exp();
            let angle = pos as f64 * freq;
            data[pos * d + i] = angle.sin();
            data[pos * d + half + i] = angle.cos();
        }
    }
    Tensor::new(vec![max_positions, d], data).expect("position table shape")
}

/// Transformer weights plus the derived position table.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    params: ParamSet,
    pub(crate) layout: Layout,
    pub(crate) positions: Tensor,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains and
    /// `N(0, d^-1/2)` token embeddings.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let d = config.d_model as f64;
        let mut init = |name: &str, shape: &[usize]| -> Tensor {
            if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name == "embed_tokens" {
                Tensor::normal(shape, d.powf(-0.5), &mut rng)
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::uniform(shape, bound, &mut rng)
            }
        };
        let (params, layout) = build(config, &mut init);
        Ok(ModelParams {
            config: config.clone(),
            params,
            layout,
            positions: sinusoidal_positions(config.max_positions, config.d_model),
        })
    }

    /// Wraps loaded tensors, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut init = |_: &str, shape: &[usize]| Tensor::zeros(shape);
        let (expected, layout) = build(&config, &mut init);
        if !expected.same_structure(&params) {
            return Err(Error::Structure(
                "parameter names or shapes do not match the model config".into(),
            ));
        }
        Ok(ModelParams {
            positions: sinusoidal_positions(config.max_positions, config.d_model),
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `W`: maps hidden states to vocabulary logits, `[d_model, vocab]`.
    pub fn output_projection(&self) -> &Tensor {
        self.params.get(self.layout.out_proj)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}
