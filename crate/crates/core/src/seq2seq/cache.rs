use super::model::cross_kv;
use super::{EncoderOutput, ModelParams};
use crate::diff::Tensor;
use crate::{Error, Result};

/// Post-projection attention activations of one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    /// `[len, d_model]` self-attention keys for positions already consumed.
    pub self_keys: Tensor,
    pub self_values: Tensor,
    /// `[src_len, d_model]` cross-attention keys derived from the encoder.
    pub cross_keys: Tensor,
    pub cross_values: Tensor,
}

/// Decoder activations `A_{t-1}` reused across decoding steps.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    pub layers: Vec<LayerCache>,
    length: usize,
}

impl KVCache {
    /// Empty self-attention history with cross-attention activations
    /// projected from `enc`.
    pub fn new(params: &ModelParams, enc: &EncoderOutput) -> Result<Self> {
        let d = params.config().d_model;
        let layers = cross_kv(params, enc)?
            .into_iter()
            .map(|(k, v)| LayerCache {
                self_keys: Tensor::zeros(&[0, d]),
                self_values: Tensor::zeros(&[0, d]),
                cross_keys: k,
                cross_values: v,
            })
            .collect();
        Ok(KVCache { layers, length: 0 })
    }

    pub(crate) fn from_layers(layers: Vec<LayerCache>, length: usize) -> Self {
        KVCache { layers, length }
    }

    /// Number of decoder positions held (`t - 1` before step `t`).
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub(crate) fn check(&self, params: &ModelParams) -> Result<()> {
        if self.layers.len() != params.config().num_decoder_layers {
            return Err(Error::Structure(format!(
                "cache has {} layers, model has {}",
                self.layers.len(),
                params.config().num_decoder_layers
            )));
        }
        let d = params.config().d_model;
        for (i, l) in self.layers.iter().enumerate() {
            if l.self_keys.rows() != self.length
                || l.self_values.rows() != self.length
                || l.self_keys.cols() != d
                || l.cross_keys.cols() != d
                || l.cross_keys.rows() != l.cross_values.rows()
            {
                return Err(Error::Structure(format!(
                    "cache layer {i} inconsistent with length {}",
                    self.length
                )));
            }
        }
        Ok(())
    }

    /// Cache tensors in a fixed order: per layer self keys, self values and,
    /// when `with_cross`, cross keys and cross values.
    pub fn tensors(&self, with_cross: bool) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.self_keys);
            out.push(&l.self_values);
            if with_cross {
                out.push(&l.cross_keys);
                out.push(&l.cross_values);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self, with_cross: bool) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.self_keys);
            out.push(&mut l.self_values);
            if with_cross {
                out.push(&mut l.cross_keys);
                out.push(&mut l.cross_values);
            }
        }
        out
    }
}
