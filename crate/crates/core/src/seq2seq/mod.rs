//! Encoder-decoder transformer with forced decoding, incremental KV-cached
//! decoding and beam search.

mod beam;
mod cache;
pub mod checkpoint;
mod config;
mod model;
mod params;

pub use beam::{
    beam_search, beam_search_state, CachedDecoder, beam_search_with, greedy_decode, BeamConfig, Hypothesis, StepDecoder};
pub use cache::{KVCache, LayerCache};
pub use config::ModelConfig;
pub use model::{
    decode_step, encode, encoder_input, forced_decode, DecoderStepOutput, EncoderOutput, Pair,
};
pub(crate) use model::{bind, decoder_step_graph, packed_loss, CacheVars, Dropout, Packed};
pub use params::{ModelParams, ParamSet};

/// Vocabulary id.
pub type TokenId = usize;

/// End-of-sentence id; shared by every vocabulary built in this crate.
pub const EOS: TokenId = 0;

/// Target-side token sequence. `tokens` excludes the language tag and EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub language_tag: TokenId,
}

impl TokenSeq {
    pub fn new(language_tag: TokenId, tokens: Vec<TokenId>) -> Self {
        TokenSeq {
            tokens,
            language_tag,
        }
    }

    /// Decoder inputs: the tag followed by the tokens.
    pub fn decoder_inputs(&self) -> Vec<TokenId> {
        std::iter::once(self.language_tag)
            .chain(self.tokens.iter().copied())
            .collect()
    }

    /// Next-token targets aligned with [`TokenSeq::decoder_inputs`].
    pub fn decoder_targets(&self) -> Vec<TokenId> {
        self.tokens.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}
