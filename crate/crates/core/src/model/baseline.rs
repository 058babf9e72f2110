use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::nn::{
    add_positional_encoding, Binder, ConvSubsample, DecoderBlock, Embedding, EncoderStack, LayerNorm, Linear,
    ParamStore,
};

/// Plain encoder-decoder speech transformer.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub config: ModelConfig,
    pub frontend: ConvSubsample,
    pub encoder: EncoderStack,
    pub embed: Embedding,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub out: Linear,
}

impl BaselineModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        Ok(BaselineModel {
            config: c.clone(),
            frontend: ConvSubsample::new("frontend", c.d_feat, c.conv_channels, c.d_model),
            encoder: EncoderStack::new("encoder", c.n_enc_baseline, c.d_model, c.heads, c.ffn_dim, c.dropout)?,
            embed: Embedding::new("target_embed", c.target_vocab, c.d_model),
            blocks: (0..c.n_dec)
                .map(|i| DecoderBlock::new(&format!("decoder.{i}"), c.d_model, c.heads, c.ffn_dim, c.dropout))
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new("decoder_norm.0", c.d_model),
            out: Linear::new("decoder_out", c.d_model, c.target_vocab),
        })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.frontend.init(&mut store, &mut rng);
        self.encoder.init(&mut store, &mut rng);
        self.embed.init(&mut store, &mut rng);
        for b in &self.blocks {
            b.init(&mut store, &mut rng);
        }
        self.final_norm.init(&mut store);
        self.out.init(&mut store, &mut rng);
        store
    }

    /// Encoder memory `[T′×d_model]`.
    pub fn encode(&self, g: &mut Graph, p: &mut Binder, features: &Tensor) -> Result<Var> {
        let x = g.constant(features.clone());
        let x = self.frontend.forward(g, p, x)?;
        let x = add_positional_encoding(g, x)?;
        let x = g.dropout(x, self.config.dropout)?;
        self.encoder.forward(g, p, x)
    }

    pub fn decode_logits(&self, g: &mut Graph, p: &mut Binder, inputs: &[usize], memory: Var) -> Result<Var> {
        let x = self.embed.forward(g, p, inputs)?;
        let x = add_positional_encoding(g, x)?;
        let mut x = g.dropout(x, self.config.dropout)?;
        for b in &self.blocks {
            x = b.forward(g, p, x, memory)?;
        }
        let x = self.final_norm.forward(g, p, x)?;
        self.out.forward(g, p, x)
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, features: &Tensor, inputs: &[usize]) -> Result<Var> {
        let memory = self.encode(g, p, features)?;
        self.decode_logits(g, p, inputs, memory)
    }
}
