//! Toy dual encoders, LoRA, layer-wise learning-rate decay and AdamW.

pub mod layers;
pub mod optim;
pub mod text;
pub mod vision;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::{LayerNorm, Linear, LoraAdapter, TransformerBlock};
pub use optim::{layerwise_lr, AdamW, AdamWConfig};
pub use text::{TextEncoder, TextEncoderConfig, TokenSequence, CLS_TOKEN};
pub use vision::{VisionEncoder, VisionEncoderConfig};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// A text encoder and a vision encoder sharing one parameter store and one
/// embedding width.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub store: ParamStore,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
}

impl DualEncoder {
    pub fn new(text: TextEncoderConfig, vision: VisionEncoderConfig, seed: u64) -> Result<Self> {
        if text.embed_dim != vision.embed_dim {
            return Err(Error::Config(format!(
                "text and vision widths differ ({} vs {})",
                text.embed_dim, vision.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, text, &mut rng)?;
        let vision = VisionEncoder::new(&mut store, vision, &mut rng)?;
        Ok(Self {
            store,
            text,
            vision,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.text.config.embed_dim
    }

    pub fn freeze_text(&mut self) {
        self.store.set_trainable_prefix(TextEncoder::PREFIX, false);
    }

    pub fn freeze_vision(&mut self) {
        self.store
            .set_trainable_prefix(VisionEncoder::PREFIX, false);
    }
}
