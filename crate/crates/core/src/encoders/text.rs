use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sequence_starts, truncated_normal, LayerNorm, TransformerBlock, INIT_STD};
use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Token id of the `[CLS]` marker; always at position 0.
pub const CLS_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_seq_len: 32,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.n_layers == 0 || self.n_heads == 0
        {
            return Err(Error::Config("text encoder sizes must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "text embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Ordered token ids, `[CLS]` first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
}

impl TextEncoder {
    pub const PREFIX: &'static str = "text.";

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: TextEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.embed_dim;
        let tok_emb = store.add(
            "text.tok_emb",
            Tensor::matrix(
                config.vocab_size,
                h,
                truncated_normal(rng, config.vocab_size * h, INIT_STD),
            )?,
            true,
        )?;
        let pos_emb = store.add(
            "text.pos_emb",
            Tensor::matrix(
                config.max_seq_len,
                h,
                truncated_normal(rng, config.max_seq_len * h, INIT_STD),
            )?,
            true,
        )?;
        let blocks = (0..config.n_layers)
            .map(|i| {
                TransformerBlock::new(store, &format!("text.blocks.{i}"), h, config.n_heads, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, "text.ln_f", h)?;
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    pub fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "token sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens
            .ids()
            .iter()
            .find(|&&id| id >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} is out of vocabulary (size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings, `len × h`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &TokenSequence,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = tape.param(store, self.tok_emb);
        let pos = tape.param(store, self.pos_emb);
        let tok = tape.gather_rows(table, tokens.ids())?;
        let pos = tape.slice(pos, Axis::Rows, 0, tokens.len())?;
        tape.add(tok, pos)
    }

    /// `[CLS] ⊕ context ⊕ token` with the `M×h` context rows standing in for
    /// word embeddings, plus position embeddings.
    pub fn embed_with_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        context: Option<Var>,
        last_token: usize,
    ) -> Result<Var> {
        let tokens = TokenSequence(vec![CLS_TOKEN, last_token]);
        self.check_tokens(&tokens)?;
        let m = context.map_or(0, |c| tape.value(c).rows());
        if m + 2 > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "context of {m} tokens exceeds the maximum sequence length {}",
                self.config.max_seq_len
            )));
        }
        let table = tape.param(store, self.tok_emb);
        let cls = tape.gather_rows(table, &[CLS_TOKEN])?;
        let last = tape.gather_rows(table, &[last_token])?;
        let parts: Vec<Var> = match context {
            Some(c) => vec![cls, c, last],
            None => vec![cls, last],
        };
        let tok = tape.concat(&parts, Axis::Rows)?;
        let pos = tape.param(store, self.pos_emb);
        let pos = tape.slice(pos, Axis::Rows, 0, m + 2)?;
        tape.add(tok, pos)
    }

    /// Runs the transformer over already-embedded sequences and returns the
    /// L2-normalized final `[CLS]` rows, `n × h`.
    pub fn encode_embedded(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sequences: &[Var],
    ) -> Result<Var> {
        if sequences.is_empty() {
            return Err(Error::Input("no sequences to encode".into()));
        }
        let seq_lens: Vec<usize> = sequences.iter().map(|&s| tape.value(s).rows()).collect();
        let mut x = tape.concat(sequences, Axis::Rows)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, &seq_lens)?;
        }
        let x = self.ln_f.forward(tape, store, x)?;
        let cls = tape.gather_rows(x, &sequence_starts(&seq_lens))?;
        Ok(tape.l2_normalize_rows(cls))
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[TokenSequence],
    ) -> Result<Var> {
        let embedded = batch
            .iter()
            .map(|t| self.embed(tape, store, t))
            .collect::<Result<Vec<_>>>()?;
        self.encode_embedded(tape, store, &embedded)
    }

    /// Tape-free convenience: the normalized `[CLS]` vector of one sequence.
    pub fn encode_text(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.encode(&mut tape, store, std::slice::from_ref(tokens))?;
        Ok(tape.value(out).values().to_vec())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_emb, self.pos_emb, self.ln_f.gamma, self.ln_f.beta];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }
}
