//! Disease-informed contextual prompting: attribute prompts, the image
//! feature projector and context injection into the frozen text encoder.

pub mod prompt;
pub mod vocab;

use rand::Rng;

pub use prompt::{
    build_prompt, build_prompt_ordered, class_name_prompt, format_descriptors, parse_descriptors,
    read_descriptor_file, DiseaseDescriptor, PROMPT_ORDER,
};
pub use vocab::{Attribute, AttributeVocabulary};

use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Var};
use crate::encoders::{Linear, TextEncoder, TokenSequence};
use crate::error::{Error, Result};

/// Width reduction of the projector bottleneck.
pub const BOTTLENECK_FACTOR: usize = 16;

/// Two-layer bottleneck (Linear → ReLU → Linear) from image features to the
/// token-embedding width.
#[derive(Debug, Clone)]
pub struct ContextProjector {
    pub down: Linear,
    pub up: Linear,
}

impl ContextProjector {
    pub const PREFIX: &'static str = "projector.";

    pub fn bottleneck_width(input_dim: usize) -> Result<usize> {
        let w = input_dim / BOTTLENECK_FACTOR;
        if w == 0 {
            return Err(Error::Config(format!(
                "input width {input_dim} leaves an empty bottleneck (needs ≥ {BOTTLENECK_FACTOR})"
            )));
        }
        Ok(w)
    }

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        token_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_prefix(store, "projector", input_dim, token_dim, rng)
    }

    pub fn with_prefix<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        token_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = Self::bottleneck_width(input_dim)?;
        Ok(Self {
            down: Linear::new(
                store,
                &format!("{prefix}.down"),
                input_dim,
                width,
                true,
                rng,
            )?,
            up: Linear::new(store, &format!("{prefix}.up"), width, token_dim, true, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        self.down.d_out
    }

    /// `f_s = up(relu(down(f_v)))`, one row per image.
    pub fn project_context(&self, tape: &mut Tape, store: &ParamStore, f_v: Var) -> Result<Var> {
        let d = tape.value(f_v).cols();
        if d != self.down.d_in {
            return Err(Error::Config(format!(
                "projector expects width {}, got {d}",
                self.down.d_in
            )));
        }
        let h = self.down.forward(tape, store, f_v)?;
        let h = tape.relu(h);
        self.up.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.down.params();
        v.extend(self.up.params());
        v
    }
}

/// Adds `f_s` (1×h) to every token embedding except position 0 (`[CLS]`).
pub fn inject_context(tape: &mut Tape, token_embeddings: Var, f_s: Var) -> Result<Var> {
    let (len, h) = {
        let t = tape.value(token_embeddings);
        (t.rows(), t.cols())
    };
    let fs = tape.value(f_s);
    if fs.rows() != 1 || fs.cols() != h {
        return Err(Error::shape(
            "inject_context",
            format!("context {:?} does not match token width {h}", fs.shape()),
        ));
    }
    if len == 1 {
        return Ok(token_embeddings);
    }
    let cls = tape.slice(token_embeddings, Axis::Rows, 0, 1)?;
    let rest = tape.slice(token_embeddings, Axis::Rows, 1, len - 1)?;
    let shifted = tape.add(rest, f_s)?;
    tape.concat(&[cls, shifted], Axis::Rows)
}

/// Text-only prompt representations `f_t`, one row per prompt.
pub fn encode_text_prompts(
    tape: &mut Tape,
    store: &ParamStore,
    text: &TextEncoder,
    prompts: &[TokenSequence],
) -> Result<Var> {
    if prompts.is_empty() {
        return Err(Error::Config("no class prompts to encode".into()));
    }
    crate::probe::record_prompt_encode();
    text.encode(tape, store, prompts)
}

/// Context-augmented representations `f_ts`: row `i` encodes
/// `prompts[assignment[i]]` with row `i` of `f_s` injected.
pub fn encode_contextual_prompts(
    tape: &mut Tape,
    store: &ParamStore,
    text: &TextEncoder,
    prompts: &[TokenSequence],
    assignment: &[usize],
    f_s: Var,
) -> Result<Var> {
    if prompts.is_empty() {
        return Err(Error::Config("no class prompts to encode".into()));
    }
    let n = tape.value(f_s).rows();
    if assignment.len() != n {
        return Err(Error::shape(
            "encode_contextual_prompts",
            format!("{} assignments for {n} context rows", assignment.len()),
        ));
    }
    crate::probe::record_prompt_encode();
    let mut embedded: Vec<Option<Var>> = vec![None; prompts.len()];
    let mut sequences = Vec::with_capacity(n);
    for (i, &k) in assignment.iter().enumerate() {
        let tokens = prompts.get(k).ok_or_else(|| {
            Error::Input(format!(
                "image {i} assigned to prompt {k}, only {} prompts",
                prompts.len()
            ))
        })?;
        let emb = match embedded[k] {
            Some(e) => e,
            None => {
                let e = text.embed(tape, store, tokens)?;
                embedded[k] = Some(e);
                e
            }
        };
        let fs_i = tape.slice(f_s, Axis::Rows, i, 1)?;
        sequences.push(inject_context(tape, emb, fs_i)?);
    }
    text.encode_embedded(tape, store, &sequences)
}

/// Prompt tokens and the text-only representation for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub class_id: usize,
    pub tokens: TokenSequence,
    pub f_t: Vec<f64>,
}

/// Encodes the class prompts without image context.
pub fn encode_prompts(
    store: &ParamStore,
    text: &TextEncoder,
    vocab: &AttributeVocabulary,
    descriptors: &[DiseaseDescriptor],
) -> Result<Vec<PromptBundle>> {
    if descriptors.is_empty() {
        return Err(Error::Config("class count is 0".into()));
    }
    let prompts = descriptors
        .iter()
        .map(|d| build_prompt(vocab, d))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let f_t = encode_text_prompts(&mut tape, store, text, &prompts)?;
    let values = tape.value(f_t);
    Ok(descriptors
        .iter()
        .zip(prompts)
        .enumerate()
        .map(|(k, (d, tokens))| PromptBundle {
            class_id: d.class_id,
            tokens,
            f_t: values.row(k).to_vec(),
        })
        .collect())
}
