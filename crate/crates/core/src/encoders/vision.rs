use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    sequence_starts, truncated_normal, LayerNorm, Linear, TransformerBlock, INIT_STD,
};
use super::optim::layerwise_lr;
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
        }
    }
}

impl VisionEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config(
                "vision encoder sizes must be positive".into(),
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "vision embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Patch-embedding transformer with a learned `[CLS]` token prepended.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub config: VisionEncoderConfig,
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
}

impl VisionEncoder {
    pub const PREFIX: &'static str = "vision.";

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: VisionEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.embed_dim;
        let patch_proj = Linear::new(store, "vision.patch_proj", config.patch_dim(), h, true, rng)?;
        let cls = store.add(
            "vision.cls",
            Tensor::matrix(1, h, truncated_normal(rng, h, INIT_STD))?,
            true,
        )?;
        let t = config.n_patches() + 1;
        let pos_emb = store.add(
            "vision.pos_emb",
            Tensor::matrix(t, h, truncated_normal(rng, t * h, INIT_STD))?,
            true,
        )?;
        let blocks = (0..config.n_layers)
            .map(|i| {
                TransformerBlock::new(store, &format!("vision.blocks.{i}"), h, config.n_heads, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, "vision.ln_f", h)?;
        Ok(Self {
            config,
            patch_proj,
            cls,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Splits an image into flattened patches, `n_patches × patch_dim`,
    /// patches in raster order.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let c = &self.config;
        if image.size() != c.image_size {
            return Err(Error::Input(format!(
                "image is {0}x{0}, encoder expects {1}x{1}",
                image.size(),
                c.image_size
            )));
        }
        let per_side = c.patches_per_side();
        let p = c.patch_size;
        let mut values = Vec::with_capacity(c.n_patches() * c.patch_dim());
        for pr in 0..per_side {
            for pc in 0..per_side {
                for r in 0..p {
                    let row = pr * p + r;
                    let start = row * c.image_size + pc * p;
                    values.extend_from_slice(&image.pixels()[start..start + p]);
                }
            }
        }
        Tensor::matrix(c.n_patches(), c.patch_dim(), values)
    }

    /// Normalized final `[CLS]` embeddings for a batch, `n × h`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, images: &[&Image]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Input("no images to encode".into()));
        }
        crate::probe::record_vision_encode(images.len());
        let n_patches = self.config.n_patches();
        let mut values = Vec::with_capacity(images.len() * n_patches * self.config.patch_dim());
        for img in images {
            values.extend(self.patchify(img)?.into_values());
        }
        let patches = tape.constant(Tensor::matrix(
            images.len() * n_patches,
            self.config.patch_dim(),
            values,
        )?);
        let projected = self.patch_proj.forward(tape, store, patches)?;
        let cls = tape.param(store, self.cls);
        // Row 0 of `table` is [CLS]; image i's patches start at 1 + i·n_patches.
        let table = tape.concat(&[cls, projected], crate::autodiff::Axis::Rows)?;
        let seq_len = n_patches + 1;
        let mut token_ids = Vec::with_capacity(images.len() * seq_len);
        let mut pos_ids = Vec::with_capacity(images.len() * seq_len);
        for i in 0..images.len() {
            token_ids.push(0);
            token_ids.extend((0..n_patches).map(|p| 1 + i * n_patches + p));
            pos_ids.extend(0..seq_len);
        }
        let tokens = tape.gather_rows(table, &token_ids)?;
        let pos = tape.param(store, self.pos_emb);
        let pos = tape.gather_rows(pos, &pos_ids)?;
        let mut x = tape.add(tokens, pos)?;
        let seq_lens = vec![seq_len; images.len()];
        for block in &self.blocks {
            x = block.forward(tape, store, x, &seq_lens)?;
        }
        let x = self.ln_f.forward(tape, store, x)?;
        let cls_rows = tape.gather_rows(x, &sequence_starts(&seq_lens))?;
        Ok(tape.l2_normalize_rows(cls_rows))
    }

    /// Tape-free convenience for a single image.
    pub fn encode_image(&self, store: &ParamStore, image: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.encode(&mut tape, store, &[image])?;
        Ok(tape.value(out).values().to_vec())
    }

    /// Encodes many images without gradients, `chunk` at a time.
    pub fn embed_images(
        &self,
        store: &ParamStore,
        images: &[&Image],
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let v = self.encode(&mut tape, store, part)?;
            let t = tape.value(v);
            out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Attaches LoRA adapters to the query and value projections of every
    /// block and freezes all base encoder weights.
    pub fn attach_lora<R: Rng>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<()> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        store.set_trainable_prefix(Self::PREFIX, false);
        for block in &mut self.blocks {
            block.wq.attach_lora(store, rank, alpha, rng)?;
            block.wv.attach_lora(store, rank, alpha, rng)?;
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.wq.lora.is_some())
    }

    /// Layer groups bottom-up: embeddings, each block, final norm.
    pub fn layer_groups(&self) -> Vec<Vec<ParamId>> {
        let mut groups = vec![{
            let mut g = self.patch_proj.params();
            g.extend([self.cls, self.pos_emb]);
            g
        }];
        groups.extend(self.blocks.iter().map(TransformerBlock::params));
        groups.push(vec![self.ln_f.gamma, self.ln_f.beta]);
        groups
    }

    /// Sets each parameter's learning-rate multiplier to `beta^(depth from top)`.
    pub fn apply_layer_decay(&self, store: &mut ParamStore, beta: f64) -> Result<()> {
        let groups = self.layer_groups();
        let n = groups.len();
        for (i, group) in groups.iter().enumerate() {
            let scale = layerwise_lr(i, n, 1.0, beta)?;
            for &id in group {
                store.get_mut(id).lr_scale = scale;
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layer_groups().into_iter().flatten().collect()
    }
}
