use std::collections::BTreeMap;

use super::scenario::PretrainCorpus;
use crate::autodiff::ParamStore;
use crate::autodiff::Tape;
use crate::dpl::loss_ita;
use crate::encoders::{AdamW, AdamWConfig, DualEncoder, TextEncoder, TokenSequence, VisionEncoder};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            tau: 0.07,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "pretraining batch size must be at least 2".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config(
                "pretraining lr and tau must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Symmetric contrastive training of both encoders on (image, caption)
/// pairs; the text encoder is frozen when this returns successfully.
pub fn pretrain_clip(
    pair: &mut DualEncoder,
    corpus: &PretrainCorpus,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty pretraining corpus".into()));
    }
    pair.store.set_trainable_prefix(TextEncoder::PREFIX, true);
    pair.store.set_trainable_prefix(VisionEncoder::PREFIX, true);
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    });
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = corpus.epoch_order(config.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let loss = match contrastive_step(pair, corpus, chunk, config.tau, &mut opt) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::Domain { .. }) | Err(Error::NanGradient(_)) => {
                    return Err(Error::Divergence {
                        last_finite_epoch: epoch.checked_sub(1),
                    })
                }
                Err(e) => return Err(e),
            };
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        curve.push(mean);
    }
    pair.freeze_text();
    Ok(PretrainReport { loss_curve: curve })
}

fn contrastive_step(
    pair: &mut DualEncoder,
    corpus: &PretrainCorpus,
    batch: &[usize],
    tau: f64,
    opt: &mut AdamW,
) -> Result<f64> {
    let images: Vec<&Image> = batch.iter().map(|&i| &corpus.pairs[i].image).collect();
    // Identical captions are encoded once and expanded, which gives the same
    // loss and gradients as encoding every row.
    let mut unique: BTreeMap<&[usize], usize> = BTreeMap::new();
    let mut captions: Vec<TokenSequence> = Vec::new();
    let rows: Vec<usize> = batch
        .iter()
        .map(|&i| {
            let c = &corpus.pairs[i].caption;
            *unique.entry(c.ids()).or_insert_with(|| {
                captions.push(c.clone());
                captions.len() - 1
            })
        })
        .collect();
    let mut tape = Tape::new();
    let f_v = pair.vision.encode(&mut tape, &pair.store, &images)?;
    let f_t = pair.text.encode(&mut tape, &pair.store, &captions)?;
    let f_t = tape.gather_rows(f_t, &rows)?;
    let loss = loss_ita(&mut tape, f_v, f_t, tau)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    pair.store.zero_grads();
    pair.store.accumulate_grads(&tape);
    opt.step(&mut pair.store)?;
    Ok(value)
}

/// Cosine similarity of every image to every prompt.
pub fn zero_shot_scores(
    store: &ParamStore,
    text: &TextEncoder,
    vision: &VisionEncoder,
    images: &[&Image],
    prompts: &[TokenSequence],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let f_t = text.encode(&mut tape, store, prompts)?;
    let f_t = tape.value(f_t).clone();
    let f_v = vision.embed_images(store, images, 64)?;
    Ok(f_v
        .iter()
        .map(|v| {
            (0..f_t.rows())
                .map(|k| v.iter().zip(f_t.row(k)).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect())
}

/// Index of the most similar prompt per image (ties → lowest index).
pub fn zero_shot_predict(
    store: &ParamStore,
    text: &TextEncoder,
    vision: &VisionEncoder,
    images: &[&Image],
    prompts: &[TokenSequence],
) -> Result<Vec<usize>> {
    Ok(zero_shot_scores(store, text, vision, images, prompts)?
        .iter()
        .map(|s| argmax(s))
        .collect())
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
