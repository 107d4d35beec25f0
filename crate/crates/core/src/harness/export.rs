//! Embedding export: image features, prompt features and prototypes with a
//! two-component PCA projection.

use std::fmt::Write as _;
use std::path::Path;

use super::run::{text_features, AdaptedModel, Experiment, Head};
use crate::error::{Error, Result};
use crate::image::Image;

pub const PCA_TOLERANCE: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Image,
    TextPrompt,
    Prototype,
}

impl EmbeddingKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Image => "image",
            EmbeddingKind::TextPrompt => "text_prompt",
            EmbeddingKind::Prototype => "prototype",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub kind: EmbeddingKind,
    pub class_id: usize,
    pub prototype_id: usize,
    pub values: Vec<f64>,
    pub projection: [f64; 2],
}

/// Principal axes of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl Pca {
    /// Top two eigenvectors of the sample covariance by power iteration
    /// with deflation, each iterated until it moves less than
    /// [`PCA_TOLERANCE`].
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        let dim = points.first().map_or(0, Vec::len);
        if n < 2 || dim < 2 {
            return Err(Error::Input(format!(
                "PCA needs at least 2 points of width ≥ 2, got {n}×{dim}"
            )));
        }
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Input("PCA points differ in width".into()));
        }
        let mut mean = vec![0.0; dim];
        for p in points {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x / n as f64;
            }
        }
        let mut cov = vec![0.0; dim * dim];
        for p in points {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] += c[i] * c[j] / (n - 1) as f64;
                }
            }
        }
        let first = power_iteration(&cov, dim, None);
        let second = power_iteration(&cov, dim, Some(&first.0));
        Ok(Self {
            mean,
            components: [first.0, second.0],
            variances: [first.1, second.1],
        })
    }

    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        [
            dot(&centered, &self.components[0]),
            dot(&centered, &self.components[1]),
        ]
    }

    pub fn reconstruct(&self, p: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len())
            .map(|i| self.mean[i] + p[0] * self.components[0][i] + p[1] * self.components[1][i])
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn remove_component(v: &mut [f64], axis: &[f64]) {
    let d = dot(v, axis);
    v.iter_mut().zip(axis).for_each(|(x, a)| *x -= d * a);
}

/// Leading eigenpair of `cov`, restricted to the complement of `exclude`.
fn power_iteration(cov: &[f64], dim: usize, exclude: Option<&[f64]>) -> (Vec<f64>, f64) {
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..dim)
            .map(|i| dot(&cov[i * dim..(i + 1) * dim], v))
            .collect()
    };
    // Start from the covariance column with the most energy outside the
    // excluded axis; fall back to a coordinate axis for a zero covariance.
    let mut start = vec![0.0; dim];
    let mut best = -1.0;
    for j in 0..dim {
        let mut col: Vec<f64> = (0..dim).map(|i| cov[i * dim + j]).collect();
        if let Some(e) = exclude {
            remove_component(&mut col, e);
        }
        let n = dot(&col, &col);
        if n > best {
            best = n;
            start = col;
        }
    }
    if normalize(&mut start) == 0.0 {
        start = vec![0.0; dim];
        let axis = exclude.map_or(0, |e| {
            (0..dim)
                .min_by(|&a, &b| e[a].abs().total_cmp(&e[b].abs()))
                .unwrap_or(0)
        });
        start[axis] = 1.0;
        if let Some(e) = exclude {
            remove_component(&mut start, e);
        }
        normalize(&mut start);
        return (start, 0.0);
    }
    let mut v = start;
    for _ in 0..PCA_MAX_ITERS {
        let mut w = apply(&v);
        if let Some(e) = exclude {
            remove_component(&mut w, e);
        }
        if normalize(&mut w) == 0.0 {
            break;
        }
        if dot(&w, &v) < 0.0 {
            w.iter_mut().for_each(|x| *x = -*x);
        }
        let moved = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = w;
        if moved < PCA_TOLERANCE {
            break;
        }
    }
    let lambda = dot(&v, &apply(&v));
    (v, lambda)
}

/// Rows for every test image, every text prompt and every prototype, in
/// that order, with their PCA projection.
pub fn export_embeddings(
    experiment: &Experiment,
    model: &AdaptedModel,
) -> Result<(Vec<EmbeddingRow>, Pca)> {
    let Head::Dicop(head) = &model.head else {
        return Err(Error::Config(format!(
            "embedding export needs a dicop_dpl model, got {}",
            model.method
        )));
    };
    let d = &experiment.scenario.dataset;
    let store = model.store();
    let images: Vec<&Image> = d.test.iter().map(|s| &s.image).collect();
    let f_v = model.encoders.vision.embed_images(store, &images, 64)?;
    let f_t = text_features(store, &model.encoders.text, &head.prompts)?;
    let m = store.value(head.prototypes.m);
    let mut rows: Vec<EmbeddingRow> = Vec::with_capacity(f_v.len() + 2 * f_t.len());
    let row = |kind, class_id, prototype_id, values| EmbeddingRow {
        kind,
        class_id,
        prototype_id,
        values,
        projection: [0.0; 2],
    };
    for (s, v) in d.test.iter().zip(f_v) {
        rows.push(row(EmbeddingKind::Image, s.class_id, s.prototype_id, v));
    }
    for (k, v) in f_t.into_iter().enumerate() {
        rows.push(row(EmbeddingKind::TextPrompt, d.class_map[k], k, v));
    }
    for k in 0..m.rows() {
        rows.push(row(
            EmbeddingKind::Prototype,
            d.class_map[k],
            k,
            m.row(k).to_vec(),
        ));
    }
    let points: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    let pca = Pca::fit(&points)?;
    for r in &mut rows {
        r.projection = pca.project(&r.values);
    }
    Ok((rows, pca))
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let h = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("id,kind,class_id,prototype_id,");
    for i in 0..h {
        let _ = write!(out, "e{i},");
    }
    out.push_str("p0,p1\n");
    for (id, r) in rows.iter().enumerate() {
        let _ = write!(
            out,
            "{id},{},{},{}",
            r.kind.name(),
            r.class_id,
            r.prototype_id
        );
        for v in &r.values {
            let _ = write!(out, ",{v:.8}");
        }
        let _ = writeln!(out, ",{:.8},{:.8}", r.projection[0], r.projection[1]);
    }
    out
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    super::experiments::write_text(path, &embeddings_csv(rows))
}
