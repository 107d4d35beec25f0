use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::vocab::{Attribute, AttributeVocabulary};
use crate::encoders::{TokenSequence, CLS_TOKEN};
use crate::error::{Error, Result};

/// Attribute descriptions for one category.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiseaseDescriptor {
    pub class_id: usize,
    pub texture: String,
    pub location: String,
    pub shape: String,
}

impl DiseaseDescriptor {
    pub fn new(class_id: usize, texture: &str, location: &str, shape: &str) -> Result<Self> {
        let d = Self {
            class_id,
            texture: texture.trim().to_string(),
            location: location.trim().to_string(),
            shape: shape.trim().to_string(),
        };
        for a in [Attribute::Texture, Attribute::Location, Attribute::Shape] {
            if d.description(a).is_empty() {
                return Err(Error::Input(format!(
                    "class {class_id}: empty {a} description"
                )));
            }
        }
        Ok(d)
    }

    pub fn description(&self, attribute: Attribute) -> &str {
        match attribute {
            Attribute::Texture => &self.texture,
            Attribute::Location => &self.location,
            Attribute::Shape => &self.shape,
        }
    }
}

pub const PROMPT_ORDER: [Attribute; 3] =
    [Attribute::Texture, Attribute::Location, Attribute::Shape];

/// `[CLS] ⊕ texture ⊕ location ⊕ shape`.
pub fn build_prompt(
    vocab: &AttributeVocabulary,
    descriptor: &DiseaseDescriptor,
) -> Result<TokenSequence> {
    build_prompt_ordered(vocab, descriptor, PROMPT_ORDER)
}

/// Same as [`build_prompt`] with an explicit attribute order.
pub fn build_prompt_ordered(
    vocab: &AttributeVocabulary,
    descriptor: &DiseaseDescriptor,
    order: [Attribute; 3],
) -> Result<TokenSequence> {
    let mut ids = vec![CLS_TOKEN];
    let mut missing = Vec::new();
    for a in order {
        match vocab.tokenize(descriptor.description(a)) {
            Ok(t) => ids.extend(t),
            Err(Error::Input(msg)) => missing.push(msg),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "class {}: {}",
            descriptor.class_id,
            missing.join("; ")
        )));
    }
    Ok(TokenSequence(ids))
}

/// `[CLS] <c{class_id}>`: the prompt with every attribute removed.
pub fn class_name_prompt(vocab: &AttributeVocabulary, class_id: usize) -> Result<TokenSequence> {
    Ok(TokenSequence(vec![
        CLS_TOKEN,
        vocab.class_name_token(class_id)?,
    ]))
}

/// Parses `class_id|texture|location|shape` lines; `#` starts a comment line.
pub fn parse_descriptors(text: &str) -> Result<Vec<DiseaseDescriptor>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 4 {
            return Err(Error::Input(format!(
                "descriptor line {}: expected 4 `|`-separated fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let class_id: usize = fields[0].trim().parse().map_err(|_| {
            Error::Input(format!(
                "descriptor line {}: bad class id `{}`",
                lineno + 1,
                fields[0].trim()
            ))
        })?;
        if !seen.insert(class_id) {
            return Err(Error::Input(format!(
                "descriptor line {}: duplicate class id {class_id}",
                lineno + 1
            )));
        }
        out.push(DiseaseDescriptor::new(
            class_id, fields[1], fields[2], fields[3],
        )?);
    }
    Ok(out)
}

pub fn format_descriptors(descriptors: &[DiseaseDescriptor]) -> String {
    let mut s = String::from("# class_id|texture|location|shape\n");
    for d in descriptors {
        let _ = writeln!(s, "{}|{}|{}|{}", d.class_id, d.texture, d.location, d.shape);
    }
    s
}

pub fn read_descriptor_file(path: &Path) -> Result<Vec<DiseaseDescriptor>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_descriptors(&text)
}
