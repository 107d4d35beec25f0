use std::collections::BTreeMap;
use std::fmt;

use crate::encoders::CLS_TOKEN;
use crate::error::{Error, Result};

pub const CLS_WORD: &str = "[CLS]";

pub const TEXTURES: [&str; 5] = ["solid", "striped", "checker", "dotted", "speckle"];
pub const LOCATIONS: [&str; 5] = [
    "center",
    "upper left",
    "upper right",
    "lower left",
    "lower right",
];
pub const SHAPES: [&str; 4] = ["disk", "square", "triangle", "ring"];

/// Number of reserved class-name tokens (`<c0>`, `<c1>`, ...).
pub const CLASS_NAME_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Texture,
    Location,
    Shape,
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attribute::Texture => "texture",
            Attribute::Location => "location",
            Attribute::Shape => "shape",
        })
    }
}

/// Closed vocabulary of attribute words plus `[CLS]` and class-name tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVocabulary {
    textures: Vec<String>,
    locations: Vec<String>,
    shapes: Vec<String>,
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self::new(own(&TEXTURES), own(&LOCATIONS), own(&SHAPES))
            .expect("builtin vocabulary is valid")
    }
}

impl AttributeVocabulary {
    pub fn new(textures: Vec<String>, locations: Vec<String>, shapes: Vec<String>) -> Result<Self> {
        let word_sets: Vec<(Attribute, std::collections::BTreeSet<&str>)> = [
            (Attribute::Texture, &textures),
            (Attribute::Location, &locations),
            (Attribute::Shape, &shapes),
        ]
        .into_iter()
        .map(|(a, descs)| (a, descs.iter().flat_map(|d| d.split_whitespace()).collect()))
        .collect();
        for i in 0..word_sets.len() {
            for j in i + 1..word_sets.len() {
                if let Some(w) = word_sets[i].1.intersection(&word_sets[j].1).next() {
                    return Err(Error::Config(format!(
                        "word `{w}` appears in both {} and {} descriptions",
                        word_sets[i].0, word_sets[j].0
                    )));
                }
            }
        }
        let mut words = vec![CLS_WORD.to_string()];
        for (_, set) in &word_sets {
            words.extend(set.iter().map(|w| w.to_string()));
        }
        words.extend((0..CLASS_NAME_TOKENS).map(class_name_word));
        let mut ids = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("word `{w}` listed twice")));
            }
        }
        debug_assert_eq!(ids[CLS_WORD], CLS_TOKEN);
        Ok(Self {
            textures,
            locations,
            shapes,
            words,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn textures(&self) -> &[String] {
        &self.textures
    }

    pub fn locations(&self) -> &[String] {
        &self.locations
    }

    pub fn shapes(&self) -> &[String] {
        &self.shapes
    }

    /// Token ids for a whitespace-separated description; reports every
    /// out-of-vocabulary word.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut missing = Vec::new();
        for w in text.split_whitespace() {
            match self.id(w) {
                Some(id) => ids.push(id),
                None => missing.push(w.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Input(format!(
                "out-of-vocabulary word(s): {}",
                missing.join(", ")
            )));
        }
        Ok(ids)
    }

    pub fn class_name_token(&self, class_id: usize) -> Result<usize> {
        if class_id >= CLASS_NAME_TOKENS {
            return Err(Error::Input(format!(
                "class id {class_id} has no name token (max {})",
                CLASS_NAME_TOKENS - 1
            )));
        }
        Ok(self.ids[&class_name_word(class_id)])
    }
}

fn class_name_word(k: usize) -> String {
    format!("<c{k}>")
}
