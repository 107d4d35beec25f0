use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::render::{render_image, Location, Shape, SyntheticClassSpec, Texture};
use crate::dicop::{build_prompt, AttributeVocabulary, DiseaseDescriptor};
use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::image::Image;

/// Sample indices of the adaptation dataset start here so they never share a
/// noise stream with pretraining pairs.
pub const ADAPTATION_INDEX_OFFSET: u64 = 1 << 40;

const SPLIT_STREAM: u64 = 0x5eed_0001;
const FEW_SHOT_STREAM: u64 = 0x5eed_0002;
const PRETRAIN_ORDER_STREAM: u64 = 0x5eed_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// Target classes appear in at most `target_share` of pretraining pairs.
    Underrepresented,
    /// Target classes are absent from pretraining.
    New,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Underrepresented => "underrepresented",
            ScenarioKind::New => "new",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "underrepresented" => Ok(ScenarioKind::Underrepresented),
            "new" => Ok(ScenarioKind::New),
            other => Err(Error::Config(format!(
                "unknown scenario kind `{other}` (expected underrepresented or new)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub pretrain_pairs_per_class: usize,
    /// Upper bound on the target share of the pretraining corpus
    /// (underrepresented scenarios only).
    pub target_share: f64,
    pub images_per_prototype: usize,
    pub noise_std: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::New,
            seed: 0,
            pretrain_pairs_per_class: 500,
            target_share: 0.005,
            images_per_prototype: 250,
            noise_std: 0.1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_pairs_per_class == 0 {
            return Err(Error::Config(
                "pretrain_pairs_per_class must be positive".into(),
            ));
        }
        if !(self.target_share > 0.0 && self.target_share < 1.0) {
            return Err(Error::Config(format!(
                "target_share must be in (0, 1), got {}",
                self.target_share
            )));
        }
        if self.images_per_prototype < 10 {
            return Err(Error::Config(format!(
                "images_per_prototype must be at least 10 for a 7:1:2 split, got {}",
                self.images_per_prototype
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Which categories exist, which are pretrained on, and how the adaptation
/// prototypes map onto the `K` task classes.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkLayout {
    pub pretrain: Vec<SyntheticClassSpec>,
    pub prototypes: Vec<SyntheticClassSpec>,
    pub class_map: Vec<usize>,
    pub n_classes: usize,
    /// Task label of the target (positive) class.
    pub target_class: usize,
}

impl BenchmarkLayout {
    /// Six pretraining categories and a binary task: three benign prototypes
    /// (class 0) against one target prototype (class 1). Every attribute of
    /// the target occurs in some pretraining category; the combination and
    /// the target's class-name token do not.
    pub fn desk(noise_std: f64) -> Self {
        use Location::*;
        use Shape::*;
        use Texture::*;
        let spec = |id, t, l, s| SyntheticClassSpec::new(id, t, l, s, noise_std);
        let pretrain = vec![
            spec(0, Solid, Center, Disk),
            spec(1, Striped, UpperLeft, Square),
            spec(2, Checker, UpperRight, Triangle),
            spec(3, Dotted, LowerLeft, Ring),
            spec(4, Speckle, LowerRight, Disk),
            spec(5, Striped, Center, Ring),
        ];
        let prototypes = vec![
            pretrain[0],
            pretrain[5],
            pretrain[3],
            spec(6, Striped, Center, Disk),
        ];
        Self {
            pretrain,
            prototypes,
            class_map: vec![0, 0, 0, 1],
            n_classes: 2,
            target_class: 1,
        }
    }

    pub fn target_prototypes(&self) -> Vec<usize> {
        (0..self.prototypes.len())
            .filter(|&p| self.class_map[p] == self.target_class)
            .collect()
    }

    pub fn descriptors(&self) -> Vec<DiseaseDescriptor> {
        self.prototypes
            .iter()
            .map(SyntheticClassSpec::descriptor)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut triples = std::collections::BTreeMap::new();
        for s in self.pretrain.iter().chain(&self.prototypes) {
            s.validate()?;
            if let Some(other) = triples.insert(s.triple(), s.class_id) {
                if other != s.class_id {
                    return Err(Error::Config(format!(
                        "classes {other} and {} share the attributes {:?}",
                        s.class_id,
                        s.triple()
                    )));
                }
            }
        }
        if self.class_map.len() != self.prototypes.len() {
            return Err(Error::Config(
                "class map length differs from prototype count".into(),
            ));
        }
        if self.n_classes == 0 || self.n_classes > self.prototypes.len() {
            return Err(Error::Config(
                "class count must be in 1..=prototype count".into(),
            ));
        }
        if (0..self.n_classes).any(|k| !self.class_map.contains(&k))
            || self.class_map.iter().any(|&k| k >= self.n_classes)
        {
            return Err(Error::Config(
                "class map must cover every class exactly within range".into(),
            ));
        }
        if self.target_class >= self.n_classes {
            return Err(Error::Config("target class out of range".into()));
        }
        Ok(())
    }
}

/// Largest number of target pairs `t` such that `t / (others + t) ≤ share`.
pub fn target_pairs_for_share(others: usize, share: f64) -> usize {
    let mut t = (share * others as f64 / (1.0 - share)).floor() as usize;
    while t > 0 && t as f64 / (others + t) as f64 > share {
        t -= 1;
    }
    t
}

/// Target pairs in a corpus of `total` pairs at the given share.
pub fn target_pairs_for_total(total: usize, share: f64) -> usize {
    (total as f64 * share + 1e-9).floor() as usize
}

#[derive(Debug, Clone)]
pub struct PretrainPair {
    pub sample_index: u64,
    pub class_id: usize,
    pub image: Image,
    pub caption: TokenSequence,
}

#[derive(Debug, Clone)]
pub struct PretrainCorpus {
    pub pairs: Vec<PretrainPair>,
    /// One `(class_id, caption)` per distinct category in the corpus.
    pub classes: Vec<(usize, TokenSequence)>,
}

impl PretrainCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count_class(&self, class_id: usize) -> usize {
        self.pairs.iter().filter(|p| p.class_id == class_id).count()
    }

    /// Pair order for one epoch, keyed by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PRETRAIN_ORDER_STREAM);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub sample_index: u64,
    pub image: Image,
    pub class_id: usize,
    pub prototype_id: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub descriptors: Vec<DiseaseDescriptor>,
    pub class_map: Vec<usize>,
    pub n_classes: usize,
}

impl DatasetSplit {
    pub fn split(&self, which: Split) -> &[Sample] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn n_prototypes(&self) -> usize {
        self.descriptors.len()
    }

    /// Train-set sample count requested by `fraction`.
    pub fn few_shot_count(&self, fraction: f64) -> Result<usize> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data fraction must be in (0, 1], got {fraction}"
            )));
        }
        Ok((fraction * self.train.len() as f64 + 1e-9).floor() as usize)
    }

    /// Stratified seeded subset of the training split: `floor(fraction·N)`
    /// samples allocated to prototypes by largest remainder.
    pub fn few_shot(&self, fraction: f64, seed: u64) -> Result<Vec<usize>> {
        let count = self.few_shot_count(fraction)?;
        let groups = self.train_groups();
        let alloc = allocate(&groups, count);
        if !self.covers_all_classes(&alloc) {
            let min = (1..=self.train.len())
                .find(|&c| self.covers_all_classes(&allocate(&groups, c)))
                .unwrap_or(self.train.len());
            return Err(Error::Config(format!(
                "data fraction {fraction} gives {count} training samples, leaving a class empty; \
                 use at least {min} samples (fraction ≥ {:.4})",
                min as f64 / self.train.len() as f64
            )));
        }
        let mut picked = Vec::with_capacity(count);
        for (p, (members, take)) in groups.iter().zip(&alloc).enumerate() {
            let mut m = members.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FEW_SHOT_STREAM);
            rng.set_stream(p as u64);
            m.shuffle(&mut rng);
            picked.extend_from_slice(&m[..*take]);
        }
        picked.sort_unstable();
        Ok(picked)
    }

    fn train_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_prototypes()];
        for (i, s) in self.train.iter().enumerate() {
            groups[s.prototype_id].push(i);
        }
        groups
    }

    fn covers_all_classes(&self, alloc: &[usize]) -> bool {
        (0..self.n_classes).all(|k| {
            alloc
                .iter()
                .enumerate()
                .any(|(p, &n)| n > 0 && self.class_map[p] == k)
        })
    }
}

/// Largest-remainder apportionment of `count` across groups proportional to
/// their sizes; ties go to the lower group index.
fn allocate(groups: &[Vec<usize>], count: usize) -> Vec<usize> {
    let total: usize = groups.iter().map(Vec::len).sum();
    if total == 0 {
        return vec![0; groups.len()];
    }
    let quotas: Vec<f64> = groups
        .iter()
        .map(|g| count as f64 * g.len() as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = count - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &g in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if alloc[g] < groups[g].len() {
            alloc[g] += 1;
            rest -= 1;
        }
    }
    alloc
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub layout: BenchmarkLayout,
    pub vocab: AttributeVocabulary,
    pub pretrain: PretrainCorpus,
    pub dataset: DatasetSplit,
}

impl Scenario {
    /// Classes whose prompts the pretraining corpus teaches, for zero-shot
    /// evaluation of the base model.
    pub fn pretrain_specs(&self) -> Vec<SyntheticClassSpec> {
        self.layout.pretrain.clone()
    }
}

/// Builds the pretraining corpus and the 7:1:2 adaptation split.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    generate_with_layout(config, BenchmarkLayout::desk(config.noise_std))
}

pub fn generate_with_layout(config: &ScenarioConfig, layout: BenchmarkLayout) -> Result<Scenario> {
    config.validate()?;
    layout.validate()?;
    let vocab = AttributeVocabulary::default();
    let pretrain = build_pretrain_corpus(config, &layout, &vocab)?;
    let dataset = build_adaptation_split(config, &layout)?;
    Ok(Scenario {
        config: config.clone(),
        layout,
        vocab,
        pretrain,
        dataset,
    })
}

fn build_pretrain_corpus(
    config: &ScenarioConfig,
    layout: &BenchmarkLayout,
    vocab: &AttributeVocabulary,
) -> Result<PretrainCorpus> {
    let target_ids: Vec<usize> = layout
        .target_prototypes()
        .iter()
        .map(|&p| layout.prototypes[p].class_id)
        .collect();
    let mut plan: Vec<(SyntheticClassSpec, usize)> = layout
        .pretrain
        .iter()
        .filter(|s| !target_ids.contains(&s.class_id))
        .map(|s| (*s, config.pretrain_pairs_per_class))
        .collect();
    if config.kind == ScenarioKind::Underrepresented {
        let others: usize = plan.iter().map(|(_, n)| n).sum();
        let budget = target_pairs_for_share(others, config.target_share);
        let targets: Vec<SyntheticClassSpec> = layout
            .target_prototypes()
            .iter()
            .map(|&p| layout.prototypes[p])
            .collect();
        if budget < targets.len() {
            return Err(Error::Config(format!(
                "target share {} allows {budget} target pairs for {} target classes",
                config.target_share,
                targets.len()
            )));
        }
        for (i, t) in targets.iter().enumerate() {
            let n = budget / targets.len() + usize::from(i < budget % targets.len());
            plan.push((*t, n));
        }
    }
    let mut pairs = Vec::new();
    let mut classes = Vec::new();
    let mut index = 0u64;
    for (spec, n) in plan {
        let caption = build_prompt(vocab, &spec.descriptor())?;
        classes.push((spec.class_id, caption.clone()));
        for _ in 0..n {
            pairs.push(PretrainPair {
                sample_index: index,
                class_id: spec.class_id,
                image: render_image(&spec, index, config.seed),
                caption: caption.clone(),
            });
            index += 1;
        }
    }
    Ok(PretrainCorpus { pairs, classes })
}

fn build_adaptation_split(
    config: &ScenarioConfig,
    layout: &BenchmarkLayout,
) -> Result<DatasetSplit> {
    let n = config.images_per_prototype;
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        descriptors: layout.descriptors(),
        class_map: layout.class_map.clone(),
        n_classes: layout.n_classes,
    };
    for (p, spec) in layout.prototypes.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SPLIT_STREAM);
        rng.set_stream(p as u64);
        order.shuffle(&mut rng);
        for (rank, j) in order.into_iter().enumerate() {
            let sample_index = ADAPTATION_INDEX_OFFSET + (p * n + j) as u64;
            let sample = Sample {
                sample_index,
                image: render_image(spec, sample_index, config.seed),
                class_id: layout.class_map[p],
                prototype_id: p,
            };
            if rank < n_train {
                split.train.push(sample);
            } else if rank < n_train + n_val {
                split.val.push(sample);
            } else {
                split.test.push(sample);
            }
        }
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_by_key(|s| s.sample_index);
    }
    Ok(split)
}
