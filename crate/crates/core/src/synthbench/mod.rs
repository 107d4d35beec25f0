//! Procedural attribute-grounded benchmark and CLIP-style pretraining of the
//! base dual encoder.

pub mod dump;
pub mod pretrain;
pub mod render;
pub mod scenario;

pub use dump::{dump_dataset, read_f32_image, MANIFEST_HEADER};
pub use pretrain::{
    pretrain_clip, zero_shot_predict, zero_shot_scores, PretrainConfig, PretrainReport,
};
pub use render::{
    render_image, sample_rng, Location, Shape, SyntheticClassSpec, Texture, IMAGE_SIZE,
};
pub use scenario::{
    generate_scenario, generate_with_layout, target_pairs_for_share, target_pairs_for_total,
    BenchmarkLayout, DatasetSplit, PretrainCorpus, PretrainPair, Sample, Scenario, ScenarioConfig,
    ScenarioKind, Split, ADAPTATION_INDEX_OFFSET,
};
