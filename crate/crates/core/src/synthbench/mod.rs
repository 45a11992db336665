//! Seeded generation, needle composites, and correlation statistics.

pub mod needle;
pub mod prng;
pub mod stats;

pub use needle::{
    build_needle_composite, gen_scene, make_needle_dataset, make_needle_example, NeedleComposite,
    NeedleDataset, NeedleExample, SceneSpec, SceneTemplate, Split, SCENES,
};
pub use prng::Prng;
pub use stats::{
    compression_sweep, parse_metric_csv, pearson, MetricTable, SweepAxis, SweepResult, SweepRow,
};
