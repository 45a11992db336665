//! Synthetic scenes and needle-in-a-haystack composites.
//!
//! A scene is noise plus a constant motif direction `a·e_k` on every
//! (frame, patch) feature. A composite concatenates four scenes with
//! distinct motifs in shuffled order; the task is to name the motif of the
//! scene at a given position.

use std::fmt::Write as _;
use std::ops::Range;

use super::prng::Prng;
use crate::error::{Error, Result};
use crate::projectors::FeatureVideo;
use crate::tensor::Tensor;

pub const SCENES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub classes: usize,
    pub motif_class: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
}

pub fn gen_scene(spec: &SceneSpec) -> Result<(FeatureVideo, usize)> {
    if spec.classes > spec.dim {
        return Err(Error::invalid(
            "gen_scene",
            format!("{} classes exceed feature width {}", spec.classes, spec.dim),
        ));
    }
    if spec.motif_class >= spec.classes {
        return Err(Error::invalid(
            "gen_scene",
            format!(
                "motif class {} >= class count {}",
                spec.motif_class, spec.classes
            ),
        ));
    }
    if spec.amplitude.is_nan()
        || spec.noise_sigma.is_nan()
        || spec.amplitude < 0.0
        || spec.noise_sigma < 0.0
    {
        return Err(Error::invalid(
            "gen_scene",
            "amplitude and sigma must be >= 0",
        ));
    }
    let mut rng = Prng::new(spec.seed);
    let shape = [spec.frames, spec.patches, spec.dim];
    let features = Tensor::from_fn(&shape, |i| {
        let noise = if spec.noise_sigma > 0.0 {
            spec.noise_sigma * rng.next_normal()
        } else {
            0.0
        };
        let bias = if i % spec.dim == spec.motif_class {
            spec.amplitude
        } else {
            0.0
        };
        noise + bias
    });
    Ok((FeatureVideo::new(features)?, spec.motif_class))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleComposite {
    pub features: FeatureVideo,
    /// `scene_order[k]` is the source scene placed at position `k`.
    pub scene_order: [usize; SCENES],
    pub boundaries: [Range<usize>; SCENES],
    /// Position (in composite order) the question asks about.
    pub target_scene: usize,
    /// Motif class of each scene, in composite order.
    pub motif_labels: [usize; SCENES],
}

impl NeedleComposite {
    pub fn label(&self) -> usize {
        self.motif_labels[self.target_scene]
    }

    pub fn target_onehot(&self) -> [f64; SCENES] {
        let mut v = [0.0; SCENES];
        v[self.target_scene] = 1.0;
        v
    }
}

/// Shuffle four scenes (Fisher–Yates), then pick the target position, both
/// from one stream seeded by `seed`.
pub fn build_needle_composite(
    scenes: &[(FeatureVideo, usize)],
    seed: u64,
) -> Result<NeedleComposite> {
    if scenes.len() != SCENES {
        return Err(Error::invalid(
            "build_needle_composite",
            format!("expected {SCENES} scenes, got {}", scenes.len()),
        ));
    }
    let first = scenes[0].0.features().shape();
    for (video, _) in &scenes[1..] {
        if video.features().shape() != first {
            return Err(Error::shape(
                "build_needle_composite",
                first,
                video.features().shape(),
            ));
        }
    }
    for i in 0..SCENES {
        for j in i + 1..SCENES {
            if scenes[i].1 == scenes[j].1 {
                return Err(Error::invalid(
                    "build_needle_composite",
                    format!("scenes {i} and {j} share label {}", scenes[i].1),
                ));
            }
        }
    }

    let mut rng = Prng::new(seed);
    let mut order = [0, 1, 2, 3];
    rng.shuffle(&mut order);
    let target_scene = rng.next_below(SCENES);

    let parts: Vec<&FeatureVideo> = order.iter().map(|&s| &scenes[s].0).collect();
    let features = FeatureVideo::concat_frames(&parts)?;
    let len = scenes[0].0.frames();
    Ok(NeedleComposite {
        features,
        scene_order: order,
        boundaries: std::array::from_fn(|k| k * len..(k + 1) * len),
        target_scene,
        motif_labels: order.map(|s| scenes[s].1),
    })
}

/// Shape and signal parameters shared by every scene in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTemplate {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        Self {
            frames: 8,
            patches: 16,
            dim: 16,
            amplitude: 2.0,
            noise_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleExample {
    pub seed: u64,
    pub composite: NeedleComposite,
}

impl NeedleExample {
    pub fn label(&self) -> usize {
        self.composite.label()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleDataset {
    pub split: Split,
    pub classes: usize,
    pub examples: Vec<NeedleExample>,
}

impl NeedleDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// One manifest record per line.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (i, ex) in self.examples.iter().enumerate() {
            let c = &ex.composite;
            let join = |xs: &[usize]| {
                xs.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            writeln!(
                out,
                "index={i} seed={} split={} scene_order={} target_scene={} labels={} label={}",
                ex.seed,
                self.split.name(),
                join(&c.scene_order),
                c.target_scene,
                join(&c.motif_labels),
                c.label(),
            )
            .unwrap();
        }
        out
    }
}

/// Example generation: everything about example `i` derives from seed
/// `base_seed + i`.
pub fn make_needle_example(
    seed: u64,
    template: &SceneTemplate,
    classes: usize,
) -> Result<NeedleExample> {
    if classes < SCENES {
        return Err(Error::invalid(
            "make_needle_dataset",
            format!("need at least {SCENES} classes, got {classes}"),
        ));
    }
    let mut rng = Prng::new(seed);
    let mut pool: Vec<usize> = (0..classes).collect();
    rng.shuffle(&mut pool);
    let mut scenes = Vec::with_capacity(SCENES);
    for &motif_class in &pool[..SCENES] {
        let spec = SceneSpec {
            seed: rng.next_u64(),
            frames: template.frames,
            patches: template.patches,
            dim: template.dim,
            classes,
            motif_class,
            amplitude: template.amplitude,
            noise_sigma: template.noise_sigma,
        };
        scenes.push(gen_scene(&spec)?);
    }
    let composite = build_needle_composite(&scenes, rng.next_u64())?;
    Ok(NeedleExample { seed, composite })
}

pub fn make_needle_dataset(
    count: usize,
    base_seed: u64,
    template: &SceneTemplate,
    classes: usize,
    split: Split,
) -> Result<NeedleDataset> {
    if classes < SCENES {
        return Err(Error::invalid(
            "make_needle_dataset",
            format!("need at least {SCENES} classes, got {classes}"),
        ));
    }
    let examples = (0..count as u64)
        .map(|i| make_needle_example(base_seed + i, template, classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(NeedleDataset {
        split,
        classes,
        examples,
    })
}
