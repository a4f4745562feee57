//! ETH/UCY ingestion: annotations, homographies, observation windows,
//! leave-one-out splits and synthetic scenes.

mod annotations;
mod homography;
mod manifest;
mod scene;
mod split;
mod synth;
mod windows;

pub use annotations::{
    parse_annotations, parse_annotations_str, write_annotations, AnnotationFormat, RawAnnotation,
};
pub use homography::Homography;
pub use manifest::{
    corridor_benchmark, default_synth_benchmark, load_dataset, synth_dataset, write_synth_dataset, Manifest,
    SceneEntry, SynthSceneSpec,
};
pub use scene::{Scene, SceneGroup};
pub use split::{leave_one_out_split, Dataset, Split};
pub use synth::{synth_scene, LayoutKind, SceneLayout, SynthGoal, SynthOutput};
pub use windows::{build_windows, ObservationWindow, WindowConfig};
