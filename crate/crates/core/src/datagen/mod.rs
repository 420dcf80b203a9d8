//! Procedural audio-visual-voxel dataset generation: shapes, scripted
//! scenes with impact events, and the on-disk dataset container.

mod dataset;
mod scene;
mod shapes;

pub use dataset::{
    generate_dataset, generate_samples, load_dataset, load_scene_audio, split_for_seed,
    write_dataset, DatasetSpec, GeneratedScene, LoadedSample, SampleMode, Split,
};
pub use scene::{
    augment_windows, gen_scene_sequence, gen_single_view_sample, BoundingBox, ImpactEvent,
    ObjectSpec, SampleSequence, SceneConfig, SceneData, FRAME_SIZE, SCENE_SIZE, SPRITE_SIZE,
};
pub use shapes::{gen_shape, ShapeKind};
