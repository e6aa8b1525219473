//! Procedural triplet datasets.
//!
//! Scenes are small grids of coloured shapes. Detail changes are single-cell
//! edits; global layout is the set of occupied cells and the background.

mod dataset;
mod edit;
mod generate;
mod render;
mod scene;

pub use dataset::{
    DatasetKind, GalleryEntry, Manifest, SubsetGroup, Triplet, TripletDataset, TripletRecord, GALLERY_BIN,
    GALLERY_IDX, MANIFEST_FILE,
};
pub use edit::{apply_edit, apply_edits, random_edit, AtomicEdit, Verb, Vocabulary, JOIN_TOKEN};
pub use generate::{generate_cir_finetune_set, generate_edit_pretrain_set, GenerationConfig, GROUP_SIZE};
pub use render::{render_scene, Image};
pub use scene::{Cell, Color, SceneDescription, SceneObject, Shape};
