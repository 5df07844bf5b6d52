//! Synthetic training data: sampling and rasterizing text-mask scenes, then filling them
//! with procedural foreground/background styles.

pub mod composite;
pub mod dataset;
pub mod font;
pub mod raster;
pub mod scene;

pub use composite::{composite_image, CompositeConfig, CompositeStyle, Compositor, Fill};
pub use dataset::{generate_dataset, GenerateConfig, GeneratedSample, Generator};
pub use font::{FontInventory, LoadedFont};
pub use raster::{render_mask, stamp_phrase};
pub use scene::{sample_scene, Corpus, PhraseSpec, RenderScene, SceneConfig};

/// Directory of the fonts bundled with this crate.
pub fn bundled_font_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/fonts")
}
