//! The two-stream page classifier and the two-level hierarchy built from it.

pub mod bundle;
pub mod config;
pub mod hierarchy;
pub mod network;

pub use bundle::{
    cross_attend, fuse_and_classify, load_bundle, save_bundle, text_encode, vision_encode, ModelBundle, BUNDLE_VERSION,
};
pub use config::{AttentionKind, Modality, ModelConfig, StageConfig, Target, TextConfig, VisionConfig};
pub use hierarchy::{
    argmax, hierarchical_predict, route, HierarchicalClassifier, PredictionRecord, LEVEL1_FILE, LEVEL2_FILE,
};
pub use network::{
    encode_image, encode_page, init_params, network_forward, predict_logits, EncodedPage, ModelInput, NetworkOutput,
};
