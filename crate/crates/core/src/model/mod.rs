//! Content encoder, decoder, F0 extractor and speaker classifier.

mod config;
mod nets;
mod params;

pub use config::ModelConfig;
pub use nets::{bind, Bound, ContentCode, ContentSampling, DecoderOutput};
pub use params::{
    config_from, init_params, load_params, parameter_layout, save_params, store_from, store_into,
    ParameterStore, INIT_SCALE,
};
