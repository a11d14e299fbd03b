pub mod caption_bank;
pub mod eeg_data;
pub mod embed_viz;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
