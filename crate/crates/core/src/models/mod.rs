//! Model zoo: ResNet-like residual MLP (with bottleneck and
//! single-modality variants), VLAD-BOW head with a learnable power,
//! trainable frame-linear-combination fusion, and serialization with
//! size accounting.

mod config;
mod featurize;
mod gradcheck;
mod serialize;
mod zoo;

#[cfg(test)]
mod tests;

pub(crate) use config::ConfigMap;
pub use config::{
    merge_config_texts, DimContext, FrameMixConfig, Modality, ModelConfig, ResNetLikeConfig,
    StackHeadConfig, VladBowConfig,
};
pub use featurize::{
    batch_inputs, featurize, predict_records, predict_records_seq, PredictOutput, RecordFeatures,
};
pub use gradcheck::{gradient_suite, jitter_params, GradCheckEntry};
pub use serialize::{deserialize_model, model_from_bytes, model_to_bytes, serialize_model};
pub use zoo::{
    forward_framemix, forward_resnetlike, forward_vladbow, LossKind, LossSpec, Model, ModelOutputs,
};
