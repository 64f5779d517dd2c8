//! Denoising networks, attention variants and the noise process.

pub mod attention;
pub mod checkpoint;
pub mod control;
pub mod latent;
pub mod layers;
pub mod model;
pub mod params;
pub mod reference;
pub mod schedule;
pub mod unet;

pub use attention::{
    all_frames_attention, concat_reference_attention, face_enhance_attention, self_attention, softmax_last,
    Attention,
};
pub use control::{ControlNet, ControlResiduals};
pub use latent::{LatentCodec, PixelSpace};
pub use model::{AttentionMode, GestureVideoModel, ModelConfig};
pub use params::{ParamGroup, ParamStore};
pub use reference::{gamma_of, gamma_scalar, BankLayer, FeatureBank, MagnificationParam, ReferenceNet};
pub use schedule::{build_schedule, q_sample, NoiseSchedule, ScheduleDescriptor, ScheduleKind};
