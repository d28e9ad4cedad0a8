//! The Res-SE-U-Net field predictor and its building blocks.

mod layers;
mod se;
mod unet;

pub use layers::{
    BatchNorm2d, BnUpdate, Conv2d, ConvTranspose2d, Linear, Mode, ParamEntry, ParamId, ParamKind, ParamSet, Session,
};
pub use se::{ResSeLayer, SeBlock};
pub use unet::{DecoderKind, DecoderSpec, EncoderSpec, LayerId, LayerShape, NetConfig, ResSeUNet};
