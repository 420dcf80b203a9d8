//! The reconstruction network: per-modality ConvLSTM encoders, optional
//! 2-D mirror decoders for pretraining, modality fusion, a five-stage 3-D
//! transposed-convolution decoder, and the audio material head.

mod eval;
mod network;
mod params;
mod train;

pub use eval::{evaluate, evaluate_predictions, EvalReport};
pub use network::{Network, Prediction};
pub use params::{glorot_uniform, Adam, Params};
pub use train::{
    pretrain_autoencoders, prepare_sample, train_reconstruction, MetricsRecord, PreparedSample,
    PretrainOptions, ReconTrainOptions, TrainLog,
};

use crate::error::{Error, Result};

/// Which modalities the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Audio,
    Visual,
    AudioVisual,
}

impl Variant {
    pub fn has_audio(self) -> bool {
        matches!(self, Variant::Audio | Variant::AudioVisual)
    }

    pub fn has_visual(self) -> bool {
        matches!(self, Variant::Visual | Variant::AudioVisual)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Audio => "a",
            Variant::Visual => "v",
            Variant::AudioVisual => "av",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "a" | "audio" => Ok(Variant::Audio),
            "v" | "visual" => Ok(Variant::Visual),
            "av" | "audiovisual" => Ok(Variant::AudioVisual),
            _ => Err(Error::validation(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

/// Encoder layout: two strided convolutions (layer norm after each), a
/// convolutional LSTM, then a dense feature projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub lstm_kernel: usize,
    pub feature_dim: usize,
}

impl EncoderConfig {
    /// 88 -> 22 -> 11 spatial trace with 32/64 channels and a 1024-d
    /// feature, strides four and two.
    pub fn standard() -> Self {
        EncoderConfig {
            input_size: 88,
            conv1: ConvSpec {
                kernel: 7,
                stride: 4,
                padding: 2,
                out_channels: 32,
            },
            conv2: ConvSpec {
                kernel: 3,
                stride: 2,
                padding: 1,
                out_channels: 64,
            },
            lstm_kernel: 3,
            feature_dim: 1024,
        }
    }

    /// Tiny 8x8 configuration for finite-difference tests.
    pub fn micro() -> Self {
        EncoderConfig {
            input_size: 8,
            conv1: ConvSpec {
                kernel: 3,
                stride: 2,
                padding: 1,
                out_channels: 2,
            },
            conv2: ConvSpec {
                kernel: 3,
                stride: 2,
                padding: 1,
                out_channels: 4,
            },
            lstm_kernel: 3,
            feature_dim: 8,
        }
    }

    fn out_extent(n: usize, c: &ConvSpec) -> Result<usize> {
        if n + 2 * c.padding < c.kernel {
            return Err(Error::config(format!(
                "conv kernel {} exceeds padded extent {}",
                c.kernel,
                n + 2 * c.padding
            )));
        }
        Ok((n + 2 * c.padding - c.kernel) / c.stride + 1)
    }

    /// Spatial extents after conv1 and conv2.
    pub fn trace(&self) -> Result<(usize, usize)> {
        let a = Self::out_extent(self.input_size, &self.conv1)?;
        let b = Self::out_extent(a, &self.conv2)?;
        if b == 0 {
            return Err(Error::config("encoder collapses to zero extent"));
        }
        Ok((a, b))
    }

    pub fn validate(&self) -> Result<()> {
        // Small filters except for the very first convolution.
        if self.conv2.kernel > 5 {
            return Err(Error::config(format!(
                "conv2 kernel {} exceeds the 5x5 limit for later layers",
                self.conv2.kernel
            )));
        }
        if self.lstm_kernel > 5 || self.lstm_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "lstm kernel must be odd and at most 5, got {}",
                self.lstm_kernel
            )));
        }
        self.trace().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TconvStage {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

/// 3-D decoder: dense seed reshaped to `seed_channels x 1x1x1`, then
/// transposed-convolution stages ending in one sigmoid channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig3D {
    pub seed_channels: usize,
    pub stages: Vec<TconvStage>,
    pub output_extent: usize,
}

impl DecoderConfig3D {
    /// Five stages tracing 1 -> 2 -> 4 -> 8 -> 15 -> 30.
    pub fn standard() -> Self {
        let s = |kernel, stride, padding, out_channels| TconvStage {
            kernel,
            stride,
            padding,
            out_channels,
        };
        DecoderConfig3D {
            seed_channels: 256,
            stages: vec![
                s(2, 1, 0, 128),
                s(2, 2, 0, 64),
                s(2, 2, 0, 32),
                s(3, 2, 1, 16),
                s(4, 2, 1, 1),
            ],
            output_extent: 30,
        }
    }

    /// Two stages to a 4^3 grid for finite-difference tests.
    pub fn micro() -> Self {
        DecoderConfig3D {
            seed_channels: 8,
            stages: vec![
                TconvStage {
                    kernel: 2,
                    stride: 1,
                    padding: 0,
                    out_channels: 4,
                },
                TconvStage {
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                    out_channels: 1,
                },
            ],
            output_extent: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("decoder needs at least one stage"));
        }
        let mut extent = 1usize;
        for (i, s) in self.stages.iter().enumerate() {
            let grown = (extent - 1) * s.stride + s.kernel;
            if grown < 2 * s.padding + 1 {
                return Err(Error::config(format!(
                    "decoder stage {i} collapses the grid"
                )));
            }
            extent = grown - 2 * s.padding;
        }
        if extent != self.output_extent {
            return Err(Error::config(format!(
                "decoder stages trace to {extent}, expected {}",
                self.output_extent
            )));
        }
        if self.stages.last().unwrap().out_channels != 1 {
            return Err(Error::config("final decoder stage must emit one channel"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Add,
    Concat,
    Mfb,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
            FusionMode::Mfb => "mfb",
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            "mfb" => Ok(FusionMode::Mfb),
            _ => Err(Error::validation(format!("unknown fusion mode '{s}'"))),
        }
    }
}

/// Merge layer settings; `mfb_factor` is the factorized bilinear pooling
/// expansion (each feature projects to `fused_dim * mfb_factor` before the
/// elementwise product and sum pooling).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub fused_dim: usize,
    pub mfb_factor: usize,
}

impl FusionConfig {
    pub fn standard(mode: FusionMode) -> Self {
        FusionConfig {
            mode,
            fused_dim: 1024,
            mfb_factor: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig3D,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn standard(variant: Variant, fusion_mode: FusionMode) -> Self {
        ModelConfig {
            variant,
            encoder: EncoderConfig::standard(),
            decoder: DecoderConfig3D::standard(),
            fusion: FusionConfig::standard(fusion_mode),
        }
    }

    pub fn micro(variant: Variant, fusion_mode: FusionMode) -> Self {
        ModelConfig {
            variant,
            encoder: EncoderConfig::micro(),
            decoder: DecoderConfig3D::micro(),
            fusion: FusionConfig {
                mode: fusion_mode,
                fused_dim: 8,
                mfb_factor: 2,
            },
        }
    }

    /// Width of the feature vector entering the 3-D decoder.
    pub fn decoder_input_dim(&self) -> usize {
        match self.variant {
            Variant::Audio | Variant::Visual => self.encoder.feature_dim,
            Variant::AudioVisual => match self.fusion.mode {
                FusionMode::Add => self.encoder.feature_dim,
                FusionMode::Concat => 2 * self.encoder.feature_dim,
                FusionMode::Mfb => self.fusion.fused_dim,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.fusion.mode == FusionMode::Mfb && self.fusion.mfb_factor == 0 {
            return Err(Error::config("mfb factor must be positive"));
        }
        // Addition fuses equal dims; with one shared encoder layout both
        // features are feature_dim wide, and fused_dim tracks it.
        if self.variant == Variant::AudioVisual
            && self.fusion.mode == FusionMode::Add
            && self.fusion.fused_dim != self.encoder.feature_dim
        {
            return Err(Error::config(format!(
                "additive fusion requires fused_dim {} == feature_dim {}",
                self.fusion.fused_dim, self.encoder.feature_dim
            )));
        }
        Ok(())
    }
}
