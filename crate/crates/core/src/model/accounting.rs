//! Closed-form parameter and FLOP counts.
//!
//! One multiply-accumulate counts as one FLOP. Element-wise work (batch
//! normalization, activations, gate non-linearities, softmax) is not counted.

use crate::nn::backbone::conv_table;
use crate::nn::layers::ConvKind;

use super::ModelConfig;

fn conv_weight_size(kind: ConvKind, cin: usize, cout: usize) -> u64 {
    match kind {
        ConvKind::Dense3x3 => (cout * cin * 9) as u64,
        ConvKind::Pointwise => (cout * cin) as u64,
        ConvKind::Depthwise3x3 => (cout * 9) as u64,
    }
}

/// Convolution weights plus batch-norm scale and shift for every layer.
pub fn backbone_params(width: f64) -> u64 {
    conv_table(width)
        .iter()
        .map(|c| conv_weight_size(c.kind, c.cin, c.cout) + 2 * c.cout as u64)
        .sum()
}

pub fn backbone_feature_dim(width: f64) -> usize {
    conv_table(width).last().map_or(0, |c| c.cout)
}

/// `4H(I + H + 2)` per direction per layer: input and recurrent weights
/// for the four gates plus two bias vectors.
pub fn lstm_params(cfg: &ModelConfig) -> u64 {
    let h = cfg.lstm_hidden as u64;
    let dirs = cfg.directions() as u64;
    let first_in = backbone_feature_dim(cfg.width_multiplier) as u64;
    (0..cfg.lstm_layers as u64)
        .map(|l| {
            let input = if l == 0 { first_in } else { h * dirs };
            dirs * 4 * h * (input + h + 2)
        })
        .sum()
}

pub fn head_params(cfg: &ModelConfig) -> u64 {
    let c = cfg.num_classes as u64;
    cfg.head_input() as u64 * c + c
}

pub fn count_params(cfg: &ModelConfig) -> u64 {
    backbone_params(cfg.width_multiplier) + lstm_params(cfg) + head_params(cfg)
}

/// Backbone multiply-accumulates for one `d x d` frame.
pub fn backbone_macs(width: f64, d: usize) -> u64 {
    let (mut h, mut w) = (d, d);
    let mut total = 0u64;
    for c in conv_table(width) {
        let (ho, wo) = match c.kind {
            ConvKind::Pointwise => (h, w),
            _ => ((h - 1) / c.stride + 1, (w - 1) / c.stride + 1),
        };
        let per_output = match c.kind {
            ConvKind::Dense3x3 => c.cin * 9,
            ConvKind::Pointwise => c.cin,
            ConvKind::Depthwise3x3 => 9,
        };
        total += (ho * wo * c.cout * per_output) as u64;
        (h, w) = (ho, wo);
    }
    total
}

/// Recurrent multiply-accumulates per frame (input and hidden projections).
pub fn lstm_macs_per_frame(cfg: &ModelConfig) -> u64 {
    let h = cfg.lstm_hidden as u64;
    let dirs = cfg.directions() as u64;
    let first_in = backbone_feature_dim(cfg.width_multiplier) as u64;
    (0..cfg.lstm_layers as u64)
        .map(|l| {
            let input = if l == 0 { first_in } else { h * dirs };
            dirs * 4 * h * (input + h)
        })
        .sum()
}

pub fn head_macs_per_frame(cfg: &ModelConfig) -> u64 {
    (cfg.head_input() * cfg.num_classes) as u64
}

pub fn flops_per_frame(cfg: &ModelConfig) -> u64 {
    backbone_macs(cfg.width_multiplier, cfg.d) + lstm_macs_per_frame(cfg) + head_macs_per_frame(cfg)
}

/// FLOPs to label a `t`-frame sequence; exactly linear in `t`.
pub fn count_flops(cfg: &ModelConfig, t: usize) -> u64 {
    flops_per_frame(cfg) * t as u64
}
