//! Analytic FLOPs accounting.
//!
//! A convolution costs `2 * kh * kw * c_in * c_out * h_out * w_out` (one
//! multiply and one add per tap). The bilinear upsampling in the head costs
//! [`UPSAMPLE_FLOPS_PER_OUTPUT`] per output value. Normalization, activations,
//! bias additions and residual sums are not counted, matching the usual
//! convention of folding them into the adjacent convolution.

use super::{BackboneConfig, BlockMask};
use crate::error::{Error, Result};

/// Four multiply-adds per bilinear output value.
pub const UPSAMPLE_FLOPS_PER_OUTPUT: u64 = 8;

pub fn conv_flops(kh: usize, kw: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (kh * kw * c_in * c_out * h_out * w_out) as u64
}

/// Per-component costs of one backbone configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsLedger {
    pub stem: u64,
    /// First block of each layer.
    pub fixed_blocks: Vec<u64>,
    /// Prunable blocks, in mask order.
    pub prunable: Vec<u64>,
    pub head: u64,
}

impl FlopsLedger {
    pub fn new(config: &BackboneConfig) -> Self {
        let k = config.stem_stride();
        let mut h = config.input_height / k;
        let mut w = config.input_width / k;
        let c0 = config.layers[0].channels;
        let stem = conv_flops(k, k, config.input_channels, c0, h, w);

        let mut fixed_blocks = Vec::new();
        let mut prunable = Vec::new();
        let mut cin = c0;
        for (l, spec) in config.layers.iter().enumerate() {
            let c = spec.channels;
            let stride = if l > 0 { 2 } else { 1 };
            let (ho, wo) = (h / stride, w / stride);
            let mut first = conv_flops(3, 3, cin, c, ho, wo) + conv_flops(3, 3, c, c, ho, wo);
            if stride != 1 || cin != c {
                first += conv_flops(1, 1, cin, c, ho, wo);
            }
            fixed_blocks.push(first);
            for _ in 1..spec.blocks {
                prunable.push(2 * conv_flops(3, 3, c, c, ho, wo));
            }
            h = ho;
            w = wo;
            cin = c;
        }

        let head = conv_flops(1, 1, cin, config.head_channels, h, w)
            + conv_flops(1, 1, config.head_channels, config.num_classes, h, w)
            + UPSAMPLE_FLOPS_PER_OUTPUT * (config.num_classes * config.input_height * config.input_width) as u64;

        FlopsLedger {
            stem,
            fixed_blocks,
            prunable,
            head,
        }
    }

    /// Cost with every prunable block skipped.
    pub fn skeleton(&self) -> u64 {
        self.stem + self.fixed_blocks.iter().sum::<u64>() + self.head
    }

    pub fn full(&self) -> u64 {
        self.skeleton() + self.prunable.iter().sum::<u64>()
    }

    pub fn block(&self, k: usize) -> u64 {
        self.prunable[k]
    }

    /// Total FLOPs of a forward pass under `mask`; any non-zero gate executes its block.
    pub fn count(&self, mask: &BlockMask) -> Result<u64> {
        if mask.len() != self.prunable.len() {
            return Err(Error::shape(format!(
                "mask has {} entries, ledger has {} prunable blocks",
                mask.len(),
                self.prunable.len()
            )));
        }
        Ok(self.skeleton()
            + mask
                .executed()
                .iter()
                .zip(&self.prunable)
                .filter(|(e, _)| **e)
                .map(|(_, c)| c)
                .sum::<u64>())
    }

    /// Share of the full cost that block pruning can remove.
    pub fn prunable_share(&self) -> f64 {
        self.prunable.iter().sum::<u64>() as f64 / self.full() as f64
    }
}
