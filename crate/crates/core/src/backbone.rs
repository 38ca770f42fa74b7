//! Convolutional trunk shared by the branch heads.
//!
//! Each stage is `conv3x3 (stride 2 on stage entry) -> bias -> relu`, repeated
//! `blocks_per_stage` times. The outputs of the tapped stages feed the
//! mid-level head; the last stage's output feeds the high-level head.

use rand::Rng;

use crate::rng::RngStream;
use crate::tensor::{bias_add, conv2d, relu, ConvSpec, Grad, Padding, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Stages whose outputs feed the mid-level head. Never the last stage.
    pub tap_stages: Vec<usize>,
    /// Taps are detached copies: the mid-level head does not train the trunk.
    pub detach_taps: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            tap_stages: vec![0, 1],
            detach_taps: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.in_channels == 0 || self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err("backbone channel counts must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            return Err("backbone.blocks_per_stage must be at least 1".into());
        }
        let last = self.stage_channels.len() - 1;
        if self.tap_stages.is_empty() {
            return Err("backbone.tap_stages must name at least one stage".into());
        }
        if let Some(&bad) = self.tap_stages.iter().find(|&&s| s >= last) {
            return Err(format!(
                "tap stage {bad} invalid: taps must be among stages 0..{last} (the last stage feeds the high-level head)"
            ));
        }
        Ok(())
    }

    pub fn downsampling(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.tap_stages.iter().map(|&s| self.stage_channels[s]).collect()
    }

    pub fn final_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    pub config: BackboneConfig,
    /// Stage-major: `blocks[stage * blocks_per_stage + block]`.
    pub blocks: Vec<ConvBlock>,
}

/// Uniform in `±sqrt(6 / fan_in)`, i.e. standard deviation `sqrt(2 / fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn backbone_init(config: &BackboneConfig, rng: &mut RngStream) -> Result<BackboneState, String> {
    config.validate()?;
    let mut blocks = Vec::new();
    let mut in_ch = config.in_channels;
    for &out_ch in &config.stage_channels {
        for b in 0..config.blocks_per_stage {
            blocks.push(ConvBlock {
                kernel: fan_in_uniform(&[out_ch, in_ch, 3, 3], in_ch * 9, rng),
                bias: Tensor::zeros(&[out_ch]),
                stride: if b == 0 { 2 } else { 1 },
            });
            in_ch = out_ch;
        }
    }
    Ok(BackboneState {
        config: config.clone(),
        blocks,
    })
}

struct BlockTape {
    conv: Grad,
    bias: Grad,
    act: Grad,
}

/// Recorded forward pass of the trunk.
pub struct BackboneTape {
    blocks: Vec<BlockTape>,
}

pub struct BackboneOutput {
    pub final_map: Tensor,
    pub taps: Vec<Tensor>,
    pub tape: BackboneTape,
}

/// Gradients for each block, aligned with `BackboneState::blocks`.
pub struct BackboneGrads {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

pub fn backbone_forward(state: &BackboneState, batch: &Tensor) -> Result<BackboneOutput, TensorError> {
    let cfg = &state.config;
    let [_, c, h, w] = *batch.shape() else {
        return Err(crate::tensor::mismatch("backbone", format!("input {:?} is not NCHW", batch.shape())));
    };
    if c != cfg.in_channels {
        return Err(crate::tensor::mismatch(
            "backbone",
            format!("input dimension 1 is {c} but the trunk expects {} channels", cfg.in_channels),
        ));
    }
    let f = cfg.downsampling();
    if h % f != 0 || w % f != 0 {
        return Err(crate::tensor::mismatch(
            "backbone",
            format!("spatial size {h}x{w} not divisible by downsampling factor {f}"),
        ));
    }
    let mut tapes = Vec::with_capacity(state.blocks.len());
    let mut taps = Vec::with_capacity(cfg.tap_stages.len());
    let mut x = batch.clone();
    for (i, block) in state.blocks.iter().enumerate() {
        let spec = ConvSpec {
            stride: block.stride,
            padding: Padding::Same,
        };
        let conv = conv2d(&x, &block.kernel, spec)?;
        let bias = bias_add(&conv.value, &block.bias)?;
        let act = relu(&bias.value);
        x = act.value.clone();
        let stage = i / cfg.blocks_per_stage;
        if (i + 1) % cfg.blocks_per_stage == 0 && cfg.tap_stages.contains(&stage) {
            taps.push(x.clone());
        }
        tapes.push(BlockTape { conv, bias, act });
    }
    Ok(BackboneOutput {
        final_map: x,
        taps,
        tape: BackboneTape { blocks: tapes },
    })
}

impl BackboneTape {
    /// Backpropagates from the final map. `tap_grads` (one per tap, in stage
    /// order) are added at the tapped stages; pass `None` for detached taps.
    pub fn backward(&self, config: &BackboneConfig, d_final: &Tensor, tap_grads: Option<&[Tensor]>) -> BackboneGrads {
        let n = self.blocks.len();
        let mut kernels = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut upstream = d_final.clone();
        let mut tap_iter = config.tap_stages.len();
        for i in (0..n).rev() {
            let stage = i / config.blocks_per_stage;
            if let Some(tg) = tap_grads {
                if (i + 1) % config.blocks_per_stage == 0 && config.tap_stages.contains(&stage) {
                    tap_iter -= 1;
                    upstream.add_assign(&tg[tap_iter]);
                }
            }
            let t = &self.blocks[i];
            let d_act = t.act.backward(&upstream).remove(0);
            let mut d_bias = t.bias.backward(&d_act);
            let db = d_bias.pop().expect("bias grad");
            let d_conv_in = d_bias.pop().expect("input grad");
            let mut d_conv = t.conv.backward(&d_conv_in);
            kernels.push(d_conv.pop().expect("kernel grad"));
            upstream = d_conv.pop().expect("input grad");
            biases.push(db);
        }
        kernels.reverse();
        biases.reverse();
        BackboneGrads { kernels, biases }
    }
}
