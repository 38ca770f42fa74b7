//! Level-specific feature extractors and the cosine classifier each one
//! feeds.

use std::fmt;
use std::str::FromStr;

use crate::backbone::fan_in_uniform;
use crate::rng::RngStream;
use crate::tensor::{
    concat, conv2d, gemm, global_pool, l2_normalize_rows, linear, relu, softmax_temp_rows, split, bias_add,
    ConvSpec, Grad, Padding, PoolMode, Tensor, TensorError, NORM_FLOOR,
};

/// Lower bound applied to the learnable classifier scale.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Mid,
    High,
    Relation,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Mid, Level::High, Level::Relation];

    pub fn index(self) -> usize {
        match self {
            Level::Mid => 0,
            Level::High => 1,
            Level::Relation => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Mid => "mid",
            Level::High => "high",
            Level::Relation => "relation",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mid" | "m" => Ok(Level::Mid),
            "high" | "h" => Ok(Level::High),
            "relation" | "r" => Ok(Level::Relation),
            _ => Err(format!("unknown level `{s}`")),
        }
    }
}

/// Which high-level scores the relation head consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationInput {
    /// Cosine logits multiplied by the high-level scale.
    Scaled,
    /// Raw cosine similarities.
    Unscaled,
}

impl FromStr for RelationInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scaled" => Ok(RelationInput::Scaled),
            "unscaled" => Ok(RelationInput::Unscaled),
            _ => Err(format!("unknown relation input `{s}` (expected scaled or unscaled)")),
        }
    }
}

impl fmt::Display for RelationInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationInput::Scaled => "scaled",
            RelationInput::Unscaled => "unscaled",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub relation_temperature: f64,
    /// Output channels of the 1×1 conv on each tap.
    pub mid_channels: usize,
    pub relation_hidden: usize,
    pub relation_input: RelationInput,
    pub init_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            embed_dim: 64,
            relation_temperature: 4.0,
            mid_channels: 32,
            relation_hidden: 64,
            relation_input: RelationInput::Scaled,
            init_scale: 10.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim == 0 || self.mid_channels == 0 || self.relation_hidden == 0 {
            return Err("head dimensions must be positive".into());
        }
        if !(self.relation_temperature > 0.0) {
            return Err(format!("heads.relation_temperature must be positive, got {}", self.relation_temperature));
        }
        if !(self.init_scale > 0.0) {
            return Err("heads.init_scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn init(input: usize, output: usize, rng: &mut RngStream) -> Self {
        Dense {
            weight: fan_in_uniform(&[output, input], input, rng),
            bias: Tensor::zeros(&[output]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HighHead {
    pub proj: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapConv {
    /// `[mid_channels, tap_channels, 1, 1]`
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MidHead {
    pub taps: Vec<TapConv>,
    pub proj: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationHead {
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Mid(MidHead),
    High(HighHead),
    Relation(RelationHead),
}

/// A level's feature extractor together with its cosine classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchModel {
    pub level: Level,
    pub head: Head,
    /// `[d, c]`; column `j` is the weight of class `j`.
    pub weights: Tensor,
    /// Learnable scale `s`, shape `[1]`.
    pub scale: Tensor,
}

impl BranchModel {
    pub fn num_classes(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn scale(&self) -> f64 {
        self.scale.item()
    }
}

impl HighHead {
    pub fn init(channels: usize, cfg: &HeadConfig, rng: &mut RngStream) -> Self {
        HighHead {
            proj: Dense::init(channels, cfg.embed_dim, rng),
        }
    }
}

impl MidHead {
    pub fn init(tap_channels: &[usize], cfg: &HeadConfig, rng: &mut RngStream) -> Self {
        let taps = tap_channels
            .iter()
            .map(|&c| TapConv {
                kernel: fan_in_uniform(&[cfg.mid_channels, c, 1, 1], c, rng),
                bias: Tensor::zeros(&[cfg.mid_channels]),
            })
            .collect::<Vec<_>>();
        MidHead {
            proj: Dense::init(cfg.mid_channels * taps.len(), cfg.embed_dim, rng),
            taps,
        }
    }
}

impl RelationHead {
    pub fn init(num_classes: usize, cfg: &HeadConfig, rng: &mut RngStream) -> Self {
        RelationHead {
            fc1: Dense::init(num_classes, cfg.relation_hidden, rng),
            fc2: Dense::init(cfg.relation_hidden, cfg.embed_dim, rng),
        }
    }
}

pub struct HighTape {
    pool: Grad,
    proj: Grad,
}

pub struct HighGrads {
    pub d_map: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Global average pool of the final map followed by a linear map to `R^d`.
pub fn high_head(final_map: &Tensor, head: &HighHead) -> Result<(Tensor, HighTape), TensorError> {
    let pool = global_pool(final_map, PoolMode::Avg)?;
    let proj = linear(&pool.value, &head.proj.weight, Some(&head.proj.bias))?;
    Ok((proj.value.clone(), HighTape { pool, proj }))
}

impl HighTape {
    pub fn backward(&self, d_features: &Tensor) -> HighGrads {
        let mut g = self.proj.backward(d_features);
        let bias = g.pop().expect("bias");
        let weight = g.pop().expect("weight");
        let d_map = self.pool.backward(&g[0]).remove(0);
        HighGrads { d_map, weight, bias }
    }
}

struct TapTape {
    conv: Grad,
    bias: Grad,
    act: Grad,
    pool: Grad,
}

pub struct MidTape {
    taps: Vec<TapTape>,
    widths: Vec<usize>,
    proj: Grad,
}

pub struct MidGrads {
    pub tap_kernels: Vec<Tensor>,
    pub tap_biases: Vec<Tensor>,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    /// Gradient with respect to each tap input.
    pub d_taps: Vec<Tensor>,
}

/// Per tap: 1×1 conv, relu, global max pool; then concatenation and a
/// linear map to `R^d`.
pub fn mid_head(taps: &[Tensor], head: &MidHead) -> Result<(Tensor, MidTape), TensorError> {
    if taps.is_empty() || taps.len() != head.taps.len() {
        return Err(crate::tensor::mismatch(
            "mid_head",
            format!("{} taps given, head expects {}", taps.len(), head.taps.len()),
        ));
    }
    let spec = ConvSpec {
        stride: 1,
        padding: Padding::Valid,
    };
    let mut tapes = Vec::with_capacity(taps.len());
    let mut pooled = Vec::with_capacity(taps.len());
    for (x, tc) in taps.iter().zip(&head.taps) {
        let conv = conv2d(x, &tc.kernel, spec)?;
        let bias = bias_add(&conv.value, &tc.bias)?;
        let act = relu(&bias.value);
        let pool = global_pool(&act.value, PoolMode::Max)?;
        pooled.push(pool.value.clone());
        tapes.push(TapTape { conv, bias, act, pool });
    }
    let widths = pooled.iter().map(|p| p.dim(1)).collect();
    let joined = concat(&pooled)?;
    let proj = linear(&joined.value, &head.proj.weight, Some(&head.proj.bias))?;
    Ok((proj.value.clone(), MidTape { taps: tapes, widths, proj }))
}

impl MidTape {
    pub fn backward(&self, d_features: &Tensor) -> MidGrads {
        let mut g = self.proj.backward(d_features);
        let proj_bias = g.pop().expect("bias");
        let proj_weight = g.pop().expect("weight");
        let parts = split(&g[0], &self.widths).expect("widths");
        let mut tap_kernels = Vec::new();
        let mut tap_biases = Vec::new();
        let mut d_taps = Vec::new();
        for (t, dp) in self.taps.iter().zip(&parts) {
            let d_act = t.pool.backward(dp).remove(0);
            let d_pre = t.act.backward(&d_act).remove(0);
            let mut gb = t.bias.backward(&d_pre);
            tap_biases.push(gb.pop().expect("bias"));
            let mut gc = t.conv.backward(&gb[0]);
            tap_kernels.push(gc.pop().expect("kernel"));
            d_taps.push(gc.pop().expect("input"));
        }
        MidGrads {
            tap_kernels,
            tap_biases,
            proj_weight,
            proj_bias,
            d_taps,
        }
    }
}

pub struct RelationTape {
    soft: Grad,
    fc1: Grad,
    act: Grad,
    fc2: Grad,
}

pub struct RelationGrads {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    pub d_logits: Tensor,
}

/// Temperature softmax of the (detached) high-level logits followed by a
/// two-layer perceptron to `R^d`.
pub fn relation_head(high_logits: &Tensor, head: &RelationHead, temperature: f64) -> Result<(Tensor, RelationTape), TensorError> {
    let soft = softmax_temp_rows(high_logits, temperature)?;
    let fc1 = linear(&soft.value, &head.fc1.weight, Some(&head.fc1.bias))?;
    let act = relu(&fc1.value);
    let fc2 = linear(&act.value, &head.fc2.weight, Some(&head.fc2.bias))?;
    Ok((fc2.value.clone(), RelationTape { soft, fc1, act, fc2 }))
}

impl RelationTape {
    pub fn backward(&self, d_features: &Tensor) -> RelationGrads {
        let mut g2 = self.fc2.backward(d_features);
        let fc2_bias = g2.pop().expect("bias");
        let fc2_weight = g2.pop().expect("weight");
        let d_act = self.act.backward(&g2[0]).remove(0);
        let mut g1 = self.fc1.backward(&d_act);
        let fc1_bias = g1.pop().expect("bias");
        let fc1_weight = g1.pop().expect("weight");
        let d_logits = self.soft.backward(&g1[0]).remove(0);
        RelationGrads {
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
            d_logits,
        }
    }
}

/// Cosine similarity between each feature row and each weight column:
/// `[N, d] x [d, c] -> [N, c]`. Pullback order: `[features, weights]`.
pub fn cosine_similarity(features: &Tensor, weights: &Tensor) -> Result<Grad, TensorError> {
    if features.rank() != 2 || weights.rank() != 2 || features.dim(1) != weights.dim(0) {
        return Err(crate::tensor::mismatch(
            "cosine",
            format!("features {:?} incompatible with weights {:?} in dimension 1", features.shape(), weights.shape()),
        ));
    }
    let (n, d, c) = (features.dim(0), features.dim(1), weights.dim(1));
    let fnorm = l2_normalize_rows(features, NORM_FLOOR);
    let wnorm = l2_normalize_rows(&weights.transpose(), NORM_FLOOR);
    let mut cos = vec![0.0; n * c];
    gemm(n, d, c, (fnorm.value.data(), d as isize, 1), (wnorm.value.data(), 1, d as isize), 0.0, &mut cos);
    let value = Tensor::new(vec![n, c], cos)?;
    Ok(Grad::new(
        value,
        Box::new(move |g| {
            let mut d_fn = vec![0.0; n * d];
            gemm(n, c, d, (g.data(), c as isize, 1), (wnorm.value.data(), d as isize, 1), 0.0, &mut d_fn);
            let mut d_wn = vec![0.0; c * d];
            gemm(c, n, d, (g.data(), 1, c as isize), (fnorm.value.data(), d as isize, 1), 0.0, &mut d_wn);
            let d_f = fnorm.backward(&Tensor::new(vec![n, d], d_fn).expect("shape")).remove(0);
            let d_wt = wnorm.backward(&Tensor::new(vec![c, d], d_wn).expect("shape")).remove(0);
            vec![d_f, d_wt.transpose()]
        }),
    ))
}

/// `s · cos(features, weights)`. Pullback order: `[features, weights, scale]`.
pub fn cosine_logits(features: &Tensor, weights: &Tensor, scale: &Tensor) -> Result<Grad, TensorError> {
    let cos = cosine_similarity(features, weights)?;
    let s = scale.item();
    let value = cos.value.scaled(s);
    Ok(Grad::new(
        value,
        Box::new(move |g| {
            let ds: f64 = g.data().iter().zip(cos.value.data()).map(|(a, b)| a * b).sum();
            let mut grads = cos.backward(&g.scaled(s));
            grads.push(Tensor::scalar(ds));
            grads
        }),
    ))
}

/// Classifier scores of a branch for a batch of its features.
pub fn branch_logits(model: &BranchModel, features: &Tensor) -> Result<Tensor, TensorError> {
    Ok(cosine_logits(features, &model.weights, &model.scale)?.into_value())
}
