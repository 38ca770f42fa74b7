//! Training objectives: softmax and cosine softmax losses, the weight-centric
//! constraint, and the two-stage cost summed over the three branches.

use thiserror::Error;

use crate::heads::{cosine_logits, Level};
use crate::tensor::{l2_normalize_rows, Grad, Tensor, TensorError, NORM_FLOOR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} is not a valid index for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("{labels} labels given for a batch of {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("classifier scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("stage 2 needs frozen classifier weights")]
    MissingFrozenWeights,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Coefficient of the squared Frobenius norm of each classifier.
    pub lambda: f64,
    /// Plateau threshold on the epoch loss improvement.
    pub epsilon: f64,
    pub centric_weight: f64,
    /// Consecutive epochs below `epsilon` improvement before stopping.
    pub plateau_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1e-4,
            epsilon: 1e-3,
            centric_weight: 1.0,
            plateau_window: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda >= 0.0) {
            return Err("losses.lambda must be nonnegative".into());
        }
        if !(self.epsilon > 0.0) {
            return Err("losses.epsilon must be positive".into());
        }
        if !(self.centric_weight >= 0.0) {
            return Err("losses.centric_weight must be nonnegative".into());
        }
        if self.plateau_window == 0 {
            return Err("losses.plateau_window must be at least 1".into());
        }
        Ok(())
    }
}

/// Classifier weights captured at the end of stage 1, one `[d, c]` matrix per
/// level.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWeights {
    weights: [Tensor; 3],
}

impl FrozenWeights {
    pub fn new(mid: Tensor, high: Tensor, relation: Tensor) -> Self {
        FrozenWeights {
            weights: [mid, high, relation],
        }
    }

    pub fn get(&self, level: Level) -> &Tensor {
        &self.weights[level.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != batch {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            batch,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::InvalidLabel { label, classes });
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against `labels`.
pub fn softmax_loss(logits: &Tensor, labels: &[usize]) -> Result<Grad, LossError> {
    if logits.rank() != 2 {
        return Err(crate::tensor::mismatch("softmax_loss", format!("logits {:?} are not [N, c]", logits.shape())).into());
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    check_labels(labels, n, c)?;
    let mut probs = vec![0.0; n * c];
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[labels[i]];
        for j in 0..c {
            probs[i * c + j] = (row[j] - lse).exp();
        }
    }
    let labels = labels.to_vec();
    Ok(Grad::new(
        Tensor::scalar(total / n as f64),
        Box::new(move |g| {
            let scale = g.item() / n as f64;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * c + l] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Tensor::new(vec![n, c], d).expect("shape")]
        }),
    ))
}

/// Softmax loss over `s · cos(f, W)` plus `lambda · ‖W‖²_F`.
/// Pullback order: `[features, weights, scale]`.
pub fn cosine_softmax_loss(
    features: &Tensor,
    weights: &Tensor,
    scale: &Tensor,
    labels: &[usize],
    lambda: f64,
) -> Result<Grad, LossError> {
    let s = scale.item();
    if !(s > 0.0) {
        return Err(LossError::NonPositiveScale(s));
    }
    let logits = cosine_logits(features, weights, scale)?;
    let ce = softmax_loss(&logits.value, labels)?;
    let reg = lambda * weights.sum_squares();
    let w = weights.clone();
    Ok(Grad::new(
        Tensor::scalar(ce.value.item() + reg),
        Box::new(move |g| {
            let d_logits = ce.backward(g).remove(0);
            let mut grads = logits.backward(&d_logits);
            let mut dw_reg = w.scaled(2.0 * lambda * g.item());
            dw_reg.add_assign(&grads[1]);
            grads[1] = dw_reg;
            grads
        }),
    ))
}

/// Mean of `‖f/‖f‖ − w*_y/‖w*_y‖‖²`; `frozen` is a constant `[d, c]` matrix.
pub fn weight_centric_loss(features: &Tensor, frozen: &Tensor, labels: &[usize]) -> Result<Grad, LossError> {
    if features.rank() != 2 || frozen.rank() != 2 || features.dim(1) != frozen.dim(0) {
        return Err(crate::tensor::mismatch(
            "weight_centric_loss",
            format!("features {:?} incompatible with weights {:?}", features.shape(), frozen.shape()),
        )
        .into());
    }
    let (n, d) = (features.dim(0), features.dim(1));
    check_labels(labels, n, frozen.dim(1))?;
    let fnorm = l2_normalize_rows(features, NORM_FLOOR);
    let wnorm = l2_normalize_rows(&frozen.transpose(), NORM_FLOOR).into_value();
    let mut diff = vec![0.0; n * d];
    for (i, &l) in labels.iter().enumerate() {
        for (k, (a, b)) in fnorm.value.row(i).iter().zip(wnorm.row(l)).enumerate() {
            diff[i * d + k] = a - b;
        }
    }
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;
    Ok(Grad::new(
        Tensor::scalar(loss),
        Box::new(move |g| {
            let k = 2.0 * g.item() / n as f64;
            let d_fn = Tensor::new(vec![n, d], diff.iter().map(|v| v * k).collect()).expect("shape");
            fnorm.backward(&d_fn)
        }),
    ))
}

/// Features and classifier of one branch, as consumed by [`combined_cost`].
#[derive(Clone, Copy)]
pub struct BranchTerms<'a> {
    pub features: &'a Tensor,
    pub weights: &'a Tensor,
    pub scale: &'a Tensor,
}

pub struct CombinedCost {
    /// Pullback order: features (mid, high, relation), then weights, then
    /// scales, each in level order.
    pub grad: Grad,
    pub cosine: [f64; 3],
    pub centric: [f64; 3],
}

/// Stage 1: `Σ L_cs`. Stage 2: `Σ (L_cs + centric_weight · L_cen)`. Branch
/// terms are given in level order (mid, high, relation).
pub fn combined_cost(
    branches: [BranchTerms<'_>; 3],
    frozen: Option<&FrozenWeights>,
    labels: &[usize],
    config: &LossConfig,
    stage: Stage,
) -> Result<CombinedCost, LossError> {
    let frozen = match (stage, frozen) {
        (Stage::Two, None) => return Err(LossError::MissingFrozenWeights),
        (Stage::Two, Some(f)) => Some(f),
        (Stage::One, _) => None,
    };
    let mut cs_grads = Vec::with_capacity(3);
    let mut cen_grads = Vec::with_capacity(3);
    let mut cosine = [0.0; 3];
    let mut centric = [0.0; 3];
    for (level, b) in Level::ALL.into_iter().zip(branches) {
        let cs = cosine_softmax_loss(b.features, b.weights, b.scale, labels, config.lambda)?;
        cosine[level.index()] = cs.value.item();
        cs_grads.push(cs);
        if let Some(fw) = frozen {
            let cen = weight_centric_loss(b.features, fw.get(level), labels)?;
            centric[level.index()] = cen.value.item();
            cen_grads.push(cen);
        }
    }
    let cw = config.centric_weight;
    let total = cosine.iter().sum::<f64>() + cw * centric.iter().sum::<f64>();
    Ok(CombinedCost {
        grad: Grad::new(
            Tensor::scalar(total),
            Box::new(move |g| {
                let mut feats = Vec::with_capacity(3);
                let mut weights = Vec::with_capacity(3);
                let mut scales = Vec::with_capacity(3);
                for (i, cs) in cs_grads.iter().enumerate() {
                    let mut parts = cs.backward(g);
                    let ds = parts.pop().expect("scale");
                    let dw = parts.pop().expect("weights");
                    let mut df = parts.pop().expect("features");
                    if let Some(cen) = cen_grads.get(i) {
                        df.add_assign(&cen.backward(&g.scaled(cw))[0]);
                    }
                    feats.push(df);
                    weights.push(dw);
                    scales.push(ds);
                }
                feats.into_iter().chain(weights).chain(scales).collect()
            }),
        ),
        cosine,
        centric,
    })
}
