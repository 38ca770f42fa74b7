//! Classifier weights for unseen classes built from a few support features:
//! the normalized prototype, and an attention variant that mixes in base
//! class weights.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::heads::{cosine_logits, cosine_similarity};
use crate::losses::softmax_loss;
use crate::rng::rng_stream;
use crate::tensor::{
    gemm, l2_normalize_rows, linear, softmax_temp_rows, Grad, Tensor, TensorError, NORM_FLOOR,
};

/// Lower bound on the attention sharpness (inverse temperature).
pub const SHARPNESS_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightGenError {
    #[error("prototype of class `{class}` is degenerate (norm below {floor:e})")]
    DegeneratePrototype { class: String, floor: f64 },
    #[error("class `{class}` has no support features")]
    EmptySupport { class: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("attention generator training diverged at episode {episode}")]
    Diverged { episode: usize },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    Avg,
    Att,
}

impl FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" => Ok(Generator::Avg),
            "att" => Ok(Generator::Att),
            _ => Err(format!("unknown generator `{s}` (expected avg or att)")),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Avg => "avg",
            Generator::Att => "att",
        })
    }
}

/// Support features of each class: `features[c]` is `[k_c, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub features: Vec<Tensor>,
    pub names: Vec<String>,
}

impl SupportSet {
    pub fn new(features: Vec<Tensor>, names: Vec<String>) -> Result<Self, WeightGenError> {
        if features.len() != names.len() {
            return Err(WeightGenError::Dimension(format!(
                "{} feature blocks for {} class names",
                features.len(),
                names.len()
            )));
        }
        let d = features.first().map(|f| f.dim(f.rank() - 1));
        for (f, name) in features.iter().zip(&names) {
            if f.rank() != 2 {
                return Err(WeightGenError::Dimension(format!("support of `{name}` is not [k, d]")));
            }
            if f.dim(0) == 0 {
                return Err(WeightGenError::EmptySupport { class: name.clone() });
            }
            if Some(f.dim(1)) != d {
                return Err(WeightGenError::Dimension(format!("support of `{name}` has width {}", f.dim(1))));
            }
        }
        Ok(SupportSet { features, names })
    }

    pub fn num_classes(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].dim(1)
    }
}

/// Per class: normalize each support feature, average, normalize again.
/// Returns the weights as columns of a `[d, c]` matrix.
pub fn avg_gen(support: &SupportSet) -> Result<Tensor, WeightGenError> {
    let d = support.dim();
    let c = support.num_classes();
    let mut cols = Tensor::zeros(&[c, d]);
    for (ci, (f, name)) in support.features.iter().zip(&support.names).enumerate() {
        let proto = prototype(f);
        let norm = proto.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            return Err(WeightGenError::DegeneratePrototype {
                class: name.clone(),
                floor: NORM_FLOOR,
            });
        }
        for (o, v) in cols.row_mut(ci).iter_mut().zip(&proto) {
            *o = v / norm;
        }
    }
    Ok(cols.transpose())
}

/// Mean of the row-normalized rows of `f`.
fn prototype(f: &Tensor) -> Vec<f64> {
    let z = l2_normalize_rows(f, NORM_FLOOR).into_value();
    let k = f.dim(0) as f64;
    let mut mean = vec![0.0; f.dim(1)];
    for i in 0..f.dim(0) {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v / k;
        }
    }
    mean
}

/// Learnable parameters of the attention generator.
#[derive(Clone, Debug, PartialEq)]
pub struct AttGenParams {
    /// Gate on the prototype, `[d]`.
    pub phi_avg: Tensor,
    /// Gate on the attended base weights, `[d]`.
    pub phi_att: Tensor,
    /// Query transform, `[d, d]` applied as `q = phi_q · z`.
    pub phi_q: Tensor,
    /// One key per base class as columns, `[d, K]`.
    pub keys: Tensor,
    /// Inverse attention temperature, `[1]`.
    pub sharpness: Tensor,
}

impl AttGenParams {
    /// Gates select the prototype only, the query map is the identity and
    /// keys start at the normalized base weights.
    pub fn init(base_weights: &Tensor, sharpness: f64) -> Self {
        let d = base_weights.dim(0);
        let mut phi_q = Tensor::zeros(&[d, d]);
        for i in 0..d {
            phi_q.data_mut()[i * d + i] = 1.0;
        }
        AttGenParams {
            phi_avg: Tensor::full(&[d], 1.0),
            phi_att: Tensor::zeros(&[d]),
            phi_q,
            keys: normalize_columns(base_weights),
            sharpness: Tensor::scalar(sharpness),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_avg.len()
    }

    pub fn num_keys(&self) -> usize {
        self.keys.dim(1)
    }

    /// Parameter tensors under fixed names, in pullback order.
    pub fn named(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("phi_avg", &self.phi_avg),
            ("phi_att", &self.phi_att),
            ("phi_q", &self.phi_q),
            ("keys", &self.keys),
            ("sharpness", &self.sharpness),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("phi_avg", &mut self.phi_avg),
            ("phi_att", &mut self.phi_att),
            ("phi_q", &mut self.phi_q),
            ("keys", &mut self.keys),
            ("sharpness", &mut self.sharpness),
        ]
    }

    fn check(&self, d: usize, base_weights: &Tensor) -> Result<(), WeightGenError> {
        let ok = self.phi_avg.shape() == [d]
            && self.phi_att.shape() == [d]
            && self.phi_q.shape() == [d, d]
            && self.keys.rank() == 2
            && self.keys.dim(0) == d
            && base_weights.rank() == 2
            && base_weights.shape() == self.keys.shape();
        if ok {
            Ok(())
        } else {
            Err(WeightGenError::Dimension(format!(
                "features of width {d}, keys {:?}, base weights {:?}",
                self.keys.shape(),
                base_weights.shape()
            )))
        }
    }
}

pub fn normalize_columns(m: &Tensor) -> Tensor {
    l2_normalize_rows(&m.transpose(), NORM_FLOOR).into_value().transpose()
}

/// Attention over base classes for each row of `z` (already normalized):
/// `softmax_b(sharpness · cos(phi_q z, k_b))`, shape `[n, K]`.
pub fn attention(z: &Tensor, params: &AttGenParams) -> Result<Tensor, WeightGenError> {
    let q = linear(z, &params.phi_q, None)?.into_value();
    let cos = cosine_similarity(&q, &params.keys)?.into_value();
    Ok(softmax_temp_rows(&cos, 1.0 / params.sharpness.item())?.into_value())
}

/// Generated weights with the per-sample attention distributions.
pub struct AttGenOutput {
    /// Unit columns, `[d, c]`.
    pub weights: Tensor,
    /// Gated combination before the final normalization, `[d, c]`.
    pub unnormalized: Tensor,
    /// `attention[c]` is `[k_c, K]`.
    pub attention: Vec<Tensor>,
}

/// Attention generator:
/// `normalize(phi_avg ⊙ w_avg + phi_att ⊙ mean_i Σ_b att_ib · w_b)`.
pub fn att_gen(support: &SupportSet, base_weights: &Tensor, params: &AttGenParams) -> Result<AttGenOutput, WeightGenError> {
    let d = support.dim();
    params.check(d, base_weights)?;
    let (features, owner) = flatten(support);
    let w_avg = avg_gen(support)?.transpose();
    let g = att_gen_grad(&features, &owner, &w_avg, base_weights, params)?;
    let z = l2_normalize_rows(&features, NORM_FLOOR).into_value();
    let att = attention(&z, params)?;
    let mut attention = Vec::with_capacity(support.num_classes());
    let mut start = 0;
    for f in &support.features {
        let rows: Vec<usize> = (start..start + f.dim(0)).collect();
        attention.push(att.select_rows(&rows));
        start += f.dim(0);
    }
    let unnormalized = g.unnormalized.transpose();
    Ok(AttGenOutput {
        weights: g.grad.into_value().transpose(),
        unnormalized,
        attention,
    })
}

fn flatten(support: &SupportSet) -> (Tensor, Vec<usize>) {
    let d = support.dim();
    let mut data = Vec::new();
    let mut owner = Vec::new();
    for (c, f) in support.features.iter().enumerate() {
        data.extend_from_slice(f.data());
        owner.extend(std::iter::repeat_n(c, f.dim(0)));
    }
    (Tensor::new(vec![owner.len(), d], data).expect("shape"), owner)
}

/// [`att_gen`] as a differentiable map of the generator parameters: value
/// `[c, d]` with unit rows, pullback order
/// `[phi_avg, phi_att, phi_q, keys, sharpness]`.
pub fn att_gen_params_grad(
    support: &SupportSet,
    base_weights: &Tensor,
    params: &AttGenParams,
) -> Result<Grad, WeightGenError> {
    params.check(support.dim(), base_weights)?;
    let w_avg = avg_gen(support)?.transpose();
    let (features, owner) = flatten(support);
    Ok(att_gen_grad(&features, &owner, &w_avg, base_weights, params)?.grad)
}

struct AttGenGrad {
    /// Value `[c, d]` (unit rows); pullback order
    /// `[phi_avg, phi_att, phi_q, keys, sharpness]`.
    grad: Grad,
    unnormalized: Tensor,
}

/// Differentiable core of [`att_gen`]. `features` is `[n, d]` with
/// `owner[i]` the class of row `i`; `w_avg` holds the prototypes as rows.
fn att_gen_grad(
    features: &Tensor,
    owner: &[usize],
    w_avg: &Tensor,
    base_weights: &Tensor,
    params: &AttGenParams,
) -> Result<AttGenGrad, WeightGenError> {
    let (n, d) = (features.dim(0), features.dim(1));
    let c = w_avg.dim(0);
    let kb = params.num_keys();
    let beta = params.sharpness.item();
    let z = l2_normalize_rows(features, NORM_FLOOR).into_value();
    let q = linear(&z, &params.phi_q, None)?;
    let cos = cosine_similarity(&q.value, &params.keys)?;
    let logits = cos.value.scaled(beta);
    let soft = softmax_temp_rows(&logits, 1.0)?;
    let wb = normalize_columns(base_weights);

    // attended[i] = Σ_b A[i, b] · w_b
    let mut attended = vec![0.0; n * d];
    gemm(n, kb, d, (soft.value.data(), kb as isize, 1), (wb.data(), 1, kb as isize), 0.0, &mut attended);
    let mut counts = vec![0usize; c];
    owner.iter().for_each(|&o| counts[o] += 1);
    let mut mean_att = vec![0.0; c * d];
    for (i, &o) in owner.iter().enumerate() {
        for k in 0..d {
            mean_att[o * d + k] += attended[i * d + k] / counts[o] as f64;
        }
    }
    let mut u = vec![0.0; c * d];
    for r in 0..c {
        for k in 0..d {
            u[r * d + k] = params.phi_avg.data()[k] * w_avg.data()[r * d + k] + params.phi_att.data()[k] * mean_att[r * d + k];
        }
    }
    let u = Tensor::new(vec![c, d], u)?;
    let out = l2_normalize_rows(&u, NORM_FLOOR);

    let phi_att = params.phi_att.clone();
    let w_avg = w_avg.clone();
    let owner = owner.to_vec();
    let cos_value = cos.value.clone();
    let value = out.value.clone();
    Ok(AttGenGrad {
        unnormalized: u,
        grad: Grad::new(
            value,
            Box::new(move |g| {
                let du = out.backward(g).remove(0);
                let mut d_avg = vec![0.0; d];
                let mut d_att = vec![0.0; d];
                let mut d_mean = vec![0.0; c * d];
                for r in 0..c {
                    for k in 0..d {
                        let gu = du.data()[r * d + k];
                        d_avg[k] += gu * w_avg.data()[r * d + k];
                        d_att[k] += gu * mean_att[r * d + k];
                        d_mean[r * d + k] = gu * phi_att.data()[k];
                    }
                }
                let mut d_attended = vec![0.0; n * d];
                for (i, &o) in owner.iter().enumerate() {
                    for k in 0..d {
                        d_attended[i * d + k] = d_mean[o * d + k] / counts[o] as f64;
                    }
                }
                let mut d_soft = vec![0.0; n * kb];
                gemm(n, d, kb, (&d_attended, d as isize, 1), (wb.data(), kb as isize, 1), 0.0, &mut d_soft);
                let d_logits = soft.backward(&Tensor::new(vec![n, kb], d_soft).expect("shape")).remove(0);
                let d_beta: f64 = d_logits.data().iter().zip(cos_value.data()).map(|(a, b)| a * b).sum();
                let mut gc = cos.backward(&d_logits.scaled(beta));
                let d_keys = gc.pop().expect("keys");
                let d_q = gc.pop().expect("queries");
                let d_phi_q = q.backward(&d_q).pop().expect("query map");
                vec![
                    Tensor::vector(d_avg),
                    Tensor::vector(d_att),
                    d_phi_q,
                    d_keys,
                    Tensor::scalar(d_beta),
                ]
            }),
        ),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttGenConfig {
    pub episodes: usize,
    /// Base classes held out as unseen in each episode.
    pub fake_classes: usize,
    /// Support size is drawn uniformly from `1..=max_shots`.
    pub max_shots: usize,
    pub queries_per_class: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fixed scale of the episode classifier.
    pub logit_scale: f64,
    pub init_sharpness: f64,
    pub seed: u64,
}

impl Default for AttGenConfig {
    fn default() -> Self {
        AttGenConfig {
            episodes: 300,
            fake_classes: 4,
            max_shots: 5,
            queries_per_class: 5,
            lr: 0.05,
            momentum: 0.9,
            logit_scale: 10.0,
            init_sharpness: 10.0,
            seed: 11,
        }
    }
}

impl AttGenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.fake_classes == 0 || self.max_shots == 0 || self.queries_per_class == 0 {
            return Err("attgen episode sizes must be positive".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err("attgen.lr must be nonnegative and attgen.momentum in [0, 1)".into());
        }
        if !(self.logit_scale > 0.0) || !(self.init_sharpness > 0.0) {
            return Err("attgen.logit_scale and attgen.init_sharpness must be positive".into());
        }
        Ok(())
    }
}

/// One episode on base classes: a few classes play the unseen role, their
/// weights are generated from support features and every class competes
/// for the queries.
pub struct FakeEpisode {
    pub fake: Vec<usize>,
    /// Support rows per fake class, indices into the support features.
    pub support: Vec<Vec<usize>>,
    /// Query rows with their labels, indices into the query features.
    pub queries: Vec<usize>,
}

fn sample_fake_episode(
    by_class: &[Vec<usize>],
    query_by_class: Option<&[Vec<usize>]>,
    cfg: &AttGenConfig,
    rng: &mut crate::rng::RngStream,
) -> Result<FakeEpisode, WeightGenError> {
    let c = by_class.len();
    if cfg.fake_classes >= c {
        return Err(WeightGenError::Config(format!(
            "{} fake classes need at least {} base classes, have {c}",
            cfg.fake_classes,
            cfg.fake_classes + 1
        )));
    }
    let mut fake: Vec<usize> = index::sample(rng, c, cfg.fake_classes).into_vec();
    fake.sort_unstable();
    let k = rng.random_range(1..=cfg.max_shots);
    let mut support = Vec::with_capacity(fake.len());
    let mut queries = Vec::new();
    for (cls, members) in by_class.iter().enumerate() {
        let is_fake = fake.contains(&cls);
        let reserve = if is_fake && query_by_class.is_none() { k } else { 0 };
        let pool_q: &[usize] = match query_by_class {
            Some(q) => &q[cls],
            None => members,
        };
        if members.len() < reserve + 1 || (is_fake && members.len() < k) {
            return Err(WeightGenError::Config(format!("base class {cls} has too few samples")));
        }
        if is_fake {
            let picks = index::sample(rng, members.len(), members.len()).into_vec();
            let s: Vec<usize> = picks[..k].iter().map(|&i| members[i]).collect();
            if query_by_class.is_none() {
                let rest: Vec<usize> = picks[k..].iter().map(|&i| members[i]).collect();
                let nq = cfg.queries_per_class.min(rest.len());
                queries.extend_from_slice(&rest[..nq]);
            } else {
                let nq = cfg.queries_per_class.min(pool_q.len());
                queries.extend(index::sample(rng, pool_q.len(), nq).into_iter().map(|i| pool_q[i]));
            }
            support.push(s);
        } else {
            let nq = cfg.queries_per_class.min(pool_q.len());
            queries.extend(index::sample(rng, pool_q.len(), nq).into_iter().map(|i| pool_q[i]));
        }
    }
    Ok(FakeEpisode { fake, support, queries })
}

fn select_columns(m: &Tensor, cols: &[usize]) -> Tensor {
    m.transpose().select_rows(cols).transpose()
}

/// Episode classifier: real base columns except for the fake classes, whose
/// columns come from the generator. Returns the `[d, c]` matrix.
fn episode_weights(base_w: &Tensor, fake: &[usize], generated: &Tensor) -> Tensor {
    let mut rows = normalize_columns(base_w).transpose();
    let d = rows.dim(1);
    for (j, &cls) in fake.iter().enumerate() {
        rows.row_mut(cls).copy_from_slice(&generated.data()[j * d..(j + 1) * d]);
    }
    rows.transpose()
}

/// Generates fake-class weights for an episode with either generator. The
/// attention keys and base weights are restricted to the real classes.
fn episode_generate(
    features: &Tensor,
    base_w: &Tensor,
    params: Option<&AttGenParams>,
    ep: &FakeEpisode,
) -> Result<(Tensor, Option<(Vec<usize>, AttGenGrad)>), WeightGenError> {
    let blocks: Vec<Tensor> = ep.support.iter().map(|s| features.select_rows(s)).collect();
    let names = ep.fake.iter().map(|c| format!("base class {c}")).collect();
    let support = SupportSet::new(blocks, names)?;
    let w_avg = avg_gen(&support)?.transpose();
    match params {
        None => Ok((w_avg, None)),
        Some(p) => {
            let real: Vec<usize> = (0..base_w.dim(1)).filter(|c| !ep.fake.contains(c)).collect();
            let sub = AttGenParams {
                keys: select_columns(&p.keys, &real),
                ..p.clone()
            };
            let (flat, owner) = flatten(&support);
            let g = att_gen_grad(&flat, &owner, &w_avg, &select_columns(base_w, &real), &sub)?;
            Ok((g.grad.value.clone(), Some((real, g))))
        }
    }
}

/// Episodic training of the attention generator on frozen base features.
pub fn att_gen_train(
    features: &Tensor,
    labels: &[usize],
    base_weights: &Tensor,
    init: AttGenParams,
    cfg: &AttGenConfig,
) -> Result<AttGenParams, WeightGenError> {
    cfg.validate().map_err(WeightGenError::Config)?;
    init.check(features.dim(1), base_weights)?;
    let c = base_weights.dim(1);
    let mut by_class = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut params = init;
    let mut velocity: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut rng = rng_stream(cfg.seed, 0);
    let scale = Tensor::scalar(cfg.logit_scale);
    for episode in 0..cfg.episodes {
        let ep = sample_fake_episode(&by_class, None, cfg, &mut rng)?;
        let (generated, tape) = episode_generate(features, base_weights, Some(&params), &ep)?;
        let (real, gen_grad) = tape.expect("attention path");
        let w = episode_weights(base_weights, &ep.fake, &generated);
        let qf = features.select_rows(&ep.queries);
        let ql: Vec<usize> = ep.queries.iter().map(|&i| labels[i]).collect();
        let logits = cosine_logits(&qf, &w, &scale)?;
        let loss = softmax_loss(&logits.value, &ql).map_err(|e| WeightGenError::Config(e.to_string()))?;
        if !loss.value.item().is_finite() {
            return Err(WeightGenError::Diverged { episode });
        }
        let d_logits = loss.backward(&Tensor::scalar(1.0)).remove(0);
        let d_w = logits.backward(&d_logits).swap_remove(1).transpose();
        let d_gen = d_w.select_rows(&ep.fake);
        let mut grads = gen_grad.grad.backward(&d_gen);
        // Scatter key gradients back to the full key set.
        let sub_keys = grads[3].transpose();
        let mut full = Tensor::zeros(&[c, params.dim()]);
        for (j, &cls) in real.iter().enumerate() {
            full.row_mut(cls).copy_from_slice(sub_keys.row(j));
        }
        grads[3] = full.transpose();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(WeightGenError::Diverged { episode });
        }
        for ((v, g), (_, p)) in velocity.iter_mut().zip(&grads).zip(params.named_mut()) {
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = cfg.momentum * *vi + gi;
                *pi -= cfg.lr * *vi;
            }
        }
        let s = &mut params.sharpness.data_mut()[0];
        *s = s.max(SHARPNESS_FLOOR);
    }
    Ok(params)
}

/// Mean accuracy (percent) over `episodes` fake-novel episodes on base
/// classes. Support comes from `support_features`, queries from
/// `query_features`; every base class competes. Also returns whether every
/// attention distribution was a valid probability vector.
#[allow(clippy::too_many_arguments)]
pub fn fake_novel_accuracy(
    support_features: &Tensor,
    support_labels: &[usize],
    query_features: &Tensor,
    query_labels: &[usize],
    base_weights: &Tensor,
    params: Option<&AttGenParams>,
    cfg: &AttGenConfig,
    episodes: usize,
    seed: u64,
) -> Result<(f64, bool), WeightGenError> {
    let c = base_weights.dim(1);
    let group = |labels: &[usize]| {
        let mut g = vec![Vec::new(); c];
        labels.iter().enumerate().for_each(|(i, &l)| g[l].push(i));
        g
    };
    let (sb, qb) = (group(support_labels), group(query_labels));
    let mut rng = rng_stream(seed, 0);
    let scale = Tensor::scalar(cfg.logit_scale);
    let mut total = 0.0;
    let mut valid = true;
    for _ in 0..episodes {
        let ep = sample_fake_episode(&sb, Some(&qb), cfg, &mut rng)?;
        let (generated, _) = episode_generate(support_features, base_weights, params, &ep)?;
        if let Some(p) = params {
            let real: Vec<usize> = (0..c).filter(|x| !ep.fake.contains(x)).collect();
            let sub = AttGenParams {
                keys: select_columns(&p.keys, &real),
                ..p.clone()
            };
            let rows: Vec<usize> = ep.support.concat();
            let z = l2_normalize_rows(&support_features.select_rows(&rows), NORM_FLOOR).into_value();
            valid &= is_distribution(&attention(&z, &sub)?);
        }
        let w = episode_weights(base_weights, &ep.fake, &generated);
        let logits = cosine_logits(&query_features.select_rows(&ep.queries), &w, &scale)?.into_value();
        let correct = ep
            .queries
            .iter()
            .enumerate()
            .filter(|(r, &q)| argmax(logits.row(*r)) == query_labels[q])
            .count();
        total += 100.0 * correct as f64 / ep.queries.len() as f64;
    }
    Ok((total / episodes as f64, valid))
}

/// Nonnegative rows summing to one within `1e-12`.
pub fn is_distribution(rows: &Tensor) -> bool {
    (0..rows.dim(0)).all(|i| {
        let r = rows.row(i);
        r.iter().all(|&v| v >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
