#![allow(dead_code)]

pub mod metric;
pub mod props;

use mlwc::backbone::{backbone_forward, BackboneConfig, BackboneState, ConvBlock};
use mlwc::heads::{
    cosine_logits, cosine_similarity, high_head, mid_head, relation_head, Dense, HighHead, MidHead, RelationHead,
    TapConv,
};
use mlwc::losses::{
    combined_cost, cosine_softmax_loss, softmax_loss, weight_centric_loss, BranchTerms, FrozenWeights, LossConfig,
    Stage,
};
use mlwc::rng::{rng_stream, RngStream};
use mlwc::tensor::{
    bias_add, concat, conv2d, global_pool, grad_check, l2_normalize, l2_normalize_rows, layer_apply, linear, relu,
    softmax_temp, softmax_temp_rows, split, ConvSpec, Grad, LayerKind, Padding, PoolMode, Tensor, NORM_FLOOR,
};
use mlwc::weightgen::{att_gen_params_grad, AttGenParams, SupportSet};
use rand::Rng;

pub const GRAD_POINTS: usize = 100;
pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub struct GradCase {
    pub name: &'static str,
    pub points: usize,
    pub worst: f64,
}

pub fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut RngStream) -> Tensor {
    rand_tensor(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Random map whose values are pairwise at least `gap` apart, so a max
/// pool has no near-ties.
fn distinct_map(shape: &[usize], gap: f64, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    let data = ranks.iter().map(|&r| r as f64 * (2.0 / n as f64).max(gap) - 1.0).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn labels(n: usize, c: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

fn positive_scale(rng: &mut RngStream) -> Tensor {
    Tensor::scalar(rng.random_range(0.5..8.0))
}

/// Runs `make(rng)` at [`GRAD_POINTS`] seeded points and reports the
/// worst relative error.
fn case<M>(name: &'static str, seed: u64, make: M) -> GradCase
where
    M: Fn(&mut RngStream) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Grad>),
{
    let mut worst = 0.0f64;
    for p in 0..GRAD_POINTS {
        let mut rng = rng_stream(seed, p as u64);
        let (point, op) = make(&mut rng);
        worst = worst.max(grad_check(|xs| op(xs), &point, GRAD_STEP));
    }
    GradCase { name, points: GRAD_POINTS, worst }
}

fn conv_case(name: &'static str, seed: u64, stride: usize, padding: Padding) -> GradCase {
    case(name, seed, move |rng| {
        let spec = ConvSpec { stride, padding };
        let point = vec![rand_tensor(&[2, 2, 5, 5], rng), rand_tensor(&[3, 2, 3, 3], rng)];
        (point, Box::new(move |xs: &[Tensor]| conv2d(&xs[0], &xs[1], spec).unwrap()))
    })
}

fn flatten_rows(t: &Tensor) -> Tensor {
    let n = t.dim(0);
    t.clone().reshape(vec![n, t.len() / n]).unwrap()
}

type Back = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

/// Joins several gradients side by side as one `[N, Σ]` value.
fn joined(parts: Vec<(Tensor, Back)>) -> Grad {
    let shapes: Vec<Vec<usize>> = parts.iter().map(|(v, _)| v.shape().to_vec()).collect();
    let flat: Vec<Tensor> = parts.iter().map(|(v, _)| flatten_rows(v)).collect();
    let widths: Vec<usize> = flat.iter().map(|f| f.dim(1)).collect();
    let value = concat(&flat).unwrap().into_value();
    let backs: Vec<_> = parts.into_iter().map(|(_, b)| b).collect();
    Grad::new(
        value,
        Box::new(move |g| {
            let pieces = split(g, &widths).unwrap();
            let mut total: Option<Vec<Tensor>> = None;
            for ((piece, shape), back) in pieces.iter().zip(&shapes).zip(&backs) {
                let grads = back(&piece.clone().reshape(shape.clone()).unwrap());
                total = Some(match total {
                    None => grads,
                    Some(mut acc) => {
                        for (a, b) in acc.iter_mut().zip(&grads) {
                            a.add_assign(b);
                        }
                        acc
                    }
                });
            }
            total.unwrap()
        }),
    )
}

pub fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        in_channels: 1,
        stage_channels: vec![2, 3],
        blocks_per_stage: 1,
        tap_stages: vec![0],
        detach_taps: false,
    }
}

fn backbone_state(cfg: &BackboneConfig, params: &[Tensor]) -> BackboneState {
    let n = params.len() / 2;
    BackboneState {
        config: cfg.clone(),
        blocks: (0..n)
            .map(|i| ConvBlock {
                kernel: params[i].clone(),
                bias: params[n + i].clone(),
                stride: if i % cfg.blocks_per_stage == 0 { 2 } else { 1 },
            })
            .collect(),
    }
}

/// Gradient checks of every differentiable operation, head, trunk and loss.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut out = Vec::new();

    out.push(case("linear", 1, |rng| {
        let point = vec![rand_tensor(&[3, 4], rng), rand_tensor(&[5, 4], rng), rand_tensor(&[5], rng)];
        (point, Box::new(|xs: &[Tensor]| linear(&xs[0], &xs[1], Some(&xs[2])).unwrap()))
    }));
    out.push(conv_case("conv2d stride 1 same", 2, 1, Padding::Same));
    out.push(conv_case("conv2d stride 1 valid", 3, 1, Padding::Valid));
    out.push(conv_case("conv2d stride 2 same", 4, 2, Padding::Same));
    out.push(conv_case("conv2d stride 2 valid", 5, 2, Padding::Valid));
    out.push(case("relu", 6, |rng| {
        let point = vec![away_from_zero(&[4, 6], 10.0 * GRAD_STEP, rng)];
        (point, Box::new(|xs: &[Tensor]| relu(&xs[0])))
    }));
    out.push(case("bias add", 7, |rng| {
        let point = vec![rand_tensor(&[2, 3, 2, 2], rng), rand_tensor(&[3], rng)];
        (point, Box::new(|xs: &[Tensor]| bias_add(&xs[0], &xs[1]).unwrap()))
    }));
    out.push(case("layer_apply linear", 8, |rng| {
        let point = vec![rand_tensor(&[2, 3], rng), rand_tensor(&[4, 3], rng), rand_tensor(&[4], rng)];
        (
            point,
            Box::new(|xs: &[Tensor]| layer_apply(LayerKind::Linear, &xs[1..], &xs[0]).unwrap()),
        )
    }));
    out.push(case("concat", 9, |rng| {
        let point = vec![rand_tensor(&[2, 3], rng), rand_tensor(&[2, 4], rng), rand_tensor(&[2, 1], rng)];
        (point, Box::new(|xs: &[Tensor]| concat(xs).unwrap()))
    }));
    out.push(case("global average pool", 10, |rng| {
        let point = vec![rand_tensor(&[2, 3, 3, 4], rng)];
        (point, Box::new(|xs: &[Tensor]| global_pool(&xs[0], PoolMode::Avg).unwrap()))
    }));
    out.push(case("global max pool", 11, |rng| {
        let point = vec![distinct_map(&[2, 3, 3, 3], 10.0 * GRAD_STEP, rng)];
        (point, Box::new(|xs: &[Tensor]| global_pool(&xs[0], PoolMode::Max).unwrap()))
    }));
    out.push(case("l2 normalize", 12, |rng| {
        let point = vec![rand_tensor(&[7], rng)];
        (point, Box::new(|xs: &[Tensor]| l2_normalize(&xs[0], NORM_FLOOR)))
    }));
    out.push(case("l2 normalize rows", 13, |rng| {
        let point = vec![rand_tensor(&[3, 5], rng)];
        (point, Box::new(|xs: &[Tensor]| l2_normalize_rows(&xs[0], NORM_FLOOR)))
    }));
    out.push(case("softmax with temperature", 14, |rng| {
        let t = rng.random_range(0.5..5.0);
        let point = vec![rand_tensor(&[6], rng).scaled(3.0)];
        (point, Box::new(move |xs: &[Tensor]| softmax_temp(&xs[0], t).unwrap()))
    }));
    out.push(case("row softmax with temperature", 15, |rng| {
        let t = rng.random_range(0.5..5.0);
        let point = vec![rand_tensor(&[3, 5], rng).scaled(3.0)];
        (point, Box::new(move |xs: &[Tensor]| softmax_temp_rows(&xs[0], t).unwrap()))
    }));
    out.push(case("cosine similarity", 16, |rng| {
        let point = vec![rand_tensor(&[3, 5], rng), rand_tensor(&[5, 4], rng)];
        (point, Box::new(|xs: &[Tensor]| cosine_similarity(&xs[0], &xs[1]).unwrap()))
    }));
    out.push(case("scaled cosine logits", 17, |rng| {
        let point = vec![rand_tensor(&[3, 5], rng), rand_tensor(&[5, 4], rng), positive_scale(rng)];
        (point, Box::new(|xs: &[Tensor]| cosine_logits(&xs[0], &xs[1], &xs[2]).unwrap()))
    }));
    out.push(case("high-level head", 18, |rng| {
        let point = vec![rand_tensor(&[2, 3, 2, 2], rng), rand_tensor(&[4, 3], rng), rand_tensor(&[4], rng)];
        (
            point,
            Box::new(|xs: &[Tensor]| {
                let head = HighHead { proj: Dense { weight: xs[1].clone(), bias: xs[2].clone() } };
                let (value, tape) = high_head(&xs[0], &head).unwrap();
                Grad::new(
                    value,
                    Box::new(move |g| {
                        let r = tape.backward(g);
                        vec![r.d_map, r.weight, r.bias]
                    }),
                )
            }),
        )
    }));
    out.push(case("mid-level head", 19, |rng| {
        let point = vec![
            distinct_map(&[2, 2, 3, 3], 1e-3, rng),
            distinct_map(&[2, 3, 2, 2], 1e-3, rng),
            rand_tensor(&[4, 2, 1, 1], rng),
            rand_tensor(&[4, 3, 1, 1], rng),
            rand_tensor(&[4], rng).scaled(0.1),
            rand_tensor(&[4], rng).scaled(0.1),
            rand_tensor(&[5, 8], rng),
            rand_tensor(&[5], rng),
        ];
        (
            point,
            Box::new(|xs: &[Tensor]| {
                let head = MidHead {
                    taps: vec![
                        TapConv { kernel: xs[2].clone(), bias: xs[4].clone() },
                        TapConv { kernel: xs[3].clone(), bias: xs[5].clone() },
                    ],
                    proj: Dense { weight: xs[6].clone(), bias: xs[7].clone() },
                };
                let (value, tape) = mid_head(&xs[..2], &head).unwrap();
                Grad::new(
                    value,
                    Box::new(move |g| {
                        let r = tape.backward(g);
                        let mut v = r.d_taps;
                        v.extend(r.tap_kernels);
                        v.extend(r.tap_biases);
                        v.push(r.proj_weight);
                        v.push(r.proj_bias);
                        v
                    }),
                )
            }),
        )
    }));
    out.push(case("relation-level head", 20, |rng| {
        let t = rng.random_range(1.0..6.0);
        let point = vec![
            rand_tensor(&[3, 4], rng).scaled(5.0),
            rand_tensor(&[6, 4], rng),
            rand_tensor(&[6], rng),
            rand_tensor(&[5, 6], rng),
            rand_tensor(&[5], rng),
        ];
        (
            point,
            Box::new(move |xs: &[Tensor]| {
                let head = RelationHead {
                    fc1: Dense { weight: xs[1].clone(), bias: xs[2].clone() },
                    fc2: Dense { weight: xs[3].clone(), bias: xs[4].clone() },
                };
                let (value, tape) = relation_head(&xs[0], &head, t).unwrap();
                Grad::new(
                    value,
                    Box::new(move |g| {
                        let r = tape.backward(g);
                        vec![r.d_logits, r.fc1_weight, r.fc1_bias, r.fc2_weight, r.fc2_bias]
                    }),
                )
            }),
        )
    }));
    out.push(case("trunk with taps", 21, |rng| {
        let cfg = tiny_backbone_config();
        let batch = rand_tensor(&[2, 1, 8, 8], rng);
        let point = vec![
            rand_tensor(&[2, 1, 3, 3], rng),
            rand_tensor(&[3, 2, 3, 3], rng),
            rand_tensor(&[2], rng).scaled(0.1),
            rand_tensor(&[3], rng).scaled(0.1),
        ];
        (
            point,
            Box::new(move |xs: &[Tensor]| {
                let state = backbone_state(&cfg, xs);
                let out = backbone_forward(&state, &batch).unwrap();
                let tape = std::sync::Arc::new(out.tape);
                let final_shape = out.final_map.shape().to_vec();
                let (cfg_a, cfg_b) = (cfg.clone(), cfg.clone());
                let (tape_a, tape_b) = (tape.clone(), tape.clone());
                let tap_shape = out.taps[0].shape().to_vec();
                joined(vec![
                    (
                        out.final_map,
                        Box::new(move |g: &Tensor| {
                            let zero = Tensor::zeros(&tap_shape);
                            let r = tape_a.backward(&cfg_a, g, Some(std::slice::from_ref(&zero)));
                            r.kernels.into_iter().chain(r.biases).collect()
                        }),
                    ),
                    (
                        out.taps[0].clone(),
                        Box::new(move |g: &Tensor| {
                            let zero = Tensor::zeros(&final_shape);
                            let r = tape_b.backward(&cfg_b, &zero, Some(std::slice::from_ref(g)));
                            r.kernels.into_iter().chain(r.biases).collect()
                        }),
                    ),
                ])
            }),
        )
    }));
    out.push(case("softmax loss", 22, |rng| {
        let y = labels(4, 5, rng);
        let point = vec![rand_tensor(&[4, 5], rng).scaled(3.0)];
        (point, Box::new(move |xs: &[Tensor]| softmax_loss(&xs[0], &y).unwrap()))
    }));
    out.push(case("cosine softmax loss", 23, |rng| {
        let y = labels(4, 3, rng);
        let lambda = rng.random_range(0.0..0.1);
        let point = vec![rand_tensor(&[4, 5], rng), rand_tensor(&[5, 3], rng), positive_scale(rng)];
        (
            point,
            Box::new(move |xs: &[Tensor]| cosine_softmax_loss(&xs[0], &xs[1], &xs[2], &y, lambda).unwrap()),
        )
    }));
    out.push(case("weight-centric loss", 24, |rng| {
        let y = labels(4, 3, rng);
        let frozen = rand_tensor(&[5, 3], rng);
        let point = vec![rand_tensor(&[4, 5], rng)];
        (point, Box::new(move |xs: &[Tensor]| weight_centric_loss(&xs[0], &frozen, &y).unwrap()))
    }));
    for (name, seed, stage) in [("stage-1 summed cost", 25, Stage::One), ("stage-2 summed cost", 26, Stage::Two)] {
        out.push(case(name, seed, move |rng| {
            let y = labels(4, 3, rng);
            let frozen = FrozenWeights::new(
                rand_tensor(&[5, 3], rng),
                rand_tensor(&[5, 3], rng),
                rand_tensor(&[5, 3], rng),
            );
            let cfg = LossConfig { lambda: 1e-2, centric_weight: 0.7, ..LossConfig::default() };
            let mut point: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[4, 5], rng)).collect();
            point.extend((0..3).map(|_| rand_tensor(&[5, 3], rng)));
            point.extend((0..3).map(|_| positive_scale(rng)));
            (
                point,
                Box::new(move |xs: &[Tensor]| {
                    let b = |i: usize| BranchTerms { features: &xs[i], weights: &xs[3 + i], scale: &xs[6 + i] };
                    combined_cost([b(0), b(1), b(2)], Some(&frozen), &y, &cfg, stage).unwrap().grad
                }),
            )
        }));
    }
    out.push(case("attention weight generator", 27, |rng| {
        let base = rand_tensor(&[5, 4], rng);
        let support = SupportSet::new(
            vec![rand_tensor(&[2, 5], rng), rand_tensor(&[3, 5], rng)],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let mut p = AttGenParams::init(&base, rng.random_range(1.0..5.0));
        p.phi_att = rand_tensor(&[5], rng);
        p.phi_avg = rand_tensor(&[5], rng);
        p.phi_q = rand_tensor(&[5, 5], rng);
        let point: Vec<Tensor> = p.named().iter().map(|(_, t)| (*t).clone()).collect();
        (
            point,
            Box::new(move |xs: &[Tensor]| {
                let p = AttGenParams {
                    phi_avg: xs[0].clone(),
                    phi_att: xs[1].clone(),
                    phi_q: xs[2].clone(),
                    keys: xs[3].clone(),
                    sharpness: xs[4].clone(),
                };
                att_gen_params_grad(&support, &base, &p).unwrap()
            }),
        )
    }));
    out
}
