//! Property checks shared by the proptest suite and the acceptance runner.
//! Each check returns a description of the first violation it finds.

use mlwc::composer::{combine, extend, BranchSupport, NovelNorm};
use mlwc::heads::{cosine_logits, cosine_similarity, HeadConfig, Level};
use mlwc::losses::cosine_softmax_loss;
use mlwc::network::Network;
use mlwc::rng::{rng_stream, RngStream};
use mlwc::tensor::{concat, l2_normalize, softmax_temp, split, Tensor, NORM_FLOOR};
use mlwc::weightgen::{argmax, att_gen, attention, avg_gen, is_distribution, AttGenParams, Generator, SupportSet};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{rand_tensor, tiny_backbone_config};

pub type Check = Result<(), String>;

/// Float noise allowed where a property holds exactly in real arithmetic.
pub const EXACT: f64 = 1e-12;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn unit_norm(v: &Tensor) -> Check {
    let out = l2_normalize(v, NORM_FLOOR).into_value();
    let n = norm(out.data());
    if v.norm() >= NORM_FLOOR {
        ensure((n - 1.0).abs() <= EXACT, || format!("norm {n} for input norm {}", v.norm()))
    } else {
        ensure(n <= 1.0, || format!("norm {n} above 1 below the floor"))
    }
}

pub fn softmax_distribution(logits: &Tensor, t: f64, shift: f64) -> Check {
    let p = softmax_temp(logits, t).map_err(|e| e.to_string())?.into_value();
    let sum: f64 = p.data().iter().sum();
    ensure(p.data().iter().all(|&x| x >= 0.0), || format!("negative entry in {:?}", p.data()))?;
    ensure((sum - 1.0).abs() <= EXACT, || format!("sum {sum}"))?;
    let q = softmax_temp(&logits.map(|x| x + shift), t).map_err(|e| e.to_string())?.into_value();
    let d = max_abs_diff(p.data(), q.data());
    ensure(d <= EXACT, || format!("shift by {shift} moved probabilities by {d:e}"))
}

pub fn concat_split_exact(parts: &[Tensor]) -> Check {
    let widths: Vec<usize> = parts.iter().map(|p| p.dim(1)).collect();
    let joined = concat(parts).map_err(|e| e.to_string())?.into_value();
    let back = split(&joined, &widths).map_err(|e| e.to_string())?;
    ensure(back.as_slice() == parts, || "split did not recover the parts".into())
}

/// With `lambda = 0` the loss ignores positive rescaling of feature rows and
/// weight columns.
pub fn cosine_loss_rescaling(
    features: &Tensor,
    weights: &Tensor,
    scale: f64,
    labels: &[usize],
    row_factors: &[f64],
    col_factors: &[f64],
) -> Check {
    let s = Tensor::scalar(scale);
    let base = cosine_softmax_loss(features, weights, &s, labels, 0.0).map_err(|e| e.to_string())?;
    let mut f = features.clone();
    for (i, a) in row_factors.iter().enumerate() {
        f.row_mut(i).iter_mut().for_each(|v| *v *= a);
    }
    let mut w = weights.clone();
    let c = w.dim(1);
    for (k, v) in w.data_mut().iter_mut().enumerate() {
        *v *= col_factors[k % c];
    }
    let moved = cosine_softmax_loss(&f, &w, &s, labels, 0.0).map_err(|e| e.to_string())?;
    let (a, b) = (base.value.item(), moved.value.item());
    ensure((a - b).abs() <= EXACT * a.abs().max(1.0), || format!("loss {a} became {b}"))
}

/// The predicted class does not depend on the value of `s > 0`.
pub fn scale_argmax(features: &Tensor, weights: &Tensor, s1: f64, s2: f64) -> Check {
    let a = cosine_logits(features, weights, &Tensor::scalar(s1)).map_err(|e| e.to_string())?.into_value();
    let b = cosine_logits(features, weights, &Tensor::scalar(s2)).map_err(|e| e.to_string())?.into_value();
    for i in 0..a.dim(0) {
        ensure(argmax(a.row(i)) == argmax(b.row(i)), || format!("row {i}: argmax differs for s={s1} and s={s2}"))?;
    }
    Ok(())
}

pub fn tiny_network(num_classes: usize, embed_dim: usize, seed: u64) -> Network {
    let backbone = tiny_backbone_config();
    let heads = HeadConfig { embed_dim, mid_channels: 2, relation_hidden: 4, ..HeadConfig::default() };
    Network::init(&backbone, &heads, num_classes, &mut rng_stream(seed, 0)).expect("valid tiny network")
}

/// Combined scores equal the sum of per-branch cosine similarities, for base
/// columns and for AvgGen-built unseen columns. Base columns have norm √L.
pub fn combined_additivity(net: &Network, feats: &[Tensor; 3], support: &BranchSupport, levels: &[Level]) -> Check {
    let model = combine(net, levels).map_err(|e| e.to_string())?;
    let extended = extend(&model, support, Generator::Avg, None, NovelNorm::PerBranch).map_err(|e| e.to_string())?;
    ensure(extended.base == model.base, || "extension changed base columns".into())?;
    let root = (levels.len() as f64).sqrt();
    let w = extended.weights();
    for j in 0..w.dim(1) {
        let col: Vec<f64> = (0..w.dim(0)).map(|r| w.data()[r * w.dim(1) + j]).collect();
        let n = norm(&col);
        ensure((n - root).abs() <= EXACT, || format!("column {j} has norm {n}, expected {root}"))?;
    }
    let combined = extended.scores(&extended.features(feats).map_err(|e| e.to_string())?);
    let n = feats[0].dim(0);
    let mut expected = Tensor::zeros(&[n, w.dim(1)]);
    for l in levels {
        let gen = SupportSet::new(support.by_level[l.index()].clone(), support.names.clone()).map_err(|e| e.to_string())?;
        let cols = concat(&[net.branch(*l).weights.clone(), avg_gen(&gen).map_err(|e| e.to_string())?])
            .map_err(|e| e.to_string())?
            .into_value();
        let cos = cosine_similarity(&feats[l.index()], &cols).map_err(|e| e.to_string())?.into_value();
        expected.add_assign(&cos);
    }
    let d = max_abs_diff(combined.data(), expected.data());
    ensure(d <= EXACT, || format!("combined scores differ from the branch sum by {d:e}"))
}

/// Zeroing every other branch's features leaves the remaining branch's
/// ranking.
pub fn single_branch_argmax(net: &Network, feats: &[Tensor; 3], keep: Level) -> Check {
    let model = combine(net, &Level::ALL).map_err(|e| e.to_string())?;
    let masked: [Tensor; 3] = Level::ALL.map(|l| {
        if l == keep {
            feats[l.index()].clone()
        } else {
            Tensor::zeros(feats[l.index()].shape())
        }
    });
    let combined = model.scores(&model.features(&masked).map_err(|e| e.to_string())?);
    let alone = cosine_similarity(&feats[keep.index()], &net.branch(keep).weights)
        .map_err(|e| e.to_string())?
        .into_value();
    for i in 0..combined.dim(0) {
        ensure(argmax(combined.row(i)) == argmax(alone.row(i)), || format!("row {i} ranks differently"))?;
    }
    Ok(())
}

/// Normalize, average, normalize: coded independently of the library.
pub fn avg_oracle(f: &Tensor) -> Vec<f64> {
    let d = f.dim(1);
    let mut mean = vec![0.0; d];
    for i in 0..f.dim(0) {
        let row = f.row(i);
        let n = norm(row);
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let k = f.dim(0) as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let n = norm(&mean);
    mean.iter().map(|m| m / n).collect()
}

fn column(m: &Tensor, j: usize) -> Vec<f64> {
    (0..m.dim(0)).map(|r| m.data()[r * m.dim(1) + j]).collect()
}

fn support_of(features: Vec<Tensor>) -> Result<SupportSet, String> {
    let names = (0..features.len()).map(|c| format!("class{c}")).collect();
    SupportSet::new(features, names).map_err(|e| e.to_string())
}

pub fn avg_gen_single_shot(f: &Tensor) -> Check {
    let w = avg_gen(&support_of(vec![f.clone()])?).map_err(|e| e.to_string())?;
    let n = norm(f.data());
    let expected: Vec<f64> = f.data().iter().map(|v| v / n).collect();
    let d = max_abs_diff(&column(&w, 0), &expected);
    ensure(d <= EXACT, || format!("single-shot weight differs from the normalized feature by {d:e}"))
}

/// Matches the oracle, has unit columns, and ignores sample order and
/// positive rescaling of individual samples.
pub fn avg_gen_properties(features: &[Tensor], order_seed: u64, factors: &[f64]) -> Check {
    let support = support_of(features.to_vec())?;
    let w = avg_gen(&support).map_err(|e| e.to_string())?;
    let mut rng = rng_stream(order_seed, 0);
    let mut k = 0;
    let mut shuffled = Vec::with_capacity(features.len());
    let mut rescaled = Vec::with_capacity(features.len());
    for (c, f) in features.iter().enumerate() {
        let col = column(&w, c);
        let d = max_abs_diff(&col, &avg_oracle(f));
        ensure(d <= EXACT, || format!("class {c}: oracle differs by {d:e}"))?;
        ensure((norm(&col) - 1.0).abs() <= EXACT, || format!("class {c}: norm {}", norm(&col)))?;
        let mut rows: Vec<usize> = (0..f.dim(0)).collect();
        rows.shuffle(&mut rng);
        shuffled.push(f.select_rows(&rows));
        let mut g = f.clone();
        for i in 0..g.dim(0) {
            let a = factors[k % factors.len()];
            k += 1;
            g.row_mut(i).iter_mut().for_each(|v| *v *= a);
        }
        rescaled.push(g);
    }
    for (name, variant) in [("permuted", shuffled), ("rescaled", rescaled)] {
        let v = avg_gen(&support_of(variant)?).map_err(|e| e.to_string())?;
        let d = max_abs_diff(v.data(), w.data());
        ensure(d <= EXACT, || format!("{name} support moved the weights by {d:e}"))?;
    }
    Ok(())
}

/// Attention rows are probability vectors; a zero attention gate with unit
/// average gate reproduces the averaged prototype.
pub fn attention_properties(support: &SupportSet, base: &Tensor, params: &AttGenParams) -> Check {
    let out = att_gen(support, base, params).map_err(|e| e.to_string())?;
    for (c, a) in out.attention.iter().enumerate() {
        ensure(is_distribution(a), || format!("class {c}: attention rows are not distributions"))?;
    }
    let gated = AttGenParams {
        phi_avg: Tensor::full(params.phi_avg.shape(), 1.0),
        phi_att: Tensor::zeros(params.phi_att.shape()),
        ..params.clone()
    };
    let plain = att_gen(support, base, &gated).map_err(|e| e.to_string())?;
    let avg = avg_gen(support).map_err(|e| e.to_string())?;
    let d = max_abs_diff(plain.unnormalized.data(), avg.data());
    ensure(d == 0.0, || format!("zero attention gate differs from the averaged path by {d:e}"))?;
    let z = mlwc::tensor::l2_normalize_rows(&support.features[0], NORM_FLOOR).into_value();
    ensure(is_distribution(&attention(&z, params).map_err(|e| e.to_string())?), || {
        "direct attention rows are not distributions".into()
    })
}

/// Random gate and query parameters around the default initialization.
pub fn random_attgen(base: &Tensor, rng: &mut RngStream) -> AttGenParams {
    let d = base.dim(0);
    let mut p = AttGenParams::init(base, rng.random_range(0.5..20.0));
    p.phi_avg = rand_tensor(&[d], rng);
    p.phi_att = rand_tensor(&[d], rng);
    p.phi_q = rand_tensor(&[d, d], rng);
    p.keys = rand_tensor(p.keys.shape(), rng);
    p
}

fn random_labels(n: usize, c: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

fn factors(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| 10f64.powf(rng.random_range(-3.0..3.0))).collect()
}

fn random_support(classes: usize, max_k: usize, d: usize, rng: &mut RngStream) -> Vec<Tensor> {
    (0..classes).map(|_| rand_tensor(&[rng.random_range(1..=max_k), d], rng)).collect()
}

pub struct PropertyResult {
    pub name: &'static str,
    pub cases: usize,
    pub failure: Option<String>,
}

fn run(name: &'static str, cases: usize, seed: u64, check: impl Fn(&mut RngStream) -> Check) -> PropertyResult {
    let failure = (0..cases).find_map(|i| check(&mut rng_stream(seed, i as u64)).err().map(|e| format!("case {i}: {e}")));
    PropertyResult { name, cases, failure }
}

/// Seeded random cases of every normalization and additivity property.
pub fn normalization_suite(cases: usize) -> Vec<PropertyResult> {
    vec![
        run("l2 normalize gives unit norm", cases, 101, |rng| {
            let d = rng.random_range(1..12);
            let scale = 10f64.powf(rng.random_range(-6.0..6.0));
            unit_norm(&rand_tensor(&[d], rng).scaled(scale))
        }),
        run("softmax is a shift-invariant distribution", cases, 102, |rng| {
            let c = rng.random_range(1..10);
            let t = rng.random_range(0.1..10.0);
            let shift = rng.random_range(-50.0..50.0);
            softmax_distribution(&rand_tensor(&[c], rng).scaled(20.0), t, shift)
        }),
        run("concat then split is bit-exact", cases, 103, |rng| {
            let n = rng.random_range(1..4);
            let parts: Vec<Tensor> = (0..rng.random_range(1..5)).map(|_| rand_tensor(&[n, rng.random_range(1..5)], rng)).collect();
            concat_split_exact(&parts)
        }),
        run("cosine loss ignores rescaling", cases, 104, |rng| {
            let (n, d, c) = (rng.random_range(1..6), rng.random_range(2..8), rng.random_range(2..6));
            let f = rand_tensor(&[n, d], rng);
            let w = rand_tensor(&[d, c], rng);
            let y = random_labels(n, c, rng);
            let (rf, cf) = (factors(n, rng), factors(c, rng));
            cosine_loss_rescaling(&f, &w, rng.random_range(0.5..20.0), &y, &rf, &cf)
        }),
        run("argmax ignores the scale factor", cases, 105, |rng| {
            let (n, d, c) = (rng.random_range(1..6), rng.random_range(2..8), rng.random_range(2..6));
            let (s1, s2) = (10f64.powf(rng.random_range(-2.0..2.0)), 10f64.powf(rng.random_range(-2.0..2.0)));
            scale_argmax(&rand_tensor(&[n, d], rng), &rand_tensor(&[d, c], rng), s1, s2)
        }),
        run("combined scores add up per branch", cases, 106, |rng| {
            let (d, cb, cn, n) = (rng.random_range(2..7), rng.random_range(2..5), rng.random_range(1..4), rng.random_range(1..5));
            let mut net = tiny_network(cb, d, rng.random());
            for l in Level::ALL {
                net.branch_mut(l).weights = rand_tensor(&[d, cb], rng);
            }
            let feats = [0, 1, 2].map(|_| rand_tensor(&[n, d], rng));
            let support = BranchSupport {
                by_level: [0, 1, 2].map(|_| random_support(cn, 3, d, rng)),
                names: (0..cn).map(|c| format!("novel{c}")).collect(),
            };
            let mut levels = Level::ALL.to_vec();
            levels.shuffle(rng);
            levels.truncate(rng.random_range(1..=3));
            combined_additivity(&net, &feats, &support, &levels)?;
            single_branch_argmax(&net, &feats, Level::ALL[rng.random_range(0..3)])
        }),
        run("single-shot AvgGen is the normalized feature", cases, 107, |rng| {
            let d = rng.random_range(1..10);
            avg_gen_single_shot(&rand_tensor(&[1, d], rng))
        }),
        run("AvgGen matches the oracle, order and scale free", cases, 108, |rng| {
            let d = rng.random_range(2..10);
            let feats = random_support(rng.random_range(1..5), 6, d, rng);
            let f = factors(7, rng);
            avg_gen_properties(&feats, rng.random(), &f)
        }),
        run("attention rows are distributions", cases, 109, |rng| {
            let (d, cb) = (rng.random_range(2..7), rng.random_range(1..6));
            let base = mlwc::weightgen::normalize_columns(&rand_tensor(&[d, cb], rng));
            let support = support_of(random_support(rng.random_range(1..4), 4, d, rng))?;
            let params = random_attgen(&base, rng);
            attention_properties(&support, &base, &params)
        }),
    ]
}
