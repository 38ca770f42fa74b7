//! Combining branches into one cosine classifier, extending it with
//! generated weights for unseen classes, and the repeated-episode
//! evaluation harness.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use rand::Rng;

use crate::data::{random_crop, sample_episode, DataError, DatasetPair, LabeledDataset, CROP_FRACTION};
use crate::heads::Level;
use crate::network::Network;
use crate::rng::{rng_stream, RngStream};
use crate::tensor::{concat, gemm, l2_normalize_rows, Tensor, TensorError, NORM_FLOOR};
use crate::weightgen::{
    argmax, att_gen, att_gen_train, avg_gen, normalize_columns, AttGenConfig, AttGenParams, Generator, SupportSet,
    WeightGenError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label spaces differ: {0}")]
    LabelSpace(String),
    #[error("{0}")]
    Config(String),
    #[error("the attention generator was requested but no parameters are loaded")]
    MissingAttGen,
    #[error(transparent)]
    WeightGen(#[from] WeightGenError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How a multi-level unseen-class weight is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NovelNorm {
    /// Each branch block is a unit vector, as for base columns.
    PerBranch,
    /// The concatenated prototype is normalized as a whole.
    Whole,
}

impl FromStr for NovelNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-branch" => Ok(NovelNorm::PerBranch),
            "whole" => Ok(NovelNorm::Whole),
            _ => Err(format!("unknown novel norm `{s}` (expected per-branch or whole)")),
        }
    }
}

impl fmt::Display for NovelNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NovelNorm::PerBranch => "per-branch",
            NovelNorm::Whole => "whole",
        })
    }
}

/// Feature space the attention generator works in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttScope {
    PerBranch,
    Combined,
}

impl FromStr for AttScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-branch" => Ok(AttScope::PerBranch),
            "combined" => Ok(AttScope::Combined),
            _ => Err(format!("unknown attention scope `{s}` (expected per-branch or combined)")),
        }
    }
}

impl fmt::Display for AttScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttScope::PerBranch => "per-branch",
            AttScope::Combined => "combined",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttGenSet {
    /// One generator per level, in level order.
    PerBranch(Box<[AttGenParams; 3]>),
    /// One generator over the concatenated three-level features.
    Combined(AttGenParams),
}

/// Per-branch-normalized concatenation of the selected levels.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedModel {
    pub levels: Vec<Level>,
    pub embed_dim: usize,
    /// `[levels·d, c_b]`; every column has one unit block per level.
    pub base: Tensor,
    /// `[levels·d, c_n]` once extended.
    pub novel: Option<Tensor>,
}

/// Stacks `[d, c]` blocks vertically.
fn vstack(blocks: &[Tensor]) -> Result<Tensor, TensorError> {
    let rows: Vec<Tensor> = blocks.iter().map(Tensor::transpose).collect();
    Ok(concat(&rows)?.into_value().transpose())
}

pub fn combine(net: &Network, levels: &[Level]) -> Result<CombinedModel, EvalError> {
    if levels.is_empty() {
        return Err(EvalError::Config("at least one level is required".into()));
    }
    let c = net.branch(levels[0]).num_classes();
    if let Some(l) = levels.iter().find(|l| net.branch(**l).num_classes() != c) {
        return Err(EvalError::LabelSpace(format!(
            "{l} branch has {} classes, {} has {c}",
            net.branch(*l).num_classes(),
            levels[0]
        )));
    }
    let blocks: Vec<Tensor> = levels.iter().map(|l| normalize_columns(&net.branch(*l).weights)).collect();
    Ok(CombinedModel {
        levels: levels.to_vec(),
        embed_dim: net.embed_dim(),
        base: vstack(&blocks)?,
        novel: None,
    })
}

impl CombinedModel {
    pub fn dim(&self) -> usize {
        self.levels.len() * self.embed_dim
    }

    pub fn num_base(&self) -> usize {
        self.base.dim(1)
    }

    pub fn num_novel(&self) -> usize {
        self.novel.as_ref().map_or(0, |n| n.dim(1))
    }

    /// Rows of the base matrix belonging to `level`, as a `[d, c_b]` block.
    pub fn base_block(&self, level: Level) -> Option<Tensor> {
        let pos = self.levels.iter().position(|l| *l == level)?;
        let d = self.embed_dim;
        let c = self.num_base();
        let data = self.base.data()[pos * d * c..(pos + 1) * d * c].to_vec();
        Some(Tensor::new(vec![d, c], data).expect("shape"))
    }

    /// Concatenation of the normalized features of the model's levels.
    pub fn features(&self, branch_features: &[Tensor; 3]) -> Result<Tensor, TensorError> {
        let parts: Vec<Tensor> = self
            .levels
            .iter()
            .map(|l| l2_normalize_rows(&branch_features[l.index()], NORM_FLOOR).into_value())
            .collect();
        Ok(concat(&parts)?.into_value())
    }

    /// `[base | novel]` columns.
    pub fn weights(&self) -> Tensor {
        match &self.novel {
            None => self.base.clone(),
            Some(n) => concat(&[self.base.clone(), n.clone()]).expect("same height").into_value(),
        }
    }

    /// Scores of combined features `[N, levels·d]` against every column.
    pub fn scores(&self, combined: &Tensor) -> Tensor {
        let w = self.weights();
        let (n, k, c) = (combined.dim(0), combined.dim(1), w.dim(1));
        let mut out = vec![0.0; n * c];
        gemm(n, k, c, (combined.data(), k as isize, 1), (w.data(), c as isize, 1), 0.0, &mut out);
        Tensor::new(vec![n, c], out).expect("shape")
    }
}

/// Support features of the unseen classes for each level:
/// `by_level[l][c]` is `[k, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSupport {
    pub by_level: [Vec<Tensor>; 3],
    pub names: Vec<String>,
}

impl BranchSupport {
    fn level(&self, level: Level) -> Result<SupportSet, WeightGenError> {
        SupportSet::new(self.by_level[level.index()].clone(), self.names.clone())
    }

    /// Per class: combined features of the levels, `[k, levels·d]`.
    fn combined(&self, model: &CombinedModel) -> Result<SupportSet, EvalError> {
        let mut blocks = Vec::with_capacity(self.names.len());
        for c in 0..self.names.len() {
            let parts: Vec<Tensor> = model
                .levels
                .iter()
                .map(|l| l2_normalize_rows(&self.by_level[l.index()][c], NORM_FLOOR).into_value())
                .collect();
            blocks.push(concat(&parts)?.into_value());
        }
        Ok(SupportSet::new(blocks, self.names.clone())?)
    }
}

/// Adds one generated column per unseen class. Base columns are untouched.
pub fn extend(
    model: &CombinedModel,
    support: &BranchSupport,
    generator: Generator,
    attgen: Option<&AttGenSet>,
    novel_norm: NovelNorm,
) -> Result<CombinedModel, EvalError> {
    let novel = match (generator, attgen) {
        (Generator::Avg, _) => match novel_norm {
            NovelNorm::PerBranch => {
                let blocks = model
                    .levels
                    .iter()
                    .map(|l| avg_gen(&support.level(*l)?))
                    .collect::<Result<Vec<_>, _>>()?;
                vstack(&blocks)?
            }
            NovelNorm::Whole => avg_gen(&support.combined(model)?)?,
        },
        (Generator::Att, None) => return Err(EvalError::MissingAttGen),
        (Generator::Att, Some(AttGenSet::PerBranch(params))) => {
            let mut blocks = Vec::with_capacity(model.levels.len());
            for l in &model.levels {
                let base = model.base_block(*l).expect("model level");
                blocks.push(att_gen(&support.level(*l)?, &base, &params[l.index()])?.weights);
            }
            let stacked = vstack(&blocks)?;
            match novel_norm {
                NovelNorm::PerBranch => stacked,
                NovelNorm::Whole => normalize_columns(&stacked),
            }
        }
        (Generator::Att, Some(AttGenSet::Combined(params))) => {
            let out = att_gen(&support.combined(model)?, &model.base, params)?.weights;
            match novel_norm {
                NovelNorm::PerBranch => out.scaled((model.levels.len() as f64).sqrt()),
                NovelNorm::Whole => out,
            }
        }
    };
    Ok(CombinedModel {
        novel: Some(novel),
        ..model.clone()
    })
}

/// Accuracies (percent) of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpisodeAccuracy {
    pub novel_novel: f64,
    pub novel_all: f64,
    pub all: f64,
}

/// Whether `target` is among the `top_k` highest entries of `row`, ties
/// broken toward lower indices.
pub fn in_top_k(row: &[f64], target: usize, top_k: usize) -> bool {
    let t = row[target];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count();
    ahead < top_k
}

/// Scores an extended model on labeled queries. Unseen-class labels index
/// the unseen label space; in the joint space they follow the base classes.
pub fn episode_accuracy(
    model: &CombinedModel,
    novel_queries: &Tensor,
    novel_labels: &[usize],
    base_queries: &Tensor,
    base_labels: &[usize],
    top_k: usize,
) -> EpisodeAccuracy {
    let cb = model.num_base();
    let ns = model.scores(novel_queries);
    let bs = model.scores(base_queries);
    let mut nn = 0;
    let mut na = 0;
    for (i, &y) in novel_labels.iter().enumerate() {
        let row = ns.row(i);
        nn += in_top_k(&row[cb..], y, top_k) as usize;
        na += in_top_k(row, cb + y, top_k) as usize;
    }
    let ba = base_labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| in_top_k(bs.row(*i), y, top_k))
        .count();
    let pct = |a: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * a as f64 / n as f64 };
    EpisodeAccuracy {
        novel_novel: pct(nn, novel_labels.len()),
        novel_all: pct(na, novel_labels.len()),
        all: pct(na + ba, novel_labels.len() + base_labels.len()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Metric {
    #[serde(rename = "novel/novel")]
    NovelNovel,
    #[serde(rename = "novel/all")]
    NovelAll,
    #[serde(rename = "all")]
    All,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::NovelNovel, Metric::NovelAll, Metric::All];

    pub fn name(self) -> &'static str {
        match self {
            Metric::NovelNovel => "novel/novel",
            Metric::NovelAll => "novel/all",
            Metric::All => "all",
        }
    }

    fn pick(self, a: &EpisodeAccuracy) -> f64 {
        match self {
            Metric::NovelNovel => a.novel_novel,
            Metric::NovelAll => a.novel_all,
            Metric::All => a.all,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: Metric,
    pub shots: usize,
    pub mean: f64,
    /// Half-width of the 95% interval, `1.96 · stderr`.
    pub ci: f64,
    pub trials: usize,
    /// Set when a single trial makes the interval meaningless.
    pub ci_degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub top_k: usize,
    pub rows: Vec<MetricRow>,
    #[serde(skip)]
    pub episodes: Vec<(usize, Vec<EpisodeAccuracy>)>,
}

/// Mean and `1.96 · s / √n` with the sample standard deviation.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

impl MetricReport {
    pub fn from_episodes(top_k: usize, episodes: Vec<(usize, Vec<EpisodeAccuracy>)>) -> Self {
        let mut rows = Vec::new();
        for (shots, eps) in &episodes {
            for m in Metric::ALL {
                let vals: Vec<f64> = eps.iter().map(|a| m.pick(a)).collect();
                let (mean, ci) = mean_ci(&vals);
                rows.push(MetricRow {
                    metric: m,
                    shots: *shots,
                    mean,
                    ci,
                    trials: vals.len(),
                    ci_degenerate: vals.len() < 2,
                });
            }
        }
        MetricReport { top_k, rows, episodes }
    }

    pub fn row(&self, metric: Metric, shots: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric && r.shots == shots)
    }

    pub const HEADER: &'static str = "metric\tshots\tmean\tci\ttrials";

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{}", tsv_line(r));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn tsv_line(r: &MetricRow) -> String {
    format!("{}\t{}\t{:.4}\t{:.4}\t{}", r.metric.name(), r.shots, r.mean, r.ci, r.trials)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub shots: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub generator: Generator,
    pub crops: usize,
    pub novel_norm: NovelNorm,
    pub top_k: usize,
    pub levels: Vec<Level>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            shots: vec![1, 2, 5, 10, 20],
            trials: 100,
            seed: 3,
            generator: Generator::Avg,
            crops: 1,
            novel_norm: NovelNorm::PerBranch,
            top_k: 1,
            levels: Level::ALL.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.trials == 0 {
            return Err("eval.trials must be at least 1".into());
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err("eval.shots must list positive shot counts".into());
        }
        if self.crops != 1 && self.crops != 5 {
            return Err(format!("eval.crops must be 1 or 5, got {}", self.crops));
        }
        if self.top_k == 0 {
            return Err("eval.top_k must be at least 1".into());
        }
        if self.levels.is_empty() {
            return Err("eval.levels must name at least one level".into());
        }
        Ok(())
    }
}

/// Branch features of every split used during evaluation.
pub struct EmbeddedPair {
    pub base_test: [Tensor; 3],
    pub novel_pool: [Tensor; 3],
    pub novel_test: [Tensor; 3],
}

impl EmbeddedPair {
    pub fn new(net: &Network, pair: &DatasetPair) -> Result<Self, TensorError> {
        Ok(EmbeddedPair {
            base_test: net.embed(&pair.base_test)?,
            novel_pool: net.embed(&pair.novel_train_pool)?,
            novel_test: net.embed(&pair.novel_test)?,
        })
    }
}

/// Support features of an episode, averaging `crops` random crops per
/// image when `crops > 1`.
fn episode_support(
    net: &Network,
    pair: &DatasetPair,
    embedded: &EmbeddedPair,
    support: &[Vec<usize>],
    crops: usize,
    rng: &mut RngStream,
) -> Result<BranchSupport, EvalError> {
    let mut by_level: [Vec<Tensor>; 3] = Default::default();
    for idx in support {
        let feats: [Tensor; 3] = if crops == 1 {
            embedded.novel_pool.clone().map(|f| f.select_rows(idx))
        } else {
            let mut images = Vec::with_capacity(idx.len() * crops);
            for &i in idx {
                for _ in 0..crops {
                    images.push(random_crop(&pair.novel_train_pool.images[i], CROP_FRACTION, rng));
                }
            }
            let refs: Vec<&Tensor> = images.iter().collect();
            let all = net.embed_images(&refs)?;
            all.map(|f| average_groups(&f, crops))
        };
        for (slot, f) in by_level.iter_mut().zip(feats) {
            slot.push(f);
        }
    }
    Ok(BranchSupport {
        by_level,
        names: pair.novel_train_pool.label_space.clone(),
    })
}

/// Means of consecutive groups of `g` rows.
fn average_groups(f: &Tensor, g: usize) -> Tensor {
    let (n, d) = (f.dim(0) / g, f.dim(1));
    let mut out = vec![0.0; n * d];
    for i in 0..f.dim(0) {
        for (o, v) in out[(i / g) * d..(i / g + 1) * d].iter_mut().zip(f.row(i)) {
            *o += v / g as f64;
        }
    }
    Tensor::new(vec![n, d], out).expect("shape")
}

/// Base-test accuracy (percent) of one branch when its classifier columns
/// are replaced by the normalized features of one random training sample per
/// class, averaged over `repeats` draws.
pub fn sample_classifier_accuracy(
    net: &Network,
    level: Level,
    train: &LabeledDataset,
    test: &LabeledDataset,
    repeats: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if repeats == 0 {
        return Err(EvalError::Config("repeats must be at least 1".into()));
    }
    if train.label_space != test.label_space {
        return Err(EvalError::LabelSpace("train and test label spaces differ".into()));
    }
    let classes = train.label_space.len();
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in train.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if by_class.iter().any(|v| v.is_empty()) {
        return Err(EvalError::Config("every class needs a training sample".into()));
    }
    let train_f = l2_normalize_rows(&net.embed(train)?[level.index()], NORM_FLOOR).into_value();
    let test_f = l2_normalize_rows(&net.embed(test)?[level.index()], NORM_FLOOR).into_value();
    let (n, d) = (test_f.dim(0), test_f.dim(1));
    let mut total = 0.0;
    for r in 0..repeats {
        let mut rng = rng_stream(seed, r as u64);
        let picks: Vec<usize> = by_class.iter().map(|v| v[rng.random_range(0..v.len())]).collect();
        let w = train_f.select_rows(&picks);
        let mut scores = vec![0.0; n * classes];
        gemm(n, d, classes, (test_f.data(), d as isize, 1), (w.data(), 1, d as isize), 0.0, &mut scores);
        let correct = scores
            .chunks(classes)
            .zip(&test.labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        total += 100.0 * correct as f64 / n as f64;
    }
    Ok(total / repeats as f64)
}

/// Per-trial random stream: independent of the order trials run in.
pub fn trial_stream(seed: u64, shots: usize, trial: usize) -> RngStream {
    rng_stream(seed, ((shots as u64) << 32) | trial as u64)
}

/// Repeated-episode evaluation of `net` with the configured levels.
pub fn evaluate(
    net: &Network,
    pair: &DatasetPair,
    attgen: Option<&AttGenSet>,
    cfg: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    cfg.validate().map_err(EvalError::Config)?;
    let embedded = EmbeddedPair::new(net, pair)?;
    evaluate_embedded(net, pair, &embedded, attgen, cfg)
}

pub fn evaluate_embedded(
    net: &Network,
    pair: &DatasetPair,
    embedded: &EmbeddedPair,
    attgen: Option<&AttGenSet>,
    cfg: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    cfg.validate().map_err(EvalError::Config)?;
    let model = combine(net, &cfg.levels)?;
    let qn = model.features(&embedded.novel_test)?;
    let qb = model.features(&embedded.base_test)?;
    let mut episodes = Vec::with_capacity(cfg.shots.len());
    for &k in &cfg.shots {
        let mut accs = Vec::with_capacity(cfg.trials);
        for t in 0..cfg.trials {
            let mut rng = trial_stream(cfg.seed, k, t);
            let ep = sample_episode(pair, k, &mut rng)?;
            let support = episode_support(net, pair, embedded, &ep.support, cfg.crops, &mut rng)?;
            let extended = extend(&model, &support, cfg.generator, attgen, cfg.novel_norm)?;
            let acc = episode_accuracy(
                &extended,
                &qn.select_rows(&ep.novel_queries),
                &pair.novel_test.labels_of(&ep.novel_queries),
                &qb.select_rows(&ep.base_queries),
                &pair.base_test.labels_of(&ep.base_queries),
                cfg.top_k,
            );
            assert!(
                acc.novel_novel >= acc.novel_all,
                "restricting the label space lowered accuracy in trial {t}"
            );
            accs.push(acc);
        }
        episodes.push((k, accs));
    }
    Ok(MetricReport::from_episodes(cfg.top_k, episodes))
}

/// Trains attention generators on the base-train features of `net`.
pub fn train_attgen(
    net: &Network,
    pair: &DatasetPair,
    scope: AttScope,
    cfg: &AttGenConfig,
) -> Result<AttGenSet, EvalError> {
    let feats = net.embed(&pair.base_train)?;
    let labels = &pair.base_train.labels;
    match scope {
        AttScope::PerBranch => {
            let mut out = Vec::with_capacity(3);
            for l in Level::ALL {
                let w = normalize_columns(&net.branch(l).weights);
                let init = AttGenParams::init(&w, cfg.init_sharpness);
                out.push(att_gen_train(&feats[l.index()], labels, &w, init, cfg)?);
            }
            let arr: [AttGenParams; 3] = out.try_into().expect("three levels");
            Ok(AttGenSet::PerBranch(Box::new(arr)))
        }
        AttScope::Combined => {
            let model = combine(net, &Level::ALL)?;
            let fc = model.features(&feats)?;
            let init = AttGenParams::init(&model.base, cfg.init_sharpness);
            Ok(AttGenSet::Combined(att_gen_train(&fc, labels, &model.base, init, cfg)?))
        }
    }
}

/// A row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationRow {
    /// High level only, trained without the weight-centric stage.
    Baseline,
    HighWc,
    HighWcMid,
    HighWcMidRelation,
    Mid,
    High,
    Relation,
    MultiLevel,
}

impl AblationRow {
    pub const ALL: [AblationRow; 8] = [
        AblationRow::Baseline,
        AblationRow::HighWc,
        AblationRow::HighWcMid,
        AblationRow::HighWcMidRelation,
        AblationRow::Mid,
        AblationRow::High,
        AblationRow::Relation,
        AblationRow::MultiLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Baseline => "H(baseline)",
            AblationRow::HighWc => "H+WC",
            AblationRow::HighWcMid => "(H+WC)+M",
            AblationRow::HighWcMidRelation => "(H+WC+M)+R",
            AblationRow::Mid => "Mid-level",
            AblationRow::High => "High-level",
            AblationRow::Relation => "Relation-level",
            AblationRow::MultiLevel => "Multi-level",
        }
    }

    /// Whether the row uses the baseline model, and which levels it scores.
    pub fn wiring(self) -> (bool, Vec<Level>) {
        use Level::*;
        match self {
            AblationRow::Baseline => (true, vec![High]),
            AblationRow::HighWc => (false, vec![High]),
            AblationRow::HighWcMid => (false, vec![High, Mid]),
            AblationRow::HighWcMidRelation => (false, vec![High, Mid, Relation]),
            AblationRow::Mid => (false, vec![Mid]),
            AblationRow::High => (false, vec![High]),
            AblationRow::Relation => (false, vec![Relation]),
            AblationRow::MultiLevel => (false, Level::ALL.to_vec()),
        }
    }
}

impl FromStr for AblationRow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown ablation row `{s}`"))
    }
}

/// Evaluates every requested row. `baseline` is the model trained without
/// the weight-centric stage; `wc` the full model.
pub fn ablate(
    baseline: &Network,
    wc: &Network,
    pair: &DatasetPair,
    rows: &[AblationRow],
    cfg: &EvalConfig,
) -> Result<Vec<(AblationRow, MetricReport)>, EvalError> {
    let mut cache: [Option<EmbeddedPair>; 2] = [None, None];
    let mut out = Vec::with_capacity(rows.len());
    for &row in rows {
        let (use_base, levels) = row.wiring();
        let net = if use_base { baseline } else { wc };
        let slot = &mut cache[use_base as usize];
        if slot.is_none() {
            *slot = Some(EmbeddedPair::new(net, pair)?);
        }
        let row_cfg = EvalConfig {
            levels,
            ..cfg.clone()
        };
        let embedded = slot.as_ref().expect("filled");
        out.push((row, evaluate_embedded(net, pair, embedded, None, &row_cfg)?));
    }
    Ok(out)
}

pub fn ablation_tsv(table: &[(AblationRow, MetricReport)]) -> String {
    let mut out = format!("row\t{}\n", MetricReport::HEADER);
    for (row, rep) in table {
        for r in &rep.rows {
            let _ = writeln!(out, "{}\t{}", row.name(), tsv_line(r));
        }
    }
    out
}
