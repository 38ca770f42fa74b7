//! Brute-force re-scoring of evaluation episodes.

use mlwc::composer::{evaluate, trial_stream, EpisodeAccuracy, EvalConfig};
use mlwc::data::{sample_episode, synth_generate, DatasetPair, SynthSpec};
use mlwc::heads::Level;
use mlwc::network::Network;
use mlwc::tensor::Tensor;

use super::props::{avg_oracle, tiny_network};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the first largest score.
fn best(scores: &[f64]) -> usize {
    let mut b = 0;
    for (j, s) in scores.iter().enumerate() {
        if *s > scores[b] {
            b = j;
        }
    }
    b
}

fn pct(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Small pair with 20 queries per episode: 3 base and 2 unseen classes,
/// 4 test images each.
pub fn oracle_pair() -> DatasetPair {
    synth_generate(&SynthSpec {
        n_base_classes: 3,
        n_novel_classes: 2,
        samples_per_class: 3,
        test_per_class: 4,
        ..SynthSpec::default()
    })
    .expect("valid synthetic settings")
}

/// Top-1 accuracies of one episode, recomputed from raw branch features
/// with per-class loops.
pub fn oracle_accuracy(net: &Network, pair: &DatasetPair, levels: &[Level], shots: usize, seed: u64, trial: usize) -> EpisodeAccuracy {
    let ep = sample_episode(pair, shots, &mut trial_stream(seed, shots, trial)).expect("pool large enough");
    let pool = net.embed(&pair.novel_train_pool).expect("embed");
    let novel_test = net.embed(&pair.novel_test).expect("embed");
    let base_test = net.embed(&pair.base_test).expect("embed");
    let cb = pair.base_train.label_space.len();
    // columns[class] holds one unit block per level.
    let mut columns: Vec<Vec<Vec<f64>>> = Vec::new();
    for j in 0..cb {
        columns.push(
            levels
                .iter()
                .map(|l| {
                    let w = &net.branch(*l).weights;
                    unit(&(0..w.dim(0)).map(|r| w.data()[r * cb + j]).collect::<Vec<_>>())
                })
                .collect(),
        );
    }
    for support in &ep.support {
        columns.push(levels.iter().map(|l| avg_oracle(&pool[l.index()].select_rows(support))).collect());
    }
    let score = |feats: &[Tensor; 3], i: usize, class: usize| -> f64 {
        levels
            .iter()
            .enumerate()
            .map(|(p, l)| dot(&unit(feats[l.index()].row(i)), &columns[class][p]))
            .sum()
    };
    let (mut nn, mut na, mut ba) = (0, 0, 0);
    for &q in &ep.novel_queries {
        let y = pair.novel_test.labels[q];
        let all: Vec<f64> = (0..columns.len()).map(|c| score(&novel_test, q, c)).collect();
        nn += (best(&all[cb..]) == y) as usize;
        na += (best(&all) == cb + y) as usize;
    }
    for &q in &ep.base_queries {
        let all: Vec<f64> = (0..columns.len()).map(|c| score(&base_test, q, c)).collect();
        ba += (best(&all) == pair.base_test.labels[q]) as usize;
    }
    let (n, b) = (ep.novel_queries.len(), ep.base_queries.len());
    EpisodeAccuracy {
        novel_novel: pct(nn, n),
        novel_all: pct(na, n),
        all: pct(na + ba, n + b),
    }
}

pub struct OracleOutcome {
    pub episodes: usize,
    pub mismatches: Vec<String>,
    /// Episodes where restricting to the unseen labels lowered accuracy.
    pub restriction_violations: usize,
}

/// Evaluates `trials` episodes at each of `shots` with a randomly
/// initialized network and compares every episode with the oracle.
pub fn metric_oracle(shots: &[usize], trials: usize, net_seed: u64) -> OracleOutcome {
    let pair = oracle_pair();
    let net = tiny_network(pair.base_train.label_space.len(), 6, net_seed);
    let cfg = EvalConfig { shots: shots.to_vec(), trials, seed: net_seed, ..EvalConfig::default() };
    let report = evaluate(&net, &pair, None, &cfg).expect("evaluation");
    let mut outcome = OracleOutcome { episodes: 0, mismatches: Vec::new(), restriction_violations: 0 };
    for (k, accs) in &report.episodes {
        for (t, acc) in accs.iter().enumerate() {
            outcome.episodes += 1;
            let expected = oracle_accuracy(&net, &pair, &cfg.levels, *k, cfg.seed, t);
            if *acc != expected {
                outcome.mismatches.push(format!("k={k} trial {t}: {acc:?} vs oracle {expected:?}"));
            }
            if acc.novel_novel < acc.novel_all {
                outcome.restriction_violations += 1;
            }
        }
    }
    outcome
}
