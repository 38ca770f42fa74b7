//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::metric::metric_oracle;
use common::props::normalization_suite;
use common::{gradient_suite, GRAD_POINTS, GRAD_TOLERANCE};
use mlwc::checkpoint::{Checkpoint, StageTag};
use mlwc::composer::{ablate, evaluate, train_attgen, sample_classifier_accuracy, AblationRow, AttGenSet, AttScope, EvalConfig, Metric, MetricRow};
use mlwc::config::{parse_config, RunConfig};
use mlwc::data::{load_image_dir, synth_generate, write_image_dir, DatasetPair, MotifFamily};
use mlwc::heads::Level;
use mlwc::pipeline::{train_run, TrainRun};
use mlwc::trainer::centric_distance;
use mlwc::weightgen::{fake_novel_accuracy, normalize_columns};

type Outcome = Result<String, String>;

const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const SAMPLE_REPEATS: usize = 200;
const FAKE_EPISODES: usize = 200;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let cases = gradient_suite();
    let secs = start.elapsed().as_secs_f64();
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| c.points < GRAD_POINTS || !(c.worst <= GRAD_TOLERANCE))
        .map(|c| format!("{} ({} points, worst {:.2e})", c.name, c.points, c.worst))
        .collect();
    let worst = cases.iter().map(|c| c.worst).fold(0.0, f64::max);
    let detail = format!("{} operations x {GRAD_POINTS} points, worst {worst:.2e}, {secs:.1}s", cases.len());
    if !bad.is_empty() {
        Err(format!("{detail}; failing: {}", bad.join(", ")))
    } else if secs >= 60.0 {
        Err(format!("{detail}; over the 60s budget"))
    } else {
        Ok(detail)
    }
}

fn c2_normalization() -> Outcome {
    let results = normalization_suite(200);
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|f| format!("{}: {f}", r.name)))
        .collect();
    let cases: usize = results.iter().map(|r| r.cases).sum();
    if failed.is_empty() {
        Ok(format!("{} properties, {cases} cases", results.len()))
    } else {
        Err(failed.join("; "))
    }
}

fn c3_metric_oracle() -> Outcome {
    let outcome = metric_oracle(&[1, 2], 25, 4);
    if outcome.episodes != 50 {
        return Err(format!("ran {} episodes instead of 50", outcome.episodes));
    }
    if !outcome.mismatches.is_empty() {
        return Err(format!("{} mismatches, first: {}", outcome.mismatches.len(), outcome.mismatches[0]));
    }
    if outcome.restriction_violations > 0 {
        return Err(format!("novel/novel < novel/all on {} episodes", outcome.restriction_violations));
    }
    Ok("50 episodes match exactly, novel/novel >= novel/all on all".into())
}

fn seeded(seed: u64, family: MotifFamily) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.trainer.seed = seed;
    cfg.data.novel_family = family;
    cfg
}

fn ablation_eval(cfg: &RunConfig) -> EvalConfig {
    EvalConfig { shots: vec![1], trials: 100, ..cfg.eval.clone() }
}

fn c4_geometry(run: &TrainRun, pair: &DatasetPair) -> Outcome {
    let wc = run.stage2.as_ref().ok_or("stage 2 did not run")?;
    let before = centric_distance(&run.stage1, &pair.base_train, &run.frozen).map_err(err)?;
    let after = centric_distance(wc, &pair.base_train, &run.frozen).map_err(err)?;
    let acc = |net| sample_classifier_accuracy(net, Level::High, &pair.base_train, &pair.base_test, SAMPLE_REPEATS, 11);
    let (no_wc, with_wc) = (acc(&run.stage1).map_err(err)?, acc(wc).map_err(err)?);
    let dist: Vec<String> = Level::ALL
        .iter()
        .map(|l| format!("{} {:.4}->{:.4}", l.name(), before[l.index()], after[l.index()]))
        .collect();
    let detail = format!("distance {}; sample-as-classifier {no_wc:.2} -> {with_wc:.2}", dist.join(", "));
    let shrunk = (0..3).all(|i| after[i] < before[i]);
    if shrunk && with_wc >= no_wc + 2.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn row(table: &[(AblationRow, mlwc::composer::MetricReport)], r: AblationRow, m: Metric) -> MetricRow {
    let report = &table.iter().find(|(x, _)| *x == r).expect("row evaluated").1;
    report.row(m, 1).expect("k=1 evaluated").clone()
}

/// `a` beats `b` by at least one point with disjoint 95% intervals.
fn clear_gain(a: &MetricRow, b: &MetricRow) -> bool {
    a.mean >= b.mean + 1.0 && a.mean - a.ci > b.mean + b.ci
}

fn c5_ablation(runs: &[(u64, &TrainRun)], pair: &DatasetPair, cfg: &RunConfig) -> Outcome {
    let rows = [AblationRow::Baseline, AblationRow::HighWc, AblationRow::HighWcMid, AblationRow::HighWcMidRelation];
    let mut notes = Vec::new();
    let mut ok = true;
    for (seed, run) in runs {
        let wc = run.stage2.as_ref().ok_or("stage 2 did not run")?;
        let table = ablate(&run.stage1, wc, pair, &rows, &ablation_eval(cfg)).map_err(err)?;
        let [h, hwc, hwcm] = [rows[0], rows[1], rows[2]].map(|r| row(&table, r, Metric::NovelNovel));
        let (m_all, r_all) = (row(&table, rows[2], Metric::NovelAll), row(&table, rows[3], Metric::NovelAll));
        let pass = clear_gain(&hwc, &h) && clear_gain(&hwcm, &hwc) && r_all.mean >= m_all.mean;
        ok &= pass;
        notes.push(format!(
            "seed {seed}: {:.2}±{:.2} -> {:.2}±{:.2} -> {:.2}±{:.2}, novel/all {:.2} vs {:.2}{}",
            h.mean, h.ci, hwc.mean, hwc.ci, hwcm.mean, hwcm.ci, r_all.mean, m_all.mean,
            if pass { "" } else { " (miss)" }
        ));
    }
    if ok { Ok(notes.join("; ")) } else { Err(notes.join("; ")) }
}

fn c6_transfer() -> Outcome {
    let cfg = seeded(1, MotifFamily::Shifted);
    let pair = synth_generate(&cfg.data).map_err(err)?;
    let run = train_run(&cfg, &pair, true).map_err(err)?;
    let wc = run.stage2.as_ref().ok_or("stage 2 did not run")?;
    let table = ablate(&run.stage1, wc, &pair, &[AblationRow::Mid, AblationRow::Relation], &ablation_eval(&cfg)).map_err(err)?;
    let mid = row(&table, AblationRow::Mid, Metric::NovelNovel);
    let rel = row(&table, AblationRow::Relation, Metric::NovelNovel);
    let detail = format!("mid {:.2} vs relation {:.2} ({:+.2})", mid.mean, rel.mean, mid.mean - rel.mean);
    if mid.mean >= rel.mean + 5.0 { Ok(detail) } else { Err(detail) }
}

fn c7_attgen(run: &TrainRun, pair: &DatasetPair, cfg: &RunConfig) -> Outcome {
    let net = run.last();
    let set = train_attgen(net, pair, AttScope::PerBranch, &cfg.attgen.train).map_err(err)?;
    let AttGenSet::PerBranch(params) = set else { return Err("expected per-branch generators".into()) };
    let train_f = net.embed(&pair.base_train).map_err(err)?;
    let test_f = net.embed(&pair.base_test).map_err(err)?;
    let mut notes = Vec::new();
    let mut ok = true;
    for l in Level::ALL {
        let i = l.index();
        let w = normalize_columns(&net.branch(l).weights);
        let score = |p| {
            fake_novel_accuracy(&train_f[i], &pair.base_train.labels, &test_f[i], &pair.base_test.labels, &w, p, &cfg.attgen.train, FAKE_EPISODES, 13)
        };
        let (att, valid) = score(Some(&params[i])).map_err(err)?;
        let (avg, _) = score(None).map_err(err)?;
        let pass = valid && att >= avg - 0.5;
        ok &= pass;
        notes.push(format!("{} att {att:.2} vs avg {avg:.2}{}", l.name(), if valid { "" } else { " (invalid attention)" }));
    }
    if ok { Ok(notes.join(", ")) } else { Err(notes.join(", ")) }
}

const SMALL: &str = "\
data.n_base_classes = 4
data.n_novel_classes = 3
data.samples_per_class = 8
data.test_per_class = 4
backbone.stage_channels = 4,8,8
heads.embed_dim = 8
heads.mid_channels = 4
heads.relation_hidden = 8
trainer.stage1_epochs = 2
trainer.stage2_epochs = 2
trainer.min_epochs = 1
eval.shots = 1,2
eval.trials = 10
";

fn c8_determinism() -> Outcome {
    let cfg = parse_config(SMALL).map_err(err)?;
    let produce = || -> Result<(Vec<u8>, String, String), String> {
        let pair = synth_generate(&cfg.data).map_err(err)?;
        let run = train_run(&cfg, &pair, true).map_err(err)?;
        let ckpt = Checkpoint::from_network(run.last(), None, &cfg, StageTag::Two, run.last_epoch()).encode().map_err(err)?;
        let report = evaluate(run.last(), &pair, None, &cfg.eval).map_err(err)?;
        Ok((ckpt, run.log.to_tsv(), report.to_tsv()))
    };
    let (a, b) = (produce()?, produce()?);
    if a != b {
        return Err("repeated runs differ".into());
    }
    let decoded = Checkpoint::decode(&a.0).map_err(err)?;
    if decoded.encode().map_err(err)? != a.0 {
        return Err("checkpoint re-encode differs".into());
    }
    let pair = synth_generate(&cfg.data).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    write_image_dir(&pair, dir.path()).map_err(err)?;
    if load_image_dir(dir.path()).map_err(err)? != pair {
        return Err("Netpbm dataset round trip differs".into());
    }
    Ok(format!("checkpoint {} bytes, log and metrics TSV identical, round trips exact", a.0.len()))
}

fn report(id: usize, title: &str, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id} {tag}: {title} [{secs:.1}s] {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    let t = Instant::now();
    ok &= report(1, "gradient correctness", t, c1_gradients());
    let t = Instant::now();
    ok &= report(2, "normalization and additivity", t, c2_normalization());
    let t = Instant::now();
    ok &= report(3, "metric oracle", t, c3_metric_oracle());

    let base_cfg = seeded(ABLATION_SEEDS[0], MotifFamily::Same);
    let pair = match synth_generate(&base_cfg.data) {
        Ok(p) => p,
        Err(e) => {
            println!("criterion 4 FAIL: synthetic data: {e}");
            return ExitCode::FAILURE;
        }
    };
    let train = |seed| train_run(&seeded(seed, MotifFamily::Same), &pair, true);
    let t = Instant::now();
    let mut runs = Vec::new();
    match train(ABLATION_SEEDS[0]) {
        Ok(run) => runs.push((ABLATION_SEEDS[0], run)),
        Err(e) => println!("training seed {} failed: {e}", ABLATION_SEEDS[0]),
    }
    let c4 = runs.first().map_or_else(|| Err("training failed".to_string()), |(_, r)| c4_geometry(r, &pair));
    ok &= report(4, "weight-centric geometry", t, c4);
    for &seed in &ABLATION_SEEDS[1..] {
        match train(seed) {
            Ok(run) => runs.push((seed, run)),
            Err(e) => println!("training seed {seed} failed: {e}"),
        }
    }
    let t = Instant::now();
    let c5 = if runs.len() == ABLATION_SEEDS.len() {
        let refs: Vec<(u64, &TrainRun)> = runs.iter().map(|(s, r)| (*s, r)).collect();
        c5_ablation(&refs, &pair, &base_cfg)
    } else {
        Err("training failed".into())
    };
    ok &= report(5, "ablation ordering", t, c5);
    let t = Instant::now();
    ok &= report(6, "transferability", t, c6_transfer());
    let t = Instant::now();
    let first = runs.iter().find(|(s, _)| *s == ABLATION_SEEDS[0]).map(|(_, r)| r);
    let c7 = first.map_or_else(|| Err("training failed".to_string()), |r| c7_attgen(r, &pair, &base_cfg));
    ok &= report(7, "attention generator", t, c7);
    let t = Instant::now();
    ok &= report(8, "determinism and formats", t, c8_determinism());
    if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
