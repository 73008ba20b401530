//! One PASS/FAIL line per acceptance criterion.
//!
//! The deterministic criteria (gradients, oracles, invariants) are asserted.
//! The trend criteria on the synthetic benchmark are measured and reported
//! as they come out; they are not asserted.

use std::io::{self, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use amel_core::autodiff::Tape;
use amel_core::config::RunConfig;
use amel_core::data::make_benchmark;
use amel_core::eval::{run_protocol, EvalReport, Protocol};
use amel_core::gradcheck::{micro_fixture, run_micro_check, GradCheckConfig};
use amel_core::losses::{ConsistencyTarget, LossWeights};
use amel_core::metrics::{auc, eer_threshold, hter, roc, Scored};
use amel_core::model::{dea, AggregationStrategy, AmelModel, ModelConfig};
use amel_core::trainer::{detached_common, expert_params, EpisodeSplit, TrainConfig, TrainVariant, Trainer};
use amel_core::Tensor;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    asserted: bool,
    detail: String,
}

/// Writes to the stdout handle directly so the lines survive test output capture.
fn out(line: String) {
    let mut h = io::stdout().lock();
    writeln!(h, "{}", line).unwrap();
    h.flush().unwrap();
}

fn report(outcomes: &mut Vec<Outcome>, o: Outcome) {
    out(format!(
        "criterion {} {}: {}{} ({})",
        o.id,
        o.name,
        if o.pass { "PASS" } else { "FAIL" },
        if o.asserted { "" } else { " [reported]" },
        o.detail
    ));
    outcomes.push(o);
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let r = run_micro_check(&GradCheckConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "gradient correctness",
        pass: r.parameters <= 2000 && r.max_rel_error() < 1e-4 && secs < 120.0,
        asserted: true,
        detail: format!(
            "{} params, L_B {:.1e}, L_trn {:.1e}, L_val {:.1e}, {:.1} s",
            r.parameters, r.loss_b.max_rel_error, r.loss_trn.max_rel_error, r.loss_val.max_rel_error, secs
        ),
    }
}

fn pooled(t: &Tensor, i: usize) -> Vec<f64> {
    let s = t.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    (0..c)
        .map(|ch| t.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

fn masked_softmax_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut max_err, mut masked_nonzero, mut fixtures) = (0.0f64, 0usize, 0usize);
    for _ in 0..500 {
        let b = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=3);
        let hw = rng.gen_range(1..=3);
        let common = Tensor::uniform(&[b, c, hw, hw], 2.0, &mut rng);
        let feats: Vec<Tensor> = (0..k).map(|_| Tensor::uniform(&[b, c, hw, hw], 2.0, &mut rng)).collect();
        let mut tape = Tape::new();
        let fc = tape.leaf(common.clone(), false);
        let fv: Vec<_> = feats.iter().map(|f| tape.leaf(f.clone(), false)).collect();
        let agg = dea(&mut tape, fc, &fv).unwrap();
        let matrix = tape.value(agg.weight_matrix).data().to_vec();
        for i in 0..b {
            let q = pooled(&common, i);
            let scores: Vec<f64> = feats
                .iter()
                .map(|f| q.iter().zip(pooled(f, i)).map(|(a, b)| a * b).sum())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..k * b {
                let w = matrix[i * k * b + j];
                if j % b == i {
                    let expect = (scores[j / b] - m).exp() / z;
                    max_err = max_err.max((w - expect).abs());
                } else if w != 0.0 {
                    masked_nonzero += 1;
                }
            }
        }
        fixtures += 1;
    }
    Outcome {
        id: 2,
        name: "masked-softmax oracle",
        pass: max_err <= 1e-10 && masked_nonzero == 0,
        asserted: true,
        detail: format!("{} fixtures, max err {:.1e}, {} nonzero masked entries", fixtures, max_err, masked_nonzero),
    }
}

fn mann_whitney(s: &[Scored]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in s.iter().filter(|x| x.live) {
        for b in s.iter().filter(|x| !x.live) {
            pairs += 1.0;
            wins += if a.score > b.score {
                1.0
            } else if a.score == b.score {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..80);
        let mut s: Vec<Scored> = (0..n)
            .map(|_| Scored {
                score: rng.gen_range(0..15) as f64 / 14.0,
                live: rng.gen(),
            })
            .collect();
        s[0].live = true;
        s[1].live = false;
        max_err = max_err.max((auc(&s).unwrap() - mann_whitney(&s)).abs());
    }

    let fixture: Vec<Scored> = [(0.9, true), (0.8, false), (0.7, true), (0.1, false)]
        .iter()
        .map(|&(score, live)| Scored { score, live })
        .collect();
    // enumerate every threshold at and above each score
    let mut table_ok = true;
    for p in roc(&fixture).unwrap() {
        let fa = fixture.iter().filter(|x| !x.live && x.score >= p.threshold).count() as f64 / 2.0;
        let fr = fixture.iter().filter(|x| x.live && x.score < p.threshold).count() as f64 / 2.0;
        table_ok &= (p.far, p.frr) == (fa, fr);
    }
    let best = [0.1, 0.7, 0.8, 0.9, 1.0]
        .iter()
        .map(|&t| {
            let fa = fixture.iter().filter(|x| !x.live && x.score >= t).count() as f64 / 2.0;
            let fr = fixture.iter().filter(|x| x.live && x.score < t).count() as f64 / 2.0;
            ((fa - fr).abs(), (fa + fr) / 2.0)
        })
        .fold((f64::MAX, 0.0), |acc, x| if x.0 < acc.0 { x } else { acc });
    let t = eer_threshold(&fixture).unwrap();
    table_ok &= hter(&fixture, t).unwrap() == best.1;

    let perfect: Vec<Scored> = [(0.9, true), (0.6, true), (0.4, false), (0.2, false)]
        .iter()
        .map(|&(score, live)| Scored { score, live })
        .collect();
    let perfect_ok = auc(&perfect).unwrap() == 1.0 && hter(&perfect, eer_threshold(&perfect).unwrap()).unwrap() == 0.0;
    Outcome {
        id: 3,
        name: "metric oracles",
        pass: max_err <= 1e-9 && table_ok && perfect_ok,
        asserted: true,
        detail: format!(
            "AUC vs rank statistic max err {:.1e}, 4-point table {}, perfect classifier {}",
            max_err,
            if table_ok { "exact" } else { "mismatch" },
            if perfect_ok { "AUC 1 / HTER 0" } else { "wrong" }
        ),
    }
}

fn owned(ts: Vec<&Tensor>) -> Vec<Tensor> {
    ts.into_iter().cloned().collect()
}

fn isolation_and_determinism(desk_a: &EvalReport, desk_b: &EvalReport) -> Outcome {
    let config = TrainConfig {
        beta: 1e-2,
        gamma: 1e-2,
        batch_per_domain: 2,
        ..TrainConfig::default()
    };
    let (mut model, batches) = micro_fixture(3, 2, 5).unwrap();
    let mut trainer = Trainer::new(&model, config).unwrap();

    let experts = owned(expert_params(&model));
    let base = owned(model.base_params());
    trainer.normal_train_step(&mut model, &batches).unwrap();
    let normal_ok = owned(expert_params(&model)) == experts && owned(model.base_params()) != base;

    let base = owned(model.base_params());
    let common = detached_common(&model, &batches).unwrap();
    let split = EpisodeSplit {
        meta_train: vec![0, 2],
        meta_test: 1,
    };
    let trn: Vec<_> = split.meta_train.iter().map(|&d| batches[d].clone()).collect();
    let trn_c: Vec<Tensor> = split.meta_train.iter().map(|&d| common[d].clone()).collect();
    let mt = trainer.meta_train_step(&mut model, &trn_c, &trn).unwrap();
    let snapshot_ok = owned(expert_params(&model)) == experts;
    let val = trainer
        .meta_test_step(&model, &mt.fast, &common[1], &batches[1], &split.meta_train)
        .unwrap();
    trainer.meta_optimize(&mut model, &mt.g_trn, &val.grads).unwrap();
    let meta_ok = owned(model.base_params()) == base && owned(expert_params(&model)) != experts;

    let desk_same = serde_json::to_vec(desk_a).unwrap() == serde_json::to_vec(desk_b).unwrap();
    Outcome {
        id: 7,
        name: "phase isolation and determinism",
        pass: normal_ok && snapshot_ok && meta_ok && desk_same,
        asserted: true,
        detail: format!(
            "normal step touches base only: {}, inner snapshot stays out of the model: {}, meta phases touch experts only: {}, repeated seed-0 run byte-identical: {}",
            normal_ok, snapshot_ok, meta_ok, desk_same
        ),
    }
}

fn images(b: usize, hw: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[b, 3, hw, hw], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn degenerate_equivalence() -> Outcome {
    let x = images(4, 8, 1);
    let one = AmelModel::new(ModelConfig::micro(1), 2).unwrap();
    let k1_ok = one.forward_inference(&x).unwrap().logits == one.forward_single_expert(&x, 0).unwrap().logits;

    let mut zeroed = AmelModel::new(ModelConfig::micro(3), 3).unwrap();
    for e in &mut zeroed.experts {
        e.zero_out();
    }
    let base = zeroed.forward_backbone_only(&x).unwrap();
    let mut zero_ok = zeroed.forward_inference(&x).unwrap().logits == base.logits;
    for s in AggregationStrategy::ALL {
        let out = zeroed.forward_with_strategy(&x, s).unwrap();
        zero_ok &= out.logits == base.logits && out.depth == base.depth;
    }
    for k in 0..3 {
        zero_ok &= zeroed.forward_single_expert(&x, k).unwrap().logits == base.logits;
    }

    // lambda = 0: no gradient reaches the held-out expert, and moving the
    // consistency target leaves the meta-train gradient unchanged
    let config = TrainConfig {
        loss: LossWeights {
            lambda_con: 0.0,
            consistency_target: ConsistencyTarget::AggregatedFeature,
        },
        ..TrainConfig::default()
    };
    let (model, batches) = micro_fixture(3, 2, 7).unwrap();
    let trainer = Trainer::new(&model, config).unwrap();
    let common = detached_common(&model, &batches).unwrap();
    let fast = owned(expert_params(&model));
    let g = |m: &AmelModel| {
        trainer
            .meta_test_step(m, &fast, &common[0], &batches[0], &[1, 2])
            .unwrap()
    };
    let before = g(&model);
    let mut moved = model.clone();
    moved.experts[0].conv.weight.data_mut()[0] += 0.5;
    let after = g(&moved);
    let held_out_slots = model.experts[0].params().len();
    let lambda_ok = before.grads[..held_out_slots].iter().all(Option::is_none)
        && before.grads == after.grads
        && before.loss.total == before.loss.cls + before.loss.depth;
    Outcome {
        id: 8,
        name: "degenerate equivalence",
        pass: k1_ok && zero_ok && lambda_ok,
        asserted: true,
        detail: format!(
            "K=1 inference = single expert: {}, zeroed experts = backbone only: {}, lambda=0 drops consistency gradient: {}",
            k1_ok, zero_ok, lambda_ok
        ),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Target-domain report of one LOO run on the desk benchmark.
fn desk_run(seed: u64, variant: TrainVariant, delta: f64) -> EvalReport {
    let mut config = RunConfig::default().with_seed(seed);
    config.train.variant = variant;
    config.benchmark.relevance.delta = delta;
    config.validate().unwrap();
    let dataset = make_benchmark(&config.benchmark).unwrap();
    let start = Instant::now();
    let mut outcomes = run_protocol(&dataset, &config.model, &config.train, Protocol::Loo, None).unwrap();
    out(format!(
        "  seed {} {:?} delta {}: AUC {:.4} in {:.1} s",
        seed,
        variant,
        delta,
        outcomes[0].report.auc,
        start.elapsed().as_secs_f64()
    ));
    outcomes.remove(0).report
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    report(&mut outcomes, gradient_correctness());
    report(&mut outcomes, masked_softmax_oracle());
    report(&mut outcomes, metric_oracles());

    let defaults = RunConfig::default();
    let delta = defaults.benchmark.relevance.delta;
    let mut runs: Vec<(TrainVariant, Vec<EvalReport>)> = Vec::new();
    for variant in [TrainVariant::Baseline, TrainVariant::Experts, TrainVariant::Full] {
        runs.push((variant, SEEDS.iter().map(|&s| desk_run(s, variant, delta)).collect()));
    }
    let med = |reports: &[EvalReport], key: Option<&str>| {
        median(
            reports
                .iter()
                .map(|r| key.map_or(r.auc, |k| r.per_strategy[k].auc))
                .collect(),
        )
    };
    let (base, experts, full) = (med(&runs[0].1, None), med(&runs[1].1, None), med(&runs[2].1, None));
    report(
        &mut outcomes,
        Outcome {
            id: 4,
            name: "component-ablation trend",
            pass: base < experts && experts < full && full - base >= 0.02,
            asserted: false,
            detail: format!(
                "median target AUC baseline {:.4}, +experts/DEA {:.4}, full {:.4}; needs strictly increasing with full - baseline >= 0.02",
                base, experts, full
            ),
        },
    );

    let source = defaults.benchmark.relevance.source;
    let clone_reports: Vec<EvalReport> = SEEDS.iter().map(|&s| desk_run(s, TrainVariant::Full, 0.0)).collect();
    let picks: Vec<usize> = clone_reports.iter().map(|r| argmax(&r.mean_expert_weights)).collect();
    let hits = picks.iter().filter(|&&k| k == source).count();
    report(
        &mut outcomes,
        Outcome {
            id: 5,
            name: "domain relevance",
            pass: hits >= 4,
            asserted: false,
            detail: format!(
                "target cloned from source {}; argmax of mean DEA weights per seed {:?}, {}/5 hits, needs >= 4",
                source, picks, hits
            ),
        },
    );

    let full_runs = &runs[2].1;
    let strat: Vec<(&str, f64)> = ["dea", "max_selection", "average_voting", "expert_ensembling"]
        .iter()
        .map(|&k| (k, med(full_runs, Some(k))))
        .collect();
    let dea_auc = strat[0].1;
    report(
        &mut outcomes,
        Outcome {
            id: 6,
            name: "aggregation-strategy trend",
            pass: dea_auc >= strat[2].1 && dea_auc >= strat[3].1,
            asserted: false,
            detail: format!(
                "median target AUC {}; needs dea >= average_voting and dea >= expert_ensembling",
                strat
                    .iter()
                    .map(|(k, v)| format!("{} {:.4}", k, v))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        },
    );

    let repeat = desk_run(0, TrainVariant::Full, delta);
    report(&mut outcomes, isolation_and_determinism(&full_runs[0], &repeat));
    report(&mut outcomes, degenerate_equivalence());

    let passed = outcomes.iter().filter(|o| o.pass).count();
    out(format!("acceptance: {}/{} criteria pass", passed, outcomes.len()));
    let broken: Vec<usize> = outcomes.iter().filter(|o| o.asserted && !o.pass).map(|o| o.id).collect();
    assert!(broken.is_empty(), "asserted criteria failed: {:?}", broken);
}

