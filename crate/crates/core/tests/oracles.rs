//! Worked examples checked through the public API.

use helpz::attnselect::{extract_baseline, extract_head_map, select_best, Strategy};
use helpz::baselines::{
    centered_gaussian, generate, oracle_gated, AttentionSignal, ErrorSignal, SynthConfig,
};
use helpz::data::{make_splits, validate_record, CELLS};
use helpz::metrics::{help_from_relevances, help_joint, map_relevance, relevance};
use helpz::stats::{spearman, ztest_two_sample};
use helpz::usersim::{accuracy, SimUser};
use helpz::{AttentionStack, Dataset, Heatmap49, HeatmapKind, Mode, Record, Split, VarianceMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ranks_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

fn heat(v: Vec<f64>) -> Heatmap49 {
    Heatmap49::new(v, HeatmapKind::Attention).unwrap()
}

fn ramp() -> Vec<f64> {
    (0..CELLS).map(|i| i as f64 + 1.0).collect()
}

#[test]
fn record_validation_messages() {
    let ok = Record::new("a", true, heat(ramp()));
    let mut r = ok.clone();
    r.attention_map = Some(heat(ramp()));
    assert!(validate_record(&r).is_empty());

    let mut short = r.clone();
    short.human_attention = Heatmap49::from_raw(vec![0.5; 48], HeatmapKind::Human);
    assert!(validate_record(&short)
        .contains(&"human_attention: expected 49 values, got 48".to_string()));

    let mut neg = r.clone();
    let mut v = ramp();
    v[7] = -1.0;
    neg.human_attention = Heatmap49::from_raw(v, HeatmapKind::Human);
    assert!(
        validate_record(&neg).contains(&"human_attention: negative value at index 7".to_string())
    );
}

#[test]
fn split_sizes() {
    let records = |n: usize| {
        Dataset::new(
            (0..n)
                .map(|i| Record::new(format!("r{i}"), i % 2 == 0, heat(ramp())))
                .collect(),
        )
    };
    let a = make_splits(records(10), 0.3, 7).unwrap();
    let b = make_splits(records(10), 0.3, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.split(Split::Val).len(), 3);
    assert_eq!(a.split(Split::Test).len(), 7);

    let big = make_splits(records(4120), 1000.0 / 4120.0, 1).unwrap();
    assert_eq!(big.split(Split::Val).len(), 1000);
    assert_eq!(big.split(Split::Test).len(), 3120);
    let other = make_splits(records(4120), 1000.0 / 4120.0, 2).unwrap();
    assert_eq!(other.split(Split::Val).len(), 1000);
    assert_ne!(big, other);
}

#[test]
fn spearman_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(spearman(&x, &x).unwrap().rho, 1.0);
    assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap().rho + 1.0).abs() < 1e-15);
    assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap().rho - 0.8).abs() < 1e-12);

    let (a, b) = ([1.0, 1.0, 2.0], [3.0, 5.0, 9.0]);
    let want = pearson_oracle(&[1.5, 1.5, 3.0], &[1.0, 2.0, 3.0]);
    assert!((spearman(&a, &b).unwrap().rho - want).abs() < 1e-12);

    let c = spearman(&[2.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert!(c.degenerate);
    assert_eq!(c.rho, 0.0);
}

#[test]
fn ztest_examples() {
    let a = [0.1, 0.5, 0.9];
    assert_eq!(
        ztest_two_sample(&a, &a, VarianceMode::Pooled)
            .unwrap()
            .t_stat,
        0.0
    );
    let t = ztest_two_sample(&[0.5, 0.6, 0.7], &[0.1, 0.2, 0.3], VarianceMode::Pooled).unwrap();
    assert!((t.t_stat - 4.899).abs() < 1e-3, "{}", t.t_stat);
    let back = ztest_two_sample(&[0.1, 0.2, 0.3], &[0.5, 0.6, 0.7], VarianceMode::Pooled).unwrap();
    assert_eq!(back.t_stat, -t.t_stat);
}

#[test]
fn relevance_examples() {
    let human = Heatmap49::new(ramp(), HeatmapKind::Human).unwrap();
    assert_eq!(map_relevance(&heat(ramp()), &human).unwrap().value, 1.0);
    let rev: Vec<f64> = ramp().into_iter().rev().collect();
    assert!((map_relevance(&heat(rev), &human).unwrap().value + 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..CELLS).map(|_| rng.random()).collect();
    let y: Vec<f64> = (0..CELLS).map(|_| rng.random()).collect();
    let want = pearson_oracle(&ranks_oracle(&x), &ranks_oracle(&y));
    let got = map_relevance(&heat(x), &Heatmap49::new(y, HeatmapKind::Human).unwrap()).unwrap();
    assert!((got.value - want).abs() < 1e-12);
}

#[test]
fn help_examples() {
    let r = help_from_relevances(
        Mode::Attention,
        &[0.8, 0.81, 0.79],
        &[0.2, 0.21, 0.19],
        VarianceMode::Pooled,
    )
    .unwrap();
    assert!(r.help_z > 10.0);
    let same = [0.3, 0.4, 0.5];
    for mode in [Mode::Attention, Mode::Error, Mode::Joint] {
        let r = help_from_relevances(mode, &same, &same, VarianceMode::Pooled).unwrap();
        assert_eq!(r.help_z, 0.0);
        assert!(r.help_z.is_sign_positive());
    }
    let e = help_from_relevances(
        Mode::Error,
        &[0.1, 0.11, 0.09],
        &[0.8, 0.81, 0.79],
        VarianceMode::Pooled,
    )
    .unwrap();
    assert!(e.help_z > 10.0);
}

#[test]
fn joint_help_from_reversed_error_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let records: Vec<Record> = (0..20)
        .map(|i| {
            let att: Vec<f64> = (0..CELLS).map(|_| rng.random()).collect();
            let correct = i % 2 == 0;
            let err: Vec<f64> = if correct {
                att.iter().map(|v| -v + 2.0).collect()
            } else {
                att.clone()
            };
            let mut r = Record::new(
                format!("r{i:02}"),
                correct,
                Heatmap49::new(ramp(), HeatmapKind::Human).unwrap(),
            );
            r.attention_map = Some(heat(att));
            r.error_map = Some(Heatmap49::new(err, HeatmapKind::Error).unwrap());
            r
        })
        .collect();
    assert!((relevance(&records[0], Mode::Joint).unwrap().value + 1.0).abs() < 1e-12);
    assert!((relevance(&records[1], Mode::Joint).unwrap().value - 1.0).abs() < 1e-12);
    // constant within each class: the pooled variance is zero
    let mut noisy = records.clone();
    let m = noisy[2].error_map.as_ref().unwrap().values().to_vec();
    let mut m2 = m.clone();
    m2.swap(0, 1);
    noisy[2].error_map = Some(Heatmap49::new(m2, HeatmapKind::Error).unwrap());
    assert!(help_joint(&noisy).unwrap().help_z > 10.0);
}

fn loop_head_map(s: &AttentionStack, l: usize, h: usize) -> Vec<f64> {
    (0..CELLS)
        .map(|j| (0..s.tokens()).map(|i| s.at(l, h, i, j)).sum::<f64>() / s.tokens() as f64)
        .collect()
}

fn random_stack(seed: u64, layers: usize, heads: usize, d: usize) -> AttentionStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity(layers * heads * d * d);
    for _ in 0..layers * heads * d {
        let row: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let s: f64 = row.iter().sum();
        w.extend(row.iter().map(|v| v / s));
    }
    AttentionStack::new(layers, heads, d, CELLS, w).unwrap()
}

#[test]
fn head_map_examples() {
    let d = 115;
    let uniform = AttentionStack::new(1, 1, d, CELLS, vec![1.0 / d as f64; d * d]).unwrap();
    for &v in extract_head_map(&uniform, 0, 0).unwrap().values() {
        assert!((v - 1.0 / 115.0).abs() < 1e-15);
    }
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + 5] = 1.0;
    }
    let one_hot = AttentionStack::new(1, 1, d, CELLS, w).unwrap();
    let m = extract_head_map(&one_hot, 0, 0).unwrap();
    assert_eq!(m.argmax(), 5);
    assert_eq!(m.values().iter().filter(|&&v| v != 0.0).count(), 1);

    let s = random_stack(5, 2, 3, 60);
    for l in 0..2 {
        for h in 0..3 {
            let got = extract_head_map(&s, l, h).unwrap();
            for (a, b) in got.values().iter().zip(loop_head_map(&s, l, h)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
    let base = extract_baseline(&s).unwrap();
    for j in 0..CELLS {
        let want = (0..3).map(|h| loop_head_map(&s, 1, h)[j]).sum::<f64>() / 3.0;
        assert!((base.values()[j] - want).abs() < 1e-14);
    }
}

#[test]
fn identical_heads_tie_to_the_first() {
    let stack = random_stack(9, 2, 2, 52);
    let one = stack.head(0, 0).to_vec();
    let w: Vec<f64> = (0..4).flat_map(|_| one.iter().copied()).collect();
    let same = AttentionStack::new(2, 2, 52, CELLS, w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records = (0..20)
        .map(|i| {
            let human: Vec<f64> = (0..CELLS).map(|_| rng.random()).collect();
            let mut r = Record::new(
                format!("r{i}"),
                i % 2 == 0,
                Heatmap49::new(human, HeatmapKind::Human).unwrap(),
            );
            r.split = Split::Val;
            r.attention_stack = Some(same.clone());
            r
        })
        .collect();
    let mut ds = Dataset::new(records);
    let res = select_best(&mut ds, Strategy::BestSingle, Split::Val).unwrap();
    assert_eq!((res.chosen_layer, res.chosen_head), (Some(0), Some(0)));
}

#[test]
fn centered_gaussian_shape() {
    for sigma in [0.5, 1.5, 4.0] {
        let g = centered_gaussian(sigma).unwrap();
        assert_eq!(g.argmax(), 24);
        for r in 0..7 {
            for c in 0..7 {
                assert!((g.at(r, c) - g.at(6 - r, c)).abs() < 1e-15);
                assert!((g.at(r, c) - g.at(r, 6 - c)).abs() < 1e-15);
            }
        }
    }
    let wide = centered_gaussian(1e9).unwrap();
    assert!(map_relevance(&wide, &heat(ramp())).unwrap().degenerate);
}

#[test]
fn oracle_gate_with_constant_predictor_is_centered() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let gated = oracle_gated(|_| true, 1.5, 0, &ds).unwrap();
    let g = centered_gaussian(1.5).unwrap();
    assert!(gated
        .records()
        .iter()
        .all(|r| r.attention_map.as_ref() == Some(&g)));
}

#[test]
fn generator_signals() {
    let ds = generate(&SynthConfig {
        attention_signal: AttentionSignal::RelevantWhenCorrect,
        error_signal: ErrorSignal::RelevantWhenWrong,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(ds.len(), 400);
    assert!(helpz::metrics::help_attention(ds.records()).unwrap().help_z > 5.0);
    assert!(helpz::metrics::help_error(ds.records()).unwrap().help_z > 5.0);
}

#[test]
fn simulated_user_rules() {
    let mut r = Record::new(
        "x",
        true,
        Heatmap49::new(ramp(), HeatmapKind::Human).unwrap(),
    );
    r.attention_map = Some(heat(ramp()));
    r.error_map = Some(Heatmap49::new(ramp(), HeatmapKind::Error).unwrap());
    let att = SimUser::new(Mode::Attention, 0.5, 0.0, 0.0, 1).unwrap();
    assert!(att.predict(&r).unwrap());
    let err = SimUser::new(Mode::Error, 0.0, 0.8, 0.0, 1).unwrap();
    assert!(!err.predict(&r).unwrap());
    assert!(SimUser::new(Mode::Attention, 0.5, 0.0, 0.5, 1).is_err());
}

#[test]
fn near_coin_flip_users_approach_chance() {
    let ds = generate(&SynthConfig {
        n_records: 10_000,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let user = SimUser::new(Mode::Attention, 0.5, 0.0, 0.49, 8).unwrap();
    let acc = accuracy(&user, ds.records()).unwrap();
    assert!((acc - 0.5).abs() < 0.03, "{acc}");
}

#[test]
fn perfect_signal_threshold_user_is_exact() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let user = SimUser::new(Mode::Attention, 0.5, 0.0, 0.0, 1).unwrap();
    assert_eq!(accuracy(&user, ds.records()).unwrap(), 1.0);
}
