//! Simulated users that read explanations with a noisy threshold rule.
//!
//! A user looks at one relevance score per record and guesses whether the
//! model was right. With probability `epsilon` the verdict is flipped; the
//! flip is a pure function of the user's seed and the record id.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Record;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{self, Mode};
use crate::seed;
use crate::stats::{self, VarianceMode};

/// A threshold reader. `mode` picks which relevance the user reads:
/// attention only, error only, or error-vs-attention with an attention
/// fallback.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimUser {
    pub tau_att: f64,
    pub tau_err: f64,
    pub epsilon: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl SimUser {
    pub fn new(mode: Mode, tau_att: f64, tau_err: f64, epsilon: f64, seed: u64) -> Result<Self> {
        let user = Self {
            tau_att,
            tau_err,
            epsilon,
            mode,
            seed,
        };
        user.validate()?;
        Ok(user)
    }

    /// Thresholds set to the median relevance of `records`.
    pub fn with_median_thresholds(
        records: &[&Record],
        mode: Mode,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        let median_of = |m: Mode| -> Result<f64> {
            let mut v = records
                .iter()
                .map(|r| metrics::relevance(r, m).map(|x| x.value))
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(Error::Empty("records"));
            }
            v.sort_by(f64::total_cmp);
            let n = v.len();
            Ok(if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            })
        };
        let (tau_att, tau_err) = match mode {
            Mode::Attention => (median_of(Mode::Attention)?, 0.0),
            Mode::Error => (0.0, median_of(Mode::Error)?),
            Mode::Joint => (median_of(Mode::Attention)?, median_of(Mode::Joint)?),
        };
        Self::new(mode, tau_att, tau_err, epsilon, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |t: f64| (-1.0..=1.0).contains(&t);
        if !in_range(self.tau_att) || !in_range(self.tau_err) {
            return Err(Error::InvalidParameter(format!(
                "thresholds must lie in [-1, 1], got tau_att={} tau_err={}",
                self.tau_att, self.tau_err
            )));
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in [0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// The same user without verdict noise.
    pub fn noiseless(&self) -> Self {
        Self {
            epsilon: 0.0,
            ..*self
        }
    }

    /// Verdict before noise: true means "the model is correct".
    fn rule(&self, r: &Record) -> Result<bool> {
        let rel = |m| metrics::relevance(r, m).map(|x| x.value);
        Ok(match self.mode {
            Mode::Attention => rel(Mode::Attention)? >= self.tau_att,
            Mode::Error => rel(Mode::Error)? < self.tau_err,
            Mode::Joint => {
                if rel(Mode::Joint)? >= self.tau_err {
                    false
                } else {
                    rel(Mode::Attention)? >= self.tau_att
                }
            }
        })
    }

    fn flips(&self, id: &str) -> bool {
        self.epsilon > 0.0
            && seed::rng(seed::derive_str(self.seed, id)).random::<f64>() < self.epsilon
    }

    /// True when the user predicts the model answered correctly.
    pub fn predict(&self, r: &Record) -> Result<bool> {
        Ok(self.rule(r)? != self.flips(&r.id))
    }
}

/// Fraction of records on which `user` guesses correctness right.
pub fn accuracy<'a>(user: &SimUser, records: impl IntoIterator<Item = &'a Record>) -> Result<f64> {
    let mut n = 0usize;
    let mut hits = 0usize;
    for r in records {
        n += 1;
        if user.predict(r)? == r.correct {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("records"));
    }
    Ok(hits as f64 / n as f64)
}

/// Users whose attention thresholds scatter uniformly around `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub size: usize,
    pub center: f64,
    pub jitter: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for Population {
    fn default() -> Self {
        Self {
            size: 50,
            center: 0.5,
            jitter: 0.2,
            epsilon: 0.0,
            seed: 0,
        }
    }
}

impl Population {
    pub fn users(&self) -> Result<Vec<SimUser>> {
        if self.size == 0 {
            return Err(Error::InvalidParameter(
                "population size must be positive".into(),
            ));
        }
        (0..self.size)
            .map(|u| {
                let s = seed::derive(self.seed, u as u64);
                let shift = if self.jitter > 0.0 {
                    seed::rng(s).random_range(-self.jitter..=self.jitter)
                } else {
                    0.0
                };
                SimUser::new(Mode::Attention, self.center + shift, 0.0, self.epsilon, s)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mean_relevance: f64,
    pub predicted_correct: f64,
    pub n: usize,
}

/// Buckets records into `n_bins` attention-relevance quantiles and reports
/// how often the population predicts "correct" in each.
pub fn relevance_correctness_curve(
    records: &[&Record],
    n_bins: usize,
    population: &Population,
) -> Result<Vec<CurvePoint>> {
    if n_bins < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 bins, got {n_bins}"
        )));
    }
    if records.len() < n_bins {
        return Err(Error::TooFewSamples {
            needed: n_bins,
            got: records.len(),
        });
    }
    let users = population.users()?;
    let mut scored = records
        .iter()
        .map(|r| metrics::relevance(r, Mode::Attention).map(|x| (x.value, *r)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));

    let n = scored.len();
    (0..n_bins)
        .map(|b| {
            let bin = &scored[b * n / n_bins..(b + 1) * n / n_bins];
            let mut yes = 0usize;
            for (_, r) in bin {
                for u in &users {
                    if u.predict(r)? {
                        yes += 1;
                    }
                }
            }
            Ok(CurvePoint {
                mean_relevance: bin.iter().map(|x| x.0).sum::<f64>() / bin.len() as f64,
                predicted_correct: yes as f64 / (bin.len() * users.len()) as f64,
                n: bin.len(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub n_subsets: usize,
    pub subset_size: usize,
    pub n_bins: usize,
    /// Range of the intuitive fraction swept across subsets. Near 0 and 1
    /// the within-class variance collapses and HELP_Z grows without bound
    /// while accuracy stays linear in the mix, so the default stays inside.
    pub mix_range: (f64, f64),
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            n_subsets: 50,
            subset_size: 80,
            n_bins: 5,
            mix_range: (0.1, 0.9),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPoint {
    pub index: usize,
    /// Fraction of records in the subset where the noiseless user is right.
    pub intuitive_fraction: f64,
    pub help_z: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub bin_center: f64,
    pub mean_accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationCurve {
    pub mode: Mode,
    pub bins: Vec<CurveBin>,
    pub pearson_r: f64,
    pub spearman_rho: f64,
    /// Fewer than three subsets: the correlations carry no information.
    pub degenerate: bool,
    pub points: Vec<SubsetPoint>,
}

pub fn validate_metric(
    records: &[&Record],
    user: &SimUser,
    mode: Mode,
    config: &ValidationConfig,
) -> Result<ValidationCurve> {
    validate_metric_with(records, user, mode, config, Execution::default())
}

/// Samples class-balanced subsets whose share of intuitive records (where
/// the noiseless user reads the explanation the right way) sweeps
/// `mix_range`, then relates each subset's HELP_Z to the user's accuracy.
pub fn validate_metric_with(
    records: &[&Record],
    user: &SimUser,
    mode: Mode,
    config: &ValidationConfig,
    exec: Execution,
) -> Result<ValidationCurve> {
    user.validate()?;
    let ValidationConfig {
        n_subsets,
        subset_size,
        n_bins,
        mix_range: (lo, hi),
        seed,
    } = *config;
    if n_subsets < 2 || n_bins == 0 || subset_size < 4 {
        return Err(Error::InvalidParameter(format!(
            "need n_subsets >= 2, n_bins >= 1 and subset_size >= 4, got {n_subsets}, {n_bins}, {subset_size}"
        )));
    }
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::InvalidParameter(format!(
            "invalid mix range ({lo}, {hi})"
        )));
    }

    // pools[class][intuitive], class 0 = correct
    let reader = user.noiseless();
    let mut pools: [[Vec<&Record>; 2]; 2] = Default::default();
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for r in sorted {
        let intuitive = reader.predict(r)? == r.correct;
        pools[usize::from(!r.correct)][usize::from(intuitive)].push(r);
    }
    let half = subset_size / 2;
    let mixes: Vec<f64> = (0..n_subsets)
        .map(|k| lo + (hi - lo) * k as f64 / (n_subsets - 1) as f64)
        .collect();
    for &f in &mixes {
        let n_int = (f * half as f64).round() as usize;
        for class in &pools {
            if class[1].len() < n_int || class[0].len() < half - n_int {
                return Err(Error::TooFewSamples {
                    needed: n_int.max(half - n_int),
                    got: class[1].len().min(class[0].len()),
                });
            }
        }
    }

    let points = exec
        .map_range(n_subsets, |k| {
            let mut rng = seed::rng(seed::derive(seed, k as u64));
            let n_int = (mixes[k] * half as f64).round() as usize;
            let mut subset: Vec<&Record> = Vec::with_capacity(2 * half);
            for class in &pools {
                subset.extend(class[1].choose_multiple(&mut rng, n_int).copied());
                subset.extend(class[0].choose_multiple(&mut rng, half - n_int).copied());
            }
            let help = metrics::help(subset.iter().copied(), mode, VarianceMode::Pooled)?;
            let acc = accuracy(user, subset.iter().copied())?;
            Ok(SubsetPoint {
                index: k,
                intuitive_fraction: n_int as f64 / half as f64,
                help_z: help.help_z,
                accuracy: acc,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let z: Vec<f64> = points.iter().map(|p| p.help_z).collect();
    let acc: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    let pearson_r = stats::pearson(&z, &acc)?.rho;
    let spearman_rho = stats::spearman(&z, &acc)?.rho;

    Ok(ValidationCurve {
        mode,
        bins: bin_points(&points, n_bins),
        pearson_r,
        spearman_rho,
        degenerate: n_subsets < 3,
        points,
    })
}

/// Equal-width bins over the HELP_Z range; empty bins are dropped.
fn bin_points(points: &[SubsetPoint], n_bins: usize) -> Vec<CurveBin> {
    let lo = points
        .iter()
        .map(|p| p.help_z)
        .fold(f64::INFINITY, f64::min);
    let hi = points
        .iter()
        .map(|p| p.help_z)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut sums = vec![(0.0, 0usize); n_bins];
    for p in points {
        let b = if width > 0.0 {
            (((p.help_z - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        sums[b].0 += p.accuracy;
        sums[b].1 += 1;
    }
    sums.into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(b, (s, n))| CurveBin {
            bin_center: lo + width * (b as f64 + 0.5),
            mean_accuracy: s / n as f64,
            n,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{generate, AttentionSignal, ErrorSignal, SynthConfig};
    use crate::data::{Dataset, Heatmap49, HeatmapKind};
    use rand::seq::SliceRandom;

    fn perfect(mode: Mode, n: usize, flip: f64, seed: u64) -> Dataset {
        let (attention_signal, error_signal) = match mode {
            Mode::Attention => (AttentionSignal::RelevantWhenCorrect, ErrorSignal::None),
            Mode::Error => (AttentionSignal::Random, ErrorSignal::RelevantWhenWrong),
            Mode::Joint => (
                AttentionSignal::AlwaysRelevant,
                ErrorSignal::RelevantWhenWrong,
            ),
        };
        generate(&SynthConfig {
            n_records: n,
            attention_signal,
            error_signal,
            flip_fraction: flip,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn shuffled<'a>(records: &[&'a Record], seed: u64) -> Vec<&'a Record> {
        let mut v = records.to_vec();
        v.shuffle(&mut seed::rng(seed));
        v
    }

    fn refs(ds: &Dataset) -> Vec<&Record> {
        ds.records().iter().collect()
    }

    fn record_with(rel_target: &[f64], correct: bool) -> Record {
        let human = Heatmap49::from_raw((0..49).map(|i| i as f64).collect(), HeatmapKind::Human);
        let mut r = Record::new("a", correct, human);
        r.attention_map = Some(Heatmap49::from_raw(
            rel_target.to_vec(),
            HeatmapKind::Attention,
        ));
        r
    }

    #[test]
    fn threshold_rules() {
        let up: Vec<f64> = (0..49).map(|i| i as f64).collect();
        let r = record_with(&up, true);
        let u = SimUser::new(Mode::Attention, 0.5, 0.0, 0.0, 1).unwrap();
        assert!(u.predict(&r).unwrap());
        let mut r = r;
        r.error_map = Some(Heatmap49::from_raw(up.clone(), HeatmapKind::Error));
        let u = SimUser::new(Mode::Error, 0.0, 0.8, 0.0, 1).unwrap();
        assert!(!u.predict(&r).unwrap());
        let u = SimUser::new(Mode::Joint, 0.5, 0.8, 0.0, 1).unwrap();
        assert!(!u.predict(&r).unwrap());
        let down: Vec<f64> = up.iter().rev().copied().collect();
        r.error_map = Some(Heatmap49::from_raw(down, HeatmapKind::Error));
        assert!(u.predict(&r).unwrap());
    }

    #[test]
    fn missing_maps_are_errors() {
        let r = record_with(&[1.0; 49], true);
        let u = SimUser::new(Mode::Error, 0.0, 0.5, 0.0, 1).unwrap();
        assert!(matches!(u.predict(&r), Err(Error::MissingMap { .. })));
    }

    #[test]
    fn invalid_users() {
        assert!(SimUser::new(Mode::Attention, 1.5, 0.0, 0.0, 0).is_err());
        assert!(SimUser::new(Mode::Attention, 0.5, 0.0, 0.5, 0).is_err());
    }

    #[test]
    fn heavy_noise_approaches_chance() {
        let ds = perfect(Mode::Attention, 10_000, 0.0, 1);
        let u = SimUser::new(Mode::Attention, 0.5, 0.0, 0.49, 7).unwrap();
        let acc = accuracy(&u, ds.records()).unwrap();
        assert!((acc - 0.5).abs() < 0.03, "{acc}");
    }

    #[test]
    fn perfect_signal_gives_perfect_accuracy() {
        let ds = perfect(Mode::Attention, 400, 0.0, 2);
        let u = SimUser::new(Mode::Attention, 0.9, 0.0, 0.0, 0).unwrap();
        assert_eq!(accuracy(&u, ds.records()).unwrap(), 1.0);
        let m = SimUser::with_median_thresholds(&refs(&ds), Mode::Attention, 0.0, 0).unwrap();
        assert!(accuracy(&m, ds.records()).unwrap() > 0.95);
    }

    #[test]
    fn random_signal_is_a_constant_guess() {
        for seed in 0..5 {
            let ds = generate(&SynthConfig {
                n_records: 1000,
                p_correct: 0.7,
                attention_signal: AttentionSignal::Random,
                seed,
                ..Default::default()
            })
            .unwrap();
            let u = SimUser::new(Mode::Attention, -1.0, 0.0, 0.0, 0).unwrap();
            let acc = accuracy(&u, ds.records()).unwrap();
            assert!((acc - 0.7).abs() < 0.05, "{acc}");
        }
    }

    #[test]
    fn accuracy_ignores_order_and_rejects_empty() {
        let ds = perfect(Mode::Attention, 200, 0.3, 3);
        let u = SimUser::new(Mode::Attention, 0.5, 0.0, 0.2, 9).unwrap();
        let rs = refs(&ds);
        let a = accuracy(&u, rs.iter().copied()).unwrap();
        let b = accuracy(&u, shuffled(&rs, 4)).unwrap();
        assert_eq!(a, b);
        assert!(accuracy(&u, std::iter::empty()).is_err());
    }

    #[test]
    fn joint_user_beats_attention_user_when_attention_is_uninformative() {
        let ds = perfect(Mode::Joint, 400, 0.0, 4);
        let att = SimUser::new(Mode::Attention, 0.5, 0.5, 0.0, 0).unwrap();
        let joint = SimUser::new(Mode::Joint, 0.5, 0.5, 0.0, 0).unwrap();
        let a = accuracy(&att, ds.records()).unwrap();
        let j = accuracy(&joint, ds.records()).unwrap();
        assert!(j >= a, "{j} < {a}");
        assert!(j > 0.95);
    }

    #[test]
    fn curve_rises_on_signal_and_is_flat_on_noise() {
        let ds = perfect(Mode::Attention, 400, 0.0, 5);
        let c = relevance_correctness_curve(&refs(&ds), 5, &Population::default()).unwrap();
        assert!(c.last().unwrap().predicted_correct > c[0].predicted_correct);
        for w in c.windows(2) {
            assert!(w[1].predicted_correct >= w[0].predicted_correct);
        }
        for seed in 0..10 {
            let ds = generate(&SynthConfig {
                attention_signal: AttentionSignal::Random,
                seed,
                ..Default::default()
            })
            .unwrap();
            let c = relevance_correctness_curve(
                &refs(&ds),
                5,
                &Population {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let hi = c.iter().map(|p| p.predicted_correct).fold(0.0, f64::max);
            let lo = c.iter().map(|p| p.predicted_correct).fold(1.0, f64::min);
            assert!(hi - lo < 0.15, "seed {seed}: {c:?}");
        }
    }

    #[test]
    fn single_noiseless_user_gives_a_step() {
        let ds = perfect(Mode::Attention, 200, 0.3, 6);
        let pop = Population {
            size: 1,
            jitter: 0.0,
            epsilon: 0.0,
            ..Default::default()
        };
        let rs = refs(&ds);
        let c = relevance_correctness_curve(&rs, rs.len(), &pop).unwrap();
        for p in &c {
            assert_eq!(
                p.predicted_correct,
                if p.mean_relevance >= 0.5 { 1.0 } else { 0.0 }
            );
        }
        assert!(relevance_correctness_curve(&refs(&ds)[..3], 5, &pop).is_err());
    }

    #[test]
    fn validation_tracks_users_in_every_mode() {
        for mode in Mode::ALL {
            let ds = perfect(mode, 400, 0.5, 7);
            let user = SimUser::new(mode, 0.5, 0.5, 0.1, 11).unwrap();
            let curve =
                validate_metric(&refs(&ds), &user, mode, &ValidationConfig::default()).unwrap();
            assert!(curve.pearson_r >= 0.9, "{mode}: {}", curve.pearson_r);
            assert!(!curve.degenerate);
            assert!(curve
                .bins
                .windows(2)
                .all(|w| w[0].bin_center < w[1].bin_center));
        }
    }

    #[test]
    fn noiseless_accuracy_follows_the_mix() {
        let ds = perfect(Mode::Attention, 400, 0.5, 8);
        let user = SimUser::new(Mode::Attention, 0.5, 0.0, 0.0, 0).unwrap();
        let c = validate_metric(
            &refs(&ds),
            &user,
            Mode::Attention,
            &ValidationConfig::default(),
        )
        .unwrap();
        for w in c.points.windows(2) {
            assert!(w[1].accuracy >= w[0].accuracy);
        }
    }

    #[test]
    fn two_subsets_are_flagged() {
        let ds = perfect(Mode::Attention, 400, 0.5, 9);
        let user = SimUser::new(Mode::Attention, 0.5, 0.0, 0.1, 0).unwrap();
        let cfg = ValidationConfig {
            n_subsets: 2,
            mix_range: (0.2, 0.8),
            ..Default::default()
        };
        let c = validate_metric(&refs(&ds), &user, Mode::Attention, &cfg).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.pearson_r.abs(), 1.0);
    }

    #[test]
    fn oversized_subsets_are_rejected() {
        let ds = perfect(Mode::Attention, 100, 0.5, 10);
        let user = SimUser::new(Mode::Attention, 0.5, 0.0, 0.1, 0).unwrap();
        let cfg = ValidationConfig {
            subset_size: 200,
            ..Default::default()
        };
        assert!(matches!(
            validate_metric(&refs(&ds), &user, Mode::Attention, &cfg),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn validation_is_deterministic() {
        let ds = perfect(Mode::Error, 400, 0.5, 11);
        let user = SimUser::new(Mode::Error, 0.0, 0.5, 0.1, 3).unwrap();
        let cfg = ValidationConfig::default();
        let rs = refs(&ds);
        let a = validate_metric_with(&rs, &user, Mode::Error, &cfg, Execution::Parallel).unwrap();
        let b = validate_metric_with(
            &shuffled(&rs, 1),
            &user,
            Mode::Error,
            &cfg,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
