//! Gameable reference explanations and a seeded synthetic dataset generator.
//!
//! The generator plants signal in map *ranks* so every metric code path can
//! be exercised at desk scale: human attention is a blob at some cell, a
//! "relevant" explanation is a copy of it and an "irrelevant" one is i.i.d.
//! uniform noise.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attnselect;
use crate::data::{
    aux, AttentionStack, Dataset, FeatureGrid, Heatmap49, HeatmapKind, Record, CELLS, GRID,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::seed;

/// Grid spread (in cells) of the default centered Gaussian.
pub const DEFAULT_SIGMA: f64 = 1.5;
const HUMAN_SIGMA: f64 = 1.2;
const HUMAN_BACKGROUND: f64 = 0.02;
const CENTER: usize = 3 * GRID + 3;

fn blob(center: usize, sigma: f64) -> Vec<f64> {
    let (ci, cj) = ((center / GRID) as f64, (center % GRID) as f64);
    (0..CELLS)
        .map(|k| {
            let (i, j) = ((k / GRID) as f64, (k % GRID) as f64);
            (-((i - ci).powi(2) + (j - cj).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Gaussian centered on cell (3, 3) with its peak scaled to 1.
pub fn centered_gaussian(sigma: f64) -> Result<Heatmap49> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    Ok(Heatmap49::from_raw(blob(CENTER, sigma), HeatmapKind::Attention).max_normalized())
}

/// I.i.d. uniform map keyed by `(seed, key)`.
pub fn uniform_map(seed: u64, key: &str, kind: HeatmapKind) -> Heatmap49 {
    let mut rng = seed::rng(seed::derive_str(seed, key));
    Heatmap49::from_raw((0..CELLS).map(|_| rng.random::<f64>()).collect(), kind)
}

/// Sets every record's attention map to the centered Gaussian where
/// `predictor` says the model is correct and to a seeded uniform map
/// elsewhere.
pub fn oracle_gated<F>(predictor: F, sigma: f64, seed: u64, ds: &Dataset) -> Result<Dataset>
where
    F: Fn(&Record) -> bool,
{
    let centered = centered_gaussian(sigma)?;
    let records = ds
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.attention_map = Some(if predictor(&r) {
                centered.clone()
            } else {
                uniform_map(seed, &r.id, HeatmapKind::Attention)
            });
            r
        })
        .collect();
    Ok(Dataset::new(records))
}

/// Replaces every attention map with the centered Gaussian.
pub fn centered_everywhere(sigma: f64, ds: &Dataset) -> Result<Dataset> {
    oracle_gated(|_| true, sigma, 0, ds)
}

/// Replaces every attention map with a seeded uniform map.
pub fn uniform_everywhere(seed: u64, ds: &Dataset) -> Dataset {
    let records = ds
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.attention_map = Some(uniform_map(seed, &r.id, HeatmapKind::Attention));
            r
        })
        .collect();
    Dataset::new(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSignal {
    RelevantWhenCorrect,
    AlwaysRelevant,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorSignal {
    RelevantWhenWrong,
    Random,
    None,
}

/// Where human attention lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanLayout {
    /// A uniformly random cell.
    Random,
    /// The grid center on correct records, a random cell on wrong ones.
    CenteredWhenCorrect,
}

/// How per-head attention is produced, if at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSource {
    /// Only a designated attention map.
    None,
    /// Precomputed per-(layer, head) maps; the planted head carries the signal.
    PerHeadMaps {
        layers: usize,
        heads: usize,
        planted: (usize, usize),
    },
    /// Full attention stacks with 49 leading image tokens.
    Stack {
        layers: usize,
        heads: usize,
        tokens: usize,
        planted: (usize, usize),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_records: usize,
    pub grid_channels: usize,
    pub p_correct: f64,
    pub attention_signal: AttentionSignal,
    pub error_signal: ErrorSignal,
    /// Log-scale multiplicative noise on explanation maps.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Fraction of records whose explanations behave as if the model's
    /// correctness were the opposite. Zero gives a perfectly separable set.
    pub flip_fraction: f64,
    pub human_layout: HumanLayout,
    pub head_source: HeadSource,
    pub question_dim: usize,
    pub logits_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_records: 400,
            grid_channels: 4,
            p_correct: 0.5,
            attention_signal: AttentionSignal::RelevantWhenCorrect,
            error_signal: ErrorSignal::None,
            noise_sigma: 0.0,
            seed: 0,
            flip_fraction: 0.0,
            human_layout: HumanLayout::Random,
            head_source: HeadSource::None,
            question_dim: 8,
            logits_dim: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_records < 8 {
            return bad(format!(
                "n_records must be at least 8, got {}",
                self.n_records
            ));
        }
        if !(self.p_correct > 0.0 && self.p_correct < 1.0) {
            return bad(format!(
                "p_correct must lie in (0, 1), got {}",
                self.p_correct
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(0.0..1.0).contains(&self.flip_fraction) {
            return bad(format!(
                "flip_fraction must lie in [0, 1), got {}",
                self.flip_fraction
            ));
        }
        if self.grid_channels == 0 {
            return bad("grid_channels must be positive".into());
        }
        let check_planted = |layers: usize, heads: usize, (l, h): (usize, usize)| {
            if layers == 0 || heads == 0 || l >= layers || h >= heads {
                Err(Error::InvalidParameter(format!(
                    "planted head ({l}, {h}) outside a {layers}x{heads} grid"
                )))
            } else {
                Ok(())
            }
        };
        match self.head_source {
            HeadSource::None => Ok(()),
            HeadSource::PerHeadMaps {
                layers,
                heads,
                planted,
            } => check_planted(layers, heads, planted),
            HeadSource::Stack {
                layers,
                heads,
                tokens,
                planted,
            } => {
                if tokens < CELLS {
                    return bad(format!("stack needs at least {CELLS} tokens, got {tokens}"));
                }
                check_planted(layers, heads, planted)
            }
        }
    }
}

impl fmt::Display for AttentionSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionSignal::RelevantWhenCorrect => "relevant-when-correct",
            AttentionSignal::AlwaysRelevant => "always-relevant",
            AttentionSignal::Random => "random",
        })
    }
}

impl FromStr for AttentionSignal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relevant-when-correct" => Ok(AttentionSignal::RelevantWhenCorrect),
            "always-relevant" => Ok(AttentionSignal::AlwaysRelevant),
            "random" => Ok(AttentionSignal::Random),
            other => Err(Error::InvalidParameter(format!(
                "unknown attention signal {other:?}"
            ))),
        }
    }
}

impl fmt::Display for ErrorSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorSignal::RelevantWhenWrong => "relevant-when-wrong",
            ErrorSignal::Random => "random",
            ErrorSignal::None => "none",
        })
    }
}

impl FromStr for ErrorSignal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relevant-when-wrong" => Ok(ErrorSignal::RelevantWhenWrong),
            "random" => Ok(ErrorSignal::Random),
            "none" => Ok(ErrorSignal::None),
            other => Err(Error::InvalidParameter(format!(
                "unknown error signal {other:?}"
            ))),
        }
    }
}

impl fmt::Display for HumanLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HumanLayout::Random => "random",
            HumanLayout::CenteredWhenCorrect => "centered-when-correct",
        })
    }
}

impl FromStr for HumanLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(HumanLayout::Random),
            "centered-when-correct" => Ok(HumanLayout::CenteredWhenCorrect),
            other => Err(Error::InvalidParameter(format!(
                "unknown human layout {other:?}"
            ))),
        }
    }
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    generate_with(config, Execution::default())
}

/// Builds `config.n_records` records. Record `i` draws from its own stream
/// derived from `(seed, i)`, so the output does not depend on scheduling.
pub fn generate_with(config: &SynthConfig, exec: Execution) -> Result<Dataset> {
    config.validate()?;
    let records = exec
        .map_range(config.n_records, |i| generate_record(config, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(records))
}

fn uniform(rng: &mut impl Rng, kind: HeatmapKind) -> Heatmap49 {
    Heatmap49::from_raw((0..CELLS).map(|_| rng.random::<f64>()).collect(), kind)
}

fn with_noise(map: Heatmap49, sigma: f64, rng: &mut impl Rng) -> Heatmap49 {
    if sigma == 0.0 {
        return map;
    }
    let noisy = map
        .values()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v * (sigma * z).exp()
        })
        .collect();
    Heatmap49::from_raw(noisy, map.kind())
}

fn generate_record(cfg: &SynthConfig, index: usize) -> Result<Record> {
    let mut rng = seed::rng(seed::derive(cfg.seed, index as u64));
    let correct = rng.random::<f64>() < cfg.p_correct;
    let flipped = rng.random::<f64>() < cfg.flip_fraction;
    let behaves_correct = correct != flipped;

    let center = match cfg.human_layout {
        HumanLayout::CenteredWhenCorrect if correct => CENTER,
        _ => rng.random_range(0..CELLS),
    };
    let human: Vec<f64> = blob(center, HUMAN_SIGMA)
        .into_iter()
        .map(|v| v + HUMAN_BACKGROUND * rng.random::<f64>())
        .collect();
    let human = Heatmap49::from_raw(human, HeatmapKind::Human);
    let relevant = |kind| human.clone().with_kind(kind);

    let attention = match cfg.attention_signal {
        AttentionSignal::RelevantWhenCorrect if behaves_correct => relevant(HeatmapKind::Attention),
        AttentionSignal::AlwaysRelevant => relevant(HeatmapKind::Attention),
        _ => uniform(&mut rng, HeatmapKind::Attention),
    };
    let attention = with_noise(attention, cfg.noise_sigma, &mut rng);
    let error = match cfg.error_signal {
        ErrorSignal::RelevantWhenWrong if !behaves_correct => Some(relevant(HeatmapKind::Error)),
        ErrorSignal::None => None,
        _ => Some(uniform(&mut rng, HeatmapKind::Error)),
    };
    let error = error.map(|m| with_noise(m, cfg.noise_sigma, &mut rng));

    let mut r = Record::new(format!("r{index:05}"), correct, human);
    r.error_map = error;
    r.feature_grid = Some(feature_grid(cfg, correct, center, &mut rng));

    match cfg.head_source {
        HeadSource::None => r.attention_map = Some(attention),
        HeadSource::PerHeadMaps {
            layers,
            heads,
            planted,
        } => {
            let mut maps = BTreeMap::new();
            for l in 0..layers {
                for h in 0..heads {
                    let m = if (l, h) == planted {
                        attention.clone()
                    } else {
                        uniform(&mut rng, HeatmapKind::Attention)
                    };
                    maps.insert((l, h), m);
                }
            }
            r.per_head_maps = Some(maps);
        }
        HeadSource::Stack {
            layers,
            heads,
            tokens,
            planted,
        } => {
            r.attention_stack = Some(planted_stack(
                layers, heads, tokens, planted, &attention, &mut rng,
            ));
        }
    }

    r.aux
        .insert(aux::QUESTION.into(), normals(cfg.question_dim, &mut rng));
    r.aux
        .insert(aux::ANSWER_LOGITS.into(), normals(cfg.logits_dim, &mut rng));
    r.aux.insert(
        aux::ATTENTION_SUMMARY.into(),
        attnselect::attention_summary(&r)?,
    );
    Ok(r)
}

fn normals(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Channel 0 encodes failure: a positive offset plus a blob at the human
/// attention center when the model fails, a negative offset plus a decoy
/// blob elsewhere when it succeeds. Its spatial mean is positive exactly on
/// failures. Remaining channels are noise.
fn feature_grid(
    cfg: &SynthConfig,
    correct: bool,
    center: usize,
    rng: &mut impl Rng,
) -> FeatureGrid {
    let c = cfg.grid_channels;
    let mut g = FeatureGrid::zeros(c);
    let (offset, spot) = if correct {
        let mut decoy = rng.random_range(0..CELLS - 1);
        if decoy >= center {
            decoy += 1;
        }
        (-0.3, decoy)
    } else {
        (0.1, center)
    };
    let b = blob(spot, HUMAN_SIGMA);
    for (cell, bv) in b.iter().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        g.set(cell, 0, offset + bv + 0.1 * z);
        for ch in 1..c {
            let z: f64 = StandardNormal.sample(rng);
            g.set(cell, ch, 0.5 * z);
        }
    }
    g
}

/// Row-normalized random attention. Rows of the planted head put half their
/// mass on the image tokens in proportion to `signal`. Weights are rounded
/// to f32 so the stack survives a round trip through the binary stack file.
fn planted_stack(
    layers: usize,
    heads: usize,
    tokens: usize,
    planted: (usize, usize),
    signal: &Heatmap49,
    rng: &mut impl Rng,
) -> AttentionStack {
    let total: f64 = signal.values().iter().sum();
    let target: Vec<f64> = signal.values().iter().map(|v| v / total).collect();
    let mut w = Vec::with_capacity(layers * heads * tokens * tokens);
    let mut row = vec![0.0f64; tokens];
    for l in 0..layers {
        for h in 0..heads {
            let is_planted = (l, h) == planted;
            for _ in 0..tokens {
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = rng.random::<f32>() as f64;
                    sum += *x;
                }
                for (j, x) in row.iter().enumerate() {
                    let mut v = x / sum;
                    if is_planted {
                        v *= 0.5;
                        if j < CELLS {
                            v += 0.5 * target[j];
                        }
                    }
                    w.push(v as f32 as f64);
                }
            }
        }
    }
    AttentionStack::from_raw(layers, heads, tokens, CELLS, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{self, Mode};
    use crate::stats::{self, VarianceMode};

    #[test]
    fn gaussian_peaks_at_center() {
        for sigma in [0.3, 1.0, 1.5, 4.0, 50.0] {
            let g = centered_gaussian(sigma).unwrap();
            assert_eq!(g.argmax(), CENTER);
            assert_eq!(g.max(), 1.0);
        }
    }

    #[test]
    fn gaussian_is_flip_symmetric() {
        let g = centered_gaussian(1.5).unwrap();
        for i in 0..GRID {
            for j in 0..GRID {
                assert_eq!(g.at(i, j), g.at(GRID - 1 - i, j));
                assert_eq!(g.at(i, j), g.at(i, GRID - 1 - j));
            }
        }
    }

    #[test]
    fn very_wide_gaussian_is_degenerate() {
        let g = centered_gaussian(1e12).unwrap();
        assert!(g.is_constant());
        let other: Vec<f64> = (0..49).map(|v| v as f64).collect();
        assert!(stats::spearman(g.values(), &other).unwrap().degenerate);
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        assert!(centered_gaussian(0.0).is_err());
        assert!(centered_gaussian(-1.0).is_err());
        assert!(centered_gaussian(f64::NAN).is_err());
    }

    #[test]
    fn always_true_gate_is_centered_everywhere() {
        let ds = generate(&SynthConfig {
            n_records: 20,
            ..Default::default()
        })
        .unwrap();
        let a = oracle_gated(|_| true, 1.5, 3, &ds).unwrap();
        let g = centered_gaussian(1.5).unwrap();
        assert!(a
            .records()
            .iter()
            .all(|r| r.attention_map.as_ref() == Some(&g)));
        let b = oracle_gated(|r| r.correct, 1.5, 3, &ds).unwrap();
        assert_eq!(b, oracle_gated(|r| r.correct, 1.5, 3, &ds).unwrap());
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let cfg = SynthConfig {
            n_records: 60,
            error_signal: ErrorSignal::RelevantWhenWrong,
            noise_sigma: 0.3,
            head_source: HeadSource::PerHeadMaps {
                layers: 2,
                heads: 3,
                planted: (1, 1),
            },
            seed: 5,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate_with(&cfg, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.validate().is_empty());
        let summary = &a.records()[0].aux[aux::ATTENTION_SUMMARY];
        assert_eq!(summary.len(), 12);
    }

    #[test]
    fn stack_rows_sum_to_one() {
        let cfg = SynthConfig {
            n_records: 8,
            head_source: HeadSource::Stack {
                layers: 1,
                heads: 2,
                tokens: 60,
                planted: (0, 1),
            },
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let s = ds.records()[0].attention_stack.as_ref().unwrap();
        for h in 0..2 {
            for row in s.head(0, h).chunks(60) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
        assert!(ds.validate().is_empty());
    }

    #[test]
    fn channel_zero_mean_encodes_failure() {
        let ds = generate(&SynthConfig {
            n_records: 300,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        for r in ds.records() {
            let m = r.feature_grid.as_ref().unwrap().channel_mean(0);
            assert_eq!(m > 0.0, !r.correct, "{} {m}", r.id);
        }
    }

    #[test]
    fn relevant_when_correct_is_helpful() {
        let ds = generate(&SynthConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let r = metrics::help(ds.records(), Mode::Attention, VarianceMode::Pooled).unwrap();
        assert!(r.help_z > 5.0, "{r:?}");
        assert_eq!(r.mean_rel_correct, 1.0);
    }

    #[test]
    fn invalid_configs() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig {
                n_records: 7,
                ..base.clone()
            },
            SynthConfig {
                p_correct: 1.0,
                ..base.clone()
            },
            SynthConfig {
                noise_sigma: -0.1,
                ..base.clone()
            },
            SynthConfig {
                flip_fraction: 1.0,
                ..base.clone()
            },
            SynthConfig {
                head_source: HeadSource::PerHeadMaps {
                    layers: 2,
                    heads: 2,
                    planted: (2, 0),
                },
                ..base.clone()
            },
            SynthConfig {
                head_source: HeadSource::Stack {
                    layers: 1,
                    heads: 1,
                    tokens: 40,
                    planted: (0, 0),
                },
                ..base.clone()
            },
        ] {
            assert!(generate(&cfg).is_err(), "{cfg:?}");
        }
    }
}
