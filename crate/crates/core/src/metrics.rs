//! Per-record relevance and set-level helpfulness (HELP_Z) scores.
//!
//! Relevance is the Spearman correlation between two heatmaps of a record.
//! Helpfulness is the two-sample z statistic comparing relevance on records
//! the model got right against records it got wrong. For error and joint
//! explanations the sign is flipped, since those should be *more* relevant
//! when the model fails; a higher score always means more helpful.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Heatmap49, Record};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::stats::{self, VarianceMode};

/// Which explanation is being scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Attention map against human attention.
    Attention,
    /// Error map against human attention.
    Error,
    /// Error map against attention map.
    Joint,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Attention, Mode::Error, Mode::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Attention => "attention",
            Mode::Error => "error",
            Mode::Joint => "joint",
        }
    }

    /// +1 when relevance should be higher on correct records, -1 otherwise.
    pub fn sign(self) -> f64 {
        match self {
            Mode::Attention => 1.0,
            Mode::Error | Mode::Joint => -1.0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Mode::Attention),
            "error" => Ok(Mode::Error),
            "joint" => Ok(Mode::Joint),
            other => Err(Error::InvalidParameter(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Relevance {
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RelevanceTriple {
    pub rel_a: Option<Relevance>,
    pub rel_err: Option<Relevance>,
    pub rel_ea: Option<Relevance>,
}

/// Spearman relevance of `explanation` against `reference`.
pub fn map_relevance(explanation: &Heatmap49, reference: &Heatmap49) -> Result<Relevance> {
    let c = stats::spearman(explanation.values(), reference.values())?;
    Ok(Relevance {
        value: c.rho,
        degenerate: c.degenerate,
    })
}

fn required<'a>(
    r: &'a Record,
    map: &'a Option<Heatmap49>,
    what: &'static str,
) -> Result<&'a Heatmap49> {
    map.as_ref().ok_or_else(|| Error::MissingMap {
        id: r.id.clone(),
        what,
    })
}

/// The pair of maps a mode compares: (explanation, reference).
fn maps_for(r: &Record, mode: Mode) -> Result<(&Heatmap49, &Heatmap49)> {
    Ok(match mode {
        Mode::Attention => (
            required(r, &r.attention_map, "attention_map")?,
            &r.human_attention,
        ),
        Mode::Error => (required(r, &r.error_map, "error_map")?, &r.human_attention),
        Mode::Joint => (
            required(r, &r.error_map, "error_map")?,
            required(r, &r.attention_map, "attention_map")?,
        ),
    })
}

pub fn relevance(r: &Record, mode: Mode) -> Result<Relevance> {
    let (a, b) = maps_for(r, mode)?;
    map_relevance(a, b)
}

/// All relevances computable from the maps present on `r`.
pub fn relevance_triple(r: &Record) -> Result<RelevanceTriple> {
    let get = |m: Mode| -> Result<Option<Relevance>> {
        match relevance(r, m) {
            Ok(v) => Ok(Some(v)),
            Err(Error::MissingMap { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(RelevanceTriple {
        rel_a: get(Mode::Attention)?,
        rel_err: get(Mode::Error)?,
        rel_ea: get(Mode::Joint)?,
    })
}

/// Helpfulness of one explanation mode over a record set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelpReport {
    pub mode: Mode,
    /// Mean relevance over correct records.
    pub mean_rel_correct: f64,
    /// Mean relevance over wrong records.
    pub mean_rel_wrong: f64,
    pub help_z: f64,
    pub p_value: f64,
    pub n_correct: usize,
    pub n_wrong: usize,
    /// Records left out because their relevance was degenerate.
    pub excluded_degenerate: usize,
    pub variance_mode: VarianceMode,
}

/// HELP_Z from relevance values already split by correctness.
pub fn help_from_relevances(
    mode: Mode,
    correct: &[f64],
    wrong: &[f64],
    variance: VarianceMode,
) -> Result<HelpReport> {
    if correct.len() < 2 || wrong.len() < 2 {
        return Err(Error::InsufficientClasses {
            correct: correct.len(),
            wrong: wrong.len(),
        });
    }
    let z = stats::ztest_two_sample(correct, wrong, variance)?;
    // `+ 0.0` keeps a zero statistic from printing as -0
    let help_z = mode.sign() * z.t_stat + 0.0;
    Ok(HelpReport {
        mode,
        mean_rel_correct: z.mean1,
        mean_rel_wrong: z.mean2,
        help_z,
        p_value: z.p_value,
        n_correct: z.n1,
        n_wrong: z.n2,
        excluded_degenerate: 0,
        variance_mode: variance,
    })
}

/// HELP_Z of `mode` over `records` using the default execution.
pub fn help<'a>(
    records: impl IntoIterator<Item = &'a Record>,
    mode: Mode,
    variance: VarianceMode,
) -> Result<HelpReport> {
    help_with(records, mode, variance, Execution::default())
}

pub fn help_with<'a>(
    records: impl IntoIterator<Item = &'a Record>,
    mode: Mode,
    variance: VarianceMode,
    exec: Execution,
) -> Result<HelpReport> {
    let records: Vec<&Record> = records.into_iter().collect();
    let rels = exec.map(&records, |r| relevance(r, mode));
    let mut scored = Vec::with_capacity(records.len());
    for (r, rel) in records.iter().zip(rels) {
        scored.push((r.id.as_str(), r.correct, rel?));
    }
    help_from_scored(mode, scored, variance)
}

/// HELP_Z from `(record id, correct, relevance)` triples. Degenerate
/// relevances are excluded and counted; the rest are folded in id order.
pub fn help_from_scored<'a>(
    mode: Mode,
    scored: impl IntoIterator<Item = (&'a str, bool, Relevance)>,
    variance: VarianceMode,
) -> Result<HelpReport> {
    let mut kept = Vec::new();
    let mut excluded = 0;
    for (id, correct, rel) in scored {
        if rel.degenerate {
            excluded += 1;
        } else {
            kept.push((id, correct, rel.value));
        }
    }
    // fixed fold order makes the result independent of the input order
    kept.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    let correct: Vec<f64> = kept.iter().filter(|s| s.1).map(|s| s.2).collect();
    let wrong: Vec<f64> = kept.iter().filter(|s| !s.1).map(|s| s.2).collect();

    let mut report = help_from_relevances(mode, &correct, &wrong, variance)?;
    report.excluded_degenerate = excluded;
    Ok(report)
}

/// HELP^A_Z with pooled variance.
pub fn help_attention<'a>(records: impl IntoIterator<Item = &'a Record>) -> Result<HelpReport> {
    help(records, Mode::Attention, VarianceMode::Pooled)
}

/// HELP^ERR_Z with pooled variance.
pub fn help_error<'a>(records: impl IntoIterator<Item = &'a Record>) -> Result<HelpReport> {
    help(records, Mode::Error, VarianceMode::Pooled)
}

/// HELP^EA_Z with pooled variance.
pub fn help_joint<'a>(records: impl IntoIterator<Item = &'a Record>) -> Result<HelpReport> {
    help(records, Mode::Joint, VarianceMode::Pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HeatmapKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heat(values: Vec<f64>, kind: HeatmapKind) -> Heatmap49 {
        Heatmap49::from_raw(values, kind)
    }

    fn ramp() -> Vec<f64> {
        (0..49).map(|i| i as f64 + 1.0).collect()
    }

    /// Maps whose Spearman correlation with `ramp()` is exactly `target`
    /// cannot be dialed in generally, so tests build records from a chosen
    /// permutation and compute the expected relevance with the oracle below.
    fn record(id: &str, correct: bool, attn: Vec<f64>) -> Record {
        let mut r = Record::new(id, correct, heat(ramp(), HeatmapKind::Human));
        r.attention_map = Some(heat(attn, HeatmapKind::Attention));
        r
    }

    fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let less = v.iter().filter(|&&b| b < a).count() as f64;
                    let eq = v.iter().filter(|&&b| b == a).count() as f64;
                    1.0 + less + (eq - 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn identity_and_reversal() {
        let r = record("a", true, ramp());
        assert_eq!(relevance(&r, Mode::Attention).unwrap().value, 1.0);
        let r = record("a", true, ramp().into_iter().rev().collect());
        assert_eq!(relevance(&r, Mode::Attention).unwrap().value, -1.0);
    }

    #[test]
    fn random_pair_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
        let mut r = record("a", true, a.clone());
        r.human_attention = heat(
            (0..49).map(|_| rng.random::<f64>()).collect(),
            HeatmapKind::Human,
        );
        let expected = oracle_spearman(&a, r.human_attention.values());
        assert!((relevance(&r, Mode::Attention).unwrap().value - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_maps_are_errors() {
        let mut r = record("a", true, ramp());
        assert!(matches!(
            relevance(&r, Mode::Error),
            Err(Error::MissingMap {
                what: "error_map",
                ..
            })
        ));
        r.attention_map = None;
        assert!(relevance(&r, Mode::Attention).is_err());
        assert_eq!(relevance_triple(&r).unwrap(), RelevanceTriple::default());
    }

    #[test]
    fn help_from_separated_relevances() {
        let c = [0.8, 0.81, 0.79];
        let w = [0.2, 0.21, 0.19];
        // pooled: delta 0.6, s^2 = 1e-4 in both, SE = 0.01 * sqrt(2/3)
        let expected = 0.6 / (0.01 * (2.0f64 / 3.0).sqrt());
        let r = help_from_relevances(Mode::Attention, &c, &w, VarianceMode::Pooled).unwrap();
        assert!(r.help_z > 10.0);
        assert!((r.help_z - expected).abs() < 1e-6);
        let e = help_from_relevances(Mode::Error, &w, &c, VarianceMode::Pooled).unwrap();
        assert!((e.help_z - expected).abs() < 1e-6);
    }

    #[test]
    fn identical_classes_score_zero() {
        let v = [0.1, 0.4, 0.3];
        for mode in Mode::ALL {
            let r = help_from_relevances(mode, &v, &v, VarianceMode::Pooled).unwrap();
            assert_eq!(r.help_z.to_bits(), 0.0f64.to_bits());
        }
    }

    #[test]
    fn insufficient_classes() {
        assert!(matches!(
            help_from_relevances(Mode::Attention, &[0.1], &[0.2, 0.3], VarianceMode::Pooled),
            Err(Error::InsufficientClasses {
                correct: 1,
                wrong: 2
            })
        ));
    }

    fn shuffled(seed: u64) -> Vec<f64> {
        use rand::seq::SliceRandom;
        let mut v = ramp();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        v
    }

    fn mixed_set() -> Vec<Record> {
        let mut out = Vec::new();
        for i in 0..20u64 {
            let correct = i % 2 == 0;
            let attn = if correct && i % 4 == 0 {
                ramp()
            } else {
                shuffled(i)
            };
            out.push(record(&format!("r{i:02}"), correct, attn));
        }
        out
    }

    #[test]
    fn degenerate_relevances_are_excluded() {
        let mut set = mixed_set();
        set[3].attention_map = Some(heat(vec![0.5; 49], HeatmapKind::Attention));
        let r = help_attention(&set).unwrap();
        assert_eq!(r.excluded_degenerate, 1);
        assert_eq!(r.n_correct + r.n_wrong, 19);
    }

    #[test]
    fn error_mode_swapping_labels_negates() {
        let mut set = mixed_set();
        for r in &mut set {
            r.error_map = r.attention_map.clone();
        }
        let a = help_error(&set).unwrap();
        for r in &mut set {
            r.correct = !r.correct;
        }
        let b = help_error(&set).unwrap();
        assert_eq!(a.help_z, -b.help_z);
    }

    #[test]
    fn joint_alignment_signals_failure() {
        let mut set = Vec::new();
        for i in 0..10 {
            let correct = i % 2 == 0;
            let attn = shuffled(i);
            let err = if correct {
                attn.iter().map(|v| 50.0 - v).collect()
            } else {
                attn.clone()
            };
            let mut r = record(&format!("j{i}"), correct, attn);
            r.error_map = Some(heat(err, HeatmapKind::Error));
            set.push(r);
        }
        // REL^EA is exactly -1 on correct and +1 on wrong: both classes are
        // constant, so the statistic is undefined
        assert!(matches!(help_joint(&set), Err(Error::ZeroStandardError)));
        // one wrong record with a partially aligned map makes it finite and large
        let mut v = set[1].attention_map.clone().unwrap().into_values();
        v.swap(0, 1);
        set[1].error_map = Some(heat(v, HeatmapKind::Error));
        let r = help_joint(&set).unwrap();
        assert!(r.help_z > 10.0, "{}", r.help_z);
        assert_eq!(r.mean_rel_correct, -1.0);
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let set = mixed_set();
        let a = help_attention(&set).unwrap();
        let mut rev = set.clone();
        rev.reverse();
        let b = help_attention(&rev).unwrap();
        assert_eq!(a, b);
        let seq = help_with(
            &set,
            Mode::Attention,
            VarianceMode::Pooled,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(a, seq);
    }
}
