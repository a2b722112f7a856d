//! 2-D attention maps from transformer attention stacks, and selection of the
//! layer/head combination whose map is most helpful on a validation split.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AttentionStack, Dataset, Heatmap49, HeatmapKind, Record, Split, CELLS};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{self, Mode};
use crate::stats::VarianceMode;

/// Attention paid to each image token, averaged over all source tokens:
/// `map[j] = (1/d) * sum_i W[layer, head, i, j]` for the image tokens `j`.
pub fn extract_head_map(stack: &AttentionStack, layer: usize, head: usize) -> Result<Heatmap49> {
    if layer >= stack.layers() {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            bound: stack.layers(),
        });
    }
    if head >= stack.heads() {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: head,
            bound: stack.heads(),
        });
    }
    if stack.image_tokens() != CELLS {
        return Err(Error::DimensionMismatch {
            what: "image token count".into(),
            expected: CELLS,
            got: stack.image_tokens(),
        });
    }
    let d = stack.tokens();
    let block = stack.head(layer, head);
    let mut out = vec![0.0; CELLS];
    for row in block.chunks_exact(d) {
        for (o, w) in out.iter_mut().zip(&row[..CELLS]) {
            *o += w;
        }
    }
    out.iter_mut().for_each(|v| *v /= d as f64);
    Ok(Heatmap49::from_raw(out, HeatmapKind::Attention))
}

/// Conventional display: head-averaged map of the last layer.
pub fn extract_baseline(stack: &AttentionStack) -> Result<Heatmap49> {
    let last = stack.layers() - 1;
    let maps = (0..stack.heads())
        .map(|h| extract_head_map(stack, last, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(Heatmap49::mean_of(&maps, HeatmapKind::Attention))
}

/// Every (layer, head) map of one record, layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrid {
    pub layers: usize,
    pub heads: usize,
    maps: Vec<Heatmap49>,
}

impl HeadGrid {
    pub fn get(&self, layer: usize, head: usize) -> &Heatmap49 {
        &self.maps[layer * self.heads + head]
    }

    pub fn from_stack(stack: &AttentionStack) -> Result<Self> {
        let mut maps = Vec::with_capacity(stack.layers() * stack.heads());
        for l in 0..stack.layers() {
            for h in 0..stack.heads() {
                maps.push(extract_head_map(stack, l, h)?);
            }
        }
        Ok(Self {
            layers: stack.layers(),
            heads: stack.heads(),
            maps,
        })
    }

    /// Head maps of a record, from its stack if present, else from its
    /// precomputed per-head maps (which must cover a full grid).
    pub fn from_record(r: &Record) -> Result<Self> {
        if let Some(stack) = &r.attention_stack {
            return Self::from_stack(stack);
        }
        let per_head = r.per_head_maps.as_ref().ok_or_else(|| Error::MissingMap {
            id: r.id.clone(),
            what: "attention_stack or per_head_maps",
        })?;
        let layers = per_head.keys().map(|k| k.0 + 1).max().unwrap_or(0);
        let heads = per_head.keys().map(|k| k.1 + 1).max().unwrap_or(0);
        if layers * heads != per_head.len() || layers == 0 {
            return Err(Error::DimensionMismatch {
                what: format!("record {}: per_head_maps grid {layers}x{heads}", r.id),
                expected: layers * heads,
                got: per_head.len(),
            });
        }
        // BTreeMap order over (layer, head) is already layer-major
        Ok(Self {
            layers,
            heads,
            maps: per_head.values().cloned().collect(),
        })
    }

    /// Map shown for `candidate` under `strategy`.
    pub fn candidate_map(&self, strategy: Strategy, candidate: Candidate) -> Heatmap49 {
        match (strategy, candidate.layer, candidate.head) {
            (Strategy::BestSingle, Some(l), Some(h)) => self.get(l, h).clone(),
            (Strategy::BestHead, _, Some(h)) => Heatmap49::mean_of(
                (0..self.layers).map(|l| self.get(l, h)),
                HeatmapKind::Attention,
            ),
            (_, Some(l), _) => Heatmap49::mean_of(
                (0..self.heads).map(|h| self.get(l, h)),
                HeatmapKind::Attention,
            ),
            _ => unreachable!("candidate {candidate:?} does not match {strategy:?}"),
        }
    }
}

/// Fixed-length summary of a record's attention for conditioning the
/// justifier: peak-to-mean ratio and normalized entropy of every head map
/// (layer-major), or of the designated attention map when no head maps exist.
pub fn attention_summary(r: &Record) -> Result<Vec<f64>> {
    let stats = |m: &Heatmap49| -> [f64; 2] {
        let v = m.values();
        let total: f64 = v.iter().sum();
        if total <= 0.0 {
            return [0.0, 0.0];
        }
        let mean = total / v.len() as f64;
        let entropy: f64 = v
            .iter()
            .map(|x| x / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        [m.max() / mean, entropy / (v.len() as f64).ln()]
    };
    if r.attention_stack.is_some() || r.per_head_maps.is_some() {
        let g = HeadGrid::from_record(r)?;
        Ok(g.maps.iter().flat_map(stats).collect())
    } else if let Some(m) = &r.attention_map {
        Ok(stats(m).to_vec())
    } else {
        Err(Error::MissingMap {
            id: r.id.clone(),
            what: "attention source",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Head average of the last layer; no search.
    BaselineLastLayer,
    /// Single (layer, head) map.
    BestSingle,
    /// Per-head maps averaged over layers.
    BestHead,
    /// Per-layer maps averaged over heads.
    BestLayer,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BaselineLastLayer => "baseline",
            Strategy::BestSingle => "best",
            Strategy::BestHead => "best-head",
            Strategy::BestLayer => "best-layer",
        }
    }

    /// Candidates in tie-breaking order: lowest layer first, then lowest head.
    pub fn candidates(self, layers: usize, heads: usize) -> Vec<Candidate> {
        match self {
            Strategy::BaselineLastLayer => vec![Candidate::layer(layers - 1)],
            Strategy::BestSingle => (0..layers)
                .flat_map(|l| (0..heads).map(move |h| Candidate::single(l, h)))
                .collect(),
            Strategy::BestHead => (0..heads).map(Candidate::head).collect(),
            Strategy::BestLayer => (0..layers).map(Candidate::layer).collect(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::BaselineLastLayer),
            "best" => Ok(Strategy::BestSingle),
            "best-head" => Ok(Strategy::BestHead),
            "best-layer" => Ok(Strategy::BestLayer),
            other => Err(Error::InvalidParameter(format!(
                "unknown strategy {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub layer: Option<usize>,
    pub head: Option<usize>,
}

impl Candidate {
    pub fn single(layer: usize, head: usize) -> Self {
        Self {
            layer: Some(layer),
            head: Some(head),
        }
    }

    pub fn layer(layer: usize) -> Self {
        Self {
            layer: Some(layer),
            head: None,
        }
    }

    pub fn head(head: usize) -> Self {
        Self {
            layer: None,
            head: Some(head),
        }
    }
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = |v: Option<usize>| v.map_or("*".to_string(), |x| x.to_string());
        write!(f, "{}.{}", part(self.layer), part(self.head))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub help_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCandidate {
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub split: Split,
    pub chosen_layer: Option<usize>,
    pub chosen_head: Option<usize>,
    pub val_help_z: f64,
    /// HELP^A_Z of every scored candidate, in candidate order.
    pub per_candidate_scores: Vec<CandidateScore>,
    /// Candidates whose score was undefined on the split.
    pub skipped: Vec<SkippedCandidate>,
    /// Records (over all splits) that received the chosen map.
    pub annotated: usize,
}

pub fn select_best(ds: &mut Dataset, strategy: Strategy, split: Split) -> Result<SelectionResult> {
    select_best_with(ds, strategy, split, Execution::default())
}

/// Scores every candidate of `strategy` by HELP^A_Z on `split`, picks the
/// highest (ties to the earliest candidate), and writes the chosen map as the
/// designated `attention_map` of every record that carries head maps.
///
/// Only the correctness labels of `split` are read.
pub fn select_best_with(
    ds: &mut Dataset,
    strategy: Strategy,
    split: Split,
    exec: Execution,
) -> Result<SelectionResult> {
    let records = ds.split(split);
    let n_correct = records.iter().filter(|r| r.correct).count();
    let n_wrong = records.len() - n_correct;
    if n_correct < 2 || n_wrong < 2 {
        return Err(Error::InsufficientClasses {
            correct: n_correct,
            wrong: n_wrong,
        });
    }
    let grids = exec
        .map(&records, |r| HeadGrid::from_record(r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (layers, heads) = (grids[0].layers, grids[0].heads);
    if let Some((r, g)) = records
        .iter()
        .zip(&grids)
        .find(|(_, g)| (g.layers, g.heads) != (layers, heads))
    {
        return Err(Error::DimensionMismatch {
            what: format!("record {}: layer x head count", r.id),
            expected: layers * heads,
            got: g.layers * g.heads,
        });
    }

    let candidates = strategy.candidates(layers, heads);
    let scores = exec.map(&candidates, |&c| {
        let scored = records.iter().zip(&grids).map(|(r, g)| {
            let map = g.candidate_map(strategy, c);
            metrics::map_relevance(&map, &r.human_attention)
                .map(|rel| (r.id.as_str(), r.correct, rel))
        });
        let scored = scored.collect::<Result<Vec<_>>>()?;
        metrics::help_from_scored(Mode::Attention, scored, VarianceMode::Pooled)
    });

    let mut per_candidate_scores = Vec::new();
    let mut skipped = Vec::new();
    let mut best: Option<(Candidate, f64)> = None;
    let mut first_err = None;
    for (c, score) in candidates.iter().zip(scores) {
        match score {
            Ok(report) => {
                per_candidate_scores.push(CandidateScore {
                    layer: c.layer,
                    head: c.head,
                    help_z: report.help_z,
                });
                if best.is_none_or(|(_, z)| report.help_z > z) {
                    best = Some((*c, report.help_z));
                }
            }
            Err(e @ (Error::ZeroStandardError | Error::InsufficientClasses { .. })) => {
                skipped.push(SkippedCandidate {
                    layer: c.layer,
                    head: c.head,
                    reason: e.to_string(),
                });
                first_err.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    let Some((chosen, val_help_z)) = best else {
        return Err(first_err.expect("at least one candidate"));
    };
    drop(records);

    let mut annotated = 0;
    let mut failures = Vec::new();
    let records = ds.records_mut();
    let updates = exec.map(records, |r| {
        if r.attention_stack.is_none() && r.per_head_maps.is_none() {
            return Ok(None);
        }
        let g = HeadGrid::from_record(r)?;
        if (g.layers, g.heads) != (layers, heads) {
            return Err(Error::DimensionMismatch {
                what: format!("record {}: layer x head count", r.id),
                expected: layers * heads,
                got: g.layers * g.heads,
            });
        }
        Ok(Some(g.candidate_map(strategy, chosen)))
    });
    for (r, u) in records.iter_mut().zip(updates) {
        match u {
            Ok(Some(map)) => {
                r.attention_map = Some(map);
                annotated += 1;
            }
            Ok(None) => {}
            Err(e) => failures.push(e),
        }
    }
    if let Some(e) = failures.into_iter().next() {
        return Err(e);
    }

    Ok(SelectionResult {
        strategy,
        split,
        chosen_layer: chosen.layer,
        chosen_head: chosen.head,
        val_help_z,
        per_candidate_scores,
        skipped,
        annotated,
    })
}
