//! Domain types: heatmaps, attention stacks, records and datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Side of the square image grid.
pub const GRID: usize = 7;
/// Number of cells in a flattened heatmap.
pub const CELLS: usize = GRID * GRID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeatmapKind {
    Attention,
    Error,
    Human,
}

/// A 7x7 saliency grid flattened row-major.
///
/// Values are stored unnormalized; relevance only looks at ranks. The
/// constructor enforces the invariants, while [`Heatmap49::from_raw`] accepts
/// anything so that ingested data can be reported on by
/// [`validate_record`] instead of being rejected at parse time.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap49 {
    values: Vec<f64>,
    kind: HeatmapKind,
}

impl Heatmap49 {
    pub fn new(values: Vec<f64>, kind: HeatmapKind) -> Result<Self> {
        let map = Self::from_raw(values, kind);
        match map.violations("heatmap").into_iter().next() {
            Some(v) => Err(Error::InvalidParameter(v)),
            None => Ok(map),
        }
    }

    pub fn from_raw(values: Vec<f64>, kind: HeatmapKind) -> Self {
        Self { values, kind }
    }

    pub fn zeros(kind: HeatmapKind) -> Self {
        Self::from_raw(vec![0.0; CELLS], kind)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn kind(&self) -> HeatmapKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: HeatmapKind) -> Self {
        self.kind = kind;
        self
    }

    /// Cell at grid row `row`, column `col`.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * GRID + col]
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// All values equal; such a map carries no ranking information.
    pub fn is_constant(&self) -> bool {
        match self.values.first() {
            Some(&first) => self.values.iter().all(|&v| v == first),
            None => true,
        }
    }

    /// Scaled so the maximum is 1. All-zero maps are returned unchanged.
    pub fn max_normalized(&self) -> Self {
        let m = self.max();
        if m > 0.0 {
            Self::from_raw(self.values.iter().map(|v| v / m).collect(), self.kind)
        } else {
            self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.values.iter().map(|&v| f(v)).collect(), self.kind)
    }

    /// Element-wise mean of equally sized maps.
    pub fn mean_of<'a>(maps: impl IntoIterator<Item = &'a Heatmap49>, kind: HeatmapKind) -> Self {
        let mut acc = vec![0.0; CELLS];
        let mut n = 0usize;
        for m in maps {
            for (a, v) in acc.iter_mut().zip(&m.values) {
                *a += v;
            }
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        Self::from_raw(acc, kind)
    }

    fn violations(&self, label: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.values.len() != CELLS {
            out.push(format!(
                "{label}: expected {CELLS} values, got {}",
                self.values.len()
            ));
        }
        for (k, &v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                out.push(format!("{label}: non-finite value at index {k}"));
            } else if v < 0.0 {
                out.push(format!("{label}: negative value at index {k}"));
            }
        }
        out
    }
}

/// Transformer attention weights of shape layers x heads x tokens x tokens,
/// stored row-major in (layer, head, source, target) order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    tokens: usize,
    image_tokens: usize,
    weights: Vec<f64>,
}

impl AttentionStack {
    pub fn new(
        layers: usize,
        heads: usize,
        tokens: usize,
        image_tokens: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let stack = Self::from_raw(layers, heads, tokens, image_tokens, weights);
        match stack.violations().into_iter().next() {
            Some(v) => Err(Error::InvalidParameter(v)),
            None => Ok(stack),
        }
    }

    pub(crate) fn from_raw(
        layers: usize,
        heads: usize,
        tokens: usize,
        image_tokens: usize,
        weights: Vec<f64>,
    ) -> Self {
        Self {
            layers,
            heads,
            tokens,
            image_tokens,
            weights,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn image_tokens(&self) -> usize {
        self.image_tokens
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The `tokens x tokens` block for one (layer, head).
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let block = self.tokens * self.tokens;
        let start = (layer * self.heads + head) * block;
        &self.weights[start..start + block]
    }

    pub fn at(&self, layer: usize, head: usize, source: usize, target: usize) -> f64 {
        self.head(layer, head)[source * self.tokens + target]
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let expected = self.layers * self.heads * self.tokens * self.tokens;
        if self.layers == 0 || self.heads == 0 || self.tokens == 0 {
            out.push("attention_stack: zero-sized dimension".to_string());
        }
        if self.weights.len() != expected {
            out.push(format!(
                "attention_stack: expected {expected} weights, got {}",
                self.weights.len()
            ));
        }
        if self.image_tokens > self.tokens {
            out.push(format!(
                "attention_stack: image_token_count {} exceeds token count {}",
                self.image_tokens, self.tokens
            ));
        }
        let side = (self.image_tokens as f64).sqrt().round() as usize;
        if side * side != self.image_tokens {
            out.push(format!(
                "attention_stack: image_token_count {} is not a perfect square",
                self.image_tokens
            ));
        }
        if let Some(k) = self.weights.iter().position(|w| !w.is_finite()) {
            out.push(format!("attention_stack: non-finite weight at index {k}"));
        }
        if let Some(k) = self.weights.iter().position(|&w| w < 0.0) {
            out.push(format!("attention_stack: negative weight at index {k}"));
        }
        out
    }
}

/// A 7x7xC feature tensor stored row-major as `[(row * 7 + col) * C + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != CELLS * channels {
            return Err(Error::DimensionMismatch {
                what: "feature_grid".into(),
                expected: CELLS * channels,
                got: values.len(),
            });
        }
        Ok(Self { channels, values })
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            values: vec![0.0; CELLS * channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, cell: usize, channel: usize) -> f64 {
        self.values[cell * self.channels + channel]
    }

    pub fn set(&mut self, cell: usize, channel: usize, v: f64) {
        self.values[cell * self.channels + channel] = v;
    }

    /// Spatial mean of one channel.
    pub fn channel_mean(&self, channel: usize) -> f64 {
        (0..CELLS).map(|c| self.at(c, channel)).sum::<f64>() / CELLS as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split {other:?}"))),
        }
    }
}

/// Location of a record's attention stack inside a binary stack file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackRef {
    pub path: String,
    pub index: usize,
}

impl fmt::Display for StackRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.path, self.index)
    }
}

impl FromStr for StackRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (path, index) = s.rsplit_once('#').ok_or_else(|| {
            Error::InvalidParameter(format!("stack reference {s:?} lacks '#index'"))
        })?;
        let index = index.parse().map_err(|_| {
            Error::InvalidParameter(format!("stack reference {s:?} has a bad index"))
        })?;
        if path.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "stack reference {s:?} has an empty path"
            )));
        }
        Ok(StackRef {
            path: path.to_string(),
            index,
        })
    }
}

/// Names of the conditioning vectors in [`Record::aux`].
pub mod aux {
    pub const QUESTION: &str = "question";
    pub const ATTENTION_SUMMARY: &str = "attention_summary";
    pub const ANSWER_LOGITS: &str = "answer_logits";
}

/// One image-question example.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub correct: bool,
    pub split: Split,
    pub human_attention: Heatmap49,
    pub attention_stack: Option<AttentionStack>,
    pub stack_ref: Option<StackRef>,
    /// Keyed by (layer, head).
    pub per_head_maps: Option<BTreeMap<(usize, usize), Heatmap49>>,
    pub attention_map: Option<Heatmap49>,
    pub error_map: Option<Heatmap49>,
    pub feature_grid: Option<FeatureGrid>,
    pub aux: BTreeMap<String, Vec<f64>>,
}

impl Record {
    pub fn new(id: impl Into<String>, correct: bool, human_attention: Heatmap49) -> Self {
        Self {
            id: id.into(),
            correct,
            split: Split::Test,
            human_attention,
            attention_stack: None,
            stack_ref: None,
            per_head_maps: None,
            attention_map: None,
            error_map: None,
            feature_grid: None,
            aux: BTreeMap::new(),
        }
    }

    pub fn has_attention_source(&self) -> bool {
        self.attention_stack.is_some()
            || self.stack_ref.is_some()
            || self.per_head_maps.is_some()
            || self.attention_map.is_some()
    }

    /// Names of the maps on this record that are constant.
    pub fn constant_maps(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.human_attention.is_constant() {
            out.push("human_attention");
        }
        if self
            .attention_map
            .as_ref()
            .is_some_and(Heatmap49::is_constant)
        {
            out.push("attention_map");
        }
        if self.error_map.as_ref().is_some_and(Heatmap49::is_constant) {
            out.push("error_map");
        }
        out
    }
}

/// Every invariant violation of `r`, empty when the record is valid.
pub fn validate_record(r: &Record) -> Vec<String> {
    let mut out = Vec::new();
    if r.id.is_empty() {
        out.push("id: empty".to_string());
    }
    out.extend(r.human_attention.violations("human_attention"));
    if let Some(m) = &r.attention_map {
        out.extend(m.violations("attention_map"));
    }
    if let Some(m) = &r.error_map {
        out.extend(m.violations("error_map"));
    }
    if let Some(maps) = &r.per_head_maps {
        for ((l, h), m) in maps {
            out.extend(m.violations(&format!("per_head_maps[{l}.{h}]")));
        }
    }
    if let Some(s) = &r.attention_stack {
        out.extend(s.violations());
    }
    if let Some(g) = &r.feature_grid {
        if g.values.len() != CELLS * g.channels {
            out.push(format!(
                "feature_grid: expected {} values, got {}",
                CELLS * g.channels,
                g.values.len()
            ));
        }
        if let Some(k) = g.values.iter().position(|v| !v.is_finite()) {
            out.push(format!("feature_grid: non-finite value at index {k}"));
        }
    }
    for (name, v) in &r.aux {
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            out.push(format!("aux.{name}: non-finite value at index {k}"));
        }
    }
    if !r.has_attention_source() {
        out.push(
            "no attention source: need attention_stack, per_head_maps or attention_map".to_string(),
        );
    }
    out
}

/// An ordered collection of records. Immutable once built; the split index
/// is derived from the records' split tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [Record] {
        &mut self.records
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_index(&self) -> BTreeMap<Split, Vec<usize>> {
        let mut idx: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            idx.entry(r.split).or_default().push(i);
        }
        idx
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_records(&self, split: Split) -> Vec<Record> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect()
    }

    /// Per-record violations (by position) including duplicate ids.
    pub fn validate(&self) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, r) in self.records.iter().enumerate() {
            for v in validate_record(r) {
                out.push((i, v));
            }
            if !r.id.is_empty() && !seen.insert(r.id.as_str()) {
                out.push((i, format!("id: duplicate {:?}", r.id)));
            }
        }
        out
    }
}

/// Assigns every record to val or test by a seeded shuffle;
/// `round(n * val_fraction)` records go to val.
pub fn make_splits(ds: Dataset, val_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    make_splits_with_train(ds, 0.0, val_fraction, seed)
}

/// Three-way variant of [`make_splits`]: train, then val, then the rest test.
pub fn make_splits_with_train(
    ds: Dataset,
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(train_fraction) || !ok(val_fraction) || train_fraction + val_fraction >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "split fractions train={train_fraction} val={val_fraction} must be in [0, 1) with sum < 1"
        )));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_train);

    let mut records = ds.into_records();
    for (pos, &i) in order.iter().enumerate() {
        records[i].split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset::new(records))
}
