//! Line-delimited JSON records.
//!
//! Each line is one object. Attention stacks are too bulky for text and live
//! in a binary sidecar; a line refers to one as `"path#index"`, where a
//! relative path is resolved against the directory of the record file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stacks::{read_stacks, write_stacks};
use crate::data::{
    AttentionStack, Dataset, FeatureGrid, Heatmap49, HeatmapKind, Record, Split, StackRef, CELLS,
    GRID,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    correct: bool,
    split: Split,
    human_attention: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention_map: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_map: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_head_maps: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention_stack_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_grid: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    aux: BTreeMap<String, Vec<f64>>,
}

fn parse_head_key(key: &str) -> Option<(usize, usize)> {
    let (l, h) = key.split_once('.')?;
    Some((l.parse().ok()?, h.parse().ok()?))
}

fn grid_from_nested(nested: Vec<Vec<Vec<f64>>>) -> std::result::Result<FeatureGrid, String> {
    if nested.len() != GRID || nested.iter().any(|row| row.len() != GRID) {
        return Err(format!("feature_grid must be {GRID}x{GRID}xC"));
    }
    let channels = nested[0][0].len();
    if channels == 0 {
        return Err("feature_grid needs at least one channel".into());
    }
    let mut values = Vec::with_capacity(CELLS * channels);
    for row in nested {
        for cell in row {
            if cell.len() != channels {
                return Err(format!(
                    "feature_grid cells must all have {channels} channels, found {}",
                    cell.len()
                ));
            }
            values.extend(cell);
        }
    }
    FeatureGrid::new(channels, values).map_err(|e| e.to_string())
}

fn grid_to_nested(g: &FeatureGrid) -> Vec<Vec<Vec<f64>>> {
    let c = g.channels();
    (0..GRID)
        .map(|i| {
            (0..GRID)
                .map(|j| g.values()[(i * GRID + j) * c..(i * GRID + j + 1) * c].to_vec())
                .collect()
        })
        .collect()
}

impl RecordLine {
    fn into_record(self) -> std::result::Result<Record, String> {
        let mut r = Record::new(
            self.id,
            self.correct,
            Heatmap49::from_raw(self.human_attention, HeatmapKind::Human),
        );
        r.split = self.split;
        r.attention_map = self
            .attention_map
            .map(|v| Heatmap49::from_raw(v, HeatmapKind::Attention));
        r.error_map = self
            .error_map
            .map(|v| Heatmap49::from_raw(v, HeatmapKind::Error));
        if let Some(maps) = self.per_head_maps {
            let mut out = BTreeMap::new();
            for (k, v) in maps {
                let key = parse_head_key(&k)
                    .ok_or_else(|| format!("per_head_maps key {k:?} is not \"layer.head\""))?;
                out.insert(key, Heatmap49::from_raw(v, HeatmapKind::Attention));
            }
            r.per_head_maps = Some(out);
        }
        if let Some(s) = self.attention_stack_ref {
            r.stack_ref = Some(s.parse::<StackRef>().map_err(|e| e.to_string())?);
        }
        if let Some(g) = self.feature_grid {
            r.feature_grid = Some(grid_from_nested(g)?);
        }
        r.aux = self.aux;
        Ok(r)
    }

    fn from_record(r: &Record, stack_ref: Option<String>) -> Self {
        Self {
            id: r.id.clone(),
            correct: r.correct,
            split: r.split,
            human_attention: r.human_attention.values().to_vec(),
            attention_map: r.attention_map.as_ref().map(|m| m.values().to_vec()),
            error_map: r.error_map.as_ref().map(|m| m.values().to_vec()),
            per_head_maps: r.per_head_maps.as_ref().map(|maps| {
                maps.iter()
                    .map(|((l, h), m)| (format!("{l}.{h}"), m.values().to_vec()))
                    .collect()
            }),
            attention_stack_ref: stack_ref
                .or_else(|| r.stack_ref.as_ref().map(ToString::to_string)),
            feature_grid: r.feature_grid.as_ref().map(grid_to_nested),
            aux: r.aux.clone(),
        }
    }
}

/// Parses record lines without resolving stack references. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let parsed: RecordLine =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        out.push(parsed.into_record().map_err(parse_err)?);
    }
    Ok(out)
}

/// Reads a record file and loads every referenced stack. With `stacks`,
/// references use that file and only their index; otherwise each
/// reference's own path is used. Resolved records drop the reference.
pub fn read_records(path: &Path, stacks: Option<&Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut records = parse_records(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut files: BTreeMap<PathBuf, Vec<AttentionStack>> = BTreeMap::new();
    for r in &mut records {
        let Some(sref) = r.stack_ref.take() else {
            continue;
        };
        let file = match stacks {
            Some(p) => p.to_path_buf(),
            None => base.join(&sref.path),
        };
        if !files.contains_key(&file) {
            if !file.is_file() {
                return Err(Error::DanglingReference {
                    reference: sref.to_string(),
                    reason: format!("{} does not exist", file.display()),
                });
            }
            let loaded = read_stacks(&file)?;
            files.insert(file.clone(), loaded);
        }
        let loaded = &files[&file];
        let stack = loaded
            .get(sref.index)
            .ok_or_else(|| Error::DanglingReference {
                reference: sref.to_string(),
                reason: format!(
                    "index {} out of range, {} holds {} stacks",
                    sref.index,
                    file.display(),
                    loaded.len()
                ),
            })?;
        r.attention_stack = Some(stack.clone());
    }
    Ok(Dataset::new(records))
}

/// Binary sidecar written next to a record file: `data.jsonl` -> `data.atns`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("atns")
}

/// Writes `ds` as JSON lines. In-memory stacks go to [`sidecar_path`] in
/// record order and are referenced by file name.
pub fn write_records(path: &Path, ds: &Dataset) -> Result<()> {
    let stacks: Vec<&AttentionStack> = ds
        .records()
        .iter()
        .filter_map(|r| r.attention_stack.as_ref())
        .collect();
    let sidecar = sidecar_path(path);
    let sidecar_name = sidecar
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if !stacks.is_empty() {
        write_stacks(&sidecar, stacks)?;
    }
    let mut out = Vec::new();
    let mut next = 0usize;
    for r in ds.records() {
        let sref = r.attention_stack.as_ref().map(|_| {
            let s = format!("{sidecar_name}#{next}");
            next += 1;
            s
        });
        serde_json::to_writer(&mut out, &RecordLine::from_record(r, sref))?;
        out.push(b'\n');
    }
    super::write_atomic(path, &out)
}
