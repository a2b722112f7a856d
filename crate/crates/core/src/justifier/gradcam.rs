use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::JustifierParams;
use crate::data::{Dataset, Heatmap49, HeatmapKind, Record, Split, CELLS};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradCamVariant {
    /// Channel weights are spatial means of the gradient.
    #[default]
    ChannelWeighted,
    /// Element-wise gradient times activation, summed over channels.
    GradTimesInput,
}

impl fmt::Display for GradCamVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradCamVariant::ChannelWeighted => "channel-weighted",
            GradCamVariant::GradTimesInput => "grad-times-input",
        })
    }
}

impl FromStr for GradCamVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel-weighted" => Ok(GradCamVariant::ChannelWeighted),
            "grad-times-input" => Ok(GradCamVariant::GradTimesInput),
            other => Err(Error::InvalidParameter(format!(
                "unknown gradcam variant {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMapResult {
    /// Non-negative; max-normalized unless all zero.
    pub map: Heatmap49,
    pub failure_prob: f64,
}

pub fn gradcam_error_map(params: &JustifierParams, r: &Record) -> Result<ErrorMapResult> {
    gradcam_error_map_with(params, r, GradCamVariant::default())
}

pub fn gradcam_error_map_with(
    params: &JustifierParams,
    r: &Record,
    variant: GradCamVariant,
) -> Result<ErrorMapResult> {
    let (act, grad) = params.input_gradient(r)?;
    let x = r
        .feature_grid
        .as_ref()
        .expect("checked by input_gradient")
        .values();
    let c = params.dims().grid_channels;
    let raw: Vec<f64> = match variant {
        GradCamVariant::ChannelWeighted => {
            let alpha: Vec<f64> = (0..c)
                .map(|ch| (0..CELLS).map(|cell| grad[cell * c + ch]).sum::<f64>() / CELLS as f64)
                .collect();
            (0..CELLS)
                .map(|cell| {
                    let s: f64 = (0..c).map(|ch| alpha[ch] * x[cell * c + ch]).sum();
                    s.max(0.0)
                })
                .collect()
        }
        GradCamVariant::GradTimesInput => (0..CELLS)
            .map(|cell| {
                let s: f64 = (0..c)
                    .map(|ch| grad[cell * c + ch] * x[cell * c + ch])
                    .sum();
                s.max(0.0)
            })
            .collect(),
    };
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradcam map"));
    }
    Ok(ErrorMapResult {
        map: Heatmap49::from_raw(raw, HeatmapKind::Error).max_normalized(),
        failure_prob: act.failure_prob,
    })
}

/// Writes a GradCAM error map onto every record of `split` (all records when
/// `split` is `None`).
pub fn annotate_error_maps(
    params: &JustifierParams,
    ds: &Dataset,
    split: Option<Split>,
    variant: GradCamVariant,
    exec: Execution,
) -> Result<Dataset> {
    let mut records = ds.records().to_vec();
    let results = exec.map(&records, |r| {
        if split.is_some_and(|s| s != r.split) {
            return Ok(None);
        }
        gradcam_error_map_with(params, r, variant).map(|e| Some(e.map))
    });
    for (r, m) in records.iter_mut().zip(results) {
        if let Some(m) = m? {
            r.error_map = Some(m);
        }
    }
    Ok(Dataset::new(records))
}
