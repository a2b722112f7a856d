use serde::{Deserialize, Serialize};

use super::{Dims, Inputs, JustifierParams, LossParts, DEFAULT_CONV_CHANNELS, DEFAULT_HIDDEN};
use crate::data::{Dataset, Record, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Records per gradient chunk. Chunks are reduced in order, so the summed
/// gradient does not depend on how chunks are scheduled.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the J-Att MSE term.
    pub lambda_att: f64,
    pub seed: u64,
    pub hidden: usize,
    pub conv_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 0.5,
            lambda_att: 1.0,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            conv_channels: DEFAULT_CONV_CHANNELS,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda_att >= 0.0 && self.lambda_att.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda_att must be >= 0, got {}",
                self.lambda_att
            )));
        }
        Ok(())
    }
}

/// Mean loss over the training records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub bce: f64,
    pub mse: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: JustifierParams,
    /// Entry `e` is the loss before update `e`; the last entry is the loss of
    /// the returned parameters.
    pub trace: Vec<EpochLoss>,
}

pub fn train(ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, config, Execution::default())
}

/// Full-batch gradient descent on the train split.
pub fn train_with(ds: &Dataset, config: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    config.validate()?;
    let records = ds.split(Split::Train);
    let first = records.first().ok_or(Error::Empty("train split"))?;
    let dims = Dims::infer(first, config.conv_channels, config.hidden)?;
    let mut params = JustifierParams::init(dims, config.seed)?;
    let inputs = records
        .iter()
        .map(|r| Inputs::from_record(&dims, r))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&Record, &Inputs)> = records.iter().copied().zip(&inputs).collect();
    let chunks: Vec<&[(&Record, &Inputs)]> = pairs.chunks(CHUNK).collect();
    let n = records.len() as f64;

    let mut trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let partial = exec.map(&chunks, |chunk| {
            let mut grad = vec![0.0; params.weights.len()];
            let mut sum = LossParts::default();
            for (r, x) in chunk.iter() {
                let l = params.accumulate(r, x, config.lambda_att, 1.0 / n, &mut grad, None);
                sum.bce += l.bce;
                sum.mse += l.mse;
            }
            (sum, grad)
        });
        let mut grad = vec![0.0; params.weights.len()];
        let mut sum = LossParts::default();
        for (l, g) in partial {
            sum.bce += l.bce;
            sum.mse += l.mse;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let (bce, mse) = (sum.bce / n, sum.mse / n);
        let total = bce + config.lambda_att * mse;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.push(EpochLoss {
            epoch,
            bce,
            mse,
            total,
        });
        if epoch == config.epochs {
            break;
        }
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Fraction of `records` where `failure_prob > 0.5` matches `!correct`.
pub fn accuracy(params: &JustifierParams, records: &[&Record]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let mut hits = 0usize;
    for r in records {
        let p = params.forward(r)?.failure_prob;
        if (p > 0.5) == !r.correct {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}
