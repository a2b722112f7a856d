//! A small failure predictor with hand-derived gradients.
//!
//! Architecture, for a 7x7xC feature grid and three conditioning vectors:
//!
//! ```text
//! grid -> conv3x3(K, pad 1) -> tanh -> fc(H) -> tanh ----------------\
//! question          -> fc(H) -> tanh -> fc(H) -> tanh ---------------+-> h (4H)
//! attention_summary -> fc(H) -> tanh -> fc(H) -> tanh ---------------+
//! answer_logits     -> fc(H) -> tanh -> fc(H) -> tanh ---------------/
//! h -> linear(1)  -> sigmoid = failure probability
//! h -> linear(49) -> sigmoid = J-Att map
//! ```
//!
//! All weights live in one flat vector; [`JustifierParams::groups`] names the
//! slices in declaration order, which is also the on-disk order.

mod gradcam;
mod train;

use std::ops::Range;

use rand::Rng;

use crate::data::{aux, Record, CELLS, GRID};
use crate::error::{Error, Result};
use crate::seed;

pub use gradcam::{
    annotate_error_maps, gradcam_error_map, gradcam_error_map_with, ErrorMapResult, GradCamVariant,
};
pub use train::{accuracy, train, train_with, EpochLoss, TrainConfig, TrainOutcome};

/// Width of every encoder output.
pub const DEFAULT_HIDDEN: usize = 96;
/// Output channels of the image convolution.
pub const DEFAULT_CONV_CHANNELS: usize = 8;

/// Names of the conditioning vectors, in encoder order.
pub const AUX_INPUTS: [&str; 3] = [aux::QUESTION, aux::ATTENTION_SUMMARY, aux::ANSWER_LOGITS];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub grid_channels: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    /// Input widths of the question, attention-summary and answer-logit encoders.
    pub aux: [usize; 3],
}

impl Dims {
    /// Dimensions matching the inputs carried by `r`.
    pub fn infer(r: &Record, conv_channels: usize, hidden: usize) -> Result<Self> {
        let grid = r.feature_grid.as_ref().ok_or_else(|| Error::MissingMap {
            id: r.id.clone(),
            what: "feature_grid",
        })?;
        let aux = AUX_INPUTS.map(|name| r.aux.get(name).map_or(0, Vec::len));
        let dims = Self {
            grid_channels: grid.channels(),
            conv_channels,
            hidden,
            aux,
        };
        dims.check()?;
        Ok(dims)
    }

    fn check(&self) -> Result<()> {
        if self.grid_channels == 0 || self.conv_channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter(format!(
                "justifier dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Width of the latent vector h.
    pub fn latent(&self) -> usize {
        4 * self.hidden
    }
}

#[derive(Clone, Debug)]
struct AuxLayout {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    conv_w: Range<usize>,
    conv_b: Range<usize>,
    img_w: Range<usize>,
    img_b: Range<usize>,
    aux: [AuxLayout; 3],
    fail_w: Range<usize>,
    fail_b: Range<usize>,
    jatt_w: Range<usize>,
    jatt_b: Range<usize>,
    len: usize,
}

impl Layout {
    fn new(d: &Dims) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (k, c, h) = (d.conv_channels, d.grid_channels, d.hidden);
        let conv_w = take(k * c * 9);
        let conv_b = take(k);
        let img_w = take(h * CELLS * k);
        let img_b = take(h);
        let aux = d.aux.map(|n| AuxLayout {
            w1: take(h * n),
            b1: take(h),
            w2: take(h * h),
            b2: take(h),
        });
        let fail_w = take(4 * h);
        let fail_b = take(1);
        let jatt_w = take(CELLS * 4 * h);
        let jatt_b = take(CELLS);
        Self {
            conv_w,
            conv_b,
            img_w,
            img_b,
            aux,
            fail_w,
            fail_b,
            jatt_w,
            jatt_b,
            len: at,
        }
    }
}

/// Every learnable weight of the justifier.
#[derive(Clone, Debug, PartialEq)]
pub struct JustifierParams {
    dims: Dims,
    weights: Vec<f64>,
}

impl JustifierParams {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.check()?;
        let len = Layout::new(&dims).len;
        Ok(Self {
            dims,
            weights: vec![0.0; len],
        })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let l = p.layout();
        let (k, c, h) = (dims.conv_channels, dims.grid_channels, dims.hidden);
        let mut rng = seed::rng(seed);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        };
        let w = &mut p.weights;
        fill(&mut w[l.conv_w], c * 9, k * 9);
        fill(&mut w[l.img_w], CELLS * k, h);
        for (a, &n) in l.aux.iter().zip(&dims.aux) {
            fill(&mut w[a.w1.clone()], n, h);
            fill(&mut w[a.w2.clone()], h, h);
        }
        fill(&mut w[l.fail_w], 4 * h, 1);
        fill(&mut w[l.jatt_w], 4 * h, CELLS);
        Ok(p)
    }

    pub fn from_parts(dims: Dims, weights: Vec<f64>) -> Result<Self> {
        dims.check()?;
        let len = Layout::new(&dims).len;
        if weights.len() != len {
            return Err(Error::DimensionMismatch {
                what: "justifier weights".into(),
                expected: len,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("justifier weights"));
        }
        Ok(Self { dims, weights })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.dims)
    }

    /// Named weight slices in declaration order.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let l = self.layout();
        let mut out = vec![
            ("conv_w".to_string(), l.conv_w),
            ("conv_b".to_string(), l.conv_b),
            ("img_w".to_string(), l.img_w),
            ("img_b".to_string(), l.img_b),
        ];
        for (name, a) in AUX_INPUTS.iter().zip(l.aux) {
            out.push((format!("{name}_w1"), a.w1));
            out.push((format!("{name}_b1"), a.b1));
            out.push((format!("{name}_w2"), a.w2));
            out.push((format!("{name}_b2"), a.b2));
        }
        out.push(("fail_w".to_string(), l.fail_w));
        out.push(("fail_b".to_string(), l.fail_b));
        out.push(("jatt_w".to_string(), l.jatt_w));
        out.push(("jatt_b".to_string(), l.jatt_b));
        out
    }

    /// Slice of the J-Att head (weights then biases).
    pub fn jatt_range(&self) -> Range<usize> {
        let l = self.layout();
        l.jatt_w.start..l.jatt_b.end
    }
}

struct Inputs<'a> {
    grid: &'a [f64],
    aux: [&'a [f64]; 3],
}

impl<'a> Inputs<'a> {
    fn from_record(d: &Dims, r: &'a Record) -> Result<Self> {
        let grid = r.feature_grid.as_ref().ok_or_else(|| Error::MissingMap {
            id: r.id.clone(),
            what: "feature_grid",
        })?;
        if grid.channels() != d.grid_channels || grid.values().len() != CELLS * d.grid_channels {
            return Err(Error::DimensionMismatch {
                what: format!("record {}: feature_grid values", r.id),
                expected: CELLS * d.grid_channels,
                got: grid.values().len(),
            });
        }
        let mut aux: [&[f64]; 3] = [&[]; 3];
        for (k, name) in AUX_INPUTS.iter().enumerate() {
            let v = r.aux.get(*name).map_or(&[][..], Vec::as_slice);
            if v.len() != d.aux[k] {
                return Err(Error::DimensionMismatch {
                    what: format!("record {}: aux.{name}", r.id),
                    expected: d.aux[k],
                    got: v.len(),
                });
            }
            aux[k] = v;
        }
        Ok(Self {
            grid: grid.values(),
            aux,
        })
    }
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    /// Post-tanh convolution output, `[cell * K + k]`.
    conv: Vec<f64>,
    img: Vec<f64>,
    aux_hidden: [Vec<f64>; 3],
    aux_out: [Vec<f64>; 3],
    h: Vec<f64>,
    pub logit: f64,
    pub failure_prob: f64,
    pub jatt: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `tanh(W x + b)` with `W` stored row-major `[out][in]`.
fn dense_tanh(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            (bo + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
        })
        .collect()
}

/// Neighbour of `cell` at offset (di, dj), if it is on the grid.
fn neighbour(cell: usize, ki: usize, kj: usize) -> Option<usize> {
    let i = (cell / GRID + ki).checked_sub(1)?;
    let j = (cell % GRID + kj).checked_sub(1)?;
    (i < GRID && j < GRID).then_some(i * GRID + j)
}

impl JustifierParams {
    pub fn forward(&self, r: &Record) -> Result<Activations> {
        let x = Inputs::from_record(&self.dims, r)?;
        Ok(self.forward_inputs(&x))
    }

    fn forward_inputs(&self, x: &Inputs) -> Activations {
        let d = &self.dims;
        let l = self.layout();
        let w = &self.weights;
        let (c, k, hd) = (d.grid_channels, d.conv_channels, d.hidden);

        let cw = &w[l.conv_w.clone()];
        let cb = &w[l.conv_b.clone()];
        let mut conv = vec![0.0; CELLS * k];
        for cell in 0..CELLS {
            for o in 0..k {
                let mut z = cb[o];
                for ki in 0..3 {
                    for kj in 0..3 {
                        if let Some(nb) = neighbour(cell, ki, kj) {
                            for ch in 0..c {
                                z += cw[((o * c + ch) * 3 + ki) * 3 + kj] * x.grid[nb * c + ch];
                            }
                        }
                    }
                }
                conv[cell * k + o] = z.tanh();
            }
        }
        let img = dense_tanh(&w[l.img_w.clone()], &w[l.img_b.clone()], &conv);

        let mut aux_hidden: [Vec<f64>; 3] = Default::default();
        let mut aux_out: [Vec<f64>; 3] = Default::default();
        for (i, a) in l.aux.iter().enumerate() {
            aux_hidden[i] = dense_tanh(&w[a.w1.clone()], &w[a.b1.clone()], x.aux[i]);
            aux_out[i] = dense_tanh(&w[a.w2.clone()], &w[a.b2.clone()], &aux_hidden[i]);
        }

        let mut h = Vec::with_capacity(4 * hd);
        h.extend_from_slice(&img);
        for v in &aux_out {
            h.extend_from_slice(v);
        }

        let fw = &w[l.fail_w.clone()];
        let logit = w[l.fail_b.start] + fw.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        let jw = &w[l.jatt_w.clone()];
        let jb = &w[l.jatt_b.clone()];
        let n = h.len();
        let jatt = (0..CELLS)
            .map(|m| {
                let row = &jw[m * n..(m + 1) * n];
                sigmoid(jb[m] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();

        Activations {
            conv,
            img,
            aux_hidden,
            aux_out,
            h,
            logit,
            failure_prob: sigmoid(logit),
            jatt,
        }
    }

    /// Accumulates into `grad` the gradient for upstream derivatives
    /// `d_logit` (failure logit) and `d_jatt` (J-Att pre-activations), and
    /// into `d_grid` the gradient with respect to the feature grid.
    fn backward(
        &self,
        x: &Inputs,
        a: &Activations,
        d_logit: f64,
        d_jatt: Option<&[f64]>,
        grad: &mut [f64],
        d_grid: Option<&mut [f64]>,
    ) {
        let d = &self.dims;
        let l = self.layout();
        let w = &self.weights;
        let (c, k, hd) = (d.grid_channels, d.conv_channels, d.hidden);
        let n = a.h.len();

        let mut dh: Vec<f64> = w[l.fail_w.clone()].iter().map(|wf| wf * d_logit).collect();
        for (g, hv) in grad[l.fail_w.clone()].iter_mut().zip(&a.h) {
            *g += d_logit * hv;
        }
        grad[l.fail_b.start] += d_logit;
        if let Some(dj) = d_jatt {
            let jw = &w[l.jatt_w.clone()];
            let gjw = &mut grad[l.jatt_w.clone()];
            for (m, &dz) in dj.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let row = &jw[m * n..(m + 1) * n];
                let grow = &mut gjw[m * n..(m + 1) * n];
                for q in 0..n {
                    grow[q] += dz * a.h[q];
                    dh[q] += dz * row[q];
                }
            }
            for (g, dz) in grad[l.jatt_b.clone()].iter_mut().zip(dj) {
                *g += dz;
            }
        }

        for (i, al) in l.aux.iter().enumerate() {
            let dv = &dh[(i + 1) * hd..(i + 2) * hd];
            let du2: Vec<f64> = dv
                .iter()
                .zip(&a.aux_out[i])
                .map(|(g, o)| g * (1.0 - o * o))
                .collect();
            let dhid = dense_backward(
                &w[al.w2.clone()],
                &du2,
                &a.aux_hidden[i],
                grad,
                al.w2.start,
                al.b2.start,
                true,
            );
            let du1: Vec<f64> = dhid
                .iter()
                .zip(&a.aux_hidden[i])
                .map(|(g, o)| g * (1.0 - o * o))
                .collect();
            dense_backward(
                &w[al.w1.clone()],
                &du1,
                x.aux[i],
                grad,
                al.w1.start,
                al.b1.start,
                false,
            );
        }

        let du: Vec<f64> = dh[..hd]
            .iter()
            .zip(&a.img)
            .map(|(g, o)| g * (1.0 - o * o))
            .collect();
        let dconv = dense_backward(
            &w[l.img_w.clone()],
            &du,
            &a.conv,
            grad,
            l.img_w.start,
            l.img_b.start,
            true,
        );
        let dz: Vec<f64> = dconv
            .iter()
            .zip(&a.conv)
            .map(|(g, o)| g * (1.0 - o * o))
            .collect();

        let cw = &w[l.conv_w.clone()];
        let mut d_grid = d_grid;
        for cell in 0..CELLS {
            for o in 0..k {
                let g = dz[cell * k + o];
                if g == 0.0 {
                    continue;
                }
                grad[l.conv_b.start + o] += g;
                for ki in 0..3 {
                    for kj in 0..3 {
                        if let Some(nb) = neighbour(cell, ki, kj) {
                            for ch in 0..c {
                                let wi = ((o * c + ch) * 3 + ki) * 3 + kj;
                                grad[l.conv_w.start + wi] += g * x.grid[nb * c + ch];
                                if let Some(dg) = d_grid.as_deref_mut() {
                                    dg[nb * c + ch] += g * cw[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the failure logit with respect to the feature grid,
    /// laid out like [`crate::data::FeatureGrid::values`].
    pub fn input_gradient(&self, r: &Record) -> Result<(Activations, Vec<f64>)> {
        let x = Inputs::from_record(&self.dims, r)?;
        let a = self.forward_inputs(&x);
        let mut scratch = vec![0.0; self.weights.len()];
        let mut dg = vec![0.0; x.grid.len()];
        self.backward(&x, &a, 1.0, None, &mut scratch, Some(&mut dg));
        Ok((a, dg))
    }
}

/// Backward through `y = W x + b` for upstream `dy`: accumulates weight and
/// bias gradients at the given offsets and optionally returns `dx`.
fn dense_backward(
    w: &[f64],
    dy: &[f64],
    x: &[f64],
    grad: &mut [f64],
    w_off: usize,
    b_off: usize,
    want_dx: bool,
) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = if want_dx { vec![0.0; n_in] } else { Vec::new() };
    for (o, &g) in dy.iter().enumerate() {
        grad[b_off + o] += g;
        if g == 0.0 {
            continue;
        }
        let gw = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
        for (gq, xq) in gw.iter_mut().zip(x) {
            *gq += g * xq;
        }
        if want_dx {
            let row = &w[o * n_in..(o + 1) * n_in];
            for (dq, wq) in dx.iter_mut().zip(row) {
                *dq += g * wq;
            }
        }
    }
    dx
}

/// Per-record loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub bce: f64,
    pub mse: f64,
}

impl LossParts {
    pub fn total(&self, lambda_att: f64) -> f64 {
        self.bce + lambda_att * self.mse
    }
}

fn jatt_target(r: &Record) -> Vec<f64> {
    r.human_attention.max_normalized().into_values()
}

impl JustifierParams {
    /// Loss of one record: BCE of the failure probability against
    /// `!correct` plus the J-Att MSE against max-scaled human attention.
    pub fn loss(&self, r: &Record) -> Result<LossParts> {
        let a = self.forward(r)?;
        Ok(loss_parts(r, &a))
    }

    /// Loss terms plus the gradient of `bce + lambda_att * mse` with respect
    /// to every weight and to the feature grid.
    pub fn loss_gradient(
        &self,
        r: &Record,
        lambda_att: f64,
    ) -> Result<(LossParts, Vec<f64>, Vec<f64>)> {
        let x = Inputs::from_record(&self.dims, r)?;
        let mut grad = vec![0.0; self.weights.len()];
        let mut dg = vec![0.0; x.grid.len()];
        let parts = self.accumulate(r, &x, lambda_att, 1.0, &mut grad, Some(&mut dg));
        Ok((parts, grad, dg))
    }

    fn accumulate(
        &self,
        r: &Record,
        x: &Inputs,
        lambda_att: f64,
        scale: f64,
        grad: &mut [f64],
        d_grid: Option<&mut [f64]>,
    ) -> LossParts {
        let a = self.forward_inputs(x);
        let parts = loss_parts(r, &a);
        let y = if r.correct { 0.0 } else { 1.0 };
        let d_logit = scale * (a.failure_prob - y);
        let d_jatt = (lambda_att != 0.0).then(|| {
            let t = jatt_target(r);
            a.jatt
                .iter()
                .zip(&t)
                .map(|(j, t)| scale * lambda_att * 2.0 / CELLS as f64 * (j - t) * j * (1.0 - j))
                .collect::<Vec<_>>()
        });
        self.backward(x, &a, d_logit, d_jatt.as_deref(), grad, d_grid);
        parts
    }
}

fn loss_parts(r: &Record, a: &Activations) -> LossParts {
    let y = if r.correct { 0.0 } else { 1.0 };
    let bce = softplus(a.logit) - y * a.logit;
    let t = jatt_target(r);
    let mse = a
        .jatt
        .iter()
        .zip(&t)
        .map(|(j, t)| (j - t).powi(2))
        .sum::<f64>()
        / CELLS as f64;
    LossParts { bce, mse }
}
