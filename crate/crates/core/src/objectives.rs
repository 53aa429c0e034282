//! Time-domain negative Pearson loss, frequency-domain cross-entropy over the
//! band-limited power spectrum, and their weighted sum.

use crate::autograd::{softmax, Graph, Var};
use crate::error::{Error, Result};
use crate::signal::{zero_mean, Band, HeartRate, PulseSignal, SpectralBasis};
use crate::tensor::Tensor;

/// Which terms drive training. The other terms are still computed for logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    Overall,
    TimeOnly,
    FreqOnly,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Overall => "overall",
            Objective::TimeOnly => "time",
            Objective::FreqOnly => "freq",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Objective::Overall, Objective::TimeOnly, Objective::FreqOnly]
            .into_iter()
            .find(|o| o.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the time-domain term.
    pub lambda_time: f64,
    pub band: Band,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_time: 0.2,
            band: Band::default(),
            objective: Objective::Overall,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_time >= 0.0 && self.lambda_time.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_time must be non-negative, got {}",
                self.lambda_time
            )));
        }
        Band::new(self.band.low_bpm, self.band.high_bpm, self.band.step_bpm)?;
        Ok(())
    }
}

/// `1 − r(x, y)` and its gradient with respect to `x`.
pub fn neg_pearson_with_grad(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("signals of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooShort("Pearson loss needs at least 2 samples".into()));
    }
    let xc = zero_mean(x);
    let yc = zero_mean(y);
    let sxx: f64 = xc.iter().map(|v| v * v).sum();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateVariance("predicted signal is constant"));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateVariance("reference signal is constant"));
    }
    let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    let norm = (sxx * syy).sqrt();
    let r = (sxy / norm).clamp(-1.0, 1.0);
    let grad = xc.iter().zip(&yc).map(|(xv, yv)| -(yv / norm - r * xv / sxx)).collect();
    Ok((1.0 - r, grad))
}

pub fn neg_pearson(x: &PulseSignal, y: &PulseSignal) -> Result<f64> {
    Ok(neg_pearson_with_grad(x.samples(), y.samples())?.0)
}

/// Cross-entropy of the softmax over raw band powers against the class of
/// `hr_gt`, with its gradient with respect to the samples.
pub fn freq_ce_with_grad(samples: &[f64], basis: &SpectralBasis, hr_gt: HeartRate) -> Result<(f64, Vec<f64>)> {
    let label = basis.band().class_of(hr_gt)?;
    let logits = basis.power(samples);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad_logits = softmax(&logits);
    grad_logits[label] -= 1.0;
    Ok((loss, basis.power_backward(samples, &grad_logits)))
}

pub fn freq_ce_loss(x: &PulseSignal, hr_gt: HeartRate, cfg: &LossConfig) -> Result<f64> {
    cfg.band.class_of(hr_gt)?;
    let basis = SpectralBasis::new(x.len(), x.fps(), cfg.band)?;
    Ok(freq_ce_with_grad(x.samples(), &basis, hr_gt)?.0)
}

pub fn overall_loss(x: &PulseSignal, y: &PulseSignal, hr_gt: HeartRate, cfg: &LossConfig) -> Result<f64> {
    let time = neg_pearson(x, y)?;
    let freq = freq_ce_loss(x, hr_gt, cfg)?;
    Ok(cfg.lambda_time * time + freq)
}

/// Supervision for one row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub ppg: Vec<f64>,
    pub hr: HeartRate,
}

/// Batch-averaged loss components (values only).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub time: f64,
    pub freq: f64,
    pub overall: f64,
}

/// Attach the batch-mean overall loss to a network output of shape
/// `[N, 1, T, 1, 1]`. The time term is always evaluated (for logging) and
/// enters the objective scaled by `lambda_time`.
pub fn batch_loss(g: &mut Graph, output: Var, targets: &[Target], fps: f64, cfg: &LossConfig) -> Result<(Var, LossTerms)> {
    let shape = g.value(output).shape().to_vec();
    let [n, c, t, h, w] = <[usize; 5]>::try_from(shape.as_slice())
        .map_err(|_| Error::Shape(format!("network output has shape {shape:?}")))?;
    if c != 1 || h != 1 || w != 1 {
        return Err(Error::Shape(format!("expected a [N, 1, T, 1, 1] signal, got {shape:?}")));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!("{n} outputs but {} targets", targets.len())));
    }
    let basis = SpectralBasis::new(t, fps, cfg.band)?;
    let mut time_grad = Vec::with_capacity(n * t);
    let mut freq_grad = Vec::with_capacity(n * t);
    let (mut time, mut freq) = (0.0, 0.0);
    for (row, target) in targets.iter().enumerate() {
        let x = &g.value(output).data()[row * t..(row + 1) * t];
        if target.ppg.len() != t {
            return Err(Error::Shape(format!(
                "target signal has {} samples, output has {t}",
                target.ppg.len()
            )));
        }
        let (lt, gt) = neg_pearson_with_grad(x, &target.ppg)?;
        let (lf, gf) = freq_ce_with_grad(x, &basis, target.hr)?;
        time += lt;
        freq += lf;
        time_grad.extend(gt.into_iter().map(|v| v / n as f64));
        freq_grad.extend(gf.into_iter().map(|v| v / n as f64));
    }
    let (time, freq) = (time / n as f64, freq / n as f64);
    let overall = cfg.lambda_time * time + freq;
    let driven = match cfg.objective {
        Objective::Overall => overall,
        Objective::TimeOnly => time,
        Objective::FreqOnly => freq,
    };
    if !driven.is_finite() {
        return Err(Error::NonFiniteLoss {
            value: driven,
            context: format!("time {time}, frequency {freq}"),
        });
    }
    let time_var = g.scalar_fn(output, time, Tensor::from_vec(&shape, time_grad)?)?;
    let freq_var = g.scalar_fn(output, freq, Tensor::from_vec(&shape, freq_grad)?)?;
    let total = match cfg.objective {
        Objective::Overall => g.add_scaled(freq_var, time_var, cfg.lambda_time)?,
        Objective::TimeOnly => time_var,
        Objective::FreqOnly => freq_var,
    };
    Ok((total, LossTerms { time, freq, overall }))
}
