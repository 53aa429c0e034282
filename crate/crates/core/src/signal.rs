//! Video clips, pulse signals, band-limited power spectra, heart-rate
//! readout and evaluation metrics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `C × T × H × W` clip of pixel intensities sampled at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    data: Tensor,
    fps: f64,
}

impl VideoClip {
    pub fn new(data: Tensor, fps: f64) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("a clip is C×T×H×W, got {shape:?}")));
        }
        if shape[0] == 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!("clip has an empty axis: {shape:?}")));
        }
        if shape[1] < 2 {
            return Err(Error::TooShort(format!("clip has {} frames, need at least 2", shape[1])));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        if !data.all_finite() {
            return Err(Error::InvalidArgument("clip contains non-finite values".into()));
        }
        Ok(VideoClip { data, fps })
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.fps
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.frames() + t) * self.height() + y) * self.width() + x
    }

    /// One channel of one frame, row-major `H × W`.
    pub fn plane(&self, c: usize, t: usize) -> &[f64] {
        let area = self.height() * self.width();
        let start = (c * self.frames() + t) * area;
        &self.data.data()[start..start + area]
    }

    /// Consecutive frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<VideoClip> {
        if start + len > self.frames() {
            return Err(Error::TooShort(format!(
                "window [{start}, {}) exceeds {} frames",
                start + len,
                self.frames()
            )));
        }
        self.select_frames(&(start..start + len).collect::<Vec<_>>())
    }

    pub(crate) fn select_frames(&self, frames: &[usize]) -> Result<VideoClip> {
        let area = self.height() * self.width();
        let mut out = Vec::with_capacity(self.channels() * frames.len() * area);
        for c in 0..self.channels() {
            for &t in frames {
                out.extend_from_slice(self.plane(c, t));
            }
        }
        let data = Tensor::from_vec(&[self.channels(), frames.len(), self.height(), self.width()], out)?;
        VideoClip::new(data, self.fps)
    }

    /// Per-frame spatial mean of channel `c` over `region`.
    pub fn region_trace(&self, c: usize, region: Region) -> Result<Vec<f64>> {
        region.check_inside(self.height(), self.width())?;
        let n = (region.height * region.width) as f64;
        Ok((0..self.frames())
            .map(|t| {
                let plane = self.plane(c, t);
                let mut acc = 0.0;
                for y in region.top..region.top + region.height {
                    let row = &plane[y * self.width()..(y + 1) * self.width()];
                    acc += row[region.left..region.left + region.width].iter().sum::<f64>();
                }
                acc / n
            })
            .collect())
    }

    /// Stack clips of equal shape into a `[N, C, T, H, W]` batch.
    pub fn batch(clips: &[&VideoClip]) -> Result<Tensor> {
        let first = clips.first().ok_or(Error::Empty("batch of clips"))?;
        let shape = first.data.shape().to_vec();
        let mut data = Vec::with_capacity(clips.len() * first.data.len());
        for clip in clips {
            if clip.data.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "batch mixes clip shapes {:?} and {:?}",
                    shape,
                    clip.data.shape()
                )));
            }
            data.extend_from_slice(clip.data.data());
        }
        let mut full = vec![clips.len()];
        full.extend_from_slice(&shape);
        Tensor::from_vec(&full, data)
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(height: usize, width: usize) -> Self {
        Region {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.top + self.height > height || self.left + self.width > width {
            return Err(Error::InvalidArgument(format!(
                "region {self:?} does not fit a {height}×{width} frame"
            )));
        }
        Ok(())
    }
}

/// A uniformly sampled pulse waveform (ground-truth PPG or predicted rPPG).
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSignal {
    samples: Vec<f64>,
    fps: f64,
}

impl PulseSignal {
    pub fn new(samples: Vec<f64>, fps: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::TooShort(format!(
                "pulse signal has {} samples, need at least 2",
                samples.len()
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("pulse signal contains non-finite samples".into()));
        }
        Ok(PulseSignal { samples, fps })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<PulseSignal> {
        if start + len > self.samples.len() {
            return Err(Error::TooShort(format!(
                "slice [{start}, {}) exceeds {} samples",
                start + len,
                self.samples.len()
            )));
        }
        PulseSignal::new(self.samples[start..start + len].to_vec(), self.fps)
    }

    /// Text form: a `fps=<value>` header followed by one sample per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("fps={}\n", self.fps);
        for s in &self.samples {
            let _ = writeln!(out, "{s}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::parse("pulse signal", "empty input"))?;
        let fps = header
            .trim()
            .strip_prefix("fps=")
            .ok_or_else(|| Error::parse("pulse signal", format!("expected `fps=<value>`, got `{header}`")))?
            .parse::<f64>()
            .map_err(|e| Error::parse("pulse signal header", e.to_string()))?;
        let samples = lines
            .enumerate()
            .map(|(i, l)| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(format!("pulse signal line {}", i + 2), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        PulseSignal::new(samples, fps)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut text = String::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(path, e))?;
        PulseSignal::from_text(&text)
    }
}

/// Heart rate in beats per minute.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct HeartRate(pub f64);

impl HeartRate {
    pub fn bpm(self) -> f64 {
        self.0
    }

    pub fn hz(self) -> f64 {
        self.0 / 60.0
    }
}

/// Frequency grid for spectral analysis, in bpm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub low_bpm: f64,
    pub high_bpm: f64,
    pub step_bpm: f64,
}

impl Default for Band {
    fn default() -> Self {
        Band {
            low_bpm: 40.0,
            high_bpm: 180.0,
            step_bpm: 1.0,
        }
    }
}

impl Band {
    pub fn new(low_bpm: f64, high_bpm: f64, step_bpm: f64) -> Result<Self> {
        if !(low_bpm > 0.0 && high_bpm >= low_bpm && step_bpm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "band [{low_bpm}, {high_bpm}] with step {step_bpm} is not a valid grid"
            )));
        }
        Ok(Band {
            low_bpm,
            high_bpm,
            step_bpm,
        })
    }

    /// Number of grid points `K`.
    pub fn len(&self) -> usize {
        ((self.high_bpm - self.low_bpm) / self.step_bpm + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn freqs_bpm(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.low_bpm + k as f64 * self.step_bpm).collect()
    }

    pub fn contains(&self, bpm: f64) -> bool {
        bpm >= self.low_bpm && bpm <= self.high_bpm
    }

    /// Nearest grid index for a heart rate inside the band.
    pub fn class_of(&self, hr: HeartRate) -> Result<usize> {
        if !hr.bpm().is_finite() || !self.contains(hr.bpm()) {
            return Err(Error::InvalidLabel {
                bpm: hr.bpm(),
                low: self.low_bpm,
                high: self.high_bpm,
            });
        }
        Ok((((hr.bpm() - self.low_bpm) / self.step_bpm).round() as usize).min(self.len() - 1))
    }

    pub fn check_nyquist(&self, fps: f64) -> Result<()> {
        let nyquist_bpm = fps * 60.0 / 2.0;
        if !(self.low_bpm > 0.0 && self.high_bpm <= nyquist_bpm) {
            return Err(Error::InvalidBand {
                low: self.low_bpm,
                high: self.high_bpm,
                fps,
            });
        }
        Ok(())
    }
}

/// Band-limited power spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdVector {
    pub freqs_bpm: Vec<f64>,
    pub power: Vec<f64>,
}

impl PsdVector {
    /// Index of the strongest grid point, lowest frequency on ties.
    pub fn peak_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (k, &p) in self.power.iter().enumerate() {
            if p > 0.0 && best.is_none_or(|b| p > self.power[b]) {
                best = Some(k);
            }
        }
        best
    }
}

/// Subtract the mean; constant input maps to exact zeros.
pub fn zero_mean(samples: &[f64]) -> Vec<f64> {
    let first = samples.first().copied().unwrap_or(0.0);
    if samples.iter().all(|&s| s == first) {
        return vec![0.0; samples.len()];
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.iter().map(|s| s - mean).collect()
}

/// Precomputed DFT rows for an explicit-frequency periodogram on one band.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    len: usize,
    band: Band,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(len: usize, fps: f64, band: Band) -> Result<Self> {
        if len < 2 {
            return Err(Error::TooShort(format!("spectrum needs at least 2 samples, got {len}")));
        }
        band.check_nyquist(fps)?;
        let k = band.len();
        let mut cos = Vec::with_capacity(k * len);
        let mut sin = Vec::with_capacity(k * len);
        for f in band.freqs_bpm() {
            let omega = 2.0 * PI * (f / 60.0) / fps;
            for t in 0..len {
                let phase = omega * t as f64;
                cos.push(phase.cos());
                sin.push(phase.sin());
            }
        }
        Ok(SpectralBasis { len, band, cos, sin })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn band(&self) -> Band {
        self.band
    }

    /// Real and imaginary DFT parts of an already zero-meaned signal.
    pub fn transform(&self, centered: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(centered.len(), self.len);
        let k = self.band.len();
        let mut re = Vec::with_capacity(k);
        let mut im = Vec::with_capacity(k);
        for row in 0..k {
            let c = &self.cos[row * self.len..(row + 1) * self.len];
            let s = &self.sin[row * self.len..(row + 1) * self.len];
            re.push(c.iter().zip(centered).map(|(a, b)| a * b).sum::<f64>());
            im.push(-s.iter().zip(centered).map(|(a, b)| a * b).sum::<f64>());
        }
        (re, im)
    }

    pub fn power(&self, samples: &[f64]) -> Vec<f64> {
        let centered = zero_mean(samples);
        let (re, im) = self.transform(&centered);
        let n = self.len as f64;
        re.iter().zip(&im).map(|(r, i)| (r * r + i * i) / n).collect()
    }

    /// Pull a gradient on the power vector back onto the raw samples.
    pub fn power_backward(&self, samples: &[f64], grad_power: &[f64]) -> Vec<f64> {
        let centered = zero_mean(samples);
        let (re, im) = self.transform(&centered);
        let n = self.len as f64;
        let mut grad = vec![0.0; self.len];
        for (row, &gp) in grad_power.iter().enumerate() {
            if gp == 0.0 {
                continue;
            }
            let a = 2.0 * gp * re[row] / n;
            let b = 2.0 * gp * im[row] / n;
            let c = &self.cos[row * self.len..(row + 1) * self.len];
            let s = &self.sin[row * self.len..(row + 1) * self.len];
            for t in 0..self.len {
                grad[t] += a * c[t] - b * s[t];
            }
        }
        // Mean removal is a projection; its adjoint removes the gradient's mean.
        let mean = grad.iter().sum::<f64>() / n;
        grad.iter_mut().for_each(|g| *g -= mean);
        grad
    }
}

/// Explicit-frequency periodogram of the zero-meaned signal on `band`.
pub fn compute_psd(signal: &PulseSignal, band: Band) -> Result<PsdVector> {
    let basis = SpectralBasis::new(signal.len(), signal.fps(), band)?;
    Ok(PsdVector {
        freqs_bpm: band.freqs_bpm(),
        power: basis.power(signal.samples()),
    })
}

/// Frequency of the periodogram peak.
pub fn estimate_hr(signal: &PulseSignal, band: Band) -> Result<HeartRate> {
    let psd = compute_psd(signal, band)?;
    let k = psd.peak_index().ok_or(Error::NoPeak)?;
    Ok(HeartRate(psd.freqs_bpm[k]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub sd: f64,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when predictions or ground truths have zero variance.
    pub pearson_r: Option<f64>,
}

pub fn compute_metrics(preds: &[HeartRate], gts: &[HeartRate]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Empty("metric inputs"));
    }
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len() as f64;
    let errors: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p.bpm() - g.bpm()).collect();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean_err = errors.iter().sum::<f64>() / n;
    let sd = (errors.iter().map(|e| (e - mean_err).powi(2)).sum::<f64>() / n).sqrt();
    let p: Vec<f64> = preds.iter().map(|h| h.bpm()).collect();
    let g: Vec<f64> = gts.iter().map(|h| h.bpm()).collect();
    Ok(MetricsReport {
        sd,
        mae,
        rmse,
        pearson_r: pearson(&p, &g),
    })
}

/// Sample Pearson correlation; `None` on zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn clip_average_hr(clip_hrs: &[HeartRate]) -> Result<HeartRate> {
    if clip_hrs.is_empty() {
        return Err(Error::Empty("clip heart rates"));
    }
    Ok(HeartRate(
        clip_hrs.iter().map(|h| h.bpm()).sum::<f64>() / clip_hrs.len() as f64,
    ))
}

const UNDEFINED: &str = "undefined";

/// Write rows of `split,sd,mae,rmse,r`.
pub fn write_metrics_csv<W: Write>(writer: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["split", "sd", "mae", "rmse", "r"])?;
    for (split, m) in rows {
        let r = m.pearson_r.map_or_else(|| UNDEFINED.to_string(), |r| r.to_string());
        w.write_record([split.clone(), m.sd.to_string(), m.mae.to_string(), m.rmse.to_string(), r])?;
    }
    w.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<(String, MetricsReport)>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| -> Result<f64> {
            rec.get(j)
                .ok_or_else(|| Error::parse(format!("metrics row {}", i + 1), "missing column"))?
                .parse::<f64>()
                .map_err(|e| Error::parse(format!("metrics row {}", i + 1), e.to_string()))
        };
        let pearson_r = match rec.get(4) {
            Some(UNDEFINED) => None,
            _ => Some(field(4)?),
        };
        rows.push((
            rec.get(0).unwrap_or_default().to_string(),
            MetricsReport {
                sd: field(1)?,
                mae: field(2)?,
                rmse: field(3)?,
                pearson_r,
            },
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq_hz: f64, fps: f64, n: usize, amp: f64) -> PulseSignal {
        let s = (0..n).map(|t| amp * (2.0 * PI * freq_hz * t as f64 / fps).sin()).collect();
        PulseSignal::new(s, fps).unwrap()
    }

    /// Textbook double-loop DFT, independent of `SpectralBasis`.
    fn oracle_power(s: &[f64], fps: f64, freq_bpm: f64) -> f64 {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in s.iter().enumerate() {
            let phase = -2.0 * PI * (freq_bpm / 60.0) * t as f64 / fps;
            re += (v - mean) * phase.cos();
            im += (v - mean) * phase.sin();
        }
        (re * re + im * im) / s.len() as f64
    }

    fn hr(values: &[f64]) -> Vec<HeartRate> {
        values.iter().copied().map(HeartRate).collect()
    }

    #[test]
    fn band_has_141_points() {
        let band = Band::default();
        assert_eq!(band.len(), 141);
        assert_eq!(band.freqs_bpm()[0], 40.0);
        assert_eq!(band.freqs_bpm()[140], 180.0);
        assert_eq!(band.class_of(HeartRate(72.4)).unwrap(), 32);
        assert!(band.class_of(HeartRate(181.0)).is_err());
    }

    #[test]
    fn psd_peaks_at_72_bpm() {
        let psd = compute_psd(&sine(1.2, 30.0, 300, 1.0), Band::default()).unwrap();
        let k = psd.peak_index().unwrap();
        assert_eq!(psd.freqs_bpm[k], 72.0);
        let oracle: Vec<f64> = psd.freqs_bpm.iter().map(|&f| oracle_power(sine(1.2, 30.0, 300, 1.0).samples(), 30.0, f)).collect();
        let oracle_k = (0..oracle.len()).max_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        assert_eq!(oracle_k, k);
    }

    #[test]
    fn constant_signal_has_zero_power_and_no_peak() {
        let s = PulseSignal::new(vec![0.3; 120], 30.0).unwrap();
        let psd = compute_psd(&s, Band::default()).unwrap();
        assert!(psd.power.iter().all(|&p| p == 0.0));
        assert!(matches!(estimate_hr(&s, Band::default()), Err(Error::NoPeak)));
    }

    #[test]
    fn doubling_amplitude_quadruples_power() {
        let a = compute_psd(&sine(1.2, 30.0, 300, 1.0), Band::default()).unwrap();
        let b = compute_psd(&sine(1.2, 30.0, 300, 2.0), Band::default()).unwrap();
        for (x, y) in a.power.iter().zip(&b.power) {
            assert!((4.0 * x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
        assert_eq!(a.peak_index(), b.peak_index());
    }

    #[test]
    fn band_beyond_nyquist_is_rejected() {
        let s = sine(1.0, 5.0, 50, 1.0);
        assert!(matches!(compute_psd(&s, Band::default()), Err(Error::InvalidBand { .. })));
    }

    #[test]
    fn estimate_hr_on_clean_and_noisy_sines() {
        assert_eq!(estimate_hr(&sine(2.0, 30.0, 300, 1.0), Band::default()).unwrap(), HeartRate(120.0));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noisy: Vec<f64> = sine(1.2, 30.0, 300, 1.0)
            .samples()
            .iter()
            .map(|v| v + rng.random_range(-0.1..0.1))
            .collect();
        let est = estimate_hr(&PulseSignal::new(noisy, 30.0).unwrap(), Band::default()).unwrap();
        assert!((est.bpm() - 72.0).abs() <= 1.0, "{est:?}");
    }

    #[test]
    fn peak_ties_resolve_to_lower_frequency() {
        let psd = PsdVector {
            freqs_bpm: vec![40.0, 41.0, 42.0],
            power: vec![1.0, 2.0, 2.0],
        };
        assert_eq!(psd.peak_index(), Some(1));
    }

    #[test]
    fn metrics_match_hand_arithmetic() {
        let m = compute_metrics(&hr(&[60.0, 80.0, 100.0]), &hr(&[60.0, 80.0, 100.0])).unwrap();
        assert_eq!((m.mae, m.rmse, m.sd), (0.0, 0.0, 0.0));
        assert!((m.pearson_r.unwrap() - 1.0).abs() < 1e-15);

        let m = compute_metrics(&hr(&[72.0, 80.0, 90.0]), &hr(&[70.0, 84.0, 88.0])).unwrap();
        assert!((m.mae - 8.0 / 3.0).abs() < 1e-12);
        assert!((m.rmse - 8f64.sqrt()).abs() < 1e-12);

        let m = compute_metrics(&hr(&[70.0, 70.0]), &hr(&[60.0, 80.0])).unwrap();
        assert_eq!(m.pearson_r, None);
        assert_eq!(m.mae, 10.0);
    }

    #[test]
    fn metrics_reject_mismatched_or_empty_inputs() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&hr(&[1.0]), &hr(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn clip_average() {
        assert_eq!(clip_average_hr(&hr(&[72.0, 74.0, 76.0])).unwrap(), HeartRate(74.0));
        assert_eq!(clip_average_hr(&hr(&[60.0])).unwrap(), HeartRate(60.0));
        assert_eq!(clip_average_hr(&hr(&[50.0, 100.0, 90.0])).unwrap(), HeartRate(80.0));
        assert!(clip_average_hr(&[]).is_err());
    }

    #[test]
    fn pulse_text_round_trip() {
        let s = PulseSignal::new(vec![0.1, -2.5e-7, 3.0, 1.0 / 3.0], 29.97).unwrap();
        let back = PulseSignal::from_text(&s.to_text()).unwrap();
        assert_eq!(s, back);
        assert!(PulseSignal::from_text("30\n1\n2\n").is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            ("fold0".to_string(), MetricsReport { sd: 1.0 / 3.0, mae: 2.0, rmse: 2.5, pearson_r: Some(0.9) }),
            ("fold1".to_string(), MetricsReport { sd: 0.0, mae: 10.0, rmse: 10.0, pearson_r: None }),
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("split,sd,mae,rmse,r\n"));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn psd_matches_double_loop_oracle(
            samples in prop::collection::vec(-1.0f64..1.0, 2..512),
        ) {
            let s = PulseSignal::new(samples.clone(), 30.0).unwrap();
            let psd = compute_psd(&s, Band::default()).unwrap();
            let scale = psd.power.iter().fold(0.0f64, |m, p| m.max(*p)).max(1e-300);
            for (k, f) in psd.freqs_bpm.iter().enumerate() {
                let o = oracle_power(&samples, 30.0, *f);
                prop_assert!((psd.power[k] - o).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn psd_argmax_is_affine_invariant(
            samples in prop::collection::vec(-1.0f64..1.0, 8..200),
            a in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0, 7.0]),
            b in -5.0f64..5.0,
        ) {
            let s = PulseSignal::new(samples.clone(), 30.0).unwrap();
            let t = PulseSignal::new(samples.iter().map(|v| a * v + b).collect(), 30.0).unwrap();
            let ps = compute_psd(&s, Band::default()).unwrap();
            let pt = compute_psd(&t, Band::default()).unwrap();
            let scale = ps.power.iter().fold(0.0f64, |m, p| m.max(*p));
            for (x, y) in ps.power.iter().zip(&pt.power) {
                prop_assert!((a * a * x - y).abs() <= 1e-9 * a * a * scale.max(1e-12));
            }
            let (ks, kt) = (ps.peak_index(), pt.peak_index());
            if let (Some(ks), Some(kt)) = (ks, kt) {
                // Allow only genuine near-ties to swap.
                prop_assert!(ks == kt || (ps.power[ks] - ps.power[kt]).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn mae_never_exceeds_rmse(
            pairs in prop::collection::vec((40.0f64..180.0, 40.0f64..180.0), 1..50),
        ) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m = compute_metrics(&hr(&p), &hr(&g)).unwrap();
            prop_assert!(m.mae <= m.rmse + 1e-12);
            prop_assert!(m.sd >= 0.0);
        }

        #[test]
        fn constant_offset_keeps_perfect_correlation(
            g in prop::collection::vec(40.0f64..180.0, 3..30),
            c in -20.0f64..20.0,
        ) {
            let p: Vec<f64> = g.iter().map(|v| v + c).collect();
            let m = compute_metrics(&hr(&p), &hr(&g)).unwrap();
            if let Some(r) = m.pearson_r {
                prop_assert!((r - 1.0).abs() < 1e-9);
            }
            prop_assert!((m.mae - c.abs()).abs() < 1e-9);
        }
    }
}
