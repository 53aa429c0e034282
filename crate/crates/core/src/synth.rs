//! Synthetic face-like clips with an exactly known pulse, and the classical
//! GREEN, CHROM and POS extractors.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, stream_rng};
use crate::signal::{zero_mean, Band, HeartRate, PulseSignal, Region, VideoClip};
use crate::tensor::Tensor;

/// Sliding-window length used by CHROM and POS.
pub const BASELINE_WINDOW_SECS: f64 = 1.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub hr_bpm: f64,
    pub fps: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub skin_region: Region,
    /// Per-channel (R, G, B) pulse amplitude.
    pub pulse_amplitude: [f64; 3],
    pub harmonic_ratio: f64,
    /// Pulse phase at t = 0, radians.
    pub phase: f64,
    pub base_skin: [f64; 3],
    pub base_background: [f64; 3],
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub drift_hz: f64,
    /// Peak rigid translation of the skin region, pixels.
    pub motion_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            hr_bpm: 72.0,
            fps: 30.0,
            frames: 300,
            height: 16,
            width: 16,
            skin_region: Region {
                top: 2,
                left: 2,
                height: 12,
                width: 12,
            },
            pulse_amplitude: [0.005, 0.01, 0.005],
            harmonic_ratio: 0.5,
            phase: 0.0,
            base_skin: [0.6, 0.45, 0.35],
            base_background: [0.25, 0.25, 0.3],
            noise_sigma: 0.01,
            drift_amplitude: 0.01,
            drift_hz: 0.15,
            motion_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    /// Noise-free, drift-free and motionless.
    pub fn clean(hr_bpm: f64) -> Self {
        SynthParams {
            hr_bpm,
            noise_sigma: 0.0,
            drift_amplitude: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let band = Band::default();
        if !(band.low_bpm..=band.high_bpm).contains(&self.hr_bpm) {
            return Err(Error::InvalidLabel {
                bpm: self.hr_bpm,
                low: band.low_bpm,
                high: band.high_bpm,
            });
        }
        if self.pulse_amplitude.iter().any(|a| !(*a >= 0.0)) || self.noise_sigma < 0.0 || self.motion_amplitude < 0.0 {
            return Err(Error::InvalidArgument("amplitudes and noise must be non-negative".into()));
        }
        if self.frames < 2 || !(self.fps > 0.0) {
            return Err(Error::InvalidArgument("need at least 2 frames and a positive frame rate".into()));
        }
        self.skin_region.check_inside(self.height, self.width)
    }

    fn translation(&self, t: usize) -> (isize, isize) {
        if self.motion_amplitude == 0.0 {
            return (0, 0);
        }
        let s = t as f64 / self.fps;
        let dy = (self.motion_amplitude * (2.0 * PI * 0.2 * s).sin()).round() as isize;
        let dx = (self.motion_amplitude * (2.0 * PI * 0.3 * s + 1.0).sin()).round() as isize;
        (dy, dx)
    }
}

/// `sin(2πft + φ) + r·sin(2(2πft + φ))` sampled at the clip rate.
pub fn gen_ppg(p: &SynthParams) -> Result<PulseSignal> {
    let f = p.hr_bpm / 60.0;
    let samples = (0..p.frames)
        .map(|i| {
            let arg = 2.0 * PI * f * i as f64 / p.fps + p.phase;
            arg.sin() + p.harmonic_ratio * (2.0 * arg).sin()
        })
        .collect();
    PulseSignal::new(samples, p.fps)
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip: VideoClip,
    pub ppg: PulseSignal,
    pub hr: HeartRate,
    /// Share of voxels that had to be clamped into `[0, 1]`.
    pub clamped_fraction: f64,
}

pub fn gen_clip(p: &SynthParams) -> Result<SynthClip> {
    p.validate()?;
    let ppg = gen_ppg(p)?;
    let mut rng = stream_rng(p.seed, 0);
    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let (t_len, h, w) = (p.frames, p.height, p.width);
    let mut data = vec![0.0; 3 * t_len * h * w];
    let mut clamped = 0usize;
    for t in 0..t_len {
        let (dy, dx) = p.translation(t);
        let r = p.skin_region;
        let top = r.top as isize + dy;
        let left = r.left as isize + dx;
        if top < 0 || left < 0 || top as usize + r.height > h || left as usize + r.width > w {
            return Err(Error::InvalidArgument(format!("skin region leaves the frame at frame {t}")));
        }
        let (top, left) = (top as usize, left as usize);
        let s = ppg.samples()[t];
        let drift = p.drift_amplitude * (2.0 * PI * p.drift_hz * t as f64 / p.fps + drift_phase).sin();
        for c in 0..3 {
            let skin = p.base_skin[c] + p.pulse_amplitude[c] * s + drift;
            for y in 0..h {
                for x in 0..w {
                    let inside = (top..top + r.height).contains(&y) && (left..left + r.width).contains(&x);
                    let mut v = if inside { skin } else { p.base_background[c] };
                    if p.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    if !(0.0..=1.0).contains(&v) {
                        clamped += 1;
                        v = v.clamp(0.0, 1.0);
                    }
                    data[((c * t_len + t) * h + y) * w + x] = v;
                }
            }
        }
    }
    let clamped_fraction = clamped as f64 / data.len() as f64;
    let clip = VideoClip::new(Tensor::from_vec(&[3, t_len, h, w], data)?, p.fps)?;
    Ok(SynthClip {
        clip,
        ppg,
        hr: HeartRate(p.hr_bpm),
        clamped_fraction,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n: usize,
    pub hr_range: (f64, f64),
    pub subjects: usize,
    pub seed: u64,
    /// Everything except rate, phase, skin tone and seed, which vary per clip.
    pub template: SynthParams,
}

impl DatasetSpec {
    pub fn new(n: usize, hr_range: (f64, f64), subjects: usize, seed: u64) -> Self {
        DatasetSpec {
            n,
            hr_range,
            subjects,
            seed,
            template: SynthParams::default(),
        }
    }

    /// Parameters of clip `i`.
    pub fn clip_params(&self, i: usize) -> SynthParams {
        let mut rng = stream_rng(self.seed, i as u64);
        let (lo, hi) = self.hr_range;
        let hr_bpm = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let subject = i % self.subjects.max(1);
        let mut tone_rng = stream_rng(derive_seed(self.seed, u64::MAX), subject as u64);
        let tone = tone_rng.random_range(0.9..1.1);
        SynthParams {
            hr_bpm,
            phase: rng.random_range(0.0..2.0 * PI),
            base_skin: self.template.base_skin.map(|b| b * tone),
            seed: rng.random(),
            ..self.template.clone()
        }
    }
}

/// `n` clips with uniformly drawn rates, subjects assigned round-robin.
pub fn gen_dataset(spec: &DatasetSpec, exec: Exec) -> Result<Vec<Sample>> {
    if spec.n == 0 || spec.subjects == 0 {
        return Err(Error::Empty("synthetic dataset"));
    }
    let (lo, hi) = spec.hr_range;
    if !(lo <= hi) {
        return Err(Error::InvalidArgument(format!("empty heart-rate range [{lo}, {hi}]")));
    }
    exec.map_collect(spec.n, |i| {
        let c = gen_clip(&spec.clip_params(i))?;
        Sample::new(format!("clip{i:04}"), format!("subject{:02}", i % spec.subjects), c.clip, c.ppg, c.hr)
    })
    .into_iter()
    .collect()
}

/// Temporally normalised (divided by their mean) RGB traces over `region`.
fn normalised_traces(clip: &VideoClip, region: Region) -> Result<[Vec<f64>; 3]> {
    if clip.channels() != 3 {
        return Err(Error::Shape(format!("RGB extractors need 3 channels, got {}", clip.channels())));
    }
    let mut out: [Vec<f64>; 3] = Default::default();
    for (c, slot) in out.iter_mut().enumerate() {
        let trace = clip.region_trace(c, region)?;
        let mean = trace.iter().sum::<f64>() / trace.len() as f64;
        if mean <= 0.0 {
            return Err(Error::DegenerateVariance("a colour channel is black over the region"));
        }
        *slot = trace.iter().map(|v| v / mean).collect();
    }
    Ok(out)
}

/// Normalised traces vary by at least this much unless they are constant up
/// to rounding.
const FLAT: f64 = 1e-12;

fn std_dev(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

fn window_len(fps: f64, frames: usize) -> usize {
    ((BASELINE_WINDOW_SECS * fps).round() as usize).clamp(2, frames)
}

/// Zero-meaned per-frame mean of the green channel.
pub fn green_rppg(clip: &VideoClip, region: Region) -> Result<PulseSignal> {
    if clip.channels() < 2 {
        return Err(Error::Shape("GREEN needs a green channel".into()));
    }
    PulseSignal::new(zero_mean(&clip.region_trace(1, region)?), clip.fps())
}

/// Chrominance method: Hann-weighted half-overlapping windows, each
/// normalised by its own mean, combined as `X − (σX/σY)·Y`.
pub fn chrom_rppg(clip: &VideoClip, region: Region) -> Result<PulseSignal> {
    let rgb = normalised_traces(clip, region)?;
    let t = clip.frames();
    let x_all: Vec<f64> = (0..t).map(|i| 3.0 * rgb[0][i] - 2.0 * rgb[1][i]).collect();
    let y_all: Vec<f64> = (0..t).map(|i| 1.5 * rgb[0][i] + rgb[1][i] - 1.5 * rgb[2][i]).collect();
    if std_dev(&x_all) < FLAT || std_dev(&y_all) < FLAT {
        return Err(Error::DegenerateVariance("chrominance signals are constant"));
    }
    let l = window_len(clip.fps(), t);
    let hop = (l / 2).max(1);
    let mut out = vec![0.0; t];
    let mut weight = vec![0.0; t];
    let mut start = 0;
    loop {
        let end = (start + l).min(t);
        let n = end - start;
        let mut win: [Vec<f64>; 3] = Default::default();
        for c in 0..3 {
            let seg = &rgb[c][start..end];
            let m = seg.iter().sum::<f64>() / n as f64;
            win[c] = seg.iter().map(|v| v / m).collect();
        }
        let x: Vec<f64> = (0..n).map(|i| 3.0 * win[0][i] - 2.0 * win[1][i]).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.5 * win[0][i] + win[1][i] - 1.5 * win[2][i]).collect();
        let sy = std_dev(&y);
        let alpha = if sy > 0.0 { std_dev(&x) / sy } else { 0.0 };
        let s = zero_mean(&(0..n).map(|i| x[i] - alpha * y[i]).collect::<Vec<_>>());
        for i in 0..n {
            let hann = if n > 1 { 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / n as f64).cos() } else { 1.0 };
            out[start + i] += hann * s[i];
            weight[start + i] += hann;
        }
        if end == t {
            break;
        }
        start += hop;
    }
    for (o, w) in out.iter_mut().zip(&weight) {
        if *w > 0.0 {
            *o /= w;
        }
    }
    PulseSignal::new(zero_mean(&out), clip.fps())
}

/// Plane-orthogonal-to-skin: windows advanced one frame at a time,
/// projected onto `(0, 1, −1)` and `(−2, 1, 1)`, combined as
/// `S1 + (σ1/σ2)·S2`, then overlap-added.
pub fn pos_rppg(clip: &VideoClip, region: Region) -> Result<PulseSignal> {
    let rgb = normalised_traces(clip, region)?;
    let t = clip.frames();
    let s1_all: Vec<f64> = (0..t).map(|i| rgb[1][i] - rgb[2][i]).collect();
    let s2_all: Vec<f64> = (0..t).map(|i| -2.0 * rgb[0][i] + rgb[1][i] + rgb[2][i]).collect();
    if std_dev(&s1_all) < FLAT && std_dev(&s2_all) < FLAT {
        return Err(Error::DegenerateVariance("projected signals are constant"));
    }
    let l = window_len(clip.fps(), t);
    let mut out = vec![0.0; t];
    for start in 0..=t - l {
        let end = start + l;
        let mut win: [Vec<f64>; 3] = Default::default();
        for c in 0..3 {
            let seg = &rgb[c][start..end];
            let m = seg.iter().sum::<f64>() / l as f64;
            win[c] = seg.iter().map(|v| v / m).collect();
        }
        let s1: Vec<f64> = (0..l).map(|i| win[1][i] - win[2][i]).collect();
        let s2: Vec<f64> = (0..l).map(|i| -2.0 * win[0][i] + win[1][i] + win[2][i]).collect();
        let sd2 = std_dev(&s2);
        let alpha = if sd2 > 0.0 { std_dev(&s1) / sd2 } else { 0.0 };
        let h = zero_mean(&(0..l).map(|i| s1[i] + alpha * s2[i]).collect::<Vec<_>>());
        for i in 0..l {
            out[start + i] += h[i];
        }
    }
    PulseSignal::new(zero_mean(&out), clip.fps())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Green,
    Chrom,
    Pos,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Green, Baseline::Chrom, Baseline::Pos];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Green => "GREEN",
            Baseline::Chrom => "CHROM",
            Baseline::Pos => "POS",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name().eq_ignore_ascii_case(s))
    }

    pub fn extract(self, clip: &VideoClip, region: Region) -> Result<PulseSignal> {
        match self {
            Baseline::Green => green_rppg(clip, region),
            Baseline::Chrom => chrom_rppg(clip, region),
            Baseline::Pos => pos_rppg(clip, region),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::neg_pearson;
    use crate::signal::{compute_psd, estimate_hr};

    fn skin(p: &SynthParams) -> Region {
        p.skin_region
    }

    #[test]
    fn ppg_period_and_peak() {
        let p = SynthParams {
            hr_bpm: 60.0,
            ..SynthParams::clean(60.0)
        };
        let s = gen_ppg(&p).unwrap();
        for i in 0..s.len() - 30 {
            assert!((s.samples()[i] - s.samples()[i + 30]).abs() < 1e-9);
        }
        let pure = SynthParams {
            harmonic_ratio: 0.0,
            hr_bpm: 84.0,
            ..SynthParams::clean(84.0)
        };
        let psd = compute_psd(&gen_ppg(&pure).unwrap(), Band::default()).unwrap();
        assert_eq!(psd.freqs_bpm[psd.peak_index().unwrap()], 84.0);
        for hr in [45.0, 72.0, 150.0] {
            let est = estimate_hr(&gen_ppg(&SynthParams::clean(hr)).unwrap(), Band::default()).unwrap();
            assert!((est.bpm() - hr).abs() <= 1.0);
        }
    }

    #[test]
    fn green_oracle_on_clean_clip() {
        let p = SynthParams {
            pulse_amplitude: [0.002, 0.01, 0.004],
            ..SynthParams::clean(72.0)
        };
        let c = gen_clip(&p).unwrap();
        let g = green_rppg(&c.clip, skin(&p)).unwrap();
        assert!((estimate_hr(&g, Band::default()).unwrap().bpm() - 72.0).abs() <= 1.0);
        assert!(neg_pearson(&c.ppg, &g).unwrap() <= 0.05);
        assert_eq!(c.clamped_fraction, 0.0);
    }

    #[test]
    fn no_pulse_no_peak() {
        let p = SynthParams {
            pulse_amplitude: [0.0; 3],
            ..SynthParams::clean(72.0)
        };
        let c = gen_clip(&p).unwrap();
        let g = green_rppg(&c.clip, skin(&p)).unwrap();
        assert!(g.samples().iter().all(|v| *v == 0.0));
        assert!(matches!(estimate_hr(&g, Band::default()), Err(Error::NoPeak)));
        assert!(chrom_rppg(&c.clip, skin(&p)).is_err());
        assert!(pos_rppg(&c.clip, skin(&p)).is_err());
    }

    #[test]
    fn all_extractors_recover_clean_rates() {
        for hr in [50.0, 72.0, 130.0] {
            let p = SynthParams::clean(hr);
            let c = gen_clip(&p).unwrap();
            for b in Baseline::ALL {
                let s = b.extract(&c.clip, skin(&p)).unwrap();
                let est = estimate_hr(&s, Band::default()).unwrap().bpm();
                assert!((est - hr).abs() <= 1.0, "{} read {est} for {hr}", b.name());
            }
        }
    }

    #[test]
    fn drift_alone_does_not_lock_to_72() {
        let p = SynthParams {
            pulse_amplitude: [0.0; 3],
            drift_amplitude: 0.02,
            noise_sigma: 0.0,
            ..SynthParams::default()
        };
        let c = gen_clip(&p).unwrap();
        match pos_rppg(&c.clip, skin(&p)).and_then(|s| estimate_hr(&s, Band::default())) {
            Ok(hr) => assert!((hr.bpm() - 72.0).abs() > 2.0),
            Err(_) => {}
        }
    }

    #[test]
    fn determinism_and_clamping() {
        let p = SynthParams {
            seed: 5,
            ..Default::default()
        };
        let a = gen_clip(&p).unwrap();
        let b = gen_clip(&p).unwrap();
        assert_eq!(a.clip, b.clip);
        assert!(a.clamped_fraction <= 0.01);
        assert!(a.clip.data().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn motion_that_leaves_the_frame_is_an_error() {
        let p = SynthParams {
            motion_amplitude: 5.0,
            ..Default::default()
        };
        assert!(gen_clip(&p).is_err());
        let ok = SynthParams {
            motion_amplitude: 1.0,
            ..Default::default()
        };
        assert!(gen_clip(&ok).is_ok());
    }

    #[test]
    fn dataset_rows() {
        let mut spec = DatasetSpec::new(12, (50.0, 150.0), 5, 3);
        spec.template.frames = 20;
        let a = gen_dataset(&spec, Exec::Sequential).unwrap();
        let b = gen_dataset(&spec, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|s| (50.0..=150.0).contains(&s.hr.bpm())));
        assert_eq!(a[7].subject, "subject02");
        assert!(gen_dataset(&DatasetSpec::new(0, (50.0, 60.0), 1, 0), Exec::Sequential).is_err());
    }
}
