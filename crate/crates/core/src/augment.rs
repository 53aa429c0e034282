//! Training-time augmentation: spatio-temporal tube cutout/erase (DA1) and
//! temporal resampling with heart-rate relabelling (DA2).

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::signal::{HeartRate, PulseSignal, VideoClip};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Tube cross-section limit as a fraction of the frame area.
    pub max_spatial_area_frac: f64,
    /// Tube length limit as a fraction of the clip length.
    pub max_temporal_frac: f64,
    /// Clips above this rate are stretched to half rate.
    pub upsample_above_bpm: f64,
    /// Clips below this rate are decimated to double rate.
    pub downsample_below_bpm: f64,
    /// Chance that a training window receives a tube.
    pub cutout_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_spatial_area_frac: 0.2,
            max_temporal_frac: 0.2,
            upsample_above_bpm: 90.0,
            downsample_below_bpm: 70.0,
            cutout_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_spatial_area_frac", self.max_spatial_area_frac),
            ("max_temporal_frac", self.max_temporal_frac),
            ("cutout_prob", self.cutout_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.downsample_below_bpm <= self.upsample_above_bpm) {
            return Err(Error::InvalidArgument(format!(
                "downsampling threshold {} exceeds upsampling threshold {}",
                self.downsample_below_bpm, self.upsample_above_bpm
            )));
        }
        Ok(())
    }

    /// Independent stream for sample `index`.
    pub fn sample_rng(&self, index: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.seed, index)
    }
}

/// The voxels replaced by one cutout: frames `[t0, t0 + len)` of the
/// rectangle at `(top, left)` of size `height × width`, in every channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tube {
    pub t0: usize,
    pub len: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub noise: bool,
}

impl Tube {
    pub fn voxels_per_channel(&self) -> usize {
        self.len * self.height * self.width
    }

    pub fn contains(&self, t: usize, y: usize, x: usize) -> bool {
        (self.t0..self.t0 + self.len).contains(&t)
            && (self.top..self.top + self.height).contains(&y)
            && (self.left..self.left + self.width).contains(&x)
    }
}

/// Replace one random tube with zeros or uniform noise. The tube is `None`
/// when the limits leave no room for a single voxel.
pub fn da1_cutout_tube(clip: &VideoClip, cfg: &AugmentConfig, rng: &mut impl Rng) -> (VideoClip, Option<Tube>) {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    let max_area = (cfg.max_spatial_area_frac * (h * w) as f64).floor() as usize;
    let max_len = (cfg.max_temporal_frac * t as f64).floor() as usize;
    if max_area == 0 || max_len == 0 {
        return (clip.clone(), None);
    }
    let th = rng.random_range(1..=h.min(max_area));
    let tw = rng.random_range(1..=w.min(max_area / th));
    let len = rng.random_range(1..=max_len.min(t));
    let tube = Tube {
        t0: rng.random_range(0..=t - len),
        len,
        top: rng.random_range(0..=h - th),
        left: rng.random_range(0..=w - tw),
        height: th,
        width: tw,
        noise: rng.random_bool(0.5),
    };
    let mut data = clip.data().clone();
    let buf = data.data_mut();
    for c in 0..clip.channels() {
        for f in tube.t0..tube.t0 + tube.len {
            for y in tube.top..tube.top + tube.height {
                let row = clip.index(c, f, y, tube.left);
                for v in &mut buf[row..row + tube.width] {
                    *v = if tube.noise { rng.random::<f64>() } else { 0.0 };
                }
            }
        }
    }
    let out = VideoClip::new(data, clip.fps()).expect("cutout keeps a valid clip");
    (out, Some(tube))
}

pub fn da1_cutout(clip: &VideoClip, cfg: &AugmentConfig, rng: &mut impl Rng) -> VideoClip {
    da1_cutout_tube(clip, cfg, rng).0
}

/// Linear interpolation at `j / 2` for `j < 2n`, clamping past the last sample.
fn stretch2(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..2 * n)
        .map(|j| {
            let i0 = j / 2;
            let i1 = (i0 + 1).min(n - 1);
            if j % 2 == 0 {
                x[i0]
            } else {
                0.5 * (x[i0] + x[i1])
            }
        })
        .collect()
}

/// Stretch (rate above the upper threshold) or decimate (below the lower
/// one) the clip and its PPG together, relabelling the rate. Frame rate
/// metadata is unchanged.
pub fn da2_resample(
    clip: &VideoClip,
    ppg: &PulseSignal,
    hr: HeartRate,
    cfg: &AugmentConfig,
) -> Result<(VideoClip, PulseSignal, HeartRate)> {
    let t = clip.frames();
    if ppg.len() != t || (ppg.fps() - clip.fps()).abs() > 1e-9 {
        return Err(Error::Shape(format!(
            "clip has {t} frames at {} fps but the PPG has {} samples at {} fps",
            clip.fps(),
            ppg.len(),
            ppg.fps()
        )));
    }
    if hr.bpm() > cfg.upsample_above_bpm {
        let (c, h, w) = (clip.channels(), clip.height(), clip.width());
        let area = h * w;
        let mut out = vec![0.0; c * 2 * t * area];
        for ch in 0..c {
            for j in 0..2 * t {
                let i0 = j / 2;
                let i1 = (i0 + 1).min(t - 1);
                let (a, b) = (clip.plane(ch, i0), clip.plane(ch, i1));
                let dst = &mut out[(ch * 2 * t + j) * area..(ch * 2 * t + j + 1) * area];
                if j % 2 == 0 {
                    dst.copy_from_slice(a);
                } else {
                    for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
                        *d = 0.5 * (x + y);
                    }
                }
            }
        }
        let clip = VideoClip::new(Tensor::from_vec(&[c, 2 * t, h, w], out)?, clip.fps())?;
        let ppg = PulseSignal::new(stretch2(ppg.samples()), ppg.fps())?;
        Ok((clip, ppg, HeartRate(hr.bpm() / 2.0)))
    } else if hr.bpm() < cfg.downsample_below_bpm {
        if t / 2 < 2 {
            return Err(Error::TooShort(format!("decimating {t} frames leaves fewer than 2")));
        }
        let frames: Vec<usize> = (0..t / 2).map(|i| 2 * i).collect();
        let clip = clip.select_frames(&frames)?;
        let ppg = PulseSignal::new(frames.iter().map(|&i| ppg.samples()[i]).collect(), ppg.fps())?;
        Ok((clip, ppg, HeartRate(hr.bpm() * 2.0)))
    } else {
        Ok((clip.clone(), ppg.clone(), hr))
    }
}
