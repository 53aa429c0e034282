//! Per-video evaluation: split into fixed-length clips, read out one rate
//! per clip, average, and score against ground truth.

use std::fs;
use std::path::Path;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::signal::{clip_average_hr, compute_metrics, estimate_hr, Band, HeartRate, MetricsReport, PulseSignal, VideoClip};

pub const VIDEO_HEADER: [&str; 4] = ["id", "gt_hr", "pred_hr", "error"];
const SKIPPED: &str = "skipped";

#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    pub id: String,
    pub gt_hr: f64,
    /// `None` when the video was shorter than one clip.
    pub pred_hr: Option<f64>,
}

impl VideoResult {
    pub fn error(&self) -> Option<f64> {
        self.pred_hr.map(|p| p - self.gt_hr)
    }
}

/// Frames per evaluation clip: `secs · fps`, rounded down to a multiple of
/// `multiple` (the network's temporal reduction).
pub fn clip_frames(fps: f64, secs: f64, multiple: usize) -> usize {
    let raw = (secs * fps).round() as usize;
    raw - raw % multiple.max(1)
}

/// Consecutive non-overlapping clips covering as much of the video as fits.
pub fn split_clips(clip: &VideoClip, len: usize) -> Result<Vec<VideoClip>> {
    if len < 2 {
        return Err(Error::InvalidArgument(format!("evaluation clips need at least 2 frames, got {len}")));
    }
    (0..clip.frames() / len).map(|k| clip.window(k * len, len)).collect()
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub videos: Vec<VideoResult>,
    pub report: MetricsReport,
    /// First-clip prediction and ground truth per evaluated video.
    pub signals: Vec<(String, PulseSignal, PulseSignal)>,
}

/// Evaluate any clip-to-signal predictor. `predict` receives all clips of
/// one video at once.
pub fn evaluate_with<F>(samples: &[&Sample], clip_secs: f64, multiple: usize, band: Band, mut predict: F) -> Result<EvalOutcome>
where
    F: FnMut(&[&VideoClip]) -> Result<Vec<PulseSignal>>,
{
    let mut videos = Vec::with_capacity(samples.len());
    let mut signals = Vec::new();
    for s in samples {
        let gt = s.window_hr(0, s.frames());
        let len = clip_frames(s.clip.fps(), clip_secs, multiple);
        let clips = if len >= 2 { split_clips(&s.clip, len)? } else { Vec::new() };
        if clips.is_empty() {
            log::warn!("{}: {} frames is shorter than one {clip_secs} s clip; skipped", s.id, s.frames());
            videos.push(VideoResult {
                id: s.id.clone(),
                gt_hr: gt.bpm(),
                pred_hr: None,
            });
            continue;
        }
        let refs: Vec<&VideoClip> = clips.iter().collect();
        let preds = predict(&refs)?;
        let mut hrs = Vec::with_capacity(preds.len());
        for (k, p) in preds.iter().enumerate() {
            match estimate_hr(p, band) {
                Ok(hr) => hrs.push(hr),
                Err(e) => log::warn!("{} clip {k}: {e}", s.id),
            }
        }
        let pred = if hrs.is_empty() { None } else { Some(clip_average_hr(&hrs)?.bpm()) };
        signals.push((s.id.clone(), preds[0].clone(), s.ppg.slice(0, len)?));
        videos.push(VideoResult {
            id: s.id.clone(),
            gt_hr: gt.bpm(),
            pred_hr: pred,
        });
    }
    let (preds, gts): (Vec<HeartRate>, Vec<HeartRate>) = videos
        .iter()
        .filter_map(|v| v.pred_hr.map(|p| (HeartRate(p), HeartRate(v.gt_hr))))
        .unzip();
    if preds.is_empty() {
        return Err(Error::Empty("evaluated videos"));
    }
    Ok(EvalOutcome {
        report: compute_metrics(&preds, &gts)?,
        videos,
        signals,
    })
}

pub fn evaluate(net: &mut crate::backbone::RppgNet, samples: &[&Sample], clip_secs: f64) -> Result<EvalOutcome> {
    let multiple = net.config().reduction()[0];
    evaluate_with(samples, clip_secs, multiple, Band::default(), |clips| net.forward_batch(clips))
}

pub fn write_video_csv(path: &Path, rows: &[VideoResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(VIDEO_HEADER)?;
    for r in rows {
        let (pred, err) = match (r.pred_hr, r.error()) {
            (Some(p), Some(e)) => (p.to_string(), e.to_string()),
            _ => (SKIPPED.to_string(), SKIPPED.to_string()),
        };
        w.write_record([r.id.clone(), r.gt_hr.to_string(), pred, err])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_video_csv(path: &Path) -> Result<Vec<VideoResult>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    if r.headers()?.iter().collect::<Vec<_>>() != VIDEO_HEADER {
        return Err(Error::parse(path.display().to_string(), format!("expected header {}", VIDEO_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let loc = format!("{} row {}", path.display(), i + 2);
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::parse(&loc, format!("`{v}` is not a number")));
        rows.push(VideoResult {
            id: rec[0].to_string(),
            gt_hr: num(&rec[1])?,
            pred_hr: if &rec[2] == SKIPPED { None } else { Some(num(&rec[2])?) },
        });
    }
    Ok(rows)
}

/// `<dir>/<id>.pred.txt` and `<dir>/<id>.gt.txt` for each video.
pub fn write_signals(dir: &Path, signals: &[(String, PulseSignal, PulseSignal)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, pred, gt) in signals {
        pred.write_to(&dir.join(format!("{id}.pred.txt")))?;
        gt.write_to(&dir.join(format!("{id}.gt.txt")))?;
    }
    Ok(())
}
