//! Labelled videos and the on-disk frame-directory format.
//!
//! A dataset directory holds `manifest.csv` (columns
//! `id,subject,hr,fps,frames,path`) and one directory per video containing
//! `frame_00000.png`, `frame_00001.png`, ... (8-bit RGB), a `meta` file with
//! `fps=`, `hr=` and `subject=` lines, the ground-truth waveform `ppg.txt`,
//! and optionally `hr.txt` with one heart-rate label per frame.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{format_key_values, parse_key_values};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objectives::Target;
use crate::signal::{HeartRate, PulseSignal, VideoClip};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 6] = ["id", "subject", "hr", "fps", "frames", "path"];

/// One labelled video.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: String,
    pub clip: VideoClip,
    pub ppg: PulseSignal,
    pub hr: HeartRate,
    /// Per-frame labels; when present, a window's label is their mean.
    pub hr_labels: Option<Vec<f64>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, subject: impl Into<String>, clip: VideoClip, ppg: PulseSignal, hr: HeartRate) -> Result<Self> {
        let id = id.into();
        if ppg.len() != clip.frames() {
            return Err(Error::Shape(format!(
                "{id}: {} frames but {} PPG samples",
                clip.frames(),
                ppg.len()
            )));
        }
        Ok(Sample {
            id,
            subject: subject.into(),
            clip,
            ppg,
            hr,
            hr_labels: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.clip.frames()
    }

    pub fn window_hr(&self, start: usize, len: usize) -> HeartRate {
        match &self.hr_labels {
            Some(l) if start + len <= l.len() && len > 0 => {
                HeartRate(l[start..start + len].iter().sum::<f64>() / len as f64)
            }
            _ => self.hr,
        }
    }

    /// Frames `[start, start + len)` with matching supervision.
    pub fn window(&self, start: usize, len: usize) -> Result<(VideoClip, Target)> {
        let clip = self.clip.window(start, len)?;
        let ppg = self.ppg.slice(start, len)?.into_samples();
        Ok((clip, Target { ppg, hr: self.window_hr(start, len) }))
    }

    pub fn manifest_row(&self, path: &str) -> ManifestRow {
        ManifestRow {
            id: self.id.clone(),
            subject: self.subject.clone(),
            hr: self.hr.bpm(),
            fps: self.clip.fps(),
            frames: self.frames(),
            path: path.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub subject: String,
    pub hr: f64,
    pub fps: f64,
    pub frames: usize,
    /// Video directory, relative to the manifest.
    pub path: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.subject.clone(),
            r.hr.to_string(),
            r.fps.to_string(),
            r.frames.to_string(),
            r.path.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected header {}", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let loc = format!("{} row {}", path.display(), i + 2);
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| Error::parse(&loc, format!("`{}` is not a number", &rec[k])))
        };
        rows.push(ManifestRow {
            id: rec[0].to_string(),
            subject: rec[1].to_string(),
            hr: num(2)?,
            fps: num(3)?,
            frames: rec[4]
                .parse()
                .map_err(|_| Error::parse(&loc, "frame count is not an integer"))?,
            path: rec[5].to_string(),
        });
    }
    Ok(rows)
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.png"))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one video directory. The clip must have three channels.
pub fn write_video_dir(dir: &Path, sample: &Sample) -> Result<()> {
    let clip = &sample.clip;
    if clip.channels() != 3 {
        return Err(Error::Shape(format!("PNG frames need 3 channels, got {}", clip.channels())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (clip.height(), clip.width());
    for t in 0..clip.frames() {
        let planes = [clip.plane(0, t), clip.plane(1, t), clip.plane(2, t)];
        let mut buf = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            buf.extend(planes.iter().map(|p| to_u8(p[i])));
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to the frame");
        let path = frame_path(dir, t);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    let meta = format_key_values([
        ("fps", clip.fps().to_string()),
        ("hr", sample.hr.bpm().to_string()),
        ("subject", sample.subject.clone()),
    ]);
    let mpath = dir.join("meta");
    fs::write(&mpath, meta).map_err(|e| Error::io(&mpath, e))?;
    sample.ppg.write_to(&dir.join("ppg.txt"))?;
    if let Some(labels) = &sample.hr_labels {
        let text: String = labels.iter().map(|v| format!("{v}\n")).collect();
        let p = dir.join("hr.txt");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_video_dir(dir: &Path, id: &str) -> Result<Sample> {
    let mpath = dir.join("meta");
    let meta_text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta = parse_key_values(&meta_text, &mpath.display().to_string())?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::parse(mpath.display().to_string(), format!("missing `{k}`")))
    };
    let fps: f64 = field("fps")?
        .parse()
        .map_err(|_| Error::parse(mpath.display().to_string(), "bad fps"))?;
    let hr: f64 = field("hr")?
        .parse()
        .map_err(|_| Error::parse(mpath.display().to_string(), "bad hr"))?;
    let subject = field("subject")?.clone();

    let mut frames = Vec::new();
    let mut size = None;
    while frame_path(dir, frames.len()).exists() {
        let path = frame_path(dir, frames.len());
        let img = image::open(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?
            .to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(Error::Shape(format!(
                "{}: frame is {}×{}, earlier frames are {}×{}",
                path.display(),
                dims.0,
                dims.1,
                size.unwrap().0,
                size.unwrap().1
            )));
        }
        frames.push(img);
    }
    let (w, h) = size.ok_or_else(|| Error::TooShort(format!("{}: no frames", dir.display())))?;
    let (t, h, w) = (frames.len(), h as usize, w as usize);
    let mut data = vec![0.0; 3 * t * h * w];
    for (f, img) in frames.iter().enumerate() {
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(c * t + f) * h * w + i] = px.0[c] as f64 / 255.0;
            }
        }
    }
    let clip = VideoClip::new(Tensor::from_vec(&[3, t, h, w], data)?, fps)?;
    let ppg = PulseSignal::read_from(&dir.join("ppg.txt"))?;
    let mut sample = Sample::new(id, subject, clip, ppg, HeartRate(hr))?;
    let hpath = dir.join("hr.txt");
    if hpath.exists() {
        let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let labels = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(hpath.display().to_string(), e.to_string()))?;
        if labels.len() != t {
            return Err(Error::Shape(format!("{}: {} labels for {t} frames", hpath.display(), labels.len())));
        }
        sample.hr_labels = Some(labels);
    }
    Ok(sample)
}

/// Write every sample under `dir` plus the manifest; returns the rows.
pub fn save_dataset(dir: &Path, samples: &[Sample], exec: Exec) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    exec.map_collect(samples.len(), |i| write_video_dir(&dir.join(&samples[i].id), &samples[i]))
        .into_iter()
        .collect::<Result<Vec<()>>>()?;
    let rows: Vec<ManifestRow> = samples.iter().map(|s| s.manifest_row(&s.id)).collect();
    write_manifest(&dir.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

/// Load the videos listed in a manifest (a file, or a directory holding
/// `manifest.csv`).
pub fn load_dataset(path: &Path, exec: Exec) -> Result<Vec<Sample>> {
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let rows = read_manifest(&manifest)?;
    exec.map_collect(rows.len(), |i| {
        let row = &rows[i];
        let s = read_video_dir(&root.join(&row.path), &row.id)?;
        if s.frames() != row.frames || (s.clip.fps() - row.fps).abs() > 1e-9 {
            return Err(Error::Shape(format!(
                "{}: manifest says {} frames at {} fps, found {} at {}",
                row.id,
                row.frames,
                row.fps,
                s.frames(),
                s.clip.fps()
            )));
        }
        Ok(s)
    })
    .into_iter()
    .collect()
}

/// One uniformly placed window of `len` frames from every sample, in order.
pub fn random_windows(samples: &[&Sample], len: usize, rng: &mut impl rand::Rng) -> Result<Vec<(VideoClip, Target)>> {
    samples
        .iter()
        .map(|s| {
            if s.frames() < len {
                return Err(Error::TooShort(format!("{} has {} frames, windows need {len}", s.id, s.frames())));
            }
            let start = rng.random_range(0..=s.frames() - len);
            s.window(start, len)
        })
        .collect()
}
