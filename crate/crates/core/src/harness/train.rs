//! Weight training with per-epoch checkpoints, a CSV loss log and resume.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{da1_cutout, da2_resample, AugmentConfig};
use crate::autograd::Graph;
use crate::backbone::{Batch, NetworkConfig, RppgNet};
use crate::checkpoint::{format_key_values, parse_key_values, read_arrays, write_arrays};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::harness::config::ExperimentConfig;
use crate::layers::Mode;
use crate::objectives::{LossConfig, Target};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamGroup;
use crate::rng::{derive_seed, stream_rng};
use crate::signal::VideoClip;

pub const LOG_HEADER: [&str; 4] = ["epoch", "L_time", "L_fre", "L_overall"];
const OPTIM_PREFIX: &str = "adam";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_len: usize,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub da1: bool,
    pub da2: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub exec: Exec,
}

impl TrainConfig {
    pub fn new(network: NetworkConfig) -> Self {
        let seed = network.seed;
        TrainConfig {
            network,
            epochs: 15,
            batch_size: 4,
            clip_len: 160,
            optimizer: AdamConfig::new(1e-4, 5e-5),
            loss: LossConfig::default(),
            da1: false,
            da2: false,
            augment: AugmentConfig::default(),
            seed,
            exec: Exec::default(),
        }
    }

    pub fn from_experiment(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(TrainConfig {
            network: cfg.network()?,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            clip_len: cfg.clip_len,
            optimizer: AdamConfig::new(cfg.lr, cfg.weight_decay),
            loss: cfg.loss(),
            da1: cfg.da1,
            da2: cfg.da2,
            augment: cfg.augment(),
            seed: cfg.seed,
            exec: cfg.exec(),
        })
    }
}

/// Batch-mean loss terms over one epoch; epochs count from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub time: f64,
    pub freq: f64,
    pub overall: f64,
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOG_HEADER)?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.time.to_string(), r.freq.to_string(), r.overall.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let loc = format!("{} row {}", path.display(), i + 2);
        let f = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(&loc, format!("bad `{}` value", LOG_HEADER[k])))
        };
        rows.push(EpochLog {
            epoch: f(0)? as usize,
            time: f(1)?,
            freq: f(2)?,
            overall: f(3)?,
        });
    }
    Ok(rows)
}

/// Resampled copy of a whole video, or `None` when its rate is between the
/// thresholds.
fn resampled(sample: &Sample, cfg: &AugmentConfig) -> Result<Option<Sample>> {
    let (clip, ppg, hr) = da2_resample(&sample.clip, &sample.ppg, sample.hr, cfg)?;
    if hr == sample.hr {
        return Ok(None);
    }
    let factor = hr.bpm() / sample.hr.bpm();
    let mut out = Sample::new(format!("{}+da2", sample.id), sample.subject.clone(), clip, ppg, hr)?;
    out.hr_labels = sample.hr_labels.as_ref().map(|l| {
        if factor < 1.0 {
            (0..2 * l.len()).map(|j| l[j / 2] * factor).collect()
        } else {
            (0..l.len() / 2).map(|i| l[2 * i] * factor).collect()
        }
    });
    Ok(Some(out))
}

fn window_of(sample: &Sample, len: usize, rng: &mut impl Rng) -> Result<(VideoClip, Target)> {
    if sample.frames() < len {
        return Err(Error::TooShort(format!(
            "{} has {} frames, training windows need {len}",
            sample.id,
            sample.frames()
        )));
    }
    let start = rng.random_range(0..=sample.frames() - len);
    sample.window(start, len)
}

/// Training windows for one epoch, already shuffled. Every sample yields a
/// random window; with DA2 an eligible sample adds a window of its resampled
/// copy (skipped when that copy is too short); with DA1 each window gets a
/// tube with the configured probability.
pub fn epoch_items(samples: &[&Sample], cfg: &TrainConfig, epoch: usize) -> Result<Vec<(VideoClip, Target)>> {
    let epoch_seed = derive_seed(cfg.seed, epoch as u64);
    let per_sample = cfg.exec.map_collect(samples.len(), |i| -> Result<Vec<(VideoClip, Target)>> {
        let mut rng = stream_rng(epoch_seed, i as u64);
        let mut items = vec![window_of(samples[i], cfg.clip_len, &mut rng)?];
        if cfg.da2 {
            if let Some(extra) = resampled(samples[i], &cfg.augment)? {
                if extra.frames() >= cfg.clip_len {
                    items.push(window_of(&extra, cfg.clip_len, &mut rng)?);
                } else {
                    log::debug!("{}: resampled copy too short for a training window", extra.id);
                }
            }
        }
        if cfg.da1 {
            for item in &mut items {
                if rng.random_bool(cfg.augment.cutout_prob) {
                    item.0 = da1_cutout(&item.0, &cfg.augment, &mut rng);
                }
            }
        }
        Ok(items)
    });
    let mut all = Vec::new();
    for items in per_sample {
        all.extend(items?);
    }
    all.shuffle(&mut stream_rng(epoch_seed, u64::MAX));
    Ok(all)
}

pub struct Trainer {
    pub net: RppgNet,
    optimizer: Adam,
    cfg: TrainConfig,
    log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.loss.validate()?;
        cfg.augment.validate()?;
        let net = RppgNet::build(cfg.network.clone())?.with_exec(cfg.exec);
        let optimizer = Adam::new(cfg.optimizer, net.store().ids_in(ParamGroup::Weights), net.store());
        Ok(Trainer {
            net,
            optimizer,
            cfg,
            log: Vec::new(),
        })
    }

    /// Continue from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(dir: &Path, cfg: TrainConfig) -> Result<Self> {
        let net = RppgNet::load(dir)?.with_exec(cfg.exec);
        let mut optimizer = Adam::new(cfg.optimizer, net.store().ids_in(ParamGroup::Weights), net.store());
        optimizer.load_state(OPTIM_PREFIX, net.store(), &read_arrays(dir, "optimizer")?)?;
        let log = read_log(&dir.join("train_log.csv"))?;
        let state_path = dir.join("state.txt");
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state = parse_key_values(&text, &state_path.display().to_string())?;
        let epoch: usize = state
            .get("epoch")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(state_path.display().to_string(), "missing `epoch`"))?;
        if epoch != log.len() {
            return Err(Error::parse(
                state_path.display().to_string(),
                format!("checkpoint is at epoch {epoch} but its log has {} rows", log.len()),
            ));
        }
        Ok(Trainer {
            net,
            optimizer,
            cfg,
            log,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn run_epoch(&mut self, samples: &[&Sample]) -> Result<EpochLog> {
        let epoch = self.log.len() + 1;
        let items = epoch_items(samples, &self.cfg, epoch)?;
        if items.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let (mut t, mut f, mut o, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in items.chunks(self.cfg.batch_size.max(1)).enumerate() {
            let batch = Batch::new(chunk)?;
            self.net.store_mut().zero_grads();
            let mut g = Graph::new(self.cfg.exec);
            let (loss, terms) = self.net.loss(&mut g, &batch, &self.cfg.loss, Mode::Train).map_err(|e| match e {
                Error::NonFiniteLoss { value, context } => Error::NonFiniteLoss {
                    value,
                    context: format!("{context}, epoch {epoch}, step {step}"),
                },
                other => other,
            })?;
            g.backward(loss)?.accumulate_into(self.net.store_mut());
            self.optimizer.step(self.net.store_mut());
            t += terms.time;
            f += terms.freq;
            o += terms.overall;
            n += 1;
        }
        let row = EpochLog {
            epoch,
            time: t / n as f64,
            freq: f / n as f64,
            overall: o / n as f64,
        };
        log::info!(
            "epoch {epoch}: L_time {:.4}  L_fre {:.4}  L_overall {:.4}",
            row.time,
            row.freq,
            row.overall
        );
        self.log.push(row);
        Ok(row)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.net.save(dir)?;
        write_arrays(dir, "optimizer", &self.optimizer.state_arrays(OPTIM_PREFIX, self.net.store()))?;
        write_log(&dir.join("train_log.csv"), &self.log)?;
        let p = dir.join("state.txt");
        fs::write(&p, format_key_values([("epoch", self.log.len().to_string())])).map_err(|e| Error::io(&p, e))
    }
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: RppgNet,
    pub log: Vec<EpochLog>,
}

/// Train up to `cfg.epochs`, optionally resuming, writing a checkpoint and
/// the log under `out` after every epoch when `out` is given.
pub fn train(samples: &[&Sample], cfg: &TrainConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir, cfg.clone())?,
        None => Trainer::new(cfg.clone())?,
    };
    while trainer.epochs_done() < cfg.epochs {
        trainer.run_epoch(samples)?;
        if let Some(out) = out {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            trainer.save_checkpoint(&checkpoint_dir(out, trainer.epochs_done()))?;
            write_log(&out.join("train_log.csv"), trainer.log())?;
        }
    }
    Ok(TrainOutcome {
        log: trainer.log,
        net: trainer.net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Region;
    use crate::synth::{gen_dataset, DatasetSpec};

    fn tiny_data(n: usize, frames: usize) -> Vec<Sample> {
        let mut spec = DatasetSpec::new(n, (60.0, 110.0), 2, 7);
        spec.template.frames = frames;
        spec.template.fps = 16.0;
        spec.template.height = 8;
        spec.template.width = 8;
        spec.template.skin_region = Region {
            top: 1,
            left: 1,
            height: 6,
            width: 6,
        };
        gen_dataset(&spec, Exec::Sequential).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(NetworkConfig::preset("autohr_v1", 2).unwrap().with_seed(3));
        cfg.epochs = 3;
        cfg.clip_len = 32;
        cfg.batch_size = 2;
        cfg.optimizer = AdamConfig::new(3e-3, 5e-5);
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn epoch_items_follow_the_flags() {
        let data = tiny_data(4, 80);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut cfg = tiny_cfg();
        assert_eq!(epoch_items(&refs, &cfg, 1).unwrap().len(), 4);
        cfg.da2 = true;
        let eligible = data.iter().filter(|s| s.hr.bpm() > 90.0 || s.hr.bpm() < 70.0).count();
        let items = epoch_items(&refs, &cfg, 1).unwrap();
        assert_eq!(items.len(), 4 + eligible);
        assert_eq!(items, epoch_items(&refs, &cfg, 1).unwrap());
        assert_ne!(items, epoch_items(&refs, &cfg, 2).unwrap());
        cfg.clip_len = 100;
        assert!(epoch_items(&refs, &cfg, 1).is_err());
    }

    #[test]
    fn log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            EpochLog { epoch: 1, time: 0.1 + 0.2, freq: 4.0 / 3.0, overall: 1e-300 },
            EpochLog { epoch: 2, time: 0.5, freq: 1.25, overall: 1.35 },
        ];
        let p = dir.path().join("log.csv");
        write_log(&p, &rows).unwrap();
        assert_eq!(read_log(&p).unwrap(), rows);
        assert!(fs::read_to_string(&p).unwrap().starts_with("epoch,L_time,L_fre,L_overall\n"));
    }

    #[test]
    fn resume_matches_a_fresh_run() {
        let data = tiny_data(4, 48);
        let refs: Vec<&Sample> = data.iter().collect();
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let fresh = train(&refs, &cfg, Some(dir.path()), None).unwrap();
        assert_eq!(fresh.log.len(), 3);
        assert!(dir.path().join("train_log.csv").exists());
        let resumed = train(&refs, &cfg, None, Some(&checkpoint_dir(dir.path(), 1))).unwrap();
        assert_eq!(resumed.log[0], fresh.log[0]);
        for (a, b) in fresh.log.iter().zip(&resumed.log).skip(1) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.overall - b.overall).abs() <= 1e-4 * a.overall.abs().max(1.0));
        }
        // A second fresh run is identical.
        let again = train(&refs, &cfg, None, None).unwrap();
        assert_eq!(again.log, fresh.log);
    }

    #[test]
    fn time_term_is_logged_even_when_unweighted() {
        let data = tiny_data(2, 32);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        cfg.loss.lambda_time = 0.0;
        let out = train(&refs, &cfg, None, None).unwrap();
        let row = out.log[0];
        assert!(row.time > 0.0);
        assert_eq!(row.overall, row.freq);
    }
}
