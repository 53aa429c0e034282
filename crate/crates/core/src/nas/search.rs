//! First-order bi-level optimisation of weights and architecture logits.

use rand::seq::SliceRandom;

use crate::autograd::{Graph, Var};
use crate::backbone::{Batch, CellSpec, NetworkConfig, RppgNet};
use crate::dataset::{random_windows, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::layers::Mode;
use crate::nas::arch::{derive_architecture, ArchParams};
use crate::nas::cell::SupernetOptions;
use crate::nas::genotype::Genotype;
use crate::objectives::LossConfig;
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::stream_rng;

/// A model whose parameters split into weights and architecture logits.
pub trait BilevelModel {
    type Batch;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn batch_len(batch: &Self::Batch) -> usize;
    /// Attach the scalar loss of `batch` to `g`.
    fn loss(&mut self, g: &mut Graph, batch: &Self::Batch) -> Result<Var>;
}

/// One optimiser per parameter group.
#[derive(Debug, Clone)]
pub struct BilevelOptimizers {
    pub weights: Adam,
    pub arch: Adam,
}

impl BilevelOptimizers {
    pub fn new(store: &ParamStore, weights: AdamConfig, arch: AdamConfig) -> Self {
        BilevelOptimizers {
            weights: Adam::new(weights, store.ids_in(ParamGroup::Weights), store),
            arch: Adam::new(arch, store.ids_in(ParamGroup::Architecture), store),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub train_loss: f64,
    /// `None` when the logits were frozen.
    pub val_loss: Option<f64>,
}

fn gradient_step<M: BilevelModel>(model: &mut M, batch: &M::Batch, opt: &mut Adam, exec: Exec, what: &str) -> Result<f64> {
    model.store_mut().zero_grads();
    let mut g = Graph::new(exec);
    let loss = model.loss(&mut g, batch)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            value,
            context: format!("{what} step"),
        });
    }
    g.backward(loss)?.accumulate_into(model.store_mut());
    opt.step(model.store_mut());
    Ok(value)
}

/// Update the weights on `train`, then (unless `freeze_arch`) the logits on
/// `val` with the freshly updated weights.
pub fn bilevel_step<M: BilevelModel>(
    model: &mut M,
    opts: &mut BilevelOptimizers,
    train: &M::Batch,
    val: &M::Batch,
    freeze_arch: bool,
    exec: Exec,
) -> Result<StepReport> {
    if M::batch_len(train) == 0 || M::batch_len(val) == 0 {
        return Err(Error::Empty("bi-level batch"));
    }
    let train_loss = gradient_step(model, train, &mut opts.weights, exec, "weight")?;
    let val_loss = if freeze_arch {
        None
    } else {
        Some(gradient_step(model, val, &mut opts.arch, exec, "architecture")?)
    };
    Ok(StepReport { train_loss, val_loss })
}

/// A supernet paired with its training objective.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub net: RppgNet,
    pub loss: LossConfig,
}

impl BilevelModel for Supernet {
    type Batch = Batch;

    fn store(&self) -> &ParamStore {
        self.net.store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.net.store_mut()
    }

    fn batch_len(batch: &Batch) -> usize {
        batch.len()
    }

    fn loss(&mut self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        Ok(self.net.loss(g, batch, &self.loss, Mode::Train)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub initial_channels: usize,
    pub shared: bool,
    pub options: SupernetOptions,
    pub epochs: usize,
    /// Epochs at the start during which the logits stay frozen.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub clip_len: usize,
    pub weights_opt: AdamConfig,
    pub arch_opt: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            initial_channels: 8,
            shared: true,
            options: SupernetOptions::default(),
            epochs: 12,
            warmup_epochs: 5,
            batch_size: 2,
            clip_len: 128,
            weights_opt: AdamConfig::new(1e-4, 5e-5),
            arch_opt: AdamConfig::new(6e-4, 1e-3),
            loss: LossConfig::default(),
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Mean per-edge softmax entropy after the epoch.
    pub entropy: f64,
    pub arch_updated: bool,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub arch: ArchParams,
    pub trace: Vec<SearchEpoch>,
    pub supernet: RppgNet,
}

impl SearchOutcome {
    /// Entropy after the first epoch that updated the logits.
    pub fn first_post_warmup_entropy(&self) -> Option<f64> {
        self.trace.iter().find(|e| e.arch_updated).map(|e| e.entropy)
    }

    pub fn final_entropy(&self) -> Option<f64> {
        self.trace.last().map(|e| e.entropy)
    }
}

fn batches(items: Vec<(crate::signal::VideoClip, crate::objectives::Target)>, size: usize) -> Result<Vec<Batch>> {
    items.chunks(size.max(1)).map(Batch::new).collect()
}

/// Even-indexed samples train the weights, odd-indexed ones the logits.
pub fn search(samples: &[Sample], cfg: &SearchConfig) -> Result<SearchOutcome> {
    let train: Vec<&Sample> = samples.iter().step_by(2).collect();
    let val: Vec<&Sample> = samples.iter().skip(1).step_by(2).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("search split"));
    }
    let net_cfg = NetworkConfig::new(
        cfg.initial_channels,
        CellSpec::Supernet {
            shared: cfg.shared,
            options: cfg.options,
        },
    )
    .with_seed(cfg.seed);
    let mut model = Supernet {
        net: RppgNet::build(net_cfg)?.with_exec(cfg.exec),
        loss: cfg.loss,
    };
    let mut opts = BilevelOptimizers::new(model.store(), cfg.weights_opt, cfg.arch_opt);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, epoch as u64);
        let mut train_items = random_windows(&train, cfg.clip_len, &mut rng)?;
        let mut val_items = random_windows(&val, cfg.clip_len, &mut rng)?;
        train_items.shuffle(&mut rng);
        val_items.shuffle(&mut rng);
        let train_batches = batches(train_items, cfg.batch_size)?;
        let val_batches = batches(val_items, cfg.batch_size)?;
        let freeze = epoch < cfg.warmup_epochs;
        let (mut tsum, mut vsum, mut vcount) = (0.0, 0.0, 0usize);
        for (i, tb) in train_batches.iter().enumerate() {
            let vb = &val_batches[i % val_batches.len()];
            let r = bilevel_step(&mut model, &mut opts, tb, vb, freeze, cfg.exec).map_err(|e| match e {
                Error::NonFiniteLoss { value, context } => Error::NonFiniteLoss {
                    value,
                    context: format!("{context}, search epoch {epoch}, batch {i}"),
                },
                other => other,
            })?;
            tsum += r.train_loss;
            if let Some(v) = r.val_loss {
                vsum += v;
                vcount += 1;
            }
        }
        let arch = model.net.arch_params().expect("supernet has logits");
        let entry = SearchEpoch {
            epoch,
            train_loss: tsum / train_batches.len() as f64,
            val_loss: (vcount > 0).then(|| vsum / vcount as f64),
            entropy: arch.mean_entropy(),
            arch_updated: !freeze,
        };
        log::info!(
            "search epoch {epoch}: train {:.4}, val {}, entropy {:.5}",
            entry.train_loss,
            entry.val_loss.map_or("frozen".to_string(), |v| format!("{v:.4}")),
            entry.entropy
        );
        trace.push(entry);
    }
    let arch = model.net.arch_params().expect("supernet has logits");
    Ok(SearchOutcome {
        genotype: derive_architecture(&arch)?,
        arch,
        trace,
        supernet: model.net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, DatasetSpec};
    use crate::tensor::Tensor;

    /// Weights `w` chase the logits `a` (train loss `|w − a|²`); the
    /// validation loss `|w − c|² + |a − c|²` pulls both toward `c`.
    struct Toy {
        store: ParamStore,
        w: crate::params::ParamId,
        a: crate::params::ParamId,
        c: Tensor,
    }

    enum ToyBatch {
        Train,
        Val,
        Empty,
    }

    impl Toy {
        fn new() -> Self {
            let mut store = ParamStore::new();
            let w = store.add("w", Tensor::zeros(&[2]), ParamGroup::Weights);
            let a = store.add("a", Tensor::zeros(&[2]), ParamGroup::Architecture);
            Toy {
                store,
                w,
                a,
                c: Tensor::from_vec(&[2], vec![1.0, -0.5]).unwrap(),
            }
        }

        fn sq(g: &mut Graph, z: Var) -> Result<Var> {
            let v = g.value(z).clone();
            let value = v.data().iter().map(|x| x * x).sum();
            g.scalar_fn(z, value, v.map(|x| 2.0 * x))
        }
    }

    impl BilevelModel for Toy {
        type Batch = ToyBatch;

        fn store(&self) -> &ParamStore {
            &self.store
        }

        fn store_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }

        fn batch_len(b: &ToyBatch) -> usize {
            usize::from(!matches!(b, ToyBatch::Empty))
        }

        fn loss(&mut self, g: &mut Graph, batch: &ToyBatch) -> Result<Var> {
            let w = g.param(&self.store, self.w);
            let a = g.param(&self.store, self.a);
            match batch {
                ToyBatch::Train => {
                    let z = g.add_scaled(w, a, -1.0)?;
                    Self::sq(g, z)
                }
                _ => {
                    let c = g.input(self.c.clone());
                    let zw = g.add_scaled(w, c, -1.0)?;
                    let za = g.add_scaled(a, c, -1.0)?;
                    let (lw, la) = (Self::sq(g, zw)?, Self::sq(g, za)?);
                    g.add(lw, la)
                }
            }
        }
    }

    fn toy_opts(toy: &Toy, arch_lr: f64) -> BilevelOptimizers {
        BilevelOptimizers::new(&toy.store, AdamConfig::new(0.005, 0.0), AdamConfig::new(arch_lr, 0.0))
    }

    #[test]
    fn toy_validation_loss_never_rises() {
        let mut toy = Toy::new();
        let mut opts = toy_opts(&toy, 0.01);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let r = bilevel_step(&mut toy, &mut opts, &ToyBatch::Train, &ToyBatch::Val, false, Exec::Sequential).unwrap();
            let v = r.val_loss.unwrap();
            assert!(v <= last + 1e-15, "{v} > {last}");
            last = v;
        }
        assert!(last < 2.0);
    }

    #[test]
    fn frozen_or_zero_rate_logits_do_not_move() {
        for (freeze, lr) in [(true, 0.01), (false, 0.0)] {
            let mut toy = Toy::new();
            let mut opts = toy_opts(&toy, lr);
            for _ in 0..5 {
                bilevel_step(&mut toy, &mut opts, &ToyBatch::Train, &ToyBatch::Val, freeze, Exec::Sequential).unwrap();
            }
            assert_eq!(toy.store.value(toy.a).data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut toy = Toy::new();
        let mut opts = toy_opts(&toy, 0.01);
        assert!(bilevel_step(&mut toy, &mut opts, &ToyBatch::Empty, &ToyBatch::Val, false, Exec::Sequential).is_err());
    }

    #[test]
    fn tiny_search_runs_and_derives_a_valid_cell() {
        let mut spec = DatasetSpec::new(4, (60.0, 120.0), 2, 1);
        spec.template.frames = 40;
        spec.template.height = 8;
        spec.template.width = 8;
        spec.template.skin_region = crate::signal::Region { top: 1, left: 1, height: 6, width: 6 };
        spec.template.fps = 16.0;
        let data = gen_dataset(&spec, Exec::Sequential).unwrap();
        let cfg = SearchConfig {
            initial_channels: 2,
            shared: false,
            epochs: 2,
            warmup_epochs: 1,
            clip_len: 32,
            weights_opt: AdamConfig::new(1e-3, 5e-5),
            arch_opt: AdamConfig::new(1e-2, 1e-3),
            ..Default::default()
        };
        let out = search(&data, &cfg).unwrap();
        out.genotype.validate().unwrap();
        assert_eq!(out.genotype.cells().len(), 4);
        assert_eq!(out.trace.len(), 2);
        assert!(out.trace[0].val_loss.is_none() && !out.trace[0].arch_updated);
        assert!(out.trace[1].arch_updated);
        assert!(search(&data[..1], &cfg).is_err());
    }
}
