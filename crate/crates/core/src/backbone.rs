//! The full network: stem, four blocks of two cells with 1×1×1 projections,
//! max pooling between blocks, and a head that pools space, restores the
//! temporal length and projects to one channel.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{format_key_values, parse_key_values, read_arrays, write_arrays, NamedArrays};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::layers::{ConvUnit, Mode};
use crate::nas::{ArchParams, ArchSet, ArchVars, Cell, Genotype, SupernetOptions, NUM_EDGES, NUM_OPS};
use crate::objectives::{batch_loss, LossConfig, LossTerms, Target};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::signal::{PulseSignal, VideoClip};
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 4;
pub const INPUT_CHANNELS: usize = 3;
const STEM_KERNEL: [usize; 3] = [1, 5, 5];
const ARCH_INIT_SCALE: f64 = 1e-3;

/// What the cells are made of.
#[derive(Debug, Clone, PartialEq)]
pub enum CellSpec {
    Discrete(Genotype),
    /// Mixed cells with learnable logits; one logit set per block unless shared.
    Supernet { shared: bool, options: SupernetOptions },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub initial_channels: usize,
    pub cells_per_block: usize,
    pub pool_windows: Vec<[usize; 3]>,
    pub cells: CellSpec,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(initial_channels: usize, cells: CellSpec) -> Self {
        NetworkConfig {
            initial_channels,
            cells_per_block: 2,
            pool_windows: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2]],
            cells,
            seed: 0,
        }
    }

    pub fn preset(name: &str, initial_channels: usize) -> Result<Self> {
        let g = Genotype::preset(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown genotype preset `{name}`")))?;
        Ok(Self::new(initial_channels, CellSpec::Discrete(g)))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_channels == 0 || self.cells_per_block == 0 {
            return Err(Error::InvalidArgument("channel and cell counts must be positive".into()));
        }
        if self.pool_windows.len() != NUM_BLOCKS - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} pooling layers configured, expected {}",
                self.pool_windows.len(),
                NUM_BLOCKS - 1
            )));
        }
        if self.pool_windows.iter().flatten().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("pooling windows must be positive".into()));
        }
        match &self.cells {
            CellSpec::Discrete(g) => g.validate(),
            CellSpec::Supernet { options, .. } => {
                let k = options.partial_channels;
                if k == 0 || self.initial_channels % k != 0 {
                    Err(Error::InvalidArgument(format!(
                        "partial-channel ratio {k} must divide {} channels",
                        self.initial_channels
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Total `[t, h, w]` downsampling across the pools.
    pub fn reduction(&self) -> [usize; 3] {
        let mut r = [1; 3];
        for w in &self.pool_windows {
            for a in 0..3 {
                r[a] *= w[a];
            }
        }
        r
    }

    pub fn to_text(&self) -> String {
        let pools: Vec<String> = self
            .pool_windows
            .iter()
            .map(|w| format!("{}x{}x{}", w[0], w[1], w[2]))
            .collect();
        let mut pairs = vec![
            ("initial_channels", self.initial_channels.to_string()),
            ("cells_per_block", self.cells_per_block.to_string()),
            ("pool_windows", pools.join(",")),
            ("seed", self.seed.to_string()),
        ];
        match &self.cells {
            CellSpec::Discrete(_) => pairs.push(("cells", "discrete".into())),
            CellSpec::Supernet { shared, options } => {
                pairs.push(("cells", "supernet".into()));
                pairs.push(("shared", shared.to_string()));
                pairs.push(("partial_channels", options.partial_channels.to_string()));
                pairs.push(("edge_normalization", options.edge_normalization.to_string()));
            }
        }
        format_key_values(pairs)
    }

    /// Parse the text form; discrete configs take their cells from `genotype`.
    pub fn from_text(text: &str, genotype: Option<Genotype>) -> Result<Self> {
        let kv = parse_key_values(text, "network config")?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::parse("network config", format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse("network config", format!("`{k}` is not an integer")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse("network config", format!("`{k}` is not true/false")))
        };
        let pool_windows = get("pool_windows")?
            .split(',')
            .map(|w| {
                let v: Vec<usize> = w.trim().split('x').filter_map(|d| d.parse().ok()).collect();
                <[usize; 3]>::try_from(v)
                    .map_err(|_| Error::parse("network config", format!("bad pooling window `{w}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cells = match get("cells")? {
            "discrete" => CellSpec::Discrete(
                genotype.ok_or_else(|| Error::parse("network config", "discrete cells need a genotype"))?,
            ),
            "supernet" => CellSpec::Supernet {
                shared: flag("shared")?,
                options: SupernetOptions {
                    partial_channels: num("partial_channels")?,
                    edge_normalization: flag("edge_normalization")?,
                },
            },
            other => return Err(Error::parse("network config", format!("unknown cell kind `{other}`"))),
        };
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::parse("network config", "`seed` is not an integer"))?;
        Ok(NetworkConfig {
            initial_channels: num("initial_channels")?,
            cells_per_block: num("cells_per_block")?,
            pool_windows,
            cells,
            seed,
        })
    }
}

#[derive(Debug, Clone)]
struct CellSlot {
    cell: Cell,
    proj: ConvUnit,
    /// Index into the architecture logit sets (supernet only).
    arch_set: usize,
}

#[derive(Debug, Clone)]
struct ArchIds {
    alpha: ParamId,
    beta: Option<ParamId>,
}

/// Batched clips with their supervision.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, 3, T, H, W]`.
    pub input: Tensor,
    pub targets: Vec<Target>,
    pub fps: f64,
}

impl Batch {
    pub fn new(items: &[(VideoClip, Target)]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("batch"))?;
        let fps = first.0.fps();
        if items.iter().any(|(c, _)| (c.fps() - fps).abs() > 1e-9) {
            return Err(Error::InvalidArgument("batch mixes frame rates".into()));
        }
        let clips: Vec<&VideoClip> = items.iter().map(|(c, _)| c).collect();
        Ok(Batch {
            input: VideoClip::batch(&clips)?,
            targets: items.iter().map(|(_, t)| t.clone()).collect(),
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RppgNet {
    config: NetworkConfig,
    store: ParamStore,
    stem: ConvUnit,
    blocks: Vec<Vec<CellSlot>>,
    head: ParamId,
    arch: Vec<ArchIds>,
    exec: Exec,
}

impl RppgNet {
    pub fn build(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.initial_channels;
        let stem = ConvUnit::new(&mut store, "stem", INPUT_CHANNELS, c, STEM_KERNEL, None, &mut rng);
        let mut arch = Vec::new();
        if let CellSpec::Supernet { shared, options } = &config.cells {
            let sets = if *shared { 1 } else { NUM_BLOCKS };
            for s in 0..sets {
                let init = ArchSet::random(&mut rng, ARCH_INIT_SCALE, options.edge_normalization);
                let alpha = store.add(
                    format!("arch.{s}.alpha"),
                    Tensor::from_vec(&[NUM_EDGES * NUM_OPS], init.flat_alpha())?,
                    ParamGroup::Architecture,
                );
                let beta = match init.beta {
                    Some(b) => Some(store.add(
                        format!("arch.{s}.beta"),
                        Tensor::from_vec(&[NUM_EDGES], b.to_vec())?,
                        ParamGroup::Architecture,
                    )),
                    None => None,
                };
                arch.push(ArchIds { alpha, beta });
            }
        }
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for b in 0..NUM_BLOCKS {
            let mut slots = Vec::with_capacity(config.cells_per_block);
            for k in 0..config.cells_per_block {
                let name = format!("block{b}.cell{k}");
                let (cell, arch_set) = match &config.cells {
                    CellSpec::Discrete(g) => {
                        (Cell::discrete(&mut store, &name, c, g.cell_for_block(b), &mut rng)?, 0)
                    }
                    CellSpec::Supernet { shared, options } => (
                        Cell::mixed(&mut store, &name, c, *options, &mut rng)?,
                        if *shared { 0 } else { b },
                    ),
                };
                let proj = ConvUnit::new(
                    &mut store,
                    &format!("{name}.proj"),
                    Cell::output_channels(c),
                    c,
                    [1, 1, 1],
                    None,
                    &mut rng,
                );
                slots.push(CellSlot { cell, proj, arch_set });
            }
            blocks.push(slots);
        }
        let head = store.add_conv_kernel("head.weight", [1, c, 1, 1, 1], &mut rng);
        Ok(RppgNet {
            config,
            store,
            stem,
            blocks,
            head,
            arch,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of trainable network weights (architecture logits excluded).
    pub fn param_count(&self) -> usize {
        self.store.count(ParamGroup::Weights)
    }

    pub fn is_supernet(&self) -> bool {
        !self.arch.is_empty()
    }

    pub fn arch_params(&self) -> Option<ArchParams> {
        if self.arch.is_empty() {
            return None;
        }
        let sets = self
            .arch
            .iter()
            .map(|ids| {
                let beta = ids.beta.map(|b| self.store.value(b).data());
                ArchSet::from_flat(self.store.value(ids.alpha).data(), beta)
            })
            .collect::<Result<Vec<_>>>()
            .ok()?;
        Some(ArchParams { sets })
    }

    /// Check `[N, 3, T, H, W]` against the pooling contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, t, h, w] = <[usize; 5]>::try_from(shape)
            .map_err(|_| Error::Shape(format!("expected [N, C, T, H, W] input, got {shape:?}")))?;
        if c != INPUT_CHANNELS {
            return Err(Error::Shape(format!("channels: expected {INPUT_CHANNELS}, got {c}")));
        }
        let r = self.config.reduction();
        for (name, extent, factor) in [("frames", t, r[0]), ("height", h, r[1]), ("width", w, r[2])] {
            if extent == 0 || extent % factor != 0 {
                return Err(Error::Shape(format!("{name}: {extent} is not a positive multiple of {factor}")));
            }
        }
        Ok(())
    }

    /// Network output `[N, 1, T, 1, 1]` for input `x`.
    pub fn forward_graph(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let store = &mut self.store;
        let arch_vars: Vec<ArchVars> = self
            .arch
            .iter()
            .map(|ids| ArchVars {
                alpha: g.param(store, ids.alpha),
                beta: ids.beta.map(|b| g.param(store, b)),
            })
            .collect();
        let mut h = self.stem.forward(g, store, x, mode)?;
        for (b, slots) in self.blocks.iter().enumerate() {
            for slot in slots {
                let vars = arch_vars.get(slot.arch_set).copied();
                let y = slot.cell.forward(g, store, h, vars, mode)?;
                h = slot.proj.forward(g, store, y, mode)?;
            }
            if let Some(window) = self.config.pool_windows.get(b) {
                h = g.max_pool(h, *window)?;
            }
        }
        h = g.spatial_mean(h)?;
        h = g.temporal_upsample(h, self.config.reduction()[0])?;
        let w = g.param(store, self.head);
        g.conv3d(h, w, crate::kernels::ConvGeometry::same([1, 1, 1]))
    }

    /// Overall loss of a batch, attached to `g`.
    pub fn loss(&mut self, g: &mut Graph, batch: &Batch, cfg: &LossConfig, mode: Mode) -> Result<(Var, LossTerms)> {
        let x = g.input(batch.input.clone());
        let y = self.forward_graph(g, x, mode)?;
        batch_loss(g, y, &batch.targets, batch.fps, cfg)
    }

    /// Predict the pulse signals of several clips (evaluation mode).
    pub fn forward_batch(&mut self, clips: &[&VideoClip]) -> Result<Vec<PulseSignal>> {
        let input = VideoClip::batch(clips)?;
        let n = clips.len();
        let mut g = Graph::new(self.exec);
        let x = g.input(input);
        let y = self.forward_graph(&mut g, x, Mode::Eval)?;
        let out = g.value(y);
        let t = out.len() / n;
        clips
            .iter()
            .enumerate()
            .map(|(i, c)| PulseSignal::new(out.data()[i * t..(i + 1) * t].to_vec(), c.fps()))
            .collect()
    }

    pub fn forward(&mut self, clip: &VideoClip) -> Result<PulseSignal> {
        Ok(self.forward_batch(&[clip])?.remove(0))
    }

    /// Parameters and buffers by name, in registration order.
    pub fn named_arrays(&self) -> NamedArrays {
        self.store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .chain(self.store.buffers().iter().cloned())
            .collect()
    }

    pub fn load_arrays(&mut self, arrays: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in arrays {
            self.store.load_named(name, t.clone())?;
        }
        let expected = self.store.params().len() + self.store.buffers().len();
        if arrays.len() != expected {
            return Err(Error::parse(
                "checkpoint",
                format!("{} arrays stored, model has {expected}", arrays.len()),
            ));
        }
        Ok(())
    }

    /// Write `config.txt`, `genotype.txt` (discrete cells) and the
    /// `params.txt` / `params.bin` pair into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("config.txt");
        std::fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(&cfg, e))?;
        if let CellSpec::Discrete(g) = &self.config.cells {
            g.save(&dir.join("genotype.txt"))?;
        }
        write_arrays(dir, "params", &self.named_arrays())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.txt");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let gpath = dir.join("genotype.txt");
        let genotype = if gpath.exists() { Some(Genotype::load(&gpath)?) } else { None };
        let mut net = RppgNet::build(NetworkConfig::from_text(&text, genotype)?)?;
        net.load_arrays(&read_arrays(dir, "params")?)?;
        Ok(net)
    }
}
