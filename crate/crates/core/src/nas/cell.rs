//! Cells: a four-node DAG (input plus three intermediate nodes) whose output
//! is the channel concatenation of the intermediate nodes.

use std::ops::Range;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::layers::Mode;
use crate::nas::arch::ArchSet;
use crate::nas::genotype::{DiscreteCell, NUM_INTERMEDIATE};
use crate::nas::ops::{Candidate, MixedEdge, NUM_OPS};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NUM_EDGES: usize = 6;

/// `(source, target)` pairs. Each target's incoming edges are contiguous.
pub const EDGES: [(usize, usize); NUM_EDGES] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

pub fn incoming_edges(node: usize) -> Range<usize> {
    let start = EDGES.iter().position(|e| e.1 == node).unwrap_or(NUM_EDGES);
    let len = EDGES.iter().filter(|e| e.1 == node).count();
    start..start + len
}

pub fn edge_index(source: usize, target: usize) -> Option<usize> {
    EDGES.iter().position(|&e| e == (source, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupernetOptions {
    /// Only `channels / partial_channels` channels pass through the mixed
    /// operations; 1 disables partial channels.
    pub partial_channels: usize,
    pub edge_normalization: bool,
}

impl Default for SupernetOptions {
    fn default() -> Self {
        SupernetOptions {
            partial_channels: 1,
            edge_normalization: false,
        }
    }
}

/// Graph handles for a cell's architecture logits: `alpha` is the flat
/// `[6 * 9]` operation logits, `beta` the `[6]` edge logits.
#[derive(Debug, Clone, Copy)]
pub struct ArchVars {
    pub alpha: Var,
    pub beta: Option<Var>,
}

#[derive(Debug, Clone)]
pub enum Cell {
    Mixed {
        edges: Vec<MixedEdge>,
        channels: usize,
        options: SupernetOptions,
    },
    Discrete {
        /// `(target, source, op)`.
        edges: Vec<(usize, usize, Candidate)>,
    },
}

/// Output position `i * k + g` takes input channel `g * (c / k) + i`.
pub fn channel_shuffle_order(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    let mut order = vec![0; channels];
    for g in 0..groups {
        for i in 0..per {
            order[i * groups + g] = g * per + i;
        }
    }
    order
}

impl Cell {
    pub fn mixed(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        options: SupernetOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = options.partial_channels;
        if k == 0 || channels % k != 0 || channels / k == 0 {
            return Err(Error::InvalidArgument(format!(
                "partial-channel ratio {k} must divide {channels} channels"
            )));
        }
        let edges = EDGES
            .iter()
            .map(|(s, t)| MixedEdge::new(store, &format!("{name}.edge{s}{t}"), channels / k, rng))
            .collect();
        Ok(Cell::Mixed {
            edges,
            channels,
            options,
        })
    }

    pub fn discrete(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cell: &DiscreteCell,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cell.validate()?;
        let mut edges = Vec::new();
        for node in 1..=NUM_INTERMEDIATE {
            for e in cell.incoming(node) {
                let op = Candidate::build(e.op, store, &format!("{name}.edge{}{node}", e.source), channels, rng);
                edges.push((node, e.source, op));
            }
        }
        Ok(Cell::Discrete { edges })
    }

    pub fn output_channels(channels: usize) -> usize {
        NUM_INTERMEDIATE * channels
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        arch: Option<ArchVars>,
        mode: Mode,
    ) -> Result<Var> {
        let mut nodes = vec![x];
        match self {
            Cell::Mixed {
                edges,
                channels,
                options,
            } => {
                let arch = arch.ok_or_else(|| {
                    Error::InvalidArgument("a mixed cell needs architecture logits".into())
                })?;
                let alpha_len = g.value(arch.alpha).len();
                if alpha_len != NUM_EDGES * NUM_OPS {
                    return Err(Error::Shape(format!(
                        "expected {} operation logits, got {alpha_len}",
                        NUM_EDGES * NUM_OPS
                    )));
                }
                let c = g.value(x).shape()[1];
                if c != *channels {
                    return Err(Error::Shape(format!("cell expects {channels} channels, got {c}")));
                }
                let k = options.partial_channels;
                let active: Vec<usize> = (0..c / k).collect();
                let passive: Vec<usize> = (c / k..c).collect();
                let shuffle = channel_shuffle_order(c, k);
                for node in 1..=NUM_INTERMEDIATE {
                    let mut outs = Vec::new();
                    for e in incoming_edges(node) {
                        let src = nodes[EDGES[e].0];
                        let y = if k == 1 {
                            edges[e].forward(g, store, src, arch.alpha, e * NUM_OPS, mode)?
                        } else {
                            let xa = g.select_channels(src, &active)?;
                            let xb = g.select_channels(src, &passive)?;
                            let ya = edges[e].forward(g, store, xa, arch.alpha, e * NUM_OPS, mode)?;
                            let joined = g.concat(&[ya, xb])?;
                            g.select_channels(joined, &shuffle)?
                        };
                        outs.push(Some(y));
                    }
                    let h = match (options.edge_normalization, arch.beta) {
                        (true, Some(beta)) => g.softmax_mix(&outs, beta, incoming_edges(node).start)?,
                        (true, None) => {
                            return Err(Error::InvalidArgument("edge normalisation needs edge logits".into()))
                        }
                        (false, _) => g.sum(&outs.into_iter().flatten().collect::<Vec<_>>())?,
                    };
                    nodes.push(h);
                }
            }
            Cell::Discrete { edges } => {
                for node in 1..=NUM_INTERMEDIATE {
                    let mut outs = Vec::new();
                    for (target, source, op) in edges.iter().filter(|e| e.0 == node) {
                        debug_assert_eq!(*target, node);
                        if let Some(y) = op.forward(g, store, nodes[*source], mode)? {
                            outs.push(y);
                        }
                    }
                    nodes.push(g.sum(&outs)?);
                }
            }
        }
        g.concat(&nodes[1..])
    }
}

/// Run one cell on a concrete input (handy for inspection and tests).
pub fn cell_forward(
    cell: &Cell,
    store: &mut ParamStore,
    x: &Tensor,
    arch: Option<&ArchSet>,
    mode: Mode,
) -> Result<Tensor> {
    let mut g = Graph::new(Exec::default());
    let xv = g.input(x.clone());
    let vars = match arch {
        Some(set) => {
            let alpha = g.input(Tensor::from_vec(&[NUM_EDGES * NUM_OPS], set.flat_alpha())?);
            let beta = match &set.beta {
                Some(b) => Some(g.input(Tensor::from_vec(&[NUM_EDGES], b.to_vec())?)),
                None => None,
            };
            Some(ArchVars { alpha, beta })
        }
        None => None,
    };
    let y = cell.forward(&mut g, store, xv, vars, mode)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::genotype::GenotypeEdge;
    use crate::nas::ops::OpKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(c: usize) -> Tensor {
        Tensor::from_fn(&[2, c, 4, 4, 4], |i| ((i * 53 % 97) as f64 / 48.0) - 1.0)
    }

    #[test]
    fn edge_layout() {
        assert_eq!(incoming_edges(1), 0..1);
        assert_eq!(incoming_edges(2), 1..3);
        assert_eq!(incoming_edges(3), 3..6);
        assert_eq!(edge_index(1, 3), Some(4));
        assert_eq!(edge_index(3, 1), None);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let order = channel_shuffle_order(8, 4);
        assert_eq!(order, vec![0, 2, 4, 6, 1, 3, 5, 7]);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_eq!(channel_shuffle_order(6, 1), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn mixed_cell_triples_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for options in [
            SupernetOptions::default(),
            SupernetOptions {
                partial_channels: 2,
                edge_normalization: true,
            },
        ] {
            let mut store = ParamStore::new();
            let cell = Cell::mixed(&mut store, "c", 4, options, &mut rng).unwrap();
            let set = ArchSet::random(&mut rng, 1e-3, options.edge_normalization);
            let y = cell_forward(&cell, &mut store, &input(4), Some(&set), Mode::Train).unwrap();
            assert_eq!(y.shape(), &[2, 12, 4, 4, 4]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn bad_partial_ratio_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let options = SupernetOptions {
            partial_channels: 3,
            edge_normalization: false,
        };
        assert!(Cell::mixed(&mut store, "c", 4, options, &mut rng).is_err());
    }

    #[test]
    fn saturated_logits_match_the_discrete_cell() {
        // A mixed cell with one dominant op per kept edge and `none` elsewhere
        // computes the same map as the discrete cell sharing its weights.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mixed = Cell::mixed(&mut store, "c", 3, SupernetOptions::default(), &mut rng).unwrap();
        let target = DiscreteCell {
            nodes: [
                vec![GenotypeEdge { source: 0, op: OpKind::SkipConnect }],
                vec![
                    GenotypeEdge { source: 1, op: OpKind::SkipConnect },
                    GenotypeEdge { source: 0, op: OpKind::SkipConnect },
                ],
                vec![
                    GenotypeEdge { source: 2, op: OpKind::SkipConnect },
                    GenotypeEdge { source: 0, op: OpKind::SkipConnect },
                ],
            ],
        };
        let mut set = ArchSet::uniform(false);
        for (e, &(s, t)) in EDGES.iter().enumerate() {
            let keep = target.incoming(t).iter().any(|x| x.source == s);
            let op = if keep { OpKind::SkipConnect } else { OpKind::None };
            set.alpha[e][op.index()] = 60.0;
        }
        let x = input(3);
        let y = cell_forward(&mixed, &mut store, &x, Some(&set), Mode::Train).unwrap();
        let mut s2 = ParamStore::new();
        let disc = Cell::discrete(&mut s2, "d", 3, &target, &mut rng).unwrap();
        let z = cell_forward(&disc, &mut s2, &x, None, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&z) < 1e-9);
        // node1 = x, node2 = 2x, node3 = 3x
        let plane = 4 * 4 * 4;
        assert!((z.data()[0] - x.data()[0]).abs() < 1e-15);
        assert!((z.data()[6 * plane] - 3.0 * x.data()[0]).abs() < 1e-15);
    }

    fn all_mass_on(op: OpKind) -> ArchSet {
        let mut set = ArchSet::uniform(false);
        for row in set.alpha.iter_mut() {
            row[op.index()] = 60.0;
        }
        set
    }

    #[test]
    fn skip_everywhere_doubles_down_the_dag() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cell = Cell::mixed(&mut store, "c", 2, SupernetOptions::default(), &mut rng).unwrap();
        let x = input(2);
        let y = cell_forward(&cell, &mut store, &x, Some(&all_mass_on(OpKind::SkipConnect)), Mode::Train).unwrap();
        let per = x.len() / 2;
        for b in 0..2 {
            for (node, scale) in [1.0, 2.0, 4.0].iter().enumerate() {
                for i in 0..per {
                    let got = y.data()[b * 3 * per + node * per + i];
                    assert!((got - scale * x.data()[b * per + i]).abs() < 1e-9);
                }
            }
        }
        let z = cell_forward(&cell, &mut store, &x, Some(&all_mass_on(OpKind::None)), Mode::Train).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mixed_cell_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = Cell::mixed(&mut store, "c", 2, SupernetOptions::default(), &mut rng).unwrap();
        let set = ArchSet::random(&mut rng, 1.0, false);
        let a = cell_forward(&cell, &mut store, &input(2), Some(&set), Mode::Eval).unwrap();
        let b = cell_forward(&cell, &mut store, &input(2), Some(&set), Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert!(cell_forward(&cell, &mut store, &input(3), Some(&set), Mode::Eval).is_err());
    }

    #[test]
    fn mixed_cell_needs_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = Cell::mixed(&mut store, "c", 2, SupernetOptions::default(), &mut rng).unwrap();
        assert!(cell_forward(&cell, &mut store, &input(2), None, Mode::Train).is_err());
    }
}
