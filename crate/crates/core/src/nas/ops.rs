//! Candidate operations and the softmax-relaxed mixed edge.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::layers::{ConvUnit, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NUM_OPS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    None,
    SkipConnect,
    Conv1x3x3,
    Conv1x5x5,
    Conv3x1x1,
    Conv5x1x1,
    Conv3x3x3,
    Tdc3x3x3Theta02,
    Tdc3x3x3Theta10,
}

/// The nine candidates, in the index order used by architecture logits.
pub type OperationSpace = [OpKind; NUM_OPS];

pub const OPERATION_SPACE: OperationSpace = [
    OpKind::None,
    OpKind::SkipConnect,
    OpKind::Conv1x3x3,
    OpKind::Conv1x5x5,
    OpKind::Conv3x1x1,
    OpKind::Conv5x1x1,
    OpKind::Conv3x3x3,
    OpKind::Tdc3x3x3Theta02,
    OpKind::Tdc3x3x3Theta10,
];

impl OpKind {
    pub fn index(self) -> usize {
        OPERATION_SPACE.iter().position(|&k| k == self).expect("every kind is in the space")
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Conv1x3x3 => "conv_1x3x3",
            OpKind::Conv1x5x5 => "conv_1x5x5",
            OpKind::Conv3x1x1 => "conv_3x1x1",
            OpKind::Conv5x1x1 => "conv_5x1x1",
            OpKind::Conv3x3x3 => "conv_3x3x3",
            OpKind::Tdc3x3x3Theta02 => "TDC_3x3x3_0.2",
            OpKind::Tdc3x3x3Theta10 => "TDC_3x3x3_1.0",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        OPERATION_SPACE.iter().copied().find(|k| k.name() == name)
    }

    pub fn kernel(self) -> Option<[usize; 3]> {
        match self {
            OpKind::None | OpKind::SkipConnect => None,
            OpKind::Conv1x3x3 => Some([1, 3, 3]),
            OpKind::Conv1x5x5 => Some([1, 5, 5]),
            OpKind::Conv3x1x1 => Some([3, 1, 1]),
            OpKind::Conv5x1x1 => Some([5, 1, 1]),
            OpKind::Conv3x3x3 | OpKind::Tdc3x3x3Theta02 | OpKind::Tdc3x3x3Theta10 => Some([3, 3, 3]),
        }
    }

    pub fn theta(self) -> Option<f64> {
        match self {
            OpKind::Tdc3x3x3Theta02 => Some(0.2),
            OpKind::Tdc3x3x3Theta10 => Some(1.0),
            _ => None,
        }
    }
}

/// An instantiated candidate with its own weights.
#[derive(Debug, Clone)]
pub enum Candidate {
    Zero,
    Identity,
    Conv(ConvUnit),
}

impl Candidate {
    pub fn build(kind: OpKind, store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        match kind {
            OpKind::None => Candidate::Zero,
            OpKind::SkipConnect => Candidate::Identity,
            _ => Candidate::Conv(ConvUnit::new(
                store,
                &format!("{name}.{}", kind.name()),
                channels,
                channels,
                kind.kernel().expect("convolution kinds have kernels"),
                kind.theta(),
                rng,
            )),
        }
    }

    /// `None` stands for the all-zero map.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Option<Var>> {
        Ok(match self {
            Candidate::Zero => None,
            Candidate::Identity => Some(x),
            Candidate::Conv(unit) => Some(unit.forward(g, store, x, mode)?),
        })
    }
}

/// One relaxed edge: all nine candidates blended by softmax weights.
#[derive(Debug, Clone)]
pub struct MixedEdge {
    candidates: Vec<Candidate>,
}

impl MixedEdge {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        MixedEdge {
            candidates: OPERATION_SPACE
                .iter()
                .map(|&k| Candidate::build(k, store, name, channels, rng))
                .collect(),
        }
    }

    pub fn candidate(&self, kind: OpKind) -> &Candidate {
        &self.candidates[kind.index()]
    }

    /// Blend using `logits[offset..offset + 9]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        logits: Var,
        offset: usize,
        mode: Mode,
    ) -> Result<Var> {
        let outputs = self
            .candidates
            .iter()
            .map(|c| c.forward(g, store, x, mode))
            .collect::<Result<Vec<_>>>()?;
        g.softmax_mix(&outputs, logits, offset)
    }
}

/// Evaluate a mixed edge on a concrete feature map with explicit logits.
pub fn mixed_edge_forward(
    edge: &MixedEdge,
    store: &mut ParamStore,
    x: &Tensor,
    alpha: &[f64],
    mode: Mode,
) -> Result<Tensor> {
    if alpha.len() != NUM_OPS {
        return Err(Error::InvalidArgument(format!(
            "a mixed edge takes {NUM_OPS} logits, got {}",
            alpha.len()
        )));
    }
    let mut g = Graph::new(Exec::default());
    let xv = g.input(x.clone());
    let logits = g.input(Tensor::from_vec(&[NUM_OPS], alpha.to_vec())?);
    let y = edge.forward(&mut g, store, xv, logits, 0, mode)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, MixedEdge, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let edge = MixedEdge::new(&mut store, "e", 2, &mut rng);
        let x = Tensor::from_fn(&[2, 2, 4, 5, 5], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        (store, edge, x)
    }

    fn candidate_outputs(store: &mut ParamStore, edge: &MixedEdge, x: &Tensor) -> Vec<Tensor> {
        OPERATION_SPACE
            .iter()
            .map(|&k| {
                let mut g = Graph::new(Exec::Sequential);
                let xv = g.input(x.clone());
                match edge.candidate(k).forward(&mut g, store, xv, Mode::Train).unwrap() {
                    Some(v) => g.value(v).clone(),
                    None => Tensor::zeros(x.shape()),
                }
            })
            .collect()
    }

    #[test]
    fn space_has_nine_named_candidates() {
        assert_eq!(OPERATION_SPACE.len(), 9);
        for (i, k) in OPERATION_SPACE.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(OpKind::from_name(k.name()), Some(*k));
        }
        assert!(OpKind::from_name("TDC_3x3x3_0.2").is_some());
        assert!(OpKind::from_name("TDC_3x3x3_1.0").is_some());
        assert!(OpKind::from_name("none").is_some());
    }

    #[test]
    fn equal_logits_average_the_candidates() {
        let (mut store, edge, x) = setup();
        let mixed = mixed_edge_forward(&edge, &mut store, &x, &[0.0; 9], Mode::Train).unwrap();
        let outs = candidate_outputs(&mut store, &edge, &x);
        let mut mean = Tensor::zeros(x.shape());
        for o in &outs {
            mean.scaled_add_assign(1.0 / 9.0, o);
        }
        assert!(mixed.max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn saturated_logit_selects_one_candidate() {
        let (mut store, edge, x) = setup();
        let mut alpha = [0.0; 9];
        alpha[OpKind::Conv3x1x1.index()] = 40.0;
        let mixed = mixed_edge_forward(&edge, &mut store, &x, &alpha, Mode::Train).unwrap();
        let outs = candidate_outputs(&mut store, &edge, &x);
        assert!(mixed.max_abs_diff(&outs[OpKind::Conv3x1x1.index()]) < 1e-9);
    }

    #[test]
    fn ln2_logit_gives_a_fifth() {
        let mut alpha = [0.0; 9];
        alpha[0] = 2f64.ln();
        let w = softmax(&alpha);
        assert!((w[0] - 0.2).abs() < 1e-15);
        assert!(w[1..].iter().all(|v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn wrong_logit_count_is_an_error() {
        let (mut store, edge, x) = setup();
        assert!(mixed_edge_forward(&edge, &mut store, &x, &[0.0; 8], Mode::Train).is_err());
    }
}
