//! Architecture logits and the discretisation rule.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::softmax;
use crate::error::{Error, Result};
use crate::nas::cell::{incoming_edges, EDGES, NUM_EDGES};
use crate::nas::genotype::{DiscreteCell, Genotype, GenotypeEdge, NUM_INTERMEDIATE};
use crate::nas::ops::{OpKind, NUM_OPS, OPERATION_SPACE};

/// Inputs kept per intermediate node (node 1 has only one candidate).
pub const KEEP_PER_NODE: usize = 2;

/// Logits for one cell: nine per edge, plus optional edge-normalisation logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSet {
    pub alpha: [[f64; NUM_OPS]; NUM_EDGES],
    pub beta: Option<[f64; NUM_EDGES]>,
}

impl ArchSet {
    pub fn uniform(edge_normalization: bool) -> Self {
        ArchSet {
            alpha: [[0.0; NUM_OPS]; NUM_EDGES],
            beta: edge_normalization.then_some([0.0; NUM_EDGES]),
        }
    }

    /// Small Gaussian logits, the usual starting point for a search.
    pub fn random(rng: &mut impl Rng, scale: f64, edge_normalization: bool) -> Self {
        let mut s = Self::uniform(edge_normalization);
        for row in s.alpha.iter_mut() {
            for a in row.iter_mut() {
                *a = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if let Some(beta) = s.beta.as_mut() {
            for b in beta.iter_mut() {
                *b = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        s
    }

    pub fn from_flat(alpha: &[f64], beta: Option<&[f64]>) -> Result<Self> {
        if alpha.len() != NUM_EDGES * NUM_OPS {
            return Err(Error::Shape(format!(
                "expected {} operation logits, got {}",
                NUM_EDGES * NUM_OPS,
                alpha.len()
            )));
        }
        let mut s = Self::uniform(beta.is_some());
        for (e, row) in s.alpha.iter_mut().enumerate() {
            row.copy_from_slice(&alpha[e * NUM_OPS..(e + 1) * NUM_OPS]);
        }
        if let (Some(dst), Some(src)) = (s.beta.as_mut(), beta) {
            if src.len() != NUM_EDGES {
                return Err(Error::Shape(format!("expected {NUM_EDGES} edge logits, got {}", src.len())));
            }
            dst.copy_from_slice(src);
        }
        Ok(s)
    }

    pub fn flat_alpha(&self) -> Vec<f64> {
        self.alpha.iter().flatten().copied().collect()
    }

    pub fn op_weights(&self, edge: usize) -> Vec<f64> {
        softmax(&self.alpha[edge])
    }

    /// Edge weights from normalisation logits, softmaxed per target node.
    pub fn edge_weights(&self) -> [f64; NUM_EDGES] {
        let mut w = [1.0; NUM_EDGES];
        if let Some(beta) = &self.beta {
            for node in 1..=NUM_INTERMEDIATE {
                let r = incoming_edges(node);
                let sm = softmax(&beta[r.clone()]);
                w[r].copy_from_slice(&sm);
            }
        }
        w
    }

    /// Mean Shannon entropy (nats) of the per-edge operation distributions.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = (0..NUM_EDGES)
            .map(|e| {
                self.op_weights(e)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        total / NUM_EDGES as f64
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().flatten().all(|v| v.is_finite())
            && self.beta.is_none_or(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// All architecture logits of a supernet: one set shared by every block, or
/// one set per block.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub sets: Vec<ArchSet>,
}

impl ArchParams {
    pub fn mean_entropy(&self) -> f64 {
        self.sets.iter().map(ArchSet::mean_entropy).sum::<f64>() / self.sets.len().max(1) as f64
    }

    pub fn is_shared(&self) -> bool {
        self.sets.len() == 1
    }
}

/// Strongest non-`none` candidate on an edge; ties go to the lower index.
pub fn strongest_op(weights: &[f64]) -> (OpKind, f64) {
    let mut best = (OPERATION_SPACE[1], f64::NEG_INFINITY);
    for (k, &w) in weights.iter().enumerate().skip(1) {
        if w > best.1 {
            best = (OPERATION_SPACE[k], w);
        }
    }
    best
}

pub fn derive_cell(set: &ArchSet) -> DiscreteCell {
    let edge_w = set.edge_weights();
    let mut cell = DiscreteCell::default();
    for node in 1..=NUM_INTERMEDIATE {
        let mut ranked: Vec<(usize, OpKind, f64)> = incoming_edges(node)
            .map(|e| {
                let (op, w) = strongest_op(&set.op_weights(e));
                (EDGES[e].0, op, w * edge_w[e])
            })
            .collect();
        // Stable sort keeps lower sources first on ties.
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
        cell.nodes[node - 1] = ranked
            .into_iter()
            .take(KEEP_PER_NODE)
            .map(|(source, op, _)| GenotypeEdge { source, op })
            .collect();
    }
    cell
}

pub fn derive_architecture(arch: &ArchParams) -> Result<Genotype> {
    if arch.sets.is_empty() {
        return Err(Error::Empty("architecture parameter sets"));
    }
    if let Some(i) = arch.sets.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArchitecture(format!("set {i} has non-finite logits")));
    }
    let cells: Vec<_> = arch.sets.iter().map(derive_cell).collect();
    if cells.len() == 1 {
        Ok(Genotype::shared(cells.into_iter().next().expect("one cell")))
    } else {
        Genotype::varied(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set_with(edge_ops: [(OpKind, f64); NUM_EDGES]) -> ArchSet {
        let mut s = ArchSet::uniform(false);
        for (e, (op, logit)) in edge_ops.iter().enumerate() {
            s.alpha[e][op.index()] = *logit;
        }
        s
    }

    #[test]
    fn recovers_the_published_cell() {
        // Edge order: (0,1) (0,2) (1,2) (0,3) (1,3) (2,3).
        let s = set_with([
            (OpKind::Conv3x1x1, 3.0),
            (OpKind::SkipConnect, 2.0),
            (OpKind::Conv5x1x1, 2.5),
            (OpKind::Conv3x3x3, 0.5),
            (OpKind::SkipConnect, 1.5),
            (OpKind::Conv1x5x5, 2.8),
        ]);
        let g = derive_architecture(&ArchParams { sets: vec![s] }).unwrap();
        let expect = Genotype::preset("autohr_v1").unwrap();
        assert_eq!(g, expect);
    }

    #[test]
    fn none_never_wins() {
        let mut s = ArchSet::uniform(false);
        for row in s.alpha.iter_mut() {
            row[0] = 10.0;
        }
        let cell = derive_cell(&s);
        for edges in &cell.nodes {
            assert!(edges.iter().all(|e| e.op != OpKind::None));
        }
        // With ties everywhere the lowest-index real op and lowest sources win.
        assert_eq!(cell.nodes[0], vec![GenotypeEdge { source: 0, op: OpKind::SkipConnect }]);
        assert_eq!(cell.nodes[2].iter().map(|e| e.source).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn edge_normalisation_reranks_inputs() {
        let mut s = set_with([
            (OpKind::Conv3x1x1, 1.0),
            (OpKind::Conv3x1x1, 1.0),
            (OpKind::Conv3x1x1, 1.0),
            (OpKind::Conv3x1x1, 2.0),
            (OpKind::Conv3x1x1, 2.0),
            (OpKind::Conv3x1x1, 1.0),
        ]);
        assert_eq!(derive_cell(&s).nodes[2].iter().map(|e| e.source).collect::<Vec<_>>(), vec![0, 1]);
        s.beta = Some([0.0, 0.0, 0.0, -5.0, 0.0, 3.0]);
        assert_eq!(derive_cell(&s).nodes[2].iter().map(|e| e.source).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn uniform_entropy_is_ln9() {
        assert!((ArchSet::uniform(false).mean_entropy() - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let mut s = ArchSet::uniform(false);
        s.alpha[3][2] = f64::NAN;
        assert!(derive_architecture(&ArchParams { sets: vec![s] }).is_err());
        assert!(derive_architecture(&ArchParams { sets: vec![] }).is_err());
    }

    #[test]
    fn node3_keeps_its_two_strongest_inputs() {
        // Softmax weights of the winning op: input 0.5, B1 0.4, B2 0.3.
        let mut s = ArchSet::uniform(false);
        for (e, w) in [(3, 0.5f64), (4, 0.4), (5, 0.3)] {
            // Put weight w on conv_3x3x3 and spread the rest evenly.
            let rest: f64 = (1.0 - w) / 8.0;
            s.alpha[e] = [rest.ln(); NUM_OPS];
            s.alpha[e][OpKind::Conv3x3x3.index()] = f64::ln(w);
        }
        let cell = derive_cell(&s);
        assert_eq!(cell.nodes[2].iter().map(|e| e.source).collect::<Vec<_>>(), vec![0, 1]);
        assert!(cell.nodes[2].iter().all(|e| e.op == OpKind::Conv3x3x3));
    }

    proptest! {
        #[test]
        fn derivation_ignores_per_edge_logit_shifts(
            logits in proptest::collection::vec(-5.0f64..5.0, NUM_EDGES * NUM_OPS),
            shifts in proptest::collection::vec(-20.0f64..20.0, NUM_EDGES),
        ) {
            let s = ArchSet::from_flat(&logits, None).unwrap();
            let mut t = s.clone();
            for (row, d) in t.alpha.iter_mut().zip(&shifts) {
                for a in row.iter_mut() {
                    *a += d;
                }
            }
            prop_assert_eq!(derive_cell(&s), derive_cell(&t));
            for e in 0..NUM_EDGES {
                prop_assert!((t.op_weights(e).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }


        #[test]
        fn derived_cells_are_always_valid(
            logits in proptest::collection::vec(-5.0f64..5.0, NUM_EDGES * NUM_OPS),
            beta in proptest::option::of(proptest::collection::vec(-3.0f64..3.0, NUM_EDGES)),
        ) {
            let s = ArchSet::from_flat(&logits, beta.as_deref()).unwrap();
            let cell = derive_cell(&s);
            cell.validate().unwrap();
            prop_assert_eq!(cell.nodes[0].len(), 1);
            prop_assert_eq!(cell.nodes[1].len(), 2);
            prop_assert_eq!(cell.nodes[2].len(), 2);
            let h = s.mean_entropy();
            prop_assert!(h >= 0.0 && h <= 9f64.ln() + 1e-12);
        }
    }
}
