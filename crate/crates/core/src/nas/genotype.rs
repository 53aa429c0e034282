//! Discrete cells and their line-oriented text form.
//!
//! ```text
//! node 1 <- conv_3x1x1(node 0)
//! node 2 <- conv_5x1x1(node 1)
//! node 2 <- skip_connect(node 0)
//! ```
//!
//! Node 0 is the cell input; nodes 1..=3 are the intermediate nodes whose
//! concatenation forms the cell output. When the four blocks use different
//! cells, each group of lines is introduced by `cell <k>`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nas::ops::OpKind;

pub const NUM_NODES: usize = 4;
pub const NUM_INTERMEDIATE: usize = 3;
pub const NUM_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenotypeEdge {
    pub source: usize,
    pub op: OpKind,
}

/// Incoming edges of intermediate nodes 1, 2 and 3.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DiscreteCell {
    pub nodes: [Vec<GenotypeEdge>; NUM_INTERMEDIATE],
}

impl DiscreteCell {
    pub fn incoming(&self, node: usize) -> &[GenotypeEdge] {
        &self.nodes[node - 1]
    }

    /// Node 1 has one input, nodes 2 and 3 two distinct earlier inputs, and
    /// no edge carries `none`.
    pub fn validate(&self) -> Result<()> {
        for (i, edges) in self.nodes.iter().enumerate() {
            let node = i + 1;
            let want = required_in_degree(node);
            if edges.len() != want {
                return Err(Error::InvalidArchitecture(format!(
                    "node {node} has {} inputs, expected {want}",
                    edges.len()
                )));
            }
            for e in edges {
                if e.source >= node {
                    return Err(Error::InvalidArchitecture(format!(
                        "node {node} takes input from node {}, which is not earlier",
                        e.source
                    )));
                }
                if e.op == OpKind::None {
                    return Err(Error::InvalidArchitecture(format!("node {node} has a `none` edge")));
                }
            }
            for (a, e) in edges.iter().enumerate() {
                if edges[..a].iter().any(|p| p.source == e.source) {
                    return Err(Error::InvalidArchitecture(format!(
                        "node {node} lists node {} twice",
                        e.source
                    )));
                }
            }
        }
        Ok(())
    }

    /// The published AutoHR cell.
    pub fn autohr_v1() -> Self {
        let e = |source, op| GenotypeEdge { source, op };
        DiscreteCell {
            nodes: [
                vec![e(0, OpKind::Conv3x1x1)],
                vec![e(1, OpKind::Conv5x1x1), e(0, OpKind::SkipConnect)],
                vec![e(2, OpKind::Conv1x5x5), e(1, OpKind::SkipConnect)],
            ],
        }
    }

    fn write_lines(&self, out: &mut String) {
        for (i, edges) in self.nodes.iter().enumerate() {
            for e in edges {
                let _ = writeln!(out, "node {} <- {}(node {})", i + 1, e.op.name(), e.source);
            }
        }
    }
}

pub fn required_in_degree(node: usize) -> usize {
    node.min(2)
}

/// One cell shared by all blocks, or one per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    cells: Vec<DiscreteCell>,
}

impl Genotype {
    pub fn shared(cell: DiscreteCell) -> Self {
        Genotype { cells: vec![cell] }
    }

    pub fn varied(cells: Vec<DiscreteCell>) -> Result<Self> {
        if cells.len() != NUM_BLOCKS {
            return Err(Error::InvalidArchitecture(format!(
                "a varied genotype needs {NUM_BLOCKS} cells, got {}",
                cells.len()
            )));
        }
        Ok(Genotype { cells })
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "autohr_v1" => Some(Genotype::shared(DiscreteCell::autohr_v1())),
            _ => None,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.cells.len() == 1
    }

    pub fn cells(&self) -> &[DiscreteCell] {
        &self.cells
    }

    pub fn cell_for_block(&self, block: usize) -> &DiscreteCell {
        if self.is_shared() {
            &self.cells[0]
        } else {
            &self.cells[block]
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cells.iter().try_for_each(DiscreteCell::validate)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.is_shared() {
            self.cells[0].write_lines(&mut out);
        } else {
            for (k, c) in self.cells.iter().enumerate() {
                let _ = writeln!(out, "cell {k}");
                c.write_lines(&mut out);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cells: Vec<DiscreteCell> = Vec::new();
        let mut headed = false;
        for (lineno, raw) in text.lines().enumerate() {
            let loc = format!("genotype line {}", lineno + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("cell ") {
                let k: usize = rest.trim().parse().map_err(|_| Error::parse(&loc, "bad cell index"))?;
                if k != cells.len() || (!headed && !cells.is_empty()) {
                    return Err(Error::parse(&loc, format!("expected cell {}", cells.len())));
                }
                headed = true;
                cells.push(DiscreteCell::default());
                continue;
            }
            let (node, source, op) = parse_edge(line).ok_or_else(|| {
                Error::parse(&loc, "expected `node <j> <- <op>(node <i>)`")
            })?;
            let op = OpKind::from_name(op).ok_or_else(|| Error::parse(&loc, format!("unknown op `{op}`")))?;
            if !(1..=NUM_INTERMEDIATE).contains(&node) {
                return Err(Error::parse(&loc, format!("node {node} is not an intermediate node")));
            }
            if cells.is_empty() {
                cells.push(DiscreteCell::default());
            }
            cells.last_mut().expect("pushed above").nodes[node - 1].push(GenotypeEdge { source, op });
        }
        let g = match (headed, cells.len()) {
            (_, 0) => return Err(Error::parse("genotype", "no edges")),
            (false, _) | (true, 1) => Genotype { cells },
            (true, _) => Genotype::varied(cells)?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_edge(line: &str) -> Option<(usize, usize, &str)> {
    let rest = line.strip_prefix("node")?.trim_start();
    let (node, rest) = rest.split_once("<-")?;
    let node = node.trim().parse().ok()?;
    let rest = rest.trim();
    let (op, rest) = rest.split_once('(')?;
    let inner = rest.strip_suffix(')')?.trim();
    let source = inner.strip_prefix("node")?.trim().parse().ok()?;
    Some((node, source, op.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips() {
        let g = Genotype::preset("autohr_v1").unwrap();
        g.validate().unwrap();
        let text = g.to_text();
        assert_eq!(
            text,
            "node 1 <- conv_3x1x1(node 0)\n\
             node 2 <- conv_5x1x1(node 1)\n\
             node 2 <- skip_connect(node 0)\n\
             node 3 <- conv_1x5x5(node 2)\n\
             node 3 <- skip_connect(node 1)\n"
        );
        assert_eq!(Genotype::from_text(&text).unwrap(), g);
    }

    #[test]
    fn varied_round_trips() {
        let mut cells = vec![DiscreteCell::autohr_v1(); 4];
        cells[2].nodes[0][0].op = OpKind::Tdc3x3x3Theta02;
        let g = Genotype::varied(cells).unwrap();
        let back = Genotype::from_text(&g.to_text()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.cell_for_block(2).nodes[0][0].op, OpKind::Tdc3x3x3Theta02);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# searched\n\nnode 1 <- conv_3x3x3(node 0)  # only edge\nnode 2 <- skip_connect(node 1)\nnode 2 <- conv_1x3x3(node 0)\n\nnode 3 <- TDC_3x3x3_1.0(node 2)\nnode 3 <- skip_connect(node 0)\n";
        let g = Genotype::from_text(text).unwrap();
        assert_eq!(g.cell_for_block(3).incoming(3)[0].op, OpKind::Tdc3x3x3Theta10);
    }

    #[test]
    fn rejects_bad_inputs() {
        for bad in [
            "",
            "node 1 <- conv_9x9x9(node 0)\nnode 2 <- skip_connect(node 0)\nnode 3 <- skip_connect(node 0)",
            "node 1 <- conv_3x1x1(node 1)\nnode 2 <- skip_connect(node 0)\nnode 3 <- skip_connect(node 0)",
            "node 1 <- conv_3x1x1(node 0)\nnode 3 <- skip_connect(node 0)",
            "node 4 <- conv_3x1x1(node 0)",
            "node 1 <- none(node 0)\nnode 2 <- skip_connect(node 0)\nnode 3 <- skip_connect(node 0)",
            "node 1 conv_3x1x1 node 0",
        ] {
            assert!(Genotype::from_text(bad).is_err(), "accepted {bad:?}");
        }
    }
}
