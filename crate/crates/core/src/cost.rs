//! Parameter and multiply-accumulate counts of a [`ModelGraph`].
//!
//! One multiply-accumulate counts as one FLOP. Convolutions cost
//! `out_h * out_w * k_h * k_w * c_in * c_out`, dense layers `in * out`;
//! BN, activations, pooling and the residual add are not counted.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{LayerKind, LayerSpec, ModelGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    /// Output `(C, H, W)`.
    pub output: (usize, usize, usize),
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_size: usize,
    pub params: u64,
    pub flops: u64,
    pub layers: Vec<LayerCost>,
}

fn layer_cost(l: &LayerSpec, h: usize, w: usize) -> Result<LayerCost> {
    let out = l.output_shape(h, w)?;
    let (params, flops) = match l.kind {
        LayerKind::Conv => {
            let k = (l.kernel.0 * l.kernel.1 * l.in_channels * l.out_channels) as u64;
            (k, k * (out.1 * out.2) as u64)
        }
        LayerKind::Dense => {
            let k = (l.in_channels * l.out_channels) as u64;
            (k + l.out_channels as u64, k)
        }
        LayerKind::Bn => (2 * l.out_channels as u64, 0),
        _ => (0, 0),
    };
    Ok(LayerCost {
        name: l.name.clone(),
        kind: l.kind,
        output: out,
        params,
        flops,
    })
}

fn walk(
    layers: &[LayerSpec],
    mut s: (usize, usize, usize),
    out: &mut Vec<LayerCost>,
) -> Result<(usize, usize, usize)> {
    for l in layers {
        let c = layer_cost(l, s.1, s.2)?;
        s = c.output;
        out.push(c);
    }
    Ok(s)
}

/// Per-layer cost breakdown at a square `input_size`.
pub fn analyze(graph: &ModelGraph, input_size: usize) -> Result<CostReport> {
    let mut layers = Vec::new();
    let mut s = walk(&graph.stem, (3, input_size, input_size), &mut layers)?;
    for b in &graph.blocks {
        let a = walk(&b.path_a, s, &mut layers)?;
        walk(&b.path_b, s, &mut layers)?;
        s = walk(
            &b.layers()[b.path_a.len() + b.path_b.len()..],
            a,
            &mut layers,
        )?;
    }
    walk(&graph.head, s, &mut layers)?;
    Ok(CostReport {
        input_size,
        params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

impl CostReport {
    /// Aligned text table with one row per parameterized layer and a total.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<32} {:<11} {:>16} {:>12} {:>16}\n",
            "layer", "kind", "output", "params", "flops"
        );
        for l in self.layers.iter().filter(|l| l.params > 0 || l.flops > 0) {
            let shape = format!("{}x{}x{}", l.output.0, l.output.1, l.output.2);
            s.push_str(&format!(
                "{:<32} {:<11} {:>16} {:>12} {:>16}\n",
                l.name,
                format!("{:?}", l.kind).to_lowercase(),
                shape,
                l.params,
                l.flops
            ));
        }
        s.push_str(&format!(
            "{:<32} {:<11} {:>16} {:>12} {:>16}\n",
            "total", "", "", self.params, self.flops
        ));
        s.push_str(&format!(
            "params {:.2} M, flops {:.2} G (multiply-accumulates) at {}x{}\n",
            self.params as f64 / 1e6,
            self.flops as f64 / 1e9,
            self.input_size,
            self.input_size
        ));
        s
    }
}
