//! Graph builders for the three cell families.
//!
//! Weights are stored `[in, out]` and applied to row vectors, so a batch of
//! hidden states is a `[batch, hidden]` matrix and every step is a matmul.

use serde::{Deserialize, Serialize};

use crate::numgrad::{Axis, Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    VanillaRnn,
    ResidualMlp,
}

impl CellKind {
    pub fn is_recurrent(self) -> bool {
        !matches!(self, CellKind::ResidualMlp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::VanillaRnn => "vanilla_rnn",
            CellKind::ResidualMlp => "residual_mlp",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "vanilla_rnn" => Ok(CellKind::VanillaRnn),
            "residual_mlp" => Ok(CellKind::ResidualMlp),
            other => Err(format!("unknown cell kind `{other}`")),
        }
    }
}

/// Parameter names (relative to a model prefix) and shapes of one cell.
pub(crate) fn cell_param_shapes(
    kind: CellKind,
    input_dim: usize,
    hidden: usize,
    blocks: usize,
    theta_dim: usize,
) -> Vec<(String, Vec<usize>)> {
    let h = hidden;
    match kind {
        CellKind::Gru => {
            let i = input_dim + theta_dim;
            vec![
                ("cell.w_z".into(), vec![i + h, h]),
                ("cell.b_z".into(), vec![h]),
                ("cell.w_r".into(), vec![i + h, h]),
                ("cell.b_r".into(), vec![h]),
                ("cell.w_h".into(), vec![i + h, h]),
                ("cell.b_h".into(), vec![h]),
            ]
        }
        CellKind::VanillaRnn => vec![
            ("cell.w_x".into(), vec![input_dim + theta_dim, h]),
            ("cell.w_h".into(), vec![h, h]),
            ("cell.b".into(), vec![h]),
        ],
        CellKind::ResidualMlp => {
            let mut v = vec![
                ("stem.w".into(), vec![input_dim, h]),
                ("stem.b".into(), vec![h]),
            ];
            for t in 0..blocks {
                v.push((format!("block{t}.a1"), vec![h, h]));
                v.push((format!("block{t}.b1"), vec![h]));
                v.push((format!("block{t}.a2"), vec![h, h]));
                v.push((format!("block{t}.b2"), vec![h]));
            }
            if theta_dim > 0 {
                v.push(("cell.w_theta".into(), vec![theta_dim, h]));
            }
            v
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GruLeaves {
    pub w_z: NodeId,
    pub b_z: NodeId,
    pub w_r: NodeId,
    pub b_r: NodeId,
    pub w_h: NodeId,
    pub b_h: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RnnLeaves {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockLeaves {
    pub a1: NodeId,
    pub b1: NodeId,
    pub a2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone)]
pub(crate) enum CellLeaves {
    Gru(GruLeaves),
    Rnn(RnnLeaves),
    Residual {
        stem_w: NodeId,
        stem_b: NodeId,
        blocks: Vec<BlockLeaves>,
        w_theta: Option<NodeId>,
    },
}

impl CellLeaves {
    pub fn new(g: &mut Graph, kind: CellKind, prefix: &str, blocks: usize, conditioned: bool) -> Self {
        let mut leaf = |n: &str| g.leaf(format!("{prefix}{n}"));
        match kind {
            CellKind::Gru => CellLeaves::Gru(GruLeaves {
                w_z: leaf("cell.w_z"),
                b_z: leaf("cell.b_z"),
                w_r: leaf("cell.w_r"),
                b_r: leaf("cell.b_r"),
                w_h: leaf("cell.w_h"),
                b_h: leaf("cell.b_h"),
            }),
            CellKind::VanillaRnn => CellLeaves::Rnn(RnnLeaves {
                w_x: leaf("cell.w_x"),
                w_h: leaf("cell.w_h"),
                b: leaf("cell.b"),
            }),
            CellKind::ResidualMlp => {
                let stem_w = leaf("stem.w");
                let stem_b = leaf("stem.b");
                let blocks = (0..blocks)
                    .map(|t| BlockLeaves {
                        a1: leaf(&format!("block{t}.a1")),
                        b1: leaf(&format!("block{t}.b1")),
                        a2: leaf(&format!("block{t}.a2")),
                        b2: leaf(&format!("block{t}.b2")),
                    })
                    .collect();
                let w_theta = conditioned.then(|| leaf("cell.w_theta"));
                CellLeaves::Residual { stem_w, stem_b, blocks, w_theta }
            }
        }
    }

    /// One recurrent transition. `x` already carries `[theta; x]` for
    /// conditioned cells.
    pub fn step(&self, g: &mut Graph, x: NodeId, h: NodeId) -> NodeId {
        match self {
            CellLeaves::Gru(p) => gru_step_graph(g, p, x, h),
            CellLeaves::Rnn(p) => rnn_step_graph(g, p, x, h),
            CellLeaves::Residual { .. } => panic!("residual cells have no recurrent step"),
        }
    }
}

/// `h' = (1 - z) * h~ + z * h` with
/// `z = sigma([x;h] W_z + b_z)`, `r = sigma([x;h] W_r + b_r)`,
/// `h~ = tanh([x; r*h] W_h + b_h)`.
pub(crate) fn gru_step_graph(g: &mut Graph, p: &GruLeaves, x: NodeId, h: NodeId) -> NodeId {
    let xh = g.concat(&[x, h], Axis::Cols);
    let zl = g.matmul(xh, p.w_z);
    let zl = g.add(zl, p.b_z);
    let z = g.sigmoid(zl);
    let rl = g.matmul(xh, p.w_r);
    let rl = g.add(rl, p.b_r);
    let r = g.sigmoid(rl);
    let rh = g.mul(r, h);
    let xrh = g.concat(&[x, rh], Axis::Cols);
    let cl = g.matmul(xrh, p.w_h);
    let cl = g.add(cl, p.b_h);
    let cand = g.tanh(cl);
    let one_minus_z = g.affine(z, -1.0, 1.0);
    let a = g.mul(one_minus_z, cand);
    let b = g.mul(z, h);
    g.add(a, b)
}

/// `h' = tanh(x W_x + h W_h + b)`.
pub(crate) fn rnn_step_graph(g: &mut Graph, p: &RnnLeaves, x: NodeId, h: NodeId) -> NodeId {
    let xw = g.matmul(x, p.w_x);
    let hw = g.matmul(h, p.w_h);
    let s = g.add(xw, hw);
    let s = g.add(s, p.b);
    g.tanh(s)
}

/// `z = relu(f A1 + b1 + theta W)`, `out = relu(f + z A2 + b2)`; the
/// `theta W` term is absent when `theta_bias` is `None`.
pub(crate) fn residual_block_graph(
    g: &mut Graph,
    p: &BlockLeaves,
    theta_bias: Option<NodeId>,
    f: NodeId,
) -> NodeId {
    let z = g.matmul(f, p.a1);
    let mut z = g.add(z, p.b1);
    if let Some(tb) = theta_bias {
        z = g.add(z, tb);
    }
    let z = g.relu(z);
    let za = g.matmul(z, p.a2);
    let za = g.add(za, p.b2);
    let s = g.add(f, za);
    g.relu(s)
}
