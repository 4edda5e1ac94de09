//! Small MLP helper over tape ops: registration of layer segments in the
//! parameter store and forward evaluation, optionally with forward-mode
//! tangent streams (used to expose spatial SDF gradients on the tape).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Buf, Init, NodeId, ParamStore, Segment, Tape, UnaryKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub name: String,
    /// Layer widths, input first, output last; `dims.len() - 1` linear layers.
    pub dims: Vec<usize>,
    /// Concatenate the raw input onto this hidden layer's input (1-based
    /// linear-layer index), as in SDF skip connections.
    pub skip_at: Option<usize>,
    /// Zero-initialize the final layer (weights and bias).
    pub zero_init_last: bool,
}

impl MlpSpec {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        MlpSpec {
            name: name.to_string(),
            dims: dims.to_vec(),
            skip_at: None,
            zero_init_last: false,
        }
    }

    pub fn with_skip(mut self, layer: usize) -> Self {
        self.skip_at = Some(layer);
        self
    }

    pub fn zero_last(mut self) -> Self {
        self.zero_init_last = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<(Segment, Segment)>,
}

impl Mlp {
    pub fn register(store: &mut ParamStore, spec: MlpSpec) -> Mlp {
        let mut layers = Vec::new();
        let nl = spec.dims.len() - 1;
        for l in 0..nl {
            let mut fan_in = spec.dims[l];
            if spec.skip_at == Some(l) {
                fan_in += spec.dims[0];
            }
            let fan_out = spec.dims[l + 1];
            let last = l == nl - 1;
            let w_init = if last && spec.zero_init_last {
                Init::Zeros
            } else {
                Init::Xavier { fan_in, fan_out }
            };
            let w = store.register(&format!("{}.w{l}", spec.name), fan_out * fan_in, w_init);
            let b = store.register(&format!("{}.b{l}", spec.name), fan_out, Init::Zeros);
            layers.push((w, b));
        }
        Mlp { spec, layers }
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.dims.last().unwrap()
    }

    /// Forward pass with softplus hidden activations and a linear output.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        self.forward_impl(tape, x, &[]).0
    }

    /// Forward pass carrying tangent streams: for each tangent input t_k
    /// (same shape as x), computes the directional derivative of the output
    /// along t_k as additional tape values, so downstream losses can
    /// differentiate through the network's spatial gradient.
    pub fn forward_with_tangents(
        &self,
        tape: &mut Tape,
        x: NodeId,
        tangents: &[NodeId],
    ) -> (NodeId, Vec<NodeId>) {
        self.forward_impl(tape, x, tangents)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        x0: NodeId,
        tangents: &[NodeId],
    ) -> (NodeId, Vec<NodeId>) {
        let nl = self.layers.len();
        let mut a = x0;
        let mut ta: Vec<NodeId> = tangents.to_vec();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let (mut inp, mut tinp) = (a, ta.clone());
            if self.spec.skip_at == Some(l) {
                inp = tape.concat_rows(&[a, x0]);
                tinp = ta
                    .iter()
                    .zip(tangents.iter())
                    .map(|(&t, &t0)| tape.concat_rows(&[t, t0]))
                    .collect();
            }
            let m = self.spec.dims[l + 1];
            let z = tape.linear(*w, Some(*b), inp, m);
            let tz: Vec<NodeId> = tinp.iter().map(|&t| tape.linear(*w, None, t, m)).collect();
            if l + 1 < nl {
                a = tape.unary(UnaryKind::Softplus, z);
                if !tz.is_empty() {
                    // d softplus = sigmoid(z); tangent gets gated elementwise.
                    let gate = tape.unary(UnaryKind::Sigmoid, z);
                    ta = tz.iter().map(|&t| tape.mul(gate, t)).collect();
                }
            } else {
                a = z;
                ta = tz;
            }
        }
        (a, ta)
    }
}

/// Broadcasts a (d x 1) column into a (d x n) constant-free batch by matrix
/// tricks: y = col * ones_row. Gradient flows back into the column.
pub fn broadcast_col(tape: &mut Tape, col: NodeId, n: usize) -> NodeId {
    let d = tape.val(col).rows;
    assert_eq!(tape.val(col).cols, 1);
    if n == 1 {
        return col;
    }
    // Implemented as gather of the single column n times.
    let idx = std::sync::Arc::new(vec![0usize; n]);
    let _ = d;
    tape.gather_cols(col, idx)
}

/// Constant (d x n) batch built by repeating a data column.
pub fn constant_col_batch(tape: &mut Tape, col: &[f64], n: usize) -> NodeId {
    let d = col.len();
    let mut data = vec![0.0; d * n];
    for (r, &v) in col.iter().enumerate() {
        for j in 0..n {
            data[r * n + j] = v;
        }
    }
    tape.constant(Buf::from_vec(d, n, data))
}
