//! Layered feedforward base network with closed-form backprop.
//!
//! Hidden layers are affine + tanh, the output layer is affine + identity.
//! The network exposes exactly what the vesicle layer consumes: per-node
//! activation vectors, per-layer gradient bundles, a low-dimensional meta
//! state, and a per-node external memory slot.

use std::collections::VecDeque;

use crate::error::{NvError, Result};
use crate::graph::NodeId;
use crate::linalg::{self, Matrix};
use crate::release::ExternalMemory;
use crate::rng::RngStream;

/// Parameters of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        LayerParams {
            weight: Matrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

/// Gradient bundle for one layer, same shape as its parameters.
pub type LayerGrads = LayerParams;

/// How many losses feed the running-mean meta state.
const META_WINDOW: usize = 16;

#[derive(Clone, Debug)]
pub struct NetworkState {
    widths: Vec<usize>,
    pub params: Vec<LayerParams>,
    /// Activations h^(0..L); h^(0) is the input node.
    pub activations: Vec<Vec<f64>>,
    /// tanh/affine outputs before any additive injection, used by backprop.
    core: Vec<Vec<f64>>,
    grads: Vec<LayerGrads>,
    /// Per-node external memory slots.
    pub memories: Vec<ExternalMemory>,
    /// Meta state; component 0 tracks the running mean loss.
    pub meta: Vec<f64>,
    loss_window: VecDeque<f64>,
    params_version: u64,
    forward_version: Option<u64>,
    grad_version: Option<u64>,
}

impl NetworkState {
    /// Fresh network with fan-in uniform init `U(-1/sqrt(d_in), 1/sqrt(d_in))`.
    pub fn new(widths: &[usize], memory_dim: usize, meta_dim: usize, rng: &mut RngStream) -> Self {
        assert!(
            widths.len() >= 2,
            "network needs at least input and output widths"
        );
        let mut params = Vec::new();
        for l in 1..widths.len() {
            let (d_out, d_in) = (widths[l], widths[l - 1]);
            let a = 1.0 / (d_in as f64).sqrt();
            params.push(LayerParams {
                weight: Matrix::uniform(d_out, d_in, a, rng),
                bias: vec![0.0; d_out],
            });
        }
        Self::from_params(widths, params, memory_dim, meta_dim)
    }

    /// Network from explicit parameters (used by tests and scripted setups).
    pub fn from_params(
        widths: &[usize],
        params: Vec<LayerParams>,
        memory_dim: usize,
        meta_dim: usize,
    ) -> Self {
        let grads = widths
            .windows(2)
            .map(|w| LayerGrads::zeros(w[1], w[0]))
            .collect();
        NetworkState {
            widths: widths.to_vec(),
            params,
            activations: widths.iter().map(|&w| vec![0.0; w]).collect(),
            core: widths.iter().map(|&w| vec![0.0; w]).collect(),
            grads,
            memories: (0..widths.len())
                .map(|_| ExternalMemory::new(memory_dim))
                .collect(),
            meta: vec![0.0; meta_dim],
            loss_window: VecDeque::new(),
            params_version: 0,
            forward_version: None,
            grad_version: None,
        }
    }

    /// Number of affine layers L.
    pub fn num_layers(&self) -> usize {
        self.params.len()
    }

    /// Number of graph nodes (L + 1, including the input node).
    pub fn num_nodes(&self) -> usize {
        self.widths.len()
    }

    pub fn width(&self, node: NodeId) -> usize {
        self.widths[node.0]
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn total_param_count(&self) -> usize {
        self.params.iter().map(|p| p.param_count()).sum()
    }

    /// Evaluate layer `l` (1-based node index) on `input`.
    /// Hidden layers apply tanh; the final layer is identity.
    pub fn layer_eval(&self, l: usize, input: &[f64]) -> Result<Vec<f64>> {
        let p = &self.params[l - 1];
        let mut z = p.weight.matvec(input)?;
        for (zi, b) in z.iter_mut().zip(p.bias.iter()) {
            *zi += b;
        }
        if l < self.num_layers() {
            for zi in z.iter_mut() {
                *zi = zi.tanh();
            }
        }
        Ok(z)
    }

    /// Plain forward pass; stores all activations and returns the output.
    pub fn forward(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_pass(x, None)
    }

    /// Forward pass with optional per-node memory read injection. `core`
    /// keeps each node's pre-injection value so backprop stays exact.
    pub fn forward_pass(&mut self, x: &[f64], read_proj: Option<&[Matrix]>) -> Result<Vec<f64>> {
        if x.len() != self.input_width() {
            return Err(NvError::DimensionMismatch {
                context: "forward input",
                expected: self.input_width(),
                actual: x.len(),
            });
        }
        let mut h = x.to_vec();
        self.core[0] = h.clone();
        if let Some(proj) = read_proj {
            crate::release::memory_read_inject(&self.memories[0], &mut h, &proj[0])?;
        }
        self.activations[0] = h;
        for l in 1..self.widths.len() {
            let mut hl = self.layer_eval(l, &self.activations[l - 1])?;
            self.core[l] = hl.clone();
            if let Some(proj) = read_proj {
                crate::release::memory_read_inject(&self.memories[l], &mut hl, &proj[l])?;
            }
            self.activations[l] = hl;
        }
        self.forward_version = Some(self.params_version);
        self.grad_version = None;
        Ok(self.activations.last().unwrap().clone())
    }

    /// Add activation deltas at the given nodes and recompute everything
    /// downstream of the lowest modified node, re-applying memory reads.
    /// Used after docked vesicles modulate mid-network activations; the
    /// stored gradients are left untouched (they describe the pre-release
    /// pass). Returns the new output.
    pub fn apply_activation_deltas(
        &mut self,
        deltas: &std::collections::BTreeMap<usize, Vec<f64>>,
        read_proj: Option<&[Matrix]>,
    ) -> Result<Vec<f64>> {
        let Some((&lowest, first)) = deltas.iter().next() else {
            return Ok(self.activations.last().unwrap().clone());
        };
        if first.len() != self.widths[lowest] {
            return Err(NvError::DimensionMismatch {
                context: "activation delta",
                expected: self.widths[lowest],
                actual: first.len(),
            });
        }
        linalg::add_scaled(&mut self.activations[lowest], first, 1.0);
        for l in (lowest + 1)..self.widths.len() {
            let mut hl = self.layer_eval(l, &self.activations[l - 1])?;
            self.core[l] = hl.clone();
            if let Some(proj) = read_proj {
                crate::release::memory_read_inject(&self.memories[l], &mut hl, &proj[l])?;
            }
            if let Some(d) = deltas.get(&l) {
                linalg::add_scaled(&mut hl, d, 1.0);
            }
            self.activations[l] = hl;
        }
        Ok(self.activations.last().unwrap().clone())
    }

    /// Reverse-mode gradients of the MSE loss w.r.t. every layer's params.
    pub fn backward(&mut self, y: &[f64]) -> Result<()> {
        let Some(v) = self.forward_version else {
            return Err(NvError::StaleForward);
        };
        if v != self.params_version {
            return Err(NvError::StaleForward);
        }
        let yhat = self.activations.last().unwrap();
        if y.len() != yhat.len() {
            return Err(NvError::DimensionMismatch {
                context: "backward target",
                expected: yhat.len(),
                actual: y.len(),
            });
        }
        let d = y.len() as f64;
        // dL/dh^(L) for L = 0.5 * ||yhat - y||^2 / d.
        let mut delta: Vec<f64> = yhat
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) / d)
            .collect();
        for l in (1..self.widths.len()).rev() {
            // dz = delta * act'(z); output layer is identity, hidden are tanh.
            let dz: Vec<f64> = if l == self.num_layers() {
                delta.clone()
            } else {
                delta
                    .iter()
                    .zip(self.core[l].iter())
                    .map(|(d, h)| d * (1.0 - h * h))
                    .collect()
            };
            let g = &mut self.grads[l - 1];
            let h_prev = &self.activations[l - 1];
            for i in 0..g.weight.rows {
                for j in 0..g.weight.cols {
                    g.weight.set(i, j, dz[i] * h_prev[j]);
                }
            }
            g.bias.copy_from_slice(&dz);
            delta = self.params[l - 1].weight.matvec_transposed(&dz)?;
        }
        self.grad_version = Some(self.params_version);
        Ok(())
    }

    pub fn grads_fresh(&self) -> bool {
        self.grad_version == Some(self.params_version)
    }

    pub fn layer_grads(&self, layer: usize) -> &LayerGrads {
        &self.grads[layer - 1]
    }

    /// L2 norm of the gradient bundle attached to `node` (0 when the node has
    /// no parameters or gradients are stale).
    pub fn grad_norm(&self, node: NodeId) -> f64 {
        if node.0 == 0 || !self.grads_fresh() {
            return 0.0;
        }
        let g = &self.grads[node.0 - 1];
        let sq: f64 = g.weight.data.iter().map(|v| v * v).sum::<f64>()
            + g.bias.iter().map(|v| v * v).sum::<f64>();
        sq.sqrt()
    }

    /// Feature vector `[mean(h), std(h), grad_norm, meta...]` for a node.
    pub fn node_features(&self, node: NodeId) -> Vec<f64> {
        let h = &self.activations[node.0];
        let mut f = Vec::with_capacity(3 + self.meta.len());
        f.push(linalg::mean(h));
        f.push(linalg::std_dev(h));
        f.push(self.grad_norm(node));
        f.extend_from_slice(&self.meta);
        f
    }

    /// Length of the vectors produced by [`node_features`].
    pub fn feature_dim(&self) -> usize {
        3 + self.meta.len()
    }

    /// Mutate parameters through `f`; bumps the version so stale forwards
    /// and gradients are detected.
    pub fn update_params<F>(&mut self, f: F)
    where
        F: FnOnce(&mut Vec<LayerParams>),
    {
        f(&mut self.params);
        self.params_version += 1;
    }

    /// Record a step loss into the meta window (component 0 = running mean).
    pub fn record_loss(&mut self, loss: f64) {
        if self.meta.is_empty() {
            return;
        }
        self.loss_window.push_back(loss);
        while self.loss_window.len() > META_WINDOW {
            self.loss_window.pop_front();
        }
        self.meta[0] = self.loss_window.iter().sum::<f64>() / self.loss_window.len() as f64;
    }

    pub fn params_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.weight.is_finite() && p.bias.iter().all(|v| v.is_finite()))
    }

    /// Append a canonical byte representation of the mutable state (params,
    /// activations, memories, meta) for digesting.
    pub fn write_state_bytes(&self, out: &mut Vec<u8>) {
        for p in &self.params {
            for v in &p.weight.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &p.bias {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for h in &self.activations {
            for v in h {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for m in &self.memories {
            for v in &m.slot {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&m.write_count.to_le_bytes());
        }
        for v in &self.meta {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Mean squared error `0.5 * ||yhat - y||^2 / d`.
pub fn loss(yhat: &[f64], y: &[f64]) -> Result<f64> {
    if yhat.len() != y.len() {
        return Err(NvError::DimensionMismatch {
            context: "loss",
            expected: y.len(),
            actual: yhat.len(),
        });
    }
    let d = yhat.len() as f64;
    Ok(0.5
        * yhat
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
        / d)
}
