//! Reverse-mode accumulation over a fixed primitive set.
//!
//! The tape is not a general autodiff engine: it supports exactly the
//! primitives the training losses and the embedding ascent need (affine
//! layers, relu, tanh, elementwise arithmetic, squared error, diagonal
//! Gaussian log-density, KL to the standard normal, softmax log-likelihood).
//! Networks are registered once per tape; their parameters are copied in so
//! a chunk of samples can share one registration.
//!
//! Shape mismatches between tape nodes are programmer error and panic via
//! `assert!`; the public entry points in the parent module validate
//! dimensions and return errors instead.

use crate::error::{DropError, Result};

use super::{MlpSpec, ParamVector};

/// Handle to a value node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Handle to a network registered on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpRef(usize);

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug)]
enum Op {
    Const,
    Var,
    /// The raw parameter block of a registered net, exposed as a value.
    ParamsVec { net: usize },
    Affine { net: usize, layer: usize, x: NodeId },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Neg { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    Concat { a: NodeId, b: NodeId },
    Slice { x: NodeId, start: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Scalar `sum_i (a_i - b_i)^2`.
    SquaredError { a: NodeId, b: NodeId },
    /// Scalar log-density of a diagonal Gaussian at `x`.
    GaussLogProb { mean: NodeId, log_std: NodeId, x: NodeId },
    /// Scalar KL(N(mean, exp(log_std)^2) || N(0, I)).
    KlStdNormal { mean: NodeId, log_std: NodeId },
    /// Scalar `logits[class] - logsumexp(logits)`.
    SoftmaxLogLik { logits: NodeId, class: usize },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

struct NetEntry {
    dims: Vec<usize>,
    params: Vec<f64>,
}

impl NetEntry {
    /// (weight offset, bias offset) of `layer` in the flat parameter block.
    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for l in 0..layer {
            off += self.dims[l + 1] * (self.dims[l] + 1);
        }
        (off, off + self.dims[layer + 1] * self.dims[layer])
    }
}

/// Gradients extracted by a backward pass.
pub struct Gradients {
    net_grads: Vec<Vec<f64>>,
    node_grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a registered net's flat parameters.
    pub fn net(&self, net: MlpRef) -> &[f64] {
        &self.net_grads[net.0]
    }

    pub fn into_net_grads(self) -> Vec<Vec<f64>> {
        self.net_grads
    }

    /// Gradient with respect to a `var` node, if it received any.
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.node_grads[id.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    nets: Vec<NetEntry>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copies a network's parameters onto the tape. Register once and reuse
    /// the handle for every sample in a chunk.
    pub fn register(&mut self, spec: &MlpSpec, params: &ParamVector) -> Result<MlpRef> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(DropError::Shape(format!(
                "params of length {} do not match spec ({} expected)",
                params.len(),
                spec.param_count()
            )));
        }
        self.nets.push(NetEntry {
            dims: spec.dims(),
            params: params.as_slice().to_vec(),
        });
        Ok(MlpRef(self.nets.len() - 1))
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on a node of length {}", v.len());
        v[0]
    }

    /// Constant leaf: receives no gradient.
    pub fn constant(&mut self, v: &[f64]) -> NodeId {
        self.push(v.to_vec(), Op::Const)
    }

    /// Differentiable leaf: its gradient is available after backward.
    pub fn var(&mut self, v: &[f64]) -> NodeId {
        self.push(v.to_vec(), Op::Var)
    }

    /// The registered net's parameter block as a value node.
    pub fn params_vec(&mut self, net: MlpRef) -> NodeId {
        let v = self.nets[net.0].params.clone();
        self.push(v, Op::ParamsVec { net: net.0 })
    }

    /// Full MLP pass: affine + relu on hidden layers, linear output.
    /// Errors with the offending layer index if an activation goes non-finite.
    pub fn mlp(&mut self, net: MlpRef, x: NodeId) -> Result<NodeId> {
        let n_layers = self.nets[net.0].dims.len() - 1;
        assert_eq!(
            self.value(x).len(),
            self.nets[net.0].dims[0],
            "mlp input length mismatch"
        );
        let mut cur = x;
        for layer in 0..n_layers {
            cur = self.affine(net, layer, cur);
            if !self.value(cur).iter().all(|v| v.is_finite()) {
                return Err(DropError::Numerical(format!(
                    "non-finite activation in layer {layer}"
                )));
            }
            if layer + 1 < n_layers {
                cur = self.relu(cur);
            }
        }
        Ok(cur)
    }

    fn affine(&mut self, net: MlpRef, layer: usize, x: NodeId) -> NodeId {
        let entry = &self.nets[net.0];
        let (in_dim, out_dim) = (entry.dims[layer], entry.dims[layer + 1]);
        let (w_off, b_off) = entry.layer_offsets(layer);
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), in_dim, "affine input length mismatch");
        let mut y = vec![0.0; out_dim];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = w_off + o * in_dim;
            let mut acc = entry.params[b_off + o];
            for (i, &xi) in xv.iter().enumerate() {
                acc = entry.params[row + i].mul_add(xi, acc);
            }
            *yo = acc;
        }
        self.push(y, Op::Affine { net: net.0, layer, x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(y, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.value(x).iter().map(|&v| v.tanh()).collect();
        self.push(y, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.value(x).iter().map(|&v| v.exp()).collect();
        self.push(y, Op::Exp { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let y: Vec<f64> = self.value(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        self.push(y, Op::Clamp { x, lo, hi })
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.value(x).iter().map(|&v| -v).collect();
        self.push(y, Op::Neg { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "add length mismatch");
        let y: Vec<f64> = va.iter().zip(vb).map(|(x, z)| x + z).collect();
        self.push(y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "sub length mismatch");
        let y: Vec<f64> = va.iter().zip(vb).map(|(x, z)| x - z).collect();
        self.push(y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "mul length mismatch");
        let y: Vec<f64> = va.iter().zip(vb).map(|(x, z)| x * z).collect();
        self.push(y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let y: Vec<f64> = self.value(x).iter().map(|&v| v * k).collect();
        self.push(y, Op::Scale { x, k })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.nodes[a.0].value.clone();
        y.extend_from_slice(&self.nodes[b.0].value);
        self.push(y, Op::Concat { a, b })
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        assert!(start + len <= v.len(), "slice out of range");
        let y = v[start..start + len].to_vec();
        self.push(y, Op::Slice { x, start })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().sum();
        self.push(vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        assert!(!v.is_empty(), "mean of empty node");
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![s], Op::Mean { x })
    }

    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "squared_error length mismatch");
        let s: f64 = va.iter().zip(vb).map(|(x, z)| (x - z) * (x - z)).sum();
        self.push(vec![s], Op::SquaredError { a, b })
    }

    /// Log-density of `x` under N(mean, diag(exp(log_std)^2)).
    pub fn gauss_log_prob(&mut self, mean: NodeId, log_std: NodeId, x: NodeId) -> NodeId {
        let (vm, vs, vx) = (
            &self.nodes[mean.0].value,
            &self.nodes[log_std.0].value,
            &self.nodes[x.0].value,
        );
        assert!(
            vm.len() == vs.len() && vm.len() == vx.len(),
            "gauss_log_prob length mismatch"
        );
        let mut lp = 0.0;
        for i in 0..vm.len() {
            let inv_std = (-vs[i]).exp();
            let z = (vx[i] - vm[i]) * inv_std;
            lp += -0.5 * LN_2PI - vs[i] - 0.5 * z * z;
        }
        self.push(vec![lp], Op::GaussLogProb { mean, log_std, x })
    }

    pub fn kl_std_normal(&mut self, mean: NodeId, log_std: NodeId) -> NodeId {
        let (vm, vs) = (&self.nodes[mean.0].value, &self.nodes[log_std.0].value);
        assert_eq!(vm.len(), vs.len(), "kl_std_normal length mismatch");
        let mut kl = 0.0;
        for i in 0..vm.len() {
            let var = (2.0 * vs[i]).exp();
            kl += 0.5 * (vm[i] * vm[i] + var - 1.0) - vs[i];
        }
        self.push(vec![kl], Op::KlStdNormal { mean, log_std })
    }

    pub fn softmax_log_lik(&mut self, logits: NodeId, class: usize) -> NodeId {
        let v = self.value(logits);
        assert!(class < v.len(), "softmax class out of range");
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        self.push(vec![v[class] - lse], Op::SoftmaxLogLik { logits, class })
    }

    /// Backward pass from a scalar node, seeding its adjoint with 1.
    pub fn backward(&self, target: NodeId) -> Result<Gradients> {
        self.backward_seeded(target, &[1.0])
    }

    /// Backward pass with an explicit adjoint seed (one Jacobian row at a
    /// time for vector outputs). Non-destructive; a tape can be swept many
    /// times.
    pub fn backward_seeded(&self, target: NodeId, seed: &[f64]) -> Result<Gradients> {
        assert_eq!(
            seed.len(),
            self.nodes[target.0].value.len(),
            "seed length mismatch"
        );
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut net_grads: Vec<Vec<f64>> = self
            .nets
            .iter()
            .map(|n| vec![0.0; n.params.len()])
            .collect();
        node_grads[target.0] = Some(seed.to_vec());

        for idx in (0..=target.0).rev() {
            let g = match node_grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Var => {
                    // keep the gradient available to the caller
                    node_grads[idx] = Some(g);
                    continue;
                }
                Op::ParamsVec { net } => {
                    for (acc, gi) in net_grads[*net].iter_mut().zip(&g) {
                        *acc += gi;
                    }
                }
                Op::Affine { net, layer, x } => {
                    let entry = &self.nets[*net];
                    let (in_dim, out_dim) = (entry.dims[*layer], entry.dims[*layer + 1]);
                    let (w_off, b_off) = entry.layer_offsets(*layer);
                    let xv = &self.nodes[x.0].value;
                    let ng = &mut net_grads[*net];
                    for o in 0..out_dim {
                        let go = g[o];
                        ng[b_off + o] += go;
                        let row = w_off + o * in_dim;
                        for i in 0..in_dim {
                            ng[row + i] += go * xv[i];
                        }
                    }
                    let dx = Self::adj(&mut node_grads, x.0, in_dim);
                    for o in 0..out_dim {
                        let go = g[o];
                        let row = w_off + o * in_dim;
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d = entry.params[row + i].mul_add(go, *d);
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = Self::adj(&mut node_grads, x.0, xv.len());
                    for i in 0..xv.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
                Op::Tanh { x } => {
                    let yv = &self.nodes[idx].value;
                    let dx = Self::adj(&mut node_grads, x.0, yv.len());
                    for i in 0..yv.len() {
                        dx[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
                Op::Exp { x } => {
                    let yv = &self.nodes[idx].value;
                    let dx = Self::adj(&mut node_grads, x.0, yv.len());
                    for i in 0..yv.len() {
                        dx[i] += g[i] * yv[i];
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = Self::adj(&mut node_grads, x.0, xv.len());
                    for i in 0..xv.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            dx[i] += g[i];
                        }
                    }
                }
                Op::Neg { x } => {
                    let dx = Self::adj(&mut node_grads, x.0, g.len());
                    for i in 0..g.len() {
                        dx[i] -= g[i];
                    }
                }
                Op::Add { a, b } => {
                    let da = Self::adj(&mut node_grads, a.0, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i];
                    }
                    let db = Self::adj(&mut node_grads, b.0, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i];
                    }
                }
                Op::Sub { a, b } => {
                    let da = Self::adj(&mut node_grads, a.0, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i];
                    }
                    let db = Self::adj(&mut node_grads, b.0, g.len());
                    for i in 0..g.len() {
                        db[i] -= g[i];
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let da = Self::adj(&mut node_grads, a.0, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                    let db = Self::adj(&mut node_grads, b.0, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
                Op::Scale { x, k } => {
                    let dx = Self::adj(&mut node_grads, x.0, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * k;
                    }
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].value.len();
                    let da = Self::adj(&mut node_grads, a.0, na);
                    for i in 0..na {
                        da[i] += g[i];
                    }
                    let nb = self.nodes[b.0].value.len();
                    let db = Self::adj(&mut node_grads, b.0, nb);
                    for i in 0..nb {
                        db[i] += g[na + i];
                    }
                }
                Op::Slice { x, start } => {
                    let nx = self.nodes[x.0].value.len();
                    let dx = Self::adj(&mut node_grads, x.0, nx);
                    for (i, gi) in g.iter().enumerate() {
                        dx[start + i] += gi;
                    }
                }
                Op::Sum { x } => {
                    let nx = self.nodes[x.0].value.len();
                    let dx = Self::adj(&mut node_grads, x.0, nx);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean { x } => {
                    let nx = self.nodes[x.0].value.len();
                    let gi = g[0] / nx as f64;
                    let dx = Self::adj(&mut node_grads, x.0, nx);
                    for d in dx.iter_mut() {
                        *d += gi;
                    }
                }
                Op::SquaredError { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let da = Self::adj(&mut node_grads, a.0, av.len());
                    for i in 0..av.len() {
                        da[i] += 2.0 * g[0] * (av[i] - bv[i]);
                    }
                    let db = Self::adj(&mut node_grads, b.0, bv.len());
                    for i in 0..bv.len() {
                        db[i] -= 2.0 * g[0] * (av[i] - bv[i]);
                    }
                }
                Op::GaussLogProb { mean, log_std, x } => {
                    let vm = self.nodes[mean.0].value.clone();
                    let vs = self.nodes[log_std.0].value.clone();
                    let vx = self.nodes[x.0].value.clone();
                    let n = vm.len();
                    let dm = Self::adj(&mut node_grads, mean.0, n);
                    for i in 0..n {
                        let inv_var = (-2.0 * vs[i]).exp();
                        dm[i] += g[0] * (vx[i] - vm[i]) * inv_var;
                    }
                    let ds = Self::adj(&mut node_grads, log_std.0, n);
                    for i in 0..n {
                        let z2 = ((vx[i] - vm[i]) * (-vs[i]).exp()).powi(2);
                        ds[i] += g[0] * (z2 - 1.0);
                    }
                    let dx = Self::adj(&mut node_grads, x.0, n);
                    for i in 0..n {
                        let inv_var = (-2.0 * vs[i]).exp();
                        dx[i] -= g[0] * (vx[i] - vm[i]) * inv_var;
                    }
                }
                Op::KlStdNormal { mean, log_std } => {
                    let vm = self.nodes[mean.0].value.clone();
                    let vs = self.nodes[log_std.0].value.clone();
                    let n = vm.len();
                    let dm = Self::adj(&mut node_grads, mean.0, n);
                    for i in 0..n {
                        dm[i] += g[0] * vm[i];
                    }
                    let ds = Self::adj(&mut node_grads, log_std.0, n);
                    for i in 0..n {
                        ds[i] += g[0] * ((2.0 * vs[i]).exp() - 1.0);
                    }
                }
                Op::SoftmaxLogLik { logits, class } => {
                    let v = self.nodes[logits.0].value.clone();
                    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = v.iter().map(|&x| (x - max).exp()).sum();
                    let dl = Self::adj(&mut node_grads, logits.0, v.len());
                    for i in 0..v.len() {
                        let p = (v[i] - max).exp() / denom;
                        let ind = if i == *class { 1.0 } else { 0.0 };
                        dl[i] += g[0] * (ind - p);
                    }
                }
            }
        }

        for ng in &net_grads {
            if !ng.iter().all(|v| v.is_finite()) {
                return Err(DropError::Numerical(
                    "non-finite parameter gradient".to_string(),
                ));
            }
        }
        Ok(Gradients {
            net_grads,
            node_grads,
        })
    }

    fn adj(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
        grads[idx].get_or_insert_with(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{Activation, MlpSpec};

    fn linear_spec(n_in: usize, n_out: usize) -> MlpSpec {
        MlpSpec {
            input_dim: n_in,
            hidden_dims: vec![],
            output_dim: n_out,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn affine_matches_linear_map() {
        let spec = linear_spec(2, 2);
        // W = [[1, 2], [3, 4]], b = [0.5, -0.5]
        let params = ParamVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        let mut tape = Tape::new();
        let net = tape.register(&spec, &params).unwrap();
        let x = tape.var(&[1.0, -1.0]);
        let y = tape.mlp(net, x).unwrap();
        assert_eq!(tape.value(y), &[-0.5, -1.5]);

        // Jacobian rows recover W.
        let g0 = tape.backward_seeded(y, &[1.0, 0.0]).unwrap();
        assert_eq!(g0.node(x).unwrap(), &[1.0, 2.0]);
        let g1 = tape.backward_seeded(y, &[0.0, 1.0]).unwrap();
        assert_eq!(g1.node(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn mul_with_shared_parent_doubles() {
        let mut tape = Tape::new();
        let x = tape.var(&[3.0]);
        let y = tape.mul(x, x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.node(x).unwrap(), &[6.0]);
    }

    #[test]
    fn gauss_log_prob_at_mode() {
        let mut tape = Tape::new();
        let mean = tape.constant(&[0.3, -0.2]);
        let ls = tape.constant(&[0.0, 0.0]);
        let x = tape.constant(&[0.3, -0.2]);
        let lp = tape.gauss_log_prob(mean, ls, x);
        let expected = -(2.0 / 2.0) * LN_2PI;
        assert!((tape.scalar(lp) - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_std_normal_closed_forms() {
        let mut tape = Tape::new();
        let m0 = tape.constant(&[0.0]);
        let s0 = tape.constant(&[0.0]);
        let kl0 = tape.kl_std_normal(m0, s0);
        assert_eq!(tape.scalar(kl0), 0.0);

        let m1 = tape.constant(&[1.0]);
        let s1 = tape.constant(&[0.0]);
        let kl1 = tape.kl_std_normal(m1, s1);
        assert!((tape.scalar(kl1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_log_lik_gradient_sums_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.var(&[0.2, -1.0, 0.7]);
        let ll = tape.softmax_log_lik(logits, 2);
        let g = tape.backward(ll).unwrap();
        let sum: f64 = g.node(logits).unwrap().iter().sum();
        assert!(sum.abs() < 1e-12);
        // gradient at the observed class is 1 - p > 0
        assert!(g.node(logits).unwrap()[2] > 0.0);
    }
}
