//! Differentiable multilayer-perceptron core.
//!
//! Provides plain forward evaluation, parameter gradients (for training) and
//! input gradients (for embedding ascent) over flat `f64` parameter blocks.
//! Gradients come from the reverse-mode tape in [`tape`]; see its notes on
//! the supported primitive set.

mod tape;

pub use tape::{Gradients, MlpRef, NodeId, Tape};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DropError, Result};
use crate::wire;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// Architecture of one MLP: affine + relu on hidden layers, linear output.
///
/// The pipeline networks follow the stock layout of two or three hidden
/// layers; smaller shapes (down to a single linear layer) are accepted for
/// tests and probes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(DropError::Shape("all dims must be >= 1".to_string()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(DropError::Shape("hidden dims must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Dimension chain: input, hiddens..., output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    /// Analytic parameter count: per layer, out*(in+1).
    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// Flat parameter block of one MLP.
///
/// Layout is per layer, in order: weights row-major `(out_dim x in_dim)`,
/// then biases `(out_dim)`. The layout is stable and is what the byte format
/// below serializes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    /// Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero.
    pub fn init(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let dims = spec.dims();
        let mut out = Vec::with_capacity(spec.param_count());
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                out.push(rng.gen_range(-limit..limit));
            }
            out.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Self(out)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// A spec paired with its parameters. Most models are a few of these.
#[derive(Debug, Clone)]
pub struct Net {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Net {
    pub fn new(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let params = ParamVector::init(&spec, rng);
        Self { spec, params }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, input)
    }
}

/// Adam optimizer state for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Plain forward pass. Pure: identical inputs give bitwise-identical outputs.
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if input.len() != spec.input_dim {
        return Err(DropError::Shape(format!(
            "input of length {} does not match input_dim {}",
            input.len(),
            spec.input_dim
        )));
    }
    if params.len() != spec.param_count() {
        return Err(DropError::Shape(format!(
            "params of length {} do not match spec ({} expected)",
            params.len(),
            spec.param_count()
        )));
    }
    let dims = spec.dims();
    let p = params.as_slice();
    let n_layers = dims.len() - 1;
    let mut cur = input.to_vec();
    let mut off = 0;
    for layer in 0..n_layers {
        let (in_dim, out_dim) = (dims[layer], dims[layer + 1]);
        let b_off = off + out_dim * in_dim;
        let mut next = vec![0.0; out_dim];
        for (o, slot) in next.iter_mut().enumerate() {
            let row = off + o * in_dim;
            let mut acc = p[b_off + o];
            for (i, &x) in cur.iter().enumerate() {
                acc = p[row + i].mul_add(x, acc);
            }
            *slot = if layer + 1 < n_layers { acc.max(0.0) } else { acc };
        }
        off = b_off + out_dim;
        cur = next;
    }
    Ok(cur)
}

/// Gradient of a scalar loss with respect to the net's parameters.
///
/// The closure builds the loss on the tape from the registered net; it may
/// only use the tape's primitives. Returns d(loss)/d(params), same length as
/// `params`.
pub fn grad_params<F>(spec: &MlpSpec, params: &ParamVector, loss: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, MlpRef) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let net = tape.register(spec, params)?;
    let loss_node = loss(&mut tape, net)?;
    if tape.value(loss_node).len() != 1 {
        return Err(DropError::Shape("loss must be scalar".to_string()));
    }
    if !tape.scalar(loss_node).is_finite() {
        return Err(DropError::Numerical("non-finite loss value".to_string()));
    }
    let grads = tape.backward(loss_node)?;
    Ok(grads.net(net).to_vec())
}

/// Jacobian d(output)/d(input), one row per output component.
pub fn grad_input(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let net = tape.register(spec, params)?;
    if input.len() != spec.input_dim {
        return Err(DropError::Shape(format!(
            "input of length {} does not match input_dim {}",
            input.len(),
            spec.input_dim
        )));
    }
    let x = tape.var(input);
    let y = tape.mlp(net, x)?;
    let out_dim = tape.value(y).len();
    let mut rows = Vec::with_capacity(out_dim);
    for k in 0..out_dim {
        let mut seed = vec![0.0; out_dim];
        seed[k] = 1.0;
        let grads = tape.backward_seeded(y, &seed)?;
        rows.push(
            grads
                .node(x)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; input.len()]),
        );
    }
    Ok(rows)
}

/// One Adam update. State-passing: returns the new parameters and state.
pub fn adam_step(
    params: &ParamVector,
    grads: &[f64],
    state: &AdamState,
) -> Result<(ParamVector, AdamState)> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(DropError::Shape(format!(
            "adam_step length mismatch: params {}, grads {}, moments {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut out = params.as_slice().to_vec();
    for i in 0..out.len() {
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        out[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    let out = ParamVector::from_vec(out);
    if !out.all_finite() {
        return Err(DropError::Numerical(
            "non-finite parameter after adam step".to_string(),
        ));
    }
    Ok((out, next))
}

/// Elementwise `(1 - upsilon) * target + upsilon * online`.
pub fn soft_blend(target: &ParamVector, online: &ParamVector, upsilon: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&upsilon) {
        return Err(DropError::Domain(format!(
            "upsilon {upsilon} outside [0, 1]"
        )));
    }
    if target.len() != online.len() {
        return Err(DropError::Shape(format!(
            "soft_blend length mismatch: {} vs {}",
            target.len(),
            online.len()
        )));
    }
    let blended = target
        .as_slice()
        .iter()
        .zip(online.as_slice())
        .map(|(t, o)| (1.0 - upsilon) * t + upsilon * o)
        .collect();
    Ok(ParamVector::from_vec(blended))
}

const PARAM_FORMAT_VERSION: u8 = 1;

/// Serializes spec dims and parameters: a format-version byte, the dimension
/// chain, then the values as little-endian 64-bit floats.
pub fn write_params<W: std::io::Write>(
    spec: &MlpSpec,
    params: &ParamVector,
    w: &mut W,
) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(DropError::Shape(format!(
            "params of length {} do not match spec ({} expected)",
            params.len(),
            spec.param_count()
        )));
    }
    if !params.all_finite() {
        return Err(DropError::Numerical(
            "refusing to serialize non-finite parameters".to_string(),
        ));
    }
    wire::write_u8(w, PARAM_FORMAT_VERSION)?;
    let dims = spec.dims();
    wire::write_u32(w, dims.len() as u32)?;
    for d in dims {
        wire::write_u32(w, d as u32)?;
    }
    wire::write_f64_slice(w, params.as_slice())?;
    Ok(())
}

pub fn read_params<R: std::io::Read>(r: &mut R) -> Result<(MlpSpec, ParamVector)> {
    let version = wire::read_u8(r)?;
    if version != PARAM_FORMAT_VERSION {
        return Err(DropError::Format(format!(
            "unsupported parameter format version {version}"
        )));
    }
    let n_dims = wire::read_u32(r)? as usize;
    if n_dims < 2 {
        return Err(DropError::Format(
            "dimension chain must have at least input and output".to_string(),
        ));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(wire::read_u32(r)? as usize);
    }
    let spec = MlpSpec::new(dims[0], dims[1..n_dims - 1].to_vec(), dims[n_dims - 1]);
    spec.validate()?;
    let values = wire::read_f64_vec(r, 1 << 32)?;
    if values.len() != spec.param_count() {
        return Err(DropError::Format(format!(
            "parameter count {} does not match spec ({} expected)",
            values.len(),
            spec.param_count()
        )));
    }
    let params = ParamVector::from_vec(values);
    if !params.all_finite() {
        return Err(DropError::Numerical(
            "non-finite parameter in serialized block".to_string(),
        ));
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec(input: usize, hidden: Vec<usize>, output: usize) -> MlpSpec {
        MlpSpec::new(input, hidden, output)
    }

    #[test]
    fn zero_weight_network_outputs_zero() {
        let s = spec(3, vec![4, 4], 2);
        let p = ParamVector::zeros(s.param_count());
        let y = forward(&s, &p, &[0.3, -1.0, 2.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let s = spec(2, vec![], 2);
        let p = ParamVector::from_vec(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = forward(&s, &p, &[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_two_hidden_net() {
        // 2-in / one hidden layer of 2 / 1-out, weights set by hand.
        // layer 1: W=[[1,-2],[0.5,1]], b=[0.25,-0.5]
        //   z = [1*1 + (-2)(-1) + 0.25, 0.5*1 + 1*(-1) - 0.5] = [3.25, -1.0]
        //   relu -> [3.25, 0]
        // layer 2: W=[[2,-1]], b=[0.75] -> 2*3.25 + 0.75 = 7.25
        let s = spec(2, vec![2], 1);
        let p = ParamVector::from_vec(vec![1.0, -2.0, 0.5, 1.0, 0.25, -0.5, 2.0, -1.0, 0.75]);
        let y = forward(&s, &p, &[1.0, -1.0]).unwrap();
        assert!((y[0] - 7.25).abs() < 1e-15);
    }

    #[test]
    fn forward_is_pure() {
        let s = spec(3, vec![8, 8], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ParamVector::init(&s, &mut rng);
        let x = [0.1, -0.7, 1.3];
        let a = forward(&s, &p, &x).unwrap();
        let b = forward(&s, &p, &x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let s = spec(3, vec![4], 1);
        let p = ParamVector::zeros(s.param_count());
        assert!(matches!(
            forward(&s, &p, &[1.0, 2.0]),
            Err(DropError::Shape(_))
        ));
    }

    #[test]
    fn grad_of_constant_loss_is_zero() {
        let s = spec(2, vec![3], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ParamVector::init(&s, &mut rng);
        let g = grad_params(&s, &p, |tape, _| Ok(tape.constant(&[4.2]))).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_of_half_param_norm_is_params() {
        let s = spec(2, vec![2], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamVector::init(&s, &mut rng);
        let g = grad_params(&s, &p, |tape, net| {
            let pv = tape.params_vec(net);
            let sq = tape.mul(pv, pv);
            let sum = tape.sum(sq);
            Ok(tape.scale(sum, 0.5))
        })
        .unwrap();
        for (gi, pi) in g.iter().zip(p.as_slice()) {
            assert!((gi - pi).abs() < 1e-12);
        }
    }

    /// Central finite differences of a squared-error loss; independent of the
    /// reverse-mode path.
    fn fd_param_grads(s: &MlpSpec, p: &ParamVector, x: &[f64], target: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        let loss = |params: &ParamVector| -> f64 {
            let y = forward(s, params, x).unwrap();
            y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let mut grads = vec![0.0; p.len()];
        let mut work = p.clone();
        for i in 0..p.len() {
            let orig = work.as_slice()[i];
            work.as_mut_slice()[i] = orig + h;
            let up = loss(&work);
            work.as_mut_slice()[i] = orig - h;
            let down = loss(&work);
            work.as_mut_slice()[i] = orig;
            grads[i] = (up - down) / (2.0 * h);
        }
        grads
    }

    fn assert_close_rel(analytic: f64, numeric: f64, rel: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(1.0);
        assert!(
            (analytic - numeric).abs() / scale <= rel,
            "analytic={analytic} numeric={numeric}"
        );
    }

    #[test]
    fn grad_params_matches_finite_differences() {
        let s = spec(3, vec![4], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = ParamVector::init(&s, &mut rng);
        let x = [0.4, -0.2, 0.9];
        let target = [0.1, -0.5];
        let analytic = grad_params(&s, &p, |tape, net| {
            let xn = tape.constant(&x);
            let y = tape.mlp(net, xn)?;
            let t = tape.constant(&target);
            Ok(tape.squared_error(y, t))
        })
        .unwrap();
        let numeric = fd_param_grads(&s, &p, &x, &target);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert_close_rel(*a, *n, 1e-4);
        }
    }

    #[test]
    fn grad_input_linear_layer_is_weight_matrix() {
        let s = spec(2, vec![], 2);
        let p = ParamVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let jac = grad_input(&s, &p, &[0.5, -0.5]).unwrap();
        assert_eq!(jac, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn grad_input_zero_network_is_zero() {
        let s = spec(3, vec![4], 2);
        let p = ParamVector::zeros(s.param_count());
        let jac = grad_input(&s, &p, &[1.0, 1.0, 1.0]).unwrap();
        assert!(jac.iter().all(|row| row.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        let s = spec(4, vec![6, 5], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ParamVector::init(&s, &mut rng);
        let x = vec![0.3, -0.9, 0.2, 1.1];
        let jac = grad_input(&s, &p, &x).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += h;
            let mut down = x.clone();
            down[i] -= h;
            let yu = forward(&s, &p, &up).unwrap();
            let yd = forward(&s, &p, &down).unwrap();
            for k in 0..s.output_dim {
                let numeric = (yu[k] - yd[k]) / (2.0 * h);
                assert_close_rel(jac[k][i], numeric, 1e-4);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = ParamVector::from_vec(vec![1.0, -2.0, 3.0]);
        let st = AdamState::new(3, 1e-3);
        let (next, st2) = adam_step(&p, &[0.0, 0.0, 0.0], &st).unwrap();
        assert_eq!(next.as_slice(), p.as_slice());
        assert_eq!(st2.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_equals_lr() {
        let p = ParamVector::from_vec(vec![0.0]);
        let st = AdamState::new(1, 0.1);
        let (next, _) = adam_step(&p, &[1.0], &st).unwrap();
        assert!((next.as_slice()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_repeated_steps_move_against_gradient() {
        let p0 = ParamVector::from_vec(vec![0.5]);
        let st0 = AdamState::new(1, 0.05);
        let (p1, st1) = adam_step(&p0, &[2.0], &st0).unwrap();
        let (p2, _) = adam_step(&p1, &[2.0], &st1).unwrap();
        assert!(p1.as_slice()[0] < p0.as_slice()[0]);
        assert!(p2.as_slice()[0] < p1.as_slice()[0]);
    }

    #[test]
    fn adam_rejects_length_mismatch() {
        let p = ParamVector::from_vec(vec![0.0, 0.0]);
        let st = AdamState::new(2, 1e-3);
        assert!(matches!(
            adam_step(&p, &[1.0], &st),
            Err(DropError::Shape(_))
        ));
    }

    #[test]
    fn soft_blend_endpoints_and_midpoint() {
        let t = ParamVector::from_vec(vec![0.0, 2.0]);
        let o = ParamVector::from_vec(vec![2.0, 0.0]);
        assert_eq!(soft_blend(&t, &o, 1.0).unwrap().as_slice(), &[2.0, 0.0]);
        assert_eq!(soft_blend(&t, &o, 0.0).unwrap().as_slice(), &[0.0, 2.0]);
        assert_eq!(soft_blend(&t, &o, 0.5).unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn soft_blend_rejects_out_of_range_upsilon() {
        let t = ParamVector::from_vec(vec![0.0]);
        let o = ParamVector::from_vec(vec![1.0]);
        assert!(matches!(
            soft_blend(&t, &o, 1.5),
            Err(DropError::Domain(_))
        ));
    }

    #[test]
    fn params_round_trip_through_byte_format() {
        let s = spec(3, vec![5, 4], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = ParamVector::init(&s, &mut rng);
        let mut buf = Vec::new();
        write_params(&s, &p, &mut buf).unwrap();
        let (s2, p2) = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(s, s2);
        assert_eq!(p.as_slice(), p2.as_slice());
    }

    #[test]
    fn read_params_rejects_bad_version() {
        let mut buf = vec![9u8];
        buf.extend([0u8; 16]);
        assert!(matches!(
            read_params(&mut buf.as_slice()),
            Err(DropError::Format(_))
        ));
    }
}
