//! Minimal feed-forward networks with analytic gradients and Adam.
//!
//! Actors and critics are plain multi-layer perceptrons over `f64`:
//! hidden layers use ReLU, the output layer is either `Tanh` (actors, so
//! actions stay in `[-1, 1]`) or `Identity` (critics, scalar value head).
//! Forward passes return a cache of post-activations so the matching
//! backward pass can produce exact analytic gradients, including the
//! gradient with respect to the network input (used to push a critic's
//! action gradient into an actor).
//!
//! Everything is deterministic for a fixed seed and single-threaded.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Activation applied to the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Tanh,
    Identity,
}

/// Parameters of a feed-forward network.
///
/// `weights[l]` is the layer-`l` matrix in row-major layout with shape
/// `(layer_dims[l+1], layer_dims[l])`; `biases[l]` has length
/// `layer_dims[l+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    output_activation: OutputActivation,
}

/// Post-activation values retained by a forward pass.
///
/// `activations[0]` is the input, `activations[l+1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

/// Per-layer parameter gradients mirroring an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient of the loss with respect to the network input, if requested.
    pub input_gradient: Option<Vec<f64>>,
}

impl MlpParams {
    /// Initializes a network with uniform fan-in scaled weights and zero
    /// biases: each weight of layer `l` is drawn from
    /// `U(-1/sqrt(layer_dims[l]), 1/sqrt(layer_dims[l]))`.
    pub fn init(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "layer_dims needs at least an input and an output dim".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidConfig("layer dims must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for l in 0..layer_dims.len() - 1 {
            let fan_in = layer_dims[l];
            let fan_out = layer_dims[l + 1];
            let limit = 1.0 / (fan_in as f64).sqrt();
            let mut w = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                w.push(rng.random_range(-limit..limit));
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            output_activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Flat read access used by finite-difference checks and tests.
    pub fn param(&self, index: usize) -> f64 {
        let (slot, offset) = self.locate(index);
        match slot {
            Slot::Weight(l) => self.weights[l][offset],
            Slot::Bias(l) => self.biases[l][offset],
        }
    }

    /// Flat write access used by finite-difference checks and tests.
    pub fn set_param(&mut self, index: usize, value: f64) {
        let (slot, offset) = self.locate(index);
        match slot {
            Slot::Weight(l) => self.weights[l][offset] = value,
            Slot::Bias(l) => self.biases[l][offset] = value,
        }
    }

    fn locate(&self, mut index: usize) -> (Slot, usize) {
        for l in 0..self.num_layers() {
            if index < self.weights[l].len() {
                return (Slot::Weight(l), index);
            }
            index -= self.weights[l].len();
            if index < self.biases[l].len() {
                return (Slot::Bias(l), index);
            }
            index -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Elementwise convex mix toward `online`:
    /// `self <- tau * online + (1 - tau) * self`.
    pub fn mix_from(&mut self, online: &MlpParams, tau: f64) -> Result<()> {
        if self.layer_dims != online.layer_dims {
            return Err(Error::DimMismatch("mix_from layer dims".into()));
        }
        for (t, o) in self.weights.iter_mut().zip(online.weights.iter()) {
            for (tv, ov) in t.iter_mut().zip(o.iter()) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
        }
        for (t, o) in self.biases.iter_mut().zip(online.biases.iter()) {
            for (tv, ov) in t.iter_mut().zip(o.iter()) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
        }
        Ok(())
    }

    /// Forward pass. Hidden layers apply ReLU, the final layer applies
    /// [`OutputActivation`]. Returns the output and the activation cache
    /// consumed by [`MlpParams::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "forward input has length {}, expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.num_layers();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        for l in 0..n_layers {
            let in_dim = self.layer_dims[l];
            let out_dim = self.layer_dims[l + 1];
            let prev = &activations[l];
            let mut out = vec![0.0; out_dim];
            for o in 0..out_dim {
                let row = &self.weights[l][o * in_dim..(o + 1) * in_dim];
                let mut z = self.biases[l][o];
                for (w, x) in row.iter().zip(prev.iter()) {
                    z += w * x;
                }
                out[o] = if l + 1 < n_layers {
                    z.max(0.0)
                } else {
                    match self.output_activation {
                        OutputActivation::Tanh => z.tanh(),
                        OutputActivation::Identity => z,
                    }
                };
            }
            activations.push(out);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, ForwardCache { activations }))
    }

    /// Backward pass for the forward call that produced `cache`.
    ///
    /// `upstream` is the gradient of a scalar loss with respect to the
    /// network output; the returned [`Gradients`] are the exact analytic
    /// gradients of that loss with respect to every parameter, plus the
    /// input gradient when `want_input_gradient` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        want_input_gradient: bool,
    ) -> Result<Gradients> {
        let n_layers = self.num_layers();
        if cache.activations.len() != n_layers + 1 {
            return Err(Error::DimMismatch(
                "activation cache does not match network depth".into(),
            ));
        }
        for (l, act) in cache.activations.iter().enumerate() {
            if act.len() != self.layer_dims[l] {
                return Err(Error::DimMismatch(format!(
                    "cached activation {l} has length {}, expected {}",
                    act.len(),
                    self.layer_dims[l]
                )));
            }
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::DimMismatch(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                self.output_dim()
            )));
        }

        let mut grads = Gradients::zeros_like(self);
        // delta = dL/dz for the current layer, starting at the output.
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(cache.activations[n_layers].iter())
            .map(|(&g, &y)| match self.output_activation {
                OutputActivation::Tanh => g * (1.0 - y * y),
                OutputActivation::Identity => g,
            })
            .collect();

        for l in (0..n_layers).rev() {
            let in_dim = self.layer_dims[l];
            let out_dim = self.layer_dims[l + 1];
            let prev = &cache.activations[l];
            for o in 0..out_dim {
                let d = delta[o];
                grads.biases[l][o] = d;
                let row = &mut grads.weights[l][o * in_dim..(o + 1) * in_dim];
                for (gw, x) in row.iter_mut().zip(prev.iter()) {
                    *gw = d * x;
                }
            }
            let need_previous = l > 0 || want_input_gradient;
            if !need_previous {
                break;
            }
            let mut prev_delta = vec![0.0; in_dim];
            for o in 0..out_dim {
                let d = delta[o];
                let row = &self.weights[l][o * in_dim..(o + 1) * in_dim];
                for (p, w) in prev_delta.iter_mut().zip(row.iter()) {
                    *p += w * d;
                }
            }
            if l > 0 {
                // ReLU mask from the post-activation value: y > 0 iff z > 0.
                for (p, &y) in prev_delta.iter_mut().zip(prev.iter()) {
                    if y <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev_delta;
            } else {
                grads.input_gradient = Some(prev_delta);
            }
        }
        Ok(grads)
    }
}

enum Slot {
    Weight(usize),
    Bias(usize),
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            input_gradient: None,
        }
    }

    /// Elementwise accumulation; input gradients are not combined.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for x in w.iter_mut() {
                *x *= factor;
            }
        }
        for b in &mut self.biases {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// L2 norm over all parameter gradients (input gradient excluded).
    pub fn global_norm(&self) -> f64 {
        let mut sum_sq = 0.0;
        for w in &self.weights {
            for x in w {
                sum_sq += x * x;
            }
        }
        for b in &self.biases {
            for x in b {
                sum_sq += x * x;
            }
        }
        sum_sq.sqrt()
    }

    /// Scales gradients down so the global norm does not exceed `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|x| x.is_finite())
            && self.biases.iter().flatten().all(|x| x.is_finite())
    }

    /// Flat read access matching [`MlpParams::param`] indexing.
    pub fn param(&self, index: usize) -> f64 {
        let mut index = index;
        for l in 0..self.weights.len() {
            if index < self.weights[l].len() {
                return self.weights[l][index];
            }
            index -= self.weights[l].len();
            if index < self.biases[l].len() {
                return self.biases[l][index];
            }
            index -= self.biases[l].len();
        }
        panic!("gradient index out of range");
    }
}

/// Adam state for one network. Moment arrays mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_weights: Vec<Vec<f64>>,
    v_weights: Vec<Vec<f64>>,
    m_biases: Vec<Vec<f64>>,
    v_biases: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, learning_rate: f64) -> Self {
        Self {
            m_weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients, which
/// signal a diverged update upstream.
pub fn adam_step(params: &mut MlpParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.weights.len() != params.weights.len() {
        return Err(Error::DimMismatch("gradient layer count".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient passed to adam_step".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    };
    for l in 0..params.weights.len() {
        if grads.weights[l].len() != params.weights[l].len()
            || grads.biases[l].len() != params.biases[l].len()
        {
            return Err(Error::DimMismatch(format!("gradient shape at layer {l}")));
        }
        update(
            &mut params.weights[l],
            &grads.weights[l],
            &mut state.m_weights[l],
            &mut state.v_weights[l],
        );
        update(
            &mut params.biases[l],
            &grads.biases[l],
            &mut state.m_biases[l],
            &mut state.v_biases[l],
        );
    }
    Ok(())
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Worst relative error across the checked coordinates. The error scale
    /// is `max(|analytic|, |numeric|, 1e-3)`, so tiny gradients are compared
    /// absolutely at the 1e-3 level.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub within_tolerance: bool,
}

/// Central finite differences of the parameter count above which only a
/// seeded subsample of coordinates is checked.
const FD_FULL_CHECK_LIMIT: usize = 4096;
const FD_STEP: f64 = 1e-5;

/// Compares `analytic` against central finite differences of `loss_fn`
/// around `params`. Every coordinate is checked unless the network exceeds
/// [`FD_FULL_CHECK_LIMIT`] parameters, in which case a deterministic sample
/// of that size is used.
pub fn finite_difference_check<L>(
    params: &MlpParams,
    loss_fn: L,
    analytic: &Gradients,
    tolerance: f64,
) -> FiniteDiffReport
where
    L: Fn(&MlpParams) -> f64,
{
    let total = params.num_params();
    let coords: Vec<usize> = if total <= FD_FULL_CHECK_LIMIT {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eedfd);
        (0..FD_FULL_CHECK_LIMIT)
            .map(|_| rng.random_range(0..total))
            .collect()
    };
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for &idx in &coords {
        let orig = params.param(idx);
        work.set_param(idx, orig + FD_STEP);
        let plus = loss_fn(&work);
        work.set_param(idx, orig - FD_STEP);
        let minus = loss_fn(&work);
        work.set_param(idx, orig);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.param(idx);
        let scale = a.abs().max(numeric.abs()).max(1e-3);
        let rel = (a - numeric).abs() / scale;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    FiniteDiffReport {
        max_rel_error: max_rel,
        coords_checked: coords.len(),
        within_tolerance: max_rel <= tolerance,
    }
}

/// On-disk form of one network: `format_version`, dims, activation and the
/// row-major weight matrices as nested arrays. JSON round-trips are exact to
/// full double precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub output_activation: OutputActivation,
    /// `weights[l][row]` is one row of layer `l` (length `layer_dims[l]`).
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl MlpParams {
    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        let weights = (0..self.num_layers())
            .map(|l| {
                let in_dim = self.layer_dims[l];
                self.weights[l].chunks(in_dim).map(<[f64]>::to_vec).collect()
            })
            .collect();
        MlpCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: self.layer_dims.clone(),
            output_activation: self.output_activation,
            weights,
            biases: self.biases.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &MlpCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        if ckpt.layer_dims.len() < 2 {
            return Err(Error::Parse("checkpoint has fewer than two dims".into()));
        }
        let n_layers = ckpt.layer_dims.len() - 1;
        if ckpt.weights.len() != n_layers || ckpt.biases.len() != n_layers {
            return Err(Error::Parse("checkpoint layer count mismatch".into()));
        }
        let mut weights = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let in_dim = ckpt.layer_dims[l];
            let out_dim = ckpt.layer_dims[l + 1];
            if ckpt.weights[l].len() != out_dim || ckpt.biases[l].len() != out_dim {
                return Err(Error::Parse(format!("layer {l} output dim mismatch")));
            }
            let mut flat = Vec::with_capacity(in_dim * out_dim);
            for row in &ckpt.weights[l] {
                if row.len() != in_dim {
                    return Err(Error::Parse(format!("layer {l} row length mismatch")));
                }
                flat.extend_from_slice(row);
            }
            weights.push(flat);
        }
        let params = Self {
            layer_dims: ckpt.layer_dims.clone(),
            weights,
            biases: ckpt.biases.clone(),
            output_activation: ckpt.output_activation,
        };
        if !params.weights.iter().flatten().all(|x| x.is_finite())
            || !params.biases.iter().flatten().all(|x| x.is_finite())
        {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: MlpCheckpoint = serde_json::from_str(text)?;
        Self::from_checkpoint(&ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64) -> MlpParams {
        MlpParams::init(&[3, 6, 5, 2], OutputActivation::Tanh, seed).unwrap()
    }

    #[test]
    fn init_zeroes_biases_and_is_deterministic() {
        let a = MlpParams::init(&[2, 1], OutputActivation::Identity, 7).unwrap();
        assert!(a.biases.iter().flatten().all(|&b| b == 0.0));
        let b = MlpParams::init(&[2, 1], OutputActivation::Identity, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let net = MlpParams::init(&[4, 8, 8, 2], OutputActivation::Tanh, 123).unwrap();
        for l in 0..net.num_layers() {
            let bound = 1.0 / (net.layer_dims[l] as f64).sqrt();
            assert!(net.weights[l].iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(MlpParams::init(&[3], OutputActivation::Tanh, 0).is_err());
        assert!(MlpParams::init(&[3, 0, 2], OutputActivation::Tanh, 0).is_err());
        assert!(MlpParams::init(&[], OutputActivation::Tanh, 0).is_err());
    }

    #[test]
    fn forward_zero_net_is_zero() {
        let mut net = small_net(1);
        for l in 0..net.num_layers() {
            net.weights[l].iter_mut().for_each(|w| *w = 0.0);
        }
        let (out, _) = net.forward(&[0.3, -0.2, 0.9]).unwrap();
        assert!(out.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn forward_single_linear_layer() {
        let mut net = MlpParams::init(&[2, 1], OutputActivation::Identity, 0).unwrap();
        net.weights[0] = vec![1.0, 1.0];
        let (out, _) = net.forward(&[0.3, 0.7]).unwrap();
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn tanh_outputs_stay_inside_unit_interval() {
        let net = small_net(42);
        for i in 0..50 {
            let x = [(i as f64) / 25.0 - 1.0, 0.5, -0.5];
            let (out, _) = net.forward(&x).unwrap();
            assert!(out.iter().all(|&y| y > -1.0 && y < 1.0));
        }
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let net = small_net(0);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let net = small_net(3);
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let grads = net.backward(&cache, &[0.0, 0.0], true).unwrap();
        assert!(grads.weights.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.biases.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.input_gradient.unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_linear_case() {
        // One identity layer, loss = output: weight grad is the input,
        // input grad is the weight row.
        let mut net = MlpParams::init(&[2, 1], OutputActivation::Identity, 0).unwrap();
        net.weights[0] = vec![0.4, -1.5];
        let x = [0.3, 0.7];
        let (_, cache) = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &[1.0], true).unwrap();
        assert_eq!(grads.weights[0], vec![0.3, 0.7]);
        assert_eq!(grads.biases[0], vec![1.0]);
        assert_eq!(grads.input_gradient.unwrap(), vec![0.4, -1.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar projection of a 3-layer tanh net output.
        let net = small_net(9);
        let x = [0.25, -0.4, 0.7];
        let proj = [1.3, -0.6];
        let (_, cache) = net.forward(&x).unwrap();
        let analytic = net.backward(&cache, &proj, false).unwrap();
        let report = finite_difference_check(
            &net,
            |p| {
                let (out, _) = p.forward(&x).unwrap();
                out[0] * proj[0] + out[1] * proj[1]
            },
            &analytic,
            1e-4,
        );
        assert!(
            report.within_tolerance,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = small_net(11);
        let x = vec![0.15, -0.3, 0.55];
        let (_, cache) = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &[1.0, 0.0], true).unwrap();
        let input_grad = grads.input_gradient.unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += FD_STEP;
            let plus = net.forward(&xp).unwrap().0[0];
            xp[i] = x[i] - FD_STEP;
            let minus = net.forward(&xp).unwrap().0[0];
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            assert!((input_grad[i] - numeric).abs() <= 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut net = small_net(5);
        let before = net.clone();
        let grads = Gradients::zeros_like(&net);
        let mut adam = AdamState::new(&net, 1e-3);
        adam_step(&mut net, &grads, &mut adam).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_first_step_hand_value() {
        // Scalar parameter 0, gradient 1, lr 0.1: bias correction makes the
        // first step exactly -lr (up to epsilon).
        let mut net = MlpParams::init(&[1, 1], OutputActivation::Identity, 0).unwrap();
        net.weights[0] = vec![0.0];
        let mut grads = Gradients::zeros_like(&net);
        grads.weights[0] = vec![1.0];
        let mut adam = AdamState::new(&net, 0.1);
        adam.epsilon = 1e-12;
        adam_step(&mut net, &grads, &mut adam).unwrap();
        assert!((net.weights[0][0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut net = small_net(8);
            let x = [0.2, 0.1, -0.3];
            let (_, cache) = net.forward(&x).unwrap();
            let grads = net.backward(&cache, &[0.7, -0.2], false).unwrap();
            let mut adam = AdamState::new(&net, 1e-3);
            adam_step(&mut net, &grads, &mut adam).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut net = small_net(2);
        let mut grads = Gradients::zeros_like(&net);
        grads.weights[0][0] = f64::NAN;
        let mut adam = AdamState::new(&net, 1e-3);
        assert!(adam_step(&mut net, &grads, &mut adam).is_err());
    }

    #[test]
    fn clip_global_norm_scales_down() {
        let net = small_net(4);
        let mut grads = Gradients::zeros_like(&net);
        grads.weights[0].iter_mut().for_each(|g| *g = 100.0);
        let pre = grads.clip_global_norm(10.0);
        assert!(pre > 10.0);
        assert!((grads.global_norm() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn fd_check_on_quadratic_loss_is_tight() {
        // Linear net with quadratic loss is analytically smooth; the check
        // should be near machine precision.
        let net = MlpParams::init(&[3, 2], OutputActivation::Identity, 21).unwrap();
        let x = [0.4, -0.2, 0.8];
        let target = [0.5, -0.5];
        let loss = |p: &MlpParams| {
            let (out, _) = p.forward(&x).unwrap();
            out.iter()
                .zip(target.iter())
                .map(|(y, t)| (y - t) * (y - t))
                .sum::<f64>()
        };
        let (out, cache) = net.forward(&x).unwrap();
        let upstream: Vec<f64> = out
            .iter()
            .zip(target.iter())
            .map(|(y, t)| 2.0 * (y - t))
            .collect();
        let analytic = net.backward(&cache, &upstream, false).unwrap();
        let report = finite_difference_check(&net, loss, &analytic, 1e-6);
        assert!(
            report.within_tolerance,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn fd_check_constant_loss() {
        let net = small_net(6);
        let analytic = Gradients::zeros_like(&net);
        let report = finite_difference_check(&net, |_| 3.5, &analytic, 1e-6);
        assert!(report.within_tolerance);
        assert_eq!(report.coords_checked, net.num_params());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = small_net(77);
        let restored = MlpParams::from_json(&net.to_json()).unwrap();
        assert_eq!(net.layer_dims, restored.layer_dims);
        for l in 0..net.num_layers() {
            for (a, b) in net.weights[l].iter().zip(restored.weights[l].iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in net.biases[l].iter().zip(restored.biases[l].iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_malformed_documents() {
        let net = small_net(1);
        let mut ckpt = net.to_checkpoint();
        ckpt.weights[0].pop();
        assert!(MlpParams::from_checkpoint(&ckpt).is_err());
        let mut ckpt = net.to_checkpoint();
        ckpt.format_version = 99;
        assert!(MlpParams::from_checkpoint(&ckpt).is_err());
    }
}
