//! Minimal dense neural substrate: affine layers, activations, and analytic
//! Jacobians with respect to both inputs and parameters.
//!
//! Parameters for a network are packed flat, layer by layer, each layer as a
//! row-major weight matrix followed by its bias. That ordering is shared with
//! the flattening convention in [`crate::numcore`] and the checkpoint format.

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng, Slot, StateVec, WeightLayout};
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => stable_sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at x; relu uses subgradient 0 at the kink.
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = stable_sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Overflow-free logistic sigmoid.
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic sigmoid of a state vector; outputs lie in (0, 1).
pub fn sigmoid_vec(x: &StateVec) -> StateVec {
    StateVec::new(x.values().iter().map(|&v| stable_sigmoid(v)).collect())
        .expect("sigmoid output is always finite")
}

/// Architecture of a dense feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Sizes from input to output; at least two entries.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub final_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, final_activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::param(
                "an MLP needs at least input and output sizes".to_string(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::param("zero-width layer".to_string()));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation,
            final_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total flat parameter count (weights + biases).
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Layout of the flat parameter vector: per layer, matrix then bias.
    pub fn layout(&self) -> WeightLayout {
        let mut slots = Vec::with_capacity(2 * self.n_layers());
        for w in self.layer_sizes.windows(2) {
            slots.push(Slot::Matrix {
                rows: w[1],
                cols: w[0],
            });
            slots.push(Slot::Vector { len: w[1] });
        }
        WeightLayout::new(slots)
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.final_activation
        } else {
            self.activation
        }
    }

    /// Seeded initial parameters: Glorot-uniform for saturating activations,
    /// He-scaled gaussians when the hidden activation is relu.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            match self.activation {
                Activation::Relu => {
                    let s = (2.0 / fan_in as f64).sqrt();
                    for _ in 0..fan_in * fan_out {
                        out.push(s * rng.normal());
                    }
                }
                _ => {
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for _ in 0..fan_in * fan_out {
                        out.push(rng.uniform_in(-s, s));
                    }
                }
            }
            out.extend(std::iter::repeat(0.0).take(fan_out));
        }
        out
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "mlp expects {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "mlp expects input dim {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }
}

/// Forward pass on raw slices; writes the output into `out`.
pub fn mlp_forward_flat(spec: &MlpSpec, params: &[f64], input: &[f64], out: &mut Vec<f64>) -> Result<()> {
    spec.check_params(params)?;
    spec.check_input(input)?;
    let mut a = input.to_vec();
    let mut offset = 0;
    for layer in 0..spec.n_layers() {
        let (n_in, n_out) = (spec.layer_sizes[layer], spec.layer_sizes[layer + 1]);
        let w = &params[offset..offset + n_in * n_out];
        let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let act = spec.activation_for(layer);
        let mut next = vec![0.0; n_out];
        for i in 0..n_out {
            let mut z = b[i];
            let row = &w[i * n_in..(i + 1) * n_in];
            for (wij, aj) in row.iter().zip(&a) {
                z += wij * aj;
            }
            next[i] = act.apply(z);
        }
        a = next;
    }
    out.clear();
    out.extend_from_slice(&a);
    Ok(())
}

/// Forward pass: alternating affine + activation, final activation on the last layer.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &StateVec) -> Result<StateVec> {
    let mut out = Vec::new();
    mlp_forward_flat(spec, params, input.values(), &mut out)?;
    StateVec::new(out)
}

/// Forward trace kept for Jacobian assembly.
struct Trace {
    /// Post-activation values per layer, a[0] = input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values z[l] for layer l (1-based shifted by one).
    pre: Vec<Vec<f64>>,
}

fn forward_trace(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Trace {
    let mut acts = vec![input.to_vec()];
    let mut pre = Vec::with_capacity(spec.n_layers());
    let mut offset = 0;
    for layer in 0..spec.n_layers() {
        let (n_in, n_out) = (spec.layer_sizes[layer], spec.layer_sizes[layer + 1]);
        let w = &params[offset..offset + n_in * n_out];
        let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let act = spec.activation_for(layer);
        let a = acts.last().unwrap();
        let mut z = vec![0.0; n_out];
        for i in 0..n_out {
            let mut acc = b[i];
            let row = &w[i * n_in..(i + 1) * n_in];
            for (wij, aj) in row.iter().zip(a) {
                acc += wij * aj;
            }
            z[i] = acc;
        }
        let a_next: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
        pre.push(z);
        acts.push(a_next);
    }
    Trace { acts, pre }
}

/// Exact analytic Jacobians of the network output with respect to the input
/// and the flat parameter vector, by the layerwise chain rule.
pub fn mlp_jacobians(spec: &MlpSpec, params: &[f64], input: &StateVec) -> Result<(Matrix, Matrix)> {
    spec.check_params(params)?;
    spec.check_input(input.values())?;
    let n_layers = spec.n_layers();
    let out_dim = spec.output_dim();
    let trace = forward_trace(spec, params, input.values());

    // Layer parameter offsets into the flat vector.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for layer in 0..n_layers {
        offsets.push(off);
        let (n_in, n_out) = (spec.layer_sizes[layer], spec.layer_sizes[layer + 1]);
        off += n_in * n_out + n_out;
    }

    // g = d out / d z_layer, built backward from the last layer.
    // Start with g_L = diag(final_act'(z_L)).
    let mut g = Matrix::zeros(out_dim, out_dim);
    for i in 0..out_dim {
        g.set(i, i, spec.final_activation.deriv(trace.pre[n_layers - 1][i]));
    }

    let mut j_params = Matrix::zeros(out_dim, spec.param_count());
    let mut j_input = Matrix::zeros(out_dim, spec.input_dim());

    for layer in (0..n_layers).rev() {
        let (n_in, n_out) = (spec.layer_sizes[layer], spec.layer_sizes[layer + 1]);
        let a_prev = &trace.acts[layer];
        let w_off = offsets[layer];
        let b_off = w_off + n_in * n_out;

        // d out / d W[i][j] = g[:, i] * a_prev[j]; d out / d b[i] = g[:, i].
        for r in 0..out_dim {
            for i in 0..n_out {
                let gri = g.get(r, i);
                if gri == 0.0 {
                    continue;
                }
                let row = &mut j_params.data_mut()[r * spec.param_count()..];
                for (j, aj) in a_prev.iter().enumerate() {
                    row[w_off + i * n_in + j] += gri * aj;
                }
                row[b_off + i] += gri;
            }
        }

        // Propagate g to the previous layer: g_prev = g * W * diag(act'(z_prev)).
        let w = &params[w_off..w_off + n_in * n_out];
        let mut g_prev = Matrix::zeros(out_dim, n_in);
        for r in 0..out_dim {
            for i in 0..n_out {
                let gri = g.get(r, i);
                if gri == 0.0 {
                    continue;
                }
                let wrow = &w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    let v = g_prev.get(r, j) + gri * wrow[j];
                    g_prev.set(r, j, v);
                }
            }
        }
        if layer == 0 {
            j_input = g_prev;
        } else {
            let act = spec.activation_for(layer - 1);
            let z_prev = &trace.pre[layer - 1];
            for r in 0..out_dim {
                for j in 0..n_in {
                    let v = g_prev.get(r, j) * act.deriv(z_prev[j]);
                    g_prev.set(r, j, v);
                }
            }
            g = g_prev;
        }
    }

    Ok((j_input, j_params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rand_normal;

    /// Independent straightforward forward pass used as a dual-implementation oracle.
    fn naive_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = input.to_vec();
        let mut off = 0;
        for l in 0..spec.layer_sizes.len() - 1 {
            let (ni, no) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let mut next = vec![0.0; no];
            for i in 0..no {
                let mut z = params[off + ni * no + i];
                for j in 0..ni {
                    z += params[off + i * ni + j] * a[j];
                }
                next[i] = if l == spec.layer_sizes.len() - 2 {
                    spec.final_activation.apply(z)
                } else {
                    spec.activation.apply(z)
                };
            }
            off += ni * no + no;
            a = next;
        }
        a
    }

    fn spec(sizes: &[usize], act: Activation, fin: Activation) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), act, fin).unwrap()
    }

    #[test]
    fn identity_weights_pass_through() {
        let s = spec(&[3, 3], Activation::Identity, Activation::Identity);
        // W = I, b = 0.
        let mut params = vec![0.0; s.param_count()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let x = StateVec::new(vec![0.5, -1.0, 2.0]).unwrap();
        let y = mlp_forward(&s, &params, &x).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn zero_weights_output_bias() {
        let s = spec(&[2, 3], Activation::Identity, Activation::Identity);
        let mut params = vec![0.0; s.param_count()];
        params[6] = 1.0;
        params[7] = 2.0;
        params[8] = 3.0;
        let y = mlp_forward(&s, &params, &StateVec::new(vec![9.0, -4.0]).unwrap()).unwrap();
        assert_eq!(y.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = Rng::seed_from(11);
        let s = spec(&[1, 4, 1], Activation::Tanh, Activation::Identity);
        let params = rand_normal(&mut rng, s.param_count(), 0.0, 1.0).unwrap();
        let x = StateVec::new(vec![0.37]).unwrap();
        let got = mlp_forward(&s, &params, &x).unwrap();
        let want = naive_forward(&s, &params, x.values());
        assert!((got.values()[0] - want[0]).abs() < 1e-12);
    }

    #[test]
    fn param_count_and_layout_agree() {
        let s = spec(&[2, 8, 3], Activation::Tanh, Activation::Identity);
        assert_eq!(s.param_count(), 2 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(s.layout().total_len(), s.param_count());
    }

    #[test]
    fn param_length_mismatch_is_shape_error() {
        let s = spec(&[2, 2], Activation::Tanh, Activation::Tanh);
        let x = StateVec::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            mlp_forward(&s, &[1.0, 2.0], &x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn single_affine_layer_input_jacobian_is_w() {
        let s = spec(&[2, 2], Activation::Identity, Activation::Identity);
        let params = vec![1.0, 2.0, 3.0, 4.0, 0.1, 0.2];
        let x = StateVec::new(vec![0.3, -0.7]).unwrap();
        let (ji, _) = mlp_jacobians(&s, &params, &x).unwrap();
        assert_eq!(ji.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sigmoid_layer_slope_at_zero() {
        let s = spec(&[2, 2], Activation::Sigmoid, Activation::Sigmoid);
        let params = vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0];
        let x = StateVec::zeros(2);
        let (ji, _) = mlp_jacobians(&s, &params, &x).unwrap();
        for (got, w) in ji.data().iter().zip(&params[..4]) {
            assert!((got - 0.25 * w).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = Rng::seed_from(99);
        for &(act, fin) in &[
            (Activation::Tanh, Activation::Identity),
            (Activation::Sigmoid, Activation::Tanh),
            (Activation::Relu, Activation::Identity),
        ] {
            for _ in 0..20 {
                let s = spec(&[2, 8, 3], act, fin);
                let params = rand_normal(&mut rng, s.param_count(), 0.0, 0.8).unwrap();
                let x_raw = rand_normal(&mut rng, 2, 0.0, 1.0).unwrap();
                let x = StateVec::new(x_raw.clone()).unwrap();
                let (ji, jp) = mlp_jacobians(&s, &params, &x).unwrap();

                let h = 1e-6;
                // Input jacobian.
                for j in 0..2 {
                    let mut xp = x_raw.clone();
                    let mut xm = x_raw.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fp = naive_forward(&s, &params, &xp);
                    let fm = naive_forward(&s, &params, &xm);
                    for r in 0..3 {
                        let fd = (fp[r] - fm[r]) / (2.0 * h);
                        let a = ji.get(r, j);
                        let scale = fd.abs().max(a.abs()).max(1e-3);
                        assert!(
                            (a - fd).abs() / scale < 1e-5,
                            "d_out/d_input[{r}][{j}]: {a} vs {fd}"
                        );
                    }
                }
                // Parameter jacobian on a random subset of coordinates.
                for _ in 0..12 {
                    let c = rng.below(s.param_count());
                    let mut pp = params.clone();
                    let mut pm = params.clone();
                    pp[c] += h;
                    pm[c] -= h;
                    let fp = naive_forward(&s, &pp, x.values());
                    let fm = naive_forward(&s, &pm, x.values());
                    for r in 0..3 {
                        let fd = (fp[r] - fm[r]) / (2.0 * h);
                        let a = jp.get(r, c);
                        let scale = fd.abs().max(a.abs()).max(1e-3);
                        assert!(
                            (a - fd).abs() / scale < 1e-5,
                            "d_out/d_params[{r}][{c}]: {a} vs {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        let x = StateVec::new(vec![0.0, 1.0, -800.0, 800.0]).unwrap();
        let y = sigmoid_vec(&x);
        assert_eq!(y.values()[0], 0.5);
        assert!((y.values()[1] - 0.7310585786300049).abs() < 1e-10);
        assert!(y.values()[2] >= 0.0 && y.values()[2] < 1e-300);
        assert!((y.values()[3] - 1.0).abs() < 1e-15);
    }
}
