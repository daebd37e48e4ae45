//! Assembly of the coupled system h = (f, g) on the augmented state
//! z = (x, theta), with open-loop initialization gamma and optional
//! closed-loop feedback.
//!
//! Flat buffer convention: z = [x | theta], meta parameters
//! mu = [gamma params | g params | shared params]. Only the g and shared
//! slices enter h directly; gamma only shapes the initial condition, so its
//! gradient arrives through the chain rule at t = 0 (see
//! [`CoupledSystem::gamma_vjp`]).

use crate::error::{Error, Result};
use crate::netblocks::{mlp_forward_flat, mlp_jacobians, Activation, MlpSpec};
use crate::numcore::{
    ControlWeights, Matrix, MetaParams, Rng, Slot, StateVec, WeightLayout,
};
use serde::{Deserialize, Serialize};

/// Equation of motion f for the activation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FSpec {
    /// f(x, theta) = mlp(x) with theta as the network's flat parameters.
    Mlp(MlpSpec),
    /// f = -theta (constant drift; the open-loop injectivity counterexample).
    NegTheta,
    /// f = theta (constant drift; half of the 2-D oscillator).
    ThetaOnly,
    /// f = rho(Theta x) with Theta a square matrix (fast-synapse dynamics).
    Hebbian { rho: Activation },
    /// Scalar Lienard form f = c (x - x^3/3 - theta) with shared parameter c.
    VanDerPol,
    /// f = Theta x with Theta a square matrix held constant along the flow.
    LatentLinear,
}

/// Controller g for the weight velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GMode {
    /// Open loop: dtheta/dt = 0.
    None,
    /// dtheta/dt = mlp(concat(theta, x)); parameters live in mu.
    Mlp(MlpSpec),
    /// dtheta/dt = gain (.) x x^T with a learned elementwise gain matrix.
    Hebbian,
    /// dtheta/dt = -x (the 2-D oscillator feedback; no parameters).
    NegX,
    /// dtheta/dt = x / c, sharing c with the Van der Pol equation of motion.
    VdpFeedback,
}

/// Initial-condition map theta(0) = gamma(input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaMode {
    /// theta(0) = mlp(input); optionally scattered into a sparse theta.
    Mlp {
        spec: MlpSpec,
        /// When present, mlp output i lands at theta index scatter[i], rest 0.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scatter: Option<Vec<usize>>,
    },
    /// theta(0) is itself a learned vector, ignoring the input.
    Constant,
    /// theta(0) = input verbatim (requires matching lengths).
    Identity,
    /// theta(0) is a fixed, untrained constant.
    Fixed { values: Vec<f64> },
}

/// Full description of one coupled system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub x_dim: usize,
    pub f: FSpec,
    pub g: GMode,
    pub gamma: GammaMode,
    /// Input dimension of gamma; defaults to x_dim (gamma of x(0)), but tasks
    /// may condition on a separate embedding (e.g. autoencoder inputs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_input_dim: Option<usize>,
}

/// Slice boundaries of the flat meta-parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetaSlices {
    pub gamma_len: usize,
    pub g_len: usize,
    pub shared_len: usize,
}

impl MetaSlices {
    pub fn total(&self) -> usize {
        self.gamma_len + self.g_len + self.shared_len
    }

    /// Length of the part of mu that enters h directly (g + shared).
    pub fn h_len(&self) -> usize {
        self.g_len + self.shared_len
    }
}

/// A validated coupled system ready for evaluation.
#[derive(Debug, Clone)]
pub struct CoupledSystem {
    spec: DynamicsSpec,
    theta_len: usize,
    theta_layout: WeightLayout,
    slices: MetaSlices,
}

impl CoupledSystem {
    pub fn new(spec: DynamicsSpec) -> Result<Self> {
        let d = spec.x_dim;
        if d == 0 {
            return Err(Error::param("x_dim must be positive".to_string()));
        }
        let (theta_len, theta_layout) = match &spec.f {
            FSpec::Mlp(m) => {
                if m.input_dim() != d || m.output_dim() != d {
                    return Err(Error::shape(format!(
                        "f mlp must map x_dim {d} to itself, got {} -> {}",
                        m.input_dim(),
                        m.output_dim()
                    )));
                }
                (m.param_count(), m.layout())
            }
            FSpec::NegTheta | FSpec::ThetaOnly => (d, WeightLayout::vector(d)),
            FSpec::Hebbian { .. } => (d * d, WeightLayout::square(d)),
            FSpec::VanDerPol => {
                if d != 1 {
                    return Err(Error::shape("van der pol is scalar (x_dim = 1)".to_string()));
                }
                (1, WeightLayout::vector(1))
            }
            FSpec::LatentLinear => (d * d, WeightLayout::square(d)),
        };

        match &spec.g {
            GMode::None => {}
            GMode::Mlp(m) => {
                if m.input_dim() != theta_len + d {
                    return Err(Error::shape(format!(
                        "g mlp input must be len(theta)+x_dim = {}, got {}",
                        theta_len + d,
                        m.input_dim()
                    )));
                }
                if m.output_dim() != theta_len {
                    return Err(Error::shape(format!(
                        "g mlp output must be len(theta) = {}, got {}",
                        theta_len,
                        m.output_dim()
                    )));
                }
            }
            GMode::Hebbian => {
                if theta_len != d * d {
                    return Err(Error::shape(
                        "hebbian feedback needs a square theta matrix".to_string(),
                    ));
                }
            }
            GMode::NegX => {
                if theta_len != d {
                    return Err(Error::shape(
                        "neg-x feedback needs len(theta) == x_dim".to_string(),
                    ));
                }
            }
            GMode::VdpFeedback => {
                if !matches!(spec.f, FSpec::VanDerPol) {
                    return Err(Error::Unsupported(
                        "vdp feedback only pairs with the van der pol equation of motion"
                            .to_string(),
                    ));
                }
            }
        }

        let gamma_input_dim = spec.gamma_input_dim.unwrap_or(d);
        let gamma_len = match &spec.gamma {
            GammaMode::Mlp { spec: m, scatter } => {
                if m.input_dim() != gamma_input_dim {
                    return Err(Error::shape(format!(
                        "gamma mlp input must be {gamma_input_dim}, got {}",
                        m.input_dim()
                    )));
                }
                match scatter {
                    None => {
                        if m.output_dim() != theta_len {
                            return Err(Error::shape(format!(
                                "gamma mlp output must be len(theta) = {theta_len}, got {}",
                                m.output_dim()
                            )));
                        }
                    }
                    Some(idx) => {
                        if m.output_dim() != idx.len() {
                            return Err(Error::shape(
                                "gamma scatter length must match mlp output".to_string(),
                            ));
                        }
                        let mut seen = vec![false; theta_len];
                        for &i in idx {
                            if i >= theta_len || seen[i] {
                                return Err(Error::shape(
                                    "gamma scatter indices must be distinct and in range"
                                        .to_string(),
                                ));
                            }
                            seen[i] = true;
                        }
                    }
                }
                m.param_count()
            }
            GammaMode::Constant => theta_len,
            GammaMode::Identity => {
                if gamma_input_dim != theta_len {
                    return Err(Error::shape(format!(
                        "identity gamma needs input dim == len(theta) = {theta_len}"
                    )));
                }
                0
            }
            GammaMode::Fixed { values } => {
                if values.len() != theta_len {
                    return Err(Error::shape(format!(
                        "fixed gamma needs {theta_len} values, got {}",
                        values.len()
                    )));
                }
                0
            }
        };

        let g_len = match &spec.g {
            GMode::Mlp(m) => m.param_count(),
            GMode::Hebbian => d * d,
            _ => 0,
        };
        let shared_len = match spec.f {
            FSpec::VanDerPol => 1,
            _ => 0,
        };

        Ok(CoupledSystem {
            spec,
            theta_len,
            theta_layout,
            slices: MetaSlices {
                gamma_len,
                g_len,
                shared_len,
            },
        })
    }

    pub fn spec(&self) -> &DynamicsSpec {
        &self.spec
    }

    pub fn x_dim(&self) -> usize {
        self.spec.x_dim
    }

    pub fn theta_len(&self) -> usize {
        self.theta_len
    }

    pub fn theta_layout(&self) -> &WeightLayout {
        &self.theta_layout
    }

    /// Flat dimension of the augmented state z = (x, theta).
    pub fn z_dim(&self) -> usize {
        self.spec.x_dim + self.theta_len
    }

    pub fn meta_slices(&self) -> MetaSlices {
        self.slices
    }

    pub fn n_meta(&self) -> usize {
        self.slices.total()
    }

    pub fn gamma_input_dim(&self) -> usize {
        self.spec.gamma_input_dim.unwrap_or(self.spec.x_dim)
    }

    fn meta_layout(&self) -> WeightLayout {
        let mut slots = Vec::new();
        if self.slices.gamma_len > 0 {
            slots.push(Slot::Vector {
                len: self.slices.gamma_len,
            });
        }
        if self.slices.g_len > 0 {
            slots.push(Slot::Vector {
                len: self.slices.g_len,
            });
        }
        if self.slices.shared_len > 0 {
            slots.push(Slot::Vector {
                len: self.slices.shared_len,
            });
        }
        WeightLayout::new(slots)
    }

    /// Seeded default initialization of the meta parameters.
    pub fn meta_init(&self, rng: &mut Rng) -> MetaParams {
        let mut values = Vec::with_capacity(self.n_meta());
        match &self.spec.gamma {
            GammaMode::Mlp { spec: m, .. } => values.extend(m.init_params(rng)),
            GammaMode::Constant => match &self.spec.f {
                // A learned constant theta0 for an MLP field should start like
                // a freshly initialized network, not at zero.
                FSpec::Mlp(m) => values.extend(m.init_params(rng)),
                _ => values.extend((0..self.theta_len).map(|_| 0.1 * rng.normal())),
            },
            GammaMode::Identity | GammaMode::Fixed { .. } => {}
        }
        match &self.spec.g {
            GMode::Mlp(m) => values.extend(m.init_params(rng)),
            GMode::Hebbian => {
                values.extend((0..self.spec.x_dim * self.spec.x_dim).map(|_| 0.1 * rng.normal()))
            }
            _ => {}
        }
        if self.slices.shared_len > 0 {
            values.push(1.0);
        }
        MetaParams::new(values, self.meta_layout()).expect("layout matches by construction")
    }

    fn check_meta(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.n_meta() {
            return Err(Error::shape(format!(
                "expected {} meta parameters, got {}",
                self.n_meta(),
                mu.len()
            )));
        }
        Ok(())
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.z_dim() {
            return Err(Error::shape(format!(
                "expected augmented dim {}, got {}",
                self.z_dim(),
                z.len()
            )));
        }
        Ok(())
    }

    fn gamma_slice<'a>(&self, mu: &'a [f64]) -> &'a [f64] {
        &mu[..self.slices.gamma_len]
    }

    fn g_slice<'a>(&self, mu: &'a [f64]) -> &'a [f64] {
        &mu[self.slices.gamma_len..self.slices.gamma_len + self.slices.g_len]
    }

    fn shared_slice<'a>(&self, mu: &'a [f64]) -> &'a [f64] {
        &mu[self.slices.gamma_len + self.slices.g_len..]
    }

    // -----------------------------------------------------------------
    // gamma: initial control weights
    // -----------------------------------------------------------------

    /// theta(0) = gamma(input). For `Constant` the learned theta0 is returned
    /// and the input ignored; for `Identity` the input is reinterpreted as
    /// weights.
    pub fn gamma_init(&self, mu: &MetaParams, input: &StateVec) -> Result<ControlWeights> {
        self.check_meta(mu.values())?;
        let values = match &self.spec.gamma {
            GammaMode::Mlp { spec: m, scatter } => {
                let mut out = Vec::new();
                mlp_forward_flat(m, self.gamma_slice(mu.values()), input.values(), &mut out)?;
                match scatter {
                    None => out,
                    Some(idx) => {
                        let mut theta = vec![0.0; self.theta_len];
                        for (v, &i) in out.iter().zip(idx) {
                            theta[i] = *v;
                        }
                        theta
                    }
                }
            }
            GammaMode::Constant => self.gamma_slice(mu.values()).to_vec(),
            GammaMode::Identity => {
                if input.dim() != self.theta_len {
                    return Err(Error::shape(format!(
                        "identity gamma: input dim {} vs theta len {}",
                        input.dim(),
                        self.theta_len
                    )));
                }
                input.values().to_vec()
            }
            GammaMode::Fixed { values } => values.clone(),
        };
        ControlWeights::new(values, self.theta_layout.clone())
    }

    /// Chain rule through gamma: accumulates (d theta0 / d mu_gamma)^T *
    /// grad_theta0 into the gamma slice of `grad_mu`.
    pub fn gamma_vjp(
        &self,
        mu: &MetaParams,
        input: &StateVec,
        grad_theta0: &[f64],
        grad_mu: &mut [f64],
    ) -> Result<()> {
        self.check_meta(mu.values())?;
        if grad_theta0.len() != self.theta_len {
            return Err(Error::shape(format!(
                "grad_theta0 length {} vs theta len {}",
                grad_theta0.len(),
                self.theta_len
            )));
        }
        if grad_mu.len() != self.n_meta() {
            return Err(Error::shape("grad_mu length mismatch".to_string()));
        }
        match &self.spec.gamma {
            GammaMode::Mlp { spec: m, scatter } => {
                let (_, j_params) = mlp_jacobians(
                    m,
                    self.gamma_slice(mu.values()),
                    &StateVec::new(input.values().to_vec())?,
                )?;
                // Rows of j_params correspond to mlp outputs; with a scatter
                // the output feeds only the selected theta coordinates.
                let grad_out: Vec<f64> = match scatter {
                    None => grad_theta0.to_vec(),
                    Some(idx) => idx.iter().map(|&i| grad_theta0[i]).collect(),
                };
                let np = m.param_count();
                for (r, go) in grad_out.iter().enumerate() {
                    if *go == 0.0 {
                        continue;
                    }
                    for c in 0..np {
                        grad_mu[c] += go * j_params.get(r, c);
                    }
                }
            }
            GammaMode::Constant => {
                for (g, d) in grad_mu[..self.slices.gamma_len]
                    .iter_mut()
                    .zip(grad_theta0)
                {
                    *g += d;
                }
            }
            GammaMode::Identity | GammaMode::Fixed { .. } => {}
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // h = (f, g): joint right-hand side
    // -----------------------------------------------------------------

    /// Evaluate dz/dt = h(z, t) on flat buffers.
    pub fn rhs_flat(&self, mu: &[f64], _t: f64, z: &[f64], dz: &mut [f64]) {
        let d = self.spec.x_dim;
        let (x, theta) = z.split_at(d);
        let (dx, dtheta) = dz.split_at_mut(d);

        match &self.spec.f {
            FSpec::Mlp(m) => {
                let mut out = Vec::new();
                mlp_forward_flat(m, theta, x, &mut out).expect("validated shapes");
                dx.copy_from_slice(&out);
            }
            FSpec::NegTheta => {
                for (o, t) in dx.iter_mut().zip(theta) {
                    *o = -t;
                }
            }
            FSpec::ThetaOnly => dx.copy_from_slice(theta),
            FSpec::Hebbian { rho } => {
                for i in 0..d {
                    let row = &theta[i * d..(i + 1) * d];
                    let mut s = 0.0;
                    for (w, xv) in row.iter().zip(x) {
                        s += w * xv;
                    }
                    dx[i] = rho.apply(s);
                }
            }
            FSpec::VanDerPol => {
                let c = self.shared_slice(mu)[0];
                dx[0] = c * (x[0] - x[0] * x[0] * x[0] / 3.0 - theta[0]);
            }
            FSpec::LatentLinear => {
                for i in 0..d {
                    let row = &theta[i * d..(i + 1) * d];
                    let mut s = 0.0;
                    for (w, xv) in row.iter().zip(x) {
                        s += w * xv;
                    }
                    dx[i] = s;
                }
            }
        }

        match &self.spec.g {
            GMode::None => dtheta.fill(0.0),
            GMode::Mlp(m) => {
                let mut input = Vec::with_capacity(self.theta_len + d);
                input.extend_from_slice(theta);
                input.extend_from_slice(x);
                let mut out = Vec::new();
                mlp_forward_flat(m, self.g_slice(mu), &input, &mut out)
                    .expect("validated shapes");
                dtheta.copy_from_slice(&out);
            }
            GMode::Hebbian => {
                let gain = self.g_slice(mu);
                for i in 0..d {
                    for j in 0..d {
                        dtheta[i * d + j] = gain[i * d + j] * x[i] * x[j];
                    }
                }
            }
            GMode::NegX => {
                for (o, xv) in dtheta.iter_mut().zip(x) {
                    *o = -xv;
                }
            }
            GMode::VdpFeedback => {
                let c = self.shared_slice(mu)[0];
                dtheta[0] = x[0] / c;
            }
        }
    }

    /// Typed wrapper over [`Self::rhs_flat`]: the coupled time derivative
    /// (dx/dt, dtheta/dt) at the given augmented state.
    pub fn coupled_rhs(
        &self,
        mu: &MetaParams,
        z: &crate::numcore::AugmentedState,
    ) -> Result<(StateVec, ControlWeights)> {
        self.check_meta(mu.values())?;
        let flat = z.to_flat();
        self.check_z(&flat)?;
        let mut dz = vec![0.0; flat.len()];
        self.rhs_flat(mu.values(), z.t, &flat, &mut dz);
        let dx = StateVec::new(dz[..self.spec.x_dim].to_vec())?;
        let dtheta =
            ControlWeights::new(dz[self.spec.x_dim..].to_vec(), self.theta_layout.clone())?;
        Ok((dx, dtheta))
    }

    /// A borrowing closure suitable for the integrators.
    pub fn rhs_closure<'a>(
        &'a self,
        mu: &'a MetaParams,
    ) -> impl FnMut(f64, &[f64], &mut [f64]) + 'a {
        move |t, z, dz| self.rhs_flat(mu.values(), t, z, dz)
    }

    // -----------------------------------------------------------------
    // Jacobians and vector-Jacobian products
    // -----------------------------------------------------------------

    /// Dense block Jacobian dh/dz of shape (z_dim, z_dim).
    pub fn jac_z(&self, mu: &[f64], _t: f64, z: &[f64]) -> Result<Matrix> {
        self.check_meta(mu)?;
        self.check_z(z)?;
        let d = self.spec.x_dim;
        let k = self.theta_len;
        let n = d + k;
        let (x, theta) = z.split_at(d);
        let mut jac = Matrix::zeros(n, n);

        match &self.spec.f {
            FSpec::Mlp(m) => {
                let (ji, jp) = mlp_jacobians(m, theta, &StateVec::new(x.to_vec())?)?;
                for r in 0..d {
                    for c in 0..d {
                        jac.set(r, c, ji.get(r, c));
                    }
                    for c in 0..k {
                        jac.set(r, d + c, jp.get(r, c));
                    }
                }
            }
            FSpec::NegTheta => {
                for r in 0..d {
                    jac.set(r, d + r, -1.0);
                }
            }
            FSpec::ThetaOnly => {
                for r in 0..d {
                    jac.set(r, d + r, 1.0);
                }
            }
            FSpec::Hebbian { rho } => {
                for i in 0..d {
                    let row = &theta[i * d..(i + 1) * d];
                    let mut s = 0.0;
                    for (w, xv) in row.iter().zip(x) {
                        s += w * xv;
                    }
                    let dv = rho.deriv(s);
                    for j in 0..d {
                        jac.set(i, j, dv * row[j]);
                        jac.set(i, d + i * d + j, dv * x[j]);
                    }
                }
            }
            FSpec::VanDerPol => {
                let c = self.shared_slice(mu)[0];
                jac.set(0, 0, c * (1.0 - x[0] * x[0]));
                jac.set(0, 1, -c);
            }
            FSpec::LatentLinear => {
                for i in 0..d {
                    for j in 0..d {
                        jac.set(i, j, theta[i * d + j]);
                        jac.set(i, d + i * d + j, x[j]);
                    }
                }
            }
        }

        match &self.spec.g {
            GMode::None => {}
            GMode::Mlp(m) => {
                let mut input = Vec::with_capacity(k + d);
                input.extend_from_slice(theta);
                input.extend_from_slice(x);
                let (ji, _) = mlp_jacobians(m, self.g_slice(mu), &StateVec::new(input)?)?;
                // g input order is (theta, x).
                for r in 0..k {
                    for c in 0..k {
                        jac.set(d + r, d + c, ji.get(r, c));
                    }
                    for c in 0..d {
                        jac.set(d + r, c, ji.get(r, k + c));
                    }
                }
            }
            GMode::Hebbian => {
                let gain = self.g_slice(mu);
                for i in 0..d {
                    for j in 0..d {
                        let r = d + i * d + j;
                        let gij = gain[i * d + j];
                        // d(g_ij)/d(x_i) += gij * x_j ; d(g_ij)/d(x_j) += gij * x_i
                        let v = jac.get(r, i) + gij * x[j];
                        jac.set(r, i, v);
                        let v = jac.get(r, j) + gij * x[i];
                        jac.set(r, j, v);
                    }
                }
            }
            GMode::NegX => {
                for r in 0..k {
                    jac.set(d + r, r, -1.0);
                }
            }
            GMode::VdpFeedback => {
                let c = self.shared_slice(mu)[0];
                jac.set(1, 0, 1.0 / c);
            }
        }

        Ok(jac)
    }

    /// Dense Jacobian dh/dmu of shape (z_dim, n_meta). Gamma columns are zero
    /// because gamma never enters h.
    pub fn jac_mu(&self, mu: &[f64], _t: f64, z: &[f64]) -> Result<Matrix> {
        self.check_meta(mu)?;
        self.check_z(z)?;
        let d = self.spec.x_dim;
        let k = self.theta_len;
        let (x, theta) = z.split_at(d);
        let mut jac = Matrix::zeros(d + k, self.n_meta());
        let g_off = self.slices.gamma_len;
        let shared_off = g_off + self.slices.g_len;

        match &self.spec.g {
            GMode::Mlp(m) => {
                let mut input = Vec::with_capacity(k + d);
                input.extend_from_slice(theta);
                input.extend_from_slice(x);
                let (_, jp) = mlp_jacobians(m, self.g_slice(mu), &StateVec::new(input)?)?;
                for r in 0..k {
                    for c in 0..m.param_count() {
                        jac.set(d + r, g_off + c, jp.get(r, c));
                    }
                }
            }
            GMode::Hebbian => {
                for i in 0..d {
                    for j in 0..d {
                        jac.set(d + i * d + j, g_off + i * d + j, x[i] * x[j]);
                    }
                }
            }
            GMode::VdpFeedback => {
                let c = self.shared_slice(mu)[0];
                jac.set(1, shared_off, -x[0] / (c * c));
            }
            GMode::None | GMode::NegX => {}
        }

        if let FSpec::VanDerPol = self.spec.f {
            jac.set(0, shared_off, x[0] - x[0] * x[0] * x[0] / 3.0 - theta[0]);
        }

        Ok(jac)
    }

    /// out = a^T dh/dz without forming the dense Jacobian.
    pub fn vjp_z(&self, mu: &[f64], _t: f64, z: &[f64], a: &[f64], out: &mut [f64]) {
        let d = self.spec.x_dim;
        let k = self.theta_len;
        let (x, theta) = z.split_at(d);
        let (a_x, a_theta) = a.split_at(d);
        out.fill(0.0);
        let (out_x, out_theta) = out.split_at_mut(d);

        match &self.spec.f {
            FSpec::Mlp(m) => {
                let (ji, jp) = mlp_jacobians(m, theta, &StateVec::new(x.to_vec()).unwrap())
                    .expect("validated shapes");
                ji.matvec_transpose_into(a_x, out_x);
                jp.matvec_transpose_into(a_x, out_theta);
            }
            FSpec::NegTheta => {
                for (o, av) in out_theta.iter_mut().zip(a_x) {
                    *o -= av;
                }
            }
            FSpec::ThetaOnly => {
                for (o, av) in out_theta.iter_mut().zip(a_x) {
                    *o += av;
                }
            }
            FSpec::Hebbian { rho } => {
                // w = diag(rho'(theta x)) a_x; out_x += Theta^T w; out_theta += w x^T.
                let mut w = vec![0.0; d];
                for i in 0..d {
                    let row = &theta[i * d..(i + 1) * d];
                    let mut s = 0.0;
                    for (wij, xv) in row.iter().zip(x) {
                        s += wij * xv;
                    }
                    w[i] = rho.deriv(s) * a_x[i];
                }
                for i in 0..d {
                    let wi = w[i];
                    if wi == 0.0 {
                        continue;
                    }
                    let row = &theta[i * d..(i + 1) * d];
                    for j in 0..d {
                        out_x[j] += wi * row[j];
                        out_theta[i * d + j] += wi * x[j];
                    }
                }
            }
            FSpec::VanDerPol => {
                let c = self.shared_slice(mu)[0];
                out_x[0] += a_x[0] * c * (1.0 - x[0] * x[0]);
                out_theta[0] += a_x[0] * (-c);
            }
            FSpec::LatentLinear => {
                for i in 0..d {
                    let ai = a_x[i];
                    if ai == 0.0 {
                        continue;
                    }
                    let row = &theta[i * d..(i + 1) * d];
                    for j in 0..d {
                        out_x[j] += ai * row[j];
                        out_theta[i * d + j] += ai * x[j];
                    }
                }
            }
        }

        match &self.spec.g {
            GMode::None => {}
            GMode::Mlp(m) => {
                let mut input = Vec::with_capacity(k + d);
                input.extend_from_slice(theta);
                input.extend_from_slice(x);
                let (ji, _) = mlp_jacobians(m, self.g_slice(mu), &StateVec::new(input).unwrap())
                    .expect("validated shapes");
                let mut acc = vec![0.0; k + d];
                ji.matvec_transpose_into(a_theta, &mut acc);
                for j in 0..k {
                    out_theta[j] += acc[j];
                }
                for j in 0..d {
                    out_x[j] += acc[k + j];
                }
            }
            GMode::Hebbian => {
                let gain = self.g_slice(mu);
                // d(g_ij)/dx_k = gain_ij (delta_ik x_j + x_i delta_jk).
                for i in 0..d {
                    for j in 0..d {
                        let m = a_theta[i * d + j] * gain[i * d + j];
                        if m == 0.0 {
                            continue;
                        }
                        out_x[i] += m * x[j];
                        out_x[j] += m * x[i];
                    }
                }
            }
            GMode::NegX => {
                for j in 0..d {
                    out_x[j] -= a_theta[j];
                }
            }
            GMode::VdpFeedback => {
                let c = self.shared_slice(mu)[0];
                out_x[0] += a_theta[0] / c;
            }
        }
    }

    /// out = a^T dh/dmu restricted to the h-dependent slice of mu
    /// (g params followed by shared params); `out.len() == slices.h_len()`.
    pub fn vjp_mu_h(&self, mu: &[f64], _t: f64, z: &[f64], a: &[f64], out: &mut [f64]) {
        let d = self.spec.x_dim;
        let k = self.theta_len;
        let (x, theta) = z.split_at(d);
        let (a_x, a_theta) = a.split_at(d);
        out.fill(0.0);
        let g_len = self.slices.g_len;

        match &self.spec.g {
            GMode::None | GMode::NegX => {}
            GMode::Mlp(m) => {
                let mut input = Vec::with_capacity(k + d);
                input.extend_from_slice(theta);
                input.extend_from_slice(x);
                let (_, jp) = mlp_jacobians(m, self.g_slice(mu), &StateVec::new(input).unwrap())
                    .expect("validated shapes");
                jp.matvec_transpose_into(a_theta, &mut out[..g_len]);
            }
            GMode::Hebbian => {
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = a_theta[i * d + j] * x[i] * x[j];
                    }
                }
            }
            GMode::VdpFeedback => {
                let c = self.shared_slice(mu)[0];
                out[g_len] += a_theta[0] * (-x[0] / (c * c));
            }
        }

        if let FSpec::VanDerPol = self.spec.f {
            out[g_len] += a_x[0] * (x[0] - x[0] * x[0] * x[0] / 3.0 - theta[0]);
        }
    }
}

/// Autonomous baseline: dx/dt = f(x, theta_fixed), dtheta/dt = 0.
pub fn node_baseline_rhs(
    f_spec: &MlpSpec,
    theta_fixed: &ControlWeights,
    z: &crate::numcore::AugmentedState,
) -> Result<(StateVec, ControlWeights)> {
    if theta_fixed.len() != f_spec.param_count() {
        return Err(Error::shape(format!(
            "baseline theta has {} values, f expects {}",
            theta_fixed.len(),
            f_spec.param_count()
        )));
    }
    let dx = crate::netblocks::mlp_forward(f_spec, theta_fixed.values(), &z.x)?;
    let dtheta = ControlWeights::zeros(z.theta.layout().clone());
    Ok((dx, dtheta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{rand_normal, AugmentedState};
    use crate::odesolve::{flow_map, integrate, SolverConfig};

    fn oscillator() -> CoupledSystem {
        CoupledSystem::new(DynamicsSpec {
            x_dim: 1,
            f: FSpec::ThetaOnly,
            g: GMode::NegX,
            gamma: GammaMode::Fixed { values: vec![0.0] },
            gamma_input_dim: None,
        })
        .unwrap()
    }

    fn solve_x(
        sys: &CoupledSystem,
        mu: &MetaParams,
        x0: f64,
        horizon: f64,
        cfg: &SolverConfig,
    ) -> f64 {
        let x = StateVec::new(vec![x0]).unwrap();
        let theta = sys.gamma_init(mu, &x).unwrap();
        flow_map(sys.rhs_closure(mu), &x, &theta, horizon, cfg).unwrap().values()[0]
    }

    #[test]
    fn open_loop_theta_velocity_zero() {
        let sys = CoupledSystem::new(DynamicsSpec {
            x_dim: 2,
            f: FSpec::Mlp(MlpSpec::new(vec![2, 3, 2], Activation::Tanh, Activation::Identity).unwrap()),
            g: GMode::None,
            gamma: GammaMode::Constant,
            gamma_input_dim: None,
        })
        .unwrap();
        let mut rng = Rng::seed_from(5);
        let mu = sys.meta_init(&mut rng);
        let x = StateVec::new(vec![0.3, -0.8]).unwrap();
        let theta = sys.gamma_init(&mu, &x).unwrap();
        let z = AugmentedState::new(x, theta, 0.0);
        let (_, dtheta) = sys.coupled_rhs(&mu, &z).unwrap();
        assert!(dtheta.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oscillator_is_cosine() {
        let sys = oscillator();
        let mu = MetaParams::zeros(WeightLayout::default());
        let cfg = SolverConfig::dopri5(1e-10, 1e-10);
        let x = solve_x(&sys, &mu, 1.0, std::f64::consts::FRAC_PI_2, &cfg);
        assert!(x.abs() < 1e-6, "cos(pi/2) ~ 0, got {x}");
        let x = solve_x(&sys, &mu, 1.0, 1.0, &cfg);
        assert!((x - 1.0f64.cos()).abs() < 1e-8);
    }

    #[test]
    fn van_der_pol_fixed_point_at_origin() {
        let sys = CoupledSystem::new(DynamicsSpec {
            x_dim: 1,
            f: FSpec::VanDerPol,
            g: GMode::VdpFeedback,
            gamma: GammaMode::Fixed { values: vec![0.0] },
            gamma_input_dim: None,
        })
        .unwrap();
        let mu = MetaParams::new(vec![1.0], WeightLayout::vector(1)).unwrap();
        let z = AugmentedState::new(
            StateVec::zeros(1),
            ControlWeights::zeros(WeightLayout::vector(1)),
            0.0,
        );
        let (dx, dtheta) = sys.coupled_rhs(&mu, &z).unwrap();
        assert_eq!(dx.values(), &[0.0]);
        assert_eq!(dtheta.values(), &[0.0]);
    }

    #[test]
    fn gamma_constant_ignores_input() {
        let sys = CoupledSystem::new(DynamicsSpec {
            x_dim: 1,
            f: FSpec::NegTheta,
            g: GMode::None,
            gamma: GammaMode::Constant,
            gamma_input_dim: None,
        })
        .unwrap();
        let mu = MetaParams::new(vec![0.5], WeightLayout::vector(1)).unwrap();
        for x0 in [-3.0, 0.0, 7.5] {
            let theta = sys
                .gamma_init(&mu, &StateVec::new(vec![x0]).unwrap())
                .unwrap();
            assert_eq!(theta.values(), &[0.5]);
        }
    }

    #[test]
    fn gamma_mlp_zero_weights_outputs_bias() {
        let gamma = MlpSpec::new(vec![2, 3], Activation::Identity, Activation::Identity).unwrap();
        let sys = CoupledSystem::new(DynamicsSpec {
            x_dim: 3,
            f: FSpec::NegTheta,
            g: GMode::None,
            gamma: GammaMode::Mlp {
                spec: gamma,
                scatter: None,
            },
            gamma_input_dim: Some(2),
        })
        .unwrap();
        let mut mu = vec![0.0; sys.n_meta()];
        mu[6] = 1.5;
        mu[7] = -2.5;
        mu[8] = 0.25;
        let mu = MetaParams::new(mu, WeightLayout::vector(9)).unwrap();
        let theta = sys
            .gamma_init(&mu, &StateVec::new(vec![4.0, -4.0]).unwrap())
            .unwrap();
        assert_eq!(theta.values(), &[1.5, -2.5, 0.25]);
    }

    #[test]
    fn gamma_identity_reproduces_input() {
        let sys = CoupledSystem::new(DynamicsSpec {
            x_dim: 1,
            f: FSpec::NegTheta,
            g: GMode::None,
            gamma: GammaMode::Identity,
            gamma_input_dim: None,
        })
        .unwrap();
        let mu = MetaParams::zeros(WeightLayout::default());
        let theta = sys
            .gamma_init(&mu, &StateVec::new(vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(theta.values(), &[1.0]);
    }

    #[test]
    fn proposition_one_open_loop_witness() {
        // f = -theta, gamma = identity: Phi(x0, T) = x0 - x0 T, so
        // Phi(0, 1) == Phi(1, 1) == 0 and the flow is not injective.
        let sys = CoupledSystem::new(DynamicsSpec {
            x_dim: 1,
            f: FSpec::NegTheta,
            g: GMode::None,
            gamma: GammaMode::Identity,
            gamma_input_dim: None,
        })
        .unwrap();
        let mu = MetaParams::zeros(WeightLayout::default());
        let cfg = SolverConfig::dopri5(1e-9, 1e-9);
        let a = solve_x(&sys, &mu, 0.0, 1.0, &cfg);
        let b = solve_x(&sys, &mu, 1.0, 1.0, &cfg);
        assert!((a - b).abs() < 1e-6);
        let c = solve_x(&sys, &mu, 1.0, 2.0, &cfg);
        assert!((c + 1.0).abs() < 1e-8, "x0 - x0*T at T=2 is -1, got {c}");
    }

    #[test]
    fn proposition_one_closed_loop_witness() {
        let sys = oscillator();
        let mu = MetaParams::zeros(WeightLayout::default());
        let cfg = SolverConfig::dopri5(1e-10, 1e-10);
        for x0 in [-1.0, -0.5, 0.5, 1.0] {
            let x = solve_x(&sys, &mu, x0, std::f64::consts::FRAC_PI_2, &cfg);
            assert!(x.abs() < 1e-6, "Phi({x0}, pi/2) = {x}");
        }
    }

    #[test]
    fn open_loop_conserves_theta() {
        let sys = CoupledSystem::new(DynamicsSpec {
            x_dim: 1,
            f: FSpec::Mlp(MlpSpec::new(vec![1, 4, 1], Activation::Tanh, Activation::Identity).unwrap()),
            g: GMode::None,
            gamma: GammaMode::Constant,
            gamma_input_dim: None,
        })
        .unwrap();
        let mut rng = Rng::seed_from(17);
        let mu = sys.meta_init(&mut rng);
        let x = StateVec::new(vec![0.4]).unwrap();
        let theta = sys.gamma_init(&mu, &x).unwrap();
        let z0 = AugmentedState::new(x, theta.clone(), 0.0);
        let cfg = SolverConfig::dopri5(1e-8, 1e-8);
        let traj = integrate(sys.rhs_closure(&mu), &z0, 0.0, 2.0, &cfg).unwrap();
        for (a, b) in traj.last().theta.values().iter().zip(theta.values()) {
            assert!((a - b).abs() <= cfg.rtol);
        }
    }

    #[test]
    fn baseline_zero_theta_is_identity_flow() {
        let f = MlpSpec::new(vec![2, 2], Activation::Identity, Activation::Identity).unwrap();
        let theta = ControlWeights::zeros(f.layout());
        let z = AugmentedState::new(StateVec::new(vec![1.0, -1.0]).unwrap(), theta.clone(), 0.0);
        let (dx, dtheta) = node_baseline_rhs(&f, &theta, &z).unwrap();
        assert_eq!(dx.values(), &[0.0, 0.0]);
        assert!(dtheta.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn baseline_linear_growth_reaches_e() {
        // f(x) = w x + b with w = 1, b = 0: x(1) = e.
        let f = MlpSpec::new(vec![1, 1], Activation::Identity, Activation::Identity).unwrap();
        let theta = ControlWeights::new(vec![1.0, 0.0], f.layout()).unwrap();
        let x0 = StateVec::new(vec![1.0]).unwrap();
        let cfg = SolverConfig::dopri5(1e-9, 1e-9);
        let f2 = f.clone();
        let xt = flow_map(
            move |_, z: &[f64], dz: &mut [f64]| {
                let mut out = Vec::new();
                mlp_forward_flat(&f2, &z[1..3], &z[..1], &mut out).unwrap();
                dz[0] = out[0];
                dz[1] = 0.0;
                dz[2] = 0.0;
            },
            &x0,
            &theta,
            1.0,
            &cfg,
        )
        .unwrap();
        assert!((xt.values()[0] - std::f64::consts::E).abs() < 1e-7);
    }

    #[test]
    fn baseline_preserves_order_in_one_dim() {
        // Trajectories of a scalar autonomous flow cannot cross.
        let f = MlpSpec::new(vec![1, 6, 1], Activation::Tanh, Activation::Identity).unwrap();
        let mut rng = Rng::seed_from(23);
        let cfg = SolverConfig::dopri5(1e-8, 1e-8);
        for _ in 0..25 {
            let theta =
                ControlWeights::new(rand_normal(&mut rng, f.param_count(), 0.0, 1.0).unwrap(), f.layout())
                    .unwrap();
            let lo = rng.uniform_in(-1.0, 0.9);
            let hi = lo + rng.uniform_in(0.01, 1.0);
            let f2 = f.clone();
            let mut rhs = move |_: f64, z: &[f64], dz: &mut [f64]| {
                let mut out = Vec::new();
                mlp_forward_flat(&f2, &z[1..], &z[..1], &mut out).unwrap();
                dz[0] = out[0];
                for v in dz[1..].iter_mut() {
                    *v = 0.0;
                }
            };
            let a = flow_map(&mut rhs, &StateVec::new(vec![lo]).unwrap(), &theta, 1.0, &cfg)
                .unwrap();
            let b = flow_map(&mut rhs, &StateVec::new(vec![hi]).unwrap(), &theta, 1.0, &cfg)
                .unwrap();
            assert!(
                a.values()[0] < b.values()[0],
                "order swapped: {} -> {}, {} -> {}",
                lo,
                a.values()[0],
                hi,
                b.values()[0]
            );
        }
    }

    #[test]
    fn oscillator_jacobian_exact() {
        let sys = oscillator();
        let mu: Vec<f64> = vec![];
        let z = [0.3, -0.2];
        let jac = sys.jac_z(&mu, 0.0, &z).unwrap();
        assert_eq!(jac.data(), &[0.0, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn open_loop_jacobian_bottom_rows_zero() {
        let sys = CoupledSystem::new(DynamicsSpec {
            x_dim: 2,
            f: FSpec::Mlp(MlpSpec::new(vec![2, 3, 2], Activation::Tanh, Activation::Identity).unwrap()),
            g: GMode::None,
            gamma: GammaMode::Constant,
            gamma_input_dim: None,
        })
        .unwrap();
        let mut rng = Rng::seed_from(31);
        let mu = sys.meta_init(&mut rng);
        let z = rand_normal(&mut rng, sys.z_dim(), 0.0, 1.0).unwrap();
        let jac = sys.jac_z(mu.values(), 0.0, &z).unwrap();
        for r in sys.x_dim()..sys.z_dim() {
            for c in 0..sys.z_dim() {
                assert_eq!(jac.get(r, c), 0.0);
            }
        }
    }

    /// Builds a few representative systems with meta parameters for the
    /// finite-difference sweeps below.
    fn fd_test_systems(rng: &mut Rng) -> Vec<(CoupledSystem, MetaParams)> {
        let mut out = Vec::new();

        let closed = CoupledSystem::new(DynamicsSpec {
            x_dim: 2,
            f: FSpec::Mlp(MlpSpec::new(vec![2, 3, 2], Activation::Tanh, Activation::Identity).unwrap()),
            g: GMode::Mlp(
                MlpSpec::new(vec![17 + 2, 4, 17], Activation::Tanh, Activation::Identity).unwrap(),
            ),
            gamma: GammaMode::Constant,
            gamma_input_dim: None,
        })
        .unwrap();
        let mu = closed.meta_init(rng);
        out.push((closed, mu));

        let hebb = CoupledSystem::new(DynamicsSpec {
            x_dim: 3,
            f: FSpec::Hebbian {
                rho: Activation::Tanh,
            },
            g: GMode::Hebbian,
            gamma: GammaMode::Constant,
            gamma_input_dim: None,
        })
        .unwrap();
        let mu = hebb.meta_init(rng);
        out.push((hebb, mu));

        let vdp = CoupledSystem::new(DynamicsSpec {
            x_dim: 1,
            f: FSpec::VanDerPol,
            g: GMode::VdpFeedback,
            gamma: GammaMode::Fixed { values: vec![0.1] },
            gamma_input_dim: None,
        })
        .unwrap();
        let mu = MetaParams::new(vec![1.3], WeightLayout::vector(1)).unwrap();
        out.push((vdp, mu));

        let latent = CoupledSystem::new(DynamicsSpec {
            x_dim: 3,
            f: FSpec::LatentLinear,
            g: GMode::None,
            gamma: GammaMode::Constant,
            gamma_input_dim: None,
        })
        .unwrap();
        let mu = latent.meta_init(rng);
        out.push((latent, mu));

        out
    }

    #[test]
    fn jacobians_and_vjps_match_finite_differences() {
        let mut rng = Rng::seed_from(321);
        let h = 1e-6;
        for (sys, mu) in fd_test_systems(&mut rng) {
            let n = sys.z_dim();
            let z = rand_normal(&mut rng, n, 0.0, 0.7).unwrap();
            let jac = sys.jac_z(mu.values(), 0.0, &z).unwrap();

            // dh/dz against central differences.
            for c in 0..n {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[c] += h;
                zm[c] -= h;
                let mut fp = vec![0.0; n];
                let mut fm = vec![0.0; n];
                sys.rhs_flat(mu.values(), 0.0, &zp, &mut fp);
                sys.rhs_flat(mu.values(), 0.0, &zm, &mut fm);
                for r in 0..n {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    let a = jac.get(r, c);
                    let scale = fd.abs().max(a.abs()).max(1e-3);
                    assert!((a - fd).abs() / scale < 1e-5, "jac_z[{r}][{c}]: {a} vs {fd}");
                }
            }

            // vjp_z consistency with the dense jacobian.
            let a = rand_normal(&mut rng, n, 0.0, 1.0).unwrap();
            let mut vjp = vec![0.0; n];
            sys.vjp_z(mu.values(), 0.0, &z, &a, &mut vjp);
            let mut dense = vec![0.0; n];
            jac.matvec_transpose_into(&a, &mut dense);
            for c in 0..n {
                let scale = dense[c].abs().max(vjp[c].abs()).max(1e-6);
                assert!((vjp[c] - dense[c]).abs() / scale < 1e-10);
            }

            // vjp_mu_h against dense jac_mu.
            let h_len = sys.meta_slices().h_len();
            if h_len > 0 {
                let jmu = sys.jac_mu(mu.values(), 0.0, &z).unwrap();
                let mut vout = vec![0.0; h_len];
                sys.vjp_mu_h(mu.values(), 0.0, &z, &a, &mut vout);
                let off = sys.meta_slices().gamma_len;
                for c in 0..h_len {
                    let mut dense = 0.0;
                    for r in 0..n {
                        dense += a[r] * jmu.get(r, off + c);
                    }
                    let scale: f64 = dense.abs().max(vout[c].abs()).max(1e-6);
                    assert!((vout[c] - dense).abs() / scale < 1e-10);
                }
            }
        }
    }

    #[test]
    fn closed_loop_flow_is_reversible() {
        let mut rng = Rng::seed_from(77);
        for (sys, mu) in fd_test_systems(&mut rng) {
            let x0 = StateVec::new(rand_normal(&mut rng, sys.x_dim(), 0.0, 0.5).unwrap()).unwrap();
            let theta0 = sys.gamma_init(&mu, &StateVec::zeros(sys.gamma_input_dim())).unwrap();
            let cfg = SolverConfig::dopri5(1e-9, 1e-9);
            let z0 = AugmentedState::new(x0.clone(), theta0, 0.0);
            let fwd = integrate(sys.rhs_closure(&mu), &z0, 0.0, 0.8, &cfg).unwrap();
            let back = integrate(sys.rhs_closure(&mu), fwd.last(), 0.8, 0.0, &cfg).unwrap();
            let tol = 10.0 * (cfg.rtol + cfg.atol);
            for (a, b) in back.last().x.values().iter().zip(x0.values()) {
                assert!((a - b).abs() < tol, "reversibility violated: {a} vs {b}");
            }
        }
    }
}
