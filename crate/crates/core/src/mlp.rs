//! Fully connected networks and the derivative entry points built on
//! [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamVector;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    Identity,
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        MlpSpec {
            layer_sizes,
            activation,
            final_activation: FinalActivation::Identity,
        }
    }

    pub fn with_final(mut self, f: FinalActivation) -> Self {
        self.final_activation = f;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least two layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
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

    pub fn n_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// A network whose weights live inside a larger [`ParamVector`], starting at
/// segment index `first` (alternating weight, bias per layer).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub first: usize,
}

impl Mlp {
    /// Append freshly initialised layers named `{prefix}w{i}` / `{prefix}b{i}`.
    pub fn init_into<R: Rng + ?Sized>(
        params: &mut ParamVector,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Mlp> {
        spec.validate()?;
        let first = params.layout().len();
        for (i, w) in spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let weights: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(
                format!("{prefix}w{i}"),
                alloc::vec![fan_in, fan_out],
                &weights,
            );
            params.push(
                format!("{prefix}b{i}"),
                alloc::vec![fan_out],
                &alloc::vec![0.0; fan_out],
            );
        }
        Ok(Mlp { spec, first })
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let n = self.spec.n_layers();
        let mut h = x;
        for i in 0..n {
            let w = vars[self.first + 2 * i];
            let b = vars[self.first + 2 * i + 1];
            let a = g.matmul(h, w);
            h = g.add(a, b);
            if i + 1 < n {
                h = match self.spec.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        match self.spec.final_activation {
            FinalActivation::Identity => h,
            FinalActivation::Softplus => g.softplus(h),
        }
    }

    fn last_names(&self, params: &ParamVector) -> (String, String) {
        let i = self.first + 2 * (self.spec.n_layers() - 1);
        (
            params.layout()[i].name.clone(),
            params.layout()[i + 1].name.clone(),
        )
    }

    /// Zero the output layer so the network starts as the constant given by
    /// its final bias.
    pub fn zero_output_layer(&self, params: &mut ParamVector) {
        let (w, b) = self.last_names(params);
        params.segment_mut(&w).unwrap().fill(0.0);
        params.segment_mut(&b).unwrap().fill(0.0);
    }

    pub fn set_output_bias(&self, params: &mut ParamVector, value: f64) {
        let (_, b) = self.last_names(params);
        params.segment_mut(&b).unwrap().fill(value);
    }
}

/// Stand-alone network parameters, seeded deterministically.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamVector::new();
    Mlp::init_into(&mut p, "", spec.clone(), &mut rng)?;
    Ok(p)
}

fn check_params(spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.n_params() {
        return Err(Error::Shape(format!(
            "network needs {} parameters, vector has {}",
            spec.n_params(),
            params.len()
        )));
    }
    Ok(())
}

pub fn mlp_eval(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    if input.len() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has length {}, network expects {}",
            input.len(),
            spec.input_dim()
        )));
    }
    let mut g = Graph::new();
    let vars = params.leaves(&mut g);
    let x = g.leaf(Tensor::row_vector(input));
    let net = Mlp {
        spec: spec.clone(),
        first: 0,
    };
    let y = net.forward(&mut g, &vars, x);
    Ok(g.value(y).data().to_vec())
}

/// Reverse-mode gradient of the scalar built by `f` from the parameter leaves.
pub fn grad_params<F>(f: F, params: &ParamVector) -> Result<ParamVector>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars = params.leaves(&mut g);
    let out = f(&mut g, &vars);
    if g.shape(out) != (1, 1) {
        return Err(Error::Contract(format!(
            "gradient requested of a non-scalar of shape {:?}",
            g.shape(out)
        )));
    }
    let grads = g.grad_values(out, &vars, None);
    params.with_values_from(&grads)
}

/// Primal and tangent of a forward-mode evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTrace {
    pub primal: Vec<f64>,
    pub tangent: Vec<f64>,
}

/// `J_f(input) · direction` by forward mode.
pub fn dir_deriv_input<F>(f: F, input: &[f64], direction: &[f64]) -> Result<DualTrace>
where
    F: FnOnce(&mut Graph, Var) -> Var,
{
    if input.len() != direction.len() {
        return Err(Error::Shape(format!(
            "direction has length {}, input {}",
            direction.len(),
            input.len()
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row_vector(input));
    let d = g.constant(Tensor::row_vector(direction));
    let y = f(&mut g, x);
    let t = g.jvp(y, &[x], &[d]);
    Ok(DualTrace {
        primal: g.value(y).data().to_vec(),
        tangent: g.value(t).data().to_vec(),
    })
}

/// Parameter gradient of `εᵀ J_f ε` (reverse over forward).
pub fn grad_params_through_dir_deriv<F>(
    f: F,
    params: &ParamVector,
    input: &[f64],
    direction: &[f64],
) -> Result<ParamVector>
where
    F: FnOnce(&mut Graph, &[Var], Var) -> Var,
{
    if input.len() != direction.len() {
        return Err(Error::Shape(format!(
            "direction has length {}, input {}",
            direction.len(),
            input.len()
        )));
    }
    let mut g = Graph::new();
    let vars = params.leaves(&mut g);
    let x = g.leaf(Tensor::row_vector(input));
    let d = g.constant(Tensor::row_vector(direction));
    let y = f(&mut g, &vars, x);
    if g.shape(y) != g.shape(x) {
        return Err(Error::Shape(format!(
            "εᵀJε needs a square Jacobian, f maps {:?} to {:?}",
            g.shape(x),
            g.shape(y)
        )));
    }
    let t = g.jvp(y, &[x], &[d]);
    let q = g.row_dot(t, d);
    let q = g.sum_all(q);
    let grads = g.grad_values(q, &vars, None);
    params.with_values_from(&grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn init_counts_and_determinism() {
        let spec = MlpSpec::new(vec![2, 4, 1], Activation::Relu);
        let a = mlp_init(&spec, 0).unwrap();
        assert_eq!(a.len(), 17);
        assert_eq!(a, mlp_init(&spec, 0).unwrap());
        assert_ne!(a, mlp_init(&spec, 1).unwrap());
        let bad = MlpSpec::new(vec![3], Activation::Relu);
        assert!(matches!(mlp_init(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn eval_shapes_and_zero_params() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh);
        let p = mlp_init(&spec, 3).unwrap().zeros_like();
        assert_eq!(
            mlp_eval(&spec, &p, &[1.0, -2.0, 3.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(matches!(mlp_eval(&spec, &p, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_hidden_layer_applies_relu() {
        let spec = MlpSpec::new(vec![2, 2, 2], Activation::Relu);
        let mut p = mlp_init(&spec, 0).unwrap();
        p.segment_mut("w0")
            .unwrap()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.segment_mut("w1")
            .unwrap()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.segment_mut("b1").unwrap().copy_from_slice(&[0.5, 0.5]);
        assert_eq!(mlp_eval(&spec, &p, &[-1.0, 2.0]).unwrap(), vec![0.5, 2.5]);
    }

    #[test]
    fn trivial_gradients() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh);
        let p = mlp_init(&spec, 7).unwrap();
        let ones = grad_params(
            |g, vars| {
                let sums: Vec<Var> = vars.iter().map(|&v| g.sum_all(v)).collect();
                sums.into_iter().reduce(|a, b| g.add(a, b)).unwrap()
            },
            &p,
        )
        .unwrap();
        assert!(ones.values().iter().all(|&v| v == 1.0));
        let half_sq = grad_params(
            |g, vars| {
                let sums: Vec<Var> = vars
                    .iter()
                    .map(|&v| {
                        let s = g.square(v);
                        g.sum_all(s)
                    })
                    .collect();
                let tot = sums.into_iter().reduce(|a, b| g.add(a, b)).unwrap();
                g.scale(tot, 0.5)
            },
            &p,
        )
        .unwrap();
        assert_eq!(half_sq.values(), p.values());
        let err = grad_params(|g, vars| g.square(vars[0]), &p);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn hand_calculus_directional_derivative() {
        let t = dir_deriv_input(
            |g, x| {
                let sq = g.square(x);
                let a = g.slice_cols(sq, 0, 1);
                let b = g.slice_cols(x, 1, 1);
                g.concat_cols(&[a, b])
            },
            &[3.0, 5.0],
            &[1.0, 0.0],
        )
        .unwrap();
        assert_eq!(t.primal, vec![9.0, 5.0]);
        assert_eq!(t.tangent, vec![6.0, 0.0]);
        let id = dir_deriv_input(|_, x| x, &[1.0, 2.0], &[0.3, -0.7]).unwrap();
        assert_eq!(id.tangent, vec![0.3, -0.7]);
    }
}
