//! The three parametric models: generator p(x|z) with standard-normal prior,
//! inference q(z|x) with mean and log-std heads, and the energy model whose
//! scalar output f(x) defines the unnormalized density exp(f(x)); -f(x) is
//! the energy of x. The normalizer is never computed anywhere: every objective
//! in this crate is built so that it cancels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, SeedTree};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

pub const DEFAULT_INIT_STD: f64 = 0.02;
pub const DEFAULT_OBS_SIGMA: f64 = 0.3;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, output: usize, act: Activation },
    Conv { in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, act: Activation },
    ConvT { in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, act: Activation },
}

// ── Parameter store ─────────────────────────────────────────────────────

/// Named parameter collection for one model, in fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every parameter on a tape, as leaves (trainable) or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Val> {
        self.entries
            .iter()
            .map(|(_, t)| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    /// Fully connected stacks for low-dimensional signals.
    Mlp { hidden: Vec<usize> },
    /// Conv stack for 1x28x28 signals; `base_width` is the first conv's
    /// filter count (the reference stack uses 128; default 32 here).
    Conv28 { base_width: usize },
    /// The same stack with one stride-2 stage removed, for 1x14x14 signals.
    Conv14 { base_width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub latent_dim: usize,
    pub signal_shape: Vec<usize>,
    pub init_std: f64,
    pub obs_sigma: f64,
    /// Whether the generator ends in tanh (bounded [-1,1] output, the image
    /// setting) or a linear layer (unbounded, for synthetic point clouds).
    pub gen_final_tanh: bool,
}

impl ModelConfig {
    pub fn mlp(hidden: Vec<usize>, latent_dim: usize, signal_dim: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Mlp { hidden },
            latent_dim,
            signal_shape: vec![signal_dim],
            init_std: DEFAULT_INIT_STD,
            obs_sigma: DEFAULT_OBS_SIGMA,
            gen_final_tanh: false,
        }
    }

    pub fn conv28(base_width: usize, latent_dim: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Conv28 { base_width },
            latent_dim,
            signal_shape: vec![1, 28, 28],
            init_std: DEFAULT_INIT_STD,
            obs_sigma: DEFAULT_OBS_SIGMA,
            gen_final_tanh: true,
        }
    }

    pub fn conv14(base_width: usize, latent_dim: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Conv14 { base_width },
            latent_dim,
            signal_shape: vec![1, 14, 14],
            init_std: DEFAULT_INIT_STD,
            obs_sigma: DEFAULT_OBS_SIGMA,
            gen_final_tanh: true,
        }
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.obs_sigma <= 0.0 {
            return Err(Error::Config("obs_sigma must be positive".into()));
        }
        match &self.architecture {
            Architecture::Mlp { .. } => {
                if self.signal_shape.len() != 1 {
                    return Err(Error::Config(format!(
                        "mlp architecture expects a flat signal, got {:?}",
                        self.signal_shape
                    )));
                }
            }
            Architecture::Conv28 { base_width } => {
                if self.signal_shape != [1, 28, 28] {
                    return Err(Error::Config(format!(
                        "conv28 requires 1x28x28 signal, got {:?}",
                        self.signal_shape
                    )));
                }
                if *base_width == 0 {
                    return Err(Error::Config("conv base_width must be >= 1".into()));
                }
            }
            Architecture::Conv14 { base_width } => {
                if self.signal_shape != [1, 14, 14] {
                    return Err(Error::Config(format!(
                        "conv14 requires 1x14x14 signal, got {:?}",
                        self.signal_shape
                    )));
                }
                if *base_width == 0 {
                    return Err(Error::Config("conv base_width must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

// ── Layer stacks ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub layers: Vec<LayerSpec>,
}

impl Stack {
    fn init_params(&self, init_std: f64, rng: &mut impl Rng, store: &mut ParamStore) {
        for (i, layer) in self.layers.iter().enumerate() {
            let (wshape, bias) = match layer {
                LayerSpec::Dense { input, output, .. } => (vec![*input, *output], *output),
                LayerSpec::Conv { in_ch, out_ch, k, .. } => (vec![*out_ch, *in_ch, *k, *k], *out_ch),
                LayerSpec::ConvT { in_ch, out_ch, k, .. } => (vec![*in_ch, *out_ch, *k, *k], *out_ch),
            };
            let w = normal_tensor(rng, &wshape).map(|v| v * init_std);
            store.add(format!("l{i}.w"), w);
            store.add(format!("l{i}.b"), Tensor::zeros(&[bias]));
        }
    }

    /// Apply the stack; `bound` supplies (weight, bias) pairs in layer order
    /// starting at `offset`.
    fn forward(&self, tape: &mut Tape, bound: &[Val], offset: usize, mut x: Val) -> Result<Val> {
        for (i, layer) in self.layers.iter().enumerate() {
            let w = bound[offset + 2 * i];
            let b = bound[offset + 2 * i + 1];
            let (pre, act) = match layer {
                LayerSpec::Dense { act, .. } => {
                    let y = tape.matmul(x, w)?;
                    (tape.add_row_bias(y, b)?, act)
                }
                LayerSpec::Conv { stride, pad, act, .. } => {
                    let y = tape.conv2d(x, w, *stride, *pad)?;
                    (tape.add_chan_bias(y, b)?, act)
                }
                LayerSpec::ConvT { stride, pad, act, .. } => {
                    let y = tape.conv_transpose2d(x, w, *stride, *pad)?;
                    (tape.add_chan_bias(y, b)?, act)
                }
            };
            x = match act {
                Activation::Linear => pre,
                Activation::Relu => tape.relu(pre),
                Activation::LeakyRelu(s) => tape.leaky_relu(pre, *s),
                Activation::Tanh => tape.tanh(pre),
            };
        }
        Ok(x)
    }

    /// Propagate a symbolic input shape through the stack, with the same
    /// strictness as the tape ops. Used to fail at construction time.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = match layer {
                LayerSpec::Dense { input, output, .. } => {
                    if shape != [*input] {
                        return Err(Error::Geometry(format!(
                            "dense layer expects [{input}], got {shape:?}"
                        )));
                    }
                    vec![*output]
                }
                LayerSpec::Conv { in_ch, out_ch, k, stride, pad, .. } => {
                    if shape.len() != 3 || shape[0] != *in_ch {
                        return Err(Error::Geometry(format!(
                            "conv layer expects [{in_ch},h,w], got {shape:?}"
                        )));
                    }
                    let ext = |e: usize| -> Result<usize> {
                        let span = (e + 2 * pad) as i64 - *k as i64;
                        if span < 0 || span as usize % stride != 0 {
                            return Err(Error::Geometry(format!(
                                "conv {e} with k={k} s={stride} p={pad}: non-integral output"
                            )));
                        }
                        Ok(span as usize / stride + 1)
                    };
                    vec![*out_ch, ext(shape[1])?, ext(shape[2])?]
                }
                LayerSpec::ConvT { in_ch, out_ch, k, stride, pad, .. } => {
                    if shape.len() != 3 || shape[0] != *in_ch {
                        return Err(Error::Geometry(format!(
                            "convT layer expects [{in_ch},h,w], got {shape:?}"
                        )));
                    }
                    let ext = |e: usize| -> Result<usize> {
                        let o = ((e - 1) * stride + k) as i64 - 2 * *pad as i64;
                        if o < 1 {
                            return Err(Error::Geometry(format!(
                                "convT {e} with k={k} s={stride} p={pad}: non-positive output"
                            )));
                        }
                        Ok(o as usize)
                    };
                    vec![*out_ch, ext(shape[1])?, ext(shape[2])?]
                }
            };
        }
        Ok(shape)
    }
}

fn trunk_act() -> Activation {
    Activation::LeakyRelu(LEAKY_SLOPE)
}

fn generator_stack(cfg: &ModelConfig) -> Stack {
    let final_act = if cfg.gen_final_tanh { Activation::Tanh } else { Activation::Linear };
    let d = cfg.latent_dim;
    let layers = match &cfg.architecture {
        Architecture::Mlp { hidden } => {
            let mut layers = Vec::new();
            let mut prev = d;
            for &h in hidden {
                layers.push(LayerSpec::Dense { input: prev, output: h, act: trunk_act() });
                prev = h;
            }
            layers.push(LayerSpec::Dense { input: prev, output: cfg.signal_dim(), act: final_act });
            layers
        }
        Architecture::Conv28 { base_width: b } => vec![
            LayerSpec::ConvT { in_ch: d, out_ch: 8 * b, k: 3, stride: 1, pad: 0, act: Activation::Relu },
            LayerSpec::ConvT { in_ch: 8 * b, out_ch: 4 * b, k: 3, stride: 2, pad: 0, act: Activation::Relu },
            LayerSpec::ConvT { in_ch: 4 * b, out_ch: 2 * b, k: 4, stride: 2, pad: 1, act: Activation::Relu },
            LayerSpec::ConvT { in_ch: 2 * b, out_ch: 1, k: 4, stride: 2, pad: 1, act: final_act },
        ],
        Architecture::Conv14 { base_width: b } => vec![
            LayerSpec::ConvT { in_ch: d, out_ch: 4 * b, k: 3, stride: 1, pad: 0, act: Activation::Relu },
            LayerSpec::ConvT { in_ch: 4 * b, out_ch: 2 * b, k: 3, stride: 2, pad: 0, act: Activation::Relu },
            LayerSpec::ConvT { in_ch: 2 * b, out_ch: 1, k: 4, stride: 2, pad: 1, act: final_act },
        ],
    };
    Stack { layers }
}

/// Trunk shared by the inference heads; also the energy stack's body.
fn encoder_trunk(cfg: &ModelConfig) -> (Stack, Vec<usize>) {
    match &cfg.architecture {
        Architecture::Mlp { hidden } => {
            let mut layers = Vec::new();
            let mut prev = cfg.signal_dim();
            for &h in hidden {
                layers.push(LayerSpec::Dense { input: prev, output: h, act: trunk_act() });
                prev = h;
            }
            (Stack { layers }, vec![prev])
        }
        Architecture::Conv28 { base_width: b } => (
            Stack {
                layers: vec![
                    LayerSpec::Conv { in_ch: 1, out_ch: *b, k: 4, stride: 2, pad: 1, act: trunk_act() },
                    LayerSpec::Conv { in_ch: *b, out_ch: 2 * b, k: 4, stride: 2, pad: 1, act: trunk_act() },
                    LayerSpec::Conv { in_ch: 2 * b, out_ch: 4 * b, k: 3, stride: 2, pad: 0, act: trunk_act() },
                ],
            },
            vec![4 * b, 3, 3],
        ),
        Architecture::Conv14 { base_width: b } => (
            Stack {
                layers: vec![
                    LayerSpec::Conv { in_ch: 1, out_ch: *b, k: 4, stride: 2, pad: 1, act: trunk_act() },
                    LayerSpec::Conv { in_ch: *b, out_ch: 2 * b, k: 3, stride: 2, pad: 0, act: trunk_act() },
                ],
            },
            vec![2 * b, 3, 3],
        ),
    }
}

fn head_layer(cfg: &ModelConfig, trunk_out: &[usize], out_dim: usize) -> LayerSpec {
    match &cfg.architecture {
        Architecture::Mlp { .. } => {
            LayerSpec::Dense { input: trunk_out[0], output: out_dim, act: Activation::Linear }
        }
        _ => LayerSpec::Conv {
            in_ch: trunk_out[0],
            out_ch: out_dim,
            k: trunk_out[1],
            stride: 1,
            pad: 0,
            act: Activation::Linear,
        },
    }
}

// ── Models ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub params: ParamStore,
    pub latent_dim: usize,
    pub signal_shape: Vec<usize>,
    pub obs_sigma: f64,
    stack: Stack,
    conv_input: bool,
}

#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub params: ParamStore,
    pub latent_dim: usize,
    pub signal_shape: Vec<usize>,
    trunk: Stack,
    heads: Stack, // exactly [mu, log_sigma], applied separately to the trunk output
}

#[derive(Clone, Debug)]
pub struct EnergyModel {
    pub params: ParamStore,
    pub signal_shape: Vec<usize>,
    stack: Stack,
}

impl GeneratorModel {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let stack = generator_stack(cfg);
        let conv_input = !matches!(cfg.architecture, Architecture::Mlp { .. });
        let in_shape: Vec<usize> =
            if conv_input { vec![cfg.latent_dim, 1, 1] } else { vec![cfg.latent_dim] };
        let out = stack.output_shape(&in_shape)?;
        if out != cfg.signal_shape {
            return Err(Error::Geometry(format!(
                "generator stack produces {:?}, expected {:?}",
                out, cfg.signal_shape
            )));
        }
        let mut params = ParamStore::new();
        stack.init_params(cfg.init_std, rng, &mut params);
        Ok(GeneratorModel {
            params,
            latent_dim: cfg.latent_dim,
            signal_shape: cfg.signal_shape.clone(),
            obs_sigma: cfg.obs_sigma,
            stack,
            conv_input,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Val> {
        self.params.bind(tape, trainable)
    }

    /// Pure network pass: z `[n,d]` -> signal `[n, ...signal_shape]`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Val], z: Val) -> Result<Val> {
        let zs = tape.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "generator expects [n,{}], got {:?}",
                self.latent_dim, zs
            )));
        }
        let n = zs[0];
        let x = if self.conv_input {
            let r = tape.reshape(z, &[n, self.latent_dim, 1, 1])?;
            self.stack.forward(tape, bound, 0, r)?
        } else {
            self.stack.forward(tape, bound, 0, z)?
        };
        Ok(x)
    }
}

impl InferenceModel {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (trunk, trunk_out) = encoder_trunk(cfg);
        let heads = Stack {
            layers: vec![
                head_layer(cfg, &trunk_out, cfg.latent_dim),
                head_layer(cfg, &trunk_out, cfg.latent_dim),
            ],
        };
        trunk.output_shape(&cfg.signal_shape)?;
        let mut params = ParamStore::new();
        trunk.init_params(cfg.init_std, rng, &mut params);
        let mut head_params = ParamStore::new();
        heads.init_params(cfg.init_std, rng, &mut head_params);
        for (name, value) in head_params.iter() {
            let renamed = if name.starts_with("l0") {
                name.replace("l0", "mu")
            } else {
                name.replace("l1", "logsig")
            };
            params.add(renamed, value.clone());
        }
        Ok(InferenceModel {
            params,
            latent_dim: cfg.latent_dim,
            signal_shape: cfg.signal_shape.clone(),
            trunk,
            heads,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Val> {
        self.params.bind(tape, trainable)
    }

    /// Pure network pass: x -> (mu `[n,d]`, log_sigma `[n,d]`).
    pub fn forward(&self, tape: &mut Tape, bound: &[Val], x: Val) -> Result<(Val, Val)> {
        self.check_signal(tape.value(x).shape())?;
        let n = tape.value(x).shape()[0];
        let h = self.trunk.forward(tape, bound, 0, x)?;
        let trunk_params = 2 * self.trunk.layers.len();
        let mu = {
            let head = Stack { layers: vec![self.heads.layers[0].clone()] };
            let y = head.forward(tape, bound, trunk_params, h)?;
            tape.reshape(y, &[n, self.latent_dim])?
        };
        let log_sigma = {
            let head = Stack { layers: vec![self.heads.layers[1].clone()] };
            let y = head.forward(tape, bound, trunk_params + 2, h)?;
            tape.reshape(y, &[n, self.latent_dim])?
        };
        Ok((mu, log_sigma))
    }

    fn check_signal(&self, xs: &[usize]) -> Result<()> {
        if xs.len() != self.signal_shape.len() + 1 || xs[1..] != self.signal_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "inference expects [n, {:?}], got {:?}",
                self.signal_shape, xs
            )));
        }
        Ok(())
    }
}

impl EnergyModel {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (mut stack, trunk_out) = encoder_trunk(cfg);
        stack.layers.push(head_layer(cfg, &trunk_out, 1));
        stack.output_shape(&cfg.signal_shape)?;
        let mut params = ParamStore::new();
        stack.init_params(cfg.init_std, rng, &mut params);
        Ok(EnergyModel { params, signal_shape: cfg.signal_shape.clone(), stack })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Val> {
        self.params.bind(tape, trainable)
    }

    /// Pure network pass: x -> per-example value f(x), shape `[n]`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Val], x: Val) -> Result<Val> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != self.signal_shape.len() + 1 || xs[1..] != self.signal_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "energy expects [n, {:?}], got {:?}",
                self.signal_shape, xs
            )));
        }
        let n = xs[0];
        let y = self.stack.forward(tape, bound, 0, x)?;
        tape.reshape(y, &[n])
    }
}

/// The three jointly trained models plus their shared configuration.
#[derive(Clone, Debug)]
pub struct Models {
    pub config: ModelConfig,
    pub gen: GeneratorModel,
    pub inf: InferenceModel,
    pub en: EnergyModel,
}

impl Models {
    pub fn new(config: ModelConfig, seeds: &SeedTree) -> Result<Self> {
        let gen = GeneratorModel::new(&config, &mut seeds.stream("init.gen", &[]))?;
        let inf = InferenceModel::new(&config, &mut seeds.stream("init.inf", &[]))?;
        let en = EnergyModel::new(&config, &mut seeds.stream("init.en", &[]))?;
        Ok(Models { config, gen, inf, en })
    }
}

// ── Sampling-level operations ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    None,
    Gaussian,
}

/// Draw `[n,d]` from the standard-normal prior.
pub fn sample_prior(n: usize, d: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::Domain("prior dimension must be >= 1".into()));
    }
    Ok(normal_tensor(rng, &[n, d]))
}

/// Generate signals from latent codes, optionally with observation noise.
pub fn generate(
    gen: &GeneratorModel,
    z: &Tensor,
    noise: NoiseMode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = gen.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let x = gen.forward(&mut tape, &bound, zv)?;
    let mut out = tape.value(x).clone();
    if noise == NoiseMode::Gaussian {
        let eps = normal_tensor(rng, out.shape());
        for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
            *o += gen.obs_sigma * e;
        }
    }
    Ok(out)
}

/// Amortized posterior with an explicit reparameterization noise (test hook).
pub fn infer_with_noise(
    inf: &InferenceModel,
    x: &Tensor,
    eps: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = inf.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (mu_v, logsig_v) = inf.forward(&mut tape, &bound, xv)?;
    let mu = tape.value(mu_v).clone();
    let log_sigma = tape.value(logsig_v).clone();
    if !mu.is_finite() || !log_sigma.is_finite() {
        return Err(Error::NonFinite("inference head output".into()));
    }
    let sigma = log_sigma.map(f64::exp);
    if eps.shape() != mu.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reparameterization noise {:?} vs mu {:?}",
            eps.shape(),
            mu.shape()
        )));
    }
    let mut z = mu.clone();
    for ((zv, s), e) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
        *zv += s * e;
    }
    Ok((mu, sigma, z))
}

/// Amortized posterior: returns (mu, sigma, z_sample) with z = mu + sigma*eps.
pub fn infer(inf: &InferenceModel, x: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.shape()[0];
    let eps = normal_tensor(rng, &[n, inf.latent_dim]);
    infer_with_noise(inf, x, &eps)
}

/// Per-example value f(x) of the energy model (the energy itself is -f).
pub fn energy_value(en: &EnergyModel, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = en.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let f = en.forward(&mut tape, &bound, xv)?;
    Ok(tape.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::check_gradients;

    fn zeroed(mut store: ParamStore) -> ParamStore {
        for i in 0..store.len() {
            let z = Tensor::zeros(store.value(i).shape());
            *store.value_mut(i) = z;
        }
        store
    }

    fn mlp_cfg() -> ModelConfig {
        ModelConfig::mlp(vec![8, 8], 2, 4)
    }

    #[test]
    fn prior_is_reproducible_and_handles_empty_batch() {
        let seeds = SeedTree::new(1);
        let a = sample_prior(5, 3, &mut seeds.stream("prior", &[0])).unwrap();
        let b = sample_prior(5, 3, &mut seeds.stream("prior", &[0])).unwrap();
        assert_eq!(a, b);
        let empty = sample_prior(0, 3, &mut seeds.stream("prior", &[1])).unwrap();
        assert_eq!(empty.shape(), &[0, 3]);
    }

    #[test]
    fn prior_clt_bound() {
        let n = 100_000;
        let z = sample_prior(n, 2, &mut SeedTree::new(2).stream("prior", &[0])).unwrap();
        for dim in 0..2 {
            let mean: f64 = (0..n).map(|i| z.row(i)[dim]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "dim {dim} mean {mean}");
        }
    }

    #[test]
    fn zero_weight_generator_outputs_zero() {
        let mut cfg = mlp_cfg();
        cfg.gen_final_tanh = true;
        let seeds = SeedTree::new(3);
        let mut gen = GeneratorModel::new(&cfg, &mut seeds.stream("init.gen", &[])).unwrap();
        gen.params = zeroed(gen.params);
        let z = sample_prior(4, 2, &mut seeds.stream("prior", &[0])).unwrap();
        let x = generate(&gen, &z, NoiseMode::None, &mut seeds.stream("obs", &[0])).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0)); // tanh(0) = 0
    }

    #[test]
    fn generate_without_noise_is_deterministic() {
        let cfg = mlp_cfg();
        let seeds = SeedTree::new(4);
        let gen = GeneratorModel::new(&cfg, &mut seeds.stream("init.gen", &[])).unwrap();
        let z = sample_prior(6, 2, &mut seeds.stream("prior", &[0])).unwrap();
        let a = generate(&gen, &z, NoiseMode::None, &mut seeds.stream("obs", &[0])).unwrap();
        let b = generate(&gen, &z, NoiseMode::None, &mut seeds.stream("obs", &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_noise_mean_within_clt_bound() {
        let cfg = mlp_cfg();
        let seeds = SeedTree::new(5);
        let gen = GeneratorModel::new(&cfg, &mut seeds.stream("init.gen", &[])).unwrap();
        let n = 25_000; // n*signal_dim = 1e5 noise draws
        let z = sample_prior(n, 2, &mut seeds.stream("prior", &[0])).unwrap();
        let clean = generate(&gen, &z, NoiseMode::None, &mut seeds.stream("obs", &[0])).unwrap();
        let noisy = generate(&gen, &z, NoiseMode::Gaussian, &mut seeds.stream("obs", &[0])).unwrap();
        let total = noisy.numel() as f64;
        let mean: f64 =
            noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).sum::<f64>() / total;
        assert!(mean.abs() < 4.0 * 0.3 / total.sqrt(), "noise mean {mean}");
    }

    #[test]
    fn zero_weight_inference_gives_unit_sigma() {
        let cfg = mlp_cfg();
        let seeds = SeedTree::new(6);
        let mut inf = InferenceModel::new(&cfg, &mut seeds.stream("init.inf", &[])).unwrap();
        inf.params = zeroed(inf.params);
        let x = Tensor::zeros(&[3, 4]);
        let (mu, sigma, _) = infer(&inf, &x, &mut seeds.stream("reparam", &[0])).unwrap();
        assert!(mu.data().iter().all(|&v| v == 0.0));
        assert!(sigma.data().iter().all(|&v| v == 1.0)); // exp(0)
    }

    #[test]
    fn infer_with_zero_noise_returns_mu() {
        let cfg = mlp_cfg();
        let seeds = SeedTree::new(7);
        let inf = InferenceModel::new(&cfg, &mut seeds.stream("init.inf", &[])).unwrap();
        let x = normal_tensor(&mut seeds.stream("x", &[]), &[5, 4]);
        let eps = Tensor::zeros(&[5, 2]);
        let (mu, _, z) = infer_with_noise(&inf, &x, &eps).unwrap();
        assert_eq!(mu, z);
    }

    #[test]
    fn infer_sample_std_matches_sigma() {
        let cfg = mlp_cfg();
        let seeds = SeedTree::new(8);
        let inf = InferenceModel::new(&cfg, &mut seeds.stream("init.inf", &[])).unwrap();
        let n = 100_000;
        // One repeated input row => constant (mu, sigma) across the batch.
        let one = normal_tensor(&mut seeds.stream("x", &[]), &[4]);
        let x = Tensor::from_vec(vec![n, 4], one.data().repeat(n)).unwrap();
        let (mu, sigma, z) = infer(&inf, &x, &mut seeds.stream("reparam", &[0])).unwrap();
        for dim in 0..2 {
            let var: f64 = (0..n)
                .map(|i| (z.row(i)[dim] - mu.row(i)[dim]).powi(2))
                .sum::<f64>()
                / n as f64;
            let want = sigma.row(0)[dim].powi(2);
            assert!((var - want).abs() / want < 0.05, "dim {dim}: {var} vs {want}");
        }
    }

    #[test]
    fn zero_weight_energy_is_zero_and_batch_consistent() {
        let cfg = mlp_cfg();
        let seeds = SeedTree::new(9);
        let mut en = EnergyModel::new(&cfg, &mut seeds.stream("init.en", &[])).unwrap();
        en.params = zeroed(en.params);
        let x = normal_tensor(&mut seeds.stream("x", &[]), &[4, 4]);
        let f = energy_value(&en, &x).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));

        let en2 = EnergyModel::new(&cfg, &mut seeds.stream("init.en2", &[])).unwrap();
        let row = normal_tensor(&mut seeds.stream("r", &[]), &[4]);
        let same = Tensor::from_vec(vec![3, 4], row.data().repeat(3)).unwrap();
        let f2 = energy_value(&en2, &same).unwrap();
        assert_eq!(f2.data()[0], f2.data()[1]);
        assert_eq!(f2.data()[0], f2.data()[2]);
    }

    #[test]
    fn energy_input_gradient_matches_finite_differences() {
        let cfg = mlp_cfg();
        let seeds = SeedTree::new(10);
        let en = EnergyModel::new(&cfg, &mut seeds.stream("init.en", &[])).unwrap();
        let x = normal_tensor(&mut seeds.stream("x", &[]), &[2, 4]);
        let report = check_gradients(
            |tape, vals| {
                let bound = en.bind(tape, false);
                let f = en.forward(tape, &bound, vals[0])?;
                tape.sum_all(f)
            },
            &[x],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass && !report.kink_flagged, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_stacks_have_consistent_shapes() {
        let seeds = SeedTree::new(11);
        for cfg in [ModelConfig::conv28(4, 16), ModelConfig::conv14(4, 8)] {
            let models = Models::new(cfg.clone(), &seeds).unwrap();
            let z = sample_prior(2, cfg.latent_dim, &mut seeds.stream("prior", &[0])).unwrap();
            let x = generate(&models.gen, &z, NoiseMode::None, &mut seeds.stream("o", &[])).unwrap();
            assert_eq!(&x.shape()[1..], cfg.signal_shape.as_slice());
            assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let (mu, sigma, _) = infer(&models.inf, &x, &mut seeds.stream("r", &[0])).unwrap();
            assert_eq!(mu.shape(), &[2, cfg.latent_dim]);
            assert!(sigma.data().iter().all(|&s| s > 0.0));
            let f = energy_value(&models.en, &x).unwrap();
            assert_eq!(f.shape(), &[2]);
        }
    }

    #[test]
    fn construction_rejects_mismatched_signal_shape() {
        let mut cfg = ModelConfig::conv28(4, 16);
        cfg.signal_shape = vec![1, 14, 14];
        assert!(cfg.validate().is_err());
        let seeds = SeedTree::new(12);
        assert!(Models::new(cfg, &seeds).is_err());
    }
}
