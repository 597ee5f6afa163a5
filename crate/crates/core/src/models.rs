//! DCGAN-style networks: the generator `G(c, v)`, the K-headed joint
//! generator of the DCGANxK baselines, and convolutional stacks used as pair
//! discriminator, conditional discriminator, encoder and evaluation
//! classifiers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_params, Bound, LayerSpec, ParamSet};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Image side; one of 16, 32, 64.
    pub image_size: usize,
    pub channels: usize,
    pub content_dim: usize,
    pub view_dim: usize,
    /// Feature width of the outermost conv layer.
    pub width: usize,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { image_size: 32, channels: 3, content_dim: 32, view_dim: 8, width: 64, leaky_slope: 0.2 }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if ![16, 32, 64].contains(&self.image_size) {
            return Err(Error::Invalid(format!("image size {} not in {{16, 32, 64}}", self.image_size)));
        }
        if self.channels != 3 || self.content_dim == 0 || self.view_dim == 0 || self.width == 0 {
            return Err(Error::Invalid(format!("bad architecture {self:?}")));
        }
        Ok(())
    }

    /// Number of x2 resampling stages between 4x4 and the image.
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    pub fn latent_dim(&self) -> usize {
        self.content_dim + self.view_dim
    }
}

/// Generator: `concat(c, v)` -> dense to a 4x4 map -> transposed-conv stages
/// (BN + ReLU) -> one tanh head per output image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub arch: ArchConfig,
    pub heads: usize,
}

/// Strided conv stack: conv (optional BN) + leaky ReLU, then conv + BN +
/// leaky ReLU per further stage down to 4x4, optional hidden dense layer,
/// dense output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub image_size: usize,
    pub in_ch: usize,
    pub width: usize,
    pub first_bn: bool,
    pub hidden: Option<usize>,
    pub out_dim: usize,
    pub output: OutputKind,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Sigmoid,
    Linear,
}

impl ConvStackSpec {
    /// `D(x1, x2)` over channel-concatenated inputs of `images` images.
    pub fn discriminator(arch: &ArchConfig, images: usize) -> Self {
        Self {
            image_size: arch.image_size,
            in_ch: arch.channels * images,
            width: arch.width,
            first_bn: false,
            hidden: None,
            out_dim: 1,
            output: OutputKind::Sigmoid,
            leaky_slope: arch.leaky_slope,
        }
    }

    /// `E(x)`: like the discriminator, but BN on the first layer and a
    /// linear `content_dim` output.
    pub fn encoder(arch: &ArchConfig) -> Self {
        Self {
            image_size: arch.image_size,
            in_ch: arch.channels,
            width: arch.width,
            first_bn: true,
            hidden: None,
            out_dim: arch.content_dim,
            output: OutputKind::Linear,
            leaky_slope: arch.leaky_slope,
        }
    }

    fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    fn top_channels(&self) -> usize {
        self.width << (self.stages() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "net", rename_all = "snake_case")]
pub enum NetSpec {
    Generator(GeneratorSpec),
    ConvStack(ConvStackSpec),
}

impl NetSpec {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            NetSpec::Generator(g) => generator_layers(g),
            NetSpec::ConvStack(s) => stack_layers(s),
        }
    }
}

fn generator_layers(spec: &GeneratorSpec) -> Vec<LayerSpec> {
    let a = &spec.arch;
    let stages = a.stages();
    let ch0 = a.width << (stages - 1);
    let mut l = vec![
        LayerSpec::Dense { name: "fc".into(), in_f: a.latent_dim(), out_f: ch0 * 16, bias: false },
        LayerSpec::BatchNorm { name: "bn0".into(), ch: ch0 },
    ];
    let mut ch = ch0;
    for i in 1..stages {
        l.push(LayerSpec::ConvTranspose { name: format!("up{i}"), in_ch: ch, out_ch: ch / 2, k: KERNEL });
        l.push(LayerSpec::BatchNorm { name: format!("bn{i}"), ch: ch / 2 });
        ch /= 2;
    }
    for h in 0..spec.heads {
        l.push(LayerSpec::ConvTranspose { name: head_name(spec.heads, h), in_ch: ch, out_ch: a.channels, k: KERNEL });
    }
    l
}

fn head_name(heads: usize, h: usize) -> String {
    if heads == 1 {
        "out".into()
    } else {
        format!("out{h}")
    }
}

fn stack_layers(s: &ConvStackSpec) -> Vec<LayerSpec> {
    let mut l = vec![LayerSpec::Conv { name: "conv0".into(), in_ch: s.in_ch, out_ch: s.width, k: KERNEL }];
    if s.first_bn {
        l.push(LayerSpec::BatchNorm { name: "bn0".into(), ch: s.width });
    }
    let mut ch = s.width;
    for i in 1..s.stages() {
        l.push(LayerSpec::Conv { name: format!("conv{i}"), in_ch: ch, out_ch: ch * 2, k: KERNEL });
        l.push(LayerSpec::BatchNorm { name: format!("bn{i}"), ch: ch * 2 });
        ch *= 2;
    }
    let mut feat = ch * 16;
    if let Some(h) = s.hidden {
        l.push(LayerSpec::Dense { name: "hidden".into(), in_f: feat, out_f: h, bias: true });
        feat = h;
    }
    l.push(LayerSpec::Dense { name: "fc".into(), in_f: feat, out_f: s.out_dim, bias: true });
    l
}

/// Graph bindings of one network for one forward pass, collecting the
/// batch statistics of train-mode batch norms.
pub struct Binding<T> {
    bound: Bound,
    train: bool,
    stats: Vec<(String, BatchStats<T>)>,
}

/// A network: its spec plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetSpec,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec.layers(), seed)?;
        Ok(Self { spec, params })
    }

    pub fn generator(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        Self::new(NetSpec::Generator(GeneratorSpec { arch: *arch, heads: 1 }), seed)
    }

    /// K-headed generator of the DCGANxK baselines, input length `C + V`.
    pub fn joint_generator(arch: &ArchConfig, heads: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if ![2, 4, 8].contains(&heads) {
            return Err(Error::Invalid(format!("joint generator needs K in {{2, 4, 8}}, got {heads}")));
        }
        Self::new(NetSpec::Generator(GeneratorSpec { arch: *arch, heads }), seed)
    }

    /// Pair discriminator over `(x1, x2)`; also used as the conditional
    /// discriminator `D(x, y)`.
    pub fn pair_discriminator(arch: &ArchConfig, seed: u64) -> Result<Self> {
        Self::tuple_discriminator(arch, 2, seed)
    }

    /// Discriminator over channel-concatenated tuples of `images` images.
    pub fn tuple_discriminator(arch: &ArchConfig, images: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        Self::new(NetSpec::ConvStack(ConvStackSpec::discriminator(arch, images)), seed)
    }

    pub fn encoder(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        Self::new(NetSpec::ConvStack(ConvStackSpec::encoder(arch)), seed)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut params = ParamSet::new();
        for (name, p) in self.params.iter() {
            let mut q = crate::nn::Param::new(p.value.cast(), p.trainable);
            q.m = p.m.iter().map(|v| U::from_f64(v.as_f64())).collect();
            q.v = p.v.iter().map(|v| U::from_f64(v.as_f64())).collect();
            params.insert(name, q).expect("names already unique");
        }
        params.step = self.params.step;
        Network { spec: self.spec.clone(), params }
    }

    /// Bind parameters into `g`. `track` enables parameter gradients,
    /// `train` selects batch statistics for batch norm.
    pub fn bind(&self, g: &mut Graph<T>, track: bool, train: bool) -> Binding<T> {
        Binding { bound: self.params.bind(g, track), train, stats: Vec::new() }
    }

    /// Fold a finished pass back in: parameter gradients and running stats.
    pub fn absorb(&mut self, g: &Graph<T>, b: Binding<T>) {
        self.params.accumulate_grads(g, &b.bound);
        let momentum = T::from_f64(BN_MOMENTUM);
        for (name, stats) in b.stats {
            let mut mean = self.params.get(&format!("{name}.running_mean")).expect("bn buffer").value.clone();
            let mut var = self.params.get(&format!("{name}.running_var")).expect("bn buffer").value.clone();
            stats.update_running(mean.data_mut(), var.data_mut(), momentum);
            self.params.get_mut(&format!("{name}.running_mean")).expect("bn buffer").value = mean;
            self.params.get_mut(&format!("{name}.running_var")).expect("bn buffer").value = var;
        }
    }

    fn bn(&self, g: &mut Graph<T>, b: &mut Binding<T>, name: &str, x: Var) -> Result<Var> {
        let gamma = b.bound.var(&format!("{name}.gamma"))?;
        let beta = b.bound.var(&format!("{name}.beta"))?;
        let eps = T::from_f64(BN_EPS);
        if b.train {
            let (y, stats) = g.batchnorm2d(x, gamma, beta, eps, BnMode::Train)?;
            b.stats.push((name.to_string(), stats.expect("train mode returns stats")));
            Ok(y)
        } else {
            let mean = self.params.value(&format!("{name}.running_mean"))?.data();
            let var = self.params.value(&format!("{name}.running_var"))?.data();
            let (y, _) = g.batchnorm2d(x, gamma, beta, eps, BnMode::Eval { mean, var })?;
            Ok(y)
        }
    }

    fn generator_spec(&self) -> Result<&GeneratorSpec> {
        match &self.spec {
            NetSpec::Generator(s) => Ok(s),
            _ => Err(Error::Invalid("network is not a generator".into())),
        }
    }

    fn stack_spec(&self) -> Result<&ConvStackSpec> {
        match &self.spec {
            NetSpec::ConvStack(s) => Ok(s),
            _ => Err(Error::Invalid("network is not a conv stack".into())),
        }
    }

    /// Generator forward: `c: [N, C]`, `v: [N, V]` -> one `[N, 3, H, H]`
    /// image batch per head.
    pub fn generate(&self, g: &mut Graph<T>, b: &mut Binding<T>, c: Var, v: Var) -> Result<Vec<Var>> {
        let spec = *self.generator_spec()?;
        let a = spec.arch;
        let (cs, vs) = (g.shape(c).to_vec(), g.shape(v).to_vec());
        if cs.len() != 2 || vs.len() != 2 || cs[0] != vs[0] || cs[1] + vs[1] != a.latent_dim() {
            return Err(Error::Shape(format!("generator latents {cs:?} + {vs:?} do not make [N, {}]", a.latent_dim())));
        }
        let z = g.concat(&[c, v], 1)?;
        self.generate_from_z(g, b, z)
    }

    /// Generator forward from a single latent `z: [N, C + V]`.
    pub fn generate_from_z(&self, g: &mut Graph<T>, b: &mut Binding<T>, z: Var) -> Result<Vec<Var>> {
        let spec = *self.generator_spec()?;
        let a = spec.arch;
        let n = g.shape(z)[0];
        if g.shape(z) != [n, a.latent_dim()] {
            return Err(Error::Shape(format!("generator latent {:?}, expected [N, {}]", g.shape(z), a.latent_dim())));
        }
        let stages = a.stages();
        let ch0 = a.width << (stages - 1);
        let w = b.bound.var("fc.weight")?;
        let h = g.dense(z, w, None)?;
        let h = g.reshape(h, &[n, ch0, 4, 4])?;
        let h = self.bn(g, b, "bn0", h)?;
        let mut h = g.relu(h);
        for i in 1..stages {
            let k = b.bound.var(&format!("up{i}.weight"))?;
            h = g.conv_transpose2d(h, k, 2, 1)?;
            h = self.bn(g, b, &format!("bn{i}"), h)?;
            h = g.relu(h);
        }
        let mut outs = Vec::with_capacity(spec.heads);
        for head in 0..spec.heads {
            let k = b.bound.var(&format!("{}.weight", head_name(spec.heads, head)))?;
            let o = g.conv_transpose2d(h, k, 2, 1)?;
            outs.push(g.tanh(o));
        }
        Ok(outs)
    }

    /// Conv stack forward on `[N, in_ch, H, H]`; returns `(output, features)`
    /// where `features` is the penultimate activation.
    pub fn stack_forward(&self, g: &mut Graph<T>, b: &mut Binding<T>, x: Var) -> Result<(Var, Var)> {
        let s = self.stack_spec()?.clone();
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != s.in_ch || xs[2] != s.image_size || xs[3] != s.image_size {
            return Err(Error::Shape(format!(
                "conv stack expects [N, {}, {}, {}], got {xs:?}",
                s.in_ch, s.image_size, s.image_size
            )));
        }
        let n = xs[0];
        let k0 = b.bound.var("conv0.weight")?;
        let mut h = g.conv2d(x, k0, 2, 1)?;
        if s.first_bn {
            h = self.bn(g, b, "bn0", h)?;
        }
        h = g.leaky_relu(h, s.leaky_slope);
        for i in 1..s.stages() {
            let k = b.bound.var(&format!("conv{i}.weight"))?;
            h = g.conv2d(h, k, 2, 1)?;
            h = self.bn(g, b, &format!("bn{i}"), h)?;
            h = g.leaky_relu(h, s.leaky_slope);
        }
        let mut feat = g.reshape(h, &[n, s.top_channels() * 16])?;
        if s.hidden.is_some() {
            let w = b.bound.var("hidden.weight")?;
            let bias = b.bound.var("hidden.bias")?;
            let hd = g.dense(feat, w, Some(bias))?;
            feat = g.leaky_relu(hd, s.leaky_slope);
        }
        let w = b.bound.var("fc.weight")?;
        let bias = b.bound.var("fc.bias")?;
        let out = g.dense(feat, w, Some(bias))?;
        let out = match s.output {
            OutputKind::Sigmoid => g.sigmoid(out),
            OutputKind::Linear => out,
        };
        Ok((out, feat))
    }

    /// `D(x1, ..., xk)`: channel-concatenate and score; returns `[N, 1]`.
    pub fn discriminate(&self, g: &mut Graph<T>, b: &mut Binding<T>, images: &[Var]) -> Result<Var> {
        let first = g.shape(images[0]).to_vec();
        if images.iter().any(|v| g.shape(*v) != first.as_slice()) {
            return Err(Error::Shape("discriminator inputs differ in shape".into()));
        }
        let x = if images.len() == 1 { images[0] } else { g.concat(images, 1)? };
        Ok(self.stack_forward(g, b, x)?.0)
    }

    /// Eval-mode, gradient-free generator call on plain tensors.
    pub fn sample(&self, c: &Tensor<T>, v: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false, false);
        let (cv, vv) = (g.constant(c.clone()), g.constant(v.clone()));
        let outs = self.generate(&mut g, &mut b, cv, vv)?;
        Ok(outs.into_iter().map(|o| g.take_value(o)).collect())
    }

    /// Eval-mode, gradient-free conv stack call; returns `(output, features)`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false, false);
        let xv = g.constant(x.clone());
        let (o, f) = self.stack_forward(&mut g, &mut b, xv)?;
        Ok((g.take_value(o), g.take_value(f)))
    }
}

/// i.i.d. standard normal content and view codes: `([batch, C], [batch, V])`.
pub fn sample_priors(r: &mut Rng, batch: usize, content_dim: usize, view_dim: usize) -> (Tensor<f32>, Tensor<f32>) {
    let c = Tensor::new(&[batch, content_dim], rng::standard_normal(r, batch * content_dim)).expect("sized");
    let v = Tensor::new(&[batch, view_dim], rng::standard_normal(r, batch * view_dim)).expect("sized");
    (c, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchConfig {
        ArchConfig { image_size: 16, width: 8, content_dim: 6, view_dim: 3, ..ArchConfig::default() }
    }

    #[test]
    fn stage_counts() {
        assert_eq!(ArchConfig::default().stages(), 3);
        assert_eq!(small().stages(), 2);
        let big = ArchConfig { image_size: 64, ..ArchConfig::default() };
        assert_eq!(big.stages(), 4);
        assert!(ArchConfig { image_size: 48, ..ArchConfig::default() }.validate().is_err());
    }

    #[test]
    fn generator_layer_plan_for_default_arch() {
        let spec = GeneratorSpec { arch: ArchConfig::default(), heads: 1 };
        let layers = generator_layers(&spec);
        assert_eq!(layers[0], LayerSpec::Dense { name: "fc".into(), in_f: 40, out_f: 256 * 16, bias: false });
        assert!(layers.contains(&LayerSpec::ConvTranspose { name: "up1".into(), in_ch: 256, out_ch: 128, k: 4 }));
        assert!(layers.contains(&LayerSpec::ConvTranspose { name: "out".into(), in_ch: 64, out_ch: 3, k: 4 }));
    }

    #[test]
    fn discriminator_and_encoder_differ_only_in_first_bn_and_head() {
        let a = ArchConfig::default();
        let d = stack_layers(&ConvStackSpec::discriminator(&a, 1));
        let e = stack_layers(&ConvStackSpec::encoder(&a));
        assert!(!d.iter().any(|l| matches!(l, LayerSpec::BatchNorm { name, .. } if name == "bn0")));
        assert!(e.iter().any(|l| matches!(l, LayerSpec::BatchNorm { name, .. } if name == "bn0")));
        assert_eq!(e.last(), Some(&LayerSpec::Dense { name: "fc".into(), in_f: 256 * 16, out_f: 32, bias: true }));
    }

    #[test]
    fn generator_rejects_wrong_latent_sizes() {
        let gnet = Network::<f32>::generator(&small(), 1).unwrap();
        let c = Tensor::zeros(&[2, 5]);
        let v = Tensor::zeros(&[2, 3]);
        assert!(gnet.sample(&c, &v).is_err());
    }

    #[test]
    fn joint_generator_needs_valid_k() {
        assert!(Network::<f32>::joint_generator(&small(), 3, 0).is_err());
        assert!(Network::<f32>::joint_generator(&small(), 4, 0).is_ok());
    }
}
