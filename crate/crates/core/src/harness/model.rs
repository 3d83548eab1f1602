use rand::Rng;

use super::grad::adapter_vjp;
use crate::adapters::{init_adapter_with_rng, random_adapter, Adapter, InitConfig, LayerShape};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// One frozen base layer with an adapter on top:
/// `z = (W₀ + γ·ΔW)·a + b`, followed by `tanh` when `activation` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    base: Tensor,
    bias: Tensor,
    pub adapter: Adapter,
    pub activation: bool,
}

impl ToyLayer {
    pub fn new(base: Tensor, bias: Tensor, adapter: Adapter, activation: bool) -> Result<Self> {
        let shape = adapter.layer_shape()?;
        let want = shape.weight_shape();
        if base.shape() != want.as_slice() {
            return Err(Error::shape("ToyLayer", base.shape(), &want));
        }
        if bias.shape() != [shape.out_features()] {
            return Err(Error::shape("ToyLayer", bias.shape(), &[shape.out_features()]));
        }
        Ok(Self {
            base,
            bias,
            adapter,
            activation,
        })
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn is_conv(&self) -> bool {
        self.base.ndim() == 4
    }

    fn effective_weight(&self) -> Result<Tensor> {
        self.base.add_scaled(&self.adapter.reconstruct()?, self.adapter.gamma())
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let s = self.base.shape();
        match (self.is_conv(), input) {
            (false, &[q]) if q == s[1] => Ok(vec![s[0]]),
            (true, &[c, h, w]) if c == s[1] && h >= s[2] && w >= s[3] => {
                Ok(vec![s[0], h - s[2] + 1, w - s[3] + 1])
            }
            _ => Err(Error::shape("ToyLayer", s, input)),
        }
    }
}

/// Inputs and targets with a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.ndim() < 2 || targets.ndim() < 2 || inputs.shape()[0] != targets.shape()[0] {
            return Err(Error::shape("Dataset", inputs.shape(), targets.shape()));
        }
        Ok(Self { inputs, targets })
    }

    /// `n` standard-normal inputs and targets.
    pub fn random<R: Rng + ?Sized>(
        input: &[usize],
        output: &[usize],
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let batched = |s: &[usize]| [&[n], s].concat();
        Self::new(
            Tensor::randn(&batched(input), 1.0, rng),
            Tensor::randn(&batched(output), 1.0, rng),
        )
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }
}

/// How adapter factors start out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdapterInit {
    /// The production zero-update initialization.
    ZeroUpdate,
    /// Every factor `N(0, std²)`.
    Random { std: f64 },
}

/// A chain of [`ToyLayer`]s. Only adapter factors are ever modified.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<ToyLayer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl ToyModel {
    /// `input_shape` excludes the batch axis.
    pub fn new(layers: Vec<ToyLayer>, input_shape: &[usize]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a toy model needs at least one layer"));
        }
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
        })
    }

    /// Fully connected chain `dims[0] → dims[1] → …` with `tanh` between
    /// layers and a linear last layer. Base weights are `N(0, 1/in)`, biases
    /// `N(0, 0.01)`.
    pub fn linear_chain<R: Rng + ?Sized>(
        dims: &[usize],
        cfg: &InitConfig,
        init: AdapterInit,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("linear_chain needs at least two dims"));
        }
        let shapes = dims
            .windows(2)
            .map(|w| LayerShape::linear(w[1], w[0]))
            .collect::<Result<Vec<_>>>()?;
        Self::chain(&shapes, &dims[..1], cfg, init, rng)
    }

    /// Stack of valid stride-1 convolutions over `channels[0] × size × size`
    /// inputs, all with the same square kernel.
    pub fn conv_chain<R: Rng + ?Sized>(
        channels: &[usize],
        kernel: usize,
        size: usize,
        cfg: &InitConfig,
        init: AdapterInit,
        rng: &mut R,
    ) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::invalid("conv_chain needs at least two channel counts"));
        }
        let shapes = channels
            .windows(2)
            .map(|w| LayerShape::conv2d(w[1], w[0], kernel))
            .collect::<Result<Vec<_>>>()?;
        Self::chain(&shapes, &[channels[0], size, size], cfg, init, rng)
    }

    fn chain<R: Rng + ?Sized>(
        shapes: &[LayerShape],
        input: &[usize],
        cfg: &InitConfig,
        init: AdapterInit,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, shape) in shapes.iter().enumerate() {
            let fan_in = shape.matrix_dims().1 as f64;
            let base = Tensor::randn(&shape.weight_shape(), 1.0 / fan_in.sqrt(), rng);
            let bias = Tensor::randn(&[shape.out_features()], 0.1, rng);
            let adapter = match init {
                AdapterInit::ZeroUpdate => init_adapter_with_rng(cfg, shape, rng)?,
                AdapterInit::Random { std } => random_adapter(cfg, shape, std, rng)?,
            };
            layers.push(ToyLayer::new(base, bias, adapter, i + 1 < shapes.len())?);
        }
        Self::new(layers, input)
    }

    pub fn layers(&self) -> &[ToyLayer] {
        &self.layers
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut Adapter> {
        self.layers.iter_mut().map(|l| &mut l.adapter)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    /// Raw `ΔW` of every layer, without merge ratios.
    pub fn deltas(&self) -> Result<Vec<Tensor>> {
        self.layers.iter().map(|l| l.adapter.reconstruct()).collect()
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.ndim() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape("ToyModel", x.shape(), &self.input_shape));
        }
        Ok(())
    }

    /// Batched forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            let w = layer.effective_weight()?;
            a = layer_forward(layer, &w, &a)?;
        }
        Ok(a)
    }

    /// Mean squared error over `data` and its gradient with respect to
    /// every adapter factor, layer by layer in [`Adapter::named_tensors`]
    /// order.
    pub fn loss_and_grads(&self, data: &Dataset) -> Result<(f64, Vec<Vec<Tensor>>)> {
        self.check_batch(data.inputs())?;
        let weights = self
            .layers
            .iter()
            .map(|l| l.effective_weight())
            .collect::<Result<Vec<_>>>()?;
        let mut acts = vec![data.inputs().clone()];
        for (layer, w) in self.layers.iter().zip(&weights) {
            let next = layer_forward(layer, w, acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        let pred = acts.last().expect("non-empty");
        let loss = mse_loss(pred, data.targets())?;
        let mut upstream = mse_grad(pred, data.targets());
        let mut grads = vec![Vec::new(); self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation {
                upstream = upstream.zip_with("tanh backward", &acts[l + 1], |g, y| g * (1.0 - y * y))?;
            }
            let (dw, dx) = if layer.is_conv() {
                conv_backward(&weights[l], &acts[l], &upstream, l > 0)?
            } else {
                linear_backward(&weights[l], &acts[l], &upstream, l > 0)?
            };
            let g_delta = dw.scale(layer.adapter.gamma());
            grads[l] = adapter_vjp(&layer.adapter, &g_delta)?;
            if let Some(dx) = dx {
                upstream = dx;
            }
        }
        Ok((loss, grads))
    }

    pub(crate) fn params_mut(&mut self) -> Vec<Vec<&mut Tensor>> {
        self.layers.iter_mut().map(|l| l.adapter.tensors_mut()).collect()
    }
}

/// `mean((pred − target)²)` over every element.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

fn mse_grad(pred: &Tensor, target: &Tensor) -> Tensor {
    let k = 2.0 / pred.len() as f64;
    pred.zip_with("mse_grad", target, |p, t| k * (p - t))
        .expect("shapes checked by mse_loss")
}

fn layer_forward(layer: &ToyLayer, w: &Tensor, a: &Tensor) -> Result<Tensor> {
    let z = if layer.is_conv() {
        conv_forward(w, &layer.bias, a)?
    } else {
        let mut z = matmul(a, &w.transpose()?)?;
        let p = layer.bias.len();
        for row in z.data_mut().chunks_exact_mut(p) {
            for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                *v += b;
            }
        }
        z
    };
    Ok(if layer.activation { z.map(f64::tanh) } else { z })
}

/// `dW = δᵀ·A`, `dA = δ·W`.
fn linear_backward(w: &Tensor, a: &Tensor, delta: &Tensor, need_dx: bool) -> Result<(Tensor, Option<Tensor>)> {
    let dw = matmul(&delta.transpose()?, a)?;
    let dx = if need_dx { Some(matmul(delta, w)?) } else { None };
    Ok((dw, dx))
}

struct ConvDims {
    n: usize,
    co: usize,
    ci: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(kernel: &Tensor, x: &Tensor) -> ConvDims {
    let (co, ci, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    ConvDims {
        n,
        co,
        ci,
        k,
        h,
        w,
        oh: h + 1 - k,
        ow: w + 1 - k,
    }
}

fn conv_forward(kernel: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    let d = conv_dims(kernel, x);
    let plane = d.oh * d.ow;
    let mut out = vec![0.0; d.n * d.co * plane];
    let (kd, xd) = (kernel.data(), x.data());
    for s in 0..d.n {
        for o in 0..d.co {
            let dst = &mut out[(s * d.co + o) * plane..(s * d.co + o + 1) * plane];
            dst.fill(bias.data()[o]);
            for i in 0..d.ci {
                let xs = &xd[(s * d.ci + i) * d.h * d.w..];
                for a in 0..d.k {
                    for b in 0..d.k {
                        let kv = kd[((o * d.ci + i) * d.k + a) * d.k + b];
                        for y in 0..d.oh {
                            let src = &xs[(y + a) * d.w + b..(y + a) * d.w + b + d.ow];
                            for (v, &xv) in dst[y * d.ow..(y + 1) * d.ow].iter_mut().zip(src) {
                                *v += kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[d.n, d.co, d.oh, d.ow], out)
}

/// `dK[o,i,a,b] = Σ δ[n,o,y,x]·x[n,i,y+a,x+b]` and the matching input
/// gradient.
fn conv_backward(
    kernel: &Tensor,
    x: &Tensor,
    delta: &Tensor,
    need_dx: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let d = conv_dims(kernel, x);
    let mut dk = vec![0.0; kernel.len()];
    let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
    let (kd, xd, gd) = (kernel.data(), x.data(), delta.data());
    let plane = d.oh * d.ow;
    for s in 0..d.n {
        for o in 0..d.co {
            let g = &gd[(s * d.co + o) * plane..(s * d.co + o + 1) * plane];
            for i in 0..d.ci {
                let base = (s * d.ci + i) * d.h * d.w;
                for a in 0..d.k {
                    for b in 0..d.k {
                        let kidx = ((o * d.ci + i) * d.k + a) * d.k + b;
                        let mut acc = 0.0;
                        for y in 0..d.oh {
                            let row = base + (y + a) * d.w + b;
                            let gy = &g[y * d.ow..(y + 1) * d.ow];
                            for (&gv, &xv) in gy.iter().zip(&xd[row..row + d.ow]) {
                                acc += gv * xv;
                            }
                            if need_dx {
                                let kv = kd[kidx];
                                for (t, &gv) in dx[row..row + d.ow].iter_mut().zip(gy) {
                                    *t += kv * gv;
                                }
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    let dk = Tensor::new(kernel.shape(), dk)?;
    let dx = if need_dx { Some(Tensor::new(x.shape(), dx)?) } else { None };
    Ok((dk, dx))
}
