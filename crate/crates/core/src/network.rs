//! Straight-line CNNs: layer vocabulary, validated specs, forward inference
//! with optional activation tracing, and reverse-mode gradients with respect
//! to the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default, skip_serializing_if = "is_false")]
        last_conv: bool,
    },
    Relu,
    Maxpool2d {
        kernel: [usize; 2],
        stride: usize,
    },
    Avgpool2d {
        kernel: [usize; 2],
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
    Flatten,
}

fn one() -> usize {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::Avgpool2d { .. } => "avgpool2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Shapes of the (weight, bias) pair for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel[0], kernel[1]],
                vec![out_channels],
            )),
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }

    fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| Error::ShapeInconsistency { layer, detail };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = spatial(input).ok_or_else(|| bad(format!("conv2d needs [C,H,W] input, got {input:?}")))?;
                if c != in_channels {
                    return Err(bad(format!("conv2d expects {in_channels} input channels, got {c}")));
                }
                if stride == 0 || kernel[0] == 0 || kernel[1] == 0 {
                    return Err(bad("conv2d kernel and stride must be positive".into()));
                }
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if ph < kernel[0] || pw < kernel[1] {
                    return Err(bad(format!("kernel {kernel:?} larger than padded input {ph}x{pw}")));
                }
                Ok(vec![
                    out_channels,
                    (ph - kernel[0]) / stride + 1,
                    (pw - kernel[1]) / stride + 1,
                ])
            }
            LayerSpec::Maxpool2d { kernel, stride } | LayerSpec::Avgpool2d { kernel, stride } => {
                let [c, h, w] = spatial(input).ok_or_else(|| bad(format!("pooling needs [C,H,W] input, got {input:?}")))?;
                if stride == 0 || kernel[0] == 0 || kernel[1] == 0 {
                    return Err(bad("pool kernel and stride must be positive".into()));
                }
                if h < kernel[0] || w < kernel[1] {
                    return Err(bad(format!("pool kernel {kernel:?} larger than input {h}x{w}")));
                }
                Ok(vec![c, (h - kernel[0]) / stride + 1, (w - kernel[1]) / stride + 1])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input.len() != 1 || input[0] != inputs {
                    return Err(bad(format!("dense expects [{inputs}] input, got {input:?}")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(bad(format!("softmax expects a vector, got {input:?}")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn spatial(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub class_labels: Vec<String>,
}

impl NetworkSpec {
    /// Checks end-to-end shape compatibility and returns the output shape of
    /// every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::ShapeInconsistency {
                layer: 0,
                detail: format!("invalid input shape {:?}", self.input_shape),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::ShapeInconsistency {
                layer: 0,
                detail: "network has no layers".into(),
            });
        }
        let shapes = self.layer_shapes()?;
        let flagged: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { last_conv: true, .. }))
            .map(|(i, _)| i)
            .collect();
        if flagged.len() != 1 {
            return Err(Error::ShapeInconsistency {
                layer: flagged.get(1).copied().unwrap_or(0),
                detail: format!("exactly one conv2d must be flagged last_conv, found {}", flagged.len()),
            });
        }
        let last = self.layers.len() - 1;
        let out = &shapes[last];
        if out.len() != 1 || out[0] != self.class_labels.len() {
            return Err(Error::ShapeInconsistency {
                layer: last,
                detail: format!(
                    "final output {:?} does not match {} class labels",
                    out,
                    self.class_labels.len()
                ),
            });
        }
        Ok(shapes)
    }

    /// Output shape of every layer, without the whole-network checks.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.output_shape(i, &current)?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Conv2d { last_conv: true, .. }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Selects the scalar that a gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// One pre-softmax output.
    Logit(usize),
    /// Log-probability of one class (log-softmax of the logits).
    LogProbability(usize),
    /// Spatial mean of one channel of a layer's output; for vector outputs,
    /// the single unit.
    Channel { layer: usize, channel: usize },
    /// Spatial mean of one channel at the last-conv attachment point.
    LastConvChannel(usize),
}

/// Per-layer outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    attach: usize,
}

impl<T: Scalar> ActivationTrace<T> {
    /// A trace that only carries a last-conv stack of shape `[K,H,W]`.
    pub fn from_last_conv(stack: Tensor<T>) -> Result<Self> {
        if stack.rank() != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0],
                actual: stack.shape().to_vec(),
            });
        }
        Ok(ActivationTrace {
            input: stack.clone(),
            outputs: vec![stack],
            attach: 0,
        })
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn layer(&self, index: usize) -> Option<&Tensor<T>> {
        self.outputs.get(index)
    }

    pub fn layers(&self) -> &[Tensor<T>] {
        &self.outputs
    }

    /// The `[K,H,W]` map stack at the post-nonlinearity output of the last
    /// conv layer.
    pub fn last_conv(&self) -> &Tensor<T> {
        &self.outputs[self.attach]
    }

    pub fn last_conv_index(&self) -> usize {
        self.attach
    }

    pub fn channels(&self) -> usize {
        self.last_conv().shape()[0]
    }

    pub fn spatial_extent(&self) -> (usize, usize) {
        let s = self.last_conv().shape();
        (s[1], s[2])
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: Vec<Option<LayerParams<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: NetworkSpec, params: Vec<Option<LayerParams<T>>>) -> Result<Self> {
        let shapes = spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::ShapeInconsistency {
                layer: params.len().min(spec.layers.len()),
                detail: format!("{} parameter slots for {} layers", params.len(), spec.layers.len()),
            });
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::ShapeInconsistency {
                            layer: i,
                            detail: format!(
                                "parameters {:?}/{:?} do not match expected {:?}/{:?}",
                                p.weight.shape(),
                                p.bias.shape(),
                                ws,
                                bs
                            ),
                        });
                    }
                    p.weight.ensure_finite(&format!("layer {i} weight"))?;
                    p.bias.ensure_finite(&format!("layer {i} bias"))?;
                }
                (Some(_), None) => {
                    return Err(Error::ShapeInconsistency {
                        layer: i,
                        detail: format!("{} layer is missing parameters", layer.name()),
                    })
                }
                (None, Some(_)) => {
                    return Err(Error::ShapeInconsistency {
                        layer: i,
                        detail: format!("{} layer takes no parameters", layer.name()),
                    })
                }
            }
        }
        Ok(Network {
            spec,
            params,
            shapes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.class_labels.len()
    }

    pub fn class_labels(&self) -> &[String] {
        &self.spec.class_labels
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.spec.class_labels.iter().position(|l| l == label)
    }

    /// Layer whose output is the last-conv attachment point: the flagged
    /// conv itself, or the ReLU directly after it.
    pub fn last_conv_attachment(&self) -> usize {
        let conv = self.spec.last_conv_layer().expect("validated");
        match self.spec.layers.get(conv + 1) {
            Some(LayerSpec::Relu) => conv + 1,
            _ => conv,
        }
    }

    pub fn last_conv_channels(&self) -> usize {
        self.shapes[self.last_conv_attachment()][0]
    }

    /// Index of the layer producing the logits (the layer before a trailing
    /// softmax, if there is one).
    pub fn logits_layer(&self) -> usize {
        let last = self.num_layers() - 1;
        if matches!(self.spec.layers[last], LayerSpec::Softmax) && last > 0 {
            last - 1
        } else {
            last
        }
    }

    /// Converts all parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
            shapes: self.shapes.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape().to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        x.ensure_finite("network input")
    }

    fn run_prefix(&self, x: &Tensor<T>, upto: usize) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(upto + 1);
        for i in 0..=upto {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let out = self.layer_forward(i, input);
            if !out.is_finite() {
                return Err(Error::NonFinite(format!(
                    "output of layer {i} ({})",
                    self.spec.layers[i].name()
                )));
            }
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Runs inference. When `record` is set, the returned trace holds the
    /// output of every layer.
    pub fn forward(&self, x: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Option<ActivationTrace<T>>)> {
        let outputs = self.run_prefix(x, self.num_layers() - 1)?;
        let logits = outputs[self.logits_layer()].clone();
        let trace = record.then(|| ActivationTrace {
            input: x.clone(),
            outputs,
            attach: self.last_conv_attachment(),
        });
        Ok((logits, trace))
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, false)?.0)
    }

    pub fn trace(&self, x: &Tensor<T>) -> Result<ActivationTrace<T>> {
        Ok(self.forward(x, true)?.1.expect("trace requested"))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }

    fn resolve(&self, objective: Objective) -> Result<(usize, Option<usize>)> {
        let channel_ok = |layer: usize, channel: usize| -> Result<()> {
            let shape = &self.shapes[layer];
            if channel >= shape[0] {
                return Err(Error::UnknownObjective(format!(
                    "channel {channel} of layer {layer} (has {})",
                    shape[0]
                )));
            }
            Ok(())
        };
        match objective {
            Objective::Logit(k) | Objective::LogProbability(k) => {
                if k >= self.num_classes() {
                    return Err(Error::UnknownObjective(format!("class {k}")));
                }
                Ok((self.logits_layer(), Some(k)))
            }
            Objective::Channel { layer, channel } => {
                if layer >= self.num_layers() {
                    return Err(Error::UnknownObjective(format!("layer {layer}")));
                }
                channel_ok(layer, channel)?;
                Ok((layer, Some(channel)))
            }
            Objective::LastConvChannel(channel) => {
                let layer = self.last_conv_attachment();
                channel_ok(layer, channel)?;
                Ok((layer, Some(channel)))
            }
        }
    }

    /// Objective value and its seed gradient at the objective's layer output.
    fn objective_seed(&self, objective: Objective, out: &Tensor<T>) -> (T, Tensor<T>) {
        let mut seed = Tensor::zeros(out.shape());
        match objective {
            Objective::Logit(k) => {
                seed.data_mut()[k] = T::one();
                (out.data()[k], seed)
            }
            Objective::LogProbability(k) => {
                let probs = softmax(out.data());
                for (s, &p) in seed.data_mut().iter_mut().zip(&probs) {
                    *s = -p;
                }
                seed.data_mut()[k] += T::one();
                (log_softmax_at(out.data(), k), seed)
            }
            Objective::Channel { channel, .. } | Objective::LastConvChannel(channel) => {
                let plane: usize = out.shape()[1..].iter().product();
                let w = T::one() / T::of(plane as f64);
                let slice = &out.data()[channel * plane..(channel + 1) * plane];
                let value = slice.iter().copied().sum::<T>() * w;
                for s in &mut seed.data_mut()[channel * plane..(channel + 1) * plane] {
                    *s = w;
                }
                (value, seed)
            }
        }
    }

    pub fn objective_value(&self, x: &Tensor<T>, objective: Objective) -> Result<T> {
        let (layer, _) = self.resolve(objective)?;
        let outputs = self.run_prefix(x, layer)?;
        Ok(self.objective_seed(objective, &outputs[layer]).0)
    }

    /// Objective value and its gradient with respect to the input.
    pub fn value_and_gradient(&self, x: &Tensor<T>, objective: Objective) -> Result<(T, Tensor<T>)> {
        let (layer, _) = self.resolve(objective)?;
        let outputs = self.run_prefix(x, layer)?;
        let (value, seed) = self.objective_seed(objective, &outputs[layer]);
        let grad = self.backward(x, &outputs, layer, seed);
        Ok((value, grad))
    }

    pub fn input_gradient(&self, x: &Tensor<T>, objective: Objective) -> Result<Tensor<T>> {
        Ok(self.value_and_gradient(x, objective)?.1)
    }

    /// Gradient of `Σ seed·logits` with respect to the input.
    pub fn logit_vjp(&self, x: &Tensor<T>, seed: &Tensor<T>) -> Result<Tensor<T>> {
        let layer = self.logits_layer();
        let outputs = self.run_prefix(x, layer)?;
        outputs[layer].ensure_same_shape(seed)?;
        Ok(self.backward(x, &outputs, layer, seed.clone()))
    }

    fn backward(&self, x: &Tensor<T>, outputs: &[Tensor<T>], from: usize, seed: Tensor<T>) -> Tensor<T> {
        let mut grad = seed;
        for i in (0..=from).rev() {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            grad = self.layer_backward(i, input, &outputs[i], &grad);
        }
        grad
    }

    fn layer_forward(&self, i: usize, x: &Tensor<T>) -> Tensor<T> {
        layer_forward(&self.spec.layers[i], self.params[i].as_ref(), &self.shapes[i], x)
    }

    fn layer_backward(&self, i: usize, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        match self.spec.layers[i] {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let p = self.params[i].as_ref().expect("validated");
                conv2d_backward(x.shape(), &p.weight, g, kernel, stride, padding)
            }
            LayerSpec::Relu => x
                .zip_with(g, |v, gv| if v > T::zero() { gv } else { T::zero() })
                .expect("relu shapes"),
            LayerSpec::Maxpool2d { kernel, stride } => maxpool_backward(x, g, kernel, stride),
            LayerSpec::Avgpool2d { kernel, stride } => avgpool_backward(x.shape(), g, kernel, stride),
            LayerSpec::Dense { inputs, outputs } => {
                let p = self.params[i].as_ref().expect("validated");
                let w = p.weight.data();
                let mut gin = vec![T::zero(); inputs];
                for o in 0..outputs {
                    let go = g.data()[o];
                    if go == T::zero() {
                        continue;
                    }
                    for (gi, &wv) in gin.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                        *gi += wv * go;
                    }
                }
                Tensor::vector(gin)
            }
            LayerSpec::Softmax => {
                let dot: T = y.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                y.zip_with(g, |yv, gv| yv * (gv - dot)).expect("softmax shapes")
            }
            LayerSpec::Flatten => g.clone().reshape(x.shape().to_vec()).expect("flatten shape"),
        }
    }
}

pub(crate) fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at<T: Scalar>(z: &[T], k: usize) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = z.iter().map(|&v| (v - m).exp()).sum();
    z[k] - m - s.ln()
}

/// Output columns `lo..hi` whose tap `kx` lands inside a row of width `wd`.
fn valid_columns(ow: usize, wd: usize, stride: usize, kx: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx).div_ceil(stride);
    // largest ox with ox*stride + kx - padding <= wd - 1
    let hi = if wd + padding > kx { ((wd + padding - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    kernel: [usize; 2],
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let [kh, kw] = kernel;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); c_out * oh * ow];
    for o in 0..c_out {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b.data()[o]);
        for c in 0..c_in {
            let xin = &xs[c * h * wd..(c + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = ws[((o * c_in + c) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        let (lo, hi) = valid_columns(ow, wd, stride, kx, padding);
                        if stride == 1 {
                            let start = lo + kx - padding;
                            for (ov, &xv) in orow[lo..hi].iter_mut().zip(&row[start..start + hi - lo]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * row[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv shape")
}

fn conv2d_backward<T: Scalar>(
    in_shape: &[usize],
    w: &Tensor<T>,
    g: &Tensor<T>,
    kernel: [usize; 2],
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (c_in, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (c_out, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let [kh, kw] = kernel;
    let ws = w.data();
    let gs = g.data();
    let mut gin = vec![T::zero(); c_in * h * wd];
    for o in 0..c_out {
        let gplane = &gs[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..c_in {
            let gi = &mut gin[c * h * wd..(c + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = ws[((o * c_in + c) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &mut gi[iy as usize * wd..(iy as usize + 1) * wd];
                        let (lo, hi) = valid_columns(ow, wd, stride, kx, padding);
                        if stride == 1 {
                            let start = lo + kx - padding;
                            for (iv, &gv) in irow[start..start + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                *iv += wv * gv;
                            }
                        } else {
                            for ox in lo..hi {
                                irow[ox * stride + kx - padding] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gin).expect("conv grad shape")
}

fn pool_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: [usize; 2],
    stride: usize,
    out_shape: &[usize],
    max: bool,
) -> Tensor<T> {
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let [kh, kw] = kernel;
    let area = T::of((kh * kw) as f64);
    let xs = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &xs[ch * h * wd..(ch + 1) * h * wd];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if max { T::neg_infinity() } else { T::zero() };
                for ky in 0..kh {
                    for kx in 0..kw {
                        let v = plane[(oy * stride + ky) * wd + ox * stride + kx];
                        if max {
                            if v > acc {
                                acc = v;
                            }
                        } else {
                            acc += v;
                        }
                    }
                }
                out.push(if max { acc } else { acc / area });
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("pool shape")
}

fn maxpool_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, kernel: [usize; 2], stride: usize) -> Tensor<T> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let [kh, kw] = kernel;
    let xs = x.data();
    let mut gin = vec![T::zero(); c * h * wd];
    for ch in 0..c {
        let base = ch * h * wd;
        for oy in 0..oh {
            for ox in 0..ow {
                // first row-major maximum receives the gradient
                let mut best = base + (oy * stride) * wd + ox * stride;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let idx = base + (oy * stride + ky) * wd + ox * stride + kx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                }
                gin[best] += g.data()[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gin).expect("pool grad shape")
}

fn avgpool_backward<T: Scalar>(in_shape: &[usize], g: &Tensor<T>, kernel: [usize; 2], stride: usize) -> Tensor<T> {
    let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let [kh, kw] = kernel;
    let area = T::of((kh * kw) as f64);
    let mut gin = vec![T::zero(); c * h * wd];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g.data()[(ch * oh + oy) * ow + ox] / area;
                for ky in 0..kh {
                    for kx in 0..kw {
                        gin[ch * h * wd + (oy * stride + ky) * wd + ox * stride + kx] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gin).expect("pool grad shape")
}

fn layer_forward<T: Scalar>(layer: &LayerSpec, params: Option<&LayerParams<T>>, out_shape: &[usize], x: &Tensor<T>) -> Tensor<T> {
match *layer {
        LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => {
            let p = params.expect("validated");
            conv2d_forward(x, &p.weight, &p.bias, kernel, stride, padding, out_shape)
        }
        LayerSpec::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        LayerSpec::Maxpool2d { kernel, stride } => pool_forward(x, kernel, stride, out_shape, true),
        LayerSpec::Avgpool2d { kernel, stride } => pool_forward(x, kernel, stride, out_shape, false),
        LayerSpec::Dense { inputs, outputs } => {
            let p = params.expect("validated");
            let w = p.weight.data();
            let xs = x.data();
            let data = (0..outputs)
                .map(|o| {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    p.bias.data()[o] + row.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>()
                })
                .collect();
            Tensor::new(vec![outputs], data).expect("dense shape")
        }
        LayerSpec::Softmax => Tensor::vector(softmax(x.data())),
        LayerSpec::Flatten => x.clone().reshape(out_shape.to_vec()).expect("flatten shape"),
    }
}

/// Runs a layer stack that need not end in class logits, such as the front
/// of a network under construction.
pub fn run_layers<T: Scalar>(spec: &NetworkSpec, params: &[Option<LayerParams<T>>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let shapes = spec.layer_shapes()?;
    if params.len() != spec.layers.len() {
        return Err(Error::ShapeInconsistency {
            layer: params.len().min(spec.layers.len()),
            detail: format!("{} parameter slots for {} layers", params.len(), spec.layers.len()),
        });
    }
    if x.shape() != spec.input_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: spec.input_shape.clone(),
            actual: x.shape().to_vec(),
        });
    }
    let mut current = x.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        if let (Some((ws, bs)), Some(p)) = (layer.param_shapes(), &params[i]) {
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                return Err(Error::ShapeInconsistency {
                    layer: i,
                    detail: "parameter shapes do not match the layer".into(),
                });
            }
        } else if layer.param_shapes().is_some() {
            return Err(Error::ShapeInconsistency {
                layer: i,
                detail: "missing parameters".into(),
            });
        }
        current = layer_forward(layer, params[i].as_ref(), &shapes[i], &current);
    }
    current.ensure_finite("layer stack output")?;
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_identity() -> Network<f32> {
        let spec = NetworkSpec {
            input_shape: vec![1, 1, 2],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: [1, 1],
                    stride: 1,
                    padding: 0,
                    last_conv: true,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 2, outputs: 2 },
            ],
            class_labels: vec!["a".into(), "b".into()],
        };
        let params = vec![
            Some(LayerParams {
                weight: Tensor::filled(&[1, 1, 1, 1], 1.0),
                bias: Tensor::zeros(&[1]),
            }),
            None,
            Some(LayerParams {
                weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        Network::new(spec, params).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let net = dense_identity();
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(net.logits(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn pointwise_conv_scales() {
        let spec = NetworkSpec {
            input_shape: vec![1, 3, 3],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: [1, 1],
                    stride: 1,
                    padding: 0,
                    last_conv: true,
                },
                LayerSpec::Flatten,
            ],
            class_labels: (0..9).map(|i| i.to_string()).collect(),
        };
        let net = Network::new(
            spec,
            vec![
                Some(LayerParams {
                    weight: Tensor::filled(&[1, 1, 1, 1], 2.0f32),
                    bias: Tensor::zeros(&[1]),
                }),
                None,
            ],
        )
        .unwrap();
        let (_, trace) = net.forward(&Tensor::filled(&[1, 3, 3], 1.0), true).unwrap();
        assert!(trace.unwrap().last_conv().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn validation_catches_width_mismatch() {
        let mut net = dense_identity().spec().clone();
        net.layers[2] = LayerSpec::Dense { inputs: 3, outputs: 2 };
        assert!(matches!(
            net.validate(),
            Err(Error::ShapeInconsistency { layer: 2, .. })
        ));
    }

    #[test]
    fn validation_requires_single_last_conv() {
        let mut spec = dense_identity().spec().clone();
        if let LayerSpec::Conv2d { last_conv, .. } = &mut spec.layers[0] {
            *last_conv = false;
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rejects_wrong_input_shape_and_nan() {
        let net = dense_identity();
        assert!(matches!(
            net.logits(&Tensor::zeros(&[2])),
            Err(Error::ShapeMismatch { .. })
        ));
        let x = Tensor::new(vec![1, 1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(net.logits(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn overflow_is_an_error() {
        let net = dense_identity();
        let x = Tensor::new(vec![1, 1, 2], vec![f32::MAX, f32::MAX]).unwrap();
        let mut spec = net.spec().clone();
        spec.layers[2] = LayerSpec::Dense { inputs: 2, outputs: 2 };
        let params = vec![
            net.params()[0].clone(),
            None,
            Some(LayerParams {
                weight: Tensor::filled(&[2, 2], 1.0),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        let net = Network::new(spec, params).unwrap();
        assert!(matches!(net.logits(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unknown_objective() {
        let net = dense_identity();
        let x = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(
            net.input_gradient(&x, Objective::Logit(5)),
            Err(Error::UnknownObjective(_))
        ));
        assert!(net
            .input_gradient(&x, Objective::Channel { layer: 9, channel: 0 })
            .is_err());
        assert!(net.input_gradient(&x, Objective::LastConvChannel(1)).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0f64, 1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let gin = maxpool_backward(&x, &g, [2, 2], 2);
        assert_eq!(gin.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_probability_gradient_sums_to_zero_on_logits() {
        let net = dense_identity().cast::<f64>();
        let x = Tensor::new(vec![1, 1, 2], vec![0.3, -0.7]).unwrap();
        let g = net.input_gradient(&x, Objective::LogProbability(0)).unwrap();
        assert!((g.data()[0] + g.data()[1]).abs() < 1e-12);
    }
}
