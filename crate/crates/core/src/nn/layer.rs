use serde::{Deserialize, Serialize};

use super::im2col::{col2im_batch, im2col_batch, ConvGeometry};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "relu")]
    ReLU,
    AvgPool {
        window: usize,
    },
}

fn default_kernel() -> usize {
    2
}

fn default_stride() -> usize {
    1
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::FullyConnected { .. } | LayerKind::Conv2D { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::Conv2D { .. } => "conv2d",
            LayerKind::ReLU => "relu",
            LayerKind::AvgPool { .. } => "avgpool",
        }
    }
}

/// Weight and bias gradient of one parameterised layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamGrad {
    pub fn zeros_like(weight: &Tensor, bias: &Tensor) -> Self {
        ParamGrad {
            weight: Tensor::zeros(weight.shape()),
            bias: Tensor::zeros(bias.shape()),
        }
    }

    /// `[dW | db]`, the gradient in the bias-augmented input space.
    pub fn augmented(&self) -> Result<Tensor> {
        let (out, inp) = self.weight.dims2()?;
        let mut data = Vec::with_capacity(out * (inp + 1));
        for r in 0..out {
            data.extend_from_slice(self.weight.row(r));
            data.push(self.bias.data()[r]);
        }
        Ok(Tensor::from_parts_unchecked(vec![out, inp + 1], data))
    }

    pub fn from_augmented(aug: &Tensor) -> Result<Self> {
        let (out, cols) = aug.dims2()?;
        if cols < 2 {
            return Err(Error::dim("from_augmented", aug.shape(), &[out, 2]));
        }
        let inp = cols - 1;
        let mut w = Vec::with_capacity(out * inp);
        let mut b = Vec::with_capacity(out);
        for r in 0..out {
            let row = aug.row(r);
            w.extend_from_slice(&row[..inp]);
            b.push(row[inp]);
        }
        Ok(ParamGrad {
            weight: Tensor::from_parts_unchecked(vec![out, inp], w),
            bias: Tensor::from_parts_unchecked(vec![out], b),
        })
    }

    pub fn add_assign(&mut self, other: &ParamGrad) -> Result<()> {
        self.weight.axpy(1.0, &other.weight)?;
        self.bias.axpy(1.0, &other.bias)
    }

    pub fn scale(&mut self, k: f64) {
        self.weight.data_mut().iter_mut().for_each(|v| *v *= k);
        self.bias.data_mut().iter_mut().for_each(|v| *v *= k);
    }

    pub fn is_zero(&self) -> bool {
        self.weight.data().iter().chain(self.bias.data()).all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Cache {
    /// Flattened `B×in` input.
    Fc(Tensor),
    /// Patch matrix `patch_dim × (B·patches)` plus the batch size.
    Conv(Tensor, usize),
    Relu(Tensor),
    Pool(usize),
}

impl Cache {
    /// Mean over the batch (and, for convolutions, over every patch) of the
    /// projector-space input, with a trailing constant-1 coordinate.
    pub(crate) fn mean_input(&self) -> Option<Vec<f64>> {
        match self {
            Cache::Fc(x) => {
                let (b, d) = x.dims2().ok()?;
                let mut mean = vec![0.0; d + 1];
                for r in 0..b {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().take(d).for_each(|m| *m /= b as f64);
                mean[d] = 1.0;
                Some(mean)
            }
            Cache::Conv(cols, _) => {
                let (pd, n) = cols.dims2().ok()?;
                let mut mean: Vec<f64> = (0..pd).map(|r| cols.row(r).iter().sum::<f64>() / n as f64).collect();
                mean.push(1.0);
                Some(mean)
            }
            Cache::Relu(_) | Cache::Pool(_) => None,
        }
    }
}

/// One layer of the network. Parameterised layers store their weight as a
/// 2-D matrix acting on (flattened or patch) inputs: `out × in` for FC and
/// `out_channels × (k·k·in_channels)` for convolutions.
#[derive(Clone, Debug)]
pub struct Layer {
    kind: LayerKind,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    weight: Option<Tensor>,
    bias: Option<Tensor>,
    pub(crate) cached_input: Option<Cache>,
    pub(crate) cached_mean_input: Option<Vec<f64>>,
}

impl Layer {
    /// Builds a layer for per-sample inputs of `input_shape`, with zeroed
    /// parameters.
    pub fn new(kind: LayerKind, input_shape: &[usize]) -> Result<Self> {
        let in_size: usize = input_shape.iter().product();
        let (output_shape, weight_shape) = match &kind {
            LayerKind::FullyConnected { inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return Err(Error::Config("fc dimensions must be positive".into()));
                }
                if in_size != *inputs {
                    return Err(Error::Config(format!(
                        "fc expects {inputs} inputs but receives {input_shape:?} ({in_size})"
                    )));
                }
                (vec![*outputs], Some(vec![*outputs, *inputs]))
            }
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = input_shape else {
                    return Err(Error::Config(format!("conv2d needs a C×H×W input, got {input_shape:?}")));
                };
                if c != *in_channels || *out_channels == 0 {
                    return Err(Error::Config(format!(
                        "conv2d expects {in_channels} input channels but receives {c}"
                    )));
                }
                let g = ConvGeometry {
                    channels: c,
                    height: h,
                    width: w,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                g.validate().map_err(|e| Error::Config(e.to_string()))?;
                (
                    vec![*out_channels, g.out_height(), g.out_width()],
                    Some(vec![*out_channels, g.patch_dim()]),
                )
            }
            LayerKind::ReLU => (input_shape.to_vec(), None),
            LayerKind::AvgPool { window } => {
                let &[c, h, w] = input_shape else {
                    return Err(Error::Config(format!("avgpool needs a C×H×W input, got {input_shape:?}")));
                };
                if *window == 0 || h < *window || w < *window {
                    return Err(Error::Config(format!("avgpool window {window} does not fit {h}x{w}")));
                }
                (vec![c, h / window, w / window], None)
            }
        };
        let (weight, bias) = match weight_shape {
            Some(ws) => {
                let out = ws[0];
                (Some(Tensor::zeros(&ws)), Some(Tensor::zeros(&[out])))
            }
            None => (None, None),
        };
        Ok(Layer {
            kind,
            input_shape: input_shape.to_vec(),
            output_shape,
            weight,
            bias,
            cached_input: None,
            cached_mean_input: None,
        })
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn has_cached_input(&self) -> bool {
        self.cached_input.is_some()
    }

    pub fn cached_mean_input(&self) -> Option<&[f64]> {
        self.cached_mean_input.as_deref()
    }

    /// Dimension of the projector space: fan-in plus the bias coordinate.
    pub fn augmented_input_dim(&self) -> Option<usize> {
        self.weight.as_ref().map(|w| w.shape()[1] + 1)
    }

    pub fn set_params(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        match (&self.weight, &self.bias) {
            (Some(w), Some(b)) if w.shape() == weight.shape() && b.shape() == bias.shape() => {
                self.weight = Some(weight);
                self.bias = Some(bias);
                Ok(())
            }
            (Some(w), _) => Err(Error::dim("set_params", w.shape(), weight.shape())),
            (None, _) => Err(Error::State(format!("{} layer has no parameters", self.kind.name()))),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match (&mut self.weight, &mut self.bias) {
            (Some(w), Some(b)) => Some((w, b)),
            _ => None,
        }
    }

    /// He-style init: weights `N(0, 2/fan_in)`, biases zero.
    pub(crate) fn init_he(&mut self, rng: &mut RngState) {
        if let Some(w) = &mut self.weight {
            let fan_in = w.shape()[1];
            let std = (2.0 / fan_in as f64).sqrt();
            w.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
        }
        if let Some(b) = &mut self.bias {
            b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn batch_of(&self, x: &Tensor) -> Result<usize> {
        let per: usize = self.input_shape.iter().product();
        let b = x.shape()[0];
        let fits = match self.kind {
            LayerKind::FullyConnected { .. } | LayerKind::ReLU => x.len() == b * per,
            _ => x.shape()[1..] == self.input_shape[..],
        };
        if !fits || x.rank() < 2 {
            let mut want = vec![b];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::dim(self.kind.name(), x.shape(), &want));
        }
        Ok(b)
    }

    fn out_tensor(&self, batch: usize, data: Vec<f64>) -> Tensor {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.output_shape);
        Tensor::from_parts_unchecked(shape, data)
    }

    fn conv_geometry(&self) -> Option<ConvGeometry> {
        match self.kind {
            LayerKind::Conv2D {
                kernel, stride, padding, ..
            } => Some(ConvGeometry {
                channels: self.input_shape[0],
                height: self.input_shape[1],
                width: self.input_shape[2],
                kernel,
                stride,
                padding,
            }),
            _ => None,
        }
    }

    /// Pure forward pass; the returned cache feeds [`Layer::backward_with`].
    pub(crate) fn forward_pure(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let batch = self.batch_of(x)?;
        match &self.kind {
            LayerKind::FullyConnected { inputs, outputs } => {
                let flat = x.reshape(&[batch, *inputs])?;
                let w = self.weight.as_ref().expect("fc weight");
                let b = self.bias.as_ref().expect("fc bias");
                let mut y = matmul(&flat, &w.transpose()?)?;
                let yd = y.data_mut();
                for r in 0..batch {
                    for (o, bias) in yd[r * outputs..(r + 1) * outputs].iter_mut().zip(b.data()) {
                        *o += bias;
                    }
                }
                y.ensure_finite("fc forward")?;
                Ok((self.out_tensor(batch, y.into_data()), Cache::Fc(flat)))
            }
            LayerKind::Conv2D { out_channels, .. } => {
                let g = self.conv_geometry().expect("conv geometry");
                let cols = im2col_batch(x.data(), batch, &g);
                let w = self.weight.as_ref().expect("conv weight");
                let b = self.bias.as_ref().expect("conv bias");
                let prod = matmul(w, &cols)?;
                let np = g.patches();
                let pd = prod.data();
                let mut out = vec![0.0; batch * out_channels * np];
                for o in 0..*out_channels {
                    let bias = b.data()[o];
                    for bi in 0..batch {
                        let src = &pd[o * batch * np + bi * np..o * batch * np + (bi + 1) * np];
                        let dst = &mut out[(bi * out_channels + o) * np..(bi * out_channels + o + 1) * np];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s + bias;
                        }
                    }
                }
                let y = self.out_tensor(batch, out);
                y.ensure_finite("conv2d forward")?;
                Ok((y, Cache::Conv(cols, batch)))
            }
            LayerKind::ReLU => {
                let y = Tensor::from_parts_unchecked(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| v.max(0.0)).collect(),
                );
                Ok((y, Cache::Relu(x.clone())))
            }
            LayerKind::AvgPool { window } => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let (oh, ow) = (h / window, w / window);
                let norm = 1.0 / (window * window) as f64;
                let xd = x.data();
                let mut out = vec![0.0; batch * c * oh * ow];
                for plane in 0..batch * c {
                    let src = &xd[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for i in 0..*window {
                                for j in 0..*window {
                                    s += src[(oy * window + i) * w + ox * window + j];
                                }
                            }
                            dst[oy * ow + ox] = s * norm;
                        }
                    }
                }
                Ok((self.out_tensor(batch, out), Cache::Pool(batch)))
            }
        }
    }

    /// Backward pass from an explicit cache. Returns the input gradient and,
    /// for parameterised layers, the parameter gradient.
    pub(crate) fn backward_with(&self, cache: &Cache, dy: &Tensor) -> Result<(Tensor, Option<ParamGrad>)> {
        let mut in_shape = vec![dy.shape()[0]];
        in_shape.extend_from_slice(&self.input_shape);
        match (&self.kind, cache) {
            (LayerKind::FullyConnected { outputs, .. }, Cache::Fc(flat)) => {
                let batch = flat.shape()[0];
                let dy = dy.reshape(&[batch, *outputs])?;
                let w = self.weight.as_ref().expect("fc weight");
                let dw = matmul(&dy.transpose()?, flat)?;
                let mut db = vec![0.0; *outputs];
                for r in 0..batch {
                    for (d, v) in db.iter_mut().zip(dy.row(r)) {
                        *d += v;
                    }
                }
                let dx = matmul(&dy, w)?.reshape(&in_shape)?;
                Ok((
                    dx,
                    Some(ParamGrad {
                        weight: dw,
                        bias: Tensor::from_parts_unchecked(vec![*outputs], db),
                    }),
                ))
            }
            (LayerKind::Conv2D { out_channels, .. }, Cache::Conv(cols, batch)) => {
                let g = self.conv_geometry().expect("conv geometry");
                let np = g.patches();
                let oc = *out_channels;
                let dyd = dy.data();
                if dy.len() != batch * oc * np {
                    return Err(Error::dim("conv2d backward", dy.shape(), &[*batch, oc, np]));
                }
                // Regroup to out_channels × (B·patches), matching the column layout.
                let mut dres = vec![0.0; oc * batch * np];
                let mut db = vec![0.0; oc];
                for bi in 0..*batch {
                    for o in 0..oc {
                        let src = &dyd[(bi * oc + o) * np..(bi * oc + o + 1) * np];
                        dres[o * batch * np + bi * np..o * batch * np + (bi + 1) * np].copy_from_slice(src);
                        db[o] += src.iter().sum::<f64>();
                    }
                }
                let dres = Tensor::from_parts_unchecked(vec![oc, batch * np], dres);
                let w = self.weight.as_ref().expect("conv weight");
                let dw = matmul(&dres, &cols.transpose()?)?;
                let dcols = matmul(&w.transpose()?, &dres)?;
                let dx = Tensor::from_parts_unchecked(in_shape, col2im_batch(&dcols, *batch, &g));
                Ok((
                    dx,
                    Some(ParamGrad {
                        weight: dw,
                        bias: Tensor::from_parts_unchecked(vec![oc], db),
                    }),
                ))
            }
            (LayerKind::ReLU, Cache::Relu(x)) => {
                if x.len() != dy.len() {
                    return Err(Error::dim("relu backward", x.shape(), dy.shape()));
                }
                let d = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((Tensor::from_parts_unchecked(x.shape().to_vec(), d), None))
            }
            (LayerKind::AvgPool { window }, Cache::Pool(batch)) => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let (oh, ow) = (h / window, w / window);
                let norm = 1.0 / (window * window) as f64;
                let dyd = dy.data();
                if dy.len() != batch * c * oh * ow {
                    return Err(Error::dim("avgpool backward", dy.shape(), &[*batch, c, oh, ow]));
                }
                let mut dx = vec![0.0; batch * c * h * w];
                for plane in 0..batch * c {
                    let src = &dyd[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = src[oy * ow + ox] * norm;
                            for i in 0..*window {
                                for j in 0..*window {
                                    dst[(oy * window + i) * w + ox * window + j] += g;
                                }
                            }
                        }
                    }
                }
                Ok((Tensor::from_parts_unchecked(in_shape, dx), None))
            }
            _ => Err(Error::State(format!("cache does not belong to a {} layer", self.kind.name()))),
        }
    }
}
