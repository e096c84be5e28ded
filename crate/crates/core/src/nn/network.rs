use serde::{Deserialize, Serialize};

use super::layer::{Cache, Layer, LayerKind, ParamGrad};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// One convolution block: conv → ReLU → optional average pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    #[serde(default = "two")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    /// Average-pooling window after the ReLU; 0 disables pooling.
    #[serde(default = "two")]
    pub pool: usize,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn four() -> usize {
    4
}

/// Declarative architecture: conv blocks, then ReLU hidden FC layers. The
/// extractor output (last hidden activation) feeds both heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    #[serde(default)]
    pub conv: Vec<ConvBlock>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default = "four")]
    pub proxy_outputs: usize,
}

impl Architecture {
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut shape = self.input.to_vec();
        let mut extractor = Vec::new();
        for block in &self.conv {
            let conv = LayerKind::Conv2D {
                in_channels: shape[0],
                out_channels: block.out_channels,
                kernel: block.kernel,
                stride: block.stride,
                padding: block.padding,
            };
            shape = Layer::new(conv.clone(), &shape)?.output_shape().to_vec();
            extractor.push(conv);
            extractor.push(LayerKind::ReLU);
            if block.pool > 0 {
                let pool = LayerKind::AvgPool { window: block.pool };
                shape = Layer::new(pool.clone(), &shape)?.output_shape().to_vec();
                extractor.push(pool);
            }
        }
        let mut width: usize = shape.iter().product();
        for &h in &self.hidden {
            extractor.push(LayerKind::FullyConnected {
                inputs: width,
                outputs: h,
            });
            extractor.push(LayerKind::ReLU);
            width = h;
        }
        Ok(NetworkSpec {
            input: self.input.to_vec(),
            extractor,
            classes: self.classes,
            proxy_outputs: self.proxy_outputs,
        })
    }
}

/// Fully expanded layer chain; the canonical descriptor stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub extractor: Vec<LayerKind>,
    pub classes: usize,
    pub proxy_outputs: usize,
}

impl NetworkSpec {
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub class_logits: Tensor,
    pub proxy_logits: Tensor,
}

/// Per-layer gradients, aligned with [`Network`]'s layers. Non-parameter
/// extractor layers hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub extractor: Vec<Option<ParamGrad>>,
    pub classifier: ParamGrad,
    pub proxy: ParamGrad,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        let zero = |l: &Layer| match (l.weight(), l.bias()) {
            (Some(w), Some(b)) => Some(ParamGrad::zeros_like(w, b)),
            _ => None,
        };
        Gradients {
            extractor: net.extractor.iter().map(zero).collect(),
            classifier: zero(&net.classifier).expect("classifier params"),
            proxy: zero(&net.proxy_head).expect("proxy params"),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.extractor.len() != other.extractor.len() {
            return Err(Error::dim(
                "Gradients::add_assign",
                &[self.extractor.len()],
                &[other.extractor.len()],
            ));
        }
        for (a, b) in self.extractor.iter_mut().zip(&other.extractor) {
            match (a, b) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, None) => {}
                _ => return Err(Error::State("gradient layouts differ".into())),
            }
        }
        self.classifier.add_assign(&other.classifier)?;
        self.proxy.add_assign(&other.proxy)
    }

    pub fn scale(&mut self, k: f64) {
        self.extractor.iter_mut().flatten().for_each(|g| g.scale(k));
        self.classifier.scale(k);
        self.proxy.scale(k);
    }

    fn param_grads(&self) -> impl Iterator<Item = &ParamGrad> {
        self.extractor
            .iter()
            .flatten()
            .chain(std::iter::once(&self.classifier))
            .chain(std::iter::once(&self.proxy))
    }

    /// Flattened in the same order as [`Network::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.param_grads() {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(g.bias.data());
        }
        out
    }

    pub fn extractor_is_zero(&self) -> bool {
        self.extractor.iter().flatten().all(ParamGrad::is_zero)
    }

    pub fn is_zero(&self) -> bool {
        self.param_grads().all(ParamGrad::is_zero)
    }
}

/// Batch-mean augmented inputs of every projected layer (extractor
/// parameter layers and the classifier).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMeans {
    pub extractor: Vec<Option<Vec<f64>>>,
    pub classifier: Vec<f64>,
}

/// Extractor `E`, classifier head `C` and proxy head `F`. Both heads read
/// the same extractor output.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    extractor: Vec<Layer>,
    classifier: Layer,
    proxy_head: Layer,
    /// Batch means of further input copies, absorbed after the cached ones.
    queued_means: Vec<LayerMeans>,
}

fn kind_label(i: usize, kind: &LayerKind) -> String {
    format!("#{i} {}", kind.name())
}

impl Network {
    /// Builds the layer chain with all parameters zero.
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        if spec.classes == 0 || spec.proxy_outputs == 0 {
            return Err(Error::Config("head sizes must be positive".into()));
        }
        let mut shape = spec.input.clone();
        let mut extractor = Vec::with_capacity(spec.extractor.len());
        let mut prev = "input".to_string();
        for (i, kind) in spec.extractor.iter().enumerate() {
            let label = kind_label(i, kind);
            let layer = Layer::new(kind.clone(), &shape)
                .map_err(|e| Error::Config(format!("layer chain break between {prev} and {label}: {e}")))?;
            shape = layer.output_shape().to_vec();
            extractor.push(layer);
            prev = label;
        }
        let features: usize = shape.iter().product();
        let head = |outputs: usize, name: &str| {
            Layer::new(
                LayerKind::FullyConnected {
                    inputs: features,
                    outputs,
                },
                &[features],
            )
            .map_err(|e| Error::Config(format!("layer chain break between {prev} and {name}: {e}")))
        };
        Ok(Network {
            classifier: head(spec.classes, "classifier")?,
            proxy_head: head(spec.proxy_outputs, "proxy head")?,
            spec: spec.clone(),
            extractor,
            queued_means: Vec::new(),
        })
    }

    /// He-initialised network; draws happen in layer order, extractor first,
    /// then classifier, then proxy head.
    pub fn init(spec: &NetworkSpec, rng: &mut RngState) -> Result<Self> {
        let mut net = Network::from_spec(spec)?;
        for layer in net.extractor.iter_mut() {
            layer.init_he(rng);
        }
        net.classifier.init_he(rng);
        net.proxy_head.init_he(rng);
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn extractor(&self) -> &[Layer] {
        &self.extractor
    }

    pub fn classifier(&self) -> &Layer {
        &self.classifier
    }

    pub fn proxy_head(&self) -> &Layer {
        &self.proxy_head
    }

    pub(crate) fn extractor_mut(&mut self) -> &mut [Layer] {
        &mut self.extractor
    }

    pub(crate) fn classifier_mut(&mut self) -> &mut Layer {
        &mut self.classifier
    }

    pub(crate) fn proxy_head_mut(&mut self) -> &mut Layer {
        &mut self.proxy_head
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_shape()[0]
    }

    pub fn class_count(&self) -> usize {
        self.spec.classes
    }

    pub fn proxy_count(&self) -> usize {
        self.spec.proxy_outputs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input
    }

    fn all_layers(&self) -> impl Iterator<Item = &Layer> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
            .chain(std::iter::once(&self.proxy_head))
    }

    fn all_layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .chain(std::iter::once(&mut self.proxy_head))
    }

    pub fn num_params(&self) -> usize {
        self.all_layers()
            .filter_map(|l| Some(l.weight()?.len() + l.bias()?.len()))
            .sum()
    }

    /// All parameters, layer by layer (weight then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.all_layers() {
            if let (Some(w), Some(b)) = (l.weight(), l.bias()) {
                out.extend_from_slice(w.data());
                out.extend_from_slice(b.data());
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dim("set_flat_params", &[self.num_params()], &[params.len()]));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                op: "set_flat_params",
                detail: "non-finite parameter".into(),
            });
        }
        let mut off = 0;
        for l in self.all_layers_mut() {
            if let Some((w, b)) = l.params_mut() {
                let wl = w.len();
                w.data_mut().copy_from_slice(&params[off..off + wl]);
                off += wl;
                let bl = b.len();
                b.data_mut().copy_from_slice(&params[off..off + bl]);
                off += bl;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() < 2 || x.shape()[1..] != self.spec.input[..] {
            let mut want = vec![x.shape().first().copied().unwrap_or(0)];
            want.extend_from_slice(&self.spec.input);
            return Err(Error::dim("forward", x.shape(), &want));
        }
        Ok(())
    }

    fn run_extractor(&self, x: &Tensor, mut keep: impl FnMut(usize, Cache)) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.extractor.iter().enumerate() {
            let (next, cache) = layer.forward_pure(&h)?;
            keep(i, cache);
            h = next;
        }
        let batch = h.shape()[0];
        h.reshape(&[batch, self.feature_dim()])
    }

    /// Inference without touching any cache.
    pub fn infer(&self, x: &Tensor) -> Result<ForwardOutput> {
        let features = self.run_extractor(x, |_, _| {})?;
        let (class_logits, _) = self.classifier.forward_pure(&features)?;
        let (proxy_logits, _) = self.proxy_head.forward_pure(&features)?;
        Ok(ForwardOutput {
            features,
            class_logits,
            proxy_logits,
        })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.run_extractor(x, |_, _| {})
    }

    /// Batch-mean projector inputs for `x` at the current parameters,
    /// computed without touching any cache.
    pub fn batch_means(&self, x: &Tensor) -> Result<LayerMeans> {
        let mut extractor = vec![None; self.extractor.len()];
        let features = self.run_extractor(x, |i, c| {
            if self.extractor[i].kind().has_params() {
                extractor[i] = c.mean_input();
            }
        })?;
        let (_, c_cache) = self.classifier.forward_pure(&features)?;
        let classifier = c_cache
            .mean_input()
            .ok_or_else(|| Error::State("classifier input has no batch mean".into()))?;
        Ok(LayerMeans { extractor, classifier })
    }

    /// Training forward pass: fills every layer's input cache and the
    /// batch-mean projector inputs.
    pub fn forward(&mut self, x: &Tensor) -> Result<ForwardOutput> {
        let mut caches = Vec::with_capacity(self.extractor.len());
        let features = self.run_extractor(x, |_, c| caches.push(c))?;
        let (class_logits, c_cache) = self.classifier.forward_pure(&features)?;
        let (proxy_logits, p_cache) = self.proxy_head.forward_pure(&features)?;
        for (layer, cache) in self.extractor.iter_mut().zip(caches) {
            if layer.kind().has_params() {
                layer.cached_mean_input = cache.mean_input();
            }
            layer.cached_input = Some(cache);
        }
        self.classifier.cached_mean_input = c_cache.mean_input();
        self.classifier.cached_input = Some(c_cache);
        self.proxy_head.cached_mean_input = p_cache.mean_input();
        self.proxy_head.cached_input = Some(p_cache);
        self.queued_means.clear();
        Ok(ForwardOutput {
            features,
            class_logits,
            proxy_logits,
        })
    }

    /// Backpropagates head gradients (plus an optional direct gradient on
    /// the features) through the network and clears the input caches.
    pub fn backward(
        &mut self,
        dlogits_class: &Tensor,
        dlogits_proxy: Option<&Tensor>,
        dfeatures_extra: Option<&Tensor>,
    ) -> Result<Gradients> {
        if self.all_layers().any(|l| !l.has_cached_input()) {
            return Err(Error::State("backward called without a preceding forward pass".into()));
        }
        let c_cache = self.classifier.cached_input.take().expect("checked");
        let p_cache = self.proxy_head.cached_input.take().expect("checked");
        let ex_caches: Vec<Cache> = self
            .extractor
            .iter_mut()
            .map(|l| l.cached_input.take().expect("checked"))
            .collect();

        let batch = match &c_cache {
            Cache::Fc(f) => f.shape()[0],
            _ => unreachable!("classifier is fully connected"),
        };
        let expect = |t: &Tensor, cols: usize, what: &'static str| -> Result<()> {
            if t.shape() != [batch, cols] {
                return Err(Error::dim(what, t.shape(), &[batch, cols]));
            }
            Ok(())
        };
        expect(dlogits_class, self.spec.classes, "backward (class logits)")?;

        let (mut dfeat, classifier) = self.classifier.backward_with(&c_cache, dlogits_class)?;
        let classifier = classifier.expect("classifier params");
        let proxy = match dlogits_proxy {
            Some(dp) => {
                expect(dp, self.spec.proxy_outputs, "backward (proxy logits)")?;
                let (dfp, g) = self.proxy_head.backward_with(&p_cache, dp)?;
                dfeat.axpy(1.0, &dfp)?;
                g.expect("proxy params")
            }
            None => ParamGrad::zeros_like(
                self.proxy_head.weight().expect("proxy weight"),
                self.proxy_head.bias().expect("proxy bias"),
            ),
        };
        if let Some(extra) = dfeatures_extra {
            expect(extra, self.feature_dim(), "backward (feature gradient)")?;
            dfeat.axpy(1.0, extra)?;
        }

        let mut grads: Vec<Option<ParamGrad>> = vec![None; self.extractor.len()];
        let mut dh = dfeat;
        for (i, layer) in self.extractor.iter().enumerate().rev() {
            let out_shape: Vec<usize> = std::iter::once(batch).chain(layer.output_shape().iter().copied()).collect();
            let dy = dh.reshape(&out_shape)?;
            let (dx, g) = layer.backward_with(&ex_caches[i], &dy)?;
            grads[i] = g;
            dh = dx;
        }
        Ok(Gradients {
            extractor: grads,
            classifier,
            proxy,
        })
    }

    /// Takes (and clears) the batch-mean inputs recorded by the last forward.
    pub fn take_mean_inputs(&mut self) -> Result<LayerMeans> {
        let missing = || Error::State("no batch-mean input cached; run a forward pass first".into());
        let mut extractor = Vec::with_capacity(self.extractor.len());
        for layer in &self.extractor {
            if layer.kind().has_params() && layer.cached_mean_input.is_none() {
                return Err(missing());
            }
        }
        let classifier = self.classifier.cached_mean_input.take().ok_or_else(missing)?;
        for layer in self.extractor.iter_mut() {
            extractor.push(layer.cached_mean_input.take());
        }
        self.proxy_head.cached_mean_input = None;
        self.queued_means.clear();
        Ok(LayerMeans { extractor, classifier })
    }

    /// Takes the cached batch means followed by any queued copies.
    pub fn take_all_mean_inputs(&mut self) -> Result<Vec<LayerMeans>> {
        let queued = std::mem::take(&mut self.queued_means);
        let mut all = vec![self.take_mean_inputs()?];
        all.extend(queued);
        Ok(all)
    }

    /// Peeks at the cached batch means without clearing them.
    pub fn mean_inputs(&self) -> Option<LayerMeans> {
        Some(LayerMeans {
            extractor: self.extractor.iter().map(|l| l.cached_mean_input.clone()).collect(),
            classifier: self.classifier.cached_mean_input.clone()?,
        })
    }

    pub fn set_mean_inputs(&mut self, means: LayerMeans) -> Result<()> {
        if means.extractor.len() != self.extractor.len() {
            return Err(Error::dim("set_mean_inputs", &[self.extractor.len()], &[means.extractor.len()]));
        }
        for (layer, m) in self.extractor.iter_mut().zip(means.extractor) {
            layer.cached_mean_input = m;
        }
        self.classifier.cached_mean_input = Some(means.classifier);
        self.queued_means.clear();
        Ok(())
    }

    /// Caches the first snapshot and queues the rest behind it.
    pub fn set_all_mean_inputs(&mut self, mut means: Vec<LayerMeans>) -> Result<()> {
        if means.is_empty() {
            return Err(Error::State("no mean-input snapshots to cache".into()));
        }
        let rest = means.split_off(1);
        self.set_mean_inputs(means.pop().expect("one snapshot"))?;
        self.queued_means = rest;
        Ok(())
    }

    /// Plain gradient descent on every parameter: `W ← W − lr·dW`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (layer, g) in self.extractor.iter_mut().zip(&grads.extractor) {
            if let (Some((w, b)), Some(g)) = (layer.params_mut(), g) {
                w.axpy(-lr, &g.weight)?;
                b.axpy(-lr, &g.bias)?;
            }
        }
        apply_plain(&mut self.classifier, &grads.classifier, lr)?;
        apply_plain(&mut self.proxy_head, &grads.proxy, lr)
    }
}

pub(crate) fn apply_plain(layer: &mut Layer, g: &ParamGrad, lr: f64) -> Result<()> {
    let (w, b) = layer
        .params_mut()
        .ok_or_else(|| Error::State("layer has no parameters".into()))?;
    w.axpy(-lr, &g.weight)?;
    b.axpy(-lr, &g.bias)
}
