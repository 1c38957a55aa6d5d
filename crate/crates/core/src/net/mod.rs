//! Small differentiable classifiers with hand-written reverse-mode gradients.
//!
//! Four architecture families are supported: a softmax-linear model, a ReLU
//! MLP, a small strided convnet with global average pooling, and a tiny
//! per-pixel predictor (conv encoder plus 1x1 head) for dense prediction.
//! A model makes one or more *decisions* per example: one for classifiers,
//! one per pixel for the dense predictor. Losses are defined per decision.

mod layers;
pub mod loss;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};
use layers::Layer;
pub use loss::{
    accuracy, adv_loss, argmax, cross_entropy, pixel_accuracy, smooth_labels, softmax, LossConfig,
    DEFAULT_KAPPA, DEFAULT_SMOOTHING,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    SoftmaxLinear,
    Mlp {
        hidden: Vec<usize>,
    },
    /// 3x3 convolutions with the given output channels and strides, then
    /// global average pooling and a linear head. Input is `[H, W, C]`.
    SmallConv {
        channels: Vec<usize>,
        strides: Vec<usize>,
    },
    /// Stride-1 3x3 conv encoder followed by a 1x1 classifier head; one
    /// decision per pixel. Input is `[H, W, C]`.
    DensePredictor {
        channels: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Shape of one example, without the batch axis.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let spec = Self {
            arch,
            input_shape,
            classes,
        };
        spec.layers()?;
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.arch, Architecture::DensePredictor { .. })
    }

    /// Decisions made per example.
    pub fn decisions_per_example(&self) -> usize {
        if self.is_dense() {
            self.input_shape[0] * self.input_shape[1]
        } else {
            1
        }
    }

    fn image_dims(&self) -> Result<(usize, usize, usize)> {
        match self.input_shape.as_slice() {
            &[h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
            _ => Err(invalid(format!(
                "convolutional models need an [H, W, C] input, got {:?}",
                self.input_shape
            ))),
        }
    }

    pub(crate) fn layers(&self) -> Result<Vec<Layer>> {
        if self.classes < 2 {
            return Err(invalid("at least two classes are required"));
        }
        if self.input_len() == 0 {
            return Err(invalid("input shape must be nonempty"));
        }
        let c = self.classes;
        let mut out = Vec::new();
        match &self.arch {
            Architecture::SoftmaxLinear => out.push(Layer::Dense {
                inputs: self.input_len(),
                outputs: c,
                relu: false,
            }),
            Architecture::Mlp { hidden } => {
                let mut width = self.input_len();
                for &h in hidden {
                    if h == 0 {
                        return Err(invalid("hidden widths must be positive"));
                    }
                    out.push(Layer::Dense {
                        inputs: width,
                        outputs: h,
                        relu: true,
                    });
                    width = h;
                }
                out.push(Layer::Dense {
                    inputs: width,
                    outputs: c,
                    relu: false,
                });
            }
            Architecture::SmallConv { channels, strides } => {
                if channels.is_empty() || channels.len() != strides.len() {
                    return Err(invalid("small-conv needs one stride per conv layer"));
                }
                let (mut h, mut w, mut ch) = self.image_dims()?;
                for (&oc, &s) in channels.iter().zip(strides) {
                    if oc == 0 || s == 0 {
                        return Err(invalid("channel widths and strides must be positive"));
                    }
                    let layer = Layer::Conv {
                        height: h,
                        width: w,
                        in_ch: ch,
                        out_ch: oc,
                        kernel: 3,
                        stride: s,
                        relu: true,
                    };
                    (h, w) = layer.out_hw();
                    ch = oc;
                    out.push(layer);
                }
                out.push(Layer::GlobalAvgPool {
                    height: h,
                    width: w,
                    channels: ch,
                });
                out.push(Layer::Dense {
                    inputs: ch,
                    outputs: c,
                    relu: false,
                });
            }
            Architecture::DensePredictor { channels } => {
                let (h, w, mut ch) = self.image_dims()?;
                for &oc in channels {
                    if oc == 0 {
                        return Err(invalid("channel widths must be positive"));
                    }
                    out.push(Layer::Conv {
                        height: h,
                        width: w,
                        in_ch: ch,
                        out_ch: oc,
                        kernel: 3,
                        stride: 1,
                        relu: true,
                    });
                    ch = oc;
                }
                out.push(Layer::Conv {
                    height: h,
                    width: w,
                    in_ch: ch,
                    out_ch: c,
                    kernel: 1,
                    stride: 1,
                    relu: false,
                });
            }
        }
        for pair in out.windows(2) {
            debug_assert_eq!(pair[0].out_len(), pair[1].in_len());
        }
        Ok(out)
    }

    /// Expected `(name, shape)` of every parameter, in order.
    pub fn param_layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers()?.iter().enumerate() {
            if let Some((w, b)) = layer.param_shapes() {
                let wshape = match layer {
                    Layer::Dense { .. } => vec![w[2], w[3]],
                    _ => w.to_vec(),
                };
                out.push((format!("layer{i}.weight"), wshape));
                out.push((format!("layer{i}.bias"), vec![b]));
            }
        }
        Ok(out)
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform weights (He bound for layers feeding a rectifier,
    /// `1/sqrt(fan_in)` for the head) and zero biases.
    pub fn init(spec: &ModelSpec, rng: &mut RngStream) -> Result<Self> {
        let layers = spec.layers()?;
        let mut tensors = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if layer.param_shapes().is_none() {
                continue;
            }
            let fan_in = layer.fan_in() as f64;
            let bound = if layer.relu() {
                libm::sqrt(6.0 / fan_in)
            } else {
                libm::sqrt(1.0 / fan_in)
            };
            let layout = spec.param_layout()?;
            let (wname, wshape) = &layout[tensors.len()];
            let (bname, bshape) = &layout[tensors.len() + 1];
            debug_assert!(wname.starts_with(&format!("layer{i}.")));
            let w = Tensor::uniform(rng, wshape, T::from_f64(-bound), T::from_f64(bound))?;
            tensors.push((wname.clone(), w));
            tensors.push((bname.clone(), Tensor::zeros(bshape)));
        }
        Ok(Self { tensors })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        Ok(Self {
            tensors: spec
                .param_layout()?
                .into_iter()
                .map(|(n, s)| {
                    let t = Tensor::zeros(&s);
                    (n, t)
                })
                .collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| invalid(format!("no parameter named {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                left: slot.1.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.param_layout()?;
        if layout.len() != self.tensors.len() {
            return Err(invalid("parameter count does not match the model spec"));
        }
        for ((name, shape), (have_name, t)) in layout.iter().zip(&self.tensors) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "params",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
            t.check_finite("params")?;
        }
        Ok(())
    }
}

/// Gradients of the mean (thresholded) loss.
#[derive(Debug, Clone)]
pub struct GradientBundle<T = f32> {
    /// Same shape as the input batch.
    pub input: Tensor<T>,
    /// Same order and shapes as the model parameters; empty when parameter
    /// gradients were not requested.
    pub params: Vec<Tensor<T>>,
    /// Per-decision loss after thresholding.
    pub losses: Vec<T>,
    pub mean_loss: T,
}

/// How per-decision loss gradients are weighted before backpropagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Reduction {
    /// Mean over every decision in the batch.
    Mean,
    /// Mean over decisions within each example, summed over examples, so each
    /// example's input gradient is that of its own loss.
    PerExample,
}

/// A model spec bound to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T = f32> {
    pub spec: ModelSpec,
    pub params: ModelParams<T>,
    layers: Vec<Layer>,
}

struct Trace<T> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(spec: ModelSpec, params: ModelParams<T>) -> Result<Self> {
        params.validate(&spec)?;
        let layers = spec.layers()?;
        Ok(Self {
            spec,
            params,
            layers,
        })
    }

    pub fn init(spec: ModelSpec, rng: &mut RngStream) -> Result<Self> {
        let params = ModelParams::init(&spec, rng)?;
        Self::new(spec, params)
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            spec: self.spec.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Replace parameters, checking them against the model spec.
    pub fn set_params(&mut self, params: ModelParams<T>) -> Result<()> {
        params.validate(&self.spec)?;
        self.params = params;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Batch size of `x`, after checking its trailing shape.
    pub fn batch_len(&self, x: &Tensor<T>) -> Result<usize> {
        let s = x.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            let mut want = vec![0];
            want.extend_from_slice(&self.spec.input_shape);
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: want,
                right: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn logits_shape(&self, n: usize) -> Vec<usize> {
        if self.spec.is_dense() {
            vec![n, self.spec.input_shape[0], self.spec.input_shape[1], self.spec.classes]
        } else {
            vec![n, self.spec.classes]
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<(usize, Trace<T>)> {
        let n = self.batch_len(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.as_slice().to_vec());
        let mut p = 0;
        for layer in &self.layers {
            let mut y = vec![T::ZERO; n * layer.out_len()];
            let (w, b): (&[T], &[T]) = if layer.param_shapes().is_some() {
                let w = self.params.tensors[p].1.as_slice();
                let b = self.params.tensors[p + 1].1.as_slice();
                p += 2;
                (w, b)
            } else {
                (&[], &[])
            };
            layer.forward(n, acts.last().unwrap(), w, b, &mut y);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("forward"));
            }
            acts.push(y);
        }
        Ok((n, Trace { acts }))
    }

    /// Logits: `[d, C]` for classifiers, `[d, H, W, C]` for dense prediction.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, mut trace) = self.run(x)?;
        Tensor::new(self.logits_shape(n), trace.acts.pop().unwrap())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Reverse-mode gradients of the batch-mean of `min(CE, kappa)` with
    /// respect to the input and every parameter. Decisions whose loss is at
    /// or above `kappa` contribute zero gradient.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        targets: &Tensor<T>,
        kappa: Option<T>,
    ) -> Result<GradientBundle<T>> {
        self.gradients(x, targets, kappa, Reduction::Mean, true)
    }

    pub(crate) fn gradients(
        &self,
        x: &Tensor<T>,
        targets: &Tensor<T>,
        kappa: Option<T>,
        reduction: Reduction,
        want_params: bool,
    ) -> Result<GradientBundle<T>> {
        let (n, trace) = self.run(x)?;
        let c = self.spec.classes;
        let decisions = n * self.spec.decisions_per_example();
        let logits = Tensor::new(self.logits_shape(n), trace.acts.last().unwrap().clone())?;
        let raw = cross_entropy(&logits, targets)?;
        let losses = adv_loss(&raw, kappa)?;
        if decisions == 0 {
            return Err(Error::Empty("batch"));
        }
        let mean_loss = losses.iter().fold(T::ZERO, |a, &l| a + l) / T::from_usize(decisions);

        let weight = match reduction {
            Reduction::Mean => T::ONE / T::from_usize(decisions),
            Reduction::PerExample => T::ONE / T::from_usize(self.spec.decisions_per_example()),
        };
        // d min(CE, kappa) / d logits = softmax - target below the cap, 0 at or above.
        let mut dy = vec![T::ZERO; logits.len()];
        let mut logp = vec![T::ZERO; c];
        for (i, ((z, t), g)) in logits
            .as_slice()
            .chunks(c)
            .zip(targets.as_slice().chunks(c))
            .zip(dy.chunks_mut(c))
            .enumerate()
        {
            if let Some(k) = kappa {
                if !(raw[i] < k) {
                    continue;
                }
            }
            loss::log_softmax_row(z, &mut logp);
            for ((gv, &lp), &tv) in g.iter_mut().zip(&logp).zip(t) {
                *gv = (lp.exp() - tv) * weight;
            }
        }

        let mut param_grads: Vec<Vec<T>> = if want_params {
            self.params
                .tensors
                .iter()
                .map(|(_, t)| vec![T::ZERO; t.len()])
                .collect()
        } else {
            Vec::new()
        };
        let mut p = self.params.tensors.len();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let mut dx = vec![T::ZERO; n * layer.in_len()];
            let has_params = layer.param_shapes().is_some();
            if has_params {
                p -= 2;
            }
            let w: &[T] = if has_params {
                self.params.tensors[p].1.as_slice()
            } else {
                &[]
            };
            let grads = if has_params && want_params {
                let (head, tail) = param_grads.split_at_mut(p + 1);
                Some((head[p].as_mut_slice(), tail[0].as_mut_slice()))
            } else {
                None
            };
            layer.backward(n, &trace.acts[li], &trace.acts[li + 1], w, &mut dy, &mut dx, grads);
            dy = dx;
        }

        let input = Tensor::new(x.shape().to_vec(), dy)?;
        input.check_finite("backward")?;
        let params = param_grads
            .into_iter()
            .zip(&self.params.tensors)
            .map(|(g, (_, t))| Tensor::new(t.shape().to_vec(), g))
            .collect::<Result<Vec<_>>>()?;
        if params.iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(GradientBundle {
            input,
            params,
            losses,
            mean_loss,
        })
    }

    /// Per-decision loss `min(CE(x), kappa)` without gradients.
    pub fn losses(&self, x: &Tensor<T>, targets: &Tensor<T>, kappa: Option<T>) -> Result<Vec<T>> {
        let logits = self.forward(x)?;
        adv_loss(&cross_entropy(&logits, targets)?, kappa)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(dim: usize, classes: usize) -> ModelSpec {
        ModelSpec::new(Architecture::SoftmaxLinear, vec![dim], classes).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = linear(3, 4);
        let model = Classifier::new(spec.clone(), ModelParams::<f32>::zeros(&spec).unwrap()).unwrap();
        let x = Tensor::from_slice(&[2, 3], &[1.0, -2.0, 0.5, 9.0, 0.0, 3.0]).unwrap();
        assert_eq!(model.forward(&x).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let spec = linear(2, 2);
        let mut params = ModelParams::<f32>::zeros(&spec).unwrap();
        params
            .set("layer0.weight", Tensor::from_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let model = Classifier::new(spec, params).unwrap();
        let x = Tensor::from_slice(&[1, 2], &[3.0, -1.0]).unwrap();
        assert_eq!(model.forward(&x).unwrap().as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn mlp_matches_straight_line_forward() {
        let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![4] }, vec![3], 2).unwrap();
        let model = Classifier::<f32>::init(spec, &mut RngStream::new(5, 0)).unwrap();
        let x = [0.2f32, -0.7, 1.3];
        let got = model
            .forward(&Tensor::from_slice(&[1, 3], &x).unwrap())
            .unwrap();

        let w1 = model.params.get("layer0.weight").unwrap().as_slice();
        let b1 = model.params.get("layer0.bias").unwrap().as_slice();
        let w2 = model.params.get("layer1.weight").unwrap().as_slice();
        let b2 = model.params.get("layer1.bias").unwrap().as_slice();
        let mut h = [0f64; 4];
        for j in 0..4 {
            let mut s = b1[j] as f64;
            for i in 0..3 {
                s += x[i] as f64 * w1[i * 4 + j] as f64;
            }
            h[j] = s.max(0.0);
        }
        for k in 0..2 {
            let mut s = b2[k] as f64;
            for j in 0..4 {
                s += h[j] * w2[j * 2 + k] as f64;
            }
            assert!((got.as_slice()[k] as f64 - s).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let model = Classifier::<f32>::init(linear(3, 2), &mut RngStream::new(0, 0)).unwrap();
        assert!(model.forward(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn params_validated_against_spec() {
        let spec = linear(3, 2);
        let mut params = ModelParams::<f32>::zeros(&spec).unwrap();
        params.tensors[0].1 = Tensor::zeros(&[2, 2]);
        assert!(Classifier::new(spec, params).is_err());
    }

    #[test]
    fn zero_weights_balanced_targets_have_zero_input_gradient() {
        let spec = linear(3, 2);
        let model = Classifier::new(spec.clone(), ModelParams::<f32>::zeros(&spec).unwrap()).unwrap();
        let x = Tensor::from_slice(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t = Tensor::full(&[2, 2], 0.5f32);
        let g = model.backward(&x, &t, None).unwrap();
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_threshold_zeroes_all_gradients() {
        let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![5] }, vec![4], 3).unwrap();
        let model = Classifier::<f32>::init(spec, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(2, 0);
        let x = Tensor::uniform(&mut rng, &[6, 4], -1.0, 1.0).unwrap();
        let t = smooth_labels(&[0, 1, 2, 0, 1, 2], 3, 0.0).unwrap();
        let g = model.backward(&x, &t, Some(1e-4)).unwrap();
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.params.iter().all(|p| p.as_slice().iter().all(|&v| v == 0.0)));
        assert!(g.losses.iter().all(|&l| l <= 1e-4));
    }

    #[test]
    fn dense_logits_shape() {
        let spec = ModelSpec::new(
            Architecture::DensePredictor { channels: vec![3] },
            vec![5, 4, 1],
            3,
        )
        .unwrap();
        assert_eq!(spec.decisions_per_example(), 20);
        let model = Classifier::<f32>::init(spec, &mut RngStream::new(0, 0)).unwrap();
        let z = model.forward(&Tensor::zeros(&[2, 5, 4, 1])).unwrap();
        assert_eq!(z.shape(), &[2, 5, 4, 3]);
    }

    #[test]
    fn small_conv_shapes_compose() {
        let spec = ModelSpec::new(
            Architecture::SmallConv {
                channels: vec![4, 6],
                strides: vec![1, 2],
            },
            vec![7, 7, 2],
            5,
        )
        .unwrap();
        let model = Classifier::<f32>::init(spec, &mut RngStream::new(0, 0)).unwrap();
        let z = model.forward(&Tensor::full(&[3, 7, 7, 2], 0.5)).unwrap();
        assert_eq!(z.shape(), &[3, 5]);
        assert!(ModelSpec::new(
            Architecture::SmallConv {
                channels: vec![4],
                strides: vec![]
            },
            vec![7, 7, 2],
            5
        )
        .is_err());
    }
}
