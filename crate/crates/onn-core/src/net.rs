//! Sequential layer stacks with explicit forward traces for backprop.
//!
//! Both models in the pipeline (the core CNN and the unifier) are stacks of
//! the ops in [`crate::ops`]; this module owns the bookkeeping that connects
//! them: named parameters, per-layer caches, and the reverse walk.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, DropoutMask, Mode, Padding, PoolIndices};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Layer<S: Scalar = f32> {
    Conv2d {
        weights: Tensor<S>,
        bias: Tensor<S>,
        padding: Padding,
    },
    Relu,
    MaxPool2x2,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        weights: Tensor<S>,
        bias: Tensor<S>,
    },
}

#[derive(Debug, Clone)]
pub struct NamedLayer<S: Scalar = f32> {
    pub name: String,
    pub layer: Layer<S>,
}

/// Per-layer state recorded by a training forward pass.
enum LayerCache<S: Scalar> {
    None,
    Pool(PoolIndices),
    Dropout(DropoutMask<S>),
}

/// Everything backward needs: the input to every layer plus per-layer caches.
pub struct Trace<S: Scalar = f32> {
    /// `activations[i]` is the input to layer `i`; the last entry is the output.
    activations: Vec<Tensor<S>>,
    caches: Vec<LayerCache<S>>,
}

impl<S: Scalar> Trace<S> {
    pub fn output(&self) -> &Tensor<S> {
        self.activations.last().expect("trace holds >= 1 tensor")
    }
}

#[derive(Debug, Clone)]
pub struct Sequential<S: Scalar = f32> {
    layers: Vec<NamedLayer<S>>,
}

impl<S: Scalar> Sequential<S> {
    pub fn new(layers: Vec<NamedLayer<S>>) -> Self {
        Sequential { layers }
    }

    pub fn layers(&self) -> &[NamedLayer<S>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Named parameters in layer order (weights before bias).
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for nl in &self.layers {
            match &nl.layer {
                Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias } => {
                    out.push((format!("{}.weight", nl.name), weights));
                    out.push((format!("{}.bias", nl.name), bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replace parameters by name, validating shapes.
    pub fn load_params(&mut self, values: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        let expected: Vec<String> = self.params().iter().map(|(n, _)| n.clone()).collect();
        for name in &expected {
            if !values.contains_key(name) {
                return Err(Error::invalid(format!("missing parameter {name}")));
            }
        }
        for nl in &mut self.layers {
            let assign = |slot: &mut Tensor<S>, name: String| -> Result<()> {
                let src = values
                    .get(&name)
                    .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
                if src.shape() != slot.shape() {
                    return Err(Error::shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        slot.shape()
                    )));
                }
                *slot = src.clone();
                Ok(())
            };
            match &mut nl.layer {
                Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias } => {
                    assign(weights, format!("{}.weight", nl.name))?;
                    assign(bias, format!("{}.bias", nl.name))?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor<S>> {
        self.params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// `p ← p − lr·g` for every named parameter present in `grads`.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor<S>>, lr: S) -> Result<()> {
        for nl in &mut self.layers {
            let step = |slot: &mut Tensor<S>, name: String| -> Result<()> {
                let grad = grads
                    .get(&name)
                    .ok_or_else(|| Error::invalid(format!("missing gradient for {name}")))?;
                ops::sgd_step(slot, grad, lr)
            };
            match &mut nl.layer {
                Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias } => {
                    step(weights, format!("{}.weight", nl.name))?;
                    step(bias, format!("{}.bias", nl.name))?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn apply<R: Rng>(
        &self,
        idx: usize,
        input: &Tensor<S>,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<(Tensor<S>, LayerCache<S>)> {
        let nl = &self.layers[idx];
        match &nl.layer {
            Layer::Conv2d {
                weights,
                bias,
                padding,
            } => Ok((
                ops::conv2d(input, weights, bias, *padding)?,
                LayerCache::None,
            )),
            Layer::Relu => Ok((ops::relu(input), LayerCache::None)),
            Layer::MaxPool2x2 => {
                let (out, indices) = ops::maxpool2x2(input)?;
                Ok((out, LayerCache::Pool(indices)))
            }
            Layer::Dropout { rate } => match (mode, rng) {
                (Mode::Train, Some(rng)) => {
                    let (out, mask) = ops::dropout(input, *rate, rng, Mode::Train)?;
                    Ok((out, LayerCache::Dropout(mask)))
                }
                (Mode::Train, None) => Err(Error::invalid(
                    "training forward pass through dropout requires an rng".to_string(),
                )),
                (Mode::Eval, _) => Ok((input.clone(), LayerCache::Dropout(DropoutMask::identity()))),
            },
            Layer::Flatten => {
                let n = input.dim(0);
                let rest: usize = input.shape()[1..].iter().product();
                Ok((input.reshape(&[n, rest])?, LayerCache::None))
            }
            Layer::Dense { weights, bias } => {
                Ok((ops::dense(input, weights, bias)?, LayerCache::None))
            }
        }
    }

    /// Training forward pass; records everything backward needs.
    pub fn forward_train<R: Rng>(&self, input: &Tensor<S>, rng: &mut R) -> Result<Trace<S>> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        activations.push(input.clone());
        for idx in 0..self.layers.len() {
            let (out, cache) = self.apply(idx, activations.last().unwrap(), Mode::Train, Some(rng))?;
            activations.push(out);
            caches.push(cache);
        }
        Ok(Trace {
            activations,
            caches,
        })
    }

    /// Deterministic inference pass (dropout is the identity).
    pub fn forward_eval(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_eval_to(input, self.layers.len())
    }

    /// Run layers `0..cut` in eval mode and return that intermediate output.
    pub fn forward_eval_to(&self, input: &Tensor<S>, cut: usize) -> Result<Tensor<S>> {
        assert!(cut <= self.layers.len());
        let mut current = input.clone();
        for idx in 0..cut {
            let (out, _) = self.apply::<rand_chacha::ChaCha8Rng>(idx, &current, Mode::Eval, None)?;
            current = out;
        }
        Ok(current)
    }

    /// Reverse walk from the output gradient; returns named parameter
    /// gradients and the gradient with respect to the network input.
    pub fn backward(
        &self,
        trace: &Trace<S>,
        grad_output: &Tensor<S>,
    ) -> Result<(BTreeMap<String, Tensor<S>>, Tensor<S>)> {
        assert_eq!(
            trace.activations.len(),
            self.layers.len() + 1,
            "trace does not match this network"
        );
        let mut grads = BTreeMap::new();
        let mut grad = grad_output.clone();
        for idx in (0..self.layers.len()).rev() {
            let nl = &self.layers[idx];
            let input = &trace.activations[idx];
            grad = match (&nl.layer, &trace.caches[idx]) {
                (
                    Layer::Conv2d {
                        weights, padding, ..
                    },
                    _,
                ) => {
                    let g = ops::conv2d_backward(input, weights, &grad, *padding)?;
                    grads.insert(format!("{}.weight", nl.name), g.weights);
                    grads.insert(format!("{}.bias", nl.name), g.bias);
                    g.input
                }
                (Layer::Relu, _) => ops::relu_backward(input, &grad)?,
                (Layer::MaxPool2x2, LayerCache::Pool(indices)) => {
                    ops::maxpool2x2_backward(&grad, indices)?
                }
                (Layer::Dropout { .. }, LayerCache::Dropout(mask)) => {
                    ops::dropout_backward(&grad, mask)?
                }
                (Layer::Flatten, _) => grad.reshape(input.shape())?,
                (Layer::Dense { weights, .. }, _) => {
                    let g = ops::dense_backward(input, weights, &grad)?;
                    grads.insert(format!("{}.weight", nl.name), g.weights);
                    grads.insert(format!("{}.bias", nl.name), g.bias);
                    g.input
                }
                (layer, _) => {
                    return Err(Error::invalid(format!(
                        "layer {idx} ({layer:?}) has no matching cache in trace"
                    )))
                }
            };
        }
        Ok((grads, grad))
    }

    /// Elementwise cast of every parameter (used by the f64 gradient oracle).
    pub fn cast<T: Scalar>(&self) -> Sequential<T> {
        let layers = self
            .layers
            .iter()
            .map(|nl| NamedLayer {
                name: nl.name.clone(),
                layer: match &nl.layer {
                    Layer::Conv2d {
                        weights,
                        bias,
                        padding,
                    } => Layer::Conv2d {
                        weights: weights.cast(),
                        bias: bias.cast(),
                        padding: *padding,
                    },
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool2x2 => Layer::MaxPool2x2,
                    Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                    Layer::Flatten => Layer::Flatten,
                    Layer::Dense { weights, bias } => Layer::Dense {
                        weights: weights.cast(),
                        bias: bias.cast(),
                    },
                },
            })
            .collect();
        Sequential { layers }
    }
}

/// He-uniform initialisation: `U(−√(6/fan_in), +√(6/fan_in))`.
pub fn he_uniform<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net() -> Sequential<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Sequential::new(vec![
            NamedLayer {
                name: "conv1".into(),
                layer: Layer::Conv2d {
                    weights: he_uniform(&[4, 1, 3, 3], 9, &mut rng),
                    bias: Tensor::zeros(&[4]),
                    padding: Padding::Same,
                },
            },
            NamedLayer {
                name: "relu1".into(),
                layer: Layer::Relu,
            },
            NamedLayer {
                name: "pool1".into(),
                layer: Layer::MaxPool2x2,
            },
            NamedLayer {
                name: "drop1".into(),
                layer: Layer::Dropout { rate: 0.5 },
            },
            NamedLayer {
                name: "flatten".into(),
                layer: Layer::Flatten,
            },
            NamedLayer {
                name: "fc".into(),
                layer: Layer::Dense {
                    weights: he_uniform(&[4 * 2 * 2, 3], 16, &mut rng),
                    bias: Tensor::zeros(&[3]),
                },
            },
        ])
    }

    #[test]
    fn params_are_named_and_counted() {
        let net = tiny_net();
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec!["conv1.weight", "conv1.bias", "fc.weight", "fc.bias"]
        );
        assert_eq!(net.param_count(), 4 * 9 + 4 + 16 * 3 + 3);
    }

    #[test]
    fn eval_forward_is_deterministic_and_dropout_free() {
        let net = tiny_net();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = he_uniform::<f32, _>(&[2, 1, 4, 4], 16, &mut rng);
        let a = net.forward_eval(&input).unwrap();
        let b = net.forward_eval(&input).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 3]);
    }

    #[test]
    fn snapshot_and_load_round_trip() {
        let mut net = tiny_net();
        let saved = net.snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = he_uniform::<f32, _>(&[1, 1, 4, 4], 16, &mut rng);
        let before = net.forward_eval(&input).unwrap();

        // Perturb, then restore.
        let trace = net.forward_train(&input, &mut rng).unwrap();
        let probs = crate::ops::softmax(trace.output()).unwrap();
        let grad = crate::ops::softmax_cross_entropy_backward(&probs, &[0]).unwrap();
        let (grads, _) = net.backward(&trace, &grad).unwrap();
        net.sgd_step(&grads, 0.5).unwrap();
        assert_ne!(net.forward_eval(&input).unwrap(), before);

        net.load_params(&saved).unwrap();
        assert_eq!(net.forward_eval(&input).unwrap(), before);
    }

    #[test]
    fn load_params_validates_shapes() {
        let mut net = tiny_net();
        let mut bad = net.snapshot();
        bad.insert("conv1.bias".into(), Tensor::zeros(&[7]));
        assert!(net.load_params(&bad).is_err());
    }
}
