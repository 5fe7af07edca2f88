//! The all-in-one restoration network: a plain stack of 3×3 convolutions
//! predicting a residual correction that is added back onto the input.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::degrade::{CHANNELS, MIN_SIDE};
use crate::error::{Error, Result};
use crate::rng::rng_from;

const KERNEL: usize = 3;
const PADDING: usize = 1;
pub const MIN_WIDTH: usize = 8;
pub const MIN_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            depth: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    /// `out×in×3×3`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Parameter leaves of one model registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationModel {
    config: ModelConfig,
    layers: Vec<ConvLayer>,
    grads_ready: bool,
}

impl RestorationModel {
    /// He-initialized model; the output layer starts at zero so the fresh
    /// model is exactly the identity map.
    pub fn new(config: ModelConfig) -> Result<Self> {
        validate(&config)?;
        let mut rng = rng_from(config.seed, &[0x1417]);
        let widths = channel_plan(&config);
        let last = widths.len() - 2;
        let mut layers = Vec::with_capacity(config.depth);
        for (i, pair) in widths.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let shape = [cout, cin, KERNEL, KERNEL];
            let weight = if i == last {
                Tensor::zeros(&shape)?
            } else {
                let std = (2.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = cout * cin * KERNEL * KERNEL;
                Tensor::new(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            layers.push(ConvLayer {
                name: format!("conv{i}"),
                weight: weight.with_grad(),
                bias: Tensor::zeros(&[cout])?.with_grad(),
            });
        }
        Ok(Self {
            config,
            layers,
            grads_ready: false,
        })
    }

    /// Rebuilds a model from stored parameter tensors, ordered as
    /// [`RestorationModel::named_params`] yields them.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::new(config)?;
        let expected: Vec<(String, Vec<usize>)> = template
            .named_params()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "model with width {} depth {} has {} parameter tensors, got {}",
                config.width,
                config.depth,
                expected.len(),
                params.len()
            )));
        }
        let mut layers = template.layers;
        let mut incoming = params.into_iter().zip(expected);
        for layer in &mut layers {
            for slot in [&mut layer.weight, &mut layer.bias] {
                let ((name, t), (want_name, want_shape)) = incoming.next().expect("length checked");
                if name != want_name {
                    return Err(Error::InvalidArgument(format!(
                        "expected parameter `{want_name}`, found `{name}`"
                    )));
                }
                if t.shape() != want_shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "from_params",
                        left: want_shape,
                        right: t.shape().to_vec(),
                    });
                }
                *slot = t.with_grad();
            }
        }
        Ok(Self {
            config,
            layers,
            grads_ready: false,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.layers.iter().flat_map(|l| {
            [
                (format!("{}.weight", l.name), &l.weight),
                (format!("{}.bias", l.name), &l.bias),
            ]
        })
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
        self.grads_ready = false;
    }

    /// Whether gradients were collected since the last optimizer step.
    pub fn has_grads(&self) -> bool {
        self.grads_ready
    }

    pub(crate) fn mark_grads_consumed(&mut self) {
        self.grads_ready = false;
    }

    /// Registers the parameters on `g`, tracking gradients when `train` is
    /// set.
    pub fn bind(&self, g: &mut Graph, train: bool) -> Result<BoundParams> {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if train {
                    (g.input(&l.weight)?, g.input(&l.bias)?)
                } else {
                    (g.constant(&l.weight)?, g.constant(&l.bias)?)
                };
                Ok((w, b))
            })
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// `input + net(input)` for an `N×3×H×W` batch.
    pub fn forward(&self, g: &mut Graph, params: &BoundParams, input: Var) -> Result<Var> {
        match *g.shape(input) {
            [_, CHANNELS, h, w] if h >= MIN_SIDE && w >= MIN_SIDE => {}
            _ => {
                return Err(Error::InvalidShape {
                    op: "restore",
                    reason: format!(
                        "expected N×{CHANNELS}×H×W with H, W >= {MIN_SIDE}, got {:?}",
                        g.shape(input)
                    ),
                })
            }
        }
        let last = params.vars.len() - 1;
        let mut h = input;
        for (i, &(w, b)) in params.vars.iter().enumerate() {
            h = g.conv2d(h, w, 1, PADDING)?;
            h = g.bias_add(h, b)?;
            if i != last {
                h = g.relu(h)?;
            }
        }
        g.add(input, h)
    }

    /// Adds the gradients from a finished backward pass into the parameter
    /// tensors.
    pub fn collect_grads(&mut self, g: &Graph, params: &BoundParams) -> Result<()> {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&params.vars) {
            if let Some(gw) = g.grad(w) {
                layer.weight.accumulate_grad(gw)?;
            }
            if let Some(gb) = g.grad(b) {
                layer.bias.accumulate_grad(gb)?;
            }
        }
        self.grads_ready = true;
        Ok(())
    }

    /// Restores a single `3×H×W` image. The output is not clamped.
    pub fn restore(&self, degraded: &Tensor) -> Result<Tensor> {
        let batch = Tensor::stack(&[degraded])?;
        let out = self.restore_batch(&batch)?;
        out.reshape(degraded.shape())
    }

    pub fn restore_batch(&self, batch: &Tensor) -> Result<Tensor> {
        if !batch.in_unit_range() {
            return Err(Error::OutOfRange("restore"));
        }
        let mut g = Graph::new();
        let params = self.bind(&mut g, false)?;
        let x = g.constant(batch)?;
        let y = self.forward(&mut g, &params, x)?;
        g.tensor(y)
    }
}

fn validate(config: &ModelConfig) -> Result<()> {
    if config.width < MIN_WIDTH || config.depth < MIN_DEPTH {
        return Err(Error::Config(format!(
            "model needs width >= {MIN_WIDTH} and depth >= {MIN_DEPTH}, got width {} depth {}",
            config.width, config.depth
        )));
    }
    Ok(())
}

fn channel_plan(config: &ModelConfig) -> Vec<usize> {
    let mut widths = vec![CHANNELS];
    widths.extend(std::iter::repeat_n(config.width, config.depth - 1));
    widths.push(CHANNELS);
    widths
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::make_clean_corpus;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig {
            width: 8,
            depth: 3,
            seed: 5,
        };
        assert_eq!(RestorationModel::new(cfg).unwrap(), RestorationModel::new(cfg).unwrap());
        let other = RestorationModel::new(ModelConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(RestorationModel::new(cfg).unwrap(), other);
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        // 3→16: 16·3·9+16 = 448; 16→16 twice: 2·(16·16·9+16) = 4640; 16→3: 3·16·9+3 = 435
        let m = RestorationModel::new(ModelConfig {
            width: 16,
            depth: 4,
            seed: 0,
        })
        .unwrap();
        assert_eq!(m.param_count(), 5523);
        assert_eq!(m.layers().len(), 4);
        assert_eq!(m.layers()[0].in_channels(), 3);
        assert_eq!(m.layers()[3].out_channels(), 3);
        assert!(RestorationModel::new(ModelConfig::default()).unwrap().param_count() <= 50_000);
    }

    #[test]
    fn rejects_tiny_configs() {
        assert!(RestorationModel::new(ModelConfig { width: 7, depth: 4, seed: 0 }).is_err());
        assert!(RestorationModel::new(ModelConfig { width: 8, depth: 1, seed: 0 }).is_err());
    }

    #[test]
    fn fresh_model_is_identity() {
        let m = RestorationModel::new(ModelConfig::default()).unwrap();
        for size in [32, 48] {
            let img = &make_clean_corpus(1, size, size, 1).unwrap()[0];
            let out = m.restore(img).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert_eq!(out.values(), img.values());
        }
        let zero = Tensor::zeros(&[3, 16, 16]).unwrap();
        assert!(m.restore(&zero).unwrap().is_finite());
    }

    #[test]
    fn restore_rejects_bad_inputs() {
        let m = RestorationModel::new(ModelConfig::default()).unwrap();
        assert!(m.restore(&Tensor::zeros(&[3, 8, 8]).unwrap()).is_err());
        assert!(m.restore(&Tensor::zeros(&[1, 16, 16]).unwrap()).is_err());
        assert!(matches!(
            m.restore(&Tensor::full(&[3, 16, 16], 1.5).unwrap()),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn from_params_round_trip() {
        let cfg = ModelConfig {
            width: 8,
            depth: 3,
            seed: 2,
        };
        let m = RestorationModel::new(cfg).unwrap();
        let params = m.named_params().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(RestorationModel::from_params(cfg, params).unwrap(), m);
    }
}
