use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};

use super::config::{FusionConfig, ProjectorKind};
use crate::autograd::{ConvLayer, LayerStore};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Element, Tensor};

/// Learnable layers across all projector kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    MbtfConv1,
    MbtfConv2,
    StfConv1,
    StfConv2,
    StfConv3,
    AvgPoolFc1,
    AvgPoolFc2,
    ConcatFc1,
    ConcatFc2,
}

impl LayerId {
    pub const ALL: [LayerId; 9] = [
        Self::MbtfConv1,
        Self::MbtfConv2,
        Self::StfConv1,
        Self::StfConv2,
        Self::StfConv3,
        Self::AvgPoolFc1,
        Self::AvgPoolFc2,
        Self::ConcatFc1,
        Self::ConcatFc2,
    ];

    /// The five layers of the fusion projector.
    pub const FUSION: [LayerId; 5] = [
        Self::MbtfConv1,
        Self::MbtfConv2,
        Self::StfConv1,
        Self::StfConv2,
        Self::StfConv3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MbtfConv1 => "mbtf.conv1",
            Self::MbtfConv2 => "mbtf.conv2",
            Self::StfConv1 => "stf.conv1",
            Self::StfConv2 => "stf.conv2",
            Self::StfConv3 => "stf.conv3",
            Self::AvgPoolFc1 => "avgpool.fc1",
            Self::AvgPoolFc2 => "avgpool.fc2",
            Self::ConcatFc1 => "tokenconcat.fc1",
            Self::ConcatFc2 => "tokenconcat.fc2",
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer '{s}'")))
    }
}

/// Static description of one conv layer: kernel, channels and output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub id: LayerId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerShape {
    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.kernel, self.kernel, self.in_channels, self.out_channels]
    }

    /// `(k^2 * Cin + 1) * Cout`.
    pub fn param_count(&self) -> u64 {
        (self.fan_in() as u64 + 1) * self.out_channels as u64
    }

    pub fn out_positions(&self) -> u64 {
        (self.out_h * self.out_w) as u64
    }

    /// Multiply-accumulates, `k^2 * Cin * Cout * Hout * Wout`.
    pub fn macs(&self) -> u64 {
        self.fan_in() as u64 * self.out_channels as u64 * self.out_positions()
    }

    /// One add per output value for the bias.
    pub fn bias_flops(&self) -> u64 {
        self.out_channels as u64 * self.out_positions()
    }

    /// `2 * MACs + bias adds`.
    pub fn flops(&self) -> u64 {
        2 * self.macs() + self.bias_flops()
    }
}

/// Layer stack of a projector kind under `config`, in execution order.
pub fn layer_shapes(config: &FusionConfig, kind: ProjectorKind) -> Vec<LayerShape> {
    let (h, w, c1) = (config.grid_h, config.grid_w, config.encoder_width);
    let c3 = config.llm_width;
    let pointwise = |id, cin, cout, oh, ow| LayerShape {
        id,
        kernel: 1,
        stride: 1,
        in_channels: cin,
        out_channels: cout,
        out_h: oh,
        out_w: ow,
    };
    match kind {
        ProjectorKind::Stf => {
            let k = config.kernel.max(1);
            let (h2, w2) = (h / k, w / k);
            vec![
                pointwise(
                    LayerId::MbtfConv1,
                    config.num_blocks * c1,
                    config.mbtf_hidden,
                    h,
                    w,
                ),
                pointwise(LayerId::MbtfConv2, config.mbtf_hidden, c1, h, w),
                LayerShape {
                    id: LayerId::StfConv1,
                    kernel: k,
                    stride: k,
                    in_channels: c1,
                    out_channels: config.fused_width(),
                    out_h: h2,
                    out_w: w2,
                },
                pointwise(LayerId::StfConv2, config.fused_width(), config.stf_hidden, h2, w2),
                pointwise(
                    LayerId::StfConv3,
                    config.stf_hidden,
                    config.tokens_per_window * c3,
                    h2,
                    w2,
                ),
            ]
        }
        ProjectorKind::AvgPool => vec![
            pointwise(LayerId::AvgPoolFc1, c1, c3, h / 2, w / 2),
            pointwise(LayerId::AvgPoolFc2, c3, c3, h / 2, w / 2),
        ],
        ProjectorKind::TokenConcat => vec![
            pointwise(LayerId::ConcatFc1, 4 * c1, c3, h / 2, w / 2),
            pointwise(LayerId::ConcatFc2, c3, c3, h / 2, w / 2),
        ],
    }
}

/// Learnable weights of one projector, keyed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams<T: Element = f32> {
    kind: ProjectorKind,
    layers: BTreeMap<LayerId, ConvLayer<T>>,
}

/// Fusion-projector parameters for `config`.
pub fn init_params(config: &FusionConfig) -> ModuleParams {
    ModuleParams::init(config, ProjectorKind::Stf)
}

impl ModuleParams {
    /// Weights uniform in `(-b, b)` with `b = sqrt(1 / fan_in)`, zero biases,
    /// drawn from the seed's parameter stream.
    pub fn init(config: &FusionConfig, kind: ProjectorKind) -> Self {
        let mut rng = rng::stream(config.seed, Stream::Params);
        let mut layers = BTreeMap::new();
        for shape in layer_shapes(config, kind) {
            let bound = (1.0 / shape.fan_in() as f64).sqrt() as f32;
            let dist = Uniform::new(-bound, bound).expect("positive bound");
            let weight = Tensor::from_fn(shape.weight_shape(), |_| loop {
                let v = dist.sample(&mut rng);
                if v > -bound {
                    break v;
                }
            });
            let bias = Tensor::zeros(vec![shape.out_channels]);
            layers.insert(shape.id, ConvLayer { weight, bias });
        }
        Self { kind, layers }
    }
}

impl<T: Element> ModuleParams<T> {
    pub fn kind(&self) -> ProjectorKind {
        self.kind
    }

    pub fn get(&self, id: LayerId) -> Option<&ConvLayer<T>> {
        self.layers.get(&id)
    }

    pub fn get_mut(&mut self, id: LayerId) -> Option<&mut ConvLayer<T>> {
        self.layers.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerId, &ConvLayer<T>)> {
        self.layers.iter().map(|(id, l)| (*id, l))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (LayerId, &mut ConvLayer<T>)> {
        self.layers.iter_mut().map(|(id, l)| (*id, l))
    }

    pub fn param_count(&self) -> u64 {
        self.layers.values().map(|l| l.param_count() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        self.layers.values_mut().for_each(ConvLayer::zero_grad);
    }

    /// Plain gradient descent, `theta -= lr * grad`.
    pub fn sgd_step(&mut self, lr: T) {
        for layer in self.layers.values_mut() {
            for t in [&mut layer.weight, &mut layer.bias] {
                let Some(grad) = t.grad().map(<[T]>::to_vec) else {
                    continue;
                };
                for (p, g) in t.data_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
        }
    }

    pub fn cast<U: Element>(&self) -> ModuleParams<U> {
        ModuleParams {
            kind: self.kind,
            layers: self.layers.iter().map(|(id, l)| (*id, l.cast())).collect(),
        }
    }

    /// Little-endian bytes of every weight then bias, in layer order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.layers
            .values()
            .flat_map(|l| {
                let mut b = l.weight.to_le_bytes();
                b.extend(l.bias.to_le_bytes());
                b
            })
            .collect()
    }

    /// Checks that every layer's shape matches what `config` prescribes.
    pub fn check(&self, config: &FusionConfig) -> Result<()> {
        let shapes = layer_shapes(config, self.kind);
        if shapes.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} projector expects {} layers, params hold {}",
                self.kind,
                shapes.len(),
                self.layers.len()
            )));
        }
        for s in shapes {
            let layer = self
                .layers
                .get(&s.id)
                .ok_or_else(|| Error::Config(format!("missing layer {}", s.id)))?;
            if layer.weight.shape() != s.weight_shape().as_slice() || layer.bias.len() != s.out_channels
            {
                return Err(Error::Config(format!(
                    "layer {} has weight {:?}, config requires {:?}",
                    s.id,
                    layer.weight.shape(),
                    s.weight_shape()
                )));
            }
        }
        Ok(())
    }
}

impl<T: Element> LayerStore<T> for ModuleParams<T> {
    type Key = LayerId;

    fn layer(&self, key: LayerId) -> Option<&ConvLayer<T>> {
        self.layers.get(&key)
    }

    fn layer_mut(&mut self, key: LayerId) -> Option<&mut ConvLayer<T>> {
        self.layers.get_mut(&key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_layer_shapes() {
        let shapes = layer_shapes(&FusionConfig::paper(), ProjectorKind::Stf);
        let summary: Vec<_> = shapes
            .iter()
            .map(|s| (s.id.name(), s.out_h, s.out_w, s.out_channels, s.kernel, s.stride))
            .collect();
        assert_eq!(
            summary,
            vec![
                ("mbtf.conv1", 24, 24, 4096, 1, 1),
                ("mbtf.conv2", 24, 24, 1024, 1, 1),
                ("stf.conv1", 12, 12, 4096, 2, 2),
                ("stf.conv2", 12, 12, 16384, 1, 1),
                ("stf.conv3", 12, 12, 4096, 1, 1),
            ]
        );
        assert_eq!(shapes[0].in_channels, 8192);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let config = FusionConfig::tiny().with_seed(7);
        let a = init_params(&config);
        let b = init_params(&config);
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        let c = init_params(&config.clone().with_seed(8));
        assert_ne!(a.to_le_bytes(), c.to_le_bytes());

        for s in layer_shapes(&config, ProjectorKind::Stf) {
            let layer = a.get(s.id).unwrap();
            let bound = (1.0 / s.fan_in() as f64).sqrt() as f32;
            assert!(layer.weight.data().iter().all(|&w| w > -bound && w < bound));
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_weight_mean_is_near_zero() {
        // uniform(-b, b) has sigma = b / sqrt(3); the sample mean of n draws
        // must fall within 3 sigma / sqrt(n) of zero
        let config = FusionConfig::toy().with_seed(3);
        let params = init_params(&config);
        for s in layer_shapes(&config, ProjectorKind::Stf) {
            let w = params.get(s.id).unwrap().weight.data();
            let n = w.len() as f64;
            let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
            let sigma = (1.0 / s.fan_in() as f64).sqrt() / 3f64.sqrt();
            assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "{}: mean {mean}", s.id);
        }
    }

    #[test]
    fn check_rejects_mismatched_config() {
        let params = init_params(&FusionConfig::tiny());
        assert!(params.check(&FusionConfig::tiny()).is_ok());
        assert!(params.check(&FusionConfig::toy()).is_err());
    }

    #[test]
    fn layer_names_round_trip() {
        for id in LayerId::ALL {
            assert_eq!(id.name().parse::<LayerId>().unwrap(), id);
        }
    }
}
