//! Densely connected convolutional block: every layer sees the channel
//! concatenation of the block input and all earlier layer outputs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::tensor::Scalar;

/// How layers are wired and what the block emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DenseMode {
    /// Layers see all earlier maps; output is the full concatenation.
    #[default]
    Dense,
    /// Layers see all earlier maps; output is the last layer only.
    LastLayerOnly,
    /// No skip connections: a plain stack of convolutions.
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub num_layers: usize,
    pub growth: usize,
    pub kernel: usize,
    /// Whether the block input is part of the concatenated output.
    #[serde(default = "yes")]
    pub include_input: bool,
    #[serde(default)]
    pub mode: DenseMode,
    #[serde(default = "same")]
    pub padding: Padding,
}

fn yes() -> bool {
    true
}

fn same() -> Padding {
    Padding::Same
}

pub const KERNEL_INIT_STD: f64 = 0.05;

impl DenseBlockSpec {
    pub fn new(num_layers: usize, growth: usize) -> Self {
        DenseBlockSpec {
            num_layers,
            growth,
            kernel: 3,
            include_input: true,
            mode: DenseMode::Dense,
            padding: Padding::Same,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::config("dense block kernel must be at least 1"));
        }
        if self.num_layers > 0 && self.growth == 0 {
            return Err(Error::config("dense block growth must be at least 1"));
        }
        if self.mode == DenseMode::Dense && self.padding != Padding::Same && self.num_layers > 0 && self.kernel > 1 {
            return Err(Error::config("concatenating dense layers need same padding"));
        }
        Ok(())
    }

    /// Input channels seen by layer `l` (0-based).
    pub fn layer_in_channels(&self, in_channels: usize, l: usize) -> usize {
        match self.mode {
            DenseMode::Chain if l > 0 => self.growth,
            DenseMode::Chain => in_channels,
            _ => in_channels + l * self.growth,
        }
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        if self.num_layers == 0 {
            return in_channels;
        }
        match self.mode {
            DenseMode::Dense if self.include_input => in_channels + self.num_layers * self.growth,
            DenseMode::Dense => self.num_layers * self.growth,
            DenseMode::LastLayerOnly | DenseMode::Chain => self.growth,
        }
    }

    /// Output spatial extent for a square-or-not input side.
    pub fn out_size(&self, size: usize) -> Option<usize> {
        (0..self.num_layers).try_fold(size, |s, _| self.padding.output_size(s, self.kernel, 1))
    }

    /// Weights plus biases over all layers.
    pub fn param_count(&self, in_channels: usize) -> usize {
        let k2 = self.kernel * self.kernel;
        (0..self.num_layers)
            .map(|l| k2 * self.layer_in_channels(in_channels, l) * self.growth + self.growth)
            .sum()
    }

    /// Truncated-normal kernels, zero biases, under `{prefix}.{l}.kernel|bias`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, in_channels: usize, seed: u64) -> Result<()> {
        for l in 0..self.num_layers {
            let name = format!("{prefix}.{l}.kernel");
            let shape = [self.growth, self.layer_in_channels(in_channels, l), self.kernel, self.kernel];
            let k = rng::truncated_normal(&mut rng::stream(seed, &name), &shape, KERNEL_INIT_STD);
            store.insert(name, k)?;
            store.insert(format!("{prefix}.{l}.bias"), crate::Tensor::zeros(&[self.growth]))?;
        }
        Ok(())
    }

    /// Runs the block on `x: [N,C,H,W]`; each layer is conv + ReLU.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let in_channels = g.shape(x)[1];
        let mut features = vec![x];
        let mut last = x;
        for l in 0..self.num_layers {
            let input = match self.mode {
                DenseMode::Chain => last,
                _ if features.len() == 1 => features[0],
                _ => g.concat_channels(&features)?,
            };
            if g.shape(input)[1] != self.layer_in_channels(in_channels, l) {
                return Err(Error::dim(format!(
                    "dense layer {l} sees {} channels, expected {}",
                    g.shape(input)[1],
                    self.layer_in_channels(in_channels, l)
                )));
            }
            let k = params.get(&format!("{prefix}.{l}.kernel"))?;
            let b = params.get(&format!("{prefix}.{l}.bias"))?;
            let y = g.conv2d(input, k, Some(b), 1, self.padding)?;
            last = g.relu(y);
            features.push(last);
        }
        if self.num_layers == 0 {
            return Ok(x);
        }
        match self.mode {
            DenseMode::Dense if self.include_input => g.concat_channels(&features),
            DenseMode::Dense => g.concat_channels(&features[1..]),
            DenseMode::LastLayerOnly | DenseMode::Chain => Ok(last),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn mnist_block_has_257_channels() {
        assert_eq!(DenseBlockSpec::new(8, 32).out_channels(1), 257);
    }

    #[test]
    fn closed_form_counts() {
        let one = DenseBlockSpec { kernel: 1, ..DenseBlockSpec::new(1, 1) };
        assert_eq!(one.param_count(1), 2);
        assert_eq!(DenseBlockSpec::new(0, 32).param_count(1), 0);
        assert_eq!(DenseBlockSpec::new(8, 32).param_count(1), 260_608);
    }

    #[test]
    fn chain_counts() {
        let chain = DenseBlockSpec {
            mode: DenseMode::Chain,
            padding: Padding::Valid,
            ..DenseBlockSpec::new(8, 32)
        };
        assert_eq!(chain.param_count(1), 9 * 32 + 32 + 7 * (9 * 32 * 32 + 32));
        assert_eq!(chain.out_channels(1), 32);
        assert_eq!(chain.out_size(28), Some(12));
    }

    #[test]
    fn empty_block_is_identity() {
        let spec = DenseBlockSpec::new(0, 4);
        let mut g = Graph::<f32>::new();
        let store = ParamStore::new();
        let bound = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f32));
        let y = spec.forward(&mut g, &bound, "dense", x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn zero_kernels_give_zero_new_maps() {
        let spec = DenseBlockSpec::new(2, 1);
        let mut store = ParamStore::new();
        spec.init(&mut store, "dense", 1, 0).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::<f32>::new();
        let bound = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| 1.0 + i as f32));
        let y = spec.forward(&mut g, &bound, "dense", x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 4, 4]);
        assert!(g.value(y).data()[16..].iter().all(|&v| v == 0.0));
        assert_eq!(&g.value(y).data()[..16], g.value(x).data());
    }
}
