//! Fully connected reconstruction networks fed by the masked class capsules.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// fc(w1) -> fc(w2) -> fc(pixels).
    Baseline,
    /// fc(w1) -> fc(w2) -> fc(w3) on concat(fc1, fc2) -> fc(pixels).
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    /// Flattened masked capsule width `K * D`.
    pub input_dim: usize,
    pub w1: usize,
    pub w2: usize,
    /// Width of the third layer of the dense kind.
    pub w3: usize,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Default reconstruction-loss multiplier for an image of `pixels` outputs.
pub fn default_recon_multiplier(pixels: usize) -> f64 {
    0.0005 * 784.0 / pixels as f64
}

impl DecoderSpec {
    /// Default widths: (512, 1024), or (600, 1200) when the image side exceeds 32.
    pub fn for_image(kind: DecoderKind, input_dim: usize, channels: usize, height: usize, width: usize) -> Self {
        let (w1, w2) = if height.max(width) > 32 { (600, 1200) } else { (512, 1024) };
        DecoderSpec {
            kind,
            input_dim,
            w1,
            w2,
            w3: w2,
            out_channels: channels,
            out_height: height,
            out_width: width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.out_channels * self.out_height * self.out_width
    }

    /// `(name, fan_in, fan_out)` for every layer.
    pub fn layers(&self) -> Vec<(&'static str, usize, usize)> {
        match self.kind {
            DecoderKind::Baseline => vec![
                ("fc1", self.input_dim, self.w1),
                ("fc2", self.w1, self.w2),
                ("fc3", self.w2, self.pixels()),
            ],
            DecoderKind::Dense => vec![
                ("fc1", self.input_dim, self.w1),
                ("fc2", self.w1, self.w2),
                ("fc3", self.w1 + self.w2, self.w3),
                ("fc4", self.w3, self.pixels()),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(_, i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers().iter().any(|&(_, i, o)| i == 0 || o == 0) {
            return Err(Error::config(format!("decoder has a zero-width layer: {self:?}")));
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<()> {
        for (name, fan_in, fan_out) in self.layers() {
            let wname = format!("{prefix}.{name}.weight");
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = rng::uniform(&mut rng::stream(seed, &wname), &[fan_in, fan_out], -limit, limit);
            store.insert(wname, w)?;
            store.insert(format!("{prefix}.{name}.bias"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    /// Decodes `masked: [B, K*D]` into `[B, C, H, W]` with values in (0, 1).
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound, prefix: &str, masked: Var) -> Result<Var> {
        let shape = g.shape(masked).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim(format!(
                "decoder expects [B, {}], got {shape:?}",
                self.input_dim
            )));
        }
        let fc = |g: &mut Graph<T>, name: &str, x: Var| -> Result<Var> {
            let w = params.get(&format!("{prefix}.{name}.weight"))?;
            let b = params.get(&format!("{prefix}.{name}.bias"))?;
            g.linear(x, w, b)
        };
        let h1 = fc(g, "fc1", masked)?;
        let h1 = g.relu(h1);
        let h2 = fc(g, "fc2", h1)?;
        let h2 = g.relu(h2);
        let logits = match self.kind {
            DecoderKind::Baseline => fc(g, "fc3", h2)?,
            DecoderKind::Dense => {
                let cat = g.concat(&[h1, h2], 1)?;
                let h3 = fc(g, "fc3", cat)?;
                let h3 = g.relu(h3);
                fc(g, "fc4", h3)?
            }
        };
        let out = g.sigmoid(logits);
        g.reshape(out, &[shape[0], self.out_channels, self.out_height, self.out_width])
    }
}

/// `multiplier * sum((recon - target)^2) / B`.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, recon: Var, target: Var, multiplier: f64) -> Result<Var> {
    if multiplier <= 0.0 {
        return Err(Error::contract("reconstruction multiplier must be positive"));
    }
    let batch = g.shape(recon)[0];
    let sse = g.sum_sq_diff(recon, target)?;
    Ok(g.scale(sse, T::of(multiplier / batch as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_fc3_fan_in_is_w1_plus_w2() {
        let d = DecoderSpec::for_image(DecoderKind::Dense, 160, 1, 28, 28);
        assert_eq!(d.layers()[2].1, 1536);
        let big = DecoderSpec::for_image(DecoderKind::Dense, 160, 1, 64, 64);
        assert_eq!((big.w1, big.w2), (600, 1200));
        assert_eq!(big.layers()[2].1, 1800);
    }

    #[test]
    fn baseline_mnist_count() {
        let d = DecoderSpec::for_image(DecoderKind::Baseline, 160, 1, 28, 28);
        assert_eq!(d.param_count(), 82_432 + 525_312 + 803_600);
    }

    #[test]
    fn zero_params_give_half() {
        let spec = DecoderSpec::for_image(DecoderKind::Dense, 8, 1, 2, 2);
        let mut store = ParamStore::new();
        spec.init(&mut store, "decoder", 1).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::<f32>::new();
        let bound = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[3, 8]));
        let y = spec.decode(&mut g, &bound, "decoder", x).unwrap();
        assert_eq!(g.shape(y), &[3, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn recon_loss_values() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::full(&[1, 1, 28, 28], 0.5));
        let t = g.constant(Tensor::zeros(&[1, 1, 28, 28]));
        let l = reconstruction_loss(&mut g, r, t, 0.0005).unwrap();
        assert!((g.value(l).data()[0] - 0.098).abs() < 1e-12);
        let l2 = reconstruction_loss(&mut g, r, t, 0.001).unwrap();
        assert!((g.value(l2).data()[0] - 2.0 * 0.098).abs() < 1e-12);
        let z = reconstruction_loss(&mut g, r, r, 0.0005).unwrap();
        assert_eq!(g.value(z).data()[0], 0.0);
    }

    #[test]
    fn recon_loss_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let r = g.constant(Tensor::zeros(&[1, 4]));
        let t = g.constant(Tensor::zeros(&[1, 5]));
        assert!(matches!(reconstruction_loss(&mut g, r, t, 1.0), Err(Error::Dimension(_))));
    }
}
