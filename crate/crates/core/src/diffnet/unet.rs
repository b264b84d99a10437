use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NetError, NodeGrads, Param, ParamStore, Tape, Tensor, Var};
use crate::{math, seed};

/// Architecture of [`MicroUNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel widths of the two down blocks and the bottleneck.
    pub widths: [usize; 3],
    /// Output score channels: leaves plus background.
    pub classes: usize,
}

impl UNetConfig {
    pub fn new(classes: usize) -> Self {
        Self { in_channels: 3, widths: [8, 16, 32], classes }
    }

    /// `(name, shape)` of every parameter in canonical order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [w1, w2, w3] = self.widths;
        let cin = self.in_channels;
        let conv = |o: usize, i: usize, k: usize| alloc::vec![o, i, k, k];
        alloc::vec![
            ("down1.weight", conv(w1, cin, 3)),
            ("down1.bias", alloc::vec![w1]),
            ("down2.weight", conv(w2, w1, 3)),
            ("down2.bias", alloc::vec![w2]),
            ("bottleneck.weight", conv(w3, w2, 3)),
            ("bottleneck.bias", alloc::vec![w3]),
            ("up1.weight", conv(w2, w3 + w2, 3)),
            ("up1.bias", alloc::vec![w2]),
            ("up2.weight", conv(w1, w2 + w1, 3)),
            ("up2.bias", alloc::vec![w1]),
            ("head.weight", conv(self.classes, w1, 1)),
            ("head.bias", alloc::vec![self.classes]),
        ]
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.in_channels == 0 || self.widths.contains(&0) || self.classes < 2 {
            return Err(NetError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Two 3×3 conv + ReLU + 2×2 max-pool down blocks, a 3×3 bottleneck, two
/// nearest-upsample + skip-concat + 3×3 conv up blocks, and a 1×1 head.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroUNet {
    config: UNetConfig,
    params: ParamStore,
}

const DOWN1: usize = 0;
const DOWN2: usize = 2;
const MID: usize = 4;
const UP1: usize = 6;
const UP2: usize = 8;
const HEAD: usize = 10;

impl MicroUNet {
    /// All parameters zero.
    pub fn zeros(config: UNetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.layout() {
            params.push(Param::zeros(name, &shape));
        }
        Ok(Self { config, params })
    }

    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self, NetError> {
        let mut net = Self::zeros(config)?;
        let mut rng = seed::rng(seed);
        for p in net.params.iter_mut() {
            if p.shape.len() != 4 {
                continue;
            }
            let fan_in = (p.shape[1] * p.shape[2] * p.shape[3]) as f64;
            let bound = math::sqrt(6.0 / fan_in);
            for v in p.value.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from flat parameter values in canonical order.
    pub fn from_flat(config: UNetConfig, values: &[f64]) -> Result<Self, NetError> {
        let mut net = Self::zeros(config)?;
        if !net.params.load_flat(values) {
            return Err(NetError::ParamLayout);
        }
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_patch(&self, patch: &Tensor) -> Result<(), NetError> {
        let (h, w) = (patch.height(), patch.width());
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(NetError::PatchSize { height: h, width: w });
        }
        if patch.channels() != self.config.in_channels {
            return Err(NetError::InputChannels { expected: self.config.in_channels, found: patch.channels() });
        }
        Ok(())
    }

    /// Runs the network, recording every activation for [`Self::backward`].
    pub fn trace(&self, patch: &Tensor) -> Result<(Tape, Var), NetError> {
        self.check_patch(patch)?;
        let p = &self.params;
        let mut t = Tape::new();
        let x = t.input(patch.clone());
        let c1 = t.conv(p, x, DOWN1, DOWN1 + 1)?;
        let s1 = t.relu(c1);
        let d1 = t.max_pool(s1);
        let c2 = t.conv(p, d1, DOWN2, DOWN2 + 1)?;
        let s2 = t.relu(c2);
        let d2 = t.max_pool(s2);
        let c3 = t.conv(p, d2, MID, MID + 1)?;
        let b = t.relu(c3);
        let u1 = t.upsample(b);
        let j1 = t.concat(u1, s2)?;
        let c4 = t.conv(p, j1, UP1, UP1 + 1)?;
        let r4 = t.relu(c4);
        let u2 = t.upsample(r4);
        let j2 = t.concat(u2, s1)?;
        let c5 = t.conv(p, j2, UP2, UP2 + 1)?;
        let r5 = t.relu(c5);
        let out = t.conv(p, r5, HEAD, HEAD + 1)?;
        Ok((t, out))
    }

    /// Per-pixel class scores, `classes × H × W`.
    pub fn forward(&self, patch: &Tensor) -> Result<Tensor, NetError> {
        let (tape, out) = self.trace(patch)?;
        Ok(tape.into_value(out))
    }

    /// Adds the parameter gradients for `upstream` (dL/dscores) to the
    /// accumulators.
    pub fn backward(&mut self, tape: &Tape, out: Var, upstream: &Tensor) -> Result<NodeGrads, NetError> {
        tape.backward(&mut self.params, out, upstream)
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }
}
