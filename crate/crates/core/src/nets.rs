//! Small CIFAR-style residual classifiers with indexed tap points.
//!
//! A network is a chain of blocks (stem conv, then basic residual blocks)
//! followed by global average pooling and a linear classifier. Tap `t >= 1`
//! is the output of a registered block; tap `0` is the input itself. The
//! registered blocks are the stem and the first and last block of every
//! stage, which for the two-blocks-per-stage layout gives nine taps with the
//! last one feeding the classifier.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, BatchNorm2d, BnCache,
    BnMode, Conv2d, ConvCache, Linear,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchId {
    /// ResNet18-style network with identity / projection skips.
    SmallResidual,
    /// The same network with every skip connection removed.
    PlainConv,
}

impl ArchId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small-residual" => Ok(ArchId::SmallResidual),
            "plain-conv" => Ok(ArchId::PlainConv),
            other => Err(Error::config(format!("unknown arch_id `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::SmallResidual => "small-residual",
            ArchId::PlainConv => "plain-conv",
        }
    }
}

/// Stage widths at scale 1.0 (the ResNet18 CIFAR layout).
pub const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const BLOCKS_PER_STAGE: [usize; 4] = [2, 2, 2, 2];
pub const DEFAULT_BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub arch: ArchId,
    pub num_classes: usize,
    /// Channel multiplier applied to [`BASE_WIDTHS`].
    #[serde(default = "default_width")]
    pub width: f32,
    /// Square input resolution in pixels.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f32,
}

fn default_width() -> f32 {
    1.0
}
fn default_resolution() -> usize {
    32
}
fn default_in_channels() -> usize {
    3
}
fn default_momentum() -> f32 {
    DEFAULT_BN_MOMENTUM
}

impl NetConfig {
    pub fn new(arch: ArchId, num_classes: usize) -> Self {
        NetConfig {
            arch,
            num_classes,
            width: 1.0,
            resolution: 32,
            in_channels: 3,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn with_width(mut self, width: f32) -> Self {
        self.width = width;
        self
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        BASE_WIDTHS.map(|w| (libm::roundf(w as f32 * self.width) as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::config("width factor must be positive"));
        }
        if self.resolution < 8 {
            return Err(Error::config("resolution must be at least 8 pixels"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

type ConvBnCache = (ConvCache, BnCache);

impl ConvBn {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, momentum: f32, rng: &mut ChaCha8Rng) -> Self {
        ConvBn {
            conv: Conv2d::new(cin, cout, k, stride, k / 2, rng),
            bn: BatchNorm2d::new(cout, momentum),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: BnMode, keep: bool) -> (Tensor, Option<ConvBnCache>) {
        let (y, cc) = self.conv.forward(x, keep);
        let (z, bc) = self.bn.forward(&y, mode, keep);
        (z, cc.zip(bc))
    }

    fn backward(&mut self, cache: &ConvBnCache, grad: &Tensor, param_grads: bool) -> Tensor {
        let g = self.bn.backward(&cache.1, grad, param_grads);
        self.conv.backward(&cache.0, &g, param_grads)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &mut Vec<f32>)) {
        f(&mut self.conv.weight, &mut self.conv.grad_weight);
        f(&mut self.bn.gamma, &mut self.bn.grad_gamma);
        f(&mut self.bn.beta, &mut self.bn.grad_beta);
    }

    fn zero_grad(&mut self) {
        self.conv.zero_grad();
        self.bn.zero_grad();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Shortcut {
    Identity,
    Projection(ConvBn),
    Absent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasicBlock {
    pub first: ConvBn,
    pub second: ConvBn,
    pub shortcut: Shortcut,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Block {
    Stem(ConvBn),
    Basic(BasicBlock),
}

#[derive(Debug, Clone)]
pub enum BlockCache {
    Stem {
        cb: ConvBnCache,
        out: Tensor,
    },
    Basic {
        first: ConvBnCache,
        hidden: Tensor,
        second: ConvBnCache,
        shortcut: Option<ConvBnCache>,
        out: Tensor,
    },
}

impl Block {
    fn forward(&mut self, x: &Tensor, mode: BnMode, keep: bool) -> (Tensor, Option<BlockCache>) {
        match self {
            Block::Stem(cb) => {
                let (mut y, c) = cb.forward(x, mode, keep);
                relu_inplace(&mut y);
                let cache = c.map(|cb| BlockCache::Stem { cb, out: y.clone() });
                (y, cache)
            }
            Block::Basic(b) => {
                let (mut hidden, c1) = b.first.forward(x, mode, keep);
                relu_inplace(&mut hidden);
                let (mut y, c2) = b.second.forward(&hidden, mode, keep);
                let sc = match &mut b.shortcut {
                    Shortcut::Identity => {
                        y.add_scaled(x, 1.0);
                        None
                    }
                    Shortcut::Projection(p) => {
                        let (s, c) = p.forward(x, mode, keep);
                        y.add_scaled(&s, 1.0);
                        c
                    }
                    Shortcut::Absent => None,
                };
                relu_inplace(&mut y);
                let cache = if keep {
                    Some(BlockCache::Basic {
                        first: c1.expect("kept"),
                        hidden,
                        second: c2.expect("kept"),
                        shortcut: sc,
                        out: y.clone(),
                    })
                } else {
                    None
                };
                (y, cache)
            }
        }
    }

    fn backward(&mut self, cache: &BlockCache, grad_out: &Tensor, param_grads: bool) -> Tensor {
        match (self, cache) {
            (Block::Stem(cb), BlockCache::Stem { cb: c, out }) => {
                let mut g = grad_out.clone();
                relu_backward(out, &mut g);
                cb.backward(c, &g, param_grads)
            }
            (
                Block::Basic(b),
                BlockCache::Basic {
                    first,
                    hidden,
                    second,
                    shortcut,
                    out,
                },
            ) => {
                let mut g = grad_out.clone();
                relu_backward(out, &mut g);
                let mut gh = b.second.backward(second, &g, param_grads);
                relu_backward(hidden, &mut gh);
                let mut gx = b.first.backward(first, &gh, param_grads);
                match (&mut b.shortcut, shortcut) {
                    (Shortcut::Identity, _) => gx.add_scaled(&g, 1.0),
                    (Shortcut::Projection(p), Some(c)) => {
                        let gs = p.backward(c, &g, param_grads);
                        gx.add_scaled(&gs, 1.0);
                    }
                    _ => {}
                }
                gx
            }
            _ => unreachable!("block/cache kind mismatch"),
        }
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &mut Vec<f32>)) {
        match self {
            Block::Stem(cb) => cb.for_each_param(f),
            Block::Basic(b) => {
                b.first.for_each_param(f);
                b.second.for_each_param(f);
                if let Shortcut::Projection(p) = &mut b.shortcut {
                    p.for_each_param(f);
                }
            }
        }
    }

    fn batch_norms(&mut self) -> Vec<&mut BatchNorm2d> {
        match self {
            Block::Stem(cb) => vec![&mut cb.bn],
            Block::Basic(b) => {
                let mut v = vec![&mut b.first.bn, &mut b.second.bn];
                if let Shortcut::Projection(p) = &mut b.shortcut {
                    v.push(&mut p.bn);
                }
                v
            }
        }
    }

    fn zero_grad(&mut self) {
        match self {
            Block::Stem(cb) => cb.zero_grad(),
            Block::Basic(b) => {
                b.first.zero_grad();
                b.second.zero_grad();
                if let Shortcut::Projection(p) = &mut b.shortcut {
                    p.zero_grad();
                }
            }
        }
    }
}

/// Where a traced forward pass stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Until {
    Tap(usize),
    Logits,
}

/// Recorded forward pass from tap `from`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub from: usize,
    input_shape: [usize; 4],
    /// Outputs at taps `from + 1 ..= last_tap`.
    taps: Vec<Tensor>,
    block_range: (usize, usize),
    caches: Vec<BlockCache>,
    pooled: Option<(Tensor, [usize; 4])>,
    pub logits: Option<Tensor>,
}

impl Trace {
    pub fn last_tap(&self) -> usize {
        self.from + self.taps.len()
    }

    /// Output at tap `t` (`from < t <= last_tap`).
    pub fn tap(&self, t: usize) -> &Tensor {
        &self.taps[t - self.from - 1]
    }

    pub fn logits(&self) -> &Tensor {
        self.logits.as_ref().expect("trace stopped before the classifier")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TappedNetwork {
    pub config: NetConfig,
    pub seed: u64,
    pub blocks: Vec<Block>,
    pub head: Linear,
    /// `tap_blocks[t - 1]` is the block whose output is tap `t`.
    pub tap_blocks: Vec<usize>,
    tap_shapes: Vec<[usize; 3]>,
    frozen: bool,
    rs_update: bool,
}

impl TappedNetwork {
    /// Deterministic construction from `(config, seed)`.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.stage_widths();
        let mo = config.bn_momentum;
        let mut blocks = vec![Block::Stem(ConvBn::new(config.in_channels, widths[0], 3, 1, mo, &mut rng))];
        let mut tap_blocks = vec![0];
        let mut cin = widths[0];
        for (stage, (&cout, &count)) in widths.iter().zip(&BLOCKS_PER_STAGE).enumerate() {
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let first = ConvBn::new(cin, cout, 3, stride, mo, &mut rng);
                let second = ConvBn::new(cout, cout, 3, 1, mo, &mut rng);
                let shortcut = match config.arch {
                    ArchId::PlainConv => Shortcut::Absent,
                    ArchId::SmallResidual if stride != 1 || cin != cout => {
                        Shortcut::Projection(ConvBn::new(cin, cout, 1, stride, mo, &mut rng))
                    }
                    ArchId::SmallResidual => Shortcut::Identity,
                };
                blocks.push(Block::Basic(BasicBlock { first, second, shortcut }));
                if b == 0 || b + 1 == count {
                    tap_blocks.push(blocks.len() - 1);
                }
                cin = cout;
            }
        }
        let head = Linear::new(cin, config.num_classes, &mut rng);
        let mut net = TappedNetwork {
            config: config.clone(),
            seed,
            blocks,
            head,
            tap_blocks,
            tap_shapes: Vec::new(),
            frozen: false,
            rs_update: true,
        };
        net.tap_shapes = net.compute_tap_shapes()?;
        Ok(net)
    }

    fn compute_tap_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let r = self.config.resolution;
        let mut shapes = vec![[self.config.in_channels, r, r]];
        let (mut h, mut w) = (r, r);
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let conv = match block {
                Block::Stem(cb) => &cb.conv,
                Block::Basic(b) => &b.first.conv,
            };
            let (oh, ow) = conv.output_hw(h, w);
            h = oh;
            w = ow;
            per_block.push([conv.out_channels, h, w]);
        }
        for &b in &self.tap_blocks {
            shapes.push(per_block[b]);
        }
        for pair in shapes[1..].windows(2) {
            if pair[1][0] < pair[0][0] {
                return Err(Error::config("tap channel counts must be non-decreasing"));
            }
        }
        Ok(shapes)
    }

    /// Number of registered taps (excluding the input tap 0).
    pub fn num_taps(&self) -> usize {
        self.tap_blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// `(channels, height, width)` of activations at tap `t`.
    pub fn tap_shape(&self, t: usize) -> Result<[usize; 3]> {
        self.tap_shapes
            .get(t)
            .copied()
            .ok_or(Error::InvalidTap { tap: t, max: self.num_taps() })
    }

    fn check_tap(&self, t: usize) -> Result<()> {
        if t > self.num_taps() {
            return Err(Error::InvalidTap { tap: t, max: self.num_taps() });
        }
        Ok(())
    }

    fn check_activation(&self, t: usize, a: &Tensor) -> Result<()> {
        let [c, h, w] = self.tap_shape(t)?;
        let s = a.shape();
        if s[1..] != [c, h, w] {
            return Err(Error::shape([a.batch(), c, h, w], s));
        }
        Ok(())
    }

    fn first_block_after(&self, tap: usize) -> usize {
        if tap == 0 {
            0
        } else {
            self.tap_blocks[tap - 1] + 1
        }
    }

    fn effective_mode(&self, mode: BnMode) -> BnMode {
        if mode == BnMode::BatchUpdate && !self.rs_update {
            BnMode::Batch
        } else {
            mode
        }
    }

    /// `f_{<=i}(x)`; tap 0 returns the input unchanged.
    pub fn forward_to(&mut self, i: usize, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.check_tap(i)?;
        self.check_activation(0, x)?;
        if i == 0 {
            return Ok(x.clone());
        }
        let mode = self.effective_mode(mode);
        let end = self.tap_blocks[i - 1];
        let mut a = x.clone();
        for block in &mut self.blocks[..=end] {
            a = block.forward(&a, mode, false).0;
        }
        Ok(a)
    }

    /// `f_{>j}(a)` as class logits.
    pub fn forward_from(&mut self, j: usize, a: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.check_tap(j)?;
        self.check_activation(j, a)?;
        let mode = self.effective_mode(mode);
        let start = self.first_block_after(j);
        let mut h = a.clone();
        for block in &mut self.blocks[start..] {
            h = block.forward(&h, mode, false).0;
        }
        Ok(self.head.forward(&global_avg_pool(&h)))
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.forward_from(0, x, mode)
    }

    /// Runs from tap `from`, recording every tap output up to `until`.
    ///
    /// With `keep` the trace also holds what [`TappedNetwork::backward`] needs.
    pub fn trace(&mut self, a: &Tensor, from: usize, until: Until, mode: BnMode, keep: bool) -> Result<Trace> {
        self.check_tap(from)?;
        self.check_activation(from, a)?;
        let last_tap = match until {
            Until::Tap(t) => {
                self.check_tap(t)?;
                if t < from {
                    return Err(Error::config(format!("cannot trace backwards from tap {from} to {t}")));
                }
                t
            }
            Until::Logits => self.num_taps(),
        };
        let mode = self.effective_mode(mode);
        let start = self.first_block_after(from);
        let end = match until {
            Until::Logits => self.blocks.len(),
            Until::Tap(_) if last_tap == from => start,
            Until::Tap(_) => self.tap_blocks[last_tap - 1] + 1,
        };
        let mut taps = Vec::with_capacity(last_tap - from);
        let mut caches = Vec::new();
        let mut h = a.clone();
        let mut next_tap = from + 1;
        for idx in start..end {
            let (y, cache) = self.blocks[idx].forward(&h, mode, keep);
            if let Some(c) = cache {
                caches.push(c);
            }
            if next_tap <= last_tap && self.tap_blocks[next_tap - 1] == idx {
                taps.push(y.clone());
                next_tap += 1;
            }
            h = y;
        }
        let (pooled, logits) = if until == Until::Logits {
            let p = global_avg_pool(&h);
            let logits = self.head.forward(&p);
            (Some((p, h.shape())), Some(logits))
        } else {
            (None, None)
        };
        Ok(Trace {
            from,
            input_shape: a.shape(),
            taps,
            block_range: (start, end),
            caches,
            pooled: if keep { pooled } else { None },
            logits,
        })
    }

    /// Back-propagates through a kept trace.
    ///
    /// `grad_logits` enters at the classifier output and each `(tap, grad)` pair
    /// is added at that tap's output. Returns the gradient at the trace input.
    /// Parameter gradients accumulate only when the network is not frozen and
    /// `param_grads` is set.
    pub fn backward(
        &mut self,
        trace: &Trace,
        grad_logits: Option<&Tensor>,
        tap_grads: &[(usize, &Tensor)],
        param_grads: bool,
    ) -> Result<Tensor> {
        let param_grads = param_grads && !self.frozen;
        let (start, end) = trace.block_range;
        if trace.caches.len() != end - start {
            return Err(Error::config("trace was recorded without keep=true"));
        }
        for &(t, g) in tap_grads {
            if t <= trace.from || t > trace.last_tap() {
                return Err(Error::InvalidTap { tap: t, max: trace.last_tap() });
            }
            if g.shape() != trace.tap(t).shape() {
                return Err(Error::shape(trace.tap(t).shape(), g.shape()));
            }
        }
        let mut grad: Option<Tensor> = None;
        if let Some(gl) = grad_logits {
            let (pooled, in_shape) = trace
                .pooled
                .as_ref()
                .ok_or_else(|| Error::config("trace did not reach the classifier"))?;
            let gp = self.head.backward(pooled, gl, param_grads);
            grad = Some(global_avg_pool_backward(&gp, *in_shape));
        }
        for idx in (start..end).rev() {
            for &(t, g) in tap_grads {
                if self.tap_blocks[t - 1] == idx {
                    match &mut grad {
                        Some(acc) => acc.add_scaled(g, 1.0),
                        None => grad = Some(g.clone()),
                    }
                }
            }
            let Some(g) = grad.take() else { continue };
            grad = Some(self.blocks[idx].backward(&trace.caches[idx - start], &g, param_grads));
        }
        Ok(grad.unwrap_or_else(|| Tensor::zeros(trace.input_shape)))
    }

    /// Disables parameter updates; `rs_update` keeps running statistics live.
    pub fn set_frozen_with_rs_update(&mut self, rs_update: bool) {
        self.frozen = true;
        self.rs_update = rs_update;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        self.rs_update = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn rs_update_enabled(&self) -> bool {
        self.rs_update
    }

    /// Visits `(param, grad)` pairs in a fixed order. Grad buffers may be empty
    /// until the first backward pass with parameter gradients.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &mut Vec<f32>)) {
        for b in &mut self.blocks {
            b.for_each_param(f);
        }
        f(&mut self.head.weight, &mut self.head.grad_weight);
        f(&mut self.head.bias, &mut self.head.grad_bias);
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.zero_grad();
        }
        self.head.zero_grad();
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p, _| n += p.len());
        n
    }

    pub fn batch_norms(&mut self) -> Vec<&mut BatchNorm2d> {
        self.blocks.iter_mut().flat_map(|b| b.batch_norms()).collect()
    }

    /// Running means and variances of every normalization layer, concatenated.
    pub fn norm_stats(&mut self) -> Vec<f32> {
        let mut out = Vec::new();
        for bn in self.batch_norms() {
            out.extend_from_slice(&bn.running_mean);
            out.extend_from_slice(&bn.running_var);
        }
        out
    }

    /// FNV-1a digest over the bit patterns of all learnable parameters.
    pub fn param_checksum(&mut self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.for_each_param(&mut |p, _| {
            for v in p.iter() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        });
        h
    }

    /// Parameters followed by normalization statistics, in a fixed order.
    pub fn export_state(&mut self) -> Vec<f32> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p, _| out.extend_from_slice(p));
        out.extend(self.norm_stats());
        out
    }

    pub fn import_state(&mut self, state: &[f32]) -> Result<()> {
        let mut n_params = 0;
        self.for_each_param(&mut |p, _| n_params += p.len());
        let n_stats = self.norm_stats().len();
        if state.len() != n_params + n_stats {
            return Err(Error::shape(n_params + n_stats, state.len()));
        }
        let mut off = 0;
        self.for_each_param(&mut |p, _| {
            p.copy_from_slice(&state[off..off + p.len()]);
            off += p.len();
        });
        for bn in self.batch_norms() {
            let c = bn.channels;
            bn.running_mean.copy_from_slice(&state[off..off + c]);
            bn.running_var.copy_from_slice(&state[off + c..off + 2 * c]);
            off += 2 * c;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn tiny(arch: ArchId) -> TappedNetwork {
        let cfg = NetConfig::new(arch, 10).with_width(0.0625).with_resolution(8);
        TappedNetwork::build(&cfg, 7).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::from_vec([n, 3, 8, 8], (0..n * 192).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn resnet_layout_registers_nine_taps() {
        let net = tiny(ArchId::SmallResidual);
        assert_eq!(net.num_taps(), 9);
        assert_eq!(net.tap_shape(0).unwrap(), [3, 8, 8]);
        assert_eq!(net.tap_shape(1).unwrap(), [4, 8, 8]);
        assert_eq!(net.tap_shape(9).unwrap(), [32, 1, 1]);
        assert!(matches!(net.tap_shape(10), Err(Error::InvalidTap { .. })));
    }

    #[test]
    fn plain_conv_has_no_skips() {
        let net = tiny(ArchId::PlainConv);
        for b in &net.blocks {
            if let Block::Basic(bb) = b {
                assert!(matches!(bb.shortcut, Shortcut::Absent));
            }
        }
        let res = tiny(ArchId::SmallResidual);
        assert!(res.blocks.iter().any(|b| matches!(b, Block::Basic(BasicBlock { shortcut: Shortcut::Identity, .. }))));
    }

    #[test]
    fn build_is_deterministic() {
        let mut a = tiny(ArchId::SmallResidual);
        let mut b = tiny(ArchId::SmallResidual);
        assert_eq!(a.export_state(), b.export_state());
        let cfg = NetConfig::new(ArchId::SmallResidual, 10).with_width(0.0625).with_resolution(8);
        let mut c = TappedNetwork::build(&cfg, 8).unwrap();
        assert_ne!(a.param_checksum(), c.param_checksum());
    }

    #[test]
    fn unknown_arch_is_config_error() {
        assert!(matches!(ArchId::parse("vgg"), Err(Error::Config(_))));
    }

    #[test]
    fn composition_identity_is_bitwise() {
        for arch in [ArchId::SmallResidual, ArchId::PlainConv] {
            let mut net = tiny(arch);
            let x = images(4, 1);
            let full = net.forward(&x, BnMode::Running).unwrap();
            for i in 0..=net.num_taps() {
                let a = net.forward_to(i, &x, BnMode::Running).unwrap();
                let y = net.forward_from(i, &a, BnMode::Running).unwrap();
                assert_eq!(y.data(), full.data(), "tap {i}");
            }
        }
    }

    #[test]
    fn zeros_at_last_tap_give_classifier_bias() {
        let mut net = tiny(ArchId::SmallResidual);
        let [c, h, w] = net.tap_shape(9).unwrap();
        let logits = net.forward_from(9, &Tensor::zeros([2, c, h, w]), BnMode::Running).unwrap();
        for n in 0..2 {
            assert_eq!(logits.row(n), &net.head.bias[..]);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut net = tiny(ArchId::SmallResidual);
        assert!(matches!(net.forward_from(3, &Tensor::zeros([1, 3, 8, 8]), BnMode::Running), Err(Error::Shape { .. })));
        assert!(matches!(net.forward_to(12, &images(1, 0), BnMode::Running), Err(Error::InvalidTap { .. })));
    }

    #[test]
    fn frozen_without_rs_update_keeps_stats() {
        let mut net = tiny(ArchId::SmallResidual);
        net.set_frozen_with_rs_update(false);
        let before = net.norm_stats();
        for s in 0..10 {
            net.forward(&images(4, s), BnMode::BatchUpdate).unwrap();
        }
        assert_eq!(before, net.norm_stats());
        net.set_frozen_with_rs_update(true);
        net.forward(&images(4, 99), BnMode::BatchUpdate).unwrap();
        assert_ne!(before, net.norm_stats());
    }

    #[test]
    fn trace_matches_plain_forward_and_backward_injects_tap_grads() {
        let mut net = tiny(ArchId::SmallResidual);
        let x = images(3, 4);
        let a2 = net.forward_to(2, &x, BnMode::Running).unwrap();
        let tr = net.trace(&a2, 2, Until::Logits, BnMode::Running, true).unwrap();
        assert_eq!(tr.logits().data(), net.forward_from(2, &a2, BnMode::Running).unwrap().data());
        assert_eq!(tr.tap(5).data(), net.forward_to(5, &x, BnMode::Running).unwrap().data());
        // gradient injected only at tap 4 of sum(tap4) equals the backward of that linear functional
        let ones = Tensor::full(tr.tap(4).shape(), 1.0);
        let g = net.backward(&tr, None, &[(4, &ones)], false).unwrap();
        assert_eq!(g.shape(), a2.shape());
        assert!(g.is_finite());
    }

    #[test]
    fn state_round_trip() {
        let mut a = tiny(ArchId::SmallResidual);
        a.forward(&images(4, 3), BnMode::BatchUpdate).unwrap();
        let state = a.export_state();
        let mut b = tiny(ArchId::SmallResidual);
        b.import_state(&state).unwrap();
        assert_eq!(b.export_state(), state);
        assert!(b.import_state(&state[1..]).is_err());
    }
}
