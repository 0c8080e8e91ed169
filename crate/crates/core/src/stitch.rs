//! Affine stitching layers and the stitched model `g_{>j} . T . f_{<=i}`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BnMode, Conv2d, ConvCache};
use crate::linalg::{lstsq_pinv, PINV_REL_CUTOFF};
use crate::nets::{TappedNetwork, Trace, Until};
use crate::optim::Parameters;
use crate::resize::{resize_bilinear, resize_bilinear_backward};
use crate::tensor::Tensor;

/// Default number of training samples for the closed-form initialization.
pub const DEFAULT_INIT_SAMPLES: usize = 100;

/// Per-position channel map with bias, optionally preceded by a bilinear resize.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchLayer {
    pub in_tap: usize,
    pub out_tap: usize,
    /// Spatial size the front activation is resampled to before the channel map.
    pub resize: Option<(usize, usize)>,
    map: Conv2d,
}

#[derive(Debug, Clone)]
pub struct StitchCache {
    in_shape: [usize; 4],
    conv: ConvCache,
}

impl StitchLayer {
    /// `weight` is `out_channels x in_channels`, row-major.
    pub fn from_parts(
        in_tap: usize,
        out_tap: usize,
        in_channels: usize,
        out_channels: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
        resize: Option<(usize, usize)>,
    ) -> Result<Self> {
        if weight.len() != in_channels * out_channels || bias.len() != out_channels {
            return Err(Error::shape(
                (out_channels, in_channels),
                (weight.len(), bias.len()),
            ));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numerics("stitch layer parameters".into()));
        }
        Ok(StitchLayer {
            in_tap,
            out_tap,
            resize,
            map: Conv2d {
                in_channels,
                out_channels,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight,
                bias: Some(bias),
                grad_weight: Vec::new(),
                grad_bias: Vec::new(),
            },
        })
    }

    /// Identity map on `channels` channels (weight = I, bias = 0).
    pub fn identity(in_tap: usize, out_tap: usize, channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        Self::from_parts(in_tap, out_tap, channels, channels, w, vec![0.0; channels], None).expect("square identity")
    }

    pub fn in_channels(&self) -> usize {
        self.map.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.map.out_channels
    }

    pub fn weight(&self) -> &[f32] {
        &self.map.weight
    }

    pub fn bias(&self) -> &[f32] {
        self.map.bias.as_deref().expect("stitch layers carry a bias")
    }

    pub fn weight_mut(&mut self) -> &mut [f32] {
        &mut self.map.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        self.map.bias.as_deref_mut().expect("stitch layers carry a bias")
    }

    pub fn grad_weight(&self) -> &[f32] {
        &self.map.grad_weight
    }

    pub fn grad_bias(&self) -> &[f32] {
        &self.map.grad_bias
    }

    pub fn num_params(&self) -> usize {
        self.map.weight.len() + self.out_channels()
    }

    pub fn apply(&self, a: &Tensor) -> Result<Tensor> {
        Ok(self.forward(a, false)?.0)
    }

    pub fn forward(&self, a: &Tensor, keep: bool) -> Result<(Tensor, Option<StitchCache>)> {
        if a.channels() != self.in_channels() {
            return Err(Error::shape(self.in_channels(), a.channels()));
        }
        let resized;
        let src = match self.resize {
            Some((h, w)) if (h, w) != (a.height(), a.width()) => {
                resized = resize_bilinear(a, h, w);
                &resized
            }
            _ => a,
        };
        let (y, conv) = self.map.forward(src, keep);
        Ok((y, conv.map(|conv| StitchCache { in_shape: a.shape(), conv })))
    }

    /// Returns the gradient at the layer input; accumulates into the layer's
    /// gradient buffers when `param_grads`.
    pub fn backward(&mut self, cache: &StitchCache, grad_out: &Tensor, param_grads: bool) -> Tensor {
        let g = self.map.backward(&cache.conv, grad_out, param_grads);
        if g.shape() == cache.in_shape {
            g
        } else {
            resize_bilinear_backward(&g, cache.in_shape)
        }
    }

    pub fn zero_grad(&mut self) {
        self.map.zero_grad();
    }
}

impl Parameters for StitchLayer {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &mut Vec<f32>)) {
        f(&mut self.map.weight, &mut self.map.grad_weight);
        let bias = self.map.bias.as_mut().expect("stitch layers carry a bias");
        f(bias, &mut self.map.grad_bias);
    }
}

/// Issue raised by [`dm_init`] that does not prevent a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankWarning {
    /// Fewer regression rows than unknowns per output channel.
    Underdetermined { rows: usize, unknowns: usize },
    /// The design matrix lost rank after singular value truncation.
    RankDeficient { rank: usize, unknowns: usize },
}

#[derive(Debug, Clone)]
pub struct DmInit {
    pub layer: StitchLayer,
    pub rank: usize,
    pub rows: usize,
    pub warning: Option<RankWarning>,
}

/// Closed-form direct-matching solution `argmin ||T(front) - end||_F`.
///
/// Every (sample, position) contributes one regression row made of the front
/// channel vector plus a constant 1 for the bias. Front activations are
/// resampled to the end resolution first.
pub fn dm_init(front_acts: &Tensor, end_acts: &Tensor, in_tap: usize, out_tap: usize) -> Result<DmInit> {
    if front_acts.batch() != end_acts.batch() {
        return Err(Error::shape(front_acts.batch(), end_acts.batch()));
    }
    if !front_acts.is_finite() || !end_acts.is_finite() {
        return Err(Error::Numerics("dm_init activations".into()));
    }
    let (h, w) = (end_acts.height(), end_acts.width());
    let resize = ((front_acts.height(), front_acts.width()) != (h, w)).then_some((h, w));
    let front = match resize {
        Some((h, w)) => resize_bilinear(front_acts, h, w),
        None => front_acts.clone(),
    };
    let cin = front.channels();
    let cout = end_acts.channels();
    let plane = h * w;
    let rows = front.batch() * plane;
    let cols = cin + 1;
    let mut x = vec![0.0f64; rows * cols];
    let mut y = vec![0.0f64; rows * cout];
    for s in 0..front.batch() {
        let fs = front.sample(s);
        let es = end_acts.sample(s);
        for p in 0..plane {
            let r = s * plane + p;
            for c in 0..cin {
                x[r * cols + c] = fs[c * plane + p] as f64;
            }
            x[r * cols + cin] = 1.0;
            for o in 0..cout {
                y[r * cout + o] = es[o * plane + p] as f64;
            }
        }
    }
    let sol = lstsq_pinv(&x, &y, rows, cols, cout, PINV_REL_CUTOFF);
    let mut weight = vec![0.0f32; cout * cin];
    let mut bias = vec![0.0f32; cout];
    for o in 0..cout {
        for c in 0..cin {
            weight[o * cin + c] = sol.coef[c * cout + o] as f32;
        }
        bias[o] = sol.coef[cin * cout + o] as f32;
    }
    let warning = if rows < cols {
        Some(RankWarning::Underdetermined { rows, unknowns: cols })
    } else if sol.rank < cols {
        Some(RankWarning::RankDeficient { rank: sol.rank, unknowns: cols })
    } else {
        None
    };
    if let Some(w) = &warning {
        log::warn!("dm_init: {w:?}; returning the minimum-norm solution");
    }
    let layer = StitchLayer::from_parts(in_tap, out_tap, cin, cout, weight, bias, resize)?;
    Ok(DmInit {
        layer,
        rank: sol.rank,
        rows,
        warning,
    })
}

/// `h = g_{>j} . T . f_{<=i}` with frozen front and end networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchedModel {
    pub front: TappedNetwork,
    pub end: TappedNetwork,
    pub layer: StitchLayer,
}

/// Recorded forward pass of a stitched model.
#[derive(Debug, Clone)]
pub struct StitchedTrace {
    front: Option<Trace>,
    stitch: Option<StitchCache>,
    /// Stitch-layer output, i.e. the activation injected at end tap `j`.
    pub injected: Tensor,
    pub end: Trace,
}

impl StitchedTrace {
    pub fn logits(&self) -> &Tensor {
        self.end.logits()
    }

    /// End-model activation at tap `l >= j` along the stitched path.
    pub fn end_tap(&self, l: usize) -> &Tensor {
        if l == self.end.from {
            &self.injected
        } else {
            self.end.tap(l)
        }
    }
}

impl StitchedModel {
    /// Freezes both networks (running statistics stay live) and checks that
    /// the layer connects their tap shapes.
    pub fn new(mut front: TappedNetwork, mut end: TappedNetwork, layer: StitchLayer) -> Result<Self> {
        let [fc, fh, fw] = front.tap_shape(layer.in_tap)?;
        let [ec, eh, ew] = end.tap_shape(layer.out_tap)?;
        if layer.in_channels() != fc || layer.out_channels() != ec {
            return Err(Error::shape((fc, ec), (layer.in_channels(), layer.out_channels())));
        }
        let out_hw = layer.resize.unwrap_or((fh, fw));
        if out_hw != (eh, ew) {
            return Err(Error::Shape {
                expected: format!("stitched resolution {eh}x{ew}"),
                got: format!("{}x{}", out_hw.0, out_hw.1),
            });
        }
        if front.config.in_channels != end.config.in_channels || front.config.resolution != end.config.resolution {
            return Err(Error::config("front and end must share the input space"));
        }
        front.set_frozen_with_rs_update(true);
        end.set_frozen_with_rs_update(true);
        Ok(StitchedModel { front, end, layer })
    }

    pub fn i(&self) -> usize {
        self.layer.in_tap
    }

    pub fn j(&self) -> usize {
        self.layer.out_tap
    }

    pub fn num_classes(&self) -> usize {
        self.end.num_classes()
    }

    pub fn set_rs_update(&mut self, enabled: bool) {
        self.front.set_frozen_with_rs_update(enabled);
        self.end.set_frozen_with_rs_update(enabled);
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let a = self.front.forward_to(self.i(), x, mode)?;
        let t = self.layer.apply(&a)?;
        self.end.forward_from(self.j(), &t, mode)
    }

    /// Traced forward. `through_front` keeps the front caches needed for
    /// input gradients; `keep` keeps stitch and end caches.
    pub fn trace(&mut self, x: &Tensor, mode: BnMode, keep: bool, through_front: bool, until: Until) -> Result<StitchedTrace> {
        let i = self.i();
        let (a, front) = if through_front && i > 0 {
            let tr = self.front.trace(x, 0, Until::Tap(i), mode, true)?;
            (tr.tap(i).clone(), Some(tr))
        } else {
            (self.front.forward_to(i, x, mode)?, None)
        };
        let (t, stitch) = self.layer.forward(&a, keep || through_front)?;
        let end = self.end.trace(&t, self.j(), until, mode, keep || through_front)?;
        Ok(StitchedTrace {
            front,
            stitch,
            injected: t,
            end,
        })
    }

    /// Back-propagates through the end segment and the stitch layer.
    ///
    /// `tap_grads` may include the stitching tap `j` itself (gradient on the
    /// injected activation). Returns the input gradient when the trace was
    /// recorded `through_front`.
    pub fn backward(
        &mut self,
        trace: &StitchedTrace,
        grad_logits: Option<&Tensor>,
        tap_grads: &[(usize, &Tensor)],
        layer_grads: bool,
    ) -> Result<Option<Tensor>> {
        let j = self.j();
        let deeper: Vec<(usize, &Tensor)> = tap_grads.iter().copied().filter(|&(t, _)| t > j).collect();
        let mut g = self.end.backward(&trace.end, grad_logits, &deeper, false)?;
        for &(t, gt) in tap_grads {
            if t == j {
                g.add_scaled(gt, 1.0);
            } else if t < j {
                return Err(Error::InvalidTap { tap: t, max: self.end.num_taps() });
            }
        }
        let cache = trace
            .stitch
            .as_ref()
            .ok_or_else(|| Error::config("stitched trace recorded without caches"))?;
        let ga = self.layer.backward(cache, &g, layer_grads);
        match &trace.front {
            Some(ft) => Ok(Some(self.front.backward(ft, None, &[(self.i(), &ga)], false)?)),
            None if self.i() == 0 && trace.stitch.is_some() => Ok(Some(ga)),
            None => Ok(None),
        }
    }
}
