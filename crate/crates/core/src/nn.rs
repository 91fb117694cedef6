//! Parameterized function blocks: image encoder, spatial broadcast decoder,
//! recurrent cell, set embedding layers and the pooled set encoder.
//!
//! Every block registers its tensors in a [`ParamStore`] under a dotted name
//! (`"seg.enc.conv1.w"`), which is what the optimizer, checkpoints and the
//! stop-gradient audit iterate over. Weights use Xavier (Glorot) uniform
//! initialization.

use crate::gemm::Scalar;
use crate::tensor::{Arr, Tensor};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Named registry of trainable tensors, in registration order.
#[derive(Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, t: Tensor<T>) -> Tensor<T> {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t.clone()));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Sum of squared gradient entries over parameters matching a name prefix.
    /// Parameters with no gradient recorded contribute zero.
    pub fn grad_sq_norm_prefix(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| {
                t.grad()
                    .map(|g| g.iter().map(|&v| v.cast_f64() * v.cast_f64()).sum::<f64>())
                    .unwrap_or(0.0)
            })
            .sum()
    }

    /// True if no gradient array was ever allocated for any parameter under
    /// the prefix — the graph-level stop-gradient check.
    pub fn grads_untouched_prefix(&self, prefix: &str) -> bool {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .all(|(_, t)| t.grad().is_none())
    }
}

/// Xavier-uniform tensor with the given fan-in/out.
pub fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::cast_from(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::param(Arr::from_shape_vec(IxDyn(shape), data).unwrap())
}

pub fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::param(Arr::zeros(IxDyn(shape)))
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct Linear<T: Scalar> {
    pub w: Tensor<T>, // [in, out]
    pub b: Tensor<T>, // [out]
}

impl<T: Scalar> Linear<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Self {
        Linear {
            w: ps.register(&format!("{prefix}.w"), xavier(rng, &[inp, out], inp, out)),
            b: ps.register(&format!("{prefix}.b"), zeros_param(&[out])),
        }
    }

    /// Applies to the last axis of an N-D input.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let shape = x.shape();
        let inp = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, inp]);
        let y = flat.matmul(&self.w).add(&self.b);
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.w.shape()[1]);
        y.reshape(&out_shape)
    }
}

// ---------------------------------------------------------------------------
// Conv2d layer wrapper
// ---------------------------------------------------------------------------

pub struct Conv2d<T: Scalar> {
    pub w: Tensor<T>, // [oc, ic, kh, kw]
    pub b: Tensor<T>, // [oc]
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = ic * k * k;
        let fan_out = oc * k * k;
        Conv2d {
            w: ps.register(&format!("{prefix}.w"), xavier(rng, &[oc, ic, k, k], fan_in, fan_out)),
            b: ps.register(&format!("{prefix}.b"), zeros_param(&[oc])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

/// Standard LSTM cell. Gate order in the stacked weight matrices is
/// input, forget, cell, output; the forget-gate bias starts at 1.
pub struct LstmCell<T: Scalar> {
    pub w_ih: Tensor<T>, // [in, 4h]
    pub w_hh: Tensor<T>, // [h, 4h]
    pub b: Tensor<T>,    // [4h]
    pub hidden: usize,
}

pub struct LstmState<T: Scalar> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmCell<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng, inp: usize, hidden: usize) -> Self {
        let mut bias = Arr::<T>::zeros(IxDyn(&[4 * hidden]));
        for i in hidden..2 * hidden {
            bias[i] = T::one();
        }
        LstmCell {
            w_ih: ps.register(&format!("{prefix}.w_ih"), xavier(rng, &[inp, 4 * hidden], inp, hidden)),
            w_hh: ps.register(&format!("{prefix}.w_hh"), xavier(rng, &[hidden, 4 * hidden], hidden, hidden)),
            b: ps.register(&format!("{prefix}.b"), Tensor::param(bias)),
            hidden,
        }
    }

    pub fn zero_state(&self, batch: usize) -> LstmState<T> {
        LstmState {
            h: Tensor::constant(Arr::zeros(IxDyn(&[batch, self.hidden]))),
            c: Tensor::constant(Arr::zeros(IxDyn(&[batch, self.hidden]))),
        }
    }

    pub fn step(&self, x: &Tensor<T>, state: &LstmState<T>) -> LstmState<T> {
        let h = self.hidden;
        let gates = x
            .matmul(&self.w_ih)
            .add(&state.h.matmul(&self.w_hh))
            .add(&self.b);
        let i = gates.slice_axis_op(1, 0, h).sigmoid();
        let f = gates.slice_axis_op(1, h, 2 * h).sigmoid();
        let g = gates.slice_axis_op(1, 2 * h, 3 * h).tanh();
        let o = gates.slice_axis_op(1, 3 * h, 4 * h).sigmoid();
        let c = f.mul(&state.c).add(&i.mul(&g));
        let hh = o.mul(&c.tanh());
        LstmState { h: hh, c }
    }
}

// ---------------------------------------------------------------------------
// Set embedding layer (residual set self-attention, no positions)
// ---------------------------------------------------------------------------

/// One residual set self-attention layer over K slots.
///
/// Attention uses scaled dot products of two linear projections of the slots;
/// values mix each attended slot with its difference from the query slot. All
/// weights are shared across slots and there are no positional encodings, so
/// the layer is permutation-equivariant.
pub struct SetEmbeddingLayer<T: Scalar> {
    w_q: Tensor<T>,      // [z, z]
    w_k: Tensor<T>,      // [z, z]
    w_va: Tensor<T>,     // [z, z] applied to attended slots
    w_vb: Tensor<T>,     // [z, z] applied to (query - attended)
    ln_gamma: Tensor<T>, // [z]
    ln_beta: Tensor<T>,  // [z]
    mlp1: Linear<T>,
    mlp2: Linear<T>,
    use_slot_difference: bool,
    dim: usize,
}

impl<T: Scalar> SetEmbeddingLayer<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        z: usize,
        hidden: usize,
        use_slot_difference: bool,
    ) -> Self {
        SetEmbeddingLayer {
            w_q: ps.register(&format!("{prefix}.w_q"), xavier(rng, &[z, z], z, z)),
            w_k: ps.register(&format!("{prefix}.w_k"), xavier(rng, &[z, z], z, z)),
            w_va: ps.register(&format!("{prefix}.w_va"), xavier(rng, &[z, z], 2 * z, z)),
            w_vb: ps.register(&format!("{prefix}.w_vb"), xavier(rng, &[z, z], 2 * z, z)),
            ln_gamma: ps.register(
                &format!("{prefix}.ln_g"),
                Tensor::param(Arr::from_elem(IxDyn(&[z]), T::one())),
            ),
            ln_beta: ps.register(&format!("{prefix}.ln_b"), zeros_param(&[z])),
            mlp1: Linear::new(ps, &format!("{prefix}.mlp1"), rng, z, hidden),
            mlp2: Linear::new(ps, &format!("{prefix}.mlp2"), rng, hidden, z),
            use_slot_difference,
            dim: z,
        }
    }

    /// slots: [B, K, z] -> [B, K, z]
    pub fn forward(&self, slots: &Tensor<T>) -> Tensor<T> {
        let alpha = self.attention(slots);
        let attended = alpha.bmm(slots); // row i = sum_j alpha_ij z_j
        let va = self.apply_sq(&attended, &self.w_va);
        let zhat = if self.use_slot_difference {
            let diff = slots.sub(&attended);
            va.add(&self.apply_sq(&diff, &self.w_vb))
        } else {
            va
        };
        let pre = slots
            .add(&zhat)
            .layer_norm(&self.ln_gamma, &self.ln_beta, T::cast_from(1e-5));
        let g = self.mlp2.forward(&self.mlp1.forward(&pre).gelu());
        slots.add(&g)
    }

    /// Scaled dot-product attention weights, rows summing to one: [B, K, K].
    pub fn attention(&self, slots: &Tensor<T>) -> Tensor<T> {
        let keys = self.apply_sq(slots, &self.w_k);
        let queries = self.apply_sq(slots, &self.w_q);
        let scale = T::cast_from(1.0 / (self.dim as f64).sqrt());
        let logits = keys.bmm(&queries.permute(&[0, 2, 1])).mul_scalar(scale);
        logits.softmax(2)
    }

    fn apply_sq(&self, x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
        let shape = x.shape();
        let rows = shape[0] * shape[1];
        x.reshape(&[rows, self.dim])
            .matmul(w)
            .reshape(&[shape[0], shape[1], self.dim])
    }
}

// ---------------------------------------------------------------------------
// DeepSets sum pooling
// ---------------------------------------------------------------------------

/// Permutation-invariant set encoder: per-slot MLP, sum over slots, outer MLP.
pub struct DeepSetsPool<T: Scalar> {
    inner1: Linear<T>,
    inner2: Linear<T>,
    outer: Linear<T>,
}

impl<T: Scalar> DeepSetsPool<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng, z: usize, hidden: usize) -> Self {
        DeepSetsPool {
            inner1: Linear::new(ps, &format!("{prefix}.inner1"), rng, z, hidden),
            inner2: Linear::new(ps, &format!("{prefix}.inner2"), rng, hidden, hidden),
            outer: Linear::new(ps, &format!("{prefix}.outer"), rng, hidden, hidden),
        }
    }

    /// slots: [B, K, z] -> [B, hidden]
    pub fn forward(&self, slots: &Tensor<T>) -> Tensor<T> {
        let per_slot = self.inner2.forward(&self.inner1.forward(slots).relu());
        let s = per_slot.shape();
        let pooled = per_slot.sum_axis_keep(1).reshape(&[s[0], s[2]]);
        self.outer.forward(&pooled).relu()
    }
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

/// Four-layer convolutional encoder with two stride-2 stages:
/// [B, 3, H, W] -> [B, features, H/4, W/4].
pub struct EncoderCnn<T: Scalar> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    conv3: Conv2d<T>,
    conv4: Conv2d<T>,
    pub features: usize,
}

impl<T: Scalar> EncoderCnn<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng, channels: usize, features: usize) -> Self {
        EncoderCnn {
            conv1: Conv2d::new(ps, &format!("{prefix}.conv1"), rng, 3, channels, 3, 2, 1),
            conv2: Conv2d::new(ps, &format!("{prefix}.conv2"), rng, channels, channels, 3, 1, 1),
            conv3: Conv2d::new(ps, &format!("{prefix}.conv3"), rng, channels, features, 3, 2, 1),
            conv4: Conv2d::new(ps, &format!("{prefix}.conv4"), rng, features, features, 3, 1, 1),
            features,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 4, "encoder expects [B, 3, H, W]");
        assert_eq!(x.shape()[1], 3, "encoder expects 3 input channels");
        let h = self.conv1.forward(x).relu();
        let h = self.conv2.forward(&h).relu();
        let h = self.conv3.forward(&h).relu();
        self.conv4.forward(&h).relu()
    }
}

// ---------------------------------------------------------------------------
// Spatial broadcast decoder
// ---------------------------------------------------------------------------

/// A fixed coordinate grid in [-1, 1]^2, channel-first: [1, 2, H, W].
pub fn coord_grid<T: Scalar>(h: usize, w: usize) -> Arr<T> {
    let mut g = Arr::<T>::zeros(IxDyn(&[1, 2, h, w]));
    for y in 0..h {
        for x in 0..w {
            let fy = if h > 1 { -1.0 + 2.0 * y as f64 / (h - 1) as f64 } else { 0.0 };
            let fx = if w > 1 { -1.0 + 2.0 * x as f64 / (w - 1) as f64 } else { 0.0 };
            g[[0, 0, y, x]] = T::cast_from(fy);
            g[[0, 1, y, x]] = T::cast_from(fx);
        }
    }
    g
}

/// Spatial broadcast decoder: a slot vector is tiled over a grid, joined with
/// the coordinate grid and convolved down to RGB plus a mask logit.
///
/// `decode_hw` may be half of `out_hw`, in which case the head output is
/// upsampled 2x nearest before the sigmoid.
pub struct SbdDecoder<T: Scalar> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    head: Conv2d<T>,
    pub out_hw: usize,
    pub decode_hw: usize,
    grid: Tensor<T>,
}

impl<T: Scalar> SbdDecoder<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        z: usize,
        hidden: usize,
        out_hw: usize,
        decode_hw: usize,
    ) -> Self {
        assert!(
            decode_hw == out_hw || decode_hw * 2 == out_hw,
            "decode_hw must be out_hw or out_hw/2"
        );
        SbdDecoder {
            conv1: Conv2d::new(ps, &format!("{prefix}.conv1"), rng, z + 2, hidden, 3, 1, 1),
            conv2: Conv2d::new(ps, &format!("{prefix}.conv2"), rng, hidden, hidden, 3, 1, 1),
            head: Conv2d::new(ps, &format!("{prefix}.head"), rng, hidden, 4, 1, 1, 0),
            out_hw,
            decode_hw,
            grid: Tensor::constant(coord_grid(decode_hw, decode_hw)),
        }
    }

    /// z_flat: [N, z] -> (rgb [N, 3, H, W] in [0,1], mask logits [N, H, W]).
    pub fn forward(&self, z_flat: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let n = z_flat.shape()[0];
        let zdim = z_flat.shape()[1];
        let d = self.decode_hw;
        let tiled = z_flat
            .reshape(&[n, zdim, 1, 1])
            .broadcast_to(&[n, zdim, d, d]);
        let grid = self.grid.broadcast_to(&[n, 2, d, d]);
        let inp = Tensor::concat(1, &[tiled, grid]);
        let h = self.conv1.forward(&inp).relu();
        let h = self.conv2.forward(&h).relu();
        let mut out = self.head.forward(&h);
        if self.decode_hw != self.out_hw {
            out = out.upsample2x();
        }
        let rgb = out.slice_axis_op(1, 0, 3).sigmoid();
        let mask_logit = out
            .slice_axis_op(1, 3, 4)
            .reshape(&[n, self.out_hw, self.out_hw]);
        (rgb, mask_logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn encoder_shape_32_to_8x8() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = stream(0, "t");
        let enc = EncoderCnn::new(&mut ps, "enc", &mut rng, 32, 64);
        let x = Tensor::constant(Arr::zeros(IxDyn(&[2, 3, 32, 32])));
        let y = enc.forward(&x);
        assert_eq!(y.shape(), vec![2, 64, 8, 8]);
    }

    #[test]
    fn encoder_deterministic_and_finite_on_boundary_inputs() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = stream(1, "t");
        let enc = EncoderCnn::new(&mut ps, "enc", &mut rng, 8, 16);
        for fill in [0.0, 1.0] {
            let x = Tensor::constant(Arr::from_elem(IxDyn(&[1, 3, 16, 16]), fill));
            let y1 = enc.forward(&x).value();
            let y2 = enc.forward(&x).value();
            assert_eq!(y1, y2);
            assert!(y1.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn coord_grid_corners() {
        let g = coord_grid::<f64>(8, 8);
        assert_eq!(g[[0, 0, 0, 0]], -1.0);
        assert_eq!(g[[0, 1, 0, 0]], -1.0);
        assert_eq!(g[[0, 0, 7, 7]], 1.0);
        assert_eq!(g[[0, 1, 7, 7]], 1.0);
    }

    #[test]
    fn lstm_zero_weights_zero_output() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = stream(2, "t");
        let cell = LstmCell::new(&mut ps, "lstm", &mut rng, 3, 4);
        for (_, p) in ps.iter() {
            p.update_data(|d| d.fill(0.0));
        }
        let st = cell.zero_state(2);
        let x = Tensor::constant(Arr::zeros(IxDyn(&[2, 3])));
        let out = cell.step(&x, &st);
        assert!(out.h.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_output_bounded_by_gating() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = stream(3, "t");
        let cell = LstmCell::new(&mut ps, "lstm", &mut rng, 4, 8);
        let mut st = cell.zero_state(1);
        let x = Tensor::constant(Arr::from_elem(IxDyn(&[1, 4]), 100.0));
        for _ in 0..5 {
            st = cell.step(&x, &st);
        }
        assert!(st.h.value().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn set_layer_k1_attention_is_one() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = stream(4, "t");
        let layer = SetEmbeddingLayer::new(&mut ps, "set", &mut rng, 6, 12, true);
        let slots = Tensor::constant(Arr::from_shape_fn(IxDyn(&[1, 1, 6]), |i| i[2] as f64 * 0.3));
        let a = layer.attention(&slots).value();
        assert_eq!(a.shape(), &[1, 1, 1]);
        assert!((a[[0, 0, 0]] - 1.0).abs() < 1e-12);
    }
}
