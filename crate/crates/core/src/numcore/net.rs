//! Plain layer stacks with explicit forward and backward passes.
//!
//! A network is a `Vec<LayerSpec>`. Activations flow through as
//! tensors shaped either `[C, H, W]` (after a conv) or `[N]` (after a
//! linear); a linear layer flattens whatever precedes it. Conditioning
//! enters through `ConcatCondition` layers, which broadcast a vector
//! across the spatial grid as extra channels (or append it to a flat
//! vector). There is no autodiff graph: each layer kind has its
//! hand-written backward, checked against finite differences in the
//! tests.

use super::{Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Dense affine map. Weights `[out, in]` row-major, bias `[out]`.
    Linear,
    /// 3x3 convolution, stride 1, zero padding 1 (spatial dims are
    /// preserved). Weights `[out_ch, in_ch, 3, 3]`, bias `[out_ch]`.
    Conv3x3,
    /// x * sigmoid(x), elementwise.
    SiLU,
    /// ln(1 + e^x), elementwise; strictly positive.
    Softplus,
    /// Appends the condition vector: as `in_dim` broadcast channels to
    /// a `[C, H, W]` activation, or concatenated to a flat vector.
    ConcatCondition,
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Tensor,
    pub biases: Tensor,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize, rng: &mut Rng) -> LayerSpec {
        let std = (1.0 / in_dim as f64).sqrt();
        let mut w = rng.normal_tensor(&[out_dim, in_dim]);
        w.scale(std);
        LayerSpec {
            kind: LayerKind::Linear,
            in_dim,
            out_dim,
            weights: w,
            biases: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn linear_from(in_dim: usize, out_dim: usize, weights: Tensor, biases: Tensor) -> Result<LayerSpec> {
        if weights.shape() != [out_dim, in_dim] || biases.shape() != [out_dim] {
            return Err(Error::shape(format!(
                "linear({in_dim},{out_dim}) wants weights [{out_dim},{in_dim}] and bias [{out_dim}], got {:?} / {:?}",
                weights.shape(),
                biases.shape()
            )));
        }
        Ok(LayerSpec {
            kind: LayerKind::Linear,
            in_dim,
            out_dim,
            weights,
            biases,
        })
    }

    pub fn conv3x3(in_ch: usize, out_ch: usize, rng: &mut Rng) -> LayerSpec {
        let std = (1.0 / (in_ch * 9) as f64).sqrt();
        let mut w = rng.normal_tensor(&[out_ch, in_ch, 3, 3]);
        w.scale(std);
        LayerSpec {
            kind: LayerKind::Conv3x3,
            in_dim: in_ch,
            out_dim: out_ch,
            weights: w,
            biases: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn conv3x3_from(in_ch: usize, out_ch: usize, weights: Tensor, biases: Tensor) -> Result<LayerSpec> {
        if weights.shape() != [out_ch, in_ch, 3, 3] || biases.shape() != [out_ch] {
            return Err(Error::shape(format!(
                "conv3x3({in_ch},{out_ch}) wants weights [{out_ch},{in_ch},3,3] and bias [{out_ch}], got {:?} / {:?}",
                weights.shape(),
                biases.shape()
            )));
        }
        Ok(LayerSpec {
            kind: LayerKind::Conv3x3,
            in_dim: in_ch,
            out_dim: out_ch,
            weights,
            biases,
        })
    }

    pub fn silu() -> LayerSpec {
        LayerSpec {
            kind: LayerKind::SiLU,
            in_dim: 0,
            out_dim: 0,
            weights: Tensor::zeros(&[0]),
            biases: Tensor::zeros(&[0]),
        }
    }

    pub fn softplus() -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Softplus,
            in_dim: 0,
            out_dim: 0,
            weights: Tensor::zeros(&[0]),
            biases: Tensor::zeros(&[0]),
        }
    }

    pub fn concat_condition(width: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::ConcatCondition,
            in_dim: width,
            out_dim: 0,
            weights: Tensor::zeros(&[0]),
            biases: Tensor::zeros(&[0]),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Linear | LayerKind::Conv3x3)
    }
}

/// Activation record from a forward pass; holds the input to every
/// layer, which is sufficient for every layer kind's backward.
#[derive(Debug)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    n_layers: usize,
}

pub struct BackwardResult {
    /// One `(grad_weights, grad_biases)` per layer; `None` for layers
    /// without parameters.
    pub grad_params: Vec<Option<(Tensor, Tensor)>>,
    pub grad_input: Tensor,
    /// Sum of gradients flowing into the condition vector across all
    /// `ConcatCondition` layers, if any exist.
    pub grad_condition: Option<Tensor>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus_val(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn layer_err(layer: usize, expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::LayerShape {
        layer,
        expected: expected.into(),
        got: got.into(),
    }
}

/// Runs the stack on `input`. `condition` must be given iff the net
/// contains `ConcatCondition` layers, with length equal to each one's
/// declared width.
pub fn forward(
    net: &[LayerSpec],
    input: &Tensor,
    condition: Option<&Tensor>,
) -> Result<(Tensor, ForwardCache)> {
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(net.len()),
        n_layers: net.len(),
    };
    let mut act = input.clone();
    for (idx, layer) in net.iter().enumerate() {
        cache.inputs.push(act.clone());
        act = apply_layer(idx, layer, &act, condition)?;
    }
    Ok((act, cache))
}

fn apply_layer(
    idx: usize,
    layer: &LayerSpec,
    act: &Tensor,
    condition: Option<&Tensor>,
) -> Result<Tensor> {
    match layer.kind {
        LayerKind::Linear => {
            if act.len() != layer.in_dim {
                return Err(layer_err(
                    idx,
                    format!("{} inputs", layer.in_dim),
                    format!("{} (shape {:?})", act.len(), act.shape()),
                ));
            }
            let x = act.data();
            let w = layer.weights.data();
            let b = layer.biases.data();
            let n_in = layer.in_dim;
            let mut out = vec![0.0; layer.out_dim];
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (wv, xv) in row.iter().zip(x) {
                    acc += wv * xv;
                }
                *out_v = acc;
            }
            Ok(Tensor::from_vec_unchecked(&[layer.out_dim], out))
        }
        LayerKind::Conv3x3 => {
            let (c, h, w_dim) = conv_input_dims(idx, layer, act)?;
            let mut out = vec![0.0; layer.out_dim * h * w_dim];
            conv3x3_forward(
                layer.weights.data(),
                layer.biases.data(),
                c,
                layer.out_dim,
                h,
                w_dim,
                act.data(),
                &mut out,
            );
            Ok(Tensor::from_vec_unchecked(&[layer.out_dim, h, w_dim], out))
        }
        LayerKind::SiLU => {
            let data = act.data().iter().map(|&x| x * sigmoid(x)).collect();
            Ok(Tensor::from_vec_unchecked(act.shape(), data))
        }
        LayerKind::Softplus => {
            let data = act.data().iter().map(|&x| softplus_val(x)).collect();
            Ok(Tensor::from_vec_unchecked(act.shape(), data))
        }
        LayerKind::ConcatCondition => {
            let cond = condition.ok_or_else(|| {
                layer_err(idx, format!("condition of width {}", layer.in_dim), "no condition")
            })?;
            if cond.len() != layer.in_dim {
                return Err(layer_err(
                    idx,
                    format!("condition of width {}", layer.in_dim),
                    format!("width {}", cond.len()),
                ));
            }
            if act.shape().len() == 3 {
                let (c, h, w_dim) = (act.shape()[0], act.shape()[1], act.shape()[2]);
                let plane = h * w_dim;
                let mut out = Vec::with_capacity((c + cond.len()) * plane);
                out.extend_from_slice(act.data());
                for &cv in cond.data() {
                    out.extend(std::iter::repeat(cv).take(plane));
                }
                Ok(Tensor::from_vec_unchecked(&[c + cond.len(), h, w_dim], out))
            } else {
                let mut out = Vec::with_capacity(act.len() + cond.len());
                out.extend_from_slice(act.data());
                out.extend_from_slice(cond.data());
                Ok(Tensor::from_vec_unchecked(&[act.len() + cond.len()], out))
            }
        }
    }
}

fn conv_input_dims(idx: usize, layer: &LayerSpec, act: &Tensor) -> Result<(usize, usize, usize)> {
    if act.shape().len() != 3 || act.shape()[0] != layer.in_dim {
        return Err(layer_err(
            idx,
            format!("[{}, H, W] input", layer.in_dim),
            format!("{:?}", act.shape()),
        ));
    }
    Ok((act.shape()[0], act.shape()[1], act.shape()[2]))
}

/// Copies `planes` into a buffer with a one-pixel zero border around
/// each plane, so the 3x3 stencil needs no edge cases.
fn pad_planes(input: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, wd + 2);
    let mut pad = vec![0.0; c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            let src = &input[(ci * h + y) * wd..(ci * h + y + 1) * wd];
            let dst = &mut pad[(ci * ph + y + 1) * pw + 1..(ci * ph + y + 1) * pw + 1 + wd];
            dst.copy_from_slice(src);
        }
    }
    pad
}

fn conv3x3_forward(
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    input: &[f64],
    out: &mut [f64],
) {
    let plane = h * wd;
    let pw = wd + 2;
    let pad = pad_planes(input, cin, h, wd);
    for co in 0..cout {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let w9 = &w[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            let in_pad = &pad[ci * (h + 2) * pw..(ci + 1) * (h + 2) * pw];
            for y in 0..h {
                let r0 = &in_pad[y * pw..y * pw + wd + 2];
                let r1 = &in_pad[(y + 1) * pw..(y + 1) * pw + wd + 2];
                let r2 = &in_pad[(y + 2) * pw..(y + 2) * pw + wd + 2];
                let orow = &mut out_plane[y * wd..(y + 1) * wd];
                for (x, o) in orow.iter_mut().enumerate() {
                    *o += w9[0] * r0[x]
                        + w9[1] * r0[x + 1]
                        + w9[2] * r0[x + 2]
                        + w9[3] * r1[x]
                        + w9[4] * r1[x + 1]
                        + w9[5] * r1[x + 2]
                        + w9[6] * r2[x]
                        + w9[7] * r2[x + 1]
                        + w9[8] * r2[x + 2];
                }
            }
        }
    }
}

/// Backward through the stack; allocates fresh parameter gradients.
pub fn backward(net: &[LayerSpec], cache: &ForwardCache, grad_output: &Tensor) -> Result<BackwardResult> {
    let mut grads = zero_like_params(net);
    let (grad_input, grad_condition) = backward_into(net, cache, grad_output, &mut grads)?;
    let mut grad_params = Vec::with_capacity(net.len());
    let mut slot = 0;
    for layer in net {
        if layer.has_params() {
            let gb = grads.pop_at(slot + 1);
            let gw = grads.pop_at(slot);
            grad_params.push(Some((gw, gb)));
            slot += 2;
        } else {
            grad_params.push(None);
        }
    }
    Ok(BackwardResult {
        grad_params,
        grad_input,
        grad_condition,
    })
}

/// Gradient tensors aligned with [`param_tensors`] order: for each
/// parameterized layer, weights then biases.
pub struct ParamGrads(Vec<Tensor>);

impl ParamGrads {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.0
    }

    pub fn add(&mut self, other: &ParamGrads) {
        assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.scale(s);
        }
    }

    fn pop_at(&mut self, idx: usize) -> Tensor {
        std::mem::replace(&mut self.0[idx], Tensor::zeros(&[0]))
    }
}

pub fn param_tensors(net: &[LayerSpec]) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for layer in net {
        if layer.has_params() {
            out.push(&layer.weights);
            out.push(&layer.biases);
        }
    }
    out
}

pub fn param_tensors_mut(net: &mut [LayerSpec]) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for layer in net {
        if layer.has_params() {
            out.push(&mut layer.weights);
            out.push(&mut layer.biases);
        }
    }
    out
}

pub fn zero_like_params(net: &[LayerSpec]) -> ParamGrads {
    ParamGrads(
        param_tensors(net)
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect(),
    )
}

/// Backward that accumulates parameter gradients into `grads`
/// (aligned with [`param_tensors`] order). Returns the input gradient
/// and, if the net has condition layers, the condition gradient.
pub fn backward_into(
    net: &[LayerSpec],
    cache: &ForwardCache,
    grad_output: &Tensor,
    grads: &mut ParamGrads,
) -> Result<(Tensor, Option<Tensor>)> {
    if cache.n_layers != net.len() || cache.inputs.len() != net.len() {
        return Err(Error::invalid(format!(
            "stale cache: {} cached layers for a {}-layer net",
            cache.inputs.len(),
            net.len()
        )));
    }
    let n_param_tensors: usize = net.iter().filter(|l| l.has_params()).count() * 2;
    if grads.0.len() != n_param_tensors {
        return Err(Error::invalid("gradient buffer does not match net"));
    }

    let mut slot = n_param_tensors;
    let mut grad = grad_output.clone();
    let mut grad_condition: Option<Tensor> = None;

    for (idx, layer) in net.iter().enumerate().rev() {
        let input = &cache.inputs[idx];
        if layer.has_params() {
            slot -= 2;
        }
        match layer.kind {
            LayerKind::Linear => {
                if grad.len() != layer.out_dim || input.len() != layer.in_dim {
                    return Err(layer_err(
                        idx,
                        format!("grad [{}], input [{}]", layer.out_dim, layer.in_dim),
                        format!("grad {:?}, input {:?}", grad.shape(), input.shape()),
                    ));
                }
                let n_in = layer.in_dim;
                let x = input.data();
                let go = grad.data();
                let w = layer.weights.data();
                let mut gx = vec![0.0; n_in];
                {
                    let (gw_t, gb_t) = grads.0.split_at_mut(slot + 1);
                    let gw = gw_t[slot].data_mut();
                    let gb = gb_t[0].data_mut();
                    for (o, &g) in go.iter().enumerate() {
                        gb[o] += g;
                        let wrow = &w[o * n_in..(o + 1) * n_in];
                        let gwrow = &mut gw[o * n_in..(o + 1) * n_in];
                        for i in 0..n_in {
                            gwrow[i] += g * x[i];
                            gx[i] += g * wrow[i];
                        }
                    }
                }
                grad = Tensor::from_vec_unchecked(input.shape(), gx);
            }
            LayerKind::Conv3x3 => {
                let (c, h, wd) = conv_input_dims(idx, layer, input)?;
                if grad.shape() != [layer.out_dim, h, wd] {
                    return Err(layer_err(
                        idx,
                        format!("grad [{}, {h}, {wd}]", layer.out_dim),
                        format!("{:?}", grad.shape()),
                    ));
                }
                let mut gin = vec![0.0; c * h * wd];
                {
                    let (gw_t, gb_t) = grads.0.split_at_mut(slot + 1);
                    conv3x3_backward(
                        layer.weights.data(),
                        c,
                        layer.out_dim,
                        h,
                        wd,
                        input.data(),
                        grad.data(),
                        &mut gin,
                        gw_t[slot].data_mut(),
                        gb_t[0].data_mut(),
                    );
                }
                grad = Tensor::from_vec_unchecked(&[c, h, wd], gin);
            }
            LayerKind::SiLU => {
                let mut g = grad.into_data();
                for (gv, &x) in g.iter_mut().zip(input.data()) {
                    let s = sigmoid(x);
                    *gv *= s * (1.0 + x * (1.0 - s));
                }
                grad = Tensor::from_vec_unchecked(input.shape(), g);
            }
            LayerKind::Softplus => {
                let mut g = grad.into_data();
                for (gv, &x) in g.iter_mut().zip(input.data()) {
                    *gv *= sigmoid(x);
                }
                grad = Tensor::from_vec_unchecked(input.shape(), g);
            }
            LayerKind::ConcatCondition => {
                let k = layer.in_dim;
                let gcond = grad_condition
                    .get_or_insert_with(|| Tensor::zeros(&[k]));
                if input.shape().len() == 3 {
                    let (c, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                    let plane = h * wd;
                    let g = grad.data();
                    for (ch, gc) in gcond.data_mut().iter_mut().enumerate() {
                        let start = (c + ch) * plane;
                        *gc += g[start..start + plane].iter().sum::<f64>();
                    }
                    grad = Tensor::from_vec_unchecked(&[c, h, wd], g[..c * plane].to_vec());
                } else {
                    let n = input.len();
                    let g = grad.data();
                    for (gc, &gv) in gcond.data_mut().iter_mut().zip(&g[n..]) {
                        *gc += gv;
                    }
                    grad = Tensor::from_vec_unchecked(&[n], g[..n].to_vec());
                }
            }
        }
    }
    Ok((grad, grad_condition))
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    w: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    input: &[f64],
    gout: &[f64],
    gin: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let plane = h * wd;
    let pw = wd + 2;
    let in_pad = pad_planes(input, cin, h, wd);
    let gout_pad = pad_planes(gout, cout, h, wd);
    for co in 0..cout {
        let gout_plane = &gout[co * plane..(co + 1) * plane];
        gb[co] += gout_plane.iter().sum::<f64>();
        let go_pad = &gout_pad[co * (h + 2) * pw..(co + 1) * (h + 2) * pw];
        for ci in 0..cin {
            let wbase = (co * cin + ci) * 9;
            let ip = &in_pad[ci * (h + 2) * pw..(ci + 1) * (h + 2) * pw];
            // Weight gradient: nine shifted dot products.
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let grow = &gout_plane[y * wd..(y + 1) * wd];
                        let irow = &ip[(y + ky) * pw + kx..(y + ky) * pw + kx + wd];
                        for (g, i) in grow.iter().zip(irow) {
                            acc += g * i;
                        }
                    }
                    gw[wbase + ky * 3 + kx] += acc;
                }
            }
            // Input gradient: stencil over padded gout with the
            // flipped kernel.
            let gin_plane = &mut gin[ci * plane..(ci + 1) * plane];
            let w9 = &w[wbase..wbase + 9];
            for y in 0..h {
                let r0 = &go_pad[y * pw..y * pw + wd + 2];
                let r1 = &go_pad[(y + 1) * pw..(y + 1) * pw + wd + 2];
                let r2 = &go_pad[(y + 2) * pw..(y + 2) * pw + wd + 2];
                let grow = &mut gin_plane[y * wd..(y + 1) * wd];
                for (x, g) in grow.iter_mut().enumerate() {
                    *g += w9[8] * r0[x]
                        + w9[7] * r0[x + 1]
                        + w9[6] * r0[x + 2]
                        + w9[5] * r1[x]
                        + w9[4] * r1[x + 1]
                        + w9[3] * r1[x + 2]
                        + w9[2] * r2[x]
                        + w9[1] * r2[x + 1]
                        + w9[0] * r2[x + 2];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar loss used by the finite-difference checks: a fixed random
    /// projection of the net output.
    fn proj_loss(net: &[LayerSpec], input: &Tensor, cond: Option<&Tensor>, proj: &Tensor) -> f64 {
        let (out, _) = forward(net, input, cond).unwrap();
        out.dot(proj)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central-difference oracle over every parameter, the input, and
    /// the condition of a stack.
    fn check_gradients(net: &mut Vec<LayerSpec>, input: &Tensor, cond: Option<&Tensor>, seed: u64, tol: f64) {
        let mut rng = Rng::new(seed ^ 0xABCD);
        let (out, cache) = forward(net, input, cond).unwrap();
        let proj = rng.normal_tensor(out.shape());
        let res = backward(net, &cache, &proj).unwrap();

        let h = 1e-5;
        // Parameters.
        for (li, gp) in res.grad_params.iter().enumerate() {
            let Some((gw, gb)) = gp else { continue };
            for (tensor_idx, g) in [(0, gw), (1, gb)] {
                for e in 0..g.len() {
                    let orig = {
                        let t = if tensor_idx == 0 { &mut net[li].weights } else { &mut net[li].biases };
                        let v = t.data()[e];
                        t.data_mut()[e] = v + h;
                        v
                    };
                    let up = proj_loss(net, input, cond, &proj);
                    {
                        let t = if tensor_idx == 0 { &mut net[li].weights } else { &mut net[li].biases };
                        t.data_mut()[e] = orig - h;
                    }
                    let dn = proj_loss(net, input, cond, &proj);
                    {
                        let t = if tensor_idx == 0 { &mut net[li].weights } else { &mut net[li].biases };
                        t.data_mut()[e] = orig;
                    }
                    let fd = (up - dn) / (2.0 * h);
                    let an = g.data()[e];
                    if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                        assert!(
                            rel_err(fd, an) < tol,
                            "layer {li} tensor {tensor_idx} elem {e}: fd {fd} vs analytic {an}"
                        );
                    }
                }
            }
        }
        // Input.
        let mut input = input.clone();
        for e in 0..input.len() {
            let v = input.data()[e];
            input.data_mut()[e] = v + h;
            let up = proj_loss(net, &input, cond, &proj);
            input.data_mut()[e] = v - h;
            let dn = proj_loss(net, &input, cond, &proj);
            input.data_mut()[e] = v;
            let fd = (up - dn) / (2.0 * h);
            let an = res.grad_input.data()[e];
            if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                assert!(rel_err(fd, an) < tol, "input elem {e}: fd {fd} vs analytic {an}");
            }
        }
        // Condition.
        if let Some(cond) = cond {
            let gcond = res.grad_condition.expect("net has condition layers");
            let mut cond = cond.clone();
            for e in 0..cond.len() {
                let v = cond.data()[e];
                cond.data_mut()[e] = v + h;
                let up = proj_loss(net, &input, Some(&cond), &proj);
                cond.data_mut()[e] = v - h;
                let dn = proj_loss(net, &input, Some(&cond), &proj);
                cond.data_mut()[e] = v;
                let fd = (up - dn) / (2.0 * h);
                let an = gcond.data()[e];
                if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                    assert!(rel_err(fd, an) < tol, "cond elem {e}: fd {fd} vs analytic {an}");
                }
            }
        }
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let net = vec![LayerSpec::linear_from(2, 2, w, b).unwrap()];
        let input = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let (out, _) = forward(&net, &input, None).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn softplus_of_zero_is_ln_two() {
        // softplus(0) = ln(1 + e^0) = ln 2.
        let net = vec![LayerSpec::softplus()];
        let input = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let (out, _) = forward(&net, &input, None).unwrap();
        assert!((out.data()[0] - 2.0f64.ln()).abs() < 1e-15);
        assert!((out.data()[0] - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn hand_checked_linear() {
        // W=[[2,0],[0,3]], b=[1,1], x=[1,1] -> [3,4]
        let w = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let net = vec![LayerSpec::linear_from(2, 2, w, b).unwrap()];
        let input = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let (out, _) = forward(&net, &input, None).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn silu_of_zero_is_zero_and_softplus_positive() {
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(&[64]);
        let (sp, _) = forward(&[LayerSpec::softplus()], &x, None).unwrap();
        assert!(sp.data().iter().all(|&v| v > 0.0));
        let zero = Tensor::zeros(&[3]);
        let (si, _) = forward(&[LayerSpec::silu()], &zero, None).unwrap();
        assert!(si.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = Rng::new(2);
        let net = vec![LayerSpec::linear(4, 2, &mut rng), LayerSpec::linear(3, 1, &mut rng)];
        let input = Tensor::zeros(&[4]);
        let err = forward(&net, &input, None).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let mut rng = Rng::new(3);
        let net = vec![LayerSpec::linear(4, 3, &mut rng)];
        let input = rng.normal_tensor(&[4]);
        let (out, cache) = forward(&net, &input, None).unwrap();
        let res = backward(&net, &cache, &Tensor::zeros(out.shape())).unwrap();
        let (gw, gb) = res.grad_params[0].as_ref().unwrap();
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
        assert!(res.grad_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_backward_passes_grad_through() {
        let w = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let net = vec![LayerSpec::linear_from(3, 3, w, Tensor::zeros(&[3])).unwrap()];
        let input = Tensor::from_vec(&[3], vec![0.5, -0.5, 2.0]).unwrap();
        let (_, cache) = forward(&net, &input, None).unwrap();
        let g = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let res = backward(&net, &cache, &g).unwrap();
        assert_eq!(res.grad_input.data(), g.data());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(4);
        let net = vec![LayerSpec::linear(4, 3, &mut rng)];
        let other = vec![LayerSpec::linear(4, 3, &mut rng), LayerSpec::silu()];
        let input = rng.normal_tensor(&[4]);
        let (out, cache) = forward(&net, &input, None).unwrap();
        assert!(backward(&other, &cache, &out).is_err());
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = Rng::new(100 + seed);
            let mut net = vec![
                LayerSpec::linear(4, 5, &mut rng),
                LayerSpec::silu(),
                LayerSpec::linear(5, 3, &mut rng),
            ];
            let input = rng.normal_tensor(&[4]);
            check_gradients(&mut net, &input, None, seed, 1e-4);
        }
    }

    #[test]
    fn every_layer_kind_matches_finite_differences() {
        // 20 seeds across a stack exercising conv, silu, softplus,
        // concat-condition (spatial), and linear (with implicit
        // flatten), plus a flat concat variant.
        for seed in 0..20u64 {
            let mut rng = Rng::new(1000 + seed);
            let mut net = vec![
                LayerSpec::conv3x3(2, 3, &mut rng),
                LayerSpec::silu(),
                LayerSpec::concat_condition(2),
                LayerSpec::conv3x3(5, 2, &mut rng),
                LayerSpec::softplus(),
                LayerSpec::linear(2 * 4 * 4, 3, &mut rng),
            ];
            let input = rng.normal_tensor(&[2, 4, 4]);
            let cond = rng.normal_tensor(&[2]);
            check_gradients(&mut net, &input, Some(&cond), seed, 1e-4);

            let mut flat_net = vec![
                LayerSpec::linear(3, 4, &mut rng),
                LayerSpec::concat_condition(2),
                LayerSpec::silu(),
                LayerSpec::linear(6, 2, &mut rng),
            ];
            let flat_in = rng.normal_tensor(&[3]);
            check_gradients(&mut flat_net, &flat_in, Some(&cond), seed, 1e-4);
        }
    }

    #[test]
    fn conv_preserves_spatial_dims() {
        let mut rng = Rng::new(8);
        let net = vec![LayerSpec::conv3x3(3, 7, &mut rng)];
        let input = rng.normal_tensor(&[3, 5, 6]);
        let (out, _) = forward(&net, &input, None).unwrap();
        assert_eq!(out.shape(), &[7, 5, 6]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(11);
        let net = vec![LayerSpec::conv3x3(2, 2, &mut rng), LayerSpec::silu()];
        let input = rng.normal_tensor(&[2, 6, 6]);
        let (a, _) = forward(&net, &input, None).unwrap();
        let (b, _) = forward(&net, &input, None).unwrap();
        assert_eq!(a, b);
    }
}
