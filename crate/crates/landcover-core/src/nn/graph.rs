//! Static compute graph over (N, C, H, W) feature maps.
//!
//! Builders append nodes in topological order, so forward evaluation is a
//! single pass over the node list and backward a single reverse pass.
//! Vector-shaped activations (after global pooling / flatten) travel as
//! (N, C, 1, 1), which keeps every edge the same tensor type.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Feat = Array4<f32>;
pub type NodeId = usize;
pub type ParamId = usize;
pub type BufId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: Option<ArrayD<f32>>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Buffer {
    pub name: String,
    pub value: ArrayD<f32>,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv2d {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        padding: (usize, usize),
        groups: usize,
    },
    BatchNorm2d {
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufId,
        running_var: BufId,
        eps: f32,
        momentum: f32,
    },
    Relu,
    Hardswish,
    Hardsigmoid,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
        count_include_pad: bool,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    Add,
    Concat,
    MulBroadcast,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

/// Per-node caches captured during a traced forward pass.
enum Aux {
    None,
    MaxPoolArg(Array4<u32>),
    BnStats { mean: Array1<f32>, var: Array1<f32> },
}

/// Activations and op caches from one traced (training-mode) forward pass.
pub struct Trace {
    activations: Vec<Feat>,
    aux: Vec<Aux>,
}

pub struct Graph {
    nodes: Vec<Node>,
    pub(crate) params: Vec<Param>,
    pub(crate) buffers: Vec<Buffer>,
    output: NodeId,
    head_params: Vec<ParamId>,
}

impl Graph {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameter ids belonging to the classifier head (set by the builder).
    pub fn head_params(&self) -> &[ParamId] {
        &self.head_params
    }

    /// Marks every non-head parameter as frozen (or unfreezes everything).
    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        for (id, param) in self.params.iter_mut().enumerate() {
            param.trainable = !frozen || self.head_params.contains(&id);
        }
    }

    pub fn zero_grads(&mut self) {
        for param in &mut self.params {
            param.grad = None;
        }
    }

    /// Evaluation-mode forward pass: batch-norm uses running statistics and
    /// nothing is mutated. Activations are dropped as soon as their last
    /// consumer has run, which keeps the deep backbones within a modest
    /// memory envelope.
    pub fn forward_eval(&self, input: &Feat) -> Feat {
        let mut last_use = vec![0usize; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = id;
            }
        }
        last_use[self.output] = usize::MAX;

        let mut acts: Vec<Option<Feat>> = vec![None; self.nodes.len()];
        for id in 0..self.nodes.len() {
            let (out, _) = self.eval_node(id, input, &acts, Mode::Eval, None);
            acts[id] = Some(out);
            for &i in &self.nodes[id].inputs {
                if last_use[i] == id {
                    acts[i] = None;
                }
            }
        }
        acts[self.output].take().expect("output node evaluated")
    }

    /// Training-mode forward pass: batch-norm normalizes with batch
    /// statistics and updates its running estimates; all activations are
    /// kept for [`Graph::backward`].
    pub fn forward_train(&mut self, input: &Feat) -> (Feat, Trace) {
        let mut acts: Vec<Option<Feat>> = vec![None; self.nodes.len()];
        let mut aux = Vec::with_capacity(self.nodes.len());
        let mut updates: Vec<(BufId, Array1<f32>, BufId, Array1<f32>)> = Vec::new();
        for id in 0..self.nodes.len() {
            let (out, node_aux) = self.eval_node(id, input, &acts, Mode::Train, Some(&mut updates));
            acts[id] = Some(out);
            aux.push(node_aux);
        }
        for (mean_id, mean, var_id, var) in updates {
            self.buffers[mean_id].value = mean.into_dyn();
            self.buffers[var_id].value = var.into_dyn();
        }
        let activations: Vec<Feat> = acts.into_iter().map(|a| a.expect("evaluated")).collect();
        let output = activations[self.output].clone();
        (output, Trace { activations, aux })
    }

    fn eval_node(
        &self,
        id: NodeId,
        input: &Feat,
        acts: &[Option<Feat>],
        mode: Mode,
        mut bn_updates: Option<&mut Vec<(BufId, Array1<f32>, BufId, Array1<f32>)>>,
    ) -> (Feat, Aux) {
        let node = &self.nodes[id];
        let arg = |i: usize| acts[node.inputs[i]].as_ref().expect("topological order");
        match &node.op {
            Op::Input => (input.clone(), Aux::None),
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding,
                groups,
            } => {
                let out = conv2d_forward(
                    arg(0),
                    &self.params[*weight].value,
                    bias.map(|b| &self.params[b].value),
                    *stride,
                    *padding,
                    *groups,
                );
                (out, Aux::None)
            }
            Op::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            } => {
                let x = arg(0);
                let gamma_v = as1(&self.params[*gamma].value);
                let beta_v = as1(&self.params[*beta].value);
                match mode {
                    Mode::Eval => {
                        let mean = as1(&self.buffers[*running_mean].value);
                        let var = as1(&self.buffers[*running_var].value);
                        (bn_apply(x, &mean, &var, &gamma_v, &beta_v, *eps), Aux::None)
                    }
                    Mode::Train => {
                        let (mean, var) = bn_batch_stats(x);
                        let out = bn_apply(x, &mean, &var, &gamma_v, &beta_v, *eps);
                        if let Some(updates) = bn_updates.as_mut() {
                            let count = (x.len() / x.dim().1) as f32;
                            // Running variance uses the unbiased estimate.
                            let unbiased = if count > 1.0 {
                                var.mapv(|v| v * count / (count - 1.0))
                            } else {
                                var.clone()
                            };
                            let old_mean = as1(&self.buffers[*running_mean].value);
                            let old_var = as1(&self.buffers[*running_var].value);
                            let new_mean = &old_mean * (1.0 - momentum) + &mean * *momentum;
                            let new_var = &old_var * (1.0 - momentum) + &unbiased * *momentum;
                            updates.push((*running_mean, new_mean, *running_var, new_var));
                        }
                        (out, Aux::BnStats { mean, var })
                    }
                }
            }
            Op::Relu => (arg(0).mapv(|v| v.max(0.0)), Aux::None),
            Op::Hardswish => (
                arg(0).mapv(|v| v * ((v + 3.0).clamp(0.0, 6.0)) / 6.0),
                Aux::None,
            ),
            Op::Hardsigmoid => (
                arg(0).mapv(|v| (v / 6.0 + 0.5).clamp(0.0, 1.0)),
                Aux::None,
            ),
            Op::MaxPool2d {
                kernel,
                stride,
                padding,
            } => {
                let (out, argmax) = maxpool_forward(arg(0), *kernel, *stride, *padding);
                (out, Aux::MaxPoolArg(argmax))
            }
            Op::AvgPool2d {
                kernel,
                stride,
                padding,
                count_include_pad,
            } => (
                avgpool_forward(arg(0), *kernel, *stride, *padding, *count_include_pad),
                Aux::None,
            ),
            Op::GlobalAvgPool => {
                let x = arg(0);
                let (n, c, h, w) = x.dim();
                let scale = 1.0 / (h * w) as f32;
                let mut out = Array4::zeros((n, c, 1, 1));
                for ni in 0..n {
                    for ci in 0..c {
                        let mut sum = 0.0f32;
                        for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                            sum += v;
                        }
                        out[(ni, ci, 0, 0)] = sum * scale;
                    }
                }
                (out, Aux::None)
            }
            Op::Flatten => {
                let x = arg(0);
                let (n, c, h, w) = x.dim();
                let flat = x
                    .to_owned()
                    .into_shape_with_order((n, c * h * w, 1, 1))
                    .expect("flatten reshape");
                (flat, Aux::None)
            }
            Op::Dense { weight, bias } => {
                let x = arg(0);
                let (n, k, _, _) = x.dim();
                let w = as2(&self.params[*weight].value); // (out, in)
                let b = as1(&self.params[*bias].value);
                let x2 = x
                    .view()
                    .into_shape_with_order((n, k))
                    .expect("dense input is (N, K, 1, 1)");
                let mut y = x2.dot(&w.t()); // (n, out)
                for mut row in y.rows_mut() {
                    row += &b;
                }
                let out_f = w.nrows();
                (
                    y.into_shape_with_order((n, out_f, 1, 1)).expect("dense reshape"),
                    Aux::None,
                )
            }
            Op::Add => (arg(0) + arg(1), Aux::None),
            Op::Concat => {
                let views: Vec<_> = node
                    .inputs
                    .iter()
                    .map(|&i| acts[i].as_ref().expect("topological order").view())
                    .collect();
                (
                    ndarray::concatenate(Axis(1), &views).expect("channel concat"),
                    Aux::None,
                )
            }
            Op::MulBroadcast => {
                let x = arg(0);
                let s = arg(1); // (N, C, 1, 1)
                let mut out = x.clone();
                let (n, c, _, _) = x.dim();
                for ni in 0..n {
                    for ci in 0..c {
                        let factor = s[(ni, ci, 0, 0)];
                        out.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .mapv_inplace(|v| v * factor);
                    }
                }
                (out, Aux::None)
            }
        }
    }

    /// Reverse pass over a trace; accumulates into each trainable
    /// parameter's `grad`.
    pub fn backward(&mut self, trace: &Trace, grad_output: Feat) {
        let mut grads: Vec<Option<Feat>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(grad_output);

        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = self.nodes[id].clone();
            let x_of = |i: usize| &trace.activations[node.inputs[i]];
            match &node.op {
                Op::Input => {}
                Op::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                    groups,
                } => {
                    let (dx, dw, db) = conv2d_backward(
                        x_of(0),
                        &self.params[*weight].value,
                        &dy,
                        *stride,
                        *padding,
                        *groups,
                    );
                    accumulate_param(&mut self.params[*weight], dw.into_dyn());
                    if let Some(b) = bias {
                        accumulate_param(&mut self.params[*b], db.into_dyn());
                    }
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::BatchNorm2d { gamma, beta, eps, .. } => {
                    let Aux::BnStats { mean, var } = &trace.aux[id] else {
                        panic!("batch-norm trace missing batch statistics")
                    };
                    let gamma_v = as1(&self.params[*gamma].value);
                    let (dx, dgamma, dbeta) =
                        bn_backward(x_of(0), &dy, mean, var, &gamma_v, *eps);
                    accumulate_param(&mut self.params[*gamma], dgamma.into_dyn());
                    accumulate_param(&mut self.params[*beta], dbeta.into_dyn());
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Relu => {
                    let y = &trace.activations[id];
                    let mut dx = dy;
                    dx.zip_mut_with(y, |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Hardswish => {
                    let x = x_of(0);
                    let mut dx = dy;
                    dx.zip_mut_with(x, |g, &v| {
                        let slope = if v <= -3.0 {
                            0.0
                        } else if v >= 3.0 {
                            1.0
                        } else {
                            (2.0 * v + 3.0) / 6.0
                        };
                        *g *= slope;
                    });
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Hardsigmoid => {
                    let x = x_of(0);
                    let mut dx = dy;
                    dx.zip_mut_with(x, |g, &v| {
                        let slope = if v > -3.0 && v < 3.0 { 1.0 / 6.0 } else { 0.0 };
                        *g *= slope;
                    });
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::MaxPool2d { .. } => {
                    let Aux::MaxPoolArg(argmax) = &trace.aux[id] else {
                        panic!("max-pool trace missing argmax")
                    };
                    let x = x_of(0);
                    let (n, c, h, w) = x.dim();
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    let (_, _, ho, wo) = dy.dim();
                    for ni in 0..n {
                        for ci in 0..c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let flat = argmax[(ni, ci, oy, ox)] as usize;
                                    dx[(ni, ci, flat / w, flat % w)] += dy[(ni, ci, oy, ox)];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::AvgPool2d {
                    kernel,
                    stride,
                    padding,
                    count_include_pad,
                } => {
                    let dx = avgpool_backward(
                        x_of(0),
                        &dy,
                        *kernel,
                        *stride,
                        *padding,
                        *count_include_pad,
                    );
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::GlobalAvgPool => {
                    let x = x_of(0);
                    let (n, c, h, w) = x.dim();
                    let scale = 1.0 / (h * w) as f32;
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = dy[(ni, ci, 0, 0)] * scale;
                            dx.index_axis_mut(Axis(0), ni)
                                .index_axis_mut(Axis(0), ci)
                                .fill(g);
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Flatten => {
                    let x = x_of(0);
                    let dx = dy
                        .into_shape_with_order(x.dim())
                        .expect("flatten backward reshape");
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Dense { weight, bias } => {
                    let x = x_of(0);
                    let (n, k, _, _) = x.dim();
                    let out_f = dy.dim().1;
                    let x2 = x.view().into_shape_with_order((n, k)).expect("dense input");
                    let dy2 = dy
                        .view()
                        .into_shape_with_order((n, out_f))
                        .expect("dense grad");
                    let dw = dy2.t().dot(&x2); // (out, in)
                    let db = dy2.sum_axis(Axis(0));
                    let w = as2(&self.params[*weight].value);
                    let dx = dy2
                        .dot(&w)
                        .into_shape_with_order((n, k, 1, 1))
                        .expect("dense dx reshape");
                    accumulate_param(&mut self.params[*weight], dw.into_dyn());
                    accumulate_param(&mut self.params[*bias], db.into_dyn());
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[0]], dy.clone());
                    accumulate(&mut grads[node.inputs[1]], dy);
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &input in &node.inputs {
                        let c = trace.activations[input].dim().1;
                        let slice = dy
                            .slice(ndarray::s![.., offset..offset + c, .., ..])
                            .to_owned();
                        accumulate(&mut grads[input], slice);
                        offset += c;
                    }
                }
                Op::MulBroadcast => {
                    let x = x_of(0);
                    let s = x_of(1);
                    let (n, c, _, _) = x.dim();
                    let mut dx = dy.clone();
                    let mut ds = Array4::<f32>::zeros(s.dim());
                    for ni in 0..n {
                        for ci in 0..c {
                            let factor = s[(ni, ci, 0, 0)];
                            let mut sum = 0.0f32;
                            let x_plane = x.index_axis(Axis(0), ni);
                            let x_plane = x_plane.index_axis(Axis(0), ci);
                            let dy_plane = dy.index_axis(Axis(0), ni);
                            let dy_plane = dy_plane.index_axis(Axis(0), ci);
                            for (&xv, &gv) in x_plane.iter().zip(dy_plane.iter()) {
                                sum += xv * gv;
                            }
                            dx.index_axis_mut(Axis(0), ni)
                                .index_axis_mut(Axis(0), ci)
                                .mapv_inplace(|g| g * factor);
                            ds[(ni, ci, 0, 0)] = sum;
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], dx);
                    accumulate(&mut grads[node.inputs[1]], ds);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Feat>, grad: Feat) {
    match slot {
        Some(existing) => *existing += &grad,
        None => *slot = Some(grad),
    }
}

fn accumulate_param(param: &mut Param, grad: ArrayD<f32>) {
    if !param.trainable {
        return;
    }
    match &mut param.grad {
        Some(existing) => *existing += &grad,
        None => param.grad = Some(grad),
    }
}

fn as1(value: &ArrayD<f32>) -> Array1<f32> {
    value
        .view()
        .into_dimensionality()
        .expect("1-d parameter")
        .to_owned()
}

fn as2(value: &ArrayD<f32>) -> Array2<f32> {
    value
        .view()
        .into_dimensionality()
        .expect("2-d parameter")
        .to_owned()
}

// ── convolution ──────────────────────────────────────────────────────────────

fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &Feat,
    n: usize,
    ch_range: std::ops::Range<usize>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: (usize, usize),
    mut col: ArrayViewMut2<'_, f32>,
) {
    let (_, _, h, w) = x.dim();
    let ho = conv_out_size(h, kh, stride, padding.0);
    let wo = conv_out_size(w, kw, stride, padding.1);
    let mut row = 0;
    for c in ch_range {
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding.0 as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding.1 as isize;
                        let v = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            x[(n, c, iy as usize, ix as usize)]
                        } else {
                            0.0
                        };
                        col[(row, oy * wo + ox)] = v;
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(
    col: ArrayView2<'_, f32>,
    dx: &mut Feat,
    n: usize,
    ch_range: std::ops::Range<usize>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: (usize, usize),
) {
    let (_, _, h, w) = dx.dim();
    let ho = conv_out_size(h, kh, stride, padding.0);
    let wo = conv_out_size(w, kw, stride, padding.1);
    let mut row = 0;
    for c in ch_range {
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding.0 as isize;
                    if iy < 0 || iy as usize >= h {
                        row_skip();
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - padding.1 as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dx[(n, c, iy as usize, ix as usize)] += col[(row, oy * wo + ox)];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    fn row_skip() {}
}

fn conv2d_forward(
    x: &Feat,
    weight: &ArrayD<f32>,
    bias: Option<&ArrayD<f32>>,
    stride: usize,
    padding: (usize, usize),
    groups: usize,
) -> Feat {
    let (n, c_in, h, w) = x.dim();
    let w4 = weight
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("conv weight is 4-d");
    let (c_out, c_in_g, kh, kw) = w4.dim();
    debug_assert_eq!(c_in_g * groups, c_in, "conv input channels");
    let ho = conv_out_size(h, kh, stride, padding.0);
    let wo = conv_out_size(w, kw, stride, padding.1);
    let c_out_g = c_out / groups;
    let mut y = Array4::<f32>::zeros((n, c_out, ho, wo));
    let mut col = Array2::<f32>::zeros((c_in_g * kh * kw, ho * wo));
    for ni in 0..n {
        for g in 0..groups {
            im2col(
                x,
                ni,
                g * c_in_g..(g + 1) * c_in_g,
                kh,
                kw,
                stride,
                padding,
                col.view_mut(),
            );
            let w_mat = w4
                .slice(ndarray::s![g * c_out_g..(g + 1) * c_out_g, .., .., ..])
                .into_shape_with_order((c_out_g, c_in_g * kh * kw))
                .expect("conv weight reshape");
            let out = w_mat.dot(&col); // (c_out_g, ho*wo)
            for (oc, out_row) in out.rows().into_iter().enumerate() {
                let channel = g * c_out_g + oc;
                let bias_v = bias.map_or(0.0, |b| b[channel]);
                let mut dst = y.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), channel);
                for (i, &v) in out_row.iter().enumerate() {
                    dst[(i / wo, i % wo)] = v + bias_v;
                }
            }
        }
    }
    y
}

fn conv2d_backward(
    x: &Feat,
    weight: &ArrayD<f32>,
    dy: &Feat,
    stride: usize,
    padding: (usize, usize),
    groups: usize,
) -> (Feat, Array4<f32>, Array1<f32>) {
    let (n, c_in, h, w) = x.dim();
    let w4 = weight
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("conv weight is 4-d");
    let (c_out, c_in_g, kh, kw) = w4.dim();
    let (_, _, ho, wo) = dy.dim();
    let c_out_g = c_out / groups;

    let mut dx = Array4::<f32>::zeros((n, c_in, h, w));
    let mut dw = Array4::<f32>::zeros((c_out, c_in_g, kh, kw));
    let mut db = Array1::<f32>::zeros(c_out);
    let mut col = Array2::<f32>::zeros((c_in_g * kh * kw, ho * wo));

    for ni in 0..n {
        for g in 0..groups {
            im2col(
                x,
                ni,
                g * c_in_g..(g + 1) * c_in_g,
                kh,
                kw,
                stride,
                padding,
                col.view_mut(),
            );
            // Gather dy for this group as (c_out_g, ho*wo).
            let mut dy_mat = Array2::<f32>::zeros((c_out_g, ho * wo));
            for oc in 0..c_out_g {
                let channel = g * c_out_g + oc;
                let plane = dy.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), channel);
                for (i, &v) in plane.iter().enumerate() {
                    dy_mat[(oc, i)] = v;
                }
                db[channel] += plane.sum();
            }
            let dw_mat = dy_mat.dot(&col.t()); // (c_out_g, c_in_g*kh*kw)
            let mut dw_slice = dw.slice_mut(ndarray::s![g * c_out_g..(g + 1) * c_out_g, .., .., ..]);
            let dw_view = dw_mat
                .into_shape_with_order((c_out_g, c_in_g, kh, kw))
                .expect("dw reshape");
            dw_slice += &dw_view;

            let w_mat = w4
                .slice(ndarray::s![g * c_out_g..(g + 1) * c_out_g, .., .., ..])
                .into_shape_with_order((c_out_g, c_in_g * kh * kw))
                .expect("conv weight reshape");
            let dcol = w_mat.t().dot(&dy_mat); // (c_in_g*kh*kw, ho*wo)
            col2im(
                dcol.view(),
                &mut dx,
                ni,
                g * c_in_g..(g + 1) * c_in_g,
                kh,
                kw,
                stride,
                padding,
            );
        }
    }
    (dx, dw, db)
}

// ── batch norm ───────────────────────────────────────────────────────────────

fn bn_batch_stats(x: &Feat) -> (Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = x.dim();
    let count = (n * h * w) as f32;
    let mut mean = Array1::<f32>::zeros(c);
    let mut var = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let plane = x.index_axis(Axis(0), ni);
            for v in plane.index_axis(Axis(0), ci).iter() {
                sum += *v as f64;
            }
        }
        mean[ci] = (sum / count as f64) as f32;
        let m = mean[ci] as f64;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let plane = x.index_axis(Axis(0), ni);
            for v in plane.index_axis(Axis(0), ci).iter() {
                let d = *v as f64 - m;
                sq += d * d;
            }
        }
        var[ci] = (sq / count as f64) as f32;
    }
    (mean, var)
}

fn bn_apply(
    x: &Feat,
    mean: &Array1<f32>,
    var: &Array1<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
    eps: f32,
) -> Feat {
    let (n, c, _, _) = x.dim();
    let mut y = x.clone();
    for ci in 0..c {
        let scale = gamma[ci] / (var[ci] + eps).sqrt();
        let shift = beta[ci] - mean[ci] * scale;
        for ni in 0..n {
            y.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .mapv_inplace(|v| v * scale + shift);
        }
    }
    y
}

fn bn_backward(
    x: &Feat,
    dy: &Feat,
    mean: &Array1<f32>,
    var: &Array1<f32>,
    gamma: &Array1<f32>,
    eps: f32,
) -> (Feat, Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = x.dim();
    let count = (n * h * w) as f32;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + eps).sqrt();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let gp = dy.index_axis(Axis(0), ni);
            let gp = gp.index_axis(Axis(0), ci);
            for (&xv, &gv) in xp.iter().zip(gp.iter()) {
                let xhat = (xv - mean[ci]) * inv_std;
                sum_dy += gv as f64;
                sum_dy_xhat += (gv * xhat) as f64;
            }
        }
        dbeta[ci] = sum_dy as f32;
        dgamma[ci] = sum_dy_xhat as f32;
        let mean_dy = sum_dy as f32 / count;
        let mean_dy_xhat = sum_dy_xhat as f32 / count;
        let g = gamma[ci] * inv_std;
        for ni in 0..n {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci).to_owned();
            let gp = dy.index_axis(Axis(0), ni);
            let gp = gp.index_axis(Axis(0), ci).to_owned();
            let mut dst = dx.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for ((d, &xv), &gv) in dst.iter_mut().zip(xp.iter()).zip(gp.iter()) {
                let xhat = (xv - mean[ci]) * inv_std;
                *d = g * (gv - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ── pooling ──────────────────────────────────────────────────────────────────

fn maxpool_forward(x: &Feat, kernel: usize, stride: usize, padding: usize) -> (Feat, Array4<u32>) {
    let (n, c, h, w) = x.dim();
    let ho = conv_out_size(h, kernel, stride, padding);
    let wo = conv_out_size(w, kernel, stride, padding);
    let mut y = Array4::<f32>::zeros((n, c, ho, wo));
    let mut argmax = Array4::<u32>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let v = x[(ni, ci, iy as usize, ix as usize)];
                            if v > best {
                                best = v;
                                best_idx = (iy as usize * w + ix as usize) as u32;
                            }
                        }
                    }
                    y[(ni, ci, oy, ox)] = best;
                    argmax[(ni, ci, oy, ox)] = best_idx;
                }
            }
        }
    }
    (y, argmax)
}

fn avgpool_forward(
    x: &Feat,
    kernel: usize,
    stride: usize,
    padding: usize,
    count_include_pad: bool,
) -> Feat {
    let (n, c, h, w) = x.dim();
    let ho = conv_out_size(h, kernel, stride, padding);
    let wo = conv_out_size(w, kernel, stride, padding);
    let mut y = Array4::<f32>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut sum = 0.0f32;
                    let mut valid = 0usize;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                sum += x[(ni, ci, iy as usize, ix as usize)];
                                valid += 1;
                            }
                        }
                    }
                    let denom = if count_include_pad {
                        kernel * kernel
                    } else {
                        valid.max(1)
                    };
                    y[(ni, ci, oy, ox)] = sum / denom as f32;
                }
            }
        }
    }
    y
}

fn avgpool_backward(
    x: &Feat,
    dy: &Feat,
    kernel: usize,
    stride: usize,
    padding: usize,
    count_include_pad: bool,
) -> Feat {
    let (n, c, h, w) = x.dim();
    let (_, _, ho, wo) = dy.dim();
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut valid = 0usize;
                    if !count_include_pad {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    valid += 1;
                                }
                            }
                        }
                    }
                    let denom = if count_include_pad {
                        kernel * kernel
                    } else {
                        valid.max(1)
                    };
                    let g = dy[(ni, ci, oy, ox)] / denom as f32;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dx[(ni, ci, iy as usize, ix as usize)] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

// ── builder ──────────────────────────────────────────────────────────────────

/// Appends nodes in topological order and owns weight initialization.
/// Convolution weights use He-normal fan-out draws, dense layers He-normal
/// fan-in, batch-norm starts at identity; all draws come from one seeded
/// ChaCha stream so a seed fully determines the initial weights.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    head_params: Vec<ParamId>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            buffers: Vec::new(),
            head_params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        for &input in &inputs {
            assert!(input < self.nodes.len(), "inputs must precede the node");
        }
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    fn normal_param(&mut self, name: String, shape: &[usize], std: f32) -> ParamId {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let data: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        self.params.push(Param {
            name,
            value: ArrayD::from_shape_vec(IxDyn(shape), data).expect("param shape"),
            grad: None,
            trainable: true,
        });
        self.params.len() - 1
    }

    fn const_param(&mut self, name: String, shape: &[usize], fill: f32) -> ParamId {
        self.params.push(Param {
            name,
            value: ArrayD::from_elem(IxDyn(shape), fill),
            grad: None,
            trainable: true,
        });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: &[usize], fill: f32) -> BufId {
        self.buffers.push(Buffer {
            name,
            value: ArrayD::from_elem(IxDyn(shape), fill),
        });
        self.buffers.len() - 1
    }

    pub fn input(&mut self) -> NodeId {
        self.push(Op::Input, vec![])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: NodeId,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> NodeId {
        assert_eq!(in_ch % groups, 0);
        assert_eq!(out_ch % groups, 0);
        let fan_out = out_ch / groups * kernel.0 * kernel.1;
        let std = (2.0 / fan_out as f32).sqrt();
        let weight = self.normal_param(
            format!("{name}.weight"),
            &[out_ch, in_ch / groups, kernel.0, kernel.1],
            std,
        );
        let bias = bias.then(|| self.const_param(format!("{name}.bias"), &[out_ch], 0.0));
        self.push(
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding,
                groups,
            },
            vec![x],
        )
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        name: &str,
        channels: usize,
        eps: f32,
        momentum: f32,
    ) -> NodeId {
        let gamma = self.const_param(format!("{name}.gamma"), &[channels], 1.0);
        let beta = self.const_param(format!("{name}.beta"), &[channels], 0.0);
        let running_mean = self.buffer(format!("{name}.running_mean"), &[channels], 0.0);
        let running_var = self.buffer(format!("{name}.running_var"), &[channels], 1.0);
        self.push(
            Op::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            },
            vec![x],
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn hardswish(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Hardswish, vec![x])
    }

    pub fn hardsigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Hardsigmoid, vec![x])
    }

    pub fn max_pool(&mut self, x: NodeId, kernel: usize, stride: usize, padding: usize) -> NodeId {
        self.push(
            Op::MaxPool2d {
                kernel,
                stride,
                padding,
            },
            vec![x],
        )
    }

    pub fn avg_pool(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        padding: usize,
        count_include_pad: bool,
    ) -> NodeId {
        self.push(
            Op::AvgPool2d {
                kernel,
                stride,
                padding,
                count_include_pad,
            },
            vec![x],
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool, vec![x])
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten, vec![x])
    }

    pub fn dense(&mut self, x: NodeId, name: &str, in_f: usize, out_f: usize) -> NodeId {
        let std = (2.0 / in_f as f32).sqrt();
        let weight = self.normal_param(format!("{name}.weight"), &[out_f, in_f], std);
        let bias = self.const_param(format!("{name}.bias"), &[out_f], 0.0);
        self.push(Op::Dense { weight, bias }, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Concat, xs.to_vec())
    }

    pub fn mul_broadcast(&mut self, x: NodeId, scale: NodeId) -> NodeId {
        self.push(Op::MulBroadcast, vec![x, scale])
    }

    /// Marks the parameters introduced from `first_param` on as the
    /// classifier head (the part that stays trainable under a frozen
    /// backbone).
    pub fn mark_head(&mut self, first_param: ParamId) {
        self.head_params = (first_param..self.params.len()).collect();
    }

    pub fn next_param_id(&self) -> ParamId {
        self.params.len()
    }

    pub fn finish(self, output: NodeId) -> Graph {
        assert!(output < self.nodes.len());
        Graph {
            nodes: self.nodes,
            params: self.params,
            buffers: self.buffers,
            output,
            head_params: self.head_params,
        }
    }
}
