//! Graph builders for the six profiles.
//!
//! The five standard backbones follow the torchvision layer layouts
//! exactly (channel widths, strides, batch-norm placement), which is what
//! the parameter-count tests at the bottom pin down. Classifier heads are
//! replaced by an L-unit dense layer; probabilities come from a sigmoid
//! applied outside the graph.

use crate::nn::{Graph, GraphBuilder, NodeId};

use super::ProfileName;

pub(super) fn build_graph(name: ProfileName, num_labels: usize, seed: u64) -> Graph {
    match name {
        ProfileName::Resnet50 => build_resnet50(num_labels, seed, 1),
        ProfileName::WideResnet50 => build_resnet50(num_labels, seed, 2),
        ProfileName::InceptionV3 => build_inception_v3(num_labels, seed),
        ProfileName::MobilenetV3 => build_mobilenet_v3_large(num_labels, seed),
        ProfileName::Densenet201 => build_densenet201(num_labels, seed),
        ProfileName::TinyCnn => build_tiny_cnn(num_labels, seed),
    }
}

// ── tiny_cnn ─────────────────────────────────────────────────────────────────

/// Three conv blocks and a pooled head; under 200k parameters at L = 17.
fn build_tiny_cnn(num_labels: usize, seed: u64) -> Graph {
    let mut b = GraphBuilder::new(seed);
    let input = b.input();
    let mut x = input;
    let mut in_ch = 3;
    for (i, out_ch) in [16usize, 32, 64].into_iter().enumerate() {
        let name = format!("block{}", i + 1);
        x = b.conv2d(x, &format!("{name}.conv"), in_ch, out_ch, (3, 3), 1, (1, 1), 1, false);
        x = b.batch_norm(x, &format!("{name}.bn"), out_ch, 1e-5, 0.1);
        x = b.relu(x);
        x = b.max_pool(x, 2, 2, 0);
        in_ch = out_ch;
    }
    let pooled = b.global_avg_pool(x);
    let head_start = b.next_param_id();
    let out = b.dense(pooled, "head", 64, num_labels);
    b.mark_head(head_start);
    b.finish(out)
}

// ── ResNet-50 / WideResNet-50 ────────────────────────────────────────────────

struct ResnetCtx {
    eps: f32,
    momentum: f32,
}

fn conv_bn_relu_resnet(
    b: &mut GraphBuilder,
    ctx: &ResnetCtx,
    x: NodeId,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> NodeId {
    let c = b.conv2d(
        x,
        &format!("{name}.conv"),
        in_ch,
        out_ch,
        (kernel, kernel),
        stride,
        (padding, padding),
        1,
        false,
    );
    let n = b.batch_norm(c, &format!("{name}.bn"), out_ch, ctx.eps, ctx.momentum);
    b.relu(n)
}

/// Bottleneck block: 1x1 reduce, 3x3, 1x1 expand (x4), residual add.
#[allow(clippy::too_many_arguments)]
fn bottleneck(
    b: &mut GraphBuilder,
    ctx: &ResnetCtx,
    x: NodeId,
    name: &str,
    in_ch: usize,
    planes: usize,
    stride: usize,
    width_factor: usize,
) -> (NodeId, usize) {
    let width = planes * width_factor;
    let out_ch = planes * 4;
    let c1 = conv_bn_relu_resnet(b, ctx, x, &format!("{name}.c1"), in_ch, width, 1, 1, 0);
    let c2 = conv_bn_relu_resnet(b, ctx, c1, &format!("{name}.c2"), width, width, 3, stride, 1);
    let c3 = b.conv2d(
        c2,
        &format!("{name}.c3.conv"),
        width,
        out_ch,
        (1, 1),
        1,
        (0, 0),
        1,
        false,
    );
    let n3 = b.batch_norm(c3, &format!("{name}.c3.bn"), out_ch, ctx.eps, ctx.momentum);
    let shortcut = if stride != 1 || in_ch != out_ch {
        let d = b.conv2d(
            x,
            &format!("{name}.down.conv"),
            in_ch,
            out_ch,
            (1, 1),
            stride,
            (0, 0),
            1,
            false,
        );
        b.batch_norm(d, &format!("{name}.down.bn"), out_ch, ctx.eps, ctx.momentum)
    } else {
        x
    };
    let sum = b.add(n3, shortcut);
    (b.relu(sum), out_ch)
}

fn build_resnet50(num_labels: usize, seed: u64, width_factor: usize) -> Graph {
    let ctx = ResnetCtx {
        eps: 1e-5,
        momentum: 0.1,
    };
    let mut b = GraphBuilder::new(seed);
    let input = b.input();
    let stem = conv_bn_relu_resnet(&mut b, &ctx, input, "stem", 3, 64, 7, 2, 3);
    let mut x = b.max_pool(stem, 3, 2, 1);
    let mut in_ch = 64;
    let stages: [(usize, usize, usize); 4] =
        [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];
    for (si, (planes, blocks, first_stride)) in stages.into_iter().enumerate() {
        for block in 0..blocks {
            let stride = if block == 0 { first_stride } else { 1 };
            let (y, out_ch) = bottleneck(
                &mut b,
                &ctx,
                x,
                &format!("layer{}.{}", si + 1, block),
                in_ch,
                planes,
                stride,
                width_factor,
            );
            x = y;
            in_ch = out_ch;
        }
    }
    let pooled = b.global_avg_pool(x);
    let head_start = b.next_param_id();
    let out = b.dense(pooled, "head", 2048, num_labels);
    b.mark_head(head_start);
    b.finish(out)
}

// ── DenseNet-201 ─────────────────────────────────────────────────────────────

fn build_densenet201(num_labels: usize, seed: u64) -> Graph {
    const GROWTH: usize = 32;
    const BN_SIZE: usize = 4;
    const BLOCKS: [usize; 4] = [6, 12, 48, 32];
    let (eps, momentum) = (1e-5, 0.1);

    let mut b = GraphBuilder::new(seed);
    let input = b.input();
    let c0 = b.conv2d(input, "stem.conv", 3, 64, (7, 7), 2, (3, 3), 1, false);
    let n0 = b.batch_norm(c0, "stem.bn", 64, eps, momentum);
    let r0 = b.relu(n0);
    let mut x = b.max_pool(r0, 3, 2, 1);
    let mut channels = 64usize;

    for (bi, &layers) in BLOCKS.iter().enumerate() {
        // Features accumulated within the block; each layer consumes the
        // concatenation of all of them.
        let mut features: Vec<(NodeId, usize)> = vec![(x, channels)];
        for li in 0..layers {
            let name = format!("block{}.layer{}", bi + 1, li);
            let in_ch: usize = features.iter().map(|f| f.1).sum();
            let cat = if features.len() == 1 {
                features[0].0
            } else {
                let ids: Vec<NodeId> = features.iter().map(|f| f.0).collect();
                b.concat(&ids)
            };
            let n1 = b.batch_norm(cat, &format!("{name}.bn1"), in_ch, eps, momentum);
            let r1 = b.relu(n1);
            let c1 = b.conv2d(
                r1,
                &format!("{name}.conv1"),
                in_ch,
                BN_SIZE * GROWTH,
                (1, 1),
                1,
                (0, 0),
                1,
                false,
            );
            let n2 = b.batch_norm(c1, &format!("{name}.bn2"), BN_SIZE * GROWTH, eps, momentum);
            let r2 = b.relu(n2);
            let c2 = b.conv2d(
                r2,
                &format!("{name}.conv2"),
                BN_SIZE * GROWTH,
                GROWTH,
                (3, 3),
                1,
                (1, 1),
                1,
                false,
            );
            features.push((c2, GROWTH));
        }
        channels = features.iter().map(|f| f.1).sum();
        let ids: Vec<NodeId> = features.iter().map(|f| f.0).collect();
        x = b.concat(&ids);

        if bi + 1 < BLOCKS.len() {
            let name = format!("trans{}", bi + 1);
            let n = b.batch_norm(x, &format!("{name}.bn"), channels, eps, momentum);
            let r = b.relu(n);
            let c = b.conv2d(
                r,
                &format!("{name}.conv"),
                channels,
                channels / 2,
                (1, 1),
                1,
                (0, 0),
                1,
                false,
            );
            x = b.avg_pool(c, 2, 2, 0, true);
            channels /= 2;
        }
    }

    let n_final = b.batch_norm(x, "final.bn", channels, eps, momentum);
    let r_final = b.relu(n_final);
    let pooled = b.global_avg_pool(r_final);
    let head_start = b.next_param_id();
    let out = b.dense(pooled, "head", channels, num_labels);
    b.mark_head(head_start);
    b.finish(out)
}

// ── MobileNetV3-Large ────────────────────────────────────────────────────────

/// Channel rounding used throughout the MobileNetV3 definition.
fn make_divisible(v: usize, divisor: usize) -> usize {
    let new_v = ((v + divisor / 2) / divisor * divisor).max(divisor);
    if (new_v as f64) < 0.9 * v as f64 {
        new_v + divisor
    } else {
        new_v
    }
}

#[derive(Clone, Copy)]
struct MbRow {
    in_ch: usize,
    kernel: usize,
    expanded: usize,
    out_ch: usize,
    use_se: bool,
    use_hs: bool,
    stride: usize,
}

fn mb_act(b: &mut GraphBuilder, x: NodeId, use_hs: bool) -> NodeId {
    if use_hs {
        b.hardswish(x)
    } else {
        b.relu(x)
    }
}

fn build_mobilenet_v3_large(num_labels: usize, seed: u64) -> Graph {
    const ROWS: [MbRow; 15] = [
        MbRow { in_ch: 16, kernel: 3, expanded: 16, out_ch: 16, use_se: false, use_hs: false, stride: 1 },
        MbRow { in_ch: 16, kernel: 3, expanded: 64, out_ch: 24, use_se: false, use_hs: false, stride: 2 },
        MbRow { in_ch: 24, kernel: 3, expanded: 72, out_ch: 24, use_se: false, use_hs: false, stride: 1 },
        MbRow { in_ch: 24, kernel: 5, expanded: 72, out_ch: 40, use_se: true, use_hs: false, stride: 2 },
        MbRow { in_ch: 40, kernel: 5, expanded: 120, out_ch: 40, use_se: true, use_hs: false, stride: 1 },
        MbRow { in_ch: 40, kernel: 5, expanded: 120, out_ch: 40, use_se: true, use_hs: false, stride: 1 },
        MbRow { in_ch: 40, kernel: 3, expanded: 240, out_ch: 80, use_se: false, use_hs: true, stride: 2 },
        MbRow { in_ch: 80, kernel: 3, expanded: 200, out_ch: 80, use_se: false, use_hs: true, stride: 1 },
        MbRow { in_ch: 80, kernel: 3, expanded: 184, out_ch: 80, use_se: false, use_hs: true, stride: 1 },
        MbRow { in_ch: 80, kernel: 3, expanded: 184, out_ch: 80, use_se: false, use_hs: true, stride: 1 },
        MbRow { in_ch: 80, kernel: 3, expanded: 480, out_ch: 112, use_se: true, use_hs: true, stride: 1 },
        MbRow { in_ch: 112, kernel: 3, expanded: 672, out_ch: 112, use_se: true, use_hs: true, stride: 1 },
        MbRow { in_ch: 112, kernel: 5, expanded: 672, out_ch: 160, use_se: true, use_hs: true, stride: 2 },
        MbRow { in_ch: 160, kernel: 5, expanded: 960, out_ch: 160, use_se: true, use_hs: true, stride: 1 },
        MbRow { in_ch: 160, kernel: 5, expanded: 960, out_ch: 160, use_se: true, use_hs: true, stride: 1 },
    ];
    let (eps, momentum) = (1e-3, 0.01);

    let mut b = GraphBuilder::new(seed);
    let input = b.input();
    let stem_c = b.conv2d(input, "stem.conv", 3, 16, (3, 3), 2, (1, 1), 1, false);
    let stem_n = b.batch_norm(stem_c, "stem.bn", 16, eps, momentum);
    let mut x = b.hardswish(stem_n);

    for (i, row) in ROWS.into_iter().enumerate() {
        let name = format!("ir{i}");
        let block_input = x;
        let mut y = x;
        let mut ch = row.in_ch;
        if row.expanded != row.in_ch {
            let c = b.conv2d(
                y,
                &format!("{name}.expand.conv"),
                ch,
                row.expanded,
                (1, 1),
                1,
                (0, 0),
                1,
                false,
            );
            let n = b.batch_norm(c, &format!("{name}.expand.bn"), row.expanded, eps, momentum);
            y = mb_act(&mut b, n, row.use_hs);
            ch = row.expanded;
        }
        // Depthwise conv.
        let pad = (row.kernel - 1) / 2;
        let c = b.conv2d(
            y,
            &format!("{name}.dw.conv"),
            ch,
            ch,
            (row.kernel, row.kernel),
            row.stride,
            (pad, pad),
            ch,
            false,
        );
        let n = b.batch_norm(c, &format!("{name}.dw.bn"), ch, eps, momentum);
        y = mb_act(&mut b, n, row.use_hs);

        if row.use_se {
            let squeeze = make_divisible(row.expanded / 4, 8);
            let pooled = b.global_avg_pool(y);
            let fc1 = b.conv2d(
                pooled,
                &format!("{name}.se.fc1"),
                ch,
                squeeze,
                (1, 1),
                1,
                (0, 0),
                1,
                true,
            );
            let a1 = b.relu(fc1);
            let fc2 = b.conv2d(
                a1,
                &format!("{name}.se.fc2"),
                squeeze,
                ch,
                (1, 1),
                1,
                (0, 0),
                1,
                true,
            );
            let gate = b.hardsigmoid(fc2);
            y = b.mul_broadcast(y, gate);
        }

        // Linear projection.
        let c = b.conv2d(
            y,
            &format!("{name}.project.conv"),
            ch,
            row.out_ch,
            (1, 1),
            1,
            (0, 0),
            1,
            false,
        );
        y = b.batch_norm(c, &format!("{name}.project.bn"), row.out_ch, eps, momentum);

        x = if row.stride == 1 && row.in_ch == row.out_ch {
            b.add(y, block_input)
        } else {
            y
        };
    }

    let last_c = b.conv2d(x, "last.conv", 160, 960, (1, 1), 1, (0, 0), 1, false);
    let last_n = b.batch_norm(last_c, "last.bn", 960, eps, momentum);
    let last = b.hardswish(last_n);
    let pooled = b.global_avg_pool(last);
    let pre = b.dense(pooled, "classifier.pre", 960, 1280);
    let pre_act = b.hardswish(pre);
    let head_start = b.next_param_id();
    let out = b.dense(pre_act, "head", 1280, num_labels);
    b.mark_head(head_start);
    b.finish(out)
}

// ── Inception-V3 ─────────────────────────────────────────────────────────────

struct InceptionCtx {
    eps: f32,
    momentum: f32,
}

#[allow(clippy::too_many_arguments)]
fn basic_conv(
    b: &mut GraphBuilder,
    ctx: &InceptionCtx,
    x: NodeId,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: (usize, usize),
) -> NodeId {
    let c = b.conv2d(
        x,
        &format!("{name}.conv"),
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        1,
        false,
    );
    let n = b.batch_norm(c, &format!("{name}.bn"), out_ch, ctx.eps, ctx.momentum);
    b.relu(n)
}

fn inception_a(
    b: &mut GraphBuilder,
    ctx: &InceptionCtx,
    x: NodeId,
    name: &str,
    in_ch: usize,
    pool_features: usize,
) -> (NodeId, usize) {
    let b1 = basic_conv(b, ctx, x, &format!("{name}.b1"), in_ch, 64, (1, 1), 1, (0, 0));
    let b5_1 = basic_conv(b, ctx, x, &format!("{name}.b5_1"), in_ch, 48, (1, 1), 1, (0, 0));
    let b5_2 = basic_conv(b, ctx, b5_1, &format!("{name}.b5_2"), 48, 64, (5, 5), 1, (2, 2));
    let d1 = basic_conv(b, ctx, x, &format!("{name}.d1"), in_ch, 64, (1, 1), 1, (0, 0));
    let d2 = basic_conv(b, ctx, d1, &format!("{name}.d2"), 64, 96, (3, 3), 1, (1, 1));
    let d3 = basic_conv(b, ctx, d2, &format!("{name}.d3"), 96, 96, (3, 3), 1, (1, 1));
    let pool = b.avg_pool(x, 3, 1, 1, true);
    let bp = basic_conv(
        b,
        ctx,
        pool,
        &format!("{name}.pool"),
        in_ch,
        pool_features,
        (1, 1),
        1,
        (0, 0),
    );
    let out = b.concat(&[b1, b5_2, d3, bp]);
    (out, 64 + 64 + 96 + pool_features)
}

fn inception_b(
    b: &mut GraphBuilder,
    ctx: &InceptionCtx,
    x: NodeId,
    name: &str,
    in_ch: usize,
) -> (NodeId, usize) {
    let b3 = basic_conv(b, ctx, x, &format!("{name}.b3"), in_ch, 384, (3, 3), 2, (0, 0));
    let d1 = basic_conv(b, ctx, x, &format!("{name}.d1"), in_ch, 64, (1, 1), 1, (0, 0));
    let d2 = basic_conv(b, ctx, d1, &format!("{name}.d2"), 64, 96, (3, 3), 1, (1, 1));
    let d3 = basic_conv(b, ctx, d2, &format!("{name}.d3"), 96, 96, (3, 3), 2, (0, 0));
    let pool = b.max_pool(x, 3, 2, 0);
    let out = b.concat(&[b3, d3, pool]);
    (out, 384 + 96 + in_ch)
}

fn inception_c(
    b: &mut GraphBuilder,
    ctx: &InceptionCtx,
    x: NodeId,
    name: &str,
    in_ch: usize,
    c7: usize,
) -> (NodeId, usize) {
    let b1 = basic_conv(b, ctx, x, &format!("{name}.b1"), in_ch, 192, (1, 1), 1, (0, 0));
    let s1 = basic_conv(b, ctx, x, &format!("{name}.s1"), in_ch, c7, (1, 1), 1, (0, 0));
    let s2 = basic_conv(b, ctx, s1, &format!("{name}.s2"), c7, c7, (1, 7), 1, (0, 3));
    let s3 = basic_conv(b, ctx, s2, &format!("{name}.s3"), c7, 192, (7, 1), 1, (3, 0));
    let d1 = basic_conv(b, ctx, x, &format!("{name}.d1"), in_ch, c7, (1, 1), 1, (0, 0));
    let d2 = basic_conv(b, ctx, d1, &format!("{name}.d2"), c7, c7, (7, 1), 1, (3, 0));
    let d3 = basic_conv(b, ctx, d2, &format!("{name}.d3"), c7, c7, (1, 7), 1, (0, 3));
    let d4 = basic_conv(b, ctx, d3, &format!("{name}.d4"), c7, c7, (7, 1), 1, (3, 0));
    let d5 = basic_conv(b, ctx, d4, &format!("{name}.d5"), c7, 192, (1, 7), 1, (0, 3));
    let pool = b.avg_pool(x, 3, 1, 1, true);
    let bp = basic_conv(b, ctx, pool, &format!("{name}.pool"), in_ch, 192, (1, 1), 1, (0, 0));
    let out = b.concat(&[b1, s3, d5, bp]);
    (out, 192 * 4)
}

fn inception_d(
    b: &mut GraphBuilder,
    ctx: &InceptionCtx,
    x: NodeId,
    name: &str,
    in_ch: usize,
) -> (NodeId, usize) {
    let t1 = basic_conv(b, ctx, x, &format!("{name}.t1"), in_ch, 192, (1, 1), 1, (0, 0));
    let t2 = basic_conv(b, ctx, t1, &format!("{name}.t2"), 192, 320, (3, 3), 2, (0, 0));
    let s1 = basic_conv(b, ctx, x, &format!("{name}.s1"), in_ch, 192, (1, 1), 1, (0, 0));
    let s2 = basic_conv(b, ctx, s1, &format!("{name}.s2"), 192, 192, (1, 7), 1, (0, 3));
    let s3 = basic_conv(b, ctx, s2, &format!("{name}.s3"), 192, 192, (7, 1), 1, (3, 0));
    let s4 = basic_conv(b, ctx, s3, &format!("{name}.s4"), 192, 192, (3, 3), 2, (0, 0));
    let pool = b.max_pool(x, 3, 2, 0);
    let out = b.concat(&[t2, s4, pool]);
    (out, 320 + 192 + in_ch)
}

fn inception_e(
    b: &mut GraphBuilder,
    ctx: &InceptionCtx,
    x: NodeId,
    name: &str,
    in_ch: usize,
) -> (NodeId, usize) {
    let b1 = basic_conv(b, ctx, x, &format!("{name}.b1"), in_ch, 320, (1, 1), 1, (0, 0));
    let t1 = basic_conv(b, ctx, x, &format!("{name}.t1"), in_ch, 384, (1, 1), 1, (0, 0));
    let t2a = basic_conv(b, ctx, t1, &format!("{name}.t2a"), 384, 384, (1, 3), 1, (0, 1));
    let t2b = basic_conv(b, ctx, t1, &format!("{name}.t2b"), 384, 384, (3, 1), 1, (1, 0));
    let t_cat = b.concat(&[t2a, t2b]);
    let d1 = basic_conv(b, ctx, x, &format!("{name}.d1"), in_ch, 448, (1, 1), 1, (0, 0));
    let d2 = basic_conv(b, ctx, d1, &format!("{name}.d2"), 448, 384, (3, 3), 1, (1, 1));
    let d3a = basic_conv(b, ctx, d2, &format!("{name}.d3a"), 384, 384, (1, 3), 1, (0, 1));
    let d3b = basic_conv(b, ctx, d2, &format!("{name}.d3b"), 384, 384, (3, 1), 1, (1, 0));
    let d_cat = b.concat(&[d3a, d3b]);
    let pool = b.avg_pool(x, 3, 1, 1, true);
    let bp = basic_conv(b, ctx, pool, &format!("{name}.pool"), in_ch, 192, (1, 1), 1, (0, 0));
    let out = b.concat(&[b1, t_cat, d_cat, bp]);
    (out, 320 + 768 + 768 + 192)
}

fn build_inception_v3(num_labels: usize, seed: u64) -> Graph {
    let ctx = InceptionCtx {
        eps: 1e-3,
        momentum: 0.1,
    };
    let mut b = GraphBuilder::new(seed);
    let input = b.input();
    let s1 = basic_conv(&mut b, &ctx, input, "stem.c1a", 3, 32, (3, 3), 2, (0, 0));
    let s2 = basic_conv(&mut b, &ctx, s1, "stem.c2a", 32, 32, (3, 3), 1, (0, 0));
    let s3 = basic_conv(&mut b, &ctx, s2, "stem.c2b", 32, 64, (3, 3), 1, (1, 1));
    let p1 = b.max_pool(s3, 3, 2, 0);
    let s4 = basic_conv(&mut b, &ctx, p1, "stem.c3b", 64, 80, (1, 1), 1, (0, 0));
    let s5 = basic_conv(&mut b, &ctx, s4, "stem.c4a", 80, 192, (3, 3), 1, (0, 0));
    let p2 = b.max_pool(s5, 3, 2, 0);

    let (a1, ch) = inception_a(&mut b, &ctx, p2, "mix5b", 192, 32);
    let (a2, ch) = inception_a(&mut b, &ctx, a1, "mix5c", ch, 64);
    let (a3, ch) = inception_a(&mut b, &ctx, a2, "mix5d", ch, 64);
    let (bb, ch) = inception_b(&mut b, &ctx, a3, "mix6a", ch);
    let (c1, ch) = inception_c(&mut b, &ctx, bb, "mix6b", ch, 128);
    let (c2, ch) = inception_c(&mut b, &ctx, c1, "mix6c", ch, 160);
    let (c3, ch) = inception_c(&mut b, &ctx, c2, "mix6d", ch, 160);
    let (c4, ch) = inception_c(&mut b, &ctx, c3, "mix6e", ch, 192);
    let (dd, ch) = inception_d(&mut b, &ctx, c4, "mix7a", ch);
    let (e1, ch) = inception_e(&mut b, &ctx, dd, "mix7b", ch);
    let (e2, ch) = inception_e(&mut b, &ctx, e1, "mix7c", ch);

    let pooled = b.global_avg_pool(e2);
    let head_start = b.next_param_id();
    let out = b.dense(pooled, "head", ch, num_labels);
    b.mark_head(head_start);
    b.finish(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    /// Backbone parameter totals for the standard architecture definitions
    /// (torchvision layouts) with the classifier removed, plus the feature
    /// width feeding the replacement head.
    const BACKBONE_PARAMS: [(ProfileName, usize, usize); 5] = [
        (ProfileName::Resnet50, 23_508_032, 2048),
        (ProfileName::WideResnet50, 66_834_240, 2048),
        (ProfileName::Densenet201, 18_092_928, 1920),
        // MobileNetV3-Large keeps its 960→1280 penultimate classifier layer.
        (ProfileName::MobilenetV3, 4_202_032, 1280),
        // Inception-V3 without the auxiliary classifier.
        (ProfileName::InceptionV3, 21_785_568, 2048),
    ];

    #[test]
    fn standard_backbones_match_reference_parameter_counts() {
        for (name, backbone, feat) in BACKBONE_PARAMS {
            for labels in [1usize, 17] {
                let g = build_graph(name, labels, 1);
                let expected = backbone + feat * labels + labels;
                assert_eq!(
                    g.param_count(),
                    expected,
                    "{name} with {labels} labels: got {} expected {expected}",
                    g.param_count()
                );
                drop(g);
            }
        }
    }

    #[test]
    fn tiny_cnn_parameter_count_is_exact() {
        // 3*16*9 + 2*16 + 16*32*9 + 2*32 + 32*64*9 + 2*64 + 64L + L
        let g = build_graph(ProfileName::TinyCnn, 17, 1);
        let expected = 432 + 32 + 4608 + 64 + 18432 + 128 + 64 * 17 + 17;
        assert_eq!(g.param_count(), expected);
    }

    /// Forward connectivity smoke: run each backbone fully convolutionally
    /// at a reduced spatial size (the public API enforces the real minimum
    /// input sizes; this goes through the graph directly).
    #[test]
    fn backbone_graphs_run_end_to_end_at_reduced_size() {
        let cases = [
            (ProfileName::Resnet50, 64),
            (ProfileName::WideResnet50, 64),
            (ProfileName::Densenet201, 64),
            (ProfileName::MobilenetV3, 64),
            (ProfileName::InceptionV3, 75),
            (ProfileName::TinyCnn, 32),
        ];
        for (name, side) in cases {
            let g = build_graph(name, 5, 3);
            let x = Array4::from_shape_fn((1, 3, side, side), |(_, c, i, j)| {
                ((c * 37 + i * 5 + j * 3) % 97) as f32 / 97.0
            });
            let y = g.forward_eval(&x);
            assert_eq!(y.dim(), (1, 5, 1, 1), "{name} output shape");
            assert!(
                y.iter().all(|v| v.is_finite()),
                "{name} produced non-finite logits"
            );
            drop(g);
        }
    }

    #[test]
    fn make_divisible_matches_reference_rounding() {
        // Squeeze widths observed in the reference MobileNetV3-Large.
        assert_eq!(make_divisible(72 / 4, 8), 24);
        assert_eq!(make_divisible(120 / 4, 8), 32);
        assert_eq!(make_divisible(480 / 4, 8), 120);
        assert_eq!(make_divisible(672 / 4, 8), 168);
        assert_eq!(make_divisible(960 / 4, 8), 240);
    }
}
