use super::config::{CapsLayerConfig, ModelConfig};

/// Cost of one layer of the forward pass for a single sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    /// Multiply-adds.
    pub flops: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub layers: Vec<LayerCost>,
    pub params: usize,
    pub flops: usize,
}

/// Multiply-adds of one routing iteration with `ci` children, `cp` parents
/// of dimension `d`: the weighted vote sum and the agreement term each cost
/// `ci·cp·d`, softmax `ci·cp`, squash `cp·d`.
pub fn routing_flops(ci: usize, cp: usize, d: usize) -> usize {
    2 * ci * cp * d + ci * cp + cp * d
}

/// Analytic parameter and multiply-add count for one forward pass.
///
/// Parameters are kernels, biases, trainable batch-norm scale and shift,
/// and the class-capsule matrices. Multiply-adds count every dense map,
/// batch-norm affine step and routing iteration; elementwise activations
/// are not counted.
pub fn count_params_flops(cfg: &ModelConfig) -> Complexity {
    let mut layers = Vec::new();
    let bias = |n: usize| if cfg.use_bias { n } else { 0 };
    let n = cfg.num_points;
    let mut push = |name: &str, params: usize, flops: usize| {
        layers.push(LayerCost {
            name: name.to_string(),
            params,
            flops,
        })
    };

    let [w1, w2, w3] = cfg.conv_widths;
    let cin = cfg.input_channels;
    push("encoder.conv1", cin * w1 + bias(w1), n * cin * w1);
    push("encoder.bn1", 2 * w1, n * w1);
    push("encoder.conv2", w1 * w2 + bias(w2), n * w1 * w2);
    push("encoder.conv3", w2 * w3 + bias(w3), n * w2 * w3);

    let caps_a = |l: &CapsLayerConfig, ci: usize, di: usize| {
        let k = l.capsules * l.dim;
        let iters = cfg.routing_spec(l).iterations;
        (di * k + bias(k), ci * di * k + iters * routing_flops(ci, l.capsules, l.dim))
    };

    let p = cfg.primary_caps;
    let (pp, pf) = caps_a(&p, n, w3);
    push("path_b.primary", pp, pf);

    let (ec, ed) = cfg.entity_caps;
    let k = ec * ed;
    push("path_b.entity", p.dim * k + bias(k), p.capsules * (p.dim * k + k));

    let q = cfg.part_caps;
    let (qp, qf) = caps_a(&q, ec, ed);
    push("path_b.parts", qp, p.capsules * qf);

    let r = cfg.regen_caps;
    let (rp, rf) = caps_a(&r, cfg.regen_inputs(), q.dim);
    push("path_b.regen", rp, rf);

    let a = cfg.point_caps;
    let (ap, af) = caps_a(&a, n, w2);
    push("path_a", ap, af);

    let ci = cfg.digit_inputs();
    let classes = cfg.num_classes;
    let b = cfg.digit_dim;
    let digit_params = ci * classes * b * r.dim;
    let iters = cfg.digit_routing_spec().iterations;
    push(
        "digit",
        digit_params,
        digit_params + iters * routing_flops(ci, classes, b),
    );

    let dense = cfg.decoder_dense;
    push("decoder.dense", b * dense + bias(dense), b * dense);
    push("decoder.bn", 2 * dense, dense);
    let base = cfg.decoder_base_width();
    let s = cfg.upsample_stride;
    let [d0, d1, d2, d3] = cfg.decoder_widths;
    let chain = [
        ("decoder.deconv1", s, dense / base, d0, base),
        ("decoder.deconv2", s, d0, d1, base * s),
        ("decoder.deconv3", 1, d1, d2, n),
        ("decoder.deconv4", 1, d2, d3, n),
        ("decoder.deconv5", 1, d3, 3, n),
    ];
    for (name, k, c_in, c_out, width_in) in chain {
        push(name, k * c_out * c_in + bias(c_out), width_in * k * c_out * c_in);
    }

    let params = layers.iter().map(|l| l.params).sum();
    let flops = layers.iter().map(|l| l.flops).sum();
    Complexity { layers, params, flops }
}

