//! Independent oracles and the finite-difference harness shared by the
//! integration tests. Nothing here calls the kernels it checks.
#![allow(dead_code)]

use nanonet::blocks::BlockSpec;
use nanonet::graph::{backward, forward, GradientTape, GraphBuilder, ModelGraph, Op, ParamKind};
use nanonet::layers::Mode;
use nanonet::weights::WeightStore;
use nanonet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: nanonet::Element>(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64(rng.gen_range(lo..hi)))
}

/// SAME geometry computed from first principles: output covers
/// ceil(in / stride) positions, the odd padding cell goes last.
fn same_pad(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = (input + stride - 1) / stride;
    let needed = (out - 1) * stride + k;
    let total = needed.saturating_sub(input);
    (out, total / 2)
}

/// Direct-summation convolution in f64. `w` is (Cout, Cin, k, k).
pub fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&[f32]>, stride: usize, same: bool) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let ((oh, ph), (ow, pw)) = if same {
        (same_pad(xs.h, k, stride), same_pad(xs.w, k, stride))
    } else {
        (((xs.h - k) / stride + 1, 0), ((xs.w - k) / stride + 1, 0))
    };
    let mut out = Vec::with_capacity(xs.n * ws.n * oh * ow);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co] as f64);
                    for ci in 0..xs.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - ph as isize;
                                let ix = (ox * stride + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, ci, iy as usize, ix as usize) as f64 * w.at(co, ci, ky, kx) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Per-channel direct summation; `w` is (C, 1, k, k).
pub fn depthwise_oracle(x: &Tensor, w: &Tensor, stride: usize, same: bool) -> Vec<f64> {
    let xs = x.shape();
    let k = w.shape().h;
    let ((oh, ph), (ow, pw)) = if same {
        (same_pad(xs.h, k, stride), same_pad(xs.w, k, stride))
    } else {
        (((xs.h - k) / stride + 1, 0), ((xs.w - k) / stride + 1, 0))
    };
    let mut out = Vec::new();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if iy >= 0 && ix >= 0 && iy < xs.h as isize && ix < xs.w as isize {
                                acc += x.at(n, c, iy as usize, ix as usize) as f64 * w.at(c, 0, ky, kx) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// 2x bilinear with half-pixel centers: output pixel o sits at input
/// coordinate (o + 0.5) / 2 - 0.5, clamped at the borders.
pub fn upsample_oracle(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let sample = |n: usize, c: usize, fy: f64, fx: f64| {
        let clampi = |v: f64, len: usize| v.max(0.0).min((len - 1) as f64);
        let (fy, fx) = (clampi(fy, s.h), clampi(fx, s.w));
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let g = |y: usize, xx: usize| x.at(n, c, y, xx) as f64;
        (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x1)) + ty * ((1.0 - tx) * g(y1, x0) + tx * g(y1, x1))
    };
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..2 * s.h {
                for ox in 0..2 * s.w {
                    out.push(sample(n, c, (oy as f64 + 0.5) / 2.0 - 0.5, (ox as f64 + 0.5) / 2.0 - 0.5));
                }
            }
        }
    }
    out
}

/// Batch-statistics normalization: biased variance over (N, H, W).
pub fn batchnorm_train_oracle(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f64> {
    let s = x.shape();
    let m = (s.n * s.h * s.w) as f64;
    let mut stats = Vec::new();
    for c in 0..s.c {
        let vals: Vec<f64> = (0..s.n)
            .flat_map(|n| x.plane(n, c).iter().map(|&v| v as f64).collect::<Vec<_>>())
            .collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        stats.push((mean, var));
    }
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            let (mean, var) = stats[c];
            for &v in x.plane(n, c) {
                out.push(gamma[c] as f64 * (v as f64 - mean) / (var + eps).sqrt() + beta[c] as f64);
            }
        }
    }
    out
}

pub fn batchnorm_infer_oracle(x: &Tensor, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f64) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for &v in x.plane(n, c) {
                out.push(gamma[c] as f64 * (v as f64 - mean[c] as f64) / (var[c] as f64 + eps).sqrt() + beta[c] as f64);
            }
        }
    }
    out
}

/// Largest |a - b| / max(1, |b|).
pub fn max_scaled_err(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Outcome of finite-difference checks over a family of instances.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates left unchecked because every step straddled a corner.
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.instances += other.instances;
        self.coordinates += other.coordinates;
        self.skipped += other.skipped;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const MIN_FD_STEP: f64 = 1e-9;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Random but well-conditioned 64-bit weights: He-uniform kernels, and
/// batch-norm/bias parameters away from their trivial values.
pub fn randomized_store(graph: &ModelGraph, seed: u64) -> WeightStore<f64> {
    let mut store = WeightStore::<f32>::initialize(graph, seed).cast::<f64>();
    let mut r = rng(seed ^ 0x9e37_79b9);
    for p in graph.params() {
        let range = if p.name.ends_with("/gamma") || p.name.ends_with("/moving_variance") {
            Some((0.5, 1.5))
        } else if p.name.ends_with("/beta") || p.name.ends_with("/moving_mean") || p.name.ends_with("/bias") {
            Some((-0.3, 0.3))
        } else {
            None
        };
        if let Some((lo, hi)) = range {
            for v in store.values_mut(&p.name).unwrap() {
                *v = r.gen_range(lo..hi);
            }
        }
    }
    store
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Which side of every ReLU/ReLU6 corner each pre-activation lies on.
fn activation_pattern(graph: &ModelGraph, store: &WeightStore<f64>, x: &Tensor<f64>, mode: Mode) -> Vec<(bool, bool)> {
    let mut tape = GradientTape::new();
    forward(graph, store, x, mode, Some(&mut tape)).unwrap();
    let mut bits = Vec::new();
    for n in graph.nodes() {
        if matches!(n.op, Op::Relu | Op::Relu6) {
            bits.extend(tape.value(n.inputs[0]).unwrap().data().iter().map(|&v| (v > 0.0, v < 6.0)));
        }
    }
    bits
}

/// Central difference of `f` with a step that does not straddle an
/// activation corner; `None` when even the smallest step does.
fn central_difference(
    graph: &ModelGraph,
    mode: Mode,
    weights: &Tensor<f64>,
    at: impl Fn(f64) -> (WeightStore<f64>, Tensor<f64>),
) -> Option<f64> {
    let mut h = FD_STEP;
    while h >= MIN_FD_STEP {
        let (sp, xp) = at(h);
        let (sm, xm) = at(-h);
        if activation_pattern(graph, &sp, &xp, mode) == activation_pattern(graph, &sm, &xm, mode) {
            let lp = weighted_sum(&forward(graph, &sp, &xp, mode, None).unwrap(), weights);
            let lm = weighted_sum(&forward(graph, &sm, &xm, mode, None).unwrap(), weights);
            return Some((lp - lm) / (2.0 * h));
        }
        h /= 100.0;
    }
    None
}

/// Central differences of L = sum(out * R) against the tape gradients, on up
/// to `per_tensor` random coordinates of the input and of every trainable
/// parameter. Coordinates whose stencil crosses a ReLU corner are retried
/// with a smaller step.
pub fn check_graph(graph: &ModelGraph, mode: Mode, batch: usize, seed: u64, per_tensor: usize) -> GradCheck {
    let store = randomized_store(graph, seed);
    let mut r = rng(seed.wrapping_mul(31).wrapping_add(7));
    let fs = graph.input_shape();
    let x: Tensor<f64> = uniform(&mut r, (batch, fs.c, fs.h, fs.w), -1.0, 1.0);
    let mut tape = GradientTape::new();
    let y = forward(graph, &store, &x, mode, Some(&mut tape)).unwrap();
    let s = y.shape();
    let weights: Tensor<f64> = uniform(&mut r, (s.n, s.c, s.h, s.w), -1.0, 1.0);
    let grads = backward(graph, &store, &tape, &weights).unwrap();

    let mut out = GradCheck {
        instances: 1,
        ..GradCheck::default()
    };
    let mut record = |a: f64, n: Option<f64>, at: String| {
        let Some(n) = n else {
            out.skipped += 1;
            return;
        };
        let e = rel_err(a, n);
        out.coordinates += 1;
        if e > out.worst || out.worst_at.is_empty() {
            out.worst = out.worst.max(e);
            out.worst_at = at;
        }
    };

    let gx = grads.input.as_ref().expect("input gradient");
    for _ in 0..per_tensor {
        let i = r.gen_range(0..x.len());
        let num = central_difference(graph, mode, &weights, |d| {
            let mut v = x.data().to_vec();
            v[i] += d;
            (store.clone(), Tensor::new(x.shape(), v).unwrap())
        });
        record(gx.data()[i], num, format!("input[{i}]"));
    }
    for (pi, p) in graph.params().iter().enumerate() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let g = grads.params[pi].as_ref().unwrap_or_else(|| panic!("no gradient for {}", p.name));
        for _ in 0..per_tensor.min(p.numel()) {
            let i = r.gen_range(0..p.numel());
            let num = central_difference(graph, mode, &weights, |d| {
                let mut st = store.clone();
                st.values_mut(&p.name).unwrap()[i] += d;
                (st, x.clone())
            });
            record(g.data()[i], num, format!("{}[{i}]", p.name));
        }
    }
    out
}

/// Named single-layer and block graphs with randomized geometry; every case
/// yields a fresh graph per seed.
pub type CaseBuilder = fn(&mut ChaCha8Rng) -> ModelGraph;

fn side(r: &mut ChaCha8Rng) -> usize {
    r.gen_range(3..=7)
}

fn single(r: &mut ChaCha8Rng, c: usize, f: impl FnOnce(&mut GraphBuilder, nanonet::graph::NodeId) -> nanonet::graph::NodeId) -> ModelGraph {
    let (h, w) = (side(r), side(r));
    let (mut b, x) = GraphBuilder::new(c, h, w);
    let y = f(&mut b, x);
    b.finish(y)
}

pub fn layer_cases() -> Vec<(&'static str, Mode, CaseBuilder)> {
    vec![
        ("conv2d", Mode::Train, |r| {
            let (c, o, k, s, bias) = (r.gen_range(1..4), r.gen_range(1..5), [1, 3][r.gen_range(0..2)], r.gen_range(1..3), r.gen_bool(0.5));
            single(r, c, |b, x| b.conv("c", x, o, k, s, bias).unwrap())
        }),
        ("depthwise_conv2d", Mode::Train, |r| {
            let (c, s) = (r.gen_range(1..5), r.gen_range(1..3));
            single(r, c, |b, x| b.depthwise("d", x, 3, s).unwrap())
        }),
        ("batchnorm_train", Mode::Train, |r| {
            let c = r.gen_range(1..5);
            single(r, c, |b, x| b.batchnorm("bn", x).unwrap())
        }),
        ("batchnorm_infer", Mode::Infer, |r| {
            let c = r.gen_range(1..5);
            single(r, c, |b, x| b.batchnorm("bn", x).unwrap())
        }),
        ("relu", Mode::Train, |r| {
            let c = r.gen_range(1..4);
            single(r, c, |b, x| b.relu("a", x).unwrap())
        }),
        ("relu6", Mode::Train, |r| {
            let c = r.gen_range(1..4);
            // the conv spreads values past the upper kink as well
            single(r, c, |b, x| {
                let y = b.conv("s", x, 3, 1, 1, true).unwrap();
                b.relu6("a", y).unwrap()
            })
        }),
        ("sigmoid", Mode::Train, |r| {
            let c = r.gen_range(1..4);
            single(r, c, |b, x| b.sigmoid("a", x).unwrap())
        }),
        ("softmax_channels", Mode::Train, |r| {
            let c = r.gen_range(2..5);
            single(r, c, |b, x| b.softmax("a", x).unwrap())
        }),
        ("add", Mode::Train, |r| {
            let c = r.gen_range(1..4);
            single(r, c, |b, x| {
                let y = b.conv("p", x, c, 1, 1, false).unwrap();
                b.add("a", x, y).unwrap()
            })
        }),
        ("concat_channels", Mode::Train, |r| {
            let (c, o) = (r.gen_range(1..4), r.gen_range(1..4));
            single(r, c, |b, x| {
                let y = b.conv("p", x, o, 1, 1, false).unwrap();
                b.concat("cat", y, x).unwrap()
            })
        }),
        ("bilinear_upsample2x", Mode::Train, |r| {
            let c = r.gen_range(1..4);
            single(r, c, |b, x| b.upsample2x("u", x).unwrap())
        }),
        ("global_avg_pool", Mode::Train, |r| {
            let c = r.gen_range(1..5);
            single(r, c, |b, x| b.global_avg_pool("g", x).unwrap())
        }),
        ("dense", Mode::Train, |r| {
            let (c, o, bias) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_bool(0.5));
            single(r, c, |b, x| {
                let g = b.global_avg_pool("g", x).unwrap();
                b.dense("fc", g, o, bias).unwrap()
            })
        }),
        ("channel_scale", Mode::Train, |r| {
            let c = r.gen_range(1..5);
            single(r, c, |b, x| {
                let g = b.global_avg_pool("g", x).unwrap();
                let g = b.dense("fc", g, c, true).unwrap();
                b.channel_scale("s", x, g).unwrap()
            })
        }),
    ]
}

pub fn block_cases() -> Vec<(&'static str, Mode, CaseBuilder)> {
    fn standalone(spec: BlockSpec, r: &mut ChaCha8Rng) -> ModelGraph {
        let (h, w) = (r.gen_range(4..=6), r.gen_range(4..=6));
        spec.standalone(h, w).unwrap()
    }
    vec![
        ("inverted_residual", Mode::Train, |r| {
            let (c, o, s, e) = (r.gen_range(2..5), r.gen_range(2..5), r.gen_range(1..3), r.gen_range(1..4));
            standalone(BlockSpec::inverted_residual(c, o, s, e), r)
        }),
        ("inverted_residual_identity", Mode::Train, |r| {
            let c = r.gen_range(2..5);
            standalone(BlockSpec::inverted_residual(c, c, 1, r.gen_range(2..4)), r)
        }),
        ("linear_bottleneck", Mode::Train, |r| {
            let (c, s, e) = (r.gen_range(2..5), r.gen_range(1..3), r.gen_range(1..4));
            standalone(BlockSpec::linear_bottleneck(c, c, s, e), r)
        }),
        ("modified_residual", Mode::Train, |r| {
            let (c, o) = (r.gen_range(1..5), r.gen_range(2..9));
            standalone(BlockSpec::modified_residual(c, o), r)
        }),
        ("modified_residual_infer", Mode::Infer, |r| {
            let (c, o) = (r.gen_range(1..5), r.gen_range(2..9));
            standalone(BlockSpec::modified_residual(c, o), r)
        }),
        ("squeeze_excite", Mode::Train, |r| {
            let c = r.gen_range(1..17);
            standalone(BlockSpec::squeeze_excite(c, [2, 4, 8][r.gen_range(0..3)]), r)
        }),
    ]
}

/// Runs `instances` randomized instances of one case.
pub fn check_case(builder: CaseBuilder, mode: Mode, instances: usize, seed: u64) -> GradCheck {
    let mut total = GradCheck::default();
    for i in 0..instances {
        let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let mut r = rng(s);
        let g = builder(&mut r);
        let batch = r.gen_range(2..4);
        total.merge(check_graph(&g, mode, batch, s, 6));
    }
    total
}
