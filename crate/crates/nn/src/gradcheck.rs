//! Gradient verification against finite differences.
//!
//! The numeric side differentiates independent f64 re-implementations of
//! each op, so the comparison is limited by the engine's f32 arithmetic
//! rather than by cancellation in an f32 difference quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BatchNormState, Graph, Mode, Tensor, Var, BN_EPS};

/// Finite-difference step.
pub const STEP: f64 = 1e-3;

/// f64 forward definitions used as the numeric oracle.
pub mod reference {
    pub fn conv3(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], b: &[f64]) -> Vec<f64> {
        let o = b.len();
        let mut out = vec![0.0; n * o * h * w];
        for s in 0..n {
            for oc in 0..o {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                        acc += x[((s * c + ic) * h + sy as usize) * w + sx as usize]
                                            * wt[((oc * c + ic) * 3 + ky as usize) * 3 + kx as usize];
                                    }
                                }
                            }
                        }
                        out[((s * o + oc) * h + y as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn maxpool2(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let at = |dy: usize, dx: usize| x[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(p * oh + y) * ow + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                }
            }
        }
        out
    }

    pub fn upconv2(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], b: &[f64]) -> Vec<f64> {
        let o = b.len();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * o * h2 * w2];
        for s in 0..n {
            for oc in 0..o {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            acc += x[((s * c + ic) * h + y / 2) * w + xx / 2] * wt[((ic * o + oc) * 2 + y % 2) * 2 + xx % 2];
                        }
                        out[((s * o + oc) * h2 + y) * w2 + xx] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn linear(x: &[f64], n: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
        let e = b.len();
        let d = x.len() / n;
        let mut out = vec![0.0; n * e];
        for s in 0..n {
            for j in 0..e {
                out[s * e + j] = b[j] + (0..d).map(|k| x[s * d + k] * wt[k * e + j]).sum::<f64>();
            }
        }
        out
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.max(0.0)).collect()
    }

    /// `stats` are running (mean, var) per channel for eval mode.
    pub fn batchnorm(
        x: &[f64],
        (n, c, hw): (usize, usize, usize),
        gamma: &[f64],
        beta: &[f64],
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let idx = || (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
            let (mean, var) = match stats {
                Some((m, v)) => (m[ch], v[ch]),
                None => {
                    let m = (n * hw) as f64;
                    let mean = idx().map(|k| x[k]).sum::<f64>() / m;
                    (mean, idx().map(|k| (x[k] - mean).powi(2)).sum::<f64>() / m)
                }
            };
            for k in idx() {
                out[k] = gamma[ch] * (x[k] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
        out
    }

    pub fn softmax_ce(logits: &[f64], (n, k, hw): (usize, usize, usize), target: &[u32]) -> f64 {
        let mut total = 0.0;
        for s in 0..n {
            for p in 0..hw {
                let at = |c: usize| logits[(s * k + c) * hw + p];
                let mx = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..k).map(|c| (at(c) - mx).exp()).sum::<f64>().ln();
                total += lse - at(target[s * hw + p] as usize);
            }
        }
        total / (n * hw) as f64
    }

    pub fn kl_diag(mu: &[f64], logvar: &[f64], n: usize) -> f64 {
        -0.5 * mu.iter().zip(logvar).map(|(m, l)| 1.0 + l - m * m - l.exp()).sum::<f64>() / n as f64
    }

    pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
        mu.iter().zip(logvar).zip(eps).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

/// Max relative error between the engine's gradients of `engine` and
/// central differences of `oracle`, over every entry of every parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-3 * g_max)` where
/// `g_max` is the tensor's largest gradient magnitude, so entries that are
/// tiny compared to the rest of their tensor do not divide by ~0.
pub fn max_rel_err<E, O>(params: &[Tensor], engine: E, oracle: O) -> f64
where
    E: Fn(&mut Graph, &[Var]) -> Var,
    O: Fn(&[Vec<f64>]) -> f64,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = engine(&mut g, &vars);
    g.backward(loss).expect("scalar loss");
    let base: Vec<Vec<f64>> = params.iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect();
    let mut worst = 0.0f64;
    for (pi, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(gr) => gr.iter().map(|&a| a as f64).collect(),
            None => vec![0.0; params[pi].len()],
        };
        let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        for k in 0..analytic.len() {
            let mut p = base.clone();
            p[pi][k] = base[pi][k] + STEP;
            let up = oracle(&p);
            p[pi][k] = base[pi][k] - STEP;
            let down = oracle(&p);
            let numeric = (up - down) / (2.0 * STEP);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE);
            worst = worst.max((analytic[k] - numeric).abs() / denom);
        }
    }
    worst
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("shape")
}

/// Magnitudes in [0.1, 1) with random sign: clear of relu's kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1f32..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// A shuffled arithmetic ramp: no pooling ties within the FD step.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - 1.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).expect("shape")
}

/// `sum(y * r)` for a fixed weight tensor `r`, recorded on the graph.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Var {
    let len = r.len();
    let yf = g.reshape(y, &[1, len]).expect("len");
    let rv = g.input(r.clone().reshaped(&[len, 1]).expect("len"));
    let zero = g.input(Tensor::zeros(&[1]));
    let out = g.linear(yf, rv, zero).expect("shapes");
    g.sum(out)
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
}

/// Run the finite-difference check of every differentiable op, plus the
/// conv -> relu -> pool -> linear -> softmax_ce composite.
pub fn check_all_ops(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let shape = (1, 2, 4, 4);
        let params = [uniform(&[1, 2, 4, 4], &mut rng), uniform(&[3, 2, 3, 3], &mut rng), uniform(&[3], &mut rng)];
        let r = uniform(&[1, 3, 4, 4], &mut rng);
        let rr = f64s(&r);
        let err = max_rel_err(
            &params,
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2]).expect("conv");
                project(g, y, &r)
            },
            |p| reference::dot(&reference::conv3(&p[0], shape, &p[1], &p[2]), &rr),
        );
        out.push(OpCheck { op: "conv2d", max_rel_err: err });
    }
    {
        let shape = (2, 2, 4, 4);
        let params = [distinct(&[2, 2, 4, 4], &mut rng)];
        let r = uniform(&[2, 2, 2, 2], &mut rng);
        let rr = f64s(&r);
        let err = max_rel_err(
            &params,
            |g, v| {
                let y = g.maxpool2(v[0]).expect("pool");
                project(g, y, &r)
            },
            |p| reference::dot(&reference::maxpool2(&p[0], shape), &rr),
        );
        out.push(OpCheck { op: "maxpool2", max_rel_err: err });
    }
    {
        let shape = (2, 3, 2, 3);
        let params = [uniform(&[2, 3, 2, 3], &mut rng), uniform(&[3, 2, 2, 2], &mut rng), uniform(&[2], &mut rng)];
        let r = uniform(&[2, 2, 4, 6], &mut rng);
        let rr = f64s(&r);
        let err = max_rel_err(
            &params,
            |g, v| {
                let y = g.upconv2(v[0], v[1], v[2]).expect("upconv");
                project(g, y, &r)
            },
            |p| reference::dot(&reference::upconv2(&p[0], shape, &p[1], &p[2]), &rr),
        );
        out.push(OpCheck { op: "upconv2", max_rel_err: err });
    }
    {
        let params = [uniform(&[3, 4], &mut rng), uniform(&[4, 5], &mut rng), uniform(&[5], &mut rng)];
        let r = uniform(&[3, 5], &mut rng);
        let rr = f64s(&r);
        let err = max_rel_err(
            &params,
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]).expect("linear");
                project(g, y, &r)
            },
            |p| reference::dot(&reference::linear(&p[0], 3, &p[1], &p[2]), &rr),
        );
        out.push(OpCheck { op: "linear", max_rel_err: err });
    }
    {
        let params = [off_kink(&[4, 6], &mut rng)];
        let r = uniform(&[4, 6], &mut rng);
        let rr = f64s(&r);
        let err = max_rel_err(
            &params,
            |g, v| {
                let y = g.relu(v[0]);
                project(g, y, &r)
            },
            |p| reference::dot(&reference::relu(&p[0]), &rr),
        );
        out.push(OpCheck { op: "relu", max_rel_err: err });
    }
    for (name, mode) in [("batchnorm_train", Mode::Train), ("batchnorm_eval", Mode::Eval)] {
        let params = [uniform(&[3, 2, 2, 2], &mut rng), off_kink(&[2], &mut rng), uniform(&[2], &mut rng)];
        let r = uniform(&[3, 2, 2, 2], &mut rng);
        let rr = f64s(&r);
        let (rm, rv) = ([0.2f32, -0.1], [0.8f32, 1.3]);
        let (rm64, rv64) = (rm.map(|v| v as f64), rv.map(|v| v as f64));
        let err = max_rel_err(
            &params,
            |g, v| {
                let mut st = BatchNormState {
                    running_mean: rm.to_vec(),
                    running_var: rv.to_vec(),
                };
                let y = g.batchnorm(v[0], v[1], v[2], &mut st, mode).expect("bn");
                project(g, y, &r)
            },
            |p| {
                let stats = (mode == Mode::Eval).then_some((&rm64[..], &rv64[..]));
                reference::dot(&reference::batchnorm(&p[0], (3, 2, 4), &p[1], &p[2], stats, BN_EPS as f64), &rr)
            },
        );
        out.push(OpCheck { op: name, max_rel_err: err });
    }
    {
        let params = [uniform(&[2, 4, 2, 3], &mut rng)];
        let target: Vec<u32> = (0..12).map(|_| rng.random_range(0..4)).collect();
        let err = max_rel_err(
            &params,
            |g, v| g.softmax_ce_classes(v[0], target.clone()).expect("ce"),
            |p| reference::softmax_ce(&p[0], (2, 4, 6), &target),
        );
        out.push(OpCheck { op: "softmax_ce", max_rel_err: err });
    }
    {
        let params = [uniform(&[3, 4], &mut rng), uniform(&[3, 4], &mut rng)];
        let err = max_rel_err(
            &params,
            |g, v| g.kl_diag_gaussian(v[0], v[1]).expect("kl"),
            |p| reference::kl_diag(&p[0], &p[1], 3),
        );
        out.push(OpCheck { op: "kl_diag_gaussian", max_rel_err: err });
    }
    {
        let params = [uniform(&[3, 4], &mut rng), uniform(&[3, 4], &mut rng)];
        let eps: Vec<f32> = (0..12).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        let eps64: Vec<f64> = eps.iter().map(|&e| e as f64).collect();
        let r = uniform(&[3, 4], &mut rng);
        let rr = f64s(&r);
        let err = max_rel_err(
            &params,
            |g, v| {
                let z = g.reparameterize(v[0], v[1], eps.clone()).expect("reparam");
                project(g, z, &r)
            },
            |p| reference::dot(&reference::reparameterize(&p[0], &p[1], &eps64), &rr),
        );
        out.push(OpCheck { op: "reparameterize", max_rel_err: err });
    }
    {
        let params = [uniform(&[2, 3], &mut rng), uniform(&[2, 3], &mut rng)];
        let err = max_rel_err(
            &params,
            |g, v| {
                let a = g.scale(v[0], 0.7);
                let s = g.add(a, v[1]).expect("add");
                let r = g.reshape(s, &[3, 2]).expect("reshape");
                g.sum(r)
            },
            |p| p[0].iter().map(|a| 0.7 * a).sum::<f64>() + p[1].iter().sum::<f64>(),
        );
        out.push(OpCheck { op: "scale_add_reshape_sum", max_rel_err: err });
    }
    {
        let params = [
            uniform(&[2, 1, 4, 4], &mut rng),
            uniform(&[2, 1, 3, 3], &mut rng),
            uniform(&[2], &mut rng),
            uniform(&[8, 16], &mut rng),
            uniform(&[16], &mut rng),
        ];
        let target: Vec<u32> = (0..8).map(|_| rng.random_range(0..4)).collect();
        let err = max_rel_err(
            &params,
            |g, v| {
                let c = g.conv2d(v[0], v[1], v[2]).expect("conv");
                let r = g.relu(c);
                let p = g.maxpool2(r).expect("pool");
                let f = g.reshape(p, &[2, 8]).expect("flatten");
                let l = g.linear(f, v[3], v[4]).expect("linear");
                let logits = g.reshape(l, &[2, 4, 2, 2]).expect("reshape");
                g.softmax_ce_classes(logits, target.clone()).expect("ce")
            },
            |p| {
                let c = reference::conv3(&p[0], (2, 1, 4, 4), &p[1], &p[2]);
                let pooled = reference::maxpool2(&reference::relu(&c), (2, 2, 4, 4));
                let l = reference::linear(&pooled, 2, &p[3], &p[4]);
                reference::softmax_ce(&l, (2, 4, 4), &target)
            },
        );
        out.push(OpCheck {
            op: "conv_relu_pool_linear_ce",
            max_rel_err: err,
        });
    }
    out
}
