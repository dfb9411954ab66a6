//! Reference implementations written as plain loops, random generators and
//! a finite-difference gradient checker.

#![allow(dead_code)]

use mfrt::autograd::{Tape, Var};
use mfrt::tensor::{self, BinaryOp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn naive_conv(x: &Tensor, k: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for c in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (xo * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.data()[(c * h + iy as usize) * w + ix as usize]
                                * k.data()[((o * cin + c) * kh + i) * kw + j];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).unwrap()
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Softmax over the last axis, computed without max subtraction using
/// pairwise ratios `1 / Σ_j exp(x_j - x_i)`.
pub fn naive_softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let d = x.data();
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let row = &d[(i / n) * n..(i / n + 1) * n];
        1.0 / row.iter().map(|v| (v - d[i]).exp()).sum::<f64>()
    })
}

pub fn naive_normalize(x: &Tensor, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let c = x.shape()[0];
    let inner = x.numel() / c;
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let ch = i / inner;
        gamma[ch] * (x.data()[i] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
    })
}

/// Half-pixel bilinear resampling of one `[C, h, w]` tensor.
pub fn naive_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = |d: usize, from: usize, to: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * from as f64 / to as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(from - 1);
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    Tensor::from_fn(vec![c, oh, ow], |i| {
        let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (y0, y1, ly) = src(y, h, oh);
        let (x0, x1, lx) = src(xx, w, ow);
        let at = |yy: usize, xv: usize| x.data()[(ch * h + yy) * w + xv];
        (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1)) + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1))
    })
}

pub fn naive_gap(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let inner = x.numel() / c;
    Tensor::from_fn(vec![c, 1, 1], |ch| {
        let mut s = 0.0;
        for i in 0..inner {
            s += x.data()[ch * inner + i];
        }
        s / inner as f64
    })
}

/// Multi-head attention of `q [N, D]` over `k, v [S, D]` with per-entry
/// allowance, as explicit loops. Rows without any allowed key see all keys.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, allowed: Option<&[bool]>) -> Tensor {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let s = k.shape()[0];
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let open = |j: usize| allowed.is_none_or(|a| a[i * s + j] || !(0..s).any(|t| a[i * s + t]));
            let mut logits = vec![f64::NEG_INFINITY; s];
            for j in 0..s {
                if open(j) {
                    let mut dot = 0.0;
                    for t in 0..dh {
                        dot += q.data()[i * d + h * dh + t] * k.data()[j * d + h * dh + t];
                    }
                    logits[j] = dot / (dh as f64).sqrt();
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..s {
                let p = (logits[j] - mx).exp() / z;
                for t in 0..dh {
                    out[i * d + h * dh + t] += p * v.data()[j * d + h * dh + t];
                }
            }
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

pub fn naive_layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &x.data()[r * n..(r + 1) * n];
        let mu = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
        for j in 0..n {
            out[r * n + j] = (row[j] - mu) / (var + eps).sqrt() * gamma[j] + beta[j];
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.max_abs_diff(b)
}

/// Largest error of every forward primitive against its loop oracle over
/// `instances` random cases with inputs in [-2, 2].
pub fn forward_primitive_errors(seed: u64, instances: usize) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..instances {
        // conv2d
        let cin = r.random_range(1..4);
        let cout = r.random_range(1..4);
        let k = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..2);
        let h = r.random_range(k.max(2)..9);
        let w = r.random_range(k.max(2)..9);
        let x = rand_tensor(&mut r, &[cin, h, w], -2.0, 2.0);
        let ker = rand_tensor(&mut r, &[cout, cin, k, k], -2.0, 2.0);
        let b = rand_tensor(&mut r, &[cout], -2.0, 2.0);
        let got = tensor::conv2d(&x, &ker, Some(&b), stride, pad).unwrap();
        note("conv2d", max_diff(&got, &naive_conv(&x, &ker, Some(&b), stride, pad)));

        // normalize_affine
        let c = r.random_range(1..5);
        let x = rand_tensor(&mut r, &[c, 3, 4], -2.0, 2.0);
        let mean = rand_tensor(&mut r, &[c], -2.0, 2.0);
        let var = rand_tensor(&mut r, &[c], 0.0, 2.0);
        let gamma = rand_tensor(&mut r, &[c], -2.0, 2.0);
        let beta = rand_tensor(&mut r, &[c], -2.0, 2.0);
        let got = tensor::normalize_affine(&x, &mean, &var, &gamma, &beta, 1e-5).unwrap();
        let want = naive_normalize(&x, mean.data(), var.data(), gamma.data(), beta.data(), 1e-5);
        note("normalize_affine", max_diff(&got, &want));

        // elementwise
        let a = rand_tensor(&mut r, &[c, 3, 4], -2.0, 2.0);
        let bb = rand_tensor(&mut r, &[c, 3, 4], -2.0, 2.0);
        let chw = rand_tensor(&mut r, &[c, 1, 1], -2.0, 2.0);
        let relu = tensor::relu(&a);
        note("relu", a.data().iter().zip(relu.data()).map(|(x, y)| (x.max(0.0) - y).abs()).fold(0.0, f64::max));
        let sig = tensor::sigmoid(&a);
        note(
            "sigmoid",
            a.data().iter().zip(sig.data()).map(|(x, y)| (1.0 / (1.0 + (-x).exp()) - y).abs()).fold(0.0, f64::max),
        );
        let add = tensor::binary(BinaryOp::Add, &a, &bb).unwrap();
        note("add", a.data().iter().zip(bb.data()).zip(add.data()).map(|((x, y), z)| (x + y - z).abs()).fold(0.0, f64::max));
        let mul = tensor::binary(BinaryOp::Mul, &a, &chw).unwrap();
        let inner = 12;
        note(
            "mul_channel_broadcast",
            (0..a.numel()).map(|i| (a.data()[i] * chw.data()[i / inner] - mul.data()[i]).abs()).fold(0.0, f64::max),
        );

        // softmax
        let rows = r.random_range(1..5);
        let len = r.random_range(1..8);
        let x = rand_tensor(&mut r, &[rows, len], -2.0, 2.0);
        note("softmax", max_diff(&tensor::softmax(&x, 1).unwrap(), &naive_softmax_rows(&x)));

        // matmul
        let (m, kk, n) = (r.random_range(1..8), r.random_range(1..8), r.random_range(1..8));
        let a = rand_tensor(&mut r, &[m, kk], -2.0, 2.0);
        let b = rand_tensor(&mut r, &[kk, n], -2.0, 2.0);
        note("matmul", max_diff(&tensor::matmul(&a, &b).unwrap(), &naive_matmul(&a, &b)));

        // bilinear upsample
        let (ih, iw) = (r.random_range(1..5), r.random_range(1..5));
        let (oh, ow) = (ih * r.random_range(1..4) + r.random_range(0..2), iw * r.random_range(1..4));
        let x = rand_tensor(&mut r, &[2, ih, iw], -2.0, 2.0);
        note(
            "bilinear_upsample",
            max_diff(&tensor::bilinear_upsample(&x, oh, ow).unwrap(), &naive_bilinear(&x, oh, ow)),
        );

        // global average pool
        let (gh, gw) = (r.random_range(1..6), r.random_range(1..6));
        let x = rand_tensor(&mut r, &[3, gh, gw], -2.0, 2.0);
        note("global_avg_pool", max_diff(&tensor::global_avg_pool(&x).unwrap(), &naive_gap(&x)));

        // concat along channels
        let (c1, c2) = (r.random_range(0..3), r.random_range(1..3));
        let a = rand_tensor(&mut r, &[c1, 2, 3], -2.0, 2.0);
        let b = rand_tensor(&mut r, &[c2, 2, 3], -2.0, 2.0);
        let cat = tensor::concat(&[&a, &b], 0).unwrap();
        let want: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        note("concat", max_diff(&cat, &Tensor::new(vec![c1 + c2, 2, 3], want).unwrap()));

        // attention (masked)
        let (nq, s, heads) = (r.random_range(1..5), r.random_range(1..7), [1, 2][r.random_range(0..2)]);
        let d = heads * r.random_range(1..4);
        let q = rand_tensor(&mut r, &[nq, d], -2.0, 2.0);
        let kt = rand_tensor(&mut r, &[s, d], -2.0, 2.0);
        let vt = rand_tensor(&mut r, &[s, d], -2.0, 2.0);
        let allowed: Vec<bool> = (0..nq * s).map(|_| r.random_bool(0.6)).collect();
        let got = tape_attention(&q, &kt, &vt, heads, &allowed);
        note("masked_attention", max_diff(&got, &naive_attention(&q, &kt, &vt, heads, Some(&allowed))));
    }
    worst
}

/// Masked multi-head attention through the library's tape operations.
pub fn tape_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, allowed: &[bool]) -> Tensor {
    let (n, s) = (q.shape()[0], k.shape()[0]);
    let mask = mfrt::decoder::AttentionMask::new(n, s, allowed.to_vec()).unwrap();
    let store = mfrt::nn::ParamStore::new();
    let mut tape = Tape::new();
    let mut ctx = mfrt::nn::Ctx::new(&mut tape, &store, mfrt::nn::Mode::Eval, false);
    let (qv, kv, vv) = (ctx.tape.constant(q.clone()), ctx.tape.constant(k.clone()), ctx.tape.constant(v.clone()));
    let (out, _) = mfrt::decoder::multi_head_attention(&mut ctx, heads, qv, kv, vv, Some(&mask)).unwrap();
    ctx.tape.value(out).clone()
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) || (analytic - numeric).abs() <= abs
}

/// Checks `d f / d inputs` for a scalar-valued graph builder against central
/// differences with step `eps`, visiting every input entry.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, eps: f64, rel: f64) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    let mut report = GradReport::default();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let analytic = grads[i].data()[j];
            report.checked += 1;
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-9 {
                report.worst_rel = report.worst_rel.max((analytic - numeric).abs() / denom);
            }
            if !grad_close(analytic, numeric, rel, 1e-7) {
                report.failures.push(format!("input {i}[{j}]: analytic {analytic:e}, numeric {numeric:e}"));
            }
        }
    }
    report
}

/// Minimum total cost over every injective gt → query map, summed in gt order.
pub fn brute_force_min_cost(cost: &Tensor) -> f64 {
    fn go(cost: &Tensor, g: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        let (m, n) = (cost.shape()[0], cost.shape()[1]);
        if g == m {
            *best = best.min(acc);
            return;
        }
        for q in 0..n {
            if !used[q] {
                used[q] = true;
                go(cost, g + 1, used, acc + cost.data()[g * n + q], best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.shape()[1]], 0.0, &mut best);
    if cost.shape()[0] == 0 {
        0.0
    } else {
        best
    }
}

/// Runs the matcher on `trials` random matrices with 1 ≤ m ≤ 7 rows and
/// m ≤ n ≤ 8 columns; returns the number of disagreements with exhaustive search.
pub fn hungarian_disagreements(seed: u64, trials: usize) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let m = r.random_range(1..=7);
        let n = r.random_range(m..=8);
        let cost = rand_tensor(&mut r, &[m, n], -1.0, 1.0);
        let a = mfrt::hungarian::hungarian_match(&cost).unwrap();
        let mut qs: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        qs.sort_unstable();
        qs.dedup();
        let summed: f64 = a.pairs.iter().map(|&(g, q)| cost.data()[g * n + q]).sum();
        if a.pairs.len() != m || qs.len() != m || summed != a.total_cost || a.total_cost != brute_force_min_cost(&cost) {
            bad += 1;
        }
    }
    bad
}

use mfrt::classes::ClassTable;
use mfrt::postprocess::{PanopticMap, SegmentInfo};
use std::collections::BTreeMap;

/// Builds a valid panoptic map from raw ids and a class per id; ids absent
/// from the map are dropped and extra stuff segments become thing segments.
pub fn panoptic_from_raw(h: usize, w: usize, ids: Vec<u32>, class_of: &BTreeMap<u32, usize>, table: &ClassTable) -> PanopticMap {
    let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in ids.iter().filter(|&&id| id != 0) {
        *areas.entry(id).or_default() += 1;
    }
    let mut stuff_used = Vec::new();
    let first_thing = table.thing_ids().next().expect("a thing class");
    let segments = areas
        .iter()
        .map(|(&id, &area)| {
            let mut class_id = class_of[&id];
            if !table.is_thing(class_id) {
                if stuff_used.contains(&class_id) {
                    class_id = first_thing;
                } else {
                    stuff_used.push(class_id);
                }
            }
            SegmentInfo {
                id,
                class_id,
                is_thing: table.is_thing(class_id),
                area,
            }
        })
        .collect();
    PanopticMap::new(h, w, ids, segments).unwrap()
}

/// Random ground-truth map on a 6x6 grid with up to `max_segments`
/// rectangles and some void, and a prediction that is either a noisy copy
/// or independent.
pub fn random_panoptic_pair(r: &mut ChaCha8Rng, table: &ClassTable, max_segments: usize) -> (PanopticMap, PanopticMap) {
    let (h, w) = (6, 6);
    let k = table.num_classes();
    let paint = |r: &mut ChaCha8Rng, count: usize, void_p: f64| {
        let mut ids = vec![0u32; h * w];
        for id in 1..=count as u32 {
            let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
            let (y1, x1) = (r.random_range(y0..h), r.random_range(x0..w));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    ids[y * w + x] = id;
                }
            }
        }
        for v in ids.iter_mut() {
            if r.random_bool(void_p) {
                *v = 0;
            }
        }
        ids
    };
    let count = r.random_range(1..=max_segments);
    let gt_ids = paint(r, count, 0.1);
    let gt_class: BTreeMap<u32, usize> = (1..=count as u32).map(|id| (id, r.random_range(0..k))).collect();
    let gt = panoptic_from_raw(h, w, gt_ids.clone(), &gt_class, table);

    let (pred_ids, pred_class) = if r.random_bool(0.7) {
        let mut ids = gt_ids;
        let flips = r.random_range(0..10);
        for _ in 0..flips {
            let p = r.random_range(0..h * w);
            ids[p] = r.random_range(0..=count as u32 + 1);
        }
        let mut classes: BTreeMap<u32, usize> = gt.segments().iter().map(|s| (s.id, s.class_id)).collect();
        for id in 1..=count as u32 + 1 {
            if !classes.contains_key(&id) || r.random_bool(0.15) {
                classes.insert(id, r.random_range(0..k));
            }
        }
        (ids, classes)
    } else {
        let c = r.random_range(1..=max_segments);
        let ids = paint(r, c, 0.05);
        (ids, (1..=c as u32).map(|id| (id, r.random_range(0..k))).collect())
    };
    (gt, panoptic_from_raw(h, w, pred_ids, &pred_class, table))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleClassStat {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Exhaustive PQ for one image pair: for every class, searches all partial
/// matchings between its ground-truth and predicted segments for the one
/// with the most pairs (then largest IoU sum) among pairs with IoU > 0.5.
pub fn brute_force_pq(pred: &PanopticMap, gt: &PanopticMap, table: &ClassTable) -> (BTreeMap<usize, OracleClassStat>, f64) {
    let pixels = gt.ids().len();
    let count = |f: &dyn Fn(usize) -> bool| (0..pixels).filter(|&i| f(i)).count();
    let mut stats: BTreeMap<usize, OracleClassStat> = BTreeMap::new();
    for c in 0..table.num_classes() {
        let gs: Vec<u32> = gt.segments().iter().filter(|s| s.class_id == c).map(|s| s.id).collect();
        let ps: Vec<u32> = pred.segments().iter().filter(|s| s.class_id == c).map(|s| s.id).collect();
        let iou = |g: u32, p: u32| {
            let inter = count(&|i| gt.ids()[i] == g && pred.ids()[i] == p);
            let union = count(&|i| (gt.ids()[i] == g || pred.ids()[i] == p) && !(gt.ids()[i] == 0 && pred.ids()[i] == p));
            inter as f64 / union as f64
        };
        // Best partial matching by (pairs, iou sum).
        fn search(gi: usize, gs: &[u32], ps: &[u32], used: &mut Vec<bool>, cur: &mut Vec<(u32, u32, f64)>, best: &mut Vec<(u32, u32, f64)>, iou: &dyn Fn(u32, u32) -> f64) {
            if gi == gs.len() {
                let key = |v: &Vec<(u32, u32, f64)>| (v.len(), v.iter().map(|t| t.2).sum::<f64>());
                let (cn, cs) = key(cur);
                let (bn, bs) = key(best);
                if cn > bn || (cn == bn && cs > bs) {
                    *best = cur.clone();
                }
                return;
            }
            search(gi + 1, gs, ps, used, cur, best, iou);
            for (pj, &p) in ps.iter().enumerate() {
                if used[pj] {
                    continue;
                }
                let v = iou(gs[gi], p);
                if v > 0.5 {
                    used[pj] = true;
                    cur.push((gs[gi], p, v));
                    search(gi + 1, gs, ps, used, cur, best, iou);
                    cur.pop();
                    used[pj] = false;
                }
            }
        }
        let mut best = Vec::new();
        search(0, &gs, &ps, &mut vec![false; ps.len()], &mut Vec::new(), &mut best, &iou);
        best.sort_by_key(|t| (t.0, t.1));
        let mut st = OracleClassStat::default();
        for t in &best {
            st.tp += 1;
            st.iou_sum += t.2;
        }
        st.fn_ = (gs.len() - best.len()) as u64;
        for &p in &ps {
            if best.iter().any(|t| t.1 == p) {
                continue;
            }
            let area = count(&|i| pred.ids()[i] == p);
            let on_void = count(&|i| pred.ids()[i] == p && gt.ids()[i] == 0);
            if on_void as f64 / area as f64 <= 0.5 {
                st.fp += 1;
            }
        }
        if st.tp + st.fp + st.fn_ > 0 {
            stats.insert(c, st);
        }
    }
    let per: Vec<f64> = stats
        .values()
        .map(|s| s.iou_sum / (s.tp as f64 + 0.5 * s.fp as f64 + 0.5 * s.fn_ as f64))
        .collect();
    let pq = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (stats, pq)
}

/// Number of image pairs on which the library's PQ disagrees with the
/// exhaustive evaluator (any per-class count, IoU sum or PQ bit differs).
pub fn pq_disagreements(seed: u64, pairs: usize) -> usize {
    let table = ClassTable::synthetic(1, 2);
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..pairs {
        let (gt, pred) = random_panoptic_pair(&mut r, &table, 6);
        let res = mfrt::metrics::panoptic_quality(std::slice::from_ref(&pred), std::slice::from_ref(&gt), &table).unwrap();
        let (want, want_pq) = brute_force_pq(&pred, &gt, &table);
        let got: BTreeMap<usize, OracleClassStat> = res
            .per_class
            .iter()
            .map(|c| (c.class_id, OracleClassStat { iou_sum: c.iou_sum, tp: c.tp, fp: c.fp, fn_: c.fn_ }))
            .collect();
        if got != want || res.pq.to_bits() != want_pq.to_bits() {
            bad += 1;
        }
    }
    bad
}

use mfrt::dataset::{generate_synthetic_dataset, SynthSpec, CELL};
use mfrt::decoder::AttentionMask;
use mfrt::loss::{output_loss, GroundTruthSegment, LossWeights};
use mfrt::nn::Mode;
use mfrt::{Model, ModelConfig};

/// Loss of a batch plus everything that makes it piecewise: the matching
/// of every supervised block and every attention mask.
fn batch_loss(
    model: &Model,
    images: &[Tensor],
    targets: &[Vec<GroundTruthSegment>],
) -> (f64, Vec<Vec<(usize, usize)>>, Vec<AttentionMask>) {
    let weights = LossWeights::default();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, images, Mode::Train, false).unwrap();
    let mut total = 0.0;
    let mut matches = Vec::new();
    let mut masks = Vec::new();
    for (out, gts) in pass.outputs.iter().zip(targets) {
        for b in &out.blocks {
            let (l, _, m) = output_loss(&mut tape, b, gts, &weights).unwrap();
            total += tape.value(l).item();
            matches.push(m.pairs);
        }
        masks.extend(out.masks.iter().cloned());
    }
    (total / images.len() as f64, matches, masks)
}

pub struct ModelGradReport {
    /// Parameter name and number of entries compared for it.
    pub per_param: Vec<(String, usize)>,
    /// Entries whose perturbation changed a matching or an attention mask.
    pub skipped: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

impl ModelGradReport {
    pub fn checked(&self) -> usize {
        self.per_param.iter().map(|p| p.1).sum()
    }
}

/// Central differences of the full training loss at `samples` random
/// entries of every parameter tensor of a small model (N=4, D=16, K=3) on
/// two 32x32 synthetic images.
pub fn model_gradcheck(seed: u64, samples: usize, rel: f64) -> ModelGradReport {
    let cfg = ModelConfig {
        num_queries: 4,
        hidden_dim: 16,
        num_heads: 2,
        cp_proj_dim: 8,
        spatial_channels: 8,
        backbone_widths: vec![4, 8, 8, 8, 8],
        ..ModelConfig::tiny(3)
    };
    let mut model = Model::new(cfg, seed).unwrap();
    let ds = generate_synthetic_dataset(&SynthSpec {
        seed: seed + 3,
        count: 2,
        height: 32,
        width: 32,
        num_classes: 3,
        max_instances: 1,
    })
    .unwrap();
    let images: Vec<Tensor> = ds.records.iter().map(|r| r.image.clone()).collect();
    let targets: Vec<Vec<GroundTruthSegment>> =
        ds.records.iter().map(|r| r.segments(&ds.table, CELL).unwrap()).collect();
    let refs: Vec<&[GroundTruthSegment]> = targets.iter().map(Vec::as_slice).collect();

    let (loss, grads, _) = mfrt::train::loss_and_grads(&model, &images, &refs, &LossWeights::default()).unwrap();
    let (check, m0, a0) = batch_loss(&model, &images, &targets);
    assert!((loss - check).abs() <= 1e-12 * loss.abs());

    let names: Vec<String> = model.params().params().map(|(n, _)| n.clone()).collect();
    let mut r = rng(seed + 99);
    let eps = 1e-6;
    let mut report = ModelGradReport { per_param: Vec::new(), skipped: 0, failures: Vec::new(), worst_rel: 0.0 };
    for name in &names {
        let len = model.params().param(name).unwrap().data().len();
        let mut checked = 0;
        for _ in 0..samples {
            let i = r.random_range(0..len);
            let orig = model.params().param(name).unwrap().data()[i];
            let mut eval = |v: f64| {
                model.params_mut().param_mut(name).unwrap().data_mut()[i] = v;
                batch_loss(&model, &images, &targets)
            };
            let (lp, mp, ap) = eval(orig + eps);
            let (lm, mm, am) = eval(orig - eps);
            model.params_mut().param_mut(name).unwrap().data_mut()[i] = orig;
            if mp != m0 || mm != m0 || ap != a0 || am != a0 {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            checked += 1;
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-7 {
                report.worst_rel = report.worst_rel.max((analytic - numeric).abs() / scale);
            }
            if !grad_close(analytic, numeric, rel, 1e-7) {
                report.failures.push(format!("{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}"));
            }
        }
        report.per_param.push((name.clone(), checked));
    }
    report
}
