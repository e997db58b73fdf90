//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rcsbnet::params::ParamStore;
use rcsbnet::tensor::Tensor;

/// Plain `n x c x h x w` array.
#[derive(Clone, Debug)]
pub struct Nd {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Nd {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, v: vec![0.0; n * c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let [n, c, h, w] = t.shape();
        Self { n, c, h, w, v: t.data().to_vec() }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, val: f64) {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        self.v[i] = val;
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Gives every normalisation layer non-trivial statistics and affine terms.
pub fn perturb_norms(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let targets: Vec<_> = store
        .entries()
        .filter_map(|(id, e)| {
            let range = if e.name.ends_with("running_var") {
                (0.5, 1.5)
            } else if e.name.ends_with("running_mean") {
                (-0.3, 0.3)
            } else if e.name.ends_with("bn.weight") {
                (0.5, 1.5)
            } else if e.name.ends_with("bn.bias") {
                (-0.3, 0.3)
            } else {
                return None;
            };
            Some((id, e.value.shape(), range))
        })
        .collect();
    for (id, shape, (lo, hi)) in targets {
        store.set(id, random_tensor(rng, shape, lo, hi)).unwrap();
    }
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Nd {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    Nd::from_tensor(store.get(id))
}

pub fn conv(x: &Nd, w: &Nd, bias: Option<&Nd>, stride: usize) -> Nd {
    let k = w.h;
    let pad = k / 2;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Nd::zeros(x.n, w.n, oh, ow);
    for n in 0..x.n {
        for o in 0..w.n {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = bias.map_or(0.0, |b| b.v[o]);
                    for i in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                s += w.at(o, i, ky, kx) * x.at(n, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, y, xx, s);
                }
            }
        }
    }
    out
}

/// Batch norm with running statistics (`train = false`) or biased batch statistics.
pub fn batch_norm(x: &Nd, store: &ParamStore<f64>, prefix: &str, train: bool) -> Nd {
    let gamma = param(store, &format!("{prefix}.weight"));
    let beta = param(store, &format!("{prefix}.bias"));
    let rm = param(store, &format!("{prefix}.running_mean"));
    let rv = param(store, &format!("{prefix}.running_var"));
    let mut out = x.clone();
    for c in 0..x.c {
        let (mean, var) = if train {
            let mut vals = Vec::new();
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        vals.push(x.at(n, c, y, xx));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        } else {
            (rm.v[c], rv.v[c])
        };
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let z = (x.at(n, c, y, xx) - mean) / (var + 1e-5).sqrt();
                    out.set(n, c, y, xx, z * gamma.v[c] + beta.v[c]);
                }
            }
        }
    }
    out
}

pub fn leaky(x: &Nd, slope: f64) -> Nd {
    let mut out = x.clone();
    for v in &mut out.v {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

pub fn add(a: &Nd, b: &Nd) -> Nd {
    let mut out = a.clone();
    for (o, v) in out.v.iter_mut().zip(&b.v) {
        *o += v;
    }
    out
}

pub fn concat(a: &Nd, b: &Nd) -> Nd {
    let mut out = Nd::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for y in 0..a.h {
            for x in 0..a.w {
                for c in 0..a.c {
                    out.set(n, c, y, x, a.at(n, c, y, x));
                }
                for c in 0..b.c {
                    out.set(n, a.c + c, y, x, b.at(n, c, y, x));
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: &Nd) -> Nd {
    let mut out = x.clone();
    for v in &mut out.v {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize(x: &Nd, oh: usize, ow: usize) -> Nd {
    let src = |d: usize, inp: usize, out: usize| {
        let s = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Nd::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..oh {
                let (y0, y1, ly) = src(y, x.h, oh);
                for xx in 0..ow {
                    let (x0, x1, lx) = src(xx, x.w, ow);
                    let top = x.at(n, c, y0, x0) * (1.0 - lx) + x.at(n, c, y0, x1) * lx;
                    let bot = x.at(n, c, y1, x0) * (1.0 - lx) + x.at(n, c, y1, x1) * lx;
                    out.set(n, c, y, xx, top * (1.0 - ly) + bot * ly);
                }
            }
        }
    }
    out
}

/// Convolution (no bias), normalisation and leaky rectifier under `prefix`.
pub fn conv_bn_act(x: &Nd, store: &ParamStore<f64>, prefix: &str, train: bool) -> Nd {
    let y = conv(x, &param(store, &format!("{prefix}.conv.weight")), None, 1);
    leaky(&batch_norm(&y, store, &format!("{prefix}.bn"), train), 0.01)
}

/// Blending unit: `(sal, ctr)` in, `(sal, ctr)` out.
pub fn csbu(s: &Nd, c: &Nd, store: &ParamStore<f64>, prefix: &str, fusion: bool, train: bool) -> (Nd, Nd) {
    let p = |n: &str| format!("{prefix}.{n}");
    let ctr = conv_bn_act(c, store, &p("ctr_in"), train);
    let sal = conv_bn_act(s, store, &p("sal_in"), train);
    let (ctr_src, sal_src) = if fusion {
        let both = concat(&ctr, &sal);
        (both.clone(), both)
    } else {
        (ctr, sal)
    };
    let ctr_m = conv_bn_act(&ctr_src, store, &p("ctr_mix"), train);
    let sal_m = conv_bn_act(&sal_src, store, &p("sal_mix"), train);
    (
        conv_bn_act(&sal_m, store, &p("sal_out"), train),
        conv_bn_act(&ctr_m, store, &p("ctr_out"), train),
    )
}

pub fn recursive_block(
    s: &Nd,
    c: &Nd,
    store: &ParamStore<f64>,
    prefix: &str,
    recursions: usize,
    fusion: bool,
    train: bool,
) -> (Nd, Nd) {
    let unit = format!("{prefix}.csbu");
    let (mut ys, mut yc) = csbu(s, c, store, &unit, fusion, train);
    for _ in 1..recursions {
        let (a, b) = csbu(&add(&ys, s), &add(&yc, c), store, &unit, fusion, train);
        ys = a;
        yc = b;
    }
    let ts = conv_bn_act(&add(&ys, s), store, &format!("{prefix}.tail_sal"), train);
    let tc = conv_bn_act(&add(&yc, c), store, &format!("{prefix}.tail_ctr"), train);
    (add(&ts, s), add(&tc, c))
}

/// `(sal_logits, ctr_logits)` of 1x1 heads with scalar gains under `prefix`.
pub fn stage_predict(s: &Nd, c: &Nd, store: &ParamStore<f64>, prefix: &str) -> (Nd, Nd) {
    let head = |x: &Nd, name: &str, k: &str| {
        let w = param(store, &format!("{prefix}.{name}.weight"));
        let b = param(store, &format!("{prefix}.{name}.bias"));
        let gain = param(store, &format!("{prefix}.{k}")).v[0];
        let mut y = conv(x, &w, Some(&b), 1);
        y.v.iter_mut().for_each(|v| *v *= gain);
        y
    };
    (head(s, "sal_head", "k_sal"), head(c, "ctr_head", "k_ctr"))
}

pub fn extract_features(sal: &Nd, ctr: &Nd, store: &ParamStore<f64>, fuse_prefix: &str, train: bool) -> Nd {
    let both = concat(&sigmoid(sal), &sigmoid(ctr));
    let up = resize(&both, both.h * 2, both.w * 2);
    conv_bn_act(&up, store, fuse_prefix, train)
}

/// `max |a - b| / max |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
    diff / scale
}

/// Square structuring element, outside pixels treated as background.
pub fn morphology(mask: &[f64], h: usize, w: usize, k: usize, dilate: bool) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = if dilate { 0.0 } else { 1.0 };
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let v = if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        0.0
                    } else {
                        mask[yy as usize * w + xx as usize]
                    };
                    acc = if dilate { f64::max(acc, v) } else { f64::min(acc, v) };
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

pub fn contour_oracle(mask: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let d = morphology(mask, h, w, k, true);
    let e = morphology(mask, h, w, k, false);
    d.iter().zip(&e).map(|(a, b)| (a - b).clamp(0.0, 1.0)).collect()
}

/// Counts `(tp, fp, fn)` at threshold `t / 255`.
pub fn confusion(x: &[f64], y: &[f64], t: usize) -> (f64, f64, f64) {
    let thr = t as f64 / 255.0;
    let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let p = a >= thr;
        match (p, b == 1.0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnn += 1.0,
            _ => {}
        }
    }
    (tp, fp, fnn)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn bce_oracle(x: f64, y: f64) -> f64 {
    let x = x.clamp(1e-7, 1.0 - 1e-7);
    -(y * x.ln() + (1.0 - y) * (1.0 - x).ln())
}

pub fn closs_oracle(x: &[f64], y: &[f64], beta: f64, lambda: f64) -> f64 {
    let s: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let a = a.clamp(1e-7, 1.0 - 1e-7);
            beta * a * (1.0 - a) * (bce_oracle(a, b) + lambda)
        })
        .sum();
    s / x.len() as f64
}

pub fn dc_oracle(xs: &[f64], ys: &[f64], xc: &[f64], yc: &[f64], theta: f64) -> f64 {
    let n = xs.len() as f64;
    let mut s = 0.0;
    for i in 0..xs.len() {
        s += (theta * xc[i].max(yc[i]) + 1.0) * bce_oracle(xs[i], ys[i]);
        s += (theta * xs[i].max(ys[i]) + 1.0) * bce_oracle(xc[i], yc[i]);
    }
    s / n
}

/// Weighted IoU with the 31x31 zero-padded window summed pixel by pixel.
pub fn wiou_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let r = 15isize;
    let (mut inter, mut union) = (1.0, 1.0);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if a >= 0 && b >= 0 && a < h as isize && b < w as isize {
                        acc += y[a as usize * w + b as usize];
                    }
                }
            }
            let k = i as usize * w + j as usize;
            let omega = 1.0 + 5.0 * (acc / 961.0 - y[k]).abs();
            inter += omega * x[k] * y[k];
            union += omega * (x[k] + y[k] - x[k] * y[k]);
        }
    }
    1.0 - inter / union
}

/// Precision, recall and F at every threshold by direct counting.
pub fn curves_oracle(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let eps = 1e-12;
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..256 {
        let (tp, fp, fnn) = confusion(x, y, t);
        let p = tp / (tp + fp + eps);
        let r = tp / (tp + fnn + eps);
        out.0.push(p);
        out.1.push(r);
        out.2.push(1.3 * p * r / (0.3 * p + r + eps));
    }
    out
}

/// Weighted F with a brute-force nearest-foreground search and a direct 7x7 window.
pub fn weighted_f_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let n = h * w;
    if !y.iter().any(|&v| v == 1.0) {
        return if x.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 };
    }
    let mut dist = vec![0.0; n];
    let mut nearest = vec![0; n];
    for i in 0..n {
        let mut best = (u64::MAX, 0);
        for k in 0..n {
            if y[k] == 1.0 {
                let dr = (i / w) as i64 - (k / w) as i64;
                let dc = (i % w) as i64 - (k % w) as i64;
                let d = (dr * dr + dc * dc) as u64;
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        dist[i] = (best.0 as f64).sqrt();
        nearest[i] = best.1;
    }
    let err: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - b).abs()).collect();
    let spread: Vec<f64> = (0..n).map(|i| if y[i] == 1.0 { err[i] } else { err[nearest[i]] }).collect();
    let mut kernel = [[0.0; 7]; 7];
    let mut total = 0.0;
    for (a, row) in kernel.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (da, db) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(da * da + db * db) / 50.0).exp();
            total += *v;
        }
    }
    let (mut fg, mut ew_fg, mut ew_bg) = (0.0, 0.0, 0.0);
    for i in 0..n {
        if y[i] == 1.0 {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            let mut s = 0.0;
            for a in 0..7isize {
                for b in 0..7isize {
                    let (rr, cc) = (r + a - 3, c + b - 3);
                    if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                        s += kernel[a as usize][b as usize] / total * spread[rr as usize * w + cc as usize];
                    }
                }
            }
            fg += 1.0;
            ew_fg += err[i].min(s);
        } else {
            ew_bg += err[i] * (2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp());
        }
    }
    let eps = f64::EPSILON;
    let tp = fg - ew_fg;
    let recall = 1.0 - ew_fg / fg;
    let precision = tp / (eps + tp + ew_bg);
    (2.0 * recall * precision / (eps + recall + precision)).clamp(0.0, 1.0)
}

/// Enhanced alignment after adaptive binarisation, written out directly.
pub fn e_measure_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let t = (2.0 * x.iter().sum::<f64>() / n).min(1.0);
    let b: Vec<f64> = x.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect();
    let fg: f64 = y.iter().sum();
    if fg == 0.0 {
        return b.iter().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if fg == n {
        return b.iter().sum::<f64>() / n;
    }
    let (mb, my) = (b.iter().sum::<f64>() / n, fg / n);
    let mut s = 0.0;
    for (p, q) in b.iter().zip(y) {
        let (a, c) = (p - mb, q - my);
        let align = if a * a + c * c == 0.0 { 0.0 } else { 2.0 * a * c / (a * a + c * c) };
        s += (align + 1.0).powi(2) / 4.0;
    }
    s / n
}

/// Random binary mask: a few rectangles with some pixels flipped.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut m = vec![0.0; h * w];
    for _ in 0..rng.gen_range(0..4) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
        for y in y0..=y1 {
            for x in x0..=x1 {
                m[y * w + x] = 1.0;
            }
        }
    }
    let p = rng.gen_range(0.0..0.2);
    for v in m.iter_mut() {
        if rng.gen_bool(p) {
            *v = 1.0 - *v;
        }
    }
    m
}
