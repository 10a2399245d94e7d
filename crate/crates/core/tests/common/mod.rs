//! Straight-line 64-bit reference implementations used as test oracles.
//! Nothing here touches the tape.

#![allow(dead_code)]

use fusioncc::diffcore::ParamStore;

pub const LN_EPS: f64 = 1e-5;

/// Tokens of one sample: `T` rows of width `E`.
pub type Rows = Vec<Vec<f64>>;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mu) * inv * g + b)
        .collect()
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().to_vec()
}

/// `x W + b` for every row; `W` is `[in, out]`.
pub fn linear_rows(x: &Rows, w: &[f64], b: &[f64]) -> Rows {
    let out = b.len();
    let inp = w.len() / out;
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), inp);
            (0..out)
                .map(|j| b[j] + (0..inp).map(|i| row[i] * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// One pre-norm ViT block on one sample. Returns the output rows and the
/// attention matrix of every head.
pub fn vit_block(store: &ParamStore<f64>, prefix: &str, heads: usize, x: &Rows) -> (Rows, Vec<Rows>) {
    let p = |s: &str| param(store, &format!("{prefix}.{s}"));
    let t = x.len();
    let e = x[0].len();
    let dh = e / heads;

    let n1: Rows = x.iter().map(|r| layer_norm(r, &p("ln1.gamma"), &p("ln1.beta"))).collect();
    let q = linear_rows(&n1, &p("attn.q.weight"), &p("attn.q.bias"));
    let k = linear_rows(&n1, &p("attn.k.weight"), &p("attn.k.bias"));
    let v = linear_rows(&n1, &p("attn.v.weight"), &p("attn.v.bias"));

    let mut mixed = vec![vec![0.0; e]; t];
    let mut maps = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut map = Vec::new();
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                mixed[i][c] = (0..t).map(|j| w[j] * v[j][c]).sum();
            }
            map.push(w);
        }
        maps.push(map);
    }
    let o = linear_rows(&mixed, &p("attn.o.weight"), &p("attn.o.bias"));
    let x1: Rows = x.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();

    let n2: Rows = x1.iter().map(|r| layer_norm(r, &p("ln2.gamma"), &p("ln2.beta"))).collect();
    let hidden: Rows = linear_rows(&n2, &p("mlp.fc1.weight"), &p("mlp.fc1.bias"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let out = linear_rows(&hidden, &p("mlp.fc2.weight"), &p("mlp.fc2.bias"));
    let y = x1.iter().zip(&out).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    (y, maps)
}

/// The fusion stack on one sample pair: per layer, the shared branch block
/// on each view, concatenation, the fused block, and a split; then the
/// final LayerNorm. Returns the normalized token rows of both branches.
pub fn fusion_stack(store: &ParamStore<f64>, depth: usize, heads: usize, a: &Rows, b: &Rows) -> (Rows, Rows) {
    let (mut a, mut b) = (a.clone(), b.clone());
    let t = a.len();
    for i in 0..depth {
        let (a1, _) = vit_block(store, &format!("encoder.branch{i}"), heads, &a);
        let (b1, _) = vit_block(store, &format!("encoder.branch{i}"), heads, &b);
        let joined: Rows = a1.into_iter().chain(b1).collect();
        let (y, _) = vit_block(store, &format!("encoder.fused{i}"), heads, &joined);
        a = y[..t].to_vec();
        b = y[t..].to_vec();
    }
    let g = param(store, "encoder.final_ln.gamma");
    let be = param(store, "encoder.final_ln.beta");
    let norm = |rows: Rows| rows.iter().map(|r| layer_norm(r, &g, &be)).collect();
    (norm(a), norm(b))
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu.max(1e-12) * nv.max(1e-12))
}

/// Paired InfoNCE by enumeration of the full `2n × 2n` similarity matrix.
/// Returns the two halves, anchors in view a then view b.
pub fn info_nce(xa: &Rows, xb: &Rows, tau: f64, strict: bool) -> (f64, f64) {
    let n = xa.len();
    let all: Vec<&Vec<f64>> = xa.iter().chain(xb).collect();
    let m = 2 * n;
    let mut halves = [0.0, 0.0];
    for i in 0..m {
        let pos = (i + n) % m;
        let s = |j: usize| cosine(all[i], all[j]) / tau;
        let mut denom = 0.0;
        for j in 0..m {
            if j == i || (strict && j == pos) {
                continue;
            }
            denom += s(j).exp();
        }
        halves[i / n] += -(s(pos).exp() / denom).ln() / n as f64;
    }
    (halves[0], halves[1])
}

pub fn columns(rows: &Rows) -> Rows {
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

/// `log k + Σ p̄ log p̄` for the mean assignment `p̄`.
pub fn balance_penalty(probs: &Rows) -> f64 {
    let k = probs[0].len();
    let b = probs.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / b).collect();
    (k as f64).ln() + mean.iter().map(|p| p * (p + 1e-12).ln()).sum::<f64>()
}

/// Best accuracy over every relabelling of the predicted clusters.
pub fn exhaustive_acc(pred: &[usize], truth: &[usize]) -> f64 {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let k = kp.max(kt);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits = pred.iter().zip(truth).filter(|&(&a, &b)| p[a] == b).count();
        best = best.max(hits);
    });
    best as f64 / pred.len() as f64
}

fn permute(v: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
    if at == v.len() {
        f(v);
        return;
    }
    for i in at..v.len() {
        v.swap(at, i);
        permute(v, at + 1, f);
        v.swap(at, i);
    }
}

/// Rand index adjusted for chance, by counting agreements over all pairs.
pub fn pair_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut both, mut p_only, mut t_only, mut pairs) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            let sp = pred[i] == pred[j];
            let st = truth[i] == truth[j];
            both += (sp && st) as u8 as f64;
            p_only += sp as u8 as f64;
            t_only += st as u8 as f64;
            pairs += 1.0;
        }
    }
    let expected = p_only * t_only / pairs;
    let max = 0.5 * (p_only + t_only);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

pub fn entropy(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    (0..k)
        .map(|c| labels.iter().filter(|&&l| l == c).count() as f64 / n)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// NMI with the geometric-mean normalization, from the joint distribution.
pub fn direct_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut mi = 0.0;
    for a in 0..kp {
        for b in 0..kt {
            let nab = pred.iter().zip(truth).filter(|&(&x, &y)| x == a && y == b).count() as f64;
            if nab == 0.0 {
                continue;
            }
            let na = pred.iter().filter(|&&x| x == a).count() as f64;
            let nb = truth.iter().filter(|&&y| y == b).count() as f64;
            mi += nab / n * (n * nab / (na * nb)).ln();
        }
    }
    let (hp, ht) = (entropy(pred), entropy(truth));
    if hp == 0.0 || ht == 0.0 {
        return if hp == ht { 1.0 } else { 0.0 };
    }
    mi / (hp * ht).sqrt()
}

/// Deterministic pseudo-random values in `[-1, 1)` for building inputs.
pub fn noise(seed: u64, len: usize) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct convolution of one `[C, H, W]` image; `w` is `[O, C, kh, kw]`.
pub fn conv2d(x: &[f64], c: usize, h: usize, w_in: usize, w: &[f64], b: &[f64], kernel: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let o = b.len();
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w_in + 2 * pad - kernel) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b[oc];
                for ic in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w_in as isize {
                                continue;
                            }
                            let xv = x[(ic * h + iy as usize) * w_in + ix as usize];
                            s += xv * w[((oc * c + ic) * kernel + ky) * kernel + kx];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Stem, optional CLIP anchor and positional rows for one `[3, S, S]` image.
pub fn embed(store: &ParamStore<f64>, convs: usize, side: usize, image: &[f64], clip: Option<&[f64]>) -> Rows {
    let (mut x, mut c, mut s) = (image.to_vec(), 3, side);
    for i in 0..convs {
        let b = param(store, &format!("stem.conv{i}.bias"));
        let (y, oh, _) = conv2d(&x, c, s, s, &param(store, &format!("stem.conv{i}.weight")), &b, 3, 2, 1);
        x = y.into_iter().map(|v| v.max(0.0)).collect();
        c = b.len();
        s = oh;
    }
    let pb = param(store, "stem.proj.bias");
    let (y, _, _) = conv2d(&x, c, s, s, &param(store, "stem.proj.weight"), &pb, 1, 1, 0);
    let e = pb.len();
    let p = s * s;
    let mut rows = vec![param(store, "stem.cls")];
    if let Some(c0) = clip {
        let anchor = match store.find("clip.proj.weight") {
            Some(_) => linear_rows(&vec![c0.to_vec()], &param(store, "clip.proj.weight"), &vec![0.0; e]).remove(0),
            None => c0.to_vec(),
        };
        rows.push(anchor);
    }
    rows.extend((0..p).map(|t| (0..e).map(|ch| y[ch * p + t]).collect()));
    let pos = param(store, "positional");
    for (t, row) in rows.iter_mut().enumerate() {
        row.iter_mut().enumerate().for_each(|(j, v)| *v += pos[t * e + j]);
    }
    rows
}

pub fn mlp(store: &ParamStore<f64>, prefix: &str, x: &Rows) -> Rows {
    let p = |s: &str| param(store, &format!("{prefix}.{s}"));
    let h: Rows = linear_rows(x, &p("fc1.weight"), &p("fc1.bias"))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    linear_rows(&h, &p("fc2.weight"), &p("fc2.bias"))
}

/// `[I_a, I_b, C_a, C_b, penalty, total]` from summary rows of both views.
pub fn heads_loss(store: &ParamStore<f64>, ha: &Rows, hb: &Rows, tau_i: f64, tau_c: f64, weight: f64) -> [f64; 6] {
    let za = mlp(store, "heads.instance", ha);
    let zb = mlp(store, "heads.instance", hb);
    let probs = |h: &Rows| -> Rows { mlp(store, "heads.cluster", h).iter().map(|r| softmax(r)).collect() };
    let (ca, cb) = (probs(ha), probs(hb));
    let (ia, ib) = info_nce(&za, &zb, tau_i, false);
    let (cla, clb) = info_nce(&columns(&ca), &columns(&cb), tau_c, false);
    let pen = balance_penalty(&ca) + balance_penalty(&cb);
    [ia, ib, cla, clb, pen, ia + ib + cla + clb + weight * pen]
}
