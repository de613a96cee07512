//! Straight-line reference implementations used as test oracles. Everything
//! here works on `Vec<Vec<f64>>` with explicit loops and shares no code with
//! the library beyond reading parameter values.

#![allow(dead_code)]

use svp::aggregator::SsaMode;
use svp::aggregator::SsaParams;
use svp::numcore::{BlockParams, DenseArray, LayerNormParams, LinearParams, MhaParams, MlpParams, ParamStore};
use svp::projector::{SvpParams, SvpPlan};
use svp::sspe::{SspeEncoderParams, SspeModel};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(a: &DenseArray) -> Mat {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

pub fn to_dense(m: &Mat) -> DenseArray {
    let cols = m.first().map_or(0, Vec::len);
    DenseArray::from_fn(m.len(), cols, |i, j| m[i][j])
}

/// Largest entrywise `|a − b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts");
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len(), "column counts");
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
        }
    }
    worst
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_opt(a: &Mat, b: Option<&Mat>) -> Mat {
    match b {
        Some(b) => add(a, b),
        None => a.clone(),
    }
}

pub fn linear(store: &ParamStore, p: &LinearParams, x: &Mat) -> Mat {
    let w = store.value(p.w);
    let b = p.b.map(|b| store.value(b).data().to_vec());
    x.iter()
        .map(|row| {
            (0..p.d_out)
                .map(|j| {
                    let mut s = b.as_ref().map_or(0.0, |b| b[j]);
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w.get(i, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore, p: &LayerNormParams, eps: f64, x: &Mat) -> Mat {
    let g = store.value(p.gamma).data();
    let b = store.value(p.beta).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn mlp(store: &ParamStore, p: &MlpParams, x: &Mat) -> Mat {
    let h: Mat = linear(store, &p.first, x)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(store, &p.second, &h)
}

/// Multi-head attention; `bias[i][j]` is added to the logit of query `i`
/// against key `j`.
#[allow(clippy::too_many_arguments)]
pub fn mha(
    store: &ParamStore,
    p: &MhaParams,
    heads: usize,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    q_pe: Option<&Mat>,
    k_pe: Option<&Mat>,
    bias: Option<&Mat>,
) -> Mat {
    let qp = linear(store, &p.q, &add_opt(q, q_pe));
    let kp = linear(store, &p.k, &add_opt(k, k_pe));
    let vp = linear(store, &p.v, v);
    let d = qp[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let mut logits = Vec::with_capacity(k.len());
            for j in 0..k.len() {
                let mut s = 0.0;
                for c in h * hd..(h + 1) * hd {
                    s += qp[i][c] * kp[j][c];
                }
                s /= (hd as f64).sqrt();
                if let Some(b) = bias {
                    s += b[i][j];
                }
                logits.push(s);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in h * hd..(h + 1) * hd {
                let mut s = 0.0;
                for j in 0..k.len() {
                    s += e[j] / z * vp[j][c];
                }
                out[i][c] = s;
            }
        }
    }
    linear(store, &p.o, &out)
}

/// Pre-norm cross-attention → self-attention → FFN block.
#[allow(clippy::too_many_arguments)]
pub fn block(
    store: &ParamStore,
    b: &BlockParams,
    heads: usize,
    eps: f64,
    x: &Mat,
    q_pe: Option<&Mat>,
    kv: &Mat,
    kv_pe: Option<&Mat>,
    cross_bias: Option<&Mat>,
) -> Mat {
    let h = layer_norm(store, &b.ln_cross, eps, x);
    let x = add(x, &mha(store, &b.cross, heads, &h, kv, kv, q_pe, kv_pe, cross_bias));
    let h = layer_norm(store, &b.ln_self, eps, &x);
    let x = add(&x, &mha(store, &b.self_attn, heads, &h, &h, &h, q_pe, q_pe, None));
    let h = layer_norm(store, &b.ln_ffn, eps, &x);
    add(&x, &mlp(store, &b.ffn, &h))
}

/// Closed-form 2-D sine/cosine table: channel `j` of the first half encodes
/// the row, of the second half the column; pairs within a half share the
/// frequency `10000^(−2k/(d/2))`, sine first.
pub fn sinusoidal(h: usize, w: usize, d: usize) -> Mat {
    let half = d / 2;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let row: Vec<f64> = (0..d)
                .map(|j| {
                    let pos = if j < half { r } else { c } as f64;
                    let within = j % half;
                    let k = (within / 2) as f64;
                    let a = pos / 10000f64.powf(2.0 * k / half as f64);
                    if within % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect();
            out.push(row);
        }
    }
    out
}

/// Per-superpixel loop over the SSPE encoder: keys/values are the mask-value
/// embeddings of every pixel, key PE the sinusoidal table.
pub fn sspe(store: &ParamStore, p: &SspeEncoderParams, labels: &[u32], h: usize, w: usize, m: usize) -> Mat {
    let table = mat(store.value(p.value_embed));
    let dm = p.cfg.model_dim;
    let pe = sinusoidal(h, w, dm);
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let kv: Mat = labels.iter().map(|&l| table[usize::from(l as usize == i)].clone()).collect();
        let qpe = mat(store.value(p.query_pe));
        let mut x = mat(store.value(p.queries));
        for b in &p.blocks {
            x = block(store, b, p.attn.heads, p.attn.ln_eps, &x, Some(&qpe), &kv, Some(&pe), None);
        }
        let flat: Vec<f64> = x.into_iter().flatten().collect();
        rows.push(flat);
    }
    linear(store, &p.out, &rows)
}

/// Mean of the rows of `f` per label.
pub fn pool(labels: &[usize], m: usize, f: &Mat) -> Mat {
    let d = f[0].len();
    let mut out = vec![vec![0.0; d]; m];
    let mut n = vec![0usize; m];
    for (p, &l) in labels.iter().enumerate() {
        n[l] += 1;
        for c in 0..d {
            out[l][c] += f[p][c];
        }
    }
    for (row, &k) in out.iter_mut().zip(&n) {
        for v in row.iter_mut() {
            *v /= k as f64;
        }
    }
    out
}

/// Row `p` is the row of its owner.
pub fn scatter(labels: &[usize], p_sp: &Mat) -> Mat {
    labels.iter().map(|&l| p_sp[l].clone()).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn ssa(
    store: &ParamStore,
    p: &SsaParams,
    e_prime: &Mat,
    f: &Mat,
    p_sp: Option<&Mat>,
    labels: &[usize],
    h: usize,
    w: usize,
) -> Mat {
    let d = p.cfg.model_dim;
    let mut key_pe = sinusoidal(h, w, d);
    if let (SsaMode::ShareSspe, Some(ps)) = (p.mode, p_sp) {
        key_pe = add(&key_pe, &scatter(labels, ps));
    }
    let bias: Option<Mat> = (p.mode == SsaMode::AttnBias).then(|| {
        (0..e_prime.len())
            .map(|i| labels.iter().map(|&l| if l == i { 0.0 } else { -1e9 }).collect())
            .collect()
    });
    let mut x = e_prime.clone();
    for b in &p.blocks {
        x = block(store, b, p.cfg.heads, p.cfg.ln_eps, &x, p_sp, f, Some(&key_pe), bias.as_ref());
    }
    x
}

/// End-to-end tokens for a prepared plan (attention SSPE only).
pub fn svp(store: &ParamStore, p: &SvpParams, f: &Mat, plan: &SvpPlan) -> Mat {
    let aligned = &plan.aligned;
    let labels = aligned.labels();
    let m = aligned.len();
    let p_sp = p.use_sspe.then(|| {
        let SspeModel::Attention(enc) = &p.sspe else {
            panic!("oracle covers the attention encoder only");
        };
        let (rh, rw) = plan.resized.dims();
        let full = sspe(store, enc, plan.resized.labels(), rh, rw, plan.resized.len());
        aligned.kept().iter().map(|&i| full[i].clone()).collect::<Mat>()
    });
    let pooled = pool(labels, m, f);
    let e = if p.use_ssa {
        ssa(store, &p.ssa, &pooled, f, p_sp.as_ref(), labels, aligned.height(), aligned.width())
    } else {
        pooled
    };
    mlp(store, &p.proj, &add_opt(&e, p_sp.as_ref()))
}

/// Rule replay of the greedy filter on raw pixel vectors: returns the label
/// grid (accepted masks first in acceptance order, then 8-connected
/// residual components in row-major order of their first pixel).
pub fn filter_replay(masks: &[(u32, u8, f64, Vec<bool>)], h: usize, w: usize, theta: f64) -> Vec<u32> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let area = |i: usize| masks[i].3.iter().filter(|&&b| b).count();
    order.sort_by(|&a, &b| {
        masks[a]
            .1
            .cmp(&masks[b].1)
            .then(area(b).cmp(&area(a)))
            .then(masks[b].2.partial_cmp(&masks[a].2).unwrap())
            .then(masks[a].0.cmp(&masks[b].0))
    });
    let mut owner: Vec<Option<u32>> = vec![None; h * w];
    let mut next = 0u32;
    for i in order {
        let px = &masks[i].3;
        let mut covered = 0usize;
        let mut total = 0usize;
        for p in 0..h * w {
            if px[p] {
                total += 1;
                if owner[p].is_some() {
                    covered += 1;
                }
            }
        }
        if covered as f64 / total as f64 >= theta {
            continue;
        }
        for p in 0..h * w {
            if px[p] && owner[p].is_none() {
                owner[p] = Some(next);
            }
        }
        next += 1;
    }
    for start in 0..h * w {
        if owner[start].is_some() {
            continue;
        }
        owner[start] = Some(next);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr >= 0 && nc >= 0 && nr < h as i64 && nc < w as i64 {
                        let q = (nr * w as i64 + nc) as usize;
                        if owner[q].is_none() {
                            owner[q] = Some(next);
                            stack.push(q);
                        }
                    }
                }
            }
        }
        next += 1;
    }
    owner.into_iter().map(|o| o.unwrap()).collect()
}

/// A random candidate set on an `h × w` grid: rectangles and ragged blobs
/// at every level, possibly overlapping, possibly leaving gaps.
pub fn random_candidates(rng: &mut impl rand::Rng, h: usize, w: usize) -> Vec<svp::superpixel::CandidateMask> {
    use svp::superpixel::{BinaryGrid, CandidateMask, Level};
    let n = rng.random_range(0..12);
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let level = [Level::Whole, Level::Part, Level::Subpart][rng.random_range(0..3)];
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0 + 1..=h), rng.random_range(c0 + 1..=w));
        let ragged = rng.random_bool(0.4);
        let drop: Vec<bool> = (0..h * w).map(|_| ragged && rng.random_bool(0.3)).collect();
        let mut g = BinaryGrid::from_fn(h, w, |r, c| r >= r0 && r < r1 && c >= c0 && c < c1 && !drop[r * w + c]);
        if g.area() == 0 {
            g.set(r0, c0, true);
        }
        out.push(CandidateMask::new(id as u32, level, rng.random(), g).unwrap());
    }
    out
}

/// Whole masks tiling the grid (random row and column cuts) plus their part
/// halves and subpart quarters. Returns the candidates and the tile count.
pub fn tiled_family(rng: &mut impl rand::Rng, h: usize, w: usize) -> (Vec<svp::superpixel::CandidateMask>, usize) {
    use svp::superpixel::{BinaryGrid, CandidateMask, Level};
    let cuts = |n: usize, rng: &mut dyn rand::RngCore| {
        let mut c: Vec<usize> = (1..n).filter(|_| rand::Rng::random_bool(rng, 0.25)).collect();
        c.insert(0, 0);
        c.push(n);
        c
    };
    let rows = cuts(h, rng);
    let cols = cuts(w, rng);
    let mut out = Vec::new();
    let mut push = |level, g: BinaryGrid, rng: &mut dyn rand::RngCore| {
        if g.area() > 0 {
            let id = out.len() as u32;
            out.push(CandidateMask::new(id, level, rand::Rng::random(rng), g).unwrap());
        }
    };
    let mut tiles = 0;
    for rw in rows.windows(2) {
        for cw in cols.windows(2) {
            let (r0, r1, c0, c1) = (rw[0], rw[1], cw[0], cw[1]);
            let rect = |a: usize, b: usize, c: usize, d: usize| BinaryGrid::from_fn(h, w, move |r, cc| r >= a && r < b && cc >= c && cc < d);
            let (mr, mc) = ((r0 + r1) / 2, (c0 + c1) / 2);
            push(Level::Whole, rect(r0, r1, c0, c1), rng);
            push(Level::Part, rect(r0, mr, c0, c1), rng);
            push(Level::Part, rect(mr, r1, c0, c1), rng);
            for (a, b) in [(r0, mr), (mr, r1)] {
                for (c, d) in [(c0, mc), (mc, c1)] {
                    push(Level::Subpart, rect(a, b, c, d), rng);
                }
            }
            tiles += 1;
        }
    }
    (out, tiles)
}
