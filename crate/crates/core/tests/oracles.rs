mod common;

use common::*;
use rand::Rng;
use svp::aggregator::{align_to_patches, pool_superpixels, scatter_sspe, ssa_forward, PatchAlignedSuperpixels, SsaMode, SsaParams};
use svp::harness::random_partition;
use svp::numcore::{
    mha_forward, mlp_forward, seeded_rng, sinusoidal_pe_2d, transformer_block, AttentionConfig, AttnMask, BlockParams,
    DenseArray, MhaParams, MlpParams, ParamStore, Tape,
};
use svp::projector::{
    avg_pool_tokens, fuse_svp_outputs, global_query_tokens, pixel_shuffle_tokens, svp_forward_plan, token_purity,
    GlobalQueryParams, SvpParams, SvpPlan, TokenSequence, TokenStats,
};
use svp::sspe::{
    bbox_mlp_sspe, encode_sspe, mask_mlp_sspe, BboxMlpParams, MaskMlpParams, SspeConfig, SspeEncoderParams, SspeModel,
};
use svp::superpixel::{filter_candidates, BinaryGrid, CandidateMask, Level};

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseArray {
    DenseArray::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Replaces every parameter (including zero-initialised biases and unit
/// layer-norm scales) by a random value so no term of the oracle is idle.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = seeded_rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

const TOL: f64 = 1e-12;

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = seeded_rng(7);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let p = MhaParams::new(&mut store, &mut rng, "a", 8).unwrap();
    randomize(&mut store, 70);
    let (q, k, v) = (random(&mut rng, 3, 8), random(&mut rng, 3, 8), random(&mut rng, 3, 8));
    let (qpe, kpe) = (random(&mut rng, 3, 8), random(&mut rng, 3, 8));
    let bias = DenseArray::from_fn(3, 3, |i, j| if (i + j) % 3 == 0 { -1e9 } else { 0.0 });

    let mut t = Tape::new();
    let vars = [&q, &k, &v, &qpe, &kpe].map(|a| t.constant(a.clone()));
    let plain = mha_forward(&mut t, &store, &p, &cfg, vars[0], vars[1], vars[2], None, None, AttnMask::Full).unwrap();
    let full = mha_forward(
        &mut t,
        &store,
        &p,
        &cfg,
        vars[0],
        vars[1],
        vars[2],
        Some(vars[3]),
        Some(vars[4]),
        AttnMask::Bias(&bias),
    )
    .unwrap();

    let want_plain = mha(&store, &p, 2, &mat(&q), &mat(&k), &mat(&v), None, None, None);
    let want_full = mha(&store, &p, 2, &mat(&q), &mat(&k), &mat(&v), Some(&mat(&qpe)), Some(&mat(&kpe)), Some(&mat(&bias)));
    assert!(rel_err(&mat(t.value(plain)), &want_plain) <= TOL);
    assert!(rel_err(&mat(t.value(full)), &want_full) <= TOL);
}

#[test]
fn attention_trivial_cases() {
    let mut rng = seeded_rng(1);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(4, 1).unwrap();
    let p = MhaParams::new(&mut store, &mut rng, "a", 4).unwrap();
    let mut t = Tape::new();
    let z = t.constant(DenseArray::zeros(&[2, 4]));
    let out = mha_forward(&mut t, &store, &p, &cfg, z, z, z, None, None, AttnMask::Full).unwrap();
    assert!(t.value(out).data().iter().all(|&x| x == 0.0));

    // Identity projections, zero biases, a query orthogonal to both keys:
    // equal logits, so the output is the mean of the value rows.
    let eye = DenseArray::from_fn(4, 4, |i, j| f64::from(u8::from(i == j)));
    for lin in [&p.q, &p.k, &p.v, &p.o] {
        *store.value_mut(lin.w) = eye.clone();
    }
    let mut t = Tape::new();
    let q = t.constant(DenseArray::from_vec(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
    let kv = t.constant(DenseArray::from_vec(vec![2, 4], vec![1.0, 2.0, 0.0, 0.0, 3.0, -2.0, 0.0, 0.0]).unwrap());
    let out = mha_forward(&mut t, &store, &p, &cfg, q, kv, kv, None, None, AttnMask::Full).unwrap();
    assert_eq!(t.value(out).data(), &[2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = seeded_rng(2);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(8, 4).unwrap();
    let p = MhaParams::new(&mut store, &mut rng, "a", 8).unwrap();
    let mut t = Tape::new();
    let q = t.constant(random(&mut rng, 5, 8));
    let k = t.constant(random(&mut rng, 7, 8));
    mha_forward(&mut t, &store, &p, &cfg, q, k, k, None, None, AttnMask::Full).unwrap();
    let node = t.attention_nodes()[0];
    let probs = t.attention_probs(node).unwrap();
    for row in probs.chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn block_matches_sublayer_composition() {
    let mut rng = seeded_rng(11);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let b = BlockParams::new(&mut store, &mut rng, "b", &cfg).unwrap();
    randomize(&mut store, 110);
    let (x, qpe, kv, kvpe) = (random(&mut rng, 2, 8), random(&mut rng, 2, 8), random(&mut rng, 4, 8), random(&mut rng, 4, 8));
    let mut t = Tape::new();
    let v = [&x, &qpe, &kv, &kvpe].map(|a| t.constant(a.clone()));
    let out =
        transformer_block(&mut t, &store, &b, &cfg, v[0], Some(v[1]), v[2], Some(v[3]), AttnMask::Full, AttnMask::Full).unwrap();
    let want = block(&store, &b, 2, cfg.ln_eps, &mat(&x), Some(&mat(&qpe)), &mat(&kv), Some(&mat(&kvpe)), None);
    assert!(rel_err(&mat(t.value(out)), &want) <= TOL);
}

#[test]
fn zero_block_is_identity() {
    let mut rng = seeded_rng(12);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let b = BlockParams::new(&mut store, &mut rng, "b", &cfg).unwrap();
    store.zero_values();
    let x = random(&mut rng, 3, 8);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(random(&mut rng, 5, 8));
    let out = transformer_block(&mut t, &store, &b, &cfg, xv, None, kv, None, AttnMask::Full, AttnMask::Full).unwrap();
    assert_eq!(t.value(out), &x);
}

#[test]
fn sinusoidal_table_matches_closed_form() {
    let got = mat(&sinusoidal_pe_2d(2, 3, 8).unwrap());
    let want = sinusoidal(2, 3, 8);
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((a - b).abs() <= 1e-15);
    }
    assert!(sinusoidal_pe_2d(2, 2, 6).is_err());
}

#[test]
fn mlp_matches_loop_oracle() {
    let mut rng = seeded_rng(3);
    let mut store = ParamStore::new();
    let p = MlpParams::new(&mut store, &mut rng, "m", [4, 8, 3]).unwrap();
    randomize(&mut store, 30);
    let x = random(&mut rng, 2, 4);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = mlp_forward(&mut t, &store, &p, xv).unwrap();
    assert!(rel_err(&mat(t.value(y)), &mlp(&store, &p, &mat(&x))) <= TOL);

    store.zero_values();
    let mut t = Tape::new();
    let xv = t.constant(x);
    let y = mlp_forward(&mut t, &store, &p, xv).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

fn encoder(store: &mut ParamStore, seed: u64, dm: usize, heads: usize, out: usize) -> SspeEncoderParams {
    let cfg = SspeConfig {
        model_dim: dm,
        heads,
        queries: 3,
        blocks: 2,
        out_dim: out,
    };
    SspeEncoderParams::new(store, &mut seeded_rng(seed), "sspe", cfg).unwrap()
}

#[test]
fn sspe_encoder_matches_reference_forward() {
    let mut store = ParamStore::new();
    let p = encoder(&mut store, 4, 8, 2, 6);
    randomize(&mut store, 40);
    let sp = random_partition(9, 4, 4, 3).unwrap();
    let mut t = Tape::new();
    let y = encode_sspe(&mut t, &store, &p, &sp).unwrap();
    let want = sspe(&store, &p, sp.labels(), 4, 4, 3);
    assert!(rel_err(&mat(t.value(y)), &want) <= TOL);
}

#[test]
fn sspe_separates_rotated_shapes() {
    let mut store = ParamStore::new();
    let p = encoder(&mut store, 5, 8, 2, 8);
    // An L-tromino and its quarter turn on a 4×4 grid.
    let l = |cells: &[(usize, usize)]| {
        let mut labels = vec![1u32; 16];
        for &(r, c) in cells {
            labels[r * 4 + c] = 0;
        }
        svp::superpixel::SuperpixelSet::from_labels(4, 4, 2, labels, None).unwrap()
    };
    let a = l(&[(0, 0), (1, 0), (2, 0), (2, 1)]);
    let b = l(&[(0, 3), (0, 2), (0, 1), (1, 1)]);
    let mut t = Tape::new();
    let va = encode_sspe(&mut t, &store, &p, &a).unwrap();
    let vb = encode_sspe(&mut t, &store, &p, &b).unwrap();
    let (ya, yb) = (mat(t.value(va)), mat(t.value(vb)));
    let diff: f64 = ya[0].iter().zip(&yb[0]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = ya[0].iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(diff / norm > 1e-3, "relative distance {}", diff / norm);
}

#[test]
fn box_and_mask_variants_match_oracles() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(5);
    let bp = BboxMlpParams::new(&mut store, &mut rng, "bbox", 6).unwrap();
    let mp = MaskMlpParams::new(&mut store, &mut rng, "mmlp", 4, 6).unwrap();
    randomize(&mut store, 50);
    let boxes: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let (c, d): (f64, f64) = (rng.random(), rng.random());
            [a.min(b), c.min(d), a.max(b), c.max(d)]
        })
        .collect();
    let mut t = Tape::new();
    let y = bbox_mlp_sspe(&mut t, &store, &bp, &boxes).unwrap();
    let x: Mat = boxes.iter().map(|b| b.to_vec()).collect();
    assert!(rel_err(&mat(t.value(y)), &mlp(&store, &bp.mlp, &x)) <= TOL);
    assert!(bbox_mlp_sspe(&mut t, &store, &bp, &[[0.5, 0.0, 0.2, 1.0]]).is_err());
    assert!(bbox_mlp_sspe(&mut t, &store, &bp, &[[0.0, 0.0, 1.5, 1.0]]).is_err());

    let sp = random_partition(6, 9, 7, 4).unwrap();
    let y = mask_mlp_sspe(&mut t, &store, &mp, &sp).unwrap();
    let rows: Vec<usize> = (0..4).map(|i| ((2 * i + 1) * 9) / 8).collect();
    let cols: Vec<usize> = (0..4).map(|j| ((2 * j + 1) * 7) / 8).collect();
    let x: Mat = (0..4u32)
        .map(|k| {
            let mut v = Vec::new();
            for &r in &rows {
                for &c in &cols {
                    v.push(f64::from(u8::from(sp.labels()[r * 7 + c] == k)));
                }
            }
            v
        })
        .collect();
    assert!(rel_err(&mat(t.value(y)), &mlp(&store, &mp.mlp, &x)) <= TOL);
}

fn aligned(seed: u64, h: usize, w: usize, m: usize) -> PatchAlignedSuperpixels {
    align_to_patches(&random_partition(seed, h, w, m).unwrap(), h, w).unwrap()
}

#[test]
fn pool_and_scatter_match_loops() {
    let mut rng = seeded_rng(8);
    let s = aligned(8, 6, 6, 5);
    let f = random(&mut rng, 36, 4);
    let p = random(&mut rng, 5, 4);
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let pv = t.constant(p.clone());
    let pooled = pool_superpixels(&mut t, &s, fv).unwrap();
    let scattered = scatter_sspe(&mut t, &s, pv).unwrap();
    assert!(rel_err(&mat(t.value(pooled)), &pool(s.labels(), 5, &mat(&f))) <= TOL);
    assert!(rel_err(&mat(t.value(scattered)), &scatter(s.labels(), &mat(&p))) <= 1e-15);
}

#[test]
fn alignment_matches_nearest_lookup() {
    for seed in 0..20 {
        let sp = random_partition(seed, 10, 14, 6).unwrap();
        let a = align_to_patches(&sp, 5, 7).unwrap();
        for r in 0..5 {
            for c in 0..7 {
                let src = sp.labels()[(2 * r + 1) * 14 + 2 * c + 1];
                let got = a.kept()[a.labels()[r * 7 + c]];
                assert_eq!(got as u32, src, "seed {seed} patch ({r},{c})");
            }
        }
    }
}

#[test]
fn aggregator_matches_reference_forward_in_every_mode() {
    for mode in SsaMode::ALL {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(13);
        let p = SsaParams::new(&mut store, &mut rng, "ssa", 8, 2, mode).unwrap();
        randomize(&mut store, 130);
        let s = aligned(3, 3, 3, 2);
        let f = random(&mut rng, 9, 8);
        let psp = random(&mut rng, 2, 8);
        let ep = pool(s.labels(), 2, &mat(&f));
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let pv = t.constant(psp.clone());
        let ev = t.constant(to_dense(&ep));
        let y = ssa_forward(&mut t, &store, &p, ev, fv, Some(pv), &s).unwrap();
        let want = ssa(&store, &p, &ep, &mat(&f), Some(&mat(&psp)), s.labels(), 3, 3);
        assert!(rel_err(&mat(t.value(y)), &want) <= TOL, "{mode}");
    }
}

fn svp_setup(seed: u64) -> (ParamStore, SvpParams, SvpPlan, DenseArray) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let enc = encoder(&mut store, seed + 1, 8, 2, 8);
    let params = SvpParams::new(&mut store, &mut rng, SspeModel::Attention(enc), 2, SsaMode::ShareSspe, 5).unwrap();
    randomize(&mut store, seed + 2);
    let sp = random_partition(seed, 8, 8, 4).unwrap();
    let plan = SvpPlan::from_set(sp, (4, 4), 4.0 * 20.0).unwrap();
    let f = random(&mut rng, 16, 8);
    (store, params, plan, f)
}

#[test]
fn projector_matches_reference_forward() {
    let (store, mut params, plan, f) = svp_setup(17);
    for (sspe_on, ssa_on) in [(true, true), (false, true), (true, false), (false, false)] {
        params.use_sspe = sspe_on;
        params.use_ssa = ssa_on;
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let out = svp_forward_plan(&mut t, &store, &params, fv, &plan).unwrap();
        let want = svp(&store, &params, &mat(&f), &plan);
        assert!(rel_err(&mat(t.value(out.tokens)), &want) <= TOL, "sspe {sspe_on} ssa {ssa_on}");
    }
}

#[test]
fn baselines_match_loop_oracles() {
    let mut rng = seeded_rng(19);
    let mut store = ParamStore::new();
    let (h, w, d) = (4, 6, 4);
    let shuffle = MlpParams::new(&mut store, &mut rng, "ps", [4 * d, 8, 3]).unwrap();
    let pool_mlp = MlpParams::new(&mut store, &mut rng, "ap", [d, 8, 3]).unwrap();
    let gq = GlobalQueryParams::new(&mut store, &mut rng, "gq", 3, d, 2, 3).unwrap();
    randomize(&mut store, 190);
    let f = random(&mut rng, h * w, d);
    let fm = mat(&f);
    let mut t = Tape::new();
    let fv = t.constant(f.clone());

    let got = pixel_shuffle_tokens(&mut t, &store, fv, h, w, 2, &shuffle).unwrap();
    let mut stacked = Mat::new();
    for wy in 0..h / 2 {
        for wx in 0..w / 2 {
            let mut row = Vec::new();
            for dy in 0..2 {
                for dx in 0..2 {
                    row.extend_from_slice(&fm[(2 * wy + dy) * w + 2 * wx + dx]);
                }
            }
            stacked.push(row);
        }
    }
    assert!(rel_err(&mat(t.value(got)), &mlp(&store, &shuffle, &stacked)) <= TOL);

    let got = avg_pool_tokens(&mut t, &store, fv, h, w, 3, 4, &pool_mlp).unwrap();
    let mut means = Mat::new();
    for i in 0..3 {
        let (r0, r1) = (i * h / 3, ((i + 1) * h).div_ceil(3));
        for j in 0..4 {
            let (c0, c1) = (j * w / 4, ((j + 1) * w).div_ceil(4));
            let mut acc = vec![0.0; d];
            for r in r0..r1 {
                for c in c0..c1 {
                    for k in 0..d {
                        acc[k] += fm[r * w + c][k];
                    }
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            means.push(acc.into_iter().map(|v| v / n).collect());
        }
    }
    assert!(rel_err(&mat(t.value(got)), &mlp(&store, &pool_mlp, &means)) <= TOL);

    let got = global_query_tokens(&mut t, &store, &gq, fv, h, w).unwrap();
    let pe = sinusoidal(h, w, d);
    let mut x = mat(store.value(gq.queries));
    for b in &gq.blocks {
        x = block(&store, b, 2, gq.cfg.ln_eps, &x, None, &fm, Some(&pe), None);
    }
    assert!(rel_err(&mat(t.value(got)), &mlp(&store, &gq.mlp, &x)) <= TOL);
}

#[test]
fn fusion_matches_loop_sum() {
    let mut rng = seeded_rng(23);
    let seq = |rng: &mut svp::numcore::Rng| TokenSequence {
        tokens: random(rng, 3, 4),
        order: vec![2, 0, 1],
        stats: TokenStats::new(vec![1, 2, 3], 576),
    };
    let (a, b) = (seq(&mut rng), seq(&mut rng));
    let fused = fuse_svp_outputs(&[a.clone(), b.clone()], &[0.3, -1.7]).unwrap();
    let want: Mat = (0..3)
        .map(|i| (0..4).map(|j| 0.3 * a.tokens.get(i, j) - 1.7 * b.tokens.get(i, j)).collect())
        .collect();
    assert!(rel_err(&mat(&fused.tokens), &want) <= TOL);
    assert_eq!(fuse_svp_outputs(&[a.clone()], &[1.0]).unwrap().tokens, a.tokens);
    let same = fuse_svp_outputs(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap();
    assert_eq!(same.tokens, a.tokens);
    let mut other = b;
    other.order = vec![0, 1, 2];
    assert!(fuse_svp_outputs(&[a, other], &[0.5, 0.5]).is_err());
}

#[test]
fn purity_matches_brute_force_count() {
    let mut rng = seeded_rng(29);
    for _ in 0..20 {
        let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
        let supports: Vec<Vec<usize>> = (0..5).map(|k| (k * 6..k * 6 + 6).collect()).collect();
        let got = token_purity(&supports, &labels).unwrap();
        for (s, g) in supports.iter().zip(&got) {
            let best = (0..4).map(|o| s.iter().filter(|&&p| labels[p] == o).count()).max().unwrap();
            assert_eq!(*g, best as f64 / s.len() as f64);
        }
    }
    assert_eq!(token_purity(&[vec![0, 1, 2, 3]], &[1, 1, 2, 2]).unwrap(), vec![0.5]);
    assert!(token_purity(&[vec![]], &[0]).is_err());
}

#[test]
fn filter_matches_rule_replay_on_nested_families() {
    let mut rng = seeded_rng(31);
    let (h, w) = (16, 16);
    for _ in 0..200 {
        let mut cands = Vec::new();
        let mut raw = Vec::new();
        let n_whole = rng.random_range(1..5);
        for _ in 0..n_whole {
            let (r0, c0) = (rng.random_range(0..12), rng.random_range(0..12));
            let (r1, c1) = (rng.random_range(r0 + 2..=16), rng.random_range(c0 + 2..=16));
            let rect = |a: usize, b: usize, c: usize, d: usize| BinaryGrid::from_fn(h, w, |r, cc| r >= a && r < b && cc >= c && cc < d);
            let mid_r = (r0 + r1) / 2;
            let mid_c = (c0 + c1) / 2;
            let family = [
                (Level::Whole, rect(r0, r1, c0, c1)),
                (Level::Part, rect(r0, mid_r, c0, c1)),
                (Level::Part, rect(mid_r, r1, c0, c1)),
                (Level::Subpart, rect(r0, mid_r, c0, mid_c)),
                (Level::Subpart, rect(mid_r, r1, mid_c, c1)),
            ];
            for (level, g) in family {
                if g.area() == 0 || rng.random_bool(0.2) {
                    continue;
                }
                let id = cands.len() as u32;
                let score: f64 = rng.random();
                let code = match level {
                    Level::Whole => 0,
                    Level::Part => 1,
                    Level::Subpart => 2,
                };
                raw.push((id, code, score, g.data().to_vec()));
                cands.push(CandidateMask::new(id, level, score, g).unwrap());
            }
        }
        let theta = rng.random_range(0.1..0.9);
        let got = filter_candidates(&cands, h, w, theta).unwrap();
        assert_eq!(got.labels(), filter_replay(&raw, h, w, theta).as_slice());
    }
}

#[test]
fn geometry_matches_pixel_scan() {
    for seed in 0..10 {
        let sp = random_partition(seed, 7, 9, 5).unwrap();
        for i in 0..5 {
            let px: Vec<(usize, usize)> = (0..63).filter(|&p| sp.labels()[p] == i as u32).map(|p| (p / 9, p % 9)).collect();
            let b = sp.bbox_of(i).unwrap();
            assert_eq!(b.row_min, px.iter().map(|p| p.0).min().unwrap());
            assert_eq!(b.row_max, px.iter().map(|p| p.0).max().unwrap());
            assert_eq!(b.col_min, px.iter().map(|p| p.1).min().unwrap());
            assert_eq!(b.col_max, px.iter().map(|p| p.1).max().unwrap());
            let ((cr, cc), a) = sp.centroid_area(i).unwrap();
            assert_eq!(a, px.len());
            let mr = px.iter().map(|p| p.0 as f64).sum::<f64>() / a as f64;
            let mc = px.iter().map(|p| p.1 as f64).sum::<f64>() / a as f64;
            assert!((cr - mr).abs() < 1e-12 && (cc - mc).abs() < 1e-12);
        }
        assert!(sp.bbox_of(5).is_err());
    }
}
