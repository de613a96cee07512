//! Seeded finite-difference gradient checks of the trainable components at
//! toy dimensions.

use std::fmt;

use rand::Rng;

use crate::aggregator::{align_to_patches, pool_superpixels, ssa_forward, SsaMode, SsaParams};
use crate::numcore::{grad_check, mlp_forward, seeded_rng, DenseArray, GradCheckReport, MlpParams, ParamStore, Tape, Var};
use crate::projector::{svp_forward_plan, SvpParams, SvpPlan};
use crate::sspe::{encode_sspe, SspeConfig, SspeEncoderParams, SspeModel};
use crate::superpixel::SuperpixelSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    Sspe,
    Ssa,
    Svp,
    Mlp,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 4] = [CheckTarget::Sspe, CheckTarget::Ssa, CheckTarget::Svp, CheckTarget::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckTarget::Sspe => "sspe",
            CheckTarget::Ssa => "ssa",
            CheckTarget::Svp => "svp",
            CheckTarget::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown gradcheck target {s:?}")))
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Nearest-seed (Manhattan, ties to the lower seed) partition of an
/// `h × w` grid into `m` non-empty regions.
pub fn random_partition(seed: u64, h: usize, w: usize, m: usize) -> Result<SuperpixelSet> {
    if m == 0 || m > h * w {
        return Err(Error::invalid(format!("cannot cut {h}×{w} into {m} regions")));
    }
    let mut rng = seeded_rng(seed);
    let mut seeds: Vec<usize> = Vec::with_capacity(m);
    while seeds.len() < m {
        let p = rng.random_range(0..h * w);
        if !seeds.contains(&p) {
            seeds.push(p);
        }
    }
    let labels = (0..h * w)
        .map(|p| {
            let (r, c) = (p / w, p % w);
            let dist = |s: usize| r.abs_diff(s / w) + c.abs_diff(s % w);
            (0..m).min_by_key(|&k| (dist(seeds[k]), k)).unwrap() as u32
        })
        .collect();
    SuperpixelSet::from_labels(h, w, m, labels, None)
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: &DenseArray) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w);
    tape.sum(p)
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseArray {
    DenseArray::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// One report per checked configuration (three SSA modes for `Ssa`).
pub fn run_gradcheck(target: CheckTarget, eps: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = seeded_rng(seed);
    match target {
        CheckTarget::Mlp => {
            let mut store = ParamStore::new();
            let mlp = MlpParams::new(&mut store, &mut rng, "mlp", [4, 8, 3])?;
            let x = random_matrix(&mut rng, 5, 4);
            let r = random_matrix(&mut rng, 5, 3);
            let rep = grad_check(&mut store, eps, |t, s| {
                let xv = t.constant(x.clone());
                let y = mlp_forward(t, s, &mlp, xv)?;
                Ok(weighted_sum(t, y, &r))
            })?;
            Ok(vec![("mlp".into(), rep)])
        }
        CheckTarget::Sspe => {
            let mut store = ParamStore::new();
            let cfg = SspeConfig {
                model_dim: 8,
                heads: 2,
                queries: 2,
                blocks: 2,
                out_dim: 6,
            };
            let p = SspeEncoderParams::new(&mut store, &mut rng, "sspe", cfg)?;
            let sp = random_partition(seed, 5, 6, 3)?;
            let r = random_matrix(&mut rng, 3, 6);
            let rep = grad_check(&mut store, eps, |t, s| {
                let y = encode_sspe(t, s, &p, &sp)?;
                Ok(weighted_sum(t, y, &r))
            })?;
            Ok(vec![("sspe".into(), rep)])
        }
        CheckTarget::Ssa => {
            let (h, w, d, m) = (3, 4, 8, 4);
            let sp = random_partition(seed, h, w, m)?;
            let s_al = align_to_patches(&sp, h, w)?;
            let mut out = Vec::new();
            for mode in SsaMode::ALL {
                let mut store = ParamStore::new();
                let mut rng = seeded_rng(seed ^ 0x55);
                let p = SsaParams::new(&mut store, &mut rng, "ssa", d, 2, mode)?;
                let f = store.add("input.f", random_matrix(&mut rng, h * w, d), true)?;
                let psp = store.add("input.p_sp", random_matrix(&mut rng, m, d), true)?;
                let r = random_matrix(&mut rng, m, d);
                let rep = grad_check(&mut store, eps, |t, s| {
                    let fv = t.param(s, f);
                    let pv = t.param(s, psp);
                    let pooled = pool_superpixels(t, &s_al, fv)?;
                    let y = ssa_forward(t, s, &p, pooled, fv, Some(pv), &s_al)?;
                    Ok(weighted_sum(t, y, &r))
                })?;
                out.push((format!("ssa.{mode}"), rep));
            }
            Ok(out)
        }
        CheckTarget::Svp => {
            let (h, w, d) = (3, 3, 8);
            let sp = random_partition(seed, 6, 6, 4)?;
            let plan = SvpPlan::from_set(sp, (h, w), 4.0 * 9.0)?;
            let mut store = ParamStore::new();
            let cfg = SspeConfig {
                model_dim: 8,
                heads: 2,
                queries: 2,
                blocks: 1,
                out_dim: d,
            };
            let sspe = SspeModel::Attention(SspeEncoderParams::new(&mut store, &mut rng, "sspe", cfg)?);
            let params = SvpParams::new(&mut store, &mut rng, sspe, 2, SsaMode::ShareSspe, 5)?;
            let f = store.add("input.f", random_matrix(&mut rng, h * w, d), true)?;
            let r = random_matrix(&mut rng, plan.len(), 5);
            let rep = grad_check(&mut store, eps, |t, s| {
                let fv = t.param(s, f);
                let out = svp_forward_plan(t, s, &params, fv, &plan)?;
                Ok(weighted_sum(t, out.tokens, &r))
            })?;
            Ok(vec![("svp".into(), rep)])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_are_complete() {
        for seed in 0..20 {
            let sp = random_partition(seed, 5, 4, 6).unwrap();
            assert_eq!(sp.len(), 6);
            assert!(sp.areas().iter().all(|&a| a > 0));
        }
        assert!(random_partition(0, 2, 2, 5).is_err());
    }

    #[test]
    fn mlp_check_is_tight() {
        let r = run_gradcheck(CheckTarget::Mlp, 1e-4, 1).unwrap();
        assert!(r[0].1.max_rel_error <= 1e-6, "{:?}", r[0].1);
    }
}
