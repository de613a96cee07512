//! Corpus benchmark: token counts, compression and region purity of SVP and
//! the fixed-budget baselines over seeded synthetic scenes.

use std::fmt;

use super::scene::{corpus_scene_spec, gen_scene, Scene};
use super::train::derive_seed;
use crate::aggregator::SsaMode;
use crate::numcore::{seeded_rng, MlpParams, ParamStore, Tape};
use crate::projector::{
    avg_pool_tokens, avg_pool_windows, global_query_tokens, pixel_shuffle_tokens, pixel_shuffle_windows,
    svp_forward_plan, token_purity, GlobalQueryParams, SspeVariant, SvpModelConfig, SvpParams, SvpPlan,
    REFERENCE_TOKEN_COUNT,
};
use crate::sspe::SspeConfig;
use crate::{Error, Result};

const CORPUS_STREAM: u64 = 11;

/// Scene `index` of the corpus drawn under `corpus_seed`.
pub fn corpus_scene(corpus_seed: u64, index: usize) -> Result<Scene> {
    gen_scene(derive_seed(corpus_seed, CORPUS_STREAM, index as u64), &corpus_scene_spec(index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchProjector {
    Svp,
    PixelShuffle,
    AvgPool,
    GlobalQuery,
}

impl BenchProjector {
    pub const ALL: [BenchProjector; 4] = [
        BenchProjector::Svp,
        BenchProjector::PixelShuffle,
        BenchProjector::AvgPool,
        BenchProjector::GlobalQuery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchProjector::Svp => "svp",
            BenchProjector::PixelShuffle => "pixel-shuffle",
            BenchProjector::AvgPool => "avg-pool",
            BenchProjector::GlobalQuery => "global-query",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown projector {s:?}")))
    }
}

impl fmt::Display for BenchProjector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Projector settings for the benchmark (randomly initialised weights:
/// counts and purity do not depend on training).
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub model: SvpModelConfig,
    pub model_seed: u64,
    pub shuffle_factor: usize,
    pub pool_side: usize,
    pub global_queries: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: SvpModelConfig {
                dim: 16,
                out_dim: 16,
                sspe_variant: SspeVariant::Attention,
                sspe: SspeConfig {
                    model_dim: 16,
                    heads: 2,
                    queries: 4,
                    blocks: 3,
                    out_dim: 16,
                },
                ssa_heads: 4,
                ssa_mode: SsaMode::ShareSspe,
                // The resized grid holds P/M pixels, so P must exceed M²
                // for the busiest corpus scenes.
                target_pixels: 40.0 * 24.0 * 24.0,
                ..SvpModelConfig::default()
            },
            model_seed: 0,
            shuffle_factor: 4,
            pool_side: 6,
            global_queries: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub planted: usize,
    /// Planted objects plus distractors.
    pub objects: usize,
    pub tokens: usize,
    pub compression: f64,
    /// Mean (over tokens) majority-label share of each token's support.
    pub purity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub projector: BenchProjector,
    pub corpus_seed: u64,
    pub rows: Vec<BenchRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Average ranks (ties share the mean of their positions), 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks); `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(rx.iter().copied()), mean(ry.iter().copied()));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

impl BenchReport {
    pub fn mean_tokens(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.tokens as f64))
    }

    pub fn mean_compression(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.compression))
    }

    pub fn mean_purity(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.purity))
    }

    /// Token count against planted object count.
    pub fn spearman(&self) -> f64 {
        let t: Vec<f64> = self.rows.iter().map(|r| r.tokens as f64).collect();
        let k: Vec<f64> = self.rows.iter().map(|r| r.planted as f64).collect();
        spearman(&t, &k)
    }

    pub fn constant_count(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].tokens == w[1].tokens)
    }

    /// `key=value` report: header, one block per scene, then summary lines.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "projector={}\ncorpus_seed={}\nscenes={}\nreference_count={REFERENCE_TOKEN_COUNT}\n",
            self.projector,
            self.corpus_seed,
            self.rows.len()
        );
        for (i, r) in self.rows.iter().enumerate() {
            s += &format!(
                "scene.{i}.planted={}\nscene.{i}.objects={}\nscene.{i}.tokens={}\nscene.{i}.compression={}\nscene.{i}.purity={}\n",
                r.planted, r.objects, r.tokens, r.compression, r.purity
            );
        }
        s += &format!(
            "mean_tokens={}\nmean_compression={}\nmean_purity={}\nspearman_tokens_planted={}\nconstant_count={}\n",
            self.mean_tokens(),
            self.mean_compression(),
            self.mean_purity(),
            self.spearman(),
            self.constant_count()
        );
        s
    }
}

enum Built {
    Svp(SvpParams),
    Mlp(MlpParams),
    Global(GlobalQueryParams),
}

/// Runs `projector` over scenes `0..scenes` of the corpus.
pub fn run_bench(projector: BenchProjector, corpus_seed: u64, scenes: usize, cfg: &BenchConfig) -> Result<BenchReport> {
    if scenes == 0 {
        return Err(Error::invalid("benchmark needs at least one scene"));
    }
    let d = cfg.model.dim;
    let r = cfg.shuffle_factor;
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(cfg.model_seed);
    let built = match projector {
        BenchProjector::Svp => Built::Svp(cfg.model.build(&mut store, &mut rng)?),
        BenchProjector::PixelShuffle => {
            Built::Mlp(MlpParams::new(&mut store, &mut rng, "proj", [r * r * d, 4 * d, cfg.model.out_dim])?)
        }
        BenchProjector::AvgPool => Built::Mlp(MlpParams::new(&mut store, &mut rng, "proj", [d, 4 * d, cfg.model.out_dim])?),
        BenchProjector::GlobalQuery => Built::Global(GlobalQueryParams::new(
            &mut store,
            &mut rng,
            "gq",
            cfg.global_queries,
            d,
            cfg.model.ssa_heads,
            cfg.model.out_dim,
        )?),
    };
    let mut rows = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let scene = corpus_scene(corpus_seed, i)?;
        if scene.spec.dim != d {
            return Err(Error::invalid(format!("corpus width {} differs from projector width {d}", scene.spec.dim)));
        }
        let (h, w) = (scene.grid.height(), scene.grid.width());
        let mut tape = Tape::new();
        let f = tape.constant(scene.grid.features().clone());
        let (tokens, supports) = match &built {
            Built::Svp(p) => {
                let plan = SvpPlan::build(&scene.candidates, scene.mask_dims(), (h, w), &cfg.model.svp_config())?;
                let out = svp_forward_plan(&mut tape, &store, p, f, &plan)?;
                (out.tokens, plan.aligned.supports())
            }
            Built::Mlp(m) if projector == BenchProjector::PixelShuffle => {
                (pixel_shuffle_tokens(&mut tape, &store, f, h, w, r, m)?, pixel_shuffle_windows(h, w, r)?)
            }
            Built::Mlp(m) => {
                let s = cfg.pool_side;
                (avg_pool_tokens(&mut tape, &store, f, h, w, s, s, m)?, avg_pool_windows(h, w, s, s)?)
            }
            Built::Global(g) => {
                let t = global_query_tokens(&mut tape, &store, g, f, h, w)?;
                (t, vec![(0..h * w).collect(); cfg.global_queries])
            }
        };
        let m = tape.value(tokens).rows();
        if !tape.value(tokens).is_finite() {
            return Err(Error::NonFinite(format!("{projector} tokens on scene {i}")));
        }
        let purity = token_purity(&supports, &scene.patch_labels)?;
        rows.push(BenchRow {
            planted: scene.planted(),
            objects: scene.objects.len(),
            tokens: m,
            compression: 1.0 - m as f64 / REFERENCE_TOKEN_COUNT as f64,
            purity: mean(purity.into_iter()),
        });
    }
    Ok(BenchReport {
        projector,
        corpus_seed,
        rows,
    })
}
