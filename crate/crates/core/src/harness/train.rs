//! Toy referring-selection task: a bilinear head scores each visual token
//! against a query vector and is trained jointly with the projector by
//! momentum SGD on the token cross-entropy.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::query::{gen_task, target_token, QueryKind, ReferringQuery};
use super::scene::{Scene, SceneSpec};
use crate::aggregator::SsaMode;
use crate::numcore::{seeded_rng, DenseArray, Dtype, ParamId, ParamStore, Tape, Var};
use crate::projector::{
    load_svp, read_model_file, svp_forward_plan, write_model_file, KvMap, SspeVariant, SvpModelConfig,
    SvpParams, SvpPlan,
};
use crate::sspe::SspeConfig;
use crate::{Error, Result};

/// Independent seed streams.
pub const TRAIN_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;
pub const STEP_STREAM: u64 = 3;

/// Deterministic `index`-th seed of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(stream);
    r.set_word_pos(u128::from(index) * 2);
    r.next_u64()
}

/// Projector settings as they appear in a training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub out_dim: usize,
    pub sspe_variant: String,
    pub sspe_model_dim: usize,
    pub sspe_heads: usize,
    pub sspe_queries: usize,
    pub sspe_blocks: usize,
    pub mask_side: usize,
    pub ssa_heads: usize,
    pub ssa_mode: String,
    pub use_sspe: bool,
    pub use_ssa: bool,
    pub theta: f64,
    pub target_pixels: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: 16,
            out_dim: 16,
            sspe_variant: SspeVariant::Attention.as_str().into(),
            sspe_model_dim: 32,
            sspe_heads: 4,
            sspe_queries: 4,
            sspe_blocks: 3,
            mask_side: 8,
            ssa_heads: 4,
            ssa_mode: SsaMode::ShareSspe.as_str().into(),
            use_sspe: true,
            use_ssa: true,
            theta: crate::superpixel::DEFAULT_OVERLAP_THRESHOLD,
            target_pixels: 400.0,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> Result<SvpModelConfig> {
        let field = |f: &str, e: Error| Error::format("config", format!("model.{f}"), e.to_string());
        let cfg = SvpModelConfig {
            dim: self.dim,
            out_dim: self.out_dim,
            sspe_variant: self.sspe_variant.parse::<SspeVariant>().map_err(|e| field("sspe_variant", e))?,
            sspe: SspeConfig {
                model_dim: self.sspe_model_dim,
                heads: self.sspe_heads,
                queries: self.sspe_queries,
                blocks: self.sspe_blocks,
                out_dim: self.dim,
            },
            mask_side: self.mask_side,
            ssa_heads: self.ssa_heads,
            ssa_mode: SsaMode::parse(&self.ssa_mode).map_err(|e| field("ssa_mode", e))?,
            use_sspe: self.use_sspe,
            use_ssa: self.use_ssa,
            theta: self.theta,
            target_pixels: self.target_pixels,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a toy training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of steps run with SSPE disabled before joint training.
    pub sspe_warmup: f64,
    /// Size of the fixed pool of training tasks.
    pub train_tasks: usize,
    /// Rescales the batch gradient to at most this global L2 norm; 0 disables.
    pub clip_norm: f64,
    /// Reshuffle superpixel order for every sample.
    pub shuffle: bool,
    /// Query kinds in the training stream, cycled in this order.
    pub kinds: Vec<String>,
    pub model: ModelSection,
    pub scene: SceneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch: 8,
            lr: 1e-2,
            momentum: 0.9,
            sspe_warmup: 0.4,
            train_tasks: 1000,
            clip_norm: 1.0,
            shuffle: true,
            kinds: QueryKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            model: ModelSection::default(),
            scene: SceneSpec::default(),
        }
    }
}

/// Maps a TOML error to the key on the offending line.
fn toml_field(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    if let Some(span) = e.span() {
        let start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
        let line = text[start..].lines().next().unwrap_or("");
        if let Some((k, _)) = line.split_once('=') {
            return k.trim().to_string();
        }
    }
    "toml".to_string()
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::format("config", toml_field(text, &e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::format("config", f, m));
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.sspe_warmup) {
            return bad("sspe_warmup", "must lie in [0, 1]");
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm", "must be a non-negative number");
        }
        if self.kinds.is_empty() {
            return bad("kinds", "need at least one query kind");
        }
        for k in &self.kinds {
            QueryKind::parse(k).map_err(|e| Error::format("config", "kinds", e.to_string()))?;
        }
        if self.train_tasks == 0 {
            return bad("train_tasks", "must be positive");
        }
        self.scene.validate()?;
        let m = self.model.to_model_config()?;
        if m.dim != self.scene.dim {
            return bad("model.dim", "must equal scene.dim");
        }
        Ok(())
    }

    /// Steps run with SSPE off.
    pub fn warmup_steps(&self) -> usize {
        if self.model.use_sspe {
            (self.sspe_warmup * self.steps as f64).round() as usize
        } else {
            0
        }
    }
}

/// `logit_i = t_iᵀ W q` for each token row `t_i`.
#[derive(Clone, Copy, Debug)]
pub struct SelectionHead {
    pub w: ParamId,
    pub query_dim: usize,
}

impl SelectionHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, token_dim: usize, query_dim: usize) -> Result<Self> {
        let w = store.add_xavier("head.w", &[token_dim, query_dim], query_dim, token_dim, rng)?;
        Ok(Self { w, query_dim })
    }

    /// `M × 1` logits.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, query: &[f64]) -> Result<Var> {
        if query.len() != self.query_dim {
            return Err(Error::shape(format!(
                "query vector has {} entries, head expects {}",
                query.len(),
                self.query_dim
            )));
        }
        let w = tape.param(store, self.w);
        let q = tape.constant(DenseArray::from_vec(vec![query.len(), 1], query.to_vec())?);
        let wq = tape.matmul(w, q);
        Ok(tape.matmul(tokens, wq))
    }
}

/// Projector plus selection head.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub model: SvpModelConfig,
    pub scene: SceneSpec,
    pub store: ParamStore,
    pub svp: SvpParams,
    pub head: SelectionHead,
}

/// A pre-planned training or evaluation example.
#[derive(Clone, Debug)]
pub struct TaskSample {
    pub scene: Scene,
    pub query: ReferringQuery,
    pub plan: SvpPlan,
    pub query_vec: Vec<f64>,
    pub target: usize,
}

impl TaskSample {
    pub fn new(seed: u64, kind: QueryKind, spec: &SceneSpec, model: &SvpModelConfig) -> Result<Self> {
        let (scene, query) = gen_task(seed, kind, spec)?;
        let plan = SvpPlan::build(
            &scene.candidates,
            scene.mask_dims(),
            (spec.grid_h, spec.grid_w),
            &model.svp_config(),
        )?;
        let target = target_token(&scene, &plan, query.target)?;
        let query_vec = query.encode(spec);
        Ok(Self {
            scene,
            query,
            plan,
            query_vec,
            target,
        })
    }

    /// Same example with its superpixels reordered.
    pub fn shuffled(&self, seed: u64) -> Result<Self> {
        let plan = self.plan.shuffled(seed)?;
        let target = target_token(&self.scene, &plan, self.query.target)?;
        Ok(Self {
            plan,
            target,
            ..self.clone()
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.plan.len()
    }
}

impl ToyModel {
    pub fn new(model: SvpModelConfig, scene: SceneSpec, seed: u64) -> Result<Self> {
        model.validate()?;
        scene.validate()?;
        if model.dim != scene.dim {
            return Err(Error::invalid(format!(
                "projector width {} differs from scene embedding width {}",
                model.dim, scene.dim
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let svp = model.build(&mut store, &mut rng)?;
        let head = SelectionHead::new(&mut store, &mut rng, model.out_dim, ReferringQuery::encoding_dim(&scene))?;
        Ok(Self {
            model,
            scene,
            store,
            svp,
            head,
        })
    }

    /// Logits for one example (`use_sspe` overrides the configured flag).
    pub fn forward(&self, tape: &mut Tape, sample: &TaskSample, use_sspe: bool) -> Result<Var> {
        let params = SvpParams {
            use_sspe: use_sspe && self.svp.use_sspe,
            ..self.svp.clone()
        };
        let f = tape.constant(sample.scene.grid.features().clone());
        let out = svp_forward_plan(tape, &self.store, &params, f, &sample.plan)?;
        self.head.logits(tape, &self.store, out.tokens, &sample.query_vec)
    }

    /// Cross-entropy loss of one example.
    pub fn loss(&self, tape: &mut Tape, sample: &TaskSample, use_sspe: bool) -> Result<Var> {
        let logits = self.forward(tape, sample, use_sspe)?;
        Ok(tape.cross_entropy(logits, sample.target))
    }

    /// Index of the highest-scoring token.
    pub fn predict(&self, sample: &TaskSample) -> Result<usize> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, sample, true)?;
        let v = tape.value(logits).data();
        Ok((0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b }))
    }

    fn kv(&self) -> KvMap {
        let mut kv = self.model.to_kv();
        let s = &self.scene;
        for (k, v) in [
            ("grid_h", s.grid_h.to_string()),
            ("grid_w", s.grid_w.to_string()),
            ("mask_scale", s.mask_scale.to_string()),
            ("dim", s.dim.to_string()),
            ("categories", s.categories.to_string()),
            ("attributes", s.attributes.to_string()),
            ("objects", s.objects.to_string()),
            ("min_side", s.min_side.to_string()),
            ("max_side", s.max_side.to_string()),
            ("clutter_min", s.clutter_min.to_string()),
            ("clutter_max", s.clutter_max.to_string()),
            ("spurious", s.spurious.to_string()),
            ("noise", s.noise.to_string()),
            ("bleed", s.bleed.to_string()),
        ] {
            kv.insert(format!("scene.{k}"), v);
        }
        kv
    }

    pub fn write_to(&self, w: &mut impl Write, dtype: Dtype) -> Result<()> {
        write_model_file(w, &self.kv(), &self.store, dtype)
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let (kv, stored, _) = read_model_file(r)?;
        let get = |k: &str| -> Result<&str> {
            kv.get(&format!("scene.{k}"))
                .map(String::as_str)
                .ok_or_else(|| Error::format("model file", format!("scene.{k}"), "missing"))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format("model file", format!("scene.{k}"), "not an integer"))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format("model file", format!("scene.{k}"), "not a number"))
        };
        let scene = SceneSpec {
            grid_h: num("grid_h")?,
            grid_w: num("grid_w")?,
            mask_scale: num("mask_scale")?,
            dim: num("dim")?,
            categories: num("categories")?,
            attributes: num("attributes")?,
            objects: num("objects")?,
            min_side: num("min_side")?,
            max_side: num("max_side")?,
            clutter_min: num("clutter_min")?,
            clutter_max: num("clutter_max")?,
            spurious: num("spurious")?,
            noise: real("noise")?,
            bleed: real("bleed")?,
        };
        let (model, mut store, svp) = load_svp(&kv, &stored)?;
        let mut rng = seeded_rng(0);
        let head = SelectionHead::new(&mut store, &mut rng, model.out_dim, ReferringQuery::encoding_dim(&scene))?;
        let stored_head = stored
            .id_of("head.w")
            .ok_or_else(|| Error::format("model file", "head.w", "missing parameter"))?;
        let want = store.value(head.w).shape().to_vec();
        if stored.value(stored_head).shape() != want.as_slice() {
            return Err(Error::format("model file", "head.w", "shape mismatch"));
        }
        *store.value_mut(head.w) = stored.value(stored_head).clone();
        Ok(Self {
            model,
            scene,
            store,
            svp,
            head,
        })
    }
}

/// Per-step record of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss at each step.
    pub losses: Vec<f64>,
    pub warmup_steps: usize,
}

impl TrainReport {
    /// Mean loss over consecutive windows of `w` steps.
    pub fn window_means(&self, w: usize) -> Vec<f64> {
        self.losses
            .chunks(w.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    fn span_mean(&self, a: usize, b: usize) -> f64 {
        let s = &self.losses[a.min(self.losses.len())..b.min(self.losses.len())];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    /// Mean loss over the first hundredth (the untrained regime) and the
    /// last tenth of the run.
    pub fn initial_and_final(&self) -> (f64, f64) {
        let n = self.losses.len();
        let (a, b) = ((n / 100).max(1), (n / 10).max(1));
        (self.span_mean(0, a), self.span_mean(n.saturating_sub(b), n))
    }

    /// Spearman correlation between window index and `w`-step window mean;
    /// −1 for a strictly decreasing smoothed curve.
    pub fn trend(&self, w: usize) -> f64 {
        let m = self.window_means(w);
        let idx: Vec<f64> = (0..m.len()).map(|i| i as f64).collect();
        super::bench::spearman(&idx, &m)
    }
}

/// Builds the fixed training pool: task `i` has kind `kinds[i mod len]`.
pub fn training_pool(cfg: &TrainConfig, model: &SvpModelConfig) -> Result<Vec<TaskSample>> {
    let kinds = cfg.kinds.iter().map(|k| QueryKind::parse(k)).collect::<Result<Vec<_>>>()?;
    (0..cfg.train_tasks)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            TaskSample::new(derive_seed(cfg.seed, TRAIN_STREAM, i as u64), kind, &cfg.scene, model)
        })
        .collect()
}

/// One momentum-SGD update from the gradients in `store`:
/// `v ← μ·v + g`, `θ ← θ − η·v`.
pub fn sgd_step(store: &mut ParamStore, velocity: &mut [DenseArray], lr: f64, momentum: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(velocity.iter_mut()) {
        if !store.entry(id).trainable {
            continue;
        }
        let g = store.grad(id).data().to_vec();
        for (vi, gi) in v.data_mut().iter_mut().zip(&g) {
            *vi = momentum * *vi + gi;
        }
        for (p, vi) in store.value_mut(id).data_mut().iter_mut().zip(v.data()) {
            *p -= lr * vi;
        }
    }
}

/// Trains a fresh [`ToyModel`] under `cfg`. Bit-exact for a fixed config.
pub fn train_toy(cfg: &TrainConfig) -> Result<(ToyModel, TrainReport)> {
    train_toy_with(cfg, |_, _| {})
}

/// As [`train_toy`], calling `progress(step, loss)` after each step.
pub fn train_toy_with(cfg: &TrainConfig, mut progress: impl FnMut(usize, f64)) -> Result<(ToyModel, TrainReport)> {
    cfg.validate()?;
    let model_cfg = cfg.model.to_model_config()?;
    let mut model = ToyModel::new(model_cfg.clone(), cfg.scene.clone(), cfg.seed)?;
    let pool = training_pool(cfg, &model_cfg)?;
    let warmup = cfg.warmup_steps();
    let mut velocity: Vec<DenseArray> = model
        .store
        .ids()
        .map(|id| DenseArray::zeros(model.store.value(id).shape()))
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STEP_STREAM, step as u64));
        let use_sspe = step >= warmup;
        model.store.zero_grad();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let base = &pool[rng.random_range(0..pool.len())];
            let shuffled;
            let sample = if cfg.shuffle {
                shuffled = base.shuffled(rng.random())?;
                &shuffled
            } else {
                base
            };
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, sample, use_sspe)?;
            let l = tape.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            total += l;
            tape.backward(loss).accumulate_into(&mut model.store);
        }
        let inv = 1.0 / cfg.batch as f64;
        let ids: Vec<ParamId> = model.store.ids().collect();
        let norm = inv * ids.iter().map(|&id| model.store.grad(id).data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { inv * cfg.clip_norm / norm } else { inv };
        for id in ids {
            for g in model.store.grad_mut(id).data_mut() {
                *g *= scale;
            }
        }
        sgd_step(&mut model.store, &mut velocity, cfg.lr, cfg.momentum);
        let mean = total * inv;
        losses.push(mean);
        progress(step, mean);
    }
    Ok((
        model,
        TrainReport {
            losses,
            warmup_steps: warmup,
        },
    ))
}

/// Held-out evaluation samples: `per_kind` tasks of every kind, drawn from
/// a stream disjoint from the training pool.
pub fn eval_samples(
    eval_seed: u64,
    per_kind: usize,
    spec: &SceneSpec,
    model: &SvpModelConfig,
) -> Result<Vec<TaskSample>> {
    let mut out = Vec::with_capacity(per_kind * QueryKind::ALL.len());
    for (k, kind) in QueryKind::ALL.into_iter().enumerate() {
        for i in 0..per_kind {
            let idx = (k * per_kind + i) as u64;
            out.push(TaskSample::new(derive_seed(eval_seed, EVAL_STREAM, idx), kind, spec, model)?);
        }
    }
    Ok(out)
}

/// Accuracy per query kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// `(correct, total, Σ 1/M)` per kind.
    pub per_kind: BTreeMap<QueryKind, (usize, usize, f64)>,
}

impl EvalReport {
    pub fn accuracy(&self, kind: QueryKind) -> f64 {
        self.per_kind
            .get(&kind)
            .map_or(0.0, |&(c, n, _)| c as f64 / n.max(1) as f64)
    }

    /// Expected accuracy of a uniform guess.
    pub fn chance(&self, kind: QueryKind) -> f64 {
        self.per_kind.get(&kind).map_or(0.0, |&(_, n, s)| s / n.max(1) as f64)
    }

    /// Pooled accuracy over the positional kinds.
    pub fn positional_accuracy(&self) -> f64 {
        let (c, n) = self
            .per_kind
            .iter()
            .filter(|(k, _)| k.is_positional())
            .fold((0, 0), |(c, n), (_, &(a, b, _))| (c + a, n + b));
        c as f64 / n.max(1) as f64
    }

    pub fn total(&self) -> usize {
        self.per_kind.values().map(|v| v.1).sum()
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, &(c, n, _)) in &self.per_kind {
            s += &format!("{k}.correct={c}\n{k}.total={n}\n{k}.accuracy={}\n{k}.chance={}\n", self.accuracy(*k), self.chance(*k));
        }
        s += &format!("positional.accuracy={}\n", self.positional_accuracy());
        s
    }
}

pub fn eval_selection(model: &ToyModel, samples: &[TaskSample]) -> Result<EvalReport> {
    let mut rep = EvalReport::default();
    for s in samples {
        let hit = model.predict(s)? == s.target;
        let e = rep.per_kind.entry(s.query.kind).or_insert((0, 0, 0.0));
        e.0 += usize::from(hit);
        e.1 += 1;
        e.2 += 1.0 / s.num_tokens() as f64;
    }
    Ok(rep)
}
