use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use svp::harness::{
    eval_samples, eval_selection, gen_scene, run_bench, run_gradcheck, train_toy_with, BenchConfig,
    BenchProjector, CheckTarget, EvalReport, ModelSection, SceneSpec, TaskSample, ToyModel, TrainConfig,
};
use svp::numcore::{seeded_rng, Dtype, ParamStore};
use svp::projector::{
    load_svp, read_embeddings, read_model_file, stats_block, svp_forward, write_embeddings, write_model_file,
    write_tokens, SvpConfig,
};
use svp::superpixel::{filter_candidates, partition_mask_file, MaskFile};
use svp::{Error, Result};

#[derive(Parser)]
#[command(name = "svp", version, about = "Semantic visual projector toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter candidate masks into a superpixel partition.
    FilterMasks {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn patch embeddings plus candidate masks into visual tokens.
    Tokenize {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_sspe: bool,
        #[arg(long)]
        no_ssa: bool,
        #[arg(long)]
        shuffle_seed: Option<u64>,
        #[command(flatten)]
        width: Width,
    },
    /// Token counts, compression and purity over the synthetic corpus.
    Bench {
        #[arg(long)]
        corpus_seed: u64,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, default_value = "svp")]
        projector: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
    },
    /// Train the toy referring-selection model.
    ToyTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes per-step losses as key=value lines.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Evaluate a trained toy model on held-out tasks.
    ToyEval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        per_kind: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient check at toy dimensions.
    Gradcheck {
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic scene as an embedding file and a candidate mask file.
    GenScene {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        #[arg(long, default_value_t = 12)]
        grid: usize,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[command(flatten)]
        width: Width,
    },
    /// Write a randomly initialised projector parameter file.
    InitParams {
        /// Training config whose `[model]` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        width: Width,
    },
}

#[derive(Args, Clone, Copy)]
struct Width {
    /// Store values as 32-bit floats.
    #[arg(long)]
    f32: bool,
}

impl Width {
    fn dtype(self) -> Dtype {
        if self.f32 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes `path` only after `fill` succeeds.
fn write_file(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    let f = File::create(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut w = BufWriter::new(f);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&read_text(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::FilterMasks { masks, theta, out } => {
            let mf = MaskFile::read_from(&mut open(&masks)?)?;
            let sp = filter_candidates(&mf.masks, mf.height, mf.width, theta)?;
            let part = partition_mask_file(&sp, &mf.masks)?;
            write_file(&out, |w| part.write_to(w))?;
            let residual = sp.sources().iter().filter(|s| matches!(s, svp::superpixel::Source::Residual)).count();
            println!("candidates={}\nsuperpixels={}\nresidual={}", mf.masks.len(), sp.len(), residual);
        }
        Cmd::Tokenize {
            embeddings,
            masks,
            params,
            out,
            no_sspe,
            no_ssa,
            shuffle_seed,
            width,
        } => {
            let (grid, _) = read_embeddings(&mut open(&embeddings)?)?;
            let mf = MaskFile::read_from(&mut open(&masks)?)?;
            let (kv, stored, _) = read_model_file(&mut open(&params)?)?;
            let (cfg, store, mut p) = load_svp(&kv, &stored)?;
            p.use_sspe &= !no_sspe;
            p.use_ssa &= !no_ssa;
            let run_cfg = SvpConfig {
                shuffle_seed,
                ..cfg.svp_config()
            };
            let seq = svp_forward(&grid, &mf.masks, (mf.height, mf.width), &store, &p, &run_cfg)?;
            write_file(&out, |w| write_tokens(w, &seq, width.dtype()))?;
            print!("{}", stats_block(&seq));
        }
        Cmd::Bench {
            corpus_seed,
            scenes,
            projector,
            report,
            model_seed,
        } => {
            let proj = BenchProjector::parse(&projector)?;
            let cfg = BenchConfig {
                model_seed,
                ..BenchConfig::default()
            };
            let t0 = Instant::now();
            let rep = run_bench(proj, corpus_seed, scenes, &cfg)?;
            write_file(&report, |w| Ok(w.write_all(rep.to_kv().as_bytes())?))?;
            println!(
                "projector={proj}\nscenes={}\nmean_tokens={}\nmean_compression={}\nmean_purity={}\nspearman_tokens_planted={}",
                rep.rows.len(),
                rep.mean_tokens(),
                rep.mean_compression(),
                rep.mean_purity(),
                rep.spearman()
            );
            eprintln!("elapsed_s={:.2}", t0.elapsed().as_secs_f64());
        }
        Cmd::ToyTrain {
            config,
            out,
            seed,
            curve,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let every = (cfg.steps / 10).max(1);
            let (model, rep) = train_toy_with(&cfg, |step, loss| {
                if step % every == 0 || step + 1 == cfg.steps {
                    eprintln!("step={step} loss={loss:.6}");
                }
            })?;
            write_file(&out, |w| model.write_to(w, Dtype::F64))?;
            if let Some(c) = curve {
                write_file(&c, |w| {
                    for (i, l) in rep.losses.iter().enumerate() {
                        writeln!(w, "step.{i}.loss={l}")?;
                    }
                    Ok(())
                })?;
            }
            let (a, b) = rep.initial_and_final();
            println!(
                "steps={}\nsspe_warmup_steps={}\ninitial_loss={a}\nfinal_loss={b}",
                cfg.steps, rep.warmup_steps
            );
        }
        Cmd::ToyEval {
            params,
            seeds,
            per_kind,
            report,
        } => {
            let model = ToyModel::read_from(&mut open(&params)?)?;
            let mut all = EvalReport::default();
            for s in &seeds {
                let samples: Vec<TaskSample> = eval_samples(*s, per_kind, &model.scene, &model.model)?;
                let r = eval_selection(&model, &samples)?;
                for (k, v) in r.per_kind {
                    let e = all.per_kind.entry(k).or_insert((0, 0, 0.0));
                    e.0 += v.0;
                    e.1 += v.1;
                    e.2 += v.2;
                }
            }
            if all.total() == 0 {
                return Err(Error::Invalid("empty evaluation set".into()));
            }
            let text = all.to_kv();
            if let Some(r) = report {
                write_file(&r, |w| Ok(w.write_all(text.as_bytes())?))?;
            }
            print!("{text}");
        }
        Cmd::Gradcheck { target, eps, seed } => {
            let t = CheckTarget::parse(&target)?;
            let reps = run_gradcheck(t, eps, seed)?;
            let mut worst: f64 = 0.0;
            for (name, r) in &reps {
                let at = r.worst.as_ref().map_or(String::new(), |(p, i)| format!("{p}[{i}]"));
                println!("{name}.max_rel_error={:e}\n{name}.checked={}\n{name}.worst={at}", r.max_rel_error, r.checked);
                worst = worst.max(r.max_rel_error);
            }
            println!("max_rel_error={worst:e}");
            if worst > 1e-4 {
                return Err(Error::Invalid(format!("gradient mismatch {worst:e} exceeds 1e-4")));
            }
        }
        Cmd::GenScene {
            seed,
            objects,
            grid,
            embeddings,
            masks,
            width,
        } => {
            let spec = SceneSpec {
                grid_h: grid,
                grid_w: grid,
                objects,
                ..SceneSpec::default()
            };
            let scene = gen_scene(seed, &spec)?;
            let (h, w) = scene.mask_dims();
            let mf = MaskFile {
                height: h,
                width: w,
                masks: scene.candidates.clone(),
            };
            write_file(&embeddings, |o| write_embeddings(o, &scene.grid, width.dtype()))?;
            write_file(&masks, |o| mf.write_to(o))?;
            println!("objects={}\ncandidates={}", scene.objects.len(), scene.candidates.len());
        }
        Cmd::InitParams {
            config,
            seed,
            out,
            width,
        } => {
            let section: ModelSection = load_config(config.as_deref())?.model;
            let cfg = section.to_model_config()?;
            let mut store = ParamStore::new();
            cfg.build(&mut store, &mut seeded_rng(seed))?;
            write_file(&out, |w| write_model_file(w, &cfg.to_kv(), &store, width.dtype()))?;
            println!("parameters={}\nscalars={}", store.len(), store.num_scalars());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
