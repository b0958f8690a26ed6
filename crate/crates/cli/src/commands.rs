use std::path::{Path, PathBuf};

use clusterlab::diffusion::{init_train_state, make_schedule, sample_chains, train_base_from, Denoiser, DenoiserCheckpoint, DenoiserSpec, LossRow, TrainState};
use clusterlab::eval::{evaluate, evaluate_plain, sweep, write_report, write_sweep, Pipeline, SweepAxis, SweepSpec};
use clusterlab::infer::{sample_consistent, GuidanceConfig};
use clusterlab::io::{read_csv, read_json, write_csv, write_json};
use clusterlab::numcore::AdamWState;
use clusterlab::par::ExecMode;
use clusterlab::rng;
use clusterlab::semantics::{make_vocab_dim, CaptionModel, Prompt, Vocabulary};
use clusterlab::tune::{choose_target, generate_base_set, templates_for, tune, BaseSet, Projector, ProjectorCheckpoint};
use clusterlab::world::{make_default_world, OraclePredictor, WorldSpec};
use clusterlab::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command, GuidanceArgs};

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn world(&self) -> Result<WorldSpec> {
        let w: WorldSpec = read_json(&self.cfg.world_path(&self.out))?;
        w.validate()?;
        Ok(w)
    }

    fn vocab(&self) -> Result<Vocabulary> {
        let v: Vocabulary = read_json(&self.path("vocab.json"))?;
        v.validate()?;
        Ok(v)
    }

    fn denoiser(&self) -> Result<(Denoiser, Option<AdamWState>)> {
        let ck: DenoiserCheckpoint = read_json(&self.path("denoiser.json"))?;
        Denoiser::from_checkpoint(ck)
    }

    fn base_set(&self) -> Result<BaseSet> {
        let b: BaseSet = read_json(&self.path("base_set.json"))?;
        b.validate()?;
        Ok(b)
    }

    fn projector(&self) -> Result<Projector> {
        let ck: ProjectorCheckpoint = read_json(&self.path("projector.json"))?;
        Projector::from_checkpoint(ck)
    }

    fn contexts(&self, world: &WorldSpec) -> Vec<String> {
        self.cfg.eval.contexts.clone().unwrap_or_else(|| world.contexts.iter().map(|c| c.token.clone()).collect())
    }

    fn eval_seeds(&self) -> Vec<u64> {
        (0..self.cfg.eval.seeds as u64).map(|i| self.seed + i).collect()
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg: RunConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx { cfg, seed: cli.seed, out: cli.out.clone() };
    std::fs::create_dir_all(&ctx.out).map_err(|e| clusterlab::io::io_err(&ctx.out, e))?;
    match &cli.command {
        Command::MakeWorld { spec } => make_world(&ctx, spec.as_deref()),
        Command::TrainBase { steps, resume, stop_at } => train(&ctx, *steps, *resume, *stop_at),
        Command::GenBase { subject, context, n, target_index } => gen_base(&ctx, subject.as_deref(), context.as_deref(), *n, *target_index),
        Command::Tune { max_steps } => tune_cmd(&ctx, *max_steps),
        Command::Sample { context, n, guidance } => sample_cmd(&ctx, context.as_deref(), *n, guidance),
        Command::Eval { guidance } => eval_cmd(&ctx, guidance),
        Command::Sweep { axis } => sweep_cmd(&ctx, axis),
        Command::Oracle { eta1, eta2, n, target, context } => oracle_cmd(&ctx, *eta1, *eta2, *n, *target, context.as_deref()),
    }
}

fn make_world(ctx: &Ctx, spec: Option<&Path>) -> Result<()> {
    let world = match spec {
        Some(p) => {
            let w: WorldSpec = read_json(p)?;
            w.validate().map_err(|e| Error::Format { path: p.to_path_buf(), message: e.to_string() })?;
            w
        }
        None => make_default_world(ctx.seed),
    };
    let vocab = make_vocab_dim(&world, &[], world.seed, ctx.cfg.embed_dim)?;
    let wp = ctx.cfg.world_path(&ctx.out);
    write_json(&wp, &world)?;
    write_json(&ctx.path("vocab.json"), &vocab)?;
    println!(
        "world: {} subjects x {} sub-clusters, {} contexts -> {}",
        world.subjects.len(),
        world.subjects.iter().map(|s| s.subclusters.len()).max().unwrap_or(0),
        world.contexts.len(),
        wp.display()
    );
    Ok(())
}

fn train(ctx: &Ctx, steps: Option<usize>, resume: bool, stop_at: Option<usize>) -> Result<()> {
    let world = ctx.world()?;
    let vocab = ctx.vocab()?;
    let mut tcfg = ctx.cfg.train.clone();
    tcfg.seed = ctx.seed;
    if let Some(s) = steps {
        tcfg.steps = s;
    }
    let loss_path = ctx.path("train_loss.csv");
    let (state, mut rows) = if resume {
        let (den, opt) = ctx.denoiser()?;
        let optimizer = opt.ok_or_else(|| Error::arg("checkpoint has no optimizer state to resume from"))?;
        let done = optimizer.step_count as usize;
        let prev: Vec<LossRow> = read_csv(&loss_path).unwrap_or_default();
        (TrainState { denoiser: den, optimizer }, prev.into_iter().filter(|r| r.step < done).collect())
    } else {
        let sched = make_schedule(ctx.cfg.schedule.kind, ctx.cfg.schedule.t_max)?;
        let mut spec = DenoiserSpec::new(world.latent_dim, vocab.embed_dim, world.data_scale());
        spec.hidden = ctx.cfg.hidden.clone();
        (init_train_state(spec, sched, &tcfg)?, Vec::new())
    };
    let captions = CaptionModel::for_world(&world);
    let outcome = train_base_from(state, &world, &captions, &vocab, &tcfg, stop_at.unwrap_or(tcfg.steps))?;
    rows.extend(outcome.log);
    let st = outcome.state;
    write_json(&ctx.path("denoiser.json"), &st.denoiser.checkpoint(Some(st.optimizer.clone())))?;
    write_csv(&loss_path, &rows)?;
    let tail = &rows[rows.len().saturating_sub(100)..];
    let recent = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    println!("trained {} steps, recent loss {recent:.4}", st.steps_done());
    Ok(())
}

fn gen_base(ctx: &Ctx, subject: Option<&str>, context: Option<&str>, n: Option<usize>, target_index: Option<usize>) -> Result<()> {
    let world = ctx.world()?;
    let vocab = ctx.vocab()?;
    let (den, _) = ctx.denoiser()?;
    let mut bcfg = ctx.cfg.base;
    if let Some(n) = n {
        bcfg.n = n;
    }
    let prompt = Prompt::subject(&[subject.unwrap_or(&ctx.cfg.subject)], context.unwrap_or(&ctx.cfg.context));
    let base = generate_base_set(&den, &vocab, &world, &prompt, &bcfg, ctx.seed, ExecMode::Parallel)?;
    for (i, e) in base.entries.iter().enumerate() {
        let coords: Vec<String> = e.z0.iter().map(|x| format!("{x:8.3}")).collect();
        println!("proposal {i:2}: [{}]", coords.join(", "));
    }
    let mut pick_rng = rng::stream(ctx.seed, 1);
    let base = choose_target(&base, target_index, &mut pick_rng)?;
    println!("target: proposal {}", base.target()?);
    write_json(&ctx.path("base_set.json"), &base)
}

fn tune_cmd(ctx: &Ctx, max_steps: Option<usize>) -> Result<()> {
    let world = ctx.world()?;
    let vocab = ctx.vocab()?;
    let (den, _) = ctx.denoiser()?;
    let base = ctx.base_set()?;
    let mut tcfg = ctx.cfg.tune.clone();
    tcfg.seed = ctx.seed;
    if let Some(s) = max_steps {
        tcfg.max_steps = s;
    }
    let contexts = ctx.contexts(&world);
    let refs: Vec<&str> = contexts.iter().map(|s| s.as_str()).collect();
    let templates = templates_for(&base.prompt_tar, &refs)?;
    let out = tune(&den, &vocab, &base, &templates, &tcfg)?;
    write_json(&ctx.path("projector.json"), &out.projector.checkpoint(Some(out.optimizer.clone())))?;
    write_csv(&ctx.path("tune_loss.csv"), &out.log)?;
    let last = out.log.last().map_or(f64::NAN, |r| r.loss_total);
    println!("tuned {} steps ({:?}), last loss {last:.4}", out.log.len(), out.stop);
    Ok(())
}

fn guidance(ctx: &Ctx, args: &GuidanceArgs) -> Result<GuidanceConfig> {
    let mut g = ctx.cfg.guidance.clone();
    if let Some(x) = args.eta1 {
        g.eta1 = x;
    }
    if let Some(x) = args.eta2 {
        g.eta2 = x;
    }
    if let Some(x) = args.v {
        g.v = x;
    }
    if let Some(w) = &args.window {
        let parsed = w.split_once('-').and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
        g.window = parsed.ok_or_else(|| Error::arg(format!("window `{w}` is not START-END")))?;
    }
    if args.aver_as_empty {
        g.aver_as_empty = true;
    }
    g.validate()?;
    Ok(g)
}

#[derive(Serialize)]
struct SampleRecord {
    z0: Vec<f64>,
    subcluster: usize,
}

#[derive(Serialize)]
struct SampleReport {
    prompt: Vec<String>,
    gcfg: GuidanceConfig,
    samples: Vec<SampleRecord>,
    capture_rate: f64,
    target_subcluster: usize,
    calls_per_step: Vec<f64>,
}

fn sample_cmd(ctx: &Ctx, context: Option<&str>, n: Option<usize>, args: &GuidanceArgs) -> Result<()> {
    let world = ctx.world()?;
    let vocab = ctx.vocab()?;
    let (den, _) = ctx.denoiser()?;
    let base = ctx.base_set()?;
    let proj = ctx.projector()?;
    let g = guidance(ctx, args)?;
    let prompt = base.prompt_tar.with_context(context.unwrap_or(&ctx.cfg.context))?;
    let n = n.unwrap_or(ctx.cfg.eval.n_samples);
    let out = sample_consistent(&den, &proj, &base, &vocab, &world, &prompt, &g, n, ctx.seed, ExecMode::Parallel)?;
    let target = base.entries[base.target()?].subcluster;
    let capture = clusterlab::eval::capture_fraction(&out.subclusters, target)?;
    let calls = out.calls_per_step.clone();
    let report = SampleReport {
        prompt: prompt.tokens.clone(),
        gcfg: g,
        samples: out.z0.into_iter().zip(out.subclusters).map(|(z0, subcluster)| SampleRecord { z0, subcluster }).collect(),
        capture_rate: capture,
        target_subcluster: target,
        calls_per_step: calls.clone(),
    };
    write_json(&ctx.path("samples.json"), &report)?;
    let per_step: Vec<String> = calls[1..].iter().map(|c| format!("{c}")).collect();
    println!("capture rate {capture:.3} over {n} samples");
    println!("denoiser calls per step: {}", per_step.join(" "));
    Ok(())
}

fn eval_cmd(ctx: &Ctx, args: &GuidanceArgs) -> Result<()> {
    let world = ctx.world()?;
    let vocab = ctx.vocab()?;
    let (den, _) = ctx.denoiser()?;
    let base = ctx.base_set()?;
    let proj = ctx.projector()?;
    let g = guidance(ctx, args)?;
    let pipe = Pipeline { den: &den, vocab: &vocab, world: &world, proj: &proj, base: &base };
    let contexts = ctx.contexts(&world);
    let refs: Vec<&str> = contexts.iter().map(|s| s.as_str()).collect();
    let seeds = ctx.eval_seeds();
    let n = ctx.cfg.eval.n_samples;
    let guided = evaluate(&pipe, &refs, &g, n, &seeds, ExecMode::Parallel)?;
    let plain = evaluate_plain(&pipe, &refs, 1.0, g.steps, n, &seeds, ExecMode::Parallel)?;
    write_report(&guided, &ctx.path("eval.json"), &ctx.path("eval.csv"))?;
    write_report(&plain, &ctx.path("baseline.json"), &ctx.path("baseline.csv"))?;
    println!("target sub-cluster {}", guided.target_subcluster);
    for (a, b) in guided.per_context.iter().zip(&plain.per_context) {
        println!("{:>8}: guided {:.3} +- {:.3}   unguided {:.3}", a.context, a.mean_capture, a.std_capture, b.mean_capture);
    }
    println!("mean capture: guided {:.3}, unguided {:.3}", guided.mean_capture, plain.mean_capture);
    Ok(())
}

fn sweep_cmd(ctx: &Ctx, axis: &str) -> Result<()> {
    let world = ctx.world()?;
    let vocab = ctx.vocab()?;
    let (den, _) = ctx.denoiser()?;
    let base = ctx.base_set()?;
    let proj = ctx.projector()?;
    let axis_v = match axis {
        "v" => SweepAxis::V,
        "eta1" => SweepAxis::Eta1,
        "eta2" => SweepAxis::Eta2,
        "window" => SweepAxis::Window,
        other => return Err(Error::arg(format!("unknown sweep axis `{other}`"))),
    };
    let mut spec = SweepSpec::default_for(axis_v);
    spec.repeats = ctx.cfg.eval.seeds;
    let pipe = Pipeline { den: &den, vocab: &vocab, world: &world, proj: &proj, base: &base };
    let contexts = ctx.contexts(&world);
    let refs: Vec<&str> = contexts.iter().map(|s| s.as_str()).collect();
    let table = sweep(&spec, &pipe, &refs, &ctx.cfg.guidance, ctx.cfg.eval.n_samples, ctx.seed, ExecMode::Parallel)?;
    write_sweep(&table, &ctx.path(&format!("sweep_{axis}.json")), &ctx.path(&format!("sweep_{axis}.csv")))?;
    for p in &table.points {
        println!("{axis} = {:>6}: capture {:.3}", p.axis_value, p.report.mean_capture);
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    version: u32,
    subject: String,
    context: String,
    target: usize,
    eta1: f64,
    eta2: f64,
    n_samples: usize,
    seed: u64,
    capture_rate: f64,
    unguided_capture_rate: f64,
}

fn oracle_cmd(ctx: &Ctx, eta1: f64, eta2: f64, n: usize, target: usize, context: Option<&str>) -> Result<()> {
    let world = ctx.world()?;
    let sched = make_schedule(ctx.cfg.schedule.kind, ctx.cfg.schedule.t_max)?;
    let context = context.unwrap_or(&ctx.cfg.context);
    let subject = &ctx.cfg.subject;
    let run = |e1: f64, e2: f64| -> Result<f64> {
        let pred = OraclePredictor::new(&world, &sched, subject, context, target, e1, e2)?;
        let out = sample_chains(&pred, &sched, ctx.cfg.guidance.steps, world.latent_dim, n, ctx.seed, ExecMode::Parallel, false)?;
        clusterlab::eval::capture_rate(&out.z0.to_rows(), &world, subject, context, target)
    };
    let guided = run(eta1, eta2)?;
    let unguided = run(0.0, 0.0)?;
    let report = OracleReport {
        version: clusterlab::io::FORMAT_VERSION,
        subject: subject.clone(),
        context: context.to_string(),
        target,
        eta1,
        eta2,
        n_samples: n,
        seed: ctx.seed,
        capture_rate: guided,
        unguided_capture_rate: unguided,
    };
    write_json(&ctx.path("oracle.json"), &report)?;
    println!("oracle capture {guided:.3} (eta1 {eta1}, eta2 {eta2}); unguided {unguided:.3}");
    Ok(())
}
