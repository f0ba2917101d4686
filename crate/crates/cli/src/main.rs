use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use posenorm::config::RunConfig;
use posenorm::experiment::{check_stage_net, global_example, limb_examples, StageKind};
use posenorm::metrics::{auc, compactness, format_table, pck, relative_positions, EvalReport, Reference, Stage};
use posenorm::nnet::{read_tnet, write_tnet, TinyNet};
use posenorm::normalize::{run_pipeline, NormalizeConfig, Refiner, RefinementNets};
use posenorm::refine::train_refinement;
use posenorm::selfcheck::{run_suites, SelfCheckOptions};
use posenorm::skeleton::{KeypointSet, Skeleton};
use posenorm::synthdata::{read_corpus, write_corpus, Sample};
use posenorm::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_PROPERTY: u8 = 4;

/// Score-map normalization experiments.
#[derive(Parser, Debug)]
#[command(name = "posenorm", version)]
struct Cli {
    /// TOML run configuration (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: annotations and simulated detector maps.
    Synth {
        /// Number of samples, overriding `samples`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one refinement network on a corpus.
    Train {
        /// global, limb0, limb1, limb2 or limb3.
        #[arg(long, default_value = "global")]
        stage: String,
        /// Train on maps without body and limb normalization.
        #[arg(long)]
        no_normalize: bool,
        /// Training steps, overriding `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Trained global network; required for limb stages.
        #[arg(long)]
        global: Option<PathBuf>,
    },
    /// Evaluate the pipeline on a corpus and report PCK per joint.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Global network trained with normalization.
        #[arg(long)]
        global: Option<PathBuf>,
        /// Global network trained without normalization.
        #[arg(long)]
        plain_global: Option<PathBuf>,
        /// Limb networks, in limb order (all four or none).
        #[arg(long, num_args = 4)]
        limbs: Option<Vec<PathBuf>>,
        /// Feed the groundtruth maps instead of the detector maps.
        #[arg(long)]
        groundtruth_input: bool,
    },
    /// Relative-position statistics of annotated joints.
    Compactness {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Joint name, e.g. l-wrist.
        #[arg(long)]
        joint: String,
        /// Joint name or `center` for the torso center.
        #[arg(long = "ref", default_value = "center")]
        reference: String,
        #[arg(long, value_enum, default_value = "raw")]
        stage: StageArg,
    },
    /// Run the geometry and gradient property suites.
    Roundtrip {
        #[arg(long, hide = true)]
        break_adjoint: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum StageArg {
    Raw,
    BodyNormalized,
    LimbNormalized,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Raw => Stage::Raw,
            StageArg::BodyNormalized => Stage::BodyNormalized,
            StageArg::LimbNormalized => Stage::LimbNormalized,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    sk: Skeleton,
}

impl Ctx {
    fn out_dir(&self) -> anyhow::Result<&Path> {
        self.cfg
            .paths
            .out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory (--out or paths.out)".into()).into())
    }

    fn corpus_dir<'a>(&'a self, flag: &'a Option<PathBuf>) -> anyhow::Result<&'a Path> {
        flag.as_deref()
            .or(self.cfg.paths.corpus.as_deref())
            .ok_or_else(|| Error::Config("no corpus directory (--corpus or paths.corpus)".into()).into())
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => EXIT_CONFIG,
        Some(Error::DivergenceDetected { .. }) => 1,
        Some(_) => EXIT_DATA,
        None => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("POSENORM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("POSENORM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!(e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn cmd_synth(ctx: &Ctx, n: Option<usize>) -> anyhow::Result<()> {
    let out = ctx.out_dir()?;
    let n = n.unwrap_or(ctx.cfg.samples);
    let index = write_corpus(out, &ctx.cfg.synth, &ctx.sk, ctx.cfg.seed, n)?;
    println!("wrote {} samples to {}", index.ids.len(), out.display());
    Ok(())
}

fn load_checked(path: &Path, sk: &Skeleton, stage: StageKind) -> anyhow::Result<TinyNet> {
    let net = read_tnet(path)?;
    check_stage_net(&net, sk, stage).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(net)
}

fn cmd_train(
    ctx: &Ctx,
    stage: &str,
    no_normalize: bool,
    steps: Option<usize>,
    corpus: &Option<PathBuf>,
    global: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let stage: StageKind = stage.parse()?;
    let out = ctx.out_dir()?;
    let (_, samples) = read_corpus(ctx.corpus_dir(corpus)?, &ctx.sk)?;
    if samples.is_empty() {
        return Err(Error::EmptyEval.into());
    }
    let mut tc = ctx.cfg.train_config();
    if let Some(s) = steps {
        tc.steps = s;
    }
    let ncfg = NormalizeConfig {
        normalize_body: ctx.cfg.normalize.normalize_body && !no_normalize,
        normalize_limbs: ctx.cfg.normalize.normalize_limbs && !no_normalize,
        ..ctx.cfg.normalize
    };
    let sigma = ctx.cfg.synth.groundtruth.gauss_sigma;
    let k = ctx.sk.num_joints();
    let sample = |step: usize| -> &Sample { &samples[step % samples.len()] };
    let (net, name) = match stage {
        StageKind::Global => (ctx.cfg.net.spec(k, k).build()?, "global".to_string()),
        StageKind::Limb(li) => (ctx.cfg.net.spec(k, 3).build()?, format!("limb{li}")),
    };
    let refiner = match (stage, global) {
        (StageKind::Limb(_), Some(p)) => Some(Refiner::Net(load_checked(p, &ctx.sk, StageKind::Global)?)),
        (StageKind::Limb(_), None) => return Err(Error::Config("limb stages need --global".into()).into()),
        _ => None,
    };
    let result = train_refinement(net, &tc, |step| match (stage, &refiner) {
        (StageKind::Limb(li), Some(r)) => Ok(limb_examples(sample(step), &ctx.sk, &ncfg, r, sigma)?.swap_remove(li)),
        _ => Ok(global_example(sample(step), &ctx.sk, &ncfg, sigma)?.0),
    });
    create_dir(out)?;
    let suffix = if no_normalize { "-plain" } else { "" };
    let trained = match result {
        Ok(t) => t,
        Err(Error::DivergenceDetected { step, loss, curve }) => {
            let path = out.join(format!("{name}{suffix}.divergence.json"));
            write_json(&path, &curve)?;
            eprintln!("loss trace: {}", path.display());
            return Err(Error::DivergenceDetected {
                step,
                loss,
                curve: Vec::new(),
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out.join(format!("{name}{suffix}.tnet"));
    write_tnet(&ckpt, &trained.net)?;
    write_json(&out.join(format!("{name}{suffix}.loss.json")), &trained.curve)?;
    let c = &trained.curve;
    if let (Some(first), Some(last)) = (c.first(), c.last()) {
        println!("{} steps, loss {first:.4} -> {last:.4}", c.len());
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalOutput {
    n_images: usize,
    rows: Vec<(String, EvalReport)>,
}

fn cmd_eval(
    ctx: &Ctx,
    corpus: &Option<PathBuf>,
    global: &Option<PathBuf>,
    plain_global: &Option<PathBuf>,
    limbs: &Option<Vec<PathBuf>>,
    groundtruth_input: bool,
) -> anyhow::Result<()> {
    let sk = &ctx.sk;
    let (_, samples) = read_corpus(ctx.corpus_dir(corpus)?, sk)?;
    let load_global = |p: &Option<PathBuf>| -> anyhow::Result<Refiner> {
        Ok(match p {
            Some(p) => Refiner::Net(load_checked(p, sk, StageKind::Global)?),
            None => Refiner::PassThrough,
        })
    };
    let limb_refiners: Option<Vec<Refiner>> = match limbs {
        Some(paths) => Some(
            paths
                .iter()
                .enumerate()
                .map(|(li, p)| load_checked(p, sk, StageKind::Limb(li)).map(Refiner::Net))
                .collect::<anyhow::Result<_>>()?,
        ),
        None => None,
    };
    let norm_nets = RefinementNets {
        global: load_global(global)?,
        limbs: match &limb_refiners {
            Some(v) => std::array::from_fn(|i| v[i].clone()),
            None => std::array::from_fn(|_| Refiner::PassThrough),
        },
    };
    let plain_nets = RefinementNets {
        global: load_global(plain_global)?,
        limbs: std::array::from_fn(|_| Refiner::PassThrough),
    };
    let plain_cfg = NormalizeConfig {
        normalize_body: false,
        normalize_limbs: false,
        ..ctx.cfg.normalize
    };
    let mut gts: Vec<KeypointSet> = Vec::with_capacity(samples.len());
    let (mut det, mut s1, mut s1p, mut s2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &samples {
        let input = if groundtruth_input { &s.groundtruth } else { &s.detector };
        let full = run_pipeline(input, sk, &ctx.cfg.normalize, &norm_nets)?;
        det.push(full.detector);
        s1.push(full.stage1);
        s2.push(full.keypoints);
        if plain_global.is_some() {
            s1p.push(run_pipeline(input, sk, &plain_cfg, &plain_nets)?.stage1);
        }
        gts.push(s.annotation.keypoints.clone());
    }
    let report = |preds: &[KeypointSet]| pck(preds, &gts, sk, &ctx.cfg.eval);
    let mut rows = vec![("detector".to_string(), report(&det)?), ("stage1-norm".to_string(), report(&s1)?)];
    if plain_global.is_some() {
        rows.push(("stage1-plain".to_string(), report(&s1p)?));
    }
    if limbs.is_some() {
        rows.push(("stage2".to_string(), report(&s2)?));
    }
    debug_assert!((auc(&det, &gts, sk, &ctx.cfg.eval)? - rows[0].1.auc).abs() < 1e-9);
    let cols: Vec<(&str, &EvalReport)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    print!("{}", format_table(&cols));
    if let Some(out) = &ctx.cfg.paths.out {
        create_dir(out)?;
        let path = out.join("eval.json");
        write_json(
            &path,
            &EvalOutput {
                n_images: samples.len(),
                rows,
            },
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_compactness(ctx: &Ctx, corpus: &Option<PathBuf>, joint: &str, reference: &str, stage: StageArg) -> anyhow::Result<()> {
    let sk = &ctx.sk;
    let joint_index = |name: &str| {
        sk.joint_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown joint {name:?}")))
    };
    let j = joint_index(joint)?;
    let r = match reference {
        "center" => Reference::TorsoCenter,
        name => Reference::Joint(joint_index(name)?),
    };
    let (_, samples) = read_corpus(ctx.corpus_dir(corpus)?, sk)?;
    let kps: Vec<KeypointSet> = samples.into_iter().map(|s| s.annotation.keypoints).collect();
    let cloud = relative_positions(&kps, sk, j, r, stage.into());
    let stats = compactness(&cloud)?;
    println!("n {} cov_trace {:.4} r90 {:.4}", cloud.len(), stats.cov_trace, stats.r90);
    if let Some(out) = &ctx.cfg.paths.out {
        create_dir(out)?;
        write_json(&out.join("compactness.json"), &stats)?;
        let mut csv = String::from("x,y\n");
        for p in &cloud {
            csv.push_str(&format!("{},{}\n", p.x, p.y));
        }
        let path = out.join("points.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_roundtrip(ctx: &Ctx, break_adjoint: bool) -> anyhow::Result<bool> {
    let opts = SelfCheckOptions {
        seed: ctx.cfg.seed,
        break_adjoint,
    };
    let results = run_suites(&opts);
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<22} {} ({:.2}s)", r.name, r.detail, r.seconds);
    }
    if let Some(out) = &ctx.cfg.paths.out {
        create_dir(out)?;
        write_json(&out.join("roundtrip.json"), &results)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.paths.out = Some(o);
    }
    let sk = cfg.skeleton()?;
    let ctx = Ctx { cfg, sk };
    match &cli.command {
        Command::Synth { n } => cmd_synth(&ctx, *n)?,
        Command::Train {
            stage,
            no_normalize,
            steps,
            corpus,
            global,
        } => cmd_train(&ctx, stage, *no_normalize, *steps, corpus, global)?,
        Command::Eval {
            corpus,
            global,
            plain_global,
            limbs,
            groundtruth_input,
        } => cmd_eval(&ctx, corpus, global, plain_global, limbs, *groundtruth_input)?,
        Command::Compactness {
            corpus,
            joint,
            reference,
            stage,
        } => cmd_compactness(&ctx, corpus, joint, reference, *stage)?,
        Command::Roundtrip { break_adjoint } => {
            if !cmd_roundtrip(&ctx, *break_adjoint)? {
                return Ok(ExitCode::from(EXIT_PROPERTY));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
