//! Subcommands of the `unicontrol` binary. [`dispatch`] parses argv and
//! runs one command, writing reports to the given stream.

pub mod image;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use unicontrol::config::Config;
use unicontrol::control::{assemble, AdapterBranch, ControlInput, UniControl};
use unicontrol::datagen::{read_dataset, write_dataset};
use unicontrol::denoiser::init_base;
use unicontrol::diffusion::{ddim_sample, GuidanceConfig};
use unicontrol::grad::Tensor;
use unicontrol::gradsuite;
use unicontrol::tasks::{self, embedding_tensor, encode_text, WeightMode, EMBED_DIM};
use unicontrol::trainer::{self, count_params, eval_condition_fidelity, load_checkpoint, save_checkpoint};

#[derive(Debug, Parser)]
#[command(name = "unicontrol", version, about = "Multi-task controllable diffusion at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of (image, prompt, condition) records.
    Datagen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of scenes; each yields one record per task.
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "hed,canny,seg,depth,normal,pose,hedsketch,bbox,outpainting")]
        tasks: String,
        /// Image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Optional config supplying the edge threshold ranges.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the control branch and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images for one trained task.
    Sample {
        #[command(flatten)]
        common: SampleArgs,
        /// Trained task key, e.g. canny.
        #[arg(long)]
        task: String,
        /// Condition image: P6 pixmap, raw tensor or dataset record.
        #[arg(long)]
        cond: PathBuf,
    },
    /// Sample with two conditions at once.
    SampleHybrid {
        #[command(flatten)]
        common: SampleArgs,
        #[arg(long)]
        task_a: String,
        #[arg(long)]
        cond_a: PathBuf,
        #[arg(long)]
        task_b: String,
        #[arg(long)]
        cond_b: PathBuf,
    },
    /// Sample for an unseen condition by blending trained adapters.
    #[command(group(ArgGroup::new("mix").required(true).args(["weights", "instruction"])))]
    SampleZeroshot {
        #[command(flatten)]
        common: SampleArgs,
        #[arg(long)]
        cond: PathBuf,
        /// Manual task weights, e.g. depth=0.6,seg=0.3,canny=0.1.
        #[arg(long)]
        weights: Option<String>,
        /// Instruction whose similarity to each trained task sets the weights.
        #[arg(long)]
        instruction: Option<String>,
    },
    /// Condition fidelity of a checkpoint against the base alone.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Held-out dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
        /// Number of conditional and of unconditional samples.
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter accounting of the unified model against a stack of single-task models.
    Params {
        /// Model config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive and both denoisers.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Output prefix; writes PREFIX.ppm and PREFIX.tensor.
    #[arg(long)]
    pub out: PathBuf,
    /// Classifier-free guidance weight.
    #[arg(long, default_value_t = 9.0)]
    pub guidance: f64,
    /// DDIM steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Number of samples, each from its own noise.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parse `args` (including the program name) and run the command. Usage
/// errors print the usage text and return 2; runtime errors return 1.
pub fn dispatch<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let code = e.exit_code();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn read_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Config::parse(&text)?)
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Datagen {
            seed,
            count,
            out: dir,
            tasks: list,
            size,
            config,
        } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => Config::default(),
            };
            let list: Vec<_> = tasks::parse_task_list(&list)?.into_iter().copied().collect();
            let entries = write_dataset(&dir, count, seed, &list, size, &cfg.conditions())?;
            writeln!(out, "wrote {} records to {}", entries.len(), dir.display())?;
        }
        Command::Train { config, data, out: path } => {
            let cfg = read_config(&config)?;
            let ds = read_dataset(&data)?;
            let mut failed = None;
            let ckpt = trainer::train(&cfg, &ds, |o| {
                if failed.is_none() {
                    failed = writeln!(out, "{}", o.log_line(cfg.tasks[o.task].key)).err();
                }
            })?;
            if let Some(e) = failed {
                return Err(e.into());
            }
            save_checkpoint(&path, &ckpt)?;
            writeln!(out, "saved {} after {} steps", path.display(), ckpt.step)?;
        }
        Command::Sample { common, task, cond } => {
            let s = Sampler::load(&common)?;
            let k = s.cfg.task_index(&task)?;
            let cond = image::read_condition(&cond, s.cfg.image_size)?;
            let instruction = embedding_tensor(&encode_text(tasks::instruction_for(&task)?));
            let input = ControlInput::single(k, cond.clone(), instruction);
            s.sample(&common, &common.prompt, input, &[cond])?;
        }
        Command::SampleHybrid {
            common,
            task_a,
            cond_a,
            task_b,
            cond_b,
        } => {
            let s = Sampler::load(&common)?;
            let a = image::read_condition(&cond_a, s.cfg.image_size)?;
            let b = image::read_condition(&cond_b, s.cfg.image_size)?;
            let h = tasks::compose_hybrid(&task_a, &a, &task_b, &b, &common.prompt)?;
            writeln!(out, "instruction\t{}", h.instruction)?;
            let branches = h
                .branches
                .iter()
                .map(|(key, w, c)| {
                    Ok(AdapterBranch {
                        task: s.cfg.task_index(key)?,
                        weight: *w,
                        cond: c.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let input = ControlInput {
                branches,
                instruction: embedding_tensor(&encode_text(&h.instruction)),
            };
            s.sample(&common, &h.prompt, input, &[a, b])?;
        }
        Command::SampleZeroshot {
            common,
            cond,
            weights,
            instruction,
        } => {
            let s = Sampler::load(&common)?;
            let list = &s.cfg.tasks;
            let (w, emb) = match (weights, instruction) {
                (Some(spec), _) => {
                    let w = tasks::estimate_task_weights(
                        "",
                        &WeightMode::Manual(tasks::parse_weight_spec(&spec, list)?),
                        list,
                    )?;
                    // The hypernet reads the same mixture of instruction embeddings.
                    let mut e = vec![0f32; EMBED_DIM];
                    for (t, &wk) in list.iter().zip(&w) {
                        for (acc, v) in e.iter_mut().zip(encode_text(t.instruction)) {
                            *acc += (wk as f32) * v;
                        }
                    }
                    (w, e)
                }
                (None, Some(text)) => (
                    tasks::estimate_task_weights(&text, &WeightMode::Similarity, list)?,
                    encode_text(&text),
                ),
                (None, None) => bail!("one of --weights or --instruction is required"),
            };
            for (t, wk) in list.iter().zip(&w) {
                writeln!(out, "weight\t{}\t{wk:.6}", t.key)?;
            }
            let cond = image::read_condition(&cond, s.cfg.image_size)?;
            let branches = w
                .iter()
                .enumerate()
                .filter(|(_, &wk)| wk > 0.0)
                .map(|(task, &weight)| AdapterBranch {
                    task,
                    weight,
                    cond: cond.clone(),
                })
                .collect();
            let input = ControlInput {
                branches,
                instruction: embedding_tensor(&emb),
            };
            s.sample(&common, &common.prompt, input, &[cond])?;
        }
        Command::Eval {
            ckpt,
            data,
            task,
            count,
            seed,
        } => {
            let (cfg, model) = trainer::model_from_checkpoint(&load_checkpoint(&ckpt)?)?;
            let held = read_dataset(&data)?;
            write!(out, "{}", eval_condition_fidelity(&model, &cfg, &held, &task, count, seed)?)?;
        }
        Command::Params { config } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => Config::default(),
            };
            let base = init_base(&cfg.unet(), cfg.seed)?;
            let store = assemble(&cfg.unet(), &cfg.control(), &base, cfg.seed)?;
            write!(out, "{}", count_params(&store, cfg.tasks.len()))?;
        }
        Command::Gradcheck { seed } => {
            let mut failures = 0;
            writeln!(out, "case\tworst_rel_error\tresult")?;
            for (name, report) in gradsuite::run_all(seed)? {
                let ok = report.passes(gradsuite::TOLERANCE);
                failures += usize::from(!ok);
                writeln!(out, "{name}\t{:.3e}\t{}", report.worst(), if ok { "pass" } else { "FAIL" })?;
            }
            if failures > 0 {
                bail!("{failures} gradient checks exceeded {:e}", gradsuite::TOLERANCE);
            }
        }
    }
    Ok(())
}

struct Sampler {
    cfg: Config,
    model: UniControl,
}

impl Sampler {
    fn load(args: &SampleArgs) -> Result<Self> {
        let ckpt = load_checkpoint(&args.ckpt)?;
        let (cfg, model) = trainer::model_from_checkpoint(&ckpt)?;
        Ok(Self { cfg, model })
    }

    /// Draw `count` samples in one batch; the pixmap grid shows the
    /// conditions first, then the samples.
    fn sample(&self, args: &SampleArgs, prompt: &str, input: ControlInput, conds: &[Tensor]) -> Result<()> {
        if args.count == 0 {
            bail!("--count must be at least 1");
        }
        let n = args.count;
        let size = self.cfg.image_size;
        let guidance = GuidanceConfig {
            weight: args.guidance,
            steps: args.steps,
            ..self.cfg.guidance()
        };
        let batched = ControlInput {
            branches: input
                .branches
                .into_iter()
                .map(|b| {
                    Ok(AdapterBranch {
                        cond: Tensor::stack(&vec![b.cond; n])?,
                        ..b
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            instruction: input.instruction,
        };
        let text: Vec<f32> = (0..n).flat_map(|_| encode_text(prompt)).collect();
        let text = Tensor::new(vec![n, EMBED_DIM], text)?;
        let samples = ddim_sample(
            &self.model,
            &batched,
            &text,
            &[n, 3, size, size],
            &self.cfg.schedule()?,
            &guidance,
            args.seed,
        )?;
        let mut tiles = conds.to_vec();
        tiles.extend(samples.unstack());
        image::write_outputs(&args.out, &tiles, &samples)
    }
}
