//! Command-line front end: `synth`, `train`, `eval`, `infer`, `gradcheck`, `ablate`.
//!
//! Settings come from built-in defaults, then an optional `key = value` file
//! (`--config`), then `--set key=value` overrides. Unknown keys are rejected
//! and the resolved settings are echoed to standard error.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use crate::dpsim::{self, fmap, Manifest, SimConfig, Split};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::loss::LossConfig;
use crate::model::{FusionMode, ModelConfig, ScoreNorm};
use crate::trainer::{self, AblationPlan, Checkpoint, CmtlData, CmtlMode, CmtlSteps, OptimConfig, Stage, StageSpec};
use crate::wbipam::{Axis, WbipamMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Every tunable setting of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Pretraining budgets of the transfer stages.
    pub dp_steps: u64,
    pub rgb_steps: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), sim: SimConfig::default(), optim: OptimConfig::default(), loss: LossConfig::default(), dp_steps: 1000, rgb_steps: 1000 }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn pick<T: Copy>(key: &str, v: &str, table: &[(&str, T)]) -> Result<T> {
    table.iter().find(|(n, _)| *n == v).map(|&(_, t)| t).ok_or_else(|| {
        let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        Error::config(format!("{key}: expected one of {names:?}, got {v:?}"))
    })
}

fn name_of<T: PartialEq>(v: T, table: &[(&'static str, T)]) -> &'static str {
    table.iter().find(|(_, t)| *t == v).map(|(n, _)| *n).expect("every variant is listed")
}

const AXES: &[(&str, Axis)] = &[("vertical", Axis::Vertical), ("horizontal", Axis::Horizontal)];
const ATTENTION: &[(&str, WbipamMode)] = &[
    ("full", WbipamMode::Full),
    ("no-window", WbipamMode::NoWindow),
    ("unidirectional", WbipamMode::Unidirectional),
    ("disabled", WbipamMode::Disabled),
];
const FUSION: &[(&str, FusionMode)] = &[
    ("feature-wise", FusionMode::FeatureWise),
    ("pixel-wise", FusionMode::PixelWise),
    ("channel-wise", FusionMode::ChannelWise),
    ("concat-only", FusionMode::ConcatOnly),
];
const NORMS: &[(&str, ScoreNorm)] = &[("softmax", ScoreNorm::Softmax), ("none", ScoreNorm::None)];

impl RunConfig {
    /// Applies one setting. `model.axis` also sets the simulator's axis so the
    /// rendered disparity and the attention strips always agree.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let (s, o, l) = (&mut self.sim, &mut self.optim, &mut self.loss);
        match key {
            "model.height" => m.height = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.base_channels" => m.base_channels = parse(key, v)?,
            "model.stages" => m.stages = parse(key, v)?,
            "model.expansion" => m.expansion = parse(key, v)?,
            "model.dp_depth" => m.dp_depth = parse(key, v)?,
            "model.window" => m.window = parse(key, v)?,
            "model.axis" => {
                m.axis = pick(key, v, AXES)?;
                s.axis = m.axis;
            }
            "model.attention" => m.wbipam = pick(key, v, ATTENTION)?,
            "model.scaled_attention" => m.scaled_attention = parse_bool(key, v)?,
            "model.fusion" => m.fusion = pick(key, v, FUSION)?,
            "model.score_norm" => m.score_norm = pick(key, v, NORMS)?,
            "model.deep_supervision" => m.deep_supervision = parse_bool(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,
            "sim.height" => s.height = parse(key, v)?,
            "sim.width" => s.width = parse(key, v)?,
            "sim.focus" => s.focus = parse(key, v)?,
            "sim.gain" => s.gain = parse(key, v)?,
            "sim.max_disparity" => s.max_disparity = parse(key, v)?,
            "sim.blur" => s.blur = parse_bool(key, v)?,
            "optim.lr0" => o.lr0 = parse(key, v)?,
            "optim.beta1" => o.beta1 = parse(key, v)?,
            "optim.beta2" => o.beta2 = parse(key, v)?,
            "optim.eps" => o.eps = parse(key, v)?,
            "optim.steps" => o.total_steps = parse(key, v)?,
            "optim.power" => o.power = parse(key, v)?,
            "optim.batch_size" => o.batch_size = parse(key, v)?,
            "optim.log_every" => o.log_every = parse(key, v)?,
            "optim.seed" => o.seed = parse(key, v)?,
            "optim.dp_steps" => self.dp_steps = parse(key, v)?,
            "optim.rgb_steps" => self.rgb_steps = parse(key, v)?,
            "loss.lambda" => l.lambda = parse(key, v)?,
            "loss.scales" => l.scales = parse(key, v)?,
            "loss.keep_orientation" => l.keep_orientation = parse_bool(key, v)?,
            "loss.lambda_ramp" => l.lambda_ramp = parse(key, v)?,
            "loss.weights" => {
                l.weights = match v {
                    "equal" => None,
                    list => Some(list.split(',').map(|x| parse(key, x.trim())).collect::<Result<Vec<f64>>>()?),
                }
            }
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting in a stable order, formatted so that `set` reads it back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, s, o, l) = (&self.model, &self.sim, &self.optim, &self.loss);
        vec![
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.stages", m.stages.to_string()),
            ("model.expansion", m.expansion.to_string()),
            ("model.dp_depth", m.dp_depth.to_string()),
            ("model.window", m.window.to_string()),
            ("model.axis", name_of(m.axis, AXES).into()),
            ("model.attention", name_of(m.wbipam, ATTENTION).into()),
            ("model.scaled_attention", m.scaled_attention.to_string()),
            ("model.fusion", name_of(m.fusion, FUSION).into()),
            ("model.score_norm", name_of(m.score_norm, NORMS).into()),
            ("model.deep_supervision", m.deep_supervision.to_string()),
            ("model.seed", m.seed.to_string()),
            ("sim.height", s.height.to_string()),
            ("sim.width", s.width.to_string()),
            ("sim.focus", s.focus.to_string()),
            ("sim.gain", s.gain.to_string()),
            ("sim.max_disparity", s.max_disparity.to_string()),
            ("sim.blur", s.blur.to_string()),
            ("optim.lr0", o.lr0.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.steps", o.total_steps.to_string()),
            ("optim.power", o.power.to_string()),
            ("optim.batch_size", o.batch_size.to_string()),
            ("optim.log_every", o.log_every.to_string()),
            ("optim.seed", o.seed.to_string()),
            ("optim.dp_steps", self.dp_steps.to_string()),
            ("optim.rgb_steps", self.rgb_steps.to_string()),
            ("loss.lambda", l.lambda.to_string()),
            ("loss.scales", l.scales.to_string()),
            ("loss.keep_orientation", l.keep_orientation.to_string()),
            ("loss.lambda_ramp", l.lambda_ramp.to_string()),
            (
                "loss.weights",
                match &l.weights {
                    None => "equal".into(),
                    Some(w) => w.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
                },
            ),
        ]
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies a `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sim.validate()?;
        self.optim.validate()?;
        self.loss.validate()
    }

    pub fn resolve(config: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut rc = Self::default();
        if let Some(p) = config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            rc.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::config(format!("--set expects key=value, got {o:?}")))?;
            rc.set(k.trim(), v.trim())?;
        }
        rc.validate()?;
        Ok(rc)
    }
}

#[derive(Parser, Debug)]
#[command(name = "dpdepth", version, about = "RGB + dual-pixel relative depth: data synthesis, training, evaluation")]
pub struct Cli {
    /// Settings file with `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set optim.steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    Full,
    NoCmtl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage or the whole transfer schedule.
    Train {
        /// Dataset directory (or manifest) for the DP and full stages.
        #[arg(long)]
        data: PathBuf,
        /// Dataset for RGB pretraining; defaults to --data.
        #[arg(long)]
        rgb_data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        stage: StageArg,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Directory holding stage1.dpck and stage2.dpck for `--stage 3`; defaults to --out.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split and print a metrics row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Predict depth for one sample directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        /// Output map; defaults to depth.fmap inside the sample directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks, worst relative error per module.
    Gradcheck,
    /// Train and evaluate every ablation configuration.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rgb_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn load_split(path: &Path, split: Option<Split>) -> Result<Vec<dpsim::RgbDpSample>> {
    let samples = Manifest::open(path)?.load(split)?;
    if samples.is_empty() {
        let which = split.map_or("any".to_string(), |s| s.to_string());
        return Err(Error::Data(format!("{}: no samples in split {which}", path.display())));
    }
    Ok(samples)
}

fn write_err(out: &mut dyn Write, e: std::io::Error) -> Error {
    let _ = out.flush();
    Error::io("<stdout>", e)
}

/// Runs one parsed command, writing tables and summaries to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let rc = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    for line in rc.render().lines() {
        let _ = writeln!(err, "# {line}");
    }
    let save_config = |dir: &Path| -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        std::fs::write(&p, rc.render()).map_err(|e| Error::io(&p, e))
    };
    match &cli.command {
        Command::Synth { n, seed, out: dir } => {
            let entries = dpsim::make_dataset(*n, *seed, dir, &rc.sim)?;
            writeln!(out, "wrote {} samples to {}", entries.len(), dir.display()).map_err(|e| write_err(out, e))?;
        }
        Command::Train { data, rgb_data, stage, out: dir, from } => {
            save_config(dir)?;
            let train = load_split(data, Some(Split::Train))?;
            let rgb = match rgb_data {
                Some(p) => load_split(p, Some(Split::Train))?,
                None => train.clone(),
            };
            let steps = CmtlSteps { dp: rc.dp_steps, rgb: rc.rgb_steps, full: rc.optim.total_steps };
            let cmtl = |mode, out: &mut dyn Write| {
                trainer::run_cmtl(mode, &rc.model, &rc.optim, &rc.loss, CmtlData { dp: &train, rgb: &rgb, full: &train }, steps, dir, out)
            };
            let single = |stage: Stage, init, samples: &[dpsim::RgbDpSample], out: &mut dyn Write| {
                trainer::train_stage_to(dir, &StageSpec::new(stage), init, samples, &rc.model, &rc.optim, &rc.loss, out)
            };
            let ckpt = match stage {
                StageArg::Full => cmtl(CmtlMode::Transfer, out)?,
                StageArg::NoCmtl => cmtl(CmtlMode::Scratch, out)?,
                StageArg::One => single(Stage::Dp, crate::model::build(&rc.model, Stage::Dp.kind(), Stage::Dp.seed(rc.model.seed))?, &train, out)?,
                StageArg::Two => single(Stage::Rgb, crate::model::build(&rc.model, Stage::Rgb.kind(), Stage::Rgb.seed(rc.model.seed))?, &rgb, out)?,
                StageArg::Three => {
                    let src = from.as_deref().unwrap_or(dir);
                    let dp = Checkpoint::load(&trainer::checkpoint_path(src, Stage::Dp))?;
                    let rgbc = Checkpoint::load(&trainer::checkpoint_path(src, Stage::Rgb))?;
                    let init = trainer::compose_stage3(&rc.model, &dp.params, &rgbc.params)?;
                    Checkpoint::new(Stage::Full.tag(), 0, &init, None).save(&dir.join(trainer::STAGE3_INIT))?;
                    single(Stage::Full, init, &train, out)?
                }
            };
            writeln!(out, "stage {} checkpoint after {} steps in {}", ckpt.stage, ckpt.step, dir.display()).map_err(|e| write_err(out, e))?;
        }
        Command::Eval { checkpoint, data, split, name } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let samples = load_split(data, split.split())?;
            let row = trainer::evaluate(name, &ckpt, &samples, &rc.model)?;
            write!(out, "{}", trainer::metrics_table(&[row])).map_err(|e| write_err(out, e))?;
        }
        Command::Infer { checkpoint, sample, out: dest } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let kind = trainer::checkpoint_kind(&ckpt, &rc.model)?;
            let s = dpsim::read_sample(sample)?;
            let depth = trainer::predict(&ckpt.params, kind, &rc.model, &s)?;
            let dest = dest.clone().unwrap_or_else(|| sample.join("depth.fmap"));
            fmap::write(&dest, &depth)?;
            writeln!(out, "wrote {}", dest.display()).map_err(|e| write_err(out, e))?;
        }
        Command::Gradcheck => {
            let entries = gradsuite::run_suite()?;
            writeln!(out, "module,worst_rel_err,pass").map_err(|e| write_err(out, e))?;
            let mut ok = true;
            for (module, worst, pass) in gradsuite::summarize(&entries) {
                ok &= pass;
                writeln!(out, "{module},{worst:.3e},{pass}").map_err(|e| write_err(out, e))?;
            }
            if !ok {
                for e in entries.iter().filter(|e| !e.passed()) {
                    let _ = writeln!(err, "failed: {} / {}: {:.3e} > {:.0e}", e.module, e.case, e.report.max_rel_error(), e.tolerance);
                }
                return Ok(EXIT_NUMERICAL);
            }
        }
        Command::Ablate { data, rgb_data, out: dir, split } => {
            save_config(dir)?;
            let train = load_split(data, Some(Split::Train))?;
            let rgb = match rgb_data {
                Some(p) => load_split(p, Some(Split::Train))?,
                None => train.clone(),
            };
            let eval = load_split(data, split.split())?;
            let plan = AblationPlan {
                data: CmtlData { dp: &train, rgb: &rgb, full: &train },
                eval: &eval,
                steps: CmtlSteps { dp: rc.dp_steps, rgb: rc.rgb_steps, full: rc.optim.total_steps },
            };
            writeln!(out, "{}", crate::metrics::MetricsRow::CSV_HEADER).map_err(|e| write_err(out, e))?;
            let mut failed = None;
            trainer::run_ablation(&rc.model, &rc.optim, &rc.loss, plan, dir, |row| {
                if let Err(e) = writeln!(out, "{row}").and_then(|_| out.flush()) {
                    failed.get_or_insert(e);
                }
            })?;
            if let Some(e) = failed {
                return Err(Error::io("<stdout>", e));
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_config_reads_back() {
        let mut rc = RunConfig::default();
        rc.set("model.fusion", "channel-wise").unwrap();
        rc.set("loss.weights", "1, 0.5").unwrap();
        rc.set("model.axis", "horizontal").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&rc.render(), "echo").unwrap();
        assert_eq!(back, rc);
        assert_eq!(back.sim.axis, Axis::Horizontal);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let mut rc = RunConfig::default();
        assert!(rc.set("model.colour", "1").is_err());
        assert!(rc.set("model.stages", "six").is_err());
        assert!(rc.apply_text("model.stages 6", "x").is_err());
        assert!(rc.apply_text("# only a comment\n\nmodel.stages = 5 # trailing\n", "x").is_ok());
        assert_eq!(rc.model.stages, 5);
    }
}
