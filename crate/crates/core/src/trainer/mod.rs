//! Training loop, evaluation, and the three-stage transfer schedule.
//!
//! Stage 1 trains the DP encoder (through a throwaway bridge) and stage 2 the
//! RGB encoder, each with its own decoder. Stage 3 builds the full network
//! from the two encoders plus a fresh fusion module and decoder.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Moments};
pub use optim::{adam_step, poly_lr, OptimConfig};

use crate::dpsim::{Batch, RgbDpSample};
use crate::error::{Error, Result};
use crate::loss::{total_loss_var, LossConfig};
use crate::metrics::MetricsRow;
use crate::model::{self, ablation_variants, ModelConfig, ModelKind, DP, RGB};
use crate::nn::params::name_seed;
use crate::nn::{Ctx, ParamSet};
use crate::tensor::TensorMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// DP → depth.
    Dp = 1,
    /// RGB → depth.
    Rgb = 2,
    /// RGB + DP → depth.
    Full = 3,
}

impl Stage {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn kind(self) -> ModelKind {
        match self {
            Stage::Dp => ModelKind::DpOnly,
            Stage::Rgb => ModelKind::RgbOnly,
            Stage::Full => ModelKind::Full,
        }
    }

    /// Untagged checkpoints are treated as full networks.
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Stage::Dp),
            2 => Ok(Stage::Rgb),
            0 | 3 => Ok(Stage::Full),
            t => Err(Error::Data(format!("unknown stage tag {t}"))),
        }
    }

    /// Seed used to initialize this stage's network.
    pub fn seed(self, base: u64) -> u64 {
        base.wrapping_add(self.tag() as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub stage: Stage,
    /// Name prefixes of the trained parameters; empty trains all of them.
    pub trainable: Vec<String>,
}

impl StageSpec {
    pub fn new(stage: Stage) -> Self {
        Self { stage, trainable: Vec::new() }
    }

    pub fn trains(&self, name: &str) -> bool {
        self.trainable.is_empty() || self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Seeded sampling without replacement, reshuffled every epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_indices(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Training loss of every step, before that step's update.
    pub losses: Vec<f64>,
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(params: &ParamSet, spec: &StageSpec, cfg: &ModelConfig, lc: &LossConfig, batch: &Batch) -> Result<(f64, ParamSet)> {
    let mut ctx = Ctx::with_trainable(params, |n| spec.trains(n));
    let out = model::forward_inputs(&mut ctx, spec.stage.kind(), cfg, &batch.inputs)?;
    let loss = total_loss_var(&mut ctx.g, out.depth, &out.intermediates, &batch.target, &batch.mask, lc)?;
    let value = ctx.g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    Ok((value, ctx.param_grads(loss)?))
}

/// Runs `oc.total_steps` Adam steps from `init` on `samples`. Logs
/// `step<TAB>loss` every `oc.log_every` steps and after the last one.
pub fn train_stage(
    spec: &StageSpec,
    init: ParamSet,
    samples: &[RgbDpSample],
    cfg: &ModelConfig,
    oc: &OptimConfig,
    lc: &LossConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    oc.validate()?;
    if samples.is_empty() {
        return Err(Error::Data(format!("stage {} has no training samples", spec.stage.tag())));
    }
    model::declare(cfg, spec.stage.kind())?.check(&init)?;
    let mut params = init;
    let mut moments = Moments::default();
    let mut sampler = BatchSampler::new(samples.len(), name_seed(oc.seed, &format!("stage{}", spec.stage.tag())));
    let batch_size = oc.batch_size.min(samples.len());
    let mut losses = Vec::with_capacity(oc.total_steps as usize);
    for step in 0..oc.total_steps {
        let picked: Vec<&RgbDpSample> = sampler.next_indices(batch_size).into_iter().map(|i| &samples[i]).collect();
        let batch = Batch::from_samples(&picked)?;
        let (loss, grads) = loss_and_grads(&params, spec, cfg, &lc.at_step(step), &batch)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("stage {} step {step}: {m}", spec.stage.tag())),
                other => other,
            })?;
        if step % oc.log_every == 0 || step + 1 == oc.total_steps {
            writeln!(log, "{step}\t{loss}").map_err(|e| Error::io("<training log>", e))?;
        }
        losses.push(loss);
        adam_step(&mut params, &grads, &mut moments, oc, step)?;
    }
    log.flush().map_err(|e| Error::io("<training log>", e))?;
    Ok(TrainOutcome { checkpoint: Checkpoint::new(spec.stage.tag(), oc.total_steps, &params, Some(&moments)), losses })
}

/// Predicted (H, W, 1) inverse depth for one sample.
pub fn predict(params: &ParamSet, kind: ModelKind, cfg: &ModelConfig, sample: &RgbDpSample) -> Result<TensorMap> {
    let batch = Batch::from_samples(&[sample])?;
    let out = model::run(params, kind, cfg, &batch.inputs)?;
    let [_, h, w, _] = out.depth.dims4()?;
    out.depth.reshape(vec![h, w, 1])
}

/// Mean metrics of precomputed (H, W, 1) predictions.
pub fn evaluate_predictions(name: &str, preds: &[TensorMap], samples: &[RgbDpSample]) -> Result<MetricsRow> {
    if preds.len() != samples.len() {
        return Err(Error::Data(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let rows = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| MetricsRow::single(name, p, &s.invdepth, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    MetricsRow::mean(name, &rows)
}

/// Checks `ckpt` against `cfg` and returns the network kind it holds.
pub fn checkpoint_kind(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<ModelKind> {
    let kind = Stage::from_tag(ckpt.stage)?.kind();
    model::declare(cfg, kind)?
        .check(&ckpt.params)
        .map_err(|e| Error::Data(format!("checkpoint does not match the configuration: {e}")))?;
    Ok(kind)
}

pub fn evaluate(name: &str, ckpt: &Checkpoint, samples: &[RgbDpSample], cfg: &ModelConfig) -> Result<MetricsRow> {
    let kind = checkpoint_kind(ckpt, cfg)?;
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let preds = samples.iter().map(|s| predict(&ckpt.params, kind, cfg, s)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(name, &preds, samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmtlMode {
    /// Stages 1, 2, 3 with encoder transfer.
    Transfer,
    /// Stage 3 only, from a fresh initialization.
    Scratch,
}

/// Training sets for the three stages.
#[derive(Clone, Copy, Debug)]
pub struct CmtlData<'a> {
    pub dp: &'a [RgbDpSample],
    pub rgb: &'a [RgbDpSample],
    pub full: &'a [RgbDpSample],
}

/// Steps per stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CmtlSteps {
    pub dp: u64,
    pub rgb: u64,
    pub full: u64,
}

impl CmtlSteps {
    pub fn uniform(steps: u64) -> Self {
        Self { dp: steps, rgb: steps, full: steps }
    }
}

/// File names written by [`run_cmtl`] inside its output directory.
pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("stage{}.dpck", stage.tag()))
}

pub fn log_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("stage{}.log", stage.tag()))
}

pub const STAGE3_INIT: &str = "stage3_init.dpck";

/// Writes to a file and a second sink.
struct Tee<'a> {
    file: BufWriter<File>,
    echo: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.file.write_all(buf)?;
        self.echo.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()?;
        self.echo.flush()
    }
}

/// Trains one stage with a per-stage log file, copied to `echo`, and saves its checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train_stage_to(
    dir: &Path,
    spec: &StageSpec,
    init: ParamSet,
    samples: &[RgbDpSample],
    cfg: &ModelConfig,
    oc: &OptimConfig,
    lc: &LossConfig,
    echo: &mut dyn Write,
) -> Result<Checkpoint> {
    let path = log_path(dir, spec.stage);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut log = Tee { file: BufWriter::new(file), echo };
    let out = train_stage(spec, init, samples, cfg, oc, lc, &mut log)?;
    out.checkpoint.save(&checkpoint_path(dir, spec.stage))?;
    Ok(out.checkpoint)
}

/// Fresh stage-3 parameters with `dp.*` taken from `dp` and `rgb.*` from `rgb`.
pub fn compose_stage3(cfg: &ModelConfig, dp: &ParamSet, rgb: &ParamSet) -> Result<ParamSet> {
    let mut params = model::build(cfg, ModelKind::Full, Stage::Full.seed(cfg.seed))?;
    for (prefix, src) in [(DP, dp), (RGB, rgb)] {
        let names: Vec<String> = params.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
        for name in names {
            let t = src.get(&name).ok_or_else(|| Error::MissingParam(format!("{name} (transferred encoder)")))?;
            let slot = params.get_mut(&name).expect("listed");
            if slot.shape() != t.shape() {
                return Err(Error::shape(format!("transferred `{name}` is {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
    }
    Ok(params)
}

/// Runs the staged schedule into `dir` and returns the stage-3 checkpoint.
///
/// Transfer mode writes `stage1`, `stage2`, `stage3_init` and `stage3`
/// checkpoints; stage 3 reads the encoders back from the first two files.
/// Scratch mode only touches the stage-3 files.
#[allow(clippy::too_many_arguments)]
pub fn run_cmtl(
    mode: CmtlMode,
    cfg: &ModelConfig,
    oc: &OptimConfig,
    lc: &LossConfig,
    data: CmtlData<'_>,
    steps: CmtlSteps,
    dir: &Path,
    echo: &mut dyn Write,
) -> Result<Checkpoint> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let with_steps = |n| OptimConfig { total_steps: n, ..oc.clone() };
    let init = match mode {
        CmtlMode::Transfer => {
            let s1 = model::build(cfg, ModelKind::DpOnly, Stage::Dp.seed(cfg.seed))?;
            train_stage_to(dir, &StageSpec::new(Stage::Dp), s1, data.dp, cfg, &with_steps(steps.dp), lc, echo)?;
            let s2 = model::build(cfg, ModelKind::RgbOnly, Stage::Rgb.seed(cfg.seed))?;
            train_stage_to(dir, &StageSpec::new(Stage::Rgb), s2, data.rgb, cfg, &with_steps(steps.rgb), lc, echo)?;
            let dp = Checkpoint::load(&checkpoint_path(dir, Stage::Dp))?;
            let rgb = Checkpoint::load(&checkpoint_path(dir, Stage::Rgb))?;
            compose_stage3(cfg, &dp.params, &rgb.params)?
        }
        CmtlMode::Scratch => model::build(cfg, ModelKind::Full, Stage::Full.seed(cfg.seed))?,
    };
    Checkpoint::new(Stage::Full.tag(), 0, &init, None).save(&dir.join(STAGE3_INIT))?;
    train_stage_to(dir, &StageSpec::new(Stage::Full), init, data.full, cfg, &with_steps(steps.full), lc, echo)
}

/// Budget and data for an ablation sweep.
#[derive(Clone, Copy, Debug)]
pub struct AblationPlan<'a> {
    pub data: CmtlData<'a>,
    pub eval: &'a [RgbDpSample],
    pub steps: CmtlSteps,
}

/// Trains and evaluates every ablation variant of `base`. Stage-2 pretraining
/// does not depend on the DP settings, so it runs once and is shared;
/// stage-1 runs are shared between variants with identical DP encoders.
pub fn run_ablation(
    base: &ModelConfig,
    oc: &OptimConfig,
    lc: &LossConfig,
    plan: AblationPlan<'_>,
    dir: &Path,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    let variants = ablation_variants(base);
    let with_steps = |n| OptimConfig { total_steps: n, ..oc.clone() };
    let mut sink = io::sink();
    let mut rgb_pre: Option<ParamSet> = None;
    let mut dp_pre: BTreeMap<String, ParamSet> = BTreeMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in &variants {
        v.cfg.validate()?;
        let init = if v.transfer {
            if rgb_pre.is_none() {
                let s2 = model::build(&v.cfg, ModelKind::RgbOnly, Stage::Rgb.seed(v.cfg.seed))?;
                let out = train_stage(&StageSpec::new(Stage::Rgb), s2, plan.data.rgb, &v.cfg, &with_steps(plan.steps.rgb), lc, &mut sink)?;
                rgb_pre = Some(out.checkpoint.params);
            }
            let key = format!("{:?}/{}/{:?}", v.cfg.wbipam, v.cfg.dp_depth, v.cfg.scaled_attention);
            if !dp_pre.contains_key(&key) {
                let s1 = model::build(&v.cfg, ModelKind::DpOnly, Stage::Dp.seed(v.cfg.seed))?;
                let out = train_stage(&StageSpec::new(Stage::Dp), s1, plan.data.dp, &v.cfg, &with_steps(plan.steps.dp), lc, &mut sink)?;
                dp_pre.insert(key.clone(), out.checkpoint.params);
            }
            compose_stage3(&v.cfg, &dp_pre[&key], rgb_pre.as_ref().expect("trained above"))?
        } else {
            model::build(&v.cfg, ModelKind::Full, Stage::Full.seed(v.cfg.seed))?
        };
        let vdir = dir.join(v.name);
        std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        let ckpt = train_stage_to(&vdir, &StageSpec::new(Stage::Full), init, plan.data.full, &v.cfg, &with_steps(plan.steps.full), lc, &mut sink)?;
        let row = evaluate(v.name, &ckpt, plan.eval, &v.cfg)?;
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Comma-separated table with a header line.
pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, 3);
        let mut first: Vec<usize> = s.next_indices(5);
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let mut again = BatchSampler::new(5, 3);
        assert_eq!(again.next_indices(7), {
            let mut t = BatchSampler::new(5, 3);
            t.next_indices(7)
        });
    }

    #[test]
    fn stage_tags() {
        for s in [Stage::Dp, Stage::Rgb, Stage::Full] {
            assert_eq!(Stage::from_tag(s.tag()).unwrap(), s);
        }
        assert_eq!(Stage::from_tag(0).unwrap(), Stage::Full);
        assert!(Stage::from_tag(4).is_err());
    }

    #[test]
    fn trainable_prefixes() {
        let spec = StageSpec { stage: Stage::Full, trainable: vec!["fuse.".into(), "dec.".into()] };
        assert!(spec.trains("dec.out.w"));
        assert!(!spec.trains("rgb.stem.w"));
        assert!(StageSpec::new(Stage::Dp).trains("anything"));
    }
}
