use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use forgetir_core::degrade::build_corpus;
use forgetir_core::metrics::{degraded_baseline, evaluate};
use forgetir_core::persist::{
    load_corpus, read_report, render_table, save_corpus, write_report, write_triplets, Checkpoint, RunRecord,
};
use forgetir_core::train::{pretrain, split_heldout, EpochRecord};
use forgetir_core::unlearn::{retrain, unlearn, ProgressRecord, UnlearnOutcome};
use forgetir_core::{partition, DegradationKind, DegradedPair, MetricReport, RestorationModel, UnlearnConfig};

use crate::config::Config;

pub const BEFORE: &str = "BEFORE";
pub const AFTER: &str = "AFTER";
pub const INPUT: &str = "INPUT";
pub const RETRAIN: &str = "RETRAIN";

/// Where a command reads its inputs and writes its artifacts.
#[derive(Debug, Clone)]
pub struct Run {
    pub root: PathBuf,
    pub dir: PathBuf,
    pub name: String,
    pub cfg: Config,
    /// Saved corpus to import instead of regenerating from the config.
    pub corpus: Option<PathBuf>,
}

struct Data {
    train: Vec<DegradedPair>,
    heldout: Vec<DegradedPair>,
    input: MetricReport,
}

fn print_report(label: &str, r: &MetricReport) {
    let cells: Vec<String> = r
        .kinds
        .iter()
        .map(|k| format!("{} {:.2}/{:.4}", k.kind, k.psnr, k.ssim))
        .collect();
    println!("{label:>12}  {}", cells.join("  "));
}

fn timed<T>(record: &mut RunRecord, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    record.timings.push((stage.to_string(), start.elapsed().as_secs_f64()));
    Ok(out)
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, name: impl Into<String>, cfg: Config) -> Self {
        let root = root.into();
        let name = name.into();
        Self {
            dir: root.join(&name),
            root,
            name,
            cfg,
            corpus: None,
        }
    }

    fn child(&self, name: &str, cfg: Config) -> Self {
        Self {
            root: self.dir.clone(),
            dir: self.dir.join(name),
            name: format!("{}/{name}", self.name),
            cfg,
            corpus: self.corpus.clone(),
        }
    }

    fn record(&self) -> RunRecord {
        let mut r = RunRecord::new(self.name.clone(), self.cfg.to_json());
        r.seeds.insert("corpus".into(), self.cfg.corpus.seed);
        r.seeds.insert("model".into(), self.cfg.model.seed);
        r.seeds.insert("train".into(), self.cfg.train.seed);
        r.seeds.insert("unlearn".into(), self.cfg.unlearn.seed);
        r
    }

    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let path = self.dir.join("config.toml");
        fs::write(&path, self.cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
    }

    fn data(&self) -> Result<Data> {
        let corpus = match &self.corpus {
            Some(path) => load_corpus(path)?,
            None => build_corpus(&self.cfg.corpus, &self.cfg.degrade)?,
        };
        let (train, heldout) = split_heldout(&corpus, self.cfg.heldout_fraction)?;
        let input = degraded_baseline(&heldout, INPUT)?;
        Ok(Data { train, heldout, input })
    }

    fn finish(&self, record: &RunRecord) -> Result<()> {
        let files = write_report(record, &self.dir)?;
        println!("wrote {}", files.metrics.display());
        Ok(())
    }

    /// The pretrained checkpoint: `explicit` if given, else the one left
    /// by `pretrain` under the same output root.
    fn before_checkpoint(&self, explicit: Option<&Path>) -> PathBuf {
        explicit.map_or_else(|| self.root.join("pretrain").join("ckpt-before.bin"), Path::to_path_buf)
    }

    fn load_model(&self, path: &Path) -> Result<RestorationModel> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.model.config() != self.cfg.model {
            println!(
                "note: {} was built with {:?}; the checkpoint's model settings take precedence",
                path.display(),
                ckpt.model.config()
            );
        }
        Ok(ckpt.model)
    }

    fn dump_images(&self, model: &RestorationModel, heldout: &[DegradedPair]) -> Result<()> {
        if self.cfg.report.images > 0 {
            write_triplets(self.dir.join("images"), model, heldout, self.cfg.report.images)?;
        }
        Ok(())
    }
}

pub fn gen_corpus(run: &Run) -> Result<RunRecord> {
    run.prepare()?;
    let mut record = run.record();
    let corpus = timed(&mut record, "generate", || {
        Ok(build_corpus(&run.cfg.corpus, &run.cfg.degrade)?)
    })?;
    let path = run.dir.join("corpus.bin");
    save_corpus(&corpus, &path)?;
    println!("{} pairs written to {}", corpus.len(), path.display());
    let (_, heldout) = split_heldout(&corpus, run.cfg.heldout_fraction)?;
    let input = degraded_baseline(&heldout, INPUT)?;
    print_report(INPUT, &input);
    record.stages.push(input);
    run.finish(&record)?;
    Ok(record)
}

pub fn pretrain_cmd(run: &Run) -> Result<RunRecord> {
    run.prepare()?;
    let mut record = run.record();
    let data = run.data()?;
    print_report(INPUT, &data.input);
    record.stages.push(data.input.clone());
    let model = RestorationModel::new(run.cfg.model)?;
    println!("pretraining {} parameters on {} pairs", model.param_count(), data.train.len());
    let outcome = timed(&mut record, "pretrain", || {
        Ok(pretrain(model, &data.train, &data.heldout, &run.cfg.train, &mut |r: &EpochRecord| {
            print_report(&r.report.stage, &r.report)
        })?)
    })?;
    record.stages.extend(outcome.history.iter().map(|h| h.report.clone()));
    record.stages.push(outcome.final_report().clone().with_stage(BEFORE));
    Checkpoint::new(outcome.model.clone())
        .with_meta("stage", BEFORE)
        .save(run.dir.join("ckpt-before.bin"))?;
    run.dump_images(&outcome.model, &data.heldout)?;
    run.finish(&record)?;
    Ok(record)
}

fn unlearn_into(
    record: &mut RunRecord,
    model: RestorationModel,
    data: &Data,
    kind: DegradationKind,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    let part = partition(&data.train, kind)?;
    println!(
        "forgetting {kind}: {} forget pairs, {} retain pairs",
        part.forget().len(),
        part.retain().len()
    );
    timed(record, "unlearn", || {
        Ok(unlearn(model, &part, &data.heldout, cfg, &mut |r: &ProgressRecord| {
            print_report(&r.report.stage, &r.report)
        })?)
    })
}

pub fn unlearn_cmd(run: &Run, kind: DegradationKind, checkpoint: Option<&Path>) -> Result<RunRecord> {
    run.prepare()?;
    let mut record = run.record();
    let data = run.data()?;
    let model = run.load_model(&run.before_checkpoint(checkpoint))?;
    record.stages.push(data.input.clone());
    let outcome = unlearn_into(&mut record, model, &data, kind, &run.cfg.unlearn)?;
    record.stages.push(outcome.before.clone());
    record.stages.extend(outcome.history.iter().map(|h| h.report.clone()));
    record.stages.push(outcome.after().clone().with_stage(AFTER));
    Checkpoint::new(outcome.model.clone())
        .with_meta("stage", AFTER)
        .with_meta("forget", kind.name())
        .save(run.dir.join(format!("ckpt-after-{kind}.bin")))?;
    run.dump_images(&outcome.model, &data.heldout)?;
    run.finish(&record)?;
    Ok(record)
}

pub fn retrain_cmd(run: &Run, kind: DegradationKind) -> Result<RunRecord> {
    run.prepare()?;
    let mut record = run.record();
    let data = run.data()?;
    record.stages.push(data.input.clone());
    let part = partition(&data.train, kind)?;
    println!("retraining from scratch on {} pairs without {kind}", part.retain().len());
    let outcome = timed(&mut record, "retrain", || {
        Ok(retrain(run.cfg.model, &part, &data.heldout, &run.cfg.train, &mut |r: &EpochRecord| {
            print_report(&r.report.stage, &r.report)
        })?)
    })?;
    record.stages.extend(outcome.history.iter().map(|h| h.report.clone()));
    record.stages.push(outcome.final_report().clone().with_stage(RETRAIN));
    Checkpoint::new(outcome.model)
        .with_meta("stage", RETRAIN)
        .with_meta("forget", kind.name())
        .save(run.dir.join(format!("ckpt-retrain-{kind}.bin")))?;
    run.finish(&record)?;
    Ok(record)
}

pub fn eval_cmd(run: &Run, checkpoint: &Path, stage: &str) -> Result<RunRecord> {
    run.prepare()?;
    let mut record = run.record();
    let data = run.data()?;
    let model = run.load_model(checkpoint)?;
    record.stages.push(data.input.clone());
    let report = timed(&mut record, "eval", || Ok(evaluate(&model, &data.heldout, stage)?))?;
    print_report(stage, &report);
    record.stages.push(report);
    run.dump_images(&model, &data.heldout)?;
    run.finish(&record)?;
    Ok(record)
}

/// One named unlearning configuration inside a grid command.
pub struct Variant {
    pub label: String,
    pub cfg: Config,
}

/// Unlearns once per variant from the same pretrained model. Every variant
/// gets a complete run directory of its own; the parent record collects
/// each variant's final metrics as one stage.
fn grid(run: &Run, kind: DegradationKind, checkpoint: Option<&Path>, variants: Vec<Variant>) -> Result<RunRecord> {
    run.prepare()?;
    let mut summary = run.record();
    let data = run.data()?;
    let model = run.load_model(&run.before_checkpoint(checkpoint))?;
    summary.stages.push(data.input.clone());
    let before = evaluate(&model, &data.heldout, BEFORE)?;
    summary.stages.push(before);
    for v in variants {
        println!("== {}", v.label);
        let slug: String = v
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        let child = run.child(&slug, v.cfg);
        child.prepare()?;
        let mut record = child.record();
        record.stages.push(data.input.clone());
        let outcome = unlearn_into(&mut record, model.clone(), &data, kind, &child.cfg.unlearn)?;
        record.stages.push(outcome.before.clone());
        record.stages.extend(outcome.history.iter().map(|h| h.report.clone()));
        record.stages.push(outcome.after().clone().with_stage(AFTER));
        Checkpoint::new(outcome.model.clone())
            .with_meta("stage", v.label.clone())
            .save(child.dir.join(format!("ckpt-after-{kind}.bin")))?;
        child.finish(&record)?;
        summary.timings.extend(record.timings.iter().map(|(s, t)| (format!("{}/{s}", v.label), *t)));
        summary.stages.push(outcome.after().clone().with_stage(v.label));
    }
    print!("{}", render_table(&summary));
    run.finish(&summary)?;
    Ok(summary)
}

pub const ABLATIONS: [(&str, bool, bool); 3] = [("adv-only", false, true), ("ins-only", true, false), ("both", true, true)];

pub fn ablate_cmd(run: &Run, kind: DegradationKind, checkpoint: Option<&Path>) -> Result<RunRecord> {
    let variants = ABLATIONS
        .iter()
        .map(|&(label, ins, adv)| {
            let mut cfg = run.cfg.clone();
            cfg.unlearn.enable_ins = ins;
            cfg.unlearn.enable_adv = adv;
            Variant {
                label: label.to_string(),
                cfg,
            }
        })
        .collect();
    grid(run, kind, checkpoint, variants)
}

/// Grid over `w_adv : w_ins` ratios, learning rates and batch sizes. Empty
/// axes fall back to the configured value.
pub struct SweepAxes {
    pub ratios: Vec<f64>,
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

pub fn sweep_variants(base: &Config, axes: &SweepAxes) -> Vec<Variant> {
    let u = &base.unlearn;
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let ratios = or(&axes.ratios, u.w_adv / u.w_ins);
    let lrs = or(&axes.lrs, u.optimizer.lr);
    let batches = if axes.batch_sizes.is_empty() { vec![u.batch_size] } else { axes.batch_sizes.clone() };
    let mut out = Vec::new();
    for &ratio in &ratios {
        for &lr in &lrs {
            for &batch in &batches {
                let mut cfg = base.clone();
                cfg.unlearn.w_adv = ratio * cfg.unlearn.w_ins;
                cfg.unlearn.optimizer.lr = lr;
                cfg.unlearn.batch_size = batch;
                let mut label = format!("ratio {ratio}:1");
                if lrs.len() > 1 {
                    label.push_str(&format!(" lr {lr}"));
                }
                if batches.len() > 1 {
                    label.push_str(&format!(" batch {batch}"));
                }
                out.push(Variant { label, cfg });
            }
        }
    }
    out
}

pub fn sweep_cmd(run: &Run, kind: DegradationKind, checkpoint: Option<&Path>, axes: &SweepAxes) -> Result<RunRecord> {
    grid(run, kind, checkpoint, sweep_variants(&run.cfg, axes))
}

/// Renders the table of every run under the output root (or just `name`)
/// and refreshes its `table.txt`. Optionally dumps image strips for a
/// checkpoint.
pub fn report_cmd(root: &Path, name: Option<&str>, images: Option<(&Path, &Run)>) -> Result<()> {
    let mut dirs: Vec<PathBuf> = match name {
        Some(n) => vec![root.join(n)],
        None => fs::read_dir(root)
            .with_context(|| format!("listing {}", root.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics.json").is_file())
            .collect(),
    };
    dirs.sort();
    if dirs.is_empty() {
        anyhow::bail!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no runs with metrics under {}", root.display())
        ));
    }
    for dir in dirs {
        let record = read_report(dir.join("metrics.json"))?;
        let table = render_table(&record);
        fs::write(dir.join("table.txt"), &table).with_context(|| format!("writing {}", dir.display()))?;
        println!("# {}\n{table}", record.name);
    }
    if let Some((ckpt, run)) = images {
        let data = run.data()?;
        let model = run.load_model(ckpt)?;
        let n = run.cfg.report.images.max(1);
        let written = write_triplets(run.dir.join("images"), &model, &data.heldout, n)?;
        println!("wrote {} image strips to {}", written.len(), run.dir.join("images").display());
    }
    Ok(())
}
