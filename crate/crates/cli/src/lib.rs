//! The `gfss` subcommands. Each reads its inputs from `paths.*`, writes into
//! a fresh output directory and echoes the resolved configuration there as
//! `config.toml`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use gfss_core::cbbi::infer;
use gfss_core::checkpoint::{load_model, save_model};
use gfss_core::config::RunConfig;
use gfss_core::dataset::Dataset;
use gfss_core::gfst;
use gfss_core::metrics::{confusion_accumulate, fmt, ConfusionMatrix, EvalReport};
use gfss_core::pipeline::{evaluate, report_for, run_ablation, run_cifss, train_model, visible_truth, Scalar};
use gfss_core::pkl::LabelMask;
use gfss_core::registry::SessionRegistry;
use gfss_core::synthgen::{make_world, World};
use gfss_core::tensor::Tensor;
use gfss_core::training::FrozenModel;
use gfss_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Register,
    Infer,
    Eval,
    Cifss,
    Ablate,
}

/// Runs `cmd`, returning the text printed on success.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    match cmd {
        Command::Synth => synth(cfg, out),
        Command::Train => train(cfg, out),
        Command::Register => register(cfg, out),
        Command::Infer => infer_cmd(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Cifss => cifss(cfg, out),
        Command::Ablate => ablate(cfg, out),
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::Config(format!("output directory {} is not empty", out.display())));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<Dataset<Scalar>> {
    Dataset::load(RunConfig::require(&cfg.paths.data, "paths.data")?)
}

fn model(cfg: &RunConfig) -> Result<FrozenModel<Scalar>> {
    Ok(load_model(RunConfig::require(&cfg.paths.model, "paths.model")?)?.0)
}

/// The registry at `paths.registry`, or the base session of `model`.
fn registry(cfg: &RunConfig, model: &FrozenModel<Scalar>) -> Result<SessionRegistry<Scalar>> {
    let Some(dir) = &cfg.paths.registry else {
        return Ok(SessionRegistry::base(model));
    };
    let reg = SessionRegistry::load(dir)?;
    if reg.bank().base_rows() != model.bank.base_rows() || reg.bank().base_count() != model.bank.len() {
        return Err(Error::Registry(format!("registry {} was not built from this model", dir.display())));
    }
    Ok(reg)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<String> {
    let world = make_world(&cfg.world)?;
    let ds = Dataset::<Scalar>::generate(&world, &cfg.data)?;
    ds.save(out)?;
    Ok(format!(
        "dataset: {} classes ({} base, {} novel), {} evaluation images, {} support sets\n",
        world.spec.n_classes(),
        world.spec.n_base,
        world.spec.n_novel,
        ds.eval.len(),
        ds.supports.len()
    ))
}

fn train(cfg: &RunConfig, out: &Path) -> Result<String> {
    let world = World::load(RunConfig::require(&cfg.paths.data, "paths.data")?)?;
    let mut log = BufWriter::new(fs::File::create(out.join("losses.jsonl"))?);
    let mut io_err = None;
    let mut last = None;
    let result = train_model(&world, &cfg.train, |r| {
        let line = serde_json::to_string(r).expect("loss record serialises");
        if let Err(e) = writeln!(log, "{}", line) {
            io_err.get_or_insert(e);
        }
        last = Some(r.clone());
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let model = result?;
    save_model(&model, cfg.train.steps as u64, out)?;
    Ok(match last {
        Some(r) => format!("trained {} steps; final loss {} (ce {}, iou {})\n", cfg.train.steps, fmt(r.total), fmt(r.ce), fmt(r.iou)),
        None => "trained 0 steps; checkpoint holds the initialisation\n".into(),
    })
}

fn register(cfg: &RunConfig, out: &Path) -> Result<String> {
    let model = model(cfg)?;
    let ds = dataset(cfg)?;
    let reg = registry(cfg, &model)?;
    let classes = if cfg.register.classes.is_empty() {
        ds.supports.keys().copied().collect()
    } else {
        cfg.register.classes.clone()
    };
    if classes.is_empty() {
        return Err(Error::Config("no novel classes to register".into()));
    }
    let session = reg.next_session();
    let reg = reg.extend_session(session, &model, &ds.supports_for(&classes)?)?;
    reg.save(out)?;
    Ok(format!("session {}: registered classes {:?}; bank holds {} classes\n", session, classes, reg.bank().len()))
}

fn infer_cmd(cfg: &RunConfig, out: &Path) -> Result<String> {
    let model = model(cfg)?;
    let reg = registry(cfg, &model)?;
    let feats: Tensor<Scalar> = gfst::read_as(RunConfig::require(&cfg.paths.features, "paths.features")?)?;
    let pred = infer(&model, &reg, &feats, &cfg.infer)?;
    gfst::write::<f32>(out.join("predictions.gfst"), &pred.to_tensor())?;
    let n = pred.dims()[0];
    if cfg.output.pgm {
        let max_id = reg.bank().class_ids().iter().copied().max().unwrap_or(0);
        for i in 0..n {
            fs::write(out.join(format!("pred_{:04}.pgm", i)), pgm(&pred, i, max_id))?;
        }
    }
    Ok(format!("predicted {} image(s) over {} classes\n", n, reg.bank().len()))
}

/// Binary 8-bit PGM of image `i`, class ids spread over the grey range.
pub fn pgm(labels: &LabelMask, i: usize, max_id: u32) -> Vec<u8> {
    let [_, h, w] = labels.dims();
    let step = 255 / max_id.max(1);
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(labels.image(i).iter().map(|&l| (l.min(max_id) * step) as u8));
    out
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ds = dataset(cfg)?;
    let n = ds.world.spec.n_classes();
    let report = match &cfg.paths.predictions {
        Some(p) => {
            let pred = LabelMask::from_tensor(&gfst::read_as::<f32>(p)?)?;
            let truth = ds.eval_labels()?;
            let (reg, novel) = match &cfg.paths.registry {
                Some(_) => {
                    let reg = registry(cfg, &model(cfg)?)?;
                    let novel = reg.novel_ids();
                    (Some(reg), novel)
                }
                None => (None, ds.world.novel_ids()),
            };
            let truth = match &reg {
                Some(r) => visible_truth(&truth, r, &ds.world),
                None => truth,
            };
            let acc = confusion_accumulate(&pred, &truth, ConfusionMatrix::new(n))?;
            match &reg {
                Some(r) => report_for(&acc, &ds.world, r, ds.eval.len()),
                None => EvalReport::from_confusion(&acc, &ds.world.base_ids(), &novel, ds.eval.len() as u64),
            }
        }
        None => {
            let model = model(cfg)?;
            let reg = registry(cfg, &model)?;
            evaluate(&ds.world, &model, &reg, &ds.eval, &cfg.infer)?
        }
    };
    write_report(out, &ds.world, &report)?;
    Ok(report.to_text())
}

fn write_report(out: &Path, world: &World, report: &EvalReport) -> Result<()> {
    fs::write(out.join("report.txt"), report.to_text())?;
    fs::write(out.join("report.csv"), format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()))?;
    let mut per_class = String::from("class_id,split,iou\n");
    for (c, v) in &report.per_class_iou {
        let split = if world.is_novel(*c) { "novel" } else { "base" };
        let _ = writeln!(per_class, "{},{},{}", c, split, fmt(*v));
    }
    fs::write(out.join("per_class.csv"), per_class)?;
    Ok(())
}

fn cifss(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ds = dataset(cfg)?;
    let model = model(cfg)?;
    let rows = run_cifss(&ds, &model, &cfg.cifss, &cfg.infer)?;
    let mut csv = format!("session,new_classes,{},base_rows_intact\n", EvalReport::csv_header());
    let mut text = String::new();
    for r in &rows {
        let classes: Vec<String> = r.new_classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(csv, "{},{},{},{}", r.session, classes.join(" "), r.report.csv_row(), r.base_rows_intact);
        let _ = writeln!(text, "[session {}]\nnew_classes = [{}]\nbase_rows_intact = {}", r.session, classes.join(", "), r.base_rows_intact);
        text.push_str(&r.report.to_text());
        text.push('\n');
    }
    fs::write(out.join("sessions.csv"), &csv)?;
    fs::write(out.join("sessions.txt"), &text)?;
    Ok(csv)
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ds = dataset(cfg)?;
    let model = model(cfg)?;
    let rows = run_ablation(&ds, &model, &cfg.infer)?;
    let mut csv = format!("variant,{}\n", EvalReport::csv_header());
    let mut text = String::new();
    for (tag, r) in &rows {
        let _ = writeln!(csv, "{},{}", tag, r.csv_row());
        let _ = writeln!(text, "[{}]", tag);
        text.push_str(&r.to_text());
        text.push('\n');
    }
    fs::write(out.join("ablation.csv"), &csv)?;
    fs::write(out.join("ablation.txt"), &text)?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_levels() {
        let labels = LabelMask::new([1, 2, 3], vec![0, 1, 2, 2, 1, 0]).unwrap();
        let bytes = pgm(&labels, 0, 2);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 127, 254, 254, 127, 0]);
    }

    #[test]
    fn non_empty_output_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), b"").unwrap();
        let err = run(Command::Synth, &RunConfig::default(), dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
