use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lawin::analysis::flops::FlopsReport;
use lawin::analysis::suite::{run_suite, Level};
use lawin::aspp::PyramidConfig;
use lawin::checkpoint;
use lawin::data::{synthesize, write_atomic, Dataset, Raster, SynthConfig};
use lawin::segmenter::{evaluate, train, EvalReport, Segmenter, StepMetrics, TrainOptions};

use crate::config::RunConfig;

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Usage = 1,
    NumericalAbort = 2,
    PropertyFailure = 3,
}

/// Worker count from `LAWIN_THREADS`; unset or 0 means single-threaded.
pub fn threads_from_env() -> anyhow::Result<usize> {
    match std::env::var("LAWIN_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .with_context(|| format!("LAWIN_THREADS must be a non-negative integer, got `{v}`")),
        _ => Ok(0),
    }
}

pub fn metrics_tsv(rows: &[StepMetrics]) -> String {
    let mut out = String::from("step\tloss\tacc\tmiou\n");
    for m in rows {
        writeln!(out, "{}\t{}\t{}\t{}", m.step, m.loss, m.pixel_accuracy, m.miou).unwrap();
    }
    out
}

pub fn format_report(r: &EvalReport) -> String {
    let mut out = format!("pixel accuracy {:.4}\n", r.pixel_accuracy);
    for (c, iou) in r.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => writeln!(out, "class {c:>3} IoU {v:.4}").unwrap(),
            None => writeln!(out, "class {c:>3} IoU -").unwrap(),
        }
    }
    writeln!(out, "mIoU {:.4} over {} pixels", r.miou, r.pixels).unwrap();
    out
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Trains from a run config. Writes `config.json`, `metrics.tsv`,
/// scheduled `step_NNNNNN.lawn` checkpoints and `final.lawn` into `out`.
pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<Exit> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let threads = threads_from_env()?;
    let data = Dataset::load(&cfg.data.train, cfg.data.num_classes)?;
    let mut model = Segmenter::new(cfg.model(), cfg.train.seed)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_atomic(&args.out.join("config.json"), cfg.to_json().as_bytes())?;
    println!(
        "training {} parameters on {} images for {} steps (seed {})",
        model.num_params(),
        data.len(),
        cfg.train.steps,
        cfg.train.seed
    );

    let every = (cfg.train.steps / 20).max(1);
    let mut rows = Vec::with_capacity(cfg.train.steps);
    let opts = TrainOptions {
        threads,
        checkpoint_dir: Some(args.out.clone()),
    };
    let result = train(&mut model, &data, &cfg.schedule(), &opts, |m| {
        rows.push(*m);
        if m.step % every == 0 || m.step == cfg.train.steps {
            println!("step {:>6}  loss {:.5}  acc {:.4}  mIoU {:.4}", m.step, m.loss, m.pixel_accuracy, m.miou);
        }
    });
    write_atomic(&args.out.join("metrics.tsv"), metrics_tsv(&rows).as_bytes())?;
    match result {
        Ok(_) => {}
        Err(e @ lawin::Error::NonFiniteLoss { .. }) => {
            eprintln!("error: {e}");
            return Ok(Exit::NumericalAbort);
        }
        Err(e) => return Err(e.into()),
    }
    if let Some(val) = &cfg.data.val {
        let val = Dataset::load(val, cfg.data.num_classes)?;
        let eval = evaluate(&model, &val, cfg.data.ignore_index)?;
        print!("validation\n{}", format_report(&eval.report));
    }
    println!("wrote {}", args.out.join("final.lawn").display());
    Ok(Exit::Success)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

fn sibling_config(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join("config.json")
}

/// Evaluates a checkpoint on a dataset. With `out`, writes one predicted
/// mask per image plus `report.json`.
pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<Exit> {
    let cfg_path = args.config.clone().unwrap_or_else(|| sibling_config(&args.checkpoint));
    let text = std::fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = RunConfig::from_json(&text).with_context(|| format!("parsing {}", cfg_path.display()))?;
    let mut model = Segmenter::new(cfg.model(), 0)?;
    let tensors = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    checkpoint::restore(&mut model.store, tensors)?;
    let data = Dataset::load(&args.dataset, cfg.data.num_classes)?;
    let eval = evaluate(&model, &data, cfg.data.ignore_index)?;
    print!("{}", format_report(&eval.report));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        for (sample, pred) in data.samples.iter().zip(&eval.predictions) {
            let mask = Raster {
                width: sample.width(),
                height: sample.height(),
                channels: 1,
                data: pred.iter().map(|&c| c as u8).collect(),
            };
            mask.write(&out.join(format!("{}.pgm", sample.name)))?;
        }
        let json = serde_json::to_string_pretty(&eval.report)?;
        write_atomic(&out.join("report.json"), json.as_bytes())?;
    }
    Ok(Exit::Success)
}

pub struct FlopsArgs {
    pub config: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub channels: Option<usize>,
    pub patch: Option<usize>,
    pub measure_size: usize,
    pub measure_channels: usize,
    pub tsv: Option<PathBuf>,
}

/// Closed-form rows at the requested extent, instrumented rows and the
/// ratio sweep at the (smaller) measurement extent.
pub fn cmd_flops(args: &FlopsArgs) -> anyhow::Result<Exit> {
    let pyramid = match &args.config {
        Some(p) => RunConfig::load(p)?.pyramid,
        None => PyramidConfig::default(),
    };
    let c = args.channels.unwrap_or(pyramid.dim);
    let p = args.patch.unwrap_or(pyramid.patch);
    let ratios = &pyramid.ratios;
    if args.height == 0 || args.width == 0 || c == 0 || p == 0 {
        bail!("extents must be positive");
    }
    let mut report = FlopsReport::analytic(args.height, args.width, c, p, ratios)?;
    let m = args.measure_size.next_multiple_of(p);
    let mc = args.measure_channels.min(c);
    report.extend(FlopsReport::measured(m, m, mc, p, ratios)?);
    print!("{}", report.summary());
    let extra = lawin::analysis::flops::flops_large_window(args.height as u64, args.width as u64, c as u64, p as u64)
        - lawin::analysis::flops::flops_local_window(args.height as u64, args.width as u64, c as u64, p as u64);
    println!("position-mixing overhead (HW)P²C = {}", lawin::analysis::flops::group_digits(extra));
    match &args.tsv {
        Some(path) => write_atomic(path, report.to_tsv().as_bytes())?,
        None => print!("\n{}", report.to_tsv()),
    }
    let agree = report.rows.iter().all(|r| r.agrees() != Some(false));
    Ok(if agree && report.sweep_invariant() {
        Exit::Success
    } else {
        Exit::PropertyFailure
    })
}

pub fn cmd_check(level: Level) -> Exit {
    let results = run_suite(level, |r| {
        println!(
            "{} {:<26} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed == 0 {
        Exit::Success
    } else {
        Exit::PropertyFailure
    }
}

pub fn cmd_synth(out: &Path, cfg: &SynthConfig) -> anyhow::Result<Exit> {
    let data = synthesize(cfg)?;
    data.save(out)?;
    println!("wrote {} image/label pairs to {}", data.len(), out.display());
    Ok(Exit::Success)
}
