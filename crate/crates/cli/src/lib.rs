//! Command-line front end. [`dispatch`] parses arguments, resolves the run
//! configuration, records a run manifest and runs one stage.
//!
//! Configuration precedence, lowest first: built-in defaults, the `--config`
//! file, the `IRISCALE_OUT` environment variable (output root only), flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use iriscale::config::{RegionSource, RunConfig, RunManifest};
use iriscale::datagen::{
    detector_split, import_utiris, load_manifest, synth_dataset, LabelLevel, Spectrum,
};
use iriscale::harness::{
    benchmarks_from_records, emit_curves, make_folds, overall_accuracy, read_metrics, run_crossval,
    train_classifier_fold, write_metrics, MetricsRecord, Split,
};
use iriscale::pipeline::{
    evaluate_detector, extract, load_detector, save_classifier, save_detector, train_detector_on,
    BoxSource, ExtractedSet,
};
use iriscale::{gradsuite, Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "iriscale",
    version,
    about = "Scale-variant iris detection and recognition"
)]
#[command(propagate_version = true, arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration (a run manifest works too).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = "IRISCALE_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize an eye-image dataset with boxes and masks.
    GenData {
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long)]
        per_id: Option<usize>,
        /// Image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        spectrum: Option<Spectrum>,
        /// Let some eyes sit partly outside the frame.
        #[arg(long)]
        partial_capture: bool,
    },
    /// Train the iris detector on a manifest and evaluate it on the held-out split.
    TrainDetector {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint to write.
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Detect, crop and zero-pad every manifest image into classifier inputs.
    Extract {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Detector checkpoint.
        #[arg(long, conflicts_with = "annotations")]
        detector: Option<PathBuf>,
        /// Use the manifest boxes instead of a detector.
        #[arg(long)]
        annotations: bool,
        /// Padding canvas side.
        #[arg(long)]
        side: Option<usize>,
        /// Output archive.
        #[arg(long)]
        extracted: Option<PathBuf>,
    },
    /// Train the classifier on one cross-validation fold.
    TrainClassifier {
        #[command(flatten)]
        train: TrainFlags,
        /// Held-out fold, from 1.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Run k-fold cross validation and write the metrics table and curves.
    Crossval {
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Render a metrics CSV as curves and print the benchmark table.
    Report {
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Number of seeds, starting from the run seed.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Build a manifest from a UTiris-layout directory tree.
    ImportUtiris {
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Extracted classifier inputs.
    #[arg(long)]
    extracted: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on one capture session only.
    #[arg(long)]
    session: Option<Spectrum>,
    /// Class granularity: identity or eye.
    #[arg(long, value_parser = parse_level)]
    label_level: Option<LabelLevel>,
    /// Stop a fold once validation accuracy stalls for `patience` epochs.
    #[arg(long)]
    early_stop: bool,
}

fn parse_level(s: &str) -> std::result::Result<LabelLevel, String> {
    match s.to_ascii_lowercase().as_str() {
        "identity" => Ok(LabelLevel::Identity),
        "eye" => Ok(LabelLevel::Eye),
        _ => Err(format!("expected `identity` or `eye`, got `{s}`")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainDetector { .. } => "train-detector",
            Command::Extract { .. } => "extract",
            Command::TrainClassifier { .. } => "train-classifier",
            Command::Crossval { .. } => "crossval",
            Command::Report { .. } => "report",
            Command::Gradcheck { .. } => "gradcheck",
            Command::ImportUtiris { .. } => "import-utiris",
        }
    }

    /// Writes the flag values into `cfg`.
    fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        match self {
            Command::GenData {
                ids,
                per_id,
                size,
                spectrum,
                partial_capture,
            } => {
                set(&mut cfg.synth.num_identities, ids);
                set(&mut cfg.synth.images_per_identity, per_id);
                set(&mut cfg.synth.image_size, size);
                set(&mut cfg.synth.spectrum, spectrum);
                cfg.synth.partial_capture |= *partial_capture;
                cfg.paths.manifest = cfg.paths.out.join("manifest.json");
            }
            Command::TrainDetector {
                manifest,
                epochs,
                detector,
            } => {
                set(&mut cfg.paths.manifest, manifest);
                set(&mut cfg.detector_train.epochs, epochs);
                set_opt(&mut cfg.paths.detector, detector);
            }
            Command::Extract {
                manifest,
                detector,
                annotations,
                side,
                extracted,
            } => {
                if *annotations {
                    cfg.regions = RegionSource::Annotation;
                }
                set(&mut cfg.paths.manifest, manifest);
                set_opt(&mut cfg.paths.detector, detector);
                set(&mut cfg.pipeline.side, side);
                set_opt(&mut cfg.paths.extracted, extracted);
            }
            Command::TrainClassifier { train, fold } => {
                train.apply(cfg);
                set(&mut cfg.fold, fold);
            }
            Command::Crossval { train } => train.apply(cfg),
            Command::Report { metrics } => set_opt(&mut cfg.paths.metrics, metrics),
            Command::Gradcheck { seeds } => set(&mut cfg.gradcheck.seeds, seeds),
            Command::ImportUtiris { root } => {
                set_opt(&mut cfg.paths.utiris, root);
                cfg.paths.manifest = cfg.paths.out.join("manifest.json");
            }
        }
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.extracted {
            cfg.paths.extracted = Some(p.clone());
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if self.session.is_some() {
            cfg.train.session = self.session;
        }
        if let Some(l) = self.label_level {
            cfg.train.label_level = l;
        }
        cfg.train.early_stop |= self.early_stop;
    }
}

/// Runs the command line `argv` (without the program name) and returns the
/// process exit code: 0 on success, 1 when a stage fails, 2 on usage errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = std::iter::once(OsString::from("iriscale"))
        .chain(argv.into_iter().map(Into::into))
        .collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let shown: Vec<String> = args[1..]
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(&cli, shown) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.common.out {
        cfg.paths.out = out.clone();
    }
    if let Some(seed) = cli.common.seed {
        cfg.set_seed(seed);
    }
    cli.command.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, args: Vec<String>) -> Result<()> {
    let cfg = resolve(cli)?;
    let name = cli.command.name();
    let mut manifest = RunManifest {
        command: name.to_string(),
        args,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        outputs: Vec::new(),
    };
    let manifest_path = cfg.out_path(&format!("run-{name}.json"));
    // Written up front so a failed run still leaves its configuration behind.
    manifest.save(&manifest_path)?;
    let t = Instant::now();
    manifest.outputs = match &cli.command {
        Command::GenData { .. } => gen_data(&cfg)?,
        Command::TrainDetector { .. } => train_detector(&cfg)?,
        Command::Extract { .. } => extract_stage(&cfg)?,
        Command::TrainClassifier { .. } => train_classifier(&cfg)?,
        Command::Crossval { .. } => crossval(&cfg)?,
        Command::Report { .. } => report(&cfg)?,
        Command::Gradcheck { .. } => gradcheck(&cfg)?,
        Command::ImportUtiris { .. } => utiris(&cfg)?,
    };
    manifest.save(&manifest_path)?;
    eprintln!(
        "{name} finished in {:.1}s; run manifest {}",
        t.elapsed().as_secs_f64(),
        manifest_path.display()
    );
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = synth_dataset(&cfg.synth, &cfg.paths.out)?;
    println!("{}", m.class_report());
    Ok(vec![cfg.paths.manifest.clone()])
}

fn train_detector(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = load_manifest(&cfg.paths.manifest)?;
    let (train, test) = detector_split(
        &m,
        cfg.detector_train.train_fraction,
        cfg.detector_train.seed,
    )?;
    eprintln!(
        "training detector on {} images, holding out {}",
        train.len(),
        test.len()
    );
    let res = train_detector_on(&m, &train, &cfg.detector, &cfg.detector_train)?;
    let ckpt = cfg.paths.detector();
    save_detector(&ckpt, &res.params, &cfg.detector)?;
    let ev = evaluate_detector(&m, &test, &res.params, &cfg.detector)?;
    println!(
        "held out {}: mean IoU {:.4}, success (IoU >= 0.5) {:.2}%, misses {}",
        test.len(),
        ev.mean_iou,
        100.0 * ev.success_rate,
        ev.misses
    );
    let eval = cfg.out_path("detector_eval.json");
    write_json(
        &eval,
        &json!({
            "train": train.len(),
            "test": test.len(),
            "best_epoch": res.best_epoch,
            "mean_iou": ev.mean_iou,
            "success_rate": ev.success_rate,
            "misses": ev.misses,
            "trace": res.trace,
        }),
    )?;
    Ok(vec![ckpt, eval])
}

fn extract_stage(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = load_manifest(&cfg.paths.manifest)?;
    let set = match cfg.regions {
        RegionSource::Annotation => extract(&m, &BoxSource::Annotation, &cfg.pipeline)?,
        RegionSource::Detector => {
            let (params, dcfg) = load_detector(&cfg.paths.detector())?;
            extract(
                &m,
                &BoxSource::Detector {
                    params: &params,
                    cfg: &dcfg,
                },
                &cfg.pipeline,
            )?
        }
    };
    let path = cfg.paths.extracted();
    set.save(&path)?;
    println!(
        "extracted {} of {} samples ({} without a region)",
        set.records.len(),
        m.len(),
        set.failures.len()
    );
    for (i, why) in &set.failures {
        eprintln!("  sample {i}: {why}");
    }
    Ok(vec![path])
}

fn classifier_data(cfg: &RunConfig) -> Result<iriscale::harness::ClassifierDataset> {
    let set = ExtractedSet::load(&cfg.paths.extracted())?;
    let data = set.dataset(cfg.train.session, cfg.train.label_level)?;
    eprintln!("{} samples in {} classes", data.len(), data.num_classes);
    Ok(data)
}

fn print_table(records: &[MetricsRecord]) {
    let bench = benchmarks_from_records(records);
    for (i, b) in bench.iter().enumerate() {
        println!("fold {}: benchmark accuracy {:.2}%", i + 1, b);
    }
    if !bench.is_empty() {
        println!(
            "average accuracy {:.2}%",
            bench.iter().sum::<f64>() / bench.len() as f64
        );
    }
}

fn train_classifier(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = classifier_data(cfg)?;
    let plan = make_folds(&data.labels, cfg.train.k, cfg.train.seed)?;
    let res = train_classifier_fold(&data, cfg.fold - 1, &plan, &cfg.train, &cfg.classifier)?;
    let ckpt = cfg.out_path(&format!("classifier-fold{}.ckpt", cfg.fold));
    save_classifier(&ckpt, &res.params)?;
    let csv = cfg.out_path(&format!("metrics-fold{}.csv", cfg.fold));
    write_metrics(&res.records, &csv)?;
    println!(
        "fold {}: best validation accuracy {:.2}% at epoch {} (loss {:.4})",
        cfg.fold, res.best_accuracy, res.best_epoch, res.best_loss
    );
    Ok(vec![ckpt, csv])
}

fn crossval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let set = ExtractedSet::load(&cfg.paths.extracted())?;
    let spectra = set.spectra();
    // Without an explicit session, each capture session present gets its own run.
    let sessions: Vec<Option<Spectrum>> = match cfg.train.session {
        None if spectra.len() > 1 => spectra.into_iter().map(Some).collect(),
        s => vec![s],
    };
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    let mut names = Vec::new();
    for session in &sessions {
        let data = set.dataset(*session, cfg.train.label_level)?;
        let tag = session
            .map(|s| format!("-{}", s.to_string().to_lowercase()))
            .unwrap_or_default();
        if let Some(s) = session {
            println!("session {s}:");
        }
        eprintln!("{} samples in {} classes", data.len(), data.num_classes);
        let rep = run_crossval(&data, &cfg.train, &cfg.classifier)?;
        let csv = if sessions.len() == 1 {
            cfg.paths.metrics()
        } else {
            cfg.out_path(&format!("metrics{tag}.csv"))
        };
        write_metrics(&rep.records, &csv)?;
        let svg = cfg.out_path(&format!("curves{tag}.svg"));
        emit_curves(&rep.records, &svg)?;
        print_table(&rep.records);
        println!("mean validation loss {:.4}", rep.mean_loss);
        outputs.extend([csv, svg]);
        names.push(session.map(|s| s.to_string()));
        reports.push(rep);
    }
    let overall = overall_accuracy(&reports);
    if sessions.len() > 1 {
        println!("overall accuracy {:.2}%", overall.unwrap_or(0.0));
    }
    let summary = cfg.out_path("summary.json");
    let rows: Vec<_> = reports
        .iter()
        .zip(&names)
        .map(|(rep, session)| {
            json!({
                "session": session,
                "benchmarks": rep.benchmarks,
                "best_epochs": rep.folds.iter().map(|f| f.best_epoch).collect::<Vec<_>>(),
                "average_accuracy": rep.average_accuracy,
                "mean_loss": rep.mean_loss,
            })
        })
        .collect();
    write_json(
        &summary,
        &json!({ "sessions": rows, "overall_accuracy": overall }),
    )?;
    outputs.push(summary);
    Ok(outputs)
}

fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let records = read_metrics(&cfg.paths.metrics())?;
    let svg = cfg.out_path("curves.svg");
    emit_curves(&records, &svg)?;
    let val = records.iter().filter(|r| r.split == Split::Val).count();
    println!("{} rows ({} validation)", records.len(), val);
    print_table(&records);
    Ok(vec![svg])
}

fn gradcheck(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let g = &cfg.gradcheck;
    let seeds: Vec<u64> = (0..g.seeds as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    let entries = gradsuite::run_suite(&seeds, g.eps, g.tolerance)?;
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (case, _) in gradsuite::CASES {
        let mine: Vec<_> = entries.iter().filter(|e| e.case == *case).collect();
        let worst = mine
            .iter()
            .map(|e| e.report.max_rel_error)
            .fold(0.0, f64::max);
        let checked: usize = mine.iter().map(|e| e.report.checked).sum();
        let skipped: usize = mine.iter().map(|e| e.report.skipped).sum();
        let ok = mine.iter().all(|e| e.report.passed());
        println!(
            "{:<28} {} max rel err {worst:.3e} ({checked} checked, {skipped} at kinks)",
            case,
            if ok { "ok  " } else { "FAIL" }
        );
        if !ok {
            failed.push(*case);
        }
        rows.push(json!({"case": case, "passed": ok, "max_rel_error": worst, "checked": checked, "skipped": skipped}));
    }
    let path = cfg.out_path("gradcheck.json");
    write_json(
        &path,
        &json!({"seeds": seeds, "eps": g.eps, "tolerance": g.tolerance, "cases": rows}),
    )?;
    if !failed.is_empty() {
        return Err(Error::CheckFailed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(vec![path])
}

fn utiris(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let root = cfg.paths.utiris.clone().ok_or_else(|| {
        Error::contract(
            "import-utiris",
            "no tree given; pass --root or set paths.utiris",
        )
    })?;
    let m = import_utiris(&root)?;
    m.save(&cfg.paths.manifest)?;
    println!("{}", m.class_report());
    Ok(vec![cfg.paths.manifest.clone()])
}
