//! `mcad` command-line front end.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mcad::ablation::{evaluate_model, AblationRow, AblationTable, Variant};
use mcad::config::RunConfig;
use mcad::metrics::MetricReport;
use mcad::phantom::{
    gen_subjects, read_dataset, read_image, write_dataset, write_image, Dataset, Manifest, Split,
    SplitAssignment,
};
use mcad::sampler::{sample_samples_traced, EVAL_STREAM};
use mcad::tensor::Tensor;
use mcad::training::{checkpoint, prepare_samples, total_steps, train, Event, Sample, TrainState};
use mcad::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mcad", version, about = "Few-step conditional diffusion for low-dose image enhancement")]
struct Cli {
    /// JSON run configuration; unspecified fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the effective configuration (defaults merged with --config) and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// Worker threads. All computation is single-threaded, so every value is
    /// deterministic; accepted for interface compatibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 240)]
        subjects: usize,
        /// Master seed (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample estimated images for a dataset split.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every intermediate state.
        #[arg(long)]
        trace: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Score estimates against references.
    Eval {
        /// Dataset directory (standard-dose images of --split) or a flat image directory.
        #[arg(long)]
        r#ref: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Earlier report to compare against with paired t-tests.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train and evaluate the six ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these variants (comma separated names).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn ids<'a>(self, ds: &'a Dataset) -> Vec<&'a str> {
        let pick = |s: Split| ds.split.ids(s).iter().map(String::as_str).collect();
        match self {
            SplitArg::Train => pick(Split::Train),
            SplitArg::Val => pick(Split::Val),
            SplitArg::Test => pick(Split::Test),
            SplitArg::All => ds.subjects.iter().map(|s| s.record.subject_id.as_str()).collect(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut c = RunConfig::default();
            c.apply_env()?;
            c.validate()?;
            Ok(c)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    if cli.print_config {
        println!("{}", load_config(cli.config.as_deref())?.to_json());
        return Ok(());
    }
    match cli.command {
        None => Err(Error::Config("no command given (see --help)".into())),
        Some(Command::GenData {
            out,
            subjects,
            seed,
        }) => gen_data(&load_config(cli.config.as_deref())?, &out, subjects, seed),
        Some(Command::Train {
            data,
            out,
            resume,
        }) => train_cmd(&load_config(cli.config.as_deref())?, &data, &out, resume.as_deref()),
        Some(Command::Sample {
            ckpt,
            data,
            out,
            trace,
            split,
        }) => sample_cmd(&ckpt, &data, &out, trace, split),
        Some(Command::Eval {
            r#ref,
            est,
            out,
            baseline,
            split,
        }) => eval_cmd(&r#ref, &est, &out, baseline.as_deref(), split),
        Some(Command::Ablate {
            data,
            out,
            variants,
        }) => ablate_cmd(&load_config(cli.config.as_deref())?, &data, &out, variants),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig, out: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    let master = seed.unwrap_or(cfg.seeds.master);
    let mut cfg = cfg.clone();
    cfg.seeds.master = master;
    let subjects = gen_subjects(master, n, &cfg.data.phantom)?;
    let ids: Vec<String> = subjects.iter().map(|s| s.record.subject_id.clone()).collect();
    let manifest = Manifest {
        master_seed: master,
        config: cfg.to_value(),
        split: SplitAssignment::from_ratios(&ids, cfg.data.split)?,
        seeds: subjects
            .iter()
            .map(|s| (s.record.subject_id.clone(), s.seed))
            .collect(),
    };
    create_dir(out)?;
    write_dataset(out, &subjects, Some(&manifest))?;
    println!(
        "wrote {n} subjects to {} (train/val/test = {}/{}/{})",
        out.display(),
        manifest.split.train.len(),
        manifest.split.val.len(),
        manifest.split.test.len()
    );
    Ok(())
}

fn split_samples(ds: &Dataset, split: Split, state: &TrainState) -> Result<Vec<Sample>> {
    prepare_samples(&ds.subjects_in(split), &state.model.vocab)
}

fn check_grid(ds: &Dataset, cfg: &RunConfig, data: &Path) -> Result<()> {
    let n = cfg.data.phantom.grid_size;
    match ds.subjects.iter().find(|s| s.spet.shape() != [n, n]) {
        Some(s) => Err(Error::format(
            data,
            format!(
                "subject {} has shape {:?}, config expects {n}x{n}",
                s.record.subject_id,
                s.spet.shape()
            ),
        )),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    config: &'a RunConfig,
    data: String,
    n_train: usize,
    n_val: usize,
    total_steps: u64,
    resumed_from: Option<String>,
    final_checkpoint: String,
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut state = match resume {
        Some(p) => {
            let s = checkpoint::load(p)?;
            if s.cfg() != cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    p.display()
                )));
            }
            s
        }
        None => TrainState::new(cfg)?,
    };
    let ds = read_dataset(data, cfg.data.split)?;
    check_grid(&ds, cfg, data)?;
    let train_set = split_samples(&ds, Split::Train, &state)?;
    let val_set = split_samples(&ds, Split::Val, &state)?;
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let final_path = out.join("final.mckp");
    write_json(
        &out.join("manifest.json"),
        &TrainManifest {
            config: cfg,
            data: data.display().to_string(),
            n_train: train_set.len(),
            n_val: val_set.len(),
            total_steps: total_steps(cfg, train_set.len()),
            resumed_from: resume.map(|p| p.display().to_string()),
            final_checkpoint: final_path.display().to_string(),
        },
    )?;
    let open = |name: &str| -> Result<BufWriter<File>> {
        let p = out.join(name);
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume.is_some())
            .truncate(resume.is_none())
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        Ok(BufWriter::new(f))
    };
    let mut log = open("log.jsonl")?;
    let mut val_log = open("val.jsonl")?;
    let every = cfg.training.checkpoint_every;
    let log_path = out.join("log.jsonl");
    let line = |w: &mut BufWriter<File>, v: String| -> Result<()> {
        writeln!(w, "{v}").map_err(|e| Error::io(&log_path, e))
    };
    train(&mut state, &train_set, &val_set, &mut |e| match e {
        Event::Step(l) => line(&mut log, serde_json::to_string(l).expect("log serializes")),
        Event::Validation(v) => {
            eprintln!(
                "epoch {}: val psnr {:.3} ssim {:.4} nmse {:.4}",
                v.epoch, v.psnr, v.ssim, v.nmse
            );
            line(&mut val_log, serde_json::to_string(v).expect("record serializes"))
        }
        Event::EpochEnd(s) => {
            if every > 0 && s.epoch % every == 0 {
                checkpoint::save(&out.join(format!("ckpt_epoch{:03}.mckp", s.epoch)), s)?;
            }
            Ok(())
        }
    })?;
    log.flush().map_err(|e| Error::io(out.join("log.jsonl"), e))?;
    val_log.flush().map_err(|e| Error::io(out.join("val.jsonl"), e))?;
    checkpoint::save(&final_path, &state)?;
    println!(
        "trained {} epochs ({} steps); checkpoint {}",
        state.epoch,
        state.step,
        final_path.display()
    );
    Ok(())
}

/// Plain (P2) greyscale preview of a `[0, 1]` image.
fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut text = format!("P2\n{w} {h}\n255\n");
    for row in img.data().chunks(w).take(h) {
        let vals: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        text.push_str(&vals.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_2d(img: &Tensor) -> Tensor {
    let s = img.shape();
    img.clone().reshape(&s[s.len() - 2..])
}

fn sample_cmd(ckpt: &Path, data: &Path, out: &Path, trace: bool, split: SplitArg) -> Result<()> {
    let state = checkpoint::load(ckpt)?;
    let cfg = state.cfg().clone();
    let ds = read_dataset(data, cfg.data.split)?;
    check_grid(&ds, &cfg, data)?;
    let wanted = split.ids(&ds);
    let subjects: Vec<_> = ds
        .subjects
        .iter()
        .filter(|s| wanted.contains(&s.record.subject_id.as_str()))
        .collect();
    let items = prepare_samples(&subjects, &state.model.vocab)?;
    let (ests, _, traces) = sample_samples_traced(&state.model, &items, EVAL_STREAM, trace)?;
    create_dir(out)?;
    let preview = out.join("preview");
    create_dir(&preview)?;
    for (s, est) in items.iter().zip(&ests) {
        let img = to_2d(est);
        write_image(&out.join(format!("{}.mcpt", s.id)), &img)?;
        write_pgm(&preview.join(format!("{}.pgm", s.id)), &img)?;
    }
    if trace {
        let bs = cfg.training.batch_size.max(1);
        for (k, s) in items.iter().enumerate() {
            let tr = &traces[k / bs];
            let j = k % bs;
            let dir = out.join("trace").join(&s.id);
            create_dir(&dir)?;
            for st in &tr.steps {
                for (name, t) in [("y_t", &st.y_t), ("y0_pred", &st.y0_pred), ("y_prev", &st.y_prev)] {
                    write_image(&dir.join(format!("t{:02}_{name}.mcpt", st.t)), &to_2d(&t.index0(j)))?;
                }
            }
        }
    }
    write_json(
        &out.join("manifest.json"),
        &serde_json::json!({
            "checkpoint": ckpt.display().to_string(),
            "data": data.display().to_string(),
            "subjects": items.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
            "config": cfg,
        }),
    )?;
    println!("wrote {} estimates to {}", items.len(), out.display());
    Ok(())
}

/// Images of a dataset split (standard dose) or of a flat directory of `.mcpt` files.
fn read_image_set(dir: &Path, split: SplitArg) -> Result<BTreeMap<String, Tensor>> {
    if dir.join("tabular.csv").exists() {
        let ds = read_dataset(dir, RunConfig::default().data.split)?;
        let wanted = split.ids(&ds);
        return Ok(ds
            .subjects
            .iter()
            .filter(|s| wanted.contains(&s.record.subject_id.as_str()))
            .map(|s| (s.record.subject_id.clone(), s.spet.clone()))
            .collect());
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "mcpt") {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::format(&path, "file name is not UTF-8"))?
                .to_string();
            out.insert(id, read_image(&path)?);
        }
    }
    Ok(out)
}

fn eval_cmd(reference: &Path, est: &Path, out: &Path, baseline: Option<&Path>, split: SplitArg) -> Result<()> {
    let r = read_image_set(reference, split)?;
    let e = read_image_set(est, split)?;
    let mut report = MetricReport::build(&r, &e)?;
    if let Some(b) = baseline {
        let text = fs::read_to_string(b).map_err(|err| Error::io(b, err))?;
        let base: MetricReport =
            serde_json::from_str(&text).map_err(|err| Error::format(b, err.to_string()))?;
        report.compare_with(&base)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &report)?;
    println!(
        "{} subjects: PSNR {:.3}±{:.3} dB, SSIM {:.4}±{:.4}, NMSE {:.4}±{:.4}",
        report.per_subject.len(),
        report.mean.psnr,
        report.std.psnr,
        report.mean.ssim,
        report.std.ssim,
        report.mean.nmse,
        report.std.nmse
    );
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, data: &Path, out: &Path, only: Option<Vec<String>>) -> Result<()> {
    let variants: Vec<Variant> = match only {
        None => Variant::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| {
                Variant::ALL
                    .into_iter()
                    .find(|v| v.name() == n)
                    .ok_or_else(|| Error::Config(format!("unknown variant {n:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let ds = read_dataset(data, cfg.data.split)?;
    check_grid(&ds, cfg, data)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for v in variants {
        let vcfg = v.apply(cfg);
        let dir = out.join(v.name());
        create_dir(&dir)?;
        write_json(&dir.join("config.json"), &vcfg)?;
        let mut state = TrainState::new(&vcfg)?;
        let train_set = split_samples(&ds, Split::Train, &state)?;
        let mut eval_set = split_samples(&ds, Split::Test, &state)?;
        if eval_set.is_empty() {
            eval_set = split_samples(&ds, Split::Val, &state)?;
        }
        let log_path = dir.join("log.jsonl");
        let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
        train(&mut state, &train_set, &[], &mut |e| {
            if let Event::Step(l) = e {
                writeln!(log, "{}", serde_json::to_string(l).expect("log serializes"))
                    .map_err(|err| Error::io(&log_path, err))?;
            }
            Ok(())
        })?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        checkpoint::save(&dir.join("final.mckp"), &state)?;
        let report = if eval_set.is_empty() {
            MetricReport::from_subjects(Vec::new())
        } else {
            evaluate_model(&state, &eval_set)?.0
        };
        write_json(&dir.join("report.json"), &report)?;
        eprintln!(
            "{}: PSNR {:.3} SSIM {:.4} NMSE {:.4}",
            v.name(),
            report.mean.psnr,
            report.mean.ssim,
            report.mean.nmse
        );
        rows.push(AblationRow::new(v, &report));
    }
    write_json(&out.join("table.json"), &AblationTable::new(rows))?;
    println!("ablation table written to {}", out.join("table.json").display());
    Ok(())
}
