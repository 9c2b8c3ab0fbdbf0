use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use lacovl_core::dataset::{read_image, Dataset};
use lacovl_core::nn::{Ctx, Mode};
use lacovl_core::training::evaluate;
use lacovl_core::verify::gradcheck_model;
use lacovl_core::{Error, Model, Result, RunConfig, Tensor};

#[derive(Parser, Debug)]
#[command(name = "lacovl", version, about = "Landmark-guided expression recognition: data, training and diagnostics")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` applied on top of the configuration; repeatable.
    #[arg(long = "override", value_name = "K=V", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic glyph dataset (labels.csv + images/*.ppm) to --out.
    SynthData {
        #[arg(long, default_value_t = 10)]
        n_per_class: usize,
    },
    /// Train on data.dataset_dir, writing the log and checkpoints to --out.
    Train,
    /// Evaluate a checkpoint on a dataset; writes eval.csv to --out if given.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset recorded in the checkpoint's configuration.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable parameter on a shrunk model.
    Gradcheck {
        /// Elements probed per parameter tensor (all when omitted).
        #[arg(long)]
        elements: Option<usize>,
    },
    /// Write attention and cross-similarity maps of one image to --out.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Partner for the cross-similarity maps (the image itself by default).
        #[arg(long)]
        positive: Option<PathBuf>,
    },
    /// Write id, label, visual embedding and semantic logits per sample.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, &overrides)?,
            None => RunConfig::parse("", &overrides)?,
        };
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&RunConfig>) -> Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
            .ok_or_else(|| Error::ConfigInvalid {
                field: "out_dir".into(),
                reason: "no output directory; pass --out".into(),
            })
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let model = Model::load(path)?;
    info!("loaded {} ({} trainable values)", path.display(), model.trainable_count());
    Ok(model)
}

fn model_dataset(model: &Model, dir: Option<&Path>) -> Result<Dataset> {
    let cfg = &model.config;
    let dir = match dir {
        Some(d) => d,
        None => cfg.dataset_dir()?,
    };
    Dataset::load(dir, model.num_classes(), cfg.data.image_size)
}

fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let cols = *t.shape().last().unwrap_or(&1);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    for row in t.data().chunks(cols.max(1)) {
        w.write_record(row.iter().map(|v| format!("{v:.17e}"))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::SynthData { n_per_class } => {
            let cfg = cli.run_config()?;
            let out = cli.out_dir(Some(&cfg))?;
            let ds = Dataset::synthetic(*n_per_class, cfg.data.image_size, cfg.seed)?;
            ds.save(&out)?;
            println!("wrote {} images to {}", ds.len(), out.display());
        }
        Command::Train => {
            let cfg = cli.run_config()?;
            let dir = cfg.dataset_dir()?.to_path_buf();
            let out = cli.out_dir(Some(&cfg))?;
            let ds = Dataset::load(&dir, cfg.model.num_classes(), cfg.data.image_size)?;
            let outcome = lacovl_core::train(&cfg, &ds, Some(&out))?;
            let last = outcome.history.last();
            println!(
                "trained {} epochs; final train acc {:.4}; best epoch {}; checkpoints in {}",
                outcome.history.len(),
                last.map_or(f64::NAN, |h| h.train_acc),
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Eval { checkpoint, dataset } => {
            let model = load_model(checkpoint)?;
            let ds = model_dataset(&model, dataset.as_deref())?;
            let report = evaluate(&model, &ds)?;
            print!("{report}");
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("eval.csv"), report.to_csv()?)?;
            }
        }
        Command::Gradcheck { elements } => {
            let cfg = cli.run_config()?;
            let report = gradcheck_model(&cfg, *elements)?;
            print!("{report}");
            println!("max relative error {:.3e}", report.max_rel_error());
            if !report.passed() {
                for (name, err) in report.failures() {
                    eprintln!("failed: {name} (max relative error {err:.3e})");
                }
                return Ok(false);
            }
        }
        Command::DumpAttn {
            checkpoint,
            image,
            positive,
        } => {
            let model = load_model(checkpoint)?;
            let out = cli.out_dir(Some(&model.config))?;
            let size = model.config.data.image_size;
            let anchor = read_image(image, 0, size)?;
            let partner = match positive {
                Some(p) => read_image(p, 0, size)?,
                None => anchor.clone(),
            };
            let mut ctx = Ctx::new(&model.store, Mode::Eval);
            ctx.enable_trace();
            model.forward_pair(&mut ctx, &[&anchor], &[&partner])?;
            fs::create_dir_all(&out)?;
            // the positive's encoder pass records the same names after the anchor's
            let mut seen = HashSet::new();
            for (name, t) in ctx.take_trace() {
                if seen.insert(name.clone()) {
                    write_matrix(&out.join(format!("{}.csv", name.replace('.', "_"))), &t)?;
                }
            }
            println!("wrote attention maps to {}", out.display());
        }
        Command::ExportEmbeddings { checkpoint, dataset } => {
            let model = load_model(checkpoint)?;
            if !model.config.ablation.vles {
                return Err(Error::ConfigInvalid {
                    field: "ablation.vles".into(),
                    reason: "embeddings need the vision-language branch".into(),
                });
            }
            let ds = model_dataset(&model, dataset.as_deref())?;
            let out = cli.out_dir(None)?;
            fs::create_dir_all(&out)?;
            let path = out.join("embeddings.csv");
            let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
            let d = model.config.model.d_clip;
            let mut header = vec!["id".to_string(), "label".into()];
            header.extend((0..d).map(|i| format!("v{i}")));
            header.extend(model.config.model.class_names.iter().map(|c| format!("y_{c}")));
            w.write_record(&header).map_err(csv_err)?;
            for s in &ds.samples {
                let inf = model.infer(&[s])?;
                let mut rec = vec![s.id.clone(), s.label.to_string()];
                for t in [inf.v, inf.y_sem].into_iter().flatten() {
                    rec.extend(t.data().iter().map(|v| format!("{v:.17e}")));
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
            w.flush()?;
            println!("wrote {} rows to {}", ds.len(), path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LACOVL_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::ConfigInvalid { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
