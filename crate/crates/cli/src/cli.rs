//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use formcast_core::config::PipelineConfig;
use formcast_core::dataset::{Dataset, Sample};
use formcast_core::fqt::Container;
use formcast_core::metrics::{kld_stats, mae_max, to_f64, Stat};
use formcast_core::params::{DoeRun, Param, ParameterVector};
use formcast_core::pipeline::Predictor;
use formcast_core::reconstruct::{as_formed_mesh, summarize, DEFAULT_WINDOW};
use formcast_core::study::{predict_all, size_study, speed_sweep, test_metrics};
use formcast_core::tensor::Tensor;
use formcast_core::train::{split, TargetKind, Trainer};

#[derive(Debug, Parser)]
#[command(name = "formcast", version, about = "Forming-feasibility surrogate pipeline")]
pub struct Cli {
    /// Pipeline configuration (JSON). Without it the reference configuration is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the sampling and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the image resolution.
    #[arg(long, global = true)]
    pub res: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "formcast-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Thinning,
    Displacement,
}

impl From<KindArg> for TargetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Thinning => TargetKind::Thinning,
            KindArg::Displacement => TargetKind::Displacement,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct DesignArgs {
    /// JSON file with all nine parameters; defaults to the midpoint of the bounds.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Parameter override `name=value`, repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Latin-hypercube designs to `doe.json`.
    Doe {
        #[arg(long)]
        n: usize,
    },
    /// Dataset directory from LHS designs (or a `doe.json`).
    Generate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        designs: Option<PathBuf>,
    },
    /// Trains one network on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Error metrics of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only the held-out part of the configured split.
        #[arg(long)]
        test_only: bool,
    },
    /// Fields and summary for one design.
    Predict {
        #[arg(long)]
        thinning: PathBuf,
        #[arg(long)]
        displacement: PathBuf,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Predicted thinning over a range of stamping speeds.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated speeds; default 10 evenly spaced over the bounds.
        #[arg(long)]
        speeds: Option<String>,
        #[arg(long, default_value = "350,500")]
        temps: String,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// As-formed mesh and wrinkle heights from an FQT with thinning, displacement and mask.
    Reconstruct {
        #[arg(long)]
        fields: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Test error against training-set size.
    Study {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long, default_value = "8,16,32,64")]
        sizes: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Prediction service.
    Serve {
        #[arg(long)]
        thinning: PathBuf,
        #[arg(long)]
        displacement: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// Worker count from `FORMCAST_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("FORMCAST_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("FORMCAST_THREADS={v}"))?;
            if n == 0 {
                bail!("FORMCAST_THREADS must be at least 1");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| anyhow!("{what} `{v}`: {e}")))
        .collect()
}

impl Cli {
    /// Configuration with command-line overrides; `default_res` applies when
    /// neither a config file nor `--res` names a resolution.
    pub fn pipeline_config(&self, default_res: usize) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::reference(default_res),
        };
        if let Some(r) = self.res {
            c = c.with_resolution(r);
        }
        if let Some(s) = self.seed {
            c.seeds.doe = s;
            c.seeds.train = s;
        }
        c.check()?;
        Ok(c)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!("dataset {} does not exist", path.display());
    }
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn dataset_config(cli: &Cli, data: &Dataset) -> Result<PipelineConfig> {
    let n = data.manifest.grid.n;
    let mut c = cli.pipeline_config(n)?;
    if c.data.resolution != n {
        bail!(
            "configuration resolution {} does not match the dataset's {n}",
            c.data.resolution
        );
    }
    c.data = data.manifest.settings();
    Ok(c)
}

fn checkpoint_resolution(path: &Path) -> Result<usize> {
    let c = Container::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    c.json
        .as_ref()
        .and_then(|j| j["net_config"]["resolution"].as_u64())
        .map(|r| r as usize)
        .ok_or_else(|| anyhow!("{} is not a network checkpoint", path.display()))
}

fn design(args: &DesignArgs, cfg: &PipelineConfig, fallback: Option<ParameterVector>) -> Result<ParameterVector> {
    let mut pv = match &args.params {
        Some(p) => serde_json::from_slice(&fs::read(p)?).with_context(|| format!("parameters in {}", p.display()))?,
        None => fallback.unwrap_or_else(|| ParameterVector::midpoint(&cfg.data.bounds)),
    };
    for s in &args.set {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects NAME=VALUE, got `{s}`"))?;
        let p = Param::ALL
            .into_iter()
            .find(|p| p.name() == name.trim())
            .ok_or_else(|| anyhow!("unknown parameter `{name}`"))?;
        pv.set(p, value.trim().parse().with_context(|| format!("value of {name}"))?);
    }
    pv.validate(&cfg.data.bounds).into_result()?;
    Ok(pv)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Doe { n } => {
            let c = cli.pipeline_config(64)?;
            let run = DoeRun::generate(*n, c.data.bounds, c.seeds.doe)?;
            let path = cli.out_dir()?.join("doe.json");
            write_json(&path, &run)?;
            println!("{} designs -> {}", run.samples.len(), path.display());
        }
        Command::Generate { n, designs } => {
            let c = cli.pipeline_config(64)?;
            let data = match (n, designs) {
                (_, Some(p)) => {
                    let run: DoeRun = serde_json::from_slice(&fs::read(p)?)?;
                    let samples = formcast_core::dataset::make_samples(&run.samples, &c.data, run.seed, "s")?;
                    Dataset::from_samples(samples, &c.data, run.seed)?
                }
                (Some(n), None) => Dataset::generate(*n, &c.data, c.seeds.doe)?,
                (None, None) => bail!("generate needs --n or --designs"),
            };
            let out = cli.out_dir()?;
            data.write(out)?;
            let flagged = data.samples.iter().filter(|s| s.flagged).count();
            println!(
                "{} samples ({} clipped) at {}x{} -> {}",
                data.len(),
                flagged,
                c.data.resolution,
                c.data.resolution,
                out.display()
            );
        }
        Command::Train {
            data,
            kind,
            epochs,
            resume,
        } => {
            let data = load_dataset(data)?;
            let c = dataset_config(&cli, &data)?;
            let kind: TargetKind = (*kind).into();
            let mut tc = c.train;
            tc.seed = c.seeds.train;
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let mut trainer = match resume {
                Some(p) => {
                    let mut t = Trainer::load(p).with_context(|| format!("resuming from {}", p.display()))?;
                    if t.kind != kind || t.net.config() != &c.net_for(kind) {
                        bail!(
                            "checkpoint {} does not match the configured {:?} network",
                            p.display(),
                            kind
                        );
                    }
                    t.config.epochs = tc.epochs;
                    t
                }
                None => Trainer::new(c.net_for(kind), kind, tc)?,
            };
            let (tr, te) = split(data.len(), tc.test_frac, tc.seed)?;
            let pick = |ix: &[usize]| ix.iter().map(|&i| data.samples[i].clone()).collect::<Vec<Sample>>();
            let (train, test) = (pick(&tr), pick(&te));
            let out = cli.out_dir()?;
            let name = match kind {
                TargetKind::Thinning => "thinning",
                TargetKind::Displacement => "displacement",
            };
            let run = trainer.run(&train, &test, Some(&out.join(format!("{name}.fqt"))))?;
            write_json(&out.join(format!("{name}_run.json")), &run)?;
            let last = run.epochs.last().ok_or_else(|| anyhow!("no epochs were run"))?;
            println!(
                "{name}: {} epochs ({}), final train loss {:.6e}, best test loss {:.6e} at epoch {}",
                run.epochs.len(),
                run.stop_reason,
                last.train_loss,
                run.best_loss,
                run.best_epoch
            );
        }
        Command::Evaluate {
            data,
            checkpoint,
            test_only,
        } => {
            let data = load_dataset(data)?;
            let c = dataset_config(&cli, &data)?;
            let t = Trainer::load(checkpoint)?;
            if t.net.config().resolution != c.data.resolution {
                bail!(
                    "checkpoint resolution {} does not match the dataset's {}",
                    t.net.config().resolution,
                    c.data.resolution
                );
            }
            let samples: Vec<Sample> = if *test_only {
                let (_, te) = split(data.len(), c.train.test_frac, c.seeds.train)?;
                te.iter().map(|&i| data.samples[i].clone()).collect()
            } else {
                data.samples.clone()
            };
            let preds = predict_all(&t.net, &samples, t.kind, c.train.batch_size)?;
            let m = test_metrics(&preds, &samples, t.kind)?;
            let mut report = json!({ "kind": t.kind, "samples": samples.len(), "mse": m.mse, "mre": m.mre });
            if t.kind == TargetKind::Thinning {
                let gt: Vec<Vec<f64>> = samples.iter().map(|s| to_f64(&s.thinning)).collect();
                let pd: Vec<Vec<f64>> = preds.iter().map(to_f64).collect();
                let masks: Vec<Vec<f64>> = samples
                    .iter()
                    .map(|s| s.mask.iter().map(|&v| f64::from(v)).collect())
                    .collect();
                let mae: Vec<f64> = (0..samples.len())
                    .map(|i| mae_max(&pd[i], &gt[i], &masks[i]))
                    .collect::<formcast_core::Result<_>>()?;
                report["mae_max_mean"] = json!(mae.iter().sum::<f64>() / mae.len() as f64);
                report["mae_max_worst"] = json!(mae.iter().cloned().fold(0.0, f64::max));
                if samples.len() >= 2 {
                    report["kld_max"] = json!(kld_stats(&gt, &pd, &masks, Stat::Max)?);
                    report["kld_mean"] = json!(kld_stats(&gt, &pd, &masks, Stat::Mean)?);
                }
            }
            write_json(&cli.out_dir()?.join("evaluation.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict {
            thinning,
            displacement,
            design: d,
        } => {
            let c = cli.pipeline_config(checkpoint_resolution(thinning)?)?;
            let pv = design(d, &c, None)?;
            let predictor = Predictor::load(thinning, displacement, c.data.clone())?;
            let p = predictor.predict(&pv)?;
            let mut container = p.to_container()?;
            container.json = Some(json!({ "params": pv, "summary": p.summary, "model_id": predictor.model_id }));
            let out = cli.out_dir()?;
            container.write(out.join("prediction.fqt"))?;
            write_json(&out.join("summary.json"), &p.summary)?;
            println!("{}", serde_json::to_string_pretty(&p.summary)?);
        }
        Command::Sweep {
            checkpoint,
            speeds,
            temps,
            design: d,
        } => {
            let c = cli.pipeline_config(checkpoint_resolution(checkpoint)?)?;
            let t = Trainer::load(checkpoint)?;
            if t.kind != TargetKind::Thinning {
                bail!("sweeps need a thinning checkpoint");
            }
            let base = design(d, &c, None)?;
            let speeds: Vec<f64> = match speeds {
                Some(s) => parse_list(s, "speed")?,
                None => {
                    let (lo, hi) = c.data.bounds.speed;
                    (0..10).map(|i| lo + (hi - lo) * i as f64 / 9.0).collect()
                }
            };
            let temps: Vec<f64> = parse_list(temps, "temperature")?;
            let sweep = speed_sweep(&t.net, &c.data, &base, &speeds, &temps)?;
            let n = c.data.resolution;
            let mut frames = Vec::with_capacity(sweep.frames.len() * n * n);
            for f in &sweep.frames {
                frames.extend(f.thinning.iter().map(|&v| v as f32));
            }
            let mut container = Container::new();
            container.push("frames", Tensor::new(&[sweep.frames.len(), 1, n, n], frames)?);
            container.push(
                "mask",
                Tensor::new(&[1, n, n], sweep.mask.iter().map(|&v| v as f32).collect())?,
            );
            let out = cli.out_dir()?;
            container.write(out.join("sweep.fqt"))?;
            let smooth = sweep.smoothness();
            write_json(
                &out.join("sweep.json"),
                &json!({ "sweep": sweep, "max_step_over_range": smooth }),
            )?;
            println!(
                "{} frames, max adjacent change / range = {smooth:.4}",
                sweep.frames.len()
            );
        }
        Command::Reconstruct {
            fields,
            window,
            design: d,
        } => {
            let mut container = Container::read(fields).with_context(|| format!("reading {}", fields.display()))?;
            let stored: Option<ParameterVector> = container
                .json
                .as_ref()
                .and_then(|j| j.get("params"))
                .map(|p| serde_json::from_value(p.clone()))
                .transpose()?;
            let thinning = container.take("thinning")?;
            let n = thinning.dims().last().copied().unwrap_or(0);
            let c = cli.pipeline_config(n)?;
            let pv = design(d, &c, stored)?;
            let displacement = container.take("displacement")?;
            let mask = container.take("mask")?.into_data();
            let grid = formcast_core::interp::GridSpec::new(n)?;
            let mesh = as_formed_mesh(&displacement, &thinning, &mask, grid)?;
            let window = window.unwrap_or(DEFAULT_WINDOW.min(n - 1 + n % 2));
            let (dev, summary) = summarize(&mesh, &pv, window)?;
            let out = cli.out_dir()?;
            fs::write(out.join("mesh.fqm"), mesh.to_fqm())?;
            let mut wh = Container::new();
            wh.push(
                "wrinkle_height_mm",
                Tensor::new(&[1, n, n], dev.iter().map(|&v| v as f32).collect())?,
            );
            wh.write(out.join("wrinkle_height.fqt"))?;
            write_json(&out.join("reconstruct.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Study {
            data,
            test_data,
            sizes,
            seeds,
            epochs,
        } => {
            let pool = load_dataset(data)?;
            let test = load_dataset(test_data)?;
            if pool.manifest.grid != test.manifest.grid {
                bail!("training and test datasets use different grids");
            }
            let c = dataset_config(&cli, &pool)?;
            let mut tc = c.train;
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let sizes: Vec<usize> = parse_list(sizes, "size")?;
            let seeds: Vec<u64> = parse_list(seeds, "seed")?;
            let study = size_study(
                &pool.samples,
                &test.samples,
                &sizes,
                &seeds,
                &c.net_for(TargetKind::Thinning),
                &tc,
                |r, _| eprintln!("size {} seed {}: mse {:.4e} mre {:.4}", r.size, r.seed, r.mse, r.mre),
            )?;
            let out = cli.out_dir()?;
            study.write_csv(fs::File::create(out.join("size_study.csv"))?)?;
            study.write_aggregate_csv(fs::File::create(out.join("size_study_summary.csv"))?)?;
            for a in &study.aggregates {
                println!(
                    "{:>4}  mse {:.4e} +- {:.2e}  mre {:.4} +- {:.4}",
                    a.size, a.mean_mse, a.std_mse, a.mean_mre, a.std_mre
                );
            }
        }
        Command::Serve {
            thinning,
            displacement,
            host,
            port,
        } => {
            let c = cli.pipeline_config(checkpoint_resolution(thinning)?)?;
            let mut rt = tokio::runtime::Builder::new_multi_thread();
            if let Some(n) = thread_cap()? {
                rt.worker_threads(n);
            }
            let rt = rt.enable_all().build()?;
            rt.block_on(serve(
                c,
                thinning.clone(),
                displacement.clone(),
                format!("{host}:{port}"),
            ))?;
        }
    }
    Ok(())
}

async fn serve(c: PipelineConfig, thinning: PathBuf, displacement: PathBuf, addr: String) -> Result<()> {
    let state = crate::server::AppState::new(c.data.clone());
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Predictor::load(&thinning, &displacement, c.data) {
        Ok(p) => {
            eprintln!("models loaded: {}", p.model_id);
            loader.install(p);
        }
        Err(e) => {
            eprintln!("failed to load models: {e}");
            std::process::exit(2);
        }
    });
    axum::serve(listener, crate::server::router(state)).await?;
    Ok(())
}
