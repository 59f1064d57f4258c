use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scenegraph_core::gradcheck::{finite_difference_check, sample_coordinates};
use scenegraph_core::metrics::{EvalScene, Protocol, ZeroShotSet};
use scenegraph_core::prediction_file::{format_predictions, read_predictions};
use scenegraph_core::scene::{ClassVocabulary, NUM_OBJECT_CLASSES};
use scenegraph_core::scene_file::{load_manifest_scenes, load_scene_file};
use scenegraph_core::{Error, FrequencyPrior, Tape};
use scenegraph_harness::checkpoint::{encode_prior, load_prior, Checkpoint};
use scenegraph_harness::config::TrainConfig;
use scenegraph_harness::evaluate::{eval_scenes, recall_rows, score_rows, ScoreMode, IOU_THRESHOLD};
use scenegraph_harness::protocol::{run_protocol, NMS_THRESHOLD};
use scenegraph_harness::report::{line_chart_svg, write_metadata, write_metrics_csv, Series};
use scenegraph_harness::synth::{generate_synthetic, write_dataset, SyntheticSpec};
use scenegraph_harness::train::{sample_loss, training_sample, Trainer};

/// Scene-graph model training, evaluation, and scoring.
#[derive(Debug, Parser)]
#[command(name = "sgg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the frequency prior of a dataset.
    BuildPrior {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation manifest for the learning-rate schedule.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Write training curves to `<prefix>.loss.svg` and `<prefix>.val.svg`.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run a protocol and report recall metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        k: Vec<usize>,
        #[arg(long)]
        no_graph_constraint: bool,
        #[arg(long)]
        zero_shot: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Also write the ranked triplets as a prediction file.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Skip per-class NMS on SGDet proposals.
        #[arg(long)]
        no_nms: bool,
    },
    /// Score a prediction file against a dataset.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, conflicts_with = "vrd", required_unless_present = "vrd")]
        openimages: bool,
        #[arg(long)]
        vrd: bool,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on one scene.
    GradCheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 1)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List label triples of an evaluation set never seen in training.
    ZeroShot {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the most likely predicates of class pairs under a prior.
    PriorSummary {
        /// Prior file or checkpoint.
        #[arg(long)]
        prior: PathBuf,
        /// Comma-separated `subject:object` class ids.
        #[arg(long, value_delimiter = ',', required = true)]
        pairs: Vec<String>,
    },
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            if e.is_format() {
                ExitCode::from(2)
            } else if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { spec, out, seed } => {
            let spec = SyntheticSpec::from_file(&spec)?;
            let scenes = generate_synthetic(&spec, seed)?;
            let manifest = write_dataset(&out, &scenes)?;
            println!("wrote {} scenes, manifest {}", scenes.len(), manifest.display());
        }
        Command::BuildPrior { manifest, out } => {
            let scenes = load_manifest_scenes(&manifest)?;
            let prior = FrequencyPrior::build(scenes.iter().map(|s| &s.annotation))?;
            std::fs::write(&out, encode_prior(&prior)?)?;
            println!(
                "prior from {} triplets written to {}",
                prior.total_count(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            val,
            plot,
        } => train(&config, &data, &out, val.as_deref(), plot.as_deref())?,
        Command::Eval {
            ckpt,
            data,
            protocol,
            k,
            no_graph_constraint,
            zero_shot,
            report,
            predictions,
            no_nms,
        } => {
            if !matches!(protocol, Protocol::PredCls | Protocol::SgCls | Protocol::SgDet) {
                return Err(Error::Invalid(format!("eval runs predcls, sgcls or sgdet, not {protocol}")).into());
            }
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let scenes = load_manifest_scenes(&data)?;
            let graph_constraint = !no_graph_constraint;
            let preds = run_protocol(&model, &ck.params, ck.prior.as_ref(), &scenes, protocol, !no_nms)?;
            let evals = eval_scenes(&scenes, &preds, graph_constraint);
            let zs = zero_shot.as_ref().map(|p| read_zero_shot(p)).transpose()?;
            let rows = recall_rows(&evals, protocol, &k, graph_constraint, zs.as_ref())?;
            write_metrics_csv(&report, &rows)?;
            let ks: Vec<String> = k.iter().map(usize::to_string).collect();
            write_metadata(
                &report,
                &[
                    ("protocol", protocol.to_string()),
                    ("k", ks.join(",")),
                    ("graph_constraint", graph_constraint.to_string()),
                    ("nms", if no_nms { "off".into() } else { "before_scoring".into() }),
                    ("nms_threshold", NMS_THRESHOLD.to_string()),
                    ("scenes", scenes.len().to_string()),
                    ("iteration", ck.iteration.to_string()),
                ],
            )?;
            if let Some(p) = predictions {
                let text = format_predictions(
                    evals
                        .iter()
                        .enumerate()
                        .flat_map(|(i, e)| e.ranked.iter().map(move |t| (i, t))),
                );
                std::fs::write(p, text)?;
            }
            for r in &rows {
                let v = r.value.map_or("NA".to_owned(), |v| format!("{v:.2}"));
                println!("{}@{} {}: {v}", r.metric, r.k.unwrap_or(0), r.protocol);
            }
        }
        Command::Score {
            predictions,
            gt,
            openimages,
            vrd: _,
            report,
        } => {
            let scenes = load_manifest_scenes(&gt)?;
            let ranked = read_predictions(&predictions, scenes.len())?;
            let evals: Vec<EvalScene> = scenes
                .into_iter()
                .zip(ranked)
                .map(|(s, ranked)| EvalScene {
                    gt: s.annotation,
                    ranked,
                })
                .collect();
            let mode = if openimages {
                ScoreMode::OpenImages
            } else {
                ScoreMode::Vrd
            };
            let rows = score_rows(&evals, mode)?;
            write_metrics_csv(&report, &rows)?;
            write_metadata(
                &report,
                &[
                    ("mode", if openimages { "openimages".into() } else { "vrd".into() }),
                    ("iou_threshold", IOU_THRESHOLD.to_string()),
                ],
            )?;
            for r in &rows {
                let v = r.value.map_or("NA".to_owned(), |v| format!("{v:.2}"));
                println!("{} {}: {v}", r.metric, r.protocol);
            }
        }
        Command::GradCheck {
            ckpt,
            scene,
            per_param,
            tolerance,
            seed,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let scene = load_scene_file(&scene)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sample = training_sample(&scene, ck.config.protocol, ck.config.negative_ratio, &mut rng)?
                .ok_or_else(|| Error::Invalid("scene has no ground-truth objects".into()))?;
            let mut store = ck.params.clone();
            let coords = sample_coordinates(&store, per_param, &mut rng);
            let prior = ck.prior.as_ref();
            let report = finite_difference_check(
                |tape: &mut Tape, s| sample_loss(tape, &model, s, prior, &sample),
                &mut store,
                &coords,
                1e-5,
            )?;
            println!(
                "checked {} coordinates, max relative error {:.3e} at {:?}",
                report.checked, report.max_rel_error, report.worst
            );
            if !(report.max_rel_error < tolerance) {
                return Err(Failure::Check(format!(
                    "gradient error {:.3e} >= {tolerance:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::ZeroShot { train, eval, out } => {
            let train = load_manifest_scenes(&train)?;
            let eval = load_manifest_scenes(&eval)?;
            let zs = ZeroShotSet::build(train.iter().map(|s| &s.annotation), eval.iter().map(|s| &s.annotation));
            std::fs::write(&out, zs.to_text())?;
            println!("{} zero-shot triples written to {}", zs.len(), out.display());
        }
        Command::PriorSummary { prior, pairs } => {
            let prior = load_prior(&prior)?;
            let parsed = pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>, Error>>()?;
            print!(
                "{}",
                prior.summary(&parsed, &ClassVocabulary::numbered().predicate_names)
            );
        }
    }
    Ok(())
}

fn read_zero_shot(path: &Path) -> Result<ZeroShotSet, Error> {
    ZeroShotSet::parse(&std::fs::read_to_string(path)?, path)
}

fn parse_pair(text: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::Parse {
        path: PathBuf::from("--pairs"),
        line: 0,
        message: format!("bad pair `{text}`"),
    };
    let (s, o) = text.split_once(':').ok_or_else(bad)?;
    let s: usize = s.trim().parse().map_err(|_| bad())?;
    let o: usize = o.trim().parse().map_err(|_| bad())?;
    if s == 0 || o == 0 || s >= NUM_OBJECT_CLASSES || o >= NUM_OBJECT_CLASSES {
        return Err(bad());
    }
    Ok((s, o))
}

fn train(config: &Path, data: &Path, out: &Path, val: Option<&Path>, plot: Option<&Path>) -> Result<(), Failure> {
    let config = TrainConfig::from_file(config)?;
    let scenes = load_manifest_scenes(data)?;
    let val_scenes = match val {
        Some(v) => load_manifest_scenes(v)?,
        None => Vec::new(),
    };
    let mut trainer = Trainer::new(config, &scenes)?;
    let every = (trainer.config.max_iterations / 20).max(1);
    trainer.run(&scenes, &val_scenes, |e| {
        if e.iteration % every == 0 || e.validation.is_some() {
            match e.validation {
                Some(v) => println!(
                    "iter {:>6} loss {:.4} lr {:.1e} val R@20 {v:.2}",
                    e.iteration, e.loss, e.lr
                ),
                None => println!("iter {:>6} loss {:.4} lr {:.1e}", e.iteration, e.loss, e.lr),
            }
        }
    })?;
    Checkpoint::from_trainer(&trainer).save(out)?;
    println!("checkpoint written to {}", out.display());
    if let Some(prefix) = plot {
        let loss = Series {
            name: "loss".into(),
            points: trainer.log.iter().map(|e| (e.iteration as f64, e.loss)).collect(),
        };
        let val = Series {
            name: "val R@20".into(),
            points: trainer
                .log
                .iter()
                .filter_map(|e| e.validation.map(|v| (e.iteration as f64, v)))
                .collect(),
        };
        let with_suffix = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        std::fs::write(
            with_suffix(".loss.svg"),
            line_chart_svg("Training loss", "iteration", "loss", &[loss]),
        )?;
        std::fs::write(
            with_suffix(".val.svg"),
            line_chart_svg("Validation recall", "iteration", "R@20", &[val]),
        )?;
    }
    Ok(())
}
