mod overrides;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use hydraview::dataset::{generate_synthetic, read_sequence, DatasetManifest, SkeletonSequence, SynthConfig};
use hydraview::evaluation::{
    detections_in_frames, evaluate, ground_truth_events, read_events_jsonl, write_events_jsonl, EventRecord,
};
use hydraview::hydraview::time_selective_scan;
use hydraview::pipeline::{
    check_pair, extract_all, infer, load_encoder, load_temporal, open_dataset, run_stage1, run_stage2, TrainConfig,
};
use hydraview::plot::{timeline_svg, TimelineStyle};

/// Two-stage multi-view skeleton action detection.
#[derive(Parser, Debug)]
#[command(name = "hydraview", version)]
struct Cli {
    /// Seed for data generation, training and benchmarks; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: `.skel` files plus `manifest.json`.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// JSON file with generator settings; flags below win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        /// Total number of sequences over all splits.
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        joints: Option<usize>,
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        /// Validation sequences [default: sequences / 10].
        #[arg(long)]
        val: Option<usize>,
        /// Test sequences [default: sequences / 5].
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train stage 1 (window encoder) or stage 2 (temporal encoder) into a run directory.
    #[command(after_help = overrides::help_text())]
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON training configuration; `--KEY VALUE` flags win.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Frozen window encoder, required for `--stage 2`.
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
    },
    /// Extract and cache feature grids for every split.
    #[command(name = "extract-features", after_help = overrides::help_text())]
    ExtractFeatures {
        #[arg(long)]
        data: PathBuf,
        /// Run directory; grids go to its `features/`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stage1_ckpt: PathBuf,
    },
    /// Run inference on a split and write event-mAP reports.
    #[command(after_help = overrides::help_text())]
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stage1_ckpt: PathBuf,
        #[arg(long)]
        stage2_ckpt: PathBuf,
        /// Cameras used at inference.
        #[arg(long, default_value_t = 12)]
        views: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5])]
        thresholds: Vec<f64>,
        /// Output directory: report.json, report.csv, detections.jsonl, gt.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detections for a split or a single `.skel` file as JSON lines.
    #[command(after_help = overrides::help_text())]
    Infer {
        /// Dataset manifest; used with `--split`.
        #[arg(long, required_unless_present = "sequence")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// A single sequence file instead of a dataset split.
        #[arg(long, conflicts_with = "data")]
        sequence: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stage1_ckpt: PathBuf,
        #[arg(long)]
        stage2_ckpt: PathBuf,
        #[arg(long, default_value_t = 12)]
        views: usize,
        /// Detections file (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw ground-truth and predicted events as an SVG timeline.
    Plot {
        /// Ground-truth events (JSON lines).
        #[arg(long)]
        gt: PathBuf,
        /// Predicted events (JSON lines); omit for a ground-truth-only plot.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Dataset manifest, for class names.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only plot this sequence.
        #[arg(long)]
        seq: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the selective scan at several lengths and print CSV.
    #[command(name = "bench-scan")]
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = [2048usize, 4096])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

const CONFIG_COMMANDS: [&str; 4] = ["train", "extract-features", "eval", "infer"];

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args: Vec<String> = std::env::args().collect();
    let (overrides, rest) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => return fail("usage", &e.to_string(), 2),
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), &format!("{e:#}"), 1),
    }
}

/// One JSON line on stderr.
fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use hydraview::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Shape { .. }) => "shape",
        Some(E::NonFinite { .. }) => "non_finite",
        Some(E::InvalidArgument(_)) => "invalid_argument",
        Some(E::ForeignTensor) | Some(E::NonScalarLoss(_)) => "internal",
        Some(E::Frozen(_)) => "frozen",
        Some(E::NotFrozen(_)) => "not_frozen",
        Some(E::Diverged { .. }) => "diverged",
        Some(E::Format(_)) => "format",
        Some(E::Missing(_)) => "missing",
        Some(E::Io(_)) => "io",
        Some(E::Json(_)) => "json",
        None => "error",
    }
}

/// Pulls configuration `--KEY VALUE` pairs out of the arguments of the
/// subcommands that take them; everything else is left for clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<(String, String)>, Vec<String>)> {
    let Some(pos) = args.iter().skip(1).position(|a| CONFIG_COMMANDS.contains(&a.as_str())) else {
        return Ok((Vec::new(), args));
    };
    let sub_idx = pos + 1;
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&args[sub_idx])
        .ok_or_else(|| anyhow!("unknown subcommand {}", args[sub_idx]))?;
    let mut reserved: Vec<String> = sub
        .get_arguments()
        .chain(cmd.get_arguments())
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    reserved.extend(["help".to_string(), "version".to_string()]);
    let tail = args[sub_idx + 1..].to_vec();
    let (overrides, rest_tail) = overrides::extract(tail, &reserved)?;
    let mut rest = args[..=sub_idx].to_vec();
    rest.extend(rest_tail);
    Ok((overrides, rest))
}

fn train_config(file: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = overrides::resolve(file, overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    eprintln!("config {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Generate {
            out,
            config,
            classes,
            sequences,
            frames,
            joints,
            fps,
            noise,
            val,
            test,
        } => {
            overrides::ensure_no_overrides(overrides, "generate")?;
            let mut cfg: SynthConfig = match &config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => SynthConfig::default(),
            };
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = $f { cfg.$f = v; })* };
            }
            set!(classes, sequences, frames, joints, fps, noise, seed);
            let n = cfg.sequences;
            let val = val.unwrap_or(n / 10);
            let test = test.unwrap_or(n / 5);
            if val + test >= n {
                bail!(hydraview::Error::InvalidArgument(format!(
                    "{val} validation + {test} test sequences leave none of {n} for training"
                )));
            }
            eprintln!(
                "config {}",
                serde_json::json!({ "generator": &cfg, "val": val, "test": test })
            );
            let seqs = generate_synthetic(&cfg)?;
            let n_train = n - val - test;
            DatasetManifest::write_splits(
                &out,
                &seqs[..n_train],
                &seqs[n_train..n_train + val],
                &seqs[n_train + val..],
            )?;
            println!("wrote {n} sequences ({n_train} train, {val} val, {test} test) to {}", out.display());
        }
        Command::Train {
            data,
            out,
            config,
            stage1_ckpt,
        } => {
            let cfg = train_config(config.as_deref(), overrides, seed)?;
            if cfg.stage == 1 {
                let res = run_stage1(&out, &cfg, &data)?;
                let last = res.log.last().and_then(|l| l.accuracy);
                println!(
                    "stage 1 done: best epoch {:?}, last train accuracy {}, checkpoint {}",
                    res.best_epoch,
                    last.map_or("n/a".into(), |a| format!("{a:.4}")),
                    out.join("stage1.ckpt").display()
                );
            } else {
                let ckpt = stage1_ckpt.ok_or_else(|| {
                    hydraview::Error::Missing(
                        "stage-1 checkpoint: stage 2 needs --stage1-ckpt <run>/stage1.ckpt".into(),
                    )
                })?;
                let res = run_stage2(&out, &cfg, &data, &ckpt)?;
                println!(
                    "stage 2 done: best epoch {:?}, window encoder hash {} unchanged, checkpoint {}",
                    res.best_epoch,
                    res.encoder_hash,
                    out.join("stage2.ckpt").display()
                );
            }
        }
        Command::ExtractFeatures {
            data,
            out,
            config,
            stage1_ckpt,
        } => {
            let cfg = train_config(config.as_deref(), overrides, seed)?;
            let enc = load_encoder(&stage1_ckpt)?;
            let n = extract_all(&out, &enc, &data, cfg.views, cfg.stride, cfg.occlusion_margin)?;
            println!("{n} feature grids in {}", out.join("features").display());
        }
        Command::Eval {
            data,
            split,
            config,
            stage1_ckpt,
            stage2_ckpt,
            views,
            thresholds,
            out,
        } => {
            let cfg = train_config(config.as_deref(), overrides, seed)?;
            let (manifest, base) = open_dataset(&data)?;
            let seqs = manifest.load_split(&base, &split)?;
            if seqs.is_empty() {
                bail!(hydraview::Error::InvalidArgument(format!("split {split} is empty")));
            }
            let (dets, gts) = predict(&cfg, &seqs, &stage1_ckpt, &stage2_ckpt, views)?;
            let report = evaluate(&dets, &gts, &manifest.classes, &thresholds)?;
            fs::create_dir_all(&out)?;
            report.save(out.join("report.json"), out.join("report.csv"))?;
            write_events_jsonl(out.join("detections.jsonl"), &dets)?;
            write_events_jsonl(out.join("gt.jsonl"), &gts)?;
            for t in &report.thresholds {
                println!("mAP@{:.2} = {:.4}", t.iou, t.map);
            }
        }
        Command::Infer {
            data,
            split,
            sequence,
            config,
            stage1_ckpt,
            stage2_ckpt,
            views,
            out,
        } => {
            let cfg = train_config(config.as_deref(), overrides, seed)?;
            let seqs = match (sequence, data) {
                (Some(p), _) => vec![read_sequence(&p)?],
                (None, Some(d)) => {
                    let (manifest, base) = open_dataset(&d)?;
                    manifest.load_split(&base, &split)?
                }
                (None, None) => bail!(hydraview::Error::InvalidArgument("pass --data or --sequence".into())),
            };
            let (dets, _) = predict(&cfg, &seqs, &stage1_ckpt, &stage2_ckpt, views)?;
            write_events_jsonl(&out, &dets)?;
            println!("{} detections over {} sequences written to {}", dets.len(), seqs.len(), out.display());
        }
        Command::Plot {
            gt,
            detections,
            data,
            seq,
            out,
        } => {
            overrides::ensure_no_overrides(overrides, "plot")?;
            let keep = |v: Vec<EventRecord>| -> Vec<EventRecord> {
                v.into_iter().filter(|e| seq.as_ref().is_none_or(|s| *s == e.seq)).collect()
            };
            let gts = keep(read_events_jsonl(&gt)?);
            let dets = match &detections {
                Some(p) => keep(read_events_jsonl(p)?),
                None => Vec::new(),
            };
            let names = match &data {
                Some(d) => open_dataset(d)?.0.classes,
                None => Vec::new(),
            };
            fs::write(&out, timeline_svg(&gts, &dets, &names, &TimelineStyle::default()))?;
            println!("wrote {}", out.display());
        }
        Command::BenchScan {
            lengths,
            channels,
            state,
            trials,
        } => {
            overrides::ensure_no_overrides(overrides, "bench-scan")?;
            if trials == 0 || lengths.is_empty() {
                bail!(hydraview::Error::InvalidArgument("need at least one length and one trial".into()));
            }
            println!("length,channels,state_dim,trials,median_s,min_s,max_s");
            for l in lengths {
                let mut t = time_selective_scan(l, channels, state, trials, seed.unwrap_or(0))?;
                t.sort_by(f64::total_cmp);
                let median = if trials % 2 == 1 {
                    t[trials / 2]
                } else {
                    0.5 * (t[trials / 2 - 1] + t[trials / 2])
                };
                println!("{l},{channels},{state},{trials},{median:.6},{:.6},{:.6}", t[0], t[trials - 1]);
            }
        }
    }
    Ok(())
}

/// Detections and ground-truth events for `seqs`.
fn predict(
    cfg: &TrainConfig,
    seqs: &[SkeletonSequence],
    stage1: &Path,
    stage2: &Path,
    views: usize,
) -> Result<(Vec<EventRecord>, Vec<EventRecord>)> {
    let enc = load_encoder(stage1)?;
    let model = load_temporal(stage2)?;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in seqs {
        check_pair(&enc, &model, s).with_context(|| format!("checkpoints vs sequence {}", s.id))?;
        let probs = infer(&enc, &model, s, views, cfg.stride, cfg.occlusion_margin)?;
        dets.extend(detections_in_frames(
            &s.id,
            &probs,
            cfg.detection_threshold,
            enc.config().frames,
            cfg.stride,
            s.num_frames(),
        )?);
        gts.extend(ground_truth_events(s));
    }
    Ok((dets, gts))
}
