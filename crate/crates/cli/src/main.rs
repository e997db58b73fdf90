use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rcsbnet::data::{binarize, gen_contour, write_contours};
use rcsbnet::io::{read_gray, read_rgb, write_gray_png, write_heatmap_png};
use rcsbnet::losses::{confidence_map, dc_weight_map, focal_weight, wiou_weights};
use rcsbnet::metrics::evaluate_dataset;
use rcsbnet::model::count_params;
use rcsbnet::trainer::{load_training_data, Predictor, Trainer, CHECKPOINT_FILE, LOG_FILE};
use rcsbnet::{Config, Error};

macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// Salient object detection with recursive contour-saliency blending.
#[derive(Parser, Debug)]
#[command(name = "rcsbnet", version)]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Subcommand, Debug)]
enum Mode {
    /// Train a model; writes a checkpoint and a JSON-lines log into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Predict saliency maps for an image or a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory.
        #[arg(long)]
        input: PathBuf,
        /// Also write `<stem>_contour.png`.
        #[arg(long)]
        contours: bool,
        #[arg(long, default_value = "runs/infer")]
        out: PathBuf,
    },
    /// Score predictions against ground-truth masks with matching stems.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Write `<root>/contours/*.png` from `<root>/masks/*.png`.
    GenContours {
        #[command(flatten)]
        common: Common,
        /// Dataset root; defaults to `data.root` from the config.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Print trainable parameter totals per module.
    ParamCount {
        #[command(flatten)]
        common: Common,
    },
    /// Render the loss weight maps of one prediction as heat-map PNGs.
    DumpWeightMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth saliency mask for the image.
        #[arg(long)]
        mask: PathBuf,
        /// Unconfidence weight of the rendered confidence map.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value = "runs/weight_maps")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Preset name or TOML file.
    #[arg(long, default_value = "default")]
    config: String,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> rcsbnet::Result<Config> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        Config::load(&self.config)?.apply_overrides(&overrides)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.mode) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        out!("  {}", p.display());
    }
}

fn run(mode: Mode) -> rcsbnet::Result<()> {
    match mode {
        Mode::Train { common, resume } => train(&common, resume),
        Mode::Infer {
            checkpoint,
            input,
            contours,
            out,
        } => {
            let predictor = Predictor::load(&checkpoint)?;
            let written = predictor.infer_path(&input, &out, contours)?;
            out!("wrote {} maps", written.len());
            print_paths(&written);
            Ok(())
        }
        Mode::Eval { pred, gt, out } => {
            let report = evaluate_dataset(&pred, &gt)?;
            let (json, csv) = report.write(&out)?;
            out!(
                "{} images: mean F {:.4}, MAE {:.4}, weighted F {:.4}, E-measure {:.4}",
                report.images, report.mean_f, report.mae, report.weighted_f, report.e_measure
            );
            print_paths(&[json, csv]);
            Ok(())
        }
        Mode::GenContours { common, root } => {
            let cfg = common.load()?;
            let root = root.unwrap_or_else(|| cfg.data.root.clone());
            if root.as_os_str().is_empty() {
                return Err(Error::Config("pass --root or set data.root".into()));
            }
            let written = write_contours(&root, cfg.data.contour_kernel)?;
            out!("wrote {} contour maps", written.len());
            print_paths(&written);
            Ok(())
        }
        Mode::ParamCount { common } => {
            let cfg = common.load()?;
            let count = count_params(&cfg.model)?;
            out!(
                "total {} (encoder {}, decoder {})",
                count.total, count.encoder, count.decoder
            );
            let width = count.modules.keys().map(|k| k.len()).max().unwrap_or(0);
            for (module, n) in &count.modules {
                out!("  {module:<width$}  {n:>10}");
            }
            Ok(())
        }
        Mode::DumpWeightMaps {
            checkpoint,
            image,
            mask,
            lambda,
            out,
        } => dump_weight_maps(&checkpoint, &image, &mask, lambda, &out),
    }
}

fn train(common: &Common, resume: bool) -> rcsbnet::Result<()> {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    let checkpoint = out.join(CHECKPOINT_FILE);
    let mut trainer = if resume {
        Trainer::resume(&checkpoint)?
    } else {
        Trainer::new(common.load()?)?
    };
    let data = load_training_data(&trainer.config)?;
    let total = trainer.config.train.epochs;
    let logs = trainer.run(&data, Some(&out), |log| {
        eprintln!(
            "epoch {}/{total}: loss {:.4}, train MAE {:.4}",
            log.epoch, log.loss_total, log.train_mae
        );
    })?;
    match logs.last() {
        Some(last) => out!(
            "trained to epoch {} on {} samples: loss {:.4}, train MAE {:.4}",
            last.epoch,
            data.len(),
            last.loss_total,
            last.train_mae
        ),
        None => out!("already at epoch {}", trainer.epoch),
    }
    print_paths(&[checkpoint, out.join(LOG_FILE)]);
    Ok(())
}

fn dump_weight_maps(checkpoint: &Path, image: &Path, mask: &Path, lambda: f64, out: &Path) -> rcsbnet::Result<()> {
    let predictor = Predictor::load(checkpoint)?;
    let cfg = &predictor.config;
    let img = read_rgb(image)?;
    let y_sal = binarize(&read_gray(mask)?);
    if y_sal.shape()[2..] != img.shape()[2..] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {:?}",
            y_sal.shape(),
            img.shape()
        )));
    }
    let y_ctr = gen_contour(&y_sal, cfg.data.contour_kernel)?;
    let (x_sal, x_ctr) = predictor.predict_image(&img)?;
    let (h, w) = (img.height(), img.width());
    let f = |t: &rcsbnet::Tensor<f32>| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
    let (xs, ys, xc, yc) = (f(&x_sal), f(&y_sal), f(&x_ctr), f(&y_ctr));
    let theta = cfg.loss.theta;
    let confidence = confidence_map(&xs, &ys, cfg.loss.beta, lambda)?;
    let conf_max = confidence.iter().cloned().fold(0.0, f64::max);
    let maps = [
        ("confidence.png", confidence, conf_max),
        ("dc_saliency.png", dc_weight_map(&xc, &yc, theta)?, theta + 1.0),
        ("dc_contour.png", dc_weight_map(&xs, &ys, theta)?, theta + 1.0),
        ("wiou.png", wiou_weights(&ys, h, w), 1.0 + rcsbnet::losses::WIOU_GAIN),
        (
            "focal.png",
            focal_weight(&xs, &ys, cfg.loss.focal_alpha, cfg.loss.focal_gamma)?,
            cfg.loss.focal_alpha,
        ),
    ];
    let mut written = Vec::new();
    for (name, values, max) in maps {
        let path = out.join(name);
        write_heatmap_png(&path, &values, h, w, max)?;
        written.push(path);
    }
    for (name, t) in [("saliency.png", &x_sal), ("contour.png", &x_ctr)] {
        let path = out.join(name);
        write_gray_png(&path, t)?;
        written.push(path);
    }
    out!("wrote {} maps for {}", written.len(), image.display());
    print_paths(&written);
    Ok(())
}
