mod config;
mod data_spec;
mod error;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pmae_core::pca::PcaBasis;
use pmae_core::pipeline::{
    append_csv, extract_features, finetune, fit_basis, knn_eval, pretrain, probe, FinetuneConfig,
    MetricRow, OptimConfig, ProbeConfig, ProbeKind,
};
use pmae_core::vit::VitModel;
use pmae_core::Tensor;

use config::RunConfig;
use error::CliError;
use render::RenderMode;

const THREADS_ENV: &str = "PMAE_THREADS";
const FINAL_CHECKPOINT: &str = "final.pmae";

#[derive(Parser)]
#[command(
    name = "pmae",
    version,
    about = "Masked image modeling lab: patch and principal-component masking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a PCA basis on the normalized training images.
    FitPca {
        #[arg(long)]
        data: String,
        /// Output PCAB file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a ViT autoencoder from a key=value config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (overrides `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or precomputed features, with one protocol.
    Eval {
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long, conflicts_with_all = ["features_train", "features_test"])]
        checkpoint: Option<PathBuf>,
        /// Run config; defaults to `config.txt` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset spec; defaults to the config's `data`.
        #[arg(long)]
        data: Option<String>,
        /// CSV of `label,f1,f2,...` rows.
        #[arg(long, requires = "features_test")]
        features_train: Option<PathBuf>,
        #[arg(long, requires = "features_train")]
        features_test: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Disable training-set augmentation.
        #[arg(long)]
        no_augment: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory whose `metrics.csv` receives the result.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render original / masked input / target grids as PGM or PPM.
    RenderMasks {
        #[arg(long)]
        data: String,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0.75)]
        r: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        patch_px: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Linear,
    Mlp,
    Knn,
    Finetune,
}

impl Protocol {
    fn name(self) -> &'static str {
        match self {
            Protocol::Linear => "linear",
            Protocol::Mlp => "mlp",
            Protocol::Knn => "knn",
            Protocol::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Pixel,
    Component,
    #[value(name = "pc_bands")]
    PcBands,
}

/// Sizes the global worker pool from `PMAE_THREADS`; returns the thread count in use.
fn init_threads() -> Result<usize, CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Config(format!(
                "{THREADS_ENV}: expected a positive integer, got `{v}`"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("{THREADS_ENV}: {e}")))?;
    }
    Ok(rayon::current_num_threads())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn cmd_fit_pca(data: &str, out: &Path) -> Result<(), CliError> {
    let splits = data_spec::load(data)?;
    let stats = splits.train.channel_stats();
    let basis = fit_basis(&splits.train, &stats)?;
    basis.save(out)?;
    println!("wrote {} (D = {})", out.display(), basis.dim());
    for (l, f) in basis.variance_fractions().iter().take(10).enumerate() {
        println!("pc{l}\t{f:.6}");
    }
    Ok(())
}

fn cmd_pretrain(
    config: &Path,
    overrides: &[String],
    out: Option<PathBuf>,
    threads: usize,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_file(config)?;
    cfg.apply_overrides(overrides)?;
    if let Some(out) = out {
        cfg.out = out;
    }
    cfg.validate()?;
    let splits = data_spec::load(&cfg.data)?;
    let train = &splits.train;
    let pc = cfg.pretrain_config((train.height, train.width, train.channels))?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let basis = match (&cfg.basis, cfg.fit_basis) {
        (Some(path), _) => Some(PcaBasis::load(path)?),
        (None, true) => {
            let b = fit_basis(train, &train.channel_stats())?;
            b.save(&cfg.out.join("basis.pcab"))?;
            Some(b)
        }
        (None, false) => None,
    };
    write_file(&cfg.out.join("config.txt"), cfg.to_text())?;
    write_file(&cfg.out.join("run.txt"), format!("threads = {threads}\n"))?;

    let every = cfg.checkpoint_every;
    let dir = cfg.out.clone();
    let result = pretrain(&pc, train, basis.as_ref(), |epoch, model| {
        if every > 0 && epoch % every == 0 {
            model.save(&dir.join(format!("checkpoint_epoch{epoch:04}.pmae")))?;
        }
        Ok(())
    })?;
    result.model.save(&cfg.out.join(FINAL_CHECKPOINT))?;
    result.metrics.write_csv(&cfg.out.join("metrics.csv"))?;
    let rows = result.metrics.rows();
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "pretrained {} epochs: loss {:.6} -> {:.6}",
            rows.len(),
            first.loss.unwrap_or(f64::NAN),
            last.loss.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Reads `label,f1,f2,...` rows.
fn read_features(path: &Path) -> Result<(Tensor, Vec<usize>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad =
        |n: usize, msg: &str| CliError::Config(format!("{}: line {n}: {msg}", path.display()));
    let (mut data, mut labels, mut dim) = (Vec::new(), Vec::new(), None);
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let mut fields = line.split(',').map(str::trim);
        let label = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(n + 1, "bad label"))?;
        let row = fields
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(n + 1, "bad feature value"))?;
        if row.is_empty() || *dim.get_or_insert(row.len()) != row.len() {
            return Err(bad(n + 1, "inconsistent feature count"));
        }
        labels.push(label);
        data.extend(row);
    }
    let d = dim.ok_or_else(|| CliError::Config(format!("{}: no rows", path.display())))?;
    Ok((Tensor::new(vec![labels.len(), d], data)?, labels))
}

fn override_epochs(optim: &mut OptimConfig, epochs: Option<usize>, batch: Option<usize>) {
    if let Some(e) = epochs {
        optim.total_epochs = e;
        optim.warmup_epochs = optim.warmup_epochs.min(e);
    }
    if let Some(b) = batch {
        optim.batch_size = b;
    }
}

struct EvalArgs {
    protocol: Protocol,
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    data: Option<String>,
    features: Option<(PathBuf, PathBuf)>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    no_augment: bool,
    seed: u64,
    out: Option<PathBuf>,
}

fn run_probe(
    a: &EvalArgs,
    kind: ProbeKind,
    train: (&Tensor, &[usize]),
    test: (&Tensor, &[usize]),
) -> Result<(f64, usize), CliError> {
    let mut pc = ProbeConfig::new(kind, a.seed);
    override_epochs(&mut pc.optim, a.epochs, a.batch_size);
    Ok((
        probe(train.0, train.1, test.0, test.1, &pc)?,
        pc.optim.total_epochs,
    ))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let mut k = None;
    let (accuracy, epochs, default_out) = if let Some((tr, te)) = &a.features {
        let (ftr, ytr) = read_features(tr)?;
        let (fte, yte) = read_features(te)?;
        let (acc, epochs) = match a.protocol {
            Protocol::Linear => run_probe(&a, ProbeKind::Linear, (&ftr, &ytr), (&fte, &yte))?,
            Protocol::Mlp => run_probe(&a, ProbeKind::Mlp, (&ftr, &ytr), (&fte, &yte))?,
            Protocol::Knn => {
                let res = knn_eval(&ftr, &ytr, &fte, &yte, (2, 20))?;
                k = Some(res.best_k);
                (res.best_accuracy, 0)
            }
            Protocol::Finetune => {
                return Err(CliError::Usage(
                    "finetune needs --checkpoint, not precomputed features".into(),
                ))
            }
        };
        (acc, epochs, None)
    } else {
        let ckpt = a.checkpoint.clone().ok_or_else(|| {
            CliError::Usage("give --checkpoint or --features-train/--features-test".into())
        })?;
        if !ckpt.is_file() {
            return Err(CliError::io(
                &ckpt,
                std::io::Error::from(std::io::ErrorKind::NotFound),
            ));
        }
        let dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg_path = a.config.clone().unwrap_or_else(|| dir.join("config.txt"));
        let mut cfg = RunConfig::from_file(&cfg_path)?;
        if let Some(d) = &a.data {
            cfg.data = d.clone();
        }
        let splits = data_spec::load(&cfg.data)?;
        let (train, test) = (&splits.train, splits.test()?);
        let model = VitModel::load(cfg.vit((train.height, train.width, train.channels)), &ckpt)?;
        let stats = train.channel_stats();
        let aug_cfg = cfg.augment_config();
        let aug = (cfg.eval_augment && !a.no_augment).then_some(&aug_cfg);
        let (acc, epochs) = match a.protocol {
            Protocol::Linear | Protocol::Mlp | Protocol::Knn => {
                let train_aug = if a.protocol == Protocol::Knn {
                    None
                } else {
                    aug
                };
                let (ftr, ytr) = extract_features(&model, train, &stats, train_aug, a.seed)?;
                let (fte, yte) = extract_features(&model, test, &stats, None, a.seed)?;
                match a.protocol {
                    Protocol::Linear => {
                        run_probe(&a, ProbeKind::Linear, (&ftr, &ytr), (&fte, &yte))?
                    }
                    Protocol::Mlp => run_probe(&a, ProbeKind::Mlp, (&ftr, &ytr), (&fte, &yte))?,
                    _ => {
                        let res = knn_eval(&ftr, &ytr, &fte, &yte, (2, 20))?;
                        k = Some(res.best_k);
                        (res.best_accuracy, 0)
                    }
                }
            }
            Protocol::Finetune => {
                let mut fc = FinetuneConfig::new(a.seed);
                override_epochs(&mut fc.optim, a.epochs, a.batch_size);
                fc.augment = aug.cloned();
                (
                    finetune(&model, train, test, &stats, &fc)?,
                    fc.optim.total_epochs,
                )
            }
        };
        (acc, epochs, Some(dir))
    };

    match k {
        Some(k) => println!(
            "protocol={} accuracy={accuracy:.6} k={k}",
            a.protocol.name()
        ),
        None => println!("protocol={} accuracy={accuracy:.6}", a.protocol.name()),
    }
    if let Some(dir) = a.out.or(default_out) {
        let mut row = MetricRow::new(epochs, format!("eval_{}", a.protocol.name()), a.seed);
        row.accuracy = Some(accuracy);
        append_csv(&dir.join("metrics.csv"), &[row])?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = init_threads()?;
    match cli.command {
        Command::FitPca { data, out } => cmd_fit_pca(&data, &out),
        Command::Pretrain {
            config,
            overrides,
            out,
        } => cmd_pretrain(&config, &overrides, out, threads),
        Command::Eval {
            protocol,
            checkpoint,
            config,
            data,
            features_train,
            features_test,
            epochs,
            batch_size,
            no_augment,
            seed,
            out,
        } => cmd_eval(EvalArgs {
            protocol,
            checkpoint,
            config,
            data,
            features: features_train.zip(features_test),
            epochs,
            batch_size,
            no_augment,
            seed,
            out,
        }),
        Command::RenderMasks {
            data,
            basis,
            mode,
            r,
            seed,
            out,
            count,
            patch_px,
        } => {
            let splits = data_spec::load(&data)?;
            let stats = splits.train.channel_stats();
            let basis = basis.as_deref().map(PcaBasis::load).transpose()?;
            let mode = match mode {
                Mode::Pixel => RenderMode::Pixel,
                Mode::Component => RenderMode::Component,
                Mode::PcBands => RenderMode::PcBands,
            };
            let grid = render::render(
                &splits.train,
                &stats,
                basis.as_ref(),
                mode,
                r,
                seed,
                count,
                patch_px,
            )?;
            grid.write(&stats, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
