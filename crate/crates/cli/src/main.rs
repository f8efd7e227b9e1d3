use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qat_core::arch::{align_width, model_size, ArchSpec, BitwidthMap, Family};
use qat_core::calib::{build_calib_table, CalibConfig, CalibTable};
use qat_core::data::DatasetSpec;
use qat_core::harness::{self, ExperimentConfig};
use qat_core::nn::TrainConfig;
use qat_core::quant::QuantSpec;

#[derive(Parser)]
#[command(name = "qat", version, about = "Quantization-aware training at equal model size")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate clipping ratios c = mean|W| / a* by Gaussian simulation.
    Calibrate {
        #[arg(long, value_delimiter = ',', default_value = "3,4,5,6,7,8")]
        bits: Vec<u8>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// First seed; each sigma is simulated with `--repeats` consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        repeats: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 400)]
        grid_points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-layer size table of an architecture.
    Describe {
        #[command(flatten)]
        arch: ArchArgs,
        /// Align the width multiplier to the size of this map at this multiplier, e.g. `4@1`.
        #[arg(long, value_name = "BITS@M")]
        align_to: Option<String>,
        /// Print the (aligned) ArchSpec as JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Train one model and write its report and best checkpoint.
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        /// `gratings`, `separable`, `cifar10`, `cifar100` or a DatasetSpec JSON file.
        #[arg(long, default_value = "gratings")]
        dataset: String,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 2)]
        warmup_epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 5e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.0)]
        label_smoothing: f64,
        #[arg(long)]
        augment: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a size-aligned sweep described by a JSON config (resumable).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Rebuild pareto.csv, pareto.svg and decomposition.csv from stored records.
    Report {
        /// Sweep output directory.
        #[arg(long)]
        dir: PathBuf,
        /// Defaults to `<dir>/config.json`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ArchArgs {
    /// ArchSpec JSON file; overrides the other architecture flags.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Family id such as `resnet20`, `vgg11-b`, `mobilenetv2-cifar`, `tiny-vgg`.
    #[arg(long, default_value = "resnet20")]
    family: String,
    #[arg(long, default_value_t = 1.0)]
    multiplier: f64,
    /// Interior bitwidth (`1`..`8` or `fp`); first and last layers stay at 8 bits.
    #[arg(long, default_value = "4")]
    bits: String,
    /// Separate bitwidth for depth-wise convs.
    #[arg(long)]
    depthwise_bits: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "3,32,32")]
    input: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    classes: usize,
}

fn parse_bits(s: &str) -> Result<Option<u8>> {
    if s == "fp" {
        return Ok(None);
    }
    let b: u8 = s.parse().with_context(|| format!("bad bitwidth {s:?}"))?;
    Ok(Some(b))
}

fn bitwidth_map(bits: &str, depthwise: Option<&str>) -> Result<BitwidthMap> {
    let mut map = match parse_bits(bits)? {
        Some(b) => BitwidthMap::uniform(b),
        None => BitwidthMap::full_precision(),
    };
    if let Some(dw) = depthwise {
        map = map.with_depthwise(match parse_bits(dw)? {
            Some(b) => QuantSpec::with_bits(b),
            None => QuantSpec::full_precision(),
        });
    }
    Ok(map)
}

impl ArchArgs {
    fn spec(&self, input: Option<([usize; 3], usize)>) -> Result<ArchSpec> {
        if let Some(path) = &self.arch {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(ArchSpec::from_json(&text)?);
        }
        let family: Family = self.family.parse()?;
        let (shape, classes) = match input {
            Some(v) => v,
            None => {
                let [c, h, w] = self.input[..] else {
                    bail!("--input needs three values C,H,W");
                };
                ([c, h, w], self.classes)
            }
        };
        Ok(ArchSpec::new(family, self.multiplier, bitwidth_map(&self.bits, self.depthwise_bits.as_deref())?)
            .with_input(shape, classes))
    }
}

fn dataset_spec(name: &str) -> Result<DatasetSpec> {
    Ok(match name {
        "gratings" => DatasetSpec::Gratings { classes: 8, size: 12, train: 256, val: 256, noise: 1.0, seed: 0 },
        "separable" => DatasetSpec::Separable { classes: 3, size: 8, train: 96, val: 48, seed: 0 },
        "cifar10" => DatasetSpec::Cifar10,
        "cifar100" => DatasetSpec::Cifar100,
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading dataset spec {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing dataset spec {path}"))?
        }
    })
}

fn calibrate(
    bits: &[u8],
    samples: usize,
    seed: u64,
    repeats: u64,
    sigmas: Vec<f64>,
    grid_points: usize,
    out: &Path,
) -> Result<()> {
    let config = CalibConfig {
        samples,
        sigmas,
        seeds: (seed..seed + repeats.max(1)).collect(),
        grid_points,
        ..CalibConfig::default()
    };
    let table = build_calib_table(bits, &config)?;
    for e in table.entries() {
        println!("{}-bit: c = {:.6}", e.bitwidth, e.c);
    }
    table.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn describe(arch: &ArchArgs, align_to: Option<&str>, json: bool) -> Result<()> {
    let mut spec = arch.spec(None)?;
    if let Some(target) = align_to {
        let (bits, m) = target.split_once('@').context("--align-to expects BITS@M, e.g. 4@1")?;
        let m: f64 = m.parse().with_context(|| format!("bad multiplier {m:?}"))?;
        let mut reference = spec.with_multiplier(m);
        reference.bitwidths = bitwidth_map(bits, None)?;
        let target_bits = model_size(&reference)?.total_bits;
        let a = align_width(&spec, target_bits, harness::DEFAULT_TOLERANCE)?;
        eprintln!(
            "aligned to {target_bits} bits ({} at m={m}): m = {:.6}, {} bits, {:+.3}%",
            reference.bitwidths.label(),
            a.width_multiplier,
            a.size_bits,
            100.0 * (a.size_bits as f64 - target_bits as f64) / target_bits as f64
        );
        spec = spec.with_multiplier(a.width_multiplier);
    }
    if json {
        println!("{}", spec.to_json());
    } else {
        println!("{} ({})", spec.id(), spec.bitwidths.label());
        print!("{}", model_size(&spec)?.to_table());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Calibrate { bits, samples, seed, repeats, sigmas, grid_points, out } => {
            calibrate(&bits, samples, seed, repeats, sigmas, grid_points, &out)
        }
        Command::Describe { arch, align_to, json } => describe(&arch, align_to.as_deref(), json),
        Command::Train {
            arch,
            dataset,
            epochs,
            warmup_epochs,
            batch_size,
            lr,
            weight_decay,
            label_smoothing,
            augment,
            seed,
            calib,
            out,
        } => {
            let data_spec = dataset_spec(&dataset)?;
            let (train, val) = data_spec.load()?;
            let spec = arch.spec(Some((train.shape, train.classes)))?;
            let calib = match calib {
                Some(p) => CalibTable::load(&p)?,
                None => CalibTable::builtin(),
            };
            let config = TrainConfig {
                lr,
                warmup_epochs,
                epochs,
                batch_size,
                weight_decay,
                label_smoothing,
                augment,
                seed,
                ..TrainConfig::default()
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let size = model_size(&spec)?.total_bits;
            log::info!("training {} ({}, {size} bits) on {}", spec.id(), spec.bitwidths.label(), data_spec.name());
            let (report, _) =
                harness::train_once(&spec, &calib, &config, seed, &train, &val, None, Some(&out.join("best.json")))?;
            for e in &report.history {
                println!(
                    "epoch {:>3}  lr {:.5}  loss {:.4}  train {:6.2}%  val {:6.2}%",
                    e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc
                );
            }
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            println!("best {:.2}% at epoch {}; wrote {}", report.best_val_acc, report.best_epoch, out.display());
            Ok(())
        }
        Command::Sweep { config, out, workers } => {
            let cfg = ExperimentConfig::load(&config)?;
            let records = harness::run_sweep(&cfg, &out, workers)?;
            let failed = records.iter().filter(|r| !r.is_completed()).count();
            println!("{} records ({failed} failed); reports in {}", records.len(), out.display());
            Ok(())
        }
        Command::Report { dir, config } => {
            let cfg = ExperimentConfig::load(&config.unwrap_or_else(|| dir.join("config.json")))?;
            let records = harness::load_records(&harness::records_dir(&dir))?;
            harness::write_reports(&cfg, &records, &dir)?;
            println!("{} records; reports in {}", records.len(), dir.display());
            Ok(())
        }
    }
}
