//! Size-aligned sweeps over (family, bitwidth map, model size, seed), record
//! persistence and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{align_width, build, model_size, ArchSpec, BitwidthMap, Family};
use crate::calib::CalibTable;
use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::nn::train::{TrainConfig, TrainHook, TrainReport, Trainer};
use crate::stats::{decompose_accuracy, from_micro_percent, AccRun, LayerFilter, VarianceTracker};

pub const RECORD_VERSION: u32 = 1;
pub const DEFAULT_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEntry {
    pub family: Family,
    #[serde(default)]
    pub imagenet_style: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_bits: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetSizes {
    /// Explicit sizes in bits.
    Bits { bits: Vec<u64> },
    /// The size of `reference` at each multiplier.
    Match { reference: BitwidthMap, multipliers: Vec<f64> },
}

/// High/low/grown triplets for the quantize-then-grow accuracy decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub high: BitwidthMap,
    pub low: BitwidthMap,
    pub multipliers: Vec<f64>,
    /// Width factor for the grown run; when absent the grown run is aligned
    /// to the high-bit run's size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grow_factor: Option<f64>,
}

fn default_repeats() -> usize {
    3
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub families: Vec<FamilyEntry>,
    pub bitwidths: Vec<BitwidthMap>,
    pub targets: TargetSizes,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Seeds are `seed, seed + 1, ...` across repeats.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Calibration table file; the built-in table when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_variance: Option<LayerFilter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<DecompositionConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("<experiment config>", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn calib_table(&self) -> Result<CalibTable> {
        match &self.calib {
            Some(p) => CalibTable::load(p),
            None => Ok(CalibTable::builtin()),
        }
    }

    /// Checks structure and that every bitwidth map resolves against `calib`.
    pub fn validate(&self, calib: &CalibTable) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        if self.families.is_empty() {
            return Err(Error::InvalidArgument("no families configured".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::InvalidArgument(format!("tolerance {} outside (0, 1)", self.tolerance)));
        }
        self.train.validate()?;
        let mut maps: Vec<&BitwidthMap> = self.bitwidths.iter().collect();
        if let TargetSizes::Match { reference, .. } = &self.targets {
            maps.push(reference);
        }
        if let Some(d) = &self.decomposition {
            maps.extend([&d.high, &d.low]);
        }
        for map in maps {
            map.validate()?;
            for spec in [&map.first, &map.last, &map.all_to_all, &map.depthwise].into_iter().flatten() {
                spec.resolve_clip_ratio(calib)?;
            }
        }
        Ok(())
    }

    fn input_and_classes(&self) -> ([usize; 3], usize) {
        match self.dataset {
            DatasetSpec::Separable { classes, size, .. } | DatasetSpec::Gratings { classes, size, .. } => {
                ([3, size, size], classes)
            }
            DatasetSpec::Cifar10 => ([3, 32, 32], 10),
            DatasetSpec::Cifar100 => ([3, 32, 32], 100),
        }
    }

    fn template(&self, fam: &FamilyEntry, map: &BitwidthMap, m: f64) -> ArchSpec {
        let (input, classes) = self.input_and_classes();
        let mut spec = ArchSpec::new(fam.family.clone(), m, map.clone()).with_input(input, classes);
        spec.imagenet_style = fam.imagenet_style;
        spec.activation_bits = fam.activation_bits;
        spec
    }

    pub fn augmentation(&self) -> &'static str {
        if self.train.augment {
            "crop4+flip"
        } else {
            "none"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletMember {
    High,
    Low,
    Grown,
}

impl TripletMember {
    pub fn name(self) -> &'static str {
        match self {
            TripletMember::High => "high",
            TripletMember::Low => "low",
            TripletMember::Grown => "grown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunRole {
    Sweep { target_index: usize },
    Decomposition { member: TripletMember, multiplier: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Failed { error: String },
}

/// One training run, persisted as `records/<run_id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub version: u32,
    pub run_id: String,
    pub experiment: String,
    pub family: String,
    pub bits: String,
    pub arch: ArchSpec,
    pub arch_id: String,
    pub width_multiplier: f64,
    pub c_size_bits: u64,
    pub target_bits: Option<u64>,
    pub size_rel_error: Option<f64>,
    pub seed: u64,
    pub dataset: String,
    pub augmentation: String,
    pub train: TrainConfig,
    pub role: RunRole,
    pub status: RunStatus,
    pub final_acc: Option<f64>,
    pub best_acc: Option<f64>,
    pub val_trace: Vec<f64>,
    /// Layer name to tracked `Var(mean|w|)`.
    #[serde(default)]
    pub variance: BTreeMap<String, f64>,
}

impl ExperimentRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Loads a record and checks its stored size against a recomputation.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rec: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if rec.is_completed() {
            let size = model_size(&rec.arch)?.total_bits;
            if size != rec.c_size_bits {
                return Err(Error::InvalidArgument(format!(
                    "{}: stored C_size {} but architecture gives {size}",
                    path.display(),
                    rec.c_size_bits
                )));
            }
        }
        Ok(rec)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.json", self.run_id));
        let tmp = dir.join(format!(".{}.json.tmp", self.run_id));
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Trains one model; the seed drives both initialisation and the data order.
#[allow(clippy::too_many_arguments)]
pub fn train_once(
    arch: &ArchSpec,
    calib: &CalibTable,
    config: &TrainConfig,
    seed: u64,
    train: &Dataset,
    val: &Dataset,
    track: Option<&LayerFilter>,
    best_path: Option<&Path>,
) -> Result<(TrainReport, BTreeMap<String, f64>)> {
    let net = build(arch)?;
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(1);
    let model = Model::from_network(&net, calib, &mut init)?;
    let config = TrainConfig { seed, ..config.clone() };
    let mut trainer = Trainer::new(model, config, train.len())?;
    let mut tracker = track.map(|f| VarianceTracker::new(f.clone()));
    let report = match tracker.as_mut() {
        Some(t) => trainer.run(train, val, &mut [t as &mut dyn TrainHook], best_path)?,
        None => trainer.run(train, val, &mut [], best_path)?,
    };
    let variance =
        tracker.map(|t| t.layers.iter().map(|(k, v)| (k.clone(), v.variance())).collect()).unwrap_or_default();
    Ok((report, variance))
}

#[derive(Debug, Clone)]
struct PlannedRun {
    run_id: String,
    family: String,
    bits: String,
    arch: std::result::Result<ArchSpec, String>,
    target_bits: Option<u64>,
    size_rel_error: Option<f64>,
    seed: u64,
    role: RunRole,
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Every run the config implies, in a stable order.
fn plan(config: &ExperimentConfig) -> Result<Vec<PlannedRun>> {
    let mut runs = Vec::new();
    let seeds: Vec<u64> = (0..config.repeats as u64).map(|r| config.seed + r).collect();
    for fam in &config.families {
        let fam_id = fam.family.id();
        let targets: Vec<(u64, Option<(f64, &BitwidthMap)>)> = match &config.targets {
            TargetSizes::Bits { bits } => bits.iter().map(|&b| (b, None)).collect(),
            TargetSizes::Match { reference, multipliers } => multipliers
                .iter()
                .map(|&m| Ok((model_size(&config.template(fam, reference, m))?.total_bits, Some((m, reference)))))
                .collect::<Result<_>>()?,
        };
        for (ti, &(target, reference)) in targets.iter().enumerate() {
            for map in &config.bitwidths {
                let template = config.template(fam, map, 1.0);
                let aligned = match reference {
                    // The reference map keeps its nominal multiplier.
                    Some((m, r)) if r == map => Ok((template.with_multiplier(m), 0.0)),
                    _ => align_width(&template, target, config.tolerance).map_err(|e| e.to_string()).and_then(|a| {
                        if a.within(config.tolerance) {
                            Ok((template.with_multiplier(a.width_multiplier), a.rel_error))
                        } else {
                            Err(format!(
                                "alignment to {target} bits reached only {} bits ({:.3}% off)",
                                a.size_bits,
                                100.0 * a.rel_error
                            ))
                        }
                    }),
                };
                for &seed in &seeds {
                    runs.push(PlannedRun {
                        run_id: sanitize(&format!("{fam_id}-{}-t{ti}-s{seed}", map.label())),
                        family: fam_id.clone(),
                        bits: map.label(),
                        arch: aligned.clone().map(|a| a.0),
                        target_bits: Some(target),
                        size_rel_error: aligned.as_ref().ok().map(|a| a.1),
                        seed,
                        role: RunRole::Sweep { target_index: ti },
                    });
                }
            }
        }
        if let Some(dc) = &config.decomposition {
            for &m in &dc.multipliers {
                let high = config.template(fam, &dc.high, m);
                let low = config.template(fam, &dc.low, m);
                let grown: std::result::Result<(ArchSpec, Option<u64>, Option<f64>), String> = match dc.grow_factor {
                    Some(f) => Ok((low.with_multiplier(m * f), None, None)),
                    None => model_size(&high)
                        .and_then(|s| align_width(&low, s.total_bits, config.tolerance).map(|a| (s.total_bits, a)))
                        .map_err(|e| e.to_string())
                        .map(|(t, a)| (low.with_multiplier(a.width_multiplier), Some(t), Some(a.rel_error))),
                };
                let members = [
                    (TripletMember::High, Ok((high, None, None))),
                    (TripletMember::Low, Ok((low, None, None))),
                    (TripletMember::Grown, grown),
                ];
                for (member, arch) in members {
                    let bits = match member {
                        TripletMember::High => dc.high.label(),
                        _ => dc.low.label(),
                    };
                    for &seed in &seeds {
                        runs.push(PlannedRun {
                            run_id: sanitize(&format!("{fam_id}-dec-m{m}-{}-{bits}-s{seed}", member.name())),
                            family: fam_id.clone(),
                            bits: bits.clone(),
                            arch: arch.clone().map(|a| a.0),
                            target_bits: arch.as_ref().ok().and_then(|a| a.1),
                            size_rel_error: arch.as_ref().ok().and_then(|a| a.2),
                            seed,
                            role: RunRole::Decomposition { member, multiplier: m },
                        });
                    }
                }
            }
        }
    }
    Ok(runs)
}

fn execute(
    config: &ExperimentConfig,
    run: &PlannedRun,
    calib: &CalibTable,
    data: &(Dataset, Dataset),
) -> ExperimentRecord {
    let base = |arch: ArchSpec, c_size: u64, status, report: Option<&TrainReport>, variance| ExperimentRecord {
        version: RECORD_VERSION,
        run_id: run.run_id.clone(),
        experiment: config.name.clone(),
        family: run.family.clone(),
        bits: run.bits.clone(),
        arch_id: arch.id(),
        width_multiplier: arch.width_multiplier,
        arch,
        c_size_bits: c_size,
        target_bits: run.target_bits,
        size_rel_error: run.size_rel_error,
        seed: run.seed,
        dataset: config.dataset.name(),
        augmentation: config.augmentation().into(),
        train: TrainConfig { seed: run.seed, ..config.train.clone() },
        role: run.role.clone(),
        status,
        final_acc: report.map(|r| r.final_val_acc),
        best_acc: report.map(|r| r.best_val_acc),
        val_trace: report.map(TrainReport::val_trace).unwrap_or_default(),
        variance,
    };
    let arch = match &run.arch {
        Ok(a) => a.clone(),
        Err(e) => {
            let template = config.template(&config.families[0], &BitwidthMap::full_precision(), 0.0);
            return base(template, 0, RunStatus::Failed { error: e.clone() }, None, BTreeMap::new());
        }
    };
    let size = match model_size(&arch) {
        Ok(s) => s.total_bits,
        Err(e) => return base(arch, 0, RunStatus::Failed { error: e.to_string() }, None, BTreeMap::new()),
    };
    log::info!("run {} ({}, {} bits)", run.run_id, arch.id(), size);
    match train_once(&arch, calib, &config.train, run.seed, &data.0, &data.1, config.track_variance.as_ref(), None) {
        Ok((report, variance)) => base(arch, size, RunStatus::Completed, Some(&report), variance),
        Err(e) => {
            log::warn!("run {} failed: {e}", run.run_id);
            base(arch, size, RunStatus::Failed { error: e.to_string() }, None, BTreeMap::new())
        }
    }
}

pub fn records_dir(out: &Path) -> PathBuf {
    out.join("records")
}

/// Runs (or resumes) every run of `config`, writing one JSON record per run
/// under `out/records` and the reports under `out`. Completed records already
/// on disk are reused; failed ones are retried.
pub fn run_sweep(config: &ExperimentConfig, out: &Path, workers: usize) -> Result<Vec<ExperimentRecord>> {
    let calib = config.calib_table()?;
    config.validate(&calib)?;
    let runs = plan(config)?;
    let dir = records_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(out.join("config.json"), config.to_json()).map_err(|e| Error::io(out.join("config.json"), e))?;
    let pending: Vec<&PlannedRun> = runs
        .iter()
        .filter(|r| {
            !ExperimentRecord::load(&dir.join(format!("{}.json", r.run_id))).is_ok_and(|rec| rec.is_completed())
        })
        .collect();
    log::info!("{} runs planned, {} to execute", runs.len(), pending.len());
    if !pending.is_empty() {
        let data = config.dataset.load()?;
        let run_one = |run: &&PlannedRun| execute(config, run, &calib, &data).save(&dir).map(|_| ());
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
            pool.install(|| crate::par_map(&pending, run_one)).into_iter().collect::<Result<Vec<()>>>()?;
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = workers;
            pending.iter().map(run_one).collect::<Result<Vec<()>>>()?;
        }
    }
    let records = runs
        .iter()
        .map(|r| ExperimentRecord::load(&dir.join(format!("{}.json", r.run_id))))
        .collect::<Result<Vec<_>>>()?;
    write_reports(config, &records, out)?;
    Ok(records)
}

/// Loads every `*.json` record in `dir`, sorted by run id.
pub fn load_records(dir: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| ExperimentRecord::load(p)).collect()
}

/// Writes `pareto.csv`, `pareto.svg` and, when configured, `decomposition.csv`.
pub fn write_reports(config: &ExperimentConfig, records: &[ExperimentRecord], out: &Path) -> Result<()> {
    let sweep: Vec<ExperimentRecord> =
        records.iter().filter(|r| matches!(r.role, RunRole::Sweep { .. })).cloned().collect();
    let rows = pareto_rows(&sweep);
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("pareto.csv", pareto_csv(&rows))?;
    write("pareto.svg", pareto_svg(&rows))?;
    if config.decomposition.is_some() {
        write("decomposition.csv", decomposition_report(config, records)?.to_csv())?;
    }
    Ok(())
}

/// One Pareto point: runs sharing family, bitwidth map and size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub family: String,
    pub bits: String,
    pub m: f64,
    #[serde(rename = "C_size")]
    pub c_size: u64,
    pub acc_mean: f64,
    pub acc_std: f64,
}

pub const PARETO_HEADER: &str = "family,bits,m,C_size,acc_mean,acc_std";

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

/// Groups completed records; failed runs are left out.
pub fn pareto_rows(records: &[ExperimentRecord]) -> Vec<ParetoRow> {
    let mut groups: BTreeMap<(String, String, u64, u64), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_completed()) {
        if let Some(acc) = r.final_acc {
            groups
                .entry((r.family.clone(), r.bits.clone(), r.c_size_bits, r.width_multiplier.to_bits()))
                .or_default()
                .push(acc);
        }
    }
    groups
        .into_iter()
        .map(|((family, bits, c_size, m), accs)| {
            let (acc_mean, acc_std) = mean_std(&accs);
            ParetoRow { family, bits, m: f64::from_bits(m), c_size, acc_mean, acc_std }
        })
        .collect()
}

/// Floats use the shortest representation that parses back exactly.
pub fn pareto_csv(rows: &[ParetoRow]) -> String {
    if rows.is_empty() {
        return format!("{PARETO_HEADER}\n");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
}

pub fn parse_pareto_csv(text: &str) -> Result<Vec<ParetoRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != PARETO_HEADER {
        return Err(Error::Csv(format!("unexpected header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Csv(e.to_string()))).collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return vec![lo];
    }
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

/// Accuracy against size (log axis), one colour per bitwidth map, with
/// one-standard-deviation error bars.
pub fn pareto_svg(rows: &[ParetoRow]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 460.0;
    const L: f64 = 70.0;
    const R: f64 = 160.0;
    const T: f64 = 30.0;
    const B: f64 = 55.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    if rows.is_empty() {
        let _ =
            writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no completed runs</text>", W / 2.0, H / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.c_size.max(1) as f64).log10()).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (mut y0, mut y1) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.acc_mean - r.acc_std), b.max(r.acc_mean + r.acc_std))
    });
    let pad_x = ((x1 - x0) * 0.08).max(0.05);
    let pad_y = ((y1 - y0) * 0.08).max(1.0);
    (x0, x1, y0, y1) = (x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y);
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let _ = writeln!(
        s,
        "<line x1=\"{L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{}\" stroke=\"black\"/>",
        H - B,
        W - R,
        H - B,
        H - B
    );
    for t in nice_ticks(x0, x1, 5) {
        let x = px(t);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"black\"/><text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{:.3e}</text>",
            H - B,
            H - B + 5.0,
            H - B + 18.0,
            10f64.powf(t)
        );
    }
    for t in nice_ticks(y0, y1, 6) {
        let y = py(t);
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{L}\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{t}</text>",
            L - 5.0,
            L - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">model size C_size (bits, log scale)</text>\n<text transform=\"translate(18 {}) rotate(-90)\" text-anchor=\"middle\">accuracy (%)</text>",
        (L + W - R) / 2.0,
        H - 12.0,
        (T + H - B) / 2.0
    );
    let mut labels: Vec<(&str, &str)> = rows.iter().map(|r| (r.family.as_str(), r.bits.as_str())).collect();
    labels.sort();
    labels.dedup();
    for (i, &(family, bits)) in labels.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<(f64, &ParetoRow)> =
            rows.iter().zip(&xs).filter(|(r, _)| r.family == family && r.bits == bits).map(|(r, &x)| (x, r)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|(x, r)| format!("{:.1},{:.1}", px(*x), py(r.acc_mean))).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-opacity=\"0.5\"/>",
            path.join(" ")
        );
        for (x, r) in &pts {
            let (cx, cy) = (px(*x), py(r.acc_mean));
            let _ = writeln!(
                s,
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"{colour}\"/><circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"4\" fill=\"{colour}\"><title>{family} {bits} m={} size={} acc={:.2}±{:.2}</title></circle>",
                py(r.acc_mean - r.acc_std),
                py(r.acc_mean + r.acc_std),
                r.m,
                r.c_size,
                r.acc_mean,
                r.acc_std
            );
        }
        let ly = T + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<circle cx=\"{}\" cy=\"{ly}\" r=\"4\" fill=\"{colour}\"/><text x=\"{}\" y=\"{}\">{family} {bits}</text>",
            W - R + 15.0,
            W - R + 25.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// `(delta_q, delta_g, total)` in micro-percent.
pub type DeltaMicro = (i64, i64, i64);

/// Per-family decomposition at each multiplier plus the column average.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionTable {
    pub multipliers: Vec<f64>,
    /// Family and one entry per multiplier.
    pub rows: Vec<(String, Vec<DeltaMicro>)>,
}

fn fmt_micro(v: i64) -> String {
    let sign = if v < 0 { "-" } else { "" };
    format!("{sign}{}.{:06}", v.unsigned_abs() / 1_000_000, v.unsigned_abs() % 1_000_000)
}

impl DecompositionTable {
    /// Column averages of `(dq, dg, total)` for one family row.
    pub fn averages(cols: &[DeltaMicro]) -> (f64, f64, f64) {
        let n = cols.len() as f64;
        let sum = cols.iter().fold((0i64, 0i64, 0i64), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
        (from_micro_percent(sum.0) / n, from_micro_percent(sum.1) / n, from_micro_percent(sum.2) / n)
    }

    /// `family,metric,<m>x...,average`; per-multiplier cells are exact to 1e-6 percent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,metric");
        for m in &self.multipliers {
            let _ = write!(s, ",{m}x");
        }
        s.push_str(",average\n");
        for (family, cols) in &self.rows {
            let avg = Self::averages(cols);
            let avg = [avg.0, avg.1, avg.2];
            for (k, name) in ["delta_acc_q", "delta_acc_g", "delta_acc_total"].into_iter().enumerate() {
                let _ = write!(s, "{family},{name}");
                for c in cols {
                    let _ = write!(s, ",{}", fmt_micro([c.0, c.1, c.2][k]));
                }
                let _ = writeln!(s, ",{}", avg[k]);
            }
        }
        s
    }
}

/// Builds the decomposition table from the triplet records of `config`.
pub fn decomposition_report(config: &ExperimentConfig, records: &[ExperimentRecord]) -> Result<DecompositionTable> {
    let dc = config
        .decomposition
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("config has no decomposition section".into()))?;
    let dataset = config.dataset.name();
    let mut rows = Vec::new();
    for fam in &config.families {
        let fam_id = fam.family.id();
        let mut cols = Vec::new();
        for &m in &dc.multipliers {
            let run = |member: TripletMember| -> Result<AccRun> {
                let accs: Vec<f64> = records
                    .iter()
                    .filter(|r| {
                        r.is_completed()
                            && r.family == fam_id
                            && r.role == RunRole::Decomposition { member, multiplier: m }
                    })
                    .filter_map(|r| r.final_acc)
                    .collect();
                if accs.is_empty() {
                    return Err(Error::MissingTripletMember(format!("{fam_id} at {m}x: {} run", member.name())));
                }
                Ok(AccRun { family: fam_id.clone(), dataset: dataset.clone(), accuracy: mean_std(&accs).0 })
            };
            let d =
                decompose_accuracy(&run(TripletMember::High)?, &run(TripletMember::Low)?, &run(TripletMember::Grown)?)?;
            cols.push((d.delta_q_micro(), d.delta_g_micro(), d.total_micro()));
        }
        rows.push((fam_id, cols));
    }
    Ok(DecompositionTable { multipliers: dc.multipliers.clone(), rows })
}
