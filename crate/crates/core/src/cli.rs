//! Subcommand front end. [`run`] returns the process exit code: 0 on success,
//! 1 on usage errors (bad flags, missing inputs, invalid configuration) and
//! 2 on data errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::biomarkers::{case_record, cohort_records, parse_records, records_to_csv, BiomarkerRecord};
use crate::classify::{auc_report_csv, subgroup_analysis, FeatureSet};
use crate::config::PipelineConfig;
use crate::diffeo::DeformationField;
use crate::error::Error;
use crate::io::{write_atomic, write_atomic_str};
use crate::nifti::{read_field, read_nifti, write_field, write_nifti, write_nifti_as, Datatype};
use crate::phantom::{generate_case, generate_cohort, CaseSummary, CohortSpec, PhantomSpec};
use crate::report::{pooled_curves, roc_points_csv, roc_svg, subgroup_stem};
use crate::rigid::{align_symmetry, apply_rigid, RigidTransform};
use crate::synth::{optimize_velocity, LossWeights, Term, TermBreakdown};
use crate::volume::{MaskClass, MaskVolume, ScalarVolume};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BRAINSHIFT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "brainshift", version, about = "Pseudo-healthy synthesis and deformation biomarkers for head CT")]
struct Cli {
    /// Pipeline configuration JSON; sections left out keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Seed override for phantom generation and cross-validation folds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic head phantom (or a biomarker table for a phantom cohort).
    Phantom {
        /// PhantomSpec JSON (CohortSpec JSON with --cohort).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, visible_alias = "out")]
        out_dir: PathBuf,
        /// Generate this many cohort cases and write `cohort.csv` instead of one phantom.
        #[arg(long)]
        cohort: Option<usize>,
    },
    /// Rigidly align a volume to its mid-sagittal plane.
    Align {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label image to carry through the same transform.
        #[arg(long, requires = "out_masks")]
        masks: Option<PathBuf>,
        #[arg(long, requires = "masks")]
        out_masks: Option<PathBuf>,
    },
    /// Optimize a velocity field that removes the hematoma and restores symmetry.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// LossWeights JSON overriding `synth.weights` of the configuration.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_image: PathBuf,
        /// Per-iteration loss trace CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Deformation biomarkers of one case as a one-row CSV.
    Biomarkers {
        /// Deformation field NIfTI.
        #[arg(long = "in")]
        input: PathBuf,
        /// Label image of the diseased scan.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "case")]
        id: String,
        /// Mark the case as surgically treated.
        #[arg(long)]
        surgery: bool,
    },
    /// Cross-validated surgery classification from a biomarker CSV.
    Classify {
        #[arg(long = "in")]
        input: PathBuf,
        /// AUC report CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// AUC report, ROC point tables and SVG plots per laterality subgroup.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(format!("invalid configuration: {msg}")),
            other => Failure::Data(other),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Parse `argv` (including the program name) and execute the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `brainshift --help` for usage.");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(path) => {
            require_input(path)?;
            PipelineConfig::load(path)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.classify.seed = seed;
    }
    if cli.dump_config {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::Usage("no subcommand given (expected one of align, synth, biomarkers, classify, phantom, report)".into()));
    };
    let pool = thread_pool()?;
    pool.install(|| dispatch(command, &cfg, cli.seed))
}

fn thread_pool() -> Outcome<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Failure::Data(Error::InvalidParameter(format!("thread pool: {e}"))))
}

fn dispatch(command: Command, cfg: &PipelineConfig, seed: Option<u64>) -> Outcome {
    match command {
        Command::Phantom { spec, out_dir, cohort } => phantom(spec.as_deref(), &out_dir, cohort, seed),
        Command::Align { input, out, masks, out_masks } => {
            align(cfg, &input, &out, masks.as_deref().zip(out_masks.as_deref()))
        }
        Command::Synth { input, masks, weights, out_field, out_image, report } => {
            synth(cfg, &input, &masks, weights.as_deref(), &out_field, &out_image, report.as_deref())
        }
        Command::Biomarkers { input, masks, out, id, surgery } => biomarkers(cfg, &input, &masks, &out, &id, surgery),
        Command::Classify { input, out } => classify(cfg, &input, &out),
        Command::Report { input, out } => report(cfg, &input, &out),
    }
}

fn require_input(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("input file {} does not exist", path.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    require_input(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    Ok(write_atomic_str(path, &text)?)
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(Error::io(dir, e)))
}

fn read_masks(path: &Path) -> Outcome<MaskVolume> {
    require_input(path)?;
    Ok(MaskVolume::from_labels(&read_nifti(path)?)?)
}

#[derive(Serialize)]
struct CaseFile<'a> {
    spec: &'a PhantomSpec,
    summary: CaseSummary,
}

fn phantom(spec: Option<&Path>, out_dir: &Path, cohort: Option<usize>, seed: Option<u64>) -> Outcome {
    create_dir(out_dir)?;
    if let Some(n) = cohort {
        let spec: CohortSpec = spec.map(read_json).transpose()?.unwrap_or_default();
        let cases = generate_cohort(n, seed.unwrap_or(0), &spec)?;
        let path = out_dir.join("cohort.csv");
        write_atomic(&path, &records_to_csv(&cohort_records(&cases)?)?)?;
        println!("wrote {} cohort records to {}", cases.len(), path.display());
        return Ok(());
    }
    let mut spec: PhantomSpec = spec.map(read_json).transpose()?.unwrap_or_default();
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let case = generate_case(&spec)?;
    let spacing = case.volume.spacing();
    write_nifti(&case.volume, out_dir.join("volume.nii"))?;
    write_nifti_as(&case.masks.to_labels(spacing)?, out_dir.join("labels.nii"), Datatype::Int16)?;
    write_field(case.ground_truth_field.displacement(), spacing, out_dir.join("gt_field.nii"))?;
    write_json(&out_dir.join("case.json"), &CaseFile { spec: &spec, summary: case.summary() })?;
    println!("wrote phantom ({:?}, {:?} hematoma) to {}", spec.dims, spec.side, out_dir.display());
    Ok(())
}

fn align(cfg: &PipelineConfig, input: &Path, out: &Path, masks: Option<(&Path, &Path)>) -> Outcome {
    require_input(input)?;
    let x = read_nifti(input)?;
    let result = align_symmetry(&x, &cfg.align, &cfg.metrics)?;
    write_nifti(&result.aligned, out)?;
    write_json(&out.with_extension("json"), &result.transform)?;
    if let Some((labels, out_labels)) = masks {
        let masks = read_masks(labels)?;
        let moved = rigid_masks(&masks, x.spacing(), &result.transform)?;
        write_nifti_as(&moved.to_labels(x.spacing())?, out_labels, Datatype::Int16)?;
    }
    let [p, y, r] = result.transform.angles().map(f64::to_degrees);
    let [tx, ty, tz] = result.transform.translation();
    println!("aligned: pitch {p:.3} yaw {y:.3} roll {r:.3} deg, t = ({tx:.3}, {ty:.3}, {tz:.3}) voxels, loss {:.6}", result.best_loss());
    Ok(())
}

fn rigid_masks(masks: &MaskVolume, spacing: [f64; 3], t: &RigidTransform) -> Outcome<MaskVolume> {
    let mut out = MaskVolume::zeros(masks.dims());
    for class in MaskClass::ALL {
        let channel = ScalarVolume::new(masks.dims(), spacing, masks.channel(class).to_vec())?;
        out.set_channel(class, apply_rigid(&channel, t)?.into_data())?;
    }
    Ok(out)
}

fn synth(
    cfg: &PipelineConfig,
    input: &Path,
    masks: &Path,
    weights: Option<&Path>,
    out_field: &Path,
    out_image: &Path,
    report: Option<&Path>,
) -> Outcome {
    require_input(input)?;
    let mut synth_cfg = cfg.synth.clone();
    if let Some(path) = weights {
        let w: LossWeights = read_json(path)?;
        w.validate()?;
        synth_cfg.weights = w;
    }
    let x = read_nifti(input)?;
    let masks = read_masks(masks)?;
    let result = optimize_velocity(&x, &masks, &synth_cfg, &cfg.metrics)?;
    write_field(result.deformation.displacement(), x.spacing(), out_field)?;
    write_nifti(&result.pseudo_healthy, out_image)?;
    if let Some(path) = report {
        write_atomic(path, &loss_trace_csv(&result.trace)?)?;
    }
    let best = &result.trace[result.best_iteration];
    match result.hematoma_reduction {
        Some(r) => println!("best loss {:.6} at iteration {}, hematoma reduction {r:.3}", best.total, result.best_iteration),
        None => println!("best loss {:.6} at iteration {}", best.total, result.best_iteration),
    }
    Ok(())
}

/// Columns iter, total, then every term in [`Term::ALL`] order.
pub fn loss_trace_csv(trace: &[TermBreakdown]) -> crate::error::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = ["iter", "total"].into_iter().chain(Term::ALL.iter().map(|t| t.name())).collect();
    w.write_record(&header)?;
    for (i, terms) in trace.iter().enumerate() {
        let row: Vec<String> = std::iter::once(i.to_string())
            .chain(std::iter::once(terms.total).chain(Term::ALL.iter().map(|&t| terms.get(t))).map(|v| format!("{v:.9e}")))
            .collect();
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv buffer: {e}")))
}

fn biomarkers(cfg: &PipelineConfig, input: &Path, masks: &Path, out: &Path, id: &str, surgery: bool) -> Outcome {
    require_input(input)?;
    let (field, spacing) = read_field(input)?;
    let masks = read_masks(masks)?;
    let field = DeformationField::from_displacement(field);
    let record = case_record(id, &masks, &field, spacing, surgery, cfg.classify.bilateral_threshold)?;
    write_atomic(out, &records_to_csv(std::slice::from_ref(&record))?)?;
    println!(
        "{id}: max shift {:.3} mm, mean {:.3} mm, hematoma {:.1} mm3, {}",
        record.max_shift_mm,
        record.mean_shift_mm,
        record.hematoma_volume_mm3,
        record.laterality.name()
    );
    Ok(())
}

fn load_records(path: &Path) -> Outcome<Vec<BiomarkerRecord>> {
    require_input(path)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_records(file)?)
}

fn classify(cfg: &PipelineConfig, input: &Path, out: &Path) -> Outcome {
    let records = load_records(input)?;
    let groups = subgroup_analysis(&records, &FeatureSet::standard(), &cfg.classify)?;
    write_atomic(out, &auc_report_csv(&groups)?)?;
    for (group, results) in &groups {
        for r in results {
            println!("{:<10} {:<14} mean AUC {:.3}", group.name(), r.name, r.mean_auc);
        }
    }
    Ok(())
}

fn report(cfg: &PipelineConfig, input: &Path, out: &Path) -> Outcome {
    let records = load_records(input)?;
    create_dir(out)?;
    let groups = subgroup_analysis(&records, &FeatureSet::standard(), &cfg.classify)?;
    write_atomic(&out.join("auc_report.csv"), &auc_report_csv(&groups)?)?;
    for (group, results) in &groups {
        let curves = pooled_curves(results)?;
        let stem = subgroup_stem(*group);
        write_atomic(&out.join(format!("{stem}.csv")), &roc_points_csv(&curves)?)?;
        let title = format!("Pooled out-of-fold ROC: {}", group.name());
        write_atomic_str(&out.join(format!("{stem}.svg")), &roc_svg(&title, &curves))?;
    }
    println!("wrote reports for {} subgroups to {}", groups.len(), out.display());
    Ok(())
}
