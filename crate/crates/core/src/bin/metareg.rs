use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use metareg::geodesic::{propagate_landmarks, shoot, warp};
use metareg::grid::{GridDesc, LandmarkSet, MaskImage, ScalarImage};
use metareg::io::{self, Dtype, GridData, PairExtras, PairReport, RunReport};
use metareg::metrics::{DistKind, EnergyReport, MaskFrame, DEFAULT_GAMMA};
use metareg::operators::{DEFAULT_ALPHA, DEFAULT_POWER};
use metareg::optimize::{
    gradcheck, register, GradcheckCase, GradcheckConfig, Mode, RegistrationConfig,
    RegistrationResult,
};
use metareg::segment::{estimate_masks, joint_fit, union_mask, EstimatorKind, JointConfig, MaskEstimator, PairData};
use metareg::synth::{make_pair, Shape, SynthSpec, TumorSpec};
use metareg::{par, Error};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "metareg", version, about = "Metamorphic geodesic-shooting image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic pairs with known deformation, masks and landmarks.
    Synth {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        amplitude: Option<f64>,
        /// Insert a tumor-like intensity change into each target.
        #[arg(long)]
        tumor: bool,
        #[arg(long)]
        tumor_radius: Option<f64>,
        #[arg(long)]
        shape: Option<Shape>,
    },
    /// Register one pair, or every pair under --data.
    Register {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        inputs: PairArgs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Estimate source/target masks for one pair.
    Segment {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        inputs: PairArgs,
        /// Deformed image from a previous registration.
        #[arg(long)]
        context: Option<PathBuf>,
    },
    /// Alternate mask estimation and registration over a dataset.
    Joint {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        q: Option<usize>,
    },
    /// Shoot an initial velocity and write the resulting map.
    Shoot {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        v0: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        landmarks: Option<PathBuf>,
    },
    /// Build a report from a registration output directory.
    Evaluate {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        inputs: PairArgs,
        #[arg(long)]
        result: PathBuf,
    },
    /// Compare the adjoint gradient against finite differences.
    Gradcheck {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
    },
}

#[derive(Args, Clone, Default)]
struct Shared {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    power: Option<u32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    dist: Option<DistKind>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    dist_weight: Option<f64>,
    #[arg(long)]
    mask_frame: Option<MaskFrame>,
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    dtype: Option<Dtype>,
    /// Also write 8-bit PGM previews (lossy, diagnostic only).
    #[arg(long)]
    export_pgm: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct PairArgs {
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    mask_source: Option<PathBuf>,
    #[arg(long)]
    mask_target: Option<PathBuf>,
    #[arg(long)]
    landmarks_source: Option<PathBuf>,
    #[arg(long)]
    landmarks_target: Option<PathBuf>,
}

/// Effective settings after merging defaults, --config and flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    alpha: f64,
    power: u32,
    steps: usize,
    gamma: f64,
    dist: DistKind,
    mode: Mode,
    seed: u64,
    max_iters: usize,
    dist_weight: Option<f64>,
    mask_frame: MaskFrame,
    estimator: EstimatorKind,
    jobs: usize,
    dtype: Dtype,
    export_pgm: bool,
    q: usize,
    count: usize,
    size: usize,
    dim: usize,
    amplitude: f64,
    tumor: bool,
    tumor_radius: f64,
    shape: Shape,
    seeds: Vec<u64>,
    samples: usize,
    h: f64,
    tol: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let reg = RegistrationConfig::default();
        let gc = GradcheckConfig::default();
        Settings {
            alpha: DEFAULT_ALPHA,
            power: DEFAULT_POWER,
            steps: reg.steps,
            gamma: DEFAULT_GAMMA,
            dist: reg.dist,
            mode: reg.mode,
            seed: 0,
            max_iters: reg.max_iters,
            dist_weight: None,
            mask_frame: reg.mask_frame,
            estimator: EstimatorKind::Residual,
            jobs: 1,
            dtype: Dtype::F64,
            export_pgm: false,
            q: JointConfig::default().q,
            count: 1,
            size: 64,
            dim: 2,
            amplitude: 1.0,
            tumor: false,
            tumor_radius: TumorSpec::default().radius,
            shape: Shape::Blobs,
            seeds: vec![0, 1, 2],
            samples: gc.samples,
            h: gc.h,
            tol: 1e-3,
        }
    }
}

impl Settings {
    fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            mode: self.mode,
            dist: self.dist,
            alpha: self.alpha,
            power: self.power,
            steps: self.steps,
            max_iters: self.max_iters,
            dist_weight: self.dist_weight,
            mask_frame: self.mask_frame,
            ..RegistrationConfig::default()
        }
    }

    fn estimator(&self) -> MaskEstimator {
        MaskEstimator {
            kind: self.estimator,
            ..MaskEstimator::default()
        }
    }
}

enum Failure {
    Input(String),
    Numerical(String),
    NotConverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn bad(msg: impl Into<String>) -> Failure {
    Failure::Input(msg.into())
}

fn insert<T: Serialize>(map: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        map.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

fn as_object(s: &Settings) -> Map<String, Value> {
    match serde_json::to_value(s) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("settings serialize to an object"),
    }
}

fn settings(shared: &Shared, extra: Map<String, Value>) -> CliResult<Settings> {
    settings_over(as_object(&Settings::default()), shared, extra)
}

/// Layers --config, then flags, then command-specific flags over `base`.
fn settings_over(mut merged: Map<String, Value>, shared: &Shared, extra: Map<String, Value>) -> CliResult<Settings> {
    if let Some(path) = &shared.config {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => merged.extend(m),
            Ok(_) => return Err(bad(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => return Err(bad(format!("{}: {e}", path.display()))),
        }
    }
    let mut flags = Map::new();
    insert(&mut flags, "alpha", shared.alpha);
    insert(&mut flags, "power", shared.power);
    insert(&mut flags, "steps", shared.steps);
    insert(&mut flags, "gamma", shared.gamma);
    insert(&mut flags, "dist", shared.dist);
    insert(&mut flags, "mode", shared.mode);
    insert(&mut flags, "seed", shared.seed);
    insert(&mut flags, "max_iters", shared.max_iters);
    insert(&mut flags, "dist_weight", shared.dist_weight);
    insert(&mut flags, "mask_frame", shared.mask_frame);
    insert(&mut flags, "estimator", shared.estimator);
    insert(&mut flags, "jobs", shared.jobs);
    insert(&mut flags, "dtype", shared.dtype);
    if shared.export_pgm {
        flags.insert("export_pgm".into(), Value::Bool(true));
    }
    merged.extend(flags);
    merged.extend(extra);
    let s: Settings = serde_json::from_value(Value::Object(merged)).map_err(|e| bad(format!("config: {e}")))?;
    s.registration().validate()?;
    Ok(s)
}

fn out_dir(shared: &Shared) -> CliResult<PathBuf> {
    let dir = shared.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| bad(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn save(dir: &Path, name: &str, obj: GridData, s: &Settings) -> CliResult<()> {
    if s.export_pgm {
        if let GridData::Scalar(img) = &obj {
            io::export_pgm(dir.join(format!("{name}.pgm")), img)?;
        }
    }
    io::save_grid(dir.join(format!("{name}.grid")), &obj, s.dtype)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| bad(format!("{}: {e}", path.display())))
}

/// Everything known about one pair on disk.
struct PairInputs {
    name: String,
    source: ScalarImage,
    target: ScalarImage,
    truth: Option<(MaskImage, MaskImage)>,
    landmarks: Option<(LandmarkSet, LandmarkSet)>,
}

fn optional(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

impl PairInputs {
    fn from_args(args: &PairArgs) -> CliResult<Self> {
        let source = args.source.as_ref().ok_or_else(|| bad("--source is required"))?;
        let target = args.target.as_ref().ok_or_else(|| bad("--target is required"))?;
        PairInputs::load(
            "pair".into(),
            source,
            target,
            (args.mask_source.clone(), args.mask_target.clone()),
            (args.landmarks_source.clone(), args.landmarks_target.clone()),
        )
    }

    fn from_dir(dir: &Path) -> CliResult<Self> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        PairInputs::load(
            name,
            &dir.join("source.grid"),
            &dir.join("target.grid"),
            (optional(dir.join("mask_source.grid")), optional(dir.join("mask_target.grid"))),
            (
                optional(dir.join("landmarks_source.csv")),
                optional(dir.join("landmarks_target.csv")),
            ),
        )
    }

    fn load(
        name: String,
        source: &Path,
        target: &Path,
        masks: (Option<PathBuf>, Option<PathBuf>),
        landmarks: (Option<PathBuf>, Option<PathBuf>),
    ) -> CliResult<Self> {
        let source = io::load_scalar(source)?;
        let target = io::load_scalar(target)?;
        source.grid().ensure_same(target.grid())?;
        let grid = source.grid().clone();
        let truth = match masks {
            (None, None) => None,
            (a, b) => {
                let load = |p: Option<PathBuf>| -> CliResult<MaskImage> {
                    match p {
                        Some(p) => Ok(io::load_mask(p)?),
                        None => Ok(MaskImage::zeros(&grid)),
                    }
                };
                Some((load(a)?, load(b)?))
            }
        };
        let landmarks = match landmarks {
            (Some(a), Some(b)) => {
                let a = io::load_landmarks(a, Some(grid.dim()))?;
                let b = io::load_landmarks(b, Some(grid.dim()))?;
                if a.len() != b.len() {
                    return Err(bad("landmark files differ in length"));
                }
                Some((a, b))
            }
            (None, None) => None,
            _ => return Err(bad("landmarks need both source and target files")),
        };
        Ok(PairInputs {
            name,
            source,
            target,
            truth,
            landmarks,
        })
    }

    fn pair_data(&self) -> PairData {
        PairData {
            name: self.name.clone(),
            source: self.source.clone(),
            target: self.target.clone(),
            truth_source: self.truth.as_ref().map(|t| t.0.clone()),
            truth_target: self.truth.as_ref().map(|t| t.1.clone()),
            landmarks: self.landmarks.clone(),
        }
    }
}

fn pair_dirs(data: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(data).map_err(|e| bad(format!("{}: {e}", data.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("source.grid").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(bad(format!("no pair directories under {}", data.display())));
    }
    Ok(dirs)
}

struct PairRun {
    result: RegistrationResult,
    masks: Option<(MaskImage, MaskImage)>,
}

fn run_registration(s: &Settings, pair: &PairInputs, explicit_masks: bool) -> CliResult<PairRun> {
    let cfg = s.registration();
    let grid = pair.source.grid();
    let masks = match s.mode {
        Mode::Plain => None,
        Mode::Metamorph if explicit_masks => pair.truth.clone(),
        Mode::Metamorph => Some(estimate_masks(&s.estimator(), &pair.pair_data(), None)?),
    };
    let union = match &masks {
        Some((a, b)) => union_mask(a, b)?,
        None => MaskImage::zeros(grid),
    };
    let result = register(&pair.source, &pair.target, &union, &cfg)?;
    Ok(PairRun { result, masks })
}

#[derive(Serialize, Deserialize)]
struct ResultFile {
    config: Settings,
    iterations: usize,
    converged: bool,
    energy: EnergyReport,
    trace: Vec<f64>,
}

fn write_run(dir: &Path, s: &Settings, run: &PairRun) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| bad(format!("{}: {e}", dir.display())))?;
    let r = &run.result;
    save(dir, "v0", r.v0.clone().into(), s)?;
    save(dir, "deformed", r.deformed.clone().into(), s)?;
    save(dir, "displacement", r.path.psi().displacement().clone().into(), s)?;
    if let Some((a, b)) = &run.masks {
        save(dir, "mask_source", a.clone().into(), s)?;
        save(dir, "mask_target", b.clone().into(), s)?;
    }
    write_json(
        &dir.join("result.json"),
        &ResultFile {
            config: s.clone(),
            iterations: r.iterations,
            converged: r.converged,
            energy: r.report,
            trace: r.trace.clone(),
        },
    )
}

fn report_pair(s: &Settings, pair: &PairInputs, result: &RegistrationResult, est: Option<&(MaskImage, MaskImage)>) -> CliResult<PairReport> {
    let est_union = est.map(|(a, b)| union_mask(a, b)).transpose()?;
    let truth_union = pair.truth.as_ref().map(|(a, b)| union_mask(a, b)).transpose()?;
    let extras = PairExtras {
        landmarks: pair.landmarks.as_ref().map(|(a, b)| (a, b)),
        labels: est_union.as_ref().zip(truth_union.as_ref()),
    };
    let cfg = s.registration();
    Ok(io::pair_report(
        &pair.name,
        &pair.source,
        &pair.target,
        result,
        &cfg.rmi,
        cfg.shooting()?,
        extras,
    )?)
}

fn finish_report(s: &Settings, dir: &Path, pairs: Vec<PairReport>) -> CliResult<RunReport> {
    let config = serde_json::to_value(s).map_err(Error::from)?;
    let report = RunReport::new(config, pairs)?;
    io::save_report(dir.join("report.json"), &report)?;
    Ok(report)
}

fn not_converged(names: &[&str]) -> CliResult<()> {
    if names.is_empty() {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!("not converged: {}", names.join(", "))))
    }
}

fn cmd_synth(shared: &Shared, extra: Map<String, Value>) -> CliResult<()> {
    let s = settings(shared, extra)?;
    let out = out_dir(shared)?;
    let grid = GridDesc::with_sizes(&vec![s.size; s.dim])?;
    for k in 0..s.count {
        let spec = SynthSpec {
            shape: s.shape,
            v0_amplitude: s.amplitude,
            tumor: s.tumor.then(|| TumorSpec {
                radius: s.tumor_radius,
                ..TumorSpec::default()
            }),
            alpha: s.alpha,
            power: s.power,
            steps: s.steps,
            ..SynthSpec::new(grid.clone(), s.seed + k as u64)
        };
        let p = make_pair(&spec)?;
        let dir = out.join(format!("pair_{k:03}"));
        fs::create_dir_all(&dir).map_err(|e| bad(format!("{}: {e}", dir.display())))?;
        save(&dir, "source", p.source.into(), &s)?;
        save(&dir, "target", p.target.into(), &s)?;
        save(&dir, "truth_v0", p.v0_true.into(), &s)?;
        if s.tumor {
            save(&dir, "mask_source", p.mask_source.into(), &s)?;
            save(&dir, "mask_target", p.mask_target.into(), &s)?;
        }
        io::save_landmarks(dir.join("landmarks_source.csv"), &p.landmarks_source)?;
        io::save_landmarks(dir.join("landmarks_target.csv"), &p.landmarks_target)?;
    }
    println!("wrote {} pair(s) to {}", s.count, out.display());
    Ok(())
}

fn cmd_register(shared: &Shared, inputs: &PairArgs, data: Option<&Path>) -> CliResult<()> {
    let s = settings(shared, Map::new())?;
    let out = out_dir(shared)?;
    match data {
        None => {
            let pair = PairInputs::from_args(inputs)?;
            let explicit = inputs.mask_source.is_some() || inputs.mask_target.is_some();
            let run = run_registration(&s, &pair, explicit)?;
            write_run(&out, &s, &run)?;
            let r = &run.result;
            println!(
                "iterations {} converged {} total {:.6e} dist {:.6e} reg {:.6e}",
                r.iterations, r.converged, r.report.total, r.report.dist, r.report.reg
            );
            not_converged(if r.converged { &[] } else { &["pair"] })
        }
        Some(data) => {
            let pairs = pair_dirs(data)?
                .iter()
                .map(|d| PairInputs::from_dir(d))
                .collect::<CliResult<Vec<_>>>()?;
            // dataset masks are ground truth; metamorph runs estimate their own
            let runs = par::with_threads(s.jobs, || {
                par::map_items(&pairs, |p| run_registration(&s, p, s.estimator == EstimatorKind::Oracle))
            });
            let mut reports = Vec::new();
            let mut stalled = Vec::new();
            for (pair, run) in pairs.iter().zip(runs) {
                let run = run?;
                write_run(&out.join(&pair.name), &s, &run)?;
                reports.push(report_pair(&s, pair, &run.result, run.masks.as_ref())?);
                if !run.result.converged {
                    stalled.push(pair.name.as_str());
                }
            }
            let report = finish_report(&s, &out, reports)?;
            print_aggregate(&report);
            not_converged(&stalled)
        }
    }
}

fn print_aggregate(report: &RunReport) {
    for (key, v) in &report.aggregate {
        println!("{key:>20}  mean {:.6e}  median {:.6e}", v.mean, v.median);
    }
}

fn cmd_segment(shared: &Shared, inputs: &PairArgs, context: Option<&Path>) -> CliResult<()> {
    let s = settings(shared, Map::new())?;
    let out = out_dir(shared)?;
    let pair = PairInputs::from_args(inputs)?;
    let context = context.map(io::load_scalar).transpose()?;
    let (a, b) = estimate_masks(&s.estimator(), &pair.pair_data(), context.as_ref())?;
    println!("mask_source {} voxels, mask_target {} voxels", a.count(0.5), b.count(0.5));
    save(&out, "mask_source", a.into(), &s)?;
    save(&out, "mask_target", b.into(), &s)
}

fn cmd_joint(shared: &Shared, data: &Path, extra: Map<String, Value>) -> CliResult<()> {
    let s = settings(shared, extra)?;
    let out = out_dir(shared)?;
    let pairs = pair_dirs(data)?
        .iter()
        .map(|d| PairInputs::from_dir(d))
        .collect::<CliResult<Vec<_>>>()?;
    let dataset: Vec<PairData> = pairs.iter().map(PairInputs::pair_data).collect();
    let cfg = JointConfig {
        q: s.q,
        gamma: s.gamma,
        registration: s.registration(),
        augment: false,
    };
    let joint = par::with_threads(s.jobs, || joint_fit(&dataset, &s.estimator(), &cfg))?;
    write_json(&out.join("history.json"), &joint.history)?;
    let mut reports = Vec::new();
    let mut stalled = Vec::new();
    for (pair, outcome) in pairs.iter().zip(joint.pairs) {
        let result = match outcome.result {
            Some(r) => r,
            None => {
                return Err(Failure::Numerical(format!(
                    "{}: {}",
                    pair.name,
                    outcome.error.unwrap_or_default()
                )))
            }
        };
        let run = PairRun {
            result,
            masks: Some((outcome.mask_source, outcome.mask_target)),
        };
        write_run(&out.join(&pair.name), &s, &run)?;
        reports.push(report_pair(&s, pair, &run.result, run.masks.as_ref())?);
        if !run.result.converged {
            stalled.push(pair.name.as_str());
        }
    }
    for (i, h) in joint.history.iter().enumerate() {
        println!("outer {i}: total {:.6e} dist {:.6e} reg {:.6e} seg {:.4}", h.total, h.dist, h.reg, h.seg);
    }
    let report = finish_report(&s, &out, reports)?;
    print_aggregate(&report);
    not_converged(&stalled)
}

fn cmd_shoot(shared: &Shared, v0: &Path, source: Option<&Path>, landmarks: Option<&Path>) -> CliResult<()> {
    let s = settings(shared, Map::new())?;
    let out = out_dir(shared)?;
    let v0 = io::load_vector(v0)?;
    let cfg = s.registration();
    let kernel = cfg.kernel(v0.grid())?;
    let path = shoot(&kernel, &v0, cfg.shooting()?)?;
    save(&out, "displacement", path.psi().displacement().clone().into(), &s)?;
    if let Some(src) = source {
        let img = io::load_scalar(src)?;
        save(&out, "warped", warp(&img, path.psi())?.into(), &s)?;
    }
    if let Some(lm) = landmarks {
        let set = io::load_landmarks(lm, Some(v0.grid().dim()))?;
        let moved = propagate_landmarks(&set, path.velocities(), cfg.shooting()?)?;
        io::save_landmarks(out.join("landmarks_propagated.csv"), &moved)?;
    }
    let energies = path.metric_energies(&kernel)?;
    write_json(&out.join("energies.json"), &energies)?;
    println!("energy t=0 {:.6e}  t=1 {:.6e}", energies[0], energies[energies.len() - 1]);
    Ok(())
}

fn cmd_evaluate(shared: &Shared, inputs: &PairArgs, result_dir: &Path) -> CliResult<()> {
    let file = result_dir.join("result.json");
    let text = fs::read_to_string(&file).map_err(|e| bad(format!("{}: {e}", file.display())))?;
    let saved: ResultFile = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", file.display())))?;
    let s = settings_over(as_object(&saved.config), shared, Map::new())?;
    let out = shared.out.clone().unwrap_or_else(|| result_dir.to_path_buf());
    fs::create_dir_all(&out).map_err(|e| bad(format!("{}: {e}", out.display())))?;
    let pair = PairInputs::from_args(inputs)?;
    let v0 = io::load_vector(result_dir.join("v0.grid"))?;
    v0.grid().ensure_same(pair.source.grid())?;
    let cfg = s.registration();
    let kernel = cfg.kernel(v0.grid())?;
    let path = shoot(&kernel, &v0, cfg.shooting()?)?;
    let deformed = warp(&pair.source, path.psi())?;
    let result = RegistrationResult {
        v0,
        path,
        deformed,
        report: saved.energy,
        trace: saved.trace,
        iterations: saved.iterations,
        converged: saved.converged,
    };
    let masks = match (
        optional(result_dir.join("mask_source.grid")),
        optional(result_dir.join("mask_target.grid")),
    ) {
        (Some(a), Some(b)) => Some((io::load_mask(a)?, io::load_mask(b)?)),
        _ => None,
    };
    let pr = report_pair(&s, &pair, &result, masks.as_ref())?;
    let report = finish_report(&s, &out, vec![pr])?;
    print_aggregate(&report);
    Ok(())
}

fn cmd_gradcheck(shared: &Shared, extra: Map<String, Value>) -> CliResult<()> {
    let s = settings(shared, extra)?;
    let cfg = GradcheckConfig {
        samples: s.samples,
        h: s.h,
        ..GradcheckConfig::default()
    };
    let dists = match shared.dist {
        Some(d) => vec![d],
        None => vec![DistKind::Ssd, DistKind::Rmi],
    };
    let mut cases = Vec::new();
    for &dist in &dists {
        for masked in [false, true] {
            for &seed in &s.seeds {
                cases.push(GradcheckCase { dist, masked, seed });
            }
        }
    }
    let errors = par::with_threads(s.jobs, || par::map_items(&cases, |c| gradcheck(c, &cfg)));
    let mut worst: f64 = 0.0;
    for (c, e) in cases.iter().zip(errors) {
        let e = e?;
        println!("{:?} masked={} seed={} max_rel_error {e:.3e}", c.dist, c.masked, c.seed);
        worst = worst.max(e);
    }
    if worst <= s.tol {
        println!("gradcheck ok: {worst:.3e} <= {:.1e}", s.tol);
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradcheck failed: {worst:.3e} > {:.1e}", s.tol)))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            shared,
            count,
            size,
            dim,
            amplitude,
            tumor,
            tumor_radius,
            shape,
        } => {
            let mut extra = Map::new();
            insert(&mut extra, "count", count);
            insert(&mut extra, "size", size);
            insert(&mut extra, "dim", dim);
            insert(&mut extra, "amplitude", amplitude);
            insert(&mut extra, "tumor_radius", tumor_radius);
            insert(&mut extra, "shape", shape);
            if tumor {
                extra.insert("tumor".into(), Value::Bool(true));
            }
            cmd_synth(&shared, extra)
        }
        Command::Register { shared, inputs, data } => cmd_register(&shared, &inputs, data.as_deref()),
        Command::Segment { shared, inputs, context } => cmd_segment(&shared, &inputs, context.as_deref()),
        Command::Joint { shared, data, q } => {
            let mut extra = Map::new();
            insert(&mut extra, "q", q);
            cmd_joint(&shared, &data, extra)
        }
        Command::Shoot {
            shared,
            v0,
            source,
            landmarks,
        } => cmd_shoot(&shared, &v0, source.as_deref(), landmarks.as_deref()),
        Command::Evaluate { shared, inputs, result } => cmd_evaluate(&shared, &inputs, &result),
        Command::Gradcheck {
            shared,
            seeds,
            samples,
            h,
            tol,
        } => {
            let mut extra = Map::new();
            insert(&mut extra, "seeds", seeds);
            insert(&mut extra, "samples", samples);
            insert(&mut extra, "h", h);
            insert(&mut extra, "tol", tol);
            cmd_gradcheck(&shared, extra)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
    }
}
