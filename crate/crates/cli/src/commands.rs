use std::fs::{self, File};
use std::io::{BufReader, BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use patchopt_core::config::{reference_results, PipelineConfig, ReferenceResults};
use patchopt_core::gradcheck::{self, LOSS_STEP};
use patchopt_core::lesion_stats::{lesion_stats, Connectivity, DatasetStats, LesionStats};
use patchopt_core::loss::EPS_SMOOTH;
use patchopt_core::patch_select::{
    literal_scale_interval, select_patch, target_edge, token_geometry, transfer_plan, PatchDecision, TransferPlan,
    UnitMode,
};
use patchopt_core::synth::{random_spec, write_fixture, PhantomSpec, RandomPhantom, Sidecar};
use patchopt_core::tokenizer::{embed, extract_patches, read_token_matrix, volume_from_labels, write_token_matrix, EmbeddingParams};
use patchopt_core::verify::{self, VerifyOptions};
use patchopt_core::vit::{self, checksum, Checksum, ViTConfig, ViTParams};
use patchopt_core::volume_io::{read_nifti_report, LabelVolume};

use crate::{
    Cli, Command, ForwardArgs, GradcheckArgs, GradcheckLossArgs, PlanArgs, SelectArgs, SelectionFlags, StatsArgs,
    SynthArgs, TokenizeArgs, VerifyArgs,
};

/// Largest encoder the finite-difference check will attempt.
const GRADCHECK_PARAM_LIMIT: usize = 200_000;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn invariant(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn emit<T: Serialize>(value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(format!("serializing report: {e}")))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(Failure::usage(format!("writing report: {e}"))),
        _ => Ok(()),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    PipelineConfig::from_json(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn preset(name: &str) -> Result<ViTConfig, Failure> {
    ViTConfig::preset(name).ok_or_else(|| Failure::usage(format!("unknown encoder preset {name:?} (expected tiny or base)")))
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("PATCHOPT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("PATCHOPT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::usage(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    let config = load_config(cli.config_file.as_deref())?;
    match cli.command {
        Command::Stats(args) => stats(args, config),
        Command::Select(args) => select(args, config),
        Command::Tokenize(args) => tokenize(args, config),
        Command::Forward(args) => forward(args, config),
        Command::Gradcheck(args) => gradcheck_vit(args, config),
        Command::GradcheckLoss(args) => gradcheck_loss(args, config),
        Command::Plan(args) => plan(args, config),
        Command::Synth(args) => synth(args, config),
        Command::Verify(args) => verify_cmd(args, config),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsReport {
    pub dataset_id: String,
    pub target_label: u8,
    pub connectivity: Connectivity,
    /// Shared spacing of all scans, absent when they differ.
    pub spacing_mm: Option<[f32; 3]>,
    pub files: Vec<String>,
    #[serde(flatten)]
    pub stats: DatasetStats,
}

fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let entries = fs::read_dir(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.ends_with(".nii") || name.ends_with(".nii.gz")
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    Ok(files)
}

fn scan_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("scan");
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn stats(args: StatsArgs, mut config: PipelineConfig) -> CmdResult {
    if let Some(c) = args.connectivity {
        config.connectivity = c;
    }
    if let Some(a) = args.aggregation {
        config.aggregation_mode = a;
    }
    if let Some(l) = args.label {
        config.target_label = l;
    }
    if let Some(b) = args.bins {
        config.histogram_bins = b;
    }
    let files = expand_inputs(&args.paths)?;
    if files.is_empty() {
        return Err(Failure::usage("NoScans: no .nii volumes found"));
    }

    // read everything before computing anything
    let loaded: Vec<(PathBuf, Result<LabelVolume, String>)> = files
        .par_iter()
        .map(|p| {
            let vol = read_nifti_report(p).map_err(|e| e.to_string()).map(|r| {
                for w in &r.warnings {
                    log::warn!("{}: {w:?}", p.display());
                }
                r.volume
            });
            (p.clone(), vol)
        })
        .collect();
    let bad: Vec<String> = loaded
        .iter()
        .filter_map(|(p, r)| r.as_ref().err().map(|e| format!("{}: {e}", p.display())))
        .collect();
    if !bad.is_empty() {
        for line in &bad {
            eprintln!("unreadable: {line}");
        }
        return Err(Failure::usage(format!("{} of {} inputs unreadable; nothing processed", bad.len(), files.len())));
    }
    let scans: Vec<(String, LabelVolume)> =
        loaded.into_iter().map(|(p, r)| (scan_id(&p), r.expect("errors handled above"))).collect();
    let mut ids: Vec<&str> = scans.iter().map(|(id, _)| id.as_str()).collect();
    ids.sort_unstable();
    if let Some(dup) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Failure::usage(format!("duplicate scan id {:?}", dup[0])));
    }

    let per_scan: Vec<(String, LesionStats)> = scans
        .par_iter()
        .map(|(id, vol)| {
            lesion_stats(vol, config.target_label, config.histogram_bins, config.connectivity).map(|s| (id.clone(), s))
        })
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let dataset = DatasetStats::aggregate(per_scan, config.aggregation_mode).map_err(|e| Failure::usage(e.to_string()))?;
    let first = scans[0].1.spacing_mm();
    let shared = scans.iter().all(|(_, v)| v.spacing_mm() == first).then_some(first);
    let dataset_id = args.dataset_id.unwrap_or_else(|| {
        args.paths[0].file_name().and_then(|n| n.to_str()).unwrap_or("dataset").trim_end_matches(".nii").to_string()
    });
    emit(&StatsReport {
        dataset_id,
        target_label: config.target_label,
        connectivity: config.connectivity,
        spacing_mm: shared,
        files: files.iter().map(|p| p.display().to_string()).collect(),
        stats: dataset,
    })
}

fn apply_selection_flags(flags: &SelectionFlags, config: &mut PipelineConfig) {
    if let Some(m) = flags.unit_mode {
        config.unit_mode = m;
    }
    if flags.scale_s.is_some() {
        config.scale_s = flags.scale_s;
    }
    if let Some(s) = flags.spacing {
        config.spacing_mm = s;
    }
    if let Some(c) = &flags.candidates {
        config.candidates = c.clone();
    }
    if let Some(d) = flags.dims {
        config.dims = d;
    }
}

#[derive(Debug, Serialize)]
struct SelectReport {
    dataset_id: Option<String>,
    mean_volume_mm3: f64,
    unit_mode: UnitMode,
    unit_formula: &'static str,
    spacing_mm: [f32; 3],
    dims: [usize; 3],
    decision: PatchDecision,
    reference: ReferenceResults,
}

fn unit_formula(mode: UnitMode) -> &'static str {
    match mode {
        UnitMode::VoxelEdge => "cbrt(V_mm3 / (sx*sy*sz)): edge in voxels of a cube holding V",
        UnitMode::PaperLiteral { .. } => "cbrt(V_mm3 * s) with caller-supplied s; the unit of s is a calibration choice",
    }
}

fn decide(mean_volume_mm3: f64, spacing: [f32; 3], config: &PipelineConfig) -> Result<(UnitMode, PatchDecision), Failure> {
    let mode = config.resolved_unit_mode().map_err(Failure::usage)?;
    let target =
        target_edge(mean_volume_mm3, spacing.map(f64::from), mode).map_err(|e| Failure::usage(e.to_string()))?;
    let decision = select_patch(target, &config.candidates, config.dims).map_err(|e| Failure::usage(e.to_string()))?;
    Ok((mode, decision))
}

fn read_stats_report(path: &Path) -> Result<StatsReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: not a stats report: {e}", path.display())))
}

fn select(args: SelectArgs, mut config: PipelineConfig) -> CmdResult {
    let (dataset_id, volume, report_spacing) = match (&args.stats, args.volume_mm3) {
        (Some(path), _) => {
            let report = read_stats_report(path)?;
            (Some(report.dataset_id), report.stats.dataset_mean_volume_mm3, report.spacing_mm)
        }
        (None, Some(v)) => (None, v, None),
        (None, None) => return Err(Failure::usage("need --stats or --volume-mm3")),
    };
    if let Some(s) = report_spacing {
        config.spacing_mm = s;
    }
    apply_selection_flags(&args.selection, &mut config);
    let (mode, decision) = decide(volume, config.spacing_mm, &config)?;
    emit(&SelectReport {
        dataset_id,
        mean_volume_mm3: volume,
        unit_mode: mode,
        unit_formula: unit_formula(mode),
        spacing_mm: config.spacing_mm,
        dims: config.dims,
        decision,
        reference: reference_results(),
    })
}

#[derive(Debug, Serialize)]
struct PlanReport {
    unit_mode: UnitMode,
    unit_formula: &'static str,
    decisions: Vec<(String, PatchDecision)>,
    plan: TransferPlan,
    /// Range of `s` under which paper-literal mode would keep every dataset's
    /// current selection; absent when no single `s` does.
    literal_scale_interval: Option<(f64, f64)>,
    reference: ReferenceResults,
}

fn plan(args: PlanArgs, mut config: PipelineConfig) -> CmdResult {
    if args.reports.len() < 2 {
        return Err(Failure::usage("a transfer plan needs at least two stats reports"));
    }
    apply_selection_flags(&args.selection, &mut config);
    let mut rows = Vec::new();
    let mut mode = UnitMode::VoxelEdge;
    for path in &args.reports {
        let report = read_stats_report(path)?;
        let spacing = args.selection.spacing.or(report.spacing_mm).unwrap_or(config.spacing_mm);
        let (m, decision) = decide(report.stats.dataset_mean_volume_mm3, spacing, &config)?;
        mode = m;
        rows.push((report.dataset_id, report.stats, decision));
    }
    let plan = transfer_plan(&rows).map_err(|e| Failure::usage(e.to_string()))?;
    let wanted: Vec<(f64, usize)> = rows.iter().map(|(_, s, d)| (s.dataset_mean_volume_mm3, d.selected)).collect();
    emit(&PlanReport {
        unit_mode: mode,
        unit_formula: unit_formula(mode),
        literal_scale_interval: literal_scale_interval(&wanted, &config.candidates),
        decisions: rows.into_iter().map(|(id, _, d)| (id, d)).collect(),
        plan,
        reference: reference_results(),
    })
}

#[derive(Debug, Serialize)]
struct TokenizeReport {
    input: String,
    output: String,
    dims: [usize; 3],
    patch: usize,
    grid: [usize; 3],
    token_count: usize,
    pad_voxels: usize,
    rows: usize,
    cols: usize,
    embedded: bool,
}

fn tokenize(args: TokenizeArgs, config: PipelineConfig) -> CmdResult {
    if args.patch == 0 {
        return Err(Failure::usage("--patch must be >= 1"));
    }
    let readout = read_nifti_report(&args.input).map_err(|e| Failure::usage(format!("{}: {e}", args.input.display())))?;
    let vol = readout.volume;
    let geo = token_geometry(vol.dims(), args.patch);
    let patches = extract_patches(volume_from_labels(&vol).view(), args.patch);
    let matrix = match args.embed_dim {
        Some(dim) => {
            let params = EmbeddingParams::init(patches.ncols(), patches.nrows(), dim, args.seed.unwrap_or(config.seed));
            embed(patches.view(), &params, geo.grid).map_err(|e| Failure::usage(e.to_string()))?.tokens
        }
        None => patches,
    };
    let file = File::create(&args.output).map_err(|e| Failure::usage(format!("{}: {e}", args.output.display())))?;
    write_token_matrix(BufWriter::new(file), &matrix).map_err(|e| Failure::usage(e.to_string()))?;
    emit(&TokenizeReport {
        input: args.input.display().to_string(),
        output: args.output.display().to_string(),
        dims: vol.dims(),
        patch: args.patch,
        grid: geo.grid,
        token_count: geo.token_count,
        pad_voxels: geo.pad_voxels,
        rows: matrix.nrows(),
        cols: matrix.ncols(),
        embedded: args.embed_dim.is_some(),
    })
}

#[derive(Debug, Serialize)]
struct ForwardReport {
    config: ViTConfig,
    seed: u64,
    tokens: usize,
    input_frobenius: f64,
    output_frobenius: f64,
    output_row_norms: Vec<f64>,
    checksum: Checksum,
}

fn forward(args: ForwardArgs, config: PipelineConfig) -> CmdResult {
    let cfg = preset(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    let z0 = match &args.tokens {
        Some(path) => {
            let file = File::open(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            read_token_matrix(BufReader::new(file)).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_simple_fn((args.count, cfg.hidden), || rng.random_range(-1.0..1.0))
        }
    };
    let params = ViTParams::init(&cfg, seed);
    let (out, _) = vit::forward(&z0, &cfg, &params).map_err(|e| match e {
        vit::VitError::NonFiniteActivation { .. } => Failure::invariant(e.to_string()),
        other => Failure::usage(other.to_string()),
    })?;
    let frob = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    emit(&ForwardReport {
        config: cfg,
        seed,
        tokens: z0.nrows(),
        input_frobenius: frob(&z0),
        output_frobenius: frob(&out),
        output_row_norms: out.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect(),
        checksum: checksum(&out),
    })
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    config: ViTConfig,
    seed: u64,
    tolerance: f64,
    perturbed: bool,
    passed: bool,
    report: gradcheck::GradCheckReport,
}

fn gradcheck_vit(args: GradcheckArgs, config: PipelineConfig) -> CmdResult {
    let cfg = preset(&args.config)?;
    if cfg.encoder_param_count() > GRADCHECK_PARAM_LIMIT {
        return Err(Failure::usage(format!(
            "{} has {} parameters; finite differences are limited to {GRADCHECK_PARAM_LIMIT}",
            args.config,
            cfg.encoder_param_count()
        )));
    }
    if args.tokens == 0 || args.patch_dim == 0 {
        return Err(Failure::usage("--tokens and --patch-dim must be >= 1"));
    }
    let seed = args.seed.unwrap_or(config.seed);
    let perturb = if args.perturb_grad { verify::PERTURB_FACTOR } else { 0.0 };
    let report = gradcheck::vit_gradcheck(cfg, args.tokens, args.patch_dim, seed, perturb)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let passed = report.passes(args.tolerance);
    let max = report.max_rel_err;
    emit(&GradcheckReport { config: cfg, seed, tolerance: args.tolerance, perturbed: args.perturb_grad, passed, report })?;
    if passed {
        Ok(())
    } else {
        Err(Failure::invariant(format!("max relative error {max:.3e} exceeds {:.1e}", args.tolerance)))
    }
}

#[derive(Debug, Serialize)]
struct LossCheckReport {
    seed: u64,
    tolerance: f64,
    perturbed: bool,
    passed: bool,
    max_rel_err: f64,
    cases: Vec<gradcheck::LossCheck>,
}

fn gradcheck_loss(args: GradcheckLossArgs, config: PipelineConfig) -> CmdResult {
    if args.voxels == 0 || args.classes < 2 || args.cases == 0 {
        return Err(Failure::usage("need --voxels >= 1, --classes >= 2 and --cases >= 1"));
    }
    let seed = args.seed.unwrap_or(config.seed);
    let perturb = if args.perturb_grad { verify::PERTURB_FACTOR } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(args.cases);
    for _ in 0..args.cases {
        let (logits, truth) = gradcheck::random_loss_case(args.voxels, args.classes, rng.random());
        cases.push(
            gradcheck::loss_gradcheck(&logits, &truth, EPS_SMOOTH, LOSS_STEP, perturb)
                .map_err(|e| Failure::usage(e.to_string()))?,
        );
    }
    let max_rel_err = cases.iter().fold(0.0f64, |m, c| m.max(c.max_rel_err));
    let passed = max_rel_err.is_finite() && max_rel_err < args.tolerance;
    emit(&LossCheckReport { seed, tolerance: args.tolerance, perturbed: args.perturb_grad, passed, max_rel_err, cases })?;
    if passed {
        Ok(())
    } else {
        Err(Failure::invariant(format!("max relative error {max_rel_err:.3e} exceeds {:.1e}", args.tolerance)))
    }
}

fn synth(args: SynthArgs, config: PipelineConfig) -> CmdResult {
    let seed = args.seed.unwrap_or(config.seed);
    let specs: Vec<(String, PhantomSpec)> = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            let spec: PhantomSpec =
                serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            vec![(args.id.clone(), spec)]
        }
        None => {
            let cfg = RandomPhantom {
                dims: args.grid,
                spacing_mm: args.spacing.unwrap_or(config.spacing_mm),
                lesions: args.lesions,
                semi_axis_mm: args.semi_axis,
                with_liver: !args.no_liver,
            };
            let mut out = Vec::with_capacity(args.count);
            for i in 0..args.count {
                let id = if args.count == 1 { args.id.clone() } else { format!("{}_{i:03}", args.id) };
                let spec = random_spec(&cfg, seed.wrapping_add(i as u64)).map_err(|e| Failure::usage(e.to_string()))?;
                out.push((id, spec));
            }
            out
        }
    };
    let mut sidecars: Vec<Sidecar> = Vec::with_capacity(specs.len());
    for (id, spec) in &specs {
        let files = write_fixture(spec, &args.out, id).map_err(|e| Failure::usage(e.to_string()))?;
        let text = fs::read_to_string(&files.sidecar).map_err(|e| Failure::usage(e.to_string()))?;
        sidecars.push(serde_json::from_str(&text).map_err(|e| Failure::usage(e.to_string()))?);
    }
    emit(&sidecars)
}

fn verify_cmd(args: VerifyArgs, config: PipelineConfig) -> CmdResult {
    let options = VerifyOptions {
        seed: args.seed.unwrap_or(config.seed),
        config: preset(&args.config)?,
        perturb_grad: args.perturb_grad,
        geometry_only: args.geometry_only,
    };
    let report = verify::run(&options);
    emit(&report)?;
    if report.all_passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(Failure::invariant(format!("failed checks: {}", failed.join(", "))))
    }
}
