use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use log::{info, warn};
use patchforge::attack::{
    evaluate_patch, run_attack, select_target_class, AttackInputs, EvalSplit, IterationRecord,
};
use patchforge::embednet::{
    load_checkpoint, save_checkpoint, train_target, LabeledImage, TrainConfig,
};
use patchforge::geometry::LandmarkTemplate;
use patchforge::image::{load_image, save_image, save_pgm, save_png, PngMetadata};
use patchforge::pipeline::{
    build_gallery, export_patch, generate_chessboard, generate_synthetic_identities,
    load_attack_inputs, load_evaluation, load_gallery, load_manifest, render_row, render_table,
    save_gallery, write_evaluation, write_report, GalleryEntry, StoredEvaluation,
};
use patchforge::sampler::{align_face, apply_patch};
use patchforge::{
    AttackConfig, AttackMode, AttackTrace, CapturePhoto, EmbedNetConfig, ImageTensor, PatchInit,
    PatchLayout, Split, StopReason, SyntheticIdentitySpec,
};
use serde::{Deserialize, Serialize};

use crate::args::{
    ApplyPatchArgs, AttackArgs, Command, EmbedGalleryArgs, EvaluateArgs, InitChoice, LayoutChoice,
    MakeChessboardArgs, ModeChoice, ReportArgs, SplitChoice, SynthDataArgs, TrainTargetArgs,
};
use crate::config::Resolved;
use crate::CliError;

type CmdResult<T = ()> = Result<T, CliError>;

/// Directory under the workspace holding one effective config per subcommand.
pub const EFFECTIVE_CONFIG_DIR: &str = "effective-config";

const SUMMARY_FILE: &str = "attack.json";
const PATCH_FILE: &str = "patch.json";
const TRACE_FILE: &str = "trace.csv";
const EVALUATION_FILE: &str = "evaluation.json";

struct Workspace(PathBuf);

impl Workspace {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.0.join(p)
        }
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_effective_config(ws: &Workspace, resolved: &Resolved) -> CmdResult {
    let path =
        ws.0.join(EFFECTIVE_CONFIG_DIR)
            .join(format!("{}.toml", resolved.cli.command.name()));
    create_parent(&path)?;
    std::fs::write(&path, resolved.effective_toml()?)
        .with_context(|| format!("writing {}", path.display()))?;
    info!("effective config written to {}", path.display());
    Ok(())
}

pub fn dispatch(resolved: &Resolved) -> CmdResult {
    let ws = Workspace(resolved.cli.workspace.clone());
    check_usage(&resolved.cli.command)?;
    write_effective_config(&ws, resolved)?;
    match &resolved.cli.command {
        Command::SynthData(a) => synth_data(&ws, a),
        Command::TrainTarget(a) => train(&ws, a),
        Command::EmbedGallery(a) => embed_gallery(&ws, a),
        Command::Attack(a) => attack(&ws, a),
        Command::ApplyPatch(a) => apply(&ws, a),
        Command::Evaluate(a) => evaluate(&ws, a),
        Command::Report(a) => report(&ws, a),
        Command::MakeChessboard(a) => make_chessboard(&ws, a),
    }
}

/// Argument combinations that are rejected before any work starts.
fn check_usage(command: &Command) -> CmdResult {
    match command {
        Command::Attack(a) => {
            if a.mode == ModeChoice::Targeted && a.target.is_none() {
                return Err(CliError::Usage(
                    "MissingTarget: targeted mode requires --target <ID|nearest>".into(),
                ));
            }
            if let Some(t) = &a.target {
                if t != "nearest" && t.parse::<usize>().is_err() {
                    return Err(CliError::Usage(format!(
                        "--target must be a class id or `nearest`, got `{t}`"
                    )));
                }
            }
        }
        Command::TrainTarget(a) => {
            parse_channels(&a.channels)?;
        }
        Command::MakeChessboard(a) if a.layout == LayoutChoice::Manifest => {
            return Err(CliError::Usage(
                "make-chessboard needs --layout forehead or --layout nose".into(),
            ));
        }
        Command::Report(a) if run_list(&a.runs).is_empty() => {
            return Err(CliError::Usage("--runs lists no run directories".into()));
        }
        _ => {}
    }
    Ok(())
}

fn parse_channels(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| {
            CliError::Usage(format!(
                "--channels must be comma-separated sizes, got `{s}`"
            ))
        })
}

fn run_list(s: &str) -> Vec<&str> {
    s.split(',')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .collect()
}

fn synth_data(ws: &Workspace, a: &SynthDataArgs) -> CmdResult {
    let spec = SyntheticIdentitySpec {
        num_identities: a.num_identities,
        images_per_identity: a.images_per_identity,
        train_per_identity: a.train_per_identity,
        val_per_identity: a.val_per_identity,
        blobs_per_identity: a.blobs_per_identity,
        max_shift_px: a.max_shift_px,
        max_brightness: a.max_brightness,
        layout: PatchLayout::forehead(a.cell_px),
        seed: a.seed,
        ..SyntheticIdentitySpec::default()
    };
    let dataset = generate_synthetic_identities(&spec).context("generating identities")?;
    let dir = ws.path(&a.out);
    let manifest = dataset.write(&dir).context("writing dataset")?;
    info!(
        "{} photos of {} identities written; manifest {}",
        dataset.photos.len(),
        spec.num_identities,
        manifest.display()
    );
    Ok(())
}

fn load_photos(ws: &Workspace, manifest: &Path) -> anyhow::Result<Vec<CapturePhoto>> {
    let path = ws.path(manifest);
    load_attack_inputs(&path).with_context(|| format!("loading {}", path.display()))
}

fn train(ws: &Workspace, a: &TrainTargetArgs) -> CmdResult {
    let photos = load_photos(ws, &a.manifest)?;
    let template = LandmarkTemplate::default();
    let data = photos
        .iter()
        .filter_map(|p| {
            p.identity.map(|label| {
                p.aligned(&template)
                    .map(|image| LabeledImage { image, label })
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .context("aligning photos")?;
    if data.is_empty() {
        return Err(anyhow!("the manifest has no photos with an identity label").into());
    }
    let net = EmbedNetConfig {
        channels: parse_channels(&a.channels)?,
        embedding_dim: a.embedding_dim,
        margin: a.margin,
        scale: a.scale,
        seed: a.seed,
        ..EmbedNetConfig::default()
    };
    let schedule = TrainConfig {
        epochs: a.epochs,
        min_epochs: a.min_epochs,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        batch_size: a.batch_size,
        target_accuracy: a.target_accuracy,
        centering_rate: a.centering_rate,
    };
    info!("training on {} photos", data.len());
    let (checkpoint, report) = train_target(&data, &net, &schedule).context("training")?;
    let out = ws.path(&a.out);
    create_parent(&out)?;
    save_checkpoint(&checkpoint, &out).context("saving checkpoint")?;
    info!(
        "accuracy {:.4} after {} epochs; checkpoint {}",
        checkpoint.metadata.train_accuracy,
        report.epoch_accuracy.len(),
        out.display()
    );
    Ok(())
}

fn embed_gallery(ws: &Workspace, a: &EmbedGalleryArgs) -> CmdResult {
    let photos = load_photos(ws, &a.manifest)?;
    let model = load_checkpoint(&ws.path(&a.model)).context("loading checkpoint")?;
    let gallery =
        build_gallery(&photos, &model, &LandmarkTemplate::default()).context("embedding photos")?;
    if gallery.is_empty() {
        return Err(anyhow!("the manifest has no photos with an identity label").into());
    }
    let out = ws.path(&a.out);
    create_parent(&out)?;
    save_gallery(&gallery, &out).context("saving gallery")?;
    info!(
        "{} gallery entries written to {}",
        gallery.len(),
        out.display()
    );
    Ok(())
}

/// Everything `evaluate` and `apply-patch` need to know about a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSummary {
    identity: usize,
    mode: AttackMode,
    target_class: Option<usize>,
    layout: PatchLayout,
    mask: Option<Vec<bool>>,
    stop_reason: StopReason,
    iterations: usize,
    final_adv: f64,
    final_tv: f64,
}

/// The optimised patch at full precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredPatch {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_layout(
    ws: &Workspace,
    choice: LayoutChoice,
    cell_px: usize,
    manifest: &Path,
) -> CmdResult<PatchLayout> {
    match choice {
        LayoutChoice::Forehead => Ok(PatchLayout::forehead(cell_px)),
        LayoutChoice::Nose => Ok(PatchLayout::nose(cell_px)),
        LayoutChoice::Manifest => {
            let path = ws.path(manifest);
            load_manifest(&path)
                .with_context(|| format!("loading {}", path.display()))?
                .layout
                .ok_or_else(|| {
                    CliError::Usage(
                        "the manifest records no layout; pass --layout forehead or --layout nose"
                            .into(),
                    )
                })
        }
    }
}

fn load_mask(path: &Path, shape: (usize, usize)) -> CmdResult<Vec<bool>> {
    let image = load_image(path).with_context(|| format!("loading mask {}", path.display()))?;
    if image.shape() != shape {
        return Err(CliError::Usage(format!(
            "mask is {}x{} but the patch is {}x{}",
            image.rows(),
            image.cols(),
            shape.0,
            shape.1
        )));
    }
    Ok(image.to_gray().data().iter().map(|&v| v > 0.5).collect())
}

fn gallery_entry(gallery: &[GalleryEntry], class: usize) -> CmdResult<&GalleryEntry> {
    gallery
        .iter()
        .find(|g| g.class_id == class)
        .ok_or_else(|| CliError::Usage(format!("class {class} is not in the gallery")))
}

fn of_identity(photo: &CapturePhoto, identity: usize) -> bool {
    photo.identity.is_none_or(|i| i == identity)
}

fn attack(ws: &Workspace, a: &AttackArgs) -> CmdResult {
    let layout = resolve_layout(ws, a.layout, a.cell_px, &a.manifest)?;
    let shape = layout.patch_shape();
    let mask = a
        .mask
        .as_ref()
        .map(|m| load_mask(&ws.path(m), shape))
        .transpose()?;
    let photos = load_photos(ws, &a.manifest)?;
    let model = load_checkpoint(&ws.path(&a.model)).context("loading checkpoint")?;
    let gallery = load_gallery(&ws.path(&a.gallery)).context("loading gallery")?;
    let gt = gallery_entry(&gallery, a.identity)?;
    let mode = match a.mode {
        ModeChoice::Untargeted => AttackMode::Untargeted,
        ModeChoice::Targeted => AttackMode::Targeted,
    };
    let target = match (mode, a.target.as_deref()) {
        (AttackMode::Untargeted, Some(_)) => {
            warn!("--target is ignored in untargeted mode");
            None
        }
        (AttackMode::Untargeted, None) => None,
        (AttackMode::Targeted, Some("nearest")) => {
            let pairs: Vec<_> = gallery
                .iter()
                .map(|g| (g.class_id, g.embedding.clone()))
                .collect();
            let (class, _) = select_target_class(&pairs, &gt.embedding, a.identity)
                .context("selecting the target class")?;
            Some(class)
        }
        (AttackMode::Targeted, Some(t)) => {
            let class: usize = t.parse().expect("checked before dispatch");
            if class == a.identity {
                return Err(CliError::Usage(
                    "the target class equals the identity".into(),
                ));
            }
            gallery_entry(&gallery, class)?;
            Some(class)
        }
        (AttackMode::Targeted, None) => unreachable!("checked before dispatch"),
    };
    let target_embedding = target
        .map(|c| gallery_entry(&gallery, c).map(|g| &g.embedding))
        .transpose()?;
    if let Some(c) = target {
        info!("target class {c}");
    }

    let template = LandmarkTemplate::default();
    let train: Vec<&CapturePhoto> = photos
        .iter()
        .filter(|p| p.split == Split::Train && of_identity(p, a.identity))
        .collect();
    if train.is_empty() {
        return Err(anyhow!("identity {} has no training photos", a.identity).into());
    }
    let images: Vec<ImageTensor> = train.iter().map(|p| p.image.clone()).collect();
    let grids = train
        .iter()
        .map(|p| p.grids(shape, &template, mask.as_deref()))
        .collect::<Result<Vec<_>, _>>()
        .context("precomputing grids")?;
    let config = AttackConfig {
        epsilon: a.epsilon,
        mu: a.mu,
        tau: a.tau,
        max_iters: a.max_iters,
        mode,
        stop_when_adv_below: a.stop_below,
        seed: a.seed,
        init: match a.init {
            InitChoice::Constant => PatchInit::Constant,
            InitChoice::UniformRandom => PatchInit::UniformRandom,
        },
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let inputs = AttackInputs {
        photos: &images,
        grids: &grids,
        model: &model,
        gt_embedding: &gt.embedding,
        target_embedding,
        patch_shape: shape,
    };
    info!(
        "attacking identity {} with {} photos",
        a.identity,
        images.len()
    );
    let trace = run_attack(&inputs, &config).context("running the attack")?;
    let last = *trace.last().expect("at least one iteration");

    let dir = ws.path(&a.out);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let patch = &trace.final_patch;
    write_json(
        &StoredPatch {
            rows: patch.rows(),
            cols: patch.cols(),
            values: patch.data().to_vec(),
        },
        &dir.join(PATCH_FILE),
    )?;
    save_image(patch, &dir.join("patch.png")).context("writing patch.png")?;
    save_pgm(patch, &dir.join("patch.pgm")).context("writing patch.pgm")?;
    export_patch(patch, &layout, a.dpi, &dir.join("print.png")).context("exporting print.png")?;
    trace
        .write_csv(&dir.join(TRACE_FILE))
        .context("writing the trace")?;
    write_json(
        &RunSummary {
            identity: a.identity,
            mode,
            target_class: target,
            layout,
            mask,
            stop_reason: trace.stop_reason,
            iterations: trace.records.len(),
            final_adv: last.adv,
            final_tv: last.tv,
        },
        &dir.join(SUMMARY_FILE),
    )?;
    info!(
        "{:?} after {} iterations: adv {:.4}, tv {:.3}; outputs in {}",
        trace.stop_reason,
        trace.records.len(),
        last.adv,
        last.tv,
        dir.display()
    );
    Ok(())
}

fn load_run(dir: &Path) -> anyhow::Result<(RunSummary, ImageTensor)> {
    let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
    let stored: StoredPatch = read_json(&dir.join(PATCH_FILE))?;
    if stored.rows * stored.cols != stored.values.len() {
        return Err(anyhow!("{} has the wrong number of values", PATCH_FILE));
    }
    let patch = ImageTensor::from_vec(stored.rows, stored.cols, 1, stored.values);
    Ok((summary, patch))
}

fn apply(ws: &Workspace, a: &ApplyPatchArgs) -> CmdResult {
    let run = ws.path(&a.run);
    let (summary, patch) = load_run(&run)?;
    let out = a
        .out
        .as_ref()
        .map_or_else(|| run.join("applied"), |o| ws.path(o));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let photos = load_photos(ws, &a.manifest)?;
    let template = LandmarkTemplate::default();
    let wanted = |s: Split| match a.split {
        SplitChoice::All => true,
        SplitChoice::Train => s == Split::Train,
        SplitChoice::Val => s == Split::Val,
        SplitChoice::Test => s == Split::Test,
    };
    let mut written = 0;
    for photo in photos
        .iter()
        .filter(|p| wanted(p.split) && of_identity(p, summary.identity))
    {
        let grids = photo
            .grids(
                summary.layout.patch_shape(),
                &template,
                summary.mask.as_deref(),
            )
            .with_context(|| format!("grids for {}", photo.id))?;
        let composite = apply_patch(&photo.image, &patch, &grids.patch)
            .with_context(|| format!("compositing {}", photo.id))?;
        let aligned = align_face(&composite.image, &grids.align)
            .with_context(|| format!("aligning {}", photo.id))?;
        save_image(
            &composite.image,
            &out.join(format!("{}_patched.png", photo.id)),
        )
        .context("writing the composite")?;
        save_image(&aligned, &out.join(format!("{}_aligned.png", photo.id)))
            .context("writing the aligned crop")?;
        written += 1;
    }
    info!("{written} photos written to {}", out.display());
    Ok(())
}

fn evaluate(ws: &Workspace, a: &EvaluateArgs) -> CmdResult {
    let run = ws.path(&a.run);
    let (summary, patch) = load_run(&run)?;
    let photos = load_photos(ws, &a.manifest)?;
    let model = load_checkpoint(&ws.path(&a.model)).context("loading checkpoint")?;
    let gallery = load_gallery(&ws.path(&a.gallery)).context("loading gallery")?;
    let gt = gallery_entry(&gallery, summary.identity)?;
    let target = summary
        .target_class
        .map(|c| gallery_entry(&gallery, c).map(|g| &g.embedding))
        .transpose()?;
    let template = LandmarkTemplate::default();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let members: Vec<&CapturePhoto> = photos
            .iter()
            .filter(|p| p.split == split && of_identity(p, summary.identity))
            .collect();
        if members.is_empty() {
            continue;
        }
        let grids = members
            .iter()
            .map(|p| {
                p.grids(
                    summary.layout.patch_shape(),
                    &template,
                    summary.mask.as_deref(),
                )
            })
            .collect::<Result<Vec<_>, _>>()
            .context("precomputing grids")?;
        splits.push(EvalSplit {
            split,
            photos: members.iter().map(|p| p.image.clone()).collect(),
            grids,
        });
    }
    let table = evaluate_patch(&patch, &splits, &model, &gt.embedding, target)
        .context("evaluating the patch")?;
    let name = a.name.clone().unwrap_or_else(|| {
        run.file_name()
            .map_or_else(|| "patch".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let stored = StoredEvaluation {
        patch_name: name,
        mode: summary.mode,
        table,
    };
    let path = run.join(EVALUATION_FILE);
    write_evaluation(&stored, &path).context("writing the evaluation")?;
    println!("{}", render_row(&stored.row()));
    Ok(())
}

fn parse_trace(path: &Path) -> anyhow::Result<Vec<IterationRecord>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(anyhow!("{}: malformed line `{line}`", path.display()));
            }
            Ok(IterationRecord {
                iter: f[0].parse()?,
                adv: f[1].parse()?,
                tv: f[2].parse()?,
                total: f[3].parse()?,
            })
        })
        .collect()
}

fn report(ws: &Workspace, a: &ReportArgs) -> CmdResult {
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for run in run_list(&a.runs) {
        let dir = ws.path(Path::new(run));
        let evaluation = load_evaluation(&dir.join(EVALUATION_FILE))
            .with_context(|| format!("loading the evaluation of {}", dir.display()))?;
        let (summary, patch) = load_run(&dir)?;
        let trace = AttackTrace {
            records: parse_trace(&dir.join(TRACE_FILE))?,
            stop_reason: summary.stop_reason,
            final_patch: patch,
            wall_time: Duration::ZERO,
        };
        rows.push(evaluation.row());
        traces.push((evaluation.patch_name.clone(), trace));
    }
    let refs: Vec<(String, &AttackTrace)> = traces.iter().map(|(n, t)| (n.clone(), t)).collect();
    let out = ws.path(&a.out);
    let files = write_report(&rows, &refs, &out).context("writing the report")?;
    print!("{}", render_table(&rows));
    info!("report written to {}", files.table.display());
    Ok(())
}

fn make_chessboard(ws: &Workspace, a: &MakeChessboardArgs) -> CmdResult {
    let layout = match a.layout {
        LayoutChoice::Nose => PatchLayout::nose(1),
        _ => PatchLayout::forehead(1),
    };
    if !a.dpi.is_finite() || a.dpi <= 0.0 {
        return Err(CliError::Usage("--dpi must be positive".into()));
    }
    let cell_px = (layout.cm_per_cell * a.dpi / 2.54).round().max(1.0) as usize;
    let board = generate_chessboard(layout.cell_rows, layout.cell_cols, cell_px, a.border_px)
        .context("rendering the chessboard")?;
    let out = ws.path(&a.out);
    create_parent(&out)?;
    let meta = PngMetadata {
        dots_per_inch: Some(a.dpi),
        text: vec![(
            "patchforge-chessboard".into(),
            format!(
                "{}x{} cells, {} cm per cell",
                layout.cell_cols, layout.cell_rows, layout.cm_per_cell
            ),
        )],
    };
    save_png(&board, &out, &meta).context("writing the chessboard")?;
    info!(
        "{}x{} px chessboard ({cell_px} px per cell) written to {}",
        board.cols(),
        board.rows(),
        out.display()
    );
    Ok(())
}
