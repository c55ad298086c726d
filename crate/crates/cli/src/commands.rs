//! One function per verb. Each writes its artifacts under `out`, plus
//! `<verb>.config.toml` (the resolved config) and `<verb>.run.json`
//! (arguments, seed, outputs) so the run can be replayed from `out` alone.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use choreo_core::dataset::{DanceSample, DatasetManifest, MusicFeatures, Split};
use choreo_core::metrics::{evaluate, EvalReport};
use choreo_core::motion::{
    forward_kinematics, project_keypoints, Keypoints2DSequence, MotionSequence, SkeletonTemplate, TrajectorySequence,
    KEYPOINT_WIDTH, POSE_WIDTH,
};
use choreo_core::pipeline::{build_manifest, preprocess, StageCounts, MANIFEST_FILE};
use choreo_core::synth::{write_synthetic, KEYPOINT_OFFSET, KEYPOINT_SCALE};
use choreo_core::tensor_file::{Modality, TensorFile};
use choreo_models::mct::{check_rvq_config, train_mct, ConditionBundle, GenerateOptions, Mct, MctLogRow};
use choreo_models::mkrvq::{hash_bytes, train_rvq, Rvq, RvqLogRow};
use serde::Serialize;
use serde_json::json;

use crate::ablation::{format_table, generate_for, run_ablation};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::render::render_motion;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hash_bytes(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Writes the config echo and run record for `verb`.
pub fn write_sidecars(out: &Path, verb: &str, cfg: &RunConfig, record: serde_json::Value) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join(format!("{verb}.config.toml")), &cfg.to_toml()?)?;
    let mut run = json!({ "command": verb, "seed": cfg.seed, "version": env!("CARGO_PKG_VERSION") });
    if let (Some(run), serde_json::Value::Object(extra)) = (run.as_object_mut(), record) {
        run.extend(extra);
    }
    write_json(&out.join(format!("{verb}.run.json")), &run)
}

/// Adds `args` to an existing `<verb>.run.json`.
pub fn record_replay_args(out: &Path, verb: &str, args: &[String]) -> Result<()> {
    let path = out.join(format!("{verb}.run.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut run: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(obj) = run.as_object_mut() {
        obj.insert("args".into(), json!(args));
    }
    write_json(&path, &run)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    Ok(DatasetManifest::load(&path)?)
}

fn load_rvq(path: &Path) -> Result<Rvq> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(Rvq::load(path)?)
}

fn load_mct(path: &Path, rvq: &Rvq) -> Result<Mct> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(Mct::load(path, rvq)?)
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.synth.validate()?;
    create_dir(out)?;
    let manifest = write_synthetic(&cfg.synth, &SkeletonTemplate::default(), out)?;
    write_sidecars(out, "synth-data", cfg, json!({ "sequences": manifest.samples.len() }))?;
    Ok(manifest)
}

pub fn preprocess_cmd(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<(DatasetManifest, StageCounts)> {
    let input = load_manifest(manifest)?;
    let samples = input.load_all()?;
    let (clips, counts) = preprocess(samples, &SkeletonTemplate::default(), &cfg.pipeline)?;
    log::info!(
        "preprocess: {} in, {} after jitter split, {} after smoothing, {} after filter, {} clips",
        counts.input,
        counts.after_jitter_split,
        counts.after_smoothing,
        counts.after_filter,
        counts.clips
    );
    create_dir(out)?;
    let provenance = json!({ "source": manifest, "pipeline": cfg.pipeline, "counts": counts });
    let built = build_manifest(&clips, out, cfg.pipeline.split_ratio, cfg.seed, provenance)?;
    write_sidecars(out, "preprocess", cfg, json!({ "manifest": manifest, "counts": counts }))?;
    Ok((built, counts))
}

/// Header plus one line per step, flushed as rows arrive.
struct CsvLog {
    file: BufWriter<File>,
    path: PathBuf,
    failed: Option<std::io::Error>,
}

impl CsvLog {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut log = CsvLog {
            file: BufWriter::new(file),
            path: path.to_path_buf(),
            failed: None,
        };
        log.line(header);
        Ok(log)
    }

    fn line(&mut self, text: &str) {
        if self.failed.is_none() {
            if let Err(e) = writeln!(self.file, "{text}").and_then(|_| self.file.flush()) {
                self.failed = Some(e);
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self.failed {
            Some(e) => Err(CliError::io(&self.path, e)),
            None => Ok(()),
        }
    }
}

pub const RVQ_LOG_HEADER: &str = "step,recon,vel,kpts,commit,total,resets";
pub const MCT_LOG_HEADER: &str = "step,kind,ce_mask,ce_layer,rec,gp,kpts,fk,contact,total";

fn rvq_row(r: &RvqLogRow) -> String {
    format!("{},{},{},{},{},{},{}", r.step, r.recon, r.vel, r.kpts, r.commit, r.total, r.resets)
}

fn mct_row(r: &MctLogRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.step, r.kind, r.ce_mask, r.ce_layer, r.rec, r.gp, r.kpts, r.fk, r.contact, r.total
    )
}

pub fn train_rvq_cmd(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<PathBuf> {
    cfg.rvq.validate()?;
    let data = load_manifest(manifest)?;
    create_dir(out)?;
    let mut log = CsvLog::create(&out.join("rvq_log.csv"), RVQ_LOG_HEADER)?;
    let (rvq, rows) = train_rvq(&data, &cfg.rvq, cfg.seed, |r| {
        log.line(&rvq_row(r));
        if r.step % 100 == 0 {
            log::info!("rvq step {} total {:.5}", r.step, r.total);
        }
    })?;
    log.finish()?;
    let path = out.join("rvq.ckpt");
    rvq.save(&path)?;
    write_sidecars(
        out,
        "train-rvq",
        cfg,
        json!({ "manifest": manifest, "checkpoint": path, "hash": rvq.hash()?, "final": rows.last() }),
    )?;
    Ok(path)
}

pub fn train_mct_cmd(cfg: &RunConfig, manifest: &Path, rvq_path: &Path, out: &Path) -> Result<PathBuf> {
    cfg.mct.validate()?;
    let rvq = load_rvq(rvq_path)?;
    check_rvq_config(&rvq, &cfg.rvq)?;
    let data = load_manifest(manifest)?;
    create_dir(out)?;
    let mut log = CsvLog::create(&out.join("mct_log.csv"), MCT_LOG_HEADER)?;
    let (mct, rows) = train_mct(&data, &rvq, &cfg.mct, cfg.seed, &SkeletonTemplate::default(), |r| {
        log.line(&mct_row(r));
        if r.step % 100 == 0 {
            log::info!("mct step {} {} total {:.5}", r.step, r.kind, r.total);
        }
    })?;
    log.finish()?;
    let path = out.join("mct.ckpt");
    mct.save(&path)?;
    write_sidecars(
        out,
        "train-mct",
        cfg,
        json!({
            "manifest": manifest,
            "rvq_checkpoint": rvq_path,
            "rvq_hash": mct.rvq_hash,
            "checkpoint": path,
            "hash": mct.hash()?,
            "final": rows.last(),
        }),
    )?;
    Ok(path)
}

/// Condition files for one generation call; any subset may be given.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ConditionFiles {
    pub music: Option<PathBuf>,
    pub keypoints: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub text: Option<PathBuf>,
    /// Output length when no frame-aligned condition is given.
    pub frames: Option<usize>,
}

fn read_condition(path: &Path, modality: Modality, width: Option<usize>) -> Result<TensorFile> {
    let file = TensorFile::read(path)?;
    let shape = &file.header.shape;
    let ok = file.header.modality == modality
        && match (modality, width) {
            (Modality::Text, _) => shape.len() == 1,
            (_, Some(w)) => shape.len() == 2 && shape[1] == w,
            _ => shape.len() == 2,
        };
    if !ok {
        return Err(CliError::MalformedCondition(format!(
            "{}: expected {modality:?} with width {width:?}, found {:?} {:?}",
            path.display(),
            file.header.modality,
            shape
        )));
    }
    Ok(file)
}

pub fn load_conditions(files: &ConditionFiles, default_fps: f64) -> Result<ConditionBundle> {
    let music = files.music.as_deref().map(|p| read_condition(p, Modality::Music, None)).transpose()?;
    let kpts = files.keypoints.as_deref().map(|p| read_condition(p, Modality::Keypoints, Some(KEYPOINT_WIDTH))).transpose()?;
    let traj = files.trajectory.as_deref().map(|p| read_condition(p, Modality::Trajectory, Some(3))).transpose()?;
    let text = files.text.as_deref().map(|p| read_condition(p, Modality::Text, None)).transpose()?;
    let aligned = [&music, &kpts, &traj];
    let first = aligned.iter().find_map(|f| f.as_ref());
    let frames = match (first, files.frames) {
        (Some(f), _) => f.header.shape[0],
        (None, Some(n)) if n > 0 => n,
        _ => {
            return Err(CliError::MalformedCondition(
                "no frame-aligned condition given; pass --frames".into(),
            ))
        }
    };
    let fps = first.and_then(|f| f.header.fps).unwrap_or(default_fps);
    let bundle = ConditionBundle {
        frames,
        fps,
        music: music.map(|f| MusicFeatures {
            dim: f.header.shape[1],
            data: f.data,
        }),
        keypoints: kpts.map(|f| Keypoints2DSequence::from_rows(&f.data, fps)).transpose()?,
        trajectory: traj.map(|f| TrajectorySequence {
            fps,
            positions: f
                .data
                .chunks_exact(3)
                .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64].into())
                .collect(),
        }),
        text: text.map(|f| f.data),
        music_beats: Vec::new(),
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_motion(path: &Path, motion: &MotionSequence) -> Result<()> {
    TensorFile::new(Modality::Motion, vec![motion.frames(), POSE_WIDTH], Some(motion.fps), motion.to_rows())?.write(path)?;
    Ok(())
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let file = TensorFile::read(path)?;
    if file.header.modality != Modality::Motion || file.header.shape.len() != 2 || file.header.shape[1] != POSE_WIDTH {
        return Err(CliError::Validation(format!(
            "{}: expected a {POSE_WIDTH}-wide motion tensor, found {:?} {:?}",
            path.display(),
            file.header.modality,
            file.header.shape
        )));
    }
    Ok(MotionSequence::from_rows(&file.data, file.header.fps.unwrap_or(10.0))?)
}

pub fn generate_cmd(
    cfg: &RunConfig,
    rvq_path: &Path,
    mct_path: &Path,
    files: &ConditionFiles,
    out: &Path,
) -> Result<PathBuf> {
    if cfg.generate.require_music && files.music.is_none() {
        return Err(CliError::MalformedCondition(
            "music is required (set generate.require_music = false to allow music-free generation)".into(),
        ));
    }
    let rvq = load_rvq(rvq_path)?;
    let mct = load_mct(mct_path, &rvq)?;
    let bundle = load_conditions(files, cfg.generate.fps)?;
    let opts = GenerateOptions {
        steps: cfg.mct.inference_steps,
        temperature: cfg.mct.temperature,
        seed: cfg.seed,
    };
    let generated = mct.generate(&rvq, &bundle, None, &opts)?;
    create_dir(out)?;
    let path = out.join("motion.bin");
    write_motion(&path, &generated.motion)?;
    let hashes: serde_json::Map<String, serde_json::Value> = [
        ("music", &files.music),
        ("keypoints", &files.keypoints),
        ("trajectory", &files.trajectory),
        ("text", &files.text),
    ]
    .into_iter()
    .filter_map(|(k, p)| p.as_ref().map(|p| (k, p)))
    .map(|(k, p)| Ok((k.to_string(), json!({ "path": p, "sha256": file_hash(p)? }))))
    .collect::<Result<_>>()?;
    let record = json!({
        "conditions": hashes,
        "frames": generated.motion.frames(),
        "fps": generated.motion.fps,
        "steps": opts.steps,
        "temperature": opts.temperature,
        "rvq_checkpoint": rvq_path,
        "mct_checkpoint": mct_path,
        "rvq_hash": rvq.hash()?,
        "output": path,
        "output_sha256": file_hash(&path)?,
    });
    write_json(&out.join("motion.json"), &record)?;
    write_sidecars(out, "generate", cfg, record)?;
    Ok(path)
}

/// Music-and-text generation for every sample of one split; the result is a
/// manifest that `evaluate` can score against the source.
pub fn generate_split_cmd(
    cfg: &RunConfig,
    rvq_path: &Path,
    mct_path: &Path,
    manifest: &Path,
    split: Split,
    out: &Path,
) -> Result<DatasetManifest> {
    let rvq = load_rvq(rvq_path)?;
    let mct = load_mct(mct_path, &rvq)?;
    let source = load_manifest(manifest)?;
    let samples: Vec<DanceSample> =
        source.split(split).map(|e| source.load_sample(e)).collect::<std::result::Result<_, _>>()?;
    let opts = GenerateOptions {
        steps: cfg.mct.inference_steps,
        temperature: cfg.mct.temperature,
        seed: cfg.seed,
    };
    let motions = generate_for(&mct, &rvq, &samples, &opts)?;
    let sk = SkeletonTemplate::default();
    let generated = samples
        .iter()
        .zip(motions)
        .map(|(s, motion)| {
            let keypoints = project_keypoints(&forward_kinematics(&motion, &sk)?, &sk, KEYPOINT_SCALE, KEYPOINT_OFFSET);
            Ok(DanceSample {
                motion,
                keypoints,
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let provenance = json!({ "generated_from": manifest, "split": split, "seed": cfg.seed });
    let built = build_manifest(&generated, out, 1.0, cfg.seed, provenance)?;
    write_sidecars(
        out,
        "generate",
        cfg,
        json!({ "manifest": manifest, "split": split, "rvq_checkpoint": rvq_path, "mct_checkpoint": mct_path }),
    )?;
    Ok(built)
}

pub fn evaluate_cmd(cfg: &RunConfig, generated: &Path, reference: &Path, out: &Path) -> Result<EvalReport> {
    let report = evaluate(
        &load_manifest(generated)?,
        &load_manifest(reference)?,
        &SkeletonTemplate::default(),
        cfg.metrics,
    )?;
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_sidecars(out, "evaluate", cfg, json!({ "generated": generated, "reference": reference }))?;
    Ok(report)
}

pub fn render_cmd(cfg: &RunConfig, motion: &Path, every_n: usize, size: u32, out: &Path) -> Result<Vec<PathBuf>> {
    let m = read_motion(motion)?;
    let files = render_motion(&m, &SkeletonTemplate::default(), out, every_n, size)?;
    write_sidecars(out, "render", cfg, json!({ "motion": motion, "every_n": every_n, "size": size, "frames": files.len() }))?;
    Ok(files)
}

/// Trains the loss grid on the train split and scores it on the test split.
pub fn ablate_cmd(cfg: &RunConfig, manifest: &Path, rvq_path: &Path, seeds: &[u64], out: &Path) -> Result<String> {
    let rvq = load_rvq(rvq_path)?;
    check_rvq_config(&rvq, &cfg.rvq)?;
    let data = load_manifest(manifest)?;
    let load = |split| -> Result<Vec<DanceSample>> {
        Ok(data.split(split).map(|e| data.load_sample(e)).collect::<std::result::Result<_, _>>()?)
    };
    let (train, test) = (load(Split::Train)?, load(Split::Test)?);
    let rows = run_ablation(&train, &test, &rvq, &cfg.mct, seeds, cfg.seed, &SkeletonTemplate::default(), cfg.metrics, |t, s| {
        log::info!("ablation row {t:?} seed {s}")
    })?;
    let table = format_table(&rows);
    create_dir(out)?;
    write_text(&out.join("ablation.md"), &table)?;
    write_json(&out.join("ablation.json"), &rows)?;
    write_sidecars(out, "ablate", cfg, json!({ "manifest": manifest, "rvq_checkpoint": rvq_path, "seeds": seeds }))?;
    Ok(table)
}
