//! Implementations behind the four subcommands. The binary is a thin clap
//! wrapper over these so tests can drive them in-process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tempose_core::data::{self, Clip, VideoSequence};
use tempose_core::geom::{self, CameraIntrinsics, ObjectModel};
use tempose_core::metrics::{
    self, EvalRecord, DEFAULT_CURVE_STEPS, DEFAULT_MAX_THRESHOLD,
};
use tempose_core::model::Model;
use tempose_core::serialize;
use tempose_core::train::{
    self, load_train_checkpoint, save_train_checkpoint, TrainState,
};
use tempose_core::{Error, Result};

use crate::config::AppConfig;
use crate::manifest::{sha256_hex, RunManifest};

pub const RECORDS_SCHEMA: &str = "tempose/1";

/// Process-environment options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvOpts {
    /// Worker-pool cap from TEMPOSE_THREADS (the pipelines here are serial,
    /// so this is recorded and honored as an upper bound of 1..=threads).
    pub threads: usize,
    /// TEMPOSE_STRICT=1: refuse to run randomized commands without --seed.
    pub strict: bool,
}

impl EnvOpts {
    pub fn from_env() -> Result<EnvOpts> {
        let threads = match std::env::var("TEMPOSE_THREADS") {
            Ok(v) => v.parse::<usize>().ok().filter(|&t| t >= 1).ok_or_else(|| {
                Error::InvalidInput {
                    op: "TEMPOSE_THREADS",
                    msg: format!("must be a positive integer, got {v:?}"),
                }
            })?,
            Err(_) => 1,
        };
        let strict = std::env::var("TEMPOSE_STRICT").map(|v| v == "1").unwrap_or(false);
        Ok(EnvOpts { threads, strict })
    }
}

/// Resolve the run seed: explicit flag, else an error under TEMPOSE_STRICT=1,
/// else a time-derived seed.
pub fn resolve_seed(flag: Option<u64>, env: &EnvOpts) -> Result<u64> {
    match flag {
        Some(s) => Ok(s),
        None if env.strict => Err(Error::InvalidInput {
            op: "seed",
            msg: "--seed is required when TEMPOSE_STRICT=1".to_string(),
        }),
        None => {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_err(|e| Error::InvalidInput {
                    op: "seed",
                    msg: format!("system clock error: {e}"),
                })?;
            Ok(now.as_nanos() as u64)
        }
    }
}

/// All regular files under `dir`, sorted, excluding the manifest itself.
fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn finish_manifest(
    mut manifest: RunManifest,
    out_dir: &Path,
    started: Instant,
) -> Result<RunManifest> {
    manifest.record_artifacts(out_dir, &walk_files(out_dir)?);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Generate the synthetic corpus: object-model registry, interchange
/// sequences, and per-frame feature tensors.
pub fn synth_gen(
    config_path: &Path,
    out_dir: &Path,
    seed_flag: Option<u64>,
    env: &EnvOpts,
) -> Result<RunManifest> {
    let started = Instant::now();
    let seed = resolve_seed(seed_flag, env)?;
    let config_bytes = std::fs::read(config_path)?;
    let app = AppConfig::load(config_path)?;
    let mut synth = app.synth()?.clone();
    synth.cfg.seed = seed;
    synth.cfg.validate()?;

    let models = data::synth_object_models(synth.cfg.n_objects);
    let sequences = (0..synth.num_sequences as u64)
        .map(|i| data::synth_sequence(&synth.cfg, &models, i))
        .collect::<Result<Vec<_>>>()?;

    let seq_dir = out_dir.join("sequences");
    data::save_sequences(&sequences, &seq_dir)?;
    let model_dir = out_dir.join("models");
    std::fs::create_dir_all(&model_dir)?;
    geom::save_object_models(&models, &model_dir.join("registry.jsonl"))?;

    let manifest = RunManifest::new(
        "synth-gen",
        sha256_hex(&config_bytes),
        Some(seed),
        env.threads,
    );
    finish_manifest(manifest, out_dir, started)
}

/// Load a corpus written by `synth-gen` (or converted external data with the
/// same layout): `sequences/*.jsonl` + `sequences/features/` + `models/`.
pub fn load_corpus(data_dir: &Path) -> Result<(Vec<VideoSequence>, BTreeMap<u32, ObjectModel>)> {
    let seq_dir = data_dir.join("sequences");
    if !seq_dir.is_dir() {
        return Err(Error::InvalidInput {
            op: "load_corpus",
            msg: format!("no sequences directory at {}", seq_dir.display()),
        });
    }
    let mut seqs = data::load_sequences(&seq_dir)?;
    if seqs.is_empty() {
        return Err(Error::EmptyInput("load_corpus"));
    }
    data::load_features(&mut seqs, &seq_dir)?;
    let models = geom::load_object_models(&data_dir.join("models").join("registry.jsonl"))?;
    Ok((seqs, models.into_iter().map(|m| (m.class_id, m)).collect()))
}

fn check_dims(seqs: &[VideoSequence], model: &Model) -> Result<()> {
    for seq in seqs {
        if seq.d != model.cfg.d_model {
            return Err(Error::InvalidInput {
                op: "dims",
                msg: format!(
                    "sequence {} has feature dimension {} but the model expects d_model {}",
                    seq.id, seq.d, model.cfg.d_model
                ),
            });
        }
    }
    Ok(())
}

/// Train (or resume) a model; writes per-epoch checkpoints, `best.vpck`,
/// the step log CSV, and an epoch summary CSV.
pub fn train_cmd(
    config_path: Option<&Path>,
    data_dir: &Path,
    out_dir: &Path,
    seed_flag: Option<u64>,
    resume: Option<&Path>,
    env: &EnvOpts,
) -> Result<RunManifest> {
    let started = Instant::now();
    let (seqs, models) = load_corpus(data_dir)?;

    let (mut state, train_cfg, config_hash, seed) = match resume {
        Some(ckpt) => {
            let (state, cfg) = load_train_checkpoint(ckpt)?;
            let hash = sha256_hex(&std::fs::read(ckpt)?);
            let seed = cfg.seed;
            (state, cfg, hash, seed)
        }
        None => {
            let config_path = config_path.ok_or(Error::InvalidInput {
                op: "train",
                msg: "--config is required unless resuming".to_string(),
            })?;
            let seed = resolve_seed(seed_flag, env)?;
            let config_bytes = std::fs::read(config_path)?;
            let app = AppConfig::load(config_path)?;
            let model_cfg = app.model()?.clone();
            let mut train_cfg = app.train()?.cfg.clone();
            train_cfg.seed = seed;
            train_cfg.validate()?;
            if model_cfg.max_context < train_cfg.clip_len {
                return Err(Error::InvalidInput {
                    op: "train",
                    msg: format!(
                        "clip_len {} exceeds model max_context {}",
                        train_cfg.clip_len, model_cfg.max_context
                    ),
                });
            }
            let model = Model::init(model_cfg, seed)?;
            let state = TrainState::new(model, &train_cfg);
            (state, train_cfg, sha256_hex(&config_bytes), seed)
        }
    };
    check_dims(&seqs, &state.model)?;

    let val_sequences = config_path
        .map(AppConfig::load)
        .transpose()?
        .and_then(|a| a.train.map(|t| t.val_sequences))
        .unwrap_or(1);
    let val_count = val_sequences.min(seqs.len() - 1);
    let (train_seqs, val_seqs) = seqs.split_at(seqs.len() - val_count);

    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let cfg_for_ckpt = train_cfg.clone();
    let (log, history) = train::train(
        &mut state,
        &train_cfg,
        train_seqs,
        val_seqs,
        &models,
        |state, stats| {
            save_train_checkpoint(
                &ckpt_dir.join(format!("epoch_{:03}.vpck", stats.epoch)),
                state,
                &cfg_for_ckpt,
            )?;
            if stats.val_loss <= state.plateau.best {
                save_train_checkpoint(&ckpt_dir.join("best.vpck"), state, &cfg_for_ckpt)?;
            }
            Ok(())
        },
    )?;

    std::fs::write(out_dir.join("train_log.csv"), train::log_to_csv(&log))?;
    let mut epochs_csv = String::from("epoch,train_loss,val_loss,lr\n");
    for h in &history {
        epochs_csv.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.lr
        ));
    }
    std::fs::write(out_dir.join("epochs.csv"), epochs_csv)?;

    let manifest = RunManifest::new("train", config_hash, Some(seed), env.threads);
    finish_manifest(manifest, out_dir, started)
}

/// Load either a bare model checkpoint or a full train-state checkpoint.
pub fn load_model_any(path: &Path) -> Result<Model> {
    let (header, _) = serialize::load_checkpoint(path)?;
    match header.get("kind").and_then(|v| v.as_str()) {
        Some("model") => Model::load(path),
        Some("train_state") => Ok(load_train_checkpoint(path)?.0.model),
        other => Err(Error::Checkpoint(format!(
            "unsupported checkpoint kind {other:?}"
        ))),
    }
}

/// Last-frame predictions over sliding windows of `context_len` frames.
/// Targets start at `first_target` so sweeps over different context lengths
/// score the same frames.
pub fn evaluate(
    model: &Model,
    seqs: &[VideoSequence],
    context_len: usize,
    first_target: usize,
) -> Result<Vec<EvalRecord>> {
    if context_len == 0 || first_target + 1 < context_len {
        return Err(Error::InvalidInput {
            op: "evaluate",
            msg: format!(
                "context length {context_len} does not fit before target frame {first_target}"
            ),
        });
    }
    let bound = model.params.bind(None)?;
    let mut records = Vec::new();
    for seq in seqs {
        for f in first_target..seq.frames.len() {
            let start = f + 1 - context_len;
            let clip = Clip {
                frame_indices: (start..=f).collect(),
                stride: 1,
            };
            let features = data::clip_features(seq, &clip)?;
            let centers = data::clip_centers(seq, &clip, None);
            let out = model.forward(&bound, &features, &centers, &seq.intrinsics, None)?;
            let last = out.objects.last().expect("clip has frames");
            for (oi, est) in last.iter().enumerate() {
                let obj = &seq.frames[f].objects[oi];
                records.push(EvalRecord {
                    class_id: obj.class_id,
                    frame: f,
                    estimated: est.pose()?,
                    ground_truth: obj.pose,
                });
            }
        }
    }
    Ok(records)
}

/// Records file: a schema/intrinsics header line, then one record per line.
pub fn write_records_file(
    path: &Path,
    records: &[EvalRecord],
    intrinsics: &CameraIntrinsics,
) -> Result<()> {
    let header = serde_json::json!({
        "schema": RECORDS_SCHEMA,
        "intrinsics": intrinsics,
    });
    let text = format!("{header}\n{}", metrics::records_to_jsonl(records));
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_records_file(path: &Path) -> Result<(CameraIntrinsics, Vec<EvalRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let (header, body) = text.split_once('\n').ok_or(Error::Parse {
        line: 1,
        msg: "missing records header line".to_string(),
    })?;
    let header: serde_json::Value = serde_json::from_str(header).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let schema = header.get("schema").and_then(|s| s.as_str()).unwrap_or("");
    if schema != RECORDS_SCHEMA {
        return Err(Error::SchemaVersion {
            found: schema.to_string(),
            supported: RECORDS_SCHEMA,
        });
    }
    let intrinsics: CameraIntrinsics = serde_json::from_value(
        header
            .get("intrinsics")
            .cloned()
            .ok_or(Error::Parse {
                line: 1,
                msg: "records header lacks intrinsics".to_string(),
            })?,
    )?;
    Ok((intrinsics, metrics::records_from_jsonl(body)?))
}

/// Pre-check that every record's class exists in the registry; lists all
/// unknown ids at once.
fn check_classes(records: &[EvalRecord], models: &BTreeMap<u32, ObjectModel>) -> Result<()> {
    let mut unknown: Vec<u32> = records
        .iter()
        .map(|r| r.class_id)
        .filter(|id| !models.contains_key(id))
        .collect();
    unknown.sort_unstable();
    unknown.dedup();
    if !unknown.is_empty() {
        return Err(Error::InvalidInput {
            op: "report",
            msg: format!("records reference unknown class ids {unknown:?}"),
        });
    }
    Ok(())
}

fn write_report_outputs(
    out_dir: &Path,
    tag: &str,
    records: &[EvalRecord],
    models: &BTreeMap<u32, ObjectModel>,
    svg: bool,
) -> Result<()> {
    check_classes(records, models)?;
    let rows = metrics::per_object_report(records, models, DEFAULT_MAX_THRESHOLD, DEFAULT_CURVE_STEPS)?;
    std::fs::write(
        out_dir.join(format!("report{tag}.csv")),
        metrics::report_to_csv(&rows),
    )?;
    let mut add_errors = Vec::with_capacity(records.len());
    let mut adds_errors = Vec::with_capacity(records.len());
    for r in records {
        let model = &models[&r.class_id];
        add_errors.push(metrics::add(&r.estimated, &r.ground_truth, model)?);
        adds_errors.push(metrics::add_s(&r.estimated, &r.ground_truth, model)?);
    }
    let add_curve = metrics::accuracy_curve(&add_errors, DEFAULT_MAX_THRESHOLD, DEFAULT_CURVE_STEPS)?;
    let adds_curve =
        metrics::accuracy_curve(&adds_errors, DEFAULT_MAX_THRESHOLD, DEFAULT_CURVE_STEPS)?;
    std::fs::write(
        out_dir.join(format!("curve_add{tag}.csv")),
        metrics::curve_to_csv(&add_curve),
    )?;
    std::fs::write(
        out_dir.join(format!("curve_adds{tag}.csv")),
        metrics::curve_to_csv(&adds_curve),
    )?;
    if svg {
        std::fs::write(
            out_dir.join(format!("curves{tag}.svg")),
            metrics::curves_to_svg(&[("ADD", &add_curve), ("ADD-S", &adds_curve)]),
        )?;
    }
    Ok(())
}

/// Evaluate a checkpoint, optionally sweeping several context lengths over
/// the same target frames.
pub fn eval_cmd(
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    context_lens: &[usize],
    svg: bool,
    env: &EnvOpts,
) -> Result<RunManifest> {
    let started = Instant::now();
    let model = load_model_any(checkpoint)?;
    let (seqs, models) = load_corpus(data_dir)?;
    check_dims(&seqs, &model)?;

    let mut lens: Vec<usize> = if context_lens.is_empty() {
        vec![model.cfg.max_context]
    } else {
        context_lens.to_vec()
    };
    lens.sort_unstable();
    lens.dedup();
    for &l in &lens {
        if l == 0 || l > model.cfg.max_context {
            return Err(Error::InvalidInput {
                op: "eval",
                msg: format!(
                    "context length {l} outside 1..={} (model max_context)",
                    model.cfg.max_context
                ),
            });
        }
    }
    let first_target = lens.iter().max().expect("non-empty") - 1;

    std::fs::create_dir_all(out_dir)?;
    let intrinsics = seqs[0].intrinsics;
    for &l in &lens {
        let records = evaluate(&model, &seqs, l, first_target)?;
        let tag = format!("_ctx{l:02}");
        write_records_file(
            &out_dir.join(format!("records{tag}.jsonl")),
            &records,
            &intrinsics,
        )?;
        write_report_outputs(out_dir, &tag, &records, &models, svg)?;
    }

    let manifest = RunManifest::new(
        "eval",
        sha256_hex(&std::fs::read(checkpoint)?),
        None,
        env.threads,
    );
    finish_manifest(manifest, out_dir, started)
}

/// Merge one or more records files into a single per-object report.
pub fn report_cmd(
    records_files: &[PathBuf],
    registry: &Path,
    out_dir: &Path,
    svg: bool,
    env: &EnvOpts,
) -> Result<RunManifest> {
    let started = Instant::now();
    if records_files.is_empty() {
        return Err(Error::EmptyInput("report"));
    }
    let mut merged: Vec<EvalRecord> = Vec::new();
    let mut intrinsics: Option<CameraIntrinsics> = None;
    for file in records_files {
        let (k, mut records) = read_records_file(file)?;
        match &intrinsics {
            None => intrinsics = Some(k),
            Some(prev) if *prev != k => {
                return Err(Error::InvalidInput {
                    op: "report",
                    msg: format!(
                        "conflicting intrinsics across records files: {prev:?} vs {k:?} in {}",
                        file.display()
                    ),
                });
            }
            Some(_) => {}
        }
        merged.append(&mut records);
    }
    // deterministic merge order regardless of input file order
    merged.sort_by_key(|r| (r.class_id, r.frame));

    let models: BTreeMap<u32, ObjectModel> = geom::load_object_models(registry)?
        .into_iter()
        .map(|m| (m.class_id, m))
        .collect();
    std::fs::create_dir_all(out_dir)?;
    write_report_outputs(out_dir, "", &merged, &models, svg)?;

    let mut hasher_input = Vec::new();
    for f in records_files {
        hasher_input.extend_from_slice(f.to_string_lossy().as_bytes());
        hasher_input.push(0);
    }
    let manifest = RunManifest::new("report", sha256_hex(&hasher_input), None, env.threads);
    finish_manifest(manifest, out_dir, started)
}
