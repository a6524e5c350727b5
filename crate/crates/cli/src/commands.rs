use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use udfwave::diffusion::{
    self, train_denoiser, train_fine_predictor, ConditionEmbedding, FineConfig, FineKind,
    Generator, GeneratorMeta, MlpDenoiser, Standardizer, TrainConfig, DEFAULT_CONDITION_LEN,
};
use udfwave::geometry::{load_mesh, sample_surface, write_obj, DEFAULT_MARGIN};
use udfwave::meshing::{self, ExtractionConfig};
use udfwave::metrics::evaluate_generation;
use udfwave::volume::{self, read_volume, write_volume, DEFAULT_GAMMA, DEFAULT_TRUNCATION};
use udfwave::wavelet::{self, Trainable};
use udfwave::{FilterBank, PointCloud, UdfVolume};

use crate::manifest::{sha256_file, Manifest};
use crate::settings::Settings;
use crate::{
    CliError, DecomposeArgs, EvalGenArgs, ExtractArgs, GenerateArgs, OptimizeFilterArgs,
    ReconstructArgs, SampleUdfArgs, TrainArgs,
};

const MESH_EXTS: &[&str] = &["obj", "ply"];
const VOLUME_EXTS: &[&str] = &["udfv"];
const PYRAMID_EXTS: &[&str] = &["udfp"];
const SHAPE_EXTS: &[&str] = &["obj", "ply", "xyz"];
const MANIFEST: &str = "manifest.json";

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
}

/// Files named directly plus matching files inside named directories, in
/// sorted order. Missing paths are a data error.
fn collect_files(inputs: &[PathBuf], exts: &[&str], what: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::data(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && has_ext(f, exts))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::data(format!(
                "{}: no such file or directory",
                p.display()
            )));
        }
    }
    if out.is_empty() {
        return Err(CliError::data(format!("no {what} found in {inputs:?}")));
    }
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// `<file>.manifest.json` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    path.with_file_name(format!("{}{suffix}", stem(path)))
}

fn resolve_bank(spec: &str) -> Result<FilterBank, CliError> {
    if wavelet::PRESETS.contains(&spec) || FilterBank::preset(spec).is_ok() {
        return Ok(FilterBank::preset(spec)?);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "`{spec}` is neither a preset ({}) nor a bank file",
            wavelet::PRESETS.join(", ")
        )));
    }
    wavelet::load_bank(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn record_bank_input(manifest: &mut Manifest, spec: &str) -> Result<(), CliError> {
    let path = Path::new(spec);
    if path.is_file() {
        manifest.input(path)?;
    }
    Ok(())
}

fn read_volumes(files: &[PathBuf]) -> Result<Vec<UdfVolume>, CliError> {
    files
        .iter()
        .map(|f| read_volume(f).map_err(|e| CliError::from(e).context(f.display())))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::usage(msg()))
    }
}

/// Finishes a fan-out command: reports per-file failures and fails only
/// when nothing succeeded.
fn finish(
    manifest: &mut Manifest,
    failures: Vec<String>,
    succeeded: usize,
) -> Result<(), CliError> {
    for f in failures {
        eprintln!("warning: {f}");
        manifest.failure(f);
    }
    if succeeded == 0 {
        return Err(CliError::data("every input failed"));
    }
    Ok(())
}

pub fn sample_udf(a: SampleUdfArgs, s: &mut Settings) -> Result<(), CliError> {
    let resolution = s.get("resolution", a.resolution, 64usize)?;
    let truncation = s.get("truncation", a.truncation, DEFAULT_TRUNCATION)?;
    let margin = s.get("margin", a.margin, DEFAULT_MARGIN)?;
    let normalize = s.get("normalize", a.normalize, true)?;
    ensure(resolution >= volume::MIN_RESOLUTION, || {
        format!("resolution must be at least {}", volume::MIN_RESOLUTION)
    })?;
    ensure(truncation > 0.0, || "truncation must be positive".into())?;
    ensure((0.0..=0.4).contains(&margin), || {
        "margin must lie in [0, 0.4]".into()
    })?;
    let files = collect_files(&a.inputs, MESH_EXTS, "meshes")?;

    let results: Vec<Result<UdfVolume, CliError>> = files
        .par_iter()
        .map(|f| {
            let run = || -> udfwave::Result<UdfVolume> {
                let mut mesh = load_mesh(f, None)?;
                if normalize {
                    mesh = mesh.normalize_to_unit_cube(margin)?;
                }
                volume::sample_udf(&mesh, resolution, truncation)
            };
            run().map_err(|e| CliError::from(e).context(f.display()))
        })
        .collect();

    create_dir(&a.out)?;
    let mut manifest = Manifest::new("sample-udf", s.used());
    let (mut failures, mut ok) = (Vec::new(), 0);
    for (f, r) in files.iter().zip(results) {
        match r {
            Ok(v) => {
                manifest.input(f)?;
                let out = a.out.join(format!("{}.udfv", stem(f)));
                write_volume(&v, &out)?;
                manifest.output(&out)?;
                ok += 1;
            }
            Err(e) => failures.push(e.message),
        }
    }
    finish(&mut manifest, failures, ok)?;
    manifest.write(&a.out.join(MANIFEST))?;
    println!("wrote {ok} volume(s) to {}", a.out.display());
    Ok(())
}

fn parse_trainable(s: &str) -> Result<Trainable, CliError> {
    match s {
        "both" => Ok(Trainable::Both),
        "analysis" => Ok(Trainable::Analysis),
        "synthesis" => Ok(Trainable::Synthesis),
        _ => Err(CliError::usage(format!(
            "trainable must be both, analysis or synthesis, got `{s}`"
        ))),
    }
}

pub fn optimize_filter(a: OptimizeFilterArgs, s: &mut Settings) -> Result<(), CliError> {
    let d = wavelet::OptimizeConfig::default();
    let init_spec = s.get("init", a.init, "bior6.8".to_string())?;
    let config = wavelet::OptimizeConfig {
        iters: s.get("iters", a.iters, d.iters)?,
        step_size: s.get("step_size", a.step_size, d.step_size)?,
        beta1: s.get("beta1", a.beta1, d.beta1)?,
        beta2: s.get("beta2", a.beta2, d.beta2)?,
        batch_size: s.get("batch_size", a.batch_size, d.batch_size)?,
        gamma: s.get("gamma", a.gamma, d.gamma)?,
        far_weight: s.get("far_weight", a.far_weight, d.far_weight)?,
        levels: s.get("levels", a.levels, d.levels)?,
        seed: s.get("seed", a.seed, d.seed)?,
        holdout: s.get("holdout", a.holdout, d.holdout)?,
        trainable: parse_trainable(&s.get("trainable", a.trainable, "both".to_string())?)?,
    };
    let init = resolve_bank(&init_spec)?;
    let files = collect_files(&a.volumes, VOLUME_EXTS, "volumes")?;
    let volumes = read_volumes(&files)?;
    let result = wavelet::optimize_filters(&volumes, &init, &config)?;

    let trace_path = a
        .trace
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, "_trace.csv"));
    let mut csv = String::from("iter,train_loss,val_loss\n");
    for r in &result.trace {
        csv.push_str(&format!(
            "{},{:.12e},{:.12e}\n",
            r.iter, r.train_loss, r.val_loss
        ));
    }
    write_text(&a.out, &wavelet::bank_to_json(&result.bank))?;
    write_text(&trace_path, &csv)?;

    let mut manifest = Manifest::new("optimize-filter", s.used());
    record_bank_input(&mut manifest, &init_spec)?;
    for f in &files {
        manifest.input(f)?;
    }
    manifest.output(&a.out)?;
    manifest.output(&trace_path)?;
    manifest.write(&sidecar(&a.out))?;
    println!(
        "val loss {:.6e} -> {:.6e}; train loss {:.6e} -> {:.6e}; bank written to {}",
        result.initial_val_loss,
        result.best_val_loss,
        result.initial_train_loss,
        result.final_train_loss,
        a.out.display()
    );
    Ok(())
}

pub fn decompose(a: DecomposeArgs, s: &mut Settings) -> Result<(), CliError> {
    let levels = s.get("levels", a.levels, wavelet::DEFAULT_LEVELS)?;
    s.record("bank", &a.bank);
    let bank = resolve_bank(&a.bank)?;
    let files = collect_files(&a.volumes, VOLUME_EXTS, "volumes")?;
    let volumes = read_volumes(&files)?;
    let pyramids: Vec<_> = volumes
        .iter()
        .zip(&files)
        .map(|(v, f)| {
            wavelet::decompose(v, &bank, levels).map_err(|e| CliError::from(e).context(f.display()))
        })
        .collect::<Result<_, _>>()?;
    create_dir(&a.out)?;
    let mut manifest = Manifest::new("decompose", s.used());
    record_bank_input(&mut manifest, &a.bank)?;
    for (f, p) in files.iter().zip(&pyramids) {
        manifest.input(f)?;
        let out = a.out.join(format!("{}.udfp", stem(f)));
        wavelet::write_pyramid(p, &out)?;
        manifest.output(&out)?;
    }
    manifest.write(&a.out.join(MANIFEST))?;
    println!("wrote {} pyramid(s) to {}", pyramids.len(), a.out.display());
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs, s: &mut Settings) -> Result<(), CliError> {
    let gamma = s.get("gamma", a.gamma, DEFAULT_GAMMA)?;
    s.record("bank", &a.bank);
    let bank = resolve_bank(&a.bank)?;
    let files = collect_files(&a.pyramids, PYRAMID_EXTS, "pyramids")?;
    let mut volumes = Vec::with_capacity(files.len());
    for f in &files {
        let ctx = |e: udfwave::Error| CliError::from(e).context(f.display());
        let p = wavelet::read_pyramid(f).map_err(ctx)?;
        volumes.push(wavelet::invert(&p, &bank).map_err(ctx)?);
    }
    let mut report = Vec::new();
    if let Some(dir) = &a.reference {
        for (f, v) in files.iter().zip(&volumes) {
            let r = dir.join(format!("{}.udfv", stem(f)));
            if r.is_file() {
                let reference =
                    read_volume(&r).map_err(|e| CliError::from(e).context(r.display()))?;
                let rmse = volume::near_surface_rmse(&reference, v, gamma)?;
                report.push(format!("{}: near-surface rmse {rmse:.6e}", stem(f)));
            }
        }
    }
    create_dir(&a.out)?;
    let mut manifest = Manifest::new("reconstruct", s.used());
    record_bank_input(&mut manifest, &a.bank)?;
    for (f, v) in files.iter().zip(&volumes) {
        manifest.input(f)?;
        let out = a.out.join(format!("{}.udfv", stem(f)));
        write_volume(v, &out)?;
        manifest.output(&out)?;
    }
    manifest.write(&a.out.join(MANIFEST))?;
    for line in report {
        println!("{line}");
    }
    println!("wrote {} volume(s) to {}", volumes.len(), a.out.display());
    Ok(())
}

/// Reads `name,class` or `name,v1,...,vk` lines keyed by volume file stem.
fn read_labels(
    path: &Path,
    cond_len: usize,
) -> Result<BTreeMap<String, ConditionEmbedding>, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at =
            |e: udfwave::Error| CliError::from(e).context(format!("{}:{}", path.display(), n + 1));
        let (name, rest) = line.split_once(',').ok_or_else(|| {
            CliError::data(format!(
                "{}:{}: expected `name,label`",
                path.display(),
                n + 1
            ))
        })?;
        out.insert(
            name.trim().to_string(),
            ConditionEmbedding::parse(rest, cond_len).map_err(at)?,
        );
    }
    Ok(out)
}

pub fn train(a: TrainArgs, s: &mut Settings) -> Result<(), CliError> {
    let td = TrainConfig::default();
    let fd = FineConfig::default();
    let levels = s.get("levels", a.levels, wavelet::DEFAULT_LEVELS)?;
    let steps = s.get("steps", a.steps, diffusion::schedule::DEFAULT_STEPS)?;
    let beta_start = s.get(
        "beta_start",
        a.beta_start,
        diffusion::schedule::DEFAULT_BETA_START,
    )?;
    let beta_end = s.get(
        "beta_end",
        a.beta_end,
        diffusion::schedule::DEFAULT_BETA_END,
    )?;
    let hidden = s.get("hidden", a.hidden, diffusion::denoiser::DEFAULT_HIDDEN)?;
    let cond_len = s.get("cond_len", a.cond_len, DEFAULT_CONDITION_LEN)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let train_config = TrainConfig {
        iters: s.get("iters", a.iters, td.iters)?,
        step_size: s.get("step_size", a.step_size, td.step_size)?,
        batch_size: s.get("batch_size", a.batch_size, td.batch_size)?,
        seed,
        ema: td.ema,
    };
    let fine_config = FineConfig {
        kind: FineKind::parse(&s.get("fine", a.fine, fd.kind.name().to_string())?)?,
        ridge: fd.ridge,
        hidden: s.get("fine_hidden", a.fine_hidden, fd.hidden)?,
        iters: s.get("fine_iters", a.fine_iters, fd.iters)?,
        step_size: fd.step_size,
        batch_size: fd.batch_size,
        seed,
    };
    s.record("bank", &a.bank);
    let schedule = diffusion::make_schedule(steps, beta_start, beta_end)?;
    let bank = resolve_bank(&a.bank)?;
    let files = collect_files(&a.volumes, VOLUME_EXTS, "volumes")?;
    let labels = match &a.labels {
        Some(p) => Some(read_labels(p, cond_len)?),
        None => None,
    };
    let conditions: Option<Vec<Vec<f64>>> = match &labels {
        None => None,
        Some(map) => Some(
            files
                .iter()
                .map(|f| {
                    map.get(&stem(f))
                        .map(|c| c.values().to_vec())
                        .ok_or_else(|| CliError::data(format!("no label for {}", f.display())))
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    if let Some(c) = &conditions {
        ensure(c.iter().all(|v| v.len() == c[0].len()), || {
            "labels must share one length".into()
        })?;
    }
    let cond_dim = conditions.as_ref().map_or(0, |c| c[0].len());

    let volumes = read_volumes(&files)?;
    let pyramids: Vec<_> = volumes
        .par_iter()
        .map(|v| wavelet::decompose(v, &bank, levels))
        .collect::<udfwave::Result<_>>()?;
    let meta = GeneratorMeta::of(&pyramids[0]);
    ensure(pyramids.iter().all(|p| p.chain == meta.chain), || {
        "all volumes must share one resolution".into()
    })?;
    let coarse: Vec<_> = pyramids.iter().map(|p| p.coarse.clone()).collect();
    let norm = Standardizer::fit(&coarse)?;
    let data: Vec<Vec<f64>> = coarse.iter().map(|c| norm.forward(c.data())).collect();
    let dim = data[0].len();

    let init = MlpDenoiser::new(dim, cond_dim, hidden, &schedule, seed)?;
    let (denoiser, trace) = train_denoiser(
        &data,
        conditions.as_deref(),
        &init,
        &schedule,
        &train_config,
    )?;
    let pairs: Vec<_> = pyramids.into_iter().map(|p| (p.coarse, p.fine)).collect();
    let fine = train_fine_predictor(&pairs, &fine_config)?;
    let generator = Generator {
        schedule,
        denoiser,
        fine,
        norm,
        meta,
    };

    let mut csv = String::from("iter,loss,running\n");
    for r in &trace {
        csv.push_str(&format!("{},{:.12e},{:.12e}\n", r.iter, r.loss, r.running));
    }
    let trace_path = with_suffix(&a.out, "_loss.csv");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    diffusion::write_generator(&generator, &a.out)?;
    write_text(&trace_path, &csv)?;

    let mut manifest = Manifest::new("train", s.used());
    record_bank_input(&mut manifest, &a.bank)?;
    if let Some(p) = &a.labels {
        manifest.input(p)?;
    }
    for f in &files {
        manifest.input(f)?;
    }
    manifest.output(&a.out)?;
    manifest.output(&trace_path)?;
    manifest.write(&sidecar(&a.out))?;
    let last = trace.last().map_or(f64::NAN, |r| r.running);
    println!(
        "trained on {} volume(s), coarse {:?}, final running loss {last:.6e}; model written to {}",
        files.len(),
        generator.meta.coarse_dims(),
        a.out.display()
    );
    Ok(())
}

pub fn generate(a: GenerateArgs, s: &mut Settings) -> Result<(), CliError> {
    let count = s.get("count", a.count, 1usize)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    ensure(count > 0, || "count must be positive".into())?;
    s.record("bank", &a.bank);
    let generator = diffusion::read_generator(&a.model)
        .map_err(|e| CliError::from(e).context(a.model.display()))?;
    let bank = resolve_bank(&a.bank)?;
    let cond_dim = udfwave::diffusion::Denoiser::cond_dim(&generator.denoiser);
    let condition = match &a.condition {
        Some(text) => {
            s.record("condition", text);
            Some(ConditionEmbedding::parse(text, cond_dim)?)
        }
        None => None,
    };
    ensure(cond_dim == 0 || condition.is_some(), || {
        format!("this model is conditional; pass --condition (class index or {cond_dim} values)")
    })?;
    ensure(cond_dim > 0 || condition.is_none(), || {
        "this model is unconditional".into()
    })?;

    let volumes: Vec<UdfVolume> = (0..count as u64)
        .into_par_iter()
        .map(|i| generator.generate(&bank, condition.as_ref(), seed.wrapping_add(i)))
        .collect::<udfwave::Result<_>>()?;
    create_dir(&a.out)?;
    let mut manifest = Manifest::new("generate", s.used());
    manifest.input(&a.model)?;
    record_bank_input(&mut manifest, &a.bank)?;
    for (i, v) in volumes.iter().enumerate() {
        let out = a.out.join(format!("gen_{i:04}.udfv"));
        write_volume(v, &out)?;
        manifest.output(&out)?;
    }
    manifest.write(&a.out.join(MANIFEST))?;
    println!("wrote {count} volume(s) to {}", a.out.display());
    Ok(())
}

pub fn extract(a: ExtractArgs, s: &mut Settings) -> Result<(), CliError> {
    let d = ExtractionConfig::default();
    let config = ExtractionConfig {
        iso: s.get_opt("iso", a.iso)?,
        project_steps: s.get("project_steps", a.project_steps, d.project_steps)?,
        damping: s.get("damping", a.damping, d.damping)?,
        weld_tol: s.get_opt("weld_tol", a.weld_tol)?,
    };
    ensure(config.project_steps > 0, || {
        "project_steps must be positive".into()
    })?;
    ensure(config.damping > 0.0 && config.damping <= 1.0, || {
        "damping must lie in (0, 1]".into()
    })?;
    ensure(config.iso.is_none_or(|t| t > 0.0), || {
        "iso must be positive".into()
    })?;
    ensure(config.weld_tol.is_none_or(|t| t >= 0.0), || {
        "weld-tol must be nonnegative".into()
    })?;
    let files = collect_files(&a.volumes, VOLUME_EXTS, "volumes")?;
    let results: Vec<Result<_, CliError>> = files
        .par_iter()
        .map(|f| {
            let run = || -> udfwave::Result<_> {
                let v = read_volume(f)?;
                meshing::extract_surface(&v, &config)
            };
            run().map_err(|e| CliError::from(e).context(f.display()))
        })
        .collect();
    create_dir(&a.out)?;
    let mut manifest = Manifest::new("extract", s.used());
    let (mut failures, mut ok) = (Vec::new(), 0);
    for (f, r) in files.iter().zip(results) {
        manifest.input(f)?;
        match r {
            Ok(mesh) => {
                let out = a.out.join(format!("{}.obj", stem(f)));
                write_obj(&mesh, &out)?;
                manifest.output(&out)?;
                ok += 1;
            }
            Err(e) => failures.push(e.message),
        }
    }
    finish(&mut manifest, failures, ok)?;
    manifest.write(&a.out.join(MANIFEST))?;
    println!("wrote {ok} mesh(es) to {}", a.out.display());
    Ok(())
}

/// Point cloud of one shape file. Mesh sampling is seeded from the file
/// content, so identical files give identical clouds wherever they appear.
fn load_cloud(path: &Path, points: usize, seed: u64) -> Result<PointCloud, CliError> {
    let ctx = |e: udfwave::Error| CliError::from(e).context(path.display());
    if has_ext(path, &["xyz"]) {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        return PointCloud::parse_xyz(&text).map_err(ctx);
    }
    let digest = sha256_file(path)?;
    let content = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    let mesh = load_mesh(path, None).map_err(ctx)?;
    sample_surface(&mesh, points, seed ^ content).map_err(ctx)
}

pub fn eval_gen(a: EvalGenArgs, s: &mut Settings) -> Result<(), CliError> {
    let points = s.get("points", a.points, 2048usize)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    ensure(points > 0, || "points must be positive".into())?;
    let gen_files = collect_files(&a.generated, SHAPE_EXTS, "generated shapes")?;
    let ref_files = collect_files(&a.reference, SHAPE_EXTS, "reference shapes")?;
    let load = |files: &[PathBuf]| -> Result<Vec<PointCloud>, CliError> {
        files
            .par_iter()
            .map(|f| load_cloud(f, points, seed))
            .collect()
    };
    let generated = load(&gen_files)?;
    let reference = load(&ref_files)?;
    let report = evaluate_generation(&generated, &reference, seed)?;
    let text = format!("{report}\n{}\n", report.record());
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
        let mut manifest = Manifest::new("eval-gen", s.used());
        for f in gen_files.iter().chain(&ref_files) {
            manifest.input(f)?;
        }
        manifest.output(out)?;
        manifest.write(&sidecar(out))?;
    }
    Ok(())
}
