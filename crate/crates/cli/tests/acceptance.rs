//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Heavy criteria run at the full stated scale, so this target takes several
//! minutes in an optimized build.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udfwave::diffusion::{
    gaussian_oracle_denoiser, make_schedule, sample, train_denoiser, train_fine_predictor,
    DiffusionSchedule, FineConfig, Generator, GeneratorMeta, MlpDenoiser, Standardizer,
    TrainConfig,
};
use udfwave::geometry::write_obj;
use udfwave::meshing::{extract_surface, ExtractionConfig};
use udfwave::metrics::{chamfer, emd, evaluate_generation, mesh_chamfer, mesh_mean_distance};
use udfwave::shapes::{closed_corpus, Primitive};
use udfwave::volume::{near_surface_rmse, weight_mask};
use udfwave::wavelet::{
    decompose, decompose_grid, invert, invert_grid, loss_gradient_grid, optimize_filters,
    recon_loss, recon_loss_grid, OptimizeConfig, SourceFrame, Trainable,
};
use udfwave::{FilterBank, Grid3, PointCloud, UdfVolume, Vec3};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_grid(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Grid3 {
    Grid3::from_fn(dims, |_, _, _| rng.random_range(0.0..0.1))
}

fn wavelet_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for name in ["haar", "bior3.3", "bior6.8"] {
        let bank = FilterBank::preset(name).unwrap();
        let mut err = 0.0f64;
        for _ in 0..100 {
            let u = random_grid([16; 3], &mut rng);
            let pyr = decompose_grid(&u, &bank, 1, SourceFrame::unit(16)).unwrap();
            err = err.max(invert_grid(&pyr, &bank).unwrap().max_abs_diff(&u));
        }
        parts.push(format!("{name} {err:.2e}"));
        worst = worst.max(err);
    }
    outcome(worst < 1e-8, format!("max abs error: {}", parts.join(", ")))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for name in ["haar", "bior3.3", "bior6.8"] {
        let base = FilterBank::preset(name).unwrap();
        // away from perfect reconstruction so the gradient is not zero
        let params: Vec<f64> = base
            .params()
            .iter()
            .map(|p| p + rng.random_range(-0.05..0.05))
            .collect();
        let bank = base.with_params(&params).unwrap();
        let u = random_grid([12; 3], &mut rng);
        let w: Vec<f64> = (0..u.len()).map(|_| rng.random_range(0.01..1.0)).collect();
        let g = loss_gradient_grid(&u, &w, &bank, 2).unwrap();
        let len = bank.len();
        for b in 0..4 {
            let mut diff = 0.0;
            let mut norm = 0.0;
            for k in 0..len {
                let i = b * len + k;
                let h = 1e-5;
                let mut p = params.clone();
                p[i] += h;
                let up = recon_loss_grid(&u, &w, &bank.with_params(&p).unwrap(), 2).unwrap();
                p[i] -= 2.0 * h;
                let down = recon_loss_grid(&u, &w, &bank.with_params(&p).unwrap(), 2).unwrap();
                let fd = (up - down) / (2.0 * h);
                diff += (g.taps[b][k] - fd).powi(2);
                norm += fd * fd;
            }
            let rel = diff.sqrt() / norm.sqrt().max(1e-300);
            if rel > worst {
                worst = rel;
            }
        }
    }
    outcome(
        worst < 1e-5,
        format!("worst per-filter relative error {worst:.2e}"),
    )
}

struct BankRuns {
    haar_cd: f64,
    bior_cd: f64,
    learned_cd: f64,
    both: f64,
    analysis: f64,
    synthesis: f64,
}

fn mean_corpus_cd(corpus: &[Primitive], vols: &[UdfVolume], bank: &FilterBank) -> f64 {
    let mut total = 0.0;
    for (p, v) in corpus.iter().zip(vols) {
        let recon = invert(&decompose(v, bank, 3).unwrap(), bank).unwrap();
        let mesh = extract_surface(&recon, &ExtractionConfig::default()).unwrap();
        total += mesh_chamfer(&mesh, &p.mesh(4), 10_000, 1).unwrap();
    }
    total / corpus.len() as f64
}

fn corpus_loss(vols: &[UdfVolume], bank: &FilterBank) -> f64 {
    vols.iter()
        .map(|v| recon_loss(v, bank, &weight_mask(v, 0.05, 0.01).unwrap(), 3).unwrap())
        .sum::<f64>()
        / vols.len() as f64
}

fn bank_runs() -> BankRuns {
    let corpus = closed_corpus(10, 7);
    let vols: Vec<UdfVolume> = corpus
        .iter()
        .map(|p| UdfVolume::from_distance_fn(48, 0.1, |q| p.distance(q)).unwrap())
        .collect();
    let init = FilterBank::preset("bior6.8").unwrap();
    let mut learned = Vec::new();
    for trainable in [Trainable::Both, Trainable::Analysis, Trainable::Synthesis] {
        let cfg = OptimizeConfig {
            iters: 300,
            trainable,
            ..Default::default()
        };
        learned.push(optimize_filters(&vols, &init, &cfg).unwrap().bank);
    }
    BankRuns {
        haar_cd: mean_corpus_cd(&corpus, &vols, &FilterBank::preset("haar").unwrap()),
        bior_cd: mean_corpus_cd(&corpus, &vols, &init),
        learned_cd: mean_corpus_cd(&corpus, &vols, &learned[0]),
        both: corpus_loss(&vols, &learned[0]),
        analysis: corpus_loss(&vols, &learned[1]),
        synthesis: corpus_loss(&vols, &learned[2]),
    }
}

fn ordering(r: &BankRuns) -> Outcome {
    let ratio = r.learned_cd / r.bior_cd;
    outcome(
        r.haar_cd > r.bior_cd && r.bior_cd > r.learned_cd && ratio <= 0.8,
        format!(
            "CD haar {:.3e} > bior6.8 {:.3e} > learned {:.3e}, learned/bior6.8 = {ratio:.3}",
            r.haar_cd, r.bior_cd, r.learned_cd
        ),
    )
}

fn ablation(r: &BankRuns) -> Outcome {
    let best_single = r.analysis.min(r.synthesis);
    outcome(
        r.both <= best_single * 1.05,
        format!(
            "weighted loss both {:.3e}, analysis-only {:.3e}, synthesis-only {:.3e}",
            r.both, r.analysis, r.synthesis
        ),
    )
}

fn sampler_oracle() -> Outcome {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let (mu, std) = (0.7, 0.5);
    let oracle = gaussian_oracle_denoiser(&vec![mu; 2000], std * std, &sched);
    let x = sample(&oracle, &sched, [2000, 1, 1], None, 5).unwrap();
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let sd = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    outcome(
        (mean - mu).abs() < 0.05 && (sd / std - 1.0).abs() < 0.1,
        format!("mean {mean:.4} (target {mu}), std {sd:.4} (target {std})"),
    )
}

fn memorization() -> (bool, String) {
    let shape = Primitive::Sphere {
        center: Vec3::new(0.02, -0.01, 0.0),
        radius: 0.3,
    };
    let v = UdfVolume::from_distance_fn(16, 0.1, |q| shape.distance(q)).unwrap();
    let bank = FilterBank::preset("haar").unwrap();
    let pyr = decompose(&v, &bank, 1).unwrap();
    let norm = Standardizer::fit(std::slice::from_ref(&pyr.coarse)).unwrap();
    let data = vec![norm.forward(pyr.coarse.data())];
    let sched = DiffusionSchedule::scaled_default(100).unwrap();
    let init = MlpDenoiser::new(pyr.coarse.len(), 0, 128, &sched, 1).unwrap();
    let cfg = TrainConfig {
        iters: 2000,
        ..Default::default()
    };
    let (denoiser, _) = train_denoiser(&data, None, &init, &sched, &cfg).unwrap();
    let fine = train_fine_predictor(
        &[(pyr.coarse.clone(), pyr.fine.clone())],
        &FineConfig::default(),
    )
    .unwrap();
    let g = Generator {
        schedule: sched,
        denoiser,
        fine,
        norm,
        meta: GeneratorMeta::of(&pyr),
    };
    let rmse: Vec<f64> = (0..3)
        .map(|seed| near_surface_rmse(&v, &g.generate(&bank, None, seed).unwrap(), 0.05).unwrap())
        .collect();
    let worst = rmse.iter().copied().fold(0.0, f64::max);
    let listed: Vec<String> = rmse.iter().map(|r| format!("{r:.2e}")).collect();
    (
        worst < 0.01,
        format!("near-surface RMSE over 3 seeds [{}]", listed.join(", ")),
    )
}

fn udfwave(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_udfwave"))
        .args(args)
        .current_dir(dir)
        .env("UDFWAVE_THREADS", "2")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`udfwave {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_meshes(dir: &Path, shapes: &[Primitive]) {
    fs::create_dir_all(dir).unwrap();
    for (i, p) in shapes.iter().enumerate() {
        write_obj(&p.mesh(3), &dir.join(format!("{}_{i:02}.obj", p.kind()))).unwrap();
    }
}

/// Parses `key=value` fields out of an eval-gen record line.
fn record_field(text: &str, key: &str) -> Option<f64> {
    text.split_whitespace()
        .find_map(|f| f.strip_prefix(key)?.strip_prefix('='))
        .and_then(|v| v.parse().ok())
}

fn toy_pipeline(root: &Path) -> Result<String, String> {
    write_meshes(&root.join("meshes"), &closed_corpus(20, 3));
    let steps: [&[&str]; 5] = [
        &[
            "sample-udf",
            "meshes",
            "--out",
            "udf",
            "--resolution",
            "48",
            "--normalize",
            "false",
        ],
        &[
            "train",
            "udf",
            "--bank",
            "bior3.3",
            "--levels",
            "3",
            "--out",
            "model.udfm",
            "--steps",
            "100",
            "--iters",
            "2000",
        ],
        &[
            "generate",
            "--model",
            "model.udfm",
            "--bank",
            "bior3.3",
            "--out",
            "gen",
            "--count",
            "10",
            "--seed",
            "1",
        ],
        &["extract", "gen", "--out", "gen_mesh"],
        &[
            "eval-gen",
            "--generated",
            "gen_mesh",
            "--reference",
            "meshes",
            "--points",
            "512",
            "--seed",
            "2",
        ],
    ];
    let mut last = String::new();
    for args in steps {
        last = udfwave(root, args)?;
    }
    let line = last
        .lines()
        .find(|l| l.starts_with("mmd_cd="))
        .ok_or("no record line")?;
    let keys = [
        "mmd_cd", "mmd_emd", "cov_cd", "cov_emd", "nna_cd", "nna_emd",
    ];
    let values: Vec<f64> = keys
        .iter()
        .map(|k| record_field(line, k).ok_or(format!("missing {k}")))
        .collect::<Result<_, _>>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format!("non-finite metrics: {line}"));
    }
    if values[2] <= 0.0 || values[3] <= 0.0 {
        return Err(format!("zero coverage: {line}"));
    }
    Ok(line.to_string())
}

fn end_to_end(scratch: &Path) -> Outcome {
    let (mem_ok, mem) = memorization();
    match toy_pipeline(&scratch.join("toy")) {
        Ok(line) => outcome(mem_ok, format!("{mem}; toy pipeline: {line}")),
        Err(e) => outcome(false, format!("{mem}; toy pipeline failed: {e}")),
    }
}

fn open_disk() -> Outcome {
    let disk = Primitive::Disk {
        center: Vec3::zeros(),
        radius: 0.3,
    };
    let u = UdfVolume::from_distance_fn(64, 0.1, |p| disk.distance(p)).unwrap();
    let mesh = extract_surface(&u, &ExtractionConfig::default()).unwrap();
    let boundary = mesh.boundary_edge_count();
    let d = mesh_mean_distance(&mesh, &disk.mesh(4), 20_000, 1).unwrap();
    outcome(
        boundary > 0 && d < u.spacing(),
        format!(
            "{boundary} boundary edges, two-sided distance {d:.3e} vs spacing {:.3e}",
            u.spacing()
        ),
    )
}

// Independent brute-force metric definitions.

fn brute_cd(a: &[Vec3], b: &[Vec3]) -> f64 {
    let side = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    side(a, b) + side(b, a)
}

fn dist2(p: &Vec3, q: &Vec3) -> f64 {
    let (dx, dy, dz) = (p.x - q.x, p.y - q.y, p.z - q.z);
    dx * dx + dy * dy + dz * dz
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_emd(a: &[Vec3], b: &[Vec3], perms: &[Vec<usize>]) -> f64 {
    perms
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(i, &j)| dist2(&a[i], &b[j]).sqrt())
                .sum::<f64>()
                / a.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// (mmd, cov, 1-nna) straight from the definitions.
fn brute_set(
    g: &[Vec<Vec3>],
    r: &[Vec<Vec3>],
    d: &dyn Fn(&[Vec3], &[Vec3]) -> f64,
) -> (f64, f64, f64) {
    let mmd = r
        .iter()
        .map(|y| g.iter().map(|x| d(x, y)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / r.len() as f64;
    let mut covered = vec![false; r.len()];
    for x in g {
        let dists: Vec<f64> = r.iter().map(|y| d(x, y)).collect();
        let best = (0..r.len()).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
        covered[best] = true;
    }
    let cov = covered.iter().filter(|&&c| c).count() as f64 / r.len() as f64;
    // union with labels; nearest neighbour ties prefer reference, then lower index
    let all: Vec<(&Vec<Vec3>, usize, usize)> = r
        .iter()
        .enumerate()
        .map(|(i, c)| (c, 0, i))
        .chain(g.iter().enumerate().map(|(i, c)| (c, 1, i)))
        .collect();
    let mut correct = 0;
    for (k, (x, label, _)) in all.iter().enumerate() {
        let mut best: Option<(f64, usize, usize)> = None;
        for (m, (y, l, j)) in all.iter().enumerate() {
            if m == k {
                continue;
            }
            let cand = (d(x, y), *l, *j);
            if best.is_none_or(|b| cand.0 < b.0 || (cand.0 == b.0 && (cand.1, cand.2) < (b.1, b.2)))
            {
                best = Some(cand);
            }
        }
        if best.unwrap().1 == *label {
            correct += 1;
        }
    }
    (mmd, cov, correct as f64 / all.len() as f64)
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect()
}

fn clouds(v: &[Vec<Vec3>]) -> Vec<PointCloud> {
    v.iter()
        .map(|c| PointCloud::new(c.clone()).unwrap())
        .collect()
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut mismatches = Vec::new();
    let perms = permutations(8);
    for (trial, n) in [(0, 8), (1, 8), (2, 64), (3, 64)] {
        let g: Vec<Vec<Vec3>> = (0..3).map(|_| random_cloud(n, &mut rng)).collect();
        let r: Vec<Vec<Vec3>> = (0..3).map(|_| random_cloud(n, &mut rng)).collect();
        let report = evaluate_generation(&clouds(&g), &clouds(&r), 0).unwrap();
        let (mmd, cov, nna) = brute_set(&g, &r, &|a, b| brute_cd(a, b));
        if (report.mmd_cd, report.cov_cd, report.nna_cd) != (mmd * 1e3, cov, nna) {
            mismatches.push(format!("CD trial {trial}"));
        }
        // point-level spot checks of the two distances themselves
        let (a, b) = (
            PointCloud::new(g[0].clone()).unwrap(),
            PointCloud::new(r[0].clone()).unwrap(),
        );
        if chamfer(&a, &b).unwrap() != brute_cd(&g[0], &r[0]) {
            mismatches.push(format!("chamfer trial {trial}"));
        }
        if n == 8 {
            let (mmd, cov, nna) = brute_set(&g, &r, &|a, b| brute_emd(a, b, &perms));
            if (report.mmd_emd, report.cov_emd, report.nna_emd) != (mmd * 1e2, cov, nna) {
                mismatches.push(format!("EMD trial {trial}"));
            }
            if emd(&a, &b).unwrap() != brute_emd(&g[0], &r[0], &perms) {
                mismatches.push(format!("emd trial {trial}"));
            }
        }
    }
    let mut nna = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let g: Vec<Vec<Vec3>> = (0..20).map(|_| random_cloud(64, &mut rng)).collect();
        let r: Vec<Vec<Vec3>> = (0..20).map(|_| random_cloud(64, &mut rng)).collect();
        nna.push(
            evaluate_generation(&clouds(&g), &clouds(&r), seed)
                .unwrap()
                .nna_cd,
        );
    }
    let mean = nna.iter().sum::<f64>() / nna.len() as f64;
    outcome(
        mismatches.is_empty() && (mean - 0.5).abs() <= 0.15,
        format!(
            "oracle mismatches: {}; same-distribution 1-NNA mean {mean:.3} over 10 seeds",
            if mismatches.is_empty() {
                "none".to_string()
            } else {
                mismatches.join(", ")
            }
        ),
    )
}

fn run_seeded_pipeline(dir: &Path) -> Result<(), String> {
    write_meshes(&dir.join("meshes"), &closed_corpus(3, 5));
    let steps: [&[&str]; 8] = [
        &[
            "sample-udf",
            "meshes",
            "--out",
            "udf",
            "--resolution",
            "16",
            "--normalize",
            "false",
        ],
        &[
            "optimize-filter",
            "udf",
            "--init",
            "haar",
            "--out",
            "bank.json",
            "--iters",
            "3",
            "--levels",
            "1",
            "--batch-size",
            "2",
            "--seed",
            "4",
        ],
        &[
            "decompose",
            "udf",
            "--bank",
            "bank.json",
            "--levels",
            "1",
            "--out",
            "pyr",
        ],
        &[
            "reconstruct",
            "pyr",
            "--bank",
            "bank.json",
            "--out",
            "recon",
            "--reference",
            "udf",
        ],
        &[
            "train",
            "udf",
            "--bank",
            "bank.json",
            "--levels",
            "1",
            "--out",
            "model.udfm",
            "--steps",
            "30",
            "--iters",
            "20",
            "--hidden",
            "16",
            "--fine-iters",
            "5",
            "--seed",
            "6",
        ],
        &[
            "generate",
            "--model",
            "model.udfm",
            "--bank",
            "bank.json",
            "--out",
            "gen",
            "--count",
            "2",
            "--seed",
            "7",
        ],
        &["extract", "recon", "--out", "mesh"],
        &[
            "eval-gen",
            "--generated",
            "mesh",
            "--reference",
            "meshes",
            "--points",
            "64",
            "--seed",
            "8",
            "--out",
            "eval.txt",
        ],
    ];
    for args in steps {
        udfwave(dir, args)?;
    }
    Ok(())
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(scratch: &Path) -> Outcome {
    let (a, b) = (scratch.join("run_a"), scratch.join("run_b"));
    for d in [&a, &b] {
        if let Err(e) = run_seeded_pipeline(d) {
            return outcome(false, e);
        }
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return outcome(false, "the two runs wrote different file sets");
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", fa.len())
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

fn report(n: usize, started: Instant, o: &Outcome) -> bool {
    println!(
        "criterion {n}: {} ({:.1}s) {}",
        if o.pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        o.detail
    );
    o.pass
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--list`; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    // ACCEPTANCE_ONLY=3,6 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let scratch = tempfile::tempdir().unwrap();
    let mut all = true;

    if want(1) {
        all &= report(1, Instant::now(), &wavelet_roundtrip());
    }
    if want(2) {
        all &= report(2, Instant::now(), &gradient_check());
    }
    if want(3) || want(4) {
        let t = Instant::now();
        let runs = bank_runs();
        all &= report(3, t, &ordering(&runs));
        all &= report(4, t, &ablation(&runs));
    }
    if want(5) {
        all &= report(5, Instant::now(), &sampler_oracle());
    }
    if want(6) {
        all &= report(6, Instant::now(), &end_to_end(scratch.path()));
    }
    if want(7) {
        all &= report(7, Instant::now(), &open_disk());
    }
    if want(8) {
        all &= report(8, Instant::now(), &metrics_oracle());
    }
    if want(9) {
        all &= report(9, Instant::now(), &determinism(scratch.path()));
    }

    if all {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("some criteria failed");
        ExitCode::FAILURE
    }
}
