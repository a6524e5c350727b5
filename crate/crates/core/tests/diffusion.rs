use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use udfwave::diffusion::*;
use udfwave::shapes::{closed_corpus, two_class_corpus};
use udfwave::wavelet::{decompose, WaveletPyramid};
use udfwave::{FilterBank, Grid3, UdfVolume};

#[test]
fn single_step_with_zero_denoiser_matches_hand_computation() {
    let beta = 0.3;
    let sched = make_schedule(1, beta, beta).unwrap();
    let x = sample(&ZeroDenoiser { dim: 8 }, &sched, [2, 2, 2], None, 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for v in x.data() {
        let z: f64 = StandardNormal.sample(&mut rng);
        assert!((v - z / (1.0f64 - beta).sqrt()).abs() < 1e-14);
    }
}

#[test]
fn zero_variance_oracle_collapses_to_the_mean() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mu: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
    let oracle = gaussian_oracle_denoiser(&mu, 0.0, &sched);
    let x = sample(&oracle, &sched, [3, 3, 3], None, 9).unwrap();
    let dev = x
        .data()
        .iter()
        .zip(&mu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-3, "max deviation {dev}");
}

fn oracle_loss(
    oracle: &GaussianOracle,
    sched: &DiffusionSchedule,
    mu: f64,
    var: f64,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let n = 20_000;
    for _ in 0..n {
        let t = rng.random_range(0..sched.steps());
        let z: f64 = StandardNormal.sample(&mut rng);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let x0 = mu + var.sqrt() * z;
        let xt = forward_noise_slice(&[x0], t, &[eps], sched);
        let e = oracle.predict_noise(&xt, t, None)[0];
        total += (e - eps) * (e - eps);
    }
    total / n as f64
}

#[test]
fn oracle_beats_perturbed_oracles_on_held_out_draws() {
    let sched = DiffusionSchedule::scaled_default(100).unwrap();
    let (mu, var) = (0.4, 0.3);
    let best = oracle_loss(
        &gaussian_oracle_denoiser(&[mu], var, &sched),
        &sched,
        mu,
        var,
        1,
    );
    for (m, v) in [
        (mu + 0.2, var),
        (mu - 0.2, var),
        (mu, var * 2.0),
        (mu, var * 0.5),
    ] {
        let other = oracle_loss(
            &gaussian_oracle_denoiser(&[m], v, &sched),
            &sched,
            mu,
            var,
            1,
        );
        assert!(
            best < other,
            "oracle {best} vs perturbed ({m}, {v}) {other}"
        );
    }
}

#[test]
fn conditioning_is_a_pure_input() {
    let sched = DiffusionSchedule::scaled_default(30).unwrap();
    let model = MlpDenoiser::new(8, 3, 16, &sched, 2).unwrap();
    let a = ConditionEmbedding::one_hot(0, 3).unwrap();
    let b = ConditionEmbedding::one_hot(1, 3).unwrap();
    let xa = sample(&model, &sched, [2, 2, 2], Some(a.values()), 5).unwrap();
    let xa2 = sample(&model, &sched, [2, 2, 2], Some(a.values()), 5).unwrap();
    let xb = sample(&model, &sched, [2, 2, 2], Some(b.values()), 5).unwrap();
    assert_eq!(xa, xa2);
    assert_ne!(xa, xb);
    assert!(sample(&model, &sched, [2, 2, 2], None, 5).is_err());
    assert!(sample(&model, &sched, [2, 2, 3], Some(a.values()), 5).is_err());
}

fn sphere_pyramid(bank: &FilterBank) -> (UdfVolume, WaveletPyramid) {
    let shape = closed_corpus(1, 4)[0];
    let v = UdfVolume::from_distance_fn(16, 0.1, |p| shape.distance(p)).unwrap();
    let pyr = decompose(&v, bank, 1).unwrap();
    (v, pyr)
}

#[test]
fn untrained_generator_returns_a_well_formed_volume() {
    let bank = FilterBank::preset("bior3.3").unwrap();
    let (v, pyr) = sphere_pyramid(&bank);
    let sched = DiffusionSchedule::scaled_default(30).unwrap();
    let g = Generator {
        denoiser: MlpDenoiser::new(pyr.coarse.len(), 0, 16, &sched, 3).unwrap(),
        schedule: sched,
        fine: FineModel::Zero,
        norm: Standardizer::fit(std::slice::from_ref(&pyr.coarse)).unwrap(),
        meta: GeneratorMeta::of(&pyr),
    };
    let out = g.generate(&bank, None, 0).unwrap();
    assert_eq!(out.resolution(), v.resolution());
    assert!(out
        .values()
        .iter()
        .all(|x| x.is_finite() && *x >= 0.0 && *x <= v.truncation() as f32));
    assert!(g
        .generate(&FilterBank::preset("haar").unwrap(), None, 0)
        .is_err());
}

#[test]
fn checkpoint_generator_samples_identically() {
    let bank = FilterBank::preset("haar").unwrap();
    let (_, pyr) = sphere_pyramid(&bank);
    let sched = DiffusionSchedule::scaled_default(30).unwrap();
    let pairs = vec![(pyr.coarse.clone(), pyr.fine.clone())];
    let cfg = FineConfig {
        kind: FineKind::Linear,
        ..Default::default()
    };
    let g = Generator {
        denoiser: MlpDenoiser::new(pyr.coarse.len(), 0, 16, &sched, 3)
            .unwrap()
            .with_data_var(0.4)
            .unwrap(),
        schedule: sched,
        fine: train_fine_predictor(&pairs, &cfg).unwrap(),
        norm: Standardizer::fit(std::slice::from_ref(&pyr.coarse)).unwrap(),
        meta: GeneratorMeta::of(&pyr),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.udfm");
    write_generator(&g, &path).unwrap();
    let back = read_generator(&path).unwrap();
    assert_eq!(back.denoiser.data_var(), 0.4);
    // parameters are stored as f32, so compare after one round trip
    let again = dir.path().join("h.udfm");
    write_generator(&back, &again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
    let a = back.generate(&bank, None, 11).unwrap();
    let b = read_generator(&again)
        .unwrap()
        .generate(&bank, None, 11)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn fine_predictor_beats_predicting_zero() {
    let bank = FilterBank::preset("bior6.8").unwrap();
    let pairs: Vec<(Grid3, Vec<Grid3>)> = closed_corpus(20, 21)
        .iter()
        .map(|p| {
            let v = UdfVolume::from_distance_fn(48, 0.1, |q| p.distance(q)).unwrap();
            let pyr = decompose(&v, &bank, 3).unwrap();
            (pyr.coarse, pyr.fine)
        })
        .collect();
    let (train, held) = pairs.split_at(15);
    let zero = fine_mse(&FineModel::Zero, held).unwrap();
    let linear = FineConfig {
        kind: FineKind::Linear,
        ..Default::default()
    };
    let linear = fine_mse(&train_fine_predictor(train, &linear).unwrap(), held).unwrap();
    assert!(
        linear <= zero,
        "linear held-out mse {linear} vs zero {zero}"
    );
    let mlp = fine_mse(
        &train_fine_predictor(train, &FineConfig::default()).unwrap(),
        held,
    )
    .unwrap();
    assert!(mlp <= 0.7 * zero, "mlp held-out mse {mlp} vs zero {zero}");
}

/// Class of the training volume closest in L2.
fn nearest_class(v: &UdfVolume, train: &[(UdfVolume, usize)]) -> usize {
    let d = |a: &UdfVolume, b: &UdfVolume| -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| f64::from(x - y).powi(2))
            .sum()
    };
    train
        .iter()
        .min_by(|a, b| d(v, &a.0).total_cmp(&d(v, &b.0)))
        .unwrap()
        .1
}

#[test]
fn class_condition_steers_generation() {
    let bank = FilterBank::preset("haar").unwrap();
    let train: Vec<(UdfVolume, usize)> = two_class_corpus(10, 8)
        .iter()
        .map(|(p, c)| {
            (
                UdfVolume::from_distance_fn(16, 0.1, |q| p.distance(q)).unwrap(),
                *c,
            )
        })
        .collect();
    let pyrs: Vec<WaveletPyramid> = train
        .iter()
        .map(|(v, _)| decompose(v, &bank, 1).unwrap())
        .collect();
    let coarse: Vec<Grid3> = pyrs.iter().map(|p| p.coarse.clone()).collect();
    let norm = Standardizer::fit(&coarse).unwrap();
    let data: Vec<Vec<f64>> = coarse.iter().map(|c| norm.forward(c.data())).collect();
    let conds: Vec<Vec<f64>> = train
        .iter()
        .map(|(_, c)| {
            ConditionEmbedding::one_hot(*c, 2)
                .unwrap()
                .values()
                .to_vec()
        })
        .collect();
    let sched = DiffusionSchedule::scaled_default(100).unwrap();
    let init = MlpDenoiser::new(coarse[0].len(), 2, 128, &sched, 0).unwrap();
    let cfg = TrainConfig {
        iters: 1500,
        ..Default::default()
    };
    let (denoiser, _) = train_denoiser(&data, Some(conds.as_slice()), &init, &sched, &cfg).unwrap();
    let pairs: Vec<_> = pyrs
        .iter()
        .map(|p| (p.coarse.clone(), p.fine.clone()))
        .collect();
    let fine = train_fine_predictor(
        &pairs,
        &FineConfig {
            kind: FineKind::Linear,
            ..Default::default()
        },
    )
    .unwrap();
    let g = Generator {
        schedule: sched,
        denoiser,
        fine,
        norm,
        meta: GeneratorMeta::of(&pyrs[0]),
    };
    let mut hits = 0;
    for seed in 0..20u64 {
        let class = (seed % 2) as usize;
        let c = ConditionEmbedding::one_hot(class, 2).unwrap();
        let v = g.generate(&bank, Some(&c), seed).unwrap();
        if nearest_class(&v, &train) == class {
            hits += 1;
        }
    }
    assert!(hits >= 16, "{hits}/20 matched the condition");
}

#[test]
fn single_shape_training_reaches_low_small_t_loss() {
    let bank = FilterBank::preset("haar").unwrap();
    let (_, pyr) = sphere_pyramid(&bank);
    let norm = Standardizer::fit(std::slice::from_ref(&pyr.coarse)).unwrap();
    let data = vec![norm.forward(pyr.coarse.data())];
    let sched = DiffusionSchedule::scaled_default(100).unwrap();
    let init = MlpDenoiser::new(pyr.coarse.len(), 0, 128, &sched, 1).unwrap();
    let cfg = TrainConfig {
        iters: 2000,
        ..Default::default()
    };
    let (model, trace) = train_denoiser(&data, None, &init, &sched, &cfg).unwrap();
    assert_eq!(trace.len(), 2000);
    let small_t = stratified_loss(&model, &data, None, 0..10, 200, 3).unwrap();
    assert!(small_t < 0.05, "small-t loss {small_t}");
}
