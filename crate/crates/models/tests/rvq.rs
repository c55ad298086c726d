use candle_core::{DType, Device, Tensor, Var};
use choreo_core::dataset::DanceSample;
use choreo_core::motion::SkeletonTemplate;
use choreo_core::synth::{generate_sequence, SyntheticSpec};
use choreo_models::mkrvq::{straight_through, train_rvq_on, Rvq, RvqConfig};
use choreo_models::quantizer::{dequantize, quantize_residual, Codebook, LatentSequence};
use choreo_models::ModelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn clips(range: std::ops::Range<usize>) -> Vec<DanceSample> {
    let sk = SkeletonTemplate::default();
    let spec = SyntheticSpec { n_sequences: 12, ..Default::default() };
    range
        .map(|i| {
            let s = generate_sequence(&spec, i, &sk).unwrap();
            s.slice(50, 150, s.id.clone())
        })
        .collect()
}

fn small_config(steps: usize) -> RvqConfig {
    RvqConfig {
        layers: 3,
        codebook_size: 64,
        latent_dim: 16,
        hidden: 32,
        steps,
        ..Default::default()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect()
}

#[test]
fn residual_algebra_on_random_latents() {
    let (n, d, k) = (1000, 8, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let books: Vec<Codebook> = (0..4)
        .map(|l| Codebook::new(l + 1, d, gaussian(&mut rng, k * d, 0.5f32.powi(l as i32))).unwrap())
        .collect();
    let z = LatentSequence { len: n, dim: d, values: gaussian(&mut rng, n * d, 1.0) };
    let q = quantize_residual(&z, &books).unwrap();

    for (l, book) in books.iter().enumerate() {
        let input = &q.residuals[l];
        for t in 0..n {
            // brute-force scan in double precision
            let row = input.row(t);
            let dist = |i: usize| -> f64 {
                book.entry(i).iter().zip(row).map(|(c, x)| (*x as f64 - *c as f64).powi(2)).sum()
            };
            let best = (0..k).min_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap()).unwrap();
            assert_eq!(q.tokens.ids[l][t], best, "layer {l} row {t}");
        }
    }
    for upto in 0..=books.len() {
        let sum = dequantize(&q.tokens, &books, upto).unwrap();
        for i in 0..n * d {
            let lhs = z.values[i] - sum.values[i];
            assert!((lhs - q.residuals[upto].values[i]).abs() <= 4.0 * f32::EPSILON * z.values[i].abs().max(1.0));
        }
    }
    // quantizing the code set itself leaves nothing behind
    let entries = LatentSequence { len: k, dim: d, values: books[0].entries.clone() };
    let q = quantize_residual(&entries, &books[..1]).unwrap();
    assert_eq!(q.tokens.ids[0], (0..k).collect::<Vec<_>>());
    assert!(q.residuals[1].values.iter().all(|v| *v == 0.0));
}

#[test]
fn straight_through_gradient_matches_finite_differences_at_quantized_point() {
    let data = clips(0..2);
    let (rvq, _) = train_rvq_on(&data, &small_config(0), 1, |_| {}).unwrap();
    let net = rvq.net_as(DType::F64).unwrap();
    let z = rvq.encode(&data[0].motion).unwrap();
    let zq = rvq.dequantize(&rvq.quantize(&z).unwrap().tokens, 3).unwrap();
    let shape = (1, z.len, z.dim);
    let as_t = |v: &[f32]| -> Tensor {
        let v: Vec<f64> = v.iter().map(|x| *x as f64).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().transpose(1, 2).unwrap().contiguous().unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let weights = Tensor::from_vec(
        (0..151 * z.len * 4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>(),
        (1, 151, z.len * 4),
        &Device::Cpu,
    )
    .unwrap();
    let f = |lat: &Tensor| (net.decode_motion(lat).unwrap() * &weights).unwrap().sum_all().unwrap();

    let zv = Var::from_tensor(&as_t(&z.values)).unwrap();
    let zq_t = as_t(&zq.values);
    let grads = f(&straight_through(zv.as_tensor(), &zq_t).unwrap()).backward().unwrap();
    let g = grads.get(zv.as_tensor()).unwrap();
    for _ in 0..100 {
        let dir = Tensor::from_vec(
            (0..z.len * z.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>(),
            zq_t.shape(),
            &Device::Cpu,
        )
        .unwrap();
        let eps = 1e-5;
        let plus = f(&(&zq_t + (&dir * eps).unwrap()).unwrap()).to_scalar::<f64>().unwrap();
        let minus = f(&(&zq_t - (&dir * eps).unwrap()).unwrap()).to_scalar::<f64>().unwrap();
        let fd = (plus - minus) / (2.0 * eps);
        let ad = (g * &dir).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((fd - ad).abs() <= 1e-4 * fd.abs().max(ad.abs()).max(1e-8), "{fd} vs {ad}");
    }
}

#[test]
fn shapes_follow_the_downsample_rate() {
    let data = clips(0..1);
    let (rvq, _) = train_rvq_on(&data, &small_config(0), 0, |_| {}).unwrap();
    let m40 = data[0].motion.slice(0, 40);
    let z = rvq.encode(&m40).unwrap();
    assert_eq!((z.len, z.dim), (10, 16));
    assert_eq!(rvq.decode_motion(&z, 10.0).unwrap().frames(), 40);
    let q = rvq.quantize(&z).unwrap();
    let k = rvq.decode_keypoints(&q.quantized[0], 10.0).unwrap();
    assert_eq!(k.frames(), 40);
    // 42 frames pad to 44
    assert_eq!(rvq.encode(&data[0].motion.slice(0, 42)).unwrap().len, 11);
    assert_eq!(rvq.encode(&m40).unwrap(), z);
}

#[test]
fn training_is_reproducible_and_learns() {
    let data = clips(0..4);
    let cfg = small_config(200);
    let (a, log_a) = train_rvq_on(&data, &cfg, 5, |_| {}).unwrap();
    let (b, log_b) = train_rvq_on(&data, &cfg, 5, |_| {}).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    assert!(log_a[199].total < log_a[0].total, "{:?} vs {:?}", log_a[199], log_a[0]);
    for cb in &a.codebooks {
        assert!(cb.entries.iter().all(|v| v.is_finite()));
        let live = cb.live_entries(cfg.dead_code_threshold as f32);
        assert!(2 * live >= cb.size(), "layer {} has {live} live entries", cb.layer);
    }
    let (c, _) = train_rvq_on(&data, &cfg, 6, |_| {}).unwrap();
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let data = clips(0..2);
    let (rvq, _) = train_rvq_on(&data, &small_config(20), 2, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rvq.ckpt");
    rvq.save(&path).unwrap();
    let back = Rvq::load(&path).unwrap();
    assert_eq!(back.config, rvq.config);
    assert_eq!(back.hash().unwrap(), rvq.hash().unwrap());
    let z = rvq.encode(&data[1].motion).unwrap();
    assert_eq!(back.encode(&data[1].motion).unwrap(), z);
    assert_eq!(back.decode_motion(&z, 10.0).unwrap(), rvq.decode_motion(&z, 10.0).unwrap());

    let mut archive = rvq.to_archive().unwrap();
    archive.meta["kind"] = "mct".into();
    assert!(matches!(Rvq::from_archive(&archive), Err(ModelError::CheckpointMismatch(_))));
    let mut archive = rvq.to_archive().unwrap();
    archive.meta["schema_version"] = 99.into();
    assert!(Rvq::from_archive(&archive).is_err());
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(matches!(train_rvq_on(&[], &small_config(1), 0, |_| {}), Err(ModelError::EmptyDataset)));
}
