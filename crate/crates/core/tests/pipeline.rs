use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poserefine::dataset::{Corpus, PreparedSample, Refiner};
use poserefine::error::Error;
use poserefine::eval::{evaluate, mpjpe};
use poserefine::orientation::{residual_target, FlatResidual};
use poserefine::store::{self, Checkpoint};
use poserefine::synth::{generate_corpus, project, Split, SynthConfig};
use poserefine::updater::{init_params, RegressorConfig};
use poserefine::{Modality, PatchConfig, Pose3D, SegPalette, SkeletonTopology};

fn make_corpus(dir: &Path, n: usize, seed: u64) -> poserefine::store::Manifest {
    generate_corpus(
        dir,
        n,
        seed,
        &SynthConfig::default(),
        &SkeletonTopology::h36m17(),
        &SegPalette::default16(),
    )
    .unwrap()
}

fn zero_refiner(patch: PatchConfig) -> Refiner {
    let regressor = RegressorConfig::spatial_for(16, patch.out_res, 0);
    let mut params = init_params(&regressor).unwrap();
    params.zero_output_layer();
    Refiner::new(Checkpoint {
        regressor,
        patch,
        modality: Modality::Fused,
        params,
    })
    .unwrap()
}

#[test]
fn same_seed_gives_byte_identical_corpus() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_corpus(a.path(), 12, 4);
    make_corpus(b.path(), 12, 4);
    let ma = fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("manifest.json")).unwrap());
    for file in ["samples/000003/rgb.png", "samples/000011/init.json", "bone_stats.json"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    make_corpus(c.path(), 12, 5);
    assert_ne!(ma, fs::read(c.path().join("manifest.json")).unwrap());
}

#[test]
fn corpus_audit_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_corpus(dir.path(), 25, 9);
    let count = |s| m.samples.iter().filter(|e| e.split == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (21, 2, 2));
    assert_eq!(m.generator_seed, 9);
    assert_eq!(m.config_hash, store::config_hash(&m.config).unwrap());

    let corpus = Corpus::open(dir.path()).unwrap();
    let cam = corpus.manifest.config.camera;
    let mut train_gt = Vec::new();
    for e in &corpus.manifest.samples {
        let raw = corpus.load_raw(e).unwrap();
        assert_eq!(raw.keypoints, project(&raw.gt, &cam).unwrap());
        assert_eq!((raw.rgb.width(), raw.rgb.height()), (256, 256));
        assert_eq!((raw.seg.width(), raw.seg.height()), (256, 256));
        if e.split == Split::Train {
            train_gt.push(raw.gt);
        }
    }
    // rarity of a held-out sample is its nearest-neighbour distance to the training poses
    let e = corpus.manifest.entries(Split::Test).next().unwrap();
    let gt = corpus.load_raw(e).unwrap().gt;
    let nn = train_gt
        .iter()
        .map(|p| mpjpe(&gt, p, &corpus.topology).unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(e.rarity, nn);
    let stats = poserefine::compute_bone_stats(&train_gt, &corpus.topology).unwrap();
    assert_eq!(stats, corpus.stats);
}

#[test]
fn manifest_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path(), 6, 1);
    let victim = dir.path().join("samples/000002/seg.png");
    fs::remove_file(&victim).unwrap();
    match store::load_manifest(dir.path()) {
        Err(Error::MissingFile(p)) => assert_eq!(p, victim),
        other => panic!("expected missing-file error, got {other:?}"),
    }
    let err = Corpus::open(dir.path()).unwrap_err();
    assert!(err.to_string().contains("000002/seg.png"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path(), 6, 1);
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"orient_noise_deg\": 8.0", "\"orient_noise_deg\": 9.0", 1)).unwrap();
    assert!(matches!(store::load_manifest(dir.path()), Err(Error::Checksum(_))));
}

#[test]
fn hundred_random_poses_survive_json_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for i in 0..100 {
        let joints: Vec<[f64; 3]> = (0..17)
            .map(|_| {
                let mag = 10f64.powi(rng.random_range(-6..7));
                std::array::from_fn(|_| (rng.random::<f64>() - 0.5) * mag)
            })
            .collect();
        let pose = Pose3D::new(joints);
        let path = dir.path().join(format!("{i}.json"));
        store::save_pose(&path, &pose).unwrap();
        let back = store::load_pose(&path).unwrap();
        for (a, b) in pose.positions.iter().flatten().zip(back.positions.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

fn test_split(corpus: &Corpus) -> Vec<PreparedSample> {
    corpus
        .prepare_splits(&[Split::Val, Split::Test], &PatchConfig::default())
        .unwrap()
}

#[test]
fn zero_and_oracle_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path(), 30, 2);
    let corpus = Corpus::open(dir.path()).unwrap();
    let samples = test_split(&corpus);
    let (topo, stats, cam) = (&corpus.topology, &corpus.stats, &corpus.manifest.config.camera);

    let refiner = zero_refiner(PatchConfig::default());
    let zero = evaluate(&samples, "test", stats, topo, cam, |s| refiner.predict(&s.example.volume)).unwrap();
    assert_eq!(zero.mpjpe_refined, zero.mpjpe_initial);
    assert_eq!(zero.per_joint_refined, zero.per_joint_initial);
    for (rec, s) in zero.samples.iter().zip(&samples) {
        assert_eq!(rec.refined, s.initial.positions);
    }

    let oracle = evaluate(&samples, "test", stats, topo, cam, |s| {
        residual_target(&s.gt, &s.initial, stats, topo)
    })
    .unwrap();
    assert!(oracle.mpjpe_refined <= 1e-6, "{}", oracle.mpjpe_refined);
    assert!(oracle.mpjpe_initial > 10.0);

    // aggregation oracle: totals recomputed with plain loops
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise: Vec<FlatResidual> = samples
        .iter()
        .map(|_| FlatResidual((0..48).map(|_| rng.random_range(-0.05..0.05)).collect()))
        .collect();
    let index = |id: &str| samples.iter().position(|s| s.id == id).unwrap();
    let r = evaluate(&samples, "test", stats, topo, cam, |s| Ok(noise[index(&s.id)].clone())).unwrap();
    let mut init_sum = 0.0;
    let mut ref_sum = 0.0;
    for (s, d) in samples.iter().zip(&noise) {
        let refined = poserefine::apply_residual(&s.initial, d, stats, topo).unwrap();
        init_sum += mpjpe(&s.initial, &s.gt, topo).unwrap();
        ref_sum += mpjpe(&refined, &s.gt, topo).unwrap();
    }
    let n = samples.len() as f64;
    assert!((r.mpjpe_initial - init_sum / n).abs() < 1e-9);
    assert!((r.mpjpe_refined - ref_sum / n).abs() < 1e-9);
    assert_eq!(r.rarity_buckets.iter().map(|b| b.count).sum::<usize>(), samples.len());
    let joint_mean = r.per_joint_initial.iter().sum::<f64>() / 17.0;
    assert!((joint_mean - r.mpjpe_initial).abs() < 1e-9);
}

#[test]
fn report_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path(), 20, 3);
    let corpus = Corpus::open(dir.path()).unwrap();
    let samples = test_split(&corpus);
    let refiner = zero_refiner(PatchConfig::default());
    let r = evaluate(
        &samples,
        "test",
        &corpus.stats,
        &corpus.topology,
        &corpus.manifest.config.camera,
        |s| refiner.predict(&s.example.volume),
    )
    .unwrap();
    let path = dir.path().join("report.json");
    r.save(&path).unwrap();
    assert_eq!(poserefine::eval::EvalReport::load(&path).unwrap(), r);
    let table = r.to_table();
    assert!(table.contains("MPJPE (mm)"));
    assert!(table.contains("right_ankle"));
}
