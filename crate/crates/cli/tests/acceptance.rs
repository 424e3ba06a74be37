//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 5`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poserefine::dataset::{Corpus, PreparedSample, Refiner};
use poserefine::eval::{evaluate, EvalReport};
use poserefine::store::{self, Checkpoint};
use poserefine::synth::{generate_corpus, sample_pose, PosePrior, Split, SynthConfig};
use poserefine::updater::{init_params, train, Regressor, RegressorConfig, TrainingConfig};
use poserefine::{
    apply_residual, encode, limb_box, reconstruct, residual_target, root_relative, unnormalize, BoneStats,
    Modality, PatchConfig, Pose3D, SegPalette, SkeletonTopology,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_rel_error(a: &Pose3D, b: &Pose3D) -> f64 {
    let scale = b.positions.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    a.positions
        .iter()
        .flatten()
        .zip(b.positions.iter().flatten())
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

fn random_pose(rng: &mut ChaCha8Rng, topo: &SkeletonTopology) -> Pose3D {
    let lengths: Vec<f64> = (0..topo.limb_count()).map(|_| rng.random_range(50.0..500.0)).collect();
    let pose = sample_pose(rng, &lengths, &PosePrior::h36m17(), topo).unwrap();
    let offset = std::array::from_fn(|_| rng.random_range(-3000.0..3000.0));
    pose.translated(offset)
}

fn random_stats(rng: &mut ChaCha8Rng, topo: &SkeletonTopology) -> BoneStats {
    BoneStats::new((0..topo.limb_count()).map(|_| rng.random_range(80.0..450.0)).collect()).unwrap()
}

fn orientation_round_trip() -> Outcome {
    let topo = SkeletonTopology::h36m17();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let pose = random_pose(&mut rng, &topo);
        let stats = random_stats(&mut rng, &topo);
        let orient = encode(&pose, &stats, &topo).map_err(|e| e.to_string())?;
        let disp = unnormalize(&orient, &stats).map_err(|e| e.to_string())?;
        let back = reconstruct(&disp, [0.0; 3], &topo).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_error(&back, &root_relative(&pose, &topo)));
    }
    let took = start.elapsed();
    check(
        worst < 1e-9 && took < Duration::from_secs(5),
        format!("max rel error {worst:.2e}, {took:.2?}"),
    )
}

fn residual_oracle() -> Outcome {
    let topo = SkeletonTopology::h36m17();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let gt = random_pose(&mut rng, &topo);
        let initial = random_pose(&mut rng, &topo);
        let stats = random_stats(&mut rng, &topo);
        let delta = residual_target(&gt, &initial, &stats, &topo).map_err(|e| e.to_string())?;
        let refined = apply_residual(&initial, &delta, &stats, &topo).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_error(&root_relative(&refined, &topo), &root_relative(&gt, &topo)));
    }
    check(worst < 1e-9, format!("max rel error {worst:.2e}"))
}

fn gradient_check() -> Outcome {
    let limbs = SkeletonTopology::h36m17().prefix(5).map_err(|e| e.to_string())?.limb_count();
    let cfg = RegressorConfig::default_for(limbs, 8, 4);
    let params = init_params(&cfg).map_err(|e| e.to_string())?;
    let net = Regressor::new(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..net.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..cfg.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    // L(p+) - L(p-) summed per output as (o+ - o-)(o+ + o- - 2t), so the
    // difference is not lost to cancellation between two O(1) losses
    let loss_diff = |up: &[f64], down: &[f64]| -> f64 {
        let a = net.run(up, &x).unwrap();
        let b = net.run(down, &x).unwrap();
        a.iter().zip(&b).zip(&target).map(|((a, b), t)| (a - b) * (a + b - 2.0 * t)).sum()
    };
    let start = Instant::now();
    let (_, grad) = net.loss_and_grad(&params.values, &x, &target).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut up = params.values.clone();
    let mut down = params.values.clone();
    let mut worst = 0.0f64;
    for i in 0..up.len() {
        let orig = params.values[i];
        up[i] = orig + h;
        down[i] = orig - h;
        let fd = loss_diff(&up, &down) / (2.0 * h);
        up[i] = orig;
        down[i] = orig;
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
    }
    let took = start.elapsed();
    check(
        worst < 1e-5 && took < Duration::from_secs(60),
        format!(
            "{limbs} limbs, {} channels, {} params, max rel error {worst:.2e}, {took:.2?}",
            cfg.input_channels,
            up.len()
        ),
    )
}

fn patch_goldens(corpus: &Corpus, samples: &[PreparedSample]) -> Outcome {
    let cases = [
        ([100.0, 100.0], [110.0, 120.0], 64.0, [105.0, 110.0]),
        ([50.0, 50.0], [50.0, 50.0], 64.0, [50.0, 50.0]),
        ([0.0, 0.0], [100.0, 40.0], 230.0, [50.0, 20.0]),
    ];
    for (a, b, side, center) in cases {
        let bx = limb_box(a, b, 28.0, 2.3).map_err(|e| e.to_string())?;
        if bx.side != side || bx.center != center {
            return Err(format!("limb_box({a:?}, {b:?}) gave side {} centre {:?}", bx.side, bx.center));
        }
    }
    let allowed = corpus.palette.allowed_bytes();
    let mut pixels = 0usize;
    for s in samples {
        for k in 0..corpus.topology.limb_count() {
            for px in s.example.volume.limb_patch(k, true).to_rgb8().chunks_exact(3) {
                if !allowed.contains(&[px[0], px[1], px[2]]) {
                    return Err(format!("sample {} limb {k}: non-palette colour {px:?}", s.id));
                }
                pixels += 1;
            }
        }
    }
    Ok(format!("{} box cases exact, {pixels} seg patch pixels all in palette", cases.len()))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_poserefine"))
}

fn run(cmd: &mut Command) -> Result<(), String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn zero_residual_identity(corpus: &Corpus, work: &Path) -> Outcome {
    let patch = PatchConfig::default();
    let regressor = RegressorConfig::spatial_for(corpus.topology.limb_count(), patch.out_res, 0);
    let mut params = init_params(&regressor).map_err(|e| e.to_string())?;
    params.zero_output_layer();
    let ckpt = work.join("zero.ckpt");
    let checkpoint = Checkpoint {
        regressor,
        patch,
        modality: Modality::Fused,
        params,
    };
    store::save_checkpoint(&ckpt, &checkpoint).map_err(|e| e.to_string())?;
    let out = work.join("refined");
    run(bin()
        .args(["refine", "--split", "test", "--corpus"])
        .arg(&corpus.dir)
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out))?;
    let mut files = 0;
    for e in corpus.manifest.entries(Split::Test) {
        let refined = store::load_pose(&out.join(format!("{}.json", e.id))).map_err(|e| e.to_string())?;
        let initial = store::load_pose(&corpus.dir.join(&e.init)).map_err(|e| e.to_string())?;
        let same = refined.positions.len() == initial.positions.len()
            && refined
                .positions
                .iter()
                .flatten()
                .zip(initial.positions.iter().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("sample {} differs from its initial pose", e.id));
        }
        files += 1;
    }
    let report = work.join("zero_report.json");
    run(bin()
        .args(["eval", "--split", "test", "--corpus"])
        .arg(&corpus.dir)
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--out-report")
        .arg(&report))?;
    let r = EvalReport::load(&report).map_err(|e| e.to_string())?;
    check(
        r.mpjpe_refined == r.mpjpe_initial,
        format!("{files} pose files identical, mpjpe {} / {}", r.mpjpe_initial, r.mpjpe_refined),
    )
}

fn determinism(work: &Path) -> Outcome {
    let mut artefacts = Vec::new();
    for round in 0..2 {
        let dir = work.join(format!("det{round}"));
        let corpus = dir.join("corpus");
        let ckpt = dir.join("model.ckpt");
        let report = dir.join("report.json");
        run(bin().args(["gen", "--n", "80", "--seed", "11", "--out"]).arg(&corpus))?;
        run(bin()
            .args(["train", "--epochs", "3", "--seed", "5", "--corpus"])
            .arg(&corpus)
            .arg("--out-ckpt")
            .arg(&ckpt))?;
        run(bin()
            .arg("eval")
            .arg("--corpus")
            .arg(&corpus)
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--out-report")
            .arg(&report))?;
        let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
        artefacts.push([read(corpus.join("manifest.json"))?, read(ckpt)?, read(report)?]);
    }
    let names = ["manifest", "checkpoint", "report"];
    let differing: Vec<&str> = names
        .iter()
        .zip(artefacts[0].iter().zip(&artefacts[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(n, _)| *n)
        .collect();
    let sizes: Vec<String> = names.iter().zip(&artefacts[0]).map(|(n, a)| format!("{n} {} B", a.len())).collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("identical across two runs ({})", sizes.join(", "))
        } else {
            format!("differs across runs: {}", differing.join(", "))
        },
    )
}

struct Run {
    modality: Modality,
    seed: u64,
    report: EvalReport,
    took: Duration,
}

fn train_and_evaluate(
    corpus: &Corpus,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    test_set: &[PreparedSample],
    modality: Modality,
    seed: u64,
) -> Result<Run, String> {
    let start = Instant::now();
    let patch = PatchConfig::default();
    let regressor = RegressorConfig::spatial_for(corpus.topology.limb_count(), patch.out_res, seed);
    let cfg = TrainingConfig {
        seed,
        modality,
        ..TrainingConfig::desk_scale()
    };
    let outcome = train(train_set, val_set, &regressor, &cfg).map_err(|e| e.to_string())?;
    let refiner = Refiner::new(Checkpoint {
        regressor,
        patch,
        modality,
        params: outcome.params,
    })
    .map_err(|e| e.to_string())?;
    let report = evaluate(
        test_set,
        "test",
        &corpus.stats,
        &corpus.topology,
        &corpus.manifest.config.camera,
        |s| refiner.predict(&s.example.volume),
    )
    .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    eprintln!(
        "  {modality:?} seed {seed}: mpjpe {:.2} -> {:.2} in {took:.1?}",
        report.mpjpe_initial, report.mpjpe_refined
    );
    Ok(Run {
        modality,
        seed,
        report,
        took,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn refined_of(runs: &[Run], m: Modality) -> Vec<f64> {
    runs.iter().filter(|r| r.modality == m).map(|r| r.report.mpjpe_refined).collect()
}

fn end_to_end(runs: &[Run]) -> Outcome {
    let first = runs
        .iter()
        .find(|r| r.modality == Modality::Fused && r.seed == 0)
        .ok_or("no fused run")?;
    let ratio = first.report.mpjpe_refined / first.report.mpjpe_initial;
    check(
        ratio <= 0.8 && first.took < Duration::from_secs(15 * 60),
        format!(
            "mpjpe {:.2} -> {:.2} mm, ratio {ratio:.3} (<= 0.8), {:.1?}",
            first.report.mpjpe_initial, first.report.mpjpe_refined, first.took
        ),
    )
}

fn modality_ablation(runs: &[Run]) -> Outcome {
    let fused = median(refined_of(runs, Modality::Fused));
    let rgb = median(refined_of(runs, Modality::RgbOnly));
    let seg = median(refined_of(runs, Modality::SegOnly));
    let bound = rgb.min(seg) * 1.02;
    check(
        fused <= bound,
        format!("median refined mpjpe: fused {fused:.2}, rgb {rgb:.2}, seg {seg:.2}; bound {bound:.2}"),
    )
}

fn rarity_stratification(runs: &[Run]) -> Outcome {
    let fused: Vec<&Run> = runs.iter().filter(|r| r.modality == Modality::Fused).collect();
    let mut top = Vec::new();
    let mut overall = Vec::new();
    for r in &fused {
        let bucket = r.report.rarity_buckets.last().ok_or("no rarity buckets")?;
        top.push(bucket.mpjpe.relative_improvement());
        overall.push(r.report.overall().relative_improvement());
    }
    let (top, overall) = (median(top), median(overall));
    check(
        top >= 0.9 * overall,
        format!("median relative improvement: top bucket {top:.3}, overall {overall:.3} (need >= {:.3})", 0.9 * overall),
    )
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {n}. {name}: {detail}");
        results.push((n, name, outcome));
    };

    if wanted(1) {
        record(1, "orientation round trip", orientation_round_trip());
    }
    if wanted(3) {
        record(3, "residual oracle", residual_oracle());
    }
    if wanted(4) {
        record(4, "gradient check", gradient_check());
    }

    let work = tempfile::tempdir().expect("temp dir");
    let needs_corpus = [2, 5, 6, 7, 8].iter().any(|&n| wanted(n));
    if needs_corpus {
        let dir = work.path().join("corpus");
        let start = Instant::now();
        let built = generate_corpus(
            &dir,
            2000,
            0,
            &SynthConfig::default(),
            &SkeletonTopology::h36m17(),
            &SegPalette::default16(),
        )
        .and_then(|_| Corpus::open(&dir))
        .and_then(|c| {
            let samples = c.prepare_splits(&[Split::Train, Split::Val, Split::Test], &PatchConfig::default())?;
            Ok((c, samples))
        });
        match built {
            Ok((corpus, samples)) => {
                eprintln!("  corpus of 2000 samples ready in {:.1?}", start.elapsed());
                let of = |s: Split| -> Vec<PreparedSample> { samples.iter().filter(|p| p.split == s).cloned().collect() };
                let (train_set, val_set, test_set) = (of(Split::Train), of(Split::Val), of(Split::Test));
                if wanted(2) {
                    record(2, "zero residual identity", zero_residual_identity(&corpus, work.path()));
                }
                if wanted(5) {
                    record(5, "patch geometry", patch_goldens(&corpus, &test_set));
                }
                let mut plan = Vec::new();
                if wanted(6) || wanted(7) || wanted(8) {
                    plan.push((Modality::Fused, 0));
                }
                if wanted(7) || wanted(8) {
                    plan.extend([(Modality::Fused, 1), (Modality::Fused, 2)]);
                }
                if wanted(7) {
                    for seed in 0..3 {
                        plan.extend([(Modality::RgbOnly, seed), (Modality::SegOnly, seed)]);
                    }
                }
                let runs: Result<Vec<Run>, String> = plan
                    .into_iter()
                    .map(|(m, seed)| train_and_evaluate(&corpus, &train_set, &val_set, &test_set, m, seed))
                    .collect();
                match runs {
                    Ok(runs) => {
                        if wanted(6) {
                            record(6, "end-to-end improvement", end_to_end(&runs));
                        }
                        if wanted(7) {
                            record(7, "modality ablation", modality_ablation(&runs));
                        }
                        if wanted(8) {
                            record(8, "rarity stratification", rarity_stratification(&runs));
                        }
                    }
                    Err(e) => {
                        for (n, name) in [(6, "end-to-end improvement"), (7, "modality ablation"), (8, "rarity stratification")] {
                            if wanted(n) {
                                record(n, name, Err(e.clone()));
                            }
                        }
                    }
                }
            }
            Err(e) => {
                for (n, name) in [
                    (2, "zero residual identity"),
                    (5, "patch geometry"),
                    (6, "end-to-end improvement"),
                    (7, "modality ablation"),
                    (8, "rarity stratification"),
                ] {
                    if wanted(n) {
                        record(n, name, Err(format!("corpus generation failed: {e}")));
                    }
                }
            }
        }
    }
    if wanted(9) {
        record(9, "determinism", determinism(work.path()));
    }

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
