//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fleetmap_core::agent::{run_agent, AgentConfig};
use fleetmap_core::evaluation::{
    ate_rmse, geometry_metrics, icp_align, IcpConfig, NnIndex, PointCloud, Trajectory, DEFAULT_METRIC_THRESHOLD,
};
use fleetmap_core::geometry::{normalize_ray, ray_sq_error, Sim3, Tangent};
use fleetmap_core::keyframing::KeyframeId;
use fleetmap_core::pipeline::{overlapping_scene, run_system, RunConfig, RunStatus};
use fleetmap_core::pointmap::{CanonicalPointmap, ConfidenceMap, Pointmap};
use fleetmap_core::predictor::{NoiseModel, OraclePredictor, SceneConfig, SyntheticScene};
use fleetmap_core::server::{Server, ServerConfig};
use fleetmap_core::tracking::{residual, residual_jacobian};
use nalgebra::{SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_tangent(rng: &mut ChaCha8Rng) -> Tangent {
    let mut v = [0.0; 7];
    for (i, x) in v.iter_mut().enumerate() {
        *x = match i {
            0..=2 => rng.random_range(-2.0..2.0),
            3..=5 => rng.random_range(-1.5..1.5),
            _ => rng.random_range(-1.0..1.0),
        };
    }
    Tangent::from_slice(&v)
}

fn random_point(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn lie_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_log = 0.0f64;
    let mut worst_hom = 0.0f64;
    for _ in 0..1000 {
        let tau = random_tangent(&mut rng);
        worst_log = worst_log.max((Sim3::exp(&tau).log().0 - tau.0).amax());
        let (a, b) = (Sim3::exp(&random_tangent(&mut rng)), Sim3::exp(&random_tangent(&mut rng)));
        let x = random_point(&mut rng, 5.0);
        worst_hom = worst_hom.max((a.compose(&b).act(&x) - a.act(&b.act(&x))).norm());
    }
    let mut worst_ray = 0.0f64;
    for _ in 0..10_000 {
        let (p, q) = (random_point(&mut rng, 3.0), random_point(&mut rng, 3.0));
        let theta = p.cross(&q).norm().atan2(p.dot(&q));
        let e = ray_sq_error(&normalize_ray(&p).unwrap(), &normalize_ray(&q).unwrap());
        worst_ray = worst_ray.max((e - 2.0 * (1.0 - theta.cos())).abs());
    }
    outcome(
        worst_log < 1e-9 && worst_hom < 1e-9 && worst_ray < 1e-12,
        format!("exp/log {worst_log:.1e}, compose/act {worst_hom:.1e} m, ray identity {worst_ray:.1e}"),
    )
}

fn jacobian_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = Sim3::exp(&Tangent::from_slice(&[
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.2..0.2),
        ]));
        let source = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..4.0));
        let target = source + random_point(&mut rng, 0.2);
        let dist_weight = 0.05;
        let analytic = residual_jacobian(&t.act(&source), dist_weight);
        let mut numeric = SMatrix::<f64, 4, 7>::zeros();
        for i in 0..7 {
            let mut d = [0.0; 7];
            d[i] = h;
            let plus = Sim3::exp(&Tangent::from_slice(&d)).compose(&t);
            d[i] = -h;
            let minus = Sim3::exp(&Tangent::from_slice(&d)).compose(&t);
            let col = (residual(&target, &plus.act(&source), dist_weight)
                - residual(&target, &minus.act(&source), dist_weight))
                / (2.0 * h);
            numeric.set_column(i, &col);
        }
        worst = worst.max((analytic - numeric).norm() / numeric.norm().max(1e-12));
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.2e} over 100 states"))
}

fn frames(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}

fn gt_trajectory(scene: &SyntheticScene, agent: usize, offset: f64) -> Vec<(f64, Sim3)> {
    scene.trajectories[agent].iter().enumerate().map(|(i, p)| (offset + i as f64, *p)).collect()
}

fn noiseless_single_agent() -> Outcome {
    let scene = Arc::new(SyntheticScene::build(&SceneConfig::demo_loop(200)).unwrap());
    let o = OraclePredictor::new(scene.clone(), NoiseModel::noiseless(), 1);
    let out = run_agent(&o, 0, &frames(200), &AgentConfig::default()).unwrap();
    let est = Trajectory::from_pairs(out.frame_poses().into_iter().map(|(f, p)| (f as f64, p))).unwrap();
    let gt = Trajectory::from_pairs(gt_trajectory(&scene, 0, 0.0)).unwrap();
    let ate = ate_rmse(&est, &gt).unwrap();
    let increases = out.stats.energy_increases;
    outcome(
        ate < 1e-3 && increases == 0,
        format!(
            "ATE {ate:.2e} m, {increases} energy increases over {} iterations, {} keyframes, {} loop edges",
            out.stats.tracking_iterations, out.stats.keyframes, out.stats.loop_edges
        ),
    )
}

fn drift_reduction() -> Outcome {
    let scene = Arc::new(SyntheticScene::build(&SceneConfig::demo_loop(200)).unwrap());
    let gt = Trajectory::from_pairs(gt_trajectory(&scene, 0, 0.0)).unwrap();
    let results: Vec<(f64, f64)> = std::thread::scope(|s| {
        let runs: Vec<_> = (1..=5u64)
            .map(|seed| {
                let (scene, gt) = (scene.clone(), &gt);
                s.spawn(move || {
                    let noise = NoiseModel { depth_sigma: 0.01, ..Default::default() };
                    let o = OraclePredictor::new(scene, noise, seed);
                    let ate = |disable| {
                        let cfg = AgentConfig { disable_local_optimization: disable, ..Default::default() };
                        let out = run_agent(&o, 0, &frames(200), &cfg).unwrap();
                        let est = Trajectory::from_pairs(out.frame_poses().into_iter().map(|(f, p)| (f as f64, p))).unwrap();
                        ate_rmse(&est, gt).unwrap()
                    };
                    (ate(false), ate(true))
                })
            })
            .collect();
        runs.into_iter().map(|r| r.join().unwrap()).collect()
    });
    let wins = results.iter().filter(|(with, without)| with < without).count();
    let detail = results.iter().map(|(a, b)| format!("{:.4}<{:.4}", a, b)).collect::<Vec<_>>().join(" ");
    outcome(wins == 5, format!("{wins}/5 seeds improved (ATE m, with<without: {detail})"))
}

fn drift_for(seed: u64, agent: u32) -> [f64; 7] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + agent as u64);
    let mut d = [0.0; 7];
    for (i, x) in d.iter_mut().enumerate() {
        let r = if i < 3 { 0.004 } else if i < 6 { 0.005 } else { 0.003 };
        *x = rng.random_range(-r..r);
    }
    d
}

struct FusionRun {
    inter_edges: usize,
    pre: f64,
    post: f64,
    relative_scale: f64,
}

fn fuse_two_agents(seed: u64, scale: f64, noise: NoiseModel) -> FusionRun {
    let n = 80;
    let scene = Arc::new(SyntheticScene::build(&overlapping_scene(2, n)).unwrap());
    let o = OraclePredictor::new(scene.clone(), noise, seed).with_agent_scale(1, scale);
    let mut server = Server::new(&o, ServerConfig::default());
    for agent in 0..2 {
        let cfg = AgentConfig { drift: Some(drift_for(seed, agent)), ..Default::default() };
        server.collect(run_agent(&o, agent, &frames(n), &cfg).unwrap().submap).unwrap();
    }
    let fusion = server.fuse().unwrap();
    let combined = |poses: &BTreeMap<KeyframeId, Sim3>| {
        let est = (0..2u32).flat_map(|a| {
            server.trajectory(a, poses).into_iter().map(move |(f, p)| (a as f64 * 1e4 + f as f64, p))
        });
        Trajectory::from_pairs(est).unwrap()
    };
    let gt = Trajectory::from_pairs((0..2).flat_map(|a| gt_trajectory(&scene, a, a as f64 * 1e4))).unwrap();
    let rel = fusion.poses[&KeyframeId::new(0, 0)].inverse().compose(&fusion.poses[&KeyframeId::new(1, 0)]);
    FusionRun {
        inter_edges: fusion.report.inter_loop_edges,
        pre: ate_rmse(&combined(&fusion.initial_poses), &gt).unwrap(),
        post: ate_rmse(&combined(&fusion.poses), &gt).unwrap(),
        relative_scale: rel.scale(),
    }
}

fn two_agent_fusion() -> Outcome {
    let noise = NoiseModel { depth_sigma: 0.01, ..Default::default() };
    let runs: Vec<FusionRun> = std::thread::scope(|s| {
        let hs: Vec<_> = (1..=5u64).map(|seed| s.spawn(move || fuse_two_agents(seed, 1.0, noise))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let linked = runs.iter().filter(|r| r.inter_edges >= 1).count();
    let improved = runs.iter().filter(|r| r.post < r.pre).count();
    let scaled = fuse_two_agents(1, 1.05, NoiseModel::noiseless());
    // agent 1 sees the world 1.05 times larger, so its frame is 1/1.05 of agent 0's
    let scale_err = (scaled.relative_scale * 1.05 - 1.0).abs();
    let detail = runs.iter().map(|r| format!("{:.4}->{:.4}", r.pre, r.post)).collect::<Vec<_>>().join(" ");
    outcome(
        linked == 5 && improved == 5 && scaled.inter_edges >= 1 && scale_err < 0.01,
        format!(
            "inter-loop edges on {linked}/5, ATE improved on {improved}/5 (m: {detail}); relative scale error {:.3}%",
            scale_err * 100.0
        ),
    )
}

fn fusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (h, w) = (4, 5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let steps = rng.random_range(1..=50);
        let mut canon = CanonicalPointmap::empty(h, w);
        let mut sum = vec![Vector3::zeros(); h * w];
        let mut weight = vec![0.0; h * w];
        for _ in 0..steps {
            let t = Sim3::exp(&Tangent::from_slice(&[
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.3..0.3),
            ]));
            let mut pm = Pointmap::new_masked(h, w);
            let mut conf = ConfidenceMap::zeros(h, w);
            for idx in 0..h * w {
                if rng.random::<f64>() < 0.8 {
                    let x = random_point(&mut rng, 4.0);
                    let c = rng.random_range(0.05..3.0);
                    pm.set(idx, Some(x));
                    conf.set(idx, c);
                    sum[idx] += t.act(&x) * c;
                    weight[idx] += c;
                }
            }
            canon.fuse(&pm, &conf, &t).unwrap();
        }
        for idx in 0..h * w {
            if weight[idx] > 0.0 {
                worst = worst.max((canon.points.point(idx) - sum[idx] / weight[idx]).norm());
            } else {
                assert!(!canon.points.is_valid(idx));
            }
        }
    }
    outcome(worst < 1e-9, format!("max deviation {worst:.1e} m over 200 sequences of up to 50 steps"))
}

fn metrics_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let grid = |offset: f64| {
        PointCloud::from_points(
            (0..60).flat_map(|i| (0..60).map(move |j| Vector3::new(i as f64 * 0.02, j as f64 * 0.02, offset))).collect(),
        )
    };
    let est = PointCloud::from_points((0..1500).map(|_| random_point(&mut rng, 1.0)).collect());
    let gt = PointCloud::from_points((0..1500).map(|_| random_point(&mut rng, 1.0)).collect());
    let m = geometry_metrics(&est, &gt, DEFAULT_METRIC_THRESHOLD).unwrap();
    let mean_exact = m.chamfer == (m.accuracy + m.completion) / 2.0;

    let plane = grid(0.0);
    let mut with_outlier = plane.clone();
    with_outlier.points.push(Vector3::new(10.0, 10.0, 10.0));
    let o = geometry_metrics(&with_outlier, &plane, DEFAULT_METRIC_THRESHOLD).unwrap();
    let outlier_excluded = o.accuracy == 0.0 && o.completion == 0.0;

    let cloud: Vec<Vector3<f64>> = (0..2000).map(|_| random_point(&mut rng, 1.0)).collect();
    let index = NnIndex::new(&cloud);
    let mut nn_mismatches = 0;
    for _ in 0..2000 {
        let q = random_point(&mut rng, 1.2);
        let brute = cloud.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
        let (_, d) = index.nearest(&q).unwrap();
        if (d - brute).abs() > 1e-12 {
            nn_mismatches += 1;
        }
    }

    let source = PointCloud::from_points((0..2000).map(|_| random_point(&mut rng, 1.0)).collect());
    let shift = Vector3::new(0.05, 0.0, 0.0);
    let target = source.transformed(&Sim3::from_translation(shift));
    let t = icp_align(&source, &target, &Sim3::identity(), &IcpConfig::default()).unwrap();
    let icp_err = (t.translation() - shift).norm().max((t.scale() - 1.0).abs());

    outcome(
        mean_exact && outlier_excluded && nn_mismatches == 0 && icp_err < 1e-6,
        format!(
            "chamfer mean exact: {mean_exact}, 10 m outlier excluded: {outlier_excluded}, \
             NN mismatches vs brute force: {nn_mismatches}/2000, ICP 5 cm offset error {icp_err:.1e} m"
        ),
    )
}

fn dense_geometry() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        seed: 1,
        output: dir.path().to_path_buf(),
        scene: Some(overlapping_scene(2, 80)),
        ..Default::default()
    };
    let report = run_system(&cfg).unwrap();
    let m = report.metrics.and_then(|m| m.geometry);
    match m {
        Some(g) => outcome(
            report.status == RunStatus::Ok && g.chamfer < 0.01,
            format!("chamfer {:.2e} m (accuracy {:.2e}, completion {:.2e})", g.chamfer, g.accuracy, g.completion),
        ),
        None => outcome(false, "no geometry metrics produced".into()),
    }
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = RunConfig {
        seed: 9,
        output: a.path().to_path_buf(),
        scene: Some(overlapping_scene(2, 50)),
        noise: NoiseModel { depth_sigma: 0.01, ..Default::default() },
        ..Default::default()
    };
    run_system(&cfg).unwrap();
    cfg.output = b.path().to_path_buf();
    run_system(&cfg).unwrap();
    let mut compared = 0;
    let mut differing = vec![];
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        let n = name.to_string_lossy();
        if !(n.ends_with(".tum") || n.ends_with(".ply")) {
            continue;
        }
        compared += 1;
        if fs::read(a.path().join(&name)).unwrap() != fs::read(b.path().join(&name)).unwrap() {
            differing.push(n.into_owned());
        }
    }
    outcome(
        compared >= 5 && differing.is_empty(),
        format!("{compared} TUM/PLY files compared, differing: {differing:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("lie-group suite", lie_suite, Duration::from_secs(5)),
        ("tracking jacobian vs finite differences", jacobian_fd, Duration::from_secs(10)),
        ("noiseless single-agent loop", noiseless_single_agent, Duration::from_secs(60)),
        ("drift reduction with local optimization", drift_reduction, Duration::from_secs(300)),
        ("two-agent fusion", two_agent_fusion, Duration::from_secs(300)),
        ("canonical fusion oracle", fusion_oracle, Duration::MAX),
        ("metrics suite", metrics_suite, Duration::MAX),
        ("dense geometry sanity", dense_geometry, Duration::from_secs(300)),
        ("determinism", determinism, Duration::MAX),
    ];
    let mut failures = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed < limit;
        let budget = if limit == Duration::MAX { String::new() } else { format!(" / {}s", limit.as_secs()) };
        println!(
            "{} {name}: {} [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
        failures += usize::from(!pass);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
