//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Criteria 5 to 7 and 9 train desk-scale
//! models and take roughly half an hour on one CPU core.

use std::io::Write;
use std::time::{Duration, Instant};

use capsie::capsnet::{self_routing, CapsuleSet, EncoderConfig, RoutingLayerParams, POSE_DIM};
use capsie::eval::{
    embed_dataset, evaluate, r_squared, random_embedding_retrieval, reports_to_csv,
    retrieval_metrics, EvalProtocol, EvalSelection, MetricReport, ViewInfo, METRIC_NAMES,
};
use capsie::model::{Model, ModelConfig, ProjectorKind};
use capsie::ndcore::{gradcheck, Bound, Graph, ParamSet, Tensor, Var};
use capsie::objective::{
    covariance_reg, equivariant_loss, invariant_loss, mean_entropy, total_loss, variance_reg,
    Embeddings, LossWeights,
};
use capsie::predictor::{quaternion_batch, IdentityPredictor, PosePredictor};
use capsie::rotations::{relative_rotation, sample_rotation, Quaternion};
use capsie::synthgen::{generate_dataset, Dataset};
use capsie::train::{
    capsule_sweep, pretrain, step_series, CheckpointState, LogRecord, SweepRow, TrainConfig,
    Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

fn report(id: &str, title: &str, outcome: Check, elapsed: Duration) -> bool {
    let (pass, detail) = match outcome {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} {id}: {title} | {detail} | {:.1}s",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    std::io::stdout().flush().ok();
    pass
}

fn info(msg: impl AsRef<str>) {
    println!("     {}", msg.as_ref());
    std::io::stdout().flush().ok();
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

/// Direct transcription of self-routing for one sample, looping over
/// lower capsules `i`, upper capsules `j` and pose entries.
fn routing_loops(
    u: &[Vec<f64>],
    a: &[f64],
    p: &RoutingLayerParams<f64>,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, j_count) = p.dims().unwrap();
    let wr = p.w_route.data();
    let mut c = vec![vec![0.0; j_count]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..j_count)
            .map(|j| {
                (0..POSE_DIM)
                    .map(|k| u[i][k] * wr[(i * POSE_DIM + k) * j_count + j])
                    .sum()
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..j_count {
            c[i][j] = (logits[j] - m).exp() / z;
        }
    }
    let a_sum: f64 = a.iter().sum();
    let mut act = vec![0.0; j_count];
    let mut pose = vec![vec![0.0; POSE_DIM]; j_count];
    for j in 0..j_count {
        let mut weight = 0.0;
        for i in 0..n {
            act[j] += c[i][j] * a[i] / a_sum;
            weight += c[i][j] * a[i];
            let w = p.pose_matrix(i, j);
            for r in 0..POSE_DIM {
                let vote: f64 = (0..POSE_DIM).map(|k| w[r * POSE_DIM + k] * u[i][k]).sum();
                pose[j][r] += c[i][j] * a[i] * vote;
            }
        }
        for v in &mut pose[j] {
            *v /= weight;
        }
    }
    (act, pose)
}

fn criterion_routing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=16);
        let j = rng.gen_range(1..=8);
        let params = RoutingLayerParams::<f64>::init(n, j, &mut rng);
        let poses = Tensor::<f64>::randn([n, POSE_DIM], 1.0, &mut rng);
        let acts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let set = CapsuleSet::new(poses.clone(), Tensor::new([n], acts.clone()).map_err(err)?)
            .map_err(err)?;
        let out = params.route(&set).map_err(err)?;
        let u: Vec<Vec<f64>> = (0..n).map(|i| poses.row(i).to_vec()).collect();
        let (act, pose) = routing_loops(&u, &acts, &params);
        for (x, y) in out.activations.data().iter().zip(&act) {
            worst = worst.max((x - y).abs());
        }
        for (x, y) in out.poses.data().iter().zip(pose.iter().flatten()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((
        worst < 1e-5,
        format!("100 instances, max abs diff {worst:.2e} (< 1e-5)"),
    ))
}

// ---------------------------------------------------------------- 2

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            image_size: 2,
            widths: vec![3],
            kernel_sizes: vec![3],
            strides: vec![2],
        },
        n_caps: 2,
        projector: ProjectorKind::Capsule,
        split_hidden: 4,
        predictor_hidden: Some(4),
    }
}

fn criterion_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let logits = [
        Tensor::<f64>::randn([4, 5], 1.0, &mut rng),
        Tensor::<f64>::randn([4, 5], 1.0, &mut rng),
    ];
    let z = [
        Tensor::<f64>::randn([6, 4], 0.4, &mut rng),
        Tensor::<f64>::randn([6, 4], 0.4, &mut rng),
    ];
    let h = 1e-6;
    let mut errors: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, r: capsie::Result<gradcheck::GradReport>| -> Result<(), String> {
        errors.push((name.into(), r.map_err(err)?.max_relative_error()));
        Ok(())
    };
    push(
        "invariant CE",
        gradcheck::check(
            &logits,
            |g, v| {
                let (a, b) = (g.softmax(v[0], 1)?, g.softmax(v[1], 1)?);
                invariant_loss(g, a, b, true)
            },
            h,
        ),
    )?;
    push(
        "mean entropy",
        gradcheck::check(
            &logits[..1],
            |g, v| {
                let a = g.softmax(v[0], 1)?;
                mean_entropy(g, a)
            },
            h,
        ),
    )?;
    push(
        "equivariant MSE",
        gradcheck::check(&z, |g, v| equivariant_loss(g, v[0], v[1]), h),
    )?;
    push(
        "variance V",
        gradcheck::check(&z[..1], |g, v| variance_reg(g, v[0]), h),
    )?;
    push(
        "covariance C",
        gradcheck::check(&z[..1], |g, v| covariance_reg(g, v[0]), h),
    )?;

    // encoder, primary capsules, routing, predictor and the full objective
    let mut params = ParamSet::<f64>::new();
    let model = Model::new(tiny_model(), &mut params, &mut rng).map_err(err)?;
    let count = params.scalar_count();
    for name in [
        "encoder.0.bias",
        "primary.pose.bias",
        "primary.act.bias",
        "predictor.w2",
        "predictor.b1",
        "predictor.b2",
    ] {
        let id = params
            .id_of(name)
            .ok_or(format!("missing parameter {name}"))?;
        let shape = params.get(id).shape().to_vec();
        params
            .set(id, Tensor::randn(shape, 0.3, &mut rng))
            .map_err(err)?;
    }
    let b = 3;
    let views = Tensor::<f64>::randn([2 * b, 3, 2, 2], 1.0, &mut rng);
    let quats: Vec<Quaternion> = (0..b)
        .map(|_| {
            relative_rotation(&sample_rotation(&mut rng).1, &sample_rotation(&mut rng).1)
                .map(|q| q.canonical())
        })
        .collect::<capsie::Result<_>>()
        .map_err(err)?;
    let q = quaternion_batch::<f64>(&quats).map_err(err)?;
    let w = LossWeights::default();
    let full = gradcheck::check(
        params.values(),
        |g: &mut Graph<f64>, v: &[Var]| {
            let p = Bound::from_vars(v.to_vec());
            let x = g.constant(views.clone())?;
            let out = model.forward(g, &p, x)?;
            let pose_a = g.narrow(out.pose, 0, 0, b)?;
            let qv = g.constant(q.clone())?;
            let pred = model.predictor.forward(g, &p, pose_a, qv)?;
            let e = Embeddings {
                act_a: g.narrow(out.act, 0, 0, b)?,
                act_b: g.narrow(out.act, 0, b, b)?,
                pose_a,
                pose_b: g.narrow(out.pose, 0, b, b)?,
                pred,
            };
            Ok(total_loss(g, &e, &w)?.total)
        },
        h,
    )
    .map_err(err)?;
    errors.push((
        format!("full graph ({count} params)"),
        full.max_relative_error(),
    ));
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        worst < 1e-3 && count <= 5000,
        format!("max rel err {worst:.2e} (< 1e-3): {detail}"),
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_simplex() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0f64;
    let mut rows = 0;
    for _ in 0..1000 {
        let (n, j, b) = (
            rng.gen_range(1..=64),
            rng.gen_range(1..=16),
            rng.gen_range(1..=4),
        );
        let scale = rng.gen_range(0.1..4.0);
        let params = RoutingLayerParams::<f32>::init(n, j, &mut rng);
        let mut g = Graph::<f32>::new();
        let u = g
            .constant(Tensor::randn([n, b, POSE_DIM], scale, &mut rng))
            .map_err(err)?;
        let acts: Vec<f32> = (0..n * b).map(|_| rng.gen_range(0.001..1.0)).collect();
        let a = g
            .constant(Tensor::new([n, b], acts).map_err(err)?)
            .map_err(err)?;
        let wr = g.constant(params.w_route).map_err(err)?;
        let wp = g.constant(params.w_pose).map_err(err)?;
        let out = self_routing(&mut g, u, a, wr, wp).map_err(err)?;
        let act = g.value(out.activations);
        for r in 0..b {
            let row = act.row(r);
            if row.iter().any(|&v| v < 0.0) {
                return Ok((
                    false,
                    format!("negative activation in pass with N={n} J={j}"),
                ));
            }
            worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            rows += 1;
        }
    }
    Ok((
        worst < 1e-5,
        format!("1000 passes, {rows} rows, max |Σa − 1| {worst:.2e} (< 1e-5)"),
    ))
}

// ---------------------------------------------------------------- 4

/// Predicts the target exactly for rotations about z, with the embedding
/// holding the rotation angle.
struct AngleShift;

impl PosePredictor<f32> for AngleShift {
    fn predict(&self, z: &Tensor<f32>, quats: &[Quaternion]) -> capsie::Result<Tensor<f32>> {
        let data = z
            .data()
            .iter()
            .zip(quats)
            .map(|(&v, q)| v + (2.0 * q.z.atan2(q.w)) as f32)
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }
}

fn about_z(angle: f64) -> Quaternion {
    Quaternion::from_axis_angle([0.0, 0.0, 1.0], angle)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

fn criterion_metrics() -> Check {
    let mut failures = Vec::new();
    let t = |shape: [usize; 2], d: Vec<f64>| Tensor::new(shape, d).unwrap();

    // R²: one column, two columns, and the mean predictor
    let r1 = r_squared(
        &t([4, 1], vec![1.0, 2.0, 3.0, 4.0]),
        &t([4, 1], vec![1.0, 2.0, 3.0, 5.0]),
    )
    .map_err(err)?;
    let r2 = r_squared(
        &t([3, 2], vec![1.0, 0.0, 2.0, 2.0, 3.0, 4.0]),
        &t([3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]),
    )
    .map_err(err)?;
    let r3 = r_squared(
        &t([3, 1], vec![1.0, 2.0, 3.0]),
        &t([3, 1], vec![2.0, 2.0, 2.0]),
    )
    .map_err(err)?;
    if !(close(r1, 0.8) && close(r2, 0.8) && close(r3, 0.0)) {
        failures.push(format!("r_squared {r1} {r2} {r3}, expected 0.8 0.8 0"));
    }

    // three views of one object on a line, rotations 0, 90 and 180 degrees
    // about z; with the identity predictor the ranks are [1,2,1,2,2,1] and
    // the nearest-neighbour rotation distances [0,.5,0,1,.5,0]
    let views: Vec<ViewInfo> = [0.0, 90.0, 180.0]
        .iter()
        .map(|d: &f64| ViewInfo {
            object_id: 0,
            quaternion: about_z(d.to_radians()),
        })
        .collect();
    let emb = Tensor::new([3, 1], vec![0f32, 1.0, 3.0]).map_err(err)?;
    let all = [0, 1, 2];
    let r = retrieval_metrics(&emb, &views, &IdentityPredictor, &all, &all, "toy").map_err(err)?;
    if !(close(r.mrr, 0.75)
        && close(r.h_at_1, 0.5)
        && close(r.h_at_5, 1.0)
        && (r.pre - 1.0 / 3.0).abs() < 1e-6)
    {
        failures.push(format!(
            "3-view identity: mrr {} h1 {} h5 {} pre {}",
            r.mrr, r.h_at_1, r.h_at_5, r.pre
        ));
    }

    // four views at 0, 1, 3, 7: every source ranks the others 1, 2, 3
    let views4: Vec<ViewInfo> = (0..4)
        .map(|k| ViewInfo {
            object_id: 0,
            quaternion: about_z(0.3 * k as f64),
        })
        .collect();
    let emb4 = Tensor::new([4, 1], vec![0f32, 1.0, 3.0, 7.0]).map_err(err)?;
    let all4 = [0, 1, 2, 3];
    let r =
        retrieval_metrics(&emb4, &views4, &IdentityPredictor, &all4, &all4, "toy").map_err(err)?;
    if !(close(r.mrr, 11.0 / 18.0) && close(r.h_at_1, 1.0 / 3.0) && close(r.h_at_5, 1.0)) {
        failures.push(format!(
            "4-view identity: mrr {} h1 {} h5 {}",
            r.mrr, r.h_at_1, r.h_at_5
        ));
    }

    // five views whose embedding is their angle: an exact predictor
    let angles = [0.0, 0.4, 0.9, 1.5, 2.2];
    let views5: Vec<ViewInfo> = angles
        .iter()
        .map(|&a| ViewInfo {
            object_id: 0,
            quaternion: about_z(a),
        })
        .collect();
    let emb5 = Tensor::new([5, 1], angles.iter().map(|&a| a as f32).collect()).map_err(err)?;
    let all5 = [0, 1, 2, 3, 4];
    let r = retrieval_metrics(&emb5, &views5, &AngleShift, &all5, &all5, "toy").map_err(err)?;
    if !(close(r.mrr, 1.0) && close(r.h_at_1, 1.0) && r.pre < 1e-9 && r.pairs == 20) {
        failures.push(format!(
            "5-view exact: mrr {} h1 {} pre {} pairs {}",
            r.mrr, r.h_at_1, r.pre, r.pairs
        ));
    }

    // random embeddings, 50 views per object
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let objects = 40;
    let views50: Vec<ViewInfo> = (0..objects * 50)
        .map(|k| ViewInfo {
            object_id: k / 50,
            quaternion: sample_rotation(&mut rng).1,
        })
        .collect();
    let emb50 = Tensor::<f32>::randn([views50.len(), 32], 1.0, &mut rng);
    let idx: Vec<usize> = (0..views50.len()).collect();
    let r = retrieval_metrics(&emb50, &views50, &IdentityPredictor, &idx, &idx, "random")
        .map_err(err)?;
    if !(0.01..=0.03).contains(&r.h_at_1) {
        failures.push(format!("random H@1 {} outside [0.01, 0.03]", r.h_at_1));
    }
    let detail = format!(
        "R², MRR, H@k and PRE toy oracles exact; random H@1 (50 views) {:.4} in [0.01, 0.03]",
        r.h_at_1
    );
    if failures.is_empty() {
        Ok((true, detail))
    } else {
        Ok((false, failures.join("; ")))
    }
}

// ---------------------------------------------------------------- 8

fn desk_dataset() -> capsie::Result<Dataset> {
    generate_dataset(8, 20, 8, 32, 7)
}

fn desk_config(n_caps: usize, projector: ProjectorKind) -> TrainConfig {
    let mut c = TrainConfig::new(0);
    c.model.n_caps = n_caps;
    c.model.projector = projector;
    c
}

fn lines(log: &[LogRecord]) -> String {
    log.iter().map(|r| r.to_json_line() + "\n").collect()
}

fn criterion_determinism(ds: &Dataset) -> Check {
    let config = TrainConfig {
        epochs: 2,
        eval_cadence: 1,
        ..desk_config(16, ProjectorKind::Capsule)
    };
    let a = pretrain(&config, ds).map_err(err)?.1;
    let b = pretrain(&config, ds).map_err(err)?.1;
    let identical = lines(&a) == lines(&b);

    let mut t = Trainer::new(config.clone(), ds).map_err(err)?;
    let stop = t.batches_per_epoch() + 3;
    for _ in 0..stop {
        t.step().map_err(err)?;
    }
    let path = std::env::temp_dir().join(format!("capsie-acceptance-{}.ckpt", std::process::id()));
    t.checkpoint().map_err(err)?.save(&path).map_err(err)?;
    drop(t);
    let state = CheckpointState::load(&path).map_err(err)?;
    std::fs::remove_file(&path).ok();
    let mut resumed = Trainer::resume(&state, ds).map_err(err)?;
    let next = resumed.step().map_err(err)?;
    let rest = resumed.run_collect().map_err(err)?;
    let reference = step_series(&a);
    let got = step_series(&next);
    let bit_equal =
        got.len() == 1 && got[0].losses.total.to_bits() == reference[stop].losses.total.to_bits();
    let tail_equal = {
        let mut resumed_log = next.clone();
        resumed_log.extend(rest);
        let after: Vec<LogRecord> = a
            .iter()
            .filter(|r| match r {
                LogRecord::Step(s) => s.step >= stop as u64,
                LogRecord::Eval(e) => e.step > stop as u64,
            })
            .cloned()
            .collect();
        lines(&after) == lines(&resumed_log)
    };
    Ok((
        identical && bit_equal && tail_equal,
        format!(
            "two runs byte-identical: {identical} ({} records); resume at step {stop}: next loss {} vs {} bit-equal {bit_equal}, remaining log equal {tail_equal}",
            a.len(),
            got.first().map(|s| s.losses.total).unwrap_or(f64::NAN),
            reference[stop].losses.total
        ),
    ))
}

// ---------------------------------------------------------------- 5-7, 9

struct SweepOutcome {
    rows: Vec<SweepRow>,
    state16: CheckpointState,
    time16: Duration,
}

fn run_sweep(ds: &Dataset, protocol: &EvalProtocol) -> capsie::Result<SweepOutcome> {
    let base = desk_config(16, ProjectorKind::Capsule);
    let mut last = Instant::now();
    let mut state16 = None;
    let mut time16 = Duration::ZERO;
    let report = capsule_sweep(
        &base,
        &[8, 16, 32],
        ds,
        protocol,
        EvalSelection::ALL,
        |run| {
            let took = last.elapsed();
            info(format!(
                "sweep n_caps={} trained and evaluated in {:.1} min, final online top-1 {:?}",
                run.row.n_caps,
                took.as_secs_f64() / 60.0,
                run.row.final_online_top1
            ));
            if run.row.n_caps == 16 {
                state16 = Some(run.state.clone());
                time16 = took;
            }
            last = Instant::now();
            Ok(())
        },
    )?;
    Ok(SweepOutcome {
        rows: report.rows,
        state16: state16.expect("sweep includes 16 capsules"),
        time16,
    })
}

fn mean_activation_entropy(act: &Tensor<f32>) -> f64 {
    let (n, k) = (act.shape()[0], act.shape()[1]);
    let mean: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|i| act.row(i)[j] as f64).sum::<f64>() / n as f64)
        .collect();
    -mean
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

fn criterion_desk(ds: &Dataset, s: &SweepOutcome, protocol: &EvalProtocol) -> Check {
    let row = s
        .rows
        .iter()
        .find(|r| r.n_caps == 16)
        .ok_or("missing n_caps=16 row")?;
    let res = &row.results;
    let split = ds
        .object_split(s.state16.config.val_fraction)
        .map_err(err)?;

    // the same model family at its random initialisation, same probe seeds
    let untrained = Trainer::new(s.state16.config.clone(), ds).map_err(err)?;
    let base = evaluate(
        &untrained.model,
        &untrained.params,
        ds,
        &split,
        protocol,
        EvalSelection {
            rotation: true,
            ..EvalSelection::NONE
        },
    )
    .map_err(err)?;
    let random_r2 = base.pose_rotation_r2.ok_or("no baseline rotation R²")?;
    let pose_r2 = res.pose_rotation_r2.ok_or("no pose rotation R²")?;
    let act_r2 = res.act_rotation_r2.ok_or("no activation rotation R²")?;
    let top1 = res.act_top1.ok_or("no activation top-1")?;
    let ret = res.retrieval.as_ref().ok_or("no retrieval")?;
    let ident = res
        .identity_retrieval
        .as_ref()
        .ok_or("no identity retrieval")?;
    let random_mrr = random_embedding_retrieval(ds, &split, row.pose_dim, 0)
        .map_err(err)?
        .mrr;

    let (model, params) = s.state16.model().map_err(err)?;
    let emb = embed_dataset(&model, &params, ds, 256).map_err(err)?;
    let h = mean_activation_entropy(&emb.act.select_rows(&split.val).map_err(err)?);
    info(format!(
        "no-collapse sentinel: H(mean act) {:.4} vs 0.5·log K {:.4}; pooled-rep top-1 {:.4}; identity MRR {:.4}",
        h,
        0.5 * (16f64).ln(),
        res.rep_top1.unwrap_or(f64::NAN),
        ident.mrr
    ));

    let checks = [
        (
            "a",
            pose_r2 >= random_r2 + 0.2,
            format!("pose R² {pose_r2:.4} vs random encoder {random_r2:.4} + 0.2"),
        ),
        (
            "b",
            pose_r2 - act_r2 >= 0.15,
            format!(
                "pose R² − act R² {:.4} (act {act_r2:.4}) ≥ 0.15",
                pose_r2 - act_r2
            ),
        ),
        ("c", top1 >= 0.375, format!("act top-1 {top1:.4} ≥ 0.375")),
        (
            "d",
            ret.mrr >= 2.0 * random_mrr,
            format!("MRR {:.4} vs 2 × random {random_mrr:.4}", ret.mrr),
        ),
        (
            "e",
            ret.pre < ident.pre,
            format!("PRE {:.4} < identity {:.4}", ret.pre, ident.pre),
        ),
        (
            "time",
            s.time16 <= Duration::from_secs(30 * 60),
            format!("train+eval {:.1} min ≤ 30", s.time16.as_secs_f64() / 60.0),
        ),
    ];
    let pass = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(k, ok, d)| format!("({k}) {} {d}", if *ok { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((pass, detail))
}

fn criterion_colour(s: &SweepOutcome) -> Check {
    let row = s
        .rows
        .iter()
        .find(|r| r.n_caps == 16)
        .ok_or("missing n_caps=16 row")?;
    let r2 = row.results.pose_colour_r2.ok_or("no colour R²")?;
    Ok((r2 < 0.15, format!("pose colour R² {r2:.4} < 0.15")))
}

fn criterion_sweep(s: &SweepOutcome) -> Check {
    let tops: Vec<(usize, f64)> = s
        .rows
        .iter()
        .map(|r| {
            r.final_online_top1
                .map(|t| (r.n_caps, t))
                .ok_or("missing online series")
        })
        .collect::<Result<_, _>>()?;
    let checksums_shared = s
        .rows
        .windows(2)
        .all(|w| w[0].dataset_checksum == w[1].dataset_checksum);
    let monotone = tops.windows(2).all(|w| w[1].1 >= w[0].1 - 0.02);
    let detail = tops
        .iter()
        .map(|(k, t)| format!("n_caps {k}: {t:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        monotone && checksums_shared && tops.len() == 3,
        format!("final online top-1 {detail}; non-decreasing within 0.02: {monotone}; shared dataset: {checksums_shared}"),
    ))
}

fn criterion_baseline(ds: &Dataset, s: &SweepOutcome, protocol: &EvalProtocol) -> Check {
    let config = desk_config(16, ProjectorKind::SplitMlp);
    let (state, log) = pretrain(&config, ds).map_err(err)?;
    let (model, params) = state.model().map_err(err)?;
    let split = ds.object_split(config.val_fraction).map_err(err)?;
    let results =
        evaluate(&model, &params, ds, &split, protocol, EvalSelection::ALL).map_err(err)?;
    let split_report = results.report("split-mlp", "split-mlp", 16, protocol);
    let caps = s
        .rows
        .iter()
        .find(|r| r.n_caps == 16)
        .ok_or("missing n_caps=16 row")?;
    let mut caps_report = caps.report.clone();
    caps_report.run = "capsie".into();
    caps_report.projector = "capsule".into();

    let keys = |r: &MetricReport| -> Vec<String> {
        let v = serde_json::to_value(r).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    let same_schema = keys(&split_report) == keys(&caps_report);
    let complete = |r: &MetricReport| {
        METRIC_NAMES
            .iter()
            .all(|m| r.metric(m).is_some_and(f64::is_finite))
    };
    let csv = reports_to_csv(&[caps_report.clone(), split_report.clone()]).map_err(err)?;
    for line in csv.lines() {
        info(line);
    }
    let online = step_series(&log).len();
    Ok((
        same_schema && complete(&split_report) && complete(&caps_report),
        format!(
            "split-MLP trained {online} steps; same report schema: {same_schema}; all metrics present: {}",
            complete(&split_report) && complete(&caps_report)
        ),
    ))
}

fn main() {
    let mut all = true;
    let timed = |id: &str, title: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let outcome = f();
        report(id, title, outcome, t.elapsed())
    };
    all &= timed(
        "1",
        "routing matches the loop oracle",
        &mut criterion_routing,
    );
    all &= timed(
        "2",
        "finite-difference gradient suite",
        &mut criterion_gradients,
    );
    all &= timed(
        "3",
        "routed activations on the simplex",
        &mut criterion_simplex,
    );
    all &= timed(
        "4",
        "metric oracles and random retrieval baseline",
        &mut criterion_metrics,
    );

    let ds = match desk_dataset() {
        Ok(ds) => ds,
        Err(e) => {
            for id in ["5", "6", "7", "8", "9"] {
                report(
                    id,
                    "desk-scale criteria",
                    Err(format!("dataset generation failed: {e}")),
                    Duration::ZERO,
                );
            }
            std::process::exit(1);
        }
    };
    all &= timed("8", "determinism and resume", &mut || {
        criterion_determinism(&ds)
    });

    let protocol = EvalProtocol::default();
    let t = Instant::now();
    let sweep = run_sweep(&ds, &protocol);
    let sweep_time = t.elapsed();
    match &sweep {
        Ok(s) => {
            all &= timed("5", "desk-scale structural reproduction", &mut || {
                criterion_desk(&ds, s, &protocol)
            });
            all &= timed("6", "colour is not encoded in the pose", &mut || {
                criterion_colour(s)
            });
            let outcome = criterion_sweep(s);
            all &= report("7", "capsule sweep trend", outcome, sweep_time);
            all &= timed(
                "9",
                "split-MLP baseline under the same harness",
                &mut || criterion_baseline(&ds, s, &protocol),
            );
        }
        Err(e) => {
            for id in ["5", "6", "7", "9"] {
                all &= report(
                    id,
                    "desk-scale criteria",
                    Err(format!("sweep failed: {e}")),
                    sweep_time,
                );
            }
        }
    }
    println!(
        "acceptance: {}",
        if all {
            "all criteria passed"
        } else {
            "some criteria FAILED"
        }
    );
    if !all {
        std::process::exit(1);
    }
}
