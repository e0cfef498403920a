//! Acceptance suite: each test pins one advertised behavior of the framework
//! at its stated numerical tolerance and runtime ceiling, and prints a single
//! summary line on success (visible with `--nocapture`).
//!
//! Heavy tests share fixtures through `OnceLock` and serialize through a gate
//! mutex so per-test runtime stays attributable on parallel harnesses. The
//! numeric prefixes only fix the execution order.

use ffproj::cli::{default_training_references, ExperimentConfig};
use ffproj::evaluation::{evaluate as evaluate_filter, FilterUnderTest};
use ffproj::linmodel::{
    closed_form_ls, project_complement, project_model_subspace, LinearModel,
    DEFAULT_RANK_TOLERANCE,
};
use ffproj::neuralnet::{
    collapse_affine, construct_cancellation_pair, forward, Activation, GradientSet, Network,
};
use ffproj::objectives::{
    evaluate, evaluate_with_gradients, loss_ls, loss_projected, ObjectiveConfig, ObjectiveKind,
    Problem,
};
use ffproj::plant::{synthesize_dataset, Dataset, DatasetEntry, StribeckPlant};
use ffproj::signals::{generate_reference, ReferenceSpec, Trajectory};
use ffproj::training::{
    flatten, train, unflatten, LbfgsConfig, NetworkConfig, TrainConfig, TrainReport,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::{Mutex, MutexGuard, OnceLock, PoisonError};
use std::time::Instant;

const FS: f64 = 100.0;
const TRUE_THETA: [f64; 3] = [0.0, 1.0, 5.0];

// ─── Shared fixtures ─────────────────────────────────────────────────────────

/// Serializes test bodies so wall-clock budgets measure one test at a time.
fn gate() -> MutexGuard<'static, ()> {
    static GATE: Mutex<()> = Mutex::new(());
    GATE.lock().unwrap_or_else(PoisonError::into_inner)
}

fn stribeck() -> &'static (StribeckPlant, Dataset) {
    static DS: OnceLock<(StribeckPlant, Dataset)> = OnceLock::new();
    DS.get_or_init(|| {
        let plant = StribeckPlant::standard(FS);
        let dataset = synthesize_dataset(&plant, &default_training_references())
            .expect("training sweep synthesizes");
        (plant, dataset)
    })
}

fn linear_plant() -> &'static (StribeckPlant, Dataset) {
    static DS: OnceLock<(StribeckPlant, Dataset)> = OnceLock::new();
    DS.get_or_init(|| {
        let plant = StribeckPlant::standard(FS).linearized();
        let dataset = synthesize_dataset(&plant, &default_training_references())
            .expect("linear sweep synthesizes");
        (plant, dataset)
    })
}

/// The trainer setup used by the headline recovery runs: the default network
/// warm-started by a short quasi-Newton phase, then first-order descent.
fn recovery_config(objective: ObjectiveConfig, network: NetworkConfig, seed: u64) -> TrainConfig {
    let mut tc = TrainConfig::new(objective, Some(network), seed);
    tc.max_iterations = 20_000;
    tc.lbfgs = Some(LbfgsConfig {
        iterations: 50,
        memory: 20,
        line_search_max_steps: 40,
    });
    tc
}

fn tanh_net(hidden: &[usize]) -> NetworkConfig {
    NetworkConfig {
        hidden: hidden.to_vec(),
        activation: Activation::Tanh,
    }
}

/// Regularized run on the friction dataset; trained once, checked by the
/// theta-recovery test and reused as the deployed filter in the
/// generalization test.
fn regularized_run() -> &'static TrainReport {
    static RUN: OnceLock<TrainReport> = OnceLock::new();
    RUN.get_or_init(|| {
        let (_, dataset) = stribeck();
        let objective = ObjectiveConfig::new(ObjectiveKind::OrthogonalRegularized, 0.01)
            .expect("valid lambda");
        train(&recovery_config(objective, tanh_net(&[5, 5]), 1), dataset, None)
            .expect("regularized training runs")
    })
}

fn small_specs() -> Vec<ReferenceSpec> {
    vec![
        ReferenceSpec {
            displacement: 0.2,
            max_velocity: 0.3,
            max_acceleration: 2.0,
            max_jerk: 50.0,
            max_snap: 2000.0,
            sample_rate_hz: FS,
            dwell_samples: 10,
        },
        ReferenceSpec {
            displacement: -0.3,
            max_velocity: 0.45,
            max_acceleration: 2.0,
            max_jerk: 50.0,
            max_snap: 2000.0,
            sample_rate_hz: FS,
            dwell_samples: 10,
        },
    ]
}

/// Flat gradient in [`flatten`] coordinate order: theta, then every weight
/// matrix, then every bias vector.
fn flat_gradient(d_theta: &DVector<f64>, d_phi: Option<&GradientSet>) -> DVector<f64> {
    let mut data: Vec<f64> = d_theta.iter().copied().collect();
    if let Some(g) = d_phi {
        for w in &g.weights {
            data.extend(w.iter());
        }
        for b in &g.biases {
            data.extend(b.iter());
        }
    }
    DVector::from_vec(data)
}

// ─── Tests ───────────────────────────────────────────────────────────────────

#[test]
fn a01_regularized_loss_splits_exactly_into_orthogonal_parts() {
    let _g = gate();
    let t0 = Instant::now();
    let plant = StribeckPlant::standard(FS);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for round in 0..5 {
        let specs: Vec<ReferenceSpec> = (0..2)
            .map(|i| ReferenceSpec {
                displacement: (if (round + i) % 2 == 0 { 1.0 } else { -1.0 })
                    * rng.gen_range(0.1..0.4),
                max_velocity: rng.gen_range(0.15..0.5),
                max_acceleration: 2.0,
                max_jerk: 50.0,
                max_snap: 2000.0,
                sample_rate_hz: FS,
                dwell_samples: rng.gen_range(5..30),
            })
            .collect();
        let dataset = synthesize_dataset(&plant, &specs).expect("random dataset");
        let problem =
            Problem::from_dataset(&dataset, 3, DEFAULT_RANK_TOLERANCE).expect("full rank");
        for _ in 0..20 {
            let theta = LinearModel::from_slice(&[
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ])
            .expect("finite theta");
            let net = Network::init(&[3, 5, 5, 1], Activation::Tanh, rng.gen()).expect("net");
            let lambda = 10f64.powf(rng.gen_range(-3.0..1.0));
            let b = loss_projected(&theta, Some(&net), &problem, lambda).expect("loss");
            let gap = (b.total - (b.j1 + b.j2 + b.j3)).abs();
            assert!(
                gap <= 1e-9 * b.total,
                "loss split broke: total {} vs parts {} (gap {gap:.3e})",
                b.total,
                b.j1 + b.j2 + b.j3
            );
            worst = worst.max(gap / b.total);
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} instances checked");
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 10.0, "took {dt:.1}s, budget 10s");
    println!("PASS split-identity: {checked} instances, worst rel gap {worst:.2e} [{dt:.2}s]");
}

#[test]
fn a02_identity_activation_filter_depends_only_on_summed_affine_map() {
    let _g = gate();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = DMatrix::from_fn(40, 3, |_, _| rng.gen_range(-2.0..2.0));
    let mut worst: f64 = 0.0;
    for round in 0..10u64 {
        // Two different parameterizations with the same theta^T + W sum; the
        // freshly initialized nets carry zero biases, so the collapsed offsets
        // agree as well.
        let s = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        let net_a = Network::init(&[3, 5, 5, 1], Activation::Identity, 100 + round).expect("net");
        let net_b = Network::init(&[3, 5, 5, 1], Activation::Identity, 200 + round).expect("net");
        let (w_a, b_a) = collapse_affine(&net_a).expect("affine form");
        let (w_b, b_b) = collapse_affine(&net_b).expect("affine form");
        assert_eq!(b_a, 0.0);
        assert_eq!(b_b, 0.0);
        let theta_a = LinearModel::new(&s - w_a.transpose()).expect("theta");
        let theta_b = LinearModel::new(&s - w_b.transpose()).expect("theta");
        assert!(theta_a.theta() != theta_b.theta(), "construction degenerate");
        let f_a = &x * theta_a.theta() + forward(&net_a, &x).expect("forward");
        let f_b = &x * theta_b.theta() + forward(&net_b, &x).expect("forward");
        let dev = (&f_a - &f_b).amax();
        assert!(
            dev <= 1e-10,
            "equal-sum parameterizations disagree by {dev:.3e}"
        );
        worst = worst.max(dev);
        // Control: breaking the sum by 1e-3 must move the output.
        let theta_c = LinearModel::new(theta_b.theta() + DVector::repeat(3, 1e-3)).expect("theta");
        let f_c = &x * theta_c.theta() + forward(&net_b, &x).expect("forward");
        assert!((&f_c - &f_a).amax() > 1e-5, "output ignored theta shift");
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 1.0, "took {dt:.2}s, budget 1s");
    println!("PASS affine-collapse: 10 equal-sum pairs, worst deviation {worst:.2e} [{dt:.2}s]");
}

#[test]
fn a03_relu_cancellation_family_reaches_zero_loss_with_distinct_theta() {
    let _g = gate();
    let t0 = Instant::now();
    // Positive ramp with target proportional to position: every member of the
    // constructed family cancels its own network term exactly.
    let samples: Vec<f64> = (1..=50).map(|k| k as f64 / FS).collect();
    let c0 = 2.0;
    let reference = Trajectory::new(samples.clone(), FS).expect("ramp");
    let target =
        Trajectory::new(samples.iter().map(|&x| c0 * x).collect(), FS).expect("scaled ramp");
    let dataset = Dataset::new(vec![DatasetEntry { reference, target }], 2).expect("dataset");
    let mut theta0 = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..11 {
        let c1 = -5.0 + i as f64;
        let (theta, net) = construct_cancellation_pair(c1, c0).expect("family member");
        let j = loss_ls(&theta, Some(&net), &dataset).expect("loss");
        assert!(j <= 1e-12, "family member c1={c1} has loss {j:.3e}");
        worst = worst.max(j);
        theta0.push(theta.theta()[0]);
    }
    let spread = theta0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - theta0.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(
        spread >= 9.9,
        "theta0 family barely moved (spread {spread:.3})"
    );
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 1.0, "took {dt:.2}s, budget 1s");
    println!(
        "PASS zero-loss family: 11 members, worst loss {worst:.2e}, theta0 spread {spread:.1} [{dt:.2}s]"
    );
}

#[test]
fn a04_projected_training_reproduces_stacked_least_squares_theta_bit_for_bit() {
    let _g = gate();
    let t0 = Instant::now();
    let (_, dataset) = stribeck();
    let reference = closed_form_ls(dataset, 3).expect("closed form");
    let problem = Problem::from_dataset(dataset, 3, DEFAULT_RANK_TOLERANCE).expect("problem");
    let objective = ObjectiveConfig {
        kind: ObjectiveKind::ExplicitProjection,
        lambda: 0.0,
    };
    let mut bit_patterns: Vec<Vec<u64>> = Vec::new();
    let mut worst_rel: f64 = 0.0;
    for seed in 1..=5u64 {
        let mut tc = TrainConfig::new(objective, Some(tanh_net(&[5, 5])), seed);
        tc.max_iterations = 300;
        tc.lbfgs = None;
        let report = train(&tc, dataset, None).expect("projected training");
        assert!(report.iterations_run > 0, "network phase never ran");
        let theta = DVector::from_column_slice(&report.final_theta);
        let rel = (&theta - reference.theta()).norm() / reference.theta().norm();
        assert!(
            rel <= 1e-10,
            "seed {seed}: theta deviates from stacked solution by {rel:.3e} relative"
        );
        worst_rel = worst_rel.max(rel);
        bit_patterns.push(report.final_theta.iter().map(|v| v.to_bits()).collect());

        // The model coefficients stay first-order optimal no matter what the
        // network phase did: their gradient vanishes at the stacked solution.
        let p = report.final_parametrization().expect("parametrization");
        let (_, d_theta, _) =
            evaluate_with_gradients(&objective, &p.theta, p.network.as_ref(), &problem)
                .expect("gradients");
        let zero = LinearModel::zeros(3).expect("origin");
        let (_, d_theta_origin, _) =
            evaluate_with_gradients(&objective, &zero, p.network.as_ref(), &problem)
                .expect("gradients");
        assert!(
            d_theta.norm() <= 1e-6 * d_theta_origin.norm(),
            "seed {seed}: theta gradient {:.3e} not negligible vs origin scale {:.3e}",
            d_theta.norm(),
            d_theta_origin.norm()
        );
    }
    assert!(
        bit_patterns.windows(2).all(|w| w[0] == w[1]),
        "theta differs across network seeds"
    );
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 300.0, "took {dt:.1}s, budget 300s");
    println!(
        "PASS disjoint training: 5 seeds bit-identical, worst rel dev {worst_rel:.2e} [{dt:.2}s]"
    );
}

#[test]
fn a05_linear_plant_targets_live_in_model_subspace_and_theta_recovers_physics() {
    let _g = gate();
    let t0 = Instant::now();
    let (plant, dataset) = linear_plant();
    assert!(plant.is_linear());
    let problem = Problem::from_dataset(dataset, 3, DEFAULT_RANK_TOLERANCE).expect("problem");

    // Without the velocity-dependent friction term every target is exactly
    // explainable by the model columns: its complement component vanishes.
    let mut worst_ratio: f64 = 0.0;
    for (j, entry) in problem.entries().iter().enumerate() {
        let residual = project_complement(entry.basis(), entry.target()).expect("projection");
        let ratio = residual.norm() / entry.target().norm();
        assert!(
            ratio <= 1e-8,
            "entry {j}: complement component is {ratio:.3e} of the target"
        );
        worst_ratio = worst_ratio.max(ratio);
    }

    let objective =
        ObjectiveConfig::new(ObjectiveKind::OrthogonalRegularized, 0.01).expect("lambda");
    let report = train(
        &recovery_config(objective, tanh_net(&[5, 5]), 1),
        dataset,
        None,
    )
    .expect("training");
    let err_inf = report
        .final_theta
        .iter()
        .zip(TRUE_THETA)
        .map(|(got, want)| (got - want).abs())
        .fold(0.0, f64::max)
        ;
    assert!(
        err_inf <= 1e-3,
        "theta {:?} misses [0, 1, 5] by {err_inf:.3e}",
        report.final_theta
    );

    // The regularizer leaves nothing for the network to explain: its stacked
    // output is negligible against the targets.
    let p = report.final_parametrization().expect("parametrization");
    let net = p.network.as_ref().expect("trained network");
    let mut net_energy = 0.0;
    let mut target_energy = 0.0;
    let mut n_samples = 0usize;
    for entry in problem.entries() {
        let c = forward(net, entry.regressor().matrix()).expect("forward");
        net_energy += c.norm_squared();
        target_energy += entry.target().norm_squared();
        n_samples += entry.target().len();
    }
    let net_rms = (net_energy / n_samples as f64).sqrt();
    let target_rms = (target_energy / n_samples as f64).sqrt();
    assert!(
        net_rms <= 1e-3 * target_rms,
        "network output rms {net_rms:.3e} vs target rms {target_rms:.3e}"
    );
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 600.0, "took {dt:.1}s, budget 600s");
    println!(
        "PASS linear-plant recovery: worst in-span ratio {worst_ratio:.2e}, theta error {err_inf:.2e}, net/target rms {:.2e} [{dt:.2}s]",
        net_rms / target_rms
    );
}

#[test]
fn a06_friction_plant_regularized_training_lands_interpretable_theta() {
    let _g = gate();
    let t0 = Instant::now();
    let report = regularized_run();
    let t = &report.final_theta;
    assert!(
        t[0].abs() <= 0.1,
        "position coefficient {:.4} should be near zero",
        t[0]
    );
    assert!(
        (1.0..=1.4).contains(&t[1]),
        "viscous coefficient {:.4} outside [1.0, 1.4]",
        t[1]
    );
    assert!(
        (t[2] - 5.0).abs() <= 0.1,
        "mass coefficient {:.4} should be near 5",
        t[2]
    );
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 900.0, "took {dt:.1}s, budget 900s");
    println!(
        "PASS interpretable recovery: theta [{:.4}, {:.4}, {:.4}] vs plant [0, 1, 5] [{dt:.2}s]",
        t[0], t[1], t[2]
    );
}

#[test]
fn a07_seed_scatter_under_plain_loss_collapses_under_regularized_loss() {
    let _g = gate();
    let t0 = Instant::now();
    let (_, dataset) = stribeck();
    // Identity activation makes the theta-network trade exactly flat, so
    // every seed attains the common interpolation floor while landing at a
    // different split between model and network.
    let identity_net = NetworkConfig {
        hidden: vec![5, 5],
        activation: Activation::Identity,
    };
    let study = |objective: ObjectiveConfig| {
        ffproj::evaluation::nonuniqueness_study(
            &recovery_config(objective, identity_net.clone(), 1),
            dataset,
            8,
        )
        .expect("study")
    };

    let plain = study(ObjectiveConfig::least_squares());
    let loss_hi = plain.final_losses.iter().copied().fold(0.0, f64::max);
    let loss_lo = plain
        .final_losses
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    assert!(
        loss_hi <= 1.1 * loss_lo,
        "final losses not equal within 10%: {loss_lo:.6} .. {loss_hi:.6}"
    );
    let spreads: Vec<f64> = plain.per_coordinate.iter().map(|c| c.max - c.min).collect();
    let best_spread = spreads.iter().copied().fold(0.0, f64::max);
    assert!(
        best_spread >= 1.0,
        "no coordinate scattered: spreads {spreads:?}"
    );

    let regularized =
        study(ObjectiveConfig::new(ObjectiveKind::OrthogonalRegularized, 0.01).expect("lambda"));
    let reg_spreads: Vec<f64> = regularized
        .per_coordinate
        .iter()
        .map(|c| c.max - c.min)
        .collect();
    for (i, s) in reg_spreads.iter().enumerate() {
        assert!(
            *s <= 0.1,
            "regularized coordinate {i} still scatters by {s:.4}"
        );
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 7200.0, "took {dt:.1}s, budget 7200s");
    println!(
        "PASS scatter contrast: plain loss ratio {:.8}, spread {best_spread:.2}; regularized spreads {:?} [{dt:.2}s]",
        loss_hi / loss_lo,
        reg_spreads.iter().map(|s| format!("{s:.1e}")).collect::<Vec<_>>()
    );
}

#[test]
fn a08_regularized_filter_outgeneralizes_plain_and_model_only_filters() {
    let _g = gate();
    let t0 = Instant::now();
    let (plant, dataset) = stribeck();
    let config = ExperimentConfig::default();
    let similar = generate_reference(&config.similar_reference).expect("similar reference");
    let extrapolation =
        generate_reference(&config.extrapolation_reference).expect("extrapolation reference");
    let references = [similar, extrapolation];

    let regularized = FilterUnderTest::from_report(regularized_run()).expect("filter");
    // A wider network gives the plain objective enough slack to absorb model
    // content (here most of the mass term), which is exactly what breaks it
    // outside the training envelope.
    let mut plain_cfg = TrainConfig::new(
        ObjectiveConfig::least_squares(),
        Some(tanh_net(&[16, 16])),
        1,
    );
    plain_cfg.max_iterations = 20_000;
    plain_cfg.lbfgs = None;
    let plain_report = train(&plain_cfg, dataset, None).expect("plain training");
    let plain = FilterUnderTest::from_report(&plain_report).expect("filter");
    let model_only = FilterUnderTest::new(
        closed_form_ls(dataset, 3).expect("closed form"),
        None,
        ObjectiveKind::LeastSquares,
    );

    let (reg_eval, _) = evaluate_filter(&regularized, &references, plant).expect("evaluate");
    let (plain_eval, _) = evaluate_filter(&plain, &references, plant).expect("evaluate");
    let (model_eval, _) = evaluate_filter(&model_only, &references, plant).expect("evaluate");

    let extrap_ratio = reg_eval.per_reference[1].ffw_rmse / plain_eval.per_reference[1].ffw_rmse;
    assert!(
        extrap_ratio <= 0.2,
        "extrapolation: regularized rmse {:.4e} vs plain {:.4e} (ratio {extrap_ratio:.3})",
        reg_eval.per_reference[1].ffw_rmse,
        plain_eval.per_reference[1].ffw_rmse
    );
    let similar_ratio = reg_eval.per_reference[0].ffw_rmse / model_eval.per_reference[0].ffw_rmse;
    assert!(
        similar_ratio <= 0.2,
        "in distribution: regularized rmse {:.4e} vs model-only {:.4e} (ratio {similar_ratio:.3})",
        reg_eval.per_reference[0].ffw_rmse,
        model_eval.per_reference[0].ffw_rmse
    );
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 300.0, "took {dt:.1}s, budget 300s");
    println!(
        "PASS generalization: extrapolation ratio {extrap_ratio:.3}, in-distribution ratio {similar_ratio:.3} [{dt:.2}s]"
    );
}

#[test]
fn a09_analytic_gradients_match_central_differences() {
    let _g = gate();
    let t0 = Instant::now();
    let plant = StribeckPlant::standard(FS);
    let dataset = synthesize_dataset(&plant, &small_specs()).expect("dataset");
    let problem = Problem::from_dataset(&dataset, 3, DEFAULT_RANK_TOLERANCE).expect("problem");
    let theta = LinearModel::from_slice(&[0.3, 1.2, 4.0]).expect("theta");
    let net = Network::init(&[3, 5, 5, 1], Activation::Tanh, 3).expect("net");
    let x0 = flatten(&theta, Some(&net));

    let objectives = [
        ("plain", ObjectiveConfig::least_squares()),
        (
            "regularized",
            ObjectiveConfig::new(ObjectiveKind::OrthogonalRegularized, 0.01).expect("lambda"),
        ),
        (
            "projected",
            ObjectiveConfig {
                kind: ObjectiveKind::ExplicitProjection,
                lambda: 0.0,
            },
        ),
    ];
    let mut report = Vec::new();
    for (name, objective) in objectives {
        let loss_at = |x: &DVector<f64>| -> f64 {
            let p = unflatten(x, 3, Some(&net)).expect("unflatten");
            evaluate(&objective, &p.theta, p.network.as_ref(), &problem)
                .expect("loss")
                .total
        };
        let p = unflatten(&x0, 3, Some(&net)).expect("unflatten");
        let (_, d_theta, d_phi) =
            evaluate_with_gradients(&objective, &p.theta, p.network.as_ref(), &problem)
                .expect("gradients");
        let analytic = flat_gradient(&d_theta, d_phi.as_ref());

        let mut fd = DVector::zeros(x0.len());
        for i in 0..x0.len() {
            let h = 1e-6 * (1.0 + x0[i].abs());
            let mut hi = x0.clone();
            hi[i] += h;
            let mut lo = x0.clone();
            lo[i] -= h;
            fd[i] = (loss_at(&hi) - loss_at(&lo)) / (2.0 * h);
        }
        let rel = (&analytic - &fd).norm() / fd.norm();
        assert!(
            rel <= 1e-5,
            "{name}: analytic gradient deviates from central differences by {rel:.3e}"
        );
        report.push(format!("{name} {rel:.1e}"));
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 30.0, "took {dt:.1}s, budget 30s");
    println!("PASS gradient check: {} [{dt:.2}s]", report.join(", "));
}

#[test]
fn a10_projection_operators_satisfy_their_algebra() {
    let _g = gate();
    let t0 = Instant::now();
    let (_, dataset) = stribeck();
    let problem = Problem::from_dataset(dataset, 3, DEFAULT_RANK_TOLERANCE).expect("problem");
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for entry in problem.entries().iter().take(3) {
        let basis = entry.basis();
        let u1 = basis.u1();
        let gram_dev = (u1.tr_mul(u1) - DMatrix::identity(u1.ncols(), u1.ncols())).amax();
        assert!(gram_dev <= 1e-10, "basis not orthonormal: {gram_dev:.3e}");
        worst = worst.max(gram_dev);
        for _ in 0..5 {
            let v = DVector::from_fn(u1.nrows(), |_, _| rng.gen_range(-1.0..1.0));
            let u = DVector::from_fn(u1.nrows(), |_, _| rng.gen_range(-1.0..1.0));
            let p1v = project_model_subspace(basis, &v).expect("model projection");
            let p2v = project_complement(basis, &v).expect("complement projection");

            let idem = (project_model_subspace(basis, &p1v).expect("projection") - &p1v).norm()
                / v.norm();
            assert!(idem <= 1e-10, "projection not idempotent: {idem:.3e}");

            let p1u = project_model_subspace(basis, &u).expect("model projection");
            let adj = (p1u.dot(&v) - u.dot(&p1v)).abs() / (u.norm() * v.norm());
            assert!(adj <= 1e-10, "projection not self-adjoint: {adj:.3e}");

            let comp = (&p1v + &p2v - &v).norm() / v.norm();
            assert!(comp <= 1e-10, "projections don't sum to identity: {comp:.3e}");

            let norm_gap = (p1v.norm() - u1.tr_mul(&v).norm()).abs() / v.norm();
            assert!(
                norm_gap <= 1e-10,
                "coordinate norm mismatch: {norm_gap:.3e}"
            );
            worst = worst.max(idem).max(adj).max(comp).max(norm_gap);
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 5.0, "took {dt:.2}s, budget 5s");
    println!("PASS projection algebra: worst deviation {worst:.2e} [{dt:.2}s]");
}

#[test]
fn a11_exact_inverse_then_forward_simulation_returns_the_reference() {
    let _g = gate();
    let t0 = Instant::now();
    let plant = StribeckPlant::standard(FS);
    let specs = default_training_references();
    assert_eq!(specs.len(), 9);
    let mut worst: f64 = 0.0;
    for (j, spec) in specs.iter().enumerate() {
        let r = generate_reference(spec).expect("reference");
        let f = plant.exact_inverse(&r).expect("inverse");
        let y = plant.forward_simulate(&f).expect("simulation");
        let dev = r
            .samples()
            .iter()
            .zip(y.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-8, "reference {j}: round trip off by {dev:.3e}");
        worst = worst.max(dev);
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 10.0, "took {dt:.1}s, budget 10s");
    println!("PASS plant round trip: 9 references, worst sample error {worst:.2e} [{dt:.2}s]");
}
