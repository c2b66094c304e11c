//! Acceptance suite: one test per release criterion, each printing a
//! PASS line on success. Run with `cargo test --test acceptance`.

use fedshift::config::{DataConfig, ExperimentConfig, PartitionConfig, PartitionMethod};
use fedshift::dataspace::{apply_split, generate_synthetic, ShiftKind, ShiftRecipe, SplitSpec};
use fedshift::fedsim::{
    aggregate_fedgma, aggregate_mean_update, local_update, project_simplex, run_experiment,
    run_round, ClientState, LocalContext, MethodConfig, RoundPlan, RunRecord, ServerState,
};
use fedshift::metrics::{
    compute_r_dg, compute_r_fl, select_model, SelectionPolicy, TrainProcedure, ValidationSplit,
};
use fedshift::model::{
    backward_from_representation, forward, loss_and_grad, loss_value, Architecture, LossKind,
    ModelSpec, OptimizerConfig, ParamVector, Targets,
};
use fedshift::objectives::{
    coral_penalty, coral_penalty_and_grad, fedsr_penalty, fedsr_penalty_and_grad, irm_penalty,
    irm_penalty_and_grad, mmd_penalty, mmd_penalty_and_grad, prox_grad, prox_term, DomainBatch,
    DroWeights,
};
use fedshift::partition::{
    brute_force_optimal_variance, check_constraints, partition_heterogeneous, DomainSizes,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::Command;

fn pass(name: &str) {
    println!("ACCEPTANCE {name}: PASS");
}

// --- partition -----------------------------------------------------------

#[test]
fn acceptance_partition_example_one_exactness() {
    let sizes = DomainSizes::new(vec![10, 20, 30, 40, 100]).unwrap();
    let plan = partition_heterogeneous(&sizes, 2, 0.0, 0).unwrap();
    assert_eq!(plan.client_counts(0), vec![10, 20, 30, 40, 0]);
    assert_eq!(plan.client_counts(1), vec![0, 0, 0, 0, 100]);
    assert_eq!(plan.client_total_variance(), 0.0);
    pass("partition-example-1-exactness");
}

#[test]
fn acceptance_constraint_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc257);
    let mut instances = 0;
    while instances < 200 {
        let domains = rng.random_range(1..=8);
        let clients = rng.random_range(1..=12);
        let sizes: Vec<usize> = (0..domains).map(|_| rng.random_range(1..=500)).collect();
        if sizes.iter().sum::<usize>() < clients {
            continue;
        }
        instances += 1;
        let ds = DomainSizes::new(sizes).unwrap();
        for lambda in [0.0, 0.1, 0.5, 1.0] {
            let plan = partition_heterogeneous(&ds, clients, lambda, instances as u64).unwrap();
            let report = check_constraints(&plan, &ds);
            assert!(
                report.c2_holds,
                "C2 failed: {:?} C={clients} l={lambda}",
                ds.as_slice()
            );
            if lambda == 0.0 {
                assert!(
                    report.c1_holds,
                    "C1 failed: {:?} C={clients}",
                    ds.as_slice()
                );
            }
        }
    }
    pass("constraint-suite");
}

#[test]
fn acceptance_proposition_one_oracle() {
    let mut checked = 0usize;
    let mut verify = |sizes: Vec<usize>, clients: usize| {
        let ds = DomainSizes::new(sizes).unwrap();
        if ds.total() < clients {
            return;
        }
        let plan = partition_heterogeneous(&ds, clients, 0.0, 0).unwrap();
        let optimal = brute_force_optimal_variance(&ds, clients).unwrap();
        assert!(
            (plan.client_total_variance() - optimal).abs() < 1e-9,
            "sizes {:?} C={clients}: greedy {} vs optimal {}",
            ds.as_slice(),
            plan.client_total_variance(),
            optimal
        );
        checked += 1;
    };

    // exhaustive small grids per domain count
    for a in 1..=40 {
        for clients in 2..=6 {
            verify(vec![a], clients);
        }
    }
    for a in 1..=15 {
        for b in 1..=15 {
            for clients in 3..=6 {
                verify(vec![a, b], clients);
            }
        }
    }
    let grid3 = [1usize, 2, 3, 5, 8, 13, 21];
    for &a in &grid3 {
        for &b in &grid3 {
            for &c in &grid3 {
                for clients in 4..=6 {
                    verify(vec![a, b, c], clients);
                }
            }
        }
    }
    let grid4 = [1usize, 2, 3, 5, 9, 17, 33];
    for &a in &grid4 {
        for &b in &grid4 {
            for &c in &grid4 {
                for &d in &grid4 {
                    for clients in 5..=6 {
                        verify(vec![a, b, c, d], clients);
                    }
                }
            }
        }
    }
    // randomized coverage at the size bound
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a0c);
    for _ in 0..500 {
        let domains = rng.random_range(1..=4);
        let clients = rng.random_range((domains + 1)..=6);
        let sizes: Vec<usize> = (0..domains).map(|_| rng.random_range(1..=500)).collect();
        verify(sizes, clients);
    }
    assert!(checked > 7_000);
    pass("proposition-1-oracle");
}

// --- optimization --------------------------------------------------------

#[test]
fn acceptance_one_step_fedavg_equals_centralized() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x15e9);
    for case in 0..20u64 {
        let domains = rng.random_range(1..=4);
        let clients = rng.random_range(1..=6);
        let lambda = [0.0, 0.1, 0.5, 1.0, rng.random_range(0.0..1.0)][rng.random_range(0..5usize)];
        let classes = rng.random_range(2..=3);
        let dim = rng.random_range(2..=5);
        let dataset = generate_synthetic(
            &ShiftRecipe {
                kind: ShiftKind::MeanShift,
                magnitudes: (0..domains).map(|d| d as f64 * 0.7).collect(),
                class_separation: 1.5,
                noise_scale: 1.0,
            },
            domains,
            classes,
            rng.random_range(20..=40),
            dim,
            case,
        )
        .unwrap();
        let spec = ModelSpec {
            architecture: Architecture::Logistic,
            input_dim: dim,
            classes,
            hidden: 16,
        };
        let lr = 0.25;
        let sizes = DomainSizes::new(dataset.domain_sizes()).unwrap();
        let plan = partition_heterogeneous(&sizes, clients, lambda, case).unwrap();
        let assignment = fedshift::partition::materialize(&plan, dataset.domains(), case).unwrap();
        let init = spec.init_params(case);
        let method = MethodConfig::Erm;
        let mut client_states: Vec<ClientState> = (0..clients)
            .map(|c| {
                ClientState::new(
                    c,
                    dataset.subset(&assignment.client_indices(c)),
                    &spec,
                    OptimizerConfig::sgd(lr),
                    &method,
                    &init,
                )
                .unwrap()
            })
            .collect();
        let mut server = ServerState::new(init.clone(), &method, domains, None);
        run_round(
            &mut server,
            &mut client_states,
            &spec,
            &method,
            &RoundPlan {
                epochs: 1,
                batch_size: 1 << 20,
                seed: case,
                participants: None,
            },
            LossKind::CrossEntropy,
        )
        .unwrap();

        let (_, grad) = loss_and_grad(
            &spec,
            &init,
            dataset.features(),
            Targets::Hard(dataset.labels()),
            LossKind::CrossEntropy,
        )
        .unwrap();
        let mut expect = init;
        expect.add_scaled(&grad, -lr).unwrap();
        let distance = server.params.distance(&expect).unwrap();
        assert!(distance <= 1e-9, "case {case}: distance {distance}");
    }
    pass("one-step-fedavg-centralized-equivalence");
}

fn finite_difference_check(
    params: &ParamVector,
    analytic: &ParamVector,
    mut value_at: impl FnMut(&ParamVector) -> f64,
    context: &str,
) {
    let h = 1e-5;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.values_mut()[i] += h;
        let mut minus = params.clone();
        minus.values_mut()[i] -= h;
        let fd = (value_at(&plus) - value_at(&minus)) / (2.0 * h);
        let a = analytic.values()[i];
        let denom = fd.abs().max(a.abs()).max(1e-6);
        assert!(
            ((fd - a) / denom).abs() <= 1e-4,
            "{context}, component {i}: fd {fd} vs analytic {a}"
        );
    }
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    classes: usize,
) -> (Array2<f64>, Vec<usize>) {
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.5..1.5));
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

#[test]
fn acceptance_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x96ad);
    let linear = ModelSpec {
        architecture: Architecture::Linear,
        input_dim: 3,
        classes: 2,
        hidden: 16,
    };
    let logistic = ModelSpec {
        architecture: Architecture::Logistic,
        input_dim: 3,
        classes: 3,
        hidden: 16,
    };
    let mlp = ModelSpec {
        architecture: Architecture::Mlp,
        input_dim: 3,
        classes: 3,
        hidden: 4,
    };

    // model losses: every architecture x loss combination
    for (spec, loss, name) in [
        (&linear, LossKind::Squared, "linear/squared"),
        (&logistic, LossKind::CrossEntropy, "logistic/ce"),
        (&logistic, LossKind::Squared, "logistic/squared"),
        (&mlp, LossKind::CrossEntropy, "mlp/ce"),
        (&mlp, LossKind::Squared, "mlp/squared"),
    ] {
        for point in 0..20 {
            let mut params = spec.init_params(point);
            for v in params.values_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            let (x, y) = random_batch(&mut rng, 5, spec.input_dim, spec.classes);
            let (_, grad) =
                loss_and_grad(spec, &params, x.view(), Targets::Hard(&y), loss).unwrap();
            finite_difference_check(
                &params,
                &grad,
                |p| loss_value(spec, p, x.view(), Targets::Hard(&y), loss).unwrap(),
                &format!("{name} point {point}"),
            );
        }
    }

    // differentiable penalties, differentiated through the mlp featurizer
    let spec = &mlp;
    let domain_batches = |rng: &mut ChaCha8Rng| -> Vec<DomainBatch> {
        (0..2)
            .map(|d| {
                let (x, y) = random_batch(rng, 4, spec.input_dim, spec.classes);
                DomainBatch {
                    domain: d,
                    features: x,
                    labels: y,
                }
            })
            .collect()
    };
    for point in 0..20u64 {
        let mut params = spec.init_params(100 + point);
        for v in params.values_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
        let batches = domain_batches(&mut rng);

        for loss in [LossKind::CrossEntropy, LossKind::Squared] {
            let (_, grad) = irm_penalty_and_grad(spec, &params, &batches, loss).unwrap();
            finite_difference_check(
                &params,
                &grad,
                |p| irm_penalty(spec, p, &batches, loss).unwrap(),
                &format!("irm/{loss:?} point {point}"),
            );
        }

        let reprs_of = |p: &ParamVector| -> Vec<Array2<f64>> {
            batches
                .iter()
                .map(|b| forward(spec, p, b.features.view()).unwrap().representation)
                .collect()
        };
        let chain = |p: &ParamVector, repr_grads: &[Array2<f64>]| -> ParamVector {
            let mut total = ParamVector::zeros(spec.layout());
            for (b, rg) in batches.iter().zip(repr_grads) {
                let g =
                    backward_from_representation(spec, p, b.features.view(), rg.view()).unwrap();
                total.add_scaled(&g, 1.0).unwrap();
            }
            total
        };

        let (_, repr_grads) = coral_penalty_and_grad(&reprs_of(&params)).unwrap();
        finite_difference_check(
            &params,
            &chain(&params, &repr_grads),
            |p| coral_penalty(&reprs_of(p)).unwrap(),
            &format!("coral point {point}"),
        );

        let bandwidth = Some(1.3);
        let (_, repr_grads) = mmd_penalty_and_grad(&reprs_of(&params), bandwidth).unwrap();
        finite_difference_check(
            &params,
            &chain(&params, &repr_grads),
            |p| mmd_penalty(&reprs_of(p), bandwidth).unwrap(),
            &format!("mmd point {point}"),
        );

        // fedsr on the pooled batch
        let pooled_x = {
            let rows = batches.iter().map(|b| b.features.nrows()).sum();
            let mut x = Array2::zeros((rows, spec.input_dim));
            let mut r = 0;
            for b in &batches {
                for row in b.features.rows() {
                    x.row_mut(r).assign(&row);
                    r += 1;
                }
            }
            x
        };
        let pooled_y: Vec<usize> = batches
            .iter()
            .flat_map(|b| b.labels.iter().copied())
            .collect();
        let fedsr_value = |p: &ParamVector| -> f64 {
            let reprs = forward(spec, p, pooled_x.view()).unwrap().representation;
            fedsr_penalty(reprs.view(), &pooled_y, 0.05, 0.02).unwrap()
        };
        let reprs = forward(spec, &params, pooled_x.view())
            .unwrap()
            .representation;
        let (_, rg) = fedsr_penalty_and_grad(reprs.view(), &pooled_y, 0.05, 0.02).unwrap();
        let grad = backward_from_representation(spec, &params, pooled_x.view(), rg.view()).unwrap();
        finite_difference_check(&params, &grad, fedsr_value, &format!("fedsr point {point}"));

        // proximal term
        let global = spec.init_params(300 + point);
        let grad = prox_grad(&params, &global, 0.7).unwrap();
        finite_difference_check(
            &params,
            &grad,
            |p| prox_term(p, &global, 0.7).unwrap(),
            &format!("prox point {point}"),
        );
    }
    pass("gradient-checks");
}

// --- simplex -------------------------------------------------------------

/// Exact projection oracle: enumerate every support set and pick the
/// feasible KKT candidate closest to the input.
fn simplex_oracle(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sum: f64 = support.iter().map(|&i| v[i]).sum();
        let theta = (sum - 1.0) / support.len() as f64;
        let mut candidate = vec![0.0; n];
        let mut feasible = true;
        for &i in &support {
            candidate[i] = v[i] - theta;
            if candidate[i] < -1e-12 {
                feasible = false;
                break;
            }
        }
        if !feasible {
            continue;
        }
        let distance: f64 = v
            .iter()
            .zip(&candidate)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        if best.as_ref().is_none_or(|(d, _)| distance < *d) {
            best = Some((distance, candidate));
        }
    }
    best.expect("full support is always a candidate").1
}

#[test]
fn acceptance_simplex_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51a9);
    for _ in 0..100 {
        let dim = rng.random_range(1..=5);
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let projected = project_simplex(&v).unwrap();
        let oracle = simplex_oracle(&v);
        for (a, b) in projected.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6, "{v:?}: {projected:?} vs {oracle:?}");
        }
    }

    // AFL beta under 100 simulated rounds of ascent on random losses
    let mut beta = vec![0.25; 4];
    for _ in 0..100 {
        let shifted: Vec<f64> = beta
            .iter()
            .map(|&b| b + 0.3 * rng.random_range(0.0..2.0))
            .collect();
        beta = project_simplex(&shifted).unwrap();
        let sum: f64 = beta.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
        assert!(beta.iter().all(|&b| b >= 0.0));
    }

    // GroupDRO weights under 100 exponentiated-gradient steps
    let mut dro = DroWeights::new(vec![0, 1, 2], 0.4).unwrap();
    for _ in 0..100 {
        let losses: Vec<(usize, f64)> = (0..3).map(|d| (d, rng.random_range(0.0..2.5))).collect();
        dro.update(&losses);
        let sum: f64 = dro.weights().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
        assert!(dro.weights().iter().all(|&q| q >= 0.0));
    }
    pass("simplex-suite");
}

// --- reduction identities -------------------------------------------------

#[test]
fn acceptance_reduction_identities() {
    // FedGMA with tau = 0 is exactly the weighted-average update
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a3);
    let layout = ModelSpec {
        architecture: Architecture::Logistic,
        input_dim: 3,
        classes: 2,
        hidden: 16,
    }
    .layout();
    for _ in 0..20 {
        let base = {
            let mut p = ParamVector::zeros(layout.clone());
            for v in p.values_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            p
        };
        let deltas: Vec<(ParamVector, f64)> = (0..4)
            .map(|_| {
                let mut p = ParamVector::zeros(layout.clone());
                for v in p.values_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                (p, rng.random_range(1.0..5.0_f64).floor())
            })
            .collect();
        let refs: Vec<(&ParamVector, f64)> = deltas.iter().map(|(p, w)| (p, *w)).collect();
        let masked = aggregate_fedgma(&base, &refs, 0.0, 1.0).unwrap();
        let plain = aggregate_mean_update(&base, &refs).unwrap();
        assert_eq!(masked.values(), plain.values());
    }

    // Scaffold with zero variates for one round equals FedAvg bit for bit
    let dataset = generate_synthetic(
        &ShiftRecipe {
            kind: ShiftKind::MeanShift,
            magnitudes: vec![0.0, 1.0],
            class_separation: 1.5,
            noise_scale: 1.0,
        },
        2,
        2,
        30,
        3,
        1,
    )
    .unwrap();
    let spec = ModelSpec {
        architecture: Architecture::Logistic,
        input_dim: 3,
        classes: 2,
        hidden: 16,
    };
    let sizes = DomainSizes::new(dataset.domain_sizes()).unwrap();
    let plan = partition_heterogeneous(&sizes, 3, 0.5, 2).unwrap();
    let assignment = fedshift::partition::materialize(&plan, dataset.domains(), 2).unwrap();
    let init = spec.init_params(3);
    let round_plan = RoundPlan {
        epochs: 2,
        batch_size: 8,
        seed: 4,
        participants: None,
    };
    let run_one = |method: MethodConfig| -> ParamVector {
        let mut clients: Vec<ClientState> = (0..3)
            .map(|c| {
                ClientState::new(
                    c,
                    dataset.subset(&assignment.client_indices(c)),
                    &spec,
                    OptimizerConfig::sgd(0.1),
                    &method,
                    &init,
                )
                .unwrap()
            })
            .collect();
        let mut server = ServerState::new(init.clone(), &method, 2, None);
        run_round(
            &mut server,
            &mut clients,
            &spec,
            &method,
            &round_plan,
            LossKind::CrossEntropy,
        )
        .unwrap();
        server.params
    };
    assert_eq!(
        run_one(MethodConfig::Scaffold).values(),
        run_one(MethodConfig::Erm).values()
    );

    // single-domain clients collapse penalized objectives to plain ERM
    let single = generate_synthetic(
        &ShiftRecipe {
            kind: ShiftKind::MeanShift,
            magnitudes: vec![0.0],
            class_separation: 1.5,
            noise_scale: 1.0,
        },
        1,
        2,
        16,
        3,
        9,
    )
    .unwrap();
    let mlp = ModelSpec {
        architecture: Architecture::Mlp,
        input_dim: 3,
        classes: 2,
        hidden: 4,
    };
    let global = mlp.init_params(11);
    let plan2 = RoundPlan {
        epochs: 2,
        batch_size: 4,
        seed: 13,
        participants: None,
    };
    let local_run = |method: MethodConfig| -> ParamVector {
        let mut client = ClientState::new(
            0,
            single.clone(),
            &mlp,
            OptimizerConfig::sgd(0.1),
            &method,
            &global,
        )
        .unwrap();
        let ctx = LocalContext {
            model: &mlp,
            method: &method,
            loss: LossKind::CrossEntropy,
            plan: &plan2,
            round: 0,
            global: &global,
            scaffold_server_variate: None,
            afl_beta: None,
        };
        local_update(&mut client, &ctx).unwrap().params
    };
    let erm = local_run(MethodConfig::Erm);
    for method in [
        MethodConfig::Irm {
            penalty_weight: 100.0,
        },
        MethodConfig::Coral {
            penalty_weight: 100.0,
        },
        MethodConfig::Mmd {
            penalty_weight: 100.0,
            bandwidth: None,
        },
        MethodConfig::GroupDro { group_lr: 0.5 },
    ] {
        let name = method.id();
        let out = local_run(method);
        assert_eq!(out.values(), erm.values(), "{name} did not collapse to erm");
    }
    pass("reduction-identities");
}

// --- trends ---------------------------------------------------------------

fn trend_config(lambda: f64, clients: usize, seed: u64, method: MethodConfig) -> ExperimentConfig {
    let domains = 6;
    ExperimentConfig {
        data: DataConfig::Synthetic {
            recipe: ShiftRecipe {
                kind: ShiftKind::MeanShift,
                magnitudes: (0..domains).map(|d| d as f64 * 1.2).collect(),
                class_separation: 2.0,
                noise_scale: 1.0,
            },
            domains,
            classes: 3,
            n_per_domain: 200,
            dim: 6,
        },
        split: SplitSpec {
            train_domains: [0, 1, 2, 3].into(),
            heldout_validation_domains: [4].into(),
            test_domains: [5].into(),
            in_domain_val_fraction: 0.1,
            in_domain_test_fraction: 0.1,
        },
        partition: PartitionConfig {
            method: PartitionMethod::Heterogeneous { lambda },
            clients,
            seed: 77,
        },
        model: ModelSpec {
            architecture: Architecture::Mlp,
            input_dim: 6,
            classes: 3,
            hidden: 8,
        },
        method,
        rounds: 6,
        local_epochs: 8,
        batch_size: 8,
        optimizer: OptimizerConfig::adam(0.1),
        loss: LossKind::CrossEntropy,
        selection: SelectionPolicy {
            validation_split: ValidationSplit::HeldoutVal,
            runs: 1,
        },
        seed,
        participation: None,
    }
}

/// DG-test accuracy at the round early stopping picks on the held-out
/// validation domain.
fn selected_dg_test(record: &RunRecord) -> f64 {
    let selection = select_model(
        std::slice::from_ref(record),
        &SelectionPolicy {
            validation_split: ValidationSplit::HeldoutVal,
            runs: 1,
        },
    )
    .unwrap();
    record
        .rows
        .iter()
        .find(|r| r.split == "dg-test" && r.round == selection.round)
        .expect("dg-test evaluated every round")
        .value
}

fn mean_selected_dg_test(lambda: f64, clients: usize, method: MethodConfig) -> f64 {
    let mut total = 0.0;
    for seed in 0..5u64 {
        let config = trend_config(lambda, clients, seed, method.clone());
        let record = run_experiment(&config, 0).unwrap();
        total += selected_dg_test(&record);
    }
    total / 5.0
}

#[test]
fn acceptance_lambda_trend() {
    const SLACK: f64 = 0.02;
    let at_zero = mean_selected_dg_test(0.0, 20, MethodConfig::Erm);
    let at_tenth = mean_selected_dg_test(0.1, 20, MethodConfig::Erm);
    let at_one = mean_selected_dg_test(1.0, 20, MethodConfig::Erm);
    println!("lambda trend: {at_zero:.4} (l=0) / {at_tenth:.4} (l=0.1) / {at_one:.4} (l=1)");
    assert!(
        at_zero <= at_tenth + SLACK,
        "dg-test at lambda=0 ({at_zero}) above lambda=0.1 ({at_tenth}) beyond slack"
    );
    assert!(
        at_tenth <= at_one + SLACK,
        "dg-test at lambda=0.1 ({at_tenth}) above lambda=1 ({at_one}) beyond slack"
    );
    pass("lambda-trend");
}

#[test]
fn acceptance_client_count_trend() {
    const SLACK: f64 = 0.02;
    for method in [
        MethodConfig::Erm,
        MethodConfig::FedSr {
            l2_regularizer: 0.05,
            cmi_regularizer: 0.01,
        },
    ] {
        let name = method.id();
        let at_1 = mean_selected_dg_test(0.1, 1, method.clone());
        let at_10 = mean_selected_dg_test(0.1, 10, method.clone());
        let at_50 = mean_selected_dg_test(0.1, 50, method.clone());
        println!("client trend ({name}): {at_1:.4} (C=1) / {at_10:.4} (C=10) / {at_50:.4} (C=50)");
        assert!(
            at_10 <= at_1 + SLACK,
            "{name}: dg-test rose from C=1 ({at_1}) to C=10 ({at_10}) beyond slack"
        );
        assert!(
            at_50 <= at_10 + SLACK,
            "{name}: dg-test rose from C=10 ({at_10}) to C=50 ({at_50}) beyond slack"
        );
    }
    pass("client-count-trend");
}

// --- communication harness -------------------------------------------------

fn cli_config_json() -> serde_json::Value {
    serde_json::json!({
        "data": {
            "source": "synthetic",
            "recipe": {
                "kind": "mean-shift",
                "magnitudes": [0.0, 1.2, 2.4, 3.6, 4.8, 6.0],
                "class_separation": 2.0,
                "noise_scale": 1.0
            },
            "domains": 6,
            "classes": 3,
            "n_per_domain": 60,
            "dim": 6
        },
        "split": {
            "train_domains": [0, 1, 2, 3],
            "heldout_validation_domains": [4],
            "test_domains": [5],
            "in_domain_val_fraction": 0.1,
            "in_domain_test_fraction": 0.1
        },
        "partition": {"kind": "heterogeneous", "lambda": 0.1, "clients": 10, "seed": 77},
        "model": {"architecture": "mlp", "input_dim": 6, "classes": 3, "hidden": 8},
        "method": {"id": "erm"},
        "rounds": 10,
        "local_epochs": 5,
        "batch_size": 8,
        "optimizer": {"kind": "adam", "learning_rate": 0.05},
        "loss": "cross-entropy",
        "selection": {"validation_split": "heldout-val", "runs": 2},
        "seed": 3
    })
}

#[test]
fn acceptance_communication_non_monotonicity_harness() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = cli_config_json();
    config["sweep"] = serde_json::json!({
        "axis": "communication",
        "values": [5, 10, 50],
        "fixed-total-computation": true
    });
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let out = dir.path().join("sweep");
    let result = Command::new(env!("CARGO_BIN_EXE_fedshift"))
        .args([
            "sweep",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .env_remove("FEDSHIFT_OUT")
        .output()
        .unwrap();
    assert!(result.status.success(), "{result:?}");

    // E-adjustment arithmetic: R x E must stay 50 across the sweep
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "axis,value,runs,dg_test_best_mean,dg_test_best_std,rounds,epochs"
    );
    let mut seen = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let rounds: usize = cells[5].parse().unwrap();
        let epochs: usize = cells[6].parse().unwrap();
        assert_eq!(rounds * epochs, 50, "R x E not constant on {line}");
        seen.push((rounds, epochs));
    }
    assert_eq!(seen, vec![(5, 10), (10, 5), (50, 1)]);

    // curve data: per-point metrics expose accuracy per round on dg-test
    for value in ["5", "10", "50"] {
        let metrics = std::fs::read_to_string(
            out.join(format!("point-communication-{value}"))
                .join("metrics.csv"),
        )
        .unwrap();
        let rows = metrics
            .lines()
            .filter(|l| l.contains(",dg-test,accuracy,"))
            .count();
        let rounds: usize = value.parse().unwrap();
        // two runs, rounds + 1 evaluations each
        assert_eq!(rows, 2 * (rounds + 1));
    }
    pass("communication-non-monotonicity-harness");
}

// --- difficulty metrics -----------------------------------------------------

#[test]
fn acceptance_difficulty_metrics() {
    // R_FL(lambda) is exactly 1 for a single-client federation
    let dataset = generate_synthetic(
        &ShiftRecipe {
            kind: ShiftKind::MeanShift,
            magnitudes: vec![0.0, 1.0],
            class_separation: 2.0,
            noise_scale: 1.0,
        },
        2,
        2,
        60,
        4,
        5,
    )
    .unwrap();
    let proc = TrainProcedure {
        model: ModelSpec {
            architecture: Architecture::Logistic,
            input_dim: 4,
            classes: 2,
            hidden: 16,
        },
        optimizer: OptimizerConfig::adam(0.05),
        loss: LossKind::CrossEntropy,
        rounds: 3,
        epochs: 2,
        batch_size: 16,
        seed: 7,
    };
    let in_test = dataset.subset(&(0..40).collect::<Vec<_>>());
    let r_fl = compute_r_fl(&dataset, &in_test, 0.5, 1, 9, &proc).unwrap();
    assert_eq!(r_fl.ratio, 1.0);

    // no-shift synthetic data: R_DG within 0.05 of 1 over 5 seeds
    let split_spec = SplitSpec {
        train_domains: [0, 1, 2, 3].into(),
        heldout_validation_domains: [4].into(),
        test_domains: [5].into(),
        in_domain_val_fraction: 0.1,
        in_domain_test_fraction: 0.1,
    };
    let mlp = ModelSpec {
        architecture: Architecture::Mlp,
        input_dim: 6,
        classes: 3,
        hidden: 8,
    };
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let flat = generate_synthetic(
            &ShiftRecipe {
                kind: ShiftKind::MeanShift,
                magnitudes: vec![0.0; 6],
                class_separation: 2.0,
                noise_scale: 1.0,
            },
            6,
            3,
            200,
            6,
            seed,
        )
        .unwrap();
        let split = apply_split(&flat, &split_spec, seed + 100).unwrap();
        let proc = TrainProcedure {
            model: mlp,
            optimizer: OptimizerConfig::adam(0.02),
            loss: LossKind::CrossEntropy,
            rounds: 3,
            epochs: 3,
            batch_size: 8,
            seed,
        };
        let report = compute_r_dg(
            &split.train,
            &split.dg_test_eval,
            &split.dg_test_pool,
            &proc,
        )
        .unwrap();
        ratios.push(report.ratio);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    println!("no-shift R_DG ratios {ratios:?} mean {mean:.4}");
    assert!(
        (mean - 1.0).abs() <= 0.05,
        "no-shift R_DG mean {mean} outside 1 +/- 0.05"
    );

    // golden-seed shifted recipe: rotation makes the test domain genuinely
    // out of reach without cheating
    let golden_seed = 2u64;
    let rotated = generate_synthetic(
        &ShiftRecipe {
            kind: ShiftKind::Rotation,
            magnitudes: (0..6).map(|d| d as f64 * 0.7).collect(),
            class_separation: 2.0,
            noise_scale: 1.0,
        },
        6,
        3,
        200,
        6,
        golden_seed,
    )
    .unwrap();
    let split = apply_split(&rotated, &split_spec, golden_seed + 100).unwrap();
    let proc = TrainProcedure {
        model: mlp,
        optimizer: OptimizerConfig::adam(0.03),
        loss: LossKind::CrossEntropy,
        rounds: 4,
        epochs: 4,
        batch_size: 8,
        seed: golden_seed,
    };
    let report = compute_r_dg(
        &split.train,
        &split.dg_test_eval,
        &split.dg_test_pool,
        &proc,
    )
    .unwrap();
    println!("shifted golden R_DG = {:.4}", report.ratio);
    assert!(
        report.ratio < 0.9,
        "golden R_DG {} not below 0.9",
        report.ratio
    );
    pass("difficulty-metrics");
}

// --- determinism -------------------------------------------------------------

#[test]
fn acceptance_determinism_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&cli_config_json()).unwrap(),
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let result = Command::new(env!("CARGO_BIN_EXE_fedshift"))
            .args([
                "run",
                "--config",
                path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .env_remove("FEDSHIFT_OUT")
            .output()
            .unwrap();
        assert!(result.status.success(), "{result:?}");
    }
    let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(a, b, "metrics CSVs differ between identical executions");
    pass("determinism-byte-identical-metrics");
}
