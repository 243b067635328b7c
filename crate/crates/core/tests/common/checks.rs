//! Checks shared by the per-topic suites and the acceptance runner. Each
//! panics with a diagnostic on failure.

use super::{
    central_difference, check_gradients, dtw_by_enumeration, nearest_label, random_tensor,
    rel_error, seeded, signed_rank_p_by_enumeration, weighted_sum, GradReport, FD_REL_TOL,
};
use rand::Rng as _;
use tsadv_core::attack::atn_loss;
use tsadv_core::data::MultivariateSeries;
use tsadv_core::distill::transfer_loss;
use tsadv_core::dtw::{
    cost_matrix, distance_tensor, distance_tensor_sequential, dtw_distance, hard_1nn, soft_1nn,
    DistanceTensor, DtwOptions,
};
use tsadv_core::evaluation::wilcoxon_signed_rank;
use tsadv_core::nn::{build, input_gradient, ArchitectureKind, ArchitectureSpec, Mode};
use tsadv_core::{Graph, Result, Tensor, Var};

const SEEDS: u64 = 20;

fn run<F>(name: &str, shapes: &[&[usize]], differentiate: &[usize], f: F)
where
    F: Fn(&mut Graph, &[Var], &mut tsadv_core::rng::Rng) -> Result<Var>,
{
    let mut total = GradReport::default();
    for seed in 0..SEEDS {
        let mut rng = seeded(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
        let weight_seed = seed + 1000;
        let report = check_gradients(&inputs, differentiate, None, &mut rng, |g, v| {
            f(g, v, &mut seeded(weight_seed))
        })
        .unwrap();
        total.merge(report);
    }
    assert!(total.passes(), "{name}: {total:?}");
}

pub fn conv1d_with_bias_and_padding() {
    run(
        "conv1d",
        &[&[2, 3, 7], &[4, 3, 3], &[4]],
        &[0, 1, 2],
        |g, v, r| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(g, y, r)
        },
    );
    run(
        "conv1d asymmetric",
        &[&[1, 2, 6], &[3, 2, 4]],
        &[0, 1],
        |g, v, r| {
            let y = g.conv1d(v[0], v[1], None, 1, 2)?;
            weighted_sum(g, y, r)
        },
    );
}

pub fn batch_norm_training_and_inference() {
    run(
        "bn train",
        &[&[3, 2, 5], &[2], &[2]],
        &[0, 1, 2],
        |g, v, r| {
            let y = g.batch_norm(v[0], v[1], v[2], None)?;
            weighted_sum(g, y, r)
        },
    );
    run(
        "bn eval",
        &[&[3, 2, 5], &[2], &[2]],
        &[0, 1, 2],
        |g, v, r| {
            let y = g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.7, 1.3])))?;
            weighted_sum(g, y, r)
        },
    );
}

pub fn pointwise_nonlinearities() {
    run("relu", &[&[4, 6]], &[0], |g, v, r| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, r)
    });
    run("tanh", &[&[4, 6]], &[0], |g, v, r| {
        let y = g.tanh(v[0])?;
        weighted_sum(g, y, r)
    });
}

pub fn pooling() {
    run("max_pool", &[&[2, 3, 9]], &[0], |g, v, r| {
        let y = g.max_pool(v[0])?;
        weighted_sum(g, y, r)
    });
    run("gap", &[&[2, 3, 9]], &[0], |g, v, r| {
        let y = g.global_avg_pool(v[0])?;
        weighted_sum(g, y, r)
    });
}

pub fn dense_softmax_and_selection() {
    run("dense", &[&[3, 5], &[4, 5], &[4]], &[0, 1, 2], |g, v, r| {
        let y = g.dense(v[0], v[1], v[2])?;
        weighted_sum(g, y, r)
    });
    run("softmax", &[&[3, 5]], &[0], |g, v, r| {
        let y = g.softmax(v[0])?;
        weighted_sum(g, y, r)
    });
    run("select_class", &[&[3, 5]], &[0], |g, v, _| {
        let p = g.softmax(v[0])?;
        let y = g.select_class(p, 2)?;
        g.sum(y)
    });
}

pub fn arithmetic_and_shape_ops() {
    run(
        "add/sub/mul/scale",
        &[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]],
        &[0, 1, 2],
        |g, v, r| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[2])?;
            let m = g.mul(s, v[1])?;
            let y = g.scale(m, -1.7)?;
            weighted_sum(g, y, r)
        },
    );
    run(
        "concat/reshape",
        &[&[2, 1, 4], &[2, 3, 4]],
        &[0, 1],
        |g, v, r| {
            let c = g.concat_channels(v[0], v[1])?;
            let y = g.reshape(c, vec![2, 16])?;
            weighted_sum(g, y, r)
        },
    );
    run("sum/mean", &[&[3, 4]], &[0], |g, v, _| {
        let sq = g.mul(v[0], v[0])?;
        let a = g.mean(sq)?;
        let b = g.sum(v[0])?;
        g.add(a, b)
    });
}

pub fn losses() {
    for temperature in [1.0, 10.0] {
        let mut rng = seeded(99);
        let target = {
            let t = random_tensor(&[3, 4], &mut rng);
            let rows: Vec<f64> = t
                .data()
                .chunks(4)
                .flat_map(|row| {
                    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(move |x| x / s)
                })
                .collect();
            Tensor::new(vec![3, 4], rows).unwrap()
        };
        run("soft_cross_entropy", &[&[3, 4]], &[0], |g, v, _| {
            let z = g.scale(v[0], 3.0)?;
            g.soft_cross_entropy(z, &target, temperature)
        });
    }
    run("mse", &[&[2, 5], &[2, 5]], &[0, 1], |g, v, _| {
        g.mse(v[0], v[1])
    });
}

pub fn distillation_loss() {
    let targets = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
    for (temperature, gamma) in [(1.0, 0.5), (10.0, 0.5), (10.0, 1.0), (4.0, 0.0)] {
        run("transfer_loss", &[&[2, 3]], &[0], |g, v, _| {
            transfer_loss(g, v[0], &targets, &[1, 0], temperature, gamma)
        });
    }
}

pub fn attack_loss_in_x_hat() {
    for beta in [1e-1, 1e-3] {
        run(
            "atn_loss",
            &[&[2, 1, 5], &[2, 1, 5], &[2, 5]],
            &[0],
            |g, v, _| {
                let flat = g.reshape(v[0], vec![2, 5])?;
                let y = g.softmax(flat)?;
                let r = g.softmax(v[2])?;
                atn_loss(g, v[1], v[0], y, r, beta)
            },
        );
    }
}

pub fn architecture(kind: ArchitectureKind, mode: Mode) {
    let (channels, length, classes) = (2, 12, 3);
    let mut total = GradReport::default();
    for seed in 0..SEEDS {
        let spec = ArchitectureSpec::new(kind, channels, length, classes);
        let net = build(spec, &mut seeded(seed)).unwrap();
        let mut rng = seeded(seed + 500);
        let batch = 3;
        let mut inputs = vec![random_tensor(&[batch, channels, length], &mut rng)];
        let mut extra = 1;
        if kind == ArchitectureKind::GatnGenerator {
            inputs.push(random_tensor(&[batch, channels, length], &mut rng));
            inputs.push(Tensor::full(&[batch, channels, length], 1.0));
            extra = 3;
        }
        inputs.extend(net.params().iter().map(|p| p.tensor.clone()));
        let all: Vec<usize> = (0..inputs.len())
            .filter(|&i| i == 0 || i >= extra)
            .collect();
        let report = check_gradients(&inputs, &all, Some(4), &mut rng, |g, v| {
            let out = match kind {
                ArchitectureKind::GatnGenerator => net.perturb(g, &v[extra..], v[0], v[1], v[2])?,
                _ => {
                    let z = net.logits(g, &v[extra..], v[0], mode)?;
                    g.softmax(z)?
                }
            };
            weighted_sum(g, out, &mut seeded(seed + 7))
        })
        .unwrap();
        total.merge(report);
    }
    assert!(total.passes(), "{kind:?} {mode:?}: {total:?}");
}

pub fn fcn_training_mode() {
    architecture(ArchitectureKind::Fcn, Mode::Train);
}

pub fn fcn_inference_mode() {
    architecture(ArchitectureKind::Fcn, Mode::Eval);
}

pub fn lenet5_student() {
    architecture(ArchitectureKind::Lenet5, Mode::Train);
}

pub fn gatn_generator() {
    architecture(ArchitectureKind::GatnGenerator, Mode::Train);
}

pub fn input_gradient_matches_finite_differences() {
    for seed in 0..SEEDS {
        let temperature = if seed % 2 == 0 { 1.0 } else { 10.0 };
        let spec = ArchitectureSpec::new(ArchitectureKind::Lenet5, 2, 12, 3);
        let net = build(spec, &mut seeded(seed)).unwrap();
        let mut rng = seeded(seed + 1);
        let x = random_tensor(&[2, 2, 12], &mut rng);
        let target = (seed % 3) as usize;
        let analytic = input_gradient(&net, &x, target, temperature).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let bound = net.bind(g, false);
            let z = net.logits(g, &bound, v[0], Mode::Eval)?;
            let z = g.scale(z, 1.0 / temperature)?;
            let p = g.softmax(z)?;
            let pt = g.select_class(p, target)?;
            g.sum(pt)
        };
        let inputs = [x];
        let mut checked = 0;
        for j in 0..inputs[0].numel() {
            if let Some(numeric) = central_difference(&inputs, 0, j, &f).unwrap() {
                let err = rel_error(analytic.data()[j], numeric);
                assert!(
                    err < FD_REL_TOL,
                    "seed {seed} coord {j}: {} vs {numeric}",
                    analytic.data()[j]
                );
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}

fn random_series(rng: &mut tsadv_core::rng::Rng, max_len: usize) -> Vec<f64> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

pub fn dtw_matches_path_enumeration() {
    let mut rng = seeded(11);
    for _ in 0..300 {
        let a = random_series(&mut rng, 6);
        let b = random_series(&mut rng, 6);
        let fast = dtw_distance(&a, &b).unwrap();
        let brute = dtw_by_enumeration(&a, &b);
        assert!(
            (fast - brute).abs() < 1e-9,
            "{a:?} {b:?}: {fast} vs {brute}"
        );
    }
}

pub fn extracted_path_is_valid_and_optimal() {
    let mut rng = seeded(12);
    for _ in 0..200 {
        let a = random_series(&mut rng, 6);
        let b = random_series(&mut rng, 6);
        let m = cost_matrix(&a, &b, DtwOptions::default()).unwrap();
        let path = m.path();
        assert_eq!(path[0], (0, 0));
        assert_eq!(*path.last().unwrap(), (a.len() - 1, b.len() - 1));
        for w in path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(di <= 1 && dj <= 1 && di + dj >= 1);
        }
        let cost: f64 = path.iter().map(|&(i, j)| (a[i] - b[j]).powi(2)).sum();
        assert!((cost.sqrt() - dtw_by_enumeration(&a, &b)).abs() < 1e-9);
    }
}

pub fn dtw_symmetry_and_identity() {
    let mut rng = seeded(13);
    for _ in 0..1000 {
        let a = random_series(&mut rng, 20);
        let b = random_series(&mut rng, 20);
        assert_eq!(dtw_distance(&a, &b).unwrap(), dtw_distance(&b, &a).unwrap());
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
    }
}

pub fn parallel_tensor_equals_sequential() {
    let mut rng = seeded(14);
    let make = |rng: &mut tsadv_core::rng::Rng, n: usize| -> Vec<MultivariateSeries> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(3..9);
                let chans = (0..2)
                    .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                MultivariateSeries::new(chans).unwrap().padded(8).unwrap()
            })
            .collect()
    };
    let test = make(&mut rng, 7);
    let train = make(&mut rng, 5);
    let par = distance_tensor(&test, &train, DtwOptions::default()).unwrap();
    let seq = distance_tensor_sequential(&test, &train, DtwOptions::default()).unwrap();
    assert_eq!(par, seq);
    for i in 0..7 {
        for j in 0..5 {
            for c in 0..2 {
                let brute = dtw_by_enumeration(test[i].valid(c), train[j].valid(c));
                assert!((par.get(i, j, c) - brute).abs() < 1e-9);
            }
        }
    }
}

fn random_problem(
    rng: &mut tsadv_core::rng::Rng,
    tied: bool,
) -> (DistanceTensor, Vec<usize>, usize, Vec<usize>) {
    let classes = rng.random_range(2..6);
    let n_train = rng.random_range(classes..classes + 10);
    let n_test = rng.random_range(1..6);
    let channels = rng.random_range(1..4);
    let mut labels: Vec<usize> = (0..n_train)
        .map(|i| {
            if i < classes {
                i
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let data: Vec<f64> = (0..n_test * n_train * channels)
        .map(|_| {
            if tied {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(0.0..10.0)
            }
        })
        .collect();
    let v = DistanceTensor::new(n_test, n_train, channels, data).unwrap();
    let expected = (0..n_test)
        .map(|i| {
            let rows: Vec<Vec<f64>> = (0..n_train)
                .map(|j| (0..channels).map(|c| v.get(i, j, c)).collect())
                .collect();
            nearest_label(&rows, &labels)
        })
        .collect();
    (v, labels, classes, expected)
}

pub fn soft_1nn_argmax_equals_hard_1nn() {
    let mut rng = seeded(15);
    let mut ties_seen = 0;
    for case in 0..1000 {
        let tied = case % 2 == 0;
        let (v, labels, classes, expected) = random_problem(&mut rng, tied);
        let soft = soft_1nn(&v, &labels, classes).unwrap();
        assert_eq!(soft.predictions, expected, "case {case}");
        assert_eq!(
            hard_1nn(&v, &labels, classes).unwrap(),
            expected,
            "case {case}"
        );
        for (p, z) in soft.probabilities.iter().zip(&soft.logits) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let best = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if z.iter().filter(|&&x| x == best).count() > 1 {
                ties_seen += 1;
            }
        }
    }
    assert!(
        ties_seen > 50,
        "only {ties_seen} cross-class ties exercised"
    );
}

pub fn signed_rank_matches_enumeration() {
    let mut rng = seeded(16);
    let mut checked = 0;
    while checked < 50 {
        let n = rng.random_range(5..=10);
        // Small integer values produce ties and zero differences.
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..6) as f64 + 0.5 * rng.random_range(0..2) as f64)
            .collect();
        let nonzero = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        let result = wilcoxon_signed_rank(&a, &b);
        if nonzero < 5 {
            assert!(result.is_err());
            continue;
        }
        let r = result.unwrap();
        let (w, p) = signed_rank_p_by_enumeration(&a, &b);
        assert_eq!(r.n, nonzero);
        assert!((r.statistic - w).abs() < 1e-12, "{a:?} {b:?}");
        assert!(
            (r.p_value - p).abs() < 1e-12,
            "{a:?} {b:?}: {} vs {p}",
            r.p_value
        );
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        checked += 1;
    }
}

pub fn signed_rank_all_positive_six() {
    let a = [3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let b = [0.0; 6];
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert!((r.p_value - 0.03125).abs() < 1e-12);
    assert_eq!(signed_rank_p_by_enumeration(&a, &b).1, 0.03125);
}

pub type Check = (&'static str, fn());

pub const GRADIENTS: &[Check] = &[
    ("conv1d", conv1d_with_bias_and_padding),
    ("batch norm", batch_norm_training_and_inference),
    ("relu/tanh", pointwise_nonlinearities),
    ("pooling", pooling),
    ("dense/softmax/select", dense_softmax_and_selection),
    ("arithmetic/shape", arithmetic_and_shape_ops),
    ("cross-entropy/mse", losses),
    ("transfer loss", distillation_loss),
    ("attack loss", attack_loss_in_x_hat),
    ("FCN train", fcn_training_mode),
    ("FCN eval", fcn_inference_mode),
    ("LeNet5", lenet5_student),
    ("GATN", gatn_generator),
    ("input gradient", input_gradient_matches_finite_differences),
];

pub const DTW: &[Check] = &[
    ("enumeration", dtw_matches_path_enumeration),
    ("path", extracted_path_is_valid_and_optimal),
    ("symmetry/identity", dtw_symmetry_and_identity),
    ("parallel", parallel_tensor_equals_sequential),
];

pub const SOFT_1NN: &[Check] = &[("soft vs hard 1-NN", soft_1nn_argmax_equals_hard_1nn)];

pub const SIGNED_RANK: &[Check] = &[
    ("enumeration", signed_rank_matches_enumeration),
    ("n=6 all positive", signed_rank_all_positive_six),
];
