//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits with a failure status when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use fedsim::analysis::{linear_cka, pairwise_cka, LayerLevel};
use fedsim::data::{
    dirichlet_partition, generate_synthetic, mean_client_label_entropy, ClientPartition, Dataset,
    PartitionSpec, SyntheticSpec,
};
use fedsim::experiment::{ExperimentConfig, Prepared};
use fedsim::federation::{aggregate, write_reports_csv, ClientUpdate, Federation, RoundReport};
use fedsim::nn::{Layer, Model, Tensor2};
use fedsim::seed::rng_from;
use fedsim::selection::{compute_entropy, select_by_entropy};
use fedsim::{softmax_with_temperature, Strategy};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------- oracles

fn ref_softmax(z: &[f64], rho: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / rho).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ref_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &q in p {
        if q > 0.0 {
            h -= q * q.max(1e-12).ln();
        }
    }
    h.max(0.0)
}

fn ref_logits(model: &Model, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for layer in model.layers() {
        match layer {
            Layer::Dense(d) => {
                let n_in = d.inputs();
                let w = d.weights.values();
                a = (0..d.outputs())
                    .map(|o| {
                        let mut acc = 0.0;
                        for i in 0..n_in {
                            acc += w[o * n_in + i] * a[i];
                        }
                        d.bias[o] + acc
                    })
                    .collect();
            }
            Layer::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }
    a
}

fn ref_loss(model: &Model, x: &Tensor2, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in x.iter_rows().zip(labels) {
        let z = ref_logits(model, row);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_model(rng: &mut impl Rng) -> Model {
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(2..=6)];
    for _ in 0..depth {
        widths.push(rng.random_range(2..=7));
    }
    let split = rng.random_range(0..depth) * 2;
    // random biases keep every ReLU away from its kink
    let mut model = Model::mlp(&widths, 0, rng.random()).unwrap();
    let params: Vec<f64> = model
        .theta()
        .iter()
        .map(|w| w + rng.random_range(-0.5..0.5))
        .collect();
    model.set_theta(&params).unwrap();
    model.set_split_index(split).unwrap();
    model
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::new(rows, cols, random_vec(rng, rows * cols, 2.0)).unwrap()
}

// ---------------------------------------------------------------- 1

fn numerics() -> Verdict {
    let mut rng = rng_from(101);
    let mut worst_eq = 0.0f64;
    let mut worst_shift = 0.0f64;
    let mut monotone_failures = 0;
    let rhos = [0.25, 0.5, 1.0, 2.0, 4.0];
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let z = loop {
            let z = random_vec(&mut rng, n, 3.0);
            let mut s = z.clone();
            s.sort_by(f64::total_cmp);
            if s.windows(2).all(|w| w[0] < w[1]) {
                break z;
            }
        };
        for (a, b) in softmax_with_temperature(&z, 1.0)
            .unwrap()
            .iter()
            .zip(ref_softmax(&z, 1.0))
        {
            worst_eq = worst_eq.max((a - b).abs());
        }
        let c = rng.random_range(-100.0..100.0);
        let rho = rng.random_range(0.05..5.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let p = softmax_with_temperature(&z, rho).unwrap();
        let q = softmax_with_temperature(&shifted, rho).unwrap();
        for (a, b) in p.iter().zip(&q) {
            worst_shift = worst_shift.max((a - b).abs());
        }
        let h: Vec<f64> = rhos
            .iter()
            .map(|&r| compute_entropy(&softmax_with_temperature(&z, r).unwrap()).unwrap())
            .collect();
        if !h.windows(2).all(|w| w[0] < w[1]) {
            monotone_failures += 1;
        }
    }
    let mut worst_uniform = 0.0f64;
    for n in 1..=64 {
        let h = compute_entropy(&vec![1.0 / n as f64; n]).unwrap();
        worst_uniform = worst_uniform.max((h - (n as f64).ln()).abs());
        let mut one_hot = vec![0.0; n];
        one_hot[n - 1] = 1.0;
        worst_uniform = worst_uniform.max(compute_entropy(&one_hot).unwrap());
    }

    let mut worst_fd = 0.0f64;
    let h = 1e-5;
    for _ in 0..100 {
        let model = random_model(&mut rng);
        let rows = rng.random_range(1..=6);
        let x = random_tensor(&mut rng, rows, model.input_width());
        let labels: Vec<usize> = (0..rows)
            .map(|_| rng.random_range(0..model.num_classes()))
            .collect();
        let (_, g) = model.loss_and_gradients(&x, &labels).unwrap();
        let theta = model.theta();
        let i = rng.random_range(0..theta.len());
        let at = |delta: f64| {
            let mut t = theta.clone();
            t[i] += delta;
            let mut m = model.clone();
            m.set_theta(&t).unwrap();
            ref_loss(&m, &x, &labels)
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let rel = (fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-7);
        worst_fd = worst_fd.max(rel);
    }
    let pass = worst_eq <= 1e-12
        && worst_shift <= 1e-12
        && monotone_failures == 0
        && worst_uniform <= 1e-12
        && worst_fd < 1e-5;
    Verdict::new(
        pass,
        format!(
            "rho=1 err {worst_eq:.1e}, shift err {worst_shift:.1e}, monotonicity failures {monotone_failures}/1000, \
             uniform/one-hot err {worst_uniform:.1e}, worst backprop rel err {worst_fd:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn oracle_selection(
    model: &Model,
    data: &Dataset,
    client: &ClientPartition,
    p_ds: f64,
    rho: f64,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = client
        .sample_indices
        .iter()
        .map(|&i| {
            let z = ref_logits(model, data.features().row(i));
            (ref_entropy(&ref_softmax(&z, rho)), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let k = ((p_ds * scored.len() as f64 + 1e-9).floor() as usize).clamp(1, scored.len());
    let mut out: Vec<usize> = scored[..k].iter().map(|s| s.1).collect();
    out.sort_unstable();
    out
}

fn oracles() -> Verdict {
    let mut rng = rng_from(202);
    let mut selection_mismatches = 0;
    for case in 0..500 {
        let model = random_model(&mut rng);
        let n = rng.random_range(1..=60);
        let x = Tensor2::new(
            n,
            model.input_width(),
            random_vec(&mut rng, n * model.input_width(), 3.0),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..model.num_classes()))
            .collect();
        let data = Dataset::new(x, labels, model.num_classes(), "probe").unwrap();
        let mut idx: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.7)).collect();
        if idx.is_empty() {
            idx.push(0);
        }
        let client = ClientPartition {
            client_id: case,
            sample_indices: idx,
        };
        let p_ds = rng.random_range(0.01..=1.0);
        let rho = [0.01, 0.1, 0.5, 1.0, 2.0][rng.random_range(0..5)];
        let got = select_by_entropy(&model, &data, &client, p_ds, rho).unwrap();
        if got.selected_indices != oracle_selection(&model, &data, &client, p_ds, rho) {
            selection_mismatches += 1;
        }
    }

    let mut worst_agg = 0.0f64;
    for _ in 0..500 {
        let k = rng.random_range(1..=10);
        let len = rng.random_range(1..=40);
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|c| ClientUpdate {
                client_id: c,
                theta: random_vec(&mut rng, len, 5.0),
                selected_count: rng.random_range(1..=200),
                train_time_seconds: 0.0,
                wall_seconds: 0.0,
            })
            .collect();
        let total: usize = updates.iter().map(|u| u.selected_count).sum();
        let mut expect = vec![0.0; len];
        for u in updates.iter().rev() {
            for (e, t) in expect.iter_mut().zip(&u.theta) {
                *e += u.selected_count as f64 / total as f64 * t;
            }
        }
        let mut shuffled = updates.clone();
        shuffled.reverse();
        for (a, b) in aggregate(&shuffled).unwrap().iter().zip(&expect) {
            worst_agg = worst_agg.max((a - b).abs());
        }
    }

    let mut cover_failures = 0;
    for s in 0..200u64 {
        let num_classes = rng.random_range(2..=10);
        let data = generate_synthetic(&SyntheticSpec {
            num_classes,
            samples_per_class: rng.random_range(1..=40),
            feature_dim: 2,
            class_separation: 1.0,
            seed: s,
        })
        .unwrap();
        let spec = PartitionSpec {
            num_clients: rng.random_range(1..=30.min(data.len())),
            alpha: 10f64.powf(rng.random_range(-2.0..2.0)),
            seed: rng.random(),
        };
        let parts = dirichlet_partition(&data, &spec).unwrap();
        let mut seen = vec![0u32; data.len()];
        for p in &parts {
            for &i in &p.sample_indices {
                seen[i] += 1;
            }
        }
        if parts.len() != spec.num_clients || seen.iter().any(|&c| c != 1) {
            cover_failures += 1;
        }
    }
    Verdict::new(
        selection_mismatches == 0 && worst_agg <= 1e-12 && cover_failures == 0,
        format!(
            "selection mismatches {selection_mismatches}/500, aggregate err {worst_agg:.1e}, \
             partition cover failures {cover_failures}/200"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn heterogeneity() -> Verdict {
    let alphas = [0.1, 0.5, 10.0];
    let mut means = [0.0; 3];
    for seed in 0..SEEDS {
        let mut c = ExperimentConfig::preset("desk-default").unwrap();
        c.federation.master_seed = seed;
        let prepared = c.prepare().unwrap();
        for (m, &alpha) in means.iter_mut().zip(&alphas) {
            let parts = dirichlet_partition(
                &prepared.train,
                &PartitionSpec {
                    num_clients: c.federation.num_clients,
                    alpha,
                    seed: c.partition_seed(),
                },
            )
            .unwrap();
            *m += mean_client_label_entropy(&prepared.train, &parts) / SEEDS as f64;
        }
    }
    Verdict::new(
        means[0] < means[1] && means[1] < means[2],
        format!(
            "mean client label entropy (nats) alpha 0.1: {:.4}, 0.5: {:.4}, 10: {:.4}",
            means[0], means[1], means[2]
        ),
    )
}

// ---------------------------------------------------------------- 4-7

#[derive(Default)]
struct Arm {
    finals: Vec<f64>,
    efficiency: Vec<f64>,
    measured_efficiency: Vec<f64>,
    slowest: f64,
}

impl Arm {
    fn mean_final(&self) -> f64 {
        100.0 * self.finals.iter().sum::<f64>() / self.finals.len() as f64
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct DeskRuns {
    fedavg: Arm,
    scratch: Arm,
    eds: Arm,
    rds: Arm,
    all: Arm,
    eds_small: Arm,
}

fn efficiency(reports: &[RoundReport], time: f64) -> f64 {
    let best = reports
        .iter()
        .map(|r| r.global_test_accuracy)
        .fold(0.0, f64::max);
    100.0 * best / time
}

fn desk_arm(strategy: Strategy, p_ds: Option<f64>, pretrain: bool) -> Arm {
    let mut arm = Arm::default();
    for seed in 0..SEEDS {
        let mut c = ExperimentConfig::preset("desk-default")
            .unwrap()
            .with_strategy(strategy);
        c.federation.master_seed = seed;
        c.federation.p_ds = p_ds;
        if !pretrain {
            c.federation.pretrain_epochs = 0;
        }
        let started = Instant::now();
        let (_, out) = c.run().unwrap();
        arm.slowest = arm.slowest.max(started.elapsed().as_secs_f64());
        let last = out.reports.last().unwrap();
        arm.finals.push(last.global_test_accuracy);
        arm.efficiency
            .push(efficiency(&out.reports, last.cumulative_client_train_time));
        arm.measured_efficiency
            .push(efficiency(&out.reports, last.cumulative_wall_time));
    }
    arm
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| DeskRuns {
        fedavg: desk_arm(Strategy::Fedavg, None, true),
        scratch: desk_arm(Strategy::Fedavg, None, false),
        eds: desk_arm(Strategy::FedftEds, Some(0.5), true),
        rds: desk_arm(Strategy::FedftRds, Some(0.5), true),
        all: desk_arm(Strategy::FedftAll, None, true),
        eds_small: desk_arm(Strategy::FedftEds, Some(0.1), true),
    })
}

fn pretraining_benefit() -> Verdict {
    let r = desk_runs();
    let gap = r.fedavg.mean_final() - r.scratch.mean_final();
    let slowest = r.fedavg.slowest.max(r.scratch.slowest);
    Verdict::new(
        gap >= 2.0 && slowest < 600.0,
        format!(
            "fedavg pretrained {:.2}% vs from scratch {:.2}%, gap {gap:+.2} points (need >= 2); slowest run {slowest:.1}s",
            r.fedavg.mean_final(),
            r.scratch.mean_final()
        ),
    )
}

fn eds_vs_rds() -> Verdict {
    let r = desk_runs();
    let diffs: Vec<f64> = r
        .eds
        .finals
        .iter()
        .zip(&r.rds.finals)
        .map(|(e, d)| 100.0 * (e - d))
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // one-sided paired t-test of "RDS is better"
    let p_rds_better = if sd > 0.0 {
        StudentsT::new(0.0, 1.0, n - 1.0)
            .unwrap()
            .cdf(mean / (sd / n.sqrt()))
    } else if mean < 0.0 {
        0.0
    } else {
        1.0
    };
    Verdict::new(
        mean >= 0.0 && p_rds_better >= 0.05,
        format!(
            "eds(0.5) {:.2}% vs rds(0.5) {:.2}%, paired diff {mean:+.2} (sd {sd:.2}), one-sided p(rds better) {p_rds_better:.3}",
            r.eds.mean_final(),
            r.rds.mean_final()
        ),
    )
}

fn selection_vs_all() -> Verdict {
    let r = desk_runs();
    let gap = r.eds.mean_final() - r.all.mean_final();
    Verdict::new(
        gap >= -0.5,
        format!(
            "eds(0.5) {:.2}% vs all {:.2}%, gap {gap:+.2} points ({})",
            r.eds.mean_final(),
            r.all.mean_final(),
            if gap > 0.0 {
                "selection ahead"
            } else if gap < 0.0 {
                "all ahead"
            } else {
                "tie"
            }
        ),
    )
}

fn learning_efficiency() -> Verdict {
    let r = desk_runs();
    let ratio = Arm::mean(&r.eds_small.efficiency) / Arm::mean(&r.fedavg.efficiency);
    let measured =
        Arm::mean(&r.eds_small.measured_efficiency) / Arm::mean(&r.fedavg.measured_efficiency);
    Verdict::new(
        ratio >= 2.0,
        format!(
            "eds(0.1) {:.2} vs fedavg {:.2} accuracy points per modeled second, ratio {ratio:.2}x; \
             wall-clock ratio {measured:.2}x",
            Arm::mean(&r.eds_small.efficiency),
            Arm::mean(&r.fedavg.efficiency)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn one_round_cka(prepared: &Prepared, config: &ExperimentConfig) -> [f64; 3] {
    let mut fed = Federation::new(
        config.federation.clone(),
        Some(&prepared.source),
        &prepared.train,
        &prepared.test,
        &prepared.partitions,
    )
    .unwrap();
    let out = fed.run_round().unwrap();
    // client models sit on top of the pre-round global model
    let models: Vec<Model> = out
        .updates
        .iter()
        .map(|u| {
            let mut m = fed.initial_model().clone();
            m.set_theta(&u.theta).unwrap();
            m
        })
        .collect();
    LayerLevel::ALL.map(|level| {
        pairwise_cka(&models, &prepared.test, level)
            .unwrap()
            .mean_off_diagonal()
            .unwrap()
    })
}

fn random_orthogonal(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v = random_vec(rng, n, 1.0);
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

fn cka_model_shift() -> Verdict {
    let mut pre = [0.0; 3];
    let mut scratch = [0.0; 3];
    let seeds = 3;
    for seed in 0..seeds {
        let mut c = ExperimentConfig::preset("desk-default")
            .unwrap()
            .with_strategy(Strategy::Fedavg);
        c.federation.master_seed = seed;
        c.federation.rounds = 1;
        let prepared = c.prepare().unwrap();
        let a = one_round_cka(&prepared, &c);
        c.federation.pretrain_epochs = 0;
        let b = one_round_cka(&prepared, &c);
        for l in 0..3 {
            pre[l] += a[l] / seeds as f64;
            scratch[l] += b[l] / seeds as f64;
        }
    }

    let mut rng = rng_from(808);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(8..40);
        let d = rng.random_range(2..8);
        let x = random_tensor(&mut rng, n, d);
        worst = worst.max((linear_cka(&x, &x).unwrap().unwrap() - 1.0).abs());
        let dy = rng.random_range(2..8);
        let y = random_tensor(&mut rng, n, dy);
        let base = linear_cka(&x, &y).unwrap().unwrap();
        let q = random_orthogonal(&mut rng, d);
        let scale = rng.random_range(0.01..100.0);
        let rotated: Vec<Vec<f64>> = x
            .iter_rows()
            .map(|row| {
                q.iter()
                    .map(|col| scale * col.iter().zip(row).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            })
            .collect();
        let xr = Tensor2::from_rows(&rotated).unwrap();
        worst = worst.max((linear_cka(&xr, &y).unwrap().unwrap() - base).abs());
    }
    let higher = (0..3).all(|l| pre[l] > scratch[l]);
    Verdict::new(
        higher && worst <= 1e-9,
        format!(
            "pretrained vs scratch mean off-diagonal CKA: low {:.4}/{:.4}, mid {:.4}/{:.4}, up {:.4}/{:.4}; \
             invariance err {worst:.1e}",
            pre[0], scratch[0], pre[1], scratch[1], pre[2], scratch[2]
        ),
    )
}

// ---------------------------------------------------------------- 9

fn reports_csv(config: &ExperimentConfig) -> Vec<u8> {
    let (_, out) = config.run().unwrap();
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, config.federation.strategy, &out.reports).unwrap();
    buf
}

fn determinism() -> Verdict {
    let mut differing = Vec::new();
    for name in fedsim::experiment::PRESETS {
        let mut c = ExperimentConfig::preset(name).unwrap();
        c.federation.master_seed = 42;
        c.federation.threads = 1;
        let a = reports_csv(&c);
        let b = reports_csv(&c);
        c.federation.threads = 4;
        let d = reports_csv(&c);
        if a != b || a != d {
            differing.push(name);
        }
    }
    Verdict::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "reports identical for {} presets at 1 and 4 threads",
                fedsim::experiment::PRESETS.len()
            )
        } else {
            format!("reports differ for {differing:?}")
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("numerics", numerics),
        ("oracle equivalence", oracles),
        ("heterogeneity ordering", heterogeneity),
        ("pretraining benefit", pretraining_benefit),
        ("entropy vs random selection", eds_vs_rds),
        ("selection vs all data", selection_vs_all),
        ("learning efficiency", learning_efficiency),
        ("cka model shift", cka_model_shift),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        if !verdict.pass {
            failed += 1;
        }
        println!(
            "{} criterion {} ({name}): {} [{:.1}s]",
            if verdict.pass { "PASS" } else { "FAIL" },
            i + 1,
            verdict.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
