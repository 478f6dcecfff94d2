use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use crate::error::Result;
use crate::grid::{ClassMap, ImageGrid, RegionMap, Shape, SoftmaxField};
use crate::harness::config::{ExperimentConfig, LossKind, TrainConfig};
use crate::harness::eval::{output_stats, OutputStats};
use crate::harness::experiments::run_cells;
use crate::harness::export::{Check, ExperimentOutcome, Table};
use crate::harness::train::{image_net, item_loss_and_grad, predict, train, EvalItem, TrainItem, TrainLog};
use crate::losses::{cace_forward, cas_backward, cas_bounds, cas_forward, CasConfig};
use crate::nnet::{backward, finite_difference, finite_difference_grad, forward, max_relative_error, ModelParams, NetSpec, DEFAULT_STEP};
use crate::region::permute_region_ids;
use crate::synth::{derive_seed, gen_shapes, random_region_map, random_softmax_field, rng_from_seed, SeededRng};

const PERMUTATION_STREAM: u64 = 20;
const BOUND_STREAM: u64 = 21;
const GRADIENT_STREAM: u64 = 22;
const NETWORK_STREAM: u64 = 23;
const SPARSITY_STREAM: u64 = 24;

/// Largest tolerated relative error of the loss gradient at the softmax.
pub const LOSS_GRADIENT_TOLERANCE: f64 = 1e-6;
/// Largest tolerated relative error of end-to-end parameter gradients.
pub const NETWORK_GRADIENT_TOLERANCE: f64 = 1e-5;

/// A random valid instance: at most 8×8 pixels, 2 to 4 channels and 1 to 4
/// regions.
pub fn random_instance(rng: &mut SeededRng) -> (SoftmaxField, RegionMap) {
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let m = rng.random_range(2..=4);
    let n = rng.random_range(1..=4usize.min(h * w));
    (random_softmax_field(rng, h, w, m), random_region_map(rng, h, w, n))
}

/// Runs `cases` permutation trials; returns how many left the loss value
/// and gradient bit-identical.
pub fn permutation_invariance(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = rng_from_seed(seed);
    let mut exact = 0;
    for _ in 0..cases {
        let (s, r) = random_instance(&mut rng);
        let cfg = CasConfig::new(rng.random_range(0.0..=1.0))?;
        let mut perm: Vec<u32> = (0..r.region_count() as u32).collect();
        perm.shuffle(&mut rng);
        let p = permute_region_ids(&r, &perm)?;
        let same_value = cas_forward(&s, &r, cfg)?.to_bits() == cas_forward(&s, &p, cfg)?.to_bits();
        let g1 = cas_backward(&s, &r, cfg)?;
        let g2 = cas_backward(&s, &p, cfg)?;
        let same_grad = g1.values().iter().zip(g2.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        exact += usize::from(same_value && same_grad);
    }
    Ok(exact)
}

/// Runs `cases` label-flip trials of the class-agnostic cross-entropy;
/// returns how many gave bit-identical values.
pub fn cace_flip_invariance(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = rng_from_seed(seed);
    let mut exact = 0;
    for _ in 0..cases {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let s = random_softmax_field(&mut rng, h, w, 2);
        let labels = ClassMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..2)).collect())?;
        let a = cace_forward(&s, &labels)?.value;
        let b = cace_forward(&s, &labels.flipped()?)?.value;
        exact += usize::from(a.to_bits() == b.to_bits());
    }
    Ok(exact)
}

/// Runs `cases` random instances at random alpha; returns how many values
/// fell outside their bounds.
pub fn bound_violations(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = rng_from_seed(seed);
    let mut violations = 0;
    for _ in 0..cases {
        let (s, r) = random_instance(&mut rng);
        let cfg = CasConfig::new(rng.random_range(0.0..=1.0))?;
        let v = cas_forward(&s, &r, cfg)?;
        violations += usize::from(!cas_bounds(r.region_count(), cfg, s.channels()).contains(v));
    }
    Ok(violations)
}

/// The loss of two one-hot regions on distinct channels, which meets the
/// lower bound.
pub fn one_hot_minimum(alpha: f64) -> Result<(f64, f64)> {
    let cfg = CasConfig::new(alpha)?;
    let s = SoftmaxField::new(Shape::new(1, 4, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])?;
    let r = RegionMap::new(1, 4, vec![0, 0, 1, 1])?;
    Ok((cas_forward(&s, &r, cfg)?, cas_bounds(2, cfg, 2).lower))
}

/// Max relative error between `cas_backward` and central differences of
/// `cas_forward` over `cases` random instances.
pub fn loss_gradient_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (s, r) = random_instance(&mut rng);
        let cfg = CasConfig::new(rng.random_range(0.0..=1.0))?;
        let analytic = cas_backward(&s, &r, cfg)?;
        // The loss is a polynomial in s, defined off the simplex too.
        let shape = s.shape();
        let numeric = finite_difference(
            |x| cas_forward(&SoftmaxField::from_values_unchecked(shape, x.to_vec()), &r, cfg),
            s.values(),
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error(analytic.values(), &numeric));
    }
    Ok(worst)
}

/// A small convolutional instance for end-to-end gradient checks: random
/// 4×4 RGB image, 2 or 3 regions with random binary classes.
fn network_instance(seed: u64) -> Result<(NetSpec, ModelParams, TrainItem)> {
    let mut rng = rng_from_seed(seed);
    let (h, w) = (4, 4);
    let input = ImageGrid::new(
        Shape::new(h, w, 3),
        (0..h * w * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let n = rng.random_range(2..=3);
    let regions = random_region_map(&mut rng, h, w, n);
    let mut classes: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
    classes[0] = 0;
    classes[1] = 1;
    let labels = ClassMap::from_regions(&regions, &classes)?;
    let spec = NetSpec::conv_head(3, 4, 2);
    let params = ModelParams::init(&spec, rng.random());
    Ok((spec, params, TrainItem { input, regions, labels }))
}

/// Max relative error between backpropagated parameter gradients and
/// central differences, for `loss` through the network.
pub fn network_gradient_error(loss: LossKind, seed: u64) -> Result<f64> {
    let (spec, params, item) = network_instance(seed)?;
    let cfg = TrainConfig {
        loss,
        ..TrainConfig::default()
    };
    let (s, cache) = forward(&params, &spec, &item.input)?;
    let (_, upstream, _) = item_loss_and_grad(&s, &item, &cfg)?;
    let analytic = backward(&params, &spec, &cache, &upstream)?;
    let numeric = finite_difference_grad(
        |p| {
            let (s, _) = forward(p, &spec, &item.input)?;
            Ok(item_loss_and_grad(&s, &item, &cfg)?.0)
        },
        &params,
        DEFAULT_STEP,
    )?;
    Ok(max_relative_error(&analytic.to_flat(), &numeric.to_flat()))
}

/// Worst end-to-end gradient error per loss over `seeds` instances.
pub fn network_gradient_errors(seeds: usize, seed: u64) -> Result<Vec<(LossKind, f64)>> {
    LossKind::ALL
        .iter()
        .map(|&loss| {
            let worst = (0..seeds as u64)
                .map(|i| network_gradient_error(loss, derive_seed(seed, i)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok((loss, worst))
        })
        .collect()
}

/// Brute-force maximum of `‖a − b‖²` over pairs of 2-channel simplex
/// points on a grid of the given step. Returns the maximum and every pair
/// `(a₀, b₀)` attaining it.
pub fn discriminator_grid_search(step: f64) -> (f64, Vec<(f64, f64)>) {
    let k = (1.0 / step).round() as usize;
    let point = |i: usize| i as f64 / k as f64;
    let mut best = f64::NEG_INFINITY;
    let mut argmax = Vec::new();
    for i in 0..=k {
        for j in 0..=k {
            let (a0, b0) = (point(i), point(j));
            let (a1, b1) = (1.0 - a0, 1.0 - b0);
            let d = (a0 - b0) * (a0 - b0) + (a1 - b1) * (a1 - b1);
            if d > best {
                best = d;
                argmax.clear();
            }
            if d == best {
                argmax.push((a0, b0));
            }
        }
    }
    (best, argmax)
}

/// Stationarity and complementary-slackness residuals of the two-region,
/// two-channel separation problem at `a = (1, 0)`, `b = (0, 1)` with
/// multipliers `λ₁ = λ₂ = 2`, `μ₂ = μ₃ = 4`, `μ₁ = μ₄ = 0`.
pub fn kkt_residuals() -> [f64; 10] {
    let (a0, a1, b0, b1) = (1.0, 0.0, 0.0, 1.0);
    let (l1, l2) = (2.0, 2.0);
    let (m1, m2, m3, m4) = (0.0, 4.0, 4.0, 0.0);
    [
        2.0 * (a0 - b0) - l1 + m1,
        2.0 * (a1 - b1) - l1 + m2,
        -2.0 * (a0 - b0) - l2 + m3,
        -2.0 * (a1 - b1) - l2 + m4,
        a0 + a1 - 1.0,
        b0 + b1 - 1.0,
        m1 * a0,
        m2 * a1,
        m3 * b0,
        m4 * b1,
    ]
}

/// Trains CAS on two-region shapes and measures how concentrated the
/// outputs are on the training images.
pub fn sparsity_run(cfg: &ExperimentConfig) -> Result<(OutputStats, TrainLog)> {
    let data = crate::synth::ShapesConfig {
        regions_per_image: 2,
        ..cfg.data
    };
    let samples = gen_shapes(&data, derive_seed(cfg.seed, SPARSITY_STREAM))?;
    let items: Vec<TrainItem> = samples.iter().map(TrainItem::from_sample).collect::<Result<_>>()?;
    let eval: Vec<EvalItem> = samples.iter().map(EvalItem::from_sample).collect::<Result<_>>()?;
    let tcfg = TrainConfig {
        loss: LossKind::Cas,
        ..cfg.train.clone()
    };
    let spec = image_net(3, &tcfg);
    let (params, log) = train(&items, &spec, &tcfg, derive_seed(cfg.seed, SPARSITY_STREAM))?;
    let outputs = predict(&params, &spec, eval.iter().map(|e| &e.input))?;
    Ok((output_stats(&outputs, &eval, cfg.properties.sparsity_threshold)?, log))
}

enum Task {
    Permutation,
    CaceFlip,
    Bounds,
    LossGradient,
    NetworkGradient,
    Sparsity,
}

enum TaskResult {
    Checks(Vec<Check>, serde_json::Value),
    Sparsity(Vec<Check>, serde_json::Value, TrainLog),
}

fn run_task(cfg: &ExperimentConfig, task: &Task) -> Result<TaskResult> {
    let p = &cfg.properties;
    let seed = cfg.seed;
    Ok(match task {
        Task::Permutation => {
            let exact = permutation_invariance(p.permutation_cases, derive_seed(seed, PERMUTATION_STREAM))?;
            TaskResult::Checks(
                vec![Check::equals("permutation_invariance_exact_cases", exact as f64, p.permutation_cases as f64)],
                json!({ "cases": p.permutation_cases, "exact": exact }),
            )
        }
        Task::CaceFlip => {
            let exact = cace_flip_invariance(p.permutation_cases, derive_seed(seed, PERMUTATION_STREAM + 100))?;
            TaskResult::Checks(
                vec![Check::equals("cace_flip_invariance_exact_cases", exact as f64, p.permutation_cases as f64)],
                json!({ "cases": p.permutation_cases, "exact": exact }),
            )
        }
        Task::Bounds => {
            let violations = bound_violations(p.bound_cases, derive_seed(seed, BOUND_STREAM))?;
            let (value, lower) = one_hot_minimum(CasConfig::DEFAULT_ALPHA)?;
            let (best, argmax) = discriminator_grid_search(p.grid_step);
            let corners = argmax.iter().all(|&(a, b)| (a, b) == (1.0, 0.0) || (a, b) == (0.0, 1.0)) && argmax.len() == 2;
            let kkt = kkt_residuals().iter().fold(0.0f64, |m, r| m.max(r.abs()));
            TaskResult::Checks(
                vec![
                    Check::equals("bound_violations", violations as f64, 0.0),
                    Check::equals("one_hot_loss_meets_lower_bound", value, lower),
                    Check::equals("discriminator_grid_maximum", best, 2.0),
                    Check::holds("discriminator_maximum_only_at_distinct_corners", corners),
                    Check::equals("kkt_max_residual", kkt, 0.0),
                ],
                json!({
                    "fuzz_cases": p.bound_cases,
                    "violations": violations,
                    "one_hot_value": value,
                    "lower_bound": lower,
                    "grid_step": p.grid_step,
                    "grid_maximum": best,
                    "grid_argmax": argmax,
                    "kkt_residuals": kkt_residuals(),
                }),
            )
        }
        Task::LossGradient => {
            let err = loss_gradient_error(p.gradient_cases, derive_seed(seed, GRADIENT_STREAM))?;
            TaskResult::Checks(
                vec![Check::below("loss_gradient_max_relative_error", err, LOSS_GRADIENT_TOLERANCE)],
                json!({ "cases": p.gradient_cases, "max_relative_error": err }),
            )
        }
        Task::NetworkGradient => {
            let errs = network_gradient_errors(p.network_gradient_seeds, derive_seed(seed, NETWORK_STREAM))?;
            let checks = errs
                .iter()
                .map(|(loss, e)| Check::below(&format!("{loss}_network_gradient_max_relative_error"), *e, NETWORK_GRADIENT_TOLERANCE))
                .collect();
            let detail: serde_json::Map<String, serde_json::Value> =
                errs.iter().map(|(l, e)| (l.to_string(), json!(e))).collect();
            TaskResult::Checks(checks, json!({ "seeds": p.network_gradient_seeds, "max_relative_error": detail }))
        }
        Task::Sparsity => {
            let (stats, log) = sparsity_run(cfg)?;
            let in_bounds = log.entries.iter().all(|e| e.bounds.is_some_and(|b| b.contains(e.loss)));
            TaskResult::Sparsity(
                vec![
                    Check::at_least("sparsity_confident_pixel_fraction", stats.confident_fraction, p.sparsity_min_fraction),
                    Check::at_least("sparsity_region_mean_squared_distance", stats.region_mean_distance, p.min_mean_distance),
                    Check::holds("training_log_within_bounds", in_bounds),
                ],
                json!({ "output": stats, "steps": log.steps(), "final_loss": log.final_loss() }),
                log,
            )
        }
    })
}

/// Executes every property check; failures are report entries, not errors.
pub fn run_property_checks(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    let tasks = [
        Task::Sparsity,
        Task::Permutation,
        Task::CaceFlip,
        Task::Bounds,
        Task::LossGradient,
        Task::NetworkGradient,
    ];
    let names = ["sparsity", "permutation", "cace_flip", "bounds", "loss_gradient", "network_gradient"];
    let outcomes = run_cells(jobs, &tasks, |t| run_task(cfg, t))?;
    let mut checks = Vec::new();
    let mut details = serde_json::Map::new();
    let mut logs = Vec::new();
    for (name, outcome) in names.iter().zip(outcomes) {
        let (c, d) = match outcome {
            TaskResult::Checks(c, d) => (c, d),
            TaskResult::Sparsity(c, d, log) => {
                logs.push(("sparsity_cas".to_string(), log));
                (c, d)
            }
        };
        checks.extend(c);
        details.insert(name.to_string(), d);
    }
    let mut metrics = Table::new(&["check", "passed", "measured", "relation", "bound"]);
    for c in &checks {
        metrics.push(vec![
            c.name.clone(),
            c.passed.to_string(),
            format!("{:e}", c.measured),
            c.relation.clone(),
            format!("{:e}", c.bound),
        ]);
    }
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        metrics,
        logs,
        results: serde_json::Value::Object(details),
        checks,
        curve_cell: Some("sparsity_cas".into()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_search_finds_the_corners() {
        let (best, argmax) = discriminator_grid_search(0.01);
        assert_eq!(best, 2.0);
        assert_eq!(argmax, vec![(0.0, 1.0), (1.0, 0.0)]);
    }

    #[test]
    fn kkt_point_is_stationary() {
        assert!(kkt_residuals().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn one_hot_meets_the_bound() {
        let (v, lo) = one_hot_minimum(0.1).unwrap();
        assert_eq!(v, -3.6);
        assert_eq!(lo, -3.6);
    }

    #[test]
    fn small_fuzz_runs_clean() {
        assert_eq!(permutation_invariance(20, 1).unwrap(), 20);
        assert_eq!(cace_flip_invariance(20, 1).unwrap(), 20);
        assert_eq!(bound_violations(50, 1).unwrap(), 0);
        assert!(loss_gradient_error(5, 1).unwrap() < LOSS_GRADIENT_TOLERANCE);
        for loss in LossKind::ALL {
            assert!(network_gradient_error(loss, 3).unwrap() < NETWORK_GRADIENT_TOLERANCE);
        }
    }
}
