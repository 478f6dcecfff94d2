use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::grid::{BinaryMap, RegionMap, SoftmaxField};
use crate::harness::config::{ExperimentConfig, ExperimentKind, LossKind, TrainConfig};
use crate::harness::eval::{evaluate, output_stats, salient_channel, OutputStats};
use crate::harness::export::{cell, Check, ExperimentOutcome, Table};
use crate::harness::properties::run_property_checks;
use crate::harness::train::{image_net, predict, train, EvalItem, TrainItem, TrainLog};
use crate::metrics::{select_salient_channel, MetricsReport};
use crate::nnet::{forward, NetSpec};
use crate::synth::{derive_seed, flip_labels, gen_shapes, gen_toy_gaussians, toy_as_grid, ShapesConfig, SynthSample};

const DATA_STREAM: u64 = 10;
const TEST_STREAM: u64 = 11;
const FLIP_STREAM: u64 = 12;
const TRAIN_STREAM: u64 = 13;

/// Maps `f` over `cells` on up to `jobs` threads. Results keep cell order,
/// and each cell is computed the same way regardless of `jobs`.
pub fn run_cells<C, T, F>(jobs: usize, cells: &[C], f: F) -> Result<Vec<T>>
where
    C: Sync,
    T: Send,
    F: Fn(&C) -> Result<T> + Sync,
{
    if jobs <= 1 || cells.len() <= 1 {
        return cells.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(&f).collect())
}

/// Runs the preset named by `cfg.experiment`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentKind::ToyImbalance => run_toy_imbalance(cfg, jobs),
        ExperimentKind::FidelitySweep => run_fidelity_sweep(cfg, jobs),
        ExperimentKind::AlphaSweep => run_alpha_ablation(cfg, jobs),
        ExperimentKind::Properties => run_property_checks(cfg, jobs),
        ExperimentKind::TextureMetrics => run_texture_metrics(cfg, jobs),
    }
}

/// Two-class confusion counts; rows are true classes, columns predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        (self.counts[0][0] + self.counts[1][1]) as f64 / self.total() as f64
    }

    /// Share of all points predicted as class 0 (the majority class).
    pub fn predicted_majority_fraction(&self) -> f64 {
        (self.counts[0][0] + self.counts[1][0]) as f64 / self.total() as f64
    }

    fn add(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub run: usize,
    pub seed: u64,
    pub ce: Confusion,
    pub cas: Confusion,
    /// Output channel read as the minority class for the CAS network.
    pub cas_channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub runs: Vec<ToyRun>,
    /// Counts summed over runs.
    pub ce: Confusion,
    pub cas: Confusion,
    /// Mean over runs of the share of test points CE assigns to class 0.
    pub ce_majority_fraction: f64,
    /// Mean over runs of the minority test points CAS classifies correctly.
    pub cas_minority_recovered: f64,
}

struct ToyCell {
    run: usize,
    seed: u64,
    loss: LossKind,
}

fn toy_cell(cfg: &ExperimentConfig, c: &ToyCell) -> Result<(Confusion, usize, TrainLog)> {
    let data = gen_toy_gaussians(cfg.toy.n1, cfg.toy.n2, cfg.toy.variance, derive_seed(c.seed, DATA_STREAM))?;
    let (input, regions, labels) = toy_as_grid(&data.train)?;
    let minority = BinaryMap::from_class_map(&labels)?;
    let item = TrainItem { input, regions, labels };
    let tcfg = TrainConfig {
        loss: c.loss,
        channels: 2,
        ..cfg.train.clone()
    };
    let spec = NetSpec::mlp(2, tcfg.hidden, 2);
    let (params, log) = train(std::slice::from_ref(&item), &spec, &tcfg, derive_seed(c.seed, TRAIN_STREAM))?;
    let channel = if c.loss.is_class_agnostic() {
        let (s, _) = forward(&params, &spec, &item.input)?;
        select_salient_channel(&[s], &[minority])?
    } else {
        1
    };
    let (test_input, _, test_labels) = toy_as_grid(&data.test)?;
    let (s, _) = forward(&params, &spec, &test_input)?;
    let mut confusion = Confusion::default();
    for (p, &label) in test_labels.labels().iter().enumerate() {
        let px = s.pixel(p);
        let predicted = usize::from(px[channel] > px[1 - channel]);
        confusion.counts[label as usize][predicted] += 1;
    }
    Ok((confusion, channel, log))
}

/// Trains the two-layer classifier under cross-entropy and under CAS on the
/// imbalanced two-Gaussian data, once per run, and reports test confusion
/// matrices. Each class is one region of a `1 × P` grid.
pub fn run_toy_imbalance(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    let mut cells = Vec::new();
    for run in 0..cfg.toy.runs {
        let seed = derive_seed(cfg.seed, run as u64);
        for loss in [LossKind::Ce, LossKind::Cas] {
            cells.push(ToyCell { run, seed, loss });
        }
    }
    let results = run_cells(jobs, &cells, |c| toy_cell(cfg, c))?;

    let mut runs: Vec<ToyRun> = Vec::new();
    let mut logs = Vec::new();
    let mut metrics = Table::new(&[
        "run", "loss", "seed", "channel", "steps", "final_loss", "true0_pred0", "true0_pred1", "true1_pred0",
        "true1_pred1", "accuracy",
    ]);
    for (c, (confusion, channel, log)) in cells.iter().zip(results) {
        let [[a, b], [d, e]] = confusion.counts;
        metrics.push(vec![
            c.run.to_string(),
            c.loss.to_string(),
            c.seed.to_string(),
            channel.to_string(),
            log.steps().to_string(),
            cell(log.final_loss().unwrap_or(f64::NAN)),
            a.to_string(),
            b.to_string(),
            d.to_string(),
            e.to_string(),
            cell(confusion.accuracy()),
        ]);
        if c.loss == LossKind::Ce {
            runs.push(ToyRun {
                run: c.run,
                seed: c.seed,
                ce: confusion,
                cas: Confusion::default(),
                cas_channel: 0,
            });
        } else {
            let r = runs.last_mut().expect("ce cell precedes cas cell");
            r.cas = confusion;
            r.cas_channel = channel;
        }
        logs.push((format!("run{}_{}", c.run, c.loss), log));
    }

    let n = runs.len() as f64;
    let mut ce = Confusion::default();
    let mut cas = Confusion::default();
    runs.iter().for_each(|r| {
        ce.add(&r.ce);
        cas.add(&r.cas);
    });
    let report = ToyReport {
        ce_majority_fraction: runs.iter().map(|r| r.ce.predicted_majority_fraction()).sum::<f64>() / n,
        cas_minority_recovered: runs.iter().map(|r| r.cas.counts[1][1] as f64).sum::<f64>() / n,
        runs,
        ce,
        cas,
    };
    let minority_target = 0.8 * cfg.toy.n2 as f64;
    let checks = vec![
        Check::at_least("ce_predicts_majority_fraction", report.ce_majority_fraction, 0.999),
        Check::at_least("cas_recovers_minority_points", report.cas_minority_recovered, minority_target),
    ];
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        metrics,
        curve_cell: Some("run0_cas".into()),
        logs,
        results: serde_json::to_value(&report)?,
        checks,
    })
}

/// Training images (clean labels), held-out validation images and test
/// images, all derived from the experiment seed.
pub struct ImageData {
    pub train: Vec<SynthSample>,
    pub validation: Vec<EvalItem>,
    pub test: Vec<EvalItem>,
}

impl ImageData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let mut all = gen_shapes(&cfg.data, derive_seed(cfg.seed, DATA_STREAM))?;
        let validation = all.split_off(cfg.data.count - cfg.validation_count());
        let test_cfg = ShapesConfig {
            count: cfg.test_count,
            ..cfg.data
        };
        let test = gen_shapes(&test_cfg, derive_seed(cfg.seed, TEST_STREAM))?;
        Ok(Self {
            train: all,
            validation: validation.iter().map(EvalItem::from_sample).collect::<Result<_>>()?,
            test: test.iter().map(EvalItem::from_sample).collect::<Result<_>>()?,
        })
    }
}

/// Outcome of training and evaluating one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub loss: LossKind,
    pub flip_fraction: f64,
    pub alpha: f64,
    pub channel: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub output: OutputStats,
    pub metrics: MetricsReport,
}

pub const CELL_COLUMNS: [&str; 10] = [
    "cell",
    "loss",
    "flip_fraction",
    "alpha",
    "channel",
    "steps",
    "final_loss",
    "confident_fraction",
    "region_mean_distance",
    "within_region_variance",
];

/// Confidence level used for the output-concentration column.
pub const CONFIDENCE: f64 = 0.95;

fn cell_table(results: &[CellResult]) -> Table {
    let header: Vec<&str> = CELL_COLUMNS
        .iter()
        .copied()
        .chain(MetricsReport::CSV_COLUMNS)
        .collect();
    let mut t = Table::new(&header);
    for r in results {
        let mut row = vec![
            r.cell.clone(),
            r.loss.to_string(),
            cell(r.flip_fraction),
            cell(r.alpha),
            r.channel.to_string(),
            r.steps.to_string(),
            cell(r.final_loss),
            cell(r.output.confident_fraction),
            cell(r.output.region_mean_distance),
            cell(r.output.within_region_variance),
        ];
        row.extend(r.metrics.values().map(cell));
        t.push(row);
    }
    t
}

/// One training configuration on shared image data.
#[derive(Clone, Debug)]
pub struct ImageCell {
    pub name: String,
    pub loss: LossKind,
    pub flip_fraction: f64,
    pub alpha: f64,
}

/// Flips the training labels, trains, aligns the output channel on the
/// clean validation split and scores the clean test split.
pub fn run_image_cell(cfg: &ExperimentConfig, data: &ImageData, c: &ImageCell) -> Result<(CellResult, TrainLog)> {
    let flipped = flip_labels(&data.train, c.flip_fraction, derive_seed(cfg.seed, FLIP_STREAM))?;
    let items: Vec<TrainItem> = flipped.iter().map(TrainItem::from_sample).collect::<Result<_>>()?;
    let tcfg = TrainConfig {
        loss: c.loss,
        alpha: c.alpha,
        ..cfg.train.clone()
    };
    let spec = image_net(items[0].input.shape().channels, &tcfg);
    let (params, log) = train(&items, &spec, &tcfg, derive_seed(cfg.seed, TRAIN_STREAM))?;
    let channel = salient_channel(c.loss, &params, &spec, &data.validation)?;
    let metrics = evaluate(&params, &spec, channel, &data.test)?;
    let outputs: Vec<SoftmaxField> = predict(&params, &spec, data.test.iter().map(|t| &t.input))?;
    let output = output_stats(&outputs, &data.test, CONFIDENCE)?;
    Ok((
        CellResult {
            cell: c.name.clone(),
            loss: c.loss,
            flip_fraction: c.flip_fraction,
            alpha: c.alpha,
            channel,
            steps: log.steps(),
            final_loss: log.final_loss().unwrap_or(f64::NAN),
            output,
            metrics,
        },
        log,
    ))
}

fn run_image_cells(cfg: &ExperimentConfig, jobs: usize, cells: &[ImageCell]) -> Result<(Vec<CellResult>, Vec<(String, TrainLog)>)> {
    let data = ImageData::generate(cfg)?;
    let out = run_cells(jobs, cells, |c| run_image_cell(cfg, &data, c))?;
    let mut results = Vec::with_capacity(out.len());
    let mut logs = Vec::with_capacity(out.len());
    for (r, log) in out {
        logs.push((r.cell.clone(), log));
        results.push(r);
    }
    Ok((results, logs))
}

fn find(results: &[CellResult], loss: LossKind, fraction: f64) -> Option<&CellResult> {
    results.iter().find(|r| r.loss == loss && r.flip_fraction == fraction)
}

/// Largest tolerated F-beta gap for "matches" comparisons.
pub const F_BETA_TOLERANCE: f64 = 0.05;
/// Smallest F-beta drop counted as "degrades".
pub const F_BETA_DROP: f64 = 0.3;

/// Trains every selected loss at every flip fraction on the same images and
/// scores each on clean test data.
pub fn run_fidelity_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    let mut cells = Vec::new();
    for &fraction in &cfg.flip_fractions {
        for &loss in &cfg.losses {
            cells.push(ImageCell {
                name: format!("{loss}_flip{fraction:.2}"),
                loss,
                flip_fraction: fraction,
                alpha: cfg.train.alpha,
            });
        }
    }
    let (results, logs) = run_image_cells(cfg, jobs, &cells)?;

    let mut checks = Vec::new();
    let f = |loss, fraction| find(&results, loss, fraction).map(|r| r.metrics.f_beta);
    let worst = cfg.flip_fractions.iter().copied().fold(0.0, f64::max);
    if worst > 0.0 {
        if let (Some(clean), Some(noisy)) = (f(LossKind::Cas, 0.0), f(LossKind::Cas, worst)) {
            checks.push(Check::at_most("cas_flip_robust_f_beta_gap", (clean - noisy).abs(), F_BETA_TOLERANCE));
        }
        if let (Some(clean), Some(noisy)) = (f(LossKind::Cace, 0.0), f(LossKind::Cace, worst)) {
            checks.push(Check::at_most("cace_flip_robust_f_beta_gap", (clean - noisy).abs(), F_BETA_TOLERANCE));
        }
    }
    if worst >= 0.5 {
        if let (Some(clean), Some(noisy)) = (f(LossKind::Ce, 0.0), f(LossKind::Ce, worst)) {
            checks.push(Check::at_least("ce_flip_f_beta_drop", clean - noisy, F_BETA_DROP));
        }
    }
    for fraction in [0.0, 0.02] {
        if let (Some(ce), Some(cas)) = (f(LossKind::Ce, fraction), f(LossKind::Cas, fraction)) {
            let name = format!("ce_cas_agree_at_flip{fraction:.2}");
            checks.push(Check::at_most(&name, (ce - cas).abs(), F_BETA_TOLERANCE));
        }
    }
    let curve = find(&results, LossKind::Cas, 0.0).map(|r| r.cell.clone());
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        metrics: cell_table(&results),
        logs,
        results: json!({ "cells": results }),
        checks,
        curve_cell: curve,
    })
}

/// Trains CAS at every alpha on identical data and initialization.
pub fn run_alpha_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    let cells: Vec<ImageCell> = cfg
        .alphas
        .iter()
        .map(|&alpha| ImageCell {
            name: format!("cas_alpha{alpha:.2}"),
            loss: LossKind::Cas,
            flip_fraction: 0.0,
            alpha,
        })
        .collect();
    let (results, logs) = run_image_cells(cfg, jobs, &cells)?;

    let mut ranked: Vec<&CellResult> = results.iter().collect();
    ranked.sort_by(|a, b| b.metrics.f_beta.total_cmp(&a.metrics.f_beta).then(a.alpha.total_cmp(&b.alpha)));
    let default_alpha = crate::losses::CasConfig::DEFAULT_ALPHA;
    let mut checks = Vec::new();
    if let Some(rank) = ranked.iter().position(|r| r.alpha == default_alpha) {
        checks.push(Check::at_most("default_alpha_f_beta_rank", (rank + 1) as f64, 2.0));
    }
    let curve = results
        .iter()
        .find(|r| r.alpha == default_alpha)
        .or(results.first())
        .map(|r| r.cell.clone());
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        metrics: cell_table(&results),
        logs,
        results: json!({
            "cells": results,
            "ranking": ranked.iter().map(|r| r.alpha).collect::<Vec<_>>(),
        }),
        checks,
        curve_cell: curve,
    })
}

/// Region and contour metrics of CAS argmax segmentations on multi-region
/// images, next to the trivial one-region segmentation as a reference.
pub fn run_texture_metrics(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    let cells = vec![ImageCell {
        name: "cas_texture".into(),
        loss: LossKind::Cas,
        flip_fraction: 0.0,
        alpha: cfg.train.alpha,
    }];
    let data = ImageData::generate(cfg)?;
    let (result, log) = run_cells(jobs, &cells, |c| run_image_cell(cfg, &data, c))?
        .pop()
        .expect("one cell");

    let single: Vec<MetricsReport> = data
        .test
        .iter()
        .map(|t| {
            let one = RegionMap::single(t.regions.height(), t.regions.width());
            Ok(MetricsReport {
                rand_index: crate::metrics::rand_index(&one, &t.regions)?,
                variation_of_information: crate::metrics::variation_of_information(&one, &t.regions)?,
                gt_covering: crate::metrics::gt_covering(&one, &t.regions)?,
                boundary_f: crate::metrics::boundary_f(&one, &t.regions, crate::metrics::DEFAULT_TOLERANCE)?,
                ..MetricsReport::default()
            })
        })
        .collect::<Result<_>>()?;
    let baseline = MetricsReport::mean(&single)?;
    let m = result.metrics;
    let checks = vec![
        Check::at_least("rand_index_above_one_region", m.rand_index - baseline.rand_index, 0.0),
        Check::at_most(
            "variation_of_information_below_one_region",
            m.variation_of_information - baseline.variation_of_information,
            0.0,
        ),
        Check::at_least("covering_above_one_region", m.gt_covering - baseline.gt_covering, 0.0),
    ];
    let mut table = Table::new(&["segmentation", "rand_index", "variation_of_information", "gt_covering", "boundary_f"]);
    for (name, r) in [("cas_argmax", &m), ("one_region", &baseline)] {
        table.push(vec![
            name.to_string(),
            cell(r.rand_index),
            cell(r.variation_of_information),
            cell(r.gt_covering),
            cell(r.boundary_f),
        ]);
    }
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        metrics: table,
        curve_cell: Some(result.cell.clone()),
        logs: vec![(result.cell.clone(), log)],
        results: json!({ "cas": result, "one_region": baseline }),
        checks,
    })
}
