use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMap, ClassMap, GradField, ImageGrid, RegionMap, SoftmaxField};
use crate::harness::config::{LossKind, TrainConfig};
use crate::losses::{cace_backward, cas_bounds, cas_value_and_grad, ce_backward, ce_forward, LossBounds};
use crate::nnet::{adam_step, backward, forward, AdamConfig, AdamState, ModelParams, NetSpec};
use crate::synth::{derive_seed, rng_from_seed, standardize, SynthSample};

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

/// One training image: the network input, its partition and the per-pixel
/// class labels (which only the cross-entropy losses read).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub input: ImageGrid,
    pub regions: RegionMap,
    pub labels: ClassMap,
}

impl TrainItem {
    /// Standardizes the image; labels come from the sample's region classes.
    pub fn from_sample(s: &SynthSample) -> Result<Self> {
        Ok(Self {
            input: standardize(&s.image)?,
            regions: s.regions.clone(),
            labels: s.class_map()?,
        })
    }
}

/// One test image with its clean ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub input: ImageGrid,
    pub regions: RegionMap,
    pub mask: BinaryMap,
}

impl EvalItem {
    pub fn from_sample(s: &SynthSample) -> Result<Self> {
        Ok(Self {
            input: standardize(&s.image)?,
            regions: s.regions.clone(),
            mask: BinaryMap::from_class_map(&s.class_map()?)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean per-image loss of the batch, before this step's update.
    pub loss: f64,
    /// Mean of the per-image CAS bounds; absent for other losses.
    pub bounds: Option<LossBounds>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub stopped_early: bool,
    /// Excluded from result files, which must not depend on timing.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    pub fn steps(&self) -> usize {
        self.entries.len()
    }
}

/// Loss value and `∂loss/∂s` for one image. For CAS also the bounds the
/// value must lie in.
pub fn item_loss_and_grad(
    s: &SoftmaxField,
    item: &TrainItem,
    cfg: &TrainConfig,
) -> Result<(f64, GradField, Option<LossBounds>)> {
    match cfg.loss {
        LossKind::Cas => {
            let cas = cfg.cas();
            let (value, grad) = cas_value_and_grad(s, &item.regions, cas)?;
            let bounds = cas_bounds(item.regions.region_count(), cas, s.channels());
            Ok((value, grad, Some(bounds)))
        }
        LossKind::Ce => Ok((ce_forward(s, &item.labels)?, ce_backward(s, &item.labels)?, None)),
        LossKind::Cace => {
            let (outcome, grad) = cace_backward(s, &item.labels)?;
            Ok((outcome.value, grad, None))
        }
    }
}

/// The network used by every image experiment: a per-pixel two-layer
/// perceptron. A 3×3 convolution would smear saturated outputs across
/// region borders, which the adaptive threshold then counts as foreground.
pub fn image_net(input_channels: usize, cfg: &TrainConfig) -> NetSpec {
    NetSpec::mlp(input_channels, cfg.hidden, cfg.channels)
}

fn check_items(items: &[TrainItem], spec: &NetSpec) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no training items".into()));
    }
    if let Some(i) = items
        .iter()
        .position(|it| it.input.shape().channels != spec.input_channels())
    {
        return Err(Error::ShapeMismatch(format!(
            "item {i} has {} channels, network expects {}",
            items[i].input.shape().channels,
            spec.input_channels()
        )));
    }
    Ok(())
}

struct EarlyStop {
    window: usize,
    min_improvement: f64,
}

impl EarlyStop {
    /// Stops when the mean loss of the latest complete window improved on
    /// the preceding window by less than `min_improvement`.
    fn should_stop(&self, losses: &[f64]) -> bool {
        let w = self.window;
        let n = losses.len();
        if w == 0 || n < 2 * w || !n.is_multiple_of(w) {
            return false;
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let previous = mean(&losses[n - 2 * w..n - w]);
        let latest = mean(&losses[n - w..]);
        previous - latest < self.min_improvement
    }
}

/// Minibatch Adam training from a seeded initialization.
///
/// Each step averages per-image losses and gradients over the batch. Batches
/// walk a fresh seeded shuffle of the items every epoch; `batch_size` 0 uses
/// every item in order. CAS values are checked online against their bounds.
/// The result depends only on the items, `spec`, `cfg` and `seed`.
pub fn train(items: &[TrainItem], spec: &NetSpec, cfg: &TrainConfig, seed: u64) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    check_items(items, spec)?;
    let start = Instant::now();
    let mut params = ModelParams::init(spec, derive_seed(seed, INIT_STREAM));
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = rng_from_seed(derive_seed(seed, BATCH_STREAM));
    let batch = if cfg.batch_size == 0 { items.len() } else { cfg.batch_size.min(items.len()) };
    let full_batch = batch == items.len();
    let stop = EarlyStop {
        window: cfg.early_stop_window,
        min_improvement: cfg.early_stop_min_improvement,
    };

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = items.len();
    let mut log = TrainLog::default();
    let mut losses = Vec::with_capacity(cfg.max_steps);

    for step in 0..cfg.max_steps {
        let picked: Vec<usize> = if full_batch {
            (0..items.len()).collect()
        } else {
            (0..batch)
                .map(|_| {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    cursor += 1;
                    order[cursor - 1]
                })
                .collect()
        };

        let scale = 1.0 / picked.len() as f64;
        let mut grads = ModelParams::zeros(spec);
        let mut loss = 0.0;
        let mut bounds: Option<LossBounds> = None;
        for &i in &picked {
            let (s, cache) = forward(&params, spec, &items[i].input)?;
            let (value, grad, b) = item_loss_and_grad(&s, &items[i], cfg)?;
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            if let Some(b) = b {
                if !b.contains(value) {
                    return Err(Error::BoundViolation {
                        step,
                        value,
                        lower: b.lower,
                        upper: b.upper,
                    });
                }
                let acc = bounds.get_or_insert(LossBounds { lower: 0.0, upper: 0.0 });
                acc.lower += scale * b.lower;
                acc.upper += scale * b.upper;
            }
            loss += scale * value;
            grads.add_scaled(&backward(&params, spec, &cache, &grad)?, scale);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        log.entries.push(LogEntry { step, loss, bounds });
        losses.push(loss);
        adam_step(&mut params, &grads, &mut adam).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step, loss },
            other => other,
        })?;
        if stop.should_stop(&losses) {
            log.stopped_early = true;
            break;
        }
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, log))
}

/// Softmax outputs for every input.
pub fn predict<'a>(
    params: &ModelParams,
    spec: &NetSpec,
    inputs: impl IntoIterator<Item = &'a ImageGrid>,
) -> Result<Vec<SoftmaxField>> {
    inputs.into_iter().map(|x| forward(params, spec, x).map(|(s, _)| s)).collect()
}
