//! Schedules, the optimizer, method variants and the training loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::data::{generate_toy, load_csv, BatchIterator, Dataset, DatasetMeta};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    adversarial_loss_tape, argmax, assign_pseudo_labels, mean_entropy_tape, supervised_loss_tape,
    AdversarialGates, LossBreakdown,
};
use crate::nets::ModelBundle;
use crate::rng::{RngStreams, STREAM_DIVERGENCE, STREAM_INIT, STREAM_SHUFFLE};
use crate::selection::{class_transferable_probability, ClassWeights};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::theory::{check_bound, BoundInputs, BoundReport, OracleContext};

pub const METRICS_SCHEMA_VERSION: &str = "1.0";

/// Switches of the selective adversarial method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantFlags {
    pub instance_sel: bool,
    pub class_sel: bool,
    pub self_training: bool,
    pub entropy_min: bool,
    pub shared_trunk: bool,
}

/// Kind of domain adversary attached to the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    None,
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub adversary: Adversary,
    #[serde(flatten)]
    pub flags: VariantFlags,
}

impl Variant {
    pub fn validate(&self) -> Result<()> {
        if self.adversary != Adversary::Multi && self.flags.instance_sel {
            return invalid("instance selection needs the multi-head adversary");
        }
        Ok(())
    }

    pub fn num_heads(&self, num_classes: usize) -> usize {
        match self.adversary {
            Adversary::Multi => num_classes,
            Adversary::None | Adversary::Single => 1,
        }
    }

    /// The entropy-aware example weight travels with class selection in the
    /// multi-head adversarial loss.
    pub fn adversarial_gates(&self) -> AdversarialGates {
        AdversarialGates {
            instance_sel: self.flags.instance_sel,
            class_sel: self.flags.class_sel,
            entropy_weight: self.flags.class_sel && self.adversary == Adversary::Multi,
        }
    }
}

/// Named variants: baselines, the two selective methods, and the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SourceOnly,
    Dann,
    San,
    SanPp,
    Instance,
    InstanceClass,
    InstanceClassEntropy,
    SanPpPrivate,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::SourceOnly,
        Preset::Dann,
        Preset::San,
        Preset::SanPp,
        Preset::Instance,
        Preset::InstanceClass,
        Preset::InstanceClassEntropy,
        Preset::SanPpPrivate,
    ];

    /// Rows of the component ablation, in table order.
    pub const ABLATION_ROWS: [Preset; 6] = [
        Preset::Dann,
        Preset::Instance,
        Preset::InstanceClass,
        Preset::InstanceClassEntropy,
        Preset::SanPpPrivate,
        Preset::SanPp,
    ];

    pub fn variant(self) -> Variant {
        let f = |instance_sel, class_sel, self_training, entropy_min, shared_trunk| VariantFlags {
            instance_sel,
            class_sel,
            self_training,
            entropy_min,
            shared_trunk,
        };
        let (adversary, flags) = match self {
            Preset::SourceOnly => (Adversary::None, f(false, false, false, false, false)),
            Preset::Dann => (Adversary::Single, f(false, false, false, false, false)),
            Preset::San => (Adversary::Multi, f(true, false, false, true, false)),
            Preset::SanPp => (Adversary::Multi, f(true, true, true, false, true)),
            Preset::Instance => (Adversary::Multi, f(true, false, false, false, true)),
            Preset::InstanceClass => (Adversary::Multi, f(true, true, false, false, true)),
            Preset::InstanceClassEntropy => (Adversary::Multi, f(true, true, false, true, true)),
            Preset::SanPpPrivate => (Adversary::Multi, f(true, true, true, false, false)),
        };
        Variant { adversary, flags }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::SourceOnly => "source_only",
            Preset::Dann => "dann",
            Preset::San => "san",
            Preset::SanPp => "san_pp",
            Preset::Instance => "instance",
            Preset::InstanceClass => "instance_class",
            Preset::InstanceClassEntropy => "instance_class_entropy",
            Preset::SanPpPrivate => "san_pp_private",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant preset '{s}'")))
    }
}

/// Optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub momentum: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub log_interval: usize,
    pub batch_size: usize,
    /// Coefficient of the mean target entropy when `entropy_min` is set.
    pub entropy_coef: f64,
    /// Steepness of the adversarial ramp `2 / (1 + exp(-gamma p)) - 1`.
    pub ramp_gamma: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
            momentum: 0.9,
            total_epochs: 40,
            warmup_epochs: 5,
            log_interval: 10,
            batch_size: 32,
            entropy_coef: 0.1,
            ramp_gamma: 10.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.eta0.is_finite() && self.eta0 > 0.0) {
            return invalid("eta0 must be positive");
        }
        if !finite_nonneg(self.alpha) || !finite_nonneg(self.beta) || !finite_nonneg(self.ramp_gamma) {
            return invalid("alpha, beta and ramp_gamma must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must be in [0, 1)");
        }
        if !finite_nonneg(self.entropy_coef) {
            return invalid("entropy_coef must be finite and nonnegative");
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return invalid("batch_size and log_interval must be positive");
        }
        Ok(())
    }
}

fn check_progress(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return invalid(format!("training progress {p} outside [0, 1]"));
    }
    Ok(())
}

/// Annealed learning rate `eta0 / (1 + alpha p)^beta`.
pub fn lr_at(p: f64, sched: &Schedule) -> Result<f64> {
    check_progress(p)?;
    Ok(sched.eta0 / (1.0 + sched.alpha * p).powf(sched.beta))
}

/// Adversarial weight `2 / (1 + exp(-gamma p)) - 1`; 0 at the start, close to
/// 1 at the end.
pub fn adv_ramp(p: f64, gamma: f64) -> Result<f64> {
    check_progress(p)?;
    Ok(2.0 / (1.0 + (-gamma * p).exp()) - 1.0)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

/// `v <- momentum v + g; theta <- theta - lr v`.
pub fn sgd_update(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != velocity.len() {
        return invalid("parameter, gradient and velocity lengths differ");
    }
    for ((t, g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *t -= lr * *v;
    }
    Ok(())
}

/// Applies [`sgd_update`] to every tensor in `params` using its accumulated
/// gradient (zero where none was recorded).
pub fn sgd_step(params: &mut ParamStore, state: &mut SgdState, lr: f64, momentum: f64) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return invalid("optimizer state does not match the parameter store");
    }
    for id in params.ids() {
        let t = params.get_mut(id);
        let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        sgd_update(t.values_mut(), &grad, &mut state.velocity[id.0], lr, momentum)?;
    }
    Ok(())
}

/// Accuracy and confusion matrix (`[true][predicted]` counts).
pub fn evaluate(bundle: &ModelBundle, features: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Vec<usize>>)> {
    if labels.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    let (_, preds) = bundle.predict(features)?;
    evaluate_predictions(&preds, labels)
}

pub fn evaluate_predictions(preds: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Vec<usize>>)> {
    let k = preds.cols();
    if labels.is_empty() || labels.len() != preds.rows() {
        return invalid("labels do not match predictions");
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return invalid(format!("label {y} out of range for {k} classes"));
        }
        let p = argmax(preds.row(i));
        confusion[y][p] += 1;
        if p == y {
            correct += 1;
        }
    }
    Ok((correct as f64 / labels.len() as f64, confusion))
}

/// One optimization run over fixed source and target sets.
#[derive(Debug)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub variant: Variant,
    pub schedule: Schedule,
    sgd: SgdState,
    streams: RngStreams,
    source_x: Tensor,
    source_labels: Vec<usize>,
    target_x: Tensor,
    step: usize,
    total_steps: usize,
    steps_per_epoch: usize,
    lambda_override: Option<f64>,
    replace_w: Option<ClassWeights>,
}

/// What one epoch produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    /// Class weights estimated at the start of the epoch.
    pub w: ClassWeights,
    /// Weights applied in the losses this epoch: `w` rescaled to a maximum of
    /// 1 once warm-up is over, all ones before that or without class selection.
    pub w_used: ClassWeights,
    pub losses: Vec<LossBreakdown>,
    /// Hard pseudo-labels in force during the epoch, if self-training ran.
    pub pseudo_labels: Option<Vec<usize>>,
}

impl Trainer {
    pub fn new(
        bundle: ModelBundle,
        variant: Variant,
        schedule: Schedule,
        source: &Dataset,
        target: &Dataset,
        streams: RngStreams,
    ) -> Result<Self> {
        variant.validate()?;
        schedule.validate()?;
        if source.dim != target.dim || source.dim != bundle.arch.input_dim {
            return invalid("source, target and network input widths differ");
        }
        let source_labels = source.labels()?;
        if let Some(&y) = source_labels.iter().find(|&&y| y >= bundle.num_classes()) {
            return invalid(format!("source label {y} exceeds the classifier width"));
        }
        let large = source.len().max(target.len());
        if schedule.batch_size > source.len().min(target.len()) {
            return invalid("batch size exceeds a domain's sample count");
        }
        let steps_per_epoch = large.div_ceil(schedule.batch_size);
        Ok(Self {
            bundle,
            variant,
            sgd: SgdState::default(),
            streams,
            source_x: source.features()?,
            source_labels,
            target_x: target.features()?,
            step: 0,
            total_steps: steps_per_epoch * schedule.total_epochs,
            steps_per_epoch,
            schedule,
            lambda_override: None,
            replace_w: None,
        })
    }

    /// Pins the adversarial weight instead of following the ramp.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_override = Some(lambda);
        self
    }

    /// Replaces the estimated class weights with fixed ones in every loss.
    pub fn with_fixed_weights(mut self, w: ClassWeights) -> Self {
        self.replace_w = Some(w);
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn global_step(&self) -> usize {
        self.step
    }

    /// Progress after the current step; grows by `1 / total_steps` per step.
    pub fn progress(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        ((step + 1) as f64 / self.total_steps as f64).min(1.0)
    }

    pub fn source_x(&self) -> &Tensor {
        &self.source_x
    }

    pub fn target_x(&self) -> &Tensor {
        &self.target_x
    }

    pub fn source_labels(&self) -> &[usize] {
        &self.source_labels
    }

    fn stacked_inputs(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
        let d = self.source_x.cols();
        let mut v = Vec::with_capacity((src.len() + tgt.len()) * d);
        for &i in src {
            v.extend_from_slice(self.source_x.row(i));
        }
        for &i in tgt {
            v.extend_from_slice(self.target_x.row(i));
        }
        Ok(Tensor::matrix(src.len() + tgt.len(), d, v)?)
    }

    /// One shuffled pass. Class weights and pseudo-labels are computed once
    /// from the current model at the start and held fixed for the epoch; both
    /// stay off until `warmup_epochs` epochs have run.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochOutcome> {
        let k = self.bundle.num_classes();
        let (_, target_preds) = self.bundle.predict(&self.target_x)?;
        let w = class_transferable_probability(&target_preds)?;
        let flags = self.variant.flags;
        let warm = epoch >= self.schedule.warmup_epochs;
        let w_used = match (&self.replace_w, flags.class_sel && warm) {
            (Some(fixed), _) => fixed.clone(),
            (None, true) => w.normalized_by_max(),
            (None, false) => ClassWeights::ones(k),
        };
        let self_training = flags.self_training && warm;
        let pseudo = self_training.then(|| assign_pseudo_labels(&target_preds).hard);
        let gates = self.variant.adversarial_gates();

        let mut rng = self.streams.indexed(STREAM_SHUFFLE, epoch as u64);
        let batches = BatchIterator::new(
            self.source_x.rows(),
            self.target_x.rows(),
            self.schedule.batch_size,
            &mut rng,
        )?;
        let mut losses = Vec::with_capacity(self.steps_per_epoch);
        for batch in batches {
            let p = self.progress(self.step);
            let lr = lr_at(p, &self.schedule)?;
            let lambda = match self.lambda_override {
                Some(l) => l,
                None if warm => adv_ramp(p, self.schedule.ramp_gamma)?,
                None => 0.0,
            };
            let b = batch.source.len();
            let x = self.stacked_inputs(&batch.source, &batch.target)?;
            let labels: Vec<usize> = batch.source.iter().map(|&i| self.source_labels[i]).collect();

            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let f = self.bundle.f_forward(&mut tape, xv)?;
            let probs = self.bundle.g_forward(&mut tape, f)?;
            let ps = tape.slice_rows(probs, 0, b)?;
            let l_sup = supervised_loss_tape(&mut tape, ps, &labels, &w_used)?;
            let mut total = l_sup;
            let mut l_self_value = 0.0;
            if self_training || flags.entropy_min {
                let pt = tape.slice_rows(probs, b, 2 * b)?;
                let mut l_self = None;
                if let Some(pseudo) = &pseudo {
                    let targets: Vec<usize> = batch.target.iter().map(|&i| pseudo[i]).collect();
                    l_self = Some(supervised_loss_tape(&mut tape, pt, &targets, &w_used)?);
                }
                if flags.entropy_min {
                    let h = mean_entropy_tape(&mut tape, pt)?;
                    let h = tape.scale(h, self.schedule.entropy_coef)?;
                    l_self = Some(match l_self {
                        Some(s) => tape.add(s, h)?,
                        None => h,
                    });
                }
                if let Some(l_self) = l_self {
                    l_self_value = tape.scalar_value(l_self)?;
                    total = tape.add(total, l_self)?;
                }
            }
            let mut l_adv_value = 0.0;
            if self.variant.adversary != Adversary::None {
                let z = self.bundle.d_logits(&mut tape, f, lambda)?;
                let rows: Vec<Vec<f64>> = tape.to_tensor(probs).to_rows();
                let domains: Vec<f64> = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
                let l_adv = adversarial_loss_tape(&mut tape, z, &rows, &domains, &w_used, gates)?;
                l_adv_value = tape.scalar_value(l_adv)?;
                total = tape.add(total, l_adv)?;
            }
            tape.backward_into(total, &mut self.bundle.params)?;
            sgd_step(&mut self.bundle.params, &mut self.sgd, lr, self.schedule.momentum)?;
            self.bundle.params.zero_grad();
            losses.push(LossBreakdown::new(tape.scalar_value(l_sup)?, l_self_value, l_adv_value));
            self.step += 1;
        }
        Ok(EpochOutcome {
            w,
            w_used,
            losses,
            pseudo_labels: pseudo,
        })
    }
}

/// Per-epoch metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema_version: String,
    pub epoch: usize,
    pub target_accuracy: f64,
    pub w: Vec<f64>,
    pub losses: LossBreakdown,
    pub bound: BoundReport,
    /// Largest `|sum - 1|` over all prediction rows and over `w`.
    pub simplex_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses one line, rejecting unknown major schema versions.
    pub fn from_json_line(line: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(line)?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format {
                path: "metrics".into(),
                msg: "missing schema_version".into(),
            })?;
        let major = version.split('.').next().unwrap_or("");
        let ours = METRICS_SCHEMA_VERSION.split('.').next().unwrap_or("");
        if major != ours {
            return Err(Error::Format {
                path: "metrics".into(),
                msg: format!("unsupported metrics schema version {version}"),
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct MetricsTrace {
    pub records: Vec<MetricsRecord>,
    /// Loss breakdown every `log_interval` global steps.
    pub step_losses: Vec<(usize, LossBreakdown)>,
    pub confusion: Vec<Vec<usize>>,
    pub bundle: ModelBundle,
}

impl MetricsTrace {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("trace always holds the initialization record")
    }
}

/// Source set, unlabeled target set and the oracle.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub source: Dataset,
    pub target: Dataset,
    pub oracle: OracleContext,
    pub num_classes: usize,
}

pub fn load_data(source: &DataSource, seed: u64) -> Result<ExperimentData> {
    match source {
        DataSource::Synthetic(spec) => {
            let toy = generate_toy(spec, seed)?;
            Ok(ExperimentData {
                source: toy.source,
                target: toy.target,
                oracle: toy.oracle,
                num_classes: spec.num_source_classes,
            })
        }
        DataSource::Csv(paths) => {
            let source = load_csv(&paths.source)?;
            let target = load_csv(&paths.target)?;
            let oracle_set = load_csv(&paths.target_labels)?;
            let meta = DatasetMeta::load(&paths.meta)?;
            let shared = meta.shared_classes.clone().ok_or_else(|| {
                Error::Config("metadata lacks the shared class set needed for evaluation".into())
            })?;
            if oracle_set.len() != target.len() {
                return invalid("oracle label file and target file differ in length");
            }
            let labels = oracle_set.labels()?;
            let oracle = OracleContext::new(shared, labels);
            oracle.validate(meta.num_source_classes)?;
            Ok(ExperimentData {
                source,
                target: target.without_labels(),
                oracle,
                num_classes: meta.num_source_classes,
            })
        }
    }
}

fn snapshot(
    trainer: &Trainer,
    data: &ExperimentData,
    epoch: usize,
    losses: LossBreakdown,
    streams: &RngStreams,
) -> Result<MetricsRecord> {
    let bundle = &trainer.bundle;
    let (tf, tp) = bundle.predict(trainer.target_x())?;
    let (sf, sp) = bundle.predict(trainer.source_x())?;
    let w = class_transferable_probability(&tp)?;
    let (acc, _) = evaluate_predictions(&tp, &data.oracle.target_labels)?;
    let mut rng = streams.indexed(STREAM_DIVERGENCE, epoch as u64);
    let bound = check_bound(
        BoundInputs {
            target_preds: &tp,
            target_features: &tf,
            source_preds: &sp,
            source_features: &sf,
            source_labels: trainer.source_labels(),
            epoch,
        },
        &data.oracle,
        &mut rng,
    )?;
    let row_err = |t: &Tensor| {
        (0..t.rows())
            .map(|i| (t.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    };
    let simplex_error = row_err(&tp).max(row_err(&sp)).max((w.sum() - 1.0).abs());
    Ok(MetricsRecord {
        schema_version: METRICS_SCHEMA_VERSION.to_string(),
        epoch,
        target_accuracy: acc,
        w: w.as_slice().to_vec(),
        losses,
        bound,
        simplex_error,
        wall_clock_seconds: None,
    })
}

/// Trains one configuration and records metrics before training (epoch 0)
/// and after every epoch.
pub fn run_experiment(config: &RunConfig) -> Result<MetricsTrace> {
    run_experiment_with(config, |_| Ok(()))
}

/// [`run_experiment`] with a callback that sees each record as soon as it is
/// made, with elapsed wall-clock seconds filled in. Records kept in the
/// returned trace carry no timing so that traces compare equal across runs.
pub fn run_experiment_with(
    config: &RunConfig,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<MetricsTrace> {
    config.validate()?;
    let variant = config.variant.resolve();
    let streams = RngStreams::new(config.seed);
    let data = load_data(&config.data, config.seed)?;
    if data.num_classes != config.architecture.num_classes {
        return Err(Error::Config("architecture num_classes differs from the data".into()));
    }
    let mut init_rng = streams.stream(STREAM_INIT);
    let bundle = ModelBundle::init(
        &config.architecture,
        variant.num_heads(config.architecture.num_classes),
        variant.flags.shared_trunk,
        &mut init_rng,
    )?;
    let mut trainer = Trainer::new(
        bundle,
        variant,
        config.schedule.clone(),
        &data.source,
        &data.target,
        streams,
    )?;
    let started = Instant::now();
    let mut records = Vec::with_capacity(config.schedule.total_epochs + 1);
    let mut step_losses = Vec::new();
    let mut emit = |record: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        on_record(&MetricsRecord {
            wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
            ..record.clone()
        })?;
        records.push(record);
        Ok(())
    };
    emit(snapshot(&trainer, &data, 0, LossBreakdown::default(), &streams)?, &mut records)?;
    for epoch in 0..config.schedule.total_epochs {
        let first_step = trainer.global_step();
        let outcome = trainer.train_epoch(epoch)?;
        for (i, l) in outcome.losses.iter().enumerate() {
            let step = first_step + i + 1;
            if step % config.schedule.log_interval == 0 {
                step_losses.push((step, *l));
            }
        }
        let mean = LossBreakdown::mean(&outcome.losses);
        log::debug!(
            "epoch {} sup {:.4} self {:.4} adv {:.4}",
            epoch + 1,
            mean.l_sup,
            mean.l_self,
            mean.l_adv
        );
        emit(snapshot(&trainer, &data, epoch + 1, mean, &streams)?, &mut records)?;
    }
    let (_, tp) = trainer.bundle.predict(trainer.target_x())?;
    let (_, confusion) = evaluate_predictions(&tp, &data.oracle.target_labels)?;
    Ok(MetricsTrace {
        records,
        step_losses,
        confusion,
        bundle: trainer.bundle,
    })
}
