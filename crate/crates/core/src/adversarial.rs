//! Domain-adversarial training of a DenseNet split into three sub-networks:
//! a shared feature extractor `x`, a label classifier `y` and a domain
//! classifier `z` whose first layer is a gradient reversal layer.
//!
//! Updates are plain SGD on batch-summed cross-entropies:
//!
//! ```text
//! theta_y <- theta_y - eps * dLy/dtheta_y
//! theta_z <- theta_z - eps * dLz/dtheta_z
//! theta_x <- theta_x - eps * (dLy/dtheta_x - lambda * dLz/dtheta_x)
//! ```
//!
//! [`adversarial_step`] applies these three rules explicitly from two
//! backward passes. [`adversarial_step_grl`] instead backpropagates
//! `Ly + Lz` once through a graph containing the reversal layer and takes a
//! single gradient step; the two must agree.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradFault, Graph, Mode, NodeId};
use crate::densenet::{gaussian, DenseNet, DenseNetConfig, Model, Stage};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParameterSet, StatsSet};
use crate::tensor::{Real, Tensor};

/// Forward pass of the gradient reversal layer: the identity.
pub fn grl_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.clone()
}

/// Backward pass of the gradient reversal layer: `-lambda * upstream`.
pub fn grl_backward<F: Real>(upstream: &Tensor<F>, lambda: F) -> Tensor<F> {
    let neg = -lambda;
    upstream.map(|g| neg * g)
}

/// Which sub-network a parameter belongs to, read from its name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subnet {
    Shared,
    Label,
    Domain,
}

impl Subnet {
    pub fn of(name: &str) -> Option<Subnet> {
        match name.split('.').next()? {
            "x" => Some(Subnet::Shared),
            "y" => Some(Subnet::Label),
            "z" => Some(Subnet::Domain),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Subnet::Shared => "x",
            Subnet::Label => "y",
            Subnet::Domain => "z",
        }
    }
}

/// Hook for a step-dependent reversal coefficient.
#[derive(Clone, Copy, Debug)]
pub enum LambdaSchedule {
    Constant,
    Custom(fn(step: usize, total: usize, base: f64) -> f64),
}

#[derive(Clone, Debug)]
pub struct AdversarialConfig {
    pub lambda: f64,
    pub epsilon: f64,
    /// Name of the last stage belonging to the shared network, e.g. `stem`
    /// or `trans1`.
    pub shared_split: String,
    /// Hidden widths of the domain classifier between pooling and output.
    pub domain_hidden: Vec<usize>,
    pub schedule: LambdaSchedule,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            lambda: 0.5,
            epsilon: 0.01,
            shared_split: "stem".into(),
            domain_hidden: Vec::new(),
            schedule: LambdaSchedule::Constant,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.domain_hidden.contains(&0) {
            return Err(Error::Config("domain_hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LambdaSchedule::Constant => self.lambda,
            LambdaSchedule::Custom(f) => f(step, total, self.lambda),
        }
    }
}

/// Domain classifier: reversal layer, global average pool, then affine
/// layers (ReLU between hidden ones).
#[derive(Clone, Debug, PartialEq)]
pub struct DomainHead {
    pub in_channels: usize,
    pub hidden: Vec<usize>,
    pub num_domains: usize,
}

impl DomainHead {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_channels];
        w.extend(&self.hidden);
        w.push(self.num_domains);
        w
    }

    fn init<F: Real>(&self, params: &mut ParameterSet<F>, rng: &mut ChaCha8Rng) -> Result<()> {
        let w = self.widths();
        for (i, pair) in w.windows(2).enumerate() {
            let gain = if i + 2 < w.len() { 2.0 } else { 1.0 };
            params.insert(format!("z.domain.fc{i}.weight"), gaussian(&[pair[0], pair[1]], pair[0], gain, rng))?;
            params.insert(format!("z.domain.fc{i}.bias"), Tensor::zeros(&[pair[1]]))?;
        }
        Ok(())
    }

    /// `reversal` is the GRL coefficient; `None` leaves the reversal layer
    /// out of the graph.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParameterSet<F>,
        features: NodeId,
        reversal: Option<F>,
    ) -> Result<NodeId> {
        let x = match reversal {
            Some(lambda) => g.grl(features, lambda),
            None => features,
        };
        let mut h = g.global_avg_pool(x)?;
        let layers = self.hidden.len() + 1;
        for i in 0..layers {
            let w = g.param(params, &format!("z.domain.fc{i}.weight"))?;
            let b = g.param(params, &format!("z.domain.fc{i}.bias"))?;
            h = g.affine(h, w, b)?;
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialModel<F> {
    pub arch: DenseNet,
    /// Number of leading stages forming the shared network.
    pub shared_stages: usize,
    pub domain: DomainHead,
    pub params: ParameterSet<F>,
    pub stats: StatsSet<F>,
}

pub fn build_adversarial<F: Real>(
    config: &DenseNetConfig,
    num_domains: usize,
    adv: &AdversarialConfig,
    seed: u64,
) -> Result<AdversarialModel<F>> {
    adv.validate()?;
    if num_domains == 0 {
        return Err(Error::Config("num_domains must be at least 1".into()));
    }
    let plain = DenseNet::layout(config, |_| String::new())?;
    let split = plain
        .stage_index(&adv.shared_split)
        .ok_or_else(|| Error::Config(format!("unknown shared split stage {}", adv.shared_split)))?;
    if matches!(plain.stages[split], Stage::Head(_)) {
        return Err(Error::Config("the classifier head cannot be shared".into()));
    }
    let shared_stages = split + 1;
    let arch = DenseNet::layout(config, |i| if i < shared_stages { "x.".into() } else { "y.".into() })?;
    let domain = DomainHead {
        in_channels: arch.stages[split].out_channels(),
        hidden: adv.domain_hidden.clone(),
        num_domains,
    };
    let mut params = ParameterSet::new();
    let mut stats = StatsSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    arch.init_params(&mut params, &mut stats, &mut rng)?;
    domain.init(&mut params, &mut rng)?;
    Ok(AdversarialModel {
        arch,
        shared_stages,
        domain,
        params,
        stats,
    })
}

/// A mini-batch with per-example label and domain targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch<F> {
    pub input: Tensor<F>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradNorms {
    pub shared: f64,
    pub label: f64,
    pub domain: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss_y: f64,
    pub loss_z: f64,
    pub grad_norms: GradNorms,
}

struct Forward {
    label_logits: NodeId,
    domain_logits: NodeId,
}

impl<F: Real> AdversarialModel<F> {
    pub fn num_labels(&self) -> usize {
        self.arch.config.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.domain.num_domains
    }

    fn forward(&mut self, g: &mut Graph<F>, x: NodeId, mode: Mode, reversal: Option<F>) -> Result<Forward> {
        let n = self.arch.stages.len();
        let shared = self
            .arch
            .forward_stages(0..self.shared_stages, g, &self.params, &mut self.stats, x, mode)?;
        let label_logits = self
            .arch
            .forward_stages(self.shared_stages..n, g, &self.params, &mut self.stats, shared, mode)?;
        let domain_logits = self.domain.forward(g, &self.params, shared, reversal)?;
        Ok(Forward {
            label_logits,
            domain_logits,
        })
    }

    fn check_batch(&self, batch: &LabeledBatch<F>) -> Result<()> {
        let b = batch.input.shape().first().copied().unwrap_or(0);
        if batch.labels.len() != b || batch.domains.len() != b || b == 0 {
            return Err(Error::shape(
                "adversarial_step",
                format!(
                    "input {:?} with {} labels and {} domains",
                    batch.input.shape(),
                    batch.labels.len(),
                    batch.domains.len()
                ),
            ));
        }
        Ok(())
    }

    /// Label logits through the shared and label networks only (eval mode).
    pub fn predict_labels(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let mut stats = self.stats.clone();
        let n = self.arch.stages.len();
        let y = self.arch.forward_stages(0..n, &mut g, &self.params, &mut stats, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Domain logits through the shared network and the domain head (eval mode).
    pub fn predict_domains(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let mut stats = self.stats.clone();
        let shared = self
            .arch
            .forward_stages(0..self.shared_stages, &mut g, &self.params, &mut stats, x, Mode::Eval)?;
        let z = self.domain.forward(&mut g, &self.params, shared, None)?;
        Ok(g.value(z).clone())
    }

    /// Training-mode `(Ly, Lz)` at the current parameters without touching
    /// the running statistics.
    pub fn objective(&self, batch: &LabeledBatch<F>) -> Result<(F, F)> {
        self.check_batch(batch)?;
        let mut scratch = self.clone();
        let mut g = Graph::new();
        let x = g.input(batch.input.clone());
        let fwd = scratch.forward(&mut g, x, Mode::Train, None)?;
        let ly = g.softmax_cross_entropy(fwd.label_logits, &batch.labels)?;
        let lz = g.softmax_cross_entropy(fwd.domain_logits, &batch.domains)?;
        Ok((g.value(ly).data()[0], g.value(lz).data()[0]))
    }

    /// Separate gradients of `Ly` and `Lz` at the current parameters, plus
    /// the two loss values.
    pub fn loss_gradients(&mut self, batch: &LabeledBatch<F>) -> Result<(F, F, Gradients<F>, Gradients<F>)> {
        self.loss_gradients_with(batch, None)
    }

    pub(crate) fn loss_gradients_with(
        &mut self,
        batch: &LabeledBatch<F>,
        fault: Option<GradFault>,
    ) -> Result<(F, F, Gradients<F>, Gradients<F>)> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        g.inject_fault(fault);
        let x = g.input(batch.input.clone());
        let fwd = self.forward(&mut g, x, Mode::Train, None)?;
        let ly = g.softmax_cross_entropy(fwd.label_logits, &batch.labels)?;
        let lz = g.softmax_cross_entropy(fwd.domain_logits, &batch.domains)?;
        let (loss_y, loss_z) = (g.value(ly).data()[0], g.value(lz).data()[0]);
        g.backward(ly)?;
        let grad_y = g.param_grads(&self.params);
        g.backward(lz)?;
        let grad_z = g.param_grads(&self.params);
        Ok((loss_y, loss_z, grad_y, grad_z))
    }
}

fn divergence(step: usize, loss_y: f64, loss_z: f64, what: &str) -> Error {
    Error::Divergence {
        step,
        loss_y,
        loss_z,
        diagnostics: what.to_string(),
    }
}

fn norms<F: Real>(grads: &Gradients<F>) -> GradNorms {
    GradNorms {
        shared: grads.norm_where(|n| Subnet::of(n) == Some(Subnet::Shared)),
        label: grads.norm_where(|n| Subnet::of(n) == Some(Subnet::Label)),
        domain: grads.norm_where(|n| Subnet::of(n) == Some(Subnet::Domain)),
    }
}

/// One adversarial update applying the three explicit rules. Both partial
/// derivatives are taken at the pre-step parameters; the returned losses are
/// the pre-step values.
pub fn adversarial_step<F: Real>(
    model: &mut AdversarialModel<F>,
    batch: &LabeledBatch<F>,
    config: &AdversarialConfig,
) -> Result<StepReport> {
    adversarial_step_at(model, batch, config, config.lambda, 0)
}

/// Apply the three explicit update rules in place and return the per-parameter
/// descent directions that were used.
pub fn explicit_update<F: Real>(
    params: &mut ParameterSet<F>,
    grad_y: &Gradients<F>,
    grad_z: &Gradients<F>,
    epsilon: f64,
    lambda: f64,
) -> Result<Gradients<F>> {
    let eps = F::of(epsilon);
    let lambda = F::of(lambda);
    let mut combined = params.zeros_like();
    for (name, theta) in params.iter_mut() {
        let missing = || Error::Contract(format!("no gradient for {name}"));
        let gy = grad_y.get(name).ok_or_else(missing)?;
        let gz = grad_z.get(name).ok_or_else(missing)?;
        let slot = combined.tensors.get_mut(name).expect("same names");
        let subnet = Subnet::of(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} has no x/y/z tag")))?;
        for (i, t) in theta.data_mut().iter_mut().enumerate() {
            let d = match subnet {
                Subnet::Label => gy.data()[i],
                Subnet::Domain => gz.data()[i],
                Subnet::Shared => gy.data()[i] - lambda * gz.data()[i],
            };
            slot.data_mut()[i] = d;
            *t -= eps * d;
        }
    }
    Ok(combined)
}

fn adversarial_step_at<F: Real>(
    model: &mut AdversarialModel<F>,
    batch: &LabeledBatch<F>,
    config: &AdversarialConfig,
    lambda: f64,
    step: usize,
) -> Result<StepReport> {
    let (loss_y, loss_z, grad_y, grad_z) = model.loss_gradients(batch)?;
    let (ly, lz) = (loss_y.as_f64(), loss_z.as_f64());
    if !ly.is_finite() || !lz.is_finite() {
        return Err(divergence(step, ly, lz, "non-finite loss before update"));
    }
    let combined = explicit_update(&mut model.params, &grad_y, &grad_z, config.epsilon, lambda)?;
    Ok(StepReport {
        loss_y: ly,
        loss_z: lz,
        grad_norms: norms(&combined),
    })
}

/// The same update realized by inserting the reversal layer in front of the
/// domain head, backpropagating `Ly + Lz` once and taking a plain gradient
/// step on every parameter.
pub fn adversarial_step_grl<F: Real>(
    model: &mut AdversarialModel<F>,
    batch: &LabeledBatch<F>,
    config: &AdversarialConfig,
) -> Result<StepReport> {
    model.check_batch(batch)?;
    let mut g = Graph::new();
    let x = g.input(batch.input.clone());
    let fwd = model.forward(&mut g, x, Mode::Train, Some(F::of(config.lambda)))?;
    let ly = g.softmax_cross_entropy(fwd.label_logits, &batch.labels)?;
    let lz = g.softmax_cross_entropy(fwd.domain_logits, &batch.domains)?;
    let total = g.add(ly, lz)?;
    let (loss_y, loss_z) = (g.value(ly).data()[0].as_f64(), g.value(lz).data()[0].as_f64());
    if !loss_y.is_finite() || !loss_z.is_finite() {
        return Err(divergence(0, loss_y, loss_z, "non-finite loss before update"));
    }
    g.backward(total)?;
    let grads = g.param_grads(&model.params);
    let eps = F::of(config.epsilon);
    for (name, theta) in model.params.iter_mut() {
        let gr = grads.get(name).expect("gradient for every parameter");
        for (t, &d) in theta.data_mut().iter_mut().zip(gr.data()) {
            *t -= eps * d;
        }
    }
    Ok(StepReport {
        loss_y,
        loss_z,
        grad_norms: norms(&grads),
    })
}

/// Examples stacked into one tensor with label and domain targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    pub inputs: Tensor<F>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub num_labels: usize,
    pub num_domains: usize,
}

impl<F: Real> Dataset<F> {
    pub fn new(
        inputs: Tensor<F>,
        labels: Vec<usize>,
        domains: Vec<usize>,
        num_labels: usize,
        num_domains: usize,
    ) -> Result<Self> {
        let n = inputs.shape()[0];
        if inputs.rank() != 4 || labels.len() != n || domains.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("inputs {:?}, {} labels, {} domains", inputs.shape(), labels.len(), domains.len()),
            ));
        }
        if let Some(&t) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::Index { target: t, classes: num_labels });
        }
        if let Some(&t) = domains.iter().find(|&&d| d >= num_domains) {
            return Err(Error::Index { target: t, classes: num_domains });
        }
        Ok(Dataset {
            inputs,
            labels,
            domains,
            num_labels,
            num_domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<LabeledBatch<F>> {
        Ok(LabeledBatch {
            input: self.inputs.gather_outer(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            domains: rows.iter().map(|&r| self.domains[r]).collect(),
        })
    }

    /// Examples whose domain equals `domain`.
    pub fn filter_domain(&self, domain: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.domains[i] == domain).collect();
        if rows.is_empty() {
            return Err(Error::Input(format!("no examples in domain {domain}")));
        }
        let b = self.batch(&rows)?;
        Dataset::new(b.input, b.labels, b.domains, self.num_labels, self.num_domains)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            steps: 2000,
            batch_size: 32,
            seed: 0,
            eval_every: 100,
        }
    }
}

/// Accuracy and mean per-example losses over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub label_acc: f64,
    pub domain_acc: f64,
    pub loss_y: f64,
    pub loss_z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_y: f64,
    pub loss_z: f64,
    pub label_acc: f64,
    pub domain_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "step,loss_y,loss_z,label_acc,domain_acc";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.loss_y, r.loss_z, r.label_acc, r.domain_acc
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Seeded epoch-wise shuffling; incomplete trailing batches are dropped.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(n);
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
            batch,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let rows = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        rows
    }
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn scores<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> (usize, f64) {
    let cols = logits.shape()[1];
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &t) in logits.data().chunks(cols).zip(targets) {
        if argmax(row) == t {
            correct += 1;
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        loss += lse - row[t].as_f64();
    }
    (correct, loss)
}

const EVAL_CHUNK: usize = 128;

/// Fraction of correct argmax predictions and mean cross-entropy.
pub fn classification_metrics<F: Real>(
    data: &Dataset<F>,
    targets: &[usize],
    predict: impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
) -> Result<(f64, f64)> {
    let n = data.len();
    let (mut correct, mut loss) = (0, 0.0);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let logits = predict(&data.inputs.slice_outer(start, len)?)?;
        let (c, l) = scores(&logits, &targets[start..start + len]);
        correct += c;
        loss += l;
        start += len;
    }
    Ok((correct as f64 / n as f64, loss / n as f64))
}

impl<F: Real> AdversarialModel<F> {
    pub fn evaluate(&self, data: &Dataset<F>) -> Result<EvalMetrics> {
        if data.num_labels != self.num_labels() || data.num_domains != self.num_domains() {
            return Err(Error::Load(format!(
                "model has {} labels / {} domains, data has {} / {}",
                self.num_labels(),
                self.num_domains(),
                data.num_labels,
                data.num_domains
            )));
        }
        let (label_acc, loss_y) = classification_metrics(data, &data.labels, |x| self.predict_labels(x))?;
        let (domain_acc, loss_z) = classification_metrics(data, &data.domains, |x| self.predict_domains(x))?;
        Ok(EvalMetrics {
            label_acc,
            domain_acc,
            loss_y,
            loss_z,
        })
    }
}

fn run_schedule<F: Real>(
    data: &Dataset<F>,
    schedule: &Schedule,
    mut step: impl FnMut(usize, &LabeledBatch<F>) -> Result<()>,
    mut evaluate: impl FnMut() -> Result<EvalMetrics>,
    log: &mut TrainingLog,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if schedule.batch_size == 0 || schedule.eval_every == 0 {
        return Err(Error::Config("batch_size and eval_every must be at least 1".into()));
    }
    let mut sampler = BatchSampler::new(data.len(), schedule.batch_size, schedule.seed);
    for s in 1..=schedule.steps {
        let batch = data.batch(sampler.next_batch())?;
        step(s, &batch)?;
        if s % schedule.eval_every == 0 || s == schedule.steps {
            let m = evaluate()?;
            log.rows.push(LogRow {
                step: s,
                loss_y: m.loss_y,
                loss_z: m.loss_z,
                label_acc: m.label_acc,
                domain_acc: m.domain_acc,
            });
        }
    }
    Ok(())
}

/// Adversarial training over seeded mini-batches. Metrics are logged every
/// `eval_every` steps (and at the final step) on `eval`, or on the training
/// data when no evaluation set is given.
pub fn train<F: Real>(
    model: &mut AdversarialModel<F>,
    data: &Dataset<F>,
    config: &AdversarialConfig,
    schedule: &Schedule,
    eval: Option<&Dataset<F>>,
) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    train_into(model, data, config, schedule, eval, &mut log)?;
    Ok(log)
}

/// [`train`], appending rows to `log` as they are produced so that a run that
/// fails part-way keeps the rows logged before the failure.
pub fn train_into<F: Real>(
    model: &mut AdversarialModel<F>,
    data: &Dataset<F>,
    config: &AdversarialConfig,
    schedule: &Schedule,
    eval: Option<&Dataset<F>>,
    log: &mut TrainingLog,
) -> Result<()> {
    config.validate()?;
    let eval = eval.unwrap_or(data);
    let cell = std::cell::RefCell::new(model);
    run_schedule(
        data,
        schedule,
        |s, batch| {
            let lambda = config.lambda_at(s - 1, schedule.steps);
            adversarial_step_at(&mut cell.borrow_mut(), batch, config, lambda, s).map(|_| ())
        },
        || cell.borrow().evaluate(eval),
        log,
    )
}

/// Plain SGD on the label loss only, for a DenseNet without a domain head.
/// Domain columns of the log are NaN.
pub fn train_plain<F: Real>(
    model: &mut Model<F>,
    data: &Dataset<F>,
    epsilon: f64,
    schedule: &Schedule,
    eval: Option<&Dataset<F>>,
) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    train_plain_into(model, data, epsilon, schedule, eval, &mut log)?;
    Ok(log)
}

pub fn train_plain_into<F: Real>(
    model: &mut Model<F>,
    data: &Dataset<F>,
    epsilon: f64,
    schedule: &Schedule,
    eval: Option<&Dataset<F>>,
    log: &mut TrainingLog,
) -> Result<()> {
    let eval = eval.unwrap_or(data);
    let cell = std::cell::RefCell::new(model);
    let eps = F::of(epsilon);
    run_schedule(
        data,
        schedule,
        |s, batch| {
            let mut model = cell.borrow_mut();
            let mut g = Graph::new();
            let x = g.input(batch.input.clone());
            let logits = model.forward(&mut g, x, Mode::Train)?;
            let ly = g.softmax_cross_entropy(logits, &batch.labels)?;
            let loss = g.value(ly).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(divergence(s, loss, f64::NAN, "non-finite label loss"));
            }
            g.backward(ly)?;
            let grads = g.param_grads(&model.params);
            for (name, theta) in model.params.iter_mut() {
                let gr = grads.get(name).expect("gradient for every parameter");
                for (t, &d) in theta.data_mut().iter_mut().zip(gr.data()) {
                    *t -= eps * d;
                }
            }
            Ok(())
        },
        || {
            let model = cell.borrow();
            let (label_acc, loss_y) = classification_metrics(eval, &eval.labels, |x| model.predict(x))?;
            Ok(EvalMetrics {
                label_acc,
                domain_acc: f64::NAN,
                loss_y,
                loss_z: f64::NAN,
            })
        },
        log,
    )
}
