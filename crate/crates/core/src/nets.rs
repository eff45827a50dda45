//! Feature extractor, classifier and the multi-task domain discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// One fully connected layer: `act(x W + b)` with `W` of shape `[in x out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        let h = tape.add_bias(h, b)?;
        match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::None => Ok(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input_dim: usize,
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// An MLP with no layers; forwards its input unchanged.
    pub fn empty(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: Vec::new(),
        }
    }

    /// Builds an MLP from explicit weight/bias tensors, registering them in
    /// `store`.
    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        layers: Vec<(Tensor, Tensor, Activation)>,
    ) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(TensorError::Usage("from_tensors needs at least one layer".into()));
        };
        let input_dim = first.0.rows();
        let mut out = Self::empty(input_dim);
        let mut prev = input_dim;
        for (i, (w, b, activation)) in layers.into_iter().enumerate() {
            if w.shape().len() != 2 || w.rows() != prev || b.len() != w.cols() {
                return Err(TensorError::Dimension {
                    op: "mlp",
                    detail: format!("layer {i}: weight {:?}, bias {:?}, expected input {prev}", w.shape(), b.shape()),
                });
            }
            let out_dim = w.cols();
            let weight = store.insert(format!("{name}.{i}.weight"), w);
            let bias = store.insert(format!("{name}.{i}.bias"), b);
            out.layers.push(Dense {
                weight,
                bias,
                activation,
                in_dim: prev,
                out_dim,
            });
            prev = out_dim;
        }
        Ok(out)
    }

    /// Random MLP through `widths` with He-uniform weights and zero biases.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        widths: &[usize],
        hidden_act: Activation,
        last_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut out = Self::empty(input_dim);
        let mut prev = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            let activation = if i + 1 == widths.len() { last_act } else { hidden_act };
            let weight = store.insert(format!("{name}.{i}.weight"), he_uniform(prev, w, rng));
            let bias = store.insert(format!("{name}.{i}.bias"), Tensor::zeros(vec![w]));
            out.layers.push(Dense {
                weight,
                bias,
                activation,
                in_dim: prev,
                out_dim: w,
            });
            prev = w;
        }
        out
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let width = tape.shape(x).get(1).copied().unwrap_or(0);
        if tape.shape(x).len() != 2 || width != self.input_dim {
            return Err(TensorError::Dimension {
                op: "mlp",
                detail: format!("input {:?}, network expects width {}", tape.shape(x), self.input_dim),
            });
        }
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, store, h))
    }

    pub fn parameters(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Uniform on `[-a, a]` with `a = sqrt(6 / fan_in)`, i.e. variance `2 / fan_in`.
pub fn he_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::matrix(fan_in, fan_out, values).expect("dimensions are positive")
}

/// Domain discriminator with one logistic head per source class. With a
/// shared trunk all heads sit on the same bottom layers; otherwise each head
/// owns a private copy of the trunk architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskDiscriminator {
    pub trunks: Vec<Mlp>,
    pub heads: Vec<Dense>,
    pub shared_trunk: bool,
}

impl MultiTaskDiscriminator {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        trunk_widths: &[usize],
        num_heads: usize,
        shared_trunk: bool,
        rng: &mut R,
    ) -> Self {
        let n_trunks = if shared_trunk { 1 } else { num_heads };
        let trunks: Vec<Mlp> = (0..n_trunks)
            .map(|t| {
                Mlp::init(
                    store,
                    &format!("disc.trunk{t}"),
                    input_dim,
                    trunk_widths,
                    Activation::Relu,
                    Activation::Relu,
                    rng,
                )
            })
            .collect();
        let head_in = trunks[0].output_dim();
        let heads = (0..num_heads)
            .map(|k| {
                Mlp::init(
                    store,
                    &format!("disc.head{k}"),
                    head_in,
                    &[1],
                    Activation::None,
                    Activation::None,
                    rng,
                )
                .layers
                .remove(0)
            })
            .collect();
        Self {
            trunks,
            heads,
            shared_trunk,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.trunks[0].input_dim
    }

    /// Per-head logits `[m x heads]` for features `f`, after passing them
    /// through a gradient-reversal node with scale `lambda`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, f: Var, lambda: f64) -> Result<Var> {
        let rev = tape.grad_reverse(f, lambda)?;
        let mut cols = Vec::with_capacity(self.heads.len());
        if self.shared_trunk {
            let h = self.trunks[0].forward(tape, store, rev)?;
            for head in &self.heads {
                cols.push(head.forward(tape, store, h)?);
            }
        } else {
            for (trunk, head) in self.trunks.iter().zip(&self.heads) {
                let h = trunk.forward(tape, store, rev)?;
                cols.push(head.forward(tape, store, h)?);
            }
        }
        tape.concat_cols(&cols)
    }

    pub fn parameters(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.trunks.iter().flat_map(Mlp::parameters).collect();
        out.extend(self.heads.iter().flat_map(|h| [h.weight, h.bias]));
        out
    }
}

/// Layer widths for the three networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub feature_widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub discriminator_trunk: Vec<usize>,
}

impl ArchSpec {
    pub fn toy(num_classes: usize) -> Self {
        Self {
            input_dim: 2,
            feature_widths: vec![16, 16],
            num_classes,
            discriminator_trunk: vec![16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(TensorError::Usage("input_dim and num_classes must be positive".into()));
        }
        if self.feature_widths.is_empty() {
            return Err(TensorError::Usage("feature extractor needs at least one layer".into()));
        }
        if self
            .feature_widths
            .iter()
            .chain(&self.discriminator_trunk)
            .any(|&w| w == 0)
        {
            return Err(TensorError::Usage("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.feature_widths.last().unwrap_or(&self.input_dim)
    }
}

/// All trainable state: feature extractor F, classifier G and discriminator D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub arch: ArchSpec,
    pub params: ParamStore,
    pub feature: Mlp,
    pub classifier: Mlp,
    pub discriminator: MultiTaskDiscriminator,
}

impl ModelBundle {
    /// Initializes all three networks. `num_heads` is `num_classes` for the
    /// selective adversary and 1 for a single domain discriminator.
    pub fn init<R: Rng>(arch: &ArchSpec, num_heads: usize, shared_trunk: bool, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if num_heads == 0 {
            return Err(TensorError::Usage("discriminator needs at least one head".into()));
        }
        let mut params = ParamStore::new();
        let feature = Mlp::init(
            &mut params,
            "feature",
            arch.input_dim,
            &arch.feature_widths,
            Activation::Relu,
            Activation::Relu,
            rng,
        );
        let classifier = Mlp::init(
            &mut params,
            "classifier",
            feature.output_dim(),
            &[arch.num_classes],
            Activation::None,
            Activation::None,
            rng,
        );
        let discriminator = MultiTaskDiscriminator::init(
            &mut params,
            feature.output_dim(),
            &arch.discriminator_trunk,
            num_heads,
            shared_trunk,
            rng,
        );
        Ok(Self {
            arch: arch.clone(),
            params,
            feature,
            classifier,
            discriminator,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn f_forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.feature.forward(tape, &self.params, x)
    }

    /// Classifier probabilities: softmax over the classifier logits.
    pub fn g_forward(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let logits = self.classifier.forward(tape, &self.params, f)?;
        tape.softmax_rows(logits)
    }

    /// Per-head discriminator logits behind a gradient reversal of `lambda`.
    pub fn d_logits(&self, tape: &mut Tape, f: Var, lambda: f64) -> Result<Var> {
        self.discriminator.logits(tape, &self.params, f, lambda)
    }

    /// Per-head probabilities that each sample comes from the source domain.
    pub fn d_forward(&self, tape: &mut Tape, f: Var, lambda: f64) -> Result<Var> {
        let z = self.d_logits(tape, f, lambda)?;
        tape.sigmoid(z)
    }

    /// Features and class probabilities for a batch, without keeping the tape.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = self.f_forward(&mut tape, xv)?;
        let p = self.g_forward(&mut tape, f)?;
        Ok((tape.to_tensor(f), tape.to_tensor(p)))
    }

    pub fn feature_params(&self) -> Vec<ParamId> {
        self.feature.parameters()
    }

    pub fn classifier_params(&self) -> Vec<ParamId> {
        self.classifier.parameters()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.discriminator.parameters()
    }
}
