//! The fusion architecture: speech encoder, text encoder, cross-attention,
//! classification heads, and the speech-only baseline.

mod attention;
mod checkpoint;
mod classifier;
mod encoder;
mod layers;
#[cfg(test)]
mod tests;

pub use attention::{cross_attention, FusionOutput};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use classifier::{classify, decide_detection, decide_severity, forward, ForwardOutput};
pub use encoder::{speech_encode, text_encode, EncodedSpeech, EncodedText};
pub use layers::{bigru_encode, dense, gru_cell, BiGruIds, DenseIds, GruParamIds};

use std::collections::BTreeMap;

use crate::rng::SeedStream;
use crate::tensor::{BatchStats, Parameter, Tape, Tensor, TensorId};
use crate::text::TABLE_SIZE;
use crate::{CoreError, Result};

/// Classification task. Detection uses a single-logit sigmoid head,
/// severity a 4-way softmax head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Detection,
    Severity,
}

impl Task {
    pub fn n_classes(&self) -> usize {
        match self {
            Task::Detection => 2,
            Task::Severity => 4,
        }
    }

    /// Output units of the final dense layer.
    pub fn head_units(&self) -> usize {
        match self {
            Task::Detection => 1,
            Task::Severity => 4,
        }
    }
}

/// Which inputs the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Speech,
    SpeechText,
}

/// One convolution layer of the speech encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub modality: Modality,
    pub n_mels: usize,
    pub conv_layers: Vec<ConvLayer>,
    pub dropout_rate: f64,
    pub gru_hidden: usize,
    pub embed_dim: usize,
    /// Shared fusion dimension d of queries, keys, and values.
    pub fusion_dim: usize,
    pub head_dims: [usize; 2],
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// The architecture with every published constant pinned: two CNN
    /// layers with dropout 0.2 and batchnorm, Bi-GRUs of 64, dense 128/32,
    /// sigmoid or softmax head.
    pub fn paper(task: Task, modality: Modality) -> Self {
        Self {
            task,
            modality,
            n_mels: 80,
            conv_layers: vec![
                ConvLayer {
                    out_channels: 16,
                    kernel: (3, 3),
                    stride: (2, 2),
                },
                ConvLayer {
                    out_channels: 32,
                    kernel: (3, 3),
                    stride: (2, 2),
                },
            ],
            dropout_rate: 0.2,
            gru_hidden: 64,
            embed_dim: 64,
            fusion_dim: 128,
            head_dims: [128, 32],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Downsized architecture for gradient checks: d=8, hidden 8, two
    /// 2-channel conv layers.
    pub fn reduced(task: Task, modality: Modality) -> Self {
        Self {
            task,
            modality,
            n_mels: 10,
            conv_layers: vec![
                ConvLayer {
                    out_channels: 2,
                    kernel: (3, 3),
                    stride: (2, 2),
                },
                ConvLayer {
                    out_channels: 3,
                    kernel: (3, 3),
                    stride: (2, 2),
                },
            ],
            dropout_rate: 0.0,
            gru_hidden: 8,
            embed_dim: 8,
            fusion_dim: 8,
            head_dims: [16, 8],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(CoreError::InvalidArgument("no conv layers".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.gru_hidden == 0
            || self.embed_dim == 0
            || self.fusion_dim == 0
            || self.n_mels == 0
            || self.head_dims.contains(&0)
        {
            return Err(CoreError::InvalidArgument("zero-sized layer".into()));
        }
        Ok(())
    }

    /// True when the published training-relevant constants are in place.
    pub fn is_paper_faithful(&self) -> bool {
        self.gru_hidden == 64
            && self.head_dims == [128, 32]
            && self.dropout_rate == 0.2
            && self.embed_dim == 64
    }

    /// Time length produced by the conv stack for `n_frames` input frames.
    pub fn downsampled_len(&self, n_frames: usize) -> usize {
        self.conv_layers
            .iter()
            .fold(n_frames, |len, layer| len.div_ceil(layer.stride.0))
    }

    /// Channel count after the last conv layer (the per-frame feature
    /// dimension handed to the first Bi-GRU after frequency pooling).
    pub fn conv_out_channels(&self) -> usize {
        self.conv_layers.last().unwrap().out_channels
    }

    /// Closed-form trainable-parameter count. Construction asserts that the
    /// built model matches this formula, guarding silent architecture drift.
    pub fn expected_param_count(&self) -> usize {
        let h = self.gru_hidden;
        let gru = |d_in: usize| 3 * (d_in * h) + 3 * (h * h) + 3 * h;
        let dense = |d_in: usize, d_out: usize| d_in * d_out + d_out;

        let mut count = 0;
        // speech conv stack
        let mut ch = 1;
        for layer in &self.conv_layers {
            count += layer.out_channels * ch * layer.kernel.0 * layer.kernel.1; // kernel
            count += layer.out_channels; // bias
            count += 2 * layer.out_channels; // batchnorm gamma, beta
            ch = layer.out_channels;
        }
        // two stacked speech Bi-GRUs
        count += 2 * gru(ch); // layer 1, both directions
        count += 2 * gru(2 * h); // layer 2
        count += match self.modality {
            Modality::Speech => {
                // final Bi-GRU state -> dense head stack
                dense(2 * h, self.head_dims[0])
            }
            Modality::SpeechText => {
                let d = self.fusion_dim;
                let mut c = dense(2 * h, d); // speech projection to d
                c += TABLE_SIZE * self.embed_dim; // character embedding
                c += 2 * gru(self.embed_dim); // text Bi-GRU
                c += dense(2 * h, d); // text projection to d
                c += 3 * d * d; // W_Q, W_K, W_V (no bias)
                c += gru(d); // classifier GRU over context rows
                c += dense(h, self.head_dims[0]);
                c
            }
        };
        count += dense(self.head_dims[0], self.head_dims[1]);
        count += dense(self.head_dims[1], self.task.head_units());
        count
    }
}

/// A constructed model: named parameters plus batchnorm running-statistic
/// buffers. Immutable during evaluation; training is single-writer.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Parameter>,
    buffers: BTreeMap<String, Tensor>,
}

/// Parameter handles registered on one tape via [`Model::bind`].
pub struct Bound {
    ids: BTreeMap<String, TensorId>,
}

impl Bound {
    /// Assemble a binding from explicit (name, id) pairs; used by gradient
    /// checks that register parameters as plain check inputs.
    pub fn from_ids<I: IntoIterator<Item = (String, TensorId)>>(pairs: I) -> Self {
        Bound {
            ids: pairs.into_iter().collect(),
        }
    }

    /// Handle of a bound parameter. Names are construction-time constants,
    /// so a miss is a programming error.
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn dense(&self, prefix: &str) -> DenseIds {
        DenseIds {
            weight: self.id(&format!("{prefix}.weight")),
            bias: self.id(&format!("{prefix}.bias")),
        }
    }

    pub fn gru(&self, prefix: &str) -> GruParamIds {
        GruParamIds {
            w: self.id(&format!("{prefix}.w")),
            b: self.id(&format!("{prefix}.b")),
            u_zr: self.id(&format!("{prefix}.u_zr")),
            u_h: self.id(&format!("{prefix}.u_h")),
        }
    }

    pub fn bigru(&self, prefix: &str) -> BiGruIds {
        BiGruIds {
            fwd: self.gru(&format!("{prefix}.fwd")),
            bwd: self.gru(&format!("{prefix}.bwd")),
        }
    }
}

impl Model {
    /// Build a model with seeded Glorot-uniform weights, zero biases, and
    /// unit-variance batchnorm buffers.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::new(seed);
        let mut builder = Builder {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: &mut rng,
        };
        builder.build(&config)?;
        let model = Self {
            config,
            params: builder.params,
            buffers: builder.buffers,
        };
        let expected = model.config.expected_param_count();
        let actual = model.param_count();
        if expected != actual {
            return Err(CoreError::InvalidArgument(format!(
                "architecture drift: expected {expected} parameters, built {actual}"
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total trainable parameter elements.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        &self.buffers[name]
    }

    /// Register every parameter on a tape. One bind per tape; forwards for
    /// all samples of a batch share the handles so gradients accumulate.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.params {
            ids.insert(name.clone(), tape.parameter(p)?);
        }
        Ok(Bound { ids })
    }

    /// Overwrite parameter values (an optimizer step). Shapes must match.
    pub fn apply_update(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown parameter {name}")))?;
        if data.len() != p.tensor.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "apply_update",
                details: format!("{name}: {} vs {}", data.len(), p.tensor.numel()),
            });
        }
        p.tensor.replace_data(data);
        Ok(())
    }

    /// Overwrite a batchnorm buffer (checkpoint restore).
    pub fn set_buffer(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let buf = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown buffer {name}")))?;
        if data.len() != buf.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "set_buffer",
                details: format!("{name}: {} vs {}", data.len(), buf.numel()),
            });
        }
        buf.replace_data(data);
        Ok(())
    }

    /// Fold batch statistics into the running buffers with the configured
    /// exponential moving average.
    pub fn update_running_stats(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        // average duplicate entries (one per sample in the batch) first
        let mut grouped: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for (name, stats) in updates {
            let entry = grouped.entry(name.as_str()).or_insert_with(|| {
                (vec![0.0; stats.mean.len()], vec![0.0; stats.var.len()], 0)
            });
            for (a, b) in entry.0.iter_mut().zip(&stats.mean) {
                *a += b;
            }
            for (a, b) in entry.1.iter_mut().zip(&stats.var) {
                *a += b;
            }
            entry.2 += 1;
        }
        let momentum = self.config.bn_momentum;
        for (name, (mean_sum, var_sum, n)) in grouped {
            let mean_name = format!("{name}.running_mean");
            let var_name = format!("{name}.running_var");
            for (buf_name, sum) in [(mean_name, mean_sum), (var_name, var_sum)] {
                let buf = self.buffers.get_mut(&buf_name).ok_or_else(|| {
                    CoreError::InvalidArgument(format!("unknown buffer {buf_name}"))
                })?;
                let data: Vec<f64> = buf
                    .data()
                    .iter()
                    .zip(&sum)
                    .map(|(&old, &s)| (1.0 - momentum) * old + momentum * (s / n as f64))
                    .collect();
                buf.replace_data(data);
            }
        }
        Ok(())
    }
}

struct Builder<'a> {
    params: BTreeMap<String, Parameter>,
    buffers: BTreeMap<String, Tensor>,
    rng: &'a mut SeedStream,
}

impl Builder<'_> {
    fn glorot(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.uniform(-limit, limit)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn add(&mut self, name: &str, tensor: Tensor) {
        self.params
            .insert(name.to_string(), Parameter::new(name, tensor));
    }

    fn dense(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        let w = self.glorot(vec![d_in, d_out], d_in, d_out);
        self.add(&format!("{prefix}.weight"), w);
        self.add(&format!("{prefix}.bias"), Tensor::zeros(vec![d_out]));
    }

    /// Packed GRU parameters; gate order is update, reset, candidate.
    fn gru(&mut self, prefix: &str, d_in: usize, h: usize) {
        let w = self.glorot(vec![d_in, 3 * h], d_in, h);
        self.add(&format!("{prefix}.w"), w);
        self.add(&format!("{prefix}.b"), Tensor::zeros(vec![3 * h]));
        let u_zr = self.glorot(vec![h, 2 * h], h, h);
        self.add(&format!("{prefix}.u_zr"), u_zr);
        let u_h = self.glorot(vec![h, h], h, h);
        self.add(&format!("{prefix}.u_h"), u_h);
    }

    fn bigru(&mut self, prefix: &str, d_in: usize, h: usize) {
        self.gru(&format!("{prefix}.fwd"), d_in, h);
        self.gru(&format!("{prefix}.bwd"), d_in, h);
    }

    fn build(&mut self, config: &ModelConfig) -> Result<()> {
        let h = config.gru_hidden;

        let mut ch = 1;
        for (i, layer) in config.conv_layers.iter().enumerate() {
            let n = i + 1;
            let (kh, kw) = layer.kernel;
            let kernel = self.glorot(
                vec![layer.out_channels, ch, kh, kw],
                ch * kh * kw,
                layer.out_channels * kh * kw,
            );
            self.add(&format!("speech_enc.conv{n}.kernel"), kernel);
            self.add(
                &format!("speech_enc.conv{n}.bias"),
                Tensor::zeros(vec![layer.out_channels]),
            );
            self.add(
                &format!("speech_enc.bn{n}.gamma"),
                Tensor::full(vec![layer.out_channels], 1.0),
            );
            self.add(
                &format!("speech_enc.bn{n}.beta"),
                Tensor::zeros(vec![layer.out_channels]),
            );
            self.buffers.insert(
                format!("speech_enc.bn{n}.running_mean"),
                Tensor::zeros(vec![layer.out_channels]),
            );
            self.buffers.insert(
                format!("speech_enc.bn{n}.running_var"),
                Tensor::full(vec![layer.out_channels], 1.0),
            );
            ch = layer.out_channels;
        }

        self.bigru("speech_enc.bigru1", ch, h);
        self.bigru("speech_enc.bigru2", 2 * h, h);

        match config.modality {
            Modality::Speech => {
                self.dense("clf.dense1", 2 * h, config.head_dims[0]);
            }
            Modality::SpeechText => {
                let d = config.fusion_dim;
                self.dense("speech_enc.proj", 2 * h, d);
                let table = self.glorot(
                    vec![TABLE_SIZE, config.embed_dim],
                    TABLE_SIZE,
                    config.embed_dim,
                );
                self.add("text_enc.embedding", table);
                self.bigru("text_enc.bigru", config.embed_dim, h);
                self.dense("text_enc.proj", 2 * h, d);
                for name in ["attn.w_q", "attn.w_k", "attn.w_v"] {
                    let w = self.glorot(vec![d, d], d, d);
                    self.add(name, w);
                }
                self.gru("clf.gru", d, h);
                self.dense("clf.dense1", h, config.head_dims[0]);
            }
        }
        self.dense("clf.dense2", config.head_dims[0], config.head_dims[1]);
        self.dense("clf.head", config.head_dims[1], config.task.head_units());
        Ok(())
    }
}
