//! The model zoo: single-text baselines, separate and joint encoders, and
//! the hierarchically-refined centric models, all behind one forward/predict
//! interface.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_inference, co_attention, extract_overlap_labels, self_attention,
    AttentionInferenceParams, AttentionTrace, CoAttentionParams, SelfAttentionParams, TraceMatrix,
};
use crate::data::{Example, Vocabulary};
use crate::encoder::{encode_sequence, BiLstmEncoder};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Ratings run 1..=5, mapped internally to classes 0..=4.
pub const NUM_CLASSES: usize = 5;

/// Which top-layer co-attention representation feeds the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoAttnOutputMode {
    Review,
    Summary,
    Concat,
}

/// Every architecture in the zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    ReviewOnlyPool,
    ReviewOnlySelfAttn,
    SummaryOnlyPool,
    SummaryOnlySelfAttn,
    SeparatePool,
    SeparateSelfAttn,
    JointPool,
    JointSelfAttn,
    JointHard,
    JointCoAttn(CoAttnOutputMode),
    ReviewCentric,
    SummaryCentric,
}

impl ModelVariant {
    pub fn all() -> Vec<ModelVariant> {
        use ModelVariant::*;
        vec![
            ReviewOnlyPool,
            ReviewOnlySelfAttn,
            SummaryOnlyPool,
            SummaryOnlySelfAttn,
            SeparatePool,
            SeparateSelfAttn,
            JointPool,
            JointSelfAttn,
            JointHard,
            JointCoAttn(CoAttnOutputMode::Review),
            JointCoAttn(CoAttnOutputMode::Summary),
            JointCoAttn(CoAttnOutputMode::Concat),
            ReviewCentric,
            SummaryCentric,
        ]
    }

    pub fn tag(&self) -> &'static str {
        use ModelVariant::*;
        match self {
            ReviewOnlyPool => "review_only_pool",
            ReviewOnlySelfAttn => "review_only_selfattn",
            SummaryOnlyPool => "summary_only_pool",
            SummaryOnlySelfAttn => "summary_only_selfattn",
            SeparatePool => "separate_pool",
            SeparateSelfAttn => "separate_selfattn",
            JointPool => "joint_pool",
            JointSelfAttn => "joint_selfattn",
            JointHard => "joint_hard",
            JointCoAttn(CoAttnOutputMode::Review) => "joint_coattn_review",
            JointCoAttn(CoAttnOutputMode::Summary) => "joint_coattn_summary",
            JointCoAttn(CoAttnOutputMode::Concat) => "joint_coattn_concat",
            ReviewCentric => "review_centric",
            SummaryCentric => "summary_centric",
        }
    }

    /// True when a missing summary is acceptable (review-only baselines).
    fn allows_empty_summary(&self) -> bool {
        matches!(self, ModelVariant::ReviewOnlyPool | ModelVariant::ReviewOnlySelfAttn)
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelVariant> {
        ModelVariant::all()
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {:?}", s)))
    }
}

impl From<ModelVariant> for String {
    fn from(v: ModelVariant) -> String {
        v.tag().to_string()
    }
}

impl TryFrom<String> for ModelVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<ModelVariant> {
        s.parse()
    }
}

impl Serialize for ModelVariant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for ModelVariant {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Structural and forward-pass hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Word embedding width.
    pub embed_dim: usize,
    /// LSTM hidden size per direction; encoder outputs are twice this.
    pub hidden_size: usize,
    /// Attention-inference head count; must divide 2·hidden_size.
    pub heads: usize,
    /// Stacked layer count for the centric models.
    pub layers: usize,
    pub dropout: f64,
    pub classes: usize,
    pub vocab_size: usize,
    pub trainable_embeddings: bool,
    pub self_attention_hops: usize,
    pub self_attention_dim: usize,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            variant,
            embed_dim: 300,
            hidden_size: 256,
            heads: 1,
            layers: 2,
            dropout: 0.5,
            classes: NUM_CLASSES,
            vocab_size: 0,
            trainable_embeddings: true,
            self_attention_hops: 4,
            self_attention_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes != NUM_CLASSES {
            return Err(Error::Config(format!("class count must be {}, got {}", NUM_CLASSES, self.classes)));
        }
        if self.embed_dim == 0 || self.hidden_size == 0 {
            return Err(Error::Config("embedding and hidden sizes must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layer count must be at least 1".into()));
        }
        if self.heads == 0 || (2 * self.hidden_size) % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide the encoder output width {}",
                self.heads,
                2 * self.hidden_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.self_attention_hops == 0 || self.self_attention_dim == 0 {
            return Err(Error::Config("self-attention hops and width must be positive".into()));
        }
        Ok(())
    }

    /// Width of the pooled representation entering the classifier.
    pub fn pooled_width(&self) -> usize {
        let w = 2 * self.hidden_size;
        match self.variant {
            ModelVariant::JointCoAttn(CoAttnOutputMode::Concat) => 2 * w,
            _ => w,
        }
    }
}

pub struct OutputLayer {
    pub weight: Tensor, // classes × pooled width
    pub bias: Tensor,   // classes
}

/// One refinement layer of the centric models: a sequence encoder followed
/// by the attention inference sublayer.
pub struct CentricLayer {
    pub encoder: BiLstmEncoder,
    pub attention: AttentionInferenceParams,
}

pub enum Architecture {
    /// One BiLSTM over a single token stream (a lone text or the joined
    /// review+summary sequence), optionally followed by self-attention.
    Single {
        encoder: BiLstmEncoder,
        attention: Option<SelfAttentionParams>,
    },
    /// Two independent BiLSTMs whose outputs are concatenated row-wise.
    Separate {
        review: BiLstmEncoder,
        summary: BiLstmEncoder,
        attention: Option<(SelfAttentionParams, SelfAttentionParams)>,
    },
    /// Two BiLSTMs interacting through the shared co-attention matrix.
    CoAttention {
        review: BiLstmEncoder,
        summary: BiLstmEncoder,
        co: CoAttentionParams,
    },
    /// Stacked refinement layers over the primary text consulting the pooled
    /// secondary text.
    Centric {
        layers: Vec<CentricLayer>,
        secondary: BiLstmEncoder,
    },
}

/// Dropout context for a forward pass: training mode carries the RNG.
pub enum ForwardMode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

/// Auxiliary signals produced by the hard-attention variant for its training
/// objective.
pub struct HardAttentionSignal {
    /// Attention distribution over the joint review+summary tokens.
    pub weights: Tensor,
    /// Binary overlap labels over review positions, zero-extended across the
    /// summary positions.
    pub labels: Vec<f64>,
}

pub struct ForwardPass {
    /// Probability vector over the five classes.
    pub probabilities: Tensor,
    pub trace: AttentionTrace,
    pub hard_attention: Option<HardAttentionSignal>,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub embedding: Tensor,
    pub architecture: Architecture,
    pub output: OutputLayer,
    params: Vec<(String, Tensor)>,
}

/// Allocate and deterministically initialize every parameter of the variant
/// described by `config`.
pub fn build_model(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Model> {
    config.vocab_size = vocab.size();
    config.validate()?;
    if config.vocab_size < 2 {
        return Err(Error::Config("vocabulary must contain the reserved entries".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 2 * config.hidden_size;

    let embedding_values: Vec<f64> = (0..config.vocab_size * config.embed_dim)
        .map(|_| rng.random_range(-0.1..0.1))
        .collect();
    let embedding = Tensor::param(&[config.vocab_size, config.embed_dim], embedding_values)?;
    embedding.set_requires_grad(config.trainable_embeddings);

    let architecture = match config.variant {
        ModelVariant::ReviewOnlyPool | ModelVariant::SummaryOnlyPool | ModelVariant::JointPool => {
            Architecture::Single {
                encoder: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
                attention: None,
            }
        }
        ModelVariant::ReviewOnlySelfAttn | ModelVariant::SummaryOnlySelfAttn | ModelVariant::JointSelfAttn => {
            Architecture::Single {
                encoder: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
                attention: Some(SelfAttentionParams::init(
                    width,
                    config.self_attention_dim,
                    config.self_attention_hops,
                    &mut rng,
                )),
            }
        }
        // The supervised distribution comes from a single-hop self-attention
        // over the joint encoder states.
        ModelVariant::JointHard => Architecture::Single {
            encoder: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
            attention: Some(SelfAttentionParams::init(width, config.self_attention_dim, 1, &mut rng)),
        },
        ModelVariant::SeparatePool => Architecture::Separate {
            review: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
            summary: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
            attention: None,
        },
        ModelVariant::SeparateSelfAttn => Architecture::Separate {
            review: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
            summary: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
            attention: Some((
                SelfAttentionParams::init(width, config.self_attention_dim, config.self_attention_hops, &mut rng),
                SelfAttentionParams::init(width, config.self_attention_dim, config.self_attention_hops, &mut rng),
            )),
        },
        ModelVariant::JointCoAttn(_) => Architecture::CoAttention {
            review: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
            summary: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
            co: CoAttentionParams::init(width, &mut rng),
        },
        ModelVariant::ReviewCentric | ModelVariant::SummaryCentric => {
            let mut layers = Vec::with_capacity(config.layers);
            for layer in 0..config.layers {
                let d_in = if layer == 0 { config.embed_dim } else { width };
                layers.push(CentricLayer {
                    encoder: BiLstmEncoder::init(d_in, config.hidden_size, &mut rng),
                    attention: AttentionInferenceParams::init(width, config.heads, &mut rng)?,
                });
            }
            Architecture::Centric {
                layers,
                secondary: BiLstmEncoder::init(config.embed_dim, config.hidden_size, &mut rng),
            }
        }
    };

    let pooled = config.pooled_width();
    let bound = 1.0 / (pooled as f64).sqrt();
    let weight_values: Vec<f64> = (0..config.classes * pooled).map(|_| rng.random_range(-bound..bound)).collect();
    let output = OutputLayer {
        weight: Tensor::param(&[config.classes, pooled], weight_values)?,
        bias: Tensor::param(&[config.classes], vec![0.0; config.classes])?,
    };

    let mut params = vec![("embedding".to_string(), embedding.clone())];
    match &architecture {
        Architecture::Single { encoder, attention } => {
            encoder.collect("encoder", &mut params);
            if let Some(sa) = attention {
                sa.collect("self_attention", &mut params);
            }
        }
        Architecture::Separate { review, summary, attention } => {
            review.collect("review_encoder", &mut params);
            summary.collect("summary_encoder", &mut params);
            if let Some((sr, ss)) = attention {
                sr.collect("review_self_attention", &mut params);
                ss.collect("summary_self_attention", &mut params);
            }
        }
        Architecture::CoAttention { review, summary, co } => {
            review.collect("review_encoder", &mut params);
            summary.collect("summary_encoder", &mut params);
            co.collect("co_attention", &mut params);
        }
        Architecture::Centric { layers, secondary } => {
            for (i, layer) in layers.iter().enumerate() {
                layer.encoder.collect(&format!("layer{i}.encoder"), &mut params);
                layer.attention.collect(&format!("layer{i}.attention"), &mut params);
            }
            secondary.collect("secondary_encoder", &mut params);
        }
    }
    params.push(("output.weight".to_string(), output.weight.clone()));
    params.push(("output.bias".to_string(), output.bias.clone()));

    Ok(Model { config, vocab, embedding, architecture, output, params })
}

impl Model {
    /// Named parameter tensors in registry order (includes the embedding
    /// table whether or not it is trainable).
    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    /// Copy of all parameter values, registry order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|(_, t)| t.values()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::shape("restore", format!("{} tensors vs {}", snapshot.len(), self.params.len())));
        }
        for ((_, t), values) in self.params.iter().zip(snapshot) {
            t.set_values(values)?;
        }
        Ok(())
    }

    /// Overwrite the embedding table values (pretrained vectors).
    pub fn load_embedding_table(&self, table: &crate::data::EmbeddingTable) -> Result<()> {
        if table.dim != self.config.embed_dim {
            return Err(Error::Config(format!(
                "embedding table width {} does not match model width {}",
                table.dim, self.config.embed_dim
            )));
        }
        self.embedding.set_values(&table.values)
    }

    fn dropped(&self, tape: &Tape, x: &Tensor, mode: &mut ForwardMode) -> Result<Tensor> {
        match mode {
            ForwardMode::Train(rng) => tape.dropout(x, self.config.dropout, true, rng),
            ForwardMode::Eval => Ok(x.clone()),
        }
    }

    /// Embedding lookup + dropout, then BiLSTM + dropout.
    fn encode_ids(
        &self,
        tape: &Tape,
        encoder: &BiLstmEncoder,
        ids: &[usize],
        mode: &mut ForwardMode,
    ) -> Result<Tensor> {
        let embedded = tape.embedding_lookup(&self.embedding, ids)?;
        let embedded = self.dropped(tape, &embedded, mode)?;
        let hidden = encode_sequence(tape, encoder, &embedded)?;
        self.dropped(tape, &hidden, mode)
    }

    fn classify(&self, tape: &Tape, pooled: &Tensor) -> Result<Tensor> {
        let column = tape.reshape(pooled, &[pooled.numel(), 1])?;
        let logits = tape.reshape(&tape.matmul(&self.output.weight, &column)?, &[self.config.classes])?;
        let logits = tape.add(&logits, &self.output.bias)?;
        tape.softmax(&logits, 0)
    }

    fn pool_with_optional_attention(
        &self,
        tape: &Tape,
        h: &Tensor,
        attention: &Option<SelfAttentionParams>,
        label: &str,
        trace: &mut AttentionTrace,
    ) -> Result<Tensor> {
        match attention {
            None => tape.average_pool(h),
            Some(sa) => {
                let (context, weights) = self_attention(tape, sa, h)?;
                trace.push(label, vec![TraceMatrix::from_tensor(&weights)]);
                tape.average_pool(&context)
            }
        }
    }

    /// Run the variant's forward computation on one example.
    pub fn forward(&self, example: &Example, tape: &Tape, mode: &mut ForwardMode) -> Result<ForwardPass> {
        if example.review.is_empty() {
            return Err(Error::EmptySequence("review"));
        }
        if example.summary.is_empty() && !self.config.variant.allows_empty_summary() {
            return Err(Error::EmptySequence("summary"));
        }
        let review_ids = self.vocab.encode(&example.review);
        let summary_ids = self.vocab.encode(&example.summary);
        let mut trace = AttentionTrace::default();
        let mut hard_attention = None;

        let pooled = match (&self.architecture, self.config.variant) {
            (Architecture::Single { encoder, attention }, variant) => {
                let ids: Vec<usize> = match variant {
                    ModelVariant::ReviewOnlyPool | ModelVariant::ReviewOnlySelfAttn => review_ids,
                    ModelVariant::SummaryOnlyPool | ModelVariant::SummaryOnlySelfAttn => summary_ids,
                    _ => review_ids.iter().chain(&summary_ids).copied().collect(),
                };
                let h = self.encode_ids(tape, encoder, &ids, mode)?;
                if variant == ModelVariant::JointHard {
                    let sa = attention.as_ref().expect("hard-attention variant has an attention module");
                    let (context, weights) = self_attention(tape, sa, &h)?;
                    trace.push("joint_attention", vec![TraceMatrix::from_tensor(&weights)]);
                    let mut labels = extract_overlap_labels(&example.review, &example.summary);
                    labels.resize(ids.len(), 0.0);
                    hard_attention = Some(HardAttentionSignal {
                        weights: tape.reshape(&weights, &[ids.len()])?,
                        labels,
                    });
                    tape.average_pool(&context)?
                } else {
                    let label = match variant {
                        ModelVariant::ReviewOnlySelfAttn => "review_attention",
                        ModelVariant::SummaryOnlySelfAttn => "summary_attention",
                        _ => "joint_attention",
                    };
                    self.pool_with_optional_attention(tape, &h, attention, label, &mut trace)?
                }
            }
            (Architecture::Separate { review, summary, attention }, _) => {
                let hw = self.encode_ids(tape, review, &review_ids, mode)?;
                let hs = self.encode_ids(tape, summary, &summary_ids, mode)?;
                match attention {
                    None => tape.average_pool(&tape.concat(&hw, &hs, 0)?)?,
                    Some((sa_review, sa_summary)) => {
                        let (cw, ww) = self_attention(tape, sa_review, &hw)?;
                        let (cs, ws) = self_attention(tape, sa_summary, &hs)?;
                        trace.push("review_attention", vec![TraceMatrix::from_tensor(&ww)]);
                        trace.push("summary_attention", vec![TraceMatrix::from_tensor(&ws)]);
                        tape.average_pool(&tape.concat(&cw, &cs, 0)?)?
                    }
                }
            }
            (Architecture::CoAttention { review, summary, co }, variant) => {
                let hw = self.encode_ids(tape, review, &review_ids, mode)?;
                let hs = self.encode_ids(tape, summary, &summary_ids, mode)?;
                let out = co_attention(tape, co, &hw, &hs)?;
                trace.push("review_to_summary", vec![TraceMatrix::from_tensor(&out.review_weights)]);
                trace.push("summary_to_review", vec![TraceMatrix::from_tensor(&out.summary_weights)]);
                let mode_tag = match variant {
                    ModelVariant::JointCoAttn(m) => m,
                    _ => unreachable!("co-attention architecture implies a co-attention variant"),
                };
                match mode_tag {
                    CoAttnOutputMode::Review => tape.average_pool(&out.review)?,
                    CoAttnOutputMode::Summary => tape.average_pool(&out.summary)?,
                    CoAttnOutputMode::Concat => {
                        let pw = tape.average_pool(&out.review)?;
                        let ps = tape.average_pool(&out.summary)?;
                        tape.concat(&pw, &ps, 0)?
                    }
                }
            }
            (Architecture::Centric { layers, secondary }, variant) => {
                let (primary_ids, secondary_ids) = if variant == ModelVariant::SummaryCentric {
                    (&summary_ids, &review_ids)
                } else {
                    (&review_ids, &summary_ids)
                };
                let secondary_h = self.encode_ids(tape, secondary, secondary_ids, mode)?;
                let secondary_pooled = tape.average_pool(&secondary_h)?;
                let mut x = {
                    let embedded = tape.embedding_lookup(&self.embedding, primary_ids)?;
                    self.dropped(tape, &embedded, mode)?
                };
                for (i, layer) in layers.iter().enumerate() {
                    let h = encode_sequence(tape, &layer.encoder, &x)?;
                    let h = self.dropped(tape, &h, mode)?;
                    let (refined, alphas) = attention_inference(tape, &layer.attention, &h, &secondary_pooled)?;
                    trace.push(
                        format!("layer{}", i + 1),
                        alphas.into_iter().map(TraceMatrix::from_vector).collect(),
                    );
                    x = refined;
                }
                tape.average_pool(&x)?
            }
        };

        let probabilities = self.classify(tape, &pooled)?;
        Ok(ForwardPass { probabilities, trace, hard_attention })
    }

    /// Evaluation-mode rating prediction: 1 + argmax, ties to the lowest
    /// class index.
    pub fn predict(&self, example: &Example) -> Result<u8> {
        let tape = Tape::inference();
        let pass = self.forward(example, &tape, &mut ForwardMode::Eval)?;
        Ok(argmax_rating(&pass.probabilities.values()))
    }

    /// The token sequence that this variant's recorded attention ranges
    /// over, when one exists.
    pub fn trace_tokens(&self, example: &Example) -> Result<Vec<String>> {
        use ModelVariant::*;
        match self.config.variant {
            ReviewOnlySelfAttn | ReviewCentric => Ok(example.review.clone()),
            SummaryOnlySelfAttn | SummaryCentric => Ok(example.summary.clone()),
            JointSelfAttn | JointHard => {
                Ok(example.review.iter().chain(&example.summary).cloned().collect())
            }
            other => Err(Error::Data(format!(
                "variant {} records no token-aligned attention to visualize",
                other
            ))),
        }
    }
}

/// 1-based rating from a probability vector; ties break to the lowest index.
pub fn argmax_rating(probabilities: &[f64]) -> u8 {
    let mut best = 0;
    for (i, p) in probabilities.iter().enumerate() {
        if *p > probabilities[best] {
            best = i;
        }
    }
    (best + 1) as u8
}
