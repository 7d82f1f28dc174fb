//! Full pipeline: image -> patch features -> connector -> decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{ConnectorConfig, ConnectorWeights};
use crate::error::{Error, Result};
use crate::language_decoder::{masked_nll, DecodeResult, Decoder, DecoderConfig};
use crate::lora::{attach_lora, LoraHost};
use crate::nn::{Linear, Visit, VisitMut};
use crate::prompt_codec::{make_training_record, prompt_ids, InstructionRecord, NUM_KEYPOINTS};
use crate::tensor::Tensor;
use crate::vision_encoder::{EncoderConfig, GradScope, VisionEncoder};

/// Answer length in tokens: `" x=0.ddd,y=0.ddd"` plus eos.
pub const ANSWER_TOKENS: usize = 17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Projection suffixes (`attn.wq`) or full names (`decoder.block0.attn.wv`).
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 4.0,
            targets: vec!["attn.wq".into(), "attn.wv".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub connector: ConnectorConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let decoder = DecoderConfig::default();
        ModelConfig {
            connector: ConnectorConfig::mlp(encoder.d_vis, decoder.d_model),
            encoder,
            decoder,
        }
    }
}

/// Longest teacher-forced record over the whole catalog.
pub fn longest_record() -> usize {
    (0..NUM_KEYPOINTS)
        .map(|k| prompt_ids(k).map_or(0, |p| p.len()) + ANSWER_TOKENS)
        .max()
        .unwrap_or(0)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.connector.validate()?;
        self.decoder.validate()?;
        if self.connector.d_vis != self.encoder.d_vis {
            return Err(Error::Config(format!(
                "connector.d_vis {} differs from encoder.d_vis {}",
                self.connector.d_vis, self.encoder.d_vis
            )));
        }
        if self.connector.d_out != self.decoder.d_model {
            return Err(Error::Config(format!(
                "connector.d_out {} differs from decoder.d_model {}",
                self.connector.d_out, self.decoder.d_model
            )));
        }
        let vocab = crate::prompt_codec::Vocabulary::builtin().len();
        if self.decoder.vocab_size != vocab {
            return Err(Error::Config(format!(
                "decoder.vocab_size {} differs from the tokenizer's {vocab}",
                self.decoder.vocab_size
            )));
        }
        let need = self.encoder.num_patches() + longest_record();
        if self.decoder.max_seq_len < need {
            return Err(Error::Config(format!(
                "decoder.max_seq_len {} is below the {need} positions needed by {} visual tokens and the longest prompt",
                self.decoder.max_seq_len,
                self.encoder.num_patches()
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::synth_data::hex_digest(json.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointModel {
    pub config: ModelConfig,
    pub encoder: VisionEncoder,
    pub connector: ConnectorWeights,
    pub decoder: Decoder,
}

/// Whether an optimizer may touch the named parameter.
pub fn is_trainable(name: &str, scope: GradScope) -> bool {
    if name.starts_with("connector.") || name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        return true;
    }
    if name.contains(".block") {
        scope.blocks
    } else {
        scope.embeddings
    }
}

impl KeypointModel {
    /// Random initialization from `seed`; adapters are attached when `lora` is given.
    pub fn new(config: ModelConfig, lora: Option<&LoraConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = VisionEncoder::new(config.encoder.clone(), &mut rng)?;
        let connector = ConnectorWeights::new(&config.connector, &mut rng)?;
        let decoder = Decoder::new(config.decoder.clone(), &mut rng)?;
        let mut model = KeypointModel {
            config,
            encoder,
            connector,
            decoder,
        };
        if let Some(lora) = lora {
            let targets = model.expand_targets(&lora.targets)?;
            attach_lora(&mut model, &targets, lora.rank, lora.alpha, &mut rng)?;
        }
        Ok(model)
    }

    fn expand_targets(&mut self, patterns: &[String]) -> Result<Vec<String>> {
        let names: Vec<String> = self.lora_slots().into_iter().map(|(n, _)| n).collect();
        let mut out = Vec::new();
        for p in patterns {
            let hits: Vec<_> = names
                .iter()
                .filter(|n| *n == p || n.ends_with(&format!(".{p}")))
                .cloned()
                .collect();
            if hits.is_empty() {
                return Err(Error::Config(format!(
                    "unknown LoRA target {p:?}; valid targets: {}",
                    names.join(", ")
                )));
            }
            for h in hits {
                if !out.contains(&h) {
                    out.push(h);
                }
            }
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        KeypointModel {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            connector: self.connector.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut Visit<'a, '_>) {
        self.encoder.visit("encoder", f);
        self.connector.visit("connector", f);
        self.decoder.visit("decoder", f);
    }

    pub fn visit_mut(&mut self, f: &mut VisitMut<'_>) {
        self.encoder.visit_mut("encoder", f);
        self.connector.visit_mut("connector", f);
        self.decoder.visit_mut("decoder", f);
    }

    /// `(name, shape)` of every parameter in visiting order.
    pub fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.shape.clone())));
        out
    }

    pub fn has_adapters(&self) -> bool {
        let mut any = false;
        self.visit(&mut |n, _| any |= n.ends_with(".lora_a"));
        any
    }

    /// Projected visual tokens `[N, d_model]` for one image.
    pub fn visual_tokens(&self, image: &[f64]) -> Result<Tensor> {
        let (features, _) = self.encoder.forward_image(image)?;
        Ok(self.connector.forward_tokens(&features)?.0)
    }

    /// Teacher-forced next-token inputs, targets and mask of a record.
    fn shifted(record: &InstructionRecord) -> (&[u32], &[u32], &[bool]) {
        let n = record.token_ids.len();
        (
            &record.token_ids[..n - 1],
            &record.token_ids[1..],
            &record.answer_mask[1..],
        )
    }

    /// Summed answer-token NLL and its token count, without gradients.
    pub fn record_loss(&self, image: &[f64], record: &InstructionRecord) -> Result<(f64, usize)> {
        let visual = self.visual_tokens(image)?;
        let (inputs, targets, mask) = Self::shifted(record);
        let (logits, _) = self.decoder.forward(&visual, inputs)?;
        let (sum, count, _) = masked_nll(&logits, targets, mask)?;
        Ok((sum, count))
    }

    /// Adds the gradient of the summed answer-token NLL into `grads`.
    /// Frozen groups outside `scope` are skipped; adapters and the connector always
    /// receive gradients.
    pub fn accumulate_grad(
        &self,
        image: &[f64],
        record: &InstructionRecord,
        grads: &mut KeypointModel,
        scope: GradScope,
    ) -> Result<(f64, usize)> {
        self.accumulate_grad_shared(image, std::slice::from_ref(record), grads, scope)
    }

    /// Like [`Self::accumulate_grad`] for several records of one image, which
    /// share a single encoder and connector pass.
    pub fn accumulate_grad_shared(
        &self,
        image: &[f64],
        records: &[InstructionRecord],
        grads: &mut KeypointModel,
        scope: GradScope,
    ) -> Result<(f64, usize)> {
        let (features, enc_cache) = self.encoder.forward_image(image)?;
        let (visual, conn_cache) = self.connector.forward_tokens(&features)?;
        let mut d_visual = visual.zeros_like();
        let (mut sum, mut count) = (0.0, 0);
        for record in records {
            let (inputs, targets, mask) = Self::shifted(record);
            let (logits, dec_cache) = self.decoder.forward(&visual, inputs)?;
            let (s, c, d_logits) = masked_nll(&logits, targets, mask)?;
            let dv = self
                .decoder
                .backward(&dec_cache, &d_logits, &mut grads.decoder, scope);
            d_visual.add_assign(&dv);
            sum += s;
            count += c;
        }
        let d_features =
            self.connector
                .backward_tokens(&features, &conn_cache, &d_visual, &mut grads.connector);
        if scope.blocks || scope.embeddings || encoder_has_adapters(&self.encoder) {
            self.encoder
                .backward_image(&enc_cache, &d_features, &mut grads.encoder, scope);
        }
        Ok((sum, count))
    }

    pub fn decode(&self, visual: &Tensor, keypoint: usize, max_answer_len: usize) -> Result<DecodeResult> {
        self.decoder
            .greedy_decode(visual, &prompt_ids(keypoint)?, max_answer_len)
    }

    /// Greedy predictions for every keypoint of one image.
    pub fn predict_all(&self, image: &[f64]) -> Result<Vec<DecodeResult>> {
        let visual = self.visual_tokens(image)?;
        (0..NUM_KEYPOINTS)
            .map(|k| self.decode(&visual, k, ANSWER_TOKENS))
            .collect()
    }
}

fn encoder_has_adapters(encoder: &VisionEncoder) -> bool {
    encoder
        .blocks
        .iter()
        .any(|b| b.attn.wq.lora.is_some() || b.attn.wv.lora.is_some())
}

impl LoraHost for KeypointModel {
    fn lora_slots(&mut self) -> Vec<(String, &mut Linear)> {
        let mut slots: Vec<(String, &mut Linear)> = self
            .encoder
            .lora_slots()
            .into_iter()
            .map(|(n, l)| (format!("encoder.{n}"), l))
            .collect();
        slots.extend(
            self.decoder
                .lora_slots()
                .into_iter()
                .map(|(n, l)| (format!("decoder.{n}"), l)),
        );
        slots
    }
}

/// Training record for keypoint `k` of an annotated sample.
pub fn record_for(sample: &crate::synth_data::SkeletonSample, k: usize) -> Result<InstructionRecord> {
    let (x, y) = sample.keypoints[k];
    make_training_record(k, x, y)
}
