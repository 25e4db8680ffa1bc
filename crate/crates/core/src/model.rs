//! Model assembly: toy audio/visual encoders, the fusion module, and an
//! autoregressive transformer decoder, in four variants: the full
//! audio-visual model, audio-only, audio-only with the sliding-window
//! Q-Former inserted, and the comparative fusion ablations (selected through
//! the fusion config).
//!
//! Encoders are small frozen self-attention stacks standing in for large
//! pretrained ones; the fusion interface (feature sequence widths) is what a
//! real encoder pair would emit, so they are swappable.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SampleRecord, BOS, EOS};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionDiagnostics, FusionPath, WindowConfig, WindowQFormer};
use crate::nn::{
    add_positions, AdaptedLinear, AttnMask, Embedding, LayerNorm, Linear, MultiHeadAttention,
    ParamStore, Session,
};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::util::rng_for;

/// Which encoder/decoder wiring a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Both encoders plus the configured fusion path.
    #[default]
    AudioVisual,
    /// Decoder attends directly to the audio encoder output.
    AudioOnly,
    /// Audio encoder, then the sliding-window Q-Former, no visual path.
    AudioOnlySwqf,
}

impl ModelVariant {
    pub fn label(&self) -> &'static str {
        match self {
            ModelVariant::AudioVisual => "audio-visual",
            ModelVariant::AudioOnly => "audio-only",
            ModelVariant::AudioOnlySwqf => "audio-only-swqf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Vocabulary size, including the reserved BOS/EOS/PAD ids {0, 1, 2}.
    pub vocab: usize,
    /// Model width `d` (decoder and fusion operate at this width).
    pub dim: usize,
    /// Raw audio feature width accepted by the audio encoder.
    pub audio_dim: usize,
    /// Visual encoder width `d_v`; the fusion projects it into `d`.
    pub visual_dim: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub variant: ModelVariant,
    pub fusion: FusionConfig,
    /// Parameter-name prefixes excluded from optimization.
    pub frozen_prefixes: Vec<String>,
    /// When set, decoder projections get LoRA adapters of this rank.
    pub decoder_lora_rank: Option<usize>,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            vocab: 64,
            dim: 64,
            audio_dim: 32,
            visual_dim: 48,
            encoder_blocks: 2,
            encoder_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            variant: ModelVariant::AudioVisual,
            fusion: FusionConfig::default(),
            frozen_prefixes: vec!["audio_enc".into(), "visual_enc".into()],
            decoder_lora_rank: None,
            max_decode_len: 24,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= crate::data::FIRST_TOKEN {
            return Err(Error::Config(format!(
                "vocab {} leaves no room beyond the reserved specials",
                self.vocab
            )));
        }
        for (what, dim, heads) in [
            ("decoder", self.dim, self.decoder_heads),
            ("audio encoder", self.dim, self.encoder_heads),
            ("visual encoder", self.visual_dim, self.encoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{what}: width {dim} not divisible by {heads} heads"
                )));
            }
        }
        if self.audio_dim < 1 || self.visual_dim < 1 || self.dim < 1 {
            return Err(Error::Config("widths must be >= 1".into()));
        }
        if self.decoder_layers < 1 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.max_decode_len < 1 {
            return Err(Error::Config("max_decode_len must be >= 1".into()));
        }
        self.fusion.validate()
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<EncoderBlock> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), width, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), width, width),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), width, width),
        })
    }

    fn forward(&self, sess: &mut Session, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let len = sess.tape.shape(x)[0];
        let mask = valid.map(|v| AttnMask::from_key_validity(len, v));
        let a = self.ln1.forward(sess, x)?;
        let sa = self.attn.forward(sess, a, a, mask.as_ref())?;
        let x = sess.tape.add(x, sa)?;
        let b = self.ln2.forward(sess, x)?;
        let h = self.ff1.forward(sess, b)?;
        let h = sess.tape.tanh(h)?;
        let h = self.ff2.forward(sess, h)?;
        sess.tape.add(x, h)
    }
}

/// Per-frame projection + sinusoidal positions + self-attention blocks.
#[derive(Clone, Debug)]
struct ToyEncoder {
    input_proj: Linear,
    blocks: Vec<EncoderBlock>,
}

impl ToyEncoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        width: usize,
        blocks: usize,
        heads: usize,
    ) -> Result<ToyEncoder> {
        let input_proj = Linear::new(store, rng, &format!("{name}.input_proj"), in_dim, width);
        let blocks = (0..blocks)
            .map(|i| EncoderBlock::new(store, rng, &format!("{name}.block{i}"), width, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyEncoder { input_proj, blocks })
    }

    fn forward(&self, sess: &mut Session, features: Var) -> Result<Var> {
        self.forward_masked(sess, features, None)
    }

    /// Forward with per-position validity: padded positions are excluded
    /// from every self-attention key set, so valid positions are unaffected
    /// by padding content.
    fn forward_masked(
        &self,
        sess: &mut Session,
        features: Var,
        valid: Option<&[bool]>,
    ) -> Result<Var> {
        let mut x = self.input_proj.forward(sess, features)?;
        x = add_positions(sess, x)?;
        for block in &self.blocks {
            x = block.forward(sess, x, valid)?;
        }
        Ok(x)
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention to the
/// fused memory, feed-forward.
#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff1: AdaptedLinear,
    ff2: AdaptedLinear,
}

impl DecoderLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<DecoderLayer> {
        Ok(DecoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), width, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), width, heads)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), width),
            ff1: AdaptedLinear::new(Linear::new(store, rng, &format!("{name}.ff1"), width, width)),
            ff2: AdaptedLinear::new(Linear::new(store, rng, &format!("{name}.ff2"), width, width)),
        })
    }

    fn forward(
        &self,
        sess: &mut Session,
        x: Var,
        memory: Var,
        memory_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let len = sess.tape.shape(x)[0];
        let causal = AttnMask::causal(len);
        let a = self.ln1.forward(sess, x)?;
        let sa = self.self_attn.forward(sess, a, a, Some(&causal))?;
        let x = sess.tape.add(x, sa)?;

        let mem_mask = memory_valid.map(|v| AttnMask::from_key_validity(len, v));
        let b = self.ln2.forward(sess, x)?;
        let ca = self.cross_attn.forward(sess, b, memory, mem_mask.as_ref())?;
        let x = sess.tape.add(x, ca)?;

        let c = self.ln3.forward(sess, x)?;
        let h = self.ff1.forward(sess, c)?;
        let h = sess.tape.tanh(h)?;
        let h = self.ff2.forward(sess, h)?;
        sess.tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    embedding: Embedding,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    head: AdaptedLinear,
}

impl Decoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Decoder> {
        let embedding = Embedding::new(store, rng, "decoder.embedding", cfg.vocab, cfg.dim);
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("decoder.layer{i}"), cfg.dim, cfg.decoder_heads))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, "decoder.ln_f", cfg.dim);
        let head =
            AdaptedLinear::new(Linear::new(store, rng, "decoder.head", cfg.dim, cfg.vocab));
        Ok(Decoder { embedding, layers, ln_f, head })
    }

    fn forward(
        &self,
        sess: &mut Session,
        targets: &[usize],
        memory: Var,
        memory_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let emb = self.embedding.forward(sess, targets)?;
        let mut x = add_positions(sess, emb)?;
        for layer in &self.layers {
            x = layer.forward(sess, x, memory, memory_valid)?;
        }
        let g = self.ln_f.forward(sess, x)?;
        self.head.forward(sess, g)
    }
}

/// An assembled model with its parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    audio_enc: ToyEncoder,
    visual_enc: Option<ToyEncoder>,
    fusion: Option<FusionPath>,
    swqf_only: Option<WindowQFormer>,
    decoder: Decoder,
}

/// Memory sequence handed to the decoder, with fusion diagnostics when the
/// fusion path produced them.
pub struct EncodedMemory {
    pub memory: Var,
    pub diagnostics: FusionDiagnostics,
}

impl Model {
    /// Deterministic build: same `(cfg, seed)` gives bit-identical parameters.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "model-init");

        let audio_enc = ToyEncoder::new(
            &mut store,
            &mut rng,
            "audio_enc",
            cfg.audio_dim,
            cfg.dim,
            cfg.encoder_blocks,
            cfg.encoder_heads,
        )?;

        let (visual_enc, fusion, swqf_only) = match cfg.variant {
            ModelVariant::AudioVisual => {
                let visual_enc = ToyEncoder::new(
                    &mut store,
                    &mut rng,
                    "visual_enc",
                    cfg.visual_dim,
                    cfg.visual_dim,
                    cfg.encoder_blocks,
                    cfg.encoder_heads,
                )?;
                let fusion =
                    FusionPath::build(&mut store, &mut rng, &cfg.fusion, cfg.dim, cfg.visual_dim)?;
                (Some(visual_enc), Some(fusion), None)
            }
            ModelVariant::AudioOnly => (None, None, None),
            ModelVariant::AudioOnlySwqf => {
                let swqf = WindowQFormer::new(
                    &mut store,
                    &mut rng,
                    "swqf",
                    cfg.dim,
                    cfg.fusion.queries,
                    cfg.fusion.heads,
                )?;
                (None, None, Some(swqf))
            }
        };

        let mut decoder = Decoder::new(&mut store, &mut rng, &cfg)?;
        if let Some(rank) = cfg.decoder_lora_rank {
            for layer in &mut decoder.layers {
                layer.self_attn.attach_lora(&mut store, &mut rng, rank)?;
                layer.cross_attn.attach_lora(&mut store, &mut rng, rank)?;
                let ff1_name = layer.ff1.base.name.clone();
                layer.ff1.attach_lora(&mut store, &mut rng, &ff1_name, rank)?;
                let ff2_name = layer.ff2.base.name.clone();
                layer.ff2.attach_lora(&mut store, &mut rng, &ff2_name, rank)?;
            }
            let head_name = decoder.head.base.name.clone();
            decoder.head.attach_lora(&mut store, &mut rng, &head_name, rank)?;
        }

        for prefix in &cfg.frozen_prefixes {
            store.freeze_prefix(prefix);
        }

        Ok(Model { cfg, seed, store, audio_enc, visual_enc, fusion, swqf_only, decoder })
    }

    /// Freeze everything except LoRA adapter parameters (the distillation
    /// student regime: frozen encoder, decoder adapted through LoRA only).
    pub fn freeze_all_but_lora(&mut self) {
        let lora_names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b"))
            .map(|(_, p)| p.name.clone())
            .collect();
        let prefixes: Vec<&str> = lora_names.iter().map(String::as_str).collect();
        self.store.freeze_all_except(&prefixes);
    }

    /// Run the encoder side: produces the decoder memory for this sample.
    pub fn encode(&self, sess: &mut Session, sample: &SampleRecord) -> Result<EncodedMemory> {
        let audio_in = sess.constant(sample.audio.clone());
        if sample.audio.cols() != self.cfg.audio_dim {
            return Err(Error::Shape(format!(
                "audio width {} vs configured {}",
                sample.audio.cols(),
                self.cfg.audio_dim
            )));
        }
        let h_a = self.audio_enc.forward(sess, audio_in)?;
        match self.cfg.variant {
            ModelVariant::AudioOnly => {
                Ok(EncodedMemory { memory: h_a, diagnostics: FusionDiagnostics::default() })
            }
            ModelVariant::AudioOnlySwqf => {
                let swqf = self.swqf_only.as_ref().expect("variant carries swqf");
                let t = sess.tape.shape(h_a)[0];
                let wcfg = WindowConfig::new(self.cfg.fusion.window, self.cfg.fusion.stride, t)?;
                let (tokens, window_attn) =
                    swqf.forward(sess, h_a, &wcfg, self.cfg.fusion.pool_mode)?;
                Ok(EncodedMemory {
                    memory: tokens,
                    diagnostics: FusionDiagnostics { window_attn, cross_key_weight: None },
                })
            }
            ModelVariant::AudioVisual => {
                if sample.visual.cols() != self.cfg.visual_dim {
                    return Err(Error::Shape(format!(
                        "visual width {} vs configured {}",
                        sample.visual.cols(),
                        self.cfg.visual_dim
                    )));
                }
                let visual_in = sess.constant(sample.visual.clone());
                let visual_enc = self.visual_enc.as_ref().expect("variant carries visual encoder");
                let h_v = visual_enc.forward(sess, visual_in)?;
                let fusion = self.fusion.as_ref().expect("variant carries fusion");
                let out = fusion.fuse(sess, h_a, h_v, None)?;
                Ok(EncodedMemory { memory: out.tokens, diagnostics: out.diagnostics })
            }
        }
    }

    /// Teacher-forced forward: `targets` must begin with BOS; returns
    /// next-token logits, one row per target position.
    pub fn forward(
        &self,
        sess: &mut Session,
        sample: &SampleRecord,
        targets: &[usize],
    ) -> Result<Var> {
        if targets.first() != Some(&BOS) {
            return Err(Error::Contract("teacher-forcing targets must begin with BOS".into()));
        }
        for &t in targets {
            if t >= self.cfg.vocab {
                return Err(Error::Index(format!("token id {t} >= vocab {}", self.cfg.vocab)));
            }
        }
        let encoded = self.encode(sess, sample)?;
        self.decoder.forward(sess, targets, encoded.memory, None)
    }

    /// Greedy autoregressive decode: argmax each step (ties resolved toward
    /// the lowest token id), stopping at EOS or `max_len` emitted tokens.
    pub fn greedy_decode(&self, sample: &SampleRecord, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 1 {
            return Err(Error::Contract("max_len must be >= 1".into()));
        }
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let mut sess = Session::new(&self.store);
            let logits = self.forward(&mut sess, sample, &prefix)?;
            let next = argmax_lowest_id(last_row(&sess, logits));
            if next == EOS {
                break;
            }
            prefix.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Teacher-forced logits for a full target sequence (used for
    /// distillation alignment). Returns a plain tensor `[len, vocab]`.
    pub fn forced_logits(&self, sample: &SampleRecord, targets: &[usize]) -> Result<Tensor> {
        let mut sess = Session::new(&self.store);
        let logits = self.forward(&mut sess, sample, targets)?;
        Ok(sess.tape.value(logits).clone())
    }
}

fn last_row<'t>(sess: &'t Session, logits: Var) -> &'t [f64] {
    let shape = sess.tape.shape(logits);
    let (rows, cols) = (shape[0], shape[1]);
    &sess.tape.value(logits).data()[(rows - 1) * cols..rows * cols]
}

/// Index of the maximum value; ties break toward the lowest index.
pub fn argmax_lowest_id(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// On-disk checkpoint: config echo, seed, named parameter blocks.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<NamedParam>,
}

#[derive(Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let params = model
        .store
        .iter()
        .map(|(_, p)| NamedParam {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
            frozen: p.frozen,
        })
        .collect();
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        seed: model.seed,
        params,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, &ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let ck: Checkpoint = serde_json::from_reader(file)?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint format {} unsupported (expected {CHECKPOINT_VERSION})",
            ck.format_version
        )));
    }
    let mut model = Model::build(ck.config, ck.seed)?;
    let by_name: BTreeMap<String, usize> = model
        .store
        .iter()
        .enumerate()
        .map(|(i, (_, p))| (p.name.clone(), i))
        .collect();
    if by_name.len() != model.store.len() {
        return Err(Error::Config("duplicate parameter names in model".into()));
    }
    if ck.params.len() != model.store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameter blocks, model expects {}",
            ck.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<crate::nn::ParamId> = model.store.ids().collect();
    for np in ck.params {
        let &idx = by_name
            .get(&np.name)
            .ok_or_else(|| Error::Config(format!("unknown parameter block {}", np.name)))?;
        let value = Tensor::new(np.shape, np.data)?;
        model.store.set_value(ids[idx], value)?;
    }
    Ok(model)
}
