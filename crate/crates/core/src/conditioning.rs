//! Conditioning input for the flow-matching model.
//!
//! Text tokens are encoded to `h_text`. Each retrieved clip's features get a
//! per-clip sinusoidal position (restarting at 0) and a learnable rank vector
//! added, and the clips are concatenated along time into `z`. The retrieval
//! audio encoder cross-attends from `h_text` (queries) into `z`, producing
//! `h_audio` with the same length as `h_text`. The final sequence is
//! `[h_text + e_text ; h_audio + e_audio]`.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec_features::LatentFeature;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, Init, LayerNorm, Linear, ParamStore, TransformerBlock};

pub const UNK_TOKEN: &str = "<unk>";

/// Model dimensions. Full-scale encoder: 3 layers, 16 heads, model dim 1024,
/// feed-forward dim 4096; the defaults are a CPU-sized version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub text_layers: usize,
    pub retrieval_layers: usize,
    pub k_max: usize,
    /// Longest clip (in frames) the positional table covers.
    pub max_frames: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            d_model: 128,
            n_heads: 4,
            ff_dim: 256,
            text_layers: 1,
            retrieval_layers: 2,
            k_max: 10,
            max_frames: 512,
        }
    }
}

/// Closed word list of the caption templates plus `<unk>` at id 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut list = vec![UNK_TOKEN.to_string()];
        let mut ids = HashMap::from([(UNK_TOKEN.to_string(), 0u32)]);
        for w in words {
            let w = w.to_lowercase();
            if !ids.contains_key(&w) {
                ids.insert(w.clone(), list.len() as u32);
                list.push(w);
            }
        }
        Self { words: list, ids }
    }

    pub fn template() -> Self {
        Self::new(crate::curation::template_words())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn tokenize(&self, caption: &str) -> Result<TextTokens> {
        let ids: Vec<u32> = caption
            .split(|c: char| !(c.is_alphanumeric() || c == '-'))
            .filter(|w| !w.is_empty())
            .map(|w| self.ids.get(&w.to_lowercase()).copied().unwrap_or(0))
            .collect();
        TextTokens::new(ids, self.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens(Vec<u32>);

impl TextTokens {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty token list".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.0.as_slice(), &Device::Cpu)?.unsqueeze(0)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Audio,
}

/// `[batch, len, d_model]` tokens of one modality.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tensor: Tensor,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tensor.dims().get(1).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[batch, L_text + L_audio, d_model]`; rows before `boundary` are text.
#[derive(Clone, Debug)]
pub struct ConditioningSequence {
    pub tensor: Tensor,
    pub boundary: usize,
}

/// Learnable rank vectors in feature space, one row per retrieval rank.
#[derive(Clone, Debug)]
pub struct RankEmbeddingMatrix {
    table: Tensor,
    k_max: usize,
}

impl RankEmbeddingMatrix {
    pub fn new(store: &mut ParamStore, k_max: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: store.param("cond.rank", &[k_max, dim], Init::Normal(0.5))?,
            k_max,
        })
    }

    pub fn from_tensor(table: Tensor) -> Result<Self> {
        let (k_max, _) = table.dims2()?;
        Ok(Self { table, k_max })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    fn rows(&self, k: usize) -> Result<Tensor> {
        if k == 0 || k > self.k_max {
            return Err(Error::InvalidConfig(format!(
                "{k} retrieved clips, rank table holds {}",
                self.k_max
            )));
        }
        Ok(self.table.narrow(0, 0, k)?)
    }
}

#[derive(Clone, Debug)]
pub struct ModalityEmbeddings {
    pub text: Tensor,
    pub audio: Tensor,
}

impl ModalityEmbeddings {
    pub fn new(store: &mut ParamStore, d_model: usize) -> Result<Self> {
        Ok(Self {
            text: store.param("cond.modality.text", &[d_model], Init::Normal(0.5))?,
            audio: store.param("cond.modality.audio", &[d_model], Init::Normal(0.5))?,
        })
    }
}

/// Fixed per-clip positional table in feature space, `[max_frames, dim]`.
pub fn positional_table(max_frames: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(sinusoidal_table(max_frames, dim), (max_frames, dim), &Device::Cpu)?
        .to_dtype(dtype)?)
}

/// Token embedding + sinusoidal positions + self-attention layers.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: Tensor,
    pos: Tensor,
    layers: Vec<TransformerBlock>,
    norm: LayerNorm,
    vocab_size: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ConditioningConfig, vocab_size: usize) -> Result<Self> {
        let embed = store.param("text.embed", &[vocab_size, cfg.d_model], Init::Normal(1.0))?;
        let layers = (0..cfg.text_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("text.layer{i}"),
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.ff_dim,
                    false,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            pos: positional_table(64, cfg.d_model, store.dtype())?,
            layers,
            norm: store.layer_norm("text.norm", cfg.d_model)?,
            vocab_size,
        })
    }

    /// `tokens`: `[batch, len]` u32 -> `[batch, len, d_model]`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, l) = tokens.dims2()?;
        if l == 0 {
            return Err(Error::Invalid("empty token list".into()));
        }
        if l > self.pos.dims()[0] {
            return Err(Error::Invalid(format!("caption of {l} tokens is too long")));
        }
        let d = self.embed.dims()[1];
        let flat = tokens.flatten_all()?;
        let mut x = self
            .embed
            .index_select(&flat, 0)?
            .reshape((b, l, d))?
            .broadcast_add(&self.pos.narrow(0, 0, l)?)?;
        for layer in &self.layers {
            x = layer.forward(&x, None)?;
        }
        self.norm.forward(&x)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Cross-attention encoder: text queries attend into the retrieval sequence.
#[derive(Clone, Debug)]
pub struct RetrievalAudioEncoder {
    in_proj: Linear,
    layers: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl RetrievalAudioEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ConditioningConfig) -> Result<Self> {
        let layers = (0..cfg.retrieval_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("retrieval.layer{i}"),
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.ff_dim,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            in_proj: store.linear("retrieval.in_proj", cfg.feature_dim, cfg.d_model)?,
            layers,
            norm: store.layer_norm("retrieval.norm", cfg.d_model)?,
        })
    }

    /// `z`: `[batch, sum T_i, feature_dim]`, `h_text`: `[batch, L_text, d_model]`.
    pub fn forward(&self, z: &Tensor, h_text: &Tensor) -> Result<Tensor> {
        self.forward_projected(&self.in_proj.forward(z)?, h_text)
    }

    /// Like [`forward`](Self::forward) with `z` already in model space.
    pub fn forward_projected(&self, z_model: &Tensor, h_text: &Tensor) -> Result<Tensor> {
        let (bz, lz, dz) = z_model.dims3()?;
        let (bt, lt, dt) = h_text.dims3()?;
        if lz == 0 || lt == 0 {
            return Err(Error::Invalid("empty retrieval or text sequence".into()));
        }
        if bz != bt || dz != dt {
            return Err(Error::DimensionMismatch(format!(
                "retrieval {:?} vs text {:?}",
                z_model.dims(),
                h_text.dims()
            )));
        }
        let mut x = h_text.clone();
        for layer in &self.layers {
            x = layer.forward(&x, Some(z_model))?;
        }
        self.norm.forward(&x)
    }

    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        self.in_proj.forward(z)
    }
}

/// How retrieved material enters the conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalConditioning {
    /// Text only (no retrieval encoder).
    None,
    /// Retrieved audio features only.
    Audio,
    /// Retrieved captions and audio, interleaved per clip.
    Interleaved,
}

/// Batched model inputs. Retrieved clips share one length `T`.
pub struct ConditioningInputs {
    /// `[batch, L_text]` u32.
    pub tokens: Tensor,
    /// `[batch, K, T, feature_dim]`.
    pub retrieved: Option<Tensor>,
    /// `[batch, K, L_caption]` u32, interleaved mode only.
    pub retrieved_tokens: Option<Tensor>,
}

/// All learnable conditioning parameters.
pub struct ConditioningModel {
    cfg: ConditioningConfig,
    mode: RetrievalConditioning,
    text: TextEncoder,
    ranks: Option<RankEmbeddingMatrix>,
    encoder: Option<RetrievalAudioEncoder>,
    modality: ModalityEmbeddings,
    pos_table: Tensor,
}

impl ConditioningModel {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ConditioningConfig,
        vocab_size: usize,
        mode: RetrievalConditioning,
    ) -> Result<Self> {
        if cfg.k_max == 0 {
            return Err(Error::InvalidConfig("k_max must be positive".into()));
        }
        let text = TextEncoder::new(store, cfg, vocab_size)?;
        let (ranks, encoder) = if mode == RetrievalConditioning::None {
            (None, None)
        } else {
            (
                Some(RankEmbeddingMatrix::new(store, cfg.k_max, cfg.feature_dim)?),
                Some(RetrievalAudioEncoder::new(store, cfg)?),
            )
        };
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            text,
            ranks,
            encoder,
            modality: ModalityEmbeddings::new(store, cfg.d_model)?,
            pos_table: positional_table(cfg.max_frames, cfg.feature_dim, store.dtype())?,
        })
    }

    pub fn mode(&self) -> RetrievalConditioning {
        self.mode
    }

    pub fn config(&self) -> &ConditioningConfig {
        &self.cfg
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn retrieval_encoder(&self) -> Option<&RetrievalAudioEncoder> {
        self.encoder.as_ref()
    }

    pub fn ranks(&self) -> Option<&RankEmbeddingMatrix> {
        self.ranks.as_ref()
    }

    pub fn modality(&self) -> &ModalityEmbeddings {
        &self.modality
    }

    pub fn pos_table(&self) -> &Tensor {
        &self.pos_table
    }

    pub fn forward(&self, inputs: &ConditioningInputs) -> Result<ConditioningSequence> {
        let h_text = TokenSequence {
            tensor: self.text.forward(&inputs.tokens)?,
            modality: Modality::Text,
        };
        let (encoder, ranks) = match (&self.encoder, &self.ranks) {
            (Some(e), Some(r)) => (e, r),
            _ => return build_text_only_conditioning(&h_text, &self.modality),
        };
        let retrieved = inputs.retrieved.as_ref().ok_or_else(|| {
            Error::Invalid("retrieval-conditioned model called without retrieved clips".into())
        })?;
        let z_model = match self.mode {
            RetrievalConditioning::Interleaved => {
                let captions = inputs.retrieved_tokens.as_ref().ok_or_else(|| {
                    Error::Invalid("interleaved conditioning needs retrieved captions".into())
                })?;
                self.interleave(retrieved, captions, ranks, encoder)?
            }
            _ => encoder.project(&assemble_batch(retrieved, ranks, &self.pos_table)?)?,
        };
        let h_audio = TokenSequence {
            tensor: encoder.forward_projected(&z_model, &h_text.tensor)?,
            modality: Modality::Audio,
        };
        build_conditioning(&h_text, &h_audio, &self.modality)
    }

    fn interleave(
        &self,
        retrieved: &Tensor,
        captions: &Tensor,
        ranks: &RankEmbeddingMatrix,
        encoder: &RetrievalAudioEncoder,
    ) -> Result<Tensor> {
        let (b, k, t, _) = retrieved.dims4()?;
        let (bc, kc, lc) = captions.dims3()?;
        if b != bc || k != kc {
            return Err(Error::DimensionMismatch(format!(
                "{k} retrieved clips vs {kc} captions"
            )));
        }
        let dm = self.cfg.d_model;
        let text = self
            .text
            .forward(&captions.reshape((b * k, lc))?)?
            .reshape((b, k, lc, dm))?;
        let audio = encoder
            .project(&add_position_and_rank(retrieved, ranks, &self.pos_table)?)?
            .reshape((b, k, t, dm))?;
        Ok(Tensor::cat(&[&text, &audio], 2)?.reshape((b, k * (lc + t), dm))?)
    }
}

fn add_position_and_rank(
    features: &Tensor,
    ranks: &RankEmbeddingMatrix,
    pos_table: &Tensor,
) -> Result<Tensor> {
    let (_, k, t, d) = features.dims4()?;
    if d != ranks.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dim {d} vs rank dim {}",
            ranks.dim()
        )));
    }
    if t > pos_table.dims()[0] {
        return Err(Error::Invalid(format!(
            "clip of {t} frames exceeds positional table"
        )));
    }
    let pos = pos_table.narrow(0, 0, t)?.reshape((1, 1, t, d))?;
    let rank = ranks.rows(k)?.reshape((1, k, 1, d))?;
    Ok(features.broadcast_add(&pos)?.broadcast_add(&rank)?)
}

/// Batched `z` for equal-length clips: `[batch, K, T, D] -> [batch, K*T, D]`.
pub fn assemble_batch(
    features: &Tensor,
    ranks: &RankEmbeddingMatrix,
    pos_table: &Tensor,
) -> Result<Tensor> {
    let (b, k, t, d) = features.dims4()?;
    Ok(add_position_and_rank(features, ranks, pos_table)?.reshape((b, k * t, d))?)
}

/// `z = concat_i (f_i + p[0..T_i] + r_i)` for clips of any lengths, `[sum T_i, D]`.
pub fn assemble_retrieval_sequence(
    features: &[LatentFeature],
    ranks: &RankEmbeddingMatrix,
    pos_table: &Tensor,
) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::Invalid("no retrieved clips".into()));
    }
    if features.len() > ranks.k_max() {
        return Err(Error::InvalidConfig(format!(
            "{} retrieved clips, rank table holds {}",
            features.len(),
            ranks.k_max()
        )));
    }
    let dtype = ranks.table().dtype();
    let blocks = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let clip = Tensor::from_slice(f.as_slice(), (1, 1, f.n_frames(), f.dim()), &Device::Cpu)?
                .to_dtype(dtype)?;
            let rank = ranks.table().narrow(0, i, 1)?.reshape((1, 1, 1, ranks.dim()))?;
            let single = RankEmbeddingMatrix {
                table: rank.reshape((1, ranks.dim()))?,
                k_max: 1,
            };
            Ok(add_position_and_rank(&clip, &single, pos_table)?
                .reshape((f.n_frames(), f.dim()))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&blocks, 0)?)
}

/// `h_text` for a single caption, `[1, L_text, d_model]`.
pub fn encode_text(tokens: &TextTokens, encoder: &TextEncoder) -> Result<TokenSequence> {
    if tokens.ids().iter().any(|&i| i as usize >= encoder.vocab_size()) {
        return Err(Error::Invalid("token outside vocabulary".into()));
    }
    Ok(TokenSequence {
        tensor: encoder.forward(&tokens.to_tensor()?)?,
        modality: Modality::Text,
    })
}

/// `h_audio`: one output row per text query. `z` may be `[sum T, D]` or batched.
pub fn encode_retrieval(
    z: &Tensor,
    h_text: &TokenSequence,
    encoder: &RetrievalAudioEncoder,
) -> Result<TokenSequence> {
    let z = if z.rank() == 2 { z.unsqueeze(0)? } else { z.clone() };
    Ok(TokenSequence {
        tensor: encoder.forward(&z, &h_text.tensor)?,
        modality: Modality::Audio,
    })
}

/// `[h_text + e_text ; h_audio + e_audio]` along time.
pub fn build_conditioning(
    h_text: &TokenSequence,
    h_audio: &TokenSequence,
    m: &ModalityEmbeddings,
) -> Result<ConditioningSequence> {
    let (bt, lt, dt) = h_text.tensor.dims3()?;
    let (ba, _, da) = h_audio.tensor.dims3()?;
    if bt != ba || dt != da || m.text.dims() != [dt] || m.audio.dims() != [da] {
        return Err(Error::DimensionMismatch(format!(
            "text {:?}, audio {:?}, modality {:?}",
            h_text.tensor.dims(),
            h_audio.tensor.dims(),
            m.text.dims()
        )));
    }
    let text = h_text.tensor.broadcast_add(&m.text)?;
    let audio = h_audio.tensor.broadcast_add(&m.audio)?;
    Ok(ConditioningSequence {
        tensor: Tensor::cat(&[&text, &audio], 1)?,
        boundary: lt,
    })
}

/// Text-only conditioning for the no-retrieval baseline.
pub fn build_text_only_conditioning(
    h_text: &TokenSequence,
    m: &ModalityEmbeddings,
) -> Result<ConditioningSequence> {
    let (_, lt, dt) = h_text.tensor.dims3()?;
    if m.text.dims() != [dt] {
        return Err(Error::DimensionMismatch("modality embedding dim".into()));
    }
    Ok(ConditioningSequence {
        tensor: h_text.tensor.broadcast_add(&m.text)?,
        boundary: lt,
    })
}

/// Interleaved variant: `z = [caption_1 ; audio_1 ; caption_2 ; audio_2 ; ...]` in
/// rank order, encoded with `h_text_target` as queries.
pub fn build_conditioning_interleaved(
    features: &[LatentFeature],
    captions: &[TextTokens],
    h_text_target: &TokenSequence,
    model: &ConditioningModel,
) -> Result<ConditioningSequence> {
    if features.len() != captions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} clips vs {} captions",
            features.len(),
            captions.len()
        )));
    }
    let (encoder, ranks) = match (model.retrieval_encoder(), model.ranks()) {
        (Some(e), Some(r)) => (e, r),
        _ => return Err(Error::Invalid("model has no retrieval encoder".into())),
    };
    if features.is_empty() || features.len() > ranks.k_max() {
        return Err(Error::InvalidConfig(format!(
            "{} retrieved clips, rank table holds {}",
            features.len(),
            ranks.k_max()
        )));
    }
    let dtype = ranks.table().dtype();
    let mut blocks = Vec::with_capacity(2 * features.len());
    for (i, (f, c)) in features.iter().zip(captions).enumerate() {
        let text = encode_text(c, model.text_encoder())?.tensor;
        let clip = Tensor::from_slice(f.as_slice(), (1, 1, f.n_frames(), f.dim()), &Device::Cpu)?
            .to_dtype(dtype)?;
        let single = RankEmbeddingMatrix {
            table: ranks.table().narrow(0, i, 1)?,
            k_max: 1,
        };
        let audio = encoder
            .project(&add_position_and_rank(&clip, &single, model.pos_table())?)?
            .reshape((1, f.n_frames(), model.config().d_model))?;
        blocks.push(text);
        blocks.push(audio);
    }
    let z_model = Tensor::cat(&blocks, 1)?;
    let h_audio = TokenSequence {
        tensor: encoder.forward_projected(&z_model, &h_text_target.tensor)?,
        modality: Modality::Audio,
    };
    build_conditioning(h_text_target, &h_audio, model.modality())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ConditioningConfig {
        ConditioningConfig {
            feature_dim: 6,
            d_model: 8,
            n_heads: 2,
            ff_dim: 16,
            text_layers: 1,
            retrieval_layers: 2,
            k_max: 3,
            max_frames: 32,
        }
    }

    fn model(mode: RetrievalConditioning) -> (ParamStore, ConditioningModel) {
        let mut store = ParamStore::new(11, DType::F64);
        let m = ConditioningModel::new(&mut store, &cfg(), 10, mode).unwrap();
        (store, m)
    }

    fn to_vec3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
        t.to_dtype(DType::F64).unwrap().to_vec3().unwrap()
    }

    #[test]
    fn vocabulary_maps_unknown_to_zero() {
        let v = Vocabulary::new(["a".to_string(), "hum".to_string()]);
        assert_eq!(v.tokenize("A hum, bark").unwrap().ids(), &[1, 2, 0]);
        assert!(v.tokenize("  ").is_err());
        assert!(TextTokens::new(vec![5], 3).is_err());
    }

    #[test]
    fn text_shapes_and_determinism() {
        let (_, m) = model(RetrievalConditioning::Audio);
        let tokens = TextTokens::new(vec![1, 2, 3, 4, 5], 10).unwrap();
        let h = encode_text(&tokens, m.text_encoder()).unwrap();
        assert_eq!(h.tensor.dims(), &[1, 5, 8]);
        let again = encode_text(&tokens, m.text_encoder()).unwrap();
        assert_eq!(to_vec3(&h.tensor), to_vec3(&again.tensor));
    }

    #[test]
    fn zero_features_isolate_embeddings() {
        let (_, m) = model(RetrievalConditioning::Audio);
        let f = LatentFeature::zeros(4, 6, 10.0);
        let z = assemble_retrieval_sequence(&[f], m.ranks().unwrap(), m.pos_table()).unwrap();
        let expected = m
            .pos_table()
            .narrow(0, 0, 4)
            .unwrap()
            .broadcast_add(&m.ranks().unwrap().table().narrow(0, 0, 1).unwrap())
            .unwrap();
        assert_eq!(
            z.to_vec2::<f64>().unwrap(),
            expected.to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn positions_restart_per_clip() {
        let (_, m) = model(RetrievalConditioning::Audio);
        let clips = [LatentFeature::zeros(4, 6, 10.0), LatentFeature::zeros(6, 6, 10.0)];
        let z = assemble_retrieval_sequence(&clips, m.ranks().unwrap(), m.pos_table())
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(z.len(), 10);
        let pos = m.pos_table().to_vec2::<f64>().unwrap();
        let ranks = m.ranks().unwrap().table().to_vec2::<f64>().unwrap();
        for (row, zr) in z.iter().enumerate().skip(4) {
            for d in 0..6 {
                assert_eq!(zr[d], pos[row - 4][d] + ranks[1][d]);
            }
        }
    }

    #[test]
    fn too_many_clips_is_an_error() {
        let (_, m) = model(RetrievalConditioning::Audio);
        let clips = vec![LatentFeature::zeros(2, 6, 10.0); 4];
        assert!(assemble_retrieval_sequence(&clips, m.ranks().unwrap(), m.pos_table()).is_err());
        let wrong_dim = [LatentFeature::zeros(2, 5, 10.0)];
        assert!(assemble_retrieval_sequence(&wrong_dim, m.ranks().unwrap(), m.pos_table()).is_err());
    }

    #[test]
    fn conditioning_concatenation() {
        let dev = Device::Cpu;
        let ht = TokenSequence {
            tensor: Tensor::ones((1, 5, 4), DType::F64, &dev).unwrap(),
            modality: Modality::Text,
        };
        let ha = TokenSequence {
            tensor: Tensor::full(2.0, (1, 5, 4), &dev).unwrap(),
            modality: Modality::Audio,
        };
        let zero = ModalityEmbeddings {
            text: Tensor::zeros(4, DType::F64, &dev).unwrap(),
            audio: Tensor::zeros(4, DType::F64, &dev).unwrap(),
        };
        let c = build_conditioning(&ht, &ha, &zero).unwrap();
        assert_eq!(c.tensor.dims(), &[1, 10, 4]);
        assert_eq!(c.boundary, 5);
        let rows = to_vec3(&c.tensor);
        assert!(rows[0][..5].iter().all(|r| r.iter().all(|&v| v == 1.0)));
        assert!(rows[0][5..].iter().all(|r| r.iter().all(|&v| v == 2.0)));

        let m = ModalityEmbeddings {
            text: Tensor::new(&[1.0f64, 0.0, 0.0, 0.0], &dev).unwrap(),
            audio: Tensor::new(&[0.0f64, 1.0, 0.0, 0.0], &dev).unwrap(),
        };
        let swapped = ModalityEmbeddings {
            text: m.audio.clone(),
            audio: m.text.clone(),
        };
        let a = to_vec3(&build_conditioning(&ht, &ha, &m).unwrap().tensor);
        let b = to_vec3(&build_conditioning(&ht, &ha, &swapped).unwrap().tensor);
        assert_ne!(a, b);

        let bad = TokenSequence {
            tensor: Tensor::ones((1, 5, 3), DType::F64, &dev).unwrap(),
            modality: Modality::Audio,
        };
        assert!(build_conditioning(&ht, &bad, &zero).is_err());
    }

    #[test]
    fn retrieval_output_follows_query_length() {
        let (_, m) = model(RetrievalConditioning::Audio);
        let tokens = TextTokens::new(vec![1, 2, 3], 10).unwrap();
        let ht = encode_text(&tokens, m.text_encoder()).unwrap();
        for total in [1, 7, 20] {
            let z = Tensor::ones((total, 6), DType::F64, &Device::Cpu).unwrap();
            let ha = encode_retrieval(&z, &ht, m.retrieval_encoder().unwrap()).unwrap();
            assert_eq!(ha.tensor.dims(), &[1, 3, 8]);
        }
    }

    #[test]
    fn interleaved_block_lengths() {
        let (_, m) = model(RetrievalConditioning::Interleaved);
        let ht = encode_text(&TextTokens::new(vec![1, 2], 10).unwrap(), m.text_encoder()).unwrap();
        let clips = [LatentFeature::zeros(4, 6, 10.0), LatentFeature::zeros(3, 6, 10.0)];
        let caps = [
            TextTokens::new(vec![1, 2, 3], 10).unwrap(),
            TextTokens::new(vec![4], 10).unwrap(),
        ];
        let c = build_conditioning_interleaved(&clips, &caps, &ht, &m).unwrap();
        assert_eq!(c.tensor.dims(), &[1, 4, 8]);
        assert_eq!(c.boundary, 2);
        assert!(build_conditioning_interleaved(&clips, &caps[..1], &ht, &m).is_err());
    }

    #[test]
    fn batched_forward_matches_single_item_path() {
        let (_, m) = model(RetrievalConditioning::Audio);
        let tokens = TextTokens::new(vec![1, 2, 3], 10).unwrap();
        let clips: Vec<LatentFeature> = (0..2)
            .map(|c| {
                LatentFeature::new((0..24).map(|i| ((i + c * 7) as f32 * 0.37).sin()).collect(), 4, 6, 10.0)
                    .unwrap()
            })
            .collect();
        let ht = encode_text(&tokens, m.text_encoder()).unwrap();
        let z = assemble_retrieval_sequence(&clips, m.ranks().unwrap(), m.pos_table()).unwrap();
        let ha = encode_retrieval(&z, &ht, m.retrieval_encoder().unwrap()).unwrap();
        let single = build_conditioning(&ht, &ha, m.modality()).unwrap();

        let data: Vec<f32> = clips.iter().flat_map(|c| c.as_slice().to_vec()).collect();
        let retrieved = Tensor::from_vec(data, (1, 2, 4, 6), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let batched = m
            .forward(&ConditioningInputs {
                tokens: tokens.to_tensor().unwrap(),
                retrieved: Some(retrieved),
                retrieved_tokens: None,
            })
            .unwrap();
        let (a, b) = (to_vec3(&single.tensor), to_vec3(&batched.tensor));
        for (x, y) in a[0].iter().flatten().zip(b[0].iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_has_text_only() {
        let (_, m) = model(RetrievalConditioning::None);
        let c = m
            .forward(&ConditioningInputs {
                tokens: TextTokens::new(vec![1, 2, 3, 4], 10).unwrap().to_tensor().unwrap(),
                retrieved: None,
                retrieved_tokens: None,
            })
            .unwrap();
        assert_eq!(c.tensor.dims(), &[1, 4, 8]);
        assert_eq!(c.boundary, 4);
    }
}
