//! Masked-reconstruction transformer over walk feature sequences.
//!
//! Each sequence is projected to `d_model`, optionally offset by a learned
//! positional table, passed through post-LN encoder blocks and a light
//! decoder, and projected back to the 15 POI categories. Only masked
//! positions contribute to the loss; row 0 of the encoder output is the
//! cell embedding.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellSet, POI_DIM};
use crate::numerics::{
    Bound, LayerNorm, Linear, OptimizerState, ParamId, ParamStore, Real, Seeds, StreamRng, Tape, Tensor, Var,
};
use crate::walks::{build_feature_sequence, walk_corpus, CellGraph, WalkParams, WalkSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub positions: bool,
    /// Tokens per sequence, `k·l + 1`.
    pub seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 144,
            heads: 4,
            enc_layers: 3,
            dec_layers: 1,
            dropout: 0.1,
            positions: true,
            seq_len: 33,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Masked payload positions in `1..=k·l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub positions: Vec<usize>,
}

/// Number of masked positions: `ρ·n` rounded half up.
pub fn mask_count(payload_len: usize, rho: f64) -> usize {
    ((rho * payload_len as f64 + 0.5).floor() as usize).min(payload_len)
}

pub fn sample_mask<R: Rng + ?Sized>(payload_len: usize, rho: f64, rng: &mut R) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("mask ratio {rho} outside [0, 1]")));
    }
    let m = mask_count(payload_len, rho);
    let mut positions: Vec<usize> = rand::seq::index::sample(rng, payload_len, m)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    positions.sort_unstable();
    Ok(MaskSet { positions })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Block {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl Block {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut StreamRng) -> Self {
        Block {
            wq: Linear::new(store, &format!("{name}.attn.q"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.attn.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.attn.v"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.attn.o"), d, d, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff1: Linear::new(store, &format!("{name}.ffn.1"), d, 4 * d, rng),
            ff2: Linear::new(store, &format!("{name}.ffn.2"), 4 * d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }
}

/// Encoder/decoder parameters plus their layout.
#[derive(Debug, Clone)]
pub struct CellEncoder<T> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    mask_token: ParamId,
    input: Linear,
    positions: Option<ParamId>,
    enc: Vec<Block>,
    dec: Vec<Block>,
    out1: Linear,
    out2: Linear,
}

/// Inputs for one forward pass over `batch` sequences stacked row-wise.
pub struct Batch<T> {
    /// `[batch·seq_len, 15]`.
    pub features: Tensor<T>,
    /// One mask per sequence (empty for inference).
    pub masks: Vec<MaskSet>,
}

impl<T: Real> CellEncoder<T> {
    pub fn new(config: EncoderConfig, seeds: &Seeds) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds.stream("encoder-init", &[]);
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mask_token = store.add("mask_token", Tensor::zeros(&[1, POI_DIM]));
        let input = Linear::new(&mut store, "input", POI_DIM, d, &mut rng);
        let positions = config
            .positions
            .then(|| store.normal("positions", &[config.seq_len, d], 0.02, &mut rng));
        let enc = (0..config.enc_layers)
            .map(|i| Block::new(&mut store, &format!("enc{i}"), d, &mut rng))
            .collect();
        let dec = (0..config.dec_layers)
            .map(|i| Block::new(&mut store, &format!("dec{i}"), d, &mut rng))
            .collect();
        let out1 = Linear::new(&mut store, "out.1", d, d, &mut rng);
        let out2 = Linear::new(&mut store, "out.2", d, POI_DIM, &mut rng);
        Ok(CellEncoder {
            config,
            store,
            mask_token,
            input,
            positions,
            enc,
            dec,
            out1,
            out2,
        })
    }

    /// Same layout with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> CellEncoder<U> {
        CellEncoder {
            config: self.config.clone(),
            store: self.store.cast(),
            mask_token: self.mask_token,
            input: self.input,
            positions: self.positions,
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            out1: self.out1,
            out2: self.out2,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn mask_rows(&self, batch: &Batch<T>) -> Result<Vec<usize>> {
        let l = self.config.seq_len;
        let mut rows = Vec::new();
        for (b, m) in batch.masks.iter().enumerate() {
            for &p in &m.positions {
                if p == 0 || p >= l {
                    return Err(Error::Config(format!("mask position {p} outside 1..{l}")));
                }
                rows.push(b * l + p);
            }
        }
        Ok(rows)
    }

    /// Token embeddings `[B·L, d]` after mask substitution, projection and positions.
    fn embed_tokens(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>, masked: &[usize]) -> Result<Var> {
        let rows = batch.features.rows();
        let l = self.config.seq_len;
        if batch.features.cols() != POI_DIM || !rows.is_multiple_of(l) {
            return Err(Error::shape("encoder input", batch.features.shape(), &[l, POI_DIM]));
        }
        let x = tape.constant(batch.features.clone());
        let x = if masked.is_empty() {
            x
        } else {
            let mut keep = vec![T::one(); rows];
            let mut hit = vec![T::zero(); rows];
            for &r in masked {
                keep[r] = T::zero();
                hit[r] = T::one();
            }
            let keep = tape.constant(Tensor::new(&[rows, 1], keep)?);
            let hit = tape.constant(Tensor::new(&[rows, 1], hit)?);
            let kept = tape.mul_col(keep, x)?;
            let tok = tape.matmul(hit, p.var(self.mask_token), false)?;
            tape.add(kept, tok)?
        };
        let mut z = self.input.forward(tape, p, x)?;
        if let Some(pos) = self.positions {
            let idx: Vec<usize> = (0..rows).map(|r| r % l).collect();
            let pe = tape.gather_rows(p.var(pos), &idx)?;
            z = tape.add(z, pe)?;
        }
        Ok(z)
    }

    fn attention(&self, tape: &mut Tape<T>, p: &Bound, blk: &Block, x: Var, batch: usize) -> Result<Var> {
        let (l, d, h) = (self.config.seq_len, self.config.d_model, self.config.heads);
        let dh = d / h;
        let q = blk.wq.forward(tape, p, x)?;
        let k = blk.wk.forward(tape, p, x)?;
        let v = blk.wv.forward(tape, p, x)?;
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let split = |tape: &mut Tape<T>, t: Var| -> Result<Var> {
                let s = tape.slice_cols(t, i * dh, dh)?;
                tape.reshape(s, &[batch, l, dh])
            };
            let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.bmm(qh, kh, true)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax(scores);
            let out = tape.bmm(attn, vh, false)?;
            heads.push(tape.reshape(out, &[batch * l, dh])?);
        }
        let cat = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        blk.wo.forward(tape, p, cat)
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        blk: &Block,
        x: Var,
        batch: usize,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let rate = self.config.dropout;
        let a = self.attention(tape, p, blk, x, batch)?;
        let a = tape.dropout(a, rate, rng);
        let z = tape.add(x, a)?;
        let z = blk.ln1.forward(tape, p, z)?;
        let f = blk.ff1.forward(tape, p, z)?;
        let f = tape.gelu(f);
        let f = blk.ff2.forward(tape, p, f)?;
        let f = tape.dropout(f, rate, rng);
        let out = tape.add(z, f)?;
        blk.ln2.forward(tape, p, out)
    }

    /// Encoder output `[B·L, d]`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>, rng: &mut StreamRng) -> Result<Var> {
        let masked = self.mask_rows(batch)?;
        let n = batch.features.rows() / self.config.seq_len;
        let mut z = self.embed_tokens(tape, p, batch, &masked)?;
        for blk in &self.enc {
            z = self.block(tape, p, blk, z, n, rng)?;
        }
        Ok(z)
    }

    /// Decoder blocks then the output MLP: `[B·L, 15]`.
    pub fn decode_and_project(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ze: Var,
        batch: usize,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let mut z = ze;
        for blk in &self.dec {
            z = self.block(tape, p, blk, z, batch, rng)?;
        }
        let h = self.out1.forward(tape, p, z)?;
        let h = tape.gelu(h);
        self.out2.forward(tape, p, h)
    }

    /// Full masked forward pass returning the scalar loss, or `None` when no
    /// position is masked.
    pub fn loss(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>, rng: &mut StreamRng) -> Result<Option<Var>> {
        let masked = self.mask_rows(batch)?;
        if masked.is_empty() {
            return Ok(None);
        }
        let n = batch.features.rows() / self.config.seq_len;
        let ze = self.encode(tape, p, batch, rng)?;
        let zp = self.decode_and_project(tape, p, ze, n, rng)?;
        let target = tape.constant(batch.features.clone());
        reconstruction_loss(tape, zp, target, &masked, n).map(Some)
    }

    /// Row-0 encoder outputs for each sequence, eval mode and no masking.
    pub fn embed(&self, sequences: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        let l = self.config.seq_len;
        let mut out = Vec::with_capacity(sequences.len());
        let mut rng = Seeds::new(0).stream("unused", &[]);
        for chunk in sequences.chunks(256) {
            let mut data = Vec::with_capacity(chunk.len() * l * POI_DIM);
            for s in chunk {
                if s.shape() != [l, POI_DIM] {
                    return Err(Error::shape("embed", s.shape(), &[l, POI_DIM]));
                }
                data.extend_from_slice(s.data());
            }
            let batch = Batch {
                features: Tensor::new(&[chunk.len() * l, POI_DIM], data)?,
                masks: Vec::new(),
            };
            let mut tape = Tape::new(false);
            let p = self.store.bind(&mut tape, false);
            let ze = self.encode(&mut tape, &p, &batch, &mut rng)?;
            let z = tape.value(ze);
            for b in 0..chunk.len() {
                out.push(z.row(b * l).to_vec());
            }
        }
        Ok(out)
    }
}

/// `(1/n)(1/|M|) Σ_b Σ_{j∈M_b} ‖Zp[j] − S[j]‖²` over the stacked masked rows.
///
/// Every sequence carries the same mask size, so the double mean equals
/// the masked-row sum divided by the total masked count.
pub fn reconstruction_loss<T: Real>(
    tape: &mut Tape<T>,
    zp: Var,
    target: Var,
    masked_rows: &[usize],
    batch: usize,
) -> Result<Var> {
    if masked_rows.is_empty() || batch == 0 {
        return Err(Error::Config(
            "reconstruction loss needs at least one masked row".into(),
        ));
    }
    let pred = tape.gather_rows(zp, masked_rows)?;
    let truth = tape.gather_rows(target, masked_rows)?;
    let diff = tape.sub(pred, truth)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / masked_rows.len() as f64))
}

/// One city as seen by pretraining and extraction.
pub struct CityGraph<'a> {
    pub cells: &'a CellSet,
    pub graph: CellGraph,
}

impl<'a> CityGraph<'a> {
    pub fn new(cells: &'a CellSet) -> Result<Self> {
        Ok(CityGraph {
            cells,
            graph: CellGraph::from_cells(cells)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub walks: WalkParams,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub frozen_walks: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            walks: WalkParams::default(),
            mask_ratio: 0.3,
            epochs: 100,
            learning_rate: 1e-7,
            batch_size: 64,
            frozen_walks: false,
        }
    }
}

pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Walk sequences for every root of every city at `epoch`.
pub fn corpus_features<T: Real>(
    cities: &[CityGraph<'_>],
    walks: &WalkParams,
    seeds: &Seeds,
    epoch: u64,
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::new();
    for (ci, city) in cities.iter().enumerate() {
        for seq in walk_corpus(&city.graph, walks, seeds, ci as u64, epoch)? {
            out.push(build_feature_sequence(&seq, city.cells)?);
        }
    }
    Ok(out)
}

/// Adam training over all roots of all cities; returns the per-epoch mean loss.
pub fn pretrain(
    model: &mut CellEncoder<f32>,
    cities: &[CityGraph<'_>],
    config: &PretrainConfig,
    seeds: &Seeds,
) -> Result<Vec<f64>> {
    config.walks.validate()?;
    if config.walks.seq_len() != model.config.seq_len {
        return Err(Error::Config(format!(
            "walk sequence length {} does not match encoder length {}",
            config.walks.seq_len(),
            model.config.seq_len
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let payload = model.config.seq_len - 1;
    if mask_count(payload, config.mask_ratio) == 0 {
        log::warn!(
            "mask ratio {} masks no positions; pretraining steps are skipped",
            config.mask_ratio
        );
    }
    let mut opt = OptimizerState::adam(config.learning_rate);
    let mut frozen: Option<Vec<Tensor<f32>>> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let l = model.config.seq_len;
    for epoch in 0..config.epochs {
        let walk_epoch = if config.frozen_walks { 0 } else { epoch as u64 };
        let feats = match &frozen {
            Some(f) => f.clone(),
            None => {
                let f = corpus_features::<f32>(cities, &config.walks, seeds, walk_epoch)?;
                if config.frozen_walks {
                    frozen = Some(f.clone());
                }
                f
            }
        };
        if feats.is_empty() {
            return Err(Error::Data("pretraining corpus is empty".into()));
        }
        let mut rng = seeds.stream("pretrain", &[epoch as u64]);
        let mut order: Vec<usize> = (0..feats.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * l * POI_DIM);
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(feats[i].data());
                masks.push(sample_mask(payload, config.mask_ratio, &mut rng)?);
            }
            let batch = Batch {
                features: Tensor::new(&[chunk.len() * l, POI_DIM], data)?,
                masks,
            };
            let mut tape = Tape::new(true);
            let p = model.store.bind(&mut tape, true);
            let Some(loss) = model.loss(&mut tape, &p, &batch, &mut rng)? else {
                continue;
            };
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() || value > DIVERGENCE_LIMIT {
                return Err(Error::Divergence(format!(
                    "pretraining loss {value} at epoch {epoch}; lower the learning rate"
                )));
            }
            let grads = tape.backward(loss)?;
            let g = model.store.collect_grads(&grads, &p);
            opt.step(&mut model.store, &g)?;
            total += value;
            steps += 1;
        }
        if !model.store.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite encoder parameters after epoch {epoch}"
            )));
        }
        let mean = if steps > 0 { total / steps as f64 } else { f64::NAN };
        log::info!("pretrain epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

/// Walk key reserved for embedding extraction so it never collides with a training epoch.
pub const EMBED_WALK_EPOCH: u64 = u64::MAX;

/// Cell embeddings `(cell id, x)` for one city, in cell id order.
pub fn extract_embeddings(
    model: &CellEncoder<f32>,
    cells: &CellSet,
    walks: &WalkParams,
    seeds: &Seeds,
) -> Result<Vec<(u32, Vec<f32>)>> {
    let graph = CellGraph::from_cells(cells)?;
    let seqs: Vec<WalkSequence> = walk_corpus(&graph, walks, seeds, 0, EMBED_WALK_EPOCH)?;
    let feats = seqs
        .iter()
        .map(|s| build_feature_sequence::<f32>(s, cells))
        .collect::<Result<Vec<_>>>()?;
    let x = model.embed(&feats)?;
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite cell embedding".into()));
    }
    Ok(seqs.iter().map(|s| s.root).zip(x).collect())
}
