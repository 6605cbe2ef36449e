//! A small transformer encoder-decoder with optional residual adapter layers
//! in the source embedding and encoder layers (decoder layers optionally, for
//! the adapter-position ablation). Exposes the decoder context representation
//! used as the datastore key.

mod checkpoint;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_params_file, save_params_file, CHECKPOINT_MAGIC};

use crate::corpus::{SentencePair, TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, uniform_matrix, GradStore, NodeId, Params, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterSites {
    None,
    Encoder,
    EncoderDecoder,
}

impl AdapterSites {
    fn code(self) -> u32 {
        match self {
            AdapterSites::None => 0,
            AdapterSites::Encoder => 1,
            AdapterSites::EncoderDecoder => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(AdapterSites::None),
            1 => Ok(AdapterSites::Encoder),
            2 => Ok(AdapterSites::EncoderDecoder),
            other => Err(Error::Config(format!("unknown adapter-sites code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub adapter_hidden: usize,
    pub adapter_sites: AdapterSites,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            d_ff: 128,
            adapter_hidden: 64,
            adapter_sites: AdapterSites::Encoder,
            vocab_size,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.adapter_hidden,
            self.vocab_size,
            self.max_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform_matrix(rng, rows, cols, bound)
}

fn add_ln(params: &mut Params, prefix: &str, d: usize) {
    params.add_vector(&format!("{prefix}.g"), vec![1.0; d]);
    params.add_vector(&format!("{prefix}.b"), vec![0.0; d]);
}

fn add_attn(params: &mut Params, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.add_matrix(&format!("{prefix}.{w}"), xavier(rng, d, d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.add_vector(&format!("{prefix}.{b}"), vec![0.0; d]);
    }
}

fn add_ff(params: &mut Params, prefix: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) {
    params.add_matrix(&format!("{prefix}.w1"), xavier(rng, d, d_ff));
    params.add_vector(&format!("{prefix}.b1"), vec![0.0; d_ff]);
    params.add_matrix(&format!("{prefix}.w2"), xavier(rng, d_ff, d));
    params.add_vector(&format!("{prefix}.b2"), vec![0.0; d]);
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let d = cfg.d_model;
        let emb_bound = 1.0 / (d as f64).sqrt();
        params.add_matrix(
            "embed",
            uniform_matrix(&mut rng, cfg.vocab_size, d, emb_bound),
        );
        params.add_matrix("out_proj", xavier(&mut rng, d, cfg.vocab_size));
        for i in 0..cfg.n_enc_layers {
            add_ln(&mut params, &format!("enc.{i}.ln1"), d);
            add_attn(&mut params, &format!("enc.{i}.attn"), d, &mut rng);
            add_ln(&mut params, &format!("enc.{i}.ln2"), d);
            add_ff(&mut params, &format!("enc.{i}.ff"), d, cfg.d_ff, &mut rng);
        }
        add_ln(&mut params, "enc.ln_f", d);
        for i in 0..cfg.n_dec_layers {
            add_ln(&mut params, &format!("dec.{i}.ln1"), d);
            add_attn(&mut params, &format!("dec.{i}.self_attn"), d, &mut rng);
            add_ln(&mut params, &format!("dec.{i}.ln2"), d);
            add_attn(&mut params, &format!("dec.{i}.cross_attn"), d, &mut rng);
            add_ln(&mut params, &format!("dec.{i}.ln3"), d);
            add_ff(&mut params, &format!("dec.{i}.ff"), d, cfg.d_ff, &mut rng);
        }
        add_ln(&mut params, "dec.ln_f", d);
        Ok(Model { cfg, params })
    }

    /// Identity-initialized adapters for every configured site: W1 small
    /// uniform, W2 = 0, layer-norm affine at (1, 0). With W2 = 0 the whole
    /// stack is an exact identity.
    pub fn init_adapters(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let d = self.cfg.d_model;
        let ah = self.cfg.adapter_hidden;
        let bound = 1.0 / (d as f64).sqrt();
        let add_site = |params: &mut Params, site: &str, rng: &mut ChaCha8Rng| {
            params.add_matrix(&format!("adapter.{site}.w1"), uniform_matrix(rng, d, ah, bound));
            params.add_matrix(&format!("adapter.{site}.w2"), Array2::zeros((ah, d)));
            params.add_vector(&format!("adapter.{site}.ln.g"), vec![1.0; d]);
            params.add_vector(&format!("adapter.{site}.ln.b"), vec![0.0; d]);
        };
        if self.cfg.adapter_sites == AdapterSites::None {
            return params;
        }
        add_site(&mut params, "emb", &mut rng);
        for i in 0..self.cfg.n_enc_layers {
            add_site(&mut params, &format!("enc{i}"), &mut rng);
        }
        if self.cfg.adapter_sites == AdapterSites::EncoderDecoder {
            for i in 0..self.cfg.n_dec_layers {
                add_site(&mut params, &format!("dec{i}"), &mut rng);
            }
        }
        params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = vec![
            self.cfg.d_model as f32,
            self.cfg.n_heads as f32,
            self.cfg.n_enc_layers as f32,
            self.cfg.n_dec_layers as f32,
            self.cfg.d_ff as f32,
            self.cfg.adapter_hidden as f32,
            self.cfg.adapter_sites.code() as f32,
            self.cfg.vocab_size as f32,
            self.cfg.max_len as f32,
        ];
        save_params_file(&self.params, &[("__config", &meta)], path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, meta) = load_params_file(path)?;
        let cfg_vec = meta
            .get("__config")
            .ok_or_else(|| Error::Format {
                offset: 0,
                msg: "checkpoint missing __config tensor".into(),
            })?
            .clone();
        if cfg_vec.len() != 9 {
            return Err(Error::Format {
                offset: 0,
                msg: "malformed __config tensor".into(),
            });
        }
        let cfg = ModelConfig {
            d_model: cfg_vec[0] as usize,
            n_heads: cfg_vec[1] as usize,
            n_enc_layers: cfg_vec[2] as usize,
            n_dec_layers: cfg_vec[3] as usize,
            d_ff: cfg_vec[4] as usize,
            adapter_hidden: cfg_vec[5] as usize,
            adapter_sites: AdapterSites::from_code(cfg_vec[6] as u32)?,
            vocab_size: cfg_vec[7] as usize,
            max_len: cfg_vec[8] as usize,
        };
        cfg.validate()?;
        Ok(Model { cfg, params })
    }

    /// Inference-mode encoder pass, returning the final hidden states.
    pub fn encode_plain(&self, x: &[TokenId], adapters: Option<&Params>) -> Result<Array2<f64>> {
        let mut fwd = ForwardPass::new(self, adapters, None);
        let enc = fwd.encode(x)?;
        Ok(fwd.tape.value(enc).to_owned())
    }

    /// One decoder step: returns the context representation h at the last
    /// prefix position (post final layer norm, pre output projection) and
    /// p_NMT over the vocabulary.
    pub fn decode_step(
        &self,
        enc_out: &Array2<f64>,
        y_prefix: &[TokenId],
    ) -> Result<(Array1<f64>, Vec<f64>)> {
        if y_prefix.first() != Some(&BOS) {
            return Err(Error::Contract("decoder prefix must begin with BOS".into()));
        }
        let mut fwd = ForwardPass::new(self, None, None);
        let enc = fwd.tape.constant(enc_out.clone());
        let h_all = fwd.decode(enc, y_prefix, false)?;
        let logits = fwd.logits(h_all);
        let last = y_prefix.len() - 1;
        let h = fwd.tape.value(h_all).row(last).to_owned();
        let probs = softmax_rows(&fwd.tape.value(logits));
        Ok((h, probs.row(last).to_vec()))
    }

    /// Teacher-forced pass over a pair; returns one representation per target
    /// position t = 1..=|y|+1 (the last position predicts EOS).
    pub fn forced_decode_reps(
        &self,
        pair: &SentencePair,
        adapters: Option<&Params>,
    ) -> Result<Array2<f64>> {
        let mut fwd = ForwardPass::new(self, adapters, None);
        let enc = fwd.encode(&pair.source)?;
        let mut y_in = Vec::with_capacity(pair.target.len() + 1);
        y_in.push(BOS);
        y_in.extend_from_slice(&pair.target);
        let use_dec_adapters =
            adapters.is_some() && self.cfg.adapter_sites == AdapterSites::EncoderDecoder;
        let h_all = fwd.decode(enc, &y_in, use_dec_adapters)?;
        Ok(fwd.tape.value(h_all).to_owned())
    }
}

/// Sinusoidal positional encodings for `len` positions.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let exponent = (2 * (i / 2)) as f64 / d as f64;
        let angle = pos as f64 / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Dropout settings used during base training only.
pub struct DropoutCtx {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

/// A single differentiable forward pass. Parameter set 0 is the base model,
/// set 1 the adapters when present.
pub struct ForwardPass<'p> {
    model: &'p Model,
    adapters: Option<&'p Params>,
    pub tape: Tape<'p>,
    dropout: Option<DropoutCtx>,
}

impl<'p> ForwardPass<'p> {
    pub fn new(model: &'p Model, adapters: Option<&'p Params>, dropout: Option<DropoutCtx>) -> Self {
        let mut sets = vec![&model.params];
        if let Some(a) = adapters {
            sets.push(a);
        }
        ForwardPass {
            model,
            adapters,
            tape: Tape::new(sets),
            dropout,
        }
    }

    fn maybe_dropout(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = {
            let v = self.tape.value(x);
            (v.nrows(), v.ncols())
        };
        match &mut self.dropout {
            Some(ctx) if ctx.p > 0.0 => {
                use rand::Rng;
                let keep = 1.0 - ctx.p;
                let mask = Array2::from_shape_fn((rows, cols), |_| {
                    if ctx.rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                self.tape.dropout(x, mask)
            }
            _ => x,
        }
    }

    fn ln(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let g = self.tape.param(0, self.model.params.id(&format!("{prefix}.g")));
        let b = self.tape.param(0, self.model.params.id(&format!("{prefix}.b")));
        self.tape.layer_norm(x, g, b)
    }

    fn linear(&mut self, x: NodeId, set: usize, w: &str, b: Option<&str>) -> NodeId {
        let params = if set == 0 {
            &self.model.params
        } else {
            self.adapters.expect("adapter set missing")
        };
        let wid = self.tape.param(set, params.id(w));
        let out = self.tape.matmul(x, wid);
        match b {
            Some(b) => {
                let bid = self.tape.param(set, params.id(b));
                self.tape.add_row(out, bid)
            }
            None => out,
        }
    }

    fn attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        prefix: &str,
        mask: Option<&Array2<f64>>,
    ) -> NodeId {
        let d = self.model.cfg.d_model;
        let nh = self.model.cfg.n_heads;
        let dh = d / nh;
        let q = self.linear(q_in, 0, &format!("{prefix}.wq"), Some(&format!("{prefix}.bq")));
        let k = self.linear(kv_in, 0, &format!("{prefix}.wk"), Some(&format!("{prefix}.bk")));
        let v = self.linear(kv_in, 0, &format!("{prefix}.wv"), Some(&format!("{prefix}.bv")));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = self.tape.slice_cols(q, s, e);
            let kh = self.tape.slice_cols(k, s, e);
            let vh = self.tape.slice_cols(v, s, e);
            let scores = self.tape.matmul_nt(qh, kh);
            let scores = self.tape.scale(scores, scale);
            let scores = match mask {
                Some(m) => self.tape.add_const(scores, m),
                None => scores,
            };
            let probs = self.tape.softmax_rows(scores);
            heads.push(self.tape.matmul(probs, vh));
        }
        let ctx = self.tape.concat_cols(&heads);
        self.linear(ctx, 0, &format!("{prefix}.wo"), Some(&format!("{prefix}.bo")))
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let h = self.linear(x, 0, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")));
        let h = self.tape.relu(h);
        self.linear(h, 0, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
    }

    /// Residual bottleneck adapter: H + W2 . ReLU(W1 . LN(H)).
    fn adapter(&mut self, x: NodeId, site: &str) -> NodeId {
        let params = self.adapters.expect("adapter set missing");
        let g = self.tape.param(1, params.id(&format!("adapter.{site}.ln.g")));
        let b = self.tape.param(1, params.id(&format!("adapter.{site}.ln.b")));
        let normed = self.tape.layer_norm(x, g, b);
        let z = self.linear(normed, 1, &format!("adapter.{site}.w1"), None);
        let z = self.tape.relu(z);
        let up = self.linear(z, 1, &format!("adapter.{site}.w2"), None);
        self.tape.add(x, up)
    }

    fn embed_tokens(&mut self, tokens: &[TokenId]) -> NodeId {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = self.tape.embed(0, self.model.params.id("embed"), &ids);
        let emb = self
            .tape
            .scale(emb, (self.model.cfg.d_model as f64).sqrt());
        let pe = positional_encoding(tokens.len(), self.model.cfg.d_model);
        let emb = self.tape.add_const(emb, &pe);
        self.maybe_dropout(emb)
    }

    /// Encoder over source tokens with EOS appended. Applies adapters to the
    /// embedding output and every encoder layer output when present.
    pub fn encode(&mut self, x: &[TokenId]) -> Result<NodeId> {
        if x.len() + 1 > self.model.cfg.max_len {
            return Err(Error::Contract(format!(
                "source length {} exceeds max_len {}",
                x.len() + 1,
                self.model.cfg.max_len
            )));
        }
        let mut input = x.to_vec();
        input.push(EOS);
        let mut h = self.embed_tokens(&input);
        let use_adapters = self.adapters.is_some();
        if use_adapters {
            h = self.adapter(h, "emb");
        }
        for i in 0..self.model.cfg.n_enc_layers {
            let normed = self.ln(h, &format!("enc.{i}.ln1"));
            let att = self.attention(normed, normed, &format!("enc.{i}.attn"), None);
            let att = self.maybe_dropout(att);
            let h1 = self.tape.add(h, att);
            let normed = self.ln(h1, &format!("enc.{i}.ln2"));
            let ff = self.feed_forward(normed, &format!("enc.{i}.ff"));
            let ff = self.maybe_dropout(ff);
            h = self.tape.add(h1, ff);
            if use_adapters {
                h = self.adapter(h, &format!("enc{i}"));
            }
        }
        Ok(self.ln(h, "enc.ln_f"))
    }

    /// Decoder over an input prefix (BOS-led) against encoder output.
    /// Returns the final-layer-norm hidden states, one row per position.
    pub fn decode(&mut self, enc: NodeId, y_in: &[TokenId], use_dec_adapters: bool) -> Result<NodeId> {
        if y_in.is_empty() {
            return Err(Error::Contract("empty decoder prefix".into()));
        }
        if y_in.len() > self.model.cfg.max_len {
            return Err(Error::Contract(format!(
                "target length {} exceeds max_len {}",
                y_in.len(),
                self.model.cfg.max_len
            )));
        }
        let mask = Tape::causal_mask(y_in.len());
        let mut h = self.embed_tokens(y_in);
        for i in 0..self.model.cfg.n_dec_layers {
            let normed = self.ln(h, &format!("dec.{i}.ln1"));
            let att = self.attention(normed, normed, &format!("dec.{i}.self_attn"), Some(&mask));
            let att = self.maybe_dropout(att);
            let h1 = self.tape.add(h, att);
            let normed = self.ln(h1, &format!("dec.{i}.ln2"));
            let cross = self.attention(normed, enc, &format!("dec.{i}.cross_attn"), None);
            let cross = self.maybe_dropout(cross);
            let h2 = self.tape.add(h1, cross);
            let normed = self.ln(h2, &format!("dec.{i}.ln3"));
            let ff = self.feed_forward(normed, &format!("dec.{i}.ff"));
            let ff = self.maybe_dropout(ff);
            h = self.tape.add(h2, ff);
            if use_dec_adapters {
                h = self.adapter(h, &format!("dec{i}"));
            }
        }
        Ok(self.ln(h, "dec.ln_f"))
    }

    pub fn logits(&mut self, h: NodeId) -> NodeId {
        let w = self.tape.param(0, self.model.params.id("out_proj"));
        self.tape.matmul(h, w)
    }

    pub fn backward(&self, root: NodeId, seed: f64, sinks: &mut [GradStore]) {
        self.tape.backward(root, seed, sinks);
    }
}

/// Standalone Eq.-4 adapter application on a plain hidden-state matrix,
/// sharing the tape implementation used inside the model.
pub fn adapter_forward(
    h: &Array2<f64>,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    ln_gain: &[f64],
    ln_bias: &[f64],
) -> Result<Array2<f64>> {
    let d = h.ncols();
    if h.nrows() == 0 {
        return Err(Error::Contract("empty adapter input".into()));
    }
    if w1.nrows() != d || w2.ncols() != d || w1.ncols() != w2.nrows() {
        return Err(Error::Dimension {
            expected: d,
            got: w1.nrows(),
        });
    }
    if ln_gain.len() != d || ln_bias.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: ln_gain.len(),
        });
    }
    let mut params = Params::new();
    params.add_matrix("w1", w1.clone());
    params.add_matrix("w2", w2.clone());
    params.add_vector("g", ln_gain.to_vec());
    params.add_vector("b", ln_bias.to_vec());
    let mut tape = Tape::new(vec![&params]);
    let x = tape.constant(h.clone());
    let g = tape.param(0, params.id("g"));
    let b = tape.param(0, params.id("b"));
    let normed = tape.layer_norm(x, g, b);
    let w1n = tape.param(0, params.id("w1"));
    let z = tape.matmul(normed, w1n);
    let z = tape.relu(z);
    let w2n = tape.param(0, params.id("w2"));
    let up = tape.matmul(z, w2n);
    let out = tape.add(x, up);
    Ok(tape.value(out).to_owned())
}
