//! Trainable causal language models with low-rank adapters.
//!
//! Two backends share one parameter layout convention (named `rows x cols`
//! matrices, linear maps applied as `y = W x`):
//!
//! * `Bigram`: a next-token logit table, `logits(t) = table[:, ids[t]]`.
//!   Deterministic and table-driven; used by the oracle tests.
//! * `Tiny`: token + position embeddings, one causal single-head attention
//!   block with a residual connection, a tanh MLP and an output head.
//!
//! The adapter adds `alpha / rank * B A` to any adapted linear weight.
//! Scoring with the adapter disabled gives the frozen reference model.
//! All computation is in f64; parameter values are kept on the f32 grid so
//! they can be written to float32 blobs without loss.

use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

pub type ParamStore = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Bigram {
        max_len: usize,
    },
    Tiny {
        dim: usize,
        hidden: usize,
        max_len: usize,
    },
}

pub const TINY_LINEAR: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.in", "head.out"];
pub const BIGRAM_LINEAR: [&str; 1] = ["table"];

impl Architecture {
    pub fn max_len(&self) -> usize {
        match *self {
            Architecture::Bigram { max_len } | Architecture::Tiny { max_len, .. } => max_len,
        }
    }

    pub fn param_shapes(&self, vocab: usize) -> Vec<(&'static str, (usize, usize))> {
        match *self {
            Architecture::Bigram { .. } => vec![("table", (vocab, vocab))],
            Architecture::Tiny {
                dim,
                hidden,
                max_len,
            } => vec![
                ("embed.tok", (vocab, dim)),
                ("embed.pos", (max_len, dim)),
                ("attn.q", (dim, dim)),
                ("attn.k", (dim, dim)),
                ("attn.v", (dim, dim)),
                ("attn.o", (dim, dim)),
                ("mlp.in", (hidden, dim)),
                ("mlp.in_bias", (1, hidden)),
                ("head.out", (vocab, hidden)),
                ("head.bias", (1, vocab)),
            ],
        }
    }

    /// Weights that may carry a low-rank adapter.
    pub fn linear_params(&self) -> &'static [&'static str] {
        match self {
            Architecture::Bigram { .. } => &BIGRAM_LINEAR,
            Architecture::Tiny { .. } => &TINY_LINEAR,
        }
    }

    /// Default adapter targets: the value projection, the MLP input and the
    /// output head for the tiny model; the whole table for the bigram stub.
    pub fn default_targets(&self) -> Vec<String> {
        match self {
            Architecture::Bigram { .. } => vec!["table".into()],
            Architecture::Tiny { .. } => vec!["attn.v".into(), "mlp.in".into(), "head.out".into()],
        }
    }
}

/// Rounds every entry to the nearest f32.
pub fn snap_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v as f32 as f64);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    /// `rank x cols`
    pub a: Array2<f64>,
    /// `rows x rank`
    pub b: Array2<f64>,
}

impl LoraPair {
    pub fn zeros(rows: usize, cols: usize, rank: usize) -> Self {
        Self {
            a: Array2::zeros((rank, cols)),
            b: Array2::zeros((rows, rank)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.b.nrows(), self.a.ncols())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub rank: usize,
    pub alpha: f64,
    pub pairs: BTreeMap<String, LoraPair>,
}

impl Adapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self, name: &str) -> Option<Array2<f64>> {
        self.pairs
            .get(name)
            .map(|p| p.b.dot(&p.a) * self.scaling())
    }

    pub fn snap_to_f32(&mut self) {
        for p in self.pairs.values_mut() {
            snap_f32(&mut p.a);
            snap_f32(&mut p.b);
        }
    }

    pub fn zero_grads(&self) -> BTreeMap<String, LoraPair> {
        self.pairs
            .iter()
            .map(|(k, p)| (k.clone(), p.zeros_like()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.pairs.values().map(|p| p.a.len() + p.b.len()).sum()
    }
}

/// A base causal LM plus an optional low-rank adapter.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    base_id: String,
    arch: Architecture,
    tokenizer: Tokenizer,
    base: ParamStore,
    adapter: Option<Adapter>,
    trainable: bool,
}

impl ModelHandle {
    pub fn from_parts(
        base_id: impl Into<String>,
        arch: Architecture,
        tokenizer: Tokenizer,
        base: ParamStore,
    ) -> Result<Self> {
        let vocab = tokenizer.vocab_size();
        let shapes = arch.param_shapes(vocab);
        let mut bad = Vec::new();
        for (name, shape) in &shapes {
            match base.get(*name) {
                Some(m) if m.dim() == *shape => {}
                Some(m) => bad.push(format!("{name}: expected {shape:?}, found {:?}", m.dim())),
                None => bad.push(format!("{name}: missing")),
            }
        }
        for name in base.keys() {
            if !shapes.iter().any(|(n, _)| n == name) {
                bad.push(format!("{name}: unexpected parameter"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::ShapeMismatch(bad));
        }
        Ok(Self {
            base_id: base_id.into(),
            arch,
            tokenizer,
            base,
            adapter: None,
            trainable: false,
        })
    }

    /// Bigram table model; `table[next, prev]` holds the logit of `next`
    /// following `prev`.
    pub fn bigram(base_id: impl Into<String>, tokenizer: Tokenizer, table: Array2<f64>, max_len: usize) -> Result<Self> {
        let mut table = table;
        snap_f32(&mut table);
        let mut base = ParamStore::new();
        base.insert("table".into(), table);
        Self::from_parts(base_id, Architecture::Bigram { max_len }, tokenizer, base)
    }

    /// All-zero logit table: every next token is equally likely.
    pub fn uniform_bigram(base_id: impl Into<String>, tokenizer: Tokenizer, max_len: usize) -> Self {
        let v = tokenizer.vocab_size();
        Self::bigram(base_id, tokenizer, Array2::zeros((v, v)), max_len).expect("shapes are consistent")
    }

    pub fn tiny(
        base_id: impl Into<String>,
        tokenizer: Tokenizer,
        dim: usize,
        hidden: usize,
        max_len: usize,
        seed: u64,
    ) -> Self {
        let arch = Architecture::Tiny {
            dim,
            hidden,
            max_len,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = ParamStore::new();
        for (name, (rows, cols)) in arch.param_shapes(tokenizer.vocab_size()) {
            let bound = match name {
                "mlp.in_bias" | "head.bias" => 0.0,
                "embed.tok" | "embed.pos" => 0.5,
                _ => 1.0 / (cols as f64).sqrt(),
            };
            let mut m = Array2::from_shape_fn((rows, cols), |_| {
                if bound == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-bound..bound)
                }
            });
            snap_f32(&mut m);
            base.insert(name.to_string(), m);
        }
        Self::from_parts(base_id, arch, tokenizer, base).expect("shapes are consistent")
    }

    pub fn base_id(&self) -> &str {
        &self.base_id
    }

    pub fn set_base_id(&mut self, id: impl Into<String>) {
        self.base_id = id.into();
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn context_window(&self) -> usize {
        self.arch.max_len()
    }

    pub fn base_params(&self) -> &ParamStore {
        &self.base
    }

    /// Mutable base weights, used by pretraining and by tests that build
    /// perturbed siblings. Values are re-snapped by callers that persist them.
    pub fn base_params_mut(&mut self) -> &mut ParamStore {
        &mut self.base
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut Adapter> {
        self.adapter.as_mut()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Attaches a fresh adapter: `A` uniform in `±1/sqrt(cols)`, `B` zero, so
    /// the adapted model starts identical to the base.
    pub fn attach_adapter(&mut self, cfg: &AdapterConfig, seed: u64) -> Result<()> {
        if cfg.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = BTreeMap::new();
        let mut bad = Vec::new();
        for t in &cfg.targets {
            if !self.arch.linear_params().contains(&t.as_str()) {
                bad.push(format!("{t}: not an adaptable linear weight"));
                continue;
            }
            let (rows, cols) = self.base[t.as_str()].dim();
            let bound = 1.0 / (cols as f64).sqrt();
            let mut p = LoraPair::zeros(rows, cols, cfg.rank);
            p.a.mapv_inplace(|_| rng.gen_range(-bound..bound));
            pairs.insert(t.clone(), p);
        }
        if !bad.is_empty() {
            return Err(Error::ShapeMismatch(bad));
        }
        let mut adapter = Adapter {
            rank: cfg.rank,
            alpha: cfg.alpha,
            pairs,
        };
        adapter.snap_to_f32();
        self.adapter = Some(adapter);
        self.trainable = true;
        Ok(())
    }

    /// Replaces the adapter after checking every matrix against the base
    /// shapes.
    pub fn set_adapter(&mut self, adapter: Adapter) -> Result<()> {
        self.check_adapter(&adapter)?;
        self.adapter = Some(adapter);
        self.trainable = true;
        Ok(())
    }

    pub fn check_adapter(&self, adapter: &Adapter) -> Result<()> {
        let mut bad = Vec::new();
        if adapter.rank == 0 {
            bad.push("rank must be at least 1".to_string());
        }
        for (name, p) in &adapter.pairs {
            if !self.arch.linear_params().contains(&name.as_str()) {
                bad.push(format!("{name}: no such adaptable weight"));
                continue;
            }
            let (rows, cols) = self.base[name.as_str()].dim();
            if p.a.dim() != (adapter.rank, cols) || p.b.dim() != (rows, adapter.rank) {
                bad.push(format!(
                    "{name}: adapter A {:?} / B {:?} do not fit base {rows}x{cols} at rank {}",
                    p.a.dim(),
                    p.b.dim(),
                    adapter.rank
                ));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(bad))
        }
    }

    pub fn detach_adapter(&mut self) -> Option<Adapter> {
        self.trainable = false;
        self.adapter.take()
    }

    /// Effective weights for one scoring mode.
    pub fn weights(&self, use_adapter: bool) -> Weights<'_> {
        let mut merged = BTreeMap::new();
        if use_adapter {
            if let Some(ad) = &self.adapter {
                for name in ad.pairs.keys() {
                    let delta = ad.delta(name).expect("pair exists");
                    merged.insert(name.clone(), &self.base[name.as_str()] + &delta);
                }
            }
        }
        Weights {
            model: self,
            merged,
            use_adapter: use_adapter && self.adapter.is_some(),
        }
    }

    pub fn forward(&self, ids: &[u32], use_adapter: bool) -> Result<Forward> {
        self.weights(use_adapter).forward(ids)
    }

    /// Copy whose base weights carry seeded uniform noise of the given
    /// relative scale; stands in for an architecture-identical fine-tuned
    /// sibling. The adapter is dropped.
    pub fn perturbed_sibling(&self, base_id: impl Into<String>, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = self.base.clone();
        for m in base.values_mut() {
            let rms = (m.iter().map(|v| v * v).sum::<f64>() / m.len().max(1) as f64).sqrt();
            let amp = scale * rms.max(1e-3);
            m.mapv_inplace(|v| v + rng.gen_range(-amp..amp));
            snap_f32(m);
        }
        Self {
            base_id: base_id.into(),
            arch: self.arch,
            tokenizer: self.tokenizer.clone(),
            base,
            adapter: None,
            trainable: false,
        }
    }
}

/// Gradient accumulators. `base` collects full-weight gradients (used for
/// pretraining); `adapter` collects low-rank factor gradients.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub base: Option<ParamStore>,
    pub adapter: Option<BTreeMap<String, LoraPair>>,
}

impl Gradients {
    pub fn for_adapter(model: &ModelHandle) -> Self {
        Self {
            base: None,
            adapter: model.adapter().map(Adapter::zero_grads),
        }
    }

    pub fn for_base(model: &ModelHandle) -> Self {
        Self {
            base: Some(
                model
                    .base_params()
                    .iter()
                    .map(|(k, m)| (k.clone(), Array2::zeros(m.raw_dim())))
                    .collect(),
            ),
            adapter: None,
        }
    }

    pub fn scale(&mut self, s: f64) {
        if let Some(b) = &mut self.base {
            b.values_mut().for_each(|m| *m *= s);
        }
        if let Some(a) = &mut self.adapter {
            for p in a.values_mut() {
                p.a *= s;
                p.b *= s;
            }
        }
    }
}

enum Cache {
    Bigram,
    Tiny {
        x: Array2<f64>,
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        att: Array2<f64>,
        o: Array2<f64>,
        r: Array2<f64>,
        h: Array2<f64>,
    },
}

/// Logits for every position of a sequence plus the activations the
/// backward pass needs. Row `t` predicts token `t + 1`.
pub struct Forward {
    pub ids: Vec<u32>,
    pub logits: Array2<f64>,
    use_adapter: bool,
    cache: Cache,
}

impl Forward {
    pub fn used_adapter(&self) -> bool {
        self.use_adapter
    }
}

pub struct Weights<'m> {
    model: &'m ModelHandle,
    merged: BTreeMap<String, Array2<f64>>,
    use_adapter: bool,
}

impl<'m> Weights<'m> {
    pub fn model(&self) -> &'m ModelHandle {
        self.model
    }

    fn get(&self, name: &str) -> &Array2<f64> {
        self.merged
            .get(name)
            .unwrap_or_else(|| &self.model.base[name])
    }

    pub fn validate(&self, ids: &[u32]) -> Result<()> {
        let window = self.model.context_window();
        if ids.len() > window {
            return Err(Error::ContextWindow {
                len: ids.len(),
                window,
            });
        }
        let vocab = self.model.vocab_size();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        Ok(())
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Forward> {
        self.validate(ids)?;
        let t_len = ids.len();
        match self.model.arch {
            Architecture::Bigram { .. } => {
                let table = self.get("table");
                let mut logits = Array2::zeros((t_len, table.nrows()));
                for (t, &id) in ids.iter().enumerate() {
                    logits.row_mut(t).assign(&table.column(id as usize));
                }
                Ok(Forward {
                    ids: ids.to_vec(),
                    logits,
                    use_adapter: self.use_adapter,
                    cache: Cache::Bigram,
                })
            }
            Architecture::Tiny { dim, .. } => {
                let emb = self.get("embed.tok");
                let pos = self.get("embed.pos");
                let mut x = Array2::zeros((t_len, dim));
                for (t, &id) in ids.iter().enumerate() {
                    let mut row = x.row_mut(t);
                    row.assign(&emb.row(id as usize));
                    row += &pos.row(t);
                }
                let q = x.dot(&self.get("attn.q").t());
                let k = x.dot(&self.get("attn.k").t());
                let v = x.dot(&self.get("attn.v").t());
                let scale = 1.0 / (dim as f64).sqrt();
                let mut att = q.dot(&k.t()) * scale;
                for t in 0..t_len {
                    let mut row = att.row_mut(t);
                    let max = row
                        .iter()
                        .take(t + 1)
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in 0..t_len {
                        if s <= t {
                            let e = (row[s] - max).exp();
                            row[s] = e;
                            z += e;
                        } else {
                            row[s] = 0.0;
                        }
                    }
                    row /= z;
                }
                let o = att.dot(&v);
                let r = &x + &o.dot(&self.get("attn.o").t());
                let mut h = r.dot(&self.get("mlp.in").t()) + self.get("mlp.in_bias").row(0);
                h.mapv_inplace(f64::tanh);
                let logits = h.dot(&self.get("head.out").t()) + self.get("head.bias").row(0);
                Ok(Forward {
                    ids: ids.to_vec(),
                    logits,
                    use_adapter: self.use_adapter,
                    cache: Cache::Tiny {
                        x,
                        q,
                        k,
                        v,
                        att,
                        o,
                        r,
                        h,
                    },
                })
            }
        }
    }

    /// Accumulates `dL/dparams` given `dL/dlogits` for every position.
    ///
    /// Adapter gradients flow only through adapter-enabled forwards; a
    /// reference forward contributes nothing to them.
    pub fn backward(&self, fwd: &Forward, dlogits: &Array2<f64>, grads: &mut Gradients) {
        assert_eq!(fwd.logits.dim(), dlogits.dim(), "dlogits shape");
        assert_eq!(fwd.use_adapter, self.use_adapter, "forward/backward mode");
        let mut emit = |name: &str, dw: Cow<'_, Array2<f64>>| self.accumulate(name, &dw, grads);
        match (&self.model.arch, &fwd.cache) {
            (Architecture::Bigram { .. }, Cache::Bigram) => {
                let table = self.get("table");
                let mut dw = Array2::zeros(table.raw_dim());
                for (t, &id) in fwd.ids.iter().enumerate() {
                    let mut col = dw.column_mut(id as usize);
                    col += &dlogits.row(t);
                }
                emit("table", Cow::Owned(dw));
            }
            (
                Architecture::Tiny { dim, .. },
                Cache::Tiny {
                    x,
                    q,
                    k,
                    v,
                    att,
                    o,
                    r,
                    h,
                },
            ) => {
                let g = dlogits;
                emit("head.out", Cow::Owned(g.t().dot(h)));
                emit("head.bias", Cow::Owned(g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                let dh = g.dot(self.get("head.out"));
                let dpre = dh * &h.mapv(|y| 1.0 - y * y);
                emit("mlp.in", Cow::Owned(dpre.t().dot(r)));
                emit("mlp.in_bias", Cow::Owned(dpre.sum_axis(Axis(0)).insert_axis(Axis(0))));
                let dr = dpre.dot(self.get("mlp.in"));
                let mut dx = dr.clone();
                emit("attn.o", Cow::Owned(dr.t().dot(o)));
                let d_o = dr.dot(self.get("attn.o"));
                let datt = d_o.dot(&v.t());
                let dv = att.t().dot(&d_o);
                let mut ds = att * &datt;
                let rowdot = ds.sum_axis(Axis(1));
                for (mut row, (a_row, c)) in ds
                    .rows_mut()
                    .into_iter()
                    .zip(att.rows().into_iter().zip(rowdot.iter()))
                {
                    row.zip_mut_with(&a_row, |d, &a| *d -= a * c);
                }
                let scale = 1.0 / (*dim as f64).sqrt();
                ds *= scale;
                let dq = ds.dot(k);
                let dk = ds.t().dot(q);
                emit("attn.q", Cow::Owned(dq.t().dot(x)));
                emit("attn.k", Cow::Owned(dk.t().dot(x)));
                emit("attn.v", Cow::Owned(dv.t().dot(x)));
                dx += &dq.dot(self.get("attn.q"));
                dx += &dk.dot(self.get("attn.k"));
                dx += &dv.dot(self.get("attn.v"));
                if let Some(base) = grads.base.as_mut() {
                    let de = base.get_mut("embed.tok").expect("embed.tok grad");
                    for (t, &id) in fwd.ids.iter().enumerate() {
                        let mut row = de.row_mut(id as usize);
                        row += &dx.row(t);
                    }
                    let dp = base.get_mut("embed.pos").expect("embed.pos grad");
                    for t in 0..fwd.ids.len() {
                        let mut row = dp.row_mut(t);
                        row += &dx.row(t);
                    }
                }
            }
            _ => unreachable!("cache kind matches architecture"),
        }
    }

    fn accumulate(&self, name: &str, dw: &Array2<f64>, grads: &mut Gradients) {
        if let Some(base) = grads.base.as_mut() {
            *base.get_mut(name).expect("base grad slot") += dw;
        }
        if !self.use_adapter {
            return;
        }
        if let (Some(ad), Some(ag)) = (self.model.adapter.as_ref(), grads.adapter.as_mut()) {
            if let (Some(p), Some(gp)) = (ad.pairs.get(name), ag.get_mut(name)) {
                let s = ad.scaling();
                gp.b.scaled_add(s, &dw.dot(&p.a.t()));
                gp.a.scaled_add(s, &p.b.t().dot(dw));
            }
        }
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
