//! Transformer encoder classifier over slice-feature sequences, plus the
//! pooled dense baselines.
//!
//! Sequence path: positional embedding add, pre-norm encoder blocks with
//! padding-masked multi-head self-attention, masked global pooling, a
//! 32-unit ReLU dense layer and a 2-way output. Class order is
//! `[benign, malignant]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{branch, Tape, Var};
use crate::data::SequenceFeatureMap;
use crate::error::{dim_err, Error, Result};
use crate::layers::{
    batch_norm_eval, batch_norm_train, dense, dropout, global_avg_pool, global_max_pool, layer_norm,
};
use crate::params::{Bound, ParamStore};
use crate::rng::{normal_tensor, stream, Rng};
use crate::tensor::{gemm, softmax, Element, Tensor};

/// Score given to masked keys before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Gmp,
    Gap,
    /// Zero the padded rows and flatten the whole `(slots, d)` map.
    Concat,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmp" => Ok(Self::Gmp),
            "gap" => Ok(Self::Gap),
            "concat" => Ok(Self::Concat),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (expected gmp, gap or concat)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    /// Trainable table, seeded normal init with std 0.02.
    Learned,
    /// Fixed sine/cosine table.
    Sinusoidal,
}

/// How padded sequences are fed through the encoder blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Run all slots and mask padded keys in attention and pooling.
    Masked,
    /// Run only the valid prefix. Produces the same outputs as `Masked`
    /// because no valid row ever reads a padded one.
    #[default]
    Trim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub head_hidden: usize,
    pub classes: usize,
    /// Dropout on the attention and MLP residual branches.
    pub residual_dropout: f64,
    /// Dropout on the pooled vector before the head.
    pub head_dropout: f64,
    pub pooling: Pooling,
    pub positional: PositionalEncoding,
    pub ln_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_k: 128,
            d_v: 128,
            heads: 5,
            blocks: 3,
            mlp_hidden: 512,
            max_len: 25,
            head_hidden: 32,
            classes: 2,
            residual_dropout: 0.1,
            head_dropout: 0.1,
            pooling: Pooling::Gmp,
            positional: PositionalEncoding::Learned,
            ln_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.d_k,
            self.d_v,
            self.heads,
            self.blocks,
            self.mlp_hidden,
            self.max_len,
            self.head_hidden,
        ];
        if dims.contains(&0) || self.classes < 2 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        for rate in [self.residual_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
            }
        }
        Ok(())
    }

    fn pooled_dim(&self) -> usize {
        match self.pooling {
            Pooling::Concat => self.max_len * self.d_model,
            _ => self.d_model,
        }
    }
}

fn mask_bias<T: Element>(mask: &[bool]) -> Tensor<T> {
    Tensor::from_fn([mask.len()], |i| T::from_f64(if mask[i] { 0.0 } else { MASKED_SCORE }))
}

fn check_attention_mask(keys: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != keys {
        return Err(dim_err!("attention mask of length {} for {keys} keys", mask.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("attention mask has no valid key".into()));
    }
    Ok(())
}

/// `softmax(QKᵀ/√d_k)` with masked keys given weight zero; `[Lq, Lk]`.
pub fn attention_weights<'t, T: Element>(q: Var<'t, T>, k: Var<'t, T>, mask: &[bool]) -> Result<Var<'t, T>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(dim_err!("attention of Q {qs:?} and K {ks:?}"));
    }
    check_attention_mask(ks[0], mask)?;
    let scale = T::from_f64(1.0 / (ks[1] as f64).sqrt());
    let mut scores = q.matmul_t(k)?.scale(scale);
    if mask.iter().any(|&m| !m) {
        scores = scores.add_row(q.tape().constant(mask_bias(mask)))?;
    }
    scores.softmax(1)
}

pub fn scaled_dot_product_attention<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: &[bool],
) -> Result<Var<'t, T>> {
    if v.shape().first() != k.shape().first() {
        return Err(dim_err!("attention keys {:?} vs values {:?}", k.shape(), v.shape()));
    }
    attention_weights(q, k, mask)?.matmul(v)
}

/// Projection matrices of one attention layer, applied as `X·W`.
pub struct AttentionVars<'t, T: Element> {
    pub wq: Vec<Var<'t, T>>,
    pub wk: Vec<Var<'t, T>>,
    pub wv: Vec<Var<'t, T>>,
    pub wo: Var<'t, T>,
}

impl<'t, T: Element> AttentionVars<'t, T> {
    fn check(&self, d_model: usize) -> Result<()> {
        let h = self.wq.len();
        if h == 0 || self.wk.len() != h || self.wv.len() != h {
            return Err(Error::Config("attention needs the same positive number of Q, K and V projections".into()));
        }
        let dk = self.wq[0].shape();
        let dv = self.wv[0].shape();
        for (w, want) in self.wq.iter().chain(&self.wk).map(|w| (w, &dk)).chain(self.wv.iter().map(|w| (w, &dv))) {
            if w.shape() != *want || want.len() != 2 || want[0] != d_model {
                return Err(Error::Config(format!("attention projection {:?} (expected [{d_model}, _])", w.shape())));
            }
        }
        if self.wo.shape() != [h * dv[1], d_model] {
            return Err(Error::Config(format!(
                "output projection {:?}, expected [{}, {d_model}]",
                self.wo.shape(),
                h * dv[1]
            )));
        }
        Ok(())
    }
}

/// Self-attention: every head attends with its own projections, heads are
/// concatenated and projected back to the model width.
pub fn multi_head_attention<'t, T: Element>(
    x: Var<'t, T>,
    vars: &AttentionVars<'t, T>,
    mask: &[bool],
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(dim_err!("attention input must be [L, d], got {shape:?}"));
    }
    let seg = Segment {
        start: 0,
        mask: mask.to_vec(),
    };
    check_attention_mask(shape[0], mask)?;
    stacked_attention(x, vars, std::slice::from_ref(&seg))
}

/// Rows `start..start + mask.len()` of a row-stacked batch form one
/// sequence.
#[derive(Clone, Debug)]
struct Segment {
    start: usize,
    mask: Vec<bool>,
}

/// Self-attention within each segment of row-stacked `q`, `k`, `v`, as
/// one node. Equals [`scaled_dot_product_attention`] applied segment by
/// segment; masked keys get weight exactly zero.
fn segmented_attention<'t, T: Element>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, segments: &[Segment]) -> Result<Var<'t, T>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (n, dk) = qv.dims2()?;
    let (nk, dk2) = kv.dims2()?;
    let (nv, dv) = vv.dims2()?;
    let covered: usize = segments.iter().map(|s| s.mask.len()).sum();
    if nk != n || nv != n || dk2 != dk || covered != n {
        return Err(dim_err!("segmented attention of Q {:?}, K {:?}, V {:?}", qv.shape(), kv.shape(), vv.shape()));
    }
    for seg in segments {
        check_attention_mask(seg.mask.len(), &seg.mask)?;
    }
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut out = vec![T::zero(); n * dv];
    let mut probs = Vec::with_capacity(segments.len());
    for seg in segments {
        let (s, l) = (seg.start, seg.mask.len());
        let mut p = vec![T::zero(); l * l];
        gemm(false, true, l, dk, l, &qv.data()[s * dk..(s + l) * dk], &kv.data()[s * dk..(s + l) * dk], T::zero(), &mut p);
        for row in p.chunks_mut(l) {
            let max = row
                .iter()
                .zip(&seg.mask)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (x, &m) in row.iter_mut().zip(&seg.mask) {
                *x = if m { ((*x - max) * scale).exp() } else { T::zero() };
                total += *x;
            }
            row.iter_mut().for_each(|x| *x = *x / total);
        }
        gemm(false, false, l, l, dv, &p, &vv.data()[s * dv..(s + l) * dv], T::zero(), &mut out[s * dv..(s + l) * dv]);
        probs.push(p);
    }
    let spans: Vec<(usize, usize)> = segments.iter().map(|s| (s.start, s.mask.len())).collect();
    Ok(q.tape().push(Tensor::from_parts(vec![n, dv], out), &[q, k, v], move |g, needs| {
        let gd = g.data();
        let mut dq = vec![T::zero(); n * dk];
        let mut dkk = vec![T::zero(); n * dk];
        let mut dvv = vec![T::zero(); n * dv];
        for (&(s, l), p) in spans.iter().zip(&probs) {
            let gs = &gd[s * dv..(s + l) * dv];
            if needs[2] {
                gemm(true, false, l, l, dv, p, gs, T::zero(), &mut dvv[s * dv..(s + l) * dv]);
            }
            if !(needs[0] || needs[1]) {
                continue;
            }
            let mut ds = vec![T::zero(); l * l];
            gemm(false, true, l, dv, l, gs, &vv.data()[s * dv..(s + l) * dv], T::zero(), &mut ds);
            for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                let dot: T = drow.iter().zip(prow).map(|(&d, &pv)| d * pv).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            if needs[0] {
                gemm(false, false, l, l, dk, &ds, &kv.data()[s * dk..(s + l) * dk], T::zero(), &mut dq[s * dk..(s + l) * dk]);
            }
            if needs[1] {
                gemm(true, false, l, l, dk, &ds, &qv.data()[s * dk..(s + l) * dk], T::zero(), &mut dkk[s * dk..(s + l) * dk]);
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(vec![n, dk], dq)),
            needs[1].then(|| Tensor::from_parts(vec![n, dk], dkk)),
            needs[2].then(|| Tensor::from_parts(vec![n, dv], dvv)),
        ]
    }))
}

/// Pools each segment of a row-stacked `[N, d]` matrix into one row of
/// the `[segments, width]` result. Concatenation zeroes masked rows and
/// pads every segment to `slots` rows before flattening.
fn segmented_pool<'t, T: Element>(x: Var<'t, T>, segments: &[Segment], pooling: Pooling, slots: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, d) = xv.dims2()?;
    for seg in segments {
        check_attention_mask(seg.mask.len(), &seg.mask)?;
        if seg.mask.len() > slots {
            return Err(dim_err!("segment of {} rows exceeds {slots} slots", seg.mask.len()));
        }
    }
    let src = xv.data();
    let b = segments.len();
    let width = if pooling == Pooling::Concat { slots * d } else { d };
    let mut out = vec![T::zero(); b * width];
    // source row feeding each output element, and the weight it carries
    let mut taps: Vec<(u32, T)> = Vec::new();
    match pooling {
        Pooling::Gmp => {
            let argmax = branch::choices(|| {
                let mut picks = Vec::with_capacity(b * d);
                for seg in segments {
                    let first = seg.mask.iter().position(|&m| m).expect("checked");
                    for j in 0..d {
                        let mut best = first;
                        for (r, &m) in seg.mask.iter().enumerate() {
                            if m && src[(seg.start + r) * d + j] > src[(seg.start + best) * d + j] {
                                best = r;
                            }
                        }
                        picks.push((seg.start + best) as u32);
                    }
                }
                picks
            });
            for (i, &r) in argmax.iter().enumerate() {
                out[i] = src[r as usize * d + i % d];
            }
            taps = argmax.into_iter().map(|r| (r, T::one())).collect();
        }
        Pooling::Gap => {
            for (bi, seg) in segments.iter().enumerate() {
                let inv = T::one() / T::from_f64(seg.mask.iter().filter(|&&m| m).count() as f64);
                for (r, &m) in seg.mask.iter().enumerate() {
                    if m {
                        let row = &src[(seg.start + r) * d..(seg.start + r + 1) * d];
                        for (o, &v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                            *o += v * inv;
                        }
                    }
                }
            }
        }
        Pooling::Concat => {
            for (bi, seg) in segments.iter().enumerate() {
                for (r, &m) in seg.mask.iter().enumerate() {
                    if m {
                        let dst = bi * width + r * d;
                        out[dst..dst + d].copy_from_slice(&src[(seg.start + r) * d..(seg.start + r + 1) * d]);
                    }
                }
            }
        }
    }
    let segs = segments.to_vec();
    Ok(x.tape().push(Tensor::from_parts(vec![b, width], out), &[x], move |g, _| {
        let gd = g.data();
        let mut dx = vec![T::zero(); n * d];
        match pooling {
            Pooling::Gmp => {
                for (i, &(r, _)) in taps.iter().enumerate() {
                    dx[r as usize * d + i % d] += gd[i];
                }
            }
            Pooling::Gap => {
                for (bi, seg) in segs.iter().enumerate() {
                    let inv = T::one() / T::from_f64(seg.mask.iter().filter(|&&m| m).count() as f64);
                    for (r, &m) in seg.mask.iter().enumerate() {
                        if m {
                            let row = &mut dx[(seg.start + r) * d..(seg.start + r + 1) * d];
                            for (o, &gv) in row.iter_mut().zip(&gd[bi * d..(bi + 1) * d]) {
                                *o += gv * inv;
                            }
                        }
                    }
                }
            }
            Pooling::Concat => {
                for (bi, seg) in segs.iter().enumerate() {
                    for (r, &m) in seg.mask.iter().enumerate() {
                        if m {
                            let src = bi * width + r * d;
                            dx[(seg.start + r) * d..(seg.start + r + 1) * d].copy_from_slice(&gd[src..src + d]);
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![n, d], dx))]
    }))
}

/// Attention over several sequences stacked along the rows. Projections
/// run once on the whole stack; attention stays within each segment.
fn stacked_attention<'t, T: Element>(x: Var<'t, T>, vars: &AttentionVars<'t, T>, segments: &[Segment]) -> Result<Var<'t, T>> {
    vars.check(x.shape()[1])?;
    let heads = (0..vars.wq.len())
        .map(|h| segmented_attention(x.matmul(vars.wq[h])?, x.matmul(vars.wk[h])?, x.matmul(vars.wv[h])?, segments))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_cols(&heads)?.matmul(vars.wo)
}

/// Parameters of one pre-norm encoder block, bound to a tape.
pub struct BlockVars<'t, T: Element> {
    pub ln1: (Var<'t, T>, Var<'t, T>),
    pub attention: AttentionVars<'t, T>,
    pub ln2: (Var<'t, T>, Var<'t, T>),
    pub fc1: (Var<'t, T>, Var<'t, T>),
    pub fc2: (Var<'t, T>, Var<'t, T>),
}

impl<'t, T: Element> BlockVars<'t, T> {
    pub fn bind(bound: &Bound<'t, T>, prefix: &str, heads: usize) -> Result<Self> {
        let v = |s: &str| bound.var(&format!("{prefix}.{s}"));
        let per_head = |s: &str| (0..heads).map(|h| v(&format!("attn.{s}{h}"))).collect::<Result<Vec<_>>>();
        Ok(Self {
            ln1: (v("ln1.gamma")?, v("ln1.beta")?),
            attention: AttentionVars {
                wq: per_head("wq")?,
                wk: per_head("wk")?,
                wv: per_head("wv")?,
                wo: v("attn.wo")?,
            },
            ln2: (v("ln2.gamma")?, v("ln2.beta")?),
            fc1: (v("mlp.fc1.weight")?, v("mlp.fc1.bias")?),
            fc2: (v("mlp.fc2.weight")?, v("mlp.fc2.bias")?),
        })
    }
}

/// Dropout settings for one forward pass; `rng == None` disables dropout.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut Rng>,
}

impl DropoutCtx<'_> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    fn apply<'t, T: Element>(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.rng.as_deref_mut() {
            Some(rng) => dropout(x, self.rate, true, rng),
            None => Ok(x),
        }
    }
}

/// `Y = X + Dropout(MHA(LN(X)))`, `Z = Y + Dropout(MLP(LN(Y)))`.
pub fn encoder_block<'t, T: Element>(
    x: Var<'t, T>,
    vars: &BlockVars<'t, T>,
    mask: &[bool],
    ln_eps: f64,
    drop: &mut DropoutCtx<'_>,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(dim_err!("encoder block input must be [L, d], got {shape:?}"));
    }
    check_attention_mask(shape[0], mask)?;
    let seg = Segment {
        start: 0,
        mask: mask.to_vec(),
    };
    stacked_block(x, vars, std::slice::from_ref(&seg), ln_eps, drop)
}

fn stacked_block<'t, T: Element>(
    x: Var<'t, T>,
    vars: &BlockVars<'t, T>,
    segments: &[Segment],
    ln_eps: f64,
    drop: &mut DropoutCtx<'_>,
) -> Result<Var<'t, T>> {
    let eps = T::from_f64(ln_eps);
    let h = layer_norm(x, vars.ln1.0, vars.ln1.1, eps)?;
    let y = x.add(drop.apply(stacked_attention(h, &vars.attention, segments)?)?)?;
    let h = layer_norm(y, vars.ln2.0, vars.ln2.1, eps)?;
    let m = dense(dense(h, vars.fc1.0, vars.fc1.1)?.gelu(), vars.fc2.0, vars.fc2.1)?;
    y.add(drop.apply(m)?)
}

pub fn sinusoidal_table<T: Element>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn([len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((2 * (j / 2)) as f64) / d as f64);
        T::from_f64(if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

fn insert_dense<T: Element>(params: &mut ParamStore<T>, name: &str, inp: usize, out: usize, gain: f64, rng: &mut Rng) -> Result<()> {
    let std = (gain / inp as f64).sqrt();
    params.insert(format!("{name}.weight"), normal_tensor(&[out, inp], std, rng), true)?;
    params.insert(format!("{name}.bias"), Tensor::zeros([out]), true)
}

fn check_sequence<T: Element>(seq: &SequenceFeatureMap<T>, d_model: usize, max_len: usize) -> Result<()> {
    let shape = seq.features.shape();
    if shape.len() != 2 || shape[1] != d_model || shape[0] > max_len {
        return Err(dim_err!("sequence {shape:?} does not fit (≤{max_len}, {d_model})"));
    }
    if seq.valid_len == 0 {
        return Err(Error::Contract("sequence has no valid slice".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerClassifier<T: Element = f32> {
    pub config: TransformerConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> TransformerClassifier<T> {
    pub fn build(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "transformer.init");
        let c = &config;
        let mut params = ParamStore::new();
        match c.positional {
            PositionalEncoding::Learned => params.insert("pe", normal_tensor(&[c.max_len, c.d_model], 0.02, &mut rng), true)?,
            PositionalEncoding::Sinusoidal => params.insert("pe", sinusoidal_table(c.max_len, c.d_model), false)?,
        }
        let proj_std = |inp: usize| (1.0 / inp as f64).sqrt();
        for b in 0..c.blocks {
            let p = format!("block{b}");
            params.insert(format!("{p}.ln1.gamma"), Tensor::ones([c.d_model]), true)?;
            params.insert(format!("{p}.ln1.beta"), Tensor::zeros([c.d_model]), true)?;
            for (kind, width) in [("wq", c.d_k), ("wk", c.d_k), ("wv", c.d_v)] {
                for h in 0..c.heads {
                    let w = normal_tensor(&[c.d_model, width], proj_std(c.d_model), &mut rng);
                    params.insert(format!("{p}.attn.{kind}{h}"), w, true)?;
                }
            }
            let wo = normal_tensor(&[c.heads * c.d_v, c.d_model], proj_std(c.heads * c.d_v), &mut rng);
            params.insert(format!("{p}.attn.wo"), wo, true)?;
            params.insert(format!("{p}.ln2.gamma"), Tensor::ones([c.d_model]), true)?;
            params.insert(format!("{p}.ln2.beta"), Tensor::zeros([c.d_model]), true)?;
            insert_dense(&mut params, &format!("{p}.mlp.fc1"), c.d_model, c.mlp_hidden, 2.0, &mut rng)?;
            insert_dense(&mut params, &format!("{p}.mlp.fc2"), c.mlp_hidden, c.d_model, 1.0, &mut rng)?;
        }
        insert_dense(&mut params, "head.fc1", c.pooled_dim(), c.head_hidden, 2.0, &mut rng)?;
        insert_dense(&mut params, "head.fc2", c.head_hidden, c.classes, 1.0, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Logits `[classes]` for one sequence.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, T>,
        seq: &SequenceFeatureMap<T>,
        mode: PadMode,
        rng: Option<&mut Rng>,
    ) -> Result<Var<'t, T>> {
        self.forward_many(bound, &[seq], mode, rng)?.reshape([self.config.classes])
    }

    /// Logits `[batch, classes]`. The sequences are stacked along the rows
    /// so that the dense parts of every block run as one product.
    pub fn forward_many<'t>(
        &self,
        bound: &Bound<'t, T>,
        seqs: &[&SequenceFeatureMap<T>],
        mode: PadMode,
        rng: Option<&mut Rng>,
    ) -> Result<Var<'t, T>> {
        let c = &self.config;
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let pe = bound.var("pe")?;
        let tape = pe.tape();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut inputs = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for seq in seqs {
            check_sequence(seq, c.d_model, c.max_len)?;
            let (rows, mask) = match mode {
                PadMode::Masked => (seq.slots(), seq.mask.clone()),
                PadMode::Trim => (seq.valid_len, vec![true; seq.valid_len]),
            };
            let input = tape.constant(seq.features.slice_rows(0, rows)?);
            inputs.push(input.add(pe.slice_rows(0, rows)?)?);
            segments.push(Segment { start, mask });
            start += rows;
        }
        let mut x = if inputs.len() == 1 { inputs[0] } else { Var::concat_rows(&inputs)? };
        let mut rng = rng;
        for b in 0..c.blocks {
            let vars = BlockVars::bind(bound, &format!("block{b}"), c.heads)?;
            let mut drop = DropoutCtx {
                rate: c.residual_dropout,
                rng: rng.as_deref_mut(),
            };
            x = stacked_block(x, &vars, &segments, c.ln_eps, &mut drop)?;
        }
        let pooled = segmented_pool(x, &segments, c.pooling, c.max_len)?;
        let mut drop = DropoutCtx {
            rate: c.head_dropout,
            rng,
        };
        let pooled = drop.apply(pooled)?;
        let h = dense(pooled, bound.var("head.fc1.weight")?, bound.var("head.fc1.bias")?)?.relu();
        dense(h, bound.var("head.fc2.weight")?, bound.var("head.fc2.bias")?)
    }

    pub fn logits(&self, seq: &SequenceFeatureMap<T>, mode: PadMode) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        Ok(self.forward(&bound, seq, mode, None)?.value())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselinePool {
    Gmp,
    Gap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub d_model: usize,
    pub max_len: usize,
    /// Widths of the dense stack; the last entry is the class count.
    pub widths: Vec<usize>,
    pub pool: BaselinePool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl BaselineConfig {
    pub fn new(pool: BaselinePool) -> Self {
        Self {
            d_model: 256,
            max_len: 25,
            widths: vec![128, 128, 32, 2],
            pool,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Pooled CAE features through dense layers with batch normalization and
/// ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineClassifier<T: Element = f32> {
    pub config: BaselineConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> BaselineClassifier<T> {
    pub fn build(config: BaselineConfig, seed: u64) -> Result<Self> {
        if config.widths.len() < 2 || config.widths.contains(&0) || config.d_model == 0 {
            return Err(Error::Config("baseline needs at least two positive dense widths".into()));
        }
        let mut rng = stream(seed, "baseline.init");
        let mut params = ParamStore::new();
        let mut inp = config.d_model;
        let last = config.widths.len() - 1;
        for (i, &w) in config.widths.iter().enumerate() {
            insert_dense(&mut params, &format!("head.fc{}", i + 1), inp, w, if i == last { 1.0 } else { 2.0 }, &mut rng)?;
            if i < last {
                let bn = format!("head.bn{}", i + 1);
                params.insert(format!("{bn}.gamma"), Tensor::ones([w]), true)?;
                params.insert(format!("{bn}.beta"), Tensor::zeros([w]), true)?;
                params.insert(format!("{bn}.running_mean"), Tensor::zeros([w]), false)?;
                params.insert(format!("{bn}.running_var"), Tensor::ones([w]), false)?;
            }
            inp = w;
        }
        Ok(Self { config, params })
    }

    /// Logits `[batch, classes]`. In training mode the batch statistics are
    /// used and the updated running statistics are returned.
    pub fn forward_batch<'t>(
        &self,
        bound: &Bound<'t, T>,
        batch: &[&SequenceFeatureMap<T>],
        training: bool,
    ) -> Result<(Var<'t, T>, Vec<(String, Tensor<T>)>)> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let tape = bound.var("head.fc1.weight")?.tape();
        let pooled = batch
            .iter()
            .map(|seq| {
                check_sequence(seq, c.d_model, c.max_len)?;
                let x = tape.constant(seq.features.clone());
                let p = match c.pool {
                    BaselinePool::Gmp => global_max_pool(x, &seq.mask)?,
                    BaselinePool::Gap => global_avg_pool(x, &seq.mask)?,
                };
                p.reshape([1, c.d_model])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut x = Var::concat_rows(&pooled)?;
        let mut updates = Vec::new();
        let eps = T::from_f64(c.bn_eps);
        let m = c.bn_momentum;
        for i in 1..=c.widths.len() {
            x = dense(x, bound.var(&format!("head.fc{i}.weight"))?, bound.var(&format!("head.fc{i}.bias"))?)?;
            if i == c.widths.len() {
                break;
            }
            let bn = format!("head.bn{i}");
            let gamma = bound.var(&format!("{bn}.gamma"))?;
            let beta = bound.var(&format!("{bn}.beta"))?;
            let rm = format!("{bn}.running_mean");
            let rv = format!("{bn}.running_var");
            x = if training {
                let (y, stats) = batch_norm_train(x, gamma, beta, eps)?;
                let blend = |old: &Tensor<T>, new: &Tensor<T>| {
                    old.zip_map(new, |o, n| T::from_f64((1.0 - m) * o.as_f64() + m * n.as_f64()))
                };
                updates.push((rm.clone(), blend(self.params.get(&rm)?, &stats.mean)?));
                updates.push((rv.clone(), blend(self.params.get(&rv)?, &stats.var)?));
                y
            } else {
                batch_norm_eval(x, gamma, beta, self.params.get(&rm)?, self.params.get(&rv)?, eps)?
            }
            .relu();
        }
        Ok((x, updates))
    }
}

/// Which classifier a run trains; names match the command-line values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    CaeTransformer,
    GmpFc,
    GapFc,
    /// The transformer with row concatenation in place of pooling.
    Concat,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::CaeTransformer, Self::GmpFc, Self::GapFc, Self::Concat];

    pub fn name(self) -> &'static str {
        match self {
            Self::CaeTransformer => "cae-transformer",
            Self::GmpFc => "gmp-fc",
            Self::GapFc => "gap-fc",
            Self::Concat => "concat",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Classifier<T: Element = f32> {
    Transformer(TransformerClassifier<T>),
    Baseline(BaselineClassifier<T>),
}

/// Output of a batched forward pass.
pub struct BatchOutput<'t, T: Element> {
    /// `[batch, classes]`.
    pub logits: Var<'t, T>,
    /// Non-trainable state to store after the optimizer step.
    pub state: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Classifier<T> {
    /// `pooling` only applies to the transformer; `Concat` kind forces
    /// concatenation.
    pub fn build(kind: ModelKind, transformer: &TransformerConfig, seed: u64) -> Result<Self> {
        let tc = |pooling| TransformerConfig {
            pooling,
            ..transformer.clone()
        };
        Ok(match kind {
            ModelKind::CaeTransformer => Self::Transformer(TransformerClassifier::build(transformer.clone(), seed)?),
            ModelKind::Concat => Self::Transformer(TransformerClassifier::build(tc(Pooling::Concat), seed)?),
            ModelKind::GmpFc | ModelKind::GapFc => {
                let pool = if kind == ModelKind::GmpFc { BaselinePool::Gmp } else { BaselinePool::Gap };
                let mut cfg = BaselineConfig::new(pool);
                cfg.d_model = transformer.d_model;
                cfg.max_len = transformer.max_len;
                Self::Baseline(BaselineClassifier::build(cfg, seed)?)
            }
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Self::Transformer(m) => &m.params,
            Self::Baseline(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Self::Transformer(m) => &mut m.params,
            Self::Baseline(m) => &mut m.params,
        }
    }

    /// `rng` enables dropout; `training` selects batch statistics for
    /// normalization layers.
    pub fn forward_batch<'t>(
        &self,
        bound: &Bound<'t, T>,
        batch: &[&SequenceFeatureMap<T>],
        training: bool,
        rng: Option<&mut Rng>,
    ) -> Result<BatchOutput<'t, T>> {
        match self {
            Self::Transformer(m) => Ok(BatchOutput {
                logits: m.forward_many(bound, batch, PadMode::Trim, rng)?,
                state: Vec::new(),
            }),
            Self::Baseline(m) => {
                let (logits, state) = m.forward_batch(bound, batch, training)?;
                Ok(BatchOutput { logits, state })
            }
        }
    }

    pub fn apply_state(&mut self, state: Vec<(String, Tensor<T>)>) -> Result<()> {
        state.into_iter().try_for_each(|(name, t)| self.params_mut().set(&name, t))
    }

    /// Class probabilities `[batch, classes]` at inference.
    pub fn predict_proba(&self, batch: &[&SequenceFeatureMap<T>]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params().bind_frozen(&tape);
        softmax(&self.forward_batch(&bound, batch, false, None)?.logits.value(), 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn singleton_attention_returns_the_value_row() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t(&[1, 2], &[0.3, -1.0]));
        let k = tape.constant(t(&[1, 2], &[2.0, 5.0]));
        let v = tape.constant(t(&[1, 2], &[7.0, -3.0]));
        let out = scaled_dot_product_attention(q, k, v, &[true]).unwrap();
        assert_eq!(out.value().data(), &[7.0, -3.0]);
    }

    #[test]
    fn identical_keys_weight_equally() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let k = tape.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]));
        let v = tape.constant(t(&[2, 2], &[0.0, 2.0, 4.0, 0.0]));
        let out = scaled_dot_product_attention(q, k, v, &[true, true]).unwrap();
        assert_eq!(out.value().data(), &[2.0, 1.0]);
    }

    #[test]
    fn hand_computed_attention() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let eye = tape.constant(Tensor::identity(2));
        let out = scaled_dot_product_attention(q, eye, eye, &[true, true]).unwrap().value();
        let a = (1.0 / 2f64.sqrt()).exp();
        let want = [a / (a + 1.0), 1.0 / (a + 1.0)];
        assert!((out.data()[0] - want[0]).abs() < 1e-12 && (out.data()[1] - want[1]).abs() < 1e-12);
        assert!((out.data()[0] - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn fused_attention_matches_composed() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_fn([5, 3], |i| (i as f64 * 0.37).sin()));
        let k = tape.constant(Tensor::from_fn([5, 3], |i| (i as f64 * 0.91).cos()));
        let v = tape.constant(Tensor::from_fn([5, 2], |i| i as f64 * 0.1 - 0.3));
        let segs = [
            Segment { start: 0, mask: vec![true, false] },
            Segment { start: 2, mask: vec![true, true, true] },
        ];
        let fused = segmented_attention(q, k, v, &segs).unwrap().value();
        for seg in &segs {
            let (s, l) = (seg.start, seg.mask.len());
            let (qs, ks, vs) = (q.slice_rows(s, l).unwrap(), k.slice_rows(s, l).unwrap(), v.slice_rows(s, l).unwrap());
            let want = scaled_dot_product_attention(qs, ks, vs, &seg.mask).unwrap().value();
            let got = fused.slice_rows(seg.start, seg.mask.len()).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-14);
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t(&[2, 1], &[1.0, -1.0]));
        let k = tape.constant(t(&[3, 1], &[1.0, 50.0, -2.0]));
        let w = attention_weights(q, k, &[true, false, true]).unwrap().value();
        assert_eq!(w.data()[1], 0.0);
        assert_eq!(w.data()[4], 0.0);
        assert!(matches!(attention_weights(q, k, &[false; 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_projection_shape_is_a_config_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([3, 4]));
        let w = tape.constant(Tensor::ones([4, 2]));
        let vars = AttentionVars {
            wq: vec![w],
            wk: vec![w],
            wv: vec![w],
            wo: tape.constant(Tensor::ones([3, 4])),
        };
        assert!(matches!(multi_head_attention(x, &vars, &[true; 3]), Err(Error::Config(_))));
    }

    #[test]
    fn default_parameter_shapes() {
        let m = TransformerClassifier::<f32>::build(TransformerConfig::default(), 0).unwrap();
        let p = &m.params;
        assert_eq!(p.get("pe").unwrap().shape(), &[25, 256]);
        assert_eq!(p.get("block0.attn.wq4").unwrap().shape(), &[256, 128]);
        assert_eq!(p.get("block2.attn.wo").unwrap().shape(), &[640, 256]);
        assert!(!p.contains("block3.attn.wo"));
        assert_eq!(p.get("head.fc1.weight").unwrap().shape(), &[32, 256]);
        assert_eq!(p.get("head.fc2.weight").unwrap().shape(), &[2, 32]);
    }

    #[test]
    fn baseline_widths() {
        let m = BaselineClassifier::<f32>::build(BaselineConfig::new(BaselinePool::Gap), 0).unwrap();
        let outs: Vec<usize> = (1..=4).map(|i| m.params.get(&format!("head.fc{i}.bias")).unwrap().numel()).collect();
        assert_eq!(outs, vec![128, 128, 32, 2]);
    }

    #[test]
    fn model_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("resnet".parse::<ModelKind>().is_err());
        assert!("max".parse::<Pooling>().is_err());
    }
}
