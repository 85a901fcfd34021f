//! Differentiable layers shared by the auto-encoder and the classifiers.
//!
//! All functions take and return [`Var`]s so they compose on a tape.
//! Image tensors are `[channels, height, width]`; sequences are
//! `[length, features]`.

use rand::Rng;

use crate::autodiff::{branch, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(dim_err!("{what}: expected [c, h, w], got {shape:?}")),
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(dim_err!("kernel {kh}x{kw} larger than input {h}x{w}"));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                if kh > h + pad_h || kw > w + pad_w {
                    return Err(dim_err!("kernel {kh}x{kw} larger than padded input"));
                }
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(col_row, col, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ch * self.h + iy as usize) * self.w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.out_w + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        let n = self.pixels();
        let mut cols = vec![T::zero(); self.patch() * n];
        self.for_each_tap(|row, col, src| cols[row * n + col] = x[src]);
        cols
    }

    fn col2im<T: Element>(&self, cols: &[T]) -> Vec<T> {
        let n = self.pixels();
        let mut x = vec![T::zero(); self.c * self.h * self.w];
        self.for_each_tap(|row, col, dst| x[dst] += cols[row * n + col]);
        x
    }
}

/// 2-D cross-correlation of `[c_in, h, w]` with `[c_out, c_in, kh, kw]`
/// kernels plus an optional per-output-channel bias.
pub fn conv2d<'t, T: Element>(
    input: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: Padding,
) -> Result<Var<'t, T>> {
    let x = input.value();
    let k = kernel.value();
    let (c, h, w) = dims3(x.shape(), "conv2d input")?;
    let (o, kc, kh, kw) = match *k.shape() {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        _ => return Err(dim_err!("conv2d kernel must be 4-d, got {:?}", k.shape())),
    };
    if kc != c {
        return Err(dim_err!("conv2d: kernel expects {kc} channels, input has {c}"));
    }
    if let Some(b) = &bias {
        if b.shape() != [o] {
            return Err(dim_err!("conv2d bias {:?} for {o} channels", b.shape()));
        }
    }
    let geo = ConvGeometry::new(c, h, w, kh, kw, stride, padding)?;
    let (patch, n) = (geo.patch(), geo.pixels());
    let cols = geo.im2col(x.data());
    let mut out = vec![T::zero(); o * n];
    gemm(false, false, o, patch, n, k.data(), &cols, T::zero(), &mut out);
    if let Some(b) = &bias {
        let bv = b.value();
        for (row, &bias_v) in out.chunks_mut(n).zip(bv.data()) {
            for v in row {
                *v += bias_v;
            }
        }
    }
    let value = Tensor::from_parts(vec![o, geo.out_h, geo.out_w], out);

    let keep_cols = kernel.requires_grad().then_some(cols);
    let keep_kernel = input.requires_grad().then_some(k);
    let mut parents = vec![input, kernel];
    parents.extend(bias);
    Ok(input.tape().push(value, &parents, move |g, needs| {
        let gd = g.data();
        let dx = match (&keep_kernel, needs[0]) {
            (Some(k), true) => {
                let mut dcols = vec![T::zero(); patch * n];
                gemm(true, false, patch, o, n, k.data(), gd, T::zero(), &mut dcols);
                Some(Tensor::from_parts(vec![geo.c, geo.h, geo.w], geo.col2im(&dcols)))
            }
            _ => None,
        };
        let dk = match (&keep_cols, needs[1]) {
            (Some(cols), true) => {
                let mut dk = vec![T::zero(); o * patch];
                gemm(false, true, o, n, patch, gd, cols, T::zero(), &mut dk);
                Some(Tensor::from_parts(vec![o, geo.c, geo.kh, geo.kw], dk))
            }
            _ => None,
        };
        let mut grads = vec![dx, dk];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                Tensor::from_parts(vec![o], gd.chunks(n.max(1)).map(|r| r.iter().copied().sum()).collect())
            }));
        }
        grads
    }))
}

/// Non-overlapping max pooling with a square `window`. Ties resolve to the
/// first element in scan order, which is also where the gradient goes.
pub fn maxpool2d<'t, T: Element>(input: Var<'t, T>, window: usize) -> Result<Var<'t, T>> {
    let x = input.value();
    let (c, h, w) = dims3(x.shape(), "maxpool2d")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(dim_err!("maxpool2d window {window} does not divide {h}x{w}"));
    }
    let (oh, ow) = (h / window, w / window);
    let src = x.data();
    let argmax = branch::choices(|| {
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + oy * window) * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let at = (ch * h + oy * window + dy) * w + ox * window + dx;
                            if src[at] > src[best] {
                                best = at;
                            }
                        }
                    }
                    idx.push(best as u32);
                }
            }
        }
        idx
    });
    let out = argmax.iter().map(|&i| src[i as usize]).collect();
    let numel = x.numel();
    Ok(input.tape().push(
        Tensor::from_parts(vec![c, oh, ow], out),
        &[input],
        move |g, _| {
            let mut dx = vec![T::zero(); numel];
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                dx[i as usize] += gv;
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
        },
    ))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<'t, T: Element>(input: Var<'t, T>, factor: usize) -> Result<Var<'t, T>> {
    let x = input.value();
    let (c, h, w) = dims3(x.shape(), "upsample")?;
    if factor == 0 {
        return Err(Error::Contract("upsample factor must be positive".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let row = &src[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Ok(input.tape().push(
        Tensor::from_parts(vec![c, oh, ow], out),
        &[input],
        move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dx[(ch * h + oy / factor) * w + ox / factor] += gd[(ch * oh + oy) * ow + ox];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
        },
    ))
}

/// Fully connected layer `W·x + b` with `W: [m, n]`, `b: [m]`.
///
/// `x` may be a single vector `[n]` or a stack of row vectors `[rows, n]`.
pub fn dense<'t, T: Element>(x: Var<'t, T>, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (m, n) = weight.value().dims2()?;
    match shape[..] {
        [len] if len == n => dense(x.reshape([1, n])?, weight, bias)?.reshape([m]),
        [_, len] if len == n => x.matmul_t(weight)?.add_row(bias),
        _ => Err(dim_err!("dense: input {shape:?} for weight [{m}, {n}]")),
    }
}

/// Normalizes over the last axis, then applies `gamma ⊙ x̂ + beta`.
pub fn layer_norm<'t, T: Element>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: T,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let d = *xv.shape().last().ok_or_else(|| dim_err!("layer_norm on scalar"))?;
    if d == 0 {
        return Err(dim_err!("layer_norm over an empty axis"));
    }
    let (gv, bv) = (gamma.value(), beta.value());
    if gv.shape() != [d] || bv.shape() != [d] {
        return Err(dim_err!("layer_norm affine {:?}/{:?} for width {d}", gv.shape(), bv.shape()));
    }
    let rows = xv.numel() / d;
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut xhat = vec![T::zero(); xv.numel()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &xv.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = T::one() / (var + eps).sqrt();
        inv_std[r] = s;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    let out: Vec<T> = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| gv.data()[i % d] * v + bv.data()[i % d])
        .collect();
    let shape = xv.shape().to_vec();
    Ok(x.tape().push(
        Tensor::from_parts(shape.clone(), out),
        &[x, gamma, beta],
        move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); gd.len()];
                for r in 0..rows {
                    let span = r * d..(r + 1) * d;
                    let dxhat: Vec<T> = gd[span.clone()]
                        .iter()
                        .zip(gv.data())
                        .map(|(&u, &gm)| u * gm)
                        .collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
                    let mean_dx = dxhat
                        .iter()
                        .zip(&xhat[span.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>()
                        * inv_d;
                    for ((o, &dh), &xh) in dx[span.clone()].iter_mut().zip(&dxhat).zip(&xhat[span]) {
                        *o = inv_std[r] * (dh - mean_d - xh * mean_dx);
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let dgamma = needs[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for (i, (&u, &xh)) in gd.iter().zip(&xhat).enumerate() {
                    acc[i % d] += u * xh;
                }
                Tensor::from_parts(vec![d], acc)
            });
            let dbeta = needs[2].then(|| {
                let mut acc = vec![T::zero(); d];
                for (i, &u) in gd.iter().enumerate() {
                    acc[i % d] += u;
                }
                Tensor::from_parts(vec![d], acc)
            });
            vec![dx, dgamma, dbeta]
        },
    ))
}

/// Inverted dropout. Identity at inference or when `rate == 0`.
pub fn dropout<'t, T: Element, R: Rng + ?Sized>(
    x: Var<'t, T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let shape = x.shape();
    let mask = Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    x.mul(x.tape().constant(mask))
}

fn check_mask(len: usize, mask: &[bool], what: &str) -> Result<()> {
    if mask.len() != len {
        return Err(dim_err!("{what}: mask of length {} for {len} rows", mask.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract(format!("{what}: mask has no valid position")));
    }
    Ok(())
}

/// Per-feature maximum over the rows where `mask` is true.
///
/// Padded rows are treated as holding the most negative finite `f32`, so
/// they can never be selected.
pub fn global_max_pool<'t, T: Element>(seq: Var<'t, T>, mask: &[bool]) -> Result<Var<'t, T>> {
    let x = seq.value();
    let (l, d) = x.dims2()?;
    check_mask(l, mask, "global_max_pool")?;
    let src = x.data();
    let floor = T::from_f64(-3.4e38);
    let at = |r: usize, j: usize| if mask[r] { src[r * d + j] } else { floor };
    let argmax = branch::choices(|| {
        (0..d)
            .map(|j| {
                let mut best = mask.iter().position(|&m| m).expect("checked");
                for r in 0..l {
                    if at(r, j) > at(best, j) {
                        best = r;
                    }
                }
                best as u32
            })
            .collect()
    });
    let out = argmax
        .iter()
        .enumerate()
        .map(|(j, &r)| src[r as usize * d + j])
        .collect();
    Ok(seq.tape().push(Tensor::from_parts(vec![d], out), &[seq], move |g, _| {
        let mut dx = vec![T::zero(); l * d];
        for (j, (&r, &gv)) in argmax.iter().zip(g.data()).enumerate() {
            dx[r as usize * d + j] += gv;
        }
        vec![Some(Tensor::from_parts(vec![l, d], dx))]
    }))
}

/// Per-feature mean over the rows where `mask` is true.
pub fn global_avg_pool<'t, T: Element>(seq: Var<'t, T>, mask: &[bool]) -> Result<Var<'t, T>> {
    let x = seq.value();
    let (l, d) = x.dims2()?;
    check_mask(l, mask, "global_avg_pool")?;
    let count = mask.iter().filter(|&&m| m).count();
    let inv = T::one() / T::from_f64(count as f64);
    let mut out = vec![T::zero(); d];
    for (r, row) in x.data().chunks(d.max(1)).enumerate() {
        if mask[r] {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    for o in &mut out {
        *o *= inv;
    }
    let mask = mask.to_vec();
    Ok(seq.tape().push(Tensor::from_parts(vec![d], out), &[seq], move |g, _| {
        let mut dx = vec![T::zero(); l * d];
        for (r, row) in dx.chunks_mut(d.max(1)).enumerate() {
            if mask[r] {
                for (o, &gv) in row.iter_mut().zip(g.data()) {
                    *o = gv * inv;
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![l, d], dx))]
    }))
}

/// Batch statistics produced by [`batch_norm_train`].
pub struct BatchStats<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Batch normalization of `[batch, d]` using the batch's own statistics.
/// The returned variance is the biased (population) estimate.
pub fn batch_norm_train<'t, T: Element>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: T,
) -> Result<(Var<'t, T>, BatchStats<T>)> {
    let xv = x.value();
    let (b, d) = xv.dims2()?;
    if b == 0 {
        return Err(dim_err!("batch_norm over an empty batch"));
    }
    let (gv, bv) = (gamma.value(), beta.value());
    if gv.shape() != [d] || bv.shape() != [d] {
        return Err(dim_err!("batch_norm affine {:?}/{:?} for width {d}", gv.shape(), bv.shape()));
    }
    let inv_b = T::one() / T::from_f64(b as f64);
    let src = xv.data();
    let mut mean = vec![T::zero(); d];
    let mut var = vec![T::zero(); d];
    for row in src.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_b);
    for row in src.chunks(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_b);
    let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
    let xhat: Vec<T> = src
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % d]) * inv_std[i % d])
        .collect();
    let out = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| gv.data()[i % d] * v + bv.data()[i % d])
        .collect();
    let stats = BatchStats {
        mean: Tensor::from_parts(vec![d], mean),
        var: Tensor::from_parts(vec![d], var),
    };
    let y = x.tape().push(
        Tensor::from_parts(vec![b, d], out),
        &[x, gamma, beta],
        move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut mean_d = vec![T::zero(); d];
                let mut mean_dx = vec![T::zero(); d];
                for (i, (&u, &xh)) in gd.iter().zip(&xhat).enumerate() {
                    let dh = u * gv.data()[i % d];
                    mean_d[i % d] += dh * inv_b;
                    mean_dx[i % d] += dh * xh * inv_b;
                }
                let dx = gd
                    .iter()
                    .zip(&xhat)
                    .enumerate()
                    .map(|(i, (&u, &xh))| {
                        let j = i % d;
                        inv_std[j] * (u * gv.data()[j] - mean_d[j] - xh * mean_dx[j])
                    })
                    .collect();
                Tensor::from_parts(vec![b, d], dx)
            });
            let dgamma = needs[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for (i, (&u, &xh)) in gd.iter().zip(&xhat).enumerate() {
                    acc[i % d] += u * xh;
                }
                Tensor::from_parts(vec![d], acc)
            });
            let dbeta = needs[2].then(|| {
                let mut acc = vec![T::zero(); d];
                for (i, &u) in gd.iter().enumerate() {
                    acc[i % d] += u;
                }
                Tensor::from_parts(vec![d], acc)
            });
            vec![dx, dgamma, dbeta]
        },
    );
    Ok((y, stats))
}

/// Batch normalization at inference, using running statistics.
pub fn batch_norm_eval<'t, T: Element>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Var<'t, T>> {
    let tape = x.tape();
    let shift = tape.constant(running_mean.map(|m| -m));
    let inv_std = tape.constant(running_var.map(|v| T::one() / (v + eps).sqrt()));
    x.add_row(shift)?
        .mul_row(gamma.mul(inv_std)?)?
        .add_row(beta)
}
