use std::str::FromStr;
use std::sync::Arc;

use super::{gemm, mismatch, Grad, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// `kernel / 2` zeros on every side.
    #[default]
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: Padding::Same,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv2d(ConvSpec),
    Relu,
    BiasAdd,
    Concat,
}

impl FromStr for LayerKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(LayerKind::Linear),
            "conv2d" => Ok(LayerKind::Conv2d(ConvSpec::default())),
            "relu" => Ok(LayerKind::Relu),
            "bias-add" => Ok(LayerKind::BiasAdd),
            "concat" => Ok(LayerKind::Concat),
            other => Err(TensorError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Applies one network block. Pullback order is `[input, params...]`; for
/// `Concat` the params are the trailing parts, joined after `input` along the
/// last axis.
pub fn layer_apply(kind: LayerKind, params: &[Tensor], input: &Tensor) -> Result<Grad, TensorError> {
    match kind {
        LayerKind::Linear => match params {
            [w] => linear(input, w, None),
            [w, b] => linear(input, w, Some(b)),
            _ => Err(mismatch("linear", format!("expected 1 or 2 params, got {}", params.len()))),
        },
        LayerKind::Conv2d(spec) => match params {
            [k] => conv2d(input, k, spec),
            _ => Err(mismatch("conv2d", format!("expected 1 kernel, got {} params", params.len()))),
        },
        LayerKind::Relu => Ok(relu(input)),
        LayerKind::BiasAdd => match params {
            [b] => bias_add(input, b),
            _ => Err(mismatch("bias-add", format!("expected 1 bias, got {} params", params.len()))),
        },
        LayerKind::Concat => {
            let mut parts = Vec::with_capacity(params.len() + 1);
            parts.push(input.clone());
            parts.extend(params.iter().cloned());
            concat(&parts)
        }
    }
}

/// `y = x·Wᵀ + b` with `W` shaped `[out, in]`. Accepts `[in]` or `[N, in]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Grad, TensorError> {
    if weight.rank() != 2 {
        return Err(mismatch("linear", format!("weight rank {} (expected 2)", weight.rank())));
    }
    let (out_dim, in_dim) = (weight.dim(0), weight.dim(1));
    let (n, batched) = match input.shape() {
        [d] => (1, (*d, false)),
        [n, d] => (*n, (*d, true)),
        s => return Err(mismatch("linear", format!("input shape {s:?} (expected [in] or [N, in])"))),
    };
    let (d, batched) = batched;
    if d != in_dim {
        return Err(mismatch(
            "linear",
            format!("input dimension 1 is {d} but weight expects {in_dim}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [out_dim] {
            return Err(mismatch(
                "linear",
                format!("bias shape {:?} but output dimension is {out_dim}", b.shape()),
            ));
        }
    }
    let mut out = vec![0.0; n * out_dim];
    gemm(n, in_dim, out_dim, (input.data(), in_dim as isize, 1), (weight.data(), 1, in_dim as isize), 0.0, &mut out);
    if let Some(b) = bias {
        for row in out.chunks_mut(out_dim) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let out_shape = if batched { vec![n, out_dim] } else { vec![out_dim] };
    let value = Tensor::new(out_shape, out)?;
    let x = input.clone();
    let w = weight.clone();
    let has_bias = bias.is_some();
    Ok(Grad::new(
        value,
        Box::new(move |g| {
            let gd = g.data();
            let mut dx = vec![0.0; n * in_dim];
            gemm(n, out_dim, in_dim, (gd, out_dim as isize, 1), (w.data(), in_dim as isize, 1), 0.0, &mut dx);
            let mut dw = vec![0.0; out_dim * in_dim];
            gemm(out_dim, n, in_dim, (gd, 1, out_dim as isize), (x.data(), in_dim as isize, 1), 0.0, &mut dw);
            let mut grads = vec![
                Tensor::new(x.shape().to_vec(), dx).expect("shape"),
                Tensor::new(w.shape().to_vec(), dw).expect("shape"),
            ];
            if has_bias {
                let mut db = vec![0.0; out_dim];
                for row in gd.chunks(out_dim) {
                    for (a, b) in db.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                grads.push(Tensor::vector(db));
            }
            grads
        }),
    ))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols_width(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.cols_width();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                            dst[oy * self.wo + ox] = if iy >= 0
                                && (iy as usize) < self.h
                                && ix >= 0
                                && (ix as usize) < self.w
                            {
                                image[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.cols_width();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                image[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                    src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, NCHW input and OIHW kernel, no bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Grad, TensorError> {
    let [n, c, h, w] = *input.shape() else {
        return Err(mismatch("conv2d", format!("input shape {:?} is not NCHW", input.shape())));
    };
    let [o, kc, kh, kw] = *kernel.shape() else {
        return Err(mismatch("conv2d", format!("kernel shape {:?} is not OIHW", kernel.shape())));
    };
    if kc != c {
        return Err(mismatch(
            "conv2d",
            format!("input dimension 1 (channels) is {c} but kernel expects {kc}"),
        ));
    }
    if spec.stride != 1 && spec.stride != 2 {
        return Err(mismatch("conv2d", format!("stride {} not in {{1, 2}}", spec.stride)));
    }
    let (pad_h, pad_w) = match spec.padding {
        Padding::Same => (kh / 2, kw / 2),
        Padding::Valid => (0, 0),
    };
    if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
        return Err(mismatch(
            "conv2d",
            format!("spatial size {h}x{w} smaller than kernel {kh}x{kw}"),
        ));
    }
    let geom = Arc::new(ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        pad_h,
        pad_w,
        stride: spec.stride,
        ho: (h + 2 * pad_h - kh) / spec.stride + 1,
        wo: (w + 2 * pad_w - kw) / spec.stride + 1,
    });
    let (ck, p) = (geom.cols_rows(), geom.cols_width());
    let in_size = c * h * w;
    let mut out = vec![0.0; n * o * p];
    let mut cols = vec![0.0; ck * p];
    for s in 0..n {
        geom.im2col(&input.data()[s * in_size..(s + 1) * in_size], &mut cols);
        gemm(o, ck, p, (kernel.data(), ck as isize, 1), (&cols, p as isize, 1), 0.0, &mut out[s * o * p..(s + 1) * o * p]);
    }
    let value = Tensor::new(vec![n, o, geom.ho, geom.wo], out)?;
    let x = input.clone();
    let k = kernel.clone();
    Ok(Grad::new(
        value,
        Box::new(move |g| {
            let gd = g.data();
            let mut dx = vec![0.0; x.len()];
            let mut dk = vec![0.0; k.len()];
            let mut cols = vec![0.0; ck * p];
            let mut dcols = vec![0.0; ck * p];
            for s in 0..n {
                let gs = &gd[s * o * p..(s + 1) * o * p];
                geom.im2col(&x.data()[s * in_size..(s + 1) * in_size], &mut cols);
                gemm(o, p, ck, (gs, p as isize, 1), (&cols, 1, p as isize), 1.0, &mut dk);
                gemm(ck, o, p, (k.data(), 1, ck as isize), (gs, p as isize, 1), 0.0, &mut dcols);
                geom.col2im(&dcols, &mut dx[s * in_size..(s + 1) * in_size]);
            }
            vec![
                Tensor::new(x.shape().to_vec(), dx).expect("shape"),
                Tensor::new(k.shape().to_vec(), dk).expect("shape"),
            ]
        }),
    ))
}

/// `max(x, 0)`; the derivative at exactly zero is taken as zero.
pub fn relu(input: &Tensor) -> Grad {
    let value = input.map(|v| v.max(0.0));
    let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    Grad::new(
        value,
        Box::new(move |g| {
            let mut d = g.clone();
            for (v, &on) in d.data_mut().iter_mut().zip(&mask) {
                if !on {
                    *v = 0.0;
                }
            }
            vec![d]
        }),
    )
}

/// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
pub fn bias_add(input: &Tensor, bias: &Tensor) -> Result<Grad, TensorError> {
    if input.rank() < 2 || bias.shape() != [input.dim(1)] {
        return Err(mismatch(
            "bias-add",
            format!("bias shape {:?} does not match input dimension 1 of {:?}", bias.shape(), input.shape()),
        ));
    }
    let (n, c) = (input.dim(0), input.dim(1));
    let inner = input.len() / (n * c);
    let mut value = input.clone();
    for (i, v) in value.data_mut().iter_mut().enumerate() {
        *v += bias.data()[(i / inner) % c];
    }
    Ok(Grad::new(
        value,
        Box::new(move |g| {
            let mut db = vec![0.0; c];
            for (i, v) in g.data().iter().enumerate() {
                db[(i / inner) % c] += v;
            }
            vec![g.clone(), Tensor::vector(db)]
        }),
    ))
}

/// Concatenates rank-1 or rank-2 tensors along their last axis.
pub fn concat(parts: &[Tensor]) -> Result<Grad, TensorError> {
    let first = parts.first().ok_or_else(|| mismatch("concat", "no parts"))?;
    let rank = first.rank();
    if rank > 2 {
        return Err(mismatch("concat", format!("rank {rank} unsupported")));
    }
    let rows = if rank == 2 { first.dim(0) } else { 1 };
    let mut widths = Vec::with_capacity(parts.len());
    for (i, p) in parts.iter().enumerate() {
        if p.rank() != rank || (rank == 2 && p.dim(0) != rows) {
            return Err(mismatch(
                "concat",
                format!("part {i} has shape {:?}, incompatible with {:?} in dimension 0", p.shape(), first.shape()),
            ));
        }
        widths.push(p.shape()[rank - 1]);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &wd) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * wd..(r + 1) * wd]);
        }
    }
    let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
    let value = Tensor::new(shape, data)?;
    Ok(Grad::new(
        value,
        Box::new(move |g| split(g, &widths).expect("concat pullback widths")),
    ))
}

/// Inverse of [`concat`]: splits the last axis into consecutive widths.
pub fn split(t: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>, TensorError> {
    let rank = t.rank();
    let total = t.shape()[rank - 1];
    if widths.iter().sum::<usize>() != total || widths.contains(&0) {
        return Err(mismatch("split", format!("widths {widths:?} do not partition {total}")));
    }
    let rows = t.len() / total;
    let mut out = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for &wd in widths {
        let mut data = Vec::with_capacity(rows * wd);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * total + offset..r * total + offset + wd]);
        }
        let mut shape = t.shape().to_vec();
        shape[rank - 1] = wd;
        out.push(Tensor::new(shape, data)?);
        offset += wd;
    }
    Ok(out)
}

/// Spatial average or maximum per channel: `[N, C, H, W] -> [N, C]`. The max
/// pullback routes to the first maximal cell in row-major order.
pub fn global_pool(map: &Tensor, mode: PoolMode) -> Result<Grad, TensorError> {
    let [n, c, h, w] = *map.shape() else {
        return Err(mismatch("global_pool", format!("input shape {:?} is not NCHW", map.shape())));
    };
    if h == 0 || w == 0 {
        return Err(TensorError::EmptySpatial);
    }
    let area = h * w;
    let shape = map.shape().to_vec();
    match mode {
        PoolMode::Avg => {
            let data: Vec<f64> = map.data().chunks(area).map(|ch| ch.iter().sum::<f64>() / area as f64).collect();
            let value = Tensor::new(vec![n, c], data)?;
            Ok(Grad::new(
                value,
                Box::new(move |g| {
                    let mut d = Vec::with_capacity(n * c * area);
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv / area as f64, area));
                    }
                    vec![Tensor::new(shape.clone(), d).expect("shape")]
                }),
            ))
        }
        PoolMode::Max => {
            let mut data = Vec::with_capacity(n * c);
            let mut argmax = Vec::with_capacity(n * c);
            for ch in map.data().chunks(area) {
                let mut best = 0;
                for (i, &v) in ch.iter().enumerate() {
                    if v > ch[best] {
                        best = i;
                    }
                }
                data.push(ch[best]);
                argmax.push(best);
            }
            let value = Tensor::new(vec![n, c], data)?;
            Ok(Grad::new(
                value,
                Box::new(move |g| {
                    let mut d = vec![0.0; n * c * area];
                    for (i, (&gv, &a)) in g.data().iter().zip(&argmax).enumerate() {
                        d[i * area + a] = gv;
                    }
                    vec![Tensor::new(shape.clone(), d).expect("shape")]
                }),
            ))
        }
    }
}

fn normalize_slice(v: &[f64], floor: f64, out: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(floor);
    for (o, x) in out.iter_mut().zip(v) {
        *o = x / denom;
    }
    norm
}

fn normalize_pullback(y: &[f64], norm: f64, floor: f64, g: &[f64], out: &mut [f64]) {
    if norm <= floor {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, yv), gv) in out.iter_mut().zip(y).zip(g) {
        *o = (gv - yv * dot) / norm;
    }
}

/// `v / max(‖v‖, floor)` for a rank-1 tensor.
pub fn l2_normalize(v: &Tensor, floor: f64) -> Grad {
    let mut y = vec![0.0; v.len()];
    let norm = normalize_slice(v.data(), floor, &mut y);
    let value = Tensor::new(v.shape().to_vec(), y).expect("shape");
    let yv = value.clone();
    Grad::new(
        value,
        Box::new(move |g| {
            let mut d = vec![0.0; yv.len()];
            normalize_pullback(yv.data(), norm, floor, g.data(), &mut d);
            vec![Tensor::new(yv.shape().to_vec(), d).expect("shape")]
        }),
    )
}

/// Row-wise [`l2_normalize`] of an `[N, d]` matrix.
pub fn l2_normalize_rows(m: &Tensor, floor: f64) -> Grad {
    let n = m.dim(0);
    let d = m.len() / n;
    let mut y = vec![0.0; m.len()];
    let norms: Vec<f64> = (0..n)
        .map(|i| normalize_slice(m.row(i), floor, &mut y[i * d..(i + 1) * d]))
        .collect();
    let value = Tensor::new(m.shape().to_vec(), y).expect("shape");
    let yv = value.clone();
    Grad::new(
        value,
        Box::new(move |g| {
            let mut out = vec![0.0; yv.len()];
            for i in 0..n {
                normalize_pullback(yv.row(i), norms[i], floor, g.row(i), &mut out[i * d..(i + 1) * d]);
            }
            vec![Tensor::new(yv.shape().to_vec(), out).expect("shape")]
        }),
    )
}

fn softmax_slice(z: &[f64], t: f64, out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / t).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn softmax_pullback(p: &[f64], t: f64, g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, pv), gv) in out.iter_mut().zip(p).zip(g) {
        *o = pv * (gv - dot) / t;
    }
}

/// `softmax(z / t)` of a rank-1 tensor.
pub fn softmax_temp(logits: &Tensor, t: f64) -> Result<Grad, TensorError> {
    if !(t > 0.0) {
        return Err(TensorError::NonPositiveTemperature(t));
    }
    let mut p = vec![0.0; logits.len()];
    softmax_slice(logits.data(), t, &mut p);
    let value = Tensor::new(logits.shape().to_vec(), p)?;
    let pv = value.clone();
    Ok(Grad::new(
        value,
        Box::new(move |g| {
            let mut d = vec![0.0; pv.len()];
            softmax_pullback(pv.data(), t, g.data(), &mut d);
            vec![Tensor::new(pv.shape().to_vec(), d).expect("shape")]
        }),
    ))
}

/// Row-wise [`softmax_temp`] of an `[N, c]` matrix.
pub fn softmax_temp_rows(logits: &Tensor, t: f64) -> Result<Grad, TensorError> {
    if !(t > 0.0) {
        return Err(TensorError::NonPositiveTemperature(t));
    }
    let n = logits.dim(0);
    let c = logits.len() / n;
    let mut p = vec![0.0; logits.len()];
    for i in 0..n {
        softmax_slice(logits.row(i), t, &mut p[i * c..(i + 1) * c]);
    }
    let value = Tensor::new(logits.shape().to_vec(), p)?;
    let pv = value.clone();
    Ok(Grad::new(
        value,
        Box::new(move |g| {
            let mut d = vec![0.0; pv.len()];
            for i in 0..n {
                softmax_pullback(pv.row(i), t, g.row(i), &mut d[i * c..(i + 1) * c]);
            }
            vec![Tensor::new(pv.shape().to_vec(), d).expect("shape")]
        }),
    ))
}
