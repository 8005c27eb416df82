//! Convolution and pooling kernels (im2col + GEMM).

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_bias(op: &'static str, b: Option<&Tensor>, cout: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [cout] => Err(Error::shape(op, format!("bias {} for {cout} channels", b.dims()))),
        _ => Ok(()),
    }
}

fn add_channel_bias(y: &mut [f64], b: Option<&Tensor>, len: usize) {
    if let Some(b) = b {
        for (row, &bias) in y.chunks_mut(len).zip(b.data()) {
            for v in row {
                *v += bias;
            }
        }
    }
}

fn row_sums(m: &[f64], cols: usize) -> Vec<f64> {
    m.chunks(cols).map(|r| r.iter().sum()).collect()
}

pub(crate) fn conv1d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<(Tensor, Vec<f64>)> {
    if x.ndim() != 2 || w.ndim() != 3 || w.shape()[1] != x.shape()[0] || stride == 0 {
        return Err(Error::shape(
            "conv1d",
            format!("input {} (Cin, T) vs weight {} (Cout, Cin, K), stride {stride}", x.dims(), w.dims()),
        ));
    }
    let (cin, tin) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    if tin < k {
        return Err(Error::shape("conv1d", format!("input length {tin} shorter than kernel {k}")));
    }
    check_bias("conv1d", b, cout)?;
    let tout = (tin - k) / stride + 1;
    let ck = cin * k;
    let mut cols = vec![0.0; tout * ck];
    for t in 0..tout {
        for c in 0..cin {
            let src = &x.data()[c * tin + t * stride..c * tin + t * stride + k];
            cols[t * ck + c * k..t * ck + (c + 1) * k].copy_from_slice(src);
        }
    }
    let mut y = vec![0.0; cout * tout];
    gemm(1.0, w.data(), Layout::row_major(cout, ck), &cols, Layout::transposed(tout, ck), 0.0, &mut y, Layout::row_major(cout, tout));
    add_channel_bias(&mut y, b, tout);
    Ok((Tensor::from_parts(vec![cout, tout], y), cols))
}

pub(crate) fn conv1d_backward(inputs: &[&Tensor], cols: &[f64], dy: &Tensor, stride: usize, needs: &[bool]) -> Vec<Option<Tensor>> {
    let (x, w) = (inputs[0], inputs[1]);
    let (cin, tin) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let tout = dy.shape()[1];
    let ck = cin * k;
    let mut grads = vec![None; inputs.len()];
    if needs[0] {
        let mut dcols = vec![0.0; tout * ck];
        gemm(1.0, dy.data(), Layout::transposed(cout, tout), w.data(), Layout::row_major(cout, ck), 0.0, &mut dcols, Layout::row_major(tout, ck));
        let mut dx = vec![0.0; cin * tin];
        for t in 0..tout {
            for c in 0..cin {
                let dst = &mut dx[c * tin + t * stride..c * tin + t * stride + k];
                for (a, g) in dst.iter_mut().zip(&dcols[t * ck + c * k..t * ck + (c + 1) * k]) {
                    *a += g;
                }
            }
        }
        grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
    }
    if needs[1] {
        let mut dw = vec![0.0; cout * ck];
        gemm(1.0, dy.data(), Layout::row_major(cout, tout), cols, Layout::row_major(tout, ck), 0.0, &mut dw, Layout::row_major(cout, ck));
        grads[1] = Some(Tensor::from_parts(w.shape().to_vec(), dw));
    }
    if inputs.len() == 3 && needs[2] {
        grads[2] = Some(Tensor::from_parts(vec![cout], row_sums(dy.data(), tout)));
    }
    grads
}

struct Geom2d {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl Geom2d {
    /// Visits every (im2col index, input index) pair that reads inside the
    /// unpadded image.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let hw_out = self.hout * self.wout;
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for oy in 0..self.hout {
                        let iy = oy + i;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        let iy = iy - self.pad;
                        for ox in 0..self.wout {
                            let ix = ox + j;
                            if ix < self.pad || ix - self.pad >= self.w {
                                continue;
                            }
                            f(row * hw_out + oy * self.wout + ox, (c * self.h + iy) * self.w + ix - self.pad);
                        }
                    }
                }
            }
        }
    }
}

fn geom2d(x: &Tensor, w: &Tensor, pad: usize) -> Result<Geom2d> {
    if x.ndim() != 3 || w.ndim() != 4 || w.shape()[1] != x.shape()[0] {
        return Err(Error::shape(
            "conv2d",
            format!("input {} (Cin, H, W) vs weight {} (Cout, Cin, KH, KW)", x.dims(), w.dims()),
        ));
    }
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape("conv2d", format!("input {} smaller than kernel {kh}x{kw}", x.dims())));
    }
    Ok(Geom2d {
        cin,
        h,
        w: wd,
        kh,
        kw,
        pad,
        hout: h + 2 * pad - kh + 1,
        wout: wd + 2 * pad - kw + 1,
    })
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: usize) -> Result<(Tensor, Vec<f64>)> {
    let g = geom2d(x, w, pad)?;
    let cout = w.shape()[0];
    check_bias("conv2d", b, cout)?;
    let ckk = g.cin * g.kh * g.kw;
    let hw = g.hout * g.wout;
    let mut cols = vec![0.0; ckk * hw];
    let src = x.data();
    g.for_each(|dst, s| cols[dst] = src[s]);
    let mut y = vec![0.0; cout * hw];
    gemm(1.0, w.data(), Layout::row_major(cout, ckk), &cols, Layout::row_major(ckk, hw), 0.0, &mut y, Layout::row_major(cout, hw));
    add_channel_bias(&mut y, b, hw);
    Ok((Tensor::from_parts(vec![cout, g.hout, g.wout], y), cols))
}

pub(crate) fn conv2d_backward(inputs: &[&Tensor], cols: &[f64], dy: &Tensor, pad: usize, needs: &[bool]) -> Vec<Option<Tensor>> {
    let (x, w) = (inputs[0], inputs[1]);
    let g = geom2d(x, w, pad).expect("validated in forward");
    let cout = w.shape()[0];
    let ckk = g.cin * g.kh * g.kw;
    let hw = g.hout * g.wout;
    let mut grads = vec![None; inputs.len()];
    if needs[0] {
        let mut dcols = vec![0.0; ckk * hw];
        gemm(1.0, w.data(), Layout::transposed(cout, ckk), dy.data(), Layout::row_major(cout, hw), 0.0, &mut dcols, Layout::row_major(ckk, hw));
        let mut dx = vec![0.0; x.numel()];
        g.for_each(|src, d| dx[d] += dcols[src]);
        grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
    }
    if needs[1] {
        let mut dw = vec![0.0; cout * ckk];
        gemm(1.0, dy.data(), Layout::row_major(cout, hw), cols, Layout::transposed(ckk, hw), 0.0, &mut dw, Layout::row_major(cout, ckk));
        grads[1] = Some(Tensor::from_parts(w.shape().to_vec(), dw));
    }
    if inputs.len() == 3 && needs[2] {
        grads[2] = Some(Tensor::from_parts(vec![cout], row_sums(dy.data(), hw)));
    }
    grads
}

pub(crate) fn max_pool2d_forward(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.ndim() != 3 || size == 0 || x.shape()[1] < size || x.shape()[2] < size {
        return Err(Error::shape("max_pool2d", format!("cannot pool {} with window {size}", x.dims())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h / size, w / size);
    let mut y = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    let src = x.data();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = usize::MAX;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = (ch * h + oy * size + dy) * w + ox * size + dx;
                        if best == usize::MAX || src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                y.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, ho, wo], y), arg))
}
