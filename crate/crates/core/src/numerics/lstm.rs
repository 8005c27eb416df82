//! LSTM cell and batched bidirectional LSTM kernels.
//!
//! Gate order inside the `4H` axis is input, forget, cell, output. The
//! recurrence is the standard peephole-free formulation:
//!
//! ```text
//! i = σ(z_i)  f = σ(z_f)  g = tanh(z_g)  o = σ(z_o)
//! c' = f ∘ c + i ∘ g
//! h' = o ∘ tanh(c')
//! ```

use super::gemm::{gemm, Layout};
use super::ops::sigmoid;
use super::par;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) struct CellCache {
    /// Activated gates `(B, 4H)`.
    gates: Vec<f64>,
    /// New cell state `(B, H)`.
    cell: Vec<f64>,
}

/// Per-direction activations kept for the backward pass, all `(B * T, ·)`
/// with row `b * T + t`.
pub(crate) struct DirCache {
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
}

fn check_weights(op: &'static str, w_ih: &Tensor, w_hh: &Tensor, b: &Tensor, input: usize) -> Result<usize> {
    if w_hh.ndim() != 2 || w_hh.shape()[0] != 4 * w_hh.shape()[1] {
        return Err(Error::shape(op, format!("w_hh must be (4H, H), got {}", w_hh.dims())));
    }
    let hidden = w_hh.shape()[1];
    if w_ih.shape() != [4 * hidden, input] {
        return Err(Error::shape(
            op,
            format!("w_ih must be {}x{input}, got {}", 4 * hidden, w_ih.dims()),
        ));
    }
    if b.shape() != [4 * hidden] {
        return Err(Error::shape(op, format!("bias must be {}, got {}", 4 * hidden, b.dims())));
    }
    Ok(hidden)
}

/// Activates one row of pre-activations in place and advances the cell.
#[inline]
fn activate_row(z: &mut [f64], c_prev: Option<&[f64]>, c: &mut [f64], tc: &mut [f64], h: &mut [f64]) {
    let hidden = c.len();
    let (zi, rest) = z.split_at_mut(hidden);
    let (zf, rest) = rest.split_at_mut(hidden);
    let (zg, zo) = rest.split_at_mut(hidden);
    for j in 0..hidden {
        let i = sigmoid(zi[j]);
        let f = sigmoid(zf[j]);
        let g = zg[j].tanh();
        let o = sigmoid(zo[j]);
        zi[j] = i;
        zf[j] = f;
        zg[j] = g;
        zo[j] = o;
        let prev = c_prev.map_or(0.0, |p| p[j]);
        let cj = f * prev + i * g;
        let t = cj.tanh();
        c[j] = cj;
        tc[j] = t;
        h[j] = o * t;
    }
}

/// Backward through one activated row. `dc` carries the incoming cell
/// gradient and leaves holding the gradient for the previous cell.
#[inline]
fn backprop_row(a: &[f64], c_prev: Option<&[f64]>, tc: &[f64], dh: &[f64], dc: &mut [f64], dz: &mut [f64]) {
    let hidden = dh.len();
    for j in 0..hidden {
        let (i, f, g, o) = (a[j], a[hidden + j], a[2 * hidden + j], a[3 * hidden + j]);
        let t = tc[j];
        let d_o = dh[j] * t;
        let dcj = dc[j] + dh[j] * o * (1.0 - t * t);
        let prev = c_prev.map_or(0.0, |p| p[j]);
        dz[j] = dcj * g * i * (1.0 - i);
        dz[hidden + j] = dcj * prev * f * (1.0 - f);
        dz[2 * hidden + j] = dcj * i * (1.0 - g * g);
        dz[3 * hidden + j] = d_o * o * (1.0 - o);
        dc[j] = dcj * f;
    }
}

pub(crate) fn cell_forward(inputs: &[&Tensor]) -> Result<(Tensor, CellCache)> {
    let [x, h, c, w_ih, w_hh, b] = inputs else { unreachable!() };
    if x.ndim() != 2 {
        return Err(Error::shape("lstm_cell", format!("x must be (B, In), got {}", x.dims())));
    }
    let (batch, input) = (x.shape()[0], x.shape()[1]);
    let hidden = check_weights("lstm_cell", w_ih, w_hh, b, input)?;
    if h.shape() != [batch, hidden] || c.shape() != [batch, hidden] {
        return Err(Error::shape(
            "lstm_cell",
            format!("state must be {batch}x{hidden}, got h {} c {}", h.dims(), c.dims()),
        ));
    }
    let g4 = 4 * hidden;
    let mut z = b.data().repeat(batch);
    gemm(1.0, x.data(), Layout::row_major(batch, input), w_ih.data(), Layout::transposed(g4, input), 1.0, &mut z, Layout::row_major(batch, g4));
    gemm(1.0, h.data(), Layout::row_major(batch, hidden), w_hh.data(), Layout::transposed(g4, hidden), 1.0, &mut z, Layout::row_major(batch, g4));
    let mut out = vec![0.0; 2 * batch * hidden];
    let (h_out, c_out) = out.split_at_mut(batch * hidden);
    let mut tc = vec![0.0; hidden];
    for bi in 0..batch {
        let r = bi * hidden..(bi + 1) * hidden;
        activate_row(
            &mut z[bi * g4..(bi + 1) * g4],
            Some(&c.data()[r.clone()]),
            &mut c_out[r.clone()],
            &mut tc,
            &mut h_out[r],
        );
    }
    let cell = c_out.to_vec();
    Ok((Tensor::from_parts(vec![2, batch, hidden], out), CellCache { gates: z, cell }))
}

pub(crate) fn cell_backward(inputs: &[&Tensor], cache: &CellCache, dy: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let [x, h, c, w_ih, w_hh, _] = inputs else { unreachable!() };
    let (batch, input) = (x.shape()[0], x.shape()[1]);
    let hidden = h.shape()[1];
    let g4 = 4 * hidden;
    let (dh, dc_in) = dy.data().split_at(batch * hidden);
    let mut dc = dc_in.to_vec();
    let mut dz = vec![0.0; batch * g4];
    for bi in 0..batch {
        let r = bi * hidden..(bi + 1) * hidden;
        let tc: Vec<f64> = cache.cell[r.clone()].iter().map(|v| v.tanh()).collect();
        backprop_row(
            &cache.gates[bi * g4..(bi + 1) * g4],
            Some(&c.data()[r.clone()]),
            &tc,
            &dh[r.clone()],
            &mut dc[r],
            &mut dz[bi * g4..(bi + 1) * g4],
        );
    }
    let zl = Layout::row_major(batch, g4);
    let mut grads = vec![None; 6];
    if needs[0] {
        let mut dx = vec![0.0; batch * input];
        gemm(1.0, &dz, zl, w_ih.data(), Layout::row_major(g4, input), 0.0, &mut dx, Layout::row_major(batch, input));
        grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
    }
    if needs[1] {
        let mut dhp = vec![0.0; batch * hidden];
        gemm(1.0, &dz, zl, w_hh.data(), Layout::row_major(g4, hidden), 0.0, &mut dhp, Layout::row_major(batch, hidden));
        grads[1] = Some(Tensor::from_parts(h.shape().to_vec(), dhp));
    }
    if needs[2] {
        grads[2] = Some(Tensor::from_parts(c.shape().to_vec(), dc));
    }
    if needs[3] {
        let mut dw = vec![0.0; g4 * input];
        gemm(1.0, &dz, Layout::transposed(batch, g4), x.data(), Layout::row_major(batch, input), 0.0, &mut dw, Layout::row_major(g4, input));
        grads[3] = Some(Tensor::from_parts(w_ih.shape().to_vec(), dw));
    }
    if needs[4] {
        let mut dw = vec![0.0; g4 * hidden];
        gemm(1.0, &dz, Layout::transposed(batch, g4), h.data(), Layout::row_major(batch, hidden), 0.0, &mut dw, Layout::row_major(g4, hidden));
        grads[4] = Some(Tensor::from_parts(w_hh.shape().to_vec(), dw));
    }
    if needs[5] {
        grads[5] = Some(Tensor::from_parts(vec![g4], column_sums(&dz, g4)));
    }
    grads
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in m.chunks(cols) {
        for (a, b) in out.iter_mut().zip(row) {
            *a += b;
        }
    }
    out
}

/// Time index visited at `step` by a direction.
#[inline]
fn time_at(step: usize, steps: usize, reverse: bool) -> usize {
    if reverse {
        steps - 1 - step
    } else {
        step
    }
}

fn direction_forward(x: &[f64], w_ih: &[f64], w_hh: &[f64], b: &[f64], d: Dims, reverse: bool) -> DirCache {
    let Dims { batch, steps, input, hidden } = d;
    let g4 = 4 * hidden;
    let rows = batch * steps;
    let mut gates = b.repeat(rows);
    gemm(1.0, x, Layout::row_major(rows, input), w_ih, Layout::transposed(g4, input), 1.0, &mut gates, Layout::row_major(rows, g4));
    let mut cell = vec![0.0; rows * hidden];
    let mut tanh_cell = vec![0.0; rows * hidden];
    let mut hidden_out = vec![0.0; rows * hidden];
    for step in 0..steps {
        let t = time_at(step, steps, reverse);
        if step > 0 {
            let tp = time_at(step - 1, steps, reverse);
            // z[:, t] += h[:, tp] W_hh^T, rows strided by T.
            gemm(
                1.0,
                &hidden_out[tp * hidden..],
                Layout::row_major(batch, hidden).with_row_stride(steps * hidden),
                w_hh,
                Layout::transposed(g4, hidden),
                1.0,
                &mut gates[t * g4..],
                Layout::row_major(batch, g4).with_row_stride(steps * g4),
            );
        }
        for bi in 0..batch {
            let row = bi * steps + t;
            let r = row * hidden..(row + 1) * hidden;
            let (c_prev, c_cur) = if step > 0 {
                let prow = bi * steps + time_at(step - 1, steps, reverse);
                split_rows(&mut cell, prow, row, hidden)
            } else {
                (None, &mut cell[r.clone()])
            };
            activate_row(&mut gates[row * g4..(row + 1) * g4], c_prev, c_cur, &mut tanh_cell[r.clone()], &mut hidden_out[r]);
        }
    }
    DirCache {
        gates,
        cell,
        tanh_cell,
        hidden: hidden_out,
    }
}

/// Borrows row `prev` immutably and row `cur` mutably from a row-major buffer.
fn split_rows(buf: &mut [f64], prev: usize, cur: usize, width: usize) -> (Option<&[f64]>, &mut [f64]) {
    if prev < cur {
        let (lo, hi) = buf.split_at_mut(cur * width);
        (Some(&lo[prev * width..(prev + 1) * width]), &mut hi[..width])
    } else {
        let (lo, hi) = buf.split_at_mut(prev * width);
        (Some(&hi[..width]), &mut lo[cur * width..(cur + 1) * width])
    }
}

struct DirGrads {
    dx: Option<Vec<f64>>,
    dw_ih: Vec<f64>,
    dw_hh: Vec<f64>,
    db: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn direction_backward(
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    cache: &DirCache,
    dh_seq: &[f64],
    d: Dims,
    reverse: bool,
    need_dx: bool,
) -> DirGrads {
    let Dims { batch, steps, input, hidden } = d;
    let g4 = 4 * hidden;
    let rows = batch * steps;
    let mut dz = vec![0.0; rows * g4];
    let mut dh_next = vec![0.0; batch * hidden];
    let mut dc = vec![0.0; batch * hidden];
    let mut dh = vec![0.0; hidden];
    for step in (0..steps).rev() {
        let t = time_at(step, steps, reverse);
        for bi in 0..batch {
            let row = bi * steps + t;
            let r = row * hidden..(row + 1) * hidden;
            for ((o, a), b) in dh.iter_mut().zip(&dh_seq[r.clone()]).zip(&dh_next[bi * hidden..(bi + 1) * hidden]) {
                *o = a + b;
            }
            let c_prev = (step > 0).then(|| {
                let prow = bi * steps + time_at(step - 1, steps, reverse);
                &cache.cell[prow * hidden..(prow + 1) * hidden]
            });
            backprop_row(
                &cache.gates[row * g4..(row + 1) * g4],
                c_prev,
                &cache.tanh_cell[r],
                &dh,
                &mut dc[bi * hidden..(bi + 1) * hidden],
                &mut dz[row * g4..(row + 1) * g4],
            );
        }
        if step > 0 {
            gemm(
                1.0,
                &dz[t * g4..],
                Layout::row_major(batch, g4).with_row_stride(steps * g4),
                w_hh,
                Layout::row_major(g4, hidden),
                0.0,
                &mut dh_next,
                Layout::row_major(batch, hidden),
            );
        }
    }
    // Hidden state that fed each step, zeros at each sequence start.
    let mut h_prev = vec![0.0; rows * hidden];
    for bi in 0..batch {
        for step in 1..steps {
            let row = bi * steps + time_at(step, steps, reverse);
            let prow = bi * steps + time_at(step - 1, steps, reverse);
            h_prev[row * hidden..(row + 1) * hidden].copy_from_slice(&cache.hidden[prow * hidden..(prow + 1) * hidden]);
        }
    }
    let dzt = Layout::transposed(rows, g4);
    let mut dw_hh = vec![0.0; g4 * hidden];
    gemm(1.0, &dz, dzt, &h_prev, Layout::row_major(rows, hidden), 0.0, &mut dw_hh, Layout::row_major(g4, hidden));
    let mut dw_ih = vec![0.0; g4 * input];
    gemm(1.0, &dz, dzt, x, Layout::row_major(rows, input), 0.0, &mut dw_ih, Layout::row_major(g4, input));
    let db = column_sums(&dz, g4);
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; rows * input];
        gemm(1.0, &dz, Layout::row_major(rows, g4), w_ih, Layout::row_major(g4, input), 0.0, &mut dx, Layout::row_major(rows, input));
        dx
    });
    DirGrads { dx, dw_ih, dw_hh, db }
}

fn bilstm_dims(inputs: &[&Tensor]) -> Result<Dims> {
    let x = inputs[0];
    if x.ndim() != 3 {
        return Err(Error::shape("bilstm_layer", format!("x must be (B, T, In), got {}", x.dims())));
    }
    let input = x.shape()[2];
    let hidden = check_weights("bilstm_layer", inputs[1], inputs[2], inputs[3], input)?;
    let hidden_b = check_weights("bilstm_layer", inputs[4], inputs[5], inputs[6], input)?;
    if hidden != hidden_b {
        return Err(Error::shape("bilstm_layer", format!("direction hidden sizes differ: {hidden} vs {hidden_b}")));
    }
    Ok(Dims {
        batch: x.shape()[0],
        steps: x.shape()[1],
        input,
        hidden,
    })
}

pub(crate) fn bilstm_forward(inputs: &[&Tensor]) -> Result<(Tensor, [DirCache; 2])> {
    let d = bilstm_dims(inputs)?;
    let x = inputs[0].data();
    let (fwd, bwd) = par::join(
        || direction_forward(x, inputs[1].data(), inputs[2].data(), inputs[3].data(), d, false),
        || direction_forward(x, inputs[4].data(), inputs[5].data(), inputs[6].data(), d, true),
    );
    let rows = d.batch * d.steps;
    let h = d.hidden;
    let mut out = vec![0.0; rows * 2 * h];
    for (r, dst) in out.chunks_mut(2 * h).enumerate() {
        dst[..h].copy_from_slice(&fwd.hidden[r * h..(r + 1) * h]);
        dst[h..].copy_from_slice(&bwd.hidden[r * h..(r + 1) * h]);
    }
    Ok((Tensor::from_parts(vec![d.batch, d.steps, 2 * h], out), [fwd, bwd]))
}

pub(crate) fn bilstm_backward(
    inputs: &[&Tensor],
    _out: &Tensor,
    caches: &[DirCache; 2],
    dy: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let d = bilstm_dims(inputs).expect("validated in forward");
    let rows = d.batch * d.steps;
    let h = d.hidden;
    let mut dh_f = Vec::with_capacity(rows * h);
    let mut dh_b = Vec::with_capacity(rows * h);
    for row in dy.data().chunks(2 * h) {
        dh_f.extend_from_slice(&row[..h]);
        dh_b.extend_from_slice(&row[h..]);
    }
    let x = inputs[0].data();
    let (mut gf, mut gb) = par::join(
        || direction_backward(x, inputs[1].data(), inputs[2].data(), &caches[0], &dh_f, d, false, needs[0]),
        || direction_backward(x, inputs[4].data(), inputs[5].data(), &caches[1], &dh_b, d, true, needs[0]),
    );
    let mut grads = Vec::with_capacity(7);
    grads.push(match (gf.dx.take(), gb.dx.take()) {
        (Some(mut a), Some(b)) => {
            for (p, q) in a.iter_mut().zip(&b) {
                *p += q;
            }
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), a))
        }
        _ => None,
    });
    for (offset, g) in [(1, gf), (4, gb)] {
        grads.push(Some(Tensor::from_parts(inputs[offset].shape().to_vec(), g.dw_ih)));
        grads.push(Some(Tensor::from_parts(inputs[offset + 1].shape().to_vec(), g.dw_hh)));
        grads.push(Some(Tensor::from_parts(inputs[offset + 2].shape().to_vec(), g.db)));
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{primitive_forward, OpKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Reference: unbatched loop over single cells.
    fn naive_direction(x: &Tensor, w_ih: &Tensor, w_hh: &Tensor, b: &Tensor, reverse: bool) -> Vec<f64> {
        let (batch, steps, input) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hidden = w_hh.shape()[1];
        let mut out = vec![0.0; batch * steps * hidden];
        for bi in 0..batch {
            let mut h = Tensor::zeros(vec![1, hidden]);
            let mut c = Tensor::zeros(vec![1, hidden]);
            for step in 0..steps {
                let t = time_at(step, steps, reverse);
                let row = bi * steps + t;
                let xt = Tensor::new(vec![1, input], x.data()[row * input..(row + 1) * input].to_vec()).unwrap();
                let y = primitive_forward(&OpKind::LstmCell, &[&xt, &h, &c, w_ih, w_hh, b]).unwrap();
                h = Tensor::new(vec![1, hidden], y.data()[..hidden].to_vec()).unwrap();
                c = Tensor::new(vec![1, hidden], y.data()[hidden..].to_vec()).unwrap();
                out[row * hidden..(row + 1) * hidden].copy_from_slice(h.data());
            }
        }
        out
    }

    #[test]
    fn batched_bilstm_matches_cell_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, t, i, h) = (3, 5, 4, 2);
        let x = Tensor::uniform(vec![b, t, i], 1.0, &mut rng);
        let p: Vec<Tensor> = [[4 * h, i], [4 * h, h]]
            .iter()
            .cycle()
            .take(2)
            .map(|s| Tensor::uniform(s.to_vec(), 0.5, &mut rng))
            .collect();
        let bias = Tensor::uniform(vec![4 * h], 0.5, &mut rng);
        let q: Vec<Tensor> = p.iter().map(|w| w.map(|v| -0.7 * v)).collect();
        let bias_b = bias.map(|v| v * 0.3);
        let y = primitive_forward(&OpKind::BiLstm, &[&x, &p[0], &p[1], &bias, &q[0], &q[1], &bias_b]).unwrap();
        assert_eq!(y.shape(), &[b, t, 2 * h]);
        let fwd = naive_direction(&x, &p[0], &p[1], &bias, false);
        let bwd = naive_direction(&x, &q[0], &q[1], &bias_b, true);
        for r in 0..b * t {
            for j in 0..h {
                assert!((y.data()[r * 2 * h + j] - fwd[r * h + j]).abs() < 1e-12);
                assert!((y.data()[r * 2 * h + h + j] - bwd[r * h + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_weight_shapes() {
        let x = Tensor::zeros(vec![1, 2, 3]);
        let w_ih = Tensor::zeros(vec![8, 4]);
        let w_hh = Tensor::zeros(vec![8, 2]);
        let b = Tensor::zeros(vec![8]);
        let err = primitive_forward(&OpKind::BiLstm, &[&x, &w_ih, &w_hh, &b, &w_ih, &w_hh, &b]).unwrap_err();
        assert!(err.to_string().contains("bilstm_layer"));
    }
}
