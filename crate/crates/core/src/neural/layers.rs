//! Forward and backward kernels for each layer kind.

use super::spec::{sigmoid, Activation};
use super::tensor::{accumulate_dwt, accumulate_outer, accumulate_xw, Tensor2, Tensor3};

pub(crate) struct DenseCache {
    input: Tensor2,
    output: Tensor2,
}

pub(crate) fn dense_forward(
    p: &[f64],
    x: &Tensor2,
    output: usize,
    act: Activation,
) -> (Tensor2, DenseCache) {
    let input = x.cols;
    let (w, b) = p.split_at(input * output);
    let mut y = Tensor2::zeros(x.rows, output);
    for r in 0..x.rows {
        let out = y.row_mut(r);
        out.copy_from_slice(b);
        accumulate_xw(x.row(r), w, output, out);
        for v in out.iter_mut() {
            *v = act.apply(*v);
        }
    }
    let cache = DenseCache { input: x.clone(), output: y.clone() };
    (y, cache)
}

pub(crate) fn dense_backward(
    p: &[f64],
    cache: &DenseCache,
    act: Activation,
    dy: &Tensor2,
    grad: &mut [f64],
) -> Tensor2 {
    let input = cache.input.cols;
    let output = dy.cols;
    let (w, _) = p.split_at(input * output);
    let (gw, gb) = grad.split_at_mut(input * output);
    let mut dx = Tensor2::zeros(dy.rows, input);
    let mut dz = vec![0.0; output];
    for r in 0..dy.rows {
        for ((d, &g), &y) in dz.iter_mut().zip(dy.row(r)).zip(cache.output.row(r)) {
            *d = g * act.derivative_from_output(y);
        }
        for (b, &d) in gb.iter_mut().zip(&dz) {
            *b += d;
        }
        accumulate_outer(cache.input.row(r), &dz, gw);
        accumulate_dwt(&dz, w, dx.row_mut(r));
    }
    dx
}

pub(crate) struct LstmCache {
    input: Tensor3,
    hidden: usize,
    /// `(batch, time + 1, hidden)`, index 0 is the zero initial state.
    h: Vec<f64>,
    c: Vec<f64>,
    /// Post-activation gates `(batch, time, 4 * hidden)`, order i, f, g, o.
    gates: Vec<f64>,
}

fn lstm_slices(p: &[f64], input: usize, hidden: usize) -> (&[f64], &[f64], &[f64]) {
    let g = 4 * hidden;
    let (w, rest) = p.split_at(input * g);
    let (u, b) = rest.split_at(hidden * g);
    (w, u, b)
}

pub(crate) fn lstm_forward(p: &[f64], x: &Tensor3, hidden: usize) -> (Tensor3, LstmCache) {
    let (batch, time, input) = (x.batch, x.time, x.features);
    let (w, u, bias) = lstm_slices(p, input, hidden);
    let g4 = 4 * hidden;
    let mut h = vec![0.0; batch * (time + 1) * hidden];
    let mut c = vec![0.0; batch * (time + 1) * hidden];
    let mut gates = vec![0.0; batch * time * g4];
    let mut out = Tensor3::zeros(batch, time, hidden);
    let mut a = vec![0.0; g4];
    for bi in 0..batch {
        for t in 0..time {
            let hp = (bi * (time + 1) + t) * hidden;
            let hn = hp + hidden;
            a.copy_from_slice(bias);
            accumulate_xw(x.step(bi, t), w, g4, &mut a);
            accumulate_xw(&h[hp..hn], u, g4, &mut a);
            let go = (bi * time + t) * g4;
            for k in 0..hidden {
                let i = sigmoid(a[k]);
                let f = sigmoid(a[hidden + k]);
                let gg = a[2 * hidden + k].tanh();
                let o = sigmoid(a[3 * hidden + k]);
                gates[go + k] = i;
                gates[go + hidden + k] = f;
                gates[go + 2 * hidden + k] = gg;
                gates[go + 3 * hidden + k] = o;
                let cn = f * c[hp + k] + i * gg;
                c[hn + k] = cn;
                h[hn + k] = o * cn.tanh();
            }
            out.step_mut(bi, t).copy_from_slice(&h[hn..hn + hidden]);
        }
    }
    let cache = LstmCache { input: x.clone(), hidden, h, c, gates };
    (out, cache)
}

pub(crate) fn lstm_backward(p: &[f64], cache: &LstmCache, dout: &Tensor3, grad: &mut [f64]) -> Tensor3 {
    let x = &cache.input;
    let (batch, time, input) = (x.batch, x.time, x.features);
    let hidden = cache.hidden;
    let g4 = 4 * hidden;
    let (w, u, _) = lstm_slices(p, input, hidden);
    let (gw, rest) = grad.split_at_mut(input * g4);
    let (gu, gb) = rest.split_at_mut(hidden * g4);
    let mut dx = Tensor3::zeros(batch, time, input);
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut da = vec![0.0; g4];
    for bi in 0..batch {
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        dc_next.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..time).rev() {
            let hp = (bi * (time + 1) + t) * hidden;
            let hn = hp + hidden;
            let go = (bi * time + t) * g4;
            let dy = dout.step(bi, t);
            for k in 0..hidden {
                let i = cache.gates[go + k];
                let f = cache.gates[go + hidden + k];
                let gg = cache.gates[go + 2 * hidden + k];
                let o = cache.gates[go + 3 * hidden + k];
                let tc = cache.c[hn + k].tanh();
                let dh = dy[k] + dh_next[k];
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                da[k] = dc * gg * i * (1.0 - i);
                da[hidden + k] = dc * cache.c[hp + k] * f * (1.0 - f);
                da[2 * hidden + k] = dc * i * (1.0 - gg * gg);
                da[3 * hidden + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            for (b, &d) in gb.iter_mut().zip(&da) {
                *b += d;
            }
            accumulate_outer(x.step(bi, t), &da, gw);
            accumulate_outer(&cache.h[hp..hn], &da, gu);
            accumulate_dwt(&da, w, dx.step_mut(bi, t));
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            accumulate_dwt(&da, u, &mut dh_next);
        }
    }
    dx
}

pub(crate) struct GruCache {
    input: Tensor3,
    hidden: usize,
    h: Vec<f64>,
    /// Post-activation `(batch, time, 3 * hidden)`, order z, r, n.
    gates: Vec<f64>,
}

fn gru_slices(p: &[f64], input: usize, hidden: usize) -> (&[f64], &[f64], &[f64]) {
    let g = 3 * hidden;
    let (w, rest) = p.split_at(input * g);
    let (u, b) = rest.split_at(hidden * g);
    (w, u, b)
}

/// Recurrent contribution of gate block `block` of `u` for hidden vector `h`.
fn gru_recurrent(u: &[f64], hidden: usize, block: usize, h: &[f64], out: &mut [f64]) {
    let g3 = 3 * hidden;
    for (i, &hi) in h.iter().enumerate() {
        if hi == 0.0 {
            continue;
        }
        let row = &u[i * g3 + block * hidden..i * g3 + (block + 1) * hidden];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += hi * v;
        }
    }
}

pub(crate) fn gru_forward(p: &[f64], x: &Tensor3, hidden: usize) -> (Tensor3, GruCache) {
    let (batch, time, input) = (x.batch, x.time, x.features);
    let (w, u, bias) = gru_slices(p, input, hidden);
    let g3 = 3 * hidden;
    let mut h = vec![0.0; batch * (time + 1) * hidden];
    let mut gates = vec![0.0; batch * time * g3];
    let mut out = Tensor3::zeros(batch, time, hidden);
    let mut a = vec![0.0; g3];
    let mut rec = vec![0.0; hidden];
    let mut rh = vec![0.0; hidden];
    for bi in 0..batch {
        for t in 0..time {
            let hp = (bi * (time + 1) + t) * hidden;
            let hn = hp + hidden;
            a.copy_from_slice(bias);
            accumulate_xw(x.step(bi, t), w, g3, &mut a);
            let hprev = h[hp..hn].to_vec();
            // z and r blocks
            for block in 0..2 {
                rec.iter_mut().for_each(|v| *v = 0.0);
                gru_recurrent(u, hidden, block, &hprev, &mut rec);
                for k in 0..hidden {
                    a[block * hidden + k] += rec[k];
                }
            }
            let go = (bi * time + t) * g3;
            for k in 0..hidden {
                let z = sigmoid(a[k]);
                let r = sigmoid(a[hidden + k]);
                gates[go + k] = z;
                gates[go + hidden + k] = r;
                rh[k] = r * hprev[k];
            }
            rec.iter_mut().for_each(|v| *v = 0.0);
            gru_recurrent(u, hidden, 2, &rh, &mut rec);
            for k in 0..hidden {
                let n = (a[2 * hidden + k] + rec[k]).tanh();
                gates[go + 2 * hidden + k] = n;
                let z = gates[go + k];
                h[hn + k] = (1.0 - z) * n + z * hprev[k];
            }
            out.step_mut(bi, t).copy_from_slice(&h[hn..hn + hidden]);
        }
    }
    let cache = GruCache { input: x.clone(), hidden, h, gates };
    (out, cache)
}

pub(crate) fn gru_backward(p: &[f64], cache: &GruCache, dout: &Tensor3, grad: &mut [f64]) -> Tensor3 {
    let x = &cache.input;
    let (batch, time, input) = (x.batch, x.time, x.features);
    let hidden = cache.hidden;
    let g3 = 3 * hidden;
    let (w, u, _) = gru_slices(p, input, hidden);
    let (gw, rest) = grad.split_at_mut(input * g3);
    let (gu, gb) = rest.split_at_mut(hidden * g3);
    let mut dx = Tensor3::zeros(batch, time, input);
    let mut dh_next = vec![0.0; hidden];
    let mut da = vec![0.0; g3];
    let mut drh = vec![0.0; hidden];
    let mut rh = vec![0.0; hidden];
    for bi in 0..batch {
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..time).rev() {
            let hp = (bi * (time + 1) + t) * hidden;
            let hprev = &cache.h[hp..hp + hidden];
            let go = (bi * time + t) * g3;
            let dy = dout.step(bi, t);
            let mut dh_prev = vec![0.0; hidden];
            for k in 0..hidden {
                let z = cache.gates[go + k];
                let n = cache.gates[go + 2 * hidden + k];
                let dh = dy[k] + dh_next[k];
                dh_prev[k] = dh * z;
                da[k] = dh * (hprev[k] - n) * z * (1.0 - z);
                da[2 * hidden + k] = dh * (1.0 - z) * (1.0 - n * n);
                rh[k] = cache.gates[go + hidden + k] * hprev[k];
            }
            // d(r*h) through the candidate's recurrent block
            for (i, d) in drh.iter_mut().enumerate() {
                let row = &u[i * g3 + 2 * hidden..i * g3 + 3 * hidden];
                *d = row.iter().zip(&da[2 * hidden..]).map(|(a, b)| a * b).sum();
            }
            for k in 0..hidden {
                let r = cache.gates[go + hidden + k];
                dh_prev[k] += drh[k] * r;
                da[hidden + k] = drh[k] * hprev[k] * r * (1.0 - r);
            }
            for (b, &d) in gb.iter_mut().zip(&da) {
                *b += d;
            }
            accumulate_outer(x.step(bi, t), &da, gw);
            // recurrent grads: z, r blocks use h_prev, n block uses r*h_prev
            for i in 0..hidden {
                let row = &mut gu[i * g3..(i + 1) * g3];
                for k in 0..hidden {
                    row[k] += hprev[i] * da[k];
                    row[hidden + k] += hprev[i] * da[hidden + k];
                    row[2 * hidden + k] += rh[i] * da[2 * hidden + k];
                }
            }
            accumulate_dwt(&da, w, dx.step_mut(bi, t));
            for (i, dhp) in dh_prev.iter_mut().enumerate() {
                let row = &u[i * g3..i * g3 + 2 * hidden];
                *dhp += row.iter().zip(&da[..2 * hidden]).map(|(a, b)| a * b).sum::<f64>();
            }
            dh_next.copy_from_slice(&dh_prev);
        }
    }
    dx
}

pub(crate) struct BidirCache {
    forward: LstmCache,
    backward: LstmCache,
}

pub(crate) fn bidir_forward(p: &[f64], x: &Tensor3, hidden: usize) -> (Tensor3, BidirCache) {
    let (pf, pb) = p.split_at(p.len() / 2);
    let (of, cf) = lstm_forward(pf, x, hidden);
    let (ob_rev, cb) = lstm_forward(pb, &x.reversed_time(), hidden);
    let ob = ob_rev.reversed_time();
    let mut out = Tensor3::zeros(x.batch, x.time, 2 * hidden);
    for b in 0..x.batch {
        for t in 0..x.time {
            let s = out.step_mut(b, t);
            s[..hidden].copy_from_slice(of.step(b, t));
            s[hidden..].copy_from_slice(ob.step(b, t));
        }
    }
    (out, BidirCache { forward: cf, backward: cb })
}

pub(crate) fn bidir_backward(p: &[f64], cache: &BidirCache, dout: &Tensor3, grad: &mut [f64]) -> Tensor3 {
    let hidden = cache.forward.hidden;
    let (pf, pb) = p.split_at(p.len() / 2);
    let (gf, gb) = grad.split_at_mut(grad.len() / 2);
    let mut df = Tensor3::zeros(dout.batch, dout.time, hidden);
    let mut db = Tensor3::zeros(dout.batch, dout.time, hidden);
    for b in 0..dout.batch {
        for t in 0..dout.time {
            let s = dout.step(b, t);
            df.step_mut(b, t).copy_from_slice(&s[..hidden]);
            db.step_mut(b, t).copy_from_slice(&s[hidden..]);
        }
    }
    let mut dx = lstm_backward(pf, &cache.forward, &df, gf);
    let dx_b = lstm_backward(pb, &cache.backward, &db.reversed_time(), gb).reversed_time();
    for (a, b) in dx.data.iter_mut().zip(&dx_b.data) {
        *a += b;
    }
    dx
}

pub(crate) fn last_step_forward(x: &Tensor3, backward_from: Option<usize>) -> Tensor2 {
    let split = backward_from.unwrap_or(x.features);
    let mut out = Tensor2::zeros(x.batch, x.features);
    for b in 0..x.batch {
        let row = out.row_mut(b);
        row[..split].copy_from_slice(&x.step(b, x.time - 1)[..split]);
        row[split..].copy_from_slice(&x.step(b, 0)[split..]);
    }
    out
}

pub(crate) fn last_step_backward(dy: &Tensor2, time: usize, backward_from: Option<usize>) -> Tensor3 {
    let split = backward_from.unwrap_or(dy.cols);
    let mut dx = Tensor3::zeros(dy.rows, time, dy.cols);
    for b in 0..dy.rows {
        let row = dy.row(b);
        dx.step_mut(b, time - 1)[..split].copy_from_slice(&row[..split]);
        dx.step_mut(b, 0)[split..].copy_from_slice(&row[split..]);
    }
    dx
}
