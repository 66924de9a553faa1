//! LSTM and per-step dense layers over `(T, B, D)` sequences.
//!
//! Parameters live in flat slices. LSTM layout: `W_x (D_in x 4H)`,
//! `W_h (H x 4H)`, `b (4H)`, gate order input, forget, cell, output.
//! Dense layout: `W (D_in x D_out)`, `b (D_out)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) enum LayerCache {
    Lstm {
        /// Activated gates `(T*B, 4H)`.
        gates: Array2<f64>,
        c: Array3<f64>,
        tanh_c: Array3<f64>,
        h: Array3<f64>,
    },
    Dense {
        out: Array3<f64>,
    },
}

impl LayerCache {
    pub(crate) fn output(&self) -> &Array3<f64> {
        match self {
            LayerCache::Lstm { h, .. } => h,
            LayerCache::Dense { out } => out,
        }
    }
}

fn unflat(a: Array2<f64>, t: usize, b: usize) -> Array3<f64> {
    let d = a.ncols();
    let a = if a.is_standard_layout() { a } else { a.as_standard_layout().into_owned() };
    a.into_shape_with_order((t, b, d)).unwrap()
}

fn flat(x: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (t, b, d) = x.dim();
    x.view()
        .into_shape_with_order((t * b, d))
        .expect("sequence tensors are kept in standard layout")
}

pub(crate) fn lstm_forward(p: &[f64], din: usize, hd: usize, x: &Array3<f64>) -> LayerCache {
    let (t_len, b, _) = x.dim();
    let g4 = 4 * hd;
    let (wx, rest) = p.split_at(din * g4);
    let (wh, bias) = rest.split_at(hd * g4);
    let wx = ArrayView2::from_shape((din, g4), wx).unwrap();
    let wh = ArrayView2::from_shape((hd, g4), wh).unwrap();

    let mut gates = flat(x).dot(&wx).as_standard_layout().into_owned();
    gates += &ArrayView1::from(bias);
    let mut c = Array3::<f64>::zeros((t_len, b, hd));
    let mut tanh_c = Array3::<f64>::zeros((t_len, b, hd));
    let mut h = Array3::<f64>::zeros((t_len, b, hd));
    let step = b * hd;
    {
        let gs = gates.as_slice_mut().unwrap();
        let cs = c.as_slice_mut().unwrap();
        let ts = tanh_c.as_slice_mut().unwrap();
        let hs = h.as_slice_mut().unwrap();
        for t in 0..t_len {
            let zt = &mut gs[t * b * g4..(t + 1) * b * g4];
            if t > 0 {
                let hp = ArrayView2::from_shape((b, hd), &hs[(t - 1) * step..t * step]).unwrap();
                let mut zv = ArrayViewMut2::from_shape((b, g4), &mut *zt).unwrap();
                general_mat_mul(1.0, &hp, &wh, 1.0, &mut zv);
            }
            for bi in 0..b {
                let z = &mut zt[bi * g4..(bi + 1) * g4];
                for j in 0..hd {
                    let i_g = sigmoid(z[j]);
                    let f_g = sigmoid(z[hd + j]);
                    let g_g = z[2 * hd + j].tanh();
                    let o_g = sigmoid(z[3 * hd + j]);
                    z[j] = i_g;
                    z[hd + j] = f_g;
                    z[2 * hd + j] = g_g;
                    z[3 * hd + j] = o_g;
                    let k = t * step + bi * hd + j;
                    let c_prev = if t > 0 { cs[k - step] } else { 0.0 };
                    let ct = f_g * c_prev + i_g * g_g;
                    let tc = ct.tanh();
                    cs[k] = ct;
                    ts[k] = tc;
                    hs[k] = o_g * tc;
                }
            }
        }
    }
    LayerCache::Lstm { gates, c, tanh_c, h }
}

/// Accumulates parameter gradients into `g`; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward(
    p: &[f64],
    g: &mut [f64],
    din: usize,
    hd: usize,
    x: &Array3<f64>,
    cache: &LayerCache,
    dh_out: &Array3<f64>,
    need_dx: bool,
) -> Option<Array3<f64>> {
    let LayerCache::Lstm { gates, c, tanh_c, h } = cache else {
        unreachable!("lstm_backward on a dense cache")
    };
    let (t_len, b, _) = x.dim();
    let g4 = 4 * hd;
    let step = b * hd;
    let (wx, rest) = p.split_at(din * g4);
    let (wh, _) = rest.split_at(hd * g4);
    let wx = ArrayView2::from_shape((din, g4), wx).unwrap();
    let wh = ArrayView2::from_shape((hd, g4), wh).unwrap();

    let mut dz = Array2::<f64>::zeros((t_len * b, g4));
    let mut dh_next = Array2::<f64>::zeros((b, hd));
    let mut dc_next = vec![0.0; step];
    let gs = gates.as_slice().unwrap();
    let cs = c.as_slice().unwrap();
    let ts = tanh_c.as_slice().unwrap();
    let dho = dh_out.as_slice().unwrap();
    for t in (0..t_len).rev() {
        {
            let dzs = dz.as_slice_mut().unwrap();
            let dhn = dh_next.as_slice().unwrap();
            for bi in 0..b {
                let gb = &gs[(t * b + bi) * g4..(t * b + bi + 1) * g4];
                let dzb = &mut dzs[(t * b + bi) * g4..(t * b + bi + 1) * g4];
                for j in 0..hd {
                    let k = t * step + bi * hd + j;
                    let (i_g, f_g, g_g, o_g) = (gb[j], gb[hd + j], gb[2 * hd + j], gb[3 * hd + j]);
                    let dh = dho[k] + dhn[bi * hd + j];
                    let tc = ts[k];
                    let d_o = dh * tc;
                    let dc = dc_next[bi * hd + j] + dh * o_g * (1.0 - tc * tc);
                    let c_prev = if t > 0 { cs[k - step] } else { 0.0 };
                    dzb[j] = dc * g_g * i_g * (1.0 - i_g);
                    dzb[hd + j] = dc * c_prev * f_g * (1.0 - f_g);
                    dzb[2 * hd + j] = dc * i_g * (1.0 - g_g * g_g);
                    dzb[3 * hd + j] = d_o * o_g * (1.0 - o_g);
                    dc_next[bi * hd + j] = dc * f_g;
                }
            }
        }
        if t > 0 {
            let dzt = dz.slice(ndarray::s![t * b..(t + 1) * b, ..]);
            general_mat_mul(1.0, &dzt, &wh.t(), 0.0, &mut dh_next);
        }
    }

    let (gwx, rest) = g.split_at_mut(din * g4);
    let (gwh, gb) = rest.split_at_mut(hd * g4);
    let mut gwx = ArrayViewMut2::from_shape((din, g4), gwx).unwrap();
    general_mat_mul(1.0, &flat(x).t(), &dz, 1.0, &mut gwx);
    if t_len > 1 {
        let mut gwh = ArrayViewMut2::from_shape((hd, g4), gwh).unwrap();
        let h_prev = flat(h).slice_move(ndarray::s![..(t_len - 1) * b, ..]);
        let dz_next = dz.slice(ndarray::s![b.., ..]);
        general_mat_mul(1.0, &h_prev.t(), &dz_next, 1.0, &mut gwh);
    }
    let mut gb = ArrayViewMut1::from(gb);
    gb += &dz.sum_axis(Axis(0));

    need_dx.then(|| unflat(dz.dot(&wx.t()), t_len, b))
}

pub(crate) fn dense_forward(p: &[f64], din: usize, dout: usize, relu: bool, x: &Array3<f64>) -> LayerCache {
    let (t_len, b, _) = x.dim();
    let (w, bias) = p.split_at(din * dout);
    let w = ArrayView2::from_shape((din, dout), w).unwrap();
    let mut out = flat(x).dot(&w);
    out += &ArrayView1::from(bias);
    if relu {
        out.mapv_inplace(|v| v.max(0.0));
    }
    LayerCache::Dense {
        out: unflat(out, t_len, b),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    p: &[f64],
    g: &mut [f64],
    din: usize,
    dout: usize,
    relu: bool,
    x: &Array3<f64>,
    cache: &LayerCache,
    dy: &Array3<f64>,
    need_dx: bool,
) -> Option<Array3<f64>> {
    let (t_len, b, _) = x.dim();
    let mut dpre = flat(dy).to_owned();
    if relu {
        let out = flat(cache.output());
        dpre.zip_mut_with(&out, |d, &o| {
            if o <= 0.0 {
                *d = 0.0
            }
        });
    }
    let (gw, gb) = g.split_at_mut(din * dout);
    let mut gw = ArrayViewMut2::from_shape((din, dout), gw).unwrap();
    general_mat_mul(1.0, &flat(x).t(), &dpre, 1.0, &mut gw);
    let mut gb = ArrayViewMut1::from(gb);
    gb += &dpre.sum_axis(Axis(0));
    need_dx.then(|| {
        let w = ArrayView2::from_shape((din, dout), &p[..din * dout]).unwrap();
        unflat(dpre.dot(&w.t()), t_len, b)
    })
}
