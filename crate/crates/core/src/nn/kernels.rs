//! Layer-level forward and backward math. All buffers are channel-last
//! row-major; a dense layer treats the image as `pixels x channels`.

/// out[p][o] = b[o] + sum_i W[o][i] x[p][i]; used by dense and 1x1 conv.
pub(crate) fn dense_forward(
    params: &[f64],
    x: &[f64],
    pixels: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let (w, b) = params.split_at(cout * cin);
    let mut out = vec![0.0; pixels * cout];
    for p in 0..pixels {
        let xs = &x[p * cin..(p + 1) * cin];
        let os = &mut out[p * cout..(p + 1) * cout];
        for o in 0..cout {
            let ws = &w[o * cin..(o + 1) * cin];
            let mut acc = b[o];
            for i in 0..cin {
                acc += ws[i] * xs[i];
            }
            os[o] = acc;
        }
    }
    out
}

pub(crate) fn dense_backward(
    params: &[f64],
    x: &[f64],
    grad_out: &[f64],
    pixels: usize,
    cin: usize,
    cout: usize,
    grad_params: &mut [f64],
    grad_x: &mut [f64],
) {
    let w = &params[..cout * cin];
    let (gw, gb) = grad_params.split_at_mut(cout * cin);
    for p in 0..pixels {
        let xs = &x[p * cin..(p + 1) * cin];
        let gs = &grad_out[p * cout..(p + 1) * cout];
        let gxs = &mut grad_x[p * cin..(p + 1) * cin];
        for o in 0..cout {
            let g = gs[o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let ws = &w[o * cin..(o + 1) * cin];
            let gws = &mut gw[o * cin..(o + 1) * cin];
            for i in 0..cin {
                gws[i] += g * xs[i];
                gxs[i] += g * ws[i];
            }
        }
    }
}

/// 3x3 convolution, zero padding 1, stride 1 (shape preserving).
pub(crate) fn conv3_forward(
    params: &[f64],
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let (weights, bias) = params.split_at(cout * cin * 9);
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let os = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for o in 0..cout {
                let mut acc = bias[o];
                for ky in 0..3usize {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let xs = &x[(sy as usize * w + sx as usize) * cin..][..cin];
                        let ws = &weights[((o * cin) * 9 + ky * 3 + kx)..];
                        // weight layout: [o][i][ky][kx]
                        for i in 0..cin {
                            acc += ws[i * 9] * xs[i];
                        }
                    }
                }
                os[o] = acc;
            }
        }
    }
    out
}

pub(crate) fn conv3_backward(
    params: &[f64],
    x: &[f64],
    grad_out: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    grad_params: &mut [f64],
    grad_x: &mut [f64],
) {
    let weights = &params[..cout * cin * 9];
    let (gw, gb) = grad_params.split_at_mut(cout * cin * 9);
    for y in 0..h {
        for xx in 0..w {
            let gs = &grad_out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for o in 0..cout {
                let g = gs[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for ky in 0..3usize {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (sy as usize * w + sx as usize) * cin;
                        for i in 0..cin {
                            let widx = (o * cin + i) * 9 + ky * 3 + kx;
                            gw[widx] += g * x[base + i];
                            grad_x[base + i] += g * weights[widx];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn relu_backward(x: &[f64], grad_out: &[f64], grad_x: &mut [f64]) {
    for ((&xv, &g), gx) in x.iter().zip(grad_out.iter()).zip(grad_x.iter_mut()) {
        if xv > 0.0 {
            *gx += g;
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral self-attention
// ---------------------------------------------------------------------------

/// Workspace of the attention forward pass, reused by the backward pass.
pub(crate) struct AttentionState {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Row-stochastic attention matrices, one `dh x dh` matrix per head.
    pub attn: Vec<Vec<f64>>,
}

/// Spectral-wise self-attention over the channel dimension: the tokens are
/// the `dim` channel maps (each with `pixels` features), scores are scaled
/// by 1/sqrt(pixels), and the attended values are residual-added to x.
/// Params layout: Wq, Wk, Wv, each `dim x dim` row-major, no biases.
pub(crate) fn attention_forward(
    params: &[f64],
    x: &[f64],
    pixels: usize,
    dim: usize,
    heads: usize,
) -> (Vec<f64>, AttentionState) {
    let d2 = dim * dim;
    let wq = &params[..d2];
    let wk = &params[d2..2 * d2];
    let wv = &params[2 * d2..3 * d2];
    let no_bias = vec![0.0; dim];
    let project = |w: &[f64]| -> Vec<f64> {
        let mut full = Vec::with_capacity(d2 + dim);
        full.extend_from_slice(w);
        full.extend_from_slice(&no_bias);
        dense_forward(&full, x, pixels, dim, dim)
    };
    let q = project(wq);
    let k = project(wk);
    let v = project(wv);

    let dh = dim / heads;
    let scale = 1.0 / (pixels as f64).sqrt();
    let mut out = x.to_vec();
    let mut attn = Vec::with_capacity(heads);
    for head in 0..heads {
        let s0 = head * dh;
        // scores[a][b] = scale * <q channel s0+a, k channel s0+b>
        let mut scores = vec![0.0; dh * dh];
        for p in 0..pixels {
            let qs = &q[p * dim + s0..p * dim + s0 + dh];
            let ks = &k[p * dim + s0..p * dim + s0 + dh];
            for a in 0..dh {
                let qa = qs[a];
                let row = &mut scores[a * dh..(a + 1) * dh];
                for b in 0..dh {
                    row[b] += qa * ks[b];
                }
            }
        }
        for s in &mut scores {
            *s *= scale;
        }
        // row softmax
        let mut a_mat = vec![0.0; dh * dh];
        for a in 0..dh {
            let row = &scores[a * dh..(a + 1) * dh];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for b in 0..dh {
                let e = (row[b] - max).exp();
                a_mat[a * dh + b] = e;
                sum += e;
            }
            for b in 0..dh {
                a_mat[a * dh + b] /= sum;
            }
        }
        // out channel a gets sum_b A[a][b] * v channel b (residual added)
        for p in 0..pixels {
            let vs = &v[p * dim + s0..p * dim + s0 + dh];
            let os = &mut out[p * dim + s0..p * dim + s0 + dh];
            for a in 0..dh {
                let row = &a_mat[a * dh..(a + 1) * dh];
                let mut acc = 0.0;
                for b in 0..dh {
                    acc += row[b] * vs[b];
                }
                os[a] += acc;
            }
        }
        attn.push(a_mat);
    }
    (out, AttentionState { q, k, v, attn })
}

pub(crate) fn attention_backward(
    params: &[f64],
    x: &[f64],
    state: &AttentionState,
    grad_out: &[f64],
    pixels: usize,
    dim: usize,
    heads: usize,
    grad_params: &mut [f64],
    grad_x: &mut [f64],
) {
    let d2 = dim * dim;
    let dh = dim / heads;
    let scale = 1.0 / (pixels as f64).sqrt();

    // residual path
    for (gx, &g) in grad_x.iter_mut().zip(grad_out.iter()) {
        *gx += g;
    }

    let mut gq = vec![0.0; pixels * dim];
    let mut gk = vec![0.0; pixels * dim];
    let mut gv = vec![0.0; pixels * dim];

    for head in 0..heads {
        let s0 = head * dh;
        let a_mat = &state.attn[head];
        // dA[a][b] = sum_p g[p][a] v[p][b]; gv[p][b] += sum_a g[p][a] A[a][b]
        let mut d_attn = vec![0.0; dh * dh];
        for p in 0..pixels {
            let gs = &grad_out[p * dim + s0..p * dim + s0 + dh];
            let vs = &state.v[p * dim + s0..p * dim + s0 + dh];
            let gvs = &mut gv[p * dim + s0..p * dim + s0 + dh];
            for a in 0..dh {
                let g = gs[a];
                if g == 0.0 {
                    continue;
                }
                let row = &a_mat[a * dh..(a + 1) * dh];
                let drow = &mut d_attn[a * dh..(a + 1) * dh];
                for b in 0..dh {
                    drow[b] += g * vs[b];
                    gvs[b] += g * row[b];
                }
            }
        }
        // softmax backward per row
        let mut d_scores = vec![0.0; dh * dh];
        for a in 0..dh {
            let row = &a_mat[a * dh..(a + 1) * dh];
            let drow = &d_attn[a * dh..(a + 1) * dh];
            let dot: f64 = (0..dh).map(|b| drow[b] * row[b]).sum();
            for b in 0..dh {
                d_scores[a * dh + b] = row[b] * (drow[b] - dot);
            }
        }
        // scores[a][b] = scale * sum_p q[p][a] k[p][b]
        for p in 0..pixels {
            let qs = &state.q[p * dim + s0..p * dim + s0 + dh];
            let ks = &state.k[p * dim + s0..p * dim + s0 + dh];
            let gqs = &mut gq[p * dim + s0..p * dim + s0 + dh];
            for a in 0..dh {
                let drow = &d_scores[a * dh..(a + 1) * dh];
                let mut acc = 0.0;
                for b in 0..dh {
                    acc += drow[b] * ks[b];
                }
                gqs[a] += scale * acc;
            }
            let gks = &mut gk[p * dim + s0..p * dim + s0 + dh];
            for b in 0..dh {
                let mut acc = 0.0;
                for a in 0..dh {
                    acc += d_scores[a * dh + b] * qs[a];
                }
                gks[b] += scale * acc;
            }
        }
    }

    // back through the three projections: proj = W . x
    let mut proj_back = |w: &[f64], gproj: &[f64], gw: &mut [f64]| {
        for p in 0..pixels {
            let xs = &x[p * dim..(p + 1) * dim];
            let gs = &gproj[p * dim..(p + 1) * dim];
            let gxs = &mut grad_x[p * dim..(p + 1) * dim];
            for d in 0..dim {
                let g = gs[d];
                if g == 0.0 {
                    continue;
                }
                let ws = &w[d * dim..(d + 1) * dim];
                let gws = &mut gw[d * dim..(d + 1) * dim];
                for i in 0..dim {
                    gws[i] += g * xs[i];
                    gxs[i] += g * ws[i];
                }
            }
        }
    };
    let (gp_q, rest) = grad_params.split_at_mut(d2);
    let (gp_k, gp_v) = rest.split_at_mut(d2);
    proj_back(&params[..d2], &gq, gp_q);
    proj_back(&params[d2..2 * d2], &gk, gp_k);
    proj_back(&params[2 * d2..3 * d2], &gv, gp_v);
}
