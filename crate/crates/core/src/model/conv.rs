//! Stride-1, zero-padded ("same") 2-D convolution kernels over channel-major
//! buffers laid out as `[channel][row][col]`.

/// Valid output range along one axis for kernel offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv_same(
    input: &[f64],
    in_ch: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f64> {
    let plane = h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; out_ch * plane];
    for o in 0..out_ch {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let wt = weights[((o * in_ch + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        let src = &in_plane[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients given the gradient `dz` at the
/// convolution's pre-activation output.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv_weight_grad(
    input: &[f64],
    in_ch: usize,
    dz: &[f64],
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let plane = h * w;
    let pad = (k / 2) as isize;
    for o in 0..out_ch {
        let dz_plane = &dz[o * plane..(o + 1) * plane];
        grad_b[o] += dz_plane.iter().sum::<f64>();
        for i in 0..in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let g = &dz_plane[y * w + x0..y * w + x1];
                        let s = &in_plane[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_w[((o * in_ch + i) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Gradient with respect to the convolution input.
pub(super) fn conv_input_grad(
    weights: &[f64],
    dz: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f64> {
    let plane = h * w;
    let pad = (k / 2) as isize;
    let mut din = vec![0.0; in_ch * plane];
    for o in 0..out_ch {
        let dz_plane = &dz[o * plane..(o + 1) * plane];
        for i in 0..in_ch {
            let din_plane = &mut din[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let wt = weights[((o * in_ch + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let dst_row = ((y as isize + dy) as usize) * w;
                        let g = &dz_plane[y * w + x0..y * w + x1];
                        let d = &mut din_plane[(dst_row as isize + x0 as isize + dx) as usize
                            ..(dst_row as isize + x1 as isize + dx) as usize];
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += wt * gv;
                        }
                    }
                }
            }
        }
    }
    din
}
