//! Channel-major conv / pool kernels and their reverse passes.

use super::ConvLayer;

/// Row range `y` such that `y + dy` stays inside `0..len`.
#[inline]
fn valid_range(len: usize, d: isize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

/// 3×3 convolution, stride 1, zero padding 1.
pub(super) fn conv3x3_forward(x: &[f64], conv: &ConvLayer, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; conv.out_channels * plane];
    for oc in 0..conv.out_channels {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        dst.fill(conv.bias[oc]);
        for ic in 0..conv.in_channels {
            let src = &x[ic * plane..(ic + 1) * plane];
            let kernel = &conv.weight[(oc * conv.in_channels + ic) * 9..][..9];
            for (k, &wt) in kernel.iter().enumerate() {
                let dy = k as isize / 3 - 1;
                let dx = k as isize % 3 - 1;
                let xs = valid_range(w, dx);
                for y in valid_range(h, dy) {
                    let sy = (y as isize + dy) as usize;
                    let d = &mut dst[y * w + xs.start..y * w + xs.end];
                    let s_start = (sy * w) as isize + xs.start as isize + dx;
                    let s = &src[s_start as usize..s_start as usize + xs.len()];
                    for (o, &v) in d.iter_mut().zip(s) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    out
}

/// Reverse of [`conv3x3_forward`]. Accumulates into the weight/bias gradients
/// when given and returns the input gradient when `need_input`.
pub(super) fn conv3x3_backward(
    g_out: &[f64],
    x: &[f64],
    conv: &ConvLayer,
    h: usize,
    w: usize,
    need_input: bool,
    param_grads: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
) -> Option<Vec<f64>> {
    let plane = h * w;
    if let Some((gw, gb)) = param_grads {
        for oc in 0..conv.out_channels {
            let g = &g_out[oc * plane..(oc + 1) * plane];
            gb[oc] += g.iter().sum::<f64>();
            for ic in 0..conv.in_channels {
                let src = &x[ic * plane..(ic + 1) * plane];
                let base = (oc * conv.in_channels + ic) * 9;
                for k in 0..9 {
                    let dy = k as isize / 3 - 1;
                    let dx = k as isize % 3 - 1;
                    let xs = valid_range(w, dx);
                    let mut acc = 0.0;
                    for y in valid_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let gr = &g[y * w + xs.start..y * w + xs.end];
                        let s_start = ((sy * w) as isize + xs.start as isize + dx) as usize;
                        let s = &src[s_start..s_start + xs.len()];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[base + k] += acc;
                }
            }
        }
    }
    if !need_input {
        return None;
    }
    let mut g_in = vec![0.0; conv.in_channels * plane];
    for oc in 0..conv.out_channels {
        let g = &g_out[oc * plane..(oc + 1) * plane];
        for ic in 0..conv.in_channels {
            let dst = &mut g_in[ic * plane..(ic + 1) * plane];
            let kernel = &conv.weight[(oc * conv.in_channels + ic) * 9..][..9];
            for (k, &wt) in kernel.iter().enumerate() {
                let dy = k as isize / 3 - 1;
                let dx = k as isize % 3 - 1;
                let xs = valid_range(w, dx);
                for y in valid_range(h, dy) {
                    let sy = (y as isize + dy) as usize;
                    let gr = &g[y * w + xs.start..y * w + xs.end];
                    let d_start = ((sy * w) as isize + xs.start as isize + dx) as usize;
                    let d = &mut dst[d_start..d_start + xs.len()];
                    for (o, &v) in d.iter_mut().zip(gr) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    Some(g_in)
}

/// 2×2 max-pool, stride 2. Ties resolve to the first element in row-major
/// window order. Returns the pooled map and the flat index of each winner.
pub(super) fn maxpool2_forward(a: &[f64], ch: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * ph * pw);
    let mut arg = Vec::with_capacity(ch * ph * pw);
    for c in 0..ch {
        let base = c * h * w;
        for y in 0..ph {
            for x in 0..pw {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if a[i] > a[best] {
                        best = i;
                    }
                }
                out.push(a[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(super) fn maxpool2_backward(
    g: &[f64],
    argmax: &[u32],
    ch: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; ch * h * w];
    for (&gv, &i) in g.iter().zip(argmax) {
        out[i as usize] += gv;
    }
    out
}
