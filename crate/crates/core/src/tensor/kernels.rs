//! Raw forward/backward compute kernels on flat f32 buffers.
//!
//! The tape in [`super::tape`] dispatches into these; inference paths and the
//! data pipeline call them directly. All backward kernels accumulate (`+=`)
//! into caller-zeroed buffers. Parallel loops only ever split over disjoint
//! output regions and every reduction runs in a fixed order, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resolved geometry of a conv2d call.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv2d_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    b_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let (cin, h, w, cout, wcin, kh, kw, bc) = match (x_shape, w_shape, b_shape) {
        (&[cin, h, w], &[cout, wcin, kh, kw], &[bc]) => (cin, h, w, cout, wcin, kh, kw, bc),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d expects x[Cin,H,W], w[Cout,Cin,kh,kw], b[Cout]; got {x_shape:?}, {w_shape:?}, {b_shape:?}"
            )))
        }
    };
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if bc != cout {
        return Err(Error::Shape(format!(
            "conv2d bias has {bc} entries, weight has {cout} output channels"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel must be odd, got {kh}x{kw}")));
    }
    if stride < 1 {
        return Err(Error::Shape("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d input {h}x{w} with pad {pad} smaller than kernel {kh}x{kw}"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims { cin, h, w, cout, kh, kw, stride, pad, oh, ow })
}

/// y[i] += a * x[i]
#[inline]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight fixed-order accumulators so the loop vectorizes
/// without reassociating the final sum nondeterministically.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (pa, pb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += pa[i] * pb[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Valid output-x run for a stride-1 row so that ix = ox + dx - pad stays in
/// [0, w). Returns (ox_start, ox_end).
#[inline]
fn s1_run(ow: usize, w: usize, dx: usize, pad: usize) -> (usize, usize) {
    let start = pad.saturating_sub(dx);
    let end = (w + pad - dx).min(ow);
    (start.min(end), end)
}

fn im2col(x: &[f32], d: &ConvDims) -> Vec<f32> {
    let npix = d.oh * d.ow;
    let ckk = d.cin * d.kh * d.kw;
    let mut col = vec![0.0f32; ckk * npix];
    col.par_chunks_mut(d.kh * d.kw * npix)
        .enumerate()
        .for_each(|(cin, chunk)| {
            let xplane = &x[cin * d.h * d.w..(cin + 1) * d.h * d.w];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let row = &mut chunk[(dy * d.kw + dx) * npix..(dy * d.kw + dx + 1) * npix];
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + dy) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let orow = &mut row[oy * d.ow..(oy + 1) * d.ow];
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + dx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                orow[ox] = xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        });
    col
}

pub fn conv2d_forward(x: &[f32], wt: &[f32], b: &[f32], d: &ConvDims) -> Vec<f32> {
    let npix = d.oh * d.ow;
    let mut out = vec![0.0f32; d.cout * npix];
    if d.stride == 1 {
        // Shift-and-accumulate: every (cin,dy,dx) tap is one contiguous axpy
        // per output row.
        out.par_chunks_mut(npix).enumerate().for_each(|(co, oplane)| {
            oplane.fill(b[co]);
            for cin in 0..d.cin {
                let xplane = &x[cin * d.h * d.w..(cin + 1) * d.h * d.w];
                for dy in 0..d.kh {
                    for dx in 0..d.kw {
                        let wv = wt[((co * d.cin + cin) * d.kh + dy) * d.kw + dx];
                        let (x0, x1) = s1_run(d.ow, d.w, dx, d.pad);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in 0..d.oh {
                            let iy = (oy + dy) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let src = iy as usize * d.w + x0 + dx - d.pad;
                            axpy(
                                wv,
                                &xplane[src..src + (x1 - x0)],
                                &mut oplane[oy * d.ow + x0..oy * d.ow + x1],
                            );
                        }
                    }
                }
            }
        });
    } else {
        let col = im2col(x, d);
        let ckk = d.cin * d.kh * d.kw;
        out.par_chunks_mut(npix).enumerate().for_each(|(co, oplane)| {
            oplane.fill(b[co]);
            let wrow = &wt[co * ckk..(co + 1) * ckk];
            for k in 0..ckk {
                axpy(wrow[k], &col[k * npix..(k + 1) * npix], oplane);
            }
        });
    }
    out
}

pub fn conv2d_backward_bias(gy: &[f32], d: &ConvDims, db: &mut [f32]) {
    let npix = d.oh * d.ow;
    for co in 0..d.cout {
        let mut acc = [0.0f32; 8];
        let chunks = gy[co * npix..(co + 1) * npix].chunks_exact(8);
        let rem = chunks.remainder();
        for c in chunks {
            for i in 0..8 {
                acc[i] += c[i];
            }
        }
        let mut tail = 0.0f32;
        for v in rem {
            tail += v;
        }
        db[co] +=
            (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail;
    }
}

pub fn conv2d_backward_weight(gy: &[f32], x: &[f32], d: &ConvDims, dw: &mut [f32]) {
    let npix = d.oh * d.ow;
    let ckk = d.cin * d.kh * d.kw;
    if d.stride == 1 {
        dw.par_chunks_mut(ckk).enumerate().for_each(|(co, dwrow)| {
            let gplane = &gy[co * npix..(co + 1) * npix];
            for cin in 0..d.cin {
                let xplane = &x[cin * d.h * d.w..(cin + 1) * d.h * d.w];
                for dy in 0..d.kh {
                    for dx in 0..d.kw {
                        let (x0, x1) = s1_run(d.ow, d.w, dx, d.pad);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for oy in 0..d.oh {
                            let iy = (oy + dy) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let src = iy as usize * d.w + x0 + dx - d.pad;
                            acc += dot(
                                &gplane[oy * d.ow + x0..oy * d.ow + x1],
                                &xplane[src..src + (x1 - x0)],
                            );
                        }
                        dwrow[(cin * d.kh + dy) * d.kw + dx] += acc;
                    }
                }
            }
        });
    } else {
        let col = im2col(x, d);
        dw.par_chunks_mut(ckk).enumerate().for_each(|(co, dwrow)| {
            let gplane = &gy[co * npix..(co + 1) * npix];
            for k in 0..ckk {
                dwrow[k] += dot(gplane, &col[k * npix..(k + 1) * npix]);
            }
        });
    }
}

pub fn conv2d_backward_input(gy: &[f32], wt: &[f32], d: &ConvDims, dx: &mut [f32]) {
    let npix = d.oh * d.ow;
    let kk = d.kh * d.kw;
    let ckk = d.cin * kk;
    // Per input channel: accumulate sum_co w[co,k] * gy[co] into a scratch
    // row for each tap k, then scatter it at the tap's offsets.
    dx.par_chunks_mut(d.h * d.w).enumerate().for_each(|(cin, dxplane)| {
        let mut scratch = vec![0.0f32; npix];
        for dy in 0..d.kh {
            for dx_ in 0..d.kw {
                let k = cin * kk + dy * d.kw + dx_;
                scratch.fill(0.0);
                for co in 0..d.cout {
                    axpy(wt[co * ckk + k], &gy[co * npix..(co + 1) * npix], &mut scratch);
                }
                if d.stride == 1 {
                    let (x0, x1) = s1_run(d.ow, d.w, dx_, d.pad);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in 0..d.oh {
                        let iy = (oy + dy) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = iy as usize * d.w + x0 + dx_ - d.pad;
                        axpy(
                            1.0,
                            &scratch[oy * d.ow + x0..oy * d.ow + x1],
                            &mut dxplane[dst..dst + (x1 - x0)],
                        );
                    }
                } else {
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + dy) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + dx_) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dxplane[iy as usize * d.w + ix as usize] += scratch[oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Subgradient at exactly zero is zero: pass gradient only where y > 0.
pub fn relu_backward(y: &[f32], gy: &[f32], dx: &mut [f32]) {
    for i in 0..y.len() {
        if y[i] > 0.0 {
            dx[i] += gy[i];
        }
    }
}

/// Per-pixel softmax over the channel axis of a [C,H,W] buffer, with
/// max-subtraction for stability.
pub fn softmax_channels_forward(x: &[f32], c: usize, plane: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for p in 0..plane {
        let mut m = f32::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(x[ch * plane + p]);
        }
        let mut sum = 0.0f32;
        for ch in 0..c {
            let e = (x[ch * plane + p] - m).exp();
            y[ch * plane + p] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for ch in 0..c {
            y[ch * plane + p] *= inv;
        }
    }
    y
}

/// dL/dx_i = y_i * (g_i - sum_j g_j y_j), per pixel.
pub fn softmax_channels_backward(y: &[f32], gy: &[f32], c: usize, plane: usize, dx: &mut [f32]) {
    for p in 0..plane {
        let mut s = 0.0f32;
        for ch in 0..c {
            s += gy[ch * plane + p] * y[ch * plane + p];
        }
        for ch in 0..c {
            dx[ch * plane + p] += y[ch * plane + p] * (gy[ch * plane + p] - s);
        }
    }
}

/// Bilinear sample positions for align-corners-false interpolation of a
/// single output pixel grid. Coordinates are pre-clamped to the source rect.
#[derive(Clone, Copy)]
struct Lerp {
    i00: u32,
    i01: u32,
    i10: u32,
    i11: u32,
    w00: f32,
    w01: f32,
    w10: f32,
    w11: f32,
}

#[inline]
fn lerp_at(xs: f32, ys: f32, w: usize, h: usize) -> Lerp {
    let xs = xs.clamp(0.0, (w - 1) as f32);
    let ys = ys.clamp(0.0, (h - 1) as f32);
    let x0 = (xs.floor() as usize).min(w - 1);
    let y0 = (ys.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xs - x0 as f32;
    let fy = ys - y0 as f32;
    Lerp {
        i00: (y0 * w + x0) as u32,
        i01: (y0 * w + x1) as u32,
        i10: (y1 * w + x0) as u32,
        i11: (y1 * w + x1) as u32,
        w00: (1.0 - fy) * (1.0 - fx),
        w01: (1.0 - fy) * fx,
        w10: fy * (1.0 - fx),
        w11: fy * fx,
    }
}

fn upsample_coords(h: usize, w: usize, factor: usize) -> Vec<Lerp> {
    let (oh, ow) = (h * factor, w * factor);
    let inv = 1.0 / factor as f32;
    let mut coords = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let ys = (oy as f32 + 0.5) * inv - 0.5;
        for ox in 0..ow {
            let xs = (ox as f32 + 0.5) * inv - 0.5;
            coords.push(lerp_at(xs, ys, w, h));
        }
    }
    coords
}

pub fn bilinear_upsample_forward(x: &[f32], c: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    let coords = upsample_coords(h, w, factor);
    let opix = coords.len();
    let mut y = vec![0.0f32; c * opix];
    y.par_chunks_mut(opix).enumerate().for_each(|(ch, oplane)| {
        let xplane = &x[ch * h * w..(ch + 1) * h * w];
        for (o, l) in oplane.iter_mut().zip(&coords) {
            *o = l.w00 * xplane[l.i00 as usize]
                + l.w01 * xplane[l.i01 as usize]
                + l.w10 * xplane[l.i10 as usize]
                + l.w11 * xplane[l.i11 as usize];
        }
    });
    y
}

pub fn bilinear_upsample_backward(
    gy: &[f32],
    _c: usize,
    h: usize,
    w: usize,
    factor: usize,
    dx: &mut [f32],
) {
    let coords = upsample_coords(h, w, factor);
    let opix = coords.len();
    dx.par_chunks_mut(h * w).enumerate().for_each(|(ch, dplane)| {
        let gplane = &gy[ch * opix..(ch + 1) * opix];
        for (g, l) in gplane.iter().zip(&coords) {
            dplane[l.i00 as usize] += l.w00 * g;
            dplane[l.i01 as usize] += l.w01 * g;
            dplane[l.i10 as usize] += l.w10 * g;
            dplane[l.i11 as usize] += l.w11 * g;
        }
    });
}

fn flow_coords(flow: &Tensor, h: usize, w: usize) -> Result<Vec<Lerp>> {
    let (fc, fh, fw) = flow.chw()?;
    if fc != 2 || fh != h || fw != w {
        return Err(Error::Shape(format!(
            "flow must be [2,{h},{w}], got {:?}",
            flow.shape()
        )));
    }
    let u = flow.channel(0);
    let v = flow.channel(1);
    let mut coords = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            coords.push(lerp_at(x as f32 + u[p], y as f32 + v[p], w, h));
        }
    }
    Ok(coords)
}

/// Backward warp: out(x,y) samples the input at (x+u, y+v), border-clamped.
pub fn grid_sample_forward(x: &[f32], c: usize, h: usize, w: usize, flow: &Tensor) -> Result<Vec<f32>> {
    let coords = flow_coords(flow, h, w)?;
    let plane = h * w;
    let mut y = vec![0.0f32; c * plane];
    y.par_chunks_mut(plane).enumerate().for_each(|(ch, oplane)| {
        let xplane = &x[ch * plane..(ch + 1) * plane];
        for (o, l) in oplane.iter_mut().zip(&coords) {
            *o = l.w00 * xplane[l.i00 as usize]
                + l.w01 * xplane[l.i01 as usize]
                + l.w10 * xplane[l.i10 as usize]
                + l.w11 * xplane[l.i11 as usize];
        }
    });
    Ok(y)
}

pub fn grid_sample_backward(
    gy: &[f32],
    _c: usize,
    h: usize,
    w: usize,
    flow: &Tensor,
    dx: &mut [f32],
) -> Result<()> {
    let coords = flow_coords(flow, h, w)?;
    let plane = h * w;
    dx.par_chunks_mut(plane).enumerate().for_each(|(ch, dplane)| {
        let gplane = &gy[ch * plane..(ch + 1) * plane];
        for (g, l) in gplane.iter().zip(&coords) {
            dplane[l.i00 as usize] += l.w00 * g;
            dplane[l.i01 as usize] += l.w01 * g;
            dplane[l.i10 as usize] += l.w10 * g;
            dplane[l.i11 as usize] += l.w11 * g;
        }
    });
    Ok(())
}

/// Bilinear resize of a [C,H,W] tensor to an arbitrary size, align-corners
/// false. Used by augmentation and flow rescaling.
pub fn bilinear_resize(x: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    let mut coords = Vec::with_capacity(nh * nw);
    for oy in 0..nh {
        let ys = (oy as f32 + 0.5) * sy - 0.5;
        for ox in 0..nw {
            let xs = (ox as f32 + 0.5) * sx - 0.5;
            coords.push(lerp_at(xs, ys, w, h));
        }
    }
    let mut out = vec![0.0f32; c * nh * nw];
    for ch in 0..c {
        let xplane = x.channel(ch);
        let oplane = &mut out[ch * nh * nw..(ch + 1) * nh * nw];
        for (o, l) in oplane.iter_mut().zip(&coords) {
            *o = l.w00 * xplane[l.i00 as usize]
                + l.w01 * xplane[l.i01 as usize]
                + l.w10 * xplane[l.i10 as usize]
                + l.w11 * xplane[l.i11 as usize];
        }
    }
    Tensor::from_vec(vec![c, nh, nw], out)
}

/// Mirrors a [C,H,W] tensor along the x axis.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let xp = x.channel(ch);
        let op = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                op[y * w + xx] = xp[y * w + (w - 1 - xx)];
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Pads a [C,H,W] tensor on the bottom/right with edge replication so both
/// spatial dims are multiples of `m`. Returns the padded tensor and the
/// original size.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Result<(Tensor, (usize, usize))> {
    let (c, h, w) = x.chw()?;
    let nh = h.div_ceil(m) * m;
    let nw = w.div_ceil(m) * m;
    if nh == h && nw == w {
        return Ok((x.clone(), (h, w)));
    }
    let mut out = vec![0.0f32; c * nh * nw];
    for ch in 0..c {
        let xp = x.channel(ch);
        let op = &mut out[ch * nh * nw..(ch + 1) * nh * nw];
        for y in 0..nh {
            let sy = y.min(h - 1);
            for xx in 0..nw {
                op[y * nw + xx] = xp[sy * w + xx.min(w - 1)];
            }
        }
    }
    Ok((Tensor::from_vec(vec![c, nh, nw], out)?, (h, w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Naive six-nested-loop conv used as the independent reference.
    pub fn conv2d_reference(x: &[f32], wt: &[f32], b: &[f32], d: &ConvDims) -> Vec<f32> {
        let mut out = vec![0.0f32; d.cout * d.oh * d.ow];
        for co in 0..d.cout {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = b[co];
                    for cin in 0..d.cin {
                        for dy in 0..d.kh {
                            for dx in 0..d.kw {
                                let iy = (oy * d.stride + dy) as isize - d.pad as isize;
                                let ix = (ox * d.stride + dx) as isize - d.pad as isize;
                                if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
                                    acc += x[(cin * d.h + iy as usize) * d.w + ix as usize]
                                        * wt[((co * d.cin + cin) * d.kh + dy) * d.kw + dx];
                                }
                            }
                        }
                    }
                    out[(co * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_3x3_sums_to_nine() {
        let d = conv2d_dims(&[1, 3, 3], &[1, 1, 3, 3], &[1], 1, 0).unwrap();
        let y = conv2d_forward(&[1.0; 9], &[1.0; 9], &[0.0], &d);
        assert_eq!(y, vec![9.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 5, 7], 1.0, &mut rng);
        // center-one kernel per channel pair (diagonal)
        let mut wt = vec![0.0f32; 2 * 2 * 9];
        wt[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
        wt[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
        let d = conv2d_dims(&[2, 5, 7], &[2, 2, 3, 3], &[2], 1, 1).unwrap();
        let y = conv2d_forward(x.data(), &wt, &[0.0, 0.0], &d);
        assert_eq!(y, x.data());
    }

    #[test]
    fn conv_matches_naive_reference_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cin, h, w, cout, k, stride, pad) in &[
            (1usize, 4usize, 4usize, 2usize, 3usize, 1usize, 1usize),
            (3, 8, 8, 4, 3, 1, 1),
            (4, 8, 8, 3, 3, 2, 1),
            (2, 7, 9, 5, 5, 2, 2),
            (4, 8, 8, 2, 3, 1, 0),
        ] {
            let x = Tensor::randn(&[cin, h, w], 1.0, &mut rng);
            let wt = Tensor::randn(&[cout, cin, k, k], 0.5, &mut rng);
            let b = Tensor::randn(&[cout], 0.5, &mut rng);
            let d = conv2d_dims(x.shape(), wt.shape(), b.shape(), stride, pad).unwrap();
            let fast = conv2d_forward(x.data(), wt.data(), b.data(), &d);
            let naive = conv2d_reference(x.data(), wt.data(), b.data(), &d);
            for (a, b) in fast.iter().zip(&naive) {
                assert!((a - b).abs() < 1e-5, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        assert!(conv2d_dims(&[3, 8, 8], &[4, 2, 3, 3], &[4], 1, 1).is_err());
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let y = relu_forward(&[-1.0, 0.0, 2.0]);
        assert_eq!(y, vec![0.0, 0.0, 2.0]);
        let mut dx = vec![0.0; 3];
        relu_backward(&y, &[1.0, 1.0, 1.0], &mut dx);
        assert_eq!(dx, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let y = softmax_channels_forward(&vec![0.0; 11 * 6], 11, 6);
        for v in &y {
            assert!((v - 1.0 / 11.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let y = softmax_channels_forward(&[1000.0, 0.0], 2, 1);
        assert!((y[0] - 1.0).abs() < 1e-6);
        assert!(y[1].abs() < 1e-6);
        let y = softmax_channels_forward(&[1e4, -1e4], 2, 1);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] + y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let y = bilinear_upsample_forward(x.data(), 2, 3, 4, 1);
        assert_eq!(&y, x.data());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let y = bilinear_upsample_forward(&[2.5; 6], 1, 2, 3, 3);
        assert_eq!(y.len(), 54);
        for v in &y {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_2x2_matches_hand_oracle() {
        // Direct evaluation of align-corners-false interpolation at each
        // output pixel of [[1,2],[3,4]] upsampled by 2.
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let y = bilinear_upsample_forward(&x, 1, 2, 2, 2);
        let sample = |xs: f32, ys: f32| -> f32 {
            let xs = xs.clamp(0.0, 1.0);
            let ys = ys.clamp(0.0, 1.0);
            let x0 = xs.floor().min(0.0 + 1.0) as usize;
            let y0 = ys.floor().min(1.0) as usize;
            let x1 = (x0 + 1).min(1);
            let y1 = (y0 + 1).min(1);
            let fx = xs - x0 as f32;
            let fy = ys - y0 as f32;
            (1.0 - fy) * ((1.0 - fx) * x[y0 * 2 + x0] + fx * x[y0 * 2 + x1])
                + fy * ((1.0 - fx) * x[y1 * 2 + x0] + fx * x[y1 * 2 + x1])
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = sample((ox as f32 + 0.5) / 2.0 - 0.5, (oy as f32 + 0.5) / 2.0 - 0.5);
                assert!((y[oy * 4 + ox] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grid_sample_zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 6, 8], 1.0, &mut rng);
        let flow = Tensor::zeros(&[2, 6, 8]);
        let y = grid_sample_forward(x.data(), 3, 6, 8, &flow).unwrap();
        for (a, b) in y.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_sample_ramp_shifts_and_clamps() {
        let x = [0.0f32, 1.0, 2.0, 3.0];
        let mut flow = Tensor::zeros(&[2, 1, 4]);
        flow.channel_mut(0).fill(1.0);
        let y = grid_sample_forward(&x, 1, 1, 4, &flow).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn grid_sample_rejects_bad_flow_shape() {
        let x = [0.0f32; 12];
        let flow = Tensor::zeros(&[3, 2, 2]);
        assert!(grid_sample_forward(&x, 3, 2, 2, &flow).is_err());
    }

    #[test]
    fn pad_to_multiple_replicates_edges() {
        let x = Tensor::from_vec(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (p, (h, w)) = pad_to_multiple(&x, 4).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(p.data()[3], 3.0); // right edge replicated
        assert_eq!(p.data()[12], 4.0); // bottom edge replicated
        assert_eq!(p.data()[15], 6.0); // corner
    }
}
