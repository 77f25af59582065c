//! Direct 3D convolution and transposed-convolution kernels.
//!
//! Inputs are channel-major `(C, D, H, W)` flat buffers. Convolution weights
//! are `(C_out, C_in, k, k, k)`; transposed-convolution weights are
//! `(C_in, C_out, k, k, k)`.
//!
//! Inner loops run per kernel tap over precomputed valid index ranges, so
//! the hot w-axis loops are branch-free; the stride-1 convolution paths are
//! plain shifted zips the compiler vectorizes.

/// `out = (in - 1) * stride - 2 * pad + ks`
pub fn conv_transpose_output_size(input: usize, ks: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + ks - 2 * pad
}

/// `out = (in + 2 * pad - ks) / stride + 1`
pub fn conv_output_size(input: usize, ks: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - ks) / stride + 1
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.in_dims.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out_dims.iter().product()
    }
    /// Valid kernel range along one axis for output coordinate `o` of a
    /// gather: input coordinate `o*stride + kk - pad` must land in
    /// `[0, extent)`.
    fn tap_range(&self, o: usize, extent: usize) -> (usize, usize) {
        let base = o * self.stride;
        let lo = self.pad.saturating_sub(base);
        let hi = (extent + self.pad - base).min(self.k);
        (lo, hi.max(lo))
    }
    /// Valid output coordinates for a fixed gather tap `kk`:
    /// `o*stride + kk - pad ∈ [0, in_extent)`.
    fn out_range_for_tap(&self, kk: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(self.stride) } else { 0 };
        let hi = ((in_extent + self.pad - kk + self.stride - 1) / self.stride).min(out_extent);
        (lo.min(hi), hi)
    }
    /// Valid input coordinates for a fixed scatter tap `kk`:
    /// `i*stride + kk - pad ∈ [0, out_extent)`.
    fn in_range_for_tap(&self, kk: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(self.stride) } else { 0 };
        let hi = ((out_extent + self.pad - kk + self.stride - 1) / self.stride).min(in_extent);
        (lo.min(hi), hi)
    }
}

pub fn conv3d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.k;
    let k3 = k * k * k;
    let [ind, inh, inw] = g.in_dims;
    let [od_n, oh_n, ow_n] = g.out_dims;
    let s = g.stride;
    let mut out = vec![0.0; g.cout * g.out_vol()];
    for co in 0..g.cout {
        let out_c = &mut out[co * od_n * oh_n * ow_n..][..od_n * oh_n * ow_n];
        for ci in 0..g.cin {
            let xs = &x[ci * g.in_vol()..][..g.in_vol()];
            let kern = &w[(co * g.cin + ci) * k3..][..k3];
            for od in 0..od_n {
                let (kd_lo, kd_hi) = g.tap_range(od, ind);
                for kd in kd_lo..kd_hi {
                    let id = od * s + kd - g.pad;
                    for oh in 0..oh_n {
                        let (kh_lo, kh_hi) = g.tap_range(oh, inh);
                        let out_row = &mut out_c[(od * oh_n + oh) * ow_n..][..ow_n];
                        for kh in kh_lo..kh_hi {
                            let ih = oh * s + kh - g.pad;
                            let x_row = &xs[(id * inh + ih) * inw..][..inw];
                            let w_row = &kern[(kd * k + kh) * k..][..k];
                            for (kw, &wv) in w_row.iter().enumerate() {
                                let (lo, hi) = g.out_range_for_tap(kw, inw, ow_n);
                                if s == 1 {
                                    let shift = lo + kw - g.pad;
                                    for (o, &xv) in out_row[lo..hi]
                                        .iter_mut()
                                        .zip(&x_row[shift..shift + (hi - lo)])
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    let mut xi = lo * s + kw - g.pad;
                                    for o in &mut out_row[lo..hi] {
                                        *o += wv * x_row[xi];
                                        xi += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let k = g.k;
    let k3 = k * k * k;
    let [ind, inh, inw] = g.in_dims;
    let [od_n, oh_n, ow_n] = g.out_dims;
    let s = g.stride;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for co in 0..g.cout {
        let g_c = &gout[co * od_n * oh_n * ow_n..][..od_n * oh_n * ow_n];
        for ci in 0..g.cin {
            let xs = &x[ci * g.in_vol()..][..g.in_vol()];
            let gxs = &mut gx[ci * g.in_vol()..][..g.in_vol()];
            let kern = &w[(co * g.cin + ci) * k3..][..k3];
            let gkern = &mut gw[(co * g.cin + ci) * k3..][..k3];
            for od in 0..od_n {
                let (kd_lo, kd_hi) = g.tap_range(od, ind);
                for kd in kd_lo..kd_hi {
                    let id = od * s + kd - g.pad;
                    for oh in 0..oh_n {
                        let (kh_lo, kh_hi) = g.tap_range(oh, inh);
                        let g_row = &g_c[(od * oh_n + oh) * ow_n..][..ow_n];
                        for kh in kh_lo..kh_hi {
                            let ih = oh * s + kh - g.pad;
                            let row = (id * inh + ih) * inw;
                            let x_row = &xs[row..row + inw];
                            let gx_row = &mut gxs[row..row + inw];
                            let w_row = &kern[(kd * k + kh) * k..][..k];
                            let gw_row = &mut gkern[(kd * k + kh) * k..][..k];
                            for kw in 0..k {
                                let (lo, hi) = g.out_range_for_tap(kw, inw, ow_n);
                                let wv = w_row[kw];
                                let mut acc = 0.0;
                                if s == 1 {
                                    let shift = lo + kw - g.pad;
                                    for ((&go, gxv), &xv) in g_row[lo..hi]
                                        .iter()
                                        .zip(&mut gx_row[shift..shift + (hi - lo)])
                                        .zip(&x_row[shift..shift + (hi - lo)])
                                    {
                                        *gxv += go * wv;
                                        acc += go * xv;
                                    }
                                } else {
                                    let mut xi = lo * s + kw - g.pad;
                                    for &go in &g_row[lo..hi] {
                                        gx_row[xi] += go * wv;
                                        acc += go * x_row[xi];
                                        xi += s;
                                    }
                                }
                                gw_row[kw] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

pub fn tconv3d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.k;
    let k3 = k * k * k;
    let [ind, inh, inw] = g.in_dims;
    let [od_n, oh_n, ow_n] = g.out_dims;
    let s = g.stride;
    let mut out = vec![0.0; g.cout * g.out_vol()];
    for ci in 0..g.cin {
        let xs = &x[ci * g.in_vol()..][..g.in_vol()];
        for co in 0..g.cout {
            let out_c = &mut out[co * od_n * oh_n * ow_n..][..od_n * oh_n * ow_n];
            let kern = &w[(ci * g.cout + co) * k3..][..k3];
            for kd in 0..k {
                let (id_lo, id_hi) = g.in_range_for_tap(kd, ind, od_n);
                for id in id_lo..id_hi {
                    let od = id * s + kd - g.pad;
                    for kh in 0..k {
                        let (ih_lo, ih_hi) = g.in_range_for_tap(kh, inh, oh_n);
                        let w_row = &kern[(kd * k + kh) * k..][..k];
                        for ih in ih_lo..ih_hi {
                            let oh = ih * s + kh - g.pad;
                            let x_row = &xs[(id * inh + ih) * inw..][..inw];
                            let out_row = &mut out_c[(od * oh_n + oh) * ow_n..][..ow_n];
                            for (kw, &wv) in w_row.iter().enumerate() {
                                let (lo, hi) = g.in_range_for_tap(kw, inw, ow_n);
                                let mut oi = lo * s + kw - g.pad;
                                for &xv in &x_row[lo..hi] {
                                    out_row[oi] += wv * xv;
                                    oi += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn tconv3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let k = g.k;
    let k3 = k * k * k;
    let [ind, inh, inw] = g.in_dims;
    let [od_n, oh_n, ow_n] = g.out_dims;
    let s = g.stride;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for ci in 0..g.cin {
        let xs = &x[ci * g.in_vol()..][..g.in_vol()];
        let gxs = &mut gx[ci * g.in_vol()..][..g.in_vol()];
        for co in 0..g.cout {
            let g_c = &gout[co * od_n * oh_n * ow_n..][..od_n * oh_n * ow_n];
            let kern = &w[(ci * g.cout + co) * k3..][..k3];
            let gkern = &mut gw[(ci * g.cout + co) * k3..][..k3];
            for kd in 0..k {
                let (id_lo, id_hi) = g.in_range_for_tap(kd, ind, od_n);
                for id in id_lo..id_hi {
                    let od = id * s + kd - g.pad;
                    for kh in 0..k {
                        let (ih_lo, ih_hi) = g.in_range_for_tap(kh, inh, oh_n);
                        for ih in ih_lo..ih_hi {
                            let oh = ih * s + kh - g.pad;
                            let row = (id * inh + ih) * inw;
                            let x_row = &xs[row..row + inw];
                            let gx_row = &mut gxs[row..row + inw];
                            let g_row = &g_c[(od * oh_n + oh) * ow_n..][..ow_n];
                            let w_row = &kern[(kd * k + kh) * k..][..k];
                            let gw_row = &mut gkern[(kd * k + kh) * k..][..k];
                            for kw in 0..k {
                                let (lo, hi) = g.in_range_for_tap(kw, inw, ow_n);
                                let wv = w_row[kw];
                                let mut acc = 0.0;
                                let mut oi = lo * s + kw - g.pad;
                                for (gxv, &xv) in
                                    gx_row[lo..hi].iter_mut().zip(&x_row[lo..hi])
                                {
                                    let go = g_row[oi];
                                    *gxv += wv * go;
                                    acc += xv * go;
                                    oi += s;
                                }
                                gw_row[kw] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}


#[cfg(test)]
mod bench {
    use super::*;
    use crate::rng::SplitMix64;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn conv_throughput() {
        let mut rng = SplitMix64::new(1);
        let cases = [
            ("t5 16->10 8³->16³", ConvGeom { cin: 16, cout: 10, k: 4, stride: 2, pad: 1, in_dims: [8, 8, 8], out_dims: [16, 16, 16] }, true),
            ("c4 16->16 8³", ConvGeom { cin: 16, cout: 16, k: 3, stride: 1, pad: 1, in_dims: [8, 8, 8], out_dims: [8, 8, 8] }, false),
            ("t3 32->16 4³->8³", ConvGeom { cin: 32, cout: 16, k: 4, stride: 2, pad: 1, in_dims: [4, 4, 4], out_dims: [8, 8, 8] }, true),
            ("c2 32->32 4³", ConvGeom { cin: 32, cout: 32, k: 3, stride: 1, pad: 1, in_dims: [4, 4, 4], out_dims: [4, 4, 4] }, false),
        ];
        for (name, g, transposed) in cases {
            let x: Vec<f64> = (0..g.cin * g.in_dims.iter().product::<usize>()).map(|_| rng.normal()).collect();
            let w: Vec<f64> = (0..g.cin * g.cout * g.k * g.k * g.k).map(|_| rng.normal()).collect();
            let reps = 400;
            let start = Instant::now();
            let mut sink = 0.0;
            for _ in 0..reps {
                let out = if transposed { tconv3d_forward(&x, &w, &g) } else { conv3d_forward(&x, &w, &g) };
                sink += out[0];
            }
            let el = start.elapsed().as_secs_f64();
            let macs = if transposed {
                g.cin * g.cout * g.k * g.k * g.k * g.in_dims.iter().product::<usize>()
            } else {
                g.cin * g.cout * g.k * g.k * g.k * g.out_dims.iter().product::<usize>()
            };
            println!("{name}: {:.2} GFLOP/s fwd (sink {sink:.1})", 2.0 * macs as f64 * reps as f64 / el / 1e9);
            let start = Instant::now();
            for _ in 0..reps {
                let g_out = vec![1.0; g.cout * g.out_dims.iter().product::<usize>()];
                let (gx, _gw) = if transposed { tconv3d_backward(&x, &w, &g_out, &g) } else { conv3d_backward(&x, &w, &g_out, &g) };
                sink += gx[0];
            }
            let el = start.elapsed().as_secs_f64();
            println!("{name}: {:.2} GFLOP/s bwd (sink {sink:.1})", 4.0 * macs as f64 * reps as f64 / el / 1e9);
        }
    }
}
