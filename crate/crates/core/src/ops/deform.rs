//! Deformable multi-group sampling with softmax-normalized modulation
//! (the DCNv3 core), on channels-last maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::bilinear_taps;
use crate::tensor::Tensor;

/// Number of sampling points per group: a 3×3 grid.
pub const DCN_POINTS: usize = 9;

#[derive(Clone, Copy, Debug)]
pub(crate) struct DeformGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub groups: usize,
    pub offset_scale: f32,
}

impl DeformGeom {
    /// `value` is `[N,H,W,C]`, `offset` is `[N,H,W,G·9·2]` ordered
    /// `(group, point, {dy, dx})`, `mask` is `[N,H,W,G·9]`.
    pub(crate) fn new(value: &Tensor, offset: &Tensor, mask: &Tensor, groups: usize, offset_scale: f32) -> Result<Self> {
        let [n, h, w, c] = value.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("dcn: {c} channels not divisible by {groups} groups")));
        }
        let off = [n, h, w, groups * DCN_POINTS * 2];
        if offset.shape() != off {
            return Err(Error::shape("dcn offset", format!("{off:?}"), format!("{:?}", offset.shape())));
        }
        let msk = [n, h, w, groups * DCN_POINTS];
        if mask.shape() != msk {
            return Err(Error::shape("dcn mask", format!("{msk:?}"), format!("{:?}", mask.shape())));
        }
        if !offset.is_finite() {
            return Err(Error::NonFinite("dcn offsets"));
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            groups,
            offset_scale,
        })
    }

    /// Sampling location of point `k` for output pixel `(y, x)`.
    #[inline]
    fn location(&self, y: usize, x: usize, k: usize, off: &[f32]) -> (f32, f32) {
        let gy = (k / 3) as f32 - 1.0;
        let gx = (k % 3) as f32 - 1.0;
        (
            y as f32 + gy + off[2 * k] * self.offset_scale,
            x as f32 + gx + off[2 * k + 1] * self.offset_scale,
        )
    }
}

pub(crate) fn deform_forward(g: &DeformGeom, value: &[f32], offset: &[f32], mask: &[f32]) -> Tensor {
    let cg = g.c / g.groups;
    let row_len = g.w * g.c;
    let mut out = vec![0.0f32; g.n * g.h * row_len];
    out.par_chunks_mut(row_len).enumerate().for_each(|(row, dst)| {
        let (b, y) = (row / g.h, row % g.h);
        let plane = &value[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for x in 0..g.w {
            let pix = (b * g.h + y) * g.w + x;
            for grp in 0..g.groups {
                let off = &offset[(pix * g.groups + grp) * DCN_POINTS * 2..][..DCN_POINTS * 2];
                let m = &mask[(pix * g.groups + grp) * DCN_POINTS..][..DCN_POINTS];
                let o = &mut dst[x * g.c + grp * cg..x * g.c + (grp + 1) * cg];
                for k in 0..DCN_POINTS {
                    let (py, px) = g.location(y, x, k, off);
                    for t in bilinear_taps(py, px, g.h, g.w) {
                        let wt = m[k] * t.weight;
                        let src = &plane[t.index * g.c + grp * cg..t.index * g.c + (grp + 1) * cg];
                        for (acc, &v) in o.iter_mut().zip(src) {
                            *acc += wt * v;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_parts(vec![g.n, g.h, g.w, g.c], out)
}

/// Gradients with respect to `value`, `offset` and `mask`.
pub(crate) fn deform_backward(
    g: &DeformGeom,
    value: &[f32],
    offset: &[f32],
    mask: &[f32],
    grad: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cg = g.c / g.groups;
    let plane_len = g.h * g.w * g.c;
    let mut dvalue = vec![0.0f32; value.len()];
    let mut doffset = vec![0.0f32; offset.len()];
    let mut dmask = vec![0.0f32; mask.len()];
    for b in 0..g.n {
        let plane = &value[b * plane_len..(b + 1) * plane_len];
        let dplane = &mut dvalue[b * plane_len..(b + 1) * plane_len];
        for y in 0..g.h {
            for x in 0..g.w {
                let pix = (b * g.h + y) * g.w + x;
                for grp in 0..g.groups {
                    let ob = (pix * g.groups + grp) * DCN_POINTS;
                    let off = &offset[ob * 2..(ob + DCN_POINTS) * 2];
                    let go = &grad[pix * g.c + grp * cg..pix * g.c + (grp + 1) * cg];
                    for k in 0..DCN_POINTS {
                        let m = mask[ob + k];
                        let (py, px) = g.location(y, x, k, off);
                        let (mut dm, mut dpy, mut dpx) = (0.0f32, 0.0f32, 0.0f32);
                        for t in bilinear_taps(py, px, g.h, g.w) {
                            let base = t.index * g.c + grp * cg;
                            let src = &plane[base..base + cg];
                            let mut dot = 0.0f32;
                            for (&gv, &v) in go.iter().zip(src) {
                                dot += gv * v;
                            }
                            dm += t.weight * dot;
                            dpy += t.dy * dot;
                            dpx += t.dx * dot;
                            let dst = &mut dplane[base..base + cg];
                            for (acc, &gv) in dst.iter_mut().zip(go) {
                                *acc += m * t.weight * gv;
                            }
                        }
                        dmask[ob + k] = dm;
                        doffset[(ob + k) * 2] = m * dpy * g.offset_scale;
                        doffset[(ob + k) * 2 + 1] = m * dpx * g.offset_scale;
                    }
                }
            }
        }
    }
    (dvalue, doffset, dmask)
}
