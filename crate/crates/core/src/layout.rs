//! Index maps for data-movement operators.
//!
//! Padding, cropping, cyclic rolls, window partitioning, halo extraction,
//! im2col and permutations are all "gathers": each output element copies one
//! input element or is zero. Expressing them as a [`GatherMap`] gives every one
//! of them the same exact vector-Jacobian product (a scatter-add).

use crate::error::{ensure, Result};

/// Sentinel for "write zero" entries.
const ZERO: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherMap {
    pub(crate) src_shape: Vec<usize>,
    pub(crate) out_shape: Vec<usize>,
    index: Vec<u32>,
}

impl GatherMap {
    fn build(src_shape: &[usize], out_shape: Vec<usize>, mut f: impl FnMut(usize) -> Option<usize>) -> Self {
        let numel: usize = out_shape.iter().product();
        let src_len: usize = src_shape.iter().product();
        assert!(src_len < ZERO as usize, "gather source too large");
        let index = (0..numel)
            .map(|i| match f(i) {
                Some(s) => {
                    debug_assert!(s < src_len);
                    s as u32
                }
                None => ZERO,
            })
            .collect();
        Self {
            src_shape: src_shape.to_vec(),
            out_shape,
            index,
        }
    }

    pub fn src_shape(&self) -> &[usize] {
        &self.src_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub(crate) fn apply(&self, src: &[f32]) -> Vec<f32> {
        self.index
            .iter()
            .map(|&i| if i == ZERO { 0.0 } else { src[i as usize] })
            .collect()
    }

    /// Transpose of [`apply`](Self::apply), accumulating in output order.
    pub(crate) fn scatter_add(&self, grad: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.src_shape.iter().product()];
        for (&i, &g) in self.index.iter().zip(grad) {
            if i != ZERO {
                out[i as usize] += g;
            }
        }
        out
    }

    /// Arbitrary axis permutation: output axis `a` is input axis `perm[a]`.
    pub fn permute(shape: &[usize], perm: &[usize]) -> Result<Self> {
        ensure!(perm.len() == shape.len(), "permutation rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            ensure!(p < perm.len() && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut src_strides = vec![1usize; shape.len()];
        for a in (0..shape.len().saturating_sub(1)).rev() {
            src_strides[a] = src_strides[a + 1] * shape[a + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let dims = out_shape.clone();
        Ok(Self::build(shape, out_shape, |mut i| {
            let mut src = 0;
            for a in (0..dims.len()).rev() {
                src += (i % dims[a]) * strides[a];
                i /= dims[a];
            }
            Some(src)
        }))
    }

    /// `[N,H,W,C] -> [N,C,H,W]`.
    pub fn nhwc_to_nchw(shape: [usize; 4]) -> Self {
        Self::permute(&shape, &[0, 3, 1, 2]).expect("static permutation")
    }

    /// `[N,C,H,W] -> [N,H,W,C]`.
    pub fn nchw_to_nhwc(shape: [usize; 4]) -> Self {
        Self::permute(&shape, &[0, 2, 3, 1]).expect("static permutation")
    }

    /// Channels-last spatial re-framing: output pixel `(y, x)` of an
    /// `out_h × out_w` frame reads input pixel `(y + dy, x + dx)`, or zero
    /// when that lies outside the input. Covers bottom/right padding,
    /// cropping and zero-filled translation.
    pub fn reframe(shape: [usize; 4], out_h: usize, out_w: usize, dy: isize, dx: isize) -> Self {
        let [n, h, w, c] = shape;
        Self::build(&shape, vec![n, out_h, out_w, c], |i| {
            let ch = i % c;
            let x = (i / c) % out_w;
            let y = (i / (c * out_w)) % out_h;
            let b = i / (c * out_w * out_h);
            let sy = y as isize + dy;
            let sx = x as isize + dx;
            (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w)
                .then(|| ((b * h + sy as usize) * w + sx as usize) * c + ch)
        })
    }

    /// Cyclic shift of a channels-last map: output `(y, x)` reads input
    /// `((y + dy) mod H, (x + dx) mod W)`. Rolling content by `-s` uses `dy = s`.
    pub fn roll(shape: [usize; 4], dy: isize, dx: isize) -> Self {
        let [_, h, w, c] = shape;
        Self::build(&shape, shape.to_vec(), |i| {
            let ch = i % c;
            let x = (i / c) % w;
            let y = (i / (c * w)) % h;
            let b = i / (c * w * h);
            let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
            let sx = (x as isize + dx).rem_euclid(w as isize) as usize;
            Some(((b * h + sy) * w + sx) * c + ch)
        })
    }

    /// Splits `[N,H,W,C]` into non-overlapping `b×b` windows,
    /// `[N·nWin, b·b, C]`, windows in raster order within each image.
    pub fn window_partition(shape: [usize; 4], b: usize) -> Result<Self> {
        Self::windows(shape, b, 0, WindowAnchor::Centered)
    }

    /// Inverse of [`window_partition`](Self::window_partition).
    pub fn window_merge(shape: [usize; 4], b: usize) -> Result<Self> {
        let [n, h, w, c] = shape;
        ensure!(b >= 1 && h % b == 0 && w % b == 0, "window {b} does not tile {h}x{w}");
        let (wy, wx) = (h / b, w / b);
        let src_shape = [n * wy * wx, b * b, c];
        Ok(Self::build(&src_shape, shape.to_vec(), |i| {
            let ch = i % c;
            let x = (i / c) % w;
            let y = (i / (c * w)) % h;
            let img = i / (c * w * h);
            let win = (img * wy + y / b) * wx + x / b;
            let tok = (y % b) * b + x % b;
            Some((win * b * b + tok) * c + ch)
        }))
    }

    /// For every `b×b` block of a `[N,H,W,C]` map, gathers the enlarged
    /// `(b+2·halo)²` window around it (zero outside the map), giving
    /// `[N·nWin, (b+2·halo)², C]`. With [`WindowAnchor::TopLeft`] the window
    /// spans `[0, b+2·halo)` from the block origin instead of `[-halo, b+halo)`.
    pub fn halo_windows(shape: [usize; 4], b: usize, halo: usize, anchor: WindowAnchor) -> Result<Self> {
        Self::windows(shape, b, halo, anchor)
    }

    fn windows(shape: [usize; 4], b: usize, halo: usize, anchor: WindowAnchor) -> Result<Self> {
        let [n, h, w, c] = shape;
        ensure!(b >= 1 && h % b == 0 && w % b == 0, "window {b} does not tile {h}x{w}");
        let (wy, wx) = (h / b, w / b);
        let side = b + 2 * halo;
        let origin = match anchor {
            WindowAnchor::Centered => -(halo as isize),
            WindowAnchor::TopLeft => 0,
        };
        Ok(Self::build(&shape, vec![n * wy * wx, side * side, c], |i| {
            let ch = i % c;
            let tok = (i / c) % (side * side);
            let win = i / (c * side * side);
            let img = win / (wy * wx);
            let (by, bx) = ((win / wx) % wy, win % wx);
            let y = (by * b) as isize + origin + (tok / side) as isize;
            let x = (bx * b) as isize + origin + (tok % side) as isize;
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .then(|| ((img * h + y as usize) * w + x as usize) * c + ch)
        }))
    }

    /// im2col for a channels-last map: `[N,H,W,C] -> [N,Ho,Wo,k·k·C]` with
    /// patch entries ordered `(ky, kx, c)` and zero padding.
    pub fn im2col(shape: [usize; 4], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [n, h, w, c] = shape;
        ensure!(k >= 1 && stride >= 1, "im2col: kernel and stride must be positive");
        ensure!(h + 2 * pad >= k && w + 2 * pad >= k, "im2col: kernel {k} larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let patch = k * k * c;
        Ok(Self::build(&shape, vec![n, ho, wo, patch], |i| {
            let e = i % patch;
            let ox = (i / patch) % wo;
            let oy = (i / (patch * wo)) % ho;
            let img = i / (patch * wo * ho);
            let (ky, kx, ch) = (e / (k * c), (e / c) % k, e % c);
            let y = (oy * stride + ky) as isize - pad as isize;
            let x = (ox * stride + kx) as isize - pad as isize;
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .then(|| ((img * h + y as usize) * w + x as usize) * c + ch)
        }))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(shape: &[usize], start: usize, len: usize) -> Result<Self> {
        let last = *shape.last().expect("rank >= 1");
        ensure!(len >= 1 && start + len <= last, "slice [{start}, {}) out of range {last}", start + len);
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        Ok(Self::build(shape, out_shape, |i| Some((i / len) * last + start + i % len)))
    }
}

/// Placement of the key/value window relative to its query block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowAnchor {
    /// Query block centred in the enlarged window.
    Centered,
    /// Query block at the enlarged window's top-left corner.
    TopLeft,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32).collect()
    }

    #[test]
    fn permute_round_trip() {
        let shape = [2, 3, 4, 5];
        let to = GatherMap::nchw_to_nhwc(shape);
        let back = GatherMap::nhwc_to_nchw([2, 4, 5, 3]);
        let src = iota(120);
        assert_eq!(back.apply(&to.apply(&src)), src);
        // element (n=1, c=2, h=3, w=4) lands at (1, 3, 4, 2)
        let moved = to.apply(&src);
        assert_eq!(moved[((1 * 4 + 3) * 5 + 4) * 3 + 2], src[((1 * 3 + 2) * 4 + 3) * 5 + 4]);
    }

    #[test]
    fn partition_merge_round_trip() {
        let shape = [2, 6, 4, 3];
        let src = iota(144);
        let part = GatherMap::window_partition(shape, 2).unwrap();
        assert_eq!(part.out_shape(), &[12, 4, 3]);
        let merged = GatherMap::window_merge(shape, 2).unwrap().apply(&part.apply(&src));
        assert_eq!(merged, src);
        assert!(GatherMap::window_partition(shape, 4).is_err());
    }

    #[test]
    fn roll_inverse() {
        let shape = [1, 5, 4, 2];
        let src = iota(40);
        let fwd = GatherMap::roll(shape, 2, -1).apply(&src);
        assert_eq!(GatherMap::roll(shape, -2, 1).apply(&fwd), src);
    }

    #[test]
    fn halo_window_zero_border() {
        let shape = [1, 2, 2, 1];
        let m = GatherMap::halo_windows(shape, 2, 1, WindowAnchor::Centered).unwrap();
        let out = m.apply(&[1.0, 2.0, 3.0, 4.0]);
        #[rustfmt::skip]
        let expect = [
            0.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 2.0, 0.0,
            0.0, 3.0, 4.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(out, expect);
        let tl = GatherMap::halo_windows(shape, 2, 1, WindowAnchor::TopLeft).unwrap();
        assert_eq!(&tl.apply(&[1.0, 2.0, 3.0, 4.0])[..6], &[1.0, 2.0, 0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn scatter_is_transpose() {
        let m = GatherMap::im2col([1, 4, 4, 2], 3, 2, 1).unwrap();
        let x: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let g: Vec<f32> = (0..m.out_shape().iter().product()).map(|i| (i as f32 * 0.11).cos()).collect();
        let lhs: f32 = m.apply(&x).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f32 = m.scatter_add(&g).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
