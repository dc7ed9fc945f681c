//! Geometric invariance sweeps: translate, rotate or scale the inputs over a
//! grid of magnitudes and measure how often the predicted label survives.
//!
//! The scale sweep measures classification consistency rather than a
//! detection metric and is labeled `scale-adapted` in reports.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::arch::Model;
use crate::error::{ensure, Error, Result};
use crate::ops::bilinear_taps;
use crate::tensor::Tensor;

fn dims3(img: &Tensor) -> Result<[usize; 3]> {
    match img.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(Error::shape("image transform", "[C, H, W]", format!("{s:?}"))),
    }
}

/// Shifts content by `(dy, dx)` pixels (down/right positive); vacated pixels
/// take `fill`.
pub fn translate_image(img: &Tensor, dy: isize, dx: isize, fill: f32) -> Result<Tensor> {
    let [c, h, w] = dims3(img)?;
    ensure!(
        dy.unsigned_abs() < h && dx.unsigned_abs() < w,
        "shift ({dy}, {dx}) not smaller than the {h}x{w} image"
    );
    if dy == 0 && dx == 0 {
        return Ok(img.clone());
    }
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = (y as isize - dy, x as isize - dx);
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            img.data()[(ch * h + sy as usize) * w + sx as usize]
        } else {
            fill
        }
    })
}

/// Resamples every channel at `src(y, x)`; neighbours outside the image
/// contribute `fill`.
fn inverse_map(img: &Tensor, fill: f32, src: impl Fn(f32, f32) -> (f32, f32) + Sync) -> Result<Tensor> {
    let [c, h, w] = dims3(img)?;
    let mut out = vec![0.0f32; c * h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(row, dst)| {
        let (ch, y) = (row / h, row % h);
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for (x, d) in dst.iter_mut().enumerate() {
            let (sy, sx) = src(y as f32, x as f32);
            let mut v = 0.0f32;
            let mut inside = 0.0f32;
            for t in bilinear_taps(sy, sx, h, w) {
                v += t.weight * plane[t.index];
                inside += t.weight;
            }
            *d = v + (1.0 - inside) * fill;
        }
    });
    Tensor::new(&[c, h, w], out)
}

/// Rotation by `degrees` (counter-clockwise as displayed) about the image
/// centre, bilinear, `fill` outside.
pub fn rotate_image(img: &Tensor, degrees: f64, fill: f32) -> Result<Tensor> {
    let [_, h, w] = dims3(img)?;
    ensure!((-180.0..=180.0).contains(&degrees), "rotation {degrees} outside [-180, 180]");
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    inverse_map(img, fill, move |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // inverse of a counter-clockwise turn in y-down coordinates
        let sy = c * dy + s * dx;
        let sx = c * dx - s * dy;
        ((sy + cy) as f32, (sx + cx) as f32)
    })
}

/// Bilinear zoom by `factor` about the image centre, keeping the original
/// extents: magnification crops, minification pads with `fill`.
pub fn scale_image(img: &Tensor, factor: f64, fill: f32) -> Result<Tensor> {
    let [_, h, w] = dims3(img)?;
    ensure!(factor > 0.0 && factor.is_finite(), "scale factor must be positive, got {factor}");
    ensure!(
        (h as f64 * factor).round() >= 1.0 && (w as f64 * factor).round() >= 1.0,
        "scaling {h}x{w} by {factor} leaves no pixels"
    );
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    inverse_map(img, fill, move |y, x| {
        (((y as f64 - cy) / factor + cy) as f32, ((x as f64 - cx) / factor + cx) as f32)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Translate,
    Rotate,
    Scale,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [Self::Translate, Self::Rotate, Self::Scale];

    pub fn identity_magnitude(self) -> f64 {
        match self {
            Self::Scale => 1.0,
            _ => 0.0,
        }
    }

    /// Label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::Translate => "translate",
            Self::Rotate => "rotate",
            Self::Scale => "scale-adapted",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Translate => "translate",
            Self::Rotate => "rotate",
            Self::Scale => "scale",
        })
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Self::Translate),
            "rotate" => Ok(Self::Rotate),
            "scale" => Ok(Self::Scale),
            _ => Err(Error::Config(format!("unknown transform `{s}` (expected translate, rotate, scale)"))),
        }
    }
}

/// A transform family and its magnitude grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub magnitudes: Vec<f64>,
    pub fill: f32,
}

impl TransformSpec {
    /// Translation 0..=64 px step 8, rotation 0..=45° step 5, scale
    /// 0.25..=3.0 step 0.25.
    pub fn standard(kind: TransformKind) -> Self {
        let grid = |start: f64, step: f64, n: usize| (0..n).map(|i| start + step * i as f64).collect();
        let magnitudes = match kind {
            TransformKind::Translate => grid(0.0, 8.0, 9),
            TransformKind::Rotate => grid(0.0, 5.0, 10),
            TransformKind::Scale => grid(0.25, 0.25, 12),
        };
        Self {
            kind,
            magnitudes,
            fill: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.magnitudes.is_empty(), "empty magnitude grid");
        ensure!(
            self.magnitudes.windows(2).all(|p| p[0] < p[1]),
            "magnitudes must be strictly increasing"
        );
        Ok(())
    }

    /// The transformed variants of `img` at magnitude `m`: four axis
    /// directions for translation, one image otherwise.
    pub fn apply(&self, img: &Tensor, m: f64) -> Result<Vec<Tensor>> {
        match self.kind {
            TransformKind::Translate => {
                let s = m.round() as isize;
                [(s, 0), (-s, 0), (0, s), (0, -s)]
                    .into_iter()
                    .map(|(dy, dx)| translate_image(img, dy, dx, self.fill))
                    .collect()
            }
            TransformKind::Rotate => Ok(vec![rotate_image(img, m, self.fill)?]),
            TransformKind::Scale => Ok(vec![scale_image(img, m, self.fill)?]),
        }
    }
}

/// Maps a batch of NCHW images to logits `[N, K]`.
pub trait Classifier: Sync {
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_classify(batch)
    }
}

/// Ignores its input.
#[derive(Clone, Debug)]
pub struct ConstantClassifier {
    pub logits: Vec<f32>,
}

impl Classifier for ConstantClassifier {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.dim(0);
        let k = self.logits.len();
        Tensor::from_fn(&[n, k], |i| self.logits[i % k])
    }
}

/// Two classes: 1 when channel 0 at the centre pixel `(⌊H/2⌋, ⌊W/2⌋)`
/// exceeds `threshold`, else 0.
#[derive(Clone, Debug)]
pub struct CenterPixelClassifier {
    pub threshold: f32,
}

impl Classifier for CenterPixelClassifier {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = batch.dims4()?;
        Tensor::from_fn(&[n, 2], |i| {
            if i % 2 == 0 {
                self.threshold
            } else {
                batch.data()[((i / 2) * c * h + h / 2) * w + w / 2]
            }
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn predict(clf: &dyn Classifier, img: &Tensor) -> Result<usize> {
    let [c, h, w] = dims3(img)?;
    let logits = clf.logits(&img.reshape(&[1, c, h, w])?)?;
    Ok(argmax(logits.data()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceRow {
    pub magnitude: f64,
    pub consistency: f64,
    pub accuracy: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub kind: TransformKind,
    pub rows: Vec<InvarianceRow>,
}

impl InvarianceReport {
    /// CSV with columns `transform,magnitude,consistency,accuracy,n`;
    /// accuracy is empty when no labels were given.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("transform,magnitude,consistency,accuracy,n\n");
        out.push_str(&self.csv_rows());
        out
    }

    /// The data rows of [`to_csv`](Self::to_csv) without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let acc = r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:.6},{},{}", self.kind.label(), r.magnitude, r.consistency, acc, r.n);
        }
        out
    }
}

/// Fraction of images whose predicted label is unchanged by each magnitude
/// of `spec` (translation averages the four axis directions), plus accuracy
/// against `labels` when given.
pub fn consistency_sweep(
    clf: &dyn Classifier,
    images: &[Tensor],
    labels: Option<&[usize]>,
    spec: &TransformSpec,
) -> Result<InvarianceReport> {
    ensure!(!images.is_empty(), "invariance sweep needs at least one image");
    spec.validate()?;
    if let Some(l) = labels {
        ensure!(l.len() == images.len(), "{} labels for {} images", l.len(), images.len());
    }
    let base = images.par_iter().map(|img| predict(clf, img)).collect::<Result<Vec<_>>>()?;
    let identity = spec.kind.identity_magnitude();
    let mut rows = Vec::with_capacity(spec.magnitudes.len());
    for &m in &spec.magnitudes {
        // per image: (agreeing variants, correct variants, variants)
        let counts = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| -> Result<(usize, usize, usize)> {
                let preds = if m == identity {
                    vec![base[i]]
                } else {
                    spec.apply(img, m)?
                        .iter()
                        .map(|t| predict(clf, t))
                        .collect::<Result<Vec<_>>>()?
                };
                let agree = preds.iter().filter(|&&p| p == base[i]).count();
                let correct = labels.map_or(0, |l| preds.iter().filter(|&&p| p == l[i]).count());
                Ok((agree, correct, preds.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = images.len() as f64;
        let consistency = counts.iter().map(|&(a, _, v)| a as f64 / v as f64).sum::<f64>() / n;
        let accuracy = labels.map(|_| counts.iter().map(|&(_, c, v)| c as f64 / v as f64).sum::<f64>() / n);
        rows.push(InvarianceRow {
            magnitude: m,
            consistency,
            accuracy,
            n: images.len(),
        });
    }
    Ok(InvarianceReport { kind: spec.kind, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn grids() {
        let t = TransformSpec::standard(TransformKind::Translate);
        assert_eq!(t.magnitudes, [0.0, 8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0, 64.0]);
        assert_eq!(TransformSpec::standard(TransformKind::Rotate).magnitudes.len(), 10);
        let s = TransformSpec::standard(TransformKind::Scale);
        assert_eq!(s.magnitudes.len(), 12);
        assert_eq!(s.magnitudes[3], 1.0);
        assert_eq!(*s.magnitudes.last().unwrap(), 3.0);
    }

    #[test]
    fn identities() {
        let img = Init::new(0).uniform(&[3, 8, 8], -1.0, 1.0);
        assert_eq!(translate_image(&img, 0, 0, 0.0).unwrap(), img);
        assert_eq!(rotate_image(&img, 0.0, 0.0).unwrap(), img);
        assert_eq!(scale_image(&img, 1.0, 0.0).unwrap(), img);
        assert!(translate_image(&img, 8, 0, 0.0).is_err());
        assert!(rotate_image(&img, 181.0, 0.0).is_err());
        assert!(scale_image(&img, 0.01, 0.0).is_err());
    }

    #[test]
    fn translation_inverse_on_overlap() {
        let img = Init::new(1).uniform(&[1, 10, 12], -1.0, 1.0);
        let back = translate_image(&translate_image(&img, 3, 5, 0.0).unwrap(), -3, -5, 0.0).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                assert_eq!(back.at(&[0, y, x]), img.at(&[0, y, x]));
            }
        }
        assert_eq!(back.at(&[0, 9, 11]), 0.0);
    }

    #[test]
    fn rotation_quarter_turn_is_exact() {
        let img = Tensor::from_fn(&[1, 5, 5], |i| i as f32).unwrap();
        let r = rotate_image(&img, 90.0, 0.0).unwrap();
        // counter-clockwise: the top-right corner moves to the top-left
        assert!((r.at(&[0, 0, 0]) - img.at(&[0, 0, 4])).abs() < 1e-4);
        assert!((r.at(&[0, 2, 2]) - img.at(&[0, 2, 2])).abs() < 1e-4);
    }

    #[test]
    fn constant_classifier_is_fully_consistent() {
        let imgs: Vec<Tensor> = (0..3).map(|s| Init::new(s).uniform(&[3, 16, 16], -1.0, 1.0)).collect();
        let clf = ConstantClassifier { logits: vec![0.0, 1.0, 1.0] };
        for kind in TransformKind::ALL {
            let mut spec = TransformSpec::standard(kind);
            if kind == TransformKind::Translate {
                spec.magnitudes = vec![0.0, 4.0, 8.0];
            }
            let rep = consistency_sweep(&clf, &imgs, Some(&[1, 1, 2]), &spec).unwrap();
            assert!(rep.rows.iter().all(|r| r.consistency == 1.0));
            assert!(rep.rows.iter().all(|r| (r.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
