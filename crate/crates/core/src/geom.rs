//! Face alignment geometry.
//!
//! Coordinates follow image conventions: origin at the top-left pixel centre,
//! `x` to the right, `y` down. A positive angle turns the `+x` axis toward
//! `+y`. All resampling is bilinear with pixel centres at integer positions.
//!
//! Two alignment modes are provided. The pose-independent path crops the
//! detector box directly. The pose-dependent path levels the eyes by rotating
//! the whole frame about the eye midpoint and only then crops a re-detected
//! box, so texture inside the facial boundary never comes from padding.

use serde::{Deserialize, Serialize};

use crate::detect::{primary_face, Detection};
use crate::error::{Error, Result};
use crate::image::Image;

const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn midpoint(a: Point2, b: Point2) -> Point2 {
        Point2::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0)
    }
}

/// The five detector landmarks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub left_eye: Point2,
    pub right_eye: Point2,
    pub nose: Point2,
    pub mouth_left: Point2,
    pub mouth_right: Point2,
}

impl LandmarkSet {
    pub fn points(&self) -> [Point2; 5] {
        [
            self.left_eye,
            self.right_eye,
            self.nose,
            self.mouth_left,
            self.mouth_right,
        ]
    }

    pub fn from_points(p: [Point2; 5]) -> Self {
        Self {
            left_eye: p[0],
            right_eye: p[1],
            nose: p[2],
            mouth_left: p[3],
            mouth_right: p[4],
        }
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Self {
        Self::from_points(self.points().map(f))
    }

    pub fn eye_midpoint(&self) -> Point2 {
        Point2::midpoint(self.left_eye, self.right_eye)
    }

    pub fn is_finite(&self) -> bool {
        self.points().iter().all(Point2::is_finite)
    }
}

/// Axis-aligned box in pixel-centre coordinates, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite box {b:?}")));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidInput(format!("empty box {b:?}")));
        }
        Ok(b)
    }

    /// Smallest box containing all `points`.
    pub fn enclosing(points: &[Point2]) -> Result<Self> {
        let mut it = points.iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidInput("no points to enclose".into()))?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in it {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Self::new(x0, y0, x1, y1)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2::new(
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x_min, self.y_min),
            Point2::new(self.x_max, self.y_min),
            Point2::new(self.x_max, self.y_max),
            Point2::new(self.x_min, self.y_max),
        ]
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Grows each side by `fraction` of the corresponding extent.
    pub fn expanded(&self, fraction: f64) -> Self {
        let dx = self.width() * fraction;
        let dy = self.height() * fraction;
        Self {
            x_min: self.x_min - dx,
            y_min: self.y_min - dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// True when the box lies within the pixel-centre extent of a `width x height` image.
    pub fn is_inside(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f64 - 1.0
            && self.y_max <= height as f64 - 1.0
    }
}

/// Angle in degrees, normalized to `(-180, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    pub fn from_degrees(degrees: f64) -> Result<Self> {
        if !degrees.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite angle {degrees}")));
        }
        let mut d = degrees % 360.0;
        if d <= -180.0 {
            d += 360.0;
        } else if d > 180.0 {
            d -= 360.0;
        }
        // -0.0 would make the zero-angle fast paths compare unequal in bit tests
        Ok(Angle(if d == 0.0 { 0.0 } else { d }))
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn neg(self) -> Angle {
        // negation stays in range except at exactly 180
        if self.0 == 180.0 {
            self
        } else {
            Angle(-self.0 + 0.0)
        }
    }

    /// `(sin, cos)`, exact at multiples of 90 degrees.
    pub fn sin_cos(self) -> (f64, f64) {
        let d = self.0;
        if d == 0.0 {
            (0.0, 1.0)
        } else if d == 90.0 {
            (1.0, 0.0)
        } else if d == -90.0 {
            (-1.0, 0.0)
        } else if d == 180.0 {
            (0.0, -1.0)
        } else {
            d.to_radians().sin_cos()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    PoseDependent,
    PoseIndependent,
}

impl AlignmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentMode::PoseDependent => "pose_dependent",
            AlignmentMode::PoseIndependent => "pose_independent",
        }
    }
}

impl std::fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AlignmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose_dependent" => Ok(AlignmentMode::PoseDependent),
            "pose_independent" => Ok(AlignmentMode::PoseIndependent),
            other => Err(Error::Parse(format!("unknown alignment mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    Replicate,
    Reflect,
}

/// A fixed-size face crop plus the transform that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFace {
    pub pixels: Image,
    pub mode: AlignmentMode,
    pub source_frame_index: usize,
    /// Rotation applied to the source frame before cropping.
    pub applied_angle: Angle,
    pub rotation_center: Point2,
    /// Crop box in the coordinates of the (rotated) frame.
    pub crop_box: BoundingBox,
    pub touched_padding: bool,
    /// Re-detection on the rotated frame failed and the rotated source box was used.
    pub redetect_fallback: bool,
}

impl AlignedFace {
    /// Maps a point of the source frame into crop pixel coordinates.
    pub fn source_to_crop(&self, p: Point2) -> Point2 {
        let q = rotate_point(p, self.rotation_center, self.applied_angle);
        let n = self.pixels.width() as f64 - 1.0;
        Point2::new(
            (q.x - self.crop_box.x_min) * n / self.crop_box.width(),
            (q.y - self.crop_box.y_min) * n / self.crop_box.height(),
        )
    }

    /// Maps a source point through the rotation only.
    pub fn source_to_rotated(&self, p: Point2) -> Point2 {
        rotate_point(p, self.rotation_center, self.applied_angle)
    }
}

/// Angle of the inter-ocular vector. Rotating the eyes by its negation levels them.
pub fn eye_rotation_angle(landmarks: &LandmarkSet) -> Result<Angle> {
    let dx = landmarks.right_eye.x - landmarks.left_eye.x;
    let dy = landmarks.right_eye.y - landmarks.left_eye.y;
    if !(dx.is_finite() && dy.is_finite()) {
        return Err(Error::DegenerateLandmarks("non-finite eye coordinates".into()));
    }
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::DegenerateLandmarks("coincident eye points".into()));
    }
    Angle::from_degrees(dy.atan2(dx).to_degrees())
}

pub fn rotate_point(p: Point2, center: Point2, angle: Angle) -> Point2 {
    let (s, c) = angle.sin_cos();
    let dx = p.x - center.x;
    let dy = p.y - center.y;
    Point2::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy)
}

fn reflect_coord(v: f64, max: f64) -> f64 {
    if max <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let r = v.rem_euclid(period);
    if r > max {
        period - r
    } else {
        r
    }
}

/// Bilinear sample at `(x, y)`. The flag reports whether the location fell
/// outside the pixel-centre extent and was filled by `pad`.
pub fn sample_bilinear(img: &Image, x: f64, y: f64, pad: PadPolicy) -> ([f32; 3], bool) {
    let max_x = img.width() as f64 - 1.0;
    let max_y = img.height() as f64 - 1.0;
    let padded = x < -EDGE_EPS || y < -EDGE_EPS || x > max_x + EDGE_EPS || y > max_y + EDGE_EPS;
    let (sx, sy) = match pad {
        PadPolicy::Replicate => (x.clamp(0.0, max_x), y.clamp(0.0, max_y)),
        PadPolicy::Reflect => (reflect_coord(x, max_x), reflect_coord(y, max_y)),
    };
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let p00 = img.get(x0, y0);
    let p10 = img.get(x1, y0);
    let p01 = img.get(x0, y1);
    let p11 = img.get(x1, y1);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
        let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy) as f32;
    }
    (out, padded)
}

/// Output of [`rotate_frame`]: the rotated image and a row-major map of
/// locations whose sample fell outside the input.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedFrame {
    pub image: Image,
    pub padded: Vec<bool>,
}

impl RotatedFrame {
    pub fn padded_count(&self) -> usize {
        self.padded.iter().filter(|p| **p).count()
    }
}

/// Rotates the content of `image` by `angle` about `center`, keeping its size.
pub fn rotate_frame(image: &Image, center: Point2, angle: Angle, pad: PadPolicy) -> Result<RotatedFrame> {
    if image.is_empty() {
        return Err(Error::InvalidInput("cannot rotate an empty image".into()));
    }
    if !center.is_finite() {
        return Err(Error::InvalidInput("non-finite rotation centre".into()));
    }
    let (w, h) = (image.width(), image.height());
    if angle == Angle::ZERO {
        return Ok(RotatedFrame {
            image: image.clone(),
            padded: vec![false; w * h],
        });
    }
    let inverse = angle.neg();
    let mut out = Image::new(w, h);
    let mut padded = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let src = rotate_point(Point2::new(x as f64, y as f64), center, inverse);
            let (rgb, pad_hit) = sample_bilinear(image, src.x, src.y, pad);
            out.set(x, y, rgb);
            padded[y * w + x] = pad_hit;
        }
    }
    Ok(RotatedFrame { image: out, padded })
}

fn check_target(target: usize) -> Result<()> {
    if target < 8 {
        return Err(Error::InvalidInput(format!("target size {target} is below 8")));
    }
    Ok(())
}

fn check_intersects(image: &Image, b: &BoundingBox) -> Result<()> {
    let max_x = image.width() as f64 - 1.0;
    let max_y = image.height() as f64 - 1.0;
    if b.x_max < 0.0 || b.y_max < 0.0 || b.x_min > max_x || b.y_min > max_y {
        return Err(Error::InvalidCrop(format!(
            "box {b:?} lies outside the {}x{} image",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Resamples a `target x target` grid whose pixel `(u, v)` reads `src` at `map(u, v)`.
fn resample(src: &Image, target: usize, map: impl Fn(f64, f64) -> Point2) -> (Image, bool) {
    let mut out = Image::new(target, target);
    let mut touched = false;
    for v in 0..target {
        for u in 0..target {
            let p = map(u as f64, v as f64);
            let (rgb, hit) = sample_bilinear(src, p.x, p.y, PadPolicy::Replicate);
            touched |= hit;
            out.set(u, v, rgb.map(|c| c.clamp(0.0, 1.0)));
        }
    }
    (out, touched)
}

fn box_map(b: BoundingBox, target: usize) -> impl Fn(f64, f64) -> Point2 {
    let n = target as f64 - 1.0;
    let sx = b.width() / n;
    let sy = b.height() / n;
    move |u, v| Point2::new(b.x_min + u * sx, b.y_min + v * sy)
}

/// Crops `b` and rescales it to `target x target`. Returns the crop and
/// whether any sample came from replicate padding.
pub fn crop_scale(image: &Image, b: &BoundingBox, target: usize) -> Result<(Image, bool)> {
    if image.is_empty() {
        return Err(Error::InvalidInput("cannot crop an empty image".into()));
    }
    check_target(target)?;
    check_intersects(image, b)?;
    Ok(resample(image, target, box_map(*b, target)))
}

pub fn align_pose_independent(
    frame: &Image,
    frame_index: usize,
    detection: &Detection,
    target: usize,
) -> Result<AlignedFace> {
    let (pixels, touched_padding) = crop_scale(frame, &detection.bbox, target)?;
    Ok(AlignedFace {
        pixels,
        mode: AlignmentMode::PoseIndependent,
        source_frame_index: frame_index,
        applied_angle: Angle::ZERO,
        rotation_center: detection.landmarks.eye_midpoint(),
        crop_box: detection.bbox,
        touched_padding,
        redetect_fallback: false,
    })
}

/// Levels the eyes, re-detects on the rotated full frame and crops.
///
/// The crop is resampled straight from the source frame through the composed
/// rotation and box maps, which equals cropping the rotated frame without a
/// second interpolation pass. A crop sample is flagged as padding only when
/// its source location lies outside the original frame.
pub fn align_pose_dependent<F>(
    frame: &Image,
    frame_index: usize,
    detection: &Detection,
    mut redetect: F,
    target: usize,
) -> Result<AlignedFace>
where
    F: FnMut(&Image) -> Result<Vec<Detection>>,
{
    check_target(target)?;
    let theta = eye_rotation_angle(&detection.landmarks)?;
    let applied = theta.neg();
    let center = detection.landmarks.eye_midpoint();
    let rotated = rotate_frame(frame, center, applied, PadPolicy::Replicate)?;

    let found = redetect(&rotated.image)?;
    let (crop_box, redetect_fallback) = match primary_face(&found) {
        Ok(d) => (d.bbox, false),
        Err(_) => {
            let corners = detection.bbox.corners().map(|p| rotate_point(p, center, applied));
            (BoundingBox::enclosing(&corners)?, true)
        }
    };
    check_intersects(&rotated.image, &crop_box)?;

    let to_box = box_map(crop_box, target);
    let inverse = applied.neg();
    let (pixels, touched_padding) = resample(frame, target, |u, v| {
        rotate_point(to_box(u, v), center, inverse)
    });
    Ok(AlignedFace {
        pixels,
        mode: AlignmentMode::PoseDependent,
        source_frame_index: frame_index,
        applied_angle: applied,
        rotation_center: center,
        crop_box,
        touched_padding,
        redetect_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(le: (f64, f64), re: (f64, f64)) -> LandmarkSet {
        LandmarkSet {
            left_eye: Point2::new(le.0, le.1),
            right_eye: Point2::new(re.0, re.1),
            nose: Point2::new((le.0 + re.0) / 2.0, le.1 + 10.0),
            mouth_left: Point2::new(le.0, le.1 + 20.0),
            mouth_right: Point2::new(re.0, re.1 + 20.0),
        }
    }

    #[test]
    fn eye_angle_examples() {
        let a = eye_rotation_angle(&lm((0.0, 0.0), (1.0, 0.0))).unwrap();
        assert_eq!(a.degrees(), 0.0);
        let a = eye_rotation_angle(&lm((100.0, 100.0), (200.0, 200.0))).unwrap();
        assert!((a.degrees() - 45.0).abs() < 1e-12);
        // oracle: atan(-40/100) in degrees, dx > 0 so no quadrant correction
        let expected = (-0.4f64).atan() * 180.0 / std::f64::consts::PI;
        let a = eye_rotation_angle(&lm((100.0, 120.0), (200.0, 80.0))).unwrap();
        assert!((a.degrees() - expected).abs() < 1e-12);
        assert!((a.degrees() - -21.8014).abs() < 1e-4);
    }

    #[test]
    fn coincident_eyes_are_degenerate() {
        let err = eye_rotation_angle(&lm((5.0, 5.0), (5.0, 5.0))).unwrap_err();
        assert!(matches!(err, Error::DegenerateLandmarks(_)));
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(Angle::from_degrees(180.0).unwrap().degrees(), 180.0);
        assert_eq!(Angle::from_degrees(-180.0).unwrap().degrees(), 180.0);
        assert_eq!(Angle::from_degrees(270.0).unwrap().degrees(), -90.0);
        assert_eq!(Angle::from_degrees(-450.0).unwrap().degrees(), -90.0);
        assert!(Angle::from_degrees(f64::NAN).is_err());
    }

    #[test]
    fn rotate_point_examples() {
        let o = Point2::new(0.0, 0.0);
        assert_eq!(rotate_point(Point2::new(1.0, 0.0), o, Angle::ZERO), Point2::new(1.0, 0.0));
        let q = rotate_point(Point2::new(1.0, 0.0), o, Angle::from_degrees(90.0).unwrap());
        assert_eq!(q, Point2::new(0.0, 1.0));
        // closed form with cos 30 = sqrt(3)/2, sin 30 = 1/2, offset (1, 2)
        let c = 3f64.sqrt() / 2.0;
        let q = rotate_point(Point2::new(2.0, 3.0), Point2::new(1.0, 1.0), Angle::from_degrees(30.0).unwrap());
        assert!((q.x - (1.0 + c * 1.0 - 0.5 * 2.0)).abs() < 1e-12);
        assert!((q.y - (1.0 + 0.5 * 1.0 + c * 2.0)).abs() < 1e-12);
    }

    fn checker(n: usize) -> Image {
        Image::from_fn(n, n, |x, y| {
            if (x / 2 + y / 2) % 2 == 0 {
                [0.9, 0.1, 0.2]
            } else {
                [0.1, 0.8, 0.3]
            }
        })
    }

    #[test]
    fn rotate_frame_identity_and_constant() {
        let img = checker(8);
        let r = rotate_frame(&img, Point2::new(3.0, 2.0), Angle::ZERO, PadPolicy::Replicate).unwrap();
        assert_eq!(r.image, img);
        assert_eq!(r.padded_count(), 0);

        let flat = Image::filled(9, 7, [0.25, 0.5, 0.75]);
        for deg in [13.0, -47.0, 90.0, 171.0] {
            for pad in [PadPolicy::Replicate, PadPolicy::Reflect] {
                let r = rotate_frame(&flat, Point2::new(4.0, 3.0), Angle::from_degrees(deg).unwrap(), pad).unwrap();
                for (a, b) in r.image.data().iter().zip(flat.data()) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotate_frame_quarter_turn_matches_permutation() {
        let n = 8;
        let img = checker(n);
        let c = (n as f64 - 1.0) / 2.0;
        let r = rotate_frame(&img, Point2::new(c, c), Angle::from_degrees(90.0).unwrap(), PadPolicy::Replicate)
            .unwrap();
        // content turned +90 deg: out(x, y) = in(y, n-1-x)
        for y in 0..n {
            for x in 0..n {
                let want = img.get(y, n - 1 - x);
                let got = r.image.get(x, y);
                for k in 0..3 {
                    assert!((want[k] - got[k]).abs() < 1e-6);
                }
            }
        }
        assert_eq!(r.padded_count(), 0);
    }

    #[test]
    fn rotate_frame_rejects_empty() {
        let img = Image::new(0, 0);
        assert!(rotate_frame(&img, Point2::new(0.0, 0.0), Angle::ZERO, PadPolicy::Replicate).is_err());
    }

    #[test]
    fn rotate_frame_flags_corners() {
        let img = checker(16);
        let r = rotate_frame(&img, Point2::new(7.5, 7.5), Angle::from_degrees(30.0).unwrap(), PadPolicy::Reflect)
            .unwrap();
        assert!(r.padded[0]);
        assert!(!r.padded[8 * 16 + 8]);
    }

    #[test]
    fn crop_full_image_is_identity() {
        let img = Image::from_fn(12, 12, |x, y| [x as f32 / 11.0, y as f32 / 11.0, 0.5]);
        let b = BoundingBox::new(0.0, 0.0, 11.0, 11.0).unwrap();
        let (out, touched) = crop_scale(&img, &b, 12).unwrap();
        assert_eq!(out, img);
        assert!(!touched);
    }

    #[test]
    fn crop_left_half_of_gradient() {
        let w = 101;
        let img = Image::from_fn(w, 20, |x, _| {
            let g = x as f32 / (w - 1) as f32;
            [g, g, g]
        });
        let b = BoundingBox::new(0.0, 0.0, 50.0, 19.0).unwrap();
        let (out, _) = crop_scale(&img, &b, 32).unwrap();
        let vals: Vec<f32> = out.data().iter().step_by(3).copied().collect();
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(lo.abs() < 1e-3);
        assert!((hi - 0.5).abs() < 1e-3);
    }

    /// Reference bilinear resampler written against the raw buffer.
    fn oracle_crop(img: &Image, x0: f64, y0: f64, x1: f64, y1: f64, t: usize) -> Vec<f64> {
        let w = img.width();
        let h = img.height();
        let raw = img.data();
        let at = |x: usize, y: usize, c: usize| f64::from(raw[(y * w + x) * 3 + c]);
        let mut out = Vec::new();
        for v in 0..t {
            for u in 0..t {
                let x = x0 + (x1 - x0) * u as f64 / (t - 1) as f64;
                let y = y0 + (y1 - y0) * v as f64 / (t - 1) as f64;
                let xi = (x.floor() as usize).min(w - 1);
                let yi = (y.floor() as usize).min(h - 1);
                let xj = (xi + 1).min(w - 1);
                let yj = (yi + 1).min(h - 1);
                let a = x - xi as f64;
                let b = y - yi as f64;
                for c in 0..3 {
                    out.push(
                        (1.0 - a) * (1.0 - b) * at(xi, yi, c)
                            + a * (1.0 - b) * at(xj, yi, c)
                            + (1.0 - a) * b * at(xi, yj, c)
                            + a * b * at(xj, yj, c),
                    );
                }
            }
        }
        out
    }

    #[test]
    fn crop_quadrant_matches_reference_bilinear() {
        let img = Image::from_fn(224, 224, |x, y| {
            let fx = x as f32 / 223.0;
            let fy = y as f32 / 223.0;
            [fx, fy, (fx * 7.0 + fy * 3.0).sin() * 0.5 + 0.5]
        });
        let b = BoundingBox::new(0.0, 0.0, 112.0, 112.0).unwrap();
        let (out, touched) = crop_scale(&img, &b, 224).unwrap();
        assert!(!touched);
        let want = oracle_crop(&img, 0.0, 0.0, 112.0, 112.0, 224);
        for (g, w) in out.data().iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() < 1e-5);
        }
    }

    #[test]
    fn crop_errors() {
        let img = Image::filled(10, 10, [0.5; 3]);
        let outside = BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(matches!(crop_scale(&img, &outside, 16), Err(Error::InvalidCrop(_))));
        let inside = BoundingBox::new(1.0, 1.0, 5.0, 5.0).unwrap();
        assert!(matches!(crop_scale(&img, &inside, 4), Err(Error::InvalidInput(_))));
        let partial = BoundingBox::new(-3.0, 2.0, 6.0, 8.0).unwrap();
        let (_, touched) = crop_scale(&img, &partial, 16).unwrap();
        assert!(touched);
    }

    proptest! {
        #[test]
        fn rotation_round_trips(px in -500.0..500.0f64, py in -500.0..500.0f64,
                                cx in -100.0..100.0f64, cy in -100.0..100.0f64,
                                deg in -179.0..180.0f64) {
            let a = Angle::from_degrees(deg).unwrap();
            let c = Point2::new(cx, cy);
            let p = Point2::new(px, py);
            let back = rotate_point(rotate_point(p, c, a), c, a.neg());
            prop_assert!((back.x - px).abs() < 1e-9 && (back.y - py).abs() < 1e-9);
        }

        #[test]
        fn mirrored_eyes_negate_angle(lx in 0.0..200.0f64, ly in 0.0..200.0f64,
                                      dx in 1.0..100.0f64, dy in -80.0..80.0f64) {
            let l = lm((lx, ly), (lx + dx, ly + dy));
            let a = eye_rotation_angle(&l).unwrap().degrees();
            // mirror about x = 0; the mirrored right eye becomes the new left eye
            let m = lm((-(lx + dx), ly + dy), (-lx, ly));
            let b = eye_rotation_angle(&m).unwrap().degrees();
            prop_assert!((a + b).abs() < 1e-9);
        }

        #[test]
        fn crop_shape_and_range(w in 2usize..40, h in 2usize..40, t in 8usize..24,
                                x0 in -10.0..30.0f64, y0 in -10.0..30.0f64,
                                bw in 1.0..40.0f64, bh in 1.0..40.0f64, seed in 0u32..1000) {
            let img = Image::from_fn(w, h, |x, y| {
                let v = ((x as u32 * 31 + y as u32 * 17 + seed) % 97) as f32 / 96.0;
                [v, 1.0 - v, 0.5]
            });
            let b = BoundingBox::new(x0, y0, x0 + bw, y0 + bh).unwrap();
            match crop_scale(&img, &b, t) {
                Ok((out, _)) => {
                    prop_assert_eq!(out.width(), t);
                    prop_assert_eq!(out.height(), t);
                    prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
                Err(Error::InvalidCrop(_)) => {
                    prop_assert!(x0 > w as f64 - 1.0 || y0 > h as f64 - 1.0 || x0 + bw < 0.0 || y0 + bh < 0.0);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
