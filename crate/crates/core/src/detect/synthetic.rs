//! Synthetic fiducial faces.
//!
//! A face is painted as a saturated "plate" polygon on a grey background with
//! five coloured disks for the landmarks. All painting is anti-aliased with
//! 4x4 supersampling, so a marker pixel is a linear blend of plate and marker
//! colour. The reader finds plate components by chroma, takes their
//! axis-aligned extent as the box, and locates every marker by the centroid
//! of its blend weights. Grey backgrounds have zero chroma, so any greyscale
//! texture can surround the faces.

use rand::{Rng, RngExt};

use crate::detect::Detection;
use crate::geom::{rotate_point, Angle, BoundingBox, LandmarkSet, Point2};
use crate::image::Image;

pub const PLATE: [f32; 3] = [0.05, 0.50, 0.50];

/// Marker colours in landmark order: left eye, right eye, nose, mouth left, mouth right.
pub const MARKERS: [[f32; 3]; 5] = [
    [0.05, 0.05, 0.50],
    [0.05, 0.50, 0.05],
    [0.05, 0.95, 0.95],
    [0.50, 0.50, 0.95],
    [0.50, 0.95, 0.50],
];

const SUPERSAMPLE: usize = 4;
const FOREGROUND_CHROMA: f32 = 0.2;
const EDGE_BAND: isize = 2;
const MIN_COMPONENT: usize = 24;
const MIN_MARKER_WEIGHT: f64 = 0.08;
const MIN_MARKER_MASS: f64 = 3.0;
const MAX_RESIDUAL: f64 = 0.12;

/// Geometry of one painted face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSpec {
    /// Plate outline, any convex polygon.
    pub plate: Vec<Point2>,
    pub landmarks: LandmarkSet,
    pub marker_radius: f64,
}

impl FaceSpec {
    /// Axis-aligned plate covering exactly the pixel centres inside `bbox`.
    pub fn from_box(bbox: BoundingBox, landmarks: LandmarkSet) -> Self {
        let r = (bbox.width().min(bbox.height()) * 0.06).clamp(2.5, 6.0);
        let grown = BoundingBox {
            x_min: bbox.x_min - 0.5,
            y_min: bbox.y_min - 0.5,
            x_max: bbox.x_max + 0.5,
            y_max: bbox.y_max + 0.5,
        };
        Self {
            plate: grown.corners().to_vec(),
            landmarks,
            marker_radius: r,
        }
    }

    /// A face with canonical landmark layout, `half_width` plate half-width,
    /// rolled by `roll` about `center`.
    pub fn canonical(center: Point2, half_width: f64, roll: Angle) -> Self {
        Self::with_offsets(center, half_width, roll, [(0.0, 0.0); 5])
    }

    /// Canonical layout with per-landmark offsets in units of the half width.
    pub fn with_offsets(center: Point2, half_width: f64, roll: Angle, jitter: [(f64, f64); 5]) -> Self {
        let hw = half_width;
        let hh = half_width * 1.2;
        let layout = [
            (-0.45, -0.30),
            (0.45, -0.30),
            (0.0, 0.10),
            (-0.35, 0.50),
            (0.35, 0.50),
        ];
        let mut pts = [Point2::new(0.0, 0.0); 5];
        for (i, ((fx, fy), (jx, jy))) in layout.iter().zip(jitter).enumerate() {
            let local = Point2::new(center.x + (fx + jx) * hw, center.y + fy * hh + jy * hw);
            pts[i] = rotate_point(local, center, roll);
        }
        let plate = [
            Point2::new(center.x - hw, center.y - hh),
            Point2::new(center.x + hw, center.y - hh),
            Point2::new(center.x + hw, center.y + hh),
            Point2::new(center.x - hw, center.y + hh),
        ]
        .map(|p| rotate_point(p, center, roll))
        .to_vec();
        Self {
            plate,
            landmarks: LandmarkSet::from_points(pts),
            marker_radius: (hw * 0.1).clamp(2.5, 6.0),
        }
    }

    /// Random face with random roll and landmark jitter that fits inside a
    /// `width x height` frame with `margin` pixels to spare.
    pub fn random<R: Rng>(rng: &mut R, width: usize, height: usize, margin: f64, max_roll: f64) -> Self {
        let max_hw = ((width.min(height) as f64 - 2.0 * margin) / (2.0 * 1.2 * std::f64::consts::SQRT_2)).max(12.0);
        let hw = rng.random_range(12.0..=max_hw.max(12.0001));
        let reach = hw * 1.2 * std::f64::consts::SQRT_2 + margin;
        let cx = rng.random_range(reach..=(width as f64 - reach).max(reach + 1e-6));
        let cy = rng.random_range(reach..=(height as f64 - reach).max(reach + 1e-6));
        let roll = Angle::from_degrees(rng.random_range(-max_roll..=max_roll)).expect("finite");
        let mut jitter = [(0.0, 0.0); 5];
        for j in &mut jitter {
            *j = (rng.random_range(-0.05..=0.05), rng.random_range(-0.05..=0.05));
        }
        Self::with_offsets(Point2::new(cx, cy), hw, roll, jitter)
    }

    fn plate_bounds(&self) -> (f64, f64, f64, f64) {
        let xs = self.plate.iter().map(|p| p.x);
        let ys = self.plate.iter().map(|p| p.y);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

fn inside_convex(poly: &[Point2], p: Point2) -> bool {
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

fn coverage(x: usize, y: usize, inside: impl Fn(Point2) -> bool) -> f32 {
    let mut hits = 0;
    for j in 0..SUPERSAMPLE {
        for i in 0..SUPERSAMPLE {
            let sx = x as f64 - 0.5 + (i as f64 + 0.5) / SUPERSAMPLE as f64;
            let sy = y as f64 - 0.5 + (j as f64 + 0.5) / SUPERSAMPLE as f64;
            if inside(Point2::new(sx, sy)) {
                hits += 1;
            }
        }
    }
    hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
}

fn blend(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn pixel_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = (lo - 1.0).floor().max(0.0) as usize;
    let b = ((hi + 2.0).ceil().max(0.0) as usize).min(n);
    a.min(b)..b
}

/// Paints `face` onto `img` in place.
pub fn paint_face(img: &mut Image, face: &FaceSpec) {
    let (x0, y0, x1, y1) = face.plate_bounds();
    for y in pixel_range(y0, y1, img.height()) {
        for x in pixel_range(x0, x1, img.width()) {
            let c = coverage(x, y, |p| inside_convex(&face.plate, p));
            if c > 0.0 {
                let v = blend(img.get(x, y), PLATE, c);
                img.set(x, y, v);
            }
        }
    }
    let r = face.marker_radius;
    for (m, colour) in face.landmarks.points().iter().zip(MARKERS) {
        for y in pixel_range(m.y - r, m.y + r, img.height()) {
            for x in pixel_range(m.x - r, m.x + r, img.width()) {
                let c = coverage(x, y, |p| (p.x - m.x).powi(2) + (p.y - m.y).powi(2) <= r * r);
                if c > 0.0 {
                    let v = blend(img.get(x, y), colour, c);
                    img.set(x, y, v);
                }
            }
        }
    }
}

/// Paints a face whose detected box and landmarks are `bbox` and `landmarks`.
pub fn paint_fiducials(img: &mut Image, bbox: BoundingBox, landmarks: LandmarkSet) {
    paint_face(img, &FaceSpec::from_box(bbox, landmarks));
}

/// Smooth greyscale texture in `[0.2, 0.8]` with no flat regions.
pub fn textured_background(width: usize, height: usize, seed: u64) -> Image {
    let phase = (seed % 1000) as f64 * 0.013;
    Image::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let g = 0.5
            + 0.15 * (xf * 0.21 + phase).sin()
            + 0.1 * (yf * 0.17 - 2.0 * phase).cos()
            + 0.05 * ((xf + yf) * 0.5).sin();
        let g = g as f32;
        [g, g, g]
    })
}

fn chroma(p: [f32; 3]) -> f32 {
    p.iter().cloned().fold(f32::NEG_INFINITY, f32::max) - p.iter().cloned().fold(f32::INFINITY, f32::min)
}

/// Reader for the painted fiducial encoding.
#[derive(Debug, Default, Clone, Copy)]
pub struct FiducialDetector;

impl FiducialDetector {
    pub fn detect(&self, img: &Image) -> Vec<Detection> {
        let (w, h) = (img.width(), img.height());
        let fg: Vec<bool> = img.data().chunks_exact(3).map(|p| chroma([p[0], p[1], p[2]]) > FOREGROUND_CHROMA).collect();
        let near_background = background_band(&fg, w, h);

        let mut label = vec![usize::MAX; w * h];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !fg[start] || label[start] != usize::MAX {
                continue;
            }
            let id = start;
            label[start] = id;
            stack.push(start);
            let mut pixels = Vec::new();
            while let Some(i) = stack.pop() {
                pixels.push(i);
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if fg[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
            if pixels.len() < MIN_COMPONENT {
                continue;
            }
            if let Some(d) = decode_component(img, &pixels, &near_background) {
                out.push(d);
            }
        }
        out.sort_by(|a, b| {
            a.bbox
                .y_min
                .total_cmp(&b.bbox.y_min)
                .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        });
        out
    }
}

fn background_band(fg: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut band = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut hit = false;
            'scan: for dy in -EDGE_BAND..=EDGE_BAND {
                for dx in -EDGE_BAND..=EDGE_BAND {
                    let (nx, ny) = (x + dx, y + dy);
                    // the frame border counts as background: plate edges may be cut there
                    let outside = nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize;
                    if outside || !fg[ny as usize * w + nx as usize] {
                        hit = true;
                        break 'scan;
                    }
                }
            }
            band[y as usize * w + x as usize] = hit;
        }
    }
    band
}

fn decode_component(img: &Image, pixels: &[usize], near_background: &[bool]) -> Option<Detection> {
    let w = img.width();
    let dirs: Vec<[f64; 3]> = MARKERS
        .iter()
        .map(|m| [0, 1, 2].map(|c| f64::from(m[c]) - f64::from(PLATE[c])))
        .collect();
    let norms: Vec<f64> = dirs.iter().map(|d| d.iter().map(|v| v * v).sum()).collect();

    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut mass = [0.0f64; 5];
    let mut sx = [0.0f64; 5];
    let mut sy = [0.0f64; 5];
    for &i in pixels {
        let (x, y) = (i % w, i / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        if near_background[i] {
            continue;
        }
        let p = img.get(x, y);
        let rel = [0, 1, 2].map(|c| f64::from(p[c]) - f64::from(PLATE[c]));
        // nearest marker blend line wins
        let mut best: Option<(usize, f64, f64)> = None;
        for (k, d) in dirs.iter().enumerate() {
            let wk = ((rel[0] * d[0] + rel[1] * d[1] + rel[2] * d[2]) / norms[k]).clamp(0.0, 1.0);
            let resid: f64 = (0..3).map(|c| (rel[c] - wk * d[c]).powi(2)).sum::<f64>().sqrt();
            if best.is_none_or(|(_, _, r)| resid < r) {
                best = Some((k, wk, resid));
            }
        }
        let Some((k, wk, resid)) = best else { continue };
        if wk < MIN_MARKER_WEIGHT || resid > MAX_RESIDUAL {
            continue;
        }
        mass[k] += wk;
        sx[k] += wk * x as f64;
        sy[k] += wk * y as f64;
    }
    if x0 >= x1 || y0 >= y1 || mass.iter().any(|m| *m < MIN_MARKER_MASS) {
        return None;
    }
    let pts: [Point2; 5] = std::array::from_fn(|k| Point2::new(sx[k] / mass[k], sy[k] / mass[k]));
    let bbox = BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).ok()?;
    Detection::new(bbox, LandmarkSet::from_points(pts), 1.0).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout_in(b: BoundingBox) -> LandmarkSet {
        let (w, h) = (b.width(), b.height());
        LandmarkSet::from_points([
            Point2::new(b.x_min + 0.3 * w, b.y_min + 0.35 * h),
            Point2::new(b.x_min + 0.7 * w, b.y_min + 0.35 * h),
            Point2::new(b.x_min + 0.5 * w, b.y_min + 0.55 * h),
            Point2::new(b.x_min + 0.33 * w, b.y_min + 0.75 * h),
            Point2::new(b.x_min + 0.67 * w, b.y_min + 0.75 * h),
        ])
    }

    #[test]
    fn blank_image_has_no_faces() {
        let img = Image::filled(64, 48, [0.5; 3]);
        assert!(FiducialDetector.detect(&img).is_empty());
        let img = textured_background(64, 48, 3);
        assert!(FiducialDetector.detect(&img).is_empty());
    }

    #[test]
    fn reads_back_painted_coordinates() {
        let mut img = textured_background(160, 120, 7);
        let b = BoundingBox::new(40.0, 20.0, 110.0, 100.0).unwrap();
        let lm = layout_in(b);
        paint_fiducials(&mut img, b, lm);
        let found = FiducialDetector.detect(&img);
        assert_eq!(found.len(), 1);
        let d = found[0];
        assert!((d.bbox.x_min - b.x_min).abs() <= 1.0);
        assert!((d.bbox.y_max - b.y_max).abs() <= 1.0);
        for (a, e) in d.landmarks.points().iter().zip(lm.points()) {
            assert!((a.x - e.x).abs() <= 1.0 && (a.y - e.y).abs() <= 1.0, "{a:?} vs {e:?}");
        }
    }

    #[test]
    fn two_patterns_two_detections() {
        let mut img = textured_background(200, 100, 1);
        let a = BoundingBox::new(10.0, 10.0, 80.0, 90.0).unwrap();
        let b = BoundingBox::new(110.0, 15.0, 185.0, 85.0).unwrap();
        paint_fiducials(&mut img, a, layout_in(a));
        paint_fiducials(&mut img, b, layout_in(b));
        let found = FiducialDetector.detect(&img);
        assert_eq!(found.len(), 2);
        assert!(found.iter().any(|d| (d.bbox.x_min - 10.0).abs() <= 1.0));
        assert!(found.iter().any(|d| (d.bbox.x_min - 110.0).abs() <= 1.0));
    }

    #[test]
    fn random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let x0 = rng.random_range(0.0..60.0);
            let y0 = rng.random_range(0.0..40.0);
            let bw = rng.random_range(30.0..80.0);
            let bh = rng.random_range(30.0..70.0);
            let b = BoundingBox::new(x0, y0, x0 + bw, y0 + bh).unwrap();
            let lm = layout_in(b);
            let mut img = textured_background(150, 120, 5);
            paint_fiducials(&mut img, b, lm);
            let found = FiducialDetector.detect(&img);
            assert_eq!(found.len(), 1);
            let d = found[0];
            for (got, want) in [
                (d.bbox.x_min, b.x_min),
                (d.bbox.y_min, b.y_min),
                (d.bbox.x_max, b.x_max),
                (d.bbox.y_max, b.y_max),
            ] {
                assert!((got - want).abs() <= 1.0, "box {:?} vs {:?}", d.bbox, b);
            }
            for (a, e) in d.landmarks.points().iter().zip(lm.points()) {
                assert!((a.x - e.x).abs() <= 1.0 && (a.y - e.y).abs() <= 1.0, "{a:?} vs {e:?} in {b:?}");
            }
        }
    }

    #[test]
    fn rolled_face_landmarks_are_accurate() {
        let face = FaceSpec::canonical(Point2::new(80.0, 80.0), 40.0, Angle::from_degrees(15.0).unwrap());
        let mut img = textured_background(160, 160, 2);
        paint_face(&mut img, &face);
        let d = FiducialDetector.detect(&img);
        assert_eq!(d.len(), 1);
        for (a, e) in d[0].landmarks.points().iter().zip(face.landmarks.points()) {
            assert!((a.x - e.x).abs() < 0.3 && (a.y - e.y).abs() < 0.3, "{a:?} vs {e:?}");
        }
    }

    #[test]
    fn deterministic() {
        let mut img = textured_background(120, 120, 9);
        paint_face(&mut img, &FaceSpec::canonical(Point2::new(60.0, 60.0), 30.0, Angle::from_degrees(-8.0).unwrap()));
        assert_eq!(FiducialDetector.detect(&img), FiducialDetector.detect(&img));
    }
}
