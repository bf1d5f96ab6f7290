//! Three-stage cascaded face detector (proposal, refine and output nets).
//!
//! Inference only. Weights come from one safetensors file with tensors named
//! `pnet.*`, `rnet.*` and `onet.*` in the layout of the widely distributed
//! PyTorch port (`conv1.weight`, `prelu1.weight`, `dense5_1.bias`, ...).
//! Pixel values are scaled to `(255·v − 127.5) / 128` before every stage.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::geom::{BoundingBox, LandmarkSet, Point2};
use crate::image::Image;
use crate::tensorfile::{self, TensorMap};

const MIN_FACE: f64 = 20.0;
const PYRAMID_FACTOR: f64 = 0.709;
const STAGE_THRESHOLDS: [f32; 3] = [0.6, 0.7, 0.7];

/// Candidate box: corners, score and pending regression offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub reg: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overlap {
    /// Intersection over union of continuous areas.
    Union,
    /// Intersection over the smaller box, areas counted in whole pixels.
    Min,
}

/// Greedy non-maximum suppression; returns kept indices by descending score.
pub fn nms(boxes: &[Candidate], threshold: f64, mode: Overlap) -> Vec<usize> {
    let extra = if mode == Overlap::Min { 1.0 } else { 0.0 };
    let area = |b: &Candidate| (b.x2 - b.x1 + extra) * (b.y2 - b.y1 + extra);
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let a = &boxes[i];
        for &j in &order[rank + 1..] {
            if suppressed[j] {
                continue;
            }
            let b = &boxes[j];
            let w = (a.x2.min(b.x2) - a.x1.max(b.x1) + extra).max(0.0);
            let h = (a.y2.min(b.y2) - a.y1.max(b.y1) + extra).max(0.0);
            let inter = w * h;
            let o = match mode {
                Overlap::Union => inter / (area(a) + area(b) - inter),
                Overlap::Min => inter / area(a).min(area(b)),
            };
            if o > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Applies the regression offsets, scaled by the inclusive box size.
pub fn regress(b: &Candidate) -> Candidate {
    let w = b.x2 - b.x1 + 1.0;
    let h = b.y2 - b.y1 + 1.0;
    Candidate {
        x1: b.x1 + b.reg[0] * w,
        y1: b.y1 + b.reg[1] * h,
        x2: b.x2 + b.reg[2] * w,
        y2: b.y2 + b.reg[3] * h,
        score: b.score,
        reg: [0.0; 4],
    }
}

/// Grows the shorter side to make the box square about its centre.
pub fn square(b: &Candidate) -> Candidate {
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    let l = w.max(h);
    let x1 = b.x1 + w * 0.5 - l * 0.5;
    let y1 = b.y1 + h * 0.5 - l * 0.5;
    Candidate {
        x1,
        y1,
        x2: x1 + l,
        y2: y1 + l,
        ..*b
    }
}

/// Area-averaging resize of interleaved RGB `data` from `w x h` to `ow x oh`.
/// Output pixel `i` averages source rows `floor(i·h/oh) .. ceil((i+1)·h/oh)`.
pub fn resize_area(data: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f32> {
    let span = |i: usize, n: usize, on: usize| (i * n / on, ((i + 1) * n).div_ceil(on));
    let mut out = vec![0.0f32; ow * oh * 3];
    for oy in 0..oh {
        let (y0, y1) = span(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1) = span(ox, w, ow);
            let mut acc = [0.0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += f64::from(data[(y * w + x) * 3 + c]);
                    }
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                out[(oy * ow + ox) * 3 + c] = (acc[c] / n) as f32;
            }
        }
    }
    out
}

/// Scales `(x, y)` positions in the pyramid level with confident cells into
/// candidate boxes in source coordinates (cell 12 px, stride 2).
fn proposals(prob: &[f32], reg: &[f32], ow: usize, oh: usize, scale: f64, threshold: f32) -> Vec<Candidate> {
    let n = ow * oh;
    let mut out = Vec::new();
    for y in 0..oh {
        for x in 0..ow {
            let i = y * ow + x;
            if prob[i] < threshold {
                continue;
            }
            let (fx, fy) = (x as f64, y as f64);
            out.push(Candidate {
                x1: ((2.0 * fx + 1.0) / scale).floor(),
                y1: ((2.0 * fy + 1.0) / scale).floor(),
                x2: ((2.0 * fx + 12.0) / scale).floor(),
                y2: ((2.0 * fy + 12.0) / scale).floor(),
                score: f64::from(prob[i]),
                reg: [0, 1, 2, 3].map(|k| f64::from(reg[k * n + i])),
            });
        }
    }
    out
}

fn face_probability(logits: &[f32]) -> f32 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

struct Weights<'a> {
    map: &'a TensorMap,
    prefix: &'static str,
    device: &'a Device,
}

impl Weights<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let key = format!("{}.{name}", self.prefix);
        let t = self
            .map
            .get(&key)
            .ok_or_else(|| Error::Backend(format!("detector weights lack `{key}`")))?;
        if t.shape != shape {
            return Err(Error::Backend(format!(
                "detector tensor `{key}` has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        let data: Vec<f32> = t.data.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(data, shape, self.device)?)
    }
}

struct Conv {
    w: Tensor,
    b: Tensor,
}

impl Conv {
    fn load(ws: &Weights, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            w: ws.get(&format!("{name}.weight"), &[cout, cin, k, k])?,
            b: ws.get(&format!("{name}.bias"), &[cout])?.reshape((1, cout, 1, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.w, 0, 1, 1, 1)?.broadcast_add(&self.b)?)
    }
}

struct Dense {
    w: Tensor,
    b: Tensor,
}

impl Dense {
    fn load(ws: &Weights, name: &str, fin: usize, fout: usize) -> Result<Self> {
        Ok(Self {
            w: ws.get(&format!("{name}.weight"), &[fout, fin])?.t()?,
            b: ws.get(&format!("{name}.bias"), &[fout])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

struct PRelu(Tensor);

impl PRelu {
    fn load(ws: &Weights, name: &str, c: usize, spatial: bool) -> Result<Self> {
        let a = ws.get(&format!("{name}.weight"), &[c])?;
        Ok(Self(if spatial { a.reshape((1, c, 1, 1))? } else { a.reshape((1, c))? }))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x.relu()? + x.minimum(0f64)?.broadcast_mul(&self.0)?)?)
    }
}

/// Max pooling that keeps a partial window at the bottom/right edge.
fn pool_ceil(x: &Tensor, k: usize, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let out = |len: usize| (len.saturating_sub(k)).div_ceil(s) + 1;
    let (ph, pw) = ((out(h) - 1) * s + k - h, (out(w) - 1) * s + k - w);
    let mut x = x.clone();
    if ph > 0 {
        let fill = Tensor::full(f32::MIN, (n, c, ph, w), x.device())?;
        x = Tensor::cat(&[&x, &fill], 2)?;
    }
    if pw > 0 {
        let fill = Tensor::full(f32::MIN, (n, c, h + ph, pw), x.device())?;
        x = Tensor::cat(&[&x, &fill], 3)?;
    }
    Ok(x.max_pool2d_with_stride(k, s)?)
}

/// Flattens NCHW in (W, H, C) order, matching the reference layout.
fn flatten_whc(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    Ok(x.permute((0, 3, 2, 1))?.contiguous()?.reshape((n, ()))?)
}

struct PNet {
    c1: Conv,
    p1: PRelu,
    c2: Conv,
    p2: PRelu,
    c3: Conv,
    p3: PRelu,
    cls: Conv,
    reg: Conv,
}

struct RNet {
    c1: Conv,
    p1: PRelu,
    c2: Conv,
    p2: PRelu,
    c3: Conv,
    p3: PRelu,
    d4: Dense,
    p4: PRelu,
    cls: Dense,
    reg: Dense,
}

struct ONet {
    c1: Conv,
    p1: PRelu,
    c2: Conv,
    p2: PRelu,
    c3: Conv,
    p3: PRelu,
    c4: Conv,
    p4: PRelu,
    d5: Dense,
    p5: PRelu,
    cls: Dense,
    reg: Dense,
    marks: Dense,
}

pub struct Mtcnn {
    pnet: PNet,
    rnet: RNet,
    onet: ONet,
    device: Device,
}

impl Mtcnn {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Backend(format!("cannot read detector weights {}: {e}", path.display())))?;
        let (map, _) = tensorfile::decode(&bytes)
            .map_err(|e| Error::Backend(format!("{}: {e}", path.display())))?;
        Self::from_tensors(&map)
    }

    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let device = Device::Cpu;
        let p = Weights { map, prefix: "pnet", device: &device };
        let pnet = PNet {
            c1: Conv::load(&p, "conv1", 3, 10, 3)?,
            p1: PRelu::load(&p, "prelu1", 10, true)?,
            c2: Conv::load(&p, "conv2", 10, 16, 3)?,
            p2: PRelu::load(&p, "prelu2", 16, true)?,
            c3: Conv::load(&p, "conv3", 16, 32, 3)?,
            p3: PRelu::load(&p, "prelu3", 32, true)?,
            cls: Conv::load(&p, "conv4_1", 32, 2, 1)?,
            reg: Conv::load(&p, "conv4_2", 32, 4, 1)?,
        };
        let r = Weights { map, prefix: "rnet", device: &device };
        let rnet = RNet {
            c1: Conv::load(&r, "conv1", 3, 28, 3)?,
            p1: PRelu::load(&r, "prelu1", 28, true)?,
            c2: Conv::load(&r, "conv2", 28, 48, 3)?,
            p2: PRelu::load(&r, "prelu2", 48, true)?,
            c3: Conv::load(&r, "conv3", 48, 64, 2)?,
            p3: PRelu::load(&r, "prelu3", 64, true)?,
            d4: Dense::load(&r, "dense4", 576, 128)?,
            p4: PRelu::load(&r, "prelu4", 128, false)?,
            cls: Dense::load(&r, "dense5_1", 128, 2)?,
            reg: Dense::load(&r, "dense5_2", 128, 4)?,
        };
        let o = Weights { map, prefix: "onet", device: &device };
        let onet = ONet {
            c1: Conv::load(&o, "conv1", 3, 32, 3)?,
            p1: PRelu::load(&o, "prelu1", 32, true)?,
            c2: Conv::load(&o, "conv2", 32, 64, 3)?,
            p2: PRelu::load(&o, "prelu2", 64, true)?,
            c3: Conv::load(&o, "conv3", 64, 64, 3)?,
            p3: PRelu::load(&o, "prelu3", 64, true)?,
            c4: Conv::load(&o, "conv4", 64, 128, 2)?,
            p4: PRelu::load(&o, "prelu4", 128, true)?,
            d5: Dense::load(&o, "dense5", 1152, 256)?,
            p5: PRelu::load(&o, "prelu5", 256, false)?,
            cls: Dense::load(&o, "dense6_1", 256, 2)?,
            reg: Dense::load(&o, "dense6_2", 256, 4)?,
            marks: Dense::load(&o, "dense6_3", 256, 10)?,
        };
        Ok(Self { pnet, rnet, onet, device })
    }

    /// Parameter shapes expected under each tensor name.
    pub fn expected_shapes() -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |net: &str, name: &str, cin: usize, cout: usize, k: usize| {
            out.push((format!("{net}.{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{net}.{name}.bias"), vec![cout]));
        };
        conv("pnet", "conv1", 3, 10, 3);
        conv("pnet", "conv2", 10, 16, 3);
        conv("pnet", "conv3", 16, 32, 3);
        conv("pnet", "conv4_1", 32, 2, 1);
        conv("pnet", "conv4_2", 32, 4, 1);
        conv("rnet", "conv1", 3, 28, 3);
        conv("rnet", "conv2", 28, 48, 3);
        conv("rnet", "conv3", 48, 64, 2);
        conv("onet", "conv1", 3, 32, 3);
        conv("onet", "conv2", 32, 64, 3);
        conv("onet", "conv3", 64, 64, 3);
        conv("onet", "conv4", 64, 128, 2);
        for (net, name, fin, fout) in [
            ("rnet", "dense4", 576, 128),
            ("rnet", "dense5_1", 128, 2),
            ("rnet", "dense5_2", 128, 4),
            ("onet", "dense5", 1152, 256),
            ("onet", "dense6_1", 256, 2),
            ("onet", "dense6_2", 256, 4),
            ("onet", "dense6_3", 256, 10),
        ] {
            out.push((format!("{net}.{name}.weight"), vec![fout, fin]));
            out.push((format!("{net}.{name}.bias"), vec![fout]));
        }
        for (net, name, c) in [
            ("pnet", "prelu1", 10),
            ("pnet", "prelu2", 16),
            ("pnet", "prelu3", 32),
            ("rnet", "prelu1", 28),
            ("rnet", "prelu2", 48),
            ("rnet", "prelu3", 64),
            ("rnet", "prelu4", 128),
            ("onet", "prelu1", 32),
            ("onet", "prelu2", 64),
            ("onet", "prelu3", 64),
            ("onet", "prelu4", 128),
            ("onet", "prelu5", 256),
        ] {
            out.push((format!("{net}.{name}.weight"), vec![c]));
        }
        out
    }

    /// Scaled HWC pixels to a 1xCxHxW tensor.
    fn input(&self, hwc: &[f32], w: usize, h: usize) -> Result<Tensor> {
        let scaled: Vec<f32> = hwc.iter().map(|&v| (v * 255.0 - 127.5) * 0.0078125).collect();
        Ok(Tensor::from_vec(scaled, (1, h, w, 3), &self.device)?.permute((0, 3, 1, 2))?)
    }

    fn stage_one(&self, img: &Image) -> Result<Vec<Candidate>> {
        let (w, h) = (img.width(), img.height());
        let m = 12.0 / MIN_FACE;
        let mut min_side = w.min(h) as f64 * m;
        let mut scale = m;
        let mut all = Vec::new();
        while min_side >= 12.0 {
            let sw = (w as f64 * scale + 1.0) as usize;
            let sh = (h as f64 * scale + 1.0) as usize;
            let x = self.input(&resize_area(img.data(), w, h, sw, sh), sw, sh)?;
            let n = &self.pnet;
            let x = n.p1.forward(&n.c1.forward(&x)?)?;
            let x = pool_ceil(&x, 2, 2)?;
            let x = n.p2.forward(&n.c2.forward(&x)?)?;
            let x = n.p3.forward(&n.c3.forward(&x)?)?;
            let (_, _, oh, ow) = x.dims4()?;
            let cls = n.cls.forward(&x)?.flatten_all()?.to_vec1::<f32>()?;
            let reg = n.reg.forward(&x)?.flatten_all()?.to_vec1::<f32>()?;
            let cells = ow * oh;
            let prob: Vec<f32> = (0..cells).map(|i| face_probability(&[cls[i], cls[cells + i]])).collect();
            let found = proposals(&prob, &reg, ow, oh, scale, STAGE_THRESHOLDS[0]);
            all.extend(nms(&found, 0.5, Overlap::Union).into_iter().map(|i| found[i]));
            scale *= PYRAMID_FACTOR;
            min_side *= PYRAMID_FACTOR;
        }
        let keep = nms(&all, 0.7, Overlap::Union);
        Ok(keep
            .into_iter()
            .map(|i| {
                let b = all[i];
                let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
                square(&Candidate {
                    x1: b.x1 + b.reg[0] * w,
                    y1: b.y1 + b.reg[1] * h,
                    x2: b.x2 + b.reg[2] * w,
                    y2: b.y2 + b.reg[3] * h,
                    score: b.score,
                    reg: [0.0; 4],
                })
            })
            .collect())
    }

    /// Crops every box (clipped to the image) and resizes to `size`.
    /// Boxes that clip to nothing are dropped.
    fn patches(&self, img: &Image, boxes: &[Candidate], size: usize) -> Result<(Vec<Candidate>, Option<Tensor>)> {
        let (w, h) = (img.width() as i64, img.height() as i64);
        let mut kept = Vec::new();
        let mut batch = Vec::new();
        for b in boxes {
            let x = (b.x1.trunc() as i64).max(1);
            let y = (b.y1.trunc() as i64).max(1);
            let ex = (b.x2.trunc() as i64).min(w);
            let ey = (b.y2.trunc() as i64).min(h);
            if ey <= y - 1 || ex <= x - 1 {
                continue;
            }
            let (cw, ch) = ((ex - x + 1) as usize, (ey - y + 1) as usize);
            let mut crop = Vec::with_capacity(cw * ch * 3);
            for row in (y - 1) as usize..ey as usize {
                let start = (row * img.width() + (x - 1) as usize) * 3;
                crop.extend_from_slice(&img.data()[start..start + cw * 3]);
            }
            batch.push(self.input(&resize_area(&crop, cw, ch, size, size), size, size)?);
            kept.push(*b);
        }
        if batch.is_empty() {
            return Ok((kept, None));
        }
        Ok((kept, Some(Tensor::cat(&batch, 0)?)))
    }

    fn stage_two(&self, img: &Image, boxes: &[Candidate]) -> Result<Vec<Candidate>> {
        let (boxes, Some(x)) = self.patches(img, boxes, 24)? else {
            return Ok(Vec::new());
        };
        let n = &self.rnet;
        let x = pool_ceil(&n.p1.forward(&n.c1.forward(&x)?)?, 3, 2)?;
        let x = pool_ceil(&n.p2.forward(&n.c2.forward(&x)?)?, 3, 2)?;
        let x = n.p3.forward(&n.c3.forward(&x)?)?;
        let x = n.p4.forward(&n.d4.forward(&flatten_whc(&x)?)?)?;
        let cls = n.cls.forward(&x)?.to_vec2::<f32>()?;
        let reg = n.reg.forward(&x)?.to_vec2::<f32>()?;
        let passed: Vec<Candidate> = boxes
            .iter()
            .zip(cls.iter().zip(&reg))
            .filter_map(|(b, (c, r))| {
                let p = face_probability(c);
                (p > STAGE_THRESHOLDS[1]).then(|| Candidate {
                    score: f64::from(p),
                    reg: [r[0], r[1], r[2], r[3]].map(f64::from),
                    ..*b
                })
            })
            .collect();
        Ok(nms(&passed, 0.7, Overlap::Union)
            .into_iter()
            .map(|i| square(&regress(&passed[i])))
            .collect())
    }

    fn stage_three(&self, img: &Image, boxes: &[Candidate]) -> Result<Vec<(Candidate, [Point2; 5])>> {
        let (boxes, Some(x)) = self.patches(img, boxes, 48)? else {
            return Ok(Vec::new());
        };
        let n = &self.onet;
        let x = pool_ceil(&n.p1.forward(&n.c1.forward(&x)?)?, 3, 2)?;
        let x = pool_ceil(&n.p2.forward(&n.c2.forward(&x)?)?, 3, 2)?;
        let x = pool_ceil(&n.p3.forward(&n.c3.forward(&x)?)?, 2, 2)?;
        let x = n.p4.forward(&n.c4.forward(&x)?)?;
        let x = n.p5.forward(&n.d5.forward(&flatten_whc(&x)?)?)?;
        let cls = n.cls.forward(&x)?.to_vec2::<f32>()?;
        let reg = n.reg.forward(&x)?.to_vec2::<f32>()?;
        let marks = n.marks.forward(&x)?.to_vec2::<f32>()?;
        let mut passed = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            let p = face_probability(&cls[i]);
            if p <= STAGE_THRESHOLDS[2] {
                continue;
            }
            let (bw, bh) = (b.x2 - b.x1 + 1.0, b.y2 - b.y1 + 1.0);
            let pts = std::array::from_fn(|k| {
                Point2::new(
                    bw * f64::from(marks[i][k]) + b.x1 - 1.0,
                    bh * f64::from(marks[i][k + 5]) + b.y1 - 1.0,
                )
            });
            let scored = Candidate {
                score: f64::from(p),
                reg: [0, 1, 2, 3].map(|k| f64::from(reg[i][k])),
                ..*b
            };
            passed.push((regress(&scored), pts));
        }
        let cands: Vec<Candidate> = passed.iter().map(|p| p.0).collect();
        Ok(nms(&cands, 0.7, Overlap::Min).into_iter().map(|i| passed[i]).collect())
    }

    pub fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        let boxes = self.stage_one(image)?;
        let boxes = self.stage_two(image, &boxes)?;
        let found = self.stage_three(image, &boxes)?;
        Ok(found
            .into_iter()
            .filter_map(|(b, pts)| {
                let bbox = BoundingBox::new(b.x1, b.y1, b.x2, b.y2).ok()?;
                Detection::new(bbox, LandmarkSet::from_points(pts), b.score.clamp(0.0, 1.0)).ok()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorfile::HostTensor;

    fn cand(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Candidate {
        Candidate { x1, y1, x2, y2, score, reg: [0.0; 4] }
    }

    #[test]
    fn nms_keeps_best_of_overlapping() {
        let boxes = [
            cand(0.0, 0.0, 10.0, 10.0, 0.8),
            cand(1.0, 1.0, 11.0, 11.0, 0.9),
            cand(30.0, 30.0, 40.0, 40.0, 0.7),
        ];
        assert_eq!(nms(&boxes, 0.5, Overlap::Union), vec![1, 2]);
        // IoU = 81 / 119 ≈ 0.68, kept at a higher threshold
        assert_eq!(nms(&boxes, 0.7, Overlap::Union), vec![1, 0, 2]);
        // a box inside another overlaps fully under `Min`
        let nested = [cand(0.0, 0.0, 20.0, 20.0, 0.5), cand(5.0, 5.0, 9.0, 9.0, 0.9)];
        assert_eq!(nms(&nested, 0.7, Overlap::Min), vec![1]);
        assert_eq!(nms(&nested, 0.7, Overlap::Union), vec![1, 0]);
    }

    #[test]
    fn square_and_regress() {
        let s = square(&cand(0.0, 0.0, 10.0, 4.0, 1.0));
        assert_eq!((s.x1, s.y1, s.x2, s.y2), (0.0, -3.0, 10.0, 7.0));
        let mut b = cand(0.0, 0.0, 9.0, 9.0, 1.0);
        b.reg = [0.1, -0.1, 0.2, 0.0];
        let r = regress(&b);
        assert_eq!((r.x1, r.y1, r.x2, r.y2), (1.0, -1.0, 11.0, 9.0));
    }

    #[test]
    fn area_resize_matches_brute_force() {
        let (w, h) = (7, 5);
        let data: Vec<f32> = (0..w * h * 3).map(|i| ((i * 37) % 11) as f32 / 10.0).collect();
        for (ow, oh) in [(3, 2), (7, 5), (14, 10), (4, 4)] {
            let out = resize_area(&data, w, h, ow, oh);
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy as f64 * h as f64 / oh as f64).floor() as usize;
                    let y1 = ((oy + 1) as f64 * h as f64 / oh as f64).ceil() as usize;
                    let x0 = (ox as f64 * w as f64 / ow as f64).floor() as usize;
                    let x1 = ((ox + 1) as f64 * w as f64 / ow as f64).ceil() as usize;
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += data[(y * w + x) * 3 + 1] as f64;
                        }
                    }
                    let want = s / ((y1 - y0) * (x1 - x0)) as f64;
                    assert!((out[(oy * ow + ox) * 3 + 1] as f64 - want).abs() < 1e-6);
                }
            }
        }
        assert_eq!(resize_area(&data, w, h, w, h), data);
    }

    #[test]
    fn ceil_pooling_keeps_edge_windows() {
        let x = Tensor::arange(0f32, 25.0, &Device::Cpu).unwrap().reshape((1, 1, 5, 5)).unwrap();
        let y = pool_ceil(&x, 2, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![6.0, 8.0, 9.0, 16.0, 18.0, 19.0, 21.0, 23.0, 24.0]);
        let y = pool_ceil(&(x - 100.0).unwrap(), 3, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
    }

    /// Weights with zero kernels: every stage answers with its biases only.
    fn constant_weights(landmarks: [f64; 10]) -> TensorMap {
        let mut map = TensorMap::new();
        for (name, shape) in Mtcnn::expected_shapes() {
            let len = shape.iter().product();
            let mut data = vec![0.0; len];
            if name.ends_with("4_1.bias") || name.ends_with("5_1.bias") || name.ends_with("6_1.bias") {
                data = vec![-8.0, 8.0];
            }
            if name == "onet.dense6_3.bias" {
                data = landmarks.to_vec();
            }
            map.insert(name, HostTensor::new(shape, data));
        }
        map
    }

    #[test]
    fn cascade_runs_end_to_end() {
        let marks = [0.3, 0.7, 0.5, 0.35, 0.65, 0.35, 0.35, 0.55, 0.75, 0.75];
        let det = Mtcnn::from_tensors(&constant_weights(marks)).unwrap();
        let img = Image::filled(64, 48, [0.4, 0.5, 0.6]);
        let found = det.detect(&img).unwrap();
        assert!(!found.is_empty());
        for d in &found {
            assert!(d.confidence > 0.99);
            let b = d.bbox;
            let lm = d.landmarks.points();
            // left eye sits 30% across the box (inclusive pixel width), minus one
            let bw = b.x_max - b.x_min + 1.0;
            assert!((lm[0].x - (b.x_min + 0.3 * bw - 1.0)).abs() < 1e-3 * bw.max(1.0));
            assert!(lm[0].x < lm[1].x && lm[2].y < lm[3].y);
        }
    }

    #[test]
    fn missing_or_misshapen_weights() {
        let mut map = constant_weights([0.5; 10]);
        map.remove("rnet.dense4.weight");
        assert!(matches!(Mtcnn::from_tensors(&map), Err(Error::Backend(_))));
        let mut map = constant_weights([0.5; 10]);
        map.insert("pnet.conv1.weight".into(), HostTensor::new(vec![10, 3, 5, 5], vec![0.0; 750]));
        assert!(matches!(Mtcnn::from_tensors(&map), Err(Error::Backend(_))));
        assert!(matches!(Mtcnn::load(Path::new("/nonexistent/weights")), Err(Error::Backend(_))));
    }

    #[test]
    fn loads_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.safetensors");
        std::fs::write(&p, tensorfile::encode(&constant_weights([0.5; 10]), Default::default()).unwrap()).unwrap();
        assert!(Mtcnn::load(&p).is_ok());
        std::fs::write(&p, b"not weights").unwrap();
        assert!(matches!(Mtcnn::load(&p), Err(Error::Backend(_))));
    }
}
