//! Step II: per-segment descriptors (crop, shape, position) and
//! dataset-level clustering into semantic classes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::kmeans::{kmeans, KMeansParams};
use crate::mask::SegmentationMask;
use crate::postprocess::upscale_mask;

pub const SHAPE_SIDE: usize = 16;
pub const HIST_BINS: usize = 64;

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    /// Square box centered on this one, shifted to stay inside `(width,
    /// height)` when it fits; crops taken from it keep their aspect ratio.
    pub fn padded_square(&self, width: usize, height: usize) -> BBox {
        let side = self.w.max(self.h).min(width.max(height));
        let place = |start: usize, len: usize, limit: usize| -> usize {
            let grow = side.saturating_sub(len);
            let s = start.saturating_sub(grow / 2);
            if side <= limit {
                s.min(limit - side)
            } else {
                0
            }
        };
        BBox {
            x: place(self.x, self.w, width),
            y: place(self.y, self.h, height),
            w: side.min(width),
            h: side.min(height),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub image_id: String,
    pub segment_label: u32,
    pub bbox: BBox,
    pub pixel_count: usize,
    /// Membership at image resolution, row-major over the whole image.
    pub mask: Vec<bool>,
    pub image_width: usize,
    pub image_height: usize,
}

impl SegmentRecord {
    fn from_pixels(
        image_id: &str,
        segment_label: u32,
        mask: Vec<bool>,
        width: usize,
        height: usize,
    ) -> Option<Self> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut count = 0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (i % width, i / width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            count += 1;
        }
        (count > 0).then(|| SegmentRecord {
            image_id: image_id.to_string(),
            segment_label,
            bbox: BBox {
                x: x0,
                y: y0,
                w: x1 - x0 + 1,
                h: y1 - y0 + 1,
            },
            pixel_count: count,
            mask,
            image_width: width,
            image_height: height,
        })
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.image_width + x]
    }
}

/// Splits a step-I mask into one record per label, or per 4-connected
/// component of each label when `split_components` is set. Grid masks are
/// upscaled to the image by nearest neighbor first.
pub fn extract_segments(
    image_id: &str,
    mask: &SegmentationMask,
    img: &GrayImage,
    split_components: bool,
) -> Result<Vec<SegmentRecord>> {
    let (w, h) = img.dims();
    let full = if mask.dims() == (w, h) {
        mask.clone()
    } else {
        upscale_mask(mask, w, h)?
    };
    let parts = if split_components {
        connected_components(&full)
    } else {
        full
    };
    let mut out = Vec::new();
    for label in parts.distinct() {
        if let Some(r) = SegmentRecord::from_pixels(image_id, label, parts.binary(label), w, h) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Relabels every 4-connected run of equal labels with its own id, numbered
/// in raster order of first pixel.
pub fn connected_components(mask: &SegmentationMask) -> SegmentationMask {
    let (w, h) = mask.dims();
    let mut out = vec![u32::MAX; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if out[start] != u32::MAX {
            continue;
        }
        let label = mask.labels()[start];
        out[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if out[j] == u32::MAX && mask.labels()[j] == label {
                    out[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        next += 1;
    }
    SegmentationMask::new(w, h, out).expect("same dims")
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Area-average of a `w x h` field onto an `out x out` grid.
fn area_resample(src: &[f64], w: usize, h: usize, out: usize) -> Vec<f64> {
    // overlap weights of each output cell with each source column/row
    let weights = |len: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
                let lo = a.floor() as usize;
                let hi = (b.ceil() as usize).min(len);
                (lo..hi)
                    .filter_map(|s| {
                        let ov = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                        (ov > 0.0).then_some((s, ov / scale))
                    })
                    .collect()
            })
            .collect()
    };
    let wx = weights(w);
    let wy = weights(h);
    let mut res = vec![0.0; out * out];
    for (oy, ry) in wy.iter().enumerate() {
        for (ox, rx) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, fy) in ry {
                for &(sx, fx) in rx {
                    acc += fy * fx * src[sy * w + sx];
                }
            }
            res[oy * out + ox] = acc;
        }
    }
    res
}

/// Binary mask cropped to its box, area-resampled to 16x16 and
/// L2-normalized.
pub fn shape_embedding(rec: &SegmentRecord) -> Vec<f64> {
    let b = rec.bbox;
    let mut crop = Vec::with_capacity(b.w * b.h);
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            crop.push(if rec.contains(x, y) { 1.0 } else { 0.0 });
        }
    }
    let mut v = area_resample(&crop, b.w, b.h, SHAPE_SIDE);
    l2_normalize(&mut v);
    v
}

/// `(cx/W, cy/H, w/W, h/H)`: pixel-center centroid and box extent,
/// normalized by the image size.
pub fn position_embedding(rec: &SegmentRecord) -> Vec<f64> {
    let (w, h) = (rec.image_width as f64, rec.image_height as f64);
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, _) in rec.mask.iter().enumerate().filter(|(_, &m)| m) {
        sx += (i % rec.image_width) as f64 + 0.5;
        sy += (i / rec.image_width) as f64 + 0.5;
    }
    let n = rec.pixel_count as f64;
    vec![
        sx / n / w,
        sy / n / h,
        rec.bbox.w as f64 / w,
        rec.bbox.h as f64 / h,
    ]
}

/// Fallback crop feature: 64-bin intensity histogram of the segment's own
/// pixels inside its box, L2-normalized.
pub fn histogram_features(rec: &SegmentRecord, img: &GrayImage) -> Vec<f64> {
    let mut hist = vec![0.0; HIST_BINS];
    let b = rec.bbox;
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            if rec.contains(x, y) {
                let bin = ((img.get(x, y) * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                hist[bin] += 1.0;
            }
        }
    }
    l2_normalize(&mut hist);
    hist
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDescriptor {
    pub f_image: Vec<f64>,
    pub f_mask: Vec<f64>,
    pub f_pos: Vec<f64>,
    pub fused: Vec<f64>,
}

/// Weighted concatenation of the per-block L2-normalized crop, shape and
/// position vectors.
pub fn fuse(
    f_image: Option<&[f64]>,
    f_mask: &[f64],
    f_pos: &[f64],
    lambda_mask: f64,
    lambda_pos: f64,
) -> Result<SegmentDescriptor> {
    let f_image = f_image
        .ok_or_else(|| Error::Descriptor("segment has no crop features".into()))?
        .to_vec();
    let mut blocks = [f_image, f_mask.to_vec(), f_pos.to_vec()];
    blocks.iter_mut().for_each(|b| l2_normalize(b));
    let [f_image, f_mask, f_pos] = blocks;
    let mut fused = Vec::with_capacity(f_image.len() + f_mask.len() + f_pos.len());
    fused.extend_from_slice(&f_image);
    fused.extend(f_mask.iter().map(|v| v * lambda_mask));
    fused.extend(f_pos.iter().map(|v| v * lambda_pos));
    Ok(SegmentDescriptor {
        f_image,
        f_mask,
        f_pos,
        fused,
    })
}

/// k-means over fused descriptors; returns one class per descriptor.
pub fn cluster_dataset(
    descriptors: &[Vec<f64>],
    n_classes: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<Vec<u32>> {
    if n_classes == 0 {
        return Err(Error::Config("n_classes must be >= 1".into()));
    }
    if descriptors.len() < n_classes {
        return Err(Error::Descriptor(format!(
            "{} segments cannot form {n_classes} classes",
            descriptors.len()
        )));
    }
    let dim = descriptors[0].len();
    if let Some(i) = descriptors.iter().position(|d| d.len() != dim) {
        return Err(Error::Shape(format!(
            "descriptor {i} has length {}, expected {dim}",
            descriptors[i].len()
        )));
    }
    let r = kmeans(descriptors, n_classes, seed, params);
    Ok(r.labels.iter().map(|&l| l as u32).collect())
}

/// Paints each record with its class; larger segments win any overlap.
/// Pixels not covered by a record keep `fill`.
pub fn render_semantic_mask(
    records: &[&SegmentRecord],
    classes: &[u32],
    width: usize,
    height: usize,
    n_classes: usize,
    fill: u32,
) -> Result<SegmentationMask> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (records[i].pixel_count, std::cmp::Reverse(i)));
    let mut labels = vec![fill; width * height];
    for i in order {
        let r = records[i];
        if (r.image_width, r.image_height) != (width, height) {
            return Err(Error::Shape("record does not match mask dims".into()));
        }
        for (l, _) in labels.iter_mut().zip(&r.mask).filter(|(_, &m)| m) {
            *l = classes[i];
        }
    }
    SegmentationMask::new(width, height, labels)?.with_label_space(n_classes.max(fill as usize + 1))
}

/// Tab-separated record listing consumed by the crop-embedding extractor:
/// label, tight box, square crop box, pixel count.
pub fn records_to_tsv(records: &[SegmentRecord]) -> String {
    let mut s = String::from("label\tx\ty\tw\th\tcrop_x\tcrop_y\tcrop_w\tcrop_h\tpixels\n");
    for r in records {
        let b = r.bbox;
        let c = b.padded_square(r.image_width, r.image_height);
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.segment_label, b.x, b.y, b.w, b.h, c.x, c.y, c.w, c.h, r.pixel_count
        );
    }
    s
}

/// Groups record indices by image id, preserving first-seen order.
pub fn group_by_image(records: &[SegmentRecord]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        out.entry(r.image_id.clone()).or_default().push(i);
    }
    out
}
