use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ::image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Integer label field over an image or a patch grid.
///
/// `n_labels` is the size of the label space: every label lies in
/// `[0, n_labels)`, though not every id has to occur (a semantic class can be
/// absent from a given image).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentationMask {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    n_labels: usize,
}

impl SegmentationMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("mask has a zero dimension".into()));
        }
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} mask needs {} labels, got {}",
                width,
                height,
                width * height,
                labels.len()
            )));
        }
        let n_labels = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        Ok(SegmentationMask {
            width,
            height,
            labels,
            n_labels,
        })
    }

    pub fn with_label_space(mut self, n_labels: usize) -> Result<Self> {
        if n_labels < self.n_labels {
            return Err(Error::Shape(format!(
                "label space {n_labels} smaller than max label {}",
                self.n_labels - 1
            )));
        }
        self.n_labels = n_labels;
        Ok(self)
    }

    pub fn constant(width: usize, height: usize, label: u32) -> Self {
        Self::new(width, height, vec![label; width * height]).expect("nonzero dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per label id that occurs, in ascending id order.
    pub fn counts(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &l in &self.labels {
            *out.entry(l).or_insert(0) += 1;
        }
        out
    }

    pub fn distinct(&self) -> Vec<u32> {
        self.counts().into_keys().collect()
    }

    pub fn binary(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn map_labels(&self, f: impl Fn(u32) -> u32) -> Self {
        Self::new(
            self.width,
            self.height,
            self.labels.iter().map(|&l| f(l)).collect(),
        )
        .expect("same dims")
    }

    /// Renumbers labels to `0..n` by descending pixel count; equal counts keep
    /// ascending order of their old ids.
    pub fn relabel_by_size(&self) -> Self {
        let counts = self.counts();
        let mut order: Vec<(u32, usize)> = counts.into_iter().collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let lut: BTreeMap<u32, u32> = order
            .iter()
            .enumerate()
            .map(|(new, &(old, _))| (old, new as u32))
            .collect();
        self.map_labels(|l| lut[&l])
    }

    /// Crops a window; used to align ground truth with patch-cropped images.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop ({x0}, {y0}, {w}, {h}) outside {}x{} mask",
                self.width, self.height
            )));
        }
        let mut labels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            labels.extend_from_slice(&self.labels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(w, h, labels)?.with_label_space(self.n_labels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let px = self
            .labels
            .iter()
            .map(|&l| {
                u8::try_from(l).map_err(|_| {
                    Error::Capacity(format!("label {l} does not fit an 8-bit mask"))
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        let buf: ImageBuffer<Luma<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, px)
                .expect("buffer length matches dims");
        buf.save(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Writes the mask plus a `label<TAB>pixels` legend next to it.
    pub fn save_with_legend(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.save_png(path)?;
        let legend = path.with_extension("txt");
        fs::write(&legend, self.legend()).map_err(|e| Error::io(&legend, e))
    }

    pub fn legend(&self) -> String {
        let mut s = format!("# {}x{} n_labels={}\n", self.width, self.height, self.n_labels);
        for (l, c) in self.counts() {
            let _ = writeln!(s, "{l}\t{c}");
        }
        s
    }

    /// Reads an 8-bit raster whose pixel values are label ids.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ::image::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let luma = match img {
            ::image::DynamicImage::ImageLuma8(b) => b,
            other => {
                return Err(Error::Format(format!(
                    "{}: label masks must be 8-bit single channel, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        Self::new(w, h, luma.into_raw().into_iter().map(u32::from).collect())
    }
}
