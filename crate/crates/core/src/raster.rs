//! Raster containers shared by scenes, prompt rendering and the goal module.
//!
//! Color images are `(height, width, 3)` arrays of `f32` in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type RgbImage = Array3<f32>;

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn to_rgb8(img: &RgbImage) -> image::RgbImage {
    let (h, w, _) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (img[(y as usize, x as usize, c)].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    to_rgb8(img)
        .save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_rgb8(img)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Bilinear resize with half-pixel centers; returns a copy when the size already matches.
pub fn resize_bilinear(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    let (h, w, ch) = img.dim();
    if (h, w) == (height, width) {
        return img.clone();
    }
    let sy = h as f32 / height as f32;
    let sx = w as f32 / width as f32;
    Array3::from_shape_fn((height, width, ch), |(r, c, k)| {
        let fy = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let top = img[(y0, x0, k)] * (1.0 - tx) + img[(y0, x1, k)] * tx;
        let bot = img[(y1, x0, k)] * (1.0 - tx) + img[(y1, x1, k)] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Names of the semantic classes, in channel order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticClasses(pub Vec<String>);

impl Default for SemanticClasses {
    fn default() -> Self {
        Self(vec!["traversable".into(), "obstacle".into(), "other".into()])
    }
}

impl SemanticClasses {
    pub const TRAVERSABLE: u8 = 0;
    pub const OBSTACLE: u8 = 1;
    pub const OTHER: u8 = 2;

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-pixel class indices. Expanded to one-hot channels on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    classes: Array2<u8>,
    num_classes: usize,
}

impl SemanticMap {
    pub fn new(classes: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::param("num_classes", "must be in 1..=256"));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Input(format!(
                "semantic class {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            classes,
            num_classes,
        })
    }

    pub fn height(&self) -> usize {
        self.classes.nrows()
    }

    pub fn width(&self) -> usize {
        self.classes.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &Array2<u8> {
        &self.classes
    }

    pub fn class_at(&self, row: usize, col: usize) -> u8 {
        self.classes[(row, col)]
    }

    /// `(C, H, W)` one-hot expansion; channels sum to one at every pixel.
    pub fn one_hot(&self) -> Array3<f32> {
        let (h, w) = self.classes.dim();
        let mut out = Array3::zeros((self.num_classes, h, w));
        for ((r, c), &k) in self.classes.indexed_iter() {
            out[(k as usize, r, c)] = 1.0;
        }
        out
    }

    /// Nearest-neighbour resize (sampling at target pixel centers), which keeps the map one-hot.
    pub fn resized(&self, height: usize, width: usize) -> SemanticMap {
        let (h, w) = self.classes.dim();
        if (h, w) == (height, width) {
            return self.clone();
        }
        let classes = Array2::from_shape_fn((height, width), |(r, c)| {
            let sr = (((r as f64 + 0.5) * h as f64 / height as f64) as usize).min(h - 1);
            let sc = (((c as f64 + 0.5) * w as f64 / width as f64) as usize).min(w - 1);
            self.classes[(sr, sc)]
        });
        SemanticMap {
            classes,
            num_classes: self.num_classes,
        }
    }

    /// Reads an indexed-color (or 8-bit grayscale) PNG whose pixel values are class ids.
    pub fn load_png(path: &Path, num_classes: usize) -> Result<Self> {
        let file = File::open(path)?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        if info.bit_depth != png::BitDepth::Eight
            || !matches!(
                info.color_type,
                png::ColorType::Indexed | png::ColorType::Grayscale
            )
        {
            return Err(Error::Image(format!(
                "{}: semantic map must be an 8-bit indexed or grayscale PNG",
                path.display()
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut classes = Array2::zeros((h, w));
        for r in 0..h {
            let row = &buf[r * info.line_size..r * info.line_size + w];
            for (c, &v) in row.iter().enumerate() {
                classes[(r, c)] = v;
            }
        }
        Self::new(classes, num_classes)
    }

    /// Writes an indexed PNG with a fixed debug palette.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.classes.dim();
        let file = File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        let mut palette = Vec::with_capacity(self.num_classes * 3);
        for k in 0..self.num_classes {
            let rgb = match k {
                0 => [200, 200, 200],
                1 => [60, 40, 30],
                2 => [40, 120, 40],
                _ => [(k * 37 % 256) as u8, (k * 91 % 256) as u8, (k * 53 % 256) as u8],
            };
            palette.extend_from_slice(&rgb);
        }
        enc.set_palette(palette);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Image(e.to_string()))?;
        let data: Vec<u8> = self.classes.iter().copied().collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }
}
