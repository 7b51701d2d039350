//! Synthetic scenes with one-to-many color ambiguity.
//!
//! Every shape class has a single CIELAB lightness shared by all of its
//! palette colors, so the lightness input is identical whichever color a
//! shape receives. Scenes are generated directly in model space; the
//! 8-bit rendering is derived from that.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{lab_in_gamut, ColorSpaceSpec, Lab, Rgb8Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel integer labels, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Validation(format!(
                "segmentation needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.width + j]
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// One training / evaluation example in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`
    pub input: Tensor<f32>,
    /// `[K, H, W]`
    pub target: Tensor<f32>,
    pub segmentation: Option<SegmentationMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeClass {
    /// CIELAB L\* shared by every palette entry.
    pub lightness: f64,
    /// Candidate (a\*, b\*) colors.
    pub palette: Vec<[f64; 2]>,
}

impl ShapeClass {
    fn color(&self, idx: usize) -> Lab {
        let [a, b] = self.palette[idx];
        Lab {
            l: self.lightness,
            a,
            b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of shapes per scene.
    pub shape_count: (usize, usize),
    /// Inclusive range of shape side lengths (bounding box), in pixels.
    pub shape_size: (usize, usize),
    pub classes: Vec<ShapeClass>,
    pub background: ShapeClass,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            shape_count: (2, 4),
            shape_size: (8, 14),
            classes: vec![
                ShapeClass {
                    lightness: 55.0,
                    palette: vec![[50.0, 35.0], [-45.0, 40.0], [0.0, -50.0], [40.0, -40.0]],
                },
                ShapeClass {
                    lightness: 70.0,
                    palette: vec![[45.0, 5.0], [0.0, 60.0], [-40.0, 0.0], [-20.0, -25.0]],
                },
            ],
            background: ShapeClass {
                lightness: 90.0,
                palette: vec![[0.0, 0.0]],
            },
            seed: 0,
        }
    }
}

const PLACEMENT_RETRIES: usize = 100;
const SCENE_RETRIES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub id: u32,
    pub kind: ShapeKind,
    pub class: usize,
    pub palette_index: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PlacedShape {
    fn covers(&self, i: usize, j: usize) -> bool {
        if i < self.top || j < self.left || i >= self.top + self.height || j >= self.left + self.width {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let cy = self.top as f64 + self.height as f64 / 2.0;
                let cx = self.left as f64 + self.width as f64 / 2.0;
                let dy = (i as f64 + 0.5 - cy) / (self.height as f64 / 2.0);
                let dx = (j as f64 + 0.5 - cx) / (self.width as f64 / 2.0);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shapes: Vec<PlacedShape>,
    pub background_index: usize,
    pub sample: Sample,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.shape_count;
        let (smin, smax) = self.shape_size;
        if lo > hi || smin == 0 || smin > smax || smax > self.height.min(self.width) {
            return Err(Error::Validation(format!(
                "scene ranges invalid: shape_count {:?}, shape_size {:?} for {}x{}",
                self.shape_count, self.shape_size, self.height, self.width
            )));
        }
        if self.classes.is_empty() || self.background.palette.is_empty() {
            return Err(Error::Validation("scene needs at least one class and a background color".into()));
        }
        for (ci, class) in self.classes.iter().chain([&self.background]).enumerate() {
            if class.palette.is_empty() {
                return Err(Error::Validation(format!("class {ci} has an empty palette")));
            }
            for idx in 0..class.palette.len() {
                if !lab_in_gamut(class.color(idx)) {
                    return Err(Error::Validation(format!(
                        "class {ci} color {:?} is outside the sRGB gamut",
                        class.color(idx)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Generate one scene.
    pub fn generate<R: Rng + ?Sized>(&self, color_space: ColorSpaceSpec, rng: &mut R) -> Result<Scene> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let count = rng.gen_range(self.shape_count.0..=self.shape_count.1);
        let mut shapes = None;
        for _ in 0..SCENE_RETRIES {
            shapes = self.place_shapes(count, rng);
            if shapes.is_some() {
                break;
            }
        }
        let shapes = shapes.ok_or_else(|| {
            Error::Generation(format!(
                "could not place {count} shapes of size {:?} in {h}x{w} after {SCENE_RETRIES} attempts",
                self.shape_size
            ))
        })?;
        let background_index = rng.gen_range(0..self.background.palette.len());
        Ok(self.render(shapes, background_index, color_space))
    }

    /// One placement attempt; `None` if some shape found no free spot.
    fn place_shapes<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Option<Vec<PlacedShape>> {
        let (h, w) = (self.height, self.width);
        let mut occupied = vec![false; h * w];
        let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
        for id in 1..=count as u32 {
            let mut placed = None;
            for _ in 0..PLACEMENT_RETRIES {
                let sh = rng.gen_range(self.shape_size.0..=self.shape_size.1);
                let sw = rng.gen_range(self.shape_size.0..=self.shape_size.1);
                let top = rng.gen_range(0..=h - sh);
                let left = rng.gen_range(0..=w - sw);
                // keep a one-pixel gap between bounding boxes
                let clear = (top.saturating_sub(1)..(top + sh + 1).min(h))
                    .all(|i| (left.saturating_sub(1)..(left + sw + 1).min(w)).all(|j| !occupied[i * w + j]));
                if clear {
                    placed = Some((top, left, sh, sw));
                    break;
                }
            }
            let (top, left, sh, sw) = placed?;
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            };
            let class = rng.gen_range(0..self.classes.len());
            let palette_index = rng.gen_range(0..self.classes[class].palette.len());
            for i in top..top + sh {
                for j in left..left + sw {
                    occupied[i * w + j] = true;
                }
            }
            shapes.push(PlacedShape {
                id,
                kind,
                class,
                palette_index,
                top,
                left,
                height: sh,
                width: sw,
            });
        }
        Some(shapes)
    }

    /// Rasterize shapes into model space. Deterministic in its arguments.
    pub fn render(&self, shapes: Vec<PlacedShape>, background_index: usize, color_space: ColorSpaceSpec) -> Scene {
        let (h, w) = (self.height, self.width);
        let k = color_space.color_channels();
        let plane = h * w;
        let mut input = vec![0f32; plane];
        let mut target = vec![0f32; k * plane];
        let mut labels = vec![0u32; plane];
        let bg = self.background.color(background_index);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let (lab, label) = shapes
                    .iter()
                    .find(|s| s.covers(i, j))
                    .map(|s| (self.classes[s.class].color(s.palette_index), s.id))
                    .unwrap_or((bg, 0));
                labels[p] = label;
                input[p] = ColorSpaceSpec::normalize_lightness(lab.l) as f32;
                for (c, v) in color_space.encode_color(lab).into_iter().enumerate() {
                    target[c * plane + p] = v as f32;
                }
            }
        }
        Scene {
            shapes,
            background_index,
            sample: Sample {
                input: Tensor::from_vec(&[1, h, w], input).expect("shape"),
                target: Tensor::from_vec(&[k, h, w], target).expect("shape"),
                segmentation: Some(SegmentationMap::new(h, w, labels).expect("shape")),
            },
        }
    }
}

/// `batch_size` independent scenes drawn from `rng`.
pub fn generate_synthetic_batch<R: Rng + ?Sized>(
    spec: &SyntheticSceneSpec,
    color_space: ColorSpaceSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    (0..batch_size)
        .map(|_| spec.generate(color_space, rng).map(|s| s.sample))
        .collect()
}

/// Deterministic held-out set: scene `i` is drawn from its own stream.
pub fn held_out_set(spec: &SyntheticSceneSpec, color_space: ColorSpaceSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
            spec.generate(color_space, &mut rng).map(|s| s.sample)
        })
        .collect()
}

/// 8-bit ground-truth rendering of a sample.
pub fn sample_to_rgb8(sample: &Sample, color_space: ColorSpaceSpec) -> Result<Rgb8Image> {
    color_space.from_model_space(&sample.target, &sample.input)
}
