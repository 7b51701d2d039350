//! sRGB ↔ CIELAB (D65) conversion and the affine maps between 8-bit rasters
//! and normalized model space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// D65 reference white: the XYZ of sRGB (1, 1, 1), so white maps to L\* = 100.
pub const D65_WHITE: [f64; 3] = [
    SRGB_TO_XYZ[0][0] + SRGB_TO_XYZ[0][1] + SRGB_TO_XYZ[0][2],
    SRGB_TO_XYZ[1][0] + SRGB_TO_XYZ[1][1] + SRGB_TO_XYZ[1][2],
    SRGB_TO_XYZ[2][0] + SRGB_TO_XYZ[2][1] + SRGB_TO_XYZ[2][2],
];

const fn invert(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    [
        [c00 / det, (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det, (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det],
        [c01 / det, (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det, (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det],
        [c02 / det, (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det, (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det],
    ]
}

const XYZ_TO_SRGB: [[f64; 3]; 3] = invert(SRGB_TO_XYZ);

/// Scale mapping a\*/b\* to normalized units; the sRGB gamut stays inside ±110.
pub const AB_SCALE: f64 = 110.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Gamma-encoded sRGB in [0, 1] to CIELAB.
pub fn srgb_to_lab(rgb: [f64; 3]) -> Lab {
    let lin = rgb.map(srgb_to_linear);
    let xyz = mat_vec(&SRGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// CIELAB to gamma-encoded sRGB; may leave [0, 1] for out-of-gamut colors.
pub fn lab_to_srgb(lab: Lab) -> [f64; 3] {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let xyz = [
        D65_WHITE[0] * lab_f_inv(fx),
        D65_WHITE[1] * lab_f_inv(fy),
        D65_WHITE[2] * lab_f_inv(fz),
    ];
    mat_vec(&XYZ_TO_SRGB, xyz).map(linear_to_srgb)
}

pub fn lab_in_gamut(lab: Lab) -> bool {
    lab_to_srgb(lab).iter().all(|c| (-1e-9..=1.0 + 1e-9).contains(c))
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    /// Predict a\*b\* from the L channel.
    LabAb,
    /// Predict RGB from a grayscale / outline channel.
    Rgb,
}

impl ColorMode {
    /// Number of predicted color channels.
    pub fn channels(self) -> usize {
        match self {
            ColorMode::LabAb => 2,
            ColorMode::Rgb => 3,
        }
    }
}

/// 8-bit RGB raster, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Validation(format!(
                "{}x{} raster needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> [u8; 3] {
        self.pixels[i * self.width + j]
    }
}

/// Model-space encoding of an image: one input channel plus K targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpaceImage {
    /// `[1, H, W]`, normalized lightness in [-1, 1].
    pub input: Tensor<f32>,
    /// `[K, H, W]`, normalized colors in [-1, 1].
    pub target: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorSpaceSpec {
    pub mode: ColorMode,
}

impl ColorSpaceSpec {
    pub const LAB: Self = Self {
        mode: ColorMode::LabAb,
    };
    pub const RGB: Self = Self {
        mode: ColorMode::Rgb,
    };

    pub fn color_channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn normalize_lightness(l: f64) -> f64 {
        l / 50.0 - 1.0
    }

    pub fn denormalize_lightness(x: f64) -> f64 {
        (x + 1.0) * 50.0
    }

    /// Normalized color channels for one Lab color.
    pub fn encode_color(&self, lab: Lab) -> Vec<f64> {
        match self.mode {
            ColorMode::LabAb => vec![lab.a / AB_SCALE, lab.b / AB_SCALE],
            ColorMode::Rgb => lab_to_srgb(lab)
                .iter()
                .map(|c| c.clamp(0.0, 1.0) * 2.0 - 1.0)
                .collect(),
        }
    }

    /// Normalized color channels for a display-space (sRGB 8-bit) color.
    pub fn encode_display_color(&self, rgb: [u8; 3]) -> Vec<f64> {
        match self.mode {
            ColorMode::LabAb => {
                let lab = srgb_to_lab(rgb.map(|c| c as f64 / 255.0));
                vec![lab.a / AB_SCALE, lab.b / AB_SCALE]
            }
            ColorMode::Rgb => rgb.iter().map(|&c| c as f64 / 127.5 - 1.0).collect(),
        }
    }

    /// Split an 8-bit raster into (input, target) model-space tensors.
    pub fn to_model_space(&self, image: &Rgb8Image) -> ModelSpaceImage {
        let (h, w) = (image.height, image.width);
        let k = self.color_channels();
        let plane = h * w;
        let mut input = vec![0f32; plane];
        let mut target = vec![0f32; k * plane];
        for (p, rgb) in image.pixels.iter().enumerate() {
            let srgb = rgb.map(|c| c as f64 / 255.0);
            let lab = srgb_to_lab(srgb);
            input[p] = Self::normalize_lightness(lab.l) as f32;
            match self.mode {
                ColorMode::LabAb => {
                    target[p] = (lab.a / AB_SCALE) as f32;
                    target[plane + p] = (lab.b / AB_SCALE) as f32;
                }
                ColorMode::Rgb => {
                    for c in 0..3 {
                        target[c * plane + p] = (srgb[c] * 2.0 - 1.0) as f32;
                    }
                }
            }
        }
        ModelSpaceImage {
            input: Tensor::from_vec(&[1, h, w], input).expect("shape"),
            target: Tensor::from_vec(&[k, h, w], target).expect("shape"),
        }
    }

    /// Recombine predicted colors with the input lightness into 8-bit sRGB.
    pub fn from_model_space(&self, prediction: &Tensor<f32>, input: &Tensor<f32>) -> Result<Rgb8Image> {
        let (k, h, w) = prediction.chw();
        if k != self.color_channels() || input.shape() != [1, h, w] {
            return Err(Error::Validation(format!(
                "prediction {:?} / input {:?} do not match a {:?} image",
                prediction.shape(),
                input.shape(),
                self.mode
            )));
        }
        let plane = h * w;
        let pd = prediction.data();
        let pixels = (0..plane)
            .map(|p| match self.mode {
                ColorMode::LabAb => {
                    let lab = Lab {
                        l: Self::denormalize_lightness(input.data()[p] as f64),
                        a: pd[p] as f64 * AB_SCALE,
                        b: pd[plane + p] as f64 * AB_SCALE,
                    };
                    lab_to_srgb(lab).map(quantize)
                }
                ColorMode::Rgb => {
                    [0, 1, 2].map(|c| quantize((pd[c * plane + p] as f64 + 1.0) / 2.0))
                }
            })
            .collect();
        Rgb8Image::new(w, h, pixels)
    }
}

/// 8-bit grayscale rendering of a normalized lightness channel.
pub fn lightness_to_gray8(input: &Tensor<f32>) -> Vec<u8> {
    input
        .data()
        .iter()
        .map(|&x| {
            let l = ColorSpaceSpec::denormalize_lightness(x as f64);
            let rgb = lab_to_srgb(Lab { l, a: 0.0, b: 0.0 });
            quantize(rgb[1])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_is_l100() {
        let lab = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((lab.l - 100.0).abs() < 1e-6, "{lab:?}");
        assert!(lab.a.abs() < 0.01 && lab.b.abs() < 0.01);
    }

    #[test]
    fn gray_is_neutral() {
        let img = Rgb8Image::new(1, 1, vec![[128, 128, 128]]).unwrap();
        let m = ColorSpaceSpec::LAB.to_model_space(&img);
        assert!(m.target.data().iter().all(|v| v.abs() < 1e-3), "{:?}", m.target);
    }

    #[test]
    fn known_reference_colors() {
        // standard published values for sRGB primaries under D65
        let red = srgb_to_lab([1.0, 0.0, 0.0]);
        assert!((red.l - 53.24).abs() < 0.05 && (red.a - 80.09).abs() < 0.05 && (red.b - 67.20).abs() < 0.05);
        let blue = srgb_to_lab([0.0, 0.0, 1.0]);
        assert!((blue.l - 32.30).abs() < 0.05 && (blue.a - 79.19).abs() < 0.05 && (blue.b + 107.86).abs() < 0.05);
    }

    fn random_image(seed: u64, w: usize, h: usize) -> Rgb8Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Rgb8Image::new(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_lossless_in_both_modes() {
        for spec in [ColorSpaceSpec::LAB, ColorSpaceSpec::RGB] {
            let img = random_image(3, 17, 9);
            let m = spec.to_model_space(&img);
            let back = spec.from_model_space(&m.target, &m.input).unwrap();
            for (a, b) in img.pixels.iter().zip(&back.pixels) {
                for c in 0..3 {
                    assert!((a[c] as i32 - b[c] as i32).abs() <= 1, "{spec:?}: {a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn lab_round_trip_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let rgb = [rng.gen::<f64>(), rng.gen(), rng.gen()];
            let back = lab_to_srgb(srgb_to_lab(rgb));
            for c in 0..3 {
                assert!((rgb[c] - back[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn channel_counts() {
        assert_eq!(ColorSpaceSpec::LAB.color_channels(), 2);
        assert_eq!(ColorSpaceSpec::RGB.color_channels(), 3);
        let img = random_image(1, 4, 4);
        assert_eq!(ColorSpaceSpec::RGB.to_model_space(&img).target.shape(), &[3, 4, 4]);
        assert!(ColorSpaceSpec::RGB
            .from_model_space(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 4, 4]))
            .is_err());
    }
}
