//! sRGB ⇄ lαβ conversion.
//!
//! lαβ is a log-compressed opponent space built on LMS cone responses. Its
//! three channels are close to decorrelated for natural images, so first and
//! second moments can be edited per channel without cross-talk. Values are
//! computed directly on gamma-encoded sRGB (no linearization).
//!
//! Forward map, per pixel:
//!
//! ```text
//! rgb   = clamp(rgb, 1/255, 1)
//! lms   = RGB_TO_LMS · rgb
//! lab   = LOG_TO_LAB · log10(lms)
//! ```
//!
//! where `LOG_TO_LAB = diag(1/√3, 1/√6, 1/√2) · [[1,1,1],[1,1,-2],[1,-1,0]]`.
//! The inverse uses the exact matrix inverses (not rounded tables), so the
//! round trip is limited only by floating point.


use crate::{Error, Result};

/// Lower clamp applied before the logarithm: one 8-bit quantization step.
pub const RGB_FLOOR: f64 = 1.0 / 255.0;

pub const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

const INV_SQRT3: f64 = 0.577_350_269_189_625_8;
const INV_SQRT6: f64 = 0.408_248_290_463_863;
const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub const LOG_LMS_TO_LAB: [[f64; 3]; 3] = [
    [INV_SQRT3, INV_SQRT3, INV_SQRT3],
    [INV_SQRT6, INV_SQRT6, -2.0 * INV_SQRT6],
    [INV_SQRT2, -INV_SQRT2, 0.0],
];

pub const LMS_TO_RGB: [[f64; 3]; 3] = invert3(RGB_TO_LMS);
pub const LAB_TO_LOG_LMS: [[f64; 3]; 3] = invert3(LOG_LMS_TO_LAB);

const fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let inv = 1.0 / det;
    [
        [
            c00 * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            c01 * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            c02 * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

#[inline]
fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// An sRGB image, row-major, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<[f64; 3]>,
}

/// An image in lαβ space. Same layout as [`Image`]; values are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<[f64; 3]>,
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimensions(format!("{height}x{width} has no pixels")));
    }
    if height * width != len {
        return Err(Error::Dimensions(format!(
            "{height}x{width} needs {} pixels, got {len}",
            height * width
        )));
    }
    Ok(())
}

fn all_finite(data: &[[f64; 3]]) -> bool {
    data.iter().all(|p| p.iter().all(|v| v.is_finite()))
}

impl Image {
    /// Build an image from row-major pixels. Values must be finite and in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if !all_finite(&data) {
            return Err(Error::NonFinite("image pixels"));
        }
        if data.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("sRGB values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Build an image without range validation. Non-finite values are still
    /// representable so that conversion can report them.
    pub fn from_raw(height: usize, width: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(height, width, vec![rgb; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    pub fn into_pixels(self) -> Vec<[f64; 3]> {
        self.data
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Image { height: self.height, width: self.width, data }
    }
}

impl LabImage {
    pub fn new(height: usize, width: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }
}

/// Convert one sRGB pixel. Input is clamped to `[RGB_FLOOR, 1]` first.
#[inline]
pub fn pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let c = rgb.map(|v| v.clamp(RGB_FLOOR, 1.0));
    let lms = mat_vec(&RGB_TO_LMS, c);
    mat_vec(&LOG_LMS_TO_LAB, lms.map(f64::log10))
}

/// Convert one lαβ pixel back to sRGB, clamped to `[0, 1]`.
#[inline]
pub fn pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let log_lms = mat_vec(&LAB_TO_LOG_LMS, lab);
    let lms = log_lms.map(|v| (v * std::f64::consts::LN_10).exp());
    mat_vec(&LMS_TO_RGB, lms).map(|v| v.clamp(0.0, 1.0))
}

pub fn srgb_to_lab(img: &Image) -> Result<LabImage> {
    if !all_finite(&img.data) {
        return Err(Error::NonFinite("sRGB image"));
    }
    let data = img.data.iter().map(|&p| pixel_to_lab(p)).collect();
    Ok(LabImage { height: img.height, width: img.width, data })
}

pub fn lab_to_srgb(lab: &LabImage) -> Result<Image> {
    if !all_finite(&lab.data) {
        return Err(Error::NonFinite("lαβ image"));
    }
    let data = lab.data.iter().map(|&p| pixel_to_srgb(p)).collect();
    Ok(Image { height: lab.height, width: lab.width, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Direct evaluation of the forward formula, written out term by term.
    fn oracle_lab(rgb: [f64; 3]) -> [f64; 3] {
        let [r, g, b] = rgb.map(|v| v.clamp(1.0 / 255.0, 1.0));
        let l = (0.3811 * r + 0.5783 * g + 0.0402 * b).log10();
        let m = (0.1967 * r + 0.7244 * g + 0.0782 * b).log10();
        let s = (0.0241 * r + 0.1288 * g + 0.8444 * b).log10();
        [
            (l + m + s) / 3f64.sqrt(),
            (l + m - 2.0 * s) / 6f64.sqrt(),
            (l - m) / 2f64.sqrt(),
        ]
    }

    #[test]
    fn inverse_matrices_are_inverses() {
        for (a, b) in [(RGB_TO_LMS, LMS_TO_RGB), (LOG_LMS_TO_LAB, LAB_TO_LOG_LMS)] {
            for i in 0..3 {
                for j in 0..3 {
                    let v: f64 = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((v - expect).abs() < 1e-12, "({i},{j}) = {v}");
                }
            }
        }
    }

    #[test]
    fn white_pixel() {
        // Frozen from an independent numpy evaluation.
        let lab = pixel_to_lab([1.0, 1.0, 1.0]);
        let expect = [-9.538_092_57e-4, 7.636_271_15e-4, 9.217_847_08e-5];
        for c in 0..3 {
            assert!((lab[c] - expect[c]).abs() < 1e-11, "{lab:?}");
        }
        assert_eq!(lab, oracle_lab([1.0, 1.0, 1.0]));
    }

    #[test]
    fn gray_axis_is_near_achromatic() {
        let mut levels = vec![1.0 / 255.0];
        levels.extend((1..=10).map(|i| i as f64 / 10.0));
        for g in levels {
            let [l, a, b] = pixel_to_lab([g, g, g]);
            assert!(a.abs() < 0.01 * l.abs() + 0.01);
            assert!(b.abs() < 0.01 * l.abs() + 0.01);
            assert!(a.abs() <= 0.02 && b.abs() <= 0.02);
        }
    }

    #[test]
    fn black_is_clamped_before_log() {
        let lab = pixel_to_lab([0.0, 0.0, 0.0]);
        assert!(lab.iter().all(|v| v.is_finite()));
        assert_eq!(lab, pixel_to_lab([RGB_FLOOR; 3]));
    }

    #[test]
    fn zero_lab_maps_to_lms_unit() {
        // M⁻¹·(1,1,1) = (0.99959833, 1.00074117, 1.00309595) before clamping.
        let rgb = pixel_to_srgb([0.0, 0.0, 0.0]);
        assert!((rgb[0] - 0.999_598_33).abs() < 1e-8, "{rgb:?}");
        assert_eq!(rgb[1], 1.0);
        assert_eq!(rgb[2], 1.0);
    }

    #[test]
    fn very_dark_lab_underflows_to_black() {
        let rgb = pixel_to_srgb([-100.0, 0.0, 0.0]);
        assert!(rgb.iter().all(|&v| (0.0..1e-50).contains(&v)), "{rgb:?}");
        assert_eq!(crate::raster::quantize(rgb[0]), 0);
    }

    #[test]
    fn rejects_non_finite() {
        let img = Image::from_raw(1, 2, vec![[0.5; 3], [f64::NAN, 0.0, 0.0]]).unwrap();
        assert!(matches!(srgb_to_lab(&img), Err(Error::NonFinite(_))));
        let lab = LabImage::new(1, 1, vec![[f64::INFINITY, 0.0, 0.0]]).unwrap();
        assert!(matches!(lab_to_srgb(&lab), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(Image::new(0, 3, vec![]).is_err());
        assert!(Image::new(2, 2, vec![[0.0; 3]; 3]).is_err());
        assert!(Image::new(1, 1, vec![[1.5, 0.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn forward_matches_oracle(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let got = pixel_to_lab([r, g, b]);
            let want = oracle_lab([r, g, b]);
            for c in 0..3 {
                prop_assert!((got[c] - want[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn round_trip(r in RGB_FLOOR..=1.0f64, g in RGB_FLOOR..=1.0f64, b in RGB_FLOOR..=1.0f64) {
            let back = pixel_to_srgb(pixel_to_lab([r, g, b]));
            for (x, y) in back.iter().zip([r, g, b]) {
                prop_assert!((x - y).abs() <= 1e-4);
            }
        }

        #[test]
        fn conversion_commutes_with_pixel_permutation(
            px in proptest::collection::vec([0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64], 6),
            rot in 0usize..6,
        ) {
            let img = Image::new(2, 3, px.clone()).unwrap();
            let mut shuffled = px;
            shuffled.rotate_left(rot);
            let lab = srgb_to_lab(&img).unwrap();
            let lab_s = srgb_to_lab(&Image::new(2, 3, shuffled).unwrap()).unwrap();
            let mut expect = lab.pixels().to_vec();
            expect.rotate_left(rot);
            prop_assert_eq!(expect, lab_s.pixels().to_vec());
        }
    }
}
