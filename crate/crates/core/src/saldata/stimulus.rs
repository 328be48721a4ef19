use std::fmt;
use std::str::FromStr;

use ndgrad::Tensor;
use serde::{Deserialize, Serialize};

use super::{DataError, SaliencyMap};
use crate::imageops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Pictorial,
    Textual,
    Mixed,
    Synthetic,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Pictorial => "Pictorial",
            Category::Textual => "Textual",
            Category::Mixed => "Mixed",
            Category::Synthetic => "Synthetic",
        }
    }

    /// Matches a dataset folder name, case-insensitively.
    pub fn from_folder(name: &str) -> Option<Category> {
        match name.to_ascii_lowercase().as_str() {
            "pictorial" => Some(Category::Pictorial),
            "textual" | "text" => Some(Category::Textual),
            "mixed" => Some(Category::Mixed),
            "synthetic" => Some(Category::Synthetic),
            _ => None,
        }
    }
}

/// Layout family of a generated page.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "F-shaped-textual")]
    FShapedTextual,
    #[serde(rename = "center-pictorial")]
    CenterPictorial,
    #[serde(rename = "sidebar-mixed")]
    SidebarMixed,
}

impl Layout {
    pub const ALL: [Layout; 3] = [
        Layout::FShapedTextual,
        Layout::CenterPictorial,
        Layout::SidebarMixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layout::FShapedTextual => "F-shaped-textual",
            Layout::CenterPictorial => "center-pictorial",
            Layout::SidebarMixed => "sidebar-mixed",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Layout::FShapedTextual => 0,
            Layout::CenterPictorial => 1,
            Layout::SidebarMixed => 2,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layout {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Layout::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| DataError::UnknownLayout(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementKind {
    Background,
    Text,
    Picture,
}

impl ElementKind {
    /// Gray level used when a mask is written as an image.
    pub fn level(self) -> u8 {
        match self {
            ElementKind::Background => 0,
            ElementKind::Text => 255,
            ElementKind::Picture => 128,
        }
    }

    pub fn from_level(v: u8) -> ElementKind {
        match v {
            0..=63 => ElementKind::Background,
            64..=191 => ElementKind::Picture,
            _ => ElementKind::Text,
        }
    }
}

/// An RGB page screenshot with values in `[0, 1]`, stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Stimulus {
    pub id: String,
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    pub category: Category,
    pub layout: Option<Layout>,
    element_mask: Option<Vec<ElementKind>>,
}

impl Stimulus {
    /// `pixels` holds the R plane, then G, then B.
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        category: Category,
    ) -> Result<Self, DataError> {
        if width == 0 || height == 0 || pixels.len() != 3 * width * height {
            return Err(DataError::Extents {
                expected: (width, height),
                detail: format!("{} pixel values for 3 channels", pixels.len()),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelRange(*v));
        }
        Ok(Stimulus {
            id: id.into(),
            width,
            height,
            pixels,
            category,
            layout: None,
            element_mask: None,
        })
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = Some(layout);
        self
    }

    pub fn with_mask(mut self, mask: Vec<ElementKind>) -> Result<Self, DataError> {
        if mask.len() != self.width * self.height {
            return Err(DataError::Extents {
                expected: (self.width, self.height),
                detail: format!("element mask of {} labels", mask.len()),
            });
        }
        self.element_mask = Some(mask);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn element_mask(&self) -> Option<&[ElementKind]> {
        self.element_mask.as_deref()
    }

    pub fn pixel(&self, c: usize, x: usize, y: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// `[3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.pixels.clone()).expect("extents checked")
    }

    /// Label used to group results: the layout for generated pages, the
    /// category otherwise.
    pub fn group(&self) -> &'static str {
        match self.layout {
            Some(l) => l.name(),
            None => self.category.name(),
        }
    }

    /// Bilinear resize; the element mask follows by nearest neighbour.
    pub fn resized(&self, width: usize, height: usize) -> Stimulus {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let plane = self.width * self.height;
        let mut pixels = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            let src = &self.pixels[c * plane..(c + 1) * plane];
            let out = imageops::resize_bilinear(src, self.width, self.height, width, height);
            pixels.extend(out.into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        let element_mask = self.element_mask.as_ref().map(|m| {
            let mut out = Vec::with_capacity(width * height);
            for y in 0..height {
                let sy = (y * self.height / height).min(self.height - 1);
                for x in 0..width {
                    let sx = (x * self.width / width).min(self.width - 1);
                    out.push(m[sy * self.width + sx]);
                }
            }
            out
        });
        Stimulus {
            id: self.id.clone(),
            width,
            height,
            pixels,
            category: self.category,
            layout: self.layout,
            element_mask,
        }
    }

    /// Grayscale luminance map (Rec. 601 weights).
    pub fn luminance(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        (0..plane)
            .map(|i| 0.299 * self.pixels[i] + 0.587 * self.pixels[plane + i] + 0.114 * self.pixels[2 * plane + i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fixation {
    pub x: usize,
    pub y: usize,
    pub observer: u32,
}

/// Gaze points recorded on one stimulus.
#[derive(Clone, Debug, PartialEq)]
pub struct FixationSet {
    pub stimulus_id: String,
    pub points: Vec<Fixation>,
}

impl FixationSet {
    pub fn new(stimulus_id: impl Into<String>, points: Vec<Fixation>) -> Self {
        FixationSet {
            stimulus_id: stimulus_id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<(), DataError> {
        match self.points.iter().find(|p| p.x >= width || p.y >= height) {
            Some(p) => Err(DataError::FixationOutOfBounds {
                x: p.x,
                y: p.y,
                width,
                height,
            }),
            None => Ok(()),
        }
    }

    /// Proportional rescale `floor(x * W' / W)`, which stays strictly in bounds.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> FixationSet {
        let points = self
            .points
            .iter()
            .map(|p| Fixation {
                x: rescale_coord(p.x, from.0, to.0),
                y: rescale_coord(p.y, from.1, to.1),
                observer: p.observer,
            })
            .collect();
        FixationSet {
            stimulus_id: self.stimulus_id.clone(),
            points,
        }
    }
}

pub fn rescale_coord(v: usize, from: usize, to: usize) -> usize {
    ((v as u128 * to as u128) / from as u128).min(to as u128 - 1) as usize
}

/// Ground-truth map: a sum of isotropic Gaussians at the fixations, max-normalized.
pub fn fixations_to_saliency(
    fix: &FixationSet,
    width: usize,
    height: usize,
    sigma_fix: f64,
) -> Result<SaliencyMap, DataError> {
    if !(sigma_fix > 0.0) {
        return Err(DataError::InvalidSigma(sigma_fix));
    }
    if fix.is_empty() {
        return Err(DataError::NoFixations(fix.stimulus_id.clone()));
    }
    fix.check_bounds(width, height)?;
    // Blobs are separable: accumulate point counts, then blur rows and columns.
    let mut counts = vec![0.0; width * height];
    for p in &fix.points {
        counts[p.y * width + p.x] += 1.0;
    }
    let radius = (4.0 * sigma_fix).ceil() as usize;
    let blurred = imageops::gaussian_blur_unnormalized(&counts, width, height, sigma_fix, radius);
    SaliencyMap::new(width, height, blurred)?.normalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fix(points: &[(usize, usize)]) -> FixationSet {
        FixationSet::new(
            "s",
            points
                .iter()
                .map(|&(x, y)| Fixation { x, y, observer: 0 })
                .collect(),
        )
    }

    #[test]
    fn single_fixation_peaks_at_its_pixel() {
        let m = fixations_to_saliency(&fix(&[(16, 12)]), 32, 24, 4.0).unwrap();
        assert_eq!(m.argmax(), (16, 12));
        assert_eq!(m.get(16, 12), 1.0);
    }

    #[test]
    fn duplicated_point_matches_single_point() {
        let a = fixations_to_saliency(&fix(&[(5, 7)]), 20, 20, 3.0).unwrap();
        let b = fixations_to_saliency(&fix(&[(5, 7), (5, 7)]), 20, 20, 3.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn far_apart_fixations_have_two_peaks() {
        let m = fixations_to_saliency(&fix(&[(10, 10), (40, 10)]), 50, 20, 2.0).unwrap();
        // Each peak also receives exp(-30^2 / 8) from the other blob: negligible.
        assert!((m.get(10, 10) - 1.0).abs() < 1e-12);
        assert!((m.get(40, 10) - 1.0).abs() < 1e-12);
        // Midpoint value exp(-15^2/8) * 2 is far below 0.1.
        assert!(m.get(25, 10) < 0.1);
    }

    #[test]
    fn gaussian_profile_matches_closed_form() {
        let m = fixations_to_saliency(&fix(&[(10, 10)]), 21, 21, 2.0).unwrap();
        let expected = (-(3.0f64 * 3.0 + 1.0) / (2.0 * 4.0)).exp();
        assert!((m.get(13, 11) - expected).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            fixations_to_saliency(&fix(&[]), 4, 4, 1.0),
            Err(DataError::NoFixations(_))
        ));
        assert!(fixations_to_saliency(&fix(&[(1, 1)]), 4, 4, 0.0).is_err());
        assert!(fixations_to_saliency(&fix(&[(4, 1)]), 4, 4, 1.0).is_err());
    }

    #[test]
    fn rescale_matches_floor_formula() {
        let f = fix(&[(12, 34), (1359, 767)]);
        let r = f.rescaled((1360, 768), (136, 77));
        assert_eq!((r.points[0].x, r.points[0].y), (1, 3));
        assert_eq!((r.points[1].x, r.points[1].y), (135, 76));
    }

    #[test]
    fn layout_names_round_trip() {
        for l in Layout::ALL {
            assert_eq!(l.name().parse::<Layout>().unwrap(), l);
        }
        assert!("diagonal".parse::<Layout>().is_err());
    }
}
