//! Procedural Web-page screenshots with fixations drawn from layout-specific
//! mixtures.
//!
//! Every page is a light background with rectangular elements. Text blocks
//! are rows of high-frequency glyph strokes; picture blocks are smooth colour
//! gradients. Fixations come from a mixture over named regions:
//!
//! | layout             | components (weight)                                               |
//! |--------------------|-------------------------------------------------------------------|
//! | `F-shaped-textual` | top bar 0.36, second bar 0.28, left stem 0.16, other text 0.20    |
//! | `center-pictorial` | central picture 0.75, other pictures 0.25                         |
//! | `sidebar-mixed`    | sidebar 0.35, top-left header 0.30, main content 0.35             |
//!
//! The F components together outweigh the remaining text 4:1. Within the F
//! bars fixations thin out from left to right, and within the stem from top
//! to bottom.
//!
//! Each element also carries visible focal points: highlighted words in text
//! and the bright spot of a picture. A share of the fixations on an element
//! lands near one of its focal points, so fixations follow the page content
//! and not only the layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Category, ElementKind, Fixation, FixationSet, Layout, Stimulus};
use crate::seed::sub_seed;

pub const DEFAULT_WIDTH: usize = 128;
pub const DEFAULT_HEIGHT: usize = 96;
pub const OBSERVERS: u32 = 11;
pub const FIXATIONS_PER_OBSERVER: usize = 18;

/// Share of fixations drawn from the F components of an F-shaped page.
pub const F_COMPONENT_WEIGHT: f64 = 0.8;
/// Share of fixations on the central picture of a center-pictorial page.
pub const CENTER_COMPONENT_WEIGHT: f64 = 0.75;
/// Share of fixations on an element drawn near one of its focal points.
pub const FOCUS_SHARE: f64 = 0.7;
/// Spread of focal fixations, as a fraction of the page width.
pub const FOCUS_SIGMA: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    fn frac(w: usize, h: usize, fx0: f64, fy0: f64, fx1: f64, fy1: f64) -> Rect {
        let cx = |f: f64| ((f * w as f64).round() as usize).min(w);
        let cy = |f: f64| ((f * h as f64).round() as usize).min(h);
        let r = Rect {
            x0: cx(fx0),
            y0: cy(fy0),
            x1: cx(fx1),
            y1: cy(fy1),
        };
        Rect {
            x1: r.x1.max(r.x0 + 1).min(w),
            y1: r.y1.max(r.y0 + 1).min(h),
            ..r
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn width(&self) -> usize {
        self.x1 - self.x0
    }

    fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// How fixations spread inside a component rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Spread {
    Uniform,
    /// `x = x0 + w * u^p`: density decays to the right.
    LeftDecay(f64),
    /// `y = y0 + h * u^p`: density decays downwards.
    TopDecay(f64),
    /// Gaussian around the centre with `sigma = frac * size`, clipped.
    Central(f64),
}

type Point = (usize, usize);

#[derive(Clone, Debug)]
struct Component {
    weight: f64,
    rects: Vec<Rect>,
    /// Focal points of each rectangle.
    foci: Vec<Vec<Point>>,
    spread: Spread,
}

impl Component {
    fn new(weight: f64, parts: Vec<(Rect, Vec<Point>)>, spread: Spread) -> Self {
        let (rects, foci) = parts.into_iter().unzip();
        Component {
            weight,
            rects,
            foci,
            spread,
        }
    }
}

/// Part of a text block where highlighted words may appear, as fractions of
/// its width and height measured from the top-left corner.
#[derive(Clone, Copy, Debug)]
struct Zone(f64, f64);

const ANYWHERE: Zone = Zone(1.0, 1.0);

/// A rendered page plus the mixture it samples fixations from.
#[derive(Clone, Debug)]
pub struct SynthPage {
    pub stimulus: Stimulus,
    pub fixations: FixationSet,
    /// Fixation count per mixture component, in table order.
    pub component_counts: Vec<usize>,
    pub component_weights: Vec<f64>,
}

/// Deterministic page for `seed` at the default 128x96 resolution.
pub fn synth_page(seed: u64, layout: Layout) -> (Stimulus, FixationSet) {
    let p = synth_page_detailed(seed, layout, DEFAULT_WIDTH, DEFAULT_HEIGHT);
    (p.stimulus, p.fixations)
}

pub fn synth_page_sized(seed: u64, layout: Layout, width: usize, height: usize) -> (Stimulus, FixationSet) {
    let p = synth_page_detailed(seed, layout, width, height);
    (p.stimulus, p.fixations)
}

pub fn synth_page_detailed(seed: u64, layout: Layout, width: usize, height: usize) -> SynthPage {
    let tag = layout.index() as u64;
    let mut render_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 100 + tag));
    let mut fix_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 200 + tag));
    let mut canvas = Canvas::new(width, height, &mut render_rng);
    let components = match layout {
        Layout::FShapedTextual => f_shaped(&mut canvas, &mut render_rng),
        Layout::CenterPictorial => center_pictorial(&mut canvas, &mut render_rng),
        Layout::SidebarMixed => sidebar_mixed(&mut canvas, &mut render_rng),
    };
    let id = format!("{}-{seed}", layout.name());
    let (points, component_counts) = sample_fixations(&components, width, height, &mut fix_rng);
    let stimulus = Stimulus::new(id.clone(), width, height, canvas.pixels, Category::Synthetic)
        .expect("canvas values clamped to [0, 1]")
        .with_layout(layout)
        .with_mask(canvas.mask)
        .expect("mask matches canvas");
    SynthPage {
        stimulus,
        fixations: FixationSet::new(id, points),
        component_counts,
        component_weights: components.iter().map(|c| c.weight).collect(),
    }
}

struct Canvas {
    w: usize,
    h: usize,
    pixels: Vec<f64>,
    mask: Vec<ElementKind>,
}

impl Canvas {
    fn new(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = rng.gen_range(0.90..0.97);
        let tint: [f64; 3] = [
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
        ];
        let plane = w * h;
        let mut pixels = vec![0.0; 3 * plane];
        for c in 0..3 {
            pixels[c * plane..(c + 1) * plane].fill((base + tint[c]).clamp(0.0, 1.0));
        }
        Canvas {
            w,
            h,
            pixels,
            mask: vec![ElementKind::Background; plane],
        }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [f64; 3], kind: ElementKind) {
        let plane = self.w * self.h;
        let i = y * self.w + x;
        for (c, v) in rgb.iter().enumerate() {
            self.pixels[c * plane + i] = v.clamp(0.0, 1.0);
        }
        self.mask[i] = kind;
    }

    fn rect(&self, fx0: f64, fy0: f64, fx1: f64, fy1: f64) -> Rect {
        Rect::frac(self.w, self.h, fx0, fy0, fx1, fy1)
    }

    /// Rows of glyph strokes: line pitch 4 px with 2 px of ink, glyphs 2 px
    /// wide with 1 px spacing, words separated by 3 px. A few words inside
    /// `zone` are drawn solid in a saturated colour; their centres are returned.
    fn text(&mut self, r: Rect, zone: Zone, rng: &mut ChaCha8Rng) -> Vec<Point> {
        let ink_level = rng.gen_range(0.05..0.3);
        let hue = [
            ink_level + rng.gen_range(0.0..0.15),
            ink_level,
            ink_level + rng.gen_range(0.0..0.2),
        ];
        let paper = self.background_at(r.x0, r.y0);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                self.put(x, y, paper, ElementKind::Text);
            }
        }
        let mut words: Vec<(usize, usize, usize)> = Vec::new();
        let mut line_y = r.y0;
        while line_y + 2 <= r.y1 {
            let mut x = r.x0;
            // Ragged right edge
            let line_end = r.x1 - rng.gen_range(0..=(r.width() / 6).max(1)).min(r.width() - 1);
            while x < line_end {
                let word = rng.gen_range(2..7);
                let start = x;
                for _ in 0..word {
                    if x + 2 > line_end {
                        break;
                    }
                    let glyph: u8 = rng.gen_range(1..16);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            if glyph & (1 << (dy * 2 + dx)) != 0 {
                                self.put(x + dx, line_y + dy, hue, ElementKind::Text);
                            }
                        }
                    }
                    x += 3;
                }
                if x > start {
                    words.push((start, line_y, x - 1));
                }
                x += 3;
            }
            line_y += 4;
        }
        let zx = r.x0 as f64 + zone.0 * r.width() as f64;
        let zy = r.y0 as f64 + zone.1 * r.height() as f64;
        let eligible: Vec<_> = words
            .iter()
            .filter(|(x0, y, x1)| ((x0 + x1) as f64) / 2.0 < zx && (*y as f64) < zy)
            .copied()
            .collect();
        let n = ((r.width() * r.height()) / 600).clamp(1, 4).min(eligible.len());
        let colour = [
            [0.1, 0.25, 0.85],
            [0.8, 0.1, 0.1],
            [0.1, 0.6, 0.2],
        ][rng.gen_range(0..3)];
        let mut foci = Vec::new();
        for i in rand::seq::index::sample(rng, eligible.len(), n) {
            let (x0, y, x1) = eligible[i];
            for yy in y..(y + 2).min(r.y1) {
                for xx in x0..x1 {
                    self.put(xx, yy, colour, ElementKind::Text);
                }
            }
            foci.push(((x0 + x1) / 2, y));
        }
        foci
    }

    /// Smooth two-colour gradient with a bright radial highlight; returns the
    /// highlight centre.
    fn picture(&mut self, r: Rect, rng: &mut ChaCha8Rng) -> Vec<Point> {
        let mut col = || [rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6)];
        let (a, b) = (col(), col());
        let hl = [1.0, rng.gen_range(0.85..1.0), rng.gen_range(0.3..0.7)];
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (cx, cy) = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75));
        let (w, h) = (r.width().max(1) as f64, r.height().max(1) as f64);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let u = (x - r.x0) as f64 / w;
                let v = (y - r.y0) as f64 / h;
                let t = (0.5 + 0.5 * ((u - 0.5) * angle.cos() + (v - 0.5) * angle.sin())).clamp(0.0, 1.0);
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                let g = (-d2 / 0.02).exp() * 0.9;
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    rgb[c] = (a[c] * (1.0 - t) + b[c] * t) * (1.0 - g) + hl[c] * g;
                }
                self.put(x, y, rgb, ElementKind::Picture);
            }
        }
        let fx = r.x0 + ((cx * w) as usize).min(r.width() - 1);
        let fy = r.y0 + ((cy * h) as usize).min(r.height() - 1);
        vec![(fx, fy)]
    }

    fn background_at(&self, x: usize, y: usize) -> [f64; 3] {
        let plane = self.w * self.h;
        let i = y * self.w + x;
        [self.pixels[i], self.pixels[plane + i], self.pixels[2 * plane + i]]
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    rng.gen_range(-amount..=amount)
}

fn f_shaped(cv: &mut Canvas, rng: &mut ChaCha8Rng) -> Vec<Component> {
    let m = 0.03;
    let top = cv.rect(m, 0.04 + jitter(rng, 0.01), 0.56 + jitter(rng, 0.03), 0.17 + jitter(rng, 0.01));
    let second = cv.rect(m, 0.22 + jitter(rng, 0.01), 0.45 + jitter(rng, 0.03), 0.32 + jitter(rng, 0.01));
    let stem = cv.rect(m, 0.37 + jitter(rng, 0.01), 0.24 + jitter(rng, 0.02), 0.82 + jitter(rng, 0.04));
    let top_f = cv.text(top, Zone(0.75, 1.0), rng);
    let second_f = cv.text(second, ANYWHERE, rng);
    let stem_f = cv.text(stem, Zone(1.0, 0.2), rng);
    // Remaining text: a top-right strip and a grid of blocks in the lower right.
    let mut rest = vec![cv.rect(0.64 + jitter(rng, 0.02), 0.05, 0.96, 0.15 + jitter(rng, 0.02))];
    let cols = rng.gen_range(1..=2);
    let rows = rng.gen_range(2..=3);
    let (gx0, gx1, gy0, gy1) = (0.32, 0.96, 0.40, 0.95);
    for i in 0..cols {
        for j in 0..rows {
            let cw = (gx1 - gx0) / cols as f64;
            let ch = (gy1 - gy0) / rows as f64;
            let x0 = gx0 + i as f64 * cw + rng.gen_range(0.0..0.03);
            let y0 = gy0 + j as f64 * ch + rng.gen_range(0.0..0.02);
            rest.push(cv.rect(x0, y0, x0 + cw * rng.gen_range(0.7..0.9), y0 + ch * rng.gen_range(0.55..0.8)));
        }
    }
    // One block of the grid becomes a small picture.
    let pic_idx = rng.gen_range(1..rest.len());
    let rest: Vec<(Rect, Vec<Point>)> = rest
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let f = if i == pic_idx {
                cv.picture(r, rng)
            } else {
                cv.text(r, ANYWHERE, rng)
            };
            (r, f)
        })
        .collect();
    vec![
        Component::new(0.36, vec![(top, top_f)], Spread::LeftDecay(2.0)),
        Component::new(0.28, vec![(second, second_f)], Spread::Uniform),
        Component::new(0.16, vec![(stem, stem_f)], Spread::TopDecay(3.0)),
        Component::new(0.20, rest, Spread::Uniform),
    ]
}

fn center_pictorial(cv: &mut Canvas, rng: &mut ChaCha8Rng) -> Vec<Component> {
    let (cx, cy) = (0.5 + jitter(rng, 0.05), 0.52 + jitter(rng, 0.05));
    let (hw, hh) = (0.2 + jitter(rng, 0.03), 0.2 + jitter(rng, 0.03));
    let center = cv.rect(cx - hw, cy - hh, cx + hw, cy + hh);
    let center_f = cv.picture(center, rng);
    // Navigation text along the top.
    let nav = cv.rect(0.1 + jitter(rng, 0.03), 0.03, 0.9 + jitter(rng, 0.03), 0.09);
    cv.text(nav, ANYWHERE, rng);
    // Side pictures left and right of the centre, plus captions.
    let mut others = Vec::new();
    for side in [0.0, 1.0] {
        let n = rng.gen_range(1..=2);
        for k in 0..n {
            let span = 0.72 / n as f64;
            let y0 = 0.18 + k as f64 * span + rng.gen_range(0.0..0.04);
            let (x0, x1) = if side == 0.0 {
                (0.03 + rng.gen_range(0.0..0.03), 0.22 + rng.gen_range(-0.02..0.02))
            } else {
                (0.78 + rng.gen_range(-0.02..0.02), 0.97 - rng.gen_range(0.0..0.03))
            };
            let r = cv.rect(x0, y0, x1, y0 + span * rng.gen_range(0.55..0.75));
            let f = cv.picture(r, rng);
            others.push((r, f));
        }
    }
    let caption = cv.rect(cx - hw, cy + hh + 0.03, cx + hw * rng.gen_range(0.3..0.9), cy + hh + 0.1);
    if caption.y1 < cv.h {
        cv.text(caption, ANYWHERE, rng);
    }
    vec![
        Component::new(CENTER_COMPONENT_WEIGHT, vec![(center, center_f)], Spread::Central(0.25)),
        Component::new(1.0 - CENTER_COMPONENT_WEIGHT, others, Spread::Uniform),
    ]
}

fn sidebar_mixed(cv: &mut Canvas, rng: &mut ChaCha8Rng) -> Vec<Component> {
    let left = rng.gen_bool(0.5);
    let (sx0, sx1) = if left { (0.02, 0.22) } else { (0.78, 0.98) };
    let sidebar = cv.rect(sx0, 0.2 + jitter(rng, 0.02), sx1, 0.92 + jitter(rng, 0.03));
    let sidebar_f = cv.text(sidebar, Zone(1.0, 0.6), rng);
    let logo = cv.rect(0.02, 0.03, 0.16 + jitter(rng, 0.02), 0.14);
    let logo_f = cv.picture(logo, rng);
    let header = cv.rect(0.19, 0.05, 0.48 + jitter(rng, 0.05), 0.13);
    let header_f = cv.text(header, ANYWHERE, rng);
    // Main content between the sidebar and the opposite margin.
    let (mx0, mx1) = if left { (0.27, 0.97) } else { (0.03, 0.73) };
    let mut content = Vec::new();
    let rows = 2;
    let cols = 2;
    for j in 0..rows {
        for i in 0..cols {
            let cw = (mx1 - mx0) / cols as f64;
            let ch = 0.7 / rows as f64;
            let x0 = mx0 + i as f64 * cw + rng.gen_range(0.0..0.03);
            let y0 = 0.22 + j as f64 * ch + rng.gen_range(0.0..0.03);
            let r = cv.rect(x0, y0, x0 + cw * rng.gen_range(0.75..0.9), y0 + ch * rng.gen_range(0.6..0.85));
            let f = if (i + j + rng.gen_range(0..2)) % 2 == 0 {
                cv.picture(r, rng)
            } else {
                cv.text(r, ANYWHERE, rng)
            };
            content.push((r, f));
        }
    }
    vec![
        Component::new(0.35, vec![(sidebar, sidebar_f)], Spread::TopDecay(1.5)),
        Component::new(0.30, vec![(logo, logo_f), (header, header_f)], Spread::Uniform),
        Component::new(0.35, content, Spread::Uniform),
    ]
}

fn sample_fixations(
    components: &[Component],
    w: usize,
    h: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Fixation>, Vec<usize>) {
    let mut points = Vec::new();
    let mut counts = vec![0usize; components.len()];
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for observer in 0..OBSERVERS {
        for _ in 0..FIXATIONS_PER_OBSERVER {
            let mut u = rng.gen_range(0.0..total);
            let mut k = 0;
            while k + 1 < components.len() && u >= components[k].weight {
                u -= components[k].weight;
                k += 1;
            }
            let comp = &components[k];
            // Larger rectangles draw proportionally more of the component's fixations.
            let areas: Vec<f64> = comp.rects.iter().map(|r| (r.width() * r.height()) as f64).collect();
            let mut a = rng.gen_range(0.0..areas.iter().sum::<f64>());
            let mut ri = 0;
            while ri + 1 < areas.len() && a >= areas[ri] {
                a -= areas[ri];
                ri += 1;
            }
            let r = comp.rects[ri];
            let foci = &comp.foci[ri];
            let (x, y) = if !foci.is_empty() && rng.gen_bool(FOCUS_SHARE) {
                near(r, foci[rng.gen_range(0..foci.len())], FOCUS_SIGMA * w as f64, rng)
            } else {
                sample_in(r, comp.spread, rng)
            };
            counts[k] += 1;
            points.push(Fixation {
                x: x.min(w - 1),
                y: y.min(h - 1),
                observer,
            });
        }
    }
    (points, counts)
}

/// Gaussian around `p`, clipped to `r`.
fn near(r: Rect, p: Point, sigma: f64, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let normal = rand_distr::StandardNormal;
    let dx: f64 = rng.sample(normal);
    let dy: f64 = rng.sample(normal);
    let clip = |v: f64, lo: usize, hi: usize| (v.round().max(lo as f64) as usize).min(hi - 1);
    (
        clip(p.0 as f64 + dx * sigma, r.x0, r.x1),
        clip(p.1 as f64 + dy * sigma, r.y0, r.y1),
    )
}

fn sample_in(r: Rect, spread: Spread, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let (w, h) = (r.width() as f64, r.height() as f64);
    let pick = |lo: usize, span: f64, t: f64| lo + ((t * span) as usize).min(span as usize - 1);
    match spread {
        Spread::Uniform => (pick(r.x0, w, rng.gen()), pick(r.y0, h, rng.gen())),
        Spread::LeftDecay(p) => {
            let t: f64 = rng.gen();
            (pick(r.x0, w, t.powf(p)), pick(r.y0, h, rng.gen()))
        }
        Spread::TopDecay(p) => {
            let t: f64 = rng.gen();
            (pick(r.x0, w, rng.gen()), pick(r.y0, h, t.powf(p)))
        }
        Spread::Central(frac) => {
            let normal = rand_distr::StandardNormal;
            let dx: f64 = rng.sample(normal);
            let dy: f64 = rng.sample(normal);
            let fx = (0.5 + dx * frac).clamp(0.0, 0.999);
            let fy = (0.5 + dy * frac).clamp(0.0, 0.999);
            (pick(r.x0, w, fx), pick(r.y0, h, fy))
        }
    }
}
