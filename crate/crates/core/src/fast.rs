//! FAST-9 segment-test corner detection with score-ranked non-maximum
//! suppression. Used to seed new patch features.

use crate::img::Image;
use nalgebra::Vector2;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
pub const CIRCLE: [(i32, i32); 16] = [
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
];

pub const ARC_LENGTH: usize = 9;

#[derive(Debug, Clone, Copy)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

#[inline]
fn circle_values(img: &Image<f32>, x: usize, y: usize) -> [f64; 16] {
    let mut vals = [0.0f64; 16];
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        vals[i] = *img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64;
    }
    vals
}

fn is_corner(vals: &[f64; 16], center: f64, threshold: f64) -> bool {
    // wrap-around run of >= 9 consistently brighter or darker pixels
    let bright: Vec<bool> = vals.iter().map(|&v| v > center + threshold).collect();
    let dark: Vec<bool> = vals.iter().map(|&v| v < center - threshold).collect();
    for mask in [&bright, &dark] {
        let mut run = 0usize;
        // doubling the circle handles wrap-around runs
        for i in 0..32 {
            if mask[i % 16] {
                run += 1;
                if run >= ARC_LENGTH {
                    return true;
                }
            } else {
                run = 0;
            }
        }
    }
    false
}

/// Sum of absolute differences beyond the threshold; ranks corners for NMS.
fn corner_score(vals: &[f64; 16], center: f64, threshold: f64) -> f64 {
    vals.iter()
        .map(|&v| {
            let d = (v - center).abs();
            if d > threshold { d - threshold } else { 0.0 }
        })
        .sum()
}

/// Detect FAST-9 corners at least `border` pixels from the image edge.
pub fn detect(img: &Image<f32>, threshold: f64, border: usize) -> Vec<Corner> {
    let border = border.max(3);
    let mut corners = Vec::new();
    if img.width < 2 * border + 1 || img.height < 2 * border + 1 {
        return corners;
    }
    for y in border..img.height - border {
        for x in border..img.width - border {
            let center = *img.get(x, y) as f64;
            let vals = circle_values(img, x, y);
            if is_corner(&vals, center, threshold) {
                corners.push(Corner { x, y, score: corner_score(&vals, center, threshold) });
            }
        }
    }
    corners
}

/// Greedy non-maximum suppression: strongest corners first, rejecting any
/// candidate within `min_spacing` (Euclidean) of an accepted or pre-existing
/// anchor. Ties break on scan order for determinism.
pub fn suppress(
    mut corners: Vec<Corner>,
    min_spacing: f64,
    existing_anchors: &[Vector2<f64>],
    limit: usize,
) -> Vec<Corner> {
    corners.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| (a.y, a.x).cmp(&(b.y, b.x)))
    });
    let mut accepted: Vec<Corner> = Vec::new();
    let spacing2 = min_spacing * min_spacing;
    for c in corners {
        if accepted.len() >= limit {
            break;
        }
        let p = Vector2::new(c.x as f64, c.y as f64);
        let clash = existing_anchors.iter().any(|q| (p - q).norm_squared() < spacing2)
            || accepted
                .iter()
                .any(|a| (p - Vector2::new(a.x as f64, a.y as f64)).norm_squared() < spacing2);
        if !clash {
            accepted.push(c);
        }
    }
    accepted
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_image_has_no_corners() {
        let img = Image::new(64, 48, 100.0f32);
        assert!(detect(&img, 20.0, 4).is_empty());
    }

    #[test]
    fn bright_dot_is_detected_once_after_nms() {
        let mut img = Image::new(64, 48, 20.0f32);
        for dy in -1..=1i32 {
            for dx in -1..=1i32 {
                img.set((30 + dx) as usize, (20 + dy) as usize, 250.0);
            }
        }
        let corners = suppress(detect(&img, 20.0, 4), 16.0, &[], 100);
        assert_eq!(corners.len(), 1);
        let c = &corners[0];
        assert!((c.x as f64 - 30.0).abs() <= 1.0 && (c.y as f64 - 20.0).abs() <= 1.0);
    }

    /// Independent FAST-9 reference: tests every arc start explicitly.
    fn reference_is_corner(img: &Image<f32>, x: usize, y: usize, t: f64) -> bool {
        let c = *img.get(x, y) as f64;
        let vals = circle_values(img, x, y);
        'outer_b: for start in 0..16 {
            for k in 0..ARC_LENGTH {
                if vals[(start + k) % 16] <= c + t {
                    continue 'outer_b;
                }
            }
            return true;
        }
        'outer_d: for start in 0..16 {
            for k in 0..ARC_LENGTH {
                if vals[(start + k) % 16] >= c - t {
                    continue 'outer_d;
                }
            }
            return true;
        }
        false
    }

    #[test]
    fn matches_reference_detector_on_square_corners() {
        // isolated dark squares on a bright background: each square corner
        // sees a ~3/4-bright circle, which passes the 9-of-16 segment test
        let mut img = Image::new(96, 72, 220.0f32);
        for (sx, sy) in [(10usize, 10usize), (40, 20), (70, 40), (20, 50)] {
            for y in sy..sy + 8 {
                for x in sx..sx + 8 {
                    img.set(x, y, 30.0);
                }
            }
        }
        let mine: Vec<(usize, usize)> =
            detect(&img, 20.0, 4).iter().map(|c| (c.x, c.y)).collect();
        let mut reference = Vec::new();
        for y in 4..68 {
            for x in 4..92 {
                if reference_is_corner(&img, x, y, 20.0) {
                    reference.push((x, y));
                }
            }
        }
        assert!(!reference.is_empty());
        assert_eq!(mine, reference);
    }

    #[test]
    fn nms_enforces_spacing_and_existing_anchors() {
        let mut img = Image::new(96, 48, 20.0f32);
        for cx in [20usize, 26, 60] {
            for dy in -1..=1i32 {
                for dx in -1..=1i32 {
                    img.set((cx as i32 + dx) as usize, (24 + dy) as usize, 250.0);
                }
            }
        }
        let corners = suppress(detect(&img, 20.0, 4), 16.0, &[], 100);
        // the two dots at x=20 and x=26 are within 16 px of each other
        assert_eq!(corners.len(), 2);
        // an existing anchor blocks the x=60 dot
        let corners = suppress(detect(&img, 20.0, 4), 16.0, &[Vector2::new(58.0, 24.0)], 100);
        assert_eq!(corners.len(), 1);
    }
}
