//! Synthetic labeled images of upright glyphs. Every template is
//! rotation-asymmetric, so the rotation of a glyph is always recoverable.

use rand::Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed;

const ROWS: usize = 7;
const COLS: usize = 5;

#[rustfmt::skip]
const TEMPLATES: [[&str; ROWS]; 10] = [
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."], // F
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"], // L
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."], // P
    ["..###", "....#", "....#", "....#", "....#", "#...#", ".###."], // J
    ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."], // T
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."], // 4
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."], // 7
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"], // E
    ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"], // R
    ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."], // Y
];

pub const MAX_CLASSES: usize = TEMPLATES.len();
pub const MIN_IMAGE_SIZE: usize = 16;

fn on(class: usize, r: usize, c: usize) -> bool {
    TEMPLATES[class][r].as_bytes()[c] == b'#'
}

/// Renders one glyph into a `[channels, size, size]` buffer.
fn render<R: Rng>(class: usize, channels: usize, size: usize, rng: &mut R) -> Vec<f32> {
    let n = size as f64;
    let height = rng.random_range(0.5..0.8) * n;
    let width = height * COLS as f64 / ROWS as f64;
    let top = rng.random_range(0.0..=(n - height));
    let left = rng.random_range(0.0..=(n - width));
    let fg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.55..1.0)).collect();
    let bg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..0.35)).collect();

    // 3×3 supersampled coverage of the glyph per pixel
    let mut cover = vec![0.0f64; size * size];
    for i in 0..size {
        for j in 0..size {
            let mut hits = 0;
            for si in 0..3 {
                for sj in 0..3 {
                    let y = i as f64 + (si as f64 + 0.5) / 3.0;
                    let x = j as f64 + (sj as f64 + 0.5) / 3.0;
                    let gy = (y - top) / height * ROWS as f64;
                    let gx = (x - left) / width * COLS as f64;
                    if gy >= 0.0 && gx >= 0.0 && gy < ROWS as f64 && gx < COLS as f64 && on(class, gy as usize, gx as usize) {
                        hits += 1;
                    }
                }
            }
            cover[i * size + j] = hits as f64 / 9.0;
        }
    }
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        out.extend(cover.iter().map(|&a| (bg[c] + a * (fg[c] - bg[c])) as f32));
    }
    out
}

/// `n` glyph images with balanced, shuffled labels.
pub fn generate_synthetic_glyphs(
    n: usize,
    num_classes: usize,
    channels: usize,
    image_size: usize,
    data_seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::config(
            "num_classes",
            format!("glyph generator has {MAX_CLASSES} templates, asked for {num_classes}"),
        ));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::config(
            "image_size",
            format!("glyphs need at least {MIN_IMAGE_SIZE} pixels, got {image_size}"),
        ));
    }
    if channels == 0 {
        return Err(Error::config("channels", "must be positive"));
    }
    let mut rng = seed::rng(data_seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % num_classes) as u8).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let mut images = Vec::with_capacity(n * channels * image_size * image_size);
    for &y in &labels {
        images.extend(render(y as usize, channels, image_size, &mut rng));
    }
    Dataset::new(channels, image_size, num_classes, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_distinct_and_not_rotation_symmetric() {
        let grid = |k: usize| -> Vec<bool> {
            (0..ROWS).flat_map(|r| (0..COLS).map(move |c| on(k, r, c))).collect()
        };
        for a in 0..MAX_CLASSES {
            // a half-turn keeps the 5×7 frame; it must change every glyph
            let g = grid(a);
            let flipped: Vec<bool> = g.iter().rev().copied().collect();
            assert_ne!(g, flipped, "template {a}");
            for b in a + 1..MAX_CLASSES {
                assert_ne!(g, grid(b));
            }
        }
    }

    #[test]
    fn empty_deterministic_and_bounded() {
        assert!(generate_synthetic_glyphs(0, 5, 1, 16, 1).unwrap().is_empty());
        let a = generate_synthetic_glyphs(40, 5, 3, 16, 7).unwrap();
        let b = generate_synthetic_glyphs(40, 5, 3, 16, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.images().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((0..5).map(|k| a.labels().iter().filter(|&&y| y == k).count()).collect::<Vec<_>>(), vec![8; 5]);
    }

    #[test]
    fn limits_are_enforced() {
        assert!(generate_synthetic_glyphs(4, 11, 1, 16, 0).unwrap_err().is_config());
        assert!(generate_synthetic_glyphs(4, 5, 1, 12, 0).unwrap_err().is_config());
    }
}
