//! Synthetic scene generator for demos and tests: flat-colored shapes on
//! plain backgrounds with matching single-sentence captions.

use super::manifest::{Manifest, ManifestRecord};
use crate::error::Result;
use crate::rng::stream_rng;
use image::{Rgb, RgbImage};
use rand::Rng;
use std::path::Path;

const COLORS: &[(&str, [u8; 3])] = &[
    ("red", [200, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 200]),
    ("yellow", [220, 200, 50]),
    ("purple", [140, 60, 180]),
    ("orange", [230, 130, 30]),
    ("white", [235, 235, 235]),
    ("teal", [30, 150, 150]),
];

const SHAPES: &[&str] = &["circle", "square", "stripes", "cross"];

fn number_words(n: usize) -> String {
    const ONES: &[&str] = &[
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
        "eighteen", "nineteen",
    ];
    const TENS: &[&str] = &[
        "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
    ];
    match n {
        0..=19 => ONES[n].to_string(),
        20..=99 if n % 10 == 0 => TENS[n / 10].to_string(),
        20..=99 => format!("{} {}", TENS[n / 10], ONES[n % 10]),
        _ => n.to_string(),
    }
}

fn draw_scene(side: usize, shape: &str, fg: [u8; 3], bg: [u8; 3]) -> RgbImage {
    let s = side as i64;
    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let inside = match shape {
            "circle" => {
                let dx = x - s / 2;
                let dy = y - s / 2;
                dx * dx + dy * dy <= (s * s) / 16
            }
            "square" => x > s / 4 && x < 3 * s / 4 && y > s / 4 && y < 3 * s / 4,
            "stripes" => (x / ((s / 8).max(1))) % 2 == 0,
            "cross" => {
                (x - s / 2).abs() < s / 10 || (y - s / 2).abs() < s / 10
            }
            _ => false,
        };
        Rgb(if inside { fg } else { bg })
    })
}

/// Write `n` scenes plus `manifest.jsonl` into `dir`; returns the manifest
/// path. Deterministic in the seed; scene `i` of a given seed is stable.
pub fn generate(dir: &Path, n: usize, side: usize, seed: u64) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, "toy-scene", i as u64);
        let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
        let fg_idx = rng.gen_range(0..COLORS.len());
        let mut bg_idx = rng.gen_range(0..COLORS.len());
        if bg_idx == fg_idx {
            bg_idx = (bg_idx + 1) % COLORS.len();
        }
        let (fg_name, fg) = COLORS[fg_idx];
        let (bg_name, bg) = COLORS[bg_idx];
        let img = draw_scene(side, shape, fg, bg);
        let file = format!("scene_{i:03}.png");
        img.save(dir.join(&file))
            .map_err(|e| crate::error::Error::format(format!("png save: {e}")))?;
        // Two sentences: the first is what caption sampling should recover,
        // the second carries the scene number so every caption is distinct.
        records.push(ManifestRecord {
            image_path: file,
            caption: format!(
                "a {fg_name} {shape} on a {bg_name} background. \
                 this is scene {} of the set, a plain {bg_name} field behind one {fg_name} {shape}.",
                number_words(i + 1)
            ),
        });
    }
    let manifest_path = dir.join("manifest.jsonl");
    Manifest::write(&manifest_path, &records)?;
    Ok(manifest_path)
}
