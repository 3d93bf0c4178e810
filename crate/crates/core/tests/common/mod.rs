#![allow(dead_code)]

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use image::{Rgb, RgbImage};

/// One fixture image: its mask values in row-major order.
pub struct FixtureImage {
    pub stem: &'static str,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
}

/// Two-class split with a void strip, the VOC way.
pub fn split_mask(h: usize, w: usize, classes: (u8, u8)) -> Vec<u8> {
    (0..h * w)
        .map(|i| {
            let x = i % w;
            if x == w / 2 {
                255
            } else if x < w / 2 {
                classes.0
            } else {
                classes.1
            }
        })
        .collect()
}

pub fn write_mask(path: &Path, h: usize, w: usize, mask: &[u8], indexed: bool) {
    let file = BufWriter::new(File::create(path).unwrap());
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_depth(png::BitDepth::Eight);
    if indexed {
        enc.set_color(png::ColorType::Indexed);
        let mut palette = vec![0u8; 256 * 3];
        palette[3..6].copy_from_slice(&[128, 0, 0]);
        palette[6..9].copy_from_slice(&[0, 128, 0]);
        palette[255 * 3..].copy_from_slice(&[224, 224, 192]);
        enc.set_palette(palette);
    } else {
        enc.set_color(png::ColorType::Grayscale);
    }
    enc.write_header().unwrap().write_image_data(mask).unwrap();
}

/// Renders the mask classes as flat colours so a model can learn them.
pub fn write_image(path: &Path, h: usize, w: usize, mask: &[u8]) {
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = mask[y as usize * w + x as usize];
        match c {
            0 => Rgb([20, 20, 30]),
            1 => Rgb([200, 40, 40]),
            2 => Rgb([40, 200, 60]),
            _ => Rgb([128, 128, 128]),
        }
    });
    img.save(path).unwrap();
}

pub fn write_split(root: &Path, split: &str, stems: &[&str]) {
    let dir = root.join("ImageSets").join("Segmentation");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(format!("{split}.txt")), stems.join("\n") + "\n").unwrap();
}

/// Writes a VOC-layout tree; masks alternate between indexed and greyscale.
pub fn write_voc(root: &Path, images: &[FixtureImage], splits: &[(&str, &[&str])]) {
    fs::create_dir_all(root.join("JPEGImages")).unwrap();
    fs::create_dir_all(root.join("SegmentationClass")).unwrap();
    for (i, img) in images.iter().enumerate() {
        write_image(
            &root.join("JPEGImages").join(format!("{}.jpg", img.stem)),
            img.height,
            img.width,
            &img.mask,
        );
        write_mask(
            &root.join("SegmentationClass").join(format!("{}.png", img.stem)),
            img.height,
            img.width,
            &img.mask,
            i % 2 == 0,
        );
    }
    for (split, stems) in splits {
        write_split(root, split, stems);
    }
}

/// Three small images of different sizes, classes {0, 1, 2} plus void.
pub fn mini_voc(root: &Path) {
    let images = vec![
        FixtureImage {
            stem: "2007_000001",
            height: 40,
            width: 36,
            mask: split_mask(40, 36, (0, 1)),
        },
        FixtureImage {
            stem: "2007_000002",
            height: 32,
            width: 48,
            mask: split_mask(32, 48, (2, 0)),
        },
        FixtureImage {
            stem: "2007_000003",
            height: 36,
            width: 36,
            mask: split_mask(36, 36, (1, 2)),
        },
    ];
    write_voc(
        root,
        &images,
        &[
            ("train", &["2007_000001", "2007_000002", "2007_000003"]),
            ("val", &["2007_000003", "2007_000001"]),
        ],
    );
}
