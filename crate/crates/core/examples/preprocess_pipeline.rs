//! Writes a few PGM images and a contour CSV, loads them through a manifest,
//! crops and normalizes the lesion patches, and augments one of them.

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transfer_lab::data::{
    augment, encode_pgm, write_contours, AugmentParams, ContourAnnotation, GrayImage, Label, Manifest,
};
use transfer_lab::{Error, Result};

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("transfer-lab-preprocess-{}", std::process::id()));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut annotations = Vec::new();
    let mut manifest = String::from("# images, one per line\ncontours = contours.csv\n");
    for i in 0..4 {
        let (w, h) = (96, 80);
        let (cx, cy) = (30.0 + 10.0 * i as f64, 40.0);
        let pixels = (0..w * h)
            .map(|k| {
                let (x, y) = ((k % w) as f64, (k / w) as f64);
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                0.2 + 0.6 * (-r2 / 120.0).exp()
            })
            .collect();
        let name = format!("mammo{i}.pgm");
        let path = dir.join(&name);
        fs::write(&path, encode_pgm(&GrayImage::new(w, h, pixels)?)).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{name}\n"));
        let (x, y) = (cx as usize, cy as usize);
        annotations.push(ContourAnnotation {
            image_id: format!("mammo{i}"),
            label: if i % 2 == 0 { Label::Benign } else { Label::Malignant },
            contour: vec![(x - 8, y - 6), (x + 9, y - 5), (x + 7, y + 8), (x - 6, y + 7)],
        });
    }
    let contours = dir.join("contours.csv");
    fs::write(&contours, write_contours(&annotations)).map_err(|e| Error::io(&contours, e))?;
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let patches = Manifest::load(&manifest_path)?.build_dataset(32)?;
    for p in &patches {
        println!(
            "{:<7} {:<9} {}x{}  mean {:+.1e}  std {:.6}",
            p.source_id,
            p.label.to_string(),
            p.size,
            p.size,
            p.mean(),
            p.std()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let augmented = augment(&patches[0], &AugmentParams::default(), &mut rng);
    let moved = patches[0]
        .pixels
        .iter()
        .zip(&augmented.pixels)
        .filter(|(a, b)| (*a - *b).abs() > 1e-9)
        .count();
    println!("augmentation changed {moved} of {} pixels", augmented.pixels.len());
    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(())
}
