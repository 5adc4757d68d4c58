use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vardim::PlanarImage;

use super::{Dataset, Input, Label, LabeledSample};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes an image file into a `(3, H, W)` tensor with values in `[0, 1]`.
/// Grayscale and palette images are replicated to three channels; alpha is dropped.
pub fn decode_image(path: &Path) -> Result<PlanarImage> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    PlanarImage::new(Tensor::from_vec(&[3, h, w], data)?, (0.0, 1.0))
}

/// Loads a directory-per-class image tree.
///
/// Classes are the subdirectories in lexicographic order; labels follow that
/// order. Directories without image files are skipped with a warning. Every
/// undecodable file is listed in the returned error.
pub fn load_image_folder(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            log::warn!("class directory {} has no images; skipped", dir.display());
            continue;
        }
        let label = class_names.len();
        for f in files {
            match decode_image(&f) {
                Ok(img) => {
                    let id = format!("{name}/{}", f.file_name().and_then(|n| n.to_str()).unwrap_or_default());
                    samples.push(LabeledSample::new(Input::Planar(img), Label::Class(label), id)?);
                }
                Err(e) => failures.push(e.to_string()),
            }
        }
        class_names.push(name);
    }
    if !failures.is_empty() {
        return Err(Error::Data(format!(
            "{} files could not be decoded:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    if class_names.is_empty() {
        return Err(Error::Data(format!("no class directories with images under {}", root.display())));
    }
    Ok(Dataset { samples, class_names })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn write_tree(root: &Path) {
        for (ci, class) in ["cat", "ant"].iter().enumerate() {
            let dir = root.join(class);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..3 {
                let img = RgbImage::from_pixel(4, 3, Rgb([10 * i as u8, ci as u8 * 100, 255]));
                img.save(dir.join(format!("{i}.png"))).unwrap();
            }
        }
        fs::create_dir_all(root.join("empty")).unwrap();
    }

    #[test]
    fn sorted_labels_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path());
        let a = load_image_folder(dir.path()).unwrap();
        assert_eq!(a.class_names, vec!["ant", "cat"]);
        assert_eq!(a.len(), 6);
        assert_eq!(a.samples[0].id, "ant/0.png");
        assert_eq!(a.samples[0].class(), Some(0));
        assert_eq!(a.samples[5].class(), Some(1));
        let b = load_image_folder(dir.path()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grayscale_replicated() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("g")).unwrap();
        GrayImage::from_pixel(2, 2, Luma([51])).save(dir.path().join("g/a.png")).unwrap();
        let ds = load_image_folder(dir.path()).unwrap();
        let Input::Planar(p) = &ds.samples[0].input else { panic!() };
        assert!(p.tensor().data().iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn undecodable_files_itemized() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("x")).unwrap();
        fs::write(dir.path().join("x/bad1.png"), b"nope").unwrap();
        fs::write(dir.path().join("x/bad2.jpg"), b"nope").unwrap();
        let msg = load_image_folder(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("bad1.png") && msg.contains("bad2.jpg"), "{msg}");
    }
}
