use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::DynamicImage;

use super::npt::{read_npt, write_npt};
use super::{ClassPool, Dataset, Role, Sample};
use crate::autodiff::Array;
use crate::error::{Error, Result};

/// How a class-per-subdirectory tree is decoded.
#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// PNGs are resized to `image_size × image_size`.
    pub image_size: u32,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: u8,
    /// Classes with fewer samples are rejected.
    pub min_per_class: usize,
    pub role: Role,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            image_size: 84,
            channels: 3,
            min_per_class: 1,
            role: Role::MetaTrain,
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

fn decode_png(path: &Path, opts: &LoadOptions) -> Result<Array> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let size = opts.image_size;
    let resize = |img: DynamicImage| {
        if img.width() == size && img.height() == size {
            img
        } else {
            DynamicImage::from(imageops::resize(
                &img.to_rgba8(),
                size,
                size,
                FilterType::Triangle,
            ))
        }
    };
    let img = resize(img);
    let (c, raw) = match opts.channels {
        1 => (1, img.to_luma8().into_raw()),
        3 => (3, img.to_rgb8().into_raw()),
        n => return Err(Error::Config(format!("image channels must be 1 or 3, got {n}"))),
    };
    let hw = (size * size) as usize;
    let mut data = vec![0.0; c * hw];
    for (p, px) in raw.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * hw + p] = v as f64 / 255.0;
        }
    }
    Array::new(vec![c, size as usize, size as usize], data)
}

/// Loads `dir/<class>/<sample>.{png,npt}`. Class ids are subdirectory names,
/// source ids are `<class>/<file stem>`. `.npt` payloads are taken as stored.
pub fn load_directory(dir: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if opts.image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    let mut pools = Vec::new();
    for class_dir in sorted_entries(dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        let id = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut samples = Vec::new();
        for file in sorted_entries(&class_dir)? {
            let data = match extension(&file).as_deref() {
                Some("png") => decode_png(&file, opts)?,
                Some("npt") => read_npt(&file)?,
                _ => continue,
            };
            let stem = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            samples.push(Sample {
                data,
                source: format!("{id}/{stem}"),
            });
        }
        if samples.len() < opts.min_per_class.max(1) {
            return Err(Error::Validation(format!(
                "class `{id}` has {} samples, at least {} required",
                samples.len(),
                opts.min_per_class.max(1)
            )));
        }
        pools.push(ClassPool { id, samples });
    }
    if pools.is_empty() {
        return Err(Error::Validation(format!(
            "no class subdirectories in {}",
            dir.display()
        )));
    }
    Dataset::new(opts.role, pools)
}

/// Writes a dataset as a `.npt` tree readable by [`load_directory`].
/// Returns the number of files written.
pub fn write_tree(dataset: &Dataset, dir: &Path) -> Result<usize> {
    let mut written = 0;
    for class in dataset.classes() {
        let class_dir = dir.join(&class.id);
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        for sample in &class.samples {
            let stem = sample.source.rsplit('/').next().unwrap_or(&sample.source);
            write_npt(&class_dir.join(format!("{stem}.npt")), &sample.data)?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn write_gray(path: &Path, side: u32, value: u8) {
        GrayImage::from_pixel(side, side, Luma([value]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn two_classes_of_ten() {
        let tmp = tempfile::tempdir().unwrap();
        for class in ["b", "a"] {
            let d = tmp.path().join(class);
            fs::create_dir(&d).unwrap();
            for i in 0..10 {
                write_npt(&d.join(format!("{i:02}.npt")), &Array::vector(vec![i as f64; 3])).unwrap();
            }
        }
        let ds = load_directory(tmp.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.class_ids().collect::<Vec<_>>(), ["a", "b"]);
        assert!(ds.classes().iter().all(|c| c.samples.len() == 10));
        assert_eq!(ds.classes()[0].samples[3].source, "a/03");
    }

    #[test]
    fn empty_directory_is_validation_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_directory(tmp.path(), &LoadOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn small_class_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("tiny");
        fs::create_dir(&d).unwrap();
        write_npt(&d.join("0.npt"), &Array::vector(vec![0.0])).unwrap();
        let opts = LoadOptions {
            min_per_class: 3,
            ..LoadOptions::default()
        };
        match load_directory(tmp.path(), &opts) {
            Err(Error::Validation(msg)) => assert!(msg.contains("`tiny` has 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mid_gray_png_decodes_to_128_over_255() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("gray");
        fs::create_dir(&d).unwrap();
        write_gray(&d.join("x.png"), 84, 128);
        let ds = load_directory(tmp.path(), &LoadOptions::default()).unwrap();
        let x = &ds.classes()[0].samples[0].data;
        assert_eq!(x.shape(), &[3, 84, 84]);
        assert!(x.data().iter().all(|&v| (v - 0.50196).abs() < 1e-5));
    }

    #[test]
    fn png_is_resized_and_channel_major() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("c");
        fs::create_dir(&d).unwrap();
        RgbImage::from_pixel(20, 20, Rgb([255, 0, 51]))
            .save(d.join("p.png"))
            .unwrap();
        let opts = LoadOptions {
            image_size: 8,
            ..LoadOptions::default()
        };
        let ds = load_directory(tmp.path(), &opts).unwrap();
        let x = &ds.classes()[0].samples[0].data;
        assert_eq!(x.shape(), &[3, 8, 8]);
        assert!(x.data()[..64].iter().all(|&v| v == 1.0));
        assert!(x.data()[64..128].iter().all(|&v| v == 0.0));
        assert!(x.data()[128..].iter().all(|&v| v == 0.2));
    }

    #[test]
    fn unreadable_file_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("c");
        fs::create_dir(&d).unwrap();
        fs::write(d.join("broken.png"), b"not a png").unwrap();
        let err = load_directory(tmp.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn tree_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let pools = (0..2)
            .map(|c| ClassPool {
                id: format!("k{c}"),
                samples: (0..3)
                    .map(|i| Sample {
                        data: Array::vector(vec![c as f64 + 0.25, i as f64]),
                        source: format!("k{c}/{i:04}"),
                    })
                    .collect(),
            })
            .collect();
        let ds = Dataset::new(Role::MetaTest, pools).unwrap();
        assert_eq!(write_tree(&ds, tmp.path()).unwrap(), 6);
        let opts = LoadOptions {
            role: Role::MetaTest,
            ..LoadOptions::default()
        };
        let back = load_directory(tmp.path(), &opts).unwrap();
        for (a, b) in ds.classes().iter().zip(back.classes()) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(x.source, y.source);
                assert!(x.data.bit_eq(&y.data));
            }
        }
    }
}
