//! Labeled image datasets and the PPM (P6) codec.

use std::fs;
use std::path::{Path, PathBuf};

use super::image::ImageRgb;
use crate::error::{Error, Result};

/// One dataset entry; `id` is the path relative to the dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub image: ImageRgb,
}

/// Images with (evaluation-only) labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    /// Labels of every item; fails when any item is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .map(|i| {
                i.image
                    .label()
                    .ok_or_else(|| Error::Input(format!("item {} has no label", i.id)))
            })
            .collect()
    }

    /// Replaces every image, keeping ids and labels.
    pub fn map_images(&self, mut f: impl FnMut(usize, &ImageRgb) -> ImageRgb) -> Dataset {
        Dataset {
            items: self
                .items
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    let mut image = f(i, &item.image);
                    if let Some(l) = item.image.label() {
                        image = image.with_label(l);
                    }
                    Item {
                        id: item.id.clone(),
                        image,
                    }
                })
                .collect(),
            class_names: self.class_names.clone(),
        }
    }
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&c) = bytes.get(*pos) {
                    *pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Length("PPM header ends early".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes a binary 8-bit PPM; pixel values become `byte / maxval`.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P6" {
        return Err(Error::Format("missing P6 magic".into()));
    }
    let mut number = |name: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse()
            .map_err(|_| Error::Format(format!("bad PPM {name} {tok:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM with zero size".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("only 8-bit PPM supported, maxval={maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * width * height;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Length(format!("PPM raster needs {need} bytes")))?;
    let scale = maxval as f32;
    Ok(ImageRgb::from_fn(height, width, |c, y, x| {
        let v = raster[(y * width + x) * 3 + c] as f32 / scale;
        v.min(1.0)
    }))
}

pub fn encode_ppm(image: &ImageRgb) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.get(c, y, x) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| e.context(format!("decoding {}", path.display())))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &ImageRgb) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Loads a class-per-subdirectory tree. Classes are numbered in sorted
/// directory order; files within a class are sorted by name. Non-PPM files
/// are ignored.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let mut data = Dataset::default();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = data.class_names.len();
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(&class_dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_ppm(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} has no PPM images",
                class_dir.display()
            )));
        }
        for file in files {
            let image = read_ppm(&file)?.with_label(label);
            let id = file
                .strip_prefix(root)
                .unwrap_or(&file)
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            data.items.push(Item { id, image });
        }
        data.class_names.push(name);
    }
    if data.class_names.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    Ok(data)
}

/// Writes a dataset back out in the class-per-subdirectory layout.
pub fn save_dataset(data: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for item in &data.items {
        let path = root.join(&item.id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_ppm(&path, &item.image)?;
    }
    Ok(())
}
