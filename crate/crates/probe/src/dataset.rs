//! Dataset directories.
//!
//! ```text
//! <dir>/dataset.cfg            key=value: concept, width, height, grid_h, grid_w, classes
//! <dir>/labels.csv             id,concept_label,cell_0,...,cell_{G-1}
//! <dir>/images/NNNNN.ppm       binary P6
//! <dir>/masks/<concept>/NNNNN.pgm  binary P5, 0 or 255
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use concept_probe_core::data::{Dataset, Sample};
use image::{GrayImage, RgbImage};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::pnm;

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{id:05}.ppm"))
}

pub fn mask_path(dir: &Path, concept: &str, id: usize) -> PathBuf {
    dir.join("masks").join(concept).join(format!("{id:05}.pgm"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks").join(&dataset.concept))?;
    let cfg = KeyValues::from_pairs([
        ("concept", dataset.concept.clone()),
        ("width", dataset.width.to_string()),
        ("height", dataset.height.to_string()),
        ("grid_h", dataset.grid.0.to_string()),
        ("grid_w", dataset.grid.1.to_string()),
        ("classes", dataset.classes.to_string()),
    ]);
    cfg.write(&dir.join("dataset.cfg"))?;

    let labels = dir.join("labels.csv");
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", labels.display()));
    let mut writer = csv::Writer::from_path(&labels).map_err(csv_err)?;
    let cells = dataset.grid.0 * dataset.grid.1;
    let mut header = vec!["id".to_string(), "concept_label".to_string()];
    header.extend((0..cells).map(|i| format!("cell_{i}")));
    writer.write_record(&header).map_err(csv_err)?;
    for s in &dataset.samples {
        let mut row = vec![s.id.to_string(), s.concept_label.to_string()];
        row.extend(s.cells.iter().map(u8::to_string));
        writer.write_record(&row).map_err(csv_err)?;

        let (w, h) = (s.width as u32, s.height as u32);
        let rgb = RgbImage::from_raw(w, h, s.rgb.clone()).expect("validated buffer");
        pnm::write_ppm(&image_path(dir, s.id), &rgb)?;
        let mask = GrayImage::from_raw(w, h, s.concept_mask.iter().map(|&m| m * 255).collect()).expect("validated buffer");
        pnm::write_pgm(&mask_path(dir, &dataset.concept, s.id), &mask)?;
    }
    writer.flush().map_err(Error::io(&labels))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let cfg = KeyValues::read(&dir.join("dataset.cfg"))?;
    let concept = cfg.require("concept")?.to_string();
    let (width, height): (usize, usize) = (cfg.parse("width")?, cfg.parse("height")?);
    let grid: (usize, usize) = (cfg.parse("grid_h")?, cfg.parse("grid_w")?);
    let classes: usize = cfg.parse("classes")?;

    let labels = dir.join("labels.csv");
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", labels.display()));
    let mut reader = csv::Reader::from_path(&labels).map_err(csv_err)?;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let field = |i: usize| -> Result<u64> {
            record
                .get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad field {i} in {:?}", labels.display(), record)))
        };
        let id = field(0)? as usize;
        let concept_label = u8::try_from(field(1)?).map_err(|_| Error::Format(format!("sample {id}: label out of range")))?;
        let cells = (2..record.len())
            .map(|i| field(i).and_then(|c| u8::try_from(c).map_err(|_| Error::Format(format!("sample {id}: class {c}")))))
            .collect::<Result<Vec<u8>>>()?;

        let rgb = pnm::read_ppm(&image_path(dir, id))?;
        let mask_file = mask_path(dir, &concept, id);
        let mask = pnm::read_pgm(&mask_file)?;
        for (img_dims, what) in [(rgb.dimensions(), "image"), (mask.dimensions(), "mask")] {
            if img_dims != (width as u32, height as u32) {
                return Err(Error::Format(format!("sample {id}: {what} is {img_dims:?}, dataset is {width}x{height}")));
            }
        }
        let concept_mask = mask
            .as_raw()
            .iter()
            .map(|&m| match m {
                0 => Ok(0),
                255 => Ok(1),
                v => Err(Error::Format(format!("{}: mask value {v} is neither 0 nor 255", mask_file.display()))),
            })
            .collect::<Result<Vec<u8>>>()?;
        samples.push(Sample { id, width, height, rgb: rgb.into_raw(), concept_mask, concept_label, cells });
    }
    let dataset = Dataset { concept, width, height, grid, classes, samples };
    dataset.validate()?;
    Ok(dataset)
}
