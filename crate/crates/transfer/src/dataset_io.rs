//! Datasets on disk: `<split>/<class>/<index>.ppm` plus a `manifest.csv`
//! with one `filename,label,seed` row per image.

use std::fs;
use std::path::{Path, PathBuf};

use transfer_core::data::{Dataset, Sample, Split};

use crate::error::{CliError, Result};
use crate::pnm;

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "filename,label,seed";

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes the images of every split under `root` and a manifest covering all of them.
pub fn write_dataset(root: &Path, splits: &[&Dataset]) -> Result<()> {
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for data in splits {
        for name in &data.class_names {
            if name.is_empty() || name.contains(['/', '\\', ',']) || name.starts_with('.') {
                return Err(CliError::Usage(format!("class name {name:?} cannot be used as a directory")));
            }
            create_dir(&root.join(split_dir(data.split)).join(name))?;
        }
        for (i, s) in data.samples.iter().enumerate() {
            let rel = format!("{}/{}/{i:05}.ppm", split_dir(data.split), data.class_names[s.label]);
            let rgb = pnm::tensor_to_rgb(&s.image).map_err(|m| CliError::format(root.join(&rel), m))?;
            pnm::write(&root.join(&rel), &pnm::encode_ppm(&rgb))?;
            manifest.push_str(&format!("{rel},{},{}\n", s.label, s.seed));
        }
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))
}

struct Row {
    file: String,
    label: usize,
    seed: u64,
}

fn parse_manifest(path: &Path, text: &str) -> Result<Vec<Row>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(CliError::format(path, format!("first line must be {MANIFEST_HEADER:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || CliError::format(path, format!("line {}: malformed row {line:?}", i + 2));
            let mut cols = line.split(',');
            let (Some(file), Some(label), Some(seed), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad());
            };
            Ok(Row {
                file: file.trim().to_string(),
                label: label.trim().parse().map_err(|_| bad())?,
                seed: seed.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loads one split of a dataset written by [`write_dataset`]. Class names
/// come from the directory each label's images live in.
pub fn read_split(root: &Path, split: Split) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let prefix = format!("{}/", split_dir(split));
    let rows: Vec<Row> = parse_manifest(&path, &text)?
        .into_iter()
        .filter(|r| r.file.starts_with(&prefix))
        .collect();
    if rows.is_empty() {
        return Err(CliError::format(&path, format!("no {} images listed", split_dir(split))));
    }
    let num_classes = rows.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let mut class_names: Vec<Option<String>> = vec![None; num_classes];
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let class = row.file[prefix.len()..].split('/').next().unwrap_or_default().to_string();
        match &class_names[row.label] {
            Some(name) if *name != class => {
                return Err(CliError::format(
                    &path,
                    format!("label {} appears under both {name:?} and {class:?}", row.label),
                ))
            }
            Some(_) => {}
            None => class_names[row.label] = Some(class),
        }
        let file: PathBuf = root.join(&row.file);
        samples.push(Sample {
            image: pnm::rgb_to_tensor(&pnm::read_ppm(&file)?),
            label: row.label,
            seed: row.seed,
        });
    }
    let class_names = class_names
        .into_iter()
        .enumerate()
        .map(|(label, name)| name.ok_or_else(|| CliError::format(&path, format!("no images for label {label}"))))
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset {
        samples,
        class_names,
        split,
    };
    data.validate()?;
    Ok(data)
}
