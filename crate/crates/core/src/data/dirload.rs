use std::fs;
use std::path::{Path, PathBuf};

use super::{emit_netpbm, parse_netpbm, DataError, DatasetPair, LabeledDataset, Role};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

fn load_split(dir: &Path, role: Role) -> Result<LabeledDataset, DataError> {
    if !dir.is_dir() {
        return Err(DataError::MissingSplit(dir.to_path_buf()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut label_space = Vec::with_capacity(class_dirs.len());
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in class_dirs.iter().enumerate() {
        let name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| DataError::Inconsistent(format!("non-UTF-8 class directory {}", class_dir.display())))?;
        label_space.push(name.to_string());
        for file in sorted_entries(class_dir)?.into_iter().filter(|p| is_image(p)) {
            let bytes = fs::read(&file).map_err(io_err(&file))?;
            let image = parse_netpbm(&bytes).map_err(|source| DataError::Netpbm {
                path: file.clone(),
                source,
            })?;
            images.push(image);
            labels.push(label);
        }
    }
    if images.is_empty() {
        return Err(DataError::EmptySplit(dir.to_path_buf()));
    }
    Ok(LabeledDataset {
        images,
        labels,
        label_space,
        role,
    })
}

/// Loads `root/{base,novel}/{train,test}/<class>/*.{pgm,ppm}`. Class names are
/// sorted lexicographically to assign label indices.
pub fn load_image_dir(root: &Path) -> Result<DatasetPair, DataError> {
    let pair = DatasetPair {
        base_train: load_split(&root.join("base").join("train"), Role::Base)?,
        base_test: load_split(&root.join("base").join("test"), Role::Base)?,
        novel_train_pool: load_split(&root.join("novel").join("train"), Role::Novel)?,
        novel_test: load_split(&root.join("novel").join("test"), Role::Novel)?,
    };
    pair.validate()?;
    Ok(pair)
}

fn write_split(dir: &Path, data: &LabeledDataset) -> Result<(), DataError> {
    let ext = if data.image_shape()[0] == 1 { "pgm" } else { "ppm" };
    let mut counters = vec![0usize; data.num_classes()];
    for name in &data.label_space {
        let d = dir.join(name);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    for (image, &label) in data.images.iter().zip(&data.labels) {
        let path = dir
            .join(&data.label_space[label])
            .join(format!("{:04}.{ext}", counters[label]));
        counters[label] += 1;
        fs::write(&path, emit_netpbm(image)).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Writes `pair` in the layout read by [`load_image_dir`].
pub fn write_image_dir(pair: &DatasetPair, root: &Path) -> Result<(), DataError> {
    write_split(&root.join("base").join("train"), &pair.base_train)?;
    write_split(&root.join("base").join("test"), &pair.base_test)?;
    write_split(&root.join("novel").join("train"), &pair.novel_train_pool)?;
    write_split(&root.join("novel").join("test"), &pair.novel_test)?;
    Ok(())
}
