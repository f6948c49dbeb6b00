//! Line-delimited JSON ingestion and serialisation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{DataError, Dataset, Item, OutfitRecord, ShopperRecord, DEFAULT_MAX_OUTFIT_ITEMS};

/// Standard file names inside a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub items: PathBuf,
    pub outfits: PathBuf,
    pub shoppers: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetFiles {
            items: dir.join("items.jsonl"),
            outfits: dir.join("outfits.jsonl"),
            shoppers: dir.join("shoppers.jsonl"),
        }
    }

    pub fn load(&self) -> Result<Dataset, DataError> {
        load_dataset(&self.items, &self.outfits, &self.shoppers)
    }
}

/// Reads one JSON object per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let f = File::open(path).map_err(|e| DataError::Io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DataError::Io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| DataError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let io_err = |e| DataError::Io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| DataError::Io(path.display().to_string(), e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_dataset(
    items_path: &Path,
    outfits_path: &Path,
    shoppers_path: &Path,
) -> Result<Dataset, DataError> {
    let items: Vec<Item> = read_jsonl(items_path)?;
    let outfits: Vec<OutfitRecord> = read_jsonl(outfits_path)?;
    let shoppers: Vec<ShopperRecord> = read_jsonl(shoppers_path)?;
    Dataset::from_records(items, outfits, shoppers, DEFAULT_MAX_OUTFIT_ITEMS)
}

/// Writes `items.jsonl`, `outfits.jsonl` and `shoppers.jsonl` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetFiles, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io(dir.display().to_string(), e))?;
    let files = DatasetFiles::in_dir(dir);
    write_jsonl(&files.items, ds.items())?;
    write_jsonl(&files.outfits, &ds.outfit_records())?;
    write_jsonl(&files.shoppers, &ds.shopper_records())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    #[test]
    fn round_trip_through_files() {
        let ds = Dataset::from_records(
            vec![
                item("a", "top", vec![0.1, 1.0 / 3.0]),
                item("b", "shoe", vec![-2.5e-7, 4.0]),
                item("c", "shoe", vec![1e300, -0.0]),
            ],
            vec![
                outfit("o1", "s1", &["a", "b"]),
                outfit("o2", "s2", &["c", "a"]),
            ],
            vec![shopper("s1", &["o1"]), shopper("s2", &["o2"])],
            DEFAULT_MAX_OUTFIT_ITEMS,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_dataset(&ds, dir.path()).unwrap();
        let back = files.load().unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_outfits_file_reports_no_outfits() {
        let dir = tempfile::tempdir().unwrap();
        let files = DatasetFiles::in_dir(dir.path());
        write_jsonl(&files.items, &[item("a", "t", vec![1.0])]).unwrap();
        std::fs::write(&files.outfits, "").unwrap();
        std::fs::write(&files.shoppers, "").unwrap();
        let err = files.load().unwrap_err();
        assert_eq!(err.to_string(), "no outfits");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"shopper_id\":\"s\",\"outfit_ids\":[]}\n{oops\n").unwrap();
        let err = read_jsonl::<ShopperRecord>(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
