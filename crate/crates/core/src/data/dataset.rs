use std::fs;
use std::path::{Path, PathBuf};

use cmunet_tensor::par;
use serde::{Deserialize, Serialize};

use super::image::{load_sample, SegSample};
use crate::error::{Error, Result};

/// Contents of `<root>/meta.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl DatasetMeta {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Self = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
        if meta.num_classes < 2 || meta.num_classes > 256 {
            return Err(Error::data(&path, format!("num_classes {} out of range", meta.num_classes)));
        }
        Ok(meta)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("meta.json");
        let text = serde_json::to_string_pretty(self).expect("meta serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// `<root>/images/<id>.ppm`, `<root>/masks/<id>.pgm`, `<root>/meta.json`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let meta = DatasetMeta::load(&root)?;
        Ok(Self { root, meta })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.ppm"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.pgm"))
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.meta.train,
            Split::Val => &self.meta.val,
        }
    }

    /// Loads a split in id order; samples are read in parallel.
    pub fn load(&self, split: Split) -> Result<Vec<SegSample>> {
        let ids = self.ids(split);
        par::map_range(ids.len(), |i| load_sample(&self.image_path(&ids[i]), &self.mask_path(&ids[i]), self.meta.num_classes))
            .into_iter()
            .collect()
    }
}
