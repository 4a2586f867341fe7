use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{read_ppm, RgbImage};
use crate::error::{Error, Result};
use crate::eval::Meta;
use crate::par::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
}

/// Dataset index: one row per image, paths relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl Manifest {
    /// Reads `manifest.csv` from a dataset directory and checks that train
    /// and test identities are disjoint.
    pub fn load(root: &Path) -> Result<Self> {
        let file = File::open(root.join(MANIFEST_FILE))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "identity", "camera", "split"] {
            return Err(Error::Manifest(format!("unexpected header {headers:?}")));
        }
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let m = Self {
            root: root.to_path_buf(),
            rows,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let mut w = csv::Writer::from_path(self.root.join(MANIFEST_FILE))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<usize> = self.identities(Split::Train);
        let test: BTreeSet<usize> = self.identities(Split::Query).union(&self.identities(Split::Gallery)).copied().collect();
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::Manifest(format!("identity {id} appears in both train and test splits")));
        }
        Ok(())
    }

    pub fn identities(&self, split: Split) -> BTreeSet<usize> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.identity).collect()
    }

    pub fn rows_of(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Decodes every image of `split`, in manifest order.
    pub fn load_split(&self, split: Split, exec: Exec) -> Result<(Vec<RgbImage>, Vec<Meta>)> {
        let rows: Vec<&ManifestRow> = self.rows_of(split).collect();
        let images = exec
            .map_slice(&rows, |_, r| read_ppm(&self.root.join(&r.path)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let meta = rows
            .iter()
            .map(|r| Meta {
                identity: r.identity,
                camera: r.camera,
            })
            .collect();
        Ok((images, meta))
    }
}

/// Training images with identities remapped to `0..num_classes`.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainSet {
    pub fn load(manifest: &Manifest, exec: Exec) -> Result<Self> {
        let (images, meta) = manifest.load_split(Split::Train, exec)?;
        if images.is_empty() {
            return Err(Error::Manifest("no training images".into()));
        }
        let ids: BTreeMap<usize, usize> = manifest
            .identities(Split::Train)
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        Ok(Self {
            images,
            labels: meta.iter().map(|m| ids[&m.identity]).collect(),
            num_classes: ids.len(),
        })
    }

    /// Image indices grouped by label.
    pub fn by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}
