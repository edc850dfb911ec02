//! Image sets, manifests on disk, and batch sampling.

mod sampler;
mod synthetic;

pub use sampler::{pk_sample, Augment, Batch};
pub use synthetic::{generate, render, write_dataset, Background, Jitter, Split, SyntheticData, SyntheticSpec, Texture};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, io_err, shape_err, Result};
use crate::image::read_pnm;
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub file: String,
    pub id: usize,
    pub cam: usize,
    pub split: SplitTag,
}

/// Images (`N×3×H×W`) with identity and camera labels.
#[derive(Clone, Debug)]
pub struct ImageSet<T> {
    pub images: Tensor<T>,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl<T: Real> ImageSet<T> {
    pub fn new(images: Tensor<T>, ids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != ids.len() || ids.len() != cams.len() {
            return shape_err(format!("image set of shape {:?} with {} ids and {} cams", images.shape(), ids.len(), cams.len()));
        }
        Ok(Self { images, ids, cams })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.images.data()[r * per..(r + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = rows.len();
        ImageSet::new(Tensor::new(&shape, data)?, rows.iter().map(|&r| self.ids[r]).collect(), rows.iter().map(|&r| self.cams[r]).collect())
    }

    /// Dense class labels `0..K` in ascending identity order, and `K`.
    pub fn class_labels(&self) -> (Vec<usize>, usize) {
        let mut map = BTreeMap::new();
        for &id in &self.ids {
            map.entry(id).or_insert(0);
        }
        for (i, v) in map.values_mut().enumerate() {
            *v = i;
        }
        (self.ids.iter().map(|id| map[id]).collect(), map.len())
    }

    /// Row indices grouped by identity, identities ascending.
    pub fn rows_by_id(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.ids.iter().enumerate() {
            m.entry(id).or_default().push(i);
        }
        m
    }

    /// First image of each identity as query, the rest as gallery.
    pub fn query_gallery_split(&self) -> (Vec<usize>, Vec<usize>) {
        let (mut q, mut g) = (Vec::new(), Vec::new());
        for rows in self.rows_by_id().into_values() {
            q.push(rows[0]);
            g.extend_from_slice(&rows[1..]);
        }
        g.sort_unstable();
        (q, g)
    }
}

/// A dataset directory: manifest rows and the decoded images.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub rows: Vec<ManifestRow>,
    pub all: ImageSet<T>,
}

impl<T: Real> Dataset<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let rows: Vec<ManifestRow> = serde_json::from_str(&text)?;
        if rows.is_empty() {
            return arg_err(format!("{} lists no images", path.display()));
        }
        let mut images = Vec::with_capacity(rows.len());
        for r in &rows {
            images.push(read_pnm::<T>(&dir.join(&r.file))?);
        }
        let all = ImageSet::new(Tensor::stack(&images)?, rows.iter().map(|r| r.id).collect(), rows.iter().map(|r| r.cam).collect())?;
        Ok(Self { rows, all })
    }

    fn rows_tagged(&self, tag: SplitTag) -> Vec<usize> {
        self.rows.iter().enumerate().filter(|(_, r)| r.split == tag).map(|(i, _)| i).collect()
    }

    pub fn train(&self) -> Result<ImageSet<T>> {
        self.all.select(&self.rows_tagged(SplitTag::Train))
    }

    /// Query and gallery sets. Without tagged query rows, the training rows
    /// are split one query per identity, the rest gallery.
    pub fn query_gallery(&self) -> Result<(ImageSet<T>, ImageSet<T>)> {
        let q = self.rows_tagged(SplitTag::Query);
        if !q.is_empty() {
            return Ok((self.all.select(&q)?, self.all.select(&self.rows_tagged(SplitTag::Gallery))?));
        }
        let train = self.train()?;
        let (q, g) = train.query_gallery_split();
        Ok((train.select(&q)?, train.select(&g)?))
    }
}
