//! Datasets, synthetic source/target generators and the UDS1 file format.

pub(crate) mod synth;
mod uds;

pub use synth::{
    gen_classification_pair, gen_segmentation_pair, paint_scene, render_scene, AppearanceShift,
    ClassificationDomainSpec, DomainPair, GaussianParams, Scene, SegmentationDomainSpec, Shape,
    ShapeKind,
};
pub use uds::{decode_dataset, encode_dataset, read_dataset, write_dataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Classification,
    Segmentation,
}

/// Samples stored as S×C_in×H×W features (H = W = 1 for point data) with one
/// training-visible label per pixel.
///
/// Target-domain datasets carry abstained training labels; their true labels,
/// when known, sit in `eval_labels` and are only reachable through the
/// evaluation accessors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    num_classes: usize,
    features: Tensor,
    labels: LabelMap,
    eval_labels: Option<LabelMap>,
}

impl Dataset {
    pub fn new(
        kind: DatasetKind,
        num_classes: usize,
        features: Tensor,
        labels: LabelMap,
    ) -> Result<Self> {
        let (s, _, h, w) = features.dims4()?;
        if kind == DatasetKind::Classification && (h != 1 || w != 1) {
            return Err(Error::shape("classification features must have H = W = 1"));
        }
        if labels.len() != s * h * w {
            return Err(Error::shape(format!(
                "{} labels for {s} samples of {h}x{w}",
                labels.len()
            )));
        }
        labels.check_range(num_classes)?;
        Ok(Self {
            kind,
            num_classes,
            features,
            labels,
            eval_labels: None,
        })
    }

    /// Moves the labels out of training view, keeping them for evaluation only.
    pub fn hold_out_labels(mut self) -> Self {
        let n = self.labels.len();
        self.eval_labels = Some(std::mem::replace(&mut self.labels, LabelMap::abstain(n)));
        self
    }

    /// Copy whose training labels are the held-out evaluation labels.
    pub fn with_revealed_labels(&self) -> Option<Dataset> {
        let eval = self.eval_labels.clone()?;
        Some(Dataset {
            labels: eval,
            eval_labels: None,
            ..self.clone()
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_samples(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[3]
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.height() * self.width()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    /// Labels for scoring predictions: the held-out labels if present,
    /// otherwise the visible ones.
    pub fn eval_labels(&self) -> &LabelMap {
        self.eval_labels.as_ref().unwrap_or(&self.labels)
    }

    pub fn has_held_out_labels(&self) -> bool {
        self.eval_labels.is_some()
    }

    pub fn sample_features(&self, i: usize) -> &[f64] {
        let per = self.channels() * self.pixels_per_sample();
        &self.features.data()[i * per..(i + 1) * per]
    }

    /// Features of the chosen samples as B×C_in×H×W.
    pub fn batch_features(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.channels() * self.pixels_per_sample());
        for &i in idx {
            data.extend_from_slice(self.sample_features(i));
        }
        Tensor::new(
            vec![idx.len(), self.channels(), self.height(), self.width()],
            data,
        )
        .expect("consistent shape")
    }

    pub fn batch_labels(&self, idx: &[usize]) -> LabelMap {
        let per = self.pixels_per_sample();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend_from_slice(&self.labels.labels()[i * per..(i + 1) * per]);
        }
        LabelMap::new(out)
    }

    /// Feature-only view handed to adaptation code.
    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled { dataset: self }
    }
}

/// Read access to a dataset's features with no path to any label.
#[derive(Clone, Copy, Debug)]
pub struct Unlabeled<'a> {
    dataset: &'a Dataset,
}

impl Unlabeled<'_> {
    pub fn kind(&self) -> DatasetKind {
        self.dataset.kind
    }

    pub fn num_samples(&self) -> usize {
        self.dataset.num_samples()
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.dataset.pixels_per_sample()
    }

    pub fn batch_features(&self, idx: &[usize]) -> Tensor {
        self.dataset.batch_features(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hold_out_moves_labels() {
        let f = Tensor::zeros(&[3, 2, 1, 1]);
        let d = Dataset::new(
            DatasetKind::Classification,
            2,
            f,
            LabelMap::from_classes(&[0, 1, 1]),
        )
        .unwrap()
        .hold_out_labels();
        assert_eq!(d.labels().assigned(), 0);
        assert_eq!(d.eval_labels(), &LabelMap::from_classes(&[0, 1, 1]));
        assert_eq!(d.with_revealed_labels().unwrap().labels().assigned(), 3);
    }

    #[test]
    fn constructor_checks() {
        let f = Tensor::zeros(&[2, 2, 1, 1]);
        assert!(Dataset::new(
            DatasetKind::Classification,
            2,
            f.clone(),
            LabelMap::from_classes(&[0])
        )
        .is_err());
        assert!(Dataset::new(
            DatasetKind::Classification,
            2,
            f,
            LabelMap::from_classes(&[0, 2])
        )
        .is_err());
        let img = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(Dataset::new(DatasetKind::Classification, 2, img, LabelMap::abstain(4)).is_err());
    }
}
