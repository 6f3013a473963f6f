//! UDS1: little-endian dataset files.
//!
//! ```text
//! magic "UDS1" | version u32 = 1 | kind u32 | num_samples u32 | C_in u32 | H u32 | W u32
//! | num_classes u32 | per sample: features f32[C_in*H*W], labels i32[H*W] (-1 = abstain)
//! ```

use std::path::Path;

use super::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UDS1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in u32")))
    };
    let per_feat = d.channels() * d.pixels_per_sample();
    let per_label = d.pixels_per_sample();
    let mut out = Vec::with_capacity(HEADER_LEN + d.num_samples() * 4 * (per_feat + per_label));
    out.extend_from_slice(MAGIC);
    let kind = match d.kind() {
        DatasetKind::Classification => 0u32,
        DatasetKind::Segmentation => 1,
    };
    for v in [
        VERSION,
        kind,
        to_u32(d.num_samples(), "num_samples")?,
        to_u32(d.channels(), "C_in")?,
        to_u32(d.height(), "H")?,
        to_u32(d.width(), "W")?,
        to_u32(d.num_classes(), "num_classes")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let labels = d.labels().labels();
    for i in 0..d.num_samples() {
        for &v in d.sample_features(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for l in &labels[i * per_label..(i + 1) * per_label] {
            let raw: i32 = match l {
                Some(c) => *c as i32,
                None => -1,
            };
            out.extend_from_slice(&raw.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt_err(0, "bad magic, expected UDS1"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(bytes.len(), "truncated header"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let kind = match word(1) {
        0 => DatasetKind::Classification,
        1 => DatasetKind::Segmentation,
        k => return Err(fmt_err(8, format!("unknown dataset kind {k}"))),
    };
    let [n, c, h, w, classes] = [2, 3, 4, 5, 6].map(|i| word(i) as usize);
    if kind == DatasetKind::Classification && (h != 1 || w != 1) {
        return Err(fmt_err(16, "classification files need H = W = 1"));
    }
    let per_feat = c * h * w;
    let per_label = h * w;
    let expected = HEADER_LEN + n * 4 * (per_feat + per_label);
    if bytes.len() < expected {
        return Err(fmt_err(
            bytes.len(),
            format!("truncated: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(fmt_err(expected, "trailing bytes"));
    }
    let mut features = Vec::with_capacity(n * per_feat);
    let mut labels = Vec::with_capacity(n * per_label);
    let mut pos = HEADER_LEN;
    for _ in 0..n {
        for _ in 0..per_feat {
            let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
            features.push(v as f64);
            pos += 4;
        }
        for _ in 0..per_label {
            let raw = i32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
            let label = match raw {
                -1 => None,
                l if l >= 0 && (l as usize) < classes => Some(l as usize),
                l => {
                    return Err(fmt_err(
                        pos,
                        format!("label {l} out of range for {classes} classes"),
                    ))
                }
            };
            labels.push(label);
            pos += 4;
        }
    }
    Dataset::new(
        kind,
        classes,
        Tensor::new(vec![n, c, h, w], features)?,
        LabelMap::new(labels),
    )
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(d)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_classification_pair, gen_segmentation_pair, ClassificationDomainSpec};
    use crate::data::{AppearanceShift, SegmentationDomainSpec};

    fn seg_pair() -> crate::data::DomainPair {
        gen_segmentation_pair(&SegmentationDomainSpec {
            image_size: [6, 5],
            num_classes: 3,
            class_frequency_weights: vec![2.0, 1.0, 1.0],
            shapes_per_image: 3,
            appearance_shift: AppearanceShift {
                brightness_delta: -0.1,
                channel_gain: [1.0, 1.2, 0.8],
                noise_sigma: 0.03,
            },
            num_images: 4,
            seed: 3,
            texture_sigma: 0.02,
            palette: None,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let pair = seg_pair();
        let path = dir.path().join("src.uds");
        write_dataset(&pair.source, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), pair.source);

        // held-out labels are written as -1
        let back = decode_dataset(&encode_dataset(&pair.target).unwrap()).unwrap();
        assert_eq!(back.labels().assigned(), 0);
        assert_eq!(back.features(), pair.target.features());

        let cls = gen_classification_pair(&ClassificationDomainSpec {
            num_classes: 2,
            samples_per_class: 5,
            means: vec![[0.0, 0.0], [1.0, 1.0]],
            cov_scale: 0.1,
            target_shift: [0.0, 0.0],
            target_noise: 0.0,
            seed: 0,
        })
        .unwrap();
        let bytes = encode_dataset(&cls.source).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), cls.source);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dataset(&seg_pair().source).unwrap();
        assert_eq!(&bytes[..4], b"UDS1");
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!(
            [
                word(0),
                word(1),
                word(2),
                word(3),
                word(4),
                word(5),
                word(6)
            ],
            [1, 1, 4, 3, 6, 5, 3]
        );
        assert_eq!(bytes.len(), 32 + 4 * 4 * (3 * 30 + 30));
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let d = Dataset::new(
            DatasetKind::Segmentation,
            2,
            Tensor::zeros(&[0, 3, 4, 4]),
            LabelMap::default(),
        )
        .unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&d).unwrap()).unwrap(), d);
    }

    #[test]
    fn corrupt_files_rejected() {
        let good = encode_dataset(&seg_pair().source).unwrap();
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(matches!(
            decode_dataset(&good[..good.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut bad = good.clone();
        let last = bad.len() - 4;
        bad[last..].copy_from_slice(&7i32.to_le_bytes());
        assert!(
            matches!(decode_dataset(&bad), Err(Error::Format { offset, .. }) if offset == last as u64)
        );
    }
}
