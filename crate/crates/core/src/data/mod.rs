//! Samples, hierarchical groundtruth, the synthetic figure generator and
//! dataset storage.

mod io;
mod synthetic;

pub use io::{
    hierarchy_hash, load_external, read_dataset, read_label_png, read_manifest, read_rgb_png, write_dataset, write_gray_png, write_label_png,
    write_rgb_png, Dataset, DatasetManifest, SampleEntry, PALETTE, SCHEMA_VERSION,
};
pub use synthetic::{generate_dataset, generate_sample, BackgroundMode, SyntheticConfig};

use hparse_tensor::kernels::nearest_index;
use hparse_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::hierarchy::{BinaryMask, LabelMap, NodeIdx, ValidatedHierarchy};

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "rgb buffer size");
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H, W]` floats in `[0, 1]`.
    pub fn to_planar<T: Scalar>(&self) -> Vec<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = T::of(self.data[p * 3 + c] as f64 / 255.0);
            }
        }
        out
    }

    /// Inverse of [`Self::to_planar`], rounding and clamping to `[0, 255]`.
    pub fn from_planar<T: Scalar>(width: usize, height: usize, planar: &[T]) -> Self {
        let plane = width * height;
        let mut data = vec![0u8; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[p * 3 + c] = (planar[c * plane + p].as_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage { width, height, data }
    }
}

/// Hierarchical groundtruth: one mask per hierarchy node plus background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelPyramid {
    pub width: usize,
    pub height: usize,
    /// Indexed by `NodeIdx`.
    pub masks: Vec<BinaryMask>,
    /// Pixels outside the root and every isolated node.
    pub background: BinaryMask,
}

impl LabelPyramid {
    pub fn mask(&self, v: NodeIdx) -> &BinaryMask {
        &self.masks[v.0]
    }

    /// Per-pixel class index at `level`: 0 where no node of the level covers
    /// the pixel, otherwise `1 + position` of the covering node.
    pub fn level_classes(&self, h: &ValidatedHierarchy, level: u8) -> Vec<usize> {
        let mut out = vec![0usize; self.width * self.height];
        for (k, v) in h.level_nodes(level).into_iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(&self.masks[v.0].data) {
                if m {
                    *o = k + 1;
                }
            }
        }
        out
    }
}

/// Builds every node mask as the union of its leaves' masks.
pub fn build_pyramid(labels: &LabelMap, h: &ValidatedHierarchy) -> Result<LabelPyramid> {
    let leaf_masks = h.leaf_masks_from_labels(labels)?;
    let (w, ht) = (labels.width, labels.height);
    let mut masks: Vec<Option<BinaryMask>> = vec![None; h.len()];
    for (leaf, m) in h.leaves().into_iter().zip(leaf_masks) {
        masks[leaf.0] = Some(m);
    }
    for level in 2..=3u8 {
        for v in h.level_nodes(level) {
            let mut m = BinaryMask::empty(w, ht);
            for &c in h.children(v) {
                m.union_with(masks[c.0].as_ref().expect("children are built first"));
            }
            masks[v.0] = Some(m);
        }
    }
    let masks: Vec<BinaryMask> = masks.into_iter().map(|m| m.unwrap_or_else(|| BinaryMask::empty(w, ht))).collect();
    let mut covered = BinaryMask::empty(w, ht);
    for v in h.nodes().filter(|&v| h.parent(v).is_none()) {
        covered.union_with(&masks[v.0]);
    }
    let background = BinaryMask { width: w, height: ht, data: covered.data.iter().map(|&c| !c).collect() };
    Ok(LabelPyramid { width: w, height: ht, masks, background })
}

/// Nearest-neighbour resampling of a label map.
pub fn resize_labels_nearest(labels: &LabelMap, out_w: usize, out_h: usize) -> LabelMap {
    let xs = nearest_index(labels.width, out_w);
    let ys = nearest_index(labels.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h);
    for &y in &ys {
        for &x in &xs {
            data.push(labels.get(x, y));
        }
    }
    LabelMap::new(out_w, out_h, data)
}

/// One training or test example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub pyramid: LabelPyramid,
    pub seed: u64,
}

impl Sample {
    pub fn new(image: RgbImage, labels: LabelMap, seed: u64, h: &ValidatedHierarchy) -> Result<Self> {
        if (image.width, image.height) != (labels.width, labels.height) {
            return Err(Error::Shape(format!(
                "image {}x{} vs labels {}x{}",
                image.width, image.height, labels.width, labels.height
            )));
        }
        let pyramid = build_pyramid(&labels, h)?;
        Ok(Sample { image, labels, pyramid, seed })
    }
}

/// Stacks sample images into an `[N, 3, H, W]` tensor.
pub fn image_batch<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut data = Vec::with_capacity(samples.len() * 3 * w * h);
    for s in samples {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        data.extend(s.image.to_planar::<T>());
    }
    Ok(Tensor::new(&[samples.len(), 3, h, w], data))
}

/// Pyramids built from labels downsampled to `out_w × out_h`.
pub fn pyramids_at(samples: &[&Sample], out_w: usize, out_h: usize, h: &ValidatedHierarchy) -> Result<Vec<LabelPyramid>> {
    samples.iter().map(|s| build_pyramid(&resize_labels_nearest(&s.labels, out_w, out_h), h)).collect()
}

/// Parent mask equals the union of its children and leaf masks are pairwise disjoint.
pub fn pyramid_is_consistent(p: &LabelPyramid, h: &ValidatedHierarchy) -> bool {
    for v in h.nodes() {
        let kids = h.children(v);
        if kids.is_empty() {
            continue;
        }
        let mut u = BinaryMask::empty(p.width, p.height);
        for &c in kids {
            u.union_with(&p.masks[c.0]);
        }
        if u != p.masks[v.0] {
            return false;
        }
    }
    let leaves = h.leaves();
    for (i, &a) in leaves.iter().enumerate() {
        for &b in &leaves[i + 1..] {
            if p.masks[a.0].intersects(&p.masks[b.0]) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn h() -> ValidatedHierarchy {
        ValidatedHierarchy::pascal6()
    }

    #[test]
    fn all_background_gives_empty_masks() {
        let p = build_pyramid(&LabelMap::filled(5, 4, 0), &h()).unwrap();
        assert!(p.masks.iter().all(|m| m.count() == 0));
        assert_eq!(p.background.count(), 20);
    }

    #[test]
    fn one_head_pixel_propagates_upwards() {
        let h = h();
        let mut l = LabelMap::filled(4, 4, 0);
        l.set(1, 2, h.label_of_leaf(h.find("head").unwrap()).unwrap());
        let p = build_pyramid(&l, &h).unwrap();
        for id in ["head", "upper_body", "full_body"] {
            let m = p.mask(h.find(id).unwrap());
            assert_eq!(m.count(), 1);
            assert!(m.data[2 * 4 + 1]);
        }
        assert_eq!(p.mask(h.find("lower_body").unwrap()).count(), 0);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let l = LabelMap::new(2, 1, vec![0, 9]);
        assert!(matches!(build_pyramid(&l, &h()), Err(Error::UnknownLabel(v)) if v == vec![9]));
    }

    #[test]
    fn level_classes_follow_level_order() {
        let h = h();
        let l = LabelMap::new(3, 1, vec![0, 1, 6]);
        let p = build_pyramid(&l, &h).unwrap();
        assert_eq!(p.level_classes(&h, 1), vec![0, 1, 6]);
        assert_eq!(p.level_classes(&h, 2), vec![0, 1, 2]);
        assert_eq!(p.level_classes(&h, 3), vec![0, 1, 1]);
    }

    #[test]
    fn nearest_downsample_picks_cell_centres() {
        let l = LabelMap::new(4, 1, vec![1, 2, 3, 4]);
        assert_eq!(resize_labels_nearest(&l, 2, 1).data, vec![2, 4]);
    }

    #[test]
    fn planar_roundtrip_is_exact() {
        let img = RgbImage::new(2, 1, vec![0, 17, 255, 128, 3, 99]);
        let back = RgbImage::from_planar(2, 1, &img.to_planar::<f32>());
        assert_eq!(img, back);
    }

    proptest! {
        #[test]
        fn pyramid_of_random_map_is_consistent(data in proptest::collection::vec(0u32..7, 36)) {
            let h = h();
            let l = LabelMap::new(6, 6, data.clone());
            let p = build_pyramid(&l, &h).unwrap();
            prop_assert!(pyramid_is_consistent(&p, &h));
            let root = p.mask(h.find("full_body").unwrap()).count();
            let leaves: usize = h.leaves().iter().map(|&v| p.mask(v).count()).sum();
            prop_assert_eq!(root, leaves);
            prop_assert_eq!(root, data.iter().filter(|&&x| x != 0).count());
            prop_assert_eq!(build_pyramid(&l, &h).unwrap(), p);
        }
    }
}
