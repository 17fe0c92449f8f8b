use rayon::prelude::*;

use super::affine::{apply_affine, make_preset, Preset};
use super::ImageOpsError;
use crate::raster::{DatasetManifest, Image, ImageSource, ManifestEntry, Rgb};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub presets: Vec<Preset>,
    /// Seeds the draws of ranged presets.
    pub seed: u64,
    pub fill: Rgb,
}

impl AugmentPolicy {
    pub fn new(presets: Vec<Preset>, seed: u64) -> Self {
        Self {
            presets,
            seed,
            fill: [0, 0, 0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub manifest: DatasetManifest,
    /// One image per manifest entry, in manifest order.
    pub images: Vec<(String, Image)>,
}

/// Id of the `k`-th augmented copy (1-based, in preset order).
pub fn augmented_id(id: &str, k: usize) -> String {
    format!("{id}__aug{k}")
}

/// Every original followed by one copy per preset, labels inherited.
/// Output order and every drawn magnitude depend only on input order and seed.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    policy: &AugmentPolicy,
    source: &dyn ImageSource,
) -> Result<AugmentedDataset, ImageOpsError> {
    let groups = manifest
        .entries()
        .par_iter()
        .enumerate()
        .map(|(i, entry)| augment_one(i, entry, policy, source))
        .collect::<Result<Vec<_>, _>>()?;

    let mut entries = Vec::with_capacity(manifest.len() * (1 + policy.presets.len()));
    let mut images = Vec::with_capacity(entries.capacity());
    for group in groups {
        for (entry, img) in group {
            images.push((entry.image_id.clone(), img));
            entries.push(entry);
        }
    }
    let manifest = DatasetManifest::new(entries)
        .map_err(|e| ImageOpsError::Preset(format!("augmented ids collide: {e}")))?;
    Ok(AugmentedDataset { manifest, images })
}

fn augment_one(
    index: usize,
    entry: &ManifestEntry,
    policy: &AugmentPolicy,
    source: &dyn ImageSource,
) -> Result<Vec<(ManifestEntry, Image)>, ImageOpsError> {
    let img = source.load(&entry.image_id)?;
    let mut out = Vec::with_capacity(1 + policy.presets.len());
    for (k, preset) in policy.presets.iter().enumerate() {
        let mut rng = SplitMix64::derive(policy.seed, &[index as u64, k as u64]);
        let t = make_preset(preset.draw(&mut rng), img.width(), img.height())?;
        let copy = apply_affine(&img, &t, policy.fill)?;
        let mut e = entry.clone();
        e.image_id = augmented_id(&entry.image_id, k + 1);
        out.push((e, copy));
    }
    out.insert(0, (entry.clone(), img));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::{parse_presets, Amount};
    use crate::raster::MemorySource;

    fn fixture(n: usize) -> (DatasetManifest, MemorySource) {
        let mut src = MemorySource::new();
        let mut entries = Vec::new();
        for i in 0..n {
            let id = format!("img{i}");
            src.insert(
                id.clone(),
                Image::from_fn(6, 6, |x, y| [(x * 40) as u8, (y * 40) as u8, (i * 50) as u8]).unwrap(),
            );
            entries.push(ManifestEntry::new(id, i % 3 == 0, i % 3 == 1));
        }
        (DatasetManifest::new(entries).unwrap(), src)
    }

    #[test]
    fn no_presets_is_identity() {
        let (m, src) = fixture(3);
        let out = augment_dataset(&m, &AugmentPolicy::new(vec![], 1), &src).unwrap();
        assert_eq!(out.manifest, m);
        assert_eq!(out.images.len(), 3);
    }

    #[test]
    fn cardinality_and_labels() {
        let (m, src) = fixture(3);
        let policy = AugmentPolicy::new(parse_presets("hflip,vflip").unwrap(), 1);
        let out = augment_dataset(&m, &policy, &src).unwrap();
        assert_eq!(out.manifest.len(), 9);
        let ids: Vec<_> = out.manifest.ids().collect();
        assert_eq!(&ids[..3], &["img0", "img0__aug1", "img0__aug2"]);
        for e in out.manifest.entries() {
            let base = e.image_id.split("__aug").next().unwrap();
            let orig = m.get(base).unwrap();
            assert_eq!((e.melanoma, e.seborrheic_keratosis), (orig.melanoma, orig.seborrheic_keratosis));
        }
        let flipped = &out.images[1].1;
        let orig = &out.images[0].1;
        assert_eq!(flipped.get(0, 0), orig.get(5, 0));
    }

    #[test]
    fn seeded_ranges_are_reproducible() {
        let (m, src) = fixture(4);
        let presets = vec![Preset::Rotate(Amount::Range(-30.0, 30.0)), Preset::Scale(Amount::Range(0.8, 1.2))];
        let a = augment_dataset(&m, &AugmentPolicy::new(presets.clone(), 42), &src).unwrap();
        let b = augment_dataset(&m, &AugmentPolicy::new(presets.clone(), 42), &src).unwrap();
        let c = augment_dataset(&m, &AugmentPolicy::new(presets, 43), &src).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.images.iter().map(|p| &p.1).collect::<Vec<_>>(), b.images.iter().map(|p| &p.1).collect::<Vec<_>>());
        assert_ne!(a.images.iter().map(|p| &p.1).collect::<Vec<_>>(), c.images.iter().map(|p| &p.1).collect::<Vec<_>>());
    }

    #[test]
    fn worker_count_does_not_matter() {
        let (m, src) = fixture(6);
        let policy = AugmentPolicy::new(parse_presets("rotate:-20..20,scale:1.3").unwrap(), 5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| augment_dataset(&m, &policy, &src).unwrap())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.manifest, four.manifest);
        for (a, b) in one.images.iter().zip(&four.images) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_image_is_an_error() {
        let (m, _) = fixture(2);
        let err = augment_dataset(&m, &AugmentPolicy::new(vec![], 0), &MemorySource::new()).unwrap_err();
        assert!(err.to_string().contains("img0") || err.to_string().contains("img1"), "{err}");
    }
}
