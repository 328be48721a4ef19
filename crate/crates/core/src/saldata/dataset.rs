use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    fixations_to_saliency, io, load_fiwi, synth, Category, DataError, FixationSet, Layout, SaliencyMap, Stimulus,
};
use crate::seed::sub_seed;

pub const DATASET_MANIFEST: &str = "dataset.json";

/// A stimulus with its fixations and the ground-truth map built from them.
#[derive(Clone, Debug)]
pub struct Sample {
    pub stimulus: Stimulus,
    pub fixations: FixationSet,
    pub gt: SaliencyMap,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    seed: u64,
    layout: Layout,
    stimulus: String,
    fixations: String,
    mask: String,
}

impl Dataset {
    pub fn from_pairs(pairs: Vec<(Stimulus, FixationSet)>, sigma_fix: f64) -> Result<Dataset, DataError> {
        let samples = pairs
            .into_iter()
            .map(|(stimulus, fixations)| {
                fixations.check_bounds(stimulus.width(), stimulus.height())?;
                let gt = fixations_to_saliency(&fixations, stimulus.width(), stimulus.height(), sigma_fix)?;
                Ok(Sample {
                    stimulus,
                    fixations,
                    gt,
                })
            })
            .collect::<Result<_, DataError>>()?;
        Ok(Dataset { samples })
    }

    /// `n` generated pages cycling through `layouts`; page `i` uses seed
    /// `sub_seed(seed, i)`.
    pub fn synthetic(
        n: usize,
        layouts: &[Layout],
        seed: u64,
        width: usize,
        height: usize,
        sigma_fix: f64,
    ) -> Result<Dataset, DataError> {
        let pairs = synthetic_pages(n, layouts, seed, width, height)
            .into_iter()
            .map(|(_, s, f)| (s, f))
            .collect();
        Dataset::from_pairs(pairs, sigma_fix)
    }

    /// A directory written by [`write_dataset`], or otherwise a FiWI tree.
    pub fn load(dir: impl AsRef<Path>, width: usize, height: usize, sigma_fix: f64) -> Result<Dataset, DataError> {
        let dir = dir.as_ref();
        let pairs = if dir.join(DATASET_MANIFEST).is_file() {
            read_dataset(dir)?
                .into_iter()
                .map(|(s, f)| {
                    let native = (s.width(), s.height());
                    (s.resized(width, height), f.rescaled(native, (width, height)))
                })
                .collect()
        } else {
            load_fiwi(dir, width, height)?
        };
        Dataset::from_pairs(pairs, sigma_fix)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// SHA-256 over ids, extents, pixels and fixations.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.stimulus.id.as_bytes());
            h.update((s.stimulus.width() as u64).to_le_bytes());
            h.update((s.stimulus.height() as u64).to_le_bytes());
            for v in s.stimulus.pixels() {
                h.update(v.to_le_bytes());
            }
            for p in &s.fixations.points {
                h.update((p.x as u64).to_le_bytes());
                h.update((p.y as u64).to_le_bytes());
                h.update(p.observer.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// `(page seed, stimulus, fixations)` for `n` pages cycling through `layouts`.
pub fn synthetic_pages(
    n: usize,
    layouts: &[Layout],
    seed: u64,
    width: usize,
    height: usize,
) -> Vec<(u64, Stimulus, FixationSet)> {
    assert!(!layouts.is_empty(), "at least one layout");
    (0..n)
        .map(|i| {
            let page_seed = sub_seed(seed, i as u64);
            let (s, f) = synth::synth_page_sized(page_seed, layouts[i % layouts.len()], width, height);
            (page_seed, s, f)
        })
        .collect()
}

/// Writes `page_NNN.ppm`, `page_NNN.csv`, `page_NNN_mask.pgm` and the
/// [`DATASET_MANIFEST`] listing them.
pub fn write_dataset(dir: impl AsRef<Path>, pages: &[(u64, Stimulus, FixationSet)]) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, (seed, stim, fix)) in pages.iter().enumerate() {
        let layout = stim
            .layout
            .ok_or_else(|| DataError::Manifest(format!("stimulus {:?} has no layout", stim.id)))?;
        let mask = stim
            .element_mask()
            .ok_or_else(|| DataError::Manifest(format!("stimulus {:?} has no element mask", stim.id)))?;
        let stem = format!("page_{i:03}");
        let e = ManifestEntry {
            seed: *seed,
            layout,
            stimulus: format!("{stem}.ppm"),
            fixations: format!("{stem}.csv"),
            mask: format!("{stem}_mask.pgm"),
        };
        io::save_ppm(dir.join(&e.stimulus), stim)?;
        io::save_fixations(dir.join(&e.fixations), fix)?;
        io::write_file(&dir.join(&e.mask), &io::encode_mask(mask, stim.width(), stim.height()))?;
        entries.push(e);
    }
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    io::write_file(&dir.join(DATASET_MANIFEST), json.as_bytes())
}

/// Reads a directory written by [`write_dataset`] at its stored resolution.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<(Stimulus, FixationSet)>, DataError> {
    let dir = dir.as_ref();
    let path = dir.join(DATASET_MANIFEST);
    let text = io::read_file(&path)?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_slice(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    entries
        .into_iter()
        .map(|e| {
            let mut stim = io::load_stimulus(dir.join(&e.stimulus), Category::Synthetic)?.with_layout(e.layout);
            let (w, h, mask) = io::load_mask(dir.join(&e.mask))?;
            if (w, h) != (stim.width(), stim.height()) {
                return Err(DataError::Extents {
                    expected: (stim.width(), stim.height()),
                    detail: format!("mask {} is {w}x{h}", e.mask),
                });
            }
            stim = stim.with_mask(mask)?;
            let fix = io::load_fixations(dir.join(&e.fixations), &stim.id)?;
            Ok((stim, fix))
        })
        .collect()
}

/// Seeded shuffle of `0..n` split into `(train, held_out)`; the held-out part
/// has `round(n * fraction)` items, at least one when `n >= 2` and `fraction > 0`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut k = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let k = k.min(n);
    let held = idx.split_off(n - k);
    (idx, held)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_indices(60, 0.2, 5);
        assert_eq!((a.len(), b.len()), (48, 12));
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_eq!(split_indices(60, 0.2, 5), (a, b));
        assert_eq!(split_indices(3, 0.01, 1).1.len(), 1);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = Dataset::synthetic(2, &Layout::ALL, 1, 32, 24, 2.0).unwrap();
        let b = Dataset::synthetic(2, &Layout::ALL, 1, 32, 24, 2.0).unwrap();
        let c = Dataset::synthetic(2, &Layout::ALL, 2, 32, 24, 2.0).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
