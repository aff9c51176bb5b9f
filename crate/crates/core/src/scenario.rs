//! Generated DeepLesion-shaped indexes for desk-scale runs.
//!
//! The reference scenario has roughly 500 slices: an official training
//! split (the unlabeled pool) larger than the labeled part, class prevalence taken
//! from the labeled training split of the original data (bone rarest,
//! lung most common) and about half of slices carrying two lesions.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, DatasetIndex, IndexEntry, LesionTag, OfficialSplit, SliceKey, SliceRecord};
use crate::detector::SyntheticConfig;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Patients in the official training split (the unlabeled pool).
    pub train_patients: usize,
    /// Patients in the official validation split.
    pub val_patients: usize,
    /// Patients in the official test split; all of them are fully annotated.
    pub test_patients: usize,
    pub slices_per_patient: usize,
    /// Probability that a slice carries a second lesion.
    pub second_lesion: f64,
    /// Relative class prevalence.
    pub prevalence: BTreeMap<LesionTag, f64>,
    pub image_size: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        use LesionTag::*;
        ScenarioConfig {
            train_patients: 70,
            val_patients: 15,
            test_patients: 15,
            slices_per_patient: 5,
            second_lesion: 0.5,
            prevalence: [
                (Bone, 97.0),
                (Kidney, 195.0),
                (SoftTissue, 288.0),
                (Pelvis, 321.0),
                (Liver, 426.0),
                (Mediastinum, 613.0),
                (Abdomen, 788.0),
                (Lung, 1039.0),
            ]
            .into(),
            image_size: 512.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub index: DatasetIndex,
    /// The fully annotated test slices.
    pub test_list: BTreeSet<SliceKey>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices_per_patient == 0 || self.test_patients == 0 {
            return Err(Error::Config("scenario needs slices and test patients".into()));
        }
        if !(0.0..=1.0).contains(&self.second_lesion) {
            return Err(Error::Config(format!("second_lesion {} outside [0, 1]", self.second_lesion)));
        }
        if self.prevalence.values().any(|w| *w < 0.0) || self.prevalence.values().sum::<f64>() <= 0.0 {
            return Err(Error::Config("scenario prevalence must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Scenario> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let classes: Vec<(LesionTag, f64)> = self.prevalence.iter().map(|(t, w)| (*t, *w)).collect();
        let total: f64 = classes.iter().map(|c| c.1).sum();
        let draw_tag = |rng: &mut ChaCha8Rng| {
            let mut x = rng.random_range(0.0..total);
            for (t, w) in &classes {
                if x < *w {
                    return *t;
                }
                x -= w;
            }
            classes.last().expect("non-empty prevalence").0
        };
        let size = self.image_size;
        let draw_box = |rng: &mut ChaCha8Rng, slot: usize| {
            // two lesions on a slice occupy different halves
            let w = rng.random_range(12.0..60.0);
            let h = rng.random_range(12.0..60.0);
            let half = size / 2.0;
            let x = slot as f64 * half + rng.random_range(0.0..half - w);
            let y = rng.random_range(0.0..size - h);
            BBox::new(x, y, x + w, y + h).expect("positive extent")
        };

        let groups = [
            (OfficialSplit::Train, self.train_patients),
            (OfficialSplit::Val, self.val_patients),
            (OfficialSplit::Test, self.test_patients),
        ];
        let mut entries = Vec::new();
        let mut test_list = BTreeSet::new();
        let mut pid = 0;
        for (split, n) in groups {
            for _ in 0..n {
                pid += 1;
                let patient = format!("{pid:06}");
                for s in 0..self.slices_per_patient {
                    let key = SliceKey::new(&patient, "01", "01", 100 + 10 * s as u32);
                    let lesions = if rng.random_bool(self.second_lesion) { 2 } else { 1 };
                    let annotations: Vec<Annotation> = (0..lesions)
                        .map(|slot| {
                            let b = draw_box(&mut rng, slot);
                            // Unlike the real index, the official training split
                            // keeps its tags here: they are the hidden truth the
                            // synthetic backend detects. Splitting strips them.
                            Annotation::ground_truth(b, draw_tag(&mut rng))
                        })
                        .collect();
                    if split == OfficialSplit::Test {
                        test_list.insert(key.clone());
                    }
                    let mut record = SliceRecord::new(key, annotations);
                    record.image_ref = Some(record.key.image_ref());
                    entries.push(IndexEntry { record, split });
                }
            }
        }
        Ok(Scenario {
            index: DatasetIndex::from_entries(entries),
            test_list,
        })
    }
}

/// Synthetic backend settings used with the reference scenario: rare
/// classes start harder than common ones, and confidences are noisy
/// enough that thresholds between 75% and 90% matter.
pub fn reference_backend(seed: u64) -> SyntheticConfig {
    use LesionTag::*;
    SyntheticConfig {
        base_sensitivity: [
            (Bone, 0.70),
            (Kidney, 0.75),
            (SoftTissue, 0.75),
            (Pelvis, 0.77),
            (Liver, 0.83),
            (Mediastinum, 0.85),
            (Abdomen, 0.77),
            (Lung, 0.90),
        ]
        .into(),
        kappa: 200.0,
        confidence_noise: 0.25,
        false_positive_rate: 1.0,
        box_jitter: 0.05,
        epochs: 5,
        epoch_spread: 0.02,
        image_size: 512.0,
        seed,
    }
}
