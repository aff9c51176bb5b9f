//! Class-balancing upsampling: the 1000-vs-200 case, then a fixture
//! with multi-lesion slices where balance can only be approximate.
//!
//!     cargo run --example upsample

use lesion_selftrain::dataset::{class_counts, load_deeplesion_index, upsample_balance};
use lesion_selftrain::{Annotation, BBox, LesionTag, SliceKey, SliceRecord};

fn slice(patient: &str, i: u32, tag: LesionTag) -> SliceRecord {
    let b = BBox::new(50.0, 50.0, 80.0, 80.0).unwrap();
    SliceRecord::new(SliceKey::new(patient, "01", "01", i), vec![Annotation::ground_truth(b, tag)])
}

fn main() -> lesion_selftrain::Result<()> {
    let mut records: Vec<SliceRecord> = (0..1000).map(|i| slice("000001", i, LesionTag::Lung)).collect();
    records.extend((0..200).map(|i| slice("000002", i, LesionTag::Bone)));
    let up = upsample_balance(&records)?;
    let bone = up.records.iter().find(|r| r.has_tag(LesionTag::Bone)).unwrap();
    println!(
        "lung 1000, bone 200 -> each bone slice repeated {} times; bone now {}",
        bone.repeat_count,
        class_counts(&up.records).get(LesionTag::Bone)
    );

    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/DL_info_mini.csv").into());
    let index = load_deeplesion_index(&path)?;
    let tagged: Vec<SliceRecord> = index
        .records()
        .filter(|r| r.annotations.iter().all(|a| a.tag.is_tagged()))
        .cloned()
        .collect();
    let r = upsample_balance(&tagged)?.report;
    println!("\n{path}: target {}", r.target);
    for (tag, before) in r.before.iter() {
        println!("  {:12} {:3} -> {:3}", tag.as_str(), before, r.after.get(tag));
    }
    println!("disparity {} (bound {}), {} slice copies added", r.disparity, r.slice_bound, r.added_slices);
    Ok(())
}
