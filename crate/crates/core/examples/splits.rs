//! Builds the patient-disjoint splits from a DeepLesion-style index.
//!
//!     cargo run --example splits [DL_info.csv test_slices.txt [seed]]

use lesion_selftrain::dataset::{build_splits, load_deeplesion_index, read_slice_list};
use lesion_selftrain::reports::split_table;

fn main() -> lesion_selftrain::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fixtures = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let (index, test) = match args.as_slice() {
        [i, t, ..] => (i.clone(), t.clone()),
        _ => (format!("{fixtures}/DL_info_mini.csv"), format!("{fixtures}/test_slices.txt")),
    };
    let seed = args.get(2).map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");

    let index = load_deeplesion_index(&index)?;
    let test = read_slice_list(&test)?;
    let splits = build_splits(&index, &test, 0.7, seed)?;
    print!("{}", split_table(&splits.summary()));
    splits.check_disjoint()?;
    println!("patient sets are disjoint (seed {seed})");
    Ok(())
}
