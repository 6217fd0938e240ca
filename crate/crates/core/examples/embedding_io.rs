//! Write a dataset in the binary embedding format, read it back, and drop a
//! modality from one record to show how missing inputs are stored.

use trifuse::data::{self, SyntheticConfig};
use trifuse::{ModalityId, SplitData};

fn main() -> trifuse::Result<()> {
    let cfg = SyntheticConfig {
        num_identities: 8,
        ..Default::default()
    };
    let mut split = SplitData::synthetic(&cfg)?;
    split.test[0].mask.set(ModalityId::Gesture, false);

    let dir = std::env::temp_dir().join("trifuse-embedding-io");
    let manifest = data::write_split_dir(&dir, &split, Some(&cfg))?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);

    let back = data::ingest(&dir)?;
    println!(
        "read back {} / {} / {} records; first test record mask: {}",
        back.train.len(),
        back.val.len(),
        back.test.len(),
        back.test[0].mask
    );
    assert_eq!(back.train, split.train);
    Ok(())
}
