//! Builds a small on-disk dataset, reopens it and prints its splits.

use aligncvc::data::{build_dataset, Dataset, DatasetConfig, Split};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("aligncvc_dataset_example");
    let cfg = DatasetConfig { test_count: 2, ..DatasetConfig::default() };
    let manifest = build_dataset(6, 1, &dir, &cfg)?;
    println!("built {} scenes at {}x{} into {}", manifest.count, manifest.resolution, manifest.resolution, dir.display());
    let ds = Dataset::open(&dir)?;
    for split in [Split::Train, Split::Test] {
        println!("{split:?}: scenes {:?}", ds.manifest.split(split));
    }
    let batch = ds.load_batch(&[0, 1], Some(5))?;
    println!("loaded batch of {} with views {:?}", batch.len(), batch[0].views.views().shape());
    Ok(())
}

