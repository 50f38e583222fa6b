//! Generate a few synthetic sequences, write them in the dataset format and
//! read them back.

use anchorflow::synthdata::{generate_dataset, read_dataset, write_dataset, Manifest, MotionSpec};

fn main() -> anchorflow::Result<()> {
    let mut spec = MotionSpec::default();
    spec.occlusion.dropout = 0.3;
    let records = generate_dataset(42, "demo", 4, &spec)?;
    for r in &records {
        let start = r.gt.frames[0].world_transl;
        let end = r.gt.frames[r.len() - 1].world_transl;
        println!(
            "{}: {} frames, walked {:.2} m, {:.0}% keypoints visible",
            r.meta.id,
            r.len(),
            (end - start).norm(),
            100.0 * r.obs.visible_fraction()
        );
    }

    let dir = std::env::temp_dir().join("anchorflow_synthetic_data");
    std::fs::create_dir_all(&dir).map_err(|e| anchorflow::Error::InvalidArgument(e.to_string()))?;
    let path = dir.join("demo.fmkd");
    write_dataset(&records, &Manifest::new(&records, Some(spec)), &path)?;
    let (manifest, back) = read_dataset(&path)?;
    println!("{} records read back from {}, identical: {}", manifest.records.len(), path.display(), back == records);
    Ok(())
}
