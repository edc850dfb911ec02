// Renders a synthetic identity set and writes it as PPM files plus a
// manifest. Usage: `synthetic_data [out_dir]`.

use ftn::data::{generate, write_dataset, Dataset, Split, SyntheticSpec};

fn main() -> ftn::Result<()> {
    let out: std::path::PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("ftn-synthetic"));
    let spec = SyntheticSpec { num_ids: 6, imgs_per_id: 4, split: Split::DisjointHalves, ..Default::default() };
    let data = generate(&spec, 42)?;
    write_dataset(&data, &out)?;

    let ds = Dataset::<f32>::load(&out)?;
    let (q, g) = ds.query_gallery()?;
    println!("wrote {} images to {}", ds.rows.len(), out.display());
    println!("train {} / query {} / gallery {}", ds.train()?.len(), q.len(), g.len());
    for row in ds.rows.iter().step_by(spec.imgs_per_id) {
        let fg = data.silhouettes[ds.rows.iter().position(|r| r.file == row.file).unwrap()].iter().filter(|&&s| s).count();
        println!("{} id {} cam {} {:?} foreground {} px", row.file, row.id, row.cam, row.split, fg);
    }
    Ok(())
}
