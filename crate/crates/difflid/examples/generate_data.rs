//! Build a small synthetic scene dataset — procedural landscapes plus
//! depth-dependent haze — and print what was produced. PNG previews are
//! exported next to the raw tensors so the scenes can be eyeballed.
//!
//! Run with: cargo run --release --example generate_data [out_dir]

use std::path::PathBuf;

use difflid::hazegen::{build_dataset, load_dataset, DatasetConfig};
use difflid::tensor::derive_seed;
use difflid::Result;

fn main() -> Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("difflid-example-data"));

    let cfg = DatasetConfig { n_train: 6, n_test: 2, size: 32, export_png: true, ..Default::default() };
    let manifest = build_dataset(&cfg, derive_seed(7, "data"), &out)?;
    println!("wrote {} train + {} test scenes to {}", manifest.train.len(), manifest.test.len(), out.display());

    let data = load_dataset(&out)?;
    println!("\n  id    beta  airlight (r,g,b)      clean mean  hazy mean");
    for p in data.train.iter().chain(data.test.iter()) {
        let a = p.params.airlight;
        println!(
            "  {:>2}  {:>6.3}  ({:.2}, {:.2}, {:.2})   {:>10.4}  {:>9.4}",
            p.image_id,
            p.params.beta,
            a[0],
            a[1],
            a[2],
            p.clean.mean(),
            p.hazy.mean(),
        );
    }
    println!("\nhaze always brightens toward the airlight and compresses contrast;");
    println!("PNG previews: {}/train/scene_00000_{{clean,hazy}}.png etc.", out.display());
    Ok(())
}
