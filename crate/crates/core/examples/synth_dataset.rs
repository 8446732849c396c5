//! Writes a synthetic vessel dataset in the on-disk layout the trainer reads.
//!
//! ```text
//! cargo run --release --example synth_dataset -- /tmp/synth [seed] [count] [size]
//! ```

use std::path::PathBuf;

use swin_res_net::data::scan_dataset;
use swin_res_net::synth::{synth_generate, synth_images};

fn main() -> swin_res_net::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth".into()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(42);
    let count = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let size = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);

    for (i, img) in synth_images(seed, count, size)?.iter().enumerate() {
        println!("synth_{i:03}: vessel fraction {:.3}", img.vessel_fraction());
    }
    synth_generate(seed, count, size, &out)?;
    let manifest = scan_dataset(&out)?;
    println!(
        "{} pairs under {} ({} with field-of-view masks)",
        manifest.samples.len(),
        out.display(),
        manifest.samples.iter().filter(|s| s.fov.is_some()).count()
    );
    Ok(())
}
