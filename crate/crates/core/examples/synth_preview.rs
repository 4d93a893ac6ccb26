//! Writes a few synthetic pairs and their soft masks as PNGs.
//!
//! `cargo run -p textwipe-core --example synth_preview -- OUT_DIR`

use textwipe_core::data::{synth_sample, SynthConfig};
use textwipe_core::geometry::{render_soft_mask, MaskMode};

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synth_preview".into());
    std::fs::create_dir_all(&out).unwrap();
    let cfg = SynthConfig::default();
    for i in 0..6 {
        let s = synth_sample(&cfg, i);
        let m = render_soft_mask(&s.polygons, 64, 64, 0.9, MaskMode::Soft).unwrap();
        s.i_in.save_png(format!("{out}/{}_in.png", s.id)).unwrap();
        s.i_gt.save_png(format!("{out}/{}_gt.png", s.id)).unwrap();
        m.to_image()
            .save_png(format!("{out}/{}_mask.png", s.id))
            .unwrap();
    }
}
