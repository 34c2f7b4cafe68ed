//! Writes a few synthetic HDR clips as EXR sources, handy for trying the
//! CLI end to end without real footage.
//!
//! Usage: cargo run -p hdrvid-core --example make_demo_sources -- OUT_DIR [CLIPS] [FRAMES]

use hdrvid_core::datagen::io::write_hdr_exr;
use hdrvid_core::datagen::synthetic_radiance_video;

fn main() {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().expect("usage: make_demo_sources OUT_DIR"));
    let clips: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(2);
    let frames: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(7);

    for c in 0..clips {
        let dir = out.join(format!("scene{c}"));
        std::fs::create_dir_all(&dir).unwrap();
        let clip = synthetic_radiance_video(48, 48, frames, 900 + c as u64, 0.4, 0.2);
        for (i, frame) in clip.iter().enumerate() {
            write_hdr_exr(&dir.join(format!("frame_{i:03}.exr")), frame.pixels()).unwrap();
        }
    }
    println!("wrote {clips} clips x {frames} frames under {}", out.display());
}
