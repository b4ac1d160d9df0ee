//! Regenerates the synthetic fixture slides shipped under `fixtures/`.
//!
//! ```text
//! cargo run -p histopipe-cli --example make_fixtures [out_dir]
//! ```

use histopipe_core::fixtures::synthetic_slide;
use histopipe_core::io::{write_image_with_meta, write_text};
use std::path::PathBuf;

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures"));
    std::fs::create_dir_all(&out).expect("create fixture dir");

    for (slide_id, width, height, lesions, seed) in
        [("slide_a", 320u32, 280u32, 6usize, 7u64), ("slide_b", 260, 240, 3, 11)]
    {
        let fixture = synthetic_slide(slide_id, width, height, 1.0, lesions, seed);
        let png = out.join(format!("{slide_id}.png"));
        write_image_with_meta(&png, &fixture.image).expect("write slide");
        write_text(
            &out.join(format!("{slide_id}.ann")),
            &fixture.annotations.to_text(),
        )
        .expect("write annotations");
        println!(
            "{}: {width}x{height} at 1.0 um/px, {} annotated regions",
            png.display(),
            fixture.annotations.regions().len()
        );
    }
}
