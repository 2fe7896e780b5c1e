//! Regenerates the shipped regression corpus and frame transcripts.
//!
//! ```text
//! cargo run -p csp-core --example gen_artifacts
//! ```
//!
//! Writes `corpus/*.cspf`, `transcripts/*.frames` and the matching
//! `transcripts/*.expected` reassembly output, all for the default config.
//! The `artifacts` integration test fails if the checked-in files drift.

use std::fs;
use std::path::Path;

use csp_core::cli::run_cli;
use csp_core::fuzz::{encode_frame_stream, regression_corpus, regression_transcripts, Corpus};
use csp_core::Config;

fn main() -> csp_core::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let cfg = Config::default();
    fs::create_dir_all(root.join("corpus"))?;
    fs::create_dir_all(root.join("transcripts"))?;

    regression_corpus(&cfg)?.save(root.join("corpus/regressions.cspf"))?;

    for (name, frames) in regression_transcripts(&cfg)? {
        Corpus {
            cases: vec![encode_frame_stream(&frames)],
        }
        .save(root.join(format!("corpus/{name}.cspf")))?;

        let mut text = format!("# {name}: {} frames, default config\n", frames.len());
        for f in &frames {
            text.push_str(&format!("{f}\n"));
        }
        let frames_path = root.join(format!("transcripts/{name}.frames"));
        fs::write(&frames_path, text)?;

        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli(
            ["csptool", "reassemble", "--in", frames_path.to_str().unwrap()],
            &mut out,
            &mut err,
        );
        fs::write(root.join(format!("transcripts/{name}.expected")), &out)?;
        println!("{name}: {} frames, reassemble exit {code}", frames.len());
    }
    Ok(())
}
