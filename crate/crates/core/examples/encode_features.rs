//! Encode one recording as body-relative poses, velocities and accelerations.
//!
//! Run with `cargo run --example encode_features`.

use xrid::encoding::{encode, write_feature_csv, EncodingKind};
use xrid::synth::{gen_recording, gen_user_params};

fn main() -> xrid::Result<()> {
    let rec = gen_recording(&gen_user_params(3), "demo", 1, 0.5, 15.0, 99)?;
    println!("recording: {} frames over {:.1} s", rec.len(), rec.duration_s());

    for kind in [EncodingKind::Br, EncodingKind::Brv, EncodingKind::Bra] {
        let seq = encode(&rec, kind)?;
        let first: Vec<String> = seq.frames[0].iter().map(|v| format!("{v:+.3}")).collect();
        println!("{:<4} {} frames, first frame [{}]", kind.as_str(), seq.len(), first.join(" "));
    }

    let path = std::env::temp_dir().join("xrid-example-bra.csv");
    write_feature_csv(&encode(&rec, EncodingKind::Bra)?, &path)?;
    println!("BRA features written to {}", path.display());
    Ok(())
}
