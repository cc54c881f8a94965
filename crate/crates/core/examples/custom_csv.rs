//! Load a recording with device-specific headers and millisecond timestamps,
//! then resample it to 15 Hz and trim both ends.
//!
//! Run with `cargo run --example custom_csv`.

use std::fmt::Write as _;

use xrid::motion::{canonical_columns, load_recording_with_report, resample, trim, ColumnMap};

fn main() -> xrid::Result<()> {
    let dir = std::env::temp_dir().join("xrid-example-custom");
    std::fs::create_dir_all(&dir)?;

    // A 72 Hz capture with vendor headers: `Time` in ms and `HeadPosX`-style columns.
    let vendor: Vec<String> = canonical_columns()
        .iter()
        .map(|c| if c == "timestamp_s" { "Time".to_string() } else { c.replace('_', "").to_uppercase() })
        .collect();
    let mut csv = vendor.join(",") + "\n";
    for k in 0..72 * 20 {
        let t = k as f64 / 72.0;
        let _ = write!(csv, "{:.3}", t * 1000.0);
        for _device in 0..3 {
            let (s, c) = (t * 0.8).sin_cos();
            let _ = write!(csv, ",{:.4},{:.4},{:.4},0,{:.6},0,{:.6}", 10.0 * s, 160.0 + c, 5.0 * t, (0.2 * s).sin(), (0.2 * s).cos());
        }
        csv.push('\n');
    }
    // One corrupt row: rejected and counted rather than fatal.
    csv.push_str(&format!("20000{}\n", ",0".repeat(21)));
    let path = dir.join("alice_s1.csv");
    std::fs::write(&path, csv)?;

    let mut map_text = String::from("timestamp_s=Time\ntimestamp_scale=0.001\n");
    for (canonical, source) in canonical_columns().iter().zip(&vendor).skip(1) {
        let _ = writeln!(map_text, "{canonical}={source}");
    }
    let columns = ColumnMap::parse(&map_text)?;

    let (rec, report) = load_recording_with_report(&path, &columns)?;
    println!(
        "loaded user={} session={}: {} rows, {} rejected, {:.2} s",
        rec.user_id(),
        rec.session_id(),
        report.rows,
        report.rejected_rows,
        rec.duration_s()
    );

    let at15 = resample(&rec, 15.0)?;
    println!("resampled to 15 Hz: {} frames", at15.len());
    let trimmed = trim(&at15, 2.0, 2.0)?;
    println!("trimmed 2 s + 2 s: {} frames, {:.2} s", trimmed.len(), trimmed.duration_s());
    Ok(())
}
