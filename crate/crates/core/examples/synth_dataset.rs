//! Generate a small synthetic dataset, write it as CSV and report travel statistics.
//!
//! Run with `cargo run --example synth_dataset`.

use xrid::motion::{dataset_files, load_recording, travel_stats, ColumnMap};
use xrid::synth::{write_dataset, DatasetSpec};

fn main() -> xrid::Result<()> {
    let dir = std::env::temp_dir().join("xrid-example-synth");
    let spec = DatasetSpec { users: 4, sessions: 2, duration_min: 2.0, rate_hz: 15.0, seed: 11 };
    let written = write_dataset(&spec, &dir)?;
    println!("wrote {} recordings to {}", written.len(), dir.display());

    println!("{:<8} {:>7} {:>10} {:>9}", "file", "frames", "path_m", "m_per_min");
    for path in dataset_files(&dir)? {
        let rec = load_recording(&path, &ColumnMap::default())?;
        let stats = travel_stats(&rec);
        println!(
            "{:<8} {:>7} {:>10.2} {:>9.2}",
            format!("{}_{}", rec.user_id(), rec.session_id()),
            rec.len(),
            stats.total_horizontal_path_m,
            stats.meters_per_minute
        );
    }
    Ok(())
}
