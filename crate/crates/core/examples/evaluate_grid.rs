//! Enrollment-time by use-time accuracy grid on a small synthetic dataset.
//!
//! Run with `cargo run --release --example evaluate_grid`.

use xrid::encoding::{encode, EncodingKind};
use xrid::identify::{eval_grid, GridConfig};
use xrid::nn::{ModelConfig, TrainConfig};
use xrid::sampling::{Span, WindowSpec};
use xrid::synth::{gen_dataset, DatasetSpec};

fn main() -> xrid::Result<()> {
    let data = gen_dataset(&DatasetSpec { users: 3, sessions: 2, duration_min: 3.0, rate_hz: 15.0, seed: 21 })?;
    let seqs = data.iter().map(|r| encode(r, EncodingKind::Bra)).collect::<xrid::Result<Vec<_>>>()?;

    let window = WindowSpec::new(90, 1)?;
    let model = ModelConfig::cnn(EncodingKind::Bra, 3, 3, vec![8, 16], 0.1, 0.003);
    let tc = TrainConfig {
        window,
        batch_size: 32,
        train_stride: 15,
        val_stride: 15,
        epochs_min: 3,
        max_epochs: 8,
        ..Default::default()
    };
    let grid = GridConfig {
        // 3 min is longer than the training footage, so that row is reported as unavailable.
        t_enr: vec![Span::Minutes(0.5), Span::Minutes(3.0), Span::All],
        t_use: vec![Span::Minutes(0.25), Span::Minutes(1.0), Span::All],
        repeats: 2,
        seed: 1,
        validation_tail_min: 0.5,
        eval_window: window,
    };
    let report = eval_grid::<f32>(&seqs, &model, &tc, &grid)?;
    print!("{}", report.summary_table());

    let dir = std::env::temp_dir().join("xrid-example-grid");
    report.write(&dir)?;
    println!("grid.csv, per_class.csv and summary.txt written to {}", dir.display());
    Ok(())
}
