//! Random hyperparameter search scored by validation minimum accuracy.
//!
//! Run with `cargo run --release --example random_search`.

use xrid::encoding::{encode, EncodingKind};
use xrid::nn::{random_search, train_with_history, Architecture, SearchSpace, TrainConfig};
use xrid::sampling::{split_sessions, Span, SplitSpec, WindowSpec};
use xrid::synth::{gen_dataset, DatasetSpec};

fn main() -> xrid::Result<()> {
    let data = gen_dataset(&DatasetSpec { users: 3, sessions: 1, duration_min: 2.0, rate_hz: 15.0, seed: 8 })?;
    let seqs = data.iter().map(|r| encode(r, EncodingKind::Brv)).collect::<xrid::Result<Vec<_>>>()?;
    let splits = split_sessions(&seqs, &SplitSpec { validation_tail_min: 0.5, enrollment: Span::All, enrollment_seed: 0 })?;

    // Narrowed ranges keep each trial to a few seconds.
    let space = SearchSpace { gru_hidden: 8..=32, layers: 1..=2, ..SearchSpace::default() };
    let tc = TrainConfig {
        window: WindowSpec::new(60, 1)?,
        batch_size: 32,
        train_stride: 15,
        val_stride: 15,
        epochs_min: 2,
        max_epochs: 4,
        ..Default::default()
    };

    let outcome = random_search(&space, Architecture::Gru, EncodingKind::Brv, 3, 4, 42, |config, trial| {
        let out = train_with_history::<f32>(config, &TrainConfig { seed: trial as u64, ..tc.clone() }, &splits)?;
        Ok(out.checkpoint.meta.val_min_accuracy)
    })?;
    print!("{}", outcome.to_csv());
    let best = outcome.best_run();
    println!("best trial {} score {:.3}: {:?}", best.index, best.score, best.config);
    Ok(())
}
