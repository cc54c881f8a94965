//! Train a small CNN on session 1, save and reload the checkpoint, then
//! identify users from one-minute segments of session 2.
//!
//! Run with `cargo run --release --example train_identify`.

use xrid::encoding::{encode, EncodingKind, FeatureSequence};
use xrid::identify::identify_segment;
use xrid::nn::{load_checkpoint, save_checkpoint, train_with_history, Checkpoint, ModelConfig, TrainConfig};
use xrid::sampling::{split_sessions, Span, SplitSpec, WindowSpec};
use xrid::synth::{gen_dataset, DatasetSpec};

fn main() -> xrid::Result<()> {
    let data = gen_dataset(&DatasetSpec { users: 4, sessions: 2, duration_min: 3.0, rate_hz: 15.0, seed: 5 })?;
    let seqs = data.iter().map(|r| encode(r, EncodingKind::Bra)).collect::<xrid::Result<Vec<_>>>()?;
    let splits = split_sessions(&seqs, &SplitSpec { validation_tail_min: 0.5, enrollment: Span::All, enrollment_seed: 0 })?;

    let window = WindowSpec::new(150, 1)?;
    let model = ModelConfig::cnn(EncodingKind::Bra, splits.users.len(), 3, vec![16, 32], 0.2, 0.002);
    let tc = TrainConfig {
        window,
        batch_size: 32,
        train_stride: 15,
        val_stride: 15,
        epochs_min: 5,
        max_epochs: 20,
        ..Default::default()
    };
    let outcome = train_with_history::<f32>(&model, &tc, &splits)?;
    for e in &outcome.history {
        println!(
            "epoch {:>2}  train_loss {:.4}  val_loss {:.4}  val_min_acc {:.3}",
            e.epoch, e.train_loss, e.val_loss, e.val_min_accuracy
        );
    }
    println!("kept epoch {}", outcome.checkpoint.meta.epoch);

    let path = std::env::temp_dir().join("xrid-example-model.ckpt");
    save_checkpoint(&outcome.checkpoint, &path)?;
    let ckpt: Checkpoint<f32> = load_checkpoint(&path)?;

    let minute = 60 * 15;
    for seq in &splits.test {
        let segment: FeatureSequence = seq.slice(0..minute.min(seq.len()));
        let vote = identify_segment(&ckpt, &segment, &window)?;
        println!(
            "{} -> {} ({} windows, votes {:?})",
            seq.user_id,
            splits.users.user(vote.predicted),
            vote.window_count,
            vote.vote_counts
        );
    }
    Ok(())
}
