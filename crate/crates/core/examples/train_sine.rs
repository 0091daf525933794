//! Trains one model and prints per-epoch test MSE.
//!
//! `cargo run --release --example train_sine -- <variant> <seed> <epochs> <task> <latent-dim>`

use ndp::data::{make_dataset, Task, TaskSpec};
use ndp::model::{Model, ModelSpec, Variant};
use ndp::vi::{train_with, TrainConfig};

fn main() -> ndp::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = args.first().map_or("ndp", String::as_str).parse()?;
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    let task: Task = args.get(3).map_or("sine", String::as_str).parse()?;
    let spec = TaskSpec::new(task, seed);
    let data = make_dataset(&spec)?;
    let mut mspec = ModelSpec::for_task(&spec, variant);
    if let Some(l) = args.get(4) {
        mspec.latent_dim = l.parse().expect("latent dim");
    }
    let mut model = Model::new(mspec, seed)?;
    println!("{variant} on {task}: {} parameters", model.param_count());
    let base = if task.is_1d() {
        TrainConfig::default()
    } else {
        TrainConfig::lotka_volterra()
    };
    let epochs = args.get(2).map_or(base.epochs, |s| s.parse().expect("epochs"));
    let cfg = TrainConfig { epochs, seed, ..base };
    let h = train_with(&mut model, &data.train, &data.test, &cfg, |r| {
        println!("epoch {:>3}  loss {:>10.4}  mse {:.5}  {:.1}s", r.epoch, r.train_loss, r.test_mse, r.seconds);
    })?;
    if let Some(best) = h.best() {
        println!("best epoch {} mse {:.5}", best.epoch, best.test_mse);
    }
    Ok(())
}
