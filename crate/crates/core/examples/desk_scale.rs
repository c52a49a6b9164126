//! Trains on synthetic shapes and reports held-out metrics.
//!
//! `cargo run --release -p boxsnake --example desk_scale -- [train families] [test families]`

use std::time::Instant;

use boxsnake::data_io::{generate_synthetic, parse_shape_mix, SynthConfig};
use boxsnake::trainer::{evaluate_dataset, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let train_fams = parse_shape_mix(args.first().map_or("ellipse,polygon,star", String::as_str))?;
    let test_fams = parse_shape_mix(args.get(1).map_or("ellipse,polygon,star", String::as_str))?;
    let epochs = args.get(2).map_or(Ok(30), |s| s.parse())?;
    let lr = args.get(3).map_or(Ok(1e-4), |s| s.parse())?;
    let synth = |seed, families| generate_synthetic(&SynthConfig { seed, images: 400, families, ..Default::default() });
    let tr = synth(7, train_fams)?;
    let te = synth(1007, test_fams)?;
    let train_ds = tr.dataset.take_instances(500);
    let test_ds = te.dataset.take_instances(100);
    let cfg = TrainConfig { epochs, learning_rate: lr, ..Default::default() };
    let start = Instant::now();
    let out = train(&train_ds, &tr.images, &cfg, |s| {
        println!("epoch {:2} loss {:.5} vertex {:.5} dice {:.5} ({:.0}s)", s.epoch, s.loss, s.vertex, s.dice, start.elapsed().as_secs_f64())
    })?;
    let rep = evaluate_dataset(&out.model, &test_ds, &te.images, cfg.mode)?;
    println!("{}", rep.to_text());
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
