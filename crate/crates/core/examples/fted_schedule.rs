//! Prints the exponentially decaying per-layer learning rates assigned to the
//! default model, for a few decay strengths.

use transfer_lab::nn::{build_mini_inception, ModelConfig};
use transfer_lab::optim::{fted_lr_map, LayerLRSchedule};
use transfer_lab::Result;

fn main() -> Result<()> {
    let model = build_mini_inception(&ModelConfig::default(), 0)?;
    let depths = model.depths();
    let max_depth = model.max_depth();
    let gammas = [1.0, 3.0, 5.0];
    let maps = gammas
        .iter()
        .map(|&g| fted_lr_map(&LayerLRSchedule::new(1e-3, -g), &depths, max_depth))
        .collect::<Result<Vec<_>>>()?;

    print!("{:<6}{:<28}", "depth", "first parameter");
    for g in gammas {
        print!("{:>12}", format!("gamma={g}"));
    }
    println!();
    for &d in &depths {
        let name = &model.params.iter().find(|p| p.depth == d).unwrap().name;
        print!("{d:<6}{name:<28}");
        for m in &maps {
            print!("{:>12.3e}", m.rate(d).unwrap());
        }
        println!();
    }
    Ok(())
}
