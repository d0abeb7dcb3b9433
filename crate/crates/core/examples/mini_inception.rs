//! Builds the default mini-Inception model, lists its layers and runs one
//! evaluation forward pass.

use transfer_lab::data::{synth_target, to_batch, SynthSpec};
use transfer_lab::nn::{build_mini_inception, LayerKind, ModelConfig};
use transfer_lab::Result;

fn main() -> Result<()> {
    let model = build_mini_inception(&ModelConfig::default(), 0)?;
    println!("{:<10}{:<16}{:>6}", "layer", "kind", "depth");
    for layer in &model.layers {
        let kind = match &layer.kind {
            LayerKind::InceptionBlock(b) => format!("inception({})", b.out_channels()),
            other => other.name().to_string(),
        };
        println!("{:<10}{:<16}{:>6}", layer.name, kind, layer.depth_index);
    }
    println!(
        "{} parameter tensors, {} weights, block boundaries {:?}, head starts at depth {}",
        model.params.len(),
        model.param_count(),
        model.block_boundaries,
        model.head_start
    );

    let patches = synth_target(&SynthSpec { target_count: 4, ..SynthSpec::default() }, 1);
    let (x, _) = to_batch(&patches)?;
    let probs = model.predict(&x)?;
    for (p, row) in patches.iter().zip(probs.data().chunks(2)) {
        println!("{:<9} p(benign) = {:.3}  p(malignant) = {:.3}", p.label.to_string(), row[0], row[1]);
    }
    Ok(())
}
