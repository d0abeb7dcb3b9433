//! Shows which parameters each freeze policy trains, the batch-norm layers it
//! leaves in inference mode, and a weight transfer between two models.

use transfer_lab::finetune::{apply_policy, transfer_weights, FreezePolicy};
use transfer_lab::nn::{build_mini_inception, BnMode, ModelConfig};
use transfer_lab::optim::LayerLRSchedule;
use transfer_lab::Result;

fn main() -> Result<()> {
    let config = ModelConfig::default();
    let source = build_mini_inception(&config, 1)?;
    let target = build_mini_inception(&config, 2)?;
    let model = transfer_weights(&source, &target)?;
    let (mut copied, mut kept) = (0, 0);
    for (i, p) in model.params.iter().enumerate() {
        if model.is_head_param(i) {
            kept += usize::from(p.value.bit_eq(&target.params[i].value));
        } else {
            copied += usize::from(p.value.bit_eq(&source.params[i].value));
        }
    }
    println!("transfer copied {copied} tensors from the source and kept {kept} fresh head tensors\n");

    let schedule = LayerLRSchedule::new(1e-3, -3.0);
    println!("{:<7}{:>10}{:>11}{:>10}  mask", "policy", "trainable", "frozen BN", "max lr");
    for policy in FreezePolicy::MATRIX {
        let plan = apply_policy(&model, policy, 1e-4, &schedule)?;
        let frozen_bn = plan.bn_modes.iter().filter(|&&m| m == BnMode::Infer).count();
        let max_lr = plan.lr_map.iter().map(|(_, r)| r).fold(0.0, f64::max);
        let mask: String = plan.trainable.iter().map(|&t| if t { '#' } else { '.' }).collect();
        println!(
            "{:<7}{:>10}{:>11}{:>10.0e}  {mask}",
            policy.to_string(),
            plan.trainable_count(),
            frozen_bn,
            max_lr
        );
    }
    Ok(())
}
