//! Records a small conv -> batch-norm -> dense -> cross-entropy graph and
//! checks the kernel gradient against central differences.

use transfer_lab::gradcheck::grad_check;
use transfer_lab::{Result, Tape, Tensor};

fn main() -> Result<()> {
    let input = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect())?;
    let kernel = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect())?;
    let labels = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?;

    let graph = |tape: &mut Tape, k| {
        let x = tape.leaf(input.clone());
        let y = tape.conv2d(x, k, None, 1, 1)?;
        let gamma = tape.leaf(Tensor::ones(&[2]));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let (y, _) = tape.batchnorm_train(y, gamma, beta, 1e-5)?;
        let y = tape.relu(y)?;
        let flat = tape.flatten(y)?;
        let w = tape.leaf(Tensor::new(vec![32, 2], (0..64).map(|i| ((i % 9) as f64 - 4.0) / 20.0).collect())?);
        let b = tape.leaf(Tensor::zeros(&[2]));
        let logits = tape.dense(flat, w, b)?;
        Ok(tape.softmax_cross_entropy(logits, &labels)?.0)
    };

    let mut tape = Tape::new();
    let k = tape.param(0, kernel.clone());
    let loss = graph(&mut tape, k)?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss)?.data()[0]);
    println!("nodes recorded = {}", tape.len());
    println!("d loss / d kernel = {:?}", &grads.get(0).unwrap().data()[..6]);

    let report = grad_check(graph, &kernel, 1e-5)?;
    println!(
        "gradcheck: {} coordinates, max relative error {:.2e}, {} excluded at kinks",
        report.checked,
        report.max_rel_error,
        report.excluded.len()
    );
    Ok(())
}
