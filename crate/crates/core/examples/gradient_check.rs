// Compares hand-written backprop against central finite differences on a
// tiny float64 model, for both the LM head and the classification head.
//
// cargo run --example gradient_check

use finsent::model::{FloatWidth, HeadType, Model, ModelConfig, Params, SequenceInput};
use finsent::tokenizer::{BOS_ID, EOS_ID, IGNORE_LABEL};

fn tiny(head: HeadType, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        head_type: head,
        float_width: FloatWidth::F64,
        init_seed: 3,
        ..ModelConfig::default()
    }
}

/// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over
/// every parameter, plus the parameter count.
fn worst_error(
    model: &Model<f64>,
    grads: &Params<f64>,
    loss: impl Fn(&Model<f64>) -> f64,
) -> (f64, usize) {
    let h = 1e-5;
    let mut probe = model.clone();
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .into_iter()
        .map(|(_, t)| t.data.clone())
        .collect();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (ti, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.params.tensors()[ti].1.data[i];
            probe.params.tensors_mut()[ti].1.data[i] = orig + h;
            let up = loss(&probe);
            probe.params.tensors_mut()[ti].1.data[i] = orig - h;
            let down = loss(&probe);
            probe.params.tensors_mut()[ti].1.data[i] = orig;
            let n = (up - down) / (2.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
            count += 1;
        }
    }
    (worst, count)
}

pub fn run_example() -> anyhow::Result<()> {
    // LM head: next-token loss on two of six positions.
    let lm = Model::<f64>::init(tiny(HeadType::Lm, 16))?;
    let input = SequenceInput::causal(vec![1, 5, 9, 2, 14, 3]);
    let labels = [
        IGNORE_LABEL,
        IGNORE_LABEL,
        IGNORE_LABEL,
        7,
        IGNORE_LABEL,
        11,
    ];
    let (loss, grads) = lm.backward_lm(&input, &labels, IGNORE_LABEL)?;
    let (err, n) = worst_error(&lm, &grads, |m| {
        m.backward_lm(&input, &labels, IGNORE_LABEL).unwrap().0.loss
    });
    println!(
        "lm head:  loss {:.6}, {n} parameters, worst relative error {err:.2e}",
        loss.loss
    );
    anyhow::ensure!(err < 1e-4, "lm gradient mismatch");

    // Classification head on a `BOS q EOS` frame, so the vocabulary has to
    // contain the special ids.
    let cls = Model::<f64>::init(tiny(HeadType::Classification, 300))?;
    let tokens = vec![BOS_ID, 40, 41, 42, EOS_ID];
    let (loss, grads) = cls.backward_cls(&tokens, 2)?;
    let (err, n) = worst_error(&cls, &grads, |m| m.backward_cls(&tokens, 2).unwrap().0);
    println!("cls head: loss {loss:.6}, {n} parameters, worst relative error {err:.2e}");
    anyhow::ensure!(err < 1e-4, "classification gradient mismatch");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
