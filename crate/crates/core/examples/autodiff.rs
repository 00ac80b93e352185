// Records a small network on a tape, backpropagates, and checks the
// gradient against central differences in double precision.

use ufc::tensor::{finite_diff_check_many, Tape, Tensor, TensorError, Var};
use ufc::Result;

fn model(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var, TensorError> {
    let h = tape.matmul(v[0], v[1])?;
    let h = tape.sigmoid(h)?;
    let p = tape.log_softmax(h, 1)?;
    let s = tape.mean(p)?;
    tape.neg(s)
}

fn run() -> Result<()> {
    let x = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64 / 5.0 - 0.4);
    let w = Tensor::from_fn(&[4, 2], |i| ((i * 3) % 7) as f64 / 7.0 - 0.5);

    let mut tape = Tape::new();
    let vars = [tape.constant(x.clone()), tape.leaf(w.clone().with_grad())];
    let loss = model(&mut tape, &vars)?;
    tape.backward(loss)?;
    println!("loss = {:.6}", tape.item(loss));
    println!("dL/dW = {:?}", tape.grad(vars[1]).unwrap());

    let err = finite_diff_check_many(model, &[x, w], 1e-5)?;
    println!("max relative gradient error = {err:.2e}");
    assert!(err < 1e-6);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
