//! Reverse-mode gradients on the tape: a tiny least-squares fit.

use guidesim::grad::{Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // fit y = w·x + b to three points by gradient descent
    let xs = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0])?;
    let ys = Tensor::matrix(3, 1, vec![1.0, 3.0, 5.0])?;
    let (mut w, mut b) = (0.0, 0.0);
    for step in 0..200 {
        let mut tape = Tape::new();
        let wv = tape.leaf(Tensor::matrix(1, 1, vec![w])?);
        let bv = tape.leaf(Tensor::vector(vec![b]));
        let x = tape.constant(xs.clone());
        let y = tape.constant(ys.clone());
        let xw = tape.matmul(x, wv)?;
        let pred = tape.add(xw, bv)?;
        let err = tape.sub(pred, y)?;
        let sq = tape.square(err);
        let loss = tape.mean(sq)?;
        let g = tape.backward(loss)?;
        w -= 0.1 * g.get(wv).unwrap().item();
        b -= 0.1 * g.get(bv).unwrap().item();
        if step % 50 == 0 {
            println!("step {step:3}: loss {:.6}", tape.value(loss).item());
        }
    }
    println!("w = {w:.4}, b = {b:.4}");
    Ok(())
}
