//! Core-knowledge distillation on random features.
//!
//! A sparse teacher head (most weights near zero) defines the comparison
//! space. The student feature is fitted by plain gradient descent on the
//! core loss using the closed-form gradient, and the result is compared
//! with the naive and projected baselines.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use shapefuse::kd::{
    loss_core, loss_core_grad, loss_naive, loss_projected, near_zero_fraction, sample_core,
    total_loss, weight_histogram, TeacherHead,
};
use shapefuse::Tensor;

const C_OUT: usize = 6;
const C_IN: usize = 16;
const D: usize = 4;

pub fn run_example() -> shapefuse::Result<()> {
    let mut rng = StdRng::seed_from_u64(7);
    let head = TeacherHead::new(Tensor::from_fn(&[C_OUT, C_IN], |_| {
        if rng.gen_bool(0.15) {
            rng.gen_range(-1.0..1.0)
        } else {
            rng.gen_range(-0.005..0.005)
        }
    })?)?;
    let hist = weight_histogram(&head, 8, -1.0, 1.0)?;
    println!("head histogram over [-1, 1]: {:?}", hist.counts);
    println!(
        "|w| < 0.01 for {:.0}% of weights",
        100.0 * near_zero_fraction(&head, 0.01)
    );
    println!(
        "sampled columns per row: {:?}",
        sample_core(&head, D)?.selection
    );

    let x_t = Tensor::from_fn(&[C_IN, 4, 4], |_| rng.gen_range(-1.0..1.0))?;
    let mut x_s = Tensor::zeros(&[D, 4, 4])?;
    let start = loss_core(&x_s, &x_t, &head, D)?.loss;
    for _ in 0..200 {
        let g = loss_core_grad(&x_s, &x_t, &head, D)?;
        x_s = Tensor::new(
            x_s.dims().to_vec(),
            x_s.data()
                .iter()
                .zip(g.data())
                .map(|(x, g)| x - 0.05 * g)
                .collect(),
        )?;
    }
    let end = loss_core(&x_s, &x_t, &head, D)?.loss;
    println!("core loss {start:.4} -> {end:.4} after 200 steps");

    // Baselines with a fixed random adapter from student to teacher width.
    let adapter = Tensor::from_fn(&[C_IN, D], |_| rng.gen_range(-0.5..0.5))?;
    println!(
        "naive {:.4}, projected {:.4}",
        loss_naive(&x_s, &x_t, &adapter)?,
        loss_projected(&x_s, &x_t, &adapter, &head)?
    );

    let breakdown = total_loss(1.2, 0.8, 0.5, end)?;
    println!("total loss breakdown: {breakdown:?}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> shapefuse::Result<()> {
    run_example()
}
