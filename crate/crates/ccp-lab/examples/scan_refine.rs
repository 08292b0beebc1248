// scratch: scan identity-init ICP convergence regimes
use ccp_lab::calibration::{refine_rotation, RefineInit, RotationMap};
use ccp_lab::num::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    use nalgebra::DMatrix;
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 { for i in 0..d { q[(i, j)] = -q[(i, j)]; } }
    }
    let mut data = vec![0.0; d * d];
    for i in 0..d { for j in 0..d { data[i * d + j] = q[(i, j)]; } }
    Tensor::new(vec![d, d], data).unwrap()
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, decay: f64) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            let v: f64 = rng.sample(StandardNormal);
            data.push(v * decay.powi(j as i32));
        }
    }
    Tensor::new(vec![n, d], data).unwrap().l2_normalize_rows().unwrap()
}

fn frob(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn main() {
    for d in [8usize, 16] {
        for decay in [0.9, 0.75, 0.6, 0.5] {
            for n in [200usize, 800, 1600] {
                for k in [10usize] {
                    let mut ok = 0;
                    let trials = 10;
                    for seed in 0..trials {
                        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                        let x = cloud(&mut rng, n, d, decay);
                        let r = random_orthogonal(&mut rng, d);
                        let y = {
                            let data = ccp_lab::num::matmul(x.data(), r.data(), n, d, d);
                            Tensor::new(vec![n, d], data).unwrap()
                        };
                        let w = refine_rotation("a","b",&x,&y,
                            RefineInit::Rotation(RotationMap::identity("a","b",d)), 30, k).unwrap();
                        if frob(&w.matrix, &r) <= 1e-4 { ok += 1; }
                    }
                    println!("d={d} decay={decay} n={n} k={k}: {ok}/{trials} converged");
                }
            }
        }
    }
}
