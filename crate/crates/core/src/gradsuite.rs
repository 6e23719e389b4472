//! Finite-difference check of every differentiable operation, one small
//! random instance each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{boxcloud_matrix, Baff, BaffInputs, BackboneConfig, PointEncoder, PointHead};
use crate::error::Result;
use crate::evm::{combined_loss, Evm, LossInputs, LossWeights};
use crate::geometry::{box_cloud, Box3D, BoxSize, Point3, PointCloud};
use crate::nn::activation::{relu, relu_backward, sigmoid, sigmoid_backward, tanh, tanh_backward};
use crate::nn::gradcheck::{check_input_grad, check_param_grads, check_param_grads_sampled};
use crate::nn::loss::{bce_with_logits, masked_smooth_l1, mse, smooth_l1};
use crate::nn::pool::{maxpool_set, maxpool_set_backward};
use crate::nn::{BatchNorm, Dense, Lstm, Matrix, Mode, Module};

pub const GRAD_TOL: f64 = 1e-4;

/// Added to one analytic gradient entry per check when corrupting.
const CORRUPTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub worst: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst <= GRAD_TOL
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect()
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.zip_map(b, |x, y| x * y).sum()
}

struct Suite {
    rng: ChaCha8Rng,
    corrupt: bool,
    out: Vec<GradCheck>,
}

impl Suite {
    fn spoil(&self, m: &mut Matrix) {
        if self.corrupt {
            m.data_mut()[0] += CORRUPTION;
        }
    }

    fn spoil_module<M: Module>(&self, m: &mut M) {
        if self.corrupt {
            m.params_mut()[0].data_mut()[0] += CORRUPTION;
        }
    }

    fn push(&mut self, name: &'static str, errors: &[f64]) {
        let worst = errors.iter().cloned().fold(0.0, f64::max);
        log::debug!("{name}: {worst:.3e}");
        self.out.push(GradCheck { name, worst });
    }

    fn dense(&mut self) -> Result<()> {
        let rng = &mut self.rng;
        let layer = Dense::new(4, 3, rng);
        let x = random(5, 4, rng);
        let proj = random(5, 3, rng);
        let loss = |d: &Dense, x: &Matrix| dot(&d.forward(x).unwrap(), &proj);
        let mut grads = layer.zeros_like();
        let mut gx = layer.backward(&x, &proj, &mut grads)?;
        self.spoil_module(&mut grads);
        self.spoil(&mut gx);
        let e = [
            check_param_grads(&layer, &grads, |d| loss(d, &x)),
            check_input_grad(&x, &gx, |x| loss(&layer, x)),
        ];
        self.push("dense", &e);
        Ok(())
    }

    fn batchnorm(&mut self) -> Result<()> {
        let rng = &mut self.rng;
        let mut bn = BatchNorm::new(3);
        bn.gamma = random(1, 3, rng);
        bn.beta = random(1, 3, rng);
        bn.running_mean = random(1, 3, rng);
        bn.running_var = random(1, 3, rng).map(|v| v.abs() + 0.5);
        let x = random(6, 3, rng);
        let proj = random(6, 3, rng);
        let mut e = Vec::new();
        for mode in [Mode::Train, Mode::Eval] {
            let loss = |b: &BatchNorm, x: &Matrix| dot(&b.forward(x, mode).unwrap().0, &proj);
            let (_, cache) = bn.forward(&x, mode)?;
            let mut grads = bn.zeros_like();
            let mut gx = bn.backward(&cache, &proj, &mut grads);
            self.spoil_module(&mut grads);
            self.spoil(&mut gx);
            e.push(check_param_grads(&bn, &grads, |b| loss(b, &x)));
            e.push(check_input_grad(&x, &gx, |x| loss(&bn, x)));
        }
        self.push("batch-norm", &e);
        Ok(())
    }

    fn activations(&mut self) -> Result<()> {
        let x = random(3, 4, &mut self.rng).map(|v| 3.0 * v);
        let proj = random(3, 4, &mut self.rng);
        type Act = fn(&Matrix) -> Matrix;
        type ActBack = fn(&Matrix, &Matrix) -> Matrix;
        let ops: [(&'static str, Act, ActBack); 3] = [
            ("relu", relu, relu_backward),
            ("sigmoid", sigmoid, sigmoid_backward),
            ("tanh", tanh, tanh_backward),
        ];
        for (name, f, back) in ops {
            let mut g = back(&f(&x), &proj);
            self.spoil(&mut g);
            let e = check_input_grad(&x, &g, |x| dot(&f(x), &proj));
            self.push(name, &[e]);
        }
        Ok(())
    }

    fn maxpool(&mut self) -> Result<()> {
        let x = random(6, 4, &mut self.rng);
        let proj: Vec<f64> = (0..4).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        let loss = |x: &Matrix| {
            let (p, _) = maxpool_set(x).unwrap();
            p.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, argmax) = maxpool_set(&x)?;
        let mut g = maxpool_set_backward(&proj, &argmax, x.rows());
        self.spoil(&mut g);
        let e = check_input_grad(&x, &g, loss);
        self.push("max-pool", &[e]);
        Ok(())
    }

    fn lstm(&mut self, name: &'static str, steps: usize) -> Result<()> {
        let rng = &mut self.rng;
        let mut lstm = Lstm::new(3, 4, rng);
        lstm.bias = random(1, 16, rng);
        let xs: Vec<Matrix> = (0..steps).map(|_| random(2, 3, rng)).collect();
        let proj: Vec<Matrix> = (0..steps).map(|_| random(2, 4, rng)).collect();
        let loss = |m: &Lstm, xs: &[Matrix]| {
            let (hs, _) = m.forward(xs).unwrap();
            hs.iter().zip(&proj).map(|(h, p)| dot(h, p)).sum::<f64>()
        };
        let (_, cache) = lstm.forward(&xs)?;
        let mut grads = lstm.zeros_like();
        let mut dxs = lstm.backward(&cache, &proj, &mut grads)?;
        self.spoil_module(&mut grads);
        self.spoil(&mut dxs[0]);
        let mut e = vec![check_param_grads(&lstm, &grads, |m| loss(m, &xs))];
        for t in 0..steps {
            e.push(check_input_grad(&xs[t], &dxs[t], |x| {
                let mut probe = xs.clone();
                probe[t] = x.clone();
                loss(&lstm, &probe)
            }));
        }
        self.push(name, &e);
        Ok(())
    }

    fn losses(&mut self) -> Result<()> {
        let p = random(4, 3, &mut self.rng).map(|v| 3.0 * v);
        let t = random(4, 3, &mut self.rng).map(|v| 3.0 * v);
        let labels: Vec<f64> = t.data().iter().map(|v| f64::from(u8::from(*v > 0.0))).collect();
        let mask = [true, false, true, true];

        let (_, g) = bce_with_logits(p.data(), &labels)?;
        let mut g = Matrix::from_vec(4, 3, g)?;
        self.spoil(&mut g);
        let e = check_input_grad(&p, &g, |p| bce_with_logits(p.data(), &labels).unwrap().0);
        self.push("bce", &[e]);

        let (_, mut g) = smooth_l1(&p, &t)?;
        self.spoil(&mut g);
        let mut e = vec![check_input_grad(&p, &g, |p| smooth_l1(p, &t).unwrap().0)];
        let (_, mut g) = masked_smooth_l1(&p, &t, &mask)?;
        self.spoil(&mut g);
        e.push(check_input_grad(&p, &g, |p| masked_smooth_l1(p, &t, &mask).unwrap().0));
        self.push("smooth-l1", &e);

        let (_, mut g) = mse(&p, &t)?;
        self.spoil(&mut g);
        let e = check_input_grad(&p, &g, |p| mse(p, &t).unwrap().0);
        self.push("mse", &[e]);

        let rng = &mut self.rng;
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cls: Vec<bool> = (0..6).map(|_| rng.random_bool(0.5)).collect();
        let (pbc, gbc) = (random(6, 9, rng), random(6, 9, rng));
        let (pbox, gbox) = (random(3, 4, rng), random(3, 4, rng));
        let w = LossWeights::default();
        let eval = |l: &[f64], pbc: &Matrix, pbox: &Matrix| {
            combined_loss(
                &LossInputs {
                    logits: l,
                    labels: &cls,
                    pred_bc: pbc,
                    gt_bc: &gbc,
                    mask: &cls,
                    pred_box: pbox,
                    gt_box: &gbox,
                },
                &w,
            )
            .unwrap()
        };
        let out = eval(&logits, &pbc, &pbox);
        let lm = Matrix::row_vector(&logits);
        let mut gl = Matrix::row_vector(&out.grad_logits);
        let (mut gbc_a, mut gbox_a) = (out.grad_bc.clone(), out.grad_box.clone());
        self.spoil(&mut gl);
        self.spoil(&mut gbc_a);
        self.spoil(&mut gbox_a);
        let e = [
            check_input_grad(&lm, &gl, |x| eval(x.data(), &pbc, &pbox).total),
            check_input_grad(&pbc, &gbc_a, |x| eval(&logits, x, &pbox).total),
            check_input_grad(&pbox, &gbox_a, |x| eval(&logits, &pbc, x).total),
        ];
        self.push("combined-loss", &e);
        Ok(())
    }

    fn evm(&mut self) -> Result<()> {
        let rng = &mut self.rng;
        let mut evm = Evm::new(8, 12, rng);
        evm.bn1.beta = random(1, 12, rng);
        evm.bn2.beta = random(1, 12, rng);
        let f = random(8, 8, rng);
        let c = random_cloud(8, rng);
        let warm = evm.forward(&f, &c, &[Point3::zeros(), Point3::new(0.5, 0.0, 0.0)], Mode::Train)?.1;
        evm.commit(&warm);
        let queries: Vec<Point3> = (0..3).map(|_| Point3::new(rng.random_range(-0.5..0.5), 0.1, 0.0)).collect();
        let proj = random(3, 4, rng);
        let mut e = Vec::new();
        for mode in [Mode::Train, Mode::Eval] {
            let loss = |m: &Evm, f: &Matrix| dot(&m.forward(f, &c, &queries, mode).unwrap().0, &proj);
            let (_, cache) = evm.forward(&f, &c, &queries, mode)?;
            let mut grads = evm.zeros_like();
            let mut gf = evm.backward(&cache, &proj, &mut grads)?;
            self.spoil_module(&mut grads);
            self.spoil(&mut gf);
            e.push(check_param_grads_sampled(&evm, &grads, |m| loss(m, &f), 40));
            e.push(check_input_grad(&f, &gf, |x| loss(&evm, x)));
        }
        self.push("evm", &e);
        Ok(())
    }

    fn baff(&mut self) -> Result<()> {
        let rng = &mut self.rng;
        let baff = Baff::new(8, 4, rng);
        let sf = random(8, 8, rng);
        let sbc = random(8, 9, rng).map(|v| v.abs() + 0.5);
        let tf = random(8, 8, rng);
        let tc = random_cloud(8, rng);
        let tbc = boxcloud_matrix(&box_cloud(&tc, &Box3D::at_origin(BoxSize::new(1.0, 1.5, 2.0))?));
        let proj = random(8, 8, rng);
        let run = |b: &Baff, sf: &Matrix, tf: &Matrix| {
            let inp = BaffInputs {
                search_features: sf,
                search_bc: &sbc,
                template_features: tf,
                template_coords: &tc,
                template_bc: &tbc,
            };
            dot(&b.forward(&inp).unwrap().0, &proj)
        };
        let inp = BaffInputs {
            search_features: &sf,
            search_bc: &sbc,
            template_features: &tf,
            template_coords: &tc,
            template_bc: &tbc,
        };
        let (_, cache) = baff.forward(&inp)?;
        let mut grads = baff.zeros_like();
        let (mut gs, mut gt) = baff.backward(&cache, &proj, &mut grads)?;
        self.spoil_module(&mut grads);
        self.spoil(&mut gs);
        self.spoil(&mut gt);
        let e = [
            check_param_grads(&baff, &grads, |b| run(b, &sf, &tf)),
            check_input_grad(&sf, &gs, |x| run(&baff, x, &tf)),
            check_input_grad(&tf, &gt, |x| run(&baff, &sf, x)),
        ];
        self.push("baff", &e);
        Ok(())
    }

    fn encoder(&mut self) -> Result<()> {
        let rng = &mut self.rng;
        let cfg = BackboneConfig {
            channels: 8,
            ..Default::default()
        };
        let mut enc = PointEncoder::new(&cfg, rng);
        // zero-offset padding rows normalize to exactly zero, a relu kink at beta = 0
        enc.bn1.beta = random(1, enc.bn1.beta.cols(), rng);
        enc.bn2.beta = random(1, 8, rng);
        let head = PointHead::new(8, 6, 9, rng);
        let cloud = random_cloud(8, rng);
        let proj = random(8, 9, rng);
        let loss = |e: &PointEncoder, h: &PointHead| {
            let (fc, _) = e.encode(&cloud, Mode::Train).unwrap();
            dot(&h.forward(&fc.features, Mode::Train).unwrap().0, &proj)
        };
        let (fc, ec) = enc.encode(&cloud, Mode::Train)?;
        let (_, hc) = head.forward(&fc.features, Mode::Train)?;
        let mut hg = head.zeros_like();
        let gf = head.backward(&fc.features, &hc, &proj, &mut hg)?;
        let mut eg = enc.zeros_like();
        enc.backward(&ec, &gf, &mut eg)?;
        self.spoil_module(&mut hg);
        self.spoil_module(&mut eg);
        let e = [
            check_param_grads(&head, &hg, |h| loss(&enc, h)),
            check_param_grads(&enc, &eg, |e| loss(e, &head)),
        ];
        self.push("encoder", &e);
        Ok(())
    }
}

/// Runs every check on instances drawn from `seed`. With `corrupt` one
/// analytic gradient entry of each check is perturbed, which must make the
/// whole suite fail.
pub fn gradient_suite(seed: u64, corrupt: bool) -> Result<Vec<GradCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        corrupt,
        out: Vec::new(),
    };
    s.dense()?;
    s.batchnorm()?;
    s.activations()?;
    s.maxpool()?;
    s.lstm("lstm-1-step", 1)?;
    s.lstm("lstm-10-step", 10)?;
    s.losses()?;
    s.evm()?;
    s.baff()?;
    s.encoder()?;
    Ok(s.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for seed in 0..3 {
            for c in gradient_suite(seed, false).unwrap() {
                assert!(c.passed(), "seed {seed} {}: {}", c.name, c.worst);
            }
        }
    }

    #[test]
    fn corruption_fails_every_check() {
        let checks = gradient_suite(0, true).unwrap();
        assert_eq!(checks.len(), 15);
        for c in checks {
            assert!(!c.passed(), "{} survived corruption", c.name);
        }
    }
}
