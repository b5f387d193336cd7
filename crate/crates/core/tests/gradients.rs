use ecotrain::energy::EnergyLedger;
use ecotrain::gradcheck::{finite_difference_check, Differentiable, NetworkProbe};
use ecotrain::model::{ExactGrad, GradKernel, Gating, Network, NetworkSpec, PassConfig, Precision, WeightGradHook};
use ecotrain::slu::GateNetwork;
use ecotrain::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        in_channels: 2,
        input_hw: 6,
        width: 3,
        num_blocks: 2,
        stem_kernel: 3,
        stem_stride: 1,
        stem_pad: 1,
        block_kernel: 3,
        num_classes: 3,
        zero_init_residual: false,
    }
}

fn probe(seed: u64) -> NetworkProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = small_spec();
    let net = Network::new(&spec, &mut rng).unwrap();
    let x = Tensor::randn(&[4, 2, 6, 6], 1.0, &mut rng);
    let labels = (0..4).map(|_| rng.gen_range(0..3)).collect();
    NetworkProbe::new(net, x, labels)
}

#[test]
fn plain_network_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..3 {
        let mut p = probe(seed);
        let r = finite_difference_check(&mut p, 1e-5, usize::MAX, &mut rng).unwrap();
        assert!(r.max_rel_err <= 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn fixed_mask_network_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = probe(11);
    p.mask = Some(vec![false, true]);
    let r = finite_difference_check(&mut p, 1e-5, usize::MAX, &mut rng).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn soft_gated_network_with_complexity_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = probe(12);
    p.gate = Some(GateNetwork::new(3, 0.5, &mut rng));
    p.alpha = 0.3;
    let r = finite_difference_check(&mut p, 1e-5, usize::MAX, &mut rng).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

/// Negates the weight gradient of one layer.
struct FlipSign(&'static str);

impl WeightGradHook for FlipSign {
    fn weight_grad(
        &mut self,
        layer: &str,
        kernel: GradKernel,
        x: &Tensor,
        g_y: &Tensor,
        w_shape: &[usize],
        ledger: &mut EnergyLedger,
    ) -> Result<Tensor> {
        let g = ExactGrad { bits: 32 }.weight_grad(layer, kernel, x, g_y, w_shape, ledger)?;
        Ok(if layer == self.0 { g.scale(-1.0) } else { g })
    }
}

struct Mutant(NetworkProbe);

impl Differentiable for Mutant {
    fn param_count(&self) -> usize {
        self.0.param_count()
    }
    fn get(&self, i: usize) -> f64 {
        self.0.get(i)
    }
    fn set(&mut self, i: usize, v: f64) {
        self.0.set(i, v)
    }
    fn loss(&mut self) -> Result<f64> {
        self.0.loss()
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        let p = &mut self.0;
        let cfg = PassConfig {
            update_stats: false,
            ..PassConfig::train(Precision::full())
        };
        let out = p.net.train_step(
            &p.x,
            &p.labels,
            Gating::AllKeep,
            0.0,
            cfg,
            &mut EnergyLedger::new(),
            &mut FlipSign("block1.conv1"),
        )?;
        Ok(out.param_grads.into_iter().flat_map(|g| g.unwrap().data().to_vec()).collect())
    }
}

#[test]
fn flipped_backward_sign_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = Mutant(probe(3));
    let r = finite_difference_check(&mut m, 1e-5, usize::MAX, &mut rng).unwrap();
    assert!(r.max_rel_err > 1.0, "{r:?}");
}

/// `sum_i a_i * relu(w_i - c_i)` with analytic gradient `a_i * [w_i > c_i]`.
struct Hinge {
    w: Vec<f64>,
    a: Vec<f64>,
    c: Vec<f64>,
}

impl Differentiable for Hinge {
    fn param_count(&self) -> usize {
        self.w.len()
    }
    fn get(&self, i: usize) -> f64 {
        self.w[i]
    }
    fn set(&mut self, i: usize, v: f64) {
        self.w[i] = v
    }
    fn loss(&mut self) -> Result<f64> {
        Ok((0..self.w.len()).map(|i| self.a[i] * (self.w[i] - self.c[i]).max(0.0)).sum())
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        Ok((0..self.w.len()).map(|i| if self.w[i] > self.c[i] { self.a[i] } else { 0.0 }).collect())
    }
}

#[test]
fn linear_model_is_exact() {
    let mut h = Hinge {
        w: vec![1.0, 2.0, -0.5],
        a: vec![0.3, -1.2, 2.0],
        c: vec![-5.0, -5.0, -5.0],
    };
    let r = finite_difference_check(&mut h, 1e-4, usize::MAX, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(r.max_rel_err <= 1e-7, "{r:?}");
    assert_eq!(r.refined, 0);
}

#[test]
fn kink_inside_the_step_is_refined() {
    let mut h = Hinge {
        w: vec![0.3 + 4e-6, 1.0],
        a: vec![1.5, 0.7],
        c: vec![0.3, 0.0],
    };
    let r = finite_difference_check(&mut h, 1e-5, usize::MAX, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
    assert_eq!(r.refined, 1);
    h.w[0] = 0.3 + 4e-7;
    let r = finite_difference_check(&mut h, 1e-5, usize::MAX, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(r.max_rel_err > 0.1, "a kink closer than the smallest step stays visible: {r:?}");
}
