use hsbnet::adjoint::{cosine_matrix, diag_phase, kernel_matrix, KAPPA_BAR_PHASE};
use hsbnet::butterfly::{block_truncate, LowRankKernelSpec};
use hsbnet::deconv::{Reconstructor, DEFAULT_PAD};
use hsbnet::forward::{gen_dataset, DatasetSample, DatasetSpec, FarField};
use hsbnet::grid::{freq_select_map, shift_indices, PolarResampler};
use hsbnet::linalg::{frob, frob_c, max_abs, spectral_norm_c};
use hsbnet::train::*;
use hsbnet::{Error, ProblemConfig, C64};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg(rectifier: bool) -> NetConfig {
    let mut cfg = NetConfig::new(ProblemConfig::square(16, 0.5).unwrap());
    cfg.layers = 3;
    cfg.filter_size = 3;
    cfg.rectifier = rectifier;
    cfg
}

fn data(cfg: &ProblemConfig, count: usize, seed: u64) -> Vec<DatasetSample> {
    gen_dataset(cfg, &DatasetSpec::default(), count, seed).unwrap()
}

fn random_far_field(cfg: &ProblemConfig, seed: u64) -> FarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = cfg.data_shape();
    FarField::new(Array2::from_shape_fn((r, c), |_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))), cfg).unwrap()
}

fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    frob((a - b).view()) / frob(b.view()).max(f64::MIN_POSITIVE)
}

#[test]
fn linear_network_is_linear_in_the_input() {
    let cfg = small_cfg(false);
    let net = Network::new(cfg.clone()).unwrap();
    let params = probe_params(&net, 3).unwrap();
    let a = random_far_field(&cfg.problem, 1);
    let b = random_far_field(&cfg.problem, 2);
    let combo = FarField::new(&a.data * C64::new(2.0, 0.0) - &b.data * C64::new(0.5, 0.0), &cfg.problem).unwrap();
    let ya = net.predict(&params, &a).unwrap().data;
    let yb = net.predict(&params, &b).unwrap().data;
    let yc = net.predict(&params, &combo).unwrap().data;
    let expect = &ya * 2.0 - &yb * 0.5;
    assert!(rel(&yc, &expect) <= 1e-10, "{}", rel(&yc, &expect));
}

#[test]
fn rectified_network_is_positively_homogeneous() {
    let cfg = small_cfg(true);
    let net = Network::new(cfg.clone()).unwrap();
    let params = probe_params(&net, 4).unwrap();
    let a = random_far_field(&cfg.problem, 5);
    let scaled = FarField::new(&a.data * C64::new(3.0, 0.0), &cfg.problem).unwrap();
    let y = net.predict(&params, &a).unwrap().data;
    let ys = net.predict(&params, &scaled).unwrap().data;
    assert!(rel(&ys, &(&y * 3.0)) <= 1e-10);
}

#[test]
fn exact_deconvolution_weights_reproduce_the_layer_oracle() {
    let problem = ProblemConfig::square(16, 0.5).unwrap();
    let mut cfg = NetConfig::new(problem);
    cfg.filter_size = 2 * problem.n_c - 1;
    cfg.layers = 2;
    let net = Network::new(cfg).unwrap();
    let params = net.exact_deconv_params().unwrap();
    let rec = Reconstructor::new(&problem, DEFAULT_PAD).unwrap();
    for s in data(&problem, 2, 11) {
        let got = net.predict(&params, &s.input).unwrap().data;
        let want = rec.reconstruct_layers(&s.input).unwrap();
        assert!(rel(&got, &want) <= 1e-8, "{}", rel(&got, &want));
    }
}

#[test]
fn exact_deconvolution_needs_full_filters() {
    let net = Network::new(small_cfg(false)).unwrap();
    assert!(matches!(net.exact_deconv_params(), Err(Error::Argument(_))));
}

#[test]
fn loss_examples() {
    let problem = ProblemConfig::square(16, 0.5).unwrap();
    let t = data(&problem, 1, 1).remove(0).target;
    assert_eq!(loss(&t, &t).unwrap(), 0.0);
    let mut p = t.clone();
    p.data[(3, 4)] += 1.0;
    assert!((loss(&p, &t).unwrap() - 1.0).abs() <= 1e-15);
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradients() {
    let cfg = small_cfg(true);
    let net = Network::new(cfg.clone()).unwrap();
    let params = probe_params(&net, 1).unwrap();
    let lam = random_far_field(&cfg.problem, 9);
    let (_, cache) = net.forward_pass(&params, &lam).unwrap();
    let g = net.backward_pass(&params, &cache, Array2::zeros(cfg.problem.coef_shape()).view()).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn finite_differences_match_in_every_mode() {
    let problem = ProblemConfig::square(16, 0.5).unwrap();
    let samples = data(&problem, 1, 2);
    for kernel in [KernelMode::Dense, KernelMode::Butterfly(LowRankKernelSpec { r: 2, n_r: 4 })] {
        for rectifier in [false, true] {
            let mut cfg = small_cfg(rectifier);
            cfg.kernel = kernel;
            let net = Network::new(cfg).unwrap();
            let params = probe_params(&net, 8).unwrap();
            for (name, e) in finite_difference_check(&net, &params, &samples, 1e-5, 3, 8).unwrap() {
                assert!(e <= 1e-4, "{name}: {e}");
            }
        }
    }
}

/// Loss gradient in `K_cos` from the hand-expanded derivative of every
/// output entry, on a network whose convolution stage is the identity.
#[test]
fn kernel_gradient_matches_symbolic_expansion() {
    let problem = ProblemConfig::square(4, 0.5).unwrap();
    let mut cfg = NetConfig::new(problem);
    cfg.layers = 1;
    cfg.filter_size = 1;
    let net = Network::new(cfg).unwrap();
    let mut params = net.exact_phi_params(0.0).unwrap();
    params.layers[0].scale[0] = 1.0;
    let sample = data(&problem, 1, 4).remove(0);
    let (_, grad) = net.batch_gradient(&params, &[&sample]).unwrap();
    let KernelParams::Dense { cos: g_cos, .. } = &grad.kernel else { panic!("dense kernel expected") };

    // Outer gradient: loss -> polar output through the fixed resampling map.
    let pred = net.predict(&params, &sample.input).unwrap().data;
    let e = &pred - &sample.target.data;
    let g_out = &e / frob(e.view());
    let g_polar = PolarResampler::new(&problem).apply_transpose(g_out.view()).unwrap();

    let n = problem.n_theta;
    let k = kernel_matrix(&problem);
    let c = cosine_matrix(n);
    let scales = [params.scales[0], params.scales[1], params.scales[2], params.scales[3]];
    let phase = C64::from_polar(1.0, KAPPA_BAR_PHASE);
    let mut want = Array2::<f64>::zeros(k.dim());
    for (w, om) in problem.omegas().into_iter().enumerate() {
        let cols = freq_select_map(om, &problem).unwrap();
        for m in 1..=n {
            let x = shift_indices(m, sample.input.block(w)).unwrap();
            for branch in 0..2 {
                let weight = |i: usize, j: usize| if branch == 0 { c[(i, j)] } else { 1.0 };
                let row = if branch == 0 { m - 1 } else { n + m - 1 };
                let scale = scales[2 * branch + w];
                for (col, &b) in cols.iter().enumerate() {
                    // out = sum_ij conj(K[i,b]) W[i,j] X[i,j] K[j,b], K = Kc - i Ks.
                    for a in 0..n {
                        let mut d = C64::new(0.0, 0.0);
                        for j in 0..n {
                            d += weight(a, j) * x[(a, j)] * k[(j, b)];
                        }
                        for i in 0..n {
                            d += k[(i, b)].conj() * weight(i, a) * x[(i, a)];
                        }
                        want[(a, b)] += g_polar[(row, col)] * scale * (phase * d).re;
                    }
                }
            }
        }
    }
    let err = max_abs((g_cos - &want).view()) / max_abs(want.view());
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn shared_kernel_feeds_every_channel() {
    let cfg = small_cfg(false);
    let net = Network::new(cfg.clone()).unwrap();
    let base = net.exact_phi_params(DEFAULT_IMPULSE_GAIN).unwrap();
    let lam = random_far_field(&cfg.problem, 12);
    for channel in 0..4 {
        let mut only = base.clone();
        for s in 0..4 {
            if s != channel {
                only.scales[s] = 0.0;
            }
        }
        let mut bumped = only.clone();
        if let KernelParams::Dense { cos, .. } = &mut bumped.kernel {
            cos.mapv_inplace(|v| v * 1.01 + 1e-3);
        }
        let a = net.phi_polar(&only, &lam).unwrap();
        let b = net.phi_polar(&bumped, &lam).unwrap();
        assert!(max_abs((&a - &b).view()) > 1e-6 * max_abs(a.view()), "channel {channel}");
    }
    // The shared gradient is the sum of the per-channel contributions.
    let g_out = Array2::from_shape_fn(cfg.problem.coef_shape(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
    let grad_of = |p: &NetParams| {
        let (_, cache) = net.forward_pass(p, &lam).unwrap();
        match net.backward_pass(p, &cache, g_out.view()).unwrap().kernel {
            KernelParams::Dense { cos, .. } => cos,
            _ => unreachable!(),
        }
    };
    let total = grad_of(&base);
    let mut sum = Array2::zeros(total.dim());
    for channel in 0..4 {
        let mut only = base.clone();
        for s in 0..4 {
            if s != channel {
                only.scales[s] = 0.0;
            }
        }
        sum += &grad_of(&only);
    }
    assert!(max_abs((&sum - &total).view()) <= 1e-10 * max_abs(total.view()));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = small_cfg(false);
    let net = Network::new(cfg.clone()).unwrap();
    let params = net.exact_phi_params(DEFAULT_IMPULSE_GAIN).unwrap();
    let set = data(&cfg.problem, 4, 1);
    let tc = TrainConfig { adam: AdamConfig { lr: 0.0, ..Default::default() }, batch: 2, steps: 4, seed: 1 };
    let (out, report) = train(&net, &params, &set, &set, &tc).unwrap();
    assert_eq!(out, params);
    assert_eq!(report.e_a, report.e_a_init);
    let full: f64 = report.losses.iter().step_by(2).sum();
    let other: f64 = report.losses.iter().skip(1).step_by(2).sum();
    assert!((full + other - report.losses.iter().sum::<f64>()).abs() == 0.0);
    assert_eq!(report.losses.len(), 4);
}

#[test]
fn training_is_deterministic() {
    let cfg = small_cfg(true);
    let net = Network::new(cfg.clone()).unwrap();
    let params = net.exact_phi_params(DEFAULT_IMPULSE_GAIN).unwrap();
    let tr = data(&cfg.problem, 6, 1);
    let te = data(&cfg.problem, 3, 2);
    let tc = TrainConfig { batch: 3, steps: 4, seed: 5, ..Default::default() };
    let (pa, ra) = train(&net, &params, &tr, &te, &tc).unwrap();
    let (pb, rb) = train(&net, &params, &tr, &te, &tc).unwrap();
    assert!(ra.same_outcome(&rb));
    assert_eq!(pa, pb);
}

#[test]
fn loss_does_not_increase_on_one_sample() {
    let cfg = small_cfg(false);
    let net = Network::new(cfg.clone()).unwrap();
    let set = data(&cfg.problem, 1, 3);
    let params = net.calibrated_phi_params(DEFAULT_IMPULSE_GAIN, &set).unwrap();
    let tc = TrainConfig { adam: AdamConfig { lr: 1e-3, ..Default::default() }, batch: 1, steps: 10, seed: 1 };
    let (_, report) = train(&net, &params, &set, &set, &tc).unwrap();
    for w in report.losses.windows(2) {
        assert!(w[1] <= w[0], "{:?}", report.losses);
    }
}

#[test]
fn empty_sets_are_rejected() {
    let cfg = small_cfg(false);
    let net = Network::new(cfg.clone()).unwrap();
    let params = net.exact_phi_params(DEFAULT_IMPULSE_GAIN).unwrap();
    let set = data(&cfg.problem, 2, 1);
    assert!(matches!(train(&net, &params, &[], &set, &TrainConfig::default()), Err(Error::Argument(_))));
    assert!(matches!(generalization_gap(&net, &params, &set, &[]), Err(Error::Argument(_))));
}

#[test]
fn generalization_gap_examples() {
    let cfg = small_cfg(false);
    let net = Network::new(cfg.clone()).unwrap();
    let set = data(&cfg.problem, 100, 1);
    let other = data(&cfg.problem, 100, 2);
    let params = net.init_params(Init::Random, 3).unwrap();
    let (ea, eg, gap) = generalization_gap(&net, &params, &set, &set).unwrap();
    assert_eq!(ea, eg);
    assert_eq!(gap, 0.0);
    let (ea, eg, _) = generalization_gap(&net, &params, &set, &other).unwrap();
    assert!((ea - eg).abs() <= 0.2 * ea, "{ea} vs {eg}");
}

#[test]
fn calibrated_start_beats_the_identity_start() {
    let cfg = small_cfg(false);
    let net = Network::new(cfg.clone()).unwrap();
    let set = data(&cfg.problem, 10, 1);
    let plain = net.exact_phi_params(DEFAULT_IMPULSE_GAIN).unwrap();
    let fitted = net.calibrated_phi_params(DEFAULT_IMPULSE_GAIN, &set).unwrap();
    assert!(net.relative_error(&fitted, &set).unwrap() < net.relative_error(&plain, &set).unwrap());
    assert!(net.relative_error(&fitted, &set).unwrap() <= 1.0);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for kernel in [KernelMode::Dense, KernelMode::Butterfly(LowRankKernelSpec { r: 2, n_r: 4 })] {
        for cosine in [CosineParam::Circulant, CosineParam::Phase] {
            let mut cfg = small_cfg(true);
            cfg.kernel = kernel;
            cfg.cosine = cosine;
            let net = Network::new(cfg.clone()).unwrap();
            let params = probe_params(&net, 2).unwrap();
            let path = dir.path().join(format!("{}-{}.bin", cosine.name(), matches!(kernel, KernelMode::Dense)));
            save_checkpoint(&path, &cfg, &params, 17).unwrap();
            let (cfg2, params2, step) = load_checkpoint(&path).unwrap();
            assert_eq!(cfg2, cfg);
            assert_eq!(params2, params);
            assert_eq!(step, 17);
        }
    }
}

fn dense_pair_params(k: &Array2<C64>, d: &[C64]) -> AdjointParams {
    AdjointParams { kernel: AdjointKernel::Dense(k.clone()), phase: d.to_vec() }
}

fn lipschitz_setup() -> (ProblemConfig, Vec<FarField>, Array2<C64>, Vec<C64>, LipschitzBounds) {
    let cfg = ProblemConfig::square(16, 0.5).unwrap();
    let inputs: Vec<FarField> = (0..4).map(|i| random_far_field(&cfg, 40 + i)).collect();
    let b_in = inputs.iter().map(|l| frob_c(l.data.view())).fold(0.0, f64::max);
    let k = kernel_matrix(&cfg);
    let bounds = LipschitzBounds { kernel: [2.0 * spectral_norm_c(k.view()), 0.0, 0.0], phase: 1.5, input: b_in };
    (cfg, inputs, k, diag_phase(16), bounds)
}

#[test]
fn lipschitz_identical_pairs_give_zero() {
    let (cfg, inputs, k, d, bounds) = lipschitz_setup();
    let p = dense_pair_params(&k, &d);
    let r = lipschitz_check(&cfg, &[(p.clone(), p)], &inputs, &bounds).unwrap();
    assert!(r.holds);
    assert_eq!(r.pairs[0].lhs, 0.0);
    assert_eq!(r.pairs[0].rhs, 0.0);
}

#[test]
fn lipschitz_kernel_term_scales_linearly() {
    let (cfg, inputs, k, d, bounds) = lipschitz_setup();
    let e = k.mapv(|z| z * 0.1);
    let one = (dense_pair_params(&k, &d), dense_pair_params(&(&k + &e), &d));
    let two = (dense_pair_params(&k, &d), dense_pair_params(&(&k + &e * C64::new(2.0, 0.0)), &d));
    let r = lipschitz_check(&cfg, &[one, two], &inputs, &bounds).unwrap();
    assert!(r.holds);
    let ratio = r.pairs[1].kernel_terms[0] / r.pairs[0].kernel_terms[0];
    assert!((ratio - 2.0).abs() <= 1e-12);
    assert_eq!(r.pairs[0].phase_term, 0.0);
}

#[test]
fn lipschitz_rejects_parameters_outside_the_ball() {
    let (cfg, inputs, k, d, bounds) = lipschitz_setup();
    let big = k.mapv(|z| z * 3.0);
    let pair = (dense_pair_params(&k, &d), dense_pair_params(&big, &d));
    assert!(matches!(lipschitz_check(&cfg, &[pair], &inputs, &bounds), Err(Error::Argument(_))));
    let mut cfg2 = cfg;
    cfg2.n_c = 8;
    let p = dense_pair_params(&k, &d);
    assert!(lipschitz_check(&cfg2, &[(p.clone(), p)], &inputs, &bounds).is_err());
}

#[test]
fn lipschitz_holds_for_compressed_kernels() {
    let (cfg, inputs, k, d, _) = lipschitz_setup();
    let (_, bf) = block_truncate(k.view(), LowRankKernelSpec { r: 4, n_r: 4 }).unwrap();
    let factors = bf.dense_factors();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut perturbed = |scale: f64| {
        let f: [Array2<C64>; 3] = std::array::from_fn(|i| {
            let a = &factors[i];
            let mask = a.mapv(|z| if z.norm() > 0.0 { 1.0 } else { 0.0 });
            let noise = Array2::from_shape_fn(a.dim(), |_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let noise = &noise * &mask.mapv(|m| C64::new(m, 0.0));
            let size = scale * spectral_norm_c(a.view()) / spectral_norm_c(noise.view());
            a + &noise.mapv(|z| z * size)
        });
        let phase: Vec<C64> = d.iter().map(|z| z * (1.0 - scale * 0.5)).collect();
        AdjointParams { kernel: AdjointKernel::Factored(f), phase }
    };
    let pairs: Vec<_> = (0..6).map(|t| (perturbed(0.02 * t as f64), perturbed(0.1))).collect();
    let norms: Vec<f64> = (0..3).map(|i| 1.5 * spectral_norm_c(factors[i].view())).collect();
    let b_in = inputs.iter().map(|l| frob_c(l.data.view())).fold(0.0, f64::max);
    let bounds = LipschitzBounds { kernel: [norms[0], norms[1], norms[2]], phase: 1.5, input: b_in };
    let r = lipschitz_check(&cfg, &pairs, &inputs, &bounds).unwrap();
    assert!(r.holds);
    assert_eq!(r.kernel_constants.len(), 3);
}
