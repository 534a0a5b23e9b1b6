use hsbnet::adjoint::{cosine_matrix, cosine_via_phase, diag_phase};
use hsbnet::forward::CoefPair;
use hsbnet::grid::{shift_indices, PolarResampler};
use hsbnet::io::{fmt_f64, ArrayContainer, ArrayData, Manifest};
use hsbnet::linalg::{frob, spectral_norm};
use hsbnet::train::{loss, AdamConfig, AdamState, NetConfig, Network, DEFAULT_IMPULSE_GAIN};
use hsbnet::{ProblemConfig, C64};
use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;

fn complex_matrix(n: usize) -> impl Strategy<Value = Array2<C64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n * n)
        .prop_map(move |v| Array2::from_shape_vec((n, n), v.into_iter().map(|(a, b)| C64::new(a, b)).collect()).unwrap())
}

fn cyclic_step(n: usize) -> Array2<C64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j == (i + 1) % n { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shifts_compose_to_the_identity(a in complex_matrix(6), split in 1usize..6) {
        let n = 6;
        let once = shift_indices(split, a.view()).unwrap();
        let twice = shift_indices(n - split, once.view()).unwrap();
        prop_assert_eq!(&twice, &a);
        let mut x = a.clone();
        for _ in 0..n {
            x = shift_indices(1, x.view()).unwrap();
        }
        prop_assert_eq!(&x, &a);
    }

    #[test]
    fn shift_matches_permutation_product(a in complex_matrix(5), m in 1usize..=5) {
        let p = cyclic_step(5);
        let mut left = Array2::eye(5).mapv(|v: f64| C64::new(v, 0.0));
        for _ in 0..m {
            left = left.dot(&p);
        }
        let dense = left.dot(&a).dot(&left.t());
        prop_assert_eq!(shift_indices(m, a.view()).unwrap(), dense);
    }

    #[test]
    fn phase_form_reproduces_cosine_weights(a in complex_matrix(8)) {
        let via = cosine_via_phase(a.view(), &diag_phase(8)).unwrap();
        let c = cosine_matrix(8);
        let direct = ndarray::Zip::from(&a).and(&c).map_collect(|&z, &w| z * w);
        let d = (&via - &direct).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        prop_assert!(d <= 1e-14);
    }

    #[test]
    fn resampling_is_linear(seed in 0u64..1000, s in -3.0f64..3.0) {
        let cfg = ProblemConfig::square(8, 0.5).unwrap();
        let shape = (2 * cfg.n_theta, cfg.out_rho_count());
        let r = PolarResampler::new(&cfg);
        let x = Array2::from_shape_fn(shape, |(i, j)| (((i * 13 + j * 5) as u64 + seed) % 9) as f64 - 4.0);
        let y = Array2::from_shape_fn(shape, |(i, j)| (((i * 3 + j * 11) as u64 + 3 * seed) % 7) as f64 - 3.0);
        let lhs = r.apply((&x * s + &y).view()).unwrap();
        let rhs = r.apply(x.view()).unwrap() * s + r.apply(y.view()).unwrap();
        prop_assert!(frob((&lhs - &rhs).view()) <= 1e-12 * (1.0 + frob(rhs.view())));
    }

    #[test]
    fn resampling_transpose_is_adjoint(seed in 0u64..1000) {
        let cfg = ProblemConfig::square(8, 0.5).unwrap();
        let r = PolarResampler::new(&cfg);
        let (a, b) = (2 * cfg.n_theta, cfg.out_rho_count());
        let p = Array2::from_shape_fn((a, b), |(i, j)| (((i * 31 + j * 17) as u64 + seed) % 13) as f64 - 6.0);
        let q = Array2::from_shape_fn(cfg.coef_shape(), |(i, j)| (((i * 7 + j * 3) as u64 + 2 * seed) % 11) as f64 - 5.0);
        let l = (&r.apply(p.view()).unwrap() * &q).sum();
        let rt = (&p * &r.apply_transpose(q.view()).unwrap()).sum();
        prop_assert!((l - rt).abs() <= 1e-10 * (1.0 + l.abs()));
    }

    #[test]
    fn loss_is_a_metric(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 8 * 8),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 8 * 8),
        c in prop::collection::vec(-1.0f64..1.0, 2 * 8 * 8),
    ) {
        let cfg = ProblemConfig::square(8, 0.5).unwrap();
        let pair = |v: Vec<f64>| CoefPair::new(Array2::from_shape_vec(cfg.coef_shape(), v).unwrap(), &cfg).unwrap();
        let (a, b, c) = (pair(a), pair(b), pair(c));
        let ab = loss(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - loss(&b, &a).unwrap()).abs() <= 1e-15);
        prop_assert!(loss(&a, &c).unwrap() <= ab + loss(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn container_round_trip(
        shape in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
        complex in any::<bool>(),
        name in "[a-z][a-z0-9_.]{0,12}",
    ) {
        let len: usize = shape.iter().product();
        let vals: Vec<f64> = (0..2 * len).map(|i| f64::from_bits(seed.rotate_left(i as u32) ^ (i as u64))).collect();
        let data = if complex {
            ArrayData::Complex(ArrayD::from_shape_vec(IxDyn(&shape), (0..len).map(|i| C64::new(vals[2 * i], vals[2 * i + 1])).collect()).unwrap())
        } else {
            ArrayData::Real(ArrayD::from_shape_vec(IxDyn(&shape), vals[..len].to_vec()).unwrap())
        };
        let mut c = ArrayContainer::new();
        c.insert(name.clone(), data.clone()).unwrap();
        let bytes = c.to_bytes();
        let back = ArrayContainer::from_bytes(&bytes).unwrap();
        prop_assert!(back.get(&name).unwrap().bit_eq(&data));
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn container_reader_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = ArrayContainer::from_bytes(&bytes);
    }

    #[test]
    fn manifest_round_trip(entries in prop::collection::btree_map("[a-z_][a-z0-9_.-]{0,10}", "[ -~]{0,20}", 0..8)) {
        let mut m = Manifest::new();
        for (k, v) in &entries {
            m.set(k, v).unwrap();
        }
        let text = m.to_string();
        let back = Manifest::parse(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn float_text_round_trips(x in any::<f64>()) {
        prop_assume!(x.is_finite());
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }
}

#[test]
fn resampling_norm_is_at_most_two() {
    let cfg = ProblemConfig::square(16, 0.5).unwrap();
    let r = PolarResampler::new(&cfg);
    let (a, b) = (2 * cfg.n_theta, cfg.out_rho_count());
    let mut dense = Array2::zeros((cfg.coef_shape().0 * cfg.coef_shape().1, a * b));
    for k in 0..a * b {
        let mut e = Array2::zeros((a, b));
        e[(k / b, k % b)] = 1.0;
        let col = r.apply(e.view()).unwrap();
        dense.column_mut(k).assign(&Array2::from_shape_vec((col.len(), 1), col.iter().copied().collect()).unwrap().column(0));
    }
    let s = spectral_norm(dense.view());
    assert!(s <= 2.0, "{s}");
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let net = Network::new(NetConfig::new(ProblemConfig::square(8, 0.5).unwrap())).unwrap();
    let mut p = net.exact_phi_params(DEFAULT_IMPULSE_GAIN).unwrap();
    let before = p.clone();
    let mut adam = AdamState::new(AdamConfig::default(), &p);
    let g = p.zeros_like();
    for _ in 0..3 {
        adam.update(&mut p, &g);
    }
    assert_eq!(p, before);
}
