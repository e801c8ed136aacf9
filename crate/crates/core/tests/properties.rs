use biam_core::biam::{biam_forward, monotonicity_score};
use biam_core::ctc::{ctc_bruteforce, ctc_greedy_decode, ctc_loss, GraphemeSequence};
use biam_core::export::{parse_csv_matrix, parse_pgm, w12_to_csv, w12_to_pgm};
use biam_core::numerics::{log_sum_exp, matmul, row_softmax, Matrix, SeededRng};
use biam_core::train::character_error_rate;
use biam_core::Error;
use proptest::prelude::*;
use rand::RngCore;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| {
        Matrix::from_vec(rows, cols, v.into_iter().map(|x| x * scale).collect()).unwrap()
    })
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols, 0.01..50.0f64).prop_flat_map(|(r, c, s)| matrix(r, c, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(m in sized_matrix(64, 64)) {
        let s = row_softmax(&m);
        for r in 0..s.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn log_sum_exp_is_shift_invariant(v in proptest::collection::vec(-30.0..30.0f64, 1..20), c in -500.0..500.0f64) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() <= 1e-9);
    }

    #[test]
    fn matmul_is_associative((a, b, c) in (1..6usize, 1..6usize, 1..6usize, 1..6usize)
        .prop_flat_map(|(n, k, l, m)| (matrix(n, k, 1.0), matrix(k, l, 1.0), matrix(l, m, 1.0)))) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-12);
    }

    #[test]
    fn ctc_agrees_with_enumeration(
        (logits, tokens) in (1..=3usize, 1..=5usize, 1..=3usize).prop_flat_map(|(v, t, l)| {
            (matrix(t, v + 1, 3.0), proptest::collection::vec(1..=v, l))
        })
    ) {
        let target = GraphemeSequence::new(tokens).unwrap();
        match (ctc_loss(&logits, &target), ctc_bruteforce(&logits, &target)) {
            (Ok(dp), Ok(bf)) => {
                prop_assert!((dp.loss - bf).abs() <= 1e-9);
                // Gradient rows of softmax-minus-occupancy sum to zero.
                for r in 0..dp.grad_logits.rows() {
                    prop_assert!(dp.grad_logits.row(r).iter().sum::<f64>().abs() <= 1e-9);
                }
            }
            (Err(Error::Unreachable { .. }), Err(Error::Unreachable { .. })) => {
                prop_assert!(logits.rows() < target.min_frames());
            }
            (a, b) => prop_assert!(false, "inconsistent: {:?} vs {:?}", a.map(|o| o.loss), b),
        }
    }

    #[test]
    fn greedy_decode_emits_only_graphemes(m in sized_matrix(12, 5)) {
        let decoded = ctc_greedy_decode(&m);
        prop_assert!(decoded.tokens().iter().all(|&t| t >= 1 && t < m.cols()));
        prop_assert!(decoded.len() <= m.rows());
    }

    #[test]
    fn biam_rows_and_shapes((x, y) in (1..=32usize, 1..=32usize, 1..=16usize)
        .prop_flat_map(|(n1, n2, d)| (matrix(n1, d, 4.0), matrix(n2, d, 4.0)))) {
        let out = biam_forward(&x, &y).unwrap();
        prop_assert_eq!(out.w12.shape(), (x.rows(), y.rows()));
        prop_assert_eq!(out.x_aligned.shape(), (y.rows(), x.cols()));
        prop_assert_eq!(out.y_aligned.shape(), (x.rows(), y.cols()));
        for w in [&out.w12, &out.w21] {
            for r in 0..w.rows() {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let score = monotonicity_score(&out.w12, 0.1);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&score));
    }

    #[test]
    fn alignment_exports_round_trip(w in sized_matrix(16, 12).prop_map(|m| row_softmax(&m))) {
        let csv = parse_csv_matrix(&w12_to_csv(&w)).unwrap();
        let pgm = parse_pgm(&w12_to_pgm(&w)).unwrap();
        prop_assert!(csv.max_abs_diff(&w) <= 1e-5);
        prop_assert!(pgm.max_abs_diff(&w) <= 0.5 / 255.0 + 1e-12);
        for r in 0..w.rows() {
            prop_assert!((csv.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cer_is_zero_only_for_exact_matches(
        a in proptest::collection::vec(1..5usize, 1..10),
        b in proptest::collection::vec(1..5usize, 1..10),
    ) {
        let (ga, gb) = (GraphemeSequence::new(a.clone()).unwrap(), GraphemeSequence::new(b.clone()).unwrap());
        let cer = character_error_rate(&[(ga.clone(), gb.clone())]);
        prop_assert_eq!(cer == 0.0, a == b);
        prop_assert_eq!(character_error_rate(&[(gb.clone(), gb)]), 0.0);
    }

    #[test]
    fn rng_state_resumes_the_stream(seed in any::<u64>(), stream in any::<u64>(), skip in 0..50usize) {
        let mut rng = SeededRng::with_stream(seed, stream);
        for _ in 0..skip {
            rng.next_u64();
        }
        let json = serde_json::to_string(&rng.state()).unwrap();
        let mut resumed = SeededRng::from_state(serde_json::from_str(&json).unwrap());
        for _ in 0..8 {
            prop_assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }
}
