use dakd::dataio::segment_pool;
use dakd::diffcore::Tensor;
use dakd::evalmetrics::{expand_to_frames, roc_auc};
use dakd::relattn::{tam_forward, AttentionParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn pool_oracle(clips: &[Vec<f64>], segments: usize) -> Vec<Vec<f64>> {
    let n_c = clips.len();
    (0..segments)
        .map(|i| {
            let lo = i * n_c / segments;
            let hi = (i + 1) * n_c / segments;
            let members: Vec<usize> = if hi > lo { (lo..hi).collect() } else { vec![lo.min(n_c - 1)] };
            (0..clips[0].len())
                .map(|c| members.iter().map(|&m| clips[m][c]).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permuting_streams_permutes_outputs(seed in 0u64..1000, n in 1usize..7, rot in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(&mut rng, 3, 4, 2, 3).unwrap();
        let z: Vec<Tensor> = (0..3).map(|_| normal(&mut rng, n, 4)).collect();
        let order: Vec<usize> = (0..3).map(|t| (t + rot) % 3).collect();
        let mut moved = params.clone();
        moved.query = order.iter().map(|&t| params.query[t].clone()).collect();
        moved.key = order.iter().map(|&t| params.key[t].clone()).collect();
        moved.value = order.iter().map(|&t| params.value[t].clone()).collect();
        let zp: Vec<Tensor> = order.iter().map(|&t| z[t].clone()).collect();

        let a = tam_forward(&z, &params, true).unwrap();
        let b = tam_forward(&zp, &moved, true).unwrap();
        for (slot, &t) in order.iter().enumerate() {
            prop_assert!(a.per_stream[t].max_abs_diff(&b.per_stream[slot]) < 1e-12);
        }
        prop_assert!(a.aggregated.max_abs_diff(&b.aggregated) < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(&mut rng, 2, 6, 3, 2).unwrap();
        let z: Vec<Tensor> = (0..2).map(|_| normal(&mut rng, n, 6)).collect();
        let out = tam_forward(&z, &params, true).unwrap();
        for w in out.weights.iter().flatten() {
            for i in 0..n {
                let row = w.row(i);
                prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_pool_matches_index_oracle(
        clips in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..40),
        segments in 1usize..40,
    ) {
        let t = Tensor::from_rows(&clips).unwrap();
        let pooled = segment_pool(&t, segments).unwrap();
        let expect = pool_oracle(&clips, segments);
        prop_assert_eq!(pooled.shape(), &[segments, 3][..]);
        for (i, row) in expect.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                prop_assert!((pooled.at(i, c) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_expansion_keeps_order_and_coverage(
        segs in prop::collection::vec(-1.0f64..1.0, 1..20),
        frames in 1usize..200,
    ) {
        let out = expand_to_frames(&segs, frames).unwrap();
        prop_assert_eq!(out.len(), frames);
        prop_assert_eq!(out[0], segs[0]);
        let mut last = 0;
        for (f, v) in out.iter().enumerate() {
            let s = f * segs.len() / frames;
            prop_assert!(s >= last);
            prop_assert_eq!(*v, segs[s]);
            last = s;
        }
        if frames >= segs.len() {
            prop_assert_eq!(*out.last().unwrap(), *segs.last().unwrap());
        }
    }

    #[test]
    fn auc_flips_with_labels(
        scores in prop::collection::vec(-3i32..3, 2..60),
        labels in prop::collection::vec(0u8..2, 2..60),
    ) {
        let n = scores.len().min(labels.len());
        let s: Vec<f64> = scores[..n].iter().map(|&x| x as f64).collect();
        let l = &labels[..n];
        prop_assume!(l.contains(&0) && l.contains(&1));
        let flipped: Vec<u8> = l.iter().map(|&x| 1 - x).collect();
        let a = roc_auc(&s, l).unwrap();
        let b = roc_auc(&s, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}
