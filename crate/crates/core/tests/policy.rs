use planlab::geometry::{Point2, Resolution, Trajectory};
use planlab::policy::{PolicyParams, PolicyShape, SamplingConfig, SceneContext, TokenVocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_params(vocab: TokenVocab, seed: u64, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::init(PolicyShape::new(3, 8, vocab).unwrap(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for v in p.as_mut_slice() {
        *v += rng.gen_range(-scale..scale);
    }
    p
}

/// Upper 0.999 quantile of chi-square via the Wilson-Hilferty cube.
fn chi2_crit(df: f64) -> f64 {
    let z = 3.0902;
    let c = 2.0 / (9.0 * df);
    df * (1.0 - c + z * c.sqrt()).powi(3)
}

#[test]
fn plain_sampling_matches_policy_probabilities() {
    let vocab = TokenVocab::new(2, 1, vec![]).unwrap();
    let k = vocab.size();
    assert_eq!(k, 9);
    let p = random_params(vocab, 21, 1.0);
    let ctx = SceneContext(vec![0.4, -0.7, 0.2]);
    let probs: Vec<f64> = p.token_logprobs(&ctx, &[]).unwrap().iter().map(|l| l.exp()).collect();
    assert!(probs.iter().all(|&q| q > 1e-3), "{probs:?}");

    let n = 100_000;
    let cfg = SamplingConfig::plain(1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = vec![0usize; k];
    for _ in 0..n {
        let s = p.sample_sequence(&ctx, &cfg, &mut rng).unwrap();
        counts[s.tokens[0]] += 1;
    }
    let mut chi2 = 0.0;
    for (c, q) in counts.iter().zip(&probs) {
        let e = n as f64 * q;
        let sd = (e * (1.0 - q)).sqrt();
        assert!((*c as f64 - e).abs() < 4.0 * sd, "{counts:?} vs {probs:?}");
        chi2 += (*c as f64 - e).powi(2) / e;
    }
    assert!(chi2 < chi2_crit((k - 1) as f64), "chi2 {chi2}");
}

#[test]
fn quantization_error_is_bounded_by_half_a_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for grid in [2, 7, 16, 40] {
        let vocab = TokenVocab::new(grid, 10, vec![]).unwrap();
        for _ in 0..200 {
            let res = Resolution::new(rng.gen_range(50.0..2000.0), rng.gen_range(50.0..2000.0));
            let pts: Vec<Point2> = (0..10)
                .map(|_| Point2::new(rng.gen_range(0.0..res.width), rng.gen_range(0.0..res.height)))
                .collect();
            let traj = Trajectory::new(pts);
            let (tokens, clamped) = vocab.tokenize(&traj, res);
            assert_eq!(clamped, 0);
            let back = vocab.detokenize(&tokens, res).unwrap();
            let bound = 0.5 * ((res.width / grid as f64).powi(2) + (res.height / grid as f64).powi(2)).sqrt();
            for (a, b) in traj.points().iter().zip(back.points()) {
                let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                assert!(d <= bound + 1e-9, "grid {grid}: {d} > {bound}");
            }
        }
    }
}

#[test]
fn different_prefixes_give_different_distributions() {
    let vocab = TokenVocab::with_default_lexicon(4, 3).unwrap();
    let think = vocab.special(planlab::policy::Special::ThinkOpen);
    let w1 = vocab.word("cones").unwrap();
    let w2 = vocab.word("right").unwrap();
    let p = random_params(vocab, 8, 0.5);
    let ctx = SceneContext(vec![0.1, 0.2, 0.3]);
    let a = p.token_logprobs(&ctx, &[think, w1]).unwrap();
    let b = p.token_logprobs(&ctx, &[think, w2]).unwrap();
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-3, "{gap}");
}
