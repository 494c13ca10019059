use b3d_core::layout::{
    build_triplet, pack_document, physical_index, prediction_row, sample_mask, LayoutConfig, LayoutRng, LayoutStats,
    TripletSample, Vocab,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample_for(bytes: &[u8], cfg: &LayoutConfig, index: u64) -> TripletSample {
    let v = Vocab::bytes();
    let mut st = LayoutStats::default();
    let p = pack_document(&v.encode(bytes), cfg, &v, &mut st).unwrap();
    build_triplet(
        &p.gold,
        &p.lossable,
        p.eos_block,
        &LayoutRng::new(cfg.seed, index),
        cfg,
        &v,
        &mut st,
    )
    .unwrap()
}

fn check_all(s: &TripletSample, v: &Vocab) {
    let b = s.block_size();
    let phys = s.physical();
    assert_eq!(phys.len(), 3 * b * s.n_blocks());
    let mut recount = Vec::new();
    for i in 0..s.n_blocks() {
        let b1 = &phys[3 * b * i..3 * b * i + b];
        let b2 = &phys[3 * b * i + b..3 * b * i + 2 * b];
        let b3 = &phys[3 * b * i + 2 * b..3 * b * (i + 1)];
        assert_eq!(b1, b2);
        assert_eq!(b3, s.gold_block(i));
        assert!(!b3.contains(&v.mask()));
        for j in 0..b {
            let m = s.mask_block(i)[j];
            let want = if m { v.mask() } else { s.gold_block(i)[j] };
            assert_eq!(b1[j], want);
            if m && s.lossable()[i * b + j] {
                recount.push((i, j));
            }
        }
    }
    assert_eq!(s.supervised(), &recount[..]);
    if let Some(e) = s.eos_block() {
        let gold = s.gold_block(e);
        for j in 0..b {
            if gold[j] == v.eos() || gold[j] == v.pad() {
                assert!(s.mask_block(e)[j], "EOS/PAD at {j} of block {e} not masked");
            }
        }
        let j_eos = gold.iter().position(|&t| t == v.eos()).unwrap();
        assert!(s.supervised().contains(&(e, j_eos)));
    }
    // every visible token of a block is physically left of every prediction
    // site of that block
    for &(i, j) in s.supervised() {
        for k in 0..b {
            if !s.mask_block(i)[k] {
                assert!(3 * b * i + k < physical_index(i, j, b));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn triplet_invariants_hold(
        bytes in proptest::collection::vec(any::<u8>(), 0..40),
        b in 1usize..9,
        n in 1usize..5,
        seed in any::<u64>(),
        idx in 0u64..1000,
    ) {
        let cfg = LayoutConfig { block_size: b, n_blocks: n, seed, ..Default::default() };
        let s = sample_for(&bytes, &cfg, idx);
        check_all(&s, &Vocab::bytes());
        s.check_invariants(&Vocab::bytes()).unwrap();
    }

    #[test]
    fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let v = Vocab::bytes();
        let t = v.encode(&bytes);
        prop_assert!(t.iter().all(|&x| v.is_content(x)));
        prop_assert_eq!(v.decode(&t).unwrap(), bytes);
    }

    #[test]
    fn draw_count_is_floor_r_b(seed in any::<u64>(), b in 1usize..64) {
        let v = Vocab::bytes();
        let cfg = LayoutConfig { block_size: b, p_full: 0.0, ..Default::default() };
        let gold = vec![5u32; b];
        let lossable = vec![true; b];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = sample_mask(&gold, &lossable, false, &mut rng, &cfg, &v);
        prop_assert_eq!(d.drawn, (d.ratio * b as f64).floor() as usize);
        prop_assert_eq!(d.mask.iter().filter(|&&m| m).count(), d.drawn);
    }
}

#[test]
fn pi_examples() {
    assert_eq!(physical_index(0, 0, 32), 32);
    assert_eq!(physical_index(1, 5, 32), 133);
    assert_eq!(prediction_row(1, 5, 32), 132);
}

#[test]
fn encode_examples() {
    let v = Vocab::bytes();
    assert!(v.encode(b"").is_empty());
    assert_eq!(v.encode(&[0x41]), vec![66]);
}

#[test]
fn full_override_block() {
    let cfg = LayoutConfig {
        block_size: 8,
        n_blocks: 1,
        p_full: 1.0,
        ..Default::default()
    };
    let v = Vocab::bytes();
    let s = sample_for(b"abcdefg", &cfg, 0);
    assert!(s.physical()[..16].iter().all(|&t| t == v.mask()));
    assert_eq!(&s.physical()[16..], s.gold());
}

/// Monte-Carlo statistics of the mask sampler with default settings over
/// 100k blocks.
#[test]
fn mask_statistics_match_the_sampling_rule() {
    let v = Vocab::bytes();
    let cfg = LayoutConfig::default();
    let b = cfg.block_size;
    let n = 100_000;
    let gold = vec![10u32; b];
    let lossable = vec![true; b];
    let mut full = 0usize;
    let mut draws = Vec::new();
    for k in 0..n {
        let mut rng = LayoutRng::new(17, k as u64).block(0);
        let d = sample_mask(&gold, &lossable, false, &mut rng, &cfg, &v);
        if d.mask.iter().all(|&m| m) {
            full += 1;
        }
        if !d.overridden {
            draws.push(d.drawn as f64);
        }
    }
    // a non-overridden block is full only when r = 1 exactly, which has
    // probability zero
    let frac = full as f64 / n as f64;
    let sigma = (0.1 * 0.9 / n as f64).sqrt();
    assert!((frac - 0.1).abs() <= 3.0 * sigma, "full fraction {frac}");

    let m = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / m;
    // ⌊UB⌋ is uniform on 0..B-1: mean (B-1)/2, variance (B²-1)/12
    let sd = (((b * b - 1) as f64) / 12.0).sqrt() / m.sqrt();
    let want = (b as f64 - 1.0) / 2.0;
    assert!((mean - want).abs() <= 3.0 * sd, "mean draw {mean} vs {want}");
}

#[test]
fn eos_and_pad_are_always_masked() {
    let cfg = LayoutConfig {
        block_size: 32,
        n_blocks: 2,
        ..Default::default()
    };
    let v = Vocab::bytes();
    for k in 0..5000u64 {
        let len = (k % 63) as usize;
        let bytes: Vec<u8> = (0..len).map(|i| b'a' + (i % 26) as u8).collect();
        let s = sample_for(&bytes, &cfg, k);
        let e = s.eos_block().unwrap();
        for (j, &t) in s.gold_block(e).iter().enumerate() {
            if t == v.eos() || t == v.pad() {
                assert!(s.mask_block(e)[j]);
            }
        }
    }
}

#[test]
fn layout_is_independent_of_build_order() {
    let cfg = LayoutConfig {
        block_size: 8,
        n_blocks: 3,
        seed: 9,
        ..Default::default()
    };
    let forward: Vec<_> = (0..10).map(|k| sample_for(b"some text here", &cfg, k)).collect();
    let backward: Vec<_> = (0..10).rev().map(|k| sample_for(b"some text here", &cfg, k)).collect();
    let mut backward = backward;
    backward.reverse();
    assert_eq!(forward, backward);
}
