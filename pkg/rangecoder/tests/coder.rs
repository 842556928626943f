//! Integration tests: golden vectors pinned to the reference implementation,
//! large roundtrip fuzz, codelength bound on skewed streams, and bounded
//! behavior on corrupt input.

use lrc_rangecoder::{encode_intervals, CoderError, Decoder, Encoder, FREQ_TOTAL};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn encode_symbols(symbols: &[usize], cdfs: &[&[u32]]) -> Vec<u8> {
    let mut enc = Encoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(cdf[s], cdf[s + 1]).unwrap();
    }
    enc.finish()
}

fn random_cdf(rng: &mut StdRng, max_bins: usize) -> Vec<u32> {
    let bins = rng.gen_range(2..=max_bins);
    let mut weights: Vec<u64> = (0..bins).map(|_| rng.gen_range(1..=1000)).collect();
    let total: u64 = weights.iter().sum();
    // quantize to 16-bit total with every bin >= 1
    let mut freq: Vec<u64> = weights
        .iter()
        .map(|&w| ((w * FREQ_TOTAL as u64) / total).max(1))
        .collect();
    let mut sum: u64 = freq.iter().sum();
    while sum > FREQ_TOTAL as u64 {
        let i = freq
            .iter()
            .enumerate()
            .max_by_key(|(_, &f)| f)
            .map(|(i, _)| i)
            .unwrap();
        freq[i] -= 1;
        sum -= 1;
    }
    if sum < FREQ_TOTAL as u64 {
        let i = freq
            .iter()
            .enumerate()
            .max_by_key(|(_, &f)| f)
            .map(|(i, _)| i)
            .unwrap();
        freq[i] += FREQ_TOTAL as u64 - sum;
    }
    weights.clear();
    let mut cdf = vec![0u32];
    let mut acc = 0u64;
    for f in freq {
        acc += f;
        cdf.push(acc as u32);
    }
    cdf
}

#[test]
fn golden_equiprobable_binary() {
    // Eight equiprobable binary symbols: one content byte plus the 9-byte tail.
    let cdf: Vec<u32> = vec![0, 32768, 65536];
    let symbols = [0usize, 1, 1, 0, 1, 0, 0, 1];
    let cdfs: Vec<&[u32]> = symbols.iter().map(|_| cdf.as_slice()).collect();
    let data = encode_symbols(&symbols, &cdfs);
    assert_eq!(data, vec![0, 104, 255, 255, 255, 255, 254, 0, 0, 0]);
}

#[test]
fn golden_skewed_ternary() {
    let cdf: Vec<u32> = vec![0, 52429, 62259, 65536];
    let symbols: Vec<usize> = (0..32).map(|i| (i * 5 + i / 4) % 3).collect();
    let cdfs: Vec<&[u32]> = symbols.iter().map(|_| cdf.as_slice()).collect();
    let data = encode_symbols(&symbols, &cdfs);
    assert_eq!(
        data,
        vec![0, 203, 187, 9, 132, 186, 134, 244, 19, 233, 157, 137, 83, 229, 215, 116]
    );
}

#[test]
fn golden_mixed_tables() {
    let cdf2: Vec<u32> = vec![0, 32768, 65536];
    let cdf3: Vec<u32> = vec![0, 52429, 62259, 65536];
    let cdf4: Vec<u32> = vec![0, 16384, 32768, 49152, 65536];
    let cdfs: Vec<&[u32]> = vec![&cdf2, &cdf3, &cdf4, &cdf3, &cdf2];
    let symbols = [1usize, 1, 3, 0, 0];
    let data = encode_symbols(&symbols, &cdfs);
    assert_eq!(data, vec![0, 244, 204, 191, 255, 255, 253, 243, 51]);
}

#[test]
fn roundtrip_fuzz_one_million_symbols() {
    let mut rng = StdRng::seed_from_u64(0xC0DEC);
    let n_tables = 64;
    let tables: Vec<Vec<u32>> = (0..n_tables).map(|_| random_cdf(&mut rng, 48)).collect();
    let total: usize = 1_000_000;
    let mut symbols = Vec::with_capacity(total);
    let mut table_ids = Vec::with_capacity(total);
    for _ in 0..total {
        let t = rng.gen_range(0..n_tables);
        let bins = tables[t].len() - 1;
        // skew draws toward low bins to exercise carry paths
        let s = if rng.gen_bool(0.7) { 0 } else { rng.gen_range(0..bins) };
        table_ids.push(t);
        symbols.push(s);
    }
    let mut enc = Encoder::new();
    for i in 0..total {
        let cdf = &tables[table_ids[i]];
        enc.encode(cdf[symbols[i]], cdf[symbols[i] + 1]).unwrap();
    }
    let data = enc.finish();
    let mut dec = Decoder::new(&data).unwrap();
    let mut mismatches = 0usize;
    for i in 0..total {
        let cdf = &tables[table_ids[i]];
        if dec.decode(cdf).unwrap() != symbols[i] {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
    assert_eq!(dec.position(), data.len(), "decoder must consume the stream exactly");
}

#[test]
fn codelength_close_to_ideal_on_skewed_streams() {
    let mut rng = StdRng::seed_from_u64(7);
    for &(p_hot, bins, heavy_first) in
        &[(0.99f64, 2usize, true), (0.99, 2, false), (0.95, 8, true)]
    {
        let hot = ((p_hot * FREQ_TOTAL as f64).round() as u32)
            .min(FREQ_TOTAL - (bins as u32 - 1));
        let rest = (FREQ_TOTAL - hot) / (bins as u32 - 1);
        let mut freq = vec![rest; bins];
        let hot_idx = if heavy_first { 0 } else { bins - 1 };
        freq[hot_idx] = FREQ_TOTAL - rest * (bins as u32 - 1);
        let mut cdf = vec![0u32];
        let mut acc = 0u32;
        for f in &freq {
            acc += f;
            cdf.push(acc);
        }
        let n = 100_000;
        let mut ideal_bits = 0.0f64;
        let mut intervals = Vec::with_capacity(n);
        for _ in 0..n {
            let s = if rng.gen_bool(p_hot) {
                hot_idx
            } else {
                let mut s = rng.gen_range(0..bins);
                while s == hot_idx {
                    s = rng.gen_range(0..bins);
                }
                s
            };
            ideal_bits -= ((cdf[s + 1] - cdf[s]) as f64 / FREQ_TOTAL as f64).log2();
            intervals.push((cdf[s], cdf[s + 1]));
        }
        let data = encode_intervals(&intervals).unwrap();
        let coded_bits = 8.0 * data.len() as f64;
        let bound = ideal_bits * 1.001 + 8.0 * 16.0;
        assert!(
            coded_bits <= bound,
            "coded {coded_bits} bits > bound {bound} (ideal {ideal_bits})"
        );
    }
}

#[test]
fn corrupt_streams_never_panic() {
    let mut rng = StdRng::seed_from_u64(99);
    let cdf = random_cdf(&mut rng, 16);
    for trial in 0..200 {
        let len = rng.gen_range(0..64);
        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        match Decoder::new(&data) {
            Ok(mut dec) => {
                for _ in 0..1000 {
                    match dec.decode(&cdf) {
                        Ok(s) => assert!(s < cdf.len() - 1, "trial {trial}"),
                        Err(_) => break,
                    }
                }
            }
            Err(CoderError::Exhausted { .. }) => {}
            Err(e) => panic!("unexpected init error {e:?}"),
        }
    }
}

#[test]
fn invalid_interval_rejected() {
    let mut enc = Encoder::new();
    assert_eq!(enc.encode(100, 100), Err(CoderError::InvalidInterval));
    assert_eq!(enc.encode(200, 100), Err(CoderError::InvalidInterval));
    assert_eq!(enc.encode(0, FREQ_TOTAL + 1), Err(CoderError::InvalidInterval));
}
