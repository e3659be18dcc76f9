//! Goodness-of-fit checks on the seeded fault draws.

use bitstorm_core::fault::{corrupt_element, maybe_inject};
use bitstorm_core::stream::derive_stream;
use bitstorm_core::{FaultKind, FaultSpec, Scalar, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const ALPHA: f64 = 0.001;

fn chi_square_p(counts: &[u64], expected: &[f64]) -> f64 {
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&c, &e)| (c as f64 - e).powi(2) / e)
        .sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}

fn uniform_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    chi_square_p(counts, &vec![e; counts.len()])
}

fn bit_histogram<T: Scalar>(calls: u64) -> Vec<u64> {
    let mut bits = vec![0u64; T::BITS as usize];
    let mut t = Tensor::<T>::filled(vec![4], T::one()).unwrap();
    for call in 0..calls {
        let mut stream = derive_stream(5, call, 0, 3);
        let c = corrupt_element(&mut t, (call % 4) as usize, FaultKind::BitFlipRandom, &mut stream).unwrap();
        bits[c.bit.unwrap() as usize] += 1;
    }
    bits
}

#[test]
fn bit_choice_is_uniform_for_both_widths() {
    let p32 = uniform_p(&bit_histogram::<f32>(32_000));
    let p64 = uniform_p(&bit_histogram::<f64>(64_000));
    assert!(p32 > ALPHA, "binary32 bit p-value {p32}");
    assert!(p64 > ALPHA, "binary64 bit p-value {p64}");
}

#[test]
fn element_choice_is_uniform_for_odd_lengths() {
    for len in [3usize, 97, 1000] {
        let calls = (len as u64 * 40).max(10_000);
        let spec = FaultSpec::layer_wise(0, FaultKind::Zero, 1.0, 8).unwrap();
        let mut counts = vec![0u64; len];
        for call in 0..calls {
            let mut t = Tensor::<f32>::filled(vec![len], 1.0).unwrap();
            let c = maybe_inject(&mut t, &spec, &mut derive_stream(8, 0, call, len as u64)).unwrap();
            counts[c.element] += 1;
        }
        let p = uniform_p(&counts);
        assert!(p > ALPHA, "length {len}: p-value {p}");
    }
}

#[test]
fn gate_rate_matches_probability() {
    for prob in [0.01, 0.1, 0.5, 0.9] {
        let spec = FaultSpec::layer_wise(0, FaultKind::Zero, prob, 21).unwrap();
        let calls = 20_000u64;
        let landed = (0..calls)
            .filter(|&call| {
                let mut t = Tensor::<f32>::filled(vec![2], 1.0).unwrap();
                maybe_inject(&mut t, &spec, &mut derive_stream(21, call, 1, 2)).is_some()
            })
            .count() as u64;
        let p = chi_square_p(
            &[landed, calls - landed],
            &[calls as f64 * prob, calls as f64 * (1.0 - prob)],
        );
        assert!(p > ALPHA, "p={prob}: {landed} of {calls}, p-value {p}");
    }
}

#[test]
fn random_value_bits_are_balanced() {
    let calls = 20_000u64;
    let mut ones = [0u64; 32];
    let mut t = Tensor::<f32>::filled(vec![1], 0.0).unwrap();
    for call in 0..calls {
        let c = corrupt_element(&mut t, 0, FaultKind::RandomValue, &mut derive_stream(2, call, 0, 0)).unwrap();
        assert!(c.corrupted <= u64::from(u32::MAX));
        for (b, count) in ones.iter_mut().enumerate() {
            *count += (c.corrupted >> b) & 1;
        }
    }
    for (b, &k) in ones.iter().enumerate() {
        let half = calls as f64 / 2.0;
        let p = chi_square_p(&[k, calls - k], &[half, half]);
        // Thirty-two tests: Bonferroni keeps the family-wise level at ALPHA.
        assert!(p > ALPHA / 32.0, "bit {b}: {k} ones of {calls}, p-value {p}");
    }
}
